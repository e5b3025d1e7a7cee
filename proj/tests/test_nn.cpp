#include "qgc/nn.hpp"

#include <doctest.h>

#include <cmath>
#include <set>

#include "fd_check.hpp"

using namespace qgc;
using qgc::testutil::fd_check;

namespace {

void zero_all(Tensor t) {
  for (auto& v : t.data()) v = 0.0;
}

}  // namespace

TEST_CASE("encoder layer with zero attention and feed-forward is the identity") {
  Rng rng(3);
  EncoderLayerParams p = EncoderLayerParams::create(8, 2, 16, rng);
  for (Tensor t : {p.attn.wq, p.attn.bq, p.attn.wk, p.attn.bk, p.attn.wv, p.attn.bv, p.attn.wo,
                   p.attn.bo, p.ff.w1, p.ff.b1, p.ff.w2, p.ff.b2})
    zero_all(t);
  Tensor x = Tensor::randn({5, 8}, rng, 1.0);
  Tensor y = transformer_encoder_layer(x, p, attention_bias_full(5));
  for (long i = 0; i < x.numel(); ++i) CHECK(y.data()[i] == x.data()[i]);  // bitwise
}

TEST_CASE("masked positions cannot influence other rows") {
  Rng rng(5);
  const int len = 6, d = 8, masked = 2;
  EncoderLayerParams p = EncoderLayerParams::create(d, 2, 16, rng);
  // nobody may attend to `masked`; `masked` itself sees everything
  std::vector<uint8_t> mask(static_cast<size_t>(len) * len, 1);
  for (int i = 0; i < len; ++i)
    if (i != masked) mask[static_cast<size_t>(i) * len + masked] = 0;
  Tensor bias = attention_bias_from_mask(mask, len);

  Tensor x1 = Tensor::randn({len, d}, rng, 1.0);
  Tensor x2 = Tensor::from_data(x1.shape(), x1.data());
  for (int j = 0; j < d; ++j) x2.at(masked, j) += 3.7;

  Tensor y1 = transformer_encoder_layer(x1, p, bias);
  Tensor y2 = transformer_encoder_layer(x2, p, bias);
  for (int i = 0; i < len; ++i) {
    if (i == masked) continue;
    for (int j = 0; j < d; ++j) CHECK(y1.at(i, j) == y2.at(i, j));  // bitwise
  }
}

TEST_CASE("causal bias keeps earlier rows independent of later tokens") {
  Rng rng(8);
  const int len = 5, d = 4;
  EncoderLayerParams p = EncoderLayerParams::create(d, 2, 8, rng);
  Tensor bias = attention_bias_causal(len);
  Tensor x1 = Tensor::randn({len, d}, rng, 1.0);
  Tensor x2 = Tensor::from_data(x1.shape(), x1.data());
  for (int j = 0; j < d; ++j) x2.at(len - 1, j) = -x2.at(len - 1, j) + 0.25;
  Tensor y1 = transformer_encoder_layer(x1, p, bias);
  Tensor y2 = transformer_encoder_layer(x2, p, bias);
  for (int i = 0; i + 1 < len; ++i)
    for (int j = 0; j < d; ++j) CHECK(y1.at(i, j) == y2.at(i, j));
}

TEST_CASE("attention rejects bad head counts and bias shapes") {
  Rng rng(1);
  CHECK_THROWS_AS(AttentionParams::create(6, 4, rng), std::invalid_argument);
  AttentionParams p = AttentionParams::create(8, 2, rng);
  Tensor x = Tensor::zeros({4, 8});
  CHECK_THROWS_AS(multi_head_attention(x, p, attention_bias_full(3)), std::invalid_argument);
}

TEST_CASE("finite differences validate the full encoder layer") {
  Rng rng(17);
  const int len = 3, d = 4;
  EncoderLayerParams p = EncoderLayerParams::create(d, 2, 8, rng);
  Tensor x = Tensor::randn({len, d}, rng, 0.7, true);
  Tensor w = Tensor::randn({len, d}, rng, 1.0, false);
  Tensor bias = attention_bias_causal(len);

  NamedParams named;
  collect(named, "layer", p);
  std::vector<Tensor> params = trainable_of(named);
  params.push_back(x);

  auto r = fd_check([&] { return sum_all(mul(transformer_encoder_layer(x, p, bias), w)); },
                    params);
  CHECK(r.max_rel_err < 1e-5);
  CHECK(r.components > 100);
}

TEST_CASE("single-position sequences are handled") {
  Rng rng(2);
  EncoderLayerParams p = EncoderLayerParams::create(4, 2, 8, rng);
  Tensor x = Tensor::randn({1, 4}, rng, 1.0);
  Tensor y = transformer_encoder_layer(x, p, attention_bias_causal(1));
  CHECK(y.rows() == 1);
  for (double v : y.data()) CHECK(std::isfinite(v));
}

TEST_CASE("parameter collection yields unique names and respects freezing") {
  Rng rng(9);
  EncoderLayerParams p = EncoderLayerParams::create(8, 2, 16, rng, /*ff_requires_grad=*/false);
  NamedParams named;
  collect(named, "enc0", p);
  CHECK(named.size() == 16);  // 2 LN pairs + 8 attention + 4 feed-forward
  std::set<std::string> names;
  for (const auto& nt : named) names.insert(nt.name);
  CHECK(names.size() == named.size());

  std::vector<Tensor> trainable = trainable_of(named);
  CHECK(trainable.size() == 12);  // feed-forward excluded
  for (const auto& nt : named)
    if (nt.name.find(".ff.") != std::string::npos) CHECK_FALSE(nt.tensor.requires_grad());
}
