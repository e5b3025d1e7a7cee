#include "qgc/nn.hpp"

#include <cmath>
#include <stdexcept>

namespace qgc {

namespace {
constexpr double kMaskedBias = -1e30;
constexpr double kInitStd = 0.02;
}  // namespace

LayerNormParams LayerNormParams::create(int d, bool requires_grad) {
  LayerNormParams p;
  p.gain = Tensor::full({1, d}, 1.0, requires_grad);
  p.bias = Tensor::zeros({1, d}, requires_grad);
  return p;
}

AttentionParams AttentionParams::create(int d, int heads, Rng& rng, bool requires_grad) {
  if (heads <= 0 || d % heads != 0)
    throw std::invalid_argument("attention: model dim " + std::to_string(d) +
                                " not divisible by " + std::to_string(heads) + " heads");
  AttentionParams p;
  p.heads = heads;
  p.wq = Tensor::randn({d, d}, rng, kInitStd, requires_grad);
  p.bq = Tensor::zeros({1, d}, requires_grad);
  p.wk = Tensor::randn({d, d}, rng, kInitStd, requires_grad);
  p.bk = Tensor::zeros({1, d}, requires_grad);
  p.wv = Tensor::randn({d, d}, rng, kInitStd, requires_grad);
  p.bv = Tensor::zeros({1, d}, requires_grad);
  p.wo = Tensor::randn({d, d}, rng, kInitStd, requires_grad);
  p.bo = Tensor::zeros({1, d}, requires_grad);
  return p;
}

FeedForwardParams FeedForwardParams::create(int d, int hidden, Rng& rng, bool requires_grad) {
  FeedForwardParams p;
  p.w1 = Tensor::randn({d, hidden}, rng, kInitStd, requires_grad);
  p.b1 = Tensor::zeros({1, hidden}, requires_grad);
  p.w2 = Tensor::randn({hidden, d}, rng, kInitStd, requires_grad);
  p.b2 = Tensor::zeros({1, d}, requires_grad);
  return p;
}

EncoderLayerParams EncoderLayerParams::create(int d, int heads, int ff_hidden, Rng& rng,
                                              bool ff_requires_grad) {
  EncoderLayerParams p;
  p.ln1 = LayerNormParams::create(d);
  p.attn = AttentionParams::create(d, heads, rng);
  p.ln2 = LayerNormParams::create(d);
  p.ff = FeedForwardParams::create(d, ff_hidden, rng, ff_requires_grad);
  return p;
}

Tensor attention_bias_full(int len) { return Tensor::zeros({len, len}); }

Tensor attention_bias_causal(int len) {
  Tensor bias = Tensor::zeros({len, len});
  for (int i = 0; i < len; ++i)
    for (int j = i + 1; j < len; ++j) bias.at(i, j) = kMaskedBias;
  return bias;
}

Tensor attention_bias_from_mask(const std::vector<uint8_t>& mask, int len) {
  if (static_cast<long>(mask.size()) != static_cast<long>(len) * len)
    throw std::invalid_argument("attention mask must have len*len entries");
  Tensor bias = Tensor::zeros({len, len});
  for (int i = 0; i < len; ++i)
    for (int j = 0; j < len; ++j)
      if (!mask[static_cast<size_t>(i) * len + j]) bias.at(i, j) = kMaskedBias;
  return bias;
}

Tensor multi_head_attention(const Tensor& x, const AttentionParams& p, const Tensor& attn_bias) {
  const int len = x.rows();
  const int d = x.cols();
  if (attn_bias.rows() != len || attn_bias.cols() != len)
    throw std::invalid_argument("attention bias shape " + shape_str(attn_bias.shape()) +
                                " does not match sequence length " + std::to_string(len));
  const int hd = d / p.heads;
  const double inv_sqrt = 1.0 / std::sqrt(static_cast<double>(hd));

  Tensor q = add_row(matmul(x, p.wq), p.bq);
  Tensor k = add_row(matmul(x, p.wk), p.bk);
  Tensor v = add_row(matmul(x, p.wv), p.bv);

  std::vector<Tensor> head_outs;
  head_outs.reserve(static_cast<size_t>(p.heads));
  for (int h = 0; h < p.heads; ++h) {
    Tensor qh = slice_cols(q, h * hd, hd);
    Tensor kh = slice_cols(k, h * hd, hd);
    Tensor vh = slice_cols(v, h * hd, hd);
    Tensor scores = add(scale(matmul_nt(qh, kh), inv_sqrt), attn_bias);
    Tensor att = softmax_rows(scores);
    head_outs.push_back(matmul(att, vh));
  }
  Tensor merged = p.heads == 1 ? head_outs[0] : concat_cols(head_outs);
  return add_row(matmul(merged, p.wo), p.bo);
}

Tensor feed_forward(const Tensor& x, const FeedForwardParams& p) {
  Tensor h = gelu(add_row(matmul(x, p.w1), p.b1));
  return add_row(matmul(h, p.w2), p.b2);
}

Tensor transformer_encoder_layer(const Tensor& x, const EncoderLayerParams& p,
                                 const Tensor& attn_bias) {
  Tensor h = add(x, multi_head_attention(layer_norm(x, p.ln1.gain, p.ln1.bias), p.attn, attn_bias));
  return add(h, feed_forward(layer_norm(h, p.ln2.gain, p.ln2.bias), p.ff));
}

void collect(NamedParams& out, const std::string& prefix, const LayerNormParams& p) {
  out.push_back({prefix + ".gain", p.gain});
  out.push_back({prefix + ".bias", p.bias});
}

void collect(NamedParams& out, const std::string& prefix, const AttentionParams& p) {
  out.push_back({prefix + ".wq", p.wq});
  out.push_back({prefix + ".bq", p.bq});
  out.push_back({prefix + ".wk", p.wk});
  out.push_back({prefix + ".bk", p.bk});
  out.push_back({prefix + ".wv", p.wv});
  out.push_back({prefix + ".bv", p.bv});
  out.push_back({prefix + ".wo", p.wo});
  out.push_back({prefix + ".bo", p.bo});
}

void collect(NamedParams& out, const std::string& prefix, const FeedForwardParams& p) {
  out.push_back({prefix + ".w1", p.w1});
  out.push_back({prefix + ".b1", p.b1});
  out.push_back({prefix + ".w2", p.w2});
  out.push_back({prefix + ".b2", p.b2});
}

void collect(NamedParams& out, const std::string& prefix, const EncoderLayerParams& p) {
  collect(out, prefix + ".ln1", p.ln1);
  collect(out, prefix + ".attn", p.attn);
  collect(out, prefix + ".ln2", p.ln2);
  collect(out, prefix + ".ff", p.ff);
}

std::vector<Tensor> trainable_of(const NamedParams& params) {
  std::vector<Tensor> out;
  for (const auto& nt : params)
    if (nt.tensor.requires_grad()) out.push_back(nt.tensor);
  return out;
}

}  // namespace qgc
