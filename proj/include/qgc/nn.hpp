#pragma once

#include "qgc/tensor.hpp"

#include <string>
#include <vector>

namespace qgc {

struct NamedTensor {
  std::string name;
  Tensor tensor;
};

using NamedParams = std::vector<NamedTensor>;

struct LayerNormParams {
  Tensor gain;  // [1×d], ones
  Tensor bias;  // [1×d], zeros
  static LayerNormParams create(int d, bool requires_grad = true);
};

struct AttentionParams {
  int heads = 1;
  Tensor wq, bq, wk, bk, wv, bv, wo, bo;
  static AttentionParams create(int d, int heads, Rng& rng, bool requires_grad = true);
};

struct FeedForwardParams {
  Tensor w1, b1, w2, b2;
  static FeedForwardParams create(int d, int hidden, Rng& rng, bool requires_grad = true);
};

struct EncoderLayerParams {
  LayerNormParams ln1;
  AttentionParams attn;
  LayerNormParams ln2;
  FeedForwardParams ff;
  static EncoderLayerParams create(int d, int heads, int ff_hidden, Rng& rng,
                                   bool ff_requires_grad = true);
};

// additive attention biases: 0 where attention is allowed, -1e30 where masked
Tensor attention_bias_full(int len);
Tensor attention_bias_causal(int len);
// mask[i*len + j] nonzero ⇔ position i may attend to position j
Tensor attention_bias_from_mask(const std::vector<uint8_t>& mask, int len);

Tensor multi_head_attention(const Tensor& x, const AttentionParams& p, const Tensor& attn_bias);
Tensor feed_forward(const Tensor& x, const FeedForwardParams& p);

// pre-norm residual block: x + attn(ln1(x)), then + ff(ln2(·))
Tensor transformer_encoder_layer(const Tensor& x, const EncoderLayerParams& p,
                                 const Tensor& attn_bias);

// named-parameter collection, used for checkpoints, hashing and optimizers
void collect(NamedParams& out, const std::string& prefix, const LayerNormParams& p);
void collect(NamedParams& out, const std::string& prefix, const AttentionParams& p);
void collect(NamedParams& out, const std::string& prefix, const FeedForwardParams& p);
void collect(NamedParams& out, const std::string& prefix, const EncoderLayerParams& p);

std::vector<Tensor> trainable_of(const NamedParams& params);

}  // namespace qgc
