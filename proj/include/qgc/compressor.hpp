#pragma once

#include "qgc/target_lm.hpp"

namespace qgc {

// ---------------------------------------------------------------------------
// Query-guided compressor. Four stages:
//   1. context encoder   — query and document encoded jointly (bidirectional)
//   2. n-gram pooling    — softmax over query–token affinities inside each
//                          n-token group; pooled vector per group
//   3. reviewing layers  — pooled slots re-read query and document states
//   4. semantic alignment— affine map from encoder width into the LM space
// The feed-forward sublayers of both encoder stacks stay frozen at their
// initial values; everything else trains.
// ---------------------------------------------------------------------------
struct CompressorConfig {
  int vocab_size = 0;
  int d_c = 128;      // encoder width
  int d_lm = 128;     // target LM width (alignment output)
  int heads = 4;
  int enc_layers = 2;
  int rev_layers = 2;
  int ff_hidden = 512;
  int context_limit = 512;
  int n_default = 4;
  // ablation switches; all true for the full model
  bool joint_encoding = true;     // false → query and document encoded separately
  bool weighted_pooling = true;   // false → uniform mean inside each group
  bool reviewing = true;          // false → pooled vectors skip the reviewing stack
};

struct EncodedContext {
  Tensor query;     // [N_q × d_c]
  Tensor document;  // [N_d × d_c]
};

struct PooledDocument {
  Tensor pooled;                // [N_g × d_c], N_g = ceil(N_d / n)
  std::vector<double> weights;  // per-token pooling weights, grouped, sums to 1 per group
  int n = 0;
};

struct CompressedDocument {
  Tensor embeddings;            // [N_g × d_lm]
  int n_gram_size = 0;
  int source_len = 0;
  std::vector<double> weights;
};

class Compressor {
 public:
  Compressor(const CompressorConfig& cfg, Rng& rng);

  // token embedding table copied from the frozen target LM (requires d_c == d_lm)
  static Compressor init_from_lm(CompressorConfig cfg, const TargetLM& lm, Rng& rng);

  const CompressorConfig& config() const { return cfg_; }

  EncodedContext encode_context(const std::vector<int>& query_ids,
                                const std::vector<int>& doc_ids) const;
  PooledDocument pool_ngrams(const Tensor& h_q, const Tensor& h_d, int n) const;
  Tensor review(const Tensor& h_q, const Tensor& h_d, const Tensor& pooled) const;
  Tensor align(const Tensor& reviewed) const;

  CompressedDocument compress_document(const std::vector<int>& query_ids,
                                       const std::vector<int>& doc_ids, int n) const;

  NamedParams named_params() const;
  std::vector<Tensor> trainable_params() const;
  uint64_t params_hash() const;
  uint64_t mlp_hash() const;  // the frozen feed-forward sublayers only

  void save(const std::string& path) const;
  static Compressor load(const std::string& path);

 private:
  CompressorConfig cfg_;
  Tensor tok_emb_;   // [V × d_c]
  Tensor pos_enc_;   // [context_limit × d_c], context encoder positions
  Tensor pos_rev_;   // [context_limit × d_c], reviewing positions
  std::vector<EncoderLayerParams> enc_;
  std::vector<EncoderLayerParams> rev_;
  Tensor align_w_;   // [d_c × d_lm]
  Tensor align_b_;   // [1 × d_lm]

  Tensor run_encoder(const std::vector<int>& ids) const;
};

}  // namespace qgc
