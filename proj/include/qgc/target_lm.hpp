#pragma once

#include "qgc/checkpoint.hpp"
#include "qgc/data.hpp"
#include "qgc/nn.hpp"

#include <variant>

namespace qgc {

// ---------------------------------------------------------------------------
// MixedInput: an ordered list of token spans and soft-embedding spans. Token
// spans embed through the LM's table; soft spans enter the residual stream
// directly, so gradients flow back into whatever produced them.
// ---------------------------------------------------------------------------
struct TokenSegment {
  std::vector<int> ids;
};

struct SoftSegment {
  Tensor vectors;  // [n × d_model]
};

struct MixedInput {
  std::vector<std::variant<TokenSegment, SoftSegment>> segments;

  long length() const;
  void push_tokens(std::vector<int> ids);
  void push_token(int id);
  void push_soft(Tensor vectors);
};

// canonical scaffold: <bos> instruction <sep> (doc <sep>)* query <sep>
MixedInput build_prompt(const std::vector<int>& instruction,
                        const std::vector<std::vector<int>>& docs, const std::vector<int>& query);
// same scaffold over a subset of the example's documents, given by index
MixedInput build_raw_prompt(const QueryExample& ex, const std::vector<int>& doc_indices);
std::vector<int> all_doc_indices(const QueryExample& ex);
// prompt ⊕ answer ⊕ <eos>, as a flat id sequence for LM pretraining
std::vector<int> build_training_sequence(const QueryExample& ex,
                                         const std::vector<int>& doc_indices);

struct LMConfig {
  int vocab_size = 0;
  int d_model = 128;
  int layers = 4;
  int heads = 4;
  int ff_hidden = 512;
  int context_limit = 512;
};

struct AnswerLogprobs {
  double log_prob = 0.0;                        // Σ log p(answer_i | prefix, answer_<i)
  std::vector<std::vector<double>> dists;       // per-position distributions, each sums to 1
};

class TargetLM {
 public:
  TargetLM(const LMConfig& cfg, Rng& rng);

  const LMConfig& config() const { return cfg_; }
  bool frozen() const { return frozen_; }
  void freeze();

  // [L × d_model] final hidden states (pre-norm stack, final layer norm)
  Tensor hidden_states(const MixedInput& input) const;

  // [L−1 × vocab] logits where row i predicts sequence[i+1]; pretraining loss
  Tensor next_token_logits(const std::vector<int>& sequence) const;

  // logits rows that predict each answer token, given prompt ⊕ answer
  Tensor answer_logits(const MixedInput& prompt, const std::vector<int>& answer) const;

  Tensor answer_cross_entropy(const MixedInput& prompt, const std::vector<int>& answer) const;
  AnswerLogprobs answer_logprobs(const MixedInput& prompt, const std::vector<int>& answer) const;

  // KL(teacher ‖ student) summed over answer positions; the teacher runs on
  // `full` detached, the student on `compressed` with gradients
  Tensor answer_kl(const MixedInput& full, const MixedInput& compressed,
                   const std::vector<int>& answer) const;

  // temperature-0 decoding, ties broken toward the lowest token id; stops at
  // <eos> (not included in the result) or after max_new_tokens
  std::vector<int> generate_greedy(const MixedInput& prompt, int max_new_tokens) const;

  NamedParams named_params() const;
  std::vector<Tensor> trainable_params() const;
  uint64_t params_hash() const;

  void save(const std::string& path) const;  // checkpoint + JSON sidecar
  static TargetLM load(const std::string& path);

 private:
  LMConfig cfg_;
  Tensor tok_emb_;  // [V × d]
  Tensor pos_emb_;  // [context_limit × d]
  std::vector<EncoderLayerParams> layers_;
  LayerNormParams final_ln_;
  bool frozen_ = false;
};

// ---------------------------------------------------------------------------
// Pretraining: next-token cross-entropy over the full scaffold, with each
// example seen through a fresh random subset of its documents (gold always
// included) so that single-document and full-context prompts both stay
// in-distribution. Early-stops once greedy gold-document accuracy on the dev
// probe reaches target_accuracy; throws if the budget ends below it.
// ---------------------------------------------------------------------------
struct PretrainConfig {
  int epochs = 8;
  double learning_rate = 6e-4;
  int batch_size = 16;
  int warmup_steps = 100;
  double target_accuracy = 0.95;  // 0 disables both early stop and the final check
  int eval_examples = 200;
  int max_new_tokens = 4;
  int min_docs = 1;
  int max_docs = 0;  // 0 → every document of the example
  uint64_t seed = 1;
};

struct PretrainReport {
  std::vector<double> epoch_loss;      // mean next-token CE
  std::vector<double> epoch_accuracy;  // dev gold-document greedy accuracy
  double best_accuracy = 0.0;
  int best_epoch = -1;
  bool reached_target = false;
};

PretrainReport pretrain_lm(TargetLM& lm, const std::vector<QueryExample>& train,
                           const std::vector<QueryExample>& dev, const PretrainConfig& cfg);

}  // namespace qgc
