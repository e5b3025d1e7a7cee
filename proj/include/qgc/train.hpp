#pragma once

#include "qgc/compressor.hpp"

namespace qgc {

// ---------------------------------------------------------------------------
// Compressor training: CE on the answer through compressed documents plus KL
// against the frozen LM's distribution over the same answer positions given
// the raw documents. The LM and the compressor's feed-forward sublayers must
// not move; both are hash-audited every epoch.
// ---------------------------------------------------------------------------

struct TrainConfig {
  double learning_rate = 5e-5;
  int batch_size = 16;
  int epochs = 15;
  std::vector<int> ngram_candidates = {4, 6, 8, 10};  // one drawn per batch
  int distractor_min = 1;
  int distractor_max = 4;
  double kl_weight = 1.0;
  uint64_t seed = 0;
  double target_accuracy = 0.0;  // early stop once dev accuracy reaches this (0 = off)
  int eval_ngram = 4;            // dev probe compresses every document at this n
  int eval_examples = 200;
  int max_new_tokens = 4;
};

struct TrainInstance {
  const QueryExample* example = nullptr;
  std::vector<const Document*> docs;  // gold + sampled distractors, shuffled
};

struct Batch {
  std::vector<TrainInstance> instances;
  int ngram = 0;
};

// flat view over every corpus document, used to sample distractors that do
// not contain an instance's answer token
std::vector<const Document*> build_distractor_pool(const std::vector<QueryExample>& corpus);

Batch build_batch(const std::vector<QueryExample>& corpus, const std::vector<int>& example_indices,
                  const std::vector<const Document*>& pool, const TrainConfig& cfg, Rng& rng);

struct LossBreakdown {
  Tensor total;  // ce + kl_weight · kl, scalar, differentiable
  double ce = 0.0;
  double kl = 0.0;
};

LossBreakdown compressor_loss(const TrainInstance& instance, const Compressor& compressor,
                              const TargetLM& lm, int ngram, double kl_weight);

// greedy accuracy with every document compressed at a fixed n
double fixed_n_accuracy(const std::vector<QueryExample>& examples, const Compressor& compressor,
                        const TargetLM& lm, int ngram, int max_new_tokens, int limit = 0);

struct EpochStats {
  double mean_ce = 0.0;
  double mean_kl = 0.0;
  double dev_accuracy = 0.0;
};

struct TrainReport {
  std::vector<EpochStats> epochs;
  double best_dev_accuracy = 0.0;
  int best_epoch = -1;
  bool frozen_lm_ok = false;
  bool frozen_mlp_ok = false;
  std::string checkpoint_path;
};

// trains in place; the weights with the best dev accuracy are restored at the
// end and written to checkpoint_path (when non-empty)
TrainReport train_compressor(const std::vector<QueryExample>& train,
                             const std::vector<QueryExample>& dev, Compressor& compressor,
                             const TargetLM& lm, const TrainConfig& cfg,
                             const std::string& checkpoint_path);

}  // namespace qgc
