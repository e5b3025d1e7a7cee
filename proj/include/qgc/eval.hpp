#pragma once

#include "qgc/strategy.hpp"
#include "qgc/train.hpp"

#include <functional>

namespace qgc {

// ---------------------------------------------------------------------------
// Metrics. Predictions and answers are compared after normalization:
// lowercase, punctuation stripped, whitespace collapsed.
// ---------------------------------------------------------------------------
std::string normalize_answer(const std::string& s);

// 1 iff any normalized answer is a substring of the normalized prediction
int accuracy_score(const std::string& prediction, const std::vector<std::string>& answers);
// 1 iff the normalized prediction equals some normalized answer
int exact_match_score(const std::string& prediction, const std::vector<std::string>& answers);
// max over answers of token-level 2PR/(P+R) with multiset overlap counts
double f1_score(const std::string& prediction, const std::vector<std::string>& answers);

// ---------------------------------------------------------------------------
// Compression-ratio accounting. The numerator always counts every retrieved
// document at full length; dropped documents contribute nothing to the
// denominator. All documents dropped -> infinity sentinel.
// ---------------------------------------------------------------------------
double compression_ratio(long original_tokens, long compressed_units);
long compressed_units_for(int doc_len, int ngram);  // ceil(doc_len / ngram)
double plan_compression_ratio(const QueryExample& ex, const CompressionPlan& plan);

// ---------------------------------------------------------------------------
// Prompt builders: one per evaluation setting. Each returns the assembled
// prompt plus the token accounting behind its compression ratio.
// ---------------------------------------------------------------------------
struct BuiltPrompt {
  MixedInput input;
  long original_tokens = 0;
  long compressed_units = 0;
};

using PromptBuilder = std::function<BuiltPrompt(const QueryExample&)>;

PromptBuilder closed_book_builder();                  // query only, no documents
PromptBuilder oracle_builder();                       // gold document only, raw tokens
PromptBuilder original_builder();                     // every document, raw tokens
PromptBuilder qgc_fixed_builder(const Compressor& compressor, const TargetLM& lm, int ngram);
PromptBuilder qgc_dynamic_builder(const Compressor& compressor, const TargetLM& lm,
                                  const Scorer& scorer, PlanRule rule = {});
// keeps the first ceil(len/ngram) tokens of each document; with_answer also
// appends the gold document's answer-bearing sentence to the truncated gold
PromptBuilder truncation_builder(int ngram, bool with_answer = false);
PromptBuilder reranker_drop_builder(const Scorer& scorer, int keep);

// ---------------------------------------------------------------------------
// Per-setting evaluation.
// ---------------------------------------------------------------------------
struct ThroughputReport {
  double compress_seconds = 0.0;
  double generate_seconds = 0.0;
  double total_seconds = 0.0;  // compress + generate (stages are serialized)
  double compress_tp = 0.0;    // examples / second
  double generate_tp = 0.0;
  double total_tp = 0.0;
  int timed_examples = 0;      // warm-up examples are excluded
};

struct EvalRow {
  std::string setting;
  std::string variant;
  std::string metric;
  double value = 0.0;
  int n_examples = 0;
  double compression_ratio = 1.0;
  double throughput = 0.0;  // total examples/second
};

struct SettingSummary {
  std::string setting;  // closed-book | oracle | base | base-with-answer |
                        // qgc | truncation | reranker-drop
  std::string variant;  // "", "n=4", "m=2", "n=4,m=2", "dynamic"
  int n_examples = 0;
  double accuracy = 0.0;
  double exact_match = 0.0;
  double f1 = 0.0;
  double compression_ratio = 1.0;  // aggregate: sum(original) / sum(compressed)
  ThroughputReport throughput;

  std::vector<EvalRow> rows() const;  // one row per metric
};

struct EvalConfig {
  int max_new_tokens = 4;
  int warmup_examples = 3;  // run but excluded from timing
  int limit = 0;            // 0 = evaluate every example
};

SettingSummary evaluate_setting(const std::vector<QueryExample>& examples,
                                const Vocabulary& vocab, const TargetLM& lm,
                                const PromptBuilder& builder, const std::string& setting,
                                const std::string& variant, const EvalConfig& cfg = {});

// ---------------------------------------------------------------------------
// Key-information-loss study: closed-book / oracle / base anchors, the
// fixed-n sweep for the compressor against prefix truncation at matched
// ratios, the answer-appended truncation control, a dynamic-strategy row,
// a reranker-drop row, and the distractor-count sweep.
// ---------------------------------------------------------------------------
struct StudyConfig {
  std::vector<int> ngram_sweep = {1, 2, 4, 8};
  std::vector<int> distractor_sweep = {1, 2, 3, 4};  // documents added to gold
  int reranker_keep = 2;
  EvalConfig eval;
};

struct StudyReport {
  std::vector<SettingSummary> settings;

  const SettingSummary* find(const std::string& setting, const std::string& variant) const;
  const SettingSummary& at(const std::string& setting, const std::string& variant) const;
};

StudyReport run_key_info_study(const std::vector<QueryExample>& examples,
                               const Vocabulary& vocab, const TargetLM& lm,
                               const Compressor& compressor, const StudyConfig& cfg = {});

// The CSV/JSON reports hold only deterministic fields; wall-clock readings go
// to the separate throughput report, which reruns are not expected to repeat.
void write_eval_csv(const std::string& path, const std::vector<SettingSummary>& settings);
void write_eval_json(const std::string& path, const std::vector<SettingSummary>& settings);
void write_throughput_json(const std::string& path, const std::vector<SettingSummary>& settings);

// ---------------------------------------------------------------------------
// Ablations: trains the architectural variants per seed, evaluates each with
// the dynamic strategy on held-out data, and adds the fixed-n row reusing the
// full model's weights. Reports per-seed accuracies and their median.
// ---------------------------------------------------------------------------
struct AblationConfig {
  CompressorConfig architecture;   // the full model; variants toggle its flags
  TrainConfig train;
  std::vector<uint64_t> seeds = {1, 2, 3};
  PlanRule rule;                   // dynamic strategy used for evaluation
  int fixed_ngram = 4;             // the no-dynamic row compresses at this n
  EvalConfig eval;
};

struct AblationRow {
  std::string variant;  // full | no-context-encoder | no-weighted-pooling |
                        // no-reviewing | no-dynamic
  std::vector<double> seed_accuracies;
  double median_accuracy = 0.0;
};

struct AblationReport {
  std::vector<AblationRow> rows;

  const AblationRow* find(const std::string& variant) const;
  const AblationRow& at(const std::string& variant) const;
};

AblationReport run_ablations(const std::vector<QueryExample>& train,
                             const std::vector<QueryExample>& dev,
                             const std::vector<QueryExample>& test, const Vocabulary& vocab,
                             const TargetLM& lm, const AblationConfig& cfg);

void write_ablation_csv(const std::string& path, const AblationReport& report);
void write_ablation_json(const std::string& path, const AblationReport& report);

}  // namespace qgc
