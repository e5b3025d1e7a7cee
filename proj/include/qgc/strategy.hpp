#pragma once

#include "qgc/compressor.hpp"

#include <memory>

namespace qgc {

// ---------------------------------------------------------------------------
// Dynamic compression strategy: score each retrieved document, rank them
// (rank 1 = most relevant, ties keep original order), then per document
//   n_k = min(multiplier · rank_k, cap)   if score_k ≥ epsilon
//   drop                                   otherwise
// Kept documents enter the prompt in rank order.
// ---------------------------------------------------------------------------

struct RerankerScore {
  std::string doc_id;
  double score = 0.0;
  int rank = 0;  // 1-based
};

class Scorer {
 public:
  virtual ~Scorer() = default;
  virtual std::string name() const = 0;
  // one score per document, aligned with ex.documents; higher = more relevant
  virtual std::vector<double> score_all(const QueryExample& ex) const = 0;
};

// |query types ∩ document types| / |query types|; already in [0, 1]
class OverlapScorer : public Scorer {
 public:
  std::string name() const override { return "overlap"; }
  std::vector<double> score_all(const QueryExample& ex) const override;
};

// query log-likelihood under the target LM conditioned on the document,
// min-max normalized per example (all-equal scores map to 1)
class LmNllScorer : public Scorer {
 public:
  explicit LmNllScorer(const TargetLM& lm) : lm_(&lm) {}
  std::string name() const override { return "lm-nll"; }
  std::vector<double> score_all(const QueryExample& ex) const override;

 private:
  const TargetLM* lm_;
};

// passes through Document.score; errors on documents without one
class FileScorer : public Scorer {
 public:
  std::string name() const override { return "file"; }
  std::vector<double> score_all(const QueryExample& ex) const override;
};

// "overlap" | "lm-nll" | "file"; lm may be null for scorers that ignore it
std::unique_ptr<Scorer> make_scorer(const std::string& name, const TargetLM* lm);

std::vector<RerankerScore> rank_documents(const QueryExample& ex, const Scorer& scorer);

struct PlanRule {
  double epsilon = 0.35;
  int cap = 16;
  int multiplier = 2;
};

struct PlanEntry {
  bool dropped = false;
  int n_gram_size = 0;  // meaningful only when kept
};

struct CompressionPlan {
  std::vector<PlanEntry> docs;   // aligned with the scored documents
  std::vector<int> kept_order;   // document indices sorted by rank ascending
  double epsilon = 0.0;

  bool all_dropped() const { return kept_order.empty(); }
};

CompressionPlan assign_plan(const std::vector<RerankerScore>& scores, const PlanRule& rule);

// compressed prompt plus the token accounting behind its compression ratio
struct AssembledInput {
  MixedInput input;
  long original_tokens = 0;    // every retrieved document, dropped ones included
  long compressed_units = 0;   // soft vectors entering the prompt
  bool all_dropped = false;
};

AssembledInput assemble_input(const QueryExample& ex, const CompressionPlan& plan,
                              const Compressor& compressor, const TargetLM& lm);

}  // namespace qgc
