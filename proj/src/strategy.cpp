#include "qgc/strategy.hpp"

#include <algorithm>
#include <set>
#include <stdexcept>

namespace qgc {

std::vector<double> OverlapScorer::score_all(const QueryExample& ex) const {
  std::set<int> query_types(ex.query.begin(), ex.query.end());
  if (query_types.empty()) throw std::runtime_error("overlap scorer: example " + ex.id + " has an empty query");
  std::vector<double> out;
  out.reserve(ex.documents.size());
  for (const auto& doc : ex.documents) {
    std::set<int> doc_types(doc.tokens.begin(), doc.tokens.end());
    int hit = 0;
    for (int q : query_types) hit += doc_types.count(q) ? 1 : 0;
    out.push_back(static_cast<double>(hit) / static_cast<double>(query_types.size()));
  }
  return out;
}

std::vector<double> LmNllScorer::score_all(const QueryExample& ex) const {
  std::vector<double> raw;
  raw.reserve(ex.documents.size());
  for (const auto& doc : ex.documents) {
    MixedInput prefix;
    prefix.push_token(kBosId);
    prefix.push_tokens(ex.instruction);
    prefix.push_token(kSepId);
    prefix.push_tokens(doc.tokens);
    prefix.push_token(kSepId);
    raw.push_back(lm_->answer_logprobs(prefix, ex.query).log_prob);
  }
  double lo = raw[0], hi = raw[0];
  for (double v : raw) {
    lo = std::min(lo, v);
    hi = std::max(hi, v);
  }
  std::vector<double> out(raw.size(), 1.0);  // identical likelihoods carry no signal: keep all
  if (hi > lo)
    for (size_t i = 0; i < raw.size(); ++i) out[i] = (raw[i] - lo) / (hi - lo);
  return out;
}

std::vector<double> FileScorer::score_all(const QueryExample& ex) const {
  std::vector<double> out;
  out.reserve(ex.documents.size());
  for (const auto& doc : ex.documents) {
    if (!doc.has_score)
      throw std::runtime_error("file scorer: document " + doc.id + " carries no score field");
    out.push_back(doc.score);
  }
  return out;
}

std::unique_ptr<Scorer> make_scorer(const std::string& name, const TargetLM* lm) {
  if (name == "overlap") return std::make_unique<OverlapScorer>();
  if (name == "lm-nll") {
    if (!lm) throw std::invalid_argument("scorer lm-nll requires a target LM");
    return std::make_unique<LmNllScorer>(*lm);
  }
  if (name == "file") return std::make_unique<FileScorer>();
  throw std::invalid_argument("unknown scorer '" + name + "' (expected overlap, lm-nll, or file)");
}

std::vector<RerankerScore> rank_documents(const QueryExample& ex, const Scorer& scorer) {
  if (ex.documents.empty())
    throw std::invalid_argument("rank_documents: example " + ex.id + " has no documents");
  std::vector<double> scores = scorer.score_all(ex);
  if (scores.size() != ex.documents.size())
    throw std::runtime_error("scorer " + scorer.name() + " returned " +
                             std::to_string(scores.size()) + " scores for " +
                             std::to_string(ex.documents.size()) + " documents");
  std::vector<int> order(scores.size());
  for (size_t i = 0; i < order.size(); ++i) order[i] = static_cast<int>(i);
  std::stable_sort(order.begin(), order.end(),
                   [&](int a, int b) { return scores[static_cast<size_t>(a)] > scores[static_cast<size_t>(b)]; });
  std::vector<RerankerScore> out(scores.size());
  for (size_t r = 0; r < order.size(); ++r) {
    int doc = order[r];
    out[static_cast<size_t>(doc)] = {ex.documents[static_cast<size_t>(doc)].id,
                                     scores[static_cast<size_t>(doc)], static_cast<int>(r) + 1};
  }
  return out;
}

CompressionPlan assign_plan(const std::vector<RerankerScore>& scores, const PlanRule& rule) {
  if (scores.empty()) throw std::invalid_argument("assign_plan: no scored documents");
  if (rule.cap < 1 || rule.multiplier < 1)
    throw std::invalid_argument("assign_plan: cap and multiplier must be at least 1");
  CompressionPlan plan;
  plan.epsilon = rule.epsilon;
  plan.docs.resize(scores.size());
  for (size_t i = 0; i < scores.size(); ++i) {
    if (scores[i].rank < 1 || scores[i].rank > static_cast<int>(scores.size()))
      throw std::invalid_argument("assign_plan: rank " + std::to_string(scores[i].rank) +
                                  " is not in [1, " + std::to_string(scores.size()) + "]");
    if (scores[i].score < rule.epsilon) {
      plan.docs[i].dropped = true;
    } else {
      plan.docs[i].dropped = false;
      plan.docs[i].n_gram_size = std::min(rule.multiplier * scores[i].rank, rule.cap);
    }
  }
  std::vector<int> kept;
  for (size_t i = 0; i < scores.size(); ++i)
    if (!plan.docs[i].dropped) kept.push_back(static_cast<int>(i));
  std::sort(kept.begin(), kept.end(), [&](int a, int b) {
    return scores[static_cast<size_t>(a)].rank < scores[static_cast<size_t>(b)].rank;
  });
  plan.kept_order = std::move(kept);
  return plan;
}

AssembledInput assemble_input(const QueryExample& ex, const CompressionPlan& plan,
                              const Compressor& compressor, const TargetLM& lm) {
  if (plan.docs.size() != ex.documents.size())
    throw std::invalid_argument("assemble_input: plan covers " + std::to_string(plan.docs.size()) +
                                " documents but example " + ex.id + " has " +
                                std::to_string(ex.documents.size()));
  NoTape guard;  // inference path
  AssembledInput out;
  out.all_dropped = plan.all_dropped();

  MixedInput input;
  input.push_token(kBosId);
  input.push_tokens(ex.instruction);
  input.push_token(kSepId);
  for (const auto& doc : ex.documents) out.original_tokens += static_cast<long>(doc.tokens.size());
  for (int idx : plan.kept_order) {
    const Document& doc = ex.documents[static_cast<size_t>(idx)];
    CompressedDocument cd =
        compressor.compress_document(ex.query, doc.tokens, plan.docs[static_cast<size_t>(idx)].n_gram_size);
    out.compressed_units += cd.embeddings.rows();
    input.push_soft(cd.embeddings);
    input.push_token(kSepId);
  }
  input.push_tokens(ex.query);
  input.push_token(kSepId);

  const long len = input.length();
  if (len > lm.config().context_limit) {
    std::string detail = "assemble_input: prompt length " + std::to_string(len) +
                         " exceeds the LM context limit " +
                         std::to_string(lm.config().context_limit) + " (segments:";
    for (const auto& seg : input.segments)
      detail += " " + std::to_string(std::holds_alternative<TokenSegment>(seg)
                                         ? static_cast<long>(std::get<TokenSegment>(seg).ids.size())
                                         : static_cast<long>(std::get<SoftSegment>(seg).vectors.rows()));
    throw std::runtime_error(detail + ")");
  }
  out.input = std::move(input);
  return out;
}

}  // namespace qgc
