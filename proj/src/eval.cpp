#include "qgc/eval.hpp"

#include <nlohmann/json.hpp>

#include <algorithm>
#include <cctype>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <limits>
#include <map>
#include <sstream>
#include <stdexcept>

namespace qgc {

using ordered_json = nlohmann::ordered_json;

// ---------------------------------------------------------------------------
// Metrics
// ---------------------------------------------------------------------------

std::string normalize_answer(const std::string& s) {
  std::string out;
  out.reserve(s.size());
  bool pending_space = false;
  for (unsigned char c : s) {
    if (std::isalnum(c)) {
      if (pending_space && !out.empty()) out.push_back(' ');
      pending_space = false;
      out.push_back(static_cast<char>(std::tolower(c)));
    } else if (std::isspace(c)) {
      pending_space = true;
    }
    // punctuation is stripped
  }
  return out;
}

namespace {

std::vector<std::string> split_tokens(const std::string& normalized) {
  std::vector<std::string> tokens;
  std::istringstream is(normalized);
  std::string tok;
  while (is >> tok) tokens.push_back(tok);
  return tokens;
}

}  // namespace

int accuracy_score(const std::string& prediction, const std::vector<std::string>& answers) {
  const std::string pred = normalize_answer(prediction);
  for (const auto& a : answers) {
    const std::string gold = normalize_answer(a);
    if (gold.empty()) continue;
    if (pred.find(gold) != std::string::npos) return 1;
  }
  return 0;
}

int exact_match_score(const std::string& prediction, const std::vector<std::string>& answers) {
  const std::string pred = normalize_answer(prediction);
  for (const auto& a : answers)
    if (pred == normalize_answer(a)) return 1;
  return 0;
}

double f1_score(const std::string& prediction, const std::vector<std::string>& answers) {
  const std::vector<std::string> pred = split_tokens(normalize_answer(prediction));
  double best = 0.0;
  for (const auto& a : answers) {
    const std::vector<std::string> gold = split_tokens(normalize_answer(a));
    if (pred.empty() && gold.empty()) {
      best = std::max(best, 1.0);
      continue;
    }
    if (pred.empty() || gold.empty()) continue;
    std::map<std::string, int> counts;
    for (const auto& t : gold) ++counts[t];
    int overlap = 0;
    for (const auto& t : pred) {
      auto it = counts.find(t);
      if (it != counts.end() && it->second > 0) {
        --it->second;
        ++overlap;
      }
    }
    if (overlap == 0) continue;
    const double p = static_cast<double>(overlap) / static_cast<double>(pred.size());
    const double r = static_cast<double>(overlap) / static_cast<double>(gold.size());
    best = std::max(best, 2.0 * p * r / (p + r));
  }
  return best;
}

// ---------------------------------------------------------------------------
// Compression ratio
// ---------------------------------------------------------------------------

double compression_ratio(long original_tokens, long compressed_units) {
  if (original_tokens <= 0)
    throw std::invalid_argument("compression_ratio: no original document tokens");
  if (compressed_units == 0) return std::numeric_limits<double>::infinity();
  return static_cast<double>(original_tokens) / static_cast<double>(compressed_units);
}

long compressed_units_for(int doc_len, int ngram) {
  if (doc_len <= 0) throw std::invalid_argument("compressed_units_for: empty document");
  if (ngram <= 0) throw std::invalid_argument("compressed_units_for: n-gram size must be positive");
  return (static_cast<long>(doc_len) + ngram - 1) / ngram;
}

double plan_compression_ratio(const QueryExample& ex, const CompressionPlan& plan) {
  if (plan.docs.size() != ex.documents.size())
    throw std::invalid_argument("plan_compression_ratio: plan does not cover example " + ex.id);
  long original = 0;
  long compressed = 0;
  for (size_t i = 0; i < ex.documents.size(); ++i) {
    const long len = static_cast<long>(ex.documents[i].tokens.size());
    original += len;
    if (!plan.docs[i].dropped)
      compressed += compressed_units_for(static_cast<int>(len), plan.docs[i].n_gram_size);
  }
  return compression_ratio(original, compressed);
}

// ---------------------------------------------------------------------------
// Prompt builders
// ---------------------------------------------------------------------------

namespace {

MixedInput scaffold_open(const QueryExample& ex) {
  MixedInput in;
  in.push_token(kBosId);
  in.push_tokens(ex.instruction);
  in.push_token(kSepId);
  return in;
}

void scaffold_close(MixedInput& in, const QueryExample& ex) {
  in.push_tokens(ex.query);
  in.push_token(kSepId);
}

long total_doc_tokens(const QueryExample& ex) {
  long total = 0;
  for (const auto& doc : ex.documents) total += static_cast<long>(doc.tokens.size());
  return total;
}

std::vector<int> truncated_prefix(const Document& doc, int ngram) {
  const long keep = compressed_units_for(static_cast<int>(doc.tokens.size()), ngram);
  return std::vector<int>(doc.tokens.begin(), doc.tokens.begin() + keep);
}

}  // namespace

PromptBuilder closed_book_builder() {
  return [](const QueryExample& ex) {
    BuiltPrompt out;
    out.input = scaffold_open(ex);
    scaffold_close(out.input, ex);
    out.original_tokens = total_doc_tokens(ex);
    out.compressed_units = 0;
    return out;
  };
}

PromptBuilder oracle_builder() {
  return [](const QueryExample& ex) {
    BuiltPrompt out;
    out.input = scaffold_open(ex);
    const Document& gold = ex.documents[static_cast<size_t>(ex.gold_index())];
    out.input.push_tokens(gold.tokens);
    out.input.push_token(kSepId);
    scaffold_close(out.input, ex);
    out.original_tokens = total_doc_tokens(ex);
    out.compressed_units = static_cast<long>(gold.tokens.size());
    return out;
  };
}

PromptBuilder original_builder() {
  return [](const QueryExample& ex) {
    BuiltPrompt out;
    out.input = scaffold_open(ex);
    for (const auto& doc : ex.documents) {
      out.input.push_tokens(doc.tokens);
      out.input.push_token(kSepId);
      out.compressed_units += static_cast<long>(doc.tokens.size());
    }
    scaffold_close(out.input, ex);
    out.original_tokens = total_doc_tokens(ex);
    return out;
  };
}

PromptBuilder qgc_fixed_builder(const Compressor& compressor, const TargetLM& lm, int ngram) {
  const Compressor* comp = &compressor;
  const TargetLM* lmp = &lm;
  return [comp, lmp, ngram](const QueryExample& ex) {
    NoTape guard;
    BuiltPrompt out;
    out.input = scaffold_open(ex);
    for (const auto& doc : ex.documents) {
      CompressedDocument cd = comp->compress_document(ex.query, doc.tokens, ngram);
      out.compressed_units += cd.embeddings.rows();
      out.input.push_soft(cd.embeddings);
      out.input.push_token(kSepId);
    }
    scaffold_close(out.input, ex);
    out.original_tokens = total_doc_tokens(ex);
    if (out.input.length() > lmp->config().context_limit)
      throw std::runtime_error("qgc_fixed_builder: prompt exceeds the LM context limit on " + ex.id);
    return out;
  };
}

PromptBuilder qgc_dynamic_builder(const Compressor& compressor, const TargetLM& lm,
                                  const Scorer& scorer, PlanRule rule) {
  const Compressor* comp = &compressor;
  const TargetLM* lmp = &lm;
  const Scorer* sc = &scorer;
  return [comp, lmp, sc, rule](const QueryExample& ex) {
    CompressionPlan plan = assign_plan(rank_documents(ex, *sc), rule);
    AssembledInput assembled = assemble_input(ex, plan, *comp, *lmp);
    BuiltPrompt out;
    out.input = std::move(assembled.input);
    out.original_tokens = assembled.original_tokens;
    out.compressed_units = assembled.compressed_units;
    return out;
  };
}

PromptBuilder truncation_builder(int ngram, bool with_answer) {
  return [ngram, with_answer](const QueryExample& ex) {
    BuiltPrompt out;
    out.input = scaffold_open(ex);
    const int gold = ex.gold_index();
    for (size_t i = 0; i < ex.documents.size(); ++i) {
      std::vector<int> kept = truncated_prefix(ex.documents[i], ngram);
      if (with_answer && static_cast<int>(i) == gold) {
        if (ex.key_tokens.empty())
          throw std::runtime_error("truncation_builder: example " + ex.id +
                                   " has no key sentence to append");
        kept.insert(kept.end(), ex.key_tokens.begin(), ex.key_tokens.end());
      }
      out.compressed_units += static_cast<long>(kept.size());
      out.input.push_tokens(std::move(kept));
      out.input.push_token(kSepId);
    }
    scaffold_close(out.input, ex);
    out.original_tokens = total_doc_tokens(ex);
    return out;
  };
}

PromptBuilder reranker_drop_builder(const Scorer& scorer, int keep) {
  if (keep < 1) throw std::invalid_argument("reranker_drop_builder: keep must be at least 1");
  const Scorer* sc = &scorer;
  return [sc, keep](const QueryExample& ex) {
    std::vector<RerankerScore> ranked = rank_documents(ex, *sc);
    BuiltPrompt out;
    out.input = scaffold_open(ex);
    // kept documents enter the prompt in rank order
    for (int r = 1; r <= keep && r <= static_cast<int>(ranked.size()); ++r) {
      for (size_t i = 0; i < ranked.size(); ++i) {
        if (ranked[i].rank != r) continue;
        const Document& doc = ex.documents[i];
        out.compressed_units += static_cast<long>(doc.tokens.size());
        out.input.push_tokens(doc.tokens);
        out.input.push_token(kSepId);
      }
    }
    scaffold_close(out.input, ex);
    out.original_tokens = total_doc_tokens(ex);
    return out;
  };
}

// ---------------------------------------------------------------------------
// Per-setting evaluation
// ---------------------------------------------------------------------------

std::vector<EvalRow> SettingSummary::rows() const {
  EvalRow base;
  base.setting = setting;
  base.variant = variant;
  base.n_examples = n_examples;
  base.compression_ratio = compression_ratio;
  base.throughput = throughput.total_tp;
  std::vector<EvalRow> out(3, base);
  out[0].metric = "accuracy";
  out[0].value = accuracy;
  out[1].metric = "exact_match";
  out[1].value = exact_match;
  out[2].metric = "f1";
  out[2].value = f1;
  return out;
}

SettingSummary evaluate_setting(const std::vector<QueryExample>& examples,
                                const Vocabulary& vocab, const TargetLM& lm,
                                const PromptBuilder& builder, const std::string& setting,
                                const std::string& variant, const EvalConfig& cfg) {
  if (examples.empty()) throw std::invalid_argument("evaluate_setting: no examples");
  const int n = cfg.limit > 0 ? std::min<int>(cfg.limit, static_cast<int>(examples.size()))
                              : static_cast<int>(examples.size());

  NoTape guard;
  SettingSummary s;
  s.setting = setting;
  s.variant = variant;
  s.n_examples = n;

  long original_sum = 0;
  long compressed_sum = 0;
  double acc_sum = 0.0, em_sum = 0.0, f1_sum = 0.0;
  const int warmup = std::min(cfg.warmup_examples, n);

  using clock = std::chrono::steady_clock;
  for (int i = 0; i < n; ++i) {
    const QueryExample& ex = examples[static_cast<size_t>(i)];
    const auto t0 = clock::now();
    BuiltPrompt bp = builder(ex);
    const auto t1 = clock::now();
    const std::vector<int> pred_ids = lm.generate_greedy(bp.input, cfg.max_new_tokens);
    const auto t2 = clock::now();

    const std::string prediction = vocab.decode(pred_ids);
    acc_sum += accuracy_score(prediction, ex.answers);
    em_sum += exact_match_score(prediction, ex.answers);
    f1_sum += f1_score(prediction, ex.answers);
    original_sum += bp.original_tokens;
    compressed_sum += bp.compressed_units;

    if (i >= warmup) {
      s.throughput.compress_seconds += std::chrono::duration<double>(t1 - t0).count();
      s.throughput.generate_seconds += std::chrono::duration<double>(t2 - t1).count();
      ++s.throughput.timed_examples;
    }
  }

  s.accuracy = acc_sum / n;
  s.exact_match = em_sum / n;
  s.f1 = f1_sum / n;
  s.compression_ratio = compression_ratio(original_sum, compressed_sum);

  ThroughputReport& tp = s.throughput;
  tp.total_seconds = tp.compress_seconds + tp.generate_seconds;
  if (tp.timed_examples > 0) {
    tp.compress_tp = tp.timed_examples / tp.compress_seconds;
    tp.generate_tp = tp.timed_examples / tp.generate_seconds;
    tp.total_tp = tp.timed_examples / tp.total_seconds;
  }
  return s;
}

// ---------------------------------------------------------------------------
// Key-information-loss study
// ---------------------------------------------------------------------------

namespace {

QueryExample with_distractors(const QueryExample& ex, int m) {
  QueryExample cut = ex;
  cut.documents.clear();
  const int gold = ex.gold_index();
  int added = 0;
  for (size_t i = 0; i < ex.documents.size(); ++i) {
    if (static_cast<int>(i) == gold) {
      cut.documents.push_back(ex.documents[i]);
    } else if (added < m) {
      cut.documents.push_back(ex.documents[i]);
      ++added;
    }
  }
  return cut;
}

}  // namespace

const SettingSummary* StudyReport::find(const std::string& setting,
                                        const std::string& variant) const {
  for (const auto& s : settings)
    if (s.setting == setting && s.variant == variant) return &s;
  return nullptr;
}

const SettingSummary& StudyReport::at(const std::string& setting,
                                      const std::string& variant) const {
  const SettingSummary* s = find(setting, variant);
  if (!s) {
    std::string have;
    for (const auto& row : settings) have += " " + row.setting + "/" + row.variant;
    throw std::runtime_error("study: no row " + setting + "/" + variant + "; have:" + have);
  }
  return *s;
}

StudyReport run_key_info_study(const std::vector<QueryExample>& examples,
                               const Vocabulary& vocab, const TargetLM& lm,
                               const Compressor& compressor, const StudyConfig& cfg) {
  StudyReport report;
  auto add = [&](const PromptBuilder& builder, const std::string& setting,
                 const std::string& variant) {
    report.settings.push_back(
        evaluate_setting(examples, vocab, lm, builder, setting, variant, cfg.eval));
  };

  add(closed_book_builder(), "closed-book", "");
  add(oracle_builder(), "oracle", "");
  add(original_builder(), "base", "");

  for (int n : cfg.ngram_sweep) {
    add(qgc_fixed_builder(compressor, lm, n), "qgc", "n=" + std::to_string(n));
    add(truncation_builder(n, false), "truncation", "n=" + std::to_string(n));
    add(truncation_builder(n, true), "base-with-answer", "n=" + std::to_string(n));
  }

  OverlapScorer scorer;
  add(qgc_dynamic_builder(compressor, lm, scorer, PlanRule{}), "qgc", "dynamic");
  add(reranker_drop_builder(scorer, cfg.reranker_keep), "reranker-drop",
      "keep=" + std::to_string(cfg.reranker_keep));

  const int nd = compressor.config().n_default;
  for (int m : cfg.distractor_sweep) {
    std::vector<QueryExample> cut;
    const int limit = cfg.eval.limit > 0
                          ? std::min<int>(cfg.eval.limit, static_cast<int>(examples.size()))
                          : static_cast<int>(examples.size());
    cut.reserve(static_cast<size_t>(limit));
    for (int i = 0; i < limit; ++i) cut.push_back(with_distractors(examples[static_cast<size_t>(i)], m));
    report.settings.push_back(evaluate_setting(cut, vocab, lm, original_builder(), "base",
                                               "m=" + std::to_string(m), cfg.eval));
    report.settings.push_back(
        evaluate_setting(cut, vocab, lm, qgc_fixed_builder(compressor, lm, nd), "qgc",
                         "n=" + std::to_string(nd) + ",m=" + std::to_string(m), cfg.eval));
  }
  return report;
}

// ---------------------------------------------------------------------------
// Writers. Primary artifacts must be byte-identical across reruns, so wall
// clock readings stay out of the CSV/JSON reports and live in a separate
// throughput report.
// ---------------------------------------------------------------------------

namespace {

std::string fmt_ratio(double v) {
  if (std::isinf(v)) return "inf";
  char buf[64];
  std::snprintf(buf, sizeof(buf), "%.6f", v);
  return buf;
}

ordered_json ratio_json(double v) {
  if (std::isinf(v)) return ordered_json("inf");
  return ordered_json(v);
}

std::ofstream open_out(const std::string& path) {
  std::ofstream os(path, std::ios::trunc);
  if (!os) throw std::runtime_error("cannot write " + path);
  return os;
}

}  // namespace

void write_eval_csv(const std::string& path, const std::vector<SettingSummary>& settings) {
  std::ofstream os = open_out(path);
  os << "setting,variant,n_examples,accuracy,exact_match,f1,compression_ratio\n";
  for (const auto& s : settings)
    os << s.setting << ',' << s.variant << ',' << s.n_examples << ',' << fmt_ratio(s.accuracy)
       << ',' << fmt_ratio(s.exact_match) << ',' << fmt_ratio(s.f1) << ','
       << fmt_ratio(s.compression_ratio) << '\n';
  if (!os) throw std::runtime_error("write failed for " + path);
}

void write_eval_json(const std::string& path, const std::vector<SettingSummary>& settings) {
  ordered_json arr = ordered_json::array();
  for (const auto& s : settings) {
    ordered_json j;
    j["setting"] = s.setting;
    j["variant"] = s.variant;
    j["n_examples"] = s.n_examples;
    j["accuracy"] = s.accuracy;
    j["exact_match"] = s.exact_match;
    j["f1"] = s.f1;
    j["compression_ratio"] = ratio_json(s.compression_ratio);
    arr.push_back(std::move(j));
  }
  std::ofstream os = open_out(path);
  os << arr.dump(2) << '\n';
  if (!os) throw std::runtime_error("write failed for " + path);
}

void write_throughput_json(const std::string& path, const std::vector<SettingSummary>& settings) {
  ordered_json arr = ordered_json::array();
  for (const auto& s : settings) {
    ordered_json j;
    j["setting"] = s.setting;
    j["variant"] = s.variant;
    j["timed_examples"] = s.throughput.timed_examples;
    j["compress_seconds"] = s.throughput.compress_seconds;
    j["generate_seconds"] = s.throughput.generate_seconds;
    j["total_seconds"] = s.throughput.total_seconds;
    j["compress_examples_per_second"] = s.throughput.compress_tp;
    j["generate_examples_per_second"] = s.throughput.generate_tp;
    j["total_examples_per_second"] = s.throughput.total_tp;
    arr.push_back(std::move(j));
  }
  std::ofstream os = open_out(path);
  os << arr.dump(2) << '\n';
  if (!os) throw std::runtime_error("write failed for " + path);
}

// ---------------------------------------------------------------------------
// Ablations
// ---------------------------------------------------------------------------

const AblationRow* AblationReport::find(const std::string& variant) const {
  for (const auto& r : rows)
    if (r.variant == variant) return &r;
  return nullptr;
}

const AblationRow& AblationReport::at(const std::string& variant) const {
  const AblationRow* r = find(variant);
  if (!r) throw std::runtime_error("ablations: no row " + variant);
  return *r;
}

namespace {

double median_of(std::vector<double> v) {
  if (v.empty()) throw std::invalid_argument("median of empty list");
  std::sort(v.begin(), v.end());
  const size_t mid = v.size() / 2;
  if (v.size() % 2 == 1) return v[mid];
  return 0.5 * (v[mid - 1] + v[mid]);
}

}  // namespace

AblationReport run_ablations(const std::vector<QueryExample>& train,
                             const std::vector<QueryExample>& dev,
                             const std::vector<QueryExample>& test, const Vocabulary& vocab,
                             const TargetLM& lm, const AblationConfig& cfg) {
  if (!cfg.architecture.joint_encoding || !cfg.architecture.weighted_pooling ||
      !cfg.architecture.reviewing)
    throw std::invalid_argument("run_ablations: the base architecture must be the full model");
  if (cfg.seeds.empty()) throw std::invalid_argument("run_ablations: no seeds");

  struct Variant {
    std::string name;
    bool joint, pool, review;
  };
  const std::vector<Variant> variants = {
      {"full", true, true, true},
      {"no-context-encoder", false, true, true},
      {"no-weighted-pooling", true, false, true},
      {"no-reviewing", true, true, false},
  };

  AblationReport report;
  report.rows.resize(variants.size() + 1);
  for (size_t v = 0; v < variants.size(); ++v) report.rows[v].variant = variants[v].name;
  report.rows.back().variant = "no-dynamic";

  OverlapScorer scorer;
  for (uint64_t seed : cfg.seeds) {
    for (size_t v = 0; v < variants.size(); ++v) {
      CompressorConfig cc = cfg.architecture;
      cc.joint_encoding = variants[v].joint;
      cc.weighted_pooling = variants[v].pool;
      cc.reviewing = variants[v].review;

      Rng rng(seed);
      Compressor comp = Compressor::init_from_lm(cc, lm, rng);
      TrainConfig tc = cfg.train;
      tc.seed = seed;
      train_compressor(train, dev, comp, lm, tc, "");

      SettingSummary dyn =
          evaluate_setting(test, vocab, lm, qgc_dynamic_builder(comp, lm, scorer, cfg.rule),
                           "qgc", variants[v].name, cfg.eval);
      report.rows[v].seed_accuracies.push_back(dyn.accuracy);

      if (variants[v].name == "full") {
        SettingSummary fixed = evaluate_setting(
            test, vocab, lm, qgc_fixed_builder(comp, lm, cfg.fixed_ngram), "qgc",
            "no-dynamic", cfg.eval);
        report.rows.back().seed_accuracies.push_back(fixed.accuracy);
      }
    }
  }

  for (auto& row : report.rows) row.median_accuracy = median_of(row.seed_accuracies);
  return report;
}

void write_ablation_csv(const std::string& path, const AblationReport& report) {
  std::ofstream os = open_out(path);
  os << "variant,median_accuracy,seed_accuracies\n";
  for (const auto& r : report.rows) {
    os << r.variant << ',' << fmt_ratio(r.median_accuracy) << ',';
    for (size_t i = 0; i < r.seed_accuracies.size(); ++i)
      os << (i ? " " : "") << fmt_ratio(r.seed_accuracies[i]);
    os << '\n';
  }
  if (!os) throw std::runtime_error("write failed for " + path);
}

void write_ablation_json(const std::string& path, const AblationReport& report) {
  ordered_json arr = ordered_json::array();
  for (const auto& r : report.rows) {
    ordered_json j;
    j["variant"] = r.variant;
    j["median_accuracy"] = r.median_accuracy;
    j["seed_accuracies"] = r.seed_accuracies;
    arr.push_back(std::move(j));
  }
  std::ofstream os = open_out(path);
  os << arr.dump(2) << '\n';
  if (!os) throw std::runtime_error("write failed for " + path);
}

}  // namespace qgc
