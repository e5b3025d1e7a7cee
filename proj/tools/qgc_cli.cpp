#include "qgc/checkpoint.hpp"
#include "qgc/eval.hpp"

#include <CLI11.hpp>
#include <nlohmann/json.hpp>

#include <algorithm>
#include <chrono>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <stdexcept>
#include <string>
#include <vector>

namespace fs = std::filesystem;
using ordered_json = nlohmann::ordered_json;
using namespace qgc;

namespace {

// cross-flag validation problems; reported like parse errors (exit code 2)
struct UsageError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// ---------------------------------------------------------------------------
// Run manifests: one append-only JSON record per command invocation.
// ---------------------------------------------------------------------------
class Manifest {
 public:
  Manifest(std::string command, std::string runs_dir)
      : command_(std::move(command)), runs_dir_(std::move(runs_dir)),
        start_(std::chrono::steady_clock::now()) {}

  void set_config(ordered_json config, uint64_t seed) {
    config_ = std::move(config);
    seed_ = seed;
  }
  void add_input(const std::string& path) { inputs_.push_back(path); }
  void add_primary(const std::string& path) { primary_.push_back(path); }
  void add_secondary(const std::string& path) { secondary_.push_back(path); }

  void write() const {
    fs::create_directories(runs_dir_);
    int count = 0;
    for (const auto& entry : fs::directory_iterator(runs_dir_))
      if (entry.path().extension() == ".json") ++count;
    char name[128];
    std::snprintf(name, sizeof(name), "%04d-%s.json", count, command_.c_str());

    ordered_json m;
    m["command"] = command_;
    m["seed"] = seed_;
    m["config"] = config_;
    m["inputs"] = inputs_;
    ordered_json prim = ordered_json::array();
    for (const auto& p : primary_) {
      ordered_json a;
      a["path"] = p;
      char hex[32];
      std::snprintf(hex, sizeof(hex), "0x%016llx",
                    static_cast<unsigned long long>(file_hash(p)));
      a["fnv1a64"] = hex;
      prim.push_back(std::move(a));
    }
    m["primary_artifacts"] = std::move(prim);
    m["secondary_artifacts"] = secondary_;
    m["wall_seconds"] =
        std::chrono::duration<double>(std::chrono::steady_clock::now() - start_).count();

    const std::string path = (fs::path(runs_dir_) / name).string();
    std::ofstream os(path, std::ios::trunc);
    if (!os) throw std::runtime_error("cannot write manifest " + path);
    os << m.dump(2) << '\n';
  }

 private:
  std::string command_;
  std::string runs_dir_;
  std::chrono::steady_clock::time_point start_;
  ordered_json config_;
  uint64_t seed_ = 0;
  std::vector<std::string> inputs_, primary_, secondary_;
};

// ---------------------------------------------------------------------------
// Optional JSON config file: keys are long flag names; explicit flags win.
// ---------------------------------------------------------------------------
std::vector<std::string> expand_config(int argc, char** argv) {
  std::vector<std::string> args;
  for (int i = 1; i < argc; ++i) args.emplace_back(argv[i]);
  if (args.size() < 2) return args;

  std::string path;
  for (size_t i = 1; i < args.size(); ++i) {
    if (args[i] == "--config" && i + 1 < args.size()) path = args[i + 1];
    else if (args[i].rfind("--config=", 0) == 0) path = args[i].substr(9);
  }
  if (path.empty()) return args;

  std::ifstream is(path);
  if (!is) throw UsageError("config file " + path + " cannot be opened");
  ordered_json j = ordered_json::parse(is, nullptr, false);
  if (j.is_discarded() || !j.is_object())
    throw UsageError("config file " + path + " must hold a single JSON object");

  auto flag_given = [&](const std::string& key) {
    const std::string flag = "--" + key;
    for (size_t i = 1; i < args.size(); ++i)
      if (args[i] == flag || args[i].rfind(flag + "=", 0) == 0) return true;
    return false;
  };

  std::vector<std::string> extra;
  for (const auto& [key, value] : j.items()) {
    if (key == "config" || flag_given(key)) continue;
    auto push_one = [&](const ordered_json& v) {
      if (v.is_object() || v.is_null() || v.is_array())
        throw UsageError("config key '" + key + "' must map to a scalar or a flat array");
      extra.push_back("--" + key + "=" + (v.is_string() ? v.get<std::string>() : v.dump()));
    };
    if (value.is_array())
      for (const auto& v : value) push_one(v);
    else
      push_one(value);
  }
  args.insert(args.begin() + 1, extra.begin(), extra.end());
  return args;
}

// ---------------------------------------------------------------------------
// Shared artifact plumbing
// ---------------------------------------------------------------------------
void require_file(const std::string& path, const std::string& producer) {
  if (!fs::exists(path))
    throw std::runtime_error(path + " does not exist; produce it with the " + producer +
                             " command first");
}

std::string data_file(const std::string& dir, const std::string& name) {
  return (fs::path(dir) / name).string();
}

Vocabulary load_vocab(const std::string& dir, Manifest& manifest) {
  const std::string path = data_file(dir, "vocab.txt");
  require_file(path, "gen-data");
  manifest.add_input(path);
  return Vocabulary::load(path);
}

std::vector<QueryExample> load_split(const std::string& dir, const std::string& split,
                                     Manifest& manifest) {
  const std::string path = data_file(dir, split + ".jsonl");
  require_file(path, "gen-data");
  manifest.add_input(path);
  return load_jsonl(path);
}

TargetLM load_lm(const std::string& path, const Vocabulary& vocab, Manifest& manifest) {
  require_file(path, "train-lm");
  manifest.add_input(path);
  TargetLM lm = TargetLM::load(path);
  if (lm.config().vocab_size != vocab.size())
    throw std::runtime_error("LM vocabulary size " + std::to_string(lm.config().vocab_size) +
                             " does not match the data vocabulary (" +
                             std::to_string(vocab.size()) + "); retrain or regenerate");
  return lm;
}

Compressor load_compressor(const std::string& path, const TargetLM& lm, Manifest& manifest) {
  require_file(path, "train-compressor");
  manifest.add_input(path);
  Compressor comp = Compressor::load(path);
  if (comp.config().d_lm != lm.config().d_model)
    throw std::runtime_error("compressor alignment width " + std::to_string(comp.config().d_lm) +
                             " does not match the LM width " +
                             std::to_string(lm.config().d_model));
  return comp;
}

std::string fmt6(double v) {
  if (std::isinf(v)) return "inf";
  char buf[64];
  std::snprintf(buf, sizeof(buf), "%.6f", v);
  return buf;
}

// ---------------------------------------------------------------------------
// gen-data
// ---------------------------------------------------------------------------
struct GenDataOpts {
  GeneratorConfig gen;
  std::string out;
  std::string runs_dir = "runs";
};

int cmd_gen_data(const GenDataOpts& o) {
  if (o.gen.num_examples < 10)
    throw UsageError("--examples must be at least 10 to fill 80/10/10 splits");
  Manifest manifest("gen-data", o.runs_dir);

  GeneratedCorpus corpus = generate_corpus(o.gen);
  const int n = static_cast<int>(corpus.examples.size());
  const int n_test = n / 10;
  const int n_dev = n / 10;
  const int n_train = n - n_dev - n_test;
  const auto& ex = corpus.examples;
  const std::vector<QueryExample> train(ex.begin(), ex.begin() + n_train);
  const std::vector<QueryExample> dev(ex.begin() + n_train, ex.begin() + n_train + n_dev);
  const std::vector<QueryExample> test(ex.begin() + n_train + n_dev, ex.end());

  fs::create_directories(o.out);
  const std::string vocab_path = data_file(o.out, "vocab.txt");
  corpus.vocab.save(vocab_path);
  save_jsonl(data_file(o.out, "train.jsonl"), train);
  save_jsonl(data_file(o.out, "dev.jsonl"), dev);
  save_jsonl(data_file(o.out, "test.jsonl"), test);

  ordered_json cfg;
  cfg["examples"] = o.gen.num_examples;
  cfg["docs"] = o.gen.docs_per_example;
  cfg["doc-len"] = o.gen.doc_len;
  cfg["facts"] = o.gen.facts_per_doc;
  cfg["vocab"] = o.gen.vocab_size;
  cfg["attrs"] = o.gen.num_attrs;
  cfg["values"] = o.gen.num_values;
  cfg["fillers"] = o.gen.num_fillers;
  cfg["heldout"] = o.gen.heldout_entity_fraction;
  cfg["seed"] = o.gen.seed;
  cfg["out"] = o.out;
  manifest.set_config(cfg, o.gen.seed);
  for (const char* name : {"vocab.txt", "train.jsonl", "dev.jsonl", "test.jsonl"})
    manifest.add_primary(data_file(o.out, name));
  manifest.write();

  std::cout << "wrote " << n_train << "/" << n_dev << "/" << n_test
            << " train/dev/test examples and a " << corpus.vocab.size() << "-word vocabulary to "
            << o.out << "\n";
  return 0;
}

// ---------------------------------------------------------------------------
// train-lm
// ---------------------------------------------------------------------------
struct TrainLmOpts {
  std::string data;
  std::string out;
  LMConfig lm;
  PretrainConfig pre;
  std::string runs_dir = "runs";
};

int cmd_train_lm(const TrainLmOpts& o) {
  Manifest manifest("train-lm", o.runs_dir);
  Vocabulary vocab = load_vocab(o.data, manifest);
  std::vector<QueryExample> train = load_split(o.data, "train", manifest);
  std::vector<QueryExample> dev = load_split(o.data, "dev", manifest);

  LMConfig lm_cfg = o.lm;
  lm_cfg.vocab_size = vocab.size();
  Rng rng(o.pre.seed);
  TargetLM lm(lm_cfg, rng);
  PretrainReport report = pretrain_lm(lm, train, dev, o.pre);
  lm.freeze();
  if (!o.out.empty()) {
    if (o.out.find('/') != std::string::npos)
      fs::create_directories(fs::path(o.out).parent_path());
    lm.save(o.out);
  }

  ordered_json cfg;
  cfg["data"] = o.data;
  cfg["out"] = o.out;
  cfg["d-model"] = lm_cfg.d_model;
  cfg["layers"] = lm_cfg.layers;
  cfg["heads"] = lm_cfg.heads;
  cfg["ff-hidden"] = lm_cfg.ff_hidden;
  cfg["context-limit"] = lm_cfg.context_limit;
  cfg["epochs"] = o.pre.epochs;
  cfg["lr"] = o.pre.learning_rate;
  cfg["batch"] = o.pre.batch_size;
  cfg["warmup"] = o.pre.warmup_steps;
  cfg["target-acc"] = o.pre.target_accuracy;
  cfg["eval-examples"] = o.pre.eval_examples;
  cfg["max-new-tokens"] = o.pre.max_new_tokens;
  cfg["min-docs"] = o.pre.min_docs;
  cfg["max-docs"] = o.pre.max_docs;
  cfg["seed"] = o.pre.seed;
  manifest.set_config(cfg, o.pre.seed);
  manifest.add_primary(o.out);
  manifest.add_primary(o.out + ".json");
  manifest.write();

  std::cout << "pretrained LM: best dev accuracy " << fmt6(report.best_accuracy) << " at epoch "
            << report.best_epoch << "; saved to " << o.out << "\n";
  return 0;
}

// ---------------------------------------------------------------------------
// train-compressor
// ---------------------------------------------------------------------------
struct TrainCompOpts {
  std::string data;
  std::string lm_path;
  std::string out;
  CompressorConfig comp;
  TrainConfig train;
  std::string runs_dir = "runs";
};

int cmd_train_compressor(const TrainCompOpts& o) {
  Manifest manifest("train-compressor", o.runs_dir);
  Vocabulary vocab = load_vocab(o.data, manifest);
  std::vector<QueryExample> train = load_split(o.data, "train", manifest);
  std::vector<QueryExample> dev = load_split(o.data, "dev", manifest);
  TargetLM lm = load_lm(o.lm_path, vocab, manifest);

  Rng rng(o.train.seed);
  Compressor comp = Compressor::init_from_lm(o.comp, lm, rng);
  if (!o.out.empty() && o.out.find('/') != std::string::npos)
    fs::create_directories(fs::path(o.out).parent_path());
  TrainReport report = train_compressor(train, dev, comp, lm, o.train, o.out);

  const std::string report_path = o.out + ".train_report.json";
  {
    ordered_json r;
    r["best_dev_accuracy"] = report.best_dev_accuracy;
    r["best_epoch"] = report.best_epoch;
    r["frozen_lm_ok"] = report.frozen_lm_ok;
    r["frozen_mlp_ok"] = report.frozen_mlp_ok;
    ordered_json epochs = ordered_json::array();
    for (const auto& e : report.epochs) {
      ordered_json ej;
      ej["mean_ce"] = e.mean_ce;
      ej["mean_kl"] = e.mean_kl;
      ej["dev_accuracy"] = e.dev_accuracy;
      epochs.push_back(std::move(ej));
    }
    r["epochs"] = std::move(epochs);
    std::ofstream os(report_path, std::ios::trunc);
    if (!os) throw std::runtime_error("cannot write " + report_path);
    os << r.dump(2) << '\n';
  }

  ordered_json cfg;
  cfg["data"] = o.data;
  cfg["lm"] = o.lm_path;
  cfg["out"] = o.out;
  cfg["d-c"] = o.comp.d_c;
  cfg["heads"] = o.comp.heads;
  cfg["enc-layers"] = o.comp.enc_layers;
  cfg["rev-layers"] = o.comp.rev_layers;
  cfg["ff-hidden"] = o.comp.ff_hidden;
  cfg["context-limit"] = o.comp.context_limit;
  cfg["n-default"] = o.comp.n_default;
  cfg["epochs"] = o.train.epochs;
  cfg["lr"] = o.train.learning_rate;
  cfg["batch"] = o.train.batch_size;
  cfg["kl-weight"] = o.train.kl_weight;
  cfg["ngrams"] = o.train.ngram_candidates;
  cfg["distractor-min"] = o.train.distractor_min;
  cfg["distractor-max"] = o.train.distractor_max;
  cfg["target-acc"] = o.train.target_accuracy;
  cfg["eval-ngram"] = o.train.eval_ngram;
  cfg["eval-examples"] = o.train.eval_examples;
  cfg["max-new-tokens"] = o.train.max_new_tokens;
  cfg["seed"] = o.train.seed;
  manifest.set_config(cfg, o.train.seed);
  manifest.add_primary(o.out);
  manifest.add_primary(o.out + ".json");
  manifest.add_primary(report_path);
  manifest.write();

  std::cout << "trained compressor: best dev accuracy " << fmt6(report.best_dev_accuracy)
            << " at epoch " << report.best_epoch << "; saved to " << o.out << "\n";
  return 0;
}

// ---------------------------------------------------------------------------
// compress
// ---------------------------------------------------------------------------
struct CompressOpts {
  std::string data;
  std::string split = "test";
  std::string lm_path;
  std::string comp_path;
  int ngram = 4;
  bool dynamic = false;
  std::string scorer = "overlap";
  PlanRule rule;
  int limit = 0;
  std::string out;
  std::string runs_dir = "runs";
};

int cmd_compress(const CompressOpts& o) {
  Manifest manifest("compress", o.runs_dir);
  Vocabulary vocab = load_vocab(o.data, manifest);
  std::vector<QueryExample> examples = load_split(o.data, o.split, manifest);

  std::unique_ptr<TargetLM> lm;
  if (o.dynamic && o.scorer == "lm-nll") {
    if (o.lm_path.empty()) throw UsageError("--scorer lm-nll requires --lm");
    lm = std::make_unique<TargetLM>(load_lm(o.lm_path, vocab, manifest));
  }
  require_file(o.comp_path, "train-compressor");
  manifest.add_input(o.comp_path);
  Compressor comp = Compressor::load(o.comp_path);
  std::unique_ptr<Scorer> scorer = o.dynamic ? make_scorer(o.scorer, lm.get()) : nullptr;

  NoTape guard;
  const int n = o.limit > 0 ? std::min<int>(o.limit, static_cast<int>(examples.size()))
                            : static_cast<int>(examples.size());
  long original_sum = 0, compressed_sum = 0;
  ordered_json rows = ordered_json::array();
  for (int i = 0; i < n; ++i) {
    const QueryExample& ex = examples[static_cast<size_t>(i)];
    ordered_json row;
    row["id"] = ex.id;
    ordered_json docs = ordered_json::array();
    long original = 0, compressed = 0;

    CompressionPlan plan;
    if (o.dynamic) plan = assign_plan(rank_documents(ex, *scorer), o.rule);
    for (size_t d = 0; d < ex.documents.size(); ++d) {
      const Document& doc = ex.documents[d];
      ordered_json dj;
      dj["id"] = doc.id;
      dj["tokens"] = doc.tokens.size();
      const bool dropped = o.dynamic && plan.docs[d].dropped;
      const int ngram = o.dynamic && !dropped ? plan.docs[d].n_gram_size : o.ngram;
      original += static_cast<long>(doc.tokens.size());
      if (dropped) {
        dj["dropped"] = true;
      } else {
        CompressedDocument cd = comp.compress_document(ex.query, doc.tokens, ngram);
        dj["ngram"] = ngram;
        dj["embeddings"] = cd.embeddings.rows();
        compressed += cd.embeddings.rows();
      }
      docs.push_back(std::move(dj));
    }
    row["documents"] = std::move(docs);
    row["compression_ratio"] =
        compressed == 0 ? ordered_json("inf")
                        : ordered_json(static_cast<double>(original) / compressed);
    rows.push_back(std::move(row));
    original_sum += original;
    compressed_sum += compressed;
  }

  ordered_json out;
  out["examples"] = std::move(rows);
  out["original_tokens"] = original_sum;
  out["compressed_units"] = compressed_sum;
  out["compression_ratio"] = compressed_sum == 0
                                 ? ordered_json("inf")
                                 : ordered_json(static_cast<double>(original_sum) / compressed_sum);
  std::ofstream os(o.out, std::ios::trunc);
  if (!os) throw std::runtime_error("cannot write " + o.out);
  os << out.dump(2) << '\n';
  os.close();

  ordered_json cfg;
  cfg["data"] = o.data;
  cfg["split"] = o.split;
  cfg["compressor"] = o.comp_path;
  cfg["ngram"] = o.ngram;
  cfg["dynamic"] = o.dynamic;
  cfg["scorer"] = o.scorer;
  cfg["epsilon"] = o.rule.epsilon;
  cfg["cap"] = o.rule.cap;
  cfg["multiplier"] = o.rule.multiplier;
  cfg["limit"] = o.limit;
  cfg["out"] = o.out;
  manifest.set_config(cfg, 0);
  manifest.add_primary(o.out);
  manifest.write();

  std::cout << "compressed " << n << " examples: " << original_sum << " document tokens -> "
            << compressed_sum << " units (CR "
            << (compressed_sum == 0 ? std::string("inf")
                                    : fmt6(static_cast<double>(original_sum) / compressed_sum))
            << "); report at " << o.out << "\n";
  return 0;
}

// ---------------------------------------------------------------------------
// eval
// ---------------------------------------------------------------------------
struct EvalOpts {
  std::string data;
  std::string split = "test";
  std::string lm_path;
  std::string comp_path;
  std::string setting = "qgc";
  int ngram = 4;
  std::string scorer = "overlap";
  PlanRule rule;
  int keep = 2;
  EvalConfig eval;
  std::string out_dir = "eval_out";
  std::string runs_dir = "runs";
};

int cmd_eval(const EvalOpts& o) {
  Manifest manifest("eval", o.runs_dir);
  Vocabulary vocab = load_vocab(o.data, manifest);
  std::vector<QueryExample> examples = load_split(o.data, o.split, manifest);
  TargetLM lm = load_lm(o.lm_path, vocab, manifest);

  const bool needs_compressor = o.setting == "qgc" || o.setting == "qgc-dynamic";
  std::unique_ptr<Compressor> comp;
  if (needs_compressor)
    comp = std::make_unique<Compressor>(load_compressor(o.comp_path, lm, manifest));
  std::unique_ptr<Scorer> scorer;
  if (o.setting == "qgc-dynamic" || o.setting == "reranker-drop")
    scorer = make_scorer(o.scorer, &lm);

  PromptBuilder builder;
  std::string variant;
  if (o.setting == "closed-book") {
    builder = closed_book_builder();
  } else if (o.setting == "oracle") {
    builder = oracle_builder();
  } else if (o.setting == "base") {
    builder = original_builder();
  } else if (o.setting == "qgc") {
    builder = qgc_fixed_builder(*comp, lm, o.ngram);
    variant = "n=" + std::to_string(o.ngram);
  } else if (o.setting == "qgc-dynamic") {
    builder = qgc_dynamic_builder(*comp, lm, *scorer, o.rule);
    variant = "dynamic";
  } else if (o.setting == "truncation") {
    builder = truncation_builder(o.ngram, false);
    variant = "n=" + std::to_string(o.ngram);
  } else if (o.setting == "base-with-answer") {
    builder = truncation_builder(o.ngram, true);
    variant = "n=" + std::to_string(o.ngram);
  } else if (o.setting == "reranker-drop") {
    builder = reranker_drop_builder(*scorer, o.keep);
    variant = "keep=" + std::to_string(o.keep);
  } else {
    throw UsageError("unknown --setting " + o.setting);
  }

  const std::string label = o.setting == "qgc-dynamic" ? "qgc" : o.setting;
  SettingSummary summary =
      evaluate_setting(examples, vocab, lm, builder, label, variant, o.eval);

  fs::create_directories(o.out_dir);
  const std::string csv_path = data_file(o.out_dir, "eval.csv");
  const std::string json_path = data_file(o.out_dir, "eval.json");
  const std::string tp_path = data_file(o.out_dir, "throughput.json");
  const std::vector<SettingSummary> rows = {summary};
  write_eval_csv(csv_path, rows);
  write_eval_json(json_path, rows);
  write_throughput_json(tp_path, rows);

  ordered_json cfg;
  cfg["data"] = o.data;
  cfg["split"] = o.split;
  cfg["lm"] = o.lm_path;
  cfg["compressor"] = needs_compressor ? o.comp_path : "";
  cfg["setting"] = o.setting;
  cfg["ngram"] = o.ngram;
  cfg["scorer"] = o.scorer;
  cfg["epsilon"] = o.rule.epsilon;
  cfg["cap"] = o.rule.cap;
  cfg["multiplier"] = o.rule.multiplier;
  cfg["keep"] = o.keep;
  cfg["limit"] = o.eval.limit;
  cfg["warmup"] = o.eval.warmup_examples;
  cfg["max-new-tokens"] = o.eval.max_new_tokens;
  cfg["out-dir"] = o.out_dir;
  manifest.set_config(cfg, 0);
  manifest.add_primary(csv_path);
  manifest.add_primary(json_path);
  manifest.add_secondary(tp_path);
  manifest.write();

  std::cout << "setting " << label << (variant.empty() ? "" : " " + variant) << " on " << o.split
            << ": accuracy " << fmt6(summary.accuracy) << ", EM " << fmt6(summary.exact_match)
            << ", F1 " << fmt6(summary.f1) << ", CR " << fmt6(summary.compression_ratio) << "\n";
  return 0;
}

// ---------------------------------------------------------------------------
// study
// ---------------------------------------------------------------------------
struct StudyOpts {
  std::string data;
  std::string split = "test";
  std::string lm_path;
  std::string comp_path;
  StudyConfig study;
  std::string out_dir = "study_out";
  std::string runs_dir = "runs";
};

int cmd_study(const StudyOpts& o) {
  Manifest manifest("study", o.runs_dir);
  Vocabulary vocab = load_vocab(o.data, manifest);
  std::vector<QueryExample> examples = load_split(o.data, o.split, manifest);
  TargetLM lm = load_lm(o.lm_path, vocab, manifest);
  Compressor comp = load_compressor(o.comp_path, lm, manifest);

  StudyReport report = run_key_info_study(examples, vocab, lm, comp, o.study);

  fs::create_directories(o.out_dir);
  const std::string csv_path = data_file(o.out_dir, "study.csv");
  const std::string json_path = data_file(o.out_dir, "study.json");
  const std::string tp_path = data_file(o.out_dir, "throughput.json");
  write_eval_csv(csv_path, report.settings);
  write_eval_json(json_path, report.settings);
  write_throughput_json(tp_path, report.settings);

  ordered_json cfg;
  cfg["data"] = o.data;
  cfg["split"] = o.split;
  cfg["lm"] = o.lm_path;
  cfg["compressor"] = o.comp_path;
  cfg["ngrams"] = o.study.ngram_sweep;
  cfg["distractors"] = o.study.distractor_sweep;
  cfg["keep"] = o.study.reranker_keep;
  cfg["limit"] = o.study.eval.limit;
  cfg["warmup"] = o.study.eval.warmup_examples;
  cfg["max-new-tokens"] = o.study.eval.max_new_tokens;
  cfg["out-dir"] = o.out_dir;
  manifest.set_config(cfg, 0);
  manifest.add_primary(csv_path);
  manifest.add_primary(json_path);
  manifest.add_secondary(tp_path);
  manifest.write();

  std::cout << "study wrote " << report.settings.size() << " rows to " << csv_path << "\n";
  for (const auto& s : report.settings)
    std::cout << "  " << s.setting << (s.variant.empty() ? "" : " " + s.variant) << ": accuracy "
              << fmt6(s.accuracy) << ", CR " << fmt6(s.compression_ratio) << "\n";
  return 0;
}

// ---------------------------------------------------------------------------
// ablate
// ---------------------------------------------------------------------------
struct AblateOpts {
  std::string data;
  std::string lm_path;
  AblationConfig ab;
  std::string out_dir = "ablation_out";
  std::string runs_dir = "runs";
};

int cmd_ablate(const AblateOpts& o) {
  Manifest manifest("ablate", o.runs_dir);
  Vocabulary vocab = load_vocab(o.data, manifest);
  std::vector<QueryExample> train = load_split(o.data, "train", manifest);
  std::vector<QueryExample> dev = load_split(o.data, "dev", manifest);
  std::vector<QueryExample> test = load_split(o.data, "test", manifest);
  TargetLM lm = load_lm(o.lm_path, vocab, manifest);

  AblationReport report = run_ablations(train, dev, test, vocab, lm, o.ab);

  fs::create_directories(o.out_dir);
  const std::string csv_path = data_file(o.out_dir, "ablations.csv");
  const std::string json_path = data_file(o.out_dir, "ablations.json");
  write_ablation_csv(csv_path, report);
  write_ablation_json(json_path, report);

  ordered_json cfg;
  cfg["data"] = o.data;
  cfg["lm"] = o.lm_path;
  cfg["d-c"] = o.ab.architecture.d_c;
  cfg["heads"] = o.ab.architecture.heads;
  cfg["enc-layers"] = o.ab.architecture.enc_layers;
  cfg["rev-layers"] = o.ab.architecture.rev_layers;
  cfg["ff-hidden"] = o.ab.architecture.ff_hidden;
  cfg["epochs"] = o.ab.train.epochs;
  cfg["lr"] = o.ab.train.learning_rate;
  cfg["batch"] = o.ab.train.batch_size;
  cfg["kl-weight"] = o.ab.train.kl_weight;
  cfg["ngrams"] = o.ab.train.ngram_candidates;
  cfg["seeds"] = o.ab.seeds;
  cfg["fixed-ngram"] = o.ab.fixed_ngram;
  cfg["epsilon"] = o.ab.rule.epsilon;
  cfg["limit"] = o.ab.eval.limit;
  cfg["out-dir"] = o.out_dir;
  manifest.set_config(cfg, o.ab.seeds.empty() ? 0 : o.ab.seeds.front());
  manifest.add_primary(csv_path);
  manifest.add_primary(json_path);
  manifest.write();

  std::cout << "ablations wrote " << report.rows.size() << " rows to " << csv_path << "\n";
  for (const auto& r : report.rows)
    std::cout << "  " << r.variant << ": median accuracy " << fmt6(r.median_accuracy) << "\n";
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"query-guided context compression toolkit"};
  app.require_subcommand(1);

  GenDataOpts g;
  TrainLmOpts tl;
  TrainCompOpts tc;
  CompressOpts cp;
  EvalOpts ev;
  StudyOpts st;
  AblateOpts ab;

  auto add_common = [](CLI::App* cmd, std::string& runs_dir) {
    cmd->add_option("--runs-dir", runs_dir, "directory for run manifests")
        ->capture_default_str();
    std::string dummy;
    cmd->add_option("--config", dummy,
                    "JSON file of defaults; keys are long flag names, flags win");
  };

  // gen-data -----------------------------------------------------------------
  CLI::App* gen = app.add_subcommand("gen-data", "generate a synthetic retrieval-QA corpus");
  gen->add_option("--examples", g.gen.num_examples)->check(CLI::PositiveNumber)->capture_default_str();
  gen->add_option("--docs", g.gen.docs_per_example)->check(CLI::PositiveNumber)->capture_default_str();
  gen->add_option("--doc-len", g.gen.doc_len)->check(CLI::PositiveNumber)->capture_default_str();
  gen->add_option("--facts", g.gen.facts_per_doc)->check(CLI::PositiveNumber)->capture_default_str();
  gen->add_option("--vocab", g.gen.vocab_size)->check(CLI::PositiveNumber)->capture_default_str();
  gen->add_option("--attrs", g.gen.num_attrs)->check(CLI::PositiveNumber)->capture_default_str();
  gen->add_option("--values", g.gen.num_values)->check(CLI::PositiveNumber)->capture_default_str();
  gen->add_option("--fillers", g.gen.num_fillers)->check(CLI::PositiveNumber)->capture_default_str();
  gen->add_option("--heldout", g.gen.heldout_entity_fraction)->capture_default_str();
  gen->add_option("--seed", g.gen.seed)->capture_default_str();
  gen->add_option("--out", g.out, "output directory")->required();
  add_common(gen, g.runs_dir);

  // train-lm -----------------------------------------------------------------
  CLI::App* trainlm = app.add_subcommand("train-lm", "pretrain and freeze the target LM");
  trainlm->add_option("--data", tl.data, "gen-data output directory")->required();
  trainlm->add_option("--out", tl.out, "checkpoint path")->required();
  trainlm->add_option("--d-model", tl.lm.d_model)->check(CLI::PositiveNumber)->capture_default_str();
  trainlm->add_option("--layers", tl.lm.layers)->check(CLI::PositiveNumber)->capture_default_str();
  trainlm->add_option("--heads", tl.lm.heads)->check(CLI::PositiveNumber)->capture_default_str();
  trainlm->add_option("--ff-hidden", tl.lm.ff_hidden)->check(CLI::PositiveNumber)->capture_default_str();
  trainlm->add_option("--context-limit", tl.lm.context_limit)->check(CLI::PositiveNumber)->capture_default_str();
  trainlm->add_option("--epochs", tl.pre.epochs)->check(CLI::PositiveNumber)->capture_default_str();
  trainlm->add_option("--lr", tl.pre.learning_rate)->capture_default_str();
  trainlm->add_option("--batch", tl.pre.batch_size)->check(CLI::PositiveNumber)->capture_default_str();
  trainlm->add_option("--warmup", tl.pre.warmup_steps)->capture_default_str();
  trainlm->add_option("--target-acc", tl.pre.target_accuracy)->capture_default_str();
  trainlm->add_option("--eval-examples", tl.pre.eval_examples)->capture_default_str();
  trainlm->add_option("--max-new-tokens", tl.pre.max_new_tokens)->capture_default_str();
  trainlm->add_option("--min-docs", tl.pre.min_docs)->capture_default_str();
  trainlm->add_option("--max-docs", tl.pre.max_docs)->capture_default_str();
  trainlm->add_option("--seed", tl.pre.seed)->capture_default_str();
  add_common(trainlm, tl.runs_dir);

  // train-compressor ----------------------------------------------------------
  CLI::App* trainc = app.add_subcommand("train-compressor", "train the compressor against a frozen LM");
  trainc->add_option("--data", tc.data)->required();
  trainc->add_option("--lm", tc.lm_path, "frozen LM checkpoint")->required();
  trainc->add_option("--out", tc.out, "checkpoint path")->required();
  trainc->add_option("--d-c", tc.comp.d_c)->check(CLI::PositiveNumber)->capture_default_str();
  trainc->add_option("--heads", tc.comp.heads)->check(CLI::PositiveNumber)->capture_default_str();
  trainc->add_option("--enc-layers", tc.comp.enc_layers)->check(CLI::PositiveNumber)->capture_default_str();
  trainc->add_option("--rev-layers", tc.comp.rev_layers)->check(CLI::PositiveNumber)->capture_default_str();
  trainc->add_option("--ff-hidden", tc.comp.ff_hidden)->check(CLI::PositiveNumber)->capture_default_str();
  trainc->add_option("--context-limit", tc.comp.context_limit)->check(CLI::PositiveNumber)->capture_default_str();
  trainc->add_option("--n-default", tc.comp.n_default)->check(CLI::PositiveNumber)->capture_default_str();
  trainc->add_option("--epochs", tc.train.epochs)->check(CLI::PositiveNumber)->capture_default_str();
  trainc->add_option("--lr", tc.train.learning_rate)->capture_default_str();
  trainc->add_option("--batch", tc.train.batch_size)->check(CLI::PositiveNumber)->capture_default_str();
  trainc->add_option("--kl-weight", tc.train.kl_weight)->capture_default_str();
  trainc->add_option("--ngrams", tc.train.ngram_candidates, "training n-gram candidates")
      ->capture_default_str();
  trainc->add_option("--distractor-min", tc.train.distractor_min)->capture_default_str();
  trainc->add_option("--distractor-max", tc.train.distractor_max)->capture_default_str();
  trainc->add_option("--target-acc", tc.train.target_accuracy)->capture_default_str();
  trainc->add_option("--eval-ngram", tc.train.eval_ngram)->check(CLI::PositiveNumber)->capture_default_str();
  trainc->add_option("--eval-examples", tc.train.eval_examples)->capture_default_str();
  trainc->add_option("--max-new-tokens", tc.train.max_new_tokens)->capture_default_str();
  trainc->add_option("--seed", tc.train.seed)->capture_default_str();
  add_common(trainc, tc.runs_dir);

  // compress -------------------------------------------------------------------
  CLI::App* compress = app.add_subcommand("compress", "compress documents and report unit counts");
  compress->add_option("--data", cp.data)->required();
  compress->add_option("--split", cp.split)->check(CLI::IsMember({"train", "dev", "test"}))
      ->capture_default_str();
  compress->add_option("--compressor", cp.comp_path)->required();
  compress->add_option("--lm", cp.lm_path, "needed only for --scorer lm-nll");
  compress->add_option("--ngram", cp.ngram)->check(CLI::PositiveNumber)->capture_default_str();
  compress->add_flag("--dynamic", cp.dynamic, "use the rank-based dynamic strategy");
  compress->add_option("--scorer", cp.scorer)->check(CLI::IsMember({"overlap", "lm-nll", "file"}))
      ->capture_default_str();
  compress->add_option("--epsilon", cp.rule.epsilon)->capture_default_str();
  compress->add_option("--cap", cp.rule.cap)->check(CLI::PositiveNumber)->capture_default_str();
  compress->add_option("--multiplier", cp.rule.multiplier)->check(CLI::PositiveNumber)->capture_default_str();
  compress->add_option("--limit", cp.limit)->capture_default_str();
  compress->add_option("--out", cp.out, "report path")->required();
  add_common(compress, cp.runs_dir);

  // eval -----------------------------------------------------------------------
  CLI::App* eval = app.add_subcommand("eval", "evaluate one setting");
  eval->add_option("--data", ev.data)->required();
  eval->add_option("--split", ev.split)->check(CLI::IsMember({"train", "dev", "test"}))
      ->capture_default_str();
  eval->add_option("--lm", ev.lm_path)->required();
  eval->add_option("--compressor", ev.comp_path, "needed for qgc settings");
  eval->add_option("--setting", ev.setting)
      ->check(CLI::IsMember({"closed-book", "oracle", "base", "qgc", "qgc-dynamic", "truncation",
                             "base-with-answer", "reranker-drop"}))
      ->capture_default_str();
  eval->add_option("--ngram", ev.ngram)->check(CLI::PositiveNumber)->capture_default_str();
  eval->add_option("--scorer", ev.scorer)->check(CLI::IsMember({"overlap", "lm-nll", "file"}))
      ->capture_default_str();
  eval->add_option("--epsilon", ev.rule.epsilon)->capture_default_str();
  eval->add_option("--cap", ev.rule.cap)->check(CLI::PositiveNumber)->capture_default_str();
  eval->add_option("--multiplier", ev.rule.multiplier)->check(CLI::PositiveNumber)->capture_default_str();
  eval->add_option("--keep", ev.keep)->check(CLI::PositiveNumber)->capture_default_str();
  eval->add_option("--limit", ev.eval.limit)->capture_default_str();
  eval->add_option("--warmup", ev.eval.warmup_examples)->capture_default_str();
  eval->add_option("--max-new-tokens", ev.eval.max_new_tokens)->capture_default_str();
  eval->add_option("--out-dir", ev.out_dir)->capture_default_str();
  add_common(eval, ev.runs_dir);

  // study ----------------------------------------------------------------------
  CLI::App* study = app.add_subcommand("study", "run the key-information-loss study");
  study->add_option("--data", st.data)->required();
  study->add_option("--split", st.split)->check(CLI::IsMember({"train", "dev", "test"}))
      ->capture_default_str();
  study->add_option("--lm", st.lm_path)->required();
  study->add_option("--compressor", st.comp_path)->required();
  study->add_option("--ngrams", st.study.ngram_sweep, "compression sweep")->capture_default_str();
  study->add_option("--distractors", st.study.distractor_sweep, "documents added to gold")
      ->capture_default_str();
  study->add_option("--keep", st.study.reranker_keep)->check(CLI::PositiveNumber)->capture_default_str();
  study->add_option("--limit", st.study.eval.limit)->capture_default_str();
  study->add_option("--warmup", st.study.eval.warmup_examples)->capture_default_str();
  study->add_option("--max-new-tokens", st.study.eval.max_new_tokens)->capture_default_str();
  study->add_option("--out-dir", st.out_dir)->capture_default_str();
  add_common(study, st.runs_dir);

  // ablate ---------------------------------------------------------------------
  CLI::App* ablate = app.add_subcommand("ablate", "train and evaluate the ablation variants");
  ablate->add_option("--data", ab.data)->required();
  ablate->add_option("--lm", ab.lm_path)->required();
  ablate->add_option("--d-c", ab.ab.architecture.d_c)->check(CLI::PositiveNumber)->capture_default_str();
  ablate->add_option("--heads", ab.ab.architecture.heads)->check(CLI::PositiveNumber)->capture_default_str();
  ablate->add_option("--enc-layers", ab.ab.architecture.enc_layers)->check(CLI::PositiveNumber)->capture_default_str();
  ablate->add_option("--rev-layers", ab.ab.architecture.rev_layers)->check(CLI::PositiveNumber)->capture_default_str();
  ablate->add_option("--ff-hidden", ab.ab.architecture.ff_hidden)->check(CLI::PositiveNumber)->capture_default_str();
  ablate->add_option("--context-limit", ab.ab.architecture.context_limit)->check(CLI::PositiveNumber)->capture_default_str();
  ablate->add_option("--epochs", ab.ab.train.epochs)->check(CLI::PositiveNumber)->capture_default_str();
  ablate->add_option("--lr", ab.ab.train.learning_rate)->capture_default_str();
  ablate->add_option("--batch", ab.ab.train.batch_size)->check(CLI::PositiveNumber)->capture_default_str();
  ablate->add_option("--kl-weight", ab.ab.train.kl_weight)->capture_default_str();
  ablate->add_option("--ngrams", ab.ab.train.ngram_candidates)->capture_default_str();
  ablate->add_option("--distractor-min", ab.ab.train.distractor_min)->capture_default_str();
  ablate->add_option("--distractor-max", ab.ab.train.distractor_max)->capture_default_str();
  ablate->add_option("--eval-ngram", ab.ab.train.eval_ngram)->check(CLI::PositiveNumber)->capture_default_str();
  ablate->add_option("--eval-examples", ab.ab.train.eval_examples)->capture_default_str();
  ablate->add_option("--seeds", ab.ab.seeds, "one training run per seed")->capture_default_str();
  ablate->add_option("--fixed-ngram", ab.ab.fixed_ngram)->check(CLI::PositiveNumber)->capture_default_str();
  ablate->add_option("--epsilon", ab.ab.rule.epsilon)->capture_default_str();
  ablate->add_option("--cap", ab.ab.rule.cap)->check(CLI::PositiveNumber)->capture_default_str();
  ablate->add_option("--multiplier", ab.ab.rule.multiplier)->check(CLI::PositiveNumber)->capture_default_str();
  ablate->add_option("--limit", ab.ab.eval.limit)->capture_default_str();
  ablate->add_option("--warmup", ab.ab.eval.warmup_examples)->capture_default_str();
  ablate->add_option("--max-new-tokens", ab.ab.eval.max_new_tokens)->capture_default_str();
  ablate->add_option("--out-dir", ab.out_dir)->capture_default_str();
  add_common(ablate, ab.runs_dir);

  try {
    std::vector<std::string> args = expand_config(argc, argv);
    std::reverse(args.begin(), args.end());
    app.parse(args);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    std::cerr << "usage error: " << e.what() << "\n";
    return 2;
  } catch (const UsageError& e) {
    std::cerr << "usage error: " << e.what() << "\n";
    return 2;
  }

  try {
    if (gen->parsed()) return cmd_gen_data(g);
    if (trainlm->parsed()) return cmd_train_lm(tl);
    if (trainc->parsed()) return cmd_train_compressor(tc);
    if (compress->parsed()) return cmd_compress(cp);
    if (eval->parsed()) return cmd_eval(ev);
    if (study->parsed()) return cmd_study(st);
    if (ablate->parsed()) return cmd_ablate(ab);
  } catch (const UsageError& e) {
    std::cerr << "usage error: " << e.what() << "\n";
    return 2;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  std::cerr << "usage error: no command given\n";
  return 2;
}
