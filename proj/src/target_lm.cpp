#include "qgc/target_lm.hpp"

#include <nlohmann/json.hpp>

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <stdexcept>

namespace qgc {

using ordered_json = nlohmann::ordered_json;

// ---------------------------------------------------------------------------
// MixedInput and scaffold builders
// ---------------------------------------------------------------------------

long MixedInput::length() const {
  long n = 0;
  for (const auto& seg : segments) {
    if (std::holds_alternative<TokenSegment>(seg))
      n += static_cast<long>(std::get<TokenSegment>(seg).ids.size());
    else
      n += std::get<SoftSegment>(seg).vectors.rows();
  }
  return n;
}

void MixedInput::push_tokens(std::vector<int> ids) {
  if (ids.empty()) return;
  if (!segments.empty() && std::holds_alternative<TokenSegment>(segments.back())) {
    auto& last = std::get<TokenSegment>(segments.back()).ids;
    last.insert(last.end(), ids.begin(), ids.end());
    return;
  }
  segments.push_back(TokenSegment{std::move(ids)});
}

void MixedInput::push_token(int id) { push_tokens({id}); }

void MixedInput::push_soft(Tensor vectors) {
  if (vectors.rank() != 2)
    throw std::invalid_argument("soft segment must be rank 2, got " + shape_str(vectors.shape()));
  segments.push_back(SoftSegment{std::move(vectors)});
}

MixedInput build_prompt(const std::vector<int>& instruction,
                        const std::vector<std::vector<int>>& docs, const std::vector<int>& query) {
  MixedInput input;
  input.push_token(kBosId);
  input.push_tokens(instruction);
  input.push_token(kSepId);
  for (const auto& d : docs) {
    input.push_tokens(d);
    input.push_token(kSepId);
  }
  input.push_tokens(query);
  input.push_token(kSepId);
  return input;
}

MixedInput build_raw_prompt(const QueryExample& ex, const std::vector<int>& doc_indices) {
  std::vector<std::vector<int>> docs;
  docs.reserve(doc_indices.size());
  for (int i : doc_indices) {
    if (i < 0 || i >= static_cast<int>(ex.documents.size()))
      throw std::invalid_argument("example " + ex.id + ": document index " + std::to_string(i) +
                                  " out of range");
    docs.push_back(ex.documents[static_cast<size_t>(i)].tokens);
  }
  return build_prompt(ex.instruction, docs, ex.query);
}

std::vector<int> all_doc_indices(const QueryExample& ex) {
  std::vector<int> idx(ex.documents.size());
  for (size_t i = 0; i < idx.size(); ++i) idx[i] = static_cast<int>(i);
  return idx;
}

std::vector<int> build_training_sequence(const QueryExample& ex,
                                         const std::vector<int>& doc_indices) {
  MixedInput prompt = build_raw_prompt(ex, doc_indices);
  std::vector<int> seq = std::get<TokenSegment>(prompt.segments.at(0)).ids;
  seq.insert(seq.end(), ex.answer_tokens.begin(), ex.answer_tokens.end());
  seq.push_back(kEosId);
  return seq;
}

// ---------------------------------------------------------------------------
// TargetLM
// ---------------------------------------------------------------------------

TargetLM::TargetLM(const LMConfig& cfg, Rng& rng) : cfg_(cfg) {
  if (cfg.vocab_size <= kNumSpecials)
    throw std::invalid_argument("target lm: vocab_size must exceed the special tokens");
  if (cfg.d_model <= 0 || cfg.heads <= 0 || cfg.d_model % cfg.heads != 0)
    throw std::invalid_argument("target lm: d_model must be a positive multiple of heads");
  if (cfg.layers <= 0 || cfg.context_limit <= 1)
    throw std::invalid_argument("target lm: layers and context_limit must be positive");
  tok_emb_ = Tensor::randn({cfg.vocab_size, cfg.d_model}, rng, 0.02, true);
  pos_emb_ = Tensor::randn({cfg.context_limit, cfg.d_model}, rng, 0.01, true);
  layers_.reserve(static_cast<size_t>(cfg.layers));
  for (int i = 0; i < cfg.layers; ++i)
    layers_.push_back(EncoderLayerParams::create(cfg.d_model, cfg.heads, cfg.ff_hidden, rng));
  final_ln_ = LayerNormParams::create(cfg.d_model);
}

void TargetLM::freeze() {
  for (auto& nt : named_params()) nt.tensor.set_requires_grad(false);
  frozen_ = true;
}

Tensor TargetLM::hidden_states(const MixedInput& input) const {
  if (input.segments.empty()) throw std::invalid_argument("target lm: empty input");
  std::vector<Tensor> parts;
  parts.reserve(input.segments.size());
  for (const auto& seg : input.segments) {
    if (std::holds_alternative<TokenSegment>(seg)) {
      parts.push_back(embedding(tok_emb_, std::get<TokenSegment>(seg).ids));
    } else {
      const Tensor& soft = std::get<SoftSegment>(seg).vectors;
      if (soft.cols() != cfg_.d_model)
        throw std::invalid_argument("target lm: soft segment width " +
                                    std::to_string(soft.cols()) + " does not match d_model " +
                                    std::to_string(cfg_.d_model));
      parts.push_back(soft);
    }
  }
  Tensor x = parts.size() == 1 ? parts[0] : concat_rows(parts);
  const int len = x.rows();
  if (len > cfg_.context_limit)
    throw std::invalid_argument("target lm: sequence length " + std::to_string(len) +
                                " exceeds context_limit " + std::to_string(cfg_.context_limit));
  x = add(x, slice_rows(pos_emb_, 0, len));
  Tensor bias = attention_bias_causal(len);
  for (const auto& layer : layers_) x = transformer_encoder_layer(x, layer, bias);
  return layer_norm(x, final_ln_.gain, final_ln_.bias);
}

Tensor TargetLM::next_token_logits(const std::vector<int>& sequence) const {
  if (sequence.size() < 2)
    throw std::invalid_argument("target lm: need at least two tokens for next-token loss");
  MixedInput input;
  input.push_tokens(std::vector<int>(sequence.begin(), sequence.end() - 1));
  Tensor h = hidden_states(input);
  return matmul_nt(h, tok_emb_);
}

Tensor TargetLM::answer_logits(const MixedInput& prompt, const std::vector<int>& answer) const {
  if (answer.empty()) throw std::invalid_argument("target lm: empty answer");
  const long prefix_len = prompt.length();
  if (prefix_len < 1) throw std::invalid_argument("target lm: empty prompt");
  MixedInput input = prompt;
  input.push_tokens(answer);
  Tensor h = hidden_states(input);
  Tensor rows = slice_rows(h, static_cast<int>(prefix_len) - 1, static_cast<int>(answer.size()));
  return matmul_nt(rows, tok_emb_);
}

Tensor TargetLM::answer_cross_entropy(const MixedInput& prompt,
                                      const std::vector<int>& answer) const {
  return cross_entropy_rows(answer_logits(prompt, answer), answer);
}

AnswerLogprobs TargetLM::answer_logprobs(const MixedInput& prompt,
                                         const std::vector<int>& answer) const {
  NoTape guard;
  Tensor logits = answer_logits(prompt, answer);
  const int rows = logits.rows(), v = logits.cols();
  AnswerLogprobs out;
  out.dists.resize(static_cast<size_t>(rows));
  for (int i = 0; i < rows; ++i) {
    const double* row = logits.data().data() + static_cast<size_t>(i) * v;
    double mx = row[0];
    for (int j = 1; j < v; ++j) mx = std::max(mx, row[j]);
    double sum = 0.0;
    auto& dist = out.dists[static_cast<size_t>(i)];
    dist.resize(static_cast<size_t>(v));
    for (int j = 0; j < v; ++j) {
      dist[static_cast<size_t>(j)] = std::exp(row[j] - mx);
      sum += dist[static_cast<size_t>(j)];
    }
    for (int j = 0; j < v; ++j) dist[static_cast<size_t>(j)] /= sum;
    out.log_prob += std::log(std::max(dist[static_cast<size_t>(answer[static_cast<size_t>(i)])], 1e-300));
  }
  return out;
}

Tensor TargetLM::answer_kl(const MixedInput& full, const MixedInput& compressed,
                           const std::vector<int>& answer) const {
  AnswerLogprobs teacher = answer_logprobs(full, answer);  // detached by construction
  std::vector<double> flat;
  flat.reserve(teacher.dists.size() * static_cast<size_t>(cfg_.vocab_size));
  for (const auto& row : teacher.dists) flat.insert(flat.end(), row.begin(), row.end());
  Tensor student_logits = answer_logits(compressed, answer);
  return kl_vs_const_rows(flat, student_logits);
}

std::vector<int> TargetLM::generate_greedy(const MixedInput& prompt, int max_new_tokens) const {
  if (max_new_tokens <= 0) throw std::invalid_argument("target lm: max_new_tokens must be positive");
  NoTape guard;
  MixedInput working = prompt;
  std::vector<int> out;
  for (int step = 0; step < max_new_tokens; ++step) {
    Tensor h = hidden_states(working);
    Tensor last = slice_rows(h, h.rows() - 1, 1);
    Tensor logits = matmul_nt(last, tok_emb_);
    int best = 0;
    const double* row = logits.data().data();
    for (int j = 1; j < cfg_.vocab_size; ++j)
      if (row[j] > row[best]) best = j;  // strict: ties go to the lowest id
    if (best == kEosId) break;
    out.push_back(best);
    working.push_token(best);
  }
  return out;
}

NamedParams TargetLM::named_params() const {
  NamedParams out;
  out.push_back({"lm.tok_emb", tok_emb_});
  out.push_back({"lm.pos_emb", pos_emb_});
  for (size_t i = 0; i < layers_.size(); ++i)
    collect(out, "lm.layer" + std::to_string(i), layers_[i]);
  collect(out, "lm.final_ln", final_ln_);
  return out;
}

std::vector<Tensor> TargetLM::trainable_params() const { return trainable_of(named_params()); }

uint64_t TargetLM::params_hash() const { return qgc::params_hash(named_params()); }

void TargetLM::save(const std::string& path) const {
  save_checkpoint(path, named_params());
  ordered_json j;
  j["kind"] = "target_lm";
  j["vocab_size"] = cfg_.vocab_size;
  j["d_model"] = cfg_.d_model;
  j["layers"] = cfg_.layers;
  j["heads"] = cfg_.heads;
  j["ff_hidden"] = cfg_.ff_hidden;
  j["context_limit"] = cfg_.context_limit;
  j["frozen"] = frozen_;
  std::ofstream os(path + ".json", std::ios::trunc);
  if (!os) throw std::runtime_error("target lm: cannot write sidecar " + path + ".json");
  os << j.dump(2) << '\n';
}

TargetLM TargetLM::load(const std::string& path) {
  std::ifstream is(path + ".json");
  if (!is)
    throw std::runtime_error("target lm: cannot open " + path +
                             ".json; produce the model with the train-lm command");
  ordered_json j = ordered_json::parse(is, nullptr, false);
  if (j.is_discarded() || j.value("kind", "") != std::string("target_lm"))
    throw std::runtime_error("target lm: " + path + ".json is not a target_lm sidecar");
  LMConfig cfg;
  cfg.vocab_size = j.at("vocab_size").get<int>();
  cfg.d_model = j.at("d_model").get<int>();
  cfg.layers = j.at("layers").get<int>();
  cfg.heads = j.at("heads").get<int>();
  cfg.ff_hidden = j.at("ff_hidden").get<int>();
  cfg.context_limit = j.at("context_limit").get<int>();
  Rng rng(0);
  TargetLM lm(cfg, rng);
  load_checkpoint_into(path, lm.named_params());
  if (j.value("frozen", false)) lm.freeze();
  return lm;
}

// ---------------------------------------------------------------------------
// Pretraining
// ---------------------------------------------------------------------------

namespace {

bool contains_subsequence(const std::vector<int>& haystack, const std::vector<int>& needle) {
  if (needle.empty() || haystack.size() < needle.size()) return false;
  for (size_t i = 0; i + needle.size() <= haystack.size(); ++i) {
    bool ok = true;
    for (size_t j = 0; j < needle.size(); ++j)
      if (haystack[i + j] != needle[j]) {
        ok = false;
        break;
      }
    if (ok) return true;
  }
  return false;
}

double gold_probe_accuracy(const TargetLM& lm, const std::vector<QueryExample>& dev,
                           int eval_examples, int max_new_tokens) {
  const int n = std::min<int>(eval_examples, static_cast<int>(dev.size()));
  if (n == 0) return 0.0;
  int correct = 0;
  for (int i = 0; i < n; ++i) {
    const QueryExample& ex = dev[static_cast<size_t>(i)];
    MixedInput prompt = build_raw_prompt(ex, {ex.gold_index()});
    std::vector<int> pred = lm.generate_greedy(prompt, max_new_tokens);
    if (contains_subsequence(pred, ex.answer_tokens)) ++correct;
  }
  return static_cast<double>(correct) / n;
}

}  // namespace

PretrainReport pretrain_lm(TargetLM& lm, const std::vector<QueryExample>& train,
                           const std::vector<QueryExample>& dev, const PretrainConfig& cfg) {
  if (lm.frozen()) throw std::runtime_error("pretrain: the target LM is frozen");
  if (train.empty()) throw std::invalid_argument("pretrain: empty training set");
  if (cfg.epochs < 1 || cfg.batch_size < 1)
    throw std::invalid_argument("pretrain: epochs and batch_size must be positive");

  AdamOptimizer opt(lm.trainable_params(), cfg.learning_rate);
  Rng rng(cfg.seed);
  PretrainReport report;
  long step = 0;

  for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
    std::vector<int> order(train.size());
    for (size_t i = 0; i < order.size(); ++i) order[i] = static_cast<int>(i);
    rng.shuffle(order);

    double loss_sum = 0.0;
    long seq_count = 0;
    for (size_t pos = 0; pos < order.size(); pos += static_cast<size_t>(cfg.batch_size)) {
      const size_t end = std::min(order.size(), pos + static_cast<size_t>(cfg.batch_size));
      const int actual = static_cast<int>(end - pos);
      opt.zero_grad();
      for (size_t b = pos; b < end; ++b) {
        const QueryExample& ex = train[static_cast<size_t>(order[b])];
        const int total_docs = static_cast<int>(ex.documents.size());
        int kmax = cfg.max_docs > 0 ? std::min(cfg.max_docs, total_docs) : total_docs;
        int kmin = std::max(1, std::min(cfg.min_docs, kmax));
        int k = rng.randint(kmin, kmax);

        std::vector<int> others;
        const int gold = ex.gold_index();
        for (int i = 0; i < total_docs; ++i)
          if (i != gold) others.push_back(i);
        rng.shuffle(others);
        std::vector<int> doc_indices = {gold};
        for (int i = 0; i + 1 < k; ++i) doc_indices.push_back(others[static_cast<size_t>(i)]);
        rng.shuffle(doc_indices);

        std::vector<int> seq = build_training_sequence(ex, doc_indices);
        std::vector<int> targets(seq.begin() + 1, seq.end());
        Tape tape;
        Tensor logits = lm.next_token_logits(seq);
        Tensor token_ce = scale(cross_entropy_rows(logits, targets),
                                1.0 / static_cast<double>(targets.size()));
        Tensor loss = scale(token_ce, 1.0 / actual);
        tape.backward(loss);
        loss_sum += token_ce.value();
        ++seq_count;
      }
      double warm = cfg.warmup_steps > 0
                        ? std::min(1.0, static_cast<double>(step + 1) / cfg.warmup_steps)
                        : 1.0;
      opt.set_learning_rate(cfg.learning_rate * warm);
      opt.step();
      ++step;
    }

    report.epoch_loss.push_back(loss_sum / static_cast<double>(seq_count));
    double acc = gold_probe_accuracy(lm, dev, cfg.eval_examples, cfg.max_new_tokens);
    report.epoch_accuracy.push_back(acc);
    if (acc > report.best_accuracy) {
      report.best_accuracy = acc;
      report.best_epoch = epoch;
    }
    if (cfg.target_accuracy > 0.0 && acc >= cfg.target_accuracy) {
      report.reached_target = true;
      break;
    }
  }

  if (cfg.target_accuracy > 0.0 && !report.reached_target) {
    char buf[160];
    std::snprintf(buf, sizeof(buf),
                  "pretrain: gold-document accuracy %.4f after %d epochs is below the %.4f target",
                  report.best_accuracy, static_cast<int>(report.epoch_loss.size()),
                  cfg.target_accuracy);
    throw std::runtime_error(buf);
  }
  return report;
}

}  // namespace qgc
