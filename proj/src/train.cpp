#include "qgc/train.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <stdexcept>

namespace qgc {

namespace {

bool doc_contains(const Document& doc, const std::vector<int>& tokens) {
  for (int t : tokens)
    if (std::find(doc.tokens.begin(), doc.tokens.end(), t) != doc.tokens.end()) return true;
  return false;
}

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

}  // namespace

std::vector<const Document*> build_distractor_pool(const std::vector<QueryExample>& corpus) {
  std::vector<const Document*> pool;
  for (const auto& ex : corpus)
    for (const auto& doc : ex.documents) pool.push_back(&doc);
  return pool;
}

Batch build_batch(const std::vector<QueryExample>& corpus, const std::vector<int>& example_indices,
                  const std::vector<const Document*>& pool, const TrainConfig& cfg, Rng& rng) {
  if (cfg.ngram_candidates.empty())
    throw std::invalid_argument("build_batch: empty n-gram candidate list");
  if (cfg.distractor_min < 0 || cfg.distractor_max < cfg.distractor_min)
    throw std::invalid_argument("build_batch: bad distractor range");
  Batch batch;
  batch.ngram = cfg.ngram_candidates[static_cast<size_t>(
      rng.randint(0, static_cast<int>(cfg.ngram_candidates.size()) - 1))];
  for (int idx : example_indices) {
    const QueryExample& ex = corpus.at(static_cast<size_t>(idx));
    TrainInstance inst;
    inst.example = &ex;
    const Document& gold = ex.documents[static_cast<size_t>(ex.gold_index())];
    inst.docs.push_back(&gold);
    const int want = rng.randint(cfg.distractor_min, cfg.distractor_max);
    for (int d = 0; d < want; ++d) {
      const Document* pick = nullptr;
      for (int attempt = 0; attempt < 200 && !pick; ++attempt) {
        const Document* cand = pool[static_cast<size_t>(rng.randint(0, static_cast<int>(pool.size()) - 1))];
        if (cand == &gold) continue;
        if (doc_contains(*cand, ex.answer_tokens)) continue;
        pick = cand;
      }
      if (!pick)
        throw std::runtime_error("build_batch: not enough answer-free distractors in the corpus for " +
                                 ex.id);
      inst.docs.push_back(pick);
    }
    rng.shuffle(inst.docs);
    batch.instances.push_back(std::move(inst));
  }
  return batch;
}

LossBreakdown compressor_loss(const TrainInstance& instance, const Compressor& compressor,
                              const TargetLM& lm, int ngram, double kl_weight) {
  const QueryExample& ex = *instance.example;
  if (instance.docs.empty()) throw std::invalid_argument("compressor_loss: instance has no documents");

  // teacher prompt: the raw documents
  MixedInput full;
  full.push_token(kBosId);
  full.push_tokens(ex.instruction);
  full.push_token(kSepId);
  for (const Document* doc : instance.docs) {
    full.push_tokens(doc->tokens);
    full.push_token(kSepId);
  }
  full.push_tokens(ex.query);
  full.push_token(kSepId);

  // student prompt: the same scaffold with each document compressed at n
  MixedInput compressed;
  compressed.push_token(kBosId);
  compressed.push_tokens(ex.instruction);
  compressed.push_token(kSepId);
  for (const Document* doc : instance.docs) {
    CompressedDocument cd = compressor.compress_document(ex.query, doc->tokens, ngram);
    compressed.push_soft(cd.embeddings);
    compressed.push_token(kSepId);
  }
  compressed.push_tokens(ex.query);
  compressed.push_token(kSepId);

  Tensor student_logits = lm.answer_logits(compressed, ex.answer_tokens);
  Tensor ce = cross_entropy_rows(student_logits, ex.answer_tokens);

  AnswerLogprobs teacher = lm.answer_logprobs(full, ex.answer_tokens);
  std::vector<double> flat;
  flat.reserve(teacher.dists.size() * teacher.dists[0].size());
  for (const auto& row : teacher.dists) flat.insert(flat.end(), row.begin(), row.end());
  Tensor kl = kl_vs_const_rows(flat, student_logits);

  LossBreakdown out;
  out.ce = ce.value();
  out.kl = kl.value();
  out.total = add(ce, scale(kl, kl_weight));
  if (!std::isfinite(out.total.value()))
    throw std::runtime_error("compressor_loss: non-finite loss on example " + ex.id);
  return out;
}

double fixed_n_accuracy(const std::vector<QueryExample>& examples, const Compressor& compressor,
                        const TargetLM& lm, int ngram, int max_new_tokens, int limit) {
  const int n = limit > 0 ? std::min<int>(limit, static_cast<int>(examples.size()))
                          : static_cast<int>(examples.size());
  if (n == 0) return 0.0;
  NoTape guard;
  int correct = 0;
  for (int i = 0; i < n; ++i) {
    const QueryExample& ex = examples[static_cast<size_t>(i)];
    MixedInput prompt;
    prompt.push_token(kBosId);
    prompt.push_tokens(ex.instruction);
    prompt.push_token(kSepId);
    for (const auto& doc : ex.documents) {
      CompressedDocument cd = compressor.compress_document(ex.query, doc.tokens, ngram);
      prompt.push_soft(cd.embeddings);
      prompt.push_token(kSepId);
    }
    prompt.push_tokens(ex.query);
    prompt.push_token(kSepId);
    std::vector<int> pred = lm.generate_greedy(prompt, max_new_tokens);
    if (contains_subsequence(pred, ex.answer_tokens)) ++correct;
  }
  return static_cast<double>(correct) / n;
}

TrainReport train_compressor(const std::vector<QueryExample>& train,
                             const std::vector<QueryExample>& dev, Compressor& compressor,
                             const TargetLM& lm, const TrainConfig& cfg,
                             const std::string& checkpoint_path) {
  if (train.empty()) throw std::invalid_argument("train_compressor: empty training set");
  if (!lm.frozen()) throw std::runtime_error("train_compressor: the target LM must be frozen");
  if (cfg.epochs < 1 || cfg.batch_size < 1)
    throw std::invalid_argument("train_compressor: epochs and batch_size must be positive");
  if (compressor.config().d_lm != lm.config().d_model)
    throw std::invalid_argument("train_compressor: compressor d_lm does not match the LM");

  const uint64_t lm_hash_before = lm.params_hash();
  const uint64_t mlp_hash_before = compressor.mlp_hash();

  AdamOptimizer opt(compressor.trainable_params(), cfg.learning_rate);
  Rng rng(cfg.seed);
  std::vector<const Document*> pool = build_distractor_pool(train);

  NamedParams named = compressor.named_params();
  std::vector<std::vector<double>> best_snapshot;
  TrainReport report;

  for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
    std::vector<int> order(train.size());
    for (size_t i = 0; i < order.size(); ++i) order[i] = static_cast<int>(i);
    rng.shuffle(order);

    double ce_sum = 0.0, kl_sum = 0.0;
    long count = 0;
    for (size_t pos = 0; pos < order.size(); pos += static_cast<size_t>(cfg.batch_size)) {
      const size_t end = std::min(order.size(), pos + static_cast<size_t>(cfg.batch_size));
      std::vector<int> indices(order.begin() + static_cast<long>(pos),
                               order.begin() + static_cast<long>(end));
      Batch batch = build_batch(train, indices, pool, cfg, rng);
      opt.zero_grad();
      for (const TrainInstance& inst : batch.instances) {
        Tape tape;
        LossBreakdown loss = compressor_loss(inst, compressor, lm, batch.ngram, cfg.kl_weight);
        Tensor scaled = scale(loss.total, 1.0 / static_cast<double>(batch.instances.size()));
        tape.backward(scaled);
        ce_sum += loss.ce;
        kl_sum += loss.kl;
        ++count;
      }
      opt.step();
    }

    if (lm.params_hash() != lm_hash_before)
      throw std::runtime_error("train_compressor: frozen LM parameters changed during epoch " +
                               std::to_string(epoch));
    if (compressor.mlp_hash() != mlp_hash_before)
      throw std::runtime_error(
          "train_compressor: frozen feed-forward parameters changed during epoch " +
          std::to_string(epoch));

    EpochStats stats;
    stats.mean_ce = ce_sum / static_cast<double>(count);
    stats.mean_kl = kl_sum / static_cast<double>(count);
    stats.dev_accuracy = fixed_n_accuracy(dev, compressor, lm, cfg.eval_ngram, cfg.max_new_tokens,
                                          cfg.eval_examples);
    report.epochs.push_back(stats);

    if (stats.dev_accuracy > report.best_dev_accuracy || report.best_epoch < 0) {
      report.best_dev_accuracy = stats.dev_accuracy;
      report.best_epoch = epoch;
      best_snapshot.clear();
      for (const auto& nt : named) best_snapshot.push_back(nt.tensor.data());
    }
    if (cfg.target_accuracy > 0.0 && stats.dev_accuracy >= cfg.target_accuracy) break;
  }

  if (!best_snapshot.empty())
    for (size_t i = 0; i < named.size(); ++i) named[i].tensor.impl()->data = best_snapshot[i];

  report.frozen_lm_ok = lm.params_hash() == lm_hash_before;
  report.frozen_mlp_ok = compressor.mlp_hash() == mlp_hash_before;
  if (!checkpoint_path.empty()) {
    compressor.save(checkpoint_path);
    report.checkpoint_path = checkpoint_path;
  }
  return report;
}

}  // namespace qgc
