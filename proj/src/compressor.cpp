#include "qgc/compressor.hpp"

#include <nlohmann/json.hpp>

#include <cmath>
#include <fstream>
#include <stdexcept>

namespace qgc {

using ordered_json = nlohmann::ordered_json;

Compressor::Compressor(const CompressorConfig& cfg, Rng& rng) : cfg_(cfg) {
  if (cfg.vocab_size <= kNumSpecials)
    throw std::invalid_argument("compressor: vocab_size must exceed the special tokens");
  if (cfg.d_c <= 0 || cfg.heads <= 0 || cfg.d_c % cfg.heads != 0)
    throw std::invalid_argument("compressor: d_c must be a positive multiple of heads");
  if (cfg.enc_layers < 1 || cfg.rev_layers < 1)
    throw std::invalid_argument("compressor: need at least one encoder and one reviewing layer");
  if (cfg.n_default < 1) throw std::invalid_argument("compressor: n_default must be at least 1");
  tok_emb_ = Tensor::randn({cfg.vocab_size, cfg.d_c}, rng, 0.02, true);
  pos_enc_ = Tensor::randn({cfg.context_limit, cfg.d_c}, rng, 0.01, true);
  pos_rev_ = Tensor::randn({cfg.context_limit, cfg.d_c}, rng, 0.01, true);
  enc_.reserve(static_cast<size_t>(cfg.enc_layers));
  for (int i = 0; i < cfg.enc_layers; ++i)
    enc_.push_back(EncoderLayerParams::create(cfg.d_c, cfg.heads, cfg.ff_hidden, rng,
                                              /*ff_requires_grad=*/false));
  rev_.reserve(static_cast<size_t>(cfg.rev_layers));
  for (int i = 0; i < cfg.rev_layers; ++i)
    rev_.push_back(EncoderLayerParams::create(cfg.d_c, cfg.heads, cfg.ff_hidden, rng,
                                              /*ff_requires_grad=*/false));
  align_w_ = Tensor::randn({cfg.d_c, cfg.d_lm}, rng, 0.02, true);
  align_b_ = Tensor::zeros({1, cfg.d_lm}, true);
}

Compressor Compressor::init_from_lm(CompressorConfig cfg, const TargetLM& lm, Rng& rng) {
  cfg.vocab_size = lm.config().vocab_size;
  cfg.d_lm = lm.config().d_model;
  if (cfg.d_c != cfg.d_lm)
    throw std::invalid_argument("compressor: init_from_lm requires d_c == d_lm, got " +
                                std::to_string(cfg.d_c) + " vs " + std::to_string(cfg.d_lm));
  Compressor comp(cfg, rng);
  for (const auto& nt : lm.named_params()) {
    if (nt.name != "lm.tok_emb") continue;
    comp.tok_emb_.impl()->data = nt.tensor.data();
    return comp;
  }
  throw std::runtime_error("compressor: target LM exposes no token embedding");
}

Tensor Compressor::run_encoder(const std::vector<int>& ids) const {
  const int len = static_cast<int>(ids.size());
  if (len > cfg_.context_limit)
    throw std::invalid_argument("compressor: encoder input length " + std::to_string(len) +
                                " exceeds context_limit " + std::to_string(cfg_.context_limit));
  Tensor x = add(embedding(tok_emb_, ids), slice_rows(pos_enc_, 0, len));
  Tensor bias = attention_bias_full(len);
  for (const auto& layer : enc_) x = transformer_encoder_layer(x, layer, bias);
  return x;
}

EncodedContext Compressor::encode_context(const std::vector<int>& query_ids,
                                          const std::vector<int>& doc_ids) const {
  if (query_ids.empty() || doc_ids.empty())
    throw std::invalid_argument("compressor: query and document must be non-empty");
  EncodedContext out;
  if (cfg_.joint_encoding) {
    std::vector<int> ids = query_ids;
    ids.push_back(kSepId);
    ids.insert(ids.end(), doc_ids.begin(), doc_ids.end());
    Tensor h = run_encoder(ids);
    out.query = slice_rows(h, 0, static_cast<int>(query_ids.size()));
    out.document = slice_rows(h, static_cast<int>(query_ids.size()) + 1,
                              static_cast<int>(doc_ids.size()));
  } else {
    out.query = run_encoder(query_ids);
    out.document = run_encoder(doc_ids);
  }
  return out;
}

PooledDocument Compressor::pool_ngrams(const Tensor& h_q, const Tensor& h_d, int n) const {
  if (n < 1) throw std::invalid_argument("compressor: n-gram size must be at least 1");
  const int n_d = h_d.rows();
  const int groups = (n_d + n - 1) / n;

  Tensor query_mean = mean_rows(h_q);              // [1 × d]
  Tensor scores = matmul_nt(query_mean, h_d);      // [1 × N_d], unscaled dot products

  PooledDocument out;
  out.n = n;
  out.weights.reserve(static_cast<size_t>(n_d));
  std::vector<Tensor> pooled;
  pooled.reserve(static_cast<size_t>(groups));
  for (int g = 0; g < groups; ++g) {
    const int start = g * n;
    const int len = std::min(n, n_d - start);
    Tensor w;
    if (cfg_.weighted_pooling) {
      w = softmax_rows(slice_cols(scores, start, len));
    } else {
      w = Tensor::full({1, len}, 1.0 / len);
    }
    pooled.push_back(matmul(w, slice_rows(h_d, start, len)));
    for (int j = 0; j < len; ++j) out.weights.push_back(w.data()[static_cast<size_t>(j)]);
  }
  out.pooled = pooled.size() == 1 ? pooled[0] : concat_rows(pooled);
  return out;
}

Tensor Compressor::review(const Tensor& h_q, const Tensor& h_d, const Tensor& pooled) const {
  if (!cfg_.reviewing) return pooled;
  const int n_q = h_q.rows(), n_d = h_d.rows(), n_g = pooled.rows();
  const int len = n_q + n_d + n_g;
  if (len > cfg_.context_limit)
    throw std::invalid_argument("compressor: reviewing input length " + std::to_string(len) +
                                " exceeds context_limit " + std::to_string(cfg_.context_limit));
  Tensor z = concat_rows({h_q, h_d, pooled});
  z = add(z, slice_rows(pos_rev_, 0, len));
  Tensor bias = attention_bias_full(len);
  for (const auto& layer : rev_) z = transformer_encoder_layer(z, layer, bias);
  return slice_rows(z, n_q + n_d, n_g);
}

Tensor Compressor::align(const Tensor& reviewed) const {
  return add_row(matmul(reviewed, align_w_), align_b_);
}

CompressedDocument Compressor::compress_document(const std::vector<int>& query_ids,
                                                 const std::vector<int>& doc_ids, int n) const {
  EncodedContext ctx = encode_context(query_ids, doc_ids);
  PooledDocument pooled = pool_ngrams(ctx.query, ctx.document, n);
  Tensor reviewed = review(ctx.query, ctx.document, pooled.pooled);
  CompressedDocument out;
  out.embeddings = align(reviewed);
  out.n_gram_size = n;
  out.source_len = static_cast<int>(doc_ids.size());
  out.weights = std::move(pooled.weights);
  return out;
}

NamedParams Compressor::named_params() const {
  NamedParams out;
  out.push_back({"comp.tok_emb", tok_emb_});
  out.push_back({"comp.pos_enc", pos_enc_});
  out.push_back({"comp.pos_rev", pos_rev_});
  for (size_t i = 0; i < enc_.size(); ++i) collect(out, "comp.enc" + std::to_string(i), enc_[i]);
  for (size_t i = 0; i < rev_.size(); ++i) collect(out, "comp.rev" + std::to_string(i), rev_[i]);
  out.push_back({"comp.align.w", align_w_});
  out.push_back({"comp.align.b", align_b_});
  return out;
}

std::vector<Tensor> Compressor::trainable_params() const { return trainable_of(named_params()); }

uint64_t Compressor::params_hash() const { return qgc::params_hash(named_params()); }

uint64_t Compressor::mlp_hash() const {
  NamedParams ff;
  for (const auto& nt : named_params())
    if (nt.name.find(".ff.") != std::string::npos) ff.push_back(nt);
  return qgc::params_hash(ff);
}

void Compressor::save(const std::string& path) const {
  save_checkpoint(path, named_params());
  ordered_json j;
  j["kind"] = "compressor";
  j["vocab_size"] = cfg_.vocab_size;
  j["d_c"] = cfg_.d_c;
  j["d_lm"] = cfg_.d_lm;
  j["heads"] = cfg_.heads;
  j["enc_layers"] = cfg_.enc_layers;
  j["rev_layers"] = cfg_.rev_layers;
  j["ff_hidden"] = cfg_.ff_hidden;
  j["context_limit"] = cfg_.context_limit;
  j["n_default"] = cfg_.n_default;
  j["joint_encoding"] = cfg_.joint_encoding;
  j["weighted_pooling"] = cfg_.weighted_pooling;
  j["reviewing"] = cfg_.reviewing;
  j["frozen_mlp"] = true;
  std::ofstream os(path + ".json", std::ios::trunc);
  if (!os) throw std::runtime_error("compressor: cannot write sidecar " + path + ".json");
  os << j.dump(2) << '\n';
}

Compressor Compressor::load(const std::string& path) {
  std::ifstream is(path + ".json");
  if (!is)
    throw std::runtime_error("compressor: cannot open " + path +
                             ".json; produce the model with the train-compressor command");
  ordered_json j = ordered_json::parse(is, nullptr, false);
  if (j.is_discarded() || j.value("kind", "") != std::string("compressor"))
    throw std::runtime_error("compressor: " + path + ".json is not a compressor sidecar");
  CompressorConfig cfg;
  cfg.vocab_size = j.at("vocab_size").get<int>();
  cfg.d_c = j.at("d_c").get<int>();
  cfg.d_lm = j.at("d_lm").get<int>();
  cfg.heads = j.at("heads").get<int>();
  cfg.enc_layers = j.at("enc_layers").get<int>();
  cfg.rev_layers = j.at("rev_layers").get<int>();
  cfg.ff_hidden = j.at("ff_hidden").get<int>();
  cfg.context_limit = j.at("context_limit").get<int>();
  cfg.n_default = j.at("n_default").get<int>();
  cfg.joint_encoding = j.at("joint_encoding").get<bool>();
  cfg.weighted_pooling = j.at("weighted_pooling").get<bool>();
  cfg.reviewing = j.at("reviewing").get<bool>();
  Rng rng(0);
  Compressor comp(cfg, rng);
  load_checkpoint_into(path, comp.named_params());
  return comp;
}

}  // namespace qgc
