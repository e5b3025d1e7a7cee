#include "qgc/data.hpp"

#include "qgc/tensor.hpp"

#include <nlohmann/json.hpp>

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <stdexcept>

namespace qgc {

using ordered_json = nlohmann::ordered_json;

int QueryExample::gold_index() const {
  int found = -1;
  for (size_t i = 0; i < documents.size(); ++i) {
    if (!documents[i].is_gold) continue;
    if (found >= 0) throw std::runtime_error("example " + id + ": more than one gold document");
    found = static_cast<int>(i);
  }
  if (found < 0) throw std::runtime_error("example " + id + ": no gold document");
  return found;
}

namespace {

constexpr int kFactLen = 6;  // "<attr> of <ent> is <val> ."

std::string padded(const char* stem, int i, int width) {
  char buf[32];
  std::snprintf(buf, sizeof(buf), "%s%0*d", stem, width, i);
  return buf;
}

// k distinct values from [0, n) via partial Fisher-Yates
std::vector<int> sample_distinct(int n, int k, Rng& rng) {
  std::vector<int> pool(static_cast<size_t>(n));
  for (int i = 0; i < n; ++i) pool[static_cast<size_t>(i)] = i;
  for (int j = 0; j < k; ++j) {
    int pick = rng.randint(j, n - 1);
    std::swap(pool[static_cast<size_t>(j)], pool[static_cast<size_t>(pick)]);
  }
  pool.resize(static_cast<size_t>(k));
  return pool;
}

struct Fact {
  int attr_id;
  int ent_id;
  int value_id;
};

struct WordIds {
  int what, is, of, qmark, period;
  std::vector<int> attrs, values, fillers, entities;
};

// facts woven in random order into exactly doc_len tokens with filler in the
// gaps; every fact sentence stays contiguous
std::vector<int> assemble_doc(std::vector<Fact> facts, int doc_len, const WordIds& w, Rng& rng) {
  rng.shuffle(facts);
  const int f = static_cast<int>(facts.size());
  const int filler_total = doc_len - kFactLen * f;
  std::vector<int> gap_sizes(static_cast<size_t>(f) + 1, 0);
  for (int i = 0; i < filler_total; ++i) ++gap_sizes[static_cast<size_t>(rng.randint(0, f))];

  std::vector<int> tokens;
  tokens.reserve(static_cast<size_t>(doc_len));
  auto emit_filler = [&](int count) {
    for (int i = 0; i < count; ++i)
      tokens.push_back(w.fillers[static_cast<size_t>(rng.randint(0, static_cast<int>(w.fillers.size()) - 1))]);
  };
  for (int g = 0; g < f; ++g) {
    emit_filler(gap_sizes[static_cast<size_t>(g)]);
    const Fact& fact = facts[static_cast<size_t>(g)];
    tokens.push_back(fact.attr_id);
    tokens.push_back(w.of);
    tokens.push_back(fact.ent_id);
    tokens.push_back(w.is);
    tokens.push_back(fact.value_id);
    tokens.push_back(w.period);
  }
  emit_filler(gap_sizes[static_cast<size_t>(f)]);
  return tokens;
}

std::vector<Fact> make_facts(int ent_id, int count, const WordIds& w, Rng& rng,
                             int forced_attr = -1, int forced_value = -1, int avoid_value = -1) {
  std::vector<int> attr_picks = sample_distinct(static_cast<int>(w.attrs.size()), count, rng);
  std::vector<Fact> facts(static_cast<size_t>(count));
  for (int i = 0; i < count; ++i) {
    facts[static_cast<size_t>(i)].ent_id = ent_id;
    facts[static_cast<size_t>(i)].attr_id = w.attrs[static_cast<size_t>(attr_picks[static_cast<size_t>(i)])];
    int v;
    do {
      v = w.values[static_cast<size_t>(rng.randint(0, static_cast<int>(w.values.size()) - 1))];
    } while (v == avoid_value);
    facts[static_cast<size_t>(i)].value_id = v;
  }
  if (forced_attr >= 0) {
    // keep attrs distinct within the document: swap any clash onto slot 0's pick
    for (size_t i = 1; i < facts.size(); ++i)
      if (facts[i].attr_id == forced_attr) facts[i].attr_id = facts[0].attr_id;
    facts[0].attr_id = forced_attr;
    facts[0].value_id = forced_value;
  }
  return facts;
}

}  // namespace

GeneratedCorpus generate_corpus(const GeneratorConfig& cfg) {
  if (cfg.num_examples <= 0) throw std::invalid_argument("generator: num_examples must be positive");
  if (cfg.docs_per_example <= 0) throw std::invalid_argument("generator: docs_per_example must be positive");
  if (cfg.facts_per_doc < 1) throw std::invalid_argument("generator: facts_per_doc must be at least 1");
  if (cfg.doc_len < kFactLen * cfg.facts_per_doc)
    throw std::invalid_argument("generator: doc_len " + std::to_string(cfg.doc_len) +
                                " cannot hold " + std::to_string(cfg.facts_per_doc) +
                                " six-token facts");
  if (cfg.num_attrs < cfg.facts_per_doc)
    throw std::invalid_argument("generator: need at least facts_per_doc distinct attributes");
  if (cfg.num_values < 2) throw std::invalid_argument("generator: need at least 2 values");
  if (cfg.heldout_entity_fraction < 0.0 || cfg.heldout_entity_fraction >= 1.0)
    throw std::invalid_argument("generator: heldout_entity_fraction must be in [0, 1)");

  const std::vector<std::string> template_words = {"answer", "the",  "question", "using",
                                                   "given",  "documents", "what", "is",
                                                   "of",     "?",    "."};
  const int num_entities = cfg.vocab_size - kNumSpecials - static_cast<int>(template_words.size()) -
                           cfg.num_attrs - cfg.num_values - cfg.num_fillers;
  if (num_entities < cfg.docs_per_example + 1)
    throw std::invalid_argument("generator: vocab_size " + std::to_string(cfg.vocab_size) +
                                " leaves only " + std::to_string(num_entities) +
                                " entity words; increase vocab_size or shrink the other pools");

  std::vector<std::string> words = template_words;
  for (int i = 0; i < cfg.num_attrs; ++i) words.push_back(padded("attr", i, 3));
  for (int i = 0; i < cfg.num_values; ++i) words.push_back(padded("val", i, 3));
  for (int i = 0; i < cfg.num_fillers; ++i) words.push_back(padded("filler", i, 3));
  for (int i = 0; i < num_entities; ++i) words.push_back(padded("ent", i, 4));

  GeneratedCorpus corpus;
  corpus.vocab = Vocabulary::from_words(words);
  const Vocabulary& vocab = corpus.vocab;

  WordIds w;
  w.what = vocab.id_of("what");
  w.is = vocab.id_of("is");
  w.of = vocab.id_of("of");
  w.qmark = vocab.id_of("?");
  w.period = vocab.id_of(".");
  for (int i = 0; i < cfg.num_attrs; ++i) w.attrs.push_back(vocab.id_of(padded("attr", i, 3)));
  for (int i = 0; i < cfg.num_values; ++i) w.values.push_back(vocab.id_of(padded("val", i, 3)));
  for (int i = 0; i < cfg.num_fillers; ++i) w.fillers.push_back(vocab.id_of(padded("filler", i, 3)));
  for (int i = 0; i < num_entities; ++i) w.entities.push_back(vocab.id_of(padded("ent", i, 4)));

  const std::vector<int> instruction = vocab.encode("answer the question using the given documents");

  // gold entities of the trailing examples come from a reserved subpool
  const int held_examples =
      static_cast<int>(std::ceil(cfg.heldout_entity_fraction * cfg.num_examples));
  int held_entities = 0;
  if (held_examples > 0) {
    held_entities = std::max(cfg.docs_per_example + 1,
                             static_cast<int>(std::llround(cfg.heldout_entity_fraction * num_entities)));
    if (held_entities >= num_entities - cfg.docs_per_example)
      throw std::invalid_argument("generator: not enough entities for a held-out subpool");
  }
  const int main_entities = num_entities - held_entities;

  Rng rng(cfg.seed);
  corpus.examples.reserve(static_cast<size_t>(cfg.num_examples));
  for (int e = 0; e < cfg.num_examples; ++e) {
    const bool held = held_examples > 0 && e >= cfg.num_examples - held_examples;
    const int gold_ent_pick =
        held ? main_entities + rng.randint(0, held_entities - 1) : rng.randint(0, main_entities - 1);
    const int gold_ent = w.entities[static_cast<size_t>(gold_ent_pick)];

    const int qattr = w.attrs[static_cast<size_t>(rng.randint(0, cfg.num_attrs - 1))];
    const int answer_value = w.values[static_cast<size_t>(rng.randint(0, cfg.num_values - 1))];

    QueryExample ex;
    ex.id = "ex" + std::to_string(e);
    ex.instruction = instruction;
    ex.query = {w.what, w.is, qattr, w.of, gold_ent, w.qmark};
    ex.answers = {vocab.word_of(answer_value)};
    ex.answer_tokens = {answer_value};
    ex.key_tokens = {qattr, w.of, gold_ent, w.is, answer_value, w.period};

    std::vector<Document> docs;
    Document gold;
    gold.is_gold = true;
    gold.tokens = assemble_doc(
        make_facts(gold_ent, cfg.facts_per_doc, w, rng, qattr, answer_value, answer_value),
        cfg.doc_len, w, rng);
    docs.push_back(std::move(gold));

    std::vector<int> used_entities = {gold_ent};
    for (int d = 1; d < cfg.docs_per_example; ++d) {
      int ent;
      bool fresh;
      do {
        ent = w.entities[static_cast<size_t>(rng.randint(0, num_entities - 1))];
        fresh = true;
        for (int u : used_entities)
          if (u == ent) fresh = false;
      } while (!fresh);
      used_entities.push_back(ent);
      Document doc;
      doc.tokens = assemble_doc(make_facts(ent, cfg.facts_per_doc, w, rng, -1, -1, answer_value),
                                cfg.doc_len, w, rng);
      docs.push_back(std::move(doc));
    }

    rng.shuffle(docs);
    for (size_t d = 0; d < docs.size(); ++d) docs[d].id = ex.id + "_d" + std::to_string(d);
    ex.documents = std::move(docs);
    corpus.examples.push_back(std::move(ex));
  }
  return corpus;
}

// ---------------------------------------------------------------------------
// JSONL
// ---------------------------------------------------------------------------

void save_jsonl(const std::string& path, const std::vector<QueryExample>& examples,
                const Vocabulary& vocab) {
  std::ofstream os(path, std::ios::trunc);
  if (!os) throw std::runtime_error("jsonl: cannot write " + path);
  for (const auto& ex : examples) {
    ordered_json j;
    j["id"] = ex.id;
    j["query"] = vocab.decode(ex.query);
    j["instruction"] = vocab.decode(ex.instruction);
    j["answers"] = ex.answers;
    j["key"] = ex.key_tokens.empty() ? std::string() : vocab.decode(ex.key_tokens);
    ordered_json docs = ordered_json::array();
    for (const auto& d : ex.documents) {
      ordered_json dj;
      dj["id"] = d.id;
      dj["text"] = vocab.decode(d.tokens);
      dj["is_gold"] = d.is_gold;
      if (d.has_score) dj["score"] = d.score;
      docs.push_back(std::move(dj));
    }
    j["documents"] = std::move(docs);
    os << j.dump() << '\n';
  }
  if (!os) throw std::runtime_error("jsonl: write failed for " + path);
}

namespace {

[[noreturn]] void schema_error(const std::string& path, int line, const std::string& what) {
  throw std::runtime_error(path + ": line " + std::to_string(line) + ": " + what);
}

template <typename T>
T field_of(const ordered_json& j, const char* key, const std::string& path, int line) {
  if (!j.contains(key)) schema_error(path, line, std::string("missing field '") + key + "'");
  try {
    return j.at(key).get<T>();
  } catch (const nlohmann::json::exception&) {
    schema_error(path, line, std::string("field '") + key + "' has the wrong type");
  }
}

}  // namespace

std::vector<QueryExample> load_jsonl(const std::string& path) {
  std::ifstream is(path);
  if (!is) throw std::runtime_error("jsonl: cannot open " + path);
  std::vector<QueryExample> out;
  std::string line;
  int lineno = 0;
  while (std::getline(is, line)) {
    ++lineno;
    if (line.empty()) continue;
    ordered_json j = ordered_json::parse(line, nullptr, false);
    if (j.is_discarded()) schema_error(path, lineno, "invalid JSON");
    QueryExample ex;
    ex.id = field_of<std::string>(j, "id", path, lineno);
    ex.instruction = field_of<std::vector<int>>(j, "instruction", path, lineno);
    ex.query = field_of<std::vector<int>>(j, "query", path, lineno);
    ex.answers = field_of<std::vector<std::string>>(j, "answers", path, lineno);
    ex.answer_tokens = field_of<std::vector<int>>(j, "answer_tokens", path, lineno);
    if (j.contains("key_tokens"))
      ex.key_tokens = field_of<std::vector<int>>(j, "key_tokens", path, lineno);
    if (ex.query.empty()) schema_error(path, lineno, "empty query");
    if (ex.answers.empty()) schema_error(path, lineno, "empty answers");
    if (!j.contains("documents") || !j["documents"].is_array() || j["documents"].empty())
      schema_error(path, lineno, "missing or empty field 'documents'");
    int gold_count = 0;
    for (const auto& dj : j["documents"]) {
      Document d;
      d.id = field_of<std::string>(dj, "id", path, lineno);
      d.tokens = field_of<std::vector<int>>(dj, "tokens", path, lineno);
      d.is_gold = field_of<bool>(dj, "gold", path, lineno);
      if (d.tokens.empty()) schema_error(path, lineno, "document " + d.id + " has no tokens");
      if (dj.contains("score")) {
        d.has_score = true;
        d.score = field_of<double>(dj, "score", path, lineno);
      }
      gold_count += d.is_gold ? 1 : 0;
      ex.documents.push_back(std::move(d));
    }
    if (gold_count != 1)
      schema_error(path, lineno,
                   "expected exactly one gold document, found " + std::to_string(gold_count));
    out.push_back(std::move(ex));
  }
  return out;
}

}  // namespace qgc
