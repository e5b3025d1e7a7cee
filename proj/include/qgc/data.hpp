#pragma once

#include "qgc/vocab.hpp"

#include <cstdint>
#include <string>
#include <vector>

namespace qgc {

struct Document {
  std::string id;
  std::vector<int> tokens;
  bool is_gold = false;
  bool has_score = false;
  double score = 0.0;  // optional retrieval score, used by the file scorer
};

struct QueryExample {
  std::string id;
  std::vector<int> instruction;
  std::vector<int> query;
  std::vector<Document> documents;
  std::vector<std::string> answers;  // surface strings; single-token by construction
  std::vector<int> answer_tokens;    // ids of answers[0]
  std::vector<int> key_tokens;       // the answer-bearing sentence planted in the gold document

  int gold_index() const;  // throws unless exactly one document is gold
};

// ---------------------------------------------------------------------------
// Synthetic retrieval-QA generator. Each example asks for one attribute of
// one entity; the gold document contains the matching fact sentence among
// other facts and filler, distractor documents describe other entities, and
// every (entity, attribute, value) binding is drawn fresh per example so the
// answer is never predictable without the gold document.
// ---------------------------------------------------------------------------
struct GeneratorConfig {
  int num_examples = 1000;
  int docs_per_example = 5;
  int doc_len = 16;        // exact token count per document
  int facts_per_doc = 2;   // six-token fact sentences, query fact included
  int vocab_size = 2048;   // exact total vocabulary size, specials included
  int num_attrs = 32;
  int num_values = 256;    // closed answer set
  int num_fillers = 512;
  // gold entities of the last ceil(fraction · N) examples come from an
  // entity subpool never queried in the remaining examples
  double heldout_entity_fraction = 0.1;
  uint64_t seed = 0;
};

struct GeneratedCorpus {
  Vocabulary vocab;
  std::vector<QueryExample> examples;
};

GeneratedCorpus generate_corpus(const GeneratorConfig& config);

// JSONL round-trip. Records hold text (documents as {id, text, is_gold,
// score?}), so both directions need the vocabulary. Loaders validate the
// schema and report 1-based line numbers on error; exactly one gold document
// per example is enforced.
void save_jsonl(const std::string& path, const std::vector<QueryExample>& examples,
                const Vocabulary& vocab);
std::vector<QueryExample> load_jsonl(const std::string& path, const Vocabulary& vocab);

}  // namespace qgc
