#include "qgc/vocab.hpp"

#include <fstream>
#include <sstream>
#include <stdexcept>

namespace qgc {

namespace {
const char* kSpecials[kNumSpecials] = {"<pad>", "<bos>", "<eos>", "<sep>"};
}

Vocabulary Vocabulary::from_words(const std::vector<std::string>& words) {
  Vocabulary v;
  for (int i = 0; i < kNumSpecials; ++i) {
    v.words_.emplace_back(kSpecials[i]);
    v.index_.emplace(kSpecials[i], i);
  }
  for (const auto& w : words) {
    if (w.empty()) throw std::invalid_argument("vocabulary: empty word");
    if (v.index_.count(w)) throw std::invalid_argument("vocabulary: duplicate word '" + w + "'");
    v.index_.emplace(w, static_cast<int>(v.words_.size()));
    v.words_.push_back(w);
  }
  return v;
}

Vocabulary Vocabulary::load(const std::string& path) {
  std::ifstream is(path);
  if (!is) throw std::runtime_error("vocabulary: cannot open " + path);
  std::vector<std::string> words;
  std::string line;
  int lineno = 0;
  while (std::getline(is, line)) {
    ++lineno;
    if (line.empty()) throw std::runtime_error("vocabulary: empty line " + std::to_string(lineno) +
                                               " in " + path);
    words.push_back(line);
  }
  for (int i = 0; i < kNumSpecials; ++i)
    if (static_cast<int>(words.size()) <= i || words[static_cast<size_t>(i)] != kSpecials[i])
      throw std::runtime_error("vocabulary: " + path + " does not start with the special tokens");
  return from_words(std::vector<std::string>(words.begin() + kNumSpecials, words.end()));
}

void Vocabulary::save(const std::string& path) const {
  std::ofstream os(path, std::ios::trunc);
  if (!os) throw std::runtime_error("vocabulary: cannot write " + path);
  for (const auto& w : words_) os << w << '\n';
  if (!os) throw std::runtime_error("vocabulary: write failed for " + path);
}

int Vocabulary::id_of(const std::string& word) const {
  auto it = index_.find(word);
  if (it == index_.end()) throw std::runtime_error("vocabulary: unknown word '" + word + "'");
  return it->second;
}

const std::string& Vocabulary::word_of(int id) const {
  if (id < 0 || id >= size())
    throw std::runtime_error("vocabulary: id " + std::to_string(id) + " out of range [0, " +
                             std::to_string(size()) + ")");
  return words_[static_cast<size_t>(id)];
}

std::vector<int> Vocabulary::encode(const std::string& text) const {
  std::istringstream is(text);
  std::vector<int> ids;
  std::string tok;
  while (is >> tok) ids.push_back(id_of(tok));
  return ids;
}

std::string Vocabulary::decode(const std::vector<int>& ids) const {
  std::string out;
  for (size_t i = 0; i < ids.size(); ++i) {
    if (i) out += ' ';
    out += word_of(ids[i]);
  }
  return out;
}

}  // namespace qgc
