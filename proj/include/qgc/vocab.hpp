#pragma once

#include <string>
#include <unordered_map>
#include <vector>

namespace qgc {

// special token ids, pinned at the front of every vocabulary
constexpr int kPadId = 0;
constexpr int kBosId = 1;
constexpr int kEosId = 2;
constexpr int kSepId = 3;
constexpr int kNumSpecials = 4;

class Vocabulary {
 public:
  Vocabulary() = default;

  // prepends the four specials; rejects duplicates and special collisions
  static Vocabulary from_words(const std::vector<std::string>& words);
  static Vocabulary load(const std::string& path);
  void save(const std::string& path) const;

  int size() const { return static_cast<int>(words_.size()); }
  bool contains(const std::string& word) const { return index_.count(word) > 0; }
  int id_of(const std::string& word) const;     // throws on unknown words
  const std::string& word_of(int id) const;     // throws on out-of-range ids

  // whitespace tokenization; every token must be in-vocabulary
  std::vector<int> encode(const std::string& text) const;
  std::string decode(const std::vector<int>& ids) const;

 private:
  std::vector<std::string> words_;
  std::unordered_map<std::string, int> index_;
};

}  // namespace qgc
