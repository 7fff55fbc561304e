#pragma once

#include <algorithm>
#include <fstream>
#include <stdexcept>
#include <string>
#include <unordered_map>
#include <vector>

#include "qcs/tokenize.hpp"

namespace qcs {

// Frequency-ranked token table with four reserved entries. Content tokens are
// ordered by descending corpus frequency, ties broken lexicographically, so a
// vocabulary is a pure function of the token multiset.
class Vocabulary {
 public:
  static constexpr int kPad = 0;
  static constexpr int kUnk = 1;
  static constexpr int kBos = 2;
  static constexpr int kEos = 3;
  static constexpr int kNumSpecials = 4;

  Vocabulary() : tokens_{"<pad>", "<unk>", "<bos>", "<eos>"} { reindex(); }

  static Vocabulary build(const std::vector<TokenStream>& streams, std::size_t max_size) {
    if (max_size < 1) throw std::invalid_argument("Vocabulary::build: max_size must be >= 1");
    std::unordered_map<std::string, std::size_t> freq;
    std::size_t total = 0;
    for (const auto& s : streams) {
      for (const auto& t : s.tokens) {
        ++freq[t];
        ++total;
      }
    }
    if (total == 0) throw std::invalid_argument("Vocabulary::build: streams contain no tokens");

    std::vector<std::pair<std::string, std::size_t>> ranked(freq.begin(), freq.end());
    std::sort(ranked.begin(), ranked.end(), [](const auto& a, const auto& b) {
      if (a.second != b.second) return a.second > b.second;
      return a.first < b.first;
    });
    if (ranked.size() > max_size) ranked.resize(max_size);

    Vocabulary v;
    for (auto& [tok, f] : ranked) v.tokens_.push_back(tok);
    v.reindex();
    return v;
  }

  int lookup(const std::string& token) const {
    auto it = index_.find(token);
    return it == index_.end() ? kUnk : it->second;
  }

  bool contains(const std::string& token) const { return index_.count(token) > 0; }

  const std::string& token(int idx) const {
    if (idx < 0 || static_cast<std::size_t>(idx) >= tokens_.size())
      throw std::out_of_range("Vocabulary::token: index out of range");
    return tokens_[static_cast<std::size_t>(idx)];
  }

  static bool is_special(int idx) { return idx >= 0 && idx < kNumSpecials; }

  std::size_t size() const { return tokens_.size(); }

  void save(const std::string& path) const {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw std::runtime_error("Vocabulary::save: cannot open " + path);
    for (const auto& t : tokens_) out << t << '\n';
  }

  static Vocabulary load(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw std::runtime_error("Vocabulary::load: cannot open " + path);
    Vocabulary v;
    v.tokens_.clear();
    std::string line;
    while (std::getline(in, line)) v.tokens_.push_back(line);
    if (v.tokens_.size() < kNumSpecials || v.tokens_[0] != "<pad>" || v.tokens_[1] != "<unk>" ||
        v.tokens_[2] != "<bos>" || v.tokens_[3] != "<eos>")
      throw std::runtime_error("Vocabulary::load: " + path + " lacks the reserved header tokens");
    v.reindex();
    return v;
  }

 private:
  void reindex() {
    index_.clear();
    for (std::size_t i = 0; i < tokens_.size(); ++i) index_[tokens_[i]] = static_cast<int>(i);
  }

  std::vector<std::string> tokens_;
  std::unordered_map<std::string, int> index_;
};

// Maps a token stream to vocabulary indices. Out-of-vocabulary tokens become
// UNK. With add_bos_eos the sequence is framed as [BOS ... EOS] and truncation
// keeps EOS as the final index.
inline std::vector<int> encode_tokens(const TokenStream& ts, const Vocabulary& v,
                                      bool add_bos_eos, std::size_t max_len) {
  if (ts.empty()) throw std::invalid_argument("encode_tokens: empty token stream");
  if (add_bos_eos && max_len < 2)
    throw std::invalid_argument("encode_tokens: max_len must be >= 2 with BOS/EOS framing");
  if (max_len < 1) throw std::invalid_argument("encode_tokens: max_len must be >= 1");

  std::vector<int> ids;
  ids.reserve(ts.size() + 2);
  if (add_bos_eos) ids.push_back(Vocabulary::kBos);
  for (const auto& t : ts.tokens) ids.push_back(v.lookup(t));
  if (add_bos_eos) ids.push_back(Vocabulary::kEos);

  if (ids.size() > max_len) {
    ids.resize(max_len);
    if (add_bos_eos) ids.back() = Vocabulary::kEos;
  }
  return ids;
}

// Inverse of encode_tokens modulo framing: PAD/BOS/EOS are dropped always,
// UNK optionally.
inline std::vector<std::string> decode_tokens(const std::vector<int>& ids, const Vocabulary& v,
                                              bool drop_unk = true) {
  std::vector<std::string> out;
  out.reserve(ids.size());
  for (int id : ids) {
    if (id == Vocabulary::kPad || id == Vocabulary::kBos || id == Vocabulary::kEos) continue;
    if (drop_unk && id == Vocabulary::kUnk) continue;
    out.push_back(v.token(id));
  }
  return out;
}

}  // namespace qcs
