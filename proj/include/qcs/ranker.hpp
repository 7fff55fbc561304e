#pragma once

#include <algorithm>
#include <cstring>
#include <fstream>
#include <map>
#include <optional>
#include <stdexcept>
#include <string>
#include <unordered_map>
#include <unordered_set>
#include <vector>

#include "qcs/corpus.hpp"
#include "qcs/encoder.hpp"
#include "qcs/metrics.hpp"
#include "qcs/qse.hpp"
#include "qcs/rl.hpp"

namespace qcs {

enum class RankMode { base_only, enriched_only, hybrid, qe_baseline, no_rl };

inline std::string to_string(RankMode m) {
  switch (m) {
    case RankMode::base_only: return "base_only";
    case RankMode::enriched_only: return "enriched_only";
    case RankMode::hybrid: return "hybrid";
    case RankMode::qe_baseline: return "qe_baseline";
    case RankMode::no_rl: return "no_rl";
  }
  return "hybrid";
}
inline RankMode rank_mode_from_string(const std::string& s) {
  if (s == "base_only") return RankMode::base_only;
  if (s == "enriched_only") return RankMode::enriched_only;
  if (s == "hybrid") return RankMode::hybrid;
  if (s == "qe_baseline") return RankMode::qe_baseline;
  if (s == "no_rl") return RankMode::no_rl;
  throw std::invalid_argument("unknown ranking mode: " + s);
}

struct HybridConfig {
  double beta = 0.6;
  RankMode mode = RankMode::hybrid;

  void validate() const {
    if (beta < 0 || beta > 1) throw std::invalid_argument("HybridConfig: beta must be in [0,1]");
  }
};

inline void to_json(nlohmann::json& j, const HybridConfig& c) {
  j = nlohmann::json{{"beta", c.beta}, {"mode", to_string(c.mode)}};
}
inline void from_json(const nlohmann::json& j, HybridConfig& c) {
  c.beta = j.value("beta", 0.6);
  c.mode = rank_mode_from_string(j.value("mode", "hybrid"));
}

// score(q,c) = beta * sim(q',c) + (1-beta) * sim(q,c).
inline double hybrid_score(double sim_enriched, double sim_original, double beta) {
  if (beta < 0 || beta > 1) throw std::invalid_argument("hybrid_score: beta must be in [0,1]");
  if (beta == 0.0) return sim_original;
  if (beta == 1.0) return sim_enriched;
  return beta * sim_enriched + (1.0 - beta) * sim_original;
}

// Frozen code-embedding index.
class SearchIndex {
 public:
  struct Entry {
    std::string id;
    nn::Vec vec;
    std::string raw;
  };

  static constexpr std::uint32_t kVersion = 1;

  std::vector<Entry> entries;
  std::uint64_t fingerprint = 0;
  int dim = 0;

  void save(const std::string& path) const {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw std::runtime_error("SearchIndex::save: cannot open " + path);
    auto put = [&out](const void* p, std::size_t n) {
      out.write(static_cast<const char*>(p), static_cast<std::streamsize>(n));
    };
    const char magic[4] = {'Q', 'C', 'S', 'X'};
    put(magic, 4);
    std::uint32_t ver = kVersion;
    put(&ver, 4);
    put(&fingerprint, 8);
    std::uint32_t d = static_cast<std::uint32_t>(dim);
    put(&d, 4);
    std::uint64_t count = entries.size();
    put(&count, 8);
    for (const auto& e : entries) {
      std::uint64_t n = e.id.size();
      put(&n, 8);
      put(e.id.data(), e.id.size());
      n = e.raw.size();
      put(&n, 8);
      put(e.raw.data(), e.raw.size());
      put(e.vec.data(), sizeof(double) * static_cast<std::size_t>(e.vec.size()));
    }
  }

  static SearchIndex load(const std::string& path) {
    std::vector<char> buf = nn::read_file(path);
    std::size_t at = 0;
    auto need = [&](std::size_t n) {
      if (at + n > buf.size()) throw std::runtime_error("SearchIndex::load: truncated " + path);
    };
    need(4);
    if (std::memcmp(buf.data(), "QCSX", 4) != 0)
      throw std::runtime_error("SearchIndex::load: bad magic in " + path);
    at = 4;
    auto get_u32 = [&]() {
      need(4);
      std::uint32_t v;
      std::memcpy(&v, buf.data() + at, 4);
      at += 4;
      return v;
    };
    auto get_u64 = [&]() {
      need(8);
      std::uint64_t v;
      std::memcpy(&v, buf.data() + at, 8);
      at += 8;
      return v;
    };
    SearchIndex idx;
    std::uint32_t ver = get_u32();
    if (ver != kVersion)
      throw std::runtime_error("SearchIndex::load: format version mismatch in " + path);
    idx.fingerprint = get_u64();
    idx.dim = static_cast<int>(get_u32());
    std::uint64_t count = get_u64();
    idx.entries.reserve(count);
    for (std::uint64_t i = 0; i < count; ++i) {
      Entry e;
      std::uint64_t n = get_u64();
      need(n);
      e.id.assign(buf.data() + at, n);
      at += n;
      n = get_u64();
      need(n);
      e.raw.assign(buf.data() + at, n);
      at += n;
      e.vec.resize(idx.dim);
      std::size_t bytes = sizeof(double) * static_cast<std::size_t>(idx.dim);
      need(bytes);
      std::memcpy(e.vec.data(), buf.data() + at, bytes);
      at += bytes;
      idx.entries.push_back(std::move(e));
    }
    return idx;
  }
};

struct IndexSnippet {
  std::string id;
  std::vector<int> code_ids;
  std::string raw;
};

inline SearchIndex build_index(const EncoderModel& cs, const std::vector<IndexSnippet>& snippets) {
  if (snippets.empty()) throw std::invalid_argument("build_index: empty snippet list");
  SearchIndex idx;
  idx.dim = cs.config().embed_dim;
  idx.fingerprint = cs.fingerprint();
  std::unordered_set<std::string> seen;
  for (const auto& s : snippets) {
    if (!seen.insert(s.id).second) throw std::invalid_argument("build_index: duplicate id " + s.id);
    idx.entries.push_back({s.id, cs.embed_vec(TowerKind::code, s.code_ids), s.raw});
  }
  return idx;
}

// Token -> synonyms map for the query-expansion baseline.
class SynonymLexicon {
 public:
  SynonymLexicon() = default;

  explicit SynonymLexicon(std::map<std::string, std::vector<std::string>> entries) {
    for (auto& [token, syns] : entries) {
      std::vector<std::string> cleaned;
      std::unordered_set<std::string> seen;
      for (auto& s : syns) {
        if (s == token) continue;  // no token maps to itself
        if (seen.insert(s).second) cleaned.push_back(s);
      }
      if (!cleaned.empty()) entries_[token] = std::move(cleaned);
    }
  }

  static SynonymLexicon load(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw std::runtime_error("SynonymLexicon::load: cannot open " + path);
    nlohmann::json j = nlohmann::json::parse(in);
    std::map<std::string, std::vector<std::string>> entries;
    for (auto& [k, v] : j.items()) entries[k] = v.get<std::vector<std::string>>();
    return SynonymLexicon(std::move(entries));
  }

  const std::vector<std::string>* find(const std::string& token) const {
    auto it = entries_.find(token);
    return it == entries_.end() ? nullptr : &it->second;
  }

  std::size_t size() const { return entries_.size(); }

 private:
  std::map<std::string, std::vector<std::string>> entries_;
};

// Original tokens kept in their original order, each followed by its
// synonyms; anything already present in the expansion is skipped.
inline TokenStream qe_expand(const TokenStream& query, const SynonymLexicon& lex) {
  TokenStream out;
  out.source = query.source;
  std::unordered_set<std::string> seen;
  for (const auto& tok : query.tokens) {
    if (seen.insert(tok).second) out.tokens.push_back(tok);
    if (const auto* syns = lex.find(tok)) {
      for (const auto& s : *syns) {
        if (seen.insert(s).second) out.tokens.push_back(s);
      }
    }
  }
  return out;
}

struct EvalPool {
  std::string query_id;
  std::string positive_id;
  std::vector<std::string> negatives;
  std::uint64_t seed = 0;
  bool fallback = false;  // pool smaller than 999 because the corpus is small
};

inline void to_json(nlohmann::json& j, const EvalPool& p) {
  j = nlohmann::json{{"query_id", p.query_id}, {"positive_id", p.positive_id},
                     {"negatives", p.negatives}, {"seed", p.seed}, {"fallback", p.fallback}};
}
inline void from_json(const nlohmann::json& j, EvalPool& p) {
  p.query_id = j.at("query_id").get<std::string>();
  p.positive_id = j.at("positive_id").get<std::string>();
  p.negatives = j.at("negatives").get<std::vector<std::string>>();
  p.seed = j.value("seed", std::uint64_t{0});
  p.fallback = j.value("fallback", false);
}

inline constexpr std::size_t kEvalPoolNegatives = 999;

// Per test triple, 999 distinct negatives sampled without replacement. On a
// corpus smaller than 1000 snippets the pool shrinks to |corpus|-1 and is
// flagged.
inline std::vector<EvalPool> build_eval_pools(const std::vector<Triple>& test_triples,
                                              const std::vector<std::string>& corpus_ids,
                                              std::uint64_t seed) {
  if (corpus_ids.size() < 2)
    throw std::invalid_argument("build_eval_pools: corpus must have at least 2 snippets");
  Rng rng(derive_seed(seed, "eval-pools"));
  std::vector<EvalPool> pools;
  pools.reserve(test_triples.size());
  for (const auto& t : test_triples) {
    std::vector<std::string> others;
    others.reserve(corpus_ids.size());
    for (const auto& id : corpus_ids)
      if (id != t.id) others.push_back(id);
    std::size_t want = std::min(kEvalPoolNegatives, others.size());
    EvalPool pool;
    pool.query_id = t.id;
    pool.positive_id = t.id;
    pool.seed = seed;
    pool.fallback = want < kEvalPoolNegatives;
    std::vector<std::size_t> picks = rng.sample_indices(others.size(), want);
    pool.negatives.reserve(want);
    for (std::size_t p : picks) pool.negatives.push_back(others[p]);
    pools.push_back(std::move(pool));
  }
  return pools;
}

inline void save_pools(const std::vector<EvalPool>& pools, const std::string& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("save_pools: cannot open " + path);
  for (const auto& p : pools) {
    nlohmann::json j = p;
    out << j.dump() << '\n';
  }
}

inline std::vector<EvalPool> load_pools(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("load_pools: cannot open " + path);
  std::vector<EvalPool> pools;
  std::string line;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    pools.push_back(nlohmann::json::parse(line).get<EvalPool>());
  }
  return pools;
}

struct CorpusLimits {
  std::size_t max_code_len = 200;
  std::size_t max_desc_len = 60;
  std::size_t max_query_len = 30;
  std::size_t vocab_size = 10000;
};

inline void to_json(nlohmann::json& j, const CorpusLimits& c) {
  j = nlohmann::json{{"max_code_len", c.max_code_len},
                     {"max_desc_len", c.max_desc_len},
                     {"max_query_len", c.max_query_len},
                     {"vocab_size", c.vocab_size}};
}
inline void from_json(const nlohmann::json& j, CorpusLimits& c) {
  c.max_code_len = j.value("max_code_len", std::size_t{200});
  c.max_desc_len = j.value("max_desc_len", std::size_t{60});
  c.max_query_len = j.value("max_query_len", std::size_t{30});
  c.vocab_size = j.value("vocab_size", std::size_t{10000});
}

namespace detail {

// Text-tower embedding of a token stream under the text (description)
// vocabulary. UNK carries no retrieval signal, so out-of-vocabulary tokens
// are dropped at ranking time, same as in the enriched-query path; a stream
// with nothing left embeds as the zero vector.
inline nn::Vec embed_text(const EncoderModel& cs, const TokenStream& ts, std::size_t max_len) {
  if (ts.empty()) return nn::Vec::Zero(cs.config().embed_dim);
  std::vector<int> ids = encode_tokens(ts, cs.text_vocab(), false, max_len);
  std::erase(ids, Vocabulary::kUnk);
  if (ids.empty()) return nn::Vec::Zero(cs.config().embed_dim);
  return cs.embed_vec(TowerKind::text, ids);
}

// Greedy enrichment of a query: decode with the enricher, drop specials and
// UNK, embed with the text tower.
inline nn::Vec embed_enriched(const EncoderModel& cs, const QseModel& qse, const TokenStream& query,
                              const CorpusLimits& limits) {
  std::vector<int> q_ids = encode_tokens(query, qse.query_vocab(), true, limits.max_query_len);
  GenerationResult gen = greedy_decode(qse, q_ids);
  std::vector<int> kept;
  for (int id : gen.tokens) {
    if (id == Vocabulary::kPad || id == Vocabulary::kBos || id == Vocabulary::kEos ||
        id == Vocabulary::kUnk)
      continue;
    kept.push_back(id);
  }
  if (kept.empty()) return nn::Vec::Zero(cs.config().embed_dim);
  if (kept.size() > limits.max_desc_len) kept.resize(limits.max_desc_len);
  return cs.embed_vec(TowerKind::text, kept);
}

}  // namespace detail

// Scores every index entry for a query under the configured mode and returns
// the top_k (id, score) pairs, descending score, ties broken by ascending id.
inline std::vector<std::pair<std::string, double>> search(
    const SearchIndex& index, const EncoderModel& cs, const QseModel* qse,
    const TokenStream& query, const HybridConfig& cfg, std::size_t top_k,
    const SynonymLexicon* lexicon = nullptr, const CorpusLimits& limits = {}) {
  cfg.validate();
  if (query.empty()) throw std::invalid_argument("search: empty query");
  if (index.entries.empty()) throw std::invalid_argument("search: empty index");
  const bool needs_enricher = cfg.mode == RankMode::hybrid || cfg.mode == RankMode::no_rl ||
                              cfg.mode == RankMode::enriched_only;
  if (needs_enricher && qse == nullptr)
    throw std::invalid_argument("search: mode " + to_string(cfg.mode) +
                                " requires an enricher model");
  if (cfg.mode == RankMode::qe_baseline && lexicon == nullptr)
    throw std::invalid_argument("search: qe_baseline requires a synonym lexicon");

  nn::Vec base_vec;
  if (cfg.mode == RankMode::qe_baseline)
    base_vec = detail::embed_text(cs, qe_expand(query, *lexicon), limits.max_desc_len);
  else
    base_vec = detail::embed_text(cs, query, limits.max_query_len);

  nn::Vec enr_vec;
  if (needs_enricher) enr_vec = detail::embed_enriched(cs, *qse, query, limits);

  std::vector<std::pair<std::string, double>> scored;
  scored.reserve(index.entries.size());
  for (const auto& e : index.entries) {
    double s = 0;
    switch (cfg.mode) {
      case RankMode::base_only:
      case RankMode::qe_baseline:
        s = ad::cosine_value(base_vec, e.vec);
        break;
      case RankMode::enriched_only:
        s = ad::cosine_value(enr_vec, e.vec);
        break;
      case RankMode::hybrid:
      case RankMode::no_rl:
        s = hybrid_score(ad::cosine_value(enr_vec, e.vec), ad::cosine_value(base_vec, e.vec),
                         cfg.beta);
        break;
    }
    scored.emplace_back(e.id, s);
  }
  std::sort(scored.begin(), scored.end(), [](const auto& a, const auto& b) {
    if (a.second != b.second) return a.second > b.second;
    return a.first < b.first;
  });
  if (scored.size() > top_k) scored.resize(top_k);
  return scored;
}

enum class EvalField { query, description };

inline std::string to_string(EvalField f) { return f == EvalField::query ? "query" : "description"; }
inline EvalField eval_field_from_string(const std::string& s) {
  if (s == "query") return EvalField::query;
  if (s == "description") return EvalField::description;
  throw std::invalid_argument("unknown eval field: " + s);
}

// Fixed-pool evaluation: each test triple is ranked against its pool
// (positive + negatives) using the selected text field, and the franks are
// aggregated into R@1/5/10 and MRR.
inline MetricReport evaluate_testset(const EncoderModel& cs, const QseModel* qse,
                                     const std::vector<EvalPool>& pools,
                                     const std::vector<Triple>& test_triples,
                                     const CodeBank& bank, const HybridConfig& cfg,
                                     EvalField eval_field,
                                     const SynonymLexicon* lexicon = nullptr,
                                     const CorpusLimits& limits = {}) {
  cfg.validate();
  const bool needs_enricher = cfg.mode == RankMode::hybrid || cfg.mode == RankMode::no_rl ||
                              cfg.mode == RankMode::enriched_only;
  if (needs_enricher && qse == nullptr)
    throw std::invalid_argument("evaluate_testset: mode " + to_string(cfg.mode) +
                                " requires an enricher model");
  if (cfg.mode == RankMode::qe_baseline && lexicon == nullptr)
    throw std::invalid_argument("evaluate_testset: qe_baseline requires a synonym lexicon");

  std::unordered_map<std::string, const EvalPool*> by_id;
  for (const auto& p : pools) by_id[p.query_id] = &p;

  std::vector<RankResult> franks;
  std::size_t min_pool = SIZE_MAX, max_pool = 0;
  bool any_fallback = false;
  for (const auto& t : test_triples) {
    auto it = by_id.find(t.id);
    if (it == by_id.end())
      throw std::invalid_argument("evaluate_testset: missing pool for triple " + t.id);
    const EvalPool& pool = *it->second;
    any_fallback = any_fallback || pool.fallback;

    TokenStream text;
    if (eval_field == EvalField::query) {
      auto q = query_tokens(t);
      if (!q || q->empty())
        throw std::invalid_argument("evaluate_testset: triple " + t.id + " has no query");
      text = *q;
    } else {
      text = description_tokens(t);
    }

    std::size_t text_max =
        eval_field == EvalField::query ? limits.max_query_len : limits.max_desc_len;
    nn::Vec base_vec;
    if (cfg.mode == RankMode::qe_baseline)
      base_vec = detail::embed_text(cs, qe_expand(text, *lexicon), limits.max_desc_len);
    else
      base_vec = detail::embed_text(cs, text, text_max);
    nn::Vec enr_vec;
    if (needs_enricher) enr_vec = detail::embed_enriched(cs, *qse, text, limits);

    std::vector<std::pair<std::string, double>> scores;
    scores.reserve(pool.negatives.size() + 1);
    auto score_of = [&](const std::string& id) {
      const nn::Vec& c = bank.vec(id);
      switch (cfg.mode) {
        case RankMode::base_only:
        case RankMode::qe_baseline:
          return ad::cosine_value(base_vec, c);
        case RankMode::enriched_only:
          return ad::cosine_value(enr_vec, c);
        case RankMode::hybrid:
        case RankMode::no_rl:
          return hybrid_score(ad::cosine_value(enr_vec, c), ad::cosine_value(base_vec, c),
                              cfg.beta);
      }
      return 0.0;
    };
    scores.emplace_back(pool.positive_id, score_of(pool.positive_id));
    for (const auto& id : pool.negatives) scores.emplace_back(id, score_of(id));

    franks.push_back(frank(scores, pool.positive_id));
    min_pool = std::min(min_pool, scores.size());
    max_pool = std::max(max_pool, scores.size());
  }
  if (franks.empty()) throw std::invalid_argument("evaluate_testset: no test triples");

  MetricReport rep = make_report(franks);
  rep.metadata["eval_field"] = to_string(eval_field);
  rep.metadata["mode"] = to_string(cfg.mode);
  rep.metadata["beta"] = cfg.beta;
  rep.metadata["pool_size_min"] = min_pool;
  rep.metadata["pool_size_max"] = max_pool;
  rep.metadata["pool_fallback"] = any_fallback;
  if (!pools.empty()) rep.metadata["pool_seed"] = pools.front().seed;
  return rep;
}

}  // namespace qcs
