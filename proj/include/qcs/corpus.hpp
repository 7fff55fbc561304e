#pragma once

#include <fstream>
#include <optional>
#include <sstream>
#include <stdexcept>
#include <string>
#include <unordered_set>
#include <vector>

#include <nlohmann/json.hpp>

#include "qcs/rng.hpp"
#include "qcs/tokenize.hpp"

namespace qcs {

enum class Language { java, python, synthetic };

inline std::string to_string(Language l) {
  switch (l) {
    case Language::java: return "java";
    case Language::python: return "python";
    case Language::synthetic: return "synthetic";
  }
  return "synthetic";
}

inline Language language_from_string(const std::string& s) {
  if (s == "java") return Language::java;
  if (s == "python") return Language::python;
  if (s == "synthetic") return Language::synthetic;
  throw std::invalid_argument("unknown language tag: " + s);
}

// One aligned (code, description, query) record. The query is optional:
// description-only corpora carry none.
struct Triple {
  std::string id;
  Language language = Language::synthetic;
  std::string code;
  std::string description;
  std::optional<std::string> query;
};

inline void to_json(nlohmann::json& j, const Triple& t) {
  j = nlohmann::json{{"id", t.id},
                     {"language", to_string(t.language)},
                     {"code", t.code},
                     {"description", t.description}};
  if (t.query)
    j["query"] = *t.query;
  else
    j["query"] = nullptr;
}

inline void from_json(const nlohmann::json& j, Triple& t) {
  t.id = j.at("id").get<std::string>();
  t.language = language_from_string(j.at("language").get<std::string>());
  t.code = j.at("code").get<std::string>();
  t.description = j.at("description").get<std::string>();
  t.query.reset();
  if (j.contains("query") && !j.at("query").is_null()) {
    t.query = j.at("query").get<std::string>();
  }
}

// Reads a JSONL corpus, one triple per line. Ids must be unique.
inline std::vector<Triple> load_corpus(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("load_corpus: cannot open " + path);
  std::vector<Triple> out;
  std::unordered_set<std::string> seen;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty()) continue;
    Triple t;
    try {
      from_json(nlohmann::json::parse(line), t);
    } catch (const std::exception& e) {
      throw std::runtime_error("load_corpus: " + path + ":" + std::to_string(lineno) + ": " +
                               e.what());
    }
    if (!seen.insert(t.id).second)
      throw std::runtime_error("load_corpus: duplicate id '" + t.id + "' at line " +
                               std::to_string(lineno));
    out.push_back(std::move(t));
  }
  return out;
}

inline void save_corpus(const std::vector<Triple>& triples, const std::string& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("save_corpus: cannot open " + path);
  for (const auto& t : triples) {
    nlohmann::json j = t;
    out << j.dump() << '\n';
  }
}

// Normalizes every field to the space-join of its identifier tokens. Records
// whose code or description vanish after cleaning yield nullopt (drop signal);
// a query that vanishes is demoted to absent.
inline std::optional<Triple> preprocess_triple(const Triple& t) {
  Triple out = t;
  out.code = join_tokens(tokenize_identifier(t.code, TokenSource::code).tokens);
  out.description = join_tokens(tokenize_identifier(t.description, TokenSource::description).tokens);
  if (out.code.empty() || out.description.empty()) return std::nullopt;
  if (t.query) {
    std::string q = join_tokens(tokenize_identifier(*t.query, TokenSource::query).tokens);
    if (q.empty())
      out.query.reset();
    else
      out.query = q;
  }
  return out;
}

inline std::vector<Triple> preprocess_corpus(const std::vector<Triple>& triples) {
  std::vector<Triple> out;
  out.reserve(triples.size());
  for (const auto& t : triples) {
    if (auto p = preprocess_triple(t)) out.push_back(std::move(*p));
  }
  return out;
}

// Token streams for one preprocessed triple.
inline TokenStream code_tokens(const Triple& t) {
  return tokenize_identifier(t.code, TokenSource::code);
}
inline TokenStream description_tokens(const Triple& t) {
  return tokenize_identifier(t.description, TokenSource::description);
}
inline std::optional<TokenStream> query_tokens(const Triple& t) {
  if (!t.query) return std::nullopt;
  return tokenize_identifier(*t.query, TokenSource::query);
}

// First identifier's sub-tokens, used as a method-name stand-in when a
// recurrent code tower prepends name tokens. Heuristic: token-level only.
inline std::vector<std::string> method_name_tokens(const std::string& code) {
  TokenStream ts = tokenize_identifier(code, TokenSource::code);
  // Skip leading keyword-ish fragments of length <= 2 groups: take the first
  // run of up to 3 tokens starting at the first token.
  std::vector<std::string> out;
  for (std::size_t i = 0; i < ts.tokens.size() && out.size() < 3; ++i) out.push_back(ts.tokens[i]);
  return out;
}

struct DatasetSplit {
  std::vector<Triple> train;
  std::vector<Triple> valid;
  std::vector<Triple> test;
  std::uint64_t seed = 0;
};

// Deterministic shuffle by seed, then an 8:1:1 partition with the rounding
// remainder assigned to train.
inline DatasetSplit split_dataset(const std::vector<Triple>& triples, std::uint64_t seed) {
  if (triples.size() < 10)
    throw std::invalid_argument("split_dataset: need at least 10 triples, got " +
                                std::to_string(triples.size()));
  std::vector<std::size_t> order(triples.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
  Rng rng(derive_seed(seed, "split"));
  rng.shuffle(order);

  const std::size_t n = triples.size();
  const std::size_t n_valid = n / 10;
  const std::size_t n_test = n / 10;
  const std::size_t n_train = n - n_valid - n_test;

  DatasetSplit split;
  split.seed = seed;
  split.train.reserve(n_train);
  split.valid.reserve(n_valid);
  split.test.reserve(n_test);
  for (std::size_t i = 0; i < n; ++i) {
    const Triple& t = triples[order[i]];
    if (i < n_train)
      split.train.push_back(t);
    else if (i < n_train + n_valid)
      split.valid.push_back(t);
    else
      split.test.push_back(t);
  }
  return split;
}

namespace synth {

// Token pools for the synthetic grammar. The four keyword pools and the two
// filler pools are mutually disjoint, so the exact-keyword overlap between a
// description and a foreign code snippet is bounded by the number of shared
// keyword slots.
inline const std::vector<std::string>& verbs() {
  static const std::vector<std::string> v = {
      "parse", "sort",  "merge", "filter", "convert", "encode", "decode", "split",
      "join",  "hash",  "cache", "fetch",  "load",    "save",   "scan",   "rank",
      "count", "trim",  "copy",  "rotate", "clamp",   "pack",   "unpack", "align"};
  return v;
}
inline const std::vector<std::string>& modifiers() {
  static const std::vector<std::string> v = {"binary", "sorted", "unique", "nested",
                                             "remote", "local",  "cached", "packed",
                                             "hidden", "shared", "frozen", "sparse"};
  return v;
}
inline const std::vector<std::string>& nouns_a() {
  static const std::vector<std::string> v = {
      "file",  "list",   "string", "array",  "map",   "tree",  "graph", "token",
      "buffer", "record", "table",  "image",  "stream", "node",  "key",   "path",
      "text",  "matrix", "queue",  "stack",  "vector", "frame", "block", "segment"};
  return v;
}
inline const std::vector<std::string>& nouns_b() {
  static const std::vector<std::string> v = {
      "index",   "archive",  "bundle",   "report",  "digest",  "summary", "payload", "manifest",
      "ledger",  "batch",    "chunk",    "packet",  "catalog", "registry", "snapshot", "journal",
      "outline", "profile",  "schema",   "layout",  "preview", "draft",   "notice",  "ticket"};
  return v;
}

}  // namespace synth

// Deterministic desk-scale corpus. Each triple gets a distinct keyword combo
// (verb, modifier, noun, noun); the description states all four, the code
// preserves them inside identifiers, and the query keeps a lossy subset.
// Natural-language filler and code filler never overlap, so every description
// retrieves its own code at rank 1 under exact-token-overlap scoring.
inline std::vector<Triple> generate_synthetic_corpus(std::size_t n, std::uint64_t seed) {
  if (n < 1) throw std::invalid_argument("generate_synthetic_corpus: n must be >= 1");
  const auto& vs = synth::verbs();
  const auto& ms = synth::modifiers();
  const auto& n1s = synth::nouns_a();
  const auto& n2s = synth::nouns_b();
  const std::size_t combos = vs.size() * ms.size() * n1s.size() * n2s.size();
  if (n > combos)
    throw std::invalid_argument("generate_synthetic_corpus: n exceeds the keyword combo space (" +
                                std::to_string(combos) + ")");

  Rng rng(derive_seed(seed, "synthetic"));
  std::vector<std::size_t> combo_ids = rng.sample_indices(combos, n);

  static const std::vector<std::string> nl_prefixes = {
      "this function can", "this method should", "a helper routine to"};
  static const std::vector<std::string> nl_tails = {
      "for every caller", "when input is ready", "and return the result",
      "using a single pass"};
  static const std::vector<std::string> q_fillers = {"how to", "how do i", "how can i", "way to"};

  auto upper_first = [](std::string s) {
    if (!s.empty() && s[0] >= 'a' && s[0] <= 'z') s[0] = static_cast<char>(s[0] - 'a' + 'A');
    return s;
  };

  std::vector<Triple> out;
  out.reserve(n);
  for (std::size_t i = 0; i < n; ++i) {
    std::size_t c = combo_ids[i];
    const std::string& verb = vs[c % vs.size()];
    c /= vs.size();
    const std::string& mod = ms[c % ms.size()];
    c /= ms.size();
    const std::string& noun1 = n1s[c % n1s.size()];
    c /= n1s.size();
    const std::string& noun2 = n2s[c % n2s.size()];

    // Description: 10-15 tokens.
    std::string desc = nl_prefixes[rng.below(nl_prefixes.size())];
    desc += " " + verb + " the " + mod + " " + noun1 + " into a " + noun2;
    if (rng.below(2) == 1) desc += " " + nl_tails[rng.below(nl_tails.size())];

    // Code: identifiers built only from this triple's keywords plus
    // code-side filler, emitted in camelCase or snake_case.
    bool camel = rng.below(2) == 0;
    std::string code;
    if (camel) {
      code = "static int " + verb + upper_first(mod) + upper_first(noun1) + "(" +
             upper_first(noun2) + " input) { int out = " + verb + "Impl(input); return out; }";
    } else {
      code = "def " + verb + "_" + mod + "_" + noun1 + "(" + noun2 +
             "_input):\n    out = " + verb + "_impl(" + noun2 + "_input)\n    return out";
    }

    // Query: lossy 5-6 token compression; noun2 and the description phrasing
    // are always dropped.
    std::string query = q_fillers[rng.below(q_fillers.size())];
    query += " " + verb + " " + mod + " " + noun1 + "?";

    Triple t;
    char idbuf[32];
    std::snprintf(idbuf, sizeof(idbuf), "syn-%06zu", i);
    t.id = idbuf;
    t.language = Language::synthetic;
    t.code = code;
    t.description = desc;
    t.query = query;
    out.push_back(std::move(t));
  }
  return out;
}

}  // namespace qcs
