#pragma once

#include <cmath>
#include <map>
#include <stdexcept>
#include <string>
#include <unordered_map>
#include <vector>

#include <nlohmann/json.hpp>

namespace qcs {

struct RankResult {
  std::size_t frank = 0;      // 1-based rank of the correct answer
  std::size_t pool_size = 0;
};

// Rank of the positive candidate under the pessimistic tie policy: every
// strictly-greater score and every tied score counts ahead of it. The result
// is invariant under permutation of the candidate list.
inline RankResult frank(const std::vector<std::pair<std::string, double>>& scores,
                        const std::string& positive_id) {
  double pos_score = 0;
  std::size_t found = 0;
  for (const auto& [id, s] : scores) {
    if (id == positive_id) {
      pos_score = s;
      ++found;
    }
  }
  if (found == 0) throw std::invalid_argument("frank: positive id absent from candidates");
  if (found > 1) throw std::invalid_argument("frank: positive id duplicated in candidates");

  std::size_t ahead = 0;
  for (const auto& [id, s] : scores) {
    if (id == positive_id) continue;
    if (s >= pos_score) ++ahead;
  }
  return {ahead + 1, scores.size()};
}

inline double recall_at_k(const std::vector<RankResult>& franks, std::size_t k) {
  if (franks.empty()) throw std::invalid_argument("recall_at_k: empty input");
  if (k < 1) throw std::invalid_argument("recall_at_k: k must be >= 1");
  std::size_t hits = 0;
  for (const auto& r : franks)
    if (r.frank <= k) ++hits;
  return static_cast<double>(hits) / static_cast<double>(franks.size());
}

inline double mrr(const std::vector<RankResult>& franks) {
  if (franks.empty()) throw std::invalid_argument("mrr: empty input");
  double total = 0;
  for (const auto& r : franks) total += 1.0 / static_cast<double>(r.frank);
  return total / static_cast<double>(franks.size());
}

// Sentence-level BLEU-4 with add-one smoothing on every n-gram precision and
// the standard brevity penalty. An empty candidate scores 0.
inline double bleu4(const std::vector<int>& candidate, const std::vector<int>& reference) {
  if (reference.empty()) throw std::invalid_argument("bleu4: empty reference");
  if (candidate.empty()) return 0.0;

  const int max_order = 4;
  double log_precision_sum = 0;
  for (int n = 1; n <= max_order; ++n) {
    std::map<std::vector<int>, std::size_t> ref_counts;
    if (reference.size() >= static_cast<std::size_t>(n))
      for (std::size_t i = 0; i + n <= reference.size(); ++i)
        ++ref_counts[std::vector<int>(reference.begin() + i, reference.begin() + i + n)];

    std::size_t total = 0, matched = 0;
    if (candidate.size() >= static_cast<std::size_t>(n)) {
      std::map<std::vector<int>, std::size_t> cand_counts;
      for (std::size_t i = 0; i + n <= candidate.size(); ++i) {
        ++cand_counts[std::vector<int>(candidate.begin() + i, candidate.begin() + i + n)];
        ++total;
      }
      for (const auto& [gram, c] : cand_counts) {
        auto it = ref_counts.find(gram);
        if (it != ref_counts.end()) matched += std::min(c, it->second);
      }
    }
    double p = (static_cast<double>(matched) + 1.0) / (static_cast<double>(total) + 1.0);
    log_precision_sum += std::log(p);
  }

  double bp = 1.0;
  if (candidate.size() < reference.size())
    bp = std::exp(1.0 - static_cast<double>(reference.size()) / static_cast<double>(candidate.size()));
  return bp * std::exp(log_precision_sum / max_order);
}

struct MetricReport {
  std::map<std::size_t, double> r_at;  // k in {1, 5, 10}
  double mrr_value = 0;
  std::size_t n_queries = 0;
  nlohmann::json metadata;  // tie policy, smoothing, pool sizes, seed, mode

  nlohmann::json to_json() const {
    nlohmann::json j;
    for (const auto& [k, v] : r_at) j["r_at"][std::to_string(k)] = v;
    j["mrr"] = mrr_value;
    j["n_queries"] = n_queries;
    j["metadata"] = metadata;
    return j;
  }
};

inline MetricReport make_report(const std::vector<RankResult>& franks) {
  MetricReport rep;
  rep.n_queries = franks.size();
  for (std::size_t k : {1u, 5u, 10u}) rep.r_at[k] = recall_at_k(franks, k);
  rep.mrr_value = mrr(franks);
  rep.metadata["tie_policy"] = "pessimistic";
  rep.metadata["bleu_smoothing"] = "add-one";
  return rep;
}

}  // namespace qcs
