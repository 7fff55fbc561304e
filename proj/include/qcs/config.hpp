#pragma once

#include <fstream>
#include <stdexcept>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "qcs/encoder.hpp"
#include "qcs/qse.hpp"
#include "qcs/ranker.hpp"
#include "qcs/rl.hpp"

namespace qcs {

struct RunPaths {
  std::string corpus;          // input JSONL; empty when preparing synthetic data
  std::string work_dir = "work";
  std::string cs_checkpoint = "work/cs";
  std::string qse_checkpoint = "work/qse";
  std::string rl_checkpoint = "work/rl";
  std::string index = "work/index.bin";
  std::string pools = "work/pools.jsonl";
  std::string reports_dir = "work/reports";
  std::string lexicon;  // optional synonym lexicon for the QE baseline
};

inline void to_json(nlohmann::json& j, const RunPaths& p) {
  j = nlohmann::json{{"corpus", p.corpus},
                     {"work_dir", p.work_dir},
                     {"cs_checkpoint", p.cs_checkpoint},
                     {"qse_checkpoint", p.qse_checkpoint},
                     {"rl_checkpoint", p.rl_checkpoint},
                     {"index", p.index},
                     {"pools", p.pools},
                     {"reports_dir", p.reports_dir},
                     {"lexicon", p.lexicon}};
}
inline void from_json(const nlohmann::json& j, RunPaths& p) {
  p.corpus = j.value("corpus", "");
  p.work_dir = j.value("work_dir", "work");
  p.cs_checkpoint = j.value("cs_checkpoint", p.work_dir + "/cs");
  p.qse_checkpoint = j.value("qse_checkpoint", p.work_dir + "/qse");
  p.rl_checkpoint = j.value("rl_checkpoint", p.work_dir + "/rl");
  p.index = j.value("index", p.work_dir + "/index.bin");
  p.pools = j.value("pools", p.work_dir + "/pools.jsonl");
  p.reports_dir = j.value("reports_dir", p.work_dir + "/reports");
  p.lexicon = j.value("lexicon", "");
}

// Whole-run configuration. The global seed is propagated into every module
// block with a per-module derivation, so one seed pins the entire pipeline.
struct RunConfig {
  RunPaths paths;
  CorpusLimits corpus;
  EncoderConfig encoder;
  Seq2SeqConfig qse;
  RlConfig rl;
  HybridConfig hybrid;
  std::uint64_t seed = 1;

  void propagate_seed() {
    encoder.seed = derive_seed(seed, "encoder");
    qse.seed = derive_seed(seed, "qse");
    rl.seed = derive_seed(seed, "rl");
  }

  void validate() const {
    encoder.validate();
    qse.validate();
    rl.validate();
    hybrid.validate();
  }

  nlohmann::json to_json_obj() const {
    nlohmann::json j;
    j["paths"] = paths;
    j["corpus"] = corpus;
    j["encoder"] = encoder;
    j["qse"] = qse;
    j["rl"] = rl;
    j["hybrid"] = hybrid;
    j["seed"] = seed;
    return j;
  }

  static RunConfig from_json_obj(const nlohmann::json& j) {
    RunConfig c;
    if (j.contains("paths")) c.paths = j.at("paths").get<RunPaths>();
    if (j.contains("corpus")) c.corpus = j.at("corpus").get<CorpusLimits>();
    if (j.contains("encoder")) c.encoder = j.at("encoder").get<EncoderConfig>();
    if (j.contains("qse")) c.qse = j.at("qse").get<Seq2SeqConfig>();
    if (j.contains("rl")) c.rl = j.at("rl").get<RlConfig>();
    if (j.contains("hybrid")) c.hybrid = j.at("hybrid").get<HybridConfig>();
    c.seed = j.value("seed", std::uint64_t{1});
    c.propagate_seed();
    return c;
  }

  static RunConfig load(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw std::runtime_error("RunConfig::load: cannot open " + path);
    return from_json_obj(nlohmann::json::parse(in));
  }

  // Hash of the canonical serialized form (nlohmann objects dump with sorted
  // keys, so this is stable).
  std::uint64_t hash() const { return fnv1a64(to_json_obj().dump()); }
};

// Applies one "--set dotted.key=value" override onto the config JSON.
inline void apply_override(nlohmann::json& j, const std::string& spec) {
  auto eq = spec.find('=');
  if (eq == std::string::npos)
    throw std::invalid_argument("override must look like section.key=value: " + spec);
  std::string key = spec.substr(0, eq);
  std::string value = spec.substr(eq + 1);

  nlohmann::json* node = &j;
  std::size_t start = 0;
  while (true) {
    std::size_t dot = key.find('.', start);
    std::string part = key.substr(start, dot == std::string::npos ? std::string::npos : dot - start);
    if (part.empty()) throw std::invalid_argument("bad override key: " + key);
    if (dot == std::string::npos) {
      nlohmann::json parsed;
      try {
        parsed = nlohmann::json::parse(value);
      } catch (...) {
        parsed = value;  // bare strings stay strings
      }
      (*node)[part] = parsed;
      return;
    }
    node = &(*node)[part];
    start = dot + 1;
  }
}

}  // namespace qcs
