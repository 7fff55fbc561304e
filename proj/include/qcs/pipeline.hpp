#pragma once

#include <fcntl.h>
#include <sys/file.h>
#include <unistd.h>

#include <filesystem>
#include <fstream>
#include <map>
#include <optional>
#include <stdexcept>
#include <string>
#include <unordered_map>
#include <vector>

#include "qcs/config.hpp"
#include "qcs/corpus.hpp"
#include "qcs/encoder.hpp"
#include "qcs/qse.hpp"
#include "qcs/ranker.hpp"
#include "qcs/rl.hpp"

namespace qcs::pipeline {

namespace fs = std::filesystem;

// Exclusive advisory lock on a directory, held for the duration of a
// checkpoint-writing stage.
class DirLock {
 public:
  explicit DirLock(const std::string& dir) {
    fs::create_directories(dir);
    path_ = (fs::path(dir) / ".lock").string();
    fd_ = ::open(path_.c_str(), O_CREAT | O_RDWR, 0644);
    if (fd_ < 0) throw std::runtime_error("cannot open lock file " + path_);
    if (::flock(fd_, LOCK_EX | LOCK_NB) != 0) {
      ::close(fd_);
      fd_ = -1;
      throw std::runtime_error("checkpoint directory is locked by another process: " + dir);
    }
  }
  ~DirLock() {
    if (fd_ >= 0) {
      ::flock(fd_, LOCK_UN);
      ::close(fd_);
    }
  }
  DirLock(const DirLock&) = delete;
  DirLock& operator=(const DirLock&) = delete;

 private:
  std::string path_;
  int fd_ = -1;
};

inline std::string hex64(std::uint64_t v) {
  char buf[17];
  std::snprintf(buf, sizeof(buf), "%016llx", static_cast<unsigned long long>(v));
  return buf;
}

// Stage lineage: a hash of the stage's own config block chained with the
// lineage of everything it consumed. Artifacts embed their lineage so a later
// stage can refuse inputs produced under a different configuration, while
// evaluation-time knobs (mode, beta) stay out of the chain.
inline std::uint64_t chain(const nlohmann::json& own, std::initializer_list<std::uint64_t> inputs) {
  std::string blob = own.dump();
  for (std::uint64_t in : inputs) blob += hex64(in);
  return fnv1a64(blob);
}

inline std::uint64_t prepare_lineage(const RunConfig& cfg, const std::string& source) {
  nlohmann::json own;
  own["limits"] = cfg.corpus;
  own["seed"] = cfg.seed;
  own["source"] = source;
  return chain(own, {});
}

inline std::uint64_t cs_lineage(const RunConfig& cfg, std::uint64_t prep) {
  return chain(nlohmann::json(cfg.encoder), {prep});
}

inline std::uint64_t qse_lineage(const RunConfig& cfg, std::uint64_t prep) {
  return chain(nlohmann::json(cfg.qse), {prep});
}

inline std::uint64_t rl_lineage(const RunConfig& cfg, std::uint64_t cs, std::uint64_t qse) {
  return chain(nlohmann::json(cfg.rl), {cs, qse});
}

inline std::uint64_t pools_lineage(const RunConfig& cfg, std::uint64_t prep) {
  nlohmann::json own;
  own["seed"] = cfg.seed;
  return chain(own, {prep});
}

inline void write_json(const nlohmann::json& j, const std::string& path) {
  fs::create_directories(fs::path(path).parent_path().empty() ? "." : fs::path(path).parent_path().string());
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot write " + path);
  out << j.dump(2) << '\n';
}

inline nlohmann::json read_json(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot read " + path);
  return nlohmann::json::parse(in);
}

// Per-stage run manifest: config hash, seed, lineage, artifact list. No
// timestamps, so reruns with the same seed are byte-identical.
inline void write_manifest(const RunConfig& cfg, const std::string& stage, std::uint64_t lineage,
                           const std::vector<std::string>& artifacts) {
  nlohmann::json m;
  m["command"] = stage;
  m["config_hash"] = hex64(cfg.hash());
  m["seed"] = cfg.seed;
  m["lineage"] = hex64(lineage);
  m["artifacts"] = artifacts;
  m["versions"] = {{"checkpoint", kCheckpointVersion},
                   {"param_blob", nn::kParamBlobVersion},
                   {"index", SearchIndex::kVersion}};
  write_json(m, (fs::path(cfg.paths.work_dir) / ("manifest_" + stage + ".json")).string());
}

// ---------------------------------------------------------------------------
// Prepared data

struct Prepared {
  DatasetSplit split;
  Vocabulary vocab_code, vocab_desc, vocab_query;
  std::vector<Triple> all;  // processed corpus, file order
  std::uint64_t lineage = 0;
};

inline std::vector<int> encode_field(const TokenStream& ts, const Vocabulary& v, bool framed,
                                     std::size_t max_len) {
  return encode_tokens(ts, v, framed, max_len);
}

// Code-tower input: the recurrent (DeepCS-style) tower prepends method-name
// tokens to the code tokens; the bag tower uses code tokens alone.
inline std::vector<int> code_input_ids(const Triple& t, const Vocabulary& vocab_code,
                                       const CorpusLimits& limits, ModelKind kind) {
  TokenStream ts = code_tokens(t);
  if (kind == ModelKind::recurrent) {
    std::vector<std::string> name = method_name_tokens(t.code);
    ts.tokens.insert(ts.tokens.begin(), name.begin(), name.end());
  }
  return encode_tokens(ts, vocab_code, false, limits.max_code_len);
}

inline Prepared prepare(const RunConfig& cfg, std::size_t synthetic_n = 0) {
  const std::string work = cfg.paths.work_dir;
  DirLock lock(work);

  std::string source;
  std::vector<Triple> raw;
  if (synthetic_n > 0) {
    source = "synthetic:" + std::to_string(synthetic_n);
    raw = generate_synthetic_corpus(synthetic_n, cfg.seed);
    save_corpus(raw, (fs::path(work) / "raw_corpus.jsonl").string());
  } else {
    if (cfg.paths.corpus.empty())
      throw std::runtime_error("prepare: no corpus path configured and no --synthetic count given");
    source = cfg.paths.corpus;
    raw = load_corpus(cfg.paths.corpus);
  }

  std::vector<Triple> processed = preprocess_corpus(raw);
  DatasetSplit split = split_dataset(processed, cfg.seed);

  std::vector<TokenStream> code_streams, desc_streams, query_streams;
  for (const auto& t : split.train) {
    code_streams.push_back(code_tokens(t));
    desc_streams.push_back(description_tokens(t));
    if (auto q = query_tokens(t); q && !q->empty()) query_streams.push_back(*q);
  }
  Vocabulary vocab_code = Vocabulary::build(code_streams, cfg.corpus.vocab_size);
  Vocabulary vocab_desc = Vocabulary::build(desc_streams, cfg.corpus.vocab_size);
  Vocabulary vocab_query =
      query_streams.empty() ? Vocabulary() : Vocabulary::build(query_streams, cfg.corpus.vocab_size);

  save_corpus(processed, (fs::path(work) / "corpus.jsonl").string());
  vocab_code.save((fs::path(work) / "vocab_code.txt").string());
  vocab_desc.save((fs::path(work) / "vocab_desc.txt").string());
  vocab_query.save((fs::path(work) / "vocab_query.txt").string());

  auto ids_of = [](const std::vector<Triple>& ts) {
    std::vector<std::string> ids;
    ids.reserve(ts.size());
    for (const auto& t : ts) ids.push_back(t.id);
    return ids;
  };
  nlohmann::json splits;
  splits["seed"] = cfg.seed;
  splits["train"] = ids_of(split.train);
  splits["valid"] = ids_of(split.valid);
  splits["test"] = ids_of(split.test);
  write_json(splits, (fs::path(work) / "splits.json").string());

  std::uint64_t lineage = prepare_lineage(cfg, source);
  nlohmann::json manifest;
  manifest["source"] = source;
  manifest["limits"] = cfg.corpus;
  manifest["seed"] = cfg.seed;
  manifest["lineage"] = hex64(lineage);
  manifest["n_raw"] = raw.size();
  manifest["n_kept"] = processed.size();
  write_json(manifest, (fs::path(work) / "prepare_manifest.json").string());
  write_manifest(cfg, "prepare", lineage,
                 {"corpus.jsonl", "splits.json", "vocab_code.txt", "vocab_desc.txt",
                  "vocab_query.txt"});

  Prepared p;
  p.split = std::move(split);
  p.vocab_code = std::move(vocab_code);
  p.vocab_desc = std::move(vocab_desc);
  p.vocab_query = std::move(vocab_query);
  p.all = std::move(processed);
  p.lineage = lineage;
  return p;
}

inline Prepared load_prepared(const RunConfig& cfg) {
  const std::string work = cfg.paths.work_dir;
  if (!fs::exists(fs::path(work) / "prepare_manifest.json"))
    throw std::runtime_error("no prepared data in " + work + " (run prepare first)");
  nlohmann::json manifest = read_json((fs::path(work) / "prepare_manifest.json").string());
  std::string source = manifest.at("source").get<std::string>();
  std::uint64_t lineage = prepare_lineage(cfg, source);
  if (hex64(lineage) != manifest.value("lineage", ""))
    throw std::runtime_error(
        "prepared data in " + work +
        " was produced under a different corpus config or seed; rerun prepare");

  Prepared p;
  p.lineage = lineage;
  p.all = load_corpus((fs::path(work) / "corpus.jsonl").string());
  p.vocab_code = Vocabulary::load((fs::path(work) / "vocab_code.txt").string());
  p.vocab_desc = Vocabulary::load((fs::path(work) / "vocab_desc.txt").string());
  p.vocab_query = Vocabulary::load((fs::path(work) / "vocab_query.txt").string());

  nlohmann::json splits = read_json((fs::path(work) / "splits.json").string());
  std::unordered_map<std::string, const Triple*> by_id;
  for (const auto& t : p.all) by_id[t.id] = &t;
  auto materialize = [&](const char* key) {
    std::vector<Triple> out;
    for (const auto& id : splits.at(key)) {
      auto it = by_id.find(id.get<std::string>());
      if (it == by_id.end())
        throw std::runtime_error("splits.json references unknown id " + id.get<std::string>());
      out.push_back(*it->second);
    }
    return out;
  };
  p.split.train = materialize("train");
  p.split.valid = materialize("valid");
  p.split.test = materialize("test");
  p.split.seed = splits.value("seed", std::uint64_t{0});
  return p;
}

// ---------------------------------------------------------------------------
// Training stages

struct CsStageResult {
  double final_train_loss = 0;
  double final_valid_mrr = 0;
  std::vector<double> valid_mrr_per_epoch;
};

// Validation MRR: every valid-split description ranked against all
// valid-split code snippets.
inline double validation_mrr(const EncoderModel& model, const Prepared& data,
                             const CorpusLimits& limits) {
  if (data.split.valid.empty()) return 0.0;
  std::vector<std::pair<std::string, nn::Vec>> codes;
  for (const auto& t : data.split.valid)
    codes.emplace_back(
        t.id, model.embed_vec(TowerKind::code,
                              code_input_ids(t, model.code_vocab(), limits,
                                             model.config().model_kind)));
  std::vector<RankResult> franks;
  for (const auto& t : data.split.valid) {
    nn::Vec d = model.embed_vec(
        TowerKind::text, encode_tokens(description_tokens(t), model.text_vocab(), false,
                                       limits.max_desc_len));
    std::vector<std::pair<std::string, double>> scores;
    scores.reserve(codes.size());
    for (const auto& [id, c] : codes) scores.emplace_back(id, ad::cosine_value(d, c));
    franks.push_back(frank(scores, t.id));
  }
  return mrr(franks);
}

inline CsStageResult train_cs(const RunConfig& cfg) {
  Prepared data = load_prepared(cfg);
  DirLock lock(cfg.paths.cs_checkpoint);

  EncoderModel model(cfg.encoder, data.vocab_code, data.vocab_desc);
  std::vector<CsPair> pairs;
  for (const auto& t : data.split.train) {
    CsPair p;
    p.id = t.id;
    p.desc_ids = encode_tokens(description_tokens(t), data.vocab_desc, false,
                               cfg.corpus.max_desc_len);
    p.code_ids = code_input_ids(t, data.vocab_code, cfg.corpus, cfg.encoder.model_kind);
    pairs.push_back(std::move(p));
  }
  if (pairs.empty()) throw std::runtime_error("train-cs: training split is empty");

  EncoderTrainer trainer(model);
  Rng rng(derive_seed(cfg.seed, "train-cs"));
  CsStageResult result;
  double best_mrr = -1;
  int stagnant = 0;
  for (int epoch = 0; epoch < cfg.encoder.epochs; ++epoch) {
    result.final_train_loss = trainer.train_epoch(pairs, rng);
    double vmrr = validation_mrr(model, data, cfg.corpus);
    result.valid_mrr_per_epoch.push_back(vmrr);
    if (vmrr > best_mrr + 1e-9) {
      best_mrr = vmrr;
      stagnant = 0;
    } else if (++stagnant >= 2) {
      trainer.optimizer().set_learning_rate(trainer.optimizer().learning_rate() *
                                            cfg.encoder.lr_decay);
      stagnant = 0;
    }
  }
  result.final_valid_mrr = result.valid_mrr_per_epoch.empty() ? 0 : result.valid_mrr_per_epoch.back();

  model.save(cfg.paths.cs_checkpoint);
  std::uint64_t lineage = cs_lineage(cfg, data.lineage);
  nlohmann::json extra;
  extra["lineage"] = hex64(lineage);
  extra["config_hash"] = hex64(cfg.hash());
  write_json(extra, (fs::path(cfg.paths.cs_checkpoint) / "lineage.json").string());
  write_manifest(cfg, "train-cs", lineage, {cfg.paths.cs_checkpoint});
  return result;
}

inline void verify_lineage(const std::string& checkpoint_dir, std::uint64_t expected,
                           const std::string& what) {
  std::string path = (fs::path(checkpoint_dir) / "lineage.json").string();
  if (!fs::exists(path))
    throw std::runtime_error(what + " checkpoint missing at " + checkpoint_dir);
  nlohmann::json j = read_json(path);
  if (j.value("lineage", "") != hex64(expected))
    throw std::runtime_error(what + " checkpoint at " + checkpoint_dir +
                             " was produced under a different config; retrain it");
}

struct QseStageResult {
  double final_train_loss = 0;
  std::vector<double> loss_per_epoch;
};

inline QseStageResult train_qse(const RunConfig& cfg) {
  Prepared data = load_prepared(cfg);
  DirLock lock(cfg.paths.qse_checkpoint);

  QseModel model(cfg.qse, data.vocab_query, data.vocab_desc);
  std::vector<QsePair> pairs;
  for (const auto& t : data.split.train) {
    auto q = query_tokens(t);
    if (!q || q->empty()) continue;
    QsePair p;
    p.id = t.id;
    p.query_ids = encode_tokens(*q, data.vocab_query, true, cfg.corpus.max_query_len);
    p.target_ids = encode_tokens(description_tokens(t), data.vocab_desc, true,
                                 cfg.corpus.max_desc_len);
    pairs.push_back(std::move(p));
  }
  if (pairs.empty())
    throw std::runtime_error("train-qse: no training triples carry a query field");

  QseTrainer trainer(model);
  Rng rng(derive_seed(cfg.seed, "train-qse"));
  QseStageResult result;
  for (int epoch = 0; epoch < cfg.qse.epochs; ++epoch) {
    result.final_train_loss = trainer.train_epoch(pairs, rng);
    result.loss_per_epoch.push_back(result.final_train_loss);
  }

  model.save(cfg.paths.qse_checkpoint);
  std::uint64_t lineage = qse_lineage(cfg, data.lineage);
  nlohmann::json extra;
  extra["lineage"] = hex64(lineage);
  extra["config_hash"] = hex64(cfg.hash());
  write_json(extra, (fs::path(cfg.paths.qse_checkpoint) / "lineage.json").string());
  write_manifest(cfg, "train-qse", lineage, {cfg.paths.qse_checkpoint});
  return result;
}

struct RlStageResult {
  std::vector<RewardTraceRow> trace;
  std::vector<double> critic_pretrain_loss;
};

inline RlDataset make_rl_dataset(const Prepared& data, const Vocabulary& vocab_query,
                                 const Vocabulary& vocab_desc, const CorpusLimits& limits) {
  RlDataset ds;
  for (const auto& t : data.split.train) {
    ds.corpus_ids.push_back(t.id);
    auto q = query_tokens(t);
    if (!q || q->empty()) continue;
    RlItem item;
    item.id = t.id;
    item.query_ids = encode_tokens(*q, vocab_query, true, limits.max_query_len);
    item.gold_desc_ids =
        encode_tokens(description_tokens(t), vocab_desc, false, limits.max_desc_len);
    ds.items.push_back(std::move(item));
  }
  return ds;
}

inline RlStageResult train_rl_stage(const RunConfig& cfg) {
  Prepared data = load_prepared(cfg);
  verify_lineage(cfg.paths.cs_checkpoint, cs_lineage(cfg, data.lineage), "train-rl: CS");
  verify_lineage(cfg.paths.qse_checkpoint, qse_lineage(cfg, data.lineage), "train-rl: QSE");
  DirLock lock(cfg.paths.rl_checkpoint);

  EncoderModel cs = EncoderModel::load(cfg.paths.cs_checkpoint);
  QseModel actor = QseModel::load(cfg.paths.qse_checkpoint);
  CriticModel critic(cfg.qse.hidden_dim, cfg.rl.critic_hidden, cfg.rl.critic_learning_rate,
                     derive_seed(cfg.seed, "critic"));

  RlDataset ds = make_rl_dataset(data, actor.query_vocab(), actor.desc_vocab(), cfg.corpus);
  if (ds.items.empty()) throw std::runtime_error("train-rl: no training triples carry a query");

  std::vector<std::pair<std::string, std::vector<int>>> snippets;
  for (const auto& t : data.split.train)
    snippets.emplace_back(t.id,
                          code_input_ids(t, cs.code_vocab(), cfg.corpus, cs.config().model_kind));
  CodeBank bank = CodeBank::build(cs, snippets);

  RlStageResult result;
  Rng rng(derive_seed(cfg.seed, "train-rl"));
  result.critic_pretrain_loss =
      pretrain_critic(critic, actor, ds, bank, cfg.rl, cs, cfg.rl.epochs_critic, rng);
  result.trace = train_rl(actor, critic, cs, ds, bank, cfg.rl, cfg.rl.epochs_joint, rng);

  actor.save(cfg.paths.rl_checkpoint);
  critic.save(cfg.paths.rl_checkpoint);
  save_reward_trace(result.trace, (fs::path(cfg.paths.rl_checkpoint) / "reward_trace.csv").string());
  std::uint64_t lineage =
      rl_lineage(cfg, cs_lineage(cfg, data.lineage), qse_lineage(cfg, data.lineage));
  nlohmann::json extra;
  extra["lineage"] = hex64(lineage);
  extra["config_hash"] = hex64(cfg.hash());
  write_json(extra, (fs::path(cfg.paths.rl_checkpoint) / "lineage.json").string());
  write_manifest(cfg, "train-rl", lineage, {cfg.paths.rl_checkpoint});
  return result;
}

// ---------------------------------------------------------------------------
// Index, pools, evaluation

inline SearchIndex build_index_stage(const RunConfig& cfg) {
  Prepared data = load_prepared(cfg);
  verify_lineage(cfg.paths.cs_checkpoint, cs_lineage(cfg, data.lineage), "build-index: CS");
  EncoderModel cs = EncoderModel::load(cfg.paths.cs_checkpoint);
  std::vector<IndexSnippet> snippets;
  for (const auto& t : data.all)
    snippets.push_back(
        {t.id, code_input_ids(t, cs.code_vocab(), cfg.corpus, cs.config().model_kind), t.code});
  SearchIndex idx = build_index(cs, snippets);
  idx.save(cfg.paths.index);
  write_manifest(cfg, "build-index", cs_lineage(cfg, data.lineage), {cfg.paths.index});
  return idx;
}

inline std::vector<EvalPool> build_pools_stage(const RunConfig& cfg) {
  Prepared data = load_prepared(cfg);
  std::vector<std::string> corpus_ids;
  for (const auto& t : data.all) corpus_ids.push_back(t.id);
  std::vector<EvalPool> pools = build_eval_pools(data.split.test, corpus_ids, cfg.seed);
  save_pools(pools, cfg.paths.pools);
  std::uint64_t lineage = pools_lineage(cfg, data.lineage);
  nlohmann::json meta;
  meta["lineage"] = hex64(lineage);
  write_json(meta, cfg.paths.pools + ".meta.json");
  write_manifest(cfg, "build-pools", lineage, {cfg.paths.pools});
  return pools;
}

// Loads the enricher appropriate for the mode: pre-RL checkpoint for no_rl,
// post-RL checkpoint for hybrid/enriched_only, none otherwise.
inline std::optional<QseModel> load_enricher(const RunConfig& cfg, const Prepared& data,
                                             RankMode mode) {
  if (mode == RankMode::base_only || mode == RankMode::qe_baseline) return std::nullopt;
  if (mode == RankMode::no_rl) {
    verify_lineage(cfg.paths.qse_checkpoint, qse_lineage(cfg, data.lineage), "evaluate: QSE");
    return QseModel::load(cfg.paths.qse_checkpoint);
  }
  std::uint64_t lineage =
      rl_lineage(cfg, cs_lineage(cfg, data.lineage), qse_lineage(cfg, data.lineage));
  verify_lineage(cfg.paths.rl_checkpoint, lineage, "evaluate: RL");
  return QseModel::load(cfg.paths.rl_checkpoint);
}

inline MetricReport evaluate_stage(const RunConfig& cfg, EvalField eval_field,
                                   const std::string& report_name = "") {
  Prepared data = load_prepared(cfg);
  verify_lineage(cfg.paths.cs_checkpoint, cs_lineage(cfg, data.lineage), "evaluate: CS");
  EncoderModel cs = EncoderModel::load(cfg.paths.cs_checkpoint);
  std::optional<QseModel> qse = load_enricher(cfg, data, cfg.hybrid.mode);

  if (!fs::exists(cfg.paths.pools))
    throw std::runtime_error("evaluate: pools file missing (run build-pools first)");
  nlohmann::json pools_meta = read_json(cfg.paths.pools + ".meta.json");
  if (pools_meta.value("lineage", "") != hex64(pools_lineage(cfg, data.lineage)))
    throw std::runtime_error("evaluate: pools were built under a different config; rerun build-pools");
  std::vector<EvalPool> pools = load_pools(cfg.paths.pools);

  std::optional<SynonymLexicon> lexicon;
  if (cfg.hybrid.mode == RankMode::qe_baseline) {
    if (cfg.paths.lexicon.empty())
      throw std::runtime_error("evaluate: qe_baseline mode needs paths.lexicon");
    lexicon = SynonymLexicon::load(cfg.paths.lexicon);
  }

  std::unordered_map<std::string, const Triple*> by_id;
  for (const auto& t : data.all) by_id[t.id] = &t;
  CodeBank bank;
  auto ensure_in_bank = [&](const std::string& id) {
    if (bank.contains(id)) return;
    auto it = by_id.find(id);
    if (it == by_id.end()) throw std::runtime_error("evaluate: pool id not in corpus: " + id);
    bank.add(id, cs.embed_vec(TowerKind::code, code_input_ids(*it->second, cs.code_vocab(),
                                                              cfg.corpus,
                                                              cs.config().model_kind)));
  };
  for (const auto& p : pools) {
    ensure_in_bank(p.positive_id);
    for (const auto& id : p.negatives) ensure_in_bank(id);
  }

  MetricReport rep = evaluate_testset(cs, qse ? &*qse : nullptr, pools, data.split.test, bank,
                                      cfg.hybrid, eval_field, lexicon ? &*lexicon : nullptr,
                                      cfg.corpus);
  rep.metadata["config_hash"] = hex64(cfg.hash());
  rep.metadata["seed"] = cfg.seed;

  fs::create_directories(cfg.paths.reports_dir);
  std::string name = report_name.empty()
                         ? "report_" + to_string(cfg.hybrid.mode) + "_" + to_string(eval_field) +
                               ".json"
                         : report_name;
  std::string report_path = (fs::path(cfg.paths.reports_dir) / name).string();
  write_json(rep.to_json(), report_path);
  write_manifest(cfg, "evaluate", cs_lineage(cfg, data.lineage), {report_path});
  return rep;
}

// Grid sweep over beta (evaluate-only) or alpha (retrains the RL stage per
// value). Emits one CSV row per value.
inline void sweep_stage(const RunConfig& cfg, const std::string& param,
                        const std::vector<double>& values, const std::string& csv_path,
                        EvalField eval_field = EvalField::query) {
  if (param != "alpha" && param != "beta")
    throw std::invalid_argument("sweep: param must be alpha or beta");
  std::ofstream out(csv_path, std::ios::binary);
  if (!out) throw std::runtime_error("sweep: cannot open " + csv_path);
  out << "param,value,r1,r5,r10,mrr\n";
  for (double v : values) {
    RunConfig run = cfg;
    if (param == "beta") {
      run.hybrid.beta = v;
      run.hybrid.mode = RankMode::hybrid;
    } else {
      run.rl.reward.alpha = v;
      run.hybrid.mode = RankMode::hybrid;
      char tag[32];
      std::snprintf(tag, sizeof(tag), "alpha_%g", v);
      run.paths.rl_checkpoint =
          (fs::path(cfg.paths.rl_checkpoint).string() + "_sweep_") + tag;
      train_rl_stage(run);
    }
    MetricReport rep = evaluate_stage(run, eval_field,
                                      "sweep_" + param + "_" + std::to_string(v) + ".json");
    char row[256];
    std::snprintf(row, sizeof(row), "%s,%.6g,%.9f,%.9f,%.9f,%.9f\n", param.c_str(), v,
                  rep.r_at.at(1), rep.r_at.at(5), rep.r_at.at(10), rep.mrr_value);
    out << row;
  }
  write_manifest(cfg, "sweep", cfg.hash(), {csv_path});
}

struct DecodeRow {
  std::string query;
  std::string enriched_query;
  double log_prob = 0;
};

// Batch enrichment of the test-split queries with the chosen enricher
// checkpoint.
inline std::vector<DecodeRow> decode_stage(const RunConfig& cfg, bool use_rl,
                                           const std::string& out_path) {
  Prepared data = load_prepared(cfg);
  const std::string& dir = use_rl ? cfg.paths.rl_checkpoint : cfg.paths.qse_checkpoint;
  if (use_rl)
    verify_lineage(dir, rl_lineage(cfg, cs_lineage(cfg, data.lineage),
                                   qse_lineage(cfg, data.lineage)),
                   "decode: RL");
  else
    verify_lineage(dir, qse_lineage(cfg, data.lineage), "decode: QSE");
  QseModel model = QseModel::load(dir);

  std::vector<DecodeRow> rows;
  std::ofstream out(out_path, std::ios::binary);
  if (!out) throw std::runtime_error("decode: cannot open " + out_path);
  for (const auto& t : data.split.test) {
    auto q = query_tokens(t);
    if (!q || q->empty()) continue;
    std::vector<int> ids = encode_tokens(*q, model.query_vocab(), true, cfg.corpus.max_query_len);
    GenerationResult gen = greedy_decode(model, ids);
    DecodeRow row;
    row.query = *t.query;
    row.enriched_query = join_tokens(decode_tokens(gen.tokens, model.desc_vocab(), true));
    for (double lp : gen.logprobs) row.log_prob += lp;
    nlohmann::json j{{"query", row.query},
                     {"enriched_query", row.enriched_query},
                     {"log_prob", row.log_prob}};
    out << j.dump() << '\n';
    rows.push_back(std::move(row));
  }
  write_manifest(cfg, "decode", use_rl ? rl_lineage(cfg, cs_lineage(cfg, data.lineage),
                                                    qse_lineage(cfg, data.lineage))
                                       : qse_lineage(cfg, data.lineage),
                 {out_path});
  return rows;
}

}  // namespace qcs::pipeline
