#include <cstdio>
#include <iostream>
#include <string>
#include <vector>

#include "CLI11.hpp"

#include "qcs/config.hpp"
#include "qcs/pipeline.hpp"

namespace {

qcs::RunConfig load_config(const std::string& path, const std::vector<std::string>& overrides,
                           std::uint64_t seed_override, bool seed_given) {
  nlohmann::json j;
  if (!path.empty()) {
    std::ifstream in(path);
    if (!in) throw std::runtime_error("cannot open config file " + path);
    j = nlohmann::json::parse(in);
  }
  for (const auto& o : overrides) qcs::apply_override(j, o);
  if (seed_given) j["seed"] = seed_override;
  return qcs::RunConfig::from_json_obj(j);
}

std::vector<double> parse_values(const std::string& csv) {
  std::vector<double> out;
  std::size_t start = 0;
  while (start <= csv.size()) {
    std::size_t comma = csv.find(',', start);
    std::string part = csv.substr(start, comma == std::string::npos ? std::string::npos
                                                                    : comma - start);
    if (!part.empty()) out.push_back(std::stod(part));
    if (comma == std::string::npos) break;
    start = comma + 1;
  }
  if (out.empty()) throw std::invalid_argument("no values given");
  return out;
}

void print_report(const qcs::MetricReport& rep) {
  std::printf("n_queries=%zu  R@1=%.4f  R@5=%.4f  R@10=%.4f  MRR=%.4f\n", rep.n_queries,
              rep.r_at.at(1), rep.r_at.at(5), rep.r_at.at(10), rep.mrr_value);
}

void run_search_repl(const qcs::RunConfig& cfg, std::size_t top_k) {
  namespace fs = std::filesystem;
  qcs::pipeline::Prepared data = qcs::pipeline::load_prepared(cfg);
  qcs::pipeline::verify_lineage(cfg.paths.cs_checkpoint,
                                qcs::pipeline::cs_lineage(cfg, data.lineage), "search: CS");
  qcs::EncoderModel cs = qcs::EncoderModel::load(cfg.paths.cs_checkpoint);
  if (!fs::exists(cfg.paths.index))
    throw std::runtime_error("search: index missing (run build-index first)");
  qcs::SearchIndex index = qcs::SearchIndex::load(cfg.paths.index);
  if (index.fingerprint != cs.fingerprint())
    throw std::runtime_error("search: index fingerprint does not match the CS checkpoint");
  std::optional<qcs::QseModel> qse = qcs::pipeline::load_enricher(cfg, data, cfg.hybrid.mode);
  std::optional<qcs::SynonymLexicon> lexicon;
  if (cfg.hybrid.mode == qcs::RankMode::qe_baseline) {
    if (cfg.paths.lexicon.empty()) throw std::runtime_error("search: qe_baseline needs paths.lexicon");
    lexicon = qcs::SynonymLexicon::load(cfg.paths.lexicon);
  }

  std::string line;
  std::cout << "query> " << std::flush;
  while (std::getline(std::cin, line)) {
    qcs::TokenStream q = qcs::tokenize_identifier(line, qcs::TokenSource::query);
    if (q.empty()) {
      std::cout << "query> " << std::flush;
      continue;
    }
    try {
      if (qse) {
        std::vector<int> ids =
            qcs::encode_tokens(q, qse->query_vocab(), true, cfg.corpus.max_query_len);
        qcs::GenerationResult gen = qcs::greedy_decode(*qse, ids);
        std::cout << "enriched: "
                  << qcs::join_tokens(qcs::decode_tokens(gen.tokens, qse->desc_vocab(), true))
                  << "\n";
      }
      auto results = qcs::search(index, cs, qse ? &*qse : nullptr, q, cfg.hybrid, top_k,
                                 lexicon ? &*lexicon : nullptr, cfg.corpus);
      for (std::size_t i = 0; i < results.size(); ++i)
        std::printf("%2zu. %-16s %.6f\n", i + 1, results[i].first.c_str(), results[i].second);
    } catch (const std::exception& e) {
      std::cout << "error: " << e.what() << "\n";
    }
    std::cout << "query> " << std::flush;
  }
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"query-enriched neural code search toolkit"};
  app.require_subcommand(1);

  std::string config_path;
  std::vector<std::string> overrides;
  std::uint64_t seed_override = 0;
  app.add_option("-c,--config", config_path, "run config JSON");
  app.add_option("--set", overrides, "override a config field, e.g. --set encoder.epochs=3");
  auto* seed_opt = app.add_option("--seed", seed_override, "override the global seed");

  auto* cmd_prepare = app.add_subcommand("prepare", "ingest or synthesize, split, build vocabularies");
  std::size_t synthetic_n = 0;
  cmd_prepare->add_option("--synthetic", synthetic_n, "generate a synthetic corpus of N triples");

  auto* cmd_train_cs = app.add_subcommand("train-cs", "train the code-search encoder");
  auto* cmd_train_qse = app.add_subcommand("train-qse", "train the query enricher (teacher forcing)");
  auto* cmd_train_rl = app.add_subcommand("train-rl", "actor-critic fine-tuning of the enricher");
  auto* cmd_index = app.add_subcommand("build-index", "embed the corpus into a search index");
  auto* cmd_pools = app.add_subcommand("build-pools", "fix evaluation pools for the test split");

  auto* cmd_eval = app.add_subcommand("evaluate", "fixed-pool retrieval evaluation");
  std::string eval_field = "query", eval_mode, report_name;
  double beta_flag = -1;
  cmd_eval->add_option("--eval-field", eval_field, "query or description");
  cmd_eval->add_option("--mode", eval_mode,
                       "base_only, enriched_only, hybrid, qe_baseline or no_rl");
  cmd_eval->add_option("--beta", beta_flag, "hybrid weight in [0,1]");
  cmd_eval->add_option("--report-name", report_name, "report file name");

  auto* cmd_sweep = app.add_subcommand("sweep", "grid sweep over alpha or beta");
  std::string sweep_param, sweep_values, sweep_out = "sweep.csv", sweep_field = "query";
  cmd_sweep->add_option("--param", sweep_param, "alpha or beta")->required();
  cmd_sweep->add_option("--values", sweep_values, "comma-separated values")->required();
  cmd_sweep->add_option("--output", sweep_out, "CSV output path");
  cmd_sweep->add_option("--eval-field", sweep_field, "query or description");

  auto* cmd_search = app.add_subcommand("search", "interactive retrieval REPL");
  std::size_t top_k = 10;
  cmd_search->add_option("--top-k", top_k, "results per query");

  auto* cmd_decode = app.add_subcommand("decode", "batch query enrichment to JSONL");
  std::string enricher = "rl", decode_out;
  cmd_decode->add_option("--enricher", enricher, "rl or qse checkpoint");
  cmd_decode->add_option("--output", decode_out, "output JSONL path");

  CLI11_PARSE(app, argc, argv);

  try {
    qcs::RunConfig cfg = load_config(config_path, overrides, seed_override, !seed_opt->empty());
    cfg.validate();

    if (cmd_prepare->parsed()) {
      qcs::pipeline::Prepared p = qcs::pipeline::prepare(cfg, synthetic_n);
      std::printf("prepared %zu triples (train %zu / valid %zu / test %zu)\n", p.all.size(),
                  p.split.train.size(), p.split.valid.size(), p.split.test.size());
    } else if (cmd_train_cs->parsed()) {
      auto r = qcs::pipeline::train_cs(cfg);
      std::printf("train-cs done: final loss %.6f, valid MRR %.4f\n", r.final_train_loss,
                  r.final_valid_mrr);
    } else if (cmd_train_qse->parsed()) {
      auto r = qcs::pipeline::train_qse(cfg);
      std::printf("train-qse done: final loss %.6f\n", r.final_train_loss);
    } else if (cmd_train_rl->parsed()) {
      auto r = qcs::pipeline::train_rl_stage(cfg);
      if (!r.trace.empty())
        std::printf("train-rl done: mean reward %.4f -> %.4f over %zu epochs\n",
                    r.trace.front().mean_reward, r.trace.back().mean_reward, r.trace.size());
      else
        std::printf("train-rl done (no joint epochs configured)\n");
    } else if (cmd_index->parsed()) {
      qcs::SearchIndex idx = qcs::pipeline::build_index_stage(cfg);
      std::printf("indexed %zu snippets (dim %d)\n", idx.entries.size(), idx.dim);
    } else if (cmd_pools->parsed()) {
      auto pools = qcs::pipeline::build_pools_stage(cfg);
      std::size_t sz = pools.empty() ? 0 : pools.front().negatives.size();
      std::printf("built %zu pools with %zu negatives each\n", pools.size(), sz);
    } else if (cmd_eval->parsed()) {
      if (!eval_mode.empty()) cfg.hybrid.mode = qcs::rank_mode_from_string(eval_mode);
      if (beta_flag >= 0) cfg.hybrid.beta = beta_flag;
      cfg.hybrid.validate();
      qcs::MetricReport rep =
          qcs::pipeline::evaluate_stage(cfg, qcs::eval_field_from_string(eval_field), report_name);
      print_report(rep);
    } else if (cmd_sweep->parsed()) {
      qcs::pipeline::sweep_stage(cfg, sweep_param, parse_values(sweep_values), sweep_out,
                                 qcs::eval_field_from_string(sweep_field));
      std::printf("sweep written to %s\n", sweep_out.c_str());
    } else if (cmd_search->parsed()) {
      run_search_repl(cfg, top_k);
    } else if (cmd_decode->parsed()) {
      if (enricher != "rl" && enricher != "qse")
        throw std::invalid_argument("--enricher must be rl or qse");
      std::string out = decode_out.empty()
                            ? (std::filesystem::path(cfg.paths.reports_dir) / "decode.jsonl").string()
                            : decode_out;
      std::filesystem::create_directories(std::filesystem::path(out).parent_path().empty()
                                              ? "."
                                              : std::filesystem::path(out).parent_path().string());
      auto rows = qcs::pipeline::decode_stage(cfg, enricher == "rl", out);
      std::printf("decoded %zu queries to %s\n", rows.size(), out.c_str());
    }
  } catch (const std::exception& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 1;
  }
  return 0;
}
