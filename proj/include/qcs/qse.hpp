#pragma once

#include <filesystem>
#include <fstream>
#include <stdexcept>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "qcs/nn.hpp"
#include "qcs/rng.hpp"
#include "qcs/vocab.hpp"

namespace qcs {

struct Seq2SeqConfig {
  int embed_dim = 128;
  int hidden_dim = 256;
  int max_decode_len = 60;
  double learning_rate = 1e-3;
  int epochs = 20;
  int batch_size = 32;
  std::uint64_t seed = 0;

  void validate() const {
    if (max_decode_len < 2) throw std::invalid_argument("Seq2SeqConfig: max_decode_len must be >= 2");
    if (embed_dim < 1 || hidden_dim < 1)
      throw std::invalid_argument("Seq2SeqConfig: dims must be >= 1");
    if (batch_size < 1) throw std::invalid_argument("Seq2SeqConfig: batch_size must be >= 1");
  }
};

inline void to_json(nlohmann::json& j, const Seq2SeqConfig& c) {
  j = nlohmann::json{{"embed_dim", c.embed_dim},     {"hidden_dim", c.hidden_dim},
                     {"max_decode_len", c.max_decode_len}, {"learning_rate", c.learning_rate},
                     {"epochs", c.epochs},           {"batch_size", c.batch_size},
                     {"seed", c.seed}};
}
inline void from_json(const nlohmann::json& j, Seq2SeqConfig& c) {
  c.embed_dim = j.value("embed_dim", 128);
  c.hidden_dim = j.value("hidden_dim", 256);
  c.max_decode_len = j.value("max_decode_len", 60);
  c.learning_rate = j.value("learning_rate", 1e-3);
  c.epochs = j.value("epochs", 20);
  c.batch_size = j.value("batch_size", 32);
  c.seed = j.value("seed", 0);
}

enum class DecodeMode { greedy, sampled };

struct GenerationResult {
  std::vector<int> tokens;        // ends in EOS unless truncated at max_decode_len
  std::vector<double> logprobs;   // one per emitted token, all <= 0
  DecodeMode mode = DecodeMode::greedy;
};

// Bi-directional LSTM encoder over the query with an additive-attention LSTM
// decoder over the description vocabulary.
//
// Wiring: attention scores are computed against the previous decoder hidden
// state; the context vector is concatenated with the previous-token embedding
// as the decoder input; the output projection reads the decoder hidden state
// alone, softmax(W h_t + b).
class QseModel {
 public:
  QseModel(Seq2SeqConfig cfg, Vocabulary vocab_query, Vocabulary vocab_desc)
      : cfg_(std::move(cfg)),
        vocab_query_(std::move(vocab_query)),
        vocab_desc_(std::move(vocab_desc)) {
    cfg_.validate();
    const int e = cfg_.embed_dim, h = cfg_.hidden_dim;
    src_emb_ = params_.add("src.emb", e, static_cast<int>(vocab_query_.size()));
    enc_fwd_ = nn::LstmCell(params_, "enc.fwd", e, h);
    enc_bwd_ = nn::LstmCell(params_, "enc.bwd", e, h);
    bridge_h_ = nn::Dense(params_, "bridge.h", 2 * h, h);
    bridge_c_ = nn::Dense(params_, "bridge.c", 2 * h, h);
    tgt_emb_ = params_.add("tgt.emb", e, static_cast<int>(vocab_desc_.size()));
    attn_wq_ = params_.add("attn.wq", h, h);
    attn_ue_ = params_.add("attn.ue", h, 2 * h);
    attn_v_ = params_.add("attn.v", h, 1);
    dec_ = nn::LstmCell(params_, "dec", e + 2 * h, h);
    out_ = nn::Dense(params_, "out", h, static_cast<int>(vocab_desc_.size()));
    Rng rng(derive_seed(cfg_.seed, "qse-init"));
    params_.init_uniform(rng, 0.1);
  }

  const Seq2SeqConfig& config() const { return cfg_; }
  const Vocabulary& query_vocab() const { return vocab_query_; }
  const Vocabulary& desc_vocab() const { return vocab_desc_; }
  nn::ParamStore& params() { return params_; }
  const nn::ParamStore& params() const { return params_; }

  struct Encoded {
    nn::Var enc_mat;  // (2H x L) per-position encoder outputs
    nn::LstmState init;
  };

  Encoded encode(const std::vector<int>& query_ids) const {
    if (query_ids.empty()) throw std::invalid_argument("QseModel::encode: empty query");
    std::vector<nn::Var> xs;
    xs.reserve(query_ids.size());
    for (int id : query_ids) xs.push_back(ad::gather_cols(src_emb_, {id}));
    nn::BiLstmOut run = nn::bilstm_run(enc_fwd_, enc_bwd_, xs);
    Encoded enc;
    enc.enc_mat = ad::hcat(run.outputs);
    nn::Var finals = ad::vcat({run.final_fwd, run.final_bwd});
    enc.init.h = ad::tanh_(bridge_h_(finals));
    enc.init.c = ad::tanh_(bridge_c_(finals));
    return enc;
  }

  struct StepOut {
    nn::LstmState state;
    nn::Var logits;        // (Vd x 1)
    nn::Var attn_weights;  // (L x 1)
  };

  // One decoder step conditioned on the previously emitted token. With
  // mask_specials the PAD and BOS logits are pushed to -inf so generation can
  // never produce them.
  StepOut decode_step(const Encoded& enc, const nn::LstmState& prev, int prev_token,
                      bool mask_specials) const {
    nn::Var x = ad::gather_cols(tgt_emb_, {prev_token});
    nn::Var t = ad::tanh_(ad::add_broadcast_col(ad::matmul(attn_ue_, enc.enc_mat),
                                                ad::matmul(attn_wq_, prev.h)));
    nn::Var scores = ad::transpose(ad::matmul(ad::transpose(attn_v_), t));  // (L x 1)
    nn::Var weights = ad::softmax_col(scores);
    nn::Var context = ad::matmul(enc.enc_mat, weights);  // (2H x 1)
    StepOut out;
    out.state = dec_.step(ad::vcat({x, context}), prev);
    nn::Var logits = out_(out.state.h);
    if (mask_specials) {
      nn::Mat m = nn::Mat::Zero(logits->value.rows(), 1);
      m(Vocabulary::kPad, 0) = -1e30;
      m(Vocabulary::kBos, 0) = -1e30;
      logits = ad::add(logits, ad::constant(m));
    }
    out.logits = logits;
    out.attn_weights = weights;
    return out;
  }

  std::uint64_t fingerprint() const {
    std::vector<char> blob = nn::serialize_params(params_);
    return fnv1a64(blob.data(), blob.size());
  }

  void save(const std::string& dir) const {
    namespace fs = std::filesystem;
    fs::create_directories(dir);
    nlohmann::json meta;
    meta["format_version"] = kQseCheckpointVersion;
    meta["qse"] = cfg_;
    meta["fingerprint"] = fingerprint();
    std::ofstream out(fs::path(dir) / "config.json");
    if (!out) throw std::runtime_error("QseModel::save: cannot write " + dir);
    out << meta.dump(2) << '\n';
    vocab_query_.save((fs::path(dir) / "vocab_query.txt").string());
    vocab_desc_.save((fs::path(dir) / "vocab_desc.txt").string());
    nn::write_file((fs::path(dir) / "params.bin").string(), nn::serialize_params(params_));
  }

  static QseModel load(const std::string& dir) {
    namespace fs = std::filesystem;
    std::ifstream in(fs::path(dir) / "config.json");
    if (!in) throw std::runtime_error("QseModel::load: missing checkpoint at " + dir);
    nlohmann::json meta = nlohmann::json::parse(in);
    if (meta.value("format_version", -1) != static_cast<int>(kQseCheckpointVersion))
      throw std::runtime_error("QseModel::load: checkpoint format version mismatch in " + dir);
    Seq2SeqConfig cfg = meta.at("qse").get<Seq2SeqConfig>();
    Vocabulary vq = Vocabulary::load((fs::path(dir) / "vocab_query.txt").string());
    Vocabulary vd = Vocabulary::load((fs::path(dir) / "vocab_desc.txt").string());
    QseModel m(cfg, std::move(vq), std::move(vd));
    nn::deserialize_params(m.params_, nn::read_file((fs::path(dir) / "params.bin").string()));
    return m;
  }

  static constexpr std::uint32_t kQseCheckpointVersion = 1;

 private:
  Seq2SeqConfig cfg_;
  Vocabulary vocab_query_, vocab_desc_;
  nn::ParamStore params_;
  nn::Var src_emb_, tgt_emb_, attn_wq_, attn_ue_, attn_v_;
  nn::LstmCell enc_fwd_, enc_bwd_, dec_;
  nn::Dense bridge_h_, bridge_c_, out_;
};

namespace detail {

// log softmax(v)[k] on plain vectors; mirrors ad::log_softmax_pick.
inline double log_softmax_at(const nn::Vec& v, int k) {
  double m = v.maxCoeff();
  double lse = m + std::log((v.array() - m).exp().sum());
  return v(k) - lse;
}

}  // namespace detail

// Mean per-token negative log-likelihood of the target description under
// teacher forcing. Both sequences must be BOS/EOS framed; PAD targets are
// excluded from the mean.
inline nn::Var teacher_forcing_loss_node(const QseModel& model, const std::vector<int>& query_ids,
                                         const std::vector<int>& target_ids) {
  if (query_ids.size() < 2 || query_ids.front() != Vocabulary::kBos ||
      query_ids.back() != Vocabulary::kEos)
    throw std::invalid_argument("teacher_forcing_loss: query must be BOS/EOS framed");
  if (target_ids.size() < 2 || target_ids.front() != Vocabulary::kBos ||
      target_ids.back() != Vocabulary::kEos)
    throw std::invalid_argument("teacher_forcing_loss: target must be BOS/EOS framed");

  QseModel::Encoded enc = model.encode(query_ids);
  nn::LstmState state = enc.init;
  std::vector<nn::Var> terms;
  terms.reserve(target_ids.size());
  for (std::size_t t = 1; t < target_ids.size(); ++t) {
    int target = target_ids[t];
    QseModel::StepOut step = model.decode_step(enc, state, target_ids[t - 1], false);
    state = step.state;
    if (target == Vocabulary::kPad) continue;
    terms.push_back(ad::log_softmax_pick(step.logits, target));
  }
  if (terms.empty()) throw std::invalid_argument("teacher_forcing_loss: no target positions");
  return ad::scale(ad::add_many(terms), -1.0 / static_cast<double>(terms.size()));
}

inline double teacher_forcing_loss(const QseModel& model, const std::vector<int>& query_ids,
                                   const std::vector<int>& target_ids) {
  double v = teacher_forcing_loss_node(model, query_ids, target_ids)->scalar();
  if (!std::isfinite(v)) throw std::runtime_error("teacher_forcing_loss: non-finite loss");
  return v;
}

// Stepwise-argmax decoding; deterministic, ties resolved to the lowest index.
inline GenerationResult greedy_decode(const QseModel& model, const std::vector<int>& query_ids) {
  if (query_ids.empty()) throw std::invalid_argument("greedy_decode: empty query");
  QseModel::Encoded enc = model.encode(query_ids);
  nn::LstmState state = enc.init;
  GenerationResult out;
  out.mode = DecodeMode::greedy;
  int prev = Vocabulary::kBos;
  for (int t = 0; t < model.config().max_decode_len; ++t) {
    QseModel::StepOut step = model.decode_step(enc, state, prev, true);
    state = step.state;
    nn::Vec logits = step.logits->value.col(0);
    int best = 0;
    for (Eigen::Index i = 1; i < logits.size(); ++i)
      if (logits(i) > logits(best)) best = static_cast<int>(i);
    out.tokens.push_back(best);
    out.logprobs.push_back(detail::log_softmax_at(logits, best));
    prev = best;
    if (best == Vocabulary::kEos) break;
  }
  return out;
}

// Draws tokens from the tempered softmax; per-step log-probability of the
// drawn token is recorded under the same tempered distribution.
inline GenerationResult sample_decode(const QseModel& model, const std::vector<int>& query_ids,
                                      Rng& rng, double temperature) {
  if (query_ids.empty()) throw std::invalid_argument("sample_decode: empty query");
  if (temperature <= 0) throw std::invalid_argument("sample_decode: temperature must be > 0");
  QseModel::Encoded enc = model.encode(query_ids);
  nn::LstmState state = enc.init;
  GenerationResult out;
  out.mode = DecodeMode::sampled;
  int prev = Vocabulary::kBos;
  for (int t = 0; t < model.config().max_decode_len; ++t) {
    QseModel::StepOut step = model.decode_step(enc, state, prev, true);
    state = step.state;
    nn::Vec scaled = step.logits->value.col(0) * (1.0 / temperature);
    double m = scaled.maxCoeff();
    nn::Vec probs = (scaled.array() - m).exp();
    probs /= probs.sum();
    double u = rng.uniform();
    int drawn = static_cast<int>(probs.size()) - 1;
    double acc = 0;
    for (Eigen::Index i = 0; i < probs.size(); ++i) {
      acc += probs(i);
      if (u < acc) {
        drawn = static_cast<int>(i);
        break;
      }
    }
    out.tokens.push_back(drawn);
    out.logprobs.push_back(detail::log_softmax_at(scaled, drawn));
    prev = drawn;
    if (drawn == Vocabulary::kEos) break;
  }
  return out;
}

struct QsePair {
  std::string id;
  std::vector<int> query_ids;   // BOS/EOS framed
  std::vector<int> target_ids;  // BOS/EOS framed description
};

class QseTrainer {
 public:
  explicit QseTrainer(QseModel& model)
      : model_(model), adam_(model.params(), model.config().learning_rate) {}

  nn::Adam& optimizer() { return adam_; }

  double train_epoch(const std::vector<QsePair>& pairs, Rng& rng) {
    if (pairs.empty()) throw std::invalid_argument("train_epoch: no pairs");
    std::vector<std::size_t> order(pairs.size());
    for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
    rng.shuffle(order);

    const std::size_t batch = static_cast<std::size_t>(model_.config().batch_size);
    double total = 0;
    for (std::size_t start = 0; start < order.size(); start += batch) {
      std::size_t end = std::min(order.size(), start + batch);
      std::vector<nn::Var> losses;
      for (std::size_t k = start; k < end; ++k) {
        const QsePair& p = pairs[order[k]];
        losses.push_back(teacher_forcing_loss_node(model_, p.query_ids, p.target_ids));
      }
      nn::Var batch_loss = ad::scale(ad::add_many(losses), 1.0 / static_cast<double>(losses.size()));
      if (!std::isfinite(batch_loss->scalar()))
        throw std::runtime_error("train_epoch: non-finite loss, aborting epoch");
      for (const auto& l : losses) total += l->scalar();
      adam_.zero_grad();
      ad::backward(batch_loss);
      adam_.step();
    }
    return total / static_cast<double>(pairs.size());
  }

 private:
  QseModel& model_;
  nn::Adam adam_;
};

}  // namespace qcs
