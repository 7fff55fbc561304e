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

enum class ModelKind { bag_attention, recurrent };

inline std::string to_string(ModelKind k) {
  return k == ModelKind::bag_attention ? "bag_attention" : "recurrent";
}
inline ModelKind model_kind_from_string(const std::string& s) {
  if (s == "bag_attention") return ModelKind::bag_attention;
  if (s == "recurrent") return ModelKind::recurrent;
  throw std::invalid_argument("unknown model kind: " + s);
}

struct EncoderConfig {
  ModelKind model_kind = ModelKind::bag_attention;
  int embed_dim = 128;
  int hidden_dim = 256;
  double margin = 0.05;
  double learning_rate = 1e-3;
  double lr_decay = 0.5;
  int epochs = 120;
  int batch_size = 32;
  std::uint64_t seed = 0;

  void validate() const {
    if (margin <= 0) throw std::invalid_argument("EncoderConfig: margin must be > 0");
    if (lr_decay <= 0 || lr_decay > 1)
      throw std::invalid_argument("EncoderConfig: lr_decay must be in (0, 1]");
    if (embed_dim < 1 || hidden_dim < 1)
      throw std::invalid_argument("EncoderConfig: dims must be >= 1");
    if (batch_size < 1) throw std::invalid_argument("EncoderConfig: batch_size must be >= 1");
  }
};

inline void to_json(nlohmann::json& j, const EncoderConfig& c) {
  j = nlohmann::json{{"model_kind", to_string(c.model_kind)},
                     {"embed_dim", c.embed_dim},
                     {"hidden_dim", c.hidden_dim},
                     {"margin", c.margin},
                     {"learning_rate", c.learning_rate},
                     {"lr_decay", c.lr_decay},
                     {"epochs", c.epochs},
                     {"batch_size", c.batch_size},
                     {"seed", c.seed}};
}
inline void from_json(const nlohmann::json& j, EncoderConfig& c) {
  c.model_kind = model_kind_from_string(j.value("model_kind", "bag_attention"));
  c.embed_dim = j.value("embed_dim", 128);
  c.hidden_dim = j.value("hidden_dim", 256);
  c.margin = j.value("margin", 0.05);
  c.learning_rate = j.value("learning_rate", 1e-3);
  c.lr_decay = j.value("lr_decay", 0.5);
  c.epochs = j.value("epochs", 120);
  c.batch_size = j.value("batch_size", 32);
  c.seed = j.value("seed", 0);
}

enum class TowerKind { code, text };

// Cosine similarity of two embeddings; 0 when either norm is below 1e-12.
inline double similarity(const nn::Vec& a, const nn::Vec& b) { return ad::cosine_value(a, b); }

// max(0, margin - sim_pos + sim_neg).
inline double ranking_loss(double sim_pos, double sim_neg, double margin) {
  if (margin <= 0) throw std::invalid_argument("ranking_loss: margin must be > 0");
  double v = margin - sim_pos + sim_neg;
  return v > 0 ? v : 0.0;
}

// Uniform draw over corpus_ids excluding positive_id.
inline std::string sample_negative(const std::vector<std::string>& corpus_ids,
                                   const std::string& positive_id, Rng& rng) {
  if (corpus_ids.size() < 2)
    throw std::invalid_argument("sample_negative: need at least 2 candidate ids");
  std::size_t pos = corpus_ids.size();
  for (std::size_t i = 0; i < corpus_ids.size(); ++i)
    if (corpus_ids[i] == positive_id) {
      pos = i;
      break;
    }
  if (pos == corpus_ids.size()) return corpus_ids[rng.below(corpus_ids.size())];
  std::size_t j = rng.below(corpus_ids.size() - 1);
  if (j >= pos) ++j;
  return corpus_ids[j];
}

namespace detail {

struct BagAttentionTower {
  nn::Var emb;   // (d x V)
  nn::Var attn;  // (d x 1)

  void build(nn::ParamStore& store, const std::string& prefix, int dim, int vocab) {
    emb = store.add(prefix + ".emb", dim, vocab);
    attn = store.add(prefix + ".attn", dim, 1);
  }

  // Attention-pooled bag of embeddings.
  nn::Var forward(const std::vector<int>& ids) const {
    nn::Var e = ad::gather_cols(emb, ids);                       // (d x L)
    nn::Var scores = ad::transpose(ad::matmul(ad::transpose(attn), e));  // (L x 1)
    nn::Var w = ad::softmax_col(scores);
    return ad::matmul(e, w);  // (d x 1)
  }
};

struct RecurrentTower {
  nn::Var emb;  // (e x V)
  nn::LstmCell fwd, bwd;
  nn::Dense proj;  // (d x 2H)

  void build(nn::ParamStore& store, const std::string& prefix, int embed_dim, int hidden_dim,
             int out_dim, int vocab) {
    emb = store.add(prefix + ".emb", embed_dim, vocab);
    fwd = nn::LstmCell(store, prefix + ".fwd", embed_dim, hidden_dim);
    bwd = nn::LstmCell(store, prefix + ".bwd", embed_dim, hidden_dim);
    proj = nn::Dense(store, prefix + ".proj", 2 * hidden_dim, out_dim);
  }

  // Final forward/backward states concatenated and projected to the joint
  // space.
  nn::Var forward(const std::vector<int>& ids) const {
    std::vector<nn::Var> xs;
    xs.reserve(ids.size());
    for (int id : ids) xs.push_back(ad::gather_cols(emb, {id}));
    nn::BiLstmOut run = nn::bilstm_run(fwd, bwd, xs);
    return proj(ad::vcat({run.final_fwd, run.final_bwd}));
  }
};

}  // namespace detail

inline constexpr std::uint32_t kCheckpointVersion = 1;

// Two-tower embedding model over code and natural-language token sequences.
class EncoderModel {
 public:
  EncoderModel(EncoderConfig cfg, Vocabulary vocab_code, Vocabulary vocab_text)
      : cfg_(std::move(cfg)), vocab_code_(std::move(vocab_code)), vocab_text_(std::move(vocab_text)) {
    cfg_.validate();
    if (cfg_.model_kind == ModelKind::bag_attention) {
      bag_code_.build(params_, "code", cfg_.embed_dim, static_cast<int>(vocab_code_.size()));
      bag_text_.build(params_, "text", cfg_.embed_dim, static_cast<int>(vocab_text_.size()));
    } else {
      rec_code_.build(params_, "code", cfg_.embed_dim, cfg_.hidden_dim, cfg_.embed_dim,
                      static_cast<int>(vocab_code_.size()));
      rec_text_.build(params_, "text", cfg_.embed_dim, cfg_.hidden_dim, cfg_.embed_dim,
                      static_cast<int>(vocab_text_.size()));
    }
    Rng rng(derive_seed(cfg_.seed, "encoder-init"));
    params_.init_uniform(rng, 0.1);
  }

  const EncoderConfig& config() const { return cfg_; }
  const Vocabulary& code_vocab() const { return vocab_code_; }
  const Vocabulary& text_vocab() const { return vocab_text_; }
  nn::ParamStore& params() { return params_; }
  const nn::ParamStore& params() const { return params_; }

  // Embeds a validity-masked index sequence; masked positions contribute
  // nothing (they are filtered out before the tower runs).
  nn::Var embed(TowerKind tower, const std::vector<int>& indices,
                const std::vector<int>& mask) const {
    if (indices.empty()) throw std::invalid_argument("embed: empty index sequence");
    if (mask.size() != indices.size())
      throw std::invalid_argument("embed: mask length differs from indices");
    std::vector<int> kept;
    kept.reserve(indices.size());
    for (std::size_t i = 0; i < indices.size(); ++i)
      if (mask[i] != 0) kept.push_back(indices[i]);
    if (kept.empty()) throw std::invalid_argument("embed: all positions masked");
    return forward(tower, kept);
  }

  nn::Var embed(TowerKind tower, const std::vector<int>& indices) const {
    return embed(tower, indices, std::vector<int>(indices.size(), 1));
  }

  nn::Vec embed_vec(TowerKind tower, const std::vector<int>& indices) const {
    return embed(tower, indices)->value.col(0);
  }

  // Margin ranking loss node for one <description, positive, negative> triple.
  nn::Var pair_loss(const std::vector<int>& desc_ids, const std::vector<int>& code_pos_ids,
                    const std::vector<int>& code_neg_ids) const {
    nn::Var d = embed(TowerKind::text, desc_ids);
    nn::Var cp = embed(TowerKind::code, code_pos_ids);
    nn::Var cn = embed(TowerKind::code, code_neg_ids);
    nn::Var gap = ad::sub(ad::cosine(d, cn), ad::cosine(d, cp));
    return ad::relu(ad::shift(gap, cfg_.margin));
  }

  std::uint64_t fingerprint() const {
    std::vector<char> blob = nn::serialize_params(params_);
    return fnv1a64(blob.data(), blob.size());
  }

  void save(const std::string& dir) const {
    namespace fs = std::filesystem;
    fs::create_directories(dir);
    nlohmann::json meta;
    meta["format_version"] = kCheckpointVersion;
    meta["encoder"] = cfg_;
    meta["fingerprint"] = fingerprint();
    std::ofstream out(fs::path(dir) / "config.json");
    if (!out) throw std::runtime_error("EncoderModel::save: cannot write " + dir);
    out << meta.dump(2) << '\n';
    vocab_code_.save((fs::path(dir) / "vocab_code.txt").string());
    vocab_text_.save((fs::path(dir) / "vocab_text.txt").string());
    nn::write_file((fs::path(dir) / "params.bin").string(), nn::serialize_params(params_));
  }

  static EncoderModel load(const std::string& dir) {
    namespace fs = std::filesystem;
    std::ifstream in(fs::path(dir) / "config.json");
    if (!in) throw std::runtime_error("EncoderModel::load: missing checkpoint at " + dir);
    nlohmann::json meta = nlohmann::json::parse(in);
    if (meta.value("format_version", -1) != static_cast<int>(kCheckpointVersion))
      throw std::runtime_error("EncoderModel::load: checkpoint format version mismatch in " + dir);
    EncoderConfig cfg = meta.at("encoder").get<EncoderConfig>();
    Vocabulary vc = Vocabulary::load((fs::path(dir) / "vocab_code.txt").string());
    Vocabulary vt = Vocabulary::load((fs::path(dir) / "vocab_text.txt").string());
    EncoderModel m(cfg, std::move(vc), std::move(vt));
    nn::deserialize_params(m.params_, nn::read_file((fs::path(dir) / "params.bin").string()));
    return m;
  }

 private:
  nn::Var forward(TowerKind tower, const std::vector<int>& ids) const {
    if (cfg_.model_kind == ModelKind::bag_attention)
      return tower == TowerKind::code ? bag_code_.forward(ids) : bag_text_.forward(ids);
    return tower == TowerKind::code ? rec_code_.forward(ids) : rec_text_.forward(ids);
  }

  EncoderConfig cfg_;
  Vocabulary vocab_code_, vocab_text_;
  nn::ParamStore params_;
  detail::BagAttentionTower bag_code_, bag_text_;
  detail::RecurrentTower rec_code_, rec_text_;
};

struct CsPair {
  std::string id;
  std::vector<int> desc_ids;
  std::vector<int> code_ids;
};

// Owns the optimizer state across epochs of ranking-loss training.
class EncoderTrainer {
 public:
  explicit EncoderTrainer(EncoderModel& model)
      : model_(model), adam_(model.params(), model.config().learning_rate) {}

  nn::Adam& optimizer() { return adam_; }

  // One pass over shuffled pairs; each pair contributes one
  // <description, positive, sampled negative> triple. Returns the mean loss.
  double train_epoch(const std::vector<CsPair>& pairs, Rng& rng) {
    if (pairs.empty()) throw std::invalid_argument("train_epoch: no pairs");
    std::vector<std::size_t> order(pairs.size());
    for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
    rng.shuffle(order);

    const std::size_t batch = static_cast<std::size_t>(model_.config().batch_size);
    double total_loss = 0;
    for (std::size_t start = 0; start < order.size(); start += batch) {
      std::size_t end = std::min(order.size(), start + batch);
      std::vector<nn::Var> losses;
      losses.reserve(end - start);
      for (std::size_t k = start; k < end; ++k) {
        const CsPair& p = pairs[order[k]];
        std::size_t neg = order[k];
        if (pairs.size() >= 2) {
          neg = rng.below(pairs.size() - 1);
          if (neg >= order[k]) ++neg;
        }
        losses.push_back(model_.pair_loss(p.desc_ids, p.code_ids, pairs[neg].code_ids));
      }
      nn::Var batch_loss = ad::scale(ad::add_many(losses), 1.0 / static_cast<double>(losses.size()));
      if (!std::isfinite(batch_loss->scalar()))
        throw std::runtime_error("train_epoch: non-finite loss, aborting epoch");
      for (const auto& l : losses) total_loss += l->scalar();
      adam_.zero_grad();
      ad::backward(batch_loss);
      adam_.step();
    }
    return total_loss / static_cast<double>(pairs.size());
  }

 private:
  EncoderModel& model_;
  nn::Adam adam_;
};

}  // namespace qcs
