#pragma once

#include <algorithm>
#include <fstream>
#include <stdexcept>
#include <string>
#include <unordered_map>
#include <vector>

#include "qcs/encoder.hpp"
#include "qcs/metrics.hpp"
#include "qcs/qse.hpp"

namespace qcs {

struct RewardConfig {
  double alpha = 1.0;                 // weight of the rank term vs BLEU
  std::size_t reward_pool_size = 100; // positive + sampled negatives
  int bleu_order = 4;

  void validate() const {
    if (alpha < 0 || alpha > 1) throw std::invalid_argument("RewardConfig: alpha must be in [0,1]");
    if (reward_pool_size < 2)
      throw std::invalid_argument("RewardConfig: reward_pool_size must be >= 2");
  }
};

inline void to_json(nlohmann::json& j, const RewardConfig& c) {
  j = nlohmann::json{{"alpha", c.alpha},
                     {"reward_pool_size", c.reward_pool_size},
                     {"bleu_order", c.bleu_order}};
}
inline void from_json(const nlohmann::json& j, RewardConfig& c) {
  c.alpha = j.value("alpha", 1.0);
  c.reward_pool_size = j.value("reward_pool_size", std::size_t{100});
  c.bleu_order = j.value("bleu_order", 4);
}

// One sampled rollout with its sparse terminal reward.
struct Episode {
  std::vector<int> query_ids;
  std::vector<int> actions;       // d_1..d_N, terminal EOS included when emitted
  std::vector<double> logprobs;   // log pi(d_t | s_t), one per action
  std::vector<double> values;     // V(s_t), filled by the update/pretrain pass
  std::vector<double> returns;    // R_t
  double terminal_reward = 0;
  double rank_term = 0;
  double bleu_term = 0;
  double temperature = 1.0;
};

// Suffix sums of the per-step rewards.
inline std::vector<double> episode_returns(const std::vector<double>& rewards) {
  std::vector<double> out(rewards.size(), 0);
  double acc = 0;
  for (std::size_t t = rewards.size(); t-- > 0;) {
    if (!std::isfinite(rewards[t])) throw std::invalid_argument("episode_returns: non-finite reward");
    acc += rewards[t];
    out[t] = acc;
  }
  return out;
}

// Actor and critic losses of a completed episode. The advantage is a constant
// in the actor term; no gradient flows through V there.
inline std::pair<double, double> a2c_losses(const Episode& ep) {
  if (ep.actions.size() != ep.logprobs.size() || ep.actions.size() != ep.values.size() ||
      ep.actions.size() != ep.returns.size())
    throw std::invalid_argument("a2c_losses: episode field lengths differ");
  double actor = 0, critic = 0;
  for (std::size_t t = 0; t < ep.actions.size(); ++t) {
    double adv = ep.returns[t] - ep.values[t];
    actor -= adv * ep.logprobs[t];
    double err = ep.values[t] - ep.returns[t];
    critic += err * err;
  }
  return {actor, critic};
}

// Frozen per-snippet code embeddings keyed by id.
class CodeBank {
 public:
  void add(const std::string& id, nn::Vec v) {
    if (index_.count(id)) throw std::invalid_argument("CodeBank: duplicate id " + id);
    index_[id] = vecs_.size();
    ids_.push_back(id);
    vecs_.push_back(std::move(v));
  }

  static CodeBank build(const EncoderModel& cs,
                        const std::vector<std::pair<std::string, std::vector<int>>>& snippets) {
    CodeBank bank;
    for (const auto& [id, ids] : snippets) bank.add(id, cs.embed_vec(TowerKind::code, ids));
    return bank;
  }

  const nn::Vec& vec(const std::string& id) const {
    auto it = index_.find(id);
    if (it == index_.end()) throw std::invalid_argument("CodeBank: unknown id " + id);
    return vecs_[it->second];
  }

  bool contains(const std::string& id) const { return index_.count(id) > 0; }
  const std::vector<std::string>& ids() const { return ids_; }
  std::size_t size() const { return ids_.size(); }

 private:
  std::vector<std::string> ids_;
  std::vector<nn::Vec> vecs_;
  std::unordered_map<std::string, std::size_t> index_;
};

// A reward pool: the positive snippet plus sampled negatives.
struct RewardPool {
  std::string positive_id;
  std::vector<std::string> candidate_ids;  // contains positive exactly once
};

inline RewardPool sample_reward_pool(const std::string& positive_id,
                                     const std::vector<std::string>& corpus_ids,
                                     std::size_t pool_size, Rng& rng) {
  RewardPool pool;
  pool.positive_id = positive_id;
  pool.candidate_ids.push_back(positive_id);
  std::vector<std::string> others;
  others.reserve(corpus_ids.size());
  for (const auto& id : corpus_ids)
    if (id != positive_id) others.push_back(id);
  std::size_t want = std::min(pool_size - 1, others.size());
  std::vector<std::size_t> picks = rng.sample_indices(others.size(), want);
  for (std::size_t p : picks) pool.candidate_ids.push_back(others[p]);
  return pool;
}

namespace detail {

inline std::vector<int> strip_generated(const std::vector<int>& ids, bool drop_unk) {
  std::vector<int> out;
  out.reserve(ids.size());
  for (int id : ids) {
    if (id == Vocabulary::kPad || id == Vocabulary::kBos || id == Vocabulary::kEos) continue;
    if (drop_unk && id == Vocabulary::kUnk) continue;
    out.push_back(id);
  }
  return out;
}

}  // namespace detail

struct TerminalReward {
  double reward = 0;
  double rank_term = 0;
  double bleu_term = 0;
};

// Terminal reward of a finished generation: alpha * reciprocal rank of the
// positive snippet in the pool scored by the generated text, plus
// (1 - alpha) * smoothed BLEU-4 against the gold description. With alpha = 1
// the gold description is never read. An empty generation embeds as the zero
// vector, scoring 0 against every candidate.
inline TerminalReward terminal_reward(const std::vector<int>& generated, const RewardPool& pool,
                                      const CodeBank& bank, const std::vector<int>& gold_desc_ids,
                                      const RewardConfig& cfg, const EncoderModel& cs) {
  cfg.validate();
  if (std::count(pool.candidate_ids.begin(), pool.candidate_ids.end(), pool.positive_id) != 1)
    throw std::invalid_argument("terminal_reward: pool must contain the positive exactly once");

  std::vector<int> kept = detail::strip_generated(generated, /*drop_unk=*/true);
  nn::Vec text_vec;
  if (kept.empty())
    text_vec = nn::Vec::Zero(bank.size() ? bank.vec(pool.candidate_ids.front()).size() : 1);
  else
    text_vec = cs.embed_vec(TowerKind::text, kept);

  std::vector<std::pair<std::string, double>> scores;
  scores.reserve(pool.candidate_ids.size());
  for (const auto& id : pool.candidate_ids)
    scores.emplace_back(id, ad::cosine_value(text_vec, bank.vec(id)));

  TerminalReward out;
  RankResult rr = frank(scores, pool.positive_id);
  out.rank_term = 1.0 / static_cast<double>(rr.frank);
  if (cfg.alpha < 1.0) {
    std::vector<int> cand = detail::strip_generated(generated, /*drop_unk=*/false);
    out.bleu_term = bleu4(cand, gold_desc_ids);
    out.reward = cfg.alpha * out.rank_term + (1.0 - cfg.alpha) * out.bleu_term;
  } else {
    out.reward = out.rank_term;
  }
  return out;
}

// Per-step reward: zero unless the emitted token is EOS (truncation is the
// caller's implicit EOS), in which case the terminal reward of the prefix.
inline double step_reward(const std::vector<int>& prefix, int token, const RewardPool& pool,
                          const CodeBank& bank, const std::vector<int>& gold_desc_ids,
                          const RewardConfig& cfg, const EncoderModel& cs) {
  if (token != Vocabulary::kEos) return 0.0;
  return terminal_reward(prefix, pool, bank, gold_desc_ids, cfg, cs).reward;
}

// Single hidden-layer value head over detached decoder states.
class CriticModel {
 public:
  CriticModel(int state_dim, int hidden_dim, double learning_rate, std::uint64_t seed)
      : state_dim_(state_dim), hidden_dim_(hidden_dim), learning_rate_(learning_rate) {
    if (state_dim < 1 || hidden_dim < 1) throw std::invalid_argument("CriticModel: dims must be >= 1");
    l1_ = nn::Dense(params_, "v.l1", state_dim, hidden_dim);
    l2_ = nn::Dense(params_, "v.l2", hidden_dim, 1);
    Rng rng(derive_seed(seed, "critic-init"));
    params_.init_uniform(rng, 0.1);
  }

  int state_dim() const { return state_dim_; }
  double learning_rate() const { return learning_rate_; }
  nn::ParamStore& params() { return params_; }
  const nn::ParamStore& params() const { return params_; }

  nn::Var value_node(const nn::Var& state) const { return l2_(ad::tanh_(l1_(state))); }

  double value(const nn::Vec& state) const {
    return value_node(ad::constant(nn::Mat(state)))->scalar();
  }

  void save(const std::string& dir) const {
    namespace fs = std::filesystem;
    fs::create_directories(dir);
    nlohmann::json meta;
    meta["format_version"] = 1;
    meta["state_dim"] = state_dim_;
    meta["hidden_dim"] = hidden_dim_;
    meta["learning_rate"] = learning_rate_;
    std::ofstream out(fs::path(dir) / "critic.json");
    if (!out) throw std::runtime_error("CriticModel::save: cannot write " + dir);
    out << meta.dump(2) << '\n';
    nn::write_file((fs::path(dir) / "critic.bin").string(), nn::serialize_params(params_));
  }

  static CriticModel load(const std::string& dir, std::uint64_t seed = 0) {
    namespace fs = std::filesystem;
    std::ifstream in(fs::path(dir) / "critic.json");
    if (!in) throw std::runtime_error("CriticModel::load: missing critic at " + dir);
    nlohmann::json meta = nlohmann::json::parse(in);
    if (meta.value("format_version", -1) != 1)
      throw std::runtime_error("CriticModel::load: format version mismatch in " + dir);
    CriticModel m(meta.at("state_dim").get<int>(), meta.at("hidden_dim").get<int>(),
                  meta.value("learning_rate", 1e-3), seed);
    nn::deserialize_params(m.params_, nn::read_file((fs::path(dir) / "critic.bin").string()));
    return m;
  }

 private:
  int state_dim_, hidden_dim_;
  double learning_rate_;
  nn::ParamStore params_;
  nn::Dense l1_, l2_;
};

struct RlConfig {
  RewardConfig reward;
  int epochs_critic = 10;
  int epochs_joint = 40;
  double temperature = 1.0;
  double learning_rate = 1e-3;
  double critic_learning_rate = 1e-3;
  int critic_hidden = 64;
  std::uint64_t seed = 0;

  void validate() const {
    reward.validate();
    if (temperature <= 0) throw std::invalid_argument("RlConfig: temperature must be > 0");
  }
};

inline void to_json(nlohmann::json& j, const RlConfig& c) {
  j = nlohmann::json{{"alpha", c.reward.alpha},
                     {"pool_size", c.reward.reward_pool_size},
                     {"epochs_critic", c.epochs_critic},
                     {"epochs_joint", c.epochs_joint},
                     {"temperature", c.temperature},
                     {"learning_rate", c.learning_rate},
                     {"critic_learning_rate", c.critic_learning_rate},
                     {"critic_hidden", c.critic_hidden},
                     {"seed", c.seed}};
}
inline void from_json(const nlohmann::json& j, RlConfig& c) {
  c.reward.alpha = j.value("alpha", 1.0);
  c.reward.reward_pool_size = j.value("pool_size", std::size_t{100});
  c.epochs_critic = j.value("epochs_critic", 10);
  c.epochs_joint = j.value("epochs_joint", 40);
  c.temperature = j.value("temperature", 1.0);
  c.learning_rate = j.value("learning_rate", 1e-3);
  c.critic_learning_rate = j.value("critic_learning_rate", 1e-3);
  c.critic_hidden = j.value("critic_hidden", 64);
  c.seed = j.value("seed", 0);
}

// One training triple prepared for RL: framed query plus the gold description
// (content ids, unframed) for the BLEU term.
struct RlItem {
  std::string id;
  std::vector<int> query_ids;
  std::vector<int> gold_desc_ids;
};

struct RlDataset {
  std::vector<RlItem> items;
  std::vector<std::string> corpus_ids;  // negative-sampling universe
};

// Re-runs the decoder over a sampled action sequence, producing per-step
// log-probability nodes (differentiable into the actor) and decoder states.
struct ReplayOut {
  std::vector<nn::Var> logprob_nodes;
  std::vector<nn::Var> states;  // h_t used to choose action t
};

inline ReplayOut replay_episode(const QseModel& actor, const Episode& ep) {
  QseModel::Encoded enc = actor.encode(ep.query_ids);
  nn::LstmState state = enc.init;
  ReplayOut out;
  int prev = Vocabulary::kBos;
  for (int action : ep.actions) {
    QseModel::StepOut step = actor.decode_step(enc, state, prev, true);
    state = step.state;
    nn::Var logits = ep.temperature == 1.0 ? step.logits : ad::scale(step.logits, 1.0 / ep.temperature);
    out.logprob_nodes.push_back(ad::log_softmax_pick(logits, action));
    out.states.push_back(step.state.h);
    prev = action;
  }
  return out;
}

// Rolls out one episode against the frozen reward oracle.
inline Episode run_episode(const QseModel& actor, const RlItem& item, const CodeBank& bank,
                           const std::vector<std::string>& corpus_ids, const RewardConfig& cfg,
                           const EncoderModel& cs, double temperature, Rng& rng) {
  Episode ep;
  ep.query_ids = item.query_ids;
  ep.temperature = temperature;
  GenerationResult gen = sample_decode(actor, item.query_ids, rng, temperature);
  ep.actions = gen.tokens;
  ep.logprobs = gen.logprobs;

  RewardPool pool = sample_reward_pool(item.id, corpus_ids, cfg.reward_pool_size, rng);
  TerminalReward tr = terminal_reward(ep.actions, pool, bank, item.gold_desc_ids, cfg, cs);
  ep.terminal_reward = tr.reward;
  ep.rank_term = tr.rank_term;
  ep.bleu_term = tr.bleu_term;

  std::vector<double> rewards(ep.actions.size(), 0.0);
  rewards.back() = ep.terminal_reward;  // truncation counts as implicit EOS
  ep.returns = episode_returns(rewards);
  return ep;
}

// Joint A2C update for a batch of episodes. Critic states are detached, so
// the critic loss cannot reach actor parameters; advantages enter the actor
// loss as constants, so the actor loss cannot reach the critic.
struct A2cStats {
  double actor_loss = 0;
  double critic_loss = 0;
};

inline A2cStats apply_a2c_update(const QseModel& actor, nn::Adam& actor_opt,
                                 const CriticModel& critic, nn::Adam& critic_opt,
                                 std::vector<Episode>& episodes) {
  if (episodes.empty()) throw std::invalid_argument("apply_a2c_update: no episodes");
  std::vector<nn::Var> actor_terms, critic_terms;
  std::vector<double> actor_weights;
  for (Episode& ep : episodes) {
    ReplayOut replay = replay_episode(actor, ep);
    ep.values.resize(ep.actions.size());
    for (std::size_t t = 0; t < ep.actions.size(); ++t) {
      nn::Var v = critic.value_node(ad::detach(replay.states[t]));
      ep.values[t] = v->scalar();
      double advantage = ep.returns[t] - ep.values[t];
      actor_terms.push_back(replay.logprob_nodes[t]);
      actor_weights.push_back(-advantage);
      nn::Var err = ad::shift(v, -ep.returns[t]);
      critic_terms.push_back(ad::mul(err, err));
    }
  }
  double inv = 1.0 / static_cast<double>(episodes.size());
  nn::Var actor_loss = ad::scale(ad::weighted_sum(actor_terms, actor_weights), inv);
  nn::Var critic_loss = ad::scale(ad::add_many(critic_terms), inv);
  if (!std::isfinite(actor_loss->scalar()) || !std::isfinite(critic_loss->scalar()))
    throw std::runtime_error("apply_a2c_update: non-finite loss");

  actor_opt.zero_grad();
  ad::backward(actor_loss);
  actor_opt.step();

  critic_opt.zero_grad();
  ad::backward(critic_loss);
  critic_opt.step();

  return {actor_loss->scalar(), critic_loss->scalar()};
}

// Critic-only regression against returns from the frozen actor.
inline std::vector<double> pretrain_critic(CriticModel& critic, const QseModel& actor,
                                           const RlDataset& data, const CodeBank& bank,
                                           const RlConfig& cfg, const EncoderModel& cs,
                                           int epochs, Rng& rng) {
  cfg.validate();
  if (data.items.empty()) throw std::invalid_argument("pretrain_critic: empty dataset");
  nn::Adam critic_opt(critic.params(), cfg.critic_learning_rate);
  std::vector<double> loss_trace;
  for (int e = 0; e < epochs; ++e) {
    std::vector<std::size_t> order(data.items.size());
    for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
    rng.shuffle(order);
    double total = 0;
    std::size_t steps = 0;
    for (std::size_t idx : order) {
      Episode ep = run_episode(actor, data.items[idx], bank, data.corpus_ids, cfg.reward,
                               cs, cfg.temperature, rng);
      ReplayOut replay = replay_episode(actor, ep);
      std::vector<nn::Var> terms;
      for (std::size_t t = 0; t < ep.actions.size(); ++t) {
        nn::Var v = critic.value_node(ad::detach(replay.states[t]));
        nn::Var err = ad::shift(v, -ep.returns[t]);
        terms.push_back(ad::mul(err, err));
      }
      nn::Var loss = ad::add_many(terms);
      if (!std::isfinite(loss->scalar()))
        throw std::runtime_error("pretrain_critic: non-finite loss");
      total += loss->scalar();
      ++steps;
      critic_opt.zero_grad();
      ad::backward(loss);
      critic_opt.step();
    }
    loss_trace.push_back(total / static_cast<double>(steps));
  }
  return loss_trace;
}

struct RewardTraceRow {
  int epoch = 0;
  double mean_reward = 0;
  double mean_rank_term = 0;
  double mean_bleu_term = 0;
};

inline void save_reward_trace(const std::vector<RewardTraceRow>& trace, const std::string& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("save_reward_trace: cannot open " + path);
  out << "epoch,mean_reward,mean_rank_term,mean_bleu_term\n";
  char buf[160];
  for (const auto& r : trace) {
    std::snprintf(buf, sizeof(buf), "%d,%.9f,%.9f,%.9f\n", r.epoch, r.mean_reward,
                  r.mean_rank_term, r.mean_bleu_term);
    out << buf;
  }
}

// Joint actor-critic fine-tuning: one sampled episode per training triple per
// epoch, reward from the frozen code-search model.
inline std::vector<RewardTraceRow> train_rl(QseModel& actor, CriticModel& critic,
                                            const EncoderModel& cs, const RlDataset& data,
                                            const CodeBank& bank, const RlConfig& cfg, int epochs,
                                            Rng& rng) {
  cfg.validate();
  if (data.items.empty()) throw std::invalid_argument("train_rl: empty dataset");
  nn::Adam actor_opt(actor.params(), cfg.learning_rate);
  nn::Adam critic_opt(critic.params(), cfg.critic_learning_rate);

  std::vector<RewardTraceRow> trace;
  for (int e = 0; e < epochs; ++e) {
    std::vector<std::size_t> order(data.items.size());
    for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
    rng.shuffle(order);
    RewardTraceRow row;
    row.epoch = e;
    for (std::size_t idx : order) {
      std::vector<Episode> batch{run_episode(actor, data.items[idx], bank, data.corpus_ids,
                                             cfg.reward, cs, cfg.temperature, rng)};
      apply_a2c_update(actor, actor_opt, critic, critic_opt, batch);
      row.mean_reward += batch[0].terminal_reward;
      row.mean_rank_term += batch[0].rank_term;
      row.mean_bleu_term += batch[0].bleu_term;
    }
    double inv = 1.0 / static_cast<double>(data.items.size());
    row.mean_reward *= inv;
    row.mean_rank_term *= inv;
    row.mean_bleu_term *= inv;
    trace.push_back(row);
  }
  return trace;
}

}  // namespace qcs
