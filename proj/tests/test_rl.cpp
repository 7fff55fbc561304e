#include "qcs/rl.hpp"

#include <gtest/gtest.h>

#include <cmath>

#include "support/tmpdir.hpp"

using namespace qcs;

namespace {

Vocabulary vocab_of(const std::vector<std::string>& tokens) {
  TokenStream ts;
  ts.tokens = tokens;
  return Vocabulary::build({ts}, tokens.size());
}

std::vector<int> framed(std::initializer_list<int> ids) {
  std::vector<int> out{Vocabulary::kBos};
  out.insert(out.end(), ids);
  out.push_back(Vocabulary::kEos);
  return out;
}

TEST(EpisodeReturns, SuffixSums) {
  EXPECT_EQ(episode_returns({0, 0, 0, 0.7}), (std::vector<double>{0.7, 0.7, 0.7, 0.7}));
  EXPECT_EQ(episode_returns({0, 0, 0}), (std::vector<double>{0, 0, 0}));
  std::vector<double> mixed = episode_returns({0.1, 0, 0.2});
  EXPECT_NEAR(mixed[0], 0.3, 1e-12);
  EXPECT_NEAR(mixed[1], 0.2, 1e-12);
  EXPECT_NEAR(mixed[2], 0.2, 1e-12);
  EXPECT_THROW(episode_returns({std::nan("")}), std::invalid_argument);
}

TEST(A2cLosses, Examples) {
  Episode ep;
  ep.actions = {5};
  ep.logprobs = {-1.3};
  ep.values = {0.5};
  ep.returns = {0.7};
  auto [actor, critic] = a2c_losses(ep);
  EXPECT_NEAR(critic, 0.04, 1e-12);
  EXPECT_NEAR(actor, -(0.7 - 0.5) * -1.3, 1e-12);

  ep.values = ep.returns;  // zero advantage
  EXPECT_DOUBLE_EQ(a2c_losses(ep).first, 0.0);

  ep.values = {0.1};
  ep.logprobs = {0.0};  // probability-1 action
  EXPECT_DOUBLE_EQ(a2c_losses(ep).first, 0.0);
}

// Two-candidate pool with hand-set embeddings: the generated text matches the
// negative exactly, so the positive lands at rank 2 and the rank term is 0.5.
struct RewardFixture {
  Vocabulary vt = vocab_of({"t"});
  Vocabulary vc = vocab_of({"c1", "c2"});
  EncoderConfig cfg;
  EncoderModel cs;
  CodeBank bank;
  RewardPool pool;

  RewardFixture()
      : cfg([] {
          EncoderConfig c;
          c.model_kind = ModelKind::bag_attention;
          c.embed_dim = 2;
          c.seed = 61;
          return c;
        }()),
        cs(cfg, vc, vt) {
    for (const auto& [name, p] : cs.params().items()) {
      if (name == "text.emb") p->value.col(4) << 1.0, 0.0;
      if (name == "code.emb") {
        p->value.col(4) << 0.0, 1.0;  // c1: orthogonal to the text
        p->value.col(5) << 1.0, 0.0;  // c2: identical direction
      }
    }
    bank.add("pos", cs.embed_vec(TowerKind::code, {4}));
    bank.add("neg", cs.embed_vec(TowerKind::code, {5}));
    pool.positive_id = "pos";
    pool.candidate_ids = {"pos", "neg"};
  }
};

TEST(StepReward, ZeroUnlessTerminal) {
  RewardFixture fx;
  RewardConfig rc;
  EXPECT_DOUBLE_EQ(step_reward({4}, 5, fx.pool, fx.bank, {4}, rc, fx.cs), 0.0);
  EXPECT_DOUBLE_EQ(step_reward({4}, Vocabulary::kUnk, fx.pool, fx.bank, {4}, rc, fx.cs), 0.0);
  EXPECT_GT(step_reward({4}, Vocabulary::kEos, fx.pool, fx.bank, {4}, rc, fx.cs), 0.0);
}

TEST(TerminalReward, ReciprocalRankOfPositive) {
  RewardFixture fx;
  RewardConfig rc;  // alpha = 1
  TerminalReward tr = terminal_reward({4, Vocabulary::kEos}, fx.pool, fx.bank, {4}, rc, fx.cs);
  EXPECT_DOUBLE_EQ(tr.rank_term, 0.5);
  EXPECT_DOUBLE_EQ(tr.reward, 0.5);
  EXPECT_DOUBLE_EQ(tr.bleu_term, 0.0);  // never computed at alpha = 1
}

TEST(TerminalReward, AlphaMixesRankAndBleu) {
  RewardFixture fx;
  RewardConfig rc;
  rc.alpha = 0.5;
  // gold equals the generated content, so BLEU is exactly 1.
  TerminalReward tr = terminal_reward({4, Vocabulary::kEos}, fx.pool, fx.bank, {4}, rc, fx.cs);
  EXPECT_DOUBLE_EQ(tr.bleu_term, 1.0);
  EXPECT_DOUBLE_EQ(tr.reward, 0.5 * 0.5 + 0.5 * 1.0);
  EXPECT_DOUBLE_EQ(tr.reward, rc.alpha * tr.rank_term + (1 - rc.alpha) * tr.bleu_term);
}

TEST(TerminalReward, BitwiseIndependentOfGoldAtAlphaOne) {
  RewardFixture fx;
  RewardConfig rc;  // alpha = 1
  TerminalReward a = terminal_reward({4, Vocabulary::kEos}, fx.pool, fx.bank, {4}, rc, fx.cs);
  TerminalReward b =
      terminal_reward({4, Vocabulary::kEos}, fx.pool, fx.bank, {5, 5, 5, 4, 4}, rc, fx.cs);
  EXPECT_EQ(a.reward, b.reward);
  EXPECT_EQ(a.rank_term, b.rank_term);
}

TEST(TerminalReward, RequiresPositiveInPool) {
  RewardFixture fx;
  RewardConfig rc;
  RewardPool bad;
  bad.positive_id = "pos";
  bad.candidate_ids = {"neg"};
  EXPECT_THROW(terminal_reward({4}, bad, fx.bank, {4}, rc, fx.cs), std::invalid_argument);
}

TEST(TerminalReward, EmptyGenerationScoresZeroVector) {
  RewardFixture fx;
  RewardConfig rc;
  // Immediate EOS: pool scores all 0, pessimistic rank = pool size.
  TerminalReward tr = terminal_reward({Vocabulary::kEos}, fx.pool, fx.bank, {4}, rc, fx.cs);
  EXPECT_DOUBLE_EQ(tr.rank_term, 0.5);
  EXPECT_GE(tr.reward, 0.0);
  EXPECT_LE(tr.reward, 1.0);
}

TEST(SampleRewardPool, ContainsPositiveOnceAndDistinctNegatives) {
  Rng rng(62);
  std::vector<std::string> corpus;
  for (int i = 0; i < 30; ++i) corpus.push_back("id" + std::to_string(i));
  RewardPool pool = sample_reward_pool("id7", corpus, 10, rng);
  EXPECT_EQ(pool.candidate_ids.size(), 10u);
  std::set<std::string> uniq(pool.candidate_ids.begin(), pool.candidate_ids.end());
  EXPECT_EQ(uniq.size(), pool.candidate_ids.size());
  EXPECT_EQ(std::count(pool.candidate_ids.begin(), pool.candidate_ids.end(), "id7"), 1);

  // small corpus: pool shrinks to the whole corpus
  RewardPool small = sample_reward_pool("id0", {"id0", "id1", "id2"}, 10, rng);
  EXPECT_EQ(small.candidate_ids.size(), 3u);
}

struct ActorFixture {
  Vocabulary vq = vocab_of({"q0", "q1"});
  Vocabulary vd = vocab_of({"w0", "w1", "w2"});
  Seq2SeqConfig cfg;
  QseModel actor;

  explicit ActorFixture(std::uint64_t seed = 63) : cfg(make_cfg(seed)), actor(cfg, vq, vd) {}

  static Seq2SeqConfig make_cfg(std::uint64_t seed) {
    Seq2SeqConfig c;
    c.embed_dim = 6;
    c.hidden_dim = 8;
    c.max_decode_len = 6;
    c.seed = seed;
    return c;
  }
};

// Zero-advantage episodes contribute exactly zero actor gradient.
TEST(A2c, ZeroAdvantageGivesZeroActorGradient) {
  ActorFixture fx;
  CriticModel critic(fx.cfg.hidden_dim, 8, 1e-3, 64);
  Rng rng(65);
  Episode ep;
  ep.query_ids = framed({4, 5});
  GenerationResult gen = sample_decode(fx.actor, ep.query_ids, rng, 1.0);
  ep.actions = gen.tokens;
  ep.logprobs = gen.logprobs;
  ep.temperature = 1.0;

  ReplayOut replay = replay_episode(fx.actor, ep);
  std::vector<double> weights;
  ep.returns.clear();
  for (const auto& s : replay.states) {
    double v = critic.value(s->value.col(0));
    ep.returns.push_back(v);  // returns equal to values: advantage 0 everywhere
    weights.push_back(-(ep.returns.back() - v));
  }
  fx.actor.params().zero_grad();
  nn::Var actor_loss = ad::weighted_sum(replay.logprob_nodes, weights);
  ad::backward(actor_loss);
  EXPECT_EQ(actor_loss->scalar(), 0.0);
  for (const auto& [name, p] : fx.actor.params().items())
    EXPECT_EQ(p->grad.cwiseAbs().maxCoeff(), 0.0) << name;
}

TEST(A2c, UpdateRunsAndFillsValues) {
  ActorFixture fx;
  // reward oracle whose text vocabulary matches the actor's output vocabulary
  EncoderConfig ec;
  ec.model_kind = ModelKind::bag_attention;
  ec.embed_dim = 4;
  ec.seed = 166;
  EncoderModel cs(ec, fx.vd, fx.vd);
  CodeBank bank;
  bank.add("pos", cs.embed_vec(TowerKind::code, {4}));
  bank.add("neg", cs.embed_vec(TowerKind::code, {5}));

  CriticModel critic(fx.cfg.hidden_dim, 8, 1e-3, 66);
  nn::Adam actor_opt(fx.actor.params(), 1e-3);
  nn::Adam critic_opt(critic.params(), 1e-3);
  Rng rng(67);

  RlItem item;
  item.id = "pos";
  item.query_ids = framed({4});
  item.gold_desc_ids = {4};
  std::vector<Episode> batch{run_episode(fx.actor, item, bank, {"pos", "neg"}, RewardConfig{},
                                         cs, 1.0, rng)};
  ASSERT_FALSE(batch[0].actions.empty());
  // sparse episode: returns constant across steps
  for (double r : batch[0].returns) EXPECT_DOUBLE_EQ(r, batch[0].terminal_reward);
  EXPECT_GE(batch[0].terminal_reward, 0.0);
  EXPECT_LE(batch[0].terminal_reward, 1.0);

  A2cStats stats = apply_a2c_update(fx.actor, actor_opt, critic, critic_opt, batch);
  EXPECT_TRUE(std::isfinite(stats.actor_loss));
  EXPECT_TRUE(std::isfinite(stats.critic_loss));
  EXPECT_EQ(batch[0].values.size(), batch[0].actions.size());
  auto [actor_arith, critic_arith] = a2c_losses(batch[0]);
  EXPECT_NEAR(stats.actor_loss, actor_arith, 1e-9);
  EXPECT_NEAR(stats.critic_loss, critic_arith, 1e-9);
}

// Constant-target regression oracle: with every code vector zeroed, every
// candidate scores 0, the positive ranks last, and the reward is exactly
// 1/pool for every episode. The critic must converge to that constant.
TEST(Critic, ConvergesToConstantReward) {
  ActorFixture fx(68);
  EncoderConfig ec;
  ec.model_kind = ModelKind::bag_attention;
  ec.embed_dim = 2;
  ec.seed = 69;
  Vocabulary vc = vocab_of({"c"});
  EncoderModel cs(ec, vc, fx.vd);

  CodeBank bank;
  std::vector<std::string> corpus_ids;
  for (int i = 0; i < 10; ++i) {
    std::string id = "id" + std::to_string(i);
    bank.add(id, nn::Vec::Zero(2));
    corpus_ids.push_back(id);
  }

  RlDataset data;
  data.corpus_ids = corpus_ids;
  for (int i = 0; i < 4; ++i) {
    RlItem item;
    item.id = "id" + std::to_string(i);
    item.query_ids = framed({4 + (i % 2)});
    item.gold_desc_ids = {4};
    data.items.push_back(item);
  }
  RlConfig rc;
  rc.reward.reward_pool_size = 10;
  rc.critic_learning_rate = 5e-3;

  CriticModel critic(fx.cfg.hidden_dim, 8, rc.critic_learning_rate, 70);
  Rng rng(71);
  std::vector<double> trace = pretrain_critic(critic, fx.actor, data, bank, rc, cs, 30, rng);

  // held-out rollout from the frozen actor
  RlItem held;
  held.id = "id9";
  held.query_ids = framed({5});
  held.gold_desc_ids = {4};
  Episode ep = run_episode(fx.actor, held, bank, corpus_ids, rc.reward, cs, 1.0, rng);
  EXPECT_DOUBLE_EQ(ep.terminal_reward, 0.1);
  ReplayOut replay = replay_episode(fx.actor, ep);
  for (const auto& s : replay.states)
    EXPECT_NEAR(critic.value(s->value.col(0)), 0.1, 0.05);
}

// Critic loss non-increasing over the first epochs on a fixed rollout set.
TEST(Critic, LossNonIncreasingOnFixedRollouts) {
  ActorFixture fx(72);
  CriticModel critic(fx.cfg.hidden_dim, 8, 1e-2, 73);
  Rng rng(74);

  std::vector<Episode> episodes;
  for (int i = 0; i < 6; ++i) {
    Episode ep;
    ep.query_ids = framed({4 + (i % 2)});
    GenerationResult gen = sample_decode(fx.actor, ep.query_ids, rng, 1.0);
    ep.actions = gen.tokens;
    ep.logprobs = gen.logprobs;
    std::vector<double> rewards(ep.actions.size(), 0.0);
    rewards.back() = 0.4;
    ep.returns = episode_returns(rewards);
    episodes.push_back(ep);
  }

  nn::Adam opt(critic.params(), 1e-2);
  std::vector<double> per_epoch;
  for (int epoch = 0; epoch < 3; ++epoch) {
    double total = 0;
    for (auto& ep : episodes) {
      ReplayOut replay = replay_episode(fx.actor, ep);
      std::vector<nn::Var> terms;
      for (std::size_t t = 0; t < ep.actions.size(); ++t) {
        nn::Var v = critic.value_node(ad::detach(replay.states[t]));
        nn::Var err = ad::shift(v, -ep.returns[t]);
        terms.push_back(ad::mul(err, err));
      }
      nn::Var loss = ad::add_many(terms);
      total += loss->scalar();
      opt.zero_grad();
      ad::backward(loss);
      opt.step();
    }
    per_epoch.push_back(total);
  }
  EXPECT_LE(per_epoch[1], per_epoch[0] + 1e-9);
  EXPECT_LE(per_epoch[2], per_epoch[1] + 1e-9);
}

TEST(Critic, SaveLoadRoundTrip) {
  testsup::TmpDir tmp("critic");
  CriticModel critic(8, 6, 1e-3, 75);
  critic.save(tmp.str());
  CriticModel loaded = CriticModel::load(tmp.str());
  nn::Vec s = nn::Vec::Constant(8, 0.3);
  EXPECT_DOUBLE_EQ(critic.value(s), loaded.value(s));
}

TEST(Critic, PretrainDeterministic) {
  auto run = [] {
    ActorFixture fx(76);
    EncoderConfig ec;
    ec.model_kind = ModelKind::bag_attention;
    ec.embed_dim = 2;
    ec.seed = 77;
    EncoderModel cs(ec, fx.vd, fx.vd);
    CodeBank bank;
    std::vector<std::string> ids;
    for (int i = 0; i < 5; ++i) {
      ids.push_back("id" + std::to_string(i));
      bank.add(ids.back(), nn::Vec::Zero(2));
    }
    RlDataset data;
    data.corpus_ids = ids;
    RlItem item;
    item.id = "id0";
    item.query_ids = framed({4});
    item.gold_desc_ids = {4};
    data.items.push_back(item);
    RlConfig rc;
    rc.reward.reward_pool_size = 5;
    CriticModel critic(fx.cfg.hidden_dim, 4, 1e-3, 78);
    Rng rng(79);
    auto trace = pretrain_critic(critic, fx.actor, data, bank, rc, cs, 3, rng);
    return trace.back();
  };
  EXPECT_DOUBLE_EQ(run(), run());
}

}  // namespace
