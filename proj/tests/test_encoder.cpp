#include "qcs/encoder.hpp"

#include <gtest/gtest.h>

#include <cmath>

#include "support/gradcheck.hpp"
#include "support/tmpdir.hpp"

using namespace qcs;

namespace {

Vocabulary vocab_of(const std::vector<std::string>& tokens) {
  TokenStream ts;
  ts.tokens = tokens;
  return Vocabulary::build({ts}, tokens.size());
}

EncoderConfig tiny_config(ModelKind kind, std::uint64_t seed) {
  EncoderConfig cfg;
  cfg.model_kind = kind;
  cfg.embed_dim = kind == ModelKind::bag_attention ? 8 : 6;
  cfg.hidden_dim = 6;
  cfg.batch_size = 4;
  cfg.seed = seed;
  return cfg;
}

TEST(RankingLoss, Examples) {
  EXPECT_DOUBLE_EQ(ranking_loss(0.9, 0.2, 0.05), 0.0);
  EXPECT_NEAR(ranking_loss(0.3, 0.4, 0.05), 0.15, 1e-12);
  EXPECT_DOUBLE_EQ(ranking_loss(0.4, 0.4, 0.05), 0.05);
  EXPECT_THROW(ranking_loss(0.1, 0.2, 0.0), std::invalid_argument);
}

TEST(RankingLoss, NonNegativeAndLipschitz) {
  Rng rng(3);
  for (int i = 0; i < 200; ++i) {
    double sp = rng.uniform(-1, 1), sn = rng.uniform(-1, 1), eps = 0.05;
    double l = ranking_loss(sp, sn, eps);
    EXPECT_GE(l, 0.0);
    EXPECT_EQ(l == 0.0, sp >= sn + eps);
    double dp = rng.uniform(-0.2, 0.2);
    EXPECT_LE(std::abs(ranking_loss(sp + dp, sn, eps) - l), std::abs(dp) + 1e-12);
    EXPECT_LE(std::abs(ranking_loss(sp, sn + dp, eps) - l), std::abs(dp) + 1e-12);
  }
}

TEST(Similarity, BoundedAndSymmetric) {
  Rng rng(4);
  for (int i = 0; i < 100; ++i) {
    nn::Vec a(5), b(5);
    for (int k = 0; k < 5; ++k) {
      a(k) = rng.uniform(-2, 2);
      b(k) = rng.uniform(-2, 2);
    }
    double s = similarity(a, b);
    EXPECT_DOUBLE_EQ(s, similarity(b, a));
    EXPECT_LE(std::abs(s), 1.0 + 1e-6);
  }
}

TEST(SampleNegative, ExcludesPositive) {
  Rng rng(5);
  EXPECT_EQ(sample_negative({"a", "b"}, "a", rng), "b");
  EXPECT_THROW(sample_negative({"a"}, "a", rng), std::invalid_argument);

  std::vector<std::string> ids;
  for (int i = 0; i < 1000; ++i) ids.push_back("id" + std::to_string(i));
  for (int trial = 0; trial < 10000; ++trial)
    ASSERT_NE(sample_negative(ids, "id500", rng), "id500");
}

// Chi-square style uniformity: each of the 9 eligible ids within 5 sigma of
// the expected draw count.
TEST(SampleNegative, UniformWithinFiveSigma) {
  Rng rng(6);
  std::vector<std::string> ids;
  for (int i = 0; i < 10; ++i) ids.push_back("id" + std::to_string(i));
  std::map<std::string, int> counts;
  const int draws = 10000;
  for (int i = 0; i < draws; ++i) ++counts[sample_negative(ids, "id0", rng)];
  EXPECT_EQ(counts.count("id0"), 0u);
  double expect = draws / 9.0;
  double sigma = std::sqrt(draws * (1.0 / 9.0) * (8.0 / 9.0));
  for (int i = 1; i < 10; ++i)
    EXPECT_NEAR(counts["id" + std::to_string(i)], expect, 5 * sigma);
}

TEST(Embed, SingleTokenBagEqualsEmbeddingRow) {
  Vocabulary v = vocab_of({"t0", "t1", "t2"});
  EncoderModel m(tiny_config(ModelKind::bag_attention, 7), v, v);
  int id = v.lookup("t1");
  nn::Vec out = m.embed_vec(TowerKind::text, {id});
  nn::Vec row;
  for (const auto& [name, p] : m.params().items())
    if (name == "text.emb") row = p->value.col(id);
  ASSERT_EQ(row.size(), out.size());
  EXPECT_TRUE(out.isApprox(row, 1e-12));
}

TEST(Embed, PaddingInvarianceExact) {
  Vocabulary v = vocab_of({"t0", "t1", "t2"});
  for (ModelKind kind : {ModelKind::bag_attention, ModelKind::recurrent}) {
    EncoderModel m(tiny_config(kind, 8), v, v);
    int id = v.lookup("t2");
    nn::Vec padded =
        m.embed(TowerKind::code, {id, Vocabulary::kPad, Vocabulary::kPad}, {1, 0, 0})->value.col(0);
    nn::Vec bare = m.embed_vec(TowerKind::code, {id});
    EXPECT_EQ((padded - bare).cwiseAbs().maxCoeff(), 0.0);
  }
}

TEST(Embed, Errors) {
  Vocabulary v = vocab_of({"t0"});
  EncoderModel m(tiny_config(ModelKind::bag_attention, 9), v, v);
  EXPECT_THROW(m.embed(TowerKind::code, {4}, {0}), std::invalid_argument);
  EXPECT_THROW(m.embed(TowerKind::code, {}), std::invalid_argument);
  EXPECT_THROW(m.embed(TowerKind::code, {4}, {1, 0}), std::invalid_argument);
}

TEST(Embed, DifferentSeedsDiffer) {
  Vocabulary v = vocab_of({"t0", "t1"});
  EncoderModel a(tiny_config(ModelKind::bag_attention, 1), v, v);
  EncoderModel b(tiny_config(ModelKind::bag_attention, 2), v, v);
  nn::Vec va = a.embed_vec(TowerKind::code, {4, 5});
  nn::Vec vb = b.embed_vec(TowerKind::code, {4, 5});
  EXPECT_GT((va - vb).cwiseAbs().maxCoeff(), 0.0);
}

// Finite-difference oracle over every parameter of both tower kinds, with the
// loss strictly positive so the hinge is differentiable.
TEST(Encoder, PairLossMatchesFiniteDifferences) {
  Vocabulary v = vocab_of({"t0", "t1", "t2", "t3", "t4", "t5", "t6", "t7", "t8", "t9"});
  for (ModelKind kind : {ModelKind::bag_attention, ModelKind::recurrent}) {
    EncoderModel m(tiny_config(kind, 11), v, v);
    ASSERT_LE(m.params().count(), 2000u) << to_string(kind);
    std::vector<int> d = {4, 5, 6}, cp = {7, 8}, cn = {9, 10, 11};
    double loss = m.pair_loss(d, cp, cn)->scalar();
    ASSERT_GT(loss, 1e-3) << "hinge must be active for the check";
    auto res = gradcheck::check(m.params(), [&] { return m.pair_loss(d, cp, cn); });
    EXPECT_TRUE(res.pass) << to_string(kind) << " worst " << res.worst_param << " rel "
                          << res.worst_rel << " over " << res.checked;
  }
}

// Overfit oracle: disjoint-vocabulary pairs become perfectly separable.
TEST(Encoder, OverfitsSmallDisjointCorpus) {
  std::vector<std::string> tokens;
  for (int i = 0; i < 8; ++i) {
    tokens.push_back("d" + std::to_string(i));
    tokens.push_back("c" + std::to_string(i));
  }
  Vocabulary v = vocab_of(tokens);
  EncoderConfig cfg;
  cfg.model_kind = ModelKind::bag_attention;
  cfg.embed_dim = 16;
  cfg.learning_rate = 0.01;
  cfg.batch_size = 4;
  cfg.seed = 12;
  EncoderModel m(cfg, v, v);

  std::vector<CsPair> pairs;
  for (int i = 0; i < 4; ++i) {
    CsPair p;
    p.id = "p" + std::to_string(i);
    p.desc_ids = {v.lookup("d" + std::to_string(i))};
    p.code_ids = {v.lookup("c" + std::to_string(i))};
    pairs.push_back(p);
  }
  EncoderTrainer trainer(m);
  Rng rng(13);
  for (int epoch = 0; epoch < 150; ++epoch) trainer.train_epoch(pairs, rng);

  for (const auto& p : pairs) {
    nn::Vec d = m.embed_vec(TowerKind::text, p.desc_ids);
    double own = similarity(d, m.embed_vec(TowerKind::code, p.code_ids));
    for (const auto& q : pairs) {
      if (q.id == p.id) continue;
      EXPECT_GT(own, similarity(d, m.embed_vec(TowerKind::code, q.code_ids)));
    }
  }
}

TEST(Encoder, TrainEpochDeterministic) {
  Vocabulary v = vocab_of({"a", "b", "c", "d", "e", "f"});
  auto run = [&] {
    EncoderModel m(tiny_config(ModelKind::bag_attention, 21), v, v);
    EncoderTrainer trainer(m);
    std::vector<CsPair> pairs = {{"p0", {4, 5}, {6}}, {"p1", {7}, {8, 9}}, {"p2", {5, 6}, {4}}};
    Rng rng(22);
    double loss = 0;
    for (int i = 0; i < 3; ++i) loss = trainer.train_epoch(pairs, rng);
    return loss;
  };
  EXPECT_DOUBLE_EQ(run(), run());
}

TEST(Encoder, CheckpointRoundTripAndVersionCheck) {
  testsup::TmpDir tmp("enc_ckpt");
  Vocabulary v = vocab_of({"a", "b", "c"});
  EncoderModel m(tiny_config(ModelKind::recurrent, 31), v, v);
  m.save(tmp.sub("ckpt"));

  EncoderModel loaded = EncoderModel::load(tmp.sub("ckpt"));
  EXPECT_EQ(loaded.fingerprint(), m.fingerprint());
  nn::Vec a = m.embed_vec(TowerKind::code, {4, 5});
  nn::Vec b = loaded.embed_vec(TowerKind::code, {4, 5});
  EXPECT_EQ((a - b).cwiseAbs().maxCoeff(), 0.0);

  // Tamper with the stored format version.
  auto cfg_path = tmp.path() / "ckpt" / "config.json";
  nlohmann::json j = nlohmann::json::parse(std::ifstream(cfg_path));
  j["format_version"] = 999;
  std::ofstream(cfg_path) << j.dump();
  EXPECT_THROW(EncoderModel::load(tmp.sub("ckpt")), std::runtime_error);
}

}  // namespace
