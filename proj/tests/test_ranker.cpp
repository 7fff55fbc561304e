#include "qcs/ranker.hpp"

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

TokenStream stream(std::vector<std::string> tokens) {
  TokenStream ts;
  ts.tokens = std::move(tokens);
  ts.source = TokenSource::query;
  return ts;
}

TEST(HybridScore, Example) { EXPECT_NEAR(hybrid_score(0.5, 1.0, 0.6), 0.7, 1e-12); }

TEST(HybridScore, ExactDegenerateEndpoints) {
  Rng rng(81);
  for (int i = 0; i < 100; ++i) {
    double se = rng.uniform(-1, 1), so = rng.uniform(-1, 1);
    EXPECT_EQ(hybrid_score(se, so, 0.0), so);  // bitwise
    EXPECT_EQ(hybrid_score(se, so, 1.0), se);  // bitwise
    double b = rng.uniform();
    double h = hybrid_score(se, so, b);
    EXPECT_LE(h, std::max(se, so) + 1e-12);
    EXPECT_GE(h, std::min(se, so) - 1e-12);
  }
  EXPECT_THROW(hybrid_score(0.1, 0.1, 1.5), std::invalid_argument);
}

TEST(HybridScore, MonotoneInEachArgument) {
  Rng rng(82);
  for (int i = 0; i < 100; ++i) {
    double se = rng.uniform(-1, 1), so = rng.uniform(-1, 1), b = rng.uniform(0.1, 0.9);
    double d = rng.uniform(0, 0.5);
    EXPECT_GE(hybrid_score(se + d, so, b), hybrid_score(se, so, b));
    EXPECT_GE(hybrid_score(se, so + d, b), hybrid_score(se, so, b));
  }
}

TEST(QeExpand, SynonymsAppendedAfterToken) {
  SynonymLexicon lex({{"compare", {"comparison", "equate"}}});
  TokenStream out = qe_expand(stream({"compare", "two", "lists"}), lex);
  EXPECT_EQ(out.tokens,
            (std::vector<std::string>{"compare", "comparison", "equate", "two", "lists"}));
}

TEST(QeExpand, EmptyLexiconIsIdentity) {
  SynonymLexicon lex;
  TokenStream q = stream({"alpha", "beta"});
  EXPECT_EQ(qe_expand(q, lex).tokens, q.tokens);
}

TEST(QeExpand, SkipsDuplicates) {
  SynonymLexicon lex({{"a", {"b", "c"}}, {"b", {"a", "d"}}});
  TokenStream out = qe_expand(stream({"a", "b"}), lex);
  EXPECT_EQ(out.tokens, (std::vector<std::string>{"a", "b", "c", "d"}));
}

TEST(SynonymLexicon, DropsSelfMapsAndDuplicates) {
  SynonymLexicon lex({{"x", {"x", "y", "y", "z"}}});
  const auto* syns = lex.find("x");
  ASSERT_NE(syns, nullptr);
  EXPECT_EQ(*syns, (std::vector<std::string>{"y", "z"}));
  EXPECT_EQ(lex.find("absent"), nullptr);
}

TEST(EvalPools, SizesSeedAndFallback) {
  std::vector<Triple> test_triples;
  std::vector<std::string> corpus_ids;
  for (int i = 0; i < 1500; ++i) corpus_ids.push_back("id" + std::to_string(i));
  for (int i = 0; i < 3; ++i) {
    Triple t;
    t.id = "id" + std::to_string(i);
    test_triples.push_back(t);
  }
  auto pools = build_eval_pools(test_triples, corpus_ids, 5);
  ASSERT_EQ(pools.size(), 3u);
  for (const auto& p : pools) {
    EXPECT_EQ(p.negatives.size(), 999u);
    EXPECT_FALSE(p.fallback);
    std::set<std::string> uniq(p.negatives.begin(), p.negatives.end());
    EXPECT_EQ(uniq.size(), p.negatives.size());
    EXPECT_EQ(uniq.count(p.positive_id), 0u);
  }

  auto again = build_eval_pools(test_triples, corpus_ids, 5);
  for (std::size_t i = 0; i < pools.size(); ++i)
    EXPECT_EQ(pools[i].negatives, again[i].negatives);

  std::vector<std::string> small(corpus_ids.begin(), corpus_ids.begin() + 200);
  auto small_pools = build_eval_pools(test_triples, small, 5);
  for (const auto& p : small_pools) {
    EXPECT_EQ(p.negatives.size(), 199u);
    EXPECT_TRUE(p.fallback);
  }
}

TEST(EvalPools, SaveLoadRoundTrip) {
  testsup::TmpDir tmp("pools");
  std::vector<Triple> test_triples(1);
  test_triples[0].id = "id0";
  std::vector<std::string> corpus_ids = {"id0", "id1", "id2", "id3"};
  auto pools = build_eval_pools(test_triples, corpus_ids, 9);
  save_pools(pools, tmp.sub("p.jsonl"));
  auto back = load_pools(tmp.sub("p.jsonl"));
  ASSERT_EQ(back.size(), pools.size());
  EXPECT_EQ(back[0].negatives, pools[0].negatives);
  EXPECT_EQ(back[0].seed, pools[0].seed);
  EXPECT_EQ(back[0].fallback, pools[0].fallback);
}

struct IndexFixture {
  Vocabulary v = vocab_of({"t0", "t1", "t2", "t3", "t4", "t5", "t6", "t7", "t8", "t9"});
  EncoderConfig cfg;
  EncoderModel cs;
  std::vector<IndexSnippet> snippets;

  IndexFixture()
      : cfg([] {
          EncoderConfig c;
          c.model_kind = ModelKind::bag_attention;
          c.embed_dim = 6;
          c.seed = 91;
          return c;
        }()),
        cs(cfg, v, v) {
    for (int i = 0; i < 10; ++i)
      snippets.push_back({"id" + std::to_string(i), {4 + i}, "raw " + std::to_string(i)});
  }
};

TEST(Index, BuildDeterministicAndSized) {
  IndexFixture fx;
  SearchIndex a = build_index(fx.cs, fx.snippets);
  EXPECT_EQ(a.entries.size(), 10u);
  EXPECT_EQ(a.dim, 6);
  EXPECT_EQ(a.fingerprint, fx.cs.fingerprint());
  SearchIndex b = build_index(fx.cs, fx.snippets);
  for (std::size_t i = 0; i < a.entries.size(); ++i)
    EXPECT_EQ((a.entries[i].vec - b.entries[i].vec).cwiseAbs().maxCoeff(), 0.0);

  auto dup = fx.snippets;
  dup.push_back(dup.front());
  EXPECT_THROW(build_index(fx.cs, dup), std::invalid_argument);
  EXPECT_THROW(build_index(fx.cs, {}), std::invalid_argument);
}

TEST(Index, SaveLoadRoundTripAndFingerprint) {
  testsup::TmpDir tmp("idx");
  IndexFixture fx;
  SearchIndex idx = build_index(fx.cs, fx.snippets);
  idx.save(tmp.sub("i.bin"));
  SearchIndex back = SearchIndex::load(tmp.sub("i.bin"));
  EXPECT_EQ(back.fingerprint, idx.fingerprint);
  EXPECT_EQ(back.dim, idx.dim);
  ASSERT_EQ(back.entries.size(), idx.entries.size());
  for (std::size_t i = 0; i < idx.entries.size(); ++i) {
    EXPECT_EQ(back.entries[i].id, idx.entries[i].id);
    EXPECT_EQ(back.entries[i].raw, idx.entries[i].raw);
    EXPECT_EQ((back.entries[i].vec - idx.entries[i].vec).cwiseAbs().maxCoeff(), 0.0);
  }
  // a different model's fingerprint must not match
  EncoderConfig other_cfg = fx.cfg;
  other_cfg.seed = 92;
  EncoderModel other(other_cfg, fx.v, fx.v);
  EXPECT_NE(back.fingerprint, other.fingerprint());
}

TEST(Search, OrderingContracts) {
  IndexFixture fx;
  SearchIndex idx = build_index(fx.cs, fx.snippets);
  HybridConfig cfg;
  cfg.mode = RankMode::base_only;
  auto results = search(idx, fx.cs, nullptr, stream({"t1", "t3"}), cfg, 5);
  EXPECT_EQ(results.size(), 5u);
  std::set<std::string> ids;
  for (std::size_t i = 0; i < results.size(); ++i) {
    EXPECT_TRUE(ids.insert(results[i].first).second);
    if (i) EXPECT_LE(results[i].second, results[i - 1].second);
  }
  auto all = search(idx, fx.cs, nullptr, stream({"t1"}), cfg, 100);
  EXPECT_EQ(all.size(), idx.entries.size());

  EXPECT_THROW(search(idx, fx.cs, nullptr, stream({}), cfg, 5), std::invalid_argument);
  cfg.mode = RankMode::hybrid;
  EXPECT_THROW(search(idx, fx.cs, nullptr, stream({"t1"}), cfg, 5), std::invalid_argument);
  cfg.mode = RankMode::qe_baseline;
  EXPECT_THROW(search(idx, fx.cs, nullptr, stream({"t1"}), cfg, 5), std::invalid_argument);
}

TEST(Search, TieBreakByAscendingId) {
  // Hand-built index with equal vectors: every candidate ties, ids decide.
  SearchIndex idx;
  idx.dim = 6;
  for (int i = 9; i >= 0; --i) {
    SearchIndex::Entry e;
    e.id = "id" + std::to_string(i);
    e.vec = nn::Vec::Ones(6);
    idx.entries.push_back(e);
  }
  IndexFixture fx;
  HybridConfig cfg;
  cfg.mode = RankMode::base_only;
  auto results = search(idx, fx.cs, nullptr, stream({"t1"}), cfg, 10);
  for (std::size_t i = 1; i < results.size(); ++i)
    EXPECT_LT(results[i - 1].first, results[i].first);
}

// Argsort invariance: a strictly increasing transform of all scores leaves
// the ranking unchanged.
TEST(Ranking, InvariantUnderMonotoneTransform) {
  Rng rng(93);
  std::vector<std::pair<std::string, double>> scores;
  for (int i = 0; i < 50; ++i) scores.emplace_back("c" + std::to_string(i), rng.uniform(-1, 1));
  scores[17].first = "pos";
  std::size_t before = frank(scores, "pos").frank;
  for (auto& [id, s] : scores) s = std::exp(3.0 * s) + 1.0;
  EXPECT_EQ(frank(scores, "pos").frank, before);
}

// Orthogonal hand-set embeddings: each description token matches exactly its
// own code token, so the positive is always first.
struct OrthoFixture {
  Vocabulary v = vocab_of(
      {"alpha", "bravo", "carol", "delta", "echo", "foxtrot", "golf", "hotel"});
  EncoderConfig cfg;
  EncoderModel cs;
  std::vector<Triple> triples;
  CodeBank bank;

  OrthoFixture()
      : cfg([] {
          EncoderConfig c;
          c.model_kind = ModelKind::bag_attention;
          c.embed_dim = 8;
          c.seed = 94;
          return c;
        }()),
        cs(cfg, v, v) {
    for (const auto& [name, p] : cs.params().items())
      if (name == "code.emb" || name == "text.emb") {
        p->value.setZero();
        for (int i = 0; i < 8; ++i) p->value(i, 4 + i) = 1.0;
      }
    static const char* words[8] = {"alpha", "bravo", "carol", "delta",
                                   "echo",  "foxtrot", "golf", "hotel"};
    for (int i = 0; i < 8; ++i) {
      Triple t;
      t.id = "id" + std::to_string(i);
      t.code = words[i];
      t.description = words[i];
      t.query = words[i];
      triples.push_back(t);
      bank.add(t.id, cs.embed_vec(TowerKind::code, {v.lookup(words[i])}));
    }
  }
};

TEST(Evaluate, PerfectScorerGivesAllOnes) {
  OrthoFixture fx;
  auto pools = build_eval_pools(fx.triples, {"id0", "id1", "id2", "id3", "id4", "id5", "id6",
                                             "id7"},
                                7);
  HybridConfig cfg;
  cfg.mode = RankMode::base_only;
  MetricReport rep =
      evaluate_testset(fx.cs, nullptr, pools, fx.triples, fx.bank, cfg, EvalField::description);
  EXPECT_DOUBLE_EQ(rep.r_at.at(1), 1.0);
  EXPECT_DOUBLE_EQ(rep.r_at.at(5), 1.0);
  EXPECT_DOUBLE_EQ(rep.r_at.at(10), 1.0);
  EXPECT_DOUBLE_EQ(rep.mrr_value, 1.0);
  EXPECT_EQ(rep.metadata["pool_fallback"], true);
}

TEST(Evaluate, MissingPoolIsAnError) {
  OrthoFixture fx;
  std::vector<EvalPool> pools;  // none
  HybridConfig cfg;
  cfg.mode = RankMode::base_only;
  EXPECT_THROW(
      evaluate_testset(fx.cs, nullptr, pools, fx.triples, fx.bank, cfg, EvalField::description),
      std::invalid_argument);
}

// The no_rl mode differs from hybrid only by which checkpoint the caller
// loads; with the same enricher the reports are bitwise identical.
TEST(Evaluate, NoRlEqualsHybridWithSameCheckpoint) {
  OrthoFixture fx;
  Vocabulary vq = fx.v;
  Seq2SeqConfig qcfg;
  qcfg.embed_dim = 6;
  qcfg.hidden_dim = 8;
  qcfg.max_decode_len = 6;
  qcfg.seed = 95;
  QseModel qse(qcfg, vq, fx.v);

  auto pools = build_eval_pools(fx.triples, {"id0", "id1", "id2", "id3", "id4", "id5", "id6",
                                             "id7"},
                                7);
  HybridConfig hybrid;
  hybrid.mode = RankMode::hybrid;
  MetricReport a =
      evaluate_testset(fx.cs, &qse, pools, fx.triples, fx.bank, hybrid, EvalField::query);
  HybridConfig norl;
  norl.mode = RankMode::no_rl;
  MetricReport b =
      evaluate_testset(fx.cs, &qse, pools, fx.triples, fx.bank, norl, EvalField::query);
  EXPECT_EQ(a.mrr_value, b.mrr_value);
  EXPECT_EQ(a.r_at, b.r_at);
}

}  // namespace
