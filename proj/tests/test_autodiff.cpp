#include "qcs/autodiff.hpp"

#include <gtest/gtest.h>

#include "qcs/nn.hpp"
#include "qcs/rng.hpp"
#include "support/gradcheck.hpp"

using namespace qcs;

namespace {

TEST(Autodiff, MatmulChainGradient) {
  nn::ParamStore store;
  auto w1 = store.add("w1", 4, 3);
  auto w2 = store.add("w2", 1, 4);
  Rng rng(1);
  store.init_uniform(rng, 0.5);
  ad::Mat xval = ad::Mat::Random(3, 1);

  auto make_loss = [&] {
    auto x = ad::constant(xval);
    return ad::matmul(w2, ad::tanh_(ad::matmul(w1, x)));
  };
  auto res = gradcheck::check(store, make_loss);
  EXPECT_TRUE(res.pass) << res.worst_param << " rel " << res.worst_rel;
}

TEST(Autodiff, MixedOpsGradient) {
  nn::ParamStore store;
  auto a = store.add("a", 5, 1);
  auto b = store.add("b", 5, 1);
  Rng rng(2);
  store.init_uniform(rng, 0.8);

  auto make_loss = [&] {
    auto s = ad::sigmoid(ad::mul(a, b));
    auto t = ad::add(ad::scale(a, 0.3), ad::shift(b, -0.1));
    auto joined = ad::vcat({s, ad::relu(t)});
    return ad::sum(ad::mul(joined, joined));
  };
  auto res = gradcheck::check(store, make_loss);
  EXPECT_TRUE(res.pass) << res.worst_param << " rel " << res.worst_rel;
}

TEST(Autodiff, SoftmaxAndPickGradient) {
  nn::ParamStore store;
  auto logits = store.add("logits", 6, 1);
  Rng rng(3);
  store.init_uniform(rng, 1.0);

  auto make_loss = [&] {
    auto w = ad::softmax_col(logits);
    auto picked = ad::log_softmax_pick(logits, 2);
    return ad::add(ad::sum(ad::mul(w, w)), picked);
  };
  auto res = gradcheck::check(store, make_loss);
  EXPECT_TRUE(res.pass) << res.worst_param << " rel " << res.worst_rel;

  auto w = ad::softmax_col(logits);
  EXPECT_NEAR(w->value.sum(), 1.0, 1e-12);
  EXPECT_GE(w->value.minCoeff(), 0.0);
}

TEST(Autodiff, GatherScatterGradient) {
  nn::ParamStore store;
  auto table = store.add("emb", 3, 7);
  Rng rng(4);
  store.init_uniform(rng, 0.5);

  auto make_loss = [&] {
    auto g = ad::gather_cols(table, {1, 4, 1});  // repeated id: grads must accumulate
    return ad::sum(ad::mul(g, g));
  };
  auto res = gradcheck::check(store, make_loss);
  EXPECT_TRUE(res.pass) << res.worst_param << " rel " << res.worst_rel;
}

TEST(Autodiff, CosineGradientAndValues) {
  ad::Vec u(3), v(3);
  u << 1, 0, 0;
  v << 0, 1, 0;
  EXPECT_DOUBLE_EQ(ad::cosine_value(u, u), 1.0);
  EXPECT_DOUBLE_EQ(ad::cosine_value(u, v), 0.0);
  EXPECT_DOUBLE_EQ(ad::cosine_value(u, ad::Vec(-u)), -1.0);
  EXPECT_DOUBLE_EQ(ad::cosine_value(ad::Vec(ad::Vec::Zero(3)), u), 0.0);

  nn::ParamStore store;
  auto a = store.add("a", 4, 1);
  auto b = store.add("b", 4, 1);
  Rng rng(5);
  store.init_uniform(rng, 0.7);
  auto make_loss = [&] { return ad::cosine(a, b); };
  auto res = gradcheck::check(store, make_loss);
  EXPECT_TRUE(res.pass) << res.worst_param << " rel " << res.worst_rel;
}

TEST(Autodiff, DetachStopsGradient) {
  nn::ParamStore store;
  auto a = store.add("a", 2, 1);
  Rng rng(6);
  store.init_uniform(rng, 0.5);
  store.zero_grad();
  auto loss = ad::sum(ad::mul(ad::detach(a), a));
  ad::backward(loss);
  // d/da of detach(a) * a is detach(a), not 2a.
  EXPECT_TRUE(a->grad.isApprox(a->value));
}

TEST(Autodiff, WeightedSumZeroWeightsGivesZeroGradient) {
  nn::ParamStore store;
  auto a = store.add("a", 3, 1);
  Rng rng(7);
  store.init_uniform(rng, 0.5);
  store.zero_grad();
  auto t1 = ad::sum(ad::tanh_(a));
  auto t2 = ad::sum(ad::mul(a, a));
  auto loss = ad::weighted_sum({t1, t2}, {0.0, 0.0});
  ad::backward(loss);
  EXPECT_EQ(loss->scalar(), 0.0);
  EXPECT_EQ(a->grad.cwiseAbs().maxCoeff(), 0.0);
}

TEST(Autodiff, BackwardRequiresScalarRoot) {
  auto a = ad::leaf(ad::Mat::Ones(2, 2));
  EXPECT_THROW(ad::backward(a), std::invalid_argument);
}

TEST(Adam, DecreasesSimpleQuadratic) {
  nn::ParamStore store;
  auto x = store.add("x", 3, 1);
  Rng rng(8);
  store.init_uniform(rng, 0.9);
  nn::Adam opt(store, 0.05);
  double first = 0;
  double last = 0;
  for (int i = 0; i < 200; ++i) {
    opt.zero_grad();
    auto loss = ad::sum(ad::mul(x, x));
    if (i == 0) first = loss->scalar();
    last = loss->scalar();
    ad::backward(loss);
    opt.step();
  }
  EXPECT_LT(last, first * 0.01);
}

TEST(Adam, ThrowsOnNonFiniteParameters) {
  nn::ParamStore store;
  auto x = store.add("x", 1, 1);
  x->value(0, 0) = 1.0;
  nn::Adam opt(store, 1.0, 0.0);  // no clipping
  opt.zero_grad();
  x->grad(0, 0) = std::numeric_limits<double>::infinity();
  EXPECT_THROW(opt.step(), std::runtime_error);
}

}  // namespace
