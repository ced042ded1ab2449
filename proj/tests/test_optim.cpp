#include <gtest/gtest.h>

#include <cmath>

#include "cardiolens/optim.hpp"
#include "support.hpp"

using namespace cardiolens;
using namespace cardiolens::optim;
using testsupport::Rng;

namespace {

/// Parameter for f(w) = 1/2 ||w||^2 whose gradient is set to w before each step.
Parameter quadratic_param(std::size_t n, double w0 = 1.0) {
  return {"w", Tensor::filled({n}, w0, true), true};
}

void set_grad_to_value(Parameter& p) {
  auto g = p.value.mutable_grad();
  for (std::size_t i = 0; i < g.size(); ++i) g[i] = p.value[i];
}

double half_sq_norm(const Parameter& p) {
  double s = 0.0;
  for (double v : p.value.data()) s += v * v;
  return 0.5 * s;
}

double run_quadratic(Kind kind, const Hyperparams& hp, std::size_t steps, std::size_t n = 4) {
  Optimizer opt(kind, hp);
  std::vector<Parameter> params{quadratic_param(n)};
  for (std::size_t k = 0; k < steps; ++k) {
    set_grad_to_value(params[0]);
    opt.step(params);
  }
  return half_sq_norm(params[0]);
}

}  // namespace

TEST(Sgd, OneStepOnHalfSquare) {
  std::vector<double> w{1.0};
  const std::vector<double> g{1.0};
  sgd_update(w, g, 0.1);
  EXPECT_NEAR(w[0], 0.9, 1e-12);
}

TEST(Sgd, HundredStepsGeometric) {
  std::vector<double> w{1.0};
  for (int k = 0; k < 100; ++k) {
    const std::vector<double> g{w[0]};
    sgd_update(w, g, 0.1);
  }
  EXPECT_NEAR(w[0], std::pow(0.9, 100), 1e-15);
  EXPECT_NEAR(w[0], 2.656e-5, 1e-8);
}

TEST(Sgd, ZeroGradientLeavesParameters) {
  std::vector<double> w{0.3, -2.0};
  const std::vector<double> g{0.0, 0.0};
  sgd_update(w, g, 0.5);
  EXPECT_EQ(w, (std::vector<double>{0.3, -2.0}));
}

TEST(Sgd, SizeMismatchRejected) {
  std::vector<double> w(3);
  const std::vector<double> g(2);
  EXPECT_THROW(sgd_update(w, g, 0.1), ShapeError);
  std::vector<double> z(1);
  EXPECT_THROW(momentum_update(w, std::vector<double>(3), z, 0.1, 0.9), ShapeError);
}

TEST(Momentum, TwoHandSteps) {
  std::vector<double> w{1.0}, z{0.0};
  momentum_update(w, std::vector<double>{w[0]}, z, 0.1, 0.9);
  EXPECT_NEAR(z[0], 1.0, 1e-12);
  EXPECT_NEAR(w[0], 0.9, 1e-12);
  momentum_update(w, std::vector<double>{w[0]}, z, 0.1, 0.9);
  EXPECT_NEAR(z[0], 1.8, 1e-12);
  EXPECT_NEAR(w[0], 0.72, 1e-12);
}

TEST(Momentum, ZeroBetaBitEqualToSgd) {
  for (std::uint64_t seed = 0; seed < 20; ++seed) {
    Rng rng(seed);
    std::vector<double> a(5), b(5), z(5, 0.0);
    for (std::size_t i = 0; i < 5; ++i) a[i] = b[i] = testsupport::uniform(rng, -3, 3);
    for (int k = 0; k < 50; ++k) {
      std::vector<double> g(5);
      for (double& v : g) v = testsupport::uniform(rng, -1, 1);
      sgd_update(a, g, 0.05);
      momentum_update(b, g, z, 0.05, 0.0);
      for (std::size_t i = 0; i < 5; ++i) ASSERT_EQ(a[i], b[i]);
    }
  }
}

TEST(Momentum, HeavyBallFormMatchesTwoStage) {
  for (std::uint64_t seed = 0; seed < 20; ++seed) {
    Rng rng(seed);
    const double alpha = testsupport::uniform(rng, 0.01, 0.5), beta = testsupport::uniform(rng, 0.0, 0.95);
    const double curvature = testsupport::uniform(rng, 0.1, 2.0);
    std::vector<double> w{testsupport::uniform(rng, -2, 2)}, z{0.0};
    double prev = w[0], cur = w[0];
    for (int k = 0; k < 20; ++k) {
      const double g_cur = curvature * cur;
      const double next = cur - alpha * g_cur + beta * (cur - prev);
      prev = cur;
      cur = next;
      momentum_update(w, std::vector<double>{curvature * w[0]}, z, alpha, beta);
      ASSERT_NEAR(w[0], cur, 1e-12) << "seed " << seed << " step " << k;
    }
  }
}

TEST(RmsProp, OneHandStep) {
  std::vector<double> w{1.0}, s{0.0};
  rmsprop_update(w, std::vector<double>{1.0}, s, 0.9, 0.1, 1e-8);
  EXPECT_NEAR(s[0], 0.1, 1e-15);
  EXPECT_NEAR(w[0], 1.0 - 0.1 / std::sqrt(0.1 + 1e-8), 1e-12);
  EXPECT_NEAR(w[0], 0.683772, 1e-6);
}

TEST(RmsProp, ZeroGradientForever) {
  std::vector<double> w{0.7, -1.1}, s{0.0, 0.0};
  for (int k = 0; k < 100; ++k) rmsprop_update(w, std::vector<double>{0.0, 0.0}, s, 0.9, 0.1, 1e-8);
  EXPECT_EQ(w, (std::vector<double>{0.7, -1.1}));
}

TEST(RmsProp, ConstantGradientStepApproachesEta) {
  std::vector<double> w{0.0}, s{0.0};
  const double g = -3.0, eta = 0.01;
  double step = 0.0;
  for (int k = 0; k < 400; ++k) {
    const double before = w[0];
    rmsprop_update(w, std::vector<double>{g}, s, 0.9, eta, 1e-8);
    step = w[0] - before;
  }
  EXPECT_NEAR(step, eta, 1e-8);
  EXPECT_NEAR(s[0], g * g, 1e-9);
}

TEST(AdaptiveMoment, FirstStepHand) {
  std::vector<double> w{0.0}, m{0.0}, v{0.0};
  adaptive_moment_update(w, std::vector<double>{1.0}, m, v, 0.001, 0.9, 0.999, 1e-8);
  EXPECT_NEAR(m[0], 0.1, 1e-15);
  EXPECT_NEAR(v[0], 0.001, 1e-15);
  EXPECT_NEAR(w[0], -0.001 * 0.1 / std::sqrt(0.001 + 1e-8), 1e-15);
  EXPECT_NEAR(w[0], -3.1623e-3, 1e-7);
}

TEST(AdaptiveMoment, ZeroGradientFromFreshState) {
  std::vector<double> w{2.5}, m{0.0}, v{0.0};
  adaptive_moment_update(w, std::vector<double>{0.0}, m, v, 0.001, 0.9, 0.999, 1e-8);
  EXPECT_EQ(w[0], 2.5);
}

TEST(AdaptiveMoment, ZeroBetasGiveSignStep) {
  Rng rng(3);
  for (int trial = 0; trial < 50; ++trial) {
    const double g = testsupport::uniform(rng, -5, 5), lr = 0.01;
    std::vector<double> w{0.0}, m{0.0}, v{0.0};
    adaptive_moment_update(w, std::vector<double>{g}, m, v, lr, 0.0, 0.0, 1e-8);
    EXPECT_NEAR(w[0], -lr * g / std::sqrt(g * g + 1e-8), 1e-15);
    if (std::abs(g) > 0.01) {
      EXPECT_NEAR(w[0], -lr * (g > 0 ? 1.0 : -1.0), 1e-6 * lr / std::abs(g) + 1e-9);
    }
  }
}

TEST(Optimizer, ConvergesOnQuadratic) {
  Hyperparams hp;
  EXPECT_LT(run_quadratic(Kind::kSgd, hp, 500), 1e-3);
  EXPECT_LT(run_quadratic(Kind::kMomentum, hp, 500), 1e-3);
  Hyperparams fast = hp;
  fast.set_learning_rate(Kind::kRmsProp, 0.01);
  fast.set_learning_rate(Kind::kAdaptiveMoment, 0.01);
  EXPECT_LT(run_quadratic(Kind::kRmsProp, fast, 500), 1e-3);
  EXPECT_LT(run_quadratic(Kind::kAdaptiveMoment, fast, 500), 1e-3);
}

TEST(Optimizer, FrozenParametersUntouched) {
  for (Kind kind : {Kind::kSgd, Kind::kMomentum, Kind::kRmsProp, Kind::kAdaptiveMoment}) {
    Optimizer opt(kind, Hyperparams{});
    std::vector<Parameter> params{quadratic_param(3), {"frozen", Tensor::filled({3}, 1.0, true), false}};
    for (auto& p : params) set_grad_to_value(p);
    opt.step(params);
    EXPECT_LT(params[0].value[0], 1.0) << kind_name(kind);
    for (double v : params[1].value.data()) EXPECT_EQ(v, 1.0) << kind_name(kind);
  }
}

TEST(Optimizer, SlotsStayNonnegative) {
  for (std::uint64_t seed = 0; seed < 20; ++seed) {
    Rng rng(seed);
    Optimizer rms(Kind::kRmsProp, Hyperparams{});
    Optimizer adam(Kind::kAdaptiveMoment, Hyperparams{});
    std::vector<Parameter> a{quadratic_param(4)}, b{quadratic_param(4)};
    for (int k = 0; k < 30; ++k) {
      for (auto* ps : {&a, &b}) {
        auto g = (*ps)[0].value.mutable_grad();
        for (double& x : g) x = testsupport::uniform(rng, -10, 10);
      }
      rms.step(a);
      adam.step(b);
      for (double s : *rms.find_slot("sq", "w")) ASSERT_GE(s, 0.0);
      for (double s : *adam.find_slot("v", "w")) ASSERT_GE(s, 0.0);
    }
  }
}

TEST(Optimizer, StateRoundTripResumesIdentically) {
  Optimizer a(Kind::kAdaptiveMoment, Hyperparams{});
  std::vector<Parameter> pa{quadratic_param(3)};
  for (int k = 0; k < 5; ++k) {
    set_grad_to_value(pa[0]);
    a.step(pa);
  }
  Optimizer b(Kind::kAdaptiveMoment, Hyperparams{});
  b.load_state(a.state());
  std::vector<Parameter> pb{{"w", Tensor(pa[0].value.shape(), testsupport::values(pa[0].value), true), true}};
  for (int k = 0; k < 5; ++k) {
    set_grad_to_value(pa[0]);
    set_grad_to_value(pb[0]);
    a.step(pa);
    b.step(pb);
  }
  for (std::size_t i = 0; i < 3; ++i) EXPECT_EQ(pa[0].value[i], pb[0].value[i]);
  ASSERT_EQ(a.state().size(), 2u);
  EXPECT_EQ(a.state()[0].name, "opt.m.w");
}

TEST(Optimizer, ParsesKindsAndValidatesHyperparameters) {
  EXPECT_EQ(parse_kind("rmsprop"), Kind::kRmsProp);
  EXPECT_EQ(parse_kind("adam"), Kind::kAdaptiveMoment);
  EXPECT_THROW(parse_kind("lbfgs"), std::invalid_argument);
  Hyperparams hp;
  hp.momentum_beta = 1.0;
  EXPECT_THROW(Optimizer(Kind::kMomentum, hp), std::invalid_argument);
  EXPECT_THROW(Hyperparams{}.set_learning_rate(Kind::kSgd, 0.0), std::invalid_argument);
}
