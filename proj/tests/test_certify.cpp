#include <gtest/gtest.h>

#include <cmath>
#include <numbers>

#include "heatsmooth/certify.hpp"

using namespace heatsmooth;

namespace {

// Upper binomial tail P(X >= k), X ~ Bin(n, p), summed in log space.
double binom_upper_tail(std::size_t k, std::size_t n, double p) {
  double s = 0.0;
  for (std::size_t j = k; j <= n; ++j) {
    const double lg = std::lgamma(n + 1.0) - std::lgamma(j + 1.0) - std::lgamma(n - j + 1.0) +
                      static_cast<double>(j) * std::log(p) + static_cast<double>(n - j) * std::log1p(-p);
    s += std::exp(lg);
  }
  return s;
}

// The lower bound is the p at which the upper tail equals alpha; find it by bisection.
double cp_lower_bisect(std::size_t k, std::size_t n, double alpha) {
  double lo = 0.0, hi = 1.0;
  for (int i = 0; i < 200; ++i) {
    const double mid = 0.5 * (lo + hi);
    (binom_upper_tail(k, n, mid) < alpha ? lo : hi) = mid;
  }
  return 0.5 * (lo + hi);
}

Mlp two_class_probs(double bias0, double bias1) {
  Mlp m = init_mlp({2, 3, 2}, Activation::Relu, 1, OutputMode::Probabilities);
  for (auto& w : m.weights) w = Tensor(w.shape(), 0.0);
  m.biases.back()[0] = bias0;
  m.biases.back()[1] = bias1;
  return m;
}

}  // namespace

TEST(Certify, LBoundClosedForm) {
  const std::vector<double> p{0.65, 0.35};
  EXPECT_NEAR(l_bound(p, 0.1), 0.1 * std::sqrt(std::numbers::pi / 2.0) * 0.3, 1e-15);
  EXPECT_NEAR(l_bound(p, 0.1), 0.03760, 1e-5);
}

TEST(Certify, LBoundUsesSortedGapAndK) {
  const std::vector<double> p{0.1, 0.6, 0.3};
  const double s = std::sqrt(std::numbers::pi / 2.0);
  EXPECT_NEAR(l_bound(p, 0.5, 1), 0.5 * s * 0.3, 1e-14);
  EXPECT_NEAR(l_bound(p, 0.5, 2), 0.5 * s * 0.2, 1e-14);
  EXPECT_DOUBLE_EQ(l_bound(std::vector<double>{0.5, 0.5}, 0.3), 0.0);
}

TEST(Certify, LBoundRejectsLogitsAndBadK) {
  EXPECT_THROW(l_bound(std::vector<double>{2.0, -1.0}, 0.1), InputError);
  EXPECT_THROW(l_bound(std::vector<double>{0.3, 0.3}, 0.1), InputError);
  EXPECT_THROW(l_bound(std::vector<double>{0.5, 0.5}, 0.1, 2), InputError);
  EXPECT_THROW(l_bound(std::vector<double>{0.5, 0.5}, 0.1, 0), InputError);
}

TEST(Certify, NormalInverseRoundTrips) {
  for (double p = 1e-10; p < 1.0; p = p < 0.01 ? p * 10 : p + 0.01) {
    const double z = normal_inv_cdf(p);
    EXPECT_NEAR(normal_cdf(z), p, 1e-9 * std::max(1.0, p)) << p;
    EXPECT_NEAR(normal_inv_cdf(1.0 - p), -z, 1e-7 * std::max(1.0, std::abs(z))) << p;
  }
  EXPECT_NEAR(normal_inv_cdf(0.975), 1.959963984540054, 1e-12);
  EXPECT_DOUBLE_EQ(normal_inv_cdf(0.5), 0.0);
  EXPECT_THROW(normal_inv_cdf(0.0), InputError);
  EXPECT_THROW(normal_inv_cdf(1.0), InputError);
}

TEST(Certify, ClopperPearsonAllSuccesses) {
  const auto b = clopper_pearson_lower(100, 100, 0.001);
  EXPECT_NEAR(b.lower, std::pow(0.001, 0.01), 1e-15);
  EXPECT_NEAR(b.lower, 0.93325, 1e-5);
  EXPECT_NEAR(0.25 * normal_inv_cdf(b.lower), 0.3751, 1e-3);
}

TEST(Certify, ClopperPearsonMatchesBinomialTail) {
  for (auto [k, n] : {std::pair<std::size_t, std::size_t>{70, 100}, {1, 10}, {999, 1000}, {5000, 10000}}) {
    const double got = clopper_pearson_lower(k, n, 0.001).lower;
    EXPECT_NEAR(got, cp_lower_bisect(k, n, 0.001), 1e-9) << k << "/" << n;
    EXPECT_LT(got, static_cast<double>(k) / static_cast<double>(n));
  }
  EXPECT_EQ(clopper_pearson_lower(0, 50, 0.01).lower, 0.0);
  EXPECT_THROW(clopper_pearson_lower(3, 2, 0.01), InputError);
  EXPECT_THROW(clopper_pearson_lower(1, 2, 1.5), InputError);
}

TEST(Certify, DeterministicUsesOnePass) {
  Mlp v = two_class_probs(2.0, 0.0);
  const auto r = deterministic_certify(v, Tensor::vector({0.1, 0.2}), 0.25);
  EXPECT_EQ(r.forward_passes, 1u);
  ASSERT_FALSE(r.abstained());
  EXPECT_EQ(*r.predicted, 0u);
  const double p1 = 1.0 / (1.0 + std::exp(-2.0));
  EXPECT_NEAR(r.radius, 0.25 * normal_inv_cdf(p1), 1e-12);
}

TEST(Certify, DeterministicAbstainsBelowHalf) {
  Mlp v = init_mlp({2, 3, 3}, Activation::Relu, 1, OutputMode::Probabilities);
  for (auto& w : v.weights) w = Tensor(w.shape(), 0.0);
  v.biases.back()[0] = 0.5;  // p ~ (0.45, 0.27, 0.27)
  const auto r = deterministic_certify(v, Tensor::vector({0.0, 0.0}), 0.25);
  EXPECT_TRUE(r.abstained());
  EXPECT_EQ(r.radius, 0.0);
}

TEST(Certify, DeterministicRequiresProbabilities) {
  Mlp v = two_class_probs(1.0, 0.0).with_output_mode(OutputMode::Logits);
  EXPECT_THROW(deterministic_certify(v, Tensor::vector({0.0, 0.0}), 0.25), InputError);
  EXPECT_THROW(l_bound_certify(v, Tensor::vector({0.0, 0.0}), 0.25), InputError);
}

TEST(Certify, SaturatedProbabilityGivesFiniteRadius) {
  Mlp v = two_class_probs(60.0, 0.0);
  const auto r = deterministic_certify(v, Tensor::vector({0.0, 0.0}), 1.0);
  EXPECT_TRUE(std::isfinite(r.radius));
  EXPECT_GT(r.radius, 7.0);
}

TEST(Certify, CohenCountsPasses) {
  Mlp f = two_class_probs(2.0, 0.0);
  CohenParams prm;
  prm.n0 = 37;
  prm.n = 555;
  prm.chunk = 100;
  const auto r = cohen_certify(f, Tensor::vector({0.0, 0.0}), 0.25, prm, 7);
  EXPECT_EQ(r.forward_passes, 37u + 555u);
}

TEST(Certify, CohenConstantClassifier) {
  Mlp f = two_class_probs(0.0, 1.0);
  CohenParams prm;
  prm.n0 = 10;
  prm.n = 100;
  const auto r = cohen_certify(f, Tensor::vector({0.0, 0.0}), 0.25, prm, 7, 0, 1);
  ASSERT_FALSE(r.abstained());
  EXPECT_EQ(*r.predicted, 1u);
  EXPECT_TRUE(r.correct);
  EXPECT_NEAR(r.radius, 0.3751, 1e-3);
}

TEST(Certify, CohenHalfPlaneIsSoundAndTight) {
  // Class 1 iff x0 > 0; at x0 = 0.3 the true l2 distance to the boundary is 0.3.
  auto half_plane = [](const Tensor& xb) {
    std::vector<std::size_t> out(xb.rows());
    for (std::size_t r = 0; r < xb.rows(); ++r) out[r] = xb.at(r, 0) > 0.0 ? 1 : 0;
    return out;
  };
  CohenParams prm;
  prm.n = 100000;
  const auto r = cohen_certify(half_plane, 2, Tensor::vector({0.3, -1.0}), 0.25, prm, 11);
  ASSERT_FALSE(r.abstained());
  EXPECT_EQ(*r.predicted, 1u);
  EXPECT_LE(r.radius, 0.3);
  EXPECT_GT(r.radius, 0.28);
}

TEST(Certify, CohenAbstainsOnBoundary) {
  auto half_plane = [](const Tensor& xb) {
    std::vector<std::size_t> out(xb.rows());
    for (std::size_t r = 0; r < xb.rows(); ++r) out[r] = xb.at(r, 0) > 0.0 ? 1 : 0;
    return out;
  };
  const auto r = cohen_certify(half_plane, 2, Tensor::vector({0.0, 0.0}), 0.25, CohenParams{}, 3);
  EXPECT_TRUE(r.abstained());
}

TEST(Certify, CurveIsNonIncreasingAndHandlesAbstain) {
  std::vector<CertResult> rs(4);
  rs[0].predicted = 0;
  rs[0].correct = true;
  rs[0].radius = 0.5;
  rs[1].predicted = 1;
  rs[1].correct = true;
  rs[1].radius = 0.1;
  rs[2].predicted = 1;
  rs[2].correct = false;
  rs[2].radius = 0.9;
  // rs[3] abstains
  const auto grid = radius_grid(1.0, 11);
  const auto inc = certified_accuracy_curve(rs, grid, AbstainPolicy::Incorrect);
  const auto exc = certified_accuracy_curve(rs, grid, AbstainPolicy::Exclude);
  EXPECT_DOUBLE_EQ(inc[0].accuracy, 0.5);
  EXPECT_DOUBLE_EQ(exc[0].accuracy, 2.0 / 3.0);
  EXPECT_DOUBLE_EQ(inc[3].accuracy, 0.25);
  EXPECT_DOUBLE_EQ(inc[10].accuracy, 0.0);
  for (std::size_t i = 1; i < inc.size(); ++i) {
    EXPECT_LE(inc[i].accuracy, inc[i - 1].accuracy);
    EXPECT_LE(exc[i].accuracy, exc[i - 1].accuracy);
  }
  EXPECT_THROW(certified_accuracy_curve({}, grid), InputError);
}
