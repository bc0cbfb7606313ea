#pragma once

// Certified l2 radii: the Lipschitz bound of Gaussian-averaged models, Cohen-style sampling
// certification with exact binomial bounds, its single-query deterministic counterpart,
// and certified-accuracy curves.

#include <algorithm>
#include <cmath>
#include <concepts>
#include <cstdint>
#include <fstream>
#include <functional>
#include <numbers>
#include <optional>
#include <random>
#include <span>
#include <string>
#include <vector>

#include <boost/math/special_functions/beta.hpp>

#include "heatsmooth/error.hpp"
#include "heatsmooth/nn.hpp"
#include "heatsmooth/rng.hpp"
#include "heatsmooth/tensor.hpp"

namespace heatsmooth {

enum class CertMethod { LBound, Deterministic, Cohen };

inline std::string to_string(CertMethod m) {
  switch (m) {
    case CertMethod::LBound: return "l_bound";
    case CertMethod::Deterministic: return "deterministic";
    case CertMethod::Cohen: return "cohen";
  }
  return "?";
}

struct CertResult {
  std::size_t id = 0;
  std::optional<std::size_t> predicted;  // empty when abstaining
  double radius = 0.0;
  CertMethod method = CertMethod::Deterministic;
  double sigma = 0.0;
  bool correct = false;
  std::uint64_t forward_passes = 0;

  bool abstained() const { return !predicted.has_value(); }
};

struct BinomialBound {
  std::size_t successes = 0;
  std::size_t trials = 0;
  double alpha = 0.001;
  double lower = 0.0;
};

inline double normal_cdf(double z) { return 0.5 * std::erfc(-z / std::numbers::sqrt2); }

// Acklam's rational approximation refined by one Newton step on normal_cdf.
inline double normal_inv_cdf(double p) {
  if (!(p > 0.0 && p < 1.0)) throw InputError("normal_inv_cdf: p must lie in (0,1)");
  static constexpr double a[] = {-3.969683028665376e+01, 2.209460984245205e+02, -2.759285104469687e+02,
                                 1.383577518672690e+02, -3.066479806614716e+01, 2.506628277459239e+00};
  static constexpr double b[] = {-5.447609879822406e+01, 1.615858368580409e+02, -1.556989798598866e+02,
                                 6.680131188771972e+01, -1.328068155288572e+01};
  static constexpr double c[] = {-7.784894002430293e-03, -3.223964580411365e-01, -2.400758277161838e+00,
                                 -2.549732539343734e+00, 4.374664141464968e+00, 2.938163982698783e+00};
  static constexpr double d[] = {7.784695709041462e-03, 3.224671290700398e-01, 2.445134137142996e+00,
                                 3.754408661907416e+00};
  constexpr double p_low = 0.02425;
  double z;
  if (p < p_low) {
    const double q = std::sqrt(-2.0 * std::log(p));
    z = (((((c[0] * q + c[1]) * q + c[2]) * q + c[3]) * q + c[4]) * q + c[5]) /
        ((((d[0] * q + d[1]) * q + d[2]) * q + d[3]) * q + 1.0);
  } else if (p <= 1.0 - p_low) {
    const double q = p - 0.5;
    const double r = q * q;
    z = (((((a[0] * r + a[1]) * r + a[2]) * r + a[3]) * r + a[4]) * r + a[5]) * q /
        (((((b[0] * r + b[1]) * r + b[2]) * r + b[3]) * r + b[4]) * r + 1.0);
  } else {
    const double q = std::sqrt(-2.0 * std::log1p(-p));
    z = -(((((c[0] * q + c[1]) * q + c[2]) * q + c[3]) * q + c[4]) * q + c[5]) /
        ((((d[0] * q + d[1]) * q + d[2]) * q + d[3]) * q + 1.0);
  }
  const double pdf = std::exp(-0.5 * z * z) / std::sqrt(2.0 * std::numbers::pi);
  if (pdf > 0.0) z -= (normal_cdf(z) - p) / pdf;
  return z;
}

// One-sided (1 - alpha) Clopper-Pearson lower bound on a binomial proportion.
inline BinomialBound clopper_pearson_lower(std::size_t successes, std::size_t trials, double alpha) {
  if (successes > trials) throw InputError("clopper_pearson_lower: successes exceed trials");
  if (!(alpha > 0.0 && alpha < 1.0)) throw InputError("clopper_pearson_lower: alpha must lie in (0,1)");
  BinomialBound b{successes, trials, alpha, 0.0};
  if (successes == 0) return b;
  if (successes == trials) {
    b.lower = std::pow(alpha, 1.0 / static_cast<double>(trials));
    return b;
  }
  b.lower = boost::math::ibeta_inv(static_cast<double>(successes), static_cast<double>(trials - successes + 1), alpha);
  return b;
}

// sigma sqrt(pi/2) (k-th largest - (k+1)-th largest) for a probability vector.
inline double l_bound(std::span<const double> probs, double sigma, std::size_t k = 1) {
  if (probs.size() < 2) throw InputError("l_bound: need at least two classes");
  if (k < 1 || k >= probs.size()) throw InputError("l_bound: k must satisfy 1 <= k < number of classes");
  if (!(sigma >= 0.0)) throw InputError("l_bound: sigma must be non-negative");
  double total = 0.0;
  for (double p : probs) {
    if (!(p >= -1e-12 && p <= 1.0 + 1e-12))
      throw InputError("l_bound: output outside [0,1]; the bound needs class probabilities");
    total += p;
  }
  if (std::abs(total - 1.0) > 1e-9) throw InputError("l_bound: outputs do not sum to 1");
  std::vector<double> sorted(probs.begin(), probs.end());
  std::sort(sorted.begin(), sorted.end(), std::greater<>());
  return sigma * std::sqrt(std::numbers::pi / 2.0) * (sorted[k - 1] - sorted[k]);
}

// sigma * Phi^{-1}(p) for p > 1/2. p is capped just below one so a saturated softmax still
// yields a finite radius.
inline double gaussian_radius(double p, double sigma) {
  const double capped = std::min(p, 1.0 - 1e-15);
  return sigma * normal_inv_cdf(capped);
}

namespace detail {

inline void require_probabilities(const Mlp& m, const char* who) {
  if (m.output_mode != OutputMode::Probabilities)
    throw InputError(std::string(who) + ": model must be in probabilities mode");
}

}  // namespace detail

inline CertResult l_bound_certify(const Mlp& v, const Tensor& x, double sigma, std::size_t id = 0, int label = -1) {
  detail::require_probabilities(v, "l_bound_certify");
  const std::uint64_t before = v.passes.get();
  const Tensor p = forward(v, x);
  CertResult r;
  r.id = id;
  r.method = CertMethod::LBound;
  r.sigma = sigma;
  r.predicted = argmax(p.data());
  r.radius = l_bound(p.data(), sigma, 1);
  r.correct = label >= 0 && static_cast<int>(*r.predicted) == label;
  r.forward_passes = v.passes.get() - before;
  return r;
}

// Top-class probability of one model query used as p_A.
inline CertResult deterministic_certify(const Mlp& v, const Tensor& x, double sigma, std::size_t id = 0,
                                        int label = -1) {
  detail::require_probabilities(v, "deterministic_certify");
  const std::uint64_t before = v.passes.get();
  const Tensor p = forward(v, x);
  CertResult r;
  r.id = id;
  r.method = CertMethod::Deterministic;
  r.sigma = sigma;
  r.forward_passes = v.passes.get() - before;
  const std::size_t top = argmax(p.data());
  if (p[top] > 0.5) {
    r.predicted = top;
    r.radius = gaussian_radius(p[top], sigma);
    r.correct = label >= 0 && static_cast<int>(top) == label;
  }
  return r;
}

struct CohenParams {
  std::size_t n0 = 100;
  std::size_t n = 10000;
  double alpha = 0.001;
  std::size_t chunk = 2048;
};

// Class decisions for a batch of inputs (one per row).
template <class C>
concept BatchClassifier = requires(C c, const Tensor& x) {
  { c(x) } -> std::convertible_to<std::vector<std::size_t>>;
};

inline auto mlp_classifier(const Mlp& m) {
  return [&m](const Tensor& xb) {
    const Tensor z = logits(m, xb);
    std::vector<std::size_t> out(z.rows());
    for (std::size_t r = 0; r < z.rows(); ++r) out[r] = argmax(z.row(r));
    return out;
  };
}

namespace detail {

template <BatchClassifier C>
std::vector<std::size_t> noisy_counts(C& classify, const Tensor& x, double sigma, std::size_t n, std::size_t classes,
                                      std::size_t chunk, Rng& rng) {
  std::vector<std::size_t> counts(classes, 0);
  std::normal_distribution<double> nd(0.0, 1.0);
  const std::size_t d = x.size();
  for (std::size_t done = 0; done < n;) {
    const std::size_t b = std::min(chunk, n - done);
    Tensor xb({b, d});
    for (std::size_t r = 0; r < b; ++r)
      for (std::size_t i = 0; i < d; ++i) xb.at(r, i) = x[i] + sigma * nd(rng);
    for (std::size_t c : classify(static_cast<const Tensor&>(xb))) {
      if (c >= classes) throw InputError("cohen_certify: classifier returned an out-of-range class");
      ++counts[c];
    }
    done += b;
  }
  return counts;
}

}  // namespace detail

// Sampling-based certification: pick the majority class from n0 noisy samples, then lower-bound
// its probability from n fresh samples.
template <BatchClassifier C>
CertResult cohen_certify(C classify, std::size_t num_classes, const Tensor& x, double sigma, const CohenParams& prm,
                         std::uint64_t seed, std::size_t id = 0, int label = -1) {
  if (prm.n0 == 0 || prm.n == 0) throw InputError("cohen_certify: n0 and n must be positive");
  Rng rng = make_rng(seed, {0xc0e, id});
  const auto selection = detail::noisy_counts(classify, x, sigma, prm.n0, num_classes, prm.chunk, rng);
  const std::size_t guess = argmax(std::vector<double>(selection.begin(), selection.end()));
  const auto estimation = detail::noisy_counts(classify, x, sigma, prm.n, num_classes, prm.chunk, rng);
  const BinomialBound bound = clopper_pearson_lower(estimation[guess], prm.n, prm.alpha);

  CertResult r;
  r.id = id;
  r.method = CertMethod::Cohen;
  r.sigma = sigma;
  r.forward_passes = prm.n0 + prm.n;
  if (bound.lower > 0.5) {
    r.predicted = guess;
    r.radius = sigma * normal_inv_cdf(bound.lower);
    r.correct = label >= 0 && static_cast<int>(guess) == label;
  }
  return r;
}

inline CertResult cohen_certify(const Mlp& f, const Tensor& x, double sigma, const CohenParams& prm,
                                std::uint64_t seed, std::size_t id = 0, int label = -1) {
  const std::uint64_t before = f.passes.get();
  CertResult r = cohen_certify(mlp_classifier(f), f.num_classes(), x, sigma, prm, seed, id, label);
  r.forward_passes = f.passes.get() - before;
  return r;
}

// Majority vote of the classifier over n noisy copies of x (the stochastic prediction path).
template <BatchClassifier C>
std::size_t noisy_vote(C classify, std::size_t num_classes, const Tensor& x, double sigma, std::size_t n,
                       std::uint64_t seed, std::size_t id = 0, std::size_t chunk = 2048) {
  if (n == 0) throw InputError("noisy_vote: n must be positive");
  Rng rng = make_rng(seed, {0x707e, id});
  const auto counts = detail::noisy_counts(classify, x, sigma, n, num_classes, chunk, rng);
  return argmax(std::vector<double>(counts.begin(), counts.end()));
}

enum class AbstainPolicy { Incorrect, Exclude };

struct CurvePoint {
  double radius = 0.0;
  double accuracy = 0.0;
};

// Fraction of examples that are correct with certified radius >= r. Abstentions count as
// incorrect, or are dropped from the denominator under AbstainPolicy::Exclude.
inline std::vector<CurvePoint> certified_accuracy_curve(const std::vector<CertResult>& results,
                                                        const std::vector<double>& radii,
                                                        AbstainPolicy policy = AbstainPolicy::Incorrect) {
  if (results.empty()) throw InputError("certified_accuracy_curve: no results");
  std::size_t denom = 0;
  for (const auto& r : results)
    if (policy == AbstainPolicy::Incorrect || !r.abstained()) ++denom;
  std::vector<CurvePoint> curve;
  curve.reserve(radii.size());
  for (double rad : radii) {
    std::size_t hits = 0;
    for (const auto& r : results)
      if (!r.abstained() && r.correct && r.radius >= rad) ++hits;
    curve.push_back({rad, denom == 0 ? 0.0 : static_cast<double>(hits) / static_cast<double>(denom)});
  }
  return curve;
}

inline std::vector<double> radius_grid(double max_radius, std::size_t points) {
  std::vector<double> g(points);
  for (std::size_t i = 0; i < points; ++i)
    g[i] = points == 1 ? 0.0 : max_radius * static_cast<double>(i) / static_cast<double>(points - 1);
  return g;
}

inline void write_cert_csv(const std::vector<CertResult>& results, const std::string& path) {
  std::ofstream out(path);
  if (!out) throw InputError("cannot write " + path);
  out << "id,method,class,radius,abstain,correct\n";
  char buf[64];
  for (const auto& r : results) {
    std::snprintf(buf, sizeof buf, "%.17g", r.radius);
    out << r.id << ',' << to_string(r.method) << ',' << (r.abstained() ? std::string("-1") : std::to_string(*r.predicted))
        << ',' << buf << ',' << (r.abstained() ? 1 : 0) << ',' << (r.correct ? 1 : 0) << '\n';
  }
}

inline void write_curve_csv(const std::vector<CurvePoint>& curve, const std::string& path) {
  std::ofstream out(path);
  if (!out) throw InputError("cannot write " + path);
  out << "radius,certified_accuracy\n";
  char buf[80];
  for (const auto& p : curve) {
    std::snprintf(buf, sizeof buf, "%.17g,%.17g\n", p.radius, p.accuracy);
    out << buf;
  }
}

}  // namespace heatsmooth
