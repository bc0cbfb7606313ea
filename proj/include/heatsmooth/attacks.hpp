#pragma once

// l2 PGD (plain and noise-ensemble gradient) and DDN attacks, plus distance summaries.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <functional>
#include <limits>
#include <optional>
#include <random>
#include <span>
#include <string>
#include <vector>

#include "heatsmooth/autodiff.hpp"
#include "heatsmooth/error.hpp"
#include "heatsmooth/nn.hpp"
#include "heatsmooth/oracles.hpp"
#include "heatsmooth/rng.hpp"
#include "heatsmooth/tensor.hpp"

namespace heatsmooth {

enum class SuccessCriterion { Top1, Top5 };

inline SuccessCriterion parse_success(const std::string& s) {
  if (s == "top1" || s == "top-1") return SuccessCriterion::Top1;
  if (s == "top5" || s == "top-5") return SuccessCriterion::Top5;
  throw InputError("unknown success criterion '" + s + "' (expected top1 or top5)");
}

struct AttackConfig {
  std::size_t steps = 20;
  double epsilon = 4.0;
  std::optional<double> alpha;  // unset: 2 * epsilon / steps
  std::size_t n_noise = 0;      // 0 = plain gradient; otherwise ensemble over Gaussian noise
  double noise_sigma = 0.0;
  double ddn_gamma = 0.05;
  double ddn_init = 1.0;
  std::uint64_t seed = 0;

  double step_size() const { return alpha ? *alpha : 2.0 * epsilon / static_cast<double>(steps); }

  void validate() const {
    if (steps < 1) throw InputError("attack: steps must be >= 1");
    if (!(epsilon > 0.0)) throw InputError("attack: epsilon must be positive");
    if (!(step_size() > 0.0)) throw InputError("attack: alpha must be positive");
    if (n_noise > 0 && !(noise_sigma >= 0.0)) throw InputError("attack: noise sigma must be non-negative");
    if (!(ddn_gamma >= 0.0 && ddn_gamma < 1.0)) throw InputError("attack: ddn gamma must lie in [0,1)");
    if (!(ddn_init > 0.0)) throw InputError("attack: ddn initial norm must be positive");
  }
};

struct AttackResult {
  std::size_t id = 0;
  bool success = false;
  double norm = 0.0;
  std::size_t steps = 0;
  std::string attack;
  Tensor delta;
  std::size_t zero_gradient_steps = 0;
};

// What an attack sees of a model: per-row input gradients of the cross-entropy at `label`,
// and the class scores used for the success test.
struct AttackTarget {
  std::function<Tensor(const Tensor& batch, std::size_t label)> loss_gradient;
  std::function<std::vector<double>(const Tensor& x)> scores;
};

inline std::vector<double> to_vector(const Tensor& t) { return {t.data().begin(), t.data().end()}; }

// Rows of the returned matrix are d CE(model(x_r), label) / d x_r.
inline Tensor input_loss_gradient(const Mlp& m, const Tensor& batch, std::size_t label) {
  const Tensor xb = as_matrix(batch);
  ad::Graph g;
  const MlpVars p = bind(g, m, false);
  ad::Var x = g.leaf(xb, true);
  const std::vector<int> labels(xb.rows(), static_cast<int>(label));
  // Sum (not mean) so every row carries its own gradient.
  ad::Var loss = ad::scale(cross_entropy(logits(m, p, x), labels), static_cast<double>(xb.rows()));
  return g.backward(loss).at(x);
}

inline AttackTarget mlp_target(const Mlp& m) {
  return {[&m](const Tensor& b, std::size_t y) { return input_loss_gradient(m, b, y); },
          [&m](const Tensor& x) { return to_vector(logits(m, x)); }};
}

// Gaussian average of m's probabilities, estimated with common random numbers so the scores
// are a deterministic function of x. Gradients come from m itself.
inline AttackTarget averaged_target(const Mlp& m, double sigma, std::size_t n_mc, std::uint64_t seed) {
  return {[&m](const Tensor& b, std::size_t y) { return input_loss_gradient(m, b, y); },
          [&m, sigma, n_mc, seed](const Tensor& x) { return to_vector(mc_gauss_average(m, x, sigma, n_mc, seed).mean); }};
}

inline bool is_adversarial(std::span<const double> scores, std::size_t label, SuccessCriterion c) {
  if (label >= scores.size()) throw InputError("attack: label out of range");
  if (c == SuccessCriterion::Top1) return argmax(scores) != label;
  std::size_t above = 0;
  for (std::size_t i = 0; i < scores.size(); ++i)
    if (i != label && (scores[i] > scores[label] || (scores[i] == scores[label] && i < label))) ++above;
  return above >= 5;
}

struct StepResult {
  Tensor g;
  bool zero_gradient = false;
};

// alpha * (sum of row gradients) / norm, evaluated at x + delta + noise_r for each noise row.
inline StepResult pgd_step(const AttackTarget& t, const Tensor& x, std::size_t label, const Tensor& delta,
                           double alpha, const Tensor& noise) {
  const std::size_t d = x.size();
  if (delta.size() != d) throw InputError("pgd_step: delta size does not match x");
  if (!delta.all_finite()) throw InputError("pgd_step: delta is not finite");
  const Tensor nz = as_matrix(noise);
  if (nz.cols() != d) throw InputError("pgd_step: noise width does not match x");
  Tensor batch({nz.rows(), d});
  for (std::size_t r = 0; r < nz.rows(); ++r)
    for (std::size_t i = 0; i < d; ++i) batch.at(r, i) = x[i] + delta[i] + nz.at(r, i);
  const Tensor grads = t.loss_gradient(batch, label);
  std::vector<double> s(d, 0.0);
  for (std::size_t r = 0; r < grads.rows(); ++r)
    for (std::size_t i = 0; i < d; ++i) s[i] += grads.at(r, i);
  const double n = norm2(s);
  StepResult out{Tensor({d}), false};
  // Normalizing a zero vector is undefined; report it and take no step.
  if (!(n >= std::numeric_limits<double>::min()) || !std::isfinite(n)) {
    out.zero_gradient = true;
    return out;
  }
  for (std::size_t i = 0; i < d; ++i) out.g[i] = alpha * s[i] / n;
  return out;
}

// n_noise = 0 uses the plain gradient at x + delta; otherwise draws n_noise N(0, sigma^2 I) rows.
inline StepResult pgd_step(const AttackTarget& t, const Tensor& x, std::size_t label, const Tensor& delta,
                           double alpha, std::size_t n_noise, double sigma, Rng& rng) {
  if (n_noise == 0) return pgd_step(t, x, label, delta, alpha, Tensor({1, x.size()}));
  return pgd_step(t, x, label, delta, alpha, normal_tensor({n_noise, x.size()}, sigma, rng));
}

namespace detail {

inline Tensor plus(const Tensor& a, const Tensor& b) {
  Tensor c = a;
  for (std::size_t i = 0; i < c.size(); ++i) c[i] += b[i];
  return c;
}

inline void rescale_to(Tensor& v, double radius) {
  const double n = norm2(v.data());
  if (n > 0.0)
    for (auto& e : v.data()) e *= radius / n;
}

inline AttackResult already_adversarial(std::size_t id, const char* tag, std::size_t d) {
  AttackResult r;
  r.id = id;
  r.success = true;
  r.attack = tag;
  r.delta = Tensor({d});
  return r;
}

}  // namespace detail

inline AttackResult pgd_attack(const AttackTarget& t, const Tensor& x, std::size_t label, const AttackConfig& cfg,
                               SuccessCriterion crit = SuccessCriterion::Top1, std::size_t id = 0) {
  cfg.validate();
  const std::size_t d = x.size();
  if (is_adversarial(t.scores(x), label, crit)) return detail::already_adversarial(id, "pgd", d);
  Rng rng = make_rng(cfg.seed, {0x96d, id});
  const double alpha = cfg.step_size();
  AttackResult r;
  r.id = id;
  r.attack = "pgd";
  r.delta = Tensor({d});
  for (std::size_t s = 1; s <= cfg.steps; ++s) {
    const StepResult st = pgd_step(t, x, label, r.delta, alpha, cfg.n_noise, cfg.noise_sigma, rng);
    if (st.zero_gradient) ++r.zero_gradient_steps;
    for (std::size_t i = 0; i < d; ++i) r.delta[i] += st.g[i];
    if (norm2(r.delta.data()) > cfg.epsilon) detail::rescale_to(r.delta, cfg.epsilon);
    r.steps = s;
    r.norm = norm2(r.delta.data());
    if (is_adversarial(t.scores(detail::plus(x, r.delta)), label, crit)) {
      r.success = true;
      return r;
    }
  }
  return r;
}

// Decoupled direction and norm: a normalized gradient step followed by projection onto a
// sphere whose radius shrinks after adversarial iterates and grows otherwise (capped at
// cfg.epsilon). Reports the smallest adversarial perturbation seen.
inline AttackResult ddn_attack(const AttackTarget& t, const Tensor& x, std::size_t label, const AttackConfig& cfg,
                               SuccessCriterion crit = SuccessCriterion::Top1, std::size_t id = 0) {
  cfg.validate();
  const std::size_t d = x.size();
  if (is_adversarial(t.scores(x), label, crit)) return detail::already_adversarial(id, "ddn", d);
  Rng rng = make_rng(cfg.seed, {0xdd1, id});
  const double alpha = cfg.step_size();
  double radius = std::min(cfg.ddn_init, cfg.epsilon);
  Tensor delta({d});
  bool adv = false;
  AttackResult r;
  r.id = id;
  r.attack = "ddn";
  r.delta = Tensor({d});
  double best = std::numeric_limits<double>::infinity();
  for (std::size_t s = 1; s <= cfg.steps; ++s) {
    const StepResult st = pgd_step(t, x, label, delta, alpha, cfg.n_noise, cfg.noise_sigma, rng);
    if (st.zero_gradient) ++r.zero_gradient_steps;
    for (std::size_t i = 0; i < d; ++i) delta[i] += st.g[i];
    if (s > 1) radius = adv ? radius * (1.0 - cfg.ddn_gamma) : radius * (1.0 + cfg.ddn_gamma);
    radius = std::min(radius, cfg.epsilon);
    detail::rescale_to(delta, radius);
    r.steps = s;
    adv = is_adversarial(t.scores(detail::plus(x, delta)), label, crit);
    const double n = norm2(delta.data());
    if (adv && n < best) {
      best = n;
      r.delta = delta;
    }
  }
  r.success = std::isfinite(best);
  r.norm = r.success ? best : norm2(delta.data());
  if (!r.success) r.delta = delta;
  return r;
}

inline AttackResult pgd_attack(const Mlp& m, const Tensor& x, std::size_t label, const AttackConfig& cfg,
                               SuccessCriterion crit = SuccessCriterion::Top1, std::size_t id = 0) {
  return pgd_attack(mlp_target(m), x, label, cfg, crit, id);
}

inline AttackResult ddn_attack(const Mlp& m, const Tensor& x, std::size_t label, const AttackConfig& cfg,
                               SuccessCriterion crit = SuccessCriterion::Top1, std::size_t id = 0) {
  return ddn_attack(mlp_target(m), x, label, cfg, crit, id);
}

struct DistanceMetrics {
  std::size_t successes = 0;
  std::size_t total = 0;
  std::optional<double> median;  // empty when nothing succeeded
  std::optional<double> mean;

  bool empty() const { return successes == 0; }
};

inline DistanceMetrics distance_metrics(const std::vector<AttackResult>& results) {
  DistanceMetrics m;
  m.total = results.size();
  std::vector<double> norms;
  for (const auto& r : results)
    if (r.success) norms.push_back(r.norm);
  m.successes = norms.size();
  if (norms.empty()) return m;
  std::sort(norms.begin(), norms.end());
  const std::size_t n = norms.size();
  m.median = n % 2 ? norms[n / 2] : 0.5 * (norms[n / 2 - 1] + norms[n / 2]);
  double s = 0.0;
  for (double v : norms) s += v;
  m.mean = s / static_cast<double>(n);
  return m;
}

// Fraction of all attacked examples broken with a perturbation of norm <= r.
inline std::vector<std::pair<double, double>> attack_curve(const std::vector<AttackResult>& results,
                                                           const std::vector<double>& norms) {
  if (results.empty()) throw InputError("attack_curve: no results");
  std::vector<std::pair<double, double>> out;
  for (double r : norms) {
    std::size_t hit = 0;
    for (const auto& a : results)
      if (a.success && a.norm <= r) ++hit;
    out.emplace_back(r, static_cast<double>(hit) / static_cast<double>(results.size()));
  }
  return out;
}

inline void write_attack_csv(const std::vector<AttackResult>& results, const std::string& path) {
  std::ofstream out(path);
  if (!out) throw InputError("cannot write " + path);
  out << "id,attack,success,norm,steps\n";
  char buf[64];
  for (const auto& r : results) {
    std::snprintf(buf, sizeof buf, "%.17g", r.norm);
    out << r.id << ',' << r.attack << ',' << (r.success ? 1 : 0) << ',' << buf << ',' << r.steps << '\n';
  }
}

inline void write_attack_curve_csv(const std::vector<std::pair<double, double>>& curve, const std::string& path) {
  std::ofstream out(path);
  if (!out) throw InputError("cannot write " + path);
  out << "norm,fraction\n";
  char buf[80];
  for (const auto& [n, f] : curve) {
    std::snprintf(buf, sizeof buf, "%.17g,%.17g\n", n, f);
    out << buf;
  }
}

}  // namespace heatsmooth
