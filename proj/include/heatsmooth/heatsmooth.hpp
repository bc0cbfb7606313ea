#pragma once

// Deterministic Gaussian smoothing by iterative gradient-regularised retraining.
//
// Each timestep k fits a fresh copy of the current model v (warm-started at f^k) to
//
//   J(v) = mean_i [ dist(v(x_i), f^k(x_i)) + lambda * sigma^2 / (2 n_T) * ||grad_x v(x_i)||_F^2 ]
//
// which is one implicit Euler step of the heat equation du/dt = (sigma^2/2) Lap u with
// step h = 1/n_T. After n_T steps the model approximates the Gaussian average of f^0.
// The Jacobian norm is replaced by a randomised finite-difference estimate (see
// jl_grad_norm_terms).

#include <cmath>
#include <cstdint>
#include <functional>
#include <sstream>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "heatsmooth/autodiff.hpp"
#include "heatsmooth/error.hpp"
#include "heatsmooth/nn.hpp"
#include "heatsmooth/rng.hpp"
#include "heatsmooth/tensor.hpp"

namespace heatsmooth {

enum class LossMode { Quadratic, KL };

inline std::string to_string(LossMode m) { return m == LossMode::Quadratic ? "quadratic" : "kl"; }
inline LossMode parse_loss_mode(const std::string& s) {
  if (s == "quadratic") return LossMode::Quadratic;
  if (s == "kl") return LossMode::KL;
  throw InputError("unknown loss mode '" + s + "'");
}

struct SmoothConfig {
  double sigma = 0.1;
  double lambda = 5.0;
  std::size_t n_timesteps = 5;
  std::size_t kappa = 10;
  double delta_fd = 0.1;
  LossMode loss_mode = LossMode::Quadratic;
  // Rescale the kappa-term sum by Nc/kappa so that it estimates ||grad v||_F^2 without bias.
  bool unbiased_jl = false;
  // Directions with ||grad_x (w . v)|| below this are treated as zero gradients.
  double zero_grad_tol = 1e-12;
  OptimConfig optim;

  static double default_lambda(LossMode m) { return m == LossMode::Quadratic ? 5.0 : 100.0; }

  void validate() const {
    if (!(sigma > 0.0)) throw InputError("SmoothConfig: sigma must be positive");
    if (!(lambda >= 0.0)) throw InputError("SmoothConfig: lambda must be non-negative");
    if (n_timesteps == 0) throw InputError("SmoothConfig: n_T must be at least 1");
    if (kappa == 0) throw InputError("SmoothConfig: kappa must be at least 1");
    if (!(delta_fd > 0.0)) throw InputError("SmoothConfig: delta_fd must be positive");
    optim.validate();
  }

  // Weight of the gradient penalty inside J.
  double penalty_weight() const { return lambda * sigma * sigma / (2.0 * static_cast<double>(n_timesteps)); }
};

struct JlOptions {
  std::size_t kappa = 10;
  double delta_fd = 0.1;
  bool unbiased = false;
  double zero_grad_tol = 1e-12;
};

inline JlOptions jl_options(const SmoothConfig& c) { return {c.kappa, c.delta_fd, c.unbiased_jl, c.zero_grad_tol}; }

// Randomised estimate of ||grad_x v(x_i)||_F^2 for every row x_i of `x`, differentiable in the
// parameters bound in `p`:
//
//   sum_j ((w_j . v(x_i + delta l_j) - w_j . v(x_i)) / delta)^2
//
// with w_j ~ N(0, I/Nc) and l_j the unit direction of grad_x(w_j . v(x_i)) (zero when that
// gradient vanishes). The directions are computed by a reverse sweep on the same tape and
// enter the penalty as constants; the perturbed inputs are detached from x.
inline ad::Var jl_grad_norm_terms(ad::Graph& g, const Mlp& v, const MlpVars& p, const Tensor& x, const JlOptions& opt,
                                  Rng& rng) {
  if (!(opt.delta_fd > 0.0)) throw InputError("jl_grad_norm_terms: delta_fd must be positive");
  if (opt.kappa == 0) throw InputError("jl_grad_norm_terms: kappa must be at least 1");
  const Tensor xb = as_matrix(x);
  const std::size_t n = xb.rows(), k = opt.kappa, nc = v.num_classes();

  const Tensor w = normal_tensor({n * k, nc}, 1.0 / std::sqrt(static_cast<double>(nc)), rng);
  ad::Var wv = g.constant(w);

  ad::Var xr = g.leaf(repeat_rows(xb, k), true);
  ad::Var base = ad::row_sum(ad::mul(forward(v, p, xr), wv));  // w_j . v(x_i)

  Tensor dirs = g.backward(ad::sum(base)).at(xr);
  for (std::size_t r = 0; r < n * k; ++r) {
    auto row = dirs.row(r);
    const double nrm = norm2(row);
    for (double& e : row) e = nrm < opt.zero_grad_tol ? 0.0 : opt.delta_fd * e / nrm;
  }

  ad::Var shifted = ad::add(ad::detach(xr), g.constant(std::move(dirs)));
  ad::Var moved = ad::row_sum(ad::mul(forward(v, p, shifted), wv));
  ad::Var quot = ad::scale(ad::sub(moved, base), 1.0 / opt.delta_fd);
  ad::Var per_example = ad::row_sum(ad::reshape(ad::square(quot), {n, k}));
  if (opt.unbiased) per_example = ad::scale(per_example, static_cast<double>(nc) / static_cast<double>(k));
  return per_example;
}

// Single-example form; returns a scalar node.
inline ad::Var jl_grad_norm_term(ad::Graph& g, const Mlp& v, const MlpVars& p, const Tensor& x, const JlOptions& opt,
                                 std::uint64_t seed) {
  Rng rng = make_rng(seed, {0x11});
  return ad::reshape(jl_grad_norm_terms(g, v, p, x.reshaped({1, x.size()}), opt, rng), {1});
}

// Value-only estimate averaged over the rows of `x`.
inline double jl_estimate(const Mlp& v, const Tensor& x, const JlOptions& opt, std::uint64_t seed) {
  ad::Graph g;
  MlpVars p = bind(g, v, false);
  Rng rng = make_rng(seed, {0x12});
  return ad::mean(jl_grad_norm_terms(g, v, p, x, opt, rng)).value().item();
}

struct LossParts {
  ad::Var total;
  double distance = 0.0;  // batch mean of the distance term
  double penalty = 0.0;   // batch mean of the (unweighted) gradient-norm estimate
};

// Targets of f^k for a batch, in the form timestep_loss consumes: model outputs for the
// quadratic loss, class probabilities for KL.
inline Tensor timestep_targets(const Mlp& f_k, const Tensor& x, LossMode mode) {
  return mode == LossMode::Quadratic ? forward(f_k, x) : probabilities(f_k, x);
}

// Loss of one minibatch. `targets` come from timestep_targets on the frozen f^k; labels are
// never involved.
inline LossParts timestep_loss(ad::Graph& g, const Mlp& v, const MlpVars& p, const Tensor& x, const Tensor& targets,
                               const SmoothConfig& cfg, Rng& rng) {
  const Tensor xb = as_matrix(x);
  const std::size_t n = xb.rows();
  ad::Var xv = g.constant(xb);

  ad::Var dist;
  if (cfg.loss_mode == LossMode::Quadratic) {
    ad::Var diff = ad::sub(forward(v, p, xv), g.constant(targets));
    dist = ad::scale(ad::row_sum(ad::square(diff)), 0.5);
  } else {
    // KL(p_k || p_v) = sum p_k log p_k - sum p_k log p_v
    Tensor entropy_term({n});
    for (std::size_t i = 0; i < n; ++i)
      for (double q : targets.row(i))
        if (q > 0.0) entropy_term[i] += q * std::log(q);
    ad::Var cross = ad::row_sum(ad::mul(g.constant(targets), ad::log_softmax(logits(v, p, xv))));
    dist = ad::sub(g.constant(std::move(entropy_term)), cross);
  }

  LossParts parts;
  ad::Var pen;
  const double weight = cfg.penalty_weight();
  if (weight > 0.0) {
    pen = jl_grad_norm_terms(g, v, p, xb, jl_options(cfg), rng);
    parts.total = ad::mean(ad::add(dist, ad::scale(pen, weight)));
    parts.penalty = ad::mean(pen).value().item();
  } else {
    parts.total = ad::mean(dist);
  }
  parts.distance = ad::mean(dist).value().item();

  const double total = parts.total.value().item();
  if (!std::isfinite(total)) {
    std::ostringstream os;
    os << "timestep loss is not finite (distance=" << parts.distance << ", penalty=" << parts.penalty << ")";
    throw NumericalError(os.str());
  }
  return parts;
}

struct TimestepReport {
  std::size_t k = 0;
  double mean_distance = 0.0;  // last epoch
  double mean_penalty = 0.0;   // last epoch, unweighted
  std::size_t epochs = 0;
  double final_loss = 0.0;
};

inline nlohmann::json to_json(const TimestepReport& r) {
  return {{"k", r.k},
          {"mean_distance", r.mean_distance},
          {"mean_penalty", r.mean_penalty},
          {"epochs", r.epochs},
          {"final_loss", r.final_loss}};
}

struct SmoothResult {
  Mlp model;                       // f^{n_T}
  std::vector<Mlp> checkpoints;    // f^1 .. f^{n_T}
  std::vector<TimestepReport> reports;
};

// Called after each completed timestep with f^{k+1}.
using TimestepCallback = std::function<void(const Mlp&, const TimestepReport&)>;

// Produces f^1..f^{n_T} from f^0 using only the inputs `x` (one example per row).
inline SmoothResult run_schedule(const Mlp& f0, const Tensor& x, const SmoothConfig& cfg,
                                 const TimestepCallback& on_timestep = {}) {
  cfg.validate();
  f0.validate();
  const Tensor inputs = as_matrix(x);
  if (inputs.cols() != f0.input_dim())
    throw InputError("run_schedule: inputs have dim " + std::to_string(inputs.cols()) + ", model expects " +
                     std::to_string(f0.input_dim()));
  const std::size_t n = inputs.rows();
  const OptimConfig& oc = cfg.optim;

  SmoothResult result;
  Mlp current = f0;
  for (std::size_t k = 0; k < cfg.n_timesteps; ++k) {
    const Tensor targets = timestep_targets(current, inputs, cfg.loss_mode);
    Mlp v = current;  // warm start
    SgdMomentum opt(v, oc.momentum);
    TimestepReport rep;
    rep.k = k;
    rep.epochs = oc.epochs;

    for (std::size_t epoch = 0; epoch < oc.epochs; ++epoch) {
      Rng order_rng = make_rng(oc.seed, {0x5e0, k, epoch});
      const auto order = shuffled_indices(n, order_rng);
      const double lr = oc.lr_at(epoch);
      double dist_sum = 0.0, pen_sum = 0.0, loss_sum = 0.0;
      std::size_t batch_id = 0;
      for (std::size_t start = 0; start < n; start += oc.batch_size, ++batch_id) {
        const std::size_t end = std::min(n, start + oc.batch_size);
        std::span<const std::size_t> idx(order.data() + start, end - start);
        Rng noise_rng = make_rng(oc.seed, {0x5e1, k, epoch, batch_id});

        ad::Graph g;
        MlpVars p = bind(g, v, true);
        LossParts parts;
        try {
          parts = timestep_loss(g, v, p, gather_rows(inputs, idx), gather_rows(targets, idx), cfg, noise_rng);
        } catch (const NumericalError& e) {
          throw NumericalError("timestep " + std::to_string(k) + ", epoch " + std::to_string(epoch) + ": " +
                               e.what());
        }
        const double w = static_cast<double>(idx.size());
        dist_sum += parts.distance * w;
        pen_sum += parts.penalty * w;
        loss_sum += parts.total.value().item() * w;
        opt.step(v, p, g.backward(parts.total), lr);
      }
      rep.mean_distance = dist_sum / static_cast<double>(n);
      rep.mean_penalty = pen_sum / static_cast<double>(n);
      rep.final_loss = loss_sum / static_cast<double>(n);
    }

    v.provenance = "heatsmooth f^" + std::to_string(k + 1);
    current = v;
    result.checkpoints.push_back(v);
    result.reports.push_back(rep);
    if (on_timestep) on_timestep(v, rep);
  }
  result.model = current;
  return result;
}

}  // namespace heatsmooth
