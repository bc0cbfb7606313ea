#pragma once

// Independent numerical ground truth for Gaussian smoothing: an explicit heat-equation
// solver on 1D/2D grids, direct Gaussian-kernel quadrature, Monte-Carlo Gaussian
// averages and a Gauss-Hermite check of the noise/gradient-penalty equivalence.

#include <array>
#include <cmath>
#include <concepts>
#include <cstdint>
#include <fstream>
#include <functional>
#include <numbers>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "heatsmooth/error.hpp"
#include "heatsmooth/nn.hpp"
#include "heatsmooth/rng.hpp"
#include "heatsmooth/tensor.hpp"

namespace heatsmooth {

// Values on a regular grid with equal spacing in every dimension. values has shape (n0) or
// (n0, n1); node (i, j) sits at (origin[0] + i dx, origin[1] + j dx).
struct GridField {
  std::size_t dim = 1;
  std::array<double, 2> origin{0.0, 0.0};
  double dx = 1.0;
  Tensor values;

  std::size_t extent(std::size_t axis) const { return values.dim(axis); }
  double coord(std::size_t axis, std::size_t i) const { return origin[axis] + static_cast<double>(i) * dx; }

  void validate() const {
    if (dim != 1 && dim != 2) throw InputError("GridField: dim must be 1 or 2");
    if (!(dx > 0.0)) throw InputError("GridField: dx must be positive");
    if (values.rank() != dim) throw InputError("GridField: values rank does not match dim");
    if (!values.all_finite()) throw InputError("GridField: values must be finite");
  }
};

// Grid over [lo, hi] per axis with nodes at lo + i dx (hi included up to rounding).
inline GridField make_grid(std::size_t dim, double lo, double hi, double dx) {
  if (dim != 1 && dim != 2) throw InputError("make_grid: dim must be 1 or 2");
  if (!(hi > lo) || !(dx > 0.0)) throw InputError("make_grid: need lo < hi and dx > 0");
  const auto n = static_cast<std::size_t>(std::llround((hi - lo) / dx)) + 1;
  GridField f;
  f.dim = dim;
  f.origin = {lo, lo};
  f.dx = dx;
  f.values = dim == 1 ? Tensor({n}) : Tensor({n, n});
  return f;
}

template <class F>
GridField sample_grid(GridField grid, F&& fn) {
  if (grid.dim == 1) {
    for (std::size_t i = 0; i < grid.extent(0); ++i) grid.values[i] = fn(grid.coord(0, i), 0.0);
  } else {
    for (std::size_t i = 0; i < grid.extent(0); ++i)
      for (std::size_t j = 0; j < grid.extent(1); ++j) grid.values.at(i, j) = fn(grid.coord(0, i), grid.coord(1, j));
  }
  return grid;
}

struct HeatSchedule {
  std::size_t steps = 0;
  double dt = 0.0;
};

// Largest dt that divides t_final into whole steps and keeps
// (sigma^2/2) dt (2 dim) / dx^2 <= 1/2.
inline HeatSchedule heat_schedule(double sigma, double dx, std::size_t dim, double t_final) {
  const double coef = 0.5 * sigma * sigma;
  const double dt_max = 0.5 * dx * dx / (coef * 2.0 * static_cast<double>(dim));
  const auto steps = static_cast<std::size_t>(std::ceil(t_final / dt_max * (1.0 - 1e-12)));
  return {std::max<std::size_t>(steps, 1), t_final / static_cast<double>(std::max<std::size_t>(steps, 1))};
}

// Explicit central-difference solve of du/dt = (sigma^2/2) Lap u to time t_final. Boundaries
// carry zero flux, so the plain grid sum is conserved. `dt`, when given, must be stable.
inline GridField heat_solve_grid(const GridField& u0, double sigma, double t_final = 1.0,
                                 std::optional<double> dt = std::nullopt) {
  u0.validate();
  if (!(sigma >= 0.0) || !(t_final >= 0.0)) throw InputError("heat_solve_grid: sigma and t_final must be non-negative");
  if (sigma == 0.0 || t_final == 0.0) return u0;

  const double coef = 0.5 * sigma * sigma;
  HeatSchedule sched = heat_schedule(sigma, u0.dx, u0.dim, t_final);
  if (dt) {
    const double stab = coef * *dt * 2.0 * static_cast<double>(u0.dim) / (u0.dx * u0.dx);
    if (!(*dt > 0.0) || stab > 0.5 + 1e-12) {
      std::ostringstream os;
      os << "heat_solve_grid: dt=" << *dt << " is unstable (stability number " << stab
         << " > 0.5); need dt <= " << 0.5 * u0.dx * u0.dx / (coef * 2.0 * static_cast<double>(u0.dim));
      throw NumericalError(os.str());
    }
    sched.steps = static_cast<std::size_t>(std::llround(t_final / *dt));
    if (sched.steps == 0) sched.steps = 1;
    sched.dt = t_final / static_cast<double>(sched.steps);
  }
  const double r = coef * sched.dt / (u0.dx * u0.dx);

  GridField u = u0;
  Tensor next = u.values;
  if (u.dim == 1) {
    const std::size_t n = u.extent(0);
    auto cur = u.values.data();
    auto nx = next.data();
    for (std::size_t s = 0; s < sched.steps; ++s) {
      for (std::size_t i = 0; i < n; ++i) {
        const double left = i > 0 ? cur[i - 1] : cur[i];
        const double right = i + 1 < n ? cur[i + 1] : cur[i];
        nx[i] = cur[i] + r * (left - 2.0 * cur[i] + right);
      }
      std::swap(u.values, next);
      cur = u.values.data();
      nx = next.data();
    }
  } else {
    const std::size_t n0 = u.extent(0), n1 = u.extent(1);
    for (std::size_t s = 0; s < sched.steps; ++s) {
      const Tensor& c = u.values;
      for (std::size_t i = 0; i < n0; ++i)
        for (std::size_t j = 0; j < n1; ++j) {
          const double v = c.at(i, j);
          const double up = i > 0 ? c.at(i - 1, j) : v;
          const double dn = i + 1 < n0 ? c.at(i + 1, j) : v;
          const double lf = j > 0 ? c.at(i, j - 1) : v;
          const double rt = j + 1 < n1 ? c.at(i, j + 1) : v;
          next.at(i, j) = v + r * (up + dn + lf + rt - 4.0 * v);
        }
      std::swap(u.values, next);
    }
  }
  return u;
}

inline double gaussian_pdf(double x, double sigma) {
  return std::exp(-0.5 * x * x / (sigma * sigma)) / (sigma * std::sqrt(2.0 * std::numbers::pi));
}

// Direct quadrature of (u * N(0, sigma^2)) on the grid, extending u by reflection across the
// boundary faces (the same zero-flux condition the heat solver uses). Separable in 2D.
inline GridField kernel_convolve(const GridField& u0, double sigma) {
  u0.validate();
  if (!(sigma >= 0.0)) throw InputError("kernel_convolve: sigma must be non-negative");
  if (sigma == 0.0) return u0;
  const auto half = static_cast<long>(std::ceil(10.0 * sigma / u0.dx));
  std::vector<double> kernel(static_cast<std::size_t>(2 * half + 1));
  for (long m = -half; m <= half; ++m)
    kernel[static_cast<std::size_t>(m + half)] = gaussian_pdf(static_cast<double>(m) * u0.dx, sigma) * u0.dx;

  auto reflect = [](long j, long n) {
    while (j < 0 || j >= n) j = j < 0 ? -j - 1 : 2 * n - 1 - j;
    return j;
  };
  auto convolve_line = [&](std::span<const double> in, std::span<double> out, std::size_t stride_in,
                           std::size_t stride_out, long n) {
    for (long i = 0; i < n; ++i) {
      double s = 0.0;
      for (long m = -half; m <= half; ++m)
        s += kernel[static_cast<std::size_t>(m + half)] * in[static_cast<std::size_t>(reflect(i - m, n)) * stride_in];
      out[static_cast<std::size_t>(i) * stride_out] = s;
    }
  };

  GridField out = u0;
  if (u0.dim == 1) {
    convolve_line(u0.values.data(), out.values.data(), 1, 1, static_cast<long>(u0.extent(0)));
  } else {
    const std::size_t n0 = u0.extent(0), n1 = u0.extent(1);
    Tensor tmp(u0.values.shape());
    for (std::size_t i = 0; i < n0; ++i)  // along axis 1
      convolve_line(u0.values.data().subspan(i * n1), tmp.data().subspan(i * n1), 1, 1, static_cast<long>(n1));
    for (std::size_t j = 0; j < n1; ++j)  // along axis 0
      convolve_line(tmp.data().subspan(j), out.values.data().subspan(j), n1, n1, static_cast<long>(n0));
  }
  return out;
}

// Linear interpolation of a 1D field at x (clamped to the grid).
inline double interpolate(const GridField& f, double x) {
  if (f.dim != 1) throw InputError("interpolate: 1D fields only");
  const double t = (x - f.origin[0]) / f.dx;
  const double n = static_cast<double>(f.extent(0) - 1);
  const double tc = std::clamp(t, 0.0, n);
  const auto i = static_cast<std::size_t>(std::min(std::floor(tc), n - 1));
  const double a = tc - static_cast<double>(i);
  return (1.0 - a) * f.values[i] + a * f.values[i + 1];
}

struct MCEstimate {
  Tensor mean;
  Tensor std_error;
  std::size_t n_samples = 0;
  std::uint64_t seed = 0;
};

// Welford accumulation of vector-valued samples.
class MeanAccumulator {
 public:
  void add(std::span<const double> x) {
    if (mean_.empty()) {
      mean_.assign(x.size(), 0.0);
      m2_.assign(x.size(), 0.0);
    }
    ++n_;
    const double inv = 1.0 / static_cast<double>(n_);
    for (std::size_t i = 0; i < x.size(); ++i) {
      const double d = x[i] - mean_[i];
      mean_[i] += d * inv;
      m2_[i] += d * (x[i] - mean_[i]);
    }
  }

  MCEstimate finish(std::uint64_t seed) const {
    MCEstimate e;
    e.n_samples = n_;
    e.seed = seed;
    e.mean = Tensor::vector(mean_);
    std::vector<double> se(mean_.size(), 0.0);
    if (n_ > 1)
      for (std::size_t i = 0; i < se.size(); ++i)
        se[i] = std::sqrt(m2_[i] / static_cast<double>(n_ - 1) / static_cast<double>(n_));
    e.std_error = Tensor::vector(std::move(se));
    return e;
  }

 private:
  std::size_t n_ = 0;
  std::vector<double> mean_, m2_;
};

// Monte-Carlo estimate of E[f(x + eta)], eta ~ N(0, sigma^2 I); f maps a rank-1 input to a
// rank-1 output.
template <class F>
  requires std::invocable<F, const Tensor&>
MCEstimate mc_gauss_average(F&& f, const Tensor& x, double sigma, std::size_t n, std::uint64_t seed) {
  if (n == 0) throw InputError("mc_gauss_average: n must be at least 1");
  Rng rng = make_rng(seed, {0x3c});
  std::normal_distribution<double> nd(0.0, 1.0);
  MeanAccumulator acc;
  Tensor xp = x;
  for (std::size_t s = 0; s < n; ++s) {
    for (std::size_t i = 0; i < x.size(); ++i) xp[i] = x[i] + sigma * nd(rng);
    const Tensor y = f(static_cast<const Tensor&>(xp));
    acc.add(y.data());
  }
  return acc.finish(seed);
}

// Same estimate for a batched f mapping (rows x d) to (rows x k), evaluated in chunks. Uses
// the same noise stream as mc_gauss_average, so both agree for the same seed.
template <class F>
  requires std::invocable<F, const Tensor&>
MCEstimate mc_gauss_average_batched(F&& f_batch, const Tensor& x, double sigma, std::size_t n, std::uint64_t seed,
                                    std::size_t chunk = 4096) {
  if (n == 0) throw InputError("mc_gauss_average: n must be at least 1");
  Rng rng = make_rng(seed, {0x3c});
  std::normal_distribution<double> nd(0.0, 1.0);
  MeanAccumulator acc;
  const std::size_t d = x.size();
  for (std::size_t done = 0; done < n;) {
    const std::size_t b = std::min(chunk, n - done);
    Tensor xb({b, d});
    for (std::size_t r = 0; r < b; ++r)
      for (std::size_t i = 0; i < d; ++i) xb.at(r, i) = x[i] + sigma * nd(rng);
    const Tensor y = f_batch(static_cast<const Tensor&>(xb));
    for (std::size_t r = 0; r < b; ++r) acc.add(y.row(r));
    done += b;
  }
  return acc.finish(seed);
}

// Gaussian average of an Mlp's class probabilities.
inline MCEstimate mc_gauss_average(const Mlp& f, const Tensor& x, double sigma, std::size_t n, std::uint64_t seed) {
  return mc_gauss_average_batched([&f](const Tensor& xb) { return probabilities(f, xb); }, x, sigma, n, seed);
}

struct Quadrature {
  std::vector<double> nodes;
  std::vector<double> weights;
};

// Gauss-Hermite rule for the weight exp(-t^2): Newton iteration on the orthonormal
// Hermite recurrence.
inline Quadrature gauss_hermite(std::size_t n) {
  if (n == 0) throw InputError("gauss_hermite: need at least one node");
  const double pim4 = std::pow(std::numbers::pi, -0.25);
  Quadrature q;
  q.nodes.assign(n, 0.0);
  q.weights.assign(n, 0.0);
  const std::size_t m = (n + 1) / 2;
  const double nd = static_cast<double>(n);
  double z = 0.0;
  for (std::size_t i = 0; i < m; ++i) {
    if (i == 0)
      z = std::sqrt(2.0 * nd + 1.0) - 1.85575 * std::pow(2.0 * nd + 1.0, -0.16667);
    else if (i == 1)
      z -= 1.14 * std::pow(nd, 0.426) / z;
    else if (i == 2)
      z = 1.86 * z - 0.86 * q.nodes[0];
    else if (i == 3)
      z = 1.91 * z - 0.91 * q.nodes[1];
    else
      z = 2.0 * z - q.nodes[i - 2];
    double pp = 0.0;
    for (int it = 0; it < 100; ++it) {
      double p1 = pim4, p2 = 0.0;
      for (std::size_t j = 0; j < n; ++j) {
        const double p3 = p2;
        p2 = p1;
        const double jd = static_cast<double>(j);
        p1 = z * std::sqrt(2.0 / (jd + 1.0)) * p2 - std::sqrt(jd / (jd + 1.0)) * p3;
      }
      pp = std::sqrt(2.0 * nd) * p2;
      const double z1 = z;
      z = z1 - p1 / pp;
      if (std::abs(z - z1) <= 1e-15 * std::max(1.0, std::abs(z))) break;
    }
    q.nodes[i] = z;
    q.nodes[n - 1 - i] = -z;
    q.weights[i] = q.weights[n - 1 - i] = 2.0 / (pp * pp);
  }
  return q;
}

// E[g(x + sigma Z)], Z ~ N(0,1), by Gauss-Hermite quadrature.
template <class G>
double gauss_expectation(G&& g, double x, double sigma, const Quadrature& q) {
  double s = 0.0;
  for (std::size_t i = 0; i < q.nodes.size(); ++i) {
    const double v = g(x + std::numbers::sqrt2 * sigma * q.nodes[i]);
    if (!std::isfinite(v)) throw NumericalError("Gauss-Hermite quadrature diverged (non-finite integrand)");
    s += q.weights[i] * v;
  }
  return s / std::sqrt(std::numbers::pi);
}

struct BishopResult {
  double lhs = 0.0;  // E[(f(x + eta) - y)^2]
  double rhs = 0.0;  // (f(x) - y)^2 + sigma^2 f'(x)^2
  double residual = 0.0;
};

// Compares the noisy quadratic loss with its gradient-penalised counterpart at one point.
// The residual is O(sigma^4) when y = f(x); for other y the dropped sigma^2 (f - y) f''
// term makes it O(sigma^2).
template <class F, class DF>
BishopResult bishop_check(F&& f, DF&& df, double y, double x, double sigma, std::size_t nodes = 64) {
  if (!(sigma >= 0.0)) throw InputError("bishop_check: sigma must be non-negative");
  const double fx = f(x);
  const double slope = df(x);
  if (!std::isfinite(fx) || !std::isfinite(slope)) throw NumericalError("bishop_check: f or f' not finite at x");
  BishopResult r;
  r.rhs = (fx - y) * (fx - y) + sigma * sigma * slope * slope;
  if (sigma == 0.0) {
    r.lhs = (fx - y) * (fx - y);
  } else {
    const Quadrature q = gauss_hermite(nodes);
    r.lhs = gauss_expectation([&](double t) { return (f(t) - y) * (f(t) - y); }, x, sigma, q);
  }
  r.residual = r.lhs - r.rhs;
  return r;
}

struct Box {
  double lo = -1.0;
  double hi = 1.0;
};

// Samples class `component` of the model's probabilities on a 1D or 2D grid over `box`.
inline GridField grid_restrict(const Mlp& model, std::size_t component, const Box& box, double dx) {
  const std::size_t d = model.input_dim();
  if (d > 2) throw InputError("grid_restrict: input dim " + std::to_string(d) + " > 2 is not supported");
  if (component >= model.num_classes()) throw InputError("grid_restrict: class index out of range");
  GridField grid = make_grid(d, box.lo, box.hi, dx);
  const std::size_t n0 = grid.extent(0);
  const std::size_t rows = d == 1 ? n0 : n0 * grid.extent(1);
  Tensor pts({rows, d});
  for (std::size_t r = 0; r < rows; ++r) {
    pts.at(r, 0) = grid.coord(0, d == 1 ? r : r / grid.extent(1));
    if (d == 2) pts.at(r, 1) = grid.coord(1, r % grid.extent(1));
  }
  const Tensor p = probabilities(model, pts);
  for (std::size_t r = 0; r < rows; ++r) grid.values[r] = p.at(r, component);
  return grid;
}

// Node coordinates then value, one node per line.
inline void write_grid_csv(const GridField& f, const std::string& path) {
  std::ofstream out(path);
  if (!out) throw InputError("cannot write " + path);
  out << (f.dim == 1 ? "x0,value\n" : "x0,x1,value\n");
  char buf[96];
  if (f.dim == 1) {
    for (std::size_t i = 0; i < f.extent(0); ++i) {
      std::snprintf(buf, sizeof buf, "%.17g,%.17g\n", f.coord(0, i), f.values[i]);
      out << buf;
    }
  } else {
    for (std::size_t i = 0; i < f.extent(0); ++i)
      for (std::size_t j = 0; j < f.extent(1); ++j) {
        std::snprintf(buf, sizeof buf, "%.17g,%.17g,%.17g\n", f.coord(0, i), f.coord(1, j), f.values.at(i, j));
        out << buf;
      }
  }
}

inline double max_abs_diff(const GridField& a, const GridField& b) {
  if (a.values.shape() != b.values.shape()) throw InputError("max_abs_diff: grids differ in shape");
  double m = 0.0;
  for (std::size_t i = 0; i < a.values.size(); ++i) m = std::max(m, std::abs(a.values[i] - b.values[i]));
  return m;
}

inline double mean_abs_diff(const GridField& a, const GridField& b) {
  if (a.values.shape() != b.values.shape()) throw InputError("mean_abs_diff: grids differ in shape");
  double s = 0.0;
  for (std::size_t i = 0; i < a.values.size(); ++i) s += std::abs(a.values[i] - b.values[i]);
  return s / static_cast<double>(a.values.size());
}

}  // namespace heatsmooth
