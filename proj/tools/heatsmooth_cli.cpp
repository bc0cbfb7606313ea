// heatsmooth: command-line driver for data generation, base training, heat smoothing,
// certification, attacks, oracle checks and timing.

#include <CLI11.hpp>

#include <chrono>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <sstream>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "heatsmooth/attacks.hpp"
#include "heatsmooth/certify.hpp"
#include "heatsmooth/data.hpp"
#include "heatsmooth/heatsmooth.hpp"
#include "heatsmooth/nn.hpp"
#include "heatsmooth/oracles.hpp"
#include "heatsmooth/parallel.hpp"

namespace fs = std::filesystem;
using json = nlohmann::json;
using namespace heatsmooth;

namespace {

constexpr const char* kVersion = "0.1.0";

using Clock = std::chrono::steady_clock;

double seconds_since(Clock::time_point t0) { return std::chrono::duration<double>(Clock::now() - t0).count(); }

std::string hex64(std::uint64_t v) {
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(v));
  return buf;
}

std::uint64_t file_hash(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw InputError("cannot open " + path);
  std::uint64_t h = 0xcbf29ce484222325ULL;
  char c;
  while (in.get(c)) {
    h ^= static_cast<unsigned char>(c);
    h *= 0x100000001b3ULL;
  }
  return h;
}

json read_json(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw InputError("cannot open " + path);
  try {
    return json::parse(in);
  } catch (const json::exception& e) {
    throw InputError(path + ": invalid JSON (" + e.what() + ")");
  }
}

void write_json(const json& j, const std::string& path) {
  std::ofstream out(path);
  if (!out) throw InputError("cannot write " + path);
  out << j.dump(2) << '\n';
}

Mlp load_model(const std::string& path) {
  try {
    return mlp_from_json(read_json(path));
  } catch (const json::exception& e) {
    throw InputError(path + ": malformed model (" + e.what() + ")");
  }
}

std::vector<std::size_t> parse_sizes(const std::string& s) {
  std::vector<std::size_t> out;
  std::stringstream ss(s);
  std::string tok;
  while (std::getline(ss, tok, ',')) {
    try {
      std::size_t used = 0;
      const long v = std::stol(tok, &used);
      if (used != tok.size() || v <= 0) throw std::invalid_argument(tok);
      out.push_back(static_cast<std::size_t>(v));
    } catch (const std::exception&) {
      throw InputError("bad layer list '" + s + "'");
    }
  }
  return out;
}

std::vector<double> parse_doubles(const std::string& s) {
  std::vector<double> out;
  std::stringstream ss(s);
  std::string tok;
  while (std::getline(ss, tok, ',')) {
    try {
      std::size_t used = 0;
      out.push_back(std::stod(tok, &used));
      if (used != tok.size()) throw std::invalid_argument(tok);
    } catch (const std::exception&) {
      throw InputError("bad number list '" + s + "'");
    }
  }
  return out;
}

// HEATSMOOTH_SEED, when set, wins over the flag.
std::uint64_t effective_seed(std::uint64_t flag) {
  if (const char* env = std::getenv("HEATSMOOTH_SEED")) {
    try {
      return std::stoull(env);
    } catch (const std::exception&) {
      throw InputError(std::string("HEATSMOOTH_SEED is not an integer: ") + env);
    }
  }
  return flag;
}

struct Common {
  std::string out = ".";
  std::uint64_t seed = 0;
  std::size_t threads = 1;
};

void add_common(CLI::App* c, Common& o) {
  c->add_option("--out", o.out, "Output directory")->capture_default_str();
  c->add_option("--seed", o.seed, "Seed (HEATSMOOTH_SEED overrides)")->capture_default_str();
  c->add_option("--threads", o.threads, "Worker threads for per-example work")->check(CLI::PositiveNumber);
}

// Records everything needed to rerun a command. Wall-clock values live under "timing" only.
class Manifest {
 public:
  Manifest(std::string command, const Common& c) : command_(std::move(command)), dir_(c.out) {
    fs::create_directories(dir_);
    j_["command"] = command_;
    j_["version"] = kVersion;
    j_["seed"] = effective_seed(c.seed);
    j_["threads"] = c.threads;
    j_["params"] = json::object();
    j_["inputs"] = json::object();
    j_["outputs"] = json::array();
    j_["counters"] = json::object();
    j_["timing"] = json::object();
  }

  json& params() { return j_["params"]; }
  json& counters() { return j_["counters"]; }
  json& timing() { return j_["timing"]; }
  std::uint64_t seed() const { return j_["seed"].get<std::uint64_t>(); }

  void input_file(const std::string& role, const std::string& path) {
    j_["inputs"][role] = {{"path", path}, {"fnv1a", hex64(file_hash(path))}};
  }
  void input_model(const std::string& role, const std::string& path, const Mlp& m) {
    j_["inputs"][role] = {{"path", path}, {"model_hash", hex64(model_hash(m))}};
  }
  std::string path(const std::string& name) {
    const std::string p = (fs::path(dir_) / name).string();
    j_["outputs"].push_back(name);
    return p;
  }
  void write() const { write_json(j_, (fs::path(dir_) / ("manifest_" + command_ + ".json")).string()); }

 private:
  std::string command_;
  std::string dir_;
  json j_;
};

// ---- gen-data ----

struct GenDataOpts {
  Common c;
  std::string kind = "blobs";
  std::size_t n_per_class = 200, classes = 3, dim = 2, n = 40;
  double spread = 0.35, boundary = 0.0, outlier = -0.5, lo = -2.0, hi = 2.0;
  std::string split = "train";
  std::string file;
};

int run_gen_data(const GenDataOpts& o) {
  Manifest man("gen-data", o.c);
  Dataset ds;
  if (o.kind == "blobs") {
    ds = make_blobs(o.n_per_class, o.classes, o.dim, o.spread, man.seed(), o.split);
  } else if (o.kind == "step1d") {
    Step1dOptions so;
    so.outlier = o.outlier;
    so.lo = o.lo;
    so.hi = o.hi;
    ds = make_step1d(o.n, o.boundary, man.seed(), so, o.split);
  } else {
    throw InputError("unknown dataset kind '" + o.kind + "' (expected blobs or step1d)");
  }
  man.params() = {{"kind", o.kind},       {"n_per_class", o.n_per_class}, {"classes", o.classes},
                  {"dim", o.dim},         {"spread", o.spread},           {"n", o.n},
                  {"boundary", o.boundary}, {"outlier", o.outlier},       {"lo", o.lo},
                  {"hi", o.hi},           {"split", o.split}};
  const std::string file = o.file.empty() ? man.path(o.kind + "_" + o.split + ".csv") : o.file;
  save_dataset_csv(ds, file);
  man.counters()["rows"] = ds.size();
  man.write();
  std::cout << file << '\n';
  return 0;
}

// ---- train-base ----

struct OptimOpts {
  double lr = 0.05, momentum = 0.9;
  std::size_t epochs = 100, batch = 64;
};

void add_optim(CLI::App* c, OptimOpts& o) {
  c->add_option("--lr", o.lr, "Learning rate")->capture_default_str();
  c->add_option("--momentum", o.momentum, "SGD momentum")->capture_default_str();
  c->add_option("--epochs", o.epochs, "Epochs (per timestep when smoothing)")->capture_default_str();
  c->add_option("--batch-size", o.batch, "Minibatch size")->capture_default_str();
}

OptimConfig to_optim(const OptimOpts& o, std::uint64_t seed) {
  OptimConfig c;
  c.learning_rate = o.lr;
  c.momentum = o.momentum;
  c.epochs = o.epochs;
  c.batch_size = o.batch;
  c.seed = seed;
  return c;
}

json optim_json(const OptimConfig& c) {
  return {{"learning_rate", c.learning_rate}, {"momentum", c.momentum}, {"epochs", c.epochs},
          {"batch_size", c.batch_size}, {"schedule", "step x0.1 at 50%, x0.01 at 75%"}};
}

struct TrainOpts {
  Common c;
  OptimOpts optim;
  std::string data, arch = "2,64,64,3", activation = "relu", model_out;
};

int run_train_base(const TrainOpts& o) {
  Manifest man("train-base", o.c);
  const Dataset ds = load_dataset_csv(o.data);
  man.input_file("dataset", o.data);
  const OptimConfig oc = to_optim(o.optim, man.seed());
  man.params() = {{"arch", o.arch}, {"activation", o.activation}, {"optim", optim_json(oc)}};
  const auto t0 = Clock::now();
  const TrainReport rep = train_base(ds, parse_sizes(o.arch), oc, parse_activation(o.activation));
  man.timing()["train_seconds"] = seconds_since(t0);

  const std::string model_path = o.model_out.empty() ? man.path("model.json") : o.model_out;
  write_json(to_json(rep.model), model_path);
  json metrics = {{"train_accuracy", rep.train_accuracy},
                  {"final_loss", rep.final_loss},
                  {"epoch_losses", rep.epoch_losses},
                  {"model_hash", hex64(model_hash(rep.model))}};
  write_json(metrics, man.path("train_metrics.json"));
  man.counters()["examples"] = ds.size();
  man.write();
  std::cout << "train accuracy " << rep.train_accuracy << "  model " << model_path << '\n';
  return 0;
}

// ---- smooth ----

struct SmoothOpts {
  Common c;
  OptimOpts optim{0.05, 0.9, 30, 32};
  std::string model, data, loss_mode = "quadratic", target = "probabilities";
  double sigma = 0.1, delta = 0.1;
  std::optional<double> lambda;
  std::size_t n_t = 5, kappa = 10;
  bool unbiased = false;
};

int run_smooth(const SmoothOpts& o) {
  Manifest man("smooth", o.c);
  const Mlp base = load_model(o.model);
  man.input_model("base_model", o.model, base);
  const Dataset ds = load_dataset_csv(o.data);
  man.input_file("inputs", o.data);

  SmoothConfig cfg;
  cfg.sigma = o.sigma;
  cfg.loss_mode = parse_loss_mode(o.loss_mode);
  cfg.lambda = o.lambda.value_or(SmoothConfig::default_lambda(cfg.loss_mode));
  cfg.n_timesteps = o.n_t;
  cfg.kappa = o.kappa;
  cfg.delta_fd = o.delta;
  cfg.unbiased_jl = o.unbiased;
  cfg.optim = to_optim(o.optim, man.seed());
  cfg.validate();
  const Mlp f0 = base.with_output_mode(parse_output_mode(o.target));
  man.params() = {{"sigma", cfg.sigma},         {"lambda", cfg.lambda},       {"n_T", cfg.n_timesteps},
                  {"kappa", cfg.kappa},         {"delta_fd", cfg.delta_fd},   {"loss_mode", to_string(cfg.loss_mode)},
                  {"unbiased_jl", cfg.unbiased_jl}, {"smoothed_output", to_string(f0.output_mode)},
                  {"optim", optim_json(cfg.optim)}};

  json reports = json::array();
  const std::string report_path = man.path("smooth_reports.json");
  const auto t0 = Clock::now();
  std::size_t done = 0;
  try {
    const SmoothResult res = run_schedule(f0, ds.inputs, cfg, [&](const Mlp& fk, const TimestepReport& r) {
      // Persist as we go so an abort later keeps the finished timesteps.
      write_json(to_json(fk), man.path("f_" + std::to_string(r.k + 1) + ".json"));
      reports.push_back(to_json(r));
      write_json(reports, report_path);
      ++done;
      std::cout << "timestep " << r.k + 1 << "/" << cfg.n_timesteps << "  distance " << r.mean_distance
                << "  penalty " << r.mean_penalty << '\n';
    });
    write_json(to_json(res.model), man.path("smoothed.json"));
  } catch (const NumericalError&) {
    man.counters()["completed_timesteps"] = done;
    man.write();
    throw;
  }
  man.timing()["smooth_seconds"] = seconds_since(t0);
  man.counters()["completed_timesteps"] = done;
  man.write();
  return 0;
}

// ---- certify ----

struct CertifyOpts {
  Common c;
  std::string model, data, method = "det", abstain = "incorrect";
  double sigma = 0.1, alpha = 0.001, max_radius = -1.0;
  std::size_t n0 = 100, n = 10000, points = 101, limit = 0;
};

int run_certify(const CertifyOpts& o) {
  Manifest man("certify", o.c);
  const Mlp m = load_model(o.model);
  man.input_model("model", o.model, m);
  const Dataset ds = load_dataset_csv(o.data, m.num_classes());
  man.input_file("dataset", o.data);
  if (ds.dim() != m.input_dim()) throw InputError("dataset dim does not match model input dim");
  const std::size_t count = o.limit ? std::min(o.limit, ds.size()) : ds.size();
  const AbstainPolicy policy = o.abstain == "exclude"     ? AbstainPolicy::Exclude
                               : o.abstain == "incorrect" ? AbstainPolicy::Incorrect
                                                          : throw InputError("--abstain must be incorrect or exclude");
  CohenParams prm;
  prm.n0 = o.n0;
  prm.n = o.n;
  prm.alpha = o.alpha;
  const double max_r = o.max_radius > 0 ? o.max_radius : 4.0 * o.sigma;
  man.params() = {{"method", o.method}, {"sigma", o.sigma}, {"n0", o.n0},       {"n", o.n},
                  {"alpha", o.alpha},   {"abstain", o.abstain}, {"examples", count}, {"max_radius", max_r},
                  {"curve_points", o.points}};

  if (o.method != "det" && o.method != "lbound" && o.method != "cohen")
    throw InputError("unknown method '" + o.method + "' (expected lbound, det or cohen)");
  if (o.method != "cohen" && m.output_mode != OutputMode::Probabilities)
    throw InputError("method " + o.method + " needs a probabilities-mode model");

  m.passes.reset();
  std::vector<CertResult> results(count);
  const auto t0 = Clock::now();
  parallel_for(count, o.c.threads, [&](std::size_t i) {
    const Tensor x = ds.input(i);
    const int y = ds.labels[i];
    if (o.method == "det")
      results[i] = deterministic_certify(m, x, o.sigma, i, y);
    else if (o.method == "lbound")
      results[i] = l_bound_certify(m, x, o.sigma, i, y);
    else
      results[i] = cohen_certify(m, x, o.sigma, prm, man.seed(), i, y);
  });
  man.timing()["certify_seconds"] = seconds_since(t0);

  write_cert_csv(results, man.path("certify_" + o.method + ".csv"));
  const auto curve = certified_accuracy_curve(results, radius_grid(max_r, o.points), policy);
  write_curve_csv(curve, man.path("curve_" + o.method + ".csv"));
  std::size_t abstained = 0;
  for (const auto& r : results) abstained += r.abstained() ? 1 : 0;
  man.counters()["examples"] = count;
  man.counters()["forward_passes"] = m.passes.get();
  man.counters()["abstentions"] = abstained;
  man.counters()["clean_accuracy"] = curve.front().accuracy;
  man.write();
  std::cout << "certified accuracy at r=0: " << curve.front().accuracy << "  forward passes " << m.passes.get()
            << '\n';
  return 0;
}

// ---- attack ----

struct AttackOpts {
  Common c;
  std::string model, data, attack = "pgd", success = "top1", target = "model";
  double epsilon = 4.0, noise_sigma = 0.0, gamma = 0.05, avg_sigma = 0.1;
  std::optional<double> alpha;
  std::size_t steps = 20, n_noise = 0, avg_n = 2000, limit = 0;
};

int run_attack(const AttackOpts& o) {
  Manifest man("attack", o.c);
  const Mlp m = load_model(o.model);
  man.input_model("model", o.model, m);
  const Dataset ds = load_dataset_csv(o.data, m.num_classes());
  man.input_file("dataset", o.data);
  const std::size_t count = o.limit ? std::min(o.limit, ds.size()) : ds.size();

  AttackConfig cfg;
  cfg.steps = o.steps;
  cfg.epsilon = o.epsilon;
  cfg.alpha = o.alpha;
  cfg.n_noise = o.n_noise;
  cfg.noise_sigma = o.noise_sigma;
  cfg.ddn_gamma = o.gamma;
  cfg.seed = man.seed();
  cfg.validate();
  const SuccessCriterion crit = parse_success(o.success);
  if (o.attack != "pgd" && o.attack != "ddn") throw InputError("unknown attack '" + o.attack + "'");
  AttackTarget target;
  if (o.target == "model")
    target = mlp_target(m);
  else if (o.target == "averaged")
    target = averaged_target(m, o.avg_sigma, o.avg_n, man.seed());
  else
    throw InputError("--target must be model or averaged");
  man.params() = {{"attack", o.attack},   {"steps", cfg.steps},        {"epsilon", cfg.epsilon},
                  {"alpha", cfg.step_size()}, {"n_noise", cfg.n_noise}, {"noise_sigma", cfg.noise_sigma},
                  {"ddn_gamma", cfg.ddn_gamma}, {"success", o.success}, {"target", o.target},
                  {"avg_sigma", o.avg_sigma}, {"avg_n", o.avg_n},       {"examples", count}};

  std::vector<AttackResult> results(count);
  const auto t0 = Clock::now();
  parallel_for(count, o.c.threads, [&](std::size_t i) {
    const Tensor x = ds.input(i);
    const auto y = static_cast<std::size_t>(ds.labels[i]);
    results[i] = o.attack == "pgd" ? pgd_attack(target, x, y, cfg, crit, i) : ddn_attack(target, x, y, cfg, crit, i);
  });
  man.timing()["attack_seconds"] = seconds_since(t0);

  write_attack_csv(results, man.path("attack_" + o.attack + ".csv"));
  std::vector<double> norms(101);
  for (std::size_t i = 0; i < norms.size(); ++i) norms[i] = cfg.epsilon * static_cast<double>(i) / 100.0;
  write_attack_curve_csv(attack_curve(results, norms), man.path("attack_curve_" + o.attack + ".csv"));
  const DistanceMetrics dm = distance_metrics(results);
  json metrics = {{"attack", o.attack}, {"successes", dm.successes}, {"total", dm.total},
                  {"median", dm.median ? json(*dm.median) : json(nullptr)},
                  {"mean", dm.mean ? json(*dm.mean) : json(nullptr)},
                  {"empty", dm.empty()}};
  write_json(metrics, man.path("attack_metrics_" + o.attack + ".json"));
  man.counters()["successes"] = dm.successes;
  man.counters()["examples"] = count;
  man.write();
  std::cout << o.attack << " success " << dm.successes << "/" << count;
  if (dm.median) std::cout << "  median " << *dm.median << "  mean " << *dm.mean;
  std::cout << '\n';
  return 0;
}

// ---- oracle ----

struct OracleOpts {
  Common c;
  std::string model, u0 = "gaussian", fn = "sin", x = "0.3";
  std::optional<double> y;
  double sigma = 0.3, lo = -3.0, hi = 3.0, dx = 0.02;
  std::size_t component = 0, n = 100000, points = 5;
};

GridField initial_grid(const OracleOpts& o, std::optional<Mlp>& model) {
  if (o.u0 == "gaussian")
    return sample_grid(make_grid(1, o.lo, o.hi, o.dx), [](double t, double) { return gaussian_pdf(t, 1.0); });
  if (o.u0 != "model") throw InputError("--u0 must be gaussian or model");
  if (o.model.empty()) throw InputError("--u0 model needs --model");
  model = load_model(o.model).with_output_mode(OutputMode::Probabilities);
  return grid_restrict(*model, o.component, {o.lo, o.hi}, o.dx);
}

int run_heat_grid(const OracleOpts& o) {
  Manifest man("oracle-heat-grid", o.c);
  std::optional<Mlp> model;
  const GridField u0 = initial_grid(o, model);
  if (model) man.input_model("model", o.model, *model);
  man.params() = {{"u0", o.u0}, {"sigma", o.sigma}, {"lo", o.lo}, {"hi", o.hi}, {"dx", o.dx}, {"component", o.component}};
  const GridField u = heat_solve_grid(u0, o.sigma);
  write_grid_csv(u0, man.path("grid_u0.csv"));
  write_grid_csv(u, man.path("grid_heat.csv"));
  const json report = {{"steps", heat_schedule(o.sigma, o.dx, u0.dim, 1.0).steps},
                       {"mean_abs_change", mean_abs_diff(u0, u)},
                       {"max_abs_change", max_abs_diff(u0, u)}};
  write_json(report, man.path("heat_grid.json"));
  man.write();
  std::cout << report.dump() << '\n';
  return 0;
}

int run_mc_average(const OracleOpts& o) {
  Manifest man("oracle-mc-average", o.c);
  if (o.model.empty()) throw InputError("mc-average needs --model");
  const Mlp m = load_model(o.model);
  man.input_model("model", o.model, m);
  const Tensor x = Tensor::vector(parse_doubles(o.x));
  man.params() = {{"x", o.x}, {"sigma", o.sigma}, {"n", o.n}};
  const MCEstimate e = mc_gauss_average(m, x, o.sigma, o.n, man.seed());
  const json report = {{"mean", std::vector<double>(e.mean.data().begin(), e.mean.data().end())},
                       {"std_error", std::vector<double>(e.std_error.data().begin(), e.std_error.data().end())},
                       {"n_samples", e.n_samples},
                       {"seed", e.seed}};
  write_json(report, man.path("mc_average.json"));
  man.write();
  std::cout << report.dump() << '\n';
  return 0;
}

int run_bishop(const OracleOpts& o) {
  Manifest man("oracle-bishop", o.c);
  std::function<double(double)> f, df;
  if (o.fn == "sin") {
    f = [](double t) { return std::sin(t); };
    df = [](double t) { return std::cos(t); };
  } else if (o.fn == "linear") {
    f = [](double t) { return 2.0 * t - 1.0; };
    df = [](double) { return 2.0; };
  } else {
    throw InputError("--fn must be sin or linear");
  }
  const double x = parse_doubles(o.x).at(0);
  const double y = o.y.value_or(f(x));
  man.params() = {{"fn", o.fn}, {"x", x}, {"y", y}, {"sigma", o.sigma}, {"nodes", 64}};
  const BishopResult a = bishop_check(f, df, y, x, o.sigma);
  const BishopResult b = bishop_check(f, df, y, x, o.sigma / 2.0);
  json report = {{"sigma", o.sigma}, {"lhs", a.lhs}, {"rhs", a.rhs}, {"residual", a.residual},
                 {"residual_half_sigma", b.residual}};
  report["ratio"] = b.residual != 0.0 ? json(a.residual / b.residual) : json(nullptr);
  write_json(report, man.path("bishop.json"));
  man.write();
  std::cout << report.dump() << '\n';
  return 0;
}

// PDE solve, kernel quadrature and Monte-Carlo must agree pairwise.
int run_equivalence(const OracleOpts& o) {
  Manifest man("oracle-equivalence", o.c);
  std::optional<Mlp> model;
  const GridField u0 = initial_grid(o, model);
  if (model) man.input_model("model", o.model, *model);
  man.params() = {{"u0", o.u0}, {"sigma", o.sigma}, {"lo", o.lo}, {"hi", o.hi}, {"dx", o.dx},
                  {"component", o.component}, {"n", o.n}, {"points", o.points}};
  const GridField pde = heat_solve_grid(u0, o.sigma);
  const GridField conv = kernel_convolve(u0, o.sigma);
  const double grid_tol = std::max(5.0 * o.dx * o.dx, 1e-3);
  json report;
  report["pde_vs_quadrature_linf"] = max_abs_diff(pde, conv);
  report["grid_tolerance"] = grid_tol;
  bool pass = max_abs_diff(pde, conv) < grid_tol;

  if (!model) {
    // Gaussian N(0,1) diffused for unit time stays Gaussian with variance 1 + sigma^2.
    double linf = 0.0;
    for (std::size_t i = 0; i < pde.extent(0); ++i)
      linf = std::max(linf, std::abs(pde.values[i] - gaussian_pdf(pde.coord(0, i), std::sqrt(1.0 + o.sigma * o.sigma))));
    report["pde_vs_exact_linf"] = linf;
    pass = pass && linf < 1e-3;
  } else {
    // Monte-Carlo at interior nodes, away from the truncated boundary.
    json pts = json::array();
    const std::size_t n0 = pde.extent(0);
    const double margin = 6.0 * o.sigma;
    const auto first = static_cast<std::size_t>(std::ceil(margin / o.dx));
    if (2 * first + 1 >= n0) throw InputError("box too small for a 6 sigma margin");
    for (std::size_t k = 0; k < o.points; ++k) {
      const std::size_t i =
          first + (o.points == 1 ? 0 : k * (n0 - 1 - 2 * first) / (o.points - 1));
      const std::size_t j = pde.dim == 2 ? n0 / 2 : 0;
      std::vector<double> xv{pde.coord(0, i)};
      if (pde.dim == 2) xv.push_back(pde.coord(1, j));
      const MCEstimate e = mc_gauss_average(*model, Tensor::vector(xv), o.sigma, o.n, man.seed() + k);
      const double mc = e.mean[o.component];
      const double p = pde.dim == 1 ? pde.values[i] : pde.values.at(i, j);
      const double q = conv.dim == 1 ? conv.values[i] : conv.values.at(i, j);
      const double tol = std::max(3.0 * e.std_error[o.component], 5.0 * o.dx * o.dx);
      const bool ok = std::abs(mc - p) < tol && std::abs(mc - q) < tol;
      pass = pass && ok;
      pts.push_back({{"x", xv}, {"mc", mc}, {"mc_std_error", e.std_error[o.component]}, {"pde", p},
                     {"quadrature", q}, {"tolerance", tol}, {"pass", ok}});
    }
    report["points"] = pts;
  }
  report["pass"] = pass;
  write_json(report, man.path("equivalence.json"));
  man.write();
  std::cout << (pass ? "PASS" : "FAIL") << " equivalence " << report["pde_vs_quadrature_linf"] << '\n';
  return 0;
}

// ---- bench ----

struct BenchOpts {
  Common c;
  std::string model, base, data;
  double sigma = 0.1, alpha = 0.001;
  std::size_t n0 = 100, n = 10000, examples = 20;
};

int run_bench(const BenchOpts& o) {
  Manifest man("bench", o.c);
  const Mlp v = load_model(o.model);
  man.input_model("model", o.model, v);
  const Mlp f = o.base.empty() ? v : load_model(o.base);
  if (!o.base.empty()) man.input_model("base_model", o.base, f);
  const Dataset ds = load_dataset_csv(o.data, v.num_classes());
  man.input_file("dataset", o.data);
  const std::size_t count = std::min(o.examples, ds.size());
  man.params() = {{"sigma", o.sigma}, {"n0", o.n0}, {"n", o.n}, {"alpha", o.alpha}, {"examples", count}};
  CohenParams prm;
  prm.n0 = o.n0;
  prm.n = o.n;
  prm.alpha = o.alpha;

  std::vector<Tensor> xs;
  for (std::size_t i = 0; i < count; ++i) xs.push_back(ds.input(i));
  // Repeats the pass over the examples until at least 0.2 s has elapsed; returns seconds per call
  // and the number of calls made.
  auto timed = [&](auto&& fn) {
    std::size_t calls = 0;
    const auto t0 = Clock::now();
    do {
      for (std::size_t i = 0; i < count; ++i) fn(i);
      calls += count;
    } while (seconds_since(t0) < 0.2);
    return std::pair{seconds_since(t0) / static_cast<double>(calls), static_cast<double>(calls)};
  };
  const Mlp vp = v.with_output_mode(OutputMode::Probabilities);
  volatile std::size_t sink = 0;

  vp.passes.reset();
  const auto [det_class, det_class_calls] = timed([&](std::size_t i) { sink = sink + predict_class(vp, xs[i]); });
  const double det_class_passes = static_cast<double>(vp.passes.get()) / det_class_calls;
  vp.passes.reset();
  const auto [det_cert, det_cert_calls] = timed([&](std::size_t i) { deterministic_certify(vp, xs[i], o.sigma, i); });
  const double det_cert_passes = static_cast<double>(vp.passes.get()) / det_cert_calls;

  f.passes.reset();
  const auto [sto_class, sto_class_calls] = timed([&](std::size_t i) {
    sink = sink + noisy_vote(mlp_classifier(f), f.num_classes(), xs[i], o.sigma, o.n0 + o.n, man.seed(), i);
  });
  const double sto_class_passes = static_cast<double>(f.passes.get()) / sto_class_calls;
  f.passes.reset();
  const auto [sto_cert, sto_cert_calls] =
      timed([&](std::size_t i) { cohen_certify(f, xs[i], o.sigma, prm, man.seed(), i); });
  const double sto_cert_passes = static_cast<double>(f.passes.get()) / sto_cert_calls;

  json report = {
      {"deterministic",
       {{"classification_seconds", det_class}, {"certification_seconds", det_cert},
        {"passes_per_example_classification", det_class_passes},
        {"passes_per_example_certification", det_cert_passes}}},
      {"stochastic",
       {{"classification_seconds", sto_class}, {"certification_seconds", sto_cert},
        {"passes_per_example_classification", sto_class_passes},
        {"passes_per_example_certification", sto_cert_passes}}},
      {"classification_time_ratio", sto_class / det_class},
      {"certification_time_ratio", sto_cert / det_cert},
      {"ratio_lower_bound", 0.5 * static_cast<double>(o.n0 + o.n)}};
  write_json(report, man.path("bench.json"));
  man.counters()["deterministic_passes_per_certificate"] = det_cert_passes;
  man.counters()["stochastic_passes_per_certificate"] = sto_cert_passes;
  man.timing() = report;
  man.write();
  std::cout << report.dump(2) << '\n';
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"heatsmooth: deterministic Gaussian-averaged classifiers via heat smoothing"};
  app.require_subcommand(1);
  app.set_version_flag("--version", kVersion);

  GenDataOpts gd;
  auto* c_gen = app.add_subcommand("gen-data", "Generate a synthetic dataset CSV");
  add_common(c_gen, gd.c);
  c_gen->add_option("--kind", gd.kind, "blobs or step1d")->capture_default_str();
  c_gen->add_option("--n-per-class", gd.n_per_class)->capture_default_str();
  c_gen->add_option("--classes", gd.classes)->capture_default_str();
  c_gen->add_option("--dim", gd.dim)->capture_default_str();
  c_gen->add_option("--spread", gd.spread)->capture_default_str();
  c_gen->add_option("--n", gd.n, "Points for step1d")->capture_default_str();
  c_gen->add_option("--boundary", gd.boundary)->capture_default_str();
  c_gen->add_option("--outlier", gd.outlier)->capture_default_str();
  c_gen->add_option("--lo", gd.lo)->capture_default_str();
  c_gen->add_option("--hi", gd.hi)->capture_default_str();
  c_gen->add_option("--split", gd.split)->capture_default_str();
  c_gen->add_option("--file", gd.file, "Output CSV (default under --out)");

  TrainOpts tr;
  auto* c_train = app.add_subcommand("train-base", "Train the base classifier f^0");
  add_common(c_train, tr.c);
  add_optim(c_train, tr.optim);
  c_train->add_option("--data", tr.data, "Training CSV")->required();
  c_train->add_option("--arch", tr.arch, "Layer sizes, e.g. 2,64,64,3")->capture_default_str();
  c_train->add_option("--activation", tr.activation)->capture_default_str();
  c_train->add_option("--model-out", tr.model_out, "Model path (default under --out)");

  SmoothOpts sm;
  auto* c_smooth = app.add_subcommand("smooth", "Run the heat-smoothing schedule");
  add_common(c_smooth, sm.c);
  add_optim(c_smooth, sm.optim);
  c_smooth->add_option("--model", sm.model, "Base model JSON")->required();
  c_smooth->add_option("--data", sm.data, "Input CSV (labels ignored)")->required();
  c_smooth->add_option("--sigma", sm.sigma)->capture_default_str();
  c_smooth->add_option("--lambda", sm.lambda, "Default 5 (quadratic) or 100 (kl)");
  c_smooth->add_option("--n-t", sm.n_t, "Timesteps")->capture_default_str();
  c_smooth->add_option("--kappa", sm.kappa)->capture_default_str();
  c_smooth->add_option("--delta", sm.delta, "Finite-difference step")->capture_default_str();
  c_smooth->add_option("--loss-mode", sm.loss_mode, "quadratic or kl")->capture_default_str();
  c_smooth->add_option("--output", sm.target, "Output smoothed: probabilities or logits")->capture_default_str();
  c_smooth->add_flag("--unbiased-jl", sm.unbiased, "Rescale the estimator by Nc/kappa");

  CertifyOpts ce;
  auto* c_cert = app.add_subcommand("certify", "Certify examples and emit accuracy curves");
  add_common(c_cert, ce.c);
  c_cert->add_option("--model", ce.model)->required();
  c_cert->add_option("--data", ce.data)->required();
  c_cert->add_option("--method", ce.method, "lbound, det or cohen")->capture_default_str();
  c_cert->add_option("--sigma", ce.sigma)->capture_default_str();
  c_cert->add_option("--n0", ce.n0)->capture_default_str();
  c_cert->add_option("--n", ce.n)->capture_default_str();
  c_cert->add_option("--alpha", ce.alpha)->capture_default_str();
  c_cert->add_option("--abstain", ce.abstain, "incorrect or exclude")->capture_default_str();
  c_cert->add_option("--max-radius", ce.max_radius, "Curve range (default 4 sigma)");
  c_cert->add_option("--curve-points", ce.points)->capture_default_str();
  c_cert->add_option("--limit", ce.limit, "Use only the first N examples");

  AttackOpts at;
  auto* c_att = app.add_subcommand("attack", "Run PGD or DDN");
  add_common(c_att, at.c);
  c_att->add_option("--model", at.model)->required();
  c_att->add_option("--data", at.data)->required();
  c_att->add_option("--attack", at.attack, "pgd or ddn")->capture_default_str();
  c_att->add_option("--epsilon", at.epsilon)->capture_default_str();
  c_att->add_option("--steps", at.steps)->capture_default_str();
  c_att->add_option("--alpha", at.alpha, "Step size (default 2 epsilon / steps)");
  c_att->add_option("--n-noise", at.n_noise, "Noise samples per gradient (0 = plain)")->capture_default_str();
  c_att->add_option("--noise-sigma", at.noise_sigma)->capture_default_str();
  c_att->add_option("--gamma", at.gamma, "DDN norm factor")->capture_default_str();
  c_att->add_option("--success", at.success, "top1 or top5")->capture_default_str();
  c_att->add_option("--target", at.target, "model or averaged")->capture_default_str();
  c_att->add_option("--avg-sigma", at.avg_sigma)->capture_default_str();
  c_att->add_option("--avg-n", at.avg_n)->capture_default_str();
  c_att->add_option("--limit", at.limit, "Use only the first N examples");

  OracleOpts orc;
  auto* c_or = app.add_subcommand("oracle", "Independent numerical checks");
  c_or->require_subcommand(1);
  auto add_oracle_common = [&](CLI::App* s) {
    add_common(s, orc.c);
    s->add_option("--sigma", orc.sigma)->capture_default_str();
  };
  auto add_grid = [&](CLI::App* s) {
    s->add_option("--u0", orc.u0, "gaussian or model")->capture_default_str();
    s->add_option("--model", orc.model);
    s->add_option("--component", orc.component)->capture_default_str();
    s->add_option("--lo", orc.lo)->capture_default_str();
    s->add_option("--hi", orc.hi)->capture_default_str();
    s->add_option("--dx", orc.dx)->capture_default_str();
  };
  auto* o_heat = c_or->add_subcommand("heat-grid", "Solve the heat equation on a grid");
  add_oracle_common(o_heat);
  add_grid(o_heat);
  auto* o_mc = c_or->add_subcommand("mc-average", "Monte-Carlo Gaussian average of a model");
  add_oracle_common(o_mc);
  o_mc->add_option("--model", orc.model)->required();
  o_mc->add_option("--x", orc.x, "Comma-separated point")->required();
  o_mc->add_option("--n", orc.n)->capture_default_str();
  auto* o_bishop = c_or->add_subcommand("bishop", "Noise-loss vs gradient-penalty check");
  add_oracle_common(o_bishop);
  o_bishop->add_option("--fn", orc.fn, "sin or linear")->capture_default_str();
  o_bishop->add_option("--x", orc.x)->capture_default_str();
  o_bishop->add_option("--y", orc.y, "Target (default f(x))");
  auto* o_eq = c_or->add_subcommand("equivalence", "PDE vs quadrature vs Monte-Carlo");
  add_oracle_common(o_eq);
  add_grid(o_eq);
  o_eq->add_option("--n", orc.n)->capture_default_str();
  o_eq->add_option("--points", orc.points)->capture_default_str();

  BenchOpts be;
  auto* c_bench = app.add_subcommand("bench", "Time deterministic vs sampling inference");
  add_common(c_bench, be.c);
  c_bench->add_option("--model", be.model, "Smoothed model")->required();
  c_bench->add_option("--base", be.base, "Base model for the sampling path (default: --model)");
  c_bench->add_option("--data", be.data)->required();
  c_bench->add_option("--sigma", be.sigma)->capture_default_str();
  c_bench->add_option("--n0", be.n0)->capture_default_str();
  c_bench->add_option("--n", be.n)->capture_default_str();
  c_bench->add_option("--alpha", be.alpha)->capture_default_str();
  c_bench->add_option("--examples", be.examples)->capture_default_str();

  try {
    app.parse(argc, argv);
  } catch (const CLI::Success& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return 2;
  }

  try {
    if (c_gen->parsed()) return run_gen_data(gd);
    if (c_train->parsed()) return run_train_base(tr);
    if (c_smooth->parsed()) return run_smooth(sm);
    if (c_cert->parsed()) return run_certify(ce);
    if (c_att->parsed()) return run_attack(at);
    if (o_heat->parsed()) return run_heat_grid(orc);
    if (o_mc->parsed()) return run_mc_average(orc);
    if (o_bishop->parsed()) return run_bishop(orc);
    if (o_eq->parsed()) return run_equivalence(orc);
    if (c_bench->parsed()) return run_bench(be);
  } catch (const InputError& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 2;
  } catch (const NumericalError& e) {
    std::cerr << "numerical error: " << e.what() << '\n';
    return 3;
  } catch (const fs::filesystem_error& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 2;
  }
  return 2;
}
