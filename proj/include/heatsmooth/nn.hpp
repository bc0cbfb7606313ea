#pragma once

// Multilayer perceptron classifiers, SGD with momentum, and base-model training.

#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstdint>
#include <numeric>
#include <string>
#include <utility>
#include <vector>

#include <nlohmann/json.hpp>

#include "heatsmooth/autodiff.hpp"
#include "heatsmooth/data.hpp"
#include "heatsmooth/error.hpp"
#include "heatsmooth/rng.hpp"
#include "heatsmooth/tensor.hpp"

namespace heatsmooth {

enum class Activation { Relu, Tanh };
enum class OutputMode { Logits, Probabilities };

inline std::string to_string(Activation a) { return a == Activation::Relu ? "relu" : "tanh"; }
inline std::string to_string(OutputMode m) { return m == OutputMode::Logits ? "logits" : "probabilities"; }

inline Activation parse_activation(const std::string& s) {
  if (s == "relu") return Activation::Relu;
  if (s == "tanh") return Activation::Tanh;
  throw InputError("unknown activation '" + s + "'");
}

inline OutputMode parse_output_mode(const std::string& s) {
  if (s == "logits") return OutputMode::Logits;
  if (s == "probabilities") return OutputMode::Probabilities;
  throw InputError("unknown output mode '" + s + "'");
}

// Number of example rows pushed through a model by the inference entry points.
class PassCounter {
 public:
  PassCounter() = default;
  PassCounter(const PassCounter& o) : n_(o.get()) {}
  PassCounter& operator=(const PassCounter& o) {
    n_.store(o.get());
    return *this;
  }
  void add(std::uint64_t k) const { n_.fetch_add(k, std::memory_order_relaxed); }
  std::uint64_t get() const { return n_.load(std::memory_order_relaxed); }
  void reset() const { n_.store(0); }

 private:
  mutable std::atomic<std::uint64_t> n_{0};
};

struct Mlp {
  std::vector<std::size_t> layer_sizes;  // input dim, hidden dims..., number of classes
  Activation activation = Activation::Relu;
  OutputMode output_mode = OutputMode::Logits;
  std::vector<Tensor> weights;  // layer l: (layer_sizes[l+1] x layer_sizes[l])
  std::vector<Tensor> biases;   // layer l: (layer_sizes[l+1])
  std::uint64_t seed = 0;
  std::string provenance;
  PassCounter passes;

  std::size_t input_dim() const { return layer_sizes.front(); }
  std::size_t num_classes() const { return layer_sizes.back(); }
  std::size_t num_layers() const { return weights.size(); }

  Mlp with_output_mode(OutputMode m) const {
    Mlp copy = *this;
    copy.output_mode = m;
    return copy;
  }

  void validate() const {
    if (layer_sizes.size() < 3) throw InputError("Mlp: need input, at least one hidden and an output layer");
    if (weights.size() != layer_sizes.size() - 1 || biases.size() != weights.size())
      throw InputError("Mlp: parameter count does not match layer_sizes");
    for (std::size_t l = 0; l < weights.size(); ++l) {
      const Shape ws{layer_sizes[l + 1], layer_sizes[l]};
      if (weights[l].shape() != ws || biases[l].shape() != Shape{layer_sizes[l + 1]})
        throw InputError("Mlp: layer " + std::to_string(l) + " weight shape " + shape_str(weights[l].shape()) +
                         " incompatible with layer_sizes");
    }
  }
};

// Uniform Glorot initialisation, zero biases.
inline Mlp init_mlp(const std::vector<std::size_t>& layer_sizes, Activation activation, std::uint64_t seed,
                    OutputMode mode = OutputMode::Logits) {
  if (layer_sizes.empty()) throw InputError("init_mlp: empty layer list");
  if (layer_sizes.size() < 3) throw InputError("init_mlp: at least one hidden layer is required");
  for (auto d : layer_sizes)
    if (d == 0) throw InputError("init_mlp: layer sizes must be positive");

  Mlp m;
  m.layer_sizes = layer_sizes;
  m.activation = activation;
  m.output_mode = mode;
  m.seed = seed;
  m.provenance = "init";
  Rng rng = make_rng(seed, {0x1417});
  for (std::size_t l = 0; l + 1 < layer_sizes.size(); ++l) {
    const std::size_t fan_in = layer_sizes[l], fan_out = layer_sizes[l + 1];
    const double bound = std::sqrt(6.0 / static_cast<double>(fan_in + fan_out));
    std::uniform_real_distribution<double> u(-bound, bound);
    Tensor w({fan_out, fan_in});
    for (double& v : w.data()) v = u(rng);
    m.weights.push_back(std::move(w));
    m.biases.emplace_back(Shape{fan_out});
  }
  return m;
}

namespace detail {

inline void check_input(const Mlp& m, const Tensor& x) {
  if (x.cols() != m.input_dim() || x.rank() > 2)
    throw InputError("Mlp: input shape " + shape_str(x.shape()) + " does not match input dim " +
                     std::to_string(m.input_dim()));
}

inline void activate(Activation a, Tensor& h) {
  if (a == Activation::Relu) {
    for (double& v : h.data()) v = v > 0.0 ? v : 0.0;
  } else {
    for (double& v : h.data()) v = std::tanh(v);
  }
}

}  // namespace detail

// Pre-softmax outputs for one example (rank 1) or a batch (rank 2, one example per row).
inline Tensor logits(const Mlp& m, const Tensor& x) {
  detail::check_input(m, x);
  Tensor h = as_matrix(x);
  for (std::size_t l = 0; l < m.num_layers(); ++l) {
    Tensor z = ad::detail::matmul_t_values(h, m.weights[l]);
    const auto b = m.biases[l].data();
    for (std::size_t r = 0; r < z.rows(); ++r) {
      auto row = z.row(r);
      for (std::size_t j = 0; j < row.size(); ++j) row[j] += b[j];
    }
    if (l + 1 < m.num_layers()) detail::activate(m.activation, z);
    h = std::move(z);
  }
  m.passes.add(h.rows());
  return x.rank() == 1 ? h.reshaped({m.num_classes()}) : h;
}

inline Tensor probabilities(const Mlp& m, const Tensor& x) { return ad::detail::softmax_rows(logits(m, x)); }

// Model output in its configured mode.
inline Tensor forward(const Mlp& m, const Tensor& x) {
  return m.output_mode == OutputMode::Probabilities ? probabilities(m, x) : logits(m, x);
}

inline std::size_t predict_class(const Mlp& m, const Tensor& x) { return argmax(logits(m, x).data()); }

// Parameters of an Mlp placed on a graph.
struct MlpVars {
  std::vector<ad::Var> weights;
  std::vector<ad::Var> biases;
};

inline MlpVars bind(ad::Graph& g, const Mlp& m, bool trainable) {
  MlpVars p;
  for (std::size_t l = 0; l < m.num_layers(); ++l) {
    p.weights.push_back(g.leaf(m.weights[l], trainable));
    p.biases.push_back(g.leaf(m.biases[l], trainable));
  }
  return p;
}

// `x` is a batch (rows are examples) already on the graph.
inline ad::Var logits(const Mlp& m, const MlpVars& p, ad::Var x) {
  detail::check_input(m, x.value());
  ad::Var h = x.value().rank() == 1 ? ad::reshape(x, {1, m.input_dim()}) : x;
  for (std::size_t l = 0; l < m.num_layers(); ++l) {
    h = ad::add_row(ad::matmul_transposed(h, p.weights[l]), p.biases[l]);
    if (l + 1 < m.num_layers()) h = m.activation == Activation::Relu ? ad::relu(h) : ad::tanh(h);
  }
  return h;
}

inline ad::Var forward(const Mlp& m, const MlpVars& p, ad::Var x) {
  ad::Var z = logits(m, p, x);
  return m.output_mode == OutputMode::Probabilities ? ad::softmax(z) : z;
}

inline Tensor one_hot(const std::vector<int>& labels, std::size_t num_classes) {
  Tensor t({labels.size(), num_classes});
  for (std::size_t i = 0; i < labels.size(); ++i) t.at(i, static_cast<std::size_t>(labels[i])) = 1.0;
  return t;
}

// Mean cross-entropy of logits (batch x classes) against integer labels.
inline ad::Var cross_entropy(ad::Var logits_batch, const std::vector<int>& labels) {
  ad::Graph& g = *logits_batch.graph;
  const std::size_t n = logits_batch.value().rows();
  ad::Var oh = g.constant(one_hot(labels, logits_batch.value().cols()));
  return ad::scale(ad::sum(ad::mul(ad::log_softmax(logits_batch), oh)), -1.0 / static_cast<double>(n));
}

struct OptimConfig {
  double learning_rate = 0.05;
  double momentum = 0.9;
  // (epoch, multiplier): from that epoch on the rate is learning_rate * multiplier.
  // Empty means step decay x0.1 at 50% and x0.01 at 75% of the epochs.
  std::vector<std::pair<std::size_t, double>> schedule;
  std::size_t epochs = 100;  // per training phase; per timestep when smoothing
  std::size_t batch_size = 64;
  std::uint64_t seed = 0;

  void validate() const {
    if (!(learning_rate > 0.0)) throw InputError("OptimConfig: learning_rate must be positive");
    if (!(momentum >= 0.0 && momentum < 1.0)) throw InputError("OptimConfig: momentum must be in [0,1)");
    if (epochs == 0) throw InputError("OptimConfig: epochs must be positive");
    if (batch_size == 0) throw InputError("OptimConfig: batch_size must be positive");
    for (std::size_t i = 0; i < schedule.size(); ++i) {
      if (!(schedule[i].second > 0.0)) throw InputError("OptimConfig: schedule multipliers must be positive");
      if (i > 0 && schedule[i].first <= schedule[i - 1].first)
        throw InputError("OptimConfig: schedule epochs must be strictly increasing");
    }
  }

  double lr_at(std::size_t epoch) const {
    double mult = 1.0;
    if (schedule.empty()) {
      if (2 * epoch >= epochs) mult = 0.1;
      if (4 * epoch >= 3 * epochs) mult = 0.01;
    } else {
      for (const auto& [e, m] : schedule)
        if (epoch >= e) mult = m;
    }
    return learning_rate * mult;
  }
};

// Heavy-ball SGD: v <- mu v + g;  w <- w - lr v.
class SgdMomentum {
 public:
  SgdMomentum(const Mlp& m, double momentum) : momentum_(momentum) {
    for (std::size_t l = 0; l < m.num_layers(); ++l) {
      vw_.emplace_back(m.weights[l].shape());
      vb_.emplace_back(m.biases[l].shape());
    }
  }

  void step(Mlp& m, const MlpVars& p, const ad::Gradients& grads, double lr) {
    for (std::size_t l = 0; l < m.num_layers(); ++l) {
      update(m.weights[l], vw_[l], grads, p.weights[l], lr);
      update(m.biases[l], vb_[l], grads, p.biases[l], lr);
    }
  }

 private:
  void update(Tensor& w, Tensor& v, const ad::Gradients& grads, ad::Var var, double lr) {
    if (!grads.has(var)) return;
    const Tensor& g = grads.at(var);
    for (std::size_t i = 0; i < w.size(); ++i) {
      v[i] = momentum_ * v[i] + g[i];
      w[i] -= lr * v[i];
    }
  }

  double momentum_;
  std::vector<Tensor> vw_, vb_;
};

inline std::vector<std::size_t> shuffled_indices(std::size_t n, Rng& rng) {
  std::vector<std::size_t> idx(n);
  std::iota(idx.begin(), idx.end(), std::size_t{0});
  std::shuffle(idx.begin(), idx.end(), rng);
  return idx;
}

inline Tensor gather_rows(const Tensor& x, std::span<const std::size_t> idx) {
  std::vector<double> out;
  out.reserve(idx.size() * x.cols());
  for (auto i : idx) {
    auto r = x.row(i);
    out.insert(out.end(), r.begin(), r.end());
  }
  return Tensor::matrix(idx.size(), x.cols(), std::move(out));
}

inline double accuracy(const Mlp& m, const Dataset& ds) {
  const Tensor out = logits(m, ds.inputs);
  std::size_t correct = 0;
  for (std::size_t i = 0; i < ds.size(); ++i)
    if (static_cast<int>(argmax(out.row(i))) == ds.labels[i]) ++correct;
  return static_cast<double>(correct) / static_cast<double>(ds.size());
}

struct TrainReport {
  Mlp model;
  double train_accuracy = 0.0;
  double final_loss = 0.0;
  std::vector<double> epoch_losses;
};

// Cross-entropy training of the base classifier on logits.
inline TrainReport train_base(const Dataset& ds, const std::vector<std::size_t>& layer_sizes, const OptimConfig& cfg,
                              Activation activation = Activation::Relu) {
  ds.validate();
  cfg.validate();
  if (layer_sizes.empty() || layer_sizes.front() != ds.dim() || layer_sizes.back() != ds.num_classes)
    throw InputError("train_base: layer sizes must start at input dim " + std::to_string(ds.dim()) +
                     " and end at " + std::to_string(ds.num_classes) + " classes");

  TrainReport rep;
  rep.model = init_mlp(layer_sizes, activation, cfg.seed);
  Mlp& m = rep.model;
  SgdMomentum opt(m, cfg.momentum);

  for (std::size_t epoch = 0; epoch < cfg.epochs; ++epoch) {
    Rng rng = make_rng(cfg.seed, {0x7a1, epoch});
    const auto order = shuffled_indices(ds.size(), rng);
    const double lr = cfg.lr_at(epoch);
    double loss_sum = 0.0;
    for (std::size_t start = 0; start < order.size(); start += cfg.batch_size) {
      const std::size_t end = std::min(order.size(), start + cfg.batch_size);
      std::span<const std::size_t> idx(order.data() + start, end - start);
      std::vector<int> labels;
      for (auto i : idx) labels.push_back(ds.labels[i]);

      ad::Graph g;
      MlpVars p = bind(g, m, true);
      ad::Var x = g.constant(gather_rows(ds.inputs, idx));
      ad::Var loss = cross_entropy(logits(m, p, x), labels);
      const double lv = loss.value().item();
      if (!std::isfinite(lv))
        throw NumericalError("train_base: loss became non-finite at epoch " + std::to_string(epoch));
      loss_sum += lv * static_cast<double>(idx.size());
      opt.step(m, p, g.backward(loss), lr);
    }
    rep.epoch_losses.push_back(loss_sum / static_cast<double>(ds.size()));
  }
  m.provenance = "train_base";
  rep.final_loss = rep.epoch_losses.back();
  rep.train_accuracy = accuracy(m, ds);
  return rep;
}

// ---- serialisation ----

inline nlohmann::json to_json(const Mlp& m) {
  nlohmann::json j;
  j["layer_sizes"] = m.layer_sizes;
  j["activation"] = to_string(m.activation);
  j["output_mode"] = to_string(m.output_mode);
  j["seed"] = m.seed;
  j["provenance"] = m.provenance;
  auto& ws = j["weights"] = nlohmann::json::array();
  auto& bs = j["biases"] = nlohmann::json::array();
  for (std::size_t l = 0; l < m.num_layers(); ++l) {
    nlohmann::json w = nlohmann::json::array();
    for (std::size_t r = 0; r < m.weights[l].rows(); ++r) {
      auto row = m.weights[l].row(r);
      w.push_back(std::vector<double>(row.begin(), row.end()));
    }
    ws.push_back(std::move(w));
    bs.push_back(m.biases[l].storage());
  }
  return j;
}

inline Mlp mlp_from_json(const nlohmann::json& j) {
  try {
    Mlp m;
    m.layer_sizes = j.at("layer_sizes").get<std::vector<std::size_t>>();
    m.activation = parse_activation(j.at("activation").get<std::string>());
    m.output_mode = parse_output_mode(j.at("output_mode").get<std::string>());
    m.seed = j.value("seed", std::uint64_t{0});
    m.provenance = j.value("provenance", std::string{});
    const auto& ws = j.at("weights");
    const auto& bs = j.at("biases");
    for (std::size_t l = 0; l < ws.size(); ++l) {
      std::vector<double> flat;
      std::size_t rows = 0, cols = 0;
      for (const auto& row : ws[l]) {
        auto r = row.get<std::vector<double>>();
        cols = r.size();
        flat.insert(flat.end(), r.begin(), r.end());
        ++rows;
      }
      if (rows == 0 || cols == 0) throw InputError("model JSON: empty weight matrix at layer " + std::to_string(l));
      m.weights.emplace_back(Shape{rows, cols}, std::move(flat));
      m.biases.push_back(Tensor::vector(bs.at(l).get<std::vector<double>>()));
    }
    m.validate();
    return m;
  } catch (const nlohmann::json::exception& e) {
    throw InputError(std::string("model JSON: ") + e.what());
  }
}

// FNV-1a over the parameter bytes and architecture; identical models hash identically.
inline std::uint64_t model_hash(const Mlp& m) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  auto mix = [&h](const void* p, std::size_t n) {
    const auto* b = static_cast<const unsigned char*>(p);
    for (std::size_t i = 0; i < n; ++i) {
      h ^= b[i];
      h *= 0x100000001b3ULL;
    }
  };
  for (auto s : m.layer_sizes) mix(&s, sizeof s);
  for (std::size_t l = 0; l < m.num_layers(); ++l) {
    mix(m.weights[l].data().data(), m.weights[l].size() * sizeof(double));
    mix(m.biases[l].data().data(), m.biases[l].size() * sizeof(double));
  }
  return h;
}

}  // namespace heatsmooth
