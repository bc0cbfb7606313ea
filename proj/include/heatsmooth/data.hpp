#pragma once

// Synthetic datasets and their CSV persistence.

#include <cmath>
#include <cstdint>
#include <cstdio>
#include <fstream>
#include <numbers>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "heatsmooth/error.hpp"
#include "heatsmooth/rng.hpp"
#include "heatsmooth/tensor.hpp"

namespace heatsmooth {

struct Dataset {
  Tensor inputs;            // one example per row
  std::vector<int> labels;  // in [0, num_classes)
  std::size_t num_classes = 2;
  std::string name;
  std::uint64_t seed = 0;
  std::string split = "train";

  std::size_t size() const noexcept { return labels.size(); }
  std::size_t dim() const noexcept { return inputs.cols(); }
  Tensor input(std::size_t i) const { return inputs.row_tensor(i); }

  void validate() const {
    if (labels.empty()) throw InputError("dataset '" + name + "' is empty");
    if (inputs.rank() != 2 || inputs.rows() != labels.size())
      throw InputError("dataset '" + name + "': " + std::to_string(labels.size()) + " labels for inputs of shape " +
                       shape_str(inputs.shape()));
    for (std::size_t i = 0; i < labels.size(); ++i)
      if (labels[i] < 0 || static_cast<std::size_t>(labels[i]) >= num_classes)
        throw InputError("dataset '" + name + "': label " + std::to_string(labels[i]) + " at row " +
                         std::to_string(i) + " outside [0," + std::to_string(num_classes) + ")");
  }
};

inline std::uint64_t split_tag(const std::string& split) { return split == "test" ? 2 : split == "train" ? 1 : 3; }

// Class centres sit on the unit circle (first two coordinates) for dim >= 2, or evenly on
// [-1, 1] for dim == 1. Points are centre + spread * N(0, I).
inline Dataset make_blobs(std::size_t n_per_class, std::size_t num_classes, std::size_t dim, double spread,
                          std::uint64_t seed, const std::string& split = "train") {
  if (num_classes < 2) throw InputError("make_blobs: need at least 2 classes");
  if (dim == 0 || dim > 64) throw InputError("make_blobs: dim must be in [1, 64], got " + std::to_string(dim));
  if (!(spread >= 0.0)) throw InputError("make_blobs: spread must be non-negative");
  if (n_per_class == 0) throw InputError("make_blobs: n_per_class must be positive");

  Dataset ds;
  ds.num_classes = num_classes;
  ds.name = "blobs";
  ds.seed = seed;
  ds.split = split;
  const std::size_t n = n_per_class * num_classes;
  ds.inputs = Tensor({n, dim});
  ds.labels.resize(n);

  Rng rng = make_rng(seed, {0xb10b5, split_tag(split)});
  std::normal_distribution<double> nd(0.0, 1.0);
  for (std::size_t c = 0; c < num_classes; ++c) {
    std::vector<double> centre(dim, 0.0);
    if (dim == 1) {
      centre[0] = -1.0 + 2.0 * static_cast<double>(c) / static_cast<double>(num_classes - 1);
    } else {
      const double angle = 2.0 * std::numbers::pi * static_cast<double>(c) / static_cast<double>(num_classes);
      centre[0] = std::cos(angle);
      centre[1] = std::sin(angle);
    }
    for (std::size_t k = 0; k < n_per_class; ++k) {
      const std::size_t i = c * n_per_class + k;
      ds.labels[i] = static_cast<int>(c);
      auto row = ds.inputs.row(i);
      for (std::size_t j = 0; j < dim; ++j) row[j] = centre[j] + spread * nd(rng);
    }
  }
  return ds;
}

struct Step1dOptions {
  double lo = -2.0;
  double hi = 2.0;
  double outlier = -0.5;     // coordinate of the injected minority point
  int outlier_label = 1;
};

// 1D two-class data: label = (x > boundary), sampled on a jittered regular grid over [lo, hi],
// plus one injected point at `outlier` carrying the minority label.
inline Dataset make_step1d(std::size_t n, double boundary, std::uint64_t seed, const Step1dOptions& opt = {},
                           const std::string& split = "train") {
  if (n < 10) throw InputError("make_step1d: n must be at least 10");
  Dataset ds;
  ds.num_classes = 2;
  ds.name = "step1d";
  ds.seed = seed;
  ds.split = split;
  ds.inputs = Tensor({n + 1, 1});
  ds.labels.resize(n + 1);

  Rng rng = make_rng(seed, {0x57e9, split_tag(split)});
  std::uniform_real_distribution<double> jitter(-0.5, 0.5);
  const double width = (opt.hi - opt.lo) / static_cast<double>(n);
  for (std::size_t i = 0; i < n; ++i) {
    const double x = opt.lo + width * (static_cast<double>(i) + 0.5 + 0.8 * jitter(rng));
    ds.inputs[i] = x;
    ds.labels[i] = x > boundary ? 1 : 0;
  }
  ds.inputs[n] = opt.outlier;
  ds.labels[n] = opt.outlier_label;
  return ds;
}

inline void save_dataset_csv(const Dataset& ds, const std::string& path) {
  std::ofstream out(path);
  if (!out) throw InputError("cannot write dataset to " + path);
  for (std::size_t j = 0; j < ds.dim(); ++j) out << "x_" << j << ',';
  out << "label\n";
  char buf[32];
  for (std::size_t i = 0; i < ds.size(); ++i) {
    for (double v : ds.inputs.row(i)) {
      std::snprintf(buf, sizeof buf, "%.17g", v);
      out << buf << ',';
    }
    out << ds.labels[i] << '\n';
  }
}

// `num_classes`, when given, bounds the labels; otherwise it is inferred as max label + 1.
inline Dataset load_dataset_csv(const std::string& path, std::optional<std::size_t> num_classes = std::nullopt) {
  std::ifstream in(path);
  if (!in) throw InputError("cannot open dataset " + path);
  std::string line;
  if (!std::getline(in, line) || line.empty()) throw InputError(path + ": empty file");

  std::size_t dim = 0;
  {
    std::stringstream hs(line);
    std::string cell;
    std::vector<std::string> cols;
    while (std::getline(hs, cell, ',')) cols.push_back(cell);
    if (cols.size() < 2 || cols.back() != "label") throw InputError(path + ":1: header must be x_0,...,label");
    dim = cols.size() - 1;
  }

  std::vector<double> values;
  std::vector<int> labels;
  std::size_t lineno = 1;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty()) continue;
    std::stringstream ls(line);
    std::string cell;
    std::vector<std::string> cells;
    while (std::getline(ls, cell, ',')) cells.push_back(cell);
    if (cells.size() != dim + 1)
      throw InputError(path + ":" + std::to_string(lineno) + ": expected " + std::to_string(dim + 1) + " fields, got " +
                       std::to_string(cells.size()));
    try {
      for (std::size_t j = 0; j < dim; ++j) {
        std::size_t used = 0;
        const double v = std::stod(cells[j], &used);
        if (used != cells[j].size() || !std::isfinite(v)) throw std::invalid_argument(cells[j]);
        values.push_back(v);
      }
      std::size_t used = 0;
      const long lab = std::stol(cells[dim], &used);
      if (used != cells[dim].size()) throw std::invalid_argument(cells[dim]);
      if (lab < 0 || (num_classes && static_cast<std::size_t>(lab) >= *num_classes))
        throw InputError(path + ":" + std::to_string(lineno) + ": label " + std::to_string(lab) + " out of range");
      labels.push_back(static_cast<int>(lab));
    } catch (const InputError&) {
      throw;
    } catch (const std::exception&) {
      throw InputError(path + ":" + std::to_string(lineno) + ": malformed row '" + line + "'");
    }
  }
  if (labels.empty()) throw InputError(path + ": no data rows");

  Dataset ds;
  ds.inputs = Tensor({labels.size(), dim}, std::move(values));
  ds.labels = std::move(labels);
  int max_label = 0;
  for (int l : ds.labels) max_label = std::max(max_label, l);
  ds.num_classes = num_classes.value_or(std::max<std::size_t>(2, static_cast<std::size_t>(max_label) + 1));
  ds.name = path;
  return ds;
}

}  // namespace heatsmooth
