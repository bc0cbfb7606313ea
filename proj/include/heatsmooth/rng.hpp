#pragma once

#include <cstdint>
#include <initializer_list>
#include <random>

#include "heatsmooth/tensor.hpp"

namespace heatsmooth {

using Rng = std::mt19937_64;

inline std::uint64_t splitmix64(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

// Independent stream for a (seed, tag...) tuple, e.g. (seed, example id).
inline Rng make_rng(std::uint64_t seed, std::initializer_list<std::uint64_t> tags = {}) {
  std::uint64_t s = splitmix64(seed);
  for (auto t : tags) s = splitmix64(s ^ splitmix64(t + 0x632be59bd9b4e019ULL));
  return Rng(s);
}

inline Tensor normal_tensor(Shape shape, double stddev, Rng& rng) {
  Tensor t(std::move(shape));
  std::normal_distribution<double> nd(0.0, 1.0);
  for (double& v : t.data()) v = stddev * nd(rng);
  return t;
}

}  // namespace heatsmooth
