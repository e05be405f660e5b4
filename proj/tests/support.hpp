#pragma once

// Shared generators for property tests.

#include <cstdint>
#include <random>
#include <vector>

#include "fedsim/datagen.hpp"
#include "fedsim/params.hpp"

namespace testing {

inline double uniform(std::mt19937_64& rng, double lo, double hi) {
  return std::uniform_real_distribution<double>(lo, hi)(rng);
}

inline std::size_t pick(std::mt19937_64& rng, std::size_t lo, std::size_t hi) {
  return std::uniform_int_distribution<std::size_t>(lo, hi)(rng);
}

inline fedsim::ParamVector random_params(std::mt19937_64& rng, std::size_t len, double scale = 1.0) {
  fedsim::ParamVector v(len);
  for (auto& x : v) x = uniform(rng, -scale, scale);
  return v;
}

// Gaussian features, uniformly random labels (every class not guaranteed).
inline fedsim::datagen::LabeledDataset random_dataset(std::mt19937_64& rng, std::size_t n, std::size_t dim,
                                                      std::uint32_t classes) {
  fedsim::datagen::LabeledDataset ds;
  ds.dim = dim;
  ds.num_classes = classes;
  std::normal_distribution<double> normal;
  ds.features.resize(n * dim);
  for (auto& f : ds.features) f = normal(rng);
  ds.labels.resize(n);
  for (auto& l : ds.labels) l = static_cast<std::uint32_t>(pick(rng, 0, classes - 1));
  return ds;
}

}  // namespace testing
