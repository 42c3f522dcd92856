#pragma once

#include <cstdint>
#include <random>
#include <string_view>

#include "mfm/tensor.hpp"

namespace mfm {

/// 64-bit FNV-1a.
constexpr std::uint64_t stable_hash(std::string_view s) {
  std::uint64_t h = 1469598103934665603ull;
  for (unsigned char c : s) {
    h ^= c;
    h *= 1099511628211ull;
  }
  return h;
}

/// Per-component seed: master seed XOR stable_hash(component name).
constexpr std::uint64_t split_seed(std::uint64_t master, std::string_view component) {
  return master ^ stable_hash(component);
}

using Rng = std::mt19937_64;

template <typename T>
Tensor<T> normal_tensor(Shape shape, Rng& rng, double stddev, double mean = 0.0) {
  std::normal_distribution<double> dist(mean, stddev);
  Tensor<T> t(std::move(shape));
  for (auto& v : t.data()) v = static_cast<T>(dist(rng));
  return t;
}

template <typename T>
Tensor<T> uniform_tensor(Shape shape, Rng& rng, double lo, double hi) {
  std::uniform_real_distribution<double> dist(lo, hi);
  Tensor<T> t(std::move(shape));
  for (auto& v : t.data()) v = static_cast<T>(dist(rng));
  return t;
}

}  // namespace mfm
