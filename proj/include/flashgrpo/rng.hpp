// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstddef>
#include <cstdint>
#include <initializer_list>
#include <random>

#include "flashgrpo/tensor.hpp"

namespace flashgrpo {

using Rng = std::mt19937_64;

// splitmix64 finalizer.
inline std::uint64_t mix64(std::uint64_t z) {
  z += 0x9e3779b97f4a7c15ULL;
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
  return z ^ (z >> 31);
}

// Counter-based stream derivation: the same (seed, path) always yields the
// same engine, and distinct paths give unrelated streams.
inline Rng make_stream(std::uint64_t seed,
                       std::initializer_list<std::uint64_t> path) {
  std::uint64_t h = mix64(seed);
  for (std::uint64_t p : path) h = mix64(h ^ mix64(p + 0x632be59bd9b4e019ULL));
  return Rng(h);
}

inline double standard_normal(Rng& rng) {
  return std::normal_distribution<double>(0.0, 1.0)(rng);
}

inline double uniform01(Rng& rng) {
  return std::uniform_real_distribution<double>(0.0, 1.0)(rng);
}

// Uniform integer in [lo, hi].
inline std::size_t uniform_index(Rng& rng, std::size_t lo, std::size_t hi) {
  return std::uniform_int_distribution<std::size_t>(lo, hi)(rng);
}

inline Tensor normal_tensor(Rng& rng, Tensor::Shape shape) {
  Tensor t(std::move(shape));
  for (double& v : t.values()) v = standard_normal(rng);
  return t;
}

}  // namespace flashgrpo
