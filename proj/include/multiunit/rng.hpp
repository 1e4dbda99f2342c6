// Copyright 2026 The multiunit Authors
//
// Licensed under the Apache License, Version 2.0 (the "License");
// you may not use this file except in compliance with the License.
// You may obtain a copy of the License at
//
//   http://www.apache.org/licenses/LICENSE-2.0
//
// Unless required by applicable law or agreed to in writing, software
// distributed under the License is distributed on an "AS IS" BASIS,
// WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
// See the License for the specific language governing permissions and
// limitations under the License.

#pragma once

#include <cstdint>
#include <string_view>

#include "multiunit/base.hpp"

namespace multiunit {

// Deterministic PRNG. std::mt19937 would be portable but the std
// distributions are implementation-defined, so both the generator and the
// distributions are written out here; every byte a run emits depends only on
// the seed, never on the standard library version.
class Rng {
 public:
  explicit Rng(std::uint64_t seed) : state_(seed) {}

  // SplitMix64 (Steele, Lea, Flood 2014). Passes BigCrush; one 64-bit word of
  // state makes seeding from a hash trivially safe.
  std::uint64_t next_u64() {
    std::uint64_t z = (state_ += 0x9E3779B97F4A7C15ull);
    z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ull;
    z = (z ^ (z >> 27)) * 0x94D049BB133111EBull;
    return z ^ (z >> 31);
  }

  // Uniform in [0, 1) with 53 bits of mantissa.
  double uniform() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

  // Uniform integer in [0, n). n must be positive.
  int uniform_int(int n) {
    if (n <= 0) throw InputError("uniform_int requires n > 0");
    return static_cast<int>(uniform() * static_cast<double>(n));
  }

  // Inclusive range [lo, hi].
  int uniform_range(int lo, int hi) {
    if (hi < lo) throw InputError("uniform_range requires lo <= hi");
    return lo + uniform_int(hi - lo + 1);
  }

  // Box-Muller; caches the second variate.
  double gauss(double mean = 0.0, double stddev = 1.0) {
    if (have_spare_) {
      have_spare_ = false;
      return mean + stddev * spare_;
    }
    double u1 = uniform();
    double u2 = uniform();
    // Guard log(0); probability 2^-53 but determinism must not hinge on luck.
    if (u1 <= 0.0) u1 = 0x1.0p-53;
    const double r = std::sqrt(-2.0 * std::log(u1));
    const double theta = 2.0 * 3.141592653589793238462643383279502884 * u2;
    spare_ = r * std::sin(theta);
    have_spare_ = true;
    return mean + stddev * r * std::cos(theta);
  }

 private:
  std::uint64_t state_;
  bool have_spare_ = false;
  double spare_ = 0.0;
};

// FNV-1a over the tag, mixed into the seed through one SplitMix64 round.
// Gives every named consumer (parameter init, batch sampling, noise, ...)
// its own independent stream, so adding a consumer never shifts the draws
// seen by existing ones.
inline std::uint64_t mix_seed(std::uint64_t seed, std::string_view tag) {
  std::uint64_t h = 0xCBF29CE484222325ull;
  for (char c : tag) {
    h ^= static_cast<unsigned char>(c);
    h *= 0x100000001B3ull;
  }
  Rng mixer(seed ^ h);
  return mixer.next_u64();
}

inline std::uint64_t mix_seed(std::uint64_t seed, std::string_view tag, std::uint64_t n) {
  Rng mixer(mix_seed(seed, tag) ^ (0x9E3779B97F4A7C15ull * (n + 1)));
  return mixer.next_u64();
}

}  // namespace multiunit
