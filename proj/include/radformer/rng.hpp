#pragma once

#include <cmath>
#include <cstdint>
#include <random>
#include <vector>

namespace radformer {

// Deterministic random helpers. std::mt19937 output is fully specified by the
// standard, but the distributions and std::shuffle are not; everything here is
// built directly on the raw generator so that identical seeds give identical
// streams on every platform and compiler.
class Rng {
 public:
  explicit Rng(std::uint64_t seed) : gen_(static_cast<std::uint32_t>(seed ^ (seed >> 32))) {}

  std::uint32_t next_u32() { return gen_(); }

  // Uniform in [0, 1) with 24 bits of mantissa.
  double uniform() { return (gen_() >> 8) * (1.0 / 16777216.0); }

  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

  // Uniform integer in [0, n), n > 0.
  std::size_t index(std::size_t n) {
    // rejection sampling keeps the draw unbiased
    const std::uint64_t limit = (0x100000000ULL / n) * n;
    std::uint64_t v;
    do {
      v = gen_();
    } while (v >= limit);
    return static_cast<std::size_t>(v % n);
  }

  int integer(int lo, int hi) {  // inclusive bounds
    return lo + static_cast<int>(index(static_cast<std::size_t>(hi - lo + 1)));
  }

  // Box-Muller; avoids std::normal_distribution's unspecified algorithm.
  double normal() {
    if (have_spare_) {
      have_spare_ = false;
      return spare_;
    }
    double u1 = uniform();
    double u2 = uniform();
    if (u1 < 1e-12) u1 = 1e-12;
    const double r = std::sqrt(-2.0 * std::log(u1));
    const double a = 6.283185307179586476925286766559 * u2;
    spare_ = r * std::sin(a);
    have_spare_ = true;
    return r * std::cos(a);
  }

  double normal(double mean, double stddev) { return mean + stddev * normal(); }

  // Fisher-Yates with explicit draws, stable across platforms.
  template <typename T>
  void shuffle(std::vector<T>& v) {
    for (std::size_t i = v.size(); i > 1; --i) {
      std::swap(v[i - 1], v[index(i)]);
    }
  }

  // Derive an independent stream, e.g. one per epoch or per fold.
  std::uint64_t fork(std::uint64_t salt) {
    std::uint64_t h = 0x9e3779b97f4a7c15ULL ^ salt;
    h ^= static_cast<std::uint64_t>(gen_()) << 32;
    h ^= gen_();
    h *= 0xbf58476d1ce4e5b9ULL;
    h ^= h >> 27;
    return h;
  }

 private:
  std::mt19937 gen_;
  bool have_spare_ = false;
  double spare_ = 0.0;
};

}  // namespace radformer
