#pragma once

// Deterministic random source. mt19937_64 is fully specified by the
// standard; the distribution transforms are hand-rolled here because the
// std:: distributions are implementation-defined and would break
// cross-toolchain reproducibility of caches and reports.

#include <cmath>
#include <cstdint>
#include <random>
#include <stdexcept>
#include <string>
#include <vector>

namespace diffdet {

class Rng {
 public:
  explicit Rng(std::uint64_t seed) : engine_(seed) {}

  std::uint64_t next_u64() { return engine_(); }

  // Uniform in [0,1) with 53 random bits.
  double uniform() {
    return static_cast<double>(engine_() >> 11) * 0x1.0p-53;
  }

  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

  // Uniform integer in [0, n).
  std::uint64_t uniform_int(std::uint64_t n) {
    if (n == 0) throw std::invalid_argument("uniform_int: n must be > 0");
    // Rejection sampling to avoid modulo bias.
    const std::uint64_t limit = UINT64_MAX - UINT64_MAX % n;
    std::uint64_t x;
    do {
      x = engine_();
    } while (x >= limit);
    return x % n;
  }

  // Inclusive range.
  int uniform_int(int lo, int hi) {
    return lo + static_cast<int>(uniform_int(static_cast<std::uint64_t>(hi - lo + 1)));
  }

  // Standard normal via Box-Muller, second draw cached.
  double normal() {
    if (have_spare_) {
      have_spare_ = false;
      return spare_;
    }
    double u1 = uniform(), u2 = uniform();
    while (u1 <= 0.0) u1 = uniform();
    const double r = std::sqrt(-2.0 * std::log(u1));
    const double theta = 2.0 * M_PI * u2;
    spare_ = r * std::sin(theta);
    have_spare_ = true;
    return r * std::cos(theta);
  }

  // Poisson by inversion; large means split so exp(-lambda) stays normal.
  std::int64_t poisson(double lambda) {
    if (lambda < 0) throw std::invalid_argument("poisson: lambda must be >= 0");
    std::int64_t total = 0;
    while (lambda > 500.0) {
      total += poisson_small(500.0);
      lambda -= 500.0;
    }
    return total + poisson_small(lambda);
  }

  // Deterministic partial Fisher-Yates: k distinct indices from [0, n).
  std::vector<std::int64_t> sample_without_replacement(std::int64_t n, std::int64_t k) {
    if (k > n) throw std::invalid_argument("sample_without_replacement: k > n");
    std::vector<std::int64_t> idx(static_cast<std::size_t>(n));
    for (std::int64_t i = 0; i < n; ++i) idx[static_cast<std::size_t>(i)] = i;
    for (std::int64_t i = 0; i < k; ++i) {
      const std::int64_t j =
          i + static_cast<std::int64_t>(uniform_int(static_cast<std::uint64_t>(n - i)));
      std::swap(idx[static_cast<std::size_t>(i)], idx[static_cast<std::size_t>(j)]);
    }
    idx.resize(static_cast<std::size_t>(k));
    return idx;
  }

  template <typename T>
  void shuffle(std::vector<T>& v) {
    for (std::size_t i = v.size(); i > 1; --i) {
      const std::size_t j = static_cast<std::size_t>(uniform_int(i));
      std::swap(v[i - 1], v[j]);
    }
  }

 private:
  std::int64_t poisson_small(double lambda) {
    if (lambda <= 0.0) return 0;
    const double l = std::exp(-lambda);
    std::int64_t k = 0;
    double p = 1.0;
    do {
      ++k;
      p *= uniform();
    } while (p > l);
    return k - 1;
  }

  std::mt19937_64 engine_;
  bool have_spare_ = false;
  double spare_ = 0.0;
};

// Stable seed derivation so every consumer (stage, image, epoch) draws from
// its own stream. FNV-1a over the purpose string and salts.
inline std::uint64_t derive_seed(std::uint64_t root, const std::string& purpose,
                                 std::uint64_t salt = 0) {
  std::uint64_t h = 0xcbf29ce484222325ull;
  auto mix = [&h](std::uint64_t v) {
    for (int i = 0; i < 8; ++i) {
      h ^= (v >> (8 * i)) & 0xff;
      h *= 1099511628211ull;
    }
  };
  mix(root);
  for (unsigned char c : purpose) {
    h ^= c;
    h *= 1099511628211ull;
  }
  mix(salt);
  return h;
}

}  // namespace diffdet
