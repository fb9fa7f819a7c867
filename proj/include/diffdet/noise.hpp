#pragma once

// Seeded test-time corruption generators. All four conditions are pure
// functions of (image, spec): the seed lives in the spec, so a corrupted
// evaluation set is exactly reproducible.

#include <algorithm>
#include <cmath>
#include <limits>
#include <stdexcept>
#include <string>

#include "diffdet/image.hpp"
#include "diffdet/rng.hpp"

namespace diffdet {

enum class CorruptionKind { None, Gaussian, SaltPepper, Poisson };

struct CorruptionSpec {
  CorruptionKind kind = CorruptionKind::None;
  double sigma = 0.1;          // gaussian
  double amount = 0.05;        // salt_pepper: fraction of pixels hit
  double salt_fraction = 0.5;  // salt_pepper: P(pixel -> 1)
  double peak = 255.0;         // poisson: events at intensity 1.0
  std::uint64_t seed = 0;

  void validate() const {
    switch (kind) {
      case CorruptionKind::None:
        return;
      case CorruptionKind::Gaussian:
        if (sigma < 0) throw std::invalid_argument("corrupt: sigma must be >= 0");
        return;
      case CorruptionKind::SaltPepper:
        if (amount < 0 || amount > 1)
          throw std::invalid_argument("corrupt: amount must lie in [0,1]");
        if (salt_fraction < 0 || salt_fraction > 1)
          throw std::invalid_argument("corrupt: salt_fraction must lie in [0,1]");
        return;
      case CorruptionKind::Poisson:
        if (!(peak > 0)) throw std::invalid_argument("corrupt: peak must be > 0");
        return;
    }
    throw std::invalid_argument("corrupt: unknown kind");
  }
};

inline std::string corruption_kind_name(CorruptionKind k) {
  switch (k) {
    case CorruptionKind::None: return "none";
    case CorruptionKind::Gaussian: return "gaussian";
    case CorruptionKind::SaltPepper: return "salt_pepper";
    case CorruptionKind::Poisson: return "poisson";
  }
  return "?";
}

inline CorruptionKind corruption_kind_from_name(const std::string& s) {
  if (s == "none") return CorruptionKind::None;
  if (s == "gaussian") return CorruptionKind::Gaussian;
  if (s == "salt_pepper") return CorruptionKind::SaltPepper;
  if (s == "poisson") return CorruptionKind::Poisson;
  throw std::invalid_argument("unknown corruption kind: " + s);
}

inline Image corrupt(const Image& image, const CorruptionSpec& spec) {
  if (image.range != ValueRange::Unit)
    throw std::invalid_argument("corrupt: image must be in [0,1]");
  spec.validate();
  if (spec.kind == CorruptionKind::None) return image;

  Image out = image;
  TensorF& d = out.data;
  Rng rng(spec.seed);

  switch (spec.kind) {
    case CorruptionKind::Gaussian: {
      for (std::int64_t i = 0; i < d.numel(); ++i) {
        const double v = d[i] + spec.sigma * rng.normal();
        d[i] = static_cast<float>(std::clamp(v, 0.0, 1.0));
      }
      break;
    }
    case CorruptionKind::SaltPepper: {
      const std::int64_t n = d.numel();
      const auto hits = static_cast<std::int64_t>(spec.amount * static_cast<double>(n));
      const auto idx = rng.sample_without_replacement(n, hits);
      for (std::int64_t i : idx)
        d[i] = rng.uniform() < spec.salt_fraction ? 1.0f : 0.0f;
      break;
    }
    case CorruptionKind::Poisson: {
      for (std::int64_t i = 0; i < d.numel(); ++i) {
        const double lambda = static_cast<double>(d[i]) * spec.peak;
        const double v = static_cast<double>(rng.poisson(lambda)) / spec.peak;
        d[i] = static_cast<float>(std::clamp(v, 0.0, 1.0));
      }
      break;
    }
    case CorruptionKind::None:
      break;
  }
  return out;
}

// Peak signal-to-noise ratio in dB over [0,1] images; infinity for
// identical inputs.
inline double psnr(const Image& a, const Image& b) {
  if (!a.data.same_shape(b.data)) throw std::invalid_argument("psnr: shape mismatch");
  double mse = 0;
  for (std::int64_t i = 0; i < a.data.numel(); ++i) {
    const double diff = static_cast<double>(a.data[i]) - static_cast<double>(b.data[i]);
    mse += diff * diff;
  }
  mse /= static_cast<double>(a.data.numel());
  if (mse == 0) return std::numeric_limits<double>::infinity();
  return -10.0 * std::log10(mse);
}

}  // namespace diffdet
