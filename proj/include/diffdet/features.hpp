#pragma once

// Multi-level diffusion feature extraction, fusion into a single map of
// fixed shape, and the on-disk feature cache.
//
// The cache stores pre-projection taps resized to the injection
// resolution: the 1x1 fusion projections train together with the detector
// adapter, so projecting at load time keeps cached files valid for the
// whole fine-tune. Provenance (image id, timestep, tap set, eps seed,
// ddpm checkpoint hash) fully determines the cached bytes.

#include <functional>
#include <stdexcept>
#include <string>
#include <vector>

#include <json.hpp>

#include "diffdet/ddpm.hpp"
#include "diffdet/image.hpp"
#include "diffdet/nn.hpp"
#include "diffdet/tensor.hpp"

namespace diffdet::features {

class CacheCorruptError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class CacheStaleError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct ExtractionConfig {
  int t = 50;                       // noising timestep fed to q_sample
  std::vector<int> tap_levels = {1, 2};
  int fused_channels = 32;          // C_f after projection
  int fused_h = 8, fused_w = 8;     // injection resolution
  std::uint64_t seed = 0;           // root of the per-image eps seeds

  nlohmann::json to_json() const;
  static ExtractionConfig from_json(const nlohmann::json& j);
};

struct Provenance {
  std::string image_id;
  int t = 0;
  std::vector<int> tap_levels;
  std::uint64_t eps_seed = 0;
  std::string ddpm_checkpoint;  // whole-file hash of the weights used

  bool operator==(const Provenance&) const = default;
  nlohmann::json to_json() const;
  static Provenance from_json(const nlohmann::json& j);
};

// Resized (but not yet projected) taps; the unit stored on disk.
struct TapStack {
  std::vector<TensorF> taps;  // tap_levels order, each (C_level, H_f, W_f)
  Provenance prov;
};

// Post-projection fused map, the detector-facing artifact.
struct FusedFeature {
  TensorF data;  // (C_f, H_f, W_f)
  Provenance prov;
};

// Trainable per-tap 1x1 projections; fusion is their elementwise sum.
class FusionProjector {
 public:
  FusionProjector() = default;
  FusionProjector(const std::vector<int>& tap_levels, const std::vector<int>& tap_channels,
                  int out_channels);

  void init(Rng& rng);
  FusedFeature forward(const TapStack& stack);
  void backward(const TensorF& dfused);

  void visit_params(const nn::ParamVisitor<float>& v);
  void zero_grads();

 private:
  std::vector<int> tap_levels_;
  std::vector<nn::Conv2d<float>> proj_;
};

std::uint64_t eps_seed_for_image(std::uint64_t root, const std::string& image_id);

// q_sample at t with the provenance-seeded eps, U-Net forward, taps
// resized bilinearly to the injection resolution.
TapStack extract_taps(const Image& image, ddpm::UNetF& unet,
                      const ddpm::NoiseSchedule& schedule, const ExtractionConfig& cfg,
                      const std::string& image_id, const std::string& ddpm_hash);

FusedFeature extract_fused(const Image& image, ddpm::UNetF& unet,
                           const ddpm::NoiseSchedule& schedule, const ExtractionConfig& cfg,
                           const std::string& image_id, const std::string& ddpm_hash,
                           FusionProjector& projector);

// Cache file I/O. Load verifies the payload checksum (CacheCorruptError)
// and, when `expect` is given, provenance compatibility (CacheStaleError).
void save_feature(const TapStack& stack, const std::string& path);
TapStack load_feature(const std::string& path, const Provenance* expect = nullptr);

void require_compatible(const Provenance& have, const Provenance& want);

struct CacheEntry {
  std::string id;
  std::string path;  // relative to the manifest directory
  std::string checksum;
};

struct CacheManifest {
  int version = 1;
  std::string ddpm_checkpoint;
  ExtractionConfig extraction;
  std::vector<CacheEntry> entries;

  nlohmann::json to_json() const;
  static CacheManifest from_json(const nlohmann::json& j);
};

struct BuildCacheStats {
  int extracted = 0;
  int skipped = 0;
  std::vector<std::string> failed_ids;
};

// One cache file per image; idempotent: valid existing entries are kept.
CacheManifest build_cache(const std::vector<std::pair<std::string, Image>>& images,
                          ddpm::UNetF& unet, const ddpm::NoiseSchedule& schedule,
                          const ExtractionConfig& cfg, const std::string& ddpm_hash,
                          const std::string& out_dir, BuildCacheStats* stats = nullptr);

CacheManifest load_manifest(const std::string& path);
void save_manifest(const CacheManifest& m, const std::string& path);

}  // namespace diffdet::features
