#pragma once

// Training loops. All randomness (batch order, timesteps, noise draws)
// flows from the explicit seed in the params; runs are bit-reproducible.

#include <functional>
#include <memory>
#include <stdexcept>
#include <string>
#include <vector>

#include "diffdet/checkpoint.hpp"
#include "diffdet/data.hpp"
#include "diffdet/ddpm.hpp"
#include "diffdet/detector.hpp"
#include "diffdet/features.hpp"
#include "diffdet/image.hpp"

namespace diffdet {

class DivergenceError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// ---------------------------------------------------------------------------
// Denoiser training

struct DdpmTrainParams {
  int steps = 1500;
  int batch_size = 8;
  double lr = 2e-4;
  int crop = 0;  // random square crop; 0 trains on full images
  std::uint64_t seed = 0;
  int val_items = 8;
};

struct DdpmTrainResult {
  std::vector<double> loss_history;  // one entry per optimization step
  double val_loss_initial = 0;
  double val_loss_final = 0;
};

DdpmTrainResult train_denoiser(ddpm::UNetF& net, const std::vector<Image>& images,
                               const ddpm::NoiseSchedule& schedule,
                               const DdpmTrainParams& params);

// ---------------------------------------------------------------------------
// Detector training

enum class TrainMode { Baseline, DiffYolo };

inline std::string train_mode_name(TrainMode m) {
  return m == TrainMode::Baseline ? "baseline" : "diffyolo";
}

struct DetectorTrainParams {
  int epochs = 60;
  int batch_size = 8;
  double lr = 1e-3;
  double final_lr_fraction = 0.1;  // linear decay target
  std::uint64_t seed = 0;
  bool train_neck = false;  // diffyolo only: also unfreeze the neck
};

// Feature taps per image id; lets the trainer run identically from the
// disk cache or from live extraction.
using TapSource = std::function<features::TapStack(const std::string& id, const Image& image)>;

struct DetectorTrainResult {
  std::vector<double> loss_history;  // per-batch mean of the total loss
};

// Baseline mode trains everything. DiffYolo mode requires `projector` and
// `taps`, keeps the backbone frozen and by default trains adapter, fusion
// projections and heads (neck optional via params).
DetectorTrainResult train_detector(det::DetectorF& model,
                                   features::FusionProjector* projector,
                                   const TapSource& taps,
                                   const std::vector<data::AnnotatedImage>& train_set,
                                   const DetectorTrainParams& params, TrainMode mode);

// Copies every checkpoint parameter with a matching name; returns names
// the checkpoint did not provide (e.g. the adapter when warm-starting
// diffyolo from a baseline checkpoint).
template <typename Model>
std::vector<std::string> load_matching_params(Model& model, const Checkpoint& ckpt) {
  std::vector<std::string> missing;
  model.visit_params([&](const std::string& name, TensorF& w, TensorF&) {
    if (!ckpt.has_param(name)) {
      missing.push_back(name);
      return;
    }
    TensorF stored = ckpt.param(name);
    if (stored.shape() != w.shape())
      throw CheckpointError("shape mismatch for parameter " + name);
    w = std::move(stored);
  });
  return missing;
}

}  // namespace diffdet
