#pragma once

// End-to-end evaluation of a detector over a dataset split under a named
// corruption condition. Corruption is seeded per image from the spec seed,
// and diffyolo feature extraction runs on the corrupted image — exactly
// what the detector would see in the field.

#include <functional>
#include <string>
#include <vector>

#include "diffdet/data.hpp"
#include "diffdet/detector.hpp"
#include "diffdet/features.hpp"
#include "diffdet/metrics.hpp"
#include "diffdet/noise.hpp"
#include "diffdet/training.hpp"

namespace diffdet {

struct EvalParams {
  double conf_threshold = 0.25;  // operating point for reported P/R
  double nms_iou = 0.45;
  double decode_conf = 0.001;    // floor for AP computation
};

eval::EvalReport evaluate_detector(det::DetectorF& model,
                                   features::FusionProjector* projector,
                                   const TapSource& taps,
                                   const std::vector<data::AnnotatedImage>& dataset,
                                   const CorruptionSpec& corruption,
                                   const EvalParams& params,
                                   const std::vector<std::string>& class_names);

}  // namespace diffdet
