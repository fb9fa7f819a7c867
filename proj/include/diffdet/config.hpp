#pragma once

// The single experiment config: one JSON document drives every stage.
// validate_config fills defaults, checks cross-field invariants and
// returns either a normalized config or a list of errors with JSON paths.
// The canonical echo (sorted keys, compact) is what gets hashed into every
// artifact the pipeline produces.

#include <array>
#include <string>
#include <vector>

#include <json.hpp>

#include "diffdet/data.hpp"
#include "diffdet/detector.hpp"
#include "diffdet/evaluate.hpp"
#include "diffdet/features.hpp"
#include "diffdet/model_io.hpp"
#include "diffdet/noise.hpp"
#include "diffdet/training.hpp"

namespace diffdet {

struct ExperimentConfig {
  std::uint64_t seed = 0;
  std::string out_dir = "runs/exp";

  std::string dataset_source = "synthetic";  // "synthetic" | "deeppcb"
  std::string deeppcb_root;
  int synthetic_count = 350;
  data::SyntheticConfig synthetic;
  std::array<double, 3> split_ratios = {0.8, 0.1, 0.1};
  std::uint64_t split_seed = 0;

  ScheduleParams schedule;
  ddpm::UNetConfig unet;
  DdpmTrainParams ddpm_train;
  features::ExtractionConfig extraction;
  det::DetectorConfig detector;  // injection disabled; diffyolo variant derives from it
  DetectorTrainParams train_baseline;
  DetectorTrainParams train_diffyolo;
  EvalParams eval;
  std::vector<CorruptionSpec> corruptions;

  // canonical normalized echo; hash() stamps artifacts
  nlohmann::json canonical;
  std::string hash() const;

  det::DetectorConfig diffyolo_detector() const {
    det::DetectorConfig c = detector;
    c.injection.enabled = true;
    c.injection.fused_channels = extraction.fused_channels;
    return c;
  }
};

struct ConfigValidation {
  std::vector<std::string> errors;
  ExperimentConfig config;
  bool ok() const { return errors.empty(); }
};

// `raw` is the user's JSON document (may be empty: all defaults).
ConfigValidation validate_config(const nlohmann::json& raw);

nlohmann::json corruption_to_json(const CorruptionSpec& c);
CorruptionSpec corruption_from_json(const nlohmann::json& j);

std::string canonical_dump(const nlohmann::json& j);

}  // namespace diffdet
