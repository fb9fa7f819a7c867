#pragma once

// The full experiment pipeline: ddpm-train -> feature-cache ->
// baseline-train -> diffyolo-finetune -> noise-sweep evaluation ->
// comparison report. Stages are skipped when their content-addressed key
// (config sections + upstream artifact hashes) and output hashes still
// match the run manifest; nothing is keyed on timestamps.

#include <stdexcept>
#include <string>
#include <vector>

#include "diffdet/config.hpp"
#include "diffdet/data.hpp"

namespace diffdet {

class StageError : public std::runtime_error {
 public:
  StageError(std::string stage, const std::string& msg)
      : std::runtime_error("stage '" + stage + "' failed: " + msg), stage_(std::move(stage)) {}
  const std::string& stage() const { return stage_; }

 private:
  std::string stage_;
};

struct DatasetBundle {
  std::vector<data::AnnotatedImage> train, val, test;
};

// Materializes the configured dataset (synthetic or deeppcb) and splits it.
DatasetBundle build_dataset(const ExperimentConfig& cfg);

struct PipelineResult {
  std::vector<std::string> stages_run;
  std::vector<std::string> stages_skipped;
};

PipelineResult run_pipeline(const ExperimentConfig& cfg);

// Relative artifact paths inside the experiment directory.
namespace artifacts {
inline constexpr const char* kConfig = "config.json";
inline constexpr const char* kManifest = "manifest.json";
inline constexpr const char* kDdpm = "ddpm.ckpt";
inline constexpr const char* kFeatureDir = "features";
inline constexpr const char* kFeatureManifest = "features/manifest.json";
inline constexpr const char* kBaseline = "baseline.ckpt";
inline constexpr const char* kDiffYolo = "diffyolo.ckpt";
inline constexpr const char* kReportDir = "reports";
inline constexpr const char* kComparisonText = "comparison.txt";
inline constexpr const char* kComparisonCsv = "comparison.csv";
}  // namespace artifacts

}  // namespace diffdet
