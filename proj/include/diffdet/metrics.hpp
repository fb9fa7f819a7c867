#pragma once

// Detection metrics: greedy confidence-ordered matching, PR curves,
// 101-point interpolated AP, mAP@0.5 and mAP@[0.5:0.95], plus the report
// structure mirroring the four-condition comparison tables.

#include <string>
#include <vector>

#include <json.hpp>

#include "diffdet/boxes.hpp"

namespace diffdet::eval {

// Detection pooled across images; `image` scopes the matching.
struct PooledDetection {
  int image = 0;
  Detection det;
};

struct PooledGroundTruth {
  int image = 0;
  GroundTruthBox gt;
};

struct MatchLabel {
  double confidence = 0;
  bool tp = false;
  int class_id = 0;
};

// Greedy per-class matching in descending-confidence order (stable ties):
// a detection claims the highest-IoU unmatched same-class ground truth of
// its image with IoU >= threshold. Returns one label per detection.
std::vector<MatchLabel> match_detections(const std::vector<PooledDetection>& dets,
                                         const std::vector<PooledGroundTruth>& gts,
                                         double iou_threshold);

struct PRPoint {
  double precision = 0;
  double recall = 0;
  double confidence = 0;
};

// Cumulative PR points for one class, labels sorted descending internally.
std::vector<PRPoint> pr_curve(const std::vector<MatchLabel>& labels, int gt_count);

// 101-point interpolation: envelope precision sampled at recall
// 0, 0.01, ..., 1.00.
double average_precision(const std::vector<PRPoint>& curve);

// Operating point at a fixed confidence threshold. With no detections at
// or above the threshold, precision is reported as 0 by convention.
void precision_recall_at(const std::vector<MatchLabel>& labels, int gt_count,
                         double conf_threshold, double* precision, double* recall);

struct ClassRow {
  int class_id = 0;
  std::string name;
  double p = 0, r = 0, ap50 = 0, ap = 0;  // ap == mAP@[0.5:0.95] per class
  int gt_count = 0;
};

struct EvalReport {
  std::string condition;
  std::string model;        // "baseline" | "diffyolo"
  std::string config_hash;  // stamps which experiment produced it
  std::vector<ClassRow> rows;  // classes present in ground truth, ascending id
  ClassRow all;                // unweighted mean over rows
  int images = 0;
  int gt_boxes = 0;
  int detections = 0;

  nlohmann::json to_json() const;
  static EvalReport from_json(const nlohmann::json& j);
};

// Full per-class evaluation. Detections must already be NMS-filtered.
// P/R use `conf_threshold`; AP uses every detection given.
EvalReport compute_report(const std::vector<PooledDetection>& dets,
                          const std::vector<PooledGroundTruth>& gts,
                          const std::vector<std::string>& class_names,
                          double conf_threshold);

}  // namespace diffdet::eval
