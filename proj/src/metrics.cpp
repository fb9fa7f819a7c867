#include "diffdet/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <map>
#include <stdexcept>

namespace diffdet::eval {

std::vector<MatchLabel> match_detections(const std::vector<PooledDetection>& dets,
                                         const std::vector<PooledGroundTruth>& gts,
                                         double iou_threshold) {
  std::vector<int> order(dets.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = static_cast<int>(i);
  std::stable_sort(order.begin(), order.end(), [&dets](int a, int b) {
    return dets[static_cast<std::size_t>(a)].det.confidence >
           dets[static_cast<std::size_t>(b)].det.confidence;
  });

  std::vector<char> gt_used(gts.size(), 0);
  std::vector<MatchLabel> labels;
  labels.reserve(dets.size());
  for (int idx : order) {
    const auto& d = dets[static_cast<std::size_t>(idx)];
    int best_gt = -1;
    double best_iou = 0;
    for (std::size_t g = 0; g < gts.size(); ++g) {
      if (gt_used[g]) continue;
      const auto& gt = gts[g];
      if (gt.image != d.image || gt.gt.class_id != d.det.class_id) continue;
      const double v = iou(d.det.box, gt.gt.box);
      if (v >= iou_threshold && v > best_iou) {
        best_iou = v;
        best_gt = static_cast<int>(g);
      }
    }
    MatchLabel lab;
    lab.confidence = d.det.confidence;
    lab.class_id = d.det.class_id;
    lab.tp = best_gt >= 0;
    if (best_gt >= 0) gt_used[static_cast<std::size_t>(best_gt)] = 1;
    labels.push_back(lab);
  }
  return labels;
}

std::vector<PRPoint> pr_curve(const std::vector<MatchLabel>& labels, int gt_count) {
  std::vector<MatchLabel> sorted = labels;
  std::stable_sort(sorted.begin(), sorted.end(),
                   [](const MatchLabel& a, const MatchLabel& b) {
                     return a.confidence > b.confidence;
                   });
  std::vector<PRPoint> curve;
  curve.reserve(sorted.size());
  int tp = 0, fp = 0;
  for (const auto& lab : sorted) {
    if (lab.tp)
      ++tp;
    else
      ++fp;
    PRPoint p;
    p.precision = static_cast<double>(tp) / (tp + fp);
    p.recall = gt_count > 0 ? static_cast<double>(tp) / gt_count : 0.0;
    p.confidence = lab.confidence;
    curve.push_back(p);
  }
  return curve;
}

double average_precision(const std::vector<PRPoint>& curve) {
  double sum = 0;
  for (int i = 0; i <= 100; ++i) {
    const double r = static_cast<double>(i) / 100.0;
    double envelope = 0;
    for (const auto& p : curve)
      if (p.recall >= r) envelope = std::max(envelope, p.precision);
    sum += envelope;
  }
  return sum / 101.0;
}

void precision_recall_at(const std::vector<MatchLabel>& labels, int gt_count,
                         double conf_threshold, double* precision, double* recall) {
  int tp = 0, fp = 0;
  for (const auto& lab : labels) {
    if (lab.confidence < conf_threshold) continue;
    if (lab.tp)
      ++tp;
    else
      ++fp;
  }
  *precision = (tp + fp) > 0 ? static_cast<double>(tp) / (tp + fp) : 0.0;
  *recall = gt_count > 0 ? static_cast<double>(tp) / gt_count : 0.0;
}

nlohmann::json EvalReport::to_json() const {
  auto row_json = [](const ClassRow& r) {
    return nlohmann::json{{"class_id", r.class_id}, {"name", r.name},   {"p", r.p},
                          {"r", r.r},               {"ap50", r.ap50},   {"ap", r.ap},
                          {"gt_count", r.gt_count}};
  };
  nlohmann::json rows_j = nlohmann::json::array();
  for (const auto& r : rows) rows_j.push_back(row_json(r));
  return {{"condition", condition},
          {"model", model},
          {"config_hash", config_hash},
          {"rows", std::move(rows_j)},
          {"all", row_json(all)},
          {"counts", {{"images", images}, {"gt_boxes", gt_boxes}, {"detections", detections}}}};
}

EvalReport EvalReport::from_json(const nlohmann::json& j) {
  auto row_from = [](const nlohmann::json& rj) {
    ClassRow r;
    r.class_id = rj.at("class_id").get<int>();
    r.name = rj.at("name").get<std::string>();
    r.p = rj.at("p").get<double>();
    r.r = rj.at("r").get<double>();
    r.ap50 = rj.at("ap50").get<double>();
    r.ap = rj.at("ap").get<double>();
    r.gt_count = rj.at("gt_count").get<int>();
    return r;
  };
  EvalReport rep;
  rep.condition = j.at("condition").get<std::string>();
  rep.model = j.at("model").get<std::string>();
  rep.config_hash = j.value("config_hash", "");
  for (const auto& rj : j.at("rows")) rep.rows.push_back(row_from(rj));
  rep.all = row_from(j.at("all"));
  rep.images = j.at("counts").at("images").get<int>();
  rep.gt_boxes = j.at("counts").at("gt_boxes").get<int>();
  rep.detections = j.at("counts").at("detections").get<int>();
  return rep;
}

EvalReport compute_report(const std::vector<PooledDetection>& dets,
                          const std::vector<PooledGroundTruth>& gts,
                          const std::vector<std::string>& class_names,
                          double conf_threshold) {
  EvalReport rep;
  rep.gt_boxes = static_cast<int>(gts.size());
  rep.detections = static_cast<int>(dets.size());

  std::map<int, int> gt_per_class;
  for (const auto& g : gts) ++gt_per_class[g.gt.class_id];

  for (const auto& [cls, gt_count] : gt_per_class) {
    std::vector<PooledDetection> class_dets;
    for (const auto& d : dets)
      if (d.det.class_id == cls) class_dets.push_back(d);

    const auto labels = match_detections(class_dets, gts, 0.5);
    ClassRow row;
    row.class_id = cls;
    row.name = cls < static_cast<int>(class_names.size()) ? class_names[static_cast<std::size_t>(cls)]
                                                          : std::to_string(cls);
    row.gt_count = gt_count;
    precision_recall_at(labels, gt_count, conf_threshold, &row.p, &row.r);
    row.ap50 = average_precision(pr_curve(labels, gt_count));

    double ap_sum = 0;
    for (int k = 0; k < 10; ++k) {
      const double thr = 0.5 + 0.05 * k;
      const auto lab_k = match_detections(class_dets, gts, thr);
      ap_sum += average_precision(pr_curve(lab_k, gt_count));
    }
    row.ap = ap_sum / 10.0;
    rep.rows.push_back(row);
  }

  rep.all.class_id = -1;
  rep.all.name = "all";
  if (!rep.rows.empty()) {
    for (const auto& r : rep.rows) {
      rep.all.p += r.p;
      rep.all.r += r.r;
      rep.all.ap50 += r.ap50;
      rep.all.ap += r.ap;
      rep.all.gt_count += r.gt_count;
    }
    const auto n = static_cast<double>(rep.rows.size());
    rep.all.p /= n;
    rep.all.r /= n;
    rep.all.ap50 /= n;
    rep.all.ap /= n;
  }
  return rep;
}

}  // namespace diffdet::eval
