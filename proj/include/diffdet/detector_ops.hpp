#pragma once

// Target assignment, loss and decoding for the anchor-free detector.
// Assignment is center-cell: each ground-truth box lands in the cell of
// one scale (routed by box size), first box wins an occupied cell. The
// loss is IoU on decoded boxes for positives, binary objectness over all
// cells and binary class terms at positives.

#include <algorithm>
#include <cmath>
#include <vector>

#include "diffdet/boxes.hpp"
#include "diffdet/detector.hpp"
#include "diffdet/tensor.hpp"

namespace diffdet::det {

inline constexpr double kMaxLogSize = 8.0;  // exp clamp, keeps decode finite

struct Assignment {
  int scale_idx = 0;
  int gx = 0, gy = 0;
  int gt_index = 0;
};

inline int route_scale(const Box& b, const DetectorConfig& cfg) {
  const double max_side = std::max(b.x2 - b.x1, b.y2 - b.y1);
  if (max_side <= cfg.assign_small_max) return 0;
  if (max_side <= cfg.assign_medium_max) return 1;
  return 2;
}

inline std::vector<Assignment> assign_targets(const std::vector<GroundTruthBox>& gts,
                                              const DetectorConfig& cfg) {
  std::vector<Assignment> out;
  std::vector<std::vector<char>> occupied(3);
  for (int k = 0; k < 3; ++k)
    occupied[static_cast<std::size_t>(k)].assign(
        static_cast<std::size_t>(cfg.grid_size(k)) * cfg.grid_size(k), 0);
  for (int i = 0; i < static_cast<int>(gts.size()); ++i) {
    const Box& b = gts[static_cast<std::size_t>(i)].box;
    const int k = route_scale(b, cfg);
    const int s = kStrides[static_cast<std::size_t>(k)];
    const int grid = cfg.grid_size(k);
    const double cx = 0.5 * (b.x1 + b.x2), cy = 0.5 * (b.y1 + b.y2);
    const int gx = std::clamp(static_cast<int>(cx / s), 0, grid - 1);
    const int gy = std::clamp(static_cast<int>(cy / s), 0, grid - 1);
    char& cell = occupied[static_cast<std::size_t>(k)][static_cast<std::size_t>(gy) * grid + gx];
    if (cell) continue;  // first box keeps the cell
    cell = 1;
    out.push_back({k, gx, gy, i});
  }
  return out;
}

template <typename T>
inline T sigmoid(T z) {
  return T(1) / (T(1) + std::exp(-z));
}

// log(1 + e^z), overflow-safe
template <typename T>
inline T softplus(T z) {
  return std::max(z, T(0)) + std::log1p(std::exp(-std::abs(z)));
}

template <typename T>
inline T bce_with_logits(T z, T target) {
  return softplus(z) - z * target;
}

template <typename T>
struct DecodedBox {
  T x1, y1, x2, y2;
  T w, h;           // decoded size, needed by the gradient
  T sig_tx, sig_ty; // cached sigmoids
};

template <typename T>
DecodedBox<T> decode_box(T tx, T ty, T tw, T th, int gx, int gy, int stride) {
  DecodedBox<T> d;
  d.sig_tx = sigmoid(tx);
  d.sig_ty = sigmoid(ty);
  const T cx = (static_cast<T>(gx) + d.sig_tx) * static_cast<T>(stride);
  const T cy = (static_cast<T>(gy) + d.sig_ty) * static_cast<T>(stride);
  d.w = std::exp(std::min(tw, static_cast<T>(kMaxLogSize))) * static_cast<T>(stride);
  d.h = std::exp(std::min(th, static_cast<T>(kMaxLogSize))) * static_cast<T>(stride);
  d.x1 = cx - d.w / T(2);
  d.y1 = cy - d.h / T(2);
  d.x2 = cx + d.w / T(2);
  d.y2 = cy + d.h / T(2);
  return d;
}

struct LossComponents {
  double total = 0;
  double box = 0;
  double obj = 0;
  double cls = 0;
  int positives = 0;
};

// Channel layout per cell: [tx, ty, tw, th, obj, cls0..clsK-1].
// When `draw` is non-null it receives d(total)/d(raw) per scale.
template <typename T>
LossComponents detection_loss(const std::vector<Tensor<T>>& raw,
                              const std::vector<GroundTruthBox>& gts,
                              const DetectorConfig& cfg,
                              std::vector<Tensor<T>>* draw = nullptr) {
  const int K = cfg.class_count;
  if (draw) {
    draw->clear();
    for (const auto& r : raw) draw->emplace_back(r.shape());
  }

  const auto assignments = assign_targets(gts, cfg);

  // objectness over every cell of every scale
  std::int64_t total_cells = 0;
  for (int k = 0; k < 3; ++k) total_cells += static_cast<std::int64_t>(cfg.grid_size(k)) * cfg.grid_size(k);

  std::vector<std::vector<int>> pos_of_cell(3);
  for (int k = 0; k < 3; ++k)
    pos_of_cell[static_cast<std::size_t>(k)].assign(
        static_cast<std::size_t>(cfg.grid_size(k)) * cfg.grid_size(k), -1);
  for (int a = 0; a < static_cast<int>(assignments.size()); ++a) {
    const auto& as = assignments[static_cast<std::size_t>(a)];
    pos_of_cell[static_cast<std::size_t>(as.scale_idx)]
               [static_cast<std::size_t>(as.gy) * cfg.grid_size(as.scale_idx) + as.gx] = a;
  }

  double obj_sum = 0;
  const double obj_norm = 1.0 / static_cast<double>(total_cells);
  for (int k = 0; k < 3; ++k) {
    const int grid = cfg.grid_size(k);
    const auto& r = raw[static_cast<std::size_t>(k)];
    for (int gy = 0; gy < grid; ++gy)
      for (int gx = 0; gx < grid; ++gx) {
        const bool positive =
            pos_of_cell[static_cast<std::size_t>(k)][static_cast<std::size_t>(gy) * grid + gx] >= 0;
        const T z = r.at(4, gy, gx);
        const double wgt = positive ? cfg.obj_pos_weight : 1.0;
        obj_sum += wgt * static_cast<double>(bce_with_logits(z, positive ? T(1) : T(0)));
        if (draw) {
          const double dz = wgt * (static_cast<double>(sigmoid(z)) - (positive ? 1.0 : 0.0));
          (*draw)[static_cast<std::size_t>(k)].at(4, gy, gx) +=
              static_cast<T>(cfg.obj_weight * obj_norm * dz);
        }
      }
  }
  const double obj_loss = obj_sum * obj_norm;

  double box_sum = 0, cls_sum = 0;
  const int n_pos = static_cast<int>(assignments.size());
  const double box_norm = n_pos > 0 ? 1.0 / n_pos : 0.0;
  const double cls_norm = n_pos > 0 ? 1.0 / (static_cast<double>(n_pos) * K) : 0.0;

  for (const auto& as : assignments) {
    const auto k = static_cast<std::size_t>(as.scale_idx);
    const int stride = kStrides[k];
    const auto& r = raw[k];
    const GroundTruthBox& gt = gts[static_cast<std::size_t>(as.gt_index)];

    // class terms
    for (int j = 0; j < K; ++j) {
      const T z = r.at(5 + j, as.gy, as.gx);
      const T target = gt.class_id == j ? T(1) : T(0);
      cls_sum += static_cast<double>(bce_with_logits(z, target));
      if (draw)
        (*draw)[k].at(5 + j, as.gy, as.gx) += static_cast<T>(
            cfg.cls_weight * cls_norm *
            (static_cast<double>(sigmoid(z)) - static_cast<double>(target)));
    }

    // IoU box term on the decoded (unclipped) box
    const T tx = r.at(0, as.gy, as.gx), ty = r.at(1, as.gy, as.gx);
    const T tw = r.at(2, as.gy, as.gx), th = r.at(3, as.gy, as.gx);
    const DecodedBox<T> d = decode_box(tx, ty, tw, th, as.gx, as.gy, stride);

    const double ax1 = d.x1, ay1 = d.y1, ax2 = d.x2, ay2 = d.y2;
    const double bx1 = gt.box.x1, by1 = gt.box.y1, bx2 = gt.box.x2, by2 = gt.box.y2;
    const double ix1 = std::max(ax1, bx1), iy1 = std::max(ay1, by1);
    const double ix2 = std::min(ax2, bx2), iy2 = std::min(ay2, by2);
    const double iw = ix2 - ix1, ih = iy2 - iy1;
    const double inter = (iw > 0 && ih > 0) ? iw * ih : 0.0;
    const double area_a = (ax2 - ax1) * (ay2 - ay1);
    const double area_b = (bx2 - bx1) * (by2 - by1);
    const double uni = area_a + area_b - inter;
    const double iou_v = uni > 0 ? inter / uni : 0.0;
    box_sum += 1.0 - iou_v;

    if (draw && inter > 0.0) {
      // d(iou)/d(corner): iou = I/U, U = A + B - I
      const double inv_u = 1.0 / uni;
      const double common = iou_v * inv_u;  // I / U^2
      const double ha = ay2 - ay1, wa = ax2 - ax1;
      auto corner_grad = [&](double dI, double dA) {
        return dI * inv_u - common * (dA - dI);
      };
      const double g_x1 = corner_grad(ax1 > bx1 ? -ih : 0.0, -ha);
      const double g_x2 = corner_grad(ax2 < bx2 ? ih : 0.0, ha);
      const double g_y1 = corner_grad(ay1 > by1 ? -iw : 0.0, -wa);
      const double g_y2 = corner_grad(ay2 < by2 ? iw : 0.0, wa);

      // chain to raw params; loss is (1 - iou) so flip sign
      const double scale = cfg.box_weight * box_norm;
      const double dsig_tx = static_cast<double>(d.sig_tx) * (1.0 - static_cast<double>(d.sig_tx));
      const double dsig_ty = static_cast<double>(d.sig_ty) * (1.0 - static_cast<double>(d.sig_ty));
      const double dcx = g_x1 + g_x2;  // both corners move with the center
      const double dcy = g_y1 + g_y2;
      const double dw = 0.5 * (g_x2 - g_x1);
      const double dh = 0.5 * (g_y2 - g_y1);
      (*draw)[k].at(0, as.gy, as.gx) +=
          static_cast<T>(-scale * dcx * stride * dsig_tx);
      (*draw)[k].at(1, as.gy, as.gx) +=
          static_cast<T>(-scale * dcy * stride * dsig_ty);
      const bool tw_clamped = static_cast<double>(tw) > kMaxLogSize;
      const bool th_clamped = static_cast<double>(th) > kMaxLogSize;
      if (!tw_clamped)
        (*draw)[k].at(2, as.gy, as.gx) += static_cast<T>(-scale * dw * static_cast<double>(d.w));
      if (!th_clamped)
        (*draw)[k].at(3, as.gy, as.gx) += static_cast<T>(-scale * dh * static_cast<double>(d.h));
    }
  }

  LossComponents out;
  out.box = box_sum * box_norm;
  out.obj = obj_loss;
  out.cls = cls_sum * cls_norm;
  out.total = cfg.box_weight * out.box + cfg.obj_weight * out.obj + cfg.cls_weight * out.cls;
  out.positives = n_pos;
  return out;
}

// Per-class greedy suppression over confidence-sorted candidates; ties
// keep input order. No two surviving same-class boxes overlap above the
// threshold.
inline std::vector<Detection> greedy_nms(const std::vector<Detection>& cand,
                                         double iou_threshold) {
  std::vector<int> order(cand.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = static_cast<int>(i);
  std::stable_sort(order.begin(), order.end(), [&cand](int a, int b) {
    return cand[static_cast<std::size_t>(a)].confidence >
           cand[static_cast<std::size_t>(b)].confidence;
  });

  std::vector<Detection> kept;
  for (int idx : order) {
    const Detection& d = cand[static_cast<std::size_t>(idx)];
    bool suppressed = false;
    for (const Detection& k2 : kept) {
      if (k2.class_id != d.class_id) continue;
      if (iou(k2.box, d.box) > iou_threshold) {
        suppressed = true;
        break;
      }
    }
    if (!suppressed) kept.push_back(d);
  }
  return kept;
}

// Decode raw predictions and run per-class greedy NMS. Output is sorted by
// descending confidence; boxes are clipped to the image.
template <typename T>
std::vector<Detection> decode_and_nms(const std::vector<Tensor<T>>& raw,
                                      const DetectorConfig& cfg, double conf_threshold,
                                      double iou_threshold) {
  if (!(conf_threshold > 0.0 && conf_threshold < 1.0) ||
      !(iou_threshold > 0.0 && iou_threshold < 1.0))
    throw std::invalid_argument("decode_and_nms: thresholds must lie in (0,1)");

  std::vector<Detection> cand;
  for (int k = 0; k < 3; ++k) {
    const auto& r = raw[static_cast<std::size_t>(k)];
    const int grid = cfg.grid_size(k);
    const int stride = kStrides[static_cast<std::size_t>(k)];
    for (int gy = 0; gy < grid; ++gy)
      for (int gx = 0; gx < grid; ++gx) {
        const double obj = sigmoid(static_cast<double>(r.at(4, gy, gx)));
        int best = 0;
        double best_logit = static_cast<double>(r.at(5, gy, gx));
        for (int j = 1; j < cfg.class_count; ++j) {
          const double z = static_cast<double>(r.at(5 + j, gy, gx));
          if (z > best_logit) {
            best_logit = z;
            best = j;
          }
        }
        const double conf = obj * sigmoid(best_logit);
        if (conf <= conf_threshold) continue;
        const auto d = decode_box(r.at(0, gy, gx), r.at(1, gy, gx), r.at(2, gy, gx),
                                  r.at(3, gy, gx), gx, gy, stride);
        Box b{static_cast<double>(d.x1), static_cast<double>(d.y1),
              static_cast<double>(d.x2), static_cast<double>(d.y2)};
        b = b.clipped(cfg.input_size, cfg.input_size);
        if (!b.valid()) continue;
        cand.push_back({b, best, conf});
      }
  }
  return greedy_nms(cand, iou_threshold);
}

}  // namespace diffdet::det
