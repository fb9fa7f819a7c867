#pragma once

// Box types shared by the data, detector and eval modules. Coordinates are
// pixel corners (x1,y1,x2,y2) with x1<x2 and y1<y2. IoU is computed in
// double so the metrics pipeline agrees with its brute-force oracle to 1e-9.

#include <algorithm>
#include <stdexcept>
#include <string>
#include <vector>

namespace diffdet {

struct Box {
  double x1 = 0, y1 = 0, x2 = 0, y2 = 0;

  double area() const { return std::max(0.0, x2 - x1) * std::max(0.0, y2 - y1); }
  bool valid() const { return x1 < x2 && y1 < y2; }

  Box clipped(double w, double h) const {
    return {std::clamp(x1, 0.0, w), std::clamp(y1, 0.0, h), std::clamp(x2, 0.0, w),
            std::clamp(y2, 0.0, h)};
  }
};

struct GroundTruthBox {
  Box box;
  int class_id = 0;
};

struct Detection {
  Box box;
  int class_id = 0;
  double confidence = 0.0;
};

inline double iou(const Box& a, const Box& b) {
  const double ix1 = std::max(a.x1, b.x1);
  const double iy1 = std::max(a.y1, b.y1);
  const double ix2 = std::min(a.x2, b.x2);
  const double iy2 = std::min(a.y2, b.y2);
  const double iw = ix2 - ix1, ih = iy2 - iy1;
  if (iw <= 0.0 || ih <= 0.0) return 0.0;
  const double inter = iw * ih;
  const double uni = a.area() + b.area() - inter;
  return uni > 0.0 ? inter / uni : 0.0;
}

}  // namespace diffdet
