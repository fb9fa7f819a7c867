#pragma once

// Dataset ingestion and the seeded synthetic PCB-defect generator. Both
// sources produce the same shape of data: grayscale [0,1] images plus
// ground-truth boxes in the six-class PCB taxonomy
// (open, short, mouse bite, spur, copper, pin-hole).

#include <array>
#include <optional>
#include <string>
#include <vector>

#include "diffdet/boxes.hpp"
#include "diffdet/image.hpp"

namespace diffdet::data {

inline constexpr int kClassCount = 6;

inline const char* class_name(int id) {
  static const char* names[kClassCount] = {"open", "short", "mouse bite",
                                           "spur", "copper", "pin-hole"};
  return (id >= 0 && id < kClassCount) ? names[id] : "?";
}

struct AnnotatedImage {
  Image image;
  std::vector<GroundTruthBox> boxes;
  std::string id;
};

struct DatasetSplit {
  std::vector<std::string> train, val, test;
  std::uint64_t seed = 0;
};

// DeepPCB-style tree: image files (.pgm) with a sibling .txt annotation,
// one box per line as "x1 y1 x2 y2 class" with 1-indexed classes.
// Missing annotations skip the image with a warning; malformed or
// invariant-violating lines are hard errors naming file and line.
std::vector<AnnotatedImage> load_deeppcb(const std::string& root,
                                         std::vector<std::string>* warnings = nullptr);

// Writes images as PGM plus annotations in the same text grammar the
// loader reads, so synthetic exports and real data are interchangeable.
void export_dataset(const std::vector<AnnotatedImage>& images, const std::string& dir);

struct SyntheticConfig {
  int image_size = 64;
  int min_defects = 2;
  int max_defects = 4;
  std::vector<double> class_mix;  // per-class weights; empty = uniform
};

std::vector<AnnotatedImage> generate_synthetic(int n, const SyntheticConfig& cfg,
                                               std::uint64_t seed);

// Deterministic shuffle-then-cut. Sizes are floored, remainder goes to
// train. Ratios must sum to 1.
DatasetSplit split_ids(const std::vector<std::string>& ids,
                       const std::array<double, 3>& ratios, std::uint64_t seed);

// Convenience: select by id list, preserving split order.
std::vector<AnnotatedImage> select_by_ids(const std::vector<AnnotatedImage>& all,
                                          const std::vector<std::string>& ids);

}  // namespace diffdet::data
