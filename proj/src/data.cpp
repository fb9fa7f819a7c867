#include "diffdet/data.hpp"

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <map>
#include <sstream>
#include <stdexcept>

#include "diffdet/rng.hpp"

namespace fs = std::filesystem;

namespace diffdet::data {

namespace {

struct ParsedLine {
  int x1, y1, x2, y2, cls;
};

ParsedLine parse_annotation_line(const std::string& line, const std::string& file,
                                 int line_no) {
  std::istringstream ss(line);
  ParsedLine p{};
  std::string extra;
  if (!(ss >> p.x1 >> p.y1 >> p.x2 >> p.y2 >> p.cls) || (ss >> extra)) {
    throw std::runtime_error(file + ":" + std::to_string(line_no) +
                             ": expected 'x1 y1 x2 y2 class', got: " + line);
  }
  return p;
}

}  // namespace

std::vector<AnnotatedImage> load_deeppcb(const std::string& root,
                                         std::vector<std::string>* warnings) {
  if (!fs::exists(root)) throw std::runtime_error("load_deeppcb: no such directory: " + root);

  std::vector<fs::path> image_paths;
  for (const auto& entry : fs::recursive_directory_iterator(root)) {
    if (entry.is_regular_file() && entry.path().extension() == ".pgm")
      image_paths.push_back(entry.path());
  }
  std::sort(image_paths.begin(), image_paths.end());

  std::vector<AnnotatedImage> out;
  for (const auto& img_path : image_paths) {
    fs::path ann_path = img_path;
    ann_path.replace_extension(".txt");
    if (!fs::exists(ann_path)) {
      if (warnings)
        warnings->push_back("missing annotation for " + img_path.string() + ", skipped");
      continue;
    }

    AnnotatedImage item;
    item.image = read_pgm(img_path.string());
    item.id = fs::relative(img_path, root).replace_extension("").generic_string();

    std::ifstream ann(ann_path);
    std::string line;
    int line_no = 0;
    const double w = item.image.width(), h = item.image.height();
    while (std::getline(ann, line)) {
      ++line_no;
      // tolerate blank lines and trailing whitespace
      if (line.find_first_not_of(" \t\r\n") == std::string::npos) continue;
      const ParsedLine p = parse_annotation_line(line, ann_path.string(), line_no);
      if (p.x1 >= p.x2 || p.y1 >= p.y2)
        throw std::runtime_error(ann_path.string() + ":" + std::to_string(line_no) +
                                 ": inverted or empty box");
      if (p.cls < 1 || p.cls > kClassCount)
        throw std::runtime_error(ann_path.string() + ":" + std::to_string(line_no) +
                                 ": class must lie in [1," + std::to_string(kClassCount) +
                                 "], got " + std::to_string(p.cls));
      Box b{static_cast<double>(p.x1), static_cast<double>(p.y1),
            static_cast<double>(p.x2), static_cast<double>(p.y2)};
      b = b.clipped(w, h);
      if (!b.valid())
        throw std::runtime_error(ann_path.string() + ":" + std::to_string(line_no) +
                                 ": box lies entirely outside the image");
      item.boxes.push_back({b, p.cls - 1});  // 1-indexed on disk
    }
    out.push_back(std::move(item));
  }
  return out;
}

void export_dataset(const std::vector<AnnotatedImage>& images, const std::string& dir) {
  fs::create_directories(dir);
  for (const auto& item : images) {
    const fs::path img_path = fs::path(dir) / (item.id + ".pgm");
    fs::create_directories(img_path.parent_path());
    write_pgm(img_path.string(), item.image);
    std::ofstream ann(fs::path(dir) / (item.id + ".txt"));
    for (const auto& gt : item.boxes) {
      ann << static_cast<int>(std::lround(gt.box.x1)) << " "
          << static_cast<int>(std::lround(gt.box.y1)) << " "
          << static_cast<int>(std::lround(gt.box.x2)) << " "
          << static_cast<int>(std::lround(gt.box.y2)) << " " << gt.class_id + 1 << "\n";
    }
  }
}

// ---------------------------------------------------------------------------
// Synthetic generator

namespace {

struct TraceH {
  int y, width;
};
struct TraceV {
  int x, width;
};

struct Layout {
  std::vector<TraceH> horizontal;
  std::vector<TraceV> vertical;
  int pad_cx, pad_cy, pad_r;
  float trace_value, bg_value;
};

bool on_any_trace(const Layout& lay, int x, int y) {
  for (const auto& t : lay.horizontal)
    if (std::abs(y - t.y) * 2 <= t.width) return true;
  for (const auto& t : lay.vertical)
    if (std::abs(x - t.x) * 2 <= t.width) return true;
  const int dx = x - lay.pad_cx, dy = y - lay.pad_cy;
  if (dx * dx + dy * dy <= lay.pad_r * lay.pad_r) return true;
  return false;
}

void fill_disc(TensorF& img, double cx, double cy, double r, float value) {
  const int x0 = std::max(0, static_cast<int>(std::floor(cx - r)));
  const int x1 = std::min(img.width() - 1, static_cast<int>(std::ceil(cx + r)));
  const int y0 = std::max(0, static_cast<int>(std::floor(cy - r)));
  const int y1 = std::min(img.height() - 1, static_cast<int>(std::ceil(cy + r)));
  for (int y = y0; y <= y1; ++y)
    for (int x = x0; x <= x1; ++x) {
      const double dx = x - cx, dy = y - cy;
      if (dx * dx + dy * dy <= r * r) img.at(0, y, x) = value;
    }
}

void fill_rect(TensorF& img, int x0, int y0, int x1, int y1, float value) {
  x0 = std::max(0, x0);
  y0 = std::max(0, y0);
  x1 = std::min(img.width() - 1, x1);
  y1 = std::min(img.height() - 1, y1);
  for (int y = y0; y <= y1; ++y)
    for (int x = x0; x <= x1; ++x) img.at(0, y, x) = value;
}

// Integer pixel box: floor/ceil so the region is covered and the text
// annotation format round-trips exactly.
Box clamp_box(Box b, int size) {
  b.x1 = std::max(0.0, std::floor(b.x1));
  b.y1 = std::max(0.0, std::floor(b.y1));
  b.x2 = std::min(static_cast<double>(size), std::ceil(b.x2));
  b.y2 = std::min(static_cast<double>(size), std::ceil(b.y2));
  return b;
}

int pick_index(Rng& rng, std::size_t n) {
  return static_cast<int>(rng.uniform_int(static_cast<std::uint64_t>(n)));
}

AnnotatedImage render_one(int index, const SyntheticConfig& cfg, std::uint64_t seed) {
  const int S = cfg.image_size;
  Rng rng(derive_seed(seed, "synthetic.image", static_cast<std::uint64_t>(index)));

  AnnotatedImage item;
  item.id = "synthetic_" + std::to_string(index);
  item.image.range = ValueRange::Unit;
  item.image.data = TensorF({1, S, S});
  TensorF& img = item.image.data;

  Layout lay;
  lay.bg_value = static_cast<float>(0.20 + 0.06 * rng.uniform());
  lay.trace_value = static_cast<float>(0.74 + 0.08 * rng.uniform());

  // low-frequency background texture plus mild per-pixel grain
  const int G = 5;
  std::vector<double> grid(static_cast<std::size_t>(G) * G);
  for (auto& g : grid) g = rng.uniform(-0.03, 0.03);
  for (int y = 0; y < S; ++y)
    for (int x = 0; x < S; ++x) {
      const double fy = static_cast<double>(y) / (S - 1) * (G - 1);
      const double fx = static_cast<double>(x) / (S - 1) * (G - 1);
      const int iy = std::min(G - 2, static_cast<int>(fy));
      const int ix = std::min(G - 2, static_cast<int>(fx));
      const double wy = fy - iy, wx = fx - ix;
      const double v00 = grid[static_cast<std::size_t>(iy) * G + ix];
      const double v01 = grid[static_cast<std::size_t>(iy) * G + ix + 1];
      const double v10 = grid[static_cast<std::size_t>(iy + 1) * G + ix];
      const double v11 = grid[static_cast<std::size_t>(iy + 1) * G + ix + 1];
      const double tex = (v00 * (1 - wx) + v01 * wx) * (1 - wy) + (v10 * (1 - wx) + v11 * wx) * wy;
      img.at(0, y, x) =
          static_cast<float>(lay.bg_value + tex + rng.uniform(-0.012, 0.012));
    }

  // two parallel horizontal traces (guaranteed host for shorts), plus one
  // more horizontal and two vertical traces
  const int wt = rng.uniform_int(3, 4);
  const int y_a = rng.uniform_int(10, S / 2 - 8);
  const int y_b = y_a + rng.uniform_int(8, 11);
  lay.horizontal.push_back({y_a, wt});
  lay.horizontal.push_back({y_b, wt});
  lay.horizontal.push_back({rng.uniform_int(S / 2 + 8, S - 10), wt});
  lay.vertical.push_back({rng.uniform_int(6, S / 2 - 6), wt});
  lay.vertical.push_back({rng.uniform_int(S / 2 + 6, S - 7), wt});

  for (const auto& t : lay.horizontal)
    fill_rect(img, 0, t.y - t.width / 2, S - 1, t.y + (t.width - 1) / 2, lay.trace_value);
  for (const auto& t : lay.vertical)
    fill_rect(img, t.x - t.width / 2, 0, t.x + (t.width - 1) / 2, S - 1, lay.trace_value);

  // one pad: wide disc on a vertical trace, pin-hole host
  lay.pad_cx = lay.vertical[0].x;
  lay.pad_cy = rng.uniform_int(S / 2 + 6, S - 10);
  lay.pad_r = rng.uniform_int(4, 5);
  fill_disc(img, lay.pad_cx, lay.pad_cy, lay.pad_r, lay.trace_value);

  const int n_defects = rng.uniform_int(cfg.min_defects, cfg.max_defects);
  std::vector<std::pair<double, double>> placed;

  auto far_from_placed = [&placed](double cx, double cy) {
    for (const auto& [px, py] : placed) {
      const double dx = cx - px, dy = cy - py;
      if (dx * dx + dy * dy < 12.0 * 12.0) return false;
    }
    return true;
  };

  // keeps trace-surgery defects away from crossings, where an "open" would
  // not actually break the net
  auto clear_of_vertical = [&lay](double x, double margin) {
    for (const auto& t : lay.vertical)
      if (std::abs(x - t.x) < margin + t.width) return false;
    return true;
  };

  for (int d = 0; d < n_defects; ++d) {
    int cls;
    if (cfg.class_mix.empty()) {
      cls = rng.uniform_int(0, kClassCount - 1);
    } else {
      double total = 0;
      for (double w : cfg.class_mix) total += w;
      double u = rng.uniform() * total;
      cls = kClassCount - 1;
      for (int j = 0; j < kClassCount; ++j) {
        u -= cfg.class_mix[static_cast<std::size_t>(j)];
        if (u <= 0) {
          cls = j;
          break;
        }
      }
    }

    Box box;
    bool ok = false;
    for (int attempt = 0; attempt < 60 && !ok; ++attempt) {
      const bool last_chance = attempt == 59;
      switch (cls) {
        case 0: {  // open: gap cut across a horizontal trace
          const auto& t = lay.horizontal[static_cast<std::size_t>(pick_index(rng, lay.horizontal.size()))];
          const int gap = rng.uniform_int(4, 6);
          const int x0 = rng.uniform_int(4, S - 4 - gap);
          const double cx = x0 + gap / 2.0, cy = t.y;
          if ((!far_from_placed(cx, cy) || !clear_of_vertical(cx, gap / 2.0 + 2.0)) &&
              !last_chance)
            break;
          fill_rect(img, x0, t.y - t.width / 2 - 1, x0 + gap - 1, t.y + (t.width - 1) / 2 + 1,
                    lay.bg_value);
          box = {static_cast<double>(x0 - 1), t.y - t.width / 2.0 - 2.0,
                 static_cast<double>(x0 + gap + 1), t.y + t.width / 2.0 + 2.0};
          ok = true;
          break;
        }
        case 1: {  // short: bridge between the two parallel traces
          const auto& ta = lay.horizontal[0];
          const auto& tb = lay.horizontal[1];
          const int bw = rng.uniform_int(2, 3);
          const int x0 = rng.uniform_int(4, S - 6);
          const double cx = x0 + bw / 2.0, cy = 0.5 * (ta.y + tb.y);
          if (!far_from_placed(cx, cy) && !last_chance) break;
          fill_rect(img, x0, ta.y, x0 + bw - 1, tb.y, lay.trace_value);
          box = {static_cast<double>(x0 - 1), static_cast<double>(ta.y + ta.width / 2),
                 static_cast<double>(x0 + bw + 1), static_cast<double>(tb.y - tb.width / 2)};
          if (box.y2 - box.y1 < 3) box = {box.x1, ta.y - 1.0, box.x2, tb.y + 1.0};
          ok = true;
          break;
        }
        case 2: {  // mouse bite: notch eaten into a trace edge
          const auto& t = lay.horizontal[static_cast<std::size_t>(pick_index(rng, lay.horizontal.size()))];
          const double r = rng.uniform(2.0, 3.0);
          const int x = rng.uniform_int(6, S - 7);
          const bool top = rng.uniform() < 0.5;
          const double ey = top ? t.y - t.width / 2.0 : t.y + t.width / 2.0;
          if ((!far_from_placed(x, ey) || !clear_of_vertical(x, r + 2.0)) && !last_chance)
            break;
          fill_disc(img, x, ey, r, lay.bg_value);
          box = {x - r - 1, ey - r - 1, x + r + 1, ey + r + 1};
          ok = true;
          break;
        }
        case 3: {  // spur: bump sticking out of a trace edge
          const auto& t = lay.horizontal[static_cast<std::size_t>(pick_index(rng, lay.horizontal.size()))];
          const double r = rng.uniform(2.0, 3.0);
          const int x = rng.uniform_int(6, S - 7);
          const bool top = rng.uniform() < 0.5;
          const double ey = top ? t.y - t.width / 2.0 - r * 0.5 : t.y + t.width / 2.0 + r * 0.5;
          if ((!far_from_placed(x, ey) || !clear_of_vertical(x, r + 2.0)) && !last_chance)
            break;
          fill_disc(img, x, ey, r, lay.trace_value);
          box = {x - r - 1, ey - r - 1, x + r + 1, ey + r + 1};
          ok = true;
          break;
        }
        case 4: {  // copper: stray blob on bare background
          const double r = rng.uniform(2.0, 3.5);
          const int x = rng.uniform_int(6, S - 7);
          const int y = rng.uniform_int(6, S - 7);
          bool clear = true;
          const int m = static_cast<int>(r) + 2;
          for (int yy = y - m; yy <= y + m && clear; ++yy)
            for (int xx = x - m; xx <= x + m && clear; ++xx)
              if (on_any_trace(lay, xx, yy)) clear = false;
          if ((!clear || !far_from_placed(x, y)) && !last_chance) break;
          if (!clear && last_chance) break;  // never stack copper onto traces
          fill_disc(img, x, y, r, lay.trace_value);
          box = {x - r - 1, y - r - 1, x + r + 1, y + r + 1};
          ok = true;
          break;
        }
        case 5: {  // pin-hole: dark dot inside the pad
          const double r = rng.uniform(1.5, 2.2);
          const double ang = rng.uniform() * 2.0 * M_PI;
          const double rad = rng.uniform() * std::max(0.0, lay.pad_r - r - 1.0);
          const double x = lay.pad_cx + rad * std::cos(ang);
          const double y = lay.pad_cy + rad * std::sin(ang);
          if (!far_from_placed(x, y) && !last_chance) break;
          fill_disc(img, x, y, r, 0.08f);
          box = {x - r - 1, y - r - 1, x + r + 1, y + r + 1};
          ok = true;
          break;
        }
        default:
          throw std::logic_error("synthetic: bad class");
      }
    }
    if (!ok) continue;  // extremely rare; drops one defect, never a class bias loop

    box = clamp_box(box, S);
    placed.emplace_back(0.5 * (box.x1 + box.x2), 0.5 * (box.y1 + box.y2));
    item.boxes.push_back({box, cls});
  }

  quantize_unit8(img);
  return item;
}

}  // namespace

std::vector<AnnotatedImage> generate_synthetic(int n, const SyntheticConfig& cfg,
                                               std::uint64_t seed) {
  if (n < 1) throw std::invalid_argument("generate_synthetic: n must be >= 1");
  if (cfg.image_size < 32) throw std::invalid_argument("generate_synthetic: image_size too small");
  if (cfg.min_defects < 0 || cfg.max_defects < cfg.min_defects)
    throw std::invalid_argument("generate_synthetic: bad defect count range");
  std::vector<AnnotatedImage> out;
  out.reserve(static_cast<std::size_t>(n));
  for (int i = 0; i < n; ++i) out.push_back(render_one(i, cfg, seed));
  return out;
}

DatasetSplit split_ids(const std::vector<std::string>& ids,
                       const std::array<double, 3>& ratios, std::uint64_t seed) {
  if (ids.empty()) throw std::invalid_argument("split_ids: empty id list");
  const double sum = ratios[0] + ratios[1] + ratios[2];
  if (std::abs(sum - 1.0) > 1e-9)
    throw std::invalid_argument("split_ids: ratios must sum to 1");

  std::vector<std::string> shuffled = ids;
  Rng rng(derive_seed(seed, "dataset.split"));
  rng.shuffle(shuffled);

  const auto n = static_cast<std::int64_t>(shuffled.size());
  const auto n_val = static_cast<std::int64_t>(std::floor(ratios[1] * static_cast<double>(n)));
  const auto n_test = static_cast<std::int64_t>(std::floor(ratios[2] * static_cast<double>(n)));
  const std::int64_t n_train = n - n_val - n_test;  // floor remainder goes to train

  DatasetSplit s;
  s.seed = seed;
  s.train.assign(shuffled.begin(), shuffled.begin() + n_train);
  s.val.assign(shuffled.begin() + n_train, shuffled.begin() + n_train + n_val);
  s.test.assign(shuffled.begin() + n_train + n_val, shuffled.end());
  return s;
}

std::vector<AnnotatedImage> select_by_ids(const std::vector<AnnotatedImage>& all,
                                          const std::vector<std::string>& ids) {
  std::map<std::string, const AnnotatedImage*> by_id;
  for (const auto& a : all) by_id[a.id] = &a;
  std::vector<AnnotatedImage> out;
  out.reserve(ids.size());
  for (const auto& id : ids) {
    auto it = by_id.find(id);
    if (it == by_id.end()) throw std::runtime_error("select_by_ids: unknown id " + id);
    out.push_back(*it->second);
  }
  return out;
}

}  // namespace diffdet::data
