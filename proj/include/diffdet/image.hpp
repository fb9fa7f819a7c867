#pragma once

// ImageTensor: a (C,H,W) float map plus a declared value range. Dataset
// images live in [0,1]; the diffusion stack works in [-1,1]. Conversions
// are exact affine maps. File I/O is 8-bit binary PGM (P5) — dataset
// images are quantized to the 8-bit grid at creation so disk round trips
// are exact.

#include <fstream>
#include <sstream>
#include <stdexcept>
#include <string>

#include "diffdet/tensor.hpp"

namespace diffdet {

enum class ValueRange { Unit, Diffusion };

struct Image {
  TensorF data;                        // (C,H,W)
  ValueRange range = ValueRange::Unit;

  int channels() const { return data.channels(); }
  int height() const { return data.height(); }
  int width() const { return data.width(); }
};

inline Image to_diffusion_range(const Image& img) {
  if (img.range == ValueRange::Diffusion) return img;
  Image out{TensorF(img.data.shape()), ValueRange::Diffusion};
  for (std::int64_t i = 0; i < img.data.numel(); ++i)
    out.data[i] = 2.0f * img.data[i] - 1.0f;
  return out;
}

inline Image to_unit_range(const Image& img) {
  if (img.range == ValueRange::Unit) return img;
  Image out{TensorF(img.data.shape()), ValueRange::Unit};
  for (std::int64_t i = 0; i < img.data.numel(); ++i)
    out.data[i] = (img.data[i] + 1.0f) * 0.5f;
  return out;
}

// Quantize [0,1] values onto the 8-bit grid k/255.
inline void quantize_unit8(TensorF& t) {
  for (std::int64_t i = 0; i < t.numel(); ++i) {
    float v = std::min(1.0f, std::max(0.0f, t[i]));
    t[i] = static_cast<float>(std::lround(v * 255.0f)) / 255.0f;
  }
}

inline void write_pgm(const std::string& path, const Image& img) {
  if (img.range != ValueRange::Unit)
    throw std::invalid_argument("write_pgm: image must be in [0,1]");
  if (img.channels() != 1)
    throw std::invalid_argument("write_pgm: grayscale only");
  std::ofstream f(path, std::ios::binary);
  if (!f) throw std::runtime_error("write_pgm: cannot open " + path);
  f << "P5\n" << img.width() << " " << img.height() << "\n255\n";
  for (int y = 0; y < img.height(); ++y)
    for (int x = 0; x < img.width(); ++x) {
      float v = std::min(1.0f, std::max(0.0f, img.data.at(0, y, x)));
      unsigned char b = static_cast<unsigned char>(std::lround(v * 255.0f));
      f.put(static_cast<char>(b));
    }
  if (!f) throw std::runtime_error("write_pgm: write failed for " + path);
}

inline Image read_pgm(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw std::runtime_error("read_pgm: cannot open " + path);
  std::string magic;
  f >> magic;
  if (magic != "P5") throw std::runtime_error("read_pgm: not a binary PGM: " + path);
  auto next_int = [&f, &path]() {
    // Skip whitespace and '#' comment lines.
    int c = f.peek();
    while (c == '#' || std::isspace(c)) {
      if (c == '#') {
        std::string line;
        std::getline(f, line);
      } else {
        f.get();
      }
      c = f.peek();
    }
    int v;
    if (!(f >> v)) throw std::runtime_error("read_pgm: malformed header: " + path);
    return v;
  };
  const int w = next_int(), h = next_int(), maxval = next_int();
  if (w <= 0 || h <= 0 || maxval != 255)
    throw std::runtime_error("read_pgm: unsupported header in " + path);
  f.get();  // single whitespace after maxval
  Image img{TensorF({1, h, w}), ValueRange::Unit};
  std::vector<char> row(static_cast<std::size_t>(w));
  for (int y = 0; y < h; ++y) {
    f.read(row.data(), w);
    if (!f) throw std::runtime_error("read_pgm: truncated payload in " + path);
    for (int x = 0; x < w; ++x)
      img.data.at(0, y, x) =
          static_cast<float>(static_cast<unsigned char>(row[static_cast<std::size_t>(x)])) / 255.0f;
  }
  return img;
}

}  // namespace diffdet
