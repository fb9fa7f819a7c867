#pragma once

// Dense row-major tensor of float or double. Rank is dynamic but almost
// everything in this codebase is (C,H,W) for feature maps or flat vectors
// for parameters. Single-threaded on purpose: every reduction has a fixed
// order, so repeated runs are bit-identical.

#include <algorithm>
#include <cassert>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <numeric>
#include <stdexcept>
#include <string>
#include <vector>

namespace diffdet {

template <typename T>
class Tensor {
 public:
  Tensor() = default;

  explicit Tensor(std::vector<int> shape) : shape_(std::move(shape)) {
    data_.assign(numel_of(shape_), T(0));
  }

  Tensor(std::vector<int> shape, std::vector<T> data)
      : shape_(std::move(shape)), data_(std::move(data)) {
    if (static_cast<std::size_t>(numel_of(shape_)) != data_.size())
      throw std::invalid_argument("Tensor: shape/data size mismatch");
  }

  static Tensor zeros(std::vector<int> shape) { return Tensor(std::move(shape)); }

  static Tensor full(std::vector<int> shape, T value) {
    Tensor t(std::move(shape));
    std::fill(t.data_.begin(), t.data_.end(), value);
    return t;
  }

  const std::vector<int>& shape() const { return shape_; }
  int dim(int i) const { return shape_.at(static_cast<std::size_t>(i)); }
  int rank() const { return static_cast<int>(shape_.size()); }
  std::int64_t numel() const { return static_cast<std::int64_t>(data_.size()); }
  bool empty() const { return data_.empty(); }

  T* data() { return data_.data(); }
  const T* data() const { return data_.data(); }
  std::vector<T>& vec() { return data_; }
  const std::vector<T>& vec() const { return data_; }

  T& operator[](std::int64_t i) { return data_[static_cast<std::size_t>(i)]; }
  const T& operator[](std::int64_t i) const { return data_[static_cast<std::size_t>(i)]; }

  // (C,H,W) accessors
  int channels() const { return dim(rank() - 3); }
  int height() const { return dim(rank() - 2); }
  int width() const { return dim(rank() - 1); }

  T& at(int c, int y, int x) {
    return data_[(static_cast<std::size_t>(c) * height() + y) * width() + x];
  }
  const T& at(int c, int y, int x) const {
    return data_[(static_cast<std::size_t>(c) * height() + y) * width() + x];
  }

  bool same_shape(const Tensor& o) const { return shape_ == o.shape_; }

  void fill(T v) { std::fill(data_.begin(), data_.end(), v); }

  void add_(const Tensor& o) {
    require_same_shape(o, "add_");
    for (std::size_t i = 0; i < data_.size(); ++i) data_[i] += o.data_[i];
  }
  void sub_(const Tensor& o) {
    require_same_shape(o, "sub_");
    for (std::size_t i = 0; i < data_.size(); ++i) data_[i] -= o.data_[i];
  }
  void scale_(T s) {
    for (auto& v : data_) v *= s;
  }
  void axpy_(T a, const Tensor& o) {
    require_same_shape(o, "axpy_");
    for (std::size_t i = 0; i < data_.size(); ++i) data_[i] += a * o.data_[i];
  }

  bool all_finite() const {
    for (const auto& v : data_)
      if (!std::isfinite(v)) return false;
    return true;
  }

  bool bitwise_equal(const Tensor& o) const {
    if (shape_ != o.shape_) return false;
    return std::memcmp(data_.data(), o.data_.data(), data_.size() * sizeof(T)) == 0;
  }

  template <typename U>
  Tensor<U> cast() const {
    std::vector<U> out(data_.size());
    for (std::size_t i = 0; i < data_.size(); ++i) out[i] = static_cast<U>(data_[i]);
    return Tensor<U>(shape_, std::move(out));
  }

  static std::int64_t numel_of(const std::vector<int>& shape) {
    std::int64_t n = 1;
    for (int d : shape) {
      if (d <= 0) throw std::invalid_argument("Tensor: dims must be positive");
      n *= d;
    }
    return shape.empty() ? 0 : n;
  }

  static std::string shape_str(const std::vector<int>& s) {
    std::string r = "(";
    for (std::size_t i = 0; i < s.size(); ++i) {
      if (i) r += ",";
      r += std::to_string(s[i]);
    }
    return r + ")";
  }

 private:
  void require_same_shape(const Tensor& o, const char* op) const {
    if (shape_ != o.shape_)
      throw std::invalid_argument(std::string(op) + ": shape mismatch " +
                                  shape_str(shape_) + " vs " + shape_str(o.shape_));
  }

  std::vector<int> shape_;
  std::vector<T> data_;
};

using TensorF = Tensor<float>;
using TensorD = Tensor<double>;

// Channel-wise concatenation of (C,H,W) maps.
template <typename T>
Tensor<T> concat_channels(const Tensor<T>& a, const Tensor<T>& b) {
  if (a.height() != b.height() || a.width() != b.width())
    throw std::invalid_argument("concat_channels: spatial mismatch");
  Tensor<T> out({a.channels() + b.channels(), a.height(), a.width()});
  std::copy(a.data(), a.data() + a.numel(), out.data());
  std::copy(b.data(), b.data() + b.numel(), out.data() + a.numel());
  return out;
}

template <typename T>
void split_channels(const Tensor<T>& cat, Tensor<T>& a, Tensor<T>& b) {
  std::copy(cat.data(), cat.data() + a.numel(), a.data());
  std::copy(cat.data() + a.numel(), cat.data() + cat.numel(), b.data());
}

}  // namespace diffdet
