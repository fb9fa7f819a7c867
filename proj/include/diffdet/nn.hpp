#pragma once

// Minimal CPU layer library with hand-written backward passes. Templated
// on the scalar so training runs in float while gradient checks
// instantiate the exact same code in double. Layers cache what their
// backward needs; the usage pattern is strictly
// forward(x) -> ... -> backward(dy), one pair at a time, with gradients
// accumulated (+=) across a batch and cleared via zero_grads().

#include <Eigen/Core>
#include <cmath>
#include <functional>
#include <map>
#include <stdexcept>
#include <string>
#include <vector>

#include "diffdet/rng.hpp"
#include "diffdet/tensor.hpp"

namespace diffdet::nn {

template <typename T>
using MatrixRM = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename T>
using MapM = Eigen::Map<MatrixRM<T>>;
template <typename T>
using CMapM = Eigen::Map<const MatrixRM<T>>;

// Visits (name, weights, grads) of every parameter in registration order.
template <typename T>
using ParamVisitor =
    std::function<void(const std::string&, Tensor<T>&, Tensor<T>&)>;

template <typename T>
inline void he_normal_init(Tensor<T>& w, int fan_in, Rng& rng) {
  const double std = std::sqrt(2.0 / static_cast<double>(fan_in));
  for (std::int64_t i = 0; i < w.numel(); ++i)
    w[i] = static_cast<T>(rng.normal() * std);
}

// ---------------------------------------------------------------------------
// im2col / col2im

template <typename T>
void im2col(const Tensor<T>& x, int k, int stride, int pad, Tensor<T>& cols,
            int& out_h, int& out_w) {
  const int c_in = x.channels(), h = x.height(), w = x.width();
  out_h = (h + 2 * pad - k) / stride + 1;
  out_w = (w + 2 * pad - k) / stride + 1;
  if (out_h <= 0 || out_w <= 0)
    throw std::invalid_argument("im2col: kernel larger than padded input");
  cols = Tensor<T>({c_in * k * k, out_h * out_w});
  T* dst = cols.data();
  for (int c = 0; c < c_in; ++c)
    for (int ky = 0; ky < k; ++ky)
      for (int kx = 0; kx < k; ++kx) {
        for (int oy = 0; oy < out_h; ++oy) {
          const int iy = oy * stride + ky - pad;
          for (int ox = 0; ox < out_w; ++ox) {
            const int ix = ox * stride + kx - pad;
            *dst++ = (iy >= 0 && iy < h && ix >= 0 && ix < w) ? x.at(c, iy, ix) : T(0);
          }
        }
      }
}

template <typename T>
void col2im(const Tensor<T>& cols, int c_in, int h, int w, int k, int stride,
            int pad, Tensor<T>& dx) {
  const int out_h = (h + 2 * pad - k) / stride + 1;
  const int out_w = (w + 2 * pad - k) / stride + 1;
  dx = Tensor<T>({c_in, h, w});
  const T* src = cols.data();
  for (int c = 0; c < c_in; ++c)
    for (int ky = 0; ky < k; ++ky)
      for (int kx = 0; kx < k; ++kx)
        for (int oy = 0; oy < out_h; ++oy) {
          const int iy = oy * stride + ky - pad;
          for (int ox = 0; ox < out_w; ++ox, ++src) {
            const int ix = ox * stride + kx - pad;
            if (iy >= 0 && iy < h && ix >= 0 && ix < w) dx.at(c, iy, ix) += *src;
          }
        }
}

// ---------------------------------------------------------------------------
// Layers

template <typename T>
class Conv2d {
 public:
  Conv2d() = default;
  Conv2d(std::string name, int in_c, int out_c, int k, int stride = 1, int pad = -1)
      : name_(std::move(name)),
        in_c_(in_c),
        out_c_(out_c),
        k_(k),
        stride_(stride),
        pad_(pad < 0 ? k / 2 : pad),
        w_({out_c, in_c * k * k}),
        b_({out_c}),
        gw_({out_c, in_c * k * k}),
        gb_({out_c}) {}

  void init(Rng& rng) { he_normal_init(w_, in_c_ * k_ * k_, rng); b_.fill(T(0)); }
  void init_zero() { w_.fill(T(0)); b_.fill(T(0)); }

  Tensor<T> forward(const Tensor<T>& x) {
    if (x.channels() != in_c_)
      throw std::invalid_argument(name_ + ": expected " + std::to_string(in_c_) +
                                  " input channels, got " + std::to_string(x.channels()));
    in_h_ = x.height();
    in_w_ = x.width();
    int oh = 0, ow = 0;
    im2col(x, k_, stride_, pad_, cols_, oh, ow);
    Tensor<T> y({out_c_, oh, ow});
    CMapM<T> wm(w_.data(), out_c_, in_c_ * k_ * k_);
    CMapM<T> cm(cols_.data(), in_c_ * k_ * k_, oh * ow);
    MapM<T> ym(y.data(), out_c_, oh * ow);
    ym.noalias() = wm * cm;
    for (int c = 0; c < out_c_; ++c) ym.row(c).array() += b_[c];
    return y;
  }

  Tensor<T> backward(const Tensor<T>& dy) {
    const int oh = dy.height(), ow = dy.width();
    CMapM<T> dym(dy.data(), out_c_, oh * ow);
    CMapM<T> cm(cols_.data(), in_c_ * k_ * k_, oh * ow);
    MapM<T> gwm(gw_.data(), out_c_, in_c_ * k_ * k_);
    gwm.noalias() += dym * cm.transpose();
    for (int c = 0; c < out_c_; ++c) gb_[c] += dym.row(c).sum();
    Tensor<T> dcols({in_c_ * k_ * k_, oh * ow});
    MapM<T> dcm(dcols.data(), in_c_ * k_ * k_, oh * ow);
    CMapM<T> wm(w_.data(), out_c_, in_c_ * k_ * k_);
    dcm.noalias() = wm.transpose() * dym;
    Tensor<T> dx;
    col2im(dcols, in_c_, in_h_, in_w_, k_, stride_, pad_, dx);
    return dx;
  }

  void visit_params(const ParamVisitor<T>& v) {
    v(name_ + ".w", w_, gw_);
    v(name_ + ".b", b_, gb_);
  }

  std::vector<int> output_shape(int h, int w) const {
    return {out_c_, (h + 2 * pad_ - k_) / stride_ + 1, (w + 2 * pad_ - k_) / stride_ + 1};
  }

  Tensor<T>& weight() { return w_; }
  Tensor<T>& bias() { return b_; }
  int out_channels() const { return out_c_; }

 private:
  std::string name_;
  int in_c_ = 0, out_c_ = 0, k_ = 0, stride_ = 1, pad_ = 0;
  int in_h_ = 0, in_w_ = 0;
  Tensor<T> w_, b_, gw_, gb_;
  Tensor<T> cols_;
};

template <typename T>
class Linear {
 public:
  Linear() = default;
  Linear(std::string name, int in, int out)
      : name_(std::move(name)), in_(in), out_(out), w_({out, in}), b_({out}),
        gw_({out, in}), gb_({out}) {}

  void init(Rng& rng) { he_normal_init(w_, in_, rng); b_.fill(T(0)); }

  Tensor<T> forward(const Tensor<T>& x) {
    x_ = x;
    Tensor<T> y({out_});
    CMapM<T> wm(w_.data(), out_, in_);
    Eigen::Map<const Eigen::Vector<T, Eigen::Dynamic>> xv(x.data(), in_);
    Eigen::Map<Eigen::Vector<T, Eigen::Dynamic>> yv(y.data(), out_);
    yv.noalias() = wm * xv;
    for (int i = 0; i < out_; ++i) y[i] += b_[i];
    return y;
  }

  Tensor<T> backward(const Tensor<T>& dy) {
    CMapM<T> wm(w_.data(), out_, in_);
    MapM<T> gwm(gw_.data(), out_, in_);
    Eigen::Map<const Eigen::Vector<T, Eigen::Dynamic>> dyv(dy.data(), out_);
    Eigen::Map<const Eigen::Vector<T, Eigen::Dynamic>> xv(x_.data(), in_);
    gwm.noalias() += dyv * xv.transpose();
    for (int i = 0; i < out_; ++i) gb_[i] += dy[i];
    Tensor<T> dx({in_});
    Eigen::Map<Eigen::Vector<T, Eigen::Dynamic>> dxv(dx.data(), in_);
    dxv.noalias() = wm.transpose() * dyv;
    return dx;
  }

  void visit_params(const ParamVisitor<T>& v) {
    v(name_ + ".w", w_, gw_);
    v(name_ + ".b", b_, gb_);
  }

 private:
  std::string name_;
  int in_ = 0, out_ = 0;
  Tensor<T> w_, b_, gw_, gb_, x_;
};

template <typename T>
class GroupNorm {
 public:
  GroupNorm() = default;
  GroupNorm(std::string name, int channels, int groups, T eps = T(1e-5))
      : name_(std::move(name)), c_(channels), g_(groups), eps_(eps),
        gamma_({channels}), beta_({channels}), ggamma_({channels}), gbeta_({channels}) {
    if (channels % groups != 0)
      throw std::invalid_argument(name_ + ": channels must divide into groups");
    gamma_.fill(T(1));
  }

  Tensor<T> forward(const Tensor<T>& x) {
    const int h = x.height(), w = x.width();
    const int cg = c_ / g_;
    const std::int64_t m = static_cast<std::int64_t>(cg) * h * w;
    xhat_ = Tensor<T>(x.shape());
    istd_.assign(static_cast<std::size_t>(g_), T(0));
    Tensor<T> y(x.shape());
    for (int g = 0; g < g_; ++g) {
      const T* xs = x.data() + static_cast<std::int64_t>(g) * m;
      T mean = T(0);
      for (std::int64_t i = 0; i < m; ++i) mean += xs[i];
      mean /= static_cast<T>(m);
      T var = T(0);
      for (std::int64_t i = 0; i < m; ++i) {
        const T d = xs[i] - mean;
        var += d * d;
      }
      var /= static_cast<T>(m);
      const T istd = T(1) / std::sqrt(var + eps_);
      istd_[static_cast<std::size_t>(g)] = istd;
      T* xh = xhat_.data() + static_cast<std::int64_t>(g) * m;
      T* ys = y.data() + static_cast<std::int64_t>(g) * m;
      for (int cc = 0; cc < cg; ++cc) {
        const int c = g * cg + cc;
        const T ga = gamma_[c], be = beta_[c];
        for (std::int64_t i = static_cast<std::int64_t>(cc) * h * w;
             i < static_cast<std::int64_t>(cc + 1) * h * w; ++i) {
          xh[i] = (xs[i] - mean) * istd;
          ys[i] = ga * xh[i] + be;
        }
      }
    }
    return y;
  }

  Tensor<T> backward(const Tensor<T>& dy) {
    const int h = xhat_.height(), w = xhat_.width();
    const int cg = c_ / g_;
    const std::int64_t m = static_cast<std::int64_t>(cg) * h * w;
    Tensor<T> dx(xhat_.shape());
    for (int c = 0; c < c_; ++c) {
      const std::int64_t base = static_cast<std::int64_t>(c) * h * w;
      T dg = T(0), db = T(0);
      for (std::int64_t i = 0; i < static_cast<std::int64_t>(h) * w; ++i) {
        dg += dy[base + i] * xhat_[base + i];
        db += dy[base + i];
      }
      ggamma_[c] += dg;
      gbeta_[c] += db;
    }
    for (int g = 0; g < g_; ++g) {
      const std::int64_t off = static_cast<std::int64_t>(g) * m;
      T sum_dxhat = T(0), sum_dxhat_xhat = T(0);
      for (int cc = 0; cc < cg; ++cc) {
        const int c = g * cg + cc;
        const T ga = gamma_[c];
        for (std::int64_t i = static_cast<std::int64_t>(cc) * h * w;
             i < static_cast<std::int64_t>(cc + 1) * h * w; ++i) {
          const T dxh = dy[off + i] * ga;
          sum_dxhat += dxh;
          sum_dxhat_xhat += dxh * xhat_[off + i];
        }
      }
      const T istd = istd_[static_cast<std::size_t>(g)];
      const T inv_m = T(1) / static_cast<T>(m);
      for (int cc = 0; cc < cg; ++cc) {
        const int c = g * cg + cc;
        const T ga = gamma_[c];
        for (std::int64_t i = static_cast<std::int64_t>(cc) * h * w;
             i < static_cast<std::int64_t>(cc + 1) * h * w; ++i) {
          const T dxh = dy[off + i] * ga;
          dx[off + i] =
              istd * (dxh - inv_m * sum_dxhat - xhat_[off + i] * inv_m * sum_dxhat_xhat);
        }
      }
    }
    return dx;
  }

  void visit_params(const ParamVisitor<T>& v) {
    v(name_ + ".gamma", gamma_, ggamma_);
    v(name_ + ".beta", beta_, gbeta_);
  }

 private:
  std::string name_;
  int c_ = 0, g_ = 1;
  T eps_ = T(1e-5);
  Tensor<T> gamma_, beta_, ggamma_, gbeta_;
  Tensor<T> xhat_;
  std::vector<T> istd_;
};

template <typename T>
class SiLU {
 public:
  Tensor<T> forward(const Tensor<T>& x) {
    x_ = x;
    Tensor<T> y(x.shape());
    for (std::int64_t i = 0; i < x.numel(); ++i) {
      const T s = T(1) / (T(1) + std::exp(-x[i]));
      y[i] = x[i] * s;
    }
    return y;
  }
  Tensor<T> backward(const Tensor<T>& dy) {
    Tensor<T> dx(x_.shape());
    for (std::int64_t i = 0; i < x_.numel(); ++i) {
      const T s = T(1) / (T(1) + std::exp(-x_[i]));
      dx[i] = dy[i] * (s * (T(1) + x_[i] * (T(1) - s)));
    }
    return dx;
  }

 private:
  Tensor<T> x_;
};

template <typename T>
class LeakyReLU {
 public:
  explicit LeakyReLU(T slope = T(0.1)) : slope_(slope) {}
  Tensor<T> forward(const Tensor<T>& x) {
    x_ = x;
    Tensor<T> y(x.shape());
    for (std::int64_t i = 0; i < x.numel(); ++i) y[i] = x[i] > T(0) ? x[i] : slope_ * x[i];
    return y;
  }
  Tensor<T> backward(const Tensor<T>& dy) {
    Tensor<T> dx(x_.shape());
    for (std::int64_t i = 0; i < x_.numel(); ++i)
      dx[i] = x_[i] > T(0) ? dy[i] : slope_ * dy[i];
    return dx;
  }

 private:
  T slope_;
  Tensor<T> x_;
};

template <typename T>
Tensor<T> upsample_nearest2x(const Tensor<T>& x) {
  Tensor<T> y({x.channels(), x.height() * 2, x.width() * 2});
  for (int c = 0; c < x.channels(); ++c)
    for (int iy = 0; iy < x.height(); ++iy)
      for (int ix = 0; ix < x.width(); ++ix) {
        const T v = x.at(c, iy, ix);
        y.at(c, 2 * iy, 2 * ix) = v;
        y.at(c, 2 * iy, 2 * ix + 1) = v;
        y.at(c, 2 * iy + 1, 2 * ix) = v;
        y.at(c, 2 * iy + 1, 2 * ix + 1) = v;
      }
  return y;
}

template <typename T>
Tensor<T> upsample_nearest2x_backward(const Tensor<T>& dy) {
  Tensor<T> dx({dy.channels(), dy.height() / 2, dy.width() / 2});
  for (int c = 0; c < dx.channels(); ++c)
    for (int iy = 0; iy < dx.height(); ++iy)
      for (int ix = 0; ix < dx.width(); ++ix)
        dx.at(c, iy, ix) = dy.at(c, 2 * iy, 2 * ix) + dy.at(c, 2 * iy, 2 * ix + 1) +
                           dy.at(c, 2 * iy + 1, 2 * ix) + dy.at(c, 2 * iy + 1, 2 * ix + 1);
  return dx;
}

// Bilinear resize with half-pixel sample centers, edge-clamped. Forward
// only: fused features are inputs to the trainable path, nothing upstream
// of the resize needs gradients.
template <typename T>
Tensor<T> bilinear_resize(const Tensor<T>& x, int out_h, int out_w) {
  if (out_h <= 0 || out_w <= 0)
    throw std::invalid_argument("bilinear_resize: output dims must be positive");
  Tensor<T> y({x.channels(), out_h, out_w});
  const double sy = static_cast<double>(x.height()) / out_h;
  const double sx = static_cast<double>(x.width()) / out_w;
  for (int oy = 0; oy < out_h; ++oy) {
    double fy = (oy + 0.5) * sy - 0.5;
    fy = std::min(std::max(fy, 0.0), static_cast<double>(x.height() - 1));
    const int y0 = static_cast<int>(fy);
    const int y1 = std::min(y0 + 1, x.height() - 1);
    const T wy = static_cast<T>(fy - y0);
    for (int ox = 0; ox < out_w; ++ox) {
      double fx = (ox + 0.5) * sx - 0.5;
      fx = std::min(std::max(fx, 0.0), static_cast<double>(x.width() - 1));
      const int x0 = static_cast<int>(fx);
      const int x1 = std::min(x0 + 1, x.width() - 1);
      const T wx = static_cast<T>(fx - x0);
      for (int c = 0; c < x.channels(); ++c) {
        const T top = x.at(c, y0, x0) * (T(1) - wx) + x.at(c, y0, x1) * wx;
        const T bot = x.at(c, y1, x0) * (T(1) - wx) + x.at(c, y1, x1) * wx;
        y.at(c, oy, ox) = top * (T(1) - wy) + bot * wy;
      }
    }
  }
  return y;
}

// ---------------------------------------------------------------------------
// Optimizer

template <typename T>
class Adam {
 public:
  explicit Adam(T lr, T beta1 = T(0.9), T beta2 = T(0.999), T eps = T(1e-8))
      : lr_(lr), beta1_(beta1), beta2_(beta2), eps_(eps) {}

  // `params` is a stable list of (weight, grad) pairs; order defines state.
  void step(std::vector<std::pair<Tensor<T>*, Tensor<T>*>>& params) {
    if (m_.empty()) {
      for (auto& [w, g] : params) {
        m_.emplace_back(w->shape());
        v_.emplace_back(w->shape());
      }
    }
    ++t_;
    const T bc1 = T(1) - std::pow(beta1_, static_cast<T>(t_));
    const T bc2 = T(1) - std::pow(beta2_, static_cast<T>(t_));
    for (std::size_t p = 0; p < params.size(); ++p) {
      Tensor<T>& w = *params[p].first;
      Tensor<T>& g = *params[p].second;
      Tensor<T>& m = m_[p];
      Tensor<T>& v = v_[p];
      for (std::int64_t i = 0; i < w.numel(); ++i) {
        m[i] = beta1_ * m[i] + (T(1) - beta1_) * g[i];
        v[i] = beta2_ * v[i] + (T(1) - beta2_) * g[i] * g[i];
        const T mhat = m[i] / bc1;
        const T vhat = v[i] / bc2;
        w[i] -= lr_ * mhat / (std::sqrt(vhat) + eps_);
      }
    }
  }

  void set_lr(T lr) { lr_ = lr; }
  T lr() const { return lr_; }

 private:
  T lr_, beta1_, beta2_, eps_;
  long t_ = 0;
  std::vector<Tensor<T>> m_, v_;
};

}  // namespace diffdet::nn
