#pragma once

// Diffusion forward process and the epsilon-prediction U-Net whose decoder
// activations feed the feature-fusion stage. Only the forward (noising)
// process exists here; nothing in this project ever samples images.

#include <cmath>
#include <map>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include "diffdet/image.hpp"
#include "diffdet/nn.hpp"
#include "diffdet/rng.hpp"
#include "diffdet/tensor.hpp"

namespace diffdet::ddpm {

// ---------------------------------------------------------------------------
// Noise schedule

struct NoiseSchedule {
  int steps = 0;                   // T
  std::vector<double> betas;       // beta_t, index 0 == t=1
  std::vector<double> alphas;      // 1 - beta_t
  std::vector<double> alpha_bars;  // running product of alphas

  double beta(int t) const { return betas.at(static_cast<std::size_t>(t - 1)); }
  double alpha(int t) const { return alphas.at(static_cast<std::size_t>(t - 1)); }
  double alpha_bar(int t) const { return alpha_bars.at(static_cast<std::size_t>(t - 1)); }

  void require_valid_t(int t) const {
    if (t < 1 || t > steps)
      throw std::out_of_range("timestep " + std::to_string(t) + " outside [1," +
                              std::to_string(steps) + "]");
  }
};

// Linear beta interpolation from beta_start to beta_end inclusive.
inline NoiseSchedule make_schedule(int steps, double beta_start, double beta_end) {
  if (steps < 1) throw std::invalid_argument("make_schedule: T must be >= 1");
  if (!(beta_start > 0.0 && beta_start < 1.0 && beta_end > 0.0 && beta_end < 1.0))
    throw std::invalid_argument("make_schedule: beta bounds must lie in (0,1)");
  if (beta_start > beta_end)
    throw std::invalid_argument("make_schedule: beta_start must not exceed beta_end");
  NoiseSchedule s;
  s.steps = steps;
  s.betas.resize(static_cast<std::size_t>(steps));
  s.alphas.resize(static_cast<std::size_t>(steps));
  s.alpha_bars.resize(static_cast<std::size_t>(steps));
  double running = 1.0;
  for (int i = 0; i < steps; ++i) {
    const double b =
        steps == 1 ? beta_start
                   : beta_start + (beta_end - beta_start) * static_cast<double>(i) /
                                      static_cast<double>(steps - 1);
    s.betas[static_cast<std::size_t>(i)] = b;
    s.alphas[static_cast<std::size_t>(i)] = 1.0 - b;
    running *= 1.0 - b;
    s.alpha_bars[static_cast<std::size_t>(i)] = running;
  }
  return s;
}

// ---------------------------------------------------------------------------
// Forward-process transitions. The *_with_* variants take raw coefficients
// so tests can exercise the beta=0/1 and alpha_bar=0/1 limits that a valid
// schedule never contains.

template <typename T>
Tensor<T> q_step_with_beta(const Tensor<T>& x_prev, double beta, const Tensor<T>& eps) {
  if (!x_prev.same_shape(eps))
    throw std::invalid_argument("q_step: eps shape does not match x_prev");
  const T a = static_cast<T>(std::sqrt(1.0 - beta));
  const T b = static_cast<T>(std::sqrt(beta));
  Tensor<T> out(x_prev.shape());
  for (std::int64_t i = 0; i < out.numel(); ++i) out[i] = a * x_prev[i] + b * eps[i];
  return out;
}

template <typename T>
Tensor<T> q_step(const Tensor<T>& x_prev, int t, const Tensor<T>& eps,
                 const NoiseSchedule& s) {
  s.require_valid_t(t);
  return q_step_with_beta(x_prev, s.beta(t), eps);
}

template <typename T>
Tensor<T> q_sample_with_alpha_bar(const Tensor<T>& x0, double alpha_bar,
                                  const Tensor<T>& eps) {
  if (!x0.same_shape(eps))
    throw std::invalid_argument("q_sample: eps shape does not match x0");
  const T a = static_cast<T>(std::sqrt(alpha_bar));
  const T b = static_cast<T>(std::sqrt(1.0 - alpha_bar));
  Tensor<T> out(x0.shape());
  for (std::int64_t i = 0; i < out.numel(); ++i) out[i] = a * x0[i] + b * eps[i];
  return out;
}

template <typename T>
Tensor<T> q_sample(const Tensor<T>& x0, int t, const Tensor<T>& eps,
                   const NoiseSchedule& s) {
  s.require_valid_t(t);
  return q_sample_with_alpha_bar(x0, s.alpha_bar(t), eps);
}

template <typename T>
Tensor<T> standard_normal_like(const std::vector<int>& shape, Rng& rng) {
  Tensor<T> t(shape);
  for (std::int64_t i = 0; i < t.numel(); ++i) t[i] = static_cast<T>(rng.normal());
  return t;
}

// ---------------------------------------------------------------------------
// U-Net

struct UNetConfig {
  int in_channels = 1;
  int base_channels = 32;
  std::vector<int> channel_multipliers = {1, 2, 4};  // one entry per resolution level
  int time_embed_dim = 64;
  std::vector<int> tap_levels = {1, 2};
  int norm_groups = 8;

  int levels() const { return static_cast<int>(channel_multipliers.size()); }
  int level_channels(int level) const {
    return base_channels * channel_multipliers.at(static_cast<std::size_t>(level));
  }

  void validate() const {
    if (levels() < 2) throw std::invalid_argument("unet: at least 2 levels required");
    if (base_channels < 1 || in_channels < 1 || time_embed_dim < 2)
      throw std::invalid_argument("unet: bad channel/time configuration");
    for (int l : tap_levels)
      if (l < 0 || l >= levels())
        throw std::invalid_argument("unet: tap level " + std::to_string(l) +
                                    " outside [0," + std::to_string(levels() - 1) + "]");
    for (int l = 0; l < levels(); ++l) {
      const int ch = level_channels(l);
      if (ch % norm_groups != 0)
        throw std::invalid_argument("unet: channels at level " + std::to_string(l) +
                                    " not divisible by norm_groups");
    }
  }

  // Deterministic tap shape for a given input size.
  std::vector<int> tap_shape(int level, int h, int w) const {
    return {level_channels(level), h >> level, w >> level};
  }

  void require_input_size(int h, int w) const {
    const int div = 1 << (levels() - 1);
    if (h % div != 0 || w % div != 0)
      throw std::invalid_argument("unet: input dims must be divisible by " +
                                  std::to_string(div));
  }
};

// Sinusoidal timestep embedding, the usual sin/cos frequency ladder.
template <typename T>
Tensor<T> timestep_embedding(int t, int dim) {
  Tensor<T> e({dim});
  const int half = dim / 2;
  for (int i = 0; i < half; ++i) {
    const double freq = std::exp(-std::log(10000.0) * static_cast<double>(i) /
                                 static_cast<double>(half));
    e[2 * i] = static_cast<T>(std::sin(t * freq));
    e[2 * i + 1] = static_cast<T>(std::cos(t * freq));
  }
  if (dim % 2 == 1) e[dim - 1] = T(0);
  return e;
}

// conv -> norm (+ time bias) -> silu -> conv -> norm, residual, silu.
template <typename T>
class ResBlock {
 public:
  ResBlock() = default;
  ResBlock(const std::string& name, int in_c, int out_c, int temb_dim, int groups)
      : conv1_(name + ".conv1", in_c, out_c, 3),
        gn1_(name + ".gn1", out_c, groups),
        temb_proj_(name + ".temb", temb_dim, out_c),
        conv2_(name + ".conv2", out_c, out_c, 3),
        gn2_(name + ".gn2", out_c, groups),
        has_skip_proj_(in_c != out_c) {
    if (has_skip_proj_) skip_ = nn::Conv2d<T>(name + ".skip", in_c, out_c, 1);
  }

  void init(Rng& rng) {
    conv1_.init(rng);
    temb_proj_.init(rng);
    conv2_.init(rng);
    if (has_skip_proj_) skip_.init(rng);
  }

  Tensor<T> forward(const Tensor<T>& x, const Tensor<T>& temb) {
    Tensor<T> h = gn1_.forward(conv1_.forward(x));
    tbias_ = temb_proj_.forward(temb);
    for (int c = 0; c < h.channels(); ++c) {
      const T b = tbias_[c];
      for (int i = 0; i < h.height() * h.width(); ++i)
        h[static_cast<std::int64_t>(c) * h.height() * h.width() + i] += b;
    }
    h = act1_.forward(h);
    h = gn2_.forward(conv2_.forward(h));
    Tensor<T> res = has_skip_proj_ ? skip_.forward(x) : x;
    h.add_(res);
    return act2_.forward(h);
  }

  // Returns dx; accumulates parameter grads and the time-embedding grad.
  Tensor<T> backward(const Tensor<T>& dy, Tensor<T>& dtemb_accum) {
    Tensor<T> dh = act2_.backward(dy);
    Tensor<T> dres = dh;  // residual branch
    Tensor<T> dmain = conv2_.backward(gn2_.backward(dh));
    dmain = act1_.backward(dmain);
    // time bias: per-channel sum
    Tensor<T> dtb({tbias_.dim(0)});
    for (int c = 0; c < dmain.channels(); ++c) {
      T s = T(0);
      const std::int64_t base =
          static_cast<std::int64_t>(c) * dmain.height() * dmain.width();
      for (int i = 0; i < dmain.height() * dmain.width(); ++i) s += dmain[base + i];
      dtb[c] = s;
    }
    dtemb_accum.add_(temb_proj_.backward(dtb));
    Tensor<T> dx = conv1_.backward(gn1_.backward(dmain));
    if (has_skip_proj_)
      dx.add_(skip_.backward(dres));
    else
      dx.add_(dres);
    return dx;
  }

  void visit_params(const nn::ParamVisitor<T>& v) {
    conv1_.visit_params(v);
    gn1_.visit_params(v);
    temb_proj_.visit_params(v);
    conv2_.visit_params(v);
    gn2_.visit_params(v);
    if (has_skip_proj_) skip_.visit_params(v);
  }

 private:
  nn::Conv2d<T> conv1_;
  nn::GroupNorm<T> gn1_;
  nn::Linear<T> temb_proj_;
  nn::Conv2d<T> conv2_;
  nn::GroupNorm<T> gn2_;
  nn::SiLU<T> act1_, act2_;
  nn::Conv2d<T> skip_;
  bool has_skip_proj_ = false;
  Tensor<T> tbias_;
};

template <typename T>
struct UNetOutput {
  Tensor<T> eps_pred;
  std::map<int, Tensor<T>> taps;  // resolution level -> activation
};

template <typename T>
class UNet {
 public:
  explicit UNet(UNetConfig cfg) : cfg_(std::move(cfg)) {
    cfg_.validate();
    const int L = cfg_.levels();
    stem_ = nn::Conv2d<T>("stem", cfg_.in_channels, cfg_.level_channels(0), 3);
    time_lin1_ = nn::Linear<T>("time.lin1", cfg_.time_embed_dim, cfg_.time_embed_dim);
    time_lin2_ = nn::Linear<T>("time.lin2", cfg_.time_embed_dim, cfg_.time_embed_dim);
    for (int l = 0; l < L; ++l) {
      enc_.emplace_back("enc" + std::to_string(l), cfg_.level_channels(l),
                        cfg_.level_channels(l), cfg_.time_embed_dim, cfg_.norm_groups);
      if (l + 1 < L)
        down_.emplace_back("down" + std::to_string(l), cfg_.level_channels(l),
                           cfg_.level_channels(l + 1), 3, 2);
    }
    mid_ = ResBlock<T>("mid", cfg_.level_channels(L - 1), cfg_.level_channels(L - 1),
                       cfg_.time_embed_dim, cfg_.norm_groups);
    for (int l = L - 2; l >= 0; --l) {
      up_conv_.emplace_back("up" + std::to_string(l), cfg_.level_channels(l + 1),
                            cfg_.level_channels(l), 3);
      dec_.emplace_back("dec" + std::to_string(l), 2 * cfg_.level_channels(l),
                        cfg_.level_channels(l), cfg_.time_embed_dim, cfg_.norm_groups);
    }
    out_gn_ = nn::GroupNorm<T>("out.gn", cfg_.level_channels(0), cfg_.norm_groups);
    out_conv_ = nn::Conv2d<T>("out.conv", cfg_.level_channels(0), cfg_.in_channels, 3);
  }

  void init(Rng& rng) {
    stem_.init(rng);
    time_lin1_.init(rng);
    time_lin2_.init(rng);
    for (auto& b : enc_) b.init(rng);
    for (auto& c : down_) c.init(rng);
    mid_.init(rng);
    for (auto& c : up_conv_) c.init(rng);
    for (auto& b : dec_) b.init(rng);
    out_conv_.init_zero();  // eps_pred == 0 at initialization
  }

  const UNetConfig& config() const { return cfg_; }

  UNetOutput<T> forward(const Tensor<T>& x, int t) {
    cfg_.require_input_size(x.height(), x.width());
    if (x.channels() != cfg_.in_channels)
      throw std::invalid_argument("unet: wrong input channel count");
    const int L = cfg_.levels();

    Tensor<T> temb = time_act_.forward(
        time_lin1_.forward(timestep_embedding<T>(t, cfg_.time_embed_dim)));
    temb = time_lin2_.forward(temb);

    Tensor<T> h = stem_.forward(x);
    skips_.clear();
    for (int l = 0; l < L; ++l) {
      h = enc_[static_cast<std::size_t>(l)].forward(h, temb);
      if (l + 1 < L) {
        skips_.push_back(h);
        h = down_[static_cast<std::size_t>(l)].forward(h);
      }
    }
    h = mid_.forward(h, temb);

    UNetOutput<T> out;
    auto maybe_tap = [&](int level, const Tensor<T>& act) {
      for (int tl : cfg_.tap_levels)
        if (tl == level) out.taps.emplace(level, act);
    };
    maybe_tap(L - 1, h);

    for (int i = 0; i < L - 1; ++i) {
      const int level = L - 2 - i;
      h = nn::upsample_nearest2x(h);
      h = up_conv_[static_cast<std::size_t>(i)].forward(h);
      h = concat_channels(h, skips_[static_cast<std::size_t>(level)]);
      h = dec_[static_cast<std::size_t>(i)].forward(h, temb);
      maybe_tap(level, h);
    }

    Tensor<T> act = out_act_.forward(out_gn_.forward(h));
    out.eps_pred = out_conv_.forward(act);
    return out;
  }

  // Backward from d(eps_pred). Parameter grads accumulate; input grad is
  // discarded (images are never trained).
  void backward(const Tensor<T>& deps) {
    const int L = cfg_.levels();
    Tensor<T> dtemb({cfg_.time_embed_dim});

    Tensor<T> dh = out_act_.backward(out_conv_.backward(deps));
    dh = out_gn_.backward(dh);

    std::vector<Tensor<T>> dskips(static_cast<std::size_t>(L - 1));
    for (int i = L - 2; i >= 0; --i) {
      const int level = L - 2 - i;
      dh = dec_[static_cast<std::size_t>(i)].backward(dh, dtemb);
      Tensor<T> da({cfg_.level_channels(level), dh.height(), dh.width()});
      Tensor<T> db({cfg_.level_channels(level), dh.height(), dh.width()});
      split_channels(dh, da, db);
      dskips[static_cast<std::size_t>(level)] = std::move(db);
      dh = up_conv_[static_cast<std::size_t>(i)].backward(da);
      dh = nn::upsample_nearest2x_backward(dh);
    }

    dh = mid_.backward(dh, dtemb);
    for (int l = L - 1; l >= 0; --l) {
      if (l + 1 < L) {
        dh = down_[static_cast<std::size_t>(l)].backward(dh);
        dh.add_(dskips[static_cast<std::size_t>(l)]);
      }
      dh = enc_[static_cast<std::size_t>(l)].backward(dh, dtemb);
    }
    stem_.backward(dh);

    Tensor<T> dt = time_lin2_.backward(dtemb);
    time_lin1_.backward(time_act_.backward(dt));
  }

  void visit_params(const nn::ParamVisitor<T>& v) {
    stem_.visit_params(v);
    time_lin1_.visit_params(v);
    time_lin2_.visit_params(v);
    for (auto& b : enc_) b.visit_params(v);
    for (auto& c : down_) c.visit_params(v);
    mid_.visit_params(v);
    for (auto& c : up_conv_) c.visit_params(v);
    for (auto& b : dec_) b.visit_params(v);
    out_gn_.visit_params(v);
    out_conv_.visit_params(v);
  }

  std::vector<std::pair<Tensor<T>*, Tensor<T>*>> param_list() {
    std::vector<std::pair<Tensor<T>*, Tensor<T>*>> out;
    visit_params([&out](const std::string&, Tensor<T>& w, Tensor<T>& g) {
      out.emplace_back(&w, &g);
    });
    return out;
  }

  void zero_grads() {
    visit_params([](const std::string&, Tensor<T>&, Tensor<T>& g) { g.fill(T(0)); });
  }

  std::int64_t param_count() {
    std::int64_t n = 0;
    visit_params([&n](const std::string&, Tensor<T>& w, Tensor<T>&) { n += w.numel(); });
    return n;
  }

 private:
  UNetConfig cfg_;
  nn::Conv2d<T> stem_;
  nn::Linear<T> time_lin1_, time_lin2_;
  nn::SiLU<T> time_act_;
  std::vector<ResBlock<T>> enc_;
  std::vector<nn::Conv2d<T>> down_;
  ResBlock<T> mid_;
  std::vector<nn::Conv2d<T>> up_conv_;
  std::vector<ResBlock<T>> dec_;
  nn::GroupNorm<T> out_gn_;
  nn::SiLU<T> out_act_;
  nn::Conv2d<T> out_conv_;

  std::vector<Tensor<T>> skips_;
};

using UNetF = UNet<float>;

}  // namespace diffdet::ddpm
