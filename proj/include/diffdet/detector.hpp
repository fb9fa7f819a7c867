#pragma once

// Compact one-stage detector: residual conv backbone producing strides
// {8,16,32}, a top-down neck, and per-scale anchor-free heads predicting
// (tx,ty,tw,th,obj,cls...) per cell. Diffusion features enter through a
// zero-initialized 1x1 adapter at the tail of one neck branch (stride 8 by
// default): branch' = branch + adapter(concat(branch, fused)). Zero adapter
// weights make the injected forward bit-identical to the baseline one,
// which is the keystone equivalence test for this module.

#include <array>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include "diffdet/boxes.hpp"
#include "diffdet/nn.hpp"
#include "diffdet/rng.hpp"
#include "diffdet/tensor.hpp"

namespace diffdet::det {

inline constexpr std::array<int, 3> kStrides = {8, 16, 32};

struct InjectionConfig {
  bool enabled = false;
  int scale = 8;           // which neck branch receives the features
  int fused_channels = 32; // C_f of the incoming fused map
};

struct DetectorConfig {
  int in_channels = 1;
  int input_size = 64;  // square input, must divide by 32
  int stem_channels = 16;
  // channels after each 2x downsample; strides 2,4,8,16,32
  std::vector<int> stage_channels = {32, 48, 64, 64, 64};
  int neck_channels = 48;
  int head_channels = 48;
  int class_count = 6;
  int norm_groups = 8;
  // box max-side thresholds routing ground truth to strides 8/16/32
  double assign_small_max = 16.0;
  double assign_medium_max = 32.0;
  // loss weights
  double box_weight = 5.0;
  double obj_weight = 1.0;
  double cls_weight = 1.0;
  double obj_pos_weight = 2.0;
  InjectionConfig injection;

  void validate() const {
    if (input_size % 32 != 0)
      throw std::invalid_argument("detector: input_size must divide by 32");
    if (stage_channels.size() != 5)
      throw std::invalid_argument("detector: exactly five backbone stages expected");
    if (class_count < 1) throw std::invalid_argument("detector: class_count must be >= 1");
    if (injection.enabled) {
      bool ok = false;
      for (int s : kStrides) ok = ok || s == injection.scale;
      if (!ok)
        throw std::invalid_argument("detector: injection scale must be one of {8,16,32}");
      if (injection.fused_channels < 1)
        throw std::invalid_argument("detector: fused_channels must be >= 1");
    }
  }

  int grid_size(int scale_idx) const { return input_size / kStrides[static_cast<std::size_t>(scale_idx)]; }
  int pred_channels() const { return 5 + class_count; }
  int injection_scale_idx() const {
    for (std::size_t i = 0; i < kStrides.size(); ++i)
      if (kStrides[i] == injection.scale) return static_cast<int>(i);
    throw std::invalid_argument("detector: bad injection scale");
  }
};

// conv3x3 + groupnorm + leaky relu
template <typename T>
class ConvBlock {
 public:
  ConvBlock() = default;
  ConvBlock(const std::string& name, int in_c, int out_c, int stride, int groups)
      : conv_(name + ".conv", in_c, out_c, 3, stride), gn_(name + ".gn", out_c, groups) {}

  void init(Rng& rng) { conv_.init(rng); }
  Tensor<T> forward(const Tensor<T>& x) { return act_.forward(gn_.forward(conv_.forward(x))); }
  Tensor<T> backward(const Tensor<T>& dy) {
    return conv_.backward(gn_.backward(act_.backward(dy)));
  }
  void visit_params(const nn::ParamVisitor<T>& v) {
    conv_.visit_params(v);
    gn_.visit_params(v);
  }

 private:
  nn::Conv2d<T> conv_;
  nn::GroupNorm<T> gn_;
  nn::LeakyReLU<T> act_;
};

// two 3x3 convs with a residual add
template <typename T>
class ResidualBlock {
 public:
  ResidualBlock() = default;
  ResidualBlock(const std::string& name, int ch, int groups)
      : b1_(name + ".b1", ch, ch, 1, groups),
        conv2_(name + ".conv2", ch, ch, 3),
        gn2_(name + ".gn2", ch, groups) {}

  void init(Rng& rng) {
    b1_.init(rng);
    conv2_.init(rng);
  }

  Tensor<T> forward(const Tensor<T>& x) {
    Tensor<T> h = gn2_.forward(conv2_.forward(b1_.forward(x)));
    h.add_(x);
    return act2_.forward(h);
  }

  Tensor<T> backward(const Tensor<T>& dy) {
    Tensor<T> dh = act2_.backward(dy);
    Tensor<T> dx = b1_.backward(conv2_.backward(gn2_.backward(dh)));
    dx.add_(dh);
    return dx;
  }

  void visit_params(const nn::ParamVisitor<T>& v) {
    b1_.visit_params(v);
    conv2_.visit_params(v);
    gn2_.visit_params(v);
  }

 private:
  ConvBlock<T> b1_;
  nn::Conv2d<T> conv2_;
  nn::GroupNorm<T> gn2_;
  nn::LeakyReLU<T> act2_;
};

template <typename T>
class Detector {
 public:
  explicit Detector(DetectorConfig cfg) : cfg_(std::move(cfg)) {
    cfg_.validate();
    stem_ = ConvBlock<T>("backbone.stem", cfg_.in_channels, cfg_.stem_channels, 1,
                         cfg_.norm_groups);
    int prev = cfg_.stem_channels;
    for (int i = 0; i < 5; ++i) {
      const int ch = cfg_.stage_channels[static_cast<std::size_t>(i)];
      down_.emplace_back("backbone.down" + std::to_string(i), prev, ch, 2, cfg_.norm_groups);
      stage_.emplace_back("backbone.stage" + std::to_string(i), ch, cfg_.norm_groups);
      prev = ch;
    }
    for (int i = 0; i < 3; ++i) {
      const int src = cfg_.stage_channels[static_cast<std::size_t>(i + 2)];
      lateral_.emplace_back("neck.lat" + std::to_string(i), src, cfg_.neck_channels, 1);
      smooth_.emplace_back(ConvBlock<T>("neck.smooth" + std::to_string(i), cfg_.neck_channels,
                                        cfg_.neck_channels, 1, cfg_.norm_groups));
      head_conv_.emplace_back(ConvBlock<T>("head" + std::to_string(i) + ".conv",
                                           cfg_.neck_channels, cfg_.head_channels, 1,
                                           cfg_.norm_groups));
      head_out_.emplace_back("head" + std::to_string(i) + ".out", cfg_.head_channels,
                             cfg_.pred_channels(), 1, 1, 0);
    }
    if (cfg_.injection.enabled) {
      adapter_ = nn::Conv2d<T>("adapter.proj", cfg_.neck_channels + cfg_.injection.fused_channels,
                               cfg_.neck_channels, 1, 1, 0);
      adapter_.init_zero();
    }
  }

  void init(Rng& rng) {
    stem_.init(rng);
    for (auto& d : down_) d.init(rng);
    for (auto& s : stage_) s.init(rng);
    for (auto& l : lateral_) l.init(rng);
    for (auto& s : smooth_) s.init(rng);
    for (auto& h : head_conv_) h.init(rng);
    for (auto& h : head_out_) h.init(rng);
    if (cfg_.injection.enabled) adapter_.init_zero();  // stays zero at init
  }

  const DetectorConfig& config() const { return cfg_; }

  // Raw per-scale predictions, shape (5+K, S, S) each, strides {8,16,32}.
  std::vector<Tensor<T>> forward(const Tensor<T>& x, const Tensor<T>* fused = nullptr) {
    if (x.height() != cfg_.input_size || x.width() != cfg_.input_size)
      throw std::invalid_argument("detector: input must be " +
                                  std::to_string(cfg_.input_size) + " square");
    if (cfg_.injection.enabled) {
      if (fused == nullptr)
        throw std::invalid_argument("detector: injection enabled but no fused features given");
      const int s = cfg_.injection.scale;
      const std::vector<int> want = {cfg_.injection.fused_channels, cfg_.input_size / s,
                                     cfg_.input_size / s};
      if (fused->shape() != want)
        throw std::invalid_argument("detector: fused shape " +
                                    Tensor<T>::shape_str(fused->shape()) + " != expected " +
                                    Tensor<T>::shape_str(want));
    }

    Tensor<T> h = stem_.forward(x);
    std::array<Tensor<T>, 3> c;  // stride 8,16,32 backbone outputs
    for (int i = 0; i < 5; ++i) {
      h = down_[static_cast<std::size_t>(i)].forward(h);
      h = stage_[static_cast<std::size_t>(i)].forward(h);
      if (i >= 2) c[static_cast<std::size_t>(i - 2)] = h;
    }

    std::array<Tensor<T>, 3> t;
    t[2] = lateral_[2].forward(c[2]);
    t[1] = lateral_[1].forward(c[1]);
    t[1].add_(nn::upsample_nearest2x(t[2]));
    t[0] = lateral_[0].forward(c[0]);
    t[0].add_(nn::upsample_nearest2x(t[1]));

    std::array<Tensor<T>, 3> p;
    for (int i = 0; i < 3; ++i) p[static_cast<std::size_t>(i)] = smooth_[static_cast<std::size_t>(i)].forward(t[static_cast<std::size_t>(i)]);

    if (cfg_.injection.enabled) {
      const auto k = static_cast<std::size_t>(cfg_.injection_scale_idx());
      Tensor<T> corr = adapter_.forward(concat_channels(p[k], *fused));
      p[k].add_(corr);
    }

    std::vector<Tensor<T>> out(3);
    for (int i = 0; i < 3; ++i) {
      const auto ii = static_cast<std::size_t>(i);
      out[ii] = head_out_[ii].forward(head_conv_[ii].forward(p[ii]));
    }
    return out;
  }

  // Backward from per-scale prediction grads. Returns the gradient w.r.t.
  // the fused features when injection is enabled (empty tensor otherwise).
  Tensor<T> backward(const std::vector<Tensor<T>>& draw) {
    std::array<Tensor<T>, 3> dp;
    for (int i = 0; i < 3; ++i) {
      const auto ii = static_cast<std::size_t>(i);
      dp[ii] = head_conv_[ii].backward(head_out_[ii].backward(draw[ii]));
    }

    Tensor<T> dfused;
    if (cfg_.injection.enabled) {
      const auto k = static_cast<std::size_t>(cfg_.injection_scale_idx());
      Tensor<T> dcat = adapter_.backward(dp[k]);
      Tensor<T> da({cfg_.neck_channels, dp[k].height(), dp[k].width()});
      dfused = Tensor<T>({cfg_.injection.fused_channels, dp[k].height(), dp[k].width()});
      split_channels(dcat, da, dfused);
      dp[k].add_(da);  // residual + concat branch both feed the smooth output
    }

    std::array<Tensor<T>, 3> dt;
    for (int i = 0; i < 3; ++i) dt[static_cast<std::size_t>(i)] = smooth_[static_cast<std::size_t>(i)].backward(dp[static_cast<std::size_t>(i)]);

    std::array<Tensor<T>, 3> dc;
    dc[0] = lateral_[0].backward(dt[0]);
    dt[1].add_(nn::upsample_nearest2x_backward(dt[0]));
    dc[1] = lateral_[1].backward(dt[1]);
    dt[2].add_(nn::upsample_nearest2x_backward(dt[1]));
    dc[2] = lateral_[2].backward(dt[2]);

    Tensor<T> dh;
    for (int i = 4; i >= 0; --i) {
      if (i == 4)
        dh = dc[2];
      else if (i == 3 || i == 2)
        dh.add_(dc[static_cast<std::size_t>(i - 2)]);
      dh = stage_[static_cast<std::size_t>(i)].backward(dh);
      dh = down_[static_cast<std::size_t>(i)].backward(dh);
    }
    stem_.backward(dh);
    return dfused;
  }

  void visit_params(const nn::ParamVisitor<T>& v) {
    stem_.visit_params(v);
    for (int i = 0; i < 5; ++i) {
      down_[static_cast<std::size_t>(i)].visit_params(v);
      stage_[static_cast<std::size_t>(i)].visit_params(v);
    }
    for (int i = 0; i < 3; ++i) {
      lateral_[static_cast<std::size_t>(i)].visit_params(v);
      smooth_[static_cast<std::size_t>(i)].visit_params(v);
    }
    for (int i = 0; i < 3; ++i) {
      head_conv_[static_cast<std::size_t>(i)].visit_params(v);
      head_out_[static_cast<std::size_t>(i)].visit_params(v);
    }
    if (cfg_.injection.enabled) adapter_.visit_params(v);
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
  DetectorConfig cfg_;
  ConvBlock<T> stem_;
  std::vector<ConvBlock<T>> down_;
  std::vector<ResidualBlock<T>> stage_;
  std::vector<nn::Conv2d<T>> lateral_;
  std::vector<ConvBlock<T>> smooth_;
  std::vector<ConvBlock<T>> head_conv_;
  std::vector<nn::Conv2d<T>> head_out_;
  nn::Conv2d<T> adapter_;
};

using DetectorF = Detector<float>;

}  // namespace diffdet::det
