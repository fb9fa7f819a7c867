#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <algorithm>

#include "diffdet/nn.hpp"
#include "test_util.hpp"

using namespace diffdet;

namespace {

Tensor<double> random_tensor(std::vector<int> shape, Rng& rng, double scale = 1.0) {
  Tensor<double> t(std::move(shape));
  for (std::int64_t i = 0; i < t.numel(); ++i) t[i] = rng.normal() * scale;
  return t;
}

// weighted-sum readout so dL/dy is a fixed random tensor
struct Readout {
  Tensor<double> c;
  explicit Readout(const std::vector<int>& shape, Rng& rng) : c(random_tensor(shape, rng)) {}
  double loss(const Tensor<double>& y) const {
    double s = 0;
    for (std::int64_t i = 0; i < y.numel(); ++i) s += c[i] * y[i];
    return s;
  }
};

}  // namespace

TEST_CASE("conv2d output shape follows the formula") {
  nn::Conv2d<float> c("c", 3, 8, 3, 2);
  Rng rng(0);
  c.init(rng);
  TensorF x({3, 16, 16});
  const auto y = c.forward(x);
  CHECK(y.shape() == std::vector<int>{8, 8, 8});
  CHECK(y.shape() == c.output_shape(16, 16));

  nn::Conv2d<float> c1("c1", 4, 2, 1, 1, 0);
  TensorF x1({4, 5, 7});
  CHECK(c1.forward(x1).shape() == std::vector<int>{2, 5, 7});
}

TEST_CASE("conv2d gradients match finite differences") {
  for (const auto& [k, stride] : std::vector<std::pair<int, int>>{{3, 1}, {3, 2}, {1, 1}}) {
    Rng rng(100 + k * 10 + stride);
    nn::Conv2d<double> conv("c", 3, 4, k, stride);
    conv.init(rng);
    Tensor<double> x = random_tensor({3, 8, 8}, rng);
    Readout readout(conv.output_shape(8, 8), rng);

    auto loss = [&] { return readout.loss(conv.forward(x)); };
    (void)loss();
    conv.visit_params([](const std::string&, Tensor<double>&, Tensor<double>& g) {
      g.fill(0.0);
    });
    conv.forward(x);
    conv.backward(readout.c);

    std::vector<std::pair<Tensor<double>*, Tensor<double>*>> params;
    conv.visit_params([&params](const std::string&, Tensor<double>& w, Tensor<double>& g) {
      params.emplace_back(&w, &g);
    });
    Rng dir_rng(7);
    const double err = testutil::directional_fd_error(params, loss, dir_rng);
    CHECK(err < 1e-7);
  }
}

TEST_CASE("conv2d input gradient matches finite differences") {
  Rng rng(5);
  nn::Conv2d<double> conv("c", 2, 3, 3, 1);
  conv.init(rng);
  Tensor<double> x = random_tensor({2, 6, 6}, rng);
  Readout readout(conv.output_shape(6, 6), rng);

  conv.forward(x);
  const Tensor<double> dx = conv.backward(readout.c);

  Rng dir_rng(8);
  double worst = 0;
  for (int trial = 0; trial < 5; ++trial) {
    const auto i = static_cast<std::int64_t>(dir_rng.uniform_int(
        static_cast<std::uint64_t>(x.numel())));
    const double h = 1e-6;
    x[i] += h;
    const double plus = readout.loss(conv.forward(x));
    x[i] -= 2 * h;
    const double minus = readout.loss(conv.forward(x));
    x[i] += h;
    const double fd = (plus - minus) / (2 * h);
    worst = std::max(worst, std::abs(fd - dx[i]) / std::max({std::abs(fd), std::abs(dx[i]), 1e-10}));
  }
  CHECK(worst < 1e-6);
}

TEST_CASE("linear, groupnorm and activations match finite differences") {
  Rng rng(42);
  nn::Linear<double> lin("l", 6, 5);
  lin.init(rng);
  nn::GroupNorm<double> gn("g", 4, 2);
  nn::SiLU<double> silu;
  nn::LeakyReLU<double> lrelu(0.1);
  nn::Conv2d<double> conv("c", 3, 4, 3);
  conv.init(rng);

  Tensor<double> xl = random_tensor({6}, rng);
  Tensor<double> xc = random_tensor({3, 6, 6}, rng);
  Readout rl({5}, rng);
  Readout rc({4, 6, 6}, rng);

  // composite: lrelu(silu(gn(conv(x)))) exercises every backward in a chain
  auto loss = [&] {
    double a = rl.loss(lin.forward(xl));
    double b = rc.loss(lrelu.forward(silu.forward(gn.forward(conv.forward(xc)))));
    return a + b;
  };

  std::vector<std::pair<Tensor<double>*, Tensor<double>*>> params;
  auto collect = [&params](const std::string&, Tensor<double>& w, Tensor<double>& g) {
    g.fill(0.0);
    params.emplace_back(&w, &g);
  };
  lin.visit_params(collect);
  gn.visit_params(collect);
  conv.visit_params(collect);

  lin.forward(xl);
  lrelu.forward(silu.forward(gn.forward(conv.forward(xc))));
  lin.backward(rl.c);
  conv.backward(gn.backward(silu.backward(lrelu.backward(rc.c))));

  Rng dir_rng(1);
  const double err = testutil::directional_fd_error(params, loss, dir_rng);
  CHECK(err < 1e-7);
}

TEST_CASE("upsample nearest 2x forward and backward agree") {
  Rng rng(3);
  Tensor<double> x = random_tensor({2, 3, 3}, rng);
  const auto y = nn::upsample_nearest2x(x);
  CHECK(y.shape() == std::vector<int>{2, 6, 6});
  CHECK(y.at(0, 0, 0) == x.at(0, 0, 0));
  CHECK(y.at(0, 5, 5) == x.at(0, 2, 2));

  // adjoint identity: <up(x), c> == <x, up_backward(c)>
  Tensor<double> c = random_tensor({2, 6, 6}, rng);
  double lhs = 0;
  for (std::int64_t i = 0; i < y.numel(); ++i) lhs += y[i] * c[i];
  const auto dx = nn::upsample_nearest2x_backward(c);
  double rhs = 0;
  for (std::int64_t i = 0; i < x.numel(); ++i) rhs += x[i] * dx[i];
  CHECK(lhs == doctest::Approx(rhs).epsilon(1e-12));
}

TEST_CASE("bilinear resize matches a separable interpolation oracle on a ramp") {
  // 4x4 ramp pattern, resized to 8x8 and 3x5; oracle computes the same
  // half-pixel convention with explicit 1-D lerps
  Tensor<double> x({1, 4, 4});
  for (int y = 0; y < 4; ++y)
    for (int xx = 0; xx < 4; ++xx) x.at(0, y, xx) = 0.3 * y + 1.7 * xx;

  auto oracle = [&x](int oh, int ow, int oy, int ox) {
    const double sy = 4.0 / oh, sx = 4.0 / ow;
    double fy = std::clamp((oy + 0.5) * sy - 0.5, 0.0, 3.0);
    double fx = std::clamp((ox + 0.5) * sx - 0.5, 0.0, 3.0);
    const int y0 = static_cast<int>(fy), x0 = static_cast<int>(fx);
    const int y1 = std::min(y0 + 1, 3), x1 = std::min(x0 + 1, 3);
    auto lerp = [](double a, double b, double w) { return a + (b - a) * w; };
    const double top = lerp(x.at(0, y0, x0), x.at(0, y0, x1), fx - x0);
    const double bot = lerp(x.at(0, y1, x0), x.at(0, y1, x1), fx - x0);
    return lerp(top, bot, fy - y0);
  };

  for (const auto& [oh, ow] : std::vector<std::pair<int, int>>{{8, 8}, {3, 5}, {4, 4}}) {
    const auto y = nn::bilinear_resize(x, oh, ow);
    for (int oy = 0; oy < oh; ++oy)
      for (int ox = 0; ox < ow; ++ox)
        CHECK(y.at(0, oy, ox) == doctest::Approx(oracle(oh, ow, oy, ox)).epsilon(1e-6));
  }
}

TEST_CASE("adam drives a quadratic toward its minimum deterministically") {
  Tensor<float> w({4});
  Tensor<float> g({4});
  w.fill(5.0f);
  nn::Adam<float> adam(0.1f);
  std::vector<std::pair<TensorF*, TensorF*>> params{{&w, &g}};
  for (int step = 0; step < 300; ++step) {
    for (int i = 0; i < 4; ++i) g[i] = 2.0f * (w[i] - 1.0f);
    adam.step(params);
  }
  for (int i = 0; i < 4; ++i) CHECK(w[i] == doctest::Approx(1.0f).epsilon(0.02));
}
