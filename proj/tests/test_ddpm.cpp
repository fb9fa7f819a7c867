#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>

#include "diffdet/ddpm.hpp"
#include "diffdet/training.hpp"
#include "test_util.hpp"

using namespace diffdet;

TEST_CASE("make_schedule single step and hand products") {
  const auto s1 = ddpm::make_schedule(1, 0.5, 0.5);
  CHECK(s1.betas == std::vector<double>{0.5});
  CHECK(s1.alpha_bars == std::vector<double>{0.5});

  const auto s2 = ddpm::make_schedule(2, 0.1, 0.3);
  CHECK(s2.betas[0] == doctest::Approx(0.1).epsilon(1e-12));
  CHECK(s2.betas[1] == doctest::Approx(0.3).epsilon(1e-12));
  CHECK(s2.alpha_bars[0] == doctest::Approx(0.9).epsilon(1e-12));
  CHECK(s2.alpha_bars[1] == doctest::Approx(0.63).epsilon(1e-12));
}

TEST_CASE("make_schedule alpha_bar matches extended-precision sequential product") {
  const int T = 1000;
  const auto s = ddpm::make_schedule(T, 1e-4, 0.02);

  long double running = 1.0L;
  for (int i = 0; i < T; ++i) {
    const long double beta =
        1e-4L + (0.02L - 1e-4L) * static_cast<long double>(i) / (T - 1);
    running *= 1.0L - beta;
    const double expect = static_cast<double>(running);
    CHECK(std::abs(s.alpha_bars[static_cast<std::size_t>(i)] - expect) <=
          1e-6 * std::abs(expect));
  }
}

TEST_CASE("make_schedule validates bounds") {
  CHECK_THROWS_AS(ddpm::make_schedule(0, 0.1, 0.2), std::invalid_argument);
  CHECK_THROWS_AS(ddpm::make_schedule(10, 0.3, 0.1), std::invalid_argument);
  CHECK_THROWS_AS(ddpm::make_schedule(10, 0.0, 0.1), std::invalid_argument);
  CHECK_THROWS_AS(ddpm::make_schedule(10, 0.1, 1.0), std::invalid_argument);
  CHECK_THROWS_AS(ddpm::make_schedule(10, -0.1, 0.5), std::invalid_argument);
}

TEST_CASE("schedule invariants hold for the default schedule") {
  const auto s = ddpm::make_schedule(1000, 1e-4, 0.02);
  for (int t = 1; t <= s.steps; ++t) {
    CHECK(s.beta(t) > 0.0);
    CHECK(s.beta(t) < 1.0);
    CHECK(s.alpha(t) == 1.0 - s.beta(t));
    CHECK(s.alpha_bar(t) > 0.0);
    CHECK(s.alpha_bar(t) < 1.0);
    if (t > 1) {
      CHECK(s.alpha_bar(t) < s.alpha_bar(t - 1));
      // schedule algebra: alpha_bar ratio recovers alpha
      CHECK(std::abs(s.alpha_bar(t) / s.alpha_bar(t - 1) - s.alpha(t)) <=
            1e-7 * s.alpha(t));
    }
  }
}

TEST_CASE("q_step limit cases") {
  Rng rng(1);
  TensorF x({1, 4, 4});
  for (std::int64_t i = 0; i < x.numel(); ++i) x[i] = static_cast<float>(rng.uniform(-1, 1));
  const TensorF eps = ddpm::standard_normal_like<float>({1, 4, 4}, rng);

  const TensorF same = ddpm::q_step_with_beta(x, 0.0, eps);
  CHECK(same.bitwise_equal(x));  // beta=0: no noise enters

  TensorF zero({1, 4, 4});
  const TensorF pure = ddpm::q_step_with_beta(zero, 1.0, eps);
  CHECK(pure.bitwise_equal(eps));  // beta=1: pure noise

  TensorF bad({1, 4, 5});
  CHECK_THROWS_AS(ddpm::q_step_with_beta(x, 0.5, bad), std::invalid_argument);
}

TEST_CASE("q_sample limits, scalar example, and range checks") {
  TensorF x0 = TensorF::full({1, 3, 3}, 0.5f);
  const TensorF eps = TensorF::full({1, 3, 3}, 1.0f);

  CHECK(ddpm::q_sample_with_alpha_bar(x0, 1.0, eps).bitwise_equal(x0));
  TensorF pure = ddpm::q_sample_with_alpha_bar(x0, 0.0, eps);
  CHECK(pure.bitwise_equal(eps));

  const TensorF mid = ddpm::q_sample_with_alpha_bar(x0, 0.5, eps);
  const float expect = 0.5f * std::sqrt(0.5f) + std::sqrt(0.5f);
  for (std::int64_t i = 0; i < mid.numel(); ++i)
    CHECK(mid[i] == doctest::Approx(expect).epsilon(1e-6));
  CHECK(expect == doctest::Approx(1.06066).epsilon(1e-4));

  const auto s = ddpm::make_schedule(10, 0.1, 0.2);
  CHECK_THROWS_AS(ddpm::q_sample(x0, 0, eps, s), std::out_of_range);
  CHECK_THROWS_AS(ddpm::q_sample(x0, 11, eps, s), std::out_of_range);
}

TEST_CASE("q_sample is affine in x0") {
  Rng rng(3);
  const auto s = ddpm::make_schedule(50, 1e-3, 0.1);
  TensorD x0({1, 5, 5});
  for (std::int64_t i = 0; i < x0.numel(); ++i) x0[i] = rng.uniform(-1, 1);
  const TensorD eps = ddpm::standard_normal_like<double>({1, 5, 5}, rng);
  const int t = 20;
  const double a = 2.75;

  TensorD ax0 = x0;
  ax0.scale_(a);
  const TensorD lhs = ddpm::q_sample(ax0, t, eps, s);
  TensorD zero({1, 5, 5});
  const TensorD base = ddpm::q_sample(zero, t, eps, s);
  const double root = std::sqrt(s.alpha_bar(t));
  for (std::int64_t i = 0; i < x0.numel(); ++i)
    CHECK(lhs[i] - base[i] == doctest::Approx(a * root * x0[i]).epsilon(1e-12));
}

TEST_CASE("composed q_step chain matches the closed-form marginal (Monte Carlo)") {
  const auto s = ddpm::make_schedule(10, 0.02, 0.2);
  const int trials = 10000;
  TensorD x0({1, 2, 2});
  x0[0] = 0.9;
  x0[1] = -0.4;
  x0[2] = 0.1;
  x0[3] = -1.0;

  Rng rng(12345);
  std::vector<double> sum(4, 0.0), sumsq(4, 0.0);
  for (int trial = 0; trial < trials; ++trial) {
    TensorD x = x0;
    for (int t = 1; t <= s.steps; ++t) {
      const TensorD eps = ddpm::standard_normal_like<double>({1, 2, 2}, rng);
      x = ddpm::q_step(x, t, eps, s);
    }
    for (int i = 0; i < 4; ++i) {
      sum[static_cast<std::size_t>(i)] += x[i];
      sumsq[static_cast<std::size_t>(i)] += x[i] * x[i];
    }
  }

  const double abar = s.alpha_bar(s.steps);
  const double want_var = 1.0 - abar;
  for (int i = 0; i < 4; ++i) {
    const double mean = sum[static_cast<std::size_t>(i)] / trials;
    const double var = sumsq[static_cast<std::size_t>(i)] / trials - mean * mean;
    const double want_mean = std::sqrt(abar) * x0[i];
    const double se_mean = std::sqrt(want_var / trials);
    const double se_var = want_var * std::sqrt(2.0 / (trials - 1));
    CHECK(std::abs(mean - want_mean) < 3 * se_mean);
    CHECK(std::abs(var - want_var) < 3 * se_var);
  }
}

TEST_CASE("unet tap shapes follow the config formula") {
  ddpm::UNetConfig cfg;
  cfg.base_channels = 8;
  cfg.channel_multipliers = {1, 2, 4};
  cfg.time_embed_dim = 16;
  cfg.tap_levels = {1, 2};
  cfg.norm_groups = 4;
  ddpm::UNetF net(cfg);
  Rng rng(7);
  net.init(rng);

  TensorF x = ddpm::standard_normal_like<float>({1, 64, 64}, rng);
  const auto out = net.forward(x, 5);
  CHECK(out.eps_pred.shape() == std::vector<int>{1, 64, 64});
  REQUIRE(out.taps.size() == 2);
  CHECK(out.taps.at(1).shape() == cfg.tap_shape(1, 64, 64));
  CHECK(out.taps.at(2).shape() == cfg.tap_shape(2, 64, 64));
  CHECK(out.taps.at(1).shape() == std::vector<int>{16, 32, 32});
  CHECK(out.taps.at(2).shape() == std::vector<int>{32, 16, 16});

  // zero-initialized output head: eps_pred is exactly zero
  for (std::int64_t i = 0; i < out.eps_pred.numel(); ++i) CHECK(out.eps_pred[i] == 0.0f);

  // determinism: same weights + same input => bit-identical outputs
  const auto out2 = net.forward(x, 5);
  CHECK(out2.eps_pred.bitwise_equal(out.eps_pred));
  CHECK(out2.taps.at(1).bitwise_equal(out.taps.at(1)));
  CHECK(out2.taps.at(2).bitwise_equal(out.taps.at(2)));
}

TEST_CASE("unet config validation rejects bad taps and input sizes") {
  ddpm::UNetConfig cfg;
  cfg.channel_multipliers = {1, 2, 4};
  cfg.tap_levels = {9};
  CHECK_THROWS_AS((ddpm::UNet<float>{cfg}), std::invalid_argument);

  cfg.tap_levels = {0};
  cfg.channel_multipliers = {1};  // a single level is not a U-Net
  CHECK_THROWS_AS((ddpm::UNet<float>{cfg}), std::invalid_argument);

  ddpm::UNetConfig ok;
  ok.base_channels = 8;
  ok.channel_multipliers = {1, 2, 2};
  ok.norm_groups = 4;
  ok.tap_levels = {1};
  ddpm::UNetF net(ok);
  Rng rng(1);
  net.init(rng);
  TensorF bad = ddpm::standard_normal_like<float>({1, 30, 30}, rng);
  CHECK_THROWS_AS(net.forward(bad, 1), std::invalid_argument);  // 30 not divisible by 4
}

TEST_CASE("tiny unet gradient check against finite differences") {
  ddpm::UNetConfig cfg;
  cfg.base_channels = 2;
  cfg.channel_multipliers = {1, 1};
  cfg.time_embed_dim = 8;
  cfg.tap_levels = {1};
  cfg.norm_groups = 1;
  ddpm::UNet<double> net(cfg);
  Rng rng(11);
  net.init(rng);
  // the production head is zero-initialized; perturb it so gradients flow
  net.visit_params([&rng](const std::string& name, TensorD& w, TensorD&) {
    if (name.rfind("out.conv", 0) == 0)
      for (std::int64_t i = 0; i < w.numel(); ++i) w[i] = rng.normal() * 0.05;
  });
  CHECK(net.param_count() <= 1000);

  const TensorD x_t = ddpm::standard_normal_like<double>({1, 8, 8}, rng);
  const TensorD eps = ddpm::standard_normal_like<double>({1, 8, 8}, rng);
  const int t = 3;

  auto loss = [&] {
    const auto out = net.forward(x_t, t);
    double se = 0;
    for (std::int64_t i = 0; i < eps.numel(); ++i) {
      const double d = out.eps_pred[i] - eps[i];
      se += d * d;
    }
    return se / static_cast<double>(eps.numel());
  };

  net.zero_grads();
  const auto out = net.forward(x_t, t);
  TensorD deps(eps.shape());
  for (std::int64_t i = 0; i < eps.numel(); ++i)
    deps[i] = 2.0 * (out.eps_pred[i] - eps[i]) / static_cast<double>(eps.numel());
  net.backward(deps);

  Rng dir_rng(13);
  const double err = testutil::directional_fd_error(net.param_list(), loss, dir_rng, 1e-5, 10);
  CHECK(err < 1e-3);   // the module contract
  CHECK(err < 1e-6);   // double precision should do far better
}

TEST_CASE("train_denoiser: initial loss is E||eps||^2 and smoke training learns") {
  ddpm::UNetConfig cfg;
  cfg.base_channels = 8;
  cfg.channel_multipliers = {1, 2};
  cfg.time_embed_dim = 16;
  cfg.tap_levels = {1};
  cfg.norm_groups = 4;

  const auto schedule = ddpm::make_schedule(2, 0.2, 0.4);

  // single-image dataset
  Image img{TensorF({1, 16, 16}), ValueRange::Unit};
  Rng rng(21);
  for (std::int64_t i = 0; i < img.data.numel(); ++i)
    img.data[i] = static_cast<float>(rng.uniform());

  ddpm::UNetF net(cfg);
  net.init(rng);

  DdpmTrainParams params;
  params.steps = 500;
  params.batch_size = 2;
  params.lr = 2e-3;
  params.seed = 3;
  params.val_items = 8;

  const auto result = train_denoiser(net, {img}, schedule, params);
  REQUIRE(result.loss_history.size() == 500);

  // zero-init head predicts 0, so early losses average E||eps||^2 = 1
  double first = 0;
  for (int i = 0; i < 10; ++i) first += result.loss_history[static_cast<std::size_t>(i)];
  first /= 10;
  CHECK(first == doctest::Approx(1.0).epsilon(0.1));

  CHECK(result.val_loss_final < 0.9 * result.val_loss_initial);
  for (const double l : result.loss_history) CHECK(std::isfinite(l));
  CHECK(result.loss_history.back() >= 0.0);
}

TEST_CASE("train_denoiser rejects an empty dataset and reports divergence") {
  ddpm::UNetConfig cfg;
  cfg.base_channels = 4;
  cfg.channel_multipliers = {1, 1};
  cfg.time_embed_dim = 8;
  cfg.tap_levels = {0};
  cfg.norm_groups = 2;
  ddpm::UNetF net(cfg);
  Rng rng(2);
  net.init(rng);
  const auto schedule = ddpm::make_schedule(2, 0.2, 0.4);

  CHECK_THROWS_AS(train_denoiser(net, {}, schedule, {}), std::invalid_argument);

  Image img{TensorF({1, 8, 8}), ValueRange::Unit};
  for (std::int64_t i = 0; i < img.data.numel(); ++i) img.data[i] = 0.5f;
  DdpmTrainParams params;
  params.steps = 400;
  params.batch_size = 1;
  params.lr = 1e9;  // guaranteed blow-up
  CHECK_THROWS_AS(train_denoiser(net, {img}, schedule, params), DivergenceError);
}
