#pragma once

// Shared test oracles: central finite differences along random parameter
// directions, independent of every backward pass they check.

#include <cmath>
#include <utility>
#include <vector>

#include "diffdet/rng.hpp"
#include "diffdet/tensor.hpp"

namespace diffdet::testutil {

// `params` are (weight, grad) pairs with grads already filled by one
// analytic backward at the current point. Returns the worst relative
// error between the analytic directional derivative and central finite
// differences over `n_dirs` random unit directions.
template <typename LossFn>
double directional_fd_error(std::vector<std::pair<Tensor<double>*, Tensor<double>*>> params,
                            LossFn&& loss, Rng& rng, double h = 1e-5, int n_dirs = 10) {
  std::int64_t total = 0;
  for (auto& [w, g] : params) total += w->numel();

  double worst = 0;
  for (int dir = 0; dir < n_dirs; ++dir) {
    std::vector<std::vector<double>> d;
    double norm = 0;
    for (auto& [w, g] : params) {
      std::vector<double> dd(static_cast<std::size_t>(w->numel()));
      for (auto& v : dd) {
        v = rng.normal();
        norm += v * v;
      }
      d.push_back(std::move(dd));
    }
    norm = std::sqrt(norm);

    double analytic = 0;
    for (std::size_t p = 0; p < params.size(); ++p)
      for (std::int64_t i = 0; i < params[p].first->numel(); ++i)
        analytic += (*params[p].second)[i] * d[p][static_cast<std::size_t>(i)] / norm;

    auto shift = [&](double scale) {
      for (std::size_t p = 0; p < params.size(); ++p)
        for (std::int64_t i = 0; i < params[p].first->numel(); ++i)
          (*params[p].first)[i] += scale * d[p][static_cast<std::size_t>(i)] / norm;
    };

    shift(h);
    const double plus = loss();
    shift(-2 * h);
    const double minus = loss();
    shift(h);  // restore

    const double fd = (plus - minus) / (2 * h);
    const double rel =
        std::abs(analytic - fd) / std::max({std::abs(analytic), std::abs(fd), 1e-10});
    worst = std::max(worst, rel);
  }
  return worst;
}

}  // namespace diffdet::testutil
