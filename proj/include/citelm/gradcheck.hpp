#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <random>
#include <string>
#include <vector>

#include "citelm/model.hpp"

namespace citelm {

// Returns the loss; when `grad` is non-null also writes the analytic gradient
// into it (it arrives zeroed).
using LossFunction = std::function<double(const ModelState<double>&, ModelState<double>* grad)>;

struct GradCheckOptions {
  double eps = 1e-3;
  double tol = 1e-4;
  int n_samples = 200;
  std::uint64_t seed = 0;
  // Relative error is |a - n| / max(|a|, |n|, floor); the floor keeps
  // vanishing gradients from turning round-off into large ratios.
  double floor = 1e-6;
};

struct GradCheckSample {
  std::string tensor;
  Eigen::Index index = 0;
  double analytic = 0.0;
  double numeric = 0.0;
  double rel_error = 0.0;
};

struct GradCheckReport {
  std::vector<GradCheckSample> samples;
  double max_rel_error = 0.0;
  std::size_t n_failed = 0;
  bool passed() const { return n_failed == 0; }
  const GradCheckSample* worst() const {
    if (samples.empty()) return nullptr;
    return &*std::max_element(samples.begin(), samples.end(),
                              [](const auto& a, const auto& b) { return a.rel_error < b.rel_error; });
  }
};

// Compares the analytic gradient to central differences
// (loss(θ + eps) - loss(θ - eps)) / (2 eps) on sampled coordinates. Samples
// are spread over every tensor; within a tensor half are uniform and half
// are drawn from coordinates with a nonzero analytic gradient, so sparse
// tensors (embedding tables) still get exercised.
inline GradCheckReport grad_check(const ModelState<double>& state, const LossFunction& loss_fn,
                                  const GradCheckOptions& options) {
  ModelState<double> probe = state;
  ModelState<double> grad = ModelState<double>::zeros(state.config);
  const double base = loss_fn(probe, &grad);
  if (!std::isfinite(base)) throw NonFiniteLoss("loss is not finite at the probe point");

  auto params = probe.tensors();
  const auto grads = grad.tensors();
  std::mt19937_64 rng(options.seed);
  const std::size_t per_tensor =
      std::max<std::size_t>(1, (static_cast<std::size_t>(options.n_samples) + params.size() - 1) / params.size());

  GradCheckReport report;
  for (std::size_t p = 0; p < params.size(); ++p) {
    Matrix<double>& m = *params[p].second;
    const Matrix<double>& g = *grads[p].second;
    std::vector<Eigen::Index> nonzero;
    for (Eigen::Index i = 0; i < g.size(); ++i) {
      if (g.data()[i] != 0.0) nonzero.push_back(i);
    }
    for (std::size_t s = 0; s < per_tensor; ++s) {
      Eigen::Index idx = 0;
      if (s % 2 == 1 && !nonzero.empty()) {
        idx = nonzero[rng() % nonzero.size()];
      } else {
        idx = static_cast<Eigen::Index>(rng() % static_cast<std::uint64_t>(m.size()));
      }
      const double saved = m.data()[idx];
      m.data()[idx] = saved + options.eps;
      const double plus = loss_fn(probe, nullptr);
      m.data()[idx] = saved - options.eps;
      const double minus = loss_fn(probe, nullptr);
      m.data()[idx] = saved;
      if (!std::isfinite(plus) || !std::isfinite(minus)) {
        throw NonFiniteLoss("loss is not finite near " + params[p].first);
      }
      GradCheckSample sample;
      sample.tensor = params[p].first;
      sample.index = idx;
      sample.analytic = g.data()[idx];
      sample.numeric = (plus - minus) / (2.0 * options.eps);
      const double denom =
          std::max({std::abs(sample.analytic), std::abs(sample.numeric), options.floor});
      sample.rel_error = std::abs(sample.analytic - sample.numeric) / denom;
      report.max_rel_error = std::max(report.max_rel_error, sample.rel_error);
      report.n_failed += sample.rel_error > options.tol;
      report.samples.push_back(std::move(sample));
    }
  }
  return report;
}

}  // namespace citelm
