#pragma once

#include <algorithm>
#include <cmath>
#include <functional>
#include <vector>

#include "mag/rng.hpp"
#include "mag/tensor.hpp"

namespace mag {

struct GradCheckReport {
  Scalar max_rel_error = Scalar(0);
  Scalar max_abs_error = Scalar(0);
  int coordinates = 0;
};

/// Compares reverse-mode gradients of loss_fn with central differences on
/// `samples` random coordinates (all coordinates when samples <= 0).
/// Relative error uses max(|a|, |n|, floor) in the denominator so that
/// near-zero gradients are judged on an absolute scale.
inline GradCheckReport grad_check(const std::function<Tensor()>& loss_fn, std::vector<Tensor> params, Scalar eps,
                                  int samples = 20, std::uint64_t seed = 0, Scalar floor = Scalar(1e-3)) {
  if (!(eps >= Scalar(1e-4) && eps <= Scalar(1e-2))) throw ConfigError("grad_check: eps must lie in [1e-4, 1e-2]");
  for (auto& p : params) p.zero_grad();
  Tensor loss = loss_fn();
  if (!std::isfinite(loss.item())) throw NumericError("grad_check: non-finite loss");
  backward(loss);

  struct Coord {
    std::size_t param;
    Eigen::Index index;
  };
  std::vector<Coord> coords;
  for (std::size_t p = 0; p < params.size(); ++p) {
    for (Eigen::Index i = 0; i < params[p].value().size(); ++i) coords.push_back({p, i});
  }
  if (samples > 0 && static_cast<std::size_t>(samples) < coords.size()) {
    Rng rng(seed);
    for (int i = 0; i < samples; ++i) {
      std::swap(coords[i], coords[i + rng.uniform_int(0, static_cast<int>(coords.size()) - 1 - i)]);
    }
    coords.resize(samples);
  }

  GradCheckReport report;
  NoGradGuard no_grad;
  for (const auto& c : coords) {
    Tensor& p = params[c.param];
    const Scalar analytic = p.has_grad() ? p.grad().data()[c.index] : Scalar(0);
    Scalar* slot = p.mutable_value().data() + c.index;
    const Scalar saved = *slot;
    *slot = saved + eps;
    const double up = loss_fn().item();
    *slot = saved - eps;
    const double down = loss_fn().item();
    *slot = saved;
    if (!std::isfinite(up) || !std::isfinite(down)) throw NumericError("grad_check: non-finite loss");
    const Scalar numeric = static_cast<Scalar>((up - down) / (2.0 * eps));
    const Scalar abs_err = std::abs(analytic - numeric);
    const Scalar denom = std::max({std::abs(analytic), std::abs(numeric), floor});
    report.max_abs_error = std::max(report.max_abs_error, abs_err);
    report.max_rel_error = std::max(report.max_rel_error, abs_err / denom);
    ++report.coordinates;
  }
  return report;
}

}  // namespace mag
