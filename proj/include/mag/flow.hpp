#pragma once

#include <cmath>
#include <cstdint>
#include <functional>
#include <vector>

#include "mag/model.hpp"

namespace mag {

inline constexpr Scalar kTimestepMin = Scalar(0.02);
inline constexpr Scalar kTimestepMax = Scalar(0.98);

/// Rectified-flow training atom: xt = (1-t)·x0 + t·x1, v = x1 - x0.
/// t = 0 is pure noise, t = 1 is data.
struct FlowSample {
  Matrix x0;
  Matrix x1;
  Scalar t = 0;
  Matrix xt;
  Matrix v_target;
};

inline Matrix gaussian_like(int rows, int cols, Rng& rng) {
  Matrix m(rows, cols);
  for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = static_cast<Scalar>(rng.normal());
  return m;
}

inline Scalar sample_timestep(Rng& rng) { return static_cast<Scalar>(rng.uniform(kTimestepMin, kTimestepMax)); }

inline FlowSample make_flow_sample(const Matrix& x1, Matrix x0, Scalar t) {
  if (x0.rows() != x1.rows() || x0.cols() != x1.cols()) throw ShapeError("flow sample: noise/data shape mismatch");
  FlowSample s;
  s.t = t;
  s.xt = (Scalar(1) - t) * x0 + t * x1;
  s.v_target = x1 - x0;
  s.x0 = std::move(x0);
  s.x1 = x1;
  return s;
}

inline FlowSample make_flow_sample(const Matrix& x1, Scalar t, Rng& rng) {
  return make_flow_sample(x1, gaussian_like(static_cast<int>(x1.rows()), static_cast<int>(x1.cols()), rng), t);
}

/// Where a block sits in the stream: its first global frame and the rotary
/// position of its first token.
struct Placement {
  int first_frame = 0;
  std::int64_t start_position = 0;
};

inline Placement frame_placement(int first_frame, int frame_tokens, std::int64_t offset = 0) {
  return {first_frame, offset + static_cast<std::int64_t>(first_frame) * frame_tokens};
}

inline void check_horizon(int first_frame, int frames, int horizon) {
  if (first_frame + frames > horizon) {
    throw HorizonError("position horizon exceeded: frame " + std::to_string(first_frame + frames) + " > " +
                       std::to_string(horizon));
  }
}

/// Mask for a block of n tokens over a cache prefix: bidirectional when the
/// model runs without history, otherwise the block-causal inference mask.
inline AttentionMask block_mask(const DiffusionTransformer& model, int cache_len, int n) {
  if (cache_len == 0 && model.config().attention_mode == AttentionMode::bidirectional) return build_bidirectional_mask(n);
  return build_inference_mask(cache_len, n);
}

inline Tensor predict_velocity(const DiffusionTransformer& model, const Tensor& x, Scalar t, const SceneCondition& cond,
                               CacheView cache, const Placement& at, PositionRule rule = PositionRule::after_cache) {
  const AttentionMask mask = block_mask(model, cache.size(), x.rows());
  return forward_denoise(model, x, t, cond, cache, mask, at.first_frame, at.start_position, false, rule).velocity;
}

struct FmResult {
  Tensor loss;
  FlowSample sample;
};

inline void require_finite(const Tensor& loss, const char* what) {
  if (!std::isfinite(static_cast<double>(loss.item()))) throw NumericError(std::string(what) + ": non-finite loss");
}

/// mean‖model(xt, t, cond, cache) - (x1 - x0)‖² over one block of clean tokens.
inline FmResult fm_loss(const DiffusionTransformer& model, const Matrix& clean_tokens, const SceneCondition& cond,
                        CacheView cache, const Placement& at, Rng& rng) {
  FmResult r;
  r.sample = make_flow_sample(clean_tokens, sample_timestep(rng), rng);
  const Tensor v = predict_velocity(model, Tensor::constant(r.sample.xt), r.sample.t, cond, cache, at);
  r.loss = mse_loss(v, r.sample.v_target);
  require_finite(r.loss, "fm_loss");
  return r;
}

/// Uniform grid {0, 1/steps, ..., (steps-1)/steps}; integration ends at 1.
inline std::vector<Scalar> few_step_grid(int steps) {
  if (steps < 1) throw ConfigError("few_step_sample: steps must be >= 1");
  std::vector<Scalar> grid;
  for (int j = 0; j < steps; ++j) grid.push_back(static_cast<Scalar>(j) / static_cast<Scalar>(steps));
  return grid;
}

using VelocityFn = std::function<Tensor(const Tensor& x, Scalar t)>;

/// Euler integration from noise (t = 0) to data (t = 1).
inline Tensor euler_sample(const VelocityFn& velocity, const Tensor& noise, int steps) {
  const auto grid = few_step_grid(steps);
  Tensor x = noise;
  for (std::size_t j = 0; j < grid.size(); ++j) {
    const Scalar next = j + 1 < grid.size() ? grid[j + 1] : Scalar(1);
    x = axpy(x, next - grid[j], velocity(x, grid[j]));
  }
  return x;
}

/// Few-step sampling of one block. Differentiable through every step when
/// gradients are enabled; the cache is a constant.
inline Tensor few_step_sample(const DiffusionTransformer& model, const SceneCondition& cond, CacheView cache,
                              const Matrix& noise, const Placement& at, int steps = 4,
                              PositionRule rule = PositionRule::after_cache) {
  return euler_sample([&](const Tensor& x, Scalar t) { return predict_velocity(model, x, t, cond, cache, at, rule); },
                      Tensor::constant(noise), steps);
}

/// Clip index i is 1-based. For i > 1 the condition is replaced by the null
/// condition with probability lambda. `drawn_null` reports the outcome.
inline SceneCondition history_condition_sample(double lambda, const SceneCondition& cond, int i, Rng& rng,
                                               bool* drawn_null = nullptr) {
  if (lambda < 0.0 || lambda > 1.0) throw ConfigError("history condition: lambda must be in [0,1]");
  if (i < 1) throw ConfigError("history condition: clip index is 1-based");
  bool use_null = false;
  if (i > 1) use_null = rng.bernoulli(lambda);
  if (drawn_null) *drawn_null = use_null;
  return use_null ? SceneCondition::null() : cond;
}

// ---------------------------------------------------------------------------
// Score-difference direction.

struct DmdConfig {
  bool normalize = true;
  Scalar floor = Scalar(1e-8);
};

/// Δ = teacher - student, optionally divided by mean|Δ| (never below floor).
inline Matrix dmd_direction(const Matrix& teacher_pred, const Matrix& student_pred, const DmdConfig& cfg = {}) {
  if (teacher_pred.rows() != student_pred.rows() || teacher_pred.cols() != student_pred.cols()) {
    throw ShapeError("dmd: teacher/student prediction shapes differ");
  }
  Matrix delta = teacher_pred - student_pred;
  if (cfg.normalize) {
    const Scalar denom = std::max(cfg.floor, delta.cwiseAbs().mean());
    delta /= denom;
  }
  return delta;
}

/// Surrogate whose gradient w.r.t. x is -Δ/N: a descent step moves the sample
/// toward the teacher's prediction.
inline Tensor dmd_surrogate(const Tensor& x, const Matrix& direction) {
  return dot_constant(x, direction, -Scalar(1) / static_cast<Scalar>(direction.size()));
}

}  // namespace mag
