#pragma once

#include <cmath>
#include <cstdint>
#include <vector>

#include "mag/tensor.hpp"

namespace mag {

struct AdamConfig {
  Scalar lr = Scalar(1e-4);
  Scalar beta1 = Scalar(0.9);
  Scalar beta2 = Scalar(0.999);
  Scalar eps = Scalar(1e-8);
  Scalar grad_clip = Scalar(1);  // global-norm clip; <= 0 disables
};

/// Adam with bias correction. Parameters without a gradient are skipped.
class Adam {
 public:
  Adam(std::vector<Tensor> params, AdamConfig cfg) : params_(std::move(params)), cfg_(cfg) {
    for (const auto& p : params_) {
      m_.push_back(Matrix::Zero(p.rows(), p.cols()));
      v_.push_back(Matrix::Zero(p.rows(), p.cols()));
    }
  }

  void zero_grad() {
    for (auto& p : params_) p.zero_grad();
  }

  Scalar grad_norm() const {
    double total = 0.0;
    for (const auto& p : params_) {
      if (p.has_grad()) total += p.grad().squaredNorm();
    }
    return static_cast<Scalar>(std::sqrt(total));
  }

  void step() {
    ++step_;
    Scalar clip = Scalar(1);
    if (cfg_.grad_clip > Scalar(0)) {
      const Scalar norm = grad_norm();
      if (norm > cfg_.grad_clip) clip = cfg_.grad_clip / norm;
    }
    const Scalar bc1 = Scalar(1) - std::pow(cfg_.beta1, static_cast<Scalar>(step_));
    const Scalar bc2 = Scalar(1) - std::pow(cfg_.beta2, static_cast<Scalar>(step_));
    for (std::size_t i = 0; i < params_.size(); ++i) {
      auto& p = params_[i];
      if (!p.has_grad()) continue;
      const Matrix g = p.grad() * clip;
      m_[i] = cfg_.beta1 * m_[i] + (Scalar(1) - cfg_.beta1) * g;
      v_[i] = cfg_.beta2 * v_[i] + (Scalar(1) - cfg_.beta2) * g.cwiseAbs2();
      auto update = (m_[i].array() / bc1) / ((v_[i].array() / bc2).sqrt() + cfg_.eps);
      p.mutable_value().array() -= cfg_.lr * update;
    }
  }

  std::int64_t steps() const { return step_; }
  const AdamConfig& config() const { return cfg_; }
  void set_lr(Scalar lr) { cfg_.lr = lr; }
  const Matrix& first_moment(std::size_t i) const { return m_[i]; }
  const Matrix& second_moment(std::size_t i) const { return v_[i]; }

 private:
  std::vector<Tensor> params_;
  AdamConfig cfg_;
  std::vector<Matrix> m_;
  std::vector<Matrix> v_;
  std::int64_t step_ = 0;
};

}  // namespace mag
