#pragma once

#include <cmath>
#include <cstdint>
#include <memory>
#include <string>
#include <vector>

#include "mag/tensor.hpp"

namespace mag {

enum class MaskKind { inference_block_causal, memory_training, bidirectional };

inline const char* to_string(MaskKind k) {
  switch (k) {
    case MaskKind::inference_block_causal: return "inference_block_causal";
    case MaskKind::memory_training: return "memory_training";
    case MaskKind::bidirectional: return "bidirectional";
  }
  return "?";
}

/// Boolean query/key visibility matrix. Internally also carries the additive
/// form (0 visible, -1e9 hidden) consumed by the attention kernel.
class AttentionMask {
 public:
  static constexpr Scalar kHidden = -Scalar(1e9);

  AttentionMask() = default;
  AttentionMask(int nq, int nk, MaskKind kind, bool fill = false)
      : nq_(nq), nk_(nk), kind_(kind), visible_(static_cast<std::size_t>(nq) * nk, fill ? 1 : 0) {}

  static AttentionMask all_visible(int nq, int nk, MaskKind kind) { return AttentionMask(nq, nk, kind, true); }

  int queries() const { return nq_; }
  int keys() const { return nk_; }
  MaskKind kind() const { return kind_; }

  bool visible(int q, int k) const { return visible_[index(q, k)] != 0; }
  void set(int q, int k, bool v) {
    visible_[index(q, k)] = v ? 1 : 0;
    additive_.reset();
  }
  void set_range(int q, int k_begin, int k_end, bool v = true) {
    for (int k = k_begin; k < k_end; ++k) visible_[index(q, k)] = v ? 1 : 0;
    additive_.reset();
  }

  int row_count(int q) const {
    int n = 0;
    for (int k = 0; k < nk_; ++k) n += visible_[index(q, k)];
    return n;
  }

  // First query row that sees no key, or -1.
  int first_empty_row() const {
    for (int q = 0; q < nq_; ++q) {
      if (row_count(q) == 0) return q;
    }
    return -1;
  }

  bool all_true() const {
    for (auto v : visible_) {
      if (!v) return false;
    }
    return true;
  }

  const Matrix& additive() const {
    if (!additive_) {
      auto m = std::make_shared<Matrix>(nq_, nk_);
      for (int q = 0; q < nq_; ++q) {
        for (int k = 0; k < nk_; ++k) (*m)(q, k) = visible(q, k) ? Scalar(0) : kHidden;
      }
      additive_ = std::move(m);
    }
    return *additive_;
  }

  friend bool operator==(const AttentionMask& a, const AttentionMask& b) {
    return a.nq_ == b.nq_ && a.nk_ == b.nk_ && a.kind_ == b.kind_ && a.visible_ == b.visible_;
  }

 private:
  std::size_t index(int q, int k) const {
    if (q < 0 || q >= nq_ || k < 0 || k >= nk_) throw BoundsError("AttentionMask: index out of range");
    return static_cast<std::size_t>(q) * nk_ + k;
  }

  int nq_ = 0;
  int nk_ = 0;
  MaskKind kind_ = MaskKind::bidirectional;
  std::vector<std::uint8_t> visible_;
  mutable std::shared_ptr<const Matrix> additive_;
};

inline void check_mask(const AttentionMask& mask, int nq, int nk) {
  if (mask.queries() != nq || mask.keys() != nk) {
    throw MaskError("attention mask is " + std::to_string(mask.queries()) + "x" + std::to_string(mask.keys()) +
                    " but attention is " + std::to_string(nq) + "x" + std::to_string(nk));
  }
  if (int row = mask.first_empty_row(); row >= 0) {
    throw MaskError("attention mask row " + std::to_string(row) + " has no visible key");
  }
}

/// Multi-head masked scaled-dot-product attention. q: (nq, d), k/v: (nk, d);
/// heads split d into equal contiguous column groups.
inline Tensor multi_head_attention(const Tensor& q, const Tensor& k, const Tensor& v, const AttentionMask& mask,
                                   int heads) {
  const int nq = q.rows();
  const int nk = k.rows();
  const int d = q.cols();
  if (k.cols() != d || v.cols() != d || v.rows() != nk) throw ShapeError("attention: q/k/v shapes disagree");
  if (heads < 1 || d % heads != 0) throw ConfigError("attention: feature dim not divisible by heads");
  check_mask(mask, nq, nk);
  const int dh = d / heads;
  const Scalar inv_sqrt = Scalar(1) / std::sqrt(static_cast<Scalar>(dh));
  const Matrix& bias = mask.additive();

  auto probs = std::make_shared<std::vector<Matrix>>(heads);
  Matrix out(nq, d);
  for (int h = 0; h < heads; ++h) {
    Matrix s = (q.value().middleCols(h * dh, dh) * k.value().middleCols(h * dh, dh).transpose()) * inv_sqrt;
    s += bias;
    for (int i = 0; i < nq; ++i) {
      const Scalar mx = s.row(i).maxCoeff();
      s.row(i) = (s.row(i).array() - mx).exp();
      s.row(i) /= s.row(i).sum();
    }
    out.middleCols(h * dh, dh).noalias() = s * v.value().middleCols(h * dh, dh);
    (*probs)[h] = std::move(s);
  }
  return make_result("attention", std::move(out), {q, k, v}, [probs, heads, dh, inv_sqrt](detail::Node& self) {
    const Matrix& Q = self.parents[0]->value;
    const Matrix& K = self.parents[1]->value;
    const Matrix& V = self.parents[2]->value;
    const bool want_q = detail::wants(self, 0);
    const bool want_k = detail::wants(self, 1);
    const bool want_v = detail::wants(self, 2);
    Matrix dq = want_q ? Matrix::Zero(Q.rows(), Q.cols()) : Matrix();
    Matrix dk = want_k ? Matrix::Zero(K.rows(), K.cols()) : Matrix();
    Matrix dv = want_v ? Matrix::Zero(V.rows(), V.cols()) : Matrix();
    for (int h = 0; h < heads; ++h) {
      const Matrix& P = (*probs)[h];
      const auto dO = self.grad.middleCols(h * dh, dh);
      if (want_v) dv.middleCols(h * dh, dh).noalias() = P.transpose() * dO;
      if (!want_q && !want_k) continue;
      Matrix dP = dO * V.middleCols(h * dh, dh).transpose();
      Vector rowdot = (dP.cwiseProduct(P)).rowwise().sum();
      Matrix dS = P.cwiseProduct(dP.colwise() - rowdot) * inv_sqrt;
      if (want_q) dq.middleCols(h * dh, dh).noalias() = dS * K.middleCols(h * dh, dh);
      if (want_k) dk.middleCols(h * dh, dh).noalias() = dS.transpose() * Q.middleCols(h * dh, dh);
    }
    if (want_q) detail::push(self, 0, dq);
    if (want_k) detail::push(self, 1, dk);
    if (want_v) detail::push(self, 2, dv);
  });
}

/// softmax(Q K^T / sqrt(d) + mask) V for a single head.
inline Tensor attention(const Tensor& q, const Tensor& k, const Tensor& v, const AttentionMask& mask) {
  return multi_head_attention(q, k, v, mask, 1);
}

}  // namespace mag
