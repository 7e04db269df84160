#pragma once

#include <cmath>
#include <cstdint>
#include <span>
#include <vector>

#include "mag/tensor.hpp"

namespace mag {

namespace detail {

// Rotates consecutive pairs (2j, 2j+1) inside each head by position * theta_j,
// theta_j = base^(-2j/head_dim). sign=-1 applies the inverse rotation.
inline Matrix rotate_pairs(const Matrix& x, std::span<const std::int64_t> positions, int heads, Scalar base,
                           Scalar sign) {
  const int d = static_cast<int>(x.cols());
  const int dh = d / heads;
  const int pairs = dh / 2;
  std::vector<double> theta(pairs);
  for (int j = 0; j < pairs; ++j) theta[j] = std::pow(static_cast<double>(base), -2.0 * j / dh);
  Matrix out(x.rows(), x.cols());
  for (Eigen::Index r = 0; r < x.rows(); ++r) {
    const double pos = static_cast<double>(positions[r]);
    for (int j = 0; j < pairs; ++j) {
      const double angle = pos * theta[j];
      const Scalar c = static_cast<Scalar>(std::cos(angle));
      const Scalar s = sign * static_cast<Scalar>(std::sin(angle));
      for (int h = 0; h < heads; ++h) {
        const int i0 = h * dh + 2 * j;
        const Scalar a = x(r, i0);
        const Scalar b = x(r, i0 + 1);
        out(r, i0) = c * a - s * b;
        out(r, i0 + 1) = s * a + c * b;
      }
    }
  }
  return out;
}

}  // namespace detail

/// Rotary positional embedding over the feature dim of x (rows = tokens).
/// The rotation is orthogonal, so the backward pass is the inverse rotation.
inline Tensor rope(const Tensor& x, std::vector<std::int64_t> positions, int heads = 1, Scalar base = Scalar(10000)) {
  if (heads < 1 || x.cols() % heads != 0 || (x.cols() / heads) % 2 != 0) {
    throw ConfigError("rope: per-head feature dim must be even");
  }
  if (static_cast<int>(positions.size()) != x.rows()) throw ShapeError("rope: one position per row required");
  Matrix out = detail::rotate_pairs(x.value(), positions, heads, base, Scalar(1));
  return make_result("rope", std::move(out), {x},
                     [positions = std::move(positions), heads, base](detail::Node& self) {
                       detail::push(self, 0, detail::rotate_pairs(self.grad, positions, heads, base, -Scalar(1)));
                     });
}

inline Tensor rope_apply(const Tensor& x, std::vector<std::int64_t> positions) {
  return rope(x, std::move(positions), 1);
}

}  // namespace mag
