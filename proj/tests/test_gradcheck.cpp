// Gradient checks. This binary is built with double-precision scalars:
// single-precision central differences at eps = 1e-3 carry roundoff of order
// 1e-4 on unit-scale losses, above the 1e-3 relative budget for small
// gradient coordinates.

#include <limits>

#include "gradcheck_cases.hpp"
#include "test_util.hpp"

using namespace mag;
using magtest::max_abs_diff;
using magtest::random_matrix;
using magtest::random_param;

namespace {

// Scalar loss with a nontrivial gradient for any tensor-valued op.
Tensor project(const Tensor& y, std::uint64_t seed) {
  Rng rng(seed);
  return dot_constant(y, random_matrix(y.rows(), y.cols(), rng, 0.5));
}

constexpr Scalar kEps = Scalar(1e-3);
constexpr Scalar kTol = Scalar(1e-3);
constexpr double kHalfNormTol = 1e-6;

}  // namespace

TEST(GradCheck, BuiltInDoublePrecision) { static_assert(std::is_same_v<Scalar, double>); }

TEST(GradCheck, HalfSquaredNorm) {
  Rng rng(10);
  auto x = random_param(4, 5, rng);
  const auto r = grad_check([&] { return scale(sum(mul(x, x)), Scalar(0.5)); }, {x}, kEps, 0);
  EXPECT_EQ(r.coordinates, 20);
  EXPECT_LT(r.max_rel_error, kHalfNormTol);
  x.zero_grad();
  backward(scale(sum(mul(x, x)), Scalar(0.5)));
  EXPECT_LT(max_abs_diff(x.grad(), x.value()), 1e-6);
}

TEST(GradCheck, BadEpsIsConfigError) {
  Rng rng(11);
  auto x = random_param(2, 2, rng);
  auto f = [&] { return sum(mul(x, x)); };
  EXPECT_THROW(grad_check(f, {x}, Scalar(0)), ConfigError);
  EXPECT_THROW(grad_check(f, {x}, Scalar(0.5)), ConfigError);
}

TEST(GradCheck, NonFiniteLossIsNumericError) {
  Rng rng(12);
  auto x = random_param(2, 2, rng);
  const bool saved = finite_checks();
  set_finite_checks(false);
  auto f = [&] {
    Matrix nan = Matrix::Constant(1, 1, std::numeric_limits<Scalar>::quiet_NaN());
    return add(sum(x), Tensor::constant(nan));
  };
  EXPECT_THROW(grad_check(f, {x}, kEps), NumericError);
  set_finite_checks(saved);
}

TEST(GradCheck, EveryOp) {
  Rng rng(13);
  auto a = random_param(3, 4, rng);
  auto b = random_param(3, 4, rng);
  auto c = random_param(3, 4, rng, 0.3);
  auto w = random_param(4, 5, rng);
  auto bias = random_param(1, 5, rng);
  auto row = random_param(1, 4, rng);
  auto table = random_param(5, 4, rng);
  auto sq = random_param(4, 3, rng);

  AttentionMask causal(3, 3, MaskKind::bidirectional);
  for (int i = 0; i < 3; ++i) causal.set_range(i, 0, i + 1);

  struct Case {
    const char* name;
    std::function<Tensor()> fn;
    std::vector<Tensor> params;
  };
  std::vector<Case> cases = {
      {"matmul", [&] { return project(matmul(a, sq), 1); }, {a, sq}},
      {"linear", [&] { return project(linear(a, w, bias), 2); }, {a, w, bias}},
      {"add", [&] { return project(add(a, b), 3); }, {a, b}},
      {"sub", [&] { return project(sub(a, b), 4); }, {a, b}},
      {"mul", [&] { return project(mul(a, b), 5); }, {a, b}},
      {"scale", [&] { return project(scale(a, Scalar(-1.7)), 6); }, {a}},
      {"axpy", [&] { return project(axpy(a, Scalar(0.25), b), 7); }, {a, b}},
      {"add_row", [&] { return project(add_row(a, row), 8); }, {a, row}},
      {"silu", [&] { return project(silu(a), 9); }, {a}},
      {"gelu", [&] { return project(gelu(a), 10); }, {a}},
      {"layer_norm", [&] { return project(layer_norm(a), 11); }, {a}},
      {"modulate", [&] { return project(modulate(a, b, c), 12); }, {a, b, c}},
      {"gather_rows", [&] { return project(gather_rows(table, {4, 0, 4, 2}), 13); }, {table}},
      {"concat_rows", [&] { return project(concat_rows({a, b, slice_rows(table, 1, 2)}), 14); }, {a, b, table}},
      {"slice_rows", [&] { return project(slice_rows(a, 1, 2), 15); }, {a}},
      {"slice_cols", [&] { return project(slice_cols(a, 1, 2), 16); }, {a}},
      {"sum", [&] { return sum(mul(a, b)); }, {a, b}},
      {"mean", [&] { return mean(mul(a, a)); }, {a}},
      {"mse_loss", [&] { return mse_loss(a, b.value()); }, {a}},
      {"dot_constant", [&] { return dot_constant(gelu(a), b.value(), Scalar(-0.5)); }, {a}},
      {"rope", [&] { return project(rope(a, {0, 3, 11}, 2), 17); }, {a}},
      {"attention",
       [&] { return project(multi_head_attention(a, b, c, causal, 2), 18); },
       {a, b, c}},
  };
  for (auto& tc : cases) {
    const auto r = grad_check(tc.fn, tc.params, kEps, 0, 0);
    EXPECT_LT(r.max_rel_error, kTol) << tc.name << " abs " << r.max_abs_error;
  }
}

TEST(GradCheck, TwoLayerNetworkWithAttention) {
  Rng rng(14);
  auto x = Tensor::constant(random_matrix(6, 8, rng));
  auto w1 = random_param(8, 8, rng, 0.35);
  auto b1 = random_param(1, 8, rng, 0.1);
  auto wq = random_param(8, 8, rng, 0.35);
  auto wk = random_param(8, 8, rng, 0.35);
  auto wv = random_param(8, 8, rng, 0.35);
  auto w2 = random_param(8, 4, rng, 0.35);
  auto b2 = random_param(1, 4, rng, 0.1);
  const Matrix target = random_matrix(6, 4, rng);
  const auto mask = build_memory_mask(3, 1, 1);
  auto net = [&] {
    auto h = gelu(linear(x, w1, b1));
    auto n = layer_norm(h);
    auto att = multi_head_attention(rope(matmul(n, wq), {0, 1, 2, 3, 4, 5}, 2), rope(matmul(n, wk), {0, 1, 2, 3, 4, 5}, 2),
                                    matmul(n, wv), mask, 2);
    return mse_loss(linear(add(h, att), w2, b2), target);
  };
  const auto r = grad_check(net, {w1, b1, wq, wk, wv, w2, b2}, kEps, 20, 3);
  EXPECT_EQ(r.coordinates, 20);
  EXPECT_LT(r.max_rel_error, kTol) << "abs " << r.max_abs_error;
}


TEST(GradCheck, FlowMatchingLossOnTwoLayerModel) {
  for (std::uint64_t seed : {1, 2, 3}) {
    const auto r = magtest::fm_loss_gradcheck(seed);
    EXPECT_EQ(r.coordinates, 20);
    EXPECT_LT(r.max_rel_error, kTol) << "seed " << seed << " abs " << r.max_abs_error;
  }
}

TEST(GradCheck, DmdSurrogateWithFrozenDirection) {
  for (int layers : {1, 2}) {
    const auto r = magtest::dmd_surrogate_gradcheck(10 + static_cast<std::uint64_t>(layers), layers);
    EXPECT_LT(r.report.max_rel_error, kTol) << layers << " layers, abs " << r.report.max_abs_error;
    EXPECT_GT(r.grad_scale, 0);
    EXPECT_LT(r.step_vs_surrogate, 1e-12 + 1e-9 * r.grad_scale);
  }
}

TEST(GradCheck, DmdGradientVanishesForSharedCritics) {
  EXPECT_EQ(magtest::dmd_shared_weights_gradient(4), 0.0);
}
