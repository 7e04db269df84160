#include <cmath>
#include <fstream>
#include <limits>

#include "test_util.hpp"

using namespace mag;
using magtest::max_abs_diff;
using magtest::random_matrix;
using magtest::random_param;

namespace {

// Brute-force masked softmax attention in double precision.
Eigen::MatrixXd naive_attention(const Matrix& q, const Matrix& k, const Matrix& v, const AttentionMask& mask) {
  const int nq = static_cast<int>(q.rows());
  const int nk = static_cast<int>(k.rows());
  const int d = static_cast<int>(q.cols());
  Eigen::MatrixXd out = Eigen::MatrixXd::Zero(nq, v.cols());
  for (int i = 0; i < nq; ++i) {
    std::vector<double> logits(nk, -std::numeric_limits<double>::infinity());
    double mx = -std::numeric_limits<double>::infinity();
    for (int j = 0; j < nk; ++j) {
      if (!mask.visible(i, j)) continue;
      double s = 0;
      for (int c = 0; c < d; ++c) s += double(q(i, c)) * double(k(j, c));
      logits[j] = s / std::sqrt(double(d));
      mx = std::max(mx, logits[j]);
    }
    double z = 0;
    for (int j = 0; j < nk; ++j) z += mask.visible(i, j) ? std::exp(logits[j] - mx) : 0.0;
    for (int j = 0; j < nk; ++j) {
      if (!mask.visible(i, j)) continue;
      const double p = std::exp(logits[j] - mx) / z;
      for (int c = 0; c < v.cols(); ++c) out(i, c) += p * double(v(j, c));
    }
  }
  return out;
}

double max_diff(const Matrix& a, const Eigen::MatrixXd& b) { return (a.cast<double>() - b).cwiseAbs().maxCoeff(); }

AttentionMask random_mask(int nq, int nk, Rng& rng) {
  AttentionMask m(nq, nk, MaskKind::bidirectional);
  for (int i = 0; i < nq; ++i) {
    for (int j = 0; j < nk; ++j) m.set(i, j, rng.bernoulli(0.5));
    m.set(i, rng.uniform_int(0, nk - 1), true);
  }
  return m;
}

}  // namespace

TEST(Attention, SingleKeyReturnsValueRow) {
  Rng rng(1);
  const Matrix q = random_matrix(4, 6, rng);
  const Matrix k = random_matrix(1, 6, rng);
  const Matrix v = random_matrix(1, 6, rng);
  const auto out = attention(Tensor::constant(q), Tensor::constant(k), Tensor::constant(v),
                             AttentionMask::all_visible(4, 1, MaskKind::bidirectional));
  for (int i = 0; i < 4; ++i) EXPECT_LT((out.value().row(i) - v.row(0)).cwiseAbs().maxCoeff(), 1e-6);
}

TEST(Attention, IdentityMaskSelectsOwnValue) {
  Rng rng(2);
  const Matrix q = random_matrix(5, 4, rng);
  const Matrix v = random_matrix(5, 3, rng);
  AttentionMask mask(5, 5, MaskKind::bidirectional);
  for (int i = 0; i < 5; ++i) mask.set(i, i, true);
  // v may have a different width from q/k only through the multi-head path;
  // pad to a common width.
  Matrix vpad = Matrix::Zero(5, 4);
  vpad.leftCols(3) = v;
  const auto out = attention(Tensor::constant(q), Tensor::constant(q), Tensor::constant(vpad), mask);
  EXPECT_LT(max_abs_diff(out.value(), vpad), 1e-6);
}

TEST(Attention, MatchesNaiveReference) {
  Rng rng(3);
  for (int trial = 0; trial < 50; ++trial) {
    const Matrix q = random_matrix(5, 4, rng);
    const Matrix k = random_matrix(7, 4, rng);
    const Matrix v = random_matrix(7, 4, rng);
    const auto mask = trial == 0 ? AttentionMask::all_visible(5, 7, MaskKind::bidirectional) : random_mask(5, 7, rng);
    const auto out = attention(Tensor::constant(q), Tensor::constant(k), Tensor::constant(v), mask);
    EXPECT_LT(max_diff(out.value(), naive_attention(q, k, v, mask)), 1e-6) << "trial " << trial;
  }
}

TEST(Attention, SystemMasksMatchNaiveReference) {
  Rng rng(4);
  const int f = 2;
  std::vector<AttentionMask> masks = {build_memory_mask(3, 2, f), build_inference_mask(6, 4),
                                      build_bidirectional_mask(6)};
  for (const auto& mask : masks) {
    const Matrix q = random_matrix(mask.queries(), 4, rng);
    const Matrix k = random_matrix(mask.keys(), 4, rng);
    const Matrix v = random_matrix(mask.keys(), 4, rng);
    const auto out = attention(Tensor::constant(q), Tensor::constant(k), Tensor::constant(v), mask);
    EXPECT_LT(max_diff(out.value(), naive_attention(q, k, v, mask)), 1e-6) << to_string(mask.kind());
  }
}

TEST(Attention, MultiHeadEqualsPerHeadReference) {
  Rng rng(5);
  const Matrix q = random_matrix(4, 8, rng);
  const Matrix k = random_matrix(6, 8, rng);
  const Matrix v = random_matrix(6, 8, rng);
  const auto mask = random_mask(4, 6, rng);
  const auto out = multi_head_attention(Tensor::constant(q), Tensor::constant(k), Tensor::constant(v), mask, 2);
  for (int h = 0; h < 2; ++h) {
    const Matrix qh = q.middleCols(h * 4, 4), kh = k.middleCols(h * 4, 4), vh = v.middleCols(h * 4, 4);
    const Matrix oh = out.value().middleCols(h * 4, 4);
    EXPECT_LT(max_diff(oh, naive_attention(qh, kh, vh, mask)), 1e-6);
  }
}

TEST(Attention, EmptyRowIsMaskError) {
  Rng rng(6);
  AttentionMask mask = AttentionMask::all_visible(3, 3, MaskKind::bidirectional);
  mask.set_range(1, 0, 3, false);
  const auto t = Tensor::constant(random_matrix(3, 4, rng));
  EXPECT_THROW(attention(t, t, t, mask), MaskError);
}

TEST(Attention, MaskShapeMismatchIsMaskError) {
  Rng rng(7);
  const auto t = Tensor::constant(random_matrix(3, 4, rng));
  EXPECT_THROW(attention(t, t, t, AttentionMask::all_visible(3, 4, MaskKind::bidirectional)), MaskError);
}

TEST(Rope, ZeroPositionsIsIdentity) {
  Rng rng(8);
  const Matrix x = random_matrix(5, 8, rng);
  const auto y = rope_apply(Tensor::constant(x), std::vector<std::int64_t>(5, 0));
  EXPECT_EQ(max_abs_diff(y.value(), x), 0.0);
}

TEST(Rope, RelativePositionIdentity) {
  Rng rng(9);
  for (int trial = 0; trial < 200; ++trial) {
    const Matrix q = random_matrix(1, 8, rng);
    const Matrix k = random_matrix(1, 8, rng);
    const std::int64_t p = rng.uniform_int(0, 200), r = rng.uniform_int(0, 200), s = rng.uniform_int(0, 5000);
    auto dot = [&](std::int64_t a, std::int64_t b) {
      const auto qa = rope_apply(Tensor::constant(q), {a});
      const auto kb = rope_apply(Tensor::constant(k), {b});
      return double(qa.value().row(0).dot(kb.value().row(0)));
    };
    EXPECT_NEAR(dot(p + s, r + s), dot(p, r), 1e-5 * std::max(1.0, std::abs(dot(p, r)))) << "trial " << trial;
  }
}

TEST(Rope, ClosedFormSinglePair) {
  Matrix x(1, 2);
  x << Scalar(0.3), Scalar(-1.2);
  const auto y = rope_apply(Tensor::constant(x), {1});
  // One pair: theta = base^0 = 1 radian per position.
  const double c = std::cos(1.0), s = std::sin(1.0);
  EXPECT_NEAR(y.value()(0, 0), c * 0.3 - s * -1.2, 1e-6);
  EXPECT_NEAR(y.value()(0, 1), s * 0.3 + c * -1.2, 1e-6);
}

TEST(Rope, SecondPairUsesScaledFrequency) {
  Matrix x = Matrix::Zero(1, 4);
  x(0, 2) = 1;
  const auto y = rope(Tensor::constant(x), {3}, 1, Scalar(100));
  const double theta = std::pow(100.0, -2.0 / 4.0);
  EXPECT_NEAR(y.value()(0, 2), std::cos(3 * theta), 1e-6);
  EXPECT_NEAR(y.value()(0, 3), std::sin(3 * theta), 1e-6);
}

TEST(Rope, OddFeatureDimIsConfigError) {
  EXPECT_THROW(rope_apply(Tensor::constant(Matrix::Zero(2, 3)), {0, 1}), ConfigError);
  EXPECT_THROW(rope(Tensor::constant(Matrix::Zero(2, 6)), {0, 1}, 2), ConfigError);
}

TEST(Rope, PositionCountMismatchIsShapeError) {
  EXPECT_THROW(rope_apply(Tensor::constant(Matrix::Zero(2, 4)), {0}), ShapeError);
}

TEST(Adam, ZeroGradientLeavesParametersUnchanged) {
  Rng rng(15);
  auto p = random_param(3, 3, rng);
  const Matrix before = p.value();
  Adam opt({p}, AdamConfig{});
  for (int i = 0; i < 5; ++i) {
    p.zero_grad();
    backward(scale(sum(p), Scalar(0)));
    opt.step();
  }
  EXPECT_EQ(max_abs_diff(p.value(), before), 0.0);
}

TEST(Adam, FirstStepClosedForm) {
  Rng rng(16);
  auto p = random_param(2, 3, rng);
  const Matrix before = p.value();
  AdamConfig cfg;
  cfg.lr = Scalar(0.01);
  cfg.grad_clip = 0;
  Adam opt({p}, cfg);
  const Matrix g = random_matrix(2, 3, rng);
  backward(dot_constant(p, g));
  opt.step();
  // Bias-corrected first step is lr * g / (|g| + eps).
  for (Eigen::Index i = 0; i < g.size(); ++i) {
    const double expect = before.data()[i] - 0.01 * g.data()[i] / (std::abs(g.data()[i]) + 1e-8);
    EXPECT_NEAR(p.value().data()[i], expect, 1e-6);
  }
  EXPECT_EQ(opt.steps(), 1);
}

TEST(Adam, GradientClippingBoundsNorm) {
  auto p = Tensor::parameter(Matrix::Zero(1, 2));
  AdamConfig cfg;
  cfg.grad_clip = Scalar(1);
  Adam opt({p}, cfg);
  Matrix g(1, 2);
  g << 30, 40;
  backward(dot_constant(p, g));
  EXPECT_NEAR(opt.grad_norm(), 50.0, 1e-4);
  opt.step();
  EXPECT_TRUE(p.value().allFinite());
}

TEST(Checkpoint, BitExactRoundTrip) {
  magtest::TempDir dir("ckpt");
  Rng rng(17);
  auto a = random_param(3, 7, rng);
  auto b = random_param(1, 5, rng);
  const auto path = dir.path / "x.magc";
  write_checkpoint(path, {to_named_array("a", a), to_named_array("b.w", b)});
  const auto back = read_checkpoint(path);
  ASSERT_EQ(back.size(), 2u);
  EXPECT_EQ(back[0].name, "a");
  EXPECT_EQ(back[1].name, "b.w");
  EXPECT_EQ(back[0].dims, (std::vector<std::uint32_t>{3, 7}));
  for (Eigen::Index i = 0; i < a.value().size(); ++i) {
    EXPECT_EQ(back[0].data[i], static_cast<float>(a.value().data()[i]));
  }
}

TEST(Checkpoint, BadMagicAndTruncationNameTheFile) {
  magtest::TempDir dir("ckpt_bad");
  Rng rng(18);
  auto a = random_param(4, 4, rng);
  const auto path = dir.path / "bad.magc";
  write_checkpoint(path, {to_named_array("a", a)});
  {
    std::fstream f(path, std::ios::in | std::ios::out | std::ios::binary);
    f.write("XXXX", 4);
  }
  try {
    read_checkpoint(path);
    FAIL() << "expected CheckpointError";
  } catch (const CheckpointError& e) {
    EXPECT_NE(std::string(e.what()).find("bad.magc"), std::string::npos);
  }
  const auto trunc = dir.path / "trunc.magc";
  write_checkpoint(trunc, {to_named_array("a", a)});
  std::filesystem::resize_file(trunc, std::filesystem::file_size(trunc) - 6);
  try {
    read_checkpoint(trunc);
    FAIL() << "expected CheckpointError";
  } catch (const CheckpointError& e) {
    EXPECT_NE(std::string(e.what()).find("trunc.magc"), std::string::npos);
  }
}

TEST(Tensor, FiniteCheckerFlagsOverflow) {
  const bool saved = finite_checks();
  set_finite_checks(true);
  auto x = Tensor::constant(Matrix::Constant(1, 1, std::numeric_limits<Scalar>::max()));
  EXPECT_THROW(scale(x, Scalar(10)), NumericError);
  set_finite_checks(saved);
}

TEST(Tensor, NoGradGuardStopsTracking) {
  Rng rng(19);
  auto p = random_param(2, 2, rng);
  {
    NoGradGuard guard;
    EXPECT_FALSE(mul(p, p).requires_grad());
  }
  EXPECT_TRUE(mul(p, p).requires_grad());
}

TEST(Tensor, GradientAccumulatesOverSharedUse) {
  auto p = Tensor::parameter(Matrix::Constant(1, 1, Scalar(3)));
  backward(add(mul(p, p), p));
  EXPECT_NEAR(p.grad()(0, 0), 7.0, 1e-6);
}

TEST(Tensor, ShapeErrors) {
  auto a = Tensor::zeros(2, 3);
  auto b = Tensor::zeros(3, 2);
  EXPECT_THROW(add(a, b), ShapeError);
  EXPECT_THROW(matmul(a, a), ShapeError);
  EXPECT_THROW(backward(a), ShapeError);
  EXPECT_THROW(slice_rows(a, 1, 5), BoundsError);
}
