#pragma once

// Test fixtures that do not depend on the test framework.

#include "mag/mag.hpp"

namespace magtest {

using mag::Matrix;
using mag::Scalar;
using mag::Tensor;

inline Matrix random_matrix(int r, int c, mag::Rng& rng, double scale = 1.0) {
  Matrix m(r, c);
  for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = static_cast<Scalar>(scale * rng.normal());
  return m;
}

inline Tensor random_param(int r, int c, mag::Rng& rng, double scale = 1.0) {
  return Tensor::parameter(random_matrix(r, c, rng, scale));
}

/// Small model used across tests.
inline mag::ModelConfig tiny_config(int b = 3, int frame = 8, int patch = 4, int layers = 2, int d = 16, int heads = 2) {
  mag::ModelConfig c;
  c.layers = layers;
  c.d_model = d;
  c.heads = heads;
  c.patch_size = patch;
  c.block_frames = b;
  c.frame_h = frame;
  c.frame_w = frame;
  c.channels = 1;
  c.scene_vocab = 4;
  c.time_dim = 8;
  c.mlp_ratio = 2;
  return c;
}

inline mag::DiffusionTransformer random_model(const mag::ModelConfig& cfg, std::uint64_t seed, Scalar std = Scalar(0.2)) {
  mag::DiffusionTransformer m(cfg, seed);
  m.randomize(seed + 1, std);
  return m;
}

inline mag::VideoClip random_clip(int frames, int h, int w, mag::Rng& rng) {
  mag::VideoClip c(frames, h, w, 1);
  for (auto& x : c.data) x = static_cast<float>(rng.uniform());
  return c;
}

}  // namespace magtest
