#pragma once

#include <algorithm>
#include <cmath>
#include <vector>

#include "mag/synthworld.hpp"

namespace mag {

inline constexpr double kPsnrCap = 99.0;
inline constexpr int kSsimWindow = 7;
inline constexpr double kSsimC1 = 0.01 * 0.01;
inline constexpr double kSsimC2 = 0.03 * 0.03;

inline void check_same_geometry(const VideoClip& a, const VideoClip& b) {
  if (a.height != b.height || a.width != b.width || a.channels != b.channels) {
    throw ShapeError("metrics: frame geometry differs");
  }
}

inline double frame_mse(const VideoClip& a, int fa, const VideoClip& b, int fb) {
  check_same_geometry(a, b);
  const std::size_t n = static_cast<std::size_t>(a.height) * a.width * a.channels;
  const float* pa = a.data.data() + static_cast<std::size_t>(fa) * n;
  const float* pb = b.data.data() + static_cast<std::size_t>(fb) * n;
  double acc = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    const double d = static_cast<double>(pa[i]) - pb[i];
    acc += d * d;
  }
  return acc / static_cast<double>(n);
}

/// Peak 1.0; exact matches report the cap instead of infinity.
inline double psnr_from_mse(double mse) {
  if (mse <= 0.0) return kPsnrCap;
  return std::min(kPsnrCap, 10.0 * std::log10(1.0 / mse));
}

/// Mean SSIM over all valid 7x7 windows (uniform weights) per channel.
inline double frame_ssim(const VideoClip& a, int fa, const VideoClip& b, int fb) {
  check_same_geometry(a, b);
  const int w = std::min({kSsimWindow, a.height, a.width});
  const double n = static_cast<double>(w * w);
  double total = 0.0;
  int windows = 0;
  for (int ch = 0; ch < a.channels; ++ch) {
    for (int r0 = 0; r0 + w <= a.height; ++r0) {
      for (int c0 = 0; c0 + w <= a.width; ++c0) {
        double sa = 0, sb = 0, saa = 0, sbb = 0, sab = 0;
        for (int r = r0; r < r0 + w; ++r) {
          for (int c = c0; c < c0 + w; ++c) {
            const double x = a.at(fa, r, c, ch);
            const double y = b.at(fb, r, c, ch);
            sa += x;
            sb += y;
            saa += x * x;
            sbb += y * y;
            sab += x * y;
          }
        }
        const double ma = sa / n, mb = sb / n;
        const double va = saa / n - ma * ma;
        const double vb = sbb / n - mb * mb;
        const double cov = sab / n - ma * mb;
        total += ((2 * ma * mb + kSsimC1) * (2 * cov + kSsimC2)) / ((ma * ma + mb * mb + kSsimC1) * (va + vb + kSsimC2));
        ++windows;
      }
    }
  }
  return windows ? total / windows : 1.0;
}

struct QualityMetrics {
  double psnr = 0.0;
  double ssim = 0.0;
  double mse = 0.0;
  int frames = 0;

  void accumulate(double frame_mse_value, double frame_ssim_value) {
    psnr += psnr_from_mse(frame_mse_value);
    ssim += frame_ssim_value;
    mse += frame_mse_value;
    ++frames;
  }
  void merge(const QualityMetrics& other) {
    psnr += other.psnr;
    ssim += other.ssim;
    mse += other.mse;
    frames += other.frames;
  }
  /// Per-frame averages from running sums.
  QualityMetrics averaged() const {
    if (frames == 0) return *this;
    return {psnr / frames, ssim / frames, mse / frames, frames};
  }
};

/// Index-aligned per-frame averages.
inline QualityMetrics clip_metrics(const VideoClip& pred, const VideoClip& gt) {
  if (pred.frames != gt.frames) throw ShapeError("clip_metrics: frame counts differ");
  QualityMetrics m;
  for (int t = 0; t < pred.frames; ++t) m.accumulate(frame_mse(pred, t, gt, t), frame_ssim(pred, t, gt, t));
  return m.averaged();
}

}  // namespace mag
