#pragma once

#include <algorithm>
#include <array>
#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "mag/error.hpp"
#include "mag/rng.hpp"

namespace mag {

struct WorldConfig {
  int frame_h = 24;
  int frame_w = 24;
  int channels = 1;
  int world_w = 256;
  int families = 4;
  int min_glyphs = 3;
  int max_glyphs = 6;

  void validate() const {
    if (frame_h <= 0 || frame_w <= 0 || channels <= 0 || world_w <= 0 || families <= 0) {
      throw ConfigError("world config: dimensions must be positive");
    }
    if (channels != 1) throw ConfigError("world config: only single-channel worlds are supported");
    if (world_w < 4 * frame_w) throw ConfigError("world config: world_w must be at least 4 * frame_w");
    if (min_glyphs < 0 || max_glyphs < min_glyphs) throw ConfigError("world config: bad glyph range");
  }
};

struct ObjectMark {
  int column = 0;
  int row = 0;
  int glyph = 0;
};

/// A panoramic strip the camera slides over. Pixel values are multiples of
/// 1/255 generated with integer arithmetic, so worlds are bit-exact.
struct World {
  std::uint64_t seed = 0;
  int family = 0;
  int height = 0;
  int width = 0;
  std::vector<float> strip;  // height x width, row-major
  std::vector<ObjectMark> marks;

  float at(int row, int col) const { return strip[static_cast<std::size_t>(row) * width + col]; }
};

enum class TrajectoryKind { pan, leave_return, still };

inline const char* to_string(TrajectoryKind k) {
  switch (k) {
    case TrajectoryKind::pan: return "pan";
    case TrajectoryKind::leave_return: return "leave_return";
    case TrajectoryKind::still: return "static";
  }
  return "?";
}

// Motion ids used as the discrete motion condition.
enum MotionId : int { kMotionStatic = 0, kMotionPanRight = 1, kMotionPanLeft = 2, kMotionLeaveReturn = 3 };
inline constexpr int kMotionVocab = 4;

struct CameraTrajectory {
  std::vector<int> offsets;
  int switch_time = -1;  // -1 when the trajectory has no return leg
  TrajectoryKind kind = TrajectoryKind::pan;

  int length() const { return static_cast<int>(offsets.size()); }
};

/// Discrete stand-in for a text prompt. A null condition ignores the ids.
struct SceneCondition {
  int scene_id = 0;
  int motion_id = 0;
  bool is_null = false;

  static SceneCondition null() { return {0, 0, true}; }

  friend bool operator==(const SceneCondition& a, const SceneCondition& b) {
    if (a.is_null || b.is_null) return a.is_null == b.is_null;
    return a.scene_id == b.scene_id && a.motion_id == b.motion_id;
  }
};

/// T x H x W x C frames in [0,1].
struct VideoClip {
  int frames = 0;
  int height = 0;
  int width = 0;
  int channels = 1;
  std::vector<float> data;
  SceneCondition condition;
  std::optional<CameraTrajectory> trajectory;

  VideoClip() = default;
  VideoClip(int t, int h, int w, int c) : frames(t), height(h), width(w), channels(c), data(static_cast<std::size_t>(t) * h * w * c, 0.0f) {}

  std::size_t frame_size() const { return static_cast<std::size_t>(height) * width * channels; }
  std::span<float> frame(int i) { return {data.data() + i * frame_size(), frame_size()}; }
  std::span<const float> frame(int i) const { return {data.data() + i * frame_size(), frame_size()}; }
  float& at(int t, int r, int c, int ch = 0) {
    return data[((static_cast<std::size_t>(t) * height + r) * width + c) * channels + ch];
  }
  float at(int t, int r, int c, int ch = 0) const {
    return data[((static_cast<std::size_t>(t) * height + r) * width + c) * channels + ch];
  }

  /// Frames [begin, begin+count); the trajectory is sliced alongside.
  VideoClip slice(int begin, int count) const {
    if (begin < 0 || count < 0 || begin + count > frames) throw BoundsError("VideoClip::slice out of range");
    VideoClip out(count, height, width, channels);
    std::copy_n(data.begin() + static_cast<std::ptrdiff_t>(begin * frame_size()), count * frame_size(), out.data.begin());
    out.condition = condition;
    if (trajectory) {
      CameraTrajectory t;
      t.kind = trajectory->kind;
      t.offsets.assign(trajectory->offsets.begin() + begin, trajectory->offsets.begin() + begin + count);
      out.trajectory = t;
    }
    return out;
  }

  VideoClip reversed() const {
    VideoClip out(frames, height, width, channels);
    for (int i = 0; i < frames; ++i) {
      std::copy(frame(frames - 1 - i).begin(), frame(frames - 1 - i).end(), out.frame(i).begin());
    }
    out.condition = condition;
    if (trajectory) {
      CameraTrajectory t = *trajectory;
      std::reverse(t.offsets.begin(), t.offsets.end());
      t.switch_time = -1;
      out.trajectory = t;
    }
    return out;
  }

  /// Concatenates frames of another clip with matching geometry.
  void append(const VideoClip& other) {
    if (other.height != height || other.width != width || other.channels != channels) {
      throw ShapeError("VideoClip::append: geometry mismatch");
    }
    data.insert(data.end(), other.data.begin(), other.data.end());
    frames += other.frames;
  }

  bool frames_equal(int a, const VideoClip& other, int b) const {
    return std::equal(frame(a).begin(), frame(a).end(), other.frame(b).begin());
  }
};

namespace detail {

// 5x5 glyph bitmaps (rows top to bottom, bit 4 = leftmost column).
inline constexpr std::array<std::array<std::uint8_t, 5>, 8> kGlyphs = {{
    {0b11111, 0b10001, 0b10101, 0b10001, 0b11111},
    {0b00100, 0b01110, 0b11111, 0b01110, 0b00100},
    {0b10001, 0b01010, 0b00100, 0b01010, 0b10001},
    {0b11100, 0b10000, 0b11111, 0b00001, 0b00111},
    {0b01110, 0b10001, 0b10001, 0b10001, 0b01110},
    {0b11111, 0b00100, 0b00100, 0b00100, 0b11111},
    {0b10101, 0b01010, 0b10101, 0b01010, 0b10101},
    {0b00001, 0b00011, 0b00111, 0b01111, 0b11111},
}};

inline constexpr std::array<int, 4> kCellSizes = {4, 6, 8, 12};

inline int lattice_value(std::uint64_t seed, int octave, int i, int j) {
  const std::uint64_t h = hash_combine(hash_combine(seed, static_cast<std::uint64_t>(octave)),
                                       (static_cast<std::uint64_t>(static_cast<std::uint32_t>(i)) << 32) |
                                           static_cast<std::uint32_t>(j));
  return static_cast<int>(h & 255u);
}

// Integer bilinear value noise in [0, 255].
inline int value_noise(std::uint64_t seed, int octave, int cell, int r, int c) {
  const int i0 = r / cell;
  const int j0 = c / cell;
  const int fr = r % cell;
  const int fc = c % cell;
  const int v00 = lattice_value(seed, octave, i0, j0);
  const int v01 = lattice_value(seed, octave, i0, j0 + 1);
  const int v10 = lattice_value(seed, octave, i0 + 1, j0);
  const int v11 = lattice_value(seed, octave, i0 + 1, j0 + 1);
  const int top = v00 * (cell - fc) + v01 * fc;
  const int bot = v10 * (cell - fc) + v11 * fc;
  return (top * (cell - fr) + bot * fr) / (cell * cell);
}

}  // namespace detail

inline World build_world(std::uint64_t seed, const WorldConfig& cfg) {
  cfg.validate();
  World w;
  w.seed = seed;
  w.family = static_cast<int>(mix64(seed ^ 0x5ca1ab1eULL) % static_cast<std::uint64_t>(cfg.families));
  w.height = cfg.frame_h;
  w.width = cfg.world_w;
  const int cell = detail::kCellSizes[static_cast<std::size_t>(w.family) % detail::kCellSizes.size()];
  std::vector<int> pixels(static_cast<std::size_t>(w.height) * w.width);
  for (int r = 0; r < w.height; ++r) {
    for (int c = 0; c < w.width; ++c) {
      const int coarse = detail::value_noise(seed, 0, cell, r, c);
      const int fine = detail::value_noise(seed, 1, 2, r, c);
      pixels[static_cast<std::size_t>(r) * w.width + c] = (3 * coarse + fine) / 4;
    }
  }
  const std::uint64_t gh = hash_combine(seed, 0x91f3ULL);
  const int span = cfg.max_glyphs - cfg.min_glyphs + 1;
  const int n_glyphs = cfg.min_glyphs + static_cast<int>(gh % static_cast<std::uint64_t>(span));
  const int slot = w.width / std::max(n_glyphs, 1);
  for (int g = 0; g < n_glyphs; ++g) {
    const std::uint64_t h = hash_combine(gh, static_cast<std::uint64_t>(g) + 1);
    ObjectMark mark;
    mark.glyph = static_cast<int>(h % detail::kGlyphs.size());
    mark.column = g * slot + static_cast<int>((h >> 8) % static_cast<std::uint64_t>(std::max(slot - 5, 1)));
    mark.row = static_cast<int>((h >> 24) % static_cast<std::uint64_t>(std::max(w.height - 5, 1)));
    const auto& bitmap = detail::kGlyphs[static_cast<std::size_t>(mark.glyph)];
    for (int dr = 0; dr < 5 && mark.row + dr < w.height; ++dr) {
      for (int dc = 0; dc < 5 && mark.column + dc < w.width; ++dc) {
        const bool on = (bitmap[dr] >> (4 - dc)) & 1u;
        pixels[static_cast<std::size_t>(mark.row + dr) * w.width + mark.column + dc] = on ? 255 : 0;
      }
    }
    w.marks.push_back(mark);
  }
  w.strip.resize(pixels.size());
  for (std::size_t i = 0; i < pixels.size(); ++i) w.strip[i] = static_cast<float>(pixels[i]) / 255.0f;
  return w;
}

inline int motion_id_for(const CameraTrajectory& traj) {
  switch (traj.kind) {
    case TrajectoryKind::still: return kMotionStatic;
    case TrajectoryKind::leave_return: return kMotionLeaveReturn;
    case TrajectoryKind::pan:
      if (traj.offsets.size() >= 2 && traj.offsets.back() < traj.offsets.front()) return kMotionPanLeft;
      return kMotionPanRight;
  }
  return kMotionStatic;
}

/// Frame i is the frame_w-wide window of the strip starting at offsets[i].
inline VideoClip render_clip(const World& world, const CameraTrajectory& traj, int frame_w) {
  const int max_offset = world.width - frame_w;
  VideoClip clip(traj.length(), world.height, frame_w, 1);
  for (int t = 0; t < traj.length(); ++t) {
    const int off = traj.offsets[static_cast<std::size_t>(t)];
    if (off < 0 || off > max_offset) {
      throw BoundsError("render_clip: offset " + std::to_string(off) + " outside [0, " + std::to_string(max_offset) + "]");
    }
    for (int r = 0; r < world.height; ++r) {
      for (int c = 0; c < frame_w; ++c) clip.at(t, r, c) = world.at(r, off + c);
    }
  }
  clip.condition = SceneCondition{world.family, motion_id_for(traj), false};
  clip.trajectory = traj;
  return clip;
}

inline CameraTrajectory pan_trajectory(int start, int speed, int length) {
  CameraTrajectory t;
  t.kind = speed == 0 ? TrajectoryKind::still : TrajectoryKind::pan;
  for (int i = 0; i < length; ++i) t.offsets.push_back(start + i * speed);
  return t;
}

/// Out-and-back path: offsets ramp linearly from `start` by `displacement`
/// (signed) over length/2 frames, then mirror around switch_time = length/2.
inline CameraTrajectory leave_return_trajectory(int length, int displacement, int start = 0) {
  if (length < 4 || length % 2 != 0) {
    throw ConfigError("leave-return trajectory needs an even length >= 4 (got " + std::to_string(length) + ")");
  }
  CameraTrajectory t;
  t.kind = TrajectoryKind::leave_return;
  const int half = length / 2;
  t.switch_time = half;
  t.offsets.resize(static_cast<std::size_t>(length));
  for (int i = 0; i <= half; ++i) t.offsets[static_cast<std::size_t>(i)] = start + (i * displacement) / half;
  for (int i = 1; half + i < length; ++i) t.offsets[static_cast<std::size_t>(half + i)] = t.offsets[static_cast<std::size_t>(half - i)];
  return t;
}

/// Leave-and-return clip starting at offset 0 and reaching max_offset at the
/// switch time. `max_step` bounds the per-frame camera speed.
inline VideoClip make_leave_return(const World& world, int length, int max_offset, int frame_w, int max_step = 8) {
  if (length < 4 || length % 2 != 0) throw ConfigError("make_leave_return: length must be even and >= 4");
  if (max_offset < 1 || max_offset > world.width - frame_w || max_offset > (length / 2) * max_step) {
    throw ConfigError("make_leave_return: max_offset " + std::to_string(max_offset) + " unreachable");
  }
  return render_clip(world, leave_return_trajectory(length, max_offset, 0), frame_w);
}

/// Palindrome check on the trajectory: offsets[s+i] == offsets[s-i].
inline bool is_palindromic(const CameraTrajectory& t) {
  if (t.switch_time < 0) return false;
  for (int i = 1; t.switch_time + i < t.length() && t.switch_time - i >= 0; ++i) {
    if (t.offsets[static_cast<std::size_t>(t.switch_time + i)] != t.offsets[static_cast<std::size_t>(t.switch_time - i)]) return false;
  }
  return true;
}

/// Pixel-level palindrome check: frames after the switch equal the
/// time-reversed frames before it.
inline bool frames_palindromic(const VideoClip& clip, int switch_time) {
  for (int i = 1; switch_time + i < clip.frames && switch_time - i >= 0; ++i) {
    if (!clip.frames_equal(switch_time + i, clip, switch_time - i)) return false;
  }
  return true;
}

struct DatasetConfig {
  WorldConfig world;
  int clip_frames = 12;
  double p_pan = 0.5;
  double p_leave_return = 0.3;
  double p_static = 0.2;
  std::vector<int> speeds = {1, 2, 3, 4};

  void validate() const {
    world.validate();
    if (clip_frames < 1) throw ConfigError("dataset: clip_frames must be positive");
    if (p_pan < 0 || p_leave_return < 0 || p_static < 0 || p_pan + p_leave_return + p_static <= 0) {
      throw ConfigError("dataset: trajectory proportions must be non-negative with a positive sum");
    }
    if (p_leave_return > 0 && (clip_frames < 4 || clip_frames % 2 != 0)) {
      throw ConfigError("dataset: leave_return clips need an even clip_frames >= 4");
    }
    if (speeds.empty()) throw ConfigError("dataset: speeds must not be empty");
    for (int s : speeds) {
      if (s < 1 || s * clip_frames > world.world_w - world.frame_w) {
        throw ConfigError("dataset: speed " + std::to_string(s) + " does not fit the world width");
      }
    }
  }
};

/// Clip `index` of the stream defined by `seed`; each index is independently
/// seeded, so shards can be generated in any order.
inline VideoClip make_clip(std::uint64_t seed, std::uint64_t index, const DatasetConfig& cfg) {
  const std::uint64_t h = hash_combine(seed, index);
  const World world = build_world(derive_seed(h, "world"), cfg.world);
  const double total = cfg.p_pan + cfg.p_leave_return + cfg.p_static;
  const double u = unit_from_hash(derive_seed(h, "kind")) * total;
  const int speed = cfg.speeds[derive_seed(h, "speed") % cfg.speeds.size()];
  const bool rightward = (derive_seed(h, "dir") & 1u) == 0;
  const int max_off = cfg.world.world_w - cfg.world.frame_w;
  const std::uint64_t start_hash = derive_seed(h, "start");
  const int T = cfg.clip_frames;

  CameraTrajectory traj;
  if (u < cfg.p_pan) {
    const int travel = speed * (T - 1);
    const int start = static_cast<int>(start_hash % static_cast<std::uint64_t>(max_off - travel + 1));
    traj = rightward ? pan_trajectory(start, speed, T) : pan_trajectory(start + travel, -speed, T);
  } else if (u < cfg.p_pan + cfg.p_leave_return) {
    const int disp = speed * (T / 2);
    const int start = static_cast<int>(start_hash % static_cast<std::uint64_t>(max_off - disp + 1));
    traj = rightward ? leave_return_trajectory(T, disp, start) : leave_return_trajectory(T, -disp, start + disp);
  } else {
    traj = pan_trajectory(static_cast<int>(start_hash % static_cast<std::uint64_t>(max_off + 1)), 0, T);
  }
  return render_clip(world, traj, cfg.world.frame_w);
}

inline std::vector<VideoClip> make_dataset(std::uint64_t seed, int n, const DatasetConfig& cfg) {
  if (n <= 0) throw ConfigError("make_dataset: n must be positive");
  cfg.validate();
  std::vector<VideoClip> clips;
  clips.reserve(static_cast<std::size_t>(n));
  for (int i = 0; i < n; ++i) clips.push_back(make_clip(seed, static_cast<std::uint64_t>(i), cfg));
  return clips;
}

}  // namespace mag
