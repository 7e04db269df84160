#pragma once

#include <algorithm>
#include <chrono>
#include <cstdint>
#include <string>
#include <vector>

#include "json.hpp"
#include "mag/flow.hpp"
#include "mag/memory.hpp"

namespace mag {

enum class StreamModeKind { mag, full_cache, window };

struct StreamMode {
  StreamModeKind kind = StreamModeKind::mag;
  int window_frames = 0;

  static StreamMode mag() { return {StreamModeKind::mag, 0}; }
  static StreamMode full() { return {StreamModeKind::full_cache, 0}; }
  static StreamMode window(int frames) {
    if (frames < 1) throw ConfigError("window mode needs at least one frame");
    return {StreamModeKind::window, frames};
  }

  /// "mag", "full" or "window:W" (W in frames).
  static StreamMode parse(const std::string& s) {
    if (s == "mag") return mag();
    if (s == "full" || s == "full_cache") return full();
    if (s.rfind("window:", 0) == 0) {
      try {
        std::size_t used = 0;
        const int w = std::stoi(s.substr(7), &used);
        if (used != s.size() - 7) throw std::invalid_argument(s);
        return window(w);
      } catch (const std::logic_error&) {
        throw ConfigError("bad window size in stream mode '" + s + "'");
      }
    }
    throw ConfigError("unknown stream mode '" + s + "' (expected mag, full or window:W)");
  }

  RetentionPolicy policy() const {
    switch (kind) {
      case StreamModeKind::mag: return RetentionPolicy::last_frame();
      case StreamModeKind::full_cache: return RetentionPolicy::all();
      case StreamModeKind::window: return RetentionPolicy::window(window_frames);
    }
    return RetentionPolicy::all();
  }

  std::string name() const {
    switch (kind) {
      case StreamModeKind::mag: return "mag";
      case StreamModeKind::full_cache: return "full";
      case StreamModeKind::window: return "window:" + std::to_string(window_frames);
    }
    return "?";
  }
};

struct PerfReport {
  int block_frames = 0;
  int layers = 0;
  std::vector<double> block_seconds;
  std::vector<int> cache_entries;            // per layer, after each block
  std::vector<std::size_t> cache_bytes;      // all layers, after each block
  std::vector<std::size_t> cache_bytes_per_layer;
  int frames_emitted = 0;

  void record(double seconds, const KVCache& cache, int frames) {
    block_seconds.push_back(seconds);
    cache_entries.push_back(cache.entries());
    cache_bytes.push_back(cache.total_bytes());
    cache_bytes_per_layer.push_back(cache.bytes_per_layer());
    frames_emitted += frames;
  }
};

struct PerfSummary {
  double steady_fps = 0.0;
  double growth_bytes_per_block = 0.0;  // median per-block increment, all layers
  double median_block_seconds = 0.0;
  int blocks = 0;
  int frames = 0;
  std::size_t final_cache_bytes = 0;

  nlohmann::json to_json() const {
    return {{"steady_fps", steady_fps},
            {"growth_bytes_per_block", growth_bytes_per_block},
            {"median_block_seconds", median_block_seconds},
            {"blocks", blocks},
            {"frames", frames},
            {"final_cache_bytes", final_cache_bytes}};
  }
};

inline double median(std::vector<double> v) {
  if (v.empty()) return 0.0;
  std::sort(v.begin(), v.end());
  const std::size_t n = v.size();
  return n % 2 ? v[n / 2] : 0.5 * (v[n / 2 - 1] + v[n / 2]);
}

/// Steady-state numbers with the first block treated as warmup.
inline PerfSummary perf_summary(const PerfReport& r) {
  const int n = static_cast<int>(r.block_seconds.size());
  if (n < 2) throw ConfigError("perf_summary: at least two blocks are required");
  PerfSummary s;
  s.blocks = n;
  s.frames = r.frames_emitted;
  double t = 0.0;
  for (int i = 1; i < n; ++i) t += r.block_seconds[static_cast<std::size_t>(i)];
  s.steady_fps = t > 0.0 ? static_cast<double>((n - 1) * r.block_frames) / t : 0.0;
  std::vector<double> inc;
  for (int i = 1; i < n; ++i) {
    inc.push_back(static_cast<double>(r.cache_bytes[static_cast<std::size_t>(i)]) -
                  static_cast<double>(r.cache_bytes[static_cast<std::size_t>(i - 1)]));
  }
  s.growth_bytes_per_block = median(inc);
  s.median_block_seconds = median(std::vector<double>(r.block_seconds.begin() + 1, r.block_seconds.end()));
  s.final_cache_bytes = r.cache_bytes.back();
  return s;
}

inline nlohmann::json perf_to_json(const PerfReport& r) {
  nlohmann::json j = {{"block_frames", r.block_frames},    {"layers", r.layers},
                      {"block_seconds", r.block_seconds},  {"cache_entries", r.cache_entries},
                      {"cache_bytes", r.cache_bytes},      {"cache_bytes_per_layer", r.cache_bytes_per_layer},
                      {"frames_emitted", r.frames_emitted}};
  if (r.block_seconds.size() >= 2) j["summary"] = perf_summary(r).to_json();
  return j;
}

/// One generation stream: the generator denoises blocks against the cache,
/// the memory model re-encodes every finished block into it.
class StreamSession {
 public:
  StreamSession(const DiffusionTransformer& generator, const DiffusionTransformer& memory, StreamMode mode,
                int sample_steps = 4, int horizon_frames = 1 << 16)
      : generator_(&generator),
        memory_(&memory),
        mode_(mode),
        cache_(memory.config().layers, memory.config().d_model, mode.policy()),
        steps_(sample_steps),
        horizon_(horizon_frames) {
    if (generator.config().frame_tokens() != memory.config().frame_tokens() ||
        generator.config().block_frames != memory.config().block_frames ||
        generator.config().d_model != memory.config().d_model || generator.config().layers != memory.config().layers) {
      throw ConfigError("stream: generator and memory model geometry differ");
    }
    perf_.block_frames = block_frames();
    perf_.layers = memory.config().layers;
  }

  const KVCache& cache() const { return cache_; }
  const StreamMode& mode() const { return mode_; }
  const PerfReport& perf() const { return perf_; }
  int frame_clock() const { return clock_; }
  int block_frames() const { return memory_->config().block_frames; }

  /// Denoises the next block from `noise` without touching the cache.
  Matrix generate_block(const SceneCondition& cond, const Matrix& noise) const {
    check_horizon(clock_, block_frames(), horizon_);
    NoGradGuard guard;
    return few_step_sample(*generator_, cond, CacheView::whole(cache_), noise, placement(), steps_).value();
  }

  /// Encodes clean block tokens at the current clock into the cache and
  /// advances the clock by one block.
  void commit(const Matrix& clean_tokens) {
    check_horizon(clock_, block_frames(), horizon_);
    cache_.append(encode_block(*memory_, clean_tokens, CacheView::whole(cache_), placement()));
    clock_ += block_frames();
  }

  /// Memorize phase: every block of `frames` goes into the cache, nothing is emitted.
  void ingest_history(const VideoClip& frames) {
    const int b = block_frames();
    if (frames.frames % b != 0) throw ShapeError("ingest_history: frame count not divisible by block size");
    for (int j = 0; j < frames.frames / b; ++j) commit(frames_to_tokens(frames, j * b, b, memory_->config()));
  }

  /// Generates n_blocks blocks; noise for block j comes from derive_seed(seed, j).
  VideoClip stream_generate(const SceneCondition& cond, int n_blocks, std::uint64_t seed) {
    if (n_blocks < 1) throw ConfigError("stream_generate: n_blocks must be >= 1");
    const ModelConfig& cfg = memory_->config();
    const int b = block_frames();
    VideoClip out(n_blocks * b, cfg.frame_h, cfg.frame_w, cfg.channels);
    out.condition = cond;
    for (int j = 0; j < n_blocks; ++j) {
      const auto start = std::chrono::steady_clock::now();
      Rng rng(hash_combine(seed, static_cast<std::uint64_t>(j)));
      const Matrix x = generate_block(cond, gaussian_like(b * cfg.frame_tokens(), cfg.patch_dim(), rng));
      commit(x);
      const double dt = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
      tokens_to_frames(x, out, j * b, cfg);
      perf_.record(dt, cache_, b);
    }
    return out;
  }

 private:
  Placement placement() const { return frame_placement(clock_, memory_->config().frame_tokens()); }

  const DiffusionTransformer* generator_;
  const DiffusionTransformer* memory_;
  StreamMode mode_;
  KVCache cache_;
  int steps_;
  int horizon_;
  int clock_ = 0;
  PerfReport perf_;
};

}  // namespace mag
