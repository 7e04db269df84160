#pragma once

#include <cstdint>
#include <vector>

#include "mag/flow.hpp"
#include "mag/jsonl.hpp"
#include "mag/metrics.hpp"
#include "mag/optim.hpp"

namespace mag {

/// Noise-then-clean training sequence for the memory model.
struct MemoryBatch {
  MemoryLayout layout;
  SequenceInput sequence;
  AttentionMask mask;
  Matrix targets;  // velocity targets for the noise segment
  std::vector<Scalar> block_t;
  std::int64_t start_offset = 0;
};

/// Frames kept when a clip is cut to a whole number of blocks.
inline int whole_block_frames(int frames, int b) { return (frames / b) * b; }

/// Builds the batch from explicit per-block timesteps, noise (segment-shaped)
/// and rotary start offset.
inline MemoryBatch assemble_memory_batch(const VideoClip& clip, const ModelConfig& cfg, const std::vector<Scalar>& block_t,
                                         const Matrix& noise, std::int64_t start_offset) {
  const int b = cfg.block_frames;
  if (clip.frames < b || clip.frames % b != 0) {
    throw ShapeError("memory batch: clip length " + std::to_string(clip.frames) + " not divisible by block size " +
                     std::to_string(b));
  }
  MemoryBatch batch;
  batch.layout = {clip.frames / b, b, cfg.frame_tokens()};
  const MemoryLayout& L = batch.layout;
  if (static_cast<int>(block_t.size()) != L.n_blocks) throw ShapeError("memory batch: one timestep per block required");
  const Matrix clean = frames_to_tokens(clip, 0, clip.frames, cfg);
  if (noise.rows() != clean.rows() || noise.cols() != clean.cols()) throw ShapeError("memory batch: noise shape mismatch");

  Matrix noisy(clean.rows(), clean.cols());
  batch.targets = clean - noise;
  std::vector<TokenCondition> groups;
  std::vector<int> frame_group;
  for (int j = 0; j < L.n_blocks; ++j) {
    const Scalar t = block_t[static_cast<std::size_t>(j)];
    const int r0 = L.noise_begin(j);
    const int rows = L.block_tokens();
    noisy.middleRows(r0, rows) = (Scalar(1) - t) * noise.middleRows(r0, rows) + t * clean.middleRows(r0, rows);
    groups.push_back({t, SceneCondition::null()});
    for (int k = 0; k < b; ++k) frame_group.push_back(j);
  }
  const int f = cfg.frame_tokens();
  // The noise segment mirrors the clean segment's frames and positions.
  const auto noise_seq = make_sequence(Tensor::constant(std::move(noisy)), f, 0, start_offset, groups, frame_group);
  const auto clean_seq = make_sequence(Tensor::constant(clean), f, 0, start_offset, {{Scalar(1), SceneCondition::null()}});
  batch.sequence = concat_sequences(noise_seq, clean_seq);
  batch.mask = build_memory_mask(L.n_blocks, b, f);
  batch.block_t = block_t;
  batch.start_offset = start_offset;
  return batch;
}

struct MemoryBatchOptions {
  std::int64_t max_start_offset = 2048;  // rotary start drawn from [0, max]
};

inline MemoryBatch build_memory_batch(const VideoClip& clip, const ModelConfig& cfg, Rng& rng,
                                      const MemoryBatchOptions& opt = {}) {
  const int b = cfg.block_frames;
  if (clip.frames < b || clip.frames % b != 0) {
    throw ShapeError("memory batch: clip length " + std::to_string(clip.frames) + " not divisible by block size " +
                     std::to_string(b));
  }
  std::vector<Scalar> ts;
  for (int j = 0; j < clip.frames / b; ++j) ts.push_back(sample_timestep(rng));
  const std::int64_t start = opt.max_start_offset > 0
                                 ? static_cast<std::int64_t>(rng.uniform_int(0, static_cast<int>(opt.max_start_offset))) *
                                       cfg.frame_tokens()
                                 : 0;
  const int rows = clip.frames * cfg.frame_tokens();
  const Matrix noise = gaussian_like(rows, cfg.patch_dim(), rng);
  return assemble_memory_batch(clip, cfg, ts, noise, start);
}

/// Reconstruction loss: the noise segment only.
inline Tensor memory_loss(const DiffusionTransformer& model, const MemoryBatch& batch) {
  const auto out = model.forward(batch.sequence, CacheView::none(), batch.mask);
  const Tensor loss = mse_loss(slice_rows(out.velocity, 0, batch.layout.segment_tokens()), batch.targets);
  require_finite(loss, "memory loss");
  return loss;
}

// ---------------------------------------------------------------------------
// Sequential encode / decode used at inference time.

/// Memory-model pass over a clean block: it sees itself plus the cache and
/// returns its per-layer K/V for retention.
inline BlockKV encode_block(const DiffusionTransformer& model, const Matrix& clean_tokens, CacheView cache,
                            const Placement& at) {
  NoGradGuard guard;
  const AttentionMask mask = build_inference_mask(cache.size(), static_cast<int>(clean_tokens.rows()));
  return forward_denoise(model, Tensor::constant(clean_tokens), Scalar(1), SceneCondition::null(), cache, mask,
                         at.first_frame, at.start_position, true)
      .kv;
}

/// Rebuilds block frames from the retained cache (which already holds the
/// block's own retained frame), sampling from `noise`.
inline Matrix reconstruct_block(const DiffusionTransformer& model, CacheView retained, const Matrix& noise,
                                const Placement& at, int steps = 4) {
  if (retained.size() == 0 && at.first_frame >= model.config().block_frames) {
    throw CacheError("reconstruct_block: empty retained cache for a block after the first");
  }
  NoGradGuard guard;
  return few_step_sample(model, SceneCondition::null(), retained, noise, at, steps, PositionRule::may_overlap).value();
}

struct MemoryTrainConfig {
  int steps = 2000;
  int batch = 1;
  AdamConfig adam{};
  std::uint64_t seed = 0;
  MemoryBatchOptions batch_options{};
  int log_every = 1;
};

struct TrainResult {
  std::vector<double> losses;
  int steps = 0;
};

/// Minimizes the reconstruction loss with the condition forced null. Clips are
/// cut to a whole number of blocks.
inline TrainResult train_memory(DiffusionTransformer& model, const std::vector<VideoClip>& dataset,
                                const MemoryTrainConfig& cfg, const MetricSink& sink = {}) {
  if (dataset.empty()) throw ConfigError("train_memory: empty dataset");
  if (cfg.steps < 0 || cfg.batch < 1) throw ConfigError("train_memory: steps >= 0 and batch >= 1 required");
  const int b = model.config().block_frames;
  Rng rng(cfg.seed);
  Adam opt(model.parameters(), cfg.adam);
  DivergenceMonitor monitor("train_memory");
  TrainResult result;
  for (int step = 0; step < cfg.steps; ++step) {
    opt.zero_grad();
    double total = 0.0;
    for (int k = 0; k < cfg.batch; ++k) {
      const auto& clip = dataset[static_cast<std::size_t>(rng.uniform_int(0, static_cast<int>(dataset.size()) - 1))];
      const int keep = whole_block_frames(clip.frames, b);
      if (keep == 0) throw ShapeError("train_memory: clip shorter than one block");
      const MemoryBatch batch = build_memory_batch(clip.slice(0, keep), model.config(), rng, cfg.batch_options);
      const Tensor loss = memory_loss(model, batch);
      backward(scale(loss, Scalar(1) / static_cast<Scalar>(cfg.batch)));
      total += static_cast<double>(loss.item());
    }
    opt.step();
    const double avg = total / cfg.batch;
    result.losses.push_back(avg);
    monitor.observe(avg);
    if (sink && (step % std::max(1, cfg.log_every) == 0 || step + 1 == cfg.steps)) {
      sink({step, "memory_fm", avg, std::nullopt, std::nullopt, std::nullopt});
    }
  }
  result.steps = cfg.steps;
  return result;
}

/// Reconstruction loss on a fixed set of batches (no update).
inline double memory_validation_loss(const DiffusionTransformer& model, const std::vector<MemoryBatch>& batches) {
  NoGradGuard guard;
  double total = 0.0;
  for (const auto& b : batches) total += static_cast<double>(memory_loss(model, b).item());
  return batches.empty() ? 0.0 : total / static_cast<double>(batches.size());
}

struct ReconstructionReport {
  int b = 0;
  double psnr = 0.0;
  double ssim = 0.0;
  double mse_x100 = 0.0;
  int n_clips = 0;
};

/// Encodes each block under last-frame retention, rebuilds it from the
/// retained cache, and averages per-frame metrics over all blocks and clips.
inline VideoClip reconstruct_clip(const DiffusionTransformer& model, const VideoClip& clip, std::uint64_t seed, int steps = 4) {
  const ModelConfig& cfg = model.config();
  const int b = cfg.block_frames;
  const int f = cfg.frame_tokens();
  if (clip.frames % b != 0) throw ShapeError("reconstruct_clip: clip length not divisible by block size");
  KVCache cache(cfg.layers, cfg.d_model, RetentionPolicy::last_frame());
  VideoClip out(clip.frames, clip.height, clip.width, clip.channels);
  Rng rng(seed);
  for (int j = 0; j < clip.frames / b; ++j) {
    const Placement at = frame_placement(j * b, f);
    cache.append(encode_block(model, frames_to_tokens(clip, j * b, b, cfg), CacheView::whole(cache), at));
    const Matrix noise = gaussian_like(b * f, cfg.patch_dim(), rng);
    tokens_to_frames(reconstruct_block(model, CacheView::whole(cache), noise, at, steps), out, j * b, cfg);
  }
  return out;
}

inline ReconstructionReport eval_reconstruction(const DiffusionTransformer& model, const std::vector<VideoClip>& testset,
                                                std::uint64_t seed = 0, int steps = 4) {
  const int b = model.config().block_frames;
  QualityMetrics sum;
  int n = 0;
  for (std::size_t c = 0; c < testset.size(); ++c) {
    const int keep = whole_block_frames(testset[c].frames, b);
    if (keep == 0) continue;
    const VideoClip gt = testset[c].slice(0, keep);
    const VideoClip rec = reconstruct_clip(model, gt, hash_combine(seed, c), steps);
    for (int t = 0; t < keep; ++t) sum.accumulate(frame_mse(rec, t, gt, t), frame_ssim(rec, t, gt, t));
    ++n;
  }
  const QualityMetrics avg = sum.averaged();
  return {b, avg.psnr, avg.ssim, avg.mse * 100.0, n};
}

}  // namespace mag
