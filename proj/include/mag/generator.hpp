#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <utility>
#include <vector>

#include "mag/flow.hpp"
#include "mag/jsonl.hpp"
#include "mag/memory.hpp"
#include "mag/optim.hpp"

namespace mag {

struct TrainSchedule {
  int k = 7;                    // clips per long video
  double lambda = 0.6;          // null-condition probability for clips i > 1
  int student_per_generator = 5;
  int updates = 600;            // student + generator updates
  int clip_frames = 12;
  int sample_steps = 4;
  Scalar lr_generator = Scalar(2e-5);
  Scalar lr_student = Scalar(4e-6);
  Scalar grad_clip = Scalar(1);
  DmdConfig dmd{};
  int horizon_frames = 1 << 16;
  std::uint64_t seed = 0;
  int checkpoint_every = 0;     // generator updates between checkpoint hooks; 0 = never

  void validate() const {
    if (k < 1) throw ConfigError("schedule: k must be >= 1");
    if (lambda < 0.0 || lambda > 1.0) throw ConfigError("schedule: lambda must be in [0,1]");
    if (student_per_generator < 1) throw ConfigError("schedule: student:generator ratio must be >= 1");
    if (updates < 0) throw ConfigError("schedule: updates must be >= 0");
    if (clip_frames < 1 || sample_steps < 1) throw ConfigError("schedule: clip_frames and sample_steps must be >= 1");
  }
};

/// Frames of a clip placed after `clips_before` earlier clips.
inline int clip_first_frame(int clip_index0, int clip_frames) { return clip_index0 * clip_frames; }

/// Generates one clip block by block against `cache`, which the memory model
/// extends after every block. Returns the clip tokens; when gradients are
/// enabled the result is differentiable w.r.t. the generator (cache entries
/// enter as constants).
inline Tensor generate_clip(const DiffusionTransformer& generator, const DiffusionTransformer& memory, KVCache& cache,
                            const SceneCondition& cond, int first_frame, int frames, Rng& noise_rng, int steps,
                            int horizon_frames) {
  const ModelConfig& cfg = generator.config();
  const int b = cfg.block_frames;
  const int f = cfg.frame_tokens();
  if (frames % b != 0) throw ShapeError("generate_clip: clip length not divisible by block size");
  check_horizon(first_frame, frames, horizon_frames);
  std::vector<Tensor> blocks;
  for (int j = 0; j < frames / b; ++j) {
    const Placement at = frame_placement(first_frame + j * b, f);
    const Matrix noise = gaussian_like(b * f, cfg.patch_dim(), noise_rng);
    Tensor x = few_step_sample(generator, cond, CacheView::whole(cache), noise, at, steps);
    cache.append(encode_block(memory, x.value(), CacheView::whole(cache), at));
    blocks.push_back(std::move(x));
  }
  return blocks.size() == 1 ? blocks.front() : concat_rows(blocks);
}

struct LongRollout {
  std::vector<Matrix> clips;            // tokens per clip
  std::vector<SceneCondition> conds;    // condition each clip was generated under
  std::vector<bool> null_drawn;
  std::vector<int> cache_entries;       // cache size before clip i (index i-1) and after the last clip
  KVCache cache;

  CacheView cache_before(int i) const { return CacheView::prefix(cache, cache_entries[static_cast<std::size_t>(i - 1)]); }
};

/// k clips autoregressively; clip i is conditioned on the compressed cache of
/// clips < i, its condition drawn by history_condition_sample.
inline LongRollout rollout_long(const DiffusionTransformer& generator, const DiffusionTransformer& memory,
                                const SceneCondition& cond, int k, double lambda, int clip_frames, Rng& rng,
                                int steps = 4, int horizon_frames = 1 << 16) {
  if (k < 1) throw ConfigError("rollout_long: k must be >= 1");
  NoGradGuard guard;
  const ModelConfig& cfg = memory.config();
  LongRollout r;
  r.cache = KVCache(cfg.layers, cfg.d_model, RetentionPolicy::last_frame());
  for (int i = 1; i <= k; ++i) {
    bool drawn = false;
    const SceneCondition ci = history_condition_sample(lambda, cond, i, rng, &drawn);
    r.cache_entries.push_back(r.cache.entries());
    Rng noise_rng(rng.next());
    const Tensor x = generate_clip(generator, memory, r.cache, ci, clip_first_frame(i - 1, clip_frames), clip_frames,
                                   noise_rng, steps, horizon_frames);
    r.clips.push_back(x.value());
    r.conds.push_back(ci);
    r.null_drawn.push_back(drawn);
  }
  r.cache_entries.push_back(r.cache.entries());
  return r;
}

/// The frozen critics of the score difference: the teacher scores a clip on
/// its own (no history) and the student scores it after the history cache.
inline Matrix teacher_velocity(const DiffusionTransformer& teacher, const Matrix& xt, Scalar t, const SceneCondition& cond) {
  NoGradGuard guard;
  return predict_velocity(teacher, Tensor::constant(xt), t, cond, CacheView::none(), Placement{0, 0}).value();
}

inline Matrix student_velocity(const DiffusionTransformer& student, const Matrix& xt, Scalar t, const SceneCondition& cond,
                               CacheView history, const Placement& at) {
  NoGradGuard guard;
  return predict_velocity(student, Tensor::constant(xt), t, cond, history, at).value();
}

struct DmdStepInfo {
  int i = 1;
  bool null_drawn = false;
  Scalar t = 0;
  double delta_mean_abs = 0.0;
  double surrogate = 0.0;
  Matrix delta;                    // the frozen direction that was backpropagated
  std::uint64_t noise_seed = 0;    // seeds the sampler noise of clip i
  SceneCondition generated_under;  // condition clip i was generated with
};

/// One generator gradient: roll out clips 1..i-1 without gradients, generate
/// clip i through the differentiable sampler, noise it to a random t, and
/// backpropagate ⟨sg(Δ), x_i⟩ with the sign that moves x_i toward the teacher.
/// Gradients accumulate into the generator's parameters.
inline DmdStepInfo dmd_generator_step(const DiffusionTransformer& generator, const DiffusionTransformer& student,
                                      const DiffusionTransformer& teacher, const DiffusionTransformer& memory,
                                      const SceneCondition& cond, const TrainSchedule& schedule, Rng& rng,
                                      std::optional<int> force_i = std::nullopt) {
  if (schedule.k < 1) throw ConfigError("dmd_generator_step: k must be >= 1");
  DmdStepInfo info;
  info.i = force_i ? *force_i : rng.uniform_int(1, schedule.k);
  if (info.i < 1 || info.i > schedule.k) throw ConfigError("dmd_generator_step: clip index outside 1..k");
  const ModelConfig& cfg = memory.config();

  KVCache cache(cfg.layers, cfg.d_model, RetentionPolicy::last_frame());
  {
    NoGradGuard guard;
    for (int c = 1; c < info.i; ++c) {
      const SceneCondition cc = history_condition_sample(schedule.lambda, cond, c, rng);
      Rng noise_rng(rng.next());
      generate_clip(generator, memory, cache, cc, clip_first_frame(c - 1, schedule.clip_frames), schedule.clip_frames,
                    noise_rng, schedule.sample_steps, schedule.horizon_frames);
    }
  }
  if (info.i > 1 && cache.empty()) throw CacheError("dmd_generator_step: clip i > 1 without a history cache");
  const int history_entries = cache.entries();
  const SceneCondition ci = history_condition_sample(schedule.lambda, cond, info.i, rng, &info.null_drawn);
  const int first = clip_first_frame(info.i - 1, schedule.clip_frames);
  info.noise_seed = rng.next();
  info.generated_under = ci;
  Rng noise_rng(info.noise_seed);
  const Tensor x = generate_clip(generator, memory, cache, ci, first, schedule.clip_frames, noise_rng,
                                 schedule.sample_steps, schedule.horizon_frames);

  info.t = sample_timestep(rng);
  const FlowSample fs = make_flow_sample(x.value(), info.t, rng);
  const Matrix vt = teacher_velocity(teacher, fs.xt, info.t, cond);
  const Matrix vs = student_velocity(student, fs.xt, info.t, cond, CacheView::prefix(cache, history_entries),
                                     frame_placement(first, cfg.frame_tokens()));
  info.delta = dmd_direction(vt, vs, schedule.dmd);
  info.delta_mean_abs = static_cast<double>((vt - vs).cwiseAbs().mean());
  const Tensor loss = dmd_surrogate(x, info.delta);
  info.surrogate = static_cast<double>(loss.item());
  if (x.requires_grad()) backward(loss);
  return info;
}

/// Student flow-matching update data: a generated clip (as data) with the
/// history it was generated after.
inline FmResult student_fm_loss(const DiffusionTransformer& student, const LongRollout& rollout, int i,
                                const SceneCondition& cond, int clip_frames, Rng& rng) {
  const Placement at = frame_placement(clip_first_frame(i - 1, clip_frames), student.config().frame_tokens());
  return fm_loss(student, rollout.clips[static_cast<std::size_t>(i - 1)], cond, rollout.cache_before(i), at, rng);
}

/// Clip indices for generator updates, drawn as shuffled passes over 1..k so
/// every window of k consecutive updates covers each index once.
class ClipIndexSampler {
 public:
  explicit ClipIndexSampler(int k) : k_(k) {
    if (k < 1) throw ConfigError("ClipIndexSampler: k must be >= 1");
  }
  int next(Rng& rng) {
    if (pos_ == bag_.size()) {
      bag_.resize(static_cast<std::size_t>(k_));
      for (int i = 0; i < k_; ++i) bag_[static_cast<std::size_t>(i)] = i + 1;
      for (int i = k_ - 1; i > 0; --i) std::swap(bag_[static_cast<std::size_t>(i)], bag_[static_cast<std::size_t>(rng.uniform_int(0, i))]);
      pos_ = 0;
    }
    return bag_[pos_++];
  }

 private:
  int k_;
  std::vector<int> bag_;
  std::size_t pos_ = 0;
};

struct GeneratorTrainResult {
  int generator_updates = 0;
  int student_updates = 0;
  std::vector<int> i_histogram;  // index 0 unused
  std::vector<int> generator_i;  // sampled clip index per generator update
  int null_draws = 0;
  int history_draws = 0;         // draws with i > 1
  std::vector<double> student_losses;
  std::vector<double> delta_magnitudes;
};

/// Alternates `student_per_generator` student updates with one generator
/// update until `updates` total updates are done. Teacher and memory model
/// are read-only.
inline GeneratorTrainResult train_generator(DiffusionTransformer& generator, DiffusionTransformer& student,
                                            const DiffusionTransformer& teacher, const DiffusionTransformer& memory,
                                            const std::vector<SceneCondition>& conditions, const TrainSchedule& schedule,
                                            const MetricSink& sink = {},
                                            const std::function<void(int)>& checkpoint_hook = {}) {
  schedule.validate();
  if (conditions.empty()) throw ConfigError("train_generator: no conditions to sample");
  Rng rng(schedule.seed);
  Adam gen_opt(generator.parameters(), {schedule.lr_generator, Scalar(0.9), Scalar(0.999), Scalar(1e-8), schedule.grad_clip});
  Adam stu_opt(student.parameters(), {schedule.lr_student, Scalar(0.9), Scalar(0.999), Scalar(1e-8), schedule.grad_clip});
  DivergenceMonitor monitor("train_generator");
  GeneratorTrainResult res;
  res.i_histogram.assign(static_cast<std::size_t>(schedule.k) + 1, 0);
  const int cycle = schedule.student_per_generator + 1;
  ClipIndexSampler clip_index(schedule.k);

  LongRollout rollout;
  SceneCondition rollout_cond;
  for (int u = 0; u < schedule.updates; ++u) {
    const int phase = u % cycle;
    if (phase < schedule.student_per_generator) {
      if (phase == 0) {
        rollout_cond = conditions[static_cast<std::size_t>(rng.uniform_int(0, static_cast<int>(conditions.size()) - 1))];
        rollout = rollout_long(generator, memory, rollout_cond, schedule.k, schedule.lambda, schedule.clip_frames, rng,
                               schedule.sample_steps, schedule.horizon_frames);
      }
      const int i = rng.uniform_int(1, schedule.k);
      stu_opt.zero_grad();
      const FmResult r = student_fm_loss(student, rollout, i, rollout_cond, schedule.clip_frames, rng);
      backward(r.loss);
      stu_opt.step();
      const double v = static_cast<double>(r.loss.item());
      monitor.observe(v);
      res.student_losses.push_back(v);
      ++res.student_updates;
      if (sink) sink({u, "student_fm", v, rollout.null_drawn[static_cast<std::size_t>(i - 1)], i, r.sample.t});
    } else {
      const SceneCondition cond =
          conditions[static_cast<std::size_t>(rng.uniform_int(0, static_cast<int>(conditions.size()) - 1))];
      gen_opt.zero_grad();
      const int i = clip_index.next(rng);
      const DmdStepInfo info = dmd_generator_step(generator, student, teacher, memory, cond, schedule, rng, i);
      gen_opt.step();
      ++res.generator_updates;
      ++res.i_histogram[static_cast<std::size_t>(info.i)];
      res.generator_i.push_back(info.i);
      if (info.i > 1) {
        ++res.history_draws;
        if (info.null_drawn) ++res.null_draws;
      }
      res.delta_magnitudes.push_back(info.delta_mean_abs);
      if (!std::isfinite(info.delta_mean_abs)) throw NumericError("train_generator: non-finite score difference");
      if (sink) sink({u, "dmd_delta", info.delta_mean_abs, info.null_drawn, info.i, info.t});
      if (checkpoint_hook && schedule.checkpoint_every > 0 && res.generator_updates % schedule.checkpoint_every == 0) {
        checkpoint_hook(res.generator_updates);
      }
    }
  }
  return res;
}

/// Generator weights start as a copy of the memory model so the two share
/// the cache feature space.
inline DiffusionTransformer init_generator_from_memory(const DiffusionTransformer& memory) { return memory.clone(); }

inline DiffusionTransformer init_generator_from_memory(const std::filesystem::path& checkpoint, const ModelConfig& cfg) {
  DiffusionTransformer g(cfg, 0);
  g.load(checkpoint);
  return g;
}

// ---------------------------------------------------------------------------
// Teacher stand-in: bidirectional flow matching on whole clips.

struct TeacherTrainConfig {
  int steps = 2000;
  int batch = 1;
  AdamConfig adam{};
  std::uint64_t seed = 0;
  int log_every = 1;
};

inline TrainResult train_teacher(DiffusionTransformer& teacher, const std::vector<VideoClip>& dataset,
                                 const TeacherTrainConfig& cfg, const MetricSink& sink = {}) {
  if (dataset.empty()) throw ConfigError("train_teacher: empty dataset");
  if (teacher.config().attention_mode != AttentionMode::bidirectional) {
    throw ConfigError("train_teacher: the teacher must use bidirectional attention");
  }
  Rng rng(cfg.seed);
  Adam opt(teacher.parameters(), cfg.adam);
  DivergenceMonitor monitor("train_teacher");
  TrainResult result;
  for (int step = 0; step < cfg.steps; ++step) {
    opt.zero_grad();
    double total = 0.0;
    for (int k = 0; k < cfg.batch; ++k) {
      const auto& clip = dataset[static_cast<std::size_t>(rng.uniform_int(0, static_cast<int>(dataset.size()) - 1))];
      const Matrix tokens = frames_to_tokens(clip, 0, clip.frames, teacher.config());
      const FmResult r = fm_loss(teacher, tokens, clip.condition, CacheView::none(), Placement{0, 0}, rng);
      backward(scale(r.loss, Scalar(1) / static_cast<Scalar>(cfg.batch)));
      total += static_cast<double>(r.loss.item());
    }
    opt.step();
    const double avg = total / cfg.batch;
    result.losses.push_back(avg);
    monitor.observe(avg);
    if (sink && (step % std::max(1, cfg.log_every) == 0 || step + 1 == cfg.steps)) {
      sink({step, "teacher_fm", avg, std::nullopt, std::nullopt, std::nullopt});
    }
  }
  result.steps = cfg.steps;
  return result;
}

}  // namespace mag
