#include "oracles.hpp"
#include "test_util.hpp"

using namespace mag;
using namespace magtest;

namespace {

VideoClip ramp_clip(int frames, int h, int w, float lo, float hi) {
  VideoClip c(frames, h, w, 1);
  for (std::size_t i = 0; i < c.data.size(); ++i) c.data[i] = lo + (hi - lo) * static_cast<float>(i % 97) / 96.0f;
  return c;
}

DatasetConfig small_dataset(int frame, int clip_frames) {
  DatasetConfig d;
  d.world.frame_h = frame;
  d.world.frame_w = frame;
  d.world.world_w = 64;
  d.clip_frames = clip_frames;
  d.speeds = {1, 2};
  return d;
}

}  // namespace

TEST(MemoryBatch, SequenceHoldsNoiseThenClean) {
  const auto cfg = tiny_config(3);
  Rng rng(1);
  const VideoClip clip = random_clip(6, 8, 8, rng);
  const auto batch = build_memory_batch(clip, cfg, rng);
  const int f = cfg.frame_tokens();
  EXPECT_EQ(batch.layout.n_blocks, 2);
  EXPECT_EQ(batch.sequence.tokens.rows(), 2 * 6 * f);
  EXPECT_EQ(batch.mask.queries(), 2 * 6 * f);
  EXPECT_EQ(batch.targets.rows(), 6 * f);
  EXPECT_EQ(batch.block_t.size(), 2u);
  // clean segment is the clip itself
  const Matrix clean = frames_to_tokens(clip, 0, 6, cfg);
  EXPECT_EQ(max_abs_diff(batch.sequence.tokens.value().bottomRows(6 * f), clean), 0.0);
}

TEST(MemoryBatch, NoiseSegmentMirrorsCleanPositions) {
  const auto cfg = tiny_config(3);
  Rng rng(2);
  const auto batch = build_memory_batch(random_clip(6, 8, 8, rng), cfg, rng);
  const int half = 6 * cfg.frame_tokens();
  EXPECT_GE(batch.start_offset, 0);
  for (int i = 0; i < half; ++i) {
    EXPECT_EQ(batch.sequence.positions[static_cast<std::size_t>(i)],
              batch.sequence.positions[static_cast<std::size_t>(half + i)]);
  }
  EXPECT_EQ(batch.sequence.positions[static_cast<std::size_t>(half)], batch.start_offset);
}

TEST(MemoryBatch, PureNoiseEndpointKeepsCleanTarget) {
  const auto cfg = tiny_config(3);
  Rng rng(3);
  const VideoClip clip = random_clip(6, 8, 8, rng);
  const int bt = cfg.block_tokens();
  const Matrix noise = gaussian_like(6 * cfg.frame_tokens(), cfg.patch_dim(), rng);
  const auto batch = assemble_memory_batch(clip, cfg, {Scalar(0), Scalar(0.5)}, noise, 0);
  const Matrix clean = frames_to_tokens(clip, 0, 6, cfg);
  EXPECT_EQ(max_abs_diff(batch.sequence.tokens.value().topRows(bt), noise.topRows(bt)), 0.0);
  EXPECT_EQ(max_abs_diff(batch.targets, clean - noise), 0.0);
}

TEST(MemoryBatch, SameSeedSameBatch) {
  const auto cfg = tiny_config(2);
  Rng data(4);
  const VideoClip clip = random_clip(4, 8, 8, data);
  Rng a(9), b(9);
  const auto x = build_memory_batch(clip, cfg, a);
  const auto y = build_memory_batch(clip, cfg, b);
  EXPECT_EQ(max_abs_diff(x.sequence.tokens.value(), y.sequence.tokens.value()), 0.0);
  EXPECT_EQ(x.sequence.positions, y.sequence.positions);
  EXPECT_EQ(x.block_t, y.block_t);
  EXPECT_EQ(max_abs_diff(x.targets, y.targets), 0.0);
}

TEST(MemoryBatch, IndivisibleLengthIsShapeError) {
  const auto cfg = tiny_config(3);
  Rng rng(5);
  EXPECT_THROW(build_memory_batch(random_clip(7, 8, 8, rng), cfg, rng), ShapeError);
  EXPECT_THROW(build_memory_batch(random_clip(2, 8, 8, rng), cfg, rng), ShapeError);
  const Matrix noise = gaussian_like(6 * cfg.frame_tokens(), cfg.patch_dim(), rng);
  EXPECT_THROW(assemble_memory_batch(random_clip(6, 8, 8, rng), cfg, {Scalar(0.5)}, noise, 0), ShapeError);
}

TEST(MemoryLoss, StartOffsetInvariance) {
  Rng rng(6);
  for (int b : {1, 2, 3}) {
    const auto cfg = tiny_config(b);
    const auto model = random_model(cfg, 10 + static_cast<std::uint64_t>(b));
    auto c = random_memory_case(cfg, 2, rng);
    NoGradGuard guard;
    const double base = memory_loss(model, assemble_memory_batch(c.clip, cfg, c.block_t, c.noise, 0)).item();
    for (std::int64_t s : {7, 100, 10000}) {
      const double shifted =
          memory_loss(model, assemble_memory_batch(c.clip, cfg, c.block_t, c.noise, s * cfg.frame_tokens())).item();
      EXPECT_NEAR(shifted, base, 1e-5) << "b=" << b << " s=" << s;
    }
  }
}

TEST(MemoryLoss, ParallelMatchesSequentialDecode) {
  Rng rng(7);
  for (int b : {1, 3, 4}) {
    const auto cfg = tiny_config(b);
    const auto model = random_model(cfg, 20 + static_cast<std::uint64_t>(b));
    for (int n = 1; n <= 3; ++n) {
      EXPECT_LE(memory_mask_equivalence_error(model, random_memory_case(cfg, n, rng)), 1e-5) << "b=" << b << " n=" << n;
    }
  }
}

TEST(MemoryLoss, OnlyNoiseSegmentSupervised) {
  const auto cfg = tiny_config(2);
  const auto model = random_model(cfg, 30);
  Rng rng(8);
  const auto c = random_memory_case(cfg, 2, rng);
  const auto batch = assemble_memory_batch(c.clip, cfg, c.block_t, c.noise, 0);
  NoGradGuard guard;
  const Matrix v = model.forward(batch.sequence, CacheView::none(), batch.mask).velocity.value();
  const int half = batch.layout.segment_tokens();
  const double expect = (v.topRows(half) - batch.targets).squaredNorm() / static_cast<double>(batch.targets.size());
  EXPECT_NEAR(memory_loss(model, batch).item(), expect, 1e-5 * std::max(1.0, expect));
}

TEST(Compression, RetainedEntriesIndependentOfBlockSize) {
  Rng rng(9);
  for (int b : {1, 3, 4, 5}) {
    const auto cfg = tiny_config(b);
    const auto model = random_model(cfg, 40);
    const int n = 3;
    const VideoClip clip = random_clip(n * b, 8, 8, rng);
    KVCache mag(cfg.layers, cfg.d_model, RetentionPolicy::last_frame());
    KVCache full(cfg.layers, cfg.d_model, RetentionPolicy::all());
    for (int j = 0; j < n; ++j) {
      const Matrix tokens = frames_to_tokens(clip, j * b, b, cfg);
      mag.append(encode_block(model, tokens, CacheView::whole(mag), frame_placement(j * b, cfg.frame_tokens())));
      full.append(encode_block(model, tokens, CacheView::whole(full), frame_placement(j * b, cfg.frame_tokens())));
    }
    EXPECT_EQ(mag.entries(), n * cfg.frame_tokens());
    EXPECT_EQ(full.entries(), n * b * cfg.frame_tokens());
  }
}

TEST(Reconstruct, EmptyCacheAfterFirstBlockIsCacheError) {
  const auto cfg = tiny_config(3);
  const auto model = random_model(cfg, 50);
  KVCache cache(cfg.layers, cfg.d_model, RetentionPolicy::last_frame());
  Rng rng(10);
  const Matrix noise = gaussian_like(cfg.block_tokens(), cfg.patch_dim(), rng);
  EXPECT_THROW(reconstruct_block(model, CacheView::whole(cache), noise, frame_placement(3, cfg.frame_tokens())), CacheError);
  EXPECT_NO_THROW(reconstruct_block(model, CacheView::whole(cache), noise, frame_placement(0, cfg.frame_tokens())));
  EXPECT_THROW(reconstruct_clip(model, random_clip(4, 8, 8, rng), 0), ShapeError);
}

TEST(Reconstruct, FreshModelReturnsItsNoise) {
  // Zero-initialized output head: the sampler never moves, so the output is
  // the mapped and clamped noise draw.
  const auto cfg = tiny_config(2);
  const DiffusionTransformer model(cfg, 60);
  Rng data(11);
  const VideoClip clip = random_clip(4, 8, 8, data);
  const VideoClip rec = reconstruct_clip(model, clip, 77);
  Rng noise(77);
  VideoClip expect(4, 8, 8, 1);
  for (int j = 0; j < 2; ++j) {
    tokens_to_frames(gaussian_like(cfg.block_tokens(), cfg.patch_dim(), noise), expect, 2 * j, cfg);
  }
  EXPECT_EQ(rec.data, expect.data);

  // eval over that clip equals the noise-vs-data baseline
  const auto report = eval_reconstruction(model, {clip}, 5);
  const VideoClip rec5 = reconstruct_clip(model, clip, hash_combine(5, 0));
  const QualityMetrics base = clip_metrics(rec5, clip);
  EXPECT_EQ(report.n_clips, 1);
  EXPECT_EQ(report.b, 2);
  EXPECT_NEAR(report.psnr, base.psnr, 1e-9);
  EXPECT_NEAR(report.mse_x100, 100.0 * base.mse, 1e-9);
  EXPECT_LT(report.psnr, 10.0);
}

TEST(Reconstruct, UntrainedModelNearNoiseBaseline) {
  const auto cfg = tiny_config(3);
  const auto model = random_model(cfg, 61, Scalar(0.05));
  const auto data = make_dataset(3, 4, small_dataset(8, 6));
  const auto report = eval_reconstruction(model, data, 1);
  double baseline = 0.0;
  int frames = 0;
  for (std::size_t c = 0; c < data.size(); ++c) {
    Rng noise(hash_combine(1, c));
    VideoClip pure(6, 8, 8, 1);
    for (int j = 0; j < 2; ++j) tokens_to_frames(gaussian_like(cfg.block_tokens(), cfg.patch_dim(), noise), pure, 3 * j, cfg);
    for (int t = 0; t < 6; ++t, ++frames) baseline += psnr_from_mse(frame_mse(pure, t, data[c], t));
  }
  baseline /= frames;
  EXPECT_NEAR(report.psnr, baseline, 1.5);
}

TEST(Metrics, ExactMatchHitsCaps) {
  Rng rng(12);
  const VideoClip a = random_clip(3, 8, 8, rng);
  const auto m = clip_metrics(a, a);
  EXPECT_EQ(m.psnr, kPsnrCap);
  EXPECT_NEAR(m.ssim, 1.0, 1e-12);
  EXPECT_EQ(m.mse, 0.0);
}

TEST(Metrics, UniformOffsetClosedForm) {
  const VideoClip gt = ramp_clip(2, 9, 9, 0.0f, 0.9f);
  VideoClip pred = gt;
  for (auto& v : pred.data) v += 0.1f;
  const auto m = clip_metrics(pred, gt);
  EXPECT_NEAR(m.mse, 0.01, 1e-7);
  EXPECT_NEAR(m.psnr, 20.0, 1e-4);
}

TEST(Metrics, SsimOfConstantImages) {
  VideoClip a(1, 8, 8, 1), b(1, 8, 8, 1);
  std::fill(a.data.begin(), a.data.end(), 0.3f);
  std::fill(b.data.begin(), b.data.end(), 0.4f);
  const double ma = static_cast<double>(0.3f), mb = static_cast<double>(0.4f);
  const double expect = (2 * ma * mb + 1e-4) / (ma * ma + mb * mb + 1e-4);
  EXPECT_NEAR(frame_ssim(a, 0, b, 0), expect, 1e-9);
}

TEST(Metrics, SsimAgainstDirectWindowSum) {
  Rng rng(13);
  const VideoClip a = random_clip(1, 9, 10, rng);
  const VideoClip b = random_clip(1, 9, 10, rng);
  // every 7x7 window, two-pass variance
  double total = 0.0;
  int count = 0;
  for (int r0 = 0; r0 + 7 <= 9; ++r0) {
    for (int c0 = 0; c0 + 7 <= 10; ++c0) {
      double ma = 0, mb = 0;
      for (int r = r0; r < r0 + 7; ++r) {
        for (int c = c0; c < c0 + 7; ++c) {
          ma += a.at(0, r, c);
          mb += b.at(0, r, c);
        }
      }
      ma /= 49;
      mb /= 49;
      double va = 0, vb = 0, cov = 0;
      for (int r = r0; r < r0 + 7; ++r) {
        for (int c = c0; c < c0 + 7; ++c) {
          const double x = a.at(0, r, c) - ma, y = b.at(0, r, c) - mb;
          va += x * x;
          vb += y * y;
          cov += x * y;
        }
      }
      va /= 49;
      vb /= 49;
      cov /= 49;
      total += (2 * ma * mb + 1e-4) * (2 * cov + 9e-4) / ((ma * ma + mb * mb + 1e-4) * (va + vb + 9e-4));
      ++count;
    }
  }
  EXPECT_EQ(count, 12);
  EXPECT_NEAR(frame_ssim(a, 0, b, 0), total / count, 1e-9);
}

TEST(Metrics, GeometryMismatchIsShapeError) {
  VideoClip a(1, 8, 8, 1), b(1, 8, 9, 1);
  EXPECT_THROW(frame_mse(a, 0, b, 0), ShapeError);
  EXPECT_THROW(clip_metrics(VideoClip(2, 8, 8, 1), VideoClip(3, 8, 8, 1)), ShapeError);
}

TEST(TrainMemory, ValidationLossDrops) {
  const auto cfg = tiny_config(2);
  DiffusionTransformer model(cfg, 70);
  const auto data = make_dataset(7, 16, small_dataset(8, 4));
  Rng vr(71);
  std::vector<MemoryBatch> val;
  for (int i = 0; i < 4; ++i) val.push_back(build_memory_batch(data[static_cast<std::size_t>(i)], cfg, vr));
  const double before = memory_validation_loss(model, val);
  MemoryTrainConfig tc;
  tc.steps = 150;
  tc.adam.lr = 3e-3;
  tc.seed = 72;
  std::vector<MetricRecord> records;
  const auto result = train_memory(model, data, tc, [&](const MetricRecord& r) { records.push_back(r); });
  const double after = memory_validation_loss(model, val);
  EXPECT_EQ(result.steps, 150);
  EXPECT_EQ(result.losses.size(), 150u);
  EXPECT_LT(after, 0.8 * before);
  ASSERT_FALSE(records.empty());
  EXPECT_EQ(records.front().loss_name, "memory_fm");
  EXPECT_FALSE(records.front().lambda_draw.has_value());
}

TEST(TrainMemory, DeterministicGivenSeed) {
  const auto cfg = tiny_config(2, 8, 4, 1);
  const auto data = make_dataset(8, 4, small_dataset(8, 4));
  MemoryTrainConfig tc;
  tc.steps = 10;
  tc.seed = 3;
  DiffusionTransformer a(cfg, 1), b(cfg, 1);
  const auto ra = train_memory(a, data, tc);
  const auto rb = train_memory(b, data, tc);
  EXPECT_EQ(ra.losses, rb.losses);
}

TEST(TrainMemory, BadArgumentsAreConfigErrors) {
  const auto cfg = tiny_config(2, 8, 4, 1);
  DiffusionTransformer m(cfg, 1);
  MemoryTrainConfig tc;
  EXPECT_THROW(train_memory(m, {}, tc), ConfigError);
  tc.batch = 0;
  Rng rng(1);
  EXPECT_THROW(train_memory(m, {random_clip(4, 8, 8, rng)}, tc), ConfigError);
}

TEST(TrainMemory, DivergenceIsTrainingFailure) {
  DivergenceMonitor mon("probe", 10.0, 3);
  mon.observe(1.0);
  mon.observe(11.0);
  mon.observe(11.0);
  mon.observe(5.0);  // resets the run
  mon.observe(11.0);
  mon.observe(11.0);
  EXPECT_THROW(mon.observe(11.0), TrainingFailure);
}
