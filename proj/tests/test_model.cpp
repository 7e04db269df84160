#include "oracles.hpp"
#include "test_util.hpp"

using namespace mag;
using magtest::random_matrix;
using magtest::tiny_config;

namespace {

BlockKV fake_block(int layers, int d, int b, int f, int block, std::int64_t start = -1) {
  BlockKV kv;
  Rng rng(static_cast<std::uint64_t>(block) + 100);
  for (int l = 0; l < layers; ++l) {
    kv.keys.push_back(random_matrix(b * f, d, rng));
    kv.values.push_back(random_matrix(b * f, d, rng));
  }
  const std::int64_t s = start >= 0 ? start : static_cast<std::int64_t>(block) * b * f;
  for (int k = 0; k < b; ++k) {
    for (int q = 0; q < f; ++q) kv.meta.push_back({s + k * f + q, block * b + k, block});
  }
  return kv;
}

}  // namespace

TEST(ModelConfig, Validation) {
  auto c = tiny_config();
  EXPECT_NO_THROW(c.validate());
  c.heads = 3;
  EXPECT_THROW(c.validate(), ConfigError);
  c = tiny_config();
  c.patch_size = 3;
  EXPECT_THROW(c.validate(), ConfigError);
  c = tiny_config();
  c.block_frames = 0;
  EXPECT_THROW(c.validate(), ConfigError);
  ModelConfig def;
  EXPECT_EQ(def.frame_tokens(), 36);
  EXPECT_EQ(def.block_frames, 3);
}

TEST(KVCacheTest, LastFrameIsOneOverBOfAll) {
  for (int b : {1, 2, 3, 4, 5}) {
    for (int blocks : {1, 4, 10}) {
      const int f = 36;
      KVCache all(2, 8, RetentionPolicy::all());
      KVCache last(2, 8, RetentionPolicy::last_frame());
      for (int j = 0; j < blocks; ++j) {
        const auto kv = fake_block(2, 8, b, f, j);
        all.append(kv);
        last.append(kv);
        EXPECT_EQ(last.entries(), (j + 1) * f);
      }
      EXPECT_EQ(all.entries(), blocks * b * f);
      EXPECT_EQ(last.entries() * b, all.entries());
      EXPECT_EQ(last.total_bytes() * b, all.total_bytes());
      for (const auto& m : last.meta()) EXPECT_EQ(m.frame % b, b - 1);
      if (b == 1) {
        EXPECT_EQ(last.meta().size(), all.meta().size());
      }
    }
  }
}

TEST(KVCacheTest, ByteAccountingIsExact) {
  KVCache c(3, 16, RetentionPolicy::all());
  c.append(fake_block(3, 16, 2, 4, 0));
  EXPECT_EQ(c.bytes_per_layer(), static_cast<std::size_t>(8 * 2 * 16 * 4));
  EXPECT_EQ(c.total_bytes(), 3u * c.bytes_per_layer());
}

TEST(KVCacheTest, WindowSixAfterTenBlocksOfThree) {
  const int f = 4;
  KVCache c(1, 8, RetentionPolicy::window(6));
  for (int j = 0; j < 10; ++j) c.append(fake_block(1, 8, 3, f, j));
  EXPECT_EQ(c.entries(), 6 * f);
  EXPECT_EQ(c.meta().front().frame, 24);
  EXPECT_EQ(c.meta().back().frame, 29);
}

TEST(KVCacheTest, EntriesSortedAndOutOfOrderRejected) {
  KVCache c(1, 8, RetentionPolicy::all());
  c.append(fake_block(1, 8, 2, 3, 1));
  EXPECT_THROW(c.append(fake_block(1, 8, 2, 3, 0)), CacheError);
  for (std::size_t i = 1; i < c.meta().size(); ++i) EXPECT_LT(c.meta()[i - 1].position, c.meta()[i].position);
  KVCache wrong_layers(2, 8, RetentionPolicy::all());
  EXPECT_THROW(wrong_layers.append(fake_block(1, 8, 2, 3, 0)), CacheError);
}

TEST(KVCacheTest, StoresTheLastFrameRows) {
  KVCache c(1, 8, RetentionPolicy::last_frame());
  const auto kv = fake_block(1, 8, 3, 2, 0);
  c.append(kv);
  EXPECT_EQ(Matrix(c.keys(0, 2)), Matrix(kv.keys[0].bottomRows(2)));
  EXPECT_EQ(Matrix(c.values(0, 2)), Matrix(kv.values[0].bottomRows(2)));
}

TEST(Masks, InferenceMaskIsAllVisible) {
  Rng rng(1);
  for (int trial = 0; trial < 100; ++trial) {
    const int m = rng.uniform_int(0, 40), n = rng.uniform_int(1, 40);
    const auto mask = build_inference_mask(m, n);
    EXPECT_EQ(mask.queries(), n);
    EXPECT_EQ(mask.keys(), m + n);
    EXPECT_TRUE(mask.all_true());
    EXPECT_TRUE(validate_inference_mask(mask, m, n));
  }
}

TEST(Masks, MemoryMaskSmallestCase) {
  const auto mask = build_memory_mask(1, 1, 1);
  // [noise | clean]: noise sees itself and the clean frame, clean sees itself.
  EXPECT_TRUE(mask.visible(0, 0));
  EXPECT_TRUE(mask.visible(0, 1));
  EXPECT_FALSE(mask.visible(1, 0));
  EXPECT_TRUE(mask.visible(1, 1));
}

TEST(Masks, MemoryMaskTwoBlocksOfThree) {
  const auto mask = build_memory_mask(2, 3, 1);
  // Tokens: noise 0..5, clean 6..11; retained last frames are 8 and 11.
  for (int q = 3; q < 6; ++q) {
    std::set<int> visible;
    for (int k = 0; k < 12; ++k) {
      if (mask.visible(q, k)) visible.insert(k);
    }
    EXPECT_EQ(visible, (std::set<int>{3, 4, 5, 8, 11}));
  }
  for (int q = 0; q < 3; ++q) EXPECT_EQ(mask.row_count(q), 4);
  // Clean block 2 sees itself and the retained frame of clean block 1.
  for (int q = 9; q < 12; ++q) EXPECT_EQ(mask.row_count(q), 4);
  EXPECT_FALSE(mask.visible(9, 6));
  EXPECT_TRUE(mask.visible(9, 8));
}

TEST(Masks, MemoryMaskValidatorSweep) {
  for (int n = 1; n <= 4; ++n) {
    for (int b : {1, 2, 3, 4}) {
      for (int f : {1, 4, 9}) {
        const auto mask = build_memory_mask(n, b, f);
        EXPECT_EQ(validate_memory_mask(mask, n, b, f), "") << n << " " << b << " " << f;
        for (int j = 0; j < n; ++j) EXPECT_EQ(mask.row_count(j * b * f), b * f + (j + 1) * f);
      }
    }
  }
  auto broken = build_memory_mask(2, 3, 1);
  broken.set(3, 7, true);  // decoder peeks at a non-final clean frame
  EXPECT_NE(validate_memory_mask(broken, 2, 3, 1), "");
  EXPECT_NE(validate_memory_mask(build_bidirectional_mask(12), 2, 3, 1), "");
}

TEST(Model, EmptyCacheSingleFrameBlockIsPlainForward) {
  auto cfg = tiny_config(1);
  const auto model = magtest::random_model(cfg, 3);
  Rng rng(4);
  const Matrix x = random_matrix(cfg.frame_tokens(), cfg.patch_dim(), rng);
  const SceneCondition cond{1, 2, false};
  const auto a = forward_denoise(model, Tensor::constant(x), Scalar(0.3), cond, CacheView::none(),
                                 build_bidirectional_mask(cfg.frame_tokens()), 0, 0);
  const auto seq = make_sequence(Tensor::constant(x), cfg.frame_tokens(), 0, 0, {{Scalar(0.3), cond}});
  const auto b = model.forward(seq, CacheView::none(), build_bidirectional_mask(cfg.frame_tokens()));
  EXPECT_EQ(a.velocity.value(), b.velocity.value());
  EXPECT_EQ(a.velocity.rows(), x.rows());
  EXPECT_EQ(a.velocity.cols(), x.cols());
}

TEST(Model, ForwardIsDeterministic) {
  const auto cfg = tiny_config();
  const auto m1 = magtest::random_model(cfg, 5);
  const auto m2 = magtest::random_model(cfg, 5);
  EXPECT_TRUE(m1.weights_equal(m2));
  Rng rng(6);
  const Matrix x = random_matrix(cfg.block_tokens(), cfg.patch_dim(), rng);
  const auto mask = build_bidirectional_mask(cfg.block_tokens());
  const auto a = forward_denoise(m1, Tensor::constant(x), Scalar(0.5), {0, 1, false}, CacheView::none(), mask, 0, 0);
  const auto b = forward_denoise(m2, Tensor::constant(x), Scalar(0.5), {0, 1, false}, CacheView::none(), mask, 0, 0);
  EXPECT_EQ(a.velocity.value(), b.velocity.value());
}

TEST(Model, CachedEqualsFullPrefixRecompute) {
  Rng rng(7);
  for (int b : {1, 2, 3}) {
    const auto cfg = tiny_config(b);
    const auto model = magtest::random_model(cfg, 10 + b);
    for (const auto& policy : {RetentionPolicy::all(), RetentionPolicy::last_frame(), RetentionPolicy::window(2)}) {
      for (int n_prev : {0, 1, 3}) {
        std::vector<Matrix> clean;
        for (int j = 0; j < n_prev; ++j) clean.push_back(random_matrix(cfg.block_tokens(), cfg.patch_dim(), rng));
        const Matrix noisy = random_matrix(cfg.block_tokens(), cfg.patch_dim(), rng);
        const SceneCondition cond{1, 3, false};
        const Matrix cached = magtest::cached_velocity(model, clean, noisy, Scalar(0.4), cond, policy);
        const Matrix full = magtest::full_prefix_velocity(model, clean, noisy, Scalar(0.4), cond, policy);
        EXPECT_LT(magtest::max_abs_diff(cached, full), 1e-5) << policy.name() << " b=" << b << " prev=" << n_prev;
      }
    }
  }
}

TEST(Model, MemoryMaskParallelEqualsSequential) {
  Rng rng(8);
  for (int trial = 0; trial < 6; ++trial) {
    const int b = std::vector<int>{1, 3, 4}[static_cast<std::size_t>(trial % 3)];
    const int n_blocks = 1 + trial % 4;
    auto cfg = tiny_config(b, trial % 2 ? 8 : 4);
    const auto model = magtest::random_model(cfg, 20 + trial);
    const auto c = magtest::random_memory_case(cfg, n_blocks, rng);
    EXPECT_LT(magtest::memory_mask_equivalence_error(model, c), 1e-5) << "trial " << trial;
  }
}

TEST(Model, RopeStartShiftLeavesOutputUnchanged) {
  const auto cfg = tiny_config(2);
  const auto model = magtest::random_model(cfg, 30);
  Rng rng(9);
  const Matrix x = random_matrix(cfg.block_tokens(), cfg.patch_dim(), rng);
  const auto mask = build_bidirectional_mask(cfg.block_tokens());
  const auto base = forward_denoise(model, Tensor::constant(x), Scalar(0.6), {2, 1, false}, CacheView::none(), mask, 0, 0);
  for (std::int64_t s : {7, 100, 10000}) {
    const auto shifted = forward_denoise(model, Tensor::constant(x), Scalar(0.6), {2, 1, false}, CacheView::none(), mask, 0, s);
    EXPECT_LT(magtest::max_abs_diff(base.velocity.value(), shifted.velocity.value()), 1e-5) << "shift " << s;
  }
}

TEST(Model, RopeShiftInvarianceOfLogits) {
  Rng rng(10);
  const int heads = 2, d = 16;
  for (int trial = 0; trial < 200; ++trial) {
    const Matrix q = random_matrix(3, d, rng);
    const Matrix k = random_matrix(4, d, rng);
    std::vector<std::int64_t> pq, pk;
    for (int i = 0; i < 3; ++i) pq.push_back(rng.uniform_int(0, 300));
    for (int i = 0; i < 4; ++i) pk.push_back(rng.uniform_int(0, 300));
    auto logits = [&](std::int64_t s) {
      auto sq = pq, sk = pk;
      for (auto& p : sq) p += s;
      for (auto& p : sk) p += s;
      const Matrix rq = rope(Tensor::constant(q), sq, heads).value();
      const Matrix rk = rope(Tensor::constant(k), sk, heads).value();
      return Matrix(rq * rk.transpose());
    };
    const Matrix ref = logits(0);
    for (std::int64_t s : {7, 100, 10000}) EXPECT_LT(magtest::max_abs_diff(logits(s), ref), 1e-5);
  }
}

TEST(Model, NullConditionChangesOutput) {
  const auto cfg = tiny_config();
  const auto model = magtest::random_model(cfg, 40);
  Rng rng(11);
  const Matrix x = random_matrix(cfg.block_tokens(), cfg.patch_dim(), rng);
  const auto mask = build_bidirectional_mask(cfg.block_tokens());
  const auto a = forward_denoise(model, Tensor::constant(x), Scalar(0.5), {1, 1, false}, CacheView::none(), mask, 0, 0);
  const auto n = forward_denoise(model, Tensor::constant(x), Scalar(0.5), SceneCondition::null(), CacheView::none(), mask, 0, 0);
  EXPECT_GT(magtest::max_abs_diff(a.velocity.value(), n.velocity.value()), 1e-4);
}

TEST(Model, FreshModelPredictsZeroVelocity) {
  // Output projection starts at zero, so an untrained model is the zero field.
  const auto cfg = tiny_config();
  DiffusionTransformer model(cfg, 1);
  Rng rng(12);
  const Matrix x = random_matrix(cfg.block_tokens(), cfg.patch_dim(), rng);
  const auto out = forward_denoise(model, Tensor::constant(x), Scalar(0.5), {0, 0, false}, CacheView::none(),
                                   build_bidirectional_mask(cfg.block_tokens()), 0, 0);
  EXPECT_EQ(out.velocity.value().cwiseAbs().maxCoeff(), 0);
}

TEST(Model, PositionCollisionIsCacheError) {
  const auto cfg = tiny_config();
  const auto model = magtest::random_model(cfg, 50);
  Rng rng(13);
  const int bt = cfg.block_tokens();
  KVCache cache(cfg.layers, cfg.d_model, RetentionPolicy::all());
  cache.append(encode_block(model, random_matrix(bt, cfg.patch_dim(), rng), CacheView::whole(cache), {0, 0}));
  const Matrix x = random_matrix(bt, cfg.patch_dim(), rng);
  EXPECT_THROW(forward_denoise(model, Tensor::constant(x), Scalar(0.5), {0, 0, false}, CacheView::whole(cache),
                               build_inference_mask(bt, bt), 0, bt - 1),
               CacheError);
  EXPECT_NO_THROW(forward_denoise(model, Tensor::constant(x), Scalar(0.5), {0, 0, false}, CacheView::whole(cache),
                                  build_inference_mask(bt, bt), 0, 0, false, PositionRule::may_overlap));
}

TEST(Model, MaskCacheMismatchIsMaskError) {
  const auto cfg = tiny_config();
  const auto model = magtest::random_model(cfg, 60);
  Rng rng(14);
  const int bt = cfg.block_tokens();
  KVCache cache(cfg.layers, cfg.d_model, RetentionPolicy::all());
  cache.append(encode_block(model, random_matrix(bt, cfg.patch_dim(), rng), CacheView::whole(cache), {0, 0}));
  const Matrix x = random_matrix(bt, cfg.patch_dim(), rng);
  EXPECT_THROW(forward_denoise(model, Tensor::constant(x), Scalar(0.5), {0, 0, false}, CacheView::whole(cache),
                               build_inference_mask(0, bt), 3, bt),
               MaskError);
}

TEST(Model, CacheGeometryMismatchIsCacheError) {
  const auto cfg = tiny_config();
  const auto model = magtest::random_model(cfg, 61);
  Rng rng(15);
  KVCache other(cfg.layers + 1, cfg.d_model, RetentionPolicy::all());
  auto kv = fake_block(cfg.layers + 1, cfg.d_model, cfg.block_frames, cfg.frame_tokens(), 0);
  other.append(kv);
  const Matrix x = random_matrix(cfg.block_tokens(), cfg.patch_dim(), rng);
  EXPECT_THROW(forward_denoise(model, Tensor::constant(x), Scalar(0.5), {0, 0, false}, CacheView::whole(other),
                               build_inference_mask(other.entries(), cfg.block_tokens()), 3, 1000),
               CacheError);
}

TEST(Model, BlockKvHasAllTokensAndLayers) {
  const auto cfg = tiny_config(3);
  const auto model = magtest::random_model(cfg, 70);
  Rng rng(16);
  const auto kv = encode_block(model, random_matrix(cfg.block_tokens(), cfg.patch_dim(), rng), CacheView::none(),
                               frame_placement(6, cfg.frame_tokens()));
  EXPECT_EQ(kv.tokens(), cfg.block_tokens());
  EXPECT_EQ(static_cast<int>(kv.keys.size()), cfg.layers);
  EXPECT_EQ(kv.meta.front().frame, 6);
  EXPECT_EQ(kv.meta.back().frame, 8);
  EXPECT_EQ(kv.meta.front().block, 2);
  EXPECT_EQ(kv.meta.front().position, 6 * cfg.frame_tokens());
}

TEST(Model, SaveLoadRoundTripAndMismatch) {
  magtest::TempDir dir("model");
  const auto cfg = tiny_config();
  const auto model = magtest::random_model(cfg, 80);
  model.save(dir.path / "m.magc");
  DiffusionTransformer loaded(cfg, 999);
  loaded.load(dir.path / "m.magc");
  EXPECT_TRUE(loaded.weights_equal(model));
  auto wide = cfg;
  wide.d_model = 32;
  DiffusionTransformer other(wide, 1);
  try {
    other.load(dir.path / "m.magc");
    FAIL() << "expected CheckpointError";
  } catch (const CheckpointError& e) {
    EXPECT_NE(std::string(e.what()).find("m.magc"), std::string::npos);
  }
  EXPECT_THROW(other.copy_weights_from(model), CheckpointError);
}

TEST(Model, TokenPixelRoundTrip) {
  const auto cfg = tiny_config(2);
  Rng rng(17);
  const auto clip = magtest::random_clip(4, cfg.frame_h, cfg.frame_w, rng);
  const Matrix tokens = frames_to_tokens(clip, 1, 2, cfg);
  EXPECT_EQ(tokens.rows(), 2 * cfg.frame_tokens());
  EXPECT_GE(tokens.minCoeff(), -1);
  EXPECT_LE(tokens.maxCoeff(), 1);
  const auto back = tokens_to_clip(tokens, cfg);
  for (int t = 0; t < 2; ++t) {
    for (int r = 0; r < cfg.frame_h; ++r) {
      for (int c = 0; c < cfg.frame_w; ++c) EXPECT_NEAR(back.at(t, r, c), clip.at(t + 1, r, c), 1e-6);
    }
  }
}
