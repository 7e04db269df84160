#pragma once

#include <cmath>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <string>
#include <utility>
#include <vector>

#include "mag/attention.hpp"
#include "mag/checkpoint.hpp"
#include "mag/kv_cache.hpp"
#include "mag/masks.hpp"
#include "mag/rng.hpp"
#include "mag/rope.hpp"
#include "mag/synthworld.hpp"

namespace mag {

enum class AttentionMode { bidirectional, block_causal };

struct ModelConfig {
  int layers = 4;
  int d_model = 128;
  int heads = 4;
  int patch_size = 4;
  int block_frames = 3;
  int frame_h = 24;
  int frame_w = 24;
  int channels = 1;
  int scene_vocab = 4;
  int motion_vocab = kMotionVocab;
  int time_dim = 64;
  int mlp_ratio = 4;
  float rope_base = 10000.0f;
  AttentionMode attention_mode = AttentionMode::block_causal;

  int grid_h() const { return frame_h / patch_size; }
  int grid_w() const { return frame_w / patch_size; }
  int frame_tokens() const { return grid_h() * grid_w(); }
  int patch_dim() const { return patch_size * patch_size * channels; }
  int block_tokens() const { return block_frames * frame_tokens(); }

  void validate() const {
    if (layers < 1 || d_model < 1 || heads < 1 || patch_size < 1 || block_frames < 1 || time_dim < 2 ||
        mlp_ratio < 1 || scene_vocab < 1 || motion_vocab < 1 || channels < 1) {
      throw ConfigError("model config: sizes must be positive");
    }
    if (d_model % heads != 0) throw ConfigError("model config: d_model must be divisible by heads");
    if ((d_model / heads) % 2 != 0) throw ConfigError("model config: head dim must be even for rotary embedding");
    if (frame_h % patch_size != 0 || frame_w % patch_size != 0) {
      throw ConfigError("model config: frame size must be divisible by patch_size");
    }
    if (time_dim % 2 != 0) throw ConfigError("model config: time_dim must be even");
  }

  friend bool operator==(const ModelConfig&, const ModelConfig&) = default;
};

// ---------------------------------------------------------------------------
// Pixel <-> token conversion. Model space maps [0,1] pixels to [-1,1].

inline Matrix frames_to_tokens(const VideoClip& clip, int first_frame, int count, const ModelConfig& cfg) {
  if (clip.height != cfg.frame_h || clip.width != cfg.frame_w || clip.channels != cfg.channels) {
    throw ShapeError("frames_to_tokens: clip geometry does not match model config");
  }
  if (first_frame < 0 || count < 0 || first_frame + count > clip.frames) throw BoundsError("frames_to_tokens: frame range");
  const int p = cfg.patch_size;
  const int f = cfg.frame_tokens();
  Matrix out(count * f, cfg.patch_dim());
  for (int t = 0; t < count; ++t) {
    for (int gy = 0; gy < cfg.grid_h(); ++gy) {
      for (int gx = 0; gx < cfg.grid_w(); ++gx) {
        const int row = t * f + gy * cfg.grid_w() + gx;
        int col = 0;
        for (int dy = 0; dy < p; ++dy) {
          for (int dx = 0; dx < p; ++dx) {
            for (int ch = 0; ch < cfg.channels; ++ch) {
              out(row, col++) = Scalar(2) * clip.at(first_frame + t, gy * p + dy, gx * p + dx, ch) - Scalar(1);
            }
          }
        }
      }
    }
  }
  return out;
}

/// Writes tokens back as frames [first_frame, first_frame + rows/f), clamped to [0,1].
inline void tokens_to_frames(const Matrix& tokens, VideoClip& clip, int first_frame, const ModelConfig& cfg) {
  const int p = cfg.patch_size;
  const int f = cfg.frame_tokens();
  const int count = static_cast<int>(tokens.rows()) / f;
  if (first_frame + count > clip.frames) throw BoundsError("tokens_to_frames: frame range");
  for (int t = 0; t < count; ++t) {
    for (int gy = 0; gy < cfg.grid_h(); ++gy) {
      for (int gx = 0; gx < cfg.grid_w(); ++gx) {
        const int row = t * f + gy * cfg.grid_w() + gx;
        int col = 0;
        for (int dy = 0; dy < p; ++dy) {
          for (int dx = 0; dx < p; ++dx) {
            for (int ch = 0; ch < cfg.channels; ++ch) {
              const float v = static_cast<float>((tokens(row, col++) + Scalar(1)) / Scalar(2));
              clip.at(first_frame + t, gy * p + dy, gx * p + dx, ch) = std::clamp(v, 0.0f, 1.0f);
            }
          }
        }
      }
    }
  }
}

inline VideoClip tokens_to_clip(const Matrix& tokens, const ModelConfig& cfg) {
  VideoClip clip(static_cast<int>(tokens.rows()) / cfg.frame_tokens(), cfg.frame_h, cfg.frame_w, cfg.channels);
  tokens_to_frames(tokens, clip, 0, cfg);
  return clip;
}

// ---------------------------------------------------------------------------
// Sequence description handed to the transformer.

/// Timestep and condition shared by a group of tokens. t = 1 is clean data.
struct TokenCondition {
  Scalar t = 1;
  SceneCondition cond;
};

struct SequenceInput {
  Tensor tokens;                        // n x patch_dim, model space
  std::vector<std::int64_t> positions;  // rotary position ids
  std::vector<int> spatial;             // patch index within its frame
  std::vector<int> frame_of;            // global frame index (cache metadata)
  std::vector<int> group_of;            // index into groups
  std::vector<TokenCondition> groups;

  int size() const { return static_cast<int>(positions.size()); }
};

/// Consecutive frames starting at global frame `first_frame`; positions run
/// consecutively from `start_position`. frame_group[i] picks the group of
/// local frame i (empty = all frames in group 0).
inline SequenceInput make_sequence(Tensor tokens, int frame_tokens, int first_frame, std::int64_t start_position,
                                   std::vector<TokenCondition> groups, std::vector<int> frame_group = {}) {
  if (tokens.rows() % frame_tokens != 0) throw ShapeError("make_sequence: token count not a whole number of frames");
  const int frames = tokens.rows() / frame_tokens;
  if (!frame_group.empty() && static_cast<int>(frame_group.size()) != frames) {
    throw ShapeError("make_sequence: frame_group length mismatch");
  }
  SequenceInput s;
  s.tokens = std::move(tokens);
  s.groups = std::move(groups);
  for (int fr = 0; fr < frames; ++fr) {
    const int g = frame_group.empty() ? 0 : frame_group[static_cast<std::size_t>(fr)];
    if (g < 0 || g >= static_cast<int>(s.groups.size())) throw BoundsError("make_sequence: bad group index");
    for (int q = 0; q < frame_tokens; ++q) {
      s.positions.push_back(start_position + static_cast<std::int64_t>(fr) * frame_tokens + q);
      s.spatial.push_back(q);
      s.frame_of.push_back(first_frame + fr);
      s.group_of.push_back(g);
    }
  }
  return s;
}

inline SequenceInput concat_sequences(const SequenceInput& a, const SequenceInput& b) {
  SequenceInput s;
  s.tokens = concat_rows({a.tokens, b.tokens});
  s.positions = a.positions;
  s.positions.insert(s.positions.end(), b.positions.begin(), b.positions.end());
  s.spatial = a.spatial;
  s.spatial.insert(s.spatial.end(), b.spatial.begin(), b.spatial.end());
  s.frame_of = a.frame_of;
  s.frame_of.insert(s.frame_of.end(), b.frame_of.begin(), b.frame_of.end());
  s.groups = a.groups;
  s.groups.insert(s.groups.end(), b.groups.begin(), b.groups.end());
  s.group_of = a.group_of;
  const int offset = static_cast<int>(a.groups.size());
  for (int g : b.group_of) s.group_of.push_back(g + offset);
  return s;
}

/// Whether the queried positions must lie strictly after the cache. The
/// memory decoder re-uses the positions of its own retained frame.
enum class PositionRule { after_cache, may_overlap };

// ---------------------------------------------------------------------------

struct LayerParams {
  Tensor ada_w, ada_b;
  Tensor wq, bq, wk, bk, wv, bv, wo, bo;
  Tensor w1, b1, w2, b2;
};

struct ModelParams {
  Tensor patch_w, patch_b, spatial;
  Tensor time_w1, time_b1, time_w2, time_b2;
  Tensor scene, motion, null_cond;
  std::vector<LayerParams> layers;
  Tensor final_ada_w, final_ada_b, out_w, out_b;
};

struct ForwardResult {
  Tensor velocity;  // n x patch_dim
  BlockKV kv;       // filled when requested
};

/// Diffusion transformer over patch tokens with adaptive-norm conditioning on
/// (timestep, scene condition), rotary positions, and an optional KV cache.
/// The same architecture backs the teacher, student, generator and memory model.
class DiffusionTransformer {
 public:
  DiffusionTransformer() = default;

  DiffusionTransformer(ModelConfig cfg, std::uint64_t seed) : cfg_(cfg) {
    cfg_.validate();
    Rng rng(seed);
    const int d = cfg_.d_model;
    auto dense = [&](int in, int out) {
      const Scalar std = static_cast<Scalar>(std::sqrt(2.0 / (in + out)));
      Matrix m(in, out);
      for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = std * rng.normal();
      return Tensor::parameter(std::move(m));
    };
    auto normal = [&](int r, int c, Scalar std) {
      Matrix m(r, c);
      for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = std * rng.normal();
      return Tensor::parameter(std::move(m));
    };
    auto zeros = [](int r, int c) { return Tensor::parameter(Matrix::Zero(r, c)); };

    p_.patch_w = dense(cfg_.patch_dim(), d);
    p_.patch_b = zeros(1, d);
    p_.spatial = normal(cfg_.frame_tokens(), d, Scalar(0.02));
    p_.time_w1 = dense(cfg_.time_dim, d);
    p_.time_b1 = zeros(1, d);
    p_.time_w2 = dense(d, d);
    p_.time_b2 = zeros(1, d);
    p_.scene = normal(cfg_.scene_vocab, d, Scalar(0.02));
    p_.motion = normal(cfg_.motion_vocab, d, Scalar(0.02));
    p_.null_cond = normal(1, d, Scalar(0.02));
    for (int l = 0; l < cfg_.layers; ++l) {
      LayerParams lp;
      lp.ada_w = zeros(d, 6 * d);
      lp.ada_b = zeros(1, 6 * d);
      lp.wq = dense(d, d);
      lp.bq = zeros(1, d);
      lp.wk = dense(d, d);
      lp.bk = zeros(1, d);
      lp.wv = dense(d, d);
      lp.bv = zeros(1, d);
      lp.wo = dense(d, d);
      lp.bo = zeros(1, d);
      lp.w1 = dense(d, cfg_.mlp_ratio * d);
      lp.b1 = zeros(1, cfg_.mlp_ratio * d);
      lp.w2 = dense(cfg_.mlp_ratio * d, d);
      lp.b2 = zeros(1, d);
      p_.layers.push_back(std::move(lp));
    }
    p_.final_ada_w = zeros(d, 2 * d);
    p_.final_ada_b = zeros(1, 2 * d);
    p_.out_w = zeros(d, cfg_.patch_dim());
    p_.out_b = zeros(1, cfg_.patch_dim());
  }

  const ModelConfig& config() const { return cfg_; }

  std::vector<std::pair<std::string, Tensor>> named_parameters() const {
    std::vector<std::pair<std::string, Tensor>> out = {
        {"patch.w", p_.patch_w},         {"patch.b", p_.patch_b},     {"spatial", p_.spatial},
        {"time.w1", p_.time_w1},         {"time.b1", p_.time_b1},     {"time.w2", p_.time_w2},
        {"time.b2", p_.time_b2},         {"cond.scene", p_.scene},    {"cond.motion", p_.motion},
        {"cond.null", p_.null_cond},
    };
    for (std::size_t l = 0; l < p_.layers.size(); ++l) {
      const auto& lp = p_.layers[l];
      const std::string pre = "layer" + std::to_string(l) + ".";
      for (auto& [n, t] : std::vector<std::pair<const char*, Tensor>>{
               {"ada.w", lp.ada_w}, {"ada.b", lp.ada_b}, {"q.w", lp.wq},   {"q.b", lp.bq},   {"k.w", lp.wk},
               {"k.b", lp.bk},      {"v.w", lp.wv},      {"v.b", lp.bv},   {"o.w", lp.wo},   {"o.b", lp.bo},
               {"mlp.w1", lp.w1},   {"mlp.b1", lp.b1},   {"mlp.w2", lp.w2}, {"mlp.b2", lp.b2}}) {
        out.emplace_back(pre + n, t);
      }
    }
    out.emplace_back("final.ada.w", p_.final_ada_w);
    out.emplace_back("final.ada.b", p_.final_ada_b);
    out.emplace_back("out.w", p_.out_w);
    out.emplace_back("out.b", p_.out_b);
    return out;
  }

  std::vector<Tensor> parameters() const {
    std::vector<Tensor> out;
    for (auto& [name, t] : named_parameters()) out.push_back(t);
    return out;
  }

  std::size_t parameter_count() const {
    std::size_t n = 0;
    for (const auto& t : parameters()) n += t.numel();
    return n;
  }

  /// Deep copy with independent parameter storage.
  DiffusionTransformer clone() const {
    DiffusionTransformer copy(cfg_, 0);
    copy.copy_weights_from(*this);
    return copy;
  }

  void copy_weights_from(const DiffusionTransformer& other) {
    if (!(other.cfg_ == cfg_)) throw CheckpointError("copy_weights_from: model configs differ");
    auto dst = parameters();
    auto src = other.parameters();
    for (std::size_t i = 0; i < dst.size(); ++i) dst[i].mutable_value() = src[i].value();
  }

  /// Every parameter drawn from N(0, std^2), including the zero-initialized
  /// gates and output projection; used to test with non-degenerate weights.
  void randomize(std::uint64_t seed, Scalar std = Scalar(0.2)) {
    Rng rng(seed);
    for (auto& t : parameters()) {
      auto& m = t.mutable_value();
      for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = std * rng.normal();
    }
  }

  bool weights_equal(const DiffusionTransformer& other) const {
    auto a = parameters();
    auto b = other.parameters();
    if (a.size() != b.size()) return false;
    for (std::size_t i = 0; i < a.size(); ++i) {
      if (a[i].shape() != b[i].shape() || a[i].value() != b[i].value()) return false;
    }
    return true;
  }

  void save(const std::filesystem::path& path) const {
    std::vector<NamedArray> arrays;
    for (const auto& [name, t] : named_parameters()) arrays.push_back(to_named_array(name, t));
    write_checkpoint(path, arrays);
  }

  /// Loads weights saved by save(); names and shapes must match exactly.
  void load(const std::filesystem::path& path) {
    const auto arrays = read_checkpoint(path);
    auto params = named_parameters();
    if (arrays.size() != params.size()) {
      throw CheckpointError("checkpoint " + path.string() + " has " + std::to_string(arrays.size()) +
                            " parameters, model expects " + std::to_string(params.size()));
    }
    for (std::size_t i = 0; i < params.size(); ++i) {
      auto& [name, t] = params[i];
      const auto& a = arrays[i];
      if (a.name != name || a.dims.size() != 2 || static_cast<int>(a.dims[0]) != t.rows() ||
          static_cast<int>(a.dims[1]) != t.cols()) {
        throw CheckpointError("checkpoint " + path.string() + ": parameter '" + a.name + "' does not match model ('" +
                              name + "' " + std::to_string(t.rows()) + "x" + std::to_string(t.cols()) + ")");
      }
      auto& m = t.mutable_value();
      for (std::size_t k = 0; k < a.data.size(); ++k) m.data()[k] = static_cast<Scalar>(a.data[k]);
    }
  }

  /// Velocity prediction for a token sequence attending to an optional cache
  /// prefix. The mask is (n x (cache + n)). With want_kv the post-RoPE keys
  /// and values of the input tokens are returned for caching.
  ForwardResult forward(const SequenceInput& in, CacheView cache, const AttentionMask& mask, bool want_kv = false,
                        PositionRule rule = PositionRule::after_cache) const {
    const int n = in.size();
    const int d = cfg_.d_model;
    const int m = cache.size();
    if (in.tokens.rows() != n || in.tokens.cols() != cfg_.patch_dim()) throw ShapeError("forward: token shape mismatch");
    if (m > 0) {
      if (cache.cache->layers() != cfg_.layers || cache.cache->d_model() != d) {
        throw CacheError("forward: cache geometry does not match model");
      }
      if (rule == PositionRule::after_cache) {
        const std::int64_t max_cached = cache.max_position();
        for (auto p : in.positions) {
          if (p <= max_cached) {
            throw CacheError("forward: position " + std::to_string(p) + " collides with cache (max " +
                             std::to_string(max_cached) + ")");
          }
        }
      }
    }
    check_mask(mask, n, m + n);

    const Tensor s = silu(condition_embedding(in.groups));
    Tensor x = add(linear(in.tokens, p_.patch_w, p_.patch_b), gather_rows(p_.spatial, in.spatial));

    ForwardResult result;
    if (want_kv) {
      for (int i = 0; i < n; ++i) {
        const int frame = in.frame_of[static_cast<std::size_t>(i)];
        result.kv.meta.push_back({in.positions[static_cast<std::size_t>(i)], frame, frame / cfg_.block_frames});
      }
    }
    for (int l = 0; l < cfg_.layers; ++l) {
      const auto& lp = p_.layers[static_cast<std::size_t>(l)];
      const Tensor mod = gather_rows(linear(s, lp.ada_w, lp.ada_b), in.group_of);
      const Tensor shift1 = slice_cols(mod, 0, d);
      const Tensor scale1 = slice_cols(mod, d, d);
      const Tensor gate1 = slice_cols(mod, 2 * d, d);
      const Tensor shift2 = slice_cols(mod, 3 * d, d);
      const Tensor scale2 = slice_cols(mod, 4 * d, d);
      const Tensor gate2 = slice_cols(mod, 5 * d, d);

      const Tensor a = modulate(layer_norm(x), shift1, scale1);
      const Tensor q = rope(linear(a, lp.wq, lp.bq), in.positions, cfg_.heads, cfg_.rope_base);
      const Tensor k = rope(linear(a, lp.wk, lp.bk), in.positions, cfg_.heads, cfg_.rope_base);
      const Tensor v = linear(a, lp.wv, lp.bv);
      if (want_kv) {
        result.kv.keys.push_back(k.value());
        result.kv.values.push_back(v.value());
      }
      Tensor keys = k;
      Tensor values = v;
      if (m > 0) {
        keys = concat_rows({Tensor::constant(cache.cache->keys(l, m)), k});
        values = concat_rows({Tensor::constant(cache.cache->values(l, m)), v});
      }
      const Tensor attn = linear(multi_head_attention(q, keys, values, mask, cfg_.heads), lp.wo, lp.bo);
      x = add(x, mul(gate1, attn));
      const Tensor h = modulate(layer_norm(x), shift2, scale2);
      x = add(x, mul(gate2, linear(gelu(linear(h, lp.w1, lp.b1)), lp.w2, lp.b2)));
    }
    const Tensor fmod = gather_rows(linear(s, p_.final_ada_w, p_.final_ada_b), in.group_of);
    const Tensor out = modulate(layer_norm(x), slice_cols(fmod, 0, d), slice_cols(fmod, d, d));
    result.velocity = linear(out, p_.out_w, p_.out_b);
    return result;
  }

  /// Sinusoidal timestep features (t scaled by 1000), cos then sin halves.
  static Matrix timestep_features(const std::vector<TokenCondition>& groups, int dim) {
    const int half = dim / 2;
    Matrix feats(static_cast<Eigen::Index>(groups.size()), dim);
    for (std::size_t g = 0; g < groups.size(); ++g) {
      const double t = 1000.0 * static_cast<double>(groups[g].t);
      for (int i = 0; i < half; ++i) {
        const double freq = std::exp(-std::log(10000.0) * i / half);
        feats(static_cast<Eigen::Index>(g), i) = static_cast<Scalar>(std::cos(t * freq));
        feats(static_cast<Eigen::Index>(g), half + i) = static_cast<Scalar>(std::sin(t * freq));
      }
    }
    return feats;
  }

 private:
  Tensor condition_embedding(const std::vector<TokenCondition>& groups) const {
    if (groups.empty()) throw ShapeError("forward: at least one condition group required");
    const Tensor feats = Tensor::constant(timestep_features(groups, cfg_.time_dim));
    const Tensor temb = linear(silu(linear(feats, p_.time_w1, p_.time_b1)), p_.time_w2, p_.time_b2);
    // Rows: scene table, then null vector. Motion table gets a trailing zero row.
    const Tensor first = concat_rows({p_.scene, p_.null_cond});
    const Tensor second = concat_rows({p_.motion, Tensor::zeros(1, cfg_.d_model)});
    std::vector<int> ia;
    std::vector<int> ib;
    for (const auto& g : groups) {
      if (g.cond.is_null) {
        ia.push_back(cfg_.scene_vocab);
        ib.push_back(cfg_.motion_vocab);
      } else {
        if (g.cond.scene_id < 0 || g.cond.scene_id >= cfg_.scene_vocab || g.cond.motion_id < 0 ||
            g.cond.motion_id >= cfg_.motion_vocab) {
          throw BoundsError("condition id outside the model vocabulary");
        }
        ia.push_back(g.cond.scene_id);
        ib.push_back(g.cond.motion_id);
      }
    }
    return add(temb, add(gather_rows(first, std::move(ia)), gather_rows(second, std::move(ib))));
  }

  ModelConfig cfg_;
  ModelParams p_;
};

/// One block forward at a single timestep: positions run consecutively from
/// `start_position`, and the mask must be (block x (cache + block)).
inline ForwardResult forward_denoise(const DiffusionTransformer& model, const Tensor& noisy_block, Scalar t,
                                     const SceneCondition& cond, CacheView cache, const AttentionMask& mask,
                                     int first_frame, std::int64_t start_position, bool want_kv = false,
                                     PositionRule rule = PositionRule::after_cache) {
  const auto seq = make_sequence(noisy_block, model.config().frame_tokens(), first_frame, start_position, {{t, cond}});
  return model.forward(seq, cache, mask, want_kv, rule);
}

}  // namespace mag
