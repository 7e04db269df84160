#pragma once

#include <algorithm>
#include <cstdint>
#include <string>
#include <vector>

#include "mag/tensor.hpp"

namespace mag {

enum class RetentionKind { all, last_frame, window };

struct RetentionPolicy {
  RetentionKind kind = RetentionKind::all;
  int window_frames = 0;

  static RetentionPolicy all() { return {RetentionKind::all, 0}; }
  static RetentionPolicy last_frame() { return {RetentionKind::last_frame, 0}; }
  static RetentionPolicy window(int frames) {
    if (frames < 1) throw ConfigError("window retention needs at least one frame");
    return {RetentionKind::window, frames};
  }

  std::string name() const {
    switch (kind) {
      case RetentionKind::all: return "all";
      case RetentionKind::last_frame: return "last_frame";
      case RetentionKind::window: return "window(" + std::to_string(window_frames) + ")";
    }
    return "?";
  }
};

struct TokenMeta {
  std::int64_t position = 0;
  int frame = 0;
  int block = 0;
};

/// Per-layer keys/values (post-RoPE keys) for the tokens of one block.
struct BlockKV {
  std::vector<Matrix> keys;
  std::vector<Matrix> values;
  std::vector<TokenMeta> meta;

  int tokens() const { return static_cast<int>(meta.size()); }
};

/// Retained key/value entries for every layer. All layers retain the same
/// token set, so metadata is shared. Entries stay sorted by position.
class KVCache {
 public:
  KVCache() = default;
  KVCache(int layers, int d_model, RetentionPolicy policy)
      : d_model_(d_model), policy_(policy), keys_(static_cast<std::size_t>(layers)), values_(static_cast<std::size_t>(layers)) {}

  int layers() const { return static_cast<int>(keys_.size()); }
  int d_model() const { return d_model_; }
  const RetentionPolicy& policy() const { return policy_; }
  int entries() const { return static_cast<int>(meta_.size()); }
  bool empty() const { return meta_.empty(); }
  const std::vector<TokenMeta>& meta() const { return meta_; }

  std::int64_t max_position() const { return meta_.empty() ? -1 : meta_.back().position; }
  int max_frame() const { return meta_.empty() ? -1 : meta_.back().frame; }

  // Exactly entries x 2 (K and V) x d_model x 4 bytes per layer.
  std::size_t bytes_per_layer() const { return meta_.size() * 2u * static_cast<std::size_t>(d_model_) * 4u; }
  std::size_t total_bytes() const { return bytes_per_layer() * keys_.size(); }

  /// First `count` entries of a layer as (count x d_model) matrices.
  Eigen::Map<const Matrix> keys(int layer, int count) const { return map(keys_, layer, count); }
  Eigen::Map<const Matrix> values(int layer, int count) const { return map(values_, layer, count); }

  /// Appends a block under the cache's retention policy.
  void append(const BlockKV& block) {
    if (static_cast<int>(block.keys.size()) != layers() || static_cast<int>(block.values.size()) != layers()) {
      throw CacheError("block KV layer count does not match cache");
    }
    if (block.meta.empty()) return;
    std::vector<int> keep;
    if (policy_.kind == RetentionKind::last_frame) {
      int last = block.meta.front().frame;
      for (const auto& m : block.meta) last = std::max(last, m.frame);
      for (int i = 0; i < block.tokens(); ++i) {
        if (block.meta[static_cast<std::size_t>(i)].frame == last) keep.push_back(i);
      }
    } else {
      for (int i = 0; i < block.tokens(); ++i) keep.push_back(i);
    }
    std::int64_t prev = max_position();
    for (int i : keep) {
      const auto& m = block.meta[static_cast<std::size_t>(i)];
      if (m.position <= prev) {
        throw CacheError("cache append out of order: position " + std::to_string(m.position) + " after " +
                         std::to_string(prev));
      }
      prev = m.position;
    }
    for (int l = 0; l < layers(); ++l) {
      const Matrix& K = block.keys[static_cast<std::size_t>(l)];
      const Matrix& V = block.values[static_cast<std::size_t>(l)];
      if (K.cols() != d_model_ || V.cols() != d_model_ || K.rows() != block.tokens() || V.rows() != block.tokens()) {
        throw CacheError("block KV shape does not match cache");
      }
      auto& kd = keys_[static_cast<std::size_t>(l)];
      auto& vd = values_[static_cast<std::size_t>(l)];
      for (int i : keep) {
        kd.insert(kd.end(), K.row(i).data(), K.row(i).data() + d_model_);
        vd.insert(vd.end(), V.row(i).data(), V.row(i).data() + d_model_);
      }
    }
    for (int i : keep) meta_.push_back(block.meta[static_cast<std::size_t>(i)]);
    if (policy_.kind == RetentionKind::window) evict_before(max_frame() - policy_.window_frames + 1);
  }

  /// Drops every entry whose frame index is below `frame`.
  void evict_before(int frame) {
    const auto first_kept = std::find_if(meta_.begin(), meta_.end(), [&](const TokenMeta& m) { return m.frame >= frame; });
    const auto drop = static_cast<std::size_t>(first_kept - meta_.begin());
    if (drop == 0) return;
    meta_.erase(meta_.begin(), first_kept);
    for (auto* store : {&keys_, &values_}) {
      for (auto& layer : *store) layer.erase(layer.begin(), layer.begin() + static_cast<std::ptrdiff_t>(drop * d_model_));
    }
  }

 private:
  Eigen::Map<const Matrix> map(const std::vector<std::vector<Scalar>>& store, int layer, int count) const {
    if (layer < 0 || layer >= layers() || count < 0 || count > entries()) throw BoundsError("KVCache: view out of range");
    return Eigen::Map<const Matrix>(store[static_cast<std::size_t>(layer)].data(), count, d_model_);
  }

  int d_model_ = 0;
  RetentionPolicy policy_;
  std::vector<std::vector<Scalar>> keys_;
  std::vector<std::vector<Scalar>> values_;
  std::vector<TokenMeta> meta_;
};

/// The first `entries` entries of a cache; the state a block saw when it was
/// generated. A null cache means no history.
struct CacheView {
  const KVCache* cache = nullptr;
  int entries = 0;

  static CacheView none() { return {}; }
  static CacheView whole(const KVCache& c) { return {&c, c.entries()}; }
  static CacheView prefix(const KVCache& c, int n) { return {&c, n}; }

  int size() const { return cache ? entries : 0; }
  std::int64_t max_position() const {
    return size() == 0 ? -1 : cache->meta()[static_cast<std::size_t>(entries - 1)].position;
  }
};

}  // namespace mag
