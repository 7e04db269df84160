#pragma once

#include <string>

#include "mag/attention.hpp"

namespace mag {

/// Current block (n tokens) against m cached tokens plus itself. Every entry
/// is visible: causality comes from what the cache holds.
inline AttentionMask build_inference_mask(int cache_len, int block_tokens) {
  if (cache_len < 0 || block_tokens < 0) throw ShapeError("build_inference_mask: negative length");
  return AttentionMask::all_visible(block_tokens, cache_len + block_tokens, MaskKind::inference_block_causal);
}

inline AttentionMask build_bidirectional_mask(int tokens) {
  return AttentionMask::all_visible(tokens, tokens, MaskKind::bidirectional);
}

/// Layout of the memory-training sequence: [noise blocks 0..n-1 | clean blocks 0..n-1],
/// each block b*f tokens, frames in order, f tokens per frame.
struct MemoryLayout {
  int n_blocks = 1;
  int block_frames = 1;
  int frame_tokens = 1;

  int block_tokens() const { return block_frames * frame_tokens; }
  int segment_tokens() const { return n_blocks * block_tokens(); }
  int total_tokens() const { return 2 * segment_tokens(); }
  int noise_begin(int block) const { return block * block_tokens(); }
  int clean_begin(int block) const { return segment_tokens() + block * block_tokens(); }
  // First token of the retained (last) frame of a clean block.
  int retained_begin(int block) const { return clean_begin(block) + (block_frames - 1) * frame_tokens; }
};

/// Encoder rows (clean block j): all of clean block j plus the retained last
/// frame of every earlier clean block. Decoder rows (noise block j): noise
/// block j itself plus the retained last frame of clean blocks 0..j.
inline AttentionMask build_memory_mask(int n_blocks, int block_frames, int frame_tokens) {
  if (n_blocks < 1 || block_frames < 1 || frame_tokens < 1) throw ShapeError("build_memory_mask: sizes must be >= 1");
  const MemoryLayout L{n_blocks, block_frames, frame_tokens};
  const int n = L.total_tokens();
  AttentionMask mask(n, n, MaskKind::memory_training);
  const int bt = L.block_tokens();
  for (int j = 0; j < n_blocks; ++j) {
    for (int q = L.clean_begin(j); q < L.clean_begin(j) + bt; ++q) {
      mask.set_range(q, L.clean_begin(j), L.clean_begin(j) + bt);
      for (int i = 0; i < j; ++i) mask.set_range(q, L.retained_begin(i), L.retained_begin(i) + frame_tokens);
    }
    for (int q = L.noise_begin(j); q < L.noise_begin(j) + bt; ++q) {
      mask.set_range(q, L.noise_begin(j), L.noise_begin(j) + bt);
      for (int i = 0; i <= j; ++i) mask.set_range(q, L.retained_begin(i), L.retained_begin(i) + frame_tokens);
    }
  }
  return mask;
}

/// Checks the structural contract of a memory-training mask. Returns an empty
/// string when valid, otherwise a description of the first violation.
inline std::string validate_memory_mask(const AttentionMask& mask, int n_blocks, int block_frames, int frame_tokens) {
  const MemoryLayout L{n_blocks, block_frames, frame_tokens};
  if (mask.kind() != MaskKind::memory_training) return "mask is not tagged memory_training";
  if (mask.queries() != L.total_tokens() || mask.keys() != L.total_tokens()) return "mask size does not match layout";
  if (mask.first_empty_row() >= 0) return "mask has a row with no visible key";
  const int bt = L.block_tokens();
  auto is_retained = [&](int k, int upto_block) {
    for (int i = 0; i <= upto_block; ++i) {
      if (k >= L.retained_begin(i) && k < L.retained_begin(i) + frame_tokens) return true;
    }
    return false;
  };
  for (int j = 0; j < n_blocks; ++j) {
    for (int q = L.noise_begin(j); q < L.noise_begin(j) + bt; ++q) {
      const int expected = bt + (j + 1) * frame_tokens;
      if (mask.row_count(q) != expected) {
        return "noise row " + std::to_string(q) + " sees " + std::to_string(mask.row_count(q)) + " keys, expected " +
               std::to_string(expected);
      }
      for (int k = 0; k < mask.keys(); ++k) {
        const bool own = k >= L.noise_begin(j) && k < L.noise_begin(j) + bt;
        if (mask.visible(q, k) != (own || is_retained(k, j))) return "noise row " + std::to_string(q) + " has wrong visibility";
      }
    }
    for (int q = L.clean_begin(j); q < L.clean_begin(j) + bt; ++q) {
      for (int k = 0; k < mask.keys(); ++k) {
        const bool own = k >= L.clean_begin(j) && k < L.clean_begin(j) + bt;
        if (mask.visible(q, k) != (own || is_retained(k, j - 1))) return "clean row " + std::to_string(q) + " has wrong visibility";
      }
    }
  }
  return {};
}

/// Inference masks must be all-visible and shaped n x (m + n).
inline bool validate_inference_mask(const AttentionMask& mask, int cache_len, int block_tokens) {
  return mask.kind() == MaskKind::inference_block_causal && mask.queries() == block_tokens &&
         mask.keys() == cache_len + block_tokens && mask.all_true() && (block_tokens == 0 || mask.first_empty_row() < 0);
}

}  // namespace mag
