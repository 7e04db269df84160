#pragma once

#include <zlib.h>

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include "mag/checkpoint.hpp"
#include "mag/synthworld.hpp"

namespace mag {

inline constexpr char kClipMagic[4] = {'M', 'A', 'G', 'V'};
inline constexpr std::uint32_t kClipVersion = 1;

// 24-byte header: "MAGV", u32 version, u32 T, H, W, C; then little-endian f32
// samples in planar order (frame, channel, row, column).
inline void write_clip(const std::filesystem::path& path, const VideoClip& clip) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw DependencyError("cannot write clip: " + path.string());
  out.write(kClipMagic, 4);
  for (auto v : {kClipVersion, static_cast<std::uint32_t>(clip.frames), static_cast<std::uint32_t>(clip.height),
                 static_cast<std::uint32_t>(clip.width), static_cast<std::uint32_t>(clip.channels)}) {
    detail::put_u32(out, v);
  }
  for (int t = 0; t < clip.frames; ++t) {
    for (int ch = 0; ch < clip.channels; ++ch) {
      for (int r = 0; r < clip.height; ++r) {
        for (int c = 0; c < clip.width; ++c) detail::put_f32(out, clip.at(t, r, c, ch));
      }
    }
  }
  if (!out) throw DependencyError("failed writing clip: " + path.string());
}

inline VideoClip read_clip(const std::filesystem::path& path) {
  const std::string name = path.string();
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DependencyError("cannot open clip: " + name);
  char magic[4];
  if (!in.read(magic, 4) || std::memcmp(magic, kClipMagic, 4) != 0) throw DependencyError("bad clip magic in " + name);
  const std::uint32_t version = detail::get_u32(in, name);
  if (version != kClipVersion) throw DependencyError("unsupported clip version in " + name);
  const auto T = detail::get_u32(in, name);
  const auto H = detail::get_u32(in, name);
  const auto W = detail::get_u32(in, name);
  const auto C = detail::get_u32(in, name);
  if (static_cast<std::uint64_t>(T) * H * W * C > (1ull << 31)) throw DependencyError("clip too large: " + name);
  VideoClip clip(static_cast<int>(T), static_cast<int>(H), static_cast<int>(W), static_cast<int>(C));
  for (int t = 0; t < clip.frames; ++t) {
    for (int ch = 0; ch < clip.channels; ++ch) {
      for (int r = 0; r < clip.height; ++r) {
        for (int c = 0; c < clip.width; ++c) clip.at(t, r, c, ch) = detail::get_f32(in, name);
      }
    }
  }
  return clip;
}

namespace detail {

inline std::uint8_t to_byte(float v) {
  return static_cast<std::uint8_t>(std::lround(std::clamp(v, 0.0f, 1.0f) * 255.0f));
}

inline void put_be32(std::vector<std::uint8_t>& out, std::uint32_t v) {
  for (int s = 24; s >= 0; s -= 8) out.push_back(static_cast<std::uint8_t>(v >> s));
}

inline void png_chunk(std::ofstream& out, const char* type, const std::vector<std::uint8_t>& payload) {
  std::vector<std::uint8_t> buf;
  put_be32(buf, static_cast<std::uint32_t>(payload.size()));
  buf.insert(buf.end(), type, type + 4);
  buf.insert(buf.end(), payload.begin(), payload.end());
  const uLong crc = crc32(crc32(0L, Z_NULL, 0), buf.data() + 4, static_cast<uInt>(buf.size() - 4));
  put_be32(buf, static_cast<std::uint32_t>(crc));
  out.write(reinterpret_cast<const char*>(buf.data()), static_cast<std::streamsize>(buf.size()));
}

}  // namespace detail

/// 8-bit grayscale PNG of one frame (first channel).
inline void write_png(const std::filesystem::path& path, const VideoClip& clip, int frame) {
  std::vector<std::uint8_t> raw;
  raw.reserve(static_cast<std::size_t>(clip.height) * (clip.width + 1));
  for (int r = 0; r < clip.height; ++r) {
    raw.push_back(0);  // filter: none
    for (int c = 0; c < clip.width; ++c) raw.push_back(detail::to_byte(clip.at(frame, r, c)));
  }
  uLongf packed_len = compressBound(static_cast<uLong>(raw.size()));
  std::vector<std::uint8_t> packed(packed_len);
  if (compress2(packed.data(), &packed_len, raw.data(), static_cast<uLong>(raw.size()), 9) != Z_OK) {
    throw DependencyError("zlib compression failed for " + path.string());
  }
  packed.resize(packed_len);

  std::ofstream out(path, std::ios::binary);
  if (!out) throw DependencyError("cannot write png: " + path.string());
  const std::uint8_t signature[8] = {0x89, 'P', 'N', 'G', '\r', '\n', 0x1a, '\n'};
  out.write(reinterpret_cast<const char*>(signature), 8);
  std::vector<std::uint8_t> ihdr;
  detail::put_be32(ihdr, static_cast<std::uint32_t>(clip.width));
  detail::put_be32(ihdr, static_cast<std::uint32_t>(clip.height));
  ihdr.insert(ihdr.end(), {8, 0, 0, 0, 0});  // 8-bit grayscale
  detail::png_chunk(out, "IHDR", ihdr);
  detail::png_chunk(out, "IDAT", packed);
  detail::png_chunk(out, "IEND", {});
}

inline void write_png_frames(const std::filesystem::path& dir, const VideoClip& clip, const std::string& stem = "frame") {
  std::filesystem::create_directories(dir);
  for (int t = 0; t < clip.frames; ++t) {
    char name[64];
    std::snprintf(name, sizeof(name), "%s_%04d.png", stem.c_str(), t);
    write_png(dir / name, clip, t);
  }
}

/// Animated grayscale GIF. LZW output uses 9-bit codes with a clear code
/// every 254 symbols so the code table never grows.
inline void write_gif(const std::filesystem::path& path, const VideoClip& clip, int delay_cs = 10, int upscale = 4) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw DependencyError("cannot write gif: " + path.string());
  const int W = clip.width * upscale;
  const int H = clip.height * upscale;
  auto u16 = [&](int v) {
    out.put(static_cast<char>(v & 0xff));
    out.put(static_cast<char>((v >> 8) & 0xff));
  };
  out.write("GIF89a", 6);
  u16(W);
  u16(H);
  out.put(static_cast<char>(0xF7));  // global table, 8 bits, 256 entries
  out.put(0);
  out.put(0);
  for (int i = 0; i < 256; ++i) {
    for (int k = 0; k < 3; ++k) out.put(static_cast<char>(i));
  }
  const unsigned char loop[] = {0x21, 0xFF, 0x0B, 'N', 'E', 'T', 'S', 'C', 'A', 'P', 'E', '2', '.', '0', 0x03, 0x01, 0x00, 0x00, 0x00};
  out.write(reinterpret_cast<const char*>(loop), sizeof(loop));
  for (int t = 0; t < clip.frames; ++t) {
    const unsigned char gce[] = {0x21, 0xF9, 0x04, 0x00, static_cast<unsigned char>(delay_cs & 0xff),
                                 static_cast<unsigned char>(delay_cs >> 8), 0x00, 0x00};
    out.write(reinterpret_cast<const char*>(gce), sizeof(gce));
    out.put(0x2C);
    u16(0);
    u16(0);
    u16(W);
    u16(H);
    out.put(0);
    out.put(8);  // LZW minimum code size

    std::vector<std::uint8_t> bytes;
    std::uint32_t bitbuf = 0;
    int bits = 0;
    auto emit = [&](int code) {
      bitbuf |= static_cast<std::uint32_t>(code) << bits;
      bits += 9;
      while (bits >= 8) {
        bytes.push_back(static_cast<std::uint8_t>(bitbuf & 0xff));
        bitbuf >>= 8;
        bits -= 8;
      }
    };
    int run = 0;
    emit(256);
    for (int y = 0; y < H; ++y) {
      for (int x = 0; x < W; ++x) {
        if (run == 254) {
          emit(256);
          run = 0;
        }
        emit(detail::to_byte(clip.at(t, y / upscale, x / upscale)));
        ++run;
      }
    }
    emit(257);
    if (bits > 0) bytes.push_back(static_cast<std::uint8_t>(bitbuf & 0xff));
    for (std::size_t i = 0; i < bytes.size(); i += 255) {
      const std::size_t n = std::min<std::size_t>(255, bytes.size() - i);
      out.put(static_cast<char>(n));
      out.write(reinterpret_cast<const char*>(bytes.data() + i), static_cast<std::streamsize>(n));
    }
    out.put(0);
  }
  out.put(0x3B);
}

}  // namespace mag
