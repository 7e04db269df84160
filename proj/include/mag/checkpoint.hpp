#pragma once

#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <string>
#include <utility>
#include <vector>

#include "mag/tensor.hpp"

namespace mag {

/// One named parameter as stored on disk.
struct NamedArray {
  std::string name;
  std::vector<std::uint32_t> dims;
  std::vector<float> data;
};

namespace detail {

inline void put_u32(std::ostream& out, std::uint32_t v) {
  unsigned char b[4] = {static_cast<unsigned char>(v), static_cast<unsigned char>(v >> 8),
                        static_cast<unsigned char>(v >> 16), static_cast<unsigned char>(v >> 24)};
  out.write(reinterpret_cast<const char*>(b), 4);
}

inline std::uint32_t get_u32(std::istream& in, const std::string& path) {
  unsigned char b[4];
  if (!in.read(reinterpret_cast<char*>(b), 4)) throw CheckpointError("truncated file: " + path);
  return static_cast<std::uint32_t>(b[0]) | (static_cast<std::uint32_t>(b[1]) << 8) |
         (static_cast<std::uint32_t>(b[2]) << 16) | (static_cast<std::uint32_t>(b[3]) << 24);
}

inline void put_f32(std::ostream& out, float f) {
  std::uint32_t bits;
  std::memcpy(&bits, &f, 4);
  put_u32(out, bits);
}

inline float get_f32(std::istream& in, const std::string& path) {
  const std::uint32_t bits = get_u32(in, path);
  float f;
  std::memcpy(&f, &bits, 4);
  return f;
}

}  // namespace detail

inline constexpr char kCheckpointMagic[4] = {'M', 'A', 'G', 'C'};
inline constexpr std::uint32_t kCheckpointVersion = 1;

// Layout (little-endian): "MAGC", u32 version, u32 count, then per array
// u32 name_len, name bytes, u32 rank, u32 dims[rank], f32 data[prod(dims)].
inline void write_checkpoint(const std::filesystem::path& path, const std::vector<NamedArray>& arrays) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw DependencyError("cannot write checkpoint: " + path.string());
  out.write(kCheckpointMagic, 4);
  detail::put_u32(out, kCheckpointVersion);
  detail::put_u32(out, static_cast<std::uint32_t>(arrays.size()));
  for (const auto& a : arrays) {
    detail::put_u32(out, static_cast<std::uint32_t>(a.name.size()));
    out.write(a.name.data(), static_cast<std::streamsize>(a.name.size()));
    detail::put_u32(out, static_cast<std::uint32_t>(a.dims.size()));
    for (auto d : a.dims) detail::put_u32(out, d);
    for (float f : a.data) detail::put_f32(out, f);
  }
  if (!out) throw DependencyError("failed writing checkpoint: " + path.string());
}

inline std::vector<NamedArray> read_checkpoint(const std::filesystem::path& path) {
  const std::string name = path.string();
  std::ifstream in(path, std::ios::binary);
  if (!in) throw CheckpointError("cannot open checkpoint: " + name);
  char magic[4];
  if (!in.read(magic, 4) || std::memcmp(magic, kCheckpointMagic, 4) != 0) {
    throw CheckpointError("bad checkpoint magic in " + name);
  }
  if (const auto version = detail::get_u32(in, name); version != kCheckpointVersion) {
    throw CheckpointError("unsupported checkpoint version " + std::to_string(version) + " in " + name);
  }
  const std::uint32_t count = detail::get_u32(in, name);
  std::vector<NamedArray> arrays(count);
  for (auto& a : arrays) {
    const std::uint32_t len = detail::get_u32(in, name);
    if (len > 4096) throw CheckpointError("corrupt parameter name in " + name);
    a.name.resize(len);
    if (!in.read(a.name.data(), len)) throw CheckpointError("truncated file: " + name);
    const std::uint32_t rank = detail::get_u32(in, name);
    if (rank > 8) throw CheckpointError("corrupt rank in " + name);
    std::size_t total = 1;
    for (std::uint32_t r = 0; r < rank; ++r) {
      a.dims.push_back(detail::get_u32(in, name));
      total *= a.dims.back();
    }
    if (total > (std::size_t{1} << 32)) throw CheckpointError("corrupt dims in " + name);
    a.data.resize(total);
    for (auto& f : a.data) f = detail::get_f32(in, name);
  }
  return arrays;
}

inline NamedArray to_named_array(const std::string& name, const Tensor& t) {
  NamedArray a{name, {static_cast<std::uint32_t>(t.rows()), static_cast<std::uint32_t>(t.cols())}, {}};
  a.data.reserve(t.numel());
  for (Eigen::Index i = 0; i < t.value().size(); ++i) a.data.push_back(static_cast<float>(t.value().data()[i]));
  return a;
}

}  // namespace mag
