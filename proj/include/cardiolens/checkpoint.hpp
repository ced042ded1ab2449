#pragma once

// Versioned binary tensor checkpoints.
//
// Layout (all integers and floats little-endian):
//   "CLNS"            4 magic bytes
//   u32 version       currently 1
//   u32 count
//   count x { u32 name_len, name bytes (UTF-8), u32 rank, rank x u64 dim, f64 payload }

#include <algorithm>
#include <array>
#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <stdexcept>
#include <string>
#include <type_traits>
#include <utility>
#include <vector>

#include "cardiolens/tensor.hpp"

namespace cardiolens {

inline constexpr std::array<char, 4> kCheckpointMagic = {'C', 'L', 'N', 'S'};
inline constexpr std::uint32_t kCheckpointVersion = 1;

struct NamedTensor {
  std::string name;
  Tensor tensor;
};

struct CheckpointError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

namespace detail {

template <typename T>
void put_le(std::ostream& out, T v) {
  static_assert(std::is_trivially_copyable_v<T>);
  std::array<unsigned char, sizeof(T)> bytes;
  std::memcpy(bytes.data(), &v, sizeof(T));
  if constexpr (std::endian::native == std::endian::big) std::reverse(bytes.begin(), bytes.end());
  out.write(reinterpret_cast<const char*>(bytes.data()), sizeof(T));
}

template <typename T>
T get_le(std::istream& in) {
  std::array<unsigned char, sizeof(T)> bytes;
  in.read(reinterpret_cast<char*>(bytes.data()), sizeof(T));
  if (in.gcount() != static_cast<std::streamsize>(sizeof(T))) throw CheckpointError("checkpoint truncated");
  if constexpr (std::endian::native == std::endian::big) std::reverse(bytes.begin(), bytes.end());
  T v;
  std::memcpy(&v, bytes.data(), sizeof(T));
  return v;
}

}  // namespace detail

inline void write_checkpoint(std::ostream& out, const std::vector<NamedTensor>& tensors) {
  out.write(kCheckpointMagic.data(), 4);
  detail::put_le<std::uint32_t>(out, kCheckpointVersion);
  detail::put_le<std::uint32_t>(out, static_cast<std::uint32_t>(tensors.size()));
  for (const auto& [name, t] : tensors) {
    detail::put_le<std::uint32_t>(out, static_cast<std::uint32_t>(name.size()));
    out.write(name.data(), static_cast<std::streamsize>(name.size()));
    detail::put_le<std::uint32_t>(out, static_cast<std::uint32_t>(t.rank()));
    for (std::size_t d : t.shape()) detail::put_le<std::uint64_t>(out, d);
    for (double v : t.data()) detail::put_le<double>(out, v);
  }
}

inline std::vector<NamedTensor> read_checkpoint(std::istream& in) {
  std::array<char, 4> magic{};
  in.read(magic.data(), 4);
  if (in.gcount() != 4 || magic != kCheckpointMagic) throw CheckpointError("not a checkpoint (bad magic)");
  const auto version = detail::get_le<std::uint32_t>(in);
  if (version != kCheckpointVersion) throw CheckpointError("unsupported checkpoint version " + std::to_string(version));
  const auto count = detail::get_le<std::uint32_t>(in);
  std::vector<NamedTensor> out;
  out.reserve(count);
  for (std::uint32_t k = 0; k < count; ++k) {
    const auto len = detail::get_le<std::uint32_t>(in);
    std::string name(len, '\0');
    in.read(name.data(), len);
    if (in.gcount() != static_cast<std::streamsize>(len)) throw CheckpointError("checkpoint truncated");
    const auto rank = detail::get_le<std::uint32_t>(in);
    Shape shape(rank);
    for (auto& d : shape) d = static_cast<std::size_t>(detail::get_le<std::uint64_t>(in));
    std::vector<double> data(numel(shape));
    for (double& v : data) v = detail::get_le<double>(in);
    out.push_back({std::move(name), Tensor(std::move(shape), std::move(data))});
  }
  return out;
}

inline void save_checkpoint(const std::filesystem::path& path, const std::vector<NamedTensor>& tensors) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw CheckpointError("cannot write " + path.string());
  write_checkpoint(out, tensors);
  if (!out) throw CheckpointError("write failed for " + path.string());
}

inline std::vector<NamedTensor> load_checkpoint(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw CheckpointError("cannot open " + path.string());
  return read_checkpoint(in);
}

}  // namespace cardiolens
