#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <string>
#include <vector>

#include "moco/grid.hpp"

namespace moco {

enum class Dtype : std::uint8_t { kF32 = 0, kF64 = 1, kU64 = 2 };

const char* to_string(Dtype d);
std::size_t dtype_size(Dtype d);

template <typename T>
constexpr Dtype dtype_of();
template <>
constexpr Dtype dtype_of<float>() { return Dtype::kF32; }
template <>
constexpr Dtype dtype_of<double>() { return Dtype::kF64; }
template <>
constexpr Dtype dtype_of<std::uint64_t>() { return Dtype::kU64; }

/// One named array: shape plus little-endian payload bytes.
struct CheckpointArray {
  Dtype dtype = Dtype::kF32;
  Shape shape;
  std::vector<unsigned char> bytes;
};

/// "MMC1" container:
///   magic "MMC1", u32 version, u32 array count, then per array
///   u16 name length, name bytes, u8 dtype, u8 rank, u64 dims[rank], payload.
/// Arrays are written in name order, so equal contents give equal files.
class Checkpoint {
 public:
  static constexpr std::uint32_t kVersion = 1;

  template <typename T>
  void put(const std::string& name, const Grid<T>& grid);
  void put_u64(const std::string& name, const std::vector<std::uint64_t>& values);

  bool has(const std::string& name) const { return arrays_.count(name) != 0; }
  const CheckpointArray& at(const std::string& name) const;
  void erase(const std::string& name) { arrays_.erase(name); }
  const std::map<std::string, CheckpointArray>& arrays() const { return arrays_; }

  /// Throws CheckpointError(kMissingArray / kBadDtype).
  template <typename T>
  Grid<T> grid(const std::string& name) const;
  std::vector<std::uint64_t> u64(const std::string& name) const;

  /// Writes to `path` through a temporary sibling and a rename.
  void save(const std::filesystem::path& path) const;
  /// Throws CheckpointError with kIo, kBadMagic, kBadVersion, kTruncated or
  /// kBadDtype.
  static Checkpoint load(const std::filesystem::path& path);

  std::vector<unsigned char> serialize() const;
  static Checkpoint deserialize(const std::vector<unsigned char>& bytes);

 private:
  std::map<std::string, CheckpointArray> arrays_;
};

}  // namespace moco
