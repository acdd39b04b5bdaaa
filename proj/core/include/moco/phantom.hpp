#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "moco/grid.hpp"

namespace moco {

struct PhantomConfig {
  std::size_t image_size = 64;
  std::size_t num_classes = 5;  // background + organs
  std::size_t num_samples = 2048;
  std::uint64_t template_seed = 7;
  std::uint64_t sample_seed_base = 1000;
  double deform_amplitude = 0.15;  // peak displacement as a fraction of image_size / 4
  double texture_noise = 0.05;     // half-width of the uniform pixel noise

  /// Throws ConfigError.
  void validate() const;
  /// Class intensity centre 0.1 + 0.8 c / (num_classes - 1).
  double class_center(std::size_t c) const;
  /// Half-width of each class intensity band, 0.4 / (num_classes - 1).
  double band_half_width() const;
};

/// Integer label map [H,W], row-major.
struct LabelMap {
  std::size_t height = 0;
  std::size_t width = 0;
  std::vector<std::uint8_t> labels;

  friend bool operator==(const LabelMap&, const LabelMap&) = default;
};

struct PhantomSample {
  Grid<float> image;  // [1,H,W] in [0,1]
  LabelMap mask;
  std::size_t sample_id = 0;
};

/// Template mask of `config`: one ellipse per organ class on a ring inside a
/// body silhouette (background class), laid out from template_seed.
LabelMap phantom_template(const PhantomConfig& config);

/// Template warped by a smooth sinusoidal displacement field seeded by
/// sample_seed_base + index. Organ pixels take their class band centre plus
/// uniform noise bounded by the band; background pixels use the lower half of
/// the background band outside the body and the upper half inside. Throws ContractError when
/// sample_index >= num_samples.
PhantomSample generate_phantom(const PhantomConfig& config, std::size_t sample_index);

struct DatasetManifest {
  static constexpr int kFormatVersion = 1;
  PhantomConfig config;
  std::size_t count = 0;
  int version = kFormatVersion;
};

/// Writes manifest.json, images.bin (f32) and masks.bin (u8) into `dir`.
DatasetManifest write_dataset(const PhantomConfig& config, const std::filesystem::path& dir);

/// Throws IoError on unreadable, malformed or version-mismatched manifests.
DatasetManifest read_manifest(const std::filesystem::path& dir);

struct Batch {
  Grid<float> images;  // [n,1,H,W]
  std::vector<LabelMap> masks;
};

/// Samples at `indices`, in order, duplicates allowed. Throws ContractError
/// for out-of-range indices and IoError for short files.
Batch load_batch(const std::filesystem::path& dir, const std::vector<std::size_t>& indices);

/// Every sample of `config`, generated in memory.
Batch generate_batch(const PhantomConfig& config);

/// Deterministic subset of round(fraction * count) indices, ascending.
/// fraction == 1 returns every index. Throws ContractError when the subset
/// would be empty or fraction lies outside (0, 1].
std::vector<std::size_t> split_labels(std::size_t count, double fraction,
                                      std::uint64_t combination_seed);
std::vector<std::size_t> split_labels(const DatasetManifest& manifest, double fraction,
                                      std::uint64_t combination_seed);

}  // namespace moco
