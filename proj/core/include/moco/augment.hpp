#pragma once

#include <random>
#include <utility>

#include "moco/grid.hpp"

namespace moco {

struct AugmentConfig {
  bool enable_jitter = true;
  bool enable_blur = true;
  double crop_scale_min = 0.2;
  double crop_scale_max = 1.0;
  double flip_prob = 0.5;
  double brightness = 0.4;  // factor drawn from [1 - b, 1 + b]
  double contrast = 0.4;    // factor drawn from [1 - c, 1 + c]
  double blur_prob = 0.5;
  double blur_sigma_min = 0.1;
  double blur_sigma_max = 2.0;
};

/// Two independently augmented views of image [C,H,W] with values in [0,1].
/// Geometric ops (resized crop, horizontal flip) run only when local_mode is
/// false; jitter and blur follow their enable flags. Outputs are clamped to
/// [0,1]. All randomness comes from `rng`.
template <typename T>
std::pair<Grid<T>, Grid<T>> augment_pair(const Grid<T>& image, std::mt19937_64& rng,
                                         bool local_mode, const AugmentConfig& config = {});

/// One augmented view (the building block of augment_pair).
template <typename T>
Grid<T> augment_view(const Grid<T>& image, std::mt19937_64& rng, bool local_mode,
                     const AugmentConfig& config);

/// Separable Gaussian blur with radius ceil(3 sigma) and clamped borders.
template <typename T>
Grid<T> gaussian_blur(const Grid<T>& image, double sigma);

}  // namespace moco
