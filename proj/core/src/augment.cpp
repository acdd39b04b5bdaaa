#include "moco/augment.hpp"

#include <algorithm>
#include <cmath>

namespace moco {
namespace {

double uniform(std::mt19937_64& rng, double lo, double hi) {
  return std::uniform_real_distribution<double>(lo, hi)(rng);
}

bool coin(std::mt19937_64& rng, double p) { return uniform(rng, 0.0, 1.0) < p; }

struct CropBox {
  double y0, x0, h, w;
};

// Area fraction in [scale_min, scale_max], log-uniform aspect in [3/4, 4/3];
// ten attempts, then the full frame.
CropBox sample_crop(std::mt19937_64& rng, std::size_t H, std::size_t W, const AugmentConfig& c) {
  const double area = static_cast<double>(H * W);
  for (int attempt = 0; attempt < 10; ++attempt) {
    const double target = area * uniform(rng, c.crop_scale_min, c.crop_scale_max);
    const double ratio = std::exp(uniform(rng, std::log(3.0 / 4.0), std::log(4.0 / 3.0)));
    const double w = std::round(std::sqrt(target * ratio));
    const double h = std::round(std::sqrt(target / ratio));
    if (w >= 1 && h >= 1 && w <= static_cast<double>(W) && h <= static_cast<double>(H)) {
      const double y0 = std::floor(uniform(rng, 0.0, static_cast<double>(H) - h + 1.0));
      const double x0 = std::floor(uniform(rng, 0.0, static_cast<double>(W) - w + 1.0));
      return {y0, x0, h, w};
    }
  }
  return {0, 0, static_cast<double>(H), static_cast<double>(W)};
}

// Bilinear resample of the crop box back to H x W (half-pixel centres).
template <typename T>
Grid<T> resized_crop(const Grid<T>& img, const CropBox& box, bool flip) {
  const std::size_t C = img.dim(0), H = img.dim(1), W = img.dim(2);
  Grid<T> out(img.shape());
  const double sy = box.h / static_cast<double>(H), sx = box.w / static_cast<double>(W);
  for (std::size_t y = 0; y < H; ++y) {
    const double fy = std::clamp(box.y0 + (y + 0.5) * sy - 0.5, 0.0, static_cast<double>(H - 1));
    const auto y0 = static_cast<std::size_t>(fy);
    const std::size_t y1 = std::min(y0 + 1, H - 1);
    const double ay = fy - static_cast<double>(y0);
    for (std::size_t x = 0; x < W; ++x) {
      const std::size_t xs = flip ? W - 1 - x : x;
      const double fx =
          std::clamp(box.x0 + (xs + 0.5) * sx - 0.5, 0.0, static_cast<double>(W - 1));
      const auto x0 = static_cast<std::size_t>(fx);
      const std::size_t x1 = std::min(x0 + 1, W - 1);
      const double ax = fx - static_cast<double>(x0);
      for (std::size_t c = 0; c < C; ++c) {
        const T* p = img.data() + c * H * W;
        const double v = (1 - ay) * ((1 - ax) * p[y0 * W + x0] + ax * p[y0 * W + x1]) +
                         ay * ((1 - ax) * p[y1 * W + x0] + ax * p[y1 * W + x1]);
        out[(c * H + y) * W + x] = static_cast<T>(v);
      }
    }
  }
  return out;
}

}  // namespace

template <typename T>
Grid<T> gaussian_blur(const Grid<T>& image, double sigma) {
  if (image.rank() != 3) throw ShapeError("gaussian_blur: expected [C,H,W], got " +
                                          to_string(image.shape()));
  if (!(sigma > 0)) throw ContractError("gaussian_blur: sigma must be > 0");
  const std::size_t C = image.dim(0), H = image.dim(1), W = image.dim(2);
  const auto r = static_cast<std::ptrdiff_t>(std::ceil(3.0 * sigma));
  std::vector<double> k(static_cast<std::size_t>(2 * r + 1));
  double ks = 0;
  for (std::ptrdiff_t i = -r; i <= r; ++i) {
    const double v = std::exp(-0.5 * static_cast<double>(i * i) / (sigma * sigma));
    k[static_cast<std::size_t>(i + r)] = v;
    ks += v;
  }
  for (double& v : k) v /= ks;
  auto clampi = [](std::ptrdiff_t v, std::size_t n) {
    return static_cast<std::size_t>(std::clamp<std::ptrdiff_t>(v, 0, static_cast<std::ptrdiff_t>(n) - 1));
  };
  std::vector<double> tmp(H * W);
  Grid<T> out(image.shape());
  for (std::size_t c = 0; c < C; ++c) {
    const T* p = image.data() + c * H * W;
    for (std::size_t y = 0; y < H; ++y)
      for (std::size_t x = 0; x < W; ++x) {
        double acc = 0;
        for (std::ptrdiff_t i = -r; i <= r; ++i)
          acc += k[static_cast<std::size_t>(i + r)] *
                 p[y * W + clampi(static_cast<std::ptrdiff_t>(x) + i, W)];
        tmp[y * W + x] = acc;
      }
    for (std::size_t y = 0; y < H; ++y)
      for (std::size_t x = 0; x < W; ++x) {
        double acc = 0;
        for (std::ptrdiff_t i = -r; i <= r; ++i)
          acc += k[static_cast<std::size_t>(i + r)] *
                 tmp[clampi(static_cast<std::ptrdiff_t>(y) + i, H) * W + x];
        out[(c * H + y) * W + x] = static_cast<T>(acc);
      }
  }
  return out;
}

template <typename T>
Grid<T> augment_view(const Grid<T>& image, std::mt19937_64& rng, bool local_mode,
                     const AugmentConfig& config) {
  if (image.rank() != 3) {
    throw ShapeError("augment_pair: expected [C,H,W], got " + to_string(image.shape()));
  }
  Grid<T> v = image;
  if (!local_mode) {
    const CropBox box = sample_crop(rng, image.dim(1), image.dim(2), config);
    const bool flip = coin(rng, config.flip_prob);
    v = resized_crop(image, box, flip);
  }
  if (config.enable_jitter) {
    const double b = uniform(rng, 1.0 - config.brightness, 1.0 + config.brightness);
    const double c = uniform(rng, 1.0 - config.contrast, 1.0 + config.contrast);
    double mean = 0;
    for (T x : v.values()) mean += static_cast<double>(x) * b;
    mean /= static_cast<double>(v.size());
    for (T& x : v.values()) x = static_cast<T>((static_cast<double>(x) * b - mean) * c + mean);
  }
  if (config.enable_blur && coin(rng, config.blur_prob)) {
    v = gaussian_blur(v, uniform(rng, config.blur_sigma_min, config.blur_sigma_max));
  }
  for (T& x : v.values()) x = std::clamp(x, T(0), T(1));
  return v;
}

template <typename T>
std::pair<Grid<T>, Grid<T>> augment_pair(const Grid<T>& image, std::mt19937_64& rng,
                                         bool local_mode, const AugmentConfig& config) {
  Grid<T> q = augment_view(image, rng, local_mode, config);
  Grid<T> k = augment_view(image, rng, local_mode, config);
  return {std::move(q), std::move(k)};
}

template std::pair<Grid<float>, Grid<float>> augment_pair(const Grid<float>&, std::mt19937_64&,
                                                          bool, const AugmentConfig&);
template std::pair<Grid<double>, Grid<double>> augment_pair(const Grid<double>&,
                                                            std::mt19937_64&, bool,
                                                            const AugmentConfig&);
template Grid<float> augment_view(const Grid<float>&, std::mt19937_64&, bool,
                                  const AugmentConfig&);
template Grid<double> augment_view(const Grid<double>&, std::mt19937_64&, bool,
                                   const AugmentConfig&);
template Grid<float> gaussian_blur(const Grid<float>&, double);
template Grid<double> gaussian_blur(const Grid<double>&, double);

}  // namespace moco
