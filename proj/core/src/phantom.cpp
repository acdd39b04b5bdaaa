#include "moco/phantom.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numeric>
#include <random>

#include "json.hpp"

namespace moco {

void PhantomConfig::validate() const {
  if (image_size < 8) throw ConfigError("image_size must be >= 8");
  if (num_classes < 2 || num_classes > 255) {
    throw ConfigError("num_classes must lie in [2, 255]");
  }
  if (num_samples == 0) throw ConfigError("num_samples must be positive");
  if (!(deform_amplitude >= 0 && deform_amplitude < 0.5)) {
    throw ConfigError("deform_amplitude must lie in [0, 0.5)");
  }
  if (!(texture_noise >= 0)) throw ConfigError("texture_noise must be >= 0");
}

double PhantomConfig::class_center(std::size_t c) const {
  return 0.1 + 0.8 * static_cast<double>(c) / static_cast<double>(num_classes - 1);
}

double PhantomConfig::band_half_width() const {
  return 0.4 / static_cast<double>(num_classes - 1);
}

namespace {

constexpr double kPi = 3.14159265358979323846;

double uniform(std::mt19937_64& rng, double lo, double hi) {
  return std::uniform_real_distribution<double>(lo, hi)(rng);
}

struct Ellipse {
  double cx, cy, a, b, theta;

  bool contains(double x, double y) const {
    const double dx = x - cx, dy = y - cy;
    const double u = dx * std::cos(theta) + dy * std::sin(theta);
    const double v = -dx * std::sin(theta) + dy * std::cos(theta);
    return (u * u) / (a * a) + (v * v) / (b * b) <= 1.0;
  }
};

struct Wave {
  int axis;  // 0: x displacement, 1: y displacement
  double kx, ky, phase, weight;
};

// Label map plus a body silhouette inside the background class; the
// silhouette splits the background band into two halves.
struct Template {
  LabelMap labels;
  std::vector<std::uint8_t> body;
};

// Organs sit on a ring inside the body so every class stays inside the frame
// under any displacement below a quarter of the image size.
Template build_template(const PhantomConfig& config) {
  config.validate();
  const std::size_t n = config.image_size, organs = config.num_classes - 1;
  const double size = static_cast<double>(n);
  const double shrink = std::min(1.0, 4.0 / static_cast<double>(organs));
  std::mt19937_64 rng(config.template_seed);
  std::vector<Ellipse> blobs;
  for (std::size_t i = 0; i < organs; ++i) {
    const double slot = 2.0 * kPi / static_cast<double>(organs);
    const double angle = slot * static_cast<double>(i) + uniform(rng, -0.2, 0.2) * slot;
    const double radius = organs == 1 ? 0.0 : size * uniform(rng, 0.17, 0.21);
    Ellipse e;
    e.cx = 0.5 * size + radius * std::cos(angle);
    e.cy = 0.5 * size + radius * std::sin(angle);
    e.a = size * shrink * uniform(rng, 0.12, 0.16);
    e.b = size * shrink * uniform(rng, 0.09, 0.13);
    e.theta = uniform(rng, 0.0, kPi);
    blobs.push_back(e);
  }
  const Ellipse torso{0.5 * size, 0.5 * size, 0.45 * size, 0.38 * size, 0.0};
  Template t{LabelMap{n, n, std::vector<std::uint8_t>(n * n, 0)},
             std::vector<std::uint8_t>(n * n, 0)};
  for (std::size_t y = 0; y < n; ++y) {
    for (std::size_t x = 0; x < n; ++x) {
      const double px = static_cast<double>(x) + 0.5, py = static_cast<double>(y) + 0.5;
      t.body[y * n + x] = torso.contains(px, py) ? 1 : 0;
      for (std::size_t i = 0; i < organs; ++i) {
        if (blobs[i].contains(px, py)) t.labels.labels[y * n + x] = static_cast<std::uint8_t>(i + 1);
      }
    }
  }
  return t;
}

}  // namespace

LabelMap phantom_template(const PhantomConfig& config) { return build_template(config).labels; }

PhantomSample generate_phantom(const PhantomConfig& config, std::size_t sample_index) {
  if (sample_index >= config.num_samples) {
    throw ContractError("generate_phantom: index " + std::to_string(sample_index) +
                        " >= num_samples " + std::to_string(config.num_samples));
  }
  const Template tmpl = build_template(config);
  const std::size_t n = config.image_size;
  const double size = static_cast<double>(n);
  std::mt19937_64 rng(config.sample_seed_base + sample_index);

  const int count = std::uniform_int_distribution<int>(4, 8)(rng);
  std::vector<Wave> waves;
  double weight_sum[2] = {0, 0};
  for (int i = 0; i < count; ++i) {
    Wave w;
    w.axis = std::uniform_int_distribution<int>(0, 1)(rng);
    do {
      w.kx = std::uniform_int_distribution<int>(0, 2)(rng);
      w.ky = std::uniform_int_distribution<int>(0, 2)(rng);
    } while (w.kx == 0 && w.ky == 0);
    w.phase = uniform(rng, 0.0, 2.0 * kPi);
    w.weight = uniform(rng, 0.5, 1.0);
    weight_sum[w.axis] += w.weight;
    waves.push_back(w);
  }
  // Each axis' weights sum to 1, so |displacement| <= deform_amplitude * size / 4.
  const double amp = 0.25 * config.deform_amplitude * size;

  PhantomSample s;
  s.sample_id = sample_index;
  std::vector<std::uint8_t> tissue(n * n);
  s.mask = LabelMap{n, n, std::vector<std::uint8_t>(n * n, 0)};
  for (std::size_t y = 0; y < n; ++y) {
    for (std::size_t x = 0; x < n; ++x) {
      const double px = static_cast<double>(x) + 0.5, py = static_cast<double>(y) + 0.5;
      double d[2] = {0, 0};
      for (const Wave& w : waves) {
        d[w.axis] += w.weight / weight_sum[w.axis] *
                     std::sin(2.0 * kPi * (w.kx * px + w.ky * py) / size + w.phase);
      }
      const double sx = std::floor(px + amp * d[0]), sy = std::floor(py + amp * d[1]);
      std::uint8_t label = 0, body = 0;
      if (sx >= 0 && sy >= 0 && sx < size && sy < size) {
        const std::size_t src = static_cast<std::size_t>(sy) * n + static_cast<std::size_t>(sx);
        label = tmpl.labels.labels[src];
        body = tmpl.body[src];
      }
      s.mask.labels[y * n + x] = label;
      tissue[y * n + x] = body;
    }
  }

  // Organ pixels: centre +- noise within the band. Background pixels: the
  // lower (air) or upper (body) half of the background band.
  const double hw = config.band_half_width();
  s.image = Grid<float>(Shape{1, n, n});
  for (std::size_t i = 0; i < n * n; ++i) {
    const std::uint8_t c = s.mask.labels[i];
    double centre = config.class_center(c), reach = hw;
    if (c == 0) {
      centre += tissue[i] ? 0.5 * hw : -0.5 * hw;
      reach = 0.5 * hw;
    }
    const double noise = std::min(config.texture_noise, reach);
    const double u = noise > 0 ? uniform(rng, -noise, noise) : 0.0;
    s.image[i] = static_cast<float>(std::clamp(centre + u, 0.0, 1.0));
  }
  return s;
}

namespace {

nlohmann::ordered_json config_to_json(const PhantomConfig& c) {
  nlohmann::ordered_json j;
  j["image_size"] = c.image_size;
  j["num_classes"] = c.num_classes;
  j["num_samples"] = c.num_samples;
  j["template_seed"] = c.template_seed;
  j["sample_seed_base"] = c.sample_seed_base;
  j["deform_amplitude"] = c.deform_amplitude;
  j["texture_noise"] = c.texture_noise;
  return j;
}

PhantomConfig config_from_json(const nlohmann::json& j) {
  PhantomConfig c;
  c.image_size = j.at("image_size").get<std::size_t>();
  c.num_classes = j.at("num_classes").get<std::size_t>();
  c.num_samples = j.at("num_samples").get<std::size_t>();
  c.template_seed = j.at("template_seed").get<std::uint64_t>();
  c.sample_seed_base = j.at("sample_seed_base").get<std::uint64_t>();
  c.deform_amplitude = j.at("deform_amplitude").get<double>();
  c.texture_noise = j.at("texture_noise").get<double>();
  return c;
}

std::uintmax_t file_size_or_throw(const std::filesystem::path& p) {
  std::error_code ec;
  const auto size = std::filesystem::file_size(p, ec);
  if (ec) throw IoError("cannot stat " + p.string() + ": " + ec.message());
  return size;
}

}  // namespace

DatasetManifest write_dataset(const PhantomConfig& config, const std::filesystem::path& dir) {
  config.validate();
  std::filesystem::create_directories(dir);
  std::ofstream images(dir / "images.bin", std::ios::binary | std::ios::trunc);
  std::ofstream masks(dir / "masks.bin", std::ios::binary | std::ios::trunc);
  if (!images || !masks) throw IoError("cannot write dataset files in " + dir.string());
  for (std::size_t i = 0; i < config.num_samples; ++i) {
    const PhantomSample s = generate_phantom(config, i);
    images.write(reinterpret_cast<const char*>(s.image.data()),
                 static_cast<std::streamsize>(s.image.size() * sizeof(float)));
    masks.write(reinterpret_cast<const char*>(s.mask.labels.data()),
                static_cast<std::streamsize>(s.mask.labels.size()));
  }
  if (!images || !masks) throw IoError("write failed in " + dir.string());

  DatasetManifest m{config, config.num_samples, DatasetManifest::kFormatVersion};
  nlohmann::ordered_json j;
  j["format"] = "moco-phantom";
  j["version"] = m.version;
  j["count"] = m.count;
  j["channels"] = 1;
  j["config"] = config_to_json(config);
  std::ofstream f(dir / "manifest.json", std::ios::trunc);
  if (!f) throw IoError("cannot write " + (dir / "manifest.json").string());
  f << j.dump(2) << '\n';
  return m;
}

DatasetManifest read_manifest(const std::filesystem::path& dir) {
  const auto path = dir / "manifest.json";
  std::ifstream f(path);
  if (!f) throw IoError("cannot open " + path.string());
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(f);
  } catch (const nlohmann::json::parse_error& e) {
    throw IoError(path.string() + ": parse error at byte " + std::to_string(e.byte) + ": " +
                  e.what());
  }
  DatasetManifest m;
  try {
    if (j.at("format").get<std::string>() != "moco-phantom") {
      throw IoError(path.string() + ": not a phantom dataset manifest");
    }
    m.version = j.at("version").get<int>();
    if (m.version != DatasetManifest::kFormatVersion) {
      throw IoError(path.string() + ": unsupported dataset version " + std::to_string(m.version));
    }
    m.count = j.at("count").get<std::size_t>();
    m.config = config_from_json(j.at("config"));
  } catch (const nlohmann::json::exception& e) {
    throw IoError(path.string() + ": malformed manifest: " + e.what());
  }
  try {
    m.config.validate();
  } catch (const ConfigError& e) {
    throw IoError(path.string() + ": " + e.what());
  }
  if (m.count != m.config.num_samples) {
    throw IoError(path.string() + ": count disagrees with config.num_samples");
  }
  return m;
}

Batch load_batch(const std::filesystem::path& dir, const std::vector<std::size_t>& indices) {
  const DatasetManifest m = read_manifest(dir);
  const std::size_t n = m.config.image_size, px = n * n;
  const auto images_path = dir / "images.bin", masks_path = dir / "masks.bin";
  if (file_size_or_throw(images_path) != m.count * px * sizeof(float) ||
      file_size_or_throw(masks_path) != m.count * px) {
    throw IoError("dataset files in " + dir.string() + " do not match the manifest count");
  }
  std::ifstream images(images_path, std::ios::binary), masks(masks_path, std::ios::binary);
  if (!images || !masks) throw IoError("cannot open dataset files in " + dir.string());
  if (indices.empty()) throw ContractError("load_batch: no indices requested");

  Batch b;
  b.images = Grid<float>(Shape{indices.size(), 1, n, n});
  for (std::size_t k = 0; k < indices.size(); ++k) {
    const std::size_t i = indices[k];
    if (i >= m.count) {
      throw ContractError("load_batch: index " + std::to_string(i) + " out of range (count " +
                          std::to_string(m.count) + ")");
    }
    images.seekg(static_cast<std::streamoff>(i * px * sizeof(float)));
    images.read(reinterpret_cast<char*>(b.images.data() + k * px),
                static_cast<std::streamsize>(px * sizeof(float)));
    LabelMap mask{n, n, std::vector<std::uint8_t>(px)};
    masks.seekg(static_cast<std::streamoff>(i * px));
    masks.read(reinterpret_cast<char*>(mask.labels.data()), static_cast<std::streamsize>(px));
    if (!images || !masks) throw IoError("short read in " + dir.string());
    b.masks.push_back(std::move(mask));
  }
  return b;
}

Batch generate_batch(const PhantomConfig& config) {
  config.validate();
  const std::size_t n = config.image_size, px = n * n;
  Batch b;
  b.images = Grid<float>(Shape{config.num_samples, 1, n, n});
  for (std::size_t i = 0; i < config.num_samples; ++i) {
    PhantomSample s = generate_phantom(config, i);
    std::copy(s.image.data(), s.image.data() + px, b.images.data() + i * px);
    b.masks.push_back(std::move(s.mask));
  }
  return b;
}

std::vector<std::size_t> split_labels(std::size_t count, double fraction,
                                      std::uint64_t combination_seed) {
  if (!(fraction > 0 && fraction <= 1)) {
    throw ContractError("split_labels: fraction must lie in (0, 1]");
  }
  const auto k = static_cast<std::size_t>(std::llround(fraction * static_cast<double>(count)));
  if (k == 0) {
    throw ContractError("split_labels: fraction " + std::to_string(fraction) + " of " +
                        std::to_string(count) + " samples selects none");
  }
  std::vector<std::size_t> all(count);
  std::iota(all.begin(), all.end(), std::size_t{0});
  if (k >= count) return all;
  std::vector<std::size_t> out;
  out.reserve(k);
  std::mt19937_64 rng(combination_seed);
  std::sample(all.begin(), all.end(), std::back_inserter(out), k, rng);
  return out;
}

std::vector<std::size_t> split_labels(const DatasetManifest& manifest, double fraction,
                                      std::uint64_t combination_seed) {
  return split_labels(manifest.count, fraction, combination_seed);
}

}  // namespace moco
