#include "moco/diagnostics.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>

#include "json.hpp"
#include "moco/linalg.hpp"

namespace moco {

const char* to_string(FeatureSource s) {
  return s == FeatureSource::kPooledBackbone ? "pooled_backbone" : "projector_embedding";
}

FeatureSource parse_feature_source(const std::string& s) {
  if (s == "pooled" || s == "pooled_backbone") return FeatureSource::kPooledBackbone;
  if (s == "embedding" || s == "projector_embedding") return FeatureSource::kProjectorEmbedding;
  throw ConfigError("unknown feature source '" + s + "' (expected pooled or embedding)");
}

Grid<double> representation_covariance(const Grid<double>& features) {
  if (features.rank() != 2) {
    throw ShapeError("representation_covariance: expected [N,d], got " +
                     to_string(features.shape()));
  }
  if (features.dim(0) < 2) {
    throw ContractError("representation_covariance: needs N >= 2 samples");
  }
  return linalg::row_covariance(linalg::transpose(features));
}

std::vector<double> singular_spectrum(const Grid<double>& c) {
  if (c.rank() != 2 || c.dim(0) != c.dim(1)) {
    throw ContractError("singular_spectrum: expected a square matrix, got " +
                        to_string(c.shape()));
  }
  const double asym = linalg::asymmetry(c);
  if (asym > 1e-8) {
    throw ContractError("singular_spectrum: matrix asymmetric by " + std::to_string(asym));
  }
  std::vector<double> values = linalg::jacobi_eigen(c).values;
  for (double& v : values) v = std::max(v, 0.0);
  std::sort(values.begin(), values.end(), std::greater<>());
  return values;
}

double effective_rank(const std::vector<double>& spectrum) {
  if (spectrum.empty()) throw ContractError("effective_rank: empty spectrum");
  const double top = *std::max_element(spectrum.begin(), spectrum.end());
  if (!(top > 0)) throw ContractError("effective_rank: spectrum has no positive value");
  double total = 0;
  for (double v : spectrum) {
    if (v > 1e-12 * top) total += v;
  }
  double entropy = 0;
  for (double v : spectrum) {
    if (v > 1e-12 * top) {
      const double p = v / total;
      entropy -= p * std::log(p);
    }
  }
  return std::exp(entropy);
}

std::size_t collapse_index(const std::vector<double>& spectrum, double threshold_ratio) {
  if (spectrum.empty()) throw ContractError("collapse_index: empty spectrum");
  if (!(threshold_ratio > 0 && threshold_ratio < 1)) {
    throw ContractError("collapse_index: threshold_ratio must lie in (0, 1)");
  }
  const double top = *std::max_element(spectrum.begin(), spectrum.end());
  return static_cast<std::size_t>(std::count_if(
      spectrum.begin(), spectrum.end(), [&](double v) { return v < threshold_ratio * top; }));
}

SpectrumReport spectrum_report(const Grid<double>& features, FeatureSource source,
                               double threshold_ratio) {
  SpectrumReport r;
  r.singular_values = singular_spectrum(representation_covariance(features));
  for (double v : r.singular_values) r.log10_values.push_back(v > 0 ? std::log10(v) : -16.0);
  r.effective_rank = effective_rank(r.singular_values);
  r.collapse_index = collapse_index(r.singular_values, threshold_ratio);
  r.threshold = threshold_ratio;
  r.feature_dim = features.dim(1);
  r.num_samples = features.dim(0);
  r.source = source;
  return r;
}

void export_spectrum_csv(const SpectrumReport& report, const std::filesystem::path& path) {
  std::ofstream f(path, std::ios::trunc);
  if (!f) throw IoError("cannot write " + path.string());
  f << "index,singular_value,log10_singular_value\n";
  char line[128];
  for (std::size_t i = 0; i < report.singular_values.size(); ++i) {
    const double v = report.singular_values[i];
    const double lg = i < report.log10_values.size() ? report.log10_values[i]
                                                     : (v > 0 ? std::log10(v) : -16.0);
    std::snprintf(line, sizeof line, "%zu,%.17g,%.17g\n", i, v, lg);
    f << line;
  }
  if (!f) throw IoError("write failed: " + path.string());
}

std::string spectrum_report_json(const SpectrumReport& report) {
  nlohmann::ordered_json j;
  j["source"] = to_string(report.source);
  j["feature_dim"] = report.feature_dim;
  j["num_samples"] = report.num_samples;
  j["effective_rank"] = report.effective_rank;
  j["collapse_index"] = report.collapse_index;
  j["threshold"] = report.threshold;
  j["max_singular_value"] = report.singular_values.empty() ? 0.0 : report.singular_values.front();
  j["min_singular_value"] = report.singular_values.empty() ? 0.0 : report.singular_values.back();
  return j.dump(2);
}

template <typename T>
Grid<double> extract_features(const EncoderConfig& encoder, const ProjectorConfig& projector,
                              const NamedGrids<T>& params, const NamedGrids<T>& buffers,
                              const Grid<T>& images, FeatureSource source, std::size_t batch) {
  if (images.rank() != 4) {
    throw ShapeError("extract_features: expected [N,C,H,W], got " + to_string(images.shape()));
  }
  if (batch == 0) throw ContractError("extract_features: batch must be positive");
  const Encoder enc(encoder);
  const Projector proj(projector);
  const std::size_t N = images.dim(0), per = images.size() / N;
  const std::size_t d =
      source == FeatureSource::kPooledBackbone ? encoder.feature_dim() : projector.out_dim;
  Grid<double> out(Shape{N, d});
  NamedGrids<T> frozen = buffers;  // eval mode leaves them untouched
  for (std::size_t start = 0; start < N; start += batch) {
    const std::size_t n = std::min(batch, N - start);
    Shape s = images.shape();
    s[0] = n;
    Grid<T> chunk(s, std::vector<T>(images.data() + start * per, images.data() + (start + n) * per));
    Tape<T> tape(false);
    ParamBinder<T> bind(tape, params, false);
    EncoderOutput<T> o = enc.forward(bind, frozen, tape.constant(std::move(chunk)), Mode::kEval);
    Var<T> f = source == FeatureSource::kPooledBackbone ? o.pooled : proj.forward(bind, o.pooled);
    const Grid<T>& v = f.value();
    for (std::size_t i = 0; i < n * d; ++i) out[start * d + i] = static_cast<double>(v[i]);
  }
  return out;
}

template Grid<double> extract_features<float>(const EncoderConfig&, const ProjectorConfig&,
                                              const NamedGrids<float>&, const NamedGrids<float>&,
                                              const Grid<float>&, FeatureSource, std::size_t);
template Grid<double> extract_features<double>(const EncoderConfig&, const ProjectorConfig&,
                                               const NamedGrids<double>&,
                                               const NamedGrids<double>&, const Grid<double>&,
                                               FeatureSource, std::size_t);

}  // namespace moco
