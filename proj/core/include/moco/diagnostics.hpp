#pragma once

#include <filesystem>
#include <string>
#include <vector>

#include "moco/grid.hpp"
#include "moco/nets.hpp"

namespace moco {

enum class FeatureSource { kPooledBackbone, kProjectorEmbedding };

const char* to_string(FeatureSource s);
/// Accepts "pooled" / "pooled_backbone" and "embedding" / "projector_embedding".
FeatureSource parse_feature_source(const std::string& s);

struct SpectrumReport {
  std::vector<double> singular_values;  // descending, >= 0
  std::vector<double> log10_values;     // -16 where the value is 0
  double effective_rank = 0;
  std::size_t collapse_index = 0;
  double threshold = 1e-4;
  std::size_t feature_dim = 0;
  std::size_t num_samples = 0;
  FeatureSource source = FeatureSource::kPooledBackbone;
};

/// Population covariance (1/N) sum (f - mu)(f - mu)^T of features [N,d].
/// Throws ContractError for N < 2.
Grid<double> representation_covariance(const Grid<double>& features);

/// Eigenvalues of symmetric C, descending, negative round-off clamped to 0.
/// Throws ContractError when C is not square or asymmetric beyond 1e-8.
std::vector<double> singular_spectrum(const Grid<double>& c);

/// exp(-sum p log p) with p = s / sum(s), after dropping values <= 1e-12 max.
/// Throws ContractError for an empty or all-zero spectrum.
double effective_rank(const std::vector<double>& spectrum);

/// Number of values < threshold_ratio * max. Throws ContractError for an
/// empty spectrum or a ratio outside (0, 1).
std::size_t collapse_index(const std::vector<double>& spectrum, double threshold_ratio = 1e-4);

SpectrumReport spectrum_report(const Grid<double>& features, FeatureSource source,
                               double threshold_ratio = 1e-4);

/// header index,singular_value,log10_singular_value; 17 significant digits.
void export_spectrum_csv(const SpectrumReport& report, const std::filesystem::path& path);

/// Report summary (without the per-dimension values) as a JSON object.
std::string spectrum_report_json(const SpectrumReport& report);

/// Eval-mode features of images [N,C,H,W] in batches of `batch`:
/// pooled backbone [N,Cd] or projector embedding [N,d_z].
template <typename T>
Grid<double> extract_features(const EncoderConfig& encoder, const ProjectorConfig& projector,
                              const NamedGrids<T>& params, const NamedGrids<T>& buffers,
                              const Grid<T>& images, FeatureSource source,
                              std::size_t batch = 64);

}  // namespace moco
