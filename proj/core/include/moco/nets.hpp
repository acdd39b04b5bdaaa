#pragma once

#include <cstddef>
#include <cstdint>
#include <map>
#include <random>
#include <string>
#include <vector>

#include "moco/mode.hpp"
#include "moco/tape.hpp"

namespace moco {

/// Parameters or buffers keyed by their full checkpoint name.
template <typename T>
using NamedGrids = std::map<std::string, Grid<T>>;

enum class FinalNorm { kBatchNorm, kZcaWhitening };

const char* to_string(FinalNorm n);
FinalNorm parse_final_norm(const std::string& s);

struct EncoderConfig {
  std::size_t in_channels = 1;
  std::vector<std::size_t> stage_channels{16, 32, 64, 128};
  std::vector<std::size_t> stage_strides{1, 2, 2, 2};
  std::size_t blocks_per_stage = 1;
  FinalNorm final_norm = FinalNorm::kBatchNorm;
  int whitening_iterations = 5;
  double norm_eps = 1e-5;
  double norm_momentum = 0.1;  // running-statistics update fraction (BN and whitening)

  /// Throws ConfigError on an invalid combination.
  void validate() const;
  std::size_t feature_dim() const { return stage_channels.back(); }
  std::size_t total_stride() const;
};

struct ProjectorConfig {
  std::size_t in_dim = 128;
  std::size_t hidden_dim = 128;  // 0: a single affine layer
  std::size_t out_dim = 64;
};

/// Binds named grids to tape nodes: trainable sources register parameters,
/// frozen sources insert constants. Missing names throw ContractError.
template <typename T>
class ParamBinder {
 public:
  ParamBinder(Tape<T>& tape, const NamedGrids<T>& params, bool trainable)
      : tape_(&tape), params_(&params), trainable_(trainable) {}

  Var<T> operator()(const std::string& name) const;
  Tape<T>& tape() const { return *tape_; }

 private:
  Tape<T>* tape_;
  const NamedGrids<T>* params_;
  bool trainable_;
};

template <typename T>
struct EncoderOutput {
  Var<T> stage1_fm;  // [B,C1,H1,W1]
  Var<T> final_fm;   // [B,Cd,Hd,Wd], after final_norm
  Var<T> pooled;     // [B,Cd]
};

/// Residual CNN: stem conv3x3-BN-ReLU, then per stage `blocks_per_stage`
/// basic blocks (the first one strided), then final_norm. Convolutions carry
/// no bias. Names live under "encoder/".
class Encoder {
 public:
  explicit Encoder(EncoderConfig config);

  const EncoderConfig& config() const { return config_; }

  /// He fan-in normal weights, BN gamma = 1, beta = 0, identity running
  /// statistics. Inserts into `params` and `buffers`.
  template <typename T>
  void init(NamedGrids<T>& params, NamedGrids<T>& buffers, std::mt19937_64& rng) const;

  /// Train mode uses batch statistics and updates `buffers` in place; eval
  /// mode reads them only.
  template <typename T>
  EncoderOutput<T> forward(const ParamBinder<T>& bind, NamedGrids<T>& buffers, Var<T> images,
                           Mode mode) const;

  /// Names of the parameters and buffers of the final normalisation layer.
  std::vector<std::string> final_norm_buffer_names() const;

 private:
  template <typename T>
  Var<T> norm(const ParamBinder<T>& bind, NamedGrids<T>& buffers, const std::string& name,
              Var<T> x, Mode mode) const;
  template <typename T>
  Var<T> final_norm(const ParamBinder<T>& bind, NamedGrids<T>& buffers, Var<T> x,
                    Mode mode) const;

  EncoderConfig config_;
};

/// Two affine layers with ReLU between and an L2-normalised output.
/// Names live under "projector/".
class Projector {
 public:
  explicit Projector(ProjectorConfig config);
  const ProjectorConfig& config() const { return config_; }

  template <typename T>
  void init(NamedGrids<T>& params, std::mt19937_64& rng) const;

  /// pooled [B,in_dim] -> [B,out_dim], unit rows.
  template <typename T>
  Var<T> forward(const ParamBinder<T>& bind, Var<T> pooled) const;

 private:
  ProjectorConfig config_;
};

/// 1x1 linear map from Cd features to class logits, bilinearly upsampled.
/// Names "head/weight" [classes,Cd], "head/bias" [classes].
class SegHead {
 public:
  SegHead(std::size_t in_channels, std::size_t num_classes);

  std::size_t num_classes() const { return num_classes_; }

  template <typename T>
  void init(NamedGrids<T>& params, std::mt19937_64& rng) const;

  template <typename T>
  Var<T> forward(const ParamBinder<T>& bind, Var<T> final_fm, std::size_t out_h,
                 std::size_t out_w) const;

 private:
  std::size_t in_channels_;
  std::size_t num_classes_;
};

/// Normal(0, sqrt(2 / fan_in)) samples.
template <typename T>
Grid<T> he_normal(Shape shape, std::size_t fan_in, std::mt19937_64& rng);

/// Order-sensitive FNV-1a hash over names, shapes and raw bytes.
template <typename T>
std::uint64_t hash_grids(const NamedGrids<T>& grids, const std::string& prefix = "");

/// Element count over all grids whose name starts with `prefix`.
template <typename T>
std::size_t count_values(const NamedGrids<T>& grids, const std::string& prefix = "");

template <typename U, typename T>
NamedGrids<U> cast_grids(const NamedGrids<T>& grids) {
  NamedGrids<U> out;
  for (const auto& [k, v] : grids) out.emplace(k, v.template cast<U>());
  return out;
}

}  // namespace moco
