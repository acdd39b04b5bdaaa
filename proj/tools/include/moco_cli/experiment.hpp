#pragma once

#include <filesystem>
#include <ostream>
#include <string>
#include <vector>

#include "moco/diagnostics.hpp"
#include "moco/downstream.hpp"
#include "moco_cli/run_config.hpp"

namespace moco::cli {

struct SpectrumRun {
  std::string row;
  std::size_t seed_index = 0;
  std::filesystem::path checkpoint;  // empty for the random backbone
  double pretrain_seconds = 0;       // wall time of the (possibly earlier) pretraining run
  SpectrumReport spectrum;
};

struct AblationOutcome {
  std::vector<SpectrumRun> spectra;  // every row and seed, pooled backbone features
  AblationTable table;
};

/// Pooled-feature (or embedding) spectrum of the online encoder stored in a
/// checkpoint, on `images`.
SpectrumReport checkpoint_spectrum(const TrainConfig& train, const std::filesystem::path& ckpt,
                                   const Grid<float>& images, FeatureSource source);

/// Pretrains the four SSL configurations for ablate_seeds seeds each under
/// out/runs/<row>/seed<k>/, measures their spectra on the validation set and
/// fills the frozen/finetune Dice table. A run whose directory already holds
/// the final checkpoint and an identical config.resolved is reused; its
/// recorded pretraining time is read back from pretrain_seconds.txt.
/// Writes out/spectra.csv and out/ablation.csv.
AblationOutcome run_ablation(const RunConfig& config, const std::filesystem::path& out,
                             std::ostream* log = nullptr);

}  // namespace moco::cli
