#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <map>
#include <string>
#include <vector>

#include "moco/engine.hpp"
#include "moco/phantom.hpp"

namespace moco {

enum class EvalMode { kFrozen, kFinetune };

const char* to_string(EvalMode m);
EvalMode parse_eval_mode(const std::string& s);

struct EvalConfig {
  EvalMode mode = EvalMode::kFrozen;
  double label_fraction = 1.0;
  std::uint64_t combination_seed = 0;
  std::size_t iterations = 2000;
  double lr = 0.05;
  std::size_t batch_size = 16;
  std::uint64_t seed = 0;       // head init and minibatch order
  std::string checkpoint_path;  // empty: randomly initialised backbone
  bool convert_whitening = true;  // finetune only

  /// Throws ConfigError.
  void validate() const;
};

/// 2 |pred = c and gt = c| / (|pred = c| + |gt = c|), 1 when both are empty.
/// Throws ShapeError for differently sized masks, ContractError for c == 0.
double dice_score(const LabelMap& pred, const LabelMap& gt, std::size_t class_id);

struct DiceResult {
  std::vector<double> per_class;  // classes 1..C-1; NaN when excluded
  std::vector<bool> counted;      // false: absent from prediction and ground truth
  double mean = 0;
  std::size_t num_eval_images = 0;
};

/// Dice per foreground class over a whole evaluation set, counts pooled
/// across images. Classes absent from every prediction and ground truth are
/// excluded from the mean.
DiceResult evaluate_dice(const std::vector<LabelMap>& pred, const std::vector<LabelMap>& gt,
                         std::size_t num_classes);

using SegmentationData = Batch;

struct EvalOutcome {
  DiceResult dice;
  std::vector<double> losses;  // training cross-entropy per iteration
  std::uint64_t backbone_hash_before = 0;
  std::uint64_t backbone_hash_after = 0;
  std::size_t train_images = 0;
};

/// Loads (or randomly initialises) the backbone described by `backbone`,
/// attaches a 1x1 head with bilinear upsampling to the final feature map and
/// trains it with pixel-wise cross-entropy on the label_fraction subset of
/// `train`. Frozen mode trains the head on eval-mode features; finetune
/// trains head and backbone, first replacing whitening by BN when
/// convert_whitening is set. Returns Dice on `val` from argmax predictions.
EvalOutcome train_eval_segmentation(const EvalConfig& config, const TrainConfig& backbone,
                                    const SegmentationData& train, const SegmentationData& val,
                                    std::size_t num_classes);

/// Per-class Dice, mean, sample count and a config echo.
std::string results_json(const EvalConfig& config, const EvalOutcome& outcome);

struct AblationRow {
  const char* name;
  bool pretrained;
  bool enable_local;
  bool enable_whitening;
};

/// No SSL, baseline, +local, +decorr, +both.
const std::array<AblationRow, 5>& ablation_rows();

struct AblationCell {
  std::vector<double> values;  // one mean Dice per seed
  double mean = 0;
  double stddev = 0;  // sample standard deviation, 0 for one seed
};

struct AblationTable {
  std::vector<std::string> rows;
  std::vector<std::string> columns;  // frozen, finetune
  std::vector<std::vector<AblationCell>> cells;
};

/// `checkpoints[row][seed]` for the four pretrained rows, keyed by row name.
/// The No SSL row uses a random backbone seeded by base.seed + seed index.
/// The finetune column runs `finetune_iterations` (0: eval.iterations).
/// Throws ContractError naming any missing checkpoint.
AblationTable ablation_matrix(const TrainConfig& base, const EvalConfig& eval,
                              const std::map<std::string, std::vector<std::filesystem::path>>&
                                  checkpoints,
                              std::size_t num_seeds, const SegmentationData& train,
                              const SegmentationData& val, std::size_t num_classes,
                              std::size_t finetune_iterations = 0);

/// row,frozen,finetune,frozen_std,finetune_std
void export_ablation_csv(const AblationTable& table, const std::filesystem::path& path);

}  // namespace moco
