#pragma once

#include <filesystem>
#include <string>
#include <vector>

#include "moco/downstream.hpp"
#include "moco/engine.hpp"
#include "moco/phantom.hpp"

namespace moco::cli {

/// Every tunable of a run. Flat `key = value` text maps onto it: pretraining
/// keys are bare (`tau`, `enable_local`), the rest carry a prefix
/// (`encoder.`, `projector.`, `augment.`, `data.`, `eval.`, `ablate.`).
struct RunConfig {
  TrainConfig train;
  PhantomConfig data;  // pretraining set
  EvalConfig eval;
  std::size_t eval_train_samples = 256;
  std::size_t eval_val_samples = 64;
  std::uint64_t eval_train_seed_base = 1000000;
  std::uint64_t eval_val_seed_base = 2000000;
  std::size_t ablate_seeds = 3;
  std::size_t ablate_finetune_iterations = 2000;

  /// Throws ConfigError.
  void validate() const;
  /// Downstream labelled sets: same template as `data`, disjoint seeds.
  PhantomConfig eval_train_phantom() const;
  PhantomConfig eval_val_phantom() const;
};

/// Keys in resolved-file order.
const std::vector<std::string>& config_keys();

/// Throws ConfigError naming the key for unknown keys and bad values.
void apply_setting(RunConfig& config, const std::string& key, const std::string& value);

/// Applies `key = value` lines (blank lines and `#` comments ignored) on top
/// of `config`. Throws ConfigError with origin and line number.
void apply_config_text(RunConfig& config, const std::string& text, const std::string& origin);

/// Applies one `key=value` override.
void apply_override(RunConfig& config, const std::string& assignment);

RunConfig load_config(const std::filesystem::path& path);

/// Every key with its value, one `key = value` line each; parses back to
/// the same configuration.
std::string resolved_config_text(const RunConfig& config);

void write_resolved_config(const RunConfig& config, const std::filesystem::path& dir);

}  // namespace moco::cli
