#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <ostream>
#include <random>
#include <string>
#include <vector>

#include "moco/augment.hpp"
#include "moco/checkpoint.hpp"
#include "moco/nets.hpp"

namespace moco {

struct TrainConfig {
  std::size_t batch_size = 32;
  std::size_t queue_size = 1024;
  double momentum = 0.999;  // EMA coefficient m
  double tau = 0.2;
  double lambda = 1.0;
  std::size_t K = 20;
  std::size_t epochs = 20;
  std::size_t max_steps = 0;  // 0: epochs * (N / batch_size)
  double lr = 0.03;
  double weight_decay = 1e-4;
  double sgd_momentum = 0.9;
  bool enable_local = true;
  bool enable_whitening = true;
  bool denominator_includes_positive = true;
  std::uint64_t seed = 0;
  std::size_t checkpoint_every = 0;  // 0: final checkpoint only

  EncoderConfig encoder;
  ProjectorConfig projector;
  AugmentConfig augment;

  /// Encoder config with final_norm following enable_whitening.
  EncoderConfig resolved_encoder() const;
  /// Projector config with in_dim equal to the encoder feature dimension.
  ProjectorConfig resolved_projector() const;
  /// Throws ConfigError.
  void validate() const;
};

struct StepMetrics {
  std::uint64_t step = 0;
  double loss_global = 0;
  double loss_local = 0;
  double loss_total = 0;
  std::size_t queue_fill = 0;
  double lr = 0;
};

/// Online and momentum networks, negative queue, optimiser buffers, counters.
template <typename T>
struct MocoState {
  NamedGrids<T> params_q;   // "encoder/...", "projector/..."
  NamedGrids<T> buffers_q;  // running statistics of the online encoder
  NamedGrids<T> params_k;   // same names as params_q
  NamedGrids<T> buffers_k;
  NamedGrids<T> velocity;   // SGD momentum buffers, same names as params_q
  Grid<T> queue;            // [Q, d_z]
  std::size_t queue_cursor = 0;
  std::size_t queue_fill = 0;
  std::uint64_t step = 0;
  std::uint64_t total_steps = 0;  // cosine schedule horizon, 0: constant lr
  std::mt19937_64 rng;
  StepMetrics last;  // metrics of the last finite step
};

/// Fresh state: He-initialised online networks (seeded by config.seed), an
/// exact copy as the momentum networks, zero velocity and an empty queue.
template <typename T>
MocoState<T> init_state(const TrainConfig& config, std::uint64_t total_steps);

/// theta_k <- m theta_k + (1 - m) theta_q for every parameter.
template <typename T>
void ema_update(const NamedGrids<T>& theta_q, NamedGrids<T>& theta_k, double m);

/// Writes keys [B, d_z] at the cursor (FIFO ring); fill saturates at Q.
/// Keys must be unit norm within 1e-5 and B must divide Q.
template <typename T>
void queue_push(MocoState<T>& state, const Grid<T>& keys);

/// Filled queue rows in age order, oldest first.
template <typename T>
Grid<T> queue_snapshot(const MocoState<T>& state);

double cosine_lr(double base_lr, std::uint64_t step, std::uint64_t total_steps);

template <typename T>
struct LossEvaluation {
  double loss_global = 0;
  double loss_local = 0;
  double loss_total = 0;
  GradientMap<T> grads;  // online parameters; empty unless requested
  Grid<T> keys;          // z_k [B, d_z]
};

/// Forward both branches on fixed views [B,C,H,W] and evaluate the losses,
/// optionally with gradients. Running statistics are updated in `buffers_q`
/// and `buffers_k` when non-null (train_step passes the state's buffers).
template <typename T>
LossEvaluation<T> evaluate_losses(const TrainConfig& config, const NamedGrids<T>& params_q,
                                  NamedGrids<T>& buffers_q, const NamedGrids<T>& params_k,
                                  NamedGrids<T>& buffers_k, const Grid<T>& queue,
                                  std::size_t queue_fill, const Grid<T>& view_q,
                                  const Grid<T>& view_k, bool with_grads);

/// Two augmented views per image of batch [B,C,H,W], drawn from state.rng.
template <typename T>
std::pair<Grid<T>, Grid<T>> augment_batch(MocoState<T>& state, const Grid<T>& batch,
                                          const TrainConfig& config);

/// Augment, forward, loss, backward, SGD step, EMA, queue push, step += 1.
/// Throws NumericalError naming the step and the last finite metrics when a
/// loss is not finite.
template <typename T>
StepMetrics train_step(MocoState<T>& state, const Grid<T>& batch, const TrainConfig& config);

/// Full state as a checkpoint container.
template <typename T>
Checkpoint state_to_checkpoint(const MocoState<T>& state);

/// Rebuilds a state, validating every array against the layout implied by
/// `config`. Layout differences inside a layer raise kShapeMismatch naming
/// that layer.
template <typename T>
MocoState<T> state_from_checkpoint(const Checkpoint& ck, const TrainConfig& config);

template <typename T>
void save_checkpoint(const MocoState<T>& state, const std::filesystem::path& path);
template <typename T>
MocoState<T> load_checkpoint(const std::filesystem::path& path, const TrainConfig& config);

/// Replaces every whitening final layer (online and momentum) by BN
/// statistics: running_mean = running_mu, running_var = diag(W^-2) clamped
/// to >= eps. Throws CheckpointError(kConversion) for singular W.
Checkpoint whitening_to_bn_convert(const Checkpoint& ck, double eps = 1e-5);

/// One JSON object per line with keys in the fixed order
/// step, loss_global, loss_local, loss_total, queue_fill, lr.
std::string metrics_json_line(const StepMetrics& m);

struct PretrainOptions {
  std::filesystem::path out_dir;
  std::function<void(const StepMetrics&)> on_step;  // optional progress hook
};

/// Runs epochs * floor(N / B) steps (or max_steps) over images [N,C,H,W],
/// reshuffling every epoch with the state's rng. Writes metrics.jsonl and
/// ckpt_<step>.mmc1 files into out_dir.
template <typename T>
MocoState<T> pretrain(const TrainConfig& config, const Grid<T>& images,
                      const PretrainOptions& options);

}  // namespace moco
