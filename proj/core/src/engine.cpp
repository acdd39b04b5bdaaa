#include "moco/engine.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numeric>
#include <set>
#include <sstream>

#include "json.hpp"
#include "moco/linalg.hpp"
#include "moco/losses.hpp"

namespace moco {

EncoderConfig TrainConfig::resolved_encoder() const {
  EncoderConfig e = encoder;
  e.final_norm = enable_whitening ? FinalNorm::kZcaWhitening : FinalNorm::kBatchNorm;
  return e;
}

ProjectorConfig TrainConfig::resolved_projector() const {
  ProjectorConfig p = projector;
  p.in_dim = encoder.feature_dim();
  return p;
}

void TrainConfig::validate() const {
  if (batch_size == 0) throw ConfigError("batch_size must be positive");
  if (queue_size == 0 || queue_size % batch_size != 0) {
    throw ConfigError("queue_size must be a positive multiple of batch_size");
  }
  if (!(momentum >= 0 && momentum < 1)) throw ConfigError("momentum must lie in [0,1)");
  if (!(tau > 0)) throw ConfigError("tau must be > 0");
  if (!(lambda >= 0)) throw ConfigError("lambda must be >= 0");
  if (enable_local && K < 2) throw ConfigError("K must be >= 2 when enable_local is set");
  if (!(lr >= 0)) throw ConfigError("lr must be >= 0");
  if (!(weight_decay >= 0)) throw ConfigError("weight_decay must be >= 0");
  if (!(sgd_momentum >= 0 && sgd_momentum < 1)) {
    throw ConfigError("sgd_momentum must lie in [0,1)");
  }
  if (epochs == 0 && max_steps == 0) throw ConfigError("epochs or max_steps must be positive");
  encoder.validate();
  if (projector.out_dim == 0) throw ConfigError("projector out_dim must be positive");
}

double cosine_lr(double base_lr, std::uint64_t step, std::uint64_t total_steps) {
  if (total_steps == 0) return base_lr;
  const double pi = std::acos(-1.0);
  const double t = static_cast<double>(std::min(step, total_steps)) /
                   static_cast<double>(total_steps);
  return base_lr * 0.5 * (1.0 + std::cos(pi * t));
}

template <typename T>
MocoState<T> init_state(const TrainConfig& config, std::uint64_t total_steps) {
  config.validate();
  MocoState<T> s;
  s.rng.seed(config.seed);
  Encoder(config.resolved_encoder()).init(s.params_q, s.buffers_q, s.rng);
  Projector(config.resolved_projector()).init(s.params_q, s.rng);
  s.params_k = s.params_q;
  s.buffers_k = s.buffers_q;
  for (const auto& [name, p] : s.params_q) s.velocity.emplace(name, Grid<T>(p.shape()));
  s.queue = Grid<T>(Shape{config.queue_size, config.projector.out_dim});
  s.total_steps = total_steps;
  return s;
}

template <typename T>
void ema_update(const NamedGrids<T>& theta_q, NamedGrids<T>& theta_k, double m) {
  if (!(m >= 0 && m < 1)) throw ContractError("ema_update: m must lie in [0,1)");
  if (theta_q.size() != theta_k.size()) {
    throw ShapeError("ema_update: parameter sets differ in size");
  }
  const T mt = static_cast<T>(m), one_m = static_cast<T>(1.0 - m);
  for (const auto& [name, q] : theta_q) {
    auto it = theta_k.find(name);
    if (it == theta_k.end()) throw ShapeError("ema_update: momentum set lacks '" + name + "'");
    Grid<T>& k = it->second;
    q.require_same(k, "ema_update");
    for (std::size_t i = 0; i < q.size(); ++i) k[i] = mt * k[i] + one_m * q[i];
  }
}

template <typename T>
void queue_push(MocoState<T>& state, const Grid<T>& keys) {
  const std::size_t Q = state.queue.dim(0), D = state.queue.dim(1);
  if (keys.rank() != 2 || keys.dim(1) != D) {
    throw ShapeError("queue_push: keys " + to_string(keys.shape()) + " for queue " +
                     to_string(state.queue.shape()));
  }
  const std::size_t B = keys.dim(0);
  if (Q % B != 0) {
    throw ContractError("queue_push: batch " + std::to_string(B) + " does not divide Q = " +
                        std::to_string(Q));
  }
  for (std::size_t r = 0; r < B; ++r) {
    double ss = 0;
    for (std::size_t j = 0; j < D; ++j) ss += double(keys[r * D + j]) * double(keys[r * D + j]);
    if (std::abs(std::sqrt(ss) - 1.0) > 1e-5) {
      throw ContractError("queue_push: key " + std::to_string(r) + " has norm " +
                          std::to_string(std::sqrt(ss)));
    }
  }
  std::copy(keys.data(), keys.data() + B * D, state.queue.data() + state.queue_cursor * D);
  state.queue_cursor = (state.queue_cursor + B) % Q;
  state.queue_fill = std::min(Q, state.queue_fill + B);
}

template <typename T>
Grid<T> queue_snapshot(const MocoState<T>& state) {
  const std::size_t Q = state.queue.dim(0), D = state.queue.dim(1), F = state.queue_fill;
  if (F == 0) throw ContractError("queue_snapshot: queue is empty");
  std::vector<T> out;
  out.reserve(F * D);
  const std::size_t start = F < Q ? 0 : state.queue_cursor;
  for (std::size_t i = 0; i < F; ++i) {
    const T* row = state.queue.data() + ((start + i) % Q) * D;
    out.insert(out.end(), row, row + D);
  }
  return Grid<T>(Shape{F, D}, std::move(out));
}

template <typename T>
LossEvaluation<T> evaluate_losses(const TrainConfig& config, const NamedGrids<T>& params_q,
                                  NamedGrids<T>& buffers_q, const NamedGrids<T>& params_k,
                                  NamedGrids<T>& buffers_k, const Grid<T>& queue,
                                  std::size_t queue_fill, const Grid<T>& view_q,
                                  const Grid<T>& view_k, bool with_grads) {
  const Encoder enc(config.resolved_encoder());
  const Projector proj(config.resolved_projector());
  const T tau = static_cast<T>(config.tau);
  const bool incl = config.denominator_includes_positive;

  Tape<T> tape_k(false);
  ParamBinder<T> bind_k(tape_k, params_k, false);
  EncoderOutput<T> out_k = enc.forward(bind_k, buffers_k, tape_k.constant(view_k), Mode::kTrain);
  Var<T> z_k = proj.forward(bind_k, out_k.pooled);

  Tape<T> tape_q(with_grads);
  ParamBinder<T> bind_q(tape_q, params_q, true);
  EncoderOutput<T> out_q = enc.forward(bind_q, buffers_q, tape_q.constant(view_q), Mode::kTrain);
  Var<T> z_q = proj.forward(bind_q, out_q.pooled);

  LossEvaluation<T> ev;
  Var<T> lg = global_loss(z_q, z_k.value(), queue, queue_fill, tau, incl);
  Var<T> total = lg;
  ev.loss_global = static_cast<double>(lg.value()[0]);
  if (config.enable_local) {
    PatchGrid<T> patches = sample_patch_grid(out_q.stage1_fm, out_k.stage1_fm.value(), config.K);
    Var<T> ll = local_loss(patches, tau, incl);
    ev.loss_local = static_cast<double>(ll.value()[0]);
    total = total_loss(lg, ll, static_cast<T>(config.lambda));
  }
  ev.loss_total = static_cast<double>(total.value()[0]);
  if (with_grads) ev.grads = tape_q.backward(total, Grid<T>::scalar(T(1)));
  ev.keys = z_k.value();
  return ev;
}

template <typename T>
std::pair<Grid<T>, Grid<T>> augment_batch(MocoState<T>& state, const Grid<T>& batch,
                                          const TrainConfig& config) {
  if (batch.rank() != 4) {
    throw ShapeError("augment_batch: expected [B,C,H,W], got " + to_string(batch.shape()));
  }
  const std::size_t B = batch.dim(0), per = batch.size() / B;
  const Shape img_shape{batch.dim(1), batch.dim(2), batch.dim(3)};
  Grid<T> vq(batch.shape()), vk(batch.shape());
  for (std::size_t b = 0; b < B; ++b) {
    Grid<T> img(img_shape, std::vector<T>(batch.data() + b * per, batch.data() + (b + 1) * per));
    auto [q, k] = augment_pair(img, state.rng, config.enable_local, config.augment);
    std::copy(q.data(), q.data() + per, vq.data() + b * per);
    std::copy(k.data(), k.data() + per, vk.data() + b * per);
  }
  return {std::move(vq), std::move(vk)};
}

template <typename T>
StepMetrics train_step(MocoState<T>& state, const Grid<T>& batch, const TrainConfig& config) {
  if (batch.rank() != 4 || batch.dim(0) != config.batch_size ||
      batch.dim(1) != config.encoder.in_channels) {
    throw ShapeError("train_step: batch " + to_string(batch.shape()) + " does not match batch_size " +
                     std::to_string(config.batch_size) + " and in_channels " +
                     std::to_string(config.encoder.in_channels));
  }
  const std::uint64_t step_index = state.step + 1;
  auto fail = [&](const std::string& why) {
    throw NumericalError("train_step " + std::to_string(step_index) + ": " + why +
                         "; last finite metrics " + metrics_json_line(state.last));
  };

  auto [view_q, view_k] = augment_batch(state, batch, config);
  LossEvaluation<T> ev;
  try {
    ev = evaluate_losses(config, state.params_q, state.buffers_q, state.params_k,
                         state.buffers_k, state.queue, state.queue_fill, view_q, view_k, true);
  } catch (const NumericalError& e) {
    fail(e.what());
  }
  if (!std::isfinite(ev.loss_total) || !std::isfinite(ev.loss_global) ||
      !std::isfinite(ev.loss_local)) {
    fail("non-finite loss");
  }

  const double lr = cosine_lr(config.lr, state.step, state.total_steps);
  const T lr_t = static_cast<T>(lr), mu = static_cast<T>(config.sgd_momentum),
          wd = static_cast<T>(config.weight_decay);
  for (auto& [name, theta] : state.params_q) {
    const Grid<T>& g = ev.grads.at(name);
    Grid<T>& v = state.velocity.at(name);
    for (std::size_t i = 0; i < theta.size(); ++i) {
      v[i] = mu * v[i] + g[i] + wd * theta[i];
      theta[i] -= lr_t * v[i];
    }
  }
  ema_update(state.params_q, state.params_k, config.momentum);
  queue_push(state, ev.keys);
  state.step = step_index;

  StepMetrics m{step_index, ev.loss_global, ev.loss_local, ev.loss_total, state.queue_fill, lr};
  state.last = m;
  return m;
}

// ------------------------------------------------------------------ checkpoints

namespace {

constexpr const char* kMomentumPrefix = "momentum/";
constexpr const char* kVelocityPrefix = "optimizer/velocity/";

std::string layer_of(const std::string& name) {
  const auto pos = name.rfind('/');
  return pos == std::string::npos ? name : name.substr(0, pos);
}

std::vector<std::uint64_t> rng_words(const std::mt19937_64& rng) {
  std::ostringstream os;
  os << rng;
  std::istringstream is(os.str());
  std::vector<std::uint64_t> w;
  std::uint64_t v;
  while (is >> v) w.push_back(v);
  return w;
}

std::mt19937_64 rng_from_words(const std::vector<std::uint64_t>& w) {
  std::ostringstream os;
  for (std::size_t i = 0; i < w.size(); ++i) os << (i ? " " : "") << w[i];
  std::istringstream is(os.str());
  std::mt19937_64 rng;
  is >> rng;
  if (!is && !is.eof()) {
    throw CheckpointError(CheckpointErrorCode::kShapeMismatch, "meta/rng is not a valid state");
  }
  return rng;
}

template <typename T>
void put_all(Checkpoint& ck, const NamedGrids<T>& grids, const std::string& prefix) {
  for (const auto& [name, g] : grids) ck.put(prefix + name, g);
}

template <typename T>
void get_all(const Checkpoint& ck, NamedGrids<T>& grids, const std::string& prefix) {
  for (auto& [name, g] : grids) g = ck.grid<T>(prefix + name);
}

// Compares names, shapes and dtypes against a reference container.
void check_layout(const Checkpoint& ck, const Checkpoint& expected) {
  std::map<std::string, std::pair<std::vector<std::string>, std::vector<std::string>>> diff;
  for (const auto& [name, a] : expected.arrays()) {
    if (!ck.has(name)) {
      diff[layer_of(name)].second.push_back(name.substr(layer_of(name).size() + 1));
      continue;
    }
    const CheckpointArray& got = ck.at(name);
    if (got.dtype != a.dtype) {
      throw CheckpointError(CheckpointErrorCode::kBadDtype,
                            "array '" + name + "' is " + to_string(got.dtype) + ", expected " +
                                to_string(a.dtype));
    }
    if (got.shape != a.shape && name != "meta/rng") {
      throw CheckpointError(CheckpointErrorCode::kShapeMismatch,
                            "layer '" + layer_of(name) + "': array '" + name + "' has shape " +
                                to_string(got.shape) + ", expected " + to_string(a.shape));
    }
  }
  for (const auto& [name, a] : ck.arrays()) {
    if (!expected.has(name)) {
      diff[layer_of(name)].first.push_back(name.substr(layer_of(name).size() + 1));
    }
  }
  if (diff.empty()) return;
  // Prefer reporting a layer present on both sides (a layout change) over a
  // plain missing array.
  for (const auto& [layer, d] : diff) {
    if (d.first.empty() || d.second.empty()) continue;
    auto join = [](const std::vector<std::string>& v) {
      std::string s;
      for (const auto& x : v) s += (s.empty() ? "" : ", ") + x;
      return s;
    };
    throw CheckpointError(CheckpointErrorCode::kShapeMismatch,
                          "layer '" + layer + "' does not match the configuration: checkpoint has [" +
                              join(d.first) + "], expected [" + join(d.second) + "]");
  }
  const auto& [layer, d] = *diff.begin();
  if (!d.second.empty()) {
    throw CheckpointError(CheckpointErrorCode::kMissingArray,
                          "checkpoint lacks '" + layer + "/" + d.second.front() + "'");
  }
  throw CheckpointError(CheckpointErrorCode::kShapeMismatch,
                        "checkpoint has unexpected array '" + layer + "/" + d.first.front() + "'");
}

}  // namespace

template <typename T>
Checkpoint state_to_checkpoint(const MocoState<T>& s) {
  Checkpoint ck;
  put_all(ck, s.params_q, "");
  put_all(ck, s.buffers_q, "");
  put_all(ck, s.params_k, kMomentumPrefix);
  put_all(ck, s.buffers_k, kMomentumPrefix);
  put_all(ck, s.velocity, kVelocityPrefix);
  ck.put("queue/data", s.queue);
  ck.put_u64("queue/cursor", {s.queue_cursor});
  ck.put_u64("queue/fill", {s.queue_fill});
  ck.put_u64("meta/step", {s.step});
  ck.put_u64("meta/total_steps", {s.total_steps});
  ck.put_u64("meta/rng", rng_words(s.rng));
  return ck;
}

template <typename T>
MocoState<T> state_from_checkpoint(const Checkpoint& ck, const TrainConfig& config) {
  MocoState<T> s = init_state<T>(config, 0);
  check_layout(ck, state_to_checkpoint(s));
  get_all(ck, s.params_q, "");
  get_all(ck, s.buffers_q, "");
  get_all(ck, s.params_k, kMomentumPrefix);
  get_all(ck, s.buffers_k, kMomentumPrefix);
  get_all(ck, s.velocity, kVelocityPrefix);
  s.queue = ck.grid<T>("queue/data");
  s.queue_cursor = ck.u64("queue/cursor").at(0);
  s.queue_fill = ck.u64("queue/fill").at(0);
  if (s.queue_cursor >= config.queue_size || s.queue_fill > config.queue_size) {
    throw CheckpointError(CheckpointErrorCode::kShapeMismatch,
                          "queue cursor/fill out of range for queue_size " +
                              std::to_string(config.queue_size));
  }
  s.step = ck.u64("meta/step").at(0);
  s.total_steps = ck.u64("meta/total_steps").at(0);
  s.rng = rng_from_words(ck.u64("meta/rng"));
  return s;
}

template <typename T>
void save_checkpoint(const MocoState<T>& state, const std::filesystem::path& path) {
  state_to_checkpoint(state).save(path);
}

template <typename T>
MocoState<T> load_checkpoint(const std::filesystem::path& path, const TrainConfig& config) {
  const Checkpoint ck = Checkpoint::load(path);
  try {
    return state_from_checkpoint<T>(ck, config);
  } catch (const CheckpointError& e) {
    throw CheckpointError(e.code(), path.string() + ": " + e.what());
  }
}

namespace {

Grid<double> as_double(const Checkpoint& ck, const std::string& name) {
  const CheckpointArray& a = ck.at(name);
  if (a.dtype == Dtype::kF64) return ck.grid<double>(name);
  if (a.dtype == Dtype::kF32) return ck.grid<float>(name).cast<double>();
  throw CheckpointError(CheckpointErrorCode::kBadDtype, "array '" + name + "' is not real-valued");
}

void put_like(Checkpoint& ck, const std::string& name, const Grid<double>& g, Dtype dtype) {
  if (dtype == Dtype::kF64) {
    ck.put(name, g);
  } else {
    ck.put(name, g.cast<float>());
  }
}

}  // namespace

Checkpoint whitening_to_bn_convert(const Checkpoint& ck, double eps) {
  std::vector<std::string> layers;
  for (const auto& [name, a] : ck.arrays()) {
    const std::string suffix = "/running_W";
    if (name.size() > suffix.size() &&
        name.compare(name.size() - suffix.size(), suffix.size(), suffix) == 0) {
      layers.push_back(name.substr(0, name.size() - suffix.size()));
    }
  }
  if (layers.empty()) {
    throw CheckpointError(CheckpointErrorCode::kConversion,
                          "whitening_to_bn_convert: checkpoint has no whitening layer");
  }
  Checkpoint out = ck;
  for (const std::string& layer : layers) {
    const Dtype dtype = ck.at(layer + "/running_W").dtype;
    const Grid<double> w = as_double(ck, layer + "/running_W");
    const Grid<double> mu = as_double(ck, layer + "/running_mu");
    if (w.rank() != 2 || w.dim(0) != w.dim(1) || mu.shape() != Shape{w.dim(0)}) {
      throw CheckpointError(CheckpointErrorCode::kConversion,
                            "layer '" + layer + "': running_W " + to_string(w.shape()) +
                                " / running_mu " + to_string(mu.shape()) + " are inconsistent");
    }
    const std::size_t d = w.dim(0);
    if (linalg::asymmetry(w) > 1e-6 * std::max(1.0, w.max_abs())) {
      throw CheckpointError(CheckpointErrorCode::kConversion,
                            "layer '" + layer + "': running_W is not symmetric");
    }
    const linalg::SymmetricEigen eig = linalg::jacobi_eigen(w);
    double lmax = 0, lmin = std::numeric_limits<double>::infinity();
    for (double l : eig.values) {
      lmax = std::max(lmax, std::abs(l));
      lmin = std::min(lmin, std::abs(l));
    }
    if (!(lmax > 0) || lmin <= 1e-10 * lmax) {
      throw CheckpointError(CheckpointErrorCode::kConversion,
                            "layer '" + layer + "': running_W is singular (|eigenvalue| range " +
                                std::to_string(lmin) + " .. " + std::to_string(lmax) + ")");
    }
    // diag(W^-2)_i = sum_k D_ik^2 / lambda_k^2
    Grid<double> var(Shape{d});
    for (std::size_t i = 0; i < d; ++i) {
      double acc = 0;
      for (std::size_t k = 0; k < d; ++k) {
        const double dik = eig.vectors.at(i, k);
        acc += dik * dik / (eig.values[k] * eig.values[k]);
      }
      var[i] = std::max(acc, eps);
    }
    out.erase(layer + "/running_W");
    out.erase(layer + "/running_mu");
    put_like(out, layer + "/running_mean", mu, dtype);
    put_like(out, layer + "/running_var", var, dtype);
  }
  return out;
}

std::string metrics_json_line(const StepMetrics& m) {
  nlohmann::ordered_json j;
  j["step"] = m.step;
  j["loss_global"] = m.loss_global;
  j["loss_local"] = m.loss_local;
  j["loss_total"] = m.loss_total;
  j["queue_fill"] = m.queue_fill;
  j["lr"] = m.lr;
  return j.dump();
}

template <typename T>
MocoState<T> pretrain(const TrainConfig& config, const Grid<T>& images,
                      const PretrainOptions& options) {
  config.validate();
  if (images.rank() != 4) {
    throw ShapeError("pretrain: expected images [N,C,H,W], got " + to_string(images.shape()));
  }
  const std::size_t N = images.dim(0), B = config.batch_size;
  const std::size_t per_epoch = N / B;
  if (per_epoch == 0) {
    throw ConfigError("pretrain: " + std::to_string(N) + " images cannot fill a batch of " +
                      std::to_string(B));
  }
  const std::uint64_t total = config.max_steps ? config.max_steps : config.epochs * per_epoch;
  MocoState<T> state = init_state<T>(config, total);

  std::filesystem::create_directories(options.out_dir);
  std::ofstream metrics(options.out_dir / "metrics.jsonl", std::ios::trunc);
  if (!metrics) throw IoError("cannot write " + (options.out_dir / "metrics.jsonl").string());

  const std::size_t per = images.size() / N;
  Shape batch_shape = images.shape();
  batch_shape[0] = B;
  std::vector<std::size_t> order(N);
  std::iota(order.begin(), order.end(), std::size_t{0});
  for (std::uint64_t s = 0; s < total; ++s) {
    const std::size_t slot = s % per_epoch;
    if (slot == 0) std::shuffle(order.begin(), order.end(), state.rng);
    Grid<T> batch(batch_shape);
    for (std::size_t b = 0; b < B; ++b) {
      const T* src = images.data() + order[slot * B + b] * per;
      std::copy(src, src + per, batch.data() + b * per);
    }
    const StepMetrics m = train_step(state, batch, config);
    metrics << metrics_json_line(m) << '\n';
    metrics.flush();
    if (options.on_step) options.on_step(m);
    if (config.checkpoint_every && m.step % config.checkpoint_every == 0 && m.step != total) {
      save_checkpoint(state, options.out_dir / ("ckpt_" + std::to_string(m.step) + ".mmc1"));
    }
  }
  save_checkpoint(state, options.out_dir / ("ckpt_" + std::to_string(total) + ".mmc1"));
  return state;
}

#define MOCO_INSTANTIATE_ENGINE(T)                                                            \
  template MocoState<T> init_state<T>(const TrainConfig&, std::uint64_t);                     \
  template void ema_update<T>(const NamedGrids<T>&, NamedGrids<T>&, double);                  \
  template void queue_push<T>(MocoState<T>&, const Grid<T>&);                                 \
  template Grid<T> queue_snapshot<T>(const MocoState<T>&);                                    \
  template LossEvaluation<T> evaluate_losses<T>(                                              \
      const TrainConfig&, const NamedGrids<T>&, NamedGrids<T>&, const NamedGrids<T>&,         \
      NamedGrids<T>&, const Grid<T>&, std::size_t, const Grid<T>&, const Grid<T>&, bool);     \
  template std::pair<Grid<T>, Grid<T>> augment_batch<T>(MocoState<T>&, const Grid<T>&,        \
                                                        const TrainConfig&);                  \
  template StepMetrics train_step<T>(MocoState<T>&, const Grid<T>&, const TrainConfig&);      \
  template Checkpoint state_to_checkpoint<T>(const MocoState<T>&);                            \
  template MocoState<T> state_from_checkpoint<T>(const Checkpoint&, const TrainConfig&);      \
  template void save_checkpoint<T>(const MocoState<T>&, const std::filesystem::path&);        \
  template MocoState<T> load_checkpoint<T>(const std::filesystem::path&, const TrainConfig&); \
  template MocoState<T> pretrain<T>(const TrainConfig&, const Grid<T>&, const PretrainOptions&);

MOCO_INSTANTIATE_ENGINE(float)
MOCO_INSTANTIATE_ENGINE(double)

#undef MOCO_INSTANTIATE_ENGINE

}  // namespace moco
