#include "moco/nets.hpp"

#include <cmath>
#include <cstring>

#include "moco/ops.hpp"
#include "moco/whitening.hpp"

namespace moco {

const char* to_string(FinalNorm n) {
  return n == FinalNorm::kBatchNorm ? "batchnorm" : "zca_whitening";
}

FinalNorm parse_final_norm(const std::string& s) {
  if (s == "batchnorm") return FinalNorm::kBatchNorm;
  if (s == "zca_whitening") return FinalNorm::kZcaWhitening;
  throw ConfigError("unknown final_norm '" + s + "' (expected batchnorm or zca_whitening)");
}

void EncoderConfig::validate() const {
  if (in_channels == 0) throw ConfigError("encoder: in_channels must be positive");
  if (stage_channels.size() != stage_strides.size() || stage_channels.size() < 2) {
    throw ConfigError("encoder: stage_channels and stage_strides must have equal length >= 2");
  }
  for (std::size_t c : stage_channels)
    if (c == 0) throw ConfigError("encoder: stage channels must be positive");
  for (std::size_t s : stage_strides)
    if (s == 0) throw ConfigError("encoder: stage strides must be positive");
  if (blocks_per_stage == 0) throw ConfigError("encoder: blocks_per_stage must be >= 1");
  if (whitening_iterations < 1) throw ConfigError("encoder: whitening_iterations must be >= 1");
  if (!(norm_eps > 0)) throw ConfigError("encoder: norm_eps must be > 0");
  if (!(norm_momentum >= 0 && norm_momentum <= 1)) {
    throw ConfigError("encoder: norm_momentum must lie in [0,1]");
  }
}

std::size_t EncoderConfig::total_stride() const {
  std::size_t s = 1;
  for (std::size_t v : stage_strides) s *= v;
  return s;
}

template <typename T>
Var<T> ParamBinder<T>::operator()(const std::string& name) const {
  auto it = params_->find(name);
  if (it == params_->end()) throw ContractError("missing parameter '" + name + "'");
  return trainable_ ? tape_->parameter(name, it->second) : tape_->constant(it->second);
}

template <typename T>
Grid<T> he_normal(Shape shape, std::size_t fan_in, std::mt19937_64& rng) {
  std::normal_distribution<double> dist(0.0, std::sqrt(2.0 / static_cast<double>(fan_in)));
  Grid<T> g(std::move(shape));
  for (T& v : g.values()) v = static_cast<T>(dist(rng));
  return g;
}

namespace {

std::string stage_prefix(std::size_t s, std::size_t b) {
  return "encoder/stage" + std::to_string(s + 1) + "/block" + std::to_string(b + 1) + "/";
}

template <typename T>
void add_bn(NamedGrids<T>& params, NamedGrids<T>& buffers, const std::string& name,
            std::size_t c) {
  params[name + "/gamma"] = Grid<T>(Shape{c}, T(1));
  params[name + "/beta"] = Grid<T>(Shape{c});
  buffers[name + "/running_mean"] = Grid<T>(Shape{c});
  buffers[name + "/running_var"] = Grid<T>(Shape{c}, T(1));
}

template <typename T>
void add_conv(NamedGrids<T>& params, const std::string& name, std::size_t out,
              std::size_t in, std::size_t k, std::mt19937_64& rng) {
  params[name + "/weight"] = he_normal<T>(Shape{out, in, k, k}, in * k * k, rng);
}

template <typename T>
Grid<T>& buffer(NamedGrids<T>& buffers, const std::string& name) {
  auto it = buffers.find(name);
  if (it == buffers.end()) throw ContractError("missing buffer '" + name + "'");
  return it->second;
}

template <typename T>
void blend(Grid<T>& running, const Grid<T>& batch, T momentum) {
  for (std::size_t i = 0; i < running.size(); ++i)
    running[i] = (T(1) - momentum) * running[i] + momentum * batch[i];
}

}  // namespace

Encoder::Encoder(EncoderConfig config) : config_(std::move(config)) { config_.validate(); }

std::vector<std::string> Encoder::final_norm_buffer_names() const {
  if (config_.final_norm == FinalNorm::kBatchNorm) {
    return {"encoder/final_norm/running_mean", "encoder/final_norm/running_var"};
  }
  return {"encoder/final_norm/running_mu", "encoder/final_norm/running_W"};
}

template <typename T>
void Encoder::init(NamedGrids<T>& params, NamedGrids<T>& buffers, std::mt19937_64& rng) const {
  const auto& ch = config_.stage_channels;
  add_conv(params, "encoder/stem/conv", ch[0], config_.in_channels, 3, rng);
  add_bn(params, buffers, "encoder/stem/bn", ch[0]);
  std::size_t in = ch[0];
  for (std::size_t s = 0; s < ch.size(); ++s) {
    for (std::size_t b = 0; b < config_.blocks_per_stage; ++b) {
      const std::string p = stage_prefix(s, b);
      const std::size_t stride = b == 0 ? config_.stage_strides[s] : 1;
      add_conv(params, p + "conv1", ch[s], in, 3, rng);
      add_bn(params, buffers, p + "bn1", ch[s]);
      add_conv(params, p + "conv2", ch[s], ch[s], 3, rng);
      add_bn(params, buffers, p + "bn2", ch[s]);
      if (stride != 1 || in != ch[s]) {
        add_conv(params, p + "shortcut/conv", ch[s], in, 1, rng);
        add_bn(params, buffers, p + "shortcut/bn", ch[s]);
      }
      in = ch[s];
    }
  }
  const std::size_t d = config_.feature_dim();
  params["encoder/final_norm/gamma"] = Grid<T>(Shape{d}, T(1));
  params["encoder/final_norm/beta"] = Grid<T>(Shape{d});
  if (config_.final_norm == FinalNorm::kBatchNorm) {
    buffers["encoder/final_norm/running_mean"] = Grid<T>(Shape{d});
    buffers["encoder/final_norm/running_var"] = Grid<T>(Shape{d}, T(1));
  } else {
    buffers["encoder/final_norm/running_mu"] = Grid<T>(Shape{d});
    buffers["encoder/final_norm/running_W"] = Grid<T>::identity(d);
  }
}

template <typename T>
Var<T> Encoder::norm(const ParamBinder<T>& bind, NamedGrids<T>& buffers, const std::string& name,
                     Var<T> x, Mode mode) const {
  const T eps = static_cast<T>(config_.norm_eps);
  Var<T> gamma = bind(name + "/gamma"), beta = bind(name + "/beta");
  Grid<T>& rmean = buffer(buffers, name + "/running_mean");
  Grid<T>& rvar = buffer(buffers, name + "/running_var");
  if (mode == Mode::kEval) return ops::batch_norm_eval(x, gamma, beta, rmean, rvar, eps);
  Grid<T> bmean, bvar;
  Var<T> y = ops::batch_norm_train(x, gamma, beta, eps, &bmean, &bvar);
  const T mom = static_cast<T>(config_.norm_momentum);
  blend(rmean, bmean, mom);
  blend(rvar, bvar, mom);
  return y;
}

template <typename T>
Var<T> Encoder::final_norm(const ParamBinder<T>& bind, NamedGrids<T>& buffers, Var<T> x,
                           Mode mode) const {
  if (config_.final_norm == FinalNorm::kBatchNorm) {
    return norm(bind, buffers, "encoder/final_norm", x, mode);
  }
  Grid<T>& rmu = buffer(buffers, "encoder/final_norm/running_mu");
  Grid<T>& rw = buffer(buffers, "encoder/final_norm/running_W");
  WhiteningState<T> state;
  state.iterations = config_.whitening_iterations;
  state.eps = static_cast<T>(config_.norm_eps);
  state.momentum = static_cast<T>(config_.norm_momentum);
  state.running_mu = rmu;
  state.running_W = rw;
  Var<T> white = whitening_layer_apply(state, x, mode);
  rmu = std::move(state.running_mu);
  rw = std::move(state.running_W);
  return ops::channel_affine(white, bind("encoder/final_norm/gamma"),
                             bind("encoder/final_norm/beta"));
}

template <typename T>
EncoderOutput<T> Encoder::forward(const ParamBinder<T>& bind, NamedGrids<T>& buffers,
                                  Var<T> images, Mode mode) const {
  using namespace ops;
  const Shape& s = images.shape();
  if (s.size() != 4 || s[1] != config_.in_channels) {
    throw ShapeError("encoder_forward: expected [B," + std::to_string(config_.in_channels) +
                     ",H,W], got " + to_string(s));
  }
  const std::size_t ts = config_.total_stride();
  if (s[2] % ts != 0 || s[3] % ts != 0) {
    throw ShapeError("encoder_forward: spatial dims " + to_string(s) +
                     " not divisible by total stride " + std::to_string(ts));
  }
  if (mode == Mode::kTrain && config_.final_norm == FinalNorm::kZcaWhitening && s[0] < 2) {
    throw NumericalError("encoder_forward: whitening needs a batch of at least 2 in train mode "
                         "(covariance is degenerate)");
  }

  const Conv2dAttrs same{1, 1};
  Var<T> h = conv2d(images, bind("encoder/stem/conv/weight"), same);
  h = relu(norm(bind, buffers, "encoder/stem/bn", h, mode));

  const auto& ch = config_.stage_channels;
  std::size_t in = ch[0];
  Var<T> stage1;
  for (std::size_t st = 0; st < ch.size(); ++st) {
    for (std::size_t b = 0; b < config_.blocks_per_stage; ++b) {
      const std::string p = stage_prefix(st, b);
      const std::size_t stride = b == 0 ? config_.stage_strides[st] : 1;
      Var<T> r = conv2d(h, bind(p + "conv1/weight"), Conv2dAttrs{stride, 1});
      r = relu(norm(bind, buffers, p + "bn1", r, mode));
      r = conv2d(r, bind(p + "conv2/weight"), same);
      r = norm(bind, buffers, p + "bn2", r, mode);
      Var<T> sc = h;
      if (stride != 1 || in != ch[st]) {
        sc = conv2d(h, bind(p + "shortcut/conv/weight"), Conv2dAttrs{stride, 0});
        sc = norm(bind, buffers, p + "shortcut/bn", sc, mode);
      }
      h = relu(add(r, sc));
      in = ch[st];
    }
    if (st == 0) stage1 = h;
  }
  Var<T> fin = final_norm(bind, buffers, h, mode);
  return EncoderOutput<T>{stage1, fin, global_avg_pool(fin)};
}

Projector::Projector(ProjectorConfig config) : config_(config) {
  if (config_.in_dim == 0 || config_.out_dim == 0) {
    throw ConfigError("projector: dimensions must be positive");
  }
}

template <typename T>
void Projector::init(NamedGrids<T>& params, std::mt19937_64& rng) const {
  const std::size_t mid = config_.hidden_dim ? config_.hidden_dim : config_.out_dim;
  params["projector/fc1/weight"] = he_normal<T>(Shape{mid, config_.in_dim}, config_.in_dim, rng);
  params["projector/fc1/bias"] = Grid<T>(Shape{mid});
  if (config_.hidden_dim) {
    params["projector/fc2/weight"] = he_normal<T>(Shape{config_.out_dim, mid}, mid, rng);
    params["projector/fc2/bias"] = Grid<T>(Shape{config_.out_dim});
  }
}

template <typename T>
Var<T> Projector::forward(const ParamBinder<T>& bind, Var<T> pooled) const {
  using namespace ops;
  if (pooled.shape().size() != 2 || pooled.shape()[1] != config_.in_dim) {
    throw ShapeError("projector_forward: expected [B," + std::to_string(config_.in_dim) +
                     "], got " + to_string(pooled.shape()));
  }
  Var<T> h = add_channel_bias(matmul(pooled, bind("projector/fc1/weight"), false, true),
                              bind("projector/fc1/bias"));
  if (config_.hidden_dim) {
    h = add_channel_bias(matmul(relu(h), bind("projector/fc2/weight"), false, true),
                         bind("projector/fc2/bias"));
  }
  return l2_normalize(h);
}

SegHead::SegHead(std::size_t in_channels, std::size_t num_classes)
    : in_channels_(in_channels), num_classes_(num_classes) {
  if (num_classes < 2) throw ConfigError("seg head: num_classes must be >= 2");
  if (in_channels == 0) throw ConfigError("seg head: in_channels must be positive");
}

template <typename T>
void SegHead::init(NamedGrids<T>& params, std::mt19937_64& rng) const {
  params["head/weight"] = he_normal<T>(Shape{num_classes_, in_channels_}, in_channels_, rng);
  params["head/bias"] = Grid<T>(Shape{num_classes_});
}

template <typename T>
Var<T> SegHead::forward(const ParamBinder<T>& bind, Var<T> final_fm, std::size_t out_h,
                        std::size_t out_w) const {
  using namespace ops;
  const Shape& s = final_fm.shape();
  if (s.size() != 4 || s[1] != in_channels_) {
    throw ShapeError("seg_head_forward: expected [B," + std::to_string(in_channels_) +
                     ",H,W], got " + to_string(s));
  }
  if (out_h < s[2] || out_w < s[3]) {
    throw ShapeError("seg_head_forward: output " + std::to_string(out_h) + "x" +
                     std::to_string(out_w) + " smaller than feature map " + to_string(s) +
                     " (downsampling not supported)");
  }
  Var<T> w = reshape(bind("head/weight"), Shape{num_classes_, in_channels_, 1, 1});
  Var<T> logits = add_channel_bias(conv2d(final_fm, w, Conv2dAttrs{1, 0}), bind("head/bias"));
  if (out_h == s[2] && out_w == s[3]) return logits;
  return bilinear_resize(logits, out_h, out_w);
}

template <typename T>
std::uint64_t hash_grids(const NamedGrids<T>& grids, const std::string& prefix) {
  std::uint64_t h = 1469598103934665603ULL;
  auto mix = [&h](const void* p, std::size_t n) {
    const auto* b = static_cast<const unsigned char*>(p);
    for (std::size_t i = 0; i < n; ++i) {
      h ^= b[i];
      h *= 1099511628211ULL;
    }
  };
  for (const auto& [name, g] : grids) {
    if (name.compare(0, prefix.size(), prefix) != 0) continue;
    mix(name.data(), name.size());
    for (std::size_t d : g.shape()) mix(&d, sizeof d);
    mix(g.data(), g.size() * sizeof(T));
  }
  return h;
}

template <typename T>
std::size_t count_values(const NamedGrids<T>& grids, const std::string& prefix) {
  std::size_t n = 0;
  for (const auto& [name, g] : grids)
    if (name.compare(0, prefix.size(), prefix) == 0) n += g.size();
  return n;
}

#define MOCO_INSTANTIATE_NETS(T)                                                              \
  template class ParamBinder<T>;                                                              \
  template Grid<T> he_normal<T>(Shape, std::size_t, std::mt19937_64&);                       \
  template void Encoder::init<T>(NamedGrids<T>&, NamedGrids<T>&, std::mt19937_64&) const;     \
  template EncoderOutput<T> Encoder::forward<T>(const ParamBinder<T>&, NamedGrids<T>&, Var<T>, \
                                                Mode) const;                                  \
  template void Projector::init<T>(NamedGrids<T>&, std::mt19937_64&) const;                   \
  template Var<T> Projector::forward<T>(const ParamBinder<T>&, Var<T>) const;                 \
  template void SegHead::init<T>(NamedGrids<T>&, std::mt19937_64&) const;                     \
  template Var<T> SegHead::forward<T>(const ParamBinder<T>&, Var<T>, std::size_t,             \
                                      std::size_t) const;                                     \
  template std::uint64_t hash_grids<T>(const NamedGrids<T>&, const std::string&);            \
  template std::size_t count_values<T>(const NamedGrids<T>&, const std::string&);

MOCO_INSTANTIATE_NETS(float)
MOCO_INSTANTIATE_NETS(double)

#undef MOCO_INSTANTIATE_NETS

}  // namespace moco
