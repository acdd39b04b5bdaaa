#include "moco/downstream.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <limits>
#include <numeric>

#include "json.hpp"
#include "moco/ops.hpp"

namespace moco {

const char* to_string(EvalMode m) { return m == EvalMode::kFrozen ? "frozen" : "finetune"; }

EvalMode parse_eval_mode(const std::string& s) {
  if (s == "frozen") return EvalMode::kFrozen;
  if (s == "finetune") return EvalMode::kFinetune;
  throw ConfigError("unknown eval mode '" + s + "' (expected frozen or finetune)");
}

void EvalConfig::validate() const {
  if (!(label_fraction > 0 && label_fraction <= 1)) {
    throw ConfigError("label_fraction must lie in (0, 1]");
  }
  if (iterations == 0) throw ConfigError("iterations must be positive");
  if (!(lr > 0)) throw ConfigError("eval lr must be > 0");
  if (batch_size == 0) throw ConfigError("eval batch_size must be positive");
}

double dice_score(const LabelMap& pred, const LabelMap& gt, std::size_t class_id) {
  if (pred.height != gt.height || pred.width != gt.width ||
      pred.labels.size() != gt.labels.size()) {
    throw ShapeError("dice_score: masks differ in shape");
  }
  if (class_id == 0) throw ContractError("dice_score: background (class 0) is not scored");
  std::size_t inter = 0, np = 0, ng = 0;
  for (std::size_t i = 0; i < pred.labels.size(); ++i) {
    const bool p = pred.labels[i] == class_id, g = gt.labels[i] == class_id;
    inter += p && g;
    np += p;
    ng += g;
  }
  if (np + ng == 0) return 1.0;
  return 2.0 * static_cast<double>(inter) / static_cast<double>(np + ng);
}

DiceResult evaluate_dice(const std::vector<LabelMap>& pred, const std::vector<LabelMap>& gt,
                         std::size_t num_classes) {
  if (pred.size() != gt.size()) throw ShapeError("evaluate_dice: prediction/label count differs");
  if (num_classes < 2) throw ContractError("evaluate_dice: needs at least one foreground class");
  std::vector<std::size_t> inter(num_classes, 0), np(num_classes, 0), ng(num_classes, 0);
  for (std::size_t k = 0; k < pred.size(); ++k) {
    if (pred[k].labels.size() != gt[k].labels.size() || pred[k].height != gt[k].height) {
      throw ShapeError("evaluate_dice: masks differ in shape at image " + std::to_string(k));
    }
    for (std::size_t i = 0; i < gt[k].labels.size(); ++i) {
      const std::size_t p = pred[k].labels[i], g = gt[k].labels[i];
      if (p < num_classes) ++np[p];
      if (g < num_classes) ++ng[g];
      if (p == g && p < num_classes) ++inter[p];
    }
  }
  DiceResult r;
  r.num_eval_images = pred.size();
  double sum = 0;
  std::size_t counted = 0;
  for (std::size_t c = 1; c < num_classes; ++c) {
    if (np[c] + ng[c] == 0) {
      r.per_class.push_back(std::numeric_limits<double>::quiet_NaN());
      r.counted.push_back(false);
      continue;
    }
    const double d = 2.0 * static_cast<double>(inter[c]) / static_cast<double>(np[c] + ng[c]);
    r.per_class.push_back(d);
    r.counted.push_back(true);
    sum += d;
    ++counted;
  }
  if (counted == 0) {
    throw ContractError("evaluate_dice: no foreground class in predictions or ground truth");
  }
  r.mean = sum / static_cast<double>(counted);
  return r;
}

namespace {

Grid<float> gather(const Grid<float>& images, const std::vector<std::size_t>& idx) {
  const std::size_t per = images.size() / images.dim(0);
  Shape s = images.shape();
  s[0] = idx.size();
  Grid<float> out(s);
  for (std::size_t k = 0; k < idx.size(); ++k) {
    std::copy(images.data() + idx[k] * per, images.data() + (idx[k] + 1) * per,
              out.data() + k * per);
  }
  return out;
}

std::vector<std::uint8_t> gather_labels(const std::vector<LabelMap>& masks,
                                        const std::vector<std::size_t>& idx) {
  std::vector<std::uint8_t> out;
  for (std::size_t i : idx) out.insert(out.end(), masks[i].labels.begin(), masks[i].labels.end());
  return out;
}

void check_data(const SegmentationData& d, const char* what) {
  if (d.images.rank() != 4 || d.images.dim(0) != d.masks.size() || d.masks.empty()) {
    throw ShapeError(std::string("train_eval_segmentation: malformed ") + what + " data");
  }
  for (const LabelMap& m : d.masks) {
    if (m.height != d.images.dim(2) || m.width != d.images.dim(3)) {
      throw ShapeError(std::string("train_eval_segmentation: ") + what +
                       " mask size differs from its image");
    }
  }
}

NamedGrids<float> with_prefix(const NamedGrids<float>& g, const std::string& prefix) {
  NamedGrids<float> out;
  for (const auto& [k, v] : g) {
    if (k.rfind(prefix, 0) == 0) out.emplace(k, v);
  }
  return out;
}

// Per-pixel argmax of logits [n,C,H,W].
std::vector<LabelMap> argmax_labels(const Grid<float>& logits) {
  const std::size_t n = logits.dim(0), C = logits.dim(1), H = logits.dim(2), W = logits.dim(3);
  std::vector<LabelMap> out;
  for (std::size_t b = 0; b < n; ++b) {
    LabelMap m{H, W, std::vector<std::uint8_t>(H * W, 0)};
    for (std::size_t p = 0; p < H * W; ++p) {
      std::size_t best = 0;
      float bv = logits[(b * C) * H * W + p];
      for (std::size_t c = 1; c < C; ++c) {
        const float v = logits[(b * C + c) * H * W + p];
        if (v > bv) {
          bv = v;
          best = c;
        }
      }
      m.labels[p] = static_cast<std::uint8_t>(best);
    }
    out.push_back(std::move(m));
  }
  return out;
}

}  // namespace

EvalOutcome train_eval_segmentation(const EvalConfig& config, const TrainConfig& backbone,
                                    const SegmentationData& train, const SegmentationData& val,
                                    std::size_t num_classes) {
  config.validate();
  check_data(train, "train");
  check_data(val, "validation");
  if (num_classes < 2 || num_classes > 255) {
    throw ContractError("train_eval_segmentation: num_classes must lie in [2, 255]");
  }

  TrainConfig bcfg = backbone;
  NamedGrids<float> params, buffers;
  if (config.checkpoint_path.empty()) {
    std::mt19937_64 rng(bcfg.seed);
    Encoder(bcfg.resolved_encoder()).init(params, buffers, rng);
  } else {
    Checkpoint ck = Checkpoint::load(config.checkpoint_path);
    if (config.mode == EvalMode::kFinetune && config.convert_whitening && bcfg.enable_whitening) {
      ck = whitening_to_bn_convert(ck, bcfg.encoder.norm_eps);
      bcfg.enable_whitening = false;
    }
    const MocoState<float> s = state_from_checkpoint<float>(ck, bcfg);
    params = with_prefix(s.params_q, "encoder/");
    buffers = with_prefix(s.buffers_q, "encoder/");
  }

  EvalOutcome out;
  out.backbone_hash_before = hash_grids(params, "encoder/");
  const Encoder enc(bcfg.resolved_encoder());
  const SegHead head(bcfg.encoder.feature_dim(), num_classes);
  std::mt19937_64 rng(config.seed);
  head.init(params, rng);

  const std::vector<std::size_t> subset =
      split_labels(train.images.dim(0), config.label_fraction, config.combination_seed);
  out.train_images = subset.size();
  const std::size_t H = train.images.dim(2), W = train.images.dim(3);
  const bool frozen = config.mode == EvalMode::kFrozen;

  // Frozen mode: eval-mode features of the labelled subset, computed once.
  Grid<float> features;
  if (frozen) {
    Tape<float> tape(false);
    ParamBinder<float> bind(tape, params, false);
    NamedGrids<float> fixed = buffers;
    features = enc.forward(bind, fixed, tape.constant(gather(train.images, subset)), Mode::kEval)
                   .final_fm.value();
  }
  const std::size_t fper = frozen ? features.size() / features.dim(0) : 0;

  NamedGrids<float> velocity;
  for (const auto& [name, p] : params) {
    if (!frozen || name.rfind("head/", 0) == 0) velocity.emplace(name, Grid<float>(p.shape()));
  }

  const std::size_t bs = std::min(config.batch_size, subset.size());
  std::vector<std::size_t> order(subset.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::size_t cursor = order.size();
  for (std::size_t it = 0; it < config.iterations; ++it) {
    std::vector<std::size_t> pick;  // positions within `subset`
    while (pick.size() < bs) {
      if (cursor == order.size()) {
        std::shuffle(order.begin(), order.end(), rng);
        cursor = 0;
      }
      pick.push_back(order[cursor++]);
    }
    std::vector<std::size_t> idx;
    for (std::size_t p : pick) idx.push_back(subset[p]);
    const std::vector<std::uint8_t> labels = gather_labels(train.masks, idx);

    Tape<float> tape(true);
    Var<float> logits;
    if (frozen) {
      Shape fs = features.shape();
      fs[0] = pick.size();
      Grid<float> fb(fs);
      for (std::size_t k = 0; k < pick.size(); ++k) {
        std::copy(features.data() + pick[k] * fper, features.data() + (pick[k] + 1) * fper,
                  fb.data() + k * fper);
      }
      ParamBinder<float> bind(tape, params, true);
      logits = head.forward(bind, tape.constant(std::move(fb)), H, W);
    } else {
      ParamBinder<float> bind(tape, params, true);
      EncoderOutput<float> o =
          enc.forward(bind, buffers, tape.constant(gather(train.images, idx)), Mode::kTrain);
      logits = head.forward(bind, o.final_fm, H, W);
    }
    Var<float> loss = ops::softmax_cross_entropy(logits, std::span<const std::uint8_t>(labels));
    const double lv = static_cast<double>(loss.value()[0]);
    if (!std::isfinite(lv)) {
      throw NumericalError("train_eval_segmentation: non-finite loss at iteration " +
                           std::to_string(it + 1));
    }
    out.losses.push_back(lv);
    const GradientMap<float> grads = tape.backward(loss, Grid<float>::scalar(1.0f));
    const auto lr = static_cast<float>(cosine_lr(config.lr, it, config.iterations));
    for (auto& [name, v] : velocity) {
      const Grid<float>& g = grads.at(name);
      Grid<float>& p = params.at(name);
      for (std::size_t i = 0; i < p.size(); ++i) {
        v[i] = 0.9f * v[i] + g[i];
        p[i] -= lr * v[i];
      }
    }
  }

  std::vector<LabelMap> pred;
  const std::size_t nval = val.images.dim(0), eval_batch = 32;
  for (std::size_t start = 0; start < nval; start += eval_batch) {
    std::vector<std::size_t> idx;
    for (std::size_t i = start; i < std::min(nval, start + eval_batch); ++i) idx.push_back(i);
    Tape<float> tape(false);
    ParamBinder<float> bind(tape, params, false);
    NamedGrids<float> fixed = buffers;
    EncoderOutput<float> o =
        enc.forward(bind, fixed, tape.constant(gather(val.images, idx)), Mode::kEval);
    const std::vector<LabelMap> p = argmax_labels(
        head.forward(bind, o.final_fm, val.images.dim(2), val.images.dim(3)).value());
    pred.insert(pred.end(), p.begin(), p.end());
  }
  out.dice = evaluate_dice(pred, val.masks, num_classes);
  out.backbone_hash_after = hash_grids(params, "encoder/");
  return out;
}

std::string results_json(const EvalConfig& config, const EvalOutcome& outcome) {
  nlohmann::ordered_json j;
  nlohmann::ordered_json per = nlohmann::ordered_json::array();
  for (std::size_t c = 0; c < outcome.dice.per_class.size(); ++c) {
    if (outcome.dice.counted[c]) {
      per.push_back(outcome.dice.per_class[c]);
    } else {
      per.push_back(nullptr);
    }
  }
  j["per_class_dice"] = per;
  j["mean_dice"] = outcome.dice.mean;
  j["num_eval_images"] = outcome.dice.num_eval_images;
  j["num_train_images"] = outcome.train_images;
  j["final_train_loss"] = outcome.losses.empty() ? 0.0 : outcome.losses.back();
  nlohmann::ordered_json c;
  c["mode"] = to_string(config.mode);
  c["label_fraction"] = config.label_fraction;
  c["combination_seed"] = config.combination_seed;
  c["iterations"] = config.iterations;
  c["lr"] = config.lr;
  c["batch_size"] = config.batch_size;
  c["seed"] = config.seed;
  c["checkpoint_path"] = config.checkpoint_path;
  c["convert_whitening"] = config.convert_whitening;
  j["config"] = c;
  return j.dump(2);
}

const std::array<AblationRow, 5>& ablation_rows() {
  static const std::array<AblationRow, 5> rows{{
      {"No SSL", false, false, false},
      {"baseline", true, false, false},
      {"+local", true, true, false},
      {"+decorr", true, false, true},
      {"+both", true, true, true},
  }};
  return rows;
}

AblationTable ablation_matrix(const TrainConfig& base, const EvalConfig& eval,
                              const std::map<std::string, std::vector<std::filesystem::path>>&
                                  checkpoints,
                              std::size_t num_seeds, const SegmentationData& train,
                              const SegmentationData& val, std::size_t num_classes,
                              std::size_t finetune_iterations) {
  if (num_seeds == 0) throw ContractError("ablation_matrix: num_seeds must be positive");
  for (const AblationRow& row : ablation_rows()) {
    if (!row.pretrained) continue;
    auto it = checkpoints.find(row.name);
    if (it == checkpoints.end() || it->second.size() < num_seeds) {
      throw ContractError(std::string("ablation_matrix: missing checkpoint for row '") + row.name +
                          "'");
    }
  }
  AblationTable table;
  table.columns = {"frozen", "finetune"};
  for (const AblationRow& row : ablation_rows()) {
    table.rows.emplace_back(row.name);
    std::vector<AblationCell> cells(2);
    for (std::size_t col = 0; col < 2; ++col) {
      AblationCell& cell = cells[col];
      for (std::size_t s = 0; s < num_seeds; ++s) {
        TrainConfig b = base;
        b.enable_local = row.enable_local;
        b.enable_whitening = row.enable_whitening;
        b.seed = base.seed + s;
        EvalConfig e = eval;
        e.mode = col == 0 ? EvalMode::kFrozen : EvalMode::kFinetune;
        if (col == 1 && finetune_iterations) e.iterations = finetune_iterations;
        e.seed = eval.seed + s;
        e.combination_seed = eval.combination_seed + s;
        e.checkpoint_path = row.pretrained ? checkpoints.at(row.name)[s].string() : "";
        cell.values.push_back(train_eval_segmentation(e, b, train, val, num_classes).dice.mean);
      }
      cell.mean = std::accumulate(cell.values.begin(), cell.values.end(), 0.0) /
                  static_cast<double>(cell.values.size());
      if (cell.values.size() > 1) {
        double ss = 0;
        for (double v : cell.values) ss += (v - cell.mean) * (v - cell.mean);
        cell.stddev = std::sqrt(ss / static_cast<double>(cell.values.size() - 1));
      }
    }
    table.cells.push_back(std::move(cells));
  }
  return table;
}

void export_ablation_csv(const AblationTable& table, const std::filesystem::path& path) {
  std::ofstream f(path, std::ios::trunc);
  if (!f) throw IoError("cannot write " + path.string());
  f << "row,frozen,finetune,frozen_std,finetune_std\n";
  char buf[160];
  for (std::size_t r = 0; r < table.rows.size(); ++r) {
    const auto& c = table.cells[r];
    std::snprintf(buf, sizeof buf, ",%.6f,%.6f,%.6f,%.6f\n", c[0].mean, c[1].mean, c[0].stddev,
                  c[1].stddev);
    f << table.rows[r] << buf;
  }
  if (!f) throw IoError("write failed: " + path.string());
}

}  // namespace moco
