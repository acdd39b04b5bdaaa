#include "moco_cli/run_config.hpp"

#include <charconv>
#include <fstream>
#include <functional>
#include <map>
#include <sstream>

namespace moco::cli {

namespace {

std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string::npos) return "";
  const auto e = s.find_last_not_of(" \t\r");
  return s.substr(b, e - b + 1);
}

[[noreturn]] void bad_value(const std::string& key, const std::string& value, const char* want) {
  throw ConfigError("bad value '" + value + "' for key '" + key + "' (expected " + want + ")");
}

void parse(const std::string& key, const std::string& v, std::size_t& out) {
  const char* end = v.data() + v.size();
  auto [p, ec] = std::from_chars(v.data(), end, out);
  if (v.empty() || ec != std::errc() || p != end) bad_value(key, v, "a non-negative integer");
}

void parse(const std::string& key, const std::string& v, int& out) {
  const char* end = v.data() + v.size();
  auto [p, ec] = std::from_chars(v.data(), end, out);
  if (v.empty() || ec != std::errc() || p != end) bad_value(key, v, "an integer");
}

void parse(const std::string& key, const std::string& v, double& out) {
  const char* end = v.data() + v.size();
  auto [p, ec] = std::from_chars(v.data(), end, out);
  if (v.empty() || ec != std::errc() || p != end) bad_value(key, v, "a real number");
}

void parse(const std::string& key, const std::string& v, bool& out) {
  if (v == "true" || v == "1") {
    out = true;
  } else if (v == "false" || v == "0") {
    out = false;
  } else {
    bad_value(key, v, "true or false");
  }
}

void parse(const std::string&, const std::string& v, std::string& out) { out = v; }

void parse(const std::string& key, const std::string& v, std::vector<std::size_t>& out) {
  std::vector<std::size_t> r;
  std::stringstream ss(v);
  std::string item;
  while (std::getline(ss, item, ',')) {
    std::size_t x = 0;
    parse(key, trim(item), x);
    r.push_back(x);
  }
  if (r.empty()) bad_value(key, v, "a comma-separated list of integers");
  out = std::move(r);
}

void parse(const std::string& key, const std::string& v, EvalMode& out) {
  try {
    out = parse_eval_mode(v);
  } catch (const ConfigError&) {
    bad_value(key, v, "frozen or finetune");
  }
}

std::string show(std::size_t v) { return std::to_string(v); }
std::string show(int v) { return std::to_string(v); }
std::string show(bool v) { return v ? "true" : "false"; }
std::string show(const std::string& v) { return v; }
std::string show(EvalMode m) { return to_string(m); }
std::string show(double v) {
  char buf[64];
  auto [p, ec] = std::to_chars(buf, buf + sizeof buf, v);  // shortest round-trip form
  return std::string(buf, p);
}
std::string show(const std::vector<std::size_t>& v) {
  std::string s;
  for (std::size_t i = 0; i < v.size(); ++i) s += (i ? "," : "") + std::to_string(v[i]);
  return s;
}

struct Field {
  std::function<void(RunConfig&, const std::string&, const std::string&)> set;
  std::function<std::string(const RunConfig&)> get;
};

struct Registry {
  std::vector<std::string> order;
  std::map<std::string, Field> fields;

  template <typename Access>
  void add(const std::string& key, Access access) {
    order.push_back(key);
    fields[key] = Field{
        [access](RunConfig& c, const std::string& k, const std::string& v) { parse(k, v, access(c)); },
        [access](const RunConfig& c) { return show(access(const_cast<RunConfig&>(c))); }};
  }
};

#define MOCO_FIELD(key, member) r.add(key, [](RunConfig& c) -> auto& { return c.member; })

const Registry& registry() {
  static const Registry reg = [] {
    Registry r;
    MOCO_FIELD("batch_size", train.batch_size);
    MOCO_FIELD("queue_size", train.queue_size);
    MOCO_FIELD("momentum", train.momentum);
    MOCO_FIELD("tau", train.tau);
    MOCO_FIELD("lambda", train.lambda);
    MOCO_FIELD("K", train.K);
    MOCO_FIELD("epochs", train.epochs);
    MOCO_FIELD("max_steps", train.max_steps);
    MOCO_FIELD("lr", train.lr);
    MOCO_FIELD("weight_decay", train.weight_decay);
    MOCO_FIELD("sgd_momentum", train.sgd_momentum);
    MOCO_FIELD("enable_local", train.enable_local);
    MOCO_FIELD("enable_whitening", train.enable_whitening);
    MOCO_FIELD("denominator_includes_positive", train.denominator_includes_positive);
    MOCO_FIELD("seed", train.seed);
    MOCO_FIELD("checkpoint_every", train.checkpoint_every);
    MOCO_FIELD("encoder.in_channels", train.encoder.in_channels);
    MOCO_FIELD("encoder.stage_channels", train.encoder.stage_channels);
    MOCO_FIELD("encoder.stage_strides", train.encoder.stage_strides);
    MOCO_FIELD("encoder.blocks_per_stage", train.encoder.blocks_per_stage);
    MOCO_FIELD("encoder.whitening_iterations", train.encoder.whitening_iterations);
    MOCO_FIELD("encoder.norm_eps", train.encoder.norm_eps);
    MOCO_FIELD("encoder.norm_momentum", train.encoder.norm_momentum);
    MOCO_FIELD("projector.hidden_dim", train.projector.hidden_dim);
    MOCO_FIELD("projector.out_dim", train.projector.out_dim);
    MOCO_FIELD("augment.enable_jitter", train.augment.enable_jitter);
    MOCO_FIELD("augment.enable_blur", train.augment.enable_blur);
    MOCO_FIELD("augment.crop_scale_min", train.augment.crop_scale_min);
    MOCO_FIELD("augment.crop_scale_max", train.augment.crop_scale_max);
    MOCO_FIELD("augment.flip_prob", train.augment.flip_prob);
    MOCO_FIELD("augment.brightness", train.augment.brightness);
    MOCO_FIELD("augment.contrast", train.augment.contrast);
    MOCO_FIELD("augment.blur_prob", train.augment.blur_prob);
    MOCO_FIELD("augment.blur_sigma_min", train.augment.blur_sigma_min);
    MOCO_FIELD("augment.blur_sigma_max", train.augment.blur_sigma_max);
    MOCO_FIELD("data.image_size", data.image_size);
    MOCO_FIELD("data.num_classes", data.num_classes);
    MOCO_FIELD("data.num_samples", data.num_samples);
    MOCO_FIELD("data.template_seed", data.template_seed);
    MOCO_FIELD("data.sample_seed_base", data.sample_seed_base);
    MOCO_FIELD("data.deform_amplitude", data.deform_amplitude);
    MOCO_FIELD("data.texture_noise", data.texture_noise);
    MOCO_FIELD("eval.mode", eval.mode);
    MOCO_FIELD("eval.label_fraction", eval.label_fraction);
    MOCO_FIELD("eval.combination_seed", eval.combination_seed);
    MOCO_FIELD("eval.iterations", eval.iterations);
    MOCO_FIELD("eval.lr", eval.lr);
    MOCO_FIELD("eval.batch_size", eval.batch_size);
    MOCO_FIELD("eval.seed", eval.seed);
    MOCO_FIELD("eval.checkpoint_path", eval.checkpoint_path);
    MOCO_FIELD("eval.convert_whitening", eval.convert_whitening);
    MOCO_FIELD("eval.train_samples", eval_train_samples);
    MOCO_FIELD("eval.val_samples", eval_val_samples);
    MOCO_FIELD("eval.train_seed_base", eval_train_seed_base);
    MOCO_FIELD("eval.val_seed_base", eval_val_seed_base);
    MOCO_FIELD("ablate.seeds", ablate_seeds);
    MOCO_FIELD("ablate.finetune_iterations", ablate_finetune_iterations);
    return r;
  }();
  return reg;
}

#undef MOCO_FIELD

}  // namespace

void RunConfig::validate() const {
  train.validate();
  data.validate();
  eval.validate();
  if (train.encoder.in_channels != 1) {
    throw ConfigError("encoder.in_channels must be 1 for single-channel phantoms");
  }
  if (data.image_size % train.encoder.total_stride() != 0) {
    throw ConfigError("data.image_size must be divisible by the encoder stride " +
                      std::to_string(train.encoder.total_stride()));
  }
  if (eval_train_samples == 0 || eval_val_samples == 0) {
    throw ConfigError("eval.train_samples and eval.val_samples must be positive");
  }
  if (ablate_seeds == 0) throw ConfigError("ablate.seeds must be positive");
}

PhantomConfig RunConfig::eval_train_phantom() const {
  PhantomConfig p = data;
  p.num_samples = eval_train_samples;
  p.sample_seed_base = eval_train_seed_base;
  return p;
}

PhantomConfig RunConfig::eval_val_phantom() const {
  PhantomConfig p = data;
  p.num_samples = eval_val_samples;
  p.sample_seed_base = eval_val_seed_base;
  return p;
}

const std::vector<std::string>& config_keys() { return registry().order; }

void apply_setting(RunConfig& config, const std::string& key, const std::string& value) {
  const auto& fields = registry().fields;
  auto it = fields.find(key);
  if (it == fields.end()) throw ConfigError("unknown config key '" + key + "'");
  it->second.set(config, key, value);
}

void apply_config_text(RunConfig& config, const std::string& text, const std::string& origin) {
  std::istringstream in(text);
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (const auto hash = line.find('#'); hash != std::string::npos) line.resize(hash);
    line = trim(line);
    if (line.empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos) {
      throw ConfigError(origin + ":" + std::to_string(lineno) + ": expected 'key = value', got '" +
                        line + "'");
    }
    try {
      apply_setting(config, trim(line.substr(0, eq)), trim(line.substr(eq + 1)));
    } catch (const ConfigError& e) {
      throw ConfigError(origin + ":" + std::to_string(lineno) + ": " + e.what());
    }
  }
}

void apply_override(RunConfig& config, const std::string& assignment) {
  const auto eq = assignment.find('=');
  if (eq == std::string::npos) {
    throw ConfigError("--set expects key=value, got '" + assignment + "'");
  }
  apply_setting(config, trim(assignment.substr(0, eq)), trim(assignment.substr(eq + 1)));
}

RunConfig load_config(const std::filesystem::path& path) {
  std::ifstream f(path);
  if (!f) throw ConfigError("cannot read config file " + path.string());
  std::stringstream ss;
  ss << f.rdbuf();
  RunConfig c;
  apply_config_text(c, ss.str(), path.string());
  return c;
}

std::string resolved_config_text(const RunConfig& config) {
  std::string out;
  for (const std::string& key : registry().order) {
    out += key + " = " + registry().fields.at(key).get(config) + "\n";
  }
  return out;
}

void write_resolved_config(const RunConfig& config, const std::filesystem::path& dir) {
  std::filesystem::create_directories(dir);
  std::ofstream f(dir / "config.resolved", std::ios::trunc);
  if (!f) throw IoError("cannot write " + (dir / "config.resolved").string());
  f << resolved_config_text(config);
}

}  // namespace moco::cli
