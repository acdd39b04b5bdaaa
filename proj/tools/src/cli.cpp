#include "moco_cli/cli.hpp"

#include <filesystem>
#include <fstream>
#include <numeric>
#include <sstream>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "json.hpp"
#include "moco/diagnostics.hpp"
#include "moco/downstream.hpp"
#include "moco_cli/experiment.hpp"
#include "moco_cli/run_config.hpp"

namespace moco::cli {

namespace fs = std::filesystem;

namespace {

struct Common {
  std::string config;
  std::vector<std::string> sets;
  std::string out;
};

void add_common(CLI::App* sub, Common& c, bool out_required) {
  sub->add_option("--config", c.config, "key = value configuration file");
  sub->add_option("--set", c.sets, "override key=value (repeatable, last wins)");
  auto* o = sub->add_option("--out", c.out, "run directory");
  if (out_required) o->required();
}

// --config, else config.resolved next to `fallback`, else defaults; then --set.
RunConfig resolve(const Common& c, const fs::path& fallback = {}) {
  RunConfig rc;
  if (!c.config.empty()) {
    rc = load_config(c.config);
  } else if (!fallback.empty() && fs::exists(fallback / "config.resolved")) {
    rc = load_config(fallback / "config.resolved");
  }
  for (const std::string& s : c.sets) apply_override(rc, s);
  rc.validate();
  return rc;
}

Batch load_all(const fs::path& dir) {
  const DatasetManifest m = read_manifest(dir);
  std::vector<std::size_t> idx(m.count);
  std::iota(idx.begin(), idx.end(), std::size_t{0});
  return load_batch(dir, idx);
}

Batch data_or_generate(const std::string& dir, const PhantomConfig& fallback) {
  return dir.empty() ? generate_batch(fallback) : load_all(dir);
}

void write_text(const fs::path& p, const std::string& text) {
  std::ofstream f(p, std::ios::trunc);
  if (!f) throw IoError("cannot write " + p.string());
  f << text;
}

std::string error_line(const char* kind, const std::string& type, const std::string& message) {
  nlohmann::ordered_json j;
  j["status"] = "error";
  j["kind"] = kind;
  j["type"] = type;
  j["message"] = message;
  return j.dump();
}

std::string error_type(const std::exception& e) {
  if (dynamic_cast<const CheckpointError*>(&e)) return "CheckpointError";
  if (dynamic_cast<const NumericalError*>(&e)) return "NumericalError";
  if (dynamic_cast<const ShapeError*>(&e)) return "ShapeError";
  if (dynamic_cast<const ContractError*>(&e)) return "ContractError";
  if (dynamic_cast<const IoError*>(&e)) return "IoError";
  if (dynamic_cast<const fs::filesystem_error*>(&e)) return "FilesystemError";
  return "Error";
}

}  // namespace

int run(int argc, const char* const* argv, std::ostream& out, std::ostream& err) {
  CLI::App app{"Momentum-contrast pretraining with local patches and ZCA decorrelation", "mocodesk"};
  app.require_subcommand(1);

  Common gen_c, pre_c, diag_c, eval_c, abl_c;
  std::string split = "pretrain", pre_data, diag_ckpt, diag_source = "pooled", diag_data;
  std::string eval_ckpt, eval_train, eval_val;

  auto* gen = app.add_subcommand("gen-data", "write a phantom dataset directory");
  add_common(gen, gen_c, true);
  gen->add_option("--split", split, "pretrain | eval-train | eval-val")
      ->check(CLI::IsMember({"pretrain", "eval-train", "eval-val"}));

  auto* pre = app.add_subcommand("pretrain", "pretrain and write checkpoints + metrics.jsonl");
  add_common(pre, pre_c, true);
  pre->add_option("--data", pre_data, "dataset directory (default: generate from data.*)");

  auto* diag = app.add_subcommand("diagnose", "singular-value spectrum of a checkpoint");
  add_common(diag, diag_c, false);
  diag->add_option("checkpoint", diag_ckpt, "checkpoint file")->required();
  diag->add_option("--source", diag_source, "pooled | embedding")
      ->check(CLI::IsMember({"pooled", "embedding"}));
  diag->add_option("--data", diag_data, "dataset directory (default: validation phantoms)");

  auto* ev = app.add_subcommand("evaluate", "train and score a segmentation head");
  add_common(ev, eval_c, false);
  ev->add_option("checkpoint", eval_ckpt, "checkpoint (default: eval.checkpoint_path)");
  ev->add_option("--train-data", eval_train, "labelled training set directory");
  ev->add_option("--val-data", eval_val, "validation set directory");

  auto* abl = app.add_subcommand("ablate", "pretrain the ablation rows and tabulate Dice");
  add_common(abl, abl_c, true);

  if (argc > 1 && argv[1][0] != '-') {
    const std::string sub = argv[1];
    bool known = false;
    for (const CLI::App* a : app.get_subcommands({})) known = known || a->get_name() == sub;
    if (!known) {
      err << error_line("config", "UsageError", "unknown subcommand '" + sub + "'") << std::endl;
      return kConfigError;
    }
  }
  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e, out, err);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e, out, err);
  } catch (const CLI::ParseError& e) {
    err << error_line("config", "UsageError", e.what()) << std::endl;
    return kConfigError;
  }

  // Configuration problems surface before any work starts.
  RunConfig rc;
  try {
    if (*gen) rc = resolve(gen_c);
    if (*pre) rc = resolve(pre_c);
    if (*diag) rc = resolve(diag_c, fs::path(diag_ckpt).parent_path());
    if (*ev) rc = resolve(eval_c, eval_ckpt.empty() ? fs::path() : fs::path(eval_ckpt).parent_path());
    if (*abl) rc = resolve(abl_c);
  } catch (const ConfigError& e) {
    err << error_line("config", "ConfigError", e.what()) << std::endl;
    return kConfigError;
  }

  try {
    if (*gen) {
      const PhantomConfig pc = split == "pretrain"     ? rc.data
                               : split == "eval-train" ? rc.eval_train_phantom()
                                                       : rc.eval_val_phantom();
      const DatasetManifest m = write_dataset(pc, gen_c.out);
      write_resolved_config(rc, gen_c.out);
      out << "wrote " << m.count << " samples to " << gen_c.out << "\n";
    } else if (*pre) {
      const Batch data = data_or_generate(pre_data, rc.data);
      write_resolved_config(rc, pre_c.out);
      PretrainOptions po;
      po.out_dir = pre_c.out;
      const MocoState<float> s = pretrain<float>(rc.train, data.images, po);
      out << metrics_json_line(s.last) << "\n";
    } else if (*diag) {
      const fs::path dir =
          diag_c.out.empty() ? fs::path(diag_ckpt).parent_path() / "diagnose" : fs::path(diag_c.out);
      const Batch data = data_or_generate(diag_data, rc.eval_val_phantom());
      const SpectrumReport r = checkpoint_spectrum(rc.train, diag_ckpt, data.images,
                                                   parse_feature_source(diag_source));
      fs::create_directories(dir);
      write_resolved_config(rc, dir);
      export_spectrum_csv(r, dir / "spectrum.csv");
      write_text(dir / "spectrum.json", spectrum_report_json(r) + "\n");
      out << spectrum_report_json(r) << "\n";
    } else if (*ev) {
      if (!eval_ckpt.empty()) rc.eval.checkpoint_path = eval_ckpt;
      const fs::path dir = !eval_c.out.empty() ? fs::path(eval_c.out)
                           : rc.eval.checkpoint_path.empty()
                               ? fs::path("evaluate")
                               : fs::path(rc.eval.checkpoint_path).parent_path() / "evaluate";
      const Batch train = data_or_generate(eval_train, rc.eval_train_phantom());
      const Batch val = data_or_generate(eval_val, rc.eval_val_phantom());
      const EvalOutcome o =
          train_eval_segmentation(rc.eval, rc.train, train, val, rc.data.num_classes);
      fs::create_directories(dir);
      write_resolved_config(rc, dir);
      write_text(dir / "results.json", results_json(rc.eval, o) + "\n");
      std::ofstream log(dir / "eval_metrics.jsonl", std::ios::trunc);
      for (std::size_t i = 0; i < o.losses.size(); ++i) {
        nlohmann::ordered_json j;
        j["iteration"] = i + 1;
        j["loss"] = o.losses[i];
        log << j.dump() << "\n";
      }
      out << "mean_dice " << o.dice.mean << "\n";
    } else if (*abl) {
      const AblationOutcome a = run_ablation(rc, abl_c.out, &out);
      for (std::size_t r = 0; r < a.table.rows.size(); ++r) {
        out << a.table.rows[r] << ": frozen " << a.table.cells[r][0].mean << " finetune "
            << a.table.cells[r][1].mean << "\n";
      }
    }
  } catch (const ConfigError& e) {
    err << error_line("config", "ConfigError", e.what()) << std::endl;
    return kConfigError;
  } catch (const std::exception& e) {
    err << error_line("runtime", error_type(e), e.what()) << std::endl;
    return kRuntimeError;
  }
  return kOk;
}

}  // namespace moco::cli
