#include "moco_cli/experiment.hpp"

#include <chrono>
#include <cstdio>
#include <fstream>
#include <sstream>

namespace moco::cli {

namespace {

std::string slug(const std::string& row) {
  std::string s;
  for (char c : row) {
    if (c == '+') {
      s += "plus_";
    } else if (c == ' ') {
      s += '_';
    } else {
      s += static_cast<char>(std::tolower(static_cast<unsigned char>(c)));
    }
  }
  return s;
}

std::string read_text(const std::filesystem::path& p) {
  std::ifstream f(p);
  std::stringstream ss;
  ss << f.rdbuf();
  return ss.str();
}

std::uint64_t total_steps(const TrainConfig& t, std::size_t n) {
  return t.max_steps ? t.max_steps : t.epochs * (n / t.batch_size);
}

}  // namespace

SpectrumReport checkpoint_spectrum(const TrainConfig& train, const std::filesystem::path& ckpt,
                                   const Grid<float>& images, FeatureSource source) {
  const MocoState<float> s = load_checkpoint<float>(ckpt, train);
  const Grid<double> f = extract_features(train.resolved_encoder(), train.resolved_projector(),
                                          s.params_q, s.buffers_q, images, source);
  return spectrum_report(f, source);
}

AblationOutcome run_ablation(const RunConfig& config, const std::filesystem::path& out,
                             std::ostream* log) {
  config.validate();
  std::filesystem::create_directories(out);
  write_resolved_config(config, out);
  const Batch pretrain_set = generate_batch(config.data);
  const Batch train_set = generate_batch(config.eval_train_phantom());
  const Batch val_set = generate_batch(config.eval_val_phantom());

  AblationOutcome result;
  std::map<std::string, std::vector<std::filesystem::path>> checkpoints;
  for (const AblationRow& row : ablation_rows()) {
    for (std::size_t s = 0; s < config.ablate_seeds; ++s) {
      RunConfig rc = config;
      rc.train.enable_local = row.enable_local;
      rc.train.enable_whitening = row.enable_whitening;
      rc.train.seed = config.train.seed + s;
      SpectrumRun run;
      run.row = row.name;
      run.seed_index = s;
      if (!row.pretrained) {
        std::mt19937_64 rng(rc.train.seed);
        NamedGrids<float> params, buffers;
        Encoder(rc.train.resolved_encoder()).init(params, buffers, rng);
        const Grid<double> f =
            extract_features(rc.train.resolved_encoder(), rc.train.resolved_projector(), params,
                             buffers, val_set.images, FeatureSource::kPooledBackbone);
        run.spectrum = spectrum_report(f, FeatureSource::kPooledBackbone);
        result.spectra.push_back(std::move(run));
        continue;
      }
      const auto dir = out / "runs" / slug(row.name) / ("seed" + std::to_string(s));
      const auto ckpt =
          dir / ("ckpt_" + std::to_string(total_steps(rc.train, config.data.num_samples)) + ".mmc1");
      const bool reuse = std::filesystem::exists(ckpt) &&
                         std::filesystem::exists(dir / "config.resolved") &&
                         read_text(dir / "config.resolved") == resolved_config_text(rc);
      if (log) *log << (reuse ? "reusing " : "pretraining ") << dir.string() << std::endl;
      if (!reuse) {
        std::filesystem::create_directories(dir);
        std::filesystem::remove(dir / "config.resolved");
        PretrainOptions po;
        po.out_dir = dir;
        const auto t0 = std::chrono::steady_clock::now();
        pretrain<float>(rc.train, pretrain_set.images, po);
        const double secs =
            std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
        std::ofstream(dir / "pretrain_seconds.txt", std::ios::trunc) << secs << "\n";
        write_resolved_config(rc, dir);  // last, so a partial run is never reused
      }
      std::ifstream(dir / "pretrain_seconds.txt") >> run.pretrain_seconds;
      checkpoints[row.name].push_back(ckpt);
      run.checkpoint = ckpt;
      run.spectrum =
          checkpoint_spectrum(rc.train, ckpt, val_set.images, FeatureSource::kPooledBackbone);
      if (log) {
        *log << "  effective_rank " << run.spectrum.effective_rank << " collapse_index "
             << run.spectrum.collapse_index << std::endl;
      }
      result.spectra.push_back(std::move(run));
    }
  }

  std::ofstream sf(out / "spectra.csv", std::ios::trunc);
  if (!sf) throw IoError("cannot write " + (out / "spectra.csv").string());
  sf << "row,seed,effective_rank,collapse_index,feature_dim,num_samples,pretrain_seconds\n";
  for (const SpectrumRun& r : result.spectra) {
    char buf[160];
    std::snprintf(buf, sizeof buf, ",%zu,%.6f,%zu,%zu,%zu,%.1f\n", r.seed_index,
                  r.spectrum.effective_rank, r.spectrum.collapse_index, r.spectrum.feature_dim,
                  r.spectrum.num_samples, r.pretrain_seconds);
    sf << r.row << buf;
  }
  sf.close();

  if (log) *log << "evaluating ablation matrix" << std::endl;
  result.table = ablation_matrix(config.train, config.eval, checkpoints, config.ablate_seeds,
                                 train_set, val_set, config.data.num_classes,
                                 config.ablate_finetune_iterations);
  export_ablation_csv(result.table, out / "ablation.csv");
  return result;
}

}  // namespace moco::cli
