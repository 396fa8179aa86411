// Command-line entry point: training, evaluation, gradient checking, the
// ablation grid, and synthetic dataset generation.
//
// Exit codes: 0 success, 1 check failure, 2 usage/config error,
// 3 numerical failure.

#include <cstdint>
#include <exception>
#include <iostream>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "rtpca/data.hpp"
#include "rtpca/gradcheck.hpp"
#include "rtpca/trainer.hpp"

namespace {

constexpr int kExitOk = 0;
constexpr int kExitCheckFailure = 1;
constexpr int kExitUsage = 2;
constexpr int kExitNumerical = 3;

struct CommonOverrides {
  std::string out_dir;
  int64_t seed = -1;

  void apply(rtpca::RunConfig& cfg) const {
    if (!out_dir.empty()) cfg.out_dir = out_dir;
    if (seed >= 0) cfg.seed = static_cast<uint64_t>(seed);
  }
};

template <class S>
int run_train(rtpca::RunConfig cfg, const std::string& resume) {
  rtpca::Trainer<S> trainer(std::move(cfg));
  const rtpca::TrainResult r = trainer.train(resume);
  std::cout << "trained " << r.steps << " steps; first loss "
            << rtpca::fmt_g(r.first_step_loss) << ", final loss "
            << rtpca::fmt_g(r.final_step_loss) << ", best eval MPJPE "
            << rtpca::fmt_g(r.best_eval_mpjpe) << " mm\n"
            << "checkpoint: " << r.checkpoint_path << "\n";
  return kExitOk;
}

template <class S>
int run_eval(rtpca::RunConfig cfg, const std::string& checkpoint, double sigma,
             bool debug_identity) {
  const std::string out_dir = cfg.out_dir;
  rtpca::Trainer<S> trainer(std::move(cfg));
  trainer.load(checkpoint);
  const rtpca::MetricsReport rep =
      trainer.evaluate(out_dir, sigma, debug_identity);
  std::cout << "mpjpe_mm " << rtpca::fmt_g(rep.aggregate.mpjpe_mm)
            << "\np_mpjpe_mm " << rtpca::fmt_g(rep.aggregate.p_mpjpe_mm)
            << "\npck_pct " << rtpca::fmt_g(rep.aggregate.pck_pct)
            << "\nauc_pct " << rtpca::fmt_g(rep.aggregate.auc_pct)
            << "\nmpjve_mm " << rtpca::fmt_g(rep.aggregate.mpjve_mm)
            << "\naccel_mm_s2 " << rtpca::fmt_g(rep.aggregate.accel_mm_s2)
            << "\nreport: " << out_dir << "/report.json\n";
  return kExitOk;
}

template <class S>
int run_ablate(rtpca::RunConfig cfg) {
  const auto cells = rtpca::run_ablation<S>(cfg, &std::cout);
  std::cout << "ablation grid: " << cells.size() << " cells -> " << cfg.out_dir
            << "/ablation.csv\n";
  return kExitOk;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"2D-to-3D pose lifting with pyramid-refined cross-layer attention"};
  app.require_subcommand(1);

  std::string config_path;
  std::string checkpoint_path;
  CommonOverrides overrides;
  double sigma = -1.0;
  bool debug_identity = false;

  auto* train = app.add_subcommand("train", "train a model from a config");
  train->add_option("--config", config_path, "run config JSON")->required();
  train->add_option("--checkpoint", checkpoint_path,
                    "resume from this checkpoint");
  train->add_option("--out", overrides.out_dir, "output directory override");
  train->add_option("--seed", overrides.seed, "seed override");

  auto* eval = app.add_subcommand("eval", "evaluate a checkpoint");
  eval->add_option("--config", config_path, "run config JSON")->required();
  eval->add_option("--checkpoint", checkpoint_path, "checkpoint to evaluate")
      ->required();
  eval->add_option("--out", overrides.out_dir, "output directory override");
  eval->add_option("--seed", overrides.seed, "seed override");
  eval->add_option("--sigma", sigma, "Gaussian noise on eval 2D input");
  eval->add_flag("--debug-pred-equals-gt", debug_identity,
                 "score ground truth against itself");

  auto* gradcheck =
      app.add_subcommand("gradcheck", "finite-difference gradient suite");
  int64_t gc_seed = -1;
  std::string inject_fault;
  gradcheck->add_option("--seed", gc_seed, "seed override");
  gradcheck
      ->add_option("--inject-fault", inject_fault,
                   "corrupt the named op's analytic gradient (negative control)")
      ->group("");  // hidden

  auto* ablate = app.add_subcommand(
      "ablate", "train/evaluate the component-by-noise ablation grid");
  ablate->add_option("--config", config_path, "run config JSON")->required();
  ablate->add_option("--out", overrides.out_dir, "output directory override");
  ablate->add_option("--seed", overrides.seed, "seed override");
  ablate->add_option("--sigma", sigma,
                     "replace the configured sigma list with one value");

  auto* synth = app.add_subcommand("synth", "generate a synthetic dataset");
  std::string synth_out = "synth.jsonl";
  int64_t synth_seed = 0, synth_sequences = 4, synth_frames = 270,
          synth_joints = 17;
  double synth_fps = 50.0;
  synth->add_option("--out", synth_out, "output JSONL path");
  synth->add_option("--seed", synth_seed, "generator seed");
  synth->add_option("--sequences", synth_sequences, "number of sequences");
  synth->add_option("--frames", synth_frames, "frames per sequence");
  synth->add_option("--joints", synth_joints, "joints per frame");
  synth->add_option("--fps", synth_fps, "frame rate");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    if (e.get_exit_code() == 0) return app.exit(e);
    std::cerr << e.what() << "\n";
    return kExitUsage;
  }

  try {
    if (gradcheck->parsed()) {
      rtpca::GradCheckOptions opt;
      if (gc_seed >= 0) opt.seed = static_cast<uint64_t>(gc_seed);
      opt.inject_fault = inject_fault;
      const auto results = rtpca::run_gradcheck(opt, std::cout);
      std::vector<std::string> failing;
      double worst = 0.0;
      for (const auto& r : results) {
        worst = std::max(worst, r.max_rel_err);
        if (!r.pass) failing.push_back(r.op);
      }
      std::cout << "worst relative error: " << rtpca::fmt_g(worst) << "\n";
      if (!failing.empty()) {
        std::cout << "failing ops:";
        for (const auto& op : failing) std::cout << ' ' << op;
        std::cout << "\n";
        return kExitCheckFailure;
      }
      return kExitOk;
    }

    if (synth->parsed()) {
      const auto seqs = rtpca::synth_generate(
          static_cast<uint64_t>(synth_seed), synth_sequences, synth_frames,
          synth_joints, synth_fps);
      rtpca::save_dataset(synth_out, seqs);
      std::cout << "wrote " << seqs.size() << " sequences to " << synth_out
                << "\n";
      return kExitOk;
    }

    rtpca::RunConfig cfg = rtpca::RunConfig::from_json_file(config_path);
    overrides.apply(cfg);

    if (train->parsed()) {
      return cfg.precision == "f64"
                 ? run_train<double>(std::move(cfg), checkpoint_path)
                 : run_train<float>(std::move(cfg), checkpoint_path);
    }
    if (eval->parsed()) {
      const double s = sigma > 0.0 ? sigma : 0.0;
      return cfg.precision == "f64"
                 ? run_eval<double>(std::move(cfg), checkpoint_path, s,
                                    debug_identity)
                 : run_eval<float>(std::move(cfg), checkpoint_path, s,
                                   debug_identity);
    }
    if (ablate->parsed()) {
      if (sigma >= 0.0) cfg.ablate_sigmas = {sigma};
      return cfg.precision == "f64" ? run_ablate<double>(std::move(cfg))
                                    : run_ablate<float>(std::move(cfg));
    }
  } catch (const rtpca::NumericError& e) {
    std::cerr << "numerical failure: " << e.what() << "\n";
    return kExitNumerical;
  } catch (const rtpca::ConfigError& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return kExitUsage;
  } catch (const rtpca::ParseError& e) {
    std::cerr << "parse error: " << e.what() << "\n";
    return kExitUsage;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitUsage;
  }
  return kExitUsage;
}
