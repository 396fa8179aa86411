#pragma once

// Run configuration, the training and evaluation loops, and the ablation
// grid. Everything a run produces (logs, checkpoints, reports) is a
// deterministic function of (seed, config, dataset).

#include <cinttypes>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <memory>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include <json.hpp>

#include "rtpca/checkpoint.hpp"
#include "rtpca/data.hpp"
#include "rtpca/losses.hpp"
#include "rtpca/model.hpp"
#include "rtpca/optimizer.hpp"
#include "rtpca/random.hpp"
#include "rtpca/tensor.hpp"

namespace rtpca {

struct DataConfig {
  std::string train_path;
  std::string eval_path;  // empty: evaluate on the training data
  // 2D inputs are multiplied by input_scale and 3D targets divided by
  // target_scale before entering the network; predictions are scaled back
  // to millimetres for metrics. Keeps activations O(1) at desk scale.
  double input_scale = 10.0;
  double target_scale = 100.0;
};

struct RunConfig {
  ModelConfig model;
  LossWeights loss_weights;
  bool squared_wmpjpe = true;
  std::string joint_weights_path;

  AdamConfig adam;
  std::string schedule = "constant";  // "constant" | "exponential"
  double decay_per_epoch = 0.99;

  int64_t batch_size = 32;
  int64_t epochs = 10;
  int64_t max_steps = 0;   // 0: no cap
  int64_t eval_every = 1;  // epochs between evaluations
  uint64_t seed = 0;
  std::string precision = "f32";  // "f32" | "f64"

  DataConfig data;
  double noise_sigma = 0.0;  // train-time 2D corruption; 0 disables
  std::string out_dir = "runs/out";

  std::vector<double> ablate_sigmas{0.0};
  std::vector<std::string> ablate_variants{"ste", "ste_tpca", "ste_xlr",
                                           "rtpca"};

  void validate() const {
    model.validate();
    adam.validate();
    if (batch_size < 1) throw ConfigError("config: batch_size must be >= 1");
    if (epochs < 1) throw ConfigError("config: epochs must be >= 1");
    if (eval_every < 1) throw ConfigError("config: eval_every must be >= 1");
    if (max_steps < 0) throw ConfigError("config: max_steps must be >= 0");
    if (precision != "f32" && precision != "f64") {
      throw ConfigError("config: precision must be 'f32' or 'f64'");
    }
    if (schedule != "constant" && schedule != "exponential") {
      throw ConfigError("config: schedule must be 'constant' or 'exponential'");
    }
    if (decay_per_epoch <= 0.0 || decay_per_epoch > 1.0) {
      throw ConfigError("config: decay_per_epoch must be in (0, 1]");
    }
    if (noise_sigma < 0.0) throw ConfigError("config: noise_sigma must be >= 0");
    if (lossWeightsNegative()) {
      throw ConfigError("config: loss weights must be non-negative");
    }
    if (data.train_path.empty()) {
      throw ConfigError("config: data.train_path is required");
    }
    if (!(data.input_scale > 0.0) || !(data.target_scale > 0.0)) {
      throw ConfigError("config: data scales must be > 0");
    }
  }

  bool lossWeightsNegative() const {
    return loss_weights.lambda_t < 0.0 || loss_weights.lambda_m < 0.0;
  }

  nlohmann::ordered_json to_json() const {
    nlohmann::ordered_json j;
    j["model"] = model_config_to_json(model);
    j["loss"] = {{"lambda_t", loss_weights.lambda_t},
                 {"lambda_m", loss_weights.lambda_m},
                 {"squared_wmpjpe", squared_wmpjpe},
                 {"joint_weights_path", joint_weights_path}};
    j["optimizer"] = {{"lr", adam.lr},
                      {"beta1", adam.beta1},
                      {"beta2", adam.beta2},
                      {"eps", adam.eps},
                      {"weight_decay", adam.weight_decay},
                      {"schedule", schedule},
                      {"decay_per_epoch", decay_per_epoch}};
    j["batch_size"] = batch_size;
    j["epochs"] = epochs;
    j["max_steps"] = max_steps;
    j["eval_every"] = eval_every;
    j["seed"] = seed;
    j["precision"] = precision;
    j["data"] = {{"train_path", data.train_path},
                 {"eval_path", data.eval_path},
                 {"input_scale", data.input_scale},
                 {"target_scale", data.target_scale}};
    j["noise_sigma"] = noise_sigma;
    j["out_dir"] = out_dir;
    j["ablate"] = {{"sigmas", ablate_sigmas}, {"variants", ablate_variants}};
    return j;
  }

  static RunConfig from_json(const nlohmann::json& j) {
    RunConfig cfg;
    try {
      if (j.contains("model")) cfg.model = model_config_from_json(j["model"]);
      if (j.contains("loss")) {
        const auto& l = j["loss"];
        cfg.loss_weights.lambda_t = l.value("lambda_t", cfg.loss_weights.lambda_t);
        cfg.loss_weights.lambda_m = l.value("lambda_m", cfg.loss_weights.lambda_m);
        cfg.squared_wmpjpe = l.value("squared_wmpjpe", cfg.squared_wmpjpe);
        cfg.joint_weights_path =
            l.value("joint_weights_path", cfg.joint_weights_path);
      }
      if (j.contains("optimizer")) {
        const auto& o = j["optimizer"];
        cfg.adam.lr = o.value("lr", cfg.adam.lr);
        cfg.adam.beta1 = o.value("beta1", cfg.adam.beta1);
        cfg.adam.beta2 = o.value("beta2", cfg.adam.beta2);
        cfg.adam.eps = o.value("eps", cfg.adam.eps);
        cfg.adam.weight_decay = o.value("weight_decay", cfg.adam.weight_decay);
        cfg.schedule = o.value("schedule", cfg.schedule);
        cfg.decay_per_epoch = o.value("decay_per_epoch", cfg.decay_per_epoch);
      }
      cfg.batch_size = j.value("batch_size", cfg.batch_size);
      cfg.epochs = j.value("epochs", cfg.epochs);
      cfg.max_steps = j.value("max_steps", cfg.max_steps);
      cfg.eval_every = j.value("eval_every", cfg.eval_every);
      cfg.seed = j.value("seed", cfg.seed);
      cfg.precision = j.value("precision", cfg.precision);
      if (j.contains("data")) {
        const auto& d = j["data"];
        cfg.data.train_path = d.value("train_path", cfg.data.train_path);
        cfg.data.eval_path = d.value("eval_path", cfg.data.eval_path);
        cfg.data.input_scale = d.value("input_scale", cfg.data.input_scale);
        cfg.data.target_scale = d.value("target_scale", cfg.data.target_scale);
      }
      cfg.noise_sigma = j.value("noise_sigma", cfg.noise_sigma);
      cfg.out_dir = j.value("out_dir", cfg.out_dir);
      if (j.contains("ablate")) {
        const auto& a = j["ablate"];
        if (a.contains("sigmas"))
          cfg.ablate_sigmas = a["sigmas"].get<std::vector<double>>();
        if (a.contains("variants"))
          cfg.ablate_variants = a["variants"].get<std::vector<std::string>>();
      }
    } catch (const nlohmann::json::exception& e) {
      throw ParseError(std::string("config: ") + e.what());
    }
    cfg.validate();
    return cfg;
  }

  static RunConfig from_json_file(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw ParseError("config: cannot open " + path);
    nlohmann::json j;
    try {
      in >> j;
    } catch (const nlohmann::json::exception& e) {
      throw ParseError("config: " + path + ": " + e.what());
    }
    return from_json(j);
  }
};

// Fixed-format float for CSV logs so identical runs emit identical bytes.
inline std::string fmt_g(double v) {
  char buf[40];
  std::snprintf(buf, sizeof(buf), "%.10g", v);
  return buf;
}

struct TrainResult {
  int64_t steps = 0;
  double first_step_loss = 0.0;
  double final_step_loss = 0.0;
  double best_eval_mpjpe = -1.0;
  std::string checkpoint_path;
};

template <class S>
class Trainer {
 public:
  explicit Trainer(RunConfig cfg) : cfg_(std::move(cfg)) {
    cfg_.validate();
    train_seqs_ = load_dataset(cfg_.data.train_path);
    if (train_seqs_.empty()) {
      throw ConfigError("trainer: training dataset " + cfg_.data.train_path +
                        " holds no sequences");
    }
    eval_seqs_ = cfg_.data.eval_path.empty()
                     ? train_seqs_
                     : load_dataset(cfg_.data.eval_path);
    for (const auto& seq : train_seqs_) check_sequence(seq);
    for (const auto& seq : eval_seqs_) check_sequence(seq);

    if (cfg_.noise_sigma > 0.0) {
      for (size_t i = 0; i < train_seqs_.size(); ++i) {
        train_seqs_[i] = add_gaussian_noise(
            train_seqs_[i], cfg_.noise_sigma,
            Rng::derive(cfg_.seed, 9000 + static_cast<uint64_t>(i)));
      }
    }

    joint_weights_ =
        cfg_.joint_weights_path.empty()
            ? JointWeights::defaults(cfg_.model.joints)
            : JointWeights::from_json_file(cfg_.joint_weights_path);
    joint_weights_.validate(cfg_.model.joints);

    Rng init_rng(Rng::derive(cfg_.seed, 0));
    model_ = std::make_unique<RtpcaModel<S>>(cfg_.model, init_rng);
    order_rng_ = Rng(Rng::derive(cfg_.seed, 1));
    dropout_rng_ = Rng(Rng::derive(cfg_.seed, 2));
  }

  RtpcaModel<S>& model() { return *model_; }
  const RunConfig& config() const { return cfg_; }

  // Loads model parameters from a checkpoint, verifying the config echo.
  void load(const std::string& checkpoint_path) {
    load_checkpoint<S>(checkpoint_path, cfg_.model, model_->params(), nullptr);
  }

  TrainResult train(const std::string& resume_checkpoint = "") {
    namespace fs = std::filesystem;
    fs::create_directories(cfg_.out_dir);

    std::vector<Window> windows = train_windows();
    if (windows.empty()) {
      throw ConfigError("trainer: no training windows (sequences shorter than " +
                        std::to_string(cfg_.model.frames) + " frames)");
    }

    Adam<S> adam(model_->params(), cfg_.adam);
    int64_t start_epoch = 0;
    double best_mpjpe = -1.0;
    if (!resume_checkpoint.empty()) {
      CheckpointExtra<S> extra;
      load_checkpoint(resume_checkpoint, cfg_.model, model_->params(), &extra);
      adam.restore(std::move(extra.adam_m), std::move(extra.adam_v),
                   extra.step);
      start_epoch = extra.epoch;
      best_mpjpe = extra.best_mpjpe;
      restore_rngs(extra.rng_state);
    }

    std::ofstream train_log(cfg_.out_dir + "/train_log.csv",
                            std::ios::binary);
    std::ofstream eval_log(cfg_.out_dir + "/eval_log.csv", std::ios::binary);
    train_log << "step,epoch,lr,loss,wmpjpe,tc_loss,mpjve\n";
    eval_log << "epoch,step,mpjpe_mm,p_mpjpe_mm\n";

    TrainResult result;
    result.checkpoint_path = cfg_.out_dir + "/best.ckpt";
    int64_t step = adam.step_count();
    bool stop = false;
    for (int64_t epoch = start_epoch; epoch < cfg_.epochs && !stop; ++epoch) {
      const double lr =
          cfg_.schedule == "exponential"
              ? cfg_.adam.lr * std::pow(cfg_.decay_per_epoch,
                                        static_cast<double>(epoch))
              : cfg_.adam.lr;
      order_rng_.shuffle(windows);
      for (size_t off = 0; off < windows.size() && !stop;
           off += static_cast<size_t>(cfg_.batch_size)) {
        const size_t count = std::min(static_cast<size_t>(cfg_.batch_size),
                                      windows.size() - off);
        const std::vector<Window> batch(windows.begin() + off,
                                        windows.begin() + off + count);
        Tensor<S> x2d = batch_inputs(train_seqs_, batch);
        Tensor<S> y3d = batch_targets(train_seqs_, batch);
        Tensor<S> pred =
            model_->forward(x2d, DropoutMode::train, &dropout_rng_);
        LossBreakdown<S> loss = total_loss(pred, y3d, joint_weights_,
                                           cfg_.loss_weights,
                                           cfg_.squared_wmpjpe);
        const double loss_val = static_cast<double>(loss.total.item());
        ++step;
        if (!std::isfinite(loss_val)) {
          throw NumericError("training loss became non-finite at step " +
                             std::to_string(step));
        }
        backward(loss.total);
        adam.step(model_->params(), lr);
        model_->params().zero_grad();

        train_log << step << ',' << epoch << ',' << fmt_g(lr) << ','
                  << fmt_g(loss_val) << ','
                  << fmt_g(static_cast<double>(loss.wmpjpe.item())) << ','
                  << fmt_g(static_cast<double>(loss.tc.item())) << ','
                  << fmt_g(static_cast<double>(loss.mpjve.item())) << '\n';
        if (result.steps == 0) result.first_step_loss = loss_val;
        result.final_step_loss = loss_val;
        ++result.steps;
        if (cfg_.max_steps > 0 && step >= cfg_.max_steps) stop = true;
      }

      const bool last_epoch = stop || epoch + 1 == cfg_.epochs;
      if ((epoch + 1) % cfg_.eval_every == 0 || last_epoch) {
        MetricsAccumulator acc;
        accumulate_eval(acc, eval_seqs_, 0.0, 0, false, nullptr);
        const MetricsReport rep = acc.finalize();
        eval_log << epoch << ',' << step << ','
                 << fmt_g(rep.aggregate.mpjpe_mm) << ','
                 << fmt_g(rep.aggregate.p_mpjpe_mm) << '\n';
        if (best_mpjpe < 0.0 || rep.aggregate.mpjpe_mm < best_mpjpe) {
          best_mpjpe = rep.aggregate.mpjpe_mm;
          CheckpointExtra<S> extra;
          extra.step = step;
          extra.epoch = epoch + 1;
          extra.best_mpjpe = best_mpjpe;
          extra.rng_state = save_rngs();
          extra.adam_m = adam.first_moments();
          extra.adam_v = adam.second_moments();
          save_checkpoint(result.checkpoint_path, cfg_.model, model_->params(),
                          &extra);
        }
      }
    }
    result.best_eval_mpjpe = best_mpjpe;
    return result;
  }

  // Evaluates the configured eval dataset; optionally corrupts the 2D input
  // with Gaussian noise, and optionally substitutes ground truth for the
  // predictions (debug). Writes report.json, per_frame_mpjpe.csv and the
  // per-head attention matrices of the final temporal block.
  MetricsReport evaluate(const std::string& out_dir, double noise_sigma,
                         bool debug_identity) {
    namespace fs = std::filesystem;
    if (!out_dir.empty()) fs::create_directories(out_dir);
    MetricsAccumulator acc;
    ForwardTrace<S> trace;
    accumulate_eval(acc, eval_seqs_, noise_sigma, Rng::derive(cfg_.seed, 500),
                    debug_identity, &trace);
    MetricsReport rep = acc.finalize();
    if (!out_dir.empty()) {
      std::ofstream rj(out_dir + "/report.json", std::ios::binary);
      rj << rep.to_json().dump(2) << '\n';
      std::ofstream pf(out_dir + "/per_frame_mpjpe.csv", std::ios::binary);
      pf << "frame_index,mpjpe_mm\n";
      for (size_t f = 0; f < rep.per_frame_mpjpe.size(); ++f) {
        pf << f << ',' << fmt_g(rep.per_frame_mpjpe[f]) << '\n';
      }
      export_attention(trace, out_dir);
    }
    return rep;
  }

 private:
  void check_sequence(const PoseSequence& seq) const {
    if (seq.joints != cfg_.model.joints) {
      throw ConfigError("trainer: sequence '" + seq.subject + "/" +
                        seq.action + "' has " + std::to_string(seq.joints) +
                        " joints, model expects " +
                        std::to_string(cfg_.model.joints));
    }
  }

  std::vector<Window> train_windows() const {
    std::vector<Window> out;
    for (size_t i = 0; i < train_seqs_.size(); ++i) {
      for (Window w : stride_sample(train_seqs_[i], cfg_.model.frames,
                                    SampleMode::train)) {
        w.sequence = static_cast<int64_t>(i);
        out.push_back(w);
      }
    }
    return out;
  }

  Tensor<S> batch_inputs(const std::vector<PoseSequence>& seqs,
                         const std::vector<Window>& batch) const {
    const int64_t J = cfg_.model.joints, F = cfg_.model.frames;
    const int64_t B = static_cast<int64_t>(batch.size());
    std::vector<S> x(static_cast<size_t>(B * J * F * 2));
    size_t i = 0;
    for (const Window& w : batch) {
      const PoseSequence& seq = seqs[static_cast<size_t>(w.sequence)];
      for (int64_t j = 0; j < J; ++j) {
        for (int64_t f = 0; f < F; ++f) {
          const int64_t frame = w.start + std::min(f, w.valid - 1);
          x[i++] = static_cast<S>(seq.at2d(frame, j, 0) *
                                  cfg_.data.input_scale);
          x[i++] = static_cast<S>(seq.at2d(frame, j, 1) *
                                  cfg_.data.input_scale);
        }
      }
    }
    return Tensor<S>::from_data({B, J, F, 2}, std::move(x));
  }

  Tensor<S> batch_targets(const std::vector<PoseSequence>& seqs,
                          const std::vector<Window>& batch) const {
    const int64_t J = cfg_.model.joints, F = cfg_.model.frames;
    const int64_t B = static_cast<int64_t>(batch.size());
    std::vector<S> y(static_cast<size_t>(B * J * F * 3));
    size_t i = 0;
    for (const Window& w : batch) {
      const PoseSequence& seq = seqs[static_cast<size_t>(w.sequence)];
      for (int64_t j = 0; j < J; ++j) {
        for (int64_t f = 0; f < F; ++f) {
          const int64_t frame = w.start + std::min(f, w.valid - 1);
          for (int64_t c = 0; c < 3; ++c) {
            y[i++] = static_cast<S>(seq.at3d(frame, j, c) /
                                    cfg_.data.target_scale);
          }
        }
      }
    }
    return Tensor<S>::from_data({B, J, F, 3}, std::move(y));
  }

  void accumulate_eval(MetricsAccumulator& acc,
                       const std::vector<PoseSequence>& base_seqs,
                       double noise_sigma, uint64_t noise_seed,
                       bool debug_identity, ForwardTrace<S>* trace) {
    std::vector<PoseSequence> seqs;
    const std::vector<PoseSequence>* used = &base_seqs;
    if (noise_sigma > 0.0) {
      seqs.reserve(base_seqs.size());
      for (size_t i = 0; i < base_seqs.size(); ++i) {
        seqs.push_back(add_gaussian_noise(
            base_seqs[i], noise_sigma,
            Rng::derive(noise_seed, static_cast<uint64_t>(i))));
      }
      used = &seqs;
    }

    std::vector<Window> windows;
    for (size_t i = 0; i < used->size(); ++i) {
      for (Window w :
           stride_sample((*used)[i], cfg_.model.frames, SampleMode::eval)) {
        w.sequence = static_cast<int64_t>(i);
        windows.push_back(w);
      }
    }
    if (windows.empty()) {
      throw ConfigError("trainer: evaluation produced no windows");
    }

    const int64_t J = cfg_.model.joints, F = cfg_.model.frames;
    bool first_batch = true;
    for (size_t off = 0; off < windows.size();
         off += static_cast<size_t>(cfg_.batch_size)) {
      const size_t count = std::min(static_cast<size_t>(cfg_.batch_size),
                                    windows.size() - off);
      const std::vector<Window> batch(windows.begin() + off,
                                      windows.begin() + off + count);
      Tensor<S> x2d = batch_inputs(*used, batch);
      Tensor<S> pred = model_->forward(x2d, DropoutMode::eval, nullptr,
                                       first_batch ? trace : nullptr);
      first_batch = false;
      const auto& pv = pred.values();
      for (size_t b = 0; b < batch.size(); ++b) {
        const Window& w = batch[b];
        const PoseSequence& seq = base_seqs[static_cast<size_t>(w.sequence)];
        std::vector<double> pw(static_cast<size_t>(J * F * 3));
        std::vector<double> gw(static_cast<size_t>(J * F * 3));
        for (int64_t j = 0; j < J; ++j) {
          for (int64_t f = 0; f < F; ++f) {
            const int64_t frame = w.start + std::min(f, w.valid - 1);
            for (int64_t c = 0; c < 3; ++c) {
              const size_t dst = static_cast<size_t>((j * F + f) * 3 + c);
              const size_t src = static_cast<size_t>(
                  (((static_cast<int64_t>(b) * J + j) * F) + f) * 3 + c);
              gw[dst] = seq.at3d(frame, j, c);
              pw[dst] = debug_identity
                            ? gw[dst]
                            : static_cast<double>(pv[src]) *
                                  cfg_.data.target_scale;
            }
          }
        }
        acc.add(Tensor<double>::from_data({J, F, 3}, std::move(pw)),
                Tensor<double>::from_data({J, F, 3}, std::move(gw)), w.valid,
                w.start, seq.fps, seq.action);
      }
    }
  }

  void export_attention(const ForwardTrace<S>& trace,
                        const std::string& out_dir) const {
    if (!trace.last_tt_weights.valid()) return;
    const Tensor<S>& w = trace.last_tt_weights;  // [T, h, n_q, n_kv]
    const int64_t T = w.dim(0), H = w.dim(1), nq = w.dim(2), nk = w.dim(3);
    const auto& wv = w.values();
    for (int64_t h = 0; h < H; ++h) {
      std::ofstream out(out_dir + "/attn_head" + std::to_string(h) + ".csv",
                        std::ios::binary);
      for (int64_t q = 0; q < nq; ++q) {
        for (int64_t k = 0; k < nk; ++k) {
          double sum = 0.0;
          for (int64_t t = 0; t < T; ++t) {
            sum += static_cast<double>(
                wv[static_cast<size_t>(((t * H + h) * nq + q) * nk + k)]);
          }
          out << (k ? "," : "") << fmt_g(sum / static_cast<double>(T));
        }
        out << '\n';
      }
    }
  }

  std::string save_rngs() const {
    return order_rng_.save_state() + "|" + dropout_rng_.save_state();
  }

  void restore_rngs(const std::string& s) {
    const size_t bar = s.find('|');
    if (bar == std::string::npos) return;
    order_rng_.restore_state(s.substr(0, bar));
    dropout_rng_.restore_state(s.substr(bar + 1));
  }

  RunConfig cfg_;
  std::vector<PoseSequence> train_seqs_;
  std::vector<PoseSequence> eval_seqs_;
  JointWeights joint_weights_;
  std::unique_ptr<RtpcaModel<S>> model_;
  Rng order_rng_{0};
  Rng dropout_rng_{0};
};

// ---------------------------------------------------------------------------
// Ablation grid: {ste, ste_tpca, ste_xlr, rtpca} x sigma values. Each
// variant trains once on the shared seed; noise applies at evaluation time.
// ---------------------------------------------------------------------------

struct AblateCell {
  std::string variant;
  double sigma = 0.0;
  double mpjpe_mm = 0.0;
  double accel_mm_s2 = 0.0;
};

inline ModelConfig ablate_variant_config(const ModelConfig& base,
                                         const std::string& variant) {
  ModelConfig cfg = base;
  if (variant == "ste") {
    cfg.tpca.stages = 0;
    cfg.xlr.enabled = false;
  } else if (variant == "ste_tpca") {
    cfg.xlr.enabled = false;
  } else if (variant == "ste_xlr") {
    cfg.tpca.stages = 0;
    cfg.xlr.enabled = true;
  } else if (variant == "rtpca") {
    cfg.xlr.enabled = true;
  } else {
    throw ConfigError("ablate: unknown variant '" + variant +
                      "' (expected ste, ste_tpca, ste_xlr or rtpca)");
  }
  return cfg;
}

template <class S>
std::vector<AblateCell> run_ablation(const RunConfig& cfg,
                                     std::ostream* progress = nullptr) {
  namespace fs = std::filesystem;
  if (cfg.ablate_variants.empty() || cfg.ablate_sigmas.empty()) {
    throw ConfigError("ablate: needs at least one variant and one sigma");
  }
  fs::create_directories(cfg.out_dir);
  std::vector<AblateCell> cells;
  for (const std::string& variant : cfg.ablate_variants) {
    RunConfig vcfg = cfg;
    vcfg.model = ablate_variant_config(cfg.model, variant);
    vcfg.out_dir = cfg.out_dir + "/" + variant;
    Trainer<S> trainer(vcfg);
    if (progress) *progress << "[ablate] training " << variant << "\n";
    const TrainResult tr = trainer.train();
    trainer.load(tr.checkpoint_path);  // evaluate the best checkpoint
    for (double sigma : cfg.ablate_sigmas) {
      MetricsReport rep = trainer.evaluate(
          vcfg.out_dir + "/sigma_" + fmt_g(sigma), sigma, false);
      cells.push_back(
          {variant, sigma, rep.aggregate.mpjpe_mm, rep.aggregate.accel_mm_s2});
      if (progress) {
        *progress << "[ablate] " << variant << " sigma=" << fmt_g(sigma)
                  << " mpjpe=" << fmt_g(rep.aggregate.mpjpe_mm)
                  << " accel=" << fmt_g(rep.aggregate.accel_mm_s2) << "\n";
      }
    }
  }
  std::ofstream csv(cfg.out_dir + "/ablation.csv", std::ios::binary);
  csv << "variant,sigma,mpjpe_mm,accel_mm_s2\n";
  for (const AblateCell& c : cells) {
    csv << c.variant << ',' << fmt_g(c.sigma) << ',' << fmt_g(c.mpjpe_mm)
        << ',' << fmt_g(c.accel_mm_s2) << '\n';
  }
  return cells;
}

}  // namespace rtpca
