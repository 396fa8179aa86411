#pragma once

// Central finite-difference gradient checking, run at 64-bit. The harness
// perturbs every element of every checked input, so it stays independent of
// the adjoint rules it validates. The standard suite covers each
// differentiable op, the composed attention/pyramid/cross-layer paths, the
// losses, and the end-to-end micro model.

#include <cmath>
#include <cstdint>
#include <functional>
#include <iomanip>
#include <ostream>
#include <string>
#include <vector>

#include "rtpca/losses.hpp"
#include "rtpca/model.hpp"
#include "rtpca/random.hpp"
#include "rtpca/tensor.hpp"

namespace rtpca {

struct GradCheckOptions {
  double h = 1e-5;
  double tol_ops = 1e-4;
  double tol_e2e = 1e-3;
  uint64_t seed = 20240901;
  // Name of a suite entry whose analytic gradient is deliberately corrupted
  // before comparison; a negative control for the harness itself.
  std::string inject_fault;
};

struct GradCheckResult {
  std::string op;
  double max_rel_err = 0.0;
  double tol = 0.0;
  bool pass = false;
};

// Max elementwise relative error between analytic gradients of `loss_fn`
// w.r.t. `inputs` and central finite differences with step h.
inline double fd_max_rel_error(std::vector<Tensor<double>> inputs,
                               const std::function<Tensor<double>()>& loss_fn,
                               double h, bool corrupt = false) {
  for (auto& t : inputs) {
    t.set_requires_grad(true);
    t.zero_grad();
  }
  Tensor<double> loss = loss_fn();
  backward(loss);
  std::vector<std::vector<double>> analytic;
  analytic.reserve(inputs.size());
  for (auto& t : inputs) analytic.push_back(t.grad());
  if (corrupt && !analytic.empty() && !analytic[0].empty()) {
    analytic[0][0] += 0.5;
  }

  double worst = 0.0;
  for (size_t i = 0; i < inputs.size(); ++i) {
    auto& data = inputs[i].mutable_values();
    for (size_t k = 0; k < data.size(); ++k) {
      const double saved = data[k];
      data[k] = saved + h;
      const double up = loss_fn().item();
      data[k] = saved - h;
      const double down = loss_fn().item();
      data[k] = saved;
      const double fd = (up - down) / (2.0 * h);
      const double a = analytic[i][k];
      const double rel =
          std::abs(a - fd) / std::max({1.0, std::abs(a), std::abs(fd)});
      worst = std::max(worst, rel);
    }
  }
  return worst;
}

namespace detail {

struct GradCheckCase {
  std::string name;
  bool end_to_end = false;
  std::function<double(Rng&, double, bool)> run;  // returns max rel err
};

template <class Builder>
GradCheckCase make_case(std::string name, Builder builder,
                        bool end_to_end = false) {
  return {std::move(name), end_to_end,
          [builder](Rng& rng, double h, bool corrupt) {
            auto [inputs, fn] = builder(rng);
            return fd_max_rel_error(std::move(inputs), fn, h, corrupt);
          }};
}

inline Tensor<double> rnd(Shape shape, Rng& rng, double lo = -2.0,
                          double hi = 2.0) {
  return rand_uniform<double>(std::move(shape), lo, hi, rng);
}

// weighted sum against a fixed random projection, to reduce any op output
// to a scalar loss
inline Tensor<double> project(const Tensor<double>& x,
                              const Tensor<double>& proj) {
  return sum_all(mul(x, proj));
}

using CaseIO = std::pair<std::vector<Tensor<double>>,
                         std::function<Tensor<double>()>>;

inline std::vector<Tensor<double>> tpca_state_tensors(
    TpcaState<double>& st) {
  std::vector<Tensor<double>> out;
  for (auto* stage_list : {&st.down, &st.up}) {
    for (auto& stage : *stage_list) {
      if (stage.kernel.valid()) out.push_back(stage.kernel);
      if (stage.bias.valid()) out.push_back(stage.bias);
      out.push_back(stage.ln_gamma);
      out.push_back(stage.ln_beta);
    }
  }
  return out;
}

inline std::vector<GradCheckCase> standard_suite() {
  std::vector<GradCheckCase> cases;

  cases.push_back(make_case("add_broadcast", [](Rng& rng) -> CaseIO {
    auto a = rnd({3, 4}, rng);
    auto b = rnd({4}, rng);
    auto proj = rnd({3, 4}, rng);
    return {{a, b}, [=] { return project(add(a, b), proj); }};
  }));

  cases.push_back(make_case("sub", [](Rng& rng) -> CaseIO {
    auto a = rnd({2, 3, 2}, rng);
    auto b = rnd({3, 1}, rng);
    auto proj = rnd({2, 3, 2}, rng);
    return {{a, b}, [=] { return project(sub(a, b), proj); }};
  }));

  cases.push_back(make_case("mul_broadcast", [](Rng& rng) -> CaseIO {
    auto a = rnd({2, 3, 4}, rng);
    auto b = rnd({1, 3, 1}, rng);
    auto proj = rnd({2, 3, 4}, rng);
    return {{a, b}, [=] { return project(mul(a, b), proj); }};
  }));

  cases.push_back(make_case("scale_add_scalar", [](Rng& rng) -> CaseIO {
    auto a = rnd({5}, rng);
    auto proj = rnd({5}, rng);
    return {{a}, [=] { return project(add_scalar(scale(a, 1.7), -0.3), proj); }};
  }));

  cases.push_back(make_case("sqrt", [](Rng& rng) -> CaseIO {
    auto a = rnd({6}, rng, 0.5, 2.5);
    auto proj = rnd({6}, rng);
    return {{a}, [=] { return project(sqrt(a), proj); }};
  }));

  cases.push_back(make_case("matmul", [](Rng& rng) -> CaseIO {
    auto a = rnd({3, 4}, rng);
    auto b = rnd({4, 2}, rng);
    auto proj = rnd({3, 2}, rng);
    return {{a, b}, [=] { return project(matmul(a, b), proj); }};
  }));

  cases.push_back(make_case("matmul_batched", [](Rng& rng) -> CaseIO {
    auto a = rnd({2, 3, 2, 4}, rng);
    auto b = rnd({3, 4, 3}, rng);  // broadcast over the leading dim of a
    auto proj = rnd({2, 3, 2, 3}, rng);
    return {{a, b}, [=] { return project(matmul(a, b), proj); }};
  }));

  cases.push_back(make_case("reshape_transpose", [](Rng& rng) -> CaseIO {
    auto a = rnd({2, 3, 4}, rng);
    auto proj = rnd({4, 6}, rng);
    return {{a}, [=] {
              return project(
                  reshape(transpose(a, {2, 0, 1}), {4, 6}), proj);
            }};
  }));

  cases.push_back(make_case("concat_slice", [](Rng& rng) -> CaseIO {
    auto a = rnd({3, 2}, rng);
    auto b = rnd({2, 2}, rng);
    auto proj = rnd({4, 2}, rng);
    return {{a, b}, [=] {
              return project(slice(concat<double>({a, b}, 0), 0, 1, 4), proj);
            }};
  }));

  cases.push_back(make_case("repeat_rows", [](Rng& rng) -> CaseIO {
    auto a = rnd({2, 3, 2}, rng);
    auto proj = rnd({2, 9, 2}, rng);
    return {{a}, [=] { return project(repeat_rows(a, 3), proj); }};
  }));

  cases.push_back(make_case("sum_axis_mean", [](Rng& rng) -> CaseIO {
    auto a = rnd({2, 3, 4}, rng);
    auto proj = rnd({2, 4}, rng);
    return {{a}, [=] {
              return add(project(sum_axis(a, 1), proj), mean_all(a));
            }};
  }));

  cases.push_back(make_case("softmax_last", [](Rng& rng) -> CaseIO {
    auto a = rnd({3, 5}, rng);
    auto proj = rnd({3, 5}, rng);
    return {{a}, [=] { return project(softmax(a, -1), proj); }};
  }));

  cases.push_back(make_case("softmax_axis0", [](Rng& rng) -> CaseIO {
    auto a = rnd({4, 3}, rng);
    auto proj = rnd({4, 3}, rng);
    return {{a}, [=] { return project(softmax(a, 0), proj); }};
  }));

  cases.push_back(make_case("layer_norm", [](Rng& rng) -> CaseIO {
    auto x = rnd({4, 6}, rng);
    auto gamma = rnd({6}, rng, 0.5, 1.5);
    auto beta = rnd({6}, rng, -0.5, 0.5);
    auto proj = rnd({4, 6}, rng);
    return {{x, gamma, beta},
            [=] { return project(layer_norm(x, gamma, beta), proj); }};
  }));

  cases.push_back(make_case("gelu", [](Rng& rng) -> CaseIO {
    auto a = rnd({7}, rng);
    auto proj = rnd({7}, rng);
    return {{a}, [=] { return project(gelu(a), proj); }};
  }));

  cases.push_back(make_case("dropout", [](Rng& rng) -> CaseIO {
    auto a = rnd({4, 5}, rng);
    auto proj = rnd({4, 5}, rng);
    const uint64_t mask_seed = rng.next_u64();
    return {{a}, [=] {
              Rng mask_rng(mask_seed);
              return project(dropout(a, 0.3, DropoutMode::train, mask_rng),
                             proj);
            }};
  }));

  cases.push_back(make_case("adaptive_avg_pool", [](Rng& rng) -> CaseIO {
    auto a = rnd({2, 8, 3}, rng);
    auto proj = rnd({2, 4, 3}, rng);
    return {{a}, [=] { return project(adaptive_avg_pool_seq(a, 4), proj); }};
  }));

  cases.push_back(make_case("adaptive_avg_pool_ragged", [](Rng& rng) -> CaseIO {
    auto a = rnd({7, 3}, rng);
    auto proj = rnd({3, 3}, rng);
    return {{a}, [=] { return project(adaptive_avg_pool_seq(a, 3), proj); }};
  }));

  cases.push_back(make_case("strided_conv", [](Rng& rng) -> CaseIO {
    auto x = rnd({2, 7, 3}, rng);
    auto k = rnd({2, 3, 2}, rng);
    auto b = rnd({2}, rng);
    auto proj = rnd({2, 3, 2}, rng);
    return {{x, k, b},
            [=] { return project(strided_conv_seq(x, k, b, 2), proj); }};
  }));

  cases.push_back(make_case("transposed_conv", [](Rng& rng) -> CaseIO {
    auto x = rnd({2, 3, 2}, rng);
    auto k = rnd({2, 2, 3}, rng);
    auto b = rnd({3}, rng);
    auto proj = rnd({2, 6, 3}, rng);
    return {{x, k, b},
            [=] { return project(transposed_conv_seq(x, k, b, 2), proj); }};
  }));

  cases.push_back(make_case("scaled_dot_product", [](Rng& rng) -> CaseIO {
    auto q = rnd({3, 4}, rng);
    auto k = rnd({5, 4}, rng);
    auto v = rnd({5, 4}, rng);
    auto proj = rnd({3, 4}, rng);
    return {{q, k, v},
            [=] { return project(scaled_dot_product(q, k, v).out, proj); }};
  }));

  cases.push_back(make_case("multi_head_attention", [](Rng& rng) -> CaseIO {
    auto params = AttentionParams<double>::init(8, 2, rng);
    auto src = rnd({2, 4, 8}, rng, -1.0, 1.0);
    auto proj = rnd({2, 4, 8}, rng);
    std::vector<Tensor<double>> inputs{src,        params.w_q, params.b_q,
                                       params.w_k, params.b_k, params.w_v,
                                       params.b_v, params.w_o, params.b_o};
    return {inputs, [=] {
              return project(multi_head_attention(params, src, src, src).out,
                             proj);
            }};
  }));

  cases.push_back(make_case("tpca_pool_transconv", [](Rng& rng) -> CaseIO {
    TpcaConfig cfg;
    cfg.stages = 2;
    cfg.ratio = 2;
    cfg.compression = Compression::pool;
    cfg.amplification = Amplification::trans_conv;
    auto state = TpcaState<double>::init(cfg, 3, rng);
    auto z = rnd({9, 3}, rng, -1.0, 1.0);  // exercises the pad-to-target path
    auto proj = rnd({9, 3}, rng);
    auto inputs = tpca_state_tensors(state);
    inputs.push_back(z);
    return {inputs, [=] { return project(tpca_transform(state, z), proj); }};
  }));

  cases.push_back(make_case("tpca_conv_linear", [](Rng& rng) -> CaseIO {
    TpcaConfig cfg;
    cfg.stages = 2;
    cfg.ratio = 2;
    cfg.compression = Compression::conv;
    cfg.amplification = Amplification::linear;
    auto state = TpcaState<double>::init(cfg, 3, rng);
    auto z = rnd({8, 3}, rng, -1.0, 1.0);
    auto proj = rnd({8, 3}, rng);
    auto inputs = tpca_state_tensors(state);
    inputs.push_back(z);
    return {inputs, [=] { return project(tpca_transform(state, z), proj); }};
  }));

  cases.push_back(make_case("tpca_attention", [](Rng& rng) -> CaseIO {
    TpcaConfig cfg;
    cfg.stages = 1;
    cfg.ratio = 2;
    auto params = AttentionParams<double>::init(4, 2, rng);
    auto kst = TpcaState<double>::init(cfg, 4, rng);
    auto vst = TpcaState<double>::init(cfg, 4, rng);
    auto z = rnd({4, 4}, rng, -1.0, 1.0);
    auto proj = rnd({4, 4}, rng);
    std::vector<Tensor<double>> inputs{z, params.w_q, params.w_k, params.w_v,
                                       params.w_o};
    for (auto& t : tpca_state_tensors(kst)) inputs.push_back(t);
    for (auto& t : tpca_state_tensors(vst)) inputs.push_back(t);
    return {inputs, [=] {
              return project(tpca_attention(params, kst, vst, z).out, proj);
            }};
  }));

  cases.push_back(make_case("xlr_attention_carry", [](Rng& rng) -> CaseIO {
    TpcaConfig tcfg;
    tcfg.stages = 1;
    tcfg.ratio = 2;
    XlrConfig xcfg;
    xcfg.prev_pool_target = 2;
    auto params = AttentionParams<double>::init(4, 2, rng);
    auto kst = TpcaState<double>::init(tcfg, 4, rng);
    auto vst = TpcaState<double>::init(tcfg, 4, rng);
    auto z = rnd({4, 4}, rng, -1.0, 1.0);
    auto k_prev = rnd({4, 4}, rng, -1.0, 1.0);
    auto v_prev = rnd({4, 4}, rng, -1.0, 1.0);
    auto proj = rnd({4, 4}, rng);
    std::vector<Tensor<double>> inputs{z, k_prev, v_prev, params.w_q,
                                       params.w_k};
    for (auto& t : tpca_state_tensors(kst)) inputs.push_back(t);
    return {inputs, [=] {
              std::optional<CrossLayerCarry<double>> carry =
                  CrossLayerCarry<double>{k_prev, v_prev};
              return project(
                  xlr_attention(params, xcfg, z, carry, kst, vst).out, proj);
            }};
  }));

  cases.push_back(make_case("wmpjpe", [](Rng& rng) -> CaseIO {
    auto p = rnd({2, 3, 4, 3}, rng);
    auto g = rnd({2, 3, 4, 3}, rng);
    JointWeights jw{{1.0, 2.5, 4.0}};
    return {{p}, [=] { return wmpjpe_loss(p, g, jw); }};
  }));

  cases.push_back(make_case("mpjve", [](Rng& rng) -> CaseIO {
    auto p = rnd({2, 3, 4, 3}, rng);
    auto g = rnd({2, 3, 4, 3}, rng);
    return {{p}, [=] { return mpjve_loss(p, g); }};
  }));

  cases.push_back(make_case("tc_loss", [](Rng& rng) -> CaseIO {
    auto p = rnd({2, 3, 5, 3}, rng);
    auto g = rnd({2, 3, 5, 3}, rng);
    return {{p}, [=] { return tc_loss(p, g); }};
  }));

  cases.push_back(make_case("total_loss", [](Rng& rng) -> CaseIO {
    auto p = rnd({1, 3, 4, 3}, rng);
    auto g = rnd({1, 3, 4, 3}, rng);
    JointWeights jw{{1.5, 1.0, 4.0}};
    LossWeights lw{0.7, 0.3};
    return {{p}, [=] { return total_loss(p, g, jw, lw).total; }};
  }));

  cases.push_back(make_case(
      "model_end_to_end",
      [](Rng& rng) -> CaseIO {
        ModelConfig cfg;
        cfg.frames = 9;
        cfg.joints = 3;
        cfg.channels = 8;
        cfg.blocks = 2;
        cfg.heads = 2;
        cfg.mlp_ratio = 2;
        cfg.dropout = 0.0;
        auto model = std::make_shared<RtpcaModel<double>>(cfg, rng);
        auto x2d = rnd({1, 3, 9, 2}, rng);
        auto y3d = rnd({1, 3, 9, 3}, rng);
        JointWeights jw = JointWeights::uniform(3);
        LossWeights lw;
        std::vector<Tensor<double>> inputs;
        for (auto& [name, t] : model->params().items()) inputs.push_back(t);
        return {inputs, [=] {
                  Tensor<double> pred =
                      model->forward(x2d, DropoutMode::eval, nullptr);
                  return total_loss(pred, y3d, jw, lw).total;
                }};
      },
      /*end_to_end=*/true));

  return cases;
}

}  // namespace detail

// Runs the whole suite; prints one line per op with its worst relative
// error. Returns per-op results (pass == within tolerance).
inline std::vector<GradCheckResult> run_gradcheck(const GradCheckOptions& opt,
                                                  std::ostream& log) {
  std::vector<GradCheckResult> results;
  for (auto& c : detail::standard_suite()) {
    Rng rng(Rng::derive(opt.seed, std::hash<std::string>{}(c.name)));
    GradCheckResult r;
    r.op = c.name;
    r.tol = c.end_to_end ? opt.tol_e2e : opt.tol_ops;
    r.max_rel_err = c.run(rng, opt.h, c.name == opt.inject_fault);
    r.pass = r.max_rel_err <= r.tol;
    log << (r.pass ? "PASS" : "FAIL") << "  " << std::left << std::setw(28)
        << r.op << " max rel err " << std::scientific << std::setprecision(3)
        << r.max_rel_err << "  (tol " << r.tol << ")\n"
        << std::defaultfloat;
    results.push_back(std::move(r));
  }
  return results;
}

}  // namespace rtpca
