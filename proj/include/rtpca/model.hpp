#pragma once

// The full pose-lifting network: input embedding, learnable spatial and
// temporal positional encodings, a stack of Spatial-Temporal Encoders (each
// a spatial transformer block followed by a temporal transformer block with
// pyramid-refined keys/values and cross-layer refinement), and a per-token
// linear regression head to 3D.

#include <cstdint>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "rtpca/attention.hpp"
#include "rtpca/random.hpp"
#include "rtpca/tensor.hpp"
#include "rtpca/tpca.hpp"
#include "rtpca/xlr.hpp"

namespace rtpca {

struct ModelConfig {
  int64_t frames = 27;   // F
  int64_t joints = 17;   // J
  int64_t channels = 64; // C
  int64_t blocks = 2;    // L, number of STEs
  int64_t heads = 4;
  int64_t mlp_ratio = 4;
  double dropout = 0.1;
  TpcaConfig tpca;
  XlrConfig xlr;

  void validate() const {
    if (frames < 1 || joints < 1 || blocks < 1) {
      throw ConfigError("model: frames, joints and blocks must be >= 1");
    }
    if (channels < 1 || heads < 1 || channels % heads != 0) {
      throw ConfigError("model: channels " + std::to_string(channels) +
                        " not divisible by heads " + std::to_string(heads));
    }
    if (mlp_ratio < 1) throw ConfigError("model: mlp_ratio must be >= 1");
    if (dropout < 0.0 || dropout >= 1.0) {
      throw ConfigError("model: dropout must be in [0, 1)");
    }
  }
};

// One sample batch: normalized 2D inputs and (optionally) millimetre,
// root-relative 3D targets.
template <class S>
struct PoseBatch {
  Tensor<S> x2d;  // [B, J, F, 2]
  std::optional<Tensor<S>> y3d;  // [B, J, F, 3]
};

// Ordered, named registry of the learnable tensors; the order fixes the
// checkpoint layout and the optimizer state layout.
template <class S>
class ParamStore {
 public:
  Tensor<S>& add(std::string name, Tensor<S> t) {
    t.set_requires_grad(true);
    items_.emplace_back(std::move(name), std::move(t));
    return items_.back().second;
  }

  const std::vector<std::pair<std::string, Tensor<S>>>& items() const {
    return items_;
  }
  std::vector<std::pair<std::string, Tensor<S>>>& items() { return items_; }

  const Tensor<S>& find(const std::string& name) const {
    for (const auto& [n, t] : items_) {
      if (n == name) return t;
    }
    throw UsageError("params: no tensor named '" + name + "'");
  }

  int64_t total_size() const {
    int64_t n = 0;
    for (const auto& [name, t] : items_) n += t.numel();
    return n;
  }

  void zero_grad() {
    for (auto& [name, t] : items_) t.zero_grad();
  }

 private:
  std::vector<std::pair<std::string, Tensor<S>>> items_;
};

template <class S>
struct BlockParams {
  Tensor<S> ln1_gamma, ln1_beta;
  AttentionParams<S> attn;
  Tensor<S> ln2_gamma, ln2_beta;
  Tensor<S> fc1_w, fc1_b;  // [C, C*mlp_ratio]
  Tensor<S> fc2_w, fc2_b;  // [C*mlp_ratio, C]
};

template <class S>
struct SteParams {
  BlockParams<S> st;
  BlockParams<S> tt;
  TpcaState<S> tpca_k;
  TpcaState<S> tpca_v;
};

// Attention weights of the final temporal block, captured for export.
template <class S>
struct ForwardTrace {
  Tensor<S> last_tt_weights;  // detached, [B*J, h, F, n_kv]
};

template <class S>
class RtpcaModel {
 public:
  RtpcaModel(const ModelConfig& cfg, Rng& rng) : cfg_(cfg) {
    cfg_.validate();
    const int64_t C = cfg_.channels;
    const int64_t hidden = C * cfg_.mlp_ratio;

    embed_w_ = params_.add("embed.w", uniform_init({2, C}, 2, rng));
    embed_b_ = params_.add("embed.b", Tensor<S>::zeros({C}));
    e_s_ = params_.add("pos.spatial",
                       rand_normal<S>({cfg_.joints, C}, 0.0, 0.02, rng));
    e_t_ = params_.add("pos.temporal",
                       rand_normal<S>({cfg_.frames, C}, 0.0, 0.02, rng));

    for (int64_t i = 0; i < cfg_.blocks; ++i) {
      SteParams<S> ste;
      const std::string base = "ste" + std::to_string(i);
      ste.st = make_block(base + ".st", C, hidden, rng);
      ste.tt = make_block(base + ".tt", C, hidden, rng);
      ste.tpca_k = make_tpca(base + ".tpca_k", rng);
      ste.tpca_v = make_tpca(base + ".tpca_v", rng);
      stes_.push_back(std::move(ste));
    }

    head_w_ = params_.add("head.w", uniform_init({C, 3}, C, rng));
    head_b_ = params_.add("head.b", Tensor<S>::zeros({3}));
  }

  const ModelConfig& config() const { return cfg_; }
  ParamStore<S>& params() { return params_; }
  const ParamStore<S>& params() const { return params_; }
  int64_t parameter_count() const { return params_.total_size(); }

  // x2d [B, J, F, 2] -> [B, J, F, 3]
  Tensor<S> forward(const Tensor<S>& x2d, DropoutMode mode, Rng* rng,
                    ForwardTrace<S>* trace = nullptr) const {
    if (x2d.ndim() != 4 || x2d.dim(1) != cfg_.joints ||
        x2d.dim(2) != cfg_.frames || x2d.dim(3) != 2) {
      throw ConfigError("forward: input " + shape_str(x2d.shape()) +
                        " does not match configured [B, " +
                        std::to_string(cfg_.joints) + ", " +
                        std::to_string(cfg_.frames) + ", 2]");
    }
    if (mode == DropoutMode::train && cfg_.dropout > 0.0 && rng == nullptr) {
      throw UsageError("forward: train mode with dropout needs an rng");
    }
    const int64_t B = x2d.dim(0);
    const int64_t J = cfg_.joints;
    const int64_t F = cfg_.frames;
    const int64_t C = cfg_.channels;

    Tensor<S> z = reshape(
        linear(reshape(x2d, {B * J * F, 2}), embed_w_, embed_b_),
        {B, J, F, C});

    std::optional<CrossLayerCarry<S>> carry;
    for (size_t i = 0; i < stes_.size(); ++i) {
      const SteParams<S>& ste = stes_[i];
      const bool first = i == 0;
      const bool last = i + 1 == stes_.size();

      // joints within one frame as tokens
      Tensor<S> zs = reshape(transpose(z, {0, 2, 1, 3}), {B * F, J, C});
      if (first) zs = add(zs, e_s_);
      zs = st_block(ste.st, zs, mode, rng);
      z = transpose(reshape(zs, {B, F, J, C}), {0, 2, 1, 3});

      // frames of one joint trajectory as tokens
      Tensor<S> zt = reshape(z, {B * J, F, C});
      if (first) zt = add(zt, e_t_);
      auto [zt_out, carry_next] =
          tt_block(ste.tt, ste.tpca_k, ste.tpca_v, zt, carry, mode, rng,
                   last ? trace : nullptr);
      if (cfg_.xlr.enabled) {
        carry = std::move(carry_next);
      }
      z = reshape(zt_out, {B, J, F, C});
    }

    return reshape(linear(reshape(z, {B * J * F, C}), head_w_, head_b_),
                   {B, J, F, 3});
  }

  // Pre-LN transformer block over joint tokens: residual multi-head
  // self-attention, then a residual MLP.
  Tensor<S> st_block(const BlockParams<S>& p, const Tensor<S>& x,
                     DropoutMode mode, Rng* rng) const {
    Tensor<S> normed = layer_norm(x, p.ln1_gamma, p.ln1_beta);
    Tensor<S> attn_out =
        multi_head_attention(p.attn, normed, normed, normed).out;
    Tensor<S> h = add(x, drop(attn_out, mode, rng));
    return add(h, drop(mlp(p, layer_norm(h, p.ln2_gamma, p.ln2_beta), mode, rng),
                       mode, rng));
  }

  // Temporal block: residual around cross-layer-refined pyramid attention,
  // then a residual MLP. Emits the refined K/V carry for the next block.
  std::pair<Tensor<S>, CrossLayerCarry<S>> tt_block(
      const BlockParams<S>& p, const TpcaState<S>& tpca_k,
      const TpcaState<S>& tpca_v, const Tensor<S>& x,
      const std::optional<CrossLayerCarry<S>>& carry, DropoutMode mode,
      Rng* rng, ForwardTrace<S>* trace = nullptr) const {
    Tensor<S> normed = layer_norm(x, p.ln1_gamma, p.ln1_beta);
    XlrOut<S> xo =
        xlr_attention(p.attn, cfg_.xlr, normed, carry, tpca_k, tpca_v);
    if (trace) trace->last_tt_weights = xo.weights.detach();
    Tensor<S> h = add(x, drop(xo.out, mode, rng));
    Tensor<S> out =
        add(h, drop(mlp(p, layer_norm(h, p.ln2_gamma, p.ln2_beta), mode, rng),
                    mode, rng));
    return {out, std::move(xo.carry_next)};
  }

 private:
  Tensor<S> drop(const Tensor<S>& x, DropoutMode mode, Rng* rng) const {
    if (mode == DropoutMode::eval || cfg_.dropout == 0.0) return x;
    return dropout(x, cfg_.dropout, mode, *rng);
  }

  Tensor<S> mlp(const BlockParams<S>& p, const Tensor<S>& x, DropoutMode mode,
                Rng* rng) const {
    return linear(drop(gelu(linear(x, p.fc1_w, p.fc1_b)), mode, rng), p.fc2_w,
                  p.fc2_b);
  }

  static Tensor<S> uniform_init(Shape shape, int64_t fan_in, Rng& rng) {
    const double bound = 1.0 / std::sqrt(static_cast<double>(fan_in));
    return rand_uniform<S>(std::move(shape), -bound, bound, rng);
  }

  BlockParams<S> make_block(const std::string& base, int64_t C, int64_t hidden,
                            Rng& rng) {
    BlockParams<S> b;
    b.ln1_gamma = params_.add(base + ".ln1.gamma", Tensor<S>::full({C}, S(1)));
    b.ln1_beta = params_.add(base + ".ln1.beta", Tensor<S>::zeros({C}));
    b.attn.channels = C;
    b.attn.heads = cfg_.heads;
    b.attn.w_q = params_.add(base + ".attn.wq", uniform_init({C, C}, C, rng));
    b.attn.b_q = params_.add(base + ".attn.bq", Tensor<S>::zeros({C}));
    b.attn.w_k = params_.add(base + ".attn.wk", uniform_init({C, C}, C, rng));
    b.attn.b_k = params_.add(base + ".attn.bk", Tensor<S>::zeros({C}));
    b.attn.w_v = params_.add(base + ".attn.wv", uniform_init({C, C}, C, rng));
    b.attn.b_v = params_.add(base + ".attn.bv", Tensor<S>::zeros({C}));
    b.attn.w_o = params_.add(base + ".attn.wo", uniform_init({C, C}, C, rng));
    b.attn.b_o = params_.add(base + ".attn.bo", Tensor<S>::zeros({C}));
    b.ln2_gamma = params_.add(base + ".ln2.gamma", Tensor<S>::full({C}, S(1)));
    b.ln2_beta = params_.add(base + ".ln2.beta", Tensor<S>::zeros({C}));
    b.fc1_w = params_.add(base + ".mlp.fc1.w", uniform_init({C, hidden}, C, rng));
    b.fc1_b = params_.add(base + ".mlp.fc1.b", Tensor<S>::zeros({hidden}));
    b.fc2_w =
        params_.add(base + ".mlp.fc2.w", uniform_init({hidden, C}, hidden, rng));
    b.fc2_b = params_.add(base + ".mlp.fc2.b", Tensor<S>::zeros({C}));
    return b;
  }

  TpcaState<S> make_tpca(const std::string& base, Rng& rng) {
    TpcaState<S> st = TpcaState<S>::init(cfg_.tpca, cfg_.channels, rng);
    for (size_t l = 0; l < st.down.size(); ++l) {
      auto& d = st.down[l];
      const std::string sb = base + ".down" + std::to_string(l);
      if (d.kernel.valid()) {
        d.kernel = params_.add(sb + ".kernel", d.kernel.detach());
        d.bias = params_.add(sb + ".bias", d.bias.detach());
      }
      d.ln_gamma = params_.add(sb + ".ln.gamma", d.ln_gamma.detach());
      d.ln_beta = params_.add(sb + ".ln.beta", d.ln_beta.detach());
    }
    for (size_t l = 0; l < st.up.size(); ++l) {
      auto& u = st.up[l];
      const std::string sb = base + ".up" + std::to_string(l);
      u.kernel = params_.add(sb + ".kernel", u.kernel.detach());
      u.bias = params_.add(sb + ".bias", u.bias.detach());
      u.ln_gamma = params_.add(sb + ".ln.gamma", u.ln_gamma.detach());
      u.ln_beta = params_.add(sb + ".ln.beta", u.ln_beta.detach());
    }
    return st;
  }

  ModelConfig cfg_;
  ParamStore<S> params_;
  Tensor<S> embed_w_, embed_b_;
  Tensor<S> e_s_, e_t_;
  std::vector<SteParams<S>> stes_;
  Tensor<S> head_w_, head_b_;
};

}  // namespace rtpca
