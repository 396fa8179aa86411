#pragma once

// Temporal Pyramidal Compression-and-Amplification. Attention keys and
// values are compressed through m stages (sequence length shrinking by the
// ratio r each stage), then amplified back with residual links to the
// matching compression stage. Queries are never touched, so the attention
// output keeps the input temporal resolution.

#include <cstdint>
#include <string>
#include <vector>

#include "rtpca/attention.hpp"
#include "rtpca/random.hpp"
#include "rtpca/tensor.hpp"

namespace rtpca {

enum class Compression { pool, conv };
enum class Amplification { linear, trans_conv };

struct TpcaConfig {
  int64_t stages = 2;  // m
  int64_t ratio = 2;   // r, per-stage sequence reduction factor
  Compression compression = Compression::pool;
  Amplification amplification = Amplification::trans_conv;
};

inline const char* to_string(Compression c) {
  return c == Compression::pool ? "pool" : "conv";
}
inline const char* to_string(Amplification a) {
  return a == Amplification::linear ? "linear" : "trans_conv";
}

template <class S>
struct TpcaStageParams {
  // conv / trans_conv stages carry a [k, d, d'] kernel with k = ratio;
  // linear amplification carries a [d, d] position-wise map. Pooling
  // compression carries no kernel. Every stage has its own LayerNorm affine.
  Tensor<S> kernel;
  Tensor<S> bias;
  Tensor<S> ln_gamma;
  Tensor<S> ln_beta;
};

template <class S>
struct TpcaState {
  TpcaConfig cfg;
  int64_t dim = 0;
  std::vector<TpcaStageParams<S>> down;  // exactly m compression stages
  std::vector<TpcaStageParams<S>> up;    // exactly m amplification stages

  static TpcaState init(const TpcaConfig& cfg, int64_t dim, Rng& rng) {
    if (cfg.stages < 0) throw ConfigError("tpca: stages must be >= 0");
    if (cfg.ratio < 2) throw ConfigError("tpca: ratio must be >= 2");
    TpcaState st;
    st.cfg = cfg;
    st.dim = dim;
    const int64_t r = cfg.ratio;
    const double conv_bound = 1.0 / std::sqrt(static_cast<double>(r * dim));
    const double lin_bound = 1.0 / std::sqrt(static_cast<double>(dim));
    for (int64_t l = 0; l < cfg.stages; ++l) {
      TpcaStageParams<S> dn;
      if (cfg.compression == Compression::conv) {
        dn.kernel = rand_uniform<S>({r, dim, dim}, -conv_bound, conv_bound, rng);
        dn.bias = Tensor<S>::zeros({dim});
      }
      dn.ln_gamma = Tensor<S>::full({dim}, S(1));
      dn.ln_beta = Tensor<S>::zeros({dim});
      st.down.push_back(std::move(dn));
    }
    for (int64_t l = 0; l < cfg.stages; ++l) {
      TpcaStageParams<S> up;
      if (cfg.amplification == Amplification::trans_conv) {
        up.kernel = rand_uniform<S>({r, dim, dim}, -conv_bound, conv_bound, rng);
      } else {
        up.kernel = rand_uniform<S>({dim, dim}, -lin_bound, lin_bound, rng);
      }
      up.bias = Tensor<S>::zeros({dim});
      up.ln_gamma = Tensor<S>::full({dim}, S(1));
      up.ln_beta = Tensor<S>::zeros({dim});
      st.up.push_back(std::move(up));
    }
    return st;
  }
};

struct TpcaTrace {
  int compressions = 0;
  int amplifications = 0;
};

namespace detail {

// Per-stage target lengths: len[l] = round(n / r^l), half rounding up.
inline std::vector<int64_t> tpca_stage_lengths(int64_t n, int64_t r,
                                               int64_t m) {
  std::vector<int64_t> len(static_cast<size_t>(m) + 1);
  int64_t pow = 1;
  for (int64_t l = 0; l <= m; ++l) {
    len[static_cast<size_t>(l)] = (2 * n + pow) / (2 * pow);
    pow *= r;
  }
  return len;
}

// Fits the row count of [..., n, d] to `target`: crops extra rows, pads by
// repeating the last row when a rounded-up pyramid level is longer than the
// amplified sequence.
template <class S>
Tensor<S> fit_rows(const Tensor<S>& x, int64_t target) {
  const int64_t n = x.dim(-2);
  if (n == target) return x;
  if (n > target) return slice(x, -2, 0, target);
  Tensor<S> last = slice(x, -2, n - 1, 1);
  std::vector<Tensor<S>> parts{x};
  for (int64_t i = n; i < target; ++i) parts.push_back(last);
  return concat(parts, -2);
}

}  // namespace detail

// The pyramid transform: z_down chain of m compressions (each
// activation(LN(F_down(.)))), then m amplifications seeded from the coarsest
// level, each activation(LN(F_up(.))) plus the residual of the matching
// compression stage. Output shape equals input shape [..., n, d].
template <class S>
Tensor<S> tpca_transform(const TpcaState<S>& state, const Tensor<S>& z,
                         TpcaTrace* trace = nullptr) {
  const TpcaConfig& cfg = state.cfg;
  const int64_t m = cfg.stages;
  if (m == 0) return z;
  const int64_t n = z.dim(-2);
  const int64_t r = cfg.ratio;

  int64_t coarsest = 1;
  for (int64_t l = 0; l < m; ++l) coarsest *= r;
  if (n < coarsest) {
    throw ConfigError("tpca: sequence length " + std::to_string(n) +
                      " shorter than r^m = " + std::to_string(coarsest) +
                      " (r = " + std::to_string(r) +
                      ", m = " + std::to_string(m) + ")");
  }
  if (cfg.compression == Compression::conv && n % coarsest != 0) {
    throw ConfigError("tpca: conv compression needs n divisible by r^m, got n = " +
                      std::to_string(n) + ", r = " + std::to_string(r) +
                      ", m = " + std::to_string(m));
  }

  const std::vector<int64_t> len = detail::tpca_stage_lengths(n, r, m);

  std::vector<Tensor<S>> down(static_cast<size_t>(m) + 1);
  down[0] = z;
  for (int64_t l = 0; l < m; ++l) {
    const auto& p = state.down[static_cast<size_t>(l)];
    Tensor<S> compressed;
    if (cfg.compression == Compression::pool) {
      compressed =
          adaptive_avg_pool_seq(down[static_cast<size_t>(l)], len[static_cast<size_t>(l + 1)]);
    } else {
      compressed =
          strided_conv_seq(down[static_cast<size_t>(l)], p.kernel, p.bias, r);
    }
    down[static_cast<size_t>(l + 1)] =
        gelu(layer_norm(compressed, p.ln_gamma, p.ln_beta));
    if (trace) ++trace->compressions;
  }

  Tensor<S> up = down[static_cast<size_t>(m)];
  for (int64_t l = 0; l < m; ++l) {
    const auto& p = state.up[static_cast<size_t>(l)];
    const int64_t target = len[static_cast<size_t>(m - 1 - l)];
    Tensor<S> amplified;
    if (cfg.amplification == Amplification::trans_conv) {
      amplified = transposed_conv_seq(up, p.kernel, p.bias, r);
    } else {
      amplified = linear(repeat_rows(up, r), p.kernel, p.bias);
    }
    amplified = detail::fit_rows(amplified, target);
    up = add(gelu(layer_norm(amplified, p.ln_gamma, p.ln_beta)),
             down[static_cast<size_t>(m - 1 - l)]);
    if (trace) ++trace->amplifications;
  }
  return up;
}

template <class S>
struct TpcaAttentionOut {
  Tensor<S> out;
  Tensor<S> k_refined;  // [..., n, C], consumed by the next block's XLR
  Tensor<S> v_refined;
  Tensor<S> weights;
};

// Attention where the key and value projections pass through independent
// pyramid transforms while the query projection is left untouched.
template <class S>
TpcaAttentionOut<S> tpca_attention(const AttentionParams<S>& attn,
                                   const TpcaState<S>& kv_state_k,
                                   const TpcaState<S>& kv_state_v,
                                   const Tensor<S>& z,
                                   TpcaTrace* trace = nullptr) {
  Tensor<S> q = linear(z, attn.w_q, attn.b_q);
  Tensor<S> k = tpca_transform(kv_state_k, linear(z, attn.w_k, attn.b_k), trace);
  Tensor<S> v = tpca_transform(kv_state_v, linear(z, attn.w_v, attn.b_v), trace);
  AttentionOut<S> a = multi_head_on_projected(attn, q, k, v);
  return {a.out, k, v, a.weights};
}

}  // namespace rtpca
