#pragma once

// Cross-Layer Refinement: attention in the current temporal block over keys
// and values concatenated from the current block and the adaptively pooled
// keys/values carried over from the previous temporal block. Queries stay at
// the current block's length, so the output length never changes.

#include <cstdint>
#include <optional>
#include <string>

#include "rtpca/attention.hpp"
#include "rtpca/tensor.hpp"
#include "rtpca/tpca.hpp"

namespace rtpca {

struct XlrConfig {
  // Length the previous block's K/V are pooled to before concatenation;
  // 0 selects the default ceil(n/2).
  int64_t prev_pool_target = 0;
  bool enabled = true;  // the first block always runs without a predecessor
};

template <class S>
struct CrossLayerCarry {
  Tensor<S> k_prev;  // [..., n, C], already pyramid-refined
  Tensor<S> v_prev;
};

template <class S>
struct XlrOut {
  Tensor<S> out;
  CrossLayerCarry<S> carry_next;
  Tensor<S> weights;  // [..., h, n, n + n_p] when a carry is present
};

// carry must be absent exactly when this is the first temporal block.
template <class S>
XlrOut<S> xlr_attention(const AttentionParams<S>& attn, const XlrConfig& cfg,
                        const Tensor<S>& z_t,
                        const std::optional<CrossLayerCarry<S>>& carry,
                        const TpcaState<S>& tpca_k, const TpcaState<S>& tpca_v,
                        TpcaTrace* trace = nullptr) {
  const int64_t n = z_t.dim(-2);
  const int64_t c = z_t.dim(-1);

  Tensor<S> q = linear(z_t, attn.w_q, attn.b_q);
  Tensor<S> k_t = tpca_transform(tpca_k, linear(z_t, attn.w_k, attn.b_k), trace);
  Tensor<S> v_t = tpca_transform(tpca_v, linear(z_t, attn.w_v, attn.b_v), trace);

  if (!carry.has_value()) {
    AttentionOut<S> a = multi_head_on_projected(attn, q, k_t, v_t);
    return {a.out, CrossLayerCarry<S>{k_t, v_t}, a.weights};
  }

  const CrossLayerCarry<S>& prev = *carry;
  if (prev.k_prev.dim(-1) != c || prev.v_prev.dim(-1) != c ||
      prev.k_prev.shape() != prev.v_prev.shape()) {
    throw ShapeError("xlr: carry shapes " + shape_str(prev.k_prev.shape()) +
                     " / " + shape_str(prev.v_prev.shape()) +
                     " incompatible with channels " + std::to_string(c));
  }
  int64_t n_p = cfg.prev_pool_target > 0 ? cfg.prev_pool_target : (n + 1) / 2;
  if (n_p < 1 || n_p > prev.k_prev.dim(-2)) {
    throw RangeError("xlr: prev_pool_target " + std::to_string(n_p) +
                     " out of range for carry length " +
                     std::to_string(prev.k_prev.dim(-2)));
  }

  Tensor<S> k_merged =
      concat<S>({k_t, adaptive_avg_pool_seq(prev.k_prev, n_p)}, -2);
  Tensor<S> v_merged =
      concat<S>({v_t, adaptive_avg_pool_seq(prev.v_prev, n_p)}, -2);
  AttentionOut<S> a = multi_head_on_projected(attn, q, k_merged, v_merged);
  return {a.out, CrossLayerCarry<S>{k_t, v_t}, a.weights};
}

}  // namespace rtpca
