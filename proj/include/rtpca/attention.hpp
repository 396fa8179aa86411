#pragma once

// Scaled dot-product and multi-head attention. Key/value sources may be
// supplied separately from the query source and may be longer than it, which
// is what cross-layer refinement needs.

#include <cmath>
#include <numeric>
#include <string>
#include <vector>

#include "rtpca/random.hpp"
#include "rtpca/tensor.hpp"

namespace rtpca {

template <class S>
struct AttentionParams {
  int64_t channels = 0;  // C
  int64_t heads = 1;     // h; per-head dim is C/h
  Tensor<S> w_q, w_k, w_v, w_o;  // [C, C]
  Tensor<S> b_q, b_k, b_v, b_o;  // [C]

  int64_t head_dim() const { return channels / heads; }

  static AttentionParams init(int64_t channels, int64_t heads, Rng& rng) {
    if (heads < 1 || channels % heads != 0) {
      throw ConfigError("attention: channels " + std::to_string(channels) +
                        " not divisible by heads " + std::to_string(heads));
    }
    AttentionParams p;
    p.channels = channels;
    p.heads = heads;
    const double bound = 1.0 / std::sqrt(static_cast<double>(channels));
    p.w_q = rand_uniform<S>({channels, channels}, -bound, bound, rng);
    p.w_k = rand_uniform<S>({channels, channels}, -bound, bound, rng);
    p.w_v = rand_uniform<S>({channels, channels}, -bound, bound, rng);
    p.w_o = rand_uniform<S>({channels, channels}, -bound, bound, rng);
    p.b_q = Tensor<S>::zeros({channels});
    p.b_k = Tensor<S>::zeros({channels});
    p.b_v = Tensor<S>::zeros({channels});
    p.b_o = Tensor<S>::zeros({channels});
    return p;
  }
};

template <class S>
Tensor<S> linear(const Tensor<S>& x, const Tensor<S>& w, const Tensor<S>& b) {
  return add(matmul(x, w), b);
}

template <class S>
struct AttentionOut {
  Tensor<S> out;
  Tensor<S> weights;  // softmax rows, kept for inspection/export
};

// q [..., n_q, d], k [..., n_k, d], v [..., n_k, d]; the scale divisor is
// sqrt(d) of the per-head dimension.
template <class S>
AttentionOut<S> scaled_dot_product(const Tensor<S>& q, const Tensor<S>& k,
                                   const Tensor<S>& v) {
  if (q.dim(-1) != k.dim(-1)) {
    throw ShapeError("scaled_dot_product: query dim " + shape_str(q.shape()) +
                     " vs key dim " + shape_str(k.shape()));
  }
  if (k.dim(-2) != v.dim(-2) || k.dim(-2) < 1) {
    throw ShapeError("scaled_dot_product: key/value lengths " +
                     shape_str(k.shape()) + " vs " + shape_str(v.shape()));
  }
  const S inv_scale =
      static_cast<S>(1.0 / std::sqrt(static_cast<double>(q.dim(-1))));
  Tensor<S> logits = scale(matmul(q, transpose_last2(k)), inv_scale);
  Tensor<S> weights = softmax(logits, -1);
  return {matmul(weights, v), weights};
}

namespace detail {

// [..., n, C] -> [..., h, n, C/h]
template <class S>
Tensor<S> split_heads(const Tensor<S>& x, int64_t heads) {
  const int64_t nd = x.ndim();
  const int64_t n = x.dim(-2);
  const int64_t c = x.dim(-1);
  Shape with_heads(x.shape().begin(), x.shape().end() - 1);
  with_heads.push_back(heads);
  with_heads.push_back(c / heads);
  Tensor<S> y = reshape(x, std::move(with_heads));
  // [..., n, h, dh] -> [..., h, n, dh]
  std::vector<int64_t> perm(static_cast<size_t>(nd + 1));
  std::iota(perm.begin(), perm.end(), 0);
  std::swap(perm[static_cast<size_t>(nd - 2)], perm[static_cast<size_t>(nd - 1)]);
  (void)n;
  return transpose(y, std::move(perm));
}

// [..., h, n, C/h] -> [..., n, C]
template <class S>
Tensor<S> merge_heads(const Tensor<S>& x) {
  const int64_t nd = x.ndim();
  std::vector<int64_t> perm(static_cast<size_t>(nd));
  std::iota(perm.begin(), perm.end(), 0);
  std::swap(perm[static_cast<size_t>(nd - 3)], perm[static_cast<size_t>(nd - 2)]);
  Tensor<S> y = transpose(x, std::move(perm));
  Shape merged(y.shape().begin(), y.shape().end() - 2);
  merged.push_back(y.dim(-2) * y.dim(-1));
  return reshape(y, std::move(merged));
}

}  // namespace detail

// Attention on already-projected Q/K/V (the TPCA and XLR paths refine K/V
// between projection and attention). Splits into heads, runs scaled dot
// product per head, merges, applies the output projection. The returned
// weights have shape [..., h, n_q, n_k].
template <class S>
AttentionOut<S> multi_head_on_projected(const AttentionParams<S>& p,
                                        const Tensor<S>& q,
                                        const Tensor<S>& k,
                                        const Tensor<S>& v) {
  Tensor<S> qh = detail::split_heads(q, p.heads);
  Tensor<S> kh = detail::split_heads(k, p.heads);
  Tensor<S> vh = detail::split_heads(v, p.heads);
  AttentionOut<S> head_out = scaled_dot_product(qh, kh, vh);
  Tensor<S> merged = detail::merge_heads(head_out.out);
  return {linear(merged, p.w_o, p.b_o), head_out.weights};
}

// q_src [..., n_q, C]; kv sources [..., n_k, C] with equal lengths.
// Self-attention is the call with q_src == kv_src_k == kv_src_v.
template <class S>
AttentionOut<S> multi_head_attention(const AttentionParams<S>& p,
                                     const Tensor<S>& q_src,
                                     const Tensor<S>& kv_src_k,
                                     const Tensor<S>& kv_src_v) {
  if (kv_src_k.dim(-2) != kv_src_v.dim(-2)) {
    throw ShapeError("multi_head_attention: key source " +
                     shape_str(kv_src_k.shape()) + " and value source " +
                     shape_str(kv_src_v.shape()) + " lengths differ");
  }
  Tensor<S> q = linear(q_src, p.w_q, p.b_q);
  Tensor<S> k = linear(kv_src_k, p.w_k, p.b_k);
  Tensor<S> v = linear(kv_src_v, p.w_v, p.b_v);
  return multi_head_on_projected(p, q, k, v);
}

}  // namespace rtpca
