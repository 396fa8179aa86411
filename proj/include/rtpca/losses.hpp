#pragma once

// Training losses (weighted MPJPE, temporal-coherence loss, velocity error)
// on the autodiff tensor type, and evaluation metrics (MPJPE, Procrustes-
// aligned MPJPE, PCK, AUC, velocity and acceleration error, per-frame MPJPE
// curves) computed in double precision outside the graph.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <map>
#include <string>
#include <vector>

#include <Eigen/Core>
#include <Eigen/SVD>

#include <json.hpp>

#include "rtpca/tensor.hpp"

namespace rtpca {

// ---------------------------------------------------------------------------
// Joint weighting
// ---------------------------------------------------------------------------

struct JointWeights {
  std::vector<double> w;

  void validate(int64_t joints) const {
    if (static_cast<int64_t>(w.size()) != joints) {
      throw ConfigError("joint weights: " + std::to_string(w.size()) +
                        " weights for " + std::to_string(joints) + " joints");
    }
    for (double x : w) {
      if (!(x > 0.0)) throw ConfigError("joint weights must be positive");
    }
  }

  static JointWeights uniform(int64_t joints) {
    return {std::vector<double>(static_cast<size_t>(joints), 1.0)};
  }

  // 17-joint skeleton grouping: 1.0 torso, 1.5 head, 2.5 middle limb
  // (knees, elbows, shoulders), 4.0 terminal limb (ankles, wrists).
  static JointWeights h36m17() {
    JointWeights jw = uniform(17);
    auto set = [&jw](std::initializer_list<int> idx, double v) {
      for (int i : idx) jw.w[static_cast<size_t>(i)] = v;
    };
    set({0, 1, 4, 7, 8}, 1.0);        // pelvis, hips, spine, thorax
    set({9, 10}, 1.5);                // neck, head
    set({2, 5, 11, 12, 14, 15}, 2.5); // knees, shoulders, elbows
    set({3, 6, 13, 16}, 4.0);         // ankles, wrists
    return jw;
  }

  static JointWeights defaults(int64_t joints) {
    return joints == 17 ? h36m17() : uniform(joints);
  }

  // Editable group file: {"joints": J, "groups": [{"name", "weight",
  // "joints": [...]}, ...]}; every joint must be covered exactly once.
  static JointWeights from_json_file(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw ParseError("joint weights: cannot open " + path);
    nlohmann::json j;
    try {
      in >> j;
    } catch (const nlohmann::json::exception& e) {
      throw ParseError("joint weights: " + path + ": " + e.what());
    }
    if (!j.contains("joints") || !j.contains("groups")) {
      throw ParseError("joint weights: " + path +
                       ": expected keys 'joints' and 'groups'");
    }
    const int64_t joints = j["joints"].get<int64_t>();
    JointWeights jw;
    jw.w.assign(static_cast<size_t>(joints), 0.0);
    std::vector<bool> seen(static_cast<size_t>(joints), false);
    for (const auto& g : j["groups"]) {
      const double weight = g.at("weight").get<double>();
      for (const auto& idx : g.at("joints")) {
        const int64_t i = idx.get<int64_t>();
        if (i < 0 || i >= joints || seen[static_cast<size_t>(i)]) {
          throw ParseError("joint weights: joint " + std::to_string(i) +
                           " missing, repeated or out of range");
        }
        seen[static_cast<size_t>(i)] = true;
        jw.w[static_cast<size_t>(i)] = weight;
      }
    }
    for (int64_t i = 0; i < joints; ++i) {
      if (!seen[static_cast<size_t>(i)]) {
        throw ParseError("joint weights: joint " + std::to_string(i) +
                         " not covered by any group");
      }
    }
    jw.validate(joints);
    return jw;
  }
};

struct LossWeights {
  double lambda_t = 0.5;
  double lambda_m = 0.5;
};

// ---------------------------------------------------------------------------
// Differentiable losses; all take [B, J, F, 3] predictions and targets
// ---------------------------------------------------------------------------

namespace detail {

template <class S>
void check_pose_shapes(const Tensor<S>& p, const Tensor<S>& g,
                       const char* op) {
  if (p.ndim() != 4 || p.dim(3) != 3 || p.shape() != g.shape()) {
    throw ShapeError(std::string(op) + ": expected matching [B, J, F, 3], got " +
                     shape_str(p.shape()) + " and " + shape_str(g.shape()));
  }
}

// Euclidean norm over the coordinate axis: [B, J, F, 3] -> [B, J, F]
template <class S>
Tensor<S> coord_norm(const Tensor<S>& x) {
  return sqrt(sum_axis(mul(x, x), 3));
}

}  // namespace detail

// Mean over joints of (w_j * mean over frames of the squared Euclidean
// error), then mean over the batch. `squared` switches to the unsquared norm.
template <class S>
Tensor<S> wmpjpe_loss(const Tensor<S>& pred, const Tensor<S>& gt,
                      const JointWeights& jw, bool squared = true) {
  detail::check_pose_shapes(pred, gt, "wmpjpe");
  const int64_t J = pred.dim(1);
  jw.validate(J);
  Tensor<S> diff = sub(pred, gt);
  Tensor<S> per = sum_axis(mul(diff, diff), 3);  // [B, J, F]
  if (!squared) per = sqrt(per);
  Tensor<S> per_joint = mean_axis(per, 2);  // [B, J]
  std::vector<S> wv(jw.w.begin(), jw.w.end());
  Tensor<S> w = Tensor<S>::from_data({J}, std::move(wv));
  return mean_all(mul(per_joint, w));
}

// Mean per-joint velocity error: MPJPE of first temporal differences.
template <class S>
Tensor<S> mpjve_loss(const Tensor<S>& pred, const Tensor<S>& gt) {
  detail::check_pose_shapes(pred, gt, "mpjve");
  const int64_t F = pred.dim(2);
  if (F < 2) throw RangeError("mpjve: needs at least 2 frames");
  auto first_diff = [F](const Tensor<S>& x) {
    return sub(slice(x, 2, 1, F - 1), slice(x, 2, 0, F - 1));
  };
  return mean_all(detail::coord_norm(sub(first_diff(pred), first_diff(gt))));
}

// Temporal-coherence loss: mean norm of the mismatch between predicted and
// ground-truth second temporal differences.
template <class S>
Tensor<S> tc_loss(const Tensor<S>& pred, const Tensor<S>& gt) {
  detail::check_pose_shapes(pred, gt, "tc_loss");
  const int64_t F = pred.dim(2);
  if (F < 3) throw RangeError("tc_loss: needs at least 3 frames");
  auto second_diff = [F](const Tensor<S>& x) {
    return add(sub(slice(x, 2, 2, F - 2), scale(slice(x, 2, 1, F - 2), S(2))),
               slice(x, 2, 0, F - 2));
  };
  return mean_all(detail::coord_norm(sub(second_diff(pred), second_diff(gt))));
}

template <class S>
struct LossBreakdown {
  Tensor<S> total;
  Tensor<S> wmpjpe;
  Tensor<S> tc;
  Tensor<S> mpjve;
};

// L = L_w + lambda_t * L_t + lambda_m * L_m
template <class S>
LossBreakdown<S> total_loss(const Tensor<S>& pred, const Tensor<S>& gt,
                            const JointWeights& jw, const LossWeights& lw,
                            bool squared_wmpjpe = true) {
  if (lw.lambda_t < 0.0 || lw.lambda_m < 0.0) {
    throw ConfigError("loss weights must be non-negative");
  }
  LossBreakdown<S> out;
  out.wmpjpe = wmpjpe_loss(pred, gt, jw, squared_wmpjpe);
  out.tc = tc_loss(pred, gt);
  out.mpjve = mpjve_loss(pred, gt);
  out.total = add(out.wmpjpe, add(scale(out.tc, static_cast<S>(lw.lambda_t)),
                                  scale(out.mpjve, static_cast<S>(lw.lambda_m))));
  return out;
}

// ---------------------------------------------------------------------------
// Evaluation metrics (double precision, no gradients)
// ---------------------------------------------------------------------------

inline double mpjpe(const Tensor<double>& pred, const Tensor<double>& gt) {
  detail::check_pose_shapes(pred, gt, "mpjpe");
  const auto& p = pred.values();
  const auto& g = gt.values();
  double sum = 0.0;
  const size_t count = p.size() / 3;
  for (size_t i = 0; i < count; ++i) {
    const double dx = p[3 * i] - g[3 * i];
    const double dy = p[3 * i + 1] - g[3 * i + 1];
    const double dz = p[3 * i + 2] - g[3 * i + 2];
    sum += std::sqrt(dx * dx + dy * dy + dz * dz);
  }
  return sum / static_cast<double>(count);
}

namespace detail {

// Similarity transform (scale, rotation, translation) minimizing the summed
// squared error against gt, then the mean distance of the aligned points.
// Degenerate point sets fall back to translation-only alignment.
inline double procrustes_frame(const Eigen::Matrix3Xd& p,
                               const Eigen::Matrix3Xd& g, bool* fallback) {
  const Eigen::Vector3d mu_p = p.rowwise().mean();
  const Eigen::Vector3d mu_g = g.rowwise().mean();
  const Eigen::Matrix3Xd x = p.colwise() - mu_p;
  const Eigen::Matrix3Xd y = g.colwise() - mu_g;
  const double norm_x2 = x.squaredNorm();
  const double norm_y2 = y.squaredNorm();

  Eigen::Matrix3Xd aligned;
  if (norm_x2 < 1e-12 || norm_y2 < 1e-12) {
    if (fallback) *fallback = true;
    aligned = x;
  } else {
    const Eigen::Matrix3d h = x * y.transpose();  // cross-covariance^T-free form
    Eigen::JacobiSVD<Eigen::Matrix3d> svd(
        h, Eigen::ComputeFullU | Eigen::ComputeFullV);
    Eigen::Matrix3d u = svd.matrixU();
    Eigen::Matrix3d v = svd.matrixV();
    Eigen::Vector3d s = svd.singularValues();
    Eigen::Vector3d dsign(1.0, 1.0, 1.0);
    if ((v * u.transpose()).determinant() < 0.0) dsign(2) = -1.0;
    const Eigen::Matrix3d rot = v * dsign.asDiagonal() * u.transpose();
    const double scale_opt = s.dot(dsign) / norm_x2;
    aligned = scale_opt * (rot * x);
  }
  double sum = 0.0;
  for (Eigen::Index j = 0; j < aligned.cols(); ++j) {
    sum += (aligned.col(j) - y.col(j)).norm();
  }
  return sum;
}

}  // namespace detail

struct PMpjpeResult {
  double value = 0.0;
  int64_t fallback_frames = 0;
};

// Procrustes-aligned MPJPE: per-frame closed-form similarity alignment, then
// the mean per-joint distance. Needs J >= 3 for a meaningful rotation fit.
inline PMpjpeResult p_mpjpe(const Tensor<double>& pred,
                            const Tensor<double>& gt) {
  detail::check_pose_shapes(pred, gt, "p_mpjpe");
  const int64_t B = pred.dim(0), J = pred.dim(1), F = pred.dim(2);
  if (J < 3) throw RangeError("p_mpjpe: needs at least 3 joints");
  const auto& pv = pred.values();
  const auto& gv = gt.values();
  PMpjpeResult res;
  double sum = 0.0;
  for (int64_t b = 0; b < B; ++b) {
    for (int64_t f = 0; f < F; ++f) {
      Eigen::Matrix3Xd p(3, J), g(3, J);
      for (int64_t j = 0; j < J; ++j) {
        const size_t off = static_cast<size_t>(((b * J + j) * F + f) * 3);
        p.col(j) = Eigen::Vector3d(pv[off], pv[off + 1], pv[off + 2]);
        g.col(j) = Eigen::Vector3d(gv[off], gv[off + 1], gv[off + 2]);
      }
      bool fb = false;
      sum += detail::procrustes_frame(p, g, &fb);
      if (fb) ++res.fallback_frames;
    }
  }
  res.value = sum / static_cast<double>(B * J * F);
  return res;
}

// PCK at 150 mm and AUC as the mean PCK across thresholds 5, 10, ..., 150 mm.
inline std::pair<double, double> pck_auc(const Tensor<double>& pred,
                                         const Tensor<double>& gt) {
  detail::check_pose_shapes(pred, gt, "pck_auc");
  const auto& p = pred.values();
  const auto& g = gt.values();
  const size_t count = p.size() / 3;
  int64_t hit150 = 0;
  std::array<int64_t, 30> hits{};
  for (size_t i = 0; i < count; ++i) {
    const double dx = p[3 * i] - g[3 * i];
    const double dy = p[3 * i + 1] - g[3 * i + 1];
    const double dz = p[3 * i + 2] - g[3 * i + 2];
    const double e = std::sqrt(dx * dx + dy * dy + dz * dz);
    if (e < 150.0) ++hit150;
    for (int t = 0; t < 30; ++t) {
      if (e < 5.0 * (t + 1)) ++hits[static_cast<size_t>(t)];
    }
  }
  const double denom = static_cast<double>(count);
  double auc = 0.0;
  for (int t = 0; t < 30; ++t)
    auc += 100.0 * static_cast<double>(hits[static_cast<size_t>(t)]) / denom;
  return {100.0 * static_cast<double>(hit150) / denom, auc / 30.0};
}

// Mean mismatch of second temporal differences scaled to mm/s^2.
inline double accel_error(const Tensor<double>& pred, const Tensor<double>& gt,
                          double fps) {
  detail::check_pose_shapes(pred, gt, "accel_error");
  const int64_t B = pred.dim(0), J = pred.dim(1), F = pred.dim(2);
  if (F < 3) throw RangeError("accel_error: needs at least 3 frames");
  if (!(fps > 0.0)) throw ConfigError("accel_error: fps must be > 0");
  const auto& p = pred.values();
  const auto& g = gt.values();
  const double fps2 = fps * fps;
  double sum = 0.0;
  int64_t count = 0;
  for (int64_t b = 0; b < B; ++b) {
    for (int64_t j = 0; j < J; ++j) {
      const size_t base = static_cast<size_t>((b * J + j) * F * 3);
      for (int64_t f = 1; f + 1 < F; ++f) {
        double acc = 0.0;
        for (int64_t c = 0; c < 3; ++c) {
          const size_t i = base + static_cast<size_t>(f * 3 + c);
          const double ap = p[i + 3] - 2.0 * p[i] + p[i - 3];
          const double ag = g[i + 3] - 2.0 * g[i] + g[i - 3];
          acc += (ap - ag) * (ap - ag);
        }
        sum += std::sqrt(acc) * fps2;
        ++count;
      }
    }
  }
  return sum / static_cast<double>(count);
}

// MPJPE of first temporal differences, as an evaluation number.
inline double mpjve_metric(const Tensor<double>& pred,
                           const Tensor<double>& gt) {
  detail::check_pose_shapes(pred, gt, "mpjve");
  const int64_t B = pred.dim(0), J = pred.dim(1), F = pred.dim(2);
  if (F < 2) throw RangeError("mpjve: needs at least 2 frames");
  const auto& p = pred.values();
  const auto& g = gt.values();
  double sum = 0.0;
  int64_t count = 0;
  for (int64_t b = 0; b < B; ++b) {
    for (int64_t j = 0; j < J; ++j) {
      const size_t base = static_cast<size_t>((b * J + j) * F * 3);
      for (int64_t f = 0; f + 1 < F; ++f) {
        double acc = 0.0;
        for (int64_t c = 0; c < 3; ++c) {
          const size_t i = base + static_cast<size_t>(f * 3 + c);
          const double vp = p[i + 3] - p[i];
          const double vg = g[i + 3] - g[i];
          acc += (vp - vg) * (vp - vg);
        }
        sum += std::sqrt(acc);
        ++count;
      }
    }
  }
  return sum / static_cast<double>(count);
}

// ---------------------------------------------------------------------------
// Aggregated evaluation report
// ---------------------------------------------------------------------------

struct MetricsValues {
  double mpjpe_mm = 0.0;
  double p_mpjpe_mm = 0.0;
  double pck_pct = 0.0;
  double auc_pct = 0.0;
  double mpjve_mm = 0.0;
  double accel_mm_s2 = 0.0;
};

struct MetricsReport {
  MetricsValues aggregate;
  std::map<std::string, MetricsValues> per_action;
  std::vector<double> per_frame_mpjpe;  // indexed by absolute frame
  int64_t alignment_fallbacks = 0;

  nlohmann::ordered_json to_json() const {
    auto values_json = [](const MetricsValues& m) {
      nlohmann::ordered_json j;
      j["mpjpe_mm"] = m.mpjpe_mm;
      j["p_mpjpe_mm"] = m.p_mpjpe_mm;
      j["pck_pct"] = m.pck_pct;
      j["auc_pct"] = m.auc_pct;
      j["mpjve_mm"] = m.mpjve_mm;
      j["accel_mm_s2"] = m.accel_mm_s2;
      return j;
    };
    nlohmann::ordered_json j = values_json(aggregate);
    j["alignment_fallbacks"] = alignment_fallbacks;
    nlohmann::ordered_json actions;
    for (const auto& [name, m] : per_action) actions[name] = values_json(m);
    j["per_action"] = std::move(actions);
    j["per_frame_mpjpe"] = per_frame_mpjpe;
    return j;
  }
};

// Streams per-window predictions into per-action and aggregate metrics.
// Padded frames of eval windows are excluded by passing the valid count.
class MetricsAccumulator {
 public:
  // pred/gt are [J, F, 3]; only the first valid_frames frames count.
  void add(const Tensor<double>& pred, const Tensor<double>& gt,
           int64_t valid_frames, int64_t start_frame, double fps,
           const std::string& action) {
    const int64_t J = pred.dim(0), F = pred.dim(1);
    if (pred.ndim() != 3 || pred.shape() != gt.shape() || pred.dim(2) != 3) {
      throw ShapeError("metrics: window shapes " + shape_str(pred.shape()) +
                       " vs " + shape_str(gt.shape()));
    }
    if (valid_frames < 1 || valid_frames > F) {
      throw RangeError("metrics: valid frame count out of range");
    }
    Aggregate& act = per_action_[action];
    const auto& p = pred.values();
    const auto& g = gt.values();

    for (int64_t f = 0; f < valid_frames; ++f) {
      Eigen::Matrix3Xd pf(3, J), gf(3, J);
      double frame_sum = 0.0;
      for (int64_t j = 0; j < J; ++j) {
        const size_t off = static_cast<size_t>((j * F + f) * 3);
        pf.col(j) = Eigen::Vector3d(p[off], p[off + 1], p[off + 2]);
        gf.col(j) = Eigen::Vector3d(g[off], g[off + 1], g[off + 2]);
        const double e = (pf.col(j) - gf.col(j)).norm();
        frame_sum += e;
        for (Aggregate* a : {&total_, &act}) {
          a->dist_sum += e;
          ++a->dist_count;
          if (e < 150.0) ++a->pck_hits;
          for (int t = 0; t < 30; ++t) {
            if (e < 5.0 * (t + 1)) ++a->auc_hits[static_cast<size_t>(t)];
          }
        }
      }
      bool fb = false;
      const double aligned_sum = detail::procrustes_frame(pf, gf, &fb);
      for (Aggregate* a : {&total_, &act}) {
        a->aligned_sum += aligned_sum;
        if (fb) ++a->fallbacks;
      }
      const size_t abs_f = static_cast<size_t>(start_frame + f);
      if (frame_sums_.size() <= abs_f) {
        frame_sums_.resize(abs_f + 1, 0.0);
        frame_counts_.resize(abs_f + 1, 0);
      }
      frame_sums_[abs_f] += frame_sum / static_cast<double>(J);
      ++frame_counts_[abs_f];
    }

    auto at = [&](const std::vector<double>& v, int64_t j, int64_t f,
                  int64_t c) {
      return v[static_cast<size_t>((j * F + f) * 3 + c)];
    };
    for (int64_t j = 0; j < J; ++j) {
      for (int64_t f = 0; f + 1 < valid_frames; ++f) {
        double acc = 0.0;
        for (int64_t c = 0; c < 3; ++c) {
          const double vp = at(p, j, f + 1, c) - at(p, j, f, c);
          const double vg = at(g, j, f + 1, c) - at(g, j, f, c);
          acc += (vp - vg) * (vp - vg);
        }
        for (Aggregate* a : {&total_, &act}) {
          a->vel_sum += std::sqrt(acc);
          ++a->vel_count;
        }
      }
      for (int64_t f = 1; f + 1 < valid_frames; ++f) {
        double acc = 0.0;
        for (int64_t c = 0; c < 3; ++c) {
          const double ap =
              at(p, j, f + 1, c) - 2.0 * at(p, j, f, c) + at(p, j, f - 1, c);
          const double ag =
              at(g, j, f + 1, c) - 2.0 * at(g, j, f, c) + at(g, j, f - 1, c);
          acc += (ap - ag) * (ap - ag);
        }
        for (Aggregate* a : {&total_, &act}) {
          a->acc_sum += std::sqrt(acc) * fps * fps;
          ++a->acc_count;
        }
      }
    }
  }

  MetricsReport finalize() const {
    MetricsReport rep;
    rep.aggregate = total_.values();
    rep.alignment_fallbacks = total_.fallbacks;
    for (const auto& [name, agg] : per_action_) {
      rep.per_action[name] = agg.values();
    }
    rep.per_frame_mpjpe.reserve(frame_sums_.size());
    for (size_t i = 0; i < frame_sums_.size(); ++i) {
      rep.per_frame_mpjpe.push_back(
          frame_counts_[i] > 0
              ? frame_sums_[i] / static_cast<double>(frame_counts_[i])
              : 0.0);
    }
    return rep;
  }

 private:
  struct Aggregate {
    double dist_sum = 0.0;
    double aligned_sum = 0.0;
    int64_t dist_count = 0;
    int64_t pck_hits = 0;
    std::array<int64_t, 30> auc_hits{};
    double vel_sum = 0.0;
    int64_t vel_count = 0;
    double acc_sum = 0.0;
    int64_t acc_count = 0;
    int64_t fallbacks = 0;

    MetricsValues values() const {
      MetricsValues m;
      if (dist_count > 0) {
        const double denom = static_cast<double>(dist_count);
        m.mpjpe_mm = dist_sum / denom;
        m.p_mpjpe_mm = aligned_sum / denom;
        m.pck_pct = 100.0 * static_cast<double>(pck_hits) / denom;
        double auc = 0.0;
        for (int t = 0; t < 30; ++t)
          auc += 100.0 * static_cast<double>(auc_hits[static_cast<size_t>(t)]) /
                 denom;
        m.auc_pct = auc / 30.0;
      }
      if (vel_count > 0) m.mpjve_mm = vel_sum / static_cast<double>(vel_count);
      if (acc_count > 0)
        m.accel_mm_s2 = acc_sum / static_cast<double>(acc_count);
      return m;
    }
  };

  Aggregate total_;
  std::map<std::string, Aggregate> per_action_;
  std::vector<double> frame_sums_;
  std::vector<int64_t> frame_counts_;
};

}  // namespace rtpca
