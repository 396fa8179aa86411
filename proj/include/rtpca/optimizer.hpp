#pragma once

// Bias-corrected Adam over a ParamStore, with optional L2 weight decay added
// to the gradient. Moment arrays live in optimizer state and shape-match the
// parameters; the step counter drives bias correction.

#include <cmath>
#include <cstdint>
#include <string>
#include <vector>

#include "rtpca/model.hpp"
#include "rtpca/tensor.hpp"

namespace rtpca {

struct AdamConfig {
  double lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double weight_decay = 0.0;

  void validate() const {
    if (!(lr > 0.0)) throw ConfigError("adam: lr must be > 0");
    if (beta1 < 0.0 || beta1 >= 1.0 || beta2 < 0.0 || beta2 >= 1.0) {
      throw ConfigError("adam: betas must be in [0, 1)");
    }
    if (!(eps > 0.0)) throw ConfigError("adam: eps must be > 0");
    if (weight_decay < 0.0) throw ConfigError("adam: weight decay must be >= 0");
  }
};

template <class S>
class Adam {
 public:
  Adam(const ParamStore<S>& params, AdamConfig cfg) : cfg_(cfg) {
    cfg_.validate();
    for (const auto& [name, t] : params.items()) {
      m_.emplace_back(static_cast<size_t>(t.numel()), S(0));
      v_.emplace_back(static_cast<size_t>(t.numel()), S(0));
    }
  }

  // One update from the accumulated gradients; leaves the gradients intact
  // (the caller zeroes them between steps).
  void step(ParamStore<S>& params, double lr_override = -1.0) {
    const double lr = lr_override > 0.0 ? lr_override : cfg_.lr;
    ++step_count_;
    const double bc1 = 1.0 - std::pow(cfg_.beta1, static_cast<double>(step_count_));
    const double bc2 = 1.0 - std::pow(cfg_.beta2, static_cast<double>(step_count_));
    auto& items = params.items();
    if (items.size() != m_.size()) {
      throw ShapeError("adam: parameter count changed");
    }
    for (size_t i = 0; i < items.size(); ++i) {
      Tensor<S>& t = items[i].second;
      const auto& g = t.grad();
      auto& data = t.mutable_values();
      if (g.size() != data.size() || m_[i].size() != data.size()) {
        throw ShapeError("adam: gradient shape mismatch for " + items[i].first);
      }
      for (size_t k = 0; k < data.size(); ++k) {
        double gk = static_cast<double>(g[k]);
        if (cfg_.weight_decay != 0.0) {
          gk += cfg_.weight_decay * static_cast<double>(data[k]);
        }
        const double m = cfg_.beta1 * static_cast<double>(m_[i][k]) +
                         (1.0 - cfg_.beta1) * gk;
        const double v = cfg_.beta2 * static_cast<double>(v_[i][k]) +
                         (1.0 - cfg_.beta2) * gk * gk;
        m_[i][k] = static_cast<S>(m);
        v_[i][k] = static_cast<S>(v);
        const double m_hat = m / bc1;
        const double v_hat = v / bc2;
        data[k] -= static_cast<S>(lr * m_hat / (std::sqrt(v_hat) + cfg_.eps));
      }
    }
  }

  int64_t step_count() const { return step_count_; }
  const AdamConfig& config() const { return cfg_; }
  const std::vector<std::vector<S>>& first_moments() const { return m_; }
  const std::vector<std::vector<S>>& second_moments() const { return v_; }

  void restore(std::vector<std::vector<S>> m, std::vector<std::vector<S>> v,
               int64_t step_count) {
    if (m.size() != m_.size() || v.size() != v_.size() || step_count < 0) {
      throw ShapeError("adam: restore state does not match parameters");
    }
    for (size_t i = 0; i < m.size(); ++i) {
      if (m[i].size() != m_[i].size() || v[i].size() != v_[i].size()) {
        throw ShapeError("adam: restore state does not match parameters");
      }
    }
    m_ = std::move(m);
    v_ = std::move(v);
    step_count_ = step_count;
  }

 private:
  AdamConfig cfg_;
  std::vector<std::vector<S>> m_;
  std::vector<std::vector<S>> v_;
  int64_t step_count_ = 0;
};

}  // namespace rtpca
