#pragma once

// Parameter update rules: plain SGD (theta <- theta - eta * g) and Adam with
// bias-corrected first and second moments.

#include <cmath>
#include <string>
#include <vector>

#include "vapaad/tensor.hpp"

namespace vapaad {

struct NonFiniteGradient : std::runtime_error {
  using std::runtime_error::runtime_error;
};

template <typename T>
struct SgdConfig {
  T eta = T(0.01);
};

namespace detail {

template <typename T>
void check_grads(const std::vector<Tensor<T>>& params) {
  for (size_t i = 0; i < params.size(); ++i) {
    require(params[i].has_grad(),
            "optimizer: parameter " + std::to_string(i) + " has no gradient populated");
    const T* g = params[i].grad_data();
    for (int64_t j = 0; j < params[i].numel(); ++j)
      if (!std::isfinite(static_cast<double>(g[j])))
        throw NonFiniteGradient("optimizer: non-finite gradient in parameter " + std::to_string(i) +
                                " at element " + std::to_string(j) + "; step rejected");
  }
}

}  // namespace detail

template <typename T>
void sgd_step(std::vector<Tensor<T>>& params, const SgdConfig<T>& cfg) {
  require(std::isfinite(static_cast<double>(cfg.eta)) && cfg.eta >= T(0), "sgd: eta must be finite and >= 0");
  detail::check_grads(params);
  for (auto& p : params) {
    T* w = p.data();
    const T* g = p.grad_data();
    for (int64_t j = 0; j < p.numel(); ++j) w[j] -= cfg.eta * g[j];
  }
}

template <typename T>
struct AdamConfig {
  T alpha = T(1e-3);
  T beta1 = T(0.9);
  T beta2 = T(0.999);
  T epsilon = T(1e-8);
};

// Per-parameter moment buffers plus the shared timestep counter t, which
// advances by exactly one per step.
template <typename T>
struct AdamState {
  AdamConfig<T> cfg;
  int64_t t = 0;
  std::vector<std::vector<T>> m, v;

  static AdamState init(const std::vector<Tensor<T>>& params, AdamConfig<T> cfg = {}) {
    AdamState s;
    s.cfg = cfg;
    for (const auto& p : params) {
      s.m.emplace_back(static_cast<size_t>(p.numel()), T(0));
      s.v.emplace_back(static_cast<size_t>(p.numel()), T(0));
    }
    return s;
  }
};

template <typename T>
void adam_step(std::vector<Tensor<T>>& params, AdamState<T>& state) {
  require(params.size() == state.m.size(), "adam: state does not match parameter list");
  detail::check_grads(params);
  state.t += 1;
  const T b1 = state.cfg.beta1, b2 = state.cfg.beta2;
  const T corr1 = T(1) - static_cast<T>(std::pow(static_cast<double>(b1), static_cast<double>(state.t)));
  const T corr2 = T(1) - static_cast<T>(std::pow(static_cast<double>(b2), static_cast<double>(state.t)));
  for (size_t i = 0; i < params.size(); ++i) {
    Tensor<T>& p = params[i];
    require(static_cast<int64_t>(state.m[i].size()) == p.numel(), "adam: moment shape mismatch");
    T* w = p.data();
    const T* g = p.grad_data();
    T* m = state.m[i].data();
    T* v = state.v[i].data();
    for (int64_t j = 0; j < p.numel(); ++j) {
      m[j] = b1 * m[j] + (T(1) - b1) * g[j];
      v[j] = b2 * v[j] + (T(1) - b2) * g[j] * g[j];
      const T mhat = m[j] / corr1;
      const T vhat = v[j] / corr2;
      w[j] -= state.cfg.alpha * mhat / (std::sqrt(vhat) + state.cfg.epsilon);
    }
  }
}

}  // namespace vapaad
