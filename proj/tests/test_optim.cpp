#include <doctest.h>

#include <cmath>
#include <random>

#include "vapaad/optim.hpp"

using namespace vapaad;

namespace {

template <typename T>
Tensor<T> param_with_grad(std::vector<T> values, std::vector<T> grads) {
  const int64_t n = static_cast<int64_t>(values.size());
  auto t = Tensor<T>::from({n}, std::move(values), true);
  t.ensure_grad();
  std::copy(grads.begin(), grads.end(), t.grad_data());
  return t;
}

}  // namespace

TEST_SUITE("optim") {

TEST_CASE("sgd direct substitution") {
  auto theta = param_with_grad<double>({1.0, 2.0}, {0.5, -1.0});
  std::vector<Tensor<double>> params{theta};
  sgd_step(params, SgdConfig<double>{0.1});
  CHECK(theta.data()[0] == doctest::Approx(0.95).epsilon(1e-15));
  CHECK(theta.data()[1] == doctest::Approx(2.1).epsilon(1e-15));

  auto zg = param_with_grad<double>({3.0}, {0.0});
  std::vector<Tensor<double>> pz{zg};
  sgd_step(pz, SgdConfig<double>{0.1});
  CHECK(zg.data()[0] == 3.0);

  auto ze = param_with_grad<double>({3.0}, {7.0});
  std::vector<Tensor<double>> pe{ze};
  sgd_step(pe, SgdConfig<double>{0.0});
  CHECK(ze.data()[0] == 3.0);

  auto bare = Tensor<double>::from({1}, {1.0}, true);
  std::vector<Tensor<double>> pb{bare};
  CHECK_THROWS_AS(sgd_step(pb, SgdConfig<double>{0.1}), std::invalid_argument);
}

TEST_CASE("adam hand-computed first step") {
  auto theta = param_with_grad<double>({0.5}, {2.0});
  std::vector<Tensor<double>> params{theta};
  auto state = AdamState<double>::init(params);
  adam_step(params, state);
  CHECK(state.t == 1);
  CHECK(state.m[0][0] == doctest::Approx(0.2).epsilon(1e-15));
  CHECK(state.v[0][0] == doctest::Approx(0.004).epsilon(1e-15));
  // bias correction gives m_hat = 2, v_hat = 4, update = 1e-3 * 2/(2+1e-8)
  CHECK(theta.data()[0] == doctest::Approx(0.499).epsilon(1e-9));
}

TEST_CASE("adam first step magnitude is about alpha for any constant gradient") {
  for (double g : {0.01, 1.0, 250.0, -3.0}) {
    auto theta = param_with_grad<double>({1.0}, {g});
    std::vector<Tensor<double>> params{theta};
    auto state = AdamState<double>::init(params);
    adam_step(params, state);
    const double step = std::abs(theta.data()[0] - 1.0);
    CHECK(step == doctest::Approx(1e-3 * std::abs(g) / (std::abs(g) + 1e-8)).epsilon(1e-9));
  }
  auto zero = param_with_grad<double>({1.0}, {0.0});
  std::vector<Tensor<double>> pz{zero};
  auto state = AdamState<double>::init(pz);
  adam_step(pz, state);
  CHECK(zero.data()[0] == 1.0);
}

TEST_CASE("constant gradient cancels the bias correction exactly") {
  const double g = 0.37;
  auto theta = param_with_grad<double>({0.0}, {g});
  std::vector<Tensor<double>> params{theta};
  auto state = AdamState<double>::init(params);
  for (int t = 1; t <= 100; ++t) {
    theta.zero_grad();
    theta.grad_data()[0] = g;
    adam_step(params, state);
    const double corr1 = 1.0 - std::pow(0.9, t);
    const double mhat = state.m[0][0] / corr1;
    CHECK(std::abs(mhat - g) < 1e-12);
    CHECK(state.v[0][0] >= 0.0);
  }
  CHECK(state.t == 100);
}

TEST_CASE("alpha zero advances moments without touching parameters") {
  auto theta = param_with_grad<double>({5.0}, {1.5});
  std::vector<Tensor<double>> params{theta};
  AdamConfig<double> cfg;
  cfg.alpha = 0.0;
  auto state = AdamState<double>::init(params, cfg);
  adam_step(params, state);
  adam_step(params, state);
  CHECK(theta.data()[0] == 5.0);
  CHECK(state.t == 2);
  CHECK(state.m[0][0] > 0.0);
  CHECK(state.v[0][0] > 0.0);
}

TEST_CASE("updates are bitwise deterministic") {
  std::mt19937 rng(3);
  std::uniform_real_distribution<double> dist(-1, 1);
  std::vector<double> vals(32), grads(32);
  for (auto& v : vals) v = dist(rng);
  for (auto& g : grads) g = dist(rng);

  auto run = [&](bool use_adam) {
    auto theta = param_with_grad<double>(vals, grads);
    std::vector<Tensor<double>> params{theta};
    auto state = AdamState<double>::init(params);
    for (int i = 0; i < 5; ++i) {
      theta.zero_grad();
      std::copy(grads.begin(), grads.end(), theta.grad_data());
      if (use_adam)
        adam_step(params, state);
      else
        sgd_step(params, SgdConfig<double>{0.05});
    }
    return theta.values();
  };
  for (bool use_adam : {false, true}) {
    auto a = run(use_adam);
    auto b = run(use_adam);
    for (size_t i = 0; i < a.size(); ++i) CHECK(a[i] == b[i]);
  }
}

TEST_CASE("non-finite gradients reject the step") {
  auto theta = param_with_grad<double>({1.0, 2.0}, {0.5, std::numeric_limits<double>::infinity()});
  std::vector<Tensor<double>> params{theta};
  auto state = AdamState<double>::init(params);
  CHECK_THROWS_AS(adam_step(params, state), NonFiniteGradient);
  CHECK(theta.data()[0] == 1.0);  // untouched
  CHECK(state.t == 0);
  CHECK_THROWS_AS(sgd_step(params, SgdConfig<double>{0.1}), NonFiniteGradient);
  CHECK(theta.data()[0] == 1.0);
}

}  // TEST_SUITE
