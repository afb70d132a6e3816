#pragma once

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstdint>
#include <stdexcept>
#include <string>

namespace vapaad {

[[noreturn]] inline void fail(const std::string& msg) {
  throw std::invalid_argument(msg);
}

inline void require(bool cond, const std::string& msg) {
  if (!cond) fail(msg);
}

// Polynomial expf with Cephes coefficients, ~1e-7 relative error.
// Branch-free apart from the range clamp so loops over it vectorize.
inline float fast_expf(float x) {
  x = std::min(88.02f, std::max(-87.3f, x));
  float z = std::floor(1.442695040f * x + 0.5f);
  x -= z * 0.693359375f;
  x -= z * -2.12194440e-4f;
  const int n = static_cast<int>(z);
  float p = 1.9875691500e-4f;
  p = p * x + 1.3981999507e-3f;
  p = p * x + 8.3334519073e-3f;
  p = p * x + 4.1665795894e-2f;
  p = p * x + 1.6666665459e-1f;
  p = p * x + 5.0000001201e-1f;
  p = p * x * x + x + 1.0f;
  return p * std::bit_cast<float>((n + 127) << 23);
}

// Scalar math routed per precision: float takes the fast branch-free path
// (training), double goes through libm (gradient checking wants full
// accuracy). The float forms are written as selects so loops over them
// vectorize.
template <typename T>
struct ScalarMath;

template <>
struct ScalarMath<float> {
  static float exp(float x) { return fast_expf(x); }
  static float log(float x) { return std::log(x); }
  static float tanh(float x) { return 1.0f - 2.0f / (fast_expf(2.0f * x) + 1.0f); }
  static float sigmoid(float x) {
    const float e = fast_expf(-std::fabs(x));
    const float num = x >= 0.0f ? 1.0f : e;
    return num / (1.0f + e);
  }
};

template <>
struct ScalarMath<double> {
  static double exp(double x) { return std::exp(x); }
  static double log(double x) { return std::log(x); }
  static double tanh(double x) { return std::tanh(x); }
  static double sigmoid(double x) {
    if (x >= 0.0) return 1.0 / (1.0 + std::exp(-x));
    const double e = std::exp(x);
    return e / (1.0 + e);
  }
};

// Reductions in 8 fixed accumulator lanes (lane k folds elements k, k+8,
// k+16, ...), combined in lane order. The grouping is a fixed function of
// the length alone, so results stay bitwise reproducible while the loops
// vectorize.
template <typename T>
T blocked_dot(const T* a, const T* b, int64_t n) {
  T lanes[8] = {};
  const int64_t main = n & ~int64_t(7);
  for (int64_t i = 0; i < main; i += 8)
    for (int64_t k = 0; k < 8; ++k) lanes[k] += a[i + k] * b[i + k];
  for (int64_t i = main; i < n; ++i) lanes[i - main] += a[i] * b[i];
  T s = 0;
  for (int k = 0; k < 8; ++k) s += lanes[k];
  return s;
}

template <typename T>
T blocked_sum(const T* a, int64_t n) {
  T lanes[8] = {};
  const int64_t main = n & ~int64_t(7);
  for (int64_t i = 0; i < main; i += 8)
    for (int64_t k = 0; k < 8; ++k) lanes[k] += a[i + k];
  for (int64_t i = main; i < n; ++i) lanes[i - main] += a[i];
  T s = 0;
  for (int k = 0; k < 8; ++k) s += lanes[k];
  return s;
}

template <typename T>
T blocked_max(const T* a, int64_t n) {
  T m = a[0];
  for (int64_t i = 1; i < n; ++i) m = std::max(m, a[i]);
  return m;
}

}  // namespace vapaad
