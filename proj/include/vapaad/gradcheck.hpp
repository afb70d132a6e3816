#pragma once

// Central finite-difference verification of analytic gradients. Intended to
// run with T = double; the loss function must be deterministic.

#include <cmath>
#include <functional>
#include <string>
#include <vector>

#include "vapaad/tensor.hpp"

namespace vapaad {

struct GradCheckReport {
  bool pass = false;
  double max_rel_err = 0.0;
  std::string worst;  // "param 2, element 17" style location of the max error
  int64_t checked = 0;
};

// Compares d loss/d theta from a backward pass against (f(t+h)-f(t-h))/2h per
// element. Relative error uses a small floor so exact zero gradients compare
// cleanly. Throws if two baseline evaluations of f disagree.
template <typename T>
GradCheckReport finite_diff_check(const std::function<Tensor<T>()>& f, std::vector<Tensor<T>> params,
                                  double h, double tol) {
  const T base0 = f().item();
  const T base1 = f().item();
  if (base0 != base1)
    throw std::runtime_error("finite_diff_check: f is not deterministic (baselines differ)");

  std::vector<std::vector<T>> analytic;
  {
    Tape<T> tape;
    Tensor<T> loss = f();
    for (auto& p : params) p.zero_grad();
    tape.backward(loss);
    for (auto& p : params) {
      p.ensure_grad();
      analytic.push_back(p.grad());
    }
  }

  GradCheckReport report;
  report.pass = true;
  for (size_t pi = 0; pi < params.size(); ++pi) {
    Tensor<T>& p = params[pi];
    for (int64_t i = 0; i < p.numel(); ++i) {
      const T saved = p.data()[i];
      p.data()[i] = saved + static_cast<T>(h);
      const double up = static_cast<double>(f().item());
      p.data()[i] = saved - static_cast<T>(h);
      const double down = static_cast<double>(f().item());
      p.data()[i] = saved;
      const double numeric = (up - down) / (2.0 * h);
      const double a = static_cast<double>(analytic[pi][static_cast<size_t>(i)]);
      const double rel = std::abs(a - numeric) / std::max({std::abs(a), std::abs(numeric), 1e-2});
      ++report.checked;
      if (rel > report.max_rel_err) {
        report.max_rel_err = rel;
        report.worst = "param " + std::to_string(pi) + ", element " + std::to_string(i);
      }
      if (rel > tol) report.pass = false;
    }
  }
  return report;
}

}  // namespace vapaad
