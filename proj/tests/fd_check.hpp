#pragma once

// Central finite-difference oracle used by the gradient suites. Kept in
// test code so it stays independent of the tape implementation.

#include <cmath>
#include <functional>
#include <vector>

#include "vg/tensor.hpp"

namespace fd {

struct Result {
  double max_rel_err = 0.0;
  int64_t checked = 0;
};

inline double rel_err(double analytic, double numeric) {
  const double denom = std::max({std::fabs(analytic), std::fabs(numeric), 1e-3});
  return std::fabs(analytic - numeric) / denom;
}

// params must be float64 leaves with requires_grad set. loss_fn re-runs
// the forward pass from the current parameter values and returns the
// scalar loss value; it must not depend on any state besides the params.
inline Result check(std::vector<vg::tc::Tensor> params,
                    const std::function<vg::tc::Tensor()>& loss_fn, double h = 1e-5) {
  using namespace vg::tc;
  Result res;

  for (auto& p : params) p.zero_grad();
  Tape tape;
  {
    TapeScope scope(tape);
    Tensor loss = loss_fn();
    tape.backward(loss);
  }
  std::vector<std::vector<double>> analytic;
  analytic.reserve(params.size());
  for (auto& p : params) analytic.push_back(p.grad_values());

  for (size_t pi = 0; pi < params.size(); ++pi) {
    Tensor& p = params[pi];
    for (int64_t i = 0; i < p.numel(); ++i) {
      const double orig = p.get(i);
      p.set(i, orig + h);
      const double up = loss_fn().item();
      p.set(i, orig - h);
      const double down = loss_fn().item();
      p.set(i, orig);
      const double numeric = (up - down) / (2.0 * h);
      res.max_rel_err = std::max(res.max_rel_err, rel_err(analytic[pi][static_cast<size_t>(i)], numeric));
      ++res.checked;
    }
  }
  return res;
}

}  // namespace fd
