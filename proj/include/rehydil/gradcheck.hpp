#pragma once

#include <functional>
#include <vector>

#include "rehydil/tensor.hpp"

namespace rehydil {

struct GradCheckReport {
  double max_relative_error = 0.0;
  std::size_t worst_index = 0;
  std::size_t checked = 0;
  std::size_t refined = 0;  // coordinates re-measured at finer steps
  bool passed = true;
};

/// Compares the autodiff gradient of scalar `f` at `x` against central finite
/// differences (f(x+h e_i) - f(x-h e_i)) / 2h, element by element.
///
/// Relative error is |ad - fd| / max(|ad|, |fd|, abs_floor); the floor keeps
/// gradients that are zero up to round-off from dividing by ~0. A coordinate
/// that fails at `h` is measured again at h / 10 and h / 100 (central, forward and
/// backward quotients) and keeps the smallest error, so a kink of a
/// piecewise-linear op next to `x` is not reported as a gradient bug. `x`
/// itself is not modified.
GradCheckReport finite_difference_check(const std::function<Tensor(const Tensor&)>& f, const Tensor& x,
                                        double h = 1e-5, double tol = 1e-4, double abs_floor = 1e-6);

/// Same comparison restricted to the listed flat indices of `x`.
GradCheckReport finite_difference_check(const std::function<Tensor(const Tensor&)>& f, const Tensor& x,
                                        const std::vector<std::size_t>& indices, double h = 1e-5,
                                        double tol = 1e-4, double abs_floor = 1e-6);

}  // namespace rehydil
