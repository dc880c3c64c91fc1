#pragma once

#include <cstddef>
#include <functional>
#include <string>
#include <vector>

#include "rehydil/gradcheck.hpp"

namespace rehydil {

struct GradCheckCase {
  std::string component;  // tversky_dice, focal_tversky, tac, hgnn_layer, chsnet
  std::string target;     // what was differentiated
  std::size_t seed = 0;
  GradCheckReport report;
};

struct GradCheckSuiteResult {
  std::vector<GradCheckCase> cases;

  bool passed() const;
  std::vector<std::string> components() const;  // in first-seen order
  /// Worst relative error and number of seeds checked for one component.
  double max_error(const std::string& component) const;
  std::size_t seeds(const std::string& component) const;
};

struct GradCheckSuiteOptions {
  std::size_t seeds = 20;
  double tolerance = 1e-4;
  double step = 1e-5;
};

/// Finite-difference checks of the Tversky-Dice and focal Tversky losses, the
/// contrastive loss (both similarity kernels), one hypergraph layer
/// (propagation and fusion, wrt features, edge weights, kernel and bias) and a
/// depth-3 network on 8 x 8 inputs (every parameter tensor), each over
/// `seeds` random draws.
GradCheckSuiteResult run_gradcheck_suite(const GradCheckSuiteOptions& options = {},
                                         const std::function<void(const GradCheckCase&)>& on_case = {});

}  // namespace rehydil
