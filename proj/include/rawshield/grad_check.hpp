#pragma once

#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include "rawshield/tensor.hpp"

namespace rawshield::ad {

struct GradCheckOptions {
  double step = 1e-7;  ///< central-difference half step
  double tol_rel = 1e-4;
  double abs_floor = 1e-6;  ///< absolute error always tolerated
  /// Above this many coordinates the check switches to random directions.
  Index max_coordinates = 10000;
  int probes = 24;
  std::uint64_t seed = 0;
};

struct GradCheckReport {
  bool passed = true;
  double max_rel_error = 0.0;
  double max_abs_error = 0.0;
  Index checks = 0;
  bool directional = false;
  std::string worst;  ///< "param[i] analytic=… numeric=…" for the worst coordinate
};

/// Compares reverse-mode gradients of the scalar program `f` with central
/// differences, perturbing the leaf tensors `params` in place (they are
/// restored afterwards). A coordinate passes when
/// |a − n| ≤ max(tol_rel·max(|a|, |n|), abs_floor).
GradCheckReport grad_check(const std::function<TensorD()>& f, const std::vector<TensorD>& params,
                           const GradCheckOptions& options = {});

}  // namespace rawshield::ad
