#pragma once

#include "narf/autodiff.hpp"

#include <cstddef>
#include <functional>
#include <string>

namespace narf {

struct GradCheckResult {
  double max_relative_error = 0.0;
  std::string worst_parameter;
  std::size_t worst_index = 0;
  std::size_t checked = 0;
  // Coordinates whose perturbation moved some ReLU input across zero.
  std::size_t skipped_kinks = 0;
};

struct GradCheckOptions {
  double step = 1e-5;
  // Denominator floor of the relative error |a - n| / max(|a|, |n|, floor).
  double floor = 1e-6;
  // 0 checks every coordinate; otherwise at most this many per parameter,
  // spread evenly.
  std::size_t max_coords_per_parameter = 0;
  // Five-point stencil instead of the two-point central difference; lets a
  // larger step keep truncation error low while cutting round-off.
  bool fourth_order = false;
};

using LossBuilder = std::function<ad::Var(ad::Tape&)>;

double relative_error(double analytic, double numeric, double floor);

// Compares reverse-mode gradients of the loss produced by `build` against
// central differences for every parameter in `params`. Parameter values are
// restored before returning. Throws std::invalid_argument for step <= 0.
GradCheckResult finite_difference_check(ad::ParameterSet& params, const LossBuilder& build,
                                        const GradCheckOptions& options = {});

}  // namespace narf
