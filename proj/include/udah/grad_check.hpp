#pragma once

#include <cstddef>
#include <functional>
#include <span>
#include <string>

#include "udah/autodiff.hpp"

namespace udah::ad {

struct GradCheckOptions {
  double step = 1e-5;
  double tol = 1e-4;
  // Denominator floor of the relative error, so coordinates whose true
  // gradient is ~0 are judged by absolute error instead.
  double scale_floor = 1e-6;
  // 0 checks every coordinate; otherwise an evenly strided subset per tensor.
  std::size_t max_coords_per_tensor = 0;
};

struct GradCheckReport {
  double max_rel_error = 0.0;
  std::size_t worst_tensor = 0;
  std::size_t worst_index = 0;
  double analytic = 0.0;
  double numeric = 0.0;
  std::size_t coordinates = 0;
  bool passed = false;
};

/// Compares tape gradients of `f` against central differences.
///
/// `f` must build the objective on the tape it is given and bind each tensor
/// in `params` through Tape::param, so the checker can both read analytic
/// gradients and perturb the tensors in place. Any randomness inside `f`
/// (dropout masks, Gumbel noise) has to be reseeded per call.
GradCheckReport grad_check(const std::function<Var(Tape&)>& f, std::span<Tensor* const> params,
                           const GradCheckOptions& options = {});

}  // namespace udah::ad
