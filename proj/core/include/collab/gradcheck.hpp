#pragma once

#include <cstddef>
#include <functional>
#include <span>
#include <string>
#include <vector>

#include "collab/tensor.hpp"

namespace collab {

struct GradCheckReport {
  double max_rel_error = 0.0;
  std::size_t coordinates = 0;
  // Location of the worst coordinate.
  std::size_t worst_param = 0;
  std::size_t worst_index = 0;
  double worst_analytic = 0.0;
  double worst_numeric = 0.0;
  // Coordinates whose +-h step crossed a ReLU or pooling boundary and were
  // re-measured with a smaller step, and those still crossing at h / 1000.
  std::size_t kinks_refined = 0;
  std::size_t kinks_unresolved = 0;
};

/// Compares reverse-mode gradients of `f` against central differences
///   (f(theta + h e_k) - f(theta - h e_k)) / 2h
/// for every coordinate of every tensor in `params`. The per-coordinate
/// error is |analytic - numeric| / max(1e-8, |analytic| + |numeric|).
///
/// The derivative of a piecewise-linear network is only measured by a step
/// that stays on one linear piece, so when either perturbed evaluation takes
/// a different ReLU/max-pool branch than the base point the coordinate is
/// re-measured with h/10, h/100, h/1000. Errors are reported either way.
///
/// `f` must rebuild its graph from the current parameter values on each
/// call and be deterministic; two evaluations at the unperturbed point that
/// differ bitwise raise ErrorKind::invalid_check.
template <typename T>
GradCheckReport finite_diff_check(const std::function<Tensor<T>()>& f,
                                  std::span<Tensor<T>> params, double h);

/// Variant for objectives with stop-gradient targets: the analytic gradient
/// comes from `f_grad` while the differences use `f_value`, which must hold
/// those targets fixed at their unperturbed values. Both must agree in value
/// at the base point (1e-12 relative in 64-bit), else ErrorKind::invalid_check.
template <typename T>
GradCheckReport finite_diff_check(const std::function<Tensor<T>()>& f_grad,
                                  const std::function<Tensor<T>()>& f_value,
                                  std::span<Tensor<T>> params, double h);

template <typename T>
double finite_diff_check(const std::function<Tensor<T>()>& f, Tensor<T>& theta, double h);

}  // namespace collab
