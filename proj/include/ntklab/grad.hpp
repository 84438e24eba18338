#pragma once

#include <array>
#include <functional>
#include <span>

#include "ntklab/model.hpp"

namespace ntklab {

/// Gradient with the same layout as ModelParams.
struct ParamGrad {
  Matrix g_WQ;
  Matrix g_WK;
  Matrix g_WV;
  Vector g_wO;

  static ParamGrad zeros(const ModelParams& like);
  ParamGrad& operator+=(const ParamGrad& other);
  ParamGrad& operator*=(double s);
  bool all_finite() const;
  /// Frobenius norms in the order Q, K, V, O.
  std::array<double, 4> group_norms() const;
};

/// Gradient of forward(X) with respect to all four weight groups.
ParamGrad grad_sample(const Matrix& x, const ModelParams& params, const ScalingScheme& scaling);

/// Gradient of loss(): sum_n (f_n - y_n) grad_sample(X_n).
ParamGrad grad_loss(const Dataset& data, const ModelParams& params, const ScalingScheme& scaling);

/// sum_n weights(n) grad f(X_n). With `frozen` set, the ReLU pattern is held
/// fixed at that (N*d_s) x d_m 0/1 matrix instead of being read off the preactivations.
ParamGrad weighted_grad(std::span<const Matrix> inputs, const Vector& weights, const ModelParams& params,
                        const ScalingScheme& scaling, const Matrix* frozen = nullptr);

/// 0/1 matrix of active ReLUs, (N*d_s) x d_m, samples stacked in order.
Matrix activation_pattern(std::span<const Matrix> inputs, const ModelParams& params, const ScalingScheme& scaling);

/// Fixed order: W_Q rows, W_K rows, W_V rows, w_O.
Vector flatten(const ModelParams& params);
Vector flatten(const ParamGrad& grad);
ModelParams unflatten(const Vector& theta, const Dims& dims);
ParamGrad unflatten_grad(const Vector& theta, const Dims& dims);
/// Reference to flat coordinate j of params, without copying.
double& param_at(ModelParams& params, Index j);

using ParamFunction = std::function<double(const ModelParams&)>;

/// Central differences with per-coordinate step h_j = step * (1 + |theta_j|).
ParamGrad fd_grad_oracle(const ParamFunction& fn, const ModelParams& params, double step);
/// Same, for one flat coordinate.
double fd_coordinate(const ParamFunction& fn, const ModelParams& params, Index j, double step);

struct GradCheckReport {
  /// max |analytic - fd| / max(max |fd|, floor) over checked coordinates of each group.
  std::array<double, 4> rel_err{};
  std::array<Index, 4> checked{};
  std::array<Index, 4> excluded{};
  double worst() const;
};

/// Compares grad_sample with central differences of forward on up to
/// `per_group` coordinates of each group (all of them if the group is smaller).
/// Coordinates whose perturbation flips any ReLU are excluded.
GradCheckReport check_sample_gradient(const Matrix& x, const ModelParams& params, const ScalingScheme& scaling,
                                      Index per_group, Rng& rng, double step = 1e-5, double floor = 1e-8);

}  // namespace ntklab
