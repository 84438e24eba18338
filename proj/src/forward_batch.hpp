#pragma once

// Shared batched forward pass used by the model, gradient and kernel code.
// Every public entry point routes through here so single-sample and batched
// results agree bit for bit.

#include <span>

#include "ntklab/grad.hpp"
#include "ntklab/model.hpp"

namespace ntklab::detail {

struct BatchForward {
  Index N = 0;
  Index d_s = 0;
  double feature_scale = 1.0;
  Matrix x_all;    // (N d_s) x d
  Matrix q;        // (N d_s) x d_m, X W_Q^T
  Matrix k;        // (N d_s) x d_m, X W_K^T
  Matrix v;        // (N d_s) x d_m, X W_V^T
  Matrix beta;     // (N d_s) x d_s, block n holds the attention rows of sample n
  Matrix preact;   // (N d_s) x d_m
  Matrix active;   // (N d_s) x d_m, 1 where the ReLU is on
  Matrix f_pre;    // N x d_m
  Vector f;        // N
};

/// When `frozen` is non-null it replaces the ReLU pattern, turning the network
/// into the smooth function that agrees with it inside that activation region.
BatchForward run_forward(std::span<const Matrix> inputs, const ModelParams& params, const ScalingScheme& scaling,
                         const Matrix* frozen = nullptr);

/// sum_n weights(n) * grad f(X_n), reusing the intermediates of `fw`.
ParamGrad weighted_backward(const BatchForward& fw, const ModelParams& params, double tau0, const Vector& weights);

}  // namespace ntklab::detail
