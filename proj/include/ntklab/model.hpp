#pragma once

#include <optional>
#include <string>
#include <vector>

#include "ntklab/data.hpp"
#include "ntklab/numerics.hpp"

namespace ntklab {

struct Dims {
  Index N = 1;
  Index d_s = 1;
  Index d = 1;
  Index d_m = 1;

  void validate() const;
  /// 3 * d_m * d + d_m.
  Index param_count() const { return 3 * d_m * d + d_m; }
  /// Some schemes assume d_m >= d; this is reported, never enforced.
  bool width_at_least_token_dim() const { return d_m >= d; }
};

enum class Pooling { Sum, Average };

/// tau0 scales the query-key logits, tau1 the post-ReLU features.
struct ScalingScheme {
  double tau0 = 1.0;
  double tau1 = 1.0;
  Pooling pooling = Pooling::Sum;

  void validate() const;
  /// tau1, divided by d_s under average pooling.
  double feature_scale(Index d_s) const;
};

enum class InitName { LeCun, He, NTK, Custom };

struct InitScheme {
  InitName name = InitName::LeCun;
  double eta_Q = 1.0;
  double eta_K = 1.0;
  double eta_V = 1.0;
  double eta_O = 1.0;
  /// tau1 paired with the scheme.
  double tau1 = 1.0;

  static InitScheme lecun(const Dims& dims);
  static InitScheme he(const Dims& dims);
  static InitScheme ntk(const Dims& dims);
  static InitScheme named(InitName name, const Dims& dims);

  void validate() const;
};

enum class Tau0Rule { InvSqrtWidth, InvWidth, Custom };

double tau0_for(Tau0Rule rule, Index d_m, double custom = 1.0);

ScalingScheme make_scaling(const InitScheme& init, Tau0Rule rule, Index d_m, Pooling pooling = Pooling::Sum,
                           double custom_tau0 = 1.0);

std::string to_string(InitName name);
std::string to_string(Tau0Rule rule);
std::string to_string(Pooling pooling);
InitName parse_init_name(const std::string& s);
Pooling parse_pooling(const std::string& s);

/// Learnable weights. W_H is fixed to the identity and therefore not stored.
struct ModelParams {
  Matrix W_Q;  // d_m x d
  Matrix W_K;  // d_m x d
  Matrix W_V;  // d_m x d
  Vector w_O;  // d_m
  Dims dims;

  Index d() const { return W_Q.cols(); }
  Index d_m() const { return W_Q.rows(); }
  /// Throws InvalidInput if the four groups disagree with each other or dims.
  void validate() const;
  bool operator==(const ModelParams& other) const;
};

ModelParams init_params(const Dims& dims, const InitScheme& scheme, Rng& rng);

/// Per-sample intermediate values of the forward pass.
struct ForwardTrace {
  Matrix beta;    // d_s x d_s, row i is the attention distribution of token i
  Matrix preact;  // d_s x d_m, row i is W_V X^T beta_i
  Vector f_pre;   // d_m
  double f = 0.0;
};

/// Row-wise softmax of tau0 (X W_Q^T)(X W_K^T)^T.
Matrix attention_rows(const Matrix& x, const ModelParams& params, double tau0);

ForwardTrace forward_trace(const Matrix& x, const ModelParams& params, const ScalingScheme& scaling);
Vector features(const Matrix& x, const ModelParams& params, const ScalingScheme& scaling);
double forward(const Matrix& x, const ModelParams& params, const ScalingScheme& scaling);

/// Row n holds features(X_n).
Matrix batch_features(const Dataset& data, const ModelParams& params, const ScalingScheme& scaling);
/// f(X_n) for every sample.
Vector batch_forward(const Dataset& data, const ModelParams& params, const ScalingScheme& scaling);
/// 1/2 sum_n (f(X_n) - y_n)^2
double loss(const Dataset& data, const ModelParams& params, const ScalingScheme& scaling);

}  // namespace ntklab
