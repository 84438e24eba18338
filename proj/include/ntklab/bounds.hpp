#pragma once

#include <array>
#include <string>
#include <vector>

#include "ntklab/model.hpp"
#include "ntklab/trainer.hpp"

namespace ntklab {

/// Allowed movement of each weight group away from initialization.
struct Radii {
  double C_Q = 1.0;
  double C_K = 1.0;
  double C_V = 1.0;
  double C_O = 1.0;
};

struct TheoryConstants {
  Radii radii;
  /// ||W^0||_2 + C for each group.
  double lambda_bar_Q = 0.0;
  double lambda_bar_K = 0.0;
  double lambda_bar_V = 0.0;
  double lambda_bar_O = 0.0;
  /// sqrt(N) d_s^{3/2} tau1 C_x, with tau1 the effective feature scale.
  double rho = 0.0;
  double z = 0.0;
  /// Lipschitz constants of the residual, the network Jacobian norm and the Jacobian.
  double c1 = 0.0;
  double c2 = 0.0;
  double c3 = 0.0;
  /// c1 c2 + 2 c3 loss0; steps up to 1 / C_step keep the loss non-increasing.
  double C_step = 0.0;
  double tau0 = 0.0;
  double tau1 = 0.0;
  double C_x = 0.0;
  Index N = 0;
  Index d_s = 0;
};

TheoryConstants theory_constants(const ModelParams& params0, const Dims& dims, const ScalingScheme& scaling,
                                 const Radii& radii, double C_x, double loss0);

/// sigma_min of the N x d_m feature matrix.
double alpha(const Matrix& F_pre0);

struct Inequality {
  double lhs = 0.0;
  double rhs = 0.0;
  bool pass = false;
};

struct ConditionReport {
  double alpha = 0.0;
  /// alpha^2 >= 8 rho max(...) sqrt(2 loss0)
  Inequality width;
  /// alpha^3 >= 32 rho^2 z sqrt(2 loss0) / lambda_bar_O
  Inequality init;
  double gamma_max = 0.0;

  bool pass() const { return width.pass && init.pass; }
};

ConditionReport check_conditions(const TheoryConstants& c, double alpha, double loss0, double tau0);

struct EnvelopeResult {
  std::vector<double> envelope;  // one value per trace record
  bool dominated = false;
  std::vector<std::string> warnings;
};

/// (1 - gamma alpha^2 / 2)^t loss0 at each recorded epoch, and whether the loss stays below it.
EnvelopeResult convergence_envelope(const TrainTrace& trace, double alpha, double gamma);

struct GroupBound {
  double actual = 0.0;
  double bound = 0.0;
  double slack = 0.0;  // bound - actual
};

struct GradientNormReport {
  /// False when some ||W||_2 exceeds its lambda_bar; the bounds then do not apply.
  bool applicable = false;
  std::array<GroupBound, 4> groups{};  // Q, K, V, O
  std::string note;

  bool all_slack_nonnegative() const;
};

GradientNormReport gradient_norm_report(const Dataset& data, const ModelParams& params, const ScalingScheme& scaling,
                                        const TheoryConstants& c);

/// Rows are beta_1(X_n)^T X_n, the first attention row applied to each input.
Matrix attention_features(const Dataset& data, const ModelParams& params, double tau0);

/// min_k (G_kk - sum_{j != k} |G_kj|) with G = Phi Phi^T; never above lambda_min(G).
double gershgorin_lambda_min_lower(const Matrix& Phi);

/// eta_V mu^2 lambda_min(Phi Phi^T) with mu = 1/2, the first Hermite coefficient of ReLU.
double lambda0_diagnostic(double eta_V, const Matrix& Phi);

enum class HessianTarget {
  /// Hessian of f at the first input.
  Network,
  /// Hessian of the training loss.
  Loss,
};

struct HessianEstimate {
  Index d_m = 0;
  double spectral_norm = 0.0;
  int iterations = 0;
  double hvp_step = 0.0;
};

/// Hessian-vector products by central differences of analytic gradients.
/// The ReLU pattern is frozen at params, so the operator is the Hessian of the
/// smooth piece the network agrees with around params.
LinearOperator hessian_operator(const Dataset& data, const ModelParams& params, const ScalingScheme& scaling,
                                double hvp_step, HessianTarget target);

/// Throws ConvergenceError (with the last estimate) if power iteration stalls.
HessianEstimate hessian_norm(const Dataset& data, const ModelParams& params, const ScalingScheme& scaling,
                             double hvp_step = 1e-4, double tol = 1e-6, HessianTarget target = HessianTarget::Network,
                             int max_iter = 20000, std::uint64_t seed = 0);

/// Least-squares slope of log(norm) against log(width).
double fit_log_slope(const std::vector<double>& widths, const std::vector<double>& norms);

struct HessianSweepSetup {
  Index d_s = 4;
  Index d = 1;
  double C_x = 1.0;
  InitName init = InitName::NTK;
  Tau0Rule tau0_rule = Tau0Rule::InvWidth;
  Pooling pooling = Pooling::Sum;
  HessianTarget target = HessianTarget::Network;
  double hvp_step = 1e-4;
  double tol = 1e-6;
};

struct SweepRow {
  Index rep = 0;
  Index d_m = 0;
  double norm = 0.0;
  int iterations = 0;
  bool converged = true;

  bool operator==(const SweepRow&) const = default;
};

struct SlopeResult {
  double slope = 0.0;            // mean over reps
  std::vector<double> per_rep;   // one fitted slope per rep
  std::vector<SweepRow> rows;
};

/// Norms for every (rep, width) pair, with no constraint on the width list.
std::vector<SweepRow> hessian_sweep(const std::vector<Index>& widths, std::uint64_t seed, Index reps,
                                    const HessianSweepSetup& setup = {});

/// Fits one slope per rep over hessian_sweep rows and averages them.
double mean_rep_slope(const std::vector<SweepRow>& rows);

/// For each rep, one single-input dataset and a fresh init per width; the
/// slope is fitted per rep and averaged. Needs >= 4 widths spanning a factor >= 64.
SlopeResult hessian_width_slope(const std::vector<Index>& widths, std::uint64_t seed, Index reps,
                                const HessianSweepSetup& setup = {});

std::string to_string(HessianTarget target);

}  // namespace ntklab
