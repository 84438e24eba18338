#pragma once

#include <cstdint>
#include <vector>

#include "ntklab/numerics.hpp"

namespace ntklab {

/// N token matrices (d_s x d each) with scalar targets.
struct Dataset {
  std::vector<Matrix> inputs;
  Vector targets;
  /// Bound used for ||X_n||_F <= sqrt(d_s) * C_x.
  double C_x = 1.0;
  std::uint64_t seed = 0;

  Index N() const { return static_cast<Index>(inputs.size()); }
  Index d_s() const { return inputs.empty() ? 0 : inputs.front().rows(); }
  Index d() const { return inputs.empty() ? 0 : inputs.front().cols(); }

  /// Throws InvalidInput on ragged shapes, non-finite values or a target count mismatch.
  void validate() const;
  /// Largest ||X_n||_F / sqrt(d_s) over the inputs.
  double max_token_scale() const;
  /// True when every ||X_n||_F <= sqrt(d_s) * C_x (up to 1e-12 relative).
  bool satisfies_bound() const;
  /// All inputs stacked vertically: (N*d_s) x d.
  Matrix stacked_inputs() const;
};

/// Gaussian inputs rescaled to ||X_n||_F = sqrt(d_s) C_x, standard-Gaussian targets.
Dataset gen_synthetic(Index N, Index d_s, Index d, double C_x, Rng& rng);

struct RankReport {
  bool full_rank = false;
  double worst_sigma_min = 0.0;
  Index worst_index = 0;
  Vector sigma_min;  // per sample
};

/// Passes iff every X_n has min singular value above tol.
RankReport rank_check(const Dataset& data, double tol);

struct TailPoint {
  double t = 0.0;
  double frequency = 0.0;
};

/// <X_n^T X_n, X_m^T X_m> for every pair n < m, enumerated row-major.
std::vector<double> pair_similarities(const Dataset& data);

/// Empirical frequency of |<X_n^T X_n, X_m^T X_m>| >= t over pairs n < m.
std::vector<TailPoint> similarity_tail(const Dataset& data, const std::vector<double>& t_grid);

/// lambda_min of (1/N) sum_n x_n x_n^T with x_n the sum of the tokens of X_n.
double covariance_min_eig(const Dataset& data);

/// Population value of that covariance for gen_synthetic data: (d_s C_x^2 / d) I.
double synthetic_covariance_eig(Index d_s, Index d, double C_x);

enum class VectorMode { Embedding, Sequence };

/// Embedding: each vector becomes a 1 x d~ input. Sequence: a d~ x 1 input.
Dataset vectorize_mode(const Matrix& vectors, const Vector& targets, VectorMode mode);

struct AssumptionReport {
  RankReport rank;
  std::vector<TailPoint> tail_curve;
  double cov_min_eig = 0.0;
};

AssumptionReport assumption_report(const Dataset& data, const std::vector<double>& t_grid, double rank_tol);

}  // namespace ntklab
