#pragma once

#include <cstdint>
#include <functional>

#include <Eigen/Dense>

#include "ntklab/errors.hpp"

namespace ntklab {

using Index = Eigen::Index;
using Matrix = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using Vector = Eigen::VectorXd;

/// Counter-based 64-bit generator. Sample k of a stream is a pure function of
/// (seed, k), so sequences are identical on every platform.
class Rng {
 public:
  explicit Rng(std::uint64_t seed);

  std::uint64_t seed() const noexcept { return seed_; }
  std::uint64_t counter() const noexcept { return counter_; }

  std::uint64_t next_u64();
  /// Uniform on the open interval (0, 1).
  double uniform();
  /// Standard normal via Box-Muller; the second variate is cached.
  double normal();
  /// Uniform integer in [0, n).
  std::uint64_t uniform_index(std::uint64_t n);

 private:
  std::uint64_t seed_;
  std::uint64_t key_;
  std::uint64_t counter_ = 0;
  double cached_ = 0.0;
  bool has_cached_ = false;
};

/// Mixes a seed with a stream label so independent consumers get disjoint streams.
std::uint64_t derive_seed(std::uint64_t seed, std::uint64_t stream);

Vector stable_softmax(const Eigen::Ref<const Vector>& v);

/// diag(p) - p p^T. Throws InvalidInput if p is off the simplex by more than 1e-9.
Matrix softmax_jacobian(const Eigen::Ref<const Vector>& p);

struct SymEigen {
  Vector values;   // ascending
  Matrix vectors;  // column j pairs with values(j)
};

/// Cyclic Jacobi eigendecomposition of a symmetric matrix (upper triangle is read).
SymEigen jacobi_eigen(const Matrix& sym, double tol = 1e-15, int max_sweeps = 100);

/// Smallest eigenvalue of (S + S^T)/2; S must be symmetric within 1e-9 (relative to its scale).
double sym_min_eigen(const Matrix& sym);

/// Singular values (descending) via one-sided Jacobi on the short side.
Vector singular_values(const Matrix& m);
double min_singular_value(const Matrix& m);
double spectral_norm(const Matrix& m);
double spectral_norm(const Vector& v);

using LinearOperator = std::function<Vector(const Vector&)>;

struct PowerIterResult {
  double value = 0.0;
  int iterations = 0;
};

/// Largest |eigenvalue| of a symmetric operator. The estimate is ||A v_k|| for a
/// normalized iterate, which also converges when +lambda and -lambda pair up.
/// Stops once the extrapolated remaining error is below tol relative.
PowerIterResult power_iter_spectral_norm(const LinearOperator& apply, Index dim,
                                         double tol = 1e-6, int max_iter = 10000,
                                         std::uint64_t seed = 0);

Matrix gaussian_matrix(Index rows, Index cols, double stddev, Rng& rng);
Vector gaussian_vector(Index n, double stddev, Rng& rng);

bool all_finite(const Eigen::Ref<const Matrix>& m);

}  // namespace ntklab
