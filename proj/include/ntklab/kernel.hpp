#pragma once

#include <cstddef>
#include <string>
#include <vector>

#include "ntklab/model.hpp"

namespace ntklab {

enum class KernelSource { Empirical, LimitingClosed, LimitingMonteCarlo };

struct KernelMatrix {
  Matrix K;  // N x N
  KernelSource source = KernelSource::Empirical;
  Index epoch = 0;    // empirical kernels only
  Index samples = 0;  // Monte Carlo kernels only
  std::vector<std::string> warnings;

  bool is_symmetric(double tol = 1e-9) const;
  double min_eigenvalue() const;
  /// min eigenvalue >= -1e-8 * trace
  bool is_psd() const;
};

/// Default cap on gradient storage for empirical_ntk: 1 GiB.
inline constexpr std::size_t kDefaultKernelMemory = std::size_t{1} << 30;

/// Bytes held at peak by empirical_ntk: (block + 1) gradients of param_count doubles.
std::size_t empirical_ntk_bytes(Index param_count, Index block_size);

/// K_nm = <grad f(X_n), grad f(X_m)>. Gradients are held block_size at a time,
/// and every entry is one fixed-order dot product, so the result does not
/// depend on block_size. Throws ConfigError before any compute if the peak
/// storage would exceed memory_budget bytes.
KernelMatrix empirical_ntk(const Dataset& data, const ModelParams& params, const ScalingScheme& scaling,
                           Index block_size, std::size_t memory_budget = kDefaultKernelMemory);

/// Largest block that fits the budget, clamped to [1, N]; 0 if even one block does not fit.
Index block_size_for_budget(Index N, Index param_count, std::size_t memory_budget = kDefaultKernelMemory);

/// 1 - <K, K~>_F / (||K||_F ||K~||_F).
double kernel_distance(const Matrix& K, const Matrix& K_tilde);

/// Row n is the token average (1/d_s) X_n^T 1.
Matrix limiting_phi_star(const Dataset& data);

/// Infinite-width NTK under sum pooling:
/// d_s^2 (E[relu(a.w) relu(b.w)] + E[step(a.w) step(b.w)] <a, b>), w ~ N(0, I).
KernelMatrix limiting_ntk_closed(const Dataset& data);

/// The same integrand evaluated at one draw w.
Matrix limiting_ntk_integrand(const Matrix& phi_star, const Vector& w, Index d_s);

struct MonteCarloKernel {
  KernelMatrix mean;
  Matrix std_error;  // per entry
};

MonteCarloKernel limiting_ntk_mc(const Dataset& data, Index samples, Rng& rng);

/// ||K_emp - K_limit||_F / ||K_limit||_F
double relative_kernel_error(const Matrix& K_emp, const Matrix& K_limit);

std::string to_string(KernelSource source);

}  // namespace ntklab
