#include "ntklab/kernel.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>

#include <fmt/format.h>

#include "ntklab/grad.hpp"
#include "ntklab/parallel.hpp"

namespace ntklab {

namespace {

// Plain left-to-right accumulation in four lanes. The compiler may not
// reassociate it, so the value depends only on the two arrays.
double fixed_dot(const double* a, const double* b, Index n) {
  double s0 = 0.0, s1 = 0.0, s2 = 0.0, s3 = 0.0;
  Index i = 0;
  for (; i + 4 <= n; i += 4) {
    s0 += a[i] * b[i];
    s1 += a[i + 1] * b[i + 1];
    s2 += a[i + 2] * b[i + 2];
    s3 += a[i + 3] * b[i + 3];
  }
  for (; i < n; ++i) s0 += a[i] * b[i];
  return (s0 + s1) + (s2 + s3);
}

Vector flat_sample_grad(const Dataset& data, Index n, const ModelParams& params, const ScalingScheme& scaling) {
  return flatten(grad_sample(data.inputs[static_cast<std::size_t>(n)], params, scaling));
}

}  // namespace

bool KernelMatrix::is_symmetric(double tol) const {
  return K.rows() == K.cols() && (K - K.transpose()).cwiseAbs().maxCoeff() <= tol;
}

double KernelMatrix::min_eigenvalue() const { return sym_min_eigen(K); }

bool KernelMatrix::is_psd() const { return min_eigenvalue() >= -1e-8 * std::abs(K.trace()); }

std::size_t empirical_ntk_bytes(Index param_count, Index block_size) {
  return static_cast<std::size_t>(block_size + 1) * static_cast<std::size_t>(param_count) * sizeof(double);
}

Index block_size_for_budget(Index N, Index param_count, std::size_t memory_budget) {
  const std::size_t per = static_cast<std::size_t>(param_count) * sizeof(double);
  if (per == 0) return N;
  const std::size_t slots = memory_budget / per;
  if (slots < 2) return 0;
  return std::min<Index>(N, static_cast<Index>(slots - 1));
}

KernelMatrix empirical_ntk(const Dataset& data, const ModelParams& params, const ScalingScheme& scaling,
                           Index block_size, std::size_t memory_budget) {
  if (block_size < 1) throw InvalidInput("empirical_ntk: block_size must be >= 1");
  const Index N = data.N();
  if (N < 1) throw InvalidInput("empirical_ntk: empty dataset");
  const Index P = 3 * params.W_Q.size() + params.w_O.size();
  const Index b = std::min(block_size, N);
  const std::size_t need = empirical_ntk_bytes(P, b);
  if (need > memory_budget) {
    throw ConfigError(fmt::format("empirical_ntk: block of {} gradients needs {} bytes, budget is {}", b, need,
                                  memory_budget));
  }

  KernelMatrix out;
  out.source = KernelSource::Empirical;
  out.K.setZero(N, N);
  std::vector<Vector> block(static_cast<std::size_t>(b));
  for (Index start = 0; start < N; start += b) {
    const Index len = std::min(b, N - start);
    parallel_for(static_cast<std::size_t>(len), [&](std::size_t i) {
      block[i] = flat_sample_grad(data, start + static_cast<Index>(i), params, scaling);
    });
    for (Index i = 0; i < len; ++i)
      for (Index j = i; j < len; ++j)
        out.K(start + i, start + j) = fixed_dot(block[static_cast<std::size_t>(i)].data(),
                                                block[static_cast<std::size_t>(j)].data(), P);
    for (Index m = start + len; m < N; ++m) {
      const Vector g = flat_sample_grad(data, m, params, scaling);
      for (Index i = 0; i < len; ++i)
        out.K(start + i, m) = fixed_dot(block[static_cast<std::size_t>(i)].data(), g.data(), P);
    }
  }
  for (Index i = 0; i < N; ++i)
    for (Index j = 0; j < i; ++j) out.K(i, j) = out.K(j, i);
  return out;
}

double kernel_distance(const Matrix& K, const Matrix& K_tilde) {
  if (K.rows() != K_tilde.rows() || K.cols() != K_tilde.cols()) {
    throw InvalidInput("kernel_distance: shape mismatch");
  }
  const double a = K.norm();
  const double b = K_tilde.norm();
  if (!(a > 0.0) || !(b > 0.0)) throw InvalidInput("kernel_distance: zero kernel");
  // Half the squared distance between the normalized kernels equals 1 - cos
  // and is exactly 0 for identical inputs.
  return 0.5 * (K / a - K_tilde / b).squaredNorm();
}

Matrix limiting_phi_star(const Dataset& data) {
  data.validate();
  Matrix phi(data.N(), data.d());
  for (Index n = 0; n < data.N(); ++n) {
    phi.row(n) = data.inputs[static_cast<std::size_t>(n)].colwise().mean();
  }
  return phi;
}

KernelMatrix limiting_ntk_closed(const Dataset& data) {
  const Matrix phi = limiting_phi_star(data);
  const Index N = phi.rows();
  const double ds2 = static_cast<double>(data.d_s()) * static_cast<double>(data.d_s());
  const Vector norms = phi.rowwise().norm();
  const Matrix gram = phi * phi.transpose();
  KernelMatrix out;
  out.source = KernelSource::LimitingClosed;
  out.K.setZero(N, N);
  for (Index n = 0; n < N; ++n) {
    if (norms(n) == 0.0) out.warnings.push_back(fmt::format("zero token average for sample {}; row set to 0", n));
  }
  constexpr double pi = std::numbers::pi;
  for (Index n = 0; n < N; ++n) {
    for (Index m = n; m < N; ++m) {
      double value = 0.0;
      if (norms(n) > 0.0 && norms(m) > 0.0) {
        const double cosine = std::clamp(gram(n, m) / (norms(n) * norms(m)), -1.0, 1.0);
        const double theta = std::acos(cosine);
        const double relu_term = norms(n) * norms(m) / (2.0 * pi) * (std::sin(theta) + (pi - theta) * cosine);
        const double step_term = (pi - theta) / (2.0 * pi);
        value = ds2 * (relu_term + step_term * gram(n, m));
      }
      out.K(n, m) = value;
      out.K(m, n) = value;
    }
  }
  return out;
}

Matrix limiting_ntk_integrand(const Matrix& phi_star, const Vector& w, Index d_s) {
  if (w.size() != phi_star.cols()) throw InvalidInput("limiting_ntk_integrand: dimension mismatch");
  const double ds2 = static_cast<double>(d_s) * static_cast<double>(d_s);
  const Vector a = phi_star * w;
  const Vector relu = a.cwiseMax(0.0);
  const Vector step = (a.array() > 0.0).cast<double>().matrix();
  return ds2 * (relu * relu.transpose() + (step * step.transpose()).cwiseProduct(phi_star * phi_star.transpose()));
}

MonteCarloKernel limiting_ntk_mc(const Dataset& data, Index samples, Rng& rng) {
  if (samples < 1) throw InvalidInput("limiting_ntk_mc: samples must be >= 1");
  const Matrix phi = limiting_phi_star(data);
  const Index N = phi.rows();
  const Index d = phi.cols();
  const double ds2 = static_cast<double>(data.d_s()) * static_cast<double>(data.d_s());
  const Matrix gram = phi * phi.transpose();
  Matrix sum = Matrix::Zero(N, N);
  Matrix sum_sq = Matrix::Zero(N, N);
  Vector w(d);
  Vector relu(N);
  Vector step(N);
  for (Index s = 0; s < samples; ++s) {
    for (Index j = 0; j < d; ++j) w(j) = rng.normal();
    const Vector a = phi * w;
    for (Index n = 0; n < N; ++n) {
      relu(n) = a(n) > 0.0 ? a(n) : 0.0;
      step(n) = a(n) > 0.0 ? 1.0 : 0.0;
    }
    for (Index n = 0; n < N; ++n) {
      for (Index m = n; m < N; ++m) {
        const double v = ds2 * (relu(n) * relu(m) + step(n) * step(m) * gram(n, m));
        sum(n, m) += v;
        sum_sq(n, m) += v * v;
      }
    }
  }
  MonteCarloKernel out;
  out.mean.source = KernelSource::LimitingMonteCarlo;
  out.mean.samples = samples;
  out.mean.K.resize(N, N);
  out.std_error.resize(N, N);
  const double S = static_cast<double>(samples);
  for (Index n = 0; n < N; ++n) {
    for (Index m = n; m < N; ++m) {
      const double mean = sum(n, m) / S;
      double se = 0.0;
      if (samples > 1) {
        const double var = std::max(0.0, (sum_sq(n, m) - S * mean * mean) / (S - 1.0));
        se = std::sqrt(var / S);
      }
      out.mean.K(n, m) = out.mean.K(m, n) = mean;
      out.std_error(n, m) = out.std_error(m, n) = se;
    }
  }
  return out;
}

double relative_kernel_error(const Matrix& K_emp, const Matrix& K_limit) {
  const double denom = K_limit.norm();
  if (!(denom > 0.0)) throw InvalidInput("relative_kernel_error: zero reference kernel");
  return (K_emp - K_limit).norm() / denom;
}

std::string to_string(KernelSource source) {
  switch (source) {
    case KernelSource::Empirical: return "empirical";
    case KernelSource::LimitingClosed: return "limiting-closed";
    case KernelSource::LimitingMonteCarlo: return "limiting-mc";
  }
  return "empirical";
}

}  // namespace ntklab
