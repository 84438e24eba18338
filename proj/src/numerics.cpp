#include "ntklab/numerics.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numbers>
#include <numeric>
#include <vector>

#include <fmt/format.h>

namespace ntklab {
namespace {

constexpr std::uint64_t kGolden = 0x9E3779B97F4A7C15ULL;

std::uint64_t splitmix_finalize(std::uint64_t z) {
  z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL;
  z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL;
  return z ^ (z >> 31);
}

// Rotates columns p and q of b until they are orthogonal; returns true if a
// rotation was applied.
bool orthogonalize_columns(Eigen::MatrixXd& b, Index p, Index q) {
  const double alpha = b.col(p).squaredNorm();
  const double beta = b.col(q).squaredNorm();
  const double gamma = b.col(p).dot(b.col(q));
  if (gamma == 0.0 || std::abs(gamma) <= 1e-15 * std::sqrt(alpha * beta)) {
    return false;
  }
  const double zeta = (beta - alpha) / (2.0 * gamma);
  const double t = std::copysign(1.0, zeta) / (std::abs(zeta) + std::sqrt(1.0 + zeta * zeta));
  const double c = 1.0 / std::sqrt(1.0 + t * t);
  const double s = c * t;
  for (Index i = 0; i < b.rows(); ++i) {
    const double bp = b(i, p);
    const double bq = b(i, q);
    b(i, p) = c * bp - s * bq;
    b(i, q) = s * bp + c * bq;
  }
  return true;
}

}  // namespace

Rng::Rng(std::uint64_t seed) : seed_(seed), key_(splitmix_finalize(seed + kGolden)) {}

std::uint64_t Rng::next_u64() {
  ++counter_;
  return splitmix_finalize(key_ + counter_ * kGolden);
}

double Rng::uniform() {
  // 53 random mantissa bits, shifted off zero.
  return (static_cast<double>(next_u64() >> 11) + 0.5) * 0x1.0p-53;
}

double Rng::normal() {
  if (has_cached_) {
    has_cached_ = false;
    return cached_;
  }
  const double u1 = uniform();
  const double u2 = uniform();
  const double r = std::sqrt(-2.0 * std::log(u1));
  const double theta = 2.0 * std::numbers::pi * u2;
  cached_ = r * std::sin(theta);
  has_cached_ = true;
  return r * std::cos(theta);
}

std::uint64_t Rng::uniform_index(std::uint64_t n) {
  if (n == 0) throw InvalidInput("uniform_index: n must be positive");
  // Rejection sampling removes modulo bias.
  const std::uint64_t limit = std::numeric_limits<std::uint64_t>::max() -
                              std::numeric_limits<std::uint64_t>::max() % n;
  std::uint64_t x = next_u64();
  while (x >= limit) x = next_u64();
  return x % n;
}

std::uint64_t derive_seed(std::uint64_t seed, std::uint64_t stream) {
  return splitmix_finalize(splitmix_finalize(seed) ^ (stream * kGolden + 0x632BE59BD9B4E019ULL));
}

bool all_finite(const Eigen::Ref<const Matrix>& m) { return m.allFinite(); }

Vector stable_softmax(const Eigen::Ref<const Vector>& v) {
  if (v.size() == 0) throw InvalidInput("stable_softmax: empty input");
  if (!v.allFinite()) throw InvalidInput("stable_softmax: non-finite input");
  const double shift = v.maxCoeff();
  Vector e = (v.array() - shift).exp().matrix();
  return e / e.sum();
}

Matrix softmax_jacobian(const Eigen::Ref<const Vector>& p) {
  if (p.size() == 0) throw InvalidInput("softmax_jacobian: empty input");
  if (!p.allFinite() || (p.array() < -1e-9).any() || std::abs(p.sum() - 1.0) > 1e-9) {
    throw InvalidInput("softmax_jacobian: probability vector is off the simplex");
  }
  Matrix jac = -p * p.transpose();
  jac.diagonal() += p;
  return jac;
}

SymEigen jacobi_eigen(const Matrix& sym, double tol, int max_sweeps) {
  if (sym.rows() != sym.cols()) throw InvalidInput("jacobi_eigen: matrix is not square");
  const Index n = sym.rows();
  Eigen::MatrixXd a = sym.selfadjointView<Eigen::Upper>();
  Eigen::MatrixXd v = Eigen::MatrixXd::Identity(n, n);
  const double scale = a.norm();

  for (int sweep = 0; sweep < max_sweeps; ++sweep) {
    double off = 0.0;
    for (Index p = 0; p < n; ++p)
      for (Index q = p + 1; q < n; ++q) off += a(p, q) * a(p, q);
    if (std::sqrt(2.0 * off) <= tol * scale) break;

    for (Index p = 0; p < n; ++p) {
      for (Index q = p + 1; q < n; ++q) {
        const double apq = a(p, q);
        if (apq == 0.0) continue;
        const double theta = (a(q, q) - a(p, p)) / (2.0 * apq);
        const double t = std::copysign(1.0, theta) / (std::abs(theta) + std::sqrt(theta * theta + 1.0));
        const double c = 1.0 / std::sqrt(t * t + 1.0);
        const double s = t * c;
        for (Index k = 0; k < n; ++k) {
          const double akp = a(k, p);
          const double akq = a(k, q);
          a(k, p) = c * akp - s * akq;
          a(k, q) = s * akp + c * akq;
        }
        for (Index k = 0; k < n; ++k) {
          const double apk = a(p, k);
          const double aqk = a(q, k);
          a(p, k) = c * apk - s * aqk;
          a(q, k) = s * apk + c * aqk;
        }
        for (Index k = 0; k < n; ++k) {
          const double vkp = v(k, p);
          const double vkq = v(k, q);
          v(k, p) = c * vkp - s * vkq;
          v(k, q) = s * vkp + c * vkq;
        }
      }
    }
  }

  std::vector<Index> order(static_cast<std::size_t>(n));
  std::iota(order.begin(), order.end(), Index{0});
  std::stable_sort(order.begin(), order.end(), [&](Index i, Index j) { return a(i, i) < a(j, j); });
  SymEigen out{Vector(n), Matrix(n, n)};
  for (Index k = 0; k < n; ++k) {
    out.values(k) = a(order[static_cast<std::size_t>(k)], order[static_cast<std::size_t>(k)]);
    out.vectors.col(k) = v.col(order[static_cast<std::size_t>(k)]);
  }
  return out;
}

double sym_min_eigen(const Matrix& sym) {
  if (sym.rows() != sym.cols() || sym.size() == 0) {
    throw InvalidInput("sym_min_eigen: matrix must be square and nonempty");
  }
  if (!sym.allFinite()) throw InvalidInput("sym_min_eigen: non-finite entries");
  const double scale = std::max(1.0, sym.cwiseAbs().maxCoeff());
  const double asym = (sym - sym.transpose()).cwiseAbs().maxCoeff();
  if (asym > 1e-9 * scale) {
    throw InvalidInput(fmt::format("sym_min_eigen: asymmetry {:.3g} exceeds tolerance", asym));
  }
  const Matrix half = 0.5 * (sym + sym.transpose());
  return jacobi_eigen(half).values(0);
}

Vector singular_values(const Matrix& m) {
  if (m.size() == 0) throw InvalidInput("singular_values: empty matrix");
  if (!m.allFinite()) throw InvalidInput("singular_values: non-finite entries");
  // Reduce to the square triangular factor of the tall orientation first.
  Eigen::MatrixXd tall = m.rows() >= m.cols() ? Eigen::MatrixXd(m) : Eigen::MatrixXd(m.transpose());
  const Index k = tall.cols();
  Eigen::HouseholderQR<Eigen::MatrixXd> qr(tall);
  Eigen::MatrixXd b = qr.matrixQR().topRows(k).triangularView<Eigen::Upper>();

  for (int sweep = 0; sweep < 100; ++sweep) {
    bool rotated = false;
    for (Index p = 0; p < k; ++p)
      for (Index q = p + 1; q < k; ++q) rotated = orthogonalize_columns(b, p, q) || rotated;
    if (!rotated) break;
  }
  Vector sv = b.colwise().norm().transpose();
  std::sort(sv.data(), sv.data() + sv.size(), std::greater<>());
  return sv;
}

double min_singular_value(const Matrix& m) {
  const Vector sv = singular_values(m);
  return sv(sv.size() - 1);
}

double spectral_norm(const Matrix& m) { return singular_values(m)(0); }

double spectral_norm(const Vector& v) { return v.norm(); }

PowerIterResult power_iter_spectral_norm(const LinearOperator& apply, Index dim, double tol,
                                         int max_iter, std::uint64_t seed) {
  if (dim <= 0) throw InvalidInput("power_iter_spectral_norm: dimension must be positive");
  if (!(tol > 0.0)) throw InvalidInput("power_iter_spectral_norm: tol must be positive");
  Rng rng(seed);
  Vector v = gaussian_vector(dim, 1.0, rng);
  v.normalize();

  double estimate = 0.0;
  double last_change = -1.0;
  for (int it = 1; it <= max_iter; ++it) {
    Vector w = apply(v);
    if (w.size() != dim) throw InvalidInput("power_iter_spectral_norm: operator changed dimension");
    if (!w.allFinite()) throw InvalidInput("power_iter_spectral_norm: operator produced non-finite values");
    const double next = w.norm();
    if (next == 0.0) return {0.0, it};
    const double change = std::abs(next - estimate);
    estimate = next;
    v = w / next;
    if (it > 1 && change <= tol * estimate) {
      // Geometric extrapolation of the remaining error from successive changes.
      if (change == 0.0) return {estimate, it};
      if (last_change > 0.0) {
        const double ratio = change / last_change;
        if (ratio < 1.0 && change * ratio / (1.0 - ratio) <= tol * estimate) return {estimate, it};
      }
    }
    last_change = change;
  }
  throw ConvergenceError(
      fmt::format("power iteration did not converge in {} iterations (last estimate {:.6g})", max_iter, estimate),
      estimate, max_iter);
}

Matrix gaussian_matrix(Index rows, Index cols, double stddev, Rng& rng) {
  if (stddev < 0.0) throw InvalidInput("gaussian_matrix: stddev must be non-negative");
  Matrix m(rows, cols);
  for (Index i = 0; i < m.size(); ++i) m.data()[i] = stddev * rng.normal();
  return m;
}

Vector gaussian_vector(Index n, double stddev, Rng& rng) {
  if (stddev < 0.0) throw InvalidInput("gaussian_vector: stddev must be non-negative");
  Vector v(n);
  for (Index i = 0; i < n; ++i) v(i) = stddev * rng.normal();
  return v;
}

}  // namespace ntklab
