#pragma once

#include <array>
#include <cmath>
#include <vector>

#include "ntklab/grad.hpp"
#include "ntklab/model.hpp"

namespace ntklab::test {

template <typename T>
struct LoopResult {
  T f = 0;
  std::vector<char> active;  // d_s x d_m, row-major
};

/// Plain-loop forward pass in precision T over a flat parameter vector laid
/// out as flatten() does: W_Q rows, W_K rows, W_V rows, w_O.
template <typename T>
LoopResult<T> loop_forward(const Matrix& x, const std::vector<T>& theta, Index d_m, const ScalingScheme& s) {
  using std::exp;
  using std::max;
  const Index d_s = x.rows();
  const Index d = x.cols();
  const Index block = d_m * d;
  const auto W = [&](int g, Index a, Index j) { return theta[static_cast<std::size_t>(g * block + a * d + j)]; };
  std::vector<std::vector<T>> q(d_s, std::vector<T>(d_m)), k = q, v = q;
  for (Index i = 0; i < d_s; ++i) {
    for (Index a = 0; a < d_m; ++a) {
      T sq = 0, sk = 0, sv = 0;
      for (Index j = 0; j < d; ++j) {
        const T xv = static_cast<T>(x(i, j));
        sq += W(0, a, j) * xv;
        sk += W(1, a, j) * xv;
        sv += W(2, a, j) * xv;
      }
      q[i][a] = sq;
      k[i][a] = sk;
      v[i][a] = sv;
    }
  }
  const T tau0 = static_cast<T>(s.tau0);
  const T c = s.pooling == Pooling::Sum ? static_cast<T>(s.tau1) : static_cast<T>(s.tau1) / static_cast<T>(d_s);
  LoopResult<T> out;
  out.active.assign(static_cast<std::size_t>(d_s * d_m), 0);
  for (Index i = 0; i < d_s; ++i) {
    std::vector<T> w(d_s);
    T mx = -INFINITY;
    for (Index j = 0; j < d_s; ++j) {
      T dot = 0;
      for (Index a = 0; a < d_m; ++a) dot += q[i][a] * k[j][a];
      w[j] = tau0 * dot;
      mx = max(mx, w[j]);
    }
    T z = 0;
    for (T& l : w) z += (l = exp(l - mx));
    for (Index a = 0; a < d_m; ++a) {
      T u = 0;
      for (Index j = 0; j < d_s; ++j) u += w[j] / z * v[j][a];
      if (u > 0) {
        out.active[static_cast<std::size_t>(i * d_m + a)] = 1;
        out.f += c * u * theta[static_cast<std::size_t>(3 * block + a)];
      }
    }
  }
  return out;
}

template <typename T>
std::vector<T> flat_params(const ModelParams& p) {
  const Vector theta = flatten(p);
  return std::vector<T>(theta.data(), theta.data() + theta.size());
}

inline double naive_forward(const Matrix& x, const ModelParams& p, const ScalingScheme& s) {
  return loop_forward<double>(x, flat_params<double>(p), p.d_m(), s).f;
}

struct ExtendedCheck {
  std::array<double, 4> rel_err{};
  std::array<Index, 4> checked{};
  std::array<Index, 4> excluded{};
  double worst() const { return std::max({rel_err[0], rel_err[1], rel_err[2], rel_err[3]}); }
};

/// Central differences of the loop forward in long double, step
/// step * (1 + |theta_j|), on up to per_group random coordinates of each group.
/// Coordinates whose perturbation flips a ReLU are excluded.
inline ExtendedCheck extended_gradient_check(const Matrix& x, const ModelParams& p, const ScalingScheme& s,
                                             Index per_group, Rng& rng, double step = 1e-5, double floor = 1e-8) {
  using LD = long double;
  const Vector analytic = flatten(grad_sample(x, p, s));
  std::vector<LD> theta = flat_params<LD>(p);
  const Index d_m = p.d_m();
  const LoopResult<LD> base = loop_forward<LD>(x, theta, d_m, s);
  const Index block = d_m * p.d();
  const std::array<Index, 4> offsets{0, block, 2 * block, 3 * block};
  const std::array<Index, 4> sizes{block, block, block, d_m};
  ExtendedCheck out;
  for (int g = 0; g < 4; ++g) {
    const Index take = std::min(per_group, sizes[g]);
    std::vector<Index> coords(static_cast<std::size_t>(sizes[g]));
    for (Index i = 0; i < sizes[g]; ++i) coords[static_cast<std::size_t>(i)] = offsets[g] + i;
    for (Index i = 0; i < take; ++i) {
      const Index r = i + static_cast<Index>(rng.uniform_index(static_cast<std::uint64_t>(sizes[g] - i)));
      std::swap(coords[static_cast<std::size_t>(i)], coords[static_cast<std::size_t>(r)]);
    }
    LD max_diff = 0, max_ref = 0;
    for (Index i = 0; i < take; ++i) {
      const auto j = static_cast<std::size_t>(coords[static_cast<std::size_t>(i)]);
      const LD centre = theta[j];
      const LD h = static_cast<LD>(step) * (1 + std::abs(centre));
      theta[j] = centre + h;
      const LoopResult<LD> up = loop_forward<LD>(x, theta, d_m, s);
      theta[j] = centre - h;
      const LoopResult<LD> dn = loop_forward<LD>(x, theta, d_m, s);
      theta[j] = centre;
      if (up.active != base.active || dn.active != base.active) {
        ++out.excluded[g];
        continue;
      }
      const LD fd = (up.f - dn.f) / (2 * h);
      max_diff = std::max(max_diff, std::abs(static_cast<LD>(analytic(static_cast<Index>(j))) - fd));
      max_ref = std::max(max_ref, std::abs(fd));
      ++out.checked[g];
    }
    out.rel_err[g] = static_cast<double>(max_diff / std::max(max_ref, static_cast<LD>(floor)));
  }
  return out;
}

}  // namespace ntklab::test
