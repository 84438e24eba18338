#include <doctest.h>

#include <numbers>

#include "ntklab/grad.hpp"
#include "ntklab/kernel.hpp"

using namespace ntklab;

namespace {

// Gaussian expectations over the plane spanned by a and b, by quadrature on
// the angle; the radial parts integrate to 2 (relu products) and 1 (steps).
double limit_entry_by_quadrature(const Vector& a, const Vector& b, Index d_s) {
  const double na = a.norm();
  const Vector e1 = a / na;
  Vector rest = b - b.dot(e1) * e1;
  const double u = b.dot(e1);
  const double v = rest.norm();
  const int steps = 400000;
  double relu = 0.0, step = 0.0;
  for (int k = 0; k < steps; ++k) {
    const double phi = 2.0 * std::numbers::pi * (k + 0.5) / steps;
    const double pa = na * std::cos(phi);
    const double pb = u * std::cos(phi) + v * std::sin(phi);
    if (pa > 0 && pb > 0) {
      relu += pa * pb;
      step += 1.0;
    }
  }
  relu *= 2.0 / steps;
  step /= steps;
  return static_cast<double>(d_s * d_s) * (relu + step * a.dot(b));
}

struct Setup {
  Dataset data;
  ModelParams p;
  ScalingScheme s;
};

Setup setup(Index N, Index d_m, std::uint64_t seed) {
  Rng rng(seed);
  Setup out;
  out.data = gen_synthetic(N, 3, 4, 1.0, rng);
  const Dims dims{N, 3, 4, d_m};
  const InitScheme scheme = InitScheme::ntk(dims);
  out.s = make_scaling(scheme, Tau0Rule::InvWidth, d_m);
  out.p = init_params(dims, scheme, rng);
  return out;
}

}  // namespace

TEST_CASE("empirical NTK equals the Gram matrix of per-sample gradients") {
  const Setup u = setup(9, 16, 61);
  Matrix J(9, u.p.dims.param_count());
  for (Index n = 0; n < 9; ++n) J.row(n) = flatten(grad_sample(u.data.inputs[n], u.p, u.s)).transpose();
  const Matrix ref = J * J.transpose();
  const KernelMatrix K = empirical_ntk(u.data, u.p, u.s, 4);
  CHECK((K.K - ref).cwiseAbs().maxCoeff() < 1e-12 * ref.cwiseAbs().maxCoeff());
  CHECK(K.is_symmetric(0.0));
  CHECK(K.is_psd());
}

TEST_CASE("empirical NTK does not depend on the block size") {
  const Setup u = setup(11, 24, 62);
  const Matrix K1 = empirical_ntk(u.data, u.p, u.s, 1).K;
  for (Index b : {2, 3, 5, 11, 40}) CHECK(empirical_ntk(u.data, u.p, u.s, b).K == K1);
}

TEST_CASE("empirical NTK enforces its memory budget") {
  const Setup u = setup(11, 24, 63);
  const Index P = u.p.dims.param_count();
  CHECK(empirical_ntk_bytes(P, 4) == 5 * static_cast<std::size_t>(P) * 8);
  CHECK_THROWS_AS(empirical_ntk(u.data, u.p, u.s, 4, empirical_ntk_bytes(P, 4) - 1), ConfigError);
  CHECK_NOTHROW(empirical_ntk(u.data, u.p, u.s, 4, empirical_ntk_bytes(P, 4)));
  CHECK(block_size_for_budget(11, P, empirical_ntk_bytes(P, 3)) == 3);
  CHECK(block_size_for_budget(11, P, 1) == 0);
  CHECK(block_size_for_budget(11, P, std::size_t{1} << 40) == 11);
}

TEST_CASE("kernel distance properties") {
  Rng rng(64);
  for (int trial = 0; trial < 30; ++trial) {
    const Matrix a = gaussian_matrix(6, 6, 1.0, rng);
    const Matrix K = a * a.transpose();
    const Matrix b = gaussian_matrix(6, 6, 1.0, rng);
    const Matrix L = b * b.transpose();
    CHECK(kernel_distance(K, K) == doctest::Approx(0.0).scale(1.0).epsilon(1e-15));
    CHECK(kernel_distance(K, 3.7 * K) == doctest::Approx(0.0).scale(1.0).epsilon(1e-15));
    const double d = kernel_distance(K, L);
    CHECK(d >= 0.0);
    CHECK(d <= 1.0);
    CHECK(kernel_distance(L, K) == doctest::Approx(d).epsilon(1e-14));
  }
  CHECK_THROWS_AS(kernel_distance(Matrix::Zero(2, 2), Matrix::Identity(2, 2)), InvalidInput);
  CHECK_THROWS_AS(kernel_distance(Matrix::Identity(2, 2), Matrix::Identity(3, 3)), InvalidInput);
}

TEST_CASE("token average features") {
  Rng rng(65);
  const Dataset data = gen_synthetic(4, 5, 3, 1.0, rng);
  const Matrix phi = limiting_phi_star(data);
  for (Index n = 0; n < 4; ++n) {
    for (Index j = 0; j < 3; ++j) {
      double s = 0;
      for (Index i = 0; i < 5; ++i) s += data.inputs[n](i, j);
      CHECK(phi(n, j) == doctest::Approx(s / 5.0).epsilon(1e-14));
    }
  }
}

TEST_CASE("closed-form limiting NTK matches angular quadrature") {
  Rng rng(66);
  const Dataset data = gen_synthetic(5, 3, 4, 1.0, rng);
  const Matrix phi = limiting_phi_star(data);
  const KernelMatrix K = limiting_ntk_closed(data);
  CHECK(K.warnings.empty());
  for (Index n = 0; n < 5; ++n) {
    for (Index m = n; m < 5; ++m) {
      const double ref = limit_entry_by_quadrature(phi.row(n).transpose(), phi.row(m).transpose(), 3);
      CHECK(K.K(n, m) == doctest::Approx(ref).epsilon(1e-6));
    }
  }
  CHECK(K.is_psd());
}

TEST_CASE("single-sample limit diagonal is d_s^2 times the squared token-average norm") {
  Rng rng(67);
  const Dataset data = gen_synthetic(1, 4, 6, 1.0, rng);
  const double sq = limiting_phi_star(data).row(0).squaredNorm();
  CHECK(limiting_ntk_closed(data).K(0, 0) == doctest::Approx(16.0 * sq).epsilon(1e-13));
}

TEST_CASE("zero token average gives a zero row with a warning") {
  Dataset data;
  Matrix x(2, 2);
  x << 1.0, -1.0, -1.0, 1.0;
  data.inputs = {x, Matrix::Identity(2, 2)};
  data.targets = Vector::Zero(2);
  const KernelMatrix K = limiting_ntk_closed(data);
  CHECK(K.warnings.size() == 1);
  CHECK(K.K.row(0).cwiseAbs().maxCoeff() == 0.0);
  CHECK(K.K(1, 1) > 0.0);
}

TEST_CASE("Monte Carlo limit agrees with the closed form") {
  Rng rng(68);
  const Dataset data = gen_synthetic(6, 3, 4, 1.0, rng);
  const KernelMatrix closed = limiting_ntk_closed(data);
  Rng mc_rng(69);
  const MonteCarloKernel mc = limiting_ntk_mc(data, 40000, mc_rng);
  CHECK(mc.mean.samples == 40000);
  for (Index n = 0; n < 6; ++n) {
    for (Index m = 0; m < 6; ++m) {
      REQUIRE(mc.std_error(n, m) > 0.0);
      CHECK(std::abs(mc.mean.K(n, m) - closed.K(n, m)) / mc.std_error(n, m) < 5.0);
    }
  }
  Rng again(69);
  CHECK(limiting_ntk_mc(data, 40000, again).mean.K == mc.mean.K);
}

TEST_CASE("empirical NTK approaches the limit as width grows") {
  const Setup narrow = setup(6, 32, 70);
  const Setup wide = setup(6, 4096, 70);
  const Matrix limit = limiting_ntk_closed(narrow.data).K;
  REQUIRE(wide.data.inputs[0] == narrow.data.inputs[0]);
  const double e_narrow = relative_kernel_error(empirical_ntk(narrow.data, narrow.p, narrow.s, 6).K, limit);
  const double e_wide = relative_kernel_error(empirical_ntk(wide.data, wide.p, wide.s, 6).K, limit);
  CHECK(e_wide < e_narrow);
  CHECK(e_wide < 0.1);
}
