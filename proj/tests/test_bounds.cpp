#include <doctest.h>

#include <Eigen/Eigenvalues>

#include "ntklab/bounds.hpp"
#include "ntklab/grad.hpp"

using namespace ntklab;

namespace {

double exact_min_eig(const Matrix& G) {
  return Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd>(Eigen::MatrixXd(G)).eigenvalues()(0);
}

// Hessian of f at x from second differences of the forward pass alone.
Matrix dense_forward_hessian(const Matrix& x, const ModelParams& p, const ScalingScheme& s, double h) {
  const Index P = p.dims.param_count();
  Matrix H(P, P);
  ModelParams w = p;
  const auto f = [&]() { return forward(x, w, s); };
  const double f0 = f();
  for (Index i = 0; i < P; ++i) {
    for (Index j = i; j < P; ++j) {
      double& a = param_at(w, i);
      const double ai = a;
      double value;
      if (i == j) {
        a = ai + h;
        const double up = f();
        a = ai - h;
        const double dn = f();
        a = ai;
        value = (up - 2 * f0 + dn) / (h * h);
      } else {
        double& b = param_at(w, j);
        const double bj = b;
        double acc = 0;
        for (int si : {1, -1}) {
          for (int sj : {1, -1}) {
            param_at(w, i) = ai + si * h;
            param_at(w, j) = bj + sj * h;
            acc += si * sj * f();
          }
        }
        param_at(w, i) = ai;
        param_at(w, j) = bj;
        value = acc / (4 * h * h);
      }
      H(i, j) = H(j, i) = value;
    }
  }
  return H;
}

}  // namespace

TEST_CASE("alpha is the smallest singular value, and zero when width < samples") {
  Rng rng(71);
  const Matrix F = gaussian_matrix(5, 9, 1.0, rng);
  const Eigen::JacobiSVD<Eigen::MatrixXd> svd{Eigen::MatrixXd(F)};
  CHECK(alpha(F) == doctest::Approx(svd.singularValues()(4)).epsilon(1e-10));
  CHECK(alpha(gaussian_matrix(9, 5, 1.0, rng)) == 0.0);
  CHECK_THROWS_AS(alpha(Matrix(0, 0)), InvalidInput);
}

TEST_CASE("Gershgorin bound never exceeds the exact smallest eigenvalue") {
  Rng rng(72);
  for (int trial = 0; trial < 200; ++trial) {
    const Index N = 1 + static_cast<Index>(rng.uniform_index(12));
    const Index d = 1 + static_cast<Index>(rng.uniform_index(30));
    const Matrix phi = gaussian_matrix(N, d, 0.1 + rng.uniform(), rng);
    const double lo = gershgorin_lambda_min_lower(phi);
    CHECK(lo <= exact_min_eig(phi * phi.transpose()) + 1e-12 * (1 + phi.squaredNorm()));
  }
  const Matrix orth = Matrix::Identity(4, 6) * 3.0;
  CHECK(gershgorin_lambda_min_lower(orth) == doctest::Approx(9.0));
}

TEST_CASE("Gershgorin bound holds on attention features") {
  Rng rng(73);
  for (int trial = 0; trial < 20; ++trial) {
    const Dataset data = gen_synthetic(8, 4, 20, 1.0, rng);
    const Dims dims{8, 4, 20, 64};
    const InitScheme scheme = InitScheme::lecun(dims);
    const ModelParams p = init_params(dims, scheme, rng);
    const Matrix phi = attention_features(data, p, 1.0 / 8.0);
    for (Index n = 0; n < 8; ++n) {
      const Matrix beta = attention_rows(data.inputs[n], p, 1.0 / 8.0);
      CHECK((phi.row(n) - beta.row(0) * data.inputs[n]).cwiseAbs().maxCoeff() < 1e-15);
    }
    const double exact = exact_min_eig(phi * phi.transpose());
    CHECK(gershgorin_lambda_min_lower(phi) <= exact + 1e-12);
    CHECK(lambda0_diagnostic(scheme.eta_V, phi) == doctest::Approx(scheme.eta_V * 0.25 * exact).epsilon(1e-8));
  }
}

TEST_CASE("theory constants hang together") {
  Rng rng(74);
  const Dataset data = gen_synthetic(10, 3, 8, 1.0, rng);
  const Dims dims{10, 3, 8, 50};
  const InitScheme scheme = InitScheme::lecun(dims);
  const ScalingScheme s = make_scaling(scheme, Tau0Rule::InvSqrtWidth, 50);
  const ModelParams p = init_params(dims, scheme, rng);
  const double l0 = loss(data, p, s);
  const Radii radii{0.5, 1.0, 2.0, 3.0};
  const TheoryConstants c = theory_constants(p, dims, s, radii, 1.0, l0);
  const Eigen::JacobiSVD<Eigen::MatrixXd> svd{Eigen::MatrixXd(p.W_V)};
  CHECK(c.lambda_bar_V == doctest::Approx(svd.singularValues()(0) + 2.0));
  CHECK(c.lambda_bar_O == doctest::Approx(p.w_O.norm() + 3.0));
  CHECK(c.rho == doctest::Approx(std::sqrt(10.0) * std::pow(3.0, 1.5)));
  CHECK(c.C_step == doctest::Approx(c.c1 * c.c2 + 2 * c.c3 * l0));
  const ConditionReport rep = check_conditions(c, alpha(batch_features(data, p, s)), l0, s.tau0);
  CHECK(rep.gamma_max == doctest::Approx(1.0 / c.C_step));
  CHECK(rep.width.lhs == doctest::Approx(rep.alpha * rep.alpha));
  CHECK(rep.init.rhs == doctest::Approx(32 * c.rho * c.rho * c.z * std::sqrt(2 * l0) / c.lambda_bar_O));

  // Average pooling shrinks the effective feature scale, and rho with it.
  const ScalingScheme avg = make_scaling(scheme, Tau0Rule::InvSqrtWidth, 50, Pooling::Average);
  CHECK(theory_constants(p, dims, avg, radii, 1.0, l0).rho == doctest::Approx(c.rho / 3.0));

  // With zero loss the initialization condition is met by any positive alpha.
  const ConditionReport zero = check_conditions(c, 1e-6, 0.0, s.tau0);
  CHECK(zero.pass());
}

TEST_CASE("gradient norms stay under their caps") {
  Rng rng(75);
  const InitName inits[] = {InitName::LeCun, InitName::He, InitName::NTK};
  for (int trial = 0; trial < 30; ++trial) {
    const Index N = 1 + static_cast<Index>(rng.uniform_index(10));
    const Index d_s = 1 + static_cast<Index>(rng.uniform_index(6));
    const Index d = 1 + static_cast<Index>(rng.uniform_index(12));
    const Index d_m = 4 + static_cast<Index>(rng.uniform_index(100));
    const double C_x = 0.2 + 2.0 * rng.uniform();
    const Dataset data = gen_synthetic(N, d_s, d, C_x, rng);
    const Dims dims{N, d_s, d, d_m};
    const InitScheme scheme = InitScheme::named(inits[trial % 3], dims);
    const ScalingScheme s = make_scaling(scheme, trial % 2 ? Tau0Rule::InvWidth : Tau0Rule::InvSqrtWidth, d_m,
                                         trial % 4 < 2 ? Pooling::Sum : Pooling::Average);
    const ModelParams p = init_params(dims, scheme, rng);
    const TheoryConstants c = theory_constants(p, dims, s, Radii{}, C_x, loss(data, p, s));
    const GradientNormReport rep = gradient_norm_report(data, p, s, c);
    REQUIRE(rep.applicable);
    CHECK(rep.all_slack_nonnegative());
  }
}

TEST_CASE("envelope on a hand-made trace") {
  TrainTrace t;
  for (Index e = 0; e <= 3; ++e) t.records.push_back({e, std::pow(0.5, static_cast<double>(e)), {}, {}, {}});
  const EnvelopeResult ok = convergence_envelope(t, 1.0, 1.0);  // rate 1/2
  CHECK(ok.dominated);
  CHECK(ok.envelope[3] == doctest::Approx(0.125));
  const EnvelopeResult tight = convergence_envelope(t, 1.2, 1.0);
  CHECK_FALSE(tight.dominated);
  const EnvelopeResult degenerate = convergence_envelope(t, 2.0, 1.0);
  CHECK_FALSE(degenerate.dominated);
  CHECK(degenerate.warnings.size() == 1);
}

TEST_CASE("Hessian norm matches a dense second-difference oracle") {
  for (std::uint64_t seed : {81u, 82u, 83u}) {
    Rng rng(seed);
    const Dataset data = gen_synthetic(1, 4, 1, 1.0, rng);
    const Dims dims{1, 4, 1, 16};  // 64 parameters
    const InitScheme scheme = InitScheme::ntk(dims);
    const ScalingScheme s = make_scaling(scheme, Tau0Rule::InvWidth, 16);
    const ModelParams p = init_params(dims, scheme, rng);
    const Matrix preact = forward_trace(data.inputs[0], p, s).preact;
    if (preact.cwiseAbs().minCoeff() < 1e-2) continue;  // too close to a kink for the oracle step
    const Matrix H = dense_forward_hessian(data.inputs[0], p, s, 1e-4);
    const Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es{Eigen::MatrixXd(H), Eigen::EigenvaluesOnly};
    const double ref = es.eigenvalues().cwiseAbs().maxCoeff();
    const HessianEstimate est = hessian_norm(data, p, s, 1e-4, 1e-10, HessianTarget::Network, 20000, 1);
    CHECK(est.spectral_norm == doctest::Approx(ref).epsilon(1e-4));
    CHECK(est.d_m == 16);
  }
}

TEST_CASE("Hessian-vector products are symmetric and linear") {
  Rng rng(84);
  const Dataset data = gen_synthetic(3, 3, 2, 1.0, rng);
  const Dims dims{3, 3, 2, 10};
  const InitScheme scheme = InitScheme::lecun(dims);
  const ScalingScheme s = make_scaling(scheme, Tau0Rule::InvSqrtWidth, 10);
  const ModelParams p = init_params(dims, scheme, rng);
  for (HessianTarget target : {HessianTarget::Network, HessianTarget::Loss}) {
    const LinearOperator H = hessian_operator(data, p, s, 1e-4, target);
    const Vector u = gaussian_vector(dims.param_count(), 1.0, rng);
    const Vector v = gaussian_vector(dims.param_count(), 1.0, rng);
    const double uHv = u.dot(H(v));
    CHECK(uHv == doctest::Approx(v.dot(H(u))).epsilon(1e-6));
    CHECK((H(2.0 * v) - 2.0 * H(v)).norm() < 1e-6 * (1 + H(v).norm()));
  }
}

TEST_CASE("log-log slope fit recovers an injected power law") {
  std::vector<double> w, n;
  Rng rng(85);
  for (double x = 64; x <= 4096; x *= 2) {
    w.push_back(x);
    n.push_back(3.0 * std::pow(x, -0.5) * std::exp(0.01 * rng.normal()));
  }
  CHECK(fit_log_slope(w, n) == doctest::Approx(-0.5).epsilon(0.05));
  std::vector<double> exact;
  for (double x : w) exact.push_back(7.0 * std::pow(x, -0.5));
  CHECK(fit_log_slope(w, exact) == doctest::Approx(-0.5).epsilon(1e-12));
  CHECK_THROWS_AS(fit_log_slope({1.0}, {1.0}), InvalidInput);
}

TEST_CASE("width sweep preconditions") {
  CHECK_THROWS_AS(hessian_width_slope({64, 128, 256}, 1, 1), InvalidInput);
  CHECK_THROWS_AS(hessian_width_slope({64, 128, 256, 512}, 1, 1), InvalidInput);
  const auto rows = hessian_sweep({8}, 1, 2);
  CHECK(rows.size() == 2);
  CHECK(rows[0].norm > 0.0);
  CHECK(hessian_sweep({8, 16}, 3, 1) == hessian_sweep({8, 16}, 3, 1));
}

TEST_CASE("rho is one in the unit case") {
  Rng rng(86);
  const Dims dims{1, 1, 3, 5};
  const InitScheme scheme = InitScheme::lecun(dims);
  const ScalingScheme s = make_scaling(scheme, Tau0Rule::InvWidth, 5);
  const ModelParams p = init_params(dims, scheme, rng);
  CHECK(theory_constants(p, dims, s, Radii{}, 1.0, 0.3).rho == doctest::Approx(1.0));
}

TEST_CASE("weight caps agree with an independent power iteration") {
  Rng rng(87);
  const Dims dims{4, 3, 20, 200};
  const InitScheme scheme = InitScheme::he(dims);
  const ModelParams p = init_params(dims, scheme, rng);
  const ScalingScheme s = make_scaling(scheme, Tau0Rule::InvSqrtWidth, 200);
  const TheoryConstants c = theory_constants(p, dims, s, Radii{}, 1.0, 1.0);
  const auto top = [](const Matrix& W) {
    const Matrix G = W.transpose() * W;
    return std::sqrt(power_iter_spectral_norm([&](const Vector& v) { return Vector(G * v); }, G.rows(), 1e-14,
                                              100000, 3)
                         .value);
  };
  CHECK(c.lambda_bar_Q - 1.0 == doctest::Approx(top(p.W_Q)).epsilon(1e-8));
  CHECK(c.lambda_bar_K - 1.0 == doctest::Approx(top(p.W_K)).epsilon(1e-8));
  CHECK(c.lambda_bar_V - 1.0 == doctest::Approx(top(p.W_V)).epsilon(1e-8));
}

TEST_CASE("feature norm stays under tau1 d_s ||W_V|| C_x") {
  Rng rng(88);
  for (int trial = 0; trial < 30; ++trial) {
    const Index d_s = 1 + static_cast<Index>(rng.uniform_index(8));
    const Index d = 1 + static_cast<Index>(rng.uniform_index(10));
    const Index d_m = 2 + static_cast<Index>(rng.uniform_index(50));
    const double C_x = 0.1 + 2 * rng.uniform();
    const Dataset data = gen_synthetic(1, d_s, d, C_x, rng);
    const Dims dims{1, d_s, d, d_m};
    const InitScheme scheme = InitScheme::named(trial % 2 ? InitName::He : InitName::NTK, dims);
    const ScalingScheme s = make_scaling(scheme, Tau0Rule::InvSqrtWidth, d_m);
    const ModelParams p = init_params(dims, scheme, rng);
    const double bound = s.tau1 * static_cast<double>(d_s) * spectral_norm(p.W_V) * C_x;
    CHECK(features(data.inputs[0], p, s).norm() <= bound * (1 + 1e-12));
  }
}

TEST_CASE("envelope edge cases") {
  TrainTrace flat;
  for (Index e = 0; e <= 3; ++e) flat.records.push_back({e, 2.0, {}, {}, {}});
  const EnvelopeResult g0 = convergence_envelope(flat, 1.0, 0.0);
  CHECK(g0.dominated);
  CHECK(g0.envelope == std::vector<double>(4, 2.0));
  CHECK(convergence_envelope(flat, 1.0, 0.5).envelope[0] == 2.0);
  flat.records[2].loss = 2.5;
  CHECK_FALSE(convergence_envelope(flat, 1.0, 0.0).dominated);
}
