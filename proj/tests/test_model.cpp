#include <doctest.h>

#include "helpers.hpp"
#include "ntklab/model.hpp"

using namespace ntklab;

namespace {

struct Case {
  Dims dims;
  InitName init;
  Tau0Rule rule;
  Pooling pooling;
};

std::vector<Case> random_cases(int count, std::uint64_t seed) {
  Rng rng(seed);
  const InitName inits[] = {InitName::LeCun, InitName::He, InitName::NTK};
  const Tau0Rule rules[] = {Tau0Rule::InvSqrtWidth, Tau0Rule::InvWidth};
  std::vector<Case> out;
  for (int i = 0; i < count; ++i) {
    Dims d{1, 1 + static_cast<Index>(rng.uniform_index(6)), 1 + static_cast<Index>(rng.uniform_index(8)),
           1 + static_cast<Index>(rng.uniform_index(40))};
    out.push_back({d, inits[rng.uniform_index(3)], rules[rng.uniform_index(2)],
                   rng.uniform_index(2) ? Pooling::Sum : Pooling::Average});
  }
  return out;
}

}  // namespace

TEST_CASE("forward agrees with a plain-loop oracle") {
  Rng rng(21);
  for (const Case& c : random_cases(60, 22)) {
    const InitScheme scheme = InitScheme::named(c.init, c.dims);
    const ScalingScheme s = make_scaling(scheme, c.rule, c.dims.d_m, c.pooling);
    const ModelParams p = init_params(c.dims, scheme, rng);
    const Matrix x = gaussian_matrix(c.dims.d_s, c.dims.d, 1.0, rng);
    const double f = forward(x, p, s);
    CHECK(f == doctest::Approx(test::naive_forward(x, p, s)).epsilon(1e-11).scale(1.0));
    CHECK(features(x, p, s).dot(p.w_O) == doctest::Approx(f).epsilon(1e-12).scale(1.0));
  }
}

TEST_CASE("attention rows are simplex vectors with bounded norm") {
  Rng rng(23);
  for (const Case& c : random_cases(60, 24)) {
    const InitScheme scheme = InitScheme::named(c.init, c.dims);
    const ModelParams p = init_params(c.dims, scheme, rng);
    const Matrix x = gaussian_matrix(c.dims.d_s, c.dims.d, 3.0, rng);
    const Matrix beta = attention_rows(x, p, 1.0);
    const double lo = 1.0 / std::sqrt(static_cast<double>(c.dims.d_s));
    for (Index i = 0; i < beta.rows(); ++i) {
      CHECK(beta.row(i).sum() == doctest::Approx(1.0).epsilon(1e-13));
      CHECK(beta.row(i).minCoeff() >= 0.0);
      CHECK(beta.row(i).norm() >= lo - 1e-12);
      CHECK(beta.row(i).norm() <= 1.0 + 1e-12);
    }
  }
}

TEST_CASE("query/key rescaling leaves the output unchanged") {
  Rng rng(25);
  for (const Case& c : random_cases(30, 26)) {
    const InitScheme scheme = InitScheme::named(c.init, c.dims);
    const ScalingScheme s = make_scaling(scheme, c.rule, c.dims.d_m, c.pooling);
    ModelParams p = init_params(c.dims, scheme, rng);
    const Matrix x = gaussian_matrix(c.dims.d_s, c.dims.d, 1.0, rng);
    const double f = forward(x, p, s);
    const double k = 0.25 + 3.0 * rng.uniform();
    p.W_Q *= k;
    p.W_K /= k;
    CHECK(forward(x, p, s) == doctest::Approx(f).epsilon(1e-10).scale(1.0));
  }
}

TEST_CASE("output and value weights are positively homogeneous") {
  Rng rng(27);
  for (const Case& c : random_cases(30, 28)) {
    const InitScheme scheme = InitScheme::named(c.init, c.dims);
    const ScalingScheme s = make_scaling(scheme, c.rule, c.dims.d_m, c.pooling);
    const ModelParams p = init_params(c.dims, scheme, rng);
    const Matrix x = gaussian_matrix(c.dims.d_s, c.dims.d, 1.0, rng);
    const double f = forward(x, p, s);
    const double k = 0.1 + 5.0 * rng.uniform();
    ModelParams po = p, pv = p;
    po.w_O *= k;
    pv.W_V *= k;
    CHECK(forward(x, po, s) == doctest::Approx(k * f).epsilon(1e-12).scale(1.0));
    CHECK(forward(x, pv, s) == doctest::Approx(k * f).epsilon(1e-12).scale(1.0));
  }
}

TEST_CASE("average pooling divides sum pooling by the sequence length") {
  Rng rng(29);
  const Dims d{1, 6, 4, 20};
  const InitScheme scheme = InitScheme::lecun(d);
  const ModelParams p = init_params(d, scheme, rng);
  const Matrix x = gaussian_matrix(6, 4, 1.0, rng);
  const double fs = forward(x, p, make_scaling(scheme, Tau0Rule::InvSqrtWidth, 20, Pooling::Sum));
  const double fa = forward(x, p, make_scaling(scheme, Tau0Rule::InvSqrtWidth, 20, Pooling::Average));
  CHECK(fa == doctest::Approx(fs / 6.0).epsilon(1e-13));
}

TEST_CASE("vanishing logit scale gives uniform attention") {
  Rng rng(30);
  const Dims d{1, 5, 3, 10};
  const ModelParams p = init_params(d, InitScheme::lecun(d), rng);
  const Matrix beta = attention_rows(gaussian_matrix(5, 3, 1.0, rng), p, 1e-20);
  CHECK((beta.array() - 0.2).abs().maxCoeff() < 1e-15);
}

TEST_CASE("init schemes set the documented variances") {
  const Dims d{1, 3, 50, 400};
  const InitScheme lecun = InitScheme::lecun(d);
  CHECK(lecun.eta_Q == doctest::Approx(1.0 / 50));
  CHECK(lecun.eta_O == doctest::Approx(1.0 / 400));
  CHECK(lecun.tau1 == 1.0);
  const InitScheme he = InitScheme::he(d);
  CHECK(he.eta_V == doctest::Approx(2.0 / 50));
  CHECK(he.eta_O == doctest::Approx(2.0 / 400));
  const InitScheme ntk = InitScheme::ntk(d);
  CHECK(ntk.eta_K == 1.0);
  CHECK(ntk.tau1 == doctest::Approx(1.0 / 20.0));
  CHECK(tau0_for(Tau0Rule::InvSqrtWidth, 400) == doctest::Approx(0.05));
  CHECK(tau0_for(Tau0Rule::InvWidth, 400) == doctest::Approx(0.0025));
  CHECK(tau0_for(Tau0Rule::Custom, 400, 0.3) == 0.3);

  Rng rng(31);
  const ModelParams p = init_params(d, he, rng);
  const double var_q = p.W_Q.squaredNorm() / static_cast<double>(p.W_Q.size());
  const double var_o = p.w_O.squaredNorm() / static_cast<double>(p.w_O.size());
  CHECK(var_q == doctest::Approx(he.eta_Q).epsilon(0.03));
  CHECK(var_o == doctest::Approx(he.eta_O).epsilon(0.2));
  CHECK(d.param_count() == 3 * 400 * 50 + 400);
}

TEST_CASE("init is reproducible per seed") {
  const Dims d{1, 2, 5, 7};
  Rng a(5), b(5), c(6);
  const ModelParams pa = init_params(d, InitScheme::lecun(d), a);
  CHECK(pa == init_params(d, InitScheme::lecun(d), b));
  CHECK_FALSE(pa == init_params(d, InitScheme::lecun(d), c));
}

TEST_CASE("bad shapes and names are rejected") {
  const Dims d{1, 2, 5, 7};
  Rng rng(1);
  const ModelParams p = init_params(d, InitScheme::lecun(d), rng);
  const ScalingScheme s = make_scaling(InitScheme::lecun(d), Tau0Rule::InvWidth, 7);
  CHECK_THROWS_AS(forward(Matrix::Ones(2, 4), p, s), InvalidInput);
  Matrix bad = Matrix::Ones(2, 5);
  bad(0, 0) = std::nan("");
  CHECK_THROWS_AS(forward(bad, p, s), InvalidInput);
  CHECK_THROWS_AS(parse_init_name("xavier"), InvalidInput);
  CHECK(parse_init_name(to_string(InitName::NTK)) == InitName::NTK);
  CHECK(parse_pooling(to_string(Pooling::Average)) == Pooling::Average);
  CHECK_THROWS_AS((Dims{1, 0, 1, 1}.validate()), InvalidInput);
}

TEST_CASE("batch forward stacks per-sample outputs") {
  Rng rng(33);
  const Dataset data = gen_synthetic(7, 3, 4, 1.0, rng);
  const Dims d{7, 3, 4, 12};
  const InitScheme scheme = InitScheme::ntk(d);
  const ScalingScheme s = make_scaling(scheme, Tau0Rule::InvWidth, 12);
  const ModelParams p = init_params(d, scheme, rng);
  const Vector f = batch_forward(data, p, s);
  const Matrix F = batch_features(data, p, s);
  double l = 0;
  for (Index n = 0; n < 7; ++n) {
    CHECK(f(n) == doctest::Approx(forward(data.inputs[n], p, s)).epsilon(1e-13).scale(1.0));
    CHECK((F.row(n).transpose() - features(data.inputs[n], p, s)).cwiseAbs().maxCoeff() < 1e-13);
    l += 0.5 * std::pow(f(n) - data.targets(n), 2);
  }
  CHECK(loss(data, p, s) == doctest::Approx(l).epsilon(1e-13));
}
