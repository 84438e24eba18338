#include "ntklab/bounds.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <memory>

#include <fmt/format.h>

#include "forward_batch.hpp"
#include "ntklab/grad.hpp"

namespace ntklab {

TheoryConstants theory_constants(const ModelParams& params0, const Dims& dims, const ScalingScheme& scaling,
                                 const Radii& radii, double C_x, double loss0) {
  params0.validate();
  if (!(loss0 >= 0.0)) throw InvalidInput("theory_constants: loss0 must be >= 0");
  if (!(C_x > 0.0)) throw InvalidInput("theory_constants: C_x must be positive");
  TheoryConstants c;
  c.radii = radii;
  c.lambda_bar_Q = spectral_norm(params0.W_Q) + radii.C_Q;
  c.lambda_bar_K = spectral_norm(params0.W_K) + radii.C_K;
  c.lambda_bar_V = spectral_norm(params0.W_V) + radii.C_V;
  c.lambda_bar_O = params0.w_O.norm() + radii.C_O;
  c.tau0 = scaling.tau0;
  c.tau1 = scaling.feature_scale(dims.d_s);
  c.C_x = C_x;
  c.N = dims.N;
  c.d_s = dims.d_s;

  const double N = static_cast<double>(dims.N);
  const double ds = static_cast<double>(dims.d_s);
  const double t0 = c.tau0;
  const double t1 = c.tau1;
  const double lQ = c.lambda_bar_Q, lK = c.lambda_bar_K, lV = c.lambda_bar_V, lO = c.lambda_bar_O;
  const double cx2 = C_x * C_x;

  c.rho = std::sqrt(N) * std::pow(ds, 1.5) * t1 * C_x;
  c.z = lO * lO * (1.0 + 4.0 * t0 * t0 * cx2 * cx2 * ds * ds * lV * lV * (lQ * lQ + lK * lK));

  const double zz = 2.0 * t0 * cx2 * ds * (lQ + lK);
  c.c1 = c.rho * (lV + lO + lV * zz);
  const double qk_k = 2.0 * t0 * lK * lV * lO * ds * cx2;
  const double qk_q = 2.0 * t0 * lQ * lV * lO * ds * cx2;
  c.c2 = c.rho * std::sqrt(lO * lO + lV * lV + qk_k * qk_k + qk_q * qk_q);

  const double base = t1 * C_x * std::pow(ds, 1.5);
  const double inner = lO * C_x * std::sqrt(ds) * (1.0 + lV * zz) + 1.0;
  const double term1 = base * (1.0 + lV * zz);
  const double term2 = base * (lO * zz + inner);
  // Both attention terms end in 3 lambda_bar_K zz, as in the published constant.
  const double tail = lV * lO * (cx2 * ds + 3.0 * lK * zz);
  const double term3 = t0 * t1 * C_x * ds * (2.0 * lK * ds * cx2 * (lV * inner + lO) + tail);
  const double term4 = t0 * t1 * C_x * ds * (2.0 * lQ * ds * cx2 * (lV * inner + lO) + tail);
  c.c3 = std::sqrt(N * (term1 * term1 + term2 * term2 + term3 * term3 + term4 * term4));

  c.C_step = c.c1 * c.c2 + 2.0 * c.c3 * loss0;
  return c;
}

double alpha(const Matrix& F_pre0) {
  if (F_pre0.size() == 0) throw InvalidInput("alpha: empty feature matrix");
  // sigma_min of the N x d_m matrix as lambda_min(F F^T)^{1/2}; zero when d_m < N.
  if (F_pre0.rows() > F_pre0.cols()) return 0.0;
  return min_singular_value(F_pre0);
}

ConditionReport check_conditions(const TheoryConstants& c, double alpha_value, double loss0, double tau0) {
  if (!std::isfinite(alpha_value) || !std::isfinite(loss0) || !std::isfinite(tau0)) {
    throw InvalidInput("check_conditions: inputs must be finite");
  }
  ConditionReport r;
  r.alpha = alpha_value;
  const double root = std::sqrt(2.0 * loss0);
  const double cx2 = c.C_x * c.C_x;
  const double ds = static_cast<double>(c.d_s);
  const double worst = std::max({c.lambda_bar_V / c.radii.C_O, c.lambda_bar_O / c.radii.C_V,
                                 2.0 * tau0 * cx2 * ds * c.lambda_bar_K * c.lambda_bar_V * c.lambda_bar_O / c.radii.C_Q,
                                 2.0 * tau0 * cx2 * ds * c.lambda_bar_Q * c.lambda_bar_V * c.lambda_bar_O / c.radii.C_K});
  r.width.lhs = alpha_value * alpha_value;
  r.width.rhs = 8.0 * c.rho * worst * root;
  r.width.pass = r.width.lhs >= r.width.rhs;
  r.init.lhs = alpha_value * alpha_value * alpha_value;
  r.init.rhs = 32.0 * c.rho * c.rho * c.z * root / c.lambda_bar_O;
  r.init.pass = r.init.lhs >= r.init.rhs;
  r.gamma_max = 1.0 / c.C_step;
  return r;
}

EnvelopeResult convergence_envelope(const TrainTrace& trace, double alpha_value, double gamma) {
  EnvelopeResult out;
  if (trace.records.empty()) throw InvalidInput("convergence_envelope: empty trace");
  const double loss0 = trace.records.front().loss;
  const double rate = 1.0 - gamma * alpha_value * alpha_value / 2.0;
  if (rate <= 0.0) {
    out.warnings.push_back(fmt::format("gamma alpha^2 = {} >= 2: envelope is degenerate", gamma * alpha_value * alpha_value));
    out.envelope.assign(trace.records.size(), 0.0);
    out.dominated = false;
    return out;
  }
  out.dominated = true;
  for (const TrainRecord& r : trace.records) {
    const double e = std::pow(rate, static_cast<double>(r.epoch)) * loss0;
    out.envelope.push_back(e);
    if (r.loss > e) out.dominated = false;
  }
  return out;
}

bool GradientNormReport::all_slack_nonnegative() const {
  return std::all_of(groups.begin(), groups.end(), [](const GroupBound& g) { return g.slack >= 0.0; });
}

GradientNormReport gradient_norm_report(const Dataset& data, const ModelParams& params, const ScalingScheme& scaling,
                                        const TheoryConstants& c) {
  GradientNormReport report;
  const std::array<double, 4> norms{spectral_norm(params.W_Q), spectral_norm(params.W_K), spectral_norm(params.W_V),
                                    params.w_O.norm()};
  const std::array<double, 4> caps{c.lambda_bar_Q, c.lambda_bar_K, c.lambda_bar_V, c.lambda_bar_O};
  static constexpr const char* names[] = {"W_Q", "W_K", "W_V", "w_O"};
  report.applicable = true;
  for (std::size_t g = 0; g < 4; ++g) {
    if (norms[g] > caps[g]) {
      report.applicable = false;
      report.note += fmt::format("{} norm {} exceeds cap {}; ", names[g], norms[g], caps[g]);
    }
  }
  const Vector r = batch_forward(data, params, scaling) - data.targets;
  const double res = r.norm();
  const ParamGrad grad = grad_loss(data, params, scaling);
  const std::array<double, 4> actual = grad.group_norms();
  const double cx2 = c.C_x * c.C_x;
  const double ds = static_cast<double>(c.d_s);
  const std::array<double, 4> bound{
      2.0 * c.rho * c.tau0 * c.lambda_bar_K * c.lambda_bar_V * c.lambda_bar_O * ds * cx2 * res,
      2.0 * c.rho * c.tau0 * c.lambda_bar_Q * c.lambda_bar_V * c.lambda_bar_O * ds * cx2 * res,
      c.rho * c.lambda_bar_O * res,
      c.rho * c.lambda_bar_V * res,
  };
  for (std::size_t g = 0; g < 4; ++g) report.groups[g] = {actual[g], bound[g], bound[g] - actual[g]};
  return report;
}

Matrix attention_features(const Dataset& data, const ModelParams& params, double tau0) {
  data.validate();
  Matrix phi(data.N(), data.d());
  for (Index n = 0; n < data.N(); ++n) {
    const Matrix& x = data.inputs[static_cast<std::size_t>(n)];
    const Matrix beta = attention_rows(x, params, tau0);
    phi.row(n) = beta.row(0) * x;
  }
  return phi;
}

double gershgorin_lambda_min_lower(const Matrix& Phi) {
  if (Phi.rows() == 0) throw InvalidInput("gershgorin_lambda_min_lower: empty matrix");
  const Matrix G = Phi * Phi.transpose();
  double bound = std::numeric_limits<double>::infinity();
  for (Index k = 0; k < G.rows(); ++k) {
    const double off = G.row(k).cwiseAbs().sum() - std::abs(G(k, k));
    bound = std::min(bound, G(k, k) - off);
  }
  return bound;
}

double lambda0_diagnostic(double eta_V, const Matrix& Phi) {
  constexpr double mu = 0.5;
  return eta_V * mu * mu * sym_min_eigen(Phi * Phi.transpose());
}

LinearOperator hessian_operator(const Dataset& data, const ModelParams& params, const ScalingScheme& scaling,
                                double hvp_step, HessianTarget target) {
  if (!(hvp_step > 0.0)) throw InvalidInput("hessian_operator: step must be positive");
  data.validate();
  params.validate();
  const Dims dims{data.N(), data.d_s(), params.d(), params.d_m()};
  const Vector theta = flatten(params);

  std::function<Vector(const ModelParams&)> grad;
  if (target == HessianTarget::Network) {
    auto input = std::make_shared<std::vector<Matrix>>(1, data.inputs.front());
    auto frozen = std::make_shared<Matrix>(activation_pattern(*input, params, scaling));
    grad = [input, frozen, scaling](const ModelParams& p) {
      return flatten(weighted_grad(*input, Vector::Ones(1), p, scaling, frozen.get()));
    };
  } else {
    auto owned = std::make_shared<Dataset>(data);
    auto frozen = std::make_shared<Matrix>(activation_pattern(owned->inputs, params, scaling));
    grad = [owned, frozen, scaling](const ModelParams& p) {
      const detail::BatchForward fw = detail::run_forward(owned->inputs, p, scaling, frozen.get());
      return flatten(detail::weighted_backward(fw, p, scaling.tau0, fw.f - owned->targets));
    };
  }
  return [grad, theta, dims, hvp_step](const Vector& v) -> Vector {
    const double nv = v.norm();
    if (nv == 0.0) return Vector::Zero(v.size());
    const Vector u = v / nv;
    const Vector up = grad(unflatten(theta + hvp_step * u, dims));
    const Vector down = grad(unflatten(theta - hvp_step * u, dims));
    return (up - down) * (nv / (2.0 * hvp_step));
  };
}

HessianEstimate hessian_norm(const Dataset& data, const ModelParams& params, const ScalingScheme& scaling,
                             double hvp_step, double tol, HessianTarget target, int max_iter, std::uint64_t seed) {
  const LinearOperator op = hessian_operator(data, params, scaling, hvp_step, target);
  const PowerIterResult r = power_iter_spectral_norm(op, params.dims.param_count(), tol, max_iter, seed);
  return {params.d_m(), r.value, r.iterations, hvp_step};
}

double fit_log_slope(const std::vector<double>& widths, const std::vector<double>& norms) {
  if (widths.size() != norms.size() || widths.size() < 2) {
    throw InvalidInput("fit_log_slope: need at least two (width, norm) pairs");
  }
  const std::size_t n = widths.size();
  double mx = 0.0, my = 0.0;
  std::vector<double> lx(n), ly(n);
  for (std::size_t i = 0; i < n; ++i) {
    if (!(widths[i] > 0.0) || !(norms[i] > 0.0)) throw InvalidInput("fit_log_slope: values must be positive");
    lx[i] = std::log(widths[i]);
    ly[i] = std::log(norms[i]);
    mx += lx[i];
    my += ly[i];
  }
  mx /= static_cast<double>(n);
  my /= static_cast<double>(n);
  double sxy = 0.0, sxx = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    sxy += (lx[i] - mx) * (ly[i] - my);
    sxx += (lx[i] - mx) * (lx[i] - mx);
  }
  if (sxx == 0.0) throw InvalidInput("fit_log_slope: widths must not all be equal");
  return sxy / sxx;
}

std::vector<SweepRow> hessian_sweep(const std::vector<Index>& widths, std::uint64_t seed, Index reps,
                                    const HessianSweepSetup& setup) {
  if (widths.empty()) throw InvalidInput("hessian_sweep: no widths");
  if (reps < 1) throw InvalidInput("hessian_sweep: reps must be >= 1");
  std::vector<SweepRow> rows;
  for (Index rep = 0; rep < reps; ++rep) {
    const std::uint64_t rep_seed = derive_seed(seed, static_cast<std::uint64_t>(rep));
    Rng data_rng(rep_seed);
    const Dataset data = gen_synthetic(1, setup.d_s, setup.d, setup.C_x, data_rng);
    for (Index d_m : widths) {
      const Dims dims{1, setup.d_s, setup.d, d_m};
      const InitScheme init = InitScheme::named(setup.init, dims);
      const ScalingScheme scaling = make_scaling(init, setup.tau0_rule, d_m, setup.pooling);
      Rng param_rng(derive_seed(rep_seed, static_cast<std::uint64_t>(d_m)));
      const ModelParams params = init_params(dims, init, param_rng);
      SweepRow row{rep, d_m, 0.0, 0, true};
      try {
        const HessianEstimate h = hessian_norm(data, params, scaling, setup.hvp_step, setup.tol, setup.target,
                                               20000, derive_seed(rep_seed, 0x4e55));
        row.norm = h.spectral_norm;
        row.iterations = h.iterations;
      } catch (const ConvergenceError& e) {
        row.norm = e.last_estimate();
        row.iterations = e.iterations();
        row.converged = false;
      }
      rows.push_back(row);
    }
  }
  return rows;
}

double mean_rep_slope(const std::vector<SweepRow>& rows) {
  std::vector<Index> reps;
  for (const SweepRow& r : rows)
    if (std::find(reps.begin(), reps.end(), r.rep) == reps.end()) reps.push_back(r.rep);
  double sum = 0.0;
  for (Index rep : reps) {
    std::vector<double> xs, ys;
    for (const SweepRow& r : rows) {
      if (r.rep != rep) continue;
      xs.push_back(static_cast<double>(r.d_m));
      ys.push_back(r.norm);
    }
    sum += fit_log_slope(xs, ys);
  }
  return sum / static_cast<double>(reps.size());
}

SlopeResult hessian_width_slope(const std::vector<Index>& widths, std::uint64_t seed, Index reps,
                                const HessianSweepSetup& setup) {
  if (widths.size() < 4) throw InvalidInput("hessian_width_slope: need at least 4 widths");
  const auto [lo, hi] = std::minmax_element(widths.begin(), widths.end());
  if (*lo < 1 || static_cast<double>(*hi) / static_cast<double>(*lo) < 64.0) {
    throw InvalidInput("hessian_width_slope: widths must span a factor of at least 64");
  }
  SlopeResult out;
  out.rows = hessian_sweep(widths, seed, reps, setup);
  for (Index rep = 0; rep < reps; ++rep) {
    std::vector<double> xs, ys;
    for (const SweepRow& r : out.rows) {
      if (r.rep != rep) continue;
      xs.push_back(static_cast<double>(r.d_m));
      ys.push_back(r.norm);
    }
    out.per_rep.push_back(fit_log_slope(xs, ys));
  }
  double sum = 0.0;
  for (double s : out.per_rep) sum += s;
  out.slope = sum / static_cast<double>(out.per_rep.size());
  return out;
}

std::string to_string(HessianTarget target) { return target == HessianTarget::Network ? "network" : "loss"; }

}  // namespace ntklab
