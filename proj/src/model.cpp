#include "ntklab/model.hpp"

#include <cmath>

#include <fmt/format.h>

#include "forward_batch.hpp"

namespace ntklab {

void Dims::validate() const {
  if (N < 1 || d_s < 1 || d < 1 || d_m < 1) {
    throw InvalidInput(fmt::format("dims must all be >= 1 (N={}, d_s={}, d={}, d_m={})", N, d_s, d, d_m));
  }
}

void ScalingScheme::validate() const {
  if (!(tau0 > 0.0) || !(tau1 > 0.0) || !std::isfinite(tau0) || !std::isfinite(tau1)) {
    throw InvalidInput(fmt::format("scaling factors must be positive (tau0={}, tau1={})", tau0, tau1));
  }
}

double ScalingScheme::feature_scale(Index d_s) const {
  return pooling == Pooling::Average ? tau1 / static_cast<double>(d_s) : tau1;
}

InitScheme InitScheme::lecun(const Dims& dims) {
  const double inv_d = 1.0 / static_cast<double>(dims.d);
  return {InitName::LeCun, inv_d, inv_d, inv_d, 1.0 / static_cast<double>(dims.d_m), 1.0};
}

InitScheme InitScheme::he(const Dims& dims) {
  const double two_inv_d = 2.0 / static_cast<double>(dims.d);
  return {InitName::He, two_inv_d, two_inv_d, two_inv_d, 2.0 / static_cast<double>(dims.d_m), 1.0};
}

InitScheme InitScheme::ntk(const Dims& dims) {
  return {InitName::NTK, 1.0, 1.0, 1.0, 1.0, 1.0 / std::sqrt(static_cast<double>(dims.d_m))};
}

InitScheme InitScheme::named(InitName name, const Dims& dims) {
  switch (name) {
    case InitName::LeCun: return lecun(dims);
    case InitName::He: return he(dims);
    case InitName::NTK: return ntk(dims);
    case InitName::Custom: break;
  }
  throw InvalidInput("InitScheme::named: custom schemes need explicit variances");
}

void InitScheme::validate() const {
  if (!(eta_Q > 0.0 && eta_K > 0.0 && eta_V > 0.0 && eta_O > 0.0 && tau1 > 0.0)) {
    throw InvalidInput("init scheme variances and tau1 must be positive");
  }
}

double tau0_for(Tau0Rule rule, Index d_m, double custom) {
  switch (rule) {
    case Tau0Rule::InvSqrtWidth: return 1.0 / std::sqrt(static_cast<double>(d_m));
    case Tau0Rule::InvWidth: return 1.0 / static_cast<double>(d_m);
    case Tau0Rule::Custom: return custom;
  }
  return custom;
}

ScalingScheme make_scaling(const InitScheme& init, Tau0Rule rule, Index d_m, Pooling pooling, double custom_tau0) {
  ScalingScheme s{tau0_for(rule, d_m, custom_tau0), init.tau1, pooling};
  s.validate();
  return s;
}

std::string to_string(InitName name) {
  switch (name) {
    case InitName::LeCun: return "lecun";
    case InitName::He: return "he";
    case InitName::NTK: return "ntk";
    case InitName::Custom: return "custom";
  }
  return "custom";
}

std::string to_string(Tau0Rule rule) {
  switch (rule) {
    case Tau0Rule::InvSqrtWidth: return "inv_sqrt_width";
    case Tau0Rule::InvWidth: return "inv_width";
    case Tau0Rule::Custom: return "custom";
  }
  return "custom";
}

std::string to_string(Pooling pooling) { return pooling == Pooling::Sum ? "sum" : "average"; }

InitName parse_init_name(const std::string& s) {
  if (s == "lecun") return InitName::LeCun;
  if (s == "he") return InitName::He;
  if (s == "ntk") return InitName::NTK;
  throw InvalidInput(fmt::format("unknown init scheme '{}' (expected lecun, he or ntk)", s));
}

Pooling parse_pooling(const std::string& s) {
  if (s == "sum") return Pooling::Sum;
  if (s == "average") return Pooling::Average;
  throw InvalidInput(fmt::format("unknown pooling '{}' (expected sum or average)", s));
}

void ModelParams::validate() const {
  const Index dm = W_Q.rows();
  const Index dd = W_Q.cols();
  if (W_K.rows() != dm || W_K.cols() != dd || W_V.rows() != dm || W_V.cols() != dd || w_O.size() != dm) {
    throw InvalidInput("model params: weight groups have inconsistent shapes");
  }
  if (dims.d != dd || dims.d_m != dm) {
    throw InvalidInput(fmt::format("model params: dims say d={}, d_m={} but weights are {}x{}", dims.d, dims.d_m,
                                   dm, dd));
  }
}

bool ModelParams::operator==(const ModelParams& other) const {
  return W_Q.rows() == other.W_Q.rows() && W_Q.cols() == other.W_Q.cols() && W_Q == other.W_Q &&
         W_K == other.W_K && W_V == other.W_V && w_O == other.w_O;
}

ModelParams init_params(const Dims& dims, const InitScheme& scheme, Rng& rng) {
  dims.validate();
  scheme.validate();
  ModelParams p;
  p.dims = dims;
  p.W_Q = gaussian_matrix(dims.d_m, dims.d, std::sqrt(scheme.eta_Q), rng);
  p.W_K = gaussian_matrix(dims.d_m, dims.d, std::sqrt(scheme.eta_K), rng);
  p.W_V = gaussian_matrix(dims.d_m, dims.d, std::sqrt(scheme.eta_V), rng);
  p.w_O = gaussian_vector(dims.d_m, std::sqrt(scheme.eta_O), rng);
  return p;
}

namespace detail {

BatchForward run_forward(std::span<const Matrix> inputs, const ModelParams& params, const ScalingScheme& scaling,
                         const Matrix* frozen) {
  if (inputs.empty()) throw InvalidInput("forward: no inputs");
  params.validate();
  BatchForward out;
  out.N = static_cast<Index>(inputs.size());
  out.d_s = inputs.front().rows();
  const Index d_s = out.d_s;
  const Index d_m = params.d_m();
  out.x_all.resize(out.N * d_s, params.d());
  for (Index n = 0; n < out.N; ++n) {
    const Matrix& x = inputs[static_cast<std::size_t>(n)];
    if (x.rows() != d_s || x.cols() != params.d()) {
      throw InvalidInput(fmt::format("forward: input {} is {}x{}, expected {}x{}", n, x.rows(), x.cols(), d_s,
                                     params.d()));
    }
    if (!x.allFinite()) throw InvalidInput(fmt::format("forward: input {} has non-finite entries", n));
    out.x_all.middleRows(n * d_s, d_s) = x;
  }
  if (frozen != nullptr && (frozen->rows() != out.N * d_s || frozen->cols() != d_m)) {
    throw InvalidInput("forward: frozen activation pattern has the wrong shape");
  }

  out.q.noalias() = out.x_all * params.W_Q.transpose();
  out.k.noalias() = out.x_all * params.W_K.transpose();
  out.v.noalias() = out.x_all * params.W_V.transpose();
  out.beta.resize(out.N * d_s, d_s);
  out.preact.resize(out.N * d_s, d_m);
  for (Index n = 0; n < out.N; ++n) {
    Matrix logits = scaling.tau0 * (out.q.middleRows(n * d_s, d_s) *
                                    out.k.middleRows(n * d_s, d_s).transpose());
    if (!logits.allFinite()) throw InvalidInput(fmt::format("forward: non-finite attention logits (sample {})", n));
    for (Index i = 0; i < d_s; ++i) {
      const double shift = logits.row(i).maxCoeff();
      auto e = (logits.row(i).array() - shift).exp();
      out.beta.row(n * d_s + i) = e / e.sum();
    }
    out.preact.middleRows(n * d_s, d_s).noalias() =
        out.beta.middleRows(n * d_s, d_s) * out.v.middleRows(n * d_s, d_s);
  }

  if (frozen != nullptr) {
    out.active = *frozen;
  } else {
    out.active = (out.preact.array() > 0.0).cast<double>().matrix();
  }
  out.feature_scale = scaling.feature_scale(d_s);
  out.f_pre.resize(out.N, d_m);
  const Matrix activated = out.active.cwiseProduct(out.preact);
  for (Index n = 0; n < out.N; ++n) {
    out.f_pre.row(n) = out.feature_scale * activated.middleRows(n * d_s, d_s).colwise().sum();
  }
  out.f = out.f_pre * params.w_O;
  return out;
}

}  // namespace detail

Matrix attention_rows(const Matrix& x, const ModelParams& params, double tau0) {
  ScalingScheme s{tau0, 1.0, Pooling::Sum};
  return detail::run_forward(std::span<const Matrix>(&x, 1), params, s).beta;
}

ForwardTrace forward_trace(const Matrix& x, const ModelParams& params, const ScalingScheme& scaling) {
  detail::BatchForward b = detail::run_forward(std::span<const Matrix>(&x, 1), params, scaling);
  return {std::move(b.beta), std::move(b.preact), b.f_pre.row(0).transpose(), b.f(0)};
}

Vector features(const Matrix& x, const ModelParams& params, const ScalingScheme& scaling) {
  return forward_trace(x, params, scaling).f_pre;
}

double forward(const Matrix& x, const ModelParams& params, const ScalingScheme& scaling) {
  return forward_trace(x, params, scaling).f;
}

Matrix batch_features(const Dataset& data, const ModelParams& params, const ScalingScheme& scaling) {
  return detail::run_forward(data.inputs, params, scaling).f_pre;
}

Vector batch_forward(const Dataset& data, const ModelParams& params, const ScalingScheme& scaling) {
  return detail::run_forward(data.inputs, params, scaling).f;
}

double loss(const Dataset& data, const ModelParams& params, const ScalingScheme& scaling) {
  if (data.targets.size() != data.N()) throw InvalidInput("loss: targets missing");
  const Vector r = batch_forward(data, params, scaling) - data.targets;
  return 0.5 * r.squaredNorm();
}

}  // namespace ntklab
