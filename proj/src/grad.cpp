#include "ntklab/grad.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include <fmt/format.h>

#include "forward_batch.hpp"

namespace ntklab {

ParamGrad ParamGrad::zeros(const ModelParams& like) {
  return {Matrix::Zero(like.d_m(), like.d()), Matrix::Zero(like.d_m(), like.d()), Matrix::Zero(like.d_m(), like.d()),
          Vector::Zero(like.d_m())};
}

ParamGrad& ParamGrad::operator+=(const ParamGrad& other) {
  g_WQ += other.g_WQ;
  g_WK += other.g_WK;
  g_WV += other.g_WV;
  g_wO += other.g_wO;
  return *this;
}

ParamGrad& ParamGrad::operator*=(double s) {
  g_WQ *= s;
  g_WK *= s;
  g_WV *= s;
  g_wO *= s;
  return *this;
}

bool ParamGrad::all_finite() const {
  return g_WQ.allFinite() && g_WK.allFinite() && g_WV.allFinite() && g_wO.allFinite();
}

std::array<double, 4> ParamGrad::group_norms() const {
  return {g_WQ.norm(), g_WK.norm(), g_WV.norm(), g_wO.norm()};
}

namespace detail {

ParamGrad weighted_backward(const BatchForward& fw, const ModelParams& params, double tau0, const Vector& weights) {
  const Index N = fw.N;
  const Index d_s = fw.d_s;
  const Index d_m = params.d_m();
  if (weights.size() != N) throw InvalidInput("backward: one weight per sample required");

  ParamGrad g;
  g.g_wO = fw.f_pre.transpose() * weights;

  // Gradient with respect to the preactivations U.
  Matrix gu = fw.active;
  Matrix bx(N * d_s, params.d());
  for (Index n = 0; n < N; ++n) {
    const Eigen::RowVectorXd scale = (fw.feature_scale * weights(n)) * params.w_O.transpose();
    gu.middleRows(n * d_s, d_s).array().rowwise() *= scale.array();
    bx.middleRows(n * d_s, d_s).noalias() = fw.beta.middleRows(n * d_s, d_s) * fw.x_all.middleRows(n * d_s, d_s);
  }
  g.g_WV.noalias() = gu.transpose() * bx;

  Matrix gq(N * d_s, d_m);
  Matrix gk(N * d_s, d_m);
  Matrix gbeta(d_s, d_s);
  Matrix gs(d_s, d_s);
  for (Index n = 0; n < N; ++n) {
    gbeta.noalias() = gu.middleRows(n * d_s, d_s) * fw.v.middleRows(n * d_s, d_s).transpose();
    for (Index i = 0; i < d_s; ++i) {
      const auto b = fw.beta.row(n * d_s + i);
      const double centre = b.dot(gbeta.row(i));
      gs.row(i) = b.array() * (gbeta.row(i).array() - centre);
    }
    gq.middleRows(n * d_s, d_s).noalias() = tau0 * (gs * fw.k.middleRows(n * d_s, d_s));
    gk.middleRows(n * d_s, d_s).noalias() = tau0 * (gs.transpose() * fw.q.middleRows(n * d_s, d_s));
  }
  g.g_WQ.noalias() = gq.transpose() * fw.x_all;
  g.g_WK.noalias() = gk.transpose() * fw.x_all;
  return g;
}

}  // namespace detail

ParamGrad weighted_grad(std::span<const Matrix> inputs, const Vector& weights, const ModelParams& params,
                        const ScalingScheme& scaling, const Matrix* frozen) {
  const detail::BatchForward fw = detail::run_forward(inputs, params, scaling, frozen);
  return detail::weighted_backward(fw, params, scaling.tau0, weights);
}

ParamGrad grad_sample(const Matrix& x, const ModelParams& params, const ScalingScheme& scaling) {
  return weighted_grad(std::span<const Matrix>(&x, 1), Vector::Ones(1), params, scaling);
}

ParamGrad grad_loss(const Dataset& data, const ModelParams& params, const ScalingScheme& scaling) {
  if (data.targets.size() != data.N()) throw InvalidInput("grad_loss: targets missing");
  const detail::BatchForward fw = detail::run_forward(data.inputs, params, scaling);
  const Vector r = fw.f - data.targets;
  return detail::weighted_backward(fw, params, scaling.tau0, r);
}

Matrix activation_pattern(std::span<const Matrix> inputs, const ModelParams& params, const ScalingScheme& scaling) {
  return detail::run_forward(inputs, params, scaling).active;
}

namespace {

template <typename Q, typename K, typename V, typename O>
Vector flatten_groups(const Q& q, const K& k, const V& v, const O& o) {
  const Index block = q.size();
  Vector out(3 * block + o.size());
  // Matrix is row-major, so raw storage order is row order.
  std::copy(q.data(), q.data() + block, out.data());
  std::copy(k.data(), k.data() + block, out.data() + block);
  std::copy(v.data(), v.data() + block, out.data() + 2 * block);
  std::copy(o.data(), o.data() + o.size(), out.data() + 3 * block);
  return out;
}

void check_flat_length(const Vector& theta, const Dims& dims) {
  if (theta.size() != dims.param_count()) {
    throw InvalidInput(fmt::format("unflatten: length {} but dims need {}", theta.size(), dims.param_count()));
  }
}

Matrix block_at(const Vector& theta, Index offset, Index rows, Index cols) {
  return Eigen::Map<const Matrix>(theta.data() + offset, rows, cols);
}

}  // namespace

Vector flatten(const ModelParams& params) { return flatten_groups(params.W_Q, params.W_K, params.W_V, params.w_O); }

Vector flatten(const ParamGrad& grad) { return flatten_groups(grad.g_WQ, grad.g_WK, grad.g_WV, grad.g_wO); }

ModelParams unflatten(const Vector& theta, const Dims& dims) {
  check_flat_length(theta, dims);
  const Index block = dims.d_m * dims.d;
  ModelParams p;
  p.dims = dims;
  p.W_Q = block_at(theta, 0, dims.d_m, dims.d);
  p.W_K = block_at(theta, block, dims.d_m, dims.d);
  p.W_V = block_at(theta, 2 * block, dims.d_m, dims.d);
  p.w_O = theta.segment(3 * block, dims.d_m);
  return p;
}

ParamGrad unflatten_grad(const Vector& theta, const Dims& dims) {
  const ModelParams p = unflatten(theta, dims);
  return {p.W_Q, p.W_K, p.W_V, p.w_O};
}

double& param_at(ModelParams& params, Index j) {
  const Index block = params.W_Q.size();
  if (j < 0 || j >= 3 * block + params.w_O.size()) throw InvalidInput(fmt::format("param_at: index {} out of range", j));
  if (j < block) return params.W_Q.data()[j];
  if (j < 2 * block) return params.W_K.data()[j - block];
  if (j < 3 * block) return params.W_V.data()[j - 2 * block];
  return params.w_O(j - 3 * block);
}

double fd_coordinate(const ParamFunction& fn, const ModelParams& params, Index j, double step) {
  if (!(step > 0.0)) throw InvalidInput("fd_coordinate: step must be positive");
  ModelParams work = params;
  double& slot = param_at(work, j);
  const double centre = slot;
  const double h = step * (1.0 + std::abs(centre));
  const double up = centre + h;
  const double down = centre - h;
  slot = up;
  const double f_up = fn(work);
  slot = down;
  const double f_down = fn(work);
  // Divide by the representable spacing, not 2h.
  return (f_up - f_down) / (up - down);
}

ParamGrad fd_grad_oracle(const ParamFunction& fn, const ModelParams& params, double step) {
  if (!(step > 0.0)) throw InvalidInput("fd_grad_oracle: step must be positive");
  const Index P = 3 * params.W_Q.size() + params.w_O.size();
  Vector flat(P);
  ModelParams work = params;
  for (Index j = 0; j < P; ++j) {
    double& slot = param_at(work, j);
    const double centre = slot;
    const double h = step * (1.0 + std::abs(centre));
    const double up = centre + h;
    const double down = centre - h;
    slot = up;
    const double f_up = fn(work);
    slot = down;
    const double f_down = fn(work);
    slot = centre;
    flat(j) = (f_up - f_down) / (up - down);
  }
  return unflatten_grad(flat, Dims{1, 1, params.d(), params.d_m()});
}

double GradCheckReport::worst() const { return *std::max_element(rel_err.begin(), rel_err.end()); }

GradCheckReport check_sample_gradient(const Matrix& x, const ModelParams& params, const ScalingScheme& scaling,
                                      Index per_group, Rng& rng, double step, double floor) {
  const std::span<const Matrix> one(&x, 1);
  const Vector analytic = flatten(grad_sample(x, params, scaling));
  const Matrix base_pattern = activation_pattern(one, params, scaling);
  const Index block = params.W_Q.size();
  const std::array<Index, 4> offsets{0, block, 2 * block, 3 * block};
  const std::array<Index, 4> sizes{block, block, block, params.w_O.size()};

  GradCheckReport report;
  ModelParams work = params;
  for (int g = 0; g < 4; ++g) {
    // Pick coordinates without replacement via a partial shuffle.
    std::vector<Index> coords(static_cast<std::size_t>(sizes[g]));
    std::iota(coords.begin(), coords.end(), offsets[g]);
    const Index take = std::min(per_group, sizes[g]);
    for (Index i = 0; i < take; ++i) {
      const Index r = i + static_cast<Index>(rng.uniform_index(static_cast<std::uint64_t>(sizes[g] - i)));
      std::swap(coords[static_cast<std::size_t>(i)], coords[static_cast<std::size_t>(r)]);
    }
    double max_diff = 0.0;
    double max_ref = 0.0;
    for (Index i = 0; i < take; ++i) {
      const Index j = coords[static_cast<std::size_t>(i)];
      double& slot = param_at(work, j);
      const double centre = slot;
      const double h = step * (1.0 + std::abs(centre));
      const double up = centre + h;
      const double down = centre - h;
      slot = up;
      const detail::BatchForward fu = detail::run_forward(one, work, scaling);
      slot = down;
      const detail::BatchForward fd = detail::run_forward(one, work, scaling);
      slot = centre;
      if (fu.active != base_pattern || fd.active != base_pattern) {
        ++report.excluded[g];
        continue;
      }
      const double numeric = (fu.f(0) - fd.f(0)) / (up - down);
      max_diff = std::max(max_diff, std::abs(analytic(j) - numeric));
      max_ref = std::max(max_ref, std::abs(numeric));
      ++report.checked[g];
    }
    report.rel_err[g] = max_diff / std::max(max_ref, floor);
  }
  return report;
}

}  // namespace ntklab
