#include "ntklab/data.hpp"

#include <cmath>
#include <limits>

#include <fmt/format.h>

namespace ntklab {

void Dataset::validate() const {
  if (inputs.empty()) throw InvalidInput("dataset: no samples");
  if (targets.size() != N()) {
    throw InvalidInput(fmt::format("dataset: {} targets for {} inputs", targets.size(), N()));
  }
  for (std::size_t n = 0; n < inputs.size(); ++n) {
    const Matrix& x = inputs[n];
    if (x.rows() != d_s() || x.cols() != d() || x.size() == 0) {
      throw InvalidInput(fmt::format("dataset: sample {} has shape {}x{}, expected {}x{}", n, x.rows(),
                                     x.cols(), d_s(), d()));
    }
    if (!x.allFinite()) throw InvalidInput(fmt::format("dataset: sample {} has non-finite entries", n));
  }
  if (!targets.allFinite()) throw InvalidInput("dataset: non-finite targets");
  if (!(C_x > 0.0)) throw InvalidInput("dataset: C_x must be positive");
}

double Dataset::max_token_scale() const {
  double worst = 0.0;
  for (const Matrix& x : inputs) worst = std::max(worst, x.norm() / std::sqrt(static_cast<double>(x.rows())));
  return worst;
}

bool Dataset::satisfies_bound() const { return max_token_scale() <= C_x * (1.0 + 1e-12); }

Matrix Dataset::stacked_inputs() const {
  Matrix all(N() * d_s(), d());
  for (Index n = 0; n < N(); ++n) all.middleRows(n * d_s(), d_s()) = inputs[static_cast<std::size_t>(n)];
  return all;
}

Dataset gen_synthetic(Index N, Index d_s, Index d, double C_x, Rng& rng) {
  if (N < 1 || d_s < 1 || d < 1) throw InvalidInput("gen_synthetic: dimensions must be positive");
  if (!(C_x > 0.0)) throw InvalidInput("gen_synthetic: C_x must be positive");
  Dataset data;
  data.C_x = C_x;
  data.seed = rng.seed();
  data.inputs.reserve(static_cast<std::size_t>(N));
  const double target_norm = std::sqrt(static_cast<double>(d_s)) * C_x;
  for (Index n = 0; n < N; ++n) {
    Matrix x = gaussian_matrix(d_s, d, 1.0, rng);
    x *= target_norm / x.norm();
    data.inputs.push_back(std::move(x));
  }
  data.targets = gaussian_vector(N, 1.0, rng);
  return data;
}

RankReport rank_check(const Dataset& data, double tol) {
  data.validate();
  RankReport report;
  report.sigma_min.resize(data.N());
  report.worst_sigma_min = std::numeric_limits<double>::infinity();
  for (Index n = 0; n < data.N(); ++n) {
    const double s = min_singular_value(data.inputs[static_cast<std::size_t>(n)]);
    report.sigma_min(n) = s;
    if (s < report.worst_sigma_min) {
      report.worst_sigma_min = s;
      report.worst_index = n;
    }
  }
  // Full row rank also needs d_s <= d; a wide-token matrix with d_s > d cannot pass.
  report.full_rank = data.d_s() <= data.d() && report.worst_sigma_min > tol;
  return report;
}

std::vector<double> pair_similarities(const Dataset& data) {
  data.validate();
  std::vector<Matrix> grams;
  grams.reserve(data.inputs.size());
  for (const Matrix& x : data.inputs) grams.emplace_back(x.transpose() * x);
  std::vector<double> sims;
  sims.reserve(data.inputs.size() * (data.inputs.size() - 1) / 2);
  for (std::size_t n = 0; n < grams.size(); ++n)
    for (std::size_t m = n + 1; m < grams.size(); ++m) sims.push_back(grams[n].cwiseProduct(grams[m]).sum());
  return sims;
}

std::vector<TailPoint> similarity_tail(const Dataset& data, const std::vector<double>& t_grid) {
  if (data.N() < 2) throw InvalidInput("similarity_tail: need at least two samples");
  const std::vector<double> sims = pair_similarities(data);
  std::vector<TailPoint> curve;
  curve.reserve(t_grid.size());
  for (double t : t_grid) {
    std::size_t hits = 0;
    for (double s : sims)
      if (std::abs(s) >= t) ++hits;
    curve.push_back({t, static_cast<double>(hits) / static_cast<double>(sims.size())});
  }
  return curve;
}

double covariance_min_eig(const Dataset& data) {
  data.validate();
  Matrix cov = Matrix::Zero(data.d(), data.d());
  for (const Matrix& x : data.inputs) {
    const Vector s = x.colwise().sum().transpose();
    cov.noalias() += s * s.transpose();
  }
  cov /= static_cast<double>(data.N());
  return std::max(0.0, sym_min_eigen(cov));
}

double synthetic_covariance_eig(Index d_s, Index d, double C_x) {
  return static_cast<double>(d_s) * C_x * C_x / static_cast<double>(d);
}

Dataset vectorize_mode(const Matrix& vectors, const Vector& targets, VectorMode mode) {
  if (vectors.rows() != targets.size()) throw InvalidInput("vectorize_mode: target count mismatch");
  if (vectors.size() == 0) throw InvalidInput("vectorize_mode: empty input");
  Dataset data;
  data.targets = targets;
  data.inputs.reserve(static_cast<std::size_t>(vectors.rows()));
  for (Index n = 0; n < vectors.rows(); ++n) {
    if (mode == VectorMode::Embedding) {
      data.inputs.emplace_back(vectors.row(n));
    } else {
      data.inputs.emplace_back(vectors.row(n).transpose());
    }
  }
  data.C_x = data.max_token_scale();
  data.validate();
  return data;
}

AssumptionReport assumption_report(const Dataset& data, const std::vector<double>& t_grid, double rank_tol) {
  return {rank_check(data, rank_tol), similarity_tail(data, t_grid), covariance_min_eig(data)};
}

}  // namespace ntklab
