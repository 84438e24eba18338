#include "ntklab/trainer.hpp"

#include <cmath>
#include <limits>

#include <fmt/format.h>

#include "forward_batch.hpp"
#include "ntklab/bounds.hpp"
#include "ntklab/grad.hpp"

namespace ntklab {

void HyperParams::validate() const {
  if (!(gamma >= 0.0) || !std::isfinite(gamma)) throw InvalidInput("hyper: gamma must be finite and >= 0");
  if (epochs < 0) throw InvalidInput("hyper: epochs must be >= 0");
  if (kernel_checkpoint_every < 0) throw InvalidInput("hyper: kernel_checkpoint_every must be >= 0");
  if (kernel_block_size < 1) throw InvalidInput("hyper: kernel_block_size must be >= 1");
  if (alpha_every < 1) throw InvalidInput("hyper: alpha_every must be >= 1");
  if (!(divergence_factor > 1.0)) throw InvalidInput("hyper: divergence_factor must exceed 1");
}

namespace {

std::array<double, 4> movement(const ModelParams& p, const ModelParams& p0) {
  return {(p.W_Q - p0.W_Q).norm(), (p.W_K - p0.W_K).norm(), (p.W_V - p0.W_V).norm(), (p.w_O - p0.w_O).norm()};
}

void apply_step(ModelParams& p, const ParamGrad& g, double gamma, const std::array<bool, 4>& groups) {
  if (groups[0]) p.W_Q.noalias() -= gamma * g.g_WQ;
  if (groups[1]) p.W_K.noalias() -= gamma * g.g_WK;
  if (groups[2]) p.W_V.noalias() -= gamma * g.g_WV;
  if (groups[3]) p.w_O.noalias() -= gamma * g.g_wO;
}

class Recorder {
 public:
  Recorder(const Dataset& data, const ModelParams& params0, const ScalingScheme& scaling, const HyperParams& hyper)
      : data_(data), params0_(params0), scaling_(scaling), hyper_(hyper) {}

  // Appends the record for `epoch`, given the forward pass at the current weights.
  void record(Index epoch, const detail::BatchForward& fw, const ModelParams& p, TrainTrace& trace) {
    TrainRecord rec;
    rec.epoch = epoch;
    rec.loss = 0.5 * (fw.f - data_.targets).squaredNorm();
    rec.move = movement(p, params0_);
    if (epoch == 0) loss0_ = rec.loss;
    if (hyper_.alpha_track) {
      if (epoch % hyper_.alpha_every == 0 || epoch == hyper_.epochs) rec.alpha_t = alpha(fw.f_pre);
      if (epoch == 0) {
        alpha0_ = *rec.alpha_t;
        rate_ = 1.0 - hyper_.gamma * alpha0_ * alpha0_ / 2.0;
      }
      if (rate_ >= 0.0) rec.envelope = std::pow(rate_, static_cast<double>(epoch)) * loss0_;
    }
    if (hyper_.kernel_checkpoint_every > 0 && epoch % hyper_.kernel_checkpoint_every == 0) {
      trace.kernel_checkpoints.push_back(
          {epoch, empirical_ntk(data_, p, scaling_, hyper_.kernel_block_size).K});
    }
    trace.records.push_back(rec);
    if (!std::isfinite(rec.loss) || rec.loss > hyper_.divergence_factor * loss0_) {
      trace.final_params = p;
      throw DivergenceError(fmt::format("training diverged at epoch {} (loss {})", epoch, rec.loss),
                            std::move(trace));
    }
  }

 private:
  const Dataset& data_;
  const ModelParams& params0_;
  const ScalingScheme& scaling_;
  const HyperParams& hyper_;
  double loss0_ = 0.0;
  double alpha0_ = 0.0;
  double rate_ = 1.0;
};

}  // namespace

TrainTrace gd_train(const Dataset& data, const ModelParams& params0, const ScalingScheme& scaling,
                    const HyperParams& hyper) {
  hyper.validate();
  data.validate();
  if (hyper.mode != TrainMode::GD) throw InvalidInput("gd_train: mode must be GD");
  TrainTrace trace;
  trace.records.reserve(static_cast<std::size_t>(hyper.epochs + 1));
  Recorder recorder(data, params0, scaling, hyper);
  ModelParams p = params0;
  for (Index t = 0;; ++t) {
    const detail::BatchForward fw = detail::run_forward(data.inputs, p, scaling);
    recorder.record(t, fw, p, trace);
    if (t == hyper.epochs) break;
    const ParamGrad g = detail::weighted_backward(fw, p, scaling.tau0, fw.f - data.targets);
    apply_step(p, g, hyper.gamma, hyper.train_groups);
  }
  trace.final_params = std::move(p);
  return trace;
}

TrainTrace sgd_train(const Dataset& data, const ModelParams& params0, const ScalingScheme& scaling,
                     const HyperParams& hyper, Rng& rng) {
  hyper.validate();
  data.validate();
  if (hyper.mode != TrainMode::SGD) throw InvalidInput("sgd_train: mode must be SGD");
  TrainTrace trace;
  trace.records.reserve(static_cast<std::size_t>(hyper.epochs + 1));
  Recorder recorder(data, params0, scaling, hyper);
  const Index N = data.N();
  const Index total_steps = hyper.epochs * N;
  if (total_steps > 0) trace.theta_hat_index = static_cast<Index>(rng.uniform_index(static_cast<std::uint64_t>(total_steps)));
  ModelParams p = params0;
  Index step = 0;
  for (Index t = 0;; ++t) {
    recorder.record(t, detail::run_forward(data.inputs, p, scaling), p, trace);
    if (t == hyper.epochs) break;
    for (Index n = 0; n < N; ++n, ++step) {
      if (trace.theta_hat_index && *trace.theta_hat_index == step) trace.theta_hat = p;
      const std::span<const Matrix> one(&data.inputs[static_cast<std::size_t>(n)], 1);
      const detail::BatchForward fw = detail::run_forward(one, p, scaling);
      const Vector r = fw.f - data.targets.segment(n, 1);
      apply_step(p, detail::weighted_backward(fw, p, scaling.tau0, r), hyper.gamma, hyper.train_groups);
    }
  }
  trace.final_params = std::move(p);
  return trace;
}

MovementSeries weight_movement(const TrainTrace& trace) {
  MovementSeries out;
  for (const TrainRecord& r : trace.records) {
    out.epoch.push_back(r.epoch);
    for (int g = 0; g < 4; ++g) out.move[static_cast<std::size_t>(g)].push_back(r.move[static_cast<std::size_t>(g)]);
  }
  return out;
}

std::array<double, 4> late_increment_ratio(const TrainTrace& trace, Index after_epoch) {
  if (trace.records.size() < 2) throw InvalidInput("late_increment_ratio: need at least two records");
  std::array<double, 4> ratio{};
  for (std::size_t g = 0; g < 4; ++g) {
    const double first = std::abs(trace.records[1].move[g] - trace.records[0].move[g]);
    double late = 0.0;
    for (std::size_t t = 1; t < trace.records.size(); ++t) {
      if (trace.records[t].epoch <= after_epoch) continue;
      late = std::max(late, std::abs(trace.records[t].move[g] - trace.records[t - 1].move[g]));
    }
    if (first > 0.0) {
      ratio[g] = late / first;
    } else {
      ratio[g] = late > 0.0 ? std::numeric_limits<double>::infinity() : 0.0;
    }
  }
  return ratio;
}

std::string to_string(TrainMode mode) { return mode == TrainMode::GD ? "gd" : "sgd"; }

}  // namespace ntklab
