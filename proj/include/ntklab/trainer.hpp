#pragma once

#include <array>
#include <optional>
#include <stdexcept>
#include <vector>

#include "ntklab/kernel.hpp"
#include "ntklab/model.hpp"

namespace ntklab {

enum class TrainMode { GD, SGD };

struct HyperParams {
  double gamma = 1.0;
  Index epochs = 0;
  TrainMode mode = TrainMode::GD;
  /// Empirical NTK snapshot every k epochs (0 = off).
  Index kernel_checkpoint_every = 0;
  Index kernel_block_size = 64;
  /// Record sigma_min(F_pre) every alpha_every epochs, plus the envelope.
  bool alpha_track = false;
  Index alpha_every = 10;
  /// Groups updated, in the order Q, K, V, O. Frozen groups keep their initial values.
  std::array<bool, 4> train_groups{true, true, true, true};
  /// Abort once the loss exceeds this multiple of the initial loss.
  double divergence_factor = 1e6;

  void validate() const;
};

struct TrainRecord {
  Index epoch = 0;
  double loss = 0.0;
  /// Frobenius distance of each group from its initial value, order Q, K, V, O.
  std::array<double, 4> move{};
  std::optional<double> alpha_t;
  /// (1 - gamma alpha^2 / 2)^t loss0 with alpha = sigma_min(F_pre^0).
  std::optional<double> envelope;
};

struct KernelCheckpoint {
  Index epoch = 0;
  Matrix K;
};

struct TrainTrace {
  std::vector<TrainRecord> records;
  ModelParams final_params;
  std::vector<KernelCheckpoint> kernel_checkpoints;
  /// SGD only: index of the uniformly chosen iterate and its weights.
  std::optional<Index> theta_hat_index;
  std::optional<ModelParams> theta_hat;
};

/// Thrown when the loss becomes non-finite or exceeds divergence_factor * loss0.
class DivergenceError : public std::runtime_error {
 public:
  DivergenceError(const std::string& what, TrainTrace partial)
      : std::runtime_error(what), partial_(std::move(partial)) {}
  const TrainTrace& partial() const noexcept { return partial_; }

 private:
  TrainTrace partial_;
};

/// Full-batch gradient descent; every group is updated from the same iterate.
TrainTrace gd_train(const Dataset& data, const ModelParams& params0, const ScalingScheme& scaling,
                    const HyperParams& hyper);

/// One ordered pass over the samples per epoch, one squared-loss step per sample.
/// Also picks one pre-step iterate uniformly at random as theta-hat.
TrainTrace sgd_train(const Dataset& data, const ModelParams& params0, const ScalingScheme& scaling,
                     const HyperParams& hyper, Rng& rng);

struct MovementSeries {
  std::vector<Index> epoch;
  std::array<std::vector<double>, 4> move;
};

MovementSeries weight_movement(const TrainTrace& trace);

/// For each group: largest per-epoch increment after `after_epoch`, divided by
/// the epoch-1 increment. Returns +inf for a group whose first increment is 0
/// while a later one is not.
std::array<double, 4> late_increment_ratio(const TrainTrace& trace, Index after_epoch);

std::string to_string(TrainMode mode);

}  // namespace ntklab
