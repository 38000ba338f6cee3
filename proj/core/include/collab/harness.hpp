#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <span>
#include <vector>

#include "collab/data.hpp"
#include "collab/losses.hpp"
#include "collab/metrics.hpp"
#include "collab/nn.hpp"

namespace collab {

/// Optimizer and schedule settings. Defaults follow the published protocol
/// (lr 0.1, momentum 0.9, weight decay 5e-4, decay 0.2) scaled to desk runs.
struct TrainConfig {
  std::size_t epochs = 50;
  std::size_t batch_size = 32;
  double lr0 = 0.1;
  std::vector<std::size_t> milestones;
  double decay = 0.2;
  double momentum = 0.9;
  double weight_decay = 5e-4;
  std::uint64_t seed = 1;
  int precision = 32;

  void validate() const;
};

struct NoiseConfig {
  double level = 0.0;
  /// Re-draw the corrupted index set each epoch; when false the set drawn
  /// for epoch 0 is kept (replacement labels are still re-drawn).
  bool reshuffle_per_epoch = true;

  void validate() const;
};

/// lr0 * decay^(number of milestones <= epoch).
double lr_at_epoch(const TrainConfig& cfg, std::size_t epoch);

/// Classic SGD with momentum and coupled weight decay:
///   v <- momentum * v + (grad + weight_decay * param);  param <- param - lr * v
/// Parameters that received no gradient are treated as having a zero one.
template <typename T>
void sgd_momentum_step(std::span<Tensor<T>> params, std::vector<std::vector<T>>& velocity,
                       double lr, double momentum, double weight_decay);

template <typename T>
class SgdMomentum {
 public:
  explicit SgdMomentum(std::vector<Tensor<T>> params);

  void zero_grad();
  void step(double lr, double momentum, double weight_decay);
  std::span<Tensor<T>> params() { return params_; }

 private:
  std::vector<Tensor<T>> params_;
  std::vector<std::vector<T>> velocity_;
};

struct NoisyLabels {
  std::vector<int> labels;
  std::vector<std::size_t> corrupted;  // sorted indices that received a random label
};

/// Picks floor(level * n) indices uniformly without replacement and gives
/// each a label drawn uniformly from all `classes` (the true class
/// included). Deterministic in (seed, epoch).
NoisyLabels inject_label_noise(const std::vector<int>& labels, std::size_t classes,
                               const NoiseConfig& noise, std::size_t epoch, std::uint64_t seed);

/// One pass over shuffled mini-batches (a trailing batch smaller than 2 is
/// skipped). Throws ErrorKind::numeric naming the first non-finite term.
template <typename T>
EpochRecord train_epoch(Network<T>& net, SgdMomentum<T>& opt, const Dataset& train,
                        const std::vector<int>& labels, const TrainConfig& cfg,
                        const LossConfig& loss_cfg, std::size_t epoch);

/// Eval-mode error in percent; argmax ties resolve to the lowest class index.
template <typename T>
double evaluate(Network<T>& net, const Dataset& data);

/// Observer invoked after every epoch (progress printing).
using EpochCallback = std::function<void(const EpochRecord&)>;

template <typename T>
RunMetrics run_experiment(Network<T>& net, const TrainConfig& cfg, const LossConfig& loss_cfg,
                          const NoiseConfig& noise, const SplitDataset& data,
                          const EpochCallback& on_epoch = {});

/// Builds the network from `arch` (seeded by cfg.seed) and runs it.
template <typename T>
RunMetrics run_experiment(const ArchSpec& arch, const TrainConfig& cfg, const LossConfig& loss_cfg,
                          const NoiseConfig& noise, const SplitDataset& data,
                          const EpochCallback& on_epoch = {});

}  // namespace collab
