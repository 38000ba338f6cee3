#pragma once

#include <cstddef>
#include <vector>

#include "collab/losses.hpp"

namespace collab {

struct EpochRecord {
  std::size_t epoch = 0;  // 0-based, matches lr_at_epoch
  double lr = 0.0;
  LossBreakdown terms;    // per-batch means
  double train_loss_total = 0.0;
  double train_error = 0.0;  // percent, against the labels used for training
  double test_error = 0.0;   // percent
  std::size_t noisy_labels = 0;
};

struct RunMetrics {
  double initial_test_error = 0.0;
  std::vector<EpochRecord> epochs;
  /// Minimum test error over the recorded epochs (the initial evaluation
  /// when no epoch ran).
  double best_test_error = 0.0;
  std::size_t best_epoch = 0;
  double wall_time_s = 0.0;
};

}  // namespace collab
