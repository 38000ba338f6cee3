#pragma once

#include <cstddef>
#include <optional>
#include <utility>
#include <vector>

#include "collab/nn.hpp"
#include "collab/tensor.hpp"

namespace collab {

/// Which collaborative objectives are active, plus their weights.
/// Defaults are the published settings: K = 2, T = 2, alpha_out = 0.5,
/// alpha_mid = beta_mid = 0.05.
struct LossConfig {
  bool out = false;
  bool mid = false;
  bool pull_push = false;
  bool kernel = false;

  std::size_t K = 2;
  double T = 2.0;
  double alpha_out = 0.5;
  double alpha_mid = 0.05;
  double beta_mid = 0.05;
  double w_pp = 0.1;
  /// Explicit (alpha_pull, alpha_push) per conv block; empty means the
  /// linear ramp alpha_pull(i) = w_pp * i / N, alpha_push(i) = w_pp * (1 - i / N).
  std::vector<std::pair<double, double>> pull_push_schedule;
  double lambda_kernel = 1.0;
  /// Conv-block group ids that receive the kernel loss; empty means the two
  /// highest group ids present in the architecture.
  std::vector<int> kernel_groups;
  /// Non-default reading of the mid-layer target that averages layers
  /// i..N (divisor N - i + 1) instead of the strictly higher ones.
  bool mid_target_includes_self = false;

  /// Throws ErrorKind::config on any violated invariant. `depth` is the
  /// conv-block count N and `dropouts` the head dropout count n.
  void validate(std::size_t depth, std::size_t dropouts) const;

  std::pair<double, double> pull_push_weights(std::size_t layer, std::size_t depth) const;

  /// Resolved kernel-loss group set for an architecture.
  std::vector<int> resolved_kernel_groups(const ArchSpec& arch) const;
};

/// Mean over the batch of -sum_k y_k log psi_k(z; T). Rows of `y` must be one-hot.
template <typename T>
Tensor<T> j_hard(const Tensor<T>& y, const Tensor<T>& z, double temperature = 1.0);

/// Mean over the batch of -sum_k q_k log psi_k(z; T). Rows of `q` must be
/// distributions (nonnegative, summing to 1 within 1e-6).
template <typename T>
Tensor<T> j_soft(const Tensor<T>& q, const Tensor<T>& z, double temperature);

/// Detached psi(mean of all logits except `exclude`; T).
template <typename T>
Tensor<T> peer_target(const std::vector<Tensor<T>>& logits, std::size_t exclude,
                      double temperature);

/// Output-layer collaboration over every branch of a BranchSet: hard term at
/// T = 1, soft term toward the peer consensus at cfg.T.
template <typename T>
Tensor<T> l_out(const Tensor<T>& y, const BranchSet<T>& branches, const LossConfig& cfg);

/// Detached soft target for layer `layer` (1-based) from the local logits of
/// higher layers; nullopt for the top layer.
template <typename T>
std::optional<Tensor<T>> mid_target(const std::vector<Tensor<T>>& z_list, std::size_t layer,
                                    double temperature, bool include_self = false);

template <typename T>
Tensor<T> l_mid_layer(const Tensor<T>& y, const std::vector<Tensor<T>>& z_list, std::size_t layer,
                      const LossConfig& cfg);

/// Centered per-channel spatial standard deviations (N x C).
template <typename T>
Tensor<T> std_descriptor(const Tensor<T>& maps);

/// Cosine similarity between centered descriptor rows.
template <typename T>
Tensor<T> similarity_matrix(const Tensor<T>& centered);

/// S(y): cosine similarity of batch-centered one-hot rows (constant).
template <typename T>
Tensor<T> target_similarity(const Tensor<T>& y);

/// S(x): similarity of std descriptors of the raw input (constant).
template <typename T>
Tensor<T> input_similarity(const Tensor<T>& x);

/// alpha_pull * ||S(g) - S(y)||_F - alpha_push * ||S(g) - S(x)||_F where
/// `projected` is g_i(h_i) and the targets are detached constants.
template <typename T>
Tensor<T> l_pull_push(const Tensor<T>& projected, const Tensor<T>& target_sim,
                      const Tensor<T>& input_sim, double alpha_pull, double alpha_push);

/// Pull-push term for conv block `layer` on its locality-scoped activation.
template <typename T>
Tensor<T> l_pull_push_layer(const Tensor<T>& x, const Tensor<T>& y, const Tensor<T>& h_local,
                            std::size_t layer, Network<T>& net, const LossConfig& cfg);

/// Correlation matrix of the row-standardized F x (C*Kh*Kw) filter matrix.
template <typename T>
Tensor<T> kernel_covariance(const Tensor<T>& kernel);

/// ||C - diag(C)||_F for one kernel.
template <typename T>
Tensor<T> kernel_decorrelation(const Tensor<T>& kernel);

/// Sum of kernel_decorrelation over the selected conv blocks.
template <typename T>
Tensor<T> l_kernel(Network<T>& net, const LossConfig& cfg);

struct LossBreakdown {
  double baseline = 0.0;  // plain J_hard when `out` is inactive
  double out = 0.0;
  double mid = 0.0;
  double pull_push = 0.0;  // signed
  double kernel = 0.0;     // already multiplied by lambda_kernel

  double sum() const { return baseline + out + mid + pull_push + kernel; }
};

template <typename T>
struct TotalLoss {
  Tensor<T> total;
  LossBreakdown terms;
  /// Main-head logits used for training error (branch mean under `out`).
  std::vector<T> prediction_logits;
};

/// Full training objective on one batch in train mode. Dropout masks come
/// from `rng`; BN running stats are updated once per call.
template <typename T>
TotalLoss<T> total_loss(const Tensor<T>& x, const std::vector<int>& labels, Network<T>& net,
                        const LossConfig& cfg, Rng rng);

}  // namespace collab
