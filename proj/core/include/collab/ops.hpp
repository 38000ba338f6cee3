#pragma once

#include <cstddef>
#include <vector>

#include "collab/tensor.hpp"

namespace collab {

// Differentiable operations. Every function records a node with its
// backward rule when any input requires a gradient.

/// Cross-correlation (no kernel flip) with zero padding.
/// input N x C x H x W, kernel F x C x Kh x Kw -> N x F x H' x W'.
template <typename T>
Tensor<T> conv2d(const Tensor<T>& input, const Tensor<T>& kernel, std::size_t stride,
                 std::size_t padding);

/// conv2d followed by a per-filter bias of length F.
template <typename T>
Tensor<T> conv2d(const Tensor<T>& input, const Tensor<T>& kernel, const Tensor<T>& bias,
                 std::size_t stride, std::size_t padding);

/// input N x D, weight D x M, bias M -> N x M.
template <typename T>
Tensor<T> linear(const Tensor<T>& input, const Tensor<T>& weight, const Tensor<T>& bias);

enum class Mode { train, eval };

template <typename T>
struct BatchNormState {
  std::vector<T> running_mean;
  std::vector<T> running_var;
  T momentum = T(0.1);
  T eps = T(1e-5);

  explicit BatchNormState(std::size_t channels = 0)
      : running_mean(channels, T(0)), running_var(channels, T(1)) {}
};

/// Per-channel batch normalization. Train mode normalizes with the batch's
/// population statistics and, when `update_running` is set, folds them into
/// `state`; eval mode uses the running statistics.
template <typename T>
Tensor<T> batchnorm2d(const Tensor<T>& input, const Tensor<T>& gamma, const Tensor<T>& beta,
                      BatchNormState<T>& state, Mode mode, bool update_running = true);

/// Windowed maximum; gradient goes to the first row-major argmax.
template <typename T>
Tensor<T> maxpool2d(const Tensor<T>& input, std::size_t window, std::size_t stride);

/// Max-pool to a fixed output grid; cell (i, j) covers rows
/// [floor(i*H/oh), ceil((i+1)*H/oh)) and likewise for columns.
template <typename T>
Tensor<T> adaptive_maxpool2d(const Tensor<T>& input, std::size_t out_h, std::size_t out_w);

template <typename T>
Tensor<T> relu(const Tensor<T>& input);

/// Inverted dropout with a caller-supplied {0,1} mask.
template <typename T>
Tensor<T> dropout_apply(const Tensor<T>& input, const Tensor<T>& mask, double rate);

/// Row-wise softmax of z / temperature over the last axis (rank 1 or 2).
template <typename T>
Tensor<T> softmax_temperature(const Tensor<T>& logits, double temperature);

/// Row-wise log of softmax_temperature, computed stably.
template <typename T>
Tensor<T> log_softmax_temperature(const Tensor<T>& logits, double temperature);

/// Same values, no graph parent.
template <typename T>
Tensor<T> detach(const Tensor<T>& input);

template <typename T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b);
template <typename T>
Tensor<T> sub(const Tensor<T>& a, const Tensor<T>& b);
template <typename T>
Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b);
template <typename T>
Tensor<T> scale(const Tensor<T>& a, double factor);

/// Sum of all elements as a rank-0 tensor.
template <typename T>
Tensor<T> sum(const Tensor<T>& a);
template <typename T>
Tensor<T> mean(const Tensor<T>& a);

template <typename T>
Tensor<T> reshape(const Tensor<T>& a, Shape shape);
/// N x ... -> N x prod(...)
template <typename T>
Tensor<T> flatten(const Tensor<T>& a);

/// a m x k, b k x n -> m x n.
template <typename T>
Tensor<T> matmul(const Tensor<T>& a, const Tensor<T>& b);
template <typename T>
Tensor<T> transpose(const Tensor<T>& a);

/// N x C x H x W -> N x C population standard deviation over each spatial
/// map. The subgradient at zero spread is taken as 0.
template <typename T>
Tensor<T> spatial_std(const Tensor<T>& maps);

/// X - column means of X (N x D).
template <typename T>
Tensor<T> center_columns(const Tensor<T>& x);

/// Cosine similarity between rows of x (N x D). Each norm carries a
/// `norm_eps` guard and the diagonal is fixed to 1.
template <typename T>
Tensor<T> cosine_similarity(const Tensor<T>& x, double norm_eps = 1e-12);

/// Rows shifted to zero mean and divided by max(population std, std_eps).
template <typename T>
Tensor<T> standardize_rows(const Tensor<T>& x, double std_eps = 1e-8);

/// Square matrix with its diagonal replaced by zeros.
template <typename T>
Tensor<T> zero_diagonal(const Tensor<T>& a);

/// sqrt(sum of squares) as a rank-0 tensor; subgradient 0 at the origin.
template <typename T>
Tensor<T> frobenius_norm(const Tensor<T>& a);

/// N x m one-hot constant from class ids.
template <typename T>
Tensor<T> one_hot(const std::vector<int>& labels, std::size_t classes);

}  // namespace collab
