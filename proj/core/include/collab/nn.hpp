#pragma once

#include <cstddef>
#include <cstdint>
#include <string>
#include <vector>

#include "collab/ops.hpp"
#include "collab/rng.hpp"
#include "collab/tensor.hpp"

namespace collab {

enum class LayerKind { conv_block, maxpool, linear, dropout, flatten };

const char* to_string(LayerKind kind) noexcept;

/// One entry of an architecture description. A conv block always expands to
/// convolution -> batch norm -> ReLU; hidden linears are followed by ReLU.
struct LayerSpec {
  LayerKind kind = LayerKind::conv_block;
  std::size_t channels = 0;  // conv_block output channels
  std::size_t kernel = 3;    // conv_block kernel extent (odd, "same" padding)
  std::size_t window = 2;    // maxpool window, stride = window
  std::size_t units = 0;     // linear output width
  double rate = 0.5;         // dropout probability
  int group_id = 0;          // conv_block group, used to select kernel-loss layers

  static LayerSpec conv(std::size_t channels, int group_id, std::size_t kernel = 3);
  static LayerSpec pool(std::size_t window = 2);
  static LayerSpec dense(std::size_t units);
  static LayerSpec drop(double rate = 0.5);
  static LayerSpec flat();
};

struct ArchSpec {
  std::size_t in_channels = 1;
  std::size_t in_height = 16;
  std::size_t in_width = 16;
  std::vector<LayerSpec> trunk;  // conv blocks and pools
  std::vector<LayerSpec> head;   // flatten, linears, dropouts

  /// Three conv blocks of 8/16/16 channels (groups 1..3) with two pools and a
  /// flatten -> dropout -> 64 -> dropout -> classes head, for 1x16x16 input.
  static ArchSpec desk_default(std::size_t classes);
};

template <typename T>
struct ConvBlockParams {
  Tensor<T> kernel;  // F x C x k x k
  Tensor<T> gamma;
  Tensor<T> beta;
  BatchNormState<T> bn;
  std::size_t padding = 1;
  int group_id = 0;
};

template <typename T>
struct LinearParams {
  Tensor<T> weight;  // D x M
  Tensor<T> bias;
};

/// Local classifier: adaptive max-pool to 4x4, 3x3 conv (+bias, ReLU),
/// flatten, fully connected to the class count.
template <typename T>
struct LocalHead {
  Tensor<T> conv_kernel;  // C x C x 3 x 3
  Tensor<T> conv_bias;
  Tensor<T> fc_weight;    // (C*16) x m
  Tensor<T> fc_bias;
};

enum class ParamScope { trunk_block, head, local_head, projection };

template <typename T>
struct ParamRef {
  std::string name;
  Tensor<T> tensor;
  ParamScope scope;
  std::size_t layer = 0;  // 1-based conv-block index for block/local/projection scopes
};

template <typename T>
struct TrunkOutput {
  std::vector<Tensor<T>> activations;   // h^(1..N), post-ReLU
  std::vector<Tensor<T>> block_inputs;  // input fed to each conv block
  Tensor<T> output;                     // after the last trunk layer
};

/// K^n logits from hierarchical dropout over the classifier head.
/// Branch b uses, at dropout layer l (0-based, head order), the mask with
/// index digit_l(b) where b = sum_l digit_l * K^(n-1-l).
template <typename T>
struct BranchSet {
  std::vector<Tensor<T>> logits;
  std::vector<Tensor<T>> masks;  // masks[l * K + k]
  std::size_t K = 1;
  std::size_t n = 0;

  std::vector<std::size_t> digits(std::size_t branch) const;
};

template <typename T>
class Network {
 public:
  static Network build(const ArchSpec& arch, std::size_t classes, std::uint64_t seed);

  const ArchSpec& arch() const { return arch_; }
  std::size_t depth() const { return blocks_.size(); }
  std::size_t dropout_count() const { return dropout_count_; }
  std::size_t classes() const { return classes_; }

  /// Runs the trunk. `update_running` controls BN running-stat updates in
  /// train mode.
  TrunkOutput<T> forward_trunk(const Tensor<T>& x, Mode mode, bool update_running = true);

  /// Conv block `layer` (1-based) recomputed on its detached input so that
  /// any loss built on the result reaches only that block's parameters.
  Tensor<T> local_view(std::size_t layer, const TrunkOutput<T>& trunk, Mode mode);

  /// Hierarchical-dropout head evaluation over fresh masks drawn from `rng`.
  /// The trunk output is shared by every branch.
  BranchSet<T> forward_branches(const Tensor<T>& trunk_out, std::size_t K, Rng rng);
  /// Same, with caller-provided masks (masks[l * K + k]).
  BranchSet<T> forward_branches(const Tensor<T>& trunk_out, std::size_t K,
                                std::vector<Tensor<T>> masks);
  std::vector<Tensor<T>> sample_masks(std::size_t batch, std::size_t K, Rng rng) const;

  /// Head without dropout (evaluation).
  Tensor<T> forward_head_eval(const Tensor<T>& trunk_out);
  /// Eval-mode logits for a batch.
  Tensor<T> predict(const Tensor<T>& x);

  Tensor<T> forward_local_head(std::size_t layer, const Tensor<T>& h);
  /// 1x1 projection g_i (channel count preserved).
  Tensor<T> project(std::size_t layer, const Tensor<T>& h);

  ConvBlockParams<T>& block(std::size_t layer);
  LocalHead<T>& local_head(std::size_t layer);
  Tensor<T>& projection(std::size_t layer);
  std::vector<LinearParams<T>>& linears() { return linears_; }

  std::vector<ParamRef<T>> parameters();

 private:
  void check_layer(std::size_t layer) const;
  Tensor<T> apply_block(std::size_t index, const Tensor<T>& x, Mode mode, bool update_running);
  void head_recursive(std::size_t layer, const Tensor<T>& act, std::size_t dropout_ordinal,
                      std::size_t K, const std::vector<Tensor<T>>& masks,
                      std::vector<Tensor<T>>& out);

  ArchSpec arch_;
  std::size_t classes_ = 0;
  std::size_t dropout_count_ = 0;
  std::vector<ConvBlockParams<T>> blocks_;
  std::vector<std::size_t> block_of_trunk_;  // trunk index -> block index (or npos)
  std::vector<LinearParams<T>> linears_;
  std::vector<std::size_t> linear_of_head_;
  std::vector<Shape> dropout_shapes_;        // per-example feature shape at each dropout
  std::vector<LocalHead<T>> local_heads_;
  std::vector<Tensor<T>> projections_;
};

/// Shape-checks `arch` and initializes parameters: fan-in uniform
/// (+-sqrt(1/fan_in)) weights, zero biases, gamma = 1, beta = 0, identity
/// projections.
template <typename T>
Network<T> build_network(const ArchSpec& arch, std::size_t classes, std::uint64_t seed) {
  return Network<T>::build(arch, classes, seed);
}

extern template class Network<float>;
extern template class Network<double>;

}  // namespace collab
