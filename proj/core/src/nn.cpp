#include "collab/nn.hpp"

#include <cmath>
#include <limits>
#include <string>

namespace collab {

namespace {

constexpr std::size_t npos = std::numeric_limits<std::size_t>::max();
constexpr std::size_t kLocalGrid = 4;

void build_error(const std::string& what) { fail(ErrorKind::config, "build_network: " + what); }

template <typename T>
Tensor<T> fan_in_uniform(Shape shape, std::size_t fan_in, Rng rng) {
  const double bound = std::sqrt(1.0 / static_cast<double>(fan_in));
  std::vector<T> v(shape_numel(shape));
  for (T& x : v) x = static_cast<T>(rng.uniform(-bound, bound));
  return Tensor<T>::parameter(std::move(shape), std::move(v));
}

template <typename T>
Tensor<T> filled_param(Shape shape, T value) {
  const std::size_t n = shape_numel(shape);
  return Tensor<T>::parameter(std::move(shape), std::vector<T>(n, value));
}

}  // namespace

const char* to_string(LayerKind kind) noexcept {
  switch (kind) {
    case LayerKind::conv_block: return "conv";
    case LayerKind::maxpool: return "maxpool";
    case LayerKind::linear: return "linear";
    case LayerKind::dropout: return "dropout";
    case LayerKind::flatten: return "flatten";
  }
  return "?";
}

LayerSpec LayerSpec::conv(std::size_t channels, int group_id, std::size_t kernel) {
  LayerSpec s;
  s.kind = LayerKind::conv_block;
  s.channels = channels;
  s.group_id = group_id;
  s.kernel = kernel;
  return s;
}

LayerSpec LayerSpec::pool(std::size_t window) {
  LayerSpec s;
  s.kind = LayerKind::maxpool;
  s.window = window;
  return s;
}

LayerSpec LayerSpec::dense(std::size_t units) {
  LayerSpec s;
  s.kind = LayerKind::linear;
  s.units = units;
  return s;
}

LayerSpec LayerSpec::drop(double rate) {
  LayerSpec s;
  s.kind = LayerKind::dropout;
  s.rate = rate;
  return s;
}

LayerSpec LayerSpec::flat() {
  LayerSpec s;
  s.kind = LayerKind::flatten;
  return s;
}

ArchSpec ArchSpec::desk_default(std::size_t classes) {
  ArchSpec a;
  a.in_channels = 1;
  a.in_height = 16;
  a.in_width = 16;
  a.trunk = {LayerSpec::conv(8, 1), LayerSpec::pool(2), LayerSpec::conv(16, 2),
             LayerSpec::pool(2), LayerSpec::conv(16, 3)};
  a.head = {LayerSpec::flat(), LayerSpec::drop(0.5), LayerSpec::dense(64), LayerSpec::drop(0.5),
            LayerSpec::dense(classes)};
  return a;
}

template <typename T>
std::vector<std::size_t> BranchSet<T>::digits(std::size_t branch) const {
  std::vector<std::size_t> d(n, 0);
  for (std::size_t l = n; l-- > 0;) {
    d[l] = branch % K;
    branch /= K;
  }
  return d;
}

template <typename T>
Network<T> Network<T>::build(const ArchSpec& arch, std::size_t classes, std::uint64_t seed) {
  if (classes < 2) build_error("need at least 2 classes");
  if (arch.in_channels < 1 || arch.in_height < 1 || arch.in_width < 1) {
    build_error("input extents must be positive");
  }
  Network net;
  net.arch_ = arch;
  net.classes_ = classes;
  const Rng root(seed);

  std::size_t c = arch.in_channels, h = arch.in_height, w = arch.in_width;
  for (std::size_t t = 0; t < arch.trunk.size(); ++t) {
    const LayerSpec& s = arch.trunk[t];
    const std::string where = "trunk layer " + std::to_string(t) + " (" + to_string(s.kind) + ")";
    switch (s.kind) {
      case LayerKind::conv_block: {
        if (s.channels < 1) build_error(where + ": channels must be positive");
        if (s.kernel < 1 || s.kernel % 2 == 0) build_error(where + ": kernel must be odd");
        const std::size_t pad = s.kernel / 2;
        if (s.kernel > h || s.kernel > w) {
          build_error(where + ": kernel larger than " + std::to_string(h) + "x" + std::to_string(w));
        }
        const std::size_t index = net.blocks_.size();
        ConvBlockParams<T> b;
        b.kernel = fan_in_uniform<T>({s.channels, c, s.kernel, s.kernel}, c * s.kernel * s.kernel,
                                     root.derive("conv", index));
        b.gamma = filled_param<T>({s.channels}, T(1));
        b.beta = filled_param<T>({s.channels}, T(0));
        b.bn = BatchNormState<T>(s.channels);
        b.padding = pad;
        b.group_id = s.group_id;
        net.blocks_.push_back(std::move(b));
        net.block_of_trunk_.push_back(index);

        const std::size_t ch = s.channels;
        LocalHead<T> lh;
        lh.conv_kernel = fan_in_uniform<T>({ch, ch, 3, 3}, ch * 9, root.derive("local.conv", index));
        lh.conv_bias = filled_param<T>({ch}, T(0));
        lh.fc_weight = fan_in_uniform<T>({ch * kLocalGrid * kLocalGrid, classes},
                                         ch * kLocalGrid * kLocalGrid, root.derive("local.fc", index));
        lh.fc_bias = filled_param<T>({classes}, T(0));
        net.local_heads_.push_back(std::move(lh));

        std::vector<T> eye(ch * ch, T(0));
        for (std::size_t k = 0; k < ch; ++k) eye[k * ch + k] = T(1);
        net.projections_.push_back(Tensor<T>::parameter({ch, ch, 1, 1}, std::move(eye)));
        c = ch;
        break;
      }
      case LayerKind::maxpool:
        if (s.window < 1) build_error(where + ": window must be positive");
        if (s.window > h || s.window > w) {
          build_error(where + ": window " + std::to_string(s.window) + " larger than " +
                      std::to_string(h) + "x" + std::to_string(w));
        }
        h = (h - s.window) / s.window + 1;
        w = (w - s.window) / s.window + 1;
        net.block_of_trunk_.push_back(npos);
        break;
      default:
        build_error(where + ": only conv and maxpool layers belong in the trunk");
    }
  }
  if (net.blocks_.empty()) build_error("trunk has no conv blocks");

  Shape feat{c, h, w};
  bool flat = false;
  std::size_t last_linear = npos;
  for (std::size_t t = 0; t < arch.head.size(); ++t) {
    if (arch.head[t].kind == LayerKind::linear) last_linear = t;
  }
  if (arch.head.empty() || last_linear != arch.head.size() - 1) {
    build_error("head must end with a linear layer");
  }
  for (std::size_t t = 0; t < arch.head.size(); ++t) {
    const LayerSpec& s = arch.head[t];
    const std::string where = "head layer " + std::to_string(t) + " (" + to_string(s.kind) + ")";
    switch (s.kind) {
      case LayerKind::flatten:
        if (flat) build_error(where + ": already flat");
        feat = {shape_numel(feat)};
        flat = true;
        net.linear_of_head_.push_back(npos);
        break;
      case LayerKind::dropout:
        if (!(s.rate >= 0.0 && s.rate < 1.0)) build_error(where + ": rate must be in [0, 1)");
        net.dropout_shapes_.push_back(feat);
        ++net.dropout_count_;
        net.linear_of_head_.push_back(npos);
        break;
      case LayerKind::linear: {
        if (!flat) build_error(where + ": linear before flatten");
        if (s.units < 1) build_error(where + ": units must be positive");
        if (t == last_linear && s.units != classes) {
          build_error(where + ": final linear has " + std::to_string(s.units) + " units, expected " +
                      std::to_string(classes) + " classes");
        }
        const std::size_t in = feat[0];
        const std::size_t index = net.linears_.size();
        LinearParams<T> p;
        p.weight = fan_in_uniform<T>({in, s.units}, in, root.derive("linear", index));
        p.bias = filled_param<T>({s.units}, T(0));
        net.linears_.push_back(std::move(p));
        net.linear_of_head_.push_back(index);
        feat = {s.units};
        break;
      }
      default:
        build_error(where + ": only flatten, linear and dropout layers belong in the head");
    }
  }
  return net;
}

template <typename T>
void Network<T>::check_layer(std::size_t layer) const {
  if (layer < 1 || layer > blocks_.size()) {
    fail(ErrorKind::dimension, "layer index " + std::to_string(layer) + " outside 1.." +
                                   std::to_string(blocks_.size()));
  }
}

template <typename T>
Tensor<T> Network<T>::apply_block(std::size_t index, const Tensor<T>& x, Mode mode,
                                  bool update_running) {
  auto& b = blocks_[index];
  auto y = conv2d(x, b.kernel, 1, b.padding);
  y = batchnorm2d(y, b.gamma, b.beta, b.bn, mode, update_running);
  return relu(y);
}

template <typename T>
TrunkOutput<T> Network<T>::forward_trunk(const Tensor<T>& x, Mode mode, bool update_running) {
  const Shape expected{arch_.in_channels, arch_.in_height, arch_.in_width};
  if (x.rank() != 4 || Shape(x.shape().begin() + 1, x.shape().end()) != expected) {
    fail(ErrorKind::dimension, "forward_trunk: input " + shape_str(x.shape()) +
                                   " does not match N x " + shape_str(expected));
  }
  TrunkOutput<T> out;
  Tensor<T> act = x;
  for (std::size_t t = 0; t < arch_.trunk.size(); ++t) {
    const std::size_t b = block_of_trunk_[t];
    if (b != npos) {
      out.block_inputs.push_back(act);
      act = apply_block(b, act, mode, update_running);
      out.activations.push_back(act);
    } else {
      act = maxpool2d(act, arch_.trunk[t].window, arch_.trunk[t].window);
    }
  }
  out.output = act;
  return out;
}

template <typename T>
Tensor<T> Network<T>::local_view(std::size_t layer, const TrunkOutput<T>& trunk, Mode mode) {
  check_layer(layer);
  return apply_block(layer - 1, detach(trunk.block_inputs.at(layer - 1)), mode, false);
}

template <typename T>
std::vector<Tensor<T>> Network<T>::sample_masks(std::size_t batch, std::size_t K, Rng rng) const {
  std::vector<Tensor<T>> masks;
  std::size_t ordinal = 0;
  for (const LayerSpec& s : arch_.head) {
    if (s.kind != LayerKind::dropout) continue;
    Shape shape{batch};
    shape.insert(shape.end(), dropout_shapes_[ordinal].begin(), dropout_shapes_[ordinal].end());
    for (std::size_t k = 0; k < K; ++k) {
      Rng stream = rng.derive("mask", ordinal, k);
      std::vector<T> m(shape_numel(shape));
      for (T& v : m) v = stream.bernoulli(1.0 - s.rate) ? T(1) : T(0);
      masks.push_back(Tensor<T>::constant(shape, std::move(m)));
    }
    ++ordinal;
  }
  return masks;
}

template <typename T>
void Network<T>::head_recursive(std::size_t layer, const Tensor<T>& act,
                                std::size_t dropout_ordinal, std::size_t K,
                                const std::vector<Tensor<T>>& masks, std::vector<Tensor<T>>& out) {
  Tensor<T> a = act;
  for (std::size_t t = layer; t < arch_.head.size(); ++t) {
    const LayerSpec& s = arch_.head[t];
    switch (s.kind) {
      case LayerKind::flatten:
        a = flatten(a);
        break;
      case LayerKind::linear: {
        const auto& p = linears_[linear_of_head_[t]];
        a = linear(a, p.weight, p.bias);
        if (t + 1 != arch_.head.size()) a = relu(a);
        break;
      }
      case LayerKind::dropout:
        if (masks.empty()) break;  // evaluation: identity
        for (std::size_t k = 0; k < K; ++k) {
          head_recursive(t + 1, dropout_apply(a, masks[dropout_ordinal * K + k], s.rate),
                         dropout_ordinal + 1, K, masks, out);
        }
        return;
      default:
        break;
    }
  }
  out.push_back(a);
}

template <typename T>
BranchSet<T> Network<T>::forward_branches(const Tensor<T>& trunk_out, std::size_t K, Rng rng) {
  if (K < 1) fail(ErrorKind::parameter, "forward_branches: K must be >= 1");
  return forward_branches(trunk_out, K, sample_masks(trunk_out.dim(0), K, rng));
}

template <typename T>
BranchSet<T> Network<T>::forward_branches(const Tensor<T>& trunk_out, std::size_t K,
                                          std::vector<Tensor<T>> masks) {
  if (K < 1) fail(ErrorKind::parameter, "forward_branches: K must be >= 1");
  if (masks.size() != dropout_count_ * K) {
    fail(ErrorKind::dimension, "forward_branches: expected " + std::to_string(dropout_count_ * K) +
                                   " masks, got " + std::to_string(masks.size()));
  }
  BranchSet<T> set;
  set.K = K;
  set.n = dropout_count_;
  set.masks = std::move(masks);
  if (dropout_count_ == 0) {
    // No dropout layers: a single deterministic prediction.
    head_recursive(0, trunk_out, 0, K, {}, set.logits);
  } else {
    head_recursive(0, trunk_out, 0, K, set.masks, set.logits);
  }
  return set;
}

template <typename T>
Tensor<T> Network<T>::forward_head_eval(const Tensor<T>& trunk_out) {
  std::vector<Tensor<T>> out;
  head_recursive(0, trunk_out, 0, 1, {}, out);
  return out.front();
}

template <typename T>
Tensor<T> Network<T>::predict(const Tensor<T>& x) {
  NoGradGuard no_grad;
  return forward_head_eval(forward_trunk(x, Mode::eval).output);
}

template <typename T>
Tensor<T> Network<T>::forward_local_head(std::size_t layer, const Tensor<T>& h) {
  check_layer(layer);
  const auto& lh = local_heads_[layer - 1];
  auto a = adaptive_maxpool2d(h, kLocalGrid, kLocalGrid);
  a = relu(conv2d(a, lh.conv_kernel, lh.conv_bias, 1, 1));
  return linear(flatten(a), lh.fc_weight, lh.fc_bias);
}

template <typename T>
Tensor<T> Network<T>::project(std::size_t layer, const Tensor<T>& h) {
  check_layer(layer);
  return conv2d(h, projections_[layer - 1], 1, 0);
}

template <typename T>
ConvBlockParams<T>& Network<T>::block(std::size_t layer) {
  check_layer(layer);
  return blocks_[layer - 1];
}

template <typename T>
LocalHead<T>& Network<T>::local_head(std::size_t layer) {
  check_layer(layer);
  return local_heads_[layer - 1];
}

template <typename T>
Tensor<T>& Network<T>::projection(std::size_t layer) {
  check_layer(layer);
  return projections_[layer - 1];
}

template <typename T>
std::vector<ParamRef<T>> Network<T>::parameters() {
  std::vector<ParamRef<T>> out;
  for (std::size_t i = 0; i < blocks_.size(); ++i) {
    const std::string p = "block" + std::to_string(i + 1);
    out.push_back({p + ".kernel", blocks_[i].kernel, ParamScope::trunk_block, i + 1});
    out.push_back({p + ".gamma", blocks_[i].gamma, ParamScope::trunk_block, i + 1});
    out.push_back({p + ".beta", blocks_[i].beta, ParamScope::trunk_block, i + 1});
  }
  for (std::size_t i = 0; i < linears_.size(); ++i) {
    const std::string p = "head.linear" + std::to_string(i + 1);
    out.push_back({p + ".weight", linears_[i].weight, ParamScope::head, 0});
    out.push_back({p + ".bias", linears_[i].bias, ParamScope::head, 0});
  }
  for (std::size_t i = 0; i < local_heads_.size(); ++i) {
    const std::string p = "local" + std::to_string(i + 1);
    out.push_back({p + ".conv.kernel", local_heads_[i].conv_kernel, ParamScope::local_head, i + 1});
    out.push_back({p + ".conv.bias", local_heads_[i].conv_bias, ParamScope::local_head, i + 1});
    out.push_back({p + ".fc.weight", local_heads_[i].fc_weight, ParamScope::local_head, i + 1});
    out.push_back({p + ".fc.bias", local_heads_[i].fc_bias, ParamScope::local_head, i + 1});
  }
  for (std::size_t i = 0; i < projections_.size(); ++i) {
    out.push_back({"proj" + std::to_string(i + 1) + ".kernel", projections_[i],
                   ParamScope::projection, i + 1});
  }
  return out;
}

template struct BranchSet<float>;
template struct BranchSet<double>;
template class Network<float>;
template class Network<double>;

}  // namespace collab
