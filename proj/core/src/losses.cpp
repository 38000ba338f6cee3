#include "collab/losses.hpp"

#include <algorithm>
#include <cmath>
#include <set>
#include <string>

#include "collab/ops.hpp"

namespace collab {

namespace {

void config_error(const std::string& what) { fail(ErrorKind::config, "loss config: " + what); }

bool finite_nonneg(double v) { return std::isfinite(v) && v >= 0.0; }

template <typename T>
void expect_matrix_pair(const Tensor<T>& a, const Tensor<T>& z, const char* what) {
  if (a.rank() != 2 || z.rank() != 2 || a.shape() != z.shape()) {
    fail(ErrorKind::dimension, std::string(what) + ": target " + shape_str(a.shape()) +
                                   " and logits " + shape_str(z.shape()) + " must be equal N x m");
  }
  if (a.dim(0) == 0) fail(ErrorKind::dimension, std::string(what) + ": empty batch");
}

// -sum(target * log psi(z; T)) / N
template <typename T>
Tensor<T> cross_entropy(const Tensor<T>& target, const Tensor<T>& z, double temperature) {
  const double n = static_cast<double>(z.dim(0));
  return scale(sum(mul(target, log_softmax_temperature(z, temperature))), -1.0 / n);
}

}  // namespace

void LossConfig::validate(std::size_t depth, std::size_t dropouts) const {
  if (K < 1) config_error("K must be >= 1");
  if (out) {
    std::size_t branches = 1;
    for (std::size_t l = 0; l < dropouts; ++l) branches *= K;
    if (branches < 2) {
      config_error("output collaboration needs K^n >= 2 predictions (K = " + std::to_string(K) +
                   ", n = " + std::to_string(dropouts) + "): degenerate peers");
    }
  }
  if (!(std::isfinite(T) && T > 0.0)) config_error("T must be a positive finite number");
  if (!(std::isfinite(alpha_out) && alpha_out >= 0.0 && alpha_out <= 1.0)) {
    config_error("alpha_out must be in [0, 1]");
  }
  if (!finite_nonneg(alpha_mid) || !finite_nonneg(beta_mid)) {
    config_error("alpha_mid and beta_mid must be finite and nonnegative");
  }
  if (!finite_nonneg(w_pp)) config_error("w_pp must be finite and nonnegative");
  if (!finite_nonneg(lambda_kernel)) config_error("lambda_kernel must be finite and nonnegative");
  if (!pull_push_schedule.empty()) {
    if (pull_push_schedule.size() != depth) {
      config_error("pull_push_schedule has " + std::to_string(pull_push_schedule.size()) +
                   " entries for " + std::to_string(depth) + " conv blocks");
    }
    for (const auto& [a, b] : pull_push_schedule) {
      if (!finite_nonneg(a) || !finite_nonneg(b)) {
        config_error("pull_push_schedule weights must be finite and nonnegative");
      }
    }
  }
}

std::pair<double, double> LossConfig::pull_push_weights(std::size_t layer,
                                                        std::size_t depth) const {
  if (layer < 1 || layer > depth) {
    fail(ErrorKind::dimension, "pull-push layer " + std::to_string(layer) + " outside 1.." +
                                   std::to_string(depth));
  }
  if (!pull_push_schedule.empty()) return pull_push_schedule.at(layer - 1);
  const double frac = static_cast<double>(layer) / static_cast<double>(depth);
  return {w_pp * frac, w_pp * (1.0 - frac)};
}

std::vector<int> LossConfig::resolved_kernel_groups(const ArchSpec& arch) const {
  if (!kernel_groups.empty()) return kernel_groups;
  std::set<int> groups;
  for (const auto& s : arch.trunk) {
    if (s.kind == LayerKind::conv_block) groups.insert(s.group_id);
  }
  std::vector<int> top(groups.rbegin(), groups.rend());
  if (top.size() > 2) top.resize(2);
  std::sort(top.begin(), top.end());
  return top;
}

template <typename T>
Tensor<T> j_hard(const Tensor<T>& y, const Tensor<T>& z, double temperature) {
  expect_matrix_pair(y, z, "j_hard");
  const std::size_t N = y.dim(0), m = y.dim(1);
  for (std::size_t n = 0; n < N; ++n) {
    std::size_t ones = 0;
    for (std::size_t k = 0; k < m; ++k) {
      const T v = y.values()[n * m + k];
      if (v == T(1)) {
        ++ones;
      } else if (v != T(0)) {
        ones = 2;
        break;
      }
    }
    if (ones != 1) {
      fail(ErrorKind::input, "j_hard: target row " + std::to_string(n) + " is not one-hot");
    }
  }
  return cross_entropy(y, z, temperature);
}

template <typename T>
Tensor<T> j_soft(const Tensor<T>& q, const Tensor<T>& z, double temperature) {
  expect_matrix_pair(q, z, "j_soft");
  const std::size_t N = q.dim(0), m = q.dim(1);
  for (std::size_t n = 0; n < N; ++n) {
    double s = 0.0;
    for (std::size_t k = 0; k < m; ++k) {
      const double v = q.values()[n * m + k];
      if (!(v >= 0.0)) {
        fail(ErrorKind::input, "j_soft: target row " + std::to_string(n) + " has a negative entry");
      }
      s += v;
    }
    if (std::abs(s - 1.0) > 1e-6) {
      fail(ErrorKind::input, "j_soft: target row " + std::to_string(n) + " sums to " +
                                 std::to_string(s));
    }
  }
  return cross_entropy(q, z, temperature);
}

template <typename T>
Tensor<T> peer_target(const std::vector<Tensor<T>>& logits, std::size_t exclude,
                      double temperature) {
  if (logits.size() < 2) {
    fail(ErrorKind::degenerate, "peer_target: need at least 2 predictions, got " +
                                    std::to_string(logits.size()));
  }
  if (exclude >= logits.size()) {
    fail(ErrorKind::dimension, "peer_target: exclude index " + std::to_string(exclude) +
                                   " outside 0.." + std::to_string(logits.size() - 1));
  }
  const Shape& shape = logits[exclude].shape();
  std::vector<T> avg(logits[exclude].numel(), T(0));
  for (std::size_t j = 0; j < logits.size(); ++j) {
    if (j == exclude) continue;
    if (logits[j].shape() != shape) fail(ErrorKind::dimension, "peer_target: mixed logit shapes");
    const auto v = logits[j].values();
    for (std::size_t k = 0; k < avg.size(); ++k) avg[k] += v[k];
  }
  const T inv = T(1) / static_cast<T>(logits.size() - 1);
  for (T& v : avg) v *= inv;
  return softmax_temperature(Tensor<T>::constant(shape, std::move(avg)), temperature);
}

template <typename T>
Tensor<T> l_out(const Tensor<T>& y, const BranchSet<T>& branches, const LossConfig& cfg) {
  const auto& z = branches.logits;
  if (z.size() < 2) {
    fail(ErrorKind::degenerate, "l_out: need at least 2 branches, got " + std::to_string(z.size()));
  }
  Tensor<T> acc;
  for (std::size_t i = 0; i < z.size(); ++i) {
    const Tensor<T> q = peer_target(z, i, cfg.T);
    const Tensor<T> term = add(scale(j_hard(y, z[i], 1.0), cfg.alpha_out),
                               scale(j_soft(q, z[i], cfg.T), 1.0 - cfg.alpha_out));
    acc = acc.defined() ? add(acc, term) : term;
  }
  return scale(acc, 1.0 / static_cast<double>(z.size()));
}

template <typename T>
std::optional<Tensor<T>> mid_target(const std::vector<Tensor<T>>& z_list, std::size_t layer,
                                    double temperature, bool include_self) {
  const std::size_t N = z_list.size();
  if (layer < 1 || layer > N) {
    fail(ErrorKind::dimension, "mid_target: layer " + std::to_string(layer) + " outside 1.." +
                                   std::to_string(N));
  }
  const std::size_t first = include_self ? layer : layer + 1;  // 1-based
  if (first > N) return std::nullopt;
  const Shape& shape = z_list[layer - 1].shape();
  std::vector<T> avg(z_list[layer - 1].numel(), T(0));
  for (std::size_t j = first; j <= N; ++j) {
    if (z_list[j - 1].shape() != shape) fail(ErrorKind::dimension, "mid_target: mixed logit shapes");
    const auto v = z_list[j - 1].values();
    for (std::size_t k = 0; k < avg.size(); ++k) avg[k] += v[k];
  }
  const T inv = T(1) / static_cast<T>(N - first + 1);
  for (T& v : avg) v *= inv;
  return softmax_temperature(Tensor<T>::constant(shape, std::move(avg)), temperature);
}

template <typename T>
Tensor<T> l_mid_layer(const Tensor<T>& y, const std::vector<Tensor<T>>& z_list, std::size_t layer,
                      const LossConfig& cfg) {
  const auto q = mid_target(z_list, layer, cfg.T, cfg.mid_target_includes_self);
  const Tensor<T>& z = z_list[layer - 1];
  Tensor<T> loss = scale(j_hard(y, z, cfg.T), cfg.alpha_mid);
  if (q) loss = add(loss, scale(j_soft(*q, z, cfg.T), cfg.beta_mid));
  return loss;
}

template <typename T>
Tensor<T> std_descriptor(const Tensor<T>& maps) {
  return center_columns(spatial_std(maps));
}

template <typename T>
Tensor<T> similarity_matrix(const Tensor<T>& centered) {
  return cosine_similarity(centered, 1e-12);
}

template <typename T>
Tensor<T> target_similarity(const Tensor<T>& y) {
  return detach(similarity_matrix(center_columns(detach(y))));
}

template <typename T>
Tensor<T> input_similarity(const Tensor<T>& x) {
  return detach(similarity_matrix(std_descriptor(detach(x))));
}

template <typename T>
Tensor<T> l_pull_push(const Tensor<T>& projected, const Tensor<T>& target_sim,
                      const Tensor<T>& input_sim, double alpha_pull, double alpha_push) {
  if (projected.rank() != 4 || projected.dim(0) < 2) {
    fail(ErrorKind::input, "pull-push needs a batch of at least 2 feature maps, got " +
                               shape_str(projected.shape()));
  }
  const Tensor<T> s = similarity_matrix(std_descriptor(projected));
  const Tensor<T> pull = frobenius_norm(sub(s, target_sim));
  const Tensor<T> push = frobenius_norm(sub(s, input_sim));
  return add(scale(pull, alpha_pull), scale(push, -alpha_push));
}

template <typename T>
Tensor<T> l_pull_push_layer(const Tensor<T>& x, const Tensor<T>& y, const Tensor<T>& h_local,
                            std::size_t layer, Network<T>& net, const LossConfig& cfg) {
  if (x.rank() < 1 || x.dim(0) < 2) {
    fail(ErrorKind::input, "pull-push needs a batch of at least 2, got " + shape_str(x.shape()));
  }
  const auto [ap, apush] = cfg.pull_push_weights(layer, net.depth());
  return l_pull_push(net.project(layer, h_local), target_similarity(y), input_similarity(x), ap,
                     apush);
}

template <typename T>
Tensor<T> kernel_covariance(const Tensor<T>& kernel) {
  if (kernel.rank() < 2 || kernel.dim(0) < 1) {
    fail(ErrorKind::dimension, "kernel_covariance: expected F x ..., got " + shape_str(kernel.shape()));
  }
  const std::size_t F = kernel.dim(0);
  const std::size_t G = kernel.numel() / F;
  if (G < 2) {
    fail(ErrorKind::input, "kernel_covariance: each filter needs at least 2 weights, got " +
                               std::to_string(G));
  }
  const Tensor<T> w = standardize_rows(reshape(kernel, {F, G}), 1e-8);
  return scale(matmul(w, transpose(w)), 1.0 / static_cast<double>(G));
}

template <typename T>
Tensor<T> kernel_decorrelation(const Tensor<T>& kernel) {
  return frobenius_norm(zero_diagonal(kernel_covariance(kernel)));
}

template <typename T>
Tensor<T> l_kernel(Network<T>& net, const LossConfig& cfg) {
  const std::vector<int> groups = cfg.resolved_kernel_groups(net.arch());
  if (groups.empty()) config_error("kernel loss active but no conv groups selected");
  Tensor<T> acc;
  for (std::size_t i = 1; i <= net.depth(); ++i) {
    auto& b = net.block(i);
    if (std::find(groups.begin(), groups.end(), b.group_id) == groups.end()) continue;
    const Tensor<T> term = kernel_decorrelation(b.kernel);
    acc = acc.defined() ? add(acc, term) : term;
  }
  if (!acc.defined()) config_error("kernel loss groups match no conv block");
  return acc;
}

namespace {

// Tags a non-finite failure inside one term with that term's name.
template <typename F>
auto named_term(const char* name, F&& f) {
  try {
    return f();
  } catch (const Error& e) {
    if (e.kind() != ErrorKind::numeric) throw;
    fail(ErrorKind::numeric, std::string("non-finite ") + name + " loss: " + e.what());
  }
}

}  // namespace

template <typename T>
TotalLoss<T> total_loss(const Tensor<T>& x, const std::vector<int>& labels, Network<T>& net,
                        const LossConfig& cfg, Rng rng) {
  if (x.rank() != 4 || x.dim(0) != labels.size()) {
    fail(ErrorKind::dimension, "total_loss: " + std::to_string(labels.size()) +
                                   " labels for input " + shape_str(x.shape()));
  }
  const Tensor<T> y = one_hot<T>(labels, net.classes());
  TrunkOutput<T> trunk = net.forward_trunk(x, Mode::train, true);

  TotalLoss<T> result;
  Tensor<T> total;
  const std::size_t K = cfg.out ? cfg.K : 1;
  const BranchSet<T> branches = net.forward_branches(trunk.output, K, rng.derive("dropout"));
  if (cfg.out) {
    total = named_term("out", [&] { return l_out(y, branches, cfg); });
    result.terms.out = static_cast<double>(total.item());
  } else {
    total = named_term("baseline", [&] { return j_hard(y, branches.logits.front(), 1.0); });
    result.terms.baseline = static_cast<double>(total.item());
  }
  result.prediction_logits.assign(branches.logits.front().numel(), T(0));
  for (const auto& z : branches.logits) {
    const auto v = z.values();
    for (std::size_t k = 0; k < v.size(); ++k) result.prediction_logits[k] += v[k];
  }
  for (T& v : result.prediction_logits) v /= static_cast<T>(branches.logits.size());

  if (cfg.mid || cfg.pull_push) {
    std::vector<Tensor<T>> views;
    for (std::size_t i = 1; i <= net.depth(); ++i) views.push_back(net.local_view(i, trunk, Mode::train));

    if (cfg.mid) {
      std::vector<Tensor<T>> z_list;
      for (std::size_t i = 1; i <= net.depth(); ++i) {
        z_list.push_back(net.forward_local_head(i, views[i - 1]));
      }
      Tensor<T> mid;
      for (std::size_t i = 1; i <= net.depth(); ++i) {
        const Tensor<T> term = named_term("mid", [&] { return l_mid_layer(y, z_list, i, cfg); });
        mid = mid.defined() ? add(mid, term) : term;
      }
      result.terms.mid = static_cast<double>(mid.item());
      total = add(total, mid);
    }
    if (cfg.pull_push) {
      if (x.dim(0) < 2) fail(ErrorKind::input, "pull-push needs a batch of at least 2");
      const Tensor<T> s_y = target_similarity(y);
      const Tensor<T> s_x = input_similarity(x);
      Tensor<T> pp;
      for (std::size_t i = 1; i <= net.depth(); ++i) {
        const auto [ap, apush] = cfg.pull_push_weights(i, net.depth());
        const Tensor<T> term = named_term(
            "pull_push", [&] { return l_pull_push(net.project(i, views[i - 1]), s_y, s_x, ap, apush); });
        pp = pp.defined() ? add(pp, term) : term;
      }
      result.terms.pull_push = static_cast<double>(pp.item());
      total = add(total, pp);
    }
  }
  if (cfg.kernel) {
    const Tensor<T> k = named_term("kernel", [&] { return scale(l_kernel(net, cfg), cfg.lambda_kernel); });
    result.terms.kernel = static_cast<double>(k.item());
    total = add(total, k);
  }
  result.total = total;
  return result;
}

#define COLLAB_INSTANTIATE_LOSSES(T)                                                              \
  template Tensor<T> j_hard(const Tensor<T>&, const Tensor<T>&, double);                          \
  template Tensor<T> j_soft(const Tensor<T>&, const Tensor<T>&, double);                          \
  template Tensor<T> peer_target(const std::vector<Tensor<T>>&, std::size_t, double);             \
  template Tensor<T> l_out(const Tensor<T>&, const BranchSet<T>&, const LossConfig&);             \
  template std::optional<Tensor<T>> mid_target(const std::vector<Tensor<T>>&, std::size_t,        \
                                               double, bool);                                     \
  template Tensor<T> l_mid_layer(const Tensor<T>&, const std::vector<Tensor<T>>&, std::size_t,    \
                                 const LossConfig&);                                              \
  template Tensor<T> std_descriptor(const Tensor<T>&);                                            \
  template Tensor<T> similarity_matrix(const Tensor<T>&);                                         \
  template Tensor<T> target_similarity(const Tensor<T>&);                                         \
  template Tensor<T> input_similarity(const Tensor<T>&);                                          \
  template Tensor<T> l_pull_push(const Tensor<T>&, const Tensor<T>&, const Tensor<T>&, double,    \
                                 double);                                                         \
  template Tensor<T> l_pull_push_layer(const Tensor<T>&, const Tensor<T>&, const Tensor<T>&,      \
                                       std::size_t, Network<T>&, const LossConfig&);              \
  template Tensor<T> kernel_covariance(const Tensor<T>&);                                         \
  template Tensor<T> kernel_decorrelation(const Tensor<T>&);                                      \
  template Tensor<T> l_kernel(Network<T>&, const LossConfig&);                                    \
  template TotalLoss<T> total_loss(const Tensor<T>&, const std::vector<int>&, Network<T>&,        \
                                   const LossConfig&, Rng);

COLLAB_INSTANTIATE_LOSSES(float)
COLLAB_INSTANTIATE_LOSSES(double)

#undef COLLAB_INSTANTIATE_LOSSES

}  // namespace collab
