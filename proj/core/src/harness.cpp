#include "collab/harness.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <numeric>
#include <string>

namespace collab {

namespace {

void config_error(const std::string& what) { fail(ErrorKind::config, what); }

std::size_t argmax_row(const auto* row, std::size_t m) {
  std::size_t best = 0;
  for (std::size_t k = 1; k < m; ++k) {
    if (row[k] > row[best]) best = k;
  }
  return best;
}

void check_term(double v, const char* name, std::size_t epoch, std::size_t batch) {
  if (!std::isfinite(v)) {
    fail(ErrorKind::numeric, std::string("non-finite ") + name + " loss at epoch " +
                                 std::to_string(epoch) + ", batch " + std::to_string(batch));
  }
}

}  // namespace

void TrainConfig::validate() const {
  if (batch_size < 1) config_error("train.batch_size must be >= 1");
  if (!(std::isfinite(lr0) && lr0 >= 0.0)) config_error("train.lr0 must be finite and >= 0");
  for (std::size_t i = 0; i < milestones.size(); ++i) {
    if (i > 0 && milestones[i] <= milestones[i - 1]) {
      config_error("train.milestones must be strictly increasing");
    }
    if (milestones[i] >= epochs) {
      config_error("train.milestones must be < epochs (" + std::to_string(epochs) + ")");
    }
  }
  if (!(decay > 0.0 && decay <= 1.0)) config_error("train.decay must be in (0, 1]");
  if (!(momentum >= 0.0 && momentum < 1.0)) config_error("train.momentum must be in [0, 1)");
  if (!(std::isfinite(weight_decay) && weight_decay >= 0.0)) {
    config_error("train.weight_decay must be finite and >= 0");
  }
  if (precision != 32 && precision != 64) config_error("train.precision must be 32 or 64");
}

void NoiseConfig::validate() const {
  if (!(level >= 0.0 && level <= 1.0)) config_error("noise.level must be in [0, 1]");
}

double lr_at_epoch(const TrainConfig& cfg, std::size_t epoch) {
  const auto passed = std::count_if(cfg.milestones.begin(), cfg.milestones.end(),
                                    [epoch](std::size_t m) { return m <= epoch; });
  return cfg.lr0 * std::pow(cfg.decay, static_cast<double>(passed));
}

template <typename T>
void sgd_momentum_step(std::span<Tensor<T>> params, std::vector<std::vector<T>>& velocity,
                       double lr, double momentum, double weight_decay) {
  if (velocity.size() != params.size()) {
    fail(ErrorKind::dimension, "sgd: " + std::to_string(velocity.size()) +
                                   " momentum buffers for " + std::to_string(params.size()) +
                                   " parameters");
  }
  const T lr_t = static_cast<T>(lr);
  const T mu = static_cast<T>(momentum);
  const T wd = static_cast<T>(weight_decay);
  for (std::size_t i = 0; i < params.size(); ++i) {
    auto& p = params[i];
    auto& v = velocity[i];
    if (v.size() != p.numel()) {
      fail(ErrorKind::dimension, "sgd: momentum buffer " + std::to_string(i) + " has " +
                                     std::to_string(v.size()) + " entries for parameter " +
                                     shape_str(p.shape()));
    }
    auto w = p.mutable_values();
    const bool has = p.has_grad();
    const auto g = has ? p.grad() : std::span<const T>();
    for (std::size_t k = 0; k < w.size(); ++k) {
      const T gk = has ? g[k] : T(0);
      v[k] = mu * v[k] + (gk + wd * w[k]);
      w[k] -= lr_t * v[k];
    }
  }
}

template <typename T>
SgdMomentum<T>::SgdMomentum(std::vector<Tensor<T>> params) : params_(std::move(params)) {
  velocity_.reserve(params_.size());
  for (const auto& p : params_) velocity_.emplace_back(p.numel(), T(0));
}

template <typename T>
void SgdMomentum<T>::zero_grad() {
  for (auto& p : params_) p.zero_grad();
}

template <typename T>
void SgdMomentum<T>::step(double lr, double momentum, double weight_decay) {
  sgd_momentum_step<T>(params_, velocity_, lr, momentum, weight_decay);
}

NoisyLabels inject_label_noise(const std::vector<int>& labels, std::size_t classes,
                               const NoiseConfig& noise, std::size_t epoch, std::uint64_t seed) {
  noise.validate();
  NoisyLabels out{labels, {}};
  const std::size_t n = labels.size();
  const auto count = static_cast<std::size_t>(std::floor(noise.level * static_cast<double>(n)));
  if (count == 0 || classes == 0) return out;

  const Rng root = Rng(seed).derive("label-noise");
  Rng pick = root.derive("indices", noise.reshuffle_per_epoch ? epoch : 0);
  // Partial Fisher-Yates: the first `count` slots are a uniform subset.
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), std::size_t{0});
  for (std::size_t i = 0; i < count; ++i) {
    const std::size_t j = i + pick.uniform_index(n - i);
    std::swap(order[i], order[j]);
  }
  out.corrupted.assign(order.begin(), order.begin() + static_cast<std::ptrdiff_t>(count));
  std::sort(out.corrupted.begin(), out.corrupted.end());

  Rng draw = root.derive("labels", epoch);
  for (std::size_t idx : out.corrupted) {
    out.labels[idx] = static_cast<int>(draw.uniform_index(classes));
  }
  return out;
}

template <typename T>
EpochRecord train_epoch(Network<T>& net, SgdMomentum<T>& opt, const Dataset& train,
                        const std::vector<int>& labels, const TrainConfig& cfg,
                        const LossConfig& loss_cfg, std::size_t epoch) {
  if (labels.size() != train.size()) {
    fail(ErrorKind::dimension, "train_epoch: " + std::to_string(labels.size()) + " labels for " +
                                   std::to_string(train.size()) + " samples");
  }
  const Rng root(cfg.seed);
  std::vector<std::size_t> order(train.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  Rng shuffle = root.derive("shuffle", epoch);
  for (std::size_t i = order.size(); i > 1; --i) {
    std::swap(order[i - 1], order[shuffle.uniform_index(i)]);
  }

  EpochRecord rec;
  rec.epoch = epoch;
  rec.lr = lr_at_epoch(cfg, epoch);
  std::size_t batches = 0;
  std::size_t seen = 0;
  std::size_t wrong = 0;
  const std::size_t m = net.classes();
  for (std::size_t start = 0; start < order.size(); start += cfg.batch_size) {
    const std::size_t end = std::min(order.size(), start + cfg.batch_size);
    if (end - start < 2) break;
    const std::vector<std::size_t> idx(order.begin() + static_cast<std::ptrdiff_t>(start),
                                       order.begin() + static_cast<std::ptrdiff_t>(end));
    std::vector<int> batch_labels;
    batch_labels.reserve(idx.size());
    for (std::size_t i : idx) batch_labels.push_back(labels[i]);

    opt.zero_grad();
    const Tensor<T> x = train.batch<T>(idx);
    TotalLoss<T> loss = [&] {
      try {
        return total_loss(x, batch_labels, net, loss_cfg, root.derive("batch", epoch, batches));
      } catch (const Error& e) {
        if (e.kind() != ErrorKind::numeric) throw;
        fail(ErrorKind::numeric, std::string(e.what()) + " (epoch " + std::to_string(epoch) + ", batch " +
                                     std::to_string(batches) + ")");
      }
    }();
    check_term(loss.terms.baseline, "baseline", epoch, batches);
    check_term(loss.terms.out, "out", epoch, batches);
    check_term(loss.terms.mid, "mid", epoch, batches);
    check_term(loss.terms.pull_push, "pull_push", epoch, batches);
    check_term(loss.terms.kernel, "kernel", epoch, batches);
    check_term(static_cast<double>(loss.total.item()), "total", epoch, batches);
    backward(loss.total);
    opt.step(rec.lr, cfg.momentum, cfg.weight_decay);

    rec.terms.baseline += loss.terms.baseline;
    rec.terms.out += loss.terms.out;
    rec.terms.mid += loss.terms.mid;
    rec.terms.pull_push += loss.terms.pull_push;
    rec.terms.kernel += loss.terms.kernel;
    for (std::size_t b = 0; b < idx.size(); ++b) {
      if (static_cast<int>(argmax_row(loss.prediction_logits.data() + b * m, m)) != batch_labels[b]) {
        ++wrong;
      }
    }
    seen += idx.size();
    ++batches;
  }
  if (batches > 0) {
    const double inv = 1.0 / static_cast<double>(batches);
    rec.terms.baseline *= inv;
    rec.terms.out *= inv;
    rec.terms.mid *= inv;
    rec.terms.pull_push *= inv;
    rec.terms.kernel *= inv;
    rec.train_error = 100.0 * static_cast<double>(wrong) / static_cast<double>(seen);
  }
  rec.train_loss_total = rec.terms.sum();
  return rec;
}

template <typename T>
double evaluate(Network<T>& net, const Dataset& data) {
  if (data.size() == 0) return 0.0;
  constexpr std::size_t kChunk = 256;
  const std::size_t m = net.classes();
  std::size_t wrong = 0;
  for (std::size_t start = 0; start < data.size(); start += kChunk) {
    const std::size_t end = std::min(data.size(), start + kChunk);
    std::vector<std::size_t> idx(end - start);
    std::iota(idx.begin(), idx.end(), start);
    const Tensor<T> logits = net.predict(data.batch<T>(idx));
    const auto v = logits.values();
    for (std::size_t b = 0; b < idx.size(); ++b) {
      if (static_cast<int>(argmax_row(v.data() + b * m, m)) != data.labels[idx[b]]) ++wrong;
    }
  }
  return 100.0 * static_cast<double>(wrong) / static_cast<double>(data.size());
}

template <typename T>
RunMetrics run_experiment(Network<T>& net, const TrainConfig& cfg, const LossConfig& loss_cfg,
                          const NoiseConfig& noise, const SplitDataset& data,
                          const EpochCallback& on_epoch) {
  cfg.validate();
  noise.validate();
  loss_cfg.validate(net.depth(), net.dropout_count());
  const auto started = std::chrono::steady_clock::now();

  std::vector<Tensor<T>> params;
  for (auto& p : net.parameters()) params.push_back(p.tensor);
  SgdMomentum<T> opt(std::move(params));

  RunMetrics metrics;
  metrics.initial_test_error = evaluate(net, data.test);
  metrics.best_test_error = metrics.initial_test_error;
  for (std::size_t epoch = 0; epoch < cfg.epochs; ++epoch) {
    const NoisyLabels noisy =
        inject_label_noise(data.train.labels, data.train.classes, noise, epoch, cfg.seed);
    EpochRecord rec = train_epoch(net, opt, data.train, noisy.labels, cfg, loss_cfg, epoch);
    rec.noisy_labels = noisy.corrupted.size();
    rec.test_error = evaluate(net, data.test);
    if (metrics.epochs.empty() || rec.test_error < metrics.best_test_error) {
      metrics.best_test_error = rec.test_error;
      metrics.best_epoch = epoch;
    }
    metrics.epochs.push_back(rec);
    if (on_epoch) on_epoch(rec);
  }
  metrics.wall_time_s =
      std::chrono::duration<double>(std::chrono::steady_clock::now() - started).count();
  return metrics;
}

template <typename T>
RunMetrics run_experiment(const ArchSpec& arch, const TrainConfig& cfg, const LossConfig& loss_cfg,
                          const NoiseConfig& noise, const SplitDataset& data,
                          const EpochCallback& on_epoch) {
  Network<T> net = build_network<T>(arch, data.train.classes, cfg.seed);
  return run_experiment<T>(net, cfg, loss_cfg, noise, data, on_epoch);
}

#define COLLAB_INSTANTIATE_HARNESS(T)                                                          \
  template void sgd_momentum_step(std::span<Tensor<T>>, std::vector<std::vector<T>>&, double, \
                                  double, double);                                            \
  template class SgdMomentum<T>;                                                               \
  template EpochRecord train_epoch(Network<T>&, SgdMomentum<T>&, const Dataset&,              \
                                   const std::vector<int>&, const TrainConfig&,               \
                                   const LossConfig&, std::size_t);                           \
  template double evaluate(Network<T>&, const Dataset&);                                       \
  template RunMetrics run_experiment(Network<T>&, const TrainConfig&, const LossConfig&,      \
                                     const NoiseConfig&, const SplitDataset&,                 \
                                     const EpochCallback&);                                   \
  template RunMetrics run_experiment<T>(const ArchSpec&, const TrainConfig&,                   \
                                        const LossConfig&, const NoiseConfig&,                 \
                                        const SplitDataset&, const EpochCallback&);

COLLAB_INSTANTIATE_HARNESS(float)
COLLAB_INSTANTIATE_HARNESS(double)

#undef COLLAB_INSTANTIATE_HARNESS

}  // namespace collab
