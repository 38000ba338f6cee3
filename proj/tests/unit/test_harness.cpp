#include <gtest/gtest.h>

#include <cmath>
#include <set>

#include "collab/data.hpp"
#include "collab/harness.hpp"
#include "expect.hpp"
#include "generators.hpp"

using namespace collab;

namespace {

ArchSpec tiny_arch(std::size_t classes) {
  ArchSpec a;
  a.in_channels = 1;
  a.in_height = a.in_width = 8;
  a.trunk = {LayerSpec::conv(4, 1), LayerSpec::pool(2), LayerSpec::conv(4, 2)};
  a.head = {LayerSpec::flat(), LayerSpec::drop(), LayerSpec::dense(8), LayerSpec::drop(), LayerSpec::dense(classes)};
  return a;
}

SplitDataset tiny_data() {
  SyntheticSpec s;
  s.classes = 3;
  s.train_per_class = 8;
  s.test_per_class = 4;
  s.height = s.width = 8;
  return generate_synthetic(s);
}

TrainConfig tiny_train(std::size_t epochs) {
  TrainConfig cfg;
  cfg.epochs = epochs;
  cfg.batch_size = 5;
  cfg.lr0 = 0.05;
  cfg.seed = 3;
  return cfg;
}

// chi-square upper critical values at significance 0.001, indexed by degrees of freedom
constexpr double kChi2Crit001[] = {0, 10.828, 13.816, 16.266, 18.467, 20.515};

}  // namespace

// ---- schedule ------------------------------------------------------------------

TEST(LearningRate, Plateaus) {
  TrainConfig cfg;
  cfg.lr0 = 0.1;
  cfg.decay = 0.2;
  cfg.milestones = {60, 120, 160};
  EXPECT_NEAR(lr_at_epoch(cfg, 0), 0.1, 1e-15);
  EXPECT_NEAR(lr_at_epoch(cfg, 59), 0.1, 1e-15);
  EXPECT_NEAR(lr_at_epoch(cfg, 60), 0.02, 1e-15);
  EXPECT_NEAR(lr_at_epoch(cfg, 120), 0.004, 1e-15);
  EXPECT_NEAR(lr_at_epoch(cfg, 160), 0.0008, 1e-15);
  cfg.milestones.clear();
  EXPECT_EQ(lr_at_epoch(cfg, 500), 0.1);
}

TEST(LearningRateProperty, NonIncreasing) {
  gen::Source src(51);
  for (int trial = 0; trial < 100; ++trial) {
    TrainConfig cfg;
    cfg.lr0 = src.uniform(0, 1);
    cfg.decay = src.uniform(0.01, 1.0);
    std::size_t at = 0;
    for (std::size_t k = src.index(0, 4); k > 0; --k) cfg.milestones.push_back(at += src.index(1, 20));
    for (std::size_t e = 1; e < 100; ++e) EXPECT_LE(lr_at_epoch(cfg, e), lr_at_epoch(cfg, e - 1));
  }
}

TEST(TrainConfig, Validation) {
  auto bad = [](auto mutate) {
    TrainConfig cfg;
    mutate(cfg);
    expect_error(ErrorKind::config, [&] { cfg.validate(); });
  };
  EXPECT_NO_THROW(TrainConfig{}.validate());
  bad([](TrainConfig& c) { c.batch_size = 0; });
  bad([](TrainConfig& c) { c.lr0 = -1; });
  bad([](TrainConfig& c) { c.milestones = {10, 10}; });
  bad([](TrainConfig& c) { c.milestones = {50}; });
  bad([](TrainConfig& c) { c.decay = 0; });
  bad([](TrainConfig& c) { c.momentum = 1; });
  bad([](TrainConfig& c) { c.weight_decay = NAN; });
  bad([](TrainConfig& c) { c.precision = 16; });
  NoiseConfig n;
  n.level = 1.5;
  expect_error(ErrorKind::config, [&] { n.validate(); });
}

// ---- optimizer -------------------------------------------------------------------

TEST(Sgd, PlainStep) {
  auto p = gen::param({2}, {1.0, -2.0});
  p.mutable_grad()[0] = 0.5;
  p.mutable_grad()[1] = -1.0;
  std::vector<Tensor<double>> ps{p};
  std::vector<std::vector<double>> v{{0, 0}};
  sgd_momentum_step<double>(ps, v, 0.1, 0.0, 0.0);
  EXPECT_NEAR(p.at(0), 0.95, 1e-15);
  EXPECT_NEAR(p.at(1), -1.9, 1e-15);
}

TEST(Sgd, TwoStepsWithMomentum) {
  gen::Source src(52);
  for (int trial = 0; trial < 50; ++trial) {
    const double lr = src.uniform(0.001, 0.5), mu = src.uniform(0, 0.99), g = src.uniform(-3, 3);
    const double p0 = src.uniform(-1, 1);
    auto p = gen::param({1}, {p0});
    SgdMomentum<double> opt({p});
    for (int s = 0; s < 2; ++s) {
      opt.zero_grad();
      p.mutable_grad()[0] = g;
      opt.step(lr, mu, 0.0);
    }
    EXPECT_NEAR(p.at(0) - p0, -lr * g * (2 + mu), 1e-12);
  }
}

TEST(Sgd, DecayOnlyShrinksGeometrically) {
  auto p = gen::param({1}, {2.0});
  SgdMomentum<double> opt({p});
  for (int s = 1; s <= 5; ++s) {
    opt.zero_grad();
    opt.step(0.1, 0.0, 0.5);
    EXPECT_NEAR(p.at(0), 2.0 * std::pow(0.95, s), 1e-12);
  }
}

TEST(Sgd, BufferMismatch) {
  std::vector<Tensor<double>> ps{gen::param({2}, {1, 2})};
  std::vector<std::vector<double>> v;
  expect_error(ErrorKind::dimension, [&] { sgd_momentum_step<double>(ps, v, 0.1, 0.9, 0.0); });
  v = {{0}};
  expect_error(ErrorKind::dimension, [&] { sgd_momentum_step<double>(ps, v, 0.1, 0.9, 0.0); });
}

// ---- label noise -------------------------------------------------------------------

TEST(Noise, ZeroLevelIsIdentity) {
  gen::Source src(53);
  const auto labels = src.labels(100, 4);
  const auto out = inject_label_noise(labels, 4, NoiseConfig{}, 3, 9);
  EXPECT_EQ(out.labels, labels);
  EXPECT_TRUE(out.corrupted.empty());
}

TEST(Noise, ExactCountSortedDistinct) {
  gen::Source src(54);
  for (int trial = 0; trial < 50; ++trial) {
    const std::size_t n = src.index(1, 300);
    NoiseConfig noise;
    noise.level = src.uniform();
    const auto labels = src.labels(n, 5);
    const auto out = inject_label_noise(labels, 5, noise, src.index(0, 10), src.index(0, 1000));
    EXPECT_EQ(out.corrupted.size(), static_cast<std::size_t>(std::floor(noise.level * static_cast<double>(n))));
    EXPECT_TRUE(std::is_sorted(out.corrupted.begin(), out.corrupted.end()));
    EXPECT_EQ(std::set<std::size_t>(out.corrupted.begin(), out.corrupted.end()).size(), out.corrupted.size());
    std::set<std::size_t> hit(out.corrupted.begin(), out.corrupted.end());
    for (std::size_t i = 0; i < n; ++i) {
      if (!hit.count(i)) EXPECT_EQ(out.labels[i], labels[i]);
      EXPECT_GE(out.labels[i], 0);
      EXPECT_LT(out.labels[i], 5);
    }
  }
}

TEST(Noise, FullCorruptionIsUniform) {
  const std::size_t n = 100000, m = 4;
  NoiseConfig noise;
  noise.level = 1.0;
  const auto out = inject_label_noise(std::vector<int>(n, 0), m, noise, 0, 17);
  std::vector<double> counts(m, 0);
  for (int l : out.labels) counts[static_cast<std::size_t>(l)] += 1;
  const double expect = double(n) / m, sigma = std::sqrt(n * (1.0 / m) * (1 - 1.0 / m));
  double chi2 = 0;
  for (double c : counts) {
    EXPECT_NEAR(c, expect, 3 * sigma);
    chi2 += (c - expect) * (c - expect) / expect;
  }
  EXPECT_LT(chi2, kChi2Crit001[m - 1]);
}

TEST(Noise, DeterministicPerEpochAndVaries) {
  gen::Source src(55);
  const auto labels = src.labels(500, 4);
  NoiseConfig noise;
  noise.level = 0.3;
  const auto a = inject_label_noise(labels, 4, noise, 2, 5);
  const auto b = inject_label_noise(labels, 4, noise, 2, 5);
  const auto c = inject_label_noise(labels, 4, noise, 3, 5);
  const auto d = inject_label_noise(labels, 4, noise, 2, 6);
  EXPECT_EQ(a.labels, b.labels);
  EXPECT_EQ(a.corrupted, b.corrupted);
  EXPECT_NE(a.corrupted, c.corrupted);
  EXPECT_NE(a.corrupted, d.corrupted);
  noise.reshuffle_per_epoch = false;
  EXPECT_EQ(inject_label_noise(labels, 4, noise, 2, 5).corrupted, inject_label_noise(labels, 4, noise, 7, 5).corrupted);
}

TEST(Noise, IndexSelectionFrequency) {
  const std::size_t n = 200, epochs = 2000;
  NoiseConfig noise;
  noise.level = 0.3;
  std::vector<double> hits(n, 0);
  for (std::size_t e = 0; e < epochs; ++e)
    for (std::size_t i : inject_label_noise(std::vector<int>(n, 1), 3, noise, e, 8).corrupted) hits[i] += 1;
  const double p = 0.3, sigma = std::sqrt(epochs * p * (1 - p));
  // 5 sigma per index keeps the family-wise false alarm rate below 1e-4
  for (double h : hits) EXPECT_NEAR(h, epochs * p, 5 * sigma);
}

// ---- training loop --------------------------------------------------------------------

TEST(Training, ZeroLearningRateLeavesParameters) {
  const auto data = tiny_data();
  auto net = Network<double>::build(tiny_arch(3), 3, 1);
  std::vector<Tensor<double>> ps;
  for (auto& p : net.parameters()) ps.push_back(p.tensor);
  std::vector<std::vector<double>> before;
  for (auto& p : ps) before.push_back(gen::values(p));
  SgdMomentum<double> opt(ps);
  auto cfg = tiny_train(1);
  cfg.lr0 = 0;
  LossConfig loss;
  loss.out = loss.mid = loss.pull_push = loss.kernel = true;
  const auto rec = train_epoch(net, opt, data.train, data.train.labels, cfg, loss, 0);
  for (std::size_t i = 0; i < ps.size(); ++i) EXPECT_EQ(gen::values(ps[i]), before[i]) << i;
  EXPECT_TRUE(std::isfinite(rec.train_loss_total));
  EXPECT_NEAR(rec.train_loss_total, rec.terms.sum(), 1e-9);
}

TEST(Training, NonFiniteLossNamesTheTerm) {
  const auto data = tiny_data();
  auto net = Network<double>::build(tiny_arch(3), 3, 1);
  net.linears().back().bias.mutable_values()[0] = NAN;
  std::vector<Tensor<double>> ps;
  for (auto& p : net.parameters()) ps.push_back(p.tensor);
  SgdMomentum<double> opt(ps);
  try {
    train_epoch(net, opt, data.train, data.train.labels, tiny_train(1), LossConfig{}, 4);
    FAIL() << "expected a numeric error";
  } catch (const Error& e) {
    EXPECT_EQ(e.kind(), ErrorKind::numeric);
    EXPECT_NE(std::string(e.what()).find("baseline"), std::string::npos) << e.what();
    EXPECT_NE(std::string(e.what()).find("epoch 4"), std::string::npos) << e.what();
  }
}

TEST(Evaluate, PerfectAndConstantPredictions) {
  auto net = Network<double>::build(tiny_arch(4), 4, 2);
  SyntheticSpec s;
  s.train_per_class = 1000;
  s.test_per_class = 1;
  s.height = s.width = 8;
  auto data = generate_synthetic(s).train;
  // zero the last layer and bias class 0: constant prediction
  auto& last = net.linears().back();
  for (double& w : last.weight.mutable_values()) w = 0;
  last.bias.mutable_values()[0] = 1;
  gen::Source src(56);
  data.labels = src.labels(data.size(), 4);
  const double err = evaluate(net, data);
  const double sigma = 100 * std::sqrt(0.75 * 0.25 / double(data.size()));
  EXPECT_NEAR(err, 75.0, 4 * sigma);
  for (int& l : data.labels) l = 0;
  EXPECT_EQ(evaluate(net, data), 0.0);
}

TEST(Experiment, ZeroEpochs) {
  const auto data = tiny_data();
  const auto m = run_experiment<double>(tiny_arch(3), tiny_train(0), LossConfig{}, NoiseConfig{}, data);
  EXPECT_TRUE(m.epochs.empty());
  EXPECT_EQ(m.best_test_error, m.initial_test_error);
}

TEST(Experiment, BitwiseDeterministic) {
  const auto data = tiny_data();
  LossConfig loss;
  loss.out = loss.mid = true;
  NoiseConfig noise;
  noise.level = 0.2;
  auto cfg = tiny_train(3);
  cfg.milestones = {2};
  const auto a = run_experiment<double>(tiny_arch(3), cfg, loss, noise, data);
  const auto b = run_experiment<double>(tiny_arch(3), cfg, loss, noise, data);
  EXPECT_EQ(metrics_csv(a), metrics_csv(b));
  ASSERT_EQ(a.epochs.size(), 3u);
  EXPECT_EQ(a.epochs[1].noisy_labels, static_cast<std::size_t>(0.2 * data.train.size()));
  EXPECT_NEAR(a.epochs[2].lr, 0.05 * 0.2, 1e-15);
  double best = a.epochs[0].test_error;
  for (const auto& r : a.epochs) best = std::min(best, r.test_error);
  EXPECT_EQ(a.best_test_error, best);
  cfg.seed = 4;
  EXPECT_NE(metrics_csv(run_experiment<double>(tiny_arch(3), cfg, loss, noise, data)), metrics_csv(a));
}

TEST(Experiment, CallbackSeesEveryEpoch) {
  const auto data = tiny_data();
  std::vector<std::size_t> seen;
  run_experiment<float>(tiny_arch(3), tiny_train(2), LossConfig{}, NoiseConfig{}, data,
                        [&](const EpochRecord& r) { seen.push_back(r.epoch); });
  EXPECT_EQ(seen, (std::vector<std::size_t>{0, 1}));
}
