#include <benchmark/benchmark.h>

#include <numeric>

#include "collab/losses.hpp"
#include "collab/nn.hpp"
#include "collab/ops.hpp"

using namespace collab;

namespace {

template <typename T>
Tensor<T> random_tensor(Shape shape, std::uint64_t seed) {
  Rng rng(seed);
  std::vector<T> v(shape_numel(shape));
  for (auto& x : v) x = static_cast<T>(rng.uniform(-1.0, 1.0));
  return Tensor<T>::constant(std::move(shape), std::move(v));
}

std::vector<int> labels(std::size_t n, std::size_t m) {
  std::vector<int> y(n);
  for (std::size_t i = 0; i < n; ++i) y[i] = static_cast<int>(i % m);
  return y;
}

void BM_Conv2dForward(benchmark::State& state) {
  const auto c = static_cast<std::size_t>(state.range(0));
  const auto x = random_tensor<float>({32, c, 16, 16}, 1);
  const auto k = random_tensor<float>({c, c, 3, 3}, 2);
  NoGradGuard guard;
  for (auto _ : state) benchmark::DoNotOptimize(conv2d(x, k, 1, 1));
}
BENCHMARK(BM_Conv2dForward)->Arg(8)->Arg(16);

void BM_Conv2dBackward(benchmark::State& state) {
  const auto x = random_tensor<float>({32, 8, 16, 16}, 1);
  auto k = Tensor<float>::parameter({8, 8, 3, 3}, std::vector<float>(576, 0.1f));
  for (auto _ : state) {
    backward(sum(conv2d(x, k, 1, 1)));
    k.zero_grad();
  }
}
BENCHMARK(BM_Conv2dBackward);

void BM_PredictBatch(benchmark::State& state) {
  auto net = Network<float>::build(ArchSpec::desk_default(4), 4, 1);
  const auto x = random_tensor<float>({32, 1, 16, 16}, 3);
  for (auto _ : state) benchmark::DoNotOptimize(net.predict(x));
}
BENCHMARK(BM_PredictBatch);

void BM_TotalLossStep(benchmark::State& state) {
  auto net = Network<float>::build(ArchSpec::desk_default(4), 4, 1);
  const auto x = random_tensor<float>({32, 1, 16, 16}, 3);
  const auto y = labels(32, 4);
  LossConfig cfg;
  cfg.out = state.range(0) & 1;
  cfg.mid = state.range(0) & 2;
  cfg.pull_push = state.range(0) & 4;
  cfg.kernel = state.range(0) & 8;
  auto params = net.parameters();
  std::uint64_t step = 0;
  for (auto _ : state) {
    auto loss = total_loss(x, y, net, cfg, Rng(++step));
    backward(loss.total);
    for (auto& p : params) p.tensor.zero_grad();
  }
}
// bit mask: 1 out, 2 mid, 4 pull-push, 8 kernel
BENCHMARK(BM_TotalLossStep)->Arg(0)->Arg(1)->Arg(2)->Arg(4)->Arg(8)->Arg(15);

}  // namespace
BENCHMARK_MAIN();
