#include <benchmark/benchmark.h>

#include <random>

#include "voxseg/voxseg.hpp"

namespace {

using namespace voxseg;

Tensor<float> random_tensor(Shape shape, std::uint32_t seed, bool grad = false) {
  std::mt19937 rng(seed);
  std::normal_distribution<float> dist(0.f, 1.f);
  Tensor<float> t(std::move(shape), grad);
  for (auto& v : t.data()) v = dist(rng);
  return t;
}

// Args: resolution, channels, dilation.
void BM_Conv3dForward(benchmark::State& state) {
  const auto r = static_cast<std::size_t>(state.range(0));
  const auto c = static_cast<std::size_t>(state.range(1));
  const int dil = static_cast<int>(state.range(2));
  auto x = random_tensor({1, c, r, r, r}, 1);
  auto k = Conv3dKernel<float>::same(random_tensor({c, c, 3, 3, 3}, 2), Tensor<float>({c}), dil);
  for (auto _ : state) {
    auto tape = Tape<float>::inference();
    benchmark::DoNotOptimize(conv3d(tape, x, k).data().data());
  }
  state.counters["GFLOP/s"] = benchmark::Counter(2.0 * c * c * 27 * r * r * r,
                                                 benchmark::Counter::kIsIterationInvariantRate,
                                                 benchmark::Counter::kIs1000);
}
BENCHMARK(BM_Conv3dForward)->Args({32, 16, 1})->Args({32, 16, 5})->Args({32, 32, 3})
    ->Unit(benchmark::kMillisecond);

void BM_Conv3dBackward(benchmark::State& state) {
  const auto r = static_cast<std::size_t>(state.range(0));
  const auto c = static_cast<std::size_t>(state.range(1));
  const int dil = static_cast<int>(state.range(2));
  auto x = random_tensor({1, c, r, r, r}, 1, true);
  auto k = Conv3dKernel<float>::same(random_tensor({c, c, 3, 3, 3}, 2, true),
                                     Tensor<float>({c}, true), dil);
  for (auto _ : state) {
    Tape<float> tape;
    auto loss = sum(tape, conv3d(tape, x, k));
    tape.backward(loss);
    x.zero_grad();
    k.weight.zero_grad();
    k.bias.zero_grad();
  }
}
BENCHMARK(BM_Conv3dBackward)->Args({32, 16, 1})->Args({32, 32, 3})->Unit(benchmark::kMillisecond);

void BM_BatchNorm(benchmark::State& state) {
  const auto r = static_cast<std::size_t>(state.range(0));
  auto x = random_tensor({4, 16, r, r, r}, 3, true);
  BatchNormState<float> bn(16);
  for (auto _ : state) {
    Tape<float> tape;
    auto loss = sum(tape, batch_norm3d(tape, x, bn));
    tape.backward(loss);
    x.zero_grad();
    bn.gamma.zero_grad();
    bn.beta.zero_grad();
  }
}
BENCHMARK(BM_BatchNorm)->Arg(32)->Unit(benchmark::kMillisecond);

void BM_ResidualBlock(benchmark::State& state) {
  const auto c = static_cast<std::size_t>(state.range(0));
  Rng rng(5);
  AtrousResidualBlock<float> block(c, c / 2, 3, rng);
  auto x = random_tensor({4, c, 32, 32, 32}, 4, true);
  for (auto _ : state) {
    Tape<float> tape;
    auto loss = sum(tape, block.forward(tape, x));
    tape.backward(loss, false);
    x.zero_grad();
    block.visit("b", [](const std::string&, Tensor<float>& t, bool) { t.zero_grad(); });
  }
}
BENCHMARK(BM_ResidualBlock)->Arg(16)->Arg(32)->Unit(benchmark::kMillisecond);

void BM_Voxelize(benchmark::State& state) {
  auto shape = generate_shape("chair", 7);
  auto cloud = normalize_cloud(shape.cloud);
  for (auto _ : state) benchmark::DoNotOptimize(voxelize(cloud, static_cast<int>(state.range(0))));
}
BENCHMARK(BM_Voxelize)->Arg(32)->Arg(64);

}  // namespace

BENCHMARK_MAIN();
