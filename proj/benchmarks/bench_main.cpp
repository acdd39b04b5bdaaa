#include <benchmark/benchmark.h>

#include <random>

#include "moco/engine.hpp"
#include "moco/linalg.hpp"
#include "moco/ops.hpp"
#include "moco/tape.hpp"
#include "moco/whitening.hpp"

namespace {

using moco::Grid;
using moco::Shape;

template <typename T>
Grid<T> gaussian(Shape shape, std::uint64_t seed) {
  Grid<T> g(shape);
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> n;
  for (T& v : g.values()) v = static_cast<T>(n(rng));
  return g;
}

// args: channels in/out, spatial size; batch 32, 3x3, pad 1.
void BM_Conv2dForwardBackward(benchmark::State& st) {
  const auto c = static_cast<std::size_t>(st.range(0));
  const auto o = static_cast<std::size_t>(st.range(1));
  const auto hw = static_cast<std::size_t>(st.range(2));
  const Grid<float> x0 = gaussian<float>(Shape{32, c, hw, hw}, 1);
  const Grid<float> w0 = gaussian<float>(Shape{o, c, 3, 3}, 2);
  for (auto _ : st) {
    moco::Tape<float> tape;
    auto x = tape.constant(x0);
    auto w = tape.parameter("w", w0);
    auto y = moco::ops::sum(moco::ops::conv2d(x, w, {1, 1}));
    benchmark::DoNotOptimize(tape.backward(y, Grid<float>::scalar(1.0f)));
  }
}
BENCHMARK(BM_Conv2dForwardBackward)->Args({1, 16, 64})->Args({16, 32, 32})->Args({32, 64, 16})
    ->Unit(benchmark::kMillisecond);

// d channels, m = 32 * 16 * 16 samples, T = 5.
void BM_ZcaNewton(benchmark::State& st) {
  const auto d = static_cast<std::size_t>(st.range(0));
  const Grid<double> x = gaussian<double>(Shape{d, 8192}, 3);
  for (auto _ : st) {
    moco::WhiteningState<double> s = moco::WhiteningState<double>::with_dim(d);
    benchmark::DoNotOptimize(moco::zca_newton(x, s, moco::Mode::kTrain));
  }
}
BENCHMARK(BM_ZcaNewton)->Arg(16)->Arg(64)->Unit(benchmark::kMillisecond);

void BM_ZcaExact(benchmark::State& st) {
  const auto d = static_cast<std::size_t>(st.range(0));
  const Grid<double> x = gaussian<double>(Shape{d, 8192}, 3);
  for (auto _ : st) benchmark::DoNotOptimize(moco::zca_exact(x));
}
BENCHMARK(BM_ZcaExact)->Arg(16)->Arg(64)->Unit(benchmark::kMillisecond);

void BM_JacobiEigen(benchmark::State& st) {
  const auto n = static_cast<std::size_t>(st.range(0));
  const Grid<double> a = moco::linalg::row_covariance(gaussian<double>(Shape{n, 4 * n}, 4));
  for (auto _ : st) benchmark::DoNotOptimize(moco::linalg::jacobi_eigen(a));
}
BENCHMARK(BM_JacobiEigen)->Arg(16)->Arg(64)->Arg(128)->Unit(benchmark::kMillisecond);

// One pretraining step at the default configuration on 64x64 inputs.
void BM_TrainStep(benchmark::State& st) {
  moco::TrainConfig config;
  config.enable_local = st.range(0) != 0;
  config.enable_whitening = st.range(1) != 0;
  moco::MocoState<float> s = moco::init_state<float>(config, 1u << 20);
  Grid<float> batch = gaussian<float>(Shape{config.batch_size, 1, 64, 64}, 5);
  for (float& v : batch.values()) v = 0.5f + 0.1f * v;
  for (auto _ : st) benchmark::DoNotOptimize(moco::train_step(s, batch, config));
}
BENCHMARK(BM_TrainStep)->Args({0, 0})->Args({1, 1})->Unit(benchmark::kMillisecond)->Iterations(3);

}  // namespace

BENCHMARK_MAIN();
