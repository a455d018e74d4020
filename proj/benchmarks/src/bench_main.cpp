#include <benchmark/benchmark.h>

#include <random>

#include "unlearn/autodiff.hpp"
#include "unlearn/fisher.hpp"
#include "unlearn/rng.hpp"
#include "unlearn/theory.hpp"

using namespace unlearn;

namespace {

Tensor random_tensor(Shape shape, std::uint64_t seed) {
  auto rng = make_rng(seed);
  std::normal_distribution<double> n(0.0, 1.0);
  Tensor t(std::move(shape));
  for (auto& v : t.data()) v = n(rng);
  return t;
}

// Forward + backward of one SmallCNN-sized convolution; range(0) = batch.
void BM_Conv2dForwardBackward(benchmark::State& state) {
  const auto n = static_cast<std::size_t>(state.range(0));
  const auto x = random_tensor({n, 8, 14, 14}, 1);
  const auto w = random_tensor({16, 8, 3, 3}, 2);
  for (auto _ : state) {
    Tape tape;
    auto xv = tape.constant(x);
    auto wv = tape.variable(w);
    auto y = ops::conv2d(xv, wv, std::nullopt, {1, 1});
    tape.backward(ops::sum(y));
    benchmark::DoNotOptimize(tape.grad(wv));
  }
  state.SetItemsProcessed(state.iterations() * static_cast<std::int64_t>(n));
}
BENCHMARK(BM_Conv2dForwardBackward)->Arg(1)->Arg(32)->Arg(128);

// Per-sample diagonal Fisher of a small CNN; range(0) = samples per bucket.
void BM_FisherDiagonal(benchmark::State& state) {
  const auto n = static_cast<std::size_t>(state.range(0));
  ModelSpec spec;
  spec.kind = ModelKind::SmallCNN;
  spec.input_shape = {1, 28, 28};
  const auto c = initialize(spec, 1);
  DatasetSplit data;
  data.inputs = random_tensor({2 * n, 1, 28, 28}, 3);
  for (std::size_t i = 0; i < 2 * n; ++i) {
    data.labels.push_back(static_cast<int>(i % 10));
    data.ids.push_back(i);
  }
  data.class_count = 10;
  std::vector<std::size_t> f(n), r(n);
  for (std::size_t i = 0; i < n; ++i) {
    f[i] = i;
    r[i] = n + i;
  }
  const auto forget = data.select(f), remain = data.select(r);
  for (auto _ : state) benchmark::DoNotOptimize(fisher_diagonal(c, forget, remain));
  state.SetItemsProcessed(state.iterations() * static_cast<std::int64_t>(2 * n));
}
BENCHMARK(BM_FisherDiagonal)->Arg(8)->Arg(64)->Unit(benchmark::kMillisecond);

// Randomized bound certification; range(0) = trials.
void BM_VerifyBoundSweep(benchmark::State& state) {
  const auto trials = static_cast<std::size_t>(state.range(0));
  for (auto _ : state) benchmark::DoNotOptimize(verify_bound_sweep(trials, 20, 1));
  state.SetItemsProcessed(state.iterations() * static_cast<std::int64_t>(trials));
}
BENCHMARK(BM_VerifyBoundSweep)->Arg(100)->Arg(1000)->Unit(benchmark::kMillisecond);

}  // namespace

BENCHMARK_MAIN();
