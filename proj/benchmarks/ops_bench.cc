#include <benchmark/benchmark.h>

#include <vector>

#include "branchconnect/gates.h"
#include "branchconnect/ops.h"
#include "branchconnect/random.h"
#include "branchconnect/tape.h"

namespace branchconnect {
namespace {

Tensor Filled(const Shape& shape, Rng& rng) {
  Tensor t(shape);
  for (Scalar& v : t.data()) v = static_cast<Scalar>(StandardNormal(rng));
  return t;
}

// Args: batch, channels in, side, channels out, kernel.
void BM_Conv2dForward(benchmark::State& state) {
  const std::size_t n = state.range(0), c = state.range(1), side = state.range(2), o = state.range(3),
                    k = state.range(4);
  Rng rng(1);
  const Tensor x = Filled({n, c, side, side}, rng), w = Filled({o, c, k, k}, rng), b = Filled({o}, rng);
  for (auto _ : state) {
    Tape tape;
    Var y = Conv2d(tape, tape.Constant(x), tape.Constant(w), tape.Constant(b), {1, (k - 1) / 2});
    benchmark::DoNotOptimize(tape.value(y).data().data());
  }
  state.SetItemsProcessed(state.iterations() * n);
}
BENCHMARK(BM_Conv2dForward)->Args({32, 3, 16, 16, 3})->Args({32, 16, 8, 32, 3})->Args({32, 32, 16, 32, 5});

void BM_Conv2dForwardBackward(benchmark::State& state) {
  const std::size_t n = state.range(0), c = state.range(1), side = state.range(2), o = state.range(3),
                    k = state.range(4);
  Rng rng(1);
  const Tensor x = Filled({n, c, side, side}, rng), w = Filled({o, c, k, k}, rng), b = Filled({o}, rng);
  for (auto _ : state) {
    Tape tape;
    Var wv = tape.Parameter(w);
    Var y = Conv2d(tape, tape.Parameter(x), wv, tape.Parameter(b), {1, (k - 1) / 2});
    tape.Backward(Sum(tape, y));
    const Tensor g = tape.grad(wv);
    benchmark::DoNotOptimize(g.data().data());
  }
  state.SetItemsProcessed(state.iterations() * n);
}
BENCHMARK(BM_Conv2dForwardBackward)->Args({32, 3, 16, 16, 3})->Args({32, 16, 8, 32, 3})->Args({32, 32, 16, 32, 5});

void BM_Gemm(benchmark::State& state) {
  const std::size_t m = state.range(0), k = state.range(1), n = state.range(2);
  Rng rng(2);
  const Tensor a = Filled({m, k}, rng), b = Filled({k, n}, rng);
  Tensor c({m, n});
  for (auto _ : state) {
    kernels::Gemm(a.data(), b.data(), c.data(), m, k, n, false);
    benchmark::DoNotOptimize(c.data().data());
  }
  state.SetItemsProcessed(state.iterations() * 2 * m * k * n);
}
BENCHMARK(BM_Gemm)->Args({32, 144, 2048})->Args({64, 800, 1024})->Args({128, 128, 128});

void BM_SampleActiveSet(benchmark::State& state) {
  const std::size_t m = state.range(0), k = state.range(1);
  Rng rng(3);
  std::vector<Scalar> row(m);
  for (Scalar& v : row) v = static_cast<Scalar>(Uniform01(rng));
  const std::vector<double> probs = NormalizeRow(row);
  for (auto _ : state) benchmark::DoNotOptimize(SampleActiveSet(probs, k, rng));
}
BENCHMARK(BM_SampleActiveSet)->Args({5, 2})->Args({10, 5})->Args({30, 5});

}  // namespace
}  // namespace branchconnect
