#include <benchmark/benchmark.h>

#include "dial/rng.hpp"
#include "dial/tensor.hpp"

namespace {

using dial::Rng;
using dial::Tensor;

void BM_GemmNN(benchmark::State& state) {
  const int m = static_cast<int>(state.range(0));
  const int k = 64, n = 64;
  std::vector<float> a(m * k), b(k * n), c(m * n);
  Rng rng(1);
  for (auto& v : a) v = rng.normal();
  for (auto& v : b) v = rng.normal();
  for (auto _ : state) {
    dial::detail::gemm_nn(m, k, n, a.data(), b.data(), c.data(), false);
    benchmark::DoNotOptimize(c.data());
  }
  state.SetItemsProcessed(state.iterations() * int64_t(2) * m * k * n);
}
BENCHMARK(BM_GemmNN)->Arg(64)->Arg(140)->Arg(1024);

void BM_MatmulForwardBackward(benchmark::State& state) {
  const int rows = static_cast<int>(state.range(0));
  Rng rng(2);
  Tensor x = Tensor::randn({rows, 64}, rng);
  Tensor w = Tensor::randn({64, 64}, rng, 0.1f, true);
  for (auto _ : state) {
    Tensor out = matmul(x, w);
    Tensor loss = mse(out, Tensor::zeros({rows, 64}));
    dial::backward(loss);
    w.zero_grad();
    benchmark::DoNotOptimize(loss.item());
  }
  state.SetItemsProcessed(state.iterations() * int64_t(2) * 3 * rows * 64 * 64);
}
BENCHMARK(BM_MatmulForwardBackward)->Arg(140);

void BM_AttentionForwardBackward(benchmark::State& state) {
  const int tokens = static_cast<int>(state.range(0));
  Rng rng(3);
  Tensor x = Tensor::randn({tokens, 64}, rng);
  Tensor w = Tensor::randn({64, 64}, rng, 0.1f, true);
  for (auto _ : state) {
    Tensor q = matmul(x, w);
    Tensor out = multihead_attention(q, q, q, 4);
    Tensor loss = mse(out, Tensor::zeros({tokens, 64}));
    dial::backward(loss);
    w.zero_grad();
    benchmark::DoNotOptimize(loss.item());
  }
}
BENCHMARK(BM_AttentionForwardBackward)->Arg(140);

}  // namespace

BENCHMARK_MAIN();
