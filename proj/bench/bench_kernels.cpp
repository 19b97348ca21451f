// Parallel kernels vs their serial references, plus whole forward passes.
#include <benchmark/benchmark.h>

#include <vector>

#include "fixlab/kernels.hpp"
#include "fixlab/model.hpp"
#include "fixlab/rng.hpp"

namespace {

std::vector<float> random_vec(std::size_t n, std::uint64_t seed) {
  fixlab::Rng rng(seed);
  std::vector<float> v(n);
  for (auto& x : v) x = static_cast<float>(rng.uniform() - 0.5);
  return v;
}

void BM_linear(benchmark::State& state, bool parallel) {
  const auto rows = static_cast<std::size_t>(state.range(0));
  const std::size_t in = 512, out = 2048;
  auto x = random_vec(rows * in, 1);
  auto w = random_vec(out * in, 2);
  auto b = random_vec(out, 3);
  std::vector<float> y(rows * out);
  for (auto _ : state) {
    if (parallel) {
      fixlab::kernels::linear(x, rows, in, w, out, b, y);
    } else {
      fixlab::kernels::linear_serial(x, rows, in, w, out, b, y);
    }
    benchmark::DoNotOptimize(y.data());
    benchmark::ClobberMemory();
  }
  state.SetItemsProcessed(static_cast<std::int64_t>(state.iterations() * rows * in * out));
}

void BM_project(benchmark::State& state, bool parallel) {
  const std::size_t in = 512;
  const auto out = static_cast<std::size_t>(state.range(0));
  auto x = random_vec(in, 4);
  auto w = random_vec(in * out, 5);
  std::vector<float> y(out);
  for (auto _ : state) {
    if (parallel) {
      fixlab::kernels::project(x, w, out, y);
    } else {
      fixlab::kernels::project_serial(x, w, out, y);
    }
    benchmark::DoNotOptimize(y.data());
  }
}

void BM_forward(benchmark::State& state) {
  fixlab::ModelConfig c;
  c.n_layers = 4;
  c.n_heads = 4;
  c.n_kv_heads = 4;
  c.d_model = 256;
  c.d_head = 64;
  c.d_mlp = 1024;
  c.vocab_size = 8192;
  c.max_seq = 256;
  c.residual = fixlab::ResidualVariant::parallel;
  c.rotary_fraction = 0.25;
  const auto weights = fixlab::make_random_model(c, 7);
  const int previous = fixlab::kernels::max_threads();
  fixlab::kernels::set_threads(static_cast<int>(state.range(1)));
  std::vector<fixlab::TokenId> tokens(static_cast<std::size_t>(state.range(0)));
  for (std::size_t i = 0; i < tokens.size(); ++i) tokens[i] = static_cast<fixlab::TokenId>((i * 131) % 8192);
  for (auto _ : state) {
    auto logits = fixlab::forward_logits(weights, tokens);
    benchmark::DoNotOptimize(logits.data());
  }
  fixlab::kernels::set_threads(previous);
}

}  // namespace

BENCHMARK_CAPTURE(BM_linear, serial, false)->Arg(1)->Arg(64);
BENCHMARK_CAPTURE(BM_linear, parallel, true)->Arg(1)->Arg(64);
BENCHMARK_CAPTURE(BM_project, serial, false)->Arg(8192)->Arg(50304);
BENCHMARK_CAPTURE(BM_project, parallel, true)->Arg(8192)->Arg(50304);
BENCHMARK(BM_forward)->Args({64, 1})->Args({64, 4});

BENCHMARK_MAIN();
