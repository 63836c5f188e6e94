// Parallel kernels vs. the serial reference on decoder-sized shapes.
#include <benchmark/benchmark.h>

#include <random>
#include <vector>

#include "fmbff/kernels.hpp"
#include "fmbff/parallel.hpp"

namespace {

using fmbff::ConvGeometry;

ConvGeometry geometry(std::int64_t c, std::int64_t hw, std::int64_t k, std::int64_t groups) {
  ConvGeometry g;
  g.n = 2;
  g.cin = g.cout = c;
  g.h = g.w = hw;
  g.kh = g.kw = k;
  g.pad_h = g.pad_w = k / 2;
  g.groups = groups;
  return g;
}

std::vector<float> noise(std::size_t n) {
  std::mt19937 rng(1);
  std::uniform_real_distribution<float> d(-1.f, 1.f);
  std::vector<float> v(n);
  for (float& x : v) x = d(rng);
  return v;
}

template <bool Parallel>
void conv_forward(benchmark::State& state) {
  const auto g = geometry(state.range(0), state.range(1), state.range(2), state.range(3));
  auto x = noise(g.n * g.cin * g.h * g.w);
  auto w = noise(g.cout * g.cin_per_group() * g.kh * g.kw);
  std::vector<float> y(g.n * g.cout * g.out_h() * g.out_w());
  for (auto _ : state) {
    if constexpr (Parallel)
      fmbff::kernels::conv2d_forward<float>(g, x.data(), w.data(), nullptr, y.data());
    else
      fmbff::reference::conv2d_forward<float>(g, x.data(), w.data(), nullptr, y.data());
    benchmark::DoNotOptimize(y.data());
  }
}

template <bool Parallel>
void conv_backward_weight(benchmark::State& state) {
  const auto g = geometry(state.range(0), state.range(1), state.range(2), state.range(3));
  auto x = noise(g.n * g.cin * g.h * g.w);
  auto dy = noise(g.n * g.cout * g.out_h() * g.out_w());
  std::vector<float> dw(g.cout * g.cin_per_group() * g.kh * g.kw), db(g.cout);
  for (auto _ : state) {
    if constexpr (Parallel)
      fmbff::kernels::conv2d_backward_weight<float>(g, dy.data(), x.data(), dw.data(), db.data());
    else
      fmbff::reference::conv2d_backward_weight<float>(g, dy.data(), x.data(), dw.data(), db.data());
    benchmark::DoNotOptimize(dw.data());
  }
}

template <bool Parallel>
void bilinear(benchmark::State& state) {
  const std::int64_t planes = state.range(0), h = state.range(1);
  auto x = noise(planes * h * h);
  std::vector<float> y(planes * 4 * h * h);
  for (auto _ : state) {
    if constexpr (Parallel)
      fmbff::kernels::bilinear_forward<float>(planes, h, h, 2 * h, 2 * h, x.data(), y.data());
    else
      fmbff::reference::bilinear_forward<float>(planes, h, h, 2 * h, 2 * h, x.data(), y.data());
    benchmark::DoNotOptimize(y.data());
  }
}

// {channels, extent, kernel, groups}
void conv_args(benchmark::internal::Benchmark* b) {
  b->Args({32, 32, 3, 1})->Args({80, 64, 1, 1})->Args({80, 64, 3, 80})->Args({160, 32, 3, 1});
}

}  // namespace

BENCHMARK(conv_forward<true>)->Apply(conv_args)->Name("conv_forward/parallel");
BENCHMARK(conv_forward<false>)->Apply(conv_args)->Name("conv_forward/reference");
BENCHMARK(conv_backward_weight<true>)->Apply(conv_args)->Name("conv_backward_weight/parallel");
BENCHMARK(conv_backward_weight<false>)->Apply(conv_args)->Name("conv_backward_weight/reference");
BENCHMARK(bilinear<true>)->Args({160, 32})->Name("bilinear/parallel");
BENCHMARK(bilinear<false>)->Args({160, 32})->Name("bilinear/reference");

int main(int argc, char** argv) {
  fmbff::configure_threads_from_env();
  benchmark::Initialize(&argc, argv);
  benchmark::RunSpecifiedBenchmarks();
  benchmark::Shutdown();
  return 0;
}
