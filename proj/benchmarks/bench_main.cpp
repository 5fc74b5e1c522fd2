#include <benchmark/benchmark.h>

#include "ultravar/ops.hpp"
#include "ultravar/pipeline.hpp"
#include "ultravar/synth.hpp"

using namespace uvar;

namespace {

Tensor noise(Shape shape, std::uint64_t seed) {
  Rng rng(seed);
  Tensor t(std::move(shape));
  for (auto& v : t.data()) v = static_cast<float>(rng.normal());
  return t;
}

void BM_Gemm(benchmark::State& state) {
  const auto n = static_cast<std::size_t>(state.range(0));
  Tensor a = noise({n, n}, 1), b = noise({n, n}, 2), c({n, n});
  for (auto _ : state) {
    kernels::gemm(a.data().data(), b.data().data(), c.data().data(), n, n, n, false);
    benchmark::DoNotOptimize(c.data().data());
  }
  state.SetItemsProcessed(state.iterations() * 2 * n * n * n);
}
BENCHMARK(BM_Gemm)->Arg(64)->Arg(128)->Arg(256);

void BM_Conv2d(benchmark::State& state) {
  const auto ch = static_cast<std::size_t>(state.range(0));
  Tensor x = noise({4, ch, 32, 32}, 3), w = noise({ch, ch, 3, 3}, 4), bias = Tensor::zeros({ch});
  NoGradGuard g;
  for (auto _ : state) benchmark::DoNotOptimize(conv2d(x, w, bias, 1, 1));
}
BENCHMARK(BM_Conv2d)->Arg(16)->Arg(32);

void BM_VarForward(benchmark::State& state) {
  const Model m = Model::create(RunConfig{}, true);
  Rng rng(5);
  std::vector<Tensor> inputs;
  for (std::size_t p : {2, 4, 8}) inputs.push_back(noise({1, m.config.vqvae.channels, p, p}, p));
  NoGradGuard g;
  for (auto _ : state) benchmark::DoNotOptimize(m.var->forward_logits(m.var->build_sequence(1, inputs, 4)));
}
BENCHMARK(BM_VarForward);

void BM_Generate(benchmark::State& state) {
  const Model m = Model::create(RunConfig{}, true);
  SamplerConfig s;
  std::uint64_t i = 0;
  for (auto _ : state) benchmark::DoNotOptimize(generate(1, s, i++, m.vqvae, &m.pem, *m.var));
}
BENCHMARK(BM_Generate);

void BM_VqvaeRoundTrip(benchmark::State& state) {
  const Model m = Model::create(RunConfig{}, false);
  Tensor x({4, 1, 32, 32});
  for (std::size_t i = 0; i < 4; ++i) {
    Tensor img = render_indexed(SynthConfig{}, Split::Train, i % 2, i).image;
    std::copy(img.data().begin(), img.data().end(), x.data().begin() + i * 1024);
  }
  NoGradGuard g;
  for (auto _ : state) benchmark::DoNotOptimize(m.vqvae.decode(m.vqvae.quantize(m.vqvae.encode(x)).f_hat));
}
BENCHMARK(BM_VqvaeRoundTrip);

}  // namespace

BENCHMARK_MAIN();
