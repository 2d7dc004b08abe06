#include <benchmark/benchmark.h>

#include "tcpdiff/autodiff.hpp"
#include "tcpdiff/diffusion.hpp"
#include "tcpdiff/network.hpp"
#include "tcpdiff/synth.hpp"
#include "tcpdiff/training.hpp"
#include "tcpdiff/verify.hpp"

using namespace tcpdiff;

namespace {

Tensor noise(const Shape& shape, std::uint64_t seed) {
  Rng rng(seed);
  return diffusion::standard_normal<float>(shape, rng);
}

void BM_Conv3d(benchmark::State& state) {
  const auto c = static_cast<std::size_t>(state.range(0)), grid = static_cast<std::size_t>(state.range(1));
  const auto x = noise({c, 4, grid, grid}, 1), w = noise({c, c, 3, 3, 3}, 2);
  for (auto _ : state) {
    nn::Graph<float> g(false);
    auto y = nn::conv3d<float>(g.constant(x), g.constant(w), nullptr);
    benchmark::DoNotOptimize(y.value().data.data());
  }
  state.SetItemsProcessed(state.iterations() * static_cast<std::int64_t>(c * c * 27 * 4 * grid * grid));
}
BENCHMARK(BM_Conv3d)->Args({8, 40})->Args({16, 20})->Args({32, 40})->Unit(benchmark::kMillisecond);

struct DenoiserFixture {
  nn::Network<float> net;
  nn::EncodedContext<float> ctx;
  Tensor state;

  explicit DenoiserFixture(std::size_t grid) : net(nn::NetworkConfig::tiny(grid), {3, false}) {
    auto sc = data::SynthConfig::for_grid({grid, grid, 10.0 / double(grid)});
    const auto rec = data::synthesize_sample(sc, 0);
    const auto prepared = train::prepare<float>(data::normalize(rec, data::compute_stats({rec})), net.config());
    ctx = net.encode_context(prepared.inputs);
    state = noise(prepared.target.shape, 4);
  }
};

void BM_DenoiserForward(benchmark::State& state) {
  DenoiserFixture f(static_cast<std::size_t>(state.range(0)));
  for (auto _ : state) benchmark::DoNotOptimize(f.net.predict_noise(f.ctx, f.state, 50).data.data());
}
BENCHMARK(BM_DenoiserForward)->Arg(16)->Arg(40)->Unit(benchmark::kMillisecond);

void BM_TrainingLoss(benchmark::State& state) {
  const auto grid = static_cast<std::size_t>(state.range(0));
  nn::Network<float> net(nn::NetworkConfig::tiny(grid), {3, false});
  auto sc = data::SynthConfig::for_grid({grid, grid, 10.0 / double(grid)});
  const auto rec = data::synthesize_sample(sc, 0);
  const auto prepared = train::prepare<float>(data::normalize(rec, data::compute_stats({rec})), net.config());
  const auto sched = diffusion::Schedule::cosine(200);
  Rng rng(5);
  for (auto _ : state) benchmark::DoNotOptimize(train::loss(net, prepared, sched, rng, true).loss);
}
BENCHMARK(BM_TrainingLoss)->Arg(16)->Arg(40)->Unit(benchmark::kMillisecond);

void BM_Rapsd(benchmark::State& state) {
  const auto n = static_cast<std::size_t>(state.range(0));
  const auto field = noise({n, n}, 6);
  for (auto _ : state) benchmark::DoNotOptimize(verify::rapsd(field).power.data());
}
BENCHMARK(BM_Rapsd)->Arg(40)->Arg(100)->Arg(256);

void BM_Contingency(benchmark::State& state) {
  const auto a = noise({4, 100, 100}, 7), b = noise({4, 100, 100}, 8);
  for (auto _ : state) benchmark::DoNotOptimize(verify::contingency(a, b, 0.5).hits);
}
BENCHMARK(BM_Contingency);

}  // namespace
BENCHMARK_MAIN();
