#include <benchmark/benchmark.h>

#include <random>

#include "swinscale/fabric.hpp"
#include "swinscale/spectral.hpp"
#include "swinscale/training.hpp"
#include "swinscale/util.hpp"

using namespace swinscale;

namespace {

ModelConfig bench_model(int embed) {
  ModelConfig c;
  c.embed = embed;
  c.depth = 4;
  c.head_dim = 8;
  return c;
}

std::vector<FieldSample> random_batch(const ModelConfig& c, int batch) {
  std::mt19937_64 rng(1);
  std::vector<FieldSample> out(batch);
  for (auto& s : out) {
    s.time_frac = uniform01(rng);
    s.values = Field(c.in_channels, c.grid_h, c.grid_w);
    for (auto& v : s.values.values) v = standard_normal(rng);
  }
  return out;
}

void BM_Forward(benchmark::State& state) {
  const auto c = bench_model(static_cast<int>(state.range(0)));
  const auto grid = make_grid(c.grid_h, c.grid_w);
  const auto p = init_params(c, 1);
  const auto batch = random_batch(c, 8);
  for (auto _ : state) benchmark::DoNotOptimize(forward(p, batch, grid));
  state.SetItemsProcessed(state.iterations() * 8);
}
BENCHMARK(BM_Forward)->Arg(16)->Arg(48)->Unit(benchmark::kMillisecond);

void BM_ForwardBackward(benchmark::State& state) {
  const auto c = bench_model(static_cast<int>(state.range(0)));
  const auto grid = make_grid(c.grid_h, c.grid_w);
  const auto p = init_params(c, 1);
  const auto batch = random_batch(c, 8);
  std::vector<Field> cot;
  for (const auto& s : batch) cot.push_back(s.values);
  for (auto _ : state) {
    auto f = forward(p, batch, grid);
    benchmark::DoNotOptimize(backward(f.tape, p, cot));
  }
  state.SetItemsProcessed(state.iterations() * 8);
}
BENCHMARK(BM_ForwardBackward)->Arg(16)->Arg(48)->Unit(benchmark::kMillisecond);

void BM_ShtRoundTrip(benchmark::State& state) {
  const int L = static_cast<int>(state.range(0));
  const auto grid = make_grid(L + 2, 2 * (L + 2));
  const SphericalTransform t(grid, L);
  std::mt19937_64 rng(2);
  std::vector<double> f(static_cast<std::size_t>(grid.n_lat) * grid.n_lon);
  for (auto& v : f) v = standard_normal(rng);
  for (auto _ : state) benchmark::DoNotOptimize(t.inverse(t.forward(f)));
}
BENCHMARK(BM_ShtRoundTrip)->Arg(30)->Arg(42)->Unit(benchmark::kMicrosecond);

void BM_DistributedRoll(benchmark::State& state) {
  const int n = static_cast<int>(state.range(0));
  const int B = 8, R = 9, C = 18, F = 48;
  const FabricSpec spec{n, n, 1};
  std::vector<ShardGeometry> geos;
  for (int i = 0; i < n; ++i)
    for (int j = 0; j < n; ++j) geos.push_back({R / n, C / n, i * (R / n), j * (C / n), R, C});
  std::vector<Mat> shards(spec.spatial(), Mat::Ones(static_cast<long>(B) * (R / n) * (C / n), F));
  for (auto _ : state) {
    Fabric fabric(spec.world());
    distributed_roll(fabric, spec, geos, shards, B, 1, 0);
    distributed_roll(fabric, spec, geos, shards, B, 3, 1);
    benchmark::ClobberMemory();
  }
}
BENCHMARK(BM_DistributedRoll)->Arg(1)->Arg(3)->Unit(benchmark::kMicrosecond);

}  // namespace

BENCHMARK_MAIN();
