#include <benchmark/benchmark.h>

#include "steervec/common.hpp"
#include "steervec/steering.hpp"

namespace sv = steervec;

namespace {

std::vector<float> random_vector(int d, std::uint64_t seed) {
  sv::Rng rng(seed);
  std::vector<float> v(d);
  for (auto& x : v) x = static_cast<float>(rng.normal());
  return v;
}

}  // namespace

static void BM_SteerMono(benchmark::State& state) {
  const int d = static_cast<int>(state.range(0));
  const auto r = random_vector(d, 1);
  auto h = random_vector(d, 2);
  for (auto _ : state) {
    sv::steer_mono(h, r, 0.5f, true);
    benchmark::DoNotOptimize(h.data());
  }
}
BENCHMARK(BM_SteerMono)->Arg(64)->Arg(512);

static void BM_SteerCross(benchmark::State& state) {
  const int d = static_cast<int>(state.range(0));
  const auto rt = random_vector(d, 3);
  const auto rs = random_vector(d, 4);
  auto h = random_vector(d, 5);
  for (auto _ : state) {
    sv::steer_cross(h, rt, rs, 0.5f, true);
    benchmark::DoNotOptimize(h.data());
  }
}
BENCHMARK(BM_SteerCross)->Arg(64)->Arg(512);

static void BM_SteerLearned(benchmark::State& state) {
  const int d = static_cast<int>(state.range(0));
  const auto params = sv::LearnedSteering::init(d, 1, 32, 0.5f, 0.9f, 6);
  const auto rt = random_vector(d, 7);
  const auto rs = random_vector(d, 8);
  auto h = random_vector(d, 9);
  for (auto _ : state) {
    sv::steer_learned(h, rt, rs, params, 1, true);
    benchmark::DoNotOptimize(h.data());
  }
}
BENCHMARK(BM_SteerLearned)->Arg(64)->Arg(512);

BENCHMARK_MAIN();
