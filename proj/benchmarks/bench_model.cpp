#include <benchmark/benchmark.h>

#include "steervec/corpus.hpp"
#include "steervec/model.hpp"

namespace sv = steervec;

namespace {

sv::ToyTransformer make_model(int d, int layers) {
  sv::ModelConfig cfg;
  cfg.d_model = d;
  cfg.n_layers = layers;
  cfg.n_heads = d / 16;
  cfg.vocab_size = 300;
  cfg.max_seq_len = 64;
  cfg.seed = 1;
  return sv::ToyTransformer(cfg);
}

std::vector<int> make_tokens(int len) {
  sv::Rng rng(2);
  std::vector<int> tokens(len);
  for (auto& t : tokens) t = static_cast<int>(rng.uniform_int(0, 299));
  return tokens;
}

}  // namespace

static void BM_ForwardCollect(benchmark::State& state) {
  const auto model = make_model(static_cast<int>(state.range(0)), 4);
  const auto tokens = make_tokens(16);
  for (auto _ : state) {
    benchmark::DoNotOptimize(model.forward_collect(tokens, nullptr));
  }
  state.SetItemsProcessed(state.iterations() * tokens.size());
}
BENCHMARK(BM_ForwardCollect)->Arg(32)->Arg(64);

static void BM_Generate(benchmark::State& state) {
  const auto model = make_model(64, 4);
  const auto prompt = make_tokens(6);
  const int max_new = static_cast<int>(state.range(0));
  for (auto _ : state) {
    benchmark::DoNotOptimize(model.generate(prompt, nullptr, max_new));
  }
  state.SetItemsProcessed(state.iterations() * max_new);
}
BENCHMARK(BM_Generate)->Arg(8)->Arg(32);

BENCHMARK_MAIN();
