#include <benchmark/benchmark.h>

#include "steervec/corpus.hpp"
#include "steervec/model.hpp"
#include "steervec/vectors.hpp"

namespace sv = steervec;

namespace {

struct World {
  sv::ParallelCorpus corpus;
  sv::ToyTransformer model;
};

const World& world() {
  static const World w = [] {
    sv::SyntheticSpec spec;
    spec.n_languages = 4;
    spec.n_families = 2;
    spec.content_alphabet = 30;
    spec.samples = 64;
    spec.min_len = 8;
    spec.max_len = 12;
    spec.seed = 3;
    auto synth = sv::generate_synthetic_corpus(spec);
    sv::ModelConfig cfg;
    cfg.d_model = 64;
    cfg.n_layers = 4;
    cfg.n_heads = 4;
    cfg.vocab_size = synth.corpus.vocab_size();
    cfg.max_seq_len = 16;
    cfg.seed = 4;
    return World{std::move(synth.corpus), sv::ToyTransformer(cfg)};
  }();
  return w;
}

}  // namespace

static void BM_LanguageVector(benchmark::State& state) {
  const auto& w = world();
  const auto slice = w.corpus.slice_tokens("syn0");
  std::vector<std::vector<int>> part(slice.begin(), slice.begin() + state.range(0));
  for (auto _ : state) {
    benchmark::DoNotOptimize(sv::compute_language_vector(w.model, part));
  }
  state.SetItemsProcessed(state.iterations() * part.size());
}
BENCHMARK(BM_LanguageVector)->Arg(16)->Arg(64);

static void BM_BuildBank(benchmark::State& state) {
  const auto& w = world();
  for (auto _ : state) {
    benchmark::DoNotOptimize(sv::build_bank(w.model, w.corpus));
  }
}
BENCHMARK(BM_BuildBank)->Unit(benchmark::kMillisecond);

static void BM_ClusterLanguages(benchmark::State& state) {
  const auto& w = world();
  const auto bank = sv::build_bank(w.model, w.corpus);
  for (auto _ : state) {
    benchmark::DoNotOptimize(sv::cluster_languages(bank));
  }
}
BENCHMARK(BM_ClusterLanguages);

BENCHMARK_MAIN();
