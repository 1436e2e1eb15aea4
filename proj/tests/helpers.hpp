#pragma once

// Shared fixtures for the test binaries. The tiny world is pretrained once
// per process and reused; tests must not mutate it.

#include <filesystem>
#include <random>
#include <string>

#include "steervec/corpus.hpp"
#include "steervec/model.hpp"
#include "steervec/vectors.hpp"

namespace testutil {

namespace sv = steervec;

struct TinyWorld {
  sv::SyntheticCorpus synth;
  sv::ParallelCorpus train;
  sv::ParallelCorpus held;
  sv::ToyTransformer model;
  sv::LanguageVectorBank bank;
};

// 3 synthetic languages, d=16, N=2: small enough that every binary can
// afford a fresh pretrain, structured enough for steering to act.
inline const TinyWorld& tiny_world() {
  static const TinyWorld world = [] {
    sv::SyntheticSpec spec;
    spec.n_languages = 3;
    spec.n_families = 2;
    spec.content_alphabet = 20;
    spec.samples = 240;
    spec.min_len = 6;
    spec.max_len = 10;
    spec.seed = 11;
    auto synth = sv::generate_synthetic_corpus(spec);

    sv::ModelConfig cfg;
    cfg.d_model = 16;
    cfg.n_layers = 2;
    cfg.n_heads = 2;
    cfg.vocab_size = synth.corpus.vocab_size();
    cfg.max_seq_len = 48;
    cfg.seed = 5;

    auto [train, held] = synth.corpus.split_holdout(0.125);
    sv::PretrainOptions opts{/*epochs=*/3, /*lr=*/2e-3f, /*batch=*/16, /*shuffle_seed=*/5};
    auto result = sv::pretrain_toy(cfg, train, opts);
    auto bank = sv::build_bank(result.model, train);
    return TinyWorld{std::move(synth), std::move(train), std::move(held),
                     std::move(result.model), std::move(bank)};
  }();
  return world;
}

inline std::filesystem::path temp_path(const std::string& name) {
  static std::mt19937_64 rng(std::random_device{}());
  const auto dir = std::filesystem::temp_directory_path() /
                   ("steervec_test_" + std::to_string(rng()));
  std::filesystem::create_directories(dir);
  return dir / name;
}

}  // namespace testutil
