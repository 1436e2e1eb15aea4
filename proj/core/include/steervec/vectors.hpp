#pragma once

#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include "steervec/common.hpp"
#include "steervec/corpus.hpp"
#include "steervec/model.hpp"

namespace steervec {

// Per-language per-layer mean hidden states v. Only v is stored; the content
// vector c and the language representations r = v - c are derived views, so
// adding a language never touches existing entries.
struct LanguageVectorBank {
  std::vector<LanguageTag> languages;
  int n_layers = 0;
  int d_model = 0;
  Digest256 model_hash;
  Digest256 corpus_hash;
  std::uint32_t exclusion_policy = 1;        // 1 = first position excluded
  std::vector<std::uint64_t> samples_used;   // per language
  std::vector<float> v;                      // [lang][layer][d]

  std::size_t language_index(std::string_view code) const;
  bool has_language(std::string_view code) const;
  std::span<const float> v_of(std::size_t lang, int layer) const;  // layer 1-based
  std::span<float> v_of(std::size_t lang, int layer);
};

// v = (1/|D_l|) sum_x (1/P_x) sum_p h_p(x), position 1 excluded; nested mean,
// not a token-pooled mean. Returns [n_layers * d], layer-major.
// `ids` (optional, parallel to slice) is used in error messages.
std::vector<float> compute_language_vector(const ToyTransformer& model,
                                           std::span<const std::vector<int>> slice,
                                           std::span<const std::string> ids = {},
                                           int threads = 1);

// The bare nested-mean kernel over already-extracted states
// (states[sample][position][dim], positions given post-exclusion); serves as
// the reference for compute_language_vector.
std::vector<float> nested_position_mean(
    const std::vector<std::vector<std::vector<float>>>& states);

LanguageVectorBank build_bank(const ToyTransformer& model, const ParallelCorpus& corpus,
                              int threads = 1);

// c = mean over languages of v, at one layer
std::vector<float> content_vector(const LanguageVectorBank& bank, int layer);
// r = v - c for one language at one layer
std::vector<float> language_representation(const LanguageVectorBank& bank,
                                           std::string_view code, int layer);
// all layers, layer-major [n_layers * d]
std::vector<float> language_representation_all(const LanguageVectorBank& bank,
                                               std::string_view code);

// Existing v entries are copied bitwise; only the new language is computed.
LanguageVectorBank add_language(const LanguageVectorBank& bank, const ToyTransformer& model,
                                const LanguageTag& lang, std::span<const std::vector<int>> slice,
                                std::span<const std::string> ids = {}, int threads = 1);

void save_bank(const LanguageVectorBank& bank, const std::filesystem::path& path);
LanguageVectorBank load_bank(const std::filesystem::path& path);

// ---------------------------------------------------------------------------
// Hierarchical clustering of language representations (Figure-style analysis)

struct DendrogramMerge {
  std::string a, b;   // representative labels (smallest member), a < b
  double distance = 0.0;
  std::vector<std::string> members;  // merged cluster, sorted
};

struct Dendrogram {
  std::vector<std::string> leaves;
  std::vector<DendrogramMerge> merges;  // |leaves| - 1 entries, non-decreasing distance
};

// Average-linkage agglomerative clustering under cosine distance. Ties break
// on the lexicographically smallest (a, b) label pair.
Dendrogram agglomerative_average_linkage(std::span<const std::vector<float>> vectors,
                                         std::span<const std::string> labels);

// layer < 1 means the last layer
Dendrogram cluster_languages(const LanguageVectorBank& bank, int layer = -1);

std::string dendrogram_to_json(const Dendrogram& d);
std::string dendrogram_text_art(const Dendrogram& d);

// ---------------------------------------------------------------------------
// Position-specific variant: per-position mean hidden states for global
// positions 2 .. max_positions+1 (position 1 stays excluded).

struct PositionalBank {
  std::vector<LanguageTag> languages;
  int n_layers = 0;
  int d_model = 0;
  int max_positions = 0;  // number of buckets
  Digest256 model_hash;
  std::vector<float> v;                     // [lang][layer][bucket][d]
  std::vector<std::uint64_t> bucket_counts; // [bucket]

  std::size_t language_index(std::string_view code) const;
  std::span<const float> v_of(std::size_t lang, int layer, int bucket) const;
  // r for one language, one layer, one bucket
  std::vector<float> representation(std::size_t lang, int layer, int bucket) const;
};

PositionalBank build_positional_bank(const ToyTransformer& model, const ParallelCorpus& corpus,
                                     int max_positions, int threads = 1);

void save_positional_bank(const PositionalBank& bank, const std::filesystem::path& path);
PositionalBank load_positional_bank(const std::filesystem::path& path);

}  // namespace steervec
