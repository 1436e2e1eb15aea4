#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "steervec/common.hpp"

namespace steervec {

enum class Script {
  latin,
  cyrillic,
  arabic,
  devanagari,
  han,
  hiragana_katakana,
  hangul,
  thai,
  hebrew,
  bengali,
  tamil,
  synthetic,
};

std::string_view script_name(Script s);
std::optional<Script> script_from_name(std::string_view name);
// best-effort default script for a real-world language code; latin if unknown
Script default_script_for(std::string_view code);

// half-open token id range owned by a synthetic language
struct TokenRange {
  std::uint32_t lo = 0;
  std::uint32_t hi = 0;
  bool contains(int id) const {
    return id >= 0 && static_cast<std::uint32_t>(id) >= lo && static_cast<std::uint32_t>(id) < hi;
  }
  bool operator==(const TokenRange&) const = default;
};

struct LanguageTag {
  std::string code;
  Script script = Script::latin;
  TokenRange range;  // meaningful only when script == synthetic
  bool operator==(const LanguageTag&) const = default;
};

enum class CorpusFormat { jsonl, tsv };

// Multi-parallel corpus: every aligned sample id has a cell for every
// declared language. Cells are homogeneous per corpus: raw text or
// pre-tokenized ids. Immutable after construction.
class ParallelCorpus {
 public:
  enum class CellKind { text, tokens };

  ParallelCorpus() = default;

  static ParallelCorpus from_text_cells(
      std::vector<LanguageTag> languages, std::vector<std::string> sample_ids,
      std::vector<std::vector<std::string>> cells);  // cells[sample][lang]
  static ParallelCorpus from_token_cells(
      std::vector<LanguageTag> languages, std::vector<std::string> sample_ids,
      std::vector<std::vector<std::vector<int>>> cells);

  CellKind kind() const { return kind_; }
  std::size_t n_samples() const { return sample_ids_.size(); }
  std::size_t n_languages() const { return languages_.size(); }
  const std::vector<LanguageTag>& languages() const { return languages_; }
  const std::vector<std::string>& sample_ids() const { return sample_ids_; }

  const LanguageTag& language(std::string_view code) const;
  bool has_language(std::string_view code) const;
  std::size_t language_index(std::string_view code) const;

  const std::string& text_cell(std::size_t sample, std::size_t lang) const;
  const std::vector<int>& token_cell(std::size_t sample, std::size_t lang) const;
  // uniform token access: identity for token cells, byte-level for text cells
  std::vector<int> cell_as_tokens(std::size_t sample, std::size_t lang) const;

  // one language's column, in sample order
  std::vector<std::vector<int>> slice_tokens(std::string_view code) const;

  // largest token id + 1 (token corpora); 256 for text corpora
  int vocab_size() const;
  int max_cell_tokens() const;

  // deterministic split: the trailing ceil(fraction * n) sample ids (in
  // sorted id order) become the held-out part
  std::pair<ParallelCorpus, ParallelCorpus> split_holdout(double fraction) const;
  // restriction to a subset of languages (declaration order preserved)
  ParallelCorpus restrict_languages(std::span<const std::string> codes) const;
  // adds the cells of `other` (same sample ids required) as extra languages
  ParallelCorpus union_languages(const ParallelCorpus& other) const;

  Digest256 content_digest() const;

 private:
  void validate() const;

  CellKind kind_ = CellKind::tokens;
  std::vector<LanguageTag> languages_;
  std::vector<std::string> sample_ids_;  // sorted
  std::vector<std::vector<std::string>> texts_;
  std::vector<std::vector<std::vector<int>>> tokens_;
};

// byte-level fallback tokenizer for text cells
std::vector<int> byte_tokenize(std::string_view text);
std::string byte_detokenize(std::span<const int> tokens);

ParallelCorpus load_corpus(const std::filesystem::path& path, CorpusFormat format);
void save_corpus(const ParallelCorpus& corpus, const std::filesystem::path& path);

// Synthetic multi-parallel languages: shared content sequences from a seeded
// order-1 Markov chain over {0..alphabet-1}; language l renders symbol s as
// token offset(l) + s. Languages in the same family get adjacent offsets.
struct SyntheticSpec {
  int n_languages = 2;
  int n_families = 1;
  int content_alphabet = 50;
  int samples = 100;
  int min_len = 2;
  int max_len = 16;
  std::uint64_t seed = 0;

  void validate() const;
};

struct SyntheticCorpus {
  ParallelCorpus corpus;
  std::map<std::string, int> token_offset;  // code -> range start
  std::map<std::string, int> family;        // code -> family index
};

SyntheticCorpus generate_synthetic_corpus(const SyntheticSpec& spec);

}  // namespace steervec
