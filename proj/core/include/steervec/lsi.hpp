#pragma once

#include <filesystem>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "steervec/common.hpp"
#include "steervec/model.hpp"
#include "steervec/steering.hpp"

namespace steervec {

// Probe-mask baseline: per-language binary masks over the most
// language-sensitive dimensions (from a linear probe), contrastive
// representations from prompt pairs, gamma-scaled addition at inference.
struct LsiArtifacts {
  float tau = 0.1f;
  float gamma = 0.5f;
  int k_prompts = 0;
  int n_layers = 0;
  int d_model = 0;
  std::vector<std::string> codes;
  std::vector<std::uint8_t> masks;        // [lang][layer][d], 0/1
  std::vector<float> reps;                // [lang][layer][d]
  std::vector<double> probe_holdout_acc;  // per layer

  static int mask_ones(float tau, int d);  // ceil(tau * d)
  std::size_t language_index(std::string_view code) const;
  std::span<const std::uint8_t> mask_of(std::size_t lang, int layer) const;
  std::span<const float> rep_of(std::size_t lang, int layer) const;
};

struct ContrastPair {
  std::vector<int> with_example;      // prompt with an in-language example
  std::vector<int> instruction_only;  // the same prompt without it
};

struct LsiBuildOptions {
  float tau = 0.1f;
  float gamma = 0.5f;
  int probe_iters = 300;
  float probe_lr = 0.5f;
  double probe_holdout = 0.25;  // per-language trailing fraction
  int threads = 1;
};

// probe_samples: labeled monolingual token sequences (code, tokens). The
// contrast map supplies K pairs per language. Probe features are hidden
// states mean-pooled over non-first positions; V_l is the masked state at
// the final prompt position.
LsiArtifacts lsi_build(const ToyTransformer& model,
                       std::span<const std::pair<std::string, std::vector<int>>> probe_samples,
                       const std::map<std::string, std::vector<ContrastPair>>& contrast,
                       const LsiBuildOptions& opts);

// h := h + gamma * r; no normalization and no norm restoration
void lsi_steer(std::span<float> h, std::span<const float> r, float gamma);

LayerHook make_hook(const LsiArtifacts& artifacts, const SteeringConfig& config,
                    std::string_view target, std::optional<float> gamma_override = std::nullopt);

void save_lsi(const LsiArtifacts& artifacts, const std::filesystem::path& path);
LsiArtifacts load_lsi(const std::filesystem::path& path);

}  // namespace steervec
