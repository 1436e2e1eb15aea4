#pragma once

#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include "steervec/common.hpp"
#include "steervec/corpus.hpp"
#include "steervec/model.hpp"
#include "steervec/steering.hpp"
#include "steervec/vectors.hpp"

namespace steervec {

struct TrainItem {
  std::string source, target;
  std::vector<int> prompt;    // in the source language, no target marker
  std::vector<int> response;  // in the target language
};

struct SteeringTrainSet {
  std::vector<TrainItem> items;
  double mono_fraction = 0.0;  // realized fraction
};

struct TrainsetSpec {
  int items = 500;
  double mono_fraction = 0.3;
  std::vector<std::string> deny;  // languages excluded as source and target
  std::uint64_t seed = 0;
};

// Items are drawn from aligned samples: the prompt is the first half of the
// source rendering, the response the remaining content in the target
// rendering. Prompts carry no explicit target-language marker.
SteeringTrainSet make_steering_trainset(const ParallelCorpus& corpus, const TrainsetSpec& spec);

struct TrainConfig {
  int epochs = 1;
  float lr = 1e-3f;  // desk-scale default
  float dropout = 0.2f;
  int rank = 32;
  int batch = 8;
  float alpha = 1.0f;
  float beta = 0.9f;
  bool norm_restore = true;
  std::uint64_t seed = 0;

  void validate() const;
};

struct TrainStats {
  LearnedSteering params;
  std::vector<double> step_loss;  // per optimizer step
};

// Plain stochastic gradient descent on (A, B) against the frozen model;
// loss is next-token cross-entropy on response tokens only. B starts at
// zero, so step 0 reproduces the unsupervised steering exactly.
TrainStats train_learned_steering(const ToyTransformer& model, const LanguageVectorBank& bank,
                                  const SteeringTrainSet& trainset, const TrainConfig& config);

// materializes the per-layer r vectors for one item (training plumbing,
// exposed for tests and the gradient check)
SteeredSequence make_steered_sequence(const LanguageVectorBank& bank, const TrainItem& item);

// Central finite differences vs analytic gradients over >= `min_entries`
// randomly chosen entries of A and B (dropout disabled). Per-entry error is
// |a - f| / max(|a|, |f|, ||g||_inf): near-zero entries are judged against
// the gradient's overall scale, which keeps f32 finite-difference noise from
// dominating the ratio.
struct GradientCheckResult {
  double max_rel_error = 0.0;
  double max_abs_error = 0.0;
  int entries_checked = 0;
};

GradientCheckResult gradient_check(const ToyTransformer& model,
                                   std::span<const SteeredSequence> batch,
                                   const LearnedSteering& params, bool norm_restore,
                                   float epsilon = 1e-3f, int min_entries = 50,
                                   std::uint64_t seed = 0);

void write_training_log(const std::vector<double>& step_loss, const std::filesystem::path& path);

}  // namespace steervec
