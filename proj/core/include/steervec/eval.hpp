#pragma once

#include <filesystem>
#include <functional>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "steervec/common.hpp"
#include "steervec/corpus.hpp"
#include "steervec/model.hpp"

namespace steervec {

// ---------------------------------------------------------------------------
// Script tables (explicit code-point ranges). A character counts as a letter
// when it belongs to any known script.

bool codepoint_in_script(char32_t cp, Script script);
bool codepoint_is_letter(char32_t cp);
std::vector<char32_t> decode_utf8(std::string_view text);

// ---------------------------------------------------------------------------
// Language identification

enum class IdentifyStrategy { token_range, script_heuristic, char_ngram };

struct Identification {
  std::string code;
  double confidence = 0.0;
};

class LanguageIdentifier {
 public:
  static LanguageIdentifier token_range(std::vector<LanguageTag> languages);
  static LanguageIdentifier script_heuristic(std::vector<LanguageTag> languages);
  // order-3 byte model with add-one smoothing and class priors; train and
  // evaluation data must come from disjoint splits
  static LanguageIdentifier train_char_ngram(
      std::span<const std::pair<std::string, std::string>> labeled,
      std::vector<LanguageTag> languages);

  IdentifyStrategy strategy() const { return strategy_; }
  const std::vector<LanguageTag>& languages() const { return languages_; }
  bool covers(std::string_view code) const;
  const LanguageTag& tag(std::string_view code) const;

  Identification identify_tokens(std::span<const int> tokens) const;
  Identification identify_text(std::string_view text) const;

 private:
  IdentifyStrategy strategy_ = IdentifyStrategy::token_range;
  std::vector<LanguageTag> languages_;
  // char_ngram state
  std::vector<std::map<std::uint32_t, std::uint32_t>> trigram_counts_;  // per language
  std::vector<double> log_prior_, log_total_;
};

// ---------------------------------------------------------------------------
// Metrics. A response is either text (split into lines on '\n') or a token
// sequence (one line; each token is a word for script purposes).

struct Response {
  std::string text;
  std::vector<int> tokens;
  bool is_tokens = false;

  static Response of_text(std::string t) { return {std::move(t), {}, false}; }
  static Response of_tokens(std::vector<int> t) { return {{}, std::move(t), true}; }
};

// line-pooled across responses; a response with no non-empty lines counts as
// one failing line
double line_pass_rate(std::span<const Response> responses, std::string_view expected,
                      const LanguageIdentifier& identifier);
// per-response-averaged alternative (exposed, not the default)
double line_pass_rate_response_mean(std::span<const Response> responses, std::string_view expected,
                                    const LanguageIdentifier& identifier);

// Null for Latin-script targets and when no line passed (reason is set).
// Words with no letters are excluded; a word passes when the majority of its
// letters are in the expected script.
std::optional<double> word_pass_rate(std::span<const Response> responses,
                                     std::string_view expected,
                                     const LanguageIdentifier& identifier,
                                     std::string* reason = nullptr);

// ---------------------------------------------------------------------------
// Reports

struct EvalRun {
  std::string source, target;
  std::optional<double> lpr;  // null when the run saw no prompts
  std::optional<double> wpr;
  std::optional<std::string> wpr_reason;
  int n_prompts = 0;
  double alpha = 0.0;
  std::vector<int> layers;  // empty = unsteered
  bool norm_restore = false;
  std::string mode = "none";
  std::optional<int> left_out;
  std::optional<double> target_token_fraction;  // token corpora only
};

struct EvalReport {
  std::vector<EvalRun> runs;
  std::string config_json = "{}";  // resolved config snapshot
  std::string model_hash;

  std::string to_json_string() const;
  static EvalReport from_json_string(std::string_view s);
};

void save_report(const EvalReport& report, const std::filesystem::path& path);
EvalReport load_report(const std::filesystem::path& path);
// per-cell deltas between two reports, aligned on
// (source, target, alpha, layers, norm_restore, left_out)
std::string report_diff(const EvalReport& a, const EvalReport& b);

// ---------------------------------------------------------------------------
// End-to-end harness

struct EvalPrompt {
  std::string source, target;
  std::vector<int> prompt;
};

// builds the hook for one (source, target) pair; return nullopt for an
// unsteered run
using HookFactory =
    std::function<std::optional<LayerHook>(std::string_view source, std::string_view target)>;

struct RunOptions {
  int max_new = 16;
  int threads = 1;
  // report row annotations
  double alpha = 0.0;
  std::vector<int> layers;
  bool norm_restore = false;
  std::string mode = "none";
  std::optional<int> left_out;
};

EvalReport run_eval(const ToyTransformer& model, const HookFactory& hooks,
                    std::span<const EvalPrompt> prompts, const LanguageIdentifier& identifier,
                    const RunOptions& opts, std::string config_json = "{}");

// N+1 rows: all active layers, then leave-one-out for each layer. make_config
// must honor RunOptions.layers when building hooks.
using LayeredHookFactory = std::function<std::optional<LayerHook>(
    std::string_view source, std::string_view target, const std::vector<int>& layers)>;

EvalReport layer_ablation(const ToyTransformer& model, const LayeredHookFactory& hooks,
                          std::span<const EvalPrompt> prompts,
                          const LanguageIdentifier& identifier, const RunOptions& opts,
                          std::string config_json = "{}");

// alpha (x norm-restore) sweep with steering as the only language signal;
// prompts must carry no target-language marker
using SweepHookFactory = std::function<std::optional<LayerHook>(
    std::string_view source, std::string_view target, double alpha, bool norm_restore)>;

EvalReport steer_only_eval(const ToyTransformer& model, const SweepHookFactory& hooks,
                           std::span<const EvalPrompt> prompts,
                           const LanguageIdentifier& identifier, std::span<const double> alphas,
                           const std::vector<bool>& norm_settings, const RunOptions& opts,
                           std::string config_json = "{}");

}  // namespace steervec
