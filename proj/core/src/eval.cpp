#include "steervec/eval.hpp"

#include <algorithm>
#include <cmath>
#include <sstream>

#include "json.hpp"

namespace steervec {

using nlohmann::json;

namespace {

std::string strip(std::string_view s) {
  std::size_t b = 0, e = s.size();
  while (b < e && std::isspace(static_cast<unsigned char>(s[b]))) ++b;
  while (e > b && std::isspace(static_cast<unsigned char>(s[e - 1]))) --e;
  return std::string(s.substr(b, e - b));
}

std::vector<std::string> non_empty_lines(const std::string& text) {
  std::vector<std::string> lines;
  std::size_t start = 0;
  while (start <= text.size()) {
    const std::size_t nl = text.find('\n', start);
    const std::string line =
        strip(text.substr(start, nl == std::string::npos ? std::string::npos : nl - start));
    if (!line.empty()) lines.push_back(line);
    if (nl == std::string::npos) break;
    start = nl + 1;
  }
  return lines;
}

bool line_passes(const Response& r, const std::string& line_text, std::span<const int> line_tokens,
                 std::string_view expected, const LanguageIdentifier& identifier) {
  if (r.is_tokens) return identifier.identify_tokens(line_tokens).code == expected;
  return identifier.identify_text(line_text).code == expected;
}

}  // namespace

double line_pass_rate(std::span<const Response> responses, std::string_view expected,
                      const LanguageIdentifier& identifier) {
  if (!identifier.covers(expected)) raise(Errc::unknown_language, std::string(expected));
  long total = 0, correct = 0;
  for (const auto& r : responses) {
    if (r.is_tokens) {
      ++total;  // a token response is a single line
      if (!r.tokens.empty() && line_passes(r, {}, r.tokens, expected, identifier)) ++correct;
      continue;
    }
    const auto lines = non_empty_lines(r.text);
    if (lines.empty()) {
      ++total;  // empty generation counts as one failing line
      continue;
    }
    for (const auto& line : lines) {
      ++total;
      if (line_passes(r, line, {}, expected, identifier)) ++correct;
    }
  }
  if (total == 0) return 0.0;
  return static_cast<double>(correct) / static_cast<double>(total);
}

double line_pass_rate_response_mean(std::span<const Response> responses, std::string_view expected,
                                    const LanguageIdentifier& identifier) {
  if (!identifier.covers(expected)) raise(Errc::unknown_language, std::string(expected));
  if (responses.empty()) return 0.0;
  double sum = 0.0;
  for (const auto& r : responses) {
    std::span<const Response> one(&r, 1);
    sum += line_pass_rate(one, expected, identifier);
  }
  return sum / static_cast<double>(responses.size());
}

std::optional<double> word_pass_rate(std::span<const Response> responses,
                                     std::string_view expected,
                                     const LanguageIdentifier& identifier, std::string* reason) {
  if (!identifier.covers(expected)) raise(Errc::unknown_language, std::string(expected));
  const LanguageTag& tag = identifier.tag(expected);
  if (tag.script == Script::latin) {
    if (reason) *reason = "latin-script target";
    return std::nullopt;
  }

  long words = 0, passed = 0;
  bool any_correct_line = false;
  for (const auto& r : responses) {
    if (r.is_tokens) {
      if (r.tokens.empty() || !line_passes(r, {}, r.tokens, expected, identifier)) continue;
      any_correct_line = true;
      for (int t : r.tokens) {
        ++words;  // each token acts as one word; range membership as script
        if (tag.range.contains(t)) ++passed;
      }
      continue;
    }
    for (const auto& line : non_empty_lines(r.text)) {
      if (!line_passes(r, line, {}, expected, identifier)) continue;
      any_correct_line = true;
      std::istringstream words_in(line);
      std::string word;
      while (words_in >> word) {
        int letters = 0, in_script = 0;
        for (char32_t cp : decode_utf8(word)) {
          if (!codepoint_is_letter(cp)) continue;
          ++letters;
          if (codepoint_in_script(cp, tag.script)) ++in_script;
        }
        if (letters == 0) continue;  // punctuation/digits only
        ++words;
        if (2 * in_script > letters) ++passed;
      }
    }
  }
  if (!any_correct_line) {
    if (reason) *reason = "no correct lines";
    return std::nullopt;
  }
  if (words == 0) {
    if (reason) *reason = "no scorable words";
    return std::nullopt;
  }
  return static_cast<double>(passed) / static_cast<double>(words);
}

// ---------------------------------------------------------------------------
// Report serialization

std::string EvalReport::to_json_string() const {
  json j;
  j["runs"] = json::array();
  for (const auto& run : runs) {
    json r;
    r["source"] = run.source;
    r["target"] = run.target;
    r["lpr"] = run.lpr ? json(*run.lpr) : json(nullptr);
    r["wpr"] = run.wpr ? json(*run.wpr) : json(nullptr);
    if (run.wpr_reason) r["wpr_reason"] = *run.wpr_reason;
    r["n"] = run.n_prompts;
    r["alpha"] = run.alpha;
    r["layers"] = run.layers;
    r["norm_restore"] = run.norm_restore;
    r["mode"] = run.mode;
    if (run.left_out) r["left_out"] = *run.left_out;
    if (run.target_token_fraction) r["token_fraction"] = *run.target_token_fraction;
    j["runs"].push_back(std::move(r));
  }
  j["config"] = json::parse(config_json);
  j["model_hash"] = model_hash;
  return j.dump(2);
}

EvalReport EvalReport::from_json_string(std::string_view s) {
  json j = json::parse(s, nullptr, false);
  if (j.is_discarded()) raise(Errc::parse_error, "invalid report JSON");
  EvalReport report;
  report.model_hash = j.value("model_hash", "");
  report.config_json = j.contains("config") ? j["config"].dump() : "{}";
  for (const auto& r : j.at("runs")) {
    EvalRun run;
    run.source = r.at("source").get<std::string>();
    run.target = r.at("target").get<std::string>();
    if (!r.at("lpr").is_null()) run.lpr = r.at("lpr").get<double>();
    if (r.contains("wpr") && !r["wpr"].is_null()) run.wpr = r["wpr"].get<double>();
    if (r.contains("wpr_reason")) run.wpr_reason = r["wpr_reason"].get<std::string>();
    run.n_prompts = r.at("n").get<int>();
    run.alpha = r.value("alpha", 0.0);
    if (r.contains("layers")) run.layers = r["layers"].get<std::vector<int>>();
    run.norm_restore = r.value("norm_restore", false);
    run.mode = r.value("mode", "none");
    if (r.contains("left_out")) run.left_out = r["left_out"].get<int>();
    if (r.contains("token_fraction")) run.target_token_fraction = r["token_fraction"].get<double>();
    report.runs.push_back(std::move(run));
  }
  return report;
}

void save_report(const EvalReport& report, const std::filesystem::path& path) {
  atomic_write_file(path, report.to_json_string() + "\n");
}

EvalReport load_report(const std::filesystem::path& path) {
  return EvalReport::from_json_string(read_file(path));
}

namespace {

std::string run_key(const EvalRun& r) {
  std::ostringstream os;
  os << r.source << "->" << r.target << " alpha=" << r.alpha << " layers=[";
  for (std::size_t i = 0; i < r.layers.size(); ++i) os << (i ? "," : "") << r.layers[i];
  os << "] norm=" << (r.norm_restore ? "on" : "off");
  if (r.left_out) os << " left_out=" << *r.left_out;
  return os.str();
}

}  // namespace

std::string report_diff(const EvalReport& a, const EvalReport& b) {
  std::ostringstream os;
  std::map<std::string, const EvalRun*> index;
  for (const auto& run : b.runs) index[run_key(run)] = &run;
  std::map<std::string, bool> seen;
  for (const auto& run : a.runs) {
    const auto key = run_key(run);
    seen[key] = true;
    const auto it = index.find(key);
    if (it == index.end()) {
      os << key << ": only in first report\n";
      continue;
    }
    const EvalRun& other = *it->second;
    auto cell = [&](const char* name, std::optional<double> x, std::optional<double> y) {
      if (!x && !y) return;
      os << key << " " << name << ": ";
      if (x) os << *x;
      else os << "null";
      os << " -> ";
      if (y) os << *y;
      else os << "null";
      if (x && y) {
        const double delta = *y - *x;
        os << " (" << (delta >= 0 ? "+" : "") << delta << ")";
      }
      os << "\n";
    };
    cell("lpr", run.lpr, other.lpr);
    cell("wpr", run.wpr, other.wpr);
    cell("token_fraction", run.target_token_fraction, other.target_token_fraction);
  }
  for (const auto& run : b.runs) {
    const auto key = run_key(run);
    if (!seen.count(key)) os << key << ": only in second report\n";
  }
  return os.str();
}

// ---------------------------------------------------------------------------
// Harness

namespace {

struct PairGroup {
  std::string source, target;
  std::vector<std::size_t> prompt_idx;
};

std::vector<PairGroup> group_pairs(std::span<const EvalPrompt> prompts) {
  std::vector<PairGroup> groups;
  for (std::size_t i = 0; i < prompts.size(); ++i) {
    PairGroup* g = nullptr;
    for (auto& existing : groups)
      if (existing.source == prompts[i].source && existing.target == prompts[i].target)
        g = &existing;
    if (!g) {
      groups.push_back({prompts[i].source, prompts[i].target, {}});
      g = &groups.back();
    }
    g->prompt_idx.push_back(i);
  }
  return groups;
}

}  // namespace

EvalReport run_eval(const ToyTransformer& model, const HookFactory& hooks,
                    std::span<const EvalPrompt> prompts, const LanguageIdentifier& identifier,
                    const RunOptions& opts, std::string config_json) {
  EvalReport report;
  report.config_json = std::move(config_json);
  report.model_hash = model.weight_hash().hex();
  if (prompts.empty()) {
    EvalRun empty;  // n_prompts = 0, null rates
    empty.mode = opts.mode;
    empty.alpha = opts.alpha;
    empty.layers = opts.layers;
    empty.norm_restore = opts.norm_restore;
    empty.left_out = opts.left_out;
    report.runs.push_back(std::move(empty));
    return report;
  }

  const auto groups = group_pairs(prompts);
  // hooks are built once per (source, target) pair, then shared read-only
  // across worker threads
  std::vector<std::optional<LayerHook>> pair_hooks(groups.size());
  std::vector<int> pair_of_prompt(prompts.size(), 0);
  for (std::size_t g = 0; g < groups.size(); ++g) {
    pair_hooks[g] = hooks ? hooks(groups[g].source, groups[g].target) : std::nullopt;
    for (auto i : groups[g].prompt_idx) pair_of_prompt[i] = static_cast<int>(g);
  }

  std::vector<std::vector<int>> generated(prompts.size());
  parallel_for(prompts.size(), opts.threads, [&](std::size_t i) {
    const auto& hook = pair_hooks[pair_of_prompt[i]];
    generated[i] = model.generate(prompts[i].prompt, hook ? &*hook : nullptr, opts.max_new);
  });

  const bool token_mode = identifier.strategy() == IdentifyStrategy::token_range;
  for (const auto& g : groups) {
    std::vector<Response> responses;
    long new_tokens = 0, in_target = 0;
    const TokenRange range = token_mode ? identifier.tag(g.target).range : TokenRange{};
    for (auto i : g.prompt_idx) {
      std::vector<int> fresh(generated[i].begin() + static_cast<std::ptrdiff_t>(prompts[i].prompt.size()),
                             generated[i].end());
      for (int t : fresh) {
        ++new_tokens;
        if (token_mode && range.contains(t)) ++in_target;
      }
      if (token_mode)
        responses.push_back(Response::of_tokens(std::move(fresh)));
      else
        responses.push_back(Response::of_text(byte_detokenize(fresh)));
    }

    EvalRun run;
    run.source = g.source;
    run.target = g.target;
    run.n_prompts = static_cast<int>(g.prompt_idx.size());
    run.lpr = line_pass_rate(responses, g.target, identifier);
    std::string reason;
    run.wpr = word_pass_rate(responses, g.target, identifier, &reason);
    if (!run.wpr) run.wpr_reason = reason;
    if (token_mode && new_tokens > 0)
      run.target_token_fraction = static_cast<double>(in_target) / static_cast<double>(new_tokens);
    run.alpha = opts.alpha;
    run.layers = opts.layers;
    run.norm_restore = opts.norm_restore;
    run.mode = opts.mode;
    run.left_out = opts.left_out;
    report.runs.push_back(std::move(run));
  }
  return report;
}

EvalReport layer_ablation(const ToyTransformer& model, const LayeredHookFactory& hooks,
                          std::span<const EvalPrompt> prompts,
                          const LanguageIdentifier& identifier, const RunOptions& opts,
                          std::string config_json) {
  const int n_layers = model.cfg.n_layers;
  std::vector<int> all_layers = opts.layers;
  if (all_layers.empty())
    for (int l = 1; l <= n_layers; ++l) all_layers.push_back(l);

  EvalReport report;
  report.config_json = config_json;
  report.model_hash = model.weight_hash().hex();

  auto run_with = [&](const std::vector<int>& layers, std::optional<int> left_out) {
    RunOptions row = opts;
    row.layers = layers;
    row.left_out = left_out;
    const auto sub = run_eval(
        model,
        [&](std::string_view s, std::string_view t) { return hooks(s, t, layers); }, prompts,
        identifier, row, config_json);
    for (const auto& r : sub.runs) report.runs.push_back(r);
  };

  run_with(all_layers, std::nullopt);
  for (int leave : all_layers) {
    std::vector<int> layers;
    for (int l : all_layers)
      if (l != leave) layers.push_back(l);
    run_with(layers, leave);
  }
  return report;
}

EvalReport steer_only_eval(const ToyTransformer& model, const SweepHookFactory& hooks,
                           std::span<const EvalPrompt> prompts,
                           const LanguageIdentifier& identifier, std::span<const double> alphas,
                           const std::vector<bool>& norm_settings, const RunOptions& opts,
                           std::string config_json) {
  if (alphas.empty()) raise(Errc::invalid_argument, "alpha sweep is empty");
  EvalReport report;
  report.config_json = config_json;
  report.model_hash = model.weight_hash().hex();
  for (double alpha : alphas) {
    for (bool norm : norm_settings) {
      RunOptions row = opts;
      row.alpha = alpha;
      row.norm_restore = norm;
      row.mode = "steer_only";
      const auto sub = run_eval(
          model,
          [&](std::string_view s, std::string_view t) { return hooks(s, t, alpha, norm); },
          prompts, identifier, row, config_json);
      for (const auto& r : sub.runs) report.runs.push_back(r);
    }
  }
  return report;
}

}  // namespace steervec
