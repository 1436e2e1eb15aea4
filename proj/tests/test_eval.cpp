#include <algorithm>
#include <cmath>

#include "doctest.h"
#include "helpers.hpp"
#include "steervec/eval.hpp"
#include "steervec/steering.hpp"

namespace sv = steervec;
using testutil::temp_path;
using testutil::tiny_world;

namespace {

sv::LanguageIdentifier es_en_identifier() {
  // trained on the evaluation lines themselves: a deliberately perfect
  // classifier for the metric-exactness fixtures
  const std::vector<std::pair<std::string, std::string>> lines = {
      {"es", "Hola mundo"},   {"es", "Buenos dias amigos"}, {"es", "Gracias por todo"},
      {"en", "Hello world"},  {"en", "Good morning friends"}, {"en", "Thanks for everything"},
  };
  return sv::LanguageIdentifier::train_char_ngram(
      lines, {{"es", sv::Script::latin, {}}, {"en", sv::Script::latin, {}}});
}

// deterministic pseudo-language text: each language draws words from its own
// consonant/vowel inventory
std::string pseudo_word(sv::Rng& rng, int lang) {
  static const char* consonants[6] = {"bcdfg", "klmnp", "rstvz", "qwxjh", "bdgkt", "lmrsn"};
  static const char* vowels[6] = {"ae", "io", "ua", "ei", "ou", "ay"};
  std::string word;
  const int syllables = 2 + static_cast<int>(rng.uniform_int(0, 2));
  for (int s = 0; s < syllables; ++s) {
    word += consonants[lang][rng.uniform_int(0, 4)];
    word += vowels[lang][rng.uniform_int(0, 1)];
  }
  return word;
}

std::string pseudo_line(sv::Rng& rng, int lang, int words = 6) {
  std::string line;
  for (int w = 0; w < words; ++w) {
    if (w) line += ' ';
    line += pseudo_word(rng, lang);
  }
  return line;
}

}  // namespace

// ---------------------------------------------------------------------------
// identification

TEST_CASE("token-range identification is exact on synthetic data") {
  const auto& world = tiny_world();
  const auto identifier = sv::LanguageIdentifier::token_range(world.train.languages());
  for (std::size_t s = 0; s < 40; ++s) {
    for (std::size_t l = 0; l < world.train.n_languages(); ++l) {
      const auto got = identifier.identify_tokens(world.train.token_cell(s, l));
      CHECK(got.code == world.train.languages()[l].code);
      CHECK(got.confidence == 1.0);
    }
  }
}

TEST_CASE("mixed token sequences resolve by majority share") {
  const auto& world = tiny_world();
  const auto identifier = sv::LanguageIdentifier::token_range(world.train.languages());
  // 3 tokens from syn0's range [0,20), 1 from syn1's [20,40)
  const std::vector<int> tokens = {1, 2, 3, 21};
  const auto got = identifier.identify_tokens(tokens);
  CHECK(got.code == "syn0");
  CHECK(got.confidence == 0.75);
}

TEST_CASE("identification of empty input is an error") {
  const auto& world = tiny_world();
  const auto identifier = sv::LanguageIdentifier::token_range(world.train.languages());
  try {
    identifier.identify_tokens({});
    FAIL("expected EmptyInput");
  } catch (const sv::Error& e) {
    CHECK(e.code() == sv::Errc::empty_input);
  }
}

TEST_CASE("char-ngram identifier reaches 0.9 accuracy on held-out pseudo-language lines") {
  std::vector<sv::LanguageTag> tags;
  std::vector<std::pair<std::string, std::string>> train, held;
  sv::Rng rng(33);
  for (int lang = 0; lang < 6; ++lang) {
    tags.push_back({"pl" + std::to_string(lang), sv::Script::latin, {}});
    for (int i = 0; i < 40; ++i) train.emplace_back(tags.back().code, pseudo_line(rng, lang));
    for (int i = 0; i < 25; ++i) held.emplace_back(tags.back().code, pseudo_line(rng, lang));
  }
  const auto identifier = sv::LanguageIdentifier::train_char_ngram(train, tags);
  int correct = 0;
  for (const auto& [code, line] : held)
    if (identifier.identify_text(line).code == code) ++correct;
  CHECK(static_cast<double>(correct) / held.size() >= 0.9);
}

TEST_CASE("script heuristic separates scripts and ties break lexicographically") {
  const std::vector<sv::LanguageTag> tags = {{"ja", sv::Script::hiragana_katakana, {}},
                                             {"ru", sv::Script::cyrillic, {}},
                                             {"en", sv::Script::latin, {}}};
  const auto identifier = sv::LanguageIdentifier::script_heuristic(tags);
  CHECK(identifier.identify_text("\xe3\x81\x93\xe3\x82\x93\xe3\x81\xab\xe3\x81\xa1\xe3\x81\xaf").code == "ja");
  CHECK(identifier.identify_text("\xd0\xbf\xd1\x80\xd0\xb8\xd0\xb2\xd0\xb5\xd1\x82").code == "ru");
  CHECK(identifier.identify_text("hello").code == "en");
  // no letters at all: every language scores zero, smallest code wins
  CHECK(identifier.identify_text("123 !!").code == "en");
}

// ---------------------------------------------------------------------------
// line pass rate

TEST_CASE("half the lines in the expected language gives 0.5") {
  const auto identifier = es_en_identifier();
  REQUIRE(identifier.identify_text("Hola mundo").code == "es");
  REQUIRE(identifier.identify_text("Hello world").code == "en");
  const std::vector<sv::Response> responses = {
      sv::Response::of_text("Hola mundo\nHello world")};
  CHECK(sv::line_pass_rate(responses, "es", identifier) == 0.5);
}

TEST_CASE("all lines in the expected language gives 1.0") {
  const auto identifier = es_en_identifier();
  const std::vector<sv::Response> responses = {
      sv::Response::of_text("Hola mundo"),
      sv::Response::of_text("Buenos dias amigos\nGracias por todo")};
  CHECK(sv::line_pass_rate(responses, "es", identifier) == 1.0);
}

TEST_CASE("line pooling counts lines, not responses") {
  const auto identifier = es_en_identifier();
  // 3 responses with 2/1/1 lines, 3 of the 4 lines correct -> 0.75
  const std::vector<sv::Response> responses = {
      sv::Response::of_text("Hola mundo\nHello world"),
      sv::Response::of_text("Buenos dias amigos"),
      sv::Response::of_text("Gracias por todo"),
  };
  CHECK(sv::line_pass_rate(responses, "es", identifier) == 0.75);
  // response-averaged alternative differs: (0.5 + 1 + 1) / 3
  CHECK(sv::line_pass_rate_response_mean(responses, "es", identifier) ==
        doctest::Approx(2.5 / 3.0));
}

TEST_CASE("an empty generation counts as one failing line") {
  const auto identifier = es_en_identifier();
  const std::vector<sv::Response> responses = {
      sv::Response::of_text("Hola mundo"),
      sv::Response::of_text("   \n  "),
  };
  CHECK(sv::line_pass_rate(responses, "es", identifier) == 0.5);
}

TEST_CASE("line pass rate is invariant to response order") {
  const auto identifier = es_en_identifier();
  std::vector<sv::Response> responses = {
      sv::Response::of_text("Hola mundo\nHello world"),
      sv::Response::of_text("Gracias por todo"),
      sv::Response::of_text("Good morning friends"),
  };
  const double forward = sv::line_pass_rate(responses, "es", identifier);
  std::reverse(responses.begin(), responses.end());
  CHECK(sv::line_pass_rate(responses, "es", identifier) == forward);
}

TEST_CASE("unknown expected language is an error") {
  const auto identifier = es_en_identifier();
  const std::vector<sv::Response> responses = {sv::Response::of_text("Hola mundo")};
  CHECK_THROWS_AS(sv::line_pass_rate(responses, "fr", identifier), sv::Error);
}

TEST_CASE("on single-line responses lpr equals the per-response fraction") {
  const auto identifier = es_en_identifier();
  const std::vector<sv::Response> responses = {
      sv::Response::of_text("Hola mundo"), sv::Response::of_text("Hello world"),
      sv::Response::of_text("Gracias por todo"), sv::Response::of_text("Buenos dias amigos")};
  int in_language = 0;
  for (const auto& r : responses)
    if (identifier.identify_text(r.text).code == "es") ++in_language;
  CHECK(sv::line_pass_rate(responses, "es", identifier) ==
        static_cast<double>(in_language) / static_cast<double>(responses.size()));
}

// ---------------------------------------------------------------------------
// word pass rate

namespace {

sv::LanguageIdentifier ja_en_identifier() {
  const std::vector<std::pair<std::string, std::string>> lines = {
      {"ja", "\xe3\x81\x93\xe3\x82\x93\xe3\x81\xab\xe3\x81\xa1\xe3\x81\xaf"},  // こんにちは
      {"ja", "\xe3\x81\x82\xe3\x82\x8a\xe3\x81\x8c\xe3\x81\xa8\xe3\x81\x86"},  // ありがとう
      {"en", "hello world"},
      {"en", "thanks again"},
  };
  return sv::LanguageIdentifier::train_char_ngram(
      lines, {{"ja", sv::Script::hiragana_katakana, {}}, {"en", sv::Script::latin, {}}});
}

}  // namespace

TEST_CASE("wpr counts the fraction of words in the expected script") {
  const auto identifier = ja_en_identifier();
  const std::string line = "\xe3\x81\x93\xe3\x82\x93\xe3\x81\xab\xe3\x81\xa1\xe3\x81\xaf world";
  REQUIRE(identifier.identify_text(line).code == "ja");  // the line passes as ja
  const std::vector<sv::Response> responses = {sv::Response::of_text(line)};
  const auto wpr = sv::word_pass_rate(responses, "ja", identifier);
  REQUIRE(wpr.has_value());
  CHECK(*wpr == 0.5);
}

TEST_CASE("wpr is null for latin-script targets") {
  const auto identifier = es_en_identifier();
  const std::vector<sv::Response> responses = {sv::Response::of_text("Hola mundo")};
  std::string reason;
  CHECK(!sv::word_pass_rate(responses, "es", identifier, &reason).has_value());
  CHECK(reason == "latin-script target");
}

TEST_CASE("wpr is null with a reason when no line passes") {
  const auto identifier = ja_en_identifier();
  const std::vector<sv::Response> responses = {sv::Response::of_text("hello world")};
  std::string reason;
  CHECK(!sv::word_pass_rate(responses, "ja", identifier, &reason).has_value());
  CHECK(reason == "no correct lines");
}

TEST_CASE("wpr ignores failing lines entirely") {
  const auto identifier = ja_en_identifier();
  const std::string passing = "\xe3\x81\x93\xe3\x82\x93\xe3\x81\xab\xe3\x81\xa1\xe3\x81\xaf world";
  const std::vector<sv::Response> a = {sv::Response::of_text(passing + "\nhello world")};
  const std::vector<sv::Response> b = {sv::Response::of_text(passing + "\nthanks again thanks")};
  CHECK(sv::word_pass_rate(a, "ja", identifier) == sv::word_pass_rate(b, "ja", identifier));
}

TEST_CASE("pure punctuation words are excluded from the wpr denominator") {
  const auto identifier = ja_en_identifier();
  const std::string line =
      "\xe3\x81\x93\xe3\x82\x93\xe3\x81\xab\xe3\x81\xa1\xe3\x81\xaf ... 42";
  REQUIRE(identifier.identify_text(line).code == "ja");
  const std::vector<sv::Response> responses = {sv::Response::of_text(line)};
  const auto wpr = sv::word_pass_rate(responses, "ja", identifier);
  REQUIRE(wpr.has_value());
  CHECK(*wpr == 1.0);  // "..." and "42" carry no letters
}

TEST_CASE("token responses score wpr by range membership over passing lines") {
  const auto& world = tiny_world();
  const auto identifier = sv::LanguageIdentifier::token_range(world.train.languages());
  // syn0 range is [0,20): 3 in-range tokens and 1 stray
  const std::vector<sv::Response> responses = {sv::Response::of_tokens({1, 2, 3, 25})};
  const auto wpr = sv::word_pass_rate(responses, "syn0", identifier);
  REQUIRE(wpr.has_value());
  CHECK(*wpr == 0.75);
}

// ---------------------------------------------------------------------------
// harness

TEST_CASE("an identity configuration reproduces the unsteered report") {
  const auto& world = tiny_world();
  const auto identifier = sv::LanguageIdentifier::token_range(world.train.languages());
  std::vector<sv::EvalPrompt> prompts;
  for (std::size_t s = 0; s < 10; ++s) {
    const auto& cell = world.held.token_cell(s % world.held.n_samples(), 0);
    prompts.push_back({"syn0", "syn1", std::vector<int>(cell.begin(), cell.begin() + 4)});
  }
  sv::RunOptions opts;
  opts.max_new = 6;

  sv::SteeringConfig config;
  config.mode = sv::SteerMode::cross;
  config.alpha = 0.0f;
  const auto with_identity = sv::run_eval(
      world.model,
      [&](std::string_view s, std::string_view t) {
        return sv::make_hook(world.bank, config, t, s);
      },
      prompts, identifier, opts, "{}");
  const auto without = sv::run_eval(
      world.model, [](std::string_view, std::string_view) { return std::nullopt; }, prompts,
      identifier, opts, "{}");
  CHECK(with_identity.to_json_string() == without.to_json_string());
}

TEST_CASE("an empty prompt list yields a null-rate report") {
  const auto& world = tiny_world();
  const auto identifier = sv::LanguageIdentifier::token_range(world.train.languages());
  const auto report = sv::run_eval(
      world.model, [](std::string_view, std::string_view) { return std::nullopt; }, {}, identifier,
      {}, "{}");
  REQUIRE(report.runs.size() == 1);
  CHECK(report.runs[0].n_prompts == 0);
  CHECK(!report.runs[0].lpr.has_value());
  CHECK(!report.runs[0].wpr.has_value());
}

TEST_CASE("steered cross evaluation beats the unsteered baseline on synthetic data") {
  const auto& world = tiny_world();
  const auto identifier = sv::LanguageIdentifier::token_range(world.train.languages());
  std::vector<sv::EvalPrompt> prompts;
  for (std::size_t s = 0; s < 20; ++s) {
    const auto& cell = world.held.token_cell(s % world.held.n_samples(), 0);
    prompts.push_back({"syn0", "syn2", std::vector<int>(cell.begin(), cell.begin() + 4)});
  }
  sv::SteeringConfig config;
  config.mode = sv::SteerMode::cross;
  config.alpha = 2.0f;
  sv::RunOptions opts;
  opts.max_new = 8;
  opts.alpha = config.alpha;
  opts.mode = "cross";

  const auto steered = sv::run_eval(
      world.model,
      [&](std::string_view s, std::string_view t) {
        return sv::make_hook(world.bank, config, t, s);
      },
      prompts, identifier, opts, "{}");
  const auto baseline = sv::run_eval(
      world.model, [](std::string_view, std::string_view) { return std::nullopt; }, prompts,
      identifier, sv::RunOptions{.max_new = 8}, "{}");
  REQUIRE(steered.runs.size() == 1);
  REQUIRE(baseline.runs.size() == 1);
  CHECK(*steered.runs[0].target_token_fraction > *baseline.runs[0].target_token_fraction);
  CHECK(*steered.runs[0].lpr > *baseline.runs[0].lpr);
}

TEST_CASE("layer ablation emits the N+1 rows and an all-layers-removed identity") {
  const auto& world = tiny_world();
  const auto identifier = sv::LanguageIdentifier::token_range(world.train.languages());
  std::vector<sv::EvalPrompt> prompts;
  for (std::size_t s = 0; s < 6; ++s) {
    const auto& cell = world.held.token_cell(s % world.held.n_samples(), 0);
    prompts.push_back({"syn0", "syn1", std::vector<int>(cell.begin(), cell.begin() + 4)});
  }
  sv::SteeringConfig config;
  config.mode = sv::SteerMode::cross;
  config.alpha = 1.0f;
  sv::RunOptions opts;
  opts.max_new = 6;

  const auto table = sv::layer_ablation(
      world.model,
      [&](std::string_view s, std::string_view t, const std::vector<int>& layers) {
        sv::SteeringConfig c = config;
        c.active_layers = layers;
        return sv::make_hook(world.bank, c, t, s);
      },
      prompts, identifier, opts, "{}");
  // N = 2 layers -> 3 rows for the single (source, target) pair
  REQUIRE(table.runs.size() == 3);
  CHECK(!table.runs[0].left_out.has_value());
  CHECK(table.runs[1].left_out == 1);
  CHECK(table.runs[1].layers == std::vector<int>{2});
  CHECK(table.runs[2].left_out == 2);
  CHECK(table.runs[2].layers == std::vector<int>{1});

  // removing every layer reproduces the unsteered baseline exactly
  sv::SteeringConfig none = config;
  none.active_layers = std::vector<int>{};
  sv::RunOptions base_opts;
  base_opts.max_new = 6;
  const auto empty_hook = sv::run_eval(
      world.model,
      [&](std::string_view s, std::string_view t) { return sv::make_hook(world.bank, none, t, s); },
      prompts, identifier, base_opts, "{}");
  const auto unsteered = sv::run_eval(
      world.model, [](std::string_view, std::string_view) { return std::nullopt; }, prompts,
      identifier, base_opts, "{}");
  CHECK(empty_hook.to_json_string() == unsteered.to_json_string());
}

TEST_CASE("ablation tables round-trip through serialization") {
  const auto& world = tiny_world();
  const auto identifier = sv::LanguageIdentifier::token_range(world.train.languages());
  std::vector<sv::EvalPrompt> prompts = {
      {"syn0", "syn1",
       std::vector<int>(world.held.token_cell(0, 0).begin(), world.held.token_cell(0, 0).begin() + 4)}};
  sv::SteeringConfig config;
  config.mode = sv::SteerMode::cross;
  config.alpha = 1.0f;
  const auto table = sv::layer_ablation(
      world.model,
      [&](std::string_view s, std::string_view t, const std::vector<int>& layers) {
        sv::SteeringConfig c = config;
        c.active_layers = layers;
        return sv::make_hook(world.bank, c, t, s);
      },
      prompts, identifier, sv::RunOptions{.max_new = 4}, "{\"table\":true}");

  const auto path = temp_path("ablation.json");
  sv::save_report(table, path);
  const auto loaded = sv::load_report(path);
  REQUIRE(loaded.runs.size() == table.runs.size());
  for (std::size_t i = 0; i < table.runs.size(); ++i) {
    CHECK(loaded.runs[i].left_out == table.runs[i].left_out);
    CHECK(loaded.runs[i].layers == table.runs[i].layers);
    CHECK(loaded.runs[i].lpr == table.runs[i].lpr);
  }
  CHECK(loaded.to_json_string() == table.to_json_string());
}

TEST_CASE("steer-only sweep reports one row per configuration") {
  const auto& world = tiny_world();
  const auto identifier = sv::LanguageIdentifier::token_range(world.train.languages());
  std::vector<sv::EvalPrompt> prompts;
  for (std::size_t s = 0; s < 8; ++s) {
    const auto& cell = world.held.token_cell(s % world.held.n_samples(), 0);
    prompts.push_back({"syn0", "syn2", std::vector<int>(cell.begin(), cell.begin() + 4)});
  }
  const std::vector<double> alphas = {0.0, 1.0, 2.0};
  const std::vector<bool> norms = {true, false};
  const auto report = sv::steer_only_eval(
      world.model,
      [&](std::string_view s, std::string_view t, double alpha, bool norm) -> std::optional<sv::LayerHook> {
        if (alpha == 0.0) return std::nullopt;
        sv::SteeringConfig c;
        c.mode = sv::SteerMode::steer_only;
        c.alpha = static_cast<float>(alpha);
        c.norm_restore = norm;
        return sv::make_hook(world.bank, c, t, s);
      },
      prompts, identifier, alphas, norms, sv::RunOptions{.max_new = 6}, "{}");
  REQUIRE(report.runs.size() == alphas.size() * norms.size());
  // alpha = 0 rows approximate the prompt-language baseline: near-zero
  // target fraction on synthetic data
  CHECK(*report.runs[0].target_token_fraction <= 0.1);
  for (const auto& run : report.runs) CHECK(run.mode == "steer_only");
}

TEST_CASE("report diff prints per-cell deltas") {
  sv::EvalReport a, b;
  sv::EvalRun run;
  run.source = "syn0";
  run.target = "syn1";
  run.lpr = 0.5;
  run.n_prompts = 10;
  a.runs.push_back(run);
  run.lpr = 0.75;
  b.runs.push_back(run);
  const auto diff = sv::report_diff(a, b);
  CHECK(diff.find("lpr: 0.5 -> 0.75") != std::string::npos);
  CHECK(diff.find("+0.25") != std::string::npos);
}
