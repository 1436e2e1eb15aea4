// End-to-end smoke test of the CLI: a miniature gen-synth -> pretrain ->
// build-vectors -> eval pipeline in a temp directory, plus exit-code and
// byte-identity checks.

#include <array>
#include <cstdio>
#include <filesystem>
#include <string>

#include "doctest.h"
#include "helpers.hpp"
#include "json.hpp"
#include "steervec/common.hpp"
#include "steervec/corpus.hpp"
#include "steervec/vectors.hpp"

namespace fs = std::filesystem;

namespace {

struct CommandResult {
  int exit_code = -1;
  std::string output;
};

CommandResult run_cli(const std::string& args) {
  const std::string cmd = std::string(STEERVEC_CLI_PATH) + " " + args + " 2>&1";
  CommandResult result;
  FILE* pipe = popen(cmd.c_str(), "r");
  REQUIRE(pipe != nullptr);
  std::array<char, 4096> buf;
  while (std::size_t n = fread(buf.data(), 1, buf.size(), pipe)) result.output.append(buf.data(), n);
  const int status = pclose(pipe);
  result.exit_code = WIFEXITED(status) ? WEXITSTATUS(status) : -1;
  return result;
}

const fs::path& workdir() {
  static const fs::path dir = [] {
    auto d = testutil::temp_path("cli");
    fs::create_directories(d);
    return d;
  }();
  return dir;
}

std::string path_of(const char* name) { return (workdir() / name).string(); }

}  // namespace

TEST_CASE("usage errors exit with 1 and print flag documentation") {
  const auto result = run_cli("eval --definitely-not-a-flag");
  CHECK(result.exit_code == 1);
  CHECK(result.output.find("--") != std::string::npos);
  const auto nosub = run_cli("");
  CHECK(nosub.exit_code == 1);
}

TEST_CASE("runtime errors exit with 2") {
  const auto result = run_cli("cluster --bank /nonexistent.stvb --out " + path_of("d.json"));
  CHECK(result.exit_code == 2);
  CHECK(result.output.find("error") != std::string::npos);
}

TEST_CASE("the full pipeline runs end to end") {
  const auto corpus = path_of("corpus.jsonl");
  auto step = run_cli("gen-synth --languages 3 --families 2 --alphabet 16 --samples 160 "
                      "--min-len 6 --max-len 10 --seed 5 --out " + corpus);
  REQUIRE(step.exit_code == 0);
  CHECK(fs::exists(corpus));
  CHECK(fs::exists(corpus + ".manifest.json"));

  const auto model = path_of("model.stvm");
  step = run_cli("pretrain --corpus " + corpus +
                 " --d-model 16 --n-layers 2 --heads 2 --epochs 2 --lr 0.002 --batch 16 "
                 "--holdout 0.1 --seed 3 --out " + model);
  REQUIRE(step.exit_code == 0);

  const auto bank = path_of("bank.stvb");
  step = run_cli("build-vectors --model " + model + " --corpus " + corpus +
                 " --holdout 0.1 --use train --out " + bank);
  REQUIRE(step.exit_code == 0);

  // one-shot steering
  step = run_cli("steer --model " + model + " --bank " + bank +
                 " --mode cross --target syn2 --source syn0 --alpha 2 "
                 "--prompt-tokens 1,2,3,4 --max-new 6");
  REQUIRE(step.exit_code == 0);
  CHECK(step.output.find("generated") != std::string::npos);

  // text prompts ride the byte-level fallback tokenizer; the bytes must lie
  // within this model's 48-token vocabulary, so use low-codepoint characters
  step = run_cli("steer --model " + model + " --bank " + bank +
                 " --mode mono --target syn1 --alpha 1 --prompt '!#%' --max-new 4");
  REQUIRE(step.exit_code == 0);
  CHECK(step.output.find("generated_text") != std::string::npos);
  // out-of-vocabulary text is a runtime error, not a crash
  step = run_cli("steer --model " + model + " --bank " + bank +
                 " --mode mono --target syn1 --alpha 1 --prompt abc --max-new 4");
  CHECK(step.exit_code == 2);

  // eval with steering
  const auto report = path_of("report.json");
  step = run_cli("eval --model " + model + " --corpus " + corpus +
                 " --holdout 0.1 --use held --bank " + bank +
                 " --mode cross --alpha 2 --pairs syn0:syn2 --n-prompts 12 --prompt-len 4 "
                 "--max-new 6 --out " + report);
  REQUIRE(step.exit_code == 0);
  CHECK(fs::exists(report));

  // clustering emits json and text art
  const auto dendro = path_of("dendro.json");
  step = run_cli("cluster --bank " + bank + " --layer last --out " + dendro);
  REQUIRE(step.exit_code == 0);
  CHECK(fs::exists(dendro));
  CHECK(nlohmann::json::parse(steervec::read_file(dendro)).contains("merges"));

  // train-steer produces a checkpoint and a log
  const auto steer_file = path_of("steer.stvl");
  step = run_cli("train-steer --model " + model + " --bank " + bank + " --corpus " + corpus +
                 " --items 40 --rank 4 --epochs 1 --lr 0.001 --batch 8 --seed 7 --out " +
                 steer_file + " --log " + path_of("train.jsonl"));
  REQUIRE(step.exit_code == 0);
  CHECK(fs::exists(steer_file));
  CHECK(fs::exists(path_of("train.jsonl")));

  // ablation table: N+1 rows for a 2-layer model
  const auto ablation = path_of("ablation.json");
  step = run_cli("ablate --model " + model + " --corpus " + corpus +
                 " --holdout 0.1 --use held --bank " + bank +
                 " --mode cross --alpha 1 --pairs syn0:syn1 --n-prompts 6 --prompt-len 4 "
                 "--max-new 4 --out " + ablation);
  REQUIRE(step.exit_code == 0);
  const auto table = nlohmann::json::parse(steervec::read_file(ablation));
  CHECK(table["runs"].size() == 3);

  // lsi-build reports probe accuracy
  const auto lsi = path_of("lsi.stvi");
  step = run_cli("lsi-build --model " + model + " --corpus " + corpus +
                 " --tau 0.25 --gamma 0.5 --k 4 --holdout 0.2 --out " + lsi);
  REQUIRE(step.exit_code == 0);
  CHECK(step.output.find("probe held-out accuracy") != std::string::npos);

  // steer-only sweep shape: rows = alphas x norms
  const auto sweep = path_of("sweep.json");
  step = run_cli("steer-only-eval --model " + model + " --corpus " + corpus +
                 " --holdout 0.1 --use held --bank " + bank +
                 " --pairs syn0:syn2 --n-prompts 8 --prompt-len 4 --max-new 4 "
                 "--alphas 1,2 --norms true,false --out " + sweep);
  REQUIRE(step.exit_code == 0);
  CHECK(nlohmann::json::parse(steervec::read_file(sweep))["runs"].size() == 4);
}

TEST_CASE("alpha zero and omitted steering flags produce byte-identical reports") {
  const auto corpus = path_of("corpus.jsonl");
  const auto model = path_of("model.stvm");
  const auto bank = path_of("bank.stvb");
  REQUIRE(fs::exists(model));  // pipeline test ran first

  const auto a = path_of("zero_alpha.json");
  auto step = run_cli("eval --model " + model + " --corpus " + corpus +
                      " --holdout 0.1 --use held --bank " + bank +
                      " --alpha 0 --pairs syn0:syn1 --n-prompts 8 --prompt-len 4 --max-new 4 "
                      "--out " + a);
  REQUIRE(step.exit_code == 0);
  const auto b = path_of("no_steering.json");
  step = run_cli("eval --model " + model + " --corpus " + corpus +
                 " --holdout 0.1 --use held --pairs syn0:syn1 --n-prompts 8 --prompt-len 4 "
                 "--max-new 4 --out " + b);
  REQUIRE(step.exit_code == 0);
  CHECK(steervec::read_file(a) == steervec::read_file(b));

  // manifests differ only where they should (flags, timestamps, hashes)
  const auto ma = nlohmann::json::parse(steervec::read_file(a + ".manifest.json"));
  CHECK(ma["command"] == "eval");

  // report-diff of a report against itself prints no deltas beyond zeros
  const auto diff = run_cli("report-diff " + a + " " + b);
  CHECK(diff.exit_code == 0);
  CHECK(diff.output.find("(+0)") != std::string::npos);
}

TEST_CASE("add-lang extends a bank built from fewer languages") {
  const auto corpus = path_of("corpus.jsonl");
  const auto model = path_of("model.stvm");
  REQUIRE(fs::exists(model));

  // rebuild a 2-language corpus file, bank it, then add the third
  const auto small = path_of("small.jsonl");
  {
    auto full = steervec::load_corpus(corpus, steervec::CorpusFormat::jsonl);
    const std::vector<std::string> keep = {"syn0", "syn1"};
    steervec::save_corpus(full.restrict_languages(keep), small);
  }
  const auto bank2 = path_of("bank2.stvb");
  auto step = run_cli("build-vectors --model " + model + " --corpus " + small +
                      " --holdout 0.1 --use train --out " + bank2);
  REQUIRE(step.exit_code == 0);
  const auto bank3 = path_of("bank3.stvb");
  step = run_cli("add-lang --model " + model + " --corpus " + corpus +
                 " --holdout 0.1 --use train --bank " + bank2 + " --lang syn2 --out " + bank3);
  REQUIRE(step.exit_code == 0);
  const auto loaded = steervec::load_bank(bank3);
  CHECK(loaded.languages.size() == 3);
}
