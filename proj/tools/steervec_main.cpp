// steervec: steering-vector toolkit CLI. Every artifact-producing subcommand
// writes exactly one manifest alongside its primary output; file writes are
// atomic; all randomness sits behind --seed.

#include <iostream>
#include <optional>
#include <sstream>
#include <string>

#include "CLI11.hpp"
#include "json.hpp"
#include "steervec/corpus.hpp"
#include "steervec/eval.hpp"
#include "steervec/lsi.hpp"
#include "steervec/manifest.hpp"
#include "steervec/model.hpp"
#include "steervec/steertrain.hpp"
#include "steervec/steering.hpp"
#include "steervec/vectors.hpp"

namespace sv = steervec;
using nlohmann::json;

namespace {

sv::CorpusFormat parse_format(const std::string& name) {
  if (name == "jsonl") return sv::CorpusFormat::jsonl;
  if (name == "tsv") return sv::CorpusFormat::tsv;
  throw CLI::ValidationError("--format", "expected jsonl or tsv");
}

std::vector<int> parse_int_list(const std::string& csv) {
  std::vector<int> out;
  std::stringstream ss(csv);
  std::string item;
  while (std::getline(ss, item, ',')) {
    if (!item.empty()) out.push_back(std::stoi(item));
  }
  return out;
}

std::vector<double> parse_double_list(const std::string& csv) {
  std::vector<double> out;
  std::stringstream ss(csv);
  std::string item;
  while (std::getline(ss, item, ',')) {
    if (!item.empty()) out.push_back(std::stod(item));
  }
  return out;
}

std::vector<std::string> parse_str_list(const std::string& csv) {
  std::vector<std::string> out;
  std::stringstream ss(csv);
  std::string item;
  while (std::getline(ss, item, ',')) {
    if (!item.empty()) out.push_back(item);
  }
  return out;
}

// "a:b,c:d" -> [(a,b), (c,d)]
std::vector<std::pair<std::string, std::string>> parse_pairs(const std::string& csv) {
  std::vector<std::pair<std::string, std::string>> out;
  for (const auto& item : parse_str_list(csv)) {
    const auto colon = item.find(':');
    if (colon == std::string::npos)
      throw CLI::ValidationError("--pairs", "expected source:target items");
    out.emplace_back(item.substr(0, colon), item.substr(colon + 1));
  }
  return out;
}

// shared flag bundle for steering configuration
struct SteerFlags {
  std::string mode = "mono";
  double alpha = 1.0;
  double beta = 0.9;
  bool norm_restore = true;
  std::string layers;  // "", "none", or csv
  double epsilon = 1e-8;

  void attach(CLI::App* cmd) {
    cmd->add_option("--mode", mode, "steering mode: mono|cross|steer-only");
    cmd->add_option("--alpha", alpha, "steering scale");
    cmd->add_option("--beta", beta, "source scale (learned mode)");
    cmd->add_option("--norm-restore", norm_restore, "restore hidden-state norms after steering");
    cmd->add_option("--layers", layers, "active layers, e.g. 1,2,5 ('none' disables all)");
    cmd->add_option("--epsilon", epsilon, "zero-norm guard");
  }

  sv::SteeringConfig to_config() const {
    sv::SteeringConfig c;
    const auto m = sv::steer_mode_from_name(mode);
    if (!m) throw CLI::ValidationError("--mode", "expected mono|cross|steer-only");
    c.mode = *m;
    c.alpha = static_cast<float>(alpha);
    c.beta = static_cast<float>(beta);
    c.norm_restore = norm_restore;
    c.epsilon = static_cast<float>(epsilon);
    if (layers == "none")
      c.active_layers = std::vector<int>{};
    else if (!layers.empty())
      c.active_layers = parse_int_list(layers);
    return c;
  }
};

struct ArtifactFlags {
  std::string bank_path, positional_path, learned_path, lsi_path;
  double gamma = -1.0;  // <0 = use the artifact's stored gamma

  void attach(CLI::App* cmd) {
    cmd->add_option("--bank", bank_path, "language vector bank (.stvb)");
    cmd->add_option("--positional-bank", positional_path, "positional bank (.stvp)");
    cmd->add_option("--learned", learned_path, "learned steering checkpoint (.stvl)");
    cmd->add_option("--lsi", lsi_path, "probe-mask baseline artifacts (.stvi)");
    cmd->add_option("--gamma", gamma, "baseline steering scale override");
  }
};

struct LoadedArtifacts {
  std::optional<sv::LanguageVectorBank> bank;
  std::optional<sv::PositionalBank> positional;
  std::optional<sv::LearnedSteering> learned;
  std::optional<sv::LsiArtifacts> lsi;

  bool any() const { return bank || positional || learned || lsi; }
};

LoadedArtifacts load_artifacts(const ArtifactFlags& flags, sv::RunManifest* manifest) {
  LoadedArtifacts out;
  auto record = [&](const std::string& path) {
    if (manifest) manifest->add_input(path);
  };
  if (!flags.bank_path.empty()) {
    out.bank = sv::load_bank(flags.bank_path);
    record(flags.bank_path);
  }
  if (!flags.positional_path.empty()) {
    out.positional = sv::load_positional_bank(flags.positional_path);
    record(flags.positional_path);
  }
  if (!flags.learned_path.empty()) {
    out.learned = sv::load_learned_steering(flags.learned_path);
    record(flags.learned_path);
  }
  if (!flags.lsi_path.empty()) {
    out.lsi = sv::load_lsi(flags.lsi_path);
    record(flags.lsi_path);
  }
  return out;
}

std::optional<sv::LayerHook> build_hook(const LoadedArtifacts& art, const sv::SteeringConfig& config,
                                        std::string_view target, std::string_view source,
                                        double gamma) {
  if (config.alpha == 0.0f && !art.lsi) return std::nullopt;  // identity configuration
  if (art.lsi)
    return sv::make_hook(*art.lsi, config, target,
                         gamma >= 0.0 ? std::optional<float>(static_cast<float>(gamma))
                                      : std::nullopt);
  if (art.learned) {
    if (!art.bank) throw sv::Error(sv::Errc::invalid_argument, "--learned requires --bank");
    return sv::make_hook(*art.bank, *art.learned, config, target, source);
  }
  if (art.positional) return sv::make_hook(*art.positional, config, target, source);
  if (art.bank) return sv::make_hook(*art.bank, config, target, source);
  return std::nullopt;
}

// resolved configuration snapshot embedded in reports; an alpha of 0 or a
// missing artifact normalizes to the unsteered form so identity runs are
// byte-identical
json resolved_config(const LoadedArtifacts& art, const sv::SteeringConfig& config, int max_new,
                     const std::string& identifier) {
  json j;
  const bool steered = art.any() && (config.alpha != 0.0f || art.lsi.has_value());
  if (!steered) {
    j["steering"] = "none";
  } else {
    j["steering"] = json::parse(config.to_json_string());
    if (art.lsi) j["steering"]["baseline"] = "lsi";
    if (art.learned) j["steering"]["learned"] = true;
    if (art.positional) j["steering"]["positional"] = true;
  }
  j["max_new"] = max_new;
  j["identifier"] = identifier;
  return j;
}

sv::LanguageIdentifier make_identifier(const std::string& kind, const sv::ParallelCorpus& corpus) {
  if (kind == "token-range") return sv::LanguageIdentifier::token_range(corpus.languages());
  if (kind == "script") return sv::LanguageIdentifier::script_heuristic(corpus.languages());
  if (kind == "char-ngram") {
    // train on the leading half of the corpus; evaluation data should come
    // from the held-out part
    std::vector<std::pair<std::string, std::string>> labeled;
    const auto [train, held] = corpus.split_holdout(0.5);
    for (std::size_t s = 0; s < train.n_samples(); ++s)
      for (std::size_t l = 0; l < train.n_languages(); ++l)
        labeled.emplace_back(train.languages()[l].code, train.text_cell(s, l));
    return sv::LanguageIdentifier::train_char_ngram(labeled, corpus.languages());
  }
  throw CLI::ValidationError("--identifier", "expected token-range|script|char-ngram");
}

std::vector<sv::EvalPrompt> build_prompts(const sv::ParallelCorpus& part,
                                          const std::vector<std::pair<std::string, std::string>>& pairs,
                                          int n_prompts, int prompt_len) {
  std::vector<sv::EvalPrompt> prompts;
  for (const auto& [source, target] : pairs) {
    const std::size_t src_idx = part.language_index(source);
    (void)part.language_index(target);
    const std::size_t n = std::min<std::size_t>(n_prompts, part.n_samples());
    for (std::size_t s = 0; s < n; ++s) {
      auto tokens = part.cell_as_tokens(s, src_idx);
      if (static_cast<int>(tokens.size()) > prompt_len) tokens.resize(prompt_len);
      prompts.push_back({source, target, std::move(tokens)});
    }
  }
  return prompts;
}

std::map<std::string, std::string> flag_snapshot(const CLI::App* cmd) {
  std::map<std::string, std::string> flags;
  for (const auto* opt : cmd->get_options()) {
    if (opt->count() == 0) continue;
    std::string joined;
    for (const auto& r : opt->results()) {
      if (!joined.empty()) joined += ",";
      joined += r;
    }
    flags[opt->get_name()] = joined;
  }
  return flags;
}

sv::RunManifest make_manifest(const CLI::App* cmd, std::uint64_t seed = 0) {
  sv::RunManifest m;
  m.command = cmd->get_name();
  m.flags = flag_snapshot(cmd);
  m.seed = seed;
  return m;
}


}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"steervec: isolate per-language steering vectors, steer a toy transformer, "
               "and measure language confusion"};
  app.require_subcommand(1);

  // ---- gen-synth ----
  auto* gen = app.add_subcommand("gen-synth", "generate a synthetic multi-parallel corpus");
  sv::SyntheticSpec synth;
  std::string gen_out = "corpus.jsonl";
  gen->add_option("--languages", synth.n_languages, "number of synthetic languages");
  gen->add_option("--families", synth.n_families, "number of language families");
  gen->add_option("--alphabet", synth.content_alphabet, "content alphabet size");
  gen->add_option("--samples", synth.samples, "aligned sample count");
  gen->add_option("--min-len", synth.min_len, "minimum sample length");
  gen->add_option("--max-len", synth.max_len, "maximum sample length");
  gen->add_option("--seed", synth.seed, "generation seed");
  gen->add_option("--out", gen_out, "output corpus path")->required();

  // ---- pretrain ----
  auto* pre = app.add_subcommand("pretrain", "pretrain the toy transformer on a corpus");
  struct {
    std::string corpus, format = "jsonl", out = "model.stvm";
    int d_model = 64, n_layers = 4, heads = 4, max_seq = 64, epochs = 3, batch = 16;
    double lr = 1e-3, holdout = 0.1;
    std::uint64_t seed = 0;
  } pre_o;
  pre->add_option("--corpus", pre_o.corpus)->required();
  pre->add_option("--format", pre_o.format, "jsonl|tsv");
  pre->add_option("--d-model", pre_o.d_model);
  pre->add_option("--n-layers", pre_o.n_layers);
  pre->add_option("--heads", pre_o.heads);
  pre->add_option("--max-seq", pre_o.max_seq);
  pre->add_option("--epochs", pre_o.epochs);
  pre->add_option("--lr", pre_o.lr);
  pre->add_option("--batch", pre_o.batch);
  pre->add_option("--holdout", pre_o.holdout, "trailing sample fraction excluded from training");
  pre->add_option("--seed", pre_o.seed, "controls all initialization");
  pre->add_option("--out", pre_o.out)->required();

  // ---- build-vectors ----
  auto* bv = app.add_subcommand("build-vectors", "compute the per-language vector bank");
  struct {
    std::string model, corpus, format = "jsonl", out = "bank.stvb", use = "train";
    double holdout = 0.1;
    int positions = 0, threads = 0;
  } bv_o;
  bv->add_option("--model", bv_o.model)->required();
  bv->add_option("--corpus", bv_o.corpus)->required();
  bv->add_option("--format", bv_o.format);
  bv->add_option("--holdout", bv_o.holdout);
  bv->add_option("--use", bv_o.use, "corpus part for extraction: train|held|all");
  bv->add_option("--positions", bv_o.positions, "per-position buckets (0 = layer-level bank)");
  bv->add_option("--threads", bv_o.threads);
  bv->add_option("--out", bv_o.out)->required();

  // ---- add-lang ----
  auto* al = app.add_subcommand("add-lang", "add one language to an existing bank");
  struct {
    std::string bank, model, corpus, format = "jsonl", lang, out, use = "train";
    double holdout = 0.1;
    int threads = 0;
  } al_o;
  al->add_option("--bank", al_o.bank)->required();
  al->add_option("--model", al_o.model)->required();
  al->add_option("--corpus", al_o.corpus)->required();
  al->add_option("--format", al_o.format);
  al->add_option("--holdout", al_o.holdout);
  al->add_option("--use", al_o.use);
  al->add_option("--lang", al_o.lang, "language code to add")->required();
  al->add_option("--threads", al_o.threads);
  al->add_option("--out", al_o.out)->required();

  // ---- steer ----
  auto* st = app.add_subcommand("steer", "one-shot generation with steering");
  struct {
    std::string model, target, source, prompt_tokens, prompt_text, out;
    int max_new = 16;
  } st_o;
  SteerFlags st_cfg;
  ArtifactFlags st_art;
  st->add_option("--model", st_o.model)->required();
  st_art.attach(st);
  st_cfg.attach(st);
  st->add_option("--target", st_o.target, "target language code")->required();
  st->add_option("--source", st_o.source, "source (prompt) language code");
  st->add_option("--prompt-tokens", st_o.prompt_tokens, "comma-separated token ids");
  st->add_option("--prompt", st_o.prompt_text, "text prompt (byte-level tokenizer)");
  st->add_option("--max-new", st_o.max_new);
  st->add_option("--out", st_o.out, "write generation record as JSON");

  // ---- train-steer ----
  auto* ts = app.add_subcommand("train-steer", "train the learned steering function");
  struct {
    std::string model, bank, corpus, format = "jsonl", out = "steer.stvl", log, deny;
    int items = 500, rank = 32, epochs = 1, batch = 8;
    double lr = 1e-3, dropout = 0.2, mono_fraction = 0.3, alpha = 1.0, beta = 0.9;
    bool norm_restore = true;
    std::uint64_t seed = 0;
  } ts_o;
  ts->add_option("--model", ts_o.model)->required();
  ts->add_option("--bank", ts_o.bank)->required();
  ts->add_option("--corpus", ts_o.corpus)->required();
  ts->add_option("--format", ts_o.format);
  ts->add_option("--items", ts_o.items);
  ts->add_option("--mono-fraction", ts_o.mono_fraction);
  ts->add_option("--deny", ts_o.deny, "languages excluded from training, e.g. syn4,syn5");
  ts->add_option("--rank", ts_o.rank);
  ts->add_option("--epochs", ts_o.epochs);
  ts->add_option("--lr", ts_o.lr);
  ts->add_option("--dropout", ts_o.dropout);
  ts->add_option("--batch", ts_o.batch);
  ts->add_option("--alpha", ts_o.alpha);
  ts->add_option("--beta", ts_o.beta);
  ts->add_option("--norm-restore", ts_o.norm_restore);
  ts->add_option("--seed", ts_o.seed);
  ts->add_option("--out", ts_o.out)->required();
  ts->add_option("--log", ts_o.log, "JSONL training log path");

  // ---- eval / steer-only-eval / ablate (shared flags) ----
  struct EvalOpts {
    std::string model, corpus, format = "jsonl", pairs, identifier = "token-range", out, use = "held";
    double holdout = 0.1;
    int n_prompts = 100, prompt_len = 6, max_new = 16, threads = 0;
    std::string alphas = "0.5,1,2,4", norms = "true,false";
  };
  EvalOpts ev_o, so_o, ab_o;
  SteerFlags ev_cfg, so_cfg, ab_cfg;
  ArtifactFlags ev_art, so_art, ab_art;

  auto attach_eval = [&](CLI::App* cmd, EvalOpts& o, SteerFlags& cfg, ArtifactFlags& art) {
    cmd->add_option("--model", o.model)->required();
    cmd->add_option("--corpus", o.corpus)->required();
    cmd->add_option("--format", o.format);
    cmd->add_option("--holdout", o.holdout);
    cmd->add_option("--use", o.use, "prompt source: train|held|all");
    cmd->add_option("--pairs", o.pairs, "source:target list")->required();
    cmd->add_option("--n-prompts", o.n_prompts);
    cmd->add_option("--prompt-len", o.prompt_len);
    cmd->add_option("--max-new", o.max_new);
    cmd->add_option("--identifier", o.identifier, "token-range|script|char-ngram");
    cmd->add_option("--threads", o.threads);
    cmd->add_option("--out", o.out)->required();
    art.attach(cmd);
    cfg.attach(cmd);
  };

  auto* ev = app.add_subcommand("eval", "generate with the configured hook and report LPR/WPR");
  attach_eval(ev, ev_o, ev_cfg, ev_art);

  auto* so = app.add_subcommand("steer-only-eval",
                                "alpha sweep with steering as the only language indication");
  attach_eval(so, so_o, so_cfg, so_art);
  so->add_option("--alphas", so_o.alphas, "sweep values");
  so->add_option("--norms", so_o.norms, "norm-restore sweep, e.g. true,false");

  auto* ab = app.add_subcommand("ablate", "leave-one-layer-out ablation table");
  attach_eval(ab, ab_o, ab_cfg, ab_art);

  // ---- cluster ----
  auto* cl = app.add_subcommand("cluster", "hierarchical clustering of language representations");
  struct {
    std::string bank, layer = "last", out = "dendro.json";
  } cl_o;
  cl->add_option("--bank", cl_o.bank)->required();
  cl->add_option("--layer", cl_o.layer, "layer index or 'last'");
  cl->add_option("--out", cl_o.out)->required();

  // ---- lsi-build ----
  auto* lb = app.add_subcommand("lsi-build", "build the probe-mask baseline artifacts");
  struct {
    std::string model, corpus, format = "jsonl", out = "lsi.stvi";
    double tau = 0.1, gamma = 0.5, holdout = 0.2;
    int k = 8, probe_iters = 300, threads = 0;
    std::uint64_t seed = 0;
  } lb_o;
  lb->add_option("--model", lb_o.model)->required();
  lb->add_option("--corpus", lb_o.corpus)->required();
  lb->add_option("--format", lb_o.format);
  lb->add_option("--tau", lb_o.tau, "mask fraction");
  lb->add_option("--gamma", lb_o.gamma, "steering scale");
  lb->add_option("--k", lb_o.k, "contrast prompt pairs per language");
  lb->add_option("--probe-iters", lb_o.probe_iters);
  lb->add_option("--holdout", lb_o.holdout, "held part supplying contrast prompts");
  lb->add_option("--threads", lb_o.threads);
  lb->add_option("--seed", lb_o.seed);
  lb->add_option("--out", lb_o.out)->required();

  // ---- report-diff ----
  auto* rd = app.add_subcommand("report-diff", "print per-cell deltas between two reports");
  std::string rd_a, rd_b;
  rd->add_option("first", rd_a, "first report")->required();
  rd->add_option("second", rd_b, "second report")->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    std::cerr << e.what() << "\n\n" << app.help() << std::flush;
    return 1;
  }

  try {
    if (*gen) {
      auto result = sv::generate_synthetic_corpus(synth);
      sv::save_corpus(result.corpus, gen_out);
      sv::RunManifest manifest = make_manifest(gen, synth.seed);
      manifest.write_alongside(gen_out);
      std::cout << "wrote " << gen_out << " (" << result.corpus.n_samples() << " samples x "
                << result.corpus.n_languages() << " languages)\n";
    } else if (*pre) {
      auto corpus = sv::load_corpus(pre_o.corpus, parse_format(pre_o.format));
      auto [train, held] = corpus.split_holdout(pre_o.holdout);
      sv::ModelConfig cfg;
      cfg.d_model = pre_o.d_model;
      cfg.n_layers = pre_o.n_layers;
      cfg.n_heads = pre_o.heads;
      cfg.vocab_size = corpus.vocab_size();
      cfg.max_seq_len = std::max(pre_o.max_seq, corpus.max_cell_tokens());
      cfg.seed = pre_o.seed;
      sv::PretrainOptions opts{pre_o.epochs, static_cast<float>(pre_o.lr), pre_o.batch, pre_o.seed};
      auto result = sv::pretrain_toy(cfg, train, opts);
      result.model.save(pre_o.out);
      sv::RunManifest manifest = make_manifest(pre, pre_o.seed);
      manifest.add_input(pre_o.corpus);
      manifest.write_alongside(pre_o.out);
      std::cout << "loss " << result.initial_loss << " -> " << result.final_loss << "; wrote "
                << pre_o.out << "\n";
    } else if (*bv || *al) {
      const bool adding = static_cast<bool>(*al);
      const auto& path_model = adding ? al_o.model : bv_o.model;
      const auto& path_corpus = adding ? al_o.corpus : bv_o.corpus;
      const auto& fmt = adding ? al_o.format : bv_o.format;
      const auto& use = adding ? al_o.use : bv_o.use;
      const double holdout = adding ? al_o.holdout : bv_o.holdout;
      const int threads = adding ? al_o.threads : bv_o.threads;

      auto model = sv::ToyTransformer::load(path_model);
      auto corpus = sv::load_corpus(path_corpus, parse_format(fmt));
      auto [train, held] = corpus.split_holdout(holdout);
      const sv::ParallelCorpus& part = use == "train" ? train : (use == "held" ? held : corpus);

      if (adding) {
        auto bank = sv::load_bank(al_o.bank);
        const auto slice = part.slice_tokens(al_o.lang);
        auto bank2 = sv::add_language(bank, model, part.language(al_o.lang), slice,
                                      part.sample_ids(), threads);
        sv::save_bank(bank2, al_o.out);
        sv::RunManifest manifest = make_manifest(al);
        manifest.add_input(al_o.bank);
        manifest.add_input(al_o.model);
        manifest.add_input(al_o.corpus);
        manifest.write_alongside(al_o.out);
        std::cout << "wrote " << al_o.out << " (" << bank2.languages.size() << " languages)\n";
      } else if (bv_o.positions > 0) {
        auto bank = sv::build_positional_bank(model, part, bv_o.positions, threads);
        sv::save_positional_bank(bank, bv_o.out);
        sv::RunManifest manifest = make_manifest(bv);
        manifest.add_input(bv_o.model);
        manifest.add_input(bv_o.corpus);
        manifest.write_alongside(bv_o.out);
        std::cout << "wrote positional bank " << bv_o.out << "\n";
      } else {
        auto bank = sv::build_bank(model, part, threads);
        sv::save_bank(bank, bv_o.out);
        sv::RunManifest manifest = make_manifest(bv);
        manifest.add_input(bv_o.model);
        manifest.add_input(bv_o.corpus);
        manifest.write_alongside(bv_o.out);
        std::cout << "wrote " << bv_o.out << " (" << bank.languages.size() << " languages x "
                  << bank.n_layers << " layers)\n";
      }
    } else if (*st) {
      auto model = sv::ToyTransformer::load(st_o.model);
      sv::RunManifest manifest = make_manifest(st);
      manifest.add_input(st_o.model);
      const auto art = load_artifacts(st_art, &manifest);
      const auto config = st_cfg.to_config();

      std::vector<int> prompt;
      if (!st_o.prompt_tokens.empty())
        prompt = parse_int_list(st_o.prompt_tokens);
      else if (!st_o.prompt_text.empty())
        prompt = sv::byte_tokenize(st_o.prompt_text);
      else
        throw CLI::ValidationError("--prompt", "need --prompt-tokens or --prompt");

      const auto hook = build_hook(art, config, st_o.target, st_o.source, st_art.gamma);
      const auto tokens = model.generate(prompt, hook ? &*hook : nullptr, st_o.max_new);
      json record;
      record["prompt"] = prompt;
      record["generated"] = std::vector<int>(tokens.begin() + static_cast<std::ptrdiff_t>(prompt.size()),
                                             tokens.end());
      record["config"] = json::parse(config.to_json_string());
      if (!st_o.prompt_text.empty())
        record["generated_text"] = sv::byte_detokenize(
            std::span<const int>(tokens).subspan(prompt.size()));
      std::cout << record.dump(2) << "\n";
      if (!st_o.out.empty()) {
        sv::atomic_write_file(st_o.out, record.dump(2) + "\n");
        manifest.write_alongside(st_o.out);
      }
    } else if (*ts) {
      auto model = sv::ToyTransformer::load(ts_o.model);
      auto bank = sv::load_bank(ts_o.bank);
      auto corpus = sv::load_corpus(ts_o.corpus, parse_format(ts_o.format));
      sv::TrainsetSpec spec;
      spec.items = ts_o.items;
      spec.mono_fraction = ts_o.mono_fraction;
      spec.deny = parse_str_list(ts_o.deny);
      spec.seed = ts_o.seed;
      const auto trainset = sv::make_steering_trainset(corpus, spec);
      sv::TrainConfig config;
      config.epochs = ts_o.epochs;
      config.lr = static_cast<float>(ts_o.lr);
      config.dropout = static_cast<float>(ts_o.dropout);
      config.rank = ts_o.rank;
      config.batch = ts_o.batch;
      config.alpha = static_cast<float>(ts_o.alpha);
      config.beta = static_cast<float>(ts_o.beta);
      config.norm_restore = ts_o.norm_restore;
      config.seed = ts_o.seed;
      const auto stats = sv::train_learned_steering(model, bank, trainset, config);
      sv::save_learned_steering(stats.params, ts_o.out);
      if (!ts_o.log.empty()) sv::write_training_log(stats.step_loss, ts_o.log);
      sv::RunManifest manifest = make_manifest(ts, ts_o.seed);
      manifest.add_input(ts_o.model);
      manifest.add_input(ts_o.bank);
      manifest.add_input(ts_o.corpus);
      if (!ts_o.log.empty()) manifest.outputs.push_back(ts_o.log);
      manifest.write_alongside(ts_o.out);
      std::cout << "steps " << stats.step_loss.size() << ", first loss "
                << (stats.step_loss.empty() ? 0.0 : stats.step_loss.front()) << ", last loss "
                << (stats.step_loss.empty() ? 0.0 : stats.step_loss.back()) << "; wrote "
                << ts_o.out << "\n";
    } else if (*ev || *so || *ab) {
      EvalOpts& o = *ev ? ev_o : (*so ? so_o : ab_o);
      SteerFlags& cfg_flags = *ev ? ev_cfg : (*so ? so_cfg : ab_cfg);
      ArtifactFlags& art_flags = *ev ? ev_art : (*so ? so_art : ab_art);
      CLI::App* cmd = *ev ? ev : (*so ? so : ab);

      auto model = sv::ToyTransformer::load(o.model);
      sv::RunManifest manifest = make_manifest(cmd);
      manifest.add_input(o.model);
      manifest.add_input(o.corpus);
      const auto art = load_artifacts(art_flags, &manifest);
      auto config = cfg_flags.to_config();
      if (*so) config.mode = sv::SteerMode::steer_only;

      auto corpus = sv::load_corpus(o.corpus, parse_format(o.format));
      auto [train, held] = corpus.split_holdout(o.holdout);
      const sv::ParallelCorpus& part = o.use == "train" ? train : (o.use == "held" ? held : corpus);
      const auto identifier = make_identifier(o.identifier, corpus);
      const auto prompts = build_prompts(part, parse_pairs(o.pairs), o.n_prompts, o.prompt_len);

      const json snapshot = resolved_config(art, config, o.max_new, o.identifier);
      sv::RunOptions run_opts;
      run_opts.max_new = o.max_new;
      run_opts.threads = o.threads;
      const bool steered = art.any() && (config.alpha != 0.0f || art.lsi.has_value());
      run_opts.alpha = steered ? config.alpha : 0.0;
      run_opts.norm_restore = steered ? config.norm_restore : false;
      run_opts.mode = steered ? std::string(sv::steer_mode_name(config.mode)) : "none";
      run_opts.layers = steered ? config.layers_or_all(model.cfg.n_layers) : std::vector<int>{};

      sv::EvalReport report;
      if (*ev) {
        report = sv::run_eval(
            model,
            [&](std::string_view s, std::string_view t) {
              return build_hook(art, config, t, s, art_flags.gamma);
            },
            prompts, identifier, run_opts, snapshot.dump());
      } else if (*ab) {
        report = sv::layer_ablation(
            model,
            [&](std::string_view s, std::string_view t, const std::vector<int>& layers) {
              sv::SteeringConfig c = config;
              c.active_layers = layers;
              return build_hook(art, c, t, s, art_flags.gamma);
            },
            prompts, identifier, run_opts, snapshot.dump());
      } else {
        const auto alphas = parse_double_list(o.alphas);
        std::vector<bool> norms;
        for (const auto& n : parse_str_list(o.norms)) norms.push_back(n == "true" || n == "1");
        report = sv::steer_only_eval(
            model,
            [&](std::string_view s, std::string_view t, double alpha, bool norm) {
              sv::SteeringConfig c = config;
              c.alpha = static_cast<float>(alpha);
              c.norm_restore = norm;
              return build_hook(art, c, t, s, art_flags.gamma);
            },
            prompts, identifier, alphas, norms, run_opts, snapshot.dump());
      }
      sv::save_report(report, o.out);
      manifest.write_alongside(o.out);
      for (const auto& run : report.runs) {
        std::cout << run.source << "->" << run.target << " alpha=" << run.alpha
                  << " norm=" << (run.norm_restore ? "on" : "off");
        if (run.left_out) std::cout << " left_out=" << *run.left_out;
        std::cout << " lpr=" << (run.lpr ? std::to_string(*run.lpr) : "null");
        if (run.target_token_fraction) std::cout << " token_fraction=" << *run.target_token_fraction;
        std::cout << "\n";
      }
    } else if (*cl) {
      auto bank = sv::load_bank(cl_o.bank);
      const int layer = cl_o.layer == "last" ? -1 : std::stoi(cl_o.layer);
      const auto dendro = sv::cluster_languages(bank, layer);
      sv::atomic_write_file(cl_o.out, sv::dendrogram_to_json(dendro) + "\n");
      sv::RunManifest manifest = make_manifest(cl);
      manifest.add_input(cl_o.bank);
      manifest.write_alongside(cl_o.out);
      std::cout << sv::dendrogram_text_art(dendro);
    } else if (*lb) {
      auto model = sv::ToyTransformer::load(lb_o.model);
      auto corpus = sv::load_corpus(lb_o.corpus, parse_format(lb_o.format));
      auto [train, held] = corpus.split_holdout(lb_o.holdout);

      // probe data from the train part; contrast prompts from the held part
      std::vector<std::pair<std::string, std::vector<int>>> probe;
      for (std::size_t s = 0; s < train.n_samples(); ++s)
        for (std::size_t l = 0; l < train.n_languages(); ++l)
          probe.emplace_back(train.languages()[l].code, train.cell_as_tokens(s, l));

      std::map<std::string, std::vector<sv::ContrastPair>> contrast;
      for (std::size_t l = 0; l < held.n_languages(); ++l) {
        const auto& code = held.languages()[l].code;
        auto& pairs = contrast[code];
        const std::size_t m = held.n_samples();
        if (m < 2) throw sv::Error(sv::Errc::invalid_argument, "held part too small for contrast prompts");
        for (int k = 0; k < lb_o.k; ++k) {
          const auto example = held.cell_as_tokens(k % m, l);
          const auto base_src = held.cell_as_tokens((k + 1) % m, l);
          std::vector<int> base(base_src.begin(), base_src.begin() + 2);
          sv::ContrastPair pair;
          pair.instruction_only = base;
          pair.with_example = example;
          pair.with_example.insert(pair.with_example.end(), base.begin(), base.end());
          if (static_cast<int>(pair.with_example.size()) > model.cfg.max_seq_len)
            pair.with_example.resize(model.cfg.max_seq_len);
          pairs.push_back(std::move(pair));
        }
      }

      sv::LsiBuildOptions opts;
      opts.tau = static_cast<float>(lb_o.tau);
      opts.gamma = static_cast<float>(lb_o.gamma);
      opts.probe_iters = lb_o.probe_iters;
      opts.threads = lb_o.threads;
      const auto artifacts = sv::lsi_build(model, probe, contrast, opts);
      sv::save_lsi(artifacts, lb_o.out);
      sv::RunManifest manifest = make_manifest(lb, lb_o.seed);
      manifest.add_input(lb_o.model);
      manifest.add_input(lb_o.corpus);
      manifest.write_alongside(lb_o.out);
      std::cout << "probe held-out accuracy per layer:";
      for (double a : artifacts.probe_holdout_acc) std::cout << " " << a;
      std::cout << "\nwrote " << lb_o.out << "\n";
    } else if (*rd) {
      const auto a = sv::load_report(rd_a);
      const auto b = sv::load_report(rd_b);
      std::cout << sv::report_diff(a, b);
    }
  } catch (const sv::Error& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  }
  return 0;
}
