#include "steervec/steertrain.hpp"

#include <algorithm>
#include <cmath>
#include <map>
#include <numeric>

#include "json.hpp"

namespace steervec {

SteeringTrainSet make_steering_trainset(const ParallelCorpus& corpus, const TrainsetSpec& spec) {
  if (corpus.kind() != ParallelCorpus::CellKind::tokens)
    raise(Errc::invalid_argument, "trainset construction expects a token corpus");
  if (spec.items < 1) raise(Errc::invalid_argument, "items >= 1");
  if (spec.mono_fraction < 0.0 || spec.mono_fraction > 1.0)
    raise(Errc::invalid_argument, "mono_fraction in [0,1]");

  std::vector<std::string> allowed;
  for (const auto& lang : corpus.languages()) {
    if (std::find(spec.deny.begin(), spec.deny.end(), lang.code) == spec.deny.end())
      allowed.push_back(lang.code);
  }
  if (allowed.size() < 2)
    raise(Errc::insufficient_languages, "need >= 2 languages after the deny-list");

  Rng rng(spec.seed ^ 0x74736574ull);
  SteeringTrainSet set;
  long mono = 0;
  for (int i = 0; i < spec.items; ++i) {
    const std::size_t sample =
        static_cast<std::size_t>(rng.uniform_int(0, static_cast<std::int64_t>(corpus.n_samples()) - 1));
    const auto& source = allowed[static_cast<std::size_t>(
        rng.uniform_int(0, static_cast<std::int64_t>(allowed.size()) - 1))];
    std::string target;
    if (rng.real01() < spec.mono_fraction) {
      target = source;
    } else {
      do {
        target = allowed[static_cast<std::size_t>(
            rng.uniform_int(0, static_cast<std::int64_t>(allowed.size()) - 1))];
      } while (target == source && allowed.size() > 1);
    }
    const auto src_tokens = corpus.cell_as_tokens(sample, corpus.language_index(source));
    const auto tgt_tokens = corpus.cell_as_tokens(sample, corpus.language_index(target));
    const int len = static_cast<int>(src_tokens.size());
    const int split = std::max(1, len / 2);
    if (split >= static_cast<int>(tgt_tokens.size())) {
      --i;  // degenerate sample for this split; redraw
      continue;
    }
    TrainItem item;
    item.source = source;
    item.target = target;
    item.prompt.assign(src_tokens.begin(), src_tokens.begin() + split);
    item.response.assign(tgt_tokens.begin() + split, tgt_tokens.end());
    if (item.response.empty()) {
      --i;
      continue;
    }
    if (source == target) ++mono;
    set.items.push_back(std::move(item));
  }
  set.mono_fraction = static_cast<double>(mono) / static_cast<double>(set.items.size());
  return set;
}

void TrainConfig::validate() const {
  if (rank < 1) raise(Errc::invalid_argument, "rank >= 1");
  if (dropout < 0.0f || dropout >= 1.0f) raise(Errc::invalid_argument, "dropout in [0,1)");
  if (epochs < 0 || batch < 1) raise(Errc::invalid_argument, "bad epochs/batch");
  if (beta < 0.0f || beta > 1.0f) raise(Errc::invalid_argument, "beta in [0,1]");
}

SteeredSequence make_steered_sequence(const LanguageVectorBank& bank, const TrainItem& item) {
  SteeredSequence seq;
  seq.tokens = item.prompt;
  seq.tokens.insert(seq.tokens.end(), item.response.begin(), item.response.end());
  seq.loss_start = static_cast<int>(item.prompt.size());
  seq.r_target = language_representation_all(bank, item.target);
  seq.r_source = language_representation_all(bank, item.source);
  return seq;
}

TrainStats train_learned_steering(const ToyTransformer& model, const LanguageVectorBank& bank,
                                  const SteeringTrainSet& trainset, const TrainConfig& config) {
  config.validate();
  if (!model.frozen) raise(Errc::invalid_argument, "base model must be frozen");
  if (trainset.items.empty()) raise(Errc::invalid_argument, "empty trainset");
  for (const auto& item : trainset.items) {
    if (!bank.has_language(item.source)) raise(Errc::unknown_language, item.source);
    if (!bank.has_language(item.target)) raise(Errc::unknown_language, item.target);
    if (item.response.empty()) raise(Errc::invalid_argument, "item with empty response");
  }

  TrainStats stats;
  stats.params = LearnedSteering::init(model.cfg.d_model, model.cfg.n_layers, config.rank,
                                       config.alpha, config.beta, config.seed);

  // r vectors are fixed per language; materialize once
  std::map<std::string, std::vector<float>> rcache;
  for (const auto& lang : bank.languages)
    rcache[lang.code] = language_representation_all(bank, lang.code);

  std::vector<SteeredSequence> sequences;
  sequences.reserve(trainset.items.size());
  for (const auto& item : trainset.items) {
    SteeredSequence seq;
    seq.tokens = item.prompt;
    seq.tokens.insert(seq.tokens.end(), item.response.begin(), item.response.end());
    seq.loss_start = static_cast<int>(item.prompt.size());
    seq.r_target = rcache.at(item.target);
    seq.r_source = rcache.at(item.source);
    sequences.push_back(std::move(seq));
  }

  Rng shuffle_rng(config.seed ^ 0x73676473ull);
  Rng dropout_rng(config.seed ^ 0x706f7264ull);
  std::vector<std::size_t> order(sequences.size());
  std::iota(order.begin(), order.end(), 0);

  for (int epoch = 0; epoch < config.epochs; ++epoch) {
    for (std::size_t i = order.size(); i > 1; --i)
      std::swap(order[i - 1],
                order[static_cast<std::size_t>(shuffle_rng.uniform_int(0, static_cast<std::int64_t>(i) - 1))]);
    for (std::size_t start = 0; start < order.size(); start += config.batch) {
      const std::size_t stop = std::min(order.size(), start + config.batch);
      std::vector<SteeredSequence> batch;
      for (std::size_t i = start; i < stop; ++i) batch.push_back(sequences[order[i]]);
      const SteeringGrads grads =
          grad_steering_params(model, batch, stats.params, config.norm_restore, config.dropout,
                               config.dropout > 0.0f ? &dropout_rng : nullptr);
      if (!std::isfinite(grads.loss)) raise(Errc::diverged_training, "non-finite training loss");
      stats.step_loss.push_back(grads.loss);
      for (int li = 0; li < stats.params.n_layers; ++li) {
        auto& a = stats.params.a[li];
        auto& b = stats.params.b[li];
        for (std::size_t j = 0; j < a.size(); ++j) a[j] -= config.lr * grads.a[li][j];
        for (std::size_t j = 0; j < b.size(); ++j) b[j] -= config.lr * grads.b[li][j];
      }
    }
  }
  return stats;
}

GradientCheckResult gradient_check(const ToyTransformer& model,
                                   std::span<const SteeredSequence> batch,
                                   const LearnedSteering& params, bool norm_restore, float epsilon,
                                   int min_entries, std::uint64_t seed) {
  if (model.cfg.d_model > 32 || params.rank > 8)
    raise(Errc::invalid_argument, "gradient_check is sized for d <= 32 and rank <= 8");
  const SteeringGrads analytic = grad_steering_params(model, batch, params, norm_restore);

  // sample entry coordinates across A and B of every layer
  struct Entry {
    int layer;
    bool in_a;
    std::size_t idx;
  };
  std::vector<Entry> entries;
  Rng rng(seed ^ 0x6b636863ull);
  const int per_matrix = std::max(1, min_entries / (2 * params.n_layers) + 1);
  for (int li = 0; li < params.n_layers; ++li) {
    for (int i = 0; i < per_matrix; ++i) {
      entries.push_back({li, true,
                         static_cast<std::size_t>(rng.uniform_int(
                             0, static_cast<std::int64_t>(params.a[li].size()) - 1))});
      entries.push_back({li, false,
                         static_cast<std::size_t>(rng.uniform_int(
                             0, static_cast<std::int64_t>(params.b[li].size()) - 1))});
    }
  }

  // gradient-vector scale: the error floor sits at the overall infinity norm
  // of the analytic gradient, so near-zero entries are judged against the
  // gradient's magnitude rather than f32 finite-difference noise
  double grad_scale = 0.0;
  for (int li = 0; li < params.n_layers; ++li) {
    for (float x : analytic.a[li]) grad_scale = std::max(grad_scale, static_cast<double>(std::fabs(x)));
    for (float x : analytic.b[li]) grad_scale = std::max(grad_scale, static_cast<double>(std::fabs(x)));
  }

  LearnedSteering probe = params;
  GradientCheckResult result;
  result.entries_checked = static_cast<int>(entries.size());
  for (const auto& e : entries) {
    float& slot = e.in_a ? probe.a[e.layer][e.idx] : probe.b[e.layer][e.idx];
    const float saved = slot;
    slot = saved + epsilon;
    const double up = steering_loss(model, batch, probe, norm_restore);
    slot = saved - epsilon;
    const double down = steering_loss(model, batch, probe, norm_restore);
    slot = saved;
    const double fd = (up - down) / (2.0 * static_cast<double>(epsilon));
    const double an = e.in_a ? analytic.a[e.layer][e.idx] : analytic.b[e.layer][e.idx];
    const double abs_err = std::fabs(an - fd);
    const double denom = std::max({std::fabs(an), std::fabs(fd), grad_scale, 1e-8});
    result.max_abs_error = std::max(result.max_abs_error, abs_err);
    result.max_rel_error = std::max(result.max_rel_error, abs_err / denom);
  }
  return result;
}

void write_training_log(const std::vector<double>& step_loss, const std::filesystem::path& path) {
  std::string out;
  for (std::size_t i = 0; i < step_loss.size(); ++i) {
    nlohmann::json j = {{"step", i}, {"loss", step_loss[i]}};
    out += j.dump();
    out += '\n';
  }
  atomic_write_file(path, out);
}

}  // namespace steervec
