#include "steervec/lsi.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <memory>
#include <numeric>

namespace steervec {

int LsiArtifacts::mask_ones(float tau, int d) {
  return static_cast<int>(std::ceil(static_cast<double>(tau) * d));
}

std::size_t LsiArtifacts::language_index(std::string_view code) const {
  for (std::size_t i = 0; i < codes.size(); ++i)
    if (codes[i] == code) return i;
  raise(Errc::unknown_language, std::string(code));
}

std::span<const std::uint8_t> LsiArtifacts::mask_of(std::size_t lang, int layer) const {
  const std::size_t off = (lang * n_layers + static_cast<std::size_t>(layer - 1)) * d_model;
  return {masks.data() + off, static_cast<std::size_t>(d_model)};
}

std::span<const float> LsiArtifacts::rep_of(std::size_t lang, int layer) const {
  const std::size_t off = (lang * n_layers + static_cast<std::size_t>(layer - 1)) * d_model;
  return {reps.data() + off, static_cast<std::size_t>(d_model)};
}

namespace {

// multinomial logistic probe on standardized features, full-batch GD
struct Probe {
  int d = 0, classes = 0;
  std::vector<double> w;  // [class][d]
  std::vector<double> b;  // [class]
  std::vector<double> mu, sigma;

  void fit(const std::vector<std::vector<float>>& x, const std::vector<int>& y, int classes_,
           int iters, double lr) {
    d = static_cast<int>(x.front().size());
    classes = classes_;
    const std::size_t n = x.size();
    mu.assign(d, 0.0);
    sigma.assign(d, 0.0);
    for (const auto& row : x)
      for (int i = 0; i < d; ++i) mu[i] += row[i];
    for (int i = 0; i < d; ++i) mu[i] /= static_cast<double>(n);
    for (const auto& row : x)
      for (int i = 0; i < d; ++i) {
        const double c = row[i] - mu[i];
        sigma[i] += c * c;
      }
    for (int i = 0; i < d; ++i) sigma[i] = std::sqrt(sigma[i] / static_cast<double>(n)) + 1e-8;

    w.assign(static_cast<std::size_t>(classes) * d, 0.0);
    b.assign(classes, 0.0);
    std::vector<double> logits(classes), probs(classes);
    std::vector<double> gw(w.size()), gb(classes);
    std::vector<double> feat(d);
    for (int it = 0; it < iters; ++it) {
      std::fill(gw.begin(), gw.end(), 0.0);
      std::fill(gb.begin(), gb.end(), 0.0);
      for (std::size_t s = 0; s < n; ++s) {
        for (int i = 0; i < d; ++i) feat[i] = (x[s][i] - mu[i]) / sigma[i];
        forward(feat.data(), logits.data());
        double mx = *std::max_element(logits.begin(), logits.end());
        double denom = 0.0;
        for (int c = 0; c < classes; ++c) denom += (probs[c] = std::exp(logits[c] - mx));
        for (int c = 0; c < classes; ++c) {
          const double delta = probs[c] / denom - (c == y[s] ? 1.0 : 0.0);
          gb[c] += delta;
          double* row = gw.data() + static_cast<std::size_t>(c) * d;
          for (int i = 0; i < d; ++i) row[i] += delta * feat[i];
        }
      }
      const double scale = lr / static_cast<double>(n);
      for (std::size_t i = 0; i < w.size(); ++i) w[i] -= scale * gw[i];
      for (int c = 0; c < classes; ++c) b[c] -= scale * gb[c];
    }
  }

  void forward(const double* feat, double* logits) const {
    for (int c = 0; c < classes; ++c) {
      const double* row = w.data() + static_cast<std::size_t>(c) * d;
      double acc = b[c];
      for (int i = 0; i < d; ++i) acc += row[i] * feat[i];
      logits[c] = acc;
    }
  }

  int predict(const std::vector<float>& raw) const {
    std::vector<double> feat(d), logits(classes);
    for (int i = 0; i < d; ++i) feat[i] = (raw[i] - mu[i]) / sigma[i];
    forward(feat.data(), logits.data());
    int best = 0;
    for (int c = 1; c < classes; ++c)
      if (logits[c] > logits[best]) best = c;
    return best;
  }
};

}  // namespace

LsiArtifacts lsi_build(const ToyTransformer& model,
                       std::span<const std::pair<std::string, std::vector<int>>> probe_samples,
                       const std::map<std::string, std::vector<ContrastPair>>& contrast,
                       const LsiBuildOptions& opts) {
  if (probe_samples.empty()) raise(Errc::empty_input, "no probe samples");
  if (opts.tau <= 0.0f || opts.tau > 1.0f) raise(Errc::invalid_argument, "tau in (0,1]");
  const int n_layers = model.cfg.n_layers;
  const int d = model.cfg.d_model;

  LsiArtifacts art;
  art.tau = opts.tau;
  art.gamma = opts.gamma;
  art.n_layers = n_layers;
  art.d_model = d;
  for (const auto& [code, pairs] : contrast) {
    if (pairs.empty()) raise(Errc::invalid_argument, "no contrast pairs for " + code);
    art.codes.push_back(code);
  }
  if (art.codes.empty()) raise(Errc::invalid_argument, "empty contrast map");
  art.k_prompts = static_cast<int>(contrast.begin()->second.size());

  auto class_of = [&](std::string_view code) -> int {
    for (std::size_t i = 0; i < art.codes.size(); ++i)
      if (art.codes[i] == code) return static_cast<int>(i);
    return -1;
  };
  for (const auto& [code, tokens] : probe_samples) {
    if (class_of(code) < 0)
      raise(Errc::unknown_language, "probe sample language not in contrast set: " + code);
    if (tokens.size() < 2) raise(Errc::degenerate_sample, "probe sample with < 2 tokens");
  }
  const int classes = static_cast<int>(art.codes.size());

  // mean-pooled (non-first positions) features per layer
  std::vector<std::vector<std::vector<float>>> feats(n_layers);  // [layer][sample][d]
  std::vector<int> labels(probe_samples.size());
  for (auto& f : feats) f.resize(probe_samples.size());
  parallel_for(probe_samples.size(), opts.threads, [&](std::size_t s) {
    const auto& [code, tokens] = probe_samples[s];
    const auto out = model.forward_collect(tokens, nullptr);
    const int P = static_cast<int>(tokens.size());
    for (int layer = 1; layer <= n_layers; ++layer) {
      std::vector<double> acc(d, 0.0);
      for (int p = 1; p < P; ++p) {
        const auto h = out.states.at(layer, p);
        for (int i = 0; i < d; ++i) acc[i] += h[i];
      }
      auto& f = feats[layer - 1][s];
      f.resize(d);
      for (int i = 0; i < d; ++i) f[i] = static_cast<float>(acc[i] / (P - 1));
    }
  });
  for (std::size_t s = 0; s < probe_samples.size(); ++s) labels[s] = class_of(probe_samples[s].first);

  // per-language trailing holdout
  std::vector<std::size_t> train_idx, held_idx;
  {
    std::map<int, std::vector<std::size_t>> by_class;
    for (std::size_t s = 0; s < labels.size(); ++s) by_class[labels[s]].push_back(s);
    for (auto& [cls, idx] : by_class) {
      const std::size_t held =
          std::max<std::size_t>(1, static_cast<std::size_t>(std::floor(opts.probe_holdout * idx.size())));
      if (held >= idx.size())
        raise(Errc::invalid_argument, "not enough probe samples for class " + art.codes[cls]);
      train_idx.insert(train_idx.end(), idx.begin(), idx.end() - held);
      held_idx.insert(held_idx.end(), idx.end() - held, idx.end());
    }
    std::sort(train_idx.begin(), train_idx.end());
    std::sort(held_idx.begin(), held_idx.end());
  }

  const int ones = LsiArtifacts::mask_ones(opts.tau, d);
  art.masks.assign(static_cast<std::size_t>(classes) * n_layers * d, 0);
  art.probe_holdout_acc.resize(n_layers);

  for (int layer = 1; layer <= n_layers; ++layer) {
    std::vector<std::vector<float>> xtr;
    std::vector<int> ytr;
    for (auto s : train_idx) {
      xtr.push_back(feats[layer - 1][s]);
      ytr.push_back(labels[s]);
    }
    Probe probe;
    probe.fit(xtr, ytr, classes, opts.probe_iters, opts.probe_lr);

    int correct = 0;
    for (auto s : held_idx)
      if (probe.predict(feats[layer - 1][s]) == labels[s]) ++correct;
    const double acc = static_cast<double>(correct) / static_cast<double>(held_idx.size());
    art.probe_holdout_acc[layer - 1] = acc;
    if (acc <= 1.0 / classes)
      raise(Errc::probe_degenerate,
            "held-out accuracy " + std::to_string(acc) + " at layer " + std::to_string(layer));

    // mask = top ceil(tau*d) dimensions by |probe weight| for the class;
    // ties break on the smaller dimension index
    for (int c = 0; c < classes; ++c) {
      std::vector<int> order(d);
      std::iota(order.begin(), order.end(), 0);
      const double* row = probe.w.data() + static_cast<std::size_t>(c) * d;
      std::sort(order.begin(), order.end(), [&](int i, int j) {
        const double ai = std::fabs(row[i]), aj = std::fabs(row[j]);
        if (ai != aj) return ai > aj;
        return i < j;
      });
      auto mask = art.masks.data() +
                  (static_cast<std::size_t>(c) * n_layers + (layer - 1)) * d;
      for (int i = 0; i < ones; ++i) mask[order[i]] = 1;
    }
  }

  // contrastive reps: r = (1/K) sum_k (M (.) h_with - M (.) h_without) at the
  // final prompt position
  art.reps.assign(static_cast<std::size_t>(classes) * n_layers * d, 0.0f);
  for (int c = 0; c < classes; ++c) {
    const auto& pairs = contrast.at(art.codes[c]);
    std::vector<double> acc(static_cast<std::size_t>(n_layers) * d, 0.0);
    for (const auto& pair : pairs) {
      if (pair.with_example.empty() || pair.instruction_only.empty())
        raise(Errc::empty_input, "empty contrast prompt");
      const auto with = model.forward_collect(pair.with_example, nullptr);
      const auto without = model.forward_collect(pair.instruction_only, nullptr);
      for (int layer = 1; layer <= n_layers; ++layer) {
        const auto mask = art.mask_of(c, layer);
        const auto hw = with.states.at(layer, static_cast<int>(pair.with_example.size()) - 1);
        const auto ho =
            without.states.at(layer, static_cast<int>(pair.instruction_only.size()) - 1);
        double* a = acc.data() + static_cast<std::size_t>(layer - 1) * d;
        for (int i = 0; i < d; ++i)
          if (mask[i]) a[i] += static_cast<double>(hw[i]) - ho[i];
      }
    }
    const double inv = 1.0 / static_cast<double>(pairs.size());
    float* r = art.reps.data() + static_cast<std::size_t>(c) * n_layers * d;
    for (std::size_t i = 0; i < acc.size(); ++i) r[i] = static_cast<float>(acc[i] * inv);
  }
  return art;
}

void lsi_steer(std::span<float> h, std::span<const float> r, float gamma) {
  if (h.size() != r.size()) raise(Errc::shape_mismatch, "h and r dimensions differ");
  for (std::size_t i = 0; i < h.size(); ++i) h[i] += gamma * r[i];
}

LayerHook make_hook(const LsiArtifacts& artifacts, const SteeringConfig& config,
                    std::string_view target, std::optional<float> gamma_override) {
  config.validate(artifacts.n_layers);
  const std::size_t li = artifacts.language_index(target);
  struct LsiHookState {
    float gamma;
    std::vector<std::vector<float>> r;  // per layer
  };
  auto st = std::make_shared<LsiHookState>();
  st->gamma = gamma_override.value_or(artifacts.gamma);
  st->r.resize(artifacts.n_layers + 1);
  for (int layer = 1; layer <= artifacts.n_layers; ++layer) {
    const auto r = artifacts.rep_of(li, layer);
    st->r[layer].assign(r.begin(), r.end());
  }

  LayerHook hook;
  hook.active.assign(artifacts.n_layers + 1, 0);
  for (int l : config.layers_or_all(artifacts.n_layers)) hook.active[l] = 1;
  hook.exclude_first = config.exclude_first_token;
  hook.fn = [st](int layer, int, std::span<float> state) {
    lsi_steer(state, st->r[layer], st->gamma);
  };
  return hook;
}

// STVI file: masks and reps with tau/gamma/K, CRC32-terminated.
namespace {
constexpr std::uint32_t kLsiVersion = 1;
}

void save_lsi(const LsiArtifacts& artifacts, const std::filesystem::path& path) {
  BinaryWriter out;
  out.bytes("STVI", 4);
  out.u32(kLsiVersion);
  out.f32(artifacts.tau);
  out.f32(artifacts.gamma);
  out.u32(artifacts.k_prompts);
  out.u32(artifacts.n_layers);
  out.u32(artifacts.d_model);
  out.u32(static_cast<std::uint32_t>(artifacts.codes.size()));
  for (const auto& code : artifacts.codes) out.str(code);
  out.bytes(artifacts.masks.data(), artifacts.masks.size());
  out.f32s(artifacts.reps);
  for (double a : artifacts.probe_holdout_acc) out.f32(static_cast<float>(a));
  out.finish_crc32();
  atomic_write_file(path, out.data());
}

LsiArtifacts load_lsi(const std::filesystem::path& path) {
  const std::string data = read_file(path);
  BinaryReader in(data);
  in.check_crc32();
  in.strip_crc32();
  char magic[4];
  in.bytes(magic, 4);
  if (std::memcmp(magic, "STVI", 4) != 0) raise(Errc::corrupt_file, "bad magic in " + path.string());
  if (in.u32() != kLsiVersion) raise(Errc::version_mismatch, "lsi file version");
  LsiArtifacts art;
  art.tau = in.f32();
  art.gamma = in.f32();
  art.k_prompts = static_cast<int>(in.u32());
  art.n_layers = static_cast<int>(in.u32());
  art.d_model = static_cast<int>(in.u32());
  const auto n = in.u32();
  for (std::uint32_t i = 0; i < n; ++i) art.codes.push_back(in.str());
  art.masks.resize(static_cast<std::size_t>(n) * art.n_layers * art.d_model);
  in.bytes(art.masks.data(), art.masks.size());
  art.reps.resize(art.masks.size());
  in.f32s(art.reps);
  art.probe_holdout_acc.resize(art.n_layers);
  for (auto& a : art.probe_holdout_acc) a = in.f32();
  if (in.remaining() != 0) raise(Errc::corrupt_file, "trailing bytes in " + path.string());
  return art;
}

}  // namespace steervec
