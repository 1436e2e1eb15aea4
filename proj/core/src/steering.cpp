#include "steervec/steering.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <memory>

#include "json.hpp"

namespace steervec {

using nlohmann::json;

std::string_view steer_mode_name(SteerMode m) {
  switch (m) {
    case SteerMode::mono: return "mono";
    case SteerMode::cross: return "cross";
    case SteerMode::steer_only: return "steer_only";
  }
  return "mono";
}

std::optional<SteerMode> steer_mode_from_name(std::string_view name) {
  if (name == "mono") return SteerMode::mono;
  if (name == "cross") return SteerMode::cross;
  if (name == "steer_only" || name == "steer-only") return SteerMode::steer_only;
  return std::nullopt;
}

void SteeringConfig::validate(int n_layers) const {
  if (!std::isfinite(alpha) || alpha < 0.0f) raise(Errc::invalid_argument, "alpha must be finite and >= 0");
  if (beta < 0.0f || beta > 1.0f) raise(Errc::invalid_argument, "beta in [0,1]");
  if (epsilon <= 0.0f) raise(Errc::invalid_argument, "epsilon > 0");
  if (active_layers) {
    for (int l : *active_layers)
      if (l < 1 || l > n_layers)
        raise(Errc::invalid_argument, "active layer " + std::to_string(l) + " outside 1.." +
                                          std::to_string(n_layers));
  }
}

std::vector<int> SteeringConfig::layers_or_all(int n_layers) const {
  if (active_layers) return *active_layers;
  std::vector<int> all(n_layers);
  for (int i = 0; i < n_layers; ++i) all[i] = i + 1;
  return all;
}

std::string SteeringConfig::to_json_string() const {
  json j;
  j["mode"] = std::string(steer_mode_name(mode));
  j["alpha"] = alpha;
  j["beta"] = beta;
  j["norm_restore"] = norm_restore;
  j["active_layers"] = active_layers ? json(*active_layers) : json(nullptr);
  j["exclude_first_token"] = exclude_first_token;
  j["epsilon"] = epsilon;
  return j.dump();
}

SteeringConfig SteeringConfig::from_json_string(std::string_view s) {
  json j = json::parse(s, nullptr, false);
  if (j.is_discarded()) raise(Errc::parse_error, "invalid steering config JSON");
  SteeringConfig c;
  if (j.contains("mode")) {
    const auto m = steer_mode_from_name(j["mode"].get<std::string>());
    if (!m) raise(Errc::parse_error, "unknown steering mode");
    c.mode = *m;
  }
  if (j.contains("alpha")) c.alpha = j["alpha"].get<float>();
  if (j.contains("beta")) c.beta = j["beta"].get<float>();
  if (j.contains("norm_restore")) c.norm_restore = j["norm_restore"].get<bool>();
  if (j.contains("active_layers") && !j["active_layers"].is_null())
    c.active_layers = j["active_layers"].get<std::vector<int>>();
  if (j.contains("exclude_first_token")) c.exclude_first_token = j["exclude_first_token"].get<bool>();
  if (j.contains("epsilon")) c.epsilon = j["epsilon"].get<float>();
  return c;
}

// ---------------------------------------------------------------------------
// Kernels

namespace detail {

double direction(std::span<const float> r_t, std::span<const float> r_s, float beta,
                 std::span<float> out) {
  double acc = 0.0;
  for (std::size_t i = 0; i < out.size(); ++i) {
    const float scaled = beta * r_s[i];
    out[i] = r_t[i] - scaled;
    acc += static_cast<double>(out[i]) * out[i];
  }
  return std::sqrt(acc);
}

void unit_in_place(std::span<float> v, double norm) {
  for (float& x : v) x = static_cast<float>(x / norm);
}

void add_scaled_restore(std::span<float> h, std::span<const float> u, float alpha,
                        bool norm_restore) {
  double nh2 = 0.0;
  for (float x : h) nh2 += static_cast<double>(x) * x;
  for (std::size_t i = 0; i < h.size(); ++i) h[i] += alpha * u[i];
  if (!norm_restore) return;
  if (nh2 == 0.0) {
    std::fill(h.begin(), h.end(), 0.0f);
    return;
  }
  double ns2 = 0.0;
  for (float x : h) ns2 += static_cast<double>(x) * x;
  if (ns2 == 0.0) return;  // nothing to rescale toward the old norm
  const float scale = static_cast<float>(std::sqrt(nh2 / ns2));
  for (float& x : h) x *= scale;
}

void low_rank_apply(std::span<const float> h_pre, std::span<const float> r_t,
                    std::span<const float> r_s, const LearnedSteering& params, int layer,
                    std::span<float> out) {
  const int d = params.d_model;
  const int rank = params.rank;
  const float* A = params.a[layer - 1].data();
  const float* B = params.b[layer - 1].data();
  thread_local std::vector<double> z;
  z.resize(rank);
  for (int k = 0; k < rank; ++k) {
    double acc = 0.0;
    for (int i = 0; i < d; ++i) acc += static_cast<double>(h_pre[i]) * A[static_cast<std::size_t>(i) * rank + k];
    for (int i = 0; i < d; ++i) acc += static_cast<double>(r_t[i]) * A[static_cast<std::size_t>(d + i) * rank + k];
    for (int i = 0; i < d; ++i) acc += static_cast<double>(r_s[i]) * A[static_cast<std::size_t>(2 * d + i) * rank + k];
    z[k] = static_cast<double>(static_cast<float>(acc));
  }
  for (int j = 0; j < d; ++j) {
    double acc = 0.0;
    for (int k = 0; k < rank; ++k) acc += z[k] * B[static_cast<std::size_t>(k) * d + j];
    out[j] += static_cast<float>(acc);
  }
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Pure steering functions

void steer_mono(std::span<float> h, std::span<const float> r_l, float alpha, bool norm_restore,
                float epsilon) {
  if (h.size() != r_l.size()) raise(Errc::shape_mismatch, "h and r dimensions differ");
  thread_local std::vector<float> u;
  u.assign(r_l.begin(), r_l.end());
  double acc = 0.0;
  for (float x : u) acc += static_cast<double>(x) * x;
  const double norm = std::sqrt(acc);
  if (norm < static_cast<double>(epsilon))
    raise(Errc::no_language_signal, "||r|| below epsilon");
  detail::unit_in_place(u, norm);
  detail::add_scaled_restore(h, u, alpha, norm_restore);
}

void steer_cross(std::span<float> h, std::span<const float> r_target,
                 std::span<const float> r_source, float alpha, bool norm_restore, float epsilon) {
  if (h.size() != r_target.size() || h.size() != r_source.size())
    raise(Errc::shape_mismatch, "h and r dimensions differ");
  thread_local std::vector<float> u;
  u.resize(h.size());
  const double norm = detail::direction(r_target, r_source, 1.0f, u);
  if (norm < static_cast<double>(epsilon))
    raise(Errc::degenerate_direction, "target and source representations coincide");
  detail::unit_in_place(u, norm);
  detail::add_scaled_restore(h, u, alpha, norm_restore);
}

// ---------------------------------------------------------------------------
// Learned steering

LearnedSteering LearnedSteering::init(int d_model, int n_layers, int rank, float alpha, float beta,
                                      std::uint64_t seed) {
  if (d_model < 1 || n_layers < 1 || rank < 1) raise(Errc::invalid_argument, "bad steering shape");
  LearnedSteering s;
  s.d_model = d_model;
  s.n_layers = n_layers;
  s.rank = rank;
  s.alpha = alpha;
  s.beta = beta;
  Rng rng(seed ^ 0x4c565453ull);  // "STVL"
  const double std_a = 1.0 / std::sqrt(static_cast<double>(3 * d_model));
  s.a.resize(n_layers);
  s.b.resize(n_layers);
  for (int li = 0; li < n_layers; ++li) {
    s.a[li].resize(static_cast<std::size_t>(3 * d_model) * rank);
    for (auto& x : s.a[li]) x = static_cast<float>(rng.normal(0.0, std_a));
    // zero-initialized up-projection: an untrained intervention is exactly
    // the unsupervised formula
    s.b[li].assign(static_cast<std::size_t>(rank) * d_model, 0.0f);
  }
  return s;
}

void LearnedSteering::validate() const {
  if (d_model < 1 || n_layers < 1 || rank < 1) raise(Errc::invalid_argument, "bad steering shape");
  if (static_cast<int>(a.size()) != n_layers || static_cast<int>(b.size()) != n_layers)
    raise(Errc::shape_mismatch, "per-layer matrix count");
  for (int li = 0; li < n_layers; ++li) {
    if (a[li].size() != static_cast<std::size_t>(3 * d_model) * rank ||
        b[li].size() != static_cast<std::size_t>(rank) * d_model)
      raise(Errc::shape_mismatch, "A/B dimensions at layer " + std::to_string(li + 1));
  }
  if (beta < 0.0f || beta > 1.0f) raise(Errc::invalid_argument, "beta in [0,1]");
}

void steer_learned(std::span<float> h, std::span<const float> r_target,
                   std::span<const float> r_source, const LearnedSteering& params, int layer,
                   bool norm_restore, float epsilon) {
  params.validate();
  if (layer < 1 || layer > params.n_layers) raise(Errc::invalid_argument, "layer out of range");
  const std::size_t d = static_cast<std::size_t>(params.d_model);
  if (h.size() != d || r_target.size() != d || r_source.size() != d)
    raise(Errc::shape_mismatch, "h/r dimensions differ from params.d_model");

  // materialize beta * r_s, then run the exact cross-steering sequence
  thread_local std::vector<float> scaled, u, h_pre;
  scaled.resize(d);
  for (std::size_t i = 0; i < d; ++i) scaled[i] = params.beta * r_source[i];
  u.resize(d);
  const double norm = detail::direction(r_target, scaled, 1.0f, u);
  if (norm < static_cast<double>(epsilon))
    raise(Errc::no_language_signal, "||r_t - beta*r_s|| below epsilon");
  detail::unit_in_place(u, norm);
  h_pre.assign(h.begin(), h.end());
  detail::add_scaled_restore(h, u, params.alpha, norm_restore);
  detail::low_rank_apply(h_pre, r_target, r_source, params, layer, h);
}

// Checkpoint format (STVL), little-endian:
//   magic "STVL" | version u32 | d u32 | n_layers u32 | rank u32
//   | alpha f32 | beta f32 | per layer: A f32[3d*rank] then B f32[rank*d]
//   | crc32 u32
namespace {
constexpr std::uint32_t kSteerVersion = 1;
}

void save_learned_steering(const LearnedSteering& s, const std::filesystem::path& path) {
  s.validate();
  BinaryWriter out;
  out.bytes("STVL", 4);
  out.u32(kSteerVersion);
  out.u32(s.d_model);
  out.u32(s.n_layers);
  out.u32(s.rank);
  out.f32(s.alpha);
  out.f32(s.beta);
  for (int li = 0; li < s.n_layers; ++li) {
    out.f32s(s.a[li]);
    out.f32s(s.b[li]);
  }
  out.finish_crc32();
  atomic_write_file(path, out.data());
}

LearnedSteering load_learned_steering(const std::filesystem::path& path) {
  const std::string data = read_file(path);
  BinaryReader in(data);
  in.check_crc32();
  in.strip_crc32();
  char magic[4];
  in.bytes(magic, 4);
  if (std::memcmp(magic, "STVL", 4) != 0) raise(Errc::corrupt_file, "bad magic in " + path.string());
  const auto version = in.u32();
  if (version != kSteerVersion) raise(Errc::version_mismatch, "steering file version");
  LearnedSteering s;
  s.d_model = static_cast<int>(in.u32());
  s.n_layers = static_cast<int>(in.u32());
  s.rank = static_cast<int>(in.u32());
  s.alpha = in.f32();
  s.beta = in.f32();
  s.a.resize(s.n_layers);
  s.b.resize(s.n_layers);
  for (int li = 0; li < s.n_layers; ++li) {
    s.a[li].resize(static_cast<std::size_t>(3 * s.d_model) * s.rank);
    s.b[li].resize(static_cast<std::size_t>(s.rank) * s.d_model);
    in.f32s(s.a[li]);
    in.f32s(s.b[li]);
  }
  s.validate();
  return s;
}

// ---------------------------------------------------------------------------
// Hooks

namespace {

std::vector<std::uint8_t> active_mask(const SteeringConfig& config, int n_layers) {
  std::vector<std::uint8_t> mask(n_layers + 1, 0);
  for (int l : config.layers_or_all(n_layers)) mask[l] = 1;
  return mask;
}

// representations materialized per layer at hook construction
struct HookVectors {
  int d = 0;
  std::vector<std::vector<float>> unit;  // per layer, unit steering direction
  float alpha = 0.0f;
  bool norm_restore = true;
};

void resolve_pair(const LanguageVectorBank& bank, const SteeringConfig& config,
                  std::string_view target, std::string_view source, bool* want_source) {
  if (!bank.has_language(target)) raise(Errc::unknown_language, std::string(target));
  switch (config.mode) {
    case SteerMode::mono:
      if (!source.empty() && source != target)
        raise(Errc::mode_mismatch, "mono mode with a distinct source language");
      *want_source = false;
      break;
    case SteerMode::cross:
    case SteerMode::steer_only:
      if (source.empty())
        raise(Errc::mode_mismatch,
              std::string(steer_mode_name(config.mode)) + " mode requires a source language");
      if (!bank.has_language(source)) raise(Errc::unknown_language, std::string(source));
      *want_source = true;
      break;
  }
}

}  // namespace

LayerHook make_hook(const LanguageVectorBank& bank, const SteeringConfig& config,
                    std::string_view target, std::string_view source) {
  config.validate(bank.n_layers);
  bool want_source = false;
  resolve_pair(bank, config, target, source, &want_source);

  auto vecs = std::make_shared<HookVectors>();
  vecs->d = bank.d_model;
  vecs->alpha = config.alpha;
  vecs->norm_restore = config.norm_restore;
  vecs->unit.resize(bank.n_layers + 1);
  for (int layer = 1; layer <= bank.n_layers; ++layer) {
    std::vector<float> u = language_representation(bank, target, layer);
    if (want_source) {
      const std::vector<float> rs = language_representation(bank, source, layer);
      std::vector<float> diff(u.size());
      const double norm = detail::direction(u, rs, 1.0f, diff);
      if (norm < static_cast<double>(config.epsilon))
        raise(Errc::degenerate_direction,
              "target and source coincide at layer " + std::to_string(layer));
      detail::unit_in_place(diff, norm);
      vecs->unit[layer] = std::move(diff);
    } else {
      double acc = 0.0;
      for (float x : u) acc += static_cast<double>(x) * x;
      const double norm = std::sqrt(acc);
      if (norm < static_cast<double>(config.epsilon))
        raise(Errc::no_language_signal, "||r|| below epsilon at layer " + std::to_string(layer));
      detail::unit_in_place(u, norm);
      vecs->unit[layer] = std::move(u);
    }
  }

  LayerHook hook;
  hook.active = active_mask(config, bank.n_layers);
  hook.exclude_first = config.exclude_first_token;
  hook.fn = [vecs](int layer, int, std::span<float> state) {
    detail::add_scaled_restore(state, vecs->unit[layer], vecs->alpha, vecs->norm_restore);
  };
  return hook;
}

LayerHook make_hook(const LanguageVectorBank& bank, const LearnedSteering& params,
                    const SteeringConfig& config, std::string_view target,
                    std::string_view source) {
  params.validate();
  config.validate(bank.n_layers);
  if (params.d_model != bank.d_model || params.n_layers != bank.n_layers)
    raise(Errc::shape_mismatch, "learned steering shapes do not match the bank");
  if (!bank.has_language(target)) raise(Errc::unknown_language, std::string(target));
  // mono = (source == target): a single code path covers both settings
  std::string src(source);
  if (config.mode == SteerMode::mono || src.empty()) src = std::string(target);
  if (!bank.has_language(src)) raise(Errc::unknown_language, src);

  struct LearnedHookState {
    LearnedSteering params;
    std::vector<std::vector<float>> r_t, r_s;  // per layer
    bool norm_restore;
    float epsilon;
  };
  auto st = std::make_shared<LearnedHookState>();
  st->params = params;
  st->norm_restore = config.norm_restore;
  st->epsilon = config.epsilon;
  st->r_t.resize(bank.n_layers + 1);
  st->r_s.resize(bank.n_layers + 1);
  for (int layer = 1; layer <= bank.n_layers; ++layer) {
    st->r_t[layer] = language_representation(bank, target, layer);
    st->r_s[layer] = language_representation(bank, src, layer);
  }

  LayerHook hook;
  hook.active = active_mask(config, bank.n_layers);
  hook.exclude_first = config.exclude_first_token;
  hook.fn = [st](int layer, int, std::span<float> state) {
    steer_learned(state, st->r_t[layer], st->r_s[layer], st->params, layer, st->norm_restore,
                  st->epsilon);
  };
  return hook;
}

LayerHook make_hook(const PositionalBank& bank, const SteeringConfig& config,
                    std::string_view target, std::string_view source) {
  config.validate(bank.n_layers);
  const bool want_source =
      config.mode == SteerMode::cross || config.mode == SteerMode::steer_only;
  if (config.mode == SteerMode::mono && !source.empty() && source != target)
    raise(Errc::mode_mismatch, "mono mode with a distinct source language");
  if (want_source && source.empty())
    raise(Errc::mode_mismatch, "cross steering requires a source language");
  const std::size_t ti = bank.language_index(target);
  const std::size_t si = want_source ? bank.language_index(source) : ti;

  struct PositionalHookState {
    int k = 0;
    float alpha = 0.0f;
    bool norm_restore = true;
    // unit[layer][bucket] : d floats
    std::vector<std::vector<std::vector<float>>> unit;
  };
  auto st = std::make_shared<PositionalHookState>();
  st->k = bank.max_positions;
  st->alpha = config.alpha;
  st->norm_restore = config.norm_restore;
  st->unit.resize(bank.n_layers + 1);
  for (int layer = 1; layer <= bank.n_layers; ++layer) {
    st->unit[layer].resize(bank.max_positions);
    for (int bucket = 0; bucket < bank.max_positions; ++bucket) {
      std::vector<float> rt = bank.representation(ti, layer, bucket);
      std::vector<float> u(rt.size());
      double norm;
      if (want_source) {
        const std::vector<float> rs = bank.representation(si, layer, bucket);
        norm = detail::direction(rt, rs, 1.0f, u);
        if (norm < static_cast<double>(config.epsilon))
          raise(Errc::degenerate_direction, "positional direction degenerate");
      } else {
        u = rt;
        double acc = 0.0;
        for (float x : u) acc += static_cast<double>(x) * x;
        norm = std::sqrt(acc);
        if (norm < static_cast<double>(config.epsilon))
          raise(Errc::no_language_signal, "positional ||r|| below epsilon");
      }
      detail::unit_in_place(u, norm);
      st->unit[layer][bucket] = std::move(u);
    }
  }

  LayerHook hook;
  hook.active = active_mask(config, bank.n_layers);
  hook.exclude_first = config.exclude_first_token;
  hook.fn = [st](int layer, int pos, std::span<float> state) {
    // global position pos+1; buckets cover 2..k+1, deeper positions reuse
    // the deepest bucket
    int bucket = pos + 1 - 2;
    bucket = std::clamp(bucket, 0, st->k - 1);
    detail::add_scaled_restore(state, st->unit[layer][bucket], st->alpha, st->norm_restore);
  };
  return hook;
}

}  // namespace steervec
