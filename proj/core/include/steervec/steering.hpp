#pragma once

#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "steervec/common.hpp"
#include "steervec/model.hpp"
#include "steervec/vectors.hpp"

namespace steervec {

enum class SteerMode { mono, cross, steer_only };

std::string_view steer_mode_name(SteerMode m);
std::optional<SteerMode> steer_mode_from_name(std::string_view name);

struct SteeringConfig {
  SteerMode mode = SteerMode::mono;
  float alpha = 1.0f;
  float beta = 0.9f;           // learned mode: source scale
  bool norm_restore = true;
  // nullopt = all layers; an explicit empty set means no steering
  std::optional<std::vector<int>> active_layers;
  bool exclude_first_token = true;
  float epsilon = 1e-8f;

  void validate(int n_layers) const;
  std::vector<int> layers_or_all(int n_layers) const;
  std::string to_json_string() const;
  static SteeringConfig from_json_string(std::string_view s);
};

// ---------------------------------------------------------------------------
// Pure steering functions. All operate in place on h and are stateless.

// h := h + alpha * r / ||r||, then optional norm restore (||h|| = 0 restores
// to the zero vector).
void steer_mono(std::span<float> h, std::span<const float> r_l, float alpha,
                bool norm_restore, float epsilon = 1e-8f);

// h := h + alpha * (r_t - r_s) / ||r_t - r_s||; errors with
// DegenerateDirection when target and source coincide within epsilon.
void steer_cross(std::span<float> h, std::span<const float> r_target,
                 std::span<const float> r_source, float alpha, bool norm_restore,
                 float epsilon = 1e-8f);

// Low-rank learned steering: per-layer A (3d x rank) and B (rank x d),
// applied as h+ = hhat + x A B with x = [h; r_target; r_source] read as a row
// vector (the column form is B^T A^T x). B starts all-zero, so an untrained
// intervention equals the unsupervised formula.
struct LearnedSteering {
  int d_model = 0;
  int n_layers = 0;
  int rank = 0;
  float alpha = 0.1f;
  float beta = 0.9f;
  std::vector<std::vector<float>> a;  // per layer [3d * rank], row-major (3d, rank)
  std::vector<std::vector<float>> b;  // per layer [rank * d], row-major (rank, d)

  static LearnedSteering init(int d_model, int n_layers, int rank, float alpha, float beta,
                              std::uint64_t seed);  // A random, B zero
  void validate() const;
};

// hhat = h + alpha*(r_t - beta*r_s)/||r_t - beta*r_s||, optional norm
// restore, then h += x A B for layer's (A, B). The source is scaled by beta
// first, so with B = 0 the result is bitwise steer_cross(h, r_t, beta*r_s).
void steer_learned(std::span<float> h, std::span<const float> r_target,
                   std::span<const float> r_source, const LearnedSteering& params, int layer,
                   bool norm_restore, float epsilon = 1e-8f);

void save_learned_steering(const LearnedSteering& s, const std::filesystem::path& path);
LearnedSteering load_learned_steering(const std::filesystem::path& path);

// ---------------------------------------------------------------------------
// Hook construction. Hooks bind the per-language representations once so the
// per-position callback stays allocation-free and pure.

LayerHook make_hook(const LanguageVectorBank& bank, const SteeringConfig& config,
                    std::string_view target, std::string_view source = {});

LayerHook make_hook(const LanguageVectorBank& bank, const LearnedSteering& params,
                    const SteeringConfig& config, std::string_view target,
                    std::string_view source = {});

// Position-specific variant; buckets past max_positions reuse the deepest
// bucket.
LayerHook make_hook(const PositionalBank& bank, const SteeringConfig& config,
                    std::string_view target, std::string_view source = {});

// ---------------------------------------------------------------------------
// Shared low-level kernels (also used by the training path)

namespace detail {

// out = r_t - beta * r_s; returns its L2 norm (double accumulated)
double direction(std::span<const float> r_t, std::span<const float> r_s, float beta,
                 std::span<float> out);
// normalizes in place by `norm`
void unit_in_place(std::span<float> v, double norm);
// h := h + alpha * u, then optional norm restore to the pre-add L2 norm of h
void add_scaled_restore(std::span<float> h, std::span<const float> u, float alpha,
                        bool norm_restore);
// z = x^T A (rank entries), out += z B; x = [h_pre; r_t; r_s]
void low_rank_apply(std::span<const float> h_pre, std::span<const float> r_t,
                    std::span<const float> r_s, const LearnedSteering& params, int layer,
                    std::span<float> out);

}  // namespace detail

}  // namespace steervec
