#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <memory>
#include <span>
#include <vector>

#include "steervec/common.hpp"
#include "steervec/corpus.hpp"

namespace steervec {

struct LearnedSteering;  // steering.hpp

struct ModelConfig {
  int d_model = 64;
  int n_layers = 4;
  int n_heads = 4;
  int vocab_size = 256;
  int max_seq_len = 64;
  std::uint64_t seed = 0;

  void validate() const;
  int head_dim() const { return d_model / n_heads; }
};

// Per-layer, per-position activations recorded by a forward pass. Layer 1 is
// the output of the first transformer block; embeddings are layer 0 and are
// neither recorded nor steered. Positions are 0-based internally.
struct HiddenStates {
  int n_layers = 0;
  int seq_len = 0;
  int d = 0;
  std::vector<float> data;  // [(layer-1) * seq_len + pos] * d

  std::span<const float> at(int layer, int pos) const {
    return {data.data() + (static_cast<std::size_t>(layer - 1) * seq_len + pos) * d,
            static_cast<std::size_t>(d)};
  }
  std::span<float> at(int layer, int pos) {
    return {data.data() + (static_cast<std::size_t>(layer - 1) * seq_len + pos) * d,
            static_cast<std::size_t>(d)};
  }
  bool all_finite() const;
};

// Rewrites block outputs before they feed the next layer. The callback must
// be a pure function of (layer, position, state); layer is 1-based.
struct LayerHook {
  std::function<void(int layer, int pos, std::span<float> state)> fn;
  std::vector<std::uint8_t> active;  // size n_layers+1, index 0 unused
  bool exclude_first = true;

  bool layer_active(int layer) const {
    return fn && layer < static_cast<int>(active.size()) && active[layer] != 0;
  }
  bool applies(int layer, int pos) const {
    return layer_active(layer) && !(exclude_first && pos == 0);
  }
};

struct ForwardOutput {
  HiddenStates states;
  std::vector<float> logits;  // final position only
};

struct BlockWeights {
  std::vector<float> ln1_g, ln1_b;
  std::vector<float> wq, wk, wv, wo;  // [d][d] row-major (out, in)
  std::vector<float> bq, bk, bv, bo;
  std::vector<float> ln2_g, ln2_b;
  std::vector<float> w1, b1;  // [4d][d], [4d]
  std::vector<float> w2, b2;  // [d][4d], [d]
};

struct Weights {
  std::vector<float> tok_emb;  // [vocab][d]
  std::vector<float> pos_emb;  // [max_seq][d]
  std::vector<BlockWeights> blocks;
  std::vector<float> lnf_g, lnf_b;
  std::vector<float> lm_w;  // [vocab][d]
  std::vector<float> lm_b;  // [vocab]
};

// Pre-norm decoder-only transformer: learned positional embeddings, GELU MLP,
// untied LM head. "Layer output" = block output after the second residual
// add, which is where hooks rewrite.
struct ToyTransformer {
  ModelConfig cfg;
  Weights w;
  bool frozen = false;

  explicit ToyTransformer(const ModelConfig& config);

  ForwardOutput forward_collect(std::span<const int> tokens,
                                const LayerHook* hook = nullptr) const;
  // greedy decoding; the hook applies at every step to all positions except
  // global position 1. Returns prompt + generated tokens.
  std::vector<int> generate(std::span<const int> prompt, const LayerHook* hook,
                            int max_new) const;
  // recomputes block `layer` (1-based) over explicit input states
  // [seq_len * d], without hooks; instrumentation for layer-wise analysis
  std::vector<float> apply_block(int layer, std::span<const float> states,
                                 int seq_len) const;

  Digest256 weight_hash() const;
  void save(const std::filesystem::path& path) const;
  static ToyTransformer load(const std::filesystem::path& path);
};

// Incremental greedy decoding state (per-layer KV cache). forward_collect and
// generate are both built on this, so cached and re-forwarded paths follow
// the identical per-position computation.
class Decoder {
 public:
  Decoder(const ToyTransformer& model, const LayerHook* hook);
  ~Decoder();
  Decoder(Decoder&&) noexcept;
  Decoder& operator=(Decoder&&) noexcept;

  void push(int token);
  int pos() const;  // tokens pushed so far
  const std::vector<float>& last_logits() const;
  std::span<const float> last_layer_out(int layer) const;  // post-hook
  int argmax_last() const;

 private:
  struct Impl;
  std::unique_ptr<Impl> impl_;
};

// ---------------------------------------------------------------------------
// Training entry points (model_train.cpp)

struct PretrainOptions {
  int epochs = 1;
  float lr = 1e-3f;
  int batch = 16;
  std::uint64_t shuffle_seed = 0;
};

struct PretrainResult {
  ToyTransformer model;
  double initial_loss = 0.0;  // mean next-token CE on a fixed probe subset
  double final_loss = 0.0;
  std::vector<double> epoch_loss;  // running mean per epoch
};

// Trains a fresh model (Adam) on every (sample, language) cell of a token
// corpus; the returned model is frozen.
PretrainResult pretrain_toy(const ModelConfig& config, const ParallelCorpus& corpus,
                            const PretrainOptions& opts);

// One training sequence for the steering function: tokens with a loss mask
// (predictions of tokens[p], p >= loss_start, are counted) and the per-layer
// language representations the steering hook uses. r_* are layer-major
// [n_layers * d].
struct SteeredSequence {
  std::vector<int> tokens;
  int loss_start = 1;
  std::vector<float> r_target;
  std::vector<float> r_source;
};

struct SteeringGrads {
  std::vector<std::vector<float>> a;  // per layer [3d * rank]
  std::vector<std::vector<float>> b;  // per layer [rank * d]
  double loss = 0.0;
  long counted_tokens = 0;
};

// Reverse-mode gradients restricted to the steering parameters: the loss path
// runs logits -> hooked layers -> (A, B); base weights are constants and
// receive no gradient. dropout_rate > 0 applies inverted dropout on the
// rank-r bottleneck activations (training only; pass 0 to evaluate).
SteeringGrads grad_steering_params(const ToyTransformer& model,
                                   std::span<const SteeredSequence> batch,
                                   const LearnedSteering& steering, bool norm_restore,
                                   float dropout_rate = 0.0f, Rng* dropout_rng = nullptr);

// Loss-only evaluation of the same path (dropout disabled).
double steering_loss(const ToyTransformer& model, std::span<const SteeredSequence> batch,
                     const LearnedSteering& steering, bool norm_restore);

}  // namespace steervec
