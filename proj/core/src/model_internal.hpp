#pragma once

// Positionwise block computation shared by the inference decoder and the
// training paths. Reductions accumulate in double; stored state is f32.

#include <cmath>
#include <vector>

#include "steervec/model.hpp"

namespace steervec::detail {

inline constexpr float kLnEps = 1e-5f;

inline void layer_norm(const float* x, const float* g, const float* b, int d, float* out,
                       float* mean_out = nullptr, float* rstd_out = nullptr) {
  double sum = 0.0;
  for (int i = 0; i < d; ++i) sum += x[i];
  const double mean = sum / d;
  double var = 0.0;
  for (int i = 0; i < d; ++i) {
    const double c = x[i] - mean;
    var += c * c;
  }
  var /= d;
  const double rstd = 1.0 / std::sqrt(var + static_cast<double>(kLnEps));
  for (int i = 0; i < d; ++i) {
    out[i] = static_cast<float>((x[i] - mean) * rstd) * g[i] + b[i];
  }
  if (mean_out) *mean_out = static_cast<float>(mean);
  if (rstd_out) *rstd_out = static_cast<float>(rstd);
}

inline void linear(const float* w, const float* b, int n_out, int n_in, const float* x,
                   float* out) {
  for (int o = 0; o < n_out; ++o) {
    const float* row = w + static_cast<std::size_t>(o) * n_in;
    double acc = b ? b[o] : 0.0;
    for (int i = 0; i < n_in; ++i) acc += static_cast<double>(row[i]) * x[i];
    out[o] = static_cast<float>(acc);
  }
}

inline float gelu(float x) {
  const double k = 0.7978845608028654;  // sqrt(2/pi)
  const double x3 = static_cast<double>(x) * x * x;
  return static_cast<float>(0.5 * x * (1.0 + std::tanh(k * (x + 0.044715 * x3))));
}

inline float gelu_grad(float x) {
  const double k = 0.7978845608028654;
  const double x2 = static_cast<double>(x) * x;
  const double inner = k * (x + 0.044715 * x2 * x);
  const double t = std::tanh(inner);
  const double dinner = k * (1.0 + 3.0 * 0.044715 * x2);
  return static_cast<float>(0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * dinner);
}

// triangular offset of attention-prob row `pos` within one head's storage
inline std::size_t tri(int pos) {
  return static_cast<std::size_t>(pos) * (pos + 1) / 2;
}

// Optional capture of one position's intermediates (pointers into a
// per-sample trace; any may be null except when `probs` is set).
struct BlockPosTrace {
  float* ln1_out = nullptr;   // d
  float* q = nullptr;         // d
  float* ctx = nullptr;       // d
  float* res1 = nullptr;      // d
  float* ln2_out = nullptr;   // d
  float* mlp_pre = nullptr;   // 4d
  float* mlp_act = nullptr;   // 4d
  float* ln1_mean = nullptr;  // scalars
  float* ln1_rstd = nullptr;
  float* ln2_mean = nullptr;
  float* ln2_rstd = nullptr;
  float* probs = nullptr;  // per-head rows: probs[h * head_stride + tri(pos) + j]
  std::size_t probs_head_stride = 0;
};

struct BlockScratch {
  std::vector<float> a, q, ctx, att, m, u, f, probs;
  std::vector<double> scores;

  void resize(const ModelConfig& cfg) {
    a.resize(cfg.d_model);
    q.resize(cfg.d_model);
    ctx.resize(cfg.d_model);
    att.resize(cfg.d_model);
    m.resize(cfg.d_model);
    u.resize(4 * cfg.d_model);
    f.resize(4 * cfg.d_model);
    probs.resize(cfg.max_seq_len);
    scores.resize(cfg.max_seq_len);
  }
};

// One block, one position. Reads k/v cache rows [0, pos), writes row `pos`,
// writes the block output (post second residual, pre hook) into y. y may
// alias x.
inline void block_position(const ModelConfig& cfg, const BlockWeights& bw, int pos,
                           const float* x, float* k_cache, float* v_cache, float* y,
                           BlockScratch& s, const BlockPosTrace* tr = nullptr) {
  const int d = cfg.d_model;
  const int hs = cfg.head_dim();

  layer_norm(x, bw.ln1_g.data(), bw.ln1_b.data(), d, s.a.data(),
             tr ? tr->ln1_mean : nullptr, tr ? tr->ln1_rstd : nullptr);
  if (tr && tr->ln1_out) std::copy(s.a.begin(), s.a.end(), tr->ln1_out);

  linear(bw.wq.data(), bw.bq.data(), d, d, s.a.data(), s.q.data());
  linear(bw.wk.data(), bw.bk.data(), d, d, s.a.data(), k_cache + static_cast<std::size_t>(pos) * d);
  linear(bw.wv.data(), bw.bv.data(), d, d, s.a.data(), v_cache + static_cast<std::size_t>(pos) * d);
  if (tr && tr->q) std::copy(s.q.begin(), s.q.end(), tr->q);

  const double inv_sqrt = 1.0 / std::sqrt(static_cast<double>(hs));
  for (int h = 0; h < cfg.n_heads; ++h) {
    const float* qh = s.q.data() + h * hs;
    double mx = -1e300;
    for (int j = 0; j <= pos; ++j) {
      const float* kh = k_cache + static_cast<std::size_t>(j) * d + h * hs;
      double dot = 0.0;
      for (int t = 0; t < hs; ++t) dot += static_cast<double>(qh[t]) * kh[t];
      s.scores[j] = dot * inv_sqrt;
      mx = std::max(mx, s.scores[j]);
    }
    double denom = 0.0;
    for (int j = 0; j <= pos; ++j) {
      s.scores[j] = std::exp(s.scores[j] - mx);
      denom += s.scores[j];
    }
    for (int j = 0; j <= pos; ++j) {
      s.probs[j] = static_cast<float>(s.scores[j] / denom);
      if (tr && tr->probs) tr->probs[h * tr->probs_head_stride + tri(pos) + j] = s.probs[j];
    }
    for (int t = 0; t < hs; ++t) {
      double acc = 0.0;
      for (int j = 0; j <= pos; ++j)
        acc += static_cast<double>(s.probs[j]) * v_cache[static_cast<std::size_t>(j) * d + h * hs + t];
      s.ctx[h * hs + t] = static_cast<float>(acc);
    }
  }
  if (tr && tr->ctx) std::copy(s.ctx.begin(), s.ctx.end(), tr->ctx);

  linear(bw.wo.data(), bw.bo.data(), d, d, s.ctx.data(), s.att.data());
  for (int i = 0; i < d; ++i) s.att[i] += x[i];  // first residual
  if (tr && tr->res1) std::copy(s.att.begin(), s.att.end(), tr->res1);

  layer_norm(s.att.data(), bw.ln2_g.data(), bw.ln2_b.data(), d, s.m.data(),
             tr ? tr->ln2_mean : nullptr, tr ? tr->ln2_rstd : nullptr);
  if (tr && tr->ln2_out) std::copy(s.m.begin(), s.m.end(), tr->ln2_out);

  linear(bw.w1.data(), bw.b1.data(), 4 * d, d, s.m.data(), s.u.data());
  if (tr && tr->mlp_pre) std::copy(s.u.begin(), s.u.end(), tr->mlp_pre);
  for (int i = 0; i < 4 * d; ++i) s.f[i] = gelu(s.u[i]);
  if (tr && tr->mlp_act) std::copy(s.f.begin(), s.f.end(), tr->mlp_act);

  linear(bw.w2.data(), bw.b2.data(), d, 4 * d, s.f.data(), y);
  for (int i = 0; i < d; ++i) y[i] += s.att[i];  // second residual
}

inline void final_logits(const ModelConfig& cfg, const Weights& w, const float* x,
                         float* z_out, float* logits_out, float* mean_out = nullptr,
                         float* rstd_out = nullptr) {
  layer_norm(x, w.lnf_g.data(), w.lnf_b.data(), cfg.d_model, z_out, mean_out, rstd_out);
  linear(w.lm_w.data(), w.lm_b.data(), cfg.vocab_size, cfg.d_model, z_out, logits_out);
}

// Enumerates every weight tensor in a fixed order (serialization, hashing,
// optimizer state all rely on this order).
void for_each_tensor(const ModelConfig& cfg, Weights& w,
                     const std::function<void(const std::string&, std::vector<float>&,
                                              std::vector<std::uint64_t>)>& fn);

}  // namespace steervec::detail
