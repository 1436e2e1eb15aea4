#include <algorithm>
#include <cmath>
#include <numeric>

#include "model_internal.hpp"
#include "steervec/model.hpp"
#include "steervec/steering.hpp"

// Training paths: a tracing forward (bitwise the same per-position math as
// the decoder) plus a hand-rolled backward. Pretraining backpropagates into
// every weight; the steering path treats base weights as constants and only
// accumulates gradients for the per-layer (A, B) of the hook.

namespace steervec {

namespace {

using detail::gelu;
using detail::gelu_grad;
using detail::kLnEps;
using detail::linear;
using detail::tri;

struct BlockTrace {
  std::vector<float> ln1_out, q, res1, ln2_out, block_out, steered;  // P*d
  std::vector<float> k, v;                                           // P*d
  std::vector<float> mlp_pre, mlp_act;                               // P*4d
  std::vector<float> ln1_mean, ln1_rstd, ln2_mean, ln2_rstd;         // P
  std::vector<float> probs;  // n_heads * tri(P)
  // steering extras (only filled when the layer is hooked)
  std::vector<float> hs;       // P*d: h + alpha*u before norm restore
  std::vector<double> nh, ns;  // P: L2 norms before/after the add
  std::vector<float> z;        // P*rank, post dropout
  std::vector<float> drop_mask;

  void resize(const ModelConfig& cfg, int P, int rank) {
    const std::size_t pd = static_cast<std::size_t>(P) * cfg.d_model;
    ln1_out.resize(pd);
    q.resize(pd);
    res1.resize(pd);
    ln2_out.resize(pd);
    block_out.resize(pd);
    steered.resize(pd);
    k.resize(pd);
    v.resize(pd);
    mlp_pre.resize(pd * 4);
    mlp_act.resize(pd * 4);
    ln1_mean.resize(P);
    ln1_rstd.resize(P);
    ln2_mean.resize(P);
    ln2_rstd.resize(P);
    probs.resize(static_cast<std::size_t>(cfg.n_heads) * tri(P));
    if (rank > 0) {
      hs.resize(pd);
      nh.resize(P);
      ns.resize(P);
      z.resize(static_cast<std::size_t>(P) * rank);
      drop_mask.resize(static_cast<std::size_t>(P) * rank);
    }
  }
};

struct SampleTrace {
  int P = 0;
  std::vector<float> x0;  // P*d
  std::vector<BlockTrace> blocks;
  std::vector<float> lnf_out;             // P*d
  std::vector<float> lnf_mean, lnf_rstd;  // P
  std::vector<float> probs_vocab;         // P*vocab
  double loss_sum = 0.0;
  long counted = 0;

  void resize(const ModelConfig& cfg, int P_, int rank) {
    P = P_;
    x0.resize(static_cast<std::size_t>(P) * cfg.d_model);
    blocks.resize(cfg.n_layers);
    for (auto& b : blocks) b.resize(cfg, P, rank);
    lnf_out.resize(static_cast<std::size_t>(P) * cfg.d_model);
    lnf_mean.resize(P);
    lnf_rstd.resize(P);
    probs_vocab.resize(static_cast<std::size_t>(P) * cfg.vocab_size);
  }
};

// Per-item steering context: the hook's constants, precomputed per layer.
struct SteerCtx {
  const LearnedSteering* params = nullptr;
  bool norm_restore = true;
  const float* r_target = nullptr;  // [n_layers * d]
  const float* r_source = nullptr;
  std::vector<float> unit;  // [n_layers * d]: unit(r_t - beta*r_s) per layer
  float dropout_rate = 0.0f;
  Rng* dropout_rng = nullptr;

  void prepare(const ModelConfig& cfg, const SteeredSequence& seq, const LearnedSteering& p) {
    params = &p;
    r_target = seq.r_target.data();
    r_source = seq.r_source.data();
    const int d = cfg.d_model;
    unit.resize(static_cast<std::size_t>(cfg.n_layers) * d);
    std::vector<float> scaled(d);
    for (int li = 0; li < cfg.n_layers; ++li) {
      const float* rt = r_target + static_cast<std::size_t>(li) * d;
      const float* rs = r_source + static_cast<std::size_t>(li) * d;
      for (int i = 0; i < d; ++i) scaled[i] = p.beta * rs[i];
      auto u = std::span<float>(unit.data() + static_cast<std::size_t>(li) * d, d);
      const double norm =
          steervec::detail::direction({rt, static_cast<std::size_t>(d)}, scaled, 1.0f, u);
      if (norm < 1e-8)
        raise(Errc::no_language_signal,
              "steering direction degenerate at layer " + std::to_string(li + 1));
      steervec::detail::unit_in_place(u, norm);
    }
  }
};

double l2_norm_sq(const float* x, int d) {
  double acc = 0.0;
  for (int i = 0; i < d; ++i) acc += static_cast<double>(x[i]) * x[i];
  return acc;
}

// Forward with trace. Returns nothing; trace carries activations + loss.
void forward_train(const ToyTransformer& model, const std::vector<int>& tokens, int loss_start,
                   SteerCtx* steer, SampleTrace& trace, detail::BlockScratch& scratch,
                   std::vector<double>& logits_buf) {
  const auto& cfg = model.cfg;
  const int d = cfg.d_model;
  const int P = static_cast<int>(tokens.size());
  if (P < 2) raise(Errc::degenerate_sample, "training sequence needs >= 2 tokens");
  if (P > cfg.max_seq_len) raise(Errc::sequence_too_long, "training sequence too long");
  const int rank = steer ? steer->params->rank : 0;
  trace.resize(cfg, P, rank);
  trace.loss_sum = 0.0;
  trace.counted = 0;

  std::vector<float> x(d);
  for (int p = 0; p < P; ++p) {
    const int tok = tokens[p];
    if (tok < 0 || tok >= cfg.vocab_size) raise(Errc::invalid_argument, "token out of vocabulary");
    const float* te = model.w.tok_emb.data() + static_cast<std::size_t>(tok) * d;
    const float* pe = model.w.pos_emb.data() + static_cast<std::size_t>(p) * d;
    float* x0 = trace.x0.data() + static_cast<std::size_t>(p) * d;
    for (int i = 0; i < d; ++i) x0[i] = te[i] + pe[i];
    std::copy(x0, x0 + d, x.begin());

    for (int li = 0; li < cfg.n_layers; ++li) {
      auto& bt = trace.blocks[li];
      const std::size_t row = static_cast<std::size_t>(p) * d;
      detail::BlockPosTrace tr;
      tr.ln1_out = bt.ln1_out.data() + row;
      tr.q = bt.q.data() + row;
      tr.res1 = bt.res1.data() + row;
      tr.ln2_out = bt.ln2_out.data() + row;
      tr.mlp_pre = bt.mlp_pre.data() + row * 4;
      tr.mlp_act = bt.mlp_act.data() + row * 4;
      tr.ln1_mean = &bt.ln1_mean[p];
      tr.ln1_rstd = &bt.ln1_rstd[p];
      tr.ln2_mean = &bt.ln2_mean[p];
      tr.ln2_rstd = &bt.ln2_rstd[p];
      tr.probs = bt.probs.data();
      tr.probs_head_stride = tri(P);

      detail::block_position(cfg, model.w.blocks[li], p, x.data(), bt.k.data(), bt.v.data(),
                             x.data(), scratch, &tr);
      std::copy(x.begin(), x.end(), bt.block_out.begin() + row);

      if (steer && p > 0) {  // position 1 never steered
        const float* h = bt.block_out.data() + row;
        const float* u = steer->unit.data() + static_cast<std::size_t>(li) * d;
        const auto& sp = *steer->params;
        const double nh2 = l2_norm_sq(h, d);
        float* hs = bt.hs.data() + row;
        for (int i = 0; i < d; ++i) hs[i] = h[i] + sp.alpha * u[i];
        const double ns2 = l2_norm_sq(hs, d);
        bt.nh[p] = std::sqrt(nh2);
        bt.ns[p] = std::sqrt(ns2);
        float* out = x.data();
        if (steer->norm_restore) {
          if (nh2 == 0.0 || ns2 == 0.0) {
            std::fill(out, out + d, 0.0f);
          } else {
            const float scale = static_cast<float>(std::sqrt(nh2 / ns2));
            for (int i = 0; i < d; ++i) out[i] = hs[i] * scale;
          }
        } else {
          std::copy(hs, hs + d, out);
        }
        // low-rank path: z = x^T A with x = [h; r_t; r_s]
        const float* rt = steer->r_target + static_cast<std::size_t>(li) * d;
        const float* rs = steer->r_source + static_cast<std::size_t>(li) * d;
        const float* A = sp.a[li].data();
        float* z = bt.z.data() + static_cast<std::size_t>(p) * rank;
        float* mask = bt.drop_mask.data() + static_cast<std::size_t>(p) * rank;
        for (int kk = 0; kk < rank; ++kk) {
          double acc = 0.0;
          for (int i = 0; i < d; ++i) acc += static_cast<double>(h[i]) * A[static_cast<std::size_t>(i) * rank + kk];
          for (int i = 0; i < d; ++i)
            acc += static_cast<double>(rt[i]) * A[static_cast<std::size_t>(d + i) * rank + kk];
          for (int i = 0; i < d; ++i)
            acc += static_cast<double>(rs[i]) * A[static_cast<std::size_t>(2 * d + i) * rank + kk];
          float zk = static_cast<float>(acc);
          float mk = 1.0f;
          if (steer->dropout_rate > 0.0f && steer->dropout_rng) {
            mk = steer->dropout_rng->real01() < steer->dropout_rate
                     ? 0.0f
                     : 1.0f / (1.0f - steer->dropout_rate);
          }
          mask[kk] = mk;
          z[kk] = zk * mk;
        }
        const float* B = sp.b[li].data();
        for (int j = 0; j < d; ++j) {
          double acc = 0.0;
          for (int kk = 0; kk < rank; ++kk)
            acc += static_cast<double>(z[kk]) * B[static_cast<std::size_t>(kk) * d + j];
          out[j] += static_cast<float>(acc);
        }
      }
      std::copy(x.begin(), x.end(), bt.steered.begin() + row);
    }

    // head and cross-entropy in double (the loss is the numerically
    // sensitive output of this path); stored probabilities stay f32
    float* z = trace.lnf_out.data() + static_cast<std::size_t>(p) * d;
    detail::layer_norm(x.data(), model.w.lnf_g.data(), model.w.lnf_b.data(), d, z,
                       &trace.lnf_mean[p], &trace.lnf_rstd[p]);
    for (int v = 0; v < cfg.vocab_size; ++v) {
      const float* row = model.w.lm_w.data() + static_cast<std::size_t>(v) * d;
      double acc = model.w.lm_b[v];
      for (int i = 0; i < d; ++i) acc += static_cast<double>(row[i]) * z[i];
      logits_buf[v] = acc;
    }
    double mx = -1e300;
    for (int v = 0; v < cfg.vocab_size; ++v) mx = std::max(mx, logits_buf[v]);
    double denom = 0.0;
    float* probs = trace.probs_vocab.data() + static_cast<std::size_t>(p) * cfg.vocab_size;
    for (int v = 0; v < cfg.vocab_size; ++v) {
      logits_buf[v] = std::exp(logits_buf[v] - mx);
      denom += logits_buf[v];
    }
    for (int v = 0; v < cfg.vocab_size; ++v)
      probs[v] = static_cast<float>(logits_buf[v] / denom);

    if (p + 1 < P && p + 1 >= loss_start) {
      const double pt = logits_buf[tokens[p + 1]] / denom;
      trace.loss_sum += -std::log(std::max(pt, 1e-300));
      trace.counted += 1;
    }
  }
}

// ---------------------------------------------------------------------------
// Backward

struct WeightGrads {
  Weights g;
  explicit WeightGrads(const ToyTransformer& m) {
    g = m.w;
    detail::for_each_tensor(m.cfg, g, [](const std::string&, std::vector<float>& t,
                                         std::vector<std::uint64_t>) {
      std::fill(t.begin(), t.end(), 0.0f);
    });
  }
};

struct SteerGradAcc {
  std::vector<std::vector<double>> a, b;  // per layer, double accumulators
  void init(const LearnedSteering& p) {
    a.assign(p.n_layers, {});
    b.assign(p.n_layers, {});
    for (int li = 0; li < p.n_layers; ++li) {
      a[li].assign(p.a[li].size(), 0.0);
      b[li].assign(p.b[li].size(), 0.0);
    }
  }
};

// dy -> dx for one layer norm application; optionally accumulates dg/db.
void layer_norm_backward(const float* x, const float* g, float mean, float rstd, const float* dy,
                         int d, float* dx_accum, float* dg, float* db) {
  double m1 = 0.0, m2 = 0.0;
  for (int i = 0; i < d; ++i) {
    const double xhat = (static_cast<double>(x[i]) - mean) * rstd;
    const double dxhat = static_cast<double>(dy[i]) * g[i];
    m1 += dxhat;
    m2 += dxhat * xhat;
  }
  m1 /= d;
  m2 /= d;
  for (int i = 0; i < d; ++i) {
    const double xhat = (static_cast<double>(x[i]) - mean) * rstd;
    const double dxhat = static_cast<double>(dy[i]) * g[i];
    dx_accum[i] += static_cast<float>(rstd * (dxhat - m1 - xhat * m2));
    if (dg) dg[i] += static_cast<float>(dy[i] * xhat);
    if (db) db[i] += dy[i];
  }
}

// out[i] += sum_o w[o][i] * dy[o]  (transpose matvec, double accumulated)
void linear_backward_input(const float* w, int n_out, int n_in, const float* dy, float* dx_accum) {
  for (int i = 0; i < n_in; ++i) {
    double acc = 0.0;
    for (int o = 0; o < n_out; ++o)
      acc += static_cast<double>(w[static_cast<std::size_t>(o) * n_in + i]) * dy[o];
    dx_accum[i] += static_cast<float>(acc);
  }
}

void linear_backward_weights(const float* x, const float* dy, int n_out, int n_in, float* dw,
                             float* db) {
  for (int o = 0; o < n_out; ++o) {
    const float dyo = dy[o];
    if (dyo == 0.0f) continue;
    float* row = dw + static_cast<std::size_t>(o) * n_in;
    for (int i = 0; i < n_in; ++i) row[i] += dyo * x[i];
    db[o] += dyo;
  }
}

// Backward through one sample. inv_counted scales the CE gradient so the
// batch loss is the token-level mean. wg (pretraining) and steer/sg
// (steering training) are independently optional.
void backward_sample(const ToyTransformer& model, const std::vector<int>& tokens, int loss_start,
                     double inv_counted, const SampleTrace& trace, WeightGrads* wg,
                     const SteerCtx* steer, SteerGradAcc* sg) {
  const auto& cfg = model.cfg;
  const int d = cfg.d_model;
  const int P = trace.P;
  const int hs_dim = cfg.head_dim();
  const int rank = steer ? steer->params->rank : 0;
  const std::size_t pd = static_cast<std::size_t>(P) * d;

  std::vector<float> dx(pd, 0.0f);  // gradient at the current stream level
  std::vector<float> dlogits(cfg.vocab_size);
  std::vector<float> d_lnf(d);

  // head + final norm
  for (int p = 0; p < P; ++p) {
    const bool counted = (p + 1 < P) && (p + 1 >= loss_start);
    if (!counted) continue;
    const float* probs = trace.probs_vocab.data() + static_cast<std::size_t>(p) * cfg.vocab_size;
    for (int v = 0; v < cfg.vocab_size; ++v)
      dlogits[v] = static_cast<float>(static_cast<double>(probs[v]) * inv_counted);
    dlogits[tokens[p + 1]] -= static_cast<float>(inv_counted);

    std::fill(d_lnf.begin(), d_lnf.end(), 0.0f);
    linear_backward_input(model.w.lm_w.data(), cfg.vocab_size, d, dlogits.data(), d_lnf.data());
    if (wg)
      linear_backward_weights(trace.lnf_out.data() + static_cast<std::size_t>(p) * d,
                              dlogits.data(), cfg.vocab_size, d, wg->g.lm_w.data(),
                              wg->g.lm_b.data());

    const float* x_in = trace.blocks[cfg.n_layers - 1].steered.data() + static_cast<std::size_t>(p) * d;
    layer_norm_backward(x_in, model.w.lnf_g.data(), trace.lnf_mean[p], trace.lnf_rstd[p],
                        d_lnf.data(), d, dx.data() + static_cast<std::size_t>(p) * d,
                        wg ? wg->g.lnf_g.data() : nullptr, wg ? wg->g.lnf_b.data() : nullptr);
  }

  std::vector<float> d_block(pd), d_res1(pd), d_prev(pd);
  std::vector<float> d_ctx(d), d_f(4 * d), d_u(4 * d), d_m(d), d_attn(d);
  std::vector<float> dq(pd), dk(pd), dv(pd), d_a(d);
  std::vector<double> dz(std::max(rank, 1));

  for (int li = cfg.n_layers - 1; li >= 0; --li) {
    const auto& bt = trace.blocks[li];
    const auto& bw = model.w.blocks[li];
    BlockWeights* gw = wg ? &wg->g.blocks[li] : nullptr;

    // hook backward: dx is the gradient at the steered output
    if (steer && rank > 0) {
      const auto& sp = *steer->params;
      const float* rt = steer->r_target + static_cast<std::size_t>(li) * d;
      const float* rs = steer->r_source + static_cast<std::size_t>(li) * d;
      const float* A = sp.a[li].data();
      const float* B = sp.b[li].data();
      std::fill(d_block.begin(), d_block.end(), 0.0f);
      for (int p = 0; p < P; ++p) {
        const std::size_t row = static_cast<std::size_t>(p) * d;
        const float* dout = dx.data() + row;
        float* dh = d_block.data() + row;
        if (p == 0) {  // position 1 is never steered
          std::copy(dout, dout + d, dh);
          continue;
        }
        const float* h = bt.block_out.data() + row;
        const float* hsv = bt.hs.data() + row;
        const float* z = bt.z.data() + static_cast<std::size_t>(p) * rank;
        const float* mask = bt.drop_mask.data() + static_cast<std::size_t>(p) * rank;

        // low-rank path
        for (int kk = 0; kk < rank; ++kk) {
          double acc = 0.0;
          for (int j = 0; j < d; ++j)
            acc += static_cast<double>(B[static_cast<std::size_t>(kk) * d + j]) * dout[j];
          if (sg) {
            auto& gb = sg->b[li];
            for (int j = 0; j < d; ++j)
              gb[static_cast<std::size_t>(kk) * d + j] += static_cast<double>(z[kk]) * dout[j];
          }
          dz[kk] = acc * mask[kk];
        }
        if (sg) {
          auto& ga = sg->a[li];
          for (int kk = 0; kk < rank; ++kk) {
            const double dzk = dz[kk];
            if (dzk == 0.0) continue;
            for (int i = 0; i < d; ++i) {
              ga[static_cast<std::size_t>(i) * rank + kk] += static_cast<double>(h[i]) * dzk;
              ga[static_cast<std::size_t>(d + i) * rank + kk] += static_cast<double>(rt[i]) * dzk;
              ga[static_cast<std::size_t>(2 * d + i) * rank + kk] += static_cast<double>(rs[i]) * dzk;
            }
          }
        }
        // x = [h; r_t; r_s]: only the h rows of A feed back into the stream
        for (int i = 0; i < d; ++i) {
          double acc = 0.0;
          for (int kk = 0; kk < rank; ++kk)
            acc += static_cast<double>(A[static_cast<std::size_t>(i) * rank + kk]) * dz[kk];
          dh[i] += static_cast<float>(acc);
        }
        // hhat path (identity residual into the low-rank add)
        if (steer->norm_restore) {
          const double nh = bt.nh[p], ns = bt.ns[p];
          if (nh == 0.0 || ns == 0.0) continue;  // forward emitted zeros
          const double g = nh / ns;
          double S = 0.0;
          for (int j = 0; j < d; ++j) S += static_cast<double>(hsv[j]) * dout[j];
          const double inv_nhns = 1.0 / (nh * ns);
          const double nh_ns3 = nh / (ns * ns * ns);
          for (int kk2 = 0; kk2 < d; ++kk2) {
            dh[kk2] += static_cast<float>(g * dout[kk2] +
                                          S * (h[kk2] * inv_nhns - nh_ns3 * hsv[kk2]));
          }
        } else {
          for (int j = 0; j < d; ++j) dh[j] += dout[j];
        }
      }
      std::swap(dx, d_block);
    }

    // block_out = res1 + mlp(ln2(res1)); propagate into res1
    std::fill(d_res1.begin(), d_res1.end(), 0.0f);
    for (int p = 0; p < P; ++p) {
      const std::size_t row = static_cast<std::size_t>(p) * d;
      const float* dy = dx.data() + row;
      float* dr1 = d_res1.data() + row;
      for (int i = 0; i < d; ++i) dr1[i] += dy[i];

      std::fill(d_f.begin(), d_f.end(), 0.0f);
      linear_backward_input(bw.w2.data(), d, 4 * d, dy, d_f.data());
      if (gw)
        linear_backward_weights(bt.mlp_act.data() + row * 4, dy, d, 4 * d, gw->w2.data(),
                                gw->b2.data());
      const float* pre = bt.mlp_pre.data() + row * 4;
      for (int i = 0; i < 4 * d; ++i) d_u[i] = gelu_grad(pre[i]) * d_f[i];
      std::fill(d_m.begin(), d_m.end(), 0.0f);
      linear_backward_input(bw.w1.data(), 4 * d, d, d_u.data(), d_m.data());
      if (gw)
        linear_backward_weights(bt.ln2_out.data() + row, d_u.data(), 4 * d, d, gw->w1.data(),
                                gw->b1.data());
      layer_norm_backward(bt.res1.data() + row, bw.ln2_g.data(), bt.ln2_mean[p], bt.ln2_rstd[p],
                          d_m.data(), d, dr1, gw ? gw->ln2_g.data() : nullptr,
                          gw ? gw->ln2_b.data() : nullptr);
    }

    // res1 = x_in + attn_out
    std::fill(d_prev.begin(), d_prev.end(), 0.0f);
    std::fill(dq.begin(), dq.end(), 0.0f);
    std::fill(dk.begin(), dk.end(), 0.0f);
    std::fill(dv.begin(), dv.end(), 0.0f);
    const double inv_sqrt = 1.0 / std::sqrt(static_cast<double>(hs_dim));
    for (int p = 0; p < P; ++p) {
      const std::size_t row = static_cast<std::size_t>(p) * d;
      const float* dr1 = d_res1.data() + row;
      for (int i = 0; i < d; ++i) d_prev[row + i] += dr1[i];  // residual passthrough

      std::fill(d_ctx.begin(), d_ctx.end(), 0.0f);
      linear_backward_input(bw.wo.data(), d, d, dr1, d_ctx.data());
      if (gw) {
        // forward ctx is not stored; rebuild it from probs and v
        std::fill(d_attn.begin(), d_attn.end(), 0.0f);
        for (int h = 0; h < cfg.n_heads; ++h) {
          const float* prow = bt.probs.data() + static_cast<std::size_t>(h) * tri(P) + tri(p);
          for (int t = 0; t < hs_dim; ++t) {
            double acc = 0.0;
            for (int j = 0; j <= p; ++j)
              acc += static_cast<double>(prow[j]) * bt.v[static_cast<std::size_t>(j) * d + h * hs_dim + t];
            d_attn[h * hs_dim + t] = static_cast<float>(acc);
          }
        }
        linear_backward_weights(d_attn.data(), dr1, d, d, gw->wo.data(), gw->bo.data());
      }

      for (int h = 0; h < cfg.n_heads; ++h) {
        const float* prow = bt.probs.data() + static_cast<std::size_t>(h) * tri(P) + tri(p);
        const float* dc = d_ctx.data() + h * hs_dim;
        // da_j then softmax backward
        double S = 0.0;
        thread_local std::vector<double> da;
        da.resize(p + 1);
        for (int j = 0; j <= p; ++j) {
          const float* vj = bt.v.data() + static_cast<std::size_t>(j) * d + h * hs_dim;
          double acc = 0.0;
          for (int t = 0; t < hs_dim; ++t) acc += static_cast<double>(dc[t]) * vj[t];
          da[j] = acc;
          S += acc * prow[j];
        }
        const float* qp = bt.q.data() + row + h * hs_dim;
        for (int j = 0; j <= p; ++j) {
          const double ds = prow[j] * (da[j] - S) * inv_sqrt;
          const float* kj = bt.k.data() + static_cast<std::size_t>(j) * d + h * hs_dim;
          float* dqp = dq.data() + row + h * hs_dim;
          float* dkj = dk.data() + static_cast<std::size_t>(j) * d + h * hs_dim;
          float* dvj = dv.data() + static_cast<std::size_t>(j) * d + h * hs_dim;
          for (int t = 0; t < hs_dim; ++t) {
            dqp[t] += static_cast<float>(ds * kj[t]);
            dkj[t] += static_cast<float>(ds * qp[t]);
            dvj[t] += prow[j] * dc[t];
          }
        }
      }
    }

    // projections and first layer norm
    for (int p = 0; p < P; ++p) {
      const std::size_t row = static_cast<std::size_t>(p) * d;
      std::fill(d_a.begin(), d_a.end(), 0.0f);
      linear_backward_input(bw.wq.data(), d, d, dq.data() + row, d_a.data());
      linear_backward_input(bw.wk.data(), d, d, dk.data() + row, d_a.data());
      linear_backward_input(bw.wv.data(), d, d, dv.data() + row, d_a.data());
      if (gw) {
        const float* a = bt.ln1_out.data() + row;
        linear_backward_weights(a, dq.data() + row, d, d, gw->wq.data(), gw->bq.data());
        linear_backward_weights(a, dk.data() + row, d, d, gw->wk.data(), gw->bk.data());
        linear_backward_weights(a, dv.data() + row, d, d, gw->wv.data(), gw->bv.data());
      }
      const float* x_in = li == 0 ? trace.x0.data() + row
                                  : trace.blocks[li - 1].steered.data() + row;
      layer_norm_backward(x_in, bw.ln1_g.data(), bt.ln1_mean[p], bt.ln1_rstd[p], d_a.data(), d,
                          d_prev.data() + row, gw ? gw->ln1_g.data() : nullptr,
                          gw ? gw->ln1_b.data() : nullptr);
    }
    std::swap(dx, d_prev);
  }

  if (wg) {
    for (int p = 0; p < P; ++p) {
      const std::size_t row = static_cast<std::size_t>(p) * d;
      float* dt = wg->g.tok_emb.data() + static_cast<std::size_t>(tokens[p]) * d;
      float* dp = wg->g.pos_emb.data() + static_cast<std::size_t>(p) * d;
      for (int i = 0; i < d; ++i) {
        dt[i] += dx[row + i];
        dp[i] += dx[row + i];
      }
    }
  }
}

}  // namespace

// ---------------------------------------------------------------------------
// Pretraining

PretrainResult pretrain_toy(const ModelConfig& config, const ParallelCorpus& corpus,
                            const PretrainOptions& opts) {
  config.validate();
  if (corpus.kind() != ParallelCorpus::CellKind::tokens)
    raise(Errc::invalid_argument, "pretrain_toy expects a token corpus");
  if (corpus.vocab_size() > config.vocab_size)
    raise(Errc::invalid_argument, "corpus vocabulary exceeds model vocab_size");
  if (corpus.max_cell_tokens() > config.max_seq_len)
    raise(Errc::sequence_too_long, "corpus sample exceeds max_seq_len");
  if (opts.epochs < 0 || opts.batch < 1) raise(Errc::invalid_argument, "bad pretrain options");

  PretrainResult result{ToyTransformer(config), 0.0, 0.0, {}};
  ToyTransformer& model = result.model;

  std::vector<const std::vector<int>*> items;
  for (std::size_t s = 0; s < corpus.n_samples(); ++s)
    for (std::size_t l = 0; l < corpus.n_languages(); ++l) items.push_back(&corpus.token_cell(s, l));

  SampleTrace trace;
  detail::BlockScratch scratch;
  scratch.resize(config);
  std::vector<double> logits_buf(config.vocab_size);

  auto probe_loss = [&]() {
    const std::size_t n = std::min<std::size_t>(items.size(), 64);
    double sum = 0.0;
    long counted = 0;
    for (std::size_t i = 0; i < n; ++i) {
      forward_train(model, *items[i], 1, nullptr, trace, scratch, logits_buf);
      sum += trace.loss_sum;
      counted += trace.counted;
    }
    return sum / std::max<long>(counted, 1);
  };
  result.initial_loss = probe_loss();

  // Adam
  WeightGrads grads(model);
  Weights m1 = grads.g, m2 = grads.g;  // zeroed moment buffers
  std::vector<std::span<float>> params, gview, m1v, m2v;
  auto collect = [&](Weights& w, std::vector<std::span<float>>& out) {
    out.clear();
    detail::for_each_tensor(config, w,
                            [&](const std::string&, std::vector<float>& t,
                                std::vector<std::uint64_t>) { out.emplace_back(t); });
  };
  collect(model.w, params);
  collect(grads.g, gview);
  collect(m1, m1v);
  collect(m2, m2v);

  long step = 0;
  const double b1 = 0.9, b2 = 0.999, eps = 1e-8;
  std::vector<std::size_t> order(items.size());
  std::iota(order.begin(), order.end(), 0);

  for (int epoch = 0; epoch < opts.epochs; ++epoch) {
    Rng shuffle_rng(opts.shuffle_seed + 0x9e37u * static_cast<std::uint64_t>(epoch + 1));
    for (std::size_t i = order.size(); i > 1; --i)
      std::swap(order[i - 1], order[static_cast<std::size_t>(shuffle_rng.uniform_int(0, static_cast<std::int64_t>(i) - 1))]);

    double epoch_sum = 0.0;
    long epoch_counted = 0;
    for (std::size_t start = 0; start < order.size(); start += opts.batch) {
      const std::size_t stop = std::min(order.size(), start + opts.batch);
      long total_counted = 0;
      for (std::size_t i = start; i < stop; ++i)
        total_counted += static_cast<long>(items[order[i]]->size()) - 1;
      if (total_counted == 0) continue;
      for (auto& t : gview) std::fill(t.begin(), t.end(), 0.0f);

      for (std::size_t i = start; i < stop; ++i) {
        const auto& tokens = *items[order[i]];
        forward_train(model, tokens, 1, nullptr, trace, scratch, logits_buf);
        if (!std::isfinite(trace.loss_sum)) raise(Errc::diverged_training, "non-finite loss");
        epoch_sum += trace.loss_sum;
        epoch_counted += trace.counted;
        backward_sample(model, tokens, 1, 1.0 / total_counted, trace, &grads, nullptr, nullptr);
      }

      ++step;
      const double bc1 = 1.0 - std::pow(b1, step);
      const double bc2 = 1.0 - std::pow(b2, step);
      for (std::size_t t = 0; t < params.size(); ++t) {
        auto p = params[t];
        auto g = gview[t];
        auto ma = m1v[t];
        auto mb = m2v[t];
        for (std::size_t j = 0; j < p.size(); ++j) {
          const double gj = g[j];
          ma[j] = static_cast<float>(b1 * ma[j] + (1.0 - b1) * gj);
          mb[j] = static_cast<float>(b2 * mb[j] + (1.0 - b2) * gj * gj);
          const double mhat = ma[j] / bc1;
          const double vhat = mb[j] / bc2;
          p[j] -= static_cast<float>(opts.lr * mhat / (std::sqrt(vhat) + eps));
        }
      }
    }
    result.epoch_loss.push_back(epoch_sum / std::max<long>(epoch_counted, 1));
  }

  result.final_loss = probe_loss();
  if (!std::isfinite(result.final_loss)) raise(Errc::diverged_training, "non-finite final loss");
  model.frozen = true;
  return result;
}

// ---------------------------------------------------------------------------
// Steering-parameter gradients

SteeringGrads grad_steering_params(const ToyTransformer& model,
                                   std::span<const SteeredSequence> batch,
                                   const LearnedSteering& steering, bool norm_restore,
                                   float dropout_rate, Rng* dropout_rng) {
  if (!model.frozen) raise(Errc::invalid_argument, "base model must be frozen");
  steering.validate();
  if (steering.d_model != model.cfg.d_model || steering.n_layers != model.cfg.n_layers)
    raise(Errc::shape_mismatch, "steering shapes do not match the model");
  const std::size_t rd = static_cast<std::size_t>(model.cfg.n_layers) * model.cfg.d_model;

  SteerGradAcc acc;
  acc.init(steering);

  SampleTrace trace;
  detail::BlockScratch scratch;
  scratch.resize(model.cfg);
  std::vector<double> logits_buf(model.cfg.vocab_size);

  long total_counted = 0;
  for (const auto& seq : batch) {
    if (seq.r_target.size() != rd || seq.r_source.size() != rd)
      raise(Errc::shape_mismatch, "r vectors must be n_layers * d");
    total_counted += std::max<long>(0, static_cast<long>(seq.tokens.size()) -
                                           std::max(seq.loss_start, 1));
  }
  if (total_counted == 0) raise(Errc::invalid_argument, "batch has no counted tokens");

  double loss_sum = 0.0;
  for (const auto& seq : batch) {
    SteerCtx ctx;
    ctx.norm_restore = norm_restore;
    ctx.dropout_rate = dropout_rate;
    ctx.dropout_rng = dropout_rng;
    ctx.prepare(model.cfg, seq, steering);
    forward_train(model, seq.tokens, std::max(seq.loss_start, 1), &ctx, trace, scratch, logits_buf);
    loss_sum += trace.loss_sum;
    backward_sample(model, seq.tokens, std::max(seq.loss_start, 1), 1.0 / total_counted, trace,
                    nullptr, &ctx, &acc);
  }

  SteeringGrads out;
  out.loss = loss_sum / total_counted;
  out.counted_tokens = total_counted;
  if (!std::isfinite(out.loss)) raise(Errc::non_finite_loss, "steering loss is not finite");
  out.a.resize(steering.n_layers);
  out.b.resize(steering.n_layers);
  for (int li = 0; li < steering.n_layers; ++li) {
    out.a[li].assign(acc.a[li].begin(), acc.a[li].end());
    out.b[li].assign(acc.b[li].begin(), acc.b[li].end());
  }
  return out;
}

double steering_loss(const ToyTransformer& model, std::span<const SteeredSequence> batch,
                     const LearnedSteering& steering, bool norm_restore) {
  if (!model.frozen) raise(Errc::invalid_argument, "base model must be frozen");
  SampleTrace trace;
  detail::BlockScratch scratch;
  scratch.resize(model.cfg);
  std::vector<double> logits_buf(model.cfg.vocab_size);

  double loss_sum = 0.0;
  long counted = 0;
  for (const auto& seq : batch) {
    SteerCtx ctx;
    ctx.norm_restore = norm_restore;
    ctx.prepare(model.cfg, seq, steering);
    forward_train(model, seq.tokens, std::max(seq.loss_start, 1), &ctx, trace, scratch, logits_buf);
    loss_sum += trace.loss_sum;
    counted += trace.counted;
  }
  if (counted == 0) raise(Errc::invalid_argument, "batch has no counted tokens");
  const double loss = loss_sum / counted;
  if (!std::isfinite(loss)) raise(Errc::non_finite_loss, "steering loss is not finite");
  return loss;
}

}  // namespace steervec
