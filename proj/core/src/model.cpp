#include "steervec/model.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>

#include "model_internal.hpp"

namespace steervec {

void ModelConfig::validate() const {
  if (d_model < 1 || n_heads < 1 || d_model % n_heads != 0)
    raise(Errc::invalid_argument, "d_model must be a positive multiple of n_heads");
  if (n_layers < 2) raise(Errc::invalid_argument, "n_layers >= 2");
  if (vocab_size < 1) raise(Errc::invalid_argument, "vocab_size >= 1");
  if (max_seq_len < 2) raise(Errc::invalid_argument, "max_seq_len >= 2");
}

bool HiddenStates::all_finite() const {
  for (float v : data)
    if (!is_finite(v)) return false;
  return true;
}

// ---------------------------------------------------------------------------
// Initialization. Draw order is fixed (embeddings, blocks in order, final
// norm, head) so a seed pins every weight.

namespace {

void fill_normal(Rng& rng, std::vector<float>& v, std::size_t n, double stddev) {
  v.resize(n);
  for (auto& x : v) x = static_cast<float>(rng.normal(0.0, stddev));
}

void fill_const(std::vector<float>& v, std::size_t n, float value) {
  v.assign(n, value);
}

}  // namespace

ToyTransformer::ToyTransformer(const ModelConfig& config) : cfg(config) {
  cfg.validate();
  Rng rng(cfg.seed ^ 0x5356544dull);  // "MTVS"
  const std::size_t d = cfg.d_model;
  const double ws = 0.02;

  fill_normal(rng, w.tok_emb, static_cast<std::size_t>(cfg.vocab_size) * d, ws);
  fill_normal(rng, w.pos_emb, static_cast<std::size_t>(cfg.max_seq_len) * d, ws);
  w.blocks.resize(cfg.n_layers);
  for (auto& b : w.blocks) {
    fill_const(b.ln1_g, d, 1.0f);
    fill_const(b.ln1_b, d, 0.0f);
    fill_normal(rng, b.wq, d * d, ws);
    fill_const(b.bq, d, 0.0f);
    fill_normal(rng, b.wk, d * d, ws);
    fill_const(b.bk, d, 0.0f);
    fill_normal(rng, b.wv, d * d, ws);
    fill_const(b.bv, d, 0.0f);
    fill_normal(rng, b.wo, d * d, ws);
    fill_const(b.bo, d, 0.0f);
    fill_const(b.ln2_g, d, 1.0f);
    fill_const(b.ln2_b, d, 0.0f);
    fill_normal(rng, b.w1, 4 * d * d, ws);
    fill_const(b.b1, 4 * d, 0.0f);
    fill_normal(rng, b.w2, d * 4 * d, ws);
    fill_const(b.b2, d, 0.0f);
  }
  fill_const(w.lnf_g, d, 1.0f);
  fill_const(w.lnf_b, d, 0.0f);
  fill_normal(rng, w.lm_w, static_cast<std::size_t>(cfg.vocab_size) * d, ws);
  fill_const(w.lm_b, cfg.vocab_size, 0.0f);
}

// ---------------------------------------------------------------------------
// Decoder

struct Decoder::Impl {
  const ToyTransformer& model;
  const LayerHook* hook;
  int n = 0;
  std::vector<std::vector<float>> k_cache, v_cache;  // per layer [max_seq*d]
  std::vector<std::vector<float>> layer_out;         // per layer [d], last position
  std::vector<float> logits;
  std::vector<float> x, lnf_out;
  detail::BlockScratch scratch;

  Impl(const ToyTransformer& m, const LayerHook* h) : model(m), hook(h) {
    const auto& cfg = m.cfg;
    const std::size_t cap = static_cast<std::size_t>(cfg.max_seq_len) * cfg.d_model;
    k_cache.assign(cfg.n_layers, std::vector<float>(cap));
    v_cache.assign(cfg.n_layers, std::vector<float>(cap));
    layer_out.assign(cfg.n_layers, std::vector<float>(cfg.d_model));
    logits.resize(cfg.vocab_size);
    x.resize(cfg.d_model);
    lnf_out.resize(cfg.d_model);
    scratch.resize(cfg);
  }
};

Decoder::Decoder(const ToyTransformer& model, const LayerHook* hook)
    : impl_(std::make_unique<Impl>(model, hook)) {}
Decoder::~Decoder() = default;
Decoder::Decoder(Decoder&&) noexcept = default;
Decoder& Decoder::operator=(Decoder&&) noexcept = default;

int Decoder::pos() const { return impl_->n; }
const std::vector<float>& Decoder::last_logits() const { return impl_->logits; }

void Decoder::push(int token) {
  auto& im = *impl_;
  const auto& cfg = im.model.cfg;
  const int d = cfg.d_model;
  if (im.n >= cfg.max_seq_len)
    raise(Errc::sequence_too_long,
          "position " + std::to_string(im.n) + " exceeds max_seq_len " + std::to_string(cfg.max_seq_len));
  if (token < 0 || token >= cfg.vocab_size)
    raise(Errc::invalid_argument, "token id out of vocabulary: " + std::to_string(token));

  const float* te = im.model.w.tok_emb.data() + static_cast<std::size_t>(token) * d;
  const float* pe = im.model.w.pos_emb.data() + static_cast<std::size_t>(im.n) * d;
  for (int i = 0; i < d; ++i) im.x[i] = te[i] + pe[i];

  for (int li = 0; li < cfg.n_layers; ++li) {
    detail::block_position(cfg, im.model.w.blocks[li], im.n, im.x.data(), im.k_cache[li].data(),
                           im.v_cache[li].data(), im.x.data(), im.scratch);
    if (im.hook && im.hook->applies(li + 1, im.n))
      im.hook->fn(li + 1, im.n, std::span<float>(im.x.data(), d));
    std::copy(im.x.begin(), im.x.end(), im.layer_out[li].begin());
  }
  detail::final_logits(cfg, im.model.w, im.x.data(), im.lnf_out.data(), im.logits.data());
  ++im.n;
}

std::span<const float> Decoder::last_layer_out(int layer) const {
  return {impl_->layer_out.at(layer - 1).data(), static_cast<std::size_t>(impl_->model.cfg.d_model)};
}

int Decoder::argmax_last() const {
  const auto& logits = impl_->logits;
  int best = 0;
  for (int i = 1; i < static_cast<int>(logits.size()); ++i)
    if (logits[i] > logits[best]) best = i;
  return best;
}

// ---------------------------------------------------------------------------

ForwardOutput ToyTransformer::forward_collect(std::span<const int> tokens,
                                              const LayerHook* hook) const {
  if (tokens.empty()) raise(Errc::empty_input, "forward over empty token sequence");
  if (static_cast<int>(tokens.size()) > cfg.max_seq_len)
    raise(Errc::sequence_too_long, std::to_string(tokens.size()) + " tokens > max_seq_len");

  ForwardOutput out;
  out.states.n_layers = cfg.n_layers;
  out.states.seq_len = static_cast<int>(tokens.size());
  out.states.d = cfg.d_model;
  out.states.data.resize(static_cast<std::size_t>(cfg.n_layers) * tokens.size() * cfg.d_model);

  Decoder dec(*this, hook);
  for (std::size_t p = 0; p < tokens.size(); ++p) {
    dec.push(tokens[p]);
    for (int li = 1; li <= cfg.n_layers; ++li) {
      auto dst = out.states.at(li, static_cast<int>(p));
      auto src = dec.last_layer_out(li);
      std::copy(src.begin(), src.end(), dst.begin());
    }
  }
  out.logits = dec.last_logits();
  if (!out.states.all_finite())
    raise(Errc::non_finite_loss, "non-finite hidden state in forward pass");
  return out;
}

std::vector<int> ToyTransformer::generate(std::span<const int> prompt, const LayerHook* hook,
                                          int max_new) const {
  if (prompt.empty()) raise(Errc::empty_input, "empty prompt");
  if (max_new < 0) raise(Errc::invalid_argument, "max_new >= 0");
  if (static_cast<int>(prompt.size()) + max_new > cfg.max_seq_len)
    raise(Errc::sequence_too_long, "prompt + max_new exceeds max_seq_len");

  std::vector<int> out(prompt.begin(), prompt.end());
  if (max_new == 0) return out;
  Decoder dec(*this, hook);
  for (int t : prompt) dec.push(t);
  for (int step = 0; step < max_new; ++step) {
    const int next = dec.argmax_last();
    out.push_back(next);
    if (step + 1 < max_new) dec.push(next);
  }
  return out;
}

std::vector<float> ToyTransformer::apply_block(int layer, std::span<const float> states,
                                               int seq_len) const {
  if (layer < 1 || layer > cfg.n_layers) raise(Errc::invalid_argument, "layer out of range");
  if (static_cast<int>(states.size()) != seq_len * cfg.d_model)
    raise(Errc::shape_mismatch, "states size != seq_len * d_model");
  const int d = cfg.d_model;
  std::vector<float> out(states.size());
  std::vector<float> kc(static_cast<std::size_t>(seq_len) * d), vc(kc.size());
  detail::BlockScratch scratch;
  scratch.resize(cfg);
  for (int p = 0; p < seq_len; ++p) {
    detail::block_position(cfg, w.blocks[layer - 1], p, states.data() + static_cast<std::size_t>(p) * d,
                           kc.data(), vc.data(), out.data() + static_cast<std::size_t>(p) * d, scratch);
  }
  return out;
}

// ---------------------------------------------------------------------------
// Checkpoint format (STVM), little-endian:
//   magic "STVM" | version u32 | d u32 | n_layers u32 | n_heads u32
//   | vocab u32 | max_seq u32 | seed u64 | frozen u8 | n_tensors u32
//   | tensors (name: u32 len + bytes, rank u32, dims u64..., f32 data)
//   | crc32 u32 over all preceding bytes

namespace {
constexpr std::uint32_t kModelVersion = 1;
}  // namespace

namespace detail {

void for_each_tensor(const ModelConfig& cfg, Weights& w,
                     const std::function<void(const std::string&, std::vector<float>&,
                                              std::vector<std::uint64_t>)>& fn) {
  const std::uint64_t d = cfg.d_model;
  fn("tok_emb", w.tok_emb, {static_cast<std::uint64_t>(cfg.vocab_size), d});
  fn("pos_emb", w.pos_emb, {static_cast<std::uint64_t>(cfg.max_seq_len), d});
  for (int i = 0; i < cfg.n_layers; ++i) {
    auto& b = w.blocks[i];
    const std::string p = "blk" + std::to_string(i) + ".";
    fn(p + "ln1_g", b.ln1_g, {d});
    fn(p + "ln1_b", b.ln1_b, {d});
    fn(p + "wq", b.wq, {d, d});
    fn(p + "bq", b.bq, {d});
    fn(p + "wk", b.wk, {d, d});
    fn(p + "bk", b.bk, {d});
    fn(p + "wv", b.wv, {d, d});
    fn(p + "bv", b.bv, {d});
    fn(p + "wo", b.wo, {d, d});
    fn(p + "bo", b.bo, {d});
    fn(p + "ln2_g", b.ln2_g, {d});
    fn(p + "ln2_b", b.ln2_b, {d});
    fn(p + "w1", b.w1, {4 * d, d});
    fn(p + "b1", b.b1, {4 * d});
    fn(p + "w2", b.w2, {d, 4 * d});
    fn(p + "b2", b.b2, {d});
  }
  fn("lnf_g", w.lnf_g, {d});
  fn("lnf_b", w.lnf_b, {d});
  fn("lm_w", w.lm_w, {static_cast<std::uint64_t>(cfg.vocab_size), d});
  fn("lm_b", w.lm_b, {static_cast<std::uint64_t>(cfg.vocab_size)});
}

}  // namespace detail

using detail::for_each_tensor;

Digest256 ToyTransformer::weight_hash() const {
  DigestBuilder db;
  db.update_u32(cfg.d_model);
  db.update_u32(cfg.n_layers);
  db.update_u32(cfg.n_heads);
  db.update_u32(cfg.vocab_size);
  db.update_u32(cfg.max_seq_len);
  for_each_tensor(cfg, const_cast<Weights&>(w),
                  [&](const std::string& name, std::vector<float>& t, std::vector<std::uint64_t>) {
                    db.update_str(name);
                    db.update_f32(t);
                  });
  return db.finish();
}

void ToyTransformer::save(const std::filesystem::path& path) const {
  BinaryWriter out;
  out.bytes("STVM", 4);
  out.u32(kModelVersion);
  out.u32(cfg.d_model);
  out.u32(cfg.n_layers);
  out.u32(cfg.n_heads);
  out.u32(cfg.vocab_size);
  out.u32(cfg.max_seq_len);
  out.u64(cfg.seed);
  out.u8(frozen ? 1 : 0);

  int count = 0;
  for_each_tensor(cfg, const_cast<Weights&>(w),
                  [&](const std::string&, std::vector<float>&, std::vector<std::uint64_t>) { ++count; });
  out.u32(count);
  for_each_tensor(cfg, const_cast<Weights&>(w),
                  [&](const std::string& name, std::vector<float>& t, std::vector<std::uint64_t> dims) {
                    out.str(name);
                    out.u32(static_cast<std::uint32_t>(dims.size()));
                    for (auto dim : dims) out.u64(dim);
                    out.f32s(t);
                  });
  out.finish_crc32();
  atomic_write_file(path, out.data());
}

ToyTransformer ToyTransformer::load(const std::filesystem::path& path) {
  const std::string data = read_file(path);
  BinaryReader in(data);
  in.check_crc32();
  in.strip_crc32();

  char magic[4];
  in.bytes(magic, 4);
  if (std::memcmp(magic, "STVM", 4) != 0) raise(Errc::corrupt_file, "bad magic in " + path.string());
  const auto version = in.u32();
  if (version != kModelVersion)
    raise(Errc::version_mismatch, "model file version " + std::to_string(version));

  ModelConfig cfg;
  cfg.d_model = static_cast<int>(in.u32());
  cfg.n_layers = static_cast<int>(in.u32());
  cfg.n_heads = static_cast<int>(in.u32());
  cfg.vocab_size = static_cast<int>(in.u32());
  cfg.max_seq_len = static_cast<int>(in.u32());
  cfg.seed = in.u64();
  const bool frozen = in.u8() != 0;

  ToyTransformer model(cfg);
  const auto n_tensors = in.u32();
  for (std::uint32_t i = 0; i < n_tensors; ++i) {
    const std::string name = in.str();
    const auto rank = in.u32();
    std::uint64_t numel = 1;
    for (std::uint32_t r = 0; r < rank; ++r) numel *= in.u64();
    bool found = false;
    for_each_tensor(cfg, model.w,
                    [&](const std::string& tname, std::vector<float>& t, std::vector<std::uint64_t>) {
                      if (tname != name) return;
                      if (t.size() != numel) raise(Errc::corrupt_file, "tensor size mismatch: " + name);
                      in.f32s(t);
                      found = true;
                    });
    if (!found) raise(Errc::corrupt_file, "unknown tensor: " + name);
  }
  model.frozen = frozen;
  return model;
}

}  // namespace steervec
