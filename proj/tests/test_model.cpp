#include <cmath>

#include "doctest.h"
#include "helpers.hpp"
#include "steervec/model.hpp"
#include "steervec/steering.hpp"

namespace sv = steervec;
using testutil::temp_path;
using testutil::tiny_world;

namespace {

sv::LayerHook add_vector_hook(int n_layers, int layer, std::vector<float> u) {
  sv::LayerHook hook;
  hook.active.assign(n_layers + 1, 0);
  if (layer >= 1) hook.active[layer] = 1;
  hook.fn = [u = std::move(u)](int, int, std::span<float> h) {
    for (std::size_t i = 0; i < h.size(); ++i) h[i] += u[i];
  };
  return hook;
}

std::vector<int> sample_tokens(int seed, int len, int vocab) {
  sv::Rng rng(seed);
  std::vector<int> tokens(len);
  for (auto& t : tokens) t = static_cast<int>(rng.uniform_int(0, vocab - 1));
  return tokens;
}

}  // namespace

TEST_CASE("identity hook reproduces the unhooked forward bitwise") {
  const auto& world = tiny_world();
  const auto tokens = world.train.token_cell(0, 0);

  sv::LayerHook identity;
  identity.active.assign(world.model.cfg.n_layers + 1, 1);
  identity.fn = [](int, int, std::span<float>) {};

  const auto plain = world.model.forward_collect(tokens, nullptr);
  const auto hooked = world.model.forward_collect(tokens, &identity);
  CHECK(plain.states.data == hooked.states.data);
  CHECK(plain.logits == hooked.logits);
}

TEST_CASE("hook causality: a layer-2 rewrite leaves layer-1 states untouched") {
  const auto& world = tiny_world();
  const auto tokens = world.train.token_cell(1, 1);
  const int d = world.model.cfg.d_model;

  auto hook = add_vector_hook(world.model.cfg.n_layers, 2, std::vector<float>(d, 0.25f));
  const auto plain = world.model.forward_collect(tokens, nullptr);
  const auto hooked = world.model.forward_collect(tokens, &hook);

  for (int p = 0; p < plain.states.seq_len; ++p) {
    const auto a = plain.states.at(1, p);
    const auto b = hooked.states.at(1, p);
    CHECK(std::equal(a.begin(), a.end(), b.begin()));
  }
}

TEST_CASE("a layer-1 rewrite changes every later layer") {
  const auto& world = tiny_world();
  const auto tokens = world.train.token_cell(2, 0);
  const int d = world.model.cfg.d_model;

  auto hook = add_vector_hook(world.model.cfg.n_layers, 1, std::vector<float>(d, 0.5f));
  const auto plain = world.model.forward_collect(tokens, nullptr);
  const auto hooked = world.model.forward_collect(tokens, &hook);

  for (int layer = 2; layer <= world.model.cfg.n_layers; ++layer) {
    bool differs = false;
    for (int p = 1; p < plain.states.seq_len && !differs; ++p) {
      const auto a = plain.states.at(layer, p);
      const auto b = hooked.states.at(layer, p);
      differs = !std::equal(a.begin(), a.end(), b.begin());
    }
    CHECK(differs);
  }
}

TEST_CASE("hook exclusion skips global position 1") {
  const auto& world = tiny_world();
  const auto tokens = world.train.token_cell(3, 0);
  const int d = world.model.cfg.d_model;
  auto hook = add_vector_hook(world.model.cfg.n_layers, 1, std::vector<float>(d, 1.0f));
  hook.exclude_first = true;
  const auto plain = world.model.forward_collect(tokens, nullptr);
  const auto hooked = world.model.forward_collect(tokens, &hook);
  const auto a = plain.states.at(1, 0);
  const auto b = hooked.states.at(1, 0);
  CHECK(std::equal(a.begin(), a.end(), b.begin()));
  const auto c = plain.states.at(1, 1);
  const auto e = hooked.states.at(1, 1);
  CHECK(!std::equal(c.begin(), c.end(), e.begin()));
}

TEST_CASE("generate with max_new 0 returns the prompt") {
  const auto& world = tiny_world();
  const std::vector<int> prompt = {1, 2, 3};
  CHECK(world.model.generate(prompt, nullptr, 0) == prompt);
}

TEST_CASE("greedy generation is deterministic") {
  const auto& world = tiny_world();
  const auto prompt = world.held.token_cell(0, 0);
  const auto a = world.model.generate(prompt, nullptr, 8);
  const auto b = world.model.generate(prompt, nullptr, 8);
  CHECK(a == b);
}

TEST_CASE("cached decoding matches a cache-free re-forward per step") {
  const auto& world = tiny_world();
  std::vector<int> prompt(world.held.token_cell(1, 0).begin(),
                          world.held.token_cell(1, 0).begin() + 4);
  const int max_new = 8;
  const auto fast = world.model.generate(prompt, nullptr, max_new);

  // oracle: rebuild the whole sequence from scratch at every step and take
  // the argmax of the final-position logits
  std::vector<int> slow = prompt;
  for (int step = 0; step < max_new; ++step) {
    const auto out = world.model.forward_collect(slow, nullptr);
    int best = 0;
    for (std::size_t v = 1; v < out.logits.size(); ++v)
      if (out.logits[v] > out.logits[best]) best = static_cast<int>(v);
    slow.push_back(best);
  }
  CHECK(fast == slow);
}

TEST_CASE("sequence length limits are enforced") {
  const auto& world = tiny_world();
  std::vector<int> long_prompt(world.model.cfg.max_seq_len + 1, 1);
  CHECK_THROWS_AS(world.model.forward_collect(long_prompt, nullptr), sv::Error);
  std::vector<int> prompt(world.model.cfg.max_seq_len - 2, 1);
  CHECK_THROWS_AS(world.model.generate(prompt, nullptr, 8), sv::Error);
}

TEST_CASE("apply_block recomputes a block from explicit inputs") {
  const auto& world = tiny_world();
  const auto tokens = world.train.token_cell(4, 2);
  const int d = world.model.cfg.d_model;
  const auto out = world.model.forward_collect(tokens, nullptr);
  const int P = out.states.seq_len;

  // feed layer-1 outputs back through block 2; must equal recorded layer-2
  std::vector<float> layer1(static_cast<std::size_t>(P) * d);
  for (int p = 0; p < P; ++p) {
    const auto src = out.states.at(1, p);
    std::copy(src.begin(), src.end(), layer1.begin() + static_cast<std::size_t>(p) * d);
  }
  const auto redone = world.model.apply_block(2, layer1, P);
  for (int p = 0; p < P; ++p) {
    const auto expect = out.states.at(2, p);
    for (int i = 0; i < d; ++i)
      CHECK(redone[static_cast<std::size_t>(p) * d + i] == expect[i]);
  }
}

TEST_CASE("pretraining reduces the loss and freezes the model") {
  const auto& world = tiny_world();
  (void)world;  // fixture itself asserts nothing; re-run a minimal pretrain
  sv::SyntheticSpec spec;
  spec.n_languages = 2;
  spec.content_alphabet = 12;
  spec.samples = 60;
  spec.min_len = 5;
  spec.max_len = 8;
  spec.seed = 21;
  const auto synth = sv::generate_synthetic_corpus(spec);
  sv::ModelConfig cfg;
  cfg.d_model = 16;
  cfg.n_layers = 2;
  cfg.n_heads = 2;
  cfg.vocab_size = synth.corpus.vocab_size();
  cfg.max_seq_len = 16;
  cfg.seed = 9;
  const auto result = sv::pretrain_toy(cfg, synth.corpus, {2, 2e-3f, 8, 9});
  CHECK(result.final_loss < result.initial_loss);
  CHECK(result.model.frozen);
}

TEST_CASE("zero learning rate leaves the loss unchanged") {
  sv::SyntheticSpec spec;
  spec.n_languages = 2;
  spec.content_alphabet = 10;
  spec.samples = 30;
  spec.min_len = 4;
  spec.max_len = 6;
  spec.seed = 4;
  const auto synth = sv::generate_synthetic_corpus(spec);
  sv::ModelConfig cfg;
  cfg.d_model = 16;
  cfg.n_layers = 2;
  cfg.n_heads = 2;
  cfg.vocab_size = synth.corpus.vocab_size();
  cfg.max_seq_len = 8;
  cfg.seed = 1;
  const auto result = sv::pretrain_toy(cfg, synth.corpus, {1, 0.0f, 8, 1});
  CHECK(result.final_loss == result.initial_loss);
}

TEST_CASE("trained model keeps generating in the prompt language") {
  const auto& world = tiny_world();
  const auto& corpus = world.held;
  long in_range = 0, total = 0;
  for (std::size_t l = 0; l < corpus.n_languages(); ++l) {
    const auto range = corpus.languages()[l].range;
    for (std::size_t s = 0; s < corpus.n_samples(); ++s) {
      const auto& cell = corpus.token_cell(s, l);
      std::vector<int> prompt(cell.begin(), cell.begin() + 4);
      const auto out = world.model.generate(prompt, nullptr, 8);
      for (std::size_t i = prompt.size(); i < out.size(); ++i) {
        ++total;
        if (range.contains(out[i])) ++in_range;
      }
    }
  }
  CHECK(static_cast<double>(in_range) / static_cast<double>(total) >= 0.8);
}

TEST_CASE("checkpoint save/load round-trips bitwise") {
  const auto& world = tiny_world();
  const auto path = temp_path("model.stvm");
  world.model.save(path);
  const auto loaded = sv::ToyTransformer::load(path);
  CHECK(loaded.cfg.d_model == world.model.cfg.d_model);
  CHECK(loaded.frozen == world.model.frozen);
  CHECK(loaded.w.tok_emb == world.model.w.tok_emb);
  CHECK(loaded.w.blocks[0].w1 == world.model.w.blocks[0].w1);
  CHECK(loaded.weight_hash() == world.model.weight_hash());
}

TEST_CASE("truncated checkpoint is rejected") {
  const auto& world = tiny_world();
  const auto path = temp_path("model_trunc.stvm");
  world.model.save(path);
  auto data = sv::read_file(path);
  data.resize(data.size() / 2);
  sv::atomic_write_file(path, data);
  try {
    sv::ToyTransformer::load(path);
    FAIL("expected CorruptFile");
  } catch (const sv::Error& e) {
    CHECK(e.code() == sv::Errc::corrupt_file);
  }
}

TEST_CASE("seeded construction is reproducible") {
  sv::ModelConfig cfg;
  cfg.d_model = 16;
  cfg.n_layers = 2;
  cfg.n_heads = 2;
  cfg.vocab_size = 40;
  cfg.max_seq_len = 12;
  cfg.seed = 77;
  const auto first = sv::ToyTransformer(cfg).weight_hash();
  CHECK(sv::ToyTransformer(cfg).weight_hash() == first);
  cfg.seed = 78;
  CHECK(!(sv::ToyTransformer(cfg).weight_hash() == first));
}

// ---------------------------------------------------------------------------
// steering-parameter gradients

namespace {

sv::SteeredSequence make_sequence(const testutil::TinyWorld& world, std::size_t sample,
                                  const std::string& source, const std::string& target) {
  sv::SteeredSequence seq;
  const auto src = world.train.token_cell(sample, world.train.language_index(source));
  const auto tgt = world.train.token_cell(sample, world.train.language_index(target));
  const int split = static_cast<int>(src.size()) / 2;
  seq.tokens.assign(src.begin(), src.begin() + split);
  seq.tokens.insert(seq.tokens.end(), tgt.begin() + split, tgt.end());
  seq.loss_start = split;
  seq.r_target = sv::language_representation_all(world.bank, target);
  seq.r_source = sv::language_representation_all(world.bank, source);
  return seq;
}

}  // namespace

TEST_CASE("zero B gates the gradient of A") {
  const auto& world = tiny_world();
  auto params = sv::LearnedSteering::init(world.model.cfg.d_model, world.model.cfg.n_layers, 4,
                                          1.0f, 0.9f, 3);
  std::vector<sv::SteeredSequence> batch = {make_sequence(world, 0, "syn0", "syn1"),
                                            make_sequence(world, 1, "syn1", "syn2")};
  const auto grads = sv::grad_steering_params(world.model, batch, params, true);
  for (int li = 0; li < params.n_layers; ++li) {
    for (float g : grads.a[li]) CHECK(std::fabs(g) < 1e-9);
    bool any_b = false;
    for (float g : grads.b[li]) any_b |= g != 0.0f;
    CHECK(any_b);  // B receives signal even at zero init
  }
}

TEST_CASE("analytic gradients match central differences") {
  const auto& world = tiny_world();
  auto params = sv::LearnedSteering::init(world.model.cfg.d_model, world.model.cfg.n_layers, 4,
                                          1.0f, 0.9f, 13);
  // make both A and B generic
  sv::Rng rng(31);
  for (auto& mat : params.b)
    for (auto& x : mat) x = static_cast<float>(rng.normal(0.0, 0.3));

  std::vector<sv::SteeredSequence> batch = {make_sequence(world, 2, "syn0", "syn2"),
                                            make_sequence(world, 3, "syn2", "syn2")};
  const auto analytic = sv::grad_steering_params(world.model, batch, params, true);
  auto scale_of = [&](int li, bool in_a) {
    double mx = 0.0;
    for (float g : in_a ? analytic.a[li] : analytic.b[li])
      mx = std::max(mx, static_cast<double>(std::fabs(g)));
    return mx;
  };

  sv::Rng pick(7);
  double max_rel = 0.0;
  for (int trial = 0; trial < 24; ++trial) {
    const int li = static_cast<int>(pick.uniform_int(0, params.n_layers - 1));
    const bool in_a = trial % 2 == 0;
    auto& mat = in_a ? params.a[li] : params.b[li];
    const auto idx =
        static_cast<std::size_t>(pick.uniform_int(0, static_cast<std::int64_t>(mat.size()) - 1));
    const float eps = 1e-3f;
    const float saved = mat[idx];
    mat[idx] = saved + eps;
    const double up = sv::steering_loss(world.model, batch, params, true);
    mat[idx] = saved - eps;
    const double down = sv::steering_loss(world.model, batch, params, true);
    mat[idx] = saved;
    const double fd = (up - down) / (2.0 * eps);
    const double an = in_a ? analytic.a[li][idx] : analytic.b[li][idx];
    const double rel =
        std::fabs(an - fd) / std::max({std::fabs(an), std::fabs(fd), scale_of(li, in_a), 1e-8});
    max_rel = std::max(max_rel, rel);
  }
  CHECK(max_rel <= 1e-3);
}

TEST_CASE("base weights receive no gradient (API exposes only A and B)") {
  const auto& world = tiny_world();
  auto params = sv::LearnedSteering::init(world.model.cfg.d_model, world.model.cfg.n_layers, 2,
                                          1.0f, 0.9f, 3);
  std::vector<sv::SteeredSequence> batch = {make_sequence(world, 4, "syn0", "syn1")};
  const auto before = world.model.w.tok_emb;
  const auto grads = sv::grad_steering_params(world.model, batch, params, false);
  CHECK(grads.a.size() == static_cast<std::size_t>(params.n_layers));
  CHECK(grads.b.size() == static_cast<std::size_t>(params.n_layers));
  CHECK(world.model.w.tok_emb == before);  // frozen weights untouched
}

TEST_CASE("unfrozen model is rejected by the steering gradient path") {
  sv::ModelConfig cfg;
  cfg.d_model = 16;
  cfg.n_layers = 2;
  cfg.n_heads = 2;
  cfg.vocab_size = 30;
  cfg.max_seq_len = 12;
  sv::ToyTransformer model(cfg);  // not frozen
  auto params = sv::LearnedSteering::init(16, 2, 2, 1.0f, 0.9f, 3);
  sv::SteeredSequence seq;
  seq.tokens = {1, 2, 3, 4};
  seq.loss_start = 2;
  seq.r_target.assign(2 * 16, 0.1f);
  seq.r_source.assign(2 * 16, -0.1f);
  std::vector<sv::SteeredSequence> batch = {seq};
  CHECK_THROWS_AS(sv::grad_steering_params(model, batch, params, true), sv::Error);
}
