#include "steervec/vectors.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>

namespace steervec {

std::size_t LanguageVectorBank::language_index(std::string_view code) const {
  for (std::size_t i = 0; i < languages.size(); ++i)
    if (languages[i].code == code) return i;
  raise(Errc::unknown_language, std::string(code));
}

bool LanguageVectorBank::has_language(std::string_view code) const {
  for (const auto& lang : languages)
    if (lang.code == code) return true;
  return false;
}

std::span<const float> LanguageVectorBank::v_of(std::size_t lang, int layer) const {
  const std::size_t off =
      (lang * n_layers + static_cast<std::size_t>(layer - 1)) * d_model;
  return {v.data() + off, static_cast<std::size_t>(d_model)};
}

std::span<float> LanguageVectorBank::v_of(std::size_t lang, int layer) {
  const std::size_t off =
      (lang * n_layers + static_cast<std::size_t>(layer - 1)) * d_model;
  return {v.data() + off, static_cast<std::size_t>(d_model)};
}

// ---------------------------------------------------------------------------

std::vector<float> compute_language_vector(const ToyTransformer& model,
                                           std::span<const std::vector<int>> slice,
                                           std::span<const std::string> ids, int threads) {
  if (slice.empty()) raise(Errc::empty_slice, "language slice is empty");
  for (std::size_t s = 0; s < slice.size(); ++s) {
    if (slice[s].size() < 2) {
      const std::string id = s < ids.size() ? ids[s] : ("#" + std::to_string(s));
      raise(Errc::degenerate_sample, id + " has fewer than 2 tokens");
    }
  }
  const int n_layers = model.cfg.n_layers;
  const int d = model.cfg.d_model;
  const std::size_t ld = static_cast<std::size_t>(n_layers) * d;

  // nested mean: per-sample position mean first, then the mean over samples.
  // 64-bit accumulators throughout; stored state is f32.
  std::vector<std::vector<double>> sample_means(slice.size());
  parallel_for(slice.size(), threads, [&](std::size_t s) {
    const auto out = model.forward_collect(slice[s], nullptr);
    auto& mean = sample_means[s];
    mean.assign(ld, 0.0);
    const int P = static_cast<int>(slice[s].size());
    for (int layer = 1; layer <= n_layers; ++layer) {
      double* acc = mean.data() + static_cast<std::size_t>(layer - 1) * d;
      for (int p = 1; p < P; ++p) {  // first position excluded
        const auto h = out.states.at(layer, p);
        for (int i = 0; i < d; ++i) acc[i] += h[i];
      }
      const double inv = 1.0 / (P - 1);
      for (int i = 0; i < d; ++i) acc[i] *= inv;
    }
  });

  std::vector<double> total(ld, 0.0);
  for (const auto& mean : sample_means)
    for (std::size_t i = 0; i < ld; ++i) total[i] += mean[i];
  const double inv = 1.0 / static_cast<double>(slice.size());
  std::vector<float> result(ld);
  for (std::size_t i = 0; i < ld; ++i) result[i] = static_cast<float>(total[i] * inv);
  return result;
}

std::vector<float> nested_position_mean(
    const std::vector<std::vector<std::vector<float>>>& states) {
  if (states.empty()) raise(Errc::empty_slice, "no samples");
  const std::size_t d = states.front().empty() ? 0 : states.front().front().size();
  std::vector<double> total(d, 0.0);
  for (const auto& sample : states) {
    if (sample.empty()) raise(Errc::degenerate_sample, "sample with no counted positions");
    std::vector<double> mean(d, 0.0);
    for (const auto& pos : sample) {
      if (pos.size() != d) raise(Errc::shape_mismatch, "ragged state dimensions");
      for (std::size_t i = 0; i < d; ++i) mean[i] += pos[i];
    }
    for (std::size_t i = 0; i < d; ++i) total[i] += mean[i] / static_cast<double>(sample.size());
  }
  std::vector<float> out(d);
  for (std::size_t i = 0; i < d; ++i)
    out[i] = static_cast<float>(total[i] / static_cast<double>(states.size()));
  return out;
}

LanguageVectorBank build_bank(const ToyTransformer& model, const ParallelCorpus& corpus,
                              int threads) {
  if (corpus.n_languages() < 2)
    raise(Errc::insufficient_languages, "bank requires a multi-parallel corpus with >= 2 languages");
  LanguageVectorBank bank;
  bank.languages = corpus.languages();
  bank.n_layers = model.cfg.n_layers;
  bank.d_model = model.cfg.d_model;
  bank.model_hash = model.weight_hash();
  bank.corpus_hash = corpus.content_digest();
  bank.exclusion_policy = 1;
  bank.v.resize(bank.languages.size() * static_cast<std::size_t>(bank.n_layers) * bank.d_model);
  bank.samples_used.assign(bank.languages.size(), corpus.n_samples());

  for (std::size_t l = 0; l < bank.languages.size(); ++l) {
    const auto slice = corpus.slice_tokens(bank.languages[l].code);
    const auto vec = compute_language_vector(model, slice, corpus.sample_ids(), threads);
    std::copy(vec.begin(), vec.end(),
              bank.v.begin() + static_cast<std::ptrdiff_t>(l * vec.size()));
  }
  return bank;
}

std::vector<float> content_vector(const LanguageVectorBank& bank, int layer) {
  if (bank.languages.empty()) raise(Errc::empty_slice, "empty bank");
  if (layer < 1 || layer > bank.n_layers) raise(Errc::invalid_argument, "layer out of range");
  std::vector<double> acc(bank.d_model, 0.0);
  for (std::size_t l = 0; l < bank.languages.size(); ++l) {
    const auto vl = bank.v_of(l, layer);
    for (int i = 0; i < bank.d_model; ++i) acc[i] += vl[i];
  }
  const double inv = 1.0 / static_cast<double>(bank.languages.size());
  std::vector<float> c(bank.d_model);
  for (int i = 0; i < bank.d_model; ++i) c[i] = static_cast<float>(acc[i] * inv);
  return c;
}

std::vector<float> language_representation(const LanguageVectorBank& bank, std::string_view code,
                                           int layer) {
  const std::size_t li = bank.language_index(code);
  const auto c = content_vector(bank, layer);
  const auto vl = bank.v_of(li, layer);
  std::vector<float> r(bank.d_model);
  for (int i = 0; i < bank.d_model; ++i) r[i] = vl[i] - c[i];
  return r;
}

std::vector<float> language_representation_all(const LanguageVectorBank& bank,
                                               std::string_view code) {
  std::vector<float> out;
  out.reserve(static_cast<std::size_t>(bank.n_layers) * bank.d_model);
  for (int layer = 1; layer <= bank.n_layers; ++layer) {
    const auto r = language_representation(bank, code, layer);
    out.insert(out.end(), r.begin(), r.end());
  }
  return out;
}

LanguageVectorBank add_language(const LanguageVectorBank& bank, const ToyTransformer& model,
                                const LanguageTag& lang, std::span<const std::vector<int>> slice,
                                std::span<const std::string> ids, int threads) {
  if (bank.has_language(lang.code)) raise(Errc::duplicate_language, lang.code);
  if (!(model.weight_hash() == bank.model_hash))
    raise(Errc::model_mismatch, "bank was built from a different model");

  LanguageVectorBank out = bank;  // existing v entries copied bitwise
  const auto vec = compute_language_vector(model, slice, ids, threads);
  out.languages.push_back(lang);
  out.samples_used.push_back(slice.size());
  out.v.insert(out.v.end(), vec.begin(), vec.end());
  // chain the provenance digest with the new slice
  DigestBuilder db;
  db.update(bank.corpus_hash.bytes.data(), bank.corpus_hash.bytes.size());
  db.update_str(lang.code);
  for (const auto& seq : slice) {
    db.update_u64(seq.size());
    for (int t : seq) db.update_u32(static_cast<std::uint32_t>(t));
  }
  out.corpus_hash = db.finish();
  return out;
}

// ---------------------------------------------------------------------------
// Bank file (STVB), little-endian; layout documented in docs/FORMATS.md:
//   magic "STVB" | version u32 | model hash 32B | corpus hash 32B
//   | exclusion u32 | n_layers u32 | d u32 | n_languages u32
//   | per language: code (u32 len + bytes), script u32, range lo/hi u64,
//     samples_used u64
//   | per language, per layer: d * f32
//   | crc32 u32

namespace {
constexpr std::uint32_t kBankVersion = 1;
}

void save_bank(const LanguageVectorBank& bank, const std::filesystem::path& path) {
  BinaryWriter out;
  out.bytes("STVB", 4);
  out.u32(kBankVersion);
  out.bytes(bank.model_hash.bytes.data(), 32);
  out.bytes(bank.corpus_hash.bytes.data(), 32);
  out.u32(bank.exclusion_policy);
  out.u32(bank.n_layers);
  out.u32(bank.d_model);
  out.u32(static_cast<std::uint32_t>(bank.languages.size()));
  for (std::size_t l = 0; l < bank.languages.size(); ++l) {
    const auto& lang = bank.languages[l];
    out.str(lang.code);
    out.u32(static_cast<std::uint32_t>(lang.script));
    out.u64(lang.range.lo);
    out.u64(lang.range.hi);
    out.u64(l < bank.samples_used.size() ? bank.samples_used[l] : 0);
  }
  out.f32s(bank.v);
  out.finish_crc32();
  atomic_write_file(path, out.data());
}

LanguageVectorBank load_bank(const std::filesystem::path& path) {
  const std::string data = read_file(path);
  BinaryReader in(data);
  in.check_crc32();
  in.strip_crc32();
  char magic[4];
  in.bytes(magic, 4);
  if (std::memcmp(magic, "STVB", 4) != 0) raise(Errc::corrupt_file, "bad magic in " + path.string());
  const auto version = in.u32();
  if (version != kBankVersion)
    raise(Errc::version_mismatch, "bank file version " + std::to_string(version));

  LanguageVectorBank bank;
  in.bytes(bank.model_hash.bytes.data(), 32);
  in.bytes(bank.corpus_hash.bytes.data(), 32);
  bank.exclusion_policy = in.u32();
  bank.n_layers = static_cast<int>(in.u32());
  bank.d_model = static_cast<int>(in.u32());
  const auto n_langs = in.u32();
  for (std::uint32_t l = 0; l < n_langs; ++l) {
    LanguageTag tag;
    tag.code = in.str();
    tag.script = static_cast<Script>(in.u32());
    tag.range.lo = static_cast<std::uint32_t>(in.u64());
    tag.range.hi = static_cast<std::uint32_t>(in.u64());
    bank.samples_used.push_back(in.u64());
    bank.languages.push_back(std::move(tag));
  }
  bank.v.resize(static_cast<std::size_t>(n_langs) * bank.n_layers * bank.d_model);
  in.f32s(bank.v);
  if (in.remaining() != 0) raise(Errc::corrupt_file, "trailing bytes in " + path.string());
  return bank;
}

// ---------------------------------------------------------------------------
// Positional variant

std::size_t PositionalBank::language_index(std::string_view code) const {
  for (std::size_t i = 0; i < languages.size(); ++i)
    if (languages[i].code == code) return i;
  raise(Errc::unknown_language, std::string(code));
}

std::span<const float> PositionalBank::v_of(std::size_t lang, int layer, int bucket) const {
  const std::size_t off =
      ((lang * n_layers + static_cast<std::size_t>(layer - 1)) * max_positions + bucket) * d_model;
  return {v.data() + off, static_cast<std::size_t>(d_model)};
}

std::vector<float> PositionalBank::representation(std::size_t lang, int layer, int bucket) const {
  std::vector<double> c(d_model, 0.0);
  for (std::size_t l = 0; l < languages.size(); ++l) {
    const auto vl = v_of(l, layer, bucket);
    for (int i = 0; i < d_model; ++i) c[i] += vl[i];
  }
  const double inv = 1.0 / static_cast<double>(languages.size());
  const auto vl = v_of(lang, layer, bucket);
  std::vector<float> r(d_model);
  for (int i = 0; i < d_model; ++i)
    r[i] = vl[i] - static_cast<float>(c[i] * inv);
  return r;
}

PositionalBank build_positional_bank(const ToyTransformer& model, const ParallelCorpus& corpus,
                                     int max_positions, int threads) {
  if (max_positions < 1) raise(Errc::invalid_argument, "max_positions >= 1");
  if (corpus.n_languages() < 2) raise(Errc::insufficient_languages, ">= 2 languages required");
  const int n_layers = model.cfg.n_layers;
  const int d = model.cfg.d_model;

  PositionalBank bank;
  bank.languages = corpus.languages();
  bank.n_layers = n_layers;
  bank.d_model = d;
  bank.max_positions = max_positions;
  bank.model_hash = model.weight_hash();
  bank.v.assign(bank.languages.size() * static_cast<std::size_t>(n_layers) * max_positions * d, 0.0f);
  bank.bucket_counts.assign(max_positions, 0);

  const std::size_t per_lang = static_cast<std::size_t>(n_layers) * max_positions * d;
  for (std::size_t l = 0; l < bank.languages.size(); ++l) {
    const auto slice = corpus.slice_tokens(bank.languages[l].code);
    std::vector<double> acc(per_lang, 0.0);
    std::vector<std::uint64_t> counts(max_positions, 0);
    std::vector<std::vector<float>> states(slice.size());
    parallel_for(slice.size(), threads, [&](std::size_t s) {
      if (slice[s].size() < 2) raise(Errc::degenerate_sample, "sample with fewer than 2 tokens");
      const auto out = model.forward_collect(slice[s], nullptr);
      states[s] = out.states.data;  // [layer][pos][d]
    });
    for (std::size_t s = 0; s < slice.size(); ++s) {
      const int P = static_cast<int>(slice[s].size());
      for (int bucket = 0; bucket < max_positions; ++bucket) {
        const int pos = bucket + 1;  // 0-based; global position bucket+2
        if (pos >= P) continue;
        counts[bucket] += 1;
        for (int layer = 1; layer <= n_layers; ++layer) {
          const float* h =
              states[s].data() + (static_cast<std::size_t>(layer - 1) * P + pos) * d;
          double* a = acc.data() +
                      (static_cast<std::size_t>(layer - 1) * max_positions + bucket) * d;
          for (int i = 0; i < d; ++i) a[i] += h[i];
        }
      }
    }
    for (int bucket = 0; bucket < max_positions; ++bucket) {
      if (counts[bucket] == 0)
        raise(Errc::empty_position_bucket,
              "no sample reaches position " + std::to_string(bucket + 2));
      const double inv = 1.0 / static_cast<double>(counts[bucket]);
      for (int layer = 1; layer <= n_layers; ++layer) {
        double* a =
            acc.data() + (static_cast<std::size_t>(layer - 1) * max_positions + bucket) * d;
        float* dst = bank.v.data() + l * per_lang +
                     (static_cast<std::size_t>(layer - 1) * max_positions + bucket) * d;
        for (int i = 0; i < d; ++i) dst[i] = static_cast<float>(a[i] * inv);
      }
    }
    if (l == 0) bank.bucket_counts.assign(counts.begin(), counts.end());
  }
  return bank;
}

// STVP file: STVB layout with a max_positions field and bucketed data.
namespace {
constexpr std::uint32_t kPositionalVersion = 1;
}

void save_positional_bank(const PositionalBank& bank, const std::filesystem::path& path) {
  BinaryWriter out;
  out.bytes("STVP", 4);
  out.u32(kPositionalVersion);
  out.bytes(bank.model_hash.bytes.data(), 32);
  out.u32(bank.n_layers);
  out.u32(bank.d_model);
  out.u32(bank.max_positions);
  out.u32(static_cast<std::uint32_t>(bank.languages.size()));
  for (const auto& lang : bank.languages) {
    out.str(lang.code);
    out.u32(static_cast<std::uint32_t>(lang.script));
    out.u64(lang.range.lo);
    out.u64(lang.range.hi);
  }
  for (auto c : bank.bucket_counts) out.u64(c);
  out.f32s(bank.v);
  out.finish_crc32();
  atomic_write_file(path, out.data());
}

PositionalBank load_positional_bank(const std::filesystem::path& path) {
  const std::string data = read_file(path);
  BinaryReader in(data);
  in.check_crc32();
  in.strip_crc32();
  char magic[4];
  in.bytes(magic, 4);
  if (std::memcmp(magic, "STVP", 4) != 0) raise(Errc::corrupt_file, "bad magic in " + path.string());
  if (in.u32() != kPositionalVersion) raise(Errc::version_mismatch, "positional bank version");
  PositionalBank bank;
  in.bytes(bank.model_hash.bytes.data(), 32);
  bank.n_layers = static_cast<int>(in.u32());
  bank.d_model = static_cast<int>(in.u32());
  bank.max_positions = static_cast<int>(in.u32());
  const auto n_langs = in.u32();
  for (std::uint32_t l = 0; l < n_langs; ++l) {
    LanguageTag tag;
    tag.code = in.str();
    tag.script = static_cast<Script>(in.u32());
    tag.range.lo = static_cast<std::uint32_t>(in.u64());
    tag.range.hi = static_cast<std::uint32_t>(in.u64());
    bank.languages.push_back(std::move(tag));
  }
  bank.bucket_counts.resize(bank.max_positions);
  for (auto& c : bank.bucket_counts) c = in.u64();
  bank.v.resize(static_cast<std::size_t>(n_langs) * bank.n_layers * bank.max_positions *
                bank.d_model);
  in.f32s(bank.v);
  if (in.remaining() != 0) raise(Errc::corrupt_file, "trailing bytes in " + path.string());
  return bank;
}

}  // namespace steervec
