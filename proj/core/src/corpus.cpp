#include "steervec/corpus.hpp"

#include <algorithm>
#include <cmath>
#include <set>
#include <sstream>
#include <unordered_map>

#include "json.hpp"

namespace steervec {

using nlohmann::json;

std::string_view script_name(Script s) {
  switch (s) {
    case Script::latin: return "latin";
    case Script::cyrillic: return "cyrillic";
    case Script::arabic: return "arabic";
    case Script::devanagari: return "devanagari";
    case Script::han: return "han";
    case Script::hiragana_katakana: return "hiragana_katakana";
    case Script::hangul: return "hangul";
    case Script::thai: return "thai";
    case Script::hebrew: return "hebrew";
    case Script::bengali: return "bengali";
    case Script::tamil: return "tamil";
    case Script::synthetic: return "synthetic";
  }
  return "latin";
}

std::optional<Script> script_from_name(std::string_view name) {
  for (int i = 0; i <= static_cast<int>(Script::synthetic); ++i) {
    const auto s = static_cast<Script>(i);
    if (script_name(s) == name) return s;
  }
  return std::nullopt;
}

Script default_script_for(std::string_view code) {
  static const std::unordered_map<std::string_view, Script> table = {
      {"ar", Script::arabic},   {"fa", Script::arabic},
      {"bn", Script::bengali},  {"hi", Script::devanagari},
      {"he", Script::hebrew},   {"ja", Script::hiragana_katakana},
      {"ko", Script::hangul},   {"ru", Script::cyrillic},
      {"uk", Script::cyrillic}, {"ta", Script::tamil},
      {"th", Script::thai},     {"zh", Script::han},
  };
  const auto it = table.find(code);
  return it == table.end() ? Script::latin : it->second;
}

// ---------------------------------------------------------------------------
// ParallelCorpus

namespace {

std::string strip(std::string_view s) {
  std::size_t b = 0, e = s.size();
  while (b < e && std::isspace(static_cast<unsigned char>(s[b]))) ++b;
  while (e > b && std::isspace(static_cast<unsigned char>(s[e - 1]))) --e;
  return std::string(s.substr(b, e - b));
}

}  // namespace

ParallelCorpus ParallelCorpus::from_text_cells(std::vector<LanguageTag> languages,
                                               std::vector<std::string> sample_ids,
                                               std::vector<std::vector<std::string>> cells) {
  ParallelCorpus c;
  c.kind_ = CellKind::text;
  c.languages_ = std::move(languages);
  c.sample_ids_ = std::move(sample_ids);
  c.texts_ = std::move(cells);
  c.validate();
  return c;
}

ParallelCorpus ParallelCorpus::from_token_cells(std::vector<LanguageTag> languages,
                                                std::vector<std::string> sample_ids,
                                                std::vector<std::vector<std::vector<int>>> cells) {
  ParallelCorpus c;
  c.kind_ = CellKind::tokens;
  c.languages_ = std::move(languages);
  c.sample_ids_ = std::move(sample_ids);
  c.tokens_ = std::move(cells);
  c.validate();
  return c;
}

void ParallelCorpus::validate() const {
  std::set<std::string_view> codes;
  for (const auto& lang : languages_) {
    if (lang.code.empty()) raise(Errc::invalid_argument, "empty language code");
    if (!codes.insert(lang.code).second)
      raise(Errc::duplicate_language, "language declared twice: " + lang.code);
    if (lang.script == Script::synthetic && lang.range.hi <= lang.range.lo)
      raise(Errc::invalid_argument, "synthetic range must satisfy hi > lo: " + lang.code);
  }
  if (!std::is_sorted(sample_ids_.begin(), sample_ids_.end()))
    raise(Errc::invalid_argument, "sample ids must be sorted");
  const std::size_t rows = kind_ == CellKind::text ? texts_.size() : tokens_.size();
  if (rows != sample_ids_.size()) raise(Errc::invalid_argument, "cell row count mismatch");
  for (std::size_t s = 0; s < rows; ++s) {
    const std::size_t cols = kind_ == CellKind::text ? texts_[s].size() : tokens_[s].size();
    if (cols != languages_.size())
      raise(Errc::missing_translation,
            "sample " + sample_ids_[s] + " lacks a cell for some language");
    if (kind_ == CellKind::text) {
      for (std::size_t l = 0; l < cols; ++l) {
        if (strip(texts_[s][l]).empty())
          raise(Errc::invalid_argument,
                "empty text cell: (" + sample_ids_[s] + ", " + languages_[l].code + ")");
      }
    } else {
      for (std::size_t l = 0; l < cols; ++l) {
        if (tokens_[s][l].empty())
          raise(Errc::invalid_argument,
                "empty token cell: (" + sample_ids_[s] + ", " + languages_[l].code + ")");
        for (int t : tokens_[s][l]) {
          if (t < 0) raise(Errc::invalid_argument, "negative token id");
        }
      }
    }
  }
}

const LanguageTag& ParallelCorpus::language(std::string_view code) const {
  return languages_[language_index(code)];
}

bool ParallelCorpus::has_language(std::string_view code) const {
  for (const auto& lang : languages_)
    if (lang.code == code) return true;
  return false;
}

std::size_t ParallelCorpus::language_index(std::string_view code) const {
  for (std::size_t i = 0; i < languages_.size(); ++i)
    if (languages_[i].code == code) return i;
  raise(Errc::unknown_language, std::string(code));
}

const std::string& ParallelCorpus::text_cell(std::size_t sample, std::size_t lang) const {
  if (kind_ != CellKind::text) raise(Errc::invalid_argument, "corpus holds token cells");
  return texts_.at(sample).at(lang);
}

const std::vector<int>& ParallelCorpus::token_cell(std::size_t sample, std::size_t lang) const {
  if (kind_ != CellKind::tokens) raise(Errc::invalid_argument, "corpus holds text cells");
  return tokens_.at(sample).at(lang);
}

std::vector<int> ParallelCorpus::cell_as_tokens(std::size_t sample, std::size_t lang) const {
  if (kind_ == CellKind::tokens) return tokens_.at(sample).at(lang);
  return byte_tokenize(texts_.at(sample).at(lang));
}

std::vector<std::vector<int>> ParallelCorpus::slice_tokens(std::string_view code) const {
  const std::size_t li = language_index(code);
  std::vector<std::vector<int>> out;
  out.reserve(n_samples());
  for (std::size_t s = 0; s < n_samples(); ++s) out.push_back(cell_as_tokens(s, li));
  return out;
}

int ParallelCorpus::vocab_size() const {
  if (kind_ == CellKind::text) return 256;
  int hi = 0;
  for (const auto& row : tokens_)
    for (const auto& cell : row)
      for (int t : cell) hi = std::max(hi, t + 1);
  for (const auto& lang : languages_)
    if (lang.script == Script::synthetic) hi = std::max(hi, static_cast<int>(lang.range.hi));
  return hi;
}

int ParallelCorpus::max_cell_tokens() const {
  int m = 0;
  for (std::size_t s = 0; s < n_samples(); ++s)
    for (std::size_t l = 0; l < n_languages(); ++l)
      m = std::max(m, static_cast<int>(cell_as_tokens(s, l).size()));
  return m;
}

std::pair<ParallelCorpus, ParallelCorpus> ParallelCorpus::split_holdout(double fraction) const {
  if (fraction < 0.0 || fraction >= 1.0) raise(Errc::invalid_argument, "holdout fraction in [0,1)");
  const std::size_t held = static_cast<std::size_t>(std::ceil(fraction * static_cast<double>(n_samples())));
  const std::size_t keep = n_samples() - held;
  auto take = [&](std::size_t begin, std::size_t end) {
    ParallelCorpus c;
    c.kind_ = kind_;
    c.languages_ = languages_;
    c.sample_ids_.assign(sample_ids_.begin() + begin, sample_ids_.begin() + end);
    if (kind_ == CellKind::text)
      c.texts_.assign(texts_.begin() + begin, texts_.begin() + end);
    else
      c.tokens_.assign(tokens_.begin() + begin, tokens_.begin() + end);
    return c;
  };
  return {take(0, keep), take(keep, n_samples())};
}

ParallelCorpus ParallelCorpus::restrict_languages(std::span<const std::string> codes) const {
  std::vector<LanguageTag> langs;
  std::vector<std::size_t> idx;
  for (const auto& code : codes) {
    idx.push_back(language_index(code));
    langs.push_back(languages_[idx.back()]);
  }
  ParallelCorpus c;
  c.kind_ = kind_;
  c.languages_ = std::move(langs);
  c.sample_ids_ = sample_ids_;
  for (std::size_t s = 0; s < n_samples(); ++s) {
    if (kind_ == CellKind::text) {
      std::vector<std::string> row;
      for (std::size_t i : idx) row.push_back(texts_[s][i]);
      c.texts_.push_back(std::move(row));
    } else {
      std::vector<std::vector<int>> row;
      for (std::size_t i : idx) row.push_back(tokens_[s][i]);
      c.tokens_.push_back(std::move(row));
    }
  }
  c.validate();
  return c;
}

ParallelCorpus ParallelCorpus::union_languages(const ParallelCorpus& other) const {
  if (other.kind_ != kind_) raise(Errc::invalid_argument, "cell kinds differ");
  if (other.sample_ids_ != sample_ids_)
    raise(Errc::invalid_argument, "sample ids differ; union requires the same alignment");
  ParallelCorpus c = *this;
  for (const auto& lang : other.languages_) {
    if (has_language(lang.code)) raise(Errc::duplicate_language, lang.code);
    c.languages_.push_back(lang);
  }
  for (std::size_t s = 0; s < n_samples(); ++s) {
    for (std::size_t l = 0; l < other.n_languages(); ++l) {
      if (kind_ == CellKind::text)
        c.texts_[s].push_back(other.texts_[s][l]);
      else
        c.tokens_[s].push_back(other.tokens_[s][l]);
    }
  }
  c.validate();
  return c;
}

Digest256 ParallelCorpus::content_digest() const {
  DigestBuilder b;
  b.update_u32(kind_ == CellKind::text ? 0 : 1);
  b.update_u64(languages_.size());
  for (const auto& lang : languages_) {
    b.update_str(lang.code);
    b.update_u32(static_cast<std::uint32_t>(lang.script));
    b.update_u32(lang.range.lo);
    b.update_u32(lang.range.hi);
  }
  b.update_u64(sample_ids_.size());
  for (std::size_t s = 0; s < n_samples(); ++s) {
    b.update_str(sample_ids_[s]);
    for (std::size_t l = 0; l < n_languages(); ++l) {
      if (kind_ == CellKind::text) {
        b.update_str(texts_[s][l]);
      } else {
        b.update_u64(tokens_[s][l].size());
        for (int t : tokens_[s][l]) b.update_u32(static_cast<std::uint32_t>(t));
      }
    }
  }
  return b.finish();
}

std::vector<int> byte_tokenize(std::string_view text) {
  std::vector<int> out;
  out.reserve(text.size());
  for (unsigned char c : text) out.push_back(static_cast<int>(c));
  return out;
}

std::string byte_detokenize(std::span<const int> tokens) {
  std::string out;
  out.reserve(tokens.size());
  for (int t : tokens) out.push_back(static_cast<char>(t & 0xff));
  return out;
}

// ---------------------------------------------------------------------------
// Loading / saving
//
// JSONL: one record per line, {"id", "lang", "text"} for text corpora or
// {"id", "lang", "tokens": [ints]} for token corpora. Token corpora carry a
// leading meta line {"meta": {"languages": [...]}} with the token ranges.
// TSV: id <TAB> lang <TAB> sentence, UTF-8, no header.

namespace {

struct RawRecord {
  std::string id;
  std::string lang;
  std::string text;
  std::vector<int> tokens;
  bool is_tokens = false;
};

ParallelCorpus assemble(std::vector<LanguageTag> declared, const std::vector<RawRecord>& records) {
  if (records.empty()) raise(Errc::parse_error, "no records");
  const bool tokens_kind = records.front().is_tokens;
  for (const auto& r : records)
    if (r.is_tokens != tokens_kind)
      raise(Errc::parse_error, "mixed text/token records (corpus cells must be homogeneous)");

  // language discovery in first-seen order, unless declared by a meta line
  std::vector<LanguageTag> langs = std::move(declared);
  auto lang_index = [&](const std::string& code) -> std::size_t {
    for (std::size_t i = 0; i < langs.size(); ++i)
      if (langs[i].code == code) return i;
    return langs.size();
  };
  if (langs.empty()) {
    for (const auto& r : records) {
      if (lang_index(r.lang) == langs.size())
        langs.push_back({r.lang, tokens_kind ? Script::synthetic : default_script_for(r.lang), {}});
    }
  }

  std::vector<std::string> ids;
  for (const auto& r : records)
    if (std::find(ids.begin(), ids.end(), r.id) == ids.end()) ids.push_back(r.id);
  std::sort(ids.begin(), ids.end());
  auto id_index = [&](const std::string& id) {
    return static_cast<std::size_t>(std::lower_bound(ids.begin(), ids.end(), id) - ids.begin());
  };

  std::vector<std::vector<bool>> seen(ids.size(), std::vector<bool>(langs.size(), false));
  std::vector<std::vector<std::string>> texts;
  std::vector<std::vector<std::vector<int>>> tokens;
  if (tokens_kind)
    tokens.assign(ids.size(), std::vector<std::vector<int>>(langs.size()));
  else
    texts.assign(ids.size(), std::vector<std::string>(langs.size()));

  for (const auto& r : records) {
    const std::size_t li = lang_index(r.lang);
    if (li == langs.size()) raise(Errc::unknown_language, r.lang + " not in declared language table");
    const std::size_t si = id_index(r.id);
    if (seen[si][li]) raise(Errc::parse_error, "duplicate record (" + r.id + ", " + r.lang + ")");
    seen[si][li] = true;
    if (tokens_kind)
      tokens[si][li] = r.tokens;
    else
      texts[si][li] = r.text;
  }
  for (std::size_t s = 0; s < ids.size(); ++s)
    for (std::size_t l = 0; l < langs.size(); ++l)
      if (!seen[s][l])
        raise(Errc::missing_translation, "(" + ids[s] + ", " + langs[l].code + ")");

  if (tokens_kind)
    return ParallelCorpus::from_token_cells(std::move(langs), std::move(ids), std::move(tokens));
  return ParallelCorpus::from_text_cells(std::move(langs), std::move(ids), std::move(texts));
}

std::vector<LanguageTag> parse_meta_languages(const json& meta) {
  std::vector<LanguageTag> langs;
  for (const auto& entry : meta.at("languages")) {
    LanguageTag tag;
    tag.code = entry.at("code").get<std::string>();
    const auto script = script_from_name(entry.at("script").get<std::string>());
    if (!script) raise(Errc::parse_error, "unknown script in meta line");
    tag.script = *script;
    if (entry.contains("range")) {
      tag.range.lo = entry.at("range").at(0).get<std::uint32_t>();
      tag.range.hi = entry.at("range").at(1).get<std::uint32_t>();
    }
    langs.push_back(std::move(tag));
  }
  return langs;
}

}  // namespace

ParallelCorpus load_corpus(const std::filesystem::path& path, CorpusFormat format) {
  const std::string data = read_file(path);
  std::vector<RawRecord> records;
  std::vector<LanguageTag> declared;

  std::istringstream in(data);
  std::string line;
  int line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (strip(line).empty()) continue;
    if (format == CorpusFormat::jsonl) {
      json j = json::parse(line, nullptr, false);
      if (j.is_discarded())
        raise(Errc::parse_error, path.string() + ":" + std::to_string(line_no) + ": invalid JSON");
      if (j.contains("meta")) {
        if (line_no != 1) raise(Errc::parse_error, "meta line must come first");
        declared = parse_meta_languages(j.at("meta"));
        continue;
      }
      RawRecord r;
      try {
        r.id = j.at("id").get<std::string>();
        r.lang = j.at("lang").get<std::string>();
        if (j.contains("tokens")) {
          r.tokens = j.at("tokens").get<std::vector<int>>();
          r.is_tokens = true;
        } else {
          r.text = j.at("text").get<std::string>();
        }
      } catch (const json::exception& e) {
        raise(Errc::parse_error, path.string() + ":" + std::to_string(line_no) + ": " + e.what());
      }
      records.push_back(std::move(r));
    } else {
      RawRecord r;
      const auto t1 = line.find('\t');
      const auto t2 = t1 == std::string::npos ? std::string::npos : line.find('\t', t1 + 1);
      if (t1 == std::string::npos || t2 == std::string::npos || line.find('\t', t2 + 1) != std::string::npos)
        raise(Errc::parse_error,
              path.string() + ":" + std::to_string(line_no) + ": expected 3 tab-separated columns");
      r.id = line.substr(0, t1);
      r.lang = line.substr(t1 + 1, t2 - t1 - 1);
      r.text = line.substr(t2 + 1);
      if (!r.text.empty() && r.text.back() == '\r') r.text.pop_back();
      records.push_back(std::move(r));
    }
  }
  return assemble(std::move(declared), records);
}

void save_corpus(const ParallelCorpus& corpus, const std::filesystem::path& path) {
  std::string out;
  if (corpus.kind() == ParallelCorpus::CellKind::tokens) {
    json langs = json::array();
    for (const auto& lang : corpus.languages()) {
      json entry = {{"code", lang.code}, {"script", std::string(script_name(lang.script))}};
      if (lang.script == Script::synthetic) entry["range"] = {lang.range.lo, lang.range.hi};
      langs.push_back(std::move(entry));
    }
    out += json{{"meta", {{"languages", langs}}}}.dump();
    out += '\n';
  }
  for (std::size_t s = 0; s < corpus.n_samples(); ++s) {
    for (std::size_t l = 0; l < corpus.n_languages(); ++l) {
      json rec = {{"id", corpus.sample_ids()[s]}, {"lang", corpus.languages()[l].code}};
      if (corpus.kind() == ParallelCorpus::CellKind::tokens)
        rec["tokens"] = corpus.token_cell(s, l);
      else
        rec["text"] = corpus.text_cell(s, l);
      out += rec.dump();
      out += '\n';
    }
  }
  atomic_write_file(path, out);
}

// ---------------------------------------------------------------------------
// Synthetic generation

void SyntheticSpec::validate() const {
  if (n_languages < 1) raise(Errc::invalid_argument, "n_languages >= 1");
  if (n_families < 1 || n_families > n_languages)
    raise(Errc::invalid_argument, "1 <= n_families <= n_languages");
  if (content_alphabet < 2) raise(Errc::invalid_argument, "content_alphabet >= 2");
  if (min_len < 2) raise(Errc::invalid_argument, "min_len >= 2");
  if (max_len < min_len) raise(Errc::invalid_argument, "max_len >= min_len");
  if (samples < 1) raise(Errc::invalid_argument, "samples >= 1");
}

SyntheticCorpus generate_synthetic_corpus(const SyntheticSpec& spec) {
  spec.validate();
  Rng rng(spec.seed);
  const int S = spec.content_alphabet;

  // order-1 transition weights: a flat floor plus a few boosted successors,
  // so sequences are predictable enough for a small model to learn
  std::vector<std::vector<double>> trans(S, std::vector<double>(S, 1.0));
  for (int s = 0; s < S; ++s) {
    for (int b = 0; b < 3; ++b) trans[s][rng.uniform_int(0, S - 1)] += 8.0 * S / 12.0;
  }

  std::vector<std::string> ids;
  std::vector<std::vector<int>> content(spec.samples);
  const int id_width = static_cast<int>(std::to_string(spec.samples - 1).size());
  for (int i = 0; i < spec.samples; ++i) {
    std::string id = std::to_string(i);
    id.insert(0, static_cast<std::size_t>(id_width) - id.size(), '0');
    ids.push_back("s" + id);
    const int len = static_cast<int>(rng.uniform_int(spec.min_len, spec.max_len));
    auto& seq = content[i];
    seq.push_back(static_cast<int>(rng.uniform_int(0, S - 1)));
    while (static_cast<int>(seq.size()) < len)
      seq.push_back(static_cast<int>(rng.categorical(trans[seq.back()])));
  }

  // family f owns a contiguous run of languages; offsets are l * S, so
  // same-family languages sit on adjacent token ranges
  std::vector<LanguageTag> langs;
  SyntheticCorpus result;
  for (int l = 0; l < spec.n_languages; ++l) {
    const int fam = static_cast<int>((static_cast<long long>(l) * spec.n_families) / spec.n_languages);
    LanguageTag tag;
    tag.code = "syn" + std::to_string(l);
    tag.script = Script::synthetic;
    tag.range = {static_cast<std::uint32_t>(l * S), static_cast<std::uint32_t>((l + 1) * S)};
    result.token_offset[tag.code] = l * S;
    result.family[tag.code] = fam;
    langs.push_back(std::move(tag));
  }

  std::vector<std::vector<std::vector<int>>> cells(spec.samples);
  for (int i = 0; i < spec.samples; ++i) {
    cells[i].resize(spec.n_languages);
    for (int l = 0; l < spec.n_languages; ++l) {
      auto& cell = cells[i][l];
      cell.reserve(content[i].size());
      for (int sym : content[i]) cell.push_back(l * S + sym);
    }
  }

  result.corpus =
      ParallelCorpus::from_token_cells(std::move(langs), std::move(ids), std::move(cells));
  return result;
}

}  // namespace steervec
