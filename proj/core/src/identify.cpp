#include <algorithm>
#include <cmath>

#include "steervec/eval.hpp"

namespace steervec {

// ---------------------------------------------------------------------------
// Scripts

namespace {

struct Range {
  char32_t lo, hi;  // inclusive
};

std::span<const Range> script_ranges(Script s) {
  static const Range latin[] = {{0x41, 0x5a}, {0x61, 0x7a}, {0xc0, 0xd6}, {0xd8, 0xf6},
                                {0xf8, 0x24f}, {0x1e00, 0x1eff}};
  static const Range cyrillic[] = {{0x400, 0x4ff}, {0x500, 0x52f}};
  static const Range arabic[] = {{0x600, 0x6ff}, {0x750, 0x77f}, {0x8a0, 0x8ff},
                                 {0xfb50, 0xfdff}, {0xfe70, 0xfeff}};
  static const Range devanagari[] = {{0x900, 0x97f}};
  static const Range han[] = {{0x3400, 0x4dbf}, {0x4e00, 0x9fff}, {0xf900, 0xfaff}};
  static const Range kana[] = {{0x3040, 0x309f}, {0x30a0, 0x30ff}, {0x31f0, 0x31ff}};
  static const Range hangul[] = {{0x1100, 0x11ff}, {0x3130, 0x318f}, {0xac00, 0xd7af}};
  static const Range thai[] = {{0xe00, 0xe7f}};
  static const Range hebrew[] = {{0x590, 0x5ff}};
  static const Range bengali[] = {{0x980, 0x9ff}};
  static const Range tamil[] = {{0xb80, 0xbff}};
  switch (s) {
    case Script::latin: return latin;
    case Script::cyrillic: return cyrillic;
    case Script::arabic: return arabic;
    case Script::devanagari: return devanagari;
    case Script::han: return han;
    case Script::hiragana_katakana: return kana;
    case Script::hangul: return hangul;
    case Script::thai: return thai;
    case Script::hebrew: return hebrew;
    case Script::bengali: return bengali;
    case Script::tamil: return tamil;
    case Script::synthetic: return {};
  }
  return {};
}

constexpr Script kAllScripts[] = {
    Script::latin,  Script::cyrillic, Script::arabic, Script::devanagari,
    Script::han,    Script::hiragana_katakana, Script::hangul, Script::thai,
    Script::hebrew, Script::bengali,  Script::tamil};

}  // namespace

bool codepoint_in_script(char32_t cp, Script script) {
  for (const auto& r : script_ranges(script))
    if (cp >= r.lo && cp <= r.hi) return true;
  return false;
}

bool codepoint_is_letter(char32_t cp) {
  for (Script s : kAllScripts)
    if (codepoint_in_script(cp, s)) return true;
  return false;
}

std::vector<char32_t> decode_utf8(std::string_view text) {
  std::vector<char32_t> out;
  out.reserve(text.size());
  std::size_t i = 0;
  while (i < text.size()) {
    const unsigned char c = static_cast<unsigned char>(text[i]);
    char32_t cp = 0;
    int extra = 0;
    if (c < 0x80) {
      cp = c;
    } else if ((c & 0xe0) == 0xc0) {
      cp = c & 0x1f;
      extra = 1;
    } else if ((c & 0xf0) == 0xe0) {
      cp = c & 0x0f;
      extra = 2;
    } else if ((c & 0xf8) == 0xf0) {
      cp = c & 0x07;
      extra = 3;
    } else {
      cp = 0xfffd;  // stray continuation byte
    }
    ++i;
    for (int k = 0; k < extra; ++k) {
      if (i >= text.size() || (static_cast<unsigned char>(text[i]) & 0xc0) != 0x80) {
        cp = 0xfffd;
        break;
      }
      cp = (cp << 6) | (static_cast<unsigned char>(text[i]) & 0x3f);
      ++i;
    }
    out.push_back(cp);
  }
  return out;
}

// ---------------------------------------------------------------------------
// LanguageIdentifier

LanguageIdentifier LanguageIdentifier::token_range(std::vector<LanguageTag> languages) {
  if (languages.empty()) raise(Errc::invalid_argument, "no languages");
  for (const auto& lang : languages)
    if (lang.script != Script::synthetic || lang.range.hi <= lang.range.lo)
      raise(Errc::invalid_argument, "token_range identification needs synthetic token ranges");
  LanguageIdentifier id;
  id.strategy_ = IdentifyStrategy::token_range;
  id.languages_ = std::move(languages);
  return id;
}

LanguageIdentifier LanguageIdentifier::script_heuristic(std::vector<LanguageTag> languages) {
  if (languages.empty()) raise(Errc::invalid_argument, "no languages");
  LanguageIdentifier id;
  id.strategy_ = IdentifyStrategy::script_heuristic;
  id.languages_ = std::move(languages);
  return id;
}

LanguageIdentifier LanguageIdentifier::train_char_ngram(
    std::span<const std::pair<std::string, std::string>> labeled,
    std::vector<LanguageTag> languages) {
  if (labeled.empty()) raise(Errc::empty_input, "no training lines");
  if (languages.empty()) raise(Errc::invalid_argument, "no languages");
  LanguageIdentifier id;
  id.strategy_ = IdentifyStrategy::char_ngram;
  id.languages_ = std::move(languages);
  id.trigram_counts_.resize(id.languages_.size());
  std::vector<std::uint64_t> line_counts(id.languages_.size(), 0);
  std::vector<std::uint64_t> totals(id.languages_.size(), 0);

  for (const auto& [code, text] : labeled) {
    std::size_t li = id.languages_.size();
    for (std::size_t i = 0; i < id.languages_.size(); ++i)
      if (id.languages_[i].code == code) li = i;
    if (li == id.languages_.size()) raise(Errc::unknown_language, code);
    line_counts[li] += 1;
    const auto& s = text;
    for (std::size_t i = 0; i + 2 < s.size(); ++i) {
      const std::uint32_t key = (static_cast<std::uint32_t>(static_cast<unsigned char>(s[i])) << 16) |
                                (static_cast<std::uint32_t>(static_cast<unsigned char>(s[i + 1])) << 8) |
                                static_cast<std::uint32_t>(static_cast<unsigned char>(s[i + 2]));
      id.trigram_counts_[li][key] += 1;
      totals[li] += 1;
    }
  }

  const double v = 256.0 * 256.0 * 256.0;  // add-one smoothing over byte trigrams
  std::uint64_t all_lines = 0;
  for (auto c : line_counts) all_lines += c;
  id.log_prior_.resize(id.languages_.size());
  id.log_total_.resize(id.languages_.size());
  for (std::size_t i = 0; i < id.languages_.size(); ++i) {
    id.log_prior_[i] = std::log((static_cast<double>(line_counts[i]) + 1.0) /
                                (static_cast<double>(all_lines) + id.languages_.size()));
    id.log_total_[i] = std::log(static_cast<double>(totals[i]) + v);
  }
  return id;
}

bool LanguageIdentifier::covers(std::string_view code) const {
  for (const auto& lang : languages_)
    if (lang.code == code) return true;
  return false;
}

const LanguageTag& LanguageIdentifier::tag(std::string_view code) const {
  for (const auto& lang : languages_)
    if (lang.code == code) return lang;
  raise(Errc::unknown_language, std::string(code));
}

Identification LanguageIdentifier::identify_tokens(std::span<const int> tokens) const {
  if (tokens.empty()) raise(Errc::empty_input, "empty token sequence");
  if (strategy_ != IdentifyStrategy::token_range)
    raise(Errc::invalid_argument, "this identifier classifies text, not tokens");
  // majority vote over range membership; ties go to the smallest code
  std::vector<int> hits(languages_.size(), 0);
  for (int t : tokens)
    for (std::size_t i = 0; i < languages_.size(); ++i)
      if (languages_[i].range.contains(t)) hits[i] += 1;
  std::size_t best = 0;
  for (std::size_t i = 1; i < languages_.size(); ++i) {
    if (hits[i] > hits[best] || (hits[i] == hits[best] && languages_[i].code < languages_[best].code))
      best = i;
  }
  return {languages_[best].code, static_cast<double>(hits[best]) / static_cast<double>(tokens.size())};
}

Identification LanguageIdentifier::identify_text(std::string_view text) const {
  if (text.empty()) raise(Errc::empty_input, "empty text");
  if (strategy_ == IdentifyStrategy::token_range)
    raise(Errc::invalid_argument, "this identifier classifies tokens, not text");

  if (strategy_ == IdentifyStrategy::script_heuristic) {
    const auto cps = decode_utf8(text);
    std::vector<int> hits(languages_.size(), 0);
    int letters = 0;
    for (char32_t cp : cps) {
      if (!codepoint_is_letter(cp)) continue;
      ++letters;
      for (std::size_t i = 0; i < languages_.size(); ++i)
        if (codepoint_in_script(cp, languages_[i].script)) hits[i] += 1;
    }
    std::size_t best = 0;
    for (std::size_t i = 1; i < languages_.size(); ++i)
      if (hits[i] > hits[best] ||
          (hits[i] == hits[best] && languages_[i].code < languages_[best].code))
        best = i;
    const double conf = letters > 0 ? static_cast<double>(hits[best]) / letters : 0.0;
    return {languages_[best].code, conf};
  }

  // char_ngram: naive Bayes over byte trigrams
  std::vector<double> score(log_prior_);
  for (std::size_t i = 0; i + 2 < text.size(); ++i) {
    const std::uint32_t key = (static_cast<std::uint32_t>(static_cast<unsigned char>(text[i])) << 16) |
                              (static_cast<std::uint32_t>(static_cast<unsigned char>(text[i + 1])) << 8) |
                              static_cast<std::uint32_t>(static_cast<unsigned char>(text[i + 2]));
    for (std::size_t l = 0; l < languages_.size(); ++l) {
      const auto it = trigram_counts_[l].find(key);
      const double count = it == trigram_counts_[l].end() ? 0.0 : it->second;
      score[l] += std::log(count + 1.0) - log_total_[l];
    }
  }
  std::size_t best = 0;
  for (std::size_t l = 1; l < languages_.size(); ++l) {
    if (score[l] > score[best] ||
        (score[l] == score[best] && languages_[l].code < languages_[best].code))
      best = l;
  }
  // softmax-normalized confidence
  double mx = score[best], denom = 0.0;
  for (double s : score) denom += std::exp(s - mx);
  return {languages_[best].code, 1.0 / denom};
}

}  // namespace steervec
