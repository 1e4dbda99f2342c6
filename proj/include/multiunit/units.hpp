// Copyright 2026 The multiunit Authors
//
// Licensed under the Apache License, Version 2.0 (the "License");
// you may not use this file except in compliance with the License.
// You may obtain a copy of the License at
//
//   http://www.apache.org/licenses/LICENSE-2.0
//
// Unless required by applicable law or agreed to in writing, software
// distributed under the License is distributed on an "AS IS" BASIS,
// WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
// See the License for the specific language governing permissions and
// limitations under the License.

#pragma once

#include <algorithm>
#include <map>
#include <optional>
#include <set>
#include <string>
#include <unordered_map>
#include <vector>

#include "multiunit/base.hpp"

namespace multiunit {

// The five modeling units. "chars" avoids the keyword clash with char.
enum class UnitKind { wordpiece, chars, phoneme, pinyin, wubi };

inline const char* unit_name(UnitKind k) {
  switch (k) {
    case UnitKind::wordpiece: return "wordpiece";
    case UnitKind::chars: return "char";
    case UnitKind::phoneme: return "phoneme";
    case UnitKind::pinyin: return "pinyin";
    case UnitKind::wubi: return "wubi";
  }
  throw InputError("unit_name: unknown unit kind");
}

inline UnitKind unit_from_name(const std::string& s) {
  if (s == "wordpiece") return UnitKind::wordpiece;
  if (s == "char") return UnitKind::chars;
  if (s == "phoneme") return UnitKind::phoneme;
  if (s == "pinyin") return UnitKind::pinyin;
  if (s == "wubi") return UnitKind::wubi;
  throw ConfigError("unknown unit kind '" + s + "' (expected wordpiece|char|phoneme|pinyin|wubi)");
}

// Word-initial marker used by wordpiece and character units (U+2581).
inline const std::string kWordMarker = "\xE2\x96\x81";
inline const std::string kBlankSymbol = "<blank>";
inline const std::string kUnkSymbol = "<unk>";

// ---------------------------------------------------------------------------
// Text helpers.
// ---------------------------------------------------------------------------

// Lowercase ASCII; keep letters, digits and apostrophes; everything else
// becomes a word boundary. Used on the English-orthography paths.
inline std::string normalize_text(const std::string& text) {
  std::string out;
  bool pending_space = false;
  for (unsigned char c : text) {
    char l = static_cast<char>(std::tolower(c));
    const bool keep = (l >= 'a' && l <= 'z') || (l >= '0' && l <= '9') || l == '\'';
    if (keep) {
      if (pending_space && !out.empty()) out += ' ';
      pending_space = false;
      out += l;
    } else {
      pending_space = true;
    }
  }
  return out;
}

// Split UTF-8 into codepoint strings. Invalid lead bytes are passed through
// as single-byte units rather than rejected; tokenization later reports them
// as OOV if no vocabulary entry exists.
inline std::vector<std::string> utf8_codepoints(const std::string& s) {
  std::vector<std::string> out;
  std::size_t i = 0;
  while (i < s.size()) {
    const unsigned char b = static_cast<unsigned char>(s[i]);
    std::size_t len = 1;
    if ((b & 0x80u) == 0x00u) len = 1;
    else if ((b & 0xE0u) == 0xC0u) len = 2;
    else if ((b & 0xF0u) == 0xE0u) len = 3;
    else if ((b & 0xF8u) == 0xF0u) len = 4;
    if (i + len > s.size()) len = 1;
    out.push_back(s.substr(i, len));
    i += len;
  }
  return out;
}

// ---------------------------------------------------------------------------
// UnitVocabulary: symbol <-> id. Id 0 is always the CTC blank.
// ---------------------------------------------------------------------------

class UnitVocabulary {
 public:
  UnitVocabulary() = default;

  // `symbols` must start with "<blank>"; all symbols unique and non-empty.
  UnitVocabulary(UnitKind kind, std::vector<std::string> symbols)
      : kind_(kind), symbols_(std::move(symbols)) {
    if (symbols_.empty() || symbols_[0] != kBlankSymbol)
      throw InputError("vocabulary must place '<blank>' at index 0");
    for (std::size_t i = 0; i < symbols_.size(); ++i) {
      if (symbols_[i].empty()) throw InputError("vocabulary contains an empty symbol");
      if (!index_.emplace(symbols_[i], static_cast<int>(i)).second)
        throw InputError("duplicate vocabulary symbol '" + symbols_[i] + "'");
    }
    auto it = index_.find(kUnkSymbol);
    unk_id_ = it == index_.end() ? -1 : it->second;
  }

  UnitKind kind() const { return kind_; }
  int size() const { return static_cast<int>(symbols_.size()); }
  static constexpr int blank_id() { return 0; }
  int unk_id() const { return unk_id_; }
  bool has_unk() const { return unk_id_ >= 0; }

  // -1 when absent.
  int id_of(const std::string& symbol) const {
    auto it = index_.find(symbol);
    return it == index_.end() ? -1 : it->second;
  }

  const std::string& symbol(int id) const {
    if (id < 0 || id >= size())
      throw InputError("symbol id " + std::to_string(id) + " outside vocabulary of size " +
                       std::to_string(size()));
    return symbols_[static_cast<std::size_t>(id)];
  }

  const std::vector<std::string>& symbols() const { return symbols_; }

  // One symbol per line, index 0 first.
  void save(const std::string& path) const {
    std::string text;
    for (const auto& s : symbols_) {
      text += s;
      text += '\n';
    }
    write_text_file(path, text);
  }

  static UnitVocabulary load(const std::string& path, UnitKind kind) {
    std::vector<std::string> lines = read_lines(path);
    while (!lines.empty() && lines.back().empty()) lines.pop_back();
    if (lines.empty()) throw FormatError("vocabulary file is empty: " + path);
    try {
      return UnitVocabulary(kind, std::move(lines));
    } catch (const InputError& e) {
      throw FormatError(std::string(e.what()) + " (in " + path + ")");
    }
  }

 private:
  UnitKind kind_ = UnitKind::wordpiece;
  std::vector<std::string> symbols_;
  std::unordered_map<std::string, int> index_;
  int unk_id_ = -1;
};

// ---------------------------------------------------------------------------
// Lexicon: word -> phoneme sequence. TSV rows `word<TAB>PH1 PH2 ...`.
// ---------------------------------------------------------------------------

class Lexicon {
 public:
  void add(const std::string& word, std::vector<std::string> phones) {
    if (word.empty() || phones.empty())
      throw InputError("lexicon entries need a word and at least one phoneme");
    entries_.emplace(word, std::move(phones));  // first entry wins on duplicates
  }

  bool contains(const std::string& word) const { return entries_.count(word) > 0; }

  const std::vector<std::string>& phones(const std::string& word) const {
    auto it = entries_.find(word);
    if (it == entries_.end()) throw OovError(word, "lexicon");
    return it->second;
  }

  std::size_t size() const { return entries_.size(); }
  const std::map<std::string, std::vector<std::string>>& entries() const { return entries_; }

  // Every phoneme must exist in the phoneme vocabulary.
  void validate_against(const UnitVocabulary& phones_vocab) const {
    for (const auto& [word, phs] : entries_)
      for (const auto& ph : phs)
        if (phones_vocab.id_of(ph) < 0)
          throw DataError("lexicon entry '" + word + "' uses unknown phoneme '" + ph + "'");
  }

  void save(const std::string& path) const {
    std::string text;
    for (const auto& [word, phs] : entries_) {
      text += word;
      text += '\t';
      text += join(phs, " ");
      text += '\n';
    }
    write_text_file(path, text);
  }

  static Lexicon load(const std::string& path) {
    Lexicon lex;
    std::size_t lineno = 0;
    for (const std::string& line : read_lines(path)) {
      ++lineno;
      if (line.empty()) continue;
      auto tab = line.find('\t');
      if (tab == std::string::npos)
        throw FormatError("lexicon line " + std::to_string(lineno) + " lacks a TAB: " + path);
      std::string word = line.substr(0, tab);
      std::vector<std::string> phs = split_ws(line.substr(tab + 1));
      if (word.empty() || phs.empty())
        throw FormatError("lexicon line " + std::to_string(lineno) + " is incomplete: " + path);
      lex.add(word, std::move(phs));
    }
    return lex;
  }

 private:
  std::map<std::string, std::vector<std::string>> entries_;
};

// ---------------------------------------------------------------------------
// MappingTable: character -> code string (Pinyin syllables, Wubi key codes).
// TSV rows `char<TAB>code`.
// ---------------------------------------------------------------------------

class MappingTable {
 public:
  void add(const std::string& ch, const std::string& code) {
    if (ch.empty() || code.empty()) throw InputError("mapping entries need a char and a code");
    entries_.emplace(ch, code);  // first entry wins
  }

  bool contains(const std::string& ch) const { return entries_.count(ch) > 0; }

  const std::string& code(const std::string& ch) const {
    auto it = entries_.find(ch);
    if (it == entries_.end()) throw OovError(ch, "mapping table");
    return it->second;
  }

  std::size_t size() const { return entries_.size(); }
  const std::map<std::string, std::string>& entries() const { return entries_; }

  void save(const std::string& path) const {
    std::string text;
    for (const auto& [ch, code] : entries_) {
      text += ch;
      text += '\t';
      text += code;
      text += '\n';
    }
    write_text_file(path, text);
  }

  static MappingTable load(const std::string& path) {
    MappingTable table;
    std::size_t lineno = 0;
    for (const std::string& line : read_lines(path)) {
      ++lineno;
      if (line.empty()) continue;
      auto tab = line.find('\t');
      if (tab == std::string::npos)
        throw FormatError("mapping line " + std::to_string(lineno) + " lacks a TAB: " + path);
      std::string ch = line.substr(0, tab);
      std::string code = trim(line.substr(tab + 1));
      if (ch.empty() || code.empty())
        throw FormatError("mapping line " + std::to_string(lineno) + " is incomplete: " + path);
      table.add(ch, code);
    }
    return table;
  }

 private:
  std::map<std::string, std::string> entries_;
};

// ---------------------------------------------------------------------------
// BPE model: greedy most-frequent-pair merges over marker-prefixed words.
// ---------------------------------------------------------------------------

class BpeModel {
 public:
  std::vector<std::string> base_symbols;                    // sorted, marker forms included
  std::vector<std::pair<std::string, std::string>> merges;  // in training order

  // Word -> symbol sequence: the word-initial character carries the marker
  // as part of its symbol ("cat" -> ["<marker>c", "a", "t"]), then merges
  // apply in training order, each scanned left to right.
  std::vector<std::string> segment_word(const std::string& word) const {
    std::vector<std::string> syms = base_segment(word);
    for (const auto& [left, right] : merges) apply_merge(syms, left, right);
    return syms;
  }

  static std::vector<std::string> base_segment(const std::string& word) {
    std::vector<std::string> cps = utf8_codepoints(word);
    std::vector<std::string> syms;
    syms.reserve(cps.size());
    for (std::size_t i = 0; i < cps.size(); ++i)
      syms.push_back(i == 0 ? kWordMarker + cps[i] : cps[i]);
    return syms;
  }

  static void apply_merge(std::vector<std::string>& syms, const std::string& left,
                          const std::string& right) {
    std::size_t w = 0;
    for (std::size_t r = 0; r < syms.size();) {
      if (r + 1 < syms.size() && syms[r] == left && syms[r + 1] == right) {
        syms[w++] = left + right;
        r += 2;
      } else {
        if (w != r) syms[w] = std::move(syms[r]);
        ++w;
        ++r;
      }
    }
    syms.resize(w);
  }

  // `#merges N` header, then one `left<SPACE>right` line per merge.
  void save(const std::string& path) const {
    std::string text = "#merges " + std::to_string(merges.size()) + "\n";
    for (const auto& [l, r] : merges) text += l + " " + r + "\n";
    text += "#base " + std::to_string(base_symbols.size()) + "\n";
    for (const auto& s : base_symbols) text += s + "\n";
    write_text_file(path, text);
  }

  static BpeModel load(const std::string& path) {
    std::vector<std::string> lines = read_lines(path);
    if (lines.empty() || lines[0].rfind("#merges ", 0) != 0)
      throw FormatError("BPE model missing '#merges N' header: " + path);
    const std::size_t n =
        static_cast<std::size_t>(parse_int(lines[0].substr(8), "BPE merge count"));
    if (lines.size() < 1 + n) throw FormatError("BPE model truncated: " + path);
    BpeModel model;
    for (std::size_t i = 0; i < n; ++i) {
      const std::string& line = lines[1 + i];
      auto sp = line.find(' ');
      if (sp == std::string::npos || sp == 0 || sp + 1 >= line.size())
        throw FormatError("BPE merge line " + std::to_string(i + 2) + " malformed: " + path);
      model.merges.emplace_back(line.substr(0, sp), line.substr(sp + 1));
    }
    std::size_t pos = 1 + n;
    if (pos >= lines.size() || lines[pos].rfind("#base ", 0) != 0)
      throw FormatError("BPE model missing '#base N' section: " + path);
    const std::size_t nb =
        static_cast<std::size_t>(parse_int(lines[pos].substr(6), "BPE base count"));
    if (lines.size() < pos + 1 + nb) throw FormatError("BPE model truncated: " + path);
    for (std::size_t i = 0; i < nb; ++i) model.base_symbols.push_back(lines[pos + 1 + i]);
    return model;
  }
};

// Greedy BPE training. Pairs are counted across normalized corpus words
// (weighted by frequency), the most frequent pair merges each round
// (lexicographically smallest pair on ties), and training stops when the
// vocabulary reaches `target_vocab_size` symbols (base + merges) or no pair
// occurs at least twice. Pairs whose concatenation already names an existing
// symbol are skipped so vocabulary growth stays exactly one symbol per merge.
inline BpeModel train_bpe(const std::vector<std::string>& corpus_lines,
                          std::size_t target_vocab_size) {
  std::map<std::string, long long> word_freq;
  for (const auto& line : corpus_lines)
    for (const auto& w : split_ws(normalize_text(line))) ++word_freq[w];
  if (word_freq.empty()) throw InputError("train_bpe: corpus has no words");

  std::vector<std::pair<std::vector<std::string>, long long>> words;
  words.reserve(word_freq.size());
  std::set<std::string> vocab;
  for (const auto& [w, f] : word_freq) {
    auto syms = BpeModel::base_segment(w);
    for (const auto& s : syms) vocab.insert(s);
    words.emplace_back(std::move(syms), f);
  }

  BpeModel model;
  model.base_symbols.assign(vocab.begin(), vocab.end());
  if (target_vocab_size < vocab.size())
    throw InputError("train_bpe: target vocabulary size " + std::to_string(target_vocab_size) +
                     " is below the base alphabet size " + std::to_string(vocab.size()));

  while (vocab.size() < target_vocab_size) {
    std::map<std::pair<std::string, std::string>, long long> pair_freq;
    for (const auto& [syms, f] : words)
      for (std::size_t i = 0; i + 1 < syms.size(); ++i)
        pair_freq[{syms[i], syms[i + 1]}] += f;

    // std::map iteration is lexicographic, so `<` on counts alone keeps the
    // smallest pair among equals.
    const std::pair<std::string, std::string>* best = nullptr;
    long long best_count = 1;  // require count >= 2
    for (const auto& [pair, count] : pair_freq) {
      if (vocab.count(pair.first + pair.second)) continue;
      if (count > best_count) {
        best_count = count;
        best = &pair;
      }
    }
    if (!best) break;

    model.merges.push_back(*best);
    vocab.insert(best->first + best->second);
    for (auto& [syms, f] : words) BpeModel::apply_merge(syms, best->first, best->second);
  }
  return model;
}

// Wordpiece vocabulary from a BPE model: blank, unk, base symbols (sorted),
// then merge products in training order.
inline UnitVocabulary vocab_from_bpe(const BpeModel& model) {
  std::vector<std::string> symbols{kBlankSymbol, kUnkSymbol};
  symbols.insert(symbols.end(), model.base_symbols.begin(), model.base_symbols.end());
  for (const auto& [l, r] : model.merges) symbols.push_back(l + r);
  return UnitVocabulary(UnitKind::wordpiece, std::move(symbols));
}

// Character vocabulary observed in a corpus (marker-prefixed word-initial
// forms are distinct symbols).
inline UnitVocabulary char_vocab_from_corpus(const std::vector<std::string>& corpus_lines) {
  std::set<std::string> seen;
  for (const auto& line : corpus_lines)
    for (const auto& w : split_ws(normalize_text(line)))
      for (const auto& s : BpeModel::base_segment(w)) seen.insert(s);
  if (seen.empty()) throw InputError("char vocabulary: corpus has no words");
  std::vector<std::string> symbols{kBlankSymbol, kUnkSymbol};
  symbols.insert(symbols.end(), seen.begin(), seen.end());
  return UnitVocabulary(UnitKind::chars, std::move(symbols));
}

inline UnitVocabulary vocab_from_lexicon(const Lexicon& lex) {
  std::set<std::string> phones;
  for (const auto& [w, phs] : lex.entries()) phones.insert(phs.begin(), phs.end());
  if (phones.empty()) throw InputError("phoneme vocabulary: lexicon is empty");
  std::vector<std::string> symbols{kBlankSymbol};
  symbols.insert(symbols.end(), phones.begin(), phones.end());
  return UnitVocabulary(UnitKind::phoneme, std::move(symbols));
}

// Per-letter vocabulary over all code characters in a mapping table.
inline UnitVocabulary vocab_from_table(const MappingTable& table, UnitKind kind) {
  std::set<std::string> letters;
  for (const auto& [ch, code] : table.entries())
    for (char c : code) letters.insert(std::string(1, c));
  if (letters.empty()) throw InputError("mapping vocabulary: table is empty");
  std::vector<std::string> symbols{kBlankSymbol};
  symbols.insert(symbols.end(), letters.begin(), letters.end());
  return UnitVocabulary(kind, std::move(symbols));
}

// ---------------------------------------------------------------------------
// Tokenizer: text <-> blank-free token id sequences for one unit kind.
// ---------------------------------------------------------------------------

class Tokenizer {
 public:
  // Wordpiece needs a BPE model; phoneme needs a lexicon; pinyin/wubi need a
  // mapping table; char needs only the vocabulary.
  Tokenizer(UnitVocabulary vocab, std::optional<BpeModel> bpe = std::nullopt,
            std::optional<Lexicon> lexicon = std::nullopt,
            std::optional<MappingTable> table = std::nullopt)
      : vocab_(std::move(vocab)),
        bpe_(std::move(bpe)),
        lexicon_(std::move(lexicon)),
        table_(std::move(table)) {
    switch (vocab_.kind()) {
      case UnitKind::wordpiece:
        if (!bpe_) throw ConfigError("wordpiece tokenizer requires a BPE model");
        break;
      case UnitKind::phoneme:
        if (!lexicon_) throw ConfigError("phoneme tokenizer requires a lexicon");
        break;
      case UnitKind::pinyin:
      case UnitKind::wubi:
        if (!table_) throw ConfigError("pinyin/wubi tokenizers require a mapping table");
        break;
      case UnitKind::chars:
        break;
    }
  }

  UnitKind kind() const { return vocab_.kind(); }
  const UnitVocabulary& vocab() const { return vocab_; }

  // Text -> blank-free ids. Throws OovError for lexicon/table misses; symbols
  // missing from the vocabulary map to <unk> when present, otherwise OovError.
  TokenSequence tokenize(const std::string& text) const {
    std::vector<std::string> symbols = tokenize_symbols(text);
    TokenSequence ids;
    ids.reserve(symbols.size());
    for (const auto& s : symbols) {
      int id = vocab_.id_of(s);
      if (id < 0) {
        if (!vocab_.has_unk()) throw OovError(s, std::string(unit_name(kind())) + " vocabulary");
        id = vocab_.unk_id();
      }
      ids.push_back(id);
    }
    return ids;
  }

  std::vector<std::string> tokenize_symbols(const std::string& text) const {
    switch (vocab_.kind()) {
      case UnitKind::wordpiece: {
        std::vector<std::string> out;
        for (const auto& w : split_ws(normalize_text(text))) {
          auto syms = bpe_->segment_word(w);
          out.insert(out.end(), syms.begin(), syms.end());
        }
        return out;
      }
      case UnitKind::chars: {
        std::vector<std::string> out;
        for (const auto& w : split_ws(normalize_text(text))) {
          auto syms = BpeModel::base_segment(w);
          out.insert(out.end(), syms.begin(), syms.end());
        }
        return out;
      }
      case UnitKind::phoneme: {
        std::vector<std::string> out;
        for (const auto& w : split_ws(normalize_text(text))) {
          const auto& phs = lexicon_->phones(w);
          out.insert(out.end(), phs.begin(), phs.end());
        }
        return out;
      }
      case UnitKind::pinyin:
      case UnitKind::wubi: {
        // Per-character code lookup; each code character (letters, and tone
        // digits for Pinyin) is its own token. ASCII whitespace separates
        // characters without emitting tokens.
        std::vector<std::string> out;
        for (const auto& cp : utf8_codepoints(text)) {
          if (cp.size() == 1 && std::isspace(static_cast<unsigned char>(cp[0]))) continue;
          const std::string& code = table_->code(cp);
          for (char c : code) out.emplace_back(1, c);
        }
        return out;
      }
    }
    throw InputError("tokenize: unknown unit kind");
  }

  // Ids -> text. Marker-bearing units reconstruct spacing from the marker;
  // phoneme/pinyin/wubi return space-joined symbols. Blank ids are invalid.
  std::string detokenize(const TokenSequence& ids) const {
    std::vector<std::string> symbols;
    symbols.reserve(ids.size());
    for (int id : ids) {
      if (id == UnitVocabulary::blank_id())
        throw InputError("detokenize: blank id in token sequence");
      symbols.push_back(vocab_.symbol(id));
    }
    switch (vocab_.kind()) {
      case UnitKind::wordpiece:
      case UnitKind::chars: {
        std::string joined;
        for (const auto& s : symbols) joined += s;
        std::string out;
        std::size_t i = 0;
        while (i < joined.size()) {
          if (joined.compare(i, kWordMarker.size(), kWordMarker) == 0) {
            if (!out.empty()) out += ' ';
            i += kWordMarker.size();
          } else {
            out += joined[i++];
          }
        }
        return out;
      }
      case UnitKind::phoneme:
      case UnitKind::pinyin:
      case UnitKind::wubi:
        return join(symbols, " ");
    }
    throw InputError("detokenize: unknown unit kind");
  }

 private:
  UnitVocabulary vocab_;
  std::optional<BpeModel> bpe_;
  std::optional<Lexicon> lexicon_;
  std::optional<MappingTable> table_;
};

}  // namespace multiunit
