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

#include <filesystem>
#include <set>
#include <string>
#include <vector>

#include "multiunit/base.hpp"
#include "multiunit/rng.hpp"
#include "multiunit/units.hpp"

namespace multiunit {

// ===========================================================================
// Synthetic speech corpus. Every word is a phoneme sequence; its orthography
// concatenates fixed per-phoneme spellings, so character and wordpiece units
// correlate with the phonetics (and the lexicon covers every word by
// construction). Features are per-phoneme prototype embeddings plus i.i.d.
// Gaussian noise, repeated for a random duration per phoneme.
// ===========================================================================

struct SynthSpec {
  std::uint64_t seed = 1;
  int num_words = 40;
  int num_phonemes = 16;
  int word_len_min = 2, word_len_max = 5;           // phonemes per word
  int utt_len_min = 2, utt_len_max = 6;             // words per utterance
  int frames_per_phoneme_min = 4, frames_per_phoneme_max = 8;
  int feature_dim = 16;
  double noise_std = 0.3;
  int train_utts = 2000, dev_utts = 200, test_utts = 200;

  void validate() const {
    if (num_words < 1 || num_phonemes < 2) throw InputError("synth: need >= 1 word, >= 2 phonemes");
    if (word_len_min < 1 || word_len_max < word_len_min)
      throw InputError("synth: bad word length range");
    if (utt_len_min < 1 || utt_len_max < utt_len_min)
      throw InputError("synth: bad utterance length range");
    if (frames_per_phoneme_min < 1 || frames_per_phoneme_max < frames_per_phoneme_min)
      throw InputError("synth: bad frames-per-phoneme range");
    if (feature_dim < 1) throw InputError("synth: feature_dim must be >= 1");
    if (noise_std < 0) throw InputError("synth: noise_std must be >= 0");
    if (train_utts < 0 || dev_utts < 0 || test_utts < 0)
      throw InputError("synth: negative utterance count");
  }
};

// ---------------------------------------------------------------------------
// Feature file format "FEAT": magic, u32 version=1, u32 T, u32 m, then
// T*m float32 little-endian values row-major.
// ---------------------------------------------------------------------------

inline void write_features(const std::string& path, const FeatureMatrix& fm) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw IoError("cannot open " + path + " for writing");
  os.write("FEAT", 4);
  write_u32(os, 1);
  write_u32(os, static_cast<std::uint32_t>(fm.frames));
  write_u32(os, static_cast<std::uint32_t>(fm.dim));
  for (double v : fm.values) write_f32(os, static_cast<float>(v));
  if (!os) throw IoError("write failed: " + path);
}

inline FeatureMatrix read_features(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw IoError("cannot open " + path);
  char magic[4];
  read_raw(is, magic, 4, "feature magic of " + path);
  if (std::memcmp(magic, "FEAT", 4) != 0) throw FormatError("bad feature magic in " + path);
  const std::uint32_t version = read_u32(is, "feature version of " + path);
  if (version != 1)
    throw FormatError("unsupported feature version " + std::to_string(version) + " in " + path);
  FeatureMatrix fm;
  fm.frames = read_u32(is, "frame count of " + path);
  fm.dim = read_u32(is, "feature dim of " + path);
  if (static_cast<std::uint64_t>(fm.frames) * fm.dim > (1u << 30))
    throw FormatError("implausible feature size in " + path);
  fm.values.resize(fm.frames * fm.dim);
  for (double& v : fm.values) v = static_cast<double>(read_f32(is, "feature data of " + path));
  if (is.peek() != std::char_traits<char>::eof())
    throw FormatError("trailing bytes after feature data in " + path);
  return fm;
}

// ---------------------------------------------------------------------------
// Manifest format: `utt_id<TAB>relative/path.feat<TAB>transcript` per line.
// ---------------------------------------------------------------------------

struct ManifestRow {
  std::string utt_id;
  std::string feature_path;  // relative to the manifest's directory
  std::string transcript;
};

using Manifest = std::vector<ManifestRow>;

inline void save_manifest(const std::string& path, const Manifest& rows) {
  std::string text;
  for (const auto& r : rows) {
    text += r.utt_id;
    text += '\t';
    text += r.feature_path;
    text += '\t';
    text += r.transcript;
    text += '\n';
  }
  write_text_file(path, text);
}

inline Manifest load_manifest(const std::string& path) {
  Manifest rows;
  std::size_t lineno = 0;
  std::set<std::string> seen;
  for (const std::string& line : read_lines(path)) {
    ++lineno;
    if (line.empty()) continue;
    const std::vector<std::string> fields = split(line, '\t');
    if (fields.size() != 3)
      throw FormatError("manifest line " + std::to_string(lineno) + " needs 3 TAB fields: " + path);
    if (fields[0].empty() || fields[1].empty())
      throw FormatError("manifest line " + std::to_string(lineno) + " is incomplete: " + path);
    if (!seen.insert(fields[0]).second)
      throw FormatError("duplicate utterance id '" + fields[0] + "' in " + path);
    rows.push_back(ManifestRow{fields[0], fields[1], fields[2]});
  }
  return rows;
}

// ---------------------------------------------------------------------------
// Corpus synthesis.
// ---------------------------------------------------------------------------

struct SynthResult {
  std::string out_dir;
  Lexicon lexicon;
  std::vector<std::string> words;              // in creation order
  std::vector<std::string> phoneme_symbols;    // without blank
  std::map<std::string, Manifest> manifests;   // split -> rows
};

// Writes, under out_dir:
//   lexicon.tsv, words.txt, phones.vocab,
//   feats/<split>/<utt>.feat, manifest_<split>.tsv
// Identical spec -> byte-identical tree: all randomness flows from one
// seeded stream consumed in a fixed order.
inline SynthResult synthesize(const SynthSpec& spec, const std::string& out_dir) {
  namespace fs = std::filesystem;
  spec.validate();
  Rng rng(mix_seed(spec.seed, "corpus"));

  // Phoneme inventory with 1-2 letter spellings and prototype embeddings.
  std::vector<std::string> phones;
  std::vector<std::string> spellings;
  std::vector<std::vector<double>> prototypes;
  for (int p = 0; p < spec.num_phonemes; ++p) {
    char name[16];
    std::snprintf(name, sizeof(name), "P%02d", p);
    phones.emplace_back(name);
    const int len = rng.uniform_range(1, 2);
    std::string sp;
    for (int i = 0; i < len; ++i) sp += static_cast<char>('a' + rng.uniform_int(26));
    spellings.push_back(sp);
    std::vector<double> proto(static_cast<std::size_t>(spec.feature_dim));
    for (double& v : proto) v = rng.gauss(0.0, 1.0);
    prototypes.push_back(std::move(proto));
  }

  // Words: random phoneme sequences with unique concatenated spellings.
  SynthResult result;
  result.out_dir = out_dir;
  result.phoneme_symbols = phones;
  std::set<std::string> used;
  std::vector<std::vector<int>> word_phones;
  int attempts = 0;
  while (static_cast<int>(result.words.size()) < spec.num_words) {
    if (++attempts > 200 * spec.num_words)
      throw InputError("synth: cannot build enough distinct words; enlarge the phoneme "
                       "inventory or word length range");
    const int len = rng.uniform_range(spec.word_len_min, spec.word_len_max);
    std::vector<int> seq(static_cast<std::size_t>(len));
    std::string spelling;
    for (int& ph : seq) {
      ph = rng.uniform_int(spec.num_phonemes);
      spelling += spellings[static_cast<std::size_t>(ph)];
    }
    if (!used.insert(spelling).second) continue;
    std::vector<std::string> ph_syms;
    for (int ph : seq) ph_syms.push_back(phones[static_cast<std::size_t>(ph)]);
    result.lexicon.add(spelling, std::move(ph_syms));
    result.words.push_back(spelling);
    word_phones.push_back(std::move(seq));
  }

  fs::create_directories(fs::path(out_dir));
  result.lexicon.save((fs::path(out_dir) / "lexicon.tsv").string());
  write_text_file((fs::path(out_dir) / "words.txt").string(), join(result.words, "\n") + "\n");
  vocab_from_lexicon(result.lexicon).save((fs::path(out_dir) / "phones.vocab").string());

  const std::vector<std::pair<std::string, int>> splits{
      {"train", spec.train_utts}, {"dev", spec.dev_utts}, {"test", spec.test_utts}};
  for (const auto& [split, count] : splits) {
    fs::create_directories(fs::path(out_dir) / "feats" / split);
    Manifest manifest;
    for (int u = 0; u < count; ++u) {
      char utt_id[32];
      std::snprintf(utt_id, sizeof(utt_id), "%s_%06d", split.c_str(), u);

      const int n_words = rng.uniform_range(spec.utt_len_min, spec.utt_len_max);
      std::vector<std::string> utt_words;
      FeatureMatrix fm;
      fm.dim = static_cast<std::size_t>(spec.feature_dim);
      for (int w = 0; w < n_words; ++w) {
        const int wi = rng.uniform_int(spec.num_words);
        utt_words.push_back(result.words[static_cast<std::size_t>(wi)]);
        for (int ph : word_phones[static_cast<std::size_t>(wi)]) {
          const int dur = rng.uniform_range(spec.frames_per_phoneme_min,
                                            spec.frames_per_phoneme_max);
          const auto& proto = prototypes[static_cast<std::size_t>(ph)];
          for (int f = 0; f < dur; ++f) {
            for (double pv : proto) fm.values.push_back(pv + rng.gauss(0.0, spec.noise_std));
            ++fm.frames;
          }
        }
      }

      const std::string rel = "feats/" + split + "/" + utt_id + ".feat";
      write_features((fs::path(out_dir) / rel).string(), fm);
      manifest.push_back(ManifestRow{utt_id, rel, join(utt_words, " ")});
    }
    save_manifest((fs::path(out_dir) / ("manifest_" + split + ".tsv")).string(), manifest);
    result.manifests[split] = std::move(manifest);
  }
  return result;
}

// ---------------------------------------------------------------------------
// Edit distance and word/character error rate.
// ---------------------------------------------------------------------------

struct EditStats {
  std::size_t distance = 0;
  std::size_t substitutions = 0;
  std::size_t insertions = 0;  // hyp tokens with no ref counterpart
  std::size_t deletions = 0;   // ref tokens missing from hyp
};

// Levenshtein distance between ref and hyp with unit costs; the operation
// counts come from one traced optimal alignment (ties prefer substitution,
// then deletion, then insertion).
template <typename Tok>
EditStats edit_distance(const std::vector<Tok>& ref, const std::vector<Tok>& hyp) {
  const std::size_t n = ref.size(), m = hyp.size();
  std::vector<std::size_t> dp((n + 1) * (m + 1));
  auto cell = [m](std::size_t i, std::size_t j) { return i * (m + 1) + j; };
  for (std::size_t i = 0; i <= n; ++i) dp[cell(i, 0)] = i;
  for (std::size_t j = 0; j <= m; ++j) dp[cell(0, j)] = j;
  for (std::size_t i = 1; i <= n; ++i) {
    for (std::size_t j = 1; j <= m; ++j) {
      const std::size_t sub = dp[cell(i - 1, j - 1)] + (ref[i - 1] == hyp[j - 1] ? 0 : 1);
      const std::size_t del = dp[cell(i - 1, j)] + 1;
      const std::size_t ins = dp[cell(i, j - 1)] + 1;
      dp[cell(i, j)] = std::min(sub, std::min(del, ins));
    }
  }

  EditStats stats;
  stats.distance = dp[cell(n, m)];
  std::size_t i = n, j = m;
  while (i > 0 || j > 0) {
    if (i > 0 && j > 0 &&
        dp[cell(i, j)] == dp[cell(i - 1, j - 1)] + (ref[i - 1] == hyp[j - 1] ? 0 : 1)) {
      if (!(ref[i - 1] == hyp[j - 1])) ++stats.substitutions;
      --i;
      --j;
    } else if (i > 0 && dp[cell(i, j)] == dp[cell(i - 1, j)] + 1) {
      ++stats.deletions;
      --i;
    } else {
      ++stats.insertions;
      --j;
    }
  }
  return stats;
}

enum class TokenMode { word, chars };

inline std::vector<std::string> error_rate_tokens(const std::string& text, TokenMode mode) {
  if (mode == TokenMode::word) return split_ws(text);
  std::vector<std::string> out;
  for (const auto& cp : utf8_codepoints(text)) {
    if (cp.size() == 1 && std::isspace(static_cast<unsigned char>(cp[0]))) continue;
    out.push_back(cp);
  }
  return out;
}

struct WerResult {
  double wer = 0.0;
  EditStats stats;            // summed over utterances
  std::size_t ref_tokens = 0;
};

// Corpus-level error rate: total edit distance over total reference length
// (an empty reference set scores errors / max(1, 0)). refs and hyps are
// parallel; mismatched lengths are a data error.
inline WerResult wer(const std::vector<std::string>& refs, const std::vector<std::string>& hyps,
                     TokenMode mode = TokenMode::word) {
  if (refs.size() != hyps.size())
    throw DataError("wer: got " + std::to_string(refs.size()) + " references but " +
                    std::to_string(hyps.size()) + " hypotheses");
  WerResult res;
  for (std::size_t i = 0; i < refs.size(); ++i) {
    const auto r = error_rate_tokens(refs[i], mode);
    const auto h = error_rate_tokens(hyps[i], mode);
    const EditStats s = edit_distance(r, h);
    res.stats.distance += s.distance;
    res.stats.substitutions += s.substitutions;
    res.stats.insertions += s.insertions;
    res.stats.deletions += s.deletions;
    res.ref_tokens += r.size();
  }
  res.wer = static_cast<double>(res.stats.distance) /
            static_cast<double>(std::max<std::size_t>(1, res.ref_tokens));
  return res;
}

}  // namespace multiunit
