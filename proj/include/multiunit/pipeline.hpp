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

#include <atomic>
#include <filesystem>
#include <iostream>
#include <mutex>
#include <optional>
#include <set>
#include <thread>

#include "multiunit/base.hpp"
#include "multiunit/config.hpp"
#include "multiunit/corpus.hpp"
#include "multiunit/ctc.hpp"
#include "multiunit/fusion.hpp"
#include "multiunit/model.hpp"
#include "multiunit/units.hpp"

namespace multiunit {

// ===========================================================================
// End-to-end runs driven by a KeyValues config. Every function here is
// deterministic given (config, seed): identical runs produce byte-identical
// manifests, checkpoints, loss traces, and N-best files.
// ===========================================================================

namespace fsys = std::filesystem;

// ---------------------------------------------------------------------------
// Unit resources.
// ---------------------------------------------------------------------------

class UnitResources {
 public:
  void add(Tokenizer tok) { tokenizers_.emplace(tok.kind(), std::move(tok)); }

  bool has(UnitKind kind) const { return tokenizers_.count(kind) > 0; }

  const Tokenizer& tokenizer(UnitKind kind) const {
    auto it = tokenizers_.find(kind);
    if (it == tokenizers_.end())
      throw ConfigError(std::string("no unit resources configured for ") + unit_name(kind));
    return it->second;
  }

  const UnitVocabulary& vocab(UnitKind kind) const { return tokenizer(kind).vocab(); }

 private:
  std::map<UnitKind, Tokenizer> tokenizers_;
};

namespace detail {

inline std::string resolve_path(const KeyValues& kv, const std::string& key,
                                const std::string& default_basename) {
  if (kv.has(key)) return kv.get(key);
  return (fsys::path(kv.get_or("data.dir", ".")) / default_basename).string();
}

inline void require_file(const std::string& path, const std::string& flag) {
  if (!fsys::exists(fsys::path(path)))
    throw ConfigError("file '" + path + "' (from " + flag + ") does not exist");
}

}  // namespace detail

// Loads tokenizers for the requested unit kinds from the configured files:
//   units.bpe_model / units.wordpiece_vocab   (wordpiece)
//   units.char_vocab                          (char)
//   units.lexicon / units.phoneme_vocab       (phoneme)
//   units.pinyin_table / units.pinyin_vocab   (pinyin; vocab derived if unset)
//   units.wubi_table / units.wubi_vocab       (wubi; vocab derived if unset)
// Unset keys resolve to conventional names under data.dir.
inline UnitResources load_units(const KeyValues& kv, const std::set<UnitKind>& needed) {
  UnitResources units;
  for (UnitKind kind : needed) {
    switch (kind) {
      case UnitKind::wordpiece: {
        const std::string bpe_path = detail::resolve_path(kv, "units.bpe_model", "wordpiece.bpe");
        const std::string vocab_path =
            detail::resolve_path(kv, "units.wordpiece_vocab", "wordpiece.vocab");
        detail::require_file(bpe_path, "units.bpe_model");
        detail::require_file(vocab_path, "units.wordpiece_vocab");
        units.add(Tokenizer(UnitVocabulary::load(vocab_path, kind), BpeModel::load(bpe_path)));
        break;
      }
      case UnitKind::chars: {
        const std::string vocab_path = detail::resolve_path(kv, "units.char_vocab", "char.vocab");
        detail::require_file(vocab_path, "units.char_vocab");
        units.add(Tokenizer(UnitVocabulary::load(vocab_path, kind)));
        break;
      }
      case UnitKind::phoneme: {
        const std::string lex_path = detail::resolve_path(kv, "units.lexicon", "lexicon.tsv");
        const std::string vocab_path =
            detail::resolve_path(kv, "units.phoneme_vocab", "phones.vocab");
        detail::require_file(lex_path, "units.lexicon");
        detail::require_file(vocab_path, "units.phoneme_vocab");
        auto vocab = UnitVocabulary::load(vocab_path, kind);
        auto lexicon = Lexicon::load(lex_path);
        lexicon.validate_against(vocab);
        units.add(Tokenizer(std::move(vocab), std::nullopt, std::move(lexicon)));
        break;
      }
      case UnitKind::pinyin:
      case UnitKind::wubi: {
        const std::string base = kind == UnitKind::pinyin ? "pinyin" : "wubi";
        const std::string table_path =
            detail::resolve_path(kv, "units." + base + "_table", base + ".tsv");
        detail::require_file(table_path, "units." + base + "_table");
        auto table = MappingTable::load(table_path);
        const std::string vocab_key = "units." + base + "_vocab";
        UnitVocabulary vocab = kv.has(vocab_key)
                                   ? UnitVocabulary::load(kv.get(vocab_key), kind)
                                   : vocab_from_table(table, kind);
        units.add(Tokenizer(std::move(vocab), std::nullopt, std::nullopt, std::move(table)));
        break;
      }
    }
  }
  return units;
}

// ---------------------------------------------------------------------------
// Dataset.
// ---------------------------------------------------------------------------

struct Utterance {
  std::string id;
  FeatureMatrix feats;
  std::string transcript;
  std::map<UnitKind, TokenSequence> tokens;
};

struct Dataset {
  std::vector<Utterance> utts;
  std::size_t oov_skipped = 0;
};

// Loads features and tokenizes transcripts for the needed unit kinds.
// OOV policy: "error" (default) aborts with the offending word and utterance;
// "skip" drops the utterance and counts it.
inline Dataset load_dataset(const std::string& manifest_path, const UnitResources& units,
                            const std::set<UnitKind>& needed, bool oov_skip) {
  const Manifest manifest = load_manifest(manifest_path);
  const fsys::path base = fsys::path(manifest_path).parent_path();
  Dataset ds;
  ds.utts.reserve(manifest.size());
  for (const ManifestRow& row : manifest) {
    Utterance utt;
    utt.id = row.utt_id;
    utt.transcript = row.transcript;
    try {
      for (UnitKind kind : needed) utt.tokens[kind] = units.tokenizer(kind).tokenize(row.transcript);
    } catch (const OovError& e) {
      if (oov_skip) {
        ++ds.oov_skipped;
        continue;
      }
      throw DataError("utterance " + row.utt_id + ": " + e.what());
    }
    utt.feats = read_features((base / row.feature_path).string());
    ds.utts.push_back(std::move(utt));
  }
  return ds;
}

inline std::set<UnitKind> needed_units(const ModelConfig& cfg) {
  std::set<UnitKind> needed{cfg.primary_unit};
  for (const TapSpec& tap : cfg.taps) needed.insert(tap.unit);
  return needed;
}

// Model config from the run config, with vocabulary sizes taken from the
// loaded unit resources.
inline ModelConfig model_config_from(const KeyValues& kv, const UnitResources& units) {
  ModelConfig cfg = ModelConfig::from_keyvalues(kv);
  cfg.primary_vocab_size = units.vocab(cfg.primary_unit).size();
  for (const TapSpec& tap : cfg.taps)
    cfg.unit_vocab_sizes[tap.unit] = units.vocab(tap.unit).size();
  cfg.validate();
  return cfg;
}

// ---------------------------------------------------------------------------
// Training.
// ---------------------------------------------------------------------------

struct TrainResult {
  std::string checkpoint_path;
  std::string loss_log_path;
  int steps = 0;
  std::size_t skipped_utterances = 0;  // infeasible alignments across all steps
  std::size_t oov_skipped = 0;
  LossBreakdown last_means;
};

// Trains per the config and writes <out_dir>/model.ckpt plus a per-step loss
// trace <out_dir>/loss_log.tsv. Trace columns: step, backbone CTC, the AED
// term when an included decoder exists, one column per weight>0 tap in config
// order, and the weighted total; all values are per-utterance batch means.
// Weight-0 taps contribute no column, so their traces are bit-identical to a
// run without the tap. `resume_ckpt` continues from saved weights (fresh
// optimizer state, batch stream restarted at step 1).
inline TrainResult train_model(const KeyValues& kv, const std::string& out_dir,
                               const std::string& resume_ckpt = "") {
  const std::uint64_t seed = kv.get_u64("train.seed", seed_from_env(1));
  const int steps = static_cast<int>(kv.get_int("train.steps", 3000));
  const int batch_size = static_cast<int>(kv.get_int("train.batch_size", 16));
  const double lr = kv.get_double("train.lr", 1e-3);
  const double weight_decay = kv.get_double("train.weight_decay", 1e-5);
  const std::string opt_name = kv.get_or("train.optimizer", "adam");
  if (steps < 1 || batch_size < 1) throw ConfigError("train: steps and batch_size must be >= 1");

  Optimizer opt;
  opt.learning_rate = lr;
  if (opt_name == "adam") opt.kind = OptimizerKind::adam;
  else if (opt_name == "sgd-momentum") opt.kind = OptimizerKind::sgd_momentum;
  else throw ConfigError("train.optimizer must be adam or sgd-momentum, got '" + opt_name + "'");

  // Resources, data, model.
  ModelConfig cfg;
  Params params;
  UnitResources units;
  if (!resume_ckpt.empty()) {
    auto [loaded_cfg, loaded_params] = load_checkpoint(resume_ckpt);
    cfg = std::move(loaded_cfg);
    params = std::move(loaded_params);
    units = load_units(kv, needed_units(cfg));
  } else {
    UnitResources tmp = load_units(kv, needed_units(ModelConfig::from_keyvalues(kv)));
    cfg = model_config_from(kv, tmp);
    units = std::move(tmp);
    params = init_params(cfg, seed);
  }

  const std::string manifest_path =
      detail::resolve_path(kv, "data.train_manifest", "manifest_train.tsv");
  detail::require_file(manifest_path, "data.train_manifest");
  const bool oov_skip = kv.get_or("units.oov", "error") == "skip";
  Dataset ds = load_dataset(manifest_path, units, needed_units(cfg), oov_skip);
  if (ds.utts.empty()) throw DataError("train: no usable utterances in " + manifest_path);

  // Trace columns (fixed for the run).
  std::vector<const TapSpec*> traced_taps;
  for (const TapSpec& tap : cfg.taps)
    if (tap.weight > 0) traced_taps.push_back(&tap);
  const bool trace_aed = cfg.decoder_layers > 0 && cfg.aed_weight > 0;

  fsys::create_directories(fsys::path(out_dir));
  const std::string log_path = (fsys::path(out_dir) / "loss_log.tsv").string();
  std::ofstream log(log_path, std::ios::binary);
  if (!log) throw IoError("cannot open " + log_path + " for writing");
  log << "# step\tbackbone_ctc";
  if (trace_aed) log << "\taed";
  for (const TapSpec* tap : traced_taps) log << "\tctc_" << unit_name(tap->unit);
  log << "\ttotal\n";

  const std::vector<TensorPtr> param_list = params.list();
  TrainResult result;
  result.oov_skipped = ds.oov_skipped;

  for (int step = 1; step <= steps; ++step) {
    // Stateless per-step batch stream: resume and fresh runs sample alike.
    Rng batch_rng(mix_seed(seed, "batch", static_cast<std::uint64_t>(step)));
    std::vector<std::size_t> batch(static_cast<std::size_t>(batch_size));
    for (std::size_t& idx : batch)
      idx = static_cast<std::size_t>(batch_rng.uniform_int(static_cast<int>(ds.utts.size())));

    params.zero_grads();
    LossBreakdown means;
    int used = 0;
    const double inv_batch = 1.0 / static_cast<double>(batch_size);
    for (std::size_t idx : batch) {
      const Utterance& utt = ds.utts[idx];
      JointLossResult res;
      try {
        res = joint_loss(cfg, params, utt.feats, utt.tokens);
      } catch (const InfeasibleAlignmentError&) {
        ++result.skipped_utterances;
        continue;
      }
      scale(res.total, inv_batch)->backward();
      means.backbone_ctc += res.breakdown.backbone_ctc;
      means.aed += res.breakdown.aed;
      for (const TapSpec* tap : traced_taps)
        means.per_tap[tap->unit] += res.breakdown.per_tap.at(tap->unit);
      means.total += res.breakdown.total;
      ++used;
    }

    if (used > 0) {
      const double inv_used = 1.0 / static_cast<double>(used);
      means.backbone_ctc *= inv_used;
      means.aed *= inv_used;
      for (auto& [unit, v] : means.per_tap) v *= inv_used;
      means.total *= inv_used;
      opt.step(param_list);
      if (weight_decay > 0) {
        // Decoupled decay, applied after the optimizer update.
        const double shrink = 1.0 - lr * weight_decay;
        for (const TensorPtr& p : param_list)
          for (double& w : p->data) w *= shrink;
      }
    } else {
      means.backbone_ctc = means.aed = means.total = std::numeric_limits<double>::quiet_NaN();
    }

    log << step << '\t' << fmt_double(means.backbone_ctc);
    if (trace_aed) log << '\t' << fmt_double(means.aed);
    for (const TapSpec* tap : traced_taps)
      log << '\t' << fmt_double(used > 0 ? means.per_tap[tap->unit]
                                         : std::numeric_limits<double>::quiet_NaN());
    log << '\t' << fmt_double(means.total) << '\n';
    result.last_means = means;
  }
  log.flush();
  if (!log) throw IoError("write failed: " + log_path);

  const std::string ckpt_path = (fsys::path(out_dir) / "model.ckpt").string();
  save_checkpoint(ckpt_path, cfg, params);
  result.checkpoint_path = ckpt_path;
  result.loss_log_path = log_path;
  result.steps = steps;
  if (result.skipped_utterances > 0)
    std::cerr << "warning: skipped " << result.skipped_utterances
              << " infeasible utterance draws during training\n";
  return result;
}

// ---------------------------------------------------------------------------
// Decoding and evaluation.
// ---------------------------------------------------------------------------

inline std::string first_pass_score_name(const ModelConfig& cfg) {
  return std::string("ctc_") + unit_name(cfg.primary_unit);
}

struct DecodeResult {
  std::string nbest_path;
  std::string top1_path;
  std::size_t utterances = 0;
};

// First-pass prefix beam search over the backbone head. Writes
// <out_dir>/nbest.tsv and <out_dir>/top1.tsv (utt_id<TAB>text).
inline DecodeResult decode_model(const KeyValues& kv, const std::string& ckpt_path,
                                 const std::string& manifest_path, const std::string& out_dir) {
  const auto beam = static_cast<std::size_t>(kv.get_int("decode.beam", 16));
  const auto nbest = static_cast<std::size_t>(kv.get_int("decode.nbest", 8));
  auto [cfg, params] = load_checkpoint(ckpt_path);
  UnitResources units = load_units(kv, {cfg.primary_unit});
  const UnitVocabulary& vocab = units.vocab(cfg.primary_unit);
  if (vocab.size() != cfg.primary_vocab_size)
    throw DataError("decode: vocabulary has " + std::to_string(vocab.size()) +
                    " symbols but checkpoint " + ckpt_path + " expects " +
                    std::to_string(cfg.primary_vocab_size));

  detail::require_file(manifest_path, "decode manifest");
  const Manifest manifest = load_manifest(manifest_path);
  const fsys::path base = fsys::path(manifest_path).parent_path();
  const std::string score_name = first_pass_score_name(cfg);

  std::vector<UttNBest> lists;
  lists.reserve(manifest.size());
  std::string top1_text;
  NoGradGuard ng;
  for (const ManifestRow& row : manifest) {
    const FeatureMatrix fm = read_features((base / row.feature_path).string());
    const TensorPtr hl = encode_features(cfg, params, fm, nullptr);
    const LogProbLattice lat = head_lattice(params, "head.backbone", hl);
    UttNBest utt;
    utt.utt_id = row.utt_id;
    utt.hyps = prefix_beam_search(lat, beam, nbest, score_name);
    top1_text += row.utt_id;
    top1_text += '\t';
    top1_text +=
        utt.hyps.empty() ? std::string() : units.tokenizer(cfg.primary_unit).detokenize(utt.hyps[0].ids);
    top1_text += '\n';
    lists.push_back(std::move(utt));
  }

  fsys::create_directories(fsys::path(out_dir));
  DecodeResult res;
  res.nbest_path = (fsys::path(out_dir) / "nbest.tsv").string();
  res.top1_path = (fsys::path(out_dir) / "top1.tsv").string();
  res.utterances = lists.size();
  save_nbest(res.nbest_path, lists, vocab);
  write_text_file(res.top1_path, top1_text);
  return res;
}

inline std::map<std::string, std::string> load_top1(const std::string& path) {
  std::map<std::string, std::string> out;
  std::size_t lineno = 0;
  for (const std::string& line : read_lines(path)) {
    ++lineno;
    if (line.empty()) continue;
    const auto tab = line.find('\t');
    if (tab == std::string::npos)
      throw FormatError("top1 line " + std::to_string(lineno) + " lacks a TAB: " + path);
    if (!out.emplace(line.substr(0, tab), line.substr(tab + 1)).second)
      throw DataError("duplicate utterance id in " + path + " line " + std::to_string(lineno));
  }
  return out;
}

// WER of a top-1 file against manifest transcripts, aligned by utterance id.
inline WerResult evaluate_top1(const std::string& top1_path, const std::string& manifest_path,
                               TokenMode mode = TokenMode::word) {
  const Manifest manifest = load_manifest(manifest_path);
  const std::map<std::string, std::string> hyps_by_id = load_top1(top1_path);
  std::vector<std::string> refs, hyps;
  refs.reserve(manifest.size());
  for (const ManifestRow& row : manifest) {
    auto it = hyps_by_id.find(row.utt_id);
    if (it == hyps_by_id.end())
      throw DataError("no hypothesis for utterance " + row.utt_id + " in " + top1_path);
    refs.push_back(row.transcript);
    hyps.push_back(it->second);
  }
  if (hyps_by_id.size() != manifest.size())
    throw DataError(top1_path + " contains hypotheses for utterances not in " + manifest_path);
  return wer(refs, hyps, mode);
}

// ---------------------------------------------------------------------------
// Auxiliary score attachment (rescoring inputs).
// ---------------------------------------------------------------------------

enum class AuxKind {
  standalone_ctc,  // backbone head of a separately trained CTC model
  tap_ctc,         // auxiliary tap head of the first-pass model
  aed              // attention-decoder score of the first-pass model
};

struct AttachSpec {
  AuxKind kind = AuxKind::standalone_ctc;
  UnitKind unit = UnitKind::phoneme;  // unused for aed
  std::string ckpt_path;              // scoring model
  std::string score_name;             // e.g. "ctc_phoneme" / "aed"
};

// Attaches one named score to every hypothesis in every list. Hypotheses are
// detokenized with the first-pass tokenizer and re-tokenized in the auxiliary
// unit; OOV or infeasible candidates score -inf (vetoed under any positive
// weight). Returns the number of -inf assignments.
inline std::size_t attach_scores(std::vector<UttNBest>& lists, const KeyValues& kv,
                                 const Tokenizer& primary_tokenizer,
                                 const std::string& manifest_path, const AttachSpec& spec) {
  auto [cfg, params] = load_checkpoint(spec.ckpt_path);
  detail::require_file(manifest_path, "rescore manifest");
  const Manifest manifest = load_manifest(manifest_path);
  const fsys::path base = fsys::path(manifest_path).parent_path();
  std::map<std::string, const ManifestRow*> rows;
  for (const ManifestRow& row : manifest) rows[row.utt_id] = &row;

  auto detok = [&primary_tokenizer](const TokenSequence& ids) {
    return primary_tokenizer.detokenize(ids);
  };

  const TapSpec* tap = nullptr;
  if (spec.kind == AuxKind::tap_ctc) {
    for (const TapSpec& t : cfg.taps)
      if (t.unit == spec.unit) tap = &t;
    if (!tap)
      throw ConfigError(std::string("checkpoint ") + spec.ckpt_path + " has no tap for unit " +
                        unit_name(spec.unit));
  }

  std::optional<Tokenizer> aux_tok;
  if (spec.kind != AuxKind::aed) {
    if (spec.kind == AuxKind::standalone_ctc && cfg.primary_unit != spec.unit)
      throw DataError(std::string("standalone scorer ") + spec.ckpt_path + " models " +
                      unit_name(cfg.primary_unit) + ", not " + unit_name(spec.unit));
    UnitResources aux_units = load_units(kv, {spec.unit});
    const int expected = spec.kind == AuxKind::standalone_ctc
                             ? cfg.primary_vocab_size
                             : cfg.unit_vocab_sizes.at(spec.unit);
    if (aux_units.vocab(spec.unit).size() != expected)
      throw DataError(std::string("vocabulary size mismatch for ") + unit_name(spec.unit) +
                      " against checkpoint " + spec.ckpt_path);
    aux_tok = aux_units.tokenizer(spec.unit);
  }

  std::size_t vetoed = 0;
  NoGradGuard ng;
  for (UttNBest& utt : lists) {
    auto row_it = rows.find(utt.utt_id);
    if (row_it == rows.end())
      throw DataError("utterance " + utt.utt_id + " not present in " + manifest_path);
    const FeatureMatrix fm = read_features((base / row_it->second->feature_path).string());

    if (spec.kind == AuxKind::aed) {
      const TensorPtr hl = encode_features(cfg, params, fm, nullptr);
      for (Hypothesis& h : utt.hyps) {
        double score = kNegInf;
        try {
          score = -aed_loss_node(cfg, params, hl, h.ids)->item();
        } catch (const InputError&) {
          // empty or out-of-vocabulary sequence: veto
        }
        if (score == kNegInf) ++vetoed;
        h.scores[spec.score_name] = score;
      }
      continue;
    }

    // CTC label scorer over one cached lattice per utterance.
    LogProbLattice lat;
    if (spec.kind == AuxKind::standalone_ctc) {
      const TensorPtr hl = encode_features(cfg, params, fm, nullptr);
      lat = head_lattice(params, "head.backbone", hl);
    } else {
      std::vector<TensorPtr> hs;
      encode_features(cfg, params, fm, &hs);
      lat = head_lattice(params, tap_head_prefix(spec.unit),
                         hs[static_cast<std::size_t>(tap->layer - 1)]);
    }
    vetoed += attach_aux_scores(
        utt.hyps, spec.score_name, detok,
        [&aux_tok](const std::string& text) { return aux_tok->tokenize(text); },
        [&lat](const TokenSequence& ids) { return ctc_label_score(lat, ids); });
  }
  return vetoed;
}

// ---------------------------------------------------------------------------
// Rescoring and tuning entry points.
// ---------------------------------------------------------------------------

struct RescoreRunResult {
  std::string nbest_path;  // rescored lists with attached scores
  std::string top1_path;
  std::size_t vetoed = 0;
};

inline RescoreRunResult rescore_lists(std::vector<UttNBest>& lists, const RescoreSpec& spec,
                                      const Tokenizer& primary_tokenizer,
                                      const UnitVocabulary& vocab, const std::string& out_dir) {
  std::string top1_text;
  for (UttNBest& utt : lists) {
    utt.hyps = rescore(utt.hyps, spec);
    top1_text += utt.utt_id;
    top1_text += '\t';
    top1_text += utt.hyps.empty() ? std::string() : primary_tokenizer.detokenize(utt.hyps[0].ids);
    top1_text += '\n';
  }
  fsys::create_directories(fsys::path(out_dir));
  RescoreRunResult res;
  res.nbest_path = (fsys::path(out_dir) / "rescored.tsv").string();
  res.top1_path = (fsys::path(out_dir) / "top1.tsv").string();
  save_nbest(res.nbest_path, lists, vocab);
  write_text_file(res.top1_path, top1_text);
  return res;
}

inline std::vector<TuneExample> tune_examples(const std::vector<UttNBest>& lists,
                                              const std::string& manifest_path) {
  const Manifest manifest = load_manifest(manifest_path);
  std::map<std::string, const std::string*> refs;
  for (const ManifestRow& row : manifest) refs[row.utt_id] = &row.transcript;
  std::vector<TuneExample> out;
  out.reserve(lists.size());
  for (const UttNBest& utt : lists) {
    auto it = refs.find(utt.utt_id);
    if (it == refs.end())
      throw DataError("utterance " + utt.utt_id + " not present in " + manifest_path);
    out.push_back(TuneExample{utt.hyps, *it->second});
  }
  return out;
}

// ---------------------------------------------------------------------------
// Layer sweep.
// ---------------------------------------------------------------------------

struct SweepRow {
  int layer = 0;  // 0 = no-tap baseline
  long long seed = 0;
  double dev_wer = 0.0;
  double test_wer = 0.0;
  std::string run_dir;
};

struct SweepResult {
  std::vector<SweepRow> rows;  // ordered by (layer, seed)
  std::string report_path;
  std::string summary_path;
};

// Trains one model per (tap layer, seed), decodes dev and test, and reports
// WER. Layer 0 is the no-tap baseline. `sweep.jobs` workers run trainings in
// parallel; rows and files are written in (layer, seed) order regardless.
inline SweepResult sweep(const KeyValues& kv, const std::string& out_dir) {
  const ModelConfig base_cfg = ModelConfig::from_keyvalues(kv);
  const UnitKind unit = unit_from_name(kv.get_or("sweep.unit", "phoneme"));
  const double weight = kv.get_double("sweep.weight", 0.1);
  std::vector<long long> layers =
      kv.get_int_list("sweep.layers", {0, (base_cfg.layers + 1) / 2, base_cfg.layers});
  std::vector<long long> seeds = kv.get_int_list("sweep.seeds", {1, 2, 3, 4, 5});
  const int jobs = static_cast<int>(kv.get_int("sweep.jobs", 1));
  if (jobs < 1) throw ConfigError("sweep.jobs must be >= 1");
  std::sort(layers.begin(), layers.end());
  layers.erase(std::unique(layers.begin(), layers.end()), layers.end());
  std::sort(seeds.begin(), seeds.end());
  seeds.erase(std::unique(seeds.begin(), seeds.end()), seeds.end());
  for (long long l : layers)
    if (l < 0 || l > base_cfg.layers)
      throw ConfigError("sweep.layers entry " + std::to_string(l) + " outside 0.." +
                        std::to_string(base_cfg.layers));

  const std::string dev_manifest = detail::resolve_path(kv, "data.dev_manifest", "manifest_dev.tsv");
  const std::string test_manifest =
      detail::resolve_path(kv, "data.test_manifest", "manifest_test.tsv");
  detail::require_file(dev_manifest, "data.dev_manifest");
  detail::require_file(test_manifest, "data.test_manifest");

  struct Task {
    int layer;
    long long seed;
  };
  std::vector<Task> tasks;
  for (long long layer : layers)
    for (long long seed : seeds) tasks.push_back(Task{static_cast<int>(layer), seed});

  std::vector<SweepRow> rows(tasks.size());
  std::atomic<std::size_t> next{0};
  std::mutex io_mutex;
  auto worker = [&]() {
    while (true) {
      const std::size_t i = next.fetch_add(1);
      if (i >= tasks.size()) return;
      const Task& task = tasks[i];
      const std::string run_dir =
          (fsys::path(out_dir) / ("run_l" + std::to_string(task.layer) + "_s" +
                                  std::to_string(task.seed)))
              .string();
      KeyValues run_kv = kv;
      run_kv.set("train.seed", std::to_string(task.seed));
      run_kv.set("model.taps", task.layer == 0
                                   ? ""
                                   : std::string(unit_name(unit)) + ":" +
                                         std::to_string(task.layer) + ":" + fmt_double(weight));
      const TrainResult tr = train_model(run_kv, run_dir);
      const DecodeResult dev =
          decode_model(run_kv, tr.checkpoint_path, dev_manifest, run_dir + "/decode_dev");
      const DecodeResult test =
          decode_model(run_kv, tr.checkpoint_path, test_manifest, run_dir + "/decode_test");
      SweepRow row;
      row.layer = task.layer;
      row.seed = task.seed;
      row.dev_wer = evaluate_top1(dev.top1_path, dev_manifest).wer;
      row.test_wer = evaluate_top1(test.top1_path, test_manifest).wer;
      row.run_dir = run_dir;
      rows[i] = std::move(row);
      {
        std::lock_guard<std::mutex> lock(io_mutex);
        std::cerr << "sweep: layer " << task.layer << " seed " << task.seed
                  << " dev_wer " << rows[i].dev_wer << " test_wer " << rows[i].test_wer << "\n";
      }
    }
  };

  if (jobs == 1) {
    worker();
  } else {
    std::vector<std::thread> pool;
    for (int j = 0; j < jobs; ++j) pool.emplace_back(worker);
    for (std::thread& t : pool) t.join();
  }

  fsys::create_directories(fsys::path(out_dir));
  SweepResult result;
  result.rows = std::move(rows);
  result.report_path = (fsys::path(out_dir) / "report.tsv").string();
  result.summary_path = (fsys::path(out_dir) / "summary.tsv").string();

  std::string report = "#layer\tseed\tdev_wer\ttest_wer\n";
  for (const SweepRow& row : result.rows)
    report += std::to_string(row.layer) + "\t" + std::to_string(row.seed) + "\t" +
              fmt_double(row.dev_wer) + "\t" + fmt_double(row.test_wer) + "\n";
  write_text_file(result.report_path, report);

  std::string summary =
      "#layer\tmean_dev_wer\tmin_dev_wer\tmax_dev_wer\tmean_test_wer\tmin_test_wer\tmax_test_wer\n";
  for (long long layer : layers) {
    double sum_d = 0, min_d = 1e300, max_d = -1e300;
    double sum_t = 0, min_t = 1e300, max_t = -1e300;
    int n = 0;
    for (const SweepRow& row : result.rows) {
      if (row.layer != layer) continue;
      sum_d += row.dev_wer;
      min_d = std::min(min_d, row.dev_wer);
      max_d = std::max(max_d, row.dev_wer);
      sum_t += row.test_wer;
      min_t = std::min(min_t, row.test_wer);
      max_t = std::max(max_t, row.test_wer);
      ++n;
    }
    if (n == 0) continue;
    summary += std::to_string(layer) + "\t" + fmt_double(sum_d / n) + "\t" + fmt_double(min_d) +
               "\t" + fmt_double(max_d) + "\t" + fmt_double(sum_t / n) + "\t" + fmt_double(min_t) +
               "\t" + fmt_double(max_t) + "\n";
  }
  write_text_file(result.summary_path, summary);
  return result;
}

// ---------------------------------------------------------------------------
// Corpus synthesis and BPE training entry points.
// ---------------------------------------------------------------------------

inline SynthSpec synth_spec_from(const KeyValues& kv) {
  SynthSpec spec;
  spec.seed = kv.get_u64("synth.seed", seed_from_env(spec.seed));
  spec.num_words = static_cast<int>(kv.get_int("synth.num_words", spec.num_words));
  spec.num_phonemes = static_cast<int>(kv.get_int("synth.num_phonemes", spec.num_phonemes));
  spec.word_len_min = static_cast<int>(kv.get_int("synth.word_len_min", spec.word_len_min));
  spec.word_len_max = static_cast<int>(kv.get_int("synth.word_len_max", spec.word_len_max));
  spec.utt_len_min = static_cast<int>(kv.get_int("synth.utt_len_min", spec.utt_len_min));
  spec.utt_len_max = static_cast<int>(kv.get_int("synth.utt_len_max", spec.utt_len_max));
  spec.frames_per_phoneme_min =
      static_cast<int>(kv.get_int("synth.frames_per_phoneme_min", spec.frames_per_phoneme_min));
  spec.frames_per_phoneme_max =
      static_cast<int>(kv.get_int("synth.frames_per_phoneme_max", spec.frames_per_phoneme_max));
  spec.feature_dim = static_cast<int>(kv.get_int("synth.feature_dim", spec.feature_dim));
  spec.noise_std = kv.get_double("synth.noise_std", spec.noise_std);
  spec.train_utts = static_cast<int>(kv.get_int("synth.train_utts", spec.train_utts));
  spec.dev_utts = static_cast<int>(kv.get_int("synth.dev_utts", spec.dev_utts));
  spec.test_utts = static_cast<int>(kv.get_int("synth.test_utts", spec.test_utts));
  return spec;
}

struct TrainBpeResult {
  std::string bpe_path;
  std::string vocab_path;
  std::string char_vocab_path;  // empty unless requested
  int vocab_size = 0;
};

// Trains BPE on manifest transcripts; writes the merge model, the wordpiece
// vocabulary, and optionally a character vocabulary from the same text.
inline TrainBpeResult train_bpe_cmd(const std::string& manifest_path, std::size_t target_vocab,
                                    const std::string& bpe_out, const std::string& vocab_out,
                                    const std::string& char_vocab_out = "") {
  detail::require_file(manifest_path, "train-bpe manifest");
  const Manifest manifest = load_manifest(manifest_path);
  std::vector<std::string> lines;
  lines.reserve(manifest.size());
  for (const ManifestRow& row : manifest) lines.push_back(row.transcript);

  // The CLI-facing target counts blank and unk; the merge loop works on the
  // bare symbol inventory.
  if (target_vocab < 2) throw InputError("train-bpe: target vocabulary must be >= 2");
  const BpeModel model = train_bpe(lines, target_vocab - 2);
  const UnitVocabulary vocab = vocab_from_bpe(model);
  model.save(bpe_out);
  vocab.save(vocab_out);
  TrainBpeResult res{bpe_out, vocab_out, "", vocab.size()};
  if (!char_vocab_out.empty()) {
    char_vocab_from_corpus(lines).save(char_vocab_out);
    res.char_vocab_path = char_vocab_out;
  }
  return res;
}

}  // namespace multiunit
