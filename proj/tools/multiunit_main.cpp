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

// multiunit: train, decode, and rescore multi-unit CTC speech models on
// synthetic corpora. Every subcommand reads an optional `--config` file of
// `key = value` lines, then repeated `--set key=value` overrides, then its
// dedicated flags; flags always win. MULTIUNIT_SEED applies only when no
// seed is configured anywhere else.

#include <cstdint>
#include <iostream>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "multiunit/pipeline.hpp"

namespace mu = multiunit;

namespace {

struct CommonOpts {
  std::string config_path;
  std::vector<std::string> sets;
  std::int64_t seed = 0;
  CLI::Option* seed_opt = nullptr;
};

void add_common(CLI::App* cmd, CommonOpts& opts, bool with_seed = true) {
  cmd->add_option("--config", opts.config_path, "Config file of key = value lines");
  cmd->add_option("--set", opts.sets, "Override a config key, e.g. --set train.steps=200")
      ->take_all();
  if (with_seed) opts.seed_opt = cmd->add_option("--seed", opts.seed, "Random seed");
}

mu::KeyValues build_kv(const CommonOpts& opts, const std::string& seed_key = "") {
  mu::KeyValues kv;
  if (!opts.config_path.empty()) kv = mu::KeyValues::parse_file(opts.config_path);
  for (const std::string& s : opts.sets) {
    const auto eq = s.find('=');
    if (eq == std::string::npos)
      throw mu::ConfigError("--set expects key=value, got '" + s + "'");
    kv.set(mu::trim(s.substr(0, eq)), mu::trim(s.substr(eq + 1)));
  }
  if (!seed_key.empty() && opts.seed_opt != nullptr && opts.seed_opt->count() > 0)
    kv.set(seed_key, std::to_string(opts.seed));
  return kv;
}

std::vector<mu::RescoreSource> parse_sources(const std::vector<std::string>& flags,
                                             const mu::KeyValues& kv) {
  std::vector<std::string> specs = flags;
  if (specs.empty() && kv.has("rescore.sources")) {
    for (const std::string& part : mu::split(kv.get("rescore.sources"), ','))
      if (!mu::trim(part).empty()) specs.push_back(mu::trim(part));
  }
  std::vector<mu::RescoreSource> out;
  for (const std::string& s : specs) {
    const auto sep = s.find_last_of(":=");
    if (sep == std::string::npos)
      throw mu::ConfigError("source spec must be name:weight, got '" + s + "'");
    out.push_back(mu::RescoreSource{mu::trim(s.substr(0, sep)),
                                    mu::parse_double(mu::trim(s.substr(sep + 1)), "source weight")});
  }
  return out;
}

void print_wer(const mu::WerResult& w) {
  std::cout << "wer " << mu::fmt_double(w.wer) << "\n"
            << "substitutions " << w.stats.substitutions << "\n"
            << "deletions " << w.stats.deletions << "\n"
            << "insertions " << w.stats.insertions << "\n"
            << "ref_tokens " << w.ref_tokens << "\n";
}

// Attach flags shared by rescore and tune-lambda.
struct AttachOpts {
  std::string aux_ctc_ckpt;
  std::string aux_ctc_unit = "phoneme";
  std::vector<std::string> tap_units;
  bool attach_aed = false;
};

void add_attach(CLI::App* cmd, AttachOpts& opts) {
  cmd->add_option("--aux-ctc-ckpt", opts.aux_ctc_ckpt,
                  "Checkpoint of a standalone CTC model to score with");
  cmd->add_option("--aux-ctc-unit", opts.aux_ctc_unit,
                  "Unit modeled by --aux-ctc-ckpt (default phoneme)");
  cmd->add_option("--attach-tap", opts.tap_units,
                  "Attach tap_<unit> scores from the first-pass model's auxiliary head")
      ->take_all();
  cmd->add_flag("--attach-aed", opts.attach_aed,
                "Attach the first-pass model's attention-decoder score as 'aed'");
}

// Runs every requested attachment; returns names of the scores added.
std::vector<std::string> run_attach(std::vector<mu::UttNBest>& lists, const mu::KeyValues& kv,
                                    const mu::Tokenizer& primary_tok,
                                    const std::string& first_pass_ckpt,
                                    const std::string& manifest, const AttachOpts& opts) {
  std::vector<std::string> names;
  if (!opts.aux_ctc_ckpt.empty()) {
    mu::AttachSpec spec;
    spec.kind = mu::AuxKind::standalone_ctc;
    spec.unit = mu::unit_from_name(opts.aux_ctc_unit);
    spec.ckpt_path = opts.aux_ctc_ckpt;
    spec.score_name = std::string("ctc_") + mu::unit_name(spec.unit);
    const std::size_t vetoed = mu::attach_scores(lists, kv, primary_tok, manifest, spec);
    std::cerr << "attached " << spec.score_name << " (" << vetoed << " vetoed)\n";
    names.push_back(spec.score_name);
  }
  for (const std::string& u : opts.tap_units) {
    mu::AttachSpec spec;
    spec.kind = mu::AuxKind::tap_ctc;
    spec.unit = mu::unit_from_name(u);
    spec.ckpt_path = first_pass_ckpt;
    spec.score_name = std::string("tap_") + mu::unit_name(spec.unit);
    const std::size_t vetoed = mu::attach_scores(lists, kv, primary_tok, manifest, spec);
    std::cerr << "attached " << spec.score_name << " (" << vetoed << " vetoed)\n";
    names.push_back(spec.score_name);
  }
  if (opts.attach_aed) {
    mu::AttachSpec spec;
    spec.kind = mu::AuxKind::aed;
    spec.ckpt_path = first_pass_ckpt;
    spec.score_name = "aed";
    const std::size_t vetoed = mu::attach_scores(lists, kv, primary_tok, manifest, spec);
    std::cerr << "attached aed (" << vetoed << " vetoed)\n";
    names.push_back(spec.score_name);
  }
  return names;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"multi-unit CTC speech toolkit"};
  app.require_subcommand(1);

  // ---- synth ----
  auto* synth = app.add_subcommand("synth", "Generate a synthetic corpus");
  CommonOpts synth_common;
  std::string synth_out;
  synth->add_option("--out", synth_out, "Output corpus directory")->required();
  add_common(synth, synth_common);

  // ---- train-bpe ----
  auto* tbpe = app.add_subcommand("train-bpe", "Train a BPE wordpiece model from transcripts");
  std::string tbpe_manifest, tbpe_bpe_out, tbpe_vocab_out, tbpe_char_out;
  std::int64_t tbpe_vocab_size = 0;
  tbpe->add_option("--manifest", tbpe_manifest, "Manifest whose transcripts form the corpus")
      ->required();
  tbpe->add_option("--vocab-size", tbpe_vocab_size, "Target vocabulary size (incl. blank, unk)")
      ->required();
  tbpe->add_option("--bpe-out", tbpe_bpe_out, "Where to write the merge model")->required();
  tbpe->add_option("--vocab-out", tbpe_vocab_out, "Where to write the wordpiece vocabulary")
      ->required();
  tbpe->add_option("--char-vocab-out", tbpe_char_out,
                   "Also write a character vocabulary from the same text");

  // ---- train ----
  auto* train = app.add_subcommand("train", "Train a model");
  CommonOpts train_common;
  std::string train_out, train_resume;
  train->add_option("--out", train_out, "Run directory (checkpoint, loss log)")->required();
  train->add_option("--resume", train_resume, "Continue from an existing checkpoint");
  add_common(train, train_common);

  // ---- decode ----
  auto* decode = app.add_subcommand("decode", "First-pass N-best decoding");
  CommonOpts decode_common;
  std::string dec_ckpt, dec_manifest, dec_out;
  std::int64_t dec_beam = 0, dec_nbest = 0;
  decode->add_option("--ckpt", dec_ckpt, "Model checkpoint")->required();
  decode->add_option("--manifest", dec_manifest, "Manifest to decode")->required();
  decode->add_option("--out", dec_out, "Output directory (nbest.tsv, top1.tsv)")->required();
  auto* beam_opt = decode->add_option("--beam", dec_beam, "Beam width (default 16)");
  auto* nbest_opt = decode->add_option("--nbest", dec_nbest, "N-best size (default 8)");
  add_common(decode, decode_common, /*with_seed=*/false);

  // ---- rescore ----
  auto* rescore = app.add_subcommand("rescore", "Rescore an N-best list with auxiliary scores");
  CommonOpts res_common;
  AttachOpts res_attach;
  std::string res_nbest, res_ckpt, res_manifest, res_out;
  std::vector<std::string> res_sources;
  bool res_length_norm = false;
  rescore->add_option("--nbest", res_nbest, "First-pass N-best file")->required();
  rescore->add_option("--ckpt", res_ckpt, "First-pass checkpoint")->required();
  rescore->add_option("--manifest", res_manifest, "Manifest with features and references")
      ->required();
  rescore->add_option("--out", res_out, "Output directory")->required();
  add_attach(rescore, res_attach);
  rescore->add_option("--source", res_sources,
                      "Score combination term name:weight (repeatable)")
      ->take_all();
  rescore->add_flag("--length-norm", res_length_norm, "Normalize scores by hypothesis length");
  add_common(rescore, res_common, /*with_seed=*/false);

  // ---- tune-lambda ----
  auto* tune = app.add_subcommand("tune-lambda", "Grid-search one auxiliary score weight");
  CommonOpts tune_common;
  AttachOpts tune_attach;
  std::string tun_nbest, tun_ckpt, tun_manifest, tun_out, tun_score, tun_grid;
  tune->add_option("--nbest", tun_nbest, "Dev N-best file")->required();
  tune->add_option("--ckpt", tun_ckpt, "First-pass checkpoint")->required();
  tune->add_option("--manifest", tun_manifest, "Dev manifest with references")->required();
  tune->add_option("--out", tun_out, "Output directory (tuning.tsv)")->required();
  tune->add_option("--score-name", tun_score, "Score to tune (default: the attached one)");
  tune->add_option("--grid", tun_grid, "Comma-separated lambda grid; must contain 0");
  add_attach(tune, tune_attach);
  add_common(tune, tune_common, /*with_seed=*/false);

  // ---- eval ----
  auto* eval = app.add_subcommand("eval", "Score a top-1 file against references");
  std::string ev_hyp, ev_manifest, ev_mode = "word";
  eval->add_option("--hyp", ev_hyp, "top1.tsv (utt_id<TAB>text)")->required();
  eval->add_option("--manifest", ev_manifest, "Reference manifest")->required();
  eval->add_option("--mode", ev_mode, "word or char (default word)")
      ->check(CLI::IsMember({"word", "char"}));

  // ---- sweep ----
  auto* sweep = app.add_subcommand("sweep", "Train a (tap layer x seed) grid and report WER");
  CommonOpts sweep_common;
  std::string sweep_out;
  std::int64_t sweep_jobs = 0;
  sweep->add_option("--out", sweep_out, "Sweep output directory")->required();
  auto* jobs_opt = sweep->add_option("--jobs", sweep_jobs, "Parallel trainings (default 1)");
  add_common(sweep, sweep_common, /*with_seed=*/false);

  CLI11_PARSE(app, argc, argv);

  try {
    if (*synth) {
      const mu::KeyValues kv = build_kv(synth_common, "synth.seed");
      const mu::SynthResult r = mu::synthesize(mu::synth_spec_from(kv), synth_out);
      std::cout << "corpus " << r.out_dir << "\n"
                << "words " << r.words.size() << "\n"
                << "phonemes " << r.phoneme_symbols.size() << "\n";
      for (const auto& [split, manifest] : r.manifests)
        std::cout << split << "_utts " << manifest.size() << "\n";
    } else if (*tbpe) {
      const mu::TrainBpeResult r =
          mu::train_bpe_cmd(tbpe_manifest, static_cast<std::size_t>(tbpe_vocab_size), tbpe_bpe_out,
                            tbpe_vocab_out, tbpe_char_out);
      std::cout << "bpe_model " << r.bpe_path << "\n"
                << "vocab " << r.vocab_path << "\n"
                << "vocab_size " << r.vocab_size << "\n";
      if (!r.char_vocab_path.empty()) std::cout << "char_vocab " << r.char_vocab_path << "\n";
    } else if (*train) {
      const mu::KeyValues kv = build_kv(train_common, "train.seed");
      const mu::TrainResult r = mu::train_model(kv, train_out, train_resume);
      std::cout << "checkpoint " << r.checkpoint_path << "\n"
                << "loss_log " << r.loss_log_path << "\n"
                << "steps " << r.steps << "\n"
                << "final_total " << mu::fmt_double(r.last_means.total) << "\n";
    } else if (*decode) {
      mu::KeyValues kv = build_kv(decode_common);
      if (beam_opt->count() > 0) kv.set("decode.beam", std::to_string(dec_beam));
      if (nbest_opt->count() > 0) kv.set("decode.nbest", std::to_string(dec_nbest));
      const mu::DecodeResult r = mu::decode_model(kv, dec_ckpt, dec_manifest, dec_out);
      std::cout << "nbest " << r.nbest_path << "\n"
                << "top1 " << r.top1_path << "\n"
                << "utterances " << r.utterances << "\n";
    } else if (*rescore) {
      const mu::KeyValues kv = build_kv(res_common);
      auto [cfg, params] = mu::load_checkpoint(res_ckpt);
      mu::UnitResources units = mu::load_units(kv, {cfg.primary_unit});
      const mu::Tokenizer& tok = units.tokenizer(cfg.primary_unit);
      std::vector<mu::UttNBest> lists = mu::load_nbest(res_nbest, tok.vocab());
      run_attach(lists, kv, tok, res_ckpt, res_manifest, res_attach);
      mu::RescoreSpec spec;
      spec.first_pass = mu::first_pass_score_name(cfg);
      spec.sources = parse_sources(res_sources, kv);
      spec.length_norm = res_length_norm || kv.get_bool("rescore.length_norm", false);
      const mu::RescoreRunResult r = mu::rescore_lists(lists, spec, tok, tok.vocab(), res_out);
      std::cout << "rescored " << r.nbest_path << "\n"
                << "top1 " << r.top1_path << "\n";
      print_wer(mu::evaluate_top1(r.top1_path, res_manifest));
    } else if (*tune) {
      const mu::KeyValues kv = build_kv(tune_common);
      auto [cfg, params] = mu::load_checkpoint(tun_ckpt);
      mu::UnitResources units = mu::load_units(kv, {cfg.primary_unit});
      const mu::Tokenizer& tok = units.tokenizer(cfg.primary_unit);
      std::vector<mu::UttNBest> lists = mu::load_nbest(tun_nbest, tok.vocab());
      const std::vector<std::string> attached =
          run_attach(lists, kv, tok, tun_ckpt, tun_manifest, tune_attach);
      std::string score_name = tun_score;
      if (score_name.empty()) {
        if (attached.size() != 1)
          throw mu::ConfigError("tune-lambda: pass --score-name when attaching " +
                                std::to_string(attached.size()) + " scores");
        score_name = attached[0];
      }
      std::vector<double> grid = mu::default_lambda_grid();
      const std::string grid_text = !tun_grid.empty() ? tun_grid : kv.get_or("tune.grid", "");
      if (!grid_text.empty()) {
        grid.clear();
        for (const std::string& part : mu::split(grid_text, ','))
          grid.push_back(mu::parse_double(mu::trim(part), "tune grid"));
      }
      const std::vector<mu::TuneExample> dev = mu::tune_examples(lists, tun_manifest);
      const mu::TuneResult r = mu::tune_lambda(
          dev, score_name, grid, mu::first_pass_score_name(cfg),
          [&tok](const mu::TokenSequence& ids) { return tok.detokenize(ids); });
      mu::fsys::create_directories(mu::fsys::path(tun_out));
      const std::string report = (mu::fsys::path(tun_out) / "tuning.tsv").string();
      mu::save_tuning_report(report, r);
      double dev_wer = 0.0;
      for (const auto& [lambda, w] : r.curve)
        if (lambda == r.best_lambda) dev_wer = w;
      std::cout << "score " << score_name << "\n"
                << "best_lambda " << mu::fmt_double(r.best_lambda) << "\n"
                << "dev_wer " << mu::fmt_double(dev_wer) << "\n"
                << "report " << report << "\n";
    } else if (*eval) {
      const mu::TokenMode mode = ev_mode == "char" ? mu::TokenMode::chars : mu::TokenMode::word;
      print_wer(mu::evaluate_top1(ev_hyp, ev_manifest, mode));
    } else if (*sweep) {
      mu::KeyValues kv = build_kv(sweep_common);
      if (jobs_opt->count() > 0) kv.set("sweep.jobs", std::to_string(sweep_jobs));
      const mu::SweepResult r = mu::sweep(kv, sweep_out);
      std::cout << "report " << r.report_path << "\n"
                << "summary " << r.summary_path << "\n";
      for (const mu::SweepRow& row : r.rows)
        std::cout << "layer " << row.layer << " seed " << row.seed << " dev_wer "
                  << mu::fmt_double(row.dev_wer) << " test_wer " << mu::fmt_double(row.test_wer)
                  << "\n";
    }
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 0;
}
