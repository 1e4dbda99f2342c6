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
#include <functional>
#include <string>
#include <vector>

#include "multiunit/base.hpp"
#include "multiunit/corpus.hpp"
#include "multiunit/ctc.hpp"

namespace multiunit {

// ===========================================================================
// Acoustic-model-fusion rescoring of first-pass N-best lists:
//
//   combined(h) = first_pass(h) + sum_i weight_i * aux_score_i(h)
//
// The first-pass score has implicit weight 1. A -inf auxiliary score vetoes a
// hypothesis under any positive weight; weight-0 sources contribute exactly
// nothing (never NaN), so weight 0 reproduces first-pass order for any scores.
// ===========================================================================

struct RescoreSource {
  std::string name;
  double weight = 0.0;
};

struct RescoreSpec {
  std::string first_pass = "ctc_wordpiece";
  std::vector<RescoreSource> sources;
  bool length_norm = false;  // divide every score by max(1, |ids|)
};

inline double combined_score(const Hypothesis& h, const RescoreSpec& spec) {
  auto fetch = [&h](const std::string& name) {
    auto it = h.scores.find(name);
    if (it == h.scores.end())
      throw DataError("rescore: hypothesis lacks score '" + name + "'");
    return it->second;
  };
  const double norm =
      spec.length_norm ? static_cast<double>(std::max<std::size_t>(1, h.ids.size())) : 1.0;
  double total = fetch(spec.first_pass) / norm;
  for (const RescoreSource& src : spec.sources) {
    if (src.weight == 0.0) continue;  // exact identity; avoids 0 * -inf
    total += src.weight * (fetch(src.name) / norm);
  }
  return total;
}

// Reorder an N-best list by combined score, descending. The sort is stable,
// so equal combined scores (including the all--inf case) keep first-pass
// order. No hypotheses are added, dropped, or modified.
inline std::vector<Hypothesis> rescore(const std::vector<Hypothesis>& nbest,
                                       const RescoreSpec& spec) {
  std::vector<std::pair<double, std::size_t>> ranked;
  ranked.reserve(nbest.size());
  for (std::size_t i = 0; i < nbest.size(); ++i)
    ranked.emplace_back(combined_score(nbest[i], spec), i);
  std::stable_sort(ranked.begin(), ranked.end(),
                   [](const auto& a, const auto& b) { return a.first > b.first; });
  std::vector<Hypothesis> out;
  out.reserve(nbest.size());
  for (const auto& [score, idx] : ranked) out.push_back(nbest[idx]);
  return out;
}

// Attach one named auxiliary score to every hypothesis of one utterance.
// The hypothesis' primary ids are detokenized to text, re-tokenized in the
// auxiliary unit, and scored; hypotheses whose text cannot be re-tokenized
// (OOV against the auxiliary lexicon/table) receive -inf so any positive
// weight vetoes them. Returns the number of -inf assignments so callers can
// warn. An empty list is a no-op.
inline std::size_t attach_aux_scores(
    std::vector<Hypothesis>& nbest, const std::string& score_name,
    const std::function<std::string(const TokenSequence&)>& detokenize_primary,
    const std::function<TokenSequence(const std::string&)>& tokenize_aux,
    const std::function<double(const TokenSequence&)>& scorer) {
  std::size_t vetoed = 0;
  for (Hypothesis& h : nbest) {
    double score = kNegInf;
    try {
      score = scorer(tokenize_aux(detokenize_primary(h.ids)));
    } catch (const OovError&) {
      // leave -inf
    }
    if (score == kNegInf) ++vetoed;
    h.scores[score_name] = score;
  }
  return vetoed;
}

// ---------------------------------------------------------------------------
// Weight tuning on a development set.
// ---------------------------------------------------------------------------

struct TuneResult {
  double best_lambda = 0.0;
  std::vector<std::pair<double, double>> curve;  // (lambda, wer) in grid order
};

// One utterance of tuning data: the N-best list plus the reference text.
struct TuneExample {
  std::vector<Hypothesis> nbest;
  std::string ref;
};

inline std::vector<double> default_lambda_grid() {
  return {0.0, 0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7, 0.8, 0.9, 1.0, 1.5, 2.0};
}

// Grid search for the auxiliary weight minimizing dev WER. The grid must be
// non-empty and contain 0 (so the tuned result can never degrade below the
// first pass); ties prefer the smaller |lambda|, then the smaller lambda.
inline TuneResult tune_lambda(
    const std::vector<TuneExample>& dev, const std::string& score_name,
    const std::vector<double>& grid, const std::string& first_pass,
    const std::function<std::string(const TokenSequence&)>& detokenize_primary,
    TokenMode mode = TokenMode::word) {
  if (grid.empty()) throw InputError("tune_lambda: empty grid");
  if (std::find(grid.begin(), grid.end(), 0.0) == grid.end())
    throw InputError("tune_lambda: grid must contain 0");

  std::vector<std::string> refs;
  refs.reserve(dev.size());
  for (const TuneExample& ex : dev) refs.push_back(ex.ref);

  TuneResult result;
  double best_wer = std::numeric_limits<double>::infinity();
  for (double lambda : grid) {
    RescoreSpec spec;
    spec.first_pass = first_pass;
    spec.sources.push_back(RescoreSource{score_name, lambda});
    std::vector<std::string> hyps;
    hyps.reserve(dev.size());
    for (const TuneExample& ex : dev) {
      const std::vector<Hypothesis> reranked = rescore(ex.nbest, spec);
      hyps.push_back(reranked.empty() ? std::string() : detokenize_primary(reranked[0].ids));
    }
    const double w = wer(refs, hyps, mode).wer;
    result.curve.emplace_back(lambda, w);
    const bool better =
        w < best_wer ||
        (w == best_wer && (std::abs(lambda) < std::abs(result.best_lambda) ||
                           (std::abs(lambda) == std::abs(result.best_lambda) &&
                            lambda < result.best_lambda)));
    if (better) {
      best_wer = w;
      result.best_lambda = lambda;
    }
  }
  return result;
}

// Tuning report rows: `lambda<TAB>wer`.
inline void save_tuning_report(const std::string& path, const TuneResult& result) {
  std::string text = "#lambda\twer\n";
  for (const auto& [lambda, w] : result.curve)
    text += fmt_double(lambda) + "\t" + fmt_double(w) + "\n";
  text += "#best\t" + fmt_double(result.best_lambda) + "\n";
  write_text_file(path, text);
}

}  // namespace multiunit
