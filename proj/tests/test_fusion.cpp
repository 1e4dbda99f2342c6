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

#include <cmath>
#include <string>
#include <vector>

#include <gtest/gtest.h>

#include "multiunit/fusion.hpp"
#include "multiunit/rng.hpp"
#include "testutil.hpp"

namespace mu = multiunit;
using testutil::ScratchDir;

namespace {

mu::Hypothesis make_hyp(mu::TokenSequence ids, double fp, double aux) {
  mu::Hypothesis h;
  h.ids = std::move(ids);
  h.scores["fp"] = fp;
  h.scores["aux"] = aux;
  return h;
}

mu::RescoreSpec make_spec(double lambda, bool length_norm = false) {
  mu::RescoreSpec spec;
  spec.first_pass = "fp";
  spec.sources = {mu::RescoreSource{"aux", lambda}};
  spec.length_norm = length_norm;
  return spec;
}

std::vector<mu::TokenSequence> order_of(const std::vector<mu::Hypothesis>& hyps) {
  std::vector<mu::TokenSequence> out;
  for (const auto& h : hyps) out.push_back(h.ids);
  return out;
}

// Random N-best list whose scores are small multiples of 1/4, so every
// combination and shift below is exact in binary floating point and order
// comparisons cannot be perturbed by rounding.
std::vector<mu::Hypothesis> random_nbest(mu::Rng& rng, bool allow_neg_inf) {
  const std::size_t n = 1 + rng.uniform_int(6);
  std::vector<mu::Hypothesis> hyps;
  for (std::size_t i = 0; i < n; ++i) {
    const double fp = 0.25 * static_cast<double>(static_cast<int>(rng.uniform_int(65)) - 32);
    double aux = 0.25 * static_cast<double>(static_cast<int>(rng.uniform_int(65)) - 32);
    if (allow_neg_inf && rng.uniform_int(8) == 0) aux = mu::kNegInf;
    hyps.push_back(make_hyp({static_cast<int>(i) + 1}, fp, aux));
  }
  return hyps;
}

}  // namespace

TEST(CombinedScore, SumsWeightedSources) {
  const auto h = make_hyp({1, 2}, -3.0, -8.0);
  EXPECT_DOUBLE_EQ(mu::combined_score(h, make_spec(0.5)), -3.0 + 0.5 * -8.0);
}

TEST(CombinedScore, MissingScoreIsDataError) {
  mu::Hypothesis h;
  h.ids = {1};
  h.scores["fp"] = -1.0;
  EXPECT_THROW(mu::combined_score(h, make_spec(0.5)), mu::DataError);
  mu::RescoreSpec spec;
  spec.first_pass = "absent";
  EXPECT_THROW(mu::combined_score(h, spec), mu::DataError);
}

TEST(CombinedScore, ZeroWeightSkipsSourceExactly) {
  // weight 0 must not evaluate 0 * -inf (which would be NaN).
  const auto h = make_hyp({1}, -2.5, mu::kNegInf);
  EXPECT_DOUBLE_EQ(mu::combined_score(h, make_spec(0.0)), -2.5);
}

TEST(CombinedScore, LengthNormDividesByTokenCount) {
  const auto h = make_hyp({1, 2, 3, 4}, -8.0, -4.0);
  EXPECT_DOUBLE_EQ(mu::combined_score(h, make_spec(0.5, true)), (-8.0 + 0.5 * -4.0) / 4.0);
  const auto empty = make_hyp({}, -8.0, -4.0);  // divisor clamps at 1
  EXPECT_DOUBLE_EQ(mu::combined_score(empty, make_spec(0.5, true)), -8.0 + 0.5 * -4.0);
}

TEST(Rescore, LambdaZeroIsIdentity) {
  // A decoder emits N-best lists already sorted by the first-pass score;
  // rescoring such a list with weight 0 must reproduce it exactly,
  // including the relative order of first-pass ties.
  mu::Rng rng(101);
  for (int trial = 0; trial < 300; ++trial) {
    auto nbest = random_nbest(rng, /*allow_neg_inf=*/true);
    std::stable_sort(nbest.begin(), nbest.end(), [](const auto& a, const auto& b) {
      return a.scores.at("fp") > b.scores.at("fp");
    });
    const auto out = mu::rescore(nbest, make_spec(0.0));
    EXPECT_EQ(order_of(out), order_of(nbest));
  }
}

TEST(Rescore, ShiftingAuxScoresPreservesOrder) {
  // combined = fp + w * aux, so adding one constant to every aux score in a
  // list shifts all combined scores equally and cannot reorder anything.
  mu::Rng rng(202);
  for (int trial = 0; trial < 500; ++trial) {
    auto nbest = random_nbest(rng, /*allow_neg_inf=*/true);
    const double lambda = 0.25 * static_cast<double>(1 + rng.uniform_int(8));
    const auto before = order_of(mu::rescore(nbest, make_spec(lambda)));
    const double shift = 0.25 * static_cast<double>(static_cast<int>(rng.uniform_int(33)) - 16);
    for (auto& h : nbest) h.scores["aux"] += shift;
    const auto after = order_of(mu::rescore(nbest, make_spec(lambda)));
    EXPECT_EQ(after, before) << "trial " << trial;
  }
}

TEST(Rescore, NegInfAuxVetoesUnderPositiveWeight) {
  std::vector<mu::Hypothesis> nbest = {
      make_hyp({1}, 0.0, mu::kNegInf),  // best first pass, but vetoed
      make_hyp({2}, -5.0, -1.0),
      make_hyp({3}, -6.0, mu::kNegInf),
  };
  const auto out = mu::rescore(nbest, make_spec(0.5));
  ASSERT_EQ(out.size(), 3u);
  EXPECT_EQ(out[0].ids, (mu::TokenSequence{2}));
  // Both vetoed hypotheses sink to -inf and keep their relative order.
  EXPECT_EQ(out[1].ids, (mu::TokenSequence{1}));
  EXPECT_EQ(out[2].ids, (mu::TokenSequence{3}));
}

TEST(Rescore, StableOnTies) {
  std::vector<mu::Hypothesis> nbest = {
      make_hyp({1}, -1.0, -2.0),
      make_hyp({2}, -2.0, 0.0),  // ties hyp 1 at lambda 0.5
      make_hyp({3}, -9.0, 0.0),
  };
  const auto out = mu::rescore(nbest, make_spec(0.5));
  EXPECT_EQ(out[0].ids, (mu::TokenSequence{1}));
  EXPECT_EQ(out[1].ids, (mu::TokenSequence{2}));
}

TEST(AttachAuxScores, ScoresAndVetoesPerHypothesis) {
  std::vector<mu::Hypothesis> nbest = {make_hyp({1}, -1, 0), make_hyp({2}, -2, 0),
                                       make_hyp({3}, -3, 0)};
  const auto detok = [](const mu::TokenSequence& ids) {
    return ids == mu::TokenSequence{2} ? std::string("bad") : std::string("ok");
  };
  const auto tok_aux = [](const std::string& text) -> mu::TokenSequence {
    if (text == "bad") throw mu::OovError("bad", "aux lexicon");
    return {1, 2};
  };
  const auto scorer = [](const mu::TokenSequence& ids) {
    return -1.5 * static_cast<double>(ids.size());
  };
  const std::size_t vetoed = mu::attach_aux_scores(nbest, "aux2", detok, tok_aux, scorer);
  EXPECT_EQ(vetoed, 1u);
  EXPECT_DOUBLE_EQ(nbest[0].scores.at("aux2"), -3.0);
  EXPECT_EQ(nbest[1].scores.at("aux2"), mu::kNegInf);
  EXPECT_DOUBLE_EQ(nbest[2].scores.at("aux2"), -3.0);
}

TEST(AttachAuxScores, ScorerReturningNegInfCountsAsVeto) {
  std::vector<mu::Hypothesis> nbest = {make_hyp({1}, -1, 0)};
  const auto one = [](const mu::TokenSequence&) { return mu::TokenSequence{1}; };
  const std::size_t vetoed = mu::attach_aux_scores(
      nbest, "aux2", [](const mu::TokenSequence&) { return std::string("x"); },
      [](const std::string&) { return mu::TokenSequence{1}; },
      [](const mu::TokenSequence&) { return mu::kNegInf; });
  (void)one;
  EXPECT_EQ(vetoed, 1u);
  EXPECT_EQ(nbest[0].scores.at("aux2"), mu::kNegInf);
}

TEST(AttachAuxScores, EmptyListIsNoOp) {
  std::vector<mu::Hypothesis> empty;
  const std::size_t vetoed = mu::attach_aux_scores(
      empty, "aux2", [](const mu::TokenSequence&) { return std::string(); },
      [](const std::string&) { return mu::TokenSequence{}; },
      [](const mu::TokenSequence&) { return 0.0; });
  EXPECT_EQ(vetoed, 0u);
}

// ---------------------------------------------------------------------------
// Weight tuning.
// ---------------------------------------------------------------------------

namespace {

// Detokenizer used by the tuning tests: id n becomes the word "w<n>".
std::string word_detok(const mu::TokenSequence& ids) {
  std::string text;
  for (int id : ids) {
    if (!text.empty()) text += ' ';
    text += "w" + std::to_string(id);
  }
  return text;
}

}  // namespace

TEST(TuneLambda, FindsSmallestWinningWeight) {
  // First pass prefers the wrong hypothesis; the aux score prefers the right
  // one. lambda >= 0.2 flips the order, so 0.2 is the best (smallest) winner.
  mu::TuneExample ex;
  ex.ref = "w1 w2";
  ex.nbest = {make_hyp({1, 3}, 0.0, -10.0), make_hyp({1, 2}, -1.0, 0.0)};
  const std::vector<mu::TuneExample> dev = {ex};

  const auto result =
      mu::tune_lambda(dev, "aux", mu::default_lambda_grid(), "fp", word_detok);
  EXPECT_DOUBLE_EQ(result.best_lambda, 0.2);
  ASSERT_EQ(result.curve.size(), mu::default_lambda_grid().size());
  EXPECT_DOUBLE_EQ(result.curve[0].first, 0.0);
  EXPECT_DOUBLE_EQ(result.curve[0].second, 0.5);  // "w1 w3" vs "w1 w2"
  EXPECT_DOUBLE_EQ(result.curve[2].second, 0.0);  // lambda = 0.2
}

TEST(TuneLambda, GridMustBeNonEmptyAndContainZero) {
  const std::vector<mu::TuneExample> dev;
  EXPECT_THROW(mu::tune_lambda(dev, "aux", {}, "fp", word_detok), mu::InputError);
  EXPECT_THROW(mu::tune_lambda(dev, "aux", {0.5, 1.0}, "fp", word_detok), mu::InputError);
}

TEST(TuneLambda, TiesPreferSmallerLambda) {
  // The aux score agrees with the first pass everywhere, so every lambda
  // produces the same WER and 0 must win.
  mu::TuneExample ex;
  ex.ref = "w1";
  ex.nbest = {make_hyp({1}, 0.0, 0.0), make_hyp({2}, -1.0, -1.0)};
  const auto result = mu::tune_lambda({ex}, "aux", mu::default_lambda_grid(), "fp", word_detok);
  EXPECT_DOUBLE_EQ(result.best_lambda, 0.0);
  for (const auto& [lambda, w] : result.curve) EXPECT_DOUBLE_EQ(w, 0.0);
}

TEST(TuneLambda, TunedWerNeverExceedsFirstPass) {
  // Non-degradation: because the grid contains 0, the tuned dev WER is at
  // most the first-pass dev WER, whatever the aux scores look like.
  mu::Rng rng(303);
  for (int trial = 0; trial < 100; ++trial) {
    std::vector<mu::TuneExample> dev;
    const std::size_t n_utts = 1 + rng.uniform_int(4);
    for (std::size_t u = 0; u < n_utts; ++u) {
      mu::TuneExample ex;
      ex.ref = "w" + std::to_string(1 + rng.uniform_int(3));
      ex.nbest = random_nbest(rng, /*allow_neg_inf=*/true);
      dev.push_back(std::move(ex));
    }
    const auto result = mu::tune_lambda(dev, "aux", mu::default_lambda_grid(), "fp", word_detok);
    double first_pass_wer = -1, best_wer = 1e18;
    for (const auto& [lambda, w] : result.curve) {
      if (lambda == 0.0) first_pass_wer = w;
      best_wer = std::min(best_wer, w);
      if (lambda == result.best_lambda) EXPECT_DOUBLE_EQ(w, best_wer);
    }
    ASSERT_GE(first_pass_wer, 0.0);
    EXPECT_LE(best_wer, first_pass_wer);
  }
}

TEST(TuneLambda, ReportFormat) {
  ScratchDir dir("tune");
  mu::TuneResult result;
  result.best_lambda = 0.5;
  result.curve = {{0.0, 0.25}, {0.5, 0.125}};
  mu::save_tuning_report(dir.file("t.tsv"), result);
  EXPECT_EQ(testutil::slurp(dir.file("t.tsv")),
            "#lambda\twer\n0\t0.25\n0.5\t0.125\n#best\t0.5\n");
}
