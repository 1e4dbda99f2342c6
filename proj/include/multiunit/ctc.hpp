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
#include <string>
#include <vector>

#include "multiunit/base.hpp"
#include "multiunit/tensor.hpp"
#include "multiunit/units.hpp"

namespace multiunit {

// ===========================================================================
// Connectionist Temporal Classification (Graves et al., 2006) in log space,
// and first-pass decoding. Blank id is always 0. The collapse rule removes
// consecutive repeats first, blanks second.
// ===========================================================================

// T' x K grid of per-frame log-probabilities (rows normalized).
struct LogProbLattice {
  std::size_t frames = 0;   // T'
  std::size_t symbols = 0;  // K
  std::vector<double> logp; // row-major

  double at(std::size_t t, std::size_t k) const { return logp[t * symbols + k]; }
  double& at(std::size_t t, std::size_t k) { return logp[t * symbols + k]; }

  static LogProbLattice from_tensor(const Tensor& t) {
    if (t.rank() != 2) throw DimensionError("lattice: tensor must be 2-D");
    return LogProbLattice{t.shape[0], t.shape[1], t.data};
  }
};

inline TokenSequence collapse(const TokenSequence& path) {
  TokenSequence out;
  int prev = -1;
  for (int id : path) {
    if (id != prev) {
      if (id != UnitVocabulary::blank_id()) out.push_back(id);
      prev = id;
    }
  }
  return out;
}

inline std::size_t adjacent_repeats(const TokenSequence& labels) {
  std::size_t n = 0;
  for (std::size_t i = 1; i < labels.size(); ++i)
    if (labels[i] == labels[i - 1]) ++n;
  return n;
}

// A label sequence fits in T' frames iff T' >= |labels| + adjacent repeats
// (each repeat needs a separating blank frame).
inline bool ctc_feasible(std::size_t frames, const TokenSequence& labels) {
  return frames >= labels.size() + adjacent_repeats(labels);
}

namespace detail {

inline void validate_ctc_labels(const LogProbLattice& lat, const TokenSequence& labels) {
  if (lat.frames == 0 || lat.symbols < 2)
    throw DimensionError("ctc: lattice needs >= 1 frame and >= 2 symbols");
  for (int l : labels) {
    if (l == UnitVocabulary::blank_id()) throw InputError("ctc: labels must be blank-free");
    if (l < 0 || static_cast<std::size_t>(l) >= lat.symbols)
      throw InputError("ctc: label id " + std::to_string(l) + " outside lattice width " +
                       std::to_string(lat.symbols));
  }
}

// Extended label sequence with blanks interleaved: [-, l1, -, l2, ..., -].
inline TokenSequence extend_with_blanks(const TokenSequence& labels) {
  TokenSequence ext(2 * labels.size() + 1, UnitVocabulary::blank_id());
  for (std::size_t i = 0; i < labels.size(); ++i) ext[2 * i + 1] = labels[i];
  return ext;
}

// Forward lattice: alpha[t][s] = log P(prefix of paths consuming frames
// 0..t and ending in extended state s); emission at t included.
inline std::vector<double> ctc_alpha(const LogProbLattice& lat, const TokenSequence& ext) {
  const std::size_t T = lat.frames, S = ext.size();
  std::vector<double> alpha(T * S, kNegInf);
  alpha[0] = lat.at(0, static_cast<std::size_t>(ext[0]));
  if (S > 1) alpha[1] = lat.at(0, static_cast<std::size_t>(ext[1]));
  for (std::size_t t = 1; t < T; ++t) {
    const double* prev = alpha.data() + (t - 1) * S;
    double* cur = alpha.data() + t * S;
    for (std::size_t s = 0; s < S; ++s) {
      double acc = prev[s];
      if (s >= 1) acc = log_sum_exp(acc, prev[s - 1]);
      if (s >= 2 && ext[s] != UnitVocabulary::blank_id() && ext[s] != ext[s - 2])
        acc = log_sum_exp(acc, prev[s - 2]);
      if (acc != kNegInf) cur[s] = acc + lat.at(t, static_cast<std::size_t>(ext[s]));
    }
  }
  return alpha;
}

// Backward lattice: beta[t][s] = log P(consuming frames t+1..T-1 and
// finishing | in state s after frame t); emission at t excluded, so
// alpha[t][s] + beta[t][s] sums over s to log P(labels) for every t.
inline std::vector<double> ctc_beta(const LogProbLattice& lat, const TokenSequence& ext) {
  const std::size_t T = lat.frames, S = ext.size();
  std::vector<double> beta(T * S, kNegInf);
  beta[(T - 1) * S + (S - 1)] = 0.0;
  if (S > 1) beta[(T - 1) * S + (S - 2)] = 0.0;
  for (std::size_t t = T - 1; t-- > 0;) {
    const double* next = beta.data() + (t + 1) * S;
    double* cur = beta.data() + t * S;
    for (std::size_t s = 0; s < S; ++s) {
      double acc = next[s] == kNegInf
                       ? kNegInf
                       : next[s] + lat.at(t + 1, static_cast<std::size_t>(ext[s]));
      if (s + 1 < S && next[s + 1] != kNegInf)
        acc = log_sum_exp(acc, next[s + 1] + lat.at(t + 1, static_cast<std::size_t>(ext[s + 1])));
      if (s + 2 < S && ext[s + 2] != UnitVocabulary::blank_id() && ext[s + 2] != ext[s] &&
          next[s + 2] != kNegInf)
        acc = log_sum_exp(acc, next[s + 2] + lat.at(t + 1, static_cast<std::size_t>(ext[s + 2])));
      cur[s] = acc;
    }
  }
  return beta;
}

}  // namespace detail

// log P(labels | lattice); exactly -inf when the alignment is infeasible.
inline double ctc_label_score(const LogProbLattice& lat, const TokenSequence& labels) {
  detail::validate_ctc_labels(lat, labels);
  if (!ctc_feasible(lat.frames, labels)) return kNegInf;
  const TokenSequence ext = detail::extend_with_blanks(labels);
  const std::vector<double> alpha = detail::ctc_alpha(lat, ext);
  const std::size_t T = lat.frames, S = ext.size();
  double lp = alpha[(T - 1) * S + (S - 1)];
  if (S > 1) lp = log_sum_exp(lp, alpha[(T - 1) * S + (S - 2)]);
  return lp;
}

struct CtcResult {
  double loss = 0.0;                // -log P(labels | lattice)
  std::vector<double> grad_logits;  // T' x K, gradient w.r.t. pre-softmax logits
};

// CTC loss and its gradient with respect to the *logits* that produced the
// lattice (assuming lattice = log_softmax(logits)):
//   dL/du[t,k] = softmax(u)[t,k] - sum_{s : ext[s]=k} gamma_t(s)
// where gamma_t(s) = P(state s at time t | labels). Throws
// InfeasibleAlignmentError when the labels cannot align.
inline CtcResult ctc_loss(const LogProbLattice& lat, const TokenSequence& labels) {
  detail::validate_ctc_labels(lat, labels);
  if (!ctc_feasible(lat.frames, labels))
    throw InfeasibleAlignmentError(
        "ctc: " + std::to_string(labels.size()) + " labels (+" +
        std::to_string(adjacent_repeats(labels)) + " repeats) cannot align to " +
        std::to_string(lat.frames) + " frames");

  const TokenSequence ext = detail::extend_with_blanks(labels);
  const std::size_t T = lat.frames, K = lat.symbols, S = ext.size();
  const std::vector<double> alpha = detail::ctc_alpha(lat, ext);
  const std::vector<double> beta = detail::ctc_beta(lat, ext);

  double logp = alpha[(T - 1) * S + (S - 1)];
  if (S > 1) logp = log_sum_exp(logp, alpha[(T - 1) * S + (S - 2)]);

  CtcResult res;
  res.loss = -logp;
  res.grad_logits.assign(T * K, 0.0);
  std::vector<double> occ(K);
  for (std::size_t t = 0; t < T; ++t) {
    std::fill(occ.begin(), occ.end(), kNegInf);
    const double* a = alpha.data() + t * S;
    const double* b = beta.data() + t * S;
    for (std::size_t s = 0; s < S; ++s) {
      if (a[s] == kNegInf || b[s] == kNegInf) continue;
      const std::size_t k = static_cast<std::size_t>(ext[s]);
      occ[k] = log_sum_exp(occ[k], a[s] + b[s]);
    }
    double* g = res.grad_logits.data() + t * K;
    for (std::size_t k = 0; k < K; ++k) {
      const double posterior = occ[k] == kNegInf ? 0.0 : std::exp(occ[k] - logp);
      g[k] = std::exp(lat.at(t, k)) - posterior;
    }
  }
  return res;
}

// Autodiff node: CTC loss applied to pre-softmax logits (log_softmax fused).
inline TensorPtr ctc_loss_node(const TensorPtr& logits, const TokenSequence& labels) {
  if (logits->rank() != 2) throw DimensionError("ctc_loss_node: logits must be 2-D");
  // Normalize rows without growing the graph; the fused backward already
  // accounts for the softmax Jacobian.
  LogProbLattice lat;
  {
    NoGradGuard ng;
    lat = LogProbLattice::from_tensor(*log_softmax(logits));
  }
  CtcResult res = ctc_loss(lat, labels);
  auto node = detail::make_node({1}, {logits});
  node->data[0] = res.loss;
  if (node->requires_grad) {
    node->backward_fn = [grad = std::move(res.grad_logits)](Tensor& self) {
      const auto& logits = self.parents[0];
      logits->ensure_grad();
      const double up = self.grad[0];
      for (std::size_t i = 0; i < grad.size(); ++i) logits->grad[i] += up * grad[i];
    };
  }
  return node;
}

// ---------------------------------------------------------------------------
// Hypotheses and decoding.
// ---------------------------------------------------------------------------

// One decoded candidate: blank-free unit ids plus named log scores.
struct Hypothesis {
  TokenSequence ids;
  std::map<std::string, double> scores;
};

// Best-path decode: per-frame argmax (ties -> lowest id), then collapse.
// The score is the sum of the chosen per-frame log-probs.
inline Hypothesis greedy_decode(const LogProbLattice& lat, const std::string& score_name = "greedy") {
  if (lat.frames == 0 || lat.symbols == 0) throw DimensionError("greedy_decode: empty lattice");
  TokenSequence path(lat.frames);
  double score = 0.0;
  for (std::size_t t = 0; t < lat.frames; ++t) {
    std::size_t best = 0;
    for (std::size_t k = 1; k < lat.symbols; ++k)
      if (lat.at(t, k) > lat.at(t, best)) best = k;
    path[t] = static_cast<int>(best);
    score += lat.at(t, best);
  }
  Hypothesis h;
  h.ids = collapse(path);
  h.scores[score_name] = score;
  return h;
}

// Prefix beam search (Hannun et al., 2014): tracks per-prefix blank and
// non-blank log mass so all paths collapsing to the same prefix pool their
// probability. With beam_width >= the number of reachable prefixes the
// search is exhaustive and scores are exact label log-probabilities.
// Ties in total mass break toward the lexicographically smaller id sequence
// (lower token id first, then shorter prefix).
inline std::vector<Hypothesis> prefix_beam_search(const LogProbLattice& lat, std::size_t beam_width,
                                                  std::size_t nbest,
                                                  const std::string& score_name = "ctc") {
  if (lat.frames == 0 || lat.symbols < 2)
    throw DimensionError("prefix_beam_search: lattice needs >= 1 frame and >= 2 symbols");
  if (beam_width == 0 || nbest == 0 || nbest > beam_width)
    throw InputError("prefix_beam_search: need beam_width >= nbest >= 1");

  struct Mass {
    double blank = kNegInf;     // log mass of paths ending in blank
    double nonblank = kNegInf;  // log mass of paths ending in the last symbol
    double total() const { return log_sum_exp(blank, nonblank); }
  };

  std::map<TokenSequence, Mass> beam;
  beam[{}] = Mass{0.0, kNegInf};

  std::map<TokenSequence, Mass> next;
  for (std::size_t t = 0; t < lat.frames; ++t) {
    next.clear();
    for (const auto& [prefix, mass] : beam) {
      const double total = mass.total();
      // Blank keeps the prefix.
      {
        Mass& m = next[prefix];
        m.blank = log_sum_exp(m.blank, total + lat.at(t, 0));
      }
      for (std::size_t k = 1; k < lat.symbols; ++k) {
        const double yk = lat.at(t, k);
        if (!prefix.empty() && prefix.back() == static_cast<int>(k)) {
          // Repeated symbol without a blank collapses into the same prefix.
          {
            Mass& m = next[prefix];
            m.nonblank = log_sum_exp(m.nonblank, mass.nonblank + yk);
          }
          // Only mass that just emitted a blank may extend with the repeat.
          TokenSequence ext = prefix;
          ext.push_back(static_cast<int>(k));
          Mass& m = next[ext];
          m.nonblank = log_sum_exp(m.nonblank, mass.blank + yk);
        } else {
          TokenSequence ext = prefix;
          ext.push_back(static_cast<int>(k));
          Mass& m = next[ext];
          m.nonblank = log_sum_exp(m.nonblank, total + yk);
        }
      }
    }
    // Prune to beam_width, dropping zero-mass prefixes (e.g. a repeat
    // extension whose source had no blank-ending mass). std::map ordering
    // makes the sort tie-break deterministic: equal totals keep the
    // lexicographically smaller prefix.
    std::vector<std::pair<const TokenSequence*, Mass>> ranked;
    ranked.reserve(next.size());
    for (const auto& [prefix, mass] : next)
      if (mass.total() > kNegInf) ranked.emplace_back(&prefix, mass);
    std::stable_sort(ranked.begin(), ranked.end(), [](const auto& a, const auto& b) {
      const double ta = a.second.total(), tb = b.second.total();
      if (ta != tb) return ta > tb;
      return *a.first < *b.first;
    });
    if (ranked.size() > beam_width) ranked.resize(beam_width);
    std::map<TokenSequence, Mass> pruned;
    for (const auto& [prefix, mass] : ranked) pruned.emplace(*prefix, mass);
    beam.swap(pruned);
  }

  std::vector<std::pair<const TokenSequence*, double>> final_ranked;
  final_ranked.reserve(beam.size());
  for (const auto& [prefix, mass] : beam) final_ranked.emplace_back(&prefix, mass.total());
  std::stable_sort(final_ranked.begin(), final_ranked.end(), [](const auto& a, const auto& b) {
    if (a.second != b.second) return a.second > b.second;
    return *a.first < *b.first;
  });
  if (final_ranked.size() > nbest) final_ranked.resize(nbest);

  std::vector<Hypothesis> out;
  out.reserve(final_ranked.size());
  for (const auto& [prefix, score] : final_ranked) {
    Hypothesis h;
    h.ids = *prefix;
    h.scores[score_name] = score;
    out.push_back(std::move(h));
  }
  return out;
}

// ---------------------------------------------------------------------------
// N-best file format. One row per hypothesis:
//   utt_id <TAB> rank <TAB> name=value;name=value <TAB> symbol symbol ...
// Ranks are 1-based per utterance; the symbols field may be empty.
// ---------------------------------------------------------------------------

struct UttNBest {
  std::string utt_id;
  std::vector<Hypothesis> hyps;
};

inline void write_nbest(std::ostream& os, const std::vector<UttNBest>& utts,
                        const UnitVocabulary& vocab) {
  for (const auto& utt : utts) {
    for (std::size_t r = 0; r < utt.hyps.size(); ++r) {
      const Hypothesis& h = utt.hyps[r];
      std::vector<std::string> score_parts;
      for (const auto& [name, value] : h.scores) score_parts.push_back(name + "=" + fmt_double(value));
      std::vector<std::string> syms;
      syms.reserve(h.ids.size());
      for (int id : h.ids) syms.push_back(vocab.symbol(id));
      os << utt.utt_id << '\t' << (r + 1) << '\t' << join(score_parts, ";") << '\t'
         << join(syms, " ") << '\n';
    }
  }
  if (!os) throw IoError("n-best write failed");
}

inline void save_nbest(const std::string& path, const std::vector<UttNBest>& utts,
                       const UnitVocabulary& vocab) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw IoError("cannot open " + path + " for writing");
  write_nbest(os, utts, vocab);
}

inline std::vector<UttNBest> read_nbest(std::istream& is, const UnitVocabulary& vocab,
                                        const std::string& context = "n-best stream") {
  std::vector<UttNBest> out;
  std::map<std::string, std::size_t> index;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(is, line)) {
    ++lineno;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty()) continue;
    const std::vector<std::string> fields = split(line, '\t');
    if (fields.size() != 4)
      throw FormatError(context + " line " + std::to_string(lineno) + ": expected 4 TAB fields");
    const std::string& utt_id = fields[0];
    const long long rank = parse_int(fields[1], context + " rank");

    Hypothesis h;
    if (!fields[2].empty()) {
      for (const std::string& part : split(fields[2], ';')) {
        auto eq = part.find('=');
        if (eq == std::string::npos || eq == 0)
          throw FormatError(context + " line " + std::to_string(lineno) + ": bad score '" + part +
                            "'");
        h.scores[part.substr(0, eq)] = parse_double(part.substr(eq + 1), context + " score");
      }
    }
    for (const std::string& sym : split_ws(fields[3])) {
      const int id = vocab.id_of(sym);
      if (id < 0)
        throw DataError(context + " line " + std::to_string(lineno) + ": symbol '" + sym +
                        "' not in vocabulary");
      h.ids.push_back(id);
    }

    auto [it, inserted] = index.try_emplace(utt_id, out.size());
    if (inserted) out.push_back(UttNBest{utt_id, {}});
    UttNBest& slot = out[it->second];
    if (static_cast<std::size_t>(rank) != slot.hyps.size() + 1)
      throw FormatError(context + " line " + std::to_string(lineno) + ": rank " +
                        std::to_string(rank) + " out of order for utterance " + utt_id);
    slot.hyps.push_back(std::move(h));
  }
  return out;
}

inline std::vector<UttNBest> load_nbest(const std::string& path, const UnitVocabulary& vocab) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw IoError("cannot open " + path);
  return read_nbest(is, vocab, path);
}

}  // namespace multiunit
