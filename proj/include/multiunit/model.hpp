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

#include <map>
#include <set>
#include <string>
#include <vector>

#include "multiunit/base.hpp"
#include "multiunit/config.hpp"
#include "multiunit/ctc.hpp"
#include "multiunit/rng.hpp"
#include "multiunit/tensor.hpp"
#include "multiunit/units.hpp"

namespace multiunit {

// ===========================================================================
// Joint CTC/attention encoder with per-layer auxiliary CTC taps.
//
// Features go through a strided time convolution, then L pre-norm
// self-attention blocks; H^1..H^L are the per-layer hidden sequences. The
// backbone CTC head reads H^L, the attention decoder cross-attends to H^L,
// and each tap (unit, layer l, weight) puts a CTC head for that unit's
// vocabulary on H^l. The training objective is
//
//   total = ctc(H^L, y_primary) + aed_weight * aed(H^L, y_primary)
//         + sum_taps weight_u * ctc(H^{l_u}, y_u)
//
// Taps with weight 0 still exist as parameters (so checkpoints keep their
// shape) but are excluded from the objective, the training trace, and
// skip decisions; a weight-0 run is bit-identical to a run without the tap.
// ===========================================================================

struct TapSpec {
  UnitKind unit = UnitKind::phoneme;
  int layer = 1;        // 1-based; taps read H^layer
  double weight = 0.0;  // lambda_unit
};

struct ModelConfig {
  int feature_dim = 16;    // m
  int model_dim = 64;      // n
  int layers = 6;          // L
  int heads = 2;
  int subsample = 2;       // conv stride r
  int kernel = 3;          // conv kernel width k
  int ffn_dim = 128;
  int decoder_layers = 1;  // 0 = pure-CTC model, no AED branch
  double aed_weight = 0.3;
  UnitKind primary_unit = UnitKind::wordpiece;
  int primary_vocab_size = 0;               // K, includes blank
  std::vector<TapSpec> taps;
  std::map<UnitKind, int> unit_vocab_sizes; // K_unit for each tap unit

  int aed_vocab_size() const { return primary_vocab_size + 2; }  // + bos, eos
  int bos_id() const { return primary_vocab_size; }
  int eos_id() const { return primary_vocab_size + 1; }

  void validate() const {
    if (feature_dim < 1 || model_dim < 2 || layers < 1 || heads < 1 || ffn_dim < 1)
      throw ConfigError("model: dims and layer counts must be positive (model_dim >= 2)");
    if (model_dim % heads != 0) throw ConfigError("model: model_dim must be divisible by heads");
    if (subsample < 1 || kernel < 1) throw ConfigError("model: subsample and kernel must be >= 1");
    if (decoder_layers < 0) throw ConfigError("model: decoder_layers must be >= 0");
    if (aed_weight < 0) throw ConfigError("model: aed_weight must be >= 0");
    if (primary_vocab_size < 2) throw ConfigError("model: primary vocabulary too small");
    std::set<std::pair<int, int>> seen;
    for (const TapSpec& tap : taps) {
      if (tap.layer < 1 || tap.layer > layers)
        throw ConfigError("model: tap layer " + std::to_string(tap.layer) + " outside 1.." +
                          std::to_string(layers));
      if (tap.weight < 0) throw ConfigError("model: tap weight must be >= 0");
      if (!seen.insert({static_cast<int>(tap.unit), tap.layer}).second)
        throw ConfigError(std::string("model: duplicate tap for unit ") + unit_name(tap.unit) +
                          " at layer " + std::to_string(tap.layer));
      auto it = unit_vocab_sizes.find(tap.unit);
      if (it == unit_vocab_sizes.end() || it->second < 2)
        throw ConfigError(std::string("model: missing vocabulary size for tap unit ") +
                          unit_name(tap.unit));
    }
  }

  KeyValues to_keyvalues() const {
    KeyValues kv;
    kv.set("model.feature_dim", std::to_string(feature_dim));
    kv.set("model.dim", std::to_string(model_dim));
    kv.set("model.layers", std::to_string(layers));
    kv.set("model.heads", std::to_string(heads));
    kv.set("model.subsample", std::to_string(subsample));
    kv.set("model.kernel", std::to_string(kernel));
    kv.set("model.ffn_dim", std::to_string(ffn_dim));
    kv.set("model.decoder_layers", std::to_string(decoder_layers));
    kv.set("model.aed_weight", fmt_double(aed_weight));
    kv.set("model.primary_unit", unit_name(primary_unit));
    kv.set("model.primary_vocab_size", std::to_string(primary_vocab_size));
    std::vector<std::string> tap_parts;
    for (const TapSpec& tap : taps)
      tap_parts.push_back(std::string(unit_name(tap.unit)) + ":" + std::to_string(tap.layer) +
                          ":" + fmt_double(tap.weight));
    kv.set("model.taps", join(tap_parts, ","));
    for (const auto& [unit, size] : unit_vocab_sizes)
      kv.set(std::string("model.vocab_size.") + unit_name(unit), std::to_string(size));
    return kv;
  }

  static std::vector<TapSpec> parse_taps(const std::string& text) {
    std::vector<TapSpec> taps;
    for (const std::string& part : split(text, ',')) {
      const std::string p = trim(part);
      if (p.empty()) continue;
      const std::vector<std::string> f = split(p, ':');
      if (f.size() != 3)
        throw ConfigError("tap spec '" + p + "' must be unit:layer:weight");
      TapSpec tap;
      tap.unit = unit_from_name(trim(f[0]));
      tap.layer = static_cast<int>(parse_int(trim(f[1]), "tap layer"));
      tap.weight = parse_double(trim(f[2]), "tap weight");
      taps.push_back(tap);
    }
    return taps;
  }

  static ModelConfig from_keyvalues(const KeyValues& kv) {
    ModelConfig cfg;
    cfg.feature_dim = static_cast<int>(kv.get_int("model.feature_dim", cfg.feature_dim));
    cfg.model_dim = static_cast<int>(kv.get_int("model.dim", cfg.model_dim));
    cfg.layers = static_cast<int>(kv.get_int("model.layers", cfg.layers));
    cfg.heads = static_cast<int>(kv.get_int("model.heads", cfg.heads));
    cfg.subsample = static_cast<int>(kv.get_int("model.subsample", cfg.subsample));
    cfg.kernel = static_cast<int>(kv.get_int("model.kernel", cfg.kernel));
    cfg.ffn_dim = static_cast<int>(kv.get_int("model.ffn_dim", cfg.ffn_dim));
    cfg.decoder_layers = static_cast<int>(kv.get_int("model.decoder_layers", cfg.decoder_layers));
    cfg.aed_weight = kv.get_double("model.aed_weight", cfg.aed_weight);
    cfg.primary_unit = unit_from_name(kv.get_or("model.primary_unit", "wordpiece"));
    cfg.primary_vocab_size =
        static_cast<int>(kv.get_int("model.primary_vocab_size", cfg.primary_vocab_size));
    cfg.taps = parse_taps(kv.get_or("model.taps", ""));
    for (UnitKind unit : {UnitKind::wordpiece, UnitKind::chars, UnitKind::phoneme,
                          UnitKind::pinyin, UnitKind::wubi}) {
      const std::string key = std::string("model.vocab_size.") + unit_name(unit);
      if (kv.has(key)) cfg.unit_vocab_sizes[unit] = static_cast<int>(kv.get_int(key, 0));
    }
    return cfg;
  }
};

// ---------------------------------------------------------------------------
// Parameters.
// ---------------------------------------------------------------------------

struct Params {
  std::map<std::string, TensorPtr> by_name;  // sorted -> deterministic iteration

  TensorPtr& at(const std::string& name) {
    auto it = by_name.find(name);
    if (it == by_name.end()) throw StateError("unknown parameter '" + name + "'");
    return it->second;
  }
  const TensorPtr& at(const std::string& name) const {
    auto it = by_name.find(name);
    if (it == by_name.end()) throw StateError("unknown parameter '" + name + "'");
    return it->second;
  }

  std::vector<TensorPtr> list() const {
    std::vector<TensorPtr> out;
    out.reserve(by_name.size());
    for (const auto& [name, t] : by_name) out.push_back(t);
    return out;
  }

  // Establishes the invariant that every parameter carries a full zero
  // gradient buffer, so an optimizer step is valid even for parameters the
  // current loss graph never touched (e.g. a weight-0 tap head).
  void zero_grads() {
    for (auto& [name, t] : by_name) t->grad.assign(t->data.size(), 0.0);
  }

  std::size_t total_count() const {
    std::size_t n = 0;
    for (const auto& [name, t] : by_name) n += t->count();
    return n;
  }
};

namespace detail {

// Every weight gets its own stream keyed by (seed, name): adding or removing
// a parameter (e.g. a tap head) never shifts the initialization of others.
inline TensorPtr init_weight(Params& params, const std::string& name,
                             std::vector<std::size_t> shape, std::size_t fan_in,
                             std::uint64_t seed) {
  Rng rng(mix_seed(seed, "param:" + name));
  auto t = init_uniform_fanin(std::move(shape), fan_in, rng);
  params.by_name.emplace(name, t);
  return t;
}

inline TensorPtr init_const(Params& params, const std::string& name,
                            std::vector<std::size_t> shape, double value) {
  auto t = Tensor::create(std::move(shape), /*requires_grad=*/true);
  std::fill(t->data.begin(), t->data.end(), value);
  params.by_name.emplace(name, t);
  return t;
}

inline void init_attention_block(Params& params, const std::string& prefix, std::size_t n,
                                 std::uint64_t seed) {
  for (const char* w : {"wq", "wk", "wv", "wo"})
    init_weight(params, prefix + "." + w, {n, n}, n, seed);
  for (const char* b : {"bq", "bk", "bv", "bo"}) init_const(params, prefix + "." + b, {n}, 0.0);
}

inline void init_ln(Params& params, const std::string& prefix, std::size_t n) {
  init_const(params, prefix + ".gain", {n}, 1.0);
  init_const(params, prefix + ".bias", {n}, 0.0);
}

inline void init_ffn(Params& params, const std::string& prefix, std::size_t n, std::size_t f,
                     std::uint64_t seed) {
  init_weight(params, prefix + ".w1", {n, f}, n, seed);
  init_const(params, prefix + ".b1", {f}, 0.0);
  init_weight(params, prefix + ".w2", {f, n}, f, seed);
  init_const(params, prefix + ".b2", {n}, 0.0);
}

inline void init_head(Params& params, const std::string& prefix, std::size_t n, std::size_t k,
                      std::uint64_t seed) {
  init_weight(params, prefix + ".w", {n, k}, n, seed);
  init_const(params, prefix + ".b", {k}, 0.0);
}

}  // namespace detail

inline std::string tap_head_prefix(UnitKind unit) {
  return std::string("head.tap.") + unit_name(unit);
}

inline Params init_params(const ModelConfig& cfg, std::uint64_t seed) {
  cfg.validate();
  Params params;
  const auto n = static_cast<std::size_t>(cfg.model_dim);
  const auto m = static_cast<std::size_t>(cfg.feature_dim);
  const auto k = static_cast<std::size_t>(cfg.kernel);
  const auto f = static_cast<std::size_t>(cfg.ffn_dim);

  detail::init_weight(params, "sub.kernel", {k, m, n}, k * m, seed);
  detail::init_const(params, "sub.bias", {n}, 0.0);

  for (int l = 0; l < cfg.layers; ++l) {
    const std::string p = "enc" + std::to_string(l);
    detail::init_ln(params, p + ".ln1", n);
    detail::init_attention_block(params, p + ".attn", n, seed);
    detail::init_ln(params, p + ".ln2", n);
    detail::init_ffn(params, p + ".ffn", n, f, seed);
  }

  detail::init_head(params, "head.backbone", n, static_cast<std::size_t>(cfg.primary_vocab_size),
                    seed);
  for (const TapSpec& tap : cfg.taps)
    detail::init_head(params, tap_head_prefix(tap.unit), n,
                      static_cast<std::size_t>(cfg.unit_vocab_sizes.at(tap.unit)), seed);

  if (cfg.decoder_layers > 0) {
    const auto ka = static_cast<std::size_t>(cfg.aed_vocab_size());
    detail::init_weight(params, "dec.embed", {ka, n}, n, seed);
    for (int l = 0; l < cfg.decoder_layers; ++l) {
      const std::string p = "dec" + std::to_string(l);
      detail::init_ln(params, p + ".ln1", n);
      detail::init_attention_block(params, p + ".self", n, seed);
      detail::init_ln(params, p + ".ln2", n);
      detail::init_attention_block(params, p + ".cross", n, seed);
      detail::init_ln(params, p + ".ln3", n);
      detail::init_ffn(params, p + ".ffn", n, f, seed);
    }
    detail::init_ln(params, "dec.ln_out", n);
    detail::init_head(params, "dec.out", n, ka, seed);
  }
  return params;
}

// ---------------------------------------------------------------------------
// Forward pieces.
// ---------------------------------------------------------------------------

namespace detail {

// Fixed sinusoidal positional encoding, added after subsampling and to
// decoder embeddings (self-attention alone is permutation-equivariant).
inline TensorPtr positional_encoding(std::size_t frames, std::size_t n) {
  auto pe = Tensor::create({frames, n});
  for (std::size_t t = 0; t < frames; ++t) {
    for (std::size_t j = 0; j < n; ++j) {
      const double exponent = static_cast<double>(j - (j % 2)) / static_cast<double>(n);
      const double angle = static_cast<double>(t) / std::pow(10000.0, exponent);
      pe->at2(t, j) = (j % 2 == 0) ? std::sin(angle) : std::cos(angle);
    }
  }
  return pe;
}

inline TensorPtr affine(const Params& params, const std::string& w, const std::string& b,
                        const TensorPtr& x) {
  return add_rowvec(matmul(x, params.at(w)), params.at(b));
}

inline TensorPtr multi_head_attention(const Params& params, const std::string& prefix,
                                      const TensorPtr& xq, const TensorPtr& xkv, int heads,
                                      AttentionMask mask) {
  const TensorPtr q = affine(params, prefix + ".wq", prefix + ".bq", xq);
  const TensorPtr k = affine(params, prefix + ".wk", prefix + ".bk", xkv);
  const TensorPtr v = affine(params, prefix + ".wv", prefix + ".bv", xkv);
  const std::size_t n = q->shape[1];
  const std::size_t d = n / static_cast<std::size_t>(heads);
  std::vector<TensorPtr> head_outs;
  head_outs.reserve(static_cast<std::size_t>(heads));
  for (int h = 0; h < heads; ++h) {
    const std::size_t off = static_cast<std::size_t>(h) * d;
    head_outs.push_back(attention(narrow_cols(q, off, d), narrow_cols(k, off, d),
                                  narrow_cols(v, off, d), mask));
  }
  const TensorPtr merged = heads == 1 ? head_outs[0] : concat_cols(head_outs);
  return affine(params, prefix + ".wo", prefix + ".bo", merged);
}

inline TensorPtr ln(const Params& params, const std::string& prefix, const TensorPtr& x) {
  return layer_norm(x, params.at(prefix + ".gain"), params.at(prefix + ".bias"));
}

inline TensorPtr ffn(const Params& params, const std::string& prefix, const TensorPtr& x) {
  return affine(params, prefix + ".w2", prefix + ".b2",
                relu(affine(params, prefix + ".w1", prefix + ".b1", x)));
}

}  // namespace detail

// Hidden sequences H^1..H^L, each [T' x n] with T' = (T - kernel)/subsample + 1.
inline std::vector<TensorPtr> encode(const ModelConfig& cfg, const Params& params,
                                     const TensorPtr& x) {
  if (x->rank() != 2 || x->shape[1] != static_cast<std::size_t>(cfg.feature_dim))
    throw DimensionError("encode: features must be [T x feature_dim]");
  TensorPtr h = relu(add_rowvec(
      conv1d_time(x, params.at("sub.kernel"), static_cast<std::size_t>(cfg.subsample)),
      params.at("sub.bias")));
  h = add(h, detail::positional_encoding(h->shape[0], h->shape[1]));

  std::vector<TensorPtr> hidden;
  hidden.reserve(static_cast<std::size_t>(cfg.layers));
  for (int l = 0; l < cfg.layers; ++l) {
    const std::string p = "enc" + std::to_string(l);
    const TensorPtr normed = detail::ln(params, p + ".ln1", h);
    h = add(h, detail::multi_head_attention(params, p + ".attn", normed, normed, cfg.heads,
                                            AttentionMask::none));
    h = add(h, detail::ffn(params, p + ".ffn", detail::ln(params, p + ".ln2", h)));
    hidden.push_back(h);
  }
  return hidden;
}

inline TensorPtr encode_features(const ModelConfig& cfg, const Params& params,
                                 const FeatureMatrix& fm, std::vector<TensorPtr>* all_layers) {
  auto x = Tensor::from_values({fm.frames, fm.dim}, fm.values);
  auto hs = encode(cfg, params, x);
  TensorPtr last = hs.back();
  if (all_layers) *all_layers = std::move(hs);
  return last;
}

// Pre-softmax logits of a CTC head over a hidden sequence.
inline TensorPtr head_logits(const Params& params, const std::string& head_prefix,
                             const TensorPtr& h) {
  return detail::affine(params, head_prefix + ".w", head_prefix + ".b", h);
}

inline LogProbLattice head_lattice(const Params& params, const std::string& head_prefix,
                                   const TensorPtr& h) {
  NoGradGuard ng;
  return LogProbLattice::from_tensor(*log_softmax(head_logits(params, head_prefix, h)));
}

// Subsampled length for a raw frame count; InputError when too short.
inline std::size_t subsampled_frames(const ModelConfig& cfg, std::size_t frames) {
  if (frames < static_cast<std::size_t>(cfg.kernel))
    throw InputError("encode: utterance has " + std::to_string(frames) +
                     " frames, shorter than the kernel span " + std::to_string(cfg.kernel));
  return (frames - static_cast<std::size_t>(cfg.kernel)) /
             static_cast<std::size_t>(cfg.subsample) +
         1;
}

// ---------------------------------------------------------------------------
// Attention decoder (teacher-forced cross-entropy).
// ---------------------------------------------------------------------------

// Graph node for the AED loss: -log P(y | H^L) summed over positions, with
// bos prepended to the input and eos appended to the targets.
inline TensorPtr aed_loss_node(const ModelConfig& cfg, const Params& params, const TensorPtr& hl,
                               const TokenSequence& y) {
  if (cfg.decoder_layers <= 0)
    throw ConfigError("aed: model was built without a decoder (decoder_layers = 0)");
  if (y.empty()) throw InputError("aed: empty target sequence");
  for (int id : y) {
    if (id == UnitVocabulary::blank_id()) throw InputError("aed: blank id in target sequence");
    if (id < 0 || id >= cfg.primary_vocab_size)
      throw InputError("aed: target id " + std::to_string(id) + " outside primary vocabulary");
  }

  TokenSequence input{cfg.bos_id()};
  input.insert(input.end(), y.begin(), y.end());
  TokenSequence targets = y;
  targets.push_back(cfg.eos_id());

  TensorPtr x = embedding(params.at("dec.embed"), input);
  x = add(x, detail::positional_encoding(x->shape[0], x->shape[1]));
  for (int l = 0; l < cfg.decoder_layers; ++l) {
    const std::string p = "dec" + std::to_string(l);
    const TensorPtr normed = detail::ln(params, p + ".ln1", x);
    x = add(x, detail::multi_head_attention(params, p + ".self", normed, normed, cfg.heads,
                                            AttentionMask::causal));
    x = add(x, detail::multi_head_attention(params, p + ".cross", detail::ln(params, p + ".ln2", x),
                                            hl, cfg.heads, AttentionMask::none));
    x = add(x, detail::ffn(params, p + ".ffn", detail::ln(params, p + ".ln3", x)));
  }
  x = detail::ln(params, "dec.ln_out", x);
  const TensorPtr logp = log_softmax(head_logits(params, "dec.out", x));
  return scale(pick_logsum(logp, targets), -1.0);
}

inline double aed_loss(const ModelConfig& cfg, const Params& params, const FeatureMatrix& fm,
                       const TokenSequence& y) {
  NoGradGuard ng;
  return aed_loss_node(cfg, params, encode_features(cfg, params, fm, nullptr), y)->item();
}

// Label-synchronous rescoring score: higher is better.
inline double aed_score(const ModelConfig& cfg, const Params& params, const FeatureMatrix& fm,
                        const TokenSequence& y) {
  return -aed_loss(cfg, params, fm, y);
}

// ---------------------------------------------------------------------------
// Joint objective.
// ---------------------------------------------------------------------------

struct LossBreakdown {
  double backbone_ctc = 0.0;
  double aed = 0.0;                    // unweighted; 0 when no decoder exists
  std::map<UnitKind, double> per_tap;  // unweighted per-tap CTC losses
  double total = 0.0;                  // == backbone + aed_weight*aed + sum w_u*tap_u
};

struct JointLossResult {
  LossBreakdown breakdown;
  TensorPtr total;  // scalar graph node
};

// Builds the joint loss graph for one utterance. Throws
// InfeasibleAlignmentError when the primary labels or any weight>0 tap
// labels cannot align to the subsampled frame count (callers treat that as
// a per-utterance skip). Weight-0 taps are reported in the breakdown but
// never included in the objective and never affect feasibility.
inline JointLossResult joint_loss(const ModelConfig& cfg, const Params& params,
                                  const FeatureMatrix& fm,
                                  const std::map<UnitKind, TokenSequence>& transcripts) {
  auto find_transcript = [&](UnitKind unit) -> const TokenSequence& {
    auto it = transcripts.find(unit);
    if (it == transcripts.end())
      throw ConfigError(std::string("joint_loss: missing transcript for unit ") + unit_name(unit));
    return it->second;
  };

  const TokenSequence& y = find_transcript(cfg.primary_unit);
  const std::size_t t_sub = subsampled_frames(cfg, fm.frames);
  if (!ctc_feasible(t_sub, y))
    throw InfeasibleAlignmentError("joint_loss: primary labels cannot align to " +
                                   std::to_string(t_sub) + " subsampled frames");
  for (const TapSpec& tap : cfg.taps) {
    const TokenSequence& yu = find_transcript(tap.unit);
    if (tap.weight > 0 && !ctc_feasible(t_sub, yu))
      throw InfeasibleAlignmentError(std::string("joint_loss: ") + unit_name(tap.unit) +
                                     " tap labels cannot align to " + std::to_string(t_sub) +
                                     " subsampled frames");
  }

  JointLossResult res;
  auto x = Tensor::from_values({fm.frames, fm.dim}, fm.values);
  const std::vector<TensorPtr> hs = encode(cfg, params, x);
  const TensorPtr hl = hs.back();

  TensorPtr total = ctc_loss_node(head_logits(params, "head.backbone", hl), y);
  res.breakdown.backbone_ctc = total->item();

  if (cfg.decoder_layers > 0) {
    const TensorPtr aed = aed_loss_node(cfg, params, hl, y);
    res.breakdown.aed = aed->item();
    if (cfg.aed_weight > 0) total = add(total, scale(aed, cfg.aed_weight));
  }

  for (const TapSpec& tap : cfg.taps) {
    const TokenSequence& yu = find_transcript(tap.unit);
    const TensorPtr h_tap = hs[static_cast<std::size_t>(tap.layer - 1)];
    if (tap.weight > 0) {
      const TensorPtr node = ctc_loss_node(head_logits(params, tap_head_prefix(tap.unit), h_tap), yu);
      res.breakdown.per_tap[tap.unit] = node->item();
      total = add(total, scale(node, tap.weight));
    } else {
      NoGradGuard ng;
      const double score =
          ctc_label_score(head_lattice(params, tap_head_prefix(tap.unit), h_tap), yu);
      res.breakdown.per_tap[tap.unit] = -score;  // +inf when infeasible
    }
  }

  res.breakdown.total = total->item();
  res.total = total;
  return res;
}

// Standalone auxiliary score of a tapped unit's labels: log P_ctc(y_unit |
// H^{l_unit}) through that tap's head. -inf when the alignment is infeasible;
// ConfigError when the model has no tap for the unit.
inline double tap_score(const ModelConfig& cfg, const Params& params, const FeatureMatrix& fm,
                        UnitKind unit, const TokenSequence& y_unit) {
  const TapSpec* tap = nullptr;
  for (const TapSpec& t : cfg.taps)
    if (t.unit == unit) tap = &t;
  if (!tap)
    throw ConfigError(std::string("tap_score: model has no tap for unit ") + unit_name(unit));
  NoGradGuard ng;
  std::vector<TensorPtr> hs;
  encode_features(cfg, params, fm, &hs);
  const TensorPtr h_tap = hs[static_cast<std::size_t>(tap->layer - 1)];
  return ctc_label_score(head_lattice(params, tap_head_prefix(unit), h_tap), y_unit);
}

// ---------------------------------------------------------------------------
// Checkpoints: magic "MJCT", u32 version=1, length-prefixed UTF-8 config
// text, u64 parameter count, then per-parameter records
// (u64 name length, name bytes, u64 rank, u64 dims..., float64 LE data).
// ---------------------------------------------------------------------------

inline void save_checkpoint(const std::string& path, const ModelConfig& cfg,
                            const Params& params) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw IoError("cannot open " + path + " for writing");
  os.write("MJCT", 4);
  write_u32(os, 1);
  const std::string config_text = cfg.to_keyvalues().serialize();
  write_u64(os, config_text.size());
  write_raw(os, config_text.data(), config_text.size());
  write_u64(os, params.by_name.size());
  for (const auto& [name, t] : params.by_name) {
    write_u64(os, name.size());
    write_raw(os, name.data(), name.size());
    write_u64(os, t->shape.size());
    for (std::size_t d : t->shape) write_u64(os, d);
    write_raw(os, t->data.data(), t->data.size() * sizeof(double));
  }
  if (!os) throw IoError("write failed: " + path);
}

inline std::pair<ModelConfig, Params> load_checkpoint(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw IoError("cannot open " + path);
  char magic[4];
  read_raw(is, magic, 4, "checkpoint magic of " + path);
  if (std::memcmp(magic, "MJCT", 4) != 0) throw FormatError("bad checkpoint magic in " + path);
  const std::uint32_t version = read_u32(is, "checkpoint version of " + path);
  if (version != 1)
    throw FormatError("unsupported checkpoint version " + std::to_string(version) + " in " + path);

  const std::uint64_t cfg_len = read_u64(is, "config length of " + path);
  if (cfg_len > (1ull << 20)) throw FormatError("implausible config size in " + path);
  std::string config_text(cfg_len, '\0');
  read_raw(is, config_text.data(), cfg_len, "config text of " + path);
  ModelConfig cfg = ModelConfig::from_keyvalues(KeyValues::parse_text(config_text, path));
  cfg.validate();

  Params params;
  const std::uint64_t n_params = read_u64(is, "parameter count of " + path);
  for (std::uint64_t i = 0; i < n_params; ++i) {
    const std::uint64_t name_len = read_u64(is, "parameter name length of " + path);
    if (name_len == 0 || name_len > 4096)
      throw FormatError("implausible parameter name length in " + path);
    std::string name(name_len, '\0');
    read_raw(is, name.data(), name_len, "parameter name of " + path);
    const std::uint64_t rank = read_u64(is, "parameter rank of " + path);
    if (rank > 8) throw FormatError("implausible parameter rank in " + path);
    std::vector<std::size_t> shape(rank);
    std::size_t count = 1;
    for (std::uint64_t d = 0; d < rank; ++d) {
      shape[d] = static_cast<std::size_t>(read_u64(is, "parameter dims of " + path));
      count *= shape[d];
    }
    if (count == 0 || count > (1ull << 30))
      throw FormatError("implausible parameter size in " + path);
    auto t = Tensor::create(std::move(shape), /*requires_grad=*/true);
    read_raw(is, t->data.data(), count * sizeof(double), "parameter data of " + path);
    if (!params.by_name.emplace(std::move(name), std::move(t)).second)
      throw FormatError("duplicate parameter record in " + path);
  }
  if (is.peek() != std::char_traits<char>::eof())
    throw FormatError("trailing bytes after parameter records in " + path);
  return {std::move(cfg), std::move(params)};
}

}  // namespace multiunit
