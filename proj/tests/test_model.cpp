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

#include <gtest/gtest.h>

#include "multiunit/model.hpp"
#include "oracles.hpp"
#include "testutil.hpp"

namespace mu = multiunit;
using testutil::ScratchDir;

namespace {

// Small joint model used throughout: wordpiece primary, phoneme tap at layer 1.
mu::ModelConfig tiny_config() {
  mu::ModelConfig cfg;
  cfg.feature_dim = 4;
  cfg.model_dim = 8;
  cfg.layers = 2;
  cfg.heads = 2;
  cfg.subsample = 2;
  cfg.kernel = 3;
  cfg.ffn_dim = 12;
  cfg.decoder_layers = 1;
  cfg.aed_weight = 0.3;
  cfg.primary_unit = mu::UnitKind::wordpiece;
  cfg.primary_vocab_size = 6;
  cfg.taps = {mu::TapSpec{mu::UnitKind::phoneme, 1, 0.5}};
  cfg.unit_vocab_sizes[mu::UnitKind::phoneme] = 5;
  return cfg;
}

mu::FeatureMatrix random_features(std::size_t frames, std::size_t dim, std::uint64_t seed) {
  mu::Rng rng(seed);
  mu::FeatureMatrix fm;
  fm.frames = frames;
  fm.dim = dim;
  fm.values.resize(frames * dim);
  for (double& v : fm.values) v = rng.uniform(-1, 1);
  return fm;
}

std::map<mu::UnitKind, mu::TokenSequence> tiny_transcripts() {
  return {{mu::UnitKind::wordpiece, {2, 4}}, {mu::UnitKind::phoneme, {1, 3, 2}}};
}

}  // namespace

TEST(ModelConfig, KeyValuesRoundTrip) {
  const mu::ModelConfig cfg = tiny_config();
  const mu::ModelConfig back = mu::ModelConfig::from_keyvalues(cfg.to_keyvalues());
  EXPECT_EQ(back.feature_dim, cfg.feature_dim);
  EXPECT_EQ(back.model_dim, cfg.model_dim);
  EXPECT_EQ(back.layers, cfg.layers);
  EXPECT_EQ(back.heads, cfg.heads);
  EXPECT_EQ(back.subsample, cfg.subsample);
  EXPECT_EQ(back.kernel, cfg.kernel);
  EXPECT_EQ(back.ffn_dim, cfg.ffn_dim);
  EXPECT_EQ(back.decoder_layers, cfg.decoder_layers);
  EXPECT_DOUBLE_EQ(back.aed_weight, cfg.aed_weight);
  EXPECT_EQ(back.primary_unit, cfg.primary_unit);
  EXPECT_EQ(back.primary_vocab_size, cfg.primary_vocab_size);
  ASSERT_EQ(back.taps.size(), 1u);
  EXPECT_EQ(back.taps[0].unit, mu::UnitKind::phoneme);
  EXPECT_EQ(back.taps[0].layer, 1);
  EXPECT_DOUBLE_EQ(back.taps[0].weight, 0.5);
  EXPECT_EQ(back.unit_vocab_sizes.at(mu::UnitKind::phoneme), 5);
}

TEST(ModelConfig, ValidateCatchesErrors) {
  {
    auto cfg = tiny_config();
    cfg.heads = 3;  // 8 % 3 != 0
    EXPECT_THROW(cfg.validate(), mu::ConfigError);
  }
  {
    auto cfg = tiny_config();
    cfg.taps[0].layer = 3;  // only 2 layers
    EXPECT_THROW(cfg.validate(), mu::ConfigError);
  }
  {
    auto cfg = tiny_config();
    cfg.taps.push_back(cfg.taps[0]);  // duplicate (unit, layer)
    EXPECT_THROW(cfg.validate(), mu::ConfigError);
  }
  {
    auto cfg = tiny_config();
    cfg.unit_vocab_sizes.clear();  // tap without a vocabulary size
    EXPECT_THROW(cfg.validate(), mu::ConfigError);
  }
  {
    auto cfg = tiny_config();
    cfg.primary_vocab_size = 1;
    EXPECT_THROW(cfg.validate(), mu::ConfigError);
  }
  EXPECT_THROW(mu::ModelConfig::parse_taps("phoneme:1"), mu::ConfigError);
}

TEST(Params, InitIsDeterministicPerName) {
  const auto cfg = tiny_config();
  const mu::Params a = mu::init_params(cfg, 11);
  const mu::Params b = mu::init_params(cfg, 11);
  for (const auto& [name, t] : a.by_name) EXPECT_EQ(t->data, b.by_name.at(name)->data) << name;

  const mu::Params c = mu::init_params(cfg, 12);
  EXPECT_NE(a.by_name.at("enc0.attn.wq")->data, c.by_name.at("enc0.attn.wq")->data);

  // Adding a tap adds parameters but leaves every shared parameter bit-equal.
  auto no_tap = cfg;
  no_tap.taps.clear();
  no_tap.unit_vocab_sizes.clear();
  const mu::Params d = mu::init_params(no_tap, 11);
  for (const auto& [name, t] : d.by_name) EXPECT_EQ(t->data, a.by_name.at(name)->data) << name;
  EXPECT_TRUE(a.by_name.count("head.tap.phoneme.w"));
  EXPECT_FALSE(d.by_name.count("head.tap.phoneme.w"));
}

TEST(Params, AtThrowsForUnknownName) {
  const mu::Params p = mu::init_params(tiny_config(), 1);
  EXPECT_THROW(p.at("nope"), mu::StateError);
  EXPECT_GT(p.total_count(), 0u);
}

TEST(Encode, ShapesAndLayerCount) {
  const auto cfg = tiny_config();
  const mu::Params params = mu::init_params(cfg, 1);
  const auto fm = random_features(13, 4, 2);
  std::vector<mu::TensorPtr> hs;
  const auto hl = mu::encode_features(cfg, params, fm, &hs);
  ASSERT_EQ(hs.size(), 2u);
  EXPECT_EQ(hl.get(), hs.back().get());
  const std::size_t tp = mu::subsampled_frames(cfg, 13);
  EXPECT_EQ(tp, (13u - 3u) / 2u + 1u);
  for (const auto& h : hs) {
    EXPECT_EQ(h->rows(), tp);
    EXPECT_EQ(h->cols(), 8u);
  }
  EXPECT_THROW(mu::subsampled_frames(cfg, 2), mu::InputError);
}

TEST(Encode, HeadLatticeRowsNormalize) {
  const auto cfg = tiny_config();
  const mu::Params params = mu::init_params(cfg, 3);
  const auto fm = random_features(11, 4, 4);
  const auto hl = mu::encode_features(cfg, params, fm, nullptr);
  const auto lat = mu::head_lattice(params, "head.backbone", hl);
  EXPECT_EQ(lat.symbols, 6u);
  for (std::size_t t = 0; t < lat.frames; ++t) {
    double z = 0;
    for (std::size_t k = 0; k < lat.symbols; ++k) z += std::exp(lat.at(t, k));
    EXPECT_NEAR(z, 1.0, 1e-12);
  }
}

TEST(Aed, UniformWithZeroOutputHead) {
  const auto cfg = tiny_config();
  mu::Params params = mu::init_params(cfg, 5);
  for (double& v : params.at("dec.out.w")->data) v = 0;
  for (double& v : params.at("dec.out.b")->data) v = 0;
  const auto fm = random_features(12, 4, 6);
  const mu::TokenSequence y{1, 2, 3};
  // Zero logits -> uniform over K+2 symbols at every one of |y|+1 positions.
  const double expected = (y.size() + 1) * std::log(static_cast<double>(cfg.aed_vocab_size()));
  EXPECT_NEAR(mu::aed_loss(cfg, params, fm, y), expected, 1e-9);
  EXPECT_NEAR(mu::aed_score(cfg, params, fm, y), -expected, 1e-9);
}

TEST(Aed, RejectsBadTargets) {
  const auto cfg = tiny_config();
  const mu::Params params = mu::init_params(cfg, 5);
  const auto fm = random_features(12, 4, 6);
  EXPECT_THROW(mu::aed_loss(cfg, params, fm, {}), mu::InputError);
  EXPECT_THROW(mu::aed_loss(cfg, params, fm, {0}), mu::InputError);
  EXPECT_THROW(mu::aed_loss(cfg, params, fm, {6}), mu::InputError);

  auto no_dec = cfg;
  no_dec.decoder_layers = 0;
  const mu::Params p2 = mu::init_params(no_dec, 5);
  EXPECT_THROW(mu::aed_loss(no_dec, p2, fm, {1}), mu::ConfigError);
}

TEST(Aed, LearnsATinySequence) {
  auto cfg = tiny_config();
  cfg.taps.clear();
  cfg.unit_vocab_sizes.clear();
  mu::Params params = mu::init_params(cfg, 7);
  const auto fm = random_features(12, 4, 8);
  const mu::TokenSequence y{2, 5, 1};
  mu::Optimizer opt;
  opt.kind = mu::OptimizerKind::adam;
  opt.learning_rate = 0.01;
  const auto param_list = params.list();
  double first = 0, last = 0;
  for (int step = 0; step < 60; ++step) {
    params.zero_grads();
    const auto node =
        mu::aed_loss_node(cfg, params, mu::encode_features(cfg, params, fm, nullptr), y);
    if (step == 0) first = node->item();
    last = node->item();
    node->backward();
    opt.step(param_list);
  }
  EXPECT_LT(last, 0.5 * first);
}

TEST(JointLoss, BreakdownIdentity) {
  const auto cfg = tiny_config();
  const mu::Params params = mu::init_params(cfg, 9);
  const auto fm = random_features(14, 4, 10);
  const auto res = mu::joint_loss(cfg, params, fm, tiny_transcripts());
  const double reconstructed = res.breakdown.backbone_ctc + cfg.aed_weight * res.breakdown.aed +
                               0.5 * res.breakdown.per_tap.at(mu::UnitKind::phoneme);
  EXPECT_NEAR(res.breakdown.total, reconstructed, 1e-12);
  EXPECT_NEAR(res.total->item(), res.breakdown.total, 1e-12);
  EXPECT_GT(res.breakdown.backbone_ctc, 0.0);
  EXPECT_GT(res.breakdown.aed, 0.0);
}

TEST(JointLoss, NoDecoderOmitsAedTerm) {
  auto cfg = tiny_config();
  cfg.decoder_layers = 0;
  const mu::Params params = mu::init_params(cfg, 9);
  const auto fm = random_features(14, 4, 10);
  const auto res = mu::joint_loss(cfg, params, fm, tiny_transcripts());
  EXPECT_EQ(res.breakdown.aed, 0.0);
  EXPECT_NEAR(res.breakdown.total,
              res.breakdown.backbone_ctc + 0.5 * res.breakdown.per_tap.at(mu::UnitKind::phoneme),
              1e-12);
}

TEST(JointLoss, ZeroWeightTapIsExcludedFromObjective) {
  auto with_tap = tiny_config();
  with_tap.taps[0].weight = 0.0;
  auto no_tap = tiny_config();
  no_tap.taps.clear();
  no_tap.unit_vocab_sizes.clear();

  const mu::Params pa = mu::init_params(with_tap, 13);
  const mu::Params pb = mu::init_params(no_tap, 13);
  const auto fm = random_features(14, 4, 10);

  const auto ra = mu::joint_loss(with_tap, pa, fm, tiny_transcripts());
  auto transcripts_primary_only = tiny_transcripts();
  const auto rb = mu::joint_loss(no_tap, pb, fm, transcripts_primary_only);

  // Identical objective value bit for bit; the breakdown still reports the
  // diagnostic tap loss.
  EXPECT_EQ(ra.breakdown.total, rb.breakdown.total);
  EXPECT_EQ(ra.breakdown.backbone_ctc, rb.breakdown.backbone_ctc);
  EXPECT_TRUE(ra.breakdown.per_tap.count(mu::UnitKind::phoneme));
  EXPECT_GT(ra.breakdown.per_tap.at(mu::UnitKind::phoneme), 0.0);
}

TEST(JointLoss, MissingTranscriptIsConfigError) {
  const auto cfg = tiny_config();
  const mu::Params params = mu::init_params(cfg, 9);
  const auto fm = random_features(14, 4, 10);
  std::map<mu::UnitKind, mu::TokenSequence> only_primary{{mu::UnitKind::wordpiece, {2, 4}}};
  EXPECT_THROW(mu::joint_loss(cfg, params, fm, only_primary), mu::ConfigError);
}

TEST(JointLoss, InfeasiblePrimaryThrows) {
  const auto cfg = tiny_config();
  const mu::Params params = mu::init_params(cfg, 9);
  const auto fm = random_features(5, 4, 10);  // T' = 2
  std::map<mu::UnitKind, mu::TokenSequence> transcripts{
      {mu::UnitKind::wordpiece, {2, 2, 2}},  // needs T' >= 5
      {mu::UnitKind::phoneme, {1}}};
  EXPECT_THROW(mu::joint_loss(cfg, params, fm, transcripts), mu::InfeasibleAlignmentError);
}

TEST(JointLoss, GradientFlowStopsAboveTapLayer) {
  // A tap at layer 1 must not push gradient into block 2 or the backbone head.
  const auto cfg = tiny_config();
  mu::Params params = mu::init_params(cfg, 15);
  const auto fm = random_features(14, 4, 16);
  params.zero_grads();

  auto x = mu::Tensor::from_values({fm.frames, fm.dim}, fm.values);
  const auto hs = mu::encode(cfg, params, x);
  const auto tap_logits = mu::head_logits(params, mu::tap_head_prefix(mu::UnitKind::phoneme), hs[0]);
  mu::ctc_loss_node(tap_logits, {1, 3, 2})->backward();

  const auto zero = [](const mu::TensorPtr& t) {
    for (double g : t->grad)
      if (g != 0.0) return false;
    return true;
  };
  int enc0_nonzero = 0;
  for (const auto& [name, t] : params.by_name) {
    if (name.rfind("enc1.", 0) == 0) {
      EXPECT_TRUE(zero(t)) << name << " received gradient from a layer-1 tap";
    } else if (name.rfind("head.backbone", 0) == 0 || name.rfind("dec", 0) == 0) {
      EXPECT_TRUE(zero(t)) << name;
    } else if (name.rfind("enc0.", 0) == 0 && !zero(t)) {
      ++enc0_nonzero;
    }
  }
  EXPECT_GT(enc0_nonzero, 0);
  EXPECT_FALSE(zero(params.at("sub.kernel")));
}

TEST(JointLoss, FullModelGradientsMatchFiniteDifferences) {
  const auto cfg = tiny_config();
  mu::Params params = mu::init_params(cfg, 17);
  const auto fm = random_features(12, 4, 18);
  const auto transcripts = tiny_transcripts();

  // Spot-check one parameter from each component; the acceptance suite
  // sweeps all of them.
  for (const std::string name : {"sub.kernel", "enc0.attn.wq", "enc1.ffn.w2", "enc0.ln1.gain",
                                 "head.backbone.w", "head.tap.phoneme.w", "dec.embed",
                                 "dec0.cross.wk", "dec.out.b"}) {
    const double err = oracles::fd_max_rel_err(
        {params.at(name)}, [&] { return mu::joint_loss(cfg, params, fm, transcripts).total; });
    EXPECT_LT(err, 1e-3) << name;
  }
}

TEST(TapScore, MatchesManualLattice) {
  const auto cfg = tiny_config();
  const mu::Params params = mu::init_params(cfg, 19);
  const auto fm = random_features(14, 4, 20);
  const mu::TokenSequence y{1, 3};
  std::vector<mu::TensorPtr> hs;
  {
    mu::NoGradGuard ng;
    mu::encode_features(cfg, params, fm, &hs);
  }
  const auto lat = mu::head_lattice(params, mu::tap_head_prefix(mu::UnitKind::phoneme), hs[0]);
  EXPECT_DOUBLE_EQ(mu::tap_score(cfg, params, fm, mu::UnitKind::phoneme, y),
                   mu::ctc_label_score(lat, y));
  EXPECT_THROW(mu::tap_score(cfg, params, fm, mu::UnitKind::chars, y), mu::ConfigError);
}

// ---------------------------------------------------------------------------
// Checkpoints.
// ---------------------------------------------------------------------------

TEST(Checkpoint, RoundTripIsBitExact) {
  ScratchDir dir("ckpt");
  const auto cfg = tiny_config();
  const mu::Params params = mu::init_params(cfg, 21);
  mu::save_checkpoint(dir.file("m.ckpt"), cfg, params);
  const auto [cfg2, params2] = mu::load_checkpoint(dir.file("m.ckpt"));

  EXPECT_EQ(cfg2.model_dim, cfg.model_dim);
  EXPECT_EQ(cfg2.primary_unit, cfg.primary_unit);
  EXPECT_EQ(cfg2.primary_vocab_size, cfg.primary_vocab_size);
  ASSERT_EQ(cfg2.taps.size(), 1u);
  EXPECT_EQ(cfg2.taps[0].layer, 1);
  EXPECT_EQ(cfg2.unit_vocab_sizes.at(mu::UnitKind::phoneme), 5);

  ASSERT_EQ(params2.by_name.size(), params.by_name.size());
  for (const auto& [name, t] : params.by_name) {
    const auto& t2 = params2.by_name.at(name);
    EXPECT_EQ(t2->shape, t->shape) << name;
    EXPECT_EQ(t2->data, t->data) << name;
    EXPECT_TRUE(t2->requires_grad);
  }
}

TEST(Checkpoint, RejectsCorruptFiles) {
  ScratchDir dir("ckptbad");
  const auto cfg = tiny_config();
  const mu::Params params = mu::init_params(cfg, 23);
  mu::save_checkpoint(dir.file("m.ckpt"), cfg, params);
  const std::string bytes = testutil::slurp(dir.file("m.ckpt"));

  mu::write_text_file(dir.file("magic.ckpt"), "XXXX" + bytes.substr(4));
  EXPECT_THROW(mu::load_checkpoint(dir.file("magic.ckpt")), mu::FormatError);

  mu::write_text_file(dir.file("cut.ckpt"), bytes.substr(0, bytes.size() / 2));
  EXPECT_THROW(mu::load_checkpoint(dir.file("cut.ckpt")), mu::FormatError);

  mu::write_text_file(dir.file("fat.ckpt"), bytes + "zz");
  EXPECT_THROW(mu::load_checkpoint(dir.file("fat.ckpt")), mu::FormatError);

  std::string vbytes = bytes;
  vbytes[4] = 9;  // unsupported version
  mu::write_text_file(dir.file("ver.ckpt"), vbytes);
  EXPECT_THROW(mu::load_checkpoint(dir.file("ver.ckpt")), mu::FormatError);

  EXPECT_THROW(mu::load_checkpoint(dir.file("none.ckpt")), mu::IoError);
}
