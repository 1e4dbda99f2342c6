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

#include "multiunit/rng.hpp"
#include "multiunit/tensor.hpp"
#include "oracles.hpp"

namespace mu = multiunit;

namespace {

mu::TensorPtr random_tensor(std::vector<std::size_t> shape, mu::Rng& rng, bool avoid_kink = false) {
  auto t = mu::Tensor::create(std::move(shape), /*requires_grad=*/true);
  for (double& v : t->data) {
    v = rng.uniform(-1.5, 1.5);
    if (avoid_kink && std::abs(v) < 0.05) v = v < 0 ? -0.1 : 0.1;  // keep FD away from ReLU's corner
  }
  return t;
}

constexpr double kFdTol = 1e-4;

}  // namespace

TEST(Tensor, CreateAndAccess) {
  auto t = mu::Tensor::from_values({2, 3}, {1, 2, 3, 4, 5, 6});
  EXPECT_EQ(t->rows(), 2u);
  EXPECT_EQ(t->cols(), 3u);
  EXPECT_DOUBLE_EQ(t->at2(1, 2), 6.0);
  EXPECT_THROW(mu::Tensor::from_values({2, 2}, {1, 2, 3}), mu::DimensionError);
  EXPECT_THROW(mu::Tensor::from_values({2, 3}, {1, 2, 3, 4, 5, 6})->item(), mu::DimensionError);
  EXPECT_DOUBLE_EQ(mu::Tensor::scalar(7.5)->item(), 7.5);
}

TEST(Tensor, MatmulIdentity) {
  auto a = mu::Tensor::from_values({2, 3}, {1, 2, 3, 4, 5, 6});
  auto eye = mu::Tensor::from_values({3, 3}, {1, 0, 0, 0, 1, 0, 0, 0, 1});
  auto c = mu::matmul(a, eye);
  for (std::size_t i = 0; i < 6; ++i) EXPECT_DOUBLE_EQ(c->data[i], a->data[i]);
  EXPECT_THROW(mu::matmul(a, a), mu::DimensionError);
}

TEST(Tensor, MatmulKnownProduct) {
  auto a = mu::Tensor::from_values({2, 2}, {1, 2, 3, 4});
  auto b = mu::Tensor::from_values({2, 2}, {5, 6, 7, 8});
  auto c = mu::matmul(a, b);
  EXPECT_DOUBLE_EQ(c->at2(0, 0), 19.0);
  EXPECT_DOUBLE_EQ(c->at2(0, 1), 22.0);
  EXPECT_DOUBLE_EQ(c->at2(1, 0), 43.0);
  EXPECT_DOUBLE_EQ(c->at2(1, 1), 50.0);
}

TEST(Tensor, BackwardRequiresScalarRoot) {
  auto a = mu::Tensor::from_values({2, 2}, {1, 2, 3, 4}, true);
  EXPECT_THROW(mu::relu(a)->backward(), mu::StateError);
  auto leaf = mu::Tensor::from_values({1}, {3.0}, false);
  EXPECT_THROW(leaf->backward(), mu::StateError);
}

TEST(Tensor, NoGradGuardDisablesGraph) {
  auto a = mu::Tensor::from_values({1, 2}, {1, 2}, true);
  mu::TensorPtr s;
  {
    mu::NoGradGuard ng;
    s = mu::sum_all(mu::relu(a));
  }
  EXPECT_FALSE(s->requires_grad);
  EXPECT_TRUE(s->parents.empty());
  EXPECT_DOUBLE_EQ(s->item(), 3.0);
  // Graph construction resumes when the guard leaves scope.
  auto s2 = mu::sum_all(a);
  EXPECT_TRUE(s2->requires_grad);
}

TEST(Tensor, GradAccumulatesAcrossBackwards) {
  auto a = mu::Tensor::from_values({1, 1}, {2.0}, true);
  mu::sum_all(a)->backward();
  mu::sum_all(a)->backward();
  EXPECT_DOUBLE_EQ(a->grad[0], 2.0);  // 1 + 1, no implicit zeroing
  a->zero_grad();
  EXPECT_DOUBLE_EQ(a->grad[0], 0.0);
}

TEST(Tensor, DiamondGraphGradient) {
  // y = sum(a*I + a*I) = 2*sum(a): each path contributes once.
  auto a = mu::Tensor::from_values({1, 2}, {3, 4}, true);
  auto eye = mu::Tensor::from_values({2, 2}, {1, 0, 0, 1});
  auto y = mu::sum_all(mu::add(mu::matmul(a, eye), mu::matmul(a, eye)));
  y->backward();
  EXPECT_DOUBLE_EQ(y->item(), 14.0);
  EXPECT_DOUBLE_EQ(a->grad[0], 2.0);
  EXPECT_DOUBLE_EQ(a->grad[1], 2.0);
}

TEST(Tensor, LogSoftmaxUniform) {
  auto x = mu::Tensor::from_values({1, 4}, {0, 0, 0, 0});
  auto y = mu::log_softmax(x);
  for (double v : y->data) EXPECT_NEAR(v, -std::log(4.0), 1e-15);
}

TEST(Tensor, LogSoftmaxShiftInvariance) {
  mu::Rng rng(11);
  auto x = random_tensor({3, 5}, rng);
  auto y1 = mu::log_softmax(x);
  for (double& v : x->data) v += 123.456;
  auto y2 = mu::log_softmax(x);
  for (std::size_t i = 0; i < y1->data.size(); ++i) EXPECT_NEAR(y1->data[i], y2->data[i], 1e-12);
}

TEST(Tensor, LogSoftmaxRowsNormalize) {
  mu::Rng rng(12);
  auto x = random_tensor({4, 6}, rng);
  auto y = mu::log_softmax(x);
  for (std::size_t i = 0; i < 4; ++i) {
    double z = 0.0;
    for (std::size_t j = 0; j < 6; ++j) z += std::exp(y->at2(i, j));
    EXPECT_NEAR(z, 1.0, 1e-12);
  }
}

TEST(Tensor, LayerNormConstantRowIsZero) {
  auto x = mu::Tensor::from_values({1, 4}, {2.5, 2.5, 2.5, 2.5});
  auto gain = mu::Tensor::from_values({1, 4}, {1, 1, 1, 1});
  auto bias = mu::Tensor::from_values({1, 4}, {0, 0, 0, 0});
  auto y = mu::layer_norm(x, gain, bias);
  for (double v : y->data) EXPECT_NEAR(v, 0.0, 1e-12);
}

TEST(Tensor, LayerNormNormalizesRows) {
  mu::Rng rng(13);
  auto x = random_tensor({3, 8}, rng);
  auto gain = mu::Tensor::from_values({1, 8}, std::vector<double>(8, 1.0));
  auto bias = mu::Tensor::from_values({1, 8}, std::vector<double>(8, 0.0));
  auto y = mu::layer_norm(x, gain, bias);
  for (std::size_t i = 0; i < 3; ++i) {
    double mean = 0.0, var = 0.0;
    for (std::size_t j = 0; j < 8; ++j) mean += y->at2(i, j);
    mean /= 8;
    for (std::size_t j = 0; j < 8; ++j) var += (y->at2(i, j) - mean) * (y->at2(i, j) - mean);
    var /= 8;
    EXPECT_NEAR(mean, 0.0, 1e-12);
    EXPECT_NEAR(var, 1.0, 1e-3);  // eps shrinks the variance slightly
  }
}

TEST(Tensor, Conv1dKernelOneIdentity) {
  // k=1, stride=1, kernel = identity over channels: output == input.
  auto x = mu::Tensor::from_values({3, 2}, {1, 2, 3, 4, 5, 6});
  auto kernel = mu::Tensor::from_values({1, 2, 2}, {1, 0, 0, 1});
  auto y = mu::conv1d_time(x, kernel, 1);
  ASSERT_EQ(y->rows(), 3u);
  for (std::size_t i = 0; i < 6; ++i) EXPECT_DOUBLE_EQ(y->data[i], x->data[i]);
}

TEST(Tensor, Conv1dFrameMath) {
  // T=7, k=3, stride=2 -> T' = (7-3)/2+1 = 3.
  auto x = mu::Tensor::create({7, 1});
  auto kernel = mu::Tensor::from_values({3, 1, 1}, {1, 1, 1});
  for (std::size_t t = 0; t < 7; ++t) x->data[t] = static_cast<double>(t);
  auto y = mu::conv1d_time(x, kernel, 2);
  ASSERT_EQ(y->rows(), 3u);
  EXPECT_DOUBLE_EQ(y->at2(0, 0), 0 + 1 + 2);
  EXPECT_DOUBLE_EQ(y->at2(1, 0), 2 + 3 + 4);
  EXPECT_DOUBLE_EQ(y->at2(2, 0), 4 + 5 + 6);
  EXPECT_THROW(mu::conv1d_time(mu::Tensor::create({2, 1}), kernel, 1), mu::InputError);
}

TEST(Tensor, AttentionCausalFirstRowCopiesV0) {
  mu::Rng rng(14);
  auto q = random_tensor({3, 4}, rng);
  auto k = random_tensor({3, 4}, rng);
  auto v = random_tensor({3, 4}, rng);
  auto y = mu::attention(q, k, v, mu::AttentionMask::causal);
  // Position 0 may attend only to position 0: softmax over one logit is 1.
  for (std::size_t j = 0; j < 4; ++j) EXPECT_NEAR(y->at2(0, j), v->at2(0, j), 1e-12);
}

TEST(Tensor, AttentionUniformWhenKeysEqual) {
  // Identical keys -> uniform weights -> output rows are the mean of V.
  auto q = mu::Tensor::from_values({2, 2}, {1, 2, -1, 0.5});
  auto k = mu::Tensor::from_values({2, 2}, {3, 3, 3, 3});
  auto v = mu::Tensor::from_values({2, 2}, {1, 2, 5, 6});
  auto y = mu::attention(q, k, v, mu::AttentionMask::none);
  for (std::size_t i = 0; i < 2; ++i) {
    EXPECT_NEAR(y->at2(i, 0), 3.0, 1e-12);
    EXPECT_NEAR(y->at2(i, 1), 4.0, 1e-12);
  }
}

TEST(Tensor, EmbeddingPicksRows) {
  auto table = mu::Tensor::from_values({3, 2}, {0, 1, 10, 11, 20, 21}, true);
  auto y = mu::embedding(table, {2, 0, 2});
  ASSERT_EQ(y->rows(), 3u);
  EXPECT_DOUBLE_EQ(y->at2(0, 0), 20.0);
  EXPECT_DOUBLE_EQ(y->at2(1, 1), 1.0);
  mu::sum_all(y)->backward();
  EXPECT_DOUBLE_EQ(table->grad[0], 1.0);  // row 0 used once
  EXPECT_DOUBLE_EQ(table->grad[4], 2.0);  // row 2 used twice
  EXPECT_DOUBLE_EQ(table->grad[2], 0.0);  // row 1 unused
  EXPECT_THROW(mu::embedding(table, {3}), mu::InputError);
}

TEST(Tensor, PickLogsumSelectsEntries) {
  auto x = mu::Tensor::from_values({2, 3}, {1, 2, 3, 4, 5, 6});
  EXPECT_DOUBLE_EQ(mu::pick_logsum(x, {2, 0})->item(), 3.0 + 4.0);
  EXPECT_THROW(mu::pick_logsum(x, {0}), mu::DimensionError);
  EXPECT_THROW(mu::pick_logsum(x, {5, 0}), mu::InputError);
}

TEST(Tensor, NarrowConcatRoundTrip) {
  mu::Rng rng(15);
  auto x = random_tensor({2, 6}, rng);
  auto parts = std::vector<mu::TensorPtr>{mu::narrow_cols(x, 0, 2), mu::narrow_cols(x, 2, 3),
                                          mu::narrow_cols(x, 5, 1)};
  auto y = mu::concat_cols(parts);
  ASSERT_EQ(y->cols(), 6u);
  for (std::size_t i = 0; i < x->data.size(); ++i) EXPECT_DOUBLE_EQ(y->data[i], x->data[i]);
  EXPECT_THROW(mu::narrow_cols(x, 5, 2), mu::DimensionError);
}

// ---------------------------------------------------------------------------
// Finite-difference checks: >= 20 randomized trials across the op set.
// ---------------------------------------------------------------------------

TEST(TensorGrad, MatmulChain) {
  for (std::uint64_t trial = 0; trial < 4; ++trial) {
    mu::Rng rng(100 + trial);
    auto a = random_tensor({2, 3}, rng);
    auto b = random_tensor({3, 4}, rng);
    auto err = oracles::fd_max_rel_err({a, b}, [&] { return mu::sum_all(mu::matmul(a, b)); });
    EXPECT_LT(err, kFdTol) << "trial " << trial;
  }
}

TEST(TensorGrad, AddScaleRelu) {
  for (std::uint64_t trial = 0; trial < 4; ++trial) {
    mu::Rng rng(200 + trial);
    auto a = random_tensor({3, 3}, rng, /*avoid_kink=*/true);
    auto b = random_tensor({3, 3}, rng, /*avoid_kink=*/true);
    auto err = oracles::fd_max_rel_err(
        {a, b}, [&] { return mu::sum_all(mu::relu(mu::scale(mu::add(a, b), 1.7))); });
    EXPECT_LT(err, kFdTol) << "trial " << trial;
  }
}

TEST(TensorGrad, AddRowvec) {
  for (std::uint64_t trial = 0; trial < 3; ++trial) {
    mu::Rng rng(300 + trial);
    auto a = random_tensor({4, 3}, rng);
    auto v = random_tensor({3}, rng);
    auto err = oracles::fd_max_rel_err(
        {a, v}, [&] { return mu::sum_all(mu::relu(mu::add_rowvec(a, v))); });
    EXPECT_LT(err, kFdTol) << "trial " << trial;
  }
}

TEST(TensorGrad, LogSoftmaxPick) {
  for (std::uint64_t trial = 0; trial < 4; ++trial) {
    mu::Rng rng(400 + trial);
    auto x = random_tensor({3, 5}, rng);
    const mu::TokenSequence picks{1, 4, 0};
    auto err = oracles::fd_max_rel_err(
        {x}, [&] { return mu::scale(mu::pick_logsum(mu::log_softmax(x), picks), -1.0); });
    EXPECT_LT(err, kFdTol) << "trial " << trial;
  }
}

TEST(TensorGrad, LayerNorm) {
  for (std::uint64_t trial = 0; trial < 3; ++trial) {
    mu::Rng rng(500 + trial);
    auto x = random_tensor({2, 6}, rng);
    auto gain = random_tensor({1, 6}, rng);
    auto bias = random_tensor({1, 6}, rng);
    auto err = oracles::fd_max_rel_err(
        {x, gain, bias}, [&] { return mu::sum_all(mu::relu(mu::layer_norm(x, gain, bias))); });
    EXPECT_LT(err, kFdTol) << "trial " << trial;
  }
}

TEST(TensorGrad, Conv1d) {
  for (std::uint64_t trial = 0; trial < 3; ++trial) {
    mu::Rng rng(600 + trial);
    auto x = random_tensor({8, 2}, rng);
    auto kernel = random_tensor({3, 2, 3}, rng);
    auto err = oracles::fd_max_rel_err(
        {x, kernel}, [&] { return mu::sum_all(mu::relu(mu::conv1d_time(x, kernel, 2))); });
    EXPECT_LT(err, kFdTol) << "trial " << trial;
  }
}

TEST(TensorGrad, AttentionBothMasks) {
  for (std::uint64_t trial = 0; trial < 4; ++trial) {
    mu::Rng rng(700 + trial);
    auto q = random_tensor({3, 4}, rng);
    auto k = random_tensor({3, 4}, rng);
    auto v = random_tensor({3, 4}, rng);
    const auto mask = trial % 2 == 0 ? mu::AttentionMask::none : mu::AttentionMask::causal;
    auto err = oracles::fd_max_rel_err(
        {q, k, v}, [&] { return mu::sum_all(mu::attention(q, k, v, mask)); });
    EXPECT_LT(err, kFdTol) << "trial " << trial;
  }
}

TEST(TensorGrad, CrossAttentionRectangular) {
  mu::Rng rng(750);
  auto q = random_tensor({2, 4}, rng);
  auto k = random_tensor({5, 4}, rng);
  auto v = random_tensor({5, 4}, rng);
  auto err = oracles::fd_max_rel_err(
      {q, k, v}, [&] { return mu::sum_all(mu::attention(q, k, v, mu::AttentionMask::none)); });
  EXPECT_LT(err, kFdTol);
  EXPECT_THROW(mu::attention(q, k, v, mu::AttentionMask::causal), mu::DimensionError);
}

TEST(TensorGrad, EmbeddingNarrowConcat) {
  for (std::uint64_t trial = 0; trial < 2; ++trial) {
    mu::Rng rng(800 + trial);
    auto table = random_tensor({4, 6}, rng);
    const mu::TokenSequence ids{1, 3, 1};
    auto err = oracles::fd_max_rel_err({table}, [&] {
      auto e = mu::embedding(table, ids);
      auto parts = std::vector<mu::TensorPtr>{mu::narrow_cols(e, 3, 3), mu::narrow_cols(e, 0, 3)};
      return mu::sum_all(mu::relu(mu::concat_cols(parts)));
    });
    EXPECT_LT(err, kFdTol) << "trial " << trial;
  }
}

// ---------------------------------------------------------------------------
// Optimizers.
// ---------------------------------------------------------------------------

TEST(Optimizer, SgdMomentumFirstStep) {
  auto w = mu::Tensor::from_values({1}, {1.0}, true);
  w->ensure_grad();
  w->grad[0] = 2.0;
  mu::Optimizer opt;
  opt.kind = mu::OptimizerKind::sgd_momentum;
  opt.learning_rate = 0.1;
  opt.step({w});
  EXPECT_NEAR(w->data[0], 0.8, 1e-15);
}

TEST(Optimizer, SgdMomentumAccumulatesVelocity) {
  auto w = mu::Tensor::from_values({1}, {0.0}, true);
  mu::Optimizer opt;
  opt.kind = mu::OptimizerKind::sgd_momentum;
  opt.learning_rate = 0.1;
  oracles::SgdMomentumRef ref;
  mu::Rng rng(21);
  double wref = 0.0;
  for (int i = 0; i < 25; ++i) {
    const double g = rng.uniform(-1, 1);
    w->ensure_grad();
    w->grad[0] = g;
    opt.step({w});
    wref = ref.step(wref, g);
    ASSERT_NEAR(w->data[0], wref, 1e-14);
    w->zero_grad();
  }
}

TEST(Optimizer, AdamZeroGradIsNoOp) {
  auto w = mu::Tensor::from_values({1}, {0.7}, true);
  w->ensure_grad();
  mu::Optimizer opt;
  opt.kind = mu::OptimizerKind::adam;
  opt.step({w});
  EXPECT_DOUBLE_EQ(w->data[0], 0.7);
}

TEST(Optimizer, AdamMatchesScalarRecursion) {
  auto w = mu::Tensor::from_values({1}, {0.3}, true);
  mu::Optimizer opt;
  opt.kind = mu::OptimizerKind::adam;
  opt.learning_rate = 0.01;
  oracles::AdamRef ref;
  ref.lr = 0.01;
  double wref = 0.3;
  mu::Rng rng(22);
  for (int i = 0; i < 50; ++i) {
    const double g = rng.uniform(-2, 2);
    w->ensure_grad();
    w->grad[0] = g;
    opt.step({w});
    wref = ref.step(wref, g);
    ASSERT_NEAR(w->data[0], wref, 1e-13) << "step " << i;
    w->zero_grad();
  }
}

TEST(Optimizer, AdamDrivesQuadraticToZero) {
  // Minimize w^2 with true gradients: |w| < 1e-2 after 100 steps at lr 0.1.
  auto w = mu::Tensor::from_values({1}, {1.0}, true);
  mu::Optimizer opt;
  opt.kind = mu::OptimizerKind::adam;
  opt.learning_rate = 0.1;
  for (int i = 0; i < 100; ++i) {
    w->zero_grad();
    w->ensure_grad();
    w->grad[0] = 2.0 * w->data[0];
    opt.step({w});
  }
  EXPECT_LT(std::abs(w->data[0]), 1e-2);
}

TEST(Optimizer, MissingGradIsStateError) {
  auto w = mu::Tensor::from_values({1}, {1.0}, true);
  mu::Optimizer opt;
  EXPECT_THROW(opt.step({w}), mu::StateError);
}

// ---------------------------------------------------------------------------
// RNG determinism.
// ---------------------------------------------------------------------------

TEST(Rng, DeterministicStreams) {
  mu::Rng a(42), b(42);
  for (int i = 0; i < 100; ++i) ASSERT_EQ(a.next_u64(), b.next_u64());
  mu::Rng c(mu::mix_seed(42, "x")), d(mu::mix_seed(42, "y"));
  EXPECT_NE(c.next_u64(), d.next_u64());
  EXPECT_NE(mu::mix_seed(1, "batch", 1), mu::mix_seed(1, "batch", 2));
}

TEST(Rng, UniformIntBounds) {
  mu::Rng rng(7);
  for (int i = 0; i < 1000; ++i) {
    const int v = rng.uniform_int(5);
    ASSERT_GE(v, 0);
    ASSERT_LT(v, 5);
  }
  EXPECT_THROW(rng.uniform_int(0), mu::InputError);
}

TEST(Rng, GaussMoments) {
  mu::Rng rng(8);
  double sum = 0, sumsq = 0;
  const int n = 20000;
  for (int i = 0; i < n; ++i) {
    const double v = rng.gauss(0.0, 1.0);
    sum += v;
    sumsq += v * v;
  }
  EXPECT_NEAR(sum / n, 0.0, 0.03);
  EXPECT_NEAR(sumsq / n, 1.0, 0.05);
}
