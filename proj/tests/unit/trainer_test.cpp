// Copyright 2026 The loopfilter Authors
// SPDX-License-Identifier: Apache-2.0
//
// Licensed under the Apache License, Version 2.0 (the "License");
// you may not use this file except in compliance with the License.
// You may obtain a copy of the License at
//
//      http://www.apache.org/licenses/LICENSE-2.0
//
// Unless required by applicable law or agreed to in writing, software
// distributed under the License is distributed on an "AS IS" BASIS,
// WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
// See the License for the specific language governing permissions and
// limitations under the License.


#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <cstring>

#include "loopfilter/dfp.hpp"
#include "loopfilter/error.hpp"
#include "loopfilter/trainer.hpp"
#include "test_support.hpp"

namespace loopfilter {
namespace {

using testing::central_difference;
using testing::random_conv;
using testing::random_tensor;
using testing::relative_error;

TrainingSample random_sample(std::size_t h, std::size_t w, int qp, Rng& rng) {
  TrainingSample s;
  s.height = h;
  s.width = w;
  s.qp = qp;
  for (std::size_t i = 0; i < h * w; ++i) {
    const double y = rng.uniform(0.2, 0.8);
    s.target.push_back(y);
    s.recon.push_back(y + rng.uniform(-0.05, 0.05));
  }
  return s;
}

NetworkModel toy_model(std::size_t filters, int layers, Rng& rng) {
  NetworkConfig c;
  c.num_conv_layers = layers;
  c.base_filters = static_cast<int>(filters);
  NetworkModel m = build_cnnf(c, 7);
  for (Layer& l : m.layers) {
    l.conv = random_conv(l.conv.out_channels(), l.conv.in_channels(), 3, rng, 0.4);
    if (l.bn) {
      for (std::size_t ch = 0; ch < l.bn->channels(); ++ch) {
        l.bn->scale[ch] = rng.uniform(0.5, 1.5);
        l.bn->shift[ch] = rng.uniform(0.05, 0.3);
      }
    }
  }
  return m;
}

// Every trainable scalar of the model, in a fixed order, paired with the
// matching gradient entry.
template <typename Fn>
void visit_params(NetworkModel& m, const ModelGradients& g, Fn&& fn) {
  for (std::size_t i = 0; i < m.layers.size(); ++i) {
    Layer& l = m.layers[i];
    const LayerGrads& lg = g.layers[i];
    for (std::size_t k = 0; k < l.conv.weights.size(); ++k) fn(l.conv.weights[k], lg.d_weights[k]);
    for (std::size_t k = 0; k < l.conv.bias.size(); ++k) fn(l.conv.bias[k], lg.d_bias[k]);
    if (l.bn) {
      for (std::size_t c = 0; c < l.bn->channels(); ++c) fn(l.bn->scale[c], lg.d_scale[c]);
      for (std::size_t c = 0; c < l.bn->channels(); ++c) fn(l.bn->shift[c], lg.d_shift[c]);
    }
  }
}

double pairwise_lda(const Tensor& w) {
  const std::size_t f = w.dim(0), d = w.size() / f;
  std::vector<std::vector<double>> u(f, std::vector<double>(d));
  for (std::size_t i = 0; i < f; ++i) {
    double n = 0.0;
    for (std::size_t k = 0; k < d; ++k) n += w[i * d + k] * w[i * d + k];
    n = std::sqrt(n);
    for (std::size_t k = 0; k < d; ++k) u[i][k] = w[i * d + k] / n;
  }
  double s = 0.0;
  for (std::size_t i = 0; i < f; ++i)
    for (std::size_t j = i + 1; j < f; ++j)
      for (std::size_t k = 0; k < d; ++k) s += std::abs(u[j][k] - u[i][k]);
  return s;
}

TEST(Lda, IdenticalAndParallelFiltersCostNothing) {
  Rng rng(1);
  Tensor w({3, 2, 3, 3});
  const Tensor one = random_tensor({1, 2, 3, 3}, rng);
  for (std::size_t f = 0; f < 3; ++f)
    for (std::size_t k = 0; k < 18; ++k) w[f * 18 + k] = one[k] * (f + 1.0);
  EXPECT_NEAR(lda_regularizer(w).value, 0.0, 1e-12);
}

TEST(Lda, MatchesPairwiseOracle) {
  Rng rng(2);
  for (std::size_t filters : {2u, 3u, 7u}) {
    const Tensor w = random_tensor({filters, 2, 3, 3}, rng);
    EXPECT_NEAR(lda_regularizer(w).value, pairwise_lda(w), 1e-12);
  }
}

TEST(Lda, HandlesTiesLikeThePairwiseSum) {
  // Coordinates shared exactly by several filters exercise the tie groups.
  Tensor w({4, 1, 1, 3}, std::vector<double>{1, 0, 0, 1, 0, 0, 0, 1, 0, 1, 1, 0});
  EXPECT_NEAR(lda_regularizer(w).value, pairwise_lda(w), 1e-12);
}

TEST(Lda, GradientMatchesCentralDifferences) {
  Rng rng(3);
  Tensor w = random_tensor({3, 2, 3, 3}, rng);
  const LdaTerm t = lda_regularizer(w);
  double worst = 0.0;
  for (std::size_t i = 0; i < w.size(); ++i) {
    const double fd = central_difference(w[i], [&] { return pairwise_lda(w); });
    worst = std::max(worst, relative_error(t.gradient[i], fd));
  }
  EXPECT_LT(worst, 1e-4);
}

TEST(Lda, ScalingAFilterLeavesTheValue) {
  Rng rng(4);
  Tensor w = random_tensor({5, 3, 3, 3}, rng);
  const double before = lda_regularizer(w).value;
  for (std::size_t k = 0; k < 27; ++k) w[2 * 27 + k] *= 3.7;
  EXPECT_NEAR(lda_regularizer(w).value, before, 1e-12);
}

TEST(Lda, ZeroFilterIsGuarded) {
  Tensor w({2, 1, 3, 3});
  for (std::size_t k = 0; k < 9; ++k) w[k] = 0.1 * (k + 1.0);
  const LdaTerm t = lda_regularizer(w);
  EXPECT_TRUE(std::isfinite(t.value));
  EXPECT_TRUE(t.gradient.all_finite());
}

TEST(Loss, PerfectModelHasZeroLoss) {
  NetworkConfig c;
  c.num_conv_layers = 3;
  c.base_filters = 4;
  const NetworkModel m = build_cnnf(c, 1);  // last layer zero: output = recon
  Rng rng(5);
  std::vector<TrainingSample> data{random_sample(6, 6, 22, rng), random_sample(6, 6, 37, rng)};
  for (TrainingSample& s : data) s.target = s.recon;
  TrainConfig tc;
  tc.lambda_w = tc.lambda_s = tc.lambda_lda = 0.0;
  const TrainingSample* batch[] = {&data[0], &data[1]};
  const LossResult r = loss_eq1(m, batch, tc);
  EXPECT_EQ(r.loss.mse, 0.0);
  EXPECT_EQ(r.loss.total, 0.0);
}

TEST(Loss, ZeroWeightModelRegularizers) {
  NetworkConfig c;
  c.num_conv_layers = 4;
  c.base_filters = 5;
  NetworkModel m = build_cnnf(c, 1);
  for (Layer& l : m.layers) l.conv.weights.fill(0.0);
  Rng rng(6);
  std::vector<TrainingSample> data{random_sample(5, 5, 22, rng), random_sample(5, 5, 27, rng)};
  const TrainingSample* batch[] = {&data[0], &data[1]};
  const LossResult r = loss_eq1(m, batch, TrainConfig{});
  EXPECT_EQ(r.loss.reg_w, 0.0);
  EXPECT_EQ(r.loss.reg_s, 15.0);  // three BN layers of five channels, gamma = 1
  EXPECT_TRUE(std::isfinite(r.loss.reg_lda));
}

TEST(Loss, CompositionIdentityIsExact) {
  Rng rng(7);
  const NetworkModel m = toy_model(4, 3, rng);
  std::vector<TrainingSample> data{random_sample(6, 6, 22, rng), random_sample(6, 6, 32, rng)};
  const TrainingSample* batch[] = {&data[0], &data[1]};
  TrainConfig tc;
  const LossBreakdown l = loss_eq1(m, batch, tc).loss;
  EXPECT_EQ(l.total, l.mse + tc.lambda_w * l.reg_w + tc.lambda_s * l.reg_s + tc.lambda_lda * l.reg_lda);
}

TEST(Loss, MseIsHalfMeanOverBatchOfSquaredError) {
  NetworkConfig c;
  c.num_conv_layers = 2;
  c.base_filters = 2;
  const NetworkModel m = build_cnnf(c, 1);  // identity
  Rng rng(8);
  std::vector<TrainingSample> data{random_sample(4, 4, 22, rng), random_sample(4, 4, 22, rng),
                                   random_sample(4, 4, 22, rng)};
  double sq = 0.0;
  for (const TrainingSample& s : data)
    for (std::size_t i = 0; i < 16; ++i) sq += std::pow(s.target[i] - s.recon[i], 2);
  const TrainingSample* batch[] = {&data[0], &data[1], &data[2]};
  EXPECT_NEAR(loss_eq1(m, batch, TrainConfig{}).loss.mse, sq / 6.0, 1e-15);
}

TEST(Loss, GradientOfEveryTermMatchesFiniteDifferences) {
  Rng rng(9);
  NetworkModel m = toy_model(4, 3, rng);
  std::vector<TrainingSample> data{random_sample(6, 6, 22, rng), random_sample(6, 6, 37, rng),
                                   random_sample(6, 6, 27, rng)};
  const TrainingSample* batch[] = {&data[0], &data[1], &data[2]};
  // Large lambdas so each regularizer contributes visibly to the gradient.
  TrainConfig tc;
  tc.lambda_w = 1e-2;
  tc.lambda_s = 2e-2;
  tc.lambda_lda = 3e-2;
  const LossResult r = loss_eq1(m, batch, tc);
  std::size_t index = 0;
  visit_params(m, r.grads, [&](double& p, double g) {
    const double fd = central_difference(p, [&] { return loss_eq1(m, batch, tc).loss.total; });
    // Conv biases ahead of train-mode BN have exactly zero gradient, so the
    // floor absorbs finite-difference noise there.
    EXPECT_LT(relative_error(g, fd, 1e-4), 1e-4) << "parameter " << index << ": " << g << " vs " << fd;
    ++index;
  });
}

TEST(Loss, NonFiniteTermIsNamed) {
  Rng rng(10);
  NetworkModel m = toy_model(3, 3, rng);
  m.layers[1].conv.weights[0] = std::nan("");
  std::vector<TrainingSample> data{random_sample(5, 5, 22, rng), random_sample(5, 5, 22, rng)};
  const TrainingSample* batch[] = {&data[0], &data[1]};
  try {
    loss_eq1(m, batch, TrainConfig{});
    FAIL() << "expected an error";
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), ErrorCode::kNonFinite);
    EXPECT_NE(std::string(e.what()).find("term"), std::string::npos);
  }
}

TEST(SgdStep, ZeroGradientLeavesModel) {
  Rng rng(11);
  NetworkModel m = toy_model(3, 3, rng);
  const NetworkModel before = m;
  EXPECT_EQ(sgd_step(m, ModelGradients::zeros_like(m), 0.1, 1.0), 1.0);
  EXPECT_EQ(m, before);
}

TEST(SgdStep, ClipsByGlobalNorm) {
  Rng rng(12);
  NetworkModel m = toy_model(3, 3, rng);
  const NetworkModel before = m;
  ModelGradients g = ModelGradients::zeros_like(m);
  g.layers[0].d_weights[0] = 6.0;
  g.layers[2].d_bias[0] = 8.0;  // norm 10
  EXPECT_EQ(sgd_step(m, g, 0.1, 5.0), 0.5);
  EXPECT_NEAR(m.layers[0].conv.weights[0], before.layers[0].conv.weights[0] - 0.1 * 3.0, 1e-15);
  EXPECT_NEAR(m.layers[2].conv.bias[0], before.layers[2].conv.bias[0] - 0.1 * 4.0, 1e-15);
}

TEST(SgdStep, TwoStepsMatchScalarHandComputation) {
  Rng rng(13);
  NetworkModel m = toy_model(2, 2, rng);
  const double w0 = m.layers[0].conv.weights[3];
  ModelGradients g1 = ModelGradients::zeros_like(m), g2 = ModelGradients::zeros_like(m);
  g1.layers[0].d_weights[3] = 0.5;   // below the clip: used as is
  g2.layers[0].d_weights[3] = -4.0;  // norm 4 > 2: scaled to -2
  sgd_step(m, g1, 0.01, 2.0);
  sgd_step(m, g2, 0.01, 2.0);
  EXPECT_NEAR(m.layers[0].conv.weights[3], w0 - 0.01 * (0.5 + -2.0), 1e-15);
}

TEST(SgdStep, RejectsMismatchedGradients) {
  Rng rng(14);
  NetworkModel m = toy_model(2, 2, rng);
  ModelGradients g = ModelGradients::zeros_like(m);
  g.layers.pop_back();
  EXPECT_THROW(sgd_step(m, g, 0.1, 1.0), Error);
  g = ModelGradients::zeros_like(m);
  g.layers[0].d_bias.push_back(0.0);
  EXPECT_THROW(sgd_step(m, g, 0.1, 1.0), Error);
}

TEST(AdamStep, TwoStepsMatchScalarHandComputation) {
  Rng rng(15);
  NetworkModel m = toy_model(2, 2, rng);
  const double w0 = m.layers[1].conv.weights[0];
  TrainConfig tc;
  tc.grad_clip_norm = 100.0;
  AdamState state;
  ModelGradients g = ModelGradients::zeros_like(m);
  g.layers[1].d_weights[0] = 0.2;
  adam_step(m, g, state, 0.01, tc);
  g.layers[1].d_weights[0] = -0.4;
  adam_step(m, g, state, 0.01, tc);

  double w = w0, mom = 0.0, vel = 0.0;
  const double grads[] = {0.2, -0.4};
  for (int t = 1; t <= 2; ++t) {
    const double gt = grads[t - 1];
    mom = 0.9 * mom + 0.1 * gt;
    vel = 0.999 * vel + 0.001 * gt * gt;
    w -= 0.01 * (mom / (1 - std::pow(0.9, t))) / (std::sqrt(vel / (1 - std::pow(0.999, t))) + 1e-8);
  }
  EXPECT_NEAR(m.layers[1].conv.weights[0], w, 1e-15);
  EXPECT_EQ(state.t, 2u);
}

TEST(AdamStep, StateResetsWhenParameterCountChanges) {
  Rng rng(16);
  NetworkModel m = toy_model(2, 2, rng);
  AdamState state;
  state.m.assign(3, 1.0);
  state.v.assign(3, 1.0);
  state.t = 9;
  adam_step(m, ModelGradients::zeros_like(m), state, 0.01, TrainConfig{});
  EXPECT_EQ(state.t, 1u);
  EXPECT_EQ(state.m.size(), m.parameter_count());
}

TEST(TrainConfig, ScheduleAndValidation) {
  TrainConfig tc = TrainConfig::paper();
  EXPECT_EQ(tc.batch_size, 64u);
  EXPECT_EQ(tc.base_lr, 0.1);
  EXPECT_EQ(tc.lambda_w, 1e-5);
  EXPECT_EQ(tc.lambda_s, 5e-8);
  EXPECT_EQ(tc.lambda_lda, 3e-6);
  EXPECT_EQ(tc.epochs, 32);
  EXPECT_EQ(tc.optimizer, Optimizer::kSgd);
  EXPECT_EQ(tc.lr_at(0), 0.1);
  EXPECT_EQ(tc.lr_at(23), 0.1);
  EXPECT_DOUBLE_EQ(tc.lr_at(24), 0.01);
  tc.lr_decay_epoch = -1;
  EXPECT_EQ(tc.lr_at(100), 0.1);

  TrainConfig bad;
  bad.batch_size = 1;
  EXPECT_THROW(bad.validate(), Error);
  bad = TrainConfig{};
  bad.lambda_lda = -1.0;
  EXPECT_THROW(bad.validate(), Error);
  bad = TrainConfig{};
  bad.grad_clip_norm = 0.0;
  EXPECT_THROW(bad.validate(), Error);
  bad = TrainConfig{};
  bad.adam_beta2 = 1.0;
  EXPECT_THROW(bad.validate(), Error);
}

TEST(Optimizer, NamesRoundTrip) {
  EXPECT_EQ(parse_optimizer("sgd"), Optimizer::kSgd);
  EXPECT_EQ(parse_optimizer(to_string(Optimizer::kAdam)), Optimizer::kAdam);
  EXPECT_THROW(parse_optimizer("rmsprop"), Error);
}

std::vector<TrainingSample> toy_dataset(std::size_t n, Rng& rng) {
  std::vector<TrainingSample> d;
  for (std::size_t i = 0; i < n; ++i) d.push_back(random_sample(8, 8, i % 2 ? 22 : 37, rng));
  return d;
}

TEST(Train, ZeroEpochsReturnsModelUnchanged) {
  Rng rng(17);
  const NetworkModel m = toy_model(3, 3, rng);
  const std::vector<TrainingSample> data = toy_dataset(8, rng);
  TrainConfig tc = TrainConfig::desk();
  tc.batch_size = 4;
  tc.epochs = 0;
  const TrainResult r = train(m, data, tc);
  EXPECT_EQ(r.model, m);
  EXPECT_EQ(r.steps, 0u);
}

TEST(Train, StepCountAndHistory) {
  Rng rng(18);
  const std::vector<TrainingSample> data = toy_dataset(11, rng);
  TrainConfig tc = TrainConfig::desk();
  tc.batch_size = 4;
  tc.epochs = 3;
  std::size_t seen = 0;
  TrainCallbacks cb;
  cb.on_step = [&](const StepRecord&) { ++seen; };
  const TrainResult r = train(toy_model(3, 3, rng), data, tc, cb);
  EXPECT_EQ(r.steps, 3u * (11 / 4));
  EXPECT_EQ(seen, r.steps);
  EXPECT_EQ(r.epoch_history.size(), 3u);
}

TEST(Train, FixedSeedIsReproducible) {
  Rng rng(19);
  const NetworkModel m = toy_model(3, 3, rng);
  const std::vector<TrainingSample> data = toy_dataset(8, rng);
  for (Optimizer opt : {Optimizer::kSgd, Optimizer::kAdam}) {
    TrainConfig tc = TrainConfig::desk();
    tc.optimizer = opt;
    tc.batch_size = 4;
    tc.epochs = 2;
    EXPECT_EQ(train(m, data, tc).model, train(m, data, tc).model);
  }
}

TEST(Train, ReducesTrainingLossOnAToyTask) {
  Rng rng(20);
  NetworkConfig c;
  c.num_conv_layers = 3;
  c.base_filters = 4;
  const NetworkModel m = build_cnnf(c, 3);
  // Target is a constant brightening of the recon: easy to learn.
  std::vector<TrainingSample> data = toy_dataset(16, rng);
  for (TrainingSample& s : data)
    for (std::size_t i = 0; i < s.target.size(); ++i) s.target[i] = s.recon[i] + 0.05;
  TrainConfig tc = TrainConfig::desk();
  tc.batch_size = 4;
  tc.epochs = 15;
  const double before = evaluate_mse(m, data);
  const double after = evaluate_mse(train(m, data, tc).model, data);
  EXPECT_LT(after, 0.5 * before);
}

TEST(Train, RejectsDatasetSmallerThanABatch) {
  Rng rng(21);
  const std::vector<TrainingSample> data = toy_dataset(3, rng);
  TrainConfig tc = TrainConfig::desk();
  tc.batch_size = 4;
  EXPECT_THROW(train(toy_model(2, 2, rng), data, tc), Error);
}

TEST(Train, ScheduledPruningShrinksModel) {
  Rng rng(22);
  NetworkModel m = toy_model(4, 3, rng);
  m.layers[0].bn->scale[1] = 0.0;
  const std::vector<TrainingSample> data = toy_dataset(8, rng);
  TrainConfig tc = TrainConfig::desk();
  tc.batch_size = 4;
  tc.epochs = 2;
  tc.lr_decay_epoch = -1;
  tc.base_lr = 0.0;
  tc.prune_interval = 1;
  tc.prune_threshold = 1e-3;
  const TrainResult r = train(m, data, tc);
  EXPECT_EQ(r.model.layers[0].conv.out_channels(), 3u);
  EXPECT_EQ(r.model.layers[1].conv.in_channels(), 3u);
}

FLTable table_for(const NetworkModel& m) {
  FLTable t;
  for (std::size_t i = 0; i < m.layers.size(); ++i) {
    const int fl_o = i + 1 == m.layers.size() ? kInputFl : 12;
    t.layers.push_back({estimate_fl(m.layers[i].conv.weights.values(), kWeightBits), 20, fl_o});
  }
  return t;
}

NetworkModel bn_free_toy(Rng& rng) {
  NetworkModel m = toy_model(3, 3, rng);
  for (Layer& l : m.layers) l.bn.reset();
  return m;
}

TEST(QuantAwareFinetune, OnGridWithZeroLrIsUnchanged) {
  Rng rng(23);
  const NetworkModel raw = bn_free_toy(rng);
  const FLTable t = table_for(raw);
  const NetworkModel m = snap_to_dfp_grid(raw, t);
  TrainConfig tc = TrainConfig::desk();
  tc.batch_size = 2;
  tc.epochs = 2;
  tc.base_lr = 0.0;
  const std::vector<TrainingSample> data = toy_dataset(4, rng);
  EXPECT_EQ(quant_aware_finetune(m, data, t, tc).model, m);
}

TEST(QuantAwareFinetune, SnappedForwardMatchesRoundThenForward) {
  Rng rng(24);
  const NetworkModel m = bn_free_toy(rng);
  const FLTable t = table_for(m);
  NetworkModel manual = m;
  for (std::size_t i = 0; i < manual.layers.size(); ++i) {
    const DFPFormat wf{kWeightBits, t.layers[i].fl_w}, bf{kBiasBits, t.layers[i].fl_b};
    for (double& w : manual.layers[i].conv.weights.values()) w = dequantize_value(quantize_value(w, wf), wf);
    for (double& b : manual.layers[i].conv.bias) b = dequantize_value(quantize_value(b, bf), bf);
  }
  const Tensor recon = random_tensor({1, 1, 9, 9}, rng, 0.0, 1.0);
  const Tensor qp = qp_map(9, 9, 32, m.config);
  const Tensor a = forward_float(snap_to_dfp_grid(m, t), recon, qp);
  const Tensor b = forward_float(manual, recon, qp);
  for (std::size_t i = 0; i < a.size(); ++i) EXPECT_NEAR(a[i], b[i], 1e-9);
}

TEST(QuantAwareFinetune, Preconditions) {
  Rng rng(25);
  const std::vector<TrainingSample> data = toy_dataset(4, rng);
  TrainConfig tc = TrainConfig::desk();
  tc.batch_size = 2;
  const NetworkModel with_bn = toy_model(3, 3, rng);
  EXPECT_THROW(quant_aware_finetune(with_bn, data, table_for(with_bn), tc), Error);
  const NetworkModel m = bn_free_toy(rng);
  FLTable short_table = table_for(m);
  short_table.layers.pop_back();
  EXPECT_THROW(quant_aware_finetune(m, data, short_table, tc), Error);
}

TEST(TrainLog, RecordHasOneFieldPerHeaderColumn) {
  StepRecord r{2, 17, 0.001, {0.5, 1.0, 2.0, 3.0, 0.75}};
  const std::string line = format_log_record(r);
  EXPECT_EQ(std::count(line.begin(), line.end(), '\t'),
            std::count(kTrainLogHeader, kTrainLogHeader + std::strlen(kTrainLogHeader), '\t'));
  EXPECT_EQ(line.rfind("2\t17\t0.5\t", 0), 0u);
}

}  // namespace
}  // namespace loopfilter
