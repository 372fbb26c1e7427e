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

#include <cmath>

#include "loopfilter/error.hpp"
#include "loopfilter/tensor.hpp"
#include "test_support.hpp"

namespace loopfilter {
namespace {

using testing::central_difference;
using testing::random_conv;
using testing::random_tensor;
using testing::reference_conv;
using testing::relative_error;

double weighted_sum(const Tensor& a, const Tensor& w) {
  double s = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) s += a[i] * w[i];
  return s;
}

TEST(Tensor, ConstructorChecksDataLength) {
  EXPECT_THROW(Tensor({2, 3}, std::vector<double>(5)), Error);
  const Tensor t({2, 3}, 1.5);
  EXPECT_EQ(t.size(), 6u);
  EXPECT_EQ(t.dim(1), 3u);
  EXPECT_THROW((void)t.dim(2), Error);
}

TEST(Conv2d, OneByOneUnitKernelIsIdentity) {
  const Tensor x({1, 1, 3, 3}, 1.0);
  ConvParams p{Tensor({1, 1, 1, 1}, 1.0), {0.0}};
  EXPECT_EQ(conv2d(x, p), x);
}

TEST(Conv2d, ZeroWeightsGiveTheBias) {
  Rng rng(3);
  const Tensor x = random_tensor({2, 3, 6, 5}, rng);
  ConvParams p{Tensor({2, 3, 3, 3}), {0.25, -1.5}};
  const Tensor y = conv2d(x, p);
  for (std::size_t n = 0; n < 2; ++n)
    for (std::size_t c = 0; c < 2; ++c)
      for (std::size_t i = 0; i < 6; ++i)
        for (std::size_t j = 0; j < 5; ++j) EXPECT_EQ(y.at(n, c, i, j), p.bias[c]);
}

TEST(Conv2d, MatchesSixLoopReference) {
  Rng rng(11);
  const Tensor x = random_tensor({1, 2, 5, 5}, rng);
  const ConvParams p = random_conv(3, 2, 3, rng);
  const Tensor y = conv2d(x, p), r = reference_conv(x, p);
  ASSERT_EQ(y.shape(), r.shape());
  for (std::size_t i = 0; i < y.size(); ++i) EXPECT_NEAR(y[i], r[i], 1e-12);
}

TEST(Conv2d, MatchesReferenceForWideKernelsAndBatches) {
  Rng rng(12);
  const Tensor x = random_tensor({3, 2, 7, 9}, rng);
  const ConvParams p = random_conv(4, 2, 5, rng);
  const Tensor y = conv2d(x, p), r = reference_conv(x, p);
  for (std::size_t i = 0; i < y.size(); ++i) EXPECT_NEAR(y[i], r[i], 1e-12);
}

TEST(Conv2d, ShapeErrorsNameTheDimensions) {
  Rng rng(1);
  const ConvParams p = random_conv(2, 3, 3, rng);
  try {
    conv2d(Tensor({1, 2, 5, 5}), p);
    FAIL() << "expected a shape error";
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), ErrorCode::kShapeMismatch);
    EXPECT_NE(std::string(e.what()).find("2"), std::string::npos);
    EXPECT_NE(std::string(e.what()).find("3"), std::string::npos);
  }
  EXPECT_THROW(conv2d(Tensor({1, 3, 2, 5}), p), Error);
  ConvParams even{Tensor({1, 1, 2, 2}), {0.0}};
  EXPECT_THROW(conv2d(Tensor({1, 1, 4, 4}), even), Error);
  ConvParams short_bias{Tensor({2, 1, 3, 3}), {0.0}};
  EXPECT_THROW(conv2d(Tensor({1, 1, 4, 4}), short_bias), Error);
}

TEST(Conv2dGrad, ZeroUpstreamGivesZeroGradients) {
  Rng rng(5);
  const Tensor x = random_tensor({2, 2, 5, 5}, rng);
  const ConvParams p = random_conv(3, 2, 3, rng);
  const ConvGrads g = conv2d_grad(x, p, Tensor({2, 3, 5, 5}));
  for (double v : g.d_input.values()) EXPECT_EQ(v, 0.0);
  for (double v : g.d_weights.values()) EXPECT_EQ(v, 0.0);
  for (double v : g.d_bias) EXPECT_EQ(v, 0.0);
}

TEST(Conv2dGrad, BiasGradientIsUpstreamChannelSum) {
  Rng rng(6);
  const Tensor x = random_tensor({2, 2, 5, 5}, rng);
  const ConvParams p = random_conv(3, 2, 3, rng);
  const Tensor up = random_tensor({2, 3, 5, 5}, rng);
  const ConvGrads g = conv2d_grad(x, p, up);
  for (std::size_t c = 0; c < 3; ++c) {
    double s = 0.0;
    for (std::size_t n = 0; n < 2; ++n)
      for (std::size_t i = 0; i < 25; ++i) s += up[(n * 3 + c) * 25 + i];
    EXPECT_NEAR(g.d_bias[c], s, 1e-12);
  }
}

TEST(Conv2dGrad, MatchesCentralDifferences) {
  Rng rng(7);
  Tensor x = random_tensor({2, 2, 5, 5}, rng);
  ConvParams p = random_conv(3, 2, 3, rng);
  const Tensor up = random_tensor({2, 3, 5, 5}, rng);
  const ConvGrads g = conv2d_grad(x, p, up);
  auto loss = [&] { return weighted_sum(conv2d(x, p), up); };
  double worst = 0.0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    worst = std::max(worst, relative_error(g.d_input[i], central_difference(x[i], loss)));
  }
  for (std::size_t i = 0; i < p.weights.size(); ++i) {
    worst = std::max(worst, relative_error(g.d_weights[i], central_difference(p.weights[i], loss)));
  }
  for (std::size_t i = 0; i < p.bias.size(); ++i) {
    worst = std::max(worst, relative_error(g.d_bias[i], central_difference(p.bias[i], loss)));
  }
  EXPECT_LT(worst, 1e-5);
}

TEST(Conv2dGrad, RejectsMismatchedUpstream) {
  Rng rng(8);
  const Tensor x = random_tensor({1, 2, 5, 5}, rng);
  const ConvParams p = random_conv(3, 2, 3, rng);
  EXPECT_THROW(conv2d_grad(x, p, Tensor({1, 2, 5, 5})), Error);
  EXPECT_THROW(conv2d_grad(x, p, Tensor({1, 3, 5, 4})), Error);
}

TEST(BatchNorm, StandardizedInputPassesThrough) {
  // Build a batch whose channels are exactly zero-mean, unit-variance.
  Tensor x({2, 1, 2, 2}, std::vector<double>{1, -1, 1, -1, -1, 1, -1, 1});
  const BNParams p = BNParams::identity(1);
  const BatchNormResult r = batchnorm(x, p, BNMode::kTrain);
  const double shrink = 1.0 / std::sqrt(1.0 + p.epsilon);
  for (std::size_t i = 0; i < x.size(); ++i) {
    EXPECT_NEAR(r.output[i], x[i] * shrink, 1e-12);
    EXPECT_NEAR(r.output[i], x[i], p.epsilon);
  }
}

TEST(BatchNorm, ZeroScaleGivesConstantShift) {
  Rng rng(9);
  const Tensor x = random_tensor({3, 2, 4, 4}, rng);
  BNParams p = BNParams::identity(2);
  p.scale = {0.0, 0.0};
  p.shift = {0.3, -0.7};
  for (BNMode mode : {BNMode::kTrain, BNMode::kInfer}) {
    const Tensor y = batchnorm(x, p, mode).output;
    for (std::size_t n = 0; n < 3; ++n)
      for (std::size_t c = 0; c < 2; ++c)
        for (std::size_t i = 0; i < 16; ++i) EXPECT_EQ(y[(n * 2 + c) * 16 + i], p.shift[c]);
  }
}

TEST(BatchNorm, TrainOutputHasShiftMeanAndScaleStd) {
  Rng rng(10);
  // Large spread so epsilon's effect on the std stays below 1e-10.
  const Tensor x = random_tensor({4, 3, 5, 5}, rng, -1000.0, 1000.0);
  BNParams p = BNParams::identity(3);
  p.scale = {0.5, -2.0, 1.25};
  p.shift = {0.1, 0.0, -3.0};
  const Tensor y = batchnorm(x, p, BNMode::kTrain).output;
  for (std::size_t c = 0; c < 3; ++c) {
    double s = 0.0, s2 = 0.0;
    const double count = 4 * 25;
    for (std::size_t n = 0; n < 4; ++n)
      for (std::size_t i = 0; i < 25; ++i) s += y[(n * 3 + c) * 25 + i];
    const double mean = s / count;
    for (std::size_t n = 0; n < 4; ++n)
      for (std::size_t i = 0; i < 25; ++i) s2 += std::pow(y[(n * 3 + c) * 25 + i] - mean, 2);
    EXPECT_NEAR(mean, p.shift[c], 1e-9);
    EXPECT_NEAR(std::sqrt(s2 / count), std::abs(p.scale[c]), 1e-9);
  }
}

TEST(BatchNorm, InferModeUsesRunningStatistics) {
  Rng rng(13);
  const Tensor x = random_tensor({1, 2, 3, 3}, rng);
  BNParams p = BNParams::identity(2);
  p.scale = {2.0, 0.5};
  p.shift = {1.0, -1.0};
  p.running_mean = {0.2, -0.4};
  p.running_var = {4.0, 0.25};
  const BatchNormResult r = batchnorm(x, p, BNMode::kInfer);
  EXPECT_FALSE(r.stats.has_value());
  for (std::size_t c = 0; c < 2; ++c)
    for (std::size_t i = 0; i < 9; ++i) {
      const double v = x[c * 9 + i];
      const double want = p.scale[c] * (v - p.running_mean[c]) / std::sqrt(p.running_var[c] + p.epsilon) + p.shift[c];
      EXPECT_NEAR(r.output[c * 9 + i], want, 1e-12);
    }
}

TEST(BatchNorm, ConstantChannelStaysFinite) {
  const Tensor x({2, 1, 2, 2}, 3.0);
  const BatchNormResult r = batchnorm(x, BNParams::identity(1), BNMode::kTrain);
  EXPECT_TRUE(r.output.all_finite());
  for (double v : r.output.values()) EXPECT_EQ(v, 0.0);
}

TEST(BatchNorm, TrainModeNeedsTwoSamples) {
  EXPECT_THROW(batchnorm(Tensor({1, 1, 3, 3}, 1.0), BNParams::identity(1), BNMode::kTrain), Error);
  EXPECT_NO_THROW(batchnorm(Tensor({1, 1, 3, 3}, 1.0), BNParams::identity(1), BNMode::kInfer));
  EXPECT_THROW(batchnorm(Tensor({2, 2, 3, 3}), BNParams::identity(1), BNMode::kInfer), Error);
}

TEST(BatchNorm, ParameterValidation) {
  BNParams p = BNParams::identity(2);
  p.running_var[1] = -1.0;
  EXPECT_THROW(p.validate(), Error);
  p = BNParams::identity(2);
  p.shift.pop_back();
  EXPECT_THROW(p.validate(), Error);
}

TEST(BatchNormGrad, MatchesCentralDifferences) {
  Rng rng(14);
  Tensor x = random_tensor({3, 2, 3, 3}, rng);
  BNParams p = BNParams::identity(2);
  p.scale = {0.7, -1.3};
  p.shift = {0.2, 0.4};
  const Tensor up = random_tensor({3, 2, 3, 3}, rng);
  const BatchNormResult r = batchnorm(x, p, BNMode::kTrain);
  const BatchNormGrads g = batchnorm_grad(up, p, *r.stats);
  auto loss = [&] { return weighted_sum(batchnorm(x, p, BNMode::kTrain).output, up); };
  double worst = 0.0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    worst = std::max(worst, relative_error(g.d_input[i], central_difference(x[i], loss)));
  }
  for (std::size_t c = 0; c < 2; ++c) {
    worst = std::max(worst, relative_error(g.d_scale[c], central_difference(p.scale[c], loss)));
    worst = std::max(worst, relative_error(g.d_shift[c], central_difference(p.shift[c], loss)));
  }
  EXPECT_LT(worst, 1e-5);
}

TEST(BatchNorm, RunningStatsUseMomentumAndUnbiasedVariance) {
  Tensor x({2, 1, 1, 2}, std::vector<double>{1, 2, 3, 6});
  BNParams p = BNParams::identity(1);
  p.running_mean = {1.0};
  p.running_var = {2.0};
  const BatchNormResult r = batchnorm(x, p, BNMode::kTrain);
  update_running_stats(p, *r.stats);
  // batch mean 3, unbiased variance (4 + 1 + 0 + 9) / 3
  EXPECT_NEAR(p.running_mean[0], 0.9 * 1.0 + 0.1 * 3.0, 1e-15);
  EXPECT_NEAR(p.running_var[0], 0.9 * 2.0 + 0.1 * (14.0 / 3.0), 1e-15);
}

TEST(Relu, Examples) {
  const Tensor neg({1, 1, 2, 2}, std::vector<double>{-1, -0.5, -3, -1e-9});
  const Tensor zeroed = relu(neg);
  for (double v : zeroed.values()) EXPECT_EQ(v, 0.0);
  const Tensor pos({1, 1, 2, 2}, std::vector<double>{1, 0.5, 3, 1e-9});
  EXPECT_EQ(relu(pos), pos);
  Rng rng(15);
  const Tensor mixed = random_tensor({2, 3, 4, 4}, rng);
  const Tensor y = relu(mixed);
  for (std::size_t i = 0; i < y.size(); ++i) EXPECT_EQ(y[i], mixed[i] > 0.0 ? mixed[i] : 0.0);
}

TEST(Relu, GradientMasksNonPositiveInputs) {
  const Tensor x({1, 1, 1, 4}, std::vector<double>{-1, 0, 2, 3});
  const Tensor up({1, 1, 1, 4}, std::vector<double>{5, 6, 7, 8});
  const Tensor g = relu_grad(x, up);
  EXPECT_EQ(g, Tensor({1, 1, 1, 4}, std::vector<double>{0, 0, 7, 8}));
  EXPECT_THROW(relu_grad(x, Tensor({1, 1, 1, 3})), Error);
}

TEST(Concat, StacksChannelsInArgumentOrder) {
  const Tensor a({1, 1, 2, 2}, 1.0), b({1, 1, 2, 2}, 2.0);
  const Tensor c = concat_channels(a, b);
  ASSERT_EQ(c.shape(), (Shape{1, 2, 2, 2}));
  for (std::size_t i = 0; i < 4; ++i) {
    EXPECT_EQ(c[i], 1.0);
    EXPECT_EQ(c[4 + i], 2.0);
  }
  const auto [first, second] = split_channels(c, 1);
  EXPECT_EQ(first, a);
  EXPECT_EQ(second, b);
  EXPECT_THROW(concat_channels(a, Tensor({1, 1, 2, 3})), Error);
  EXPECT_THROW(split_channels(c, 3), Error);
}

TEST(Add, IdentityAndCancellation) {
  Rng rng(16);
  const Tensor x = random_tensor({2, 2, 3, 3}, rng);
  EXPECT_EQ(add_elementwise(x, Tensor(x.shape())), x);
  Tensor neg = x;
  for (double& v : neg.values()) v = -v;
  const Tensor cancelled = add_elementwise(x, neg);
  for (double v : cancelled.values()) EXPECT_EQ(v, 0.0);
  EXPECT_THROW(add_elementwise(x, Tensor({2, 2, 3, 4})), Error);
}

}  // namespace
}  // namespace loopfilter
