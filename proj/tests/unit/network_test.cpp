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

#include "loopfilter/error.hpp"
#include "loopfilter/network.hpp"
#include "test_support.hpp"

namespace loopfilter {
namespace {

using testing::random_conv;
using testing::random_tensor;

const std::vector<int> kTable1Counts = {45, 54, 58, 48, 51, 40, 31};

NetworkModel small_random_model(Rng& rng, bool with_bn = true) {
  NetworkConfig c;
  c.num_conv_layers = 3;
  c.base_filters = 4;
  NetworkModel m = build_cnnf(c, 5);
  for (Layer& l : m.layers) {
    l.conv = random_conv(l.conv.out_channels(), l.conv.in_channels(), 3, rng, 0.5);
    if (l.bn && with_bn) {
      for (std::size_t ch = 0; ch < l.bn->channels(); ++ch) {
        l.bn->scale[ch] = rng.uniform(0.5, 1.5);
        l.bn->shift[ch] = rng.uniform(-0.2, 0.2);
        l.bn->running_mean[ch] = rng.uniform(-0.3, 0.3);
        l.bn->running_var[ch] = rng.uniform(0.5, 2.0);
      }
    }
  }
  return m;
}

TEST(BuildCnnf, SameSeedIsBitIdentical) {
  const NetworkConfig c;
  EXPECT_EQ(build_cnnf(c, 42), build_cnnf(c, 42));
  EXPECT_NE(build_cnnf(c, 42).layers[0].conv.weights, build_cnnf(c, 43).layers[0].conv.weights);
}

TEST(BuildCnnf, DefaultTopology) {
  const NetworkModel m = build_cnnf(NetworkConfig{}, 1);
  ASSERT_EQ(m.layers.size(), 8u);
  EXPECT_EQ(m.layers[0].conv.weights.shape(), (Shape{64, 2, 3, 3}));
  for (std::size_t i = 1; i < 7; ++i) EXPECT_EQ(m.layers[i].conv.weights.shape(), (Shape{64, 64, 3, 3}));
  EXPECT_EQ(m.layers[7].conv.weights.shape(), (Shape{1, 64, 3, 3}));
  for (std::size_t i = 0; i < 7; ++i) {
    ASSERT_TRUE(m.layers[i].bn.has_value());
    EXPECT_TRUE(m.layers[i].relu);
    for (double g : m.layers[i].bn->scale) EXPECT_EQ(g, 1.0);
    for (double b : m.layers[i].bn->shift) EXPECT_EQ(b, 0.0);
  }
  EXPECT_FALSE(m.layers[7].bn.has_value());
  EXPECT_FALSE(m.layers[7].relu);
}

TEST(BuildCnnf, ParameterCountOfDefaultModel) {
  // weights 2*64*9 + 6*64*64*9 + 64*9, biases 7*64 + 1, BN gamma/beta 2*7*64
  const std::size_t weights = 2 * 64 * 9 + 6 * 64 * 64 * 9 + 64 * 9;
  EXPECT_EQ(weights, 222912u);
  EXPECT_EQ(build_cnnf(NetworkConfig{}, 1).parameter_count(), weights + 449 + 896);
}

TEST(BuildCnnf, CompressedCountsFollowConfig) {
  NetworkConfig c;
  c.per_layer_filters = kTable1Counts;
  const NetworkModel m = build_cnnf(c, 1);
  std::size_t in = 2;
  for (std::size_t i = 0; i < 7; ++i) {
    EXPECT_EQ(m.layers[i].conv.out_channels(), static_cast<std::size_t>(kTable1Counts[i]));
    EXPECT_EQ(m.layers[i].conv.in_channels(), in);
    in = static_cast<std::size_t>(kTable1Counts[i]);
  }
  EXPECT_EQ(m.layers[7].conv.in_channels(), 31u);
  EXPECT_EQ(m.layers[7].conv.out_channels(), 1u);
}

TEST(BuildCnnf, SingleInputWithoutQpMap) {
  NetworkConfig c;
  c.use_qp_map = false;
  EXPECT_EQ(build_cnnf(c, 1).layers[0].conv.in_channels(), 1u);
}

TEST(NetworkConfig, Validation) {
  NetworkConfig c;
  c.per_layer_filters = {45, 54, 58, 48, 51, 40};
  EXPECT_THROW(c.validate(), Error);
  c.per_layer_filters = {45, 54, 58, 48, 51, 40, 0};
  EXPECT_THROW(c.validate(), Error);
  c.per_layer_filters = {45, 54, 58, 48, 51, 40, 65};
  EXPECT_THROW(c.validate(), Error);
  c = NetworkConfig{};
  c.kernel_size = 4;
  EXPECT_THROW(c.validate(), Error);
  c = NetworkConfig{};
  c.qp_max = 0;
  EXPECT_THROW(c.validate(), Error);
}

TEST(NetworkModel, ValidateChecksChaining) {
  NetworkModel m = build_cnnf(NetworkConfig{}, 1);
  m.layers[3].conv.weights = Tensor({64, 63, 3, 3});
  EXPECT_THROW(m.validate(), Error);
  m = build_cnnf(NetworkConfig{}, 1);
  m.layers[7].conv = ConvParams{Tensor({2, 64, 3, 3}), {0.0, 0.0}};
  EXPECT_THROW(m.validate(), Error);
}

TEST(Normalize, PixelAndQpScaling) {
  const NetworkConfig c;
  Plane p(3, 1);
  p.samples = {0, 128, 255};
  const NormalizedInputs in = normalize_inputs(p, 37, c);
  EXPECT_EQ(in.recon[0], 0.0);
  EXPECT_EQ(in.recon[1], 128.0 / 255.0);
  EXPECT_EQ(in.recon[2], 1.0);
  for (double v : in.qpmap.values()) {
    EXPECT_EQ(v, 37.0 / 51.0);
    EXPECT_NEAR(v, 0.72549, 1e-5);
  }
  const NormalizedInputs zero_qp = normalize_inputs(p, 0, c);
  for (double v : zero_qp.qpmap.values()) EXPECT_EQ(v, 0.0);
}

TEST(Normalize, RejectsOutOfRangeInputs) {
  const NetworkConfig c;
  Plane p(2, 2);
  EXPECT_THROW(normalize_inputs(p, 52, c), Error);
  EXPECT_THROW(normalize_inputs(p, -1, c), Error);
  p.samples[0] = 256;
  EXPECT_THROW(normalize_inputs(p, 22, c), Error);
}

TEST(QpMap, IsConstant) {
  const Tensor m = qp_map(7, 5, 22, NetworkConfig{});
  EXPECT_EQ(m.shape(), (Shape{1, 1, 5, 7}));
  for (double v : m.values()) EXPECT_EQ(v, m[0]);
}

TEST(Denormalize, RoundsHalfAwayAndClamps) {
  const NetworkConfig c;
  const Tensor t({1, 1, 1, 4}, std::vector<double>{1.0, -0.2, 0.5, 1.3});
  const Plane p = denormalize(t, c);
  EXPECT_EQ(p.samples, (std::vector<std::uint16_t>{255, 0, 128, 255}));
}

TEST(Denormalize, InvertsNormalizeForEveryPixel) {
  const NetworkConfig c;
  Plane p(256, 1);
  for (int v = 0; v < 256; ++v) p.samples[static_cast<std::size_t>(v)] = static_cast<std::uint16_t>(v);
  EXPECT_EQ(denormalize(normalize_inputs(p, 22, c).recon, c), p);
}

TEST(ForwardFloat, ZeroModelPassesReconThrough) {
  NetworkModel m = build_cnnf(NetworkConfig{}, 3);
  for (Layer& l : m.layers) {
    l.conv.weights.fill(0.0);
    std::fill(l.conv.bias.begin(), l.conv.bias.end(), 0.0);
    if (l.bn) l.bn->shift.assign(l.bn->channels(), 0.0);
  }
  Rng rng(2);
  const Plane p = testing::random_plane(17, 11, rng);
  const NormalizedInputs in = normalize_inputs(p, 32, m.config);
  const Tensor out = forward_float(m, in.recon, in.qpmap);
  EXPECT_EQ(out, in.recon);
  EXPECT_EQ(filter_plane(m, p, 32), p);
}

TEST(ForwardFloat, UntrainedModelIsIdentity) {
  NetworkConfig c;
  c.base_filters = 8;
  Rng rng(4);
  const Plane p = testing::random_plane(12, 12, rng);
  EXPECT_EQ(filter_plane(build_cnnf(c, 9), p, 27), p);
}

TEST(ForwardFloat, MatchesHandChainedTensorOps) {
  Rng rng(21);
  const NetworkModel m = small_random_model(rng);
  const Tensor recon = random_tensor({1, 1, 8, 8}, rng, 0.0, 1.0);
  const Tensor qp = qp_map(8, 8, 32, m.config);
  Tensor x = concat_channels(recon, qp);
  for (const Layer& l : m.layers) {
    x = conv2d(x, l.conv);
    if (l.bn) x = batchnorm(x, *l.bn, BNMode::kInfer).output;
    if (l.relu) x = relu(x);
  }
  const Tensor want = add_elementwise(x, recon);
  const Tensor got = forward_float(m, recon, qp);
  ASSERT_EQ(got.shape(), want.shape());
  for (std::size_t i = 0; i < got.size(); ++i) EXPECT_NEAR(got[i], want[i], 1e-12);
}

TEST(ForwardFloat, ShapeChecks) {
  Rng rng(22);
  const NetworkModel m = small_random_model(rng);
  EXPECT_THROW(forward_float(m, Tensor({1, 1, 8, 8}), Tensor({1, 1, 8, 7})), Error);
  EXPECT_THROW(forward_float(m, Tensor({1, 2, 8, 8}), Tensor({1, 1, 8, 8})), Error);
  for (std::size_t w : {3, 5, 9}) {
    const Tensor r({1, 1, 4, w}, 0.5);
    EXPECT_EQ(forward_float(m, r, qp_map(w, 4, 22, m.config)).shape(), r.shape());
  }
}

TEST(ForwardFloat, Deterministic) {
  Rng rng(23);
  const NetworkModel m = small_random_model(rng);
  const Tensor recon = random_tensor({2, 1, 9, 9}, rng, 0.0, 1.0);
  const Tensor qp({2, 1, 9, 9}, 0.5);
  EXPECT_EQ(forward_float(m, recon, qp), forward_float(m, recon, qp));
}

TEST(Crop, ExtractsRegion) {
  Plane p(4, 3);
  for (std::size_t i = 0; i < p.samples.size(); ++i) p.samples[i] = static_cast<std::uint16_t>(i);
  const Plane c = crop(p, 1, 1, 2, 2);
  EXPECT_EQ(c.samples, (std::vector<std::uint16_t>{5, 6, 9, 10}));
  EXPECT_THROW(crop(p, 3, 0, 2, 1), Error);
}

}  // namespace
}  // namespace loopfilter
