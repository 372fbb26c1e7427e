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

#include "loopfilter/network.hpp"

#include <cmath>
#include <string>

#include "loopfilter/error.hpp"
#include "loopfilter/random.hpp"

namespace loopfilter {
Plane crop(const Plane& plane, std::size_t x, std::size_t y, std::size_t w, std::size_t h) {
  if (x + w > plane.width || y + h > plane.height) {
    fail(ErrorCode::kShapeMismatch, "crop: region exceeds plane bounds");
  }
  Plane out(w, h, plane.bit_depth);
  for (std::size_t r = 0; r < h; ++r) {
    for (std::size_t c = 0; c < w; ++c) out.at(c, r) = plane.at(x + c, y + r);
  }
  return out;
}

std::vector<int> NetworkConfig::hidden_filters() const {
  if (!per_layer_filters.empty()) return per_layer_filters;
  return std::vector<int>(static_cast<std::size_t>(std::max(num_conv_layers - 1, 0)), base_filters);
}

void NetworkConfig::validate() const {
  if (num_conv_layers < 1) fail(ErrorCode::kInvalidArgument, "config: need at least one conv layer");
  if (kernel_size < 1 || kernel_size % 2 == 0) {
    fail(ErrorCode::kInvalidArgument, "config: kernel_size must be odd and positive");
  }
  if (base_filters < 1) fail(ErrorCode::kInvalidArgument, "config: base_filters must be positive");
  if (!per_layer_filters.empty()) {
    if (per_layer_filters.size() != static_cast<std::size_t>(num_conv_layers - 1)) {
      fail(ErrorCode::kInvalidArgument,
           "config: per_layer_filters needs " + std::to_string(num_conv_layers - 1) + " entries");
    }
    for (int f : per_layer_filters) {
      if (f < 1 || f > base_filters) {
        fail(ErrorCode::kInvalidArgument, "config: per-layer filter count " + std::to_string(f) +
                                              " outside [1, " + std::to_string(base_filters) + "]");
      }
    }
  }
  if (bit_depth < 1 || bit_depth > 16) fail(ErrorCode::kInvalidArgument, "config: bit_depth out of range");
  if (qp_max < 1) fail(ErrorCode::kInvalidArgument, "config: qp_max must be positive");
}

void NetworkModel::validate() const {
  config.validate();
  if (layers.empty()) fail(ErrorCode::kInvalidArgument, "model: no layers");
  std::size_t channels = static_cast<std::size_t>(config.input_channels());
  for (std::size_t i = 0; i < layers.size(); ++i) {
    const Layer& layer = layers[i];
    layer.conv.validate();
    if (layer.conv.in_channels() != channels) {
      fail(ErrorCode::kShapeMismatch, "model: layer " + std::to_string(i + 1) + " expects " +
                                          std::to_string(layer.conv.in_channels()) +
                                          " input channels, previous layer gives " +
                                          std::to_string(channels));
    }
    if (layer.bn) {
      layer.bn->validate();
      if (layer.bn->channels() != layer.conv.out_channels()) {
        fail(ErrorCode::kShapeMismatch,
             "model: layer " + std::to_string(i + 1) + " batchnorm width mismatch");
      }
    }
    channels = layer.conv.out_channels();
  }
  if (channels != 1) fail(ErrorCode::kShapeMismatch, "model: last layer must output one channel");
}

bool NetworkModel::has_batchnorm() const {
  for (const Layer& l : layers) {
    if (l.bn) return true;
  }
  return false;
}

std::size_t NetworkModel::parameter_count() const {
  std::size_t total = 0;
  for (const Layer& l : layers) {
    total += l.conv.weights.size() + l.conv.bias.size();
    if (l.bn) total += 2 * l.bn->channels();
  }
  return total;
}

NetworkModel build_cnnf(const NetworkConfig& config, std::uint64_t rng_seed) {
  config.validate();
  NetworkModel model;
  model.config = config;
  model.provenance.seed = rng_seed;
  Rng rng(rng_seed);

  const std::vector<int> hidden = config.hidden_filters();
  const auto k = static_cast<std::size_t>(config.kernel_size);
  std::size_t in = static_cast<std::size_t>(config.input_channels());
  for (int li = 0; li < config.num_conv_layers; ++li) {
    const bool last = li + 1 == config.num_conv_layers;
    const std::size_t out = last ? 1 : static_cast<std::size_t>(hidden[static_cast<std::size_t>(li)]);
    Layer layer;
    layer.conv.weights = Tensor({out, in, k, k});
    layer.conv.bias.assign(out, 0.0);
    if (!last) {
      const double stddev = std::sqrt(2.0 / static_cast<double>(in * k * k));
      for (double& v : layer.conv.weights.values()) v = stddev * rng.normal();
      layer.bn = BNParams::identity(out);
      layer.relu = true;
    }
    model.layers.push_back(std::move(layer));
    in = out;
  }
  return model;
}

Tensor qp_map(std::size_t width, std::size_t height, int qp, const NetworkConfig& config) {
  if (qp < 0 || qp > config.qp_max) {
    fail(ErrorCode::kInvalidArgument,
         "qp " + std::to_string(qp) + " outside [0, " + std::to_string(config.qp_max) + "]");
  }
  return Tensor({1, 1, height, width}, static_cast<double>(qp) / config.qp_max);
}

NormalizedInputs normalize_inputs(const Plane& plane, int qp, const NetworkConfig& config) {
  const int max_value = (1 << config.bit_depth) - 1;
  if (plane.samples.size() != plane.width * plane.height) {
    fail(ErrorCode::kShapeMismatch, "normalize_inputs: sample count does not match dimensions");
  }
  Tensor recon({1, 1, plane.height, plane.width});
  for (std::size_t i = 0; i < plane.samples.size(); ++i) {
    const int p = plane.samples[i];
    if (p > max_value) {
      fail(ErrorCode::kInvalidArgument, "normalize_inputs: sample " + std::to_string(p) +
                                            " exceeds " + std::to_string(max_value));
    }
    recon[i] = static_cast<double>(p) / max_value;
  }
  return {std::move(recon), qp_map(plane.width, plane.height, qp, config)};
}

Tensor forward_float(const NetworkModel& model, const Tensor& recon, const Tensor& qpmap) {
  if (recon.rank() != 4 || recon.dim(1) != 1) {
    fail(ErrorCode::kShapeMismatch, "forward_float: recon must be (N, 1, H, W), got " +
                                        shape_to_string(recon.shape()));
  }
  Tensor x;
  if (model.config.use_qp_map) {
    if (qpmap.shape() != recon.shape()) {
      fail(ErrorCode::kShapeMismatch, "forward_float: qpmap " + shape_to_string(qpmap.shape()) +
                                          " != recon " + shape_to_string(recon.shape()));
    }
    x = concat_channels(recon, qpmap);
  } else {
    x = recon;
  }
  for (const Layer& layer : model.layers) {
    x = conv2d(x, layer.conv);
    if (layer.bn) x = batchnorm(x, *layer.bn, BNMode::kInfer).output;
    if (layer.relu) x = relu(x);
  }
  return add_elementwise(x, recon);
}

Plane denormalize(const Tensor& output, const NetworkConfig& config) {
  if (output.rank() != 4 || output.dim(0) != 1 || output.dim(1) != 1) {
    fail(ErrorCode::kShapeMismatch, "denormalize: expected (1, 1, H, W), got " +
                                        shape_to_string(output.shape()));
  }
  const int max_value = (1 << config.bit_depth) - 1;
  Plane plane(output.dim(3), output.dim(2), config.bit_depth);
  for (std::size_t i = 0; i < output.size(); ++i) {
    const double scaled = std::round(output[i] * max_value);  // half away from zero
    plane.samples[i] = static_cast<std::uint16_t>(std::clamp(scaled, 0.0, static_cast<double>(max_value)));
  }
  return plane;
}

Plane filter_plane(const NetworkModel& model, const Plane& plane, int qp) {
  const NormalizedInputs in = normalize_inputs(plane, qp, model.config);
  return denormalize(forward_float(model, in.recon, in.qpmap), model.config);
}

}  // namespace loopfilter
