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

#pragma once

#include <cstdint>
#include <optional>
#include <vector>

#include "loopfilter/hash.hpp"
#include "loopfilter/image.hpp"
#include "loopfilter/tensor.hpp"

namespace loopfilter {

struct NetworkConfig {
  int num_conv_layers = 8;
  int kernel_size = 3;
  int base_filters = 64;
  // Output channels of layers 1..num_conv_layers-1; the last layer always
  // produces one channel. Empty means base_filters everywhere.
  std::vector<int> per_layer_filters;
  int bit_depth = 8;
  int qp_max = 51;
  // When false the network takes only the reconstruction plane (the
  // per-QP baseline models).
  bool use_qp_map = true;

  // Resolved hidden-layer widths (length num_conv_layers - 1).
  std::vector<int> hidden_filters() const;
  int input_channels() const { return use_qp_map ? 2 : 1; }
  void validate() const;

  friend bool operator==(const NetworkConfig&, const NetworkConfig&) = default;
};

// One convolution stage. After batchnorm folding or low-rank decomposition a
// model is a plain chain of these with `bn` empty.
struct Layer {
  ConvParams conv;
  std::optional<BNParams> bn;
  bool relu = false;

  friend bool operator==(const Layer&, const Layer&) = default;
};

// Where a model came from: the initialization seed and a digest of the
// resolved run configuration that produced it.
struct Provenance {
  std::uint64_t seed = 0;
  Digest config_digest{};

  friend bool operator==(const Provenance&, const Provenance&) = default;
};

struct NetworkModel {
  NetworkConfig config;
  std::vector<Layer> layers;
  Provenance provenance;

  // Checks channel chaining, input width and the single-channel output.
  void validate() const;
  bool has_batchnorm() const;
  std::size_t parameter_count() const;

  friend bool operator==(const NetworkModel&, const NetworkModel&) = default;
};

struct NormalizedInputs {
  Tensor recon;  // (1, 1, H, W)
  Tensor qpmap;  // (1, 1, H, W), constant
};

// He-style fan-in initialization, deterministic in the seed; BN gamma=1,
// beta=0. The last layer starts at zero, so an untrained model is the
// identity filter.
NetworkModel build_cnnf(const NetworkConfig& config, std::uint64_t rng_seed);

// A QP map materialized as a constant (1, 1, H, W) tensor of qp / qp_max.
Tensor qp_map(std::size_t width, std::size_t height, int qp, const NetworkConfig& config);

NormalizedInputs normalize_inputs(const Plane& plane, int qp, const NetworkConfig& config);

// concat(recon, qpmap) -> conv stack -> + recon. BN layers use their running
// statistics. Inputs may carry a batch dimension N > 1.
Tensor forward_float(const NetworkModel& model, const Tensor& recon, const Tensor& qpmap);

// clamp(round_half_away(v * (2^B - 1))) per sample. `output` must be
// (1, 1, H, W).
Plane denormalize(const Tensor& output, const NetworkConfig& config);

// normalize -> forward_float -> denormalize.
Plane filter_plane(const NetworkModel& model, const Plane& plane, int qp);

}  // namespace loopfilter
