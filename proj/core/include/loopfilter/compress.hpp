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

#include <cstddef>
#include <string>
#include <vector>

#include "loopfilter/network.hpp"
#include "loopfilter/tensor.hpp"

namespace loopfilter {

struct PruneReport {
  double threshold = 0.0;
  std::vector<std::size_t> original_counts;  // per BN layer, in model order
  std::vector<std::size_t> kept_counts;
  std::vector<std::vector<std::size_t>> pruned_indices;  // original channel ids
  double max_pruned_abs_scale = 0.0;
  std::size_t params_before = 0;
  std::size_t params_after = 0;
  std::vector<std::string> warnings;

  double parameter_ratio() const {
    return params_before == 0 ? 1.0 : static_cast<double>(params_after) / params_before;
  }
};

struct PruneResult {
  NetworkModel model;
  PruneReport report;
};

// Removes every filter whose BN scale satisfies |gamma| < threshold. The
// removed channel is treated as the constant act(beta) and folded into the
// next layer's bias. A layer always keeps its largest-|gamma| filter.
PruneResult prune_by_bn_scale(const NetworkModel& model, double threshold);

// Keeps exactly counts[i] filters (largest |gamma|) in the i-th BN layer.
PruneResult prune_to_counts(const NetworkModel& model, const std::vector<std::size_t>& counts);

std::string prune_report_json(const PruneReport& report);

// Inference-mode BN folded into the preceding convolution.
NetworkModel fold_batchnorm(const NetworkModel& model);

struct LowRankLayer {
  ConvParams basis;    // (r, Cin, k, k), zero bias
  ConvParams combine;  // (Cout, r, 1, 1), original bias
  std::size_t rank = 0;
  std::vector<double> singular_values;  // all of them, descending

  // Frobenius norm of the discarded spectrum.
  double truncation_error() const;
};

LowRankLayer svd_lowrank(const ConvParams& layer, std::size_t rank);

// Smallest r with sum_{i<=r} s_i^2 / sum s_i^2 >= energy_keep.
std::size_t select_rank(const std::vector<double>& singular_values, double energy_keep);

struct LowRankReport {
  std::vector<std::size_t> ranks;  // per original layer; 0 = left intact
  std::size_t params_before = 0;
  std::size_t params_after = 0;
};

struct LowRankResult {
  NetworkModel model;
  LowRankReport report;
};

// Replaces each layer by a basis conv and a 1x1 combine conv wherever the
// energy-selected rank reduces the parameter count. The input must be
// BN-free.
LowRankResult decompose_model(const NetworkModel& folded, double energy_keep);

}  // namespace loopfilter
