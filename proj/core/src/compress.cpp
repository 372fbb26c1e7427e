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

#include "loopfilter/compress.hpp"

#include <Eigen/SVD>
#include <algorithm>
#include <cmath>
#include <numeric>
#include <nlohmann/json.hpp>

#include "loopfilter/error.hpp"

namespace loopfilter {
namespace {

using Mask = std::vector<bool>;

// Drops output channels of layer `li` (and the matching inputs of layer
// li + 1), folding each dropped channel's constant activation into the next
// layer's bias.
void remove_channels(NetworkModel& model, std::size_t li, const Mask& keep) {
  Layer& layer = model.layers[li];
  Layer& next = model.layers[li + 1];
  const BNParams& bn = *layer.bn;
  const std::size_t cout = layer.conv.out_channels(), cin = layer.conv.in_channels();
  const std::size_t k = layer.conv.kernel(), kk = k * k;
  const std::size_t next_out = next.conv.out_channels(), nk = next.conv.kernel(), nkk = nk * nk;

  for (std::size_t c = 0; c < cout; ++c) {
    if (keep[c]) continue;
    const double constant = layer.relu ? std::max(bn.shift[c], 0.0) : bn.shift[c];
    if (constant == 0.0) continue;
    for (std::size_t o = 0; o < next_out; ++o) {
      const double* w = next.conv.weights.data() + (o * cout + c) * nkk;
      double tap_sum = 0.0;
      for (std::size_t t = 0; t < nkk; ++t) tap_sum += w[t];
      next.conv.bias[o] += tap_sum * constant;
    }
  }

  const std::size_t kept = static_cast<std::size_t>(std::count(keep.begin(), keep.end(), true));
  ConvParams conv{Tensor({kept, cin, k, k}), {}};
  BNParams new_bn;
  new_bn.epsilon = bn.epsilon;
  new_bn.momentum = bn.momentum;
  ConvParams next_conv{Tensor({next_out, kept, nk, nk}), next.conv.bias};
  std::size_t dst = 0;
  for (std::size_t c = 0; c < cout; ++c) {
    if (!keep[c]) continue;
    std::copy_n(layer.conv.weights.data() + c * cin * kk, cin * kk, conv.weights.data() + dst * cin * kk);
    conv.bias.push_back(layer.conv.bias[c]);
    new_bn.scale.push_back(bn.scale[c]);
    new_bn.shift.push_back(bn.shift[c]);
    new_bn.running_mean.push_back(bn.running_mean[c]);
    new_bn.running_var.push_back(bn.running_var[c]);
    for (std::size_t o = 0; o < next_out; ++o) {
      std::copy_n(next.conv.weights.data() + (o * cout + c) * nkk, nkk,
                  next_conv.weights.data() + (o * kept + dst) * nkk);
    }
    ++dst;
  }
  layer.conv = std::move(conv);
  layer.bn = std::move(new_bn);
  next.conv = std::move(next_conv);
}

std::vector<std::size_t> prunable_layers(const NetworkModel& model) {
  std::vector<std::size_t> out;
  for (std::size_t i = 0; i + 1 < model.layers.size(); ++i) {
    if (model.layers[i].bn) out.push_back(i);
  }
  return out;
}

std::size_t largest_scale(const BNParams& bn) {
  std::size_t best = 0;
  for (std::size_t c = 1; c < bn.channels(); ++c) {
    if (std::abs(bn.scale[c]) > std::abs(bn.scale[best])) best = c;
  }
  return best;
}

PruneResult apply_masks(const NetworkModel& model, const std::vector<Mask>& masks, double threshold,
                        std::vector<std::string> warnings) {
  PruneResult result{model, {}};
  PruneReport& report = result.report;
  report.threshold = threshold;
  report.params_before = model.parameter_count();
  report.warnings = std::move(warnings);
  const std::vector<std::size_t> layers = prunable_layers(model);
  for (std::size_t n = 0; n < layers.size(); ++n) {
    const std::size_t li = layers[n];
    const BNParams& bn = *model.layers[li].bn;
    std::vector<std::size_t> pruned;
    for (std::size_t c = 0; c < masks[n].size(); ++c) {
      if (!masks[n][c]) {
        pruned.push_back(c);
        report.max_pruned_abs_scale = std::max(report.max_pruned_abs_scale, std::abs(bn.scale[c]));
      }
    }
    report.original_counts.push_back(bn.channels());
    report.kept_counts.push_back(bn.channels() - pruned.size());
    report.pruned_indices.push_back(std::move(pruned));
    if (report.kept_counts.back() != bn.channels()) remove_channels(result.model, li, masks[n]);
  }
  std::vector<int> widths;
  for (std::size_t i = 0; i + 1 < result.model.layers.size(); ++i) {
    widths.push_back(static_cast<int>(result.model.layers[i].conv.out_channels()));
  }
  if (widths.size() + 1 == static_cast<std::size_t>(result.model.config.num_conv_layers)) {
    result.model.config.per_layer_filters = widths;
  }
  report.params_after = result.model.parameter_count();
  return result;
}

}  // namespace

PruneResult prune_by_bn_scale(const NetworkModel& model, double threshold) {
  model.validate();
  if (!(threshold >= 0.0)) fail(ErrorCode::kInvalidArgument, "prune: threshold must be >= 0");
  std::vector<Mask> masks;
  std::vector<std::string> warnings;
  for (std::size_t li : prunable_layers(model)) {
    const BNParams& bn = *model.layers[li].bn;
    Mask keep(bn.channels());
    for (std::size_t c = 0; c < bn.channels(); ++c) keep[c] = std::abs(bn.scale[c]) >= threshold;
    if (std::none_of(keep.begin(), keep.end(), [](bool b) { return b; })) {
      keep[largest_scale(bn)] = true;
      warnings.push_back("layer " + std::to_string(li + 1) +
                         ": threshold removes every filter; kept the largest |gamma|");
    }
    masks.push_back(std::move(keep));
  }
  return apply_masks(model, masks, threshold, std::move(warnings));
}

PruneResult prune_to_counts(const NetworkModel& model, const std::vector<std::size_t>& counts) {
  model.validate();
  const std::vector<std::size_t> layers = prunable_layers(model);
  if (counts.size() != layers.size()) {
    fail(ErrorCode::kInvalidArgument, "prune_to_counts: need " + std::to_string(layers.size()) + " counts");
  }
  std::vector<Mask> masks;
  for (std::size_t n = 0; n < layers.size(); ++n) {
    const BNParams& bn = *model.layers[layers[n]].bn;
    if (counts[n] < 1 || counts[n] > bn.channels()) {
      fail(ErrorCode::kInvalidArgument, "prune_to_counts: count out of range for layer " +
                                            std::to_string(layers[n] + 1));
    }
    std::vector<std::size_t> order(bn.channels());
    std::iota(order.begin(), order.end(), std::size_t{0});
    std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
      return std::abs(bn.scale[a]) > std::abs(bn.scale[b]);
    });
    Mask keep(bn.channels(), false);
    for (std::size_t i = 0; i < counts[n]; ++i) keep[order[i]] = true;
    masks.push_back(std::move(keep));
  }
  return apply_masks(model, masks, 0.0, {});
}

std::string prune_report_json(const PruneReport& r) {
  nlohmann::json j;
  j["threshold"] = r.threshold;
  j["original_counts"] = r.original_counts;
  j["kept_counts"] = r.kept_counts;
  j["pruned_indices"] = r.pruned_indices;
  j["max_pruned_abs_scale"] = r.max_pruned_abs_scale;
  j["params_before"] = r.params_before;
  j["params_after"] = r.params_after;
  j["parameter_ratio"] = r.parameter_ratio();
  j["warnings"] = r.warnings;
  return j.dump(2);
}

NetworkModel fold_batchnorm(const NetworkModel& model) {
  model.validate();
  NetworkModel out = model;
  for (Layer& layer : out.layers) {
    if (!layer.bn) continue;
    const BNParams& bn = *layer.bn;
    const std::size_t per_filter = layer.conv.weights.size() / layer.conv.out_channels();
    for (std::size_t c = 0; c < bn.channels(); ++c) {
      const double a = bn.scale[c] / std::sqrt(bn.running_var[c] + bn.epsilon);
      double* w = layer.conv.weights.data() + c * per_filter;
      for (std::size_t i = 0; i < per_filter; ++i) w[i] *= a;
      layer.conv.bias[c] = (layer.conv.bias[c] - bn.running_mean[c]) * a + bn.shift[c];
    }
    layer.bn.reset();
  }
  return out;
}

double LowRankLayer::truncation_error() const {
  double s = 0.0;
  for (std::size_t i = rank; i < singular_values.size(); ++i) s += singular_values[i] * singular_values[i];
  return std::sqrt(s);
}

LowRankLayer svd_lowrank(const ConvParams& layer, std::size_t rank) {
  layer.validate();
  const std::size_t cout = layer.out_channels(), cin = layer.in_channels(), k = layer.kernel();
  const std::size_t cols = cin * k * k;
  const std::size_t max_rank = std::min(cout, cols);
  if (rank < 1 || rank > max_rank) {
    fail(ErrorCode::kInvalidArgument, "svd_lowrank: rank " + std::to_string(rank) + " outside [1, " +
                                          std::to_string(max_rank) + "]");
  }
  using RowMajor = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
  const Eigen::Map<const RowMajor> a(layer.weights.data(), static_cast<Eigen::Index>(cout),
                                     static_cast<Eigen::Index>(cols));
  const Eigen::JacobiSVD<Eigen::MatrixXd> svd(a, Eigen::ComputeThinU | Eigen::ComputeThinV);
  const Eigen::VectorXd& sigma = svd.singularValues();

  LowRankLayer out;
  out.rank = rank;
  out.singular_values.assign(sigma.data(), sigma.data() + sigma.size());
  out.basis.weights = Tensor({rank, cin, k, k});
  out.basis.bias.assign(rank, 0.0);
  out.combine.weights = Tensor({cout, rank, 1, 1});
  out.combine.bias = layer.bias;
  const Eigen::MatrixXd& u = svd.matrixU();
  const Eigen::MatrixXd& v = svd.matrixV();
  for (std::size_t r = 0; r < rank; ++r) {
    const auto ri = static_cast<Eigen::Index>(r);
    for (std::size_t c = 0; c < cols; ++c) {
      out.basis.weights[r * cols + c] = sigma(ri) * v(static_cast<Eigen::Index>(c), ri);
    }
    for (std::size_t o = 0; o < cout; ++o) {
      out.combine.weights[o * rank + r] = u(static_cast<Eigen::Index>(o), ri);
    }
  }
  return out;
}

std::size_t select_rank(const std::vector<double>& singular_values, double energy_keep) {
  if (singular_values.empty()) fail(ErrorCode::kInvalidArgument, "select_rank: no singular values");
  if (!(energy_keep > 0.0 && energy_keep <= 1.0)) {
    fail(ErrorCode::kInvalidArgument, "select_rank: energy_keep must lie in (0, 1]");
  }
  double total = 0.0;
  std::size_t nonzero = 0;
  for (double s : singular_values) {
    if (s < 0.0) fail(ErrorCode::kInvalidArgument, "select_rank: negative singular value");
    total += s * s;
    if (s > 0.0) ++nonzero;
  }
  if (total == 0.0) return 1;
  double running = 0.0;
  for (std::size_t r = 0; r < singular_values.size(); ++r) {
    running += singular_values[r] * singular_values[r];
    if (running / total >= energy_keep) return r + 1;
  }
  // Rounding can leave the full sum a hair under 1.0.
  return nonzero;
}

LowRankResult decompose_model(const NetworkModel& folded, double energy_keep) {
  folded.validate();
  if (folded.has_batchnorm()) {
    fail(ErrorCode::kInvalidArgument, "decompose_model: fold batchnorm into the convolutions first");
  }
  LowRankResult result;
  result.model.config = folded.config;
  result.model.provenance = folded.provenance;
  result.report.params_before = folded.parameter_count();
  for (const Layer& layer : folded.layers) {
    const std::size_t cout = layer.conv.out_channels();
    const std::size_t cols = layer.conv.in_channels() * layer.conv.kernel() * layer.conv.kernel();
    const LowRankLayer probe = svd_lowrank(layer.conv, 1);
    const std::size_t rank = select_rank(probe.singular_values, energy_keep);
    if (rank * cols + cout * rank >= cout * cols) {
      result.model.layers.push_back(layer);
      result.report.ranks.push_back(0);
      continue;
    }
    LowRankLayer lr = svd_lowrank(layer.conv, rank);
    result.model.layers.push_back(Layer{std::move(lr.basis), std::nullopt, false});
    result.model.layers.push_back(Layer{std::move(lr.combine), std::nullopt, layer.relu});
    result.report.ranks.push_back(rank);
  }
  result.report.params_after = result.model.parameter_count();
  return result;
}

}  // namespace loopfilter
