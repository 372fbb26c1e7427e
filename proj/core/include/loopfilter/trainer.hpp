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
#include <functional>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "loopfilter/network.hpp"
#include "loopfilter/tensor.hpp"

namespace loopfilter {

struct FLTable;  // dfp.hpp

enum class Optimizer { kSgd, kAdam };

struct TrainConfig {
  Optimizer optimizer = Optimizer::kSgd;
  std::size_t batch_size = 64;
  double base_lr = 0.1;
  double lambda_w = 1e-5;
  double lambda_s = 5e-8;
  double lambda_lda = 3e-6;
  int epochs = 32;
  double grad_clip_norm = 1.0;
  // lr is multiplied by lr_decay_factor from this epoch on (0-based); a
  // negative value disables the decay.
  int lr_decay_epoch = 24;
  double lr_decay_factor = 0.1;
  // Prune filters with |gamma| < prune_threshold after every
  // prune_interval epochs; 0 disables pruning during training.
  int prune_interval = 0;
  double prune_threshold = 1e-3;
  std::uint64_t seed = 1;
  // Used only with Optimizer::kAdam.
  double adam_beta1 = 0.9;
  double adam_beta2 = 0.999;
  double adam_epsilon = 1e-8;

  static TrainConfig paper();
  static TrainConfig desk();

  double lr_at(int epoch) const;
  void validate() const;
};

// One training pair: the decoded patch, its original, and the QP it was
// coded at. Planes are normalized to [0, 1].
struct TrainingSample {
  std::size_t height = 0;
  std::size_t width = 0;
  std::vector<double> recon;
  std::vector<double> target;
  int qp = 0;
};

struct LossBreakdown {
  double mse = 0.0;
  double reg_w = 0.0;
  double reg_s = 0.0;
  double reg_lda = 0.0;
  double total = 0.0;
};

struct LayerGrads {
  Tensor d_weights;
  std::vector<double> d_bias;
  std::vector<double> d_scale;  // empty when the layer has no BN
  std::vector<double> d_shift;
};

struct ModelGradients {
  std::vector<LayerGrads> layers;

  static ModelGradients zeros_like(const NetworkModel& model);
  double l2_norm() const;
};

struct LossResult {
  LossBreakdown loss;
  ModelGradients grads;
  // Batch statistics per layer (train-mode BN), used to update running stats.
  std::vector<std::optional<BatchStats>> bn_stats;
};

struct LdaTerm {
  double value = 0.0;
  Tensor gradient;
};

// Sum over unordered filter pairs (i, j) of |w_i/|w_i| - w_j/|w_j||_1, with
// each filter flattened to a vector. Norms are floored at 1e-12.
LdaTerm lda_regularizer(const Tensor& layer_weights);

// Batch loss: (1/2M) sum |y - f(x)|^2 + lw sum|W|^2 + ls sum gamma^2 +
// llda * sum of lda_regularizer over every layer except the last. BN runs
// in train mode. Gradients are exact for `total`.
LossResult loss_eq1(const NetworkModel& model, std::span<const TrainingSample* const> batch,
                    const TrainConfig& config);

// Global-norm clipping then a plain gradient step. Returns the factor the
// gradients were scaled by (1 when no clipping happened).
// Both steps clip the global gradient norm to grad_clip_norm first and
// return the applied clip scale (1 when no clipping happened).
double sgd_step(NetworkModel& model, const ModelGradients& grads, double lr, double grad_clip_norm);

// Moment estimates in the model's parameter order. Reset when the model's
// parameter count changes (e.g. after pruning).
struct AdamState {
  std::vector<double> m;
  std::vector<double> v;
  std::size_t t = 0;
};

double adam_step(NetworkModel& model, const ModelGradients& grads, AdamState& state, double lr,
                 const TrainConfig& config);

struct StepRecord {
  int epoch = 0;
  std::size_t step = 0;  // global step index
  double lr = 0.0;
  LossBreakdown loss;
};

struct TrainCallbacks {
  std::function<void(const StepRecord&)> on_step;
  std::function<void(int epoch, const LossBreakdown& mean)> on_epoch;
};

struct TrainResult {
  NetworkModel model;
  std::vector<LossBreakdown> epoch_history;  // mean over the epoch's steps
  std::size_t steps = 0;
};

TrainResult train(NetworkModel model, std::span<const TrainingSample> dataset,
                  const TrainConfig& config, const TrainCallbacks& callbacks = {});

// Trains the float shadow parameters while every forward/backward pass sees
// weights and biases rounded to their DFP grid (straight-through estimator).
// The model must be BN-free (folded).
TrainResult quant_aware_finetune(NetworkModel model, std::span<const TrainingSample> dataset,
                                 const FLTable& fl_table, const TrainConfig& config,
                                 const TrainCallbacks& callbacks = {});

// Copy of `model` with conv weights/biases snapped to the grids in `fl_table`.
NetworkModel snap_to_dfp_grid(const NetworkModel& model, const FLTable& fl_table);

// Mean over samples of (1/2) |y - f(x)|^2 using inference-mode forward.
double evaluate_mse(const NetworkModel& model, std::span<const TrainingSample> dataset);

// Plain-text log line: tab separated, fields in kTrainLogHeader order.
inline constexpr const char* kTrainLogHeader = "epoch\tstep\tmse\treg_w\treg_s\treg_lda\ttotal\tlr";
std::string format_log_record(const StepRecord& record);

std::string to_string(Optimizer optimizer);
Optimizer parse_optimizer(const std::string& name);

}  // namespace loopfilter
