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

#include "loopfilter/trainer.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <limits>
#include <numeric>
#include <string>

#include "loopfilter/compress.hpp"
#include "loopfilter/dfp.hpp"
#include "loopfilter/error.hpp"
#include "loopfilter/random.hpp"

namespace loopfilter {
namespace {

constexpr double kNormFloor = 1e-12;

struct LayerTrace {
  Tensor input;
  Tensor pre_activation;  // after conv (+BN), before ReLU
  std::optional<BatchStats> stats;
};

struct BatchTensors {
  Tensor recon;
  Tensor qpmap;
  Tensor target;
};

BatchTensors stack_batch(std::span<const TrainingSample* const> batch, const NetworkConfig& config) {
  if (batch.empty()) fail(ErrorCode::kInvalidArgument, "loss: empty batch");
  const std::size_t h = batch.front()->height, w = batch.front()->width, plane = h * w;
  const std::size_t m = batch.size();
  BatchTensors t{Tensor({m, 1, h, w}), Tensor({m, 1, h, w}), Tensor({m, 1, h, w})};
  for (std::size_t i = 0; i < m; ++i) {
    const TrainingSample& s = *batch[i];
    if (s.height != h || s.width != w || s.recon.size() != plane || s.target.size() != plane) {
      fail(ErrorCode::kShapeMismatch, "loss: batch samples differ in size");
    }
    if (s.qp < 0 || s.qp > config.qp_max) fail(ErrorCode::kInvalidArgument, "loss: sample qp out of range");
    std::copy(s.recon.begin(), s.recon.end(), t.recon.data() + i * plane);
    std::copy(s.target.begin(), s.target.end(), t.target.data() + i * plane);
    std::fill_n(t.qpmap.data() + i * plane, plane, static_cast<double>(s.qp) / config.qp_max);
  }
  return t;
}

void check_term(double v, const char* name) {
  if (!std::isfinite(v)) fail(ErrorCode::kNonFinite, std::string("loss: non-finite ") + name + " term");
}

double sum_squares(std::span<const double> v) {
  double s = 0.0;
  for (double x : v) s += x * x;
  return s;
}

}  // namespace

TrainConfig TrainConfig::paper() { return TrainConfig{}; }

TrainConfig TrainConfig::desk() {
  TrainConfig c;
  c.optimizer = Optimizer::kAdam;
  c.batch_size = 16;
  c.base_lr = 3e-3;
  c.epochs = 40;
  c.lr_decay_epoch = 32;
  return c;
}

double TrainConfig::lr_at(int epoch) const {
  return (lr_decay_epoch >= 0 && epoch >= lr_decay_epoch) ? base_lr * lr_decay_factor : base_lr;
}

void TrainConfig::validate() const {
  if (batch_size < 2) fail(ErrorCode::kInvalidArgument, "train config: batch size must be >= 2");
  if (lambda_w < 0 || lambda_s < 0 || lambda_lda < 0) {
    fail(ErrorCode::kInvalidArgument, "train config: regularizer weights must be >= 0");
  }
  if (!(base_lr >= 0.0)) fail(ErrorCode::kInvalidArgument, "train config: negative learning rate");
  if (!(grad_clip_norm > 0.0)) fail(ErrorCode::kInvalidArgument, "train config: clip norm must be positive");
  if (epochs < 0) fail(ErrorCode::kInvalidArgument, "train config: negative epoch count");
  if (!(adam_beta1 >= 0.0 && adam_beta1 < 1.0 && adam_beta2 >= 0.0 && adam_beta2 < 1.0)) {
    fail(ErrorCode::kInvalidArgument, "train config: Adam betas must lie in [0, 1)");
  }
  if (!(adam_epsilon > 0.0)) fail(ErrorCode::kInvalidArgument, "train config: Adam epsilon must be positive");
}

ModelGradients ModelGradients::zeros_like(const NetworkModel& model) {
  ModelGradients g;
  for (const Layer& l : model.layers) {
    LayerGrads lg;
    lg.d_weights = Tensor(l.conv.weights.shape());
    lg.d_bias.assign(l.conv.bias.size(), 0.0);
    if (l.bn) {
      lg.d_scale.assign(l.bn->channels(), 0.0);
      lg.d_shift.assign(l.bn->channels(), 0.0);
    }
    g.layers.push_back(std::move(lg));
  }
  return g;
}

double ModelGradients::l2_norm() const {
  double s = 0.0;
  for (const LayerGrads& l : layers) {
    s += sum_squares(l.d_weights.values()) + sum_squares(l.d_bias) + sum_squares(l.d_scale) +
         sum_squares(l.d_shift);
  }
  return std::sqrt(s);
}

LdaTerm lda_regularizer(const Tensor& layer_weights) {
  if (layer_weights.rank() < 2) {
    fail(ErrorCode::kShapeMismatch, "lda_regularizer: expected (Cout, ...) weights");
  }
  const std::size_t filters = layer_weights.dim(0);
  const std::size_t dims = layer_weights.size() / std::max<std::size_t>(filters, 1);
  LdaTerm term{0.0, Tensor(layer_weights.shape())};
  if (filters < 2) return term;
  if (!layer_weights.all_finite()) {
    // NaN breaks the ordering below; let the caller's finiteness check report it.
    term.value = std::numeric_limits<double>::quiet_NaN();
    return term;
  }

  std::vector<double> norm(filters);
  std::vector<double> unit(layer_weights.size());
  for (std::size_t f = 0; f < filters; ++f) {
    const double* w = layer_weights.data() + f * dims;
    norm[f] = std::max(std::sqrt(sum_squares(std::span(w, dims))), kNormFloor);
    for (std::size_t d = 0; d < dims; ++d) unit[f * dims + d] = w[d] / norm[f];
  }

  // Per coordinate, sorting the filters turns the pairwise |a_i - a_j| sum
  // and the per-filter sign sums into prefix counts.
  std::vector<double> signs(layer_weights.size(), 0.0);
  std::vector<std::size_t> order(filters);
  for (std::size_t d = 0; d < dims; ++d) {
    std::iota(order.begin(), order.end(), std::size_t{0});
    std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
      const double va = unit[a * dims + d], vb = unit[b * dims + d];
      return va < vb || (va == vb && a < b);
    });
    std::size_t i = 0;
    while (i < filters) {
      std::size_t j = i;
      const double v = unit[order[i] * dims + d];
      while (j < filters && unit[order[j] * dims + d] == v) ++j;
      // group [i, j) shares value v: i filters are smaller, filters - j larger
      const double less = static_cast<double>(i);
      const double greater = static_cast<double>(filters - j);
      for (std::size_t g = i; g < j; ++g) signs[order[g] * dims + d] = less - greater;
      term.value += v * (less - greater) * static_cast<double>(j - i);
      i = j;
    }
  }

  for (std::size_t f = 0; f < filters; ++f) {
    const double* u = unit.data() + f * dims;
    const double* s = signs.data() + f * dims;
    double* g = term.gradient.data() + f * dims;
    const double* w = layer_weights.data() + f * dims;
    const bool floored = std::sqrt(sum_squares(std::span(w, dims))) < kNormFloor;
    double dot = 0.0;
    if (!floored) {
      for (std::size_t d = 0; d < dims; ++d) dot += u[d] * s[d];
    }
    for (std::size_t d = 0; d < dims; ++d) g[d] = (s[d] - u[d] * dot) / norm[f];
  }
  return term;
}

LossResult loss_eq1(const NetworkModel& model, std::span<const TrainingSample* const> batch,
                    const TrainConfig& config) {
  const NetworkConfig& cfg = model.config;
  const BatchTensors bt = stack_batch(batch, cfg);
  const double m = static_cast<double>(batch.size());

  std::vector<LayerTrace> traces(model.layers.size());
  Tensor x = cfg.use_qp_map ? concat_channels(bt.recon, bt.qpmap) : bt.recon;
  for (std::size_t i = 0; i < model.layers.size(); ++i) {
    const Layer& layer = model.layers[i];
    LayerTrace& tr = traces[i];
    tr.input = std::move(x);
    Tensor z = conv2d(tr.input, layer.conv);
    if (layer.bn) {
      BatchNormResult bn = batchnorm(z, *layer.bn, BNMode::kTrain);
      z = std::move(bn.output);
      tr.stats = std::move(bn.stats);
    }
    tr.pre_activation = std::move(z);
    x = layer.relu ? relu(tr.pre_activation) : tr.pre_activation;
  }

  LossResult result;
  result.grads = ModelGradients::zeros_like(model);
  LossBreakdown& loss = result.loss;

  // d/df of (1/2M) sum |y - f|^2 is (f - y) / M.
  Tensor upstream(x.shape());
  double sq = 0.0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    const double diff = x[i] + bt.recon[i] - bt.target[i];
    sq += diff * diff;
    upstream[i] = diff / m;
  }
  loss.mse = sq / (2.0 * m);
  check_term(loss.mse, "mse");

  for (std::size_t i = model.layers.size(); i-- > 0;) {
    const Layer& layer = model.layers[i];
    LayerTrace& tr = traces[i];
    LayerGrads& lg = result.grads.layers[i];
    if (layer.relu) upstream = relu_grad(tr.pre_activation, upstream);
    if (layer.bn) {
      BatchNormGrads bg = batchnorm_grad(upstream, *layer.bn, *tr.stats);
      lg.d_scale = std::move(bg.d_scale);
      lg.d_shift = std::move(bg.d_shift);
      upstream = std::move(bg.d_input);
    }
    ConvGrads cg = conv2d_grad(tr.input, layer.conv, upstream);
    lg.d_weights = std::move(cg.d_weights);
    lg.d_bias = std::move(cg.d_bias);
    if (i > 0) upstream = std::move(cg.d_input);
  }

  for (std::size_t i = 0; i < model.layers.size(); ++i) {
    const Layer& layer = model.layers[i];
    LayerGrads& lg = result.grads.layers[i];
    loss.reg_w += sum_squares(layer.conv.weights.values());
    for (std::size_t k = 0; k < lg.d_weights.size(); ++k) {
      lg.d_weights[k] += config.lambda_w * 2.0 * layer.conv.weights[k];
    }
    if (layer.bn) {
      loss.reg_s += sum_squares(layer.bn->scale);
      for (std::size_t c = 0; c < lg.d_scale.size(); ++c) {
        lg.d_scale[c] += config.lambda_s * 2.0 * layer.bn->scale[c];
      }
    }
    if (i + 1 < model.layers.size()) {
      const LdaTerm lda = lda_regularizer(layer.conv.weights);
      loss.reg_lda += lda.value;
      for (std::size_t k = 0; k < lg.d_weights.size(); ++k) {
        lg.d_weights[k] += config.lambda_lda * lda.gradient[k];
      }
    }
  }
  check_term(loss.reg_w, "reg_w");
  check_term(loss.reg_s, "reg_s");
  check_term(loss.reg_lda, "reg_lda");
  loss.total = loss.mse + config.lambda_w * loss.reg_w + config.lambda_s * loss.reg_s +
               config.lambda_lda * loss.reg_lda;
  check_term(loss.total, "total");

  result.bn_stats.reserve(traces.size());
  for (LayerTrace& tr : traces) result.bn_stats.push_back(std::move(tr.stats));
  return result;
}

namespace {

double clip_scale(const ModelGradients& grads, double grad_clip_norm) {
  const double norm = grads.l2_norm();
  return norm > grad_clip_norm ? grad_clip_norm / norm : 1.0;
}

// Calls fn(param, grad) over every trainable value in a fixed order.
template <typename Fn>
void for_each_param(NetworkModel& model, const ModelGradients& grads, const char* who, Fn&& fn) {
  if (grads.layers.size() != model.layers.size()) {
    fail(ErrorCode::kShapeMismatch, std::string(who) + ": gradient layer count differs from model");
  }
  for (std::size_t i = 0; i < model.layers.size(); ++i) {
    Layer& layer = model.layers[i];
    const LayerGrads& g = grads.layers[i];
    if (g.d_weights.shape() != layer.conv.weights.shape() || g.d_bias.size() != layer.conv.bias.size()) {
      fail(ErrorCode::kShapeMismatch, std::string(who) + ": gradient shape mismatch at layer " + std::to_string(i + 1));
    }
    for (std::size_t k = 0; k < g.d_weights.size(); ++k) fn(layer.conv.weights[k], g.d_weights[k]);
    for (std::size_t k = 0; k < g.d_bias.size(); ++k) fn(layer.conv.bias[k], g.d_bias[k]);
    if (layer.bn) {
      if (g.d_scale.size() != layer.bn->channels() || g.d_shift.size() != layer.bn->channels()) {
        fail(ErrorCode::kShapeMismatch, std::string(who) + ": BN gradient mismatch at layer " + std::to_string(i + 1));
      }
      for (std::size_t c = 0; c < g.d_scale.size(); ++c) fn(layer.bn->scale[c], g.d_scale[c]);
      for (std::size_t c = 0; c < g.d_shift.size(); ++c) fn(layer.bn->shift[c], g.d_shift[c]);
    }
  }
}

std::size_t trainable_count(const NetworkModel& model) {
  std::size_t n = 0;
  for (const Layer& l : model.layers) {
    n += l.conv.weights.size() + l.conv.bias.size();
    if (l.bn) n += 2 * l.bn->channels();
  }
  return n;
}

}  // namespace

double sgd_step(NetworkModel& model, const ModelGradients& grads, double lr, double grad_clip_norm) {
  const double scale = clip_scale(grads, grad_clip_norm);
  const double step = lr * scale;
  for_each_param(model, grads, "sgd_step", [step](double& p, double g) { p -= step * g; });
  return scale;
}

double adam_step(NetworkModel& model, const ModelGradients& grads, AdamState& state, double lr,
                 const TrainConfig& config) {
  const std::size_t n = trainable_count(model);
  if (state.m.size() != n) state = AdamState{std::vector<double>(n, 0.0), std::vector<double>(n, 0.0), 0};
  const double scale = clip_scale(grads, config.grad_clip_norm);
  ++state.t;
  const double b1 = config.adam_beta1, b2 = config.adam_beta2;
  const double t = static_cast<double>(state.t);
  const double c1 = 1.0 - std::pow(b1, t), c2 = 1.0 - std::pow(b2, t);
  std::size_t k = 0;
  for_each_param(model, grads, "adam_step", [&](double& p, double g) {
    g *= scale;
    state.m[k] = b1 * state.m[k] + (1.0 - b1) * g;
    state.v[k] = b2 * state.v[k] + (1.0 - b2) * g * g;
    p -= lr * (state.m[k] / c1) / (std::sqrt(state.v[k] / c2) + config.adam_epsilon);
    ++k;
  });
  return scale;
}

namespace {

using BatchModelFn = NetworkModel (*)(const NetworkModel&, const FLTable*);

NetworkModel identity_view(const NetworkModel& model, const FLTable*) { return model; }

NetworkModel quantized_view(const NetworkModel& model, const FLTable* table) {
  return snap_to_dfp_grid(model, *table);
}

TrainResult run_training(NetworkModel model, std::span<const TrainingSample> dataset,
                         const TrainConfig& config, const TrainCallbacks& callbacks,
                         BatchModelFn view, const FLTable* table) {
  config.validate();
  model.validate();
  if (dataset.size() < config.batch_size) {
    fail(ErrorCode::kInvalidArgument, "train: dataset of " + std::to_string(dataset.size()) +
                                          " samples is smaller than one batch of " +
                                          std::to_string(config.batch_size));
  }
  TrainResult result;
  std::vector<std::size_t> order(dataset.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  Rng rng(config.seed);
  const std::size_t steps_per_epoch = dataset.size() / config.batch_size;
  std::vector<const TrainingSample*> batch(config.batch_size);
  AdamState adam;

  for (int epoch = 0; epoch < config.epochs; ++epoch) {
    rng.shuffle(order);
    const double lr = config.lr_at(epoch);
    LossBreakdown mean;
    for (std::size_t s = 0; s < steps_per_epoch; ++s) {
      for (std::size_t b = 0; b < config.batch_size; ++b) {
        batch[b] = &dataset[order[s * config.batch_size + b]];
      }
      const NetworkModel seen = view(model, table);
      LossResult r = loss_eq1(seen, batch, config);
      for (std::size_t i = 0; i < model.layers.size(); ++i) {
        if (model.layers[i].bn && r.bn_stats[i]) update_running_stats(*model.layers[i].bn, *r.bn_stats[i]);
      }
      if (config.optimizer == Optimizer::kAdam) {
        adam_step(model, r.grads, adam, lr, config);
      } else {
        sgd_step(model, r.grads, lr, config.grad_clip_norm);
      }
      mean.mse += r.loss.mse;
      mean.reg_w += r.loss.reg_w;
      mean.reg_s += r.loss.reg_s;
      mean.reg_lda += r.loss.reg_lda;
      mean.total += r.loss.total;
      if (callbacks.on_step) callbacks.on_step(StepRecord{epoch, result.steps, lr, r.loss});
      ++result.steps;
    }
    const double n = static_cast<double>(steps_per_epoch);
    mean.mse /= n;
    mean.reg_w /= n;
    mean.reg_s /= n;
    mean.reg_lda /= n;
    mean.total /= n;
    result.epoch_history.push_back(mean);
    if (callbacks.on_epoch) callbacks.on_epoch(epoch, mean);

    if (config.prune_interval > 0 && (epoch + 1) % config.prune_interval == 0 &&
        epoch + 1 < config.epochs && model.has_batchnorm()) {
      model = prune_by_bn_scale(model, config.prune_threshold).model;
    }
  }
  result.model = std::move(model);
  return result;
}

}  // namespace

TrainResult train(NetworkModel model, std::span<const TrainingSample> dataset,
                  const TrainConfig& config, const TrainCallbacks& callbacks) {
  return run_training(std::move(model), dataset, config, callbacks, &identity_view, nullptr);
}

NetworkModel snap_to_dfp_grid(const NetworkModel& model, const FLTable& fl_table) {
  fl_table.validate(model.layers.size());
  NetworkModel out = model;
  for (std::size_t i = 0; i < out.layers.size(); ++i) {
    Layer& layer = out.layers[i];
    const DFPFormat wf{kWeightBits, fl_table.layers[i].fl_w};
    const DFPFormat bf{kBiasBits, fl_table.layers[i].fl_b};
    for (double& w : layer.conv.weights.values()) w = snap_to_grid(w, wf);
    for (double& b : layer.conv.bias) b = snap_to_grid(b, bf);
  }
  return out;
}

TrainResult quant_aware_finetune(NetworkModel model, std::span<const TrainingSample> dataset,
                                 const FLTable& fl_table, const TrainConfig& config,
                                 const TrainCallbacks& callbacks) {
  if (model.has_batchnorm()) {
    fail(ErrorCode::kInvalidArgument, "quant_aware_finetune: fold batchnorm into the convolutions first");
  }
  fl_table.validate(model.layers.size());
  return run_training(std::move(model), dataset, config, callbacks, &quantized_view, &fl_table);
}

double evaluate_mse(const NetworkModel& model, std::span<const TrainingSample> dataset) {
  if (dataset.empty()) return 0.0;
  double total = 0.0;
  for (const TrainingSample& s : dataset) {
    const Tensor recon({1, 1, s.height, s.width}, s.recon);
    const Tensor qpmap({1, 1, s.height, s.width}, static_cast<double>(s.qp) / model.config.qp_max);
    const Tensor out = forward_float(model, recon, qpmap);
    double sq = 0.0;
    for (std::size_t i = 0; i < out.size(); ++i) sq += (out[i] - s.target[i]) * (out[i] - s.target[i]);
    total += 0.5 * sq;
  }
  return total / static_cast<double>(dataset.size());
}

std::string format_log_record(const StepRecord& r) {
  char buf[256];
  std::snprintf(buf, sizeof(buf), "%d\t%zu\t%.9g\t%.9g\t%.9g\t%.9g\t%.9g\t%.6g", r.epoch, r.step,
                r.loss.mse, r.loss.reg_w, r.loss.reg_s, r.loss.reg_lda, r.loss.total, r.lr);
  return buf;
}

std::string to_string(Optimizer optimizer) { return optimizer == Optimizer::kAdam ? "adam" : "sgd"; }

Optimizer parse_optimizer(const std::string& name) {
  if (name == "sgd") return Optimizer::kSgd;
  if (name == "adam") return Optimizer::kAdam;
  fail(ErrorCode::kInvalidArgument, "unknown optimizer '" + name + "' (expected sgd or adam)");
}

}  // namespace loopfilter
