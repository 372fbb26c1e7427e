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
#include <optional>
#include <span>
#include <string>
#include <vector>

namespace loopfilter {

using Shape = std::vector<std::size_t>;

std::string shape_to_string(const Shape& shape);

// Dense row-major array of doubles. Activations are laid out N,C,H,W and
// convolution kernels Cout,Cin,Kh,Kw.
class Tensor {
 public:
  Tensor() = default;
  explicit Tensor(Shape shape, double fill = 0.0);
  Tensor(Shape shape, std::vector<double> values);

  const Shape& shape() const noexcept { return shape_; }
  std::size_t rank() const noexcept { return shape_.size(); }
  std::size_t dim(std::size_t axis) const;
  std::size_t size() const noexcept { return data_.size(); }

  double* data() noexcept { return data_.data(); }
  const double* data() const noexcept { return data_.data(); }
  std::span<double> values() noexcept { return data_; }
  std::span<const double> values() const noexcept { return data_; }

  double& operator[](std::size_t i) noexcept { return data_[i]; }
  double operator[](std::size_t i) const noexcept { return data_[i]; }

  // 4-D accessors; no bounds checks beyond debug asserts.
  double& at(std::size_t n, std::size_t c, std::size_t h, std::size_t w) noexcept;
  double at(std::size_t n, std::size_t c, std::size_t h, std::size_t w) const noexcept;

  void fill(double value) noexcept;
  bool all_finite() const noexcept;

  friend bool operator==(const Tensor&, const Tensor&) = default;

 private:
  Shape shape_;
  std::vector<double> data_;
};

struct ConvParams {
  Tensor weights;             // (Cout, Cin, k, k), k odd
  std::vector<double> bias;   // Cout

  std::size_t out_channels() const { return weights.dim(0); }
  std::size_t in_channels() const { return weights.dim(1); }
  std::size_t kernel() const { return weights.dim(2); }

  // Throws on even or non-square kernels and bias length mismatch.
  void validate() const;

  friend bool operator==(const ConvParams&, const ConvParams&) = default;
};

struct BNParams {
  std::vector<double> scale;  // gamma
  std::vector<double> shift;  // beta
  std::vector<double> running_mean;
  std::vector<double> running_var;
  double epsilon = 1e-5;
  double momentum = 0.9;

  static BNParams identity(std::size_t channels);
  std::size_t channels() const noexcept { return scale.size(); }
  void validate() const;

  friend bool operator==(const BNParams&, const BNParams&) = default;
};

enum class BNMode { kTrain, kInfer };

struct BatchStats {
  std::vector<double> mean;
  std::vector<double> variance;  // biased (divides by count)
  std::vector<double> inv_std;   // 1 / sqrt(variance + epsilon)
  Tensor normalized;             // x-hat, same shape as the input
  std::size_t count = 0;         // elements per channel (N*H*W)
};

struct BatchNormResult {
  Tensor output;
  std::optional<BatchStats> stats;  // present in train mode only
};

struct ConvGrads {
  Tensor d_input;
  Tensor d_weights;
  std::vector<double> d_bias;
};

struct BatchNormGrads {
  Tensor d_input;
  std::vector<double> d_scale;
  std::vector<double> d_shift;
};

// Same-size cross-correlation, stride 1. Borders are padded by replicating
// the nearest edge sample.
Tensor conv2d(const Tensor& input, const ConvParams& params);
ConvGrads conv2d_grad(const Tensor& input, const ConvParams& params, const Tensor& upstream);

BatchNormResult batchnorm(const Tensor& input, const BNParams& params, BNMode mode);
BatchNormGrads batchnorm_grad(const Tensor& upstream, const BNParams& params,
                              const BatchStats& stats);
// running <- momentum * running + (1 - momentum) * batch, with the unbiased
// variance estimate.
void update_running_stats(BNParams& params, const BatchStats& stats);

Tensor relu(const Tensor& input);
// Gradient of relu evaluated at `input`.
Tensor relu_grad(const Tensor& input, const Tensor& upstream);

Tensor concat_channels(const Tensor& a, const Tensor& b);
// Inverse of concat_channels for gradients: splits off the first `channels`.
std::pair<Tensor, Tensor> split_channels(const Tensor& t, std::size_t channels);
Tensor add_elementwise(const Tensor& a, const Tensor& b);

}  // namespace loopfilter
