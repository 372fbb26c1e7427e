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

#include "loopfilter/tensor.hpp"

#include <algorithm>
#include <cassert>
#include <cmath>
#include <functional>
#include <numeric>
#include <sstream>

#include "loopfilter/error.hpp"

namespace loopfilter {
namespace {

std::size_t product(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>());
}

void require_rank4(const Tensor& t, const char* what) {
  if (t.rank() != 4) {
    fail(ErrorCode::kShapeMismatch,
         std::string(what) + ": expected a rank-4 tensor, got " + shape_to_string(t.shape()));
  }
}

void require_finite(const Tensor& t, const char* what) {
  if (!t.all_finite()) fail(ErrorCode::kNonFinite, std::string(what) + ": non-finite value");
}

// Column ranges of a row that read the left edge, the interior and the right
// edge when shifted by dx under edge replication.
struct RowSplit {
  std::size_t left_end;
  std::size_t right_begin;
};

RowSplit split_row(std::size_t width, std::ptrdiff_t dx) {
  const auto w = static_cast<std::ptrdiff_t>(width);
  const std::ptrdiff_t left = std::clamp<std::ptrdiff_t>(-dx, 0, w);
  const std::ptrdiff_t right = std::clamp<std::ptrdiff_t>(w - std::max<std::ptrdiff_t>(dx, 0), left, w);
  return {static_cast<std::size_t>(left), static_cast<std::size_t>(right)};
}

std::size_t clamp_index(std::ptrdiff_t i, std::size_t extent) {
  return static_cast<std::size_t>(std::clamp<std::ptrdiff_t>(i, 0, static_cast<std::ptrdiff_t>(extent) - 1));
}

}  // namespace

std::string_view to_string(ErrorCode code) noexcept {
  switch (code) {
    case ErrorCode::kShapeMismatch: return "shape-mismatch";
    case ErrorCode::kInvalidArgument: return "invalid-argument";
    case ErrorCode::kNonFinite: return "non-finite";
    case ErrorCode::kIo: return "io";
    case ErrorCode::kFormat: return "format";
    case ErrorCode::kVersion: return "version";
    case ErrorCode::kVerification: return "verification";
  }
  return "unknown";
}

std::string shape_to_string(const Shape& shape) {
  std::ostringstream out;
  out << '(';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) out << ", ";
    out << shape[i];
  }
  out << ')';
  return out.str();
}

Tensor::Tensor(Shape shape, double fill) : shape_(std::move(shape)), data_(product(shape_), fill) {}

Tensor::Tensor(Shape shape, std::vector<double> values)
    : shape_(std::move(shape)), data_(std::move(values)) {
  if (data_.size() != product(shape_)) {
    fail(ErrorCode::kShapeMismatch, "tensor: " + std::to_string(data_.size()) +
                                        " values do not fill shape " + shape_to_string(shape_));
  }
}

std::size_t Tensor::dim(std::size_t axis) const {
  if (axis >= shape_.size()) {
    fail(ErrorCode::kShapeMismatch, "tensor: axis " + std::to_string(axis) + " out of range for " +
                                        shape_to_string(shape_));
  }
  return shape_[axis];
}

double& Tensor::at(std::size_t n, std::size_t c, std::size_t h, std::size_t w) noexcept {
  assert(shape_.size() == 4);
  return data_[((n * shape_[1] + c) * shape_[2] + h) * shape_[3] + w];
}

double Tensor::at(std::size_t n, std::size_t c, std::size_t h, std::size_t w) const noexcept {
  assert(shape_.size() == 4);
  return data_[((n * shape_[1] + c) * shape_[2] + h) * shape_[3] + w];
}

void Tensor::fill(double value) noexcept { std::fill(data_.begin(), data_.end(), value); }

bool Tensor::all_finite() const noexcept {
  return std::all_of(data_.begin(), data_.end(), [](double v) { return std::isfinite(v); });
}

void ConvParams::validate() const {
  if (weights.rank() != 4) {
    fail(ErrorCode::kShapeMismatch, "conv: weights must be (Cout, Cin, k, k), got " +
                                        shape_to_string(weights.shape()));
  }
  if (weights.dim(2) != weights.dim(3) || weights.dim(2) % 2 == 0) {
    fail(ErrorCode::kInvalidArgument,
         "conv: kernel must be square with odd size, got " + shape_to_string(weights.shape()));
  }
  if (bias.size() != weights.dim(0)) {
    fail(ErrorCode::kShapeMismatch, "conv: bias length " + std::to_string(bias.size()) +
                                        " != Cout " + std::to_string(weights.dim(0)));
  }
}

BNParams BNParams::identity(std::size_t channels) {
  BNParams p;
  p.scale.assign(channels, 1.0);
  p.shift.assign(channels, 0.0);
  p.running_mean.assign(channels, 0.0);
  p.running_var.assign(channels, 1.0);
  return p;
}

void BNParams::validate() const {
  const std::size_t c = scale.size();
  if (shift.size() != c || running_mean.size() != c || running_var.size() != c) {
    fail(ErrorCode::kShapeMismatch, "batchnorm: parameter vectors differ in length");
  }
  if (!(epsilon > 0.0)) fail(ErrorCode::kInvalidArgument, "batchnorm: epsilon must be positive");
  for (double v : running_var) {
    if (!(v >= 0.0)) fail(ErrorCode::kInvalidArgument, "batchnorm: negative running variance");
  }
}

Tensor conv2d(const Tensor& input, const ConvParams& params) {
  require_rank4(input, "conv2d");
  params.validate();
  const std::size_t n_batch = input.dim(0), cin = input.dim(1), h = input.dim(2), w = input.dim(3);
  const std::size_t cout = params.out_channels(), k = params.kernel();
  if (params.in_channels() != cin) {
    fail(ErrorCode::kShapeMismatch, "conv2d: input has " + std::to_string(cin) +
                                        " channels, kernel expects Cin=" +
                                        std::to_string(params.in_channels()));
  }
  if (h < k || w < k) {
    fail(ErrorCode::kShapeMismatch, "conv2d: spatial size " + std::to_string(h) + "x" +
                                        std::to_string(w) + " smaller than kernel " +
                                        std::to_string(k));
  }
  const auto pad = static_cast<std::ptrdiff_t>(k / 2);
  const std::size_t plane = h * w;
  Tensor out({n_batch, cout, h, w});

  for (std::size_t n = 0; n < n_batch; ++n) {
    for (std::size_t co = 0; co < cout; ++co) {
      double* dst = out.data() + (n * cout + co) * plane;
      std::fill(dst, dst + plane, params.bias[co]);
      for (std::size_t ci = 0; ci < cin; ++ci) {
        const double* src = input.data() + (n * cin + ci) * plane;
        const double* kern = params.weights.data() + (co * cin + ci) * k * k;
        for (std::size_t kh = 0; kh < k; ++kh) {
          const std::ptrdiff_t dy = static_cast<std::ptrdiff_t>(kh) - pad;
          for (std::size_t kw = 0; kw < k; ++kw) {
            const std::ptrdiff_t dx = static_cast<std::ptrdiff_t>(kw) - pad;
            const double wv = kern[kh * k + kw];
            const RowSplit split = split_row(w, dx);
            for (std::size_t y = 0; y < h; ++y) {
              const double* row = src + clamp_index(static_cast<std::ptrdiff_t>(y) + dy, h) * w;
              double* orow = dst + y * w;
              for (std::size_t x = 0; x < split.left_end; ++x) orow[x] += wv * row[0];
              const double* shifted = row + dx;
              for (std::size_t x = split.left_end; x < split.right_begin; ++x) {
                orow[x] += wv * shifted[x];
              }
              for (std::size_t x = split.right_begin; x < w; ++x) orow[x] += wv * row[w - 1];
            }
          }
        }
      }
    }
  }
  return out;
}

ConvGrads conv2d_grad(const Tensor& input, const ConvParams& params, const Tensor& upstream) {
  require_rank4(input, "conv2d_grad");
  require_rank4(upstream, "conv2d_grad");
  params.validate();
  const std::size_t n_batch = input.dim(0), cin = input.dim(1), h = input.dim(2), w = input.dim(3);
  const std::size_t cout = params.out_channels(), k = params.kernel();
  if (params.in_channels() != cin) {
    fail(ErrorCode::kShapeMismatch, "conv2d_grad: input channels " + std::to_string(cin) +
                                        " != Cin " + std::to_string(params.in_channels()));
  }
  const Shape expected{n_batch, cout, h, w};
  if (upstream.shape() != expected) {
    fail(ErrorCode::kShapeMismatch, "conv2d_grad: upstream " + shape_to_string(upstream.shape()) +
                                        " != conv output " + shape_to_string(expected));
  }
  const auto pad = static_cast<std::ptrdiff_t>(k / 2);
  const std::size_t plane = h * w;
  ConvGrads g{Tensor(input.shape()), Tensor(params.weights.shape()), std::vector<double>(cout, 0.0)};

  // Weight gradients accumulate column-wise partial sums over rows, which
  // vectorizes, and reduce each row of partials once at the end.
  std::vector<double> partial(w);
  for (std::size_t n = 0; n < n_batch; ++n) {
    for (std::size_t co = 0; co < cout; ++co) {
      const double* up = upstream.data() + (n * cout + co) * plane;
      double bias_sum = 0.0;
      for (std::size_t i = 0; i < plane; ++i) bias_sum += up[i];
      g.d_bias[co] += bias_sum;

      for (std::size_t ci = 0; ci < cin; ++ci) {
        const double* src = input.data() + (n * cin + ci) * plane;
        double* dsrc = g.d_input.data() + (n * cin + ci) * plane;
        const double* kern = params.weights.data() + (co * cin + ci) * k * k;
        double* dkern = g.d_weights.data() + (co * cin + ci) * k * k;
        for (std::size_t kh = 0; kh < k; ++kh) {
          const std::ptrdiff_t dy = static_cast<std::ptrdiff_t>(kh) - pad;
          for (std::size_t kw = 0; kw < k; ++kw) {
            const std::ptrdiff_t dx = static_cast<std::ptrdiff_t>(kw) - pad;
            const double wv = kern[kh * k + kw];
            const RowSplit split = split_row(w, dx);
            std::fill(partial.begin(), partial.end(), 0.0);
            double* acc = partial.data();
            for (std::size_t y = 0; y < h; ++y) {
              const std::size_t sy = clamp_index(static_cast<std::ptrdiff_t>(y) + dy, h);
              const double* row = src + sy * w;
              double* drow = dsrc + sy * w;
              const double* urow = up + y * w;
              for (std::size_t x = 0; x < split.left_end; ++x) {
                acc[x] += urow[x] * row[0];
                drow[0] += wv * urow[x];
              }
              const double* shifted = row + dx;
              double* dshifted = drow + dx;
              for (std::size_t x = split.left_end; x < split.right_begin; ++x) {
                acc[x] += urow[x] * shifted[x];
              }
              for (std::size_t x = split.left_end; x < split.right_begin; ++x) {
                dshifted[x] += wv * urow[x];
              }
              for (std::size_t x = split.right_begin; x < w; ++x) {
                acc[x] += urow[x] * row[w - 1];
                drow[w - 1] += wv * urow[x];
              }
            }
            double total = 0.0;
            for (std::size_t x = 0; x < w; ++x) total += acc[x];
            dkern[kh * k + kw] += total;
          }
        }
      }
    }
  }
  return g;
}

BatchNormResult batchnorm(const Tensor& input, const BNParams& params, BNMode mode) {
  require_rank4(input, "batchnorm");
  params.validate();
  const std::size_t n_batch = input.dim(0), c = input.dim(1), plane = input.dim(2) * input.dim(3);
  if (params.channels() != c) {
    fail(ErrorCode::kShapeMismatch, "batchnorm: input has " + std::to_string(c) +
                                        " channels, parameters have " +
                                        std::to_string(params.channels()));
  }
  BatchNormResult result{Tensor(input.shape()), std::nullopt};

  if (mode == BNMode::kInfer) {
    for (std::size_t ch = 0; ch < c; ++ch) {
      const double inv = 1.0 / std::sqrt(params.running_var[ch] + params.epsilon);
      const double a = params.scale[ch] * inv;
      const double b = params.shift[ch] - params.running_mean[ch] * a;
      for (std::size_t n = 0; n < n_batch; ++n) {
        const double* src = input.data() + (n * c + ch) * plane;
        double* dst = result.output.data() + (n * c + ch) * plane;
        for (std::size_t i = 0; i < plane; ++i) dst[i] = src[i] * a + b;
      }
    }
    return result;
  }

  if (n_batch < 2) fail(ErrorCode::kInvalidArgument, "batchnorm: train mode needs batch size >= 2");
  BatchStats stats;
  stats.count = n_batch * plane;
  stats.mean.assign(c, 0.0);
  stats.variance.assign(c, 0.0);
  stats.inv_std.assign(c, 0.0);
  stats.normalized = Tensor(input.shape());
  const double count = static_cast<double>(stats.count);
  for (std::size_t ch = 0; ch < c; ++ch) {
    double sum = 0.0;
    for (std::size_t n = 0; n < n_batch; ++n) {
      const double* src = input.data() + (n * c + ch) * plane;
      for (std::size_t i = 0; i < plane; ++i) sum += src[i];
    }
    const double mean = sum / count;
    double sq = 0.0;
    for (std::size_t n = 0; n < n_batch; ++n) {
      const double* src = input.data() + (n * c + ch) * plane;
      for (std::size_t i = 0; i < plane; ++i) sq += (src[i] - mean) * (src[i] - mean);
    }
    const double var = sq / count;
    const double inv = 1.0 / std::sqrt(var + params.epsilon);
    stats.mean[ch] = mean;
    stats.variance[ch] = var;
    stats.inv_std[ch] = inv;
    for (std::size_t n = 0; n < n_batch; ++n) {
      const std::size_t off = (n * c + ch) * plane;
      const double* src = input.data() + off;
      double* xhat = stats.normalized.data() + off;
      double* dst = result.output.data() + off;
      for (std::size_t i = 0; i < plane; ++i) {
        xhat[i] = (src[i] - mean) * inv;
        dst[i] = params.scale[ch] * xhat[i] + params.shift[ch];
      }
    }
  }
  result.stats = std::move(stats);
  return result;
}

BatchNormGrads batchnorm_grad(const Tensor& upstream, const BNParams& params,
                              const BatchStats& stats) {
  require_rank4(upstream, "batchnorm_grad");
  if (upstream.shape() != stats.normalized.shape()) {
    fail(ErrorCode::kShapeMismatch, "batchnorm_grad: upstream " +
                                        shape_to_string(upstream.shape()) + " != forward " +
                                        shape_to_string(stats.normalized.shape()));
  }
  const std::size_t n_batch = upstream.dim(0), c = upstream.dim(1),
                    plane = upstream.dim(2) * upstream.dim(3);
  BatchNormGrads g{Tensor(upstream.shape()), std::vector<double>(c, 0.0),
                   std::vector<double>(c, 0.0)};
  const double count = static_cast<double>(stats.count);
  for (std::size_t ch = 0; ch < c; ++ch) {
    double sum_dy = 0.0, sum_dy_xhat = 0.0;
    for (std::size_t n = 0; n < n_batch; ++n) {
      const std::size_t off = (n * c + ch) * plane;
      const double* dy = upstream.data() + off;
      const double* xhat = stats.normalized.data() + off;
      for (std::size_t i = 0; i < plane; ++i) {
        sum_dy += dy[i];
        sum_dy_xhat += dy[i] * xhat[i];
      }
    }
    g.d_shift[ch] = sum_dy;
    g.d_scale[ch] = sum_dy_xhat;
    const double coeff = params.scale[ch] * stats.inv_std[ch] / count;
    for (std::size_t n = 0; n < n_batch; ++n) {
      const std::size_t off = (n * c + ch) * plane;
      const double* dy = upstream.data() + off;
      const double* xhat = stats.normalized.data() + off;
      double* dx = g.d_input.data() + off;
      for (std::size_t i = 0; i < plane; ++i) {
        dx[i] = coeff * (count * dy[i] - sum_dy - xhat[i] * sum_dy_xhat);
      }
    }
  }
  return g;
}

void update_running_stats(BNParams& params, const BatchStats& stats) {
  const double m = params.momentum;
  const double count = static_cast<double>(stats.count);
  const double unbias = count > 1.0 ? count / (count - 1.0) : 1.0;
  for (std::size_t ch = 0; ch < params.channels(); ++ch) {
    params.running_mean[ch] = m * params.running_mean[ch] + (1.0 - m) * stats.mean[ch];
    params.running_var[ch] = m * params.running_var[ch] + (1.0 - m) * stats.variance[ch] * unbias;
  }
}

Tensor relu(const Tensor& input) {
  Tensor out(input.shape());
  for (std::size_t i = 0; i < input.size(); ++i) out[i] = input[i] > 0.0 ? input[i] : 0.0;
  return out;
}

Tensor relu_grad(const Tensor& input, const Tensor& upstream) {
  if (input.shape() != upstream.shape()) {
    fail(ErrorCode::kShapeMismatch, "relu_grad: " + shape_to_string(input.shape()) + " vs " +
                                        shape_to_string(upstream.shape()));
  }
  Tensor out(input.shape());
  for (std::size_t i = 0; i < input.size(); ++i) out[i] = input[i] > 0.0 ? upstream[i] : 0.0;
  return out;
}

Tensor concat_channels(const Tensor& a, const Tensor& b) {
  require_rank4(a, "concat_channels");
  require_rank4(b, "concat_channels");
  if (a.dim(0) != b.dim(0) || a.dim(2) != b.dim(2) || a.dim(3) != b.dim(3)) {
    fail(ErrorCode::kShapeMismatch, "concat_channels: N,H,W differ: " + shape_to_string(a.shape()) +
                                        " vs " + shape_to_string(b.shape()));
  }
  const std::size_t n_batch = a.dim(0), ca = a.dim(1), cb = b.dim(1), plane = a.dim(2) * a.dim(3);
  Tensor out({n_batch, ca + cb, a.dim(2), a.dim(3)});
  for (std::size_t n = 0; n < n_batch; ++n) {
    std::copy_n(a.data() + n * ca * plane, ca * plane, out.data() + n * (ca + cb) * plane);
    std::copy_n(b.data() + n * cb * plane, cb * plane, out.data() + (n * (ca + cb) + ca) * plane);
  }
  return out;
}

std::pair<Tensor, Tensor> split_channels(const Tensor& t, std::size_t channels) {
  require_rank4(t, "split_channels");
  const std::size_t n_batch = t.dim(0), c = t.dim(1), plane = t.dim(2) * t.dim(3);
  if (channels > c) fail(ErrorCode::kShapeMismatch, "split_channels: split point past channel count");
  Tensor a({n_batch, channels, t.dim(2), t.dim(3)});
  Tensor b({n_batch, c - channels, t.dim(2), t.dim(3)});
  for (std::size_t n = 0; n < n_batch; ++n) {
    std::copy_n(t.data() + n * c * plane, channels * plane, a.data() + n * channels * plane);
    std::copy_n(t.data() + (n * c + channels) * plane, (c - channels) * plane,
                b.data() + n * (c - channels) * plane);
  }
  return {std::move(a), std::move(b)};
}

Tensor add_elementwise(const Tensor& a, const Tensor& b) {
  if (a.shape() != b.shape()) {
    fail(ErrorCode::kShapeMismatch, "add_elementwise: " + shape_to_string(a.shape()) + " vs " +
                                        shape_to_string(b.shape()));
  }
  Tensor out(a.shape());
  for (std::size_t i = 0; i < a.size(); ++i) out[i] = a[i] + b[i];
  require_finite(out, "add_elementwise");
  return out;
}

}  // namespace loopfilter
