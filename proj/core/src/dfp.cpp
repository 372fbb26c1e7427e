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

#include "loopfilter/dfp.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <string>

#include "loopfilter/error.hpp"
#include "loopfilter/parallel.hpp"

namespace loopfilter {
namespace {

std::int64_t clamp_to(std::int64_t m, DFPFormat f) {
  return std::clamp(m, f.min_mantissa(), f.max_mantissa());
}

// Round-half-away-from-zero right shift; shift >= 0.
std::int64_t round_shift(std::int64_t acc, int shift) {
  if (shift == 0) return acc;
  const std::int64_t half = std::int64_t{1} << (shift - 1);
  return acc >= 0 ? (acc + half) >> shift : -((-acc + half) >> shift);
}

std::string layer_name(std::size_t i) { return "layer " + std::to_string(i + 1); }

double max_abs(std::span<const double> values) {
  double m = 0.0;
  for (double v : values) m = std::max(m, std::abs(v));
  return m;
}

// Bias mantissa expressed at the accumulator fractional length.
std::int64_t align_bias(std::int32_t bias, int fl_b, int acc_fl, std::size_t layer) {
  if (fl_b > acc_fl) return round_shift(bias, fl_b - acc_fl);
  const int shift = acc_fl - fl_b;
  if (shift >= 62 - 31) {
    fail(ErrorCode::kInvalidArgument,
         layer_name(layer) + ": bias alignment shift " + std::to_string(shift) + " overflows");
  }
  return static_cast<std::int64_t>(bias) * (std::int64_t{1} << shift);
}

}  // namespace

std::int64_t quantize_value(double v, DFPFormat format) {
  if (std::isnan(v)) fail(ErrorCode::kNonFinite, "quantize_value: NaN input");
  const double scaled = std::round(std::ldexp(v, format.fl));
  if (scaled >= static_cast<double>(format.max_mantissa())) return format.max_mantissa();
  if (scaled <= static_cast<double>(format.min_mantissa())) return format.min_mantissa();
  return static_cast<std::int64_t>(scaled);
}

double dequantize_value(std::int64_t mantissa, DFPFormat format) {
  return std::ldexp(static_cast<double>(mantissa), -format.fl);
}

double snap_to_grid(double v, DFPFormat format) {
  return dequantize_value(quantize_value(v, format), format);
}

int estimate_fl(std::span<const double> values, int bit_width) {
  const double peak = max_abs(values);
  if (peak == 0.0) return bit_width - 1;
  if (!std::isfinite(peak)) fail(ErrorCode::kNonFinite, "estimate_fl: non-finite value");
  int fl = bit_width - 1 - static_cast<int>(std::ceil(std::log2(peak)));
  const double limit = std::ldexp(1.0, bit_width - 1) - 1.0;
  while (std::round(std::ldexp(peak, fl)) > limit) --fl;
  return fl;
}

std::int64_t requantize(std::int64_t acc, int from_fl, DFPFormat to) {
  if (from_fl < to.fl) {
    fail(ErrorCode::kInvalidArgument, "requantize: source fl " + std::to_string(from_fl) +
                                          " is below target fl " + std::to_string(to.fl));
  }
  return clamp_to(round_shift(acc, from_fl - to.fl), to);
}

FLTable FLTable::reference() {
  FLTable t;
  const int fl_w[] = {9, 8, 8, 8, 8, 8, 8, 10};
  const int fl_b[] = {17, 15, 14, 16, 15, 13, 13, 16};
  const int fl_o[] = {15, 14, 14, 15, 15, 15, 16, 18};
  for (int i = 0; i < 8; ++i) t.layers.push_back({fl_w[i], fl_b[i], fl_o[i]});
  t.fl_concat = 15;
  t.fl_sum = 15;
  return t;
}

void FLTable::validate(std::size_t layer_count) const {
  if (layers.size() != layer_count) {
    fail(ErrorCode::kInvalidArgument, "fl table has " + std::to_string(layers.size()) +
                                          " entries for " + std::to_string(layer_count) +
                                          " layers");
  }
  for (std::size_t i = 0; i < layers.size(); ++i) {
    const int acc_fl = layers[i].fl_w + input_fl(i);
    if (layers[i].fl_o > acc_fl) {
      fail(ErrorCode::kInvalidArgument,
           layer_name(i) + ": fl_o " + std::to_string(layers[i].fl_o) +
               " exceeds accumulator fl " + std::to_string(acc_fl));
    }
  }
  if (!layers.empty() && layers.back().fl_o < fl_sum) {
    fail(ErrorCode::kInvalidArgument, "fl table: last layer fl_o " +
                                          std::to_string(layers.back().fl_o) +
                                          " is below the summation fl " + std::to_string(fl_sum));
  }
}

FLTable build_fl_table(const NetworkModel& folded, std::span<const CalibrationItem> calibration) {
  folded.validate();
  if (folded.has_batchnorm()) {
    fail(ErrorCode::kInvalidArgument, "build_fl_table: fold batchnorm into the convolutions first");
  }
  if (calibration.empty()) fail(ErrorCode::kInvalidArgument, "build_fl_table: empty calibration set");

  std::vector<double> peak(folded.layers.size(), 0.0);
  for (const CalibrationItem& item : calibration) {
    const NormalizedInputs in = normalize_inputs(item.plane, item.qp, folded.config);
    Tensor x = folded.config.use_qp_map ? concat_channels(in.recon, in.qpmap) : in.recon;
    for (std::size_t i = 0; i < folded.layers.size(); ++i) {
      x = conv2d(x, folded.layers[i].conv);
      peak[i] = std::max(peak[i], max_abs(x.values()));
      if (folded.layers[i].relu) x = relu(x);
    }
  }

  FLTable table;
  for (std::size_t i = 0; i < folded.layers.size(); ++i) {
    const ConvParams& conv = folded.layers[i].conv;
    LayerFL fl;
    fl.fl_w = estimate_fl(conv.weights.values(), kWeightBits);
    const int acc_fl = fl.fl_w + table.input_fl(i);
    fl.fl_b = std::min(estimate_fl(conv.bias, kBiasBits), acc_fl);
    const double p = peak[i];
    fl.fl_o = std::min(estimate_fl(std::span(&p, 1), kOutputBits), acc_fl);
    if (i + 1 == folded.layers.size()) fl.fl_o = std::max(fl.fl_o, std::min(table.fl_sum, acc_fl));
    table.layers.push_back(fl);
  }
  table.validate(folded.layers.size());
  return table;
}

FLTable DfpModel::fl_table() const {
  FLTable t;
  t.fl_concat = fl_concat;
  t.fl_sum = fl_sum;
  for (const DfpLayer& l : layers) t.layers.push_back(l.fl);
  return t;
}

void DfpModel::validate() const {
  config.validate();
  if (layers.empty()) fail(ErrorCode::kInvalidArgument, "dfp model: no layers");
  std::size_t channels = static_cast<std::size_t>(config.input_channels());
  for (std::size_t i = 0; i < layers.size(); ++i) {
    const DfpLayer& l = layers[i];
    if (l.in_channels != channels) {
      fail(ErrorCode::kShapeMismatch, layer_name(i) + ": input channel mismatch");
    }
    if (l.kernel % 2 == 0 || l.weights.size() != l.out_channels * l.in_channels * l.kernel * l.kernel ||
        l.biases.size() != l.out_channels) {
      fail(ErrorCode::kShapeMismatch, layer_name(i) + ": parameter sizes inconsistent");
    }
    channels = l.out_channels;
  }
  if (channels != 1) fail(ErrorCode::kShapeMismatch, "dfp model: last layer must output one channel");
  fl_table().validate(layers.size());
}

DfpModel quantize_model(const NetworkModel& folded, const FLTable& fl_table) {
  folded.validate();
  if (folded.has_batchnorm()) {
    fail(ErrorCode::kInvalidArgument, "quantize_model: fold batchnorm into the convolutions first");
  }
  fl_table.validate(folded.layers.size());
  DfpModel out;
  out.config = folded.config;
  out.provenance = folded.provenance;
  out.fl_concat = fl_table.fl_concat;
  out.fl_sum = fl_table.fl_sum;
  for (std::size_t i = 0; i < folded.layers.size(); ++i) {
    const Layer& src = folded.layers[i];
    DfpLayer dst;
    dst.in_channels = src.conv.in_channels();
    dst.out_channels = src.conv.out_channels();
    dst.kernel = src.conv.kernel();
    dst.fl = fl_table.layers[i];
    dst.relu = src.relu;
    const DFPFormat wf{kWeightBits, dst.fl.fl_w};
    const DFPFormat bf{kBiasBits, dst.fl.fl_b};
    dst.weights.reserve(src.conv.weights.size());
    for (double w : src.conv.weights.values()) {
      dst.weights.push_back(static_cast<std::int8_t>(quantize_value(w, wf)));
    }
    for (double b : src.conv.bias) dst.biases.push_back(static_cast<std::int32_t>(quantize_value(b, bf)));
    out.layers.push_back(std::move(dst));
  }
  return out;
}

NetworkModel dequantize_model(const DfpModel& model) {
  NetworkModel out;
  out.config = model.config;
  out.provenance = model.provenance;
  for (const DfpLayer& l : model.layers) {
    Layer layer;
    layer.relu = l.relu;
    layer.conv.weights = Tensor({l.out_channels, l.in_channels, l.kernel, l.kernel});
    const DFPFormat wf{kWeightBits, l.fl.fl_w};
    const DFPFormat bf{kBiasBits, l.fl.fl_b};
    for (std::size_t i = 0; i < l.weights.size(); ++i) {
      layer.conv.weights[i] = dequantize_value(l.weights[i], wf);
    }
    for (std::int32_t b : l.biases) layer.conv.bias.push_back(dequantize_value(b, bf));
    out.layers.push_back(std::move(layer));
  }
  return out;
}

// round(v * 2^15 / max) for v >= 0, saturated to 16 bits: 1.0 itself is not
// representable at fl 15, so the peak value maps to 32767.
std::int32_t input_mantissa(int sample, int bit_depth) {
  const std::int64_t max_value = (std::int64_t{1} << bit_depth) - 1;
  const std::int64_t m = ((std::int64_t{sample} << (kInputFl + 1)) + max_value) / (2 * max_value);
  return static_cast<std::int32_t>(std::min<std::int64_t>(m, DFPFormat{kOutputBits, kInputFl}.max_mantissa()));
}

std::int32_t qp_mantissa(int qp, int qp_max) {
  const std::int64_t m = ((std::int64_t{qp} << (kInputFl + 1)) + qp_max) / (2 * std::int64_t{qp_max});
  return static_cast<std::int32_t>(std::min<std::int64_t>(m, DFPFormat{kOutputBits, kInputFl}.max_mantissa()));
}

int output_sample(std::int64_t mantissa, int bit_depth) {
  const std::int64_t max_value = (std::int64_t{1} << bit_depth) - 1;
  const std::int64_t v = (mantissa * max_value + (std::int64_t{1} << (kInputFl - 1))) >> kInputFl;
  return static_cast<int>(std::clamp<std::int64_t>(v, 0, max_value));
}

namespace {

struct Activation {
  std::size_t channels = 0;
  std::size_t height = 0;
  std::size_t width = 0;
  std::vector<std::int16_t> data;  // 16-bit mantissas, (C, H, W)
};

std::size_t clamp_index(std::ptrdiff_t i, std::size_t extent) {
  return static_cast<std::size_t>(std::clamp<std::ptrdiff_t>(i, 0, static_cast<std::ptrdiff_t>(extent) - 1));
}

// Computes rows [row_begin, row_end) of one layer for all output channels.
// Accumulation order per output sample: input channel, kernel row, kernel
// column.
template <typename Acc>
void dfp_layer_rows(const DfpLayer& layer, int in_fl, const Activation& in, Activation& out,
                    std::size_t row_begin, std::size_t row_end, bool check_overflow) {
  const std::size_t h = in.height, w = in.width, k = layer.kernel;
  const auto pad = static_cast<std::ptrdiff_t>(k / 2);
  const int acc_fl = layer.fl.fl_w + in_fl;
  const DFPFormat out_format{kOutputBits, layer.fl.fl_o};
  const std::size_t rows = row_end - row_begin;
  std::vector<Acc> acc(rows * w);

  for (std::size_t co = 0; co < layer.out_channels; ++co) {
    const std::int64_t bias = align_bias(layer.biases[co], layer.fl.fl_b, acc_fl, 0);
    if constexpr (std::is_integral_v<Acc>) {
      std::fill(acc.begin(), acc.end(), bias);
    } else {
      std::fill(acc.begin(), acc.end(), std::ldexp(static_cast<double>(bias), -acc_fl));
    }
    for (std::size_t ci = 0; ci < layer.in_channels; ++ci) {
      const std::int16_t* src = in.data.data() + ci * h * w;
      const std::int8_t* kern = layer.weights.data() + (co * layer.in_channels + ci) * k * k;
      for (std::size_t kh = 0; kh < k; ++kh) {
        for (std::size_t kw = 0; kw < k; ++kw) {
          const std::int64_t wm = kern[kh * k + kw];
          if (wm == 0) continue;
          const std::ptrdiff_t dy = static_cast<std::ptrdiff_t>(kh) - pad;
          const std::ptrdiff_t dx = static_cast<std::ptrdiff_t>(kw) - pad;
          for (std::size_t y = row_begin; y < row_end; ++y) {
            const std::int16_t* row = src + clamp_index(static_cast<std::ptrdiff_t>(y) + dy, h) * w;
            Acc* arow = acc.data() + (y - row_begin) * w;
            for (std::size_t x = 0; x < w; ++x) {
              const std::int64_t im = row[clamp_index(static_cast<std::ptrdiff_t>(x) + dx, w)];
              if constexpr (std::is_integral_v<Acc>) {
                if (check_overflow) {
                  std::int64_t prod, sum;
                  if (__builtin_mul_overflow(wm, im, &prod) || __builtin_add_overflow(arow[x], prod, &sum)) {
                    fail(ErrorCode::kInvalidArgument, "dfp_forward: accumulator overflow");
                  }
                  arow[x] = sum;
                } else {
                  arow[x] += wm * im;
                }
              } else {
                arow[x] += std::ldexp(static_cast<double>(wm), -layer.fl.fl_w) *
                           std::ldexp(static_cast<double>(im), -in_fl);
              }
            }
          }
        }
      }
    }
    std::int16_t* dst = out.data.data() + co * h * w;
    for (std::size_t r = 0; r < rows; ++r) {
      for (std::size_t x = 0; x < w; ++x) {
        std::int64_t m;
        if constexpr (std::is_integral_v<Acc>) {
          m = requantize(acc[r * w + x], acc_fl, out_format);
        } else {
          m = quantize_value(acc[r * w + x], out_format);
        }
        if (layer.relu && m < 0) m = 0;
        dst[(row_begin + r) * w + x] = static_cast<std::int16_t>(m);
      }
    }
  }
}

}  // namespace

Plane dfp_forward(const DfpModel& model, const Plane& plane, int qp, const DfpOptions& options) {
  model.validate();
  const NetworkConfig& cfg = model.config;
  const int max_value = (1 << cfg.bit_depth) - 1;
  if (qp < 0 || qp > cfg.qp_max) {
    fail(ErrorCode::kInvalidArgument, "dfp_forward: qp " + std::to_string(qp) + " out of range");
  }
  if (plane.samples.size() != plane.width * plane.height) {
    fail(ErrorCode::kShapeMismatch, "dfp_forward: sample count does not match dimensions");
  }
  const std::size_t k = model.layers.front().kernel;
  if (plane.width < k || plane.height < k) {
    fail(ErrorCode::kShapeMismatch, "dfp_forward: plane smaller than the kernel");
  }
  const std::size_t h = plane.height, w = plane.width, n = h * w;

  Activation recon{1, h, w, std::vector<std::int16_t>(n)};
  for (std::size_t i = 0; i < n; ++i) {
    if (plane.samples[i] > max_value) {
      fail(ErrorCode::kInvalidArgument, "dfp_forward: sample exceeds bit depth");
    }
    recon.data[i] = static_cast<std::int16_t>(input_mantissa(plane.samples[i], cfg.bit_depth));
  }
  Activation x = recon;
  if (cfg.use_qp_map) {
    x.channels = 2;
    x.data.resize(2 * n, static_cast<std::int16_t>(qp_mantissa(qp, cfg.qp_max)));
  }

  int in_fl = model.fl_concat;
  for (const DfpLayer& layer : model.layers) {
    Activation y{layer.out_channels, h, w, std::vector<std::int16_t>(layer.out_channels * n)};
    parallel_for(h, options.threads, [&](std::size_t begin, std::size_t end) {
      if (options.arithmetic == DfpArithmetic::kInteger) {
        dfp_layer_rows<std::int64_t>(layer, in_fl, x, y, begin, end, options.check_overflow);
      } else {
        dfp_layer_rows<double>(layer, in_fl, x, y, begin, end, false);
      }
    });
    in_fl = layer.fl.fl_o;
    x = std::move(y);
  }

  const DFPFormat sum_format{kOutputBits, model.fl_sum};
  Plane out(w, h, cfg.bit_depth);
  for (std::size_t i = 0; i < n; ++i) {
    const std::int64_t residual = requantize(x.data[i], in_fl, sum_format);
    const std::int64_t recon_m = requantize(recon.data[i], model.fl_concat, sum_format);
    const std::int64_t sum = std::clamp(residual + recon_m, sum_format.min_mantissa(), sum_format.max_mantissa());
    out.samples[i] = static_cast<std::uint16_t>(output_sample(sum, cfg.bit_depth));
  }
  return out;
}

void hash_plane(Sha256& hasher, const Plane& plane) {
  auto put_u32 = [&](std::uint32_t v) {
    const std::uint8_t b[4] = {static_cast<std::uint8_t>(v), static_cast<std::uint8_t>(v >> 8),
                               static_cast<std::uint8_t>(v >> 16), static_cast<std::uint8_t>(v >> 24)};
    hasher.update(std::span(b));
  };
  put_u32(static_cast<std::uint32_t>(plane.width));
  put_u32(static_cast<std::uint32_t>(plane.height));
  put_u32(static_cast<std::uint32_t>(plane.bit_depth));
  std::vector<std::uint8_t> bytes;
  bytes.reserve(plane.samples.size() * 2);
  for (std::uint16_t s : plane.samples) {
    bytes.push_back(static_cast<std::uint8_t>(s));
    bytes.push_back(static_cast<std::uint8_t>(s >> 8));
  }
  hasher.update(bytes);
}

Digest hash_planes(std::span<const Plane> planes) {
  Sha256 hasher;
  for (const Plane& p : planes) hash_plane(hasher, p);
  return hasher.finish();
}

Digest verify_determinism(const DfpModel& model, std::span<const CorpusItem> corpus,
                          const DfpOptions& options) {
  Sha256 hasher;
  for (const CorpusItem& item : corpus) hash_plane(hasher, dfp_forward(model, item.plane, item.qp, options));
  return hasher.finish();
}

ConformanceSuite make_conformance_suite(const DfpModel& model, const Digest& model_digest,
                                        std::span<const CorpusItem> corpus) {
  ConformanceSuite suite;
  suite.model_digest = model_digest;
  Sha256 corpus_hasher;
  for (const CorpusItem& item : corpus) {
    ConformanceVector v;
    v.input = item.plane;
    v.qp = item.qp;
    v.expected = dfp_forward(model, item.plane, item.qp);
    const Plane one[] = {v.expected};
    v.expected_hash = hash_planes(one);
    hash_plane(corpus_hasher, v.expected);
    suite.vectors.push_back(std::move(v));
  }
  suite.corpus_hash = corpus_hasher.finish();
  return suite;
}

Digest check_conformance(const DfpModel& model, const ConformanceSuite& suite,
                         const DfpOptions& options) {
  Sha256 corpus_hasher;
  for (std::size_t i = 0; i < suite.vectors.size(); ++i) {
    const ConformanceVector& v = suite.vectors[i];
    const Plane got = dfp_forward(model, v.input, v.qp, options);
    const Plane one[] = {got};
    if (hash_planes(one) != v.expected_hash || got != v.expected) {
      std::string where = "plane " + std::to_string(i);
      if (got.width != v.expected.width || got.height != v.expected.height) {
        where += " (dimension mismatch)";
      } else {
        for (std::size_t p = 0; p < got.samples.size(); ++p) {
          if (got.samples[p] != v.expected.samples[p]) {
            where += ", pixel (" + std::to_string(p % got.width) + ", " + std::to_string(p / got.width) +
                     "): got " + std::to_string(got.samples[p]) + ", expected " +
                     std::to_string(v.expected.samples[p]);
            break;
          }
        }
      }
      fail(ErrorCode::kVerification, "conformance mismatch at " + where);
    }
    hash_plane(corpus_hasher, got);
  }
  const Digest corpus = corpus_hasher.finish();
  if (corpus != suite.corpus_hash) {
    fail(ErrorCode::kVerification, "conformance mismatch: corpus hash " + to_hex(corpus) +
                                       " != stored " + to_hex(suite.corpus_hash));
  }
  return corpus;
}

}  // namespace loopfilter
