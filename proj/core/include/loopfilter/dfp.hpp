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
#include <span>
#include <string>
#include <vector>

#include "loopfilter/hash.hpp"
#include "loopfilter/image.hpp"
#include "loopfilter/network.hpp"

namespace loopfilter {

inline constexpr int kWeightBits = 8;
inline constexpr int kBiasBits = 32;
inline constexpr int kOutputBits = 16;
// Fractional length of the normalized inputs and of the concat/summation
// layers (16-bit mantissas covering [-1, 1)).
inline constexpr int kInputFl = 15;

// A dynamic fixed-point format: value = mantissa * 2^-fl with a
// two's-complement mantissa of bit_width bits.
struct DFPFormat {
  int bit_width = 16;
  int fl = 0;

  std::int64_t min_mantissa() const { return -(std::int64_t{1} << (bit_width - 1)); }
  std::int64_t max_mantissa() const { return (std::int64_t{1} << (bit_width - 1)) - 1; }

  friend bool operator==(const DFPFormat&, const DFPFormat&) = default;
};

// clamp(round_half_away(v * 2^fl)) to the mantissa range.
std::int64_t quantize_value(double v, DFPFormat format);
double dequantize_value(std::int64_t mantissa, DFPFormat format);
// dequantize(quantize(v)).
double snap_to_grid(double v, DFPFormat format);

// Largest fl for which max|v| quantizes without clipping. All-zero input gives
// bit_width - 1.
int estimate_fl(std::span<const double> values, int bit_width);

// Integer-only rescale of an accumulator at from_fl to `to`: arithmetic shift
// with round-half-away-from-zero, then clamp. Requires from_fl >= to.fl.
std::int64_t requantize(std::int64_t acc, int from_fl, DFPFormat to);

struct LayerFL {
  int fl_w = 0;
  int fl_b = 0;
  int fl_o = 0;

  friend bool operator==(const LayerFL&, const LayerFL&) = default;
};

struct FLTable {
  std::vector<LayerFL> layers;
  int fl_concat = kInputFl;
  int fl_sum = kInputFl;

  // The per-layer fractional lengths published for the 8-layer, 64-filter
  // network: fl_w = 9,8,8,8,8,8,8,10; fl_b = 17,15,14,16,15,13,13,16;
  // fl_o = 15,14,14,15,15,15,16,18.
  static FLTable reference();

  // fractional length of the input to layer i
  int input_fl(std::size_t i) const { return i == 0 ? fl_concat : layers[i - 1].fl_o; }

  // Entry count must equal layer_count, each layer's fl_o must not exceed its
  // accumulator fl (fl_w + input fl) and the last fl_o must reach fl_sum.
  void validate(std::size_t layer_count) const;

  friend bool operator==(const FLTable&, const FLTable&) = default;
};

struct CalibrationItem {
  Plane plane;
  int qp = 0;
};

// fl_w and fl_b from the parameters, fl_o from the largest pre-activation
// magnitude seen on the calibration set. fl_b is capped at the accumulator
// fl so bias alignment is an exact left shift. The model must be BN-free.
FLTable build_fl_table(const NetworkModel& folded, std::span<const CalibrationItem> calibration);

struct DfpLayer {
  std::size_t in_channels = 0;
  std::size_t out_channels = 0;
  std::size_t kernel = 0;
  std::vector<std::int8_t> weights;  // (Cout, Cin, k, k)
  std::vector<std::int32_t> biases;
  LayerFL fl;
  bool relu = false;

  friend bool operator==(const DfpLayer&, const DfpLayer&) = default;
};

struct DfpModel {
  NetworkConfig config;
  std::vector<DfpLayer> layers;
  int fl_concat = kInputFl;
  int fl_sum = kInputFl;
  Provenance provenance;

  FLTable fl_table() const;
  void validate() const;

  friend bool operator==(const DfpModel&, const DfpModel&) = default;
};

DfpModel quantize_model(const NetworkModel& folded, const FLTable& fl_table);
// Float model carrying exactly the dequantized parameters.
NetworkModel dequantize_model(const DfpModel& model);

enum class DfpArithmetic {
  kInteger,
  // Every value held in a double on its DFP grid. Produces the same mantissas
  // as kInteger.
  kFloatSimulated,
};

struct DfpOptions {
  int threads = 1;
  DfpArithmetic arithmetic = DfpArithmetic::kInteger;
  // Checked 64-bit accumulation; defaults on in debug builds.
#ifdef NDEBUG
  bool check_overflow = false;
#else
  bool check_overflow = true;
#endif
};

// Input mantissas at fl=15: round(p * 2^15 / (2^B - 1)) and
// round(qp * 2^15 / qp_max), saturated at 32767.
std::int32_t input_mantissa(int sample, int bit_depth);
std::int32_t qp_mantissa(int qp, int qp_max);
// clamp((m * (2^B - 1) + 2^14) >> 15, 0, 2^B - 1)
int output_sample(std::int64_t mantissa, int bit_depth);

Plane dfp_forward(const DfpModel& model, const Plane& plane, int qp, const DfpOptions& options = {});

// Canonical byte stream of a plane for hashing: u32 width, u32 height,
// u32 bit_depth, then samples as u16, all little-endian.
void hash_plane(Sha256& hasher, const Plane& plane);
Digest hash_planes(std::span<const Plane> planes);

struct CorpusItem {
  Plane plane;
  int qp = 0;
};

// Runs dfp_forward over the corpus in order and hashes the outputs.
Digest verify_determinism(const DfpModel& model, std::span<const CorpusItem> corpus,
                          const DfpOptions& options = {});

struct ConformanceVector {
  Plane input;
  int qp = 0;
  Plane expected;
  Digest expected_hash{};
};

struct ConformanceSuite {
  Digest model_digest{};
  std::vector<ConformanceVector> vectors;
  Digest corpus_hash{};
};

ConformanceSuite make_conformance_suite(const DfpModel& model, const Digest& model_digest,
                                        std::span<const CorpusItem> corpus);

// Replays the suite. Throws Error(kVerification) naming the first differing
// plane and pixel; returns the corpus hash on success.
Digest check_conformance(const DfpModel& model, const ConformanceSuite& suite,
                         const DfpOptions& options = {});

}  // namespace loopfilter
