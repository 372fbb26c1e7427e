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

#include "loopfilter/image.hpp"
#include "loopfilter/trainer.hpp"

namespace loopfilter {

inline constexpr std::size_t kBlockSize = 8;
inline constexpr double kPsnrCap = 99.0;

struct EncodeResult {
  Plane recon;
  double bits = 0.0;
};

// 2^((qp - 4) / 6)
double qstep_for_qp(int qp);

// 8x8 orthonormal DCT-II, uniform scalar quantization at qstep_for_qp(qp),
// inverse DCT, round and clamp. Dimensions that are not multiples of 8 are
// edge-padded and the result cropped. `bits` is the zeroth-order entropy of
// the quantized levels times the number of coefficients.
EncodeResult encode_intra_plane(const Plane& plane, int qp);

// Forward/inverse 8x8 orthonormal DCT-II on a row-major block.
void dct8x8(std::span<const double, 64> in, std::span<double, 64> out);
void idct8x8(std::span<const double, 64> in, std::span<double, 64> out);

// 10 log10(max^2 / MSE); identical planes give kPsnrCap.
double psnr(const Plane& a, const Plane& b);

struct RDPoint {
  double bitrate = 0.0;  // bits per pixel
  double psnr = 0.0;
};

using RDCurve = std::vector<RDPoint>;

// Bjontegaard delta rate in percent: cubic fit of log10(rate) against PSNR,
// averaged over the overlapping PSNR interval. Negative means the test curve
// needs fewer bits for the same quality.
double bd_rate(const RDCurve& anchor, const RDCurve& test);

struct Patch {
  Plane decoded;
  Plane original;
  int qp = 0;
  std::uint32_t image_id = 0;
  std::uint32_t x = 0;
  std::uint32_t y = 0;
};

struct PatchSet {
  std::size_t patch_size = 0;
  std::vector<Patch> patches;
  std::vector<std::string> warnings;
};

// Encodes every image at every qp, tiles decoded/original into aligned
// non-overlapping patch_size squares and shuffles with the seed. Images
// smaller than a patch are skipped with a warning.
PatchSet make_dataset(std::span<const Plane> images, std::span<const int> qps,
                      std::size_t patch_size, std::uint64_t rng_seed);

std::vector<TrainingSample> to_training_samples(const PatchSet& set);

// Procedural stand-in for natural content: smooth illumination, occluding
// shapes with sharp edges, multi-octave texture and mild sensor noise.
Plane synthetic_image(std::size_t width, std::size_t height, std::uint64_t seed);

}  // namespace loopfilter
