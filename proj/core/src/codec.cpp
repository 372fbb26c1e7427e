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

#include "loopfilter/codec.hpp"

#include <Eigen/QR>
#include <algorithm>
#include <array>
#include <cmath>
#include <map>
#include <numbers>

#include "loopfilter/error.hpp"
#include "loopfilter/random.hpp"

namespace loopfilter {
namespace {

using Basis = std::array<double, 64>;

const Basis& dct_basis() {
  static const Basis basis = [] {
    Basis b{};
    for (int k = 0; k < 8; ++k) {
      const double alpha = k == 0 ? std::sqrt(1.0 / 8.0) : std::sqrt(2.0 / 8.0);
      for (int n = 0; n < 8; ++n) {
        b[k * 8 + n] = alpha * std::cos((2 * n + 1) * k * std::numbers::pi / 16.0);
      }
    }
    return b;
  }();
  return basis;
}

// out = A * in * A^T (forward) or A^T * in * A (inverse).
void separable(std::span<const double, 64> in, std::span<double, 64> out, bool inverse) {
  const Basis& c = dct_basis();
  auto coef = [&](int i, int j) { return inverse ? c[j * 8 + i] : c[i * 8 + j]; };
  std::array<double, 64> tmp{};
  for (int r = 0; r < 8; ++r) {
    for (int col = 0; col < 8; ++col) {
      double s = 0.0;
      for (int n = 0; n < 8; ++n) s += coef(r, n) * in[n * 8 + col];
      tmp[r * 8 + col] = s;
    }
  }
  for (int r = 0; r < 8; ++r) {
    for (int col = 0; col < 8; ++col) {
      double s = 0.0;
      for (int n = 0; n < 8; ++n) s += tmp[r * 8 + n] * coef(col, n);
      out[r * 8 + col] = s;
    }
  }
}

// Least-squares cubic log10(rate) = p(psnr); returns integral of p over
// [lo, hi].
double integrate_log_rate(const RDCurve& curve, double lo, double hi) {
  const auto n = static_cast<Eigen::Index>(curve.size());
  Eigen::MatrixXd v(n, 4);
  Eigen::VectorXd y(n);
  for (Eigen::Index i = 0; i < n; ++i) {
    const double p = curve[static_cast<std::size_t>(i)].psnr;
    v(i, 0) = 1.0;
    v(i, 1) = p;
    v(i, 2) = p * p;
    v(i, 3) = p * p * p;
    y(i) = std::log10(curve[static_cast<std::size_t>(i)].bitrate);
  }
  const Eigen::VectorXd c = v.colPivHouseholderQr().solve(y);
  auto antiderivative = [&](double x) {
    return c(0) * x + c(1) * x * x / 2.0 + c(2) * x * x * x / 3.0 + c(3) * x * x * x * x / 4.0;
  };
  return antiderivative(hi) - antiderivative(lo);
}

void validate_curve(const RDCurve& curve, const char* which) {
  if (curve.size() < 4) {
    fail(ErrorCode::kInvalidArgument, std::string("bd_rate: ") + which + " curve needs at least 4 points");
  }
  for (const RDPoint& p : curve) {
    if (!(p.bitrate > 0.0) || !std::isfinite(p.psnr)) {
      fail(ErrorCode::kInvalidArgument, std::string("bd_rate: ") + which + " curve has a non-positive rate");
    }
  }
}

// Bilinearly interpolated lattice noise in [-1, 1].
class ValueNoise {
 public:
  ValueNoise(std::size_t cells_x, std::size_t cells_y, Rng& rng)
      : nx_(cells_x + 2), ny_(cells_y + 2), grid_(nx_ * ny_) {
    for (double& v : grid_) v = rng.uniform(-1.0, 1.0);
  }

  double sample(double u, double v) const {  // u, v in [0, cells]
    const auto x0 = static_cast<std::size_t>(u), y0 = static_cast<std::size_t>(v);
    const double fx = u - x0, fy = v - y0;
    const double sx = fx * fx * (3 - 2 * fx), sy = fy * fy * (3 - 2 * fy);
    auto g = [&](std::size_t x, std::size_t y) { return grid_[std::min(y, ny_ - 1) * nx_ + std::min(x, nx_ - 1)]; };
    const double top = g(x0, y0) * (1 - sx) + g(x0 + 1, y0) * sx;
    const double bot = g(x0, y0 + 1) * (1 - sx) + g(x0 + 1, y0 + 1) * sx;
    return top * (1 - sy) + bot * sy;
  }

 private:
  std::size_t nx_, ny_;
  std::vector<double> grid_;
};

}  // namespace

double qstep_for_qp(int qp) { return std::pow(2.0, (qp - 4) / 6.0); }

void dct8x8(std::span<const double, 64> in, std::span<double, 64> out) { separable(in, out, false); }

void idct8x8(std::span<const double, 64> in, std::span<double, 64> out) { separable(in, out, true); }

EncodeResult encode_intra_plane(const Plane& plane, int qp) {
  if (qp < 0 || qp > 51) fail(ErrorCode::kInvalidArgument, "encode_intra_plane: qp " + std::to_string(qp) + " outside [0, 51]");
  if (plane.width == 0 || plane.height == 0 || plane.samples.size() != plane.width * plane.height) {
    fail(ErrorCode::kShapeMismatch, "encode_intra_plane: malformed plane");
  }
  const std::size_t pw = (plane.width + kBlockSize - 1) / kBlockSize * kBlockSize;
  const std::size_t ph = (plane.height + kBlockSize - 1) / kBlockSize * kBlockSize;
  const double qstep = qstep_for_qp(qp);
  const double max_value = plane.max_value();

  EncodeResult result{Plane(plane.width, plane.height, plane.bit_depth), 0.0};
  std::map<std::int64_t, std::size_t> histogram;
  std::size_t coefficients = 0;
  std::array<double, 64> block{}, coef{}, rec{};

  for (std::size_t by = 0; by < ph; by += kBlockSize) {
    for (std::size_t bx = 0; bx < pw; bx += kBlockSize) {
      for (std::size_t r = 0; r < kBlockSize; ++r) {
        const std::size_t y = std::min(by + r, plane.height - 1);
        for (std::size_t c = 0; c < kBlockSize; ++c) {
          const std::size_t x = std::min(bx + c, plane.width - 1);
          block[r * kBlockSize + c] = plane.at(x, y);
        }
      }
      dct8x8(block, coef);
      for (double& cf : coef) {
        const auto level = static_cast<std::int64_t>(std::round(cf / qstep));
        ++histogram[level];
        cf = static_cast<double>(level) * qstep;
      }
      coefficients += coef.size();
      idct8x8(coef, rec);
      for (std::size_t r = 0; r < kBlockSize && by + r < plane.height; ++r) {
        for (std::size_t c = 0; c < kBlockSize && bx + c < plane.width; ++c) {
          const double v = std::clamp(std::round(rec[r * kBlockSize + c]), 0.0, max_value);
          result.recon.at(bx + c, by + r) = static_cast<std::uint16_t>(v);
        }
      }
    }
  }

  double entropy = 0.0;
  for (const auto& [level, count] : histogram) {
    const double p = static_cast<double>(count) / coefficients;
    entropy -= p * std::log2(p);
  }
  result.bits = entropy * static_cast<double>(coefficients);
  return result;
}

double psnr(const Plane& a, const Plane& b) {
  if (a.width != b.width || a.height != b.height || a.samples.size() != b.samples.size()) {
    fail(ErrorCode::kShapeMismatch, "psnr: dimensions differ");
  }
  if (a.samples.empty()) fail(ErrorCode::kShapeMismatch, "psnr: empty planes");
  double sq = 0.0;
  for (std::size_t i = 0; i < a.samples.size(); ++i) {
    const double d = static_cast<double>(a.samples[i]) - b.samples[i];
    sq += d * d;
  }
  if (sq == 0.0) return kPsnrCap;
  const double mse = sq / static_cast<double>(a.samples.size());
  const double peak = static_cast<double>(a.max_value());
  return std::min(kPsnrCap, 10.0 * std::log10(peak * peak / mse));
}

double bd_rate(const RDCurve& anchor, const RDCurve& test) {
  validate_curve(anchor, "anchor");
  validate_curve(test, "test");
  auto range = [](const RDCurve& c) {
    auto [lo, hi] = std::minmax_element(c.begin(), c.end(),
                                        [](const RDPoint& a, const RDPoint& b) { return a.psnr < b.psnr; });
    return std::pair{lo->psnr, hi->psnr};
  };
  const auto [a_lo, a_hi] = range(anchor);
  const auto [t_lo, t_hi] = range(test);
  const double lo = std::max(a_lo, t_lo), hi = std::min(a_hi, t_hi);
  if (!(hi > lo)) fail(ErrorCode::kInvalidArgument, "bd_rate: PSNR ranges do not overlap");
  const double avg = (integrate_log_rate(test, lo, hi) - integrate_log_rate(anchor, lo, hi)) / (hi - lo);
  return (std::pow(10.0, avg) - 1.0) * 100.0;
}

PatchSet make_dataset(std::span<const Plane> images, std::span<const int> qps, std::size_t patch_size,
                      std::uint64_t rng_seed) {
  if (patch_size == 0) fail(ErrorCode::kInvalidArgument, "make_dataset: patch size must be positive");
  PatchSet set;
  set.patch_size = patch_size;
  for (std::size_t id = 0; id < images.size(); ++id) {
    const Plane& image = images[id];
    if (image.width < patch_size || image.height < patch_size) {
      set.warnings.push_back("image " + std::to_string(id) + " (" + std::to_string(image.width) + "x" +
                             std::to_string(image.height) + ") is smaller than one patch; skipped");
      continue;
    }
    for (int qp : qps) {
      const Plane decoded = encode_intra_plane(image, qp).recon;
      for (std::size_t y = 0; y + patch_size <= image.height; y += patch_size) {
        for (std::size_t x = 0; x + patch_size <= image.width; x += patch_size) {
          set.patches.push_back(Patch{crop(decoded, x, y, patch_size, patch_size),
                                      crop(image, x, y, patch_size, patch_size), qp,
                                      static_cast<std::uint32_t>(id), static_cast<std::uint32_t>(x),
                                      static_cast<std::uint32_t>(y)});
        }
      }
    }
  }
  Rng rng(rng_seed);
  rng.shuffle(set.patches);
  return set;
}

std::vector<TrainingSample> to_training_samples(const PatchSet& set) {
  std::vector<TrainingSample> out;
  out.reserve(set.patches.size());
  for (const Patch& p : set.patches) {
    const double scale = 1.0 / p.decoded.max_value();
    TrainingSample s;
    s.height = p.decoded.height;
    s.width = p.decoded.width;
    s.qp = p.qp;
    s.recon.reserve(p.decoded.samples.size());
    s.target.reserve(p.original.samples.size());
    for (std::uint16_t v : p.decoded.samples) s.recon.push_back(v * scale);
    for (std::uint16_t v : p.original.samples) s.target.push_back(v * scale);
    out.push_back(std::move(s));
  }
  return out;
}

Plane synthetic_image(std::size_t width, std::size_t height, std::uint64_t seed) {
  Rng rng(seed);
  const double w = static_cast<double>(width), h = static_cast<double>(height);
  std::vector<double> img(width * height);

  // Illumination: a tilted plane plus one slow sinusoid.
  const double base = rng.uniform(60.0, 190.0);
  const double gx = rng.uniform(-60.0, 60.0) / w, gy = rng.uniform(-60.0, 60.0) / h;
  const double fx = rng.uniform(0.5, 2.0) * 2.0 * std::numbers::pi / w;
  const double fy = rng.uniform(0.5, 2.0) * 2.0 * std::numbers::pi / h;
  const double amp = rng.uniform(5.0, 25.0), phase = rng.uniform(0.0, 6.28);
  for (std::size_t y = 0; y < height; ++y) {
    for (std::size_t x = 0; x < width; ++x) {
      img[y * width + x] = base + gx * x + gy * y + amp * std::sin(fx * x + fy * y + phase);
    }
  }

  // Occluding shapes with hard edges, each with its own texture strength.
  const int shapes = 6 + static_cast<int>(rng.below(10));
  for (int s = 0; s < shapes; ++s) {
    const bool ellipse = rng.uniform() < 0.5;
    const double cx = rng.uniform(0.0, w), cy = rng.uniform(0.0, h);
    const double rx = rng.uniform(0.05, 0.35) * w, ry = rng.uniform(0.05, 0.35) * h;
    const double angle = rng.uniform(0.0, std::numbers::pi);
    const double ca = std::cos(angle), sa = std::sin(angle);
    const double level = rng.uniform(10.0, 245.0);
    const double shade = rng.uniform(-40.0, 40.0);
    const double stripe_amp = rng.uniform() < 0.3 ? rng.uniform(5.0, 30.0) : 0.0;
    const double stripe_freq = rng.uniform(0.2, 1.2);
    for (std::size_t y = 0; y < height; ++y) {
      for (std::size_t x = 0; x < width; ++x) {
        const double dx = x - cx, dy = y - cy;
        const double u = (dx * ca + dy * sa) / rx, v = (-dx * sa + dy * ca) / ry;
        const bool inside = ellipse ? u * u + v * v <= 1.0 : std::abs(u) <= 1.0 && std::abs(v) <= 1.0;
        if (!inside) continue;
        img[y * width + x] = level + shade * u + stripe_amp * std::sin(stripe_freq * (u * rx));
      }
    }
  }

  // Multi-octave texture with a random overall strength.
  const double texture = rng.uniform(4.0, 22.0);
  double octave_amp = 1.0;
  std::size_t cells = 4;
  for (int octave = 0; octave < 4; ++octave, octave_amp *= 0.55, cells *= 2) {
    const ValueNoise noise(cells, cells, rng);
    for (std::size_t y = 0; y < height; ++y) {
      for (std::size_t x = 0; x < width; ++x) {
        img[y * width + x] += texture * octave_amp * noise.sample(x * cells / w, y * cells / h);
      }
    }
  }

  const double sensor = rng.uniform(0.5, 2.0);
  Plane out(width, height, 8);
  for (std::size_t i = 0; i < img.size(); ++i) {
    const double v = img[i] + sensor * rng.normal();
    out.samples[i] = static_cast<std::uint16_t>(std::clamp(std::round(v), 0.0, 255.0));
  }
  return out;
}

}  // namespace loopfilter
