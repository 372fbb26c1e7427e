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
#include <cstdint>
#include <vector>

namespace loopfilter {

// A single image component (Y, U or V) with integer samples in
// [0, 2^bit_depth - 1], stored row-major.
struct Plane {
  std::size_t width = 0;
  std::size_t height = 0;
  int bit_depth = 8;
  std::vector<std::uint16_t> samples;

  Plane() = default;
  Plane(std::size_t w, std::size_t h, int depth = 8, std::uint16_t fill = 0)
      : width(w), height(h), bit_depth(depth), samples(w * h, fill) {}

  std::uint16_t& at(std::size_t x, std::size_t y) { return samples[y * width + x]; }
  std::uint16_t at(std::size_t x, std::size_t y) const { return samples[y * width + x]; }
  int max_value() const { return (1 << bit_depth) - 1; }

  friend bool operator==(const Plane&, const Plane&) = default;
};

// Copies the w x h region at (x, y). The region must lie inside the plane.
Plane crop(const Plane& plane, std::size_t x, std::size_t y, std::size_t w, std::size_t h);

}  // namespace loopfilter
