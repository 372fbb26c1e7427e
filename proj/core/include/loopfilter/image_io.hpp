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

#include <filesystem>
#include <vector>

#include "loopfilter/codec.hpp"
#include "loopfilter/image.hpp"

namespace loopfilter {

// Binary greymap (P5), maxval up to 65535; 16-bit samples are big-endian as
// the format requires.
Plane read_pgm(const std::filesystem::path& path);
void write_pgm(const Plane& plane, const std::filesystem::path& path);

// Sidecar text descriptor for raw planar YUV 4:2:0, one `key=value` per line:
// width, height, frames and optionally bit_depth (default 8). Samples wider
// than 8 bits are stored as little-endian u16.
struct YuvDescriptor {
  std::size_t width = 0;
  std::size_t height = 0;
  std::size_t frames = 1;
  int bit_depth = 8;
};

struct YuvFrame {
  Plane y;
  Plane u;
  Plane v;
};

YuvDescriptor read_yuv_descriptor(const std::filesystem::path& path);
void write_yuv_descriptor(const YuvDescriptor& desc, const std::filesystem::path& path);
std::vector<YuvFrame> read_yuv420(const std::filesystem::path& path, const YuvDescriptor& desc);
void write_yuv420(const std::vector<YuvFrame>& frames, const std::filesystem::path& path);

struct RDRow {
  int qp = 0;
  RDPoint point;
};

// Header `qp,bpp,psnr`, one row per point.
void write_rd_csv(const std::vector<RDRow>& rows, const std::filesystem::path& path);
std::vector<RDRow> read_rd_csv(const std::filesystem::path& path);

}  // namespace loopfilter
