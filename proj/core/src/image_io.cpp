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

#include "loopfilter/image_io.hpp"

#include <cctype>
#include <charconv>
#include <fstream>
#include <iterator>
#include <sstream>
#include <string>

#include "loopfilter/error.hpp"

namespace loopfilter {
namespace {

std::vector<std::uint8_t> read_bytes(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) fail(ErrorCode::kIo, "cannot open " + path.string());
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

void write_bytes(const std::vector<std::uint8_t>& bytes, const std::filesystem::path& path) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) fail(ErrorCode::kIo, "cannot write " + path.string());
  out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!out) fail(ErrorCode::kIo, "write failed for " + path.string());
}

// Reads one whitespace-delimited header token, skipping '#' comments.
std::string pgm_token(const std::vector<std::uint8_t>& bytes, std::size_t& pos, const std::string& name) {
  while (pos < bytes.size()) {
    if (bytes[pos] == '#') {
      while (pos < bytes.size() && bytes[pos] != '\n') ++pos;
    } else if (std::isspace(bytes[pos])) {
      ++pos;
    } else {
      break;
    }
  }
  std::string tok;
  while (pos < bytes.size() && !std::isspace(bytes[pos])) tok.push_back(static_cast<char>(bytes[pos++]));
  if (tok.empty()) fail(ErrorCode::kFormat, name + ": truncated PGM header");
  return tok;
}

long pgm_number(const std::vector<std::uint8_t>& bytes, std::size_t& pos, const std::string& name) {
  const std::string tok = pgm_token(bytes, pos, name);
  long v = 0;
  const auto [end, ec] = std::from_chars(tok.data(), tok.data() + tok.size(), v);
  if (ec != std::errc() || end != tok.data() + tok.size()) {
    fail(ErrorCode::kFormat, name + ": bad PGM header field '" + tok + "'");
  }
  return v;
}

int bits_for_maxval(long maxval) {
  int bits = 1;
  while ((1L << bits) - 1 < maxval) ++bits;
  return bits;
}

std::size_t sample_bytes(int bit_depth) { return bit_depth > 8 ? 2 : 1; }

void read_raw_plane(const std::vector<std::uint8_t>& bytes, std::size_t& pos, Plane& plane) {
  const std::size_t bpp = sample_bytes(plane.bit_depth);
  if (pos + plane.samples.size() * bpp > bytes.size()) fail(ErrorCode::kFormat, "yuv: file truncated");
  for (std::uint16_t& s : plane.samples) {
    s = bpp == 1 ? bytes[pos] : static_cast<std::uint16_t>(bytes[pos] | (bytes[pos + 1] << 8));
    pos += bpp;
    if (s > plane.max_value()) fail(ErrorCode::kFormat, "yuv: sample exceeds bit depth");
  }
}

void write_raw_plane(std::vector<std::uint8_t>& bytes, const Plane& plane) {
  for (std::uint16_t s : plane.samples) {
    bytes.push_back(static_cast<std::uint8_t>(s));
    if (plane.bit_depth > 8) bytes.push_back(static_cast<std::uint8_t>(s >> 8));
  }
}

}  // namespace

Plane read_pgm(const std::filesystem::path& path) {
  const std::vector<std::uint8_t> bytes = read_bytes(path);
  const std::string name = path.string();
  std::size_t pos = 0;
  if (pgm_token(bytes, pos, name) != "P5") fail(ErrorCode::kFormat, name + ": not a binary PGM (P5)");
  const long width = pgm_number(bytes, pos, name);
  const long height = pgm_number(bytes, pos, name);
  const long maxval = pgm_number(bytes, pos, name);
  if (width <= 0 || height <= 0 || maxval <= 0 || maxval > 65535) {
    fail(ErrorCode::kFormat, name + ": invalid PGM header values");
  }
  ++pos;  // single whitespace after maxval
  Plane plane(static_cast<std::size_t>(width), static_cast<std::size_t>(height), bits_for_maxval(maxval));
  const std::size_t bpp = maxval > 255 ? 2 : 1;
  if (pos + plane.samples.size() * bpp > bytes.size()) fail(ErrorCode::kFormat, name + ": pixel data truncated");
  for (std::uint16_t& s : plane.samples) {
    s = bpp == 1 ? bytes[pos] : static_cast<std::uint16_t>((bytes[pos] << 8) | bytes[pos + 1]);
    pos += bpp;
  }
  return plane;
}

void write_pgm(const Plane& plane, const std::filesystem::path& path) {
  const std::string header = "P5\n" + std::to_string(plane.width) + " " + std::to_string(plane.height) +
                             "\n" + std::to_string(plane.max_value()) + "\n";
  std::vector<std::uint8_t> bytes(header.begin(), header.end());
  for (std::uint16_t s : plane.samples) {
    if (plane.max_value() > 255) bytes.push_back(static_cast<std::uint8_t>(s >> 8));
    bytes.push_back(static_cast<std::uint8_t>(s));
  }
  write_bytes(bytes, path);
}

YuvDescriptor read_yuv_descriptor(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) fail(ErrorCode::kIo, "cannot open " + path.string());
  YuvDescriptor d;
  d.frames = 0;
  std::string line;
  while (std::getline(in, line)) {
    if (line.empty() || line[0] == '#') continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos) fail(ErrorCode::kFormat, path.string() + ": expected key=value, got '" + line + "'");
    const std::string key = line.substr(0, eq);
    const std::string text = line.substr(eq + 1);
    long value = 0;
    const auto [end, ec] = std::from_chars(text.data(), text.data() + text.size(), value);
    if (ec != std::errc() || end != text.data() + text.size()) {
      fail(ErrorCode::kFormat, path.string() + ": " + key + " is not an integer");
    }
    if (value <= 0) fail(ErrorCode::kFormat, path.string() + ": " + key + " must be positive");
    if (key == "width") d.width = static_cast<std::size_t>(value);
    else if (key == "height") d.height = static_cast<std::size_t>(value);
    else if (key == "frames") d.frames = static_cast<std::size_t>(value);
    else if (key == "bit_depth") d.bit_depth = static_cast<int>(value);
    else fail(ErrorCode::kFormat, path.string() + ": unknown key '" + key + "'");
  }
  if (d.width == 0 || d.height == 0 || d.frames == 0) {
    fail(ErrorCode::kFormat, path.string() + ": width, height and frames are required");
  }
  if (d.width % 2 || d.height % 2) fail(ErrorCode::kFormat, path.string() + ": 4:2:0 needs even dimensions");
  if (d.bit_depth > 16) fail(ErrorCode::kFormat, path.string() + ": bit_depth above 16");
  return d;
}

void write_yuv_descriptor(const YuvDescriptor& d, const std::filesystem::path& path) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) fail(ErrorCode::kIo, "cannot write " + path.string());
  out << "width=" << d.width << "\nheight=" << d.height << "\nframes=" << d.frames
      << "\nbit_depth=" << d.bit_depth << "\n";
}

std::vector<YuvFrame> read_yuv420(const std::filesystem::path& path, const YuvDescriptor& d) {
  const std::vector<std::uint8_t> bytes = read_bytes(path);
  std::size_t pos = 0;
  std::vector<YuvFrame> frames;
  for (std::size_t f = 0; f < d.frames; ++f) {
    YuvFrame frame{Plane(d.width, d.height, d.bit_depth), Plane(d.width / 2, d.height / 2, d.bit_depth),
                   Plane(d.width / 2, d.height / 2, d.bit_depth)};
    read_raw_plane(bytes, pos, frame.y);
    read_raw_plane(bytes, pos, frame.u);
    read_raw_plane(bytes, pos, frame.v);
    frames.push_back(std::move(frame));
  }
  if (pos != bytes.size()) fail(ErrorCode::kFormat, path.string() + ": trailing bytes after last frame");
  return frames;
}

void write_yuv420(const std::vector<YuvFrame>& frames, const std::filesystem::path& path) {
  std::vector<std::uint8_t> bytes;
  for (const YuvFrame& f : frames) {
    write_raw_plane(bytes, f.y);
    write_raw_plane(bytes, f.u);
    write_raw_plane(bytes, f.v);
  }
  write_bytes(bytes, path);
}

void write_rd_csv(const std::vector<RDRow>& rows, const std::filesystem::path& path) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) fail(ErrorCode::kIo, "cannot write " + path.string());
  out << "qp,bpp,psnr\n";
  out.precision(10);
  for (const RDRow& r : rows) out << r.qp << ',' << r.point.bitrate << ',' << r.point.psnr << '\n';
}

std::vector<RDRow> read_rd_csv(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) fail(ErrorCode::kIo, "cannot open " + path.string());
  std::string line;
  if (!std::getline(in, line) || line != "qp,bpp,psnr") fail(ErrorCode::kFormat, path.string() + ": bad header");
  std::vector<RDRow> rows;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    std::istringstream fields(line);
    RDRow r;
    char c1 = 0, c2 = 0;
    if (!(fields >> r.qp >> c1 >> r.point.bitrate >> c2 >> r.point.psnr) || c1 != ',' || c2 != ',') {
      fail(ErrorCode::kFormat, path.string() + ": malformed row '" + line + "'");
    }
    rows.push_back(r);
  }
  return rows;
}

}  // namespace loopfilter
