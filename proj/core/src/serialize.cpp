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

#include "loopfilter/serialize.hpp"

#include <bit>
#include <cstring>
#include <fstream>
#include <iterator>
#include <string>
#include <string_view>

#include "loopfilter/error.hpp"

namespace loopfilter {
namespace {

constexpr std::string_view kModelMagic{"LFMODEL\0", 8};
constexpr std::string_view kModelEnd{"LFEND\0\0\0", 8};
constexpr std::string_view kPatchMagic{"LFPATCH\0", 8};
constexpr std::string_view kConformanceMagic{"LFCONF\0\0", 8};

enum class ModelKind : std::uint8_t { kFloat = 0, kDfp = 1 };
enum class DType : std::uint8_t { kF64 = 1, kI8 = 2, kI32 = 3 };

class Writer {
 public:
  void u8(std::uint8_t v) { bytes_.push_back(v); }
  void u16(std::uint16_t v) { le(v, 2); }
  void u32(std::uint32_t v) { le(v, 4); }
  void i32(std::int32_t v) { le(static_cast<std::uint32_t>(v), 4); }
  void u64(std::uint64_t v) { le(v, 8); }
  void f64(double v) { le(std::bit_cast<std::uint64_t>(v), 8); }
  void raw(std::string_view s) { bytes_.insert(bytes_.end(), s.begin(), s.end()); }
  void raw(std::span<const std::uint8_t> s) { bytes_.insert(bytes_.end(), s.begin(), s.end()); }
  void size(std::size_t v) { u32(static_cast<std::uint32_t>(v)); }

  std::vector<std::uint8_t> take() { return std::move(bytes_); }

 private:
  void le(std::uint64_t v, int n) {
    for (int i = 0; i < n; ++i) bytes_.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
  }
  std::vector<std::uint8_t> bytes_;
};

class Reader {
 public:
  Reader(std::span<const std::uint8_t> bytes, std::string what) : bytes_(bytes), what_(std::move(what)) {}

  std::uint8_t u8() { return static_cast<std::uint8_t>(le(1)); }
  std::uint16_t u16() { return static_cast<std::uint16_t>(le(2)); }
  std::uint32_t u32() { return static_cast<std::uint32_t>(le(4)); }
  std::int32_t i32() { return static_cast<std::int32_t>(static_cast<std::uint32_t>(le(4))); }
  std::uint64_t u64() { return le(8); }
  double f64() { return std::bit_cast<double>(le(8)); }

  void expect(std::string_view s, const char* field) {
    need(s.size());
    if (std::memcmp(bytes_.data() + pos_, s.data(), s.size()) != 0) error(std::string("bad ") + field);
    pos_ += s.size();
  }

  template <std::size_t N>
  std::array<std::uint8_t, N> array() {
    need(N);
    std::array<std::uint8_t, N> out{};
    std::memcpy(out.data(), bytes_.data() + pos_, N);
    pos_ += N;
    return out;
  }

  // A count that must still fit in the remaining bytes at `unit` bytes each.
  std::size_t count(std::size_t unit, const char* field) {
    const std::size_t n = u32();
    if (unit > 0 && n > remaining() / unit) error(std::string("implausible ") + field + " " + std::to_string(n));
    return n;
  }

  std::size_t remaining() const { return bytes_.size() - pos_; }
  std::size_t offset() const { return pos_; }

  [[noreturn]] void error(const std::string& message) const {
    fail(ErrorCode::kFormat, what_ + ": " + message + " at offset " + std::to_string(pos_));
  }

  void finish() const {
    if (pos_ != bytes_.size()) error("trailing bytes");
  }

 private:
  void need(std::size_t n) const {
    if (n > remaining()) error("truncated (need " + std::to_string(n) + " bytes)");
  }
  std::uint64_t le(int n) {
    need(static_cast<std::size_t>(n));
    std::uint64_t v = 0;
    for (int i = 0; i < n; ++i) v |= static_cast<std::uint64_t>(bytes_[pos_ + i]) << (8 * i);
    pos_ += static_cast<std::size_t>(n);
    return v;
  }

  std::span<const std::uint8_t> bytes_;
  std::string what_;
  std::size_t pos_ = 0;
};

void write_config(Writer& w, const NetworkConfig& c, const Provenance& p) {
  w.i32(c.num_conv_layers);
  w.i32(c.kernel_size);
  w.i32(c.base_filters);
  w.i32(c.bit_depth);
  w.i32(c.qp_max);
  w.u8(c.use_qp_map ? 1 : 0);
  w.size(c.per_layer_filters.size());
  for (int f : c.per_layer_filters) w.i32(f);
  w.u64(p.seed);
  w.raw(p.config_digest);
}

void read_config(Reader& r, NetworkConfig& c, Provenance& p) {
  c.num_conv_layers = r.i32();
  c.kernel_size = r.i32();
  c.base_filters = r.i32();
  c.bit_depth = r.i32();
  c.qp_max = r.i32();
  c.use_qp_map = r.u8() != 0;
  c.per_layer_filters.resize(r.count(4, "per-layer filter count"));
  for (int& f : c.per_layer_filters) f = r.i32();
  p.seed = r.u64();
  p.config_digest = r.array<32>();
}

void write_f64s(Writer& w, std::span<const double> v) {
  w.u8(static_cast<std::uint8_t>(DType::kF64));
  w.size(v.size());
  for (double x : v) w.f64(x);
}

std::vector<double> read_f64s(Reader& r, std::size_t expected, const char* field) {
  if (r.u8() != static_cast<std::uint8_t>(DType::kF64)) r.error(std::string("unexpected dtype for ") + field);
  const std::size_t n = r.count(8, field);
  if (n != expected) r.error(std::string(field) + " length " + std::to_string(n) + " != " + std::to_string(expected));
  std::vector<double> v(n);
  for (double& x : v) x = r.f64();
  return v;
}

void write_header(Writer& w, ModelKind kind) {
  w.raw(kModelMagic);
  w.u32(kModelFormatVersion);
  w.u8(static_cast<std::uint8_t>(kind));
  w.u8(0);
  w.u8(0);
  w.u8(0);
}

void write_plane_samples(Writer& w, const Plane& p) {
  for (std::uint16_t s : p.samples) w.u16(s);
}

Plane read_plane(Reader& r, std::size_t width, std::size_t height, int bit_depth) {
  if (width == 0 || height == 0 || width * height > r.remaining() / 2) r.error("implausible plane size");
  Plane p(width, height, bit_depth);
  for (std::uint16_t& s : p.samples) {
    s = r.u16();
    if (s > p.max_value()) r.error("sample exceeds bit depth");
  }
  return p;
}

}  // namespace

std::vector<std::uint8_t> serialize_model(const NetworkModel& model) {
  model.validate();
  Writer w;
  write_header(w, ModelKind::kFloat);
  write_config(w, model.config, model.provenance);
  w.size(model.layers.size());
  for (const Layer& l : model.layers) {
    w.size(l.conv.out_channels());
    w.size(l.conv.in_channels());
    w.size(l.conv.kernel());
    w.u8(l.relu ? 1 : 0);
    w.u8(l.bn ? 1 : 0);
    write_f64s(w, l.conv.weights.values());
    write_f64s(w, l.conv.bias);
    if (l.bn) {
      w.f64(l.bn->epsilon);
      w.f64(l.bn->momentum);
      write_f64s(w, l.bn->scale);
      write_f64s(w, l.bn->shift);
      write_f64s(w, l.bn->running_mean);
      write_f64s(w, l.bn->running_var);
    }
  }
  w.raw(kModelEnd);
  return w.take();
}

std::vector<std::uint8_t> serialize_model(const DfpModel& model) {
  model.validate();
  Writer w;
  write_header(w, ModelKind::kDfp);
  write_config(w, model.config, model.provenance);
  w.i32(model.fl_concat);
  w.i32(model.fl_sum);
  w.size(model.layers.size());
  for (const DfpLayer& l : model.layers) {
    w.size(l.out_channels);
    w.size(l.in_channels);
    w.size(l.kernel);
    w.u8(l.relu ? 1 : 0);
    w.i32(l.fl.fl_w);
    w.i32(l.fl.fl_b);
    w.i32(l.fl.fl_o);
    w.u8(static_cast<std::uint8_t>(DType::kI8));
    w.u8(kWeightBits);
    w.size(l.weights.size());
    for (std::int8_t v : l.weights) w.u8(static_cast<std::uint8_t>(v));
    w.u8(static_cast<std::uint8_t>(DType::kI32));
    w.u8(kBiasBits);
    w.size(l.biases.size());
    for (std::int32_t v : l.biases) w.i32(v);
  }
  w.raw(kModelEnd);
  return w.take();
}

AnyModel deserialize_model(std::span<const std::uint8_t> bytes) {
  Reader r(bytes, "model file");
  r.expect(kModelMagic, "magic");
  const std::uint32_t version = r.u32();
  if (version != kModelFormatVersion) {
    fail(ErrorCode::kVersion, "model file: format version " + std::to_string(version) +
                                  " is not supported (expected " + std::to_string(kModelFormatVersion) + ")");
  }
  const std::uint8_t kind = r.u8();
  r.u8();
  r.u8();
  r.u8();
  NetworkConfig config;
  Provenance provenance;
  read_config(r, config, provenance);

  AnyModel result;
  if (kind == static_cast<std::uint8_t>(ModelKind::kFloat)) {
    NetworkModel m;
    m.config = config;
    m.provenance = provenance;
    const std::size_t layers = r.count(16, "layer count");
    for (std::size_t i = 0; i < layers; ++i) {
      const std::size_t cout = r.u32(), cin = r.u32(), k = r.u32();
      if (cout == 0 || cin == 0 || k == 0 || cout * cin * k * k > r.remaining() / 8) r.error("implausible layer shape");
      Layer l;
      l.relu = r.u8() != 0;
      const bool has_bn = r.u8() != 0;
      l.conv.weights = Tensor({cout, cin, k, k}, read_f64s(r, cout * cin * k * k, "weights"));
      l.conv.bias = read_f64s(r, cout, "bias");
      if (has_bn) {
        BNParams bn;
        bn.epsilon = r.f64();
        bn.momentum = r.f64();
        bn.scale = read_f64s(r, cout, "bn scale");
        bn.shift = read_f64s(r, cout, "bn shift");
        bn.running_mean = read_f64s(r, cout, "bn mean");
        bn.running_var = read_f64s(r, cout, "bn variance");
        l.bn = std::move(bn);
      }
      m.layers.push_back(std::move(l));
    }
    r.expect(kModelEnd, "end marker");
    r.finish();
    try {
      m.validate();
    } catch (const Error& e) {
      fail(ErrorCode::kFormat, std::string("model file: inconsistent model: ") + e.what());
    }
    result = std::move(m);
  } else if (kind == static_cast<std::uint8_t>(ModelKind::kDfp)) {
    DfpModel m;
    m.config = config;
    m.provenance = provenance;
    m.fl_concat = r.i32();
    m.fl_sum = r.i32();
    const std::size_t layers = r.count(16, "layer count");
    for (std::size_t i = 0; i < layers; ++i) {
      DfpLayer l;
      l.out_channels = r.u32();
      l.in_channels = r.u32();
      l.kernel = r.u32();
      l.relu = r.u8() != 0;
      l.fl.fl_w = r.i32();
      l.fl.fl_b = r.i32();
      l.fl.fl_o = r.i32();
      if (r.u8() != static_cast<std::uint8_t>(DType::kI8) || r.u8() != kWeightBits) r.error("unexpected weight format");
      l.weights.resize(r.count(1, "weight count"));
      for (std::int8_t& v : l.weights) v = static_cast<std::int8_t>(r.u8());
      if (r.u8() != static_cast<std::uint8_t>(DType::kI32) || r.u8() != kBiasBits) r.error("unexpected bias format");
      l.biases.resize(r.count(4, "bias count"));
      for (std::int32_t& v : l.biases) v = r.i32();
      m.layers.push_back(std::move(l));
    }
    r.expect(kModelEnd, "end marker");
    r.finish();
    try {
      m.validate();
    } catch (const Error& e) {
      fail(ErrorCode::kFormat, std::string("model file: inconsistent model: ") + e.what());
    }
    result = std::move(m);
  } else {
    r.error("unknown model kind " + std::to_string(kind));
  }
  return result;
}

std::vector<std::uint8_t> read_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) fail(ErrorCode::kIo, "cannot open " + path.string());
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

void write_file(std::span<const std::uint8_t> bytes, const std::filesystem::path& path) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) fail(ErrorCode::kIo, "cannot write " + path.string());
  out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!out) fail(ErrorCode::kIo, "write failed for " + path.string());
}

void save_model(const NetworkModel& model, const std::filesystem::path& path) {
  write_file(serialize_model(model), path);
}

void save_model(const DfpModel& model, const std::filesystem::path& path) {
  write_file(serialize_model(model), path);
}

AnyModel load_model(const std::filesystem::path& path) { return deserialize_model(read_file(path)); }

NetworkModel load_float_model(const std::filesystem::path& path) {
  AnyModel m = load_model(path);
  if (!std::holds_alternative<NetworkModel>(m)) fail(ErrorCode::kFormat, path.string() + ": not a float model");
  return std::get<NetworkModel>(std::move(m));
}

DfpModel load_dfp_model(const std::filesystem::path& path) {
  AnyModel m = load_model(path);
  if (!std::holds_alternative<DfpModel>(m)) fail(ErrorCode::kFormat, path.string() + ": not a DFP model");
  return std::get<DfpModel>(std::move(m));
}

Digest model_hash(const NetworkModel& model) { return sha256(serialize_model(model)); }
Digest model_hash(const DfpModel& model) { return sha256(serialize_model(model)); }

std::vector<std::uint8_t> serialize_patch_set(const PatchSet& set) {
  Writer w;
  w.raw(kPatchMagic);
  w.u32(kPatchFormatVersion);
  w.size(set.patch_size);
  w.u32(static_cast<std::uint32_t>(set.patches.empty() ? 8 : set.patches.front().decoded.bit_depth));
  w.size(set.patches.size());
  for (const Patch& p : set.patches) {
    if (p.decoded.width != set.patch_size || p.decoded.height != set.patch_size || !(p.original.width == p.decoded.width && p.original.height == p.decoded.height)) {
      fail(ErrorCode::kShapeMismatch, "patch set: patch dimensions differ from patch_size");
    }
    w.u32(p.image_id);
    w.u32(p.x);
    w.u32(p.y);
    w.i32(p.qp);
    write_plane_samples(w, p.decoded);
    write_plane_samples(w, p.original);
  }
  return w.take();
}

PatchSet deserialize_patch_set(std::span<const std::uint8_t> bytes) {
  Reader r(bytes, "patch set");
  r.expect(kPatchMagic, "magic");
  const std::uint32_t version = r.u32();
  if (version != kPatchFormatVersion) fail(ErrorCode::kVersion, "patch set: unsupported version " + std::to_string(version));
  PatchSet set;
  set.patch_size = r.u32();
  const int bit_depth = static_cast<int>(r.u32());
  if (bit_depth < 1 || bit_depth > 16) r.error("invalid bit depth");
  const std::size_t n = r.count(16, "patch count");
  for (std::size_t i = 0; i < n; ++i) {
    Patch p;
    p.image_id = r.u32();
    p.x = r.u32();
    p.y = r.u32();
    p.qp = r.i32();
    p.decoded = read_plane(r, set.patch_size, set.patch_size, bit_depth);
    p.original = read_plane(r, set.patch_size, set.patch_size, bit_depth);
    set.patches.push_back(std::move(p));
  }
  r.finish();
  return set;
}

void save_patch_set(const PatchSet& set, const std::filesystem::path& path) {
  write_file(serialize_patch_set(set), path);
}

PatchSet load_patch_set(const std::filesystem::path& path) { return deserialize_patch_set(read_file(path)); }

std::vector<std::uint8_t> serialize_conformance(const ConformanceSuite& suite) {
  Writer w;
  w.raw(kConformanceMagic);
  w.u32(kConformanceFormatVersion);
  std::array<std::uint8_t, 16> algo{};
  std::copy(kHashAlgorithm.begin(), kHashAlgorithm.end(), algo.begin());
  w.raw(algo);
  w.raw(suite.model_digest);
  w.size(suite.vectors.size());
  for (const ConformanceVector& v : suite.vectors) {
    w.size(v.input.width);
    w.size(v.input.height);
    w.u8(static_cast<std::uint8_t>(v.input.bit_depth));
    w.u8(static_cast<std::uint8_t>(v.qp));
    w.u16(0);
    write_plane_samples(w, v.input);
    write_plane_samples(w, v.expected);
    w.raw(v.expected_hash);
  }
  w.raw(suite.corpus_hash);
  return w.take();
}

ConformanceSuite deserialize_conformance(std::span<const std::uint8_t> bytes) {
  Reader r(bytes, "conformance file");
  r.expect(kConformanceMagic, "magic");
  const std::uint32_t version = r.u32();
  if (version != kConformanceFormatVersion) {
    fail(ErrorCode::kVersion, "conformance file: unsupported version " + std::to_string(version));
  }
  const auto algo = r.array<16>();
  const std::string name(reinterpret_cast<const char*>(algo.data()), strnlen(reinterpret_cast<const char*>(algo.data()), 16));
  if (name != kHashAlgorithm) r.error("unsupported hash algorithm '" + name + "'");
  ConformanceSuite suite;
  suite.model_digest = r.array<32>();
  const std::size_t n = r.count(12, "vector count");
  for (std::size_t i = 0; i < n; ++i) {
    ConformanceVector v;
    const std::size_t width = r.u32(), height = r.u32();
    const int bit_depth = r.u8();
    v.qp = r.u8();
    r.u16();
    if (bit_depth < 1 || bit_depth > 16) r.error("invalid bit depth");
    v.input = read_plane(r, width, height, bit_depth);
    v.expected = read_plane(r, width, height, bit_depth);
    v.expected_hash = r.array<32>();
    suite.vectors.push_back(std::move(v));
  }
  suite.corpus_hash = r.array<32>();
  r.finish();
  return suite;
}

void save_conformance(const ConformanceSuite& suite, const std::filesystem::path& path) {
  write_file(serialize_conformance(suite), path);
}

ConformanceSuite load_conformance(const std::filesystem::path& path) {
  return deserialize_conformance(read_file(path));
}

}  // namespace loopfilter
