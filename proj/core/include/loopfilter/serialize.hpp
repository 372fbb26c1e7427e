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
#include <filesystem>
#include <span>
#include <variant>
#include <vector>

#include "loopfilter/codec.hpp"
#include "loopfilter/dfp.hpp"
#include "loopfilter/hash.hpp"
#include "loopfilter/network.hpp"

namespace loopfilter {

inline constexpr std::uint32_t kModelFormatVersion = 1;
inline constexpr std::uint32_t kPatchFormatVersion = 1;
inline constexpr std::uint32_t kConformanceFormatVersion = 1;

using AnyModel = std::variant<NetworkModel, DfpModel>;

// Canonical little-endian encodings. The byte layouts are documented in
// README.md; they are also what model_hash digests.
std::vector<std::uint8_t> serialize_model(const NetworkModel& model);
std::vector<std::uint8_t> serialize_model(const DfpModel& model);
AnyModel deserialize_model(std::span<const std::uint8_t> bytes);

void save_model(const NetworkModel& model, const std::filesystem::path& path);
void save_model(const DfpModel& model, const std::filesystem::path& path);
AnyModel load_model(const std::filesystem::path& path);
NetworkModel load_float_model(const std::filesystem::path& path);
DfpModel load_dfp_model(const std::filesystem::path& path);

Digest model_hash(const NetworkModel& model);
Digest model_hash(const DfpModel& model);

std::vector<std::uint8_t> serialize_patch_set(const PatchSet& set);
PatchSet deserialize_patch_set(std::span<const std::uint8_t> bytes);
void save_patch_set(const PatchSet& set, const std::filesystem::path& path);
PatchSet load_patch_set(const std::filesystem::path& path);

std::vector<std::uint8_t> serialize_conformance(const ConformanceSuite& suite);
ConformanceSuite deserialize_conformance(std::span<const std::uint8_t> bytes);
void save_conformance(const ConformanceSuite& suite, const std::filesystem::path& path);
ConformanceSuite load_conformance(const std::filesystem::path& path);

std::vector<std::uint8_t> read_file(const std::filesystem::path& path);
void write_file(std::span<const std::uint8_t> bytes, const std::filesystem::path& path);

}  // namespace loopfilter
