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


#include <benchmark/benchmark.h>

#include "loopfilter/codec.hpp"
#include "loopfilter/compress.hpp"
#include "loopfilter/dfp.hpp"
#include "loopfilter/network.hpp"
#include "loopfilter/random.hpp"

namespace loopfilter {
namespace {

// Untrained 8-layer model with small random weights, folded and quantized.
DfpModel make_model(int filters) {
  NetworkConfig c;
  c.base_filters = filters;
  NetworkModel m = build_cnnf(c, 3);
  Rng rng(4);
  for (Layer& l : m.layers)
    for (double& w : l.conv.weights.values()) w = rng.uniform(-0.05, 0.05);
  m = fold_batchnorm(m);
  const CalibrationItem cal[] = {{synthetic_image(64, 64, 1), 32}};
  return quantize_model(m, build_fl_table(m, cal));
}

// Args: filters, plane side, threads.
void BM_DfpForward(benchmark::State& state) {
  const DfpModel model = make_model(static_cast<int>(state.range(0)));
  const auto side = static_cast<std::size_t>(state.range(1));
  const Plane plane = synthetic_image(side, side, 2);
  DfpOptions opt;
  opt.threads = static_cast<int>(state.range(2));
  for (auto _ : state) benchmark::DoNotOptimize(dfp_forward(model, plane, 32, opt));
  state.SetItemsProcessed(state.iterations() * static_cast<std::int64_t>(side * side));
}
BENCHMARK(BM_DfpForward)->Args({16, 128, 1})->Args({64, 128, 1})->Args({64, 128, 2})->Unit(benchmark::kMillisecond);

void BM_FloatForward(benchmark::State& state) {
  NetworkConfig c;
  c.base_filters = static_cast<int>(state.range(0));
  const NetworkModel model = fold_batchnorm(build_cnnf(c, 3));
  const auto side = static_cast<std::size_t>(state.range(1));
  const Plane plane = synthetic_image(side, side, 2);
  for (auto _ : state) benchmark::DoNotOptimize(filter_plane(model, plane, 32));
  state.SetItemsProcessed(state.iterations() * static_cast<std::int64_t>(side * side));
}
BENCHMARK(BM_FloatForward)->Args({16, 128})->Args({64, 128})->Unit(benchmark::kMillisecond);

void BM_EncodeIntra(benchmark::State& state) {
  const Plane plane = synthetic_image(256, 256, 5);
  for (auto _ : state) benchmark::DoNotOptimize(encode_intra_plane(plane, 32));
  state.SetItemsProcessed(state.iterations() * 256 * 256);
}
BENCHMARK(BM_EncodeIntra)->Unit(benchmark::kMillisecond);

}  // namespace
}  // namespace loopfilter
