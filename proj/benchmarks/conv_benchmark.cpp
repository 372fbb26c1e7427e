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

#include "loopfilter/random.hpp"
#include "loopfilter/tensor.hpp"

namespace loopfilter {
namespace {

Tensor fill(Shape shape, Rng& rng) {
  Tensor t(std::move(shape));
  for (double& v : t.values()) v = rng.uniform(-1.0, 1.0);
  return t;
}

// Args: channels, spatial side, batch.
void BM_Conv2d(benchmark::State& state) {
  const auto c = static_cast<std::size_t>(state.range(0));
  const auto side = static_cast<std::size_t>(state.range(1));
  const auto n = static_cast<std::size_t>(state.range(2));
  Rng rng(1);
  const Tensor x = fill({n, c, side, side}, rng);
  const ConvParams p{fill({c, c, 3, 3}, rng), std::vector<double>(c, 0.1)};
  for (auto _ : state) benchmark::DoNotOptimize(conv2d(x, p));
  state.SetItemsProcessed(state.iterations() * static_cast<std::int64_t>(n * c * c * side * side * 9));
}
BENCHMARK(BM_Conv2d)->Args({16, 32, 16})->Args({64, 35, 1})->Unit(benchmark::kMillisecond);

void BM_Conv2dGrad(benchmark::State& state) {
  const auto c = static_cast<std::size_t>(state.range(0));
  const auto side = static_cast<std::size_t>(state.range(1));
  const auto n = static_cast<std::size_t>(state.range(2));
  Rng rng(2);
  const Tensor x = fill({n, c, side, side}, rng);
  const Tensor up = fill({n, c, side, side}, rng);
  const ConvParams p{fill({c, c, 3, 3}, rng), std::vector<double>(c, 0.0)};
  for (auto _ : state) benchmark::DoNotOptimize(conv2d_grad(x, p, up));
  state.SetItemsProcessed(state.iterations() * static_cast<std::int64_t>(n * c * c * side * side * 9));
}
BENCHMARK(BM_Conv2dGrad)->Args({16, 32, 16})->Args({64, 35, 1})->Unit(benchmark::kMillisecond);

}  // namespace
}  // namespace loopfilter
