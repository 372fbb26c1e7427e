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

#include <algorithm>
#include <cstddef>
#include <thread>
#include <vector>

namespace loopfilter {

// Runs fn(begin, end) over contiguous chunks of [0, count) on up to `workers`
// threads. Chunk boundaries depend only on count and workers, and each index
// is visited exactly once, so callers that write disjoint outputs per index
// get results independent of the worker count.
template <typename Fn>
void parallel_for(std::size_t count, int workers, Fn&& fn) {
  const std::size_t n_workers =
      std::clamp<std::size_t>(workers > 0 ? static_cast<std::size_t>(workers) : 1, 1,
                              std::max<std::size_t>(count, 1));
  if (n_workers == 1) {
    fn(std::size_t{0}, count);
    return;
  }
  const std::size_t chunk = (count + n_workers - 1) / n_workers;
  std::vector<std::jthread> pool;
  pool.reserve(n_workers);
  for (std::size_t w = 0; w < n_workers; ++w) {
    const std::size_t begin = w * chunk;
    const std::size_t end = std::min(count, begin + chunk);
    if (begin >= end) break;
    pool.emplace_back([&fn, begin, end] { fn(begin, end); });
  }
}

}  // namespace loopfilter
