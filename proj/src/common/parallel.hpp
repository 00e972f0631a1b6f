// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstddef>
#include <functional>

namespace dinolens {

/// Worker count from an explicit request, else DINOLENS_THREADS, else 1.
int resolve_threads(int requested);

/// Process-wide default used by module entry points that take no thread
/// argument. Set once by the harness.
void set_default_threads(int threads);
int default_threads();

/// Runs fn(i) for i in [0, n) on up to `threads` workers. Each index is
/// handled by exactly one worker; callers write results by index so the
/// outcome never depends on scheduling.
void parallel_for(size_t n, int threads, const std::function<void(size_t)>& fn);

}  // namespace dinolens
