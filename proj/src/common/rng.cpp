// SPDX-License-Identifier: Apache-2.0
#include "common/rng.hpp"

#include <algorithm>
#include <numeric>

#include "common/error.hpp"

namespace dinolens {

std::vector<size_t> Rng::sample_without_replacement(size_t n, size_t count) {
  if (count > n) {
    throw ContractError("cannot sample " + std::to_string(count) + " of " + std::to_string(n));
  }
  std::vector<size_t> all(n);
  std::iota(all.begin(), all.end(), size_t{0});
  // Partial Fisher-Yates: the first `count` slots end up uniformly chosen.
  for (size_t i = 0; i < count; ++i) {
    const size_t j = i + static_cast<size_t>(below(n - i));
    std::swap(all[i], all[j]);
  }
  all.resize(count);
  std::sort(all.begin(), all.end());
  return all;
}

}  // namespace dinolens
