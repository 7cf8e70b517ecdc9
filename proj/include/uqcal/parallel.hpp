#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>

namespace uqcal {

/// Runs fn(i) for i in [0, n) on up to `workers` threads. Each index is
/// visited exactly once; callers write results into preallocated slots so the
/// outcome does not depend on scheduling. The first exception is rethrown.
void parallel_for(std::size_t n, std::size_t workers, const std::function<void(std::size_t)>& fn);

/// splitmix64 finalizer; used to derive independent per-cell seeds.
std::uint64_t mix_seed(std::uint64_t a, std::uint64_t b);

inline std::uint64_t mix_seed(std::uint64_t a, std::uint64_t b, std::uint64_t c) {
  return mix_seed(mix_seed(a, b), c);
}

}  // namespace uqcal
