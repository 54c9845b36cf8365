#pragma once

#include <cstddef>
#include <span>
#include <vector>

namespace oracles {

/// Minimum L1 cost over every monotone unit-step path that stays inside the
/// band, found by visiting each path once. Costs accumulate from (0, 0).
double dtw_enumerate(std::span<const double> a, std::span<const double> b, std::size_t window);

/// Unit-step paths counted while enumerating (for sanity checks).
std::size_t dtw_path_count(std::size_t n, std::size_t window);

}  // namespace oracles
