#pragma once

// Independent brute-force oracles used to pin down the optimizing code:
// exhaustive perfect-matching enumeration (m <= 10) and exhaustive max-cut.

#include <cmath>
#include <functional>
#include <limits>
#include <vector>

#include "stratakit/core.hpp"

namespace oracles {

// Minimum total weight over all perfect matchings; infinity entries are
// forbidden. Returns +infinity if no feasible perfect matching exists.
inline double brute_force_matching(const std::vector<std::vector<double>>& w) {
  const int m = static_cast<int>(w.size());
  std::vector<int> used(static_cast<std::size_t>(m), 0);
  std::function<double()> rec = [&]() -> double {
    int i = 0;
    while (i < m && used[static_cast<std::size_t>(i)]) ++i;
    if (i == m) return 0.0;
    used[static_cast<std::size_t>(i)] = 1;
    double best = std::numeric_limits<double>::infinity();
    for (int j = i + 1; j < m; ++j) {
      if (used[static_cast<std::size_t>(j)] ||
          std::isinf(w[static_cast<std::size_t>(i)][static_cast<std::size_t>(j)]))
        continue;
      used[static_cast<std::size_t>(j)] = 1;
      const double rest = rec();
      if (rest < std::numeric_limits<double>::infinity())
        best = std::min(best,
                        w[static_cast<std::size_t>(i)][static_cast<std::size_t>(j)] + rest);
      used[static_cast<std::size_t>(j)] = 0;
    }
    used[static_cast<std::size_t>(i)] = 0;
    return best;
  };
  return rec();
}

// Exhaustive minimum of ((d - 1/2 1)' h)^2 over {0,1}^n, n <= 24.
inline double brute_force_imbalance(const std::vector<double>& h) {
  const int n = static_cast<int>(h.size());
  double half = 0.0;
  for (double v : h) half += 0.5 * v;
  double best = std::numeric_limits<double>::infinity();
  for (std::uint32_t mask = 0; mask < (1u << n); ++mask) {
    double s = -half;
    for (int i = 0; i < n; ++i)
      if (mask & (1u << i)) s += h[static_cast<std::size_t>(i)];
    best = std::min(best, s * s);
  }
  return best;
}

// A uniformly random partition into groups of size k (plus remainder), for
// comparing objectives against the matched partition.
inline std::vector<std::vector<int>> random_partition(int m, int k, stratakit::Rng& rng) {
  std::vector<int> order(static_cast<std::size_t>(m));
  for (int i = 0; i < m; ++i) order[static_cast<std::size_t>(i)] = i;
  rng.shuffle(order);
  std::vector<std::vector<int>> groups;
  int pos = 0;
  while (pos + k <= m) {
    groups.emplace_back(order.begin() + pos, order.begin() + pos + k);
    pos += k;
  }
  if (pos < m) groups.emplace_back(order.begin() + pos, order.end());
  return groups;
}

}  // namespace oracles
