#pragma once

#include <algorithm>
#include <cstdint>
#include <map>
#include <numeric>
#include <vector>

#include "stratakit/core.hpp"
#include "stratakit/matching.hpp"
#include "stratakit/rng.hpp"

namespace stratakit {

// Above this stratum size, k-tuple matching runs inside PCA folds of roughly
// this many points each; keeps the cubic pairing step cheap.
inline constexpr int kFoldTarget = 200;

struct LocalRandomizeResult {
  std::vector<std::uint8_t> indicator;
  GroupPartition partition;  // indices into the caller's point set
  bool warn_small_stratum = false;
};

// Finely stratified randomization: split units by exact propensity level,
// match each level's units into k-tuples, pick exactly a of k per full group,
// and draw iid a/k coins for remainder units. Strata smaller than their
// denominator degrade to all-remainder iid draws with a warning.
inline LocalRandomizeResult local_randomize(const Matrix& points,
                                            const PropensityMap& q_map, Rng& rng,
                                            int parallelism = 1) {
  const std::size_t n = points.rows();
  if (q_map.size() != n) throw Error("propensity map must cover all units");

  LocalRandomizeResult out;
  out.indicator.assign(n, 0);

  // strata in level order so output ordering is deterministic
  std::map<std::pair<std::int64_t, std::int64_t>, std::vector<int>> strata;
  for (std::size_t i = 0; i < n; ++i) {
    const Propensity& p = q_map.values[i];
    strata[{p.num, p.den}].push_back(static_cast<int>(i));
  }

  for (const auto& [key, members] : strata) {
    const Propensity level(key.first, key.second);
    const std::int64_t a = level.num, k = level.den;

    if (k == 1) {  // propensity 1: deterministic inclusion, singleton groups
      GroupPartition p;
      for (int i : members) {
        out.indicator[static_cast<std::size_t>(i)] = 1;
        p.groups.push_back({i});
        p.stratum_of_group.push_back(level);
        p.is_remainder.push_back(false);
      }
      out.partition.append(p);
      continue;
    }

    if (static_cast<std::int64_t>(members.size()) < k) {
      // whole stratum is a remainder: iid draws
      GroupPartition p;
      p.groups.push_back(members);
      p.stratum_of_group.push_back(level);
      p.is_remainder.push_back(true);
      out.partition.append(p);
      out.warn_small_stratum = true;
      for (int i : members)
        if (rng.bernoulli(level.value())) out.indicator[static_cast<std::size_t>(i)] = 1;
      continue;
    }

    const Matrix sub = points.select_rows(members);
    const int K = std::max<int>(1, static_cast<int>(members.size()) / kFoldTarget);
    GroupPartition local =
        K > 1 ? match_within_folds(sub, static_cast<int>(k), K, parallelism)
              : build_k_tuples(sub, static_cast<int>(k));
    for (auto& g : local.groups)
      for (auto& u : g) u = members[static_cast<std::size_t>(u)];
    for (auto& s : local.stratum_of_group) s = level;

    for (std::size_t g = 0; g < local.groups.size(); ++g) {
      if (local.is_remainder[g]) {
        for (int i : local.groups[g])
          if (rng.bernoulli(level.value())) out.indicator[static_cast<std::size_t>(i)] = 1;
      } else {
        std::vector<int> order = local.groups[g];
        rng.shuffle(order);
        for (std::int64_t t = 0; t < a; ++t)
          out.indicator[static_cast<std::size_t>(order[static_cast<std::size_t>(t)])] = 1;
      }
    }
    out.partition.append(local);
  }
  return out;
}

// Exactly round(n * a/k) ones placed uniformly at random; ties round down.
inline std::vector<std::uint8_t> complete_randomize(std::size_t n, const Propensity& pi,
                                                    Rng& rng) {
  // nearest integer to n*a/k, ties down: floor(n*a/k + 1/2) with exact
  // rational arithmetic, tie (fraction exactly 1/2) resolved downward
  const std::int64_t num = static_cast<std::int64_t>(n) * pi.num;
  std::int64_t m = num / pi.den;
  const std::int64_t rem2 = 2 * (num % pi.den);
  if (rem2 > pi.den) ++m;  // strictly above 1/2 rounds up
  std::vector<int> order(n);
  std::iota(order.begin(), order.end(), 0);
  rng.shuffle(order);
  std::vector<std::uint8_t> v(n, 0);
  for (std::int64_t t = 0; t < m; ++t)
    v[static_cast<std::size_t>(order[static_cast<std::size_t>(t)])] = 1;
  return v;
}

struct TwoStageOptions {
  bool subordinate = false;
  int parallelism = 1;
};

// Full sample-then-assign pipeline. Sampling randomizes on psi1 with q_map;
// assignment randomizes the sampled units on psi2 with p_map. Subordinate
// mode runs assignment matching separately inside each sampling-propensity
// stratum. p_map covers all n units; it is restricted to the sampled set at
// assignment time.
inline DesignResult two_stage(const UnitTable& table, const PropensityMap& q_map,
                              const PropensityMap& p_map, RandomSource& rs,
                              const TwoStageOptions& opts = {}) {
  const std::size_t n = table.n();
  if (q_map.size() != n || p_map.size() != n)
    throw Error("q and p maps must cover all units");

  DesignResult r;
  r.seed = rs.seed();
  r.q_map = q_map;
  r.p_map = p_map;

  Rng sample_rng = rs.stream("sampling");
  auto samp = local_randomize(table.psi1, q_map, sample_rng, opts.parallelism);
  r.T = std::move(samp.indicator);
  r.sampling_partition = std::move(samp.partition);
  r.warn_small_stratum = samp.warn_small_stratum;

  std::vector<int> sampled;
  for (std::size_t i = 0; i < n; ++i)
    if (r.T[i]) sampled.push_back(static_cast<int>(i));
  if (sampled.empty()) throw Error("empty sampled set: no unit drawn at stage 1");

  // warn when q varies and (psi1, q) is not a coordinate subvector of psi2
  if (!q_map.is_constant()) {
    const Matrix& a1 = table.psi1;
    const Matrix& a2 = table.assignment_psi();
    bool covered = true;
    for (std::size_t j = 0; j < a1.cols() && covered; ++j) {
      bool found = false;
      for (std::size_t j2 = 0; j2 < a2.cols() && !found; ++j2) {
        found = true;
        for (std::size_t i = 0; i < n; ++i)
          if (a1(i, j) != a2(i, j2)) {
            found = false;
            break;
          }
      }
      covered = found;
    }
    if (covered) {
      // q must also be recoverable from psi2 columns
      bool q_found = false;
      const Matrix& a2b = table.assignment_psi();
      for (std::size_t j2 = 0; j2 < a2b.cols() && !q_found; ++j2) {
        q_found = true;
        for (std::size_t i = 0; i < n; ++i)
          if (a2b(i, j2) != q_map.value(i)) {
            q_found = false;
            break;
          }
      }
      covered = q_found;
    }
    if (!covered) r.warn_subvector = true;
  }

  const Matrix& psi2 = table.assignment_psi();
  r.D.assign(n, 0);

  auto assign_subset = [&](const std::vector<int>& subset, Rng& rng) {
    if (subset.empty()) return;
    std::vector<Propensity> pv;
    pv.reserve(subset.size());
    for (int i : subset) pv.push_back(p_map.values[static_cast<std::size_t>(i)]);
    auto sub_map = PropensityMap::from_values(std::move(pv));
    auto asg = local_randomize(psi2.select_rows(subset), sub_map, rng, opts.parallelism);
    if (asg.warn_small_stratum) r.warn_small_stratum = true;
    for (std::size_t t = 0; t < subset.size(); ++t)
      r.D[static_cast<std::size_t>(subset[t])] = asg.indicator[t];
    for (auto& g : asg.partition.groups)
      for (auto& u : g) u = subset[static_cast<std::size_t>(u)];
    r.assignment_partition.append(asg.partition);
  };

  if (opts.subordinate && !q_map.is_constant()) {
    std::map<std::pair<std::int64_t, std::int64_t>, std::vector<int>> by_q;
    for (int i : sampled) {
      const Propensity& p = q_map.values[static_cast<std::size_t>(i)];
      by_q[{p.num, p.den}].push_back(i);
    }
    int s = 0;
    for (const auto& [key, subset] : by_q) {
      Rng rng = rs.stream("assignment", static_cast<std::uint64_t>(s++));
      assign_subset(subset, rng);
    }
  } else {
    Rng rng = rs.stream("assignment");
    assign_subset(sampled, rng);
  }

  r.validate();
  return r;
}

}  // namespace stratakit
