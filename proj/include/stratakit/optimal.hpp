#pragma once

#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstdint>
#include <limits>
#include <numeric>
#include <thread>
#include <vector>

#include "stratakit/core.hpp"
#include "stratakit/rng.hpp"

namespace stratakit {

// Per-unit conditional standard deviations of the two potential outcomes.
struct VarianceProfile {
  std::vector<double> sigma1;
  std::vector<double> sigma0;
  enum class Source { oracle, pilot } source = Source::oracle;

  std::size_t size() const { return sigma1.size(); }

  void validate() const {
    if (sigma1.size() != sigma0.size() || sigma1.empty())
      throw Error("variance profile arms must be nonempty and equal length");
    for (std::size_t i = 0; i < sigma1.size(); ++i)
      if (!(sigma1[i] > 0.0) || !(sigma0[i] > 0.0))
        throw Error("variance profile entries must be strictly positive");
  }
};

struct BudgetSpec {
  double B = 0.0;
  std::vector<double> costs;

  void validate() const {
    if (!(B > 0.0)) throw Error("budget must be positive");
    for (double c : costs)
      if (!(c > 0.0)) throw Error("costs must be strictly positive");
  }
};

// Unit-wise Neyman share: p*_i = s1_i / (s1_i + s0_i).
inline std::vector<double> neyman_propensity(const VarianceProfile& profile) {
  profile.validate();
  std::vector<double> p(profile.size());
  for (std::size_t i = 0; i < p.size(); ++i)
    p[i] = profile.sigma1[i] / (profile.sigma1[i] + profile.sigma0[i]);
  return p;
}

// Best single treatment share: sqrt(mean s1^2) / (sqrt(mean s1^2) + sqrt(mean s0^2)).
inline double optimal_constant_propensity(const VarianceProfile& profile) {
  profile.validate();
  double m1 = 0.0, m0 = 0.0;
  for (std::size_t i = 0; i < profile.size(); ++i) {
    m1 += profile.sigma1[i] * profile.sigma1[i];
    m0 += profile.sigma0[i] * profile.sigma0[i];
  }
  const double r1 = std::sqrt(m1 / static_cast<double>(profile.size()));
  const double r0 = std::sqrt(m0 / static_cast<double>(profile.size()));
  return r1 / (r1 + r0);
}

// Ex-ante residual standard deviation of enrolling unit i before assignment.
inline double ex_ante_sd(double s1, double s0, double p) {
  return std::sqrt(s1 * s1 / p + s0 * s0 / (1.0 - p));
}

// Budget-proportional sampling shares: q*_i = B * sbar_i c_i^{-1/2} / mean(sbar c^{1/2}).
// Values may exceed 1; apply feasibility_rounding afterwards.
inline std::vector<double> optimal_sampling_propensity(const VarianceProfile& profile,
                                                       const std::vector<double>& p,
                                                       const BudgetSpec& budget) {
  profile.validate();
  budget.validate();
  const std::size_t n = profile.size();
  if (p.size() != n || budget.costs.size() != n)
    throw Error("propensity and cost vectors must match the profile length");
  std::vector<double> sbar(n);
  double denom = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    if (!(p[i] > 0.0 && p[i] < 1.0)) throw Error("treatment propensity must be in (0,1)");
    sbar[i] = ex_ante_sd(profile.sigma1[i], profile.sigma0[i], p[i]);
    denom += sbar[i] * std::sqrt(budget.costs[i]);
  }
  denom /= static_cast<double>(n);
  std::vector<double> q(n);
  for (std::size_t i = 0; i < n; ++i)
    q[i] = budget.B * sbar[i] / (std::sqrt(budget.costs[i]) * denom);
  return q;
}

// Iterative rounding: clamp the largest q > 1 to 1, recompute the remaining
// shares proportionally against the residual budget, repeat. Preserves
// mean(q*c) = B exactly at every step.
inline std::vector<double> feasibility_rounding(const std::vector<double>& q_in,
                                                const std::vector<double>& costs,
                                                double B) {
  const std::size_t n = q_in.size();
  if (costs.size() != n) throw Error("cost vector length mismatch");
  {
    double spent = 0.0;
    for (std::size_t i = 0; i < n; ++i) spent += q_in[i] * costs[i];
    spent /= static_cast<double>(n);
    if (std::abs(spent - B) > 1e-9 * std::max(1.0, std::abs(B)))
      throw Error("input shares do not meet the budget: mean(q*c) = " +
                  std::to_string(spent) + ", B = " + std::to_string(B));
  }
  std::vector<double> q = q_in;
  std::vector<std::uint8_t> frozen(n, 0);
  for (;;) {
    std::size_t worst = n;
    double worst_q = 1.0;
    for (std::size_t i = 0; i < n; ++i)
      if (!frozen[i] && q[i] > worst_q) {
        worst_q = q[i];
        worst = i;
      }
    if (worst == n) break;
    q[worst] = 1.0;
    frozen[worst] = 1;

    double frozen_cost = 0.0;
    std::size_t n_frozen = 0;
    for (std::size_t i = 0; i < n; ++i)
      if (frozen[i]) {
        frozen_cost += costs[i];
        ++n_frozen;
      }
    if (n_frozen == n) {
      // everyone sampled; affordable only if B >= mean cost
      const double spent = frozen_cost / static_cast<double>(n);
      if (spent > B * (1.0 + 1e-9))
        throw Error("infeasible budget: sampling everyone costs " +
                    std::to_string(spent) + " > B = " + std::to_string(B));
      break;
    }
    const double frac = static_cast<double>(n_frozen) / static_cast<double>(n);
    const double residual = (B - frozen_cost / static_cast<double>(n)) / (1.0 - frac);
    if (!(residual > 0.0))
      throw Error("infeasible budget: residual per-unit budget nonpositive after "
                  "freezing " + std::to_string(n_frozen) + " units");
    // rescale unfrozen shares so their sub-mean of q*c equals the residual
    double sub = 0.0;
    std::size_t n_free = n - n_frozen;
    for (std::size_t i = 0; i < n; ++i)
      if (!frozen[i]) sub += q[i] * costs[i];
    sub /= static_cast<double>(n_free);
    const double scale = residual / sub;
    for (std::size_t i = 0; i < n; ++i)
      if (!frozen[i]) q[i] *= scale;
  }
  return q;
}

namespace detail {

// Nearest fraction a/k_max in (0,1] to x; equidistant ties go to the smaller.
inline Propensity nearest_rational(double x, std::int64_t k_max) {
  std::int64_t a = static_cast<std::int64_t>(std::floor(x * static_cast<double>(k_max)));
  // pick between a/k_max and (a+1)/k_max
  const double lo = static_cast<double>(a) / static_cast<double>(k_max);
  const double hi = static_cast<double>(a + 1) / static_cast<double>(k_max);
  std::int64_t best = (x - lo <= hi - x) ? a : a + 1;  // tie -> smaller
  best = std::clamp<std::int64_t>(best, 1, k_max);
  return Propensity(best, k_max);
}

}  // namespace detail

// Approximate real shares by at most L_max rational levels of the form
// a/k_max, minimizing mean squared error. Exact via dynamic programming over
// the sorted values (optimal clusters are contiguous intervals).
inline PropensityMap discretize_propensity(const std::vector<double>& q, std::int64_t k_max,
                                           int L_max) {
  const std::size_t n = q.size();
  if (n == 0) throw Error("discretize_propensity: empty input");
  if (k_max < 2 || L_max < 1) throw Error("discretize_propensity: need k_max >= 2, L_max >= 1");
  for (double v : q)
    if (!(v > 0.0 && v <= 1.0)) throw Error("shares must lie in (0,1]");

  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(),
                   [&](std::size_t a, std::size_t b) { return q[a] < q[b]; });
  std::vector<double> s(n);
  for (std::size_t t = 0; t < n; ++t) s[t] = q[order[t]];

  // prefix sums for interval cost against the best rational representative
  std::vector<double> ps(n + 1, 0.0), ps2(n + 1, 0.0);
  for (std::size_t t = 0; t < n; ++t) {
    ps[t + 1] = ps[t] + s[t];
    ps2[t + 1] = ps2[t] + s[t] * s[t];
  }
  auto interval_cost = [&](std::size_t i, std::size_t j, Propensity* rep) {
    // best representative is the rational nearest the interval mean
    const double cnt = static_cast<double>(j - i);
    const double mean = (ps[j] - ps[i]) / cnt;
    const Propensity r = detail::nearest_rational(mean, k_max);
    if (rep) *rep = r;
    const double v = r.value();
    return (ps2[j] - ps2[i]) - 2.0 * v * (ps[j] - ps[i]) + cnt * v * v;
  };

  const int L = std::min<int>(L_max, static_cast<int>(n));
  constexpr double kInf = std::numeric_limits<double>::infinity();
  std::vector<std::vector<double>> dp(static_cast<std::size_t>(L) + 1,
                                      std::vector<double>(n + 1, kInf));
  std::vector<std::vector<std::size_t>> cut(static_cast<std::size_t>(L) + 1,
                                            std::vector<std::size_t>(n + 1, 0));
  dp[0][0] = 0.0;
  for (int l = 1; l <= L; ++l)
    for (std::size_t j = 1; j <= n; ++j)
      for (std::size_t i = static_cast<std::size_t>(l) - 1; i < j; ++i) {
        if (dp[static_cast<std::size_t>(l) - 1][i] == kInf) continue;
        const double c =
            dp[static_cast<std::size_t>(l) - 1][i] + interval_cost(i, j, nullptr);
        if (c < dp[static_cast<std::size_t>(l)][j]) {
          dp[static_cast<std::size_t>(l)][j] = c;
          cut[static_cast<std::size_t>(l)][j] = i;
        }
      }
  int best_l = 1;
  for (int l = 2; l <= L; ++l)
    if (dp[static_cast<std::size_t>(l)][n] < dp[static_cast<std::size_t>(best_l)][n] - 1e-15)
      best_l = l;

  std::vector<Propensity> vals(n, Propensity(1, 1));
  std::size_t j = n;
  for (int l = best_l; l >= 1; --l) {
    const std::size_t i = cut[static_cast<std::size_t>(l)][j];
    Propensity rep(1, 1);
    interval_cost(i, j, &rep);
    for (std::size_t t = i; t < j; ++t) vals[order[t]] = rep;
    j = i;
  }
  return PropensityMap::from_values(std::move(vals));
}

// Two-point randomization over an imbalance-optimal allocation and its
// mirror: d* minimizes ((d - 1/2)' h)^2, found exactly for n <= 24 or by
// best-of-restarts local search (single flips and pairwise swaps).
struct AlternatingDesign {
  std::vector<std::uint8_t> d_star;
  double objective = 0.0;       // ((d* - 1/2)' h)^2
  std::vector<std::uint8_t> d;  // realized draw: d* or its mirror
};

inline AlternatingDesign alternating_design(const std::vector<double>& h, bool exact,
                                            Rng& rng, int restarts = 64,
                                            int parallelism = 1) {
  const std::size_t n = h.size();
  if (n == 0) throw Error("alternating_design: empty balance vector");
  const double half_sum = 0.5 * std::accumulate(h.begin(), h.end(), 0.0);

  auto objective_of = [&](const std::vector<std::uint8_t>& d) {
    double s = -half_sum;
    for (std::size_t i = 0; i < n; ++i)
      if (d[i]) s += h[i];
    return s * s;
  };

  AlternatingDesign out;
  if (exact) {
    if (n > 24) throw Error("exact mode supports n <= 24");
    double best = std::numeric_limits<double>::infinity();
    std::uint32_t best_mask = 0;
    for (std::uint32_t mask = 0; mask < (1u << n); ++mask) {
      double s = -half_sum;
      for (std::size_t i = 0; i < n; ++i)
        if (mask & (1u << i)) s += h[i];
      const double obj = s * s;
      if (obj < best) {
        best = obj;
        best_mask = mask;
      }
    }
    out.d_star.assign(n, 0);
    for (std::size_t i = 0; i < n; ++i) out.d_star[i] = (best_mask >> i) & 1u;
    out.objective = best;
  } else {
    struct Candidate {
      double obj = std::numeric_limits<double>::infinity();
      std::vector<std::uint8_t> d;
    };
    std::vector<Candidate> results(static_cast<std::size_t>(restarts));
    std::vector<Rng> streams;
    streams.reserve(static_cast<std::size_t>(restarts));
    for (int r = 0; r < restarts; ++r) {
      std::uint64_t x = rng.next();
      streams.emplace_back(x);
    }
    auto run_restart = [&](int r) {
      Rng& lr = streams[static_cast<std::size_t>(r)];
      std::vector<std::uint8_t> d(n);
      for (std::size_t i = 0; i < n; ++i) d[i] = lr.bernoulli(0.5) ? 1 : 0;
      double s = -half_sum;
      for (std::size_t i = 0; i < n; ++i)
        if (d[i]) s += h[i];
      bool improved = true;
      while (improved) {
        improved = false;
        for (std::size_t i = 0; i < n; ++i) {  // single flips
          const double ns = d[i] ? s - h[i] : s + h[i];
          if (ns * ns < s * s - 1e-15) {
            d[i] ^= 1;
            s = ns;
            improved = true;
          }
        }
        for (std::size_t i = 0; i < n && !improved; ++i)  // pair swaps
          for (std::size_t j2 = i + 1; j2 < n; ++j2) {
            if (d[i] == d[j2]) continue;
            const double delta = d[i] ? h[j2] - h[i] : h[i] - h[j2];
            const double ns = s + delta;
            if (ns * ns < s * s - 1e-15) {
              d[i] ^= 1;
              d[j2] ^= 1;
              s = ns;
              improved = true;
              break;
            }
          }
      }
      results[static_cast<std::size_t>(r)] = {s * s, std::move(d)};
    };
    if (parallelism > 1) {
      std::vector<std::thread> workers;
      std::atomic_int next{0};
      const int nw = std::min(parallelism, restarts);
      for (int w = 0; w < nw; ++w)
        workers.emplace_back([&] {
          for (int r = next.fetch_add(1); r < restarts; r = next.fetch_add(1))
            run_restart(r);
        });
      for (auto& t : workers) t.join();
    } else {
      for (int r = 0; r < restarts; ++r) run_restart(r);
    }
    int best = 0;  // ties by restart index: deterministic reduction
    for (int r = 1; r < restarts; ++r)
      if (results[static_cast<std::size_t>(r)].obj <
          results[static_cast<std::size_t>(best)].obj - 1e-15)
        best = r;
    out.d_star = std::move(results[static_cast<std::size_t>(best)].d);
    out.objective = objective_of(out.d_star);
  }

  out.d = out.d_star;
  if (rng.bernoulli(0.5))
    for (auto& b : out.d) b ^= 1;  // mirror
  return out;
}

}  // namespace stratakit
