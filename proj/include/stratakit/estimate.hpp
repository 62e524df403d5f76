#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <string>
#include <vector>

#include "stratakit/core.hpp"
#include "stratakit/matching.hpp"

namespace stratakit {

// Standard normal CDF.
inline double normal_cdf(double x) { return 0.5 * std::erfc(-x / std::sqrt(2.0)); }

// Inverse standard normal CDF, Wichura's rational approximation (accurate to
// ~1e-15 over the full range).
inline double inverse_normal_cdf(double p) {
  if (!(p > 0.0 && p < 1.0)) throw Error("inverse_normal_cdf needs p in (0,1)");
  const double q = p - 0.5;
  double r;
  if (std::abs(q) <= 0.425) {
    r = 0.180625 - q * q;
    return q *
           (((((((2.5090809287301226727e3 * r + 3.3430575583588128105e4) * r +
                 6.7265770927008700853e4) * r + 4.5921953931549871457e4) * r +
               1.3731693765509461125e4) * r + 1.9715909503065514427e3) * r +
             1.3314166789178437745e2) * r + 3.3871328727963666080e0) /
           (((((((5.2264952788528545610e3 * r + 2.8729085735721942674e4) * r +
                 3.9307895800092710610e4) * r + 2.1213794301586595867e4) * r +
               5.3941960214247511077e3) * r + 6.8718700749205790830e2) * r +
             4.2313330701600911252e1) * r + 1.0);
  }
  r = q < 0.0 ? p : 1.0 - p;
  r = std::sqrt(-std::log(r));
  double v;
  if (r <= 5.0) {
    r -= 1.6;
    v = (((((((7.74545014278341407640e-4 * r + 2.27238449892691845833e-2) * r +
              2.41780725177450611770e-1) * r + 1.27045825245236838258e0) * r +
            3.64784832476320460504e0) * r + 5.76949722146069140550e0) * r +
          4.63033784615654529590e0) * r + 1.42343711074968357734e0) /
        (((((((1.05075007164441684324e-9 * r + 5.47593808499534494600e-4) * r +
              1.51986665636164571966e-2) * r + 1.48103976427480074590e-1) * r +
            6.89767334985100004550e-1) * r + 1.67638483018380384940e0) * r +
          2.05319162663775882187e0) * r + 1.0);
  } else {
    r -= 5.0;
    v = (((((((2.01033439929228813265e-7 * r + 2.71155556874348757815e-5) * r +
              1.24266094738807843860e-3) * r + 2.65321895265761230930e-2) * r +
            2.96560571828504891230e-1) * r + 1.78482653991729133580e0) * r +
          5.46378491116411436990e0) * r + 6.65790464350110377720e0) /
        (((((((2.04426310338993978564e-15 * r + 1.42151175831644588870e-7) * r +
              1.84631831751005468180e-5) * r + 7.86869131145613259100e-4) * r +
            1.48753612908506148525e-2) * r + 1.36929880922735805310e-1) * r +
          5.99832206555887937690e-1) * r + 1.0);
  }
  return q < 0.0 ? -v : v;
}

struct EstimateReport {
  double theta_hat = 0.0;
  double V_hat = 0.0;
  double sample_var = 0.0;
  double V1 = 0.0;
  double V0 = 0.0;
  double V01 = 0.0;
  double ci_lo = 0.0;
  double ci_hi = 0.0;
  double alpha = 0.05;
  std::size_t n_eligible = 0;
  std::size_t n_sampled = 0;
  bool variance_floored = false;
  bool remainder_heavy = false;
  bool subvector_warning = false;
};

inline double difference_of_means(const std::vector<double>& y,
                                  const std::vector<std::uint8_t>& D,
                                  const std::vector<std::uint8_t>& T) {
  double s1 = 0.0, s0 = 0.0;
  std::size_t n1 = 0, n0 = 0;
  for (std::size_t i = 0; i < y.size(); ++i) {
    if (!T[i]) continue;
    if (D[i]) {
      s1 += y[i];
      ++n1;
    } else {
      s0 += y[i];
      ++n0;
    }
  }
  if (n1 == 0 || n0 == 0) throw Error("difference_of_means: an arm is empty");
  return s1 / static_cast<double>(n1) - s0 / static_cast<double>(n0);
}

namespace detail {

inline void check_interior_p(const std::vector<std::uint8_t>& T,
                             const PropensityMap& p_map) {
  for (std::size_t i = 0; i < T.size(); ++i)
    if (T[i] && p_map.values[i].num == p_map.values[i].den)
      throw Error("treatment propensity must be strictly inside (0,1) for sampled units");
}

}  // namespace detail

// IPW estimator reweighting for both sampling and assignment, averaged over
// all eligible units.
inline double double_ipw(const std::vector<double>& y, const std::vector<std::uint8_t>& D,
                         const std::vector<std::uint8_t>& T, const PropensityMap& q_map,
                         const PropensityMap& p_map) {
  const std::size_t n = y.size();
  if (D.size() != n || T.size() != n || q_map.size() != n || p_map.size() != n)
    throw Error("double_ipw: length mismatch");
  detail::check_interior_p(T, p_map);
  double s = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    if (!T[i]) continue;
    const double q = q_map.value(i), p = p_map.value(i);
    s += D[i] ? y[i] / (q * p) : -y[i] / (q * (1.0 - p));
  }
  return s / static_cast<double>(n);
}

// Doubly-augmented IPW: regression predictions (cross-fit by the caller)
// absorb the explainable part; the IPW term corrects the residuals.
inline double aipw2(const std::vector<double>& y, const std::vector<std::uint8_t>& D,
                    const std::vector<std::uint8_t>& T, const PropensityMap& q_map,
                    const PropensityMap& p_map, const std::vector<double>& mu1_hat,
                    const std::vector<double>& mu0_hat) {
  const std::size_t n = y.size();
  if (mu1_hat.size() != n || mu0_hat.size() != n) throw Error("aipw2: prediction length mismatch");
  detail::check_interior_p(T, p_map);
  double s = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    s += mu1_hat[i] - mu0_hat[i];
    if (!T[i]) continue;
    const double q = q_map.value(i), p = p_map.value(i);
    s += D[i] ? (y[i] - mu1_hat[i]) / (q * p) : -(y[i] - mu0_hat[i]) / (q * (1.0 - p));
  }
  return s / static_cast<double>(n);
}

struct VarianceComponents {
  double sample_var = 0.0;
  double V1 = 0.0;
  double V0 = 0.0;
  double V01 = 0.0;
  double V_hat = 0.0;
  bool variance_floored = false;
  bool remainder_heavy = false;
};

namespace detail {

struct UnionGroup {
  std::vector<int> units;
  std::int64_t treated = 0;
  std::int64_t control = 0;
};

// Build union pseudo-strata from the pairing, dropping degenerate remainder
// groups (no treated or no control unit) from the collapse.
inline std::vector<UnionGroup> build_unions(const GroupPartition& part,
                                            const GroupPairing& mu,
                                            const std::vector<std::uint8_t>& D,
                                            bool* remainder_heavy) {
  std::vector<UnionGroup> out;
  for (const auto& u : mu.unions) {
    UnionGroup g;
    for (int gi : u) {
      bool any1 = false, any0 = false;
      for (int i : part.groups[static_cast<std::size_t>(gi)]) {
        if (D[static_cast<std::size_t>(i)])
          any1 = true;
        else
          any0 = true;
      }
      if (part.is_remainder[static_cast<std::size_t>(gi)] && (!any1 || !any0)) {
        if (remainder_heavy) *remainder_heavy = true;
        continue;  // degenerate leftover group: excluded from the collapse
      }
      for (int i : part.groups[static_cast<std::size_t>(gi)]) {
        g.units.push_back(i);
        if (D[static_cast<std::size_t>(i)])
          ++g.treated;
        else
          ++g.control;
      }
    }
    if (!g.units.empty()) out.push_back(std::move(g));
  }
  return out;
}

}  // namespace detail

// Collapsed-strata variance: pair matched assignment groups into pseudo-
// strata and estimate the squared-mean corrections the naive sample variance
// overstates. Normalized by the eligible count n.
inline VarianceComponents collapsed_strata_variance(
    const std::vector<double>& y, const std::vector<std::uint8_t>& D,
    const std::vector<std::uint8_t>& T, const PropensityMap& q_map,
    const PropensityMap& p_map, const GroupPartition& assignment_partition,
    const GroupPairing& mu) {
  const std::size_t n = y.size();
  if (D.size() != n || T.size() != n) throw Error("collapsed_strata_variance: length mismatch");
  detail::check_interior_p(T, p_map);

  VarianceComponents out;
  const double dn = static_cast<double>(n);

  // sample variance of the per-unit IPW score (population denominator n)
  {
    double s = 0.0, s2 = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
      double sc = 0.0;
      if (T[i]) {
        const double q = q_map.value(i), p = p_map.value(i);
        sc = (static_cast<double>(D[i]) - p) * y[i] / (q * p * (1.0 - p));
      }
      s += sc;
      s2 += sc * sc;
    }
    const double mean = s / dn;
    out.sample_var = s2 / dn - mean * mean;
  }

  const auto unions = detail::build_unions(assignment_partition, mu, D, &out.remainder_heavy);

  auto w1 = [&](std::size_t i) {
    const double q = q_map.value(i), p = p_map.value(i);
    return (1.0 - p * q) / ((p * q) * (p * q));
  };
  auto w0 = [&](std::size_t i) {
    const double q = q_map.value(i), p = p_map.value(i);
    const double qc = q * (1.0 - p);
    return (1.0 - qc) / (qc * qc);
  };

  for (const auto& g : unions) {
    if (g.treated <= 1 || g.control <= 1)
      throw Error("collapsed stratum needs >= 2 units per arm; a union has " +
                  std::to_string(g.treated) + " treated, " + std::to_string(g.control) +
                  " control");
    double t_sum = 0.0, t_sq = 0.0, c_sum = 0.0, c_sq = 0.0;
    for (int i : g.units) {
      const std::size_t ui = static_cast<std::size_t>(i);
      if (D[ui]) {
        const double v = y[ui] * std::sqrt(w1(ui));
        t_sum += v;
        t_sq += v * v;
      } else {
        const double v = y[ui] * std::sqrt(w0(ui));
        c_sum += v;
        c_sq += v * v;
      }
    }
    out.V1 += (t_sum * t_sum - t_sq) / static_cast<double>(g.treated - 1);
    out.V0 += (c_sum * c_sum - c_sq) / static_cast<double>(g.control - 1);
  }
  out.V1 /= dn;
  out.V0 /= dn;

  // cross term over the original groups, realized counts
  for (std::size_t gi = 0; gi < assignment_partition.groups.size(); ++gi) {
    const auto& grp = assignment_partition.groups[gi];
    std::int64_t a = 0;
    for (int i : grp) a += D[static_cast<std::size_t>(i)];
    const std::int64_t k = static_cast<std::int64_t>(grp.size());
    if (a == 0 || a == k) continue;  // no cross pairs in this group
    double t_sum = 0.0, c_sum = 0.0;
    for (int i : grp) {
      const std::size_t ui = static_cast<std::size_t>(i);
      const double v = y[ui] / std::sqrt(q_map.value(ui));
      if (D[ui])
        t_sum += v;
      else
        c_sum += v;
    }
    out.V01 += static_cast<double>(k) / static_cast<double>(a * (k - a)) * t_sum * c_sum;
  }
  out.V01 /= dn;

  out.V_hat = out.sample_var - out.V1 - out.V0 - 2.0 * out.V01;
  if (out.V_hat <= 0.0) {
    out.V_hat = 0.01 * out.sample_var;
    out.variance_floored = true;
    if (out.V_hat <= 0.0) out.V_hat = std::numeric_limits<double>::min();
  }
  return out;
}

inline std::pair<double, double> confidence_interval(double theta_hat, double V_hat,
                                                     std::size_t n_eligible,
                                                     double alpha) {
  if (!(alpha > 0.0 && alpha < 1.0)) throw Error("alpha must lie in (0,1)");
  if (!(V_hat > 0.0)) throw Error("V_hat must be positive");
  const double z = inverse_normal_cdf(1.0 - alpha / 2.0);
  const double hw = z * std::sqrt(V_hat / static_cast<double>(n_eligible));
  return {theta_hat - hw, theta_hat + hw};
}

// Conservative variance for the in-sample (all-eligible) average effect:
// start from the collapsed-strata variance and subtract the identified lower
// bound q_bar * (sigma1 - sigma0)^2 on the effect-heterogeneity term. Arm
// variances are pooled within-union sample variances.
inline double sate_variance_bound(const std::vector<double>& y,
                                  const std::vector<std::uint8_t>& D,
                                  const std::vector<std::uint8_t>& T,
                                  const PropensityMap& q_map, const PropensityMap& p_map,
                                  const GroupPartition& assignment_partition,
                                  const GroupPairing& mu) {
  const auto comp =
      collapsed_strata_variance(y, D, T, q_map, p_map, assignment_partition, mu);
  bool heavy = false;
  const auto unions = detail::build_unions(assignment_partition, mu, D, &heavy);
  double ss1 = 0.0, ss0 = 0.0;
  double df1 = 0.0, df0 = 0.0;
  for (const auto& g : unions) {
    double m1 = 0.0, m0 = 0.0;
    for (int i : g.units) {
      const std::size_t ui = static_cast<std::size_t>(i);
      (D[ui] ? m1 : m0) += y[ui];
    }
    m1 /= static_cast<double>(g.treated);
    m0 /= static_cast<double>(g.control);
    for (int i : g.units) {
      const std::size_t ui = static_cast<std::size_t>(i);
      if (D[ui])
        ss1 += (y[ui] - m1) * (y[ui] - m1);
      else
        ss0 += (y[ui] - m0) * (y[ui] - m0);
    }
    df1 += static_cast<double>(g.treated - 1);
    df0 += static_cast<double>(g.control - 1);
  }
  const double s1 = df1 > 0.0 ? std::sqrt(ss1 / df1) : 0.0;
  const double s0 = df0 > 0.0 ? std::sqrt(ss0 / df0) : 0.0;
  const double q_bar = q_map.mean();
  const double bound = q_bar * std::max(0.0, s1 * s1 + s0 * s0 - 2.0 * s1 * s0);
  double V = comp.V_hat - bound;
  if (V <= 0.0) V = 0.01 * comp.sample_var;
  if (V <= 0.0) V = std::numeric_limits<double>::min();
  return V;
}

struct BalanceDiagnostic {
  double beta_hat = 0.0;
  double se = 0.0;
  double p_value = 1.0;
};

// Slope and HC1 heteroskedasticity-robust p-value of f ~ 1 + D among sampled
// units. For a binary regressor this is the difference of arm means.
inline BalanceDiagnostic balance_diagnostic(const std::vector<double>& f,
                                            const std::vector<std::uint8_t>& D,
                                            const std::vector<std::uint8_t>& T) {
  double s1 = 0.0, s0 = 0.0;
  std::size_t n1 = 0, n0 = 0;
  for (std::size_t i = 0; i < f.size(); ++i) {
    if (!T[i]) continue;
    if (D[i]) {
      s1 += f[i];
      ++n1;
    } else {
      s0 += f[i];
      ++n0;
    }
  }
  if (n1 == 0 || n0 == 0) throw Error("balance_diagnostic: an arm is empty");
  const double m1 = s1 / static_cast<double>(n1);
  const double m0 = s0 / static_cast<double>(n0);
  double e1 = 0.0, e0 = 0.0;
  for (std::size_t i = 0; i < f.size(); ++i) {
    if (!T[i]) continue;
    if (D[i])
      e1 += (f[i] - m1) * (f[i] - m1);
    else
      e0 += (f[i] - m0) * (f[i] - m0);
  }
  const double ns = static_cast<double>(n1 + n0);
  const double hc1 = ns > 2.0 ? ns / (ns - 2.0) : 1.0;
  BalanceDiagnostic out;
  out.beta_hat = m1 - m0;
  const double var = hc1 * (e1 / (static_cast<double>(n1) * static_cast<double>(n1)) +
                            e0 / (static_cast<double>(n0) * static_cast<double>(n0)));
  out.se = std::sqrt(var);
  if (out.se > 0.0)
    out.p_value = 2.0 * (1.0 - normal_cdf(std::abs(out.beta_hat) / out.se));
  else
    out.p_value = out.beta_hat == 0.0 ? 1.0 : 0.0;
  return out;
}

// Drop groups with no treated or no control unit (possible only for
// remainder or degenerate groups) so the collapse sees two units per arm in
// every union. Returns the filtered partition and whether anything was cut.
inline std::pair<GroupPartition, bool> filter_degenerate_groups(
    const GroupPartition& part, const std::vector<std::uint8_t>& D) {
  GroupPartition out;
  bool dropped = false;
  for (std::size_t g = 0; g < part.groups.size(); ++g) {
    bool any1 = false, any0 = false;
    for (int i : part.groups[g]) (D[static_cast<std::size_t>(i)] ? any1 : any0) = true;
    if (!any1 || !any0) {
      dropped = true;
      continue;
    }
    out.groups.push_back(part.groups[g]);
    out.stratum_of_group.push_back(part.stratum_of_group[g]);
    out.is_remainder.push_back(part.is_remainder[g]);
  }
  return {out, dropped};
}

// Full inference pipeline: double-IPW point estimate, collapsed-strata
// variance via a fresh group pairing on psi2, and the normal CI.
inline EstimateReport estimate_design(const std::vector<double>& y, const DesignResult& r,
                                      const Matrix& psi2, double alpha = 0.05) {
  EstimateReport rep;
  rep.alpha = alpha;
  rep.n_eligible = y.size();
  rep.n_sampled = r.n_sampled();
  rep.subvector_warning = r.warn_subvector;
  rep.theta_hat = double_ipw(y, r.D, r.T, r.q_map, r.p_map);
  auto [part, dropped] = filter_degenerate_groups(r.assignment_partition, r.D);
  if (part.groups.size() < 2)
    throw Error("collapsed-strata inference needs at least 2 usable assignment groups");
  const auto mu = pair_groups(part, psi2);
  const auto comp =
      collapsed_strata_variance(y, r.D, r.T, r.q_map, r.p_map, part, mu);
  rep.remainder_heavy = dropped;
  rep.sample_var = comp.sample_var;
  rep.V1 = comp.V1;
  rep.V0 = comp.V0;
  rep.V01 = comp.V01;
  rep.V_hat = comp.V_hat;
  rep.variance_floored = comp.variance_floored;
  rep.remainder_heavy = dropped || comp.remainder_heavy;
  const auto ci = confidence_interval(rep.theta_hat, rep.V_hat, rep.n_eligible, alpha);
  rep.ci_lo = ci.first;
  rep.ci_hi = ci.second;
  return rep;
}

}  // namespace stratakit
