#pragma once

#include <algorithm>
#include <atomic>
#include <cctype>
#include <cmath>
#include <cstdint>
#include <mutex>
#include <numbers>
#include <numeric>
#include <stdexcept>
#include <string>
#include <thread>
#include <vector>

#include "stratakit/core.hpp"
#include "stratakit/estimate.hpp"
#include "stratakit/matching.hpp"
#include "stratakit/optimal.hpp"
#include "stratakit/pilot.hpp"
#include "stratakit/randomize.hpp"
#include "stratakit/rng.hpp"

namespace stratakit {

// Synthetic benchmark population. Covariates are uniform on a cube; outcomes
// are y_d = mu_d(psi) + sqrt(zeta_d(psi)) * eps with unit-variance residuals
// (zeta_d is the conditional outcome variance).
struct DgpSpec {
  int model_id = 1;  // 1..6
  std::size_t n = 800;
  int nu = 2;

  void validate() const {
    if (model_id < 1 || model_id > 6) throw Error("model_id must be in 1..6");
    if (n < 2 || nu < 1) throw Error("need n >= 2 and nu >= 1");
  }

  double psi_half_width() const { return model_id == 6 ? std::numbers::pi : 1.0; }

  double mu1(const double* psi) const {
    const int v = nu;
    double s = 0.0;
    switch (model_id) {
      case 1:
      case 2:
      case 3: {
        double lin = 0.0, tot = 0.0;
        for (int m = 0; m < v; ++m) {
          lin += 3.0 / static_cast<double>(m + 1) * psi[m];
          tot += psi[m];
        }
        return lin + 0.5 * tot * tot;
      }
      case 4: {
        double lin = 0.0, tot = 0.0;
        for (int m = 0; m < v; ++m) {
          lin += 3.0 / static_cast<double>(m + 1) * psi[m];
          tot += psi[m];
        }
        return lin + 2.0 * tot * tot;
      }
      case 5: {
        double lin = 0.0;
        for (int m = 0; m < v; ++m) lin += 10.0 / static_cast<double>(m + 1) * psi[m];
        return 5.0 * (0.5 + std::atan(lin) / std::numbers::pi);
      }
      case 6: {
        for (int m = 0; m < v; ++m) s += 4.0 * std::sin(psi[m]) + 2.0 * psi[m];
        return s;
      }
    }
    return 0.0;
  }

  double mu0(const double* psi) const {
    switch (model_id) {
      case 4: {
        double lin = 0.0;
        for (int m = 0; m < nu; ++m) lin += 2.0 / static_cast<double>(m + 1) * psi[m];
        return lin;
      }
      case 5:
        return mu1(psi);  // same coefficients and link: zero treatment effect
      case 6: {
        double s = 0.0;
        for (int m = 0; m < nu; ++m) s += 2.0 * std::cos(psi[m]);
        return s;
      }
      default:
        return 0.0;  // beta_0 = 0
    }
  }

  double zeta1(const double* psi) const {
    switch (model_id) {
      case 1:
        return 9.0;
      case 2:
      case 4: {
        double s2 = 0.0;
        for (int m = 0; m < nu; ++m) s2 += psi[m] * psi[m];
        return 5.0 + 30.0 * s2 / static_cast<double>(nu);
      }
      case 3:
      case 5:
        return 2.0;
      case 6:
        return 6.0;
    }
    return 1.0;
  }

  double zeta0(const double* psi) const {
    switch (model_id) {
      case 1:
        return 1.0;
      case 2:
      case 4:
        return 5.0;
      case 3:
      case 5:
        return 2.0;
      case 6:
        return 6.0;
    }
    return 1.0;
  }

  double cost(const double* psi) const {
    switch (model_id) {
      case 1:
      case 5:
      case 6:
        return psi[0] <= 0.0 ? 1.0 : 10.0;
      case 2:
        return psi[0] <= 0.0 ? 1.0 : 4.0;
      case 3:
      case 4: {
        double s2 = 0.0;
        for (int m = 0; m < nu; ++m) s2 += psi[m] * psi[m];
        return 0.5 + 10.0 * s2 / static_cast<double>(nu);
      }
    }
    return 1.0;
  }

  double budget() const {
    switch (model_id) {
      case 2:
        return 1.0;
      case 3:
      case 4:
        return 2.0;
      default:
        return 4.0;
    }
  }

  Propensity baseline_p() const {
    switch (model_id) {
      case 2:
      case 5:
        return Propensity(1, 2);
      case 6:
        return Propensity(3, 10);
      default:
        return Propensity(3, 8);  // models 1, 3, 4
    }
  }

  bool uniform_residuals() const { return model_id == 2; }

  double true_ate() const {
    // E[psi'Q psi] = Q_scale * nu * Var(psi_1) for the quadratic models;
    // the trigonometric and shared-link models center at zero.
    switch (model_id) {
      case 1:
      case 2:
      case 3:
        return static_cast<double>(nu) / 6.0;
      case 4:
        return 2.0 * static_cast<double>(nu) / 3.0;
      default:
        return 0.0;
    }
  }
};

inline UnitTable generate_dgp(const DgpSpec& spec, Rng& rng) {
  spec.validate();
  const double hw = spec.psi_half_width();
  UnitTable t;
  t.psi1 = Matrix(spec.n, static_cast<std::size_t>(spec.nu));
  t.cost.resize(spec.n);
  t.y0.resize(spec.n);
  t.y1.resize(spec.n);
  const double u_scale = std::sqrt(3.0);  // U[-1,1] has variance 1/3
  for (std::size_t i = 0; i < spec.n; ++i) {
    for (int j = 0; j < spec.nu; ++j)
      t.psi1(i, static_cast<std::size_t>(j)) = hw * (2.0 * rng.uniform() - 1.0);
    const double* psi = t.psi1.row(i);
    const double e0 = spec.uniform_residuals() ? u_scale * (2.0 * rng.uniform() - 1.0)
                                               : rng.normal();
    const double e1 = spec.uniform_residuals() ? u_scale * (2.0 * rng.uniform() - 1.0)
                                               : rng.normal();
    t.y0[i] = spec.mu0(psi) + std::sqrt(spec.zeta0(psi)) * e0;
    t.y1[i] = spec.mu1(psi) + std::sqrt(spec.zeta1(psi)) * e1;
    t.cost[i] = spec.cost(psi);
  }
  return t;
}

// Monte Carlo estimate of the population ATE; used to cross-check the
// closed forms and to pin the registry values for the nonlinear models.
inline double mc_ate(const DgpSpec& spec, std::size_t draws, std::uint64_t seed) {
  Rng rng(seed);
  const double hw = spec.psi_half_width();
  std::vector<double> psi(static_cast<std::size_t>(spec.nu));
  double s = 0.0;
  for (std::size_t t = 0; t < draws; ++t) {
    for (int j = 0; j < spec.nu; ++j)
      psi[static_cast<std::size_t>(j)] = hw * (2.0 * rng.uniform() - 1.0);
    s += spec.mu1(psi.data()) - spec.mu0(psi.data());
  }
  return s / static_cast<double>(draws);
}

enum class DesignId { CR, CR_Loc, Loc, Hom, Opt, PilotS, PilotL };

inline std::string design_name(DesignId d) {
  switch (d) {
    case DesignId::CR: return "CR";
    case DesignId::CR_Loc: return "CR_Loc";
    case DesignId::Loc: return "Loc";
    case DesignId::Hom: return "Hom";
    case DesignId::Opt: return "Opt";
    case DesignId::PilotS: return "PilotS";
    case DesignId::PilotL: return "PilotL";
  }
  return "?";
}

inline DesignId parse_design(const std::string& s) {
  std::string t;
  for (char c : s) t += static_cast<char>(std::tolower(static_cast<unsigned char>(c)));
  if (t == "cr") return DesignId::CR;
  if (t == "crloc" || t == "cr_loc" || t == "cr,loc") return DesignId::CR_Loc;
  if (t == "loc") return DesignId::Loc;
  if (t == "hom") return DesignId::Hom;
  if (t == "opt") return DesignId::Opt;
  if (t == "pilots" || t == "pilot:100") return DesignId::PilotS;
  if (t == "pilotl" || t == "pilot:400") return DesignId::PilotL;
  throw Error("unknown design '" + s + "'");
}

// Budget-exhausting constant sampling share a/k, minimal k whose grid hits
// mean cost times share within 5% of the budget.
inline Propensity budget_exhausting_share(double mean_cost, double B) {
  const double target = B / mean_cost;
  for (std::int64_t k = 1; k <= 64; ++k) {
    std::int64_t best_a = 0;
    double best_err = std::numeric_limits<double>::infinity();
    for (std::int64_t a = 1; a <= k; ++a) {
      const double spend = static_cast<double>(a) / static_cast<double>(k) * mean_cost;
      if (spend < 0.95 * B || spend > 1.05 * B) continue;
      const double err = std::abs(static_cast<double>(a) / static_cast<double>(k) - target);
      if (err < best_err) {
        best_err = err;
        best_a = a;
      }
    }
    if (best_a > 0) return Propensity(best_a, k);
  }
  throw Error("no rational share with denominator <= 64 lands within 5% of the budget");
}

struct SimConfig {
  std::int64_t k_max = 8;
  int levels_max = 3;
  double alpha = 0.05;
  int parallelism = 1;
};

namespace detail {

// Discretization can push the expected spend of a varying-q design past the
// +5% budget window that the constant-share rule enforces. Walk propensity
// levels down the 1/k_max grid until the window holds again, preferring the
// step that lands closest to the budget from below the cap.
inline void cap_discrete_budget(PropensityMap& q_map, const std::vector<double>& costs,
                                double B, std::int64_t k_max) {
  const std::size_t n = q_map.size();
  auto spend = [&]() {
    double s = 0.0;
    for (std::size_t i = 0; i < n; ++i) s += q_map.values[i].value() * costs[i];
    return s / static_cast<double>(n);
  };
  while (spend() > 1.05 * B) {
    // candidate: lower one distinct level by 1/k_max
    std::vector<Propensity> levels = q_map.levels;
    double best_spend = -1.0;
    Propensity best_from(1, 2), best_to(1, 2);
    bool found = false;
    for (const Propensity& lv : levels) {
      const std::int64_t steps = lv.num * k_max / lv.den;  // lv as multiple of 1/k_max
      if (steps <= 1) continue;
      const Propensity lowered(steps - 1, k_max);
      double s = 0.0;
      for (std::size_t i = 0; i < n; ++i)
        s += (q_map.values[i] == lv ? lowered.value() : q_map.values[i].value()) * costs[i];
      s /= static_cast<double>(n);
      // prefer the highest spend that obeys the cap; otherwise the largest cut
      const bool ok = s <= 1.05 * B;
      const bool best_ok = best_spend >= 0.0 && best_spend <= 1.05 * B;
      if (!found || (ok && (!best_ok || s > best_spend)) ||
          (!ok && !best_ok && s < best_spend)) {
        found = true;
        best_spend = s;
        best_from = lv;
        best_to = lowered;
      }
    }
    if (!found) return;  // every level already at the grid floor
    std::vector<Propensity> vals = q_map.values;
    for (auto& v : vals)
      if (v == best_from) v = best_to;
    q_map = PropensityMap::from_values(std::move(vals));
  }
}

// Local randomization of the sampled subset, mapped back to full-length
// vectors and partitions.
inline void assign_local(const Matrix& psi, const std::vector<int>& sampled,
                         const PropensityMap& p_all, Rng& rng, DesignResult& r,
                         int parallelism) {
  std::vector<Propensity> pv;
  pv.reserve(sampled.size());
  for (int i : sampled) pv.push_back(p_all.values[static_cast<std::size_t>(i)]);
  auto sub_map = PropensityMap::from_values(std::move(pv));
  auto asg = local_randomize(psi.select_rows(sampled), sub_map, rng, parallelism);
  for (std::size_t t = 0; t < sampled.size(); ++t)
    r.D[static_cast<std::size_t>(sampled[t])] = asg.indicator[t];
  for (auto& g : asg.partition.groups)
    for (auto& u : g) u = sampled[static_cast<std::size_t>(u)];
  r.assignment_partition.append(asg.partition);
  if (asg.warn_small_stratum) r.warn_small_stratum = true;
}

}  // namespace detail

// Execute one design on one generated population. All randomness comes from
// the passed RandomSource, so reruns are bit-identical.
inline DesignResult run_design(const DgpSpec& spec, const UnitTable& table, DesignId id,
                               RandomSource& rs, const SimConfig& cfg = {}) {
  const std::size_t n = table.n();
  const double mean_cost =
      std::accumulate(table.cost.begin(), table.cost.end(), 0.0) / static_cast<double>(n);
  const double B = spec.budget();
  const Propensity p_base = spec.baseline_p();

  DesignResult r;
  r.seed = rs.seed();
  r.T.assign(n, 0);
  r.D.assign(n, 0);

  PropensityMap q_map, p_map;
  const Propensity q_const = budget_exhausting_share(mean_cost, B);

  switch (id) {
    case DesignId::CR:
    case DesignId::CR_Loc:
    case DesignId::Loc:
      q_map = PropensityMap::constant(q_const, n);
      p_map = PropensityMap::constant(p_base, n);
      break;
    case DesignId::Hom: {
      VarianceProfile prof;
      prof.sigma1.assign(n, 1.0);
      prof.sigma0.assign(n, 1.0);
      std::vector<double> p(n, p_base.value());
      auto q = optimal_sampling_propensity(prof, p, BudgetSpec{B, table.cost});
      q = feasibility_rounding(q, table.cost, B);
      q_map = discretize_propensity(q, cfg.k_max, cfg.levels_max);
      detail::cap_discrete_budget(q_map, table.cost, B, cfg.k_max);
      p_map = PropensityMap::constant(p_base, n);
      break;
    }
    case DesignId::Opt: {
      VarianceProfile prof;
      prof.sigma1.resize(n);
      prof.sigma0.resize(n);
      for (std::size_t i = 0; i < n; ++i) {
        prof.sigma1[i] = std::sqrt(spec.zeta1(table.psi1.row(i)));
        prof.sigma0[i] = std::sqrt(spec.zeta0(table.psi1.row(i)));
      }
      auto fd = feasible_optimal_design(prof, table.cost, B, cfg.k_max, cfg.levels_max,
                                        /*constant_p=*/true);
      q_map = fd.q_map;
      detail::cap_discrete_budget(q_map, table.cost, B, cfg.k_max);
      p_map = fd.p_map;
      break;
    }
    case DesignId::PilotS:
    case DesignId::PilotL: {
      const std::size_t n_pilot = id == DesignId::PilotS ? 100 : 400;
      DgpSpec pilot_spec = spec;
      pilot_spec.n = n_pilot;
      Rng prng = rs.stream("pilot-dgp");
      UnitTable ptab = generate_dgp(pilot_spec, prng);
      PilotData pd;
      pd.psi = ptab.psi1;
      pd.q_map = PropensityMap::constant(Propensity(1, 1), n_pilot);
      pd.p_map = PropensityMap::constant(Propensity(1, 2), n_pilot);
      pd.T.assign(n_pilot, 1);
      Rng arng = rs.stream("pilot-assign");
      auto asg = local_randomize(ptab.psi1, pd.p_map, arng, cfg.parallelism);
      pd.D = asg.indicator;
      pd.y.resize(n_pilot);
      for (std::size_t i = 0; i < n_pilot; ++i)
        pd.y[i] = pd.D[i] ? ptab.y1[i] : ptab.y0[i];
      auto prof = estimate_variance_functions(pd, table.psi1);
      auto fd = feasible_optimal_design(prof, table.cost, B, cfg.k_max, cfg.levels_max,
                                        /*constant_p=*/true);
      q_map = fd.q_map;
      detail::cap_discrete_budget(q_map, table.cost, B, cfg.k_max);
      p_map = fd.p_map;
      break;
    }
  }
  r.q_map = q_map;
  r.p_map = p_map;

  // stage 1: sampling
  std::vector<int> sampled;
  if (id == DesignId::CR || id == DesignId::CR_Loc) {
    Rng srng = rs.stream("cr-sampling");
    r.T = complete_randomize(n, q_const, srng);
  } else {
    Rng srng = rs.stream("sampling");
    auto samp = local_randomize(table.psi1, q_map, srng, cfg.parallelism);
    r.T = std::move(samp.indicator);
    r.sampling_partition = std::move(samp.partition);
    r.warn_small_stratum = samp.warn_small_stratum;
  }
  for (std::size_t i = 0; i < n; ++i)
    if (r.T[i]) sampled.push_back(static_cast<int>(i));
  if (sampled.empty()) throw Error("design sampled no units");

  // stage 2: assignment
  if (id == DesignId::CR) {
    Rng arng = rs.stream("cr-assignment");
    auto d_sub = complete_randomize(sampled.size(), p_map.values[0], arng);
    for (std::size_t t = 0; t < sampled.size(); ++t)
      r.D[static_cast<std::size_t>(sampled[t])] = d_sub[t];
  } else {
    Rng arng = rs.stream("assignment");
    detail::assign_local(table.psi1, sampled, p_map, arng, r, cfg.parallelism);
  }
  r.validate();
  return r;
}

// Inference for a realized design: collapsed-strata variance when matched
// assignment groups exist. Under complete randomization the same formula is
// applied with a single pseudo-stratum holding all sampled units, which
// reproduces the classical mean-centered (Neyman) variance.
inline EstimateReport estimate_sim(const std::vector<double>& y, const DesignResult& r,
                                   const Matrix& psi, double alpha) {
  if (!r.assignment_partition.groups.empty() && r.assignment_partition.groups.size() >= 2)
    return estimate_design(y, r, psi, alpha);

  EstimateReport rep;
  rep.alpha = alpha;
  rep.n_eligible = y.size();
  rep.n_sampled = r.n_sampled();
  rep.theta_hat = double_ipw(y, r.D, r.T, r.q_map, r.p_map);

  GroupPartition one;
  std::vector<int> sampled;
  for (std::size_t i = 0; i < y.size(); ++i)
    if (r.T[i]) sampled.push_back(static_cast<int>(i));
  one.groups.push_back(std::move(sampled));
  one.stratum_of_group.push_back(r.p_map.values.empty() ? Propensity(1, 2)
                                                        : r.p_map.values[0]);
  one.is_remainder.push_back(false);
  GroupPairing mu;
  mu.unions.push_back({0});
  const auto comp =
      collapsed_strata_variance(y, r.D, r.T, r.q_map, r.p_map, one, mu);
  rep.sample_var = comp.sample_var;
  rep.V1 = comp.V1;
  rep.V0 = comp.V0;
  rep.V01 = comp.V01;
  rep.V_hat = comp.V_hat;
  rep.variance_floored = comp.variance_floored;
  const auto ci = confidence_interval(rep.theta_hat, rep.V_hat, rep.n_eligible, alpha);
  rep.ci_lo = ci.first;
  rep.ci_hi = ci.second;
  return rep;
}

struct DesignMetrics {
  DesignId id = DesignId::CR;
  double sd = 0.0;
  double sd_ratio = 1.0;       // vs CR
  double mean_ci_len = 0.0;
  double pct_delta_ci = 0.0;   // vs CR, in percent
  double coverage = 0.0;
  double mean_n_sampled = 0.0;
  double mean_theta = 0.0;
};

struct ComparisonTable {
  std::vector<DesignMetrics> rows;
  double true_ate = 0.0;
  std::size_t reps = 0;
};

// Monte Carlo design comparison. Each rep draws one population shared by all
// designs; each (design, rep) pair consumes its own named random stream, so
// results are identical for any thread count.
inline ComparisonTable run_design_comparison(const DgpSpec& spec,
                                             const std::vector<DesignId>& designs,
                                             std::size_t reps, std::uint64_t seed,
                                             const SimConfig& cfg = {}) {
  spec.validate();
  if (reps < 1) throw Error("reps must be >= 1");
  if (std::find(designs.begin(), designs.end(), DesignId::CR) == designs.end())
    throw Error("design list must include CR as the baseline");

  const double ate = spec.true_ate();
  const RandomSource rs(seed);
  const std::size_t nd = designs.size();

  struct Cell {
    double theta = 0.0, ci_len = 0.0, n_sampled = 0.0;
    bool cover = false;
  };
  std::vector<Cell> cells(reps * nd);
  std::atomic<std::size_t> next{0};
  std::vector<std::string> errors;
  std::mutex err_mu;

  auto worker = [&] {
    for (std::size_t rep = next.fetch_add(1); rep < reps; rep = next.fetch_add(1)) {
      try {
        Rng trng = rs.stream("dgp", rep);
        const UnitTable table = generate_dgp(spec, trng);
        for (std::size_t d = 0; d < nd; ++d) {
          RandomSource drs(rs.stream("design-" + design_name(designs[d]), rep).next());
          const DesignResult dr = run_design(spec, table, designs[d], drs, cfg);
          std::vector<double> y(table.n(), 0.0);
          for (std::size_t i = 0; i < table.n(); ++i)
            if (dr.T[i]) y[i] = dr.D[i] ? table.y1[i] : table.y0[i];
          const EstimateReport er = estimate_sim(y, dr, table.psi1, cfg.alpha);
          Cell& c = cells[rep * nd + d];
          c.theta = er.theta_hat;
          c.ci_len = er.ci_hi - er.ci_lo;
          c.cover = er.ci_lo <= ate && ate <= er.ci_hi;
          c.n_sampled = static_cast<double>(dr.n_sampled());
        }
      } catch (const std::exception& e) {
        std::lock_guard<std::mutex> lk(err_mu);
        errors.push_back("rep " + std::to_string(rep) + ": " + e.what());
      }
    }
  };
  const int nw = std::max(1, cfg.parallelism);
  if (nw > 1) {
    std::vector<std::thread> threads;
    for (int w = 0; w < nw; ++w) threads.emplace_back(worker);
    for (auto& t : threads) t.join();
  } else {
    worker();
  }
  if (!errors.empty()) throw Error("simulation failed: " + errors.front());

  ComparisonTable out;
  out.true_ate = ate;
  out.reps = reps;
  double cr_sd = 1.0, cr_ci = 1.0;
  for (std::size_t d = 0; d < nd; ++d) {
    DesignMetrics m;
    m.id = designs[d];
    double s = 0.0, s2 = 0.0, ci = 0.0, cov = 0.0, ns = 0.0;
    for (std::size_t rep = 0; rep < reps; ++rep) {
      const Cell& c = cells[rep * nd + d];
      s += c.theta;
      s2 += c.theta * c.theta;
      ci += c.ci_len;
      cov += c.cover ? 1.0 : 0.0;
      ns += c.n_sampled;
    }
    const double dr = static_cast<double>(reps);
    m.mean_theta = s / dr;
    m.sd = std::sqrt(std::max(0.0, s2 / dr - m.mean_theta * m.mean_theta));
    m.mean_ci_len = ci / dr;
    m.coverage = cov / dr;
    m.mean_n_sampled = ns / dr;
    if (designs[d] == DesignId::CR) {
      cr_sd = m.sd;
      cr_ci = m.mean_ci_len;
    }
    out.rows.push_back(m);
  }
  for (auto& m : out.rows) {
    m.sd_ratio = cr_sd > 0.0 ? m.sd / cr_sd : 1.0;
    m.pct_delta_ci = cr_ci > 0.0 ? 100.0 * (m.mean_ci_len / cr_ci - 1.0) : 0.0;
  }
  return out;
}

// Fill in both potential outcomes from an observed experiment by borrowing
// the nearest covariate neighbor's outcome in the opposite arm (ties go to
// the lowest index).
inline UnitTable impute_panel(const UnitTable& observed, const std::vector<std::uint8_t>& D) {
  const std::size_t n = observed.n();
  if (observed.y_obs.size() != n || D.size() != n)
    throw Error("impute_panel needs observed outcomes and assignments for every unit");
  bool any1 = false, any0 = false;
  for (std::size_t i = 0; i < n; ++i) (D[i] ? any1 : any0) = true;
  if (!any1 || !any0) throw Error("impute_panel: an arm is empty");

  UnitTable out = observed;
  out.y0.resize(n);
  out.y1.resize(n);
  const std::size_t dcols = observed.psi1.cols();
  for (std::size_t i = 0; i < n; ++i) {
    for (int d = 0; d < 2; ++d) {
      if (static_cast<int>(D[i]) == d) {
        (d ? out.y1[i] : out.y0[i]) = observed.y_obs[i];
        continue;
      }
      double best = std::numeric_limits<double>::infinity();
      std::size_t best_j = n;
      for (std::size_t j = 0; j < n; ++j) {
        if (static_cast<int>(D[j]) != d) continue;
        const double dist = sq_dist(observed.psi1.row(i), observed.psi1.row(j), dcols);
        if (dist < best) {
          best = dist;
          best_j = j;
        }
      }
      (d ? out.y1[i] : out.y0[i]) = observed.y_obs[best_j];
    }
  }
  return out;
}

}  // namespace stratakit
