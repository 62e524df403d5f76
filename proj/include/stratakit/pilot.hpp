#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <numeric>
#include <vector>

#include "stratakit/core.hpp"
#include "stratakit/optimal.hpp"

namespace stratakit {

namespace detail {

// Brute-force k-nearest-neighbor regression: mean response of the k closest
// training points. Pilot sizes are small, so no index structure is needed.
class KnnRegressor {
 public:
  KnnRegressor(Matrix x, std::vector<double> y, int k)
      : x_(std::move(x)), y_(std::move(y)), k_(k) {
    if (k_ < 1 || static_cast<std::size_t>(k_) > y_.size())
      throw Error("k_neighbors out of range");
  }

  double predict(const double* query) const {
    const std::size_t m = x_.rows(), d = x_.cols();
    std::vector<std::pair<double, std::size_t>> dist(m);
    for (std::size_t i = 0; i < m; ++i) dist[i] = {sq_dist(x_.row(i), query, d), i};
    std::partial_sort(dist.begin(), dist.begin() + k_, dist.end());
    double s = 0.0;
    for (int t = 0; t < k_; ++t) s += y_[dist[static_cast<std::size_t>(t)].second];
    return s / static_cast<double>(k_);
  }

 private:
  Matrix x_;
  std::vector<double> y_;
  int k_;
};

// 5-fold cross-validated k from a small grid, deterministic fold split by
// index stride.
inline int select_knn_k(const Matrix& x, const std::vector<double>& y) {
  const std::size_t m = y.size();
  std::vector<int> grid;
  for (int k : {3, 5, 10, 20, 40, 80})
    if (static_cast<std::size_t>(k) < m) grid.push_back(k);
  if (grid.empty()) return std::max<int>(1, static_cast<int>(m) - 1);
  int best_k = grid.front();
  double best_mse = std::numeric_limits<double>::infinity();
  for (int k : grid) {
    double sse = 0.0;
    std::size_t cnt = 0;
    for (int fold = 0; fold < 5; ++fold) {
      std::vector<int> train;
      std::vector<int> test;
      for (std::size_t i = 0; i < m; ++i)
        (static_cast<int>(i % 5) == fold ? test : train).push_back(static_cast<int>(i));
      if (train.size() <= static_cast<std::size_t>(k) || test.empty()) continue;
      std::vector<double> ytr;
      ytr.reserve(train.size());
      for (int i : train) ytr.push_back(y[static_cast<std::size_t>(i)]);
      KnnRegressor reg(x.select_rows(train), std::move(ytr), k);
      for (int i : test) {
        const double e = reg.predict(x.row(static_cast<std::size_t>(i))) -
                         y[static_cast<std::size_t>(i)];
        sse += e * e;
        ++cnt;
      }
    }
    if (cnt == 0) continue;
    const double mse = sse / static_cast<double>(cnt);
    if (mse < best_mse - 1e-15) {
      best_mse = mse;
      best_k = k;
    }
  }
  return best_k;
}

// Least-squares solve of (X'X) b = X'y with an intercept prepended; returns
// false when the normal equations are numerically singular.
inline bool ols_fit(const Matrix& x, const std::vector<double>& y,
                    const std::vector<int>& rows, std::vector<double>& beta) {
  const std::size_t d = x.cols() + 1;
  std::vector<double> xtx(d * d, 0.0), xty(d, 0.0);
  std::vector<double> row(d);
  for (int r : rows) {
    row[0] = 1.0;
    for (std::size_t j = 1; j < d; ++j) row[j] = x(static_cast<std::size_t>(r), j - 1);
    for (std::size_t a = 0; a < d; ++a) {
      xty[a] += row[a] * y[static_cast<std::size_t>(r)];
      for (std::size_t b = 0; b < d; ++b) xtx[a * d + b] += row[a] * row[b];
    }
  }
  double scale = 0.0;
  for (std::size_t a = 0; a < d; ++a) scale = std::max(scale, std::abs(xtx[a * d + a]));
  if (scale == 0.0) return false;
  // Gaussian elimination with partial pivoting
  for (std::size_t c = 0; c < d; ++c) {
    std::size_t piv = c;
    for (std::size_t r2 = c + 1; r2 < d; ++r2)
      if (std::abs(xtx[r2 * d + c]) > std::abs(xtx[piv * d + c])) piv = r2;
    if (std::abs(xtx[piv * d + c]) < 1e-11 * scale) return false;
    if (piv != c) {
      for (std::size_t j = 0; j < d; ++j) std::swap(xtx[c * d + j], xtx[piv * d + j]);
      std::swap(xty[c], xty[piv]);
    }
    for (std::size_t r2 = c + 1; r2 < d; ++r2) {
      const double f = xtx[r2 * d + c] / xtx[c * d + c];
      for (std::size_t j = c; j < d; ++j) xtx[r2 * d + j] -= f * xtx[c * d + j];
      xty[r2] -= f * xty[c];
    }
  }
  beta.assign(d, 0.0);
  for (std::size_t c = d; c-- > 0;) {
    double s = xty[c];
    for (std::size_t j = c + 1; j < d; ++j) s -= xtx[c * d + j] * beta[j];
    beta[c] = s / xtx[c * d + c];
  }
  return true;
}

}  // namespace detail

// A pilot experiment: units, realized design vectors, observed outcomes, and
// the propensities the pilot was run with.
struct PilotData {
  Matrix psi;
  std::vector<double> y;
  std::vector<std::uint8_t> T;
  std::vector<std::uint8_t> D;
  PropensityMap q_map;
  PropensityMap p_map;

  std::size_t n() const { return psi.rows(); }

  void validate() const {
    const std::size_t m = n();
    if (y.size() != m || T.size() != m || D.size() != m || q_map.size() != m ||
        p_map.size() != m)
      throw Error("pilot data vectors must all have the pilot length");
  }
};

// Two-stage weighted nearest-neighbor estimation of the arm-wise conditional
// variance functions, evaluated at the main-experiment covariates.
// k_neighbors = 0 selects k by 5-fold cross-validation.
inline VarianceProfile estimate_variance_functions(const PilotData& pilot,
                                                   const Matrix& main_psi,
                                                   int k_neighbors = 0) {
  pilot.validate();
  const std::size_t m = pilot.n();
  if (main_psi.cols() != pilot.psi.cols())
    throw Error("main covariates must match the pilot dimension");

  double y_mean = 0.0, y_var = 0.0;
  std::size_t n_obs = 0;
  for (std::size_t i = 0; i < m; ++i)
    if (pilot.T[i]) {
      y_mean += pilot.y[i];
      ++n_obs;
    }
  if (n_obs == 0) throw Error("pilot has no sampled units");
  y_mean /= static_cast<double>(n_obs);
  for (std::size_t i = 0; i < m; ++i)
    if (pilot.T[i]) y_var += (pilot.y[i] - y_mean) * (pilot.y[i] - y_mean);
  y_var /= static_cast<double>(n_obs);
  const double floor = std::max(1e-6 * y_var, 1e-300);

  VarianceProfile out;
  out.source = VarianceProfile::Source::pilot;
  out.sigma1.resize(main_psi.rows());
  out.sigma0.resize(main_psi.rows());

  for (int arm = 0; arm < 2; ++arm) {
    std::size_t arm_count = 0;
    std::vector<double> ytil(m, 0.0);
    for (std::size_t i = 0; i < m; ++i) {
      if (!pilot.T[i] || static_cast<int>(pilot.D[i]) != arm) continue;
      ++arm_count;
      const double p = pilot.p_map.value(i);
      const double pw = arm == 1 ? p : 1.0 - p;
      ytil[i] = pilot.y[i] / (pw * pilot.q_map.value(i));
    }
    if (arm_count < 3) throw Error("pilot arm " + std::to_string(arm) + " has too few units");
    const int k = k_neighbors > 0 ? k_neighbors : detail::select_knn_k(pilot.psi, ytil);
    if (static_cast<std::size_t>(k) > arm_count)
      throw Error("pilot arm " + std::to_string(arm) + " smaller than k_neighbors");
    detail::KnnRegressor mu(pilot.psi, ytil, k);

    std::vector<double> eps2(m, 0.0);
    for (std::size_t i = 0; i < m; ++i) {
      if (!pilot.T[i] || static_cast<int>(pilot.D[i]) != arm) continue;
      const double mu_hat = mu.predict(pilot.psi.row(i));
      const double r = pilot.y[i] - mu_hat;
      const double p = pilot.p_map.value(i);
      const double pw = arm == 1 ? p : 1.0 - p;
      eps2[i] = r * r / (pw * pilot.q_map.value(i));
    }
    detail::KnnRegressor zeta(pilot.psi, eps2, k);
    auto& sig = arm == 1 ? out.sigma1 : out.sigma0;
    for (std::size_t i = 0; i < main_psi.rows(); ++i)
      sig[i] = std::sqrt(std::max(zeta.predict(main_psi.row(i)), floor));
  }
  return out;
}

struct FeasibleDesign {
  PropensityMap q_map;
  PropensityMap p_map;
  bool budget_slack_exceeded = false;  // discretized plan misses B by > 5%/k_max
};

// Turn a variance profile into implementable rational propensity maps:
// Neyman treatment shares (or the best constant), budget-proportional
// sampling shares, iterative feasibility rounding, then discretization.
inline FeasibleDesign feasible_optimal_design(const VarianceProfile& profile,
                                              const std::vector<double>& costs, double B,
                                              std::int64_t k_max, int L_max,
                                              bool constant_p = false) {
  profile.validate();
  const std::size_t n = profile.size();
  BudgetSpec budget{B, costs};
  budget.validate();

  std::vector<double> p(n);
  if (constant_p) {
    std::fill(p.begin(), p.end(), optimal_constant_propensity(profile));
  } else {
    p = neyman_propensity(profile);
  }
  auto q = optimal_sampling_propensity(profile, p, budget);
  q = feasibility_rounding(q, costs, B);

  FeasibleDesign out;
  // keep treatment shares strictly interior after discretization
  std::vector<double> p_clamped(n);
  const double hi = 1.0 - 0.5 / static_cast<double>(k_max);
  const double lo = 0.5 / static_cast<double>(k_max);
  for (std::size_t i = 0; i < n; ++i) p_clamped[i] = std::clamp(p[i], lo, hi);
  out.p_map = discretize_propensity(p_clamped, k_max, L_max);
  out.q_map = discretize_propensity(q, k_max, L_max);

  double spent = 0.0;
  for (std::size_t i = 0; i < n; ++i) spent += out.q_map.value(i) * costs[i];
  spent /= static_cast<double>(n);
  // discretizing to a grid of pitch 1/k_max can move spend by about a grid
  // step; anything beyond 5% + one step is worth flagging
  if (std::abs(spent - B) > B * (0.05 + 1.0 / static_cast<double>(k_max)))
    out.budget_slack_exceeded = true;
  return out;
}

struct SmallPilotResult {
  Propensity p{1, 2};
  bool singular_fallback = false;  // regression degenerate; used raw arm SDs
  bool coarse_grid_warning = false;  // k_max^2 > n_main: grid likely too fine
};

// Constant treatment share from a small pilot: per-arm linear regressions,
// root-mean-square residuals, Neyman ratio, then the nearest fraction with
// denominator <= k_max (ties toward 1/2).
inline SmallPilotResult small_pilot_constant(const PilotData& pilot, std::int64_t k_max,
                                             std::size_t n_main = 0) {
  pilot.validate();
  if (k_max < 2) throw Error("k_max must be >= 2");
  SmallPilotResult out;
  double s[2] = {0.0, 0.0};
  for (int arm = 0; arm < 2; ++arm) {
    std::vector<int> rows;
    for (std::size_t i = 0; i < pilot.n(); ++i)
      if (pilot.T[i] && static_cast<int>(pilot.D[i]) == arm)
        rows.push_back(static_cast<int>(i));
    if (rows.size() < 2) throw Error("pilot arm " + std::to_string(arm) + " has < 2 units");
    std::vector<double> beta;
    double ss = 0.0;
    if (detail::ols_fit(pilot.psi, pilot.y, rows, beta)) {
      for (int r : rows) {
        double pred = beta[0];
        for (std::size_t j = 0; j < pilot.psi.cols(); ++j)
          pred += beta[j + 1] * pilot.psi(static_cast<std::size_t>(r), j);
        const double e = pilot.y[static_cast<std::size_t>(r)] - pred;
        ss += e * e;
      }
    } else {
      out.singular_fallback = true;
      double mean = 0.0;
      for (int r : rows) mean += pilot.y[static_cast<std::size_t>(r)];
      mean /= static_cast<double>(rows.size());
      for (int r : rows) {
        const double e = pilot.y[static_cast<std::size_t>(r)] - mean;
        ss += e * e;
      }
    }
    s[arm] = std::sqrt(ss / static_cast<double>(rows.size()));
  }
  double target = 0.5;
  if (s[0] + s[1] > 0.0) target = s[1] / (s[0] + s[1]);

  // nearest fraction with denominator <= k_max; ties resolve toward 1/2
  Propensity best(1, 2);
  double best_err = std::numeric_limits<double>::infinity();
  for (std::int64_t k = 2; k <= k_max; ++k)
    for (std::int64_t a = 1; a < k; ++a) {
      const double v = static_cast<double>(a) / static_cast<double>(k);
      const double err = std::abs(v - target);
      const bool closer = err < best_err - 1e-15;
      const bool tie = std::abs(err - best_err) <= 1e-15 &&
                       std::abs(v - 0.5) < std::abs(best.value() - 0.5) - 1e-15;
      if (closer || tie) {
        best_err = err;
        best = Propensity(a, k);
      }
    }
  out.p = best;
  if (n_main > 0 && static_cast<std::size_t>(k_max * k_max) > n_main)
    out.coarse_grid_warning = true;
  return out;
}

}  // namespace stratakit
