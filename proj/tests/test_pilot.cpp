#include <catch2/catch_amalgamated.hpp>

#include <cmath>
#include <vector>

#include "stratakit/pilot.hpp"
#include "stratakit/rng.hpp"

using namespace stratakit;

namespace {

// Pilot where everyone is sampled (q = 1) and assignment alternates or is
// drawn Bernoulli(1/2); outcomes come from the supplied mean/sd functions.
PilotData make_pilot(std::size_t m, double (*mean_fn)(double), double (*sd_fn)(double),
                     Rng& rng) {
  PilotData p;
  p.psi = Matrix(m, 1);
  p.y.resize(m);
  p.T.assign(m, 1);
  p.D.resize(m);
  for (std::size_t i = 0; i < m; ++i) {
    const double x = -2.0 + 4.0 * (static_cast<double>(i) + 0.5) / static_cast<double>(m);
    p.psi(i, 0) = x;
    p.D[i] = static_cast<std::uint8_t>(i % 2);
    p.y[i] = mean_fn(x) + sd_fn(x) * rng.normal();
  }
  p.q_map = PropensityMap::constant(Propensity(1, 1), m);
  p.p_map = PropensityMap::constant(Propensity(1, 2), m);
  return p;
}

double corr(const std::vector<double>& a, const std::vector<double>& b) {
  const std::size_t n = a.size();
  double ma = 0.0, mb = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    ma += a[i];
    mb += b[i];
  }
  ma /= static_cast<double>(n);
  mb /= static_cast<double>(n);
  double sab = 0.0, saa = 0.0, sbb = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    sab += (a[i] - ma) * (b[i] - mb);
    saa += (a[i] - ma) * (a[i] - ma);
    sbb += (b[i] - mb) * (b[i] - mb);
  }
  return sab / std::sqrt(saa * sbb);
}

}  // namespace

TEST_CASE("homoskedastic pilot recovers a flat variance function") {
  Rng rng(20240817);
  auto mean_fn = [](double x) { return x; };
  auto sd_fn = [](double) { return 2.0; };
  const auto pilot = make_pilot(400, +mean_fn, +sd_fn, rng);

  Matrix main_psi(50, 1);
  for (std::size_t i = 0; i < 50; ++i)
    main_psi(i, 0) = -1.5 + 3.0 * static_cast<double>(i) / 49.0;

  const auto prof = estimate_variance_functions(pilot, main_psi, 20);
  REQUIRE(prof.size() == 50);
  CHECK(prof.source == VarianceProfile::Source::pilot);
  double m1 = 0.0, m0 = 0.0;
  for (std::size_t i = 0; i < 50; ++i) {
    m1 += prof.sigma1[i];
    m0 += prof.sigma0[i];
  }
  m1 /= 50.0;
  m0 /= 50.0;
  CHECK(m1 > 1.5);
  CHECK(m1 < 2.6);
  CHECK(m0 > 1.5);
  CHECK(m0 < 2.6);
}

TEST_CASE("heteroskedastic pilot tracks the variance shape") {
  Rng rng(20240818);
  auto mean_fn = [](double x) { return 0.5 * x; };
  auto sd_fn = [](double x) { return std::sqrt(0.25 + x * x); };
  const auto pilot = make_pilot(600, +mean_fn, +sd_fn, rng);

  Matrix main_psi(60, 1);
  std::vector<double> truth(60);
  for (std::size_t i = 0; i < 60; ++i) {
    const double x = -1.8 + 3.6 * static_cast<double>(i) / 59.0;
    main_psi(i, 0) = x;
    truth[i] = 0.25 + x * x;
  }
  const auto prof = estimate_variance_functions(pilot, main_psi, 25);
  std::vector<double> est1(60), est0(60);
  for (std::size_t i = 0; i < 60; ++i) {
    est1[i] = prof.sigma1[i] * prof.sigma1[i];
    est0[i] = prof.sigma0[i] * prof.sigma0[i];
  }
  CHECK(corr(est1, truth) > 0.6);
  CHECK(corr(est0, truth) > 0.6);
}

TEST_CASE("noiseless pilot clamps the variance estimate to a tiny positive floor") {
  // alternating arms on a line with constant outcomes: every 4-neighbor window
  // holds exactly two units of each arm, so the weighted mean is exact and all
  // residuals vanish
  const std::size_t m = 8;
  PilotData p;
  p.psi = Matrix(m, 1);
  p.y.assign(m, 5.0);
  p.T.assign(m, 1);
  p.D.resize(m);
  for (std::size_t i = 0; i < m; ++i) {
    p.psi(i, 0) = static_cast<double>(i);
    p.D[i] = static_cast<std::uint8_t>(i % 2);
  }
  p.q_map = PropensityMap::constant(Propensity(1, 1), m);
  p.p_map = PropensityMap::constant(Propensity(1, 2), m);

  Matrix main_psi(3, 1);
  main_psi(0, 0) = 0.0;
  main_psi(1, 0) = 3.5;
  main_psi(2, 0) = 7.0;
  const auto prof = estimate_variance_functions(p, main_psi, 4);
  CHECK_NOTHROW(prof.validate());
  for (std::size_t i = 0; i < 3; ++i) {
    CHECK(prof.sigma1[i] > 0.0);
    CHECK(prof.sigma1[i] < 1e-10);
    CHECK(prof.sigma0[i] > 0.0);
    CHECK(prof.sigma0[i] < 1e-10);
  }
}

TEST_CASE("variance estimation rejects malformed inputs") {
  Rng rng(1);
  auto mean_fn = [](double x) { return x; };
  auto sd_fn = [](double) { return 1.0; };
  auto pilot = make_pilot(40, +mean_fn, +sd_fn, rng);

  Matrix wrong_dim(10, 2);
  CHECK_THROWS_AS(estimate_variance_functions(pilot, wrong_dim), Error);

  Matrix ok(10, 1);
  auto none_sampled = pilot;
  std::fill(none_sampled.T.begin(), none_sampled.T.end(), std::uint8_t{0});
  CHECK_THROWS_AS(estimate_variance_functions(none_sampled, ok), Error);

  auto tiny_arm = pilot;
  for (std::size_t i = 0; i < tiny_arm.n(); ++i) tiny_arm.D[i] = (i < 2) ? 1 : 0;
  CHECK_THROWS_AS(estimate_variance_functions(tiny_arm, ok), Error);

  auto bad_len = pilot;
  bad_len.y.pop_back();
  CHECK_THROWS_AS(estimate_variance_functions(bad_len, ok), Error);
}

namespace {

// Small pilot with exactly controlled per-arm regression residuals: on the
// design x = (-1.5, -0.5, 0.5, 1.5) the vector (1, -1, -1, 1) is orthogonal to
// the intercept and slope, so OLS leaves it untouched and the root mean square
// residual equals the chosen scale.
PilotData exact_residual_pilot(double scale0, double scale1) {
  const double xs[4] = {-1.5, -0.5, 0.5, 1.5};
  const double es[4] = {1.0, -1.0, -1.0, 1.0};
  PilotData p;
  p.psi = Matrix(8, 1);
  p.y.resize(8);
  p.T.assign(8, 1);
  p.D.resize(8);
  for (int arm = 0; arm < 2; ++arm) {
    const double c = arm == 1 ? scale1 : scale0;
    for (int j = 0; j < 4; ++j) {
      const std::size_t i = static_cast<std::size_t>(arm * 4 + j);
      p.psi(i, 0) = xs[j];
      p.y[i] = xs[j] + c * es[j];
      p.D[i] = static_cast<std::uint8_t>(arm);
    }
  }
  p.q_map = PropensityMap::constant(Propensity(1, 1), 8);
  p.p_map = PropensityMap::constant(Propensity(1, 2), 8);
  return p;
}

}  // namespace

TEST_CASE("small pilot with equal arm spread lands on one half") {
  const auto p = exact_residual_pilot(1.0, 1.0);
  const auto r = small_pilot_constant(p, 10);
  CHECK(r.p == Propensity(1, 2));
  CHECK_FALSE(r.singular_fallback);
  CHECK_FALSE(r.coarse_grid_warning);
}

TEST_CASE("small pilot snaps the Neyman share to the rational grid") {
  // arm residual sds 1 and 7/3 give a target share of 0.7 exactly
  const auto p = exact_residual_pilot(1.0, 7.0 / 3.0);
  CHECK(small_pilot_constant(p, 10).p == Propensity(7, 10));
  // a denominator cap of 2 only offers 1/2
  CHECK(small_pilot_constant(p, 2).p == Propensity(1, 2));
}

TEST_CASE("small pilot warns when the grid outruns the main sample") {
  const auto p = exact_residual_pilot(1.0, 2.0);
  CHECK(small_pilot_constant(p, 20, 100).coarse_grid_warning);   // 400 > 100
  CHECK_FALSE(small_pilot_constant(p, 20, 500).coarse_grid_warning);
  CHECK_FALSE(small_pilot_constant(p, 20).coarse_grid_warning);  // unknown n
}

TEST_CASE("small pilot falls back to raw arm spreads when regression degenerates") {
  // constant covariate column makes the normal equations singular
  PilotData p;
  p.psi = Matrix(8, 1);
  p.y.resize(8);
  p.T.assign(8, 1);
  p.D.resize(8);
  const double y0[4] = {4.0, 6.0, 4.0, 6.0};          // sd 1 about the mean
  const double y1[4] = {0.0, 14.0 / 3.0, 0.0, 14.0 / 3.0};  // sd 7/3
  for (int arm = 0; arm < 2; ++arm)
    for (int j = 0; j < 4; ++j) {
      const std::size_t i = static_cast<std::size_t>(arm * 4 + j);
      p.psi(i, 0) = 1.0;
      p.y[i] = arm == 1 ? y1[j] : y0[j];
      p.D[i] = static_cast<std::uint8_t>(arm);
    }
  p.q_map = PropensityMap::constant(Propensity(1, 1), 8);
  p.p_map = PropensityMap::constant(Propensity(1, 2), 8);

  const auto r = small_pilot_constant(p, 10);
  CHECK(r.singular_fallback);
  CHECK(r.p == Propensity(7, 10));
}

TEST_CASE("small pilot rejects degenerate configurations") {
  auto p = exact_residual_pilot(1.0, 1.0);
  CHECK_THROWS_AS(small_pilot_constant(p, 1), Error);
  for (std::size_t i = 0; i < p.n(); ++i) p.D[i] = (i == 0) ? 1 : 0;
  CHECK_THROWS_AS(small_pilot_constant(p, 10), Error);
}

TEST_CASE("feasible design reproduces the constant-variance hand solution") {
  // sd 3 vs 1 in the two arms: Neyman share 3/4; flat costs at budget 1/2
  // leave a flat sampling share of 1/2
  VarianceProfile prof;
  prof.sigma1.assign(40, 3.0);
  prof.sigma0.assign(40, 1.0);
  const std::vector<double> costs(40, 1.0);
  const auto d = feasible_optimal_design(prof, costs, 0.5, 8, 8);
  REQUIRE(d.q_map.size() == 40);
  for (std::size_t i = 0; i < 40; ++i) {
    CHECK(d.p_map.values[i] == Propensity(3, 4));
    CHECK(d.q_map.values[i] == Propensity(1, 2));
  }
  CHECK_FALSE(d.budget_slack_exceeded);

  // forcing a constant treatment share changes nothing when sds are constant
  const auto dc = feasible_optimal_design(prof, costs, 0.5, 8, 8, true);
  CHECK(dc.p_map.values[0] == Propensity(3, 4));
}

TEST_CASE("sampling shares scale as inverse square root of cost") {
  VarianceProfile prof;
  prof.sigma1.assign(20, 1.0);
  prof.sigma0.assign(20, 1.0);
  std::vector<double> costs(20);
  for (std::size_t i = 0; i < 20; ++i) costs[i] = i < 10 ? 1.0 : 4.0;
  // q proportional to 1/sqrt(c) with mean spend 0.9: q = 0.6 then 0.3
  const auto d = feasible_optimal_design(prof, costs, 0.9, 10, 8);
  for (std::size_t i = 0; i < 10; ++i) CHECK(d.q_map.values[i] == Propensity(3, 5));
  for (std::size_t i = 10; i < 20; ++i) CHECK(d.q_map.values[i] == Propensity(3, 10));
  CHECK_FALSE(d.budget_slack_exceeded);
}

TEST_CASE("unreachable budget raises the slack flag") {
  VarianceProfile prof;
  prof.sigma1.assign(16, 1.0);
  prof.sigma0.assign(16, 1.0);
  const std::vector<double> costs(16, 1.0);
  // budget 2 per unit cannot be spent once every share clamps at 1
  const auto d = feasible_optimal_design(prof, costs, 2.0, 8, 8);
  for (std::size_t i = 0; i < 16; ++i) CHECK(d.q_map.values[i] == Propensity(1, 1));
  CHECK(d.budget_slack_exceeded);
}

TEST_CASE("feasible design is invariant to duplicating the unit list") {
  Rng rng(7);
  const std::size_t n = 30;
  VarianceProfile prof;
  prof.sigma1.resize(n);
  prof.sigma0.resize(n);
  std::vector<double> costs(n);
  for (std::size_t i = 0; i < n; ++i) {
    prof.sigma1[i] = 1.0 + std::abs(rng.normal());
    prof.sigma0[i] = 0.5 + std::abs(rng.normal());
    costs[i] = 0.5 + rng.uniform();
  }
  VarianceProfile dup;
  std::vector<double> dup_costs;
  for (int rep = 0; rep < 2; ++rep)
    for (std::size_t i = 0; i < n; ++i) {
      dup.sigma1.push_back(prof.sigma1[i]);
      dup.sigma0.push_back(prof.sigma0[i]);
      dup_costs.push_back(costs[i]);
    }
  const auto a = feasible_optimal_design(prof, costs, 0.4, 16, 8);
  const auto b = feasible_optimal_design(dup, dup_costs, 0.4, 16, 8);
  for (std::size_t i = 0; i < n; ++i) {
    CHECK(b.q_map.values[i] == a.q_map.values[i]);
    CHECK(b.q_map.values[i + n] == a.q_map.values[i]);
    CHECK(b.p_map.values[i] == a.p_map.values[i]);
  }
}

TEST_CASE("feasible design validates its inputs") {
  VarianceProfile prof;
  prof.sigma1.assign(4, 1.0);
  prof.sigma0.assign(4, 0.0);  // zero sd is rejected
  const std::vector<double> costs(4, 1.0);
  CHECK_THROWS_AS(feasible_optimal_design(prof, costs, 0.5, 8, 8), Error);
  prof.sigma0.assign(4, 1.0);
  CHECK_THROWS_AS(feasible_optimal_design(prof, costs, -1.0, 8, 8), Error);
}
