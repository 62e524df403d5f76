#include <catch2/catch_amalgamated.hpp>

#include <cmath>
#include <vector>

#include "stratakit/sim.hpp"

using namespace stratakit;

namespace {

struct Moments {
  double mean = 0.0;
  double var = 0.0;
};

Moments moments(const std::vector<double>& v) {
  Moments m;
  const double n = static_cast<double>(v.size());
  for (double x : v) m.mean += x;
  m.mean /= n;
  for (double x : v) m.var += (x - m.mean) * (x - m.mean);
  m.var /= n;
  return m;
}

}  // namespace

TEST_CASE("benchmark populations match their closed-form treatment effects") {
  const std::size_t n = 100000;
  for (int model = 1; model <= 6; ++model) {
    DgpSpec spec;
    spec.model_id = model;
    spec.n = n;
    spec.nu = 2;
    Rng rng(static_cast<std::uint64_t>(1000 + model));
    const UnitTable t = generate_dgp(spec, rng);
    std::vector<double> diff(n);
    for (std::size_t i = 0; i < n; ++i) diff[i] = t.y1[i] - t.y0[i];
    const Moments m = moments(diff);
    const double se = std::sqrt(m.var / static_cast<double>(n));
    INFO("model " << model);
    CHECK(std::abs(m.mean - spec.true_ate()) < 5.0 * se);
  }
}

TEST_CASE("population moments for the flat-variance model are right") {
  DgpSpec spec;  // model 1, nu = 2
  spec.n = 100000;
  Rng rng(42);
  const UnitTable t = generate_dgp(spec, rng);
  const Moments m1 = moments(t.y1);
  const Moments m0 = moments(t.y0);
  // mean of arm 1 is nu/6; its variance is Var(mu1) + zeta1 = 3.9056 + 9
  CHECK(std::abs(m1.mean - 2.0 / 6.0) < 0.06);
  CHECK(std::abs(m1.var - 12.9056) < 0.6);
  CHECK(std::abs(m0.mean) < 0.02);
  CHECK(std::abs(m0.var - 1.0) < 0.05);
  // two-point costs 1/10 with equal probability
  const Moments mc = moments(t.cost);
  CHECK(std::abs(mc.mean - 5.5) < 0.1);
  for (std::size_t i = 0; i < t.n(); ++i)
    CHECK((t.cost[i] == 1.0 || t.cost[i] == 10.0));
  // covariates stay inside the unit cube
  for (std::size_t i = 0; i < 200; ++i) {
    CHECK(std::abs(t.psi1(i, 0)) <= 1.0);
    CHECK(std::abs(t.psi1(i, 1)) <= 1.0);
  }
}

TEST_CASE("quadratic-cost model prices units by squared covariate norm") {
  DgpSpec spec;
  spec.model_id = 3;
  spec.nu = 2;
  const double psi[2] = {0.6, 0.8};
  CHECK(spec.cost(psi) == Catch::Approx(0.5 + 10.0 * (0.36 + 0.64) / 2.0));
  spec.n = 100000;
  Rng rng(43);
  const UnitTable t = generate_dgp(spec, rng);
  const Moments mc = moments(t.cost);
  CHECK(std::abs(mc.mean - (0.5 + 10.0 / 3.0)) < 0.05);
}

TEST_CASE("model registry constants") {
  DgpSpec s;
  const double at_origin[2] = {0.0, 0.0};
  s.model_id = 1;
  CHECK(s.zeta1(at_origin) == 9.0);
  CHECK(s.zeta0(at_origin) == 1.0);
  CHECK(s.baseline_p() == Propensity(3, 8));
  CHECK(s.budget() == 4.0);
  CHECK_FALSE(s.uniform_residuals());
  s.model_id = 2;
  CHECK(s.baseline_p() == Propensity(1, 2));
  CHECK(s.budget() == 1.0);
  CHECK(s.uniform_residuals());
  s.model_id = 6;
  CHECK(s.baseline_p() == Propensity(3, 10));
  CHECK(s.psi_half_width() == Catch::Approx(std::numbers::pi));
  CHECK(s.zeta1(at_origin) == 6.0);
  s.model_id = 7;
  CHECK_THROWS_AS(s.validate(), Error);
}

TEST_CASE("monte carlo effect sizes agree with the closed forms") {
  for (int model = 1; model <= 6; ++model) {
    DgpSpec spec;
    spec.model_id = model;
    spec.nu = 2;
    const double mc = mc_ate(spec, 1000000, 77);
    INFO("model " << model);
    CHECK(std::abs(mc - spec.true_ate()) < 0.02);
  }
}

TEST_CASE("shared-link model has an identically zero conditional effect") {
  DgpSpec spec;
  spec.model_id = 5;
  spec.nu = 3;
  Rng rng(9);
  for (int t = 0; t < 200; ++t) {
    double psi[3];
    for (double& x : psi) x = 2.0 * rng.uniform() - 1.0;
    CHECK(spec.mu1(psi) == spec.mu0(psi));
  }
}

TEST_CASE("budget-exhausting share picks the smallest feasible denominator") {
  // mean cost 5.5, budget 4: k = 4 is the first grid hitting the 5% window
  CHECK(budget_exhausting_share(5.5, 4.0) == Propensity(3, 4));
  CHECK(budget_exhausting_share(1.0, 0.5) == Propensity(1, 2));
  // 0.37 is missed by every denominator below 8
  CHECK(budget_exhausting_share(1.0, 0.37) == Propensity(3, 8));
  // shares above 1 are impossible: spending cannot reach the budget
  CHECK_THROWS_AS(budget_exhausting_share(1.0, 2.0), Error);
  // tiny targets below 1/64 have no representable share
  CHECK_THROWS_AS(budget_exhausting_share(1.0, 0.005), Error);
}

TEST_CASE("discrete budget cap walks shares down the grid") {
  const std::size_t n = 16;
  const std::vector<double> costs(n, 1.0);
  auto q = PropensityMap::constant(Propensity(3, 4), n);
  // spend 0.75 against budget 0.5: two steps of 1/8 land on 1/2
  detail::cap_discrete_budget(q, costs, 0.5, 8);
  for (std::size_t i = 0; i < n; ++i) CHECK(q.values[i] == Propensity(1, 2));

  // already inside the window: untouched
  auto ok = PropensityMap::constant(Propensity(1, 2), n);
  detail::cap_discrete_budget(ok, costs, 0.5, 8);
  for (std::size_t i = 0; i < n; ++i) CHECK(ok.values[i] == Propensity(1, 2));

  // every level at the grid floor: returns without looping forever
  auto floor_map = PropensityMap::constant(Propensity(1, 8), n);
  detail::cap_discrete_budget(floor_map, costs, 0.01, 8);
  for (std::size_t i = 0; i < n; ++i) CHECK(floor_map.values[i] == Propensity(1, 8));
}

TEST_CASE("design names round-trip through the parser") {
  const DesignId all[] = {DesignId::CR,  DesignId::CR_Loc, DesignId::Loc,
                          DesignId::Hom, DesignId::Opt,    DesignId::PilotS,
                          DesignId::PilotL};
  for (DesignId d : all) CHECK(parse_design(design_name(d)) == d);
  CHECK(parse_design("pilot:100") == DesignId::PilotS);
  CHECK(parse_design("pilot:400") == DesignId::PilotL);
  CHECK(parse_design("cr_loc") == DesignId::CR_Loc);
  CHECK_THROWS_AS(parse_design("bogus"), Error);
}

TEST_CASE("a realized design is internally consistent and reproducible") {
  DgpSpec spec;
  spec.n = 400;
  Rng rng(5);
  const UnitTable table = generate_dgp(spec, rng);
  for (DesignId id : {DesignId::CR, DesignId::Loc, DesignId::Hom, DesignId::Opt}) {
    RandomSource rs1(123), rs2(123);
    const auto a = run_design(spec, table, id, rs1);
    const auto b = run_design(spec, table, id, rs2);
    INFO(design_name(id));
    CHECK_NOTHROW(a.validate());
    for (std::size_t i = 0; i < table.n(); ++i)
      if (a.D[i]) CHECK(a.T[i] == 1);  // treated units are sampled
    CHECK(a.T == b.T);
    CHECK(a.D == b.D);
    CHECK(a.n_sampled() > 0);
    // realized spend respects the budget window
    double spend = 0.0;
    for (std::size_t i = 0; i < table.n(); ++i) spend += a.q_map.value(i) * table.cost[i];
    spend /= static_cast<double>(table.n());
    CHECK(spend <= 1.05 * spec.budget() + 1e-12);
  }
}

TEST_CASE("comparison table is identical across thread counts") {
  DgpSpec spec;
  spec.model_id = 3;
  spec.n = 200;
  SimConfig c1, c4;
  c1.parallelism = 1;
  c4.parallelism = 4;
  const std::vector<DesignId> designs = {DesignId::CR, DesignId::Loc};
  const auto a = run_design_comparison(spec, designs, 6, 20250824, c1);
  const auto b = run_design_comparison(spec, designs, 6, 20250824, c4);
  REQUIRE(a.rows.size() == b.rows.size());
  for (std::size_t d = 0; d < a.rows.size(); ++d) {
    CHECK(a.rows[d].sd == b.rows[d].sd);
    CHECK(a.rows[d].mean_theta == b.rows[d].mean_theta);
    CHECK(a.rows[d].mean_ci_len == b.rows[d].mean_ci_len);
    CHECK(a.rows[d].coverage == b.rows[d].coverage);
    CHECK(a.rows[d].mean_n_sampled == b.rows[d].mean_n_sampled);
  }
  // the baseline is its own reference point
  CHECK(a.rows[0].sd_ratio == 1.0);
  CHECK(a.rows[0].pct_delta_ci == 0.0);
}

TEST_CASE("comparison rejects a design list without the baseline") {
  DgpSpec spec;
  spec.n = 100;
  CHECK_THROWS_AS(run_design_comparison(spec, {DesignId::Loc}, 2, 1), Error);
  CHECK_THROWS_AS(run_design_comparison(spec, {DesignId::CR}, 0, 1), Error);
}

TEST_CASE("comparison estimates center near the true effect") {
  DgpSpec spec;
  spec.model_id = 3;
  spec.n = 300;
  const auto tab =
      run_design_comparison(spec, {DesignId::CR, DesignId::Loc}, 40, 31415);
  CHECK(tab.true_ate == Catch::Approx(2.0 / 6.0));
  for (const auto& row : tab.rows) {
    INFO(design_name(row.id));
    CHECK(std::abs(row.mean_theta - tab.true_ate) < 5.0 * row.sd / std::sqrt(40.0));
    CHECK(row.coverage >= 0.8);
  }
}

TEST_CASE("panel imputation borrows the nearest opposite-arm outcome") {
  UnitTable t;
  t.psi1 = Matrix(2, 1);
  t.psi1(0, 0) = 0.0;
  t.psi1(1, 0) = 1.0;
  t.y_obs = {10.0, 20.0};
  const std::vector<std::uint8_t> D = {1, 0};
  const auto full = impute_panel(t, D);
  CHECK(full.y1[0] == 10.0);
  CHECK(full.y0[0] == 20.0);
  CHECK(full.y1[1] == 10.0);
  CHECK(full.y0[1] == 20.0);
}

TEST_CASE("panel imputation matches an exhaustive nearest-neighbor search") {
  Rng rng(77);
  const std::size_t n = 50;
  UnitTable t;
  t.psi1 = Matrix(n, 2);
  t.y_obs.resize(n);
  std::vector<std::uint8_t> D(n);
  for (std::size_t i = 0; i < n; ++i) {
    t.psi1(i, 0) = rng.normal();
    t.psi1(i, 1) = rng.normal();
    t.y_obs[i] = rng.normal();
    D[i] = static_cast<std::uint8_t>(rng.uniform() < 0.5);
  }
  D[0] = 1;
  D[1] = 0;  // both arms nonempty
  const auto full = impute_panel(t, D);
  for (std::size_t i = 0; i < n; ++i) {
    for (int d = 0; d < 2; ++d) {
      double best = std::numeric_limits<double>::infinity();
      std::size_t arg = n;
      for (std::size_t j = 0; j < n; ++j) {
        if (static_cast<int>(D[j]) != d) continue;
        const double dx = t.psi1(i, 0) - t.psi1(j, 0);
        const double dy = t.psi1(i, 1) - t.psi1(j, 1);
        const double dist = dx * dx + dy * dy;
        if (dist < best) {
          best = dist;
          arg = j;
        }
      }
      const double expected =
          static_cast<int>(D[i]) == d ? t.y_obs[i] : t.y_obs[arg];
      CHECK((d ? full.y1[i] : full.y0[i]) == expected);
    }
  }
}

TEST_CASE("panel imputation rejects incomplete or one-armed data") {
  UnitTable t;
  t.psi1 = Matrix(3, 1);
  std::vector<std::uint8_t> D = {1, 1, 1};
  CHECK_THROWS_AS(impute_panel(t, D), Error);  // no observed outcomes
  t.y_obs = {1.0, 2.0, 3.0};
  CHECK_THROWS_AS(impute_panel(t, D), Error);  // empty control arm
}
