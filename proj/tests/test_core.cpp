#include <catch2/catch_amalgamated.hpp>

#include <cstdio>
#include <fstream>
#include <sstream>

#include "stratakit/core.hpp"
#include "stratakit/rng.hpp"

using namespace stratakit;

namespace {

std::string write_temp(const std::string& content) {
  static int counter = 0;
  const std::string path = "core_test_" + std::to_string(counter++) + ".csv";
  std::ofstream out(path);
  out << content;
  return path;
}

}  // namespace

TEST_CASE("propensity arithmetic is exact") {
  const Propensity p(6, 8);
  CHECK(p.num == 3);
  CHECK(p.den == 4);
  CHECK(p == Propensity(3, 4));
  CHECK(p.str() == "3/4");
  CHECK(Propensity::parse("3/8").value() == Catch::Approx(0.375));
  CHECK(Propensity::parse("1") == Propensity(1, 1));
  CHECK(Propensity(1, 2) < Propensity(2, 3));
  CHECK_THROWS_AS(Propensity(0, 2), Error);
  CHECK_THROWS_AS(Propensity(3, 2), Error);
  CHECK_THROWS_AS(Propensity::parse("abc"), Error);
}

TEST_CASE("propensity map levels") {
  auto m = PropensityMap::from_values(
      {Propensity(1, 2), Propensity(2, 4), Propensity(1, 10)});
  CHECK(m.levels.size() == 2);  // 1/2 == 2/4
  CHECK_FALSE(m.is_constant());
  CHECK(PropensityMap::constant(Propensity(3, 8), 5).is_constant());
}

TEST_CASE("load_units parses a small file") {
  const auto path = write_temp("x1,x2,cost\n1,2,1.5\n3,4,2\n-1,0,0.25\n");
  ColumnSchema schema;
  schema.psi1_cols = {"x1", "x2"};
  schema.cost_col = "cost";
  const auto t = load_units(path, schema);
  CHECK(t.n() == 3);
  CHECK(t.psi1.cols() == 2);
  CHECK(t.cost[2] == Catch::Approx(0.25));
  std::remove(path.c_str());
}

TEST_CASE("load_units rejects bad rows with location info") {
  const auto bad_cost = write_temp("x,cost\n1,1\n2,0\n");
  ColumnSchema schema;
  schema.psi1_cols = {"x"};
  schema.cost_col = "cost";
  CHECK_THROWS_WITH(load_units(bad_cost, schema),
                    Catch::Matchers::ContainsSubstring("row 3"));
  std::remove(bad_cost.c_str());

  const auto bad_num = write_temp("x,cost\n1,1\noops,1\n");
  CHECK_THROWS_WITH(load_units(bad_num, schema),
                    Catch::Matchers::ContainsSubstring("'x'"));
  std::remove(bad_num.c_str());
}

TEST_CASE("load_units round-trips through write/read") {
  Rng rng(42);
  std::ostringstream os;
  os << "a,b\n";
  std::vector<double> va, vb;
  for (int i = 0; i < 1000; ++i) {
    va.push_back(rng.normal());
    vb.push_back(rng.normal());
    char buf[80];
    std::snprintf(buf, sizeof(buf), "%.17g,%.17g\n", va.back(), vb.back());
    os << buf;
  }
  const auto path = write_temp(os.str());
  ColumnSchema schema;
  schema.psi1_cols = {"a", "b"};
  const auto t = load_units(path, schema);
  REQUIRE(t.n() == 1000);
  for (int i = 0; i < 1000; ++i) {
    CHECK(t.psi1(static_cast<std::size_t>(i), 0) == va[static_cast<std::size_t>(i)]);
    CHECK(t.psi1(static_cast<std::size_t>(i), 1) == vb[static_cast<std::size_t>(i)]);
  }
  std::remove(path.c_str());
}

TEST_CASE("standardize gives mean 0 variance 1 with n-1 denominator") {
  Matrix m(3, 1);
  m(0, 0) = 1;
  m(1, 0) = 2;
  m(2, 0) = 3;
  const auto s = standardize_matrix(m);
  CHECK(s(0, 0) == Catch::Approx(-1.0));
  CHECK(s(1, 0) == Catch::Approx(0.0));
  CHECK(s(2, 0) == Catch::Approx(1.0));

  const auto twice = standardize_matrix(s);
  for (int i = 0; i < 3; ++i)
    CHECK(twice(static_cast<std::size_t>(i), 0) ==
          Catch::Approx(s(static_cast<std::size_t>(i), 0)).margin(1e-12));

  Matrix flat(3, 1, 7.0);
  CHECK_THROWS_WITH(standardize_matrix(flat),
                    Catch::Matchers::ContainsSubstring("column 1"));
}

TEST_CASE("design result validation catches count violations") {
  DesignResult r;
  r.T = {1, 1, 0, 0};
  r.D = {1, 0, 0, 0};
  r.q_map = PropensityMap::constant(Propensity(1, 2), 4);
  r.p_map = PropensityMap::constant(Propensity(1, 2), 4);
  r.sampling_partition.groups = {{0, 1}, {2, 3}};
  r.sampling_partition.stratum_of_group = {Propensity(1, 2), Propensity(1, 2)};
  r.sampling_partition.is_remainder = {false, false};
  CHECK_THROWS_AS(r.validate(), Error);  // group {0,1} has 2 sampled, expected 1

  r.T = {1, 0, 1, 0};
  CHECK_NOTHROW(r.validate());

  r.D = {0, 1, 0, 0};  // treated but not sampled
  CHECK_THROWS_AS(r.validate(), Error);
}

TEST_CASE("rng streams are deterministic and label-separated") {
  RandomSource rs(123);
  Rng a1 = rs.stream("alpha");
  Rng a2 = rs.stream("alpha");
  Rng b = rs.stream("beta");
  const auto x = a1.next();
  CHECK(x == a2.next());
  CHECK(x != b.next());
  Rng i0 = rs.stream("alpha", 0);
  Rng i1 = rs.stream("alpha", 1);
  CHECK(i0.next() != i1.next());
}

TEST_CASE("rng uniform and normal have sane moments") {
  Rng rng(7);
  double s = 0.0, s2 = 0.0;
  const int n = 200000;
  for (int i = 0; i < n; ++i) {
    const double u = rng.uniform();
    REQUIRE(u >= 0.0);
    REQUIRE(u < 1.0);
    s += u;
    s2 += u * u;
  }
  CHECK(s / n == Catch::Approx(0.5).margin(0.005));
  CHECK(s2 / n - 0.25 == Catch::Approx(1.0 / 12).margin(0.005));

  s = s2 = 0.0;
  for (int i = 0; i < n; ++i) {
    const double z = rng.normal();
    s += z;
    s2 += z * z;
  }
  CHECK(s / n == Catch::Approx(0.0).margin(0.01));
  CHECK(s2 / n == Catch::Approx(1.0).margin(0.02));
}

TEST_CASE("design serialization round-trip text") {
  DesignResult r;
  r.T = {1, 0};
  r.D = {1, 0};
  r.q_map = PropensityMap::constant(Propensity(1, 2), 2);
  r.p_map = PropensityMap::constant(Propensity(1, 2), 2);
  r.sampling_partition.groups = {{0, 1}};
  r.sampling_partition.stratum_of_group = {Propensity(1, 2)};
  r.sampling_partition.is_remainder = {false};
  std::ostringstream os;
  write_design(os, r);
  CHECK(os.str() ==
        "unit_id,T,D,sampling_group,assignment_group,q,p\n"
        "0,1,1,0,-1,1/2,1/2\n"
        "1,0,0,0,-1,1/2,1/2\n");
}
