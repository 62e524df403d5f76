#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <numeric>
#include <optional>
#include <sstream>
#include <stdexcept>
#include <string>
#include <unordered_map>
#include <vector>

#include "stratakit/rng.hpp"

namespace stratakit {

class Error : public std::runtime_error {
 public:
  explicit Error(const std::string& what) : std::runtime_error(what) {}
};

// Dense row-major matrix, just enough for covariate tables.
class Matrix {
 public:
  Matrix() = default;
  Matrix(std::size_t rows, std::size_t cols, double fill = 0.0)
      : rows_(rows), cols_(cols), data_(rows * cols, fill) {}

  std::size_t rows() const { return rows_; }
  std::size_t cols() const { return cols_; }
  bool empty() const { return data_.empty(); }

  double& operator()(std::size_t i, std::size_t j) { return data_[i * cols_ + j]; }
  double operator()(std::size_t i, std::size_t j) const { return data_[i * cols_ + j]; }

  const double* row(std::size_t i) const { return data_.data() + i * cols_; }

  std::vector<double> column(std::size_t j) const {
    std::vector<double> out(rows_);
    for (std::size_t i = 0; i < rows_; ++i) out[i] = (*this)(i, j);
    return out;
  }

  Matrix select_rows(const std::vector<int>& idx) const {
    Matrix out(idx.size(), cols_);
    for (std::size_t r = 0; r < idx.size(); ++r)
      for (std::size_t j = 0; j < cols_; ++j)
        out(r, j) = (*this)(static_cast<std::size_t>(idx[r]), j);
    return out;
  }

  friend bool operator==(const Matrix& a, const Matrix& b) {
    return a.rows_ == b.rows_ && a.cols_ == b.cols_ && a.data_ == b.data_;
  }

 private:
  std::size_t rows_ = 0, cols_ = 0;
  std::vector<double> data_;
};

inline double sq_dist(const double* a, const double* b, std::size_t d) {
  double s = 0.0;
  for (std::size_t j = 0; j < d; ++j) {
    const double t = a[j] - b[j];
    s += t * t;
  }
  return s;
}

// Exact rational propensity a/k, gcd(a,k) = 1, 0 < a/k <= 1.
struct Propensity {
  std::int64_t num = 1;
  std::int64_t den = 1;

  Propensity() = default;
  Propensity(std::int64_t a, std::int64_t k) {
    if (a <= 0 || k <= 0 || a > k)
      throw Error("propensity must satisfy 0 < a/k <= 1, got " +
                  std::to_string(a) + "/" + std::to_string(k));
    const std::int64_t g = std::gcd(a, k);
    num = a / g;
    den = k / g;
  }

  double value() const { return static_cast<double>(num) / static_cast<double>(den); }

  std::string str() const { return std::to_string(num) + "/" + std::to_string(den); }

  static Propensity parse(const std::string& s) {
    const auto slash = s.find('/');
    try {
      if (slash == std::string::npos) {
        const std::int64_t a = std::stoll(s);
        return Propensity(a, 1);
      }
      return Propensity(std::stoll(s.substr(0, slash)), std::stoll(s.substr(slash + 1)));
    } catch (const std::logic_error&) {
      throw Error("cannot parse propensity '" + s + "', expected \"a/k\"");
    }
  }

  friend bool operator==(const Propensity& a, const Propensity& b) {
    return a.num == b.num && a.den == b.den;
  }
  friend bool operator!=(const Propensity& a, const Propensity& b) { return !(a == b); }
  friend bool operator<(const Propensity& a, const Propensity& b) {
    return a.num * b.den < b.num * a.den;
  }
};

// Per-unit propensities plus the distinct levels they come from.
struct PropensityMap {
  std::vector<Propensity> values;
  std::vector<Propensity> levels;

  PropensityMap() = default;

  static PropensityMap constant(Propensity p, std::size_t n) {
    PropensityMap m;
    m.values.assign(n, p);
    m.levels = {p};
    return m;
  }

  static PropensityMap from_values(std::vector<Propensity> vals) {
    PropensityMap m;
    m.values = std::move(vals);
    m.levels = m.values;
    std::sort(m.levels.begin(), m.levels.end());
    m.levels.erase(std::unique(m.levels.begin(), m.levels.end()), m.levels.end());
    if (m.levels.empty()) throw Error("propensity map must cover at least one unit");
    return m;
  }

  std::size_t size() const { return values.size(); }
  bool is_constant() const { return levels.size() == 1; }

  double value(std::size_t i) const { return values[i].value(); }

  double mean() const {
    double s = 0.0;
    for (const auto& p : values) s += p.value();
    return values.empty() ? 0.0 : s / static_cast<double>(values.size());
  }
};

// Eligible population: stratification covariates plus optional costs and
// outcomes. psi2 empty means assignment reuses psi1.
struct UnitTable {
  Matrix psi1;
  Matrix psi2;
  std::vector<double> cost;
  std::vector<double> y_obs;
  std::vector<double> y0;
  std::vector<double> y1;
  std::vector<std::string> ids;

  std::size_t n() const { return psi1.rows(); }

  const Matrix& assignment_psi() const { return psi2.empty() ? psi1 : psi2; }

  bool has_cost() const { return !cost.empty(); }
  bool has_outcomes() const { return !y0.empty() && !y1.empty(); }

  void validate() const {
    if (n() < 2) throw Error("unit table needs at least 2 units");
    for (std::size_t i = 0; i < psi1.rows(); ++i)
      for (std::size_t j = 0; j < psi1.cols(); ++j)
        if (!std::isfinite(psi1(i, j)))
          throw Error("non-finite covariate at row " + std::to_string(i + 1));
    for (std::size_t i = 0; i < cost.size(); ++i)
      if (!(cost[i] > 0.0))
        throw Error("cost must be strictly positive, row " + std::to_string(i + 1));
  }
};

// Nested group structure: each group is a set of unit indices, tagged with
// its propensity stratum; at most one remainder group per stratum.
struct GroupPartition {
  std::vector<std::vector<int>> groups;
  std::vector<Propensity> stratum_of_group;
  std::vector<bool> is_remainder;
  double objective = 0.0;

  std::size_t size() const { return groups.size(); }

  std::vector<int> covered_units() const {
    std::vector<int> all;
    for (const auto& g : groups) all.insert(all.end(), g.begin(), g.end());
    std::sort(all.begin(), all.end());
    return all;
  }

  void append(const GroupPartition& other) {
    for (std::size_t g = 0; g < other.groups.size(); ++g) {
      groups.push_back(other.groups[g]);
      stratum_of_group.push_back(other.stratum_of_group[g]);
      is_remainder.push_back(other.is_remainder[g]);
    }
    objective += other.objective;
  }
};

// A realized two-stage design: sampling vector, assignment vector, the group
// structures behind them, and the seed that reproduces everything.
struct DesignResult {
  std::vector<std::uint8_t> T;
  std::vector<std::uint8_t> D;
  GroupPartition sampling_partition;
  GroupPartition assignment_partition;
  PropensityMap q_map;
  PropensityMap p_map;
  std::uint64_t seed = 0;
  bool warn_small_stratum = false;
  bool warn_subvector = false;

  std::size_t n_sampled() const {
    return static_cast<std::size_t>(std::count(T.begin(), T.end(), std::uint8_t{1}));
  }
  std::size_t n_treated() const {
    return static_cast<std::size_t>(std::count(D.begin(), D.end(), std::uint8_t{1}));
  }

  // O(n) validity check: exact per-group counts in all non-remainder groups.
  void validate() const {
    for (std::size_t i = 0; i < D.size(); ++i)
      if (D[i] == 1 && T[i] == 0) throw Error("treated unit not sampled");
    check_counts(sampling_partition, T);
    check_counts(assignment_partition, D);
  }

 private:
  static void check_counts(const GroupPartition& part, const std::vector<std::uint8_t>& v) {
    for (std::size_t g = 0; g < part.groups.size(); ++g) {
      if (part.is_remainder[g]) continue;
      const Propensity& p = part.stratum_of_group[g];
      std::int64_t cnt = 0;
      for (int i : part.groups[g]) cnt += v[static_cast<std::size_t>(i)];
      if (static_cast<std::int64_t>(part.groups[g].size()) != p.den || cnt != p.num)
        throw Error("group count mismatch: stratum " + p.str() + " got " +
                    std::to_string(cnt) + " of " + std::to_string(part.groups[g].size()));
    }
  }
};

// ---------------------------------------------------------------------------
// Delimited text ingestion

struct ColumnSchema {
  std::vector<std::string> psi1_cols;
  std::vector<std::string> psi2_cols;  // empty: psi2 aliases psi1
  std::string cost_col;
  std::string y_col;
  std::string y0_col;
  std::string y1_col;
  std::string id_col;
};

namespace detail {

inline std::vector<std::string> split_csv_line(const std::string& line) {
  std::vector<std::string> out;
  std::string cur;
  for (char c : line) {
    if (c == ',') {
      out.push_back(cur);
      cur.clear();
    } else if (c != '\r') {
      cur += c;
    }
  }
  out.push_back(cur);
  return out;
}

inline double parse_number(const std::string& s, std::size_t row, const std::string& col) {
  try {
    std::size_t pos = 0;
    const double v = std::stod(s, &pos);
    if (pos != s.size()) throw std::invalid_argument(s);
    return v;
  } catch (const std::logic_error&) {
    throw Error("non-numeric value '" + s + "' in row " + std::to_string(row) +
                ", column '" + col + "'");
  }
}

}  // namespace detail

inline UnitTable load_units(const std::string& path, const ColumnSchema& schema) {
  std::ifstream in(path);
  if (!in) throw Error("cannot open file: " + path);
  std::string line;
  if (!std::getline(in, line)) throw Error("empty file: " + path);
  const auto header = detail::split_csv_line(line);
  std::unordered_map<std::string, std::size_t> col_of;
  for (std::size_t j = 0; j < header.size(); ++j) col_of[header[j]] = j;

  auto find = [&](const std::string& name, bool required) -> int {
    auto it = col_of.find(name);
    if (it == col_of.end()) {
      if (required) throw Error("missing column '" + name + "' in " + path);
      return -1;
    }
    return static_cast<int>(it->second);
  };

  std::vector<int> p1, p2;
  for (const auto& c : schema.psi1_cols) p1.push_back(find(c, true));
  for (const auto& c : schema.psi2_cols) p2.push_back(find(c, true));
  if (p1.empty()) throw Error("at least one psi1 column is required");
  const int cost_j = schema.cost_col.empty() ? -1 : find(schema.cost_col, true);
  const int y_j = schema.y_col.empty() ? -1 : find(schema.y_col, false);
  const int y0_j = schema.y0_col.empty() ? -1 : find(schema.y0_col, false);
  const int y1_j = schema.y1_col.empty() ? -1 : find(schema.y1_col, false);
  const int id_j = schema.id_col.empty() ? -1 : find(schema.id_col, false);

  std::vector<std::vector<std::string>> rows;
  std::size_t row_no = 1;
  while (std::getline(in, line)) {
    ++row_no;
    if (line.empty()) continue;
    auto cells = detail::split_csv_line(line);
    if (cells.size() != header.size())
      throw Error("malformed row " + std::to_string(row_no) + ": expected " +
                  std::to_string(header.size()) + " fields, got " +
                  std::to_string(cells.size()));
    rows.push_back(std::move(cells));
  }

  UnitTable t;
  const std::size_t n = rows.size();
  t.psi1 = Matrix(n, p1.size());
  if (!p2.empty()) t.psi2 = Matrix(n, p2.size());
  if (cost_j >= 0) t.cost.resize(n);
  if (y_j >= 0) t.y_obs.resize(n);
  if (y0_j >= 0) t.y0.resize(n);
  if (y1_j >= 0) t.y1.resize(n);
  if (id_j >= 0) t.ids.resize(n);

  for (std::size_t i = 0; i < n; ++i) {
    const std::size_t file_row = i + 2;  // header is row 1
    for (std::size_t j = 0; j < p1.size(); ++j)
      t.psi1(i, j) = detail::parse_number(rows[i][static_cast<std::size_t>(p1[j])],
                                          file_row, schema.psi1_cols[j]);
    for (std::size_t j = 0; j < p2.size(); ++j)
      t.psi2(i, j) = detail::parse_number(rows[i][static_cast<std::size_t>(p2[j])],
                                          file_row, schema.psi2_cols[j]);
    if (cost_j >= 0) {
      t.cost[i] = detail::parse_number(rows[i][static_cast<std::size_t>(cost_j)],
                                       file_row, schema.cost_col);
      if (!(t.cost[i] > 0.0))
        throw Error("non-positive cost in row " + std::to_string(file_row) +
                    ", column '" + schema.cost_col + "'");
    }
    if (y_j >= 0)
      t.y_obs[i] = detail::parse_number(rows[i][static_cast<std::size_t>(y_j)], file_row,
                                        schema.y_col);
    if (y0_j >= 0)
      t.y0[i] = detail::parse_number(rows[i][static_cast<std::size_t>(y0_j)], file_row,
                                     schema.y0_col);
    if (y1_j >= 0)
      t.y1[i] = detail::parse_number(rows[i][static_cast<std::size_t>(y1_j)], file_row,
                                     schema.y1_col);
    if (id_j >= 0) t.ids[i] = rows[i][static_cast<std::size_t>(id_j)];
  }
  t.validate();
  return t;
}

// Rescale every psi column to sample mean 0 and sample variance 1
// (denominator n-1). Costs and outcomes are untouched.
inline Matrix standardize_matrix(const Matrix& m) {
  if (m.rows() < 2) throw Error("standardize needs n >= 2");
  Matrix out(m.rows(), m.cols());
  const double n = static_cast<double>(m.rows());
  for (std::size_t j = 0; j < m.cols(); ++j) {
    double mean = 0.0;
    for (std::size_t i = 0; i < m.rows(); ++i) mean += m(i, j);
    mean /= n;
    double ss = 0.0;
    for (std::size_t i = 0; i < m.rows(); ++i) {
      const double d = m(i, j) - mean;
      ss += d * d;
    }
    const double var = ss / (n - 1.0);
    if (var <= 0.0)
      throw Error("zero-variance covariate column " + std::to_string(j + 1) +
                  ", cannot standardize");
    const double sd = std::sqrt(var);
    for (std::size_t i = 0; i < m.rows(); ++i) out(i, j) = (m(i, j) - mean) / sd;
  }
  return out;
}

inline UnitTable standardize(const UnitTable& t) {
  UnitTable out = t;
  out.psi1 = standardize_matrix(t.psi1);
  if (!t.psi2.empty()) out.psi2 = standardize_matrix(t.psi2);
  return out;
}

// ---------------------------------------------------------------------------
// Serialization of design results and partitions (delimited text)

inline void write_design(std::ostream& os, const DesignResult& r) {
  os << "unit_id,T,D,sampling_group,assignment_group,q,p\n";
  const std::size_t n = r.T.size();
  std::vector<int> sg(n, -1), ag(n, -1);
  for (std::size_t g = 0; g < r.sampling_partition.groups.size(); ++g)
    for (int i : r.sampling_partition.groups[g]) sg[static_cast<std::size_t>(i)] = static_cast<int>(g);
  for (std::size_t g = 0; g < r.assignment_partition.groups.size(); ++g)
    for (int i : r.assignment_partition.groups[g]) ag[static_cast<std::size_t>(i)] = static_cast<int>(g);
  for (std::size_t i = 0; i < n; ++i) {
    os << i << ',' << int(r.T[i]) << ',' << int(r.D[i]) << ',' << sg[i] << ',' << ag[i]
       << ',' << r.q_map.values[i].str() << ','
       << (i < r.p_map.values.size() ? r.p_map.values[i].str() : std::string("0/1"))
       << '\n';
  }
}

inline void write_partition(std::ostream& os, const GroupPartition& part) {
  os << "unit_id,group_id,stratum,is_remainder\n";
  for (std::size_t g = 0; g < part.groups.size(); ++g)
    for (int i : part.groups[g])
      os << i << ',' << g << ',' << part.stratum_of_group[g].str() << ','
         << (part.is_remainder[g] ? 1 : 0) << '\n';
}

}  // namespace stratakit
