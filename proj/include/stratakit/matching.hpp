#pragma once

#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstdint>
#include <deque>
#include <functional>
#include <limits>
#include <numeric>
#include <thread>
#include <utility>
#include <vector>

#include "stratakit/core.hpp"

namespace stratakit {

namespace detail {

// Maximum weight perfect matching on a dense general graph, O(n^3).
// Classic primal-dual blossom algorithm with lazy slack tracking; integer
// weights keep the duals exact. Vertices are 1-indexed; indices above n are
// contracted blossoms.
class WeightedBlossom {
 public:
  explicit WeightedBlossom(int n) : n_(n), n_x_(n) {
    const int m = 2 * n + 1;
    g_.assign(static_cast<std::size_t>(m) * m, Edge{});
    for (int u = 0; u < m; ++u)
      for (int v = 0; v < m; ++v) edge(u, v) = Edge{u, v, 0};
    lab_.assign(m, 0);
    match_.assign(m, 0);
    slack_.assign(m, 0);
    st_.assign(m, 0);
    pa_.assign(m, 0);
    S_.assign(m, -1);
    vis_.assign(m, 0);
    flower_.assign(m, {});
    flower_from_.assign(static_cast<std::size_t>(m) * (n + 1), 0);
  }

  void set_weight(int u, int v, long long w) {  // 1-indexed, w >= 0; 0 = absent
    edge(u, v).w = w;
    edge(v, u).w = w;
  }

  // Runs the matching; mate(u) gives the 1-indexed partner (0 if unmatched).
  long long solve() {
    n_x_ = n_;
    std::fill(match_.begin(), match_.end(), 0);
    for (int u = 0; u <= n_; ++u) {
      st_[u] = u;
      flower_[u].clear();
    }
    long long w_max = 0;
    for (int u = 1; u <= n_; ++u)
      for (int v = 1; v <= n_; ++v) {
        from(u, v) = (u == v ? u : 0);
        w_max = std::max(w_max, edge(u, v).w);
      }
    for (int u = 1; u <= n_; ++u) lab_[u] = w_max;
    while (matching()) {
    }
    long long total = 0;
    for (int u = 1; u <= n_; ++u)
      if (match_[u] && match_[u] < u) total += edge(u, match_[u]).w;
    return total;
  }

  int mate(int u) const { return match_[u]; }

 private:
  struct Edge {
    int u = 0, v = 0;
    long long w = 0;
  };

  Edge& edge(int u, int v) { return g_[static_cast<std::size_t>(u) * (2 * n_ + 1) + v]; }
  int& from(int b, int x) { return flower_from_[static_cast<std::size_t>(b) * (n_ + 1) + x]; }

  long long e_delta(const Edge& e) const { return lab_[e.u] + lab_[e.v] - e.w * 2; }

  void update_slack(int u, int x) {
    if (!slack_[x] || e_delta(edge_at(u, x)) < e_delta(edge_at(slack_[x], x)))
      slack_[x] = u;
  }

  const Edge& edge_at(int u, int v) const {
    return g_[static_cast<std::size_t>(u) * (2 * n_ + 1) + v];
  }

  void set_slack(int x) {
    slack_[x] = 0;
    for (int u = 1; u <= n_; ++u)
      if (edge_at(u, x).w > 0 && st_[u] != x && S_[st_[u]] == 0) update_slack(u, x);
  }

  void q_push(int x) {
    if (x <= n_) {
      q_.push_back(x);
    } else {
      for (int i : flower_[x]) q_push(i);
    }
  }

  void set_st(int x, int b) {
    st_[x] = b;
    if (x > n_)
      for (int i : flower_[x]) set_st(i, b);
  }

  int get_pr(int b, int xr) {
    auto& f = flower_[b];
    const int pr =
        static_cast<int>(std::find(f.begin(), f.end(), xr) - f.begin());
    if (pr % 2 == 1) {
      std::reverse(f.begin() + 1, f.end());
      return static_cast<int>(f.size()) - pr;
    }
    return pr;
  }

  void set_match(int u, int v) {
    match_[u] = edge(u, v).v;
    if (u > n_) {
      const Edge e = edge(u, v);
      const int xr = from(u, e.u);
      const int pr = get_pr(u, xr);
      for (int i = 0; i < pr; ++i) set_match(flower_[u][i], flower_[u][i ^ 1]);
      set_match(xr, v);
      std::rotate(flower_[u].begin(), flower_[u].begin() + pr, flower_[u].end());
    }
  }

  void augment(int u, int v) {
    for (;;) {
      const int xnv = st_[match_[u]];
      set_match(u, v);
      if (!xnv) return;
      set_match(xnv, st_[pa_[xnv]]);
      u = st_[pa_[xnv]];
      v = xnv;
    }
  }

  int get_lca(int u, int v) {
    for (++t_; u || v; std::swap(u, v)) {
      if (u == 0) continue;
      if (vis_[u] == t_) return u;
      vis_[u] = t_;
      u = st_[match_[u]];
      if (u) u = st_[pa_[u]];
    }
    return 0;
  }

  void add_blossom(int u, int lca, int v) {
    int b = n_ + 1;
    while (b <= n_x_ && st_[b]) ++b;
    if (b > n_x_) ++n_x_;
    lab_[b] = 0;
    S_[b] = 0;
    match_[b] = match_[lca];
    flower_[b].clear();
    flower_[b].push_back(lca);
    for (int x = u, y; x != lca; x = st_[pa_[y]]) {
      flower_[b].push_back(x);
      flower_[b].push_back(y = st_[match_[x]]);
      q_push(y);
    }
    std::reverse(flower_[b].begin() + 1, flower_[b].end());
    for (int x = v, y; x != lca; x = st_[pa_[y]]) {
      flower_[b].push_back(x);
      flower_[b].push_back(y = st_[match_[x]]);
      q_push(y);
    }
    set_st(b, b);
    for (int x = 1; x <= n_x_; ++x) edge(b, x).w = edge(x, b).w = 0;
    for (int x = 1; x <= n_; ++x) from(b, x) = 0;
    for (int xs : flower_[b]) {
      for (int x = 1; x <= n_x_; ++x)
        if (edge(b, x).w == 0 || e_delta(edge_at(xs, x)) < e_delta(edge_at(b, x))) {
          edge(b, x) = edge_at(xs, x);
          edge(x, b) = edge_at(x, xs);
        }
      for (int x = 1; x <= n_; ++x)
        if (from(xs, x)) from(b, x) = xs;
    }
    set_slack(b);
  }

  void expand_blossom(int b) {
    for (int i : flower_[b]) set_st(i, i);
    const int xr = from(b, edge(b, pa_[b]).u);
    const int pr = get_pr(b, xr);
    for (int i = 0; i < pr; i += 2) {
      const int xs = flower_[b][static_cast<std::size_t>(i)];
      const int xns = flower_[b][static_cast<std::size_t>(i) + 1];
      pa_[xs] = edge_at(xns, xs).u;
      S_[xs] = 1;
      S_[xns] = 0;
      slack_[xs] = 0;
      set_slack(xns);
      q_push(xns);
    }
    S_[xr] = 1;
    pa_[xr] = pa_[b];
    for (std::size_t i = static_cast<std::size_t>(pr) + 1; i < flower_[b].size(); ++i) {
      const int xs = flower_[b][i];
      S_[xs] = -1;
      set_slack(xs);
    }
    st_[b] = 0;
  }

  bool on_found_edge(const Edge& e) {
    const int u = st_[e.u];
    const int v = st_[e.v];
    if (S_[v] == -1) {
      pa_[v] = e.u;
      S_[v] = 1;
      const int nu = st_[match_[v]];
      slack_[v] = slack_[nu] = 0;
      S_[nu] = 0;
      q_push(nu);
    } else if (S_[v] == 0) {
      const int lca = get_lca(u, v);
      if (!lca) {
        augment(u, v);
        augment(v, u);
        return true;
      }
      add_blossom(u, lca, v);
    }
    return false;
  }

  bool matching() {
    std::fill(S_.begin(), S_.begin() + n_x_ + 1, -1);
    std::fill(slack_.begin(), slack_.begin() + n_x_ + 1, 0);
    q_.clear();
    for (int x = 1; x <= n_x_; ++x)
      if (st_[x] == x && !match_[x]) {
        pa_[x] = 0;
        S_[x] = 0;
        q_push(x);
      }
    if (q_.empty()) return false;
    for (;;) {
      while (!q_.empty()) {
        const int u = q_.front();
        q_.pop_front();
        if (S_[st_[u]] == 1) continue;
        for (int v = 1; v <= n_; ++v)
          if (edge_at(u, v).w > 0 && st_[u] != st_[v]) {
            if (e_delta(edge_at(u, v)) == 0) {
              if (on_found_edge(edge_at(u, v))) return true;
            } else {
              update_slack(u, st_[v]);
            }
          }
      }
      long long d = kInf;
      for (int b = n_ + 1; b <= n_x_; ++b)
        if (st_[b] == b && S_[b] == 1) d = std::min(d, lab_[b] / 2);
      for (int x = 1; x <= n_x_; ++x)
        if (st_[x] == x && slack_[x]) {
          if (S_[x] == -1)
            d = std::min(d, e_delta(edge_at(slack_[x], x)));
          else if (S_[x] == 0)
            d = std::min(d, e_delta(edge_at(slack_[x], x)) / 2);
        }
      for (int u = 1; u <= n_; ++u) {
        if (S_[st_[u]] == 0) {
          if (lab_[u] <= d) return false;
          lab_[u] -= d;
        } else if (S_[st_[u]] == 1) {
          lab_[u] += d;
        }
      }
      for (int b = n_ + 1; b <= n_x_; ++b)
        if (st_[b] == b) {
          if (S_[b] == 0)
            lab_[b] += d * 2;
          else if (S_[b] == 1)
            lab_[b] -= d * 2;
        }
      q_.clear();
      for (int x = 1; x <= n_x_; ++x)
        if (st_[x] == x && slack_[x] && st_[slack_[x]] != x &&
            e_delta(edge_at(slack_[x], x)) == 0)
          if (on_found_edge(edge_at(slack_[x], x))) return true;
      for (int b = n_ + 1; b <= n_x_; ++b)
        if (st_[b] == b && S_[b] == 1 && lab_[b] == 0) expand_blossom(b);
    }
  }

  static constexpr long long kInf = std::numeric_limits<long long>::max() / 4;

  int n_, n_x_;
  int t_ = 0;
  std::vector<Edge> g_;
  std::vector<long long> lab_;
  std::vector<int> match_, slack_, st_, pa_, S_, vis_;
  std::vector<std::vector<int>> flower_;
  std::vector<int> flower_from_;
  std::deque<int> q_;
};

}  // namespace detail

inline constexpr double kForbidden = std::numeric_limits<double>::infinity();

// Exact minimum weight perfect matching over a dense cost matrix. Entries of
// +infinity are forbidden pairs; if no perfect matching avoids them, throws.
// Weights are scaled to int64 so the dual algorithm stays exact; the scaling
// resolution is ~1e-12 of the largest finite weight.
inline std::vector<std::pair<int, int>> min_weight_pairing(
    const std::vector<std::vector<double>>& w) {
  const int m = static_cast<int>(w.size());
  if (m < 2) throw Error("pairing needs at least 2 entities");
  if (m % 2 != 0) throw Error("pairing needs an even number of entities");

  double w_max = 0.0;
  bool any_forbidden = false;
  for (int i = 0; i < m; ++i)
    for (int j = i + 1; j < m; ++j) {
      if (std::isinf(w[i][j]))
        any_forbidden = true;
      else
        w_max = std::max(w_max, w[i][j]);
    }

  const double target = 1e12;
  const double scale = w_max > 0.0 ? target / w_max : 1.0;
  // Transform min-cost to max-weight. When forbidden pairs exist, real edges
  // get an offset big enough that any matching using fewer forbidden edges
  // always wins.
  const long long W = static_cast<long long>(target) + 2;
  const long long offset = any_forbidden ? (m / 2) * (W + 1) + 2 : 2;

  detail::WeightedBlossom bl(m);
  for (int i = 0; i < m; ++i)
    for (int j = i + 1; j < m; ++j) {
      long long wij;
      if (std::isinf(w[i][j]))
        wij = 1;
      else
        wij = offset + (W - static_cast<long long>(std::llround(w[i][j] * scale)));
      bl.set_weight(i + 1, j + 1, wij);
    }
  bl.solve();

  std::vector<std::pair<int, int>> pairs;
  for (int u = 1; u <= m; ++u) {
    const int v = bl.mate(u);
    if (v > u) {
      if (std::isinf(w[u - 1][v - 1]))
        throw Error("no feasible perfect matching: entity " + std::to_string(u - 1) +
                    " cannot avoid a forbidden pair");
      pairs.emplace_back(u - 1, v - 1);
    }
  }
  std::sort(pairs.begin(), pairs.end());
  return pairs;
}

// Matching input: points plus optional forbidden-pair predicate.
struct MatchProblem {
  Matrix points;
  std::function<bool(int, int)> forbidden;  // optional, symmetric
};

inline std::vector<std::pair<int, int>> pair_min_weight(const MatchProblem& problem) {
  const int m = static_cast<int>(problem.points.rows());
  if (m < 2) throw Error("pair_min_weight needs at least 2 points");
  if (m % 2 != 0) throw Error("pair_min_weight needs an even point count");
  std::vector<std::vector<double>> w(static_cast<std::size_t>(m),
                                     std::vector<double>(static_cast<std::size_t>(m), 0.0));
  const std::size_t d = problem.points.cols();
  for (int i = 0; i < m; ++i)
    for (int j = i + 1; j < m; ++j) {
      double dist =
          sq_dist(problem.points.row(static_cast<std::size_t>(i)),
                  problem.points.row(static_cast<std::size_t>(j)), d);
      if (problem.forbidden && problem.forbidden(i, j)) dist = kForbidden;
      w[static_cast<std::size_t>(i)][static_cast<std::size_t>(j)] = dist;
      w[static_cast<std::size_t>(j)][static_cast<std::size_t>(i)] = dist;
    }
  return min_weight_pairing(w);
}

// Pairing schedule that grows k-tuples from repeated optimal pairings. J is
// the depth; fake singletons of type j are inserted before level j whenever
// the j-th binary digit of 2^J - k is set.
struct CardinalityTree {
  int k = 2;
  int levels = 1;                // J
  std::vector<int> fake_digits;  // a_j, j = 0..J-1

  explicit CardinalityTree(int group_size) : k(group_size) {
    if (k < 2) throw Error("group size must be >= 2");
    levels = 0;
    while ((1 << levels) < k) ++levels;
    if (levels == 0) levels = 1;
    const int gap = (1 << levels) - k;
    fake_digits.resize(static_cast<std::size_t>(levels));
    for (int j = 0; j < levels; ++j) fake_digits[static_cast<std::size_t>(j)] = (gap >> j) & 1;
  }

  int fakes_through(int j) const {
    int s = 0;
    for (int i = 0; i <= j; ++i) s += fake_digits[static_cast<std::size_t>(i)];
    return s;
  }
};

// Sum over groups of all pairwise squared distances, divided by the point
// count. Each unordered pair is counted twice, matching the double sum.
inline double homogeneity_objective(const std::vector<std::vector<int>>& groups,
                                    const Matrix& points) {
  double total = 0.0;
  const std::size_t d = points.cols();
  for (const auto& g : groups)
    for (std::size_t a = 0; a < g.size(); ++a)
      for (std::size_t b = a + 1; b < g.size(); ++b)
        total += 2.0 * sq_dist(points.row(static_cast<std::size_t>(g[a])),
                               points.row(static_cast<std::size_t>(g[b])), d);
  return points.rows() > 0 ? total / static_cast<double>(points.rows()) : 0.0;
}

inline double homogeneity_objective(const GroupPartition& part, const Matrix& points) {
  return homogeneity_objective(part.groups, points);
}

// Local improvement of a k-tuple partition: greedily swap units between
// nearby full groups while the total within-group squared distance drops.
// Sizes and remainder status never change, and the scan order is fixed, so
// the result is deterministic. Neighbor lists keep each pass near-linear.
inline void refine_partition(GroupPartition& part, const Matrix& points,
                             int neighbors = 8, int max_passes = 4) {
  const std::size_t d = points.cols();
  std::vector<int> full;  // indices of non-remainder groups
  for (std::size_t g = 0; g < part.groups.size(); ++g)
    if (!part.is_remainder[g]) full.push_back(static_cast<int>(g));
  const int G = static_cast<int>(full.size());
  if (G < 2) return;

  auto centroid_of = [&](const std::vector<int>& grp) {
    std::vector<double> c(d, 0.0);
    for (int u : grp)
      for (std::size_t j = 0; j < d; ++j) c[j] += points(static_cast<std::size_t>(u), j);
    for (auto& v : c) v /= static_cast<double>(grp.size());
    return c;
  };
  std::vector<std::vector<double>> cent(static_cast<std::size_t>(G));
  for (int a = 0; a < G; ++a)
    cent[static_cast<std::size_t>(a)] = part.groups[static_cast<std::size_t>(full[static_cast<std::size_t>(a)])].size() > 0
        ? centroid_of(part.groups[static_cast<std::size_t>(full[static_cast<std::size_t>(a)])])
        : std::vector<double>(d, 0.0);

  // change in a group's pairwise cost when `out` is replaced by `in`
  auto swap_delta = [&](const std::vector<int>& grp, int out, int in) {
    double delta = 0.0;
    for (int w : grp) {
      if (w == out) continue;
      delta += sq_dist(points.row(static_cast<std::size_t>(in)),
                       points.row(static_cast<std::size_t>(w)), d) -
               sq_dist(points.row(static_cast<std::size_t>(out)),
                       points.row(static_cast<std::size_t>(w)), d);
    }
    return delta;
  };

  for (int pass = 0; pass < max_passes; ++pass) {
    // nearest peer groups by centroid, recomputed once per pass
    std::vector<std::vector<int>> near(static_cast<std::size_t>(G));
    for (int a = 0; a < G; ++a) {
      std::vector<std::pair<double, int>> by_dist;
      by_dist.reserve(static_cast<std::size_t>(G) - 1);
      for (int b = 0; b < G; ++b)
        if (b != a)
          by_dist.emplace_back(sq_dist(cent[static_cast<std::size_t>(a)].data(),
                                       cent[static_cast<std::size_t>(b)].data(), d),
                               b);
      const std::size_t keep = std::min<std::size_t>(static_cast<std::size_t>(neighbors),
                                                     by_dist.size());
      std::partial_sort(by_dist.begin(), by_dist.begin() + static_cast<std::ptrdiff_t>(keep),
                        by_dist.end());
      for (std::size_t t = 0; t < keep; ++t)
        near[static_cast<std::size_t>(a)].push_back(by_dist[t].second);
    }

    bool improved = false;
    for (int a = 0; a < G; ++a) {
      auto& ga = part.groups[static_cast<std::size_t>(full[static_cast<std::size_t>(a)])];
      for (int b : near[static_cast<std::size_t>(a)]) {
        if (b < a) continue;  // visit each unordered pair once per pass
        auto& gb = part.groups[static_cast<std::size_t>(full[static_cast<std::size_t>(b)])];
        if (ga.size() != gb.size()) continue;
        bool pair_improved = true;
        while (pair_improved) {
          pair_improved = false;
          double best = -1e-12;
          std::size_t bi = 0, bj = 0;
          for (std::size_t i = 0; i < ga.size(); ++i)
            for (std::size_t j = 0; j < gb.size(); ++j) {
              const double delta =
                  swap_delta(ga, ga[i], gb[j]) + swap_delta(gb, gb[j], ga[i]);
              if (delta < best) {
                best = delta;
                bi = i;
                bj = j;
              }
            }
          if (best < -1e-12) {
            std::swap(ga[bi], gb[bj]);
            pair_improved = true;
            improved = true;
          }
        }
      }
    }
    if (!improved) break;
    for (int a = 0; a < G; ++a)
      cent[static_cast<std::size_t>(a)] =
          centroid_of(part.groups[static_cast<std::size_t>(full[static_cast<std::size_t>(a)])]);
  }
  for (auto& g : part.groups) std::sort(g.begin(), g.end());
  part.objective = homogeneity_objective(part, points);
}

namespace detail {

struct ProtoGroup {
  std::vector<int> reals;
  std::vector<int> fake_types;
  std::vector<double> centroid;  // of real units

  void recompute_centroid(const Matrix& points) {
    const std::size_t d = points.cols();
    centroid.assign(d, 0.0);
    for (int i : reals)
      for (std::size_t j = 0; j < d; ++j)
        centroid[j] += points(static_cast<std::size_t>(i), j);
    if (!reals.empty())
      for (auto& c : centroid) c /= static_cast<double>(reals.size());
  }
};

// Pick the remainder group: the unit farthest from the grand centroid plus
// its delta-1 nearest neighbors. Keeps the leftover group homogeneous and
// deterministic.
inline std::vector<int> pick_remainder(const Matrix& points, int delta) {
  const std::size_t m = points.rows(), d = points.cols();
  std::vector<double> center(d, 0.0);
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < d; ++j) center[j] += points(i, j);
  for (auto& c : center) c /= static_cast<double>(m);
  std::size_t far = 0;
  double best = -1.0;
  for (std::size_t i = 0; i < m; ++i) {
    const double dist = sq_dist(points.row(i), center.data(), d);
    if (dist > best) {
      best = dist;
      far = i;
    }
  }
  std::vector<std::pair<double, int>> by_dist;
  for (std::size_t i = 0; i < m; ++i)
    if (i != far)
      by_dist.emplace_back(sq_dist(points.row(i), points.row(far), d), static_cast<int>(i));
  std::sort(by_dist.begin(), by_dist.end());
  std::vector<int> rem{static_cast<int>(far)};
  for (int i = 0; i < delta - 1; ++i) rem.push_back(by_dist[static_cast<std::size_t>(i)].second);
  std::sort(rem.begin(), rem.end());
  return rem;
}

}  // namespace detail

// Match m points into floor(m/k) groups of exactly k plus one remainder of
// size m mod k, by iterated optimal pairing over group centroids.
inline GroupPartition build_k_tuples(const Matrix& points, int k) {
  const int m = static_cast<int>(points.rows());
  if (k < 2) throw Error("build_k_tuples: k must be >= 2");
  if (m < k) throw Error("build_k_tuples: need at least k points");

  const int delta = m % k;
  std::vector<int> remainder;
  std::vector<int> active(static_cast<std::size_t>(m));
  std::iota(active.begin(), active.end(), 0);
  if (delta > 0) {
    remainder = detail::pick_remainder(points, delta);
    std::vector<int> rest;
    std::size_t ri = 0;
    for (int i = 0; i < m; ++i) {
      if (ri < remainder.size() && remainder[ri] == i)
        ++ri;
      else
        rest.push_back(i);
    }
    active = std::move(rest);
  }

  const int l = static_cast<int>(active.size()) / k;
  const CardinalityTree tree(k);

  std::vector<detail::ProtoGroup> groups;
  groups.reserve(active.size());
  for (int i : active) {
    detail::ProtoGroup g;
    g.reals = {i};
    g.recompute_centroid(points);
    groups.push_back(std::move(g));
  }

  for (int j = 0; j < tree.levels; ++j) {
    if (tree.fake_digits[static_cast<std::size_t>(j)] == 1)
      for (int f = 0; f < l; ++f) {
        detail::ProtoGroup g;
        g.fake_types = {j};
        g.centroid.assign(points.cols(), 0.0);
        groups.push_back(std::move(g));
      }

    const int count = static_cast<int>(groups.size());
    const int want_fakes = tree.fakes_through(j);
    std::vector<std::vector<double>> w(static_cast<std::size_t>(count),
                                       std::vector<double>(static_cast<std::size_t>(count), 0.0));
    for (int a = 0; a < count; ++a)
      for (int b = a + 1; b < count; ++b) {
        const auto& ga = groups[static_cast<std::size_t>(a)];
        const auto& gb = groups[static_cast<std::size_t>(b)];
        double dist;
        bool shared_type = false;
        for (int ta : ga.fake_types)
          for (int tb : gb.fake_types)
            if (ta == tb) shared_type = true;
        const int fakes = static_cast<int>(ga.fake_types.size() + gb.fake_types.size());
        if (shared_type || (fakes > 0 && fakes != want_fakes)) {
          dist = kForbidden;
        } else if (ga.reals.empty() || gb.reals.empty()) {
          dist = 0.0;  // fakes cost nothing to attach
        } else {
          dist = sq_dist(ga.centroid.data(), gb.centroid.data(), points.cols());
        }
        w[static_cast<std::size_t>(a)][static_cast<std::size_t>(b)] = dist;
        w[static_cast<std::size_t>(b)][static_cast<std::size_t>(a)] = dist;
      }

    const auto pairs = min_weight_pairing(w);
    std::vector<detail::ProtoGroup> merged;
    merged.reserve(pairs.size());
    for (const auto& [a, b] : pairs) {
      detail::ProtoGroup g;
      const auto& ga = groups[static_cast<std::size_t>(a)];
      const auto& gb = groups[static_cast<std::size_t>(b)];
      g.reals = ga.reals;
      g.reals.insert(g.reals.end(), gb.reals.begin(), gb.reals.end());
      std::sort(g.reals.begin(), g.reals.end());
      g.fake_types = ga.fake_types;
      g.fake_types.insert(g.fake_types.end(), gb.fake_types.begin(), gb.fake_types.end());
      g.recompute_centroid(points);
      merged.push_back(std::move(g));
    }
    groups = std::move(merged);
  }

  GroupPartition part;
  const Propensity stratum(1, k);  // placeholder stratum 1/k; caller retags
  for (auto& g : groups) {
    if (g.reals.empty()) continue;
    if (static_cast<int>(g.reals.size()) != k)
      throw Error("internal: cardinality tree produced a group of size " +
                  std::to_string(g.reals.size()) + ", expected " + std::to_string(k));
    part.groups.push_back(std::move(g.reals));
    part.stratum_of_group.push_back(stratum);
    part.is_remainder.push_back(false);
  }
  if (!remainder.empty()) {
    part.groups.push_back(std::move(remainder));
    part.stratum_of_group.push_back(stratum);
    part.is_remainder.push_back(true);
  }
  refine_partition(part, points);  // sets part.objective
  return part;
}

// First principal component of the sample covariance, power iteration with a
// deterministic start. Sign fixed so the first nonzero coordinate is positive.
inline std::vector<double> leading_eigenvector(const Matrix& points) {
  const std::size_t m = points.rows(), d = points.cols();
  if (m < 2) throw Error("need at least 2 points for a principal component");
  std::vector<double> mean(d, 0.0);
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < d; ++j) mean[j] += points(i, j);
  for (auto& v : mean) v /= static_cast<double>(m);
  std::vector<double> cov(d * d, 0.0);
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t a = 0; a < d; ++a)
      for (std::size_t b = 0; b < d; ++b)
        cov[a * d + b] += (points(i, a) - mean[a]) * (points(i, b) - mean[b]);
  double trace = 0.0;
  for (std::size_t a = 0; a < d; ++a) trace += cov[a * d + a];
  if (trace <= 0.0) throw Error("degenerate covariance: all points identical");

  std::vector<double> v(d), next(d);
  for (std::size_t j = 0; j < d; ++j) v[j] = 1.0 / std::sqrt(static_cast<double>(d));
  for (int iter = 0; iter < 500; ++iter) {
    for (std::size_t a = 0; a < d; ++a) {
      next[a] = 0.0;
      for (std::size_t b = 0; b < d; ++b) next[a] += cov[a * d + b] * v[b];
    }
    double norm = 0.0;
    for (double x : next) norm += x * x;
    norm = std::sqrt(norm);
    if (norm == 0.0) {
      // start vector orthogonal to the range; perturb deterministically
      v[iter % d] += 1.0;
      continue;
    }
    double diff = 0.0;
    for (std::size_t a = 0; a < d; ++a) {
      next[a] /= norm;
      diff += std::abs(next[a] - v[a]);
    }
    const bool flipped = [&] {
      double s = 0.0;
      for (std::size_t a = 0; a < d; ++a) s += std::abs(next[a] + v[a]);
      return s < diff;
    }();
    v = next;
    if (diff < 1e-13 || (flipped && iter > 50)) break;
  }
  for (std::size_t j = 0; j < d; ++j) {
    if (std::abs(v[j]) > 1e-12) {
      if (v[j] < 0)
        for (auto& x : v) x = -x;
      break;
    }
  }
  return v;
}

// Quantile bins of the first-PC projections; fold sizes differ by at most 1.
inline std::vector<int> pca_folds(const Matrix& points, int K) {
  const std::size_t m = points.rows();
  if (K < 1) throw Error("fold count must be >= 1");
  if (m < static_cast<std::size_t>(K)) throw Error("fewer points than folds");
  std::vector<int> fold(m, 0);
  if (K == 1) return fold;
  const auto v = leading_eigenvector(points);
  std::vector<std::pair<double, int>> proj(m);
  for (std::size_t i = 0; i < m; ++i) {
    double p = 0.0;
    for (std::size_t j = 0; j < points.cols(); ++j) p += v[j] * points(i, j);
    proj[i] = {p, static_cast<int>(i)};
  }
  std::stable_sort(proj.begin(), proj.end(),
                   [](const auto& a, const auto& b) { return a.first < b.first; });
  // contiguous chunks, larger folds first
  const std::size_t base = m / static_cast<std::size_t>(K);
  const std::size_t extra = m % static_cast<std::size_t>(K);
  std::size_t pos = 0;
  for (int f = 0; f < K; ++f) {
    const std::size_t sz = base + (static_cast<std::size_t>(f) < extra ? 1 : 0);
    for (std::size_t t = 0; t < sz; ++t)
      fold[static_cast<std::size_t>(proj[pos++].second)] = f;
  }
  return fold;
}

// Fold-parallel k-tuple matching. Per-fold remainders are pooled and
// re-matched globally, leaving a single remainder for the whole input.
inline GroupPartition match_within_folds(const Matrix& points, int k, int K,
                                         int parallelism = 1) {
  const int m = static_cast<int>(points.rows());
  if (m < k) throw Error("match_within_folds: need at least k points");
  if (K <= 1) return build_k_tuples(points, k);

  const auto fold = pca_folds(points, K);
  std::vector<std::vector<int>> members(static_cast<std::size_t>(K));
  for (int i = 0; i < m; ++i) members[static_cast<std::size_t>(fold[static_cast<std::size_t>(i)])].push_back(i);

  std::vector<GroupPartition> parts(static_cast<std::size_t>(K));
  auto run_fold = [&](int f) {
    const auto& idx = members[static_cast<std::size_t>(f)];
    if (static_cast<int>(idx.size()) < k) {
      // whole fold becomes leftover
      GroupPartition p;
      if (!idx.empty()) {
        p.groups.push_back(idx);
        p.stratum_of_group.emplace_back(1, k);
        p.is_remainder.push_back(true);
      }
      parts[static_cast<std::size_t>(f)] = std::move(p);
      return;
    }
    GroupPartition local = build_k_tuples(points.select_rows(idx), k);
    for (auto& g : local.groups)
      for (auto& u : g) u = idx[static_cast<std::size_t>(u)];
    parts[static_cast<std::size_t>(f)] = std::move(local);
  };

  if (parallelism > 1) {
    std::vector<std::thread> workers;
    std::atomic_int next{0};
    const int nw = std::min<int>(parallelism, K);
    for (int w = 0; w < nw; ++w)
      workers.emplace_back([&] {
        for (int f = next.fetch_add(1); f < K; f = next.fetch_add(1)) run_fold(f);
      });
    for (auto& t : workers) t.join();
  } else {
    for (int f = 0; f < K; ++f) run_fold(f);
  }

  // merge by fold index; pool per-fold remainders
  GroupPartition out;
  std::vector<int> leftovers;
  for (int f = 0; f < K; ++f) {
    const auto& p = parts[static_cast<std::size_t>(f)];
    for (std::size_t g = 0; g < p.groups.size(); ++g) {
      if (p.is_remainder[g]) {
        leftovers.insert(leftovers.end(), p.groups[g].begin(), p.groups[g].end());
      } else {
        out.groups.push_back(p.groups[g]);
        out.stratum_of_group.push_back(p.stratum_of_group[g]);
        out.is_remainder.push_back(false);
      }
    }
  }
  std::sort(leftovers.begin(), leftovers.end());
  if (static_cast<int>(leftovers.size()) >= k) {
    GroupPartition re = build_k_tuples(points.select_rows(leftovers), k);
    for (std::size_t g = 0; g < re.groups.size(); ++g) {
      auto grp = re.groups[g];
      for (auto& u : grp) u = leftovers[static_cast<std::size_t>(u)];
      out.groups.push_back(std::move(grp));
      out.stratum_of_group.push_back(re.stratum_of_group[g]);
      out.is_remainder.push_back(re.is_remainder[g]);
    }
  } else if (!leftovers.empty()) {
    out.groups.push_back(std::move(leftovers));
    out.stratum_of_group.emplace_back(1, k);
    out.is_remainder.push_back(true);
  }
  refine_partition(out, points);  // cross-fold swaps fix strip boundaries
  return out;
}

// Pairing of whole groups by centroid, for collapsed-strata inference. Each
// union holds 2 group indices, except with an odd group count, where the
// leftover joins the pair with the nearest joint centroid (one triple).
struct GroupPairing {
  std::vector<std::vector<int>> unions;  // indices into the partition's groups
};

inline GroupPairing pair_groups(const GroupPartition& part, const Matrix& points) {
  const int G = static_cast<int>(part.groups.size());
  if (G < 2) throw Error("pair_groups needs at least 2 groups");
  const std::size_t d = points.cols();
  Matrix centroids(static_cast<std::size_t>(G), d);
  for (int g = 0; g < G; ++g) {
    for (int i : part.groups[static_cast<std::size_t>(g)])
      for (std::size_t j = 0; j < d; ++j)
        centroids(static_cast<std::size_t>(g), j) += points(static_cast<std::size_t>(i), j);
    for (std::size_t j = 0; j < d; ++j)
      centroids(static_cast<std::size_t>(g), j) /= static_cast<double>(part.groups[static_cast<std::size_t>(g)].size());
  }

  int odd_one = -1;
  std::vector<int> idx(static_cast<std::size_t>(G));
  std::iota(idx.begin(), idx.end(), 0);
  if (G % 2 == 1) {
    // leave out the group farthest from the centroid cloud, pair the rest
    std::vector<double> center(d, 0.0);
    for (int g = 0; g < G; ++g)
      for (std::size_t j = 0; j < d; ++j) center[j] += centroids(static_cast<std::size_t>(g), j);
    for (auto& c : center) c /= static_cast<double>(G);
    double best = -1.0;
    for (int g = 0; g < G; ++g) {
      const double dist = sq_dist(centroids.row(static_cast<std::size_t>(g)), center.data(), d);
      if (dist > best) {
        best = dist;
        odd_one = g;
      }
    }
    idx.erase(std::remove(idx.begin(), idx.end(), odd_one), idx.end());
  }

  MatchProblem prob;
  prob.points = centroids.select_rows(idx);
  const auto pairs = pair_min_weight(prob);

  GroupPairing out;
  for (const auto& [a, b] : pairs)
    out.unions.push_back({idx[static_cast<std::size_t>(a)], idx[static_cast<std::size_t>(b)]});

  if (odd_one >= 0) {
    // merge the leftover into the pair with nearest joint centroid
    double best = std::numeric_limits<double>::infinity();
    std::size_t best_u = 0;
    for (std::size_t u = 0; u < out.unions.size(); ++u) {
      std::vector<double> joint(d, 0.0);
      double wsum = 0.0;
      for (int g : out.unions[u]) {
        const double wg = static_cast<double>(part.groups[static_cast<std::size_t>(g)].size());
        for (std::size_t j = 0; j < d; ++j) joint[j] += wg * centroids(static_cast<std::size_t>(g), j);
        wsum += wg;
      }
      for (auto& c : joint) c /= wsum;
      const double dist = sq_dist(centroids.row(static_cast<std::size_t>(odd_one)), joint.data(), d);
      if (dist < best) {
        best = dist;
        best_u = u;
      }
    }
    out.unions[best_u].push_back(odd_one);
  }
  return out;
}

}  // namespace stratakit
