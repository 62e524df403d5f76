// stratakit command-line front end: sample | assign | design | optimize |
// pilot-design | estimate | simulate | maxcut | match. Every randomized run
// prints its seed and writes a JSON manifest next to each output so results
// can be reproduced exactly.

#include <cstdint>
#include <cstdio>
#include <fstream>
#include <iostream>
#include <random>
#include <sstream>
#include <string>
#include <thread>
#include <vector>

#include <CLI11.hpp>
#include <json.hpp>

#include "stratakit/core.hpp"
#include "stratakit/estimate.hpp"
#include "stratakit/matching.hpp"
#include "stratakit/optimal.hpp"
#include "stratakit/pilot.hpp"
#include "stratakit/randomize.hpp"
#include "stratakit/sim.hpp"

namespace sk = stratakit;
using nlohmann::json;

namespace {

constexpr const char* kVersion = "0.1.0";

std::vector<std::string> split_commas(const std::string& s) {
  std::vector<std::string> out;
  std::string cur;
  for (char c : s) {
    if (c == ',') {
      if (!cur.empty()) out.push_back(cur);
      cur.clear();
    } else {
      cur += c;
    }
  }
  if (!cur.empty()) out.push_back(cur);
  return out;
}

std::uint64_t fnv1a_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  std::uint64_t h = 0xcbf29ce484222325ULL;
  char buf[4096];
  while (in.read(buf, sizeof(buf)) || in.gcount() > 0) {
    for (std::streamsize i = 0; i < in.gcount(); ++i) {
      h ^= static_cast<unsigned char>(buf[i]);
      h *= 0x100000001b3ULL;
    }
    if (!in) break;
  }
  return h;
}

void atomic_write(const std::string& path, const std::string& content) {
  const std::string tmp = path + ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary);
    if (!out) throw sk::Error("cannot write " + tmp);
    out << content;
  }
  if (std::rename(tmp.c_str(), path.c_str()) != 0)
    throw sk::Error("cannot rename " + tmp + " to " + path);
}

void write_manifest(const std::string& out_path, const json& extra,
                    const std::vector<std::string>& inputs, std::uint64_t seed,
                    const std::vector<std::string>& argv_rec) {
  json m;
  m["version"] = kVersion;
  m["seed"] = seed;
  m["flags"] = argv_rec;
  json in = json::object();
  for (const auto& p : inputs) in[p] = fnv1a_file(p);
  m["input_hashes"] = in;
  for (auto it = extra.begin(); it != extra.end(); ++it) m[it.key()] = it.value();
  atomic_write(out_path + ".manifest.json", m.dump(2) + "\n");
}

std::uint64_t resolve_seed(std::uint64_t seed, bool seed_given) {
  if (seed_given) return seed;
  std::random_device rd;
  const std::uint64_t s =
      (static_cast<std::uint64_t>(rd()) << 32) ^ static_cast<std::uint64_t>(rd());
  std::cout << "seed: " << s << "\n";
  return s;
}

// Inject "--key value" tokens from a JSON config ahead of the user's own
// flags, so explicit flags override the config.
std::vector<std::string> apply_config(const std::vector<std::string>& args) {
  std::vector<std::string> out;
  std::string config_path;
  for (std::size_t i = 0; i < args.size(); ++i) {
    if (args[i] == "--config" && i + 1 < args.size()) {
      config_path = args[i + 1];
      ++i;
      continue;
    }
    out.push_back(args[i]);
  }
  if (config_path.empty()) return out;
  std::ifstream in(config_path);
  if (!in) throw sk::Error("cannot open config " + config_path);
  json cfg = json::parse(in);
  std::vector<std::string> injected;
  if (!out.empty()) injected.push_back(out[0]);  // subcommand stays first
  for (auto it = cfg.begin(); it != cfg.end(); ++it) {
    const std::string flag = "--" + it.key();
    if (it.value().is_boolean()) {
      if (it.value().get<bool>()) injected.push_back(flag);
    } else if (it.value().is_string()) {
      injected.push_back(flag);
      injected.push_back(it.value().get<std::string>());
    } else {
      injected.push_back(flag);
      injected.push_back(it.value().dump());
    }
  }
  for (std::size_t i = 1; i < out.size(); ++i) injected.push_back(out[i]);
  return injected;
}

sk::PropensityMap propensity_map_from(const std::string& constant_str,
                                      const std::string& column,
                                      const std::string& path, std::size_t n) {
  if (!column.empty()) {
    std::ifstream in(path);
    std::string line;
    std::getline(in, line);
    const auto header = sk::detail::split_csv_line(line);
    std::size_t col = header.size();
    for (std::size_t j = 0; j < header.size(); ++j)
      if (header[j] == column) col = j;
    if (col == header.size())
      throw sk::Error("missing column '" + column + "' in " + path);
    std::vector<sk::Propensity> vals;
    while (std::getline(in, line)) {
      if (line.empty()) continue;
      const auto cells = sk::detail::split_csv_line(line);
      vals.push_back(sk::Propensity::parse(cells.at(col)));
    }
    if (vals.size() != n) throw sk::Error("propensity column length mismatch");
    return sk::PropensityMap::from_values(std::move(vals));
  }
  return sk::PropensityMap::constant(sk::Propensity::parse(constant_str), n);
}

struct LoadedDesign {
  sk::DesignResult r;
  std::vector<std::string> ids;
};

LoadedDesign load_design_file(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw sk::Error("cannot open design file " + path);
  std::string line;
  if (!std::getline(in, line)) throw sk::Error("empty design file");
  const auto header = sk::detail::split_csv_line(line);
  auto col = [&](const std::string& name) {
    for (std::size_t j = 0; j < header.size(); ++j)
      if (header[j] == name) return j;
    throw sk::Error("design file missing column '" + name + "'");
  };
  const std::size_t c_id = col("unit_id"), c_t = col("T"), c_d = col("D"),
                    c_sg = col("sampling_group"), c_ag = col("assignment_group"),
                    c_q = col("q"), c_p = col("p");
  LoadedDesign ld;
  std::vector<int> sg, ag;
  std::vector<sk::Propensity> qv, pv;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    const auto cells = sk::detail::split_csv_line(line);
    ld.ids.push_back(cells.at(c_id));
    ld.r.T.push_back(static_cast<std::uint8_t>(std::stoi(cells.at(c_t))));
    ld.r.D.push_back(static_cast<std::uint8_t>(std::stoi(cells.at(c_d))));
    sg.push_back(std::stoi(cells.at(c_sg)));
    ag.push_back(std::stoi(cells.at(c_ag)));
    qv.push_back(sk::Propensity::parse(cells.at(c_q)));
    const std::string ps = cells.at(c_p);
    pv.push_back(ps == "0/1" ? sk::Propensity(1, 2) : sk::Propensity::parse(ps));
  }
  ld.r.q_map = sk::PropensityMap::from_values(qv);
  ld.r.p_map = sk::PropensityMap::from_values(pv);

  auto build_part = [&](const std::vector<int>& gid,
                        const std::vector<sk::Propensity>& strat) {
    sk::GroupPartition part;
    int max_g = -1;
    for (int g : gid) max_g = std::max(max_g, g);
    part.groups.assign(static_cast<std::size_t>(max_g + 1), {});
    part.stratum_of_group.assign(static_cast<std::size_t>(max_g + 1), sk::Propensity(1, 2));
    part.is_remainder.assign(static_cast<std::size_t>(max_g + 1), false);
    for (std::size_t i = 0; i < gid.size(); ++i) {
      if (gid[i] < 0) continue;
      part.groups[static_cast<std::size_t>(gid[i])].push_back(static_cast<int>(i));
      part.stratum_of_group[static_cast<std::size_t>(gid[i])] = strat[i];
    }
    // prune empty slots; size != denominator marks a remainder group
    sk::GroupPartition out;
    for (std::size_t g = 0; g < part.groups.size(); ++g) {
      if (part.groups[g].empty()) continue;
      out.groups.push_back(part.groups[g]);
      out.stratum_of_group.push_back(part.stratum_of_group[g]);
      out.is_remainder.push_back(static_cast<std::int64_t>(part.groups[g].size()) !=
                                 part.stratum_of_group[g].den);
    }
    return out;
  };
  ld.r.sampling_partition = build_part(sg, qv);
  ld.r.assignment_partition = build_part(ag, pv);
  return ld;
}

std::string design_to_string(const sk::DesignResult& r) {
  std::ostringstream os;
  sk::write_design(os, r);
  return os.str();
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"stratakit: stratified two-stage experimental design and inference"};
  app.require_subcommand(1);

  // shared option storage
  std::string in_path, out_path, pilot_path, main_path, design_path, outcomes_path;
  std::string psi1_cols_s, psi2_cols_s, cost_col, q_str = "1/2", p_str = "1/2";
  std::string q_col, p_col, y_col = "y", t_col = "T", d_col = "D";
  std::string sigma1_col, sigma0_col, balance_col, designs_s = "cr,crloc,loc";
  std::uint64_t seed = 0;
  bool seed_given = false;
  bool subordinate = false, homoskedastic = false, constant_p = false, exact = false;
  bool do_standardize = false;
  double budget = 1.0, alpha = 0.05;
  std::int64_t kmax = 8;
  int levels = 3, restarts = 64, knn = 0, k_tuple = 2, folds = 0;
  int model = 1, dim = 2, threads = static_cast<int>(std::thread::hardware_concurrency());
  std::size_t n_units = 800, reps = 1000;

  std::string config_dummy;  // consumed before parsing by apply_config
  auto add_common = [&](CLI::App* sub) {
    sub->add_option("--seed", seed, "RNG seed (printed if omitted)")
        ->each([&](const std::string&) { seed_given = true; });
    sub->add_option("--out", out_path, "output file")->required();
    sub->add_option("--threads", threads, "worker thread cap");
    sub->add_option("--config", config_dummy, "JSON config mirroring the flags");
  };

  auto* c_sample = app.add_subcommand("sample", "stratified sampling draw");
  c_sample->add_option("--in", in_path)->required();
  c_sample->add_option("--psi1-cols", psi1_cols_s)->required();
  c_sample->add_option("--q", q_str, "constant sampling share a/k");
  c_sample->add_option("--q-col", q_col, "per-unit sampling share column");
  c_sample->add_flag("--standardize", do_standardize);
  add_common(c_sample);

  auto* c_assign = app.add_subcommand("assign", "stratified assignment draw");
  c_assign->add_option("--in", in_path)->required();
  c_assign->add_option("--psi1-cols", psi1_cols_s, "assignment covariates")->required();
  c_assign->add_option("--p", p_str, "constant treatment share a/k");
  c_assign->add_option("--p-col", p_col);
  c_assign->add_flag("--standardize", do_standardize);
  add_common(c_assign);

  auto* c_design = app.add_subcommand("design", "two-stage sample-then-assign");
  c_design->add_option("--in", in_path)->required();
  c_design->add_option("--psi1-cols", psi1_cols_s)->required();
  c_design->add_option("--psi2-cols", psi2_cols_s);
  c_design->add_option("--q", q_str);
  c_design->add_option("--q-col", q_col);
  c_design->add_option("--p", p_str);
  c_design->add_option("--p-col", p_col);
  c_design->add_flag("--subordinate", subordinate);
  c_design->add_flag("--standardize", do_standardize);
  add_common(c_design);

  auto* c_opt = app.add_subcommand("optimize", "budget-optimal propensities");
  c_opt->add_option("--in", in_path)->required();
  c_opt->add_option("--sigma1-col", sigma1_col);
  c_opt->add_option("--sigma0-col", sigma0_col);
  c_opt->add_flag("--homoskedastic", homoskedastic);
  c_opt->add_option("--cost-col", cost_col)->required();
  c_opt->add_option("--psi1-cols", psi1_cols_s)->required();
  c_opt->add_option("--budget", budget)->required();
  c_opt->add_option("--kmax", kmax);
  c_opt->add_option("--levels", levels);
  c_opt->add_flag("--constant-p", constant_p);
  add_common(c_opt);

  auto* c_pilot = app.add_subcommand("pilot-design", "feasible design from a pilot");
  c_pilot->add_option("--pilot", pilot_path)->required();
  c_pilot->add_option("--main", main_path)->required();
  c_pilot->add_option("--psi1-cols", psi1_cols_s)->required();
  c_pilot->add_option("--cost-col", cost_col)->required();
  c_pilot->add_option("--y-col", y_col);
  c_pilot->add_option("--t-col", t_col);
  c_pilot->add_option("--d-col", d_col);
  c_pilot->add_option("--q-col", q_col);
  c_pilot->add_option("--p-col", p_col);
  c_pilot->add_option("--budget", budget)->required();
  c_pilot->add_option("--kmax", kmax);
  c_pilot->add_option("--levels", levels);
  c_pilot->add_option("--knn", knn, "neighbor count (0 = cross-validated)");
  c_pilot->add_flag("--constant-p", constant_p);
  add_common(c_pilot);

  auto* c_est = app.add_subcommand("estimate", "ATE estimate + collapsed-strata CI");
  c_est->add_option("--design", design_path)->required();
  c_est->add_option("--outcomes", outcomes_path)->required();
  c_est->add_option("--y-col", y_col);
  c_est->add_option("--psi1-cols", psi1_cols_s, "pairing covariates")->required();
  c_est->add_option("--alpha", alpha);
  add_common(c_est);

  auto* c_sim = app.add_subcommand("simulate", "Monte Carlo design comparison");
  c_sim->add_option("--model", model)->check(CLI::Range(1, 6));
  c_sim->add_option("--n", n_units);
  c_sim->add_option("--dim", dim);
  c_sim->add_option("--reps", reps);
  c_sim->add_option("--designs", designs_s);
  c_sim->add_option("--kmax", kmax);
  c_sim->add_option("--levels", levels);
  c_sim->add_option("--alpha", alpha);
  add_common(c_sim);

  auto* c_maxcut = app.add_subcommand("maxcut", "imbalance-optimal two-point design");
  c_maxcut->add_option("--in", in_path)->required();
  c_maxcut->add_option("--balance-col", balance_col)->required();
  c_maxcut->add_flag("--exact", exact);
  c_maxcut->add_option("--restarts", restarts);
  add_common(c_maxcut);

  auto* c_match = app.add_subcommand("match", "k-tuple matching only");
  c_match->add_option("--in", in_path)->required();
  c_match->add_option("--psi1-cols", psi1_cols_s)->required();
  c_match->add_option("--k", k_tuple)->check(CLI::Range(2, 64));
  c_match->add_option("--folds", folds, "0 = automatic");
  c_match->add_flag("--standardize", do_standardize);
  add_common(c_match);

  std::vector<std::string> args(argv + 1, argv + argc);
  std::vector<std::string> argv_rec = args;
  try {
    args = apply_config(args);
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  try {
    std::vector<std::string> rev(args.rbegin(), args.rend());
    app.parse(rev);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return 2;
  }
  if (threads < 1) threads = 1;

  try {
    auto load_table = [&](const std::string& path) {
      sk::ColumnSchema schema;
      schema.psi1_cols = split_commas(psi1_cols_s);
      schema.psi2_cols = split_commas(psi2_cols_s);
      schema.cost_col = cost_col;
      sk::UnitTable t = sk::load_units(path, schema);
      if (do_standardize) t = sk::standardize(t);
      return t;
    };

    if (*c_sample || *c_assign) {
      const sk::UnitTable t = load_table(in_path);
      seed = resolve_seed(seed, seed_given);
      sk::RandomSource rs(seed);
      sk::DesignResult r;
      r.seed = seed;
      if (*c_sample) {
        r.q_map = propensity_map_from(q_str, q_col, in_path, t.n());
        r.p_map = sk::PropensityMap::constant(sk::Propensity(1, 2), t.n());
        sk::Rng rng = rs.stream("sampling");
        auto res = sk::local_randomize(t.psi1, r.q_map, rng, threads);
        r.T = std::move(res.indicator);
        r.sampling_partition = std::move(res.partition);
        r.D.assign(t.n(), 0);
        if (res.warn_small_stratum)
          std::cerr << "warning: a stratum was smaller than its denominator; iid draws used\n";
      } else {
        r.p_map = propensity_map_from(p_str, p_col, in_path, t.n());
        r.q_map = sk::PropensityMap::constant(sk::Propensity(1, 1), t.n());
        r.T.assign(t.n(), 1);
        sk::Rng rng = rs.stream("assignment");
        auto res = sk::local_randomize(t.psi1, r.p_map, rng, threads);
        r.D = std::move(res.indicator);
        r.assignment_partition = std::move(res.partition);
        if (res.warn_small_stratum)
          std::cerr << "warning: a stratum was smaller than its denominator; iid draws used\n";
      }
      r.validate();
      atomic_write(out_path, design_to_string(r));
      write_manifest(out_path, {{"command", *c_sample ? "sample" : "assign"}}, {in_path},
                     seed, argv_rec);
      return 0;
    }

    if (*c_design) {
      const sk::UnitTable t = load_table(in_path);
      seed = resolve_seed(seed, seed_given);
      sk::RandomSource rs(seed);
      const auto q_map = propensity_map_from(q_str, q_col, in_path, t.n());
      const auto p_map = propensity_map_from(p_str, p_col, in_path, t.n());
      sk::TwoStageOptions opts;
      opts.subordinate = subordinate;
      opts.parallelism = threads;
      const sk::DesignResult r = sk::two_stage(t, q_map, p_map, rs, opts);
      if (r.warn_small_stratum)
        std::cerr << "warning: a stratum was smaller than its denominator; iid draws used\n";
      if (r.warn_subvector)
        std::cerr << "warning: sampling covariates and q are not a coordinate "
                     "subvector of the assignment covariates\n";
      atomic_write(out_path, design_to_string(r));
      write_manifest(out_path, {{"command", "design"}}, {in_path}, seed, argv_rec);
      return 0;
    }

    if (*c_opt) {
      sk::ColumnSchema schema;
      schema.psi1_cols = split_commas(psi1_cols_s);
      schema.cost_col = cost_col;
      const sk::UnitTable t = sk::load_units(in_path, schema);
      sk::VarianceProfile prof;
      if (homoskedastic) {
        prof.sigma1.assign(t.n(), 1.0);
        prof.sigma0.assign(t.n(), 1.0);
      } else {
        if (sigma1_col.empty() || sigma0_col.empty())
          throw sk::Error("need --sigma1-col and --sigma0-col (or --homoskedastic)");
        sk::ColumnSchema s2;
        s2.psi1_cols = {sigma1_col, sigma0_col};
        const sk::UnitTable ts = sk::load_units(in_path, s2);
        prof.sigma1 = ts.psi1.column(0);
        prof.sigma0 = ts.psi1.column(1);
      }
      const auto fd = sk::feasible_optimal_design(prof, t.cost, budget, kmax, levels,
                                                  constant_p);
      if (fd.budget_slack_exceeded)
        std::cerr << "warning: discretized plan misses the budget by more than the "
                     "expected slack\n";
      std::ostringstream os;
      os << "unit_id,q,p\n";
      for (std::size_t i = 0; i < t.n(); ++i)
        os << i << ',' << fd.q_map.values[i].str() << ',' << fd.p_map.values[i].str()
           << '\n';
      atomic_write(out_path, os.str());
      write_manifest(out_path, {{"command", "optimize"}}, {in_path}, 0, argv_rec);
      return 0;
    }

    if (*c_pilot) {
      sk::ColumnSchema ps;
      ps.psi1_cols = split_commas(psi1_cols_s);
      ps.y_col = y_col.empty() ? "y" : y_col;
      const sk::UnitTable pt = sk::load_units(pilot_path, ps);
      sk::PilotData pd;
      pd.psi = pt.psi1;
      pd.y = pt.y_obs;
      // T/D/q/p come from explicitly named columns of the pilot file
      auto read_binary = [&](const std::string& name) {
        std::ifstream in(pilot_path);
        std::string line;
        std::getline(in, line);
        const auto header = sk::detail::split_csv_line(line);
        std::size_t col = header.size();
        for (std::size_t j = 0; j < header.size(); ++j)
          if (header[j] == name) col = j;
        if (col == header.size())
          throw sk::Error("pilot file missing column '" + name + "'");
        std::vector<std::uint8_t> v;
        while (std::getline(in, line)) {
          if (line.empty()) continue;
          v.push_back(static_cast<std::uint8_t>(
              std::stoi(sk::detail::split_csv_line(line).at(col))));
        }
        return v;
      };
      pd.T = read_binary(t_col);
      pd.D = read_binary(d_col);
      pd.q_map = q_col.empty()
                     ? sk::PropensityMap::constant(sk::Propensity(1, 1), pt.n())
                     : propensity_map_from("", q_col, pilot_path, pt.n());
      pd.p_map = p_col.empty()
                     ? sk::PropensityMap::constant(sk::Propensity(1, 2), pt.n())
                     : propensity_map_from("", p_col, pilot_path, pt.n());

      sk::ColumnSchema ms;
      ms.psi1_cols = split_commas(psi1_cols_s);
      ms.cost_col = cost_col;
      const sk::UnitTable mt = sk::load_units(main_path, ms);
      const auto prof = sk::estimate_variance_functions(pd, mt.psi1, knn);
      const auto fd = sk::feasible_optimal_design(prof, mt.cost, budget, kmax, levels,
                                                  constant_p);
      std::ostringstream os;
      os << "unit_id,q,p,sigma1,sigma0\n";
      for (std::size_t i = 0; i < mt.n(); ++i)
        os << i << ',' << fd.q_map.values[i].str() << ',' << fd.p_map.values[i].str()
           << ',' << prof.sigma1[i] << ',' << prof.sigma0[i] << '\n';
      atomic_write(out_path, os.str());
      write_manifest(out_path, {{"command", "pilot-design"}}, {pilot_path, main_path}, 0,
                     argv_rec);
      return 0;
    }

    if (*c_est) {
      const LoadedDesign ld = load_design_file(design_path);
      sk::ColumnSchema schema;
      schema.psi1_cols = split_commas(psi1_cols_s);
      schema.y_col = y_col.empty() ? "y" : y_col;
      const sk::UnitTable ot = sk::load_units(outcomes_path, schema);
      if (ot.n() != ld.r.T.size())
        throw sk::Error("outcomes file row count does not match the design file");
      if (ot.y_obs.empty())
        throw sk::Error("outcomes file is missing column '" + schema.y_col + "'");
      const auto rep = sk::estimate_design(ot.y_obs, ld.r, ot.psi1, alpha);
      json out;
      out["theta_hat"] = rep.theta_hat;
      out["V_hat"] = rep.V_hat;
      out["components"] = {{"sample_var", rep.sample_var},
                           {"V1", rep.V1},
                           {"V0", rep.V0},
                           {"V01", rep.V01}};
      out["ci"] = {rep.ci_lo, rep.ci_hi};
      out["alpha"] = rep.alpha;
      out["n_eligible"] = rep.n_eligible;
      out["n_sampled"] = rep.n_sampled;
      out["flags"] = {{"variance_floored", rep.variance_floored},
                      {"remainder_heavy", rep.remainder_heavy},
                      {"subvector_warning", rep.subvector_warning}};
      atomic_write(out_path, out.dump(2) + "\n");
      write_manifest(out_path, {{"command", "estimate"}}, {design_path, outcomes_path}, 0,
                     argv_rec);
      return 0;
    }

    if (*c_sim) {
      seed = resolve_seed(seed, seed_given);
      sk::DgpSpec spec;
      spec.model_id = model;
      spec.n = n_units;
      spec.nu = dim;
      std::vector<sk::DesignId> ds;
      for (const auto& s : split_commas(designs_s)) ds.push_back(sk::parse_design(s));
      sk::SimConfig cfg;
      cfg.k_max = kmax;
      cfg.levels_max = levels;
      cfg.alpha = alpha;
      cfg.parallelism = threads;
      const auto tab = sk::run_design_comparison(spec, ds, reps, seed, cfg);
      std::ostringstream os;
      os << "design,sd,sd_ratio,mean_ci_len,pct_delta_ci,coverage,mean_n_sampled\n";
      char buf[256];
      for (const auto& m : tab.rows) {
        std::snprintf(buf, sizeof(buf), "%s,%.6f,%.4f,%.6f,%.2f,%.4f,%.2f\n",
                      sk::design_name(m.id).c_str(), m.sd, m.sd_ratio, m.mean_ci_len,
                      m.pct_delta_ci, m.coverage, m.mean_n_sampled);
        os << buf;
      }
      atomic_write(out_path, os.str());
      write_manifest(out_path,
                     {{"command", "simulate"}, {"true_ate", tab.true_ate},
                      {"reps", tab.reps}},
                     {}, seed, argv_rec);
      return 0;
    }

    if (*c_maxcut) {
      sk::ColumnSchema schema;
      schema.psi1_cols = {balance_col};
      const sk::UnitTable t = sk::load_units(in_path, schema);
      seed = resolve_seed(seed, seed_given);
      sk::RandomSource rs(seed);
      sk::Rng rng = rs.stream("maxcut");
      const auto res =
          sk::alternating_design(t.psi1.column(0), exact, rng, restarts, threads);
      std::ostringstream os;
      os << "unit_id,d,d_star\n";
      for (std::size_t i = 0; i < t.n(); ++i)
        os << i << ',' << int(res.d[i]) << ',' << int(res.d_star[i]) << '\n';
      atomic_write(out_path, os.str());
      write_manifest(out_path, {{"command", "maxcut"}, {"objective", res.objective}},
                     {in_path}, seed, argv_rec);
      return 0;
    }

    if (*c_match) {
      const sk::UnitTable t = load_table(in_path);
      const int K = folds > 0
                        ? folds
                        : std::max<int>(1, static_cast<int>(t.n()) / sk::kFoldTarget);
      const auto part = sk::match_within_folds(t.psi1, k_tuple, K, threads);
      std::ostringstream os;
      sk::write_partition(os, part);
      atomic_write(out_path, os.str());
      write_manifest(out_path, {{"command", "match"}, {"objective", part.objective}},
                     {in_path}, 0, argv_rec);
      return 0;
    }
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 0;
}
