#pragma once

#include "bsmp/config.hpp"
#include "bsmp/core.hpp"
#include "bsmp/cost.hpp"
#include "bsmp/costate_field.hpp"
#include "bsmp/feynman_kac.hpp"
#include "bsmp/meanfield.hpp"
#include "bsmp/problem.hpp"
#include "bsmp/rng.hpp"
#include "bsmp/sde.hpp"
#include "bsmp/smp.hpp"
#include "bsmp/three_step.hpp"

#include <CLI11.hpp>
#include <json.hpp>

#include <cmath>
#include <filesystem>
#include <fstream>
#include <ostream>
#include <random>
#include <string>
#include <vector>

namespace bsmp::cli {

using nlohmann::json;

/// Values quoted in the source text for the example.
inline json stated_values() {
  return {{"x_star", ExampleEStatedValues::x_star},
          {"u_bar", ExampleEStatedValues::u_bar},
          {"J", ExampleEStatedValues::J}};
}

/// Outcome of one subcommand: the report body and where it goes.
struct CommandOutput {
  std::string report_name;
  json report;
  bool pass = false;
};

/// Accumulates named checks and the failure list of a report.
class Checks {
 public:
  void add(const std::string& name, bool pass, json detail, const std::string& failure = {}) {
    detail["name"] = name;
    detail["pass"] = pass;
    list_.push_back(std::move(detail));
    if (!pass) failures_.push_back(failure.empty() ? name : failure + ": " + name);
  }
  /// Precision requirement: the estimate is too noisy to judge.
  void add_precision(const std::string& name, double std_error, double tolerance) {
    add(name, std_error <= tolerance, {{"std_error", std_error}, {"tolerance", tolerance}},
        "statistical tolerance not met");
  }
  void fail(const std::string& message) { failures_.push_back(message); }
  bool pass() const { return failures_.empty(); }
  const json& list() const { return list_; }
  const std::vector<std::string>& failures() const { return failures_; }

 private:
  json list_ = json::array();
  std::vector<std::string> failures_;
};

inline json vec_json(const Vec& v) {
  json a = json::array();
  for (Eigen::Index i = 0; i < v.size(); ++i) a.push_back(v(i));
  return a;
}

/// Builtin control problem with parameter overrides.
inline ControlProblem resolve_problem(KeyValueConfig& cfg, bool* is_default = nullptr) {
  const auto name = cfg.get_string("problem", "example_e");
  if (name != "example_e") throw ConfigError("unknown builtin problem `" + name + "`");
  ExampleEOptions o;
  o.horizon = cfg.get_double("horizon", 1.0);
  o.initial_state = cfg.get_double("initial_state", 0.0);
  o.sigma = cfg.get_double("sigma", 1.0);
  o.control_lower = cfg.get_double("control_lower", -2.0);
  o.control_upper = cfg.get_double("control_upper", 2.0);
  if (!(o.horizon > 0.0)) throw ConfigError("horizon must be positive");
  if (!(o.sigma >= 0.0)) throw ConfigError("sigma must be non-negative");
  if (!(o.control_lower < o.control_upper)) throw ConfigError("control_lower must be below control_upper");
  if (is_default) {
    const ExampleEOptions d;
    *is_default = o.horizon == d.horizon && o.initial_state == d.initial_state && o.sigma == d.sigma &&
                  o.control_lower == d.control_lower && o.control_upper == d.control_upper;
  }
  return build_example_e(o);
}

/// paths, steps and seed from the config; workers is execution-only and is
/// kept out of the resolved config so reports do not depend on it.
inline McConfig resolve_mc(KeyValueConfig& cfg, std::size_t paths, std::size_t steps, int workers) {
  McConfig mc;
  mc.n_paths = cfg.get_size("paths", paths);
  mc.n_steps = cfg.get_size("steps", steps);
  mc.seed = cfg.get_u64("seed", 0);
  mc.workers = workers;
  if (mc.n_paths < 2) throw ConfigError("paths must be at least 2");
  if (mc.n_steps < 1) throw ConfigError("steps must be at least 1");
  return mc;
}

/// Policy file: `type = constant` with `value`, or `type = piecewise_constant`
/// with `breakpoints` and `values` (one value per piece).
inline ControlPolicy load_policy_file(const std::string& path, const ControlProblem& problem) {
  auto pc = KeyValueConfig::load(path);
  const auto type = pc.get_string("type", "");
  ControlPolicy policy = ControlPolicy::constant(make_vec({0.0}));
  if (type == "constant") {
    const auto v = pc.get_list("value", {});
    if (v.size() != 1) throw ConfigError("policy `value` must hold one number");
    policy = ControlPolicy::constant(make_vec({v[0]}));
  } else if (type == "piecewise_constant") {
    const auto bp = pc.get_list("breakpoints", {});
    const auto vals = pc.get_list("values", {});
    if (vals.size() != bp.size() + 1) throw ConfigError("policy needs one value per piece");
    std::vector<Vec> vs;
    for (double v : vals) vs.push_back(make_vec({v}));
    policy = ControlPolicy::piecewise_constant(bp, vs);
  } else {
    throw ConfigError("policy file " + path + " needs `type = constant` or `type = piecewise_constant`");
  }
  pc.reject_unknown();
  std::vector<Vec> states;
  for (int k = -8; k <= 8; ++k) states.push_back(make_vec({0.5 * k}));
  if (!policy_respects_domain(problem, policy, uniform_time_grid(0.0, problem.horizon, 16), states))
    throw ConfigError("policy leaves the control domain");
  return policy;
}

/// Fixed point of the example by bisection of its analytic residual.
inline FixedPointResult example_fixed_point(KeyValueConfig& cfg, const ControlProblem& problem) {
  const double lo = cfg.get_double("bracket_lo", -1.0);
  const double hi = cfg.get_double("bracket_hi", 0.0);
  const double tol = cfg.get_double("bisection_tol", 1e-12);
  if (!(tol > 0.0)) throw ConfigError("bisection_tol must be positive");
  return solve_fixed_point(problem, lo, hi, tol);
}

/// `policy = optimal` (the example's constant optimum), `policy = PATH`, or
/// `policy_value = u` for a constant.
inline ControlPolicy resolve_policy(KeyValueConfig& cfg, const ControlProblem& problem, json& description) {
  if (cfg.has("policy_value")) {
    const double u = cfg.get_double("policy_value", 0.0);
    description = {{"type", "constant"}, {"value", u}};
    if (!problem.control_domain.contains(make_vec({u}), 1e-12)) throw ConfigError("policy_value is outside the box");
    return ControlPolicy::constant(make_vec({u}));
  }
  const auto source = cfg.get_string("policy", "optimal");
  if (source == "optimal") {
    const auto fp = example_fixed_point(cfg, problem);
    const auto cf = example_e_closed_forms(fp.m_star(0), problem.horizon, problem.initial_state(0));
    description = {{"type", "optimal"}, {"value", cf.u_bar}};
    return ControlPolicy::constant(make_vec({cf.u_bar}));
  }
  description = {{"type", "file"}, {"path", source}};
  return load_policy_file(source, problem);
}

inline FieldOptions resolve_field(KeyValueConfig& cfg, const McConfig& mc, double horizon) {
  FieldOptions f;
  f.n_paths = cfg.get_size("field_paths", 2000);
  f.points_per_dim = static_cast<int>(cfg.get_size("field_points", 8));
  f.steps_per_unit_time = static_cast<double>(mc.n_steps) / horizon;
  f.seed = rng::derive_seed(mc.seed, 0xF1E1Dull);
  f.workers = static_cast<std::size_t>(mc.workers);
  return f;
}

inline json smp_report_json(const SmpReport& rep) {
  json j;
  j["pass"] = rep.pass;
  j["tolerance"] = rep.tolerance;
  j["min_residual"] = rep.min_residual;
  j["max_gap"] = rep.max_gap;
  j["terminal_mean"] = vec_json(rep.terminal_mean);
  j["G_grad"] = vec_json(rep.G_grad);
  j["objective_via_formula"] = rep.objective_via_formula;
  j["objective_formula_std_error"] = rep.objective_formula_std_error;
  j["objective_via_mc"] = rep.objective_via_mc.mean;
  j["objective_mc_std_error"] = rep.objective_via_mc.total_std_error;
  j["n_paths"] = rep.n_paths;
  j["n_steps"] = rep.n_steps;
  j["seed"] = rep.seed;
  json rows = json::array();
  for (std::size_t k = 0; k < rep.times.size(); ++k) {
    double row_min = rep.residuals[k].empty() ? 0.0 : rep.residuals[k].front();
    for (double r : rep.residuals[k]) row_min = std::min(row_min, r);
    rows.push_back({{"t", rep.times[k]},
                    {"min_residual", row_min},
                    {"gap", rep.min_gaps[k]},
                    {"minimizer", vec_json(rep.minimizers[k])},
                    {"candidate", vec_json(rep.candidate_controls[k])}});
  }
  j["per_time"] = rows;
  return j;
}

// ---------------------------------------------------------------------------
// Subcommands

inline CommandOutput cmd_example_e(KeyValueConfig& cfg, int workers) {
  bool default_problem = false;
  const auto problem = resolve_problem(cfg, &default_problem);
  const auto mc = resolve_mc(cfg, 200000, 200, workers);
  const double se_tol = cfg.get_double("se_tolerance", 5e-3);
  const std::size_t fk_points = cfg.get_size("fk_points", 5);
  const std::size_t fk_paths = cfg.get_size("fk_paths", 20000);
  const std::size_t fk_steps = cfg.get_size("fk_steps", 50);
  const std::size_t smp_paths = cfg.get_size("smp_paths", 20000);
  const std::size_t smp_steps = cfg.get_size("smp_steps", 100);
  SmpOptions so;
  so.n_times = cfg.get_size("smp_times", 21);
  so.n_controls = cfg.get_size("smp_controls", 41);
  so.tolerance = cfg.get_double("smp_tolerance", 1e-5);
  const auto fp = example_fixed_point(cfg, problem);
  auto field_opt = resolve_field(cfg, mc, problem.horizon);
  field_opt.steps_per_unit_time = static_cast<double>(smp_steps) / problem.horizon;
  cfg.reject_unknown();
  if (fk_paths < 2 || smp_paths < 2 || smp_steps < 1 || fk_steps < 1) throw ConfigError("path counts must be at least 2");

  const double m = fp.m_star(0);
  const auto cf = example_e_closed_forms(m, problem.horizon, problem.initial_state(0));
  const auto policy = ControlPolicy::constant(make_vec({cf.u_bar}));
  Checks checks;
  json report;
  report["command"] = "example-e";
  report["m_star"] = m;
  report["u_bar"] = cf.u_bar;
  report["fixed_point"] = {{"method", fp.method},
                           {"iterations", fp.iterations},
                           {"residual", fp.residual},
                           {"tolerance", fp.tolerance},
                           {"multiple_roots_detected", fp.multiple_roots_detected}};
  checks.add("fixed_point_converged", fp.converged, {{"residual", fp.residual}});
  checks.add("u_bar_inside_box", problem.control_domain.contains(make_vec({cf.u_bar}), 0.0), {{"u_bar", cf.u_bar}});
  if (default_problem)
    checks.add("fixed_point_matches_stated_value", std::abs(m - ExampleEStatedValues::x_star) <= 1e-5,
               {{"derived", m}, {"stated", ExampleEStatedValues::x_star}});

  report["closed_forms"] = {{"M0", cf.M(0.0)}, {"L0", cf.L(0.0)}, {"N", cf.N}, {"psi", cf.psi}, {"eta", cf.eta}};
  report["J_formula"] = cf.J;

  const auto cost = estimate_cost(problem, policy, mc);
  report["J_mc"] = cost.mean;
  report["J_mc_std_error"] = cost.total_std_error;
  checks.add("objective_mc_agrees", std::abs(cf.J - cost.mean) <= 3.0 * cost.total_std_error,
             {{"J_formula", cf.J}, {"J_mc", cost.mean}, {"std_error", cost.total_std_error}});
  checks.add_precision("objective_mc_precision", cost.total_std_error, se_tol);

  json fk = json::array();
  std::mt19937_64 gen(rng::derive_seed(mc.seed, 0xFCull));
  std::uniform_real_distribution<double> tdist(0.0, problem.horizon), xdist(-2.0, 2.0);
  for (std::size_t k = 0; k < fk_points; ++k) {
    const double t = tdist(gen), x = xdist(gen);
    McConfig c{fk_paths, fk_steps, rng::derive_seed(mc.seed, 2 * k + 1), workers};
    const auto th = fk_value(theta_spec(problem, policy), t, make_vec({x}), c);
    c.seed = rng::derive_seed(mc.seed, 2 * k + 2);
    const auto g = fk_value(g_spec(problem, policy, 0), t, make_vec({x}), c);
    const bool ok = std::abs(th.value - cf.theta(t, x)) <= 3.0 * th.std_error + 1e-12 &&
                    std::abs(g.value - cf.g(t, x)) <= 3.0 * g.std_error + 1e-12;
    fk.push_back({{"t", t},
                  {"x", x},
                  {"theta_mc", th.value},
                  {"theta_std_error", th.std_error},
                  {"theta_closed_form", cf.theta(t, x)},
                  {"g_mc", g.value},
                  {"g_std_error", g.std_error},
                  {"g_closed_form", cf.g(t, x)},
                  {"pass", ok}});
    checks.add("feynman_kac_point_" + std::to_string(k), ok, {{"t", t}, {"x", x}});
    checks.add_precision("feynman_kac_precision_" + std::to_string(k), std::max(th.std_error, g.std_error), se_tol);
  }
  report["fk_checks"] = fk;

  so.cfg = McConfig{smp_paths, smp_steps, rng::derive_seed(mc.seed, 0x5Aull), workers};
  so.field = field_opt;
  const auto smp = build_smp_report(problem, policy, so);
  report["smp"] = smp_report_json(smp);
  checks.add("smp_variational_inequality", smp.pass, {{"min_residual", smp.min_residual}});

  report["paper_values"] = stated_values();
  report["discrepancy_notes"] = json::array(
      {{{"quantity", "u_bar"},
        {"derived", cf.u_bar},
        {"stated", ExampleEStatedValues::u_bar},
        {"note", "stated with the opposite sign; the Hamiltonian minimizer -1 - m e^{-m^2} is negative"}},
       {{"quantity", "J"},
        {"derived", cf.J},
        {"stated", ExampleEStatedValues::J},
        {"note", "theta(0,0) + G(g(0,0)) from the closed forms differs from the stated value"}},
       {{"quantity", "x_star"},
        {"derived", m},
        {"stated", ExampleEStatedValues::x_star},
        {"note", "agrees to the stated precision"}}});
  report["checks"] = checks.list();
  report["failures"] = checks.failures();
  report["pass"] = checks.pass();
  return {"example_e_report", report, checks.pass()};
}

inline CommandOutput cmd_smp_check(KeyValueConfig& cfg, int workers) {
  const auto problem = resolve_problem(cfg);
  const auto mc = resolve_mc(cfg, 20000, 100, workers);
  SmpOptions so;
  so.n_times = cfg.get_size("times", 21);
  so.n_controls = cfg.get_size("controls", 41);
  so.n_sample_states = cfg.get_size("sample_states", 5);
  so.tolerance = cfg.get_double("tolerance", 1e-5);
  so.cfg = mc;
  so.field = resolve_field(cfg, mc, problem.horizon);
  const auto taus = cfg.get_list("spike_tau", {0.5});
  const auto epss = cfg.get_list("spike_eps", {0.1});
  const auto vals = cfg.get_list("spike_value", {-2.0, 1.0});
  json policy_desc;
  const auto policy = resolve_policy(cfg, problem, policy_desc);
  cfg.reject_unknown();
  std::vector<SpikePerturbation> spikes;
  for (double tau : taus)
    for (double eps : epss)
      for (double v : vals) spikes.push_back(make_spike(problem, policy, tau, eps, make_vec({v})));
  const auto times = uniform_time_grid(0.0, problem.horizon, mc.n_steps);
  for (const auto& s : spikes)
    try {
      check_policy_grid(s.policy(), times);
    } catch (const GridMismatchError& e) {
      throw ConfigError(std::string("spike window off the simulation grid: ") + e.what());
    }

  MonteCarloCostateField field(problem, policy, so.field);
  const auto rep = build_smp_report(problem, policy, so, field);
  Checks checks;
  checks.add("variational_inequality", rep.min_residual >= -so.tolerance, {{"min_residual", rep.min_residual}});
  checks.add("hamiltonian_gap", rep.max_gap <= so.tolerance, {{"max_gap", rep.max_gap}});
  json spike_rows = json::array();
  for (std::size_t k = 0; k < spikes.size(); ++k) {
    McConfig c = mc;
    c.seed = rng::derive_seed(mc.seed, 0x5B00ull + k);
    const auto r = spike_difference_check(problem, spikes[k], field, c);
    const bool nonneg = r.lhs >= -3.0 * r.lhs_std_error;
    spike_rows.push_back({{"tau", spikes[k].tau},
                          {"epsilon", spikes[k].epsilon},
                          {"value", spikes[k].spike_value(0)},
                          {"lhs", r.lhs},
                          {"rhs", r.rhs},
                          {"lhs_std_error", r.lhs_std_error},
                          {"combined_std_error", r.combined_std_error},
                          {"identity_pass", r.pass},
                          {"lhs_nonnegative", nonneg}});
    checks.add("spike_identity_" + std::to_string(k), r.pass, {{"lhs", r.lhs}, {"rhs", r.rhs}});
    checks.add("spike_optimality_" + std::to_string(k), nonneg, {{"lhs", r.lhs}, {"std_error", r.lhs_std_error}});
  }
  json report;
  report["command"] = "smp-check";
  report["policy"] = policy_desc;
  report["smp"] = smp_report_json(rep);
  report["spikes"] = spike_rows;
  report["checks"] = checks.list();
  report["failures"] = checks.failures();
  report["verdict"] = checks.pass() ? "pass" : "fail";
  report["pass"] = checks.pass();
  return {"smp_report", report, checks.pass()};
}

inline CommandOutput cmd_fk_eval(KeyValueConfig& cfg, int workers, const std::filesystem::path& out_dir) {
  const auto problem = resolve_problem(cfg);
  const auto mc = resolve_mc(cfg, 100000, 100, workers);
  const auto field_name = cfg.get_string("field", "theta");
  const double t = cfg.get_double("t", 0.0);
  const auto xs = cfg.get_list("x", {0.0});
  const bool gradient = cfg.get_bool("gradient", false);
  json policy_desc;
  const auto policy = resolve_policy(cfg, problem, policy_desc);
  cfg.reject_unknown();
  LinearBspdeSpec spec;
  if (field_name == "theta") spec = theta_spec(problem, policy);
  else if (field_name == "g") spec = g_spec(problem, policy, 0);
  else throw ConfigError("field must be `theta` or `g`");
  if (!(t >= 0.0 && t <= problem.horizon)) throw ConfigError("t must lie in [0, T]");

  std::vector<Vec> points;
  for (double x : xs) points.push_back(make_vec({x}));
  const auto est = fk_field_on_grid(spec, t, points, mc, gradient);
  json rows = json::array();
  bool finite = true;
  for (std::size_t k = 0; k < points.size(); ++k) {
    json r = {{"t", t}, {"x", xs[k]}, {"value", est[k].value}, {"std_error", est[k].std_error}};
    if (est[k].gradient) {
      r["gradient"] = (*est[k].gradient)(0);
      r["gradient_std_error"] = (*est[k].gradient_std_error)(0);
    }
    finite = finite && std::isfinite(est[k].value) && std::isfinite(est[k].std_error);
    rows.push_back(r);
  }
  std::ofstream csv(out_dir / "fk_field.csv");
  write_field_csv(csv, t, points, est);
  json report;
  report["command"] = "fk-eval";
  report["field"] = field_name;
  report["policy"] = policy_desc;
  report["points"] = rows;
  report["failures"] = finite ? json::array() : json::array({"non-finite estimate"});
  report["pass"] = finite;
  return {"fk_report", report, finite};
}

/// Builtin decoupling-equation spec by name.
inline FbspdeSpec resolve_fbspde_spec(KeyValueConfig& cfg, const std::string& name) {
  if (name == "manufactured") return manufactured_spec(cfg.get_double("horizon", 0.5));
  if (name == "constant") return constant_spec(cfg.get_double("constant_value", 1.0), cfg.get_double("horizon", 1.0));
  if (name == "example_e_frozen") {
    double u = 0.0;
    if (cfg.has("u_bar")) {
      u = cfg.get_double("u_bar", 0.0);
    } else {
      const auto fp = solve_fixed_point(build_example_e(), -1.0, 0.0, 1e-12);
      u = cfg.get_double("u_bar", example_e_closed_forms(fp.m_star(0)).u_bar);
    }
    return example_e_frozen_spec(u, cfg.get_double("horizon", 1.0));
  }
  throw ConfigError("unknown spec `" + name + "` (manufactured, constant, example_e_frozen)");
}

inline CommandOutput cmd_fbspde_solve(KeyValueConfig& cfg, int workers, const std::filesystem::path& out_dir) {
  const auto name = cfg.get_string("spec", "manufactured");
  const auto spec = resolve_fbspde_spec(cfg, name);
  if (!(spec.horizon > 0.0)) throw ConfigError("horizon must be positive");
  GridConfig grid;
  grid.L = cfg.get_double("L", name == "manufactured" ? 5.0 : 0.0);
  grid.n_xy = cfg.get_size("n_xy", 41);
  grid.n_t = cfg.get_size("n_t", 0);
  grid.picard_tol = cfg.get_double("picard_tol", 1e-8);
  grid.picard_max = static_cast<int>(cfg.get_size("picard_max", 50));
  grid.output_stride = cfg.get_size("output_stride", 0);
  grid.workers = workers;
  const std::size_t levels = cfg.get_size("levels", 1);
  const double residual_bound = cfg.get_double("residual_bound", 2e-2);
  const double error_bound = cfg.get_double("error_bound", 2e-2);
  const std::size_t sample_paths = cfg.get_size("sample_paths", 5);
  const auto mc = resolve_mc(cfg, 200, 1, workers);
  cfg.reject_unknown();
  if (levels < 1 || levels > 4) throw ConfigError("levels must lie in 1..4");
  if (grid.n_xy < 5) throw ConfigError("n_xy must be at least 5");
  if (grid.L < 0.0) throw ConfigError("L must be positive");

  json report;
  report["command"] = "fbspde-solve";
  report["spec"] = name;
  Checks checks;
  json level_rows = json::array();
  PdeSolution finest;
  double prev_res = 0.0, prev_err = 0.0;
  for (std::size_t lev = 0; lev < levels; ++lev) {
    GridConfig g = grid;
    g.n_xy = (grid.n_xy - 1) * (std::size_t{1} << lev) + 1;
    if (grid.n_t > 0) g.n_t = grid.n_t * (std::size_t{1} << (2 * lev));
    PdeSolution sol;
    try {
      sol = solve_decoupling_pde(spec, g);
    } catch (const CflError& e) {
      report["error"] = {{"kind", "cfl"}, {"requested_dt", e.requested_dt()}, {"admissible_dt", e.admissible_dt()},
                         {"message", e.what()}};
      checks.fail(e.what());
      break;
    } catch (const ConvergenceError& e) {
      report["error"] = {{"kind", "picard"}, {"history", e.history()}, {"message", e.what()}};
      checks.fail(e.what());
      break;
    }
    json row = {{"n_xy", g.n_xy},
                {"n_t", sol.n_t},
                {"L", sol.L},
                {"dx", sol.h},
                {"dt", sol.dt},
                {"admissible_dt", sol.admissible_dt},
                {"picard_sweeps", sol.picard_iterations},
                {"final_update", sol.final_update}};
    const double res = pde_residual(sol, spec);
    row["residual"] = res;
    if (spec.exact) {
      const double err = max_error_vs_exact(sol, spec);
      row["max_error"] = err;
      if (lev > 0 && prev_err > 1e-10) row["error_ratio"] = prev_err / err;
      prev_err = err;
    }
    if (lev > 0 && prev_res > 1e-10) row["residual_ratio"] = prev_res / res;
    prev_res = res;
    level_rows.push_back(row);
    finest = std::move(sol);
  }
  report["levels"] = level_rows;
  if (!level_rows.empty() && checks.pass()) {
    const auto& last = level_rows.back();
    checks.add("residual_bound", last["residual"].get<double>() <= residual_bound,
               {{"residual", last["residual"]}, {"bound", residual_bound}});
    if (last.contains("max_error"))
      checks.add("error_bound", last["max_error"].get<double>() <= error_bound,
                 {{"max_error", last["max_error"]}, {"bound", error_bound}});
    for (std::size_t k = 1; k < level_rows.size(); ++k)
      for (const char* key : {"residual_ratio", "error_ratio"})
        if (level_rows[k].contains(key)) {
          const double r = level_rows[k][key].get<double>();
          checks.add(std::string(key) + "_" + std::to_string(k), r >= 3.0 && r <= 5.0, {{"ratio", r}});
        }

    McConfig run = mc;
    run.n_paths = std::max<std::size_t>(mc.n_paths, 1);
    const auto three = assemble_three_step(finest, spec, run);
    report["three_step"] = {{"n_paths", three.n_paths},
                            {"stored_levels", three.times.size()},
                            {"clamped_paths", three.clamped_evaluations},
                            {"seed", three.seed}};
    std::ofstream bin(out_dir / "theta_grid.bin", std::ios::binary);
    write_grid_binary(finest, bin);
    std::ofstream slice(out_dir / "theta_t0.csv");
    write_slice_csv(finest, 0, slice);
    std::ofstream paths(out_dir / "paths.csv");
    paths.precision(17);
    paths << "path,t,X,x,p";
    for (int r = 0; r < three.noise_dim; ++r) paths << ",q" << r;
    paths << '\n';
    for (std::size_t p = 0; p < std::min(sample_paths, three.n_paths); ++p)
      for (std::size_t l = 0; l < three.times.size(); ++l)
        for (std::size_t i = 0; i < three.n_x; ++i) {
          paths << p << ',' << three.times[l] << ',' << three.state(l, p) << ',' << three.x_grid[i] << ','
                << three.p_at(l, p, i);
          for (int r = 0; r < three.noise_dim; ++r) paths << ',' << three.q_at(l, p, i, r);
          paths << '\n';
        }
  }
  report["checks"] = checks.list();
  report["failures"] = checks.failures();
  report["pass"] = checks.pass();
  return {"fbspde_report", report, checks.pass()};
}

// ---------------------------------------------------------------------------
// Entry point

/// Writes `report` as JSON, plus a flattened CSV or a table on `out` when
/// asked. The resolved config (seed included, workers excluded) is embedded.
inline void emit_report(const CommandOutput& res, const KeyValueConfig& cfg, const std::filesystem::path& out_dir,
                        const std::string& format, std::ostream& out) {
  json report = res.report;
  json config = json::object();
  for (const auto& [k, v] : cfg.resolved()) config[k] = v;
  report["config"] = config;
  const auto json_path = out_dir / (res.report_name + ".json");
  std::ofstream js(json_path);
  js << report.dump(2) << '\n';
  if (!js) throw ConfigError("cannot write " + json_path.string());
  const auto flat = report.flatten();
  if (format == "csv") {
    std::ofstream csv(out_dir / (res.report_name + ".csv"));
    csv << "key,value\n";
    for (const auto& [k, v] : flat.items()) csv << k << ',' << v.dump() << '\n';
  } else if (format == "table") {
    for (const auto& [k, v] : flat.items()) out << k << "  " << v.dump() << '\n';
  }
  out << report["command"].get<std::string>() << ": " << (res.pass ? "PASS" : "FAIL") << " (" << json_path.string()
      << ")\n";
}

/// Exit codes: 0 success, 1 check failure or numerical error, 2 usage or
/// config error.
inline int run_cli(int argc, const char* const* argv, std::ostream& out, std::ostream& err) {
  CLI::App app{"Mean-field stochastic maximum principle toolkit"};
  app.require_subcommand(1);
  std::string config_path, out_dir = ".", format = "json", seed, paths, steps;
  int workers = 1;
  const std::vector<std::pair<std::string, std::string>> commands = {
      {"example-e", "fixed point, closed forms and optimality checks for the scalar example"},
      {"smp-check", "maximum principle certificate for a policy"},
      {"fk-eval", "Feynman-Kac evaluation of a backward field"},
      {"fbspde-solve", "three-step scheme for a builtin decoupling spec"}};
  for (const auto& [name, desc] : commands) {
    auto* sub = app.add_subcommand(name, desc);
    sub->add_option("--config", config_path, "key = value config file");
    sub->add_option("--out", out_dir, "output directory");
    sub->add_option("--seed", seed, "base seed");
    sub->add_option("--paths", paths, "Monte Carlo paths");
    sub->add_option("--steps", steps, "time steps");
    sub->add_option("--workers", workers, "worker threads")->check(CLI::Range(1, 1024));
    sub->add_option("--format", format, "json, csv or table")->check(CLI::IsMember({"json", "csv", "table"}));
  }
  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp&) {
    out << app.help();
    return 0;
  } catch (const CLI::ParseError& e) {
    err << e.what() << '\n';
    return 2;
  }
  const std::string command = app.get_subcommands().front()->get_name();
  try {
    KeyValueConfig cfg = config_path.empty() ? KeyValueConfig{} : KeyValueConfig::load(config_path);
    if (!seed.empty()) cfg.set("seed", seed);
    if (!paths.empty()) cfg.set("paths", paths);
    if (!steps.empty()) cfg.set("steps", steps);
    std::error_code ec;
    std::filesystem::create_directories(out_dir, ec);
    if (ec) throw ConfigError("cannot create output directory " + out_dir + ": " + ec.message());
    CommandOutput res;
    if (command == "example-e") res = cmd_example_e(cfg, workers);
    else if (command == "smp-check") res = cmd_smp_check(cfg, workers);
    else if (command == "fk-eval") res = cmd_fk_eval(cfg, workers, out_dir);
    else res = cmd_fbspde_solve(cfg, workers, out_dir);
    emit_report(res, cfg, out_dir, format, out);
    if (!res.pass)
      for (const auto& f : res.report["failures"]) err << command << ": " << f.get<std::string>() << '\n';
    return res.pass ? 0 : 1;
  } catch (const ArgumentError& e) {
    err << command << ": " << e.what() << '\n';
    return 2;
  } catch (const std::exception& e) {
    err << command << ": " << e.what() << '\n';
    return 1;
  }
}

}  // namespace bsmp::cli
