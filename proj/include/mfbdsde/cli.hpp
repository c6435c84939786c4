#pragma once

#include <chrono>
#include <cmath>
#include <cstdint>
#include <cstdlib>
#include <ctime>
#include <filesystem>
#include <functional>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "backward.hpp"
#include "error.hpp"
#include "forward.hpp"
#include "parallel.hpp"
#include "report.hpp"
#include "scenarios.hpp"
#include "verify.hpp"

namespace mfbdsde {

inline constexpr const char* artifact_version = "1.0.0";

enum ExitCode : int { exit_pass = 0, exit_failed_check = 1, exit_config = 2, exit_solver = 3 };

struct CliRequest {
  std::string subcommand;
  std::string scenario;       // file path or catalog id
  std::string scenario_text;  // takes precedence over `scenario` (replay)
  std::optional<std::uint64_t> seed;
  bool seed_from_env = true;  // MFBDSDE_SEED, below the flag
  std::string out_dir;        // empty: no files
  std::optional<double> dt;
  std::optional<std::size_t> particles, bpaths;
  std::optional<double> tol;
  std::size_t threads = 0;  // 0: leave as is
  std::string axis;         // sweep: dt | N | M
  std::vector<double> ladder;
};

struct RunResult {
  int exit_code = exit_pass;
  std::string message;
  ScenarioSpec spec;
  std::vector<ReportRow> rows;
  std::string report_text;
  nlohmann::json manifest;
  std::string report_path, manifest_path;
};

inline int exit_code_for(ErrorCode c) {
  switch (c) {
    case ErrorCode::PicardDivergence:
    case ErrorCode::RegressionSingular:
    case ErrorCode::NonfiniteState:
    case ErrorCode::StepTooSmall:
    case ErrorCode::MissingDerivative:
    case ErrorCode::MissingDerivativeField:
    case ErrorCode::LengthMismatch:
    case ErrorCode::UnequalSupportSize:
    case ErrorCode::NonpositiveWeight:
      return exit_solver;
    default:
      return exit_config;
  }
}

inline std::optional<std::uint64_t> env_seed() {
  const char* v = std::getenv("MFBDSDE_SEED");
  if (!v || !*v) return std::nullopt;
  return detail::parse_number<std::uint64_t>("MFBDSDE_SEED", v);
}

inline ScenarioSpec resolve_spec(const CliRequest& req) {
  ScenarioSpec s;
  if (!req.scenario_text.empty()) {
    s = parse_scenario(req.scenario_text);
  } else {
    require(!req.scenario.empty(), ErrorCode::ConfigError, "no scenario given");
    if (std::filesystem::exists(req.scenario))
      s = load_scenario(req.scenario);
    else
      s = catalog_entry(req.scenario).spec;
  }
  if (req.seed)
    s.seed = *req.seed;
  else if (req.seed_from_env)
    if (const auto e = env_seed()) s.seed = *e;
  if (req.dt) {
    require(*req.dt > 0.0 && std::isfinite(*req.dt), ErrorCode::ConfigError, "--dt must be positive");
    const double n = std::round((s.T - s.t) / *req.dt);
    require(n >= 1.0, ErrorCode::ConfigError, "--dt exceeds the horizon");
    s.steps = static_cast<std::size_t>(n);
  }
  if (req.particles) s.particles = *req.particles;
  if (req.bpaths) s.bpaths = *req.bpaths;
  require(s.particles > 0 && s.bpaths > 0, ErrorCode::ConfigError, "particle counts must be positive");
  // validates the coefficient name before any work
  make_coefficients(s.coefficients);
  return s;
}

namespace cli_detail {

struct Ctx {
  const ScenarioSpec& s;
  const CoefficientSet& cs;
  const CliRequest& req;
  std::vector<ReportRow>& rows;

  double tol(double fallback) const { return req.tol ? *req.tol : fallback; }

  ReportRow& add(const std::string& check, const std::string& metric, double value, double se, std::size_t n_samples,
                 bool pass) {
    ReportRow r;
    r.scenario_id = s.id;
    r.check_id = check;
    r.metric = metric;
    r.value = value;
    r.std_error = se;
    r.n_samples = n_samples;
    r.dt = s.dt();
    r.N = s.particles;
    r.M = s.bpaths;
    r.seed = s.seed;
    r.pass = pass;
    rows.push_back(r);
    return rows.back();
  }
};

inline ForwardCloud simulate_spec(const ScenarioSpec& s, const CoefficientSet& cs) {
  const ValueProblem prob = make_problem(s, cs);
  return simulate(cs, prob.bundle, prob.law_init, {PilotStart::at(s.x, prob.bundle->n_pilots, Role::pilot_w)});
}

inline void simulate_forward(Ctx& c) {
  const ForwardCloud fc = simulate_spec(c.s, c.cs);
  const std::size_t n = fc.n(), d = fc.d;
  auto moments = [&](const Ensemble& e, std::size_t k) {
    std::vector<double> v(e.count);
    for (std::size_t i = 0; i < e.count; ++i) v[i] = e.at(k, i)[0];
    return mean_se(v);
  };
  const auto lm = moments(fc.law, n), pm = moments(fc.pilots[0], n);
  c.add("forward", "law_mean_T", lm.mean, lm.se, fc.law.count, true);
  c.add("forward", "pilot_mean_T", pm.mean, pm.se, fc.pilots[0].count, true);
  double sup2 = 0.0;
  for (std::size_t k = 0; k <= n; ++k) {
    double acc = 0.0;
    for (std::size_t i = 0; i < fc.pilots[0].count; ++i)
      for (std::size_t j = 0; j < d; ++j) acc += fc.pilots[0].at(k, i)[j] * fc.pilots[0].at(k, i)[j];
    sup2 = std::max(sup2, acc / static_cast<double>(fc.pilots[0].count));
  }
  c.add("forward", "pilot_max_second_moment", sup2, 0.0, fc.pilots[0].count, true);
  // restart from the middle node must reproduce the paths bit for bit
  const std::size_t mid = n / 2;
  const ForwardCloud fr = restart(c.cs, fc, mid);
  double diff = 0.0;
  auto cmp = [&](const Ensemble& a, const Ensemble& b) {
    for (std::size_t k = mid; k < a.nodes; ++k)
      for (std::size_t i = 0; i < a.count * a.d; ++i)
        diff = std::max(diff, std::abs(a.x[k * a.count * a.d + i] - b.x[(k - mid) * b.count * b.d + i]));
  };
  cmp(fc.law, fr.law);
  cmp(fc.pilots[0], fr.pilots[0]);
  c.add("forward", "restart_max_diff", diff, 0.0, fc.law.count, diff == 0.0);
}

inline void solve_bdsde(Ctx& c) {
  const ForwardCloud fc = simulate_spec(c.s, c.cs);
  const BackwardSolution sol = solve_mf_bdsde(c.cs, fc, BackwardConfig::from(c.s));
  const std::size_t M = sol.M, P = fc.pilots[0].count;
  c.add("bdsde", "picard_iterations", static_cast<double>(sol.picard_iters), 0.0, M, sol.converged);
  c.add("bdsde", "picard_residual", sol.picard_residual, 0.0, M, sol.converged);
  std::vector<double> y0(M, 0.0);
  for (std::size_t m = 0; m < M; ++m) {
    for (std::size_t p = 0; p < P; ++p) y0[m] += sol.pilots[0].Y(0, m, p);
    y0[m] /= static_cast<double>(P);
  }
  const auto ms = mean_se(y0);
  c.add("bdsde", "y0_mean", ms.mean, ms.se, M, true);
  const ClosedFormOracle o = make_oracle(c.s);
  if (o.has() && c.cs.d == 1 && c.cs.l == 1) {
    const OracleError e = oracle_error(o, fc, sol);
    const double tol = c.tol(0.02);
    const double yref = e.y_scale > 0.0 ? e.y_scale : 1.0;
    const double zref = e.z_scale > 0.0 ? e.z_scale : yref;
    // Z is a regression slope and gets a looser bound
    c.add("bdsde", "y_rmse_max", e.y_max, 0.0, M * P, e.y_max <= tol * yref);
    c.add("bdsde", "z_rmse_max", e.z_max, 0.0, M * P, e.z_max <= 2.5 * tol * zref);
  }
}

// The Ito gap carries an O(dt) bias on non-trivial scenarios, so the check runs at n and 2n and
// tests the extrapolation 2 gap(2n) - gap(n); the two levels use independent draws.
inline void check_ito_cmd(Ctx& c) {
  ItoOptions opt;
  opt.control = true;
  auto level = [&](std::size_t steps, ResidualReport* raw) {
    ScenarioSpec sl = c.s;
    sl.steps = steps;
    const ForwardCloud fc = simulate_spec(sl, c.cs);
    const BackwardSolution sol = solve_mf_bdsde(c.cs, fc, BackwardConfig::from(sl));
    if (raw) {
      ItoOptions plain = opt;
      plain.control = false;
      *raw = check_ito(c.cs, fc, sol, plain);
    }
    return check_ito(c.cs, fc, sol, opt);
  };
  ResidualReport raw;
  const ResidualReport g1 = level(c.s.steps, &raw), g2 = level(2 * c.s.steps, nullptr);
  const double ex = 2.0 * g2.value - g1.value;
  const double se = std::sqrt(4.0 * g2.se * g2.se + g1.se * g1.se);
  const double floor = 2.0 * g2.floor + g1.floor;
  const double k = c.tol(3.0);
  const std::size_t M = c.s.bpaths;
  c.add("ito", "gap", g1.value, g1.se, M, true);
  c.add("ito", "gap_uncontrolled", raw.value, raw.se, M, true);
  c.add("ito", "gap_half_dt", g2.value, g2.se, M, true).dt = c.s.dt() / 2.0;
  c.add("ito", "regression_floor", floor, 0.0, M, true);
  c.add("ito", "gap_extrapolated", ex, se, M, std::abs(ex) <= k * se + floor + 1e-12 * g1.scale);
}

inline void check_spde_cmd(Ctx& c) {
  const std::size_t q = std::max<std::size_t>(1, c.s.steps / 8);
  require(2 * q < c.s.steps, ErrorCode::ConfigError, "SPDE lattice needs at least 3 steps");
  const SpdeLattice lat = spde_lattice(c.cs, c.s, {0, q, 2 * q});
  const ResidualReport r = check_spde_residual(c.cs, lat);
  const double tol = c.tol(0.05);
  c.add("spde", "residual_rms", r.value, r.se, c.s.bpaths, r.value <= tol * r.scale);
  c.add("spde", "residual_max", r.max, 0.0, c.s.bpaths, true);
  c.add("spde", "fd_pathway", r.pathway == "fd" ? 1.0 : 0.0, 0.0, c.s.bpaths, true);
}

// Passes when every node agrees within k regression errors, or when the residual decays at
// first order between n and 2n (the scheme is only exact for constant-coefficient cases).
inline void check_representation_cmd(Ctx& c) {
  auto level = [&](std::size_t steps) {
    ScenarioSpec sl = c.s;
    sl.steps = steps;
    const ForwardCloud fc = simulate_spec(sl, c.cs);
    const BackwardConfig cfg = BackwardConfig::from(sl);
    const BackwardSolution sol = solve_mf_bdsde(c.cs, fc, cfg);
    const TangentCloud tc = solve_dx(c.cs, fc, 0);
    const auto dx = solve_dx_bdsde(c.cs, fc, tc, sol, cfg);
    return check_representation(c.cs, fc, sol, tc, dx[0]);
  };
  const ResidualReport r = level(c.s.steps), r2 = level(2 * c.s.steps);
  const double k = c.tol(3.0);
  auto worst = [](const ResidualReport& x) {
    double w = 0.0;
    for (double v : x.node_mean) w = std::max(w, std::sqrt(v));
    return w;
  };
  const double w1 = worst(r), w2 = worst(r2);
  const double order = (w1 > 0.0 && w2 > 0.0) ? std::log2(w1 / w2) : 0.0;
  const bool converging = order >= 0.5;
  double ratio = 0.0;
  bool within = true;
  for (std::size_t j = 0; j < r.node_mean.size(); ++j) {
    const double rms = std::sqrt(r.node_mean[j]);
    const bool ok = rms <= k * r.node_ref[j] || rms <= 1e-12;
    within = within && ok;
    if (r.node_ref[j] > 0.0) ratio = std::max(ratio, rms / r.node_ref[j]);
    c.add("representation", "rms_node_" + std::to_string(j), rms, r.node_ref[j], c.s.bpaths, ok || converging);
  }
  c.add("representation", "max_ratio_to_se", ratio, 0.0, c.s.bpaths, within || converging);
  c.add("representation", "max_rms_half_dt", w2, 0.0, c.s.bpaths, true).dt = c.s.dt() / 2.0;
  c.add("representation", "observed_order", order, 0.0, c.s.bpaths, within || converging);
}

inline void check_flow_cmd(Ctx& c) {
  const std::size_t node = std::max<std::size_t>(1, c.s.steps / 2);
  require(node < c.s.steps, ErrorCode::ConfigError, "flow check needs at least 2 steps");
  const FlowCheck f = check_flow(c.cs, c.s, node);
  c.add("flow", "forward_max_diff", f.forward_maxdiff, 0.0, c.s.particles, f.forward_exact);
  c.add("flow", "backward_rms", f.backward_rms, f.backward_tol / 2.0, c.s.bpaths, f.backward_rms <= f.backward_tol);
}

inline void fit_row(Ctx& c, const std::string& check, const EstimateFit& f, std::size_t n) {
  const double se = (f.ci_hi - f.ci_lo) / (2.0 * 1.96);
  c.add(check, f.id + "_exponent", f.exponent, std::isfinite(se) ? se : 0.0, n, f.pass);
}

inline void fit_estimates_cmd(Ctx& c) {
  const double H = c.s.T - c.s.t;
  const std::vector<double> hs{H / 8, H / 16, H / 32, H / 64};
  ScenarioSpec sm = c.s;
  for (double p : {2.0, 4.0}) {
    const auto v = sup_moment_ladder(c.cs, sm, p, hs);
    const auto f = fit_estimates(p == 2.0 ? "sup_moment_p2" : "sup_moment_p4", hs, v, p / 2.0, 0.2);
    fit_row(c, "estimates", f, c.s.n_pilots());
  }
  require(c.s.steps >= 16 && c.s.steps % 2 == 0, ErrorCode::ConfigError, "time regularity needs an even grid of 16+ steps");
  const TimeRegularity tr = time_regularity(c.cs, c.s, {1, 2, 4, 8});
  fit_row(c, "estimates", fit_estimates("time_holder_p2", tr.q, tr.ms, 1.0, 0.3), c.s.bpaths);
  fit_row(c, "estimates", fit_estimates("psi_envelope", tr.q, tr.envelope, 0.5, 0.2), c.s.bpaths);
}

// sweep levels: one solve per ladder value against the closed form
inline void sweep_cmd(Ctx& c) {
  const auto& L = c.req.ladder;
  require(L.size() >= 4, ErrorCode::InsufficientLadder,
          "sweep needs at least 4 ladder points, got " + std::to_string(L.size()));
  require(c.cs.d == 1 && c.cs.l == 1, ErrorCode::Unsupported, "sweep is implemented for d = l = 1");
  const BackwardConfig cfg = BackwardConfig::from(c.s);
  const std::string& axis = c.req.axis;
  std::vector<double> scale, value;
  auto level_row = [&](const ScenarioSpec& sl, const std::string& metric, double v, double se, std::size_t n) {
    ReportRow& r = c.add("sweep-" + axis, metric, v, se, n, true);
    r.dt = sl.dt();
    r.N = sl.particles;
    r.M = sl.bpaths;
  };

  if (axis == "dt") {
    const ClosedFormOracle o = make_oracle(c.s);
    require(o.has(), ErrorCode::Unsupported, "a dt sweep needs a scenario with a closed form");
    // time-averaged L2 error of the piecewise-constant scheme against the closed form on a fine grid
    std::vector<std::size_t> steps;
    for (double h : L) {
      require(h > 0.0, ErrorCode::ConfigError, "ladder dt must be positive");
      const double n = std::round((c.s.T - c.s.t) / h);
      require(n >= 1.0, ErrorCode::ConfigError, "ladder dt exceeds the horizon");
      steps.push_back(static_cast<std::size_t>(n));
    }
    const std::size_t top = *std::max_element(steps.begin(), steps.end());
    const std::size_t nref = 4 * top;
    for (std::size_t n : steps)
      require(nref % n == 0, ErrorCode::ConfigError, "ladder step counts must divide " + std::to_string(nref));
    ScenarioSpec sf = c.s;
    sf.steps = nref;
    const ValueProblem fine = make_problem(sf, c.cs);
    const ForwardCloud ff =
        simulate(c.cs, fine.bundle, fine.law_init, {PilotStart::at(sf.x, fine.bundle->n_pilots, Role::pilot_w)});
    const PathBundle& pf = *fine.bundle;
    const std::size_t M = pf.n_bpaths, P = ff.pilots[0].count;
    std::vector<double> ref(nref * M * P);
    for (std::size_t j = 0; j < nref; ++j)
      for (std::size_t m = 0; m < M; ++m) {
        const double bt = pf.b_tail(m, j);
        for (std::size_t p = 0; p < P; ++p) ref[(j * M + m) * P + p] = o.Y(pf.grid.nodes[j], ff.pilots[0].at(j, p), bt);
      }
    for (std::size_t n : steps) {
      const std::size_t f = nref / n;
      auto coarse = std::make_shared<const PathBundle>(pf.coarsen(f));
      const ForwardCloud fc =
          simulate(c.cs, coarse, fine.law_init, {PilotStart::at(sf.x, coarse->n_pilots, Role::pilot_w)});
      const BackwardSolution sol = solve_mf_bdsde(c.cs, fc, cfg);
      double acc = 0.0;
      for (std::size_t j = 0; j < nref; ++j)
        for (std::size_t m = 0; m < M; ++m)
          for (std::size_t p = 0; p < P; ++p) {
            const double e = sol.pilots[0].Y(j / f, m, p) - ref[(j * M + m) * P + p];
            acc += e * e;
          }
      const double rmse = std::sqrt(acc / static_cast<double>(nref * M * P));
      ScenarioSpec sl = c.s;
      sl.steps = n;
      level_row(sl, "y_path_rmse", rmse, 0.0, M * P);
      scale.push_back(sl.dt());
      value.push_back(rmse);
    }
    fit_row(c, "sweep-dt", fit_estimates("y_path_rmse", scale, value, 0.5, 0.2), L.size());
    return;
  }

  require(axis == "N" || axis == "M", ErrorCode::ConfigError, "sweep axis must be dt, N or M");
  for (double v : L)
    require(v >= 1.0 && v == std::floor(v), ErrorCode::ConfigError, "ladder counts must be positive integers");
  auto y0_means = [&](const ScenarioSpec& sl) {
    const ForwardCloud fc = simulate_spec(sl, c.cs);
    const BackwardSolution sol = solve_mf_bdsde(c.cs, fc, cfg);
    const std::size_t P = fc.pilots[0].count;
    std::vector<double> y0(sol.M, 0.0);
    for (std::size_t m = 0; m < sol.M; ++m) {
      for (std::size_t p = 0; p < P; ++p) y0[m] += sol.pilots[0].Y(0, m, p);
      y0[m] /= static_cast<double>(P);
    }
    return y0;
  };

  if (axis == "M") {
    for (double v : L) {
      ScenarioSpec sl = c.s;
      sl.bpaths = static_cast<std::size_t>(v);
      const double se = mean_se(y0_means(sl)).se;
      level_row(sl, "y0_b_se", se, 0.0, sl.bpaths);
      scale.push_back(1.0 / v);
      value.push_back(se);
    }
    fit_row(c, "sweep-M", fit_estimates("y0_b_se", scale, value, 0.5, 0.2), L.size());
    return;
  }

  // Particle streams are keyed by index, so a smaller cloud is a subset of the reference one on the
  // same grid and B-paths; the difference isolates the particle error from the time bias.
  // One draw of the law cloud is noisy, so the error is pooled over seed replicates.
  constexpr std::size_t replicates = 32;
  const std::size_t nref = 4 * static_cast<std::size_t>(*std::max_element(L.begin(), L.end()));
  std::vector<double> acc(L.size(), 0.0);
  double yscale = 0.0;
  for (std::size_t r = 0; r < replicates; ++r) {
    ScenarioSpec sr = c.s;
    sr.seed = c.s.seed + r;
    sr.pilots = 0;
    sr.particles = nref;
    const std::vector<double> ref = y0_means(sr);
    for (double y : ref) yscale = std::max(yscale, std::abs(y));
    for (std::size_t i = 0; i < L.size(); ++i) {
      sr.particles = static_cast<std::size_t>(L[i]);
      const std::vector<double> y0 = y0_means(sr);
      for (std::size_t m = 0; m < y0.size(); ++m) acc[i] += (y0[m] - ref[m]) * (y0[m] - ref[m]);
    }
  }
  double worst = 0.0;
  for (std::size_t i = 0; i < L.size(); ++i) {
    ScenarioSpec sl = c.s;
    sl.particles = static_cast<std::size_t>(L[i]);
    const double err = std::sqrt(acc[i] / static_cast<double>(replicates * c.s.bpaths));
    level_row(sl, "y0_error", err, 0.0, replicates * c.s.bpaths);
    scale.push_back(1.0 / L[i]);
    value.push_back(err);
    worst = std::max(worst, err);
  }
  if (worst <= 1e-6 * std::max(1.0, yscale)) {
    // the solution does not depend on the law: nothing decays, the error sits at the regression floor
    c.add("sweep-N", "y0_error_at_floor", worst, 0.0, L.size(), true);
    return;
  }
  fit_row(c, "sweep-N", fit_estimates("y0_error", scale, value, 0.5, 0.2), L.size());
}

inline const std::map<std::string, std::function<void(Ctx&)>>& commands() {
  static const std::map<std::string, std::function<void(Ctx&)>> m{
      {"simulate-forward", simulate_forward},
      {"solve-bdsde", solve_bdsde},
      {"check-ito", check_ito_cmd},
      {"check-spde", check_spde_cmd},
      {"check-representation", check_representation_cmd},
      {"check-flow", check_flow_cmd},
      {"fit-estimates", fit_estimates_cmd},
      {"sweep", sweep_cmd},
  };
  return m;
}

inline std::string wall_time() {
  const auto t = std::chrono::system_clock::to_time_t(std::chrono::system_clock::now());
  std::tm tm{};
  gmtime_r(&t, &tm);
  char buf[32];
  std::strftime(buf, sizeof buf, "%Y-%m-%dT%H:%M:%SZ", &tm);
  return buf;
}

}  // namespace cli_detail

inline std::vector<std::string> subcommands() {
  std::vector<std::string> out;
  for (const auto& [k, v] : cli_detail::commands()) out.push_back(k);
  return out;
}

// Runs one subcommand. Errors become exit codes; files are written only when out_dir is set.
inline RunResult run_command(const CliRequest& req) {
  RunResult res;
  const std::string start = cli_detail::wall_time();
  try {
    const auto& cmds = cli_detail::commands();
    const auto it = cmds.find(req.subcommand);
    require(it != cmds.end(), ErrorCode::ConfigError, "unknown subcommand " + req.subcommand);
    res.spec = resolve_spec(req);
    if (req.threads > 0) set_thread_width(req.threads);
    const CoefficientSet cs = make_coefficients(res.spec.coefficients);
    cli_detail::Ctx ctx{res.spec, cs, req, res.rows};
    it->second(ctx);
    res.report_text = format_report(res.rows);
  } catch (const Error& e) {
    res.exit_code = exit_code_for(e.code());
    res.message = e.what();
    res.rows.clear();
    return res;
  } catch (const std::exception& e) {
    res.exit_code = exit_solver;
    res.message = e.what();
    res.rows.clear();
    return res;
  }
  res.exit_code = all_pass(res.rows) ? exit_pass : exit_failed_check;

  nlohmann::json m;
  m["artifact_version"] = artifact_version;
  m["subcommand"] = req.subcommand;
  m["scenario_path"] = req.scenario_text.empty() ? req.scenario : std::string("<inline>");
  m["scenario"] = serialize_scenario(res.spec);
  m["seed"] = res.spec.seed;
  if (req.tol) m["tol"] = *req.tol;
  if (!req.axis.empty()) m["axis"] = req.axis;
  if (!req.ladder.empty()) m["ladder"] = req.ladder;
  m["report_csv"] = res.report_text;
  m["start_time"] = start;
  m["end_time"] = cli_detail::wall_time();
  res.manifest = m;

  if (!req.out_dir.empty()) {
    try {
      std::filesystem::create_directories(req.out_dir);
      const std::string name = report_file_name(res.spec.id, req.subcommand, res.spec.seed);
      res.report_path = (std::filesystem::path(req.out_dir) / name).string();
      res.manifest_path = res.report_path.substr(0, res.report_path.size() - 4) + ".manifest.json";
      m["report"] = name;
      res.manifest = m;
      write_file(res.report_path, res.report_text);
      write_file(res.manifest_path, m.dump(2) + "\n");
    } catch (const std::exception& e) {
      res.exit_code = exit_config;
      res.message = e.what();
    }
  }
  return res;
}

// Rebuilds the request recorded in a manifest. Thread width and output directory are free.
inline CliRequest request_from_manifest(const nlohmann::json& m) {
  CliRequest r;
  try {
    r.subcommand = m.at("subcommand").get<std::string>();
    r.scenario_text = m.at("scenario").get<std::string>();
    r.seed = m.at("seed").get<std::uint64_t>();
    if (m.contains("tol")) r.tol = m.at("tol").get<double>();
    if (m.contains("axis")) r.axis = m.at("axis").get<std::string>();
    if (m.contains("ladder")) r.ladder = m.at("ladder").get<std::vector<double>>();
  } catch (const nlohmann::json::exception& e) {
    throw Error(ErrorCode::ConfigError, std::string("bad manifest: ") + e.what());
  }
  r.seed_from_env = false;
  return r;
}

struct ReplayResult {
  RunResult run;
  bool identical = false;
};

// Replays a manifest; identical reports bit-exact agreement with the recorded rows.
inline ReplayResult replay_manifest(const std::string& manifest_text, std::size_t threads = 0,
                                    const std::string& out_dir = "") {
  ReplayResult out;
  nlohmann::json m;
  try {
    m = nlohmann::json::parse(manifest_text);
  } catch (const nlohmann::json::exception& e) {
    out.run.exit_code = exit_config;
    out.run.message = std::string("bad manifest: ") + e.what();
    return out;
  }
  CliRequest r;
  try {
    r = request_from_manifest(m);
  } catch (const Error& e) {
    out.run.exit_code = exit_config;
    out.run.message = e.what();
    return out;
  }
  r.threads = threads;
  r.out_dir = out_dir;
  out.run = run_command(r);
  out.identical = m.contains("report_csv") && out.run.report_text == m["report_csv"].get<std::string>();
  return out;
}

}  // namespace mfbdsde
