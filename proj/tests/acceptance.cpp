// Acceptance suite: one PASS/FAIL line per criterion. Exit status 0 iff all selected criteria pass.
// Usage: acceptance [criterion ...]   (default: 1..13)

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <functional>
#include <random>
#include <set>
#include <string>
#include <vector>

#include "mfbdsde.hpp"

using namespace mfbdsde;

namespace {

struct Outcome {
  bool pass = false;
  std::string detail;
};

std::string fmt(const char* f, auto... a) {
  char buf[512];
  std::snprintf(buf, sizeof buf, f, a...);
  return buf;
}

double seconds_since(std::chrono::steady_clock::time_point t0) {
  return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
}

ScenarioSpec sized(const std::string& id, std::size_t n, std::size_t N, std::size_t M) {
  ScenarioSpec s = catalog_entry(id).spec;
  s.steps = n;
  s.particles = N;
  s.bpaths = M;
  return s;
}

struct Solved {
  ForwardCloud fc;
  BackwardSolution sol;
};

Solved solve(const CoefficientSet& cs, const ScenarioSpec& s) {
  const ValueProblem p = make_problem(s, cs);
  Solved r;
  r.fc = simulate(cs, p.bundle, p.law_init, {PilotStart::at(s.x, p.bundle->n_pilots, Role::pilot_w)});
  r.sol = solve_mf_bdsde(cs, r.fc, BackwardConfig::from(s));
  return r;
}

EmpiricalMeasure random_cloud(std::mt19937_64& rng, std::size_t n, std::size_t dim) {
  std::normal_distribution<double> g;
  std::vector<double> p(n * dim);
  for (double& v : p) v = g(rng);
  return EmpiricalMeasure(std::move(p), dim);
}

// ---------------------------------------------------------------------------

Outcome c1_w2_exact() {
  const auto t0 = std::chrono::steady_clock::now();
  std::mt19937_64 rng(1);
  double worst = 0.0;
  for (int rep = 0; rep < 200; ++rep) {
    const EmpiricalMeasure mu = random_cloud(rng, 5, 2), nu = random_cloud(rng, 5, 2);
    std::vector<int> perm{0, 1, 2, 3, 4};
    double best = std::numeric_limits<double>::infinity();
    do {
      double c = 0.0;
      for (int i = 0; i < 5; ++i)
        for (int j = 0; j < 2; ++j) {
          const double d = mu.at(i, j) - nu.at(perm[i], j);
          c += d * d;
        }
      best = std::min(best, c);
    } while (std::next_permutation(perm.begin(), perm.end()));
    worst = std::max(worst, std::abs(w2(mu, nu) - std::sqrt(best / 5.0)));
  }
  const double t = seconds_since(t0);
  return {worst <= 1e-12 && t < 5.0, fmt("max |w2 - brute| = %.2e, %.2f s", worst, t)};
}

Outcome c2_sandwich() {
  std::mt19937_64 rng(2);
  double slack = std::numeric_limits<double>::infinity();
  for (int rep = 0; rep < 100; ++rep) {
    const EmpiricalMeasure mu = random_cloud(rng, 6, 2), nu = random_cloud(rng, 6, 2);
    const double w = w2(mu, nu);
    for (double g1 : {0.3, 2.0})
      for (double g2 : {0.3, 2.0}) {
        const double wg = w2_weighted(mu, nu, 1, g1, g2);
        slack = std::min(slack, wg - std::sqrt(std::min(g1, g2)) * w);
        slack = std::min(slack, std::sqrt(std::max(g1, g2)) * w - wg);
      }
  }
  return {slack >= -1e-12, fmt("min slack %.3e over 400 (instance, gamma) pairs", slack)};
}

Outcome c3_lions_fd() {
  std::mt19937_64 rng(3);
  const EmpiricalMeasure mu = random_cloud(rng, 64, 1);
  const double m = mu.mean();
  const MeasureFunctional lin = [](const EmpiricalMeasure& v) { return v.mean(); };
  const MeasureFunctional sqmean = [](const EmpiricalMeasure& v) { return v.mean() * v.mean(); };
  const MeasureFunctional second = [](const EmpiricalMeasure& v) {
    double s = 0.0;
    for (double x : v.points) s += x * x;
    return s / static_cast<double>(v.n);
  };
  struct Case {
    const char* name;
    const MeasureFunctional* phi;
    std::function<double(double)> grad;
  };
  const Case cases[] = {{"int y", &lin, [](double) { return 1.0; }},
                        {"(int y)^2", &sqmean, [m](double) { return 2.0 * m; }},
                        {"int y^2", &second, [](double x) { return 2.0 * x; }}};
  std::string detail;
  bool pass = true;
  for (const Case& c : cases) {
    double err = 0.0, ref = 0.0;
    for (std::size_t i = 0; i < mu.n; ++i) {
      const double h = c.grad(mu.at(i, 0));
      err = std::max(err, std::abs(lions_fd(*c.phi, mu, i, 1e-4)[0] - h));
      ref = std::max(ref, std::abs(h));
    }
    const double rel = err / ref;
    pass = pass && rel <= 1e-6;
    detail += fmt("%s rel %.1e; ", c.name, rel);
  }
  std::normal_distribution<double> g;
  std::vector<double> zeta(mu.n);
  for (double& z : zeta) z = g(rng);
  const double r1 = directional_check(sqmean, mu, zeta, 1e-2), r2 = directional_check(sqmean, mu, zeta, 5e-3);
  const double ratio = r2 / r1;
  pass = pass && ratio >= 0.2 && ratio <= 0.3;
  detail += fmt("directional ratio %.4f", ratio);
  return {pass, detail};
}

Outcome c4_flow() {
  const ScenarioSpec s = sized("S1", 64, 4096, 32);
  const FlowCheck f = check_flow(make_coefficients(s.coefficients), s, 32);
  return {f.forward_exact && f.backward_rms <= f.backward_tol,
          fmt("forward bit-exact %s (max diff %.1e), backward rms %.2e <= tol %.2e", f.forward_exact ? "yes" : "no",
              f.forward_maxdiff, f.backward_rms, f.backward_tol)};
}

Outcome c5_oracle() {
  const auto t0 = std::chrono::steady_clock::now();
  const ScenarioSpec s = sized("S1", 64, 4096, 32);
  const CoefficientSet cs = make_coefficients(s.coefficients);
  const Solved r = solve(cs, s);
  const OracleError e = oracle_error(catalog_entry("S1").oracle, r.fc, r.sol);
  const double t = seconds_since(t0);
  const double ytol = 0.02 * (std::abs(s.x[0]) + params::c * std::sqrt(s.T - s.t)), ztol = 0.05 * params::sigma0;
  return {e.y_max <= ytol && e.z_max <= ztol && t < 120.0,
          fmt("Y rmse %.2e <= %.2e, Z rmse %.2e <= %.2e, %.1f s", e.y_max, ytol, e.z_max, ztol, t)};
}

Outcome c6_picard() {
  bool pass = true;
  std::string detail;
  for (const char* id : {"S2", "S5"}) {
    ScenarioSpec s = sized(id, 16, 4096, 32);
    s.picard_tol = 1e-3;
    const Solved r = solve(make_coefficients(s.coefficients), s);
    const auto& res = r.sol.residuals;
    double worst = 0.0;
    for (std::size_t i = 1; i < res.size(); ++i)
      worst = std::max(worst, res[i - 1] > 0.0 ? res[i] / res[i - 1] : 0.0);
    const bool ok = r.sol.converged && r.sol.picard_iters <= 10 && worst < 0.9;
    pass = pass && ok;
    detail += fmt("%s: %zu sweeps, max ratio %.3f, converged %s; ", id, r.sol.picard_iters, worst,
                  r.sol.converged ? "yes" : "no");
  }
  return {pass, detail};
}

// relative agreement, or both sides at finite-difference roundoff (a vanishing derivative)
bool fd_ok(const DerivativeCheck& c) { return c.rel <= 0.1 || (c.fd_rms <= 1e-6 && c.diff_rms <= 1e-6); }

Outcome c7_derivatives() {
  bool pass = true;
  std::string detail;
  for (const char* id : {"S2", "S4", "S5", "S6"}) {
    ScenarioSpec s = catalog_entry(id).spec;
    s.particles = 4096;
    const CoefficientSet cs = make_coefficients(s.coefficients);
    const double y = s.x[0];
    std::vector<DerivativeCheck> cks{fd_check_dx(cs, s, 1e-3), fd_check_dmu(cs, s, y, 256, 1e-3)};
    if (cs.affine_g) {
      cks.push_back(fd_check_dxx(cs, s, 1e-3));
      cks.push_back(fd_check_dydmu(cs, s, y, 1e-3));
    }
    detail += std::string(id) + ":";
    for (const auto& c : cks) {
      pass = pass && fd_ok(c);
      detail += c.fd_rms <= 1e-6 && c.diff_rms <= 1e-6 && c.rel > 0.1 ? fmt(" %s zero(%.0e)", c.what.c_str(), c.diff_rms)
                                                                    : fmt(" %s %.1e", c.what.c_str(), c.rel);
    }
    detail += "; ";
  }
  return {pass, detail};
}

Outcome c8_malliavin() {
  bool pass = true;
  std::string detail;
  {
    const ScenarioSpec s = sized("S4", 32, 4096, 32);
    const CoefficientSet cs = make_coefficients(s.coefficients);
    const Solved r = solve(cs, s);
    const MalliavinCheck m = check_malliavin(cs, r.fc, r.sol, 8, BackwardConfig::from(s));
    pass = m.zero_before_theta && m.product_rel <= 1e-6;
    detail += fmt("S4 zero-before-theta %s, product rel %.1e; ", m.zero_before_theta ? "exact" : "no", m.product_rel);
  }
  for (const char* id : {"S1", "S3", "S4"}) {
    const ScenarioSpec s = sized(id, 16, 4096, 32);
    const ResidualReport r = zid_ladder(make_coefficients(s.coefficients), s, 0.5, {8, 16, 32});
    const auto& L = r.ladder;
    const double ztol = 1e-10 * std::max(1.0, params::sigma0 * params::sigma0);
    bool ok = true, strict = true;
    for (std::size_t i = 0; i < L.size(); ++i) {
      const bool zero = L[i].value <= ztol + L[i].floor;
      if (i > 0) {
        ok = ok && (zero || L[i].value <= L[i - 1].value + 3.0 * (L[i].se + L[i - 1].se) + L[i].floor);
        strict = strict && L[i].value < L[i - 1].value;
      }
    }
    if (std::string(id) == "S4") ok = ok && strict;
    pass = pass && ok;
    detail += fmt("%s zid %.1e/%.1e/%.1e; ", id, L[0].value, L[1].value, L[2].value);
  }
  return {pass, detail};
}

Outcome c9_representation() {
  bool pass = true;
  std::string detail;
  {
    const ScenarioSpec s = sized("S1", 16, 4096, 32);
    const CoefficientSet cs = make_coefficients(s.coefficients);
    const Solved r = solve(cs, s);
    const BackwardConfig cfg = BackwardConfig::from(s);
    const TangentCloud tc = solve_dx(cs, r.fc);
    const auto dx = solve_dx_bdsde(cs, r.fc, tc, r.sol, cfg);
    const ResidualReport rep = check_representation(cs, r.fc, r.sol, tc, dx[0]);
    double worst = 0.0;
    for (std::size_t k = 0; k < rep.node_mean.size(); ++k)
      worst = std::max(worst, std::sqrt(rep.node_mean[k]) / (rep.node_ref[k] + 1e-300));
    pass = worst <= 3.0;
    detail += fmt("S1 max node residual / regression se %.2f; ", worst);
  }
  {
    const ScenarioSpec s = sized("S4", 64, 4096, 32);
    const ResidualReport r = representation_ladder(make_coefficients(s.coefficients), s, {1, 2, 4, 8, 16, 32});
    std::vector<double> sc, v;
    for (const auto& lp : r.ladder) {
      sc.push_back(lp.scale);
      v.push_back(lp.value);
    }
    const EstimateFit f = fit_estimates("representation", sc, v, 1.0, 0.3);
    pass = pass && f.pass;
    detail += fmt("S4 slope %.3f (target 1 +- 0.3)", f.exponent);
  }
  return {pass, detail};
}

Outcome c10_ito() {
  const CoefficientSet cs = make_coefficients("pardoux-peng");
  std::string detail;
  bool pass;
  {
    const ScenarioSpec s = sized("S4", 128, 4096, 32);
    const Solved r = solve(cs, s);
    ItoOptions o;
    o.control = true;
    const ResidualReport rep = check_ito(cs, r.fc, r.sol, o);
    pass = std::abs(rep.value) <= 3.0 * rep.se + rep.floor;
    detail += fmt("n=128 gap %.2e, 3se %.2e; ", rep.value, 3.0 * rep.se);
  }
  // bias ladder: replicate means of the gap for each quadratic part separately
  const std::vector<std::size_t> ns{2, 4, 8, 16, 32};
  for (auto [a, k] : {std::pair{1.0, 0.0}, std::pair{0.0, 1.0}}) {
    std::vector<double> sc, val;
    for (std::size_t n : ns) {
      std::vector<double> g;
      for (std::size_t rep = 0; rep < 8; ++rep) {
        ScenarioSpec s = sized("S4", n, 1024, 256);
        s.seed += 1000 * rep;
        const Solved r = solve(cs, s);
        ItoOptions o;
        o.F = {a, k};
        o.control = true;
        g.push_back(check_ito(cs, r.fc, r.sol, o).value);
      }
      sc.push_back(1.0 / static_cast<double>(n));
      val.push_back(std::abs(mean_se(g).mean));
    }
    const EstimateFit f = fit_estimates("ito_bias", sc, val, 1.0, 1.0);
    const double factor = std::pow(2.0, f.exponent);
    pass = pass && factor >= 1.5 && factor <= 3.0;
    detail += fmt("%s halving factor %.2f; ", a > 0 ? "u^2" : "m^2", factor);
  }
  return {pass, detail};
}

Outcome c11_spde() {
  bool pass;
  std::string detail;
  {
    // closed form of the affine-g scenario: V = x + (g20 sigma0 + c)(B_T - B_t), d_x V = 1, rest 0
    const ScenarioSpec s = sized("S3", 16, 512, 8);
    const CoefficientSet cs = make_coefficients(s.coefficients);
    SpdeLattice lat = spde_lattice(cs, s, lattice_nodes(s, 0.5, 5));
    const ValueProblem p = make_problem(s, cs);
    const PathBundle& pb = *p.bundle;
    const double kk = params::g20 * params::sigma0 + params::c;
    for (ValueSample& v : lat.samples) {
      const std::size_t k0 = static_cast<std::size_t>(std::llround((v.t - s.t) / s.dt()));
      for (std::size_t m = 0; m < v.M; ++m) {
        double bt = 0.0;
        for (std::size_t k = k0; k < pb.n(); ++k) bt += pb.b(m, k, 0);
        v.V[m] = s.x[0] + kk * bt;
        v.dV[m] = 1.0;
        v.d2V[m] = 0.0;
      }
      std::fill(v.dmuV.begin(), v.dmuV.end(), 0.0);
      std::fill(v.dydmuV.begin(), v.dydmuV.end(), 0.0);
    }
    const ResidualReport r = check_spde_residual(cs, lat);
    pass = r.value <= 1e-10 * r.scale;
    const ScenarioSpec s1 = sized("S1", 16, 512, 8);
    const CoefficientSet c1 = make_coefficients(s1.coefficients);
    const ResidualReport r1 = check_spde_residual(c1, spde_lattice(c1, s1, lattice_nodes(s1, 0.5, 5)));
    detail += fmt("closed form residual %.1e (rel); solver on S1 %.1e (rel, informational); ", r.value / r.scale,
                  r1.value / r1.scale);
  }
  {
    ScenarioSpec s = sized("S2", 16, 1024, 16);
    s.pilots = 384;
    const std::vector<std::size_t> steps{4, 8, 16, 32};
    std::vector<std::size_t> parts;
    for (std::size_t n : steps) parts.push_back(96 * n);
    const ResidualReport r = spde_ladder(make_coefficients(s.coefficients), s, steps, parts, 0.5, 3, 16);
    std::vector<double> sc, v;
    for (const auto& lp : r.ladder) {
      sc.push_back(lp.dt);
      v.push_back(lp.value);
    }
    const EstimateFit f = fit_estimates("spde", sc, v, 0.5, 0.5);
    pass = pass && f.exponent >= 0.4;
    detail += fmt("S2 ladder slope %.3f (>= 0.4)", f.exponent);
  }
  return {pass, detail};
}

Outcome c12_rates() {
  ScenarioSpec s = catalog_entry("S1").spec;
  const CoefficientSet cs = make_coefficients(s.coefficients);
  bool pass = true;
  std::string detail;
  {
    ScenarioSpec sp = s;
    sp.particles = 4096;
    const std::vector<double> hs{0.125, 0.0625, 0.03125, 0.015625};
    for (double p : {2.0, 4.0}) {
      const EstimateFit f = fit_estimates("sup", hs, sup_moment_ladder(cs, sp, p, hs), p / 2.0, 0.2);
      pass = pass && f.pass;
      detail += fmt("sup p=%g exponent %.3f; ", p, f.exponent);
    }
  }
  const TimeRegularity tr = time_regularity(cs, s, {1, 2, 4, 8});
  const EstimateFit h = fit_estimates("holder", tr.q, tr.ms, 1.0, 0.3);
  const EstimateFit e = fit_estimates("envelope", tr.q, tr.envelope, 0.5, 0.2);
  pass = pass && h.pass && e.pass;
  double psi = 0.0;
  for (std::size_t i = 0; i < tr.psi.size(); ++i) psi = std::max(psi, std::abs(tr.psi[i]) / std::sqrt(tr.q[i]));
  detail += fmt("time-holder %.3f; envelope %.3f; max |dPsi|/sqrt(q) %.3f", h.exponent, e.exponent, psi);
  return {pass, detail};
}

Outcome c13_replay() {
  bool pass = true;
  std::string detail;
  std::size_t n = 0;
  for (const std::string& sub : subcommands()) {
    CliRequest q;
    q.subcommand = sub;
    q.scenario = sub == "check-ito" ? "S4" : "S1";
    q.seed_from_env = false;
    q.particles = 512;
    q.bpaths = 8;
    if (sub == "sweep") {
      q.axis = "dt";
      q.ladder = {0.25, 0.125, 0.0625, 0.03125};
    }
    q.threads = 1;
    const RunResult a = run_command(q);
    q.threads = 4;
    const RunResult b = run_command(q);
    const ReplayResult rp = replay_manifest(a.manifest.dump(), 3);
    const bool ok = a.exit_code != exit_config && a.exit_code != exit_solver && !a.rows.empty() &&
                    a.report_text == b.report_text && rp.identical;
    if (!ok) detail += fmt("%s differs (exit %d: %s); ", sub.c_str(), a.exit_code, a.message.c_str());
    pass = pass && ok;
    ++n;
  }
  set_thread_width(1);
  detail += fmt("%zu subcommands bit-identical at widths 1/4 and on replay", n);
  return {pass, detail};
}

}  // namespace

int main(int argc, char** argv) {
  const std::vector<std::pair<int, Outcome (*)()>> all{
      {1, c1_w2_exact},      {2, c2_sandwich}, {3, c3_lions_fd},  {4, c4_flow},
      {5, c5_oracle},        {6, c6_picard},   {7, c7_derivatives}, {8, c8_malliavin},
      {9, c9_representation}, {10, c10_ito},   {11, c11_spde},    {12, c12_rates},
      {13, c13_replay}};
  std::set<int> pick;
  for (int i = 1; i < argc; ++i) pick.insert(std::atoi(argv[i]));
  bool ok = true;
  for (const auto& [id, fn] : all) {
    if (!pick.empty() && !pick.count(id)) continue;
    const auto t0 = std::chrono::steady_clock::now();
    Outcome o;
    try {
      o = fn();
    } catch (const std::exception& e) {
      o = {false, std::string("error: ") + e.what()};
    }
    ok = ok && o.pass;
    std::printf("criterion %2d: %s  %s  [%.1f s]\n", id, o.pass ? "PASS" : "FAIL", o.detail.c_str(), seconds_since(t0));
    std::fflush(stdout);
  }
  return ok ? 0 : 1;
}
