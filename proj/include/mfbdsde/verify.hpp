#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <limits>
#include <memory>
#include <string>
#include <utility>
#include <vector>

#include "backward.hpp"
#include "error.hpp"
#include "forward.hpp"
#include "parallel.hpp"
#include "paths.hpp"
#include "scenarios.hpp"

namespace mfbdsde {

// ---------------------------------------------------------------------------
// statistics

struct MeanSe {
  double mean = 0.0, se = 0.0;
};

// se of the mean from independent replicates
inline MeanSe mean_se(const std::vector<double>& v) {
  MeanSe r;
  if (v.empty()) return r;
  for (double x : v) r.mean += x;
  r.mean /= static_cast<double>(v.size());
  if (v.size() < 2) return r;
  double s = 0.0;
  for (double x : v) s += (x - r.mean) * (x - r.mean);
  r.se = std::sqrt(s / static_cast<double>(v.size() - 1) / static_cast<double>(v.size()));
  return r;
}

struct EstimateFit {
  std::string id;
  std::size_t points = 0;
  double exponent = 0.0, constant = 0.0;  // value ~ constant * scale^exponent
  double ci_lo = 0.0, ci_hi = 0.0;        // 95% interval for the exponent
  double target = 0.0, tol = 0.0;
  bool exact_zero = false;
  bool in_ci = false;
  bool pass = false;
};

namespace detail {

inline double t975(std::size_t df) {
  static const double tab[] = {0.0, 12.706, 4.303, 3.182, 2.776, 2.571, 2.447, 2.365, 2.306, 2.262, 2.228};
  if (df == 0) return std::numeric_limits<double>::infinity();
  if (df <= 10) return tab[df];
  return 1.96 + 2.5 / static_cast<double>(df);
}

}  // namespace detail

// Least squares of log(value) on log(scale). Passes when |exponent - target| <= tol.
inline EstimateFit fit_estimates(const std::string& id, const std::vector<double>& scale,
                                 const std::vector<double>& value, double target, double tol) {
  require(scale.size() == value.size(), ErrorCode::LengthMismatch, "ladder scales and values differ in length");
  require(scale.size() >= 4, ErrorCode::InsufficientLadder,
          "estimate " + id + " needs at least 4 ladder points, got " + std::to_string(scale.size()));
  EstimateFit f;
  f.id = id;
  f.points = scale.size();
  f.target = target;
  f.tol = tol;
  bool zero = true;
  for (double v : value) zero = zero && v == 0.0;
  if (zero) {
    f.exact_zero = f.in_ci = f.pass = true;
    f.exponent = f.ci_lo = f.ci_hi = target;
    return f;
  }
  const std::size_t n = scale.size();
  std::vector<double> lx(n), ly(n);
  for (std::size_t i = 0; i < n; ++i) {
    require(scale[i] > 0.0 && value[i] > 0.0 && std::isfinite(value[i]), ErrorCode::InvalidArgument,
            "ladder values must be positive for a log-log fit");
    lx[i] = std::log(scale[i]);
    ly[i] = std::log(value[i]);
  }
  double mx = 0.0, my = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    mx += lx[i];
    my += ly[i];
  }
  mx /= static_cast<double>(n);
  my /= static_cast<double>(n);
  double sxx = 0.0, sxy = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    sxx += (lx[i] - mx) * (lx[i] - mx);
    sxy += (lx[i] - mx) * (ly[i] - my);
  }
  require(sxx > 0.0, ErrorCode::InvalidArgument, "ladder scales must not all be equal");
  f.exponent = sxy / sxx;
  f.constant = std::exp(my - f.exponent * mx);
  double ssr = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    const double r = ly[i] - my - f.exponent * (lx[i] - mx);
    ssr += r * r;
  }
  const double se = std::sqrt(ssr / static_cast<double>(n - 2) / sxx);
  const double h = detail::t975(n - 2) * se;
  f.ci_lo = f.exponent - h;
  f.ci_hi = f.exponent + h;
  f.in_ci = f.ci_lo <= target && target <= f.ci_hi;
  f.pass = std::abs(f.exponent - target) <= tol;
  return f;
}

// ---------------------------------------------------------------------------
// reports

struct LadderPoint {
  double dt = 0.0, scale = 0.0;
  std::size_t N = 0, M = 0;
  double value = 0.0, se = 0.0;
  double floor = 0.0;  // regression error level below which differences are not resolved
};

struct ResidualReport {
  std::string check;
  std::vector<double> node_mean, node_se, node_max, node_ref;
  std::vector<LadderPoint> ladder;
  std::vector<double> per_path;
  double value = 0.0, se = 0.0, max = 0.0;
  double scale = 1.0;
  double floor = 0.0;  // deterministic regression error carried into `value`
  std::string pathway;
};

// ---------------------------------------------------------------------------
// closed-form comparison along pilot family 0

struct OracleError {
  std::vector<double> y_rmse, z_rmse;  // per node
  double y_max = 0.0, z_max = 0.0;
  double y_scale = 0.0, z_scale = 0.0;  // RMS of the closed form over all nodes
};

inline OracleError oracle_error(const ClosedFormOracle& o, const ForwardCloud& fc, const BackwardSolution& sol) {
  require(o.has(), ErrorCode::Unsupported, "scenario has no closed form");
  require(fc.d == 1 && sol.l == 1, ErrorCode::Unsupported, "closed forms are scalar");
  const Ensemble& e = fc.pilots.at(0);
  const Field& f = sol.pilots.at(0);
  const PathBundle& pb = *fc.bundle;
  const std::size_t n = fc.n(), M = sol.M, P = e.count;
  OracleError r;
  r.y_rmse.assign(n + 1, 0.0);
  r.z_rmse.assign(n, 0.0);
  double ys = 0.0, zs = 0.0;
  for (std::size_t k = 0; k <= n; ++k) {
    double ey = 0.0, ez = 0.0;
    for (std::size_t m = 0; m < M; ++m) {
      const double bt = pb.b_tail(m, k);
      for (std::size_t p = 0; p < P; ++p) {
        const double s = fc.grid.nodes[k];
        const double y = o.Y(s, e.at(k, p), bt);
        ey += (f.Y(k, m, p) - y) * (f.Y(k, m, p) - y);
        ys += y * y;
        if (k < n) {
          const double z = o.Z(s, e.at(k, p), bt);
          ez += (f.Z(k, m, p)[0] - z) * (f.Z(k, m, p)[0] - z);
          zs += z * z;
        }
      }
    }
    const double c = static_cast<double>(M * P);
    r.y_rmse[k] = std::sqrt(ey / c);
    r.y_max = std::max(r.y_max, r.y_rmse[k]);
    if (k < n) {
      r.z_rmse[k] = std::sqrt(ez / c);
      r.z_max = std::max(r.z_max, r.z_rmse[k]);
    }
  }
  r.y_scale = std::sqrt(ys / static_cast<double>((n + 1) * M * P));
  r.z_scale = std::sqrt(zs / static_cast<double>(n * M * P));
  return r;
}

// ---------------------------------------------------------------------------
// value function

struct ValueRequest {
  bool dx = false;
  bool second = false;
  std::vector<double> ys;  // atoms y for d_mu V(y) (d = 1)
  double fd_step = 1e-3;   // used only by the finite-difference pathway
};

struct ValueProblem {
  std::shared_ptr<const PathBundle> bundle;  // grid starts at the evaluation time
  std::vector<double> law_init;              // N x d draws of xi
  std::vector<double> x;
  Role y_stream = Role::aux_w;
  std::size_t y_count = 0;  // 0: all pilots
};

struct ValueSample {
  double t = 0.0;
  std::vector<double> x;
  LawMoments x_law, pi_law;
  std::size_t M = 0;
  std::vector<double> V;           // [m]
  std::vector<double> dV;          // [e][m]
  std::vector<double> d2V;         // [m]
  std::vector<double> ys;
  std::vector<double> dmuV;        // [q][m]
  std::vector<double> dydmuV;      // [q][m]
  std::string pathway = "none";    // second derivatives: solver or fd
};

inline std::shared_ptr<const PathBundle> make_bundle(const ScenarioSpec& s, const CoefficientSet& cs) {
  const TimeGrid g = make_grid(s.t, s.T, s.steps);
  return std::make_shared<const PathBundle>(
      sample_paths(g, cs.d, cs.l, s.particles, s.bpaths, Seed{s.seed, 0}, s.n_pilots()));
}

inline ValueProblem make_problem(const ScenarioSpec& s, const CoefficientSet& cs) {
  require(s.x.size() == cs.d, ErrorCode::DimMismatch, "state.x has the wrong dimension");
  ValueProblem p;
  p.bundle = make_bundle(s, cs);
  p.law_init = draw_initial_law(s.law, Seed{s.seed, 0}, s.particles, cs.d);
  p.x = s.x;
  return p;
}

inline ValueSample eval_value(const CoefficientSet& cs, const ValueProblem& prob, const ValueRequest& req,
                              const BackwardConfig& cfg) {
  const PathBundle& pb = *prob.bundle;
  const std::size_t d = cs.d, M = pb.n_bpaths;
  require(prob.x.size() == d, ErrorCode::DimMismatch, "pilot start has the wrong dimension");
  ValueSample out;
  out.t = pb.grid.t0;
  out.x = prob.x;
  out.M = M;
  out.ys = req.ys;

  if (req.second && !cs.affine_g) {
    // finite differences of the first-order solvers with common random numbers
    const double h = req.fd_step;
    ValueRequest r1;
    r1.dx = true;
    r1.ys = req.ys;
    out = eval_value(cs, prob, r1, cfg);
    ValueProblem pp = prob, pm = prob;
    pp.x[0] += h;
    pm.x[0] -= h;
    ValueRequest rx;
    rx.dx = true;
    const auto sp = eval_value(cs, pp, rx, cfg), sm = eval_value(cs, pm, rx, cfg);
    out.d2V.resize(M);
    for (std::size_t m = 0; m < M; ++m) out.d2V[m] = (sp.dV[m] - sm.dV[m]) / (2.0 * h);
    out.dydmuV.assign(req.ys.size() * M, 0.0);
    for (std::size_t q = 0; q < req.ys.size(); ++q) {
      ValueRequest ry;
      ry.ys = {req.ys[q] + h, req.ys[q] - h};
      const auto sy = eval_value(cs, prob, ry, cfg);
      for (std::size_t m = 0; m < M; ++m) out.dydmuV[q * M + m] = (sy.dmuV[m] - sy.dmuV[M + m]) / (2.0 * h);
    }
    out.pathway = "fd";
    return out;
  }

  std::vector<double> ys = req.ys;
  if (req.second && ys.empty()) ys.push_back(prob.x[0]);  // second order runs on a tangent cloud with a y pilot
  std::vector<PilotStart> ps{PilotStart::at(prob.x, pb.n_pilots, Role::pilot_w)};
  for (double y : ys) {
    require(d == 1, ErrorCode::Unsupported, "measure derivatives of V are implemented for d = 1");
    const std::size_t cnt = prob.y_count ? prob.y_count : pb.n_pilots;
    ps.push_back(PilotStart::at({y}, cnt, prob.y_stream));
  }
  const ForwardCloud fc = simulate(cs, prob.bundle, prob.law_init, ps);
  const BackwardSolution sol = solve_mf_bdsde(cs, fc, cfg);
  out.x_law = fc.law_flow[0];
  out.pi_law = sol.pi_flow[0];
  out.V.resize(M);
  for (std::size_t m = 0; m < M; ++m) out.V[m] = sol.pilots[0].Y(0, m, 0);

  std::vector<LinearSolution> dx;
  if (req.dx || req.second) {
    const TangentCloud tc = solve_dx(cs, fc, 0);
    dx = solve_dx_bdsde(cs, fc, tc, sol, cfg);
    out.dV.resize(d * M);
    for (std::size_t e = 0; e < d; ++e)
      for (std::size_t m = 0; m < M; ++m) out.dV[e * M + m] = dx[e].field.Y(0, m, 0);
  }
  if (!req.ys.empty()) out.dmuV.assign(req.ys.size() * M, 0.0);
  if (req.second && !req.ys.empty()) out.dydmuV.assign(req.ys.size() * M, 0.0);
  for (std::size_t q = 0; q < ys.size(); ++q) {
    const TangentCloud tc = solve_dmu(cs, fc, 0, 1 + q);
    const auto dxy = solve_dx_bdsde_y(cs, fc, tc, sol, cfg);
    const bool report = q < req.ys.size();
    if (report) {
      const auto dm = solve_dmu_bdsde(cs, fc, tc, sol, dxy[0], cfg);
      for (std::size_t m = 0; m < M; ++m) out.dmuV[q * M + m] = dm.pilot.field.Y(0, m, 0);
    }
    if (req.second) {
      const SecondOrderCloud so = solve_second_order(cs, fc, tc);
      const auto sec = solve_second_order_bdsde(cs, fc, tc, so, sol, dx[0], dxy[0], cfg);
      if (q == 0) {
        out.d2V.resize(M);
        for (std::size_t m = 0; m < M; ++m) out.d2V[m] = sec.dxx.field.Y(0, m, 0);
      }
      if (report)
        for (std::size_t m = 0; m < M; ++m) out.dydmuV[q * M + m] = sec.dydmu.pilot.field.Y(0, m, 0);
      out.pathway = "solver";
    }
  }
  return out;
}

// At t = T the value is Phi itself, with its derivatives taken from the coefficient set.
inline ValueSample terminal_value(const CoefficientSet& cs, const ScenarioSpec& s, const ValueRequest& req) {
  const std::size_t d = cs.d, M = s.bpaths;
  ValueSample out;
  out.t = s.T;
  out.x = s.x;
  out.M = M;
  out.ys = req.ys;
  const auto law = draw_initial_law(s.law, Seed{s.seed, 0}, s.particles, d);
  out.x_law = cs.x_features.of(law.data(), s.particles, d);
  out.V.assign(M, cs.Phi(s.x.data(), out.x_law));
  if (req.dx || req.second) {
    need(static_cast<bool>(cs.Phi_x), "Phi_x is required");
    std::vector<double> g(d);
    cs.Phi_x(s.x.data(), out.x_law, g.data());
    out.dV.resize(d * M);
    for (std::size_t e = 0; e < d; ++e)
      for (std::size_t m = 0; m < M; ++m) out.dV[e * M + m] = g[e];
  }
  if (req.second) {
    require(d == 1, ErrorCode::Unsupported, "second derivatives are implemented for d = 1");
    need(static_cast<bool>(cs.Phi_xx), "Phi_xx is required");
    double h;
    cs.Phi_xx(s.x.data(), out.x_law, &h);
    out.d2V.assign(M, h);
    out.pathway = "exact";
  }
  for (double y : req.ys) {
    require(d == 1, ErrorCode::Unsupported, "measure derivatives of V are implemented for d = 1");
    double v = 0.0, dv = 0.0;
    cs.Phi_mu.eval(s.x.data(), &y, out.x_law, &v);
    for (std::size_t m = 0; m < M; ++m) out.dmuV.push_back(v);
    if (req.second) {
      cs.Phi_mu.eval_grad(s.x.data(), &y, out.x_law, &dv);
      for (std::size_t m = 0; m < M; ++m) out.dydmuV.push_back(dv);
    }
  }
  return out;
}

inline ValueSample eval_value(const CoefficientSet& cs, const ScenarioSpec& s, const ValueRequest& req) {
  if (s.t >= s.T) return terminal_value(cs, s, req);
  return eval_value(cs, make_problem(s, cs), req, BackwardConfig::from(s));
}

// ---------------------------------------------------------------------------
// representation formulas

// Per node E|Z_s - d_x V(s, X_s) sigma(X_s)|^2 along the pilot, with d_x V(s, X_s) = d_x Y_s / J_s.
// node_ref holds the combined regression standard error of the two Z estimates.
inline ResidualReport check_representation(const CoefficientSet& cs, const ForwardCloud& fc,
                                           const BackwardSolution& sol, const TangentCloud& tc,
                                           const LinearSolution& dx) {
  require(fc.d == 1, ErrorCode::Unsupported, "representation check is implemented for d = 1");
  require(!sol.pilots.empty() && tc.pilot == 0, ErrorCode::MissingDerivativeField, "pilot derivative is required");
  const Ensemble& e = fc.pilots[0];
  const Field& base = sol.pilots[0];
  const std::size_t n = fc.n(), M = sol.M, P = e.count;
  ResidualReport r;
  r.check = "representation";
  r.node_mean.assign(n, 0.0);
  r.node_se.assign(n, 0.0);
  r.node_max.assign(n, 0.0);
  r.node_ref.assign(n, 0.0);
  for (std::size_t k = 0; k < n; ++k) {
    std::vector<double> per(M, 0.0);
    double sig2 = 0.0;
    std::vector<double> sg(P);
    for (std::size_t p = 0; p < P; ++p) {
      cs.sigma(e.at(k, p), fc.law_flow[k], &sg[p]);
      sig2 += sg[p] * sg[p];
    }
    parallel_for(M, [&](std::size_t m) {
      double s = 0.0;
      for (std::size_t p = 0; p < P; ++p) {
        const double dv = dx.field.Y(k, m, p) / tc.J(k, p)[0];
        const double diff = base.Z(k, m, p)[0] - dv * sg[p];
        s += diff * diff;
      }
      per[m] = s / static_cast<double>(P);
    });
    const auto ms = mean_se(per);
    r.node_mean[k] = ms.mean;
    r.node_se[k] = ms.se;
    r.node_max[k] = *std::max_element(per.begin(), per.end());
    const double sz = sol.se_z_pilots.empty() ? 0.0 : sol.se_z_pilots[0][k];
    const double sy = dx.se.empty() ? 0.0 : dx.se[k] * std::sqrt(sig2 / static_cast<double>(P));
    r.node_ref[k] = std::sqrt(sz * sz + sy * sy);
  }
  r.value = *std::max_element(r.node_mean.begin(), r.node_mean.end());
  return r;
}

// E|Z_s^{t,x} - d_x V(s, x, P_xi) sigma(x, P_xi)|^2 for s - t = offsets[i] steps.
// d_x V(s, x, P_xi) comes from a fresh solve started at node s on the same B-paths.
inline ResidualReport representation_ladder(const CoefficientSet& cs, const ScenarioSpec& s,
                                            const std::vector<std::size_t>& offsets) {
  require(cs.d == 1, ErrorCode::Unsupported, "representation check is implemented for d = 1");
  const BackwardConfig cfg = BackwardConfig::from(s);
  const ValueProblem prob = make_problem(s, cs);
  const ForwardCloud fc = simulate(cs, prob.bundle, prob.law_init, {PilotStart::at(s.x, prob.bundle->n_pilots, Role::pilot_w)});
  const BackwardSolution sol = solve_mf_bdsde(cs, fc, cfg);
  const std::size_t M = sol.M, P = fc.pilots[0].count;
  const LawMoments law0 = cs.x_features.of(prob.law_init.data(), s.particles, 1);
  double sig;
  cs.sigma(s.x.data(), law0, &sig);
  ResidualReport r;
  r.check = "representation-slope";
  for (std::size_t k : offsets) {
    require(k > 0 && k < fc.n(), ErrorCode::InvalidArgument, "offset must be inside the grid");
    ValueProblem sub = prob;
    sub.bundle = std::make_shared<const PathBundle>(prob.bundle->tail(k));
    ValueRequest rq;
    rq.dx = true;
    const ValueSample vs = eval_value(cs, sub, rq, cfg);
    std::vector<double> per(M, 0.0);
    for (std::size_t m = 0; m < M; ++m) {
      double acc = 0.0;
      for (std::size_t p = 0; p < P; ++p) {
        const double diff = sol.pilots[0].Z(k, m, p)[0] - vs.dV[m] * sig;
        acc += diff * diff;
      }
      per[m] = acc / static_cast<double>(P);
    }
    const auto ms = mean_se(per);
    LadderPoint lp;
    lp.scale = fc.grid.nodes[k] - fc.grid.t0;
    lp.dt = fc.grid.steps[0];
    lp.N = s.particles;
    lp.M = M;
    lp.value = ms.mean;
    lp.se = ms.se;
    r.ladder.push_back(lp);
  }
  return r;
}

// ---------------------------------------------------------------------------
// Ito formula for F(u, mu) = a u^2 + kappa (int y dmu)^2 applied to the pilot solution U
// and the law of the law-particle solution Y. Both sides over [t, T]:
//   F(U_t, P_{Y_t}) - F(U_T, P_{Y_T})
//     = int [2a U u + a|v|^2 - a|V|^2 + 2 kappa m E[f^]] dr + int 2a U v dB - int 2a U V dW
// with u, v the drivers of U, m = E[Y]. Time integrals by the trapezoid rule.

struct QuadraticF {
  double a = 1.0, kappa = 1.0;
};

// control = true adds terms whose expectation vanishes:
//   own: a sum [v_{k+1}^2 (dB_k^2 - dt_k) - |V_k|^2 (dW_k^2 - dt_k)]
//   law: kappa sum (m_k + m_{k+1}) (E_N[g_{k+1}] dB_k - E_N[V_k dW_k])
// The law terms are the pathwise stochastic integrals of the pooled mean. W is shared by all B-paths, so
// without them the gap carries one W-integral common to every path that the per-path se cannot see.
// Residual correlations are O(1/N) and O(1/M).
struct ItoOptions {
  QuadraticF F;
  bool control = false;
};

inline ResidualReport check_ito(const CoefficientSet& cs, const ForwardCloud& fc, const BackwardSolution& sol,
                                const ItoOptions& opt = {}) {
  const QuadraticF& F = opt.F;
  require(fc.d == 1 && cs.l == 1, ErrorCode::Unsupported, "Ito check is implemented for d = l = 1");
  require(!sol.pilots.empty(), ErrorCode::MissingDerivativeField, "pilot solution is required");
  const Ensemble& xe = fc.pilots[0];
  const Ensemble& le = fc.law;
  const Field& U = sol.pilots[0];
  const Field& Y = sol.law;
  const PathBundle& pb = *fc.bundle;
  const std::size_t n = fc.n(), M = sol.M, P = xe.count, N = le.count;
  const auto& dt = fc.grid.steps;

  // per-path law means and driver means
  std::vector<double> ybar((n + 1) * M), fbar((n + 1) * M), gbar((n + 1) * M), zbar((n + 1) * M, 0.0);
  parallel_for(M, [&](std::size_t m) {
    for (std::size_t k = 0; k <= n; ++k) {
      double sy = 0.0, sf = 0.0, sg = 0.0, sz = 0.0;
      for (std::size_t i = 0; i < N; ++i) {
        const double y = Y.Y(k, m, i);
        double g;
        sy += y;
        sf += cs.eval_f(le.at(k, i), y, Y.Z(k, m, i), sol.pi_flow[k]);
        cs.eval_gh(le.at(k, i), y, Y.Z(k, m, i), sol.pi_flow[k], &g);
        sg += g;
        if (k < n) sz += Y.Z(k, m, i)[0] * fc.dw(le, i, k)[0];
      }
      zbar[k * M + m] = sz / static_cast<double>(N);
      ybar[k * M + m] = sy / static_cast<double>(N);
      fbar[k * M + m] = sf / static_cast<double>(N);
      gbar[k * M + m] = sg / static_cast<double>(N);
    }
  });
  std::vector<double> mk(n + 1, 0.0);
  for (std::size_t k = 0; k <= n; ++k) {
    for (std::size_t m = 0; m < M; ++m) mk[k] += ybar[k * M + m];
    mk[k] /= static_cast<double>(M);
  }

  std::vector<double> gap(M, 0.0);
  parallel_for(M, [&](std::size_t m) {
    double own = 0.0;
    std::vector<double> phi(n + 1), u(n + 1), v(n + 1);
    for (std::size_t p = 0; p < P; ++p) {
      for (std::size_t k = 0; k <= n; ++k) {
        const double y = U.Y(k, m, p);
        const double* z = U.Z(k, m, p);
        const double f = cs.eval_f(xe.at(k, p), y, z, sol.pi_flow[k]);
        double g;
        cs.eval_gh(xe.at(k, p), y, z, sol.pi_flow[k], &g);
        u[k] = y;
        v[k] = g;
        phi[k] = 2.0 * y * f + g * g - z[0] * z[0];
      }
      double rhs = 0.0, cv = 0.0;
      for (std::size_t k = 0; k < n; ++k) {
        const double db = pb.b(m, k, 0), dw = fc.dw(xe, p, k)[0], z = U.Z(k, m, p)[0];
        rhs += 0.5 * dt[k] * (phi[k] + phi[k + 1]);
        rhs += 2.0 * u[k + 1] * v[k + 1] * db;
        rhs -= 2.0 * u[k] * z * dw;
        cv += v[k + 1] * v[k + 1] * (db * db - dt[k]) - z * z * (dw * dw - dt[k]);
      }
      own += (u[0] * u[0] - u[n] * u[n]) - rhs;
      if (opt.control) own -= cv;
    }
    own /= static_cast<double>(P);
    // (m_t^2 - m_T^2) telescopes into sum (m_k + m_{k+1})(m_k - m_{k+1}); attributing m_k - m_{k+1}
    // per path keeps the pooled gap exact and exposes its B-path noise
    double lg = 0.0;
    for (std::size_t k = 0; k < n; ++k) {
      lg += (mk[k] + mk[k + 1]) * (ybar[k * M + m] - ybar[(k + 1) * M + m]);
      lg -= dt[k] * (mk[k] * fbar[k * M + m] + mk[k + 1] * fbar[(k + 1) * M + m]);
      if (opt.control)
        lg -= (mk[k] + mk[k + 1]) * (gbar[(k + 1) * M + m] * pb.b(m, k, 0) - zbar[k * M + m]);
    }
    gap[m] = F.a * own + F.kappa * lg;
  });
  ResidualReport r;
  r.check = "ito";
  r.per_path = gap;
  const auto ms = mean_se(gap);
  r.value = ms.mean;
  r.se = ms.se;
  for (double g : gap) r.max = std::max(r.max, std::abs(g));
  double sc = 0.0;
  for (std::size_t m = 0; m < M; ++m)
    for (std::size_t p = 0; p < P; ++p) sc += U.Y(0, m, p) * U.Y(0, m, p);
  r.scale = std::max(1.0, F.a * sc / static_cast<double>(M * P) + F.kappa * mk[0] * mk[0]);
  // ridge bias of Y at the first node enters both squares linearly
  const double sy = sol.se_pilots.empty() ? 0.0 : sol.se_pilots[0][0];
  const double sl = sol.se_law.empty() ? 0.0 : sol.se_law[0];
  r.floor = 2.0 * std::abs(F.a) * std::sqrt(sc / static_cast<double>(M * P)) * sy +
            2.0 * std::abs(F.kappa) * std::abs(mk[0]) * sl;
  return r;
}

// Ito gap over a ladder of step counts (same seed, fresh bundles).
inline ResidualReport ito_ladder(const CoefficientSet& cs, const ScenarioSpec& s, const std::vector<std::size_t>& steps,
                                 const ItoOptions& opt = {}) {
  ResidualReport out;
  out.check = "ito-ladder";
  for (std::size_t n : steps) {
    ScenarioSpec sn = s;
    sn.steps = n;
    const ValueProblem prob = make_problem(sn, cs);
    const ForwardCloud fc =
        simulate(cs, prob.bundle, prob.law_init, {PilotStart::at(sn.x, prob.bundle->n_pilots, Role::pilot_w)});
    const BackwardSolution sol = solve_mf_bdsde(cs, fc, BackwardConfig::from(sn));
    const ResidualReport r = check_ito(cs, fc, sol, opt);
    LadderPoint lp;
    lp.dt = sn.dt();
    lp.scale = r.scale;
    lp.N = sn.particles;
    lp.M = sn.bpaths;
    lp.value = r.value;
    lp.se = r.se;
    lp.floor = r.floor;
    out.ladder.push_back(lp);
  }
  return out;
}

// ---------------------------------------------------------------------------
// backward SPDE residual on a time lattice at fixed (x, P_xi)

struct Quadrature {
  std::vector<double> nodes, weights;
};

// Gauss rules matched to the sampler; weights sum to one.
inline Quadrature law_quadrature(const LawSampler& law) {
  Quadrature q;
  switch (law.kind) {
    case LawSampler::Kind::gaussian: {
      const double z[] = {-2.3344142183389773, -0.7419637843027486, 0.7419637843027486, 2.3344142183389773};
      const double w[] = {0.045875854768068491, 0.45412414523193151, 0.45412414523193151, 0.045875854768068491};
      for (int i = 0; i < 4; ++i) {
        q.nodes.push_back(law.a + law.b * z[i]);
        q.weights.push_back(w[i]);
      }
      break;
    }
    case LawSampler::Kind::uniform: {
      const double z[] = {-0.86113631159405258, -0.33998104358485626, 0.33998104358485626, 0.86113631159405258};
      const double w[] = {0.34785484513745386, 0.65214515486254614, 0.65214515486254614, 0.34785484513745386};
      for (int i = 0; i < 4; ++i) {
        q.nodes.push_back(0.5 * (law.a + law.b) + 0.5 * (law.b - law.a) * z[i]);
        q.weights.push_back(0.5 * w[i]);
      }
      break;
    }
    case LawSampler::Kind::dirac:
      q.nodes.push_back(law.a);
      q.weights.push_back(1.0);
      break;
  }
  return q;
}

struct SpdeLattice {
  std::vector<ValueSample> samples;  // increasing times, same x and law
  std::vector<double> db;            // [j][m] B increment between samples j and j+1
  Quadrature quad;                   // E-hat over the law, nodes equal to samples[*].ys
};

// Per B-path gap of
//   V(t) - V(t') - int_t^t' { d_x V b + 1/2 d2_x V sigma^2 + f + E^[d_mu V(xi^) b^ + 1/2 d_y d_mu V(xi^) sigma^2(xi^)] } ds
//                - int_t^t' (g + h) dB
// with time integrals by the trapezoid rule and the backward integral by the right-endpoint rule.
inline ResidualReport check_spde_residual(const CoefficientSet& cs, const SpdeLattice& lat) {
  require(cs.d == 1 && cs.l == 1, ErrorCode::Unsupported, "SPDE residual is implemented for d = l = 1");
  const std::size_t L = lat.samples.size();
  require(L >= 1, ErrorCode::InvalidArgument, "lattice is empty");
  const std::size_t M = lat.samples[0].M, Q = lat.quad.nodes.size();
  require(lat.db.size() == (L - 1) * M, ErrorCode::LengthMismatch, "need one B increment per lattice interval");
  for (const auto& s : lat.samples) {
    require(s.M == M && s.V.size() == M, ErrorCode::LengthMismatch, "lattice samples disagree on M");
    require(s.dV.size() == M, ErrorCode::MissingDerivativeField, "d_x V is missing");
    require(s.d2V.size() == M, ErrorCode::MissingDerivativeField, "d2_xx V is missing");
    require(s.ys.size() == Q && s.dmuV.size() == Q * M, ErrorCode::MissingDerivativeField, "d_mu V is missing");
    require(s.dydmuV.size() == Q * M, ErrorCode::MissingDerivativeField, "d_y d_mu V is missing");
    for (std::size_t q = 0; q < Q; ++q)
      require(s.ys[q] == lat.quad.nodes[q], ErrorCode::InvalidArgument, "sample atoms differ from the quadrature");
  }
  // integrand per sample and path
  std::vector<double> I(L * M), G(L * M);
  for (std::size_t j = 0; j < L; ++j) {
    const ValueSample& s = lat.samples[j];
    const double* x = s.x.data();
    double b, sg;
    cs.b(x, s.x_law, &b);
    cs.sigma(x, s.x_law, &sg);
    std::vector<double> bq(Q), sq(Q);
    for (std::size_t q = 0; q < Q; ++q) {
      cs.b(&s.ys[q], s.x_law, &bq[q]);
      cs.sigma(&s.ys[q], s.x_law, &sq[q]);
    }
    for (std::size_t m = 0; m < M; ++m) {
      const double v = s.V[m], z = s.dV[m] * sg;
      double e = 0.0;
      for (std::size_t q = 0; q < Q; ++q)
        e += lat.quad.weights[q] * (s.dmuV[q * M + m] * bq[q] + 0.5 * s.dydmuV[q * M + m] * sq[q] * sq[q]);
      I[j * M + m] = s.dV[m] * b + 0.5 * s.d2V[m] * sg * sg + cs.eval_f(x, v, &z, s.pi_law) + e;
      cs.eval_gh(x, v, &z, s.pi_law, &G[j * M + m]);
    }
  }
  ResidualReport r;
  r.check = "spde";
  r.pathway = lat.samples[0].pathway;
  r.per_path.assign(M, 0.0);
  double vscale = 0.0;
  for (std::size_t m = 0; m < M; ++m) {
    double rhs = 0.0;
    for (std::size_t j = 0; j + 1 < L; ++j) {
      const double h = lat.samples[j + 1].t - lat.samples[j].t;
      rhs += 0.5 * h * (I[j * M + m] + I[(j + 1) * M + m]);
      rhs += G[(j + 1) * M + m] * lat.db[j * M + m];
    }
    r.per_path[m] = lat.samples[0].V[m] - lat.samples[L - 1].V[m] - rhs;
    vscale += std::abs(lat.samples[0].V[m]);
  }
  // mean-square residual
  std::vector<double> sq(M);
  for (std::size_t m = 0; m < M; ++m) sq[m] = r.per_path[m] * r.per_path[m];
  const auto ms = mean_se(sq);
  r.value = std::sqrt(ms.mean);
  r.se = r.value > 0.0 ? ms.se / (2.0 * r.value) : 0.0;
  for (double g : r.per_path) r.max = std::max(r.max, std::abs(g));
  r.scale = std::max(1.0, vscale / static_cast<double>(M));
  return r;
}

// Solver-produced lattice: fresh solves at each lattice node on the tail of one bundle,
// all started from x with the law of xi.
inline SpdeLattice spde_lattice(const CoefficientSet& cs, const ScenarioSpec& s, const std::vector<std::size_t>& nodes) {
  require(!nodes.empty(), ErrorCode::InvalidArgument, "lattice is empty");
  const BackwardConfig cfg = BackwardConfig::from(s);
  const ValueProblem prob = make_problem(s, cs);
  const PathBundle& pb = *prob.bundle;
  SpdeLattice lat;
  lat.quad = law_quadrature(s.law);
  ValueRequest rq;
  rq.dx = true;
  rq.second = true;
  rq.ys = lat.quad.nodes;
  for (std::size_t j = 0; j < nodes.size(); ++j) {
    require(nodes[j] < pb.n() && (j == 0 || nodes[j] > nodes[j - 1]), ErrorCode::InvalidArgument,
            "lattice nodes must increase and stay before T");
    ValueProblem sub = prob;
    if (nodes[j] > 0) sub.bundle = std::make_shared<const PathBundle>(pb.tail(nodes[j]));
    lat.samples.push_back(eval_value(cs, sub, rq, cfg));
  }
  const std::size_t M = pb.n_bpaths;
  for (std::size_t j = 0; j + 1 < nodes.size(); ++j)
    for (std::size_t m = 0; m < M; ++m) {
      double acc = 0.0;
      for (std::size_t k = nodes[j]; k < nodes[j + 1]; ++k) acc += pb.b(m, k, 0);
      lat.db.push_back(acc);
    }
  return lat;
}

// every stride-th sample of a lattice (first and last kept when they fall on the stride)
inline SpdeLattice coarsen(const SpdeLattice& lat, std::size_t stride) {
  require(stride >= 1 && !lat.samples.empty(), ErrorCode::InvalidArgument, "bad lattice stride");
  require((lat.samples.size() - 1) % stride == 0, ErrorCode::InvalidArgument, "stride must divide the lattice");
  const std::size_t M = lat.samples[0].M;
  SpdeLattice out;
  out.quad = lat.quad;
  for (std::size_t j = 0; j < lat.samples.size(); j += stride) out.samples.push_back(lat.samples[j]);
  for (std::size_t j = 0; j + stride < lat.samples.size(); j += stride)
    for (std::size_t m = 0; m < M; ++m) {
      double acc = 0.0;
      for (std::size_t i = j; i < j + stride; ++i) acc += lat.db[i * M + m];
      out.db.push_back(acc);
    }
  return out;
}

// lattice nodes on an n-step grid over [t, t + span], `points` equally spaced
inline std::vector<std::size_t> lattice_nodes(const ScenarioSpec& s, double span, std::size_t points) {
  require(points >= 2, ErrorCode::InvalidArgument, "lattice needs two points");
  const TimeGrid g = make_grid(s.t, s.T, s.steps);
  std::vector<std::size_t> out;
  for (std::size_t j = 0; j < points; ++j) {
    const double tj = s.t + span * static_cast<double>(j) / static_cast<double>(points - 1);
    const std::size_t k = g.find_node(tj, 1e-9);
    require(k != TimeGrid::npos, ErrorCode::ThetaOffGrid, "lattice time is not a grid node");
    out.push_back(k);
  }
  return out;
}

// SPDE residual over a ladder of step counts on [t, t + span]. The law argument enters through an
// N-particle cloud whose W-noise is common to all B-paths, so each level pools `replicates` independent
// seeds; particles[i] pairs with steps[i].
inline ResidualReport spde_ladder(const CoefficientSet& cs, const ScenarioSpec& s, const std::vector<std::size_t>& steps,
                                  const std::vector<std::size_t>& particles, double span, std::size_t points,
                                  std::size_t replicates) {
  require(steps.size() == particles.size(), ErrorCode::LengthMismatch, "one particle count per ladder level");
  require(replicates >= 1, ErrorCode::InvalidArgument, "need at least one replicate");
  ResidualReport out;
  out.check = "spde-ladder";
  for (std::size_t i = 0; i < steps.size(); ++i) {
    ScenarioSpec sn = s;
    sn.steps = steps[i];
    sn.particles = particles[i];
    std::vector<double> sq;
    double scale = 0.0;
    for (std::size_t r = 0; r < replicates; ++r) {
      sn.seed = s.seed + r;
      const auto rep = check_spde_residual(cs, spde_lattice(cs, sn, lattice_nodes(sn, span, points)));
      for (double g : rep.per_path) sq.push_back(g * g);
      scale += rep.scale;
      out.pathway = rep.pathway;
    }
    const auto ms = mean_se(sq);
    LadderPoint lp;
    lp.dt = sn.dt();
    lp.scale = scale / static_cast<double>(replicates);
    lp.N = sn.particles;
    lp.M = sn.bpaths;
    lp.value = std::sqrt(ms.mean);
    lp.se = lp.value > 0.0 ? ms.se / (2.0 * lp.value) : 0.0;
    out.ladder.push_back(lp);
  }
  return out;
}

// ---------------------------------------------------------------------------
// finite-difference oracles (common random numbers)

struct DerivativeCheck {
  std::string what;
  double analytic = 0.0, fd = 0.0;      // means over B-paths
  double diff_rms = 0.0, fd_rms = 0.0;  // RMS over B-paths
  double rel = 0.0;
  std::size_t M = 0;
};

namespace detail {

inline DerivativeCheck compare(const std::string& what, const std::vector<double>& a, const std::vector<double>& fd) {
  DerivativeCheck c;
  c.what = what;
  c.M = a.size();
  for (std::size_t m = 0; m < a.size(); ++m) {
    c.analytic += a[m];
    c.fd += fd[m];
    c.diff_rms += (a[m] - fd[m]) * (a[m] - fd[m]);
    c.fd_rms += fd[m] * fd[m];
  }
  const double M = static_cast<double>(a.size());
  c.analytic /= M;
  c.fd /= M;
  c.diff_rms = std::sqrt(c.diff_rms / M);
  c.fd_rms = std::sqrt(c.fd_rms / M);
  c.rel = c.fd_rms > 0.0 ? c.diff_rms / c.fd_rms : (c.diff_rms == 0.0 ? 0.0 : std::numeric_limits<double>::infinity());
  return c;
}

}  // namespace detail

inline DerivativeCheck fd_check_dx(const CoefficientSet& cs, const ScenarioSpec& s, double eps) {
  const BackwardConfig cfg = BackwardConfig::from(s);
  const ValueProblem prob = make_problem(s, cs);
  ValueRequest rq;
  rq.dx = true;
  const auto a = eval_value(cs, prob, rq, cfg);
  ValueProblem pp = prob, pm = prob;
  pp.x[0] += eps;
  pm.x[0] -= eps;
  const auto vp = eval_value(cs, pp, {}, cfg), vm = eval_value(cs, pm, {}, cfg);
  std::vector<double> fd(a.M), an(a.dV.begin(), a.dV.begin() + static_cast<std::ptrdiff_t>(a.M));
  for (std::size_t m = 0; m < a.M; ++m) fd[m] = (vp.V[m] - vm.V[m]) / (2.0 * eps);
  return detail::compare("dx", an, fd);
}

inline DerivativeCheck fd_check_dxx(const CoefficientSet& cs, const ScenarioSpec& s, double eps) {
  const BackwardConfig cfg = BackwardConfig::from(s);
  const ValueProblem prob = make_problem(s, cs);
  ValueRequest rq;
  rq.second = true;
  const auto a = eval_value(cs, prob, rq, cfg);
  ValueProblem pp = prob, pm = prob;
  pp.x[0] += eps;
  pm.x[0] -= eps;
  ValueRequest r1;
  r1.dx = true;
  const auto vp = eval_value(cs, pp, r1, cfg), vm = eval_value(cs, pm, r1, cfg);
  std::vector<double> fd(a.M);
  for (std::size_t m = 0; m < a.M; ++m) fd[m] = (vp.dV[m] - vm.dV[m]) / (2.0 * eps);
  return detail::compare("dxx", a.d2V, fd);
}

// The first K law atoms are set to y and the y pilots replay their increments, so bumping those
// atoms by eps moves the law by (K/N) eps in the direction of d_mu V(y).
inline DerivativeCheck fd_check_dmu(const CoefficientSet& cs, const ScenarioSpec& s, double y, std::size_t K,
                                    double eps) {
  require(cs.d == 1, ErrorCode::Unsupported, "measure derivatives are implemented for d = 1");
  require(K >= 1 && K <= s.particles, ErrorCode::InvalidArgument, "block size must be within the law ensemble");
  const BackwardConfig cfg = BackwardConfig::from(s);
  ValueProblem prob = make_problem(s, cs);
  for (std::size_t i = 0; i < K; ++i) prob.law_init[i] = y;
  prob.y_stream = Role::law_w;
  prob.y_count = K;
  ValueRequest rq;
  rq.ys = {y};
  const auto a = eval_value(cs, prob, rq, cfg);
  ValueProblem pp = prob, pm = prob;
  for (std::size_t i = 0; i < K; ++i) {
    pp.law_init[i] = y + eps;
    pm.law_init[i] = y - eps;
  }
  const auto vp = eval_value(cs, pp, {}, cfg), vm = eval_value(cs, pm, {}, cfg);
  const double scale = static_cast<double>(s.particles) / static_cast<double>(K);
  std::vector<double> fd(a.M);
  for (std::size_t m = 0; m < a.M; ++m) fd[m] = (vp.V[m] - vm.V[m]) / (2.0 * eps) * scale;
  return detail::compare("dmu", a.dmuV, fd);
}

inline DerivativeCheck fd_check_dydmu(const CoefficientSet& cs, const ScenarioSpec& s, double y, double eps) {
  const BackwardConfig cfg = BackwardConfig::from(s);
  const ValueProblem prob = make_problem(s, cs);
  ValueRequest rq;
  rq.second = true;
  rq.ys = {y};
  const auto a = eval_value(cs, prob, rq, cfg);
  ValueRequest r1;
  r1.ys = {y + eps, y - eps};
  const auto b = eval_value(cs, prob, r1, cfg);
  std::vector<double> fd(a.M);
  for (std::size_t m = 0; m < a.M; ++m) fd[m] = (b.dmuV[m] - b.dmuV[a.M + m]) / (2.0 * eps);
  return detail::compare("dydmu", a.dydmuV, fd);
}

// ---------------------------------------------------------------------------
// Malliavin identities

struct MalliavinCheck {
  std::size_t theta = 0;
  bool zero_before_theta = false;
  double product_rel = 0.0;   // forward: D_theta X_s vs J_s J_theta^-1 sigma(X_theta)
  double backward_rel = 0.0;  // D_theta Y_s vs d_x Y_s J_theta^-1 sigma(X_theta)
  ZIdentification zid;
};

inline MalliavinCheck check_malliavin(const CoefficientSet& cs, const ForwardCloud& fc, const BackwardSolution& sol,
                                      std::size_t theta, const BackwardConfig& cfg) {
  require(fc.d == 1, ErrorCode::Unsupported, "Malliavin product check is implemented for d = 1");
  const MalliavinForwardCloud mf = solve_malliavin_forward(cs, fc, theta, 0);
  const TangentCloud tc = solve_dx(cs, fc, 0);
  const Ensemble& e = fc.pilots[0];
  const std::size_t n = fc.n(), P = e.count, M = sol.M;
  MalliavinCheck c;
  c.theta = theta;
  c.zero_before_theta = true;
  for (std::size_t k = 0; k < theta; ++k)
    for (std::size_t p = 0; p < P; ++p) c.zero_before_theta = c.zero_before_theta && mf.at(k, p)[0] == 0.0;
  std::vector<double> lead(P);
  double num = 0.0, den = 0.0;
  for (std::size_t p = 0; p < P; ++p) {
    double sg;
    cs.sigma(e.at(theta, p), fc.law_flow[theta], &sg);
    lead[p] = sg / tc.J(theta, p)[0];
    for (std::size_t k = theta; k <= n; ++k) {
      const double ref = tc.J(k, p)[0] * lead[p];
      num = std::max(num, std::abs(mf.at(k, p)[0] - ref));
      den = std::max(den, std::abs(ref));
    }
  }
  c.product_rel = den > 0.0 ? num / den : num;
  const MalliavinSolution ms = solve_malliavin_bdsde(cs, fc, mf, sol, cfg);
  c.zid = ms.zid;
  const auto dx = solve_dx_bdsde(cs, fc, tc, sol, cfg);
  double dn = 0.0, dd = 0.0;
  for (std::size_t k = theta; k <= n; ++k)
    for (std::size_t m = 0; m < M; ++m)
      for (std::size_t p = 0; p < P; ++p) {
        const double ref = dx[0].field.Y(k, m, p) * lead[p];
        const double diff = ms.dir[0].field.Y(k, m, p) - ref;
        dn += diff * diff;
        dd += ref * ref;
      }
  c.backward_rel = dd > 0.0 ? std::sqrt(dn / dd) : std::sqrt(dn);
  return c;
}

// Z-identification residual at a fixed time theta over a ladder of step counts.
inline ResidualReport zid_ladder(const CoefficientSet& cs, const ScenarioSpec& s, double theta,
                                 const std::vector<std::size_t>& steps) {
  ResidualReport out;
  out.check = "z-identification";
  for (std::size_t n : steps) {
    ScenarioSpec sn = s;
    sn.steps = n;
    const BackwardConfig cfg = BackwardConfig::from(sn);
    const ValueProblem prob = make_problem(sn, cs);
    const ForwardCloud fc =
        simulate(cs, prob.bundle, prob.law_init, {PilotStart::at(sn.x, prob.bundle->n_pilots, Role::pilot_w)});
    const BackwardSolution sol = solve_mf_bdsde(cs, fc, cfg);
    const MalliavinForwardCloud mf = solve_malliavin_forward_at(cs, fc, theta, 0);
    const MalliavinSolution ms = solve_malliavin_bdsde(cs, fc, mf, sol, cfg);
    LadderPoint lp;
    lp.dt = sn.dt();
    lp.N = sn.particles;
    lp.M = sn.bpaths;
    lp.value = ms.zid.residual;
    lp.se = ms.zid.se;
    lp.floor = ms.zid.floor;
    out.ladder.push_back(lp);
  }
  return out;
}

// ---------------------------------------------------------------------------
// flow properties

struct FlowCheck {
  std::size_t node = 0;
  bool forward_exact = false;
  double forward_maxdiff = 0.0;
  double backward_rms = 0.0;  // max over nodes r >= s of RMS_{m,p} |Y_r - Y_r^restart|
  double backward_tol = 0.0;  // 2 (Picard tol * scale + regression se)
};

inline FlowCheck check_flow(const CoefficientSet& cs, const ScenarioSpec& s, std::size_t node) {
  const BackwardConfig cfg = BackwardConfig::from(s);
  const ValueProblem prob = make_problem(s, cs);
  const ForwardCloud fc =
      simulate(cs, prob.bundle, prob.law_init, {PilotStart::at(s.x, prob.bundle->n_pilots, Role::pilot_w)});
  require(node < fc.n(), ErrorCode::InvalidArgument, "restart node must be before T");
  const ForwardCloud fr = restart(cs, fc, node);
  FlowCheck c;
  c.node = node;
  c.forward_exact = true;
  auto cmp = [&](const Ensemble& a, const Ensemble& b) {
    for (std::size_t k = node; k < a.nodes; ++k)
      for (std::size_t i = 0; i < a.count * a.d; ++i) {
        const double u = a.x[k * a.count * a.d + i], v = b.x[(k - node) * b.count * b.d + i];
        c.forward_exact = c.forward_exact && u == v;
        c.forward_maxdiff = std::max(c.forward_maxdiff, std::abs(u - v));
      }
  };
  cmp(fc.law, fr.law);
  for (std::size_t j = 0; j < fc.pilots.size(); ++j) cmp(fc.pilots[j], fr.pilots[j]);

  const BackwardSolution sa = solve_mf_bdsde(cs, fc, cfg);
  const BackwardSolution sb = solve_mf_bdsde(cs, fr, cfg);
  const Field& a = sa.pilots[0];
  const Field& b = sb.pilots[0];
  double se = 0.0;
  for (std::size_t r = node; r < a.nodes; ++r) {
    double acc = 0.0;
    for (std::size_t m = 0; m < a.M; ++m)
      for (std::size_t p = 0; p < a.S; ++p) {
        const double dy = a.Y(r, m, p) - b.Y(r - node, m, p);
        acc += dy * dy;
      }
    c.backward_rms = std::max(c.backward_rms, std::sqrt(acc / static_cast<double>(a.M * a.S)));
    se = std::max({se, sa.se_pilots[0][r], sb.se_pilots[0][r - node]});
  }
  c.backward_tol = 2.0 * (cfg.tol * std::max(sa.scale, sb.scale) + se);
  return c;
}

// ---------------------------------------------------------------------------
// rate ladders

// E[sup_{[t, t+h]} |X - x|^p] along the pilot for each h, with a grid of `per_min` steps per smallest h.
inline std::vector<double> sup_moment_ladder(const CoefficientSet& cs, const ScenarioSpec& s, double p,
                                             const std::vector<double>& hs, std::size_t per_min = 64) {
  require(!hs.empty(), ErrorCode::InsufficientLadder, "empty ladder");
  const double hmin = *std::min_element(hs.begin(), hs.end()), hmax = *std::max_element(hs.begin(), hs.end());
  const std::size_t n = static_cast<std::size_t>(std::llround(hmax / hmin)) * per_min;
  ScenarioSpec sg = s;
  sg.T = s.t + hmax;
  sg.steps = n;
  const ValueProblem prob = make_problem(sg, cs);
  const ForwardCloud fc =
      simulate(cs, prob.bundle, prob.law_init, {PilotStart::at(s.x, prob.bundle->n_pilots, Role::pilot_w)});
  const Ensemble& e = fc.pilots[0];
  const std::size_t d = cs.d;
  std::vector<double> out;
  for (double h : hs) {
    const std::size_t kh = static_cast<std::size_t>(std::llround(h / hmin)) * per_min;
    double acc = 0.0;
    for (std::size_t q = 0; q < e.count; ++q) {
      double sup = 0.0;
      for (std::size_t k = 0; k <= kh; ++k) {
        double r2 = 0.0;
        for (std::size_t j = 0; j < d; ++j) {
          const double dv = e.at(k, q)[j] - s.x[j];
          r2 += dv * dv;
        }
        sup = std::max(sup, r2);
      }
      acc += std::pow(sup, 0.5 * p);
    }
    out.push_back(acc / static_cast<double>(e.count));
  }
  return out;
}

struct TimeRegularity {
  std::vector<double> q;         // time offsets
  std::vector<double> ms;        // E|V(t+q) - V(t)|^2
  std::vector<double> envelope;  // E[|V(t+q) - V(t)| |eta|]
  std::vector<double> psi;       // Psi_eta(t+q) - Psi_eta(t), Psi_eta = E[V eta]
  std::vector<double> psi_se;
};

// Values at t + q from fresh solves on the tail of one bundle; eta = B_T - B_{(T+t)/2}, clipped at 4 sd.
inline TimeRegularity time_regularity(const CoefficientSet& cs, const ScenarioSpec& s,
                                      const std::vector<std::size_t>& q_nodes) {
  const BackwardConfig cfg = BackwardConfig::from(s);
  const ValueProblem prob = make_problem(s, cs);
  const PathBundle& pb = *prob.bundle;
  const std::size_t M = pb.n_bpaths, n = pb.n();
  const std::size_t mid = pb.grid.find_node(0.5 * (s.t + s.T), 1e-9);
  require(mid != TimeGrid::npos, ErrorCode::ThetaOffGrid, "midpoint must be a grid node");
  const double clip = 4.0 * std::sqrt(0.5 * (s.T - s.t));
  std::vector<double> eta(M);
  for (std::size_t m = 0; m < M; ++m) eta[m] = std::clamp(pb.b_tail(m, mid), -clip, clip);
  const ValueSample v0 = eval_value(cs, prob, {}, cfg);
  TimeRegularity out;
  for (std::size_t k : q_nodes) {
    require(k > 0 && k < n, ErrorCode::InvalidArgument, "offset must be inside the grid");
    ValueProblem sub = prob;
    sub.bundle = std::make_shared<const PathBundle>(pb.tail(k));
    const ValueSample vq = eval_value(cs, sub, {}, cfg);
    double a = 0.0, b = 0.0;
    std::vector<double> ps(M);
    for (std::size_t m = 0; m < M; ++m) {
      const double dv = vq.V[m] - v0.V[m];
      a += dv * dv;
      b += std::abs(dv) * std::abs(eta[m]);
      ps[m] = dv * eta[m];
    }
    const auto pm = mean_se(ps);
    out.q.push_back(pb.grid.nodes[k] - s.t);
    out.ms.push_back(a / static_cast<double>(M));
    out.envelope.push_back(b / static_cast<double>(M));
    out.psi.push_back(pm.mean);
    out.psi_se.push_back(pm.se);
  }
  return out;
}

}  // namespace mfbdsde
