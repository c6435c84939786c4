#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <vector>

#include "coefficients.hpp"
#include "error.hpp"
#include "forward.hpp"
#include "linear_bdsde.hpp"
#include "parallel.hpp"
#include "regression.hpp"
#include "scenarios.hpp"

namespace mfbdsde {

struct BackwardConfig {
  RegressionConfig reg;
  double tol = 1e-3;
  std::size_t max_iter = 20;

  static BackwardConfig from(const ScenarioSpec& s) {
    BackwardConfig c;
    c.reg.degree = s.degree;
    c.reg.ridge = s.ridge;
    c.tol = s.picard_tol;
    c.max_iter = s.picard_max_iter;
    return c;
  }
};

struct BackwardSolution {
  TimeGrid grid;
  std::size_t M = 0, d = 1, l = 1;
  Field law;                   // over the law particles
  std::vector<Field> pilots;   // one per pilot family of the forward cloud
  std::vector<LawMoments> pi_flow;  // pooled (X, Y, Z) moments per node
  std::vector<LawMoments> x_flow;
  std::size_t picard_iters = 0;
  std::vector<double> residuals;
  double picard_residual = 0.0;
  double scale = 1.0;
  bool converged = false;
  std::vector<double> se_law;
  std::vector<std::vector<double>> se_pilots, se_z_pilots;
};

namespace detail {

// (x, y, z) of sample (m, s) at node k
inline void pi_atom(const Ensemble& e, const Field& f, std::size_t k, std::size_t m, std::size_t s, double* out) {
  const std::size_t d = e.d;
  const double* x = e.at(k, s);
  for (std::size_t j = 0; j < d; ++j) out[j] = x[j];
  out[d] = f.Y(k, m, s);
  const double* z = f.Z(k, m, s);
  for (std::size_t j = 0; j < d; ++j) out[d + 1 + j] = z[j];
}

// pooled over M x S, per-m partials merged in m order
inline std::vector<LawMoments> pooled_pi(const CoefficientSet& cs, const Ensemble& e, const Field& f) {
  std::vector<LawMoments> out(f.nodes);
  const std::size_t M = f.M, S = f.S, pd = 2 * e.d + 1;
  for (std::size_t k = 0; k < f.nodes; ++k) {
    std::vector<MomentAccumulator> part(M, MomentAccumulator(cs.pi_features));
    parallel_for(M, [&](std::size_t m) {
      std::vector<double> atom(pd);
      for (std::size_t s = 0; s < S; ++s) {
        pi_atom(e, f, k, m, s, atom.data());
        part[m].add(atom.data());
      }
    });
    MomentAccumulator acc(cs.pi_features);
    for (const auto& p : part) acc.merge(p);
    out[k] = acc.result();
  }
  return out;
}

inline std::vector<LawMoments> initial_pi(const CoefficientSet& cs, const ForwardCloud& fc, std::size_t M) {
  Field zero;
  zero.init(fc.n() + 1, M, fc.law.count, fc.d);
  return pooled_pi(cs, fc.law, zero);
}

inline BackwardEngine::Target base_target(const CoefficientSet& cs, const Ensemble& e, const PathBundle& pb,
                                          const std::vector<LawMoments>& pi) {
  return [&cs, &e, &pb, &pi](std::size_t k, std::size_t m, std::size_t s, double y1, const double* z1) {
    const double* x = e.at(k + 1, s);
    const LawMoments& mo = pi[k + 1];
    double v = y1 + cs.eval_f(x, y1, z1, mo) * pb.grid.steps[k];
    thread_local std::vector<double> gh;
    gh.resize(cs.l);
    cs.eval_gh(x, y1, z1, mo, gh.data());
    for (std::size_t j = 0; j < cs.l; ++j) v += gh[j] * pb.b(m, k, j);
    return v;
  };
}

inline std::vector<double> terminal_phi(const CoefficientSet& cs, const Ensemble& e, const LawMoments& mx,
                                        std::size_t M) {
  const std::size_t n = e.nodes - 1, S = e.count;
  std::vector<double> t(M * S);
  for (std::size_t s = 0; s < S; ++s) {
    const double v = cs.Phi(e.at(n, s), mx);
    for (std::size_t m = 0; m < M; ++m) t[m * S + s] = v;
  }
  return t;
}

}  // namespace detail

inline BackwardEngine make_engine(const ForwardCloud& fc, const Ensemble& e, const RegressionConfig& reg,
                                  std::size_t q = 0, const TangentFn& tangent = {}, std::size_t start = 0) {
  return BackwardEngine(make_population(fc, e, q, tangent), *fc.bundle, reg, start);
}

// Outer Picard on the Pi-law flow, inner per-B-path regression sweeps on the law particles.
// Pilot families are solved once against the converged flow.
inline BackwardSolution solve_mf_bdsde(const CoefficientSet& cs, const ForwardCloud& fc, const BackwardConfig& cfg) {
  require(static_cast<bool>(cs.Phi), ErrorCode::MissingDerivative, "terminal function Phi is required");
  const PathBundle& pb = *fc.bundle;
  require(pb.l == cs.l, ErrorCode::DimMismatch, "bundle and coefficients disagree on l");
  const std::size_t n = fc.n(), M = pb.n_bpaths;
  BackwardSolution sol;
  sol.grid = fc.grid;
  sol.M = M;
  sol.d = fc.d;
  sol.l = cs.l;
  sol.x_flow = fc.law_flow;

  BackwardEngine eng = make_engine(fc, fc.law, cfg.reg);
  const auto term = detail::terminal_phi(cs, fc.law, fc.law_flow[n], M);
  std::vector<LawMoments> pi = detail::initial_pi(cs, fc, M);
  for (std::size_t it = 1; it <= cfg.max_iter; ++it) {
    Field f = eng.sweep(term, detail::base_target(cs, fc.law, pb, pi), &sol.se_law);
    sol.picard_iters = it;
    if (it > 1) {
      sol.residuals.push_back(field_distance(f, sol.law, fc.grid));
      detail::check_divergence(sol.residuals);
    }
    pi = detail::pooled_pi(cs, fc.law, f);
    sol.law = std::move(f);
    sol.scale = std::max(1.0, rms_node(sol.law, 0));
    if (it > 1 && sol.residuals.back() <= cfg.tol * sol.scale) {
      sol.converged = true;
      break;
    }
  }
  sol.picard_residual = sol.residuals.empty() ? 0.0 : sol.residuals.back();
  sol.pi_flow = pi;

  for (const auto& e : fc.pilots) {
    BackwardEngine pe = make_engine(fc, e, cfg.reg);
    std::vector<double> se, sez;
    sol.pilots.push_back(pe.sweep(detail::terminal_phi(cs, e, fc.law_flow[n], M),
                                  detail::base_target(cs, e, pb, sol.pi_flow), &se, &sez));
    sol.se_pilots.push_back(std::move(se));
    sol.se_z_pilots.push_back(std::move(sez));
  }
  return sol;
}

// ---------------------------------------------------------------------------
// first-order linearization shared by d_x and D_theta:
//   dY = Phi_x T_T + int (f_x T + f_y dY + f_z dZ) dr + int (g_x T + g_y dY + g_z dZ) dB - int dZ dW

namespace detail {

inline void check_first_order(const CoefficientSet& cs) {
  need(!cs.f || static_cast<bool>(cs.f_grad), "f_grad is required");
  need(!(cs.g || cs.g1) || static_cast<bool>(cs.g_grad), "g_grad is required");
  need(static_cast<bool>(cs.Phi_x), "Phi_x is required");
}

// T: [node][p][c*d + e], direction e; returns one solution per direction
inline std::vector<LinearSolution> first_order_bdsde(const CoefficientSet& cs, const ForwardCloud& fc,
                                                     const BackwardSolution& sol, std::size_t family,
                                                     const std::vector<double>& T, std::size_t start,
                                                     const BackwardConfig& cfg) {
  check_first_order(cs);
  require(family < fc.pilots.size() && family < sol.pilots.size(), ErrorCode::MissingDerivativeField,
          "no base solution for this pilot family");
  const Ensemble& e = fc.pilots[family];
  const Field& base = sol.pilots[family];
  const std::size_t d = fc.d, l = cs.l, n = fc.n(), P = e.count, M = sol.M, pd = 2 * d + 1;
  require(T.size() == (n + 1) * P * d * d, ErrorCode::LengthMismatch, "tangent has the wrong size");
  std::vector<LinearSolution> out;
  for (std::size_t dir = 0; dir < d; ++dir) {
    BackwardEngine eng = make_engine(
        fc, e, cfg.reg, d,
        [&](std::size_t k, std::size_t p, double* o) {
          for (std::size_t c = 0; c < d; ++c) o[c] = T[(k * P + p) * d * d + c * d + dir];
        },
        start);
    LinearBdsdeSpec spec;
    spec.l = l;
    spec.start_node = start;
    spec.tol = cfg.tol;
    spec.max_iter = cfg.max_iter;
    spec.terminal.resize(M * P);
    {
      std::vector<double> px(d);
      for (std::size_t p = 0; p < P; ++p) {
        cs.Phi_x(e.at(n, p), fc.law_flow[n], px.data());
        double v = 0.0;
        for (std::size_t c = 0; c < d; ++c) v += px[c] * T[(n * P + p) * d * d + c * d + dir];
        for (std::size_t m = 0; m < M; ++m) spec.terminal[m * P + p] = v;
      }
    }
    spec.drivers = [&, dir](std::size_t k, std::size_t m, std::size_t p, LinearCoeffs& c) {
      thread_local std::vector<double> atom, fg, gg;
      atom.resize(pd);
      fg.assign(pd, 0.0);
      gg.assign(l * pd, 0.0);
      pi_atom(e, base, k, m, p, atom.data());
      const LawMoments& mo = sol.pi_flow[k];
      if (cs.f_grad) cs.f_grad(atom.data(), atom[d], atom.data() + d + 1, mo, fg.data());
      if (cs.g_grad) cs.g_grad(atom.data(), atom[d], atom.data() + d + 1, mo, gg.data());
      const double* Tk = &T[(k * P + p) * d * d];
      for (std::size_t q = 0; q < d; ++q) c.R += fg[q] * Tk[q * d + dir];
      c.lambda = fg[d];
      for (std::size_t q = 0; q < d; ++q) c.gamma[q] = fg[d + 1 + q];
      for (std::size_t j = 0; j < l; ++j) {
        const double* gj = &gg[j * pd];
        for (std::size_t q = 0; q < d; ++q) c.H[j] += gj[q] * Tk[q * d + dir];
        c.beta[j] = gj[d];
        for (std::size_t q = 0; q < d; ++q) c.delta[j * d + q] = gj[d + 1 + q];
      }
    };
    out.push_back(solve_linear_bdsde(spec, eng));
  }
  return out;
}

}  // namespace detail

// (d_x Y, d_x Z) along pilot family tc.pilot; one solution per direction x_e
inline std::vector<LinearSolution> solve_dx_bdsde(const CoefficientSet& cs, const ForwardCloud& fc,
                                                  const TangentCloud& tc, const BackwardSolution& sol,
                                                  const BackwardConfig& cfg) {
  return detail::first_order_bdsde(cs, fc, sol, tc.pilot, tc.dx, 0, cfg);
}

// same along the y-pilot family (needed by the measure derivative)
inline std::vector<LinearSolution> solve_dx_bdsde_y(const CoefficientSet& cs, const ForwardCloud& fc,
                                                    const TangentCloud& tc, const BackwardSolution& sol,
                                                    const BackwardConfig& cfg) {
  require(tc.has_dmu, ErrorCode::MissingDerivativeField, "y-pilot tangent not available");
  return detail::first_order_bdsde(cs, fc, sol, tc.y_pilot, tc.dx_y, 0, cfg);
}

// ---------------------------------------------------------------------------
// Malliavin BDSDE

struct ZIdentification {
  std::size_t theta = 0;
  double residual = 0.0;  // mean over (m, p) of |Z_theta - D_theta Y_{theta+1}|^2
  double se = 0.0;        // from per-B-path means
  double floor = 0.0;     // squared regression error of Z_theta plus that of D_theta Y_{theta+1}
};

struct MalliavinSolution {
  std::vector<LinearSolution> dir;  // D^e_theta (Y, Z), e = 1..d
  ZIdentification zid;
};

inline MalliavinSolution solve_malliavin_bdsde(const CoefficientSet& cs, const ForwardCloud& fc,
                                               const MalliavinForwardCloud& mf, const BackwardSolution& sol,
                                               const BackwardConfig& cfg) {
  require(mf.theta < fc.n(), ErrorCode::ThetaOffGrid, "theta must be a grid node before T");
  MalliavinSolution ms;
  ms.dir = detail::first_order_bdsde(cs, fc, sol, mf.pilot, mf.D, mf.theta, cfg);
  const std::size_t th = mf.theta, M = sol.M, P = mf.count, d = fc.d;
  const Field& base = sol.pilots[mf.pilot];
  std::vector<double> per(M, 0.0);
  for (std::size_t m = 0; m < M; ++m) {
    double s = 0.0;
    for (std::size_t p = 0; p < P; ++p) {
      const double* z = base.Z(th, m, p);
      for (std::size_t e = 0; e < d; ++e) {
        const double diff = z[e] - ms.dir[e].field.Y(th + 1, m, p);
        s += diff * diff;
      }
    }
    per[m] = s / static_cast<double>(P);
  }
  double mean = 0.0;
  for (double v : per) mean += v;
  mean /= static_cast<double>(M);
  double var = 0.0;
  for (double v : per) var += (v - mean) * (v - mean);
  ms.zid.theta = th;
  ms.zid.residual = mean;
  ms.zid.se = M > 1 ? std::sqrt(var / static_cast<double>(M - 1) / static_cast<double>(M)) : 0.0;
  double fl = 0.0;
  for (std::size_t e = 0; e < d; ++e) {
    const double a = mf.pilot < sol.se_z_pilots.size() ? sol.se_z_pilots[mf.pilot][th] : 0.0;
    const double b = ms.dir[e].se.size() > th + 1 ? ms.dir[e].se[th + 1] : 0.0;
    fl += (a + b) * (a + b);
  }
  ms.zid.floor = fl;
  return ms;
}

// ---------------------------------------------------------------------------
// measure derivative (d = l = 1)
// Channels: one per rank of f_mu (drift), g_mu and h_mu (backward integrand).
// E_c[k] = mean over (m, p) of K_c(Pi^y) . dPi^y  +  mean over (m, i) of K_c(Pi^xi) . Gamma^xi

struct MeasureDerivativeSolution {
  LinearSolution law;    // (O, Q) with x replaced by xi
  LinearSolution pilot;  // (O, Q) along the x pilot
  std::vector<double> hat;  // [node][channel]
};

namespace detail {

struct Channel {
  const Separable* s;
  std::size_t r;
  bool drift;
};

inline std::vector<Channel> measure_channels(const CoefficientSet& cs) {
  std::vector<Channel> ch;
  for (std::size_t r = 0; r < cs.f_mu.rank; ++r) ch.push_back({&cs.f_mu, r, true});
  for (std::size_t r = 0; r < cs.g_mu.rank; ++r) ch.push_back({&cs.g_mu, r, false});
  for (std::size_t r = 0; r < cs.h_mu.rank; ++r) ch.push_back({&cs.h_mu, r, false});
  return ch;
}

inline void check_measure(const CoefficientSet& cs, const ForwardCloud& fc) {
  require(fc.d == 1 && cs.l == 1, ErrorCode::Unsupported, "measure-derivative BDSDE is implemented for d = l = 1");
  check_first_order(cs);
  need(cs.f_mu.supplied() && cs.g_mu.supplied() && cs.h_mu.supplied() && cs.Phi_mu.supplied(),
       "f_mu, g_mu, h_mu and Phi_mu are required");
}

// evaluate kernels of all channels at one atom: k[ch*3 + c], optional dk[(ch*3 + c)*3 + e]
inline void channel_kernels(const CoefficientSet& cs, const std::vector<Channel>& ch, const double* atom,
                            const LawMoments& mo, double* k, double* dk) {
  const Separable* seps[3] = {&cs.f_mu, &cs.g_mu, &cs.h_mu};
  thread_local std::vector<double> kb, db;
  std::size_t base = 0;
  for (const Separable* s : seps) {
    if (s->rank == 0) continue;
    kb.resize(s->rank * 3);
    s->kernel(atom, mo, kb.data());
    std::copy(kb.begin(), kb.end(), k + base * 3);
    if (dk) {
      require(static_cast<bool>(s->kernel_grad), ErrorCode::MissingDerivative, "kernel gradient not supplied");
      db.resize(s->rank * 9);
      s->kernel_grad(atom, mo, db.data());
      std::copy(db.begin(), db.end(), dk + base * 9);
    }
    base += s->rank;
  }
  (void)ch;
}

inline void channel_owns(const CoefficientSet& cs, const double* atom, const LawMoments& mo, double* a) {
  const Separable* seps[3] = {&cs.f_mu, &cs.g_mu, &cs.h_mu};
  std::size_t base = 0;
  for (const Separable* s : seps) {
    if (s->rank == 0) continue;
    s->own(atom, mo, a + base);
    base += s->rank;
  }
}

// Known y-pilot part of the channel averages, [node][channel].
// first: dPi^y = (J^y, dxY^y, dxZ^y); with second: K . d2Pi^y + dPi^y' dK dPi^y
struct YPilotDerivs {
  const std::vector<double>* J = nullptr;  // [node][p]
  const Field* dY = nullptr;               // y and z of the d_x solution
  const std::vector<double>* H = nullptr;  // second order
  const Field* d2Y = nullptr;
};

inline std::vector<double> y_sources(const CoefficientSet& cs, const std::vector<Channel>& ch,
                                     const ForwardCloud& fc, const BackwardSolution& sol, std::size_t yfam,
                                     const YPilotDerivs& yd) {
  const std::size_t nc = ch.size(), n = fc.n(), M = sol.M;
  const Ensemble& ye = fc.pilots[yfam];
  const Field& base = sol.pilots[yfam];
  const std::size_t P = ye.count;
  const bool second = yd.H != nullptr;
  std::vector<double> out((n + 1) * nc, 0.0);
  if (nc == 0) return out;
  for (std::size_t k = 0; k <= n; ++k) {
    std::vector<double> part(M * nc, 0.0);
    parallel_for(M, [&](std::size_t m) {
      double atom[3], d1[3], d2[3] = {};
      std::vector<double> kv(nc * 3), dk(second ? nc * 9 : 0);
      for (std::size_t p = 0; p < P; ++p) {
        pi_atom(ye, base, k, m, p, atom);
        d1[0] = (*yd.J)[k * P + p];
        d1[1] = yd.dY->Y(k, m, p);
        d1[2] = yd.dY->Z(k, m, p)[0];
        if (second) {
          d2[0] = (*yd.H)[k * P + p];
          d2[1] = yd.d2Y->Y(k, m, p);
          d2[2] = yd.d2Y->Z(k, m, p)[0];
        }
        channel_kernels(cs, ch, atom, sol.pi_flow[k], kv.data(), second ? dk.data() : nullptr);
        for (std::size_t c = 0; c < nc; ++c) {
          double v = 0.0;
          for (std::size_t a = 0; a < 3; ++a) v += kv[c * 3 + a] * (second ? d2[a] : d1[a]);
          if (second)
            for (std::size_t a = 0; a < 3; ++a)
              for (std::size_t b = 0; b < 3; ++b) v += d1[a] * dk[(c * 3 + a) * 3 + b] * d1[b];
          part[m * nc + c] += v;
        }
      }
    });
    for (std::size_t c = 0; c < nc; ++c) {
      double s = 0.0;
      for (std::size_t m = 0; m < M; ++m) s += part[m * nc + c];
      out[k * nc + c] = s / static_cast<double>(M * P);
    }
  }
  return out;
}

// Two-stage solve. law_T / pilot_T: forward measure tangents [node][i] / [node][p];
// ysrc: [node][channel]; phi_src[r]: known y-pilot part of the terminal average for Phi_mu rank r.
inline MeasureDerivativeSolution measure_stages(const CoefficientSet& cs, const ForwardCloud& fc,
                                                const BackwardSolution& sol, std::size_t xfam,
                                                const std::vector<double>& law_T, const std::vector<double>& pilot_T,
                                                const std::vector<double>& ysrc, const std::vector<double>& phi_src,
                                                const BackwardConfig& cfg) {
  const auto ch = measure_channels(cs);
  const std::size_t nc = ch.size(), n = fc.n(), M = sol.M, N = fc.law.count;
  const Ensemble& le = fc.law;
  const Ensemble& xe = fc.pilots[xfam];
  const std::size_t P = xe.count;
  const LawMoments& mxT = fc.law_flow[n];
  const PathBundle& pb = *fc.bundle;
  (void)pb;

  // Phi_mu average: phi_src + mean_i K(X^xi_T) law_T
  const std::size_t rphi = cs.Phi_mu.rank;
  std::vector<double> phi_avg(phi_src);
  phi_avg.resize(rphi, 0.0);
  {
    std::vector<double> kv(rphi), acc(rphi, 0.0);
    for (std::size_t i = 0; i < N; ++i) {
      cs.Phi_mu.kernel(le.at(n, i), mxT, kv.data());
      for (std::size_t r = 0; r < rphi; ++r) acc[r] += kv[r] * law_T[n * N + i];
    }
    for (std::size_t r = 0; r < rphi; ++r) phi_avg[r] += acc[r] / static_cast<double>(N);
  }
  auto terminal = [&](const Ensemble& e, const std::vector<double>& T) {
    const std::size_t S = e.count;
    std::vector<double> t(M * S);
    std::vector<double> A(rphi);
    for (std::size_t s = 0; s < S; ++s) {
      double px;
      cs.Phi_x(e.at(n, s), mxT, &px);
      double v = px * T[n * S + s];
      if (rphi) {
        cs.Phi_mu.own(e.at(n, s), mxT, A.data());
        for (std::size_t r = 0; r < rphi; ++r) v += A[r] * phi_avg[r];
      }
      for (std::size_t m = 0; m < M; ++m) t[m * S + s] = v;
    }
    return t;
  };

  // known law part of the channel averages: mean_{m,i} K_c[x](Pi^xi) law_T
  std::vector<double> offset(ysrc);
  for (std::size_t k = 0; k <= n && nc > 0; ++k) {
    std::vector<double> part(M * nc, 0.0);
    parallel_for(M, [&](std::size_t m) {
      double atom[3];
      std::vector<double> kv(nc * 3);
      for (std::size_t i = 0; i < N; ++i) {
        pi_atom(le, sol.law, k, m, i, atom);
        channel_kernels(cs, ch, atom, sol.pi_flow[k], kv.data(), nullptr);
        for (std::size_t c = 0; c < nc; ++c) part[m * nc + c] += kv[c * 3] * law_T[k * N + i];
      }
    });
    for (std::size_t c = 0; c < nc; ++c) {
      double s = 0.0;
      for (std::size_t m = 0; m < M; ++m) s += part[m * nc + c];
      offset[k * nc + c] += s / static_cast<double>(M * N);
    }
  }

  auto make_drivers = [&](const Ensemble& e, const Field& base, const std::vector<double>& T,
                          const std::vector<double>* fixedE) {
    const std::size_t S = e.count;
    return [&, S, fixedE](std::size_t k, std::size_t m, std::size_t s, LinearCoeffs& c) {
      double atom[3], fg[3] = {0, 0, 0}, gg[3] = {0, 0, 0};
      thread_local std::vector<double> A;
      A.resize(nc);
      pi_atom(e, base, k, m, s, atom);
      const LawMoments& mo = sol.pi_flow[k];
      if (cs.f_grad) cs.f_grad(atom, atom[1], atom + 2, mo, fg);
      if (cs.g_grad) cs.g_grad(atom, atom[1], atom + 2, mo, gg);
      const double t = T[k * S + s];
      c.R = fg[0] * t;
      c.lambda = fg[1];
      c.gamma[0] = fg[2];
      c.H[0] = gg[0] * t;
      c.beta[0] = gg[1];
      c.delta[0] = gg[2];
      if (nc == 0) return;
      channel_owns(cs, atom, mo, A.data());
      for (std::size_t q = 0; q < nc; ++q) {
        if (fixedE) {
          const double Ev = (*fixedE)[k * nc + q];
          if (ch[q].drift) c.R += A[q] * Ev;
          else c.H[0] += A[q] * Ev;
        } else {
          if (ch[q].drift) c.a[q] = A[q];
          else c.b[q] = A[q];
        }
      }
    };
  };

  MeasureDerivativeSolution out;
  {
    BackwardEngine eng = make_engine(fc, le, cfg.reg, 1,
                                     [&](std::size_t k, std::size_t i, double* o) { o[0] = law_T[k * N + i]; });
    LinearBdsdeSpec spec;
    spec.l = 1;
    spec.channels = nc;
    spec.tol = cfg.tol;
    spec.max_iter = cfg.max_iter;
    spec.terminal = terminal(le, law_T);
    spec.drivers = make_drivers(le, sol.law, law_T, nullptr);
    spec.hat_weights = [&](std::size_t k, std::size_t m, std::size_t i, double* wy, double* wz) {
      double atom[3];
      thread_local std::vector<double> kv;
      kv.resize(nc * 3);
      pi_atom(le, sol.law, k, m, i, atom);
      channel_kernels(cs, ch, atom, sol.pi_flow[k], kv.data(), nullptr);
      for (std::size_t c = 0; c < nc; ++c) {
        wy[c] = kv[c * 3 + 1];
        wz[c] = kv[c * 3 + 2];
      }
    };
    spec.hat_offset = [&](std::size_t k, double* off) {
      for (std::size_t c = 0; c < nc; ++c) off[c] = offset[k * nc + c];
    };
    out.law = solve_linear_bdsde(spec, eng);
    out.hat = out.law.hat;
    if (out.hat.empty()) out.hat.assign((n + 1) * nc, 0.0);
  }
  {
    BackwardEngine eng = make_engine(fc, xe, cfg.reg, 1,
                                     [&](std::size_t k, std::size_t p, double* o) { o[0] = pilot_T[k * P + p]; });
    LinearBdsdeSpec spec;
    spec.l = 1;
    spec.tol = cfg.tol;
    spec.max_iter = cfg.max_iter;
    spec.terminal = terminal(xe, pilot_T);
    spec.drivers = make_drivers(xe, sol.pilots[xfam], pilot_T, &out.hat);
    out.pilot = solve_linear_bdsde(spec, eng);
  }
  return out;
}

}  // namespace detail

// (O, Q) = (d_mu Y(y), d_mu Z(y)) along the x pilot; dx_y is the d_x solution on the y pilot.
inline MeasureDerivativeSolution solve_dmu_bdsde(const CoefficientSet& cs, const ForwardCloud& fc,
                                                 const TangentCloud& tc, const BackwardSolution& sol,
                                                 const LinearSolution& dx_y, const BackwardConfig& cfg) {
  detail::check_measure(cs, fc);
  require(tc.has_dmu, ErrorCode::MissingDerivativeField, "forward measure tangent is required");
  const auto ch = detail::measure_channels(cs);
  detail::YPilotDerivs yd;
  yd.J = &tc.dx_y;
  yd.dY = &dx_y.field;
  const auto ysrc = detail::y_sources(cs, ch, fc, sol, tc.y_pilot, yd);
  const std::size_t n = fc.n(), rphi = cs.Phi_mu.rank;
  const Ensemble& ye = fc.pilots[tc.y_pilot];
  std::vector<double> phi_src(rphi, 0.0), kv(rphi);
  for (std::size_t p = 0; p < ye.count; ++p) {
    if (!rphi) break;
    cs.Phi_mu.kernel(ye.at(n, p), fc.law_flow[n], kv.data());
    for (std::size_t r = 0; r < rphi; ++r) phi_src[r] += kv[r] * tc.dx_y[n * ye.count + p];
  }
  for (double& v : phi_src) v /= static_cast<double>(ye.count);
  return detail::measure_stages(cs, fc, sol, tc.pilot, tc.dmu_law, tc.dmu, ysrc, phi_src, cfg);
}

// ---------------------------------------------------------------------------
// second order (d = l = 1, affine g)

struct SecondOrderSolution {
  LinearSolution dxx;    // along the x pilot
  LinearSolution dxx_y;  // along the y pilot
  MeasureDerivativeSolution dydmu;
};

namespace detail {

// d2Y = Phi_xx J^2 + Phi_x H + int (dPi' f_hess dPi + f_x H + f_y d2Y + f_z d2Z) dr + (same for g) dB
inline LinearSolution dxx_bdsde(const CoefficientSet& cs, const ForwardCloud& fc, const BackwardSolution& sol,
                                std::size_t family, const std::vector<double>& J, const std::vector<double>& H,
                                const LinearSolution& dx, const BackwardConfig& cfg) {
  const Ensemble& e = fc.pilots[family];
  const Field& base = sol.pilots[family];
  const std::size_t n = fc.n(), P = e.count, M = sol.M;
  BackwardEngine eng = make_engine(fc, e, cfg.reg, 2, [&](std::size_t k, std::size_t p, double* o) {
    o[0] = J[k * P + p] * J[k * P + p];
    o[1] = H[k * P + p];
  });
  LinearBdsdeSpec spec;
  spec.l = 1;
  spec.tol = cfg.tol;
  spec.max_iter = cfg.max_iter;
  spec.terminal.resize(M * P);
  for (std::size_t p = 0; p < P; ++p) {
    double px, pxx;
    cs.Phi_x(e.at(n, p), fc.law_flow[n], &px);
    cs.Phi_xx(e.at(n, p), fc.law_flow[n], &pxx);
    const double j = J[n * P + p];
    const double v = pxx * j * j + px * H[n * P + p];
    for (std::size_t m = 0; m < M; ++m) spec.terminal[m * P + p] = v;
  }
  spec.drivers = [&](std::size_t k, std::size_t m, std::size_t p, LinearCoeffs& c) {
    double atom[3], fg[3] = {0, 0, 0}, gg[3] = {0, 0, 0}, fh[9] = {}, gh[9] = {}, dp[3];
    pi_atom(e, base, k, m, p, atom);
    const LawMoments& mo = sol.pi_flow[k];
    if (cs.f_grad) cs.f_grad(atom, atom[1], atom + 2, mo, fg);
    if (cs.g_grad) cs.g_grad(atom, atom[1], atom + 2, mo, gg);
    if (cs.f_hess) cs.f_hess(atom, atom[1], atom + 2, mo, fh);
    if (cs.g_hess) cs.g_hess(atom, atom[1], atom + 2, mo, gh);
    dp[0] = J[k * P + p];
    dp[1] = dx.field.Y(k, m, p);
    dp[2] = dx.field.Z(k, m, p)[0];
    double qf = 0.0, qg = 0.0;
    for (std::size_t a = 0; a < 3; ++a)
      for (std::size_t b = 0; b < 3; ++b) {
        qf += dp[a] * fh[a * 3 + b] * dp[b];
        qg += dp[a] * gh[a * 3 + b] * dp[b];
      }
    const double h = H[k * P + p];
    c.R = fg[0] * h + qf;
    c.lambda = fg[1];
    c.gamma[0] = fg[2];
    c.H[0] = gg[0] * h + qg;
    c.beta[0] = gg[1];
    c.delta[0] = gg[2];
  };
  return solve_linear_bdsde(spec, eng);
}

}  // namespace detail

// d2_xx (Y, Z) on both pilots and d_y d_mu (Y, Z)(y) along the x pilot.
// dx / dx_y are the first-order solutions on the x / y pilots.
inline SecondOrderSolution solve_second_order_bdsde(const CoefficientSet& cs, const ForwardCloud& fc,
                                                    const TangentCloud& tc, const SecondOrderCloud& so,
                                                    const BackwardSolution& sol, const LinearSolution& dx,
                                                    const LinearSolution& dx_y, const BackwardConfig& cfg) {
  require(cs.affine_g, ErrorCode::NonAffineG, "second-order backward derivatives need g affine in z");
  detail::check_measure(cs, fc);
  need(!cs.f || static_cast<bool>(cs.f_hess), "f_hess is required");
  need(static_cast<bool>(cs.g_hess), "g_hess is required");
  need(static_cast<bool>(cs.Phi_xx), "Phi_xx is required");
  need(cs.Phi_mu.rank == 0 || static_cast<bool>(cs.Phi_mu.kernel_grad), "Phi_mu kernel gradient is required");
  SecondOrderSolution out;
  out.dxx = detail::dxx_bdsde(cs, fc, sol, tc.pilot, tc.dx, so.dxx, dx, cfg);
  out.dxx_y = detail::dxx_bdsde(cs, fc, sol, tc.y_pilot, tc.dx_y, so.dxx_y, dx_y, cfg);

  const auto ch = detail::measure_channels(cs);
  detail::YPilotDerivs yd;
  yd.J = &tc.dx_y;
  yd.dY = &dx_y.field;
  yd.H = &so.dxx_y;
  yd.d2Y = &out.dxx_y.field;
  const auto ysrc = detail::y_sources(cs, ch, fc, sol, tc.y_pilot, yd);
  const std::size_t n = fc.n(), rphi = cs.Phi_mu.rank;
  const Ensemble& ye = fc.pilots[tc.y_pilot];
  const std::size_t P = ye.count;
  std::vector<double> phi_src(rphi, 0.0), kv(rphi), dk(rphi);
  for (std::size_t p = 0; p < P && rphi; ++p) {
    cs.Phi_mu.kernel(ye.at(n, p), fc.law_flow[n], kv.data());
    cs.Phi_mu.kernel_grad(ye.at(n, p), fc.law_flow[n], dk.data());
    const double j = tc.dx_y[n * P + p], h = so.dxx_y[n * P + p];
    for (std::size_t r = 0; r < rphi; ++r) phi_src[r] += dk[r] * j * j + kv[r] * h;
  }
  for (double& v : phi_src) v /= static_cast<double>(P);
  out.dydmu = detail::measure_stages(cs, fc, sol, tc.pilot, so.dydmu_law, so.dydmu, ysrc, phi_src, cfg);
  return out;
}

}  // namespace mfbdsde
