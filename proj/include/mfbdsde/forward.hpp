#pragma once

#include <cmath>
#include <cstddef>
#include <memory>
#include <vector>

#include "coefficients.hpp"
#include "error.hpp"
#include "measures.hpp"
#include "parallel.hpp"
#include "paths.hpp"
#include "scenarios.hpp"

namespace mfbdsde {

// One particle family on the grid. States are node-major: x[(k * count + i) * d + j].
struct Ensemble {
  Role stream = Role::law_w;
  std::size_t count = 0, d = 1, nodes = 0;
  std::vector<double> x;

  const double* at(std::size_t k, std::size_t i) const { return &x[(k * count + i) * d]; }
  double* at(std::size_t k, std::size_t i) { return &x[(k * count + i) * d]; }
  const double* node(std::size_t k) const { return &x[k * count * d]; }
};

struct PilotStart {
  Role stream = Role::pilot_w;
  std::vector<double> states;  // count x d

  static PilotStart at(const std::vector<double>& x, std::size_t count, Role stream) {
    PilotStart p;
    p.stream = stream;
    p.states.resize(count * x.size());
    for (std::size_t i = 0; i < count; ++i)
      for (std::size_t j = 0; j < x.size(); ++j) p.states[i * x.size() + j] = x[j];
    return p;
  }
};

struct ForwardCloud {
  TimeGrid grid;
  std::size_t d = 1;
  std::shared_ptr<const PathBundle> bundle;
  Ensemble law;
  std::vector<Ensemble> pilots;
  std::vector<LawMoments> law_flow;  // x-feature moments of the law particles per node

  std::size_t n() const { return grid.n(); }
  const double* dw(const Ensemble& e, std::size_t i, std::size_t k) const { return bundle->w_ptr(e.stream, i, k); }
  EmpiricalMeasure law_measure(std::size_t k) const {
    std::vector<double> pts(law.node(k), law.node(k) + law.count * d);
    return EmpiricalMeasure(std::move(pts), d);
  }
};

namespace detail {

inline void check_finite(const double* v, std::size_t n, const char* what) {
  for (std::size_t j = 0; j < n; ++j)
    require(std::isfinite(v[j]), ErrorCode::NonfiniteState, std::string(what) + " left the finite range");
}

inline std::size_t stream_capacity(const PathBundle& pb, Role r) {
  return r == Role::law_w ? pb.n_particles : pb.n_pilots;
}

// one Euler step X_{k+1} = X_k + b dt + sigma dW
inline void euler_step(const CoefficientSet& cs, const double* xk, const LawMoments& m, double dt, const double* dw,
                       double* out, double* bbuf, double* sbuf) {
  const std::size_t d = cs.d;
  cs.b(xk, m, bbuf);
  cs.sigma(xk, m, sbuf);
  for (std::size_t i = 0; i < d; ++i) {
    double v = xk[i] + bbuf[i] * dt;
    for (std::size_t j = 0; j < d; ++j) v += sbuf[i * d + j] * dw[j];
    out[i] = v;
  }
}

inline void run_pilots(const CoefficientSet& cs, const PathBundle& pb, const std::vector<LawMoments>& flow,
                       Ensemble& e) {
  const std::size_t n = pb.n(), d = cs.d;
  parallel_for(e.count, [&](std::size_t i) {
    std::vector<double> bb(d), sb(d * d);
    for (std::size_t k = 0; k < n; ++k) {
      euler_step(cs, e.at(k, i), flow[k], pb.grid.steps[k], pb.w_ptr(e.stream, i, k), e.at(k + 1, i), bb.data(),
                 sb.data());
      check_finite(e.at(k + 1, i), d, "pilot state");
    }
  });
}

}  // namespace detail

// Law particles first (explicit in the node-k empirical law), then pilots on the frozen flow.
inline ForwardCloud simulate(const CoefficientSet& cs, std::shared_ptr<const PathBundle> pb,
                             const std::vector<double>& law_init, const std::vector<PilotStart>& pilots) {
  require(cs.b && cs.sigma, ErrorCode::MissingDerivative, "b and sigma are required");
  require(pb->d == cs.d, ErrorCode::DimMismatch, "bundle and coefficient dimensions differ");
  const std::size_t d = cs.d, n = pb->n(), N = pb->n_particles;
  require(law_init.size() == N * d, ErrorCode::LengthMismatch, "law_init must hold n_particles x d values");
  ForwardCloud fc;
  fc.grid = pb->grid;
  fc.d = d;
  fc.bundle = pb;
  fc.law.stream = Role::law_w;
  fc.law.count = N;
  fc.law.d = d;
  fc.law.nodes = n + 1;
  fc.law.x.assign((n + 1) * N * d, 0.0);
  std::copy(law_init.begin(), law_init.end(), fc.law.x.begin());
  detail::check_finite(law_init.data(), law_init.size(), "initial law");
  fc.law_flow.resize(n + 1);
  for (std::size_t k = 0; k < n; ++k) {
    fc.law_flow[k] = cs.x_features.of(fc.law.node(k), N, d);
    const double dt = pb->grid.steps[k];
    parallel_for(N, [&](std::size_t i) {
      std::vector<double> bb(d), sb(d * d);
      detail::euler_step(cs, fc.law.at(k, i), fc.law_flow[k], dt, pb->w_ptr(Role::law_w, i, k), fc.law.at(k + 1, i),
                         bb.data(), sb.data());
      detail::check_finite(fc.law.at(k + 1, i), d, "law particle");
    });
  }
  fc.law_flow[n] = cs.x_features.of(fc.law.node(n), N, d);

  for (const auto& ps : pilots) {
    require(ps.states.size() % d == 0 && !ps.states.empty(), ErrorCode::LengthMismatch, "pilot starts must be count x d");
    Ensemble e;
    e.stream = ps.stream;
    e.count = ps.states.size() / d;
    e.d = d;
    e.nodes = n + 1;
    require(e.count <= detail::stream_capacity(*pb, ps.stream), ErrorCode::InvalidArgument,
            "more pilots than increments in the bundle");
    e.x.assign((n + 1) * e.count * d, 0.0);
    std::copy(ps.states.begin(), ps.states.end(), e.x.begin());
    detail::run_pilots(cs, *pb, fc.law_flow, e);
    fc.pilots.push_back(std::move(e));
  }
  return fc;
}

inline std::vector<double> draw_initial_law(const LawSampler& law, Seed seed, std::size_t N, std::size_t d) {
  std::vector<double> out(N * d);
  for (std::size_t i = 0; i < N; ++i)
    for (std::size_t j = 0; j < d; ++j) out[i * d + j] = law.draw(seed, i, j);
  return out;
}

// Pilot j uses the pilot stream for j = 0 and the independent auxiliary stream for j = 1.
inline ForwardCloud solve_split_sde(const CoefficientSet& cs, const ScenarioSpec& spec,
                                    std::shared_ptr<const PathBundle> pb,
                                    const std::vector<std::vector<double>>& pilot_starts) {
  require(pilot_starts.size() <= 2, ErrorCode::InvalidArgument, "at most two pilot families (x and y)");
  std::vector<PilotStart> ps;
  for (std::size_t j = 0; j < pilot_starts.size(); ++j) {
    require(pilot_starts[j].size() == cs.d, ErrorCode::DimMismatch, "pilot start has wrong dimension");
    ps.push_back(PilotStart::at(pilot_starts[j], pb->n_pilots, j == 0 ? Role::pilot_w : Role::aux_w));
  }
  return simulate(cs, pb, draw_initial_law(spec.law, pb->seed, pb->n_particles, cs.d), ps);
}

// Restart at node s from the node-s states with the remaining increments of the same bundle.
inline ForwardCloud restart(const CoefficientSet& cs, const ForwardCloud& fc, std::size_t s) {
  auto tail = std::make_shared<const PathBundle>(fc.bundle->tail(s));
  const std::size_t d = fc.d;
  std::vector<double> law0(fc.law.node(s), fc.law.node(s) + fc.law.count * d);
  std::vector<PilotStart> ps;
  for (const auto& e : fc.pilots) {
    PilotStart p;
    p.stream = e.stream;
    p.states.assign(e.node(s), e.node(s) + e.count * d);
    ps.push_back(std::move(p));
  }
  return simulate(cs, tail, law0, ps);
}

// ---------------------------------------------------------------------------
// tangent processes

struct TangentCloud {
  std::size_t pilot = 0, d = 1, count = 0, nodes = 0;
  std::vector<double> dx;  // [node][p][c*d + e] = d X^c / d x_e along pilot

  bool has_dmu = false;
  std::size_t y_pilot = 0, y_count = 0, law_count = 0;
  std::vector<double> dx_y;     // tangent of the y-pilot family
  std::vector<double> dmu;      // [node][p][c*d + e] = U^{x}(y) along pilot
  std::vector<double> dmu_law;  // [node][i][c*d + e] = U^{xi}(y) along law particles

  const double* J(std::size_t k, std::size_t p) const { return &dx[(k * count + p) * d * d]; }
  const double* Jy(std::size_t k, std::size_t p) const { return &dx_y[(k * y_count + p) * d * d]; }
  const double* U(std::size_t k, std::size_t p) const { return &dmu[(k * count + p) * d * d]; }
  const double* Ulaw(std::size_t k, std::size_t i) const { return &dmu_law[(k * law_count + i) * d * d]; }
};

namespace detail {

// M_{k+1} = M_k + (b_x M) dt + sum_l (sigma_x[., l, .] M) dW_l, plus optional inhomogeneous parts
struct LinearStepBuffers {
  std::vector<double> bx, sx, tmp;
  explicit LinearStepBuffers(std::size_t d) : bx(d * d), sx(d * d * d), tmp(d * d) {}
};

inline void linear_step(const CoefficientSet& cs, const double* x, const LawMoments& m, double dt, const double* dw,
                        const double* Mk, double* Mout, LinearStepBuffers& buf, const double* drift_src = nullptr,
                        const double* noise_src = nullptr) {
  const std::size_t d = cs.d;
  cs.b_x(x, m, buf.bx.data());
  cs.sigma_x(x, m, buf.sx.data());
  for (std::size_t c = 0; c < d; ++c)
    for (std::size_t e = 0; e < d; ++e) {
      double drift = 0.0;
      for (std::size_t q = 0; q < d; ++q) drift += buf.bx[c * d + q] * Mk[q * d + e];
      if (drift_src) drift += drift_src[c * d + e];
      double v = Mk[c * d + e] + drift * dt;
      for (std::size_t l = 0; l < d; ++l) {
        double s = 0.0;
        for (std::size_t q = 0; q < d; ++q) s += buf.sx[(c * d + l) * d + q] * Mk[q * d + e];
        if (noise_src) s += noise_src[(c * d + l) * d + e];
        v += s * dw[l];
      }
      Mout[c * d + e] = v;
    }
}

inline std::vector<double> tangent_of(const CoefficientSet& cs, const ForwardCloud& fc, const Ensemble& e) {
  need(static_cast<bool>(cs.b_x) && static_cast<bool>(cs.sigma_x), "b_x and sigma_x are required");
  const std::size_t d = fc.d, n = fc.n(), P = e.count;
  std::vector<double> J((n + 1) * P * d * d, 0.0);
  parallel_for(P, [&](std::size_t p) {
    LinearStepBuffers buf(d);
    double* J0 = &J[p * d * d];
    for (std::size_t c = 0; c < d; ++c) J0[c * d + c] = 1.0;
    for (std::size_t k = 0; k < n; ++k) {
      linear_step(cs, e.at(k, p), fc.law_flow[k], fc.grid.steps[k], fc.dw(e, p, k), &J[(k * P + p) * d * d],
                  &J[((k + 1) * P + p) * d * d], buf);
      check_finite(&J[((k + 1) * P + p) * d * d], d * d, "tangent");
    }
  });
  return J;
}

}  // namespace detail

inline TangentCloud solve_dx(const CoefficientSet& cs, const ForwardCloud& fc, std::size_t pilot = 0) {
  require(pilot < fc.pilots.size(), ErrorCode::InvalidArgument, "no such pilot family");
  TangentCloud tc;
  tc.pilot = pilot;
  tc.d = fc.d;
  tc.count = fc.pilots[pilot].count;
  tc.nodes = fc.n() + 1;
  tc.dx = detail::tangent_of(cs, fc, fc.pilots[pilot]);
  return tc;
}

namespace detail {

// adds weight * sum_p sum_c K_r[c](x_p) T_p[c][e] into out[r][e]
inline void kernel_average(const Separable& s, const double* xs, std::size_t count, std::size_t d,
                           const LawMoments& m, const double* tang, std::vector<double>& out, double weight) {
  std::vector<double> k(s.rank * d);
  for (std::size_t p = 0; p < count; ++p) {
    s.kernel(xs + p * d, m, k.data());
    const double* T = tang + p * d * d;
    for (std::size_t r = 0; r < s.rank; ++r)
      for (std::size_t e = 0; e < d; ++e) {
        double v = 0.0;
        for (std::size_t c = 0; c < d; ++c) v += k[r * d + c] * T[c * d + e];
        out[r * d + e] += weight * v;
      }
  }
}

// sources for the U recursion: drift_src[c][e] = sum_r A^b[c][r] Eb[r][e], noise_src[(c,l)][e] likewise
inline void mu_sources(const CoefficientSet& cs, const double* x, const LawMoments& m, const std::vector<double>& Eb,
                       const std::vector<double>& Es, double* dsrc, double* nsrc) {
  const std::size_t d = cs.d;
  std::fill(dsrc, dsrc + d * d, 0.0);
  std::fill(nsrc, nsrc + d * d * d, 0.0);
  if (cs.b_mu.rank > 0) {
    std::vector<double> A(d * cs.b_mu.rank);
    cs.b_mu.own(x, m, A.data());
    for (std::size_t c = 0; c < d; ++c)
      for (std::size_t r = 0; r < cs.b_mu.rank; ++r)
        for (std::size_t e = 0; e < d; ++e) dsrc[c * d + e] += A[c * cs.b_mu.rank + r] * Eb[r * d + e];
  }
  if (cs.sigma_mu.rank > 0) {
    std::vector<double> A(d * d * cs.sigma_mu.rank);
    cs.sigma_mu.own(x, m, A.data());
    for (std::size_t cl = 0; cl < d * d; ++cl)
      for (std::size_t r = 0; r < cs.sigma_mu.rank; ++r)
        for (std::size_t e = 0; e < d; ++e) nsrc[cl * d + e] += A[cl * cs.sigma_mu.rank + r] * Es[r * d + e];
  }
}

}  // namespace detail

// Measure-derivative flow U(y). The y-pilot family supplies X^{t,y} and its tangent.
// Stage one solves the self-consistent U^{t,xi}(y) on the law particles, stage two runs the pilots.
inline TangentCloud solve_dmu(const CoefficientSet& cs, const ForwardCloud& fc, std::size_t pilot, std::size_t y_pilot) {
  need(cs.b_mu.supplied() && cs.sigma_mu.supplied(), "b_mu and sigma_mu are required");
  require(pilot < fc.pilots.size() && y_pilot < fc.pilots.size(), ErrorCode::InvalidArgument, "no such pilot family");
  TangentCloud tc = solve_dx(cs, fc, pilot);
  const std::size_t d = fc.d, n = fc.n(), N = fc.law.count;
  const Ensemble& ye = fc.pilots[y_pilot];
  const Ensemble& xe = fc.pilots[pilot];
  tc.has_dmu = true;
  tc.y_pilot = y_pilot;
  tc.y_count = ye.count;
  tc.law_count = N;
  tc.dx_y = detail::tangent_of(cs, fc, ye);
  tc.dmu.assign((n + 1) * xe.count * d * d, 0.0);
  tc.dmu_law.assign((n + 1) * N * d * d, 0.0);
  const std::size_t rb = cs.b_mu.rank, rs = cs.sigma_mu.rank;
  std::vector<std::vector<double>> Eb(n), Es(n);
  for (std::size_t k = 0; k < n; ++k) {
    const LawMoments& m = fc.law_flow[k];
    Eb[k].assign(rb * d, 0.0);
    Es[k].assign(rs * d, 0.0);
    const double wy = 1.0 / static_cast<double>(ye.count), wl = 1.0 / static_cast<double>(N);
    if (rb) {
      detail::kernel_average(cs.b_mu, ye.node(k), ye.count, d, m, tc.Jy(k, 0), Eb[k], wy);
      detail::kernel_average(cs.b_mu, fc.law.node(k), N, d, m, tc.Ulaw(k, 0), Eb[k], wl);
    }
    if (rs) {
      detail::kernel_average(cs.sigma_mu, ye.node(k), ye.count, d, m, tc.Jy(k, 0), Es[k], wy);
      detail::kernel_average(cs.sigma_mu, fc.law.node(k), N, d, m, tc.Ulaw(k, 0), Es[k], wl);
    }
    parallel_for(N, [&](std::size_t i) {
      detail::LinearStepBuffers buf(d);
      std::vector<double> ds(d * d), ns(d * d * d);
      const double* x = fc.law.at(k, i);
      detail::mu_sources(cs, x, m, Eb[k], Es[k], ds.data(), ns.data());
      double* out = &tc.dmu_law[((k + 1) * N + i) * d * d];
      detail::linear_step(cs, x, m, fc.grid.steps[k], fc.dw(fc.law, i, k), tc.Ulaw(k, i), out, buf, ds.data(),
                          ns.data());
      detail::check_finite(out, d * d, "measure tangent");
    });
  }
  parallel_for(xe.count, [&](std::size_t p) {
    detail::LinearStepBuffers buf(d);
    std::vector<double> ds(d * d), ns(d * d * d);
    for (std::size_t k = 0; k < n; ++k) {
      const double* x = xe.at(k, p);
      detail::mu_sources(cs, x, fc.law_flow[k], Eb[k], Es[k], ds.data(), ns.data());
      double* out = &tc.dmu[((k + 1) * xe.count + p) * d * d];
      detail::linear_step(cs, x, fc.law_flow[k], fc.grid.steps[k], fc.dw(xe, p, k), tc.U(k, p), out, buf, ds.data(),
                          ns.data());
      detail::check_finite(out, d * d, "measure tangent");
    }
  });
  return tc;
}

// ---------------------------------------------------------------------------
// second order (d = 1): formal differentiation of the discrete first-order schemes

struct SecondOrderCloud {
  std::size_t count = 0, y_count = 0, law_count = 0, nodes = 0;
  std::vector<double> dxx;        // [node][p] along the x pilot
  std::vector<double> dxx_y;      // [node][p] along the y pilot
  std::vector<double> dydmu;      // [node][p] d/dy U^{x}(y)
  std::vector<double> dydmu_law;  // [node][i] d/dy U^{xi}(y)
};

namespace detail {

inline std::vector<double> second_tangent(const CoefficientSet& cs, const ForwardCloud& fc, const Ensemble& e,
                                          const std::vector<double>& J) {
  need(static_cast<bool>(cs.b_xx) && static_cast<bool>(cs.sigma_xx), "b_xx and sigma_xx are required");
  const std::size_t n = fc.n(), P = e.count;
  std::vector<double> H((n + 1) * P, 0.0);
  parallel_for(P, [&](std::size_t p) {
    double bx, sx, bxx, sxx;
    for (std::size_t k = 0; k < n; ++k) {
      const double* x = e.at(k, p);
      const LawMoments& m = fc.law_flow[k];
      cs.b_x(x, m, &bx);
      cs.sigma_x(x, m, &sx);
      cs.b_xx(x, m, &bxx);
      cs.sigma_xx(x, m, &sxx);
      const double j = J[k * P + p], h = H[k * P + p];
      const double v = h + (bxx * j * j + bx * h) * fc.grid.steps[k] + (sxx * j * j + sx * h) * fc.dw(e, p, k)[0];
      require(std::isfinite(v), ErrorCode::NonfiniteState, "second tangent left the finite range");
      H[(k + 1) * P + p] = v;
    }
  });
  return H;
}

}  // namespace detail

inline SecondOrderCloud solve_second_order(const CoefficientSet& cs, const ForwardCloud& fc, const TangentCloud& tc) {
  require(fc.d == 1, ErrorCode::Unsupported, "second-order solvers are implemented for d = 1");
  require(tc.has_dmu, ErrorCode::MissingDerivativeField, "second order needs the measure tangent");
  need(cs.b_mu.rank == 0 || static_cast<bool>(cs.b_mu.kernel_grad), "b_mu kernel gradient is required");
  need(cs.sigma_mu.rank == 0 || static_cast<bool>(cs.sigma_mu.kernel_grad), "sigma_mu kernel gradient is required");
  const std::size_t n = fc.n(), N = fc.law.count;
  const Ensemble& xe = fc.pilots[tc.pilot];
  const Ensemble& ye = fc.pilots[tc.y_pilot];
  SecondOrderCloud so;
  so.count = xe.count;
  so.y_count = ye.count;
  so.law_count = N;
  so.nodes = n + 1;
  so.dxx = detail::second_tangent(cs, fc, xe, tc.dx);
  so.dxx_y = detail::second_tangent(cs, fc, ye, tc.dx_y);
  so.dydmu.assign((n + 1) * xe.count, 0.0);
  so.dydmu_law.assign((n + 1) * N, 0.0);
  const std::size_t rb = cs.b_mu.rank, rs = cs.sigma_mu.rank;
  std::vector<std::vector<double>> Eb(n), Es(n);
  // d/dy of the hat averages: mean_p [K'(X^y) J^y^2 + K(X^y) H^y] + mean_i K(X^xi) V^xi
  auto average = [&](const Separable& s, std::size_t k, std::vector<double>& out) {
    const LawMoments& m = fc.law_flow[k];
    out.assign(s.rank, 0.0);
    std::vector<double> kv(s.rank), dk(s.rank), acc(s.rank, 0.0);
    for (std::size_t p = 0; p < ye.count; ++p) {
      const double* x = ye.at(k, p);
      s.kernel(x, m, kv.data());
      s.kernel_grad(x, m, dk.data());
      const double j = tc.dx_y[k * ye.count + p], h = so.dxx_y[k * ye.count + p];
      for (std::size_t r = 0; r < s.rank; ++r) acc[r] += dk[r] * j * j + kv[r] * h;
    }
    for (std::size_t r = 0; r < s.rank; ++r) out[r] = acc[r] / static_cast<double>(ye.count);
    std::fill(acc.begin(), acc.end(), 0.0);
    for (std::size_t i = 0; i < N; ++i) {
      s.kernel(fc.law.at(k, i), m, kv.data());
      for (std::size_t r = 0; r < s.rank; ++r) acc[r] += kv[r] * so.dydmu_law[k * N + i];
    }
    for (std::size_t r = 0; r < s.rank; ++r) out[r] += acc[r] / static_cast<double>(N);
  };
  auto step = [&](const double* x, std::size_t k, double v, double dw) {
    const LawMoments& m = fc.law_flow[k];
    double bx, sx;
    cs.b_x(x, m, &bx);
    cs.sigma_x(x, m, &sx);
    double drift = bx * v, noise = sx * v;
    if (rb) {
      std::vector<double> A(rb);
      cs.b_mu.own(x, m, A.data());
      for (std::size_t r = 0; r < rb; ++r) drift += A[r] * Eb[k][r];
    }
    if (rs) {
      std::vector<double> A(rs);
      cs.sigma_mu.own(x, m, A.data());
      for (std::size_t r = 0; r < rs; ++r) noise += A[r] * Es[k][r];
    }
    const double out = v + drift * fc.grid.steps[k] + noise * dw;
    require(std::isfinite(out), ErrorCode::NonfiniteState, "second measure tangent left the finite range");
    return out;
  };
  for (std::size_t k = 0; k < n; ++k) {
    if (rb) average(cs.b_mu, k, Eb[k]);
    if (rs) average(cs.sigma_mu, k, Es[k]);
    parallel_for(N, [&](std::size_t i) {
      so.dydmu_law[(k + 1) * N + i] = step(fc.law.at(k, i), k, so.dydmu_law[k * N + i], fc.dw(fc.law, i, k)[0]);
    });
  }
  parallel_for(xe.count, [&](std::size_t p) {
    for (std::size_t k = 0; k < n; ++k)
      so.dydmu[(k + 1) * xe.count + p] = step(xe.at(k, p), k, so.dydmu[k * xe.count + p], fc.dw(xe, p, k)[0]);
  });
  return so;
}

// ---------------------------------------------------------------------------
// Malliavin derivative of the pilot, D_theta X

struct MalliavinForwardCloud {
  std::size_t theta = 0, pilot = 0, d = 1, count = 0, nodes = 0;
  std::vector<double> D;  // [node][p][c*d + e]; zero before theta
  const double* at(std::size_t k, std::size_t p) const { return &D[(k * count + p) * d * d]; }
};

inline MalliavinForwardCloud solve_malliavin_forward(const CoefficientSet& cs, const ForwardCloud& fc,
                                                     std::size_t theta_node, std::size_t pilot = 0) {
  require(theta_node <= fc.n(), ErrorCode::ThetaOffGrid, "theta node beyond the grid");
  require(pilot < fc.pilots.size(), ErrorCode::InvalidArgument, "no such pilot family");
  need(static_cast<bool>(cs.b_x) && static_cast<bool>(cs.sigma_x), "b_x and sigma_x are required");
  const Ensemble& e = fc.pilots[pilot];
  const std::size_t d = fc.d, n = fc.n(), P = e.count;
  MalliavinForwardCloud mc;
  mc.theta = theta_node;
  mc.pilot = pilot;
  mc.d = d;
  mc.count = P;
  mc.nodes = n + 1;
  mc.D.assign((n + 1) * P * d * d, 0.0);
  parallel_for(P, [&](std::size_t p) {
    detail::LinearStepBuffers buf(d);
    cs.sigma(e.at(theta_node, p), fc.law_flow[theta_node], &mc.D[(theta_node * P + p) * d * d]);
    for (std::size_t k = theta_node; k < n; ++k) {
      detail::linear_step(cs, e.at(k, p), fc.law_flow[k], fc.grid.steps[k], fc.dw(e, p, k), &mc.D[(k * P + p) * d * d],
                          &mc.D[((k + 1) * P + p) * d * d], buf);
      detail::check_finite(&mc.D[((k + 1) * P + p) * d * d], d * d, "Malliavin derivative");
    }
  });
  return mc;
}

inline MalliavinForwardCloud solve_malliavin_forward_at(const CoefficientSet& cs, const ForwardCloud& fc, double theta,
                                                        std::size_t pilot = 0) {
  const std::size_t k = fc.grid.find_node(theta);
  require(k != TimeGrid::npos, ErrorCode::ThetaOffGrid, "theta is not a grid node");
  return solve_malliavin_forward(cs, fc, k, pilot);
}

}  // namespace mfbdsde
