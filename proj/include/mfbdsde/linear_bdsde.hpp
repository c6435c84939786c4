#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <functional>
#include <memory>
#include <vector>

#include "error.hpp"
#include "forward.hpp"
#include "parallel.hpp"
#include "paths.hpp"
#include "regression.hpp"

namespace mfbdsde {

// Regression population: the particles whose states span the basis at each node.
struct Population {
  std::size_t S = 0, d = 1, q = 0, nodes = 0;
  std::vector<double> states;    // [node][S][d]
  std::vector<double> tangents;  // [node][S][q]
  std::vector<double> dw;        // [step][S][d]
  TimeGrid grid;

  const double* X(std::size_t k, std::size_t s) const { return &states[(k * S + s) * d]; }
};

using TangentFn = std::function<void(std::size_t k, std::size_t s, double* out)>;

inline Population make_population(const ForwardCloud& fc, const Ensemble& e, std::size_t q = 0,
                                  const TangentFn& tangent = {}) {
  Population pop;
  pop.S = e.count;
  pop.d = fc.d;
  pop.q = q;
  pop.nodes = fc.n() + 1;
  pop.grid = fc.grid;
  pop.states = e.x;
  const std::size_t n = fc.n(), S = e.count, d = fc.d;
  pop.dw.resize(n * S * d);
  for (std::size_t k = 0; k < n; ++k)
    for (std::size_t s = 0; s < S; ++s) {
      const double* w = fc.dw(e, s, k);
      std::copy(w, w + d, &pop.dw[(k * S + s) * d]);
    }
  if (q > 0) {
    pop.tangents.resize(pop.nodes * S * q);
    for (std::size_t k = 0; k < pop.nodes; ++k)
      for (std::size_t s = 0; s < S; ++s) tangent(k, s, &pop.tangents[(k * S + s) * q]);
  }
  return pop;
}

// Y and Z on the grid for every (B-path, particle).
struct Field {
  std::size_t nodes = 0, M = 0, S = 0, d = 1;
  std::vector<double> y;  // [node][m][s]
  std::vector<double> z;  // [node][m][s][d]

  void init(std::size_t nodes_, std::size_t M_, std::size_t S_, std::size_t d_) {
    nodes = nodes_;
    M = M_;
    S = S_;
    d = d_;
    y.assign(nodes * M * S, 0.0);
    z.assign(nodes * M * S * d, 0.0);
  }
  double Y(std::size_t k, std::size_t m, std::size_t s) const { return y[(k * M + m) * S + s]; }
  const double* Z(std::size_t k, std::size_t m, std::size_t s) const { return &z[((k * M + m) * S + s) * d]; }
};

// sum_k dt_k sqrt(mean |dY|^2 + |dZ|^2) over nodes 0..n-1
inline double field_distance(const Field& a, const Field& b, const TimeGrid& grid, std::size_t start = 0) {
  const std::size_t per = a.M * a.S;
  double total = 0.0;
  for (std::size_t k = start; k + 1 < a.nodes; ++k) {
    double s = 0.0;
    for (std::size_t j = 0; j < per; ++j) {
      const double dy = a.y[k * per + j] - b.y[k * per + j];
      s += dy * dy;
      for (std::size_t c = 0; c < a.d; ++c) {
        const double dz = a.z[(k * per + j) * a.d + c] - b.z[(k * per + j) * a.d + c];
        s += dz * dz;
      }
    }
    total += grid.steps[k] * std::sqrt(s / static_cast<double>(per));
  }
  return total;
}

inline double rms_node(const Field& f, std::size_t k) {
  const std::size_t per = f.M * f.S;
  double s = 0.0;
  for (std::size_t j = 0; j < per; ++j) s += f.y[k * per + j] * f.y[k * per + j];
  return std::sqrt(s / static_cast<double>(per));
}

// Backward regression sweep shared by every BDSDE solver.
class BackwardEngine {
 public:
  BackwardEngine(Population pop_in, const PathBundle& pb, const RegressionConfig& cfg, std::size_t start_node = 0)
      : pop_(std::move(pop_in)), pb_(pb), start_(start_node) {
    const Population& pop = pop_;
    const std::size_t n = pop.nodes - 1;
    require(n >= 1, ErrorCode::ZeroSteps, "need at least one step");
    require(start_node < n, ErrorCode::ThetaOffGrid, "start node must be before T");
    proj_.resize(n);
    // node n-1 is always needed for the terminal Z
    for (std::size_t k = start_node; k < n; ++k)
      proj_[k] = std::make_unique<JointProjector>(pop.X(k, 0), pop.S, pop.d,
                                                  pop.q ? &pop.tangents[k * pop.S * pop.q] : nullptr, pop.q,
                                                  &pop.dw[k * pop.S * pop.d], pop.grid.steps[k], cfg);
  }

  std::size_t M() const { return pb_.n_bpaths; }
  const PathBundle& bundle() const { return pb_; }
  const Population& population() const { return pop_; }
  std::size_t start() const { return start_; }

  // target(k, m, s, y_{k+1}, z_{k+1}) for step k; terminal is [m][s]
  using Target = std::function<double(std::size_t k, std::size_t m, std::size_t s, double y1, const double* z1)>;

  // se[k]: error of Y at node k, se_z[k]: error of the node-k Z fit
  Field sweep(const std::vector<double>& terminal, const Target& target, std::vector<double>* se = nullptr,
              std::vector<double>* se_z = nullptr) const {
    const std::size_t n = pop_.nodes - 1, M = pb_.n_bpaths, S = pop_.S, d = pop_.d;
    require(terminal.size() == M * S, ErrorCode::LengthMismatch, "terminal values must be M x S");
    Field f;
    f.init(pop_.nodes, M, S, d);
    std::copy(terminal.begin(), terminal.end(), f.y.begin() + static_cast<std::ptrdiff_t>(n * M * S));
    for (double v : terminal) require(std::isfinite(v), ErrorCode::NonfiniteState, "terminal value is not finite");
    if (se) se->assign(pop_.nodes, 0.0);
    if (se_z) se_z->assign(pop_.nodes, 0.0);
    std::vector<double> scratch(M * S);
    // terminal Z from the last increment
    proj_[n - 1]->fit(&f.y[n * M * S], M, scratch.data(), &f.z[n * M * S * d]);
    if (se_z) (*se_z)[n] = proj_[n - 1]->last_se_z();
    std::vector<double> tg(M * S);
    double bias = 0.0, samp2 = 0.0;
    for (std::size_t k = n; k-- > start_;) {
      parallel_for(M, [&](std::size_t m) {
        for (std::size_t s = 0; s < S; ++s) tg[m * S + s] = target(k, m, s, f.Y(k + 1, m, s), f.Z(k + 1, m, s));
      });
      for (double v : tg) require(std::isfinite(v), ErrorCode::NonfiniteState, "regression target is not finite");
      proj_[k]->fit(tg.data(), M, &f.y[k * M * S], &f.z[k * M * S * d]);
      // Y at node k carries the projection errors of every later node: biases add, sampling parts in quadrature
      bias += proj_[k]->last_bias();
      samp2 += proj_[k]->last_sampling() * proj_[k]->last_sampling();
      if (se) (*se)[k] = std::sqrt(bias * bias + samp2);
      if (se_z) (*se_z)[k] = proj_[k]->last_se_z();
    }
    return f;
  }

 private:
  Population pop_;
  const PathBundle& pb_;
  std::size_t start_;
  mutable std::vector<std::unique_ptr<JointProjector>> proj_;
};

// ---------------------------------------------------------------------------
// linear mean-field BDSDE
//   Y_k = E_k[ Y + (R + lam Y + gam.Z + sum_c a_c E_c) dt + sum_j (H_j + beta_j Y + delta_j.Z + sum_c b_cj E_c) dB_j ]
// with everything evaluated at node k+1 and E_c = offset_c + mean over (m, s) of wy_c Y + wz_c.Z.

struct LinearCoeffs {
  double R = 0.0, lambda = 0.0;
  std::vector<double> gamma, H, beta, delta, a, b;  // d, l, l, l*d, channels, channels*l
  void init(std::size_t d, std::size_t l, std::size_t nc) {
    R = lambda = 0.0;
    gamma.assign(d, 0.0);
    H.assign(l, 0.0);
    beta.assign(l, 0.0);
    delta.assign(l * d, 0.0);
    a.assign(nc, 0.0);
    b.assign(nc * l, 0.0);
  }
};

struct LinearBdsdeSpec {
  std::size_t l = 1, channels = 0;
  std::vector<double> terminal;  // [m][s]
  std::function<void(std::size_t k, std::size_t m, std::size_t s, LinearCoeffs& c)> drivers;
  std::function<void(std::size_t k, std::size_t m, std::size_t s, double* wy, double* wz)> hat_weights;
  std::function<void(std::size_t k, double* offset)> hat_offset;
  std::size_t start_node = 0;
  double tol = 1e-3;
  std::size_t max_iter = 20;
};

struct LinearSolution {
  Field field;
  std::vector<double> residuals;
  std::vector<double> se, se_z;
  std::vector<double> hat;  // [node][channel] final averages
  std::size_t iterations = 0;
  bool converged = true;
};

namespace detail {

inline void check_divergence(const std::vector<double>& res) {
  const std::size_t r = res.size();
  if (r >= 4 && res[r - 1] > res[r - 2] && res[r - 2] > res[r - 3] && res[r - 3] > res[r - 4])
    throw Error(ErrorCode::PicardDivergence, "Picard residual increased three times in a row");
}

}  // namespace detail

inline std::vector<double> hat_averages(const LinearBdsdeSpec& spec, const Field& f, std::size_t start) {
  const std::size_t nc = spec.channels, M = f.M, S = f.S, d = f.d;
  std::vector<double> E(f.nodes * nc, 0.0);
  if (nc == 0) return E;
  for (std::size_t k = start; k < f.nodes; ++k) {
    std::vector<double> part(M * nc, 0.0);
    parallel_for(M, [&](std::size_t m) {
      std::vector<double> wy(nc), wz(nc * d);
      for (std::size_t s = 0; s < S; ++s) {
        spec.hat_weights(k, m, s, wy.data(), wz.data());
        const double y = f.Y(k, m, s);
        const double* z = f.Z(k, m, s);
        for (std::size_t c = 0; c < nc; ++c) {
          double v = wy[c] * y;
          for (std::size_t j = 0; j < d; ++j) v += wz[c * d + j] * z[j];
          part[m * nc + c] += v;
        }
      }
    });
    std::vector<double> off(nc, 0.0);
    if (spec.hat_offset) spec.hat_offset(k, off.data());
    for (std::size_t c = 0; c < nc; ++c) {
      double s = 0.0;
      for (std::size_t m = 0; m < M; ++m) s += part[m * nc + c];
      E[k * nc + c] = off[c] + s / static_cast<double>(M * S);
    }
  }
  return E;
}

inline LinearSolution solve_linear_bdsde(const LinearBdsdeSpec& spec, const BackwardEngine& eng) {
  const Population& pop = eng.population();
  const std::size_t d = pop.d, l = spec.l, nc = spec.channels, n = pop.nodes - 1;
  require(static_cast<bool>(spec.drivers), ErrorCode::InvalidArgument, "linear BDSDE needs driver evaluators");
  require(nc == 0 || static_cast<bool>(spec.hat_weights), ErrorCode::InvalidArgument, "channels need hat weights");
  require(spec.start_node == eng.start(), ErrorCode::InvalidArgument, "engine and spec start nodes differ");
  require(l == eng.bundle().l, ErrorCode::DimMismatch, "spec and bundle disagree on l");
  LinearSolution sol;
  std::vector<double> E(pop.nodes * nc, 0.0);
  if (nc > 0 && spec.hat_offset)
    for (std::size_t k = spec.start_node; k <= n; ++k) spec.hat_offset(k, &E[k * nc]);
  const auto& grid = pop.grid;
  const PathBundle& pb = eng.bundle();
  auto target = [&](std::size_t k, std::size_t m, std::size_t s, double y1, const double* z1) {
    thread_local LinearCoeffs c;
    c.init(d, l, nc);
    spec.drivers(k + 1, m, s, c);
    double drift = c.R + c.lambda * y1;
    for (std::size_t j = 0; j < d; ++j) drift += c.gamma[j] * z1[j];
    for (std::size_t ch = 0; ch < nc; ++ch) drift += c.a[ch] * E[(k + 1) * nc + ch];
    double v = y1 + drift * grid.steps[k];
    for (std::size_t j = 0; j < l; ++j) {
      double h = c.H[j] + c.beta[j] * y1;
      for (std::size_t q = 0; q < d; ++q) h += c.delta[j * d + q] * z1[q];
      for (std::size_t ch = 0; ch < nc; ++ch) h += c.b[ch * l + j] * E[(k + 1) * nc + ch];
      v += h * pb.b(m, k, j);
    }
    return v;
  };
  for (std::size_t it = 1; it <= spec.max_iter; ++it) {
    Field f = eng.sweep(spec.terminal, target, &sol.se, &sol.se_z);
    sol.iterations = it;
    if (nc == 0) {
      sol.field = std::move(f);
      sol.converged = true;
      return sol;
    }
    const double sc = std::max(1.0, rms_node(f, spec.start_node));
    if (it > 1) {
      sol.residuals.push_back(field_distance(f, sol.field, grid, spec.start_node));
      detail::check_divergence(sol.residuals);
    }
    sol.field = std::move(f);
    E = hat_averages(spec, sol.field, spec.start_node);
    if (it > 1 && sol.residuals.back() <= spec.tol * sc) {
      sol.converged = true;
      sol.hat = E;
      return sol;
    }
    sol.converged = false;
  }
  sol.hat = E;
  return sol;
}

}  // namespace mfbdsde
