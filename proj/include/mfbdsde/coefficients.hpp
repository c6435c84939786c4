#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <functional>
#include <string>
#include <vector>

#include "error.hpp"
#include "measures.hpp"
#include "rng.hpp"

namespace mfbdsde {

// Coefficients see a law only through the means of declared per-atom features.
struct LawMoments {
  std::vector<double> m;
  double operator[](std::size_t r) const { return m[r]; }
};

struct Features {
  std::size_t count = 0;
  std::function<void(const double* atom, double* out)> eval;

  LawMoments of(const double* atoms, std::size_t n, std::size_t dim) const {
    LawMoments lm;
    lm.m.assign(count, 0.0);
    if (count == 0 || n == 0) return lm;
    std::vector<double> buf(count);
    for (std::size_t i = 0; i < n; ++i) {
      eval(atoms + i * dim, buf.data());
      for (std::size_t r = 0; r < count; ++r) lm.m[r] += buf[r];
    }
    for (double& v : lm.m) v /= static_cast<double>(n);
    return lm;
  }
  LawMoments of(const EmpiricalMeasure& mu) const { return of(mu.points.data(), mu.n, mu.dim); }
};

// Streaming accumulator for pooled laws; add() order fixes the result.
struct MomentAccumulator {
  const Features* f = nullptr;
  std::vector<double> sum, buf;
  std::size_t n = 0;
  explicit MomentAccumulator(const Features& feats) : f(&feats), sum(feats.count, 0.0), buf(feats.count) {}
  void add(const double* atom) {
    if (f->count == 0) {
      ++n;
      return;
    }
    f->eval(atom, buf.data());
    for (std::size_t r = 0; r < f->count; ++r) sum[r] += buf[r];
    ++n;
  }
  void merge(const MomentAccumulator& o) {
    for (std::size_t r = 0; r < sum.size(); ++r) sum[r] += o.sum[r];
    n += o.n;
  }
  LawMoments result() const {
    LawMoments lm;
    lm.m = sum;
    if (n > 0)
      for (double& v : lm.m) v /= static_cast<double>(n);
    return lm;
  }
};

// Lions derivative in separable form:
//   d_mu phi(own, mu)(atom)[o][c] = sum_r A[o][r](own, mu) * K[r][c](atom, mu)
struct Separable {
  std::size_t rank = 0, out_dim = 1, atom_dim = 1;
  std::function<void(const double* own, const LawMoments&, double* a)> own;      // a[o*rank + r]
  std::function<void(const double* atom, const LawMoments&, double* k)> kernel;  // k[r*atom_dim + c]
  // dk[(r*atom_dim + c)*atom_dim + e] = d K[r][c] / d atom_e
  std::function<void(const double* atom, const LawMoments&, double* dk)> kernel_grad;

  bool supplied() const { return static_cast<bool>(own); }

  static Separable zero(std::size_t out_dim, std::size_t atom_dim) {
    Separable s;
    s.rank = 0;
    s.out_dim = out_dim;
    s.atom_dim = atom_dim;
    s.own = [](const double*, const LawMoments&, double*) {};
    s.kernel = [](const double*, const LawMoments&, double*) {};
    s.kernel_grad = [](const double*, const LawMoments&, double*) {};
    return s;
  }

  void eval(const double* own_arg, const double* atom, const LawMoments& law, double* out) const {
    std::fill(out, out + out_dim * atom_dim, 0.0);
    if (rank == 0) return;
    std::vector<double> a(out_dim * rank), k(rank * atom_dim);
    own(own_arg, law, a.data());
    kernel(atom, law, k.data());
    for (std::size_t o = 0; o < out_dim; ++o)
      for (std::size_t r = 0; r < rank; ++r)
        for (std::size_t c = 0; c < atom_dim; ++c) out[o * atom_dim + c] += a[o * rank + r] * k[r * atom_dim + c];
  }

  // out[(o*atom_dim + c)*atom_dim + e]
  void eval_grad(const double* own_arg, const double* atom, const LawMoments& law, double* out) const {
    std::fill(out, out + out_dim * atom_dim * atom_dim, 0.0);
    if (rank == 0) return;
    require(static_cast<bool>(kernel_grad), ErrorCode::MissingDerivative, "kernel gradient not supplied");
    std::vector<double> a(out_dim * rank), dk(rank * atom_dim * atom_dim);
    own(own_arg, law, a.data());
    kernel_grad(atom, law, dk.data());
    for (std::size_t o = 0; o < out_dim; ++o)
      for (std::size_t r = 0; r < rank; ++r)
        for (std::size_t q = 0; q < atom_dim * atom_dim; ++q)
          out[o * atom_dim * atom_dim + q] += a[o * rank + r] * dk[r * atom_dim * atom_dim + q];
  }
};

struct CoefficientSet {
  std::string name;
  std::size_t d = 1, l = 1;

  Features x_features;   // atoms x in R^d
  Features pi_features;  // atoms (x, y, z) in R^{2d+1}

  using XFn = std::function<void(const double* x, const LawMoments&, double* out)>;
  using PiFn = std::function<void(const double* x, double y, const double* z, const LawMoments&, double* out)>;

  XFn b;      // d
  XFn sigma;  // d*d, [i*d + j]: component i, noise j
  std::function<double(const double* x, double y, const double* z, const LawMoments&)> f;
  PiFn g;  // l
  bool affine_g = false;
  std::function<void(const double* x, double y, const LawMoments&, double* out)> g1;  // l
  std::function<void(const LawMoments&, double* out)> g2;                             // l*d
  std::function<void(const LawMoments&, double* out)> h;                              // l
  std::function<double(const double* x, const LawMoments&)> Phi;

  XFn b_x;      // [i*d + k]
  XFn sigma_x;  // [(i*d + j)*d + k]
  Separable b_mu, sigma_mu;
  XFn Phi_x;  // d
  Separable Phi_mu;
  PiFn f_grad;  // (x, y, z) -> 2d+1
  PiFn g_grad;  // l x (2d+1)
  Separable f_mu, g_mu, h_mu;

  XFn b_xx;      // [(i*d + k)*d + q]
  XFn sigma_xx;  // [((i*d + j)*d + k)*d + q]
  XFn Phi_xx;    // d*d
  PiFn f_hess;   // (2d+1)^2
  PiFn g_hess;   // l*(2d+1)^2

  std::size_t pi_dim() const { return 2 * d + 1; }

  void eval_g(const double* x, double y, const double* z, const LawMoments& pi, double* out) const {
    if (g) {
      g(x, y, z, pi, out);
      return;
    }
    require(affine_g && g1 && g2, ErrorCode::MissingDerivative, "g is not defined");
    g1(x, y, pi, out);
    std::vector<double> a(l * d);
    g2(pi, a.data());
    for (std::size_t i = 0; i < l; ++i)
      for (std::size_t j = 0; j < d; ++j) out[i] += a[i * d + j] * z[j];
  }

  // g + h
  void eval_gh(const double* x, double y, const double* z, const LawMoments& pi, double* out) const {
    eval_g(x, y, z, pi, out);
    if (h) {
      std::vector<double> hv(l);
      h(pi, hv.data());
      for (std::size_t i = 0; i < l; ++i) out[i] += hv[i];
    }
  }

  double eval_f(const double* x, double y, const double* z, const LawMoments& pi) const {
    return f ? f(x, y, z, pi) : 0.0;
  }
};

inline void need(bool ok, const char* what) { require(ok, ErrorCode::MissingDerivative, what); }

// ---------------------------------------------------------------------------
// assumption validation

struct AssumptionBudget {
  double C = 1.0;
  double alpha1 = 0.25;
  double alpha2 = 0.25;
  int p0 = 16;
};

// log of the (H4.2) constants; values overflow doubles quickly
inline double log_cstar(double p) {
  const double a = (-p - 2.0) * std::log(2.0) + p * std::log(3.0) + 3.0 * p * std::log(p);
  const double b = 0.5 * p * std::log(2.0);
  const double hi = std::max(a, b);
  return hi + std::log(std::exp(a - hi) + std::exp(b - hi));
}

inline double log_cprime(double p, double C) {
  const double q = p / (p - 1.0);
  const double a = std::log(2.0) + p * std::log(C) + (p - 1.0) * std::log(5.0);
  const double b = p * std::log(6.0 * p * p * p) + (0.5 * p - 1.0) * std::log(5.0);
  return p * std::log(q) + (p - 1.0) * std::log(3.0) + std::max(a, b);
}

inline double log_cbar(double p, double C) {
  const double q = p / (p - 1.0);
  return (p - 1.0) * std::log(2.0) + log_cstar(p) + std::log(std::pow(q, p) + 1.0) + log_cprime(p, C);
}

struct RatioEntry {
  std::string coefficient, argument;
  double max_ratio = 0.0;
  double bound = 0.0;
  bool pass = true;
};

struct H42Entry {
  double p = 0.0;
  double log10_lhs = 0.0;  // log10 of Cbar_p (alpha1+alpha2)^{p/2}
  bool pass = false;
};

struct ValidationReport {
  std::vector<RatioEntry> ratios;
  double g_joint_max = 0.0;  // max LHS/RHS of the anisotropic g condition
  bool g_joint_pass = true;
  bool affine_checked = false;
  double affine_max_error = 0.0;
  bool affine_pass = true;
  std::vector<H42Entry> h42;
  std::vector<std::pair<std::string, double>> max_abs;
  std::string disclaimer =
      "boundedness and Lipschitz constants are estimated on probe boxes only; global bounds are not verified";

  const RatioEntry* find(const std::string& coef, const std::string& arg) const {
    for (const auto& r : ratios)
      if (r.coefficient == coef && r.argument == arg) return &r;
    return nullptr;
  }
  bool lipschitz_pass() const {
    for (const auto& r : ratios)
      if (!r.pass) return false;
    return g_joint_pass;
  }
  bool pass() const { return lipschitz_pass() && affine_pass; }
};

namespace detail {

struct Prober {
  Seed seed;
  std::uint64_t counter = 0;
  double uni() { return uniform(seed, Role::probe, counter++, 0, 0); }
  double gauss() { return normal(seed, Role::probe, counter++, 1, 0); }
  double box(double R) { return R * (2.0 * uni() - 1.0); }
  double small(double R) {
    const double s = R * std::pow(10.0, -3.0 * uni());
    return uni() < 0.5 ? -s : s;
  }
};

inline double norm_diff(const std::vector<double>& a, const std::vector<double>& b) {
  double s = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) s += (a[i] - b[i]) * (a[i] - b[i]);
  return std::sqrt(s);
}

}  // namespace detail

inline ValidationReport validate_assumptions(const CoefficientSet& cs, const AssumptionBudget& budget,
                                             std::size_t n_probes, Seed seed) {
  require(n_probes >= 2, ErrorCode::InvalidArgument, "need at least two probes");
  ValidationReport rep;
  detail::Prober pr{seed};
  const std::size_t d = cs.d, l = cs.l, pd = cs.pi_dim();
  const double R = 3.0;
  const std::size_t K = 6;

  auto rand_vec = [&](std::size_t n) {
    std::vector<double> v(n);
    for (auto& x : v) x = pr.box(R);
    return v;
  };
  auto perturb = [&](std::vector<double> v) {
    for (auto& x : v) x += pr.small(0.5);
    return v;
  };
  auto rand_law = [&](std::size_t dim) {
    std::vector<double> pts(K * dim);
    const auto c = rand_vec(dim);
    for (std::size_t i = 0; i < K; ++i)
      for (std::size_t j = 0; j < dim; ++j) pts[i * dim + j] = c[j] + pr.gauss();
    return EmpiricalMeasure(std::move(pts), dim);
  };
  auto perturb_law = [&](const EmpiricalMeasure& mu) {
    EmpiricalMeasure nu = mu;
    const double s = std::abs(pr.small(0.5));
    for (auto& x : nu.points) x += s * pr.gauss();
    return nu;
  };

  struct Acc {
    double ratio = 0.0, maxabs = 0.0;
  };
  std::vector<std::pair<std::string, Acc>> acc;
  auto slot = [&](const std::string& key) -> Acc& {
    for (auto& kv : acc)
      if (kv.first == key) return kv.second;
    acc.emplace_back(key, Acc{});
    return acc.back().second;
  };
  auto note = [&](const std::string& coef, const std::string& arg, double num, double den) {
    if (den <= 0.0) return;
    auto& a = slot(coef + "|" + arg);
    a.ratio = std::max(a.ratio, num / den);
  };
  auto note_abs = [&](const std::string& coef, const std::vector<double>& v) {
    auto& a = slot(coef + "|value");
    for (double x : v) a.maxabs = std::max(a.maxabs, std::abs(x));
  };

  std::vector<double> out1, out2;
  for (std::size_t p = 0; p < n_probes; ++p) {
    const auto x = rand_vec(d);
    const auto xp = perturb(x);
    const double y = pr.box(R), yp = y + pr.small(0.5);
    const auto z = rand_vec(d);
    const auto zp = perturb(z);
    const auto lawx = rand_law(d), lawxp = perturb_law(lawx);
    const auto lawp = rand_law(pd), lawpp = perturb_law(lawp);
    const auto mx = cs.x_features.of(lawx), mxp = cs.x_features.of(lawxp);
    const auto mp = cs.pi_features.of(lawp), mpp = cs.pi_features.of(lawpp);
    const double wx = w2(lawx, lawxp), wp = w2(lawp, lawpp);
    const double dx = detail::norm_diff(x, xp), dz = detail::norm_diff(z, zp), dy = std::abs(y - yp);

    if (cs.b) {
      out1.assign(d, 0.0);
      out2.assign(d, 0.0);
      cs.b(x.data(), mx, out1.data());
      cs.b(xp.data(), mx, out2.data());
      note("b", "x", detail::norm_diff(out1, out2), dx);
      note_abs("b", out1);
      cs.b(x.data(), mxp, out2.data());
      note("b", "mu", detail::norm_diff(out1, out2), wx);
    }
    if (cs.sigma) {
      out1.assign(d * d, 0.0);
      out2.assign(d * d, 0.0);
      cs.sigma(x.data(), mx, out1.data());
      cs.sigma(xp.data(), mx, out2.data());
      note("sigma", "x", detail::norm_diff(out1, out2), dx);
      note_abs("sigma", out1);
      cs.sigma(x.data(), mxp, out2.data());
      note("sigma", "mu", detail::norm_diff(out1, out2), wx);
    }
    if (cs.f) {
      const double f0 = cs.f(x.data(), y, z.data(), mp);
      note_abs("f", {f0});
      note("f", "x", std::abs(cs.f(xp.data(), y, z.data(), mp) - f0), dx);
      note("f", "y", std::abs(cs.f(x.data(), yp, z.data(), mp) - f0), dy);
      note("f", "z", std::abs(cs.f(x.data(), y, zp.data(), mp) - f0), dz);
      note("f", "mu", std::abs(cs.f(x.data(), y, z.data(), mpp) - f0), wp);
    }
    if (cs.g || (cs.affine_g && cs.g1 && cs.g2)) {
      out1.assign(l, 0.0);
      out2.assign(l, 0.0);
      cs.eval_g(x.data(), y, z.data(), mp, out1.data());
      note_abs("g", out1);
      cs.eval_g(xp.data(), y, z.data(), mp, out2.data());
      note("g", "x", detail::norm_diff(out1, out2), dx);
      cs.eval_g(x.data(), yp, z.data(), mp, out2.data());
      note("g", "y", detail::norm_diff(out1, out2), dy);
      cs.eval_g(x.data(), y, zp.data(), mp, out2.data());
      note("g", "z", detail::norm_diff(out1, out2), dz);
      const double wpw = w2_weighted(lawp, lawpp, d + 1, budget.C, budget.alpha2);
      cs.eval_g(x.data(), y, z.data(), mpp, out2.data());
      note("g", "mu", detail::norm_diff(out1, out2), wpw);
      // joint anisotropic condition
      cs.eval_g(xp.data(), yp, zp.data(), mpp, out2.data());
      const double lhs = std::pow(detail::norm_diff(out1, out2), 2);
      const double rhs = budget.C * (dx * dx + dy * dy) + budget.alpha1 * dz * dz + wpw * wpw;
      if (rhs > 0.0) rep.g_joint_max = std::max(rep.g_joint_max, lhs / rhs);
      if (cs.affine_g && cs.g && cs.g1 && cs.g2) {
        rep.affine_checked = true;
        std::vector<double> gv(l), g1v(l), g2v(l * d);
        cs.g(x.data(), y, z.data(), mp, gv.data());
        cs.g1(x.data(), y, mp, g1v.data());
        cs.g2(mp, g2v.data());
        for (std::size_t i = 0; i < l; ++i) {
          double s = g1v[i];
          for (std::size_t j = 0; j < d; ++j) s += g2v[i * d + j] * z[j];
          const double e = std::abs(gv[i] - s) / (1.0 + std::abs(gv[i]));
          rep.affine_max_error = std::max(rep.affine_max_error, e);
        }
      }
    }
    if (cs.h) {
      out1.assign(l, 0.0);
      out2.assign(l, 0.0);
      cs.h(mp, out1.data());
      cs.h(mpp, out2.data());
      note_abs("h", out1);
      note("h", "mu", detail::norm_diff(out1, out2), wp);
    }
    if (cs.Phi) {
      const double p0 = cs.Phi(x.data(), mx);
      note_abs("Phi", {p0});
      note("Phi", "x", std::abs(cs.Phi(xp.data(), mx) - p0), dx);
      note("Phi", "mu", std::abs(cs.Phi(x.data(), mxp) - p0), wx);
    }
  }

  for (const auto& [key, a] : acc) {
    const auto bar = key.find('|');
    const std::string coef = key.substr(0, bar), arg = key.substr(bar + 1);
    if (arg == "value") {
      rep.max_abs.emplace_back(coef, a.maxabs);
      continue;
    }
    RatioEntry e{coef, arg, a.ratio, budget.C, true};
    if (coef == "g") {
      if (arg == "x" || arg == "y") e.bound = std::sqrt(budget.C);
      if (arg == "z") e.bound = std::sqrt(budget.alpha1);
      if (arg == "mu") e.bound = 1.0;
    }
    e.pass = e.max_ratio <= e.bound * (1.0 + 1e-9);
    rep.ratios.push_back(e);
  }
  rep.g_joint_pass = rep.g_joint_max <= 1.0 + 1e-9;
  rep.affine_pass = !rep.affine_checked || rep.affine_max_error <= 1e-12;

  for (double p : {double(budget.p0), budget.p0 / 2.0, budget.p0 / 8.0}) {
    H42Entry e;
    e.p = p;
    const double s = budget.alpha1 + budget.alpha2;
    const double lg = log_cbar(p, budget.C) + 0.5 * p * std::log(s);
    e.log10_lhs = lg / std::log(10.0);
    e.pass = lg < 0.0;
    rep.h42.push_back(e);
  }
  return rep;
}

}  // namespace mfbdsde
