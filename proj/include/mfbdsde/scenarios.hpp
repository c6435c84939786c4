#pragma once

#include <cmath>
#include <cstdint>
#include <cstdio>
#include <fstream>
#include <functional>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include "coefficients.hpp"
#include "error.hpp"
#include "rng.hpp"

namespace mfbdsde {

inline std::string fmt17(double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

struct LawSampler {
  enum class Kind { gaussian, uniform, dirac };
  Kind kind = Kind::gaussian;
  double a = 0.0, b = 1.0;  // mean/sd, lo/hi, or (v, unused)

  static LawSampler gaussian(double mean, double sd) { return {Kind::gaussian, mean, sd}; }
  static LawSampler uniform(double lo, double hi) { return {Kind::uniform, lo, hi}; }
  static LawSampler dirac(double v) { return {Kind::dirac, v, 0.0}; }

  double draw(Seed s, std::uint64_t particle, std::uint64_t coord) const {
    switch (kind) {
      case Kind::gaussian: return a + b * normal(s, Role::xi, particle, 0, coord);
      case Kind::uniform: return a + (b - a) * mfbdsde::uniform(s, Role::xi, particle, 0, coord);
      case Kind::dirac: return a;
    }
    return a;
  }
  double mean() const { return kind == Kind::uniform ? 0.5 * (a + b) : a; }
  double variance() const {
    switch (kind) {
      case Kind::gaussian: return b * b;
      case Kind::uniform: return (b - a) * (b - a) / 12.0;
      case Kind::dirac: return 0.0;
    }
    return 0.0;
  }

  std::string str() const {
    switch (kind) {
      case Kind::gaussian: return "gaussian(" + fmt17(a) + ", " + fmt17(b) + ")";
      case Kind::uniform: return "uniform(" + fmt17(a) + ", " + fmt17(b) + ")";
      case Kind::dirac: return "dirac(" + fmt17(a) + ")";
    }
    return "";
  }

  static LawSampler parse(const std::string& text) {
    const auto open = text.find('('), close = text.rfind(')');
    require(open != std::string::npos && close != std::string::npos && close > open, ErrorCode::ConfigError,
            "law.sampler must look like name(args): " + text);
    std::string name = text.substr(0, open);
    name.erase(0, name.find_first_not_of(" \t"));
    name.erase(name.find_last_not_of(" \t") + 1);
    std::vector<double> args;
    std::stringstream ss(text.substr(open + 1, close - open - 1));
    std::string tok;
    while (std::getline(ss, tok, ',')) {
      try {
        args.push_back(std::stod(tok));
      } catch (...) {
        throw Error(ErrorCode::ConfigError, "bad sampler argument: " + tok);
      }
    }
    if (name == "gaussian") {
      require(args.size() == 2 && args[1] >= 0.0, ErrorCode::ConfigError, "gaussian(mean, sd)");
      return gaussian(args[0], args[1]);
    }
    if (name == "uniform") {
      require(args.size() == 2 && args[1] > args[0], ErrorCode::ConfigError, "uniform(a, b) with a < b");
      return uniform(args[0], args[1]);
    }
    if (name == "dirac") {
      require(args.size() == 1, ErrorCode::ConfigError, "dirac(v)");
      return dirac(args[0]);
    }
    throw Error(ErrorCode::ConfigError, "unknown sampler " + name);
  }
};

struct ScenarioSpec {
  std::string id = "custom";
  double t = 0.0, T = 1.0;
  std::size_t steps = 16;
  std::vector<double> x{1.0};
  LawSampler law = LawSampler::gaussian(0.0, 1.0);
  std::size_t particles = 1024;
  std::size_t bpaths = 16;
  std::size_t pilots = 0;  // 0: same as particles
  std::uint64_t seed = 1;
  double picard_tol = 1e-3;
  std::size_t picard_max_iter = 20;
  std::size_t degree = 3;
  double ridge = 1e-8;
  std::string coefficients = "null";

  std::size_t n_pilots() const { return pilots == 0 ? particles : pilots; }
  double dt() const { return (T - t) / static_cast<double>(steps); }
};

namespace detail {

inline std::string trim(std::string s) {
  const auto a = s.find_first_not_of(" \t\r");
  if (a == std::string::npos) return "";
  const auto b = s.find_last_not_of(" \t\r");
  return s.substr(a, b - a + 1);
}

template <class T>
T parse_number(const std::string& key, const std::string& v) {
  try {
    std::size_t pos = 0;
    if constexpr (std::is_same_v<T, double>) {
      const double r = std::stod(v, &pos);
      if (pos == v.size() && std::isfinite(r)) return r;
    } else {
      if (!v.empty() && v[0] == '-') throw 0;
      const unsigned long long r = std::stoull(v, &pos);
      if (pos == v.size()) return static_cast<T>(r);
    }
  } catch (...) {
  }
  throw Error(ErrorCode::ConfigError, "bad value for " + key + ": '" + v + "'");
}

}  // namespace detail

inline ScenarioSpec parse_scenario(const std::string& text) {
  std::map<std::string, std::string> kv;
  std::stringstream ss(text);
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(ss, line)) {
    ++lineno;
    const auto hash = line.find('#');
    if (hash != std::string::npos) line = line.substr(0, hash);
    line = detail::trim(line);
    if (line.empty()) continue;
    const auto eq = line.find('=');
    require(eq != std::string::npos, ErrorCode::ConfigError, "line " + std::to_string(lineno) + ": expected key = value");
    const auto key = detail::trim(line.substr(0, eq)), val = detail::trim(line.substr(eq + 1));
    require(!kv.count(key), ErrorCode::ConfigError, "duplicate key " + key);
    kv[key] = val;
  }
  static const char* required[] = {"scenario.id", "time.t", "time.T", "time.steps", "state.x", "law.sampler",
                                   "particles.inner", "particles.bpaths", "seed", "coefficients.name"};
  for (const char* k : required) require(kv.count(k) > 0, ErrorCode::ConfigError, std::string("missing key ") + k);
  static const char* optional[] = {"picard.tol", "picard.max_iter", "regression.degree", "regression.ridge",
                                   "particles.pilots"};
  for (const auto& [k, v] : kv) {
    bool known = false;
    for (const char* r : required) known |= (k == r);
    for (const char* o : optional) known |= (k == o);
    require(known, ErrorCode::ConfigError, "unknown key " + k);
  }

  ScenarioSpec s;
  s.id = kv["scenario.id"];
  require(!s.id.empty(), ErrorCode::ConfigError, "empty scenario.id");
  s.t = detail::parse_number<double>("time.t", kv["time.t"]);
  s.T = detail::parse_number<double>("time.T", kv["time.T"]);
  require(s.t < s.T, ErrorCode::ConfigError, "time.t must be below time.T");
  s.steps = detail::parse_number<std::size_t>("time.steps", kv["time.steps"]);
  require(s.steps > 0, ErrorCode::ConfigError, "time.steps must be positive");
  s.x.clear();
  {
    std::stringstream xs(kv["state.x"]);
    std::string tok;
    while (std::getline(xs, tok, ',')) s.x.push_back(detail::parse_number<double>("state.x", detail::trim(tok)));
    require(!s.x.empty(), ErrorCode::ConfigError, "state.x is empty");
  }
  s.law = LawSampler::parse(kv["law.sampler"]);
  s.particles = detail::parse_number<std::size_t>("particles.inner", kv["particles.inner"]);
  s.bpaths = detail::parse_number<std::size_t>("particles.bpaths", kv["particles.bpaths"]);
  require(s.particles > 0 && s.bpaths > 0, ErrorCode::ConfigError, "particle counts must be positive");
  s.seed = detail::parse_number<std::uint64_t>("seed", kv["seed"]);
  s.coefficients = kv["coefficients.name"];
  if (kv.count("picard.tol")) s.picard_tol = detail::parse_number<double>("picard.tol", kv["picard.tol"]);
  if (kv.count("picard.max_iter"))
    s.picard_max_iter = detail::parse_number<std::size_t>("picard.max_iter", kv["picard.max_iter"]);
  if (kv.count("regression.degree"))
    s.degree = detail::parse_number<std::size_t>("regression.degree", kv["regression.degree"]);
  if (kv.count("regression.ridge")) s.ridge = detail::parse_number<double>("regression.ridge", kv["regression.ridge"]);
  if (kv.count("particles.pilots"))
    s.pilots = detail::parse_number<std::size_t>("particles.pilots", kv["particles.pilots"]);
  require(s.picard_tol > 0.0 && s.picard_max_iter > 0, ErrorCode::ConfigError, "picard settings must be positive");
  return s;
}

inline std::string serialize_scenario(const ScenarioSpec& s) {
  std::ostringstream o;
  o << "scenario.id = " << s.id << "\n";
  o << "time.t = " << fmt17(s.t) << "\n";
  o << "time.T = " << fmt17(s.T) << "\n";
  o << "time.steps = " << s.steps << "\n";
  o << "state.x = ";
  for (std::size_t i = 0; i < s.x.size(); ++i) o << (i ? ", " : "") << fmt17(s.x[i]);
  o << "\n";
  o << "law.sampler = " << s.law.str() << "\n";
  o << "particles.inner = " << s.particles << "\n";
  o << "particles.bpaths = " << s.bpaths << "\n";
  if (s.pilots) o << "particles.pilots = " << s.pilots << "\n";
  o << "seed = " << s.seed << "\n";
  o << "picard.tol = " << fmt17(s.picard_tol) << "\n";
  o << "picard.max_iter = " << s.picard_max_iter << "\n";
  o << "regression.degree = " << s.degree << "\n";
  o << "regression.ridge = " << fmt17(s.ridge) << "\n";
  o << "coefficients.name = " << s.coefficients << "\n";
  return o.str();
}

inline ScenarioSpec load_scenario(const std::string& path) {
  std::ifstream in(path);
  require(in.good(), ErrorCode::ConfigError, "cannot read scenario file " + path);
  std::stringstream buf;
  buf << in.rdbuf();
  return parse_scenario(buf.str());
}

// ---------------------------------------------------------------------------
// catalog

struct ClosedFormOracle {
  // (s, X_s, B_T - B_s) -> Y_s ; Z_s
  std::function<double(double s, const double* xs, double btail)> Y;
  std::function<double(double s, const double* xs, double btail)> Z;
  bool has() const { return static_cast<bool>(Y); }
};

namespace detail {

inline Separable const_kernel(std::size_t out_dim, std::size_t atom_dim, std::vector<double> k) {
  // A = 1 for every output, rank 1, constant kernel
  Separable s;
  s.rank = 1;
  s.out_dim = out_dim;
  s.atom_dim = atom_dim;
  s.own = [out_dim](const double*, const LawMoments&, double* a) {
    for (std::size_t o = 0; o < out_dim; ++o) a[o] = 1.0;
  };
  s.kernel = [k](const double*, const LawMoments&, double* out) { std::copy(k.begin(), k.end(), out); };
  s.kernel_grad = [atom_dim](const double*, const LawMoments&, double* dk) {
    std::fill(dk, dk + atom_dim * atom_dim, 0.0);
  };
  return s;
}

// common d = l = 1 skeleton: every first/second derivative present and zero
inline CoefficientSet scalar_zero(const std::string& name) {
  CoefficientSet c;
  c.name = name;
  c.d = c.l = 1;
  c.x_features = Features{0, [](const double*, double*) {}};
  c.pi_features = Features{0, [](const double*, double*) {}};
  auto zero1 = [](const double*, const LawMoments&, double* o) { o[0] = 0.0; };
  c.b = zero1;
  c.sigma = zero1;
  c.f = [](const double*, double, const double*, const LawMoments&) { return 0.0; };
  c.affine_g = true;
  c.g1 = [](const double*, double, const LawMoments&, double* o) { o[0] = 0.0; };
  c.g2 = [](const LawMoments&, double* o) { o[0] = 0.0; };
  c.g = [](const double*, double, const double*, const LawMoments&, double* o) { o[0] = 0.0; };
  c.h = [](const LawMoments&, double* o) { o[0] = 0.0; };
  c.Phi = [](const double* x, const LawMoments&) { return x[0]; };
  c.b_x = zero1;
  c.sigma_x = zero1;
  c.b_xx = zero1;
  c.sigma_xx = zero1;
  c.b_mu = Separable::zero(1, 1);
  c.sigma_mu = Separable::zero(1, 1);
  c.Phi_x = [](const double*, const LawMoments&, double* o) { o[0] = 1.0; };
  c.Phi_xx = zero1;
  c.Phi_mu = Separable::zero(1, 1);
  c.f_grad = [](const double*, double, const double*, const LawMoments&, double* o) { o[0] = o[1] = o[2] = 0.0; };
  c.g_grad = c.f_grad;
  c.f_hess = [](const double*, double, const double*, const LawMoments&, double* o) { std::fill(o, o + 9, 0.0); };
  c.g_hess = c.f_hess;
  c.f_mu = Separable::zero(1, 3);
  c.g_mu = Separable::zero(1, 3);
  c.h_mu = Separable::zero(1, 3);
  return c;
}

}  // namespace detail

namespace params {
inline constexpr double sigma0 = 0.5;  // S1, S2, S3, S5
inline constexpr double c = 0.5;
inline constexpr double g20 = 0.5;
inline constexpr double mu0 = 0.05, sigma1 = 0.3, r = 0.1, beta = 0.3;  // S4
inline constexpr double kappa = 0.8;                                    // S5
}  // namespace params

inline CoefficientSet make_coefficients(const std::string& name) {
  using detail::scalar_zero;
  if (name == "null") return scalar_zero(name);

  if (name == "constant-backward" || name == "mean-field-terminal" || name == "affine-g" ||
      name == "mean-field-driver") {
    auto c = scalar_zero(name);
    const double s0 = params::sigma0, cc = params::c;
    c.sigma = [s0](const double*, const LawMoments&, double* o) { o[0] = s0; };
    c.h = [cc](const LawMoments&, double* o) { o[0] = cc; };
    if (name == "mean-field-terminal") {
      c.x_features = Features{1, [](const double* a, double* o) { o[0] = a[0]; }};
      c.Phi = [](const double* x, const LawMoments& m) { return x[0] + m[0]; };
      c.Phi_mu = detail::const_kernel(1, 1, {1.0});
    }
    if (name == "affine-g") {
      const double g20 = params::g20;
      c.g2 = [g20](const LawMoments&, double* o) { o[0] = g20; };
      c.g = [g20](const double*, double, const double* z, const LawMoments&, double* o) { o[0] = g20 * z[0]; };
      c.g_grad = [g20](const double*, double, const double*, const LawMoments&, double* o) {
        o[0] = 0.0;
        o[1] = 0.0;
        o[2] = g20;
      };
    }
    if (name == "mean-field-driver") {
      const double k = params::kappa;
      c.pi_features = Features{1, [](const double* a, double* o) { o[0] = a[1]; }};
      c.f = [k](const double*, double, const double*, const LawMoments& m) { return -k * m[0]; };
      c.f_mu = detail::const_kernel(1, 3, {0.0, -k, 0.0});
    }
    return c;
  }

  if (name == "pardoux-peng") {
    auto c = scalar_zero(name);
    const double mu0 = params::mu0, s1 = params::sigma1, r = params::r, be = params::beta;
    c.b = [mu0](const double* x, const LawMoments&, double* o) { o[0] = mu0 * x[0]; };
    c.sigma = [s1](const double* x, const LawMoments&, double* o) { o[0] = s1 * x[0]; };
    c.b_x = [mu0](const double*, const LawMoments&, double* o) { o[0] = mu0; };
    c.sigma_x = [s1](const double*, const LawMoments&, double* o) { o[0] = s1; };
    c.f = [r](const double*, double y, const double*, const LawMoments&) { return -r * y; };
    c.f_grad = [r](const double*, double, const double*, const LawMoments&, double* o) {
      o[0] = 0.0;
      o[1] = -r;
      o[2] = 0.0;
    };
    c.g1 = [be](const double*, double y, const LawMoments&, double* o) { o[0] = be * y; };
    c.g = [be](const double*, double y, const double*, const LawMoments&, double* o) { o[0] = be * y; };
    c.g_grad = [be](const double*, double, const double*, const LawMoments&, double* o) {
      o[0] = 0.0;
      o[1] = be;
      o[2] = 0.0;
    };
    return c;
  }

  if (name == "rich-affine") {
    auto c = scalar_zero(name);
    const double a = 0.5, kb = 0.3, s0 = 0.4, ks = 0.1, r = 0.2, kf = 0.2, kh = 0.2;
    // X-law: [sin x, cos x]; Pi-law: [y, sin y, sin x]
    c.x_features = Features{2, [](const double* p, double* o) {
                              o[0] = std::sin(p[0]);
                              o[1] = std::cos(p[0]);
                            }};
    c.pi_features = Features{3, [](const double* p, double* o) {
                               o[0] = p[1];
                               o[1] = std::sin(p[1]);
                               o[2] = std::sin(p[0]);
                             }};
    c.b = [=](const double* x, const LawMoments& m, double* o) { o[0] = -a * x[0] + kb * m[0]; };
    c.b_x = [=](const double*, const LawMoments&, double* o) { o[0] = -a; };
    c.b_xx = [](const double*, const LawMoments&, double* o) { o[0] = 0.0; };
    {
      Separable s = detail::const_kernel(1, 1, {0.0});
      s.kernel = [=](const double* y, const LawMoments&, double* k) { k[0] = kb * std::cos(y[0]); };
      s.kernel_grad = [=](const double* y, const LawMoments&, double* dk) { dk[0] = -kb * std::sin(y[0]); };
      c.b_mu = s;
    }
    c.sigma = [=](const double* x, const LawMoments& m, double* o) {
      o[0] = s0 * (1.0 + 0.2 * std::cos(x[0])) + ks * m[1];
    };
    c.sigma_x = [=](const double* x, const LawMoments&, double* o) { o[0] = -0.2 * s0 * std::sin(x[0]); };
    c.sigma_xx = [=](const double* x, const LawMoments&, double* o) { o[0] = -0.2 * s0 * std::cos(x[0]); };
    {
      Separable s = detail::const_kernel(1, 1, {0.0});
      s.kernel = [=](const double* y, const LawMoments&, double* k) { k[0] = -ks * std::sin(y[0]); };
      s.kernel_grad = [=](const double* y, const LawMoments&, double* dk) { dk[0] = -ks * std::cos(y[0]); };
      c.sigma_mu = s;
    }
    c.f = [=](const double* x, double y, const double* z, const LawMoments& m) {
      return -r * y + 0.2 * std::sin(x[0]) + 0.1 * std::sin(z[0]) + kf * m[1];
    };
    c.f_grad = [=](const double* x, double, const double* z, const LawMoments&, double* o) {
      o[0] = 0.2 * std::cos(x[0]);
      o[1] = -r;
      o[2] = 0.1 * std::cos(z[0]);
    };
    c.f_hess = [=](const double* x, double, const double* z, const LawMoments&, double* o) {
      std::fill(o, o + 9, 0.0);
      o[0] = -0.2 * std::sin(x[0]);
      o[8] = -0.1 * std::sin(z[0]);
    };
    {
      Separable s = detail::const_kernel(1, 3, {0.0, 0.0, 0.0});
      s.kernel = [=](const double* p, const LawMoments&, double* k) {
        k[0] = 0.0;
        k[1] = kf * std::cos(p[1]);
        k[2] = 0.0;
      };
      s.kernel_grad = [=](const double* p, const LawMoments&, double* dk) {
        std::fill(dk, dk + 9, 0.0);
        dk[1 * 3 + 1] = -kf * std::sin(p[1]);
      };
      c.f_mu = s;
    }
    c.affine_g = true;
    c.g1 = [](const double* x, double y, const LawMoments&, double* o) { o[0] = 0.2 * std::cos(x[0]) + 0.1 * y; };
    c.g2 = [](const LawMoments& m, double* o) { o[0] = 0.3 + 0.1 * m[2]; };
    c.g = [](const double* x, double y, const double* z, const LawMoments& m, double* o) {
      o[0] = 0.2 * std::cos(x[0]) + 0.1 * y + (0.3 + 0.1 * m[2]) * z[0];
    };
    c.g_grad = [](const double* x, double, const double*, const LawMoments& m, double* o) {
      o[0] = -0.2 * std::sin(x[0]);
      o[1] = 0.1;
      o[2] = 0.3 + 0.1 * m[2];
    };
    c.g_hess = [](const double* x, double, const double*, const LawMoments&, double* o) {
      std::fill(o, o + 9, 0.0);
      o[0] = -0.2 * std::cos(x[0]);
    };
    {
      // d_mu [g2(mu) z](atom) = z * 0.1 cos(x')
      Separable s;
      s.rank = 1;
      s.out_dim = 1;
      s.atom_dim = 3;
      s.own = [](const double* own, const LawMoments&, double* A) { A[0] = own[2]; };
      s.kernel = [](const double* p, const LawMoments&, double* k) {
        k[0] = 0.1 * std::cos(p[0]);
        k[1] = 0.0;
        k[2] = 0.0;
      };
      s.kernel_grad = [](const double* p, const LawMoments&, double* dk) {
        std::fill(dk, dk + 9, 0.0);
        dk[0] = -0.1 * std::sin(p[0]);
      };
      c.g_mu = s;
    }
    c.h = [=](const LawMoments& m, double* o) { o[0] = 0.2 + kh * m[0]; };
    c.h_mu = detail::const_kernel(1, 3, {0.0, kh, 0.0});
    c.Phi = [](const double* x, const LawMoments& m) { return std::sin(x[0]) + 0.5 * x[0] + 0.3 * m[1]; };
    c.Phi_x = [](const double* x, const LawMoments&, double* o) { o[0] = std::cos(x[0]) + 0.5; };
    c.Phi_xx = [](const double* x, const LawMoments&, double* o) { o[0] = -std::sin(x[0]); };
    {
      Separable s = detail::const_kernel(1, 1, {0.0});
      s.kernel = [](const double* y, const LawMoments&, double* k) { k[0] = -0.3 * std::sin(y[0]); };
      s.kernel_grad = [](const double* y, const LawMoments&, double* dk) { dk[0] = -0.3 * std::cos(y[0]); };
      c.Phi_mu = s;
    }
    return c;
  }
  throw Error(ErrorCode::ConfigError, "unknown coefficient set " + name);
}

struct CatalogEntry {
  ScenarioSpec spec;
  ClosedFormOracle oracle;
  AssumptionBudget budget;
};

inline ClosedFormOracle make_oracle(const ScenarioSpec& s) {
  ClosedFormOracle o;
  const double T = s.T;
  const std::string& n = s.coefficients;
  if (n == "null") {
    o.Y = [](double, const double* x, double) { return x[0]; };
    o.Z = [](double, const double*, double) { return 0.0; };
  } else if (n == "constant-backward") {
    o.Y = [](double, const double* x, double bt) { return x[0] + params::c * bt; };
    o.Z = [](double, const double*, double) { return params::sigma0; };
  } else if (n == "mean-field-terminal") {
    // b = 0 keeps E[X_T^{t,xi}] = E[xi]
    const double m = s.law.mean();
    o.Y = [m](double, const double* x, double bt) { return x[0] + m + params::c * bt; };
    o.Z = [](double, const double*, double) { return params::sigma0; };
  } else if (n == "affine-g") {
    o.Y = [](double, const double* x, double bt) { return x[0] + (params::g20 * params::sigma0 + params::c) * bt; };
    o.Z = [](double, const double*, double) { return params::sigma0; };
  } else if (n == "pardoux-peng") {
    using namespace params;
    o.Y = [T](double s, const double* x, double bt) {
      return x[0] * std::exp(beta * bt + (mu0 - r - 0.5 * beta * beta) * (T - s));
    };
    o.Z = [T](double s, const double* x, double bt) {
      return sigma1 * x[0] * std::exp(beta * bt + (mu0 - r - 0.5 * beta * beta) * (T - s));
    };
  } else if (n == "mean-field-driver") {
    const double m = s.law.mean();
    o.Y = [m, T](double s_, const double* x, double bt) {
      return x[0] + params::c * bt - m * (1.0 - std::exp(-params::kappa * (T - s_)));
    };
    o.Z = [](double, const double*, double) { return params::sigma0; };
  }
  return o;
}

inline std::vector<CatalogEntry> builtin_scenarios() {
  auto base = [](const std::string& id, const std::string& coef, LawSampler law) {
    ScenarioSpec s;
    s.id = id;
    s.coefficients = coef;
    s.t = 0.0;
    s.T = 1.0;
    s.steps = 16;
    s.x = {1.0};
    s.law = law;
    s.particles = 1024;
    s.bpaths = 16;
    s.seed = 20240601;
    return s;
  };
  std::vector<CatalogEntry> out;
  auto add = [&](ScenarioSpec s, AssumptionBudget b) { out.push_back({s, make_oracle(s), b}); };
  add(base("S0", "null", LawSampler::gaussian(0.0, 1.0)), {1.0, 0.25, 0.25, 16});
  add(base("S1", "constant-backward", LawSampler::gaussian(0.0, 1.0)), {1.0, 0.25, 0.25, 16});
  add(base("S2", "mean-field-terminal", LawSampler::gaussian(0.5, 0.5)), {1.0, 0.25, 0.25, 16});
  add(base("S3", "affine-g", LawSampler::gaussian(0.0, 1.0)), {1.0, 0.3, 0.25, 16});
  {
    auto s = base("S4", "pardoux-peng", LawSampler::gaussian(1.0, 0.2));
    add(s, {4.0, 0.25, 0.25, 16});
  }
  add(base("S5", "mean-field-driver", LawSampler::gaussian(0.5, 0.5)), {1.0, 0.25, 0.25, 16});
  {
    auto s = base("S6", "rich-affine", LawSampler::gaussian(0.3, 0.5));
    s.x = {0.4};
    add(s, {2.0, 0.2, 0.25, 16});
  }
  return out;
}

inline const CatalogEntry& catalog_entry(const std::string& id) {
  static const std::vector<CatalogEntry> cat = builtin_scenarios();
  for (const auto& e : cat)
    if (e.spec.id == id) return e;
  throw Error(ErrorCode::ConfigError, "unknown catalog scenario " + id);
}

}  // namespace mfbdsde
