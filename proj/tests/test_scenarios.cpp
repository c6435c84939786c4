#include <gtest/gtest.h>

#include <cmath>
#include <random>
#include <sstream>
#include <string>

#include "mfbdsde/coefficients.hpp"
#include "mfbdsde/scenarios.hpp"
#include "test_util.hpp"

using namespace mfbdsde;

namespace {

const char* kMinimal =
    "scenario.id = T1\n"
    "time.t = 0\n"
    "time.T = 2\n"
    "time.steps = 8\n"
    "state.x = 0.5, -1\n"
    "law.sampler = uniform(-1, 3)\n"
    "particles.inner = 100\n"
    "particles.bpaths = 4\n"
    "seed = 7\n"
    "coefficients.name = null\n";

std::string without(const std::string& text, const std::string& key) {
  std::string out, line;
  std::stringstream ss(text);
  while (std::getline(ss, line))
    if (line.rfind(key + " ", 0) != 0) out += line + "\n";
  return out;
}

}  // namespace

TEST(ScenarioFile, ParsesNormativeKeys) {
  const ScenarioSpec s = parse_scenario(kMinimal);
  EXPECT_EQ(s.id, "T1");
  EXPECT_EQ(s.T, 2.0);
  EXPECT_EQ(s.steps, 8u);
  ASSERT_EQ(s.x.size(), 2u);
  EXPECT_EQ(s.x[1], -1.0);
  EXPECT_EQ(s.law.kind, LawSampler::Kind::uniform);
  EXPECT_EQ(s.law.mean(), 1.0);
  EXPECT_EQ(s.particles, 100u);
  EXPECT_EQ(s.bpaths, 4u);
  EXPECT_EQ(s.seed, 7u);
  EXPECT_EQ(s.dt(), 0.25);
}

TEST(ScenarioFile, RoundTrip) {
  ScenarioSpec s = parse_scenario(kMinimal);
  s.picard_tol = 1.0 / 3.0;
  s.ridge = 1e-7;
  s.pilots = 50;
  const ScenarioSpec r = parse_scenario(serialize_scenario(s));
  EXPECT_EQ(serialize_scenario(r), serialize_scenario(s));
  EXPECT_EQ(r.picard_tol, s.picard_tol);
  EXPECT_EQ(r.pilots, 50u);
}

TEST(ScenarioFile, CommentsAndBlankLines) {
  const ScenarioSpec s = parse_scenario(std::string("# header\n\n") + kMinimal + "  # trailing\n");
  EXPECT_EQ(s.id, "T1");
}

TEST(ScenarioFile, MissingKeysAreConfigErrors) {
  for (const char* key : {"time.T", "scenario.id", "seed", "law.sampler", "coefficients.name"})
    EXPECT_EQ(code_of([&] { parse_scenario(without(kMinimal, key)); }), ErrorCode::ConfigError) << key;
}

TEST(ScenarioFile, RejectsBadValues) {
  const std::string base = kMinimal;
  EXPECT_EQ(code_of([&] { parse_scenario(base + "bogus.key = 1\n"); }), ErrorCode::ConfigError);
  EXPECT_EQ(code_of([&] { parse_scenario(base + "seed = 8\n"); }), ErrorCode::ConfigError);
  EXPECT_EQ(code_of([&] { parse_scenario(without(base, "time.steps") + "time.steps = 0\n"); }),
            ErrorCode::ConfigError);
  EXPECT_EQ(code_of([&] { parse_scenario(without(base, "time.T") + "time.T = 0\n"); }), ErrorCode::ConfigError);
  EXPECT_EQ(code_of([&] { parse_scenario(without(base, "law.sampler") + "law.sampler = cauchy(0, 1)\n"); }),
            ErrorCode::ConfigError);
  EXPECT_EQ(code_of([&] { parse_scenario(without(base, "particles.inner") + "particles.inner = many\n"); }),
            ErrorCode::ConfigError);
}

TEST(LawSamplerSpec, ParseAndMoments) {
  EXPECT_EQ(LawSampler::parse("dirac(2.5)").mean(), 2.5);
  EXPECT_EQ(LawSampler::parse("dirac(2.5)").variance(), 0.0);
  EXPECT_EQ(LawSampler::parse("gaussian(1, 0.5)").variance(), 0.25);
  EXPECT_NEAR(LawSampler::parse("uniform(0, 6)").variance(), 3.0, 1e-15);
  EXPECT_EQ(code_of([] { LawSampler::parse("uniform(1, 1)"); }), ErrorCode::ConfigError);
}

TEST(LawSamplerSpec, DrawsMatchMoments) {
  const LawSampler u = LawSampler::uniform(-1.0, 3.0);
  double s = 0.0, s2 = 0.0;
  const std::size_t n = 200000;
  for (std::size_t i = 0; i < n; ++i) {
    const double v = u.draw(Seed{5, 0}, i, 0);
    ASSERT_GE(v, -1.0);
    ASSERT_LT(v, 3.0);
    s += v;
    s2 += v * v;
  }
  const double mean = s / n, var = s2 / n - mean * mean;
  EXPECT_NEAR(mean, 1.0, 4.0 * std::sqrt(u.variance() / n));
  EXPECT_NEAR(var / u.variance(), 1.0, 0.02);
}

// the shipped scenario files are the catalog
TEST(Catalog, FilesMatchBuiltins) {
  for (const auto& e : builtin_scenarios()) {
    const ScenarioSpec s = load_scenario(std::string(MFBDSDE_SCENARIO_DIR) + "/" + e.spec.id + ".cfg");
    EXPECT_EQ(serialize_scenario(s), serialize_scenario(e.spec)) << e.spec.id;
  }
}

TEST(Catalog, KnownIds) {
  for (const char* id : {"S0", "S1", "S2", "S3", "S4", "S5", "S6"}) EXPECT_EQ(catalog_entry(id).spec.id, id);
  EXPECT_EQ(code_of([] { catalog_entry("S99"); }), ErrorCode::ConfigError);
  EXPECT_EQ(code_of([] { make_coefficients("nope"); }), ErrorCode::ConfigError);
}

TEST(Catalog, OracleValues) {
  const double x = 0.7, bt = -0.4;
  const auto& s0 = catalog_entry("S0").oracle;
  EXPECT_EQ(s0.Y(0.3, &x, bt), x);
  EXPECT_EQ(s0.Z(0.3, &x, bt), 0.0);
  const auto& s1 = catalog_entry("S1").oracle;
  EXPECT_DOUBLE_EQ(s1.Y(0.3, &x, bt), x + params::c * bt);
  EXPECT_EQ(s1.Z(0.3, &x, bt), params::sigma0);
  const auto& s2 = catalog_entry("S2");
  EXPECT_DOUBLE_EQ(s2.oracle.Y(0.0, &x, 0.0), x + s2.spec.law.mean());
  EXPECT_FALSE(catalog_entry("S6").oracle.has());
}

TEST(Catalog, AffineFlagMatchesG) {
  for (const auto& e : builtin_scenarios()) {
    const CoefficientSet cs = make_coefficients(e.spec.coefficients);
    if (!cs.affine_g) continue;
    const ValidationReport r = validate_assumptions(cs, e.budget, 1000, Seed{1, 0});
    EXPECT_TRUE(r.affine_checked) << e.spec.id;
    EXPECT_LE(r.affine_max_error, 1e-12) << e.spec.id;
  }
}

TEST(Catalog, LipschitzBudgetsHold) {
  for (const auto& e : builtin_scenarios()) {
    const ValidationReport r = validate_assumptions(make_coefficients(e.spec.coefficients), e.budget, 400, Seed{2, 0});
    EXPECT_TRUE(r.lipschitz_pass()) << e.spec.id;
    EXPECT_FALSE(r.disclaimer.empty());
  }
}

TEST(Validation, ConstantCoefficientsHaveZeroRatios) {
  const CoefficientSet cs = make_coefficients("constant-backward");
  const ValidationReport r = validate_assumptions(cs, AssumptionBudget{}, 200, Seed{3, 0});
  for (const auto& e : r.ratios)
    if (e.coefficient != "Phi") EXPECT_EQ(e.max_ratio, 0.0) << e.coefficient << "/" << e.argument;
  EXPECT_TRUE(r.pass());
}

TEST(Validation, FlagsAffineMismatch) {
  CoefficientSet cs = make_coefficients("affine-g");
  cs.g = [](const double*, double, const double* z, const LawMoments&, double* o) { o[0] = 0.5 * z[0] + 1e-3; };
  const ValidationReport r = validate_assumptions(cs, AssumptionBudget{}, 50, Seed{4, 0});
  EXPECT_FALSE(r.affine_pass);
  EXPECT_FALSE(r.pass());
}

TEST(Validation, SineLipschitzConstantIsOne) {
  CoefficientSet cs = make_coefficients("null");
  cs.f = [](const double*, double, const double* z, const LawMoments&) { return std::sin(z[0]); };
  const ValidationReport r = validate_assumptions(cs, AssumptionBudget{}, 100000, Seed{5, 0});
  const RatioEntry* e = r.find("f", "z");
  ASSERT_NE(e, nullptr);
  EXPECT_NEAR(e->max_ratio, 1.0, 0.01);
}

TEST(Validation, H42ConstantsAreReported) {
  const ValidationReport r = validate_assumptions(make_coefficients("null"), AssumptionBudget{}, 10, Seed{6, 0});
  ASSERT_EQ(r.h42.size(), 3u);
  EXPECT_EQ(r.h42[0].p, 16.0);
  EXPECT_EQ(r.h42[2].p, 2.0);
  // the p = 16 constant is astronomically large with alpha1 + alpha2 = 0.5
  EXPECT_FALSE(r.h42[0].pass);
  EXPECT_EQ(code_of([] { validate_assumptions(make_coefficients("null"), AssumptionBudget{}, 1, Seed{}); }),
            ErrorCode::InvalidArgument);
}

// analytic x-derivatives against central differences at random probes
TEST(CoefficientDerivatives, XDerivativesMatchFiniteDifferences) {
  std::mt19937_64 rng(9);
  std::uniform_real_distribution<double> u(-2.0, 2.0);
  for (const char* name : {"pardoux-peng", "rich-affine", "affine-g"}) {
    const CoefficientSet cs = make_coefficients(name);
    LawMoments mx;
    mx.m.assign(cs.x_features.count, 0.3);
    for (int rep = 0; rep < 20; ++rep) {
      const double x = u(rng), e = 1e-5;
      double bx, sx, bp, bm, sp, sm;
      cs.b_x(&x, mx, &bx);
      cs.sigma_x(&x, mx, &sx);
      const double xp = x + e, xm = x - e;
      cs.b(&xp, mx, &bp);
      cs.b(&xm, mx, &bm);
      cs.sigma(&xp, mx, &sp);
      cs.sigma(&xm, mx, &sm);
      EXPECT_NEAR(bx, (bp - bm) / (2 * e), 1e-7) << name;
      EXPECT_NEAR(sx, (sp - sm) / (2 * e), 1e-7) << name;
      double px;
      cs.Phi_x(&x, mx, &px);
      EXPECT_NEAR(px, (cs.Phi(&xp, mx) - cs.Phi(&xm, mx)) / (2 * e), 1e-7) << name;
    }
  }
}

// analytic Lions derivatives of Phi and b against lions_fd on the lifted coefficient
TEST(CoefficientDerivatives, LionsDerivativesMatchParticleBumps) {
  std::mt19937_64 rng(10);
  std::normal_distribution<double> g(0.3, 0.7);
  const CoefficientSet cs = make_coefficients("rich-affine");
  std::vector<double> pts(64);
  for (double& v : pts) v = g(rng);
  const EmpiricalMeasure mu(pts, 1);
  const double x = 0.4;
  const MeasureFunctional phi = [&](const EmpiricalMeasure& m) { return cs.Phi(&x, cs.x_features.of(m)); };
  const MeasureFunctional bfun = [&](const EmpiricalMeasure& m) {
    double o;
    cs.b(&x, cs.x_features.of(m), &o);
    return o;
  };
  const LawMoments lm = cs.x_features.of(mu);
  for (std::size_t i = 0; i < mu.n; i += 7) {
    double a;
    cs.Phi_mu.eval(&x, mu.atom(i), lm, &a);
    EXPECT_NEAR(lions_fd(phi, mu, i, 1e-4)[0], a, 1e-6 * std::max(1.0, std::abs(a)));
    cs.b_mu.eval(&x, mu.atom(i), lm, &a);
    EXPECT_NEAR(lions_fd(bfun, mu, i, 1e-4)[0], a, 1e-6 * std::max(1.0, std::abs(a)));
  }
}
