#include <gtest/gtest.h>

#include <cmath>
#include <memory>
#include <vector>

#include "mfbdsde/forward.hpp"
#include "mfbdsde/parallel.hpp"
#include "mfbdsde/scenarios.hpp"
#include "mfbdsde/verify.hpp"
#include "test_util.hpp"

using namespace mfbdsde;

namespace {

std::shared_ptr<const PathBundle> bundle(std::size_t n, std::size_t N, std::size_t M, std::uint64_t seed,
                                         std::size_t pilots = 0) {
  return std::make_shared<const PathBundle>(sample_paths(make_grid(0.0, 1.0, n), 1, 1, N, M, Seed{seed, 0}, pilots));
}

ForwardCloud cloud(const CoefficientSet& cs, const std::shared_ptr<const PathBundle>& pb, const LawSampler& law,
                   std::vector<std::vector<double>> starts) {
  ScenarioSpec s;
  s.law = law;
  return solve_split_sde(cs, s, pb, starts);
}

// b(x, mu) = int y dmu, sigma = s0
CoefficientSet mean_drift(double s0) {
  CoefficientSet c = detail::scalar_zero("mean-drift");
  c.x_features = Features{1, [](const double* a, double* o) { o[0] = a[0]; }};
  c.b = [](const double*, const LawMoments& m, double* o) { o[0] = m[0]; };
  c.b_mu = detail::const_kernel(1, 1, {1.0});
  c.sigma = [s0](const double*, const LawMoments&, double* o) { o[0] = s0; };
  return c;
}

}  // namespace

TEST(SplitSde, NullCoefficientsKeepPathsConstant) {
  const auto pb = bundle(8, 50, 2, 1);
  const ForwardCloud fc = cloud(make_coefficients("null"), pb, LawSampler::gaussian(0, 1), {{0.7}});
  for (std::size_t k = 0; k <= 8; ++k)
    for (std::size_t i = 0; i < 50; ++i) {
      EXPECT_EQ(fc.law.at(k, i)[0], fc.law.at(0, i)[0]);
      EXPECT_EQ(fc.pilots[0].at(k, i)[0], 0.7);
    }
}

TEST(SplitSde, ConstantSigmaIsExactAtNodes) {
  const auto pb = bundle(16, 40, 2, 2);
  const ForwardCloud fc = cloud(make_coefficients("constant-backward"), pb, LawSampler::gaussian(0, 1), {{1.0}});
  for (std::size_t p = 0; p < 40; ++p) {
    double x = 1.0;
    for (std::size_t k = 0; k < 16; ++k) {
      x += params::sigma0 * pb->pilot_w(p, k, 0);
      EXPECT_NEAR(fc.pilots[0].at(k + 1, p)[0], x, 1e-14);
    }
  }
}

// sigma = 0, b = mean, xi = 1: m' = m, Euler gives (1 + dt)^k, first order in dt
TEST(SplitSde, MeanDrivenOdeIsFirstOrder) {
  std::vector<double> err;
  for (std::size_t n : {16u, 32u, 64u}) {
    const auto pb = bundle(n, 8, 1, 3);
    const ForwardCloud fc = cloud(mean_drift(0.0), pb, LawSampler::dirac(1.0), {{1.0}});
    for (std::size_t k = 0; k <= n; ++k)
      EXPECT_NEAR(fc.law.at(k, 0)[0], std::exp(fc.grid.nodes[k]), 1.5 / static_cast<double>(n));
    err.push_back(std::abs(fc.pilots[0].at(n, 0)[0] - std::exp(1.0)));
  }
  EXPECT_NEAR(err[0] / err[1], 2.0, 0.2);
  EXPECT_NEAR(err[1] / err[2], 2.0, 0.2);
}

TEST(SplitSde, LawFlowIsTheEmpiricalMeasureOfTheParticles) {
  const CoefficientSet cs = make_coefficients("rich-affine");
  const ForwardCloud fc = cloud(cs, bundle(8, 64, 2, 4), LawSampler::gaussian(0.3, 0.5), {{0.4}});
  for (std::size_t k = 0; k <= 8; ++k) {
    const LawMoments m = cs.x_features.of(fc.law_measure(k));
    EXPECT_EQ(m.m, fc.law_flow[k].m);
  }
}

// pilots started at each particle's own draw on the law stream reproduce the law paths
TEST(SplitSde, SubstitutionIdentityIsBitExact) {
  const CoefficientSet cs = make_coefficients("rich-affine");
  const auto pb = bundle(16, 128, 2, 5);
  const auto init = draw_initial_law(LawSampler::gaussian(0.3, 0.5), pb->seed, 128, 1);
  PilotStart ps;
  ps.stream = Role::law_w;
  ps.states = init;
  const ForwardCloud fc = simulate(cs, pb, init, {ps});
  EXPECT_EQ(fc.pilots[0].x, fc.law.x);
}

TEST(SplitSde, RestartIsBitExact) {
  const CoefficientSet cs = make_coefficients("rich-affine");
  const auto pb = bundle(16, 128, 2, 6);
  const ForwardCloud fc = cloud(cs, pb, LawSampler::gaussian(0.3, 0.5), {{0.4}, {-0.2}});
  for (std::size_t s : {1u, 7u, 15u}) {
    const ForwardCloud r = restart(cs, fc, s);
    for (std::size_t k = 0; k <= 16 - s; ++k) {
      for (std::size_t i = 0; i < 128; ++i) ASSERT_EQ(r.law.at(k, i)[0], fc.law.at(k + s, i)[0]);
      for (std::size_t j = 0; j < 2; ++j)
        for (std::size_t p = 0; p < 128; ++p) ASSERT_EQ(r.pilots[j].at(k, p)[0], fc.pilots[j].at(k + s, p)[0]);
    }
  }
}

TEST(SplitSde, IndependentOfThreadWidth) {
  const CoefficientSet cs = make_coefficients("rich-affine");
  const auto pb = bundle(16, 500, 2, 7);
  set_thread_width(1);
  const ForwardCloud a = cloud(cs, pb, LawSampler::gaussian(0.3, 0.5), {{0.4}});
  set_thread_width(4);
  const ForwardCloud b = cloud(cs, pb, LawSampler::gaussian(0.3, 0.5), {{0.4}});
  set_thread_width(1);
  EXPECT_EQ(a.law.x, b.law.x);
  EXPECT_EQ(a.pilots[0].x, b.pilots[0].x);
}

// two samplers of the same symmetric law, zeta and -zeta
TEST(SplitSde, DependsOnTheLawOnly) {
  const CoefficientSet cs = make_coefficients("rich-affine");
  const std::size_t N = 4096;
  const auto pb = bundle(16, N, 1, 8);
  auto init = draw_initial_law(LawSampler::gaussian(0.0, 0.5), pb->seed, N, 1);
  const auto start = PilotStart::at({0.4}, N, Role::pilot_w);
  const ForwardCloud a = simulate(cs, pb, init, {start});
  for (double& v : init) v = -v;
  const ForwardCloud b = simulate(cs, pb, init, {start});
  std::vector<double> diff(N);
  for (std::size_t p = 0; p < N; ++p) diff[p] = a.pilots[0].at(16, p)[0] - b.pilots[0].at(16, p)[0];
  const MeanSe ms = mean_se(diff);
  // same pilot noise, so the difference only carries the law-sampling error of the flow
  EXPECT_LT(std::abs(ms.mean), 4.0 * 0.5 * std::sqrt(2.0 / static_cast<double>(N)) + 4.0 * ms.se);
}

TEST(SplitSde, Errors) {
  const auto pb = bundle(4, 10, 1, 9);
  const CoefficientSet cs = make_coefficients("null");
  EXPECT_EQ(code_of([&] { simulate(cs, pb, std::vector<double>(9, 0.0), {}); }), ErrorCode::LengthMismatch);
  CoefficientSet blow = mean_drift(0.0);
  blow.b = [](const double* x, const LawMoments&, double* o) { o[0] = 1e300 * x[0] * x[0]; };
  EXPECT_EQ(code_of([&] { cloud(blow, pb, LawSampler::dirac(1e10), {}); }), ErrorCode::NonfiniteState);
  auto two = std::make_shared<const PathBundle>(sample_paths(make_grid(0.0, 1.0, 4), 2, 1, 10, 1, Seed{1, 0}));
  EXPECT_EQ(code_of([&] { simulate(cs, two, std::vector<double>(20, 0.0), {}); }), ErrorCode::DimMismatch);
}

TEST(Tangent, IdentityForXIndependentCoefficients) {
  const CoefficientSet cs = make_coefficients("constant-backward");
  const ForwardCloud fc = cloud(cs, bundle(8, 32, 1, 10), LawSampler::gaussian(0, 1), {{1.0}});
  const TangentCloud tc = solve_dx(cs, fc);
  for (std::size_t k = 0; k <= 8; ++k)
    for (std::size_t p = 0; p < 32; ++p) EXPECT_EQ(tc.J(k, p)[0], 1.0);
}

// sigma(x) = a x, b = 0: the tangent and X / x follow the same recursion
TEST(Tangent, GeometricNoiseTangentIsXOverX0) {
  CoefficientSet cs = detail::scalar_zero("geometric");
  cs.sigma = [](const double* x, const LawMoments&, double* o) { o[0] = 0.4 * x[0]; };
  cs.sigma_x = [](const double*, const LawMoments&, double* o) { o[0] = 0.4; };
  const double x0 = 1.7;
  const ForwardCloud fc = cloud(cs, bundle(32, 64, 1, 11), LawSampler::gaussian(0, 1), {{x0}});
  const TangentCloud tc = solve_dx(cs, fc);
  for (std::size_t k = 0; k <= 32; ++k)
    for (std::size_t p = 0; p < 64; ++p) EXPECT_NEAR(tc.J(k, p)[0], fc.pilots[0].at(k, p)[0] / x0, 1e-13);
}

TEST(Tangent, MatchesCommonRandomNumberBump) {
  const CoefficientSet cs = make_coefficients("rich-affine");
  const auto pb = bundle(16, 256, 1, 12);
  const double x = 0.4, e = 1e-4;
  const ForwardCloud fc = cloud(cs, pb, LawSampler::gaussian(0.3, 0.5), {{x}});
  const ForwardCloud up = cloud(cs, pb, LawSampler::gaussian(0.3, 0.5), {{x + e}});
  const ForwardCloud dn = cloud(cs, pb, LawSampler::gaussian(0.3, 0.5), {{x - e}});
  const TangentCloud tc = solve_dx(cs, fc);
  for (std::size_t p = 0; p < 256; p += 17) {
    const double fd = (up.pilots[0].at(16, p)[0] - dn.pilots[0].at(16, p)[0]) / (2 * e);
    EXPECT_NEAR(tc.J(16, p)[0], fd, 1e-3 * std::abs(fd));
  }
}

TEST(MeasureTangent, ZeroWithoutMeasureDependence) {
  const CoefficientSet cs = make_coefficients("pardoux-peng");
  const ForwardCloud fc = cloud(cs, bundle(8, 64, 1, 13), LawSampler::gaussian(1, 0.2), {{1.0}, {0.5}});
  const TangentCloud tc = solve_dmu(cs, fc, 0, 1);
  for (double v : tc.dmu) EXPECT_EQ(v, 0.0);
  for (double v : tc.dmu_law) EXPECT_EQ(v, 0.0);
}

// b = int y dmu, sigma = 1: u' = 1 + u, u(0) = 0, so U = e^s - 1 for every x and y
TEST(MeasureTangent, MeanDriftOde) {
  std::vector<double> err;
  for (std::size_t n : {16u, 32u, 64u}) {
    const CoefficientSet cs = mean_drift(1.0);
    const ForwardCloud fc = cloud(cs, bundle(n, 256, 1, 14), LawSampler::gaussian(0, 1), {{0.3}, {-0.8}});
    const TangentCloud tc = solve_dmu(cs, fc, 0, 1);
    for (std::size_t k = 0; k <= n; ++k) {
      const double u = std::exp(fc.grid.nodes[k]) - 1.0;
      EXPECT_NEAR(tc.U(k, 5)[0], u, 1.5 / static_cast<double>(n));
      EXPECT_NEAR(tc.Ulaw(k, 9)[0], u, 1.5 / static_cast<double>(n));
    }
    err.push_back(std::abs(tc.U(n, 0)[0] - (std::exp(1.0) - 1.0)));
  }
  EXPECT_NEAR(err[0] / err[1], 2.0, 0.2);
  EXPECT_NEAR(err[1] / err[2], 2.0, 0.2);
}

TEST(MeasureTangent, MissingDerivative) {
  CoefficientSet cs = make_coefficients("null");
  cs.b_mu = Separable{};
  const ForwardCloud fc = cloud(cs, bundle(4, 16, 1, 15), LawSampler::gaussian(0, 1), {{0.0}, {0.0}});
  EXPECT_EQ(code_of([&] { solve_dmu(cs, fc, 0, 1); }), ErrorCode::MissingDerivative);
}

TEST(SecondOrder, VanishesForLinearCoefficients) {
  const CoefficientSet cs = make_coefficients("pardoux-peng");
  const ForwardCloud fc = cloud(cs, bundle(8, 64, 1, 16), LawSampler::gaussian(1, 0.2), {{1.0}, {0.5}});
  const SecondOrderCloud so = solve_second_order(cs, fc, solve_dmu(cs, fc, 0, 1));
  for (double v : so.dxx) EXPECT_EQ(v, 0.0);
  for (double v : so.dydmu) EXPECT_EQ(v, 0.0);
}

TEST(SecondOrder, MatchesBumpOfTheTangent) {
  const CoefficientSet cs = make_coefficients("rich-affine");
  const auto pb = bundle(16, 256, 1, 17);
  const double x = 0.4, y = -0.3, e = 1e-3;
  auto tangents = [&](double xv, double yv) {
    const ForwardCloud fc = cloud(cs, pb, LawSampler::gaussian(0.3, 0.5), {{xv}, {yv}});
    return solve_dmu(cs, fc, 0, 1);
  };
  const ForwardCloud fc = cloud(cs, pb, LawSampler::gaussian(0.3, 0.5), {{x}, {y}});
  const SecondOrderCloud so = solve_second_order(cs, fc, solve_dmu(cs, fc, 0, 1));
  const TangentCloud xu = tangents(x + e, y), xd = tangents(x - e, y);
  const TangentCloud yu = tangents(x, y + e), yd = tangents(x, y - e);
  double num = 0.0, den = 0.0, num2 = 0.0, den2 = 0.0;
  for (std::size_t p = 0; p < 256; ++p) {
    const double fd = (xu.J(16, p)[0] - xd.J(16, p)[0]) / (2 * e);
    num += std::pow(so.dxx[16 * 256 + p] - fd, 2);
    den += fd * fd;
    const double fdy = (yu.U(16, p)[0] - yd.U(16, p)[0]) / (2 * e);
    num2 += std::pow(so.dydmu[16 * 256 + p] - fdy, 2);
    den2 += fdy * fdy;
  }
  EXPECT_LT(std::sqrt(num / den), 0.05);
  EXPECT_LT(std::sqrt(num2 / den2), 0.05);
}

TEST(MalliavinForward, ZeroBeforeThetaAndSigmaAfter) {
  const CoefficientSet cs = make_coefficients("constant-backward");
  const ForwardCloud fc = cloud(cs, bundle(8, 32, 1, 18), LawSampler::gaussian(0, 1), {{1.0}});
  const MalliavinForwardCloud mc = solve_malliavin_forward(cs, fc, 3);
  for (std::size_t k = 0; k <= 8; ++k)
    for (std::size_t p = 0; p < 32; ++p) EXPECT_EQ(mc.at(k, p)[0], k < 3 ? 0.0 : params::sigma0);
  EXPECT_EQ(code_of([&] { solve_malliavin_forward_at(cs, fc, 0.3); }), ErrorCode::ThetaOffGrid);
  EXPECT_EQ(solve_malliavin_forward_at(cs, fc, 0.375).theta, 3u);
}

// D_theta X_s = J_s J_theta^{-1} sigma(X_theta)
TEST(MalliavinForward, ProductFormula) {
  const CoefficientSet cs = make_coefficients("rich-affine");
  const ForwardCloud fc = cloud(cs, bundle(16, 128, 1, 19), LawSampler::gaussian(0.3, 0.5), {{0.4}});
  const TangentCloud tc = solve_dx(cs, fc);
  const std::size_t th = 5;
  const MalliavinForwardCloud mc = solve_malliavin_forward(cs, fc, th);
  for (std::size_t p = 0; p < 128; ++p) {
    double sg;
    cs.sigma(fc.pilots[0].at(th, p), fc.law_flow[th], &sg);
    for (std::size_t k = th; k <= 16; ++k) {
      const double prod = tc.J(k, p)[0] / tc.J(th, p)[0] * sg;
      EXPECT_NEAR(mc.at(k, p)[0], prod, 1e-6 * std::abs(prod));
    }
  }
}
