#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <functional>
#include <limits>
#include <numeric>
#include <vector>

#include "error.hpp"

namespace mfbdsde {

struct EmpiricalMeasure {
  std::vector<double> points;  // [N][dim]
  std::size_t n = 0;
  std::size_t dim = 1;

  EmpiricalMeasure() = default;
  EmpiricalMeasure(std::vector<double> pts, std::size_t dim_) : points(std::move(pts)), dim(dim_) {
    require(dim > 0 && points.size() % dim == 0, ErrorCode::DimMismatch, "point array not a multiple of dim");
    n = points.size() / dim;
    require(n >= 1, ErrorCode::InvalidArgument, "empty measure");
    for (double v : points) require(std::isfinite(v), ErrorCode::InvalidArgument, "non-finite atom");
  }

  double at(std::size_t i, std::size_t j) const { return points[i * dim + j]; }
  double& at(std::size_t i, std::size_t j) { return points[i * dim + j]; }
  const double* atom(std::size_t i) const { return &points[i * dim]; }

  double mean(std::size_t j = 0) const {
    double s = 0.0;
    for (std::size_t i = 0; i < n; ++i) s += at(i, j);
    return s / static_cast<double>(n);
  }
};

using MeasureFunctional = std::function<double(const EmpiricalMeasure&)>;

struct LionsGradient {
  std::vector<double> values;  // [N][dim]
  double step = 0.0;
};

// Min-cost perfect assignment on an n x n cost matrix (row-major).
// Returns col[i] for each row i. Shortest augmenting path with potentials.
inline std::vector<std::size_t> solve_assignment(const std::vector<double>& cost, std::size_t n) {
  const double inf = std::numeric_limits<double>::infinity();
  std::vector<double> u(n + 1, 0.0), v(n + 1, 0.0);
  std::vector<std::size_t> p(n + 1, 0), way(n + 1, 0);
  for (std::size_t i = 1; i <= n; ++i) {
    p[0] = i;
    std::size_t j0 = 0;
    std::vector<double> minv(n + 1, inf);
    std::vector<char> used(n + 1, 0);
    do {
      used[j0] = 1;
      const std::size_t i0 = p[j0];
      double delta = inf;
      std::size_t j1 = 0;
      for (std::size_t j = 1; j <= n; ++j) {
        if (used[j]) continue;
        const double cur = cost[(i0 - 1) * n + (j - 1)] - u[i0] - v[j];
        if (cur < minv[j]) {
          minv[j] = cur;
          way[j] = j0;
        }
        if (minv[j] < delta) {
          delta = minv[j];
          j1 = j;
        }
      }
      for (std::size_t j = 0; j <= n; ++j) {
        if (used[j]) {
          u[p[j]] += delta;
          v[j] -= delta;
        } else {
          minv[j] -= delta;
        }
      }
      j0 = j1;
    } while (p[j0] != 0);
    do {
      const std::size_t j1 = way[j0];
      p[j0] = p[j1];
      j0 = j1;
    } while (j0 != 0);
  }
  std::vector<std::size_t> col(n);
  for (std::size_t j = 1; j <= n; ++j) col[p[j] - 1] = j - 1;
  return col;
}

namespace detail {

// sums pair costs in sorted order so the result does not depend on labels
inline double canonical_sum(std::vector<double> c) {
  std::sort(c.begin(), c.end());
  double s = 0.0;
  for (double x : c) s += x;
  return s;
}

inline double transport_cost(const EmpiricalMeasure& mu, const EmpiricalMeasure& nu, std::size_t split, double g1,
                             double g2) {
  require(mu.dim == nu.dim, ErrorCode::DimMismatch, "measures live in different dimensions");
  require(mu.n == nu.n, ErrorCode::UnequalSupportSize, "w2 needs equal support sizes");
  const std::size_t n = mu.n, dim = mu.dim;
  auto pair_cost = [&](std::size_t i, std::size_t j) {
    double a = 0.0, b = 0.0;
    for (std::size_t c = 0; c < dim; ++c) {
      const double diff = mu.at(i, c) - nu.at(j, c);
      (c < split ? a : b) += diff * diff;
    }
    return g1 * a + g2 * b;
  };
  std::vector<double> pairs(n);
  if (dim == 1) {
    std::vector<double> a(n), b(n);
    for (std::size_t i = 0; i < n; ++i) {
      a[i] = mu.at(i, 0);
      b[i] = nu.at(i, 0);
    }
    std::sort(a.begin(), a.end());
    std::sort(b.begin(), b.end());
    const double g = split >= 1 ? g1 : g2;
    for (std::size_t i = 0; i < n; ++i) pairs[i] = g * (a[i] - b[i]) * (a[i] - b[i]);
    return canonical_sum(std::move(pairs));
  }
  std::vector<double> cost(n * n);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < n; ++j) cost[i * n + j] = pair_cost(i, j);
  const auto col = solve_assignment(cost, n);
  for (std::size_t i = 0; i < n; ++i) pairs[i] = cost[i * n + col[i]];
  return canonical_sum(std::move(pairs));
}

}  // namespace detail

inline double w2(const EmpiricalMeasure& mu, const EmpiricalMeasure& nu) {
  const double c = detail::transport_cost(mu, nu, mu.dim, 1.0, 1.0);
  return std::sqrt(std::max(0.0, c / static_cast<double>(mu.n)));
}

// atoms split as [0, split) -> xi block weighted gamma1, [split, dim) -> eta block weighted gamma2
inline double w2_weighted(const EmpiricalMeasure& mu, const EmpiricalMeasure& nu, std::size_t split, double gamma1,
                          double gamma2) {
  require(gamma1 > 0.0 && gamma2 > 0.0, ErrorCode::NonpositiveWeight, "weights must be positive");
  require(split <= mu.dim, ErrorCode::DimMismatch, "split beyond atom dimension");
  const double c = detail::transport_cost(mu, nu, split, gamma1, gamma2);
  return std::sqrt(std::max(0.0, c / static_cast<double>(mu.n)));
}

inline double default_fd_step(double x) { return 1e-4 * std::max(1.0, std::abs(x)); }

// N * central difference in the coordinates of atom i; step <= 0 picks the default per coordinate
inline std::vector<double> lions_fd(const MeasureFunctional& phi, const EmpiricalMeasure& mu, std::size_t atom_index,
                                    double step) {
  require(atom_index < mu.n, ErrorCode::InvalidArgument, "atom index out of range");
  std::vector<double> grad(mu.dim);
  EmpiricalMeasure work = mu;
  const double scale = static_cast<double>(mu.n);
  for (std::size_t j = 0; j < mu.dim; ++j) {
    const double x0 = mu.at(atom_index, j);
    const double eps = step > 0.0 ? step : default_fd_step(x0);
    work.at(atom_index, j) = x0 + eps;
    const double up = phi(work);
    work.at(atom_index, j) = x0 - eps;
    const double dn = phi(work);
    work.at(atom_index, j) = x0;
    grad[j] = scale * (up - dn) / (2.0 * eps);
    require(std::isfinite(grad[j]), ErrorCode::StepTooSmall, "finite difference is not finite");
  }
  return grad;
}

inline LionsGradient lions_gradient(const MeasureFunctional& phi, const EmpiricalMeasure& mu, double step) {
  LionsGradient g;
  g.step = step;
  g.values.resize(mu.n * mu.dim);
  for (std::size_t i = 0; i < mu.n; ++i) {
    const auto gi = lions_fd(phi, mu, i, step);
    std::copy(gi.begin(), gi.end(), g.values.begin() + static_cast<std::ptrdiff_t>(i * mu.dim));
  }
  return g;
}

inline double directional_check(const MeasureFunctional& phi, const EmpiricalMeasure& mu,
                                const std::vector<double>& zeta, double step) {
  require(zeta.size() == mu.n * mu.dim, ErrorCode::LengthMismatch, "zeta must match the atom array");
  require(step > 0.0, ErrorCode::StepTooSmall, "step must be positive");
  EmpiricalMeasure shifted = mu;
  for (std::size_t q = 0; q < zeta.size(); ++q) shifted.points[q] += step * zeta[q];
  double lin = 0.0;
  for (std::size_t i = 0; i < mu.n; ++i) {
    const auto gi = lions_fd(phi, mu, i, step);
    for (std::size_t j = 0; j < mu.dim; ++j) lin += gi[j] * zeta[i * mu.dim + j];
  }
  lin /= static_cast<double>(mu.n);
  const double r = std::abs(phi(shifted) - phi(mu) - step * lin);
  require(std::isfinite(r), ErrorCode::StepTooSmall, "directional residual is not finite");
  return r;
}

}  // namespace mfbdsde
