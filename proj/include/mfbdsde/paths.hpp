#pragma once

#include <cmath>
#include <cstddef>
#include <cstdint>
#include <span>
#include <vector>

#include "error.hpp"
#include "parallel.hpp"
#include "rng.hpp"

namespace mfbdsde {

struct TimeGrid {
  double t0 = 0.0;
  double T = 1.0;
  std::vector<double> nodes;
  std::vector<double> steps;
  // absolute index of the first step in the grid this one was cut from
  std::size_t offset = 0;

  std::size_t n() const { return steps.size(); }

  TimeGrid tail(std::size_t k) const {
    require(k < n(), ErrorCode::InvalidArgument, "tail node must be before T");
    TimeGrid g;
    g.t0 = nodes[k];
    g.T = T;
    g.nodes.assign(nodes.begin() + static_cast<std::ptrdiff_t>(k), nodes.end());
    g.steps.assign(steps.begin() + static_cast<std::ptrdiff_t>(k), steps.end());
    g.offset = offset + k;
    return g;
  }

  // index of the node equal to s, or npos
  std::size_t find_node(double s, double tol = 1e-12) const {
    for (std::size_t k = 0; k < nodes.size(); ++k)
      if (std::abs(nodes[k] - s) <= tol * std::max(1.0, std::abs(s))) return k;
    return npos;
  }
  static constexpr std::size_t npos = static_cast<std::size_t>(-1);
};

inline TimeGrid make_grid(double t, double T, std::size_t n) {
  require(T > t, ErrorCode::NonpositiveHorizon, "need t < T");
  require(n > 0, ErrorCode::ZeroSteps, "need at least one step");
  TimeGrid g;
  g.t0 = t;
  g.T = T;
  g.nodes.resize(n + 1);
  g.steps.resize(n);
  const double h = (T - t) / static_cast<double>(n);
  for (std::size_t k = 0; k <= n; ++k) g.nodes[k] = t + static_cast<double>(k) * h;
  g.nodes[n] = T;
  for (std::size_t k = 0; k < n; ++k) g.steps[k] = h;
  return g;
}

struct PathBundle {
  TimeGrid grid;
  std::size_t d = 1, l = 1;
  std::size_t n_particles = 0, n_bpaths = 0, n_pilots = 0;
  Seed seed;
  std::vector<double> w_increments;      // [particle][step][d]
  std::vector<double> b_increments;      // [bpath][step][l]
  std::vector<double> pilot_increments;  // [pilot][step][d]
  std::vector<double> aux_increments;    // [pilot][step][d], independent pilots (y-pilots)

  std::size_t n() const { return grid.n(); }
  double w(std::size_t i, std::size_t k, std::size_t j) const { return w_increments[(i * n() + k) * d + j]; }
  double b(std::size_t m, std::size_t k, std::size_t j) const { return b_increments[(m * n() + k) * l + j]; }
  double pilot_w(std::size_t p, std::size_t k, std::size_t j) const {
    return pilot_increments[(p * n() + k) * d + j];
  }
  double aux_w(std::size_t p, std::size_t k, std::size_t j) const { return aux_increments[(p * n() + k) * d + j]; }
  const double* w_ptr(Role r, std::size_t i, std::size_t k) const {
    switch (r) {
      case Role::pilot_w: return &pilot_increments[(i * n() + k) * d];
      case Role::aux_w: return &aux_increments[(i * n() + k) * d];
      default: return &w_increments[(i * n() + k) * d];
    }
  }

  // B_T - B_{t_k} on path m, coordinate j
  double b_tail(std::size_t m, std::size_t k, std::size_t j = 0) const {
    double s = 0.0;
    for (std::size_t q = n(); q-- > k;) s += b(m, q, j);
    return s;
  }

  PathBundle tail(std::size_t k) const {
    PathBundle out;
    out.grid = grid.tail(k);
    out.d = d;
    out.l = l;
    out.n_particles = n_particles;
    out.n_bpaths = n_bpaths;
    out.n_pilots = n_pilots;
    out.seed = seed;
    const std::size_t n0 = n(), n1 = out.n();
    auto cut = [&](const std::vector<double>& src, std::size_t rows, std::size_t width) {
      std::vector<double> dst(rows * n1 * width);
      for (std::size_t r = 0; r < rows; ++r)
        for (std::size_t q = 0; q < n1; ++q)
          for (std::size_t j = 0; j < width; ++j) dst[(r * n1 + q) * width + j] = src[(r * n0 + q + k) * width + j];
      return dst;
    };
    out.w_increments = cut(w_increments, n_particles, d);
    out.b_increments = cut(b_increments, n_bpaths, l);
    out.pilot_increments = cut(pilot_increments, n_pilots, d);
    out.aux_increments = cut(aux_increments, n_pilots, d);
    return out;
  }

  // every `factor` consecutive increments summed; the coarse grid keeps every factor-th node
  PathBundle coarsen(std::size_t factor) const {
    require(factor >= 1 && n() % factor == 0, ErrorCode::InvalidArgument, "coarsening factor must divide the steps");
    PathBundle out = *this;
    const std::size_t n0 = n(), n1 = n0 / factor;
    out.grid.nodes.clear();
    out.grid.steps.clear();
    for (std::size_t q = 0; q <= n1; ++q) out.grid.nodes.push_back(grid.nodes[q * factor]);
    for (std::size_t q = 0; q < n1; ++q) {
      double h = 0.0;
      for (std::size_t r = 0; r < factor; ++r) h += grid.steps[q * factor + r];
      out.grid.steps.push_back(h);
    }
    out.grid.offset = grid.offset / factor;
    auto sum = [&](const std::vector<double>& src, std::size_t rows, std::size_t width) {
      std::vector<double> dst(rows * n1 * width, 0.0);
      for (std::size_t r = 0; r < rows; ++r)
        for (std::size_t q = 0; q < n0; ++q)
          for (std::size_t j = 0; j < width; ++j) dst[(r * n1 + q / factor) * width + j] += src[(r * n0 + q) * width + j];
      return dst;
    };
    out.w_increments = sum(w_increments, n_particles, d);
    out.b_increments = sum(b_increments, n_bpaths, l);
    out.pilot_increments = sum(pilot_increments, n_pilots, d);
    out.aux_increments = sum(aux_increments, n_pilots, d);
    return out;
  }
};

inline PathBundle sample_paths(const TimeGrid& grid, std::size_t d, std::size_t l, std::size_t n_particles,
                               std::size_t n_bpaths, Seed seed, std::size_t n_pilots = 0) {
  require(d >= 1 && l >= 1, ErrorCode::InvalidArgument, "dimensions must be positive");
  require(n_particles >= 1 && n_bpaths >= 1, ErrorCode::InvalidArgument, "counts must be positive");
  if (n_pilots == 0) n_pilots = n_particles;
  PathBundle pb;
  pb.grid = grid;
  pb.d = d;
  pb.l = l;
  pb.n_particles = n_particles;
  pb.n_bpaths = n_bpaths;
  pb.n_pilots = n_pilots;
  pb.seed = seed;
  const std::size_t n = grid.n();
  auto fill = [&](std::vector<double>& dst, std::size_t rows, std::size_t width, Role role) {
    dst.resize(rows * n * width);
    parallel_for(rows, [&](std::size_t r) {
      for (std::size_t k = 0; k < n; ++k) {
        const double sd = std::sqrt(grid.steps[k]);
        for (std::size_t j = 0; j < width; ++j)
          dst[(r * n + k) * width + j] = sd * normal(seed, role, r, grid.offset + k, j);
      }
    });
  };
  fill(pb.w_increments, n_particles, d, Role::law_w);
  fill(pb.b_increments, n_bpaths, l, Role::b);
  fill(pb.pilot_increments, n_pilots, d, Role::pilot_w);
  fill(pb.aux_increments, n_pilots, d, Role::aux_w);
  return pb;
}

// values over nodes (n+1) or steps (n); increments over steps
inline double forward_ito_sum(std::span<const double> values, std::span<const double> increments) {
  const std::size_t n = increments.size();
  require(values.size() == n || values.size() == n + 1, ErrorCode::LengthMismatch,
          "forward_ito_sum: values and increments are not aligned");
  double s = 0.0;
  for (std::size_t k = 0; k < n; ++k) s += values[k] * increments[k];
  return s;
}

// values over nodes (n+1); right endpoint
inline double backward_ito_sum(std::span<const double> values, std::span<const double> increments) {
  const std::size_t n = increments.size();
  require(values.size() == n + 1, ErrorCode::LengthMismatch,
          "backward_ito_sum: values must have one more entry than increments");
  double s = 0.0;
  for (std::size_t k = 0; k < n; ++k) s += values[k + 1] * increments[k];
  return s;
}

// vector-valued integrands: values [len][q], increments [n][q], inner product per step
inline double forward_ito_sum(std::span<const double> values, std::span<const double> increments, std::size_t q) {
  require(q > 0 && increments.size() % q == 0 && values.size() % q == 0, ErrorCode::LengthMismatch,
          "forward_ito_sum: width does not divide lengths");
  const std::size_t n = increments.size() / q;
  require(values.size() / q == n || values.size() / q == n + 1, ErrorCode::LengthMismatch,
          "forward_ito_sum: values and increments are not aligned");
  double s = 0.0;
  for (std::size_t k = 0; k < n; ++k)
    for (std::size_t j = 0; j < q; ++j) s += values[k * q + j] * increments[k * q + j];
  return s;
}

inline double backward_ito_sum(std::span<const double> values, std::span<const double> increments, std::size_t q) {
  require(q > 0 && increments.size() % q == 0 && values.size() % q == 0, ErrorCode::LengthMismatch,
          "backward_ito_sum: width does not divide lengths");
  const std::size_t n = increments.size() / q;
  require(values.size() / q == n + 1, ErrorCode::LengthMismatch,
          "backward_ito_sum: values must have one more node than increments");
  double s = 0.0;
  for (std::size_t k = 0; k < n; ++k)
    for (std::size_t j = 0; j < q; ++j) s += values[(k + 1) * q + j] * increments[k * q + j];
  return s;
}

}  // namespace mfbdsde
