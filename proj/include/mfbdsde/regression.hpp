#pragma once

#include <Eigen/Dense>
#include <cmath>
#include <cstddef>
#include <functional>
#include <string>
#include <vector>

#include "error.hpp"

namespace mfbdsde {

struct RegressionConfig {
  std::size_t degree = 3;
  double ridge = 1e-8;
  std::size_t min_factor = 16;  // particles per basis column, checked up front
};

namespace detail {

inline void exponents(std::size_t vars, std::size_t degree, std::vector<std::vector<std::size_t>>& out) {
  std::vector<std::size_t> e(vars, 0);
  // total degree <= degree, graded order
  for (std::size_t deg = 0; deg <= degree; ++deg) {
    std::function<void(std::size_t, std::size_t)> rec = [&](std::size_t pos, std::size_t left) {
      if (pos + 1 == vars) {
        e[pos] = left;
        out.push_back(e);
        return;
      }
      for (std::size_t a = left + 1; a-- > 0;) {
        e[pos] = a;
        rec(pos + 1, left - a);
      }
    };
    if (vars == 0) {
      if (deg == 0) out.emplace_back();
      continue;
    }
    rec(0, deg);
  }
}

inline std::size_t binom(std::size_t n, std::size_t k) {
  if (k > n) return 0;
  std::size_t r = 1;
  for (std::size_t i = 1; i <= k; ++i) r = r * (n - k + i) / i;
  return r;
}

}  // namespace detail

// largest basis the projector can build for (d, q tangent columns, degree), joint with d increments
inline std::size_t max_joint_columns(std::size_t d, std::size_t q, std::size_t degree) {
  std::size_t k = detail::binom(d + degree, degree);
  if (degree > 0) k += q * detail::binom(d + degree - 1, degree - 1);
  else k += q;
  return k * (1 + d);
}

// Joint least-squares projection of targets on [phi(X), phi(X) * dW_j / sqrt(dt)].
// The first block gives E[target | X], the others give Z_j = E[target dW_j | X] / dt.
class JointProjector {
 public:
  JointProjector(const double* states, std::size_t S, std::size_t d, const double* tangents, std::size_t q,
                 const double* dw, double dt, const RegressionConfig& cfg)
      : S_(S), d_(d), dt_(dt), ridge_(cfg.ridge) {
    const std::size_t need = cfg.min_factor * max_joint_columns(d, q, cfg.degree);
    require(S >= need, ErrorCode::RegressionSingular,
            "need at least " + std::to_string(need) + " samples for the regression basis, got " + std::to_string(S));
    build_basis(states, tangents, q, cfg.degree);
    const std::size_t K = phi_.cols();
    A_.resize(static_cast<Eigen::Index>(S), static_cast<Eigen::Index>(K * (1 + d)));
    A_.leftCols(K) = phi_;
    const double isd = 1.0 / std::sqrt(dt);
    for (std::size_t j = 0; j < d; ++j) {
      Eigen::VectorXd w(S);
      for (std::size_t s = 0; s < S; ++s) w[s] = dw[s * d + j] * isd;
      A_.middleCols(K * (1 + j), K) = phi_.array().colwise() * w.array();
    }
    Eigen::MatrixXd G = A_.transpose() * A_ / static_cast<double>(S);
    G.diagonal().array() += cfg.ridge;
    llt_.compute(G);
    require(llt_.info() == Eigen::Success && G.allFinite(), ErrorCode::RegressionSingular,
            "normal equations are not positive definite");
  }

  std::size_t basis_size() const { return static_cast<std::size_t>(phi_.cols()); }

  // targets: column-major S x M. y: S x M. z: [m][s][d] (may be null).
  void fit(const double* targets, std::size_t M, double* y, double* z) {
    Eigen::Map<const Eigen::MatrixXd> Tm(targets, static_cast<Eigen::Index>(S_), static_cast<Eigen::Index>(M));
    const Eigen::MatrixXd C = llt_.solve(A_.transpose() * Tm / static_cast<double>(S_));
    require(C.allFinite(), ErrorCode::RegressionSingular, "regression produced non-finite coefficients");
    const Eigen::Index K = phi_.cols();
    Eigen::Map<Eigen::MatrixXd> Ym(y, static_cast<Eigen::Index>(S_), static_cast<Eigen::Index>(M));
    Ym = phi_ * C.topRows(K);
    const double isd = 1.0 / std::sqrt(dt_);
    if (z) {
      for (std::size_t j = 0; j < d_; ++j) {
        const Eigen::MatrixXd Zj = phi_ * C.middleRows(K * static_cast<Eigen::Index>(1 + j), K) * isd;
        for (std::size_t m = 0; m < M; ++m)
          for (std::size_t s = 0; s < S_; ++s) z[(m * S_ + s) * d_ + j] = Zj(static_cast<Eigen::Index>(s), static_cast<Eigen::Index>(m));
      }
    }
    // error of the fitted values: sampling part from the residual variance plus the ridge bias
    const Eigen::MatrixXd res = Tm - A_ * C;
    const double var = res.squaredNorm() / static_cast<double>(S_ * M);
    const double samp = std::sqrt(var * static_cast<double>(A_.cols()) / static_cast<double>(S_));
    const Eigen::MatrixXd dC = ridge_ * llt_.solve(C);
    const double norm = 1.0 / std::sqrt(static_cast<double>(S_ * M));
    const double by = (phi_ * dC.topRows(K)).norm() * norm;
    double bz = 0.0;
    for (std::size_t j = 0; j < d_; ++j)
      bz += (phi_ * dC.middleRows(K * static_cast<Eigen::Index>(1 + j), K)).squaredNorm();
    bz = std::sqrt(bz) * norm * isd;
    last_samp_ = samp;
    last_bias_ = by;
    last_se_ = std::sqrt(samp * samp + by * by);
    last_se_z_ = std::sqrt(samp * samp * isd * isd * static_cast<double>(d_) + bz * bz);
  }

  double last_se() const { return last_se_; }
  double last_se_z() const { return last_se_z_; }
  double last_bias() const { return last_bias_; }
  double last_sampling() const { return last_samp_; }

 private:
  void build_basis(const double* states, const double* tangents, std::size_t q, std::size_t degree) {
    const std::size_t S = S_, d = d_;
    // standardize active state coordinates
    std::vector<std::size_t> active;
    std::vector<double> mean(d, 0.0), sd(d, 0.0);
    for (std::size_t j = 0; j < d; ++j) {
      for (std::size_t s = 0; s < S; ++s) mean[j] += states[s * d + j];
      mean[j] /= static_cast<double>(S);
      for (std::size_t s = 0; s < S; ++s) sd[j] += std::pow(states[s * d + j] - mean[j], 2);
      sd[j] = std::sqrt(sd[j] / static_cast<double>(S));
      if (sd[j] > 1e-10 * (1.0 + std::abs(mean[j]))) active.push_back(j);
    }
    std::vector<std::vector<std::size_t>> ex, ex_t;
    detail::exponents(active.size(), degree, ex);
    if (degree > 0) detail::exponents(active.size(), degree - 1, ex_t);
    else ex_t.emplace_back(active.size(), 0);

    std::vector<std::size_t> tang;
    std::vector<double> tmean(q, 0.0), trms(q, 0.0);
    for (std::size_t c = 0; c < q; ++c) {
      double m = 0.0, m2 = 0.0;
      for (std::size_t s = 0; s < S; ++s) {
        const double v = tangents[s * q + c];
        m += v;
        m2 += v * v;
      }
      m /= static_cast<double>(S);
      m2 /= static_cast<double>(S);
      const double var = std::max(0.0, m2 - m * m);
      trms[c] = std::sqrt(m2);
      // a constant tangent column only duplicates the pure basis
      if (trms[c] > 0.0 && std::sqrt(var) > 1e-10 * trms[c]) tang.push_back(c);
    }

    const std::size_t K = ex.size() + tang.size() * ex_t.size();
    phi_.resize(static_cast<Eigen::Index>(S), static_cast<Eigen::Index>(K));
    std::vector<double> u(active.size());
    for (std::size_t s = 0; s < S; ++s) {
      for (std::size_t a = 0; a < active.size(); ++a) {
        const std::size_t j = active[a];
        u[a] = (states[s * d + j] - mean[j]) / sd[j];
      }
      auto mono = [&](const std::vector<std::size_t>& e) {
        double v = 1.0;
        for (std::size_t a = 0; a < e.size(); ++a)
          for (std::size_t p = 0; p < e[a]; ++p) v *= u[a];
        return v;
      };
      std::size_t col = 0;
      for (const auto& e : ex) phi_(static_cast<Eigen::Index>(s), static_cast<Eigen::Index>(col++)) = mono(e);
      for (std::size_t c : tang) {
        const double tv = tangents[s * q + c] / trms[c];
        for (const auto& e : ex_t) phi_(static_cast<Eigen::Index>(s), static_cast<Eigen::Index>(col++)) = tv * mono(e);
      }
    }
  }

  std::size_t S_, d_;
  double dt_;
  Eigen::MatrixXd phi_, A_;
  Eigen::LLT<Eigen::MatrixXd> llt_;
  double last_se_ = 0.0, last_se_z_ = 0.0, last_bias_ = 0.0, last_samp_ = 0.0;
  double ridge_ = 0.0;
};

}  // namespace mfbdsde
