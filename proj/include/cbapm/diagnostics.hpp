#pragma once

#include <cmath>
#include <map>
#include <stdexcept>
#include <string>
#include <vector>

#include "cbapm/linalg.hpp"
#include "cbapm/portfolio.hpp"
#include "cbapm/stats.hpp"

namespace cbapm {

/*
 Pricing-content diagnostics: pooled OLS over stacked firm-months with
 Driscoll-Kraay (Bartlett-kernel HAC) standard errors, factor-mimicking
 long-short construction per consensus dimension, per-asset time-series
 alpha regressions, and the finite-sample GRS F test.
*/

struct OlsResult {
  double intercept = 0.0;
  Vector coefficients;  // per regressor, intercept excluded
  double r2 = 0.0;
  double adj_r2 = 0.0;
  Vector residuals;
  Matrix design;  // intercept column first, then regressors (kept for HAC SEs)

  // filled by driscoll_kraay_se
  double se_intercept = 0.0;
  double t_intercept = 0.0;
  Vector std_errors;
  Vector t_stats;
  bool degenerate_se = false;  // zero residuals: t undefined

  // per-regressor approximation R^2 carried over from the evaluation
  // report when the regressors are model-inferred consensus estimates
  Vector approx_r2;
};

inline OlsResult pooled_ols(const Vector& y, const Matrix& regressors) {
  const auto n = y.size();
  if (regressors.rows() != n) throw std::invalid_argument("pooled_ols: row count mismatch");
  const auto k = regressors.cols() + 1;
  if (n <= k) throw std::invalid_argument("pooled_ols: more parameters than observations");

  Matrix X(n, k);
  X.col(0).setOnes();
  X.rightCols(regressors.cols()) = regressors;

  Eigen::ColPivHouseholderQR<Matrix> qr(X);
  qr.setThreshold(1e-10);
  if (qr.rank() < k) {
    // the trailing pivots name the collinear columns
    std::string cols;
    for (Eigen::Index i = qr.rank(); i < k; ++i) {
      Eigen::Index original = qr.colsPermutation().indices()(i);
      if (!cols.empty()) cols += ", ";
      cols += original == 0 ? "intercept" : "regressor " + std::to_string(original - 1);
    }
    throw std::invalid_argument("pooled_ols: rank-deficient design, collinear columns: " + cols);
  }

  Vector beta = qr.solve(y);
  OlsResult out;
  out.intercept = beta(0);
  out.coefficients = beta.tail(k - 1);
  out.residuals = y - X * beta;
  out.design = std::move(X);

  const double sse = out.residuals.squaredNorm();
  const double sst = (y.array() - y.mean()).square().sum();
  out.r2 = sst == 0.0 ? 0.0 : 1.0 - sse / sst;
  const auto p = static_cast<double>(k - 1);
  out.adj_r2 = 1.0 - (1.0 - out.r2) * (static_cast<double>(n) - 1.0) /
                         (static_cast<double>(n) - p - 1.0);
  return out;
}

// Driscoll-Kraay covariance: per-period cross-sectional score sums,
// Bartlett weights up to the bandwidth, and the T/(T-k) small-sample
// factor. With bandwidth 0 and one observation per period this is the
// (corrected) White estimator.
inline void driscoll_kraay_se(OlsResult& ols, const std::vector<int>& time_index,
                              int bandwidth = 11) {
  const Matrix& X = ols.design;
  const auto n = X.rows();
  const auto k = X.cols();
  if (static_cast<Eigen::Index>(time_index.size()) != n)
    throw std::invalid_argument("driscoll_kraay_se: time index length mismatch");
  if (bandwidth < 0) throw std::invalid_argument("driscoll_kraay_se: negative bandwidth");

  // per-period score sums h_t = sum_i x_it * resid_it, in time order
  std::map<int, Vector> scores;
  for (Eigen::Index i = 0; i < n; ++i) {
    auto [it, inserted] = scores.try_emplace(time_index[i], Vector::Zero(k));
    it->second += X.row(i).transpose() * ols.residuals(i);
  }
  const auto T = static_cast<Eigen::Index>(scores.size());
  if (T < bandwidth + 1)
    throw std::invalid_argument("driscoll_kraay_se: need more distinct periods than the bandwidth");
  std::vector<Vector> h;
  h.reserve(static_cast<std::size_t>(T));
  for (const auto& [t, v] : scores) h.push_back(v);

  Matrix S = Matrix::Zero(k, k);
  for (const auto& ht : h) S += ht * ht.transpose();
  for (int lag = 1; lag <= bandwidth; ++lag) {
    const double w = 1.0 - static_cast<double>(lag) / (bandwidth + 1.0);
    Matrix gamma = Matrix::Zero(k, k);
    for (std::size_t t = static_cast<std::size_t>(lag); t < h.size(); ++t)
      gamma += h[t] * h[t - static_cast<std::size_t>(lag)].transpose();
    S += w * (gamma + gamma.transpose());
  }

  Matrix xtx_inv = (X.transpose() * X).ldlt().solve(Matrix::Identity(k, k));
  const double adj = static_cast<double>(T) / (static_cast<double>(T) - static_cast<double>(k));
  Matrix cov = adj * xtx_inv * S * xtx_inv;

  Vector se = cov.diagonal().cwiseMax(0.0).cwiseSqrt();
  ols.se_intercept = se(0);
  ols.std_errors = se.tail(k - 1);
  ols.degenerate_se = se.maxCoeff() == 0.0;
  auto tstat = [&](double b, double s) {
    return s == 0.0 ? std::numeric_limits<double>::quiet_NaN() : b / s;
  };
  ols.t_intercept = tstat(ols.intercept, ols.se_intercept);
  ols.t_stats.resize(k - 1);
  for (Eigen::Index j = 0; j < k - 1; ++j)
    ols.t_stats(j) = tstat(ols.coefficients(j), ols.std_errors(j));
}

// --- Factor construction -------------------------------------------------------------

struct MonthlyCrossSection {
  Vector scores;
  Vector sizes;
  std::vector<std::string> ids;
  Vector realized;  // next-month realized returns
};

// Value-weighted top-minus-bottom decile spread per month; the same
// long-short construction used for the prediction-sorted portfolio.
struct FactorSeries {
  std::vector<double> returns;
  bool degenerate = false;  // constant scores in some month
};

inline FactorSeries factor_mimicking(const std::vector<MonthlyCrossSection>& months) {
  FactorSeries out;
  for (const auto& m : months) {
    if (m.scores.size() > 0 && m.scores.maxCoeff() == m.scores.minCoeff()) out.degenerate = true;
    out.returns.push_back(long_short_month(m.scores, m.sizes, m.ids, m.realized).spread);
  }
  return out;
}

// --- Time-series alpha regressions -----------------------------------------------------

struct TsAlphaResult {
  Vector alphas;     // N
  Matrix betas;      // N x K
  Matrix residuals;  // T x N
};

inline TsAlphaResult ts_alpha_regression(const Matrix& asset_returns, const Matrix& factors) {
  const auto T = asset_returns.rows();
  const auto N = asset_returns.cols();
  const auto K = factors.cols();
  if (factors.rows() != T) throw std::invalid_argument("ts_alpha_regression: month mismatch");
  if (T <= N + K)
    throw std::invalid_argument("ts_alpha_regression: need more months than assets plus factors");

  Matrix X(T, K + 1);
  X.col(0).setOnes();
  X.rightCols(K) = factors;
  Eigen::ColPivHouseholderQR<Matrix> qr(X);
  if (qr.rank() < K + 1)
    throw std::invalid_argument("ts_alpha_regression: collinear factors");

  TsAlphaResult out;
  out.alphas.resize(N);
  out.betas.resize(N, K);
  out.residuals.resize(T, N);
  for (Eigen::Index j = 0; j < N; ++j) {
    Vector beta = qr.solve(asset_returns.col(j));
    out.alphas(j) = beta(0);
    out.betas.row(j) = beta.tail(K).transpose();
    out.residuals.col(j) = asset_returns.col(j) - X * beta;
  }
  return out;
}

// --- GRS test ----------------------------------------------------------------------------

struct GrsResult {
  double f_stat = 0.0;
  double p_value = 1.0;
  double mean_abs_alpha_monthly = 0.0;
  double mean_abs_alpha_annualized = 0.0;
  double rms_alpha_monthly = 0.0;
  double rms_alpha_annualized = 0.0;
  int n_assets = 0;
  int k_factors = 0;
  int t_months = 0;
};

// Finite-sample GRS F statistic with MLE (divide by T) covariance
// estimates; p-value from the upper tail of F(N, T-N-K).
inline GrsResult grs_test(const Vector& alphas, const Matrix& residuals, const Matrix& factors) {
  const auto T = residuals.rows();
  const auto N = residuals.cols();
  const auto K = factors.cols();
  if (factors.rows() != T) throw std::invalid_argument("grs_test: month mismatch");
  if (alphas.size() != N) throw std::invalid_argument("grs_test: alpha count mismatch");
  if (T - N - K <= 0) throw std::invalid_argument("grs_test: T must exceed N + K");

  Matrix sigma = residuals.transpose() * residuals / static_cast<double>(T);
  Eigen::LDLT<Matrix> sigma_ldlt(sigma);
  Vector sigma_inv_alpha = sigma_ldlt.solve(alphas);
  const double quad_alpha = alphas.dot(sigma_inv_alpha);
  if (sigma_ldlt.info() != Eigen::Success || !std::isfinite(quad_alpha) || quad_alpha < 0.0)
    throw std::runtime_error(
        "grs_test: singular residual covariance; use fewer assets or a longer sample");
  // an exactly singular LDLT can still report success; validate by residual
  if ((sigma * sigma_inv_alpha - alphas).norm() > 1e-6 * std::max(1.0, alphas.norm()))
    throw std::runtime_error(
        "grs_test: singular residual covariance; use fewer assets or a longer sample");

  Vector mu = factors.colwise().mean();
  Matrix centered = factors.rowwise() - mu.transpose();
  Matrix omega = centered.transpose() * centered / static_cast<double>(T);
  const double quad_mu = mu.dot(omega.ldlt().solve(mu));

  GrsResult out;
  out.n_assets = static_cast<int>(N);
  out.k_factors = static_cast<int>(K);
  out.t_months = static_cast<int>(T);
  out.f_stat = (static_cast<double>(T - N - K) / static_cast<double>(N)) * quad_alpha /
               (1.0 + quad_mu);
  out.p_value = f_upper_tail(out.f_stat, static_cast<double>(N), static_cast<double>(T - N - K));
  out.mean_abs_alpha_monthly = alphas.cwiseAbs().mean();
  out.rms_alpha_monthly = std::sqrt(alphas.squaredNorm() / static_cast<double>(N));
  out.mean_abs_alpha_annualized = 12.0 * out.mean_abs_alpha_monthly;
  out.rms_alpha_annualized = 12.0 * out.rms_alpha_monthly;
  return out;
}

// Two-sided normal significance stars at the 10/5/1% levels.
inline std::string significance_stars(double t) {
  double a = std::abs(t);
  if (!(a >= 0.0)) return "";
  if (a >= 2.5758293035489004) return "***";
  if (a >= 1.959963984540054) return "**";
  if (a >= 1.6448536269514722) return "*";
  return "";
}

} // namespace cbapm
