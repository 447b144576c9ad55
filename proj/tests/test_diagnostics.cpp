#include <catch2/catch_amalgamated.hpp>

#include <numeric>

#include "cbapm/diagnostics.hpp"
#include "cbapm/rng.hpp"
#include "test_support.hpp"

using namespace cbapm;
using Catch::Approx;
using test_support::random_matrix;
using test_support::random_vector;

TEST_CASE("incomplete beta matches quadrature") {
  // oracle: Simpson integration of the beta density
  auto simpson = [](double a, double b, double x) {
    const int n = 20000;  // even
    const double h = x / n;
    auto f = [&](double t) { return std::pow(t, a - 1.0) * std::pow(1.0 - t, b - 1.0); };
    double acc = f(1e-300) + f(x);
    for (int i = 1; i < n; ++i) acc += f(i * h) * (i % 2 ? 4.0 : 2.0);
    double integral = acc * h / 3.0;
    double lbeta = std::lgamma(a) + std::lgamma(b) - std::lgamma(a + b);
    return integral / std::exp(lbeta);
  };
  for (auto [a, b, x] : {std::tuple{2.5, 3.5, 0.3}, {5.0, 2.0, 0.7}, {1.5, 1.5, 0.5},
                         {12.0, 4.0, 0.85}, {3.0, 10.0, 0.12}}) {
    REQUIRE(incomplete_beta(a, b, x) == Approx(simpson(a, b, x)).margin(1e-8));
  }
  REQUIRE(incomplete_beta(2.0, 3.0, 0.0) == 0.0);
  REQUIRE(incomplete_beta(2.0, 3.0, 1.0) == 1.0);

  // F distribution: complement identity holds
  REQUIRE(f_cdf(1.7, 4, 30) + f_upper_tail(1.7, 4, 30) == Approx(1.0).margin(1e-12));
  REQUIRE(f_upper_tail(0.0, 5, 50) == 1.0);
}

TEST_CASE("spearman rank correlation") {
  Vector a(5), b(5);
  a << 1, 2, 3, 4, 5;
  b << 2, 4, 6, 8, 10;
  REQUIRE(spearman_rho(a, b) == Approx(1.0));
  Vector c(5);
  c << 5, 4, 3, 2, 1;
  REQUIRE(spearman_rho(a, c) == Approx(-1.0));
  // one adjacent swap in a 10-element ranking stays above 0.9
  Vector d(10), e(10);
  for (int i = 0; i < 10; ++i) {
    d(i) = i;
    e(i) = i;
  }
  std::swap(e(4), e(5));
  REQUIRE(spearman_rho(d, e) > 0.9);
}

TEST_CASE("pooled OLS") {
  Rng rng(100);
  SECTION("exact affine relationship gives zero residuals and unit adjusted R2") {
    Matrix X = random_matrix(60, 3, rng);
    Vector beta(3);
    beta << 0.5, -1.2, 2.0;
    Vector y = (X * beta).array() + 0.75;
    OlsResult res = pooled_ols(y, X);
    REQUIRE(res.residuals.cwiseAbs().maxCoeff() < 1e-10);
    REQUIRE(res.adj_r2 == Approx(1.0).margin(1e-10));
    REQUIRE(res.intercept == Approx(0.75).margin(1e-10));
  }
  SECTION("orthonormal design recovers coefficients exactly") {
    // columns orthogonal to each other and to the intercept
    Matrix X(4, 2);
    X << 1, 1, 1, -1, -1, 1, -1, -1;
    X *= 0.5;
    Vector y = 2.0 * X.col(0);
    OlsResult res = pooled_ols(y, X);
    REQUIRE(res.coefficients(0) == Approx(2.0).margin(1e-14));
    REQUIRE(res.coefficients(1) == Approx(0.0).margin(1e-14));
  }
  SECTION("random case matches the explicit normal-equations oracle") {
    Matrix X = random_matrix(80, 4, rng);
    Vector y = random_vector(80, rng);
    OlsResult res = pooled_ols(y, X);
    Matrix Xi(80, 5);
    Xi.col(0).setOnes();
    Xi.rightCols(4) = X;
    Vector oracle = (Xi.transpose() * Xi).inverse() * Xi.transpose() * y;
    REQUIRE(std::abs(res.intercept - oracle(0)) < 1e-8);
    for (int j = 0; j < 4; ++j) REQUIRE(std::abs(res.coefficients(j) - oracle(j + 1)) < 1e-8);
    // residuals orthogonal to every regressor
    Vector xr = Xi.transpose() * res.residuals;
    REQUIRE(xr.cwiseAbs().maxCoeff() <= 1e-8 * y.norm());
  }
  SECTION("rank-deficient design names the collinear columns") {
    Matrix X = random_matrix(50, 3, rng);
    X.col(2) = 2.0 * X.col(0);
    REQUIRE_THROWS_WITH(pooled_ols(random_vector(50, rng), X),
                        Catch::Matchers::ContainsSubstring("collinear"));
  }
}

TEST_CASE("Driscoll-Kraay standard errors") {
  Rng rng(200);
  SECTION("bandwidth 0 with one firm equals the corrected White estimator") {
    const int T = 20;
    Matrix X = random_matrix(T, 2, rng);
    Vector y = random_vector(T, rng);
    OlsResult res = pooled_ols(y, X);
    std::vector<int> months(T);
    std::iota(months.begin(), months.end(), 0);
    driscoll_kraay_se(res, months, 0);

    // direct White oracle with the same T/(T-k) correction
    Matrix Xi = res.design;
    Matrix meat = Matrix::Zero(3, 3);
    for (int i = 0; i < T; ++i)
      meat += Xi.row(i).transpose() * Xi.row(i) * res.residuals(i) * res.residuals(i);
    Matrix bread = (Xi.transpose() * Xi).inverse();
    Matrix cov = (double(T) / double(T - 3)) * bread * meat * bread;
    REQUIRE(res.se_intercept == Approx(std::sqrt(cov(0, 0))).epsilon(1e-12));
    for (int j = 0; j < 2; ++j)
      REQUIRE(res.std_errors(j) == Approx(std::sqrt(cov(j + 1, j + 1))).epsilon(1e-12));
  }
  SECTION("iid residuals, large T: close to classical OLS standard errors") {
    const int T = 3000;
    Matrix X = random_matrix(T, 2, rng);
    Vector noise = random_vector(T, rng);
    Vector y = X.col(0) - 0.5 * X.col(1) + noise;
    OlsResult res = pooled_ols(y, X);
    std::vector<int> months(T);
    std::iota(months.begin(), months.end(), 0);
    driscoll_kraay_se(res, months, 11);
    Matrix Xi = res.design;
    double s2 = res.residuals.squaredNorm() / double(T - 3);
    Matrix classical = s2 * (Xi.transpose() * Xi).inverse();
    for (int j = 0; j < 2; ++j)
      REQUIRE(res.std_errors(j) == Approx(std::sqrt(classical(j + 1, j + 1))).epsilon(0.15));
  }
  SECTION("random pooled panel matches the explicit sandwich oracle") {
    const int T = 30, N = 8, L = 5;
    Matrix X(T * N, 2);
    Vector y(T * N);
    std::vector<int> months(T * N);
    for (int t = 0; t < T; ++t)
      for (int i = 0; i < N; ++i) {
        int row = t * N + i;
        X(row, 0) = rng.normal();
        X(row, 1) = rng.normal();
        y(row) = 0.3 * X(row, 0) + rng.normal();
        months[static_cast<std::size_t>(row)] = t;
      }
    OlsResult res = pooled_ols(y, X);
    driscoll_kraay_se(res, months, L);

    // hand-expanded sandwich: score sums, Bartlett weights, T/(T-k)
    Matrix Xi = res.design;
    std::vector<Vector> h(T, Vector::Zero(3));
    for (int row = 0; row < T * N; ++row)
      h[static_cast<std::size_t>(months[static_cast<std::size_t>(row)])] +=
          Xi.row(row).transpose() * res.residuals(row);
    Matrix S = Matrix::Zero(3, 3);
    for (const auto& ht : h) S += ht * ht.transpose();
    for (int lag = 1; lag <= L; ++lag) {
      Matrix g = Matrix::Zero(3, 3);
      for (int t = lag; t < T; ++t)
        g += h[static_cast<std::size_t>(t)] * h[static_cast<std::size_t>(t - lag)].transpose();
      S += (1.0 - double(lag) / double(L + 1)) * (g + g.transpose());
    }
    Matrix bread = (Xi.transpose() * Xi).inverse();
    Matrix cov = (double(T) / double(T - 3)) * bread * S * bread;
    REQUIRE(res.se_intercept == Approx(std::sqrt(cov(0, 0))).margin(1e-8));
    for (int j = 0; j < 2; ++j)
      REQUIRE(res.std_errors(j) == Approx(std::sqrt(cov(j + 1, j + 1))).margin(1e-8));
  }
  SECTION("zero residuals give zero SEs and undefined t, flagged") {
    Matrix X = random_matrix(30, 1, rng);
    Vector y = 2.0 * X.col(0);
    OlsResult res = pooled_ols(y, X);
    std::vector<int> months(30);
    std::iota(months.begin(), months.end(), 0);
    driscoll_kraay_se(res, months, 2);
    REQUIRE(res.degenerate_se);
    REQUIRE(res.std_errors(0) == Approx(0.0).margin(1e-12));
    REQUIRE(std::isnan(res.t_stats(0)));
  }
  SECTION("fewer distinct periods than the bandwidth is an error") {
    Matrix X = random_matrix(12, 1, rng);
    Vector y = random_vector(12, rng);
    OlsResult res = pooled_ols(y, X);
    std::vector<int> months(12, 0);
    for (int i = 0; i < 12; ++i) months[static_cast<std::size_t>(i)] = i % 4;
    REQUIRE_THROWS_AS(driscoll_kraay_se(res, months, 11), std::invalid_argument);
  }
}

TEST_CASE("time-series alpha regressions") {
  Rng rng(300);
  const int T = 120, K = 3;
  Matrix factors = random_matrix(T, K, rng);

  SECTION("an exact factor combination has zero alpha") {
    Matrix assets(T, 2);
    assets.col(0) = factors * Vector(Vector::LinSpaced(K, 0.5, 1.5));
    assets.col(1) = factors.col(1);
    TsAlphaResult res = ts_alpha_regression(assets, factors);
    REQUIRE(res.alphas.cwiseAbs().maxCoeff() < 1e-12);
    REQUIRE(res.residuals.cwiseAbs().maxCoeff() < 1e-10);
    REQUIRE(res.betas(1, 1) == Approx(1.0).margin(1e-12));
  }
  SECTION("a constant shift lands in the alpha") {
    Matrix assets(T, 1);
    assets.col(0) = factors.col(0).array() + 0.004;
    TsAlphaResult res = ts_alpha_regression(assets, factors);
    REQUIRE(res.alphas(0) == Approx(0.004).margin(1e-12));
  }
  SECTION("random case matches the normal-equations oracle") {
    Matrix assets = random_matrix(T, 4, rng);
    TsAlphaResult res = ts_alpha_regression(assets, factors);
    Matrix Xi(T, K + 1);
    Xi.col(0).setOnes();
    Xi.rightCols(K) = factors;
    Matrix pinv = (Xi.transpose() * Xi).inverse() * Xi.transpose();
    for (int j = 0; j < 4; ++j) {
      Vector beta = pinv * assets.col(j);
      REQUIRE(res.alphas(j) == Approx(beta(0)).margin(1e-8));
    }
  }
  SECTION("T <= N + K is rejected") {
    Matrix assets = random_matrix(T, T - K, rng);
    REQUIRE_THROWS_AS(ts_alpha_regression(assets, factors), std::invalid_argument);
  }
}

TEST_CASE("GRS test") {
  Rng rng(400);
  const int T = 240, N = 10, K = 3;

  auto simulate = [&](Rng& r, double alpha_shift) {
    Matrix factors(T, K);
    for (int t = 0; t < T; ++t)
      for (int k = 0; k < K; ++k) factors(t, k) = 0.005 + 0.04 * r.normal();
    Matrix betas = random_matrix(N, K, r);
    Matrix returns(T, N);
    for (int t = 0; t < T; ++t)
      for (int i = 0; i < N; ++i)
        returns(t, i) = alpha_shift + betas.row(i).dot(factors.row(t)) + 0.02 * r.normal();
    return std::pair{returns, factors};
  };

  SECTION("all-zero alphas give F = 0 and p = 1") {
    auto [returns, factors] = simulate(rng, 0.0);
    TsAlphaResult ts = ts_alpha_regression(returns, factors);
    GrsResult grs = grs_test(Vector::Zero(N), ts.residuals, factors);
    REQUIRE(grs.f_stat == 0.0);
    REQUIRE(grs.p_value == 1.0);
  }
  SECTION("single asset, single factor matches the closed form") {
    Matrix factors(T, 1), returns(T, 1);
    for (int t = 0; t < T; ++t) {
      factors(t, 0) = 0.004 + 0.03 * rng.normal();
      returns(t, 0) = 0.002 + 1.2 * factors(t, 0) + 0.01 * rng.normal();
    }
    TsAlphaResult ts = ts_alpha_regression(returns, factors);
    GrsResult grs = grs_test(ts.alphas, ts.residuals, factors);
    double sigma2 = ts.residuals.col(0).squaredNorm() / double(T);
    double mu = factors.col(0).mean();
    double omega = (factors.col(0).array() - mu).square().sum() / double(T);
    double f_oracle = double(T - 2) * ts.alphas(0) * ts.alphas(0) / sigma2 / (1.0 + mu * mu / omega);
    REQUIRE(grs.f_stat == Approx(f_oracle).epsilon(1e-10));
  }
  SECTION("F is invariant to positive factor rescaling") {
    auto [returns, factors] = simulate(rng, 0.001);
    TsAlphaResult ts = ts_alpha_regression(returns, factors);
    GrsResult base = grs_test(ts.alphas, ts.residuals, factors);
    Matrix scaled = factors;
    scaled.col(1) *= 7.5;
    TsAlphaResult ts2 = ts_alpha_regression(returns, scaled);
    GrsResult other = grs_test(ts2.alphas, ts2.residuals, scaled);
    REQUIRE(std::abs(base.f_stat - other.f_stat) < 1e-10 * std::max(1.0, base.f_stat));
    REQUIRE(base.mean_abs_alpha_monthly == Approx(other.mean_abs_alpha_monthly).margin(1e-12));
  }
  SECTION("pricing errors satisfy the norm inequalities and x12 annualization") {
    auto [returns, factors] = simulate(rng, 0.002);
    TsAlphaResult ts = ts_alpha_regression(returns, factors);
    GrsResult grs = grs_test(ts.alphas, ts.residuals, factors);
    REQUIRE(grs.mean_abs_alpha_monthly <= grs.rms_alpha_monthly + 1e-15);
    REQUIRE(grs.rms_alpha_monthly <= ts.alphas.cwiseAbs().maxCoeff() + 1e-15);
    REQUIRE(grs.mean_abs_alpha_annualized == Approx(12.0 * grs.mean_abs_alpha_monthly));
    REQUIRE(grs.rms_alpha_annualized == Approx(12.0 * grs.rms_alpha_monthly));
  }
  SECTION("Monte Carlo size under the null is near the nominal level") {
    int rejections = 0;
    const int n_sims = 200;
    for (int s = 0; s < n_sims; ++s) {
      Rng r(derive_seed(42, {static_cast<std::uint64_t>(s)}));
      auto [returns, factors] = simulate(r, 0.0);
      TsAlphaResult ts = ts_alpha_regression(returns, factors);
      GrsResult grs = grs_test(ts.alphas, ts.residuals, factors);
      if (grs.p_value < 0.05) ++rejections;
    }
    double rate = double(rejections) / n_sims;
    REQUIRE(rate >= 0.01);
    REQUIRE(rate <= 0.10);
  }
  SECTION("singular residual covariance is reported") {
    auto [returns, factors] = simulate(rng, 0.0);
    Matrix residuals = Matrix::Zero(T, N);  // identically zero: singular
    REQUIRE_THROWS_WITH(grs_test(Vector::Ones(N) * 0.01, residuals, factors),
                        Catch::Matchers::ContainsSubstring("singular"));
  }
}

TEST_CASE("factor mimicking reuses the long-short construction") {
  Rng rng(500);
  std::vector<MonthlyCrossSection> months;
  for (int m = 0; m < 6; ++m) {
    MonthlyCrossSection cs;
    cs.scores = random_vector(30, rng);
    cs.sizes = random_vector(30, rng).array().abs() + 0.1;
    cs.realized = random_vector(30, rng) * 0.05;
    char buf[8];
    for (int i = 0; i < 30; ++i) {
      std::snprintf(buf, sizeof(buf), "F%03d", i);
      cs.ids.emplace_back(buf);
    }
    months.push_back(std::move(cs));
  }
  FactorSeries series = factor_mimicking(months);
  REQUIRE(series.returns.size() == 6);
  REQUIRE_FALSE(series.degenerate);
  for (std::size_t m = 0; m < 6; ++m) {
    LongShortMonth ls =
        long_short_month(months[m].scores, months[m].sizes, months[m].ids, months[m].realized);
    REQUIRE(series.returns[m] == ls.spread);
  }

  // perfect-foresight sanity: scores equal to realized returns give a
  // positive top-minus-bottom spread
  std::vector<MonthlyCrossSection> foresight = months;
  for (auto& cs : foresight) cs.scores = cs.realized;
  for (double r : factor_mimicking(foresight).returns) REQUIRE(r > 0.0);

  // constant scores raise the degenerate flag
  std::vector<MonthlyCrossSection> flat = months;
  flat[0].scores.setConstant(1.0);
  REQUIRE(factor_mimicking(flat).degenerate);
}

TEST_CASE("significance stars") {
  REQUIRE(significance_stars(3.0) == "***");
  REQUIRE(significance_stars(-2.0) == "**");
  REQUIRE(significance_stars(1.7) == "*");
  REQUIRE(significance_stars(0.5) == "");
  REQUIRE(significance_stars(std::numeric_limits<double>::quiet_NaN()) == "");
}
