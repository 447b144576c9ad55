#include <catch2/catch_amalgamated.hpp>

#include <numeric>

#include "cbapm/rng.hpp"
#include "cbapm/windows.hpp"
#include "test_support.hpp"

using namespace cbapm;
using Catch::Approx;

TEST_CASE("make_windows default schedule covers test years 2013..2022") {
  auto windows = make_windows(parse_month("2010-12"), parse_month("2023-12"));
  REQUIRE(windows.size() == 10);
  REQUIRE(windows.front().train.first == parse_month("1994-01"));
  for (std::size_t k = 0; k < windows.size(); ++k) {
    const auto& w = windows[k];
    // hand enumeration: train end grows one year per step, val spans 2y,
    // test spans the single following year
    REQUIRE(w.train.last == parse_month("2010-12") + 12 * static_cast<int>(k));
    REQUIRE(w.val.first == w.train.last + 1);
    REQUIRE(w.val.length() == 24);
    REQUIRE(w.test.first == w.val.last + 1);
    REQUIRE(w.test.length() == 12);
    REQUIRE(format_month(w.test.first) == std::to_string(2013 + k) + "-01");
    REQUIRE(format_month(w.test.last) == std::to_string(2013 + k) + "-12");
  }
  // the reserved final year is never tested
  REQUIRE(windows.back().test.last + 12 <= parse_month("2023-12"));
}

TEST_CASE("make_windows respects the return-construction reservation") {
  // data through 2016-12: the 2016 test year would need 2017 returns, so
  // the schedule stops after the 2015 test year
  auto windows = make_windows(parse_month("2010-12"), parse_month("2016-12"));
  REQUIRE(windows.size() == 3);
  REQUIRE(format_month(windows[0].test.first) == "2013-01");
  REQUIRE(format_month(windows[1].test.first) == "2014-01");
  REQUIRE(format_month(windows[2].test.first) == "2015-01");
}

TEST_CASE("make_windows test ranges never overlap") {
  auto windows = make_windows(parse_month("2010-12"), parse_month("2023-12"));
  for (std::size_t i = 1; i < windows.size(); ++i)
    REQUIRE(windows[i].test.first > windows[i - 1].test.last);
}

TEST_CASE("make_windows reports the shortfall when data is too short") {
  REQUIRE_THROWS_WITH(make_windows(parse_month("2010-12"), parse_month("2012-06")),
                      Catch::Matchers::ContainsSubstring("more months"));
}

TEST_CASE("out-of-sample R2") {
  Vector realized(2), pred(2);
  realized << 0.1, -0.1;

  // perfect predictions
  REQUIRE(oos_r2(realized, realized) == 100.0);

  // zero forecast benchmark: numerator equals denominator
  REQUIRE(oos_r2(Vector::Zero(2), realized) == Approx(0.0).margin(1e-12));

  // worked example: 1 - (0.0025+0.0025)/(0.01+0.01)
  pred << 0.05, -0.05;
  REQUIRE(oos_r2(pred, realized) == Approx(75.0).margin(1e-12));

  // negative R2 when predictions are worse than the zero forecast
  REQUIRE(oos_r2(Vector(-realized), realized) == Approx(-300.0).margin(1e-12));

  REQUIRE_THROWS_AS(oos_r2(Vector::Zero(3), Vector::Zero(3)), std::invalid_argument);
}

TEST_CASE("consensus R2 averages the nine variables") {
  Matrix realized(9, 4);
  realized.setRandom();
  Matrix pred = realized;
  ConsensusR2 perfect = oos_r2_consensus(pred, realized);
  REQUIRE(perfect.average == Approx(100.0));

  // one variable at 0%, eight at 100%
  pred.row(0).setZero();
  ConsensusR2 mixed = oos_r2_consensus(pred, realized);
  REQUIRE(mixed.per_variable(0) == Approx(0.0).margin(1e-12));
  REQUIRE(mixed.average == Approx(800.0 / 9.0).margin(1e-9));
}

TEST_CASE("pooled R2 equals the count-weighted combination of window sums") {
  Rng rng(88);
  R2Accumulator pooled;
  double total_sse = 0, total_denom = 0;
  Vector all_pred(30), all_real(30);
  Eigen::Index pos = 0;
  for (int w = 0; w < 3; ++w) {
    Vector pred = test_support::random_vector(10, rng);
    Vector real = test_support::random_vector(10, rng);
    pooled.add(pred, real);
    total_sse += (real - pred).squaredNorm();
    total_denom += real.squaredNorm();
    all_pred.segment(pos, 10) = pred;
    all_real.segment(pos, 10) = real;
    pos += 10;
  }
  REQUIRE(pooled.r2_pct() == Approx(100.0 * (1.0 - total_sse / total_denom)).margin(1e-12));
  // identical to evaluating the concatenated series directly
  REQUIRE(pooled.r2_pct() == Approx(oos_r2(all_pred, all_real)).margin(1e-12));
}

TEST_CASE("R2 is invariant to observation order") {
  Rng rng(17);
  Vector pred = test_support::random_vector(50, rng);
  Vector real = test_support::random_vector(50, rng);
  double base = oos_r2(pred, real);
  std::vector<Eigen::Index> perm(50);
  std::iota(perm.begin(), perm.end(), 0);
  for (std::size_t i = perm.size(); i > 1; --i)
    std::swap(perm[i - 1], perm[static_cast<std::size_t>(rng.uniform() * double(i))]);
  Vector pp(50), rr(50);
  for (Eigen::Index i = 0; i < 50; ++i) {
    pp(i) = pred(perm[static_cast<std::size_t>(i)]);
    rr(i) = real(perm[static_cast<std::size_t>(i)]);
  }
  REQUIRE(oos_r2(pp, rr) == Approx(base).margin(1e-12));
}
