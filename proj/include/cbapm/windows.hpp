#pragma once

#include <cmath>
#include <stdexcept>
#include <string>
#include <vector>

#include "cbapm/calendar.hpp"
#include "cbapm/linalg.hpp"
#include "cbapm/macro.hpp"

namespace cbapm {

/*
 Expanding-window schedule and out-of-sample R^2. Each step trains on an
 ever-growing range, validates on the next 24 months and tests on the 12
 after that; successive test ranges never overlap. The final 12 months
 of data are reserved for constructing the annual return targets and are
 never tested.
*/

struct WindowSplit {
  MonthRange train;
  MonthRange val;
  MonthRange test;
};

inline constexpr int kValMonths = 24;
inline constexpr int kTestMonths = 12;
inline constexpr int kReturnReserveMonths = 12;

inline std::vector<WindowSplit> make_windows(int first_train_end, int data_end,
                                             int train_start = 0) {
  std::vector<WindowSplit> out;
  for (int k = 0;; ++k) {
    WindowSplit w;
    w.train = {train_start, first_train_end + 12 * k};
    w.val = {w.train.last + 1, w.train.last + kValMonths};
    w.test = {w.val.last + 1, w.val.last + kTestMonths};
    if (w.test.last + kReturnReserveMonths > data_end) break;
    out.push_back(w);
  }
  if (out.empty()) {
    int needed = first_train_end + kValMonths + kTestMonths + kReturnReserveMonths;
    throw std::invalid_argument(
        "make_windows: data ends at " + format_month(data_end) + " but the first window needs " +
        format_month(needed) + " (" + std::to_string(needed - data_end) + " more months)");
  }
  return out;
}

// 1 - sum((R - Rhat)^2) / sum(R^2), in percent. The denominator is the
// raw sum of squared realized values (zero-forecast benchmark), with no
// mean subtraction.
inline double oos_r2(const Vector& predicted, const Vector& realized) {
  if (predicted.size() != realized.size())
    throw std::invalid_argument("oos_r2: length mismatch");
  if (predicted.size() == 0) throw std::invalid_argument("oos_r2: empty input");
  double denom = realized.squaredNorm();
  if (denom == 0.0) throw std::invalid_argument("oos_r2: all-zero realized values");
  double sse = (realized - predicted).squaredNorm();
  return 100.0 * (1.0 - sse / denom);
}

// Incremental pooled form: numerators and denominators add across
// windows, which is exactly evaluation on the concatenated test periods.
struct R2Accumulator {
  double sse = 0.0;
  double denom = 0.0;
  Eigen::Index n = 0;

  void add(const Vector& predicted, const Vector& realized) {
    if (predicted.size() != realized.size())
      throw std::invalid_argument("R2Accumulator: length mismatch");
    sse += (realized - predicted).squaredNorm();
    denom += realized.squaredNorm();
    n += predicted.size();
  }

  void add(double predicted, double realized) {
    double e = realized - predicted;
    sse += e * e;
    denom += realized * realized;
    ++n;
  }

  double r2_pct() const {
    if (n == 0 || denom == 0.0) throw std::invalid_argument("R2Accumulator: undefined R^2");
    return 100.0 * (1.0 - sse / denom);
  }
};

// Per-variable consensus R^2 plus the unweighted average over variables.
struct ConsensusR2 {
  Vector per_variable;
  double average = 0.0;
};

inline ConsensusR2 oos_r2_consensus(const Matrix& predicted, const Matrix& realized) {
  if (predicted.rows() != realized.rows() || predicted.cols() != realized.cols())
    throw std::invalid_argument("oos_r2_consensus: shape mismatch");
  ConsensusR2 out;
  out.per_variable.resize(predicted.rows());
  for (Eigen::Index j = 0; j < predicted.rows(); ++j)
    out.per_variable(j) = oos_r2(predicted.row(j).transpose(), realized.row(j).transpose());
  out.average = out.per_variable.mean();
  return out;
}

} // namespace cbapm
