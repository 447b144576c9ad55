#pragma once

#include <cmath>
#include <stdexcept>
#include <string>
#include <vector>

#include "cbapm/calendar.hpp"
#include "cbapm/csv.hpp"
#include "cbapm/linalg.hpp"

namespace cbapm {

// Monthly macro series, one contiguous row per calendar month.
struct MacroMatrix {
  int first_month = 0;
  std::vector<std::string> names;
  Matrix values;  // T x D

  Eigen::Index n_months() const { return values.rows(); }
  int month_at(Eigen::Index row) const { return first_month + static_cast<int>(row); }
  Eigen::Index row_of(int month) const {
    Eigen::Index r = month - first_month;
    if (r < 0 || r >= values.rows())
      throw std::out_of_range("macro: month " + format_month(month) + " outside data");
    return r;
  }
};

struct MonthRange {
  int first = 0;
  int last = 0;  // inclusive
  int length() const { return last - first + 1; }
};

inline MacroMatrix load_macro(const std::string& path) {
  CsvTable table = read_csv(path);
  int date_col = table.column("date");
  if (date_col != 0) throw std::runtime_error(path + ": first column must be date");
  MacroMatrix m;
  for (std::size_t j = 1; j < table.header.size(); ++j) m.names.push_back(table.header[j]);
  if (table.rows.empty()) throw std::runtime_error(path + ": no data rows");
  m.first_month = parse_month(table.rows[0][0]);
  m.values.resize(static_cast<Eigen::Index>(table.rows.size()),
                  static_cast<Eigen::Index>(m.names.size()));
  for (std::size_t i = 0; i < table.rows.size(); ++i) {
    int month = parse_month(table.rows[i][0]);
    if (month != m.first_month + static_cast<int>(i))
      throw std::runtime_error(path + ": months must be contiguous, got " + table.rows[i][0]);
    for (std::size_t j = 1; j < table.header.size(); ++j) {
      double v = parse_double_or_nan(table.rows[i][j], "in " + path + " row " + std::to_string(i + 2));
      if (std::isnan(v))
        throw std::runtime_error(path + ": missing macro value for " + table.header[j] + " at " +
                                 table.rows[i][0] + " (macro series must be complete)");
      m.values(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(j - 1)) = v;
    }
  }
  return m;
}

struct MinMaxResult {
  MacroMatrix macro;
  std::vector<std::string> constant_columns;  // mapped to 0 with a warning
};

// Affine map per column so the fit-range minimum lands on -1 and the
// maximum on +1; months outside the fit range are clamped back into
// [-1, 1]. The fit range is the only data the bounds ever see.
inline MinMaxResult minmax_normalize_macro(const MacroMatrix& macro, MonthRange fit_range) {
  if (fit_range.length() <= 0)
    throw std::invalid_argument("minmax_normalize_macro: empty fit range");
  Eigen::Index lo = macro.row_of(fit_range.first);
  Eigen::Index hi = macro.row_of(fit_range.last);

  MinMaxResult out;
  out.macro = macro;
  for (Eigen::Index j = 0; j < macro.values.cols(); ++j) {
    double mn = macro.values.col(j).segment(lo, hi - lo + 1).minCoeff();
    double mx = macro.values.col(j).segment(lo, hi - lo + 1).maxCoeff();
    if (mn == mx) {
      out.constant_columns.push_back(macro.names[static_cast<std::size_t>(j)]);
      out.macro.values.col(j).setZero();
      continue;
    }
    const double scale = 2.0 / (mx - mn);
    for (Eigen::Index i = 0; i < macro.values.rows(); ++i) {
      double v = (macro.values(i, j) - mn) * scale - 1.0;
      out.macro.values(i, j) = std::clamp(v, -1.0, 1.0);
    }
  }
  return out;
}

} // namespace cbapm
