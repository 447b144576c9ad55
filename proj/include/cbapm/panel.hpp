#pragma once

#include <algorithm>
#include <cmath>
#include <map>
#include <numeric>
#include <optional>
#include <set>
#include <stdexcept>
#include <string>
#include <unordered_map>
#include <vector>

#include "cbapm/calendar.hpp"
#include "cbapm/csv.hpp"
#include "cbapm/linalg.hpp"

namespace cbapm {

/*
 Firm-month panel ingestion and preprocessing: lagging by reporting
 frequency, firm screening on consensus coverage, variable selection by
 missingness and history, imputation, and cross-sectional rank
 normalization. Missing cells are NaN throughout; the preprocessing
 pipeline ends with a fully observed panel whose model inputs lie in
 [-1, 1].
*/

inline bool is_missing(double v) { return std::isnan(v); }

enum class Frequency { monthly, quarterly, annual };

inline int lag_months(Frequency f) {
  switch (f) {
    case Frequency::monthly: return 0;
    case Frequency::quarterly: return 3;
    case Frequency::annual: return 6;
  }
  return 0;
}

inline Frequency parse_frequency(const std::string& s) {
  if (s == "monthly") return Frequency::monthly;
  if (s == "quarterly") return Frequency::quarterly;
  if (s == "annual") return Frequency::annual;
  throw std::invalid_argument("unknown frequency '" + s + "'");
}

inline std::string frequency_name(Frequency f) {
  switch (f) {
    case Frequency::monthly: return "monthly";
    case Frequency::quarterly: return "quarterly";
    case Frequency::annual: return "annual";
  }
  return "monthly";
}

struct VariableMeta {
  std::string name;
  Frequency frequency = Frequency::monthly;
  bool is_growth_rate = false;
  int coverage_start = 0;     // first month with a non-missing value
  double missing_rate = 0.0;  // fraction of missing cells across the panel
};

// Observations are stored row-per-(firm, month), sorted by firm then
// month; month indices are strictly increasing within a firm but may
// have gaps.
struct Panel {
  std::vector<std::string> firm_names;  // firm slot -> external id
  std::vector<int> firm;                // per-observation firm slot
  std::vector<int> month;               // per-observation month index

  std::vector<std::string> char_names;
  std::vector<std::string> consensus_names;
  Matrix characteristics;  // n_obs x F
  Matrix consensus;        // n_obs x C
  Vector size;             // market capitalization, NaN where absent
  std::vector<int> horizons;
  Matrix returns;  // n_obs x horizons.size(), realized excess return targets

  Eigen::Index n_obs() const { return static_cast<Eigen::Index>(firm.size()); }

  int char_index(const std::string& name) const {
    for (std::size_t i = 0; i < char_names.size(); ++i)
      if (char_names[i] == name) return static_cast<int>(i);
    return -1;
  }

  int consensus_index(const std::string& name) const {
    for (std::size_t i = 0; i < consensus_names.size(); ++i)
      if (consensus_names[i] == name) return static_cast<int>(i);
    return -1;
  }

  int horizon_index(int h) const {
    for (std::size_t i = 0; i < horizons.size(); ++i)
      if (horizons[i] == h) return static_cast<int>(i);
    return -1;
  }

  // [begin, end) observation range per firm slot.
  std::vector<std::pair<Eigen::Index, Eigen::Index>> firm_spans() const {
    std::vector<std::pair<Eigen::Index, Eigen::Index>> spans(firm_names.size(), {0, 0});
    Eigen::Index i = 0;
    while (i < n_obs()) {
      Eigen::Index j = i;
      while (j < n_obs() && firm[j] == firm[i]) ++j;
      spans[firm[i]] = {i, j};
      i = j;
    }
    return spans;
  }

  // month -> observation rows, across firms.
  std::map<int, std::vector<Eigen::Index>> month_groups() const {
    std::map<int, std::vector<Eigen::Index>> groups;
    for (Eigen::Index i = 0; i < n_obs(); ++i) groups[month[i]].push_back(i);
    return groups;
  }
};

struct Schema {
  std::vector<VariableMeta> characteristics;
  std::vector<std::string> consensus;                  // names, in file order
  std::map<std::string, Frequency> consensus_freq;     // optional overrides
  std::string size_column;
  std::vector<std::pair<std::string, int>> return_columns;  // column -> horizon

  std::map<std::string, VariableMeta> meta_map() const {
    std::map<std::string, VariableMeta> m;
    for (const auto& v : characteristics) m[v.name] = v;
    return m;
  }
};

// --- Loading ------------------------------------------------------------------

inline Panel load_panel(const std::string& path, const Schema& schema) {
  CsvTable table = read_csv(path);
  int firm_col = table.column("firm_id");
  int date_col = table.column("date");
  if (firm_col < 0 || date_col < 0)
    throw std::runtime_error(path + ": need firm_id and date columns");

  std::vector<int> char_cols, cons_cols, ret_cols;
  for (const auto& v : schema.characteristics) {
    int c = table.column(v.name);
    if (c < 0) throw std::runtime_error(path + ": missing declared column '" + v.name + "'");
    char_cols.push_back(c);
  }
  for (const auto& name : schema.consensus) {
    int c = table.column(name);
    if (c < 0) throw std::runtime_error(path + ": missing declared column '" + name + "'");
    cons_cols.push_back(c);
  }
  int size_col = -1;
  if (!schema.size_column.empty()) {
    size_col = table.column(schema.size_column);
    if (size_col < 0)
      throw std::runtime_error(path + ": missing size column '" + schema.size_column + "'");
  }
  std::vector<int> horizons;
  for (const auto& [name, h] : schema.return_columns) {
    int c = table.column(name);
    if (c < 0) throw std::runtime_error(path + ": missing return column '" + name + "'");
    ret_cols.push_back(c);
    horizons.push_back(h);
  }

  struct Row {
    std::string firm;
    int month;
    std::size_t index;
  };
  std::vector<Row> order;
  order.reserve(table.rows.size());
  for (std::size_t i = 0; i < table.rows.size(); ++i) {
    const auto& r = table.rows[i];
    int m;
    try {
      m = parse_month(r[date_col]);
    } catch (const std::exception& e) {
      throw std::runtime_error(path + " row " + std::to_string(i + 2) + ": " + e.what());
    }
    if (r[firm_col].empty())
      throw std::runtime_error(path + " row " + std::to_string(i + 2) + ": empty firm_id");
    order.push_back({r[firm_col], m, i});
  }
  std::stable_sort(order.begin(), order.end(), [](const Row& a, const Row& b) {
    if (a.firm != b.firm) return a.firm < b.firm;
    return a.month < b.month;
  });
  for (std::size_t i = 1; i < order.size(); ++i)
    if (order[i].firm == order[i - 1].firm && order[i].month == order[i - 1].month)
      throw std::runtime_error(path + ": duplicate observation for firm '" + order[i].firm +
                               "' at " + format_month(order[i].month));

  Panel p;
  p.char_names.reserve(schema.characteristics.size());
  for (const auto& v : schema.characteristics) p.char_names.push_back(v.name);
  p.consensus_names = schema.consensus;
  p.horizons = horizons;
  const auto n = static_cast<Eigen::Index>(order.size());
  p.firm.resize(n);
  p.month.resize(n);
  p.characteristics.resize(n, static_cast<Eigen::Index>(char_cols.size()));
  p.consensus.resize(n, static_cast<Eigen::Index>(cons_cols.size()));
  p.size.resize(n);
  p.returns.resize(n, static_cast<Eigen::Index>(ret_cols.size()));

  std::map<std::string, int> firm_slot;
  for (const auto& row : order)
    firm_slot.emplace(row.firm, 0);
  {
    int slot = 0;
    for (auto& [name, s] : firm_slot) {
      s = slot++;
      p.firm_names.push_back(name);
    }
  }

  for (Eigen::Index i = 0; i < n; ++i) {
    const auto& src = table.rows[order[i].index];
    const std::string ctx = "in " + path + " row " + std::to_string(order[i].index + 2);
    p.firm[i] = firm_slot[order[i].firm];
    p.month[i] = order[i].month;
    for (std::size_t j = 0; j < char_cols.size(); ++j)
      p.characteristics(i, static_cast<Eigen::Index>(j)) =
          parse_double_or_nan(src[char_cols[j]], ctx);
    for (std::size_t j = 0; j < cons_cols.size(); ++j)
      p.consensus(i, static_cast<Eigen::Index>(j)) = parse_double_or_nan(src[cons_cols[j]], ctx);
    p.size(i) = size_col >= 0 ? parse_double_or_nan(src[size_col], ctx) : std::nan("");
    if (size_col >= 0 && !is_missing(p.size(i)) && p.size(i) <= 0.0)
      throw std::runtime_error(path + ": nonpositive size for firm '" + order[i].firm + "' at " +
                               format_month(order[i].month));
    for (std::size_t j = 0; j < ret_cols.size(); ++j)
      p.returns(i, static_cast<Eigen::Index>(j)) = parse_double_or_nan(src[ret_cols[j]], ctx);
  }
  return p;
}

// Keep only observations with month in [lo, hi].
inline Panel slice_months(const Panel& p, int lo, int hi) {
  Panel out;
  out.firm_names = p.firm_names;
  out.char_names = p.char_names;
  out.consensus_names = p.consensus_names;
  out.horizons = p.horizons;
  std::vector<Eigen::Index> keep;
  for (Eigen::Index i = 0; i < p.n_obs(); ++i)
    if (p.month[i] >= lo && p.month[i] <= hi) keep.push_back(i);
  const auto n = static_cast<Eigen::Index>(keep.size());
  out.firm.resize(n);
  out.month.resize(n);
  out.characteristics.resize(n, p.characteristics.cols());
  out.consensus.resize(n, p.consensus.cols());
  out.size.resize(n);
  out.returns.resize(n, p.returns.cols());
  for (Eigen::Index i = 0; i < n; ++i) {
    out.firm[i] = p.firm[keep[i]];
    out.month[i] = p.month[keep[i]];
    out.characteristics.row(i) = p.characteristics.row(keep[i]);
    out.consensus.row(i) = p.consensus.row(keep[i]);
    out.size(i) = p.size(keep[i]);
    out.returns.row(i) = p.returns.row(keep[i]);
  }
  return out;
}

// --- Lagging ------------------------------------------------------------------

// Value at month t becomes the value recorded at t - lag(frequency).
// Consensus variables default to the annual lag unless the schema says
// otherwise. Leading months without a lagged source become missing.
inline Panel lag_characteristics(const Panel& p, const std::vector<VariableMeta>& meta,
                                 const std::map<std::string, Frequency>& consensus_freq = {}) {
  std::map<std::string, Frequency> freq;
  for (const auto& v : meta) {
    if (p.char_index(v.name) < 0 && p.consensus_index(v.name) < 0)
      throw std::invalid_argument("lag_characteristics: unknown variable '" + v.name + "'");
    freq[v.name] = v.frequency;
  }
  for (const auto& name : p.char_names)
    if (!freq.count(name))
      throw std::invalid_argument("lag_characteristics: no frequency for '" + name + "'");

  std::vector<int> char_lag(p.char_names.size());
  for (std::size_t j = 0; j < p.char_names.size(); ++j)
    char_lag[j] = lag_months(freq.at(p.char_names[j]));
  std::vector<int> cons_lag(p.consensus_names.size(), lag_months(Frequency::annual));
  for (std::size_t j = 0; j < p.consensus_names.size(); ++j) {
    auto it = consensus_freq.find(p.consensus_names[j]);
    if (it != consensus_freq.end()) cons_lag[j] = lag_months(it->second);
  }

  Panel out = p;
  auto spans = p.firm_spans();
  for (const auto& [begin, end] : spans) {
    std::unordered_map<int, Eigen::Index> row_of_month;
    for (Eigen::Index i = begin; i < end; ++i) row_of_month[p.month[i]] = i;
    auto lagged = [&](const Matrix& src, int lag, Eigen::Index i, Eigen::Index col) {
      if (lag == 0) return src(i, col);
      auto it = row_of_month.find(p.month[i] - lag);
      return it == row_of_month.end() ? std::nan("") : src(it->second, col);
    };
    for (Eigen::Index i = begin; i < end; ++i) {
      for (std::size_t j = 0; j < p.char_names.size(); ++j)
        out.characteristics(i, static_cast<Eigen::Index>(j)) =
            lagged(p.characteristics, char_lag[j], i, static_cast<Eigen::Index>(j));
      for (std::size_t j = 0; j < p.consensus_names.size(); ++j)
        out.consensus(i, static_cast<Eigen::Index>(j)) =
            lagged(p.consensus, cons_lag[j], i, static_cast<Eigen::Index>(j));
    }
  }
  return out;
}

// --- Screening and variable selection ------------------------------------------

// Keeps firms with at least one observed value in every consensus column.
inline Panel screen_firms(const Panel& p) {
  std::vector<std::vector<bool>> has(p.firm_names.size(),
                                     std::vector<bool>(p.consensus_names.size(), false));
  for (Eigen::Index i = 0; i < p.n_obs(); ++i)
    for (Eigen::Index j = 0; j < p.consensus.cols(); ++j)
      if (!is_missing(p.consensus(i, j))) has[p.firm[i]][j] = true;

  std::vector<bool> keep_firm(p.firm_names.size(), true);
  for (std::size_t f = 0; f < p.firm_names.size(); ++f)
    for (std::size_t j = 0; j < p.consensus_names.size(); ++j)
      if (!has[f][j]) keep_firm[f] = false;

  Panel out;
  out.char_names = p.char_names;
  out.consensus_names = p.consensus_names;
  out.horizons = p.horizons;
  std::vector<int> slot_map(p.firm_names.size(), -1);
  for (std::size_t f = 0; f < p.firm_names.size(); ++f)
    if (keep_firm[f]) {
      slot_map[f] = static_cast<int>(out.firm_names.size());
      out.firm_names.push_back(p.firm_names[f]);
    }
  std::vector<Eigen::Index> rows;
  for (Eigen::Index i = 0; i < p.n_obs(); ++i)
    if (keep_firm[p.firm[i]]) rows.push_back(i);
  const auto n = static_cast<Eigen::Index>(rows.size());
  out.firm.resize(n);
  out.month.resize(n);
  out.characteristics.resize(n, p.characteristics.cols());
  out.consensus.resize(n, p.consensus.cols());
  out.size.resize(n);
  out.returns.resize(n, p.returns.cols());
  for (Eigen::Index i = 0; i < n; ++i) {
    out.firm[i] = slot_map[p.firm[rows[i]]];
    out.month[i] = p.month[rows[i]];
    out.characteristics.row(i) = p.characteristics.row(rows[i]);
    out.consensus.row(i) = p.consensus.row(rows[i]);
    out.size(i) = p.size(rows[i]);
    out.returns.row(i) = p.returns.row(rows[i]);
  }
  return out;
}

// Drops characteristics whose missing share exceeds max_missing or whose
// first observed month comes after latest_start. Meta entries of dropped
// variables are removed; survivors get their measured coverage fields.
inline Panel select_variables(const Panel& p, std::vector<VariableMeta>& meta,
                              double max_missing = 0.20, int latest_start = 0) {
  const auto n = p.n_obs();
  std::vector<bool> keep(p.char_names.size(), true);
  std::map<std::string, std::pair<double, int>> measured;  // name -> (missing_rate, start)
  for (std::size_t j = 0; j < p.char_names.size(); ++j) {
    Eigen::Index miss = 0;
    int start = std::numeric_limits<int>::max();
    for (Eigen::Index i = 0; i < n; ++i) {
      if (is_missing(p.characteristics(i, static_cast<Eigen::Index>(j))))
        ++miss;
      else
        start = std::min(start, p.month[i]);
    }
    double rate = n == 0 ? 1.0 : static_cast<double>(miss) / static_cast<double>(n);
    if (start == std::numeric_limits<int>::max()) start = std::numeric_limits<int>::max();
    measured[p.char_names[j]] = {rate, start};
    if (rate > max_missing || start > latest_start) keep[j] = false;
  }

  Panel out = p;
  out.char_names.clear();
  std::vector<Eigen::Index> cols;
  for (std::size_t j = 0; j < p.char_names.size(); ++j)
    if (keep[j]) {
      cols.push_back(static_cast<Eigen::Index>(j));
      out.char_names.push_back(p.char_names[j]);
    }
  out.characteristics.resize(n, static_cast<Eigen::Index>(cols.size()));
  for (std::size_t j = 0; j < cols.size(); ++j)
    out.characteristics.col(static_cast<Eigen::Index>(j)) = p.characteristics.col(cols[j]);

  std::vector<VariableMeta> kept_meta;
  for (auto& v : meta) {
    if (out.char_index(v.name) < 0 && p.char_index(v.name) >= 0) continue;  // dropped
    auto it = measured.find(v.name);
    if (it != measured.end()) {
      v.missing_rate = it->second.first;
      v.coverage_start = it->second.second;
    }
    kept_meta.push_back(v);
  }
  meta = std::move(kept_meta);
  return out;
}

// --- Imputation -----------------------------------------------------------------

namespace detail {

inline void cross_sectional_fill(Panel& p, Matrix& block, const std::string& kind,
                                 const std::vector<std::string>& names) {
  auto groups = p.month_groups();
  for (const auto& [m, rows] : groups) {
    for (Eigen::Index j = 0; j < block.cols(); ++j) {
      bool any_missing = false;
      double sum = 0.0;
      Eigen::Index count = 0;
      for (Eigen::Index i : rows) {
        if (is_missing(block(i, j)))
          any_missing = true;
        else {
          sum += block(i, j);
          ++count;
        }
      }
      if (!any_missing) continue;
      if (count == 0)
        throw std::runtime_error("impute: " + kind + " variable '" +
                                 names[static_cast<std::size_t>(j)] + "' has no observed value in " +
                                 format_month(m));
      double mean = sum / static_cast<double>(count);
      for (Eigen::Index i : rows)
        if (is_missing(block(i, j))) block(i, j) = mean;
    }
  }
}

} // namespace detail

// Characteristics: LOCF within firm, or the firm's time-series mean for
// growth-rate variables. Consensus: linear interpolation in month index
// between observed points, no extrapolation. Remaining cells fall back
// to the cross-sectional same-month mean.
inline Panel impute(const Panel& p, const std::vector<VariableMeta>& meta) {
  std::map<std::string, bool> growth;
  for (const auto& v : meta) growth[v.name] = v.is_growth_rate;
  for (const auto& name : p.char_names)
    if (!growth.count(name))
      throw std::invalid_argument("impute: no meta entry for characteristic '" + name + "'");

  Panel out = p;
  auto spans = p.firm_spans();

  for (std::size_t j = 0; j < p.char_names.size(); ++j) {
    const auto col = static_cast<Eigen::Index>(j);
    const bool is_growth = growth.at(p.char_names[j]);
    for (const auto& [begin, end] : spans) {
      if (is_growth) {
        double sum = 0.0;
        Eigen::Index count = 0;
        for (Eigen::Index i = begin; i < end; ++i)
          if (!is_missing(p.characteristics(i, col))) {
            sum += p.characteristics(i, col);
            ++count;
          }
        if (count == 0) continue;  // cross-sectional fallback below
        const double ts_mean = sum / static_cast<double>(count);
        for (Eigen::Index i = begin; i < end; ++i)
          if (is_missing(out.characteristics(i, col))) out.characteristics(i, col) = ts_mean;
      } else {
        double last = std::nan("");
        for (Eigen::Index i = begin; i < end; ++i) {
          if (is_missing(out.characteristics(i, col))) {
            if (!is_missing(last)) out.characteristics(i, col) = last;
          } else {
            last = out.characteristics(i, col);
          }
        }
      }
    }
  }

  // consensus: linear interpolation between bracketing observations
  for (Eigen::Index j = 0; j < p.consensus.cols(); ++j) {
    for (const auto& [begin, end] : spans) {
      std::vector<Eigen::Index> observed;
      for (Eigen::Index i = begin; i < end; ++i)
        if (!is_missing(p.consensus(i, j))) observed.push_back(i);
      if (observed.size() < 1) continue;
      for (std::size_t k = 0; k + 1 < observed.size(); ++k) {
        Eigen::Index lo = observed[k], hi = observed[k + 1];
        double m0 = p.month[lo], m1 = p.month[hi];
        double v0 = p.consensus(lo, j), v1 = p.consensus(hi, j);
        for (Eigen::Index i = lo + 1; i < hi; ++i)
          if (is_missing(out.consensus(i, j)))
            out.consensus(i, j) = v0 + (v1 - v0) * (p.month[i] - m0) / (m1 - m0);
      }
    }
  }

  detail::cross_sectional_fill(out, out.characteristics, "characteristic", out.char_names);
  detail::cross_sectional_fill(out, out.consensus, "consensus", out.consensus_names);
  return out;
}

// --- Rank normalization ----------------------------------------------------------

namespace detail {

// Average ranks for ties, then rank r of n maps to 2(r-1)/(n-1) - 1; a
// single observation maps to the midpoint 0.
inline void rank_column_inplace(Matrix& block, Eigen::Index col,
                                const std::vector<Eigen::Index>& rows,
                                const std::string& name) {
  const std::size_t n = rows.size();
  std::vector<std::pair<double, std::size_t>> vals(n);
  for (std::size_t k = 0; k < n; ++k) {
    double v = block(rows[k], col);
    if (is_missing(v))
      throw std::logic_error("rank_normalize: missing cell in '" + name + "'");
    vals[k] = {v, k};
  }
  if (n == 1) {
    block(rows[0], col) = 0.0;
    return;
  }
  std::sort(vals.begin(), vals.end(),
            [](const auto& a, const auto& b) { return a.first < b.first; });
  std::size_t i = 0;
  while (i < n) {
    std::size_t j = i;
    while (j < n && vals[j].first == vals[i].first) ++j;
    double avg_rank = 0.5 * static_cast<double>(i + 1 + j);  // mean of ranks i+1..j (1-based)
    double scaled = 2.0 * (avg_rank - 1.0) / static_cast<double>(n - 1) - 1.0;
    for (std::size_t k = i; k < j; ++k) block(rows[vals[k].second], col) = scaled;
    i = j;
  }
}

} // namespace detail

// Cross-sectional rank transform per (month, variable), applied to both
// characteristics and consensus.
inline Panel rank_normalize(const Panel& p) {
  Panel out = p;
  auto groups = p.month_groups();
  for (const auto& [m, rows] : groups) {
    for (Eigen::Index j = 0; j < out.characteristics.cols(); ++j)
      detail::rank_column_inplace(out.characteristics, j, rows,
                                  out.char_names[static_cast<std::size_t>(j)]);
    for (Eigen::Index j = 0; j < out.consensus.cols(); ++j)
      detail::rank_column_inplace(out.consensus, j, rows,
                                  out.consensus_names[static_cast<std::size_t>(j)]);
  }
  return out;
}

} // namespace cbapm
