#pragma once

#include <algorithm>
#include <cmath>
#include <map>
#include <numeric>
#include <stdexcept>
#include <string>
#include <vector>

#include "cbapm/linalg.hpp"

namespace cbapm {

/*
 Portfolio formation and performance statistics: value-weighted decile
 sorts on forecasts, conditional 5x5 double sorts, monthly-rebalanced
 long-short series, drawdown, drifted-weight turnover and proportional
 transaction costs. All functions are pure; a month's formation sees
 only that month's cross-section.
*/

// Ascending sort into equal-count quantile buckets; cutoffs at
// floor(n*k/q). Ties are broken by id so membership is deterministic.
struct SortedPortfolio {
  std::vector<int> bucket;     // per input position
  std::vector<double> weight;  // value weight within the position's bucket
  int n_buckets = 0;

  std::vector<int> bucket_sizes() const {
    std::vector<int> sizes(static_cast<std::size_t>(n_buckets), 0);
    for (int b : bucket) ++sizes[static_cast<std::size_t>(b)];
    return sizes;
  }
};

namespace detail {

inline std::vector<std::size_t> rank_order(const Vector& scores,
                                           const std::vector<std::string>& ids) {
  std::vector<std::size_t> order(static_cast<std::size_t>(scores.size()));
  std::iota(order.begin(), order.end(), 0);
  std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
    if (scores(static_cast<Eigen::Index>(a)) != scores(static_cast<Eigen::Index>(b)))
      return scores(static_cast<Eigen::Index>(a)) < scores(static_cast<Eigen::Index>(b));
    return ids[a] < ids[b];
  });
  return order;
}

inline void value_weights(SortedPortfolio& p, const Vector& sizes) {
  std::vector<double> totals(static_cast<std::size_t>(p.n_buckets), 0.0);
  for (std::size_t i = 0; i < p.bucket.size(); ++i) {
    if (p.bucket[i] < 0) continue;
    if (sizes(static_cast<Eigen::Index>(i)) <= 0.0)
      throw std::invalid_argument("portfolio sort: sizes must be positive");
    totals[static_cast<std::size_t>(p.bucket[i])] += sizes(static_cast<Eigen::Index>(i));
  }
  p.weight.assign(p.bucket.size(), 0.0);
  for (std::size_t i = 0; i < p.bucket.size(); ++i)
    if (p.bucket[i] >= 0)
      p.weight[i] = sizes(static_cast<Eigen::Index>(i)) / totals[static_cast<std::size_t>(p.bucket[i])];
}

inline std::vector<int> quantile_buckets(const Vector& scores, const std::vector<std::string>& ids,
                                         int q) {
  const auto n = static_cast<std::size_t>(scores.size());
  auto order = rank_order(scores, ids);
  std::vector<int> bucket(n, 0);
  for (int b = 0; b < q; ++b) {
    std::size_t lo = n * static_cast<std::size_t>(b) / static_cast<std::size_t>(q);
    std::size_t hi = n * static_cast<std::size_t>(b + 1) / static_cast<std::size_t>(q);
    for (std::size_t k = lo; k < hi; ++k) bucket[order[k]] = b;
  }
  return bucket;
}

} // namespace detail

inline SortedPortfolio decile_sort(const Vector& scores, const Vector& sizes,
                                   const std::vector<std::string>& ids) {
  const auto n = scores.size();
  if (n < 10) throw std::invalid_argument("decile_sort: need at least 10 firms");
  if (sizes.size() != n || static_cast<Eigen::Index>(ids.size()) != n)
    throw std::invalid_argument("decile_sort: input length mismatch");
  SortedPortfolio p;
  p.n_buckets = 10;
  p.bucket = detail::quantile_buckets(scores, ids, 10);
  detail::value_weights(p, sizes);
  return p;
}

// Realized value-weighted return of one bucket.
inline double bucket_return(const SortedPortfolio& p, int bucket, const Vector& realized) {
  double r = 0.0;
  bool any = false;
  for (std::size_t i = 0; i < p.bucket.size(); ++i)
    if (p.bucket[i] == bucket) {
      r += p.weight[i] * realized(static_cast<Eigen::Index>(i));
      any = true;
    }
  if (!any) throw std::invalid_argument("bucket_return: empty bucket");
  return r;
}

// Conditional (sequential) 5x5 double sort: quintiles on the consensus
// score first, then return-forecast quintiles within each group. The
// independent variant assigns both dimensions from the full
// cross-section. A constant first signal degenerates into id-ordered
// equal groups and is flagged.
struct DoubleSorted {
  std::vector<int> first_bucket;   // consensus-score quintile
  std::vector<int> second_bucket;  // return-forecast quintile
  std::vector<double> weight;      // value weight within the (first, second) cell
  bool degenerate_first = false;
  bool independent = false;

  int cell(std::size_t i) const { return first_bucket[i] * 5 + second_bucket[i]; }
};

inline DoubleSorted double_sort(const Vector& consensus_scores, const Vector& return_scores,
                                const Vector& sizes, const std::vector<std::string>& ids,
                                bool independent = false) {
  const auto n = consensus_scores.size();
  if (n < 25) throw std::invalid_argument("double_sort: need at least 25 firms");
  if (return_scores.size() != n || sizes.size() != n ||
      static_cast<Eigen::Index>(ids.size()) != n)
    throw std::invalid_argument("double_sort: input length mismatch");

  DoubleSorted d;
  d.independent = independent;
  d.degenerate_first =
      consensus_scores.maxCoeff() == consensus_scores.minCoeff();
  d.first_bucket = detail::quantile_buckets(consensus_scores, ids, 5);
  if (independent) {
    d.second_bucket = detail::quantile_buckets(return_scores, ids, 5);
  } else {
    d.second_bucket.assign(static_cast<std::size_t>(n), 0);
    for (int g = 0; g < 5; ++g) {
      std::vector<std::size_t> members;
      for (std::size_t i = 0; i < d.first_bucket.size(); ++i)
        if (d.first_bucket[i] == g) members.push_back(i);
      Vector sub(static_cast<Eigen::Index>(members.size()));
      std::vector<std::string> sub_ids(members.size());
      for (std::size_t k = 0; k < members.size(); ++k) {
        sub(static_cast<Eigen::Index>(k)) = return_scores(static_cast<Eigen::Index>(members[k]));
        sub_ids[k] = ids[members[k]];
      }
      auto sub_bucket = detail::quantile_buckets(sub, sub_ids, 5);
      for (std::size_t k = 0; k < members.size(); ++k)
        d.second_bucket[members[k]] = sub_bucket[k];
    }
  }

  // value weights within each of the 25 cells
  std::map<int, double> totals;
  for (std::size_t i = 0; i < d.first_bucket.size(); ++i)
    totals[d.cell(i)] += sizes(static_cast<Eigen::Index>(i));
  d.weight.assign(static_cast<std::size_t>(n), 0.0);
  for (std::size_t i = 0; i < d.first_bucket.size(); ++i) {
    double tot = totals[d.cell(i)];
    if (tot <= 0.0) throw std::invalid_argument("double_sort: sizes must be positive");
    d.weight[i] = sizes(static_cast<Eigen::Index>(i)) / tot;
  }
  return d;
}

// --- Long-short series -------------------------------------------------------------

using WeightMap = std::map<std::string, double>;

struct PortfolioSeries {
  std::vector<int> months;            // formation months
  std::vector<WeightMap> long_legs;   // target weights per formation month
  std::vector<WeightMap> short_legs;
  std::vector<double> long_returns;   // realized arithmetic leg returns
  std::vector<double> short_returns;
  std::vector<double> returns;        // long minus short

  std::size_t n() const { return months.size(); }
};

// One month of the long-short construction: top decile long, bottom
// decile short, value weights within each leg.
struct LongShortMonth {
  WeightMap long_weights;
  WeightMap short_weights;
  double long_return = 0.0;
  double short_return = 0.0;
  double spread = 0.0;
};

inline LongShortMonth long_short_month(const Vector& scores, const Vector& sizes,
                                       const std::vector<std::string>& ids,
                                       const Vector& realized) {
  if (realized.size() != scores.size())
    throw std::invalid_argument("long_short_month: realized return length mismatch");
  SortedPortfolio deciles = decile_sort(scores, sizes, ids);
  LongShortMonth out;
  for (std::size_t i = 0; i < deciles.bucket.size(); ++i) {
    if (deciles.bucket[i] == 9) out.long_weights[ids[i]] = deciles.weight[i];
    if (deciles.bucket[i] == 0) out.short_weights[ids[i]] = deciles.weight[i];
  }
  out.long_return = bucket_return(deciles, 9, realized);
  out.short_return = bucket_return(deciles, 0, realized);
  out.spread = out.long_return - out.short_return;
  return out;
}

// --- Drawdown ------------------------------------------------------------------------

// Largest fractional decline of cumulative wealth from its running peak.
inline double max_drawdown(const std::vector<double>& arithmetic_returns) {
  if (arithmetic_returns.empty()) throw std::invalid_argument("max_drawdown: empty series");
  double wealth = 1.0, peak = 1.0, dd = 0.0;
  for (double r : arithmetic_returns) {
    if (r <= -1.0) throw std::invalid_argument("max_drawdown: return <= -100%");
    wealth *= 1.0 + r;
    peak = std::max(peak, wealth);
    dd = std::max(dd, 1.0 - wealth / peak);
  }
  return dd;
}

// --- Turnover --------------------------------------------------------------------------

// One rebalance step of the drifted-weight turnover: weights held over
// the period drift with realized returns, and the trade distance to the
// next target weights is summed.
inline double turnover_step(const WeightMap& weights_now, const WeightMap& period_returns,
                            const WeightMap& weights_next) {
  double wsum = 0.0;
  for (const auto& [id, w] : weights_now) wsum += w;
  if (std::abs(wsum - 1.0) > 1e-9)
    throw std::invalid_argument("turnover_step: leg weights must sum to 1");
  double growth = 0.0;
  for (const auto& [id, w] : weights_now) {
    auto it = period_returns.find(id);
    if (it == period_returns.end())
      throw std::invalid_argument("turnover_step: missing return for held asset '" + id + "'");
    growth += w * it->second;
  }
  double to = 0.0;
  for (const auto& [id, w_next] : weights_next) {
    double drifted = 0.0;
    auto it = weights_now.find(id);
    if (it != weights_now.end())
      drifted = it->second * (1.0 + period_returns.at(id)) / (1.0 + growth);
    to += std::abs(w_next - drifted);
  }
  for (const auto& [id, w_now] : weights_now) {
    if (weights_next.count(id)) continue;  // counted above
    double drifted = w_now * (1.0 + period_returns.at(id)) / (1.0 + growth);
    to += std::abs(0.0 - drifted);
  }
  return to;
}

// Average one-way turnover over the rebalance dates of one leg.
inline double turnover(const std::vector<WeightMap>& weights,
                       const std::vector<WeightMap>& period_returns) {
  if (weights.size() < 2) return 0.0;
  if (period_returns.size() + 1 < weights.size())
    throw std::invalid_argument("turnover: need returns for every rebalance step");
  double acc = 0.0;
  for (std::size_t t = 0; t + 1 < weights.size(); ++t)
    acc += turnover_step(weights[t], period_returns[t], weights[t + 1]);
  return acc / static_cast<double>(weights.size() - 1);
}

// --- Transaction costs -------------------------------------------------------------------

// Net return per month: gross minus the proportional cost rate times
// that month's executed turnover.
inline std::vector<double> apply_transaction_costs(const std::vector<double>& gross,
                                                   const std::vector<double>& turnover_per_month,
                                                   double cost_rate) {
  if (gross.size() != turnover_per_month.size())
    throw std::invalid_argument("apply_transaction_costs: length mismatch");
  std::vector<double> net(gross.size());
  for (std::size_t i = 0; i < gross.size(); ++i)
    net[i] = gross[i] - cost_rate * turnover_per_month[i];
  return net;
}

// --- Summary metrics ----------------------------------------------------------------------

struct PerfMetrics {
  double mean_log = 0.0;
  double std_log = 0.0;
  double cum_log = 0.0;
  double sharpe_annualized = 0.0;  // arithmetic mean over arithmetic std, x sqrt(12), zero rf
  double max_one_month_loss = 0.0;
  double max_drawdown = 0.0;
  double turnover_avg = 0.0;  // filled by the caller when weights are known
};

inline PerfMetrics perf_metrics(const std::vector<double>& arithmetic_returns) {
  const auto n = arithmetic_returns.size();
  if (n < 2) throw std::invalid_argument("perf_metrics: need at least 2 observations");
  PerfMetrics m;
  double mean_r = 0.0;
  for (double r : arithmetic_returns) {
    if (r <= -1.0) throw std::invalid_argument("perf_metrics: return <= -100%");
    m.cum_log += std::log1p(r);
    mean_r += r;
  }
  mean_r /= static_cast<double>(n);
  m.mean_log = m.cum_log / static_cast<double>(n);
  double var_log = 0.0, var_r = 0.0;
  for (double r : arithmetic_returns) {
    var_log += (std::log1p(r) - m.mean_log) * (std::log1p(r) - m.mean_log);
    var_r += (r - mean_r) * (r - mean_r);
  }
  var_log /= static_cast<double>(n - 1);
  var_r /= static_cast<double>(n - 1);
  m.std_log = std::sqrt(var_log);
  double std_r = std::sqrt(var_r);
  if (std_r == 0.0)
    throw std::invalid_argument("perf_metrics: zero return volatility, Sharpe undefined");
  m.sharpe_annualized = mean_r / std_r * std::sqrt(12.0);
  m.max_one_month_loss = -*std::min_element(arithmetic_returns.begin(), arithmetic_returns.end());
  m.max_drawdown = max_drawdown(arithmetic_returns);
  return m;
}

} // namespace cbapm
