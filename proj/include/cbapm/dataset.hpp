#pragma once

#include <stdexcept>
#include <vector>

#include "cbapm/encoder.hpp"
#include "cbapm/model.hpp"
#include "cbapm/panel.hpp"
#include "cbapm/windows.hpp"

namespace cbapm {

/*
 Per-window dataset assembly. Imputation and rank normalization are
 refit on each window's visible slice: the train/val design matrices
 come from the months up to the validation end, so nothing dated inside
 the test range can move a trained parameter. Test inputs are produced
 from a second pass over the slice extended through the test months.
*/

struct TestObservation {
  int firm = 0;
  int month = 0;
  double size = 0.0;               // NaN when unavailable
  double next_month_return = 0.0;  // h=1 realized return, NaN when absent
};

struct WindowDataset {
  Dataset train;
  Dataset val;
  Dataset test;
  std::vector<TestObservation> test_meta;  // aligned with test columns
  int input_dim = 0;
};

namespace detail {

inline Dataset collect_rows(const Panel& normalized, const LatentSeries& latents,
                            MonthRange range, int horizon_col) {
  std::vector<Eigen::Index> rows;
  for (Eigen::Index i = 0; i < normalized.n_obs(); ++i)
    if (normalized.month[i] >= range.first && normalized.month[i] <= range.last &&
        !is_missing(normalized.returns(i, horizon_col)))
      rows.push_back(i);

  const auto F = normalized.characteristics.cols();
  const auto d = static_cast<Eigen::Index>(latents.dim());
  Dataset out;
  out.inputs.resize(F + d, static_cast<Eigen::Index>(rows.size()));
  out.consensus.resize(normalized.consensus.cols(), static_cast<Eigen::Index>(rows.size()));
  out.returns.resize(1, static_cast<Eigen::Index>(rows.size()));
  out.months.resize(rows.size());
  for (std::size_t k = 0; k < rows.size(); ++k) {
    const Eigen::Index i = rows[k];
    const auto col = static_cast<Eigen::Index>(k);
    out.inputs.col(col).head(F) = normalized.characteristics.row(i).transpose();
    out.inputs.col(col).tail(d) = latents.at(normalized.month[i]);
    out.consensus.col(col) = normalized.consensus.row(i).transpose();
    out.returns(0, col) = normalized.returns(i, horizon_col);
    out.months[k] = normalized.month[i];
  }
  return out;
}

} // namespace detail

inline WindowDataset build_window_dataset(const Panel& prepared,
                                          const std::vector<VariableMeta>& meta,
                                          const LatentSeries& latents,
                                          const WindowSplit& window, int horizon) {
  const int horizon_col = prepared.horizon_index(horizon);
  if (horizon_col < 0)
    throw std::invalid_argument("build_window_dataset: no return column for horizon " +
                                std::to_string(horizon));
  const int h1_col = prepared.horizon_index(1);

  WindowDataset out;

  // pass 1: fit months only (train + validation)
  {
    Panel visible = slice_months(prepared, window.train.first, window.val.last);
    Panel normalized = rank_normalize(impute(visible, meta));
    out.train = detail::collect_rows(normalized, latents, window.train, horizon_col);
    out.val = detail::collect_rows(normalized, latents, window.val, horizon_col);
  }

  // pass 2: extended through the test months, used only for test inputs
  {
    Panel visible = slice_months(prepared, window.train.first, window.test.last);
    Panel normalized = rank_normalize(impute(visible, meta));
    out.test = detail::collect_rows(normalized, latents, window.test, horizon_col);
    for (Eigen::Index i = 0; i < normalized.n_obs(); ++i) {
      if (normalized.month[i] < window.test.first || normalized.month[i] > window.test.last)
        continue;
      if (is_missing(normalized.returns(i, horizon_col))) continue;
      TestObservation obs;
      obs.firm = normalized.firm[i];
      obs.month = normalized.month[i];
      obs.size = normalized.size(i);
      obs.next_month_return =
          h1_col >= 0 ? normalized.returns(i, h1_col) : std::nan("");
      out.test_meta.push_back(obs);
    }
  }

  out.input_dim = static_cast<int>(out.train.inputs.rows());
  if (out.test.n() != static_cast<Eigen::Index>(out.test_meta.size()))
    throw std::logic_error("build_window_dataset: test metadata misaligned");
  return out;
}

} // namespace cbapm
