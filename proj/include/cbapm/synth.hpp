#pragma once

#include <cmath>
#include <cstdio>
#include <stdexcept>
#include <string>
#include <vector>

#include "cbapm/mlp.hpp"
#include "cbapm/panel.hpp"
#include "cbapm/macro.hpp"
#include "cbapm/rng.hpp"

namespace cbapm {

/*
 Deterministic synthetic panel with planted bottleneck structure: a
 low-rank AR(1) macro state drives the observable macro block, the
 consensus variables are a known nonlinear function of characteristics
 and the state, and returns are affine in the consensus. Ground truth is
 returned alongside so every downstream claim has an oracle.
*/

struct SynthConfig {
  int n_firms = 200;
  int n_months = 240;
  int n_characteristics = 30;
  int macro_dim = 40;
  int macro_rank = 4;
  int map_hidden = 64;           // width of the planted consensus map
  double map_weight_scale = 1.0; // >1 sharpens the map's nonlinearity
  double map_state_gain = 1.0;   // weight of the macro-state inputs inside the map
  double consensus_noise = 0.05;
  double return_noise = 0.35;
  // transient characteristics component of returns: a slowly drifting
  // loading direction that is fittable in sample but carries no stable
  // out-of-sample signal; the consensus carries none of it
  double spurious_scale = 0.30;
  double spurious_persistence = 0.95;
  double pricing_scale = 0.10;  // entries of the pricing vector
  double macro_noise = 0.05;
  double ar_coefficient = 0.90;
  std::vector<int> horizons = {1, 12};
  int lead_months = 6;  // pre-sample months emitted for lag room
  std::uint64_t seed = 1;
};

struct SynthTruth {
  Matrix latent_states;  // (lead + n_months) x rank, row 0 is the first lead month
  Mlp consensus_map;     // (F + rank) -> hidden -> 9, GELU hidden
  Vector consensus_shift;  // standardization constants applied to the map output
  Vector consensus_scale;
  Vector pricing;        // return loading on the consensus
  Panel complete_panel;  // before any injected missingness
};

struct SynthOutput {
  Panel panel;
  MacroMatrix macro;
  Schema schema;
  SynthTruth truth;
};

inline SynthOutput generate(const SynthConfig& config) {
  if (config.n_firms <= 0 || config.n_months <= 0 || config.n_characteristics <= 0 ||
      config.macro_dim <= 0 || config.macro_rank <= 0)
    throw std::invalid_argument("synth: dimensions must be positive");
  if (config.consensus_noise < 0 || config.return_noise < 0)
    throw std::invalid_argument("synth: noise scales must be nonnegative");

  Rng rng(derive_seed(config.seed, {0x51, 0x17}));
  const int first_month = -config.lead_months;
  const int total_months = config.lead_months + config.n_months;
  const int F = config.n_characteristics;
  const int rank = config.macro_rank;
  const int n_cons = 9;

  SynthOutput out;
  SynthTruth& truth = out.truth;

  // latent macro state: stationary AR(1), unit marginal variance
  truth.latent_states.resize(total_months, rank);
  const double rho = config.ar_coefficient;
  const double innov = std::sqrt(1.0 - rho * rho);
  for (int j = 0; j < rank; ++j) truth.latent_states(0, j) = rng.normal();
  for (int t = 1; t < total_months; ++t)
    for (int j = 0; j < rank; ++j)
      truth.latent_states(t, j) = rho * truth.latent_states(t - 1, j) + innov * rng.normal();

  // observable macro block
  Matrix loadings(config.macro_dim, rank);
  for (int i = 0; i < config.macro_dim; ++i)
    for (int j = 0; j < rank; ++j) loadings(i, j) = rng.normal() / std::sqrt(double(rank));
  out.macro.first_month = first_month;
  out.macro.values.resize(total_months, config.macro_dim);
  for (int j = 0; j < config.macro_dim; ++j) out.macro.names.push_back("m" + std::to_string(j));
  for (int t = 0; t < total_months; ++t)
    for (int i = 0; i < config.macro_dim; ++i)
      out.macro.values(t, i) = loadings.row(i).dot(truth.latent_states.row(t)) +
                               config.macro_noise * rng.normal();

  // planted consensus map and pricing vector; fixed loading magnitudes
  // with random signs keep the return signal-to-noise stable across seeds
  truth.consensus_map.dims = {F + rank, config.map_hidden, n_cons};
  truth.consensus_map.init(rng);
  for (auto& layer : truth.consensus_map.layers) layer.W *= config.map_weight_scale;
  truth.consensus_map.layers[0].W.rightCols(rank) *= config.map_state_gain;
  truth.pricing.resize(n_cons);
  for (int j = 0; j < n_cons; ++j)
    truth.pricing(j) = config.pricing_scale * (rng.uniform() < 0.5 ? -1.0 : 1.0);

  // panel: firms x months, all generated at once
  Panel& p = out.panel;
  for (int j = 0; j < F; ++j) p.char_names.push_back("x" + std::to_string(j));
  for (int j = 0; j < n_cons; ++j) p.consensus_names.push_back("c" + std::to_string(j));
  p.horizons = config.horizons;
  char buf[16];
  for (int f = 0; f < config.n_firms; ++f) {
    std::snprintf(buf, sizeof(buf), "F%05d", f);
    p.firm_names.emplace_back(buf);
  }
  const Eigen::Index n_obs = static_cast<Eigen::Index>(config.n_firms) * total_months;
  p.firm.resize(n_obs);
  p.month.resize(n_obs);
  p.characteristics.resize(n_obs, F);
  p.consensus.resize(n_obs, n_cons);
  p.size.resize(n_obs);
  p.returns.resize(n_obs, static_cast<Eigen::Index>(config.horizons.size()));

  Matrix clean_consensus(n_obs, n_cons);
  Eigen::Index row = 0;
  for (int f = 0; f < config.n_firms; ++f) {
    for (int t = 0; t < total_months; ++t, ++row) {
      p.firm[row] = f;
      p.month[row] = first_month + t;
      for (int j = 0; j < F; ++j) p.characteristics(row, j) = rng.normal();
      Vector input(F + rank);
      input.head(F) = p.characteristics.row(row).transpose();
      input.tail(rank) = truth.latent_states.row(t).transpose();
      clean_consensus.row(row) =
          truth.consensus_map.forward(Matrix(input), false).output.col(0).transpose();
      p.size(row) = std::exp(rng.normal());
    }
  }

  // the consensus variables are the standardized map outputs: zero mean,
  // unit variance per dimension over the panel, plus observation noise
  truth.consensus_shift = clean_consensus.colwise().mean();
  truth.consensus_scale.resize(n_cons);
  for (int j = 0; j < n_cons; ++j) {
    double var = (clean_consensus.col(j).array() - truth.consensus_shift(j)).square().mean();
    truth.consensus_scale(j) = var > 0.0 ? std::sqrt(var) : 1.0;
  }
  for (Eigen::Index i = 0; i < n_obs; ++i)
    for (int j = 0; j < n_cons; ++j)
      p.consensus(i, j) = (clean_consensus(i, j) - truth.consensus_shift(j)) /
                              truth.consensus_scale(j) +
                          config.consensus_noise * rng.normal();

  // drifting transient loading on the characteristics (zero on average,
  // AR(1) per coordinate)
  Matrix transient = Matrix::Zero(total_months, F);
  if (config.spurious_scale > 0.0) {
    const double rho_s = config.spurious_persistence;
    const double coord_sd = config.spurious_scale / std::sqrt(static_cast<double>(F));
    for (int j = 0; j < F; ++j) transient(0, j) = coord_sd * rng.normal();
    for (int t = 1; t < total_months; ++t)
      for (int j = 0; j < F; ++j)
        transient(t, j) = rho_s * transient(t - 1, j) +
                          std::sqrt(1.0 - rho_s * rho_s) * coord_sd * rng.normal();
  }

  // returns are affine in the observed consensus; the pricing signal is
  // centered over the panel so excess returns have roughly zero mean
  Vector signal = p.consensus * truth.pricing;
  const double signal_mean = signal.mean();
  row = 0;
  for (int f = 0; f < config.n_firms; ++f) {
    for (int t = 0; t < total_months; ++t, ++row) {
      double transient_part =
          config.spurious_scale > 0.0
              ? transient.row(t).dot(p.characteristics.row(row))
              : 0.0;
      for (std::size_t hj = 0; hj < config.horizons.size(); ++hj) {
        const int h = config.horizons[hj];
        // targets are only constructible when h more months of data exist
        if (t + h >= total_months) {
          p.returns(row, static_cast<Eigen::Index>(hj)) = std::nan("");
        } else {
          double scale = static_cast<double>(h) / 12.0;
          p.returns(row, static_cast<Eigen::Index>(hj)) =
              scale * (signal(row) - signal_mean + transient_part) +
              config.return_noise * std::sqrt(scale) * rng.normal();
        }
      }
    }
  }

  // schema mirroring the CSV interface: all characteristics monthly,
  // a couple flagged as growth rates to exercise that imputation path
  for (int j = 0; j < F; ++j) {
    VariableMeta v;
    v.name = p.char_names[static_cast<std::size_t>(j)];
    v.frequency = Frequency::monthly;
    v.is_growth_rate = (j % 7 == 3);
    out.schema.characteristics.push_back(v);
  }
  out.schema.consensus = p.consensus_names;
  for (const auto& name : p.consensus_names)
    out.schema.consensus_freq[name] = Frequency::monthly;  // generated in place, no delay
  out.schema.size_column = "mktcap";
  for (int h : config.horizons)
    out.schema.return_columns.push_back({"ret_h" + std::to_string(h), h});

  truth.complete_panel = p;
  return out;
}

enum class MissingPattern { mcar, block };

// Applies MCAR or per-firm contiguous block gaps to characteristics and
// consensus. Rates are per variable name; absent names stay complete.
inline Panel inject_missingness(const Panel& panel, const std::map<std::string, double>& rates,
                                MissingPattern pattern, Rng& rng) {
  for (const auto& [name, rate] : rates) {
    if (rate < 0.0 || rate >= 1.0)
      throw std::invalid_argument("inject_missingness: rate for '" + name + "' not in [0,1)");
    if (panel.char_index(name) < 0 && panel.consensus_index(name) < 0)
      throw std::invalid_argument("inject_missingness: unknown variable '" + name + "'");
  }
  Panel out = panel;
  auto spans = panel.firm_spans();
  auto apply = [&](Matrix& block, int col, double rate) {
    if (rate == 0.0) return;
    if (pattern == MissingPattern::mcar) {
      for (Eigen::Index i = 0; i < block.rows(); ++i)
        if (rng.uniform() < rate) block(i, col) = std::nan("");
    } else {
      for (const auto& [begin, end] : spans) {
        const auto span_len = end - begin;
        auto gap = static_cast<Eigen::Index>(std::llround(rate * double(span_len)));
        if (gap <= 0) continue;
        auto offset = static_cast<Eigen::Index>(rng.uniform() * double(span_len - gap + 1));
        for (Eigen::Index i = begin + offset; i < begin + offset + gap; ++i)
          block(i, col) = std::nan("");
      }
    }
  };
  for (const auto& [name, rate] : rates) {
    int cj = panel.char_index(name);
    if (cj >= 0) apply(out.characteristics, cj, rate);
    int sj = panel.consensus_index(name);
    if (sj >= 0) apply(out.consensus, sj, rate);
  }
  return out;
}

// --- CSV emission (exact panel_data schema, so the CLI pipeline runs as-is) ---

inline std::string panel_to_csv(const Panel& p) {
  CsvWriter w;
  std::vector<std::string> header = {"firm_id", "date"};
  for (const auto& n : p.char_names) header.push_back(n);
  for (const auto& n : p.consensus_names) header.push_back(n);
  header.push_back("mktcap");
  for (int h : p.horizons) header.push_back("ret_h" + std::to_string(h));
  w.row(header);
  auto cell = [](double v) { return is_missing(v) ? std::string() : format_double(v); };
  for (Eigen::Index i = 0; i < p.n_obs(); ++i) {
    std::vector<std::string> row = {p.firm_names[static_cast<std::size_t>(p.firm[i])],
                                    format_month(p.month[i])};
    for (Eigen::Index j = 0; j < p.characteristics.cols(); ++j)
      row.push_back(cell(p.characteristics(i, j)));
    for (Eigen::Index j = 0; j < p.consensus.cols(); ++j) row.push_back(cell(p.consensus(i, j)));
    row.push_back(cell(p.size(i)));
    for (Eigen::Index j = 0; j < p.returns.cols(); ++j) row.push_back(cell(p.returns(i, j)));
    w.row(row);
  }
  return w.str();
}

inline std::string macro_to_csv(const MacroMatrix& m) {
  CsvWriter w;
  std::vector<std::string> header = {"date"};
  for (const auto& n : m.names) header.push_back(n);
  w.row(header);
  for (Eigen::Index i = 0; i < m.n_months(); ++i) {
    std::vector<std::string> row = {format_month(m.month_at(i))};
    for (Eigen::Index j = 0; j < m.values.cols(); ++j) row.push_back(format_double(m.values(i, j)));
    w.row(row);
  }
  return w.str();
}

} // namespace cbapm
