#pragma once

#include <cmath>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "cbapm/calendar.hpp"
#include "cbapm/encoder.hpp"
#include "cbapm/model.hpp"
#include "cbapm/panel.hpp"
#include "cbapm/serialize.hpp"
#include "cbapm/synth.hpp"

namespace cbapm {

/*
 JSON experiment configuration. Every field has a default; flags given
 on the command line override the file. The canonical dump of the
 parsed config is hashed to name the output directory, so identical
 configs land in identical places.
*/

struct PathsConfig {
  std::string panel_csv;
  std::string macro_csv;
  std::string schema_json;
  std::string factors_csv;      // optional external factor returns
  std::string test_assets_csv;  // optional external test-asset returns
  std::string output_dir = "out";
};

struct WindowConfig {
  int first_train_end = month_index(2010, 12);
  int train_start = 0;
};

struct SelectConfig {
  double max_missing = 0.20;
  int latest_start = 0;
};

struct ExperimentConfig {
  PathsConfig paths;
  std::vector<double> lambdas = {0.0, 0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7, 0.8, 0.9, 1.0};
  std::vector<int> horizons = {1, 3, 6, 12};
  CompressorChoice compressor;
  int ensemble_size = 10;
  std::uint64_t seed = 1;
  WindowConfig window;
  SelectConfig select;
  std::vector<double> costs_bps = {0, 25, 50, 75};
  bool double_sort_independent = false;
  bool turnover_leg_average = false;
  int portfolio_horizon = 12;
  int feps_dimension = 4;          // consensus column used for the double sort
  double diagnostics_lambda = 1.0; // specification whose estimates feed the OLS table
  int jobs = 1;
  TrainConfig train;
  AeConfig ae;
  SynthConfig synth;
};

namespace detail {

inline double parse_lambda(const nlohmann::json& v) {
  if (v.is_string()) {
    if (v.get<std::string>() == "inf") return kLambdaInf;
    throw std::invalid_argument("lambdas: unknown string '" + v.get<std::string>() + "'");
  }
  return v.get<double>();
}

inline int parse_month_field(const nlohmann::json& v) {
  if (v.is_string()) return parse_month(v.get<std::string>());
  return v.get<int>();
}

template <typename T>
void maybe(const nlohmann::json& j, const char* key, T& out) {
  if (j.contains(key)) out = j.at(key).get<T>();
}

} // namespace detail

inline ExperimentConfig parse_experiment_config(const nlohmann::json& j) {
  ExperimentConfig c;
  using detail::maybe;
  if (j.contains("paths")) {
    const auto& p = j.at("paths");
    maybe(p, "panel_csv", c.paths.panel_csv);
    maybe(p, "macro_csv", c.paths.macro_csv);
    maybe(p, "schema_json", c.paths.schema_json);
    maybe(p, "factors_csv", c.paths.factors_csv);
    maybe(p, "test_assets_csv", c.paths.test_assets_csv);
    maybe(p, "output_dir", c.paths.output_dir);
  }
  if (j.contains("lambdas")) {
    c.lambdas.clear();
    for (const auto& v : j.at("lambdas")) c.lambdas.push_back(detail::parse_lambda(v));
  }
  maybe(j, "horizons", c.horizons);
  if (j.contains("compressor")) {
    const auto& comp = j.at("compressor");
    if (comp.contains("kind")) c.compressor.kind = parse_compressor_kind(comp.at("kind"));
    maybe(comp, "d", c.compressor.d);
  }
  maybe(j, "ensemble_size", c.ensemble_size);
  maybe(j, "seed", c.seed);
  if (j.contains("window")) {
    const auto& w = j.at("window");
    if (w.contains("first_train_end"))
      c.window.first_train_end = detail::parse_month_field(w.at("first_train_end"));
    if (w.contains("train_start")) c.window.train_start = detail::parse_month_field(w.at("train_start"));
  }
  if (j.contains("select")) {
    const auto& s = j.at("select");
    maybe(s, "max_missing", c.select.max_missing);
    if (s.contains("latest_start")) c.select.latest_start = detail::parse_month_field(s.at("latest_start"));
  }
  maybe(j, "costs_bps", c.costs_bps);
  maybe(j, "double_sort_independent", c.double_sort_independent);
  maybe(j, "turnover_leg_average", c.turnover_leg_average);
  maybe(j, "portfolio_horizon", c.portfolio_horizon);
  maybe(j, "feps_dimension", c.feps_dimension);
  maybe(j, "diagnostics_lambda", c.diagnostics_lambda);
  maybe(j, "jobs", c.jobs);
  if (j.contains("train")) {
    const auto& t = j.at("train");
    maybe(t, "batch_size", c.train.batch_size);
    maybe(t, "lr", c.train.lr);
    maybe(t, "weight_decay", c.train.weight_decay);
    maybe(t, "coupled_weight_decay", c.train.coupled_weight_decay);
    maybe(t, "grad_clip", c.train.grad_clip);
    maybe(t, "clip_elementwise", c.train.clip_elementwise);
    maybe(t, "scheduler_patience", c.train.scheduler_patience);
    maybe(t, "scheduler_factor", c.train.scheduler_factor);
    maybe(t, "early_stop_patience", c.train.early_stop_patience);
    maybe(t, "max_epochs", c.train.max_epochs);
    maybe(t, "hidden", c.train.model.hidden);
    maybe(t, "dropout", c.train.model.dropout_p);
    maybe(t, "layer_norm", c.train.model.layer_norm);
  }
  if (j.contains("ae")) {
    const auto& a = j.at("ae");
    maybe(a, "hidden", c.ae.hidden);
    maybe(a, "dropout", c.ae.dropout_p);
    maybe(a, "lr", c.ae.lr);
    maybe(a, "weight_decay", c.ae.weight_decay);
    maybe(a, "batch_size", c.ae.batch_size);
    maybe(a, "early_stop_patience", c.ae.early_stop_patience);
    maybe(a, "max_epochs", c.ae.max_epochs);
    maybe(a, "val_fraction", c.ae.val_fraction);
  }
  if (j.contains("synth")) {
    const auto& s = j.at("synth");
    maybe(s, "n_firms", c.synth.n_firms);
    maybe(s, "n_months", c.synth.n_months);
    maybe(s, "n_characteristics", c.synth.n_characteristics);
    maybe(s, "macro_dim", c.synth.macro_dim);
    maybe(s, "macro_rank", c.synth.macro_rank);
    maybe(s, "map_hidden", c.synth.map_hidden);
    maybe(s, "consensus_noise", c.synth.consensus_noise);
    maybe(s, "return_noise", c.synth.return_noise);
    maybe(s, "pricing_scale", c.synth.pricing_scale);
    maybe(s, "macro_noise", c.synth.macro_noise);
    maybe(s, "ar_coefficient", c.synth.ar_coefficient);
    maybe(s, "horizons", c.synth.horizons);
    maybe(s, "lead_months", c.synth.lead_months);
    maybe(s, "seed", c.synth.seed);
  }
  return c;
}

inline ExperimentConfig load_experiment_config(const std::filesystem::path& path) {
  return parse_experiment_config(nlohmann::json::parse(read_file(path)));
}

inline std::string lambda_label(double lambda) {
  if (std::isinf(lambda)) return "inf";
  return format_double(lambda);
}

inline nlohmann::json experiment_config_to_json(const ExperimentConfig& c) {
  nlohmann::json j;
  j["paths"] = {{"panel_csv", c.paths.panel_csv},       {"macro_csv", c.paths.macro_csv},
                {"schema_json", c.paths.schema_json},   {"factors_csv", c.paths.factors_csv},
                {"test_assets_csv", c.paths.test_assets_csv}, {"output_dir", c.paths.output_dir}};
  nlohmann::json lambdas = nlohmann::json::array();
  for (double l : c.lambdas) {
    if (std::isinf(l))
      lambdas.push_back("inf");
    else
      lambdas.push_back(l);
  }
  j["lambdas"] = lambdas;
  j["horizons"] = c.horizons;
  const char* kind = c.compressor.kind == CompressorChoice::Kind::autoencoder ? "autoencoder"
                     : c.compressor.kind == CompressorChoice::Kind::pca       ? "pca"
                                                                              : "none";
  j["compressor"] = {{"kind", kind}, {"d", c.compressor.d}};
  j["ensemble_size"] = c.ensemble_size;
  j["seed"] = c.seed;
  j["window"] = {{"first_train_end", format_month(c.window.first_train_end)},
                 {"train_start", format_month(c.window.train_start)}};
  j["select"] = {{"max_missing", c.select.max_missing},
                 {"latest_start", format_month(c.select.latest_start)}};
  j["costs_bps"] = c.costs_bps;
  j["double_sort_independent"] = c.double_sort_independent;
  j["turnover_leg_average"] = c.turnover_leg_average;
  j["portfolio_horizon"] = c.portfolio_horizon;
  j["feps_dimension"] = c.feps_dimension;
  j["diagnostics_lambda"] = c.diagnostics_lambda;
  j["jobs"] = c.jobs;
  j["train"] = {{"batch_size", c.train.batch_size},
                {"lr", c.train.lr},
                {"weight_decay", c.train.weight_decay},
                {"coupled_weight_decay", c.train.coupled_weight_decay},
                {"grad_clip", c.train.grad_clip},
                {"clip_elementwise", c.train.clip_elementwise},
                {"scheduler_patience", c.train.scheduler_patience},
                {"scheduler_factor", c.train.scheduler_factor},
                {"early_stop_patience", c.train.early_stop_patience},
                {"max_epochs", c.train.max_epochs},
                {"hidden", c.train.model.hidden},
                {"dropout", c.train.model.dropout_p},
                {"layer_norm", c.train.model.layer_norm}};
  j["ae"] = {{"hidden", c.ae.hidden},
             {"dropout", c.ae.dropout_p},
             {"lr", c.ae.lr},
             {"weight_decay", c.ae.weight_decay},
             {"batch_size", c.ae.batch_size},
             {"early_stop_patience", c.ae.early_stop_patience},
             {"max_epochs", c.ae.max_epochs},
             {"val_fraction", c.ae.val_fraction}};
  j["synth"] = {{"n_firms", c.synth.n_firms},
                {"n_months", c.synth.n_months},
                {"n_characteristics", c.synth.n_characteristics},
                {"macro_dim", c.synth.macro_dim},
                {"macro_rank", c.synth.macro_rank},
                {"map_hidden", c.synth.map_hidden},
                {"consensus_noise", c.synth.consensus_noise},
                {"return_noise", c.synth.return_noise},
                {"pricing_scale", c.synth.pricing_scale},
                {"macro_noise", c.synth.macro_noise},
                {"ar_coefficient", c.synth.ar_coefficient},
                {"horizons", c.synth.horizons},
                {"lead_months", c.synth.lead_months},
                {"seed", c.synth.seed}};
  return j;
}

// All validation problems reported together.
inline std::vector<std::string> validate_experiment_config(const ExperimentConfig& c) {
  std::vector<std::string> errors;
  for (double l : c.lambdas)
    if (!std::isinf(l) && l < 0.0) errors.push_back("lambdas: must be nonnegative or \"inf\"");
  if (c.lambdas.empty()) errors.push_back("lambdas: need at least one value");
  for (int h : c.horizons)
    if (h != 1 && h != 3 && h != 6 && h != 12)
      errors.push_back("horizons: supported set is {1, 3, 6, 12}");
  if (c.ensemble_size < 1) errors.push_back("ensemble_size: must be at least 1");
  if (c.compressor.d < 1 && c.compressor.kind != CompressorChoice::Kind::none)
    errors.push_back("compressor.d: must be positive");
  if (c.jobs < 1) errors.push_back("jobs: must be at least 1");
  if (c.train.batch_size < 1) errors.push_back("train.batch_size: must be positive");
  if (c.train.max_epochs < 1) errors.push_back("train.max_epochs: must be positive");
  if (c.portfolio_horizon != 12 && c.portfolio_horizon != 1 && c.portfolio_horizon != 3 &&
      c.portfolio_horizon != 6)
    errors.push_back("portfolio_horizon: supported set is {1, 3, 6, 12}");
  if (c.feps_dimension < 0 || c.feps_dimension > 8)
    errors.push_back("feps_dimension: must index one of the 9 consensus variables");
  if (c.select.max_missing < 0.0 || c.select.max_missing > 1.0)
    errors.push_back("select.max_missing: must lie in [0, 1]");
  bool diag_on_grid = false;
  for (double l : c.lambdas)
    if (l == c.diagnostics_lambda || (std::isinf(l) && std::isinf(c.diagnostics_lambda)))
      diag_on_grid = true;
  if (!diag_on_grid) errors.push_back("diagnostics_lambda: must be one of the lambdas");
  bool has_portfolio_h = false;
  for (int h : c.horizons)
    if (h == c.portfolio_horizon) has_portfolio_h = true;
  if (!has_portfolio_h) errors.push_back("portfolio_horizon: must be one of the horizons");
  return errors;
}

// --- Panel schema JSON -----------------------------------------------------------

inline Schema parse_schema_json(const nlohmann::json& j) {
  Schema schema;
  for (const auto& v : j.at("variables")) {
    std::string name = v.at("name").get<std::string>();
    std::string role = v.at("role").get<std::string>();
    if (role == "characteristic") {
      VariableMeta meta;
      meta.name = name;
      if (v.contains("frequency")) meta.frequency = parse_frequency(v.at("frequency"));
      if (v.contains("is_growth_rate")) meta.is_growth_rate = v.at("is_growth_rate").get<bool>();
      schema.characteristics.push_back(meta);
    } else if (role == "consensus") {
      schema.consensus.push_back(name);
      if (v.contains("frequency"))
        schema.consensus_freq[name] = parse_frequency(v.at("frequency"));
    } else if (role == "size") {
      schema.size_column = name;
    } else if (role == "return") {
      schema.return_columns.push_back({name, v.at("horizon").get<int>()});
    } else {
      throw std::invalid_argument("schema: unknown role '" + role + "' for '" + name + "'");
    }
  }
  return schema;
}

inline Schema load_schema_json(const std::filesystem::path& path) {
  return parse_schema_json(nlohmann::json::parse(read_file(path)));
}

inline nlohmann::json schema_to_json(const Schema& schema) {
  nlohmann::json vars = nlohmann::json::array();
  for (const auto& v : schema.characteristics)
    vars.push_back({{"name", v.name},
                    {"role", "characteristic"},
                    {"frequency", frequency_name(v.frequency)},
                    {"is_growth_rate", v.is_growth_rate}});
  for (const auto& name : schema.consensus) {
    nlohmann::json entry = {{"name", name}, {"role", "consensus"}};
    auto it = schema.consensus_freq.find(name);
    if (it != schema.consensus_freq.end()) entry["frequency"] = frequency_name(it->second);
    vars.push_back(entry);
  }
  if (!schema.size_column.empty())
    vars.push_back({{"name", schema.size_column}, {"role", "size"}});
  for (const auto& [name, h] : schema.return_columns)
    vars.push_back({{"name", name}, {"role", "return"}, {"horizon", h}});
  return nlohmann::json{{"variables", vars}};
}

} // namespace cbapm
