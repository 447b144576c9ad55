#pragma once

#include <map>
#include <string>
#include <vector>

#include "cbapm/cbapm.hpp"

namespace acceptance {

using namespace cbapm;

/*
 Shared harness for the synthetic-data acceptance runs: one expanding
 window step on the default generator, PCA macro compression, and the
 production training path.
*/

struct SynthRunMetrics {
  double return_r2_pct = 0.0;
  double consensus_avg_r2_pct = 0.0;
};

struct SynthExperiment {
  Panel prepared;
  std::vector<VariableMeta> meta;
  WindowSplit window;
  WindowDataset data;  // horizon-12 window dataset

  static SynthExperiment make(std::uint64_t seed, SynthConfig config = SynthConfig{},
                              int first_train_end = 71) {
    // desk-scale defaults: 200 firms x 240 months
    config.seed = seed;
    SynthOutput out = generate(config);

    SynthExperiment exp;
    Panel lagged = lag_characteristics(out.panel, out.schema.characteristics,
                                       out.schema.consensus_freq);
    Panel screened = screen_firms(lagged);
    exp.meta = out.schema.characteristics;
    Panel selected = select_variables(screened, exp.meta, 0.20, 0);
    exp.prepared = slice_months(selected, 0, config.n_months - 1);

    // one expanding-window step: train range, 2y validation, 1y test,
    // final year reserved for the annual return targets
    auto windows = make_windows(first_train_end, config.n_months - 1, 0);
    exp.window = windows.front();

    TrainedCompressor compressor =
        train_compressor(out.macro, exp.window.train, {CompressorChoice::Kind::pca, 8}, AeConfig{},
                         derive_seed(seed, {0xACC}));
    exp.data = build_window_dataset(exp.prepared, exp.meta, compressor.latent_series(), exp.window,
                                    12);
    return exp;
  }
};

// Desk-scale training budget: the production hyperparameters except a
// lighter dropout and smaller batches, sized to the 14k-observation
// first window.
inline TrainConfig acceptance_train_config() {
  TrainConfig cfg;
  cfg.model.hidden = {64, 32};
  cfg.model.dropout_p = 0.1;
  cfg.model.layer_norm = true;
  cfg.batch_size = 1000;
  cfg.lr = 1e-3;
  cfg.weight_decay = 5e-3;
  cfg.grad_clip = 1.0;
  cfg.scheduler_patience = 2;
  cfg.scheduler_factor = 0.2;
  cfg.early_stop_patience = 5;
  cfg.max_epochs = 25;
  return cfg;
}

inline SynthRunMetrics run_lambda(const SynthExperiment& exp, double lambda, std::uint64_t seed,
                                  const TrainConfig& cfg) {
  TrainResult result = train_cbapm(exp.data.train, exp.data.val, lambda, cfg, seed);
  Prediction pred = predict(result.model, exp.data.test.inputs);
  SynthRunMetrics m;
  m.return_r2_pct =
      oos_r2(pred.r_hat.row(0).transpose(), exp.data.test.returns.row(0).transpose());
  m.consensus_avg_r2_pct = oos_r2_consensus(pred.c_hat, exp.data.test.consensus).average;
  return m;
}

} // namespace acceptance
