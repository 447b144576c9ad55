#pragma once

#include <atomic>
#include <functional>
#include <filesystem>
#include <map>
#include <mutex>
#include <set>
#include <stdexcept>
#include <string>
#include <thread>
#include <vector>

#include "cbapm/dataset.hpp"
#include "cbapm/diagnostics.hpp"
#include "cbapm/experiment_config.hpp"
#include "cbapm/manifest.hpp"
#include "cbapm/portfolio.hpp"
#include "cbapm/windows.hpp"

namespace cbapm {

/*
 Pipeline stages behind the CLI subcommands. Every stage writes into
 <output root>/<config hash>/<stage>/ together with a manifest; each
 stage verifies the manifests of the artifacts it consumes. All
 randomness descends from the config seed, so a rerun with the same
 config reproduces every output byte.
*/

struct StageError : std::runtime_error {
  std::string stage;
  int exit_code;
  StageError(std::string stage_, const std::string& what, int exit_code_ = 3)
      : std::runtime_error("[" + stage_ + "] " + what), stage(std::move(stage_)),
        exit_code(exit_code_) {}
};

class Experiment {
 public:
  Experiment(ExperimentConfig config, std::string out_root_override = "")
      : config_(std::move(config)) {
    namespace fs = std::filesystem;
    std::string root = !out_root_override.empty() ? out_root_override : config_.paths.output_dir;
    config_json_ = experiment_config_to_json(config_);
    config_hash_ = to_hex(fnv1a64(config_json_.dump()));
    run_dir_ = fs::path(root) / config_hash_;
  }

  const ExperimentConfig& config() const { return config_; }
  const std::string& config_hash() const { return config_hash_; }
  const std::filesystem::path& run_dir() const { return run_dir_; }
  std::filesystem::path stage_dir(const std::string& stage) const { return run_dir_ / stage; }

  // ---- stages ----------------------------------------------------------------

  void run_synth() {
    const auto dir = stage_dir("synth");
    SynthOutput out = generate(config_.synth);
    write_file_atomic(dir / "panel.csv", panel_to_csv(out.panel));
    write_file_atomic(dir / "macro.csv", macro_to_csv(out.macro));
    write_file_atomic(dir / "schema.json", schema_to_json(out.schema).dump(2) + "\n");
    nlohmann::json truth;
    truth["pricing"] = std::vector<double>(out.truth.pricing.data(),
                                           out.truth.pricing.data() + out.truth.pricing.size());
    truth["seed"] = config_.synth.seed;
    truth["macro_rank"] = config_.synth.macro_rank;
    write_file_atomic(dir / "truth.json", truth.dump(2) + "\n");

    Manifest m = manifest("synth");
    m.add_output(dir / "panel.csv");
    m.add_output(dir / "macro.csv");
    m.add_output(dir / "schema.json");
    m.add_output(dir / "truth.json");
    write_manifest(m, dir);
    save_config();
  }

  void run_preprocess() {
    const auto dir = stage_dir("preprocess");
    auto [panel_path, macro_path, schema_path] = input_paths();
    require_file("preprocess", panel_path, "panel CSV");
    require_file("preprocess", schema_path, "schema JSON");

    Schema schema = load_schema_json(schema_path);
    Panel raw = load_panel(panel_path.string(), schema);
    Panel lagged = lag_characteristics(raw, schema.characteristics, schema.consensus_freq);
    Panel screened = screen_firms(lagged);
    std::vector<VariableMeta> meta = schema.characteristics;
    Panel selected = select_variables(screened, meta, config_.select.max_missing,
                                      config_.select.latest_start);
    // drop lead months once lagging has consumed them
    int data_start = config_.window.train_start;
    int data_end = selected.n_obs() > 0
                       ? *std::max_element(selected.month.begin(), selected.month.end())
                       : data_start;
    Panel prepared = slice_months(selected, data_start, data_end);

    Schema prepared_schema;
    prepared_schema.characteristics = meta;
    prepared_schema.consensus = prepared.consensus_names;
    prepared_schema.consensus_freq = schema.consensus_freq;
    prepared_schema.size_column = "mktcap";
    for (int h : prepared.horizons)
      prepared_schema.return_columns.push_back({"ret_h" + std::to_string(h), h});

    write_file_atomic(dir / "prepared_panel.csv", panel_to_csv(prepared));
    write_file_atomic(dir / "prepared_schema.json", schema_to_json(prepared_schema).dump(2) + "\n");

    Manifest m = manifest("preprocess");
    m.add_input(panel_path);
    m.add_input(schema_path);
    if (std::filesystem::exists(macro_path)) m.add_input(macro_path);
    m.add_output(dir / "prepared_panel.csv");
    m.add_output(dir / "prepared_schema.json");
    write_manifest(m, dir);
    save_config();
  }

  void run_train_macro() {
    const auto dir = stage_dir("macro");
    auto [panel_path, macro_path, schema_path] = input_paths();
    require_file("train_macro", macro_path, "macro CSV");
    verify_upstream("train_macro", "preprocess");

    MacroMatrix macro = load_macro(macro_path.string());
    auto windows = load_windows("train_macro");

    Manifest m = manifest("train_macro");
    m.add_input(macro_path);
    for (std::size_t k = 0; k < windows.size(); ++k) {
      MonthRange fit = windows[k].train;
      TrainedCompressor comp = train_compressor(
          macro, fit, config_.compressor, config_.ae,
          derive_seed(config_.seed, {0x77AC, static_cast<std::uint64_t>(k)}));

      CsvWriter w;
      std::vector<std::string> header = {"date"};
      for (int j = 0; j < comp.latent_dim(); ++j) header.push_back("z" + std::to_string(j + 1));
      w.row(header);
      for (Eigen::Index i = 0; i < comp.latents.rows(); ++i) {
        std::vector<std::string> row = {format_month(comp.normalized.month_at(i))};
        for (Eigen::Index j = 0; j < comp.latents.cols(); ++j)
          row.push_back(format_double(comp.latents(i, j)));
        w.row(row);
      }
      auto latents_path = dir / ("latents_w" + std::to_string(k) + ".csv");
      write_file_atomic(latents_path, w.str());
      m.add_output(latents_path);

      if (config_.compressor.kind == CompressorChoice::Kind::autoencoder) {
        Checkpoint ck;
        ck.seed = derive_seed(config_.seed, {0x77AC, static_cast<std::uint64_t>(k)});
        comp.ae.encoder.append_tensors(ck.tensors, "enc");
        comp.ae.decoder.append_tensors(ck.tensors, "dec");
        auto ck_path = dir / ("macro_w" + std::to_string(k) + ".ckpt");
        save_checkpoint(ck, ck_path);
        m.add_output(ck_path);
      } else if (config_.compressor.kind == CompressorChoice::Kind::pca) {
        CsvWriter pw;
        std::vector<std::string> ph = {"component"};
        for (const auto& name : comp.normalized.names) ph.push_back(name);
        pw.row(ph);
        std::vector<std::string> mean_row = {"mean"};
        for (Eigen::Index j = 0; j < comp.pca.mean.size(); ++j)
          mean_row.push_back(format_double(comp.pca.mean(j)));
        pw.row(mean_row);
        for (Eigen::Index c = 0; c < comp.pca.components.cols(); ++c) {
          std::vector<std::string> row = {"pc" + std::to_string(c + 1)};
          for (Eigen::Index r = 0; r < comp.pca.components.rows(); ++r)
            row.push_back(format_double(comp.pca.components(r, c)));
          pw.row(row);
        }
        auto pca_path = dir / ("pca_w" + std::to_string(k) + ".csv");
        write_file_atomic(pca_path, pw.str());
        m.add_output(pca_path);
      }
    }
    write_manifest(m, dir);
    save_config();
  }

  void run_train() {
    const auto dir = stage_dir("train");
    verify_upstream("train", "preprocess");
    verify_upstream("train", "macro");
    auto [prepared, meta] = load_prepared("train");
    auto windows = load_windows("train");

    // (lambda, epoch) -> in-sample trace, for window 0 member 0
    std::map<int, std::map<std::size_t, std::vector<EpochStats>>> traces;  // h -> lambda idx -> trace
    Manifest m = manifest("train");
    std::mutex manifest_mutex;

    for (std::size_t k = 0; k < windows.size(); ++k) {
      LatentSeries latents = load_latents(k);
      for (int h : config_.horizons) {
        WindowDataset data = build_window_dataset(prepared, meta, latents, windows[k], h);
        struct Job {
          std::size_t lambda_idx;
          int member;
        };
        std::vector<Job> jobs;
        for (std::size_t li = 0; li < config_.lambdas.size(); ++li)
          for (int j = 0; j < config_.ensemble_size; ++j) jobs.push_back({li, j});

        std::atomic<std::size_t> next{0};
        auto worker = [&] {
          for (;;) {
            std::size_t idx = next.fetch_add(1);
            if (idx >= jobs.size()) break;
            const Job job = jobs[idx];
            const double lambda = config_.lambdas[job.lambda_idx];
            std::uint64_t seed = derive_seed(
                config_.seed, {0x7124, static_cast<std::uint64_t>(k), static_cast<std::uint64_t>(h),
                               static_cast<std::uint64_t>(job.lambda_idx),
                               static_cast<std::uint64_t>(job.member)});
            TrainResult result = train_cbapm(data.train, data.val, lambda, config_.train, seed);
            result.model.horizon = h;
            Checkpoint ck = to_checkpoint(result.model, seed);
            auto path = dir / checkpoint_name(k, h, lambda, job.member);
            save_checkpoint(ck, path);
            std::lock_guard<std::mutex> lock(manifest_mutex);
            m.add_output(path);
            if (k == 0 && job.member == 0) traces[h][job.lambda_idx] = result.trace;
          }
        };
        run_parallel(worker);
      }
    }

    // in-sample loss traces, one file per horizon
    for (const auto& [h, by_lambda] : traces) {
      CsvWriter w;
      w.row({"lambda", "epoch", "L_R", "mean_L_C"});
      for (const auto& [li, trace] : by_lambda)
        for (std::size_t e = 0; e < trace.size(); ++e)
          w.row({lambda_label(config_.lambdas[li]), std::to_string(e + 1),
                 format_double(trace[e].insample_return_loss),
                 format_double(trace[e].insample_consensus_mean)});
      auto path = dir / ("mse_traces_h" + std::to_string(h) + ".csv");
      write_file_atomic(path, w.str());
      m.add_output(path);
    }
    // manifest outputs sorted for a stable byte layout
    std::sort(m.outputs.begin(), m.outputs.end());
    write_manifest(m, dir);
    save_config();
  }

  void run_evaluate() {
    const auto dir = stage_dir("evaluate");
    verify_upstream("evaluate", "preprocess");
    verify_upstream("evaluate", "macro");
    verify_upstream("evaluate", "train");
    auto [prepared, meta] = load_prepared("evaluate");
    auto windows = load_windows("evaluate");
    const auto& consensus_names = prepared.consensus_names;

    Manifest m = manifest("evaluate");
    CsvWriter table;
    table.comment("window arithmetic: train [" + format_month(config_.window.train_start) +
                  ", first_train_end + 12k], then 24 validation months, then 12 test months; "
                  "the final 12 data months are reserved for the annual return targets");
    table.row({"lambda", "h", "var_or_return", "r2_pct", "window"});

    for (int h : config_.horizons) {
      CsvWriter preds;
      std::vector<std::string> pred_header = {"firm_id", "date", "lambda", "h", "r_hat"};
      for (int j = 1; j <= 9; ++j) pred_header.push_back("c_hat_" + std::to_string(j));
      preds.row(pred_header);

      struct LambdaAcc {
        R2Accumulator ret;
        std::vector<R2Accumulator> cons;
        std::vector<double> window_ret_r2;
        std::vector<ConsensusR2> window_cons_r2;
      };
      std::map<std::size_t, LambdaAcc> acc;
      for (std::size_t li = 0; li < config_.lambdas.size(); ++li)
        acc[li].cons.resize(static_cast<std::size_t>(consensus_names.size()));

      for (std::size_t k = 0; k < windows.size(); ++k) {
        LatentSeries latents = load_latents(k);
        WindowDataset data = build_window_dataset(prepared, meta, latents, windows[k], h);
        for (std::size_t li = 0; li < config_.lambdas.size(); ++li) {
          const double lambda = config_.lambdas[li];
          Ensemble ensemble = load_ensemble(k, h, lambda);
          Prediction pred = ensemble_predict(ensemble, data.test.inputs);
          LambdaAcc& a = acc[li];
          a.ret.add(pred.r_hat.row(0).transpose(), data.test.returns.row(0).transpose());
          for (Eigen::Index j = 0; j < data.test.consensus.rows(); ++j)
            a.cons[static_cast<std::size_t>(j)].add(pred.c_hat.row(j).transpose(),
                                                    data.test.consensus.row(j).transpose());
          a.window_ret_r2.push_back(
              oos_r2(pred.r_hat.row(0).transpose(), data.test.returns.row(0).transpose()));
          a.window_cons_r2.push_back(oos_r2_consensus(pred.c_hat, data.test.consensus));

          for (Eigen::Index c = 0; c < data.test.n(); ++c) {
            const TestObservation& obs = data.test_meta[static_cast<std::size_t>(c)];
            std::vector<std::string> row = {
                prepared.firm_names[static_cast<std::size_t>(obs.firm)], format_month(obs.month),
                lambda_label(lambda), std::to_string(h), format_double(pred.r_hat(0, c))};
            for (Eigen::Index j = 0; j < pred.c_hat.rows(); ++j)
              row.push_back(format_double(pred.c_hat(j, c)));
            preds.row(row);
          }
        }
      }

      for (std::size_t li = 0; li < config_.lambdas.size(); ++li) {
        const std::string label = lambda_label(config_.lambdas[li]);
        LambdaAcc& a = acc[li];
        double cons_avg = 0.0;
        for (std::size_t j = 0; j < a.cons.size(); ++j) {
          double r2 = a.cons[j].r2_pct();
          cons_avg += r2;
          table.row({label, std::to_string(h), consensus_names[j], format_double(r2), ""});
        }
        cons_avg /= static_cast<double>(a.cons.size());
        table.row({label, std::to_string(h), "consensus_average", format_double(cons_avg), ""});
        table.row({label, std::to_string(h), "return", format_double(a.ret.r2_pct()), ""});
        for (std::size_t k = 0; k < a.window_ret_r2.size(); ++k) {
          table.row({label, std::to_string(h), "return", format_double(a.window_ret_r2[k]),
                     std::to_string(k)});
          table.row({label, std::to_string(h), "consensus_average",
                     format_double(a.window_cons_r2[k].average), std::to_string(k)});
        }
      }
      auto pred_path = dir / ("predictions_h" + std::to_string(h) + ".csv");
      write_file_atomic(pred_path, preds.str());
      m.add_output(pred_path);
    }
    auto table_path = dir / "table1_r2.csv";
    write_file_atomic(table_path, table.str());
    m.add_output(table_path);
    std::sort(m.outputs.begin(), m.outputs.end());
    write_manifest(m, dir);
    save_config();
  }

  // Shared cross-sectional view of one test month for one lambda.
  struct MonthSlice {
    int month = 0;
    std::vector<std::string> ids;
    Vector scores;       // ensemble return forecast
    Vector feps_scores;  // configured consensus dimension estimate
    Vector sizes;
    Vector realized;  // next-month realized returns
  };

  std::map<int, MonthSlice> collect_month_slices(double lambda, int h) {
    auto [prepared, meta] = load_prepared("portfolio");
    auto windows = load_windows("portfolio");
    std::map<int, MonthSlice> slices;
    for (std::size_t k = 0; k < windows.size(); ++k) {
      LatentSeries latents = load_latents(k);
      WindowDataset data = build_window_dataset(prepared, meta, latents, windows[k], h);
      Ensemble ensemble = load_ensemble(k, h, lambda);
      Prediction pred = ensemble_predict(ensemble, data.test.inputs);
      for (Eigen::Index c = 0; c < data.test.n(); ++c) {
        const TestObservation& obs = data.test_meta[static_cast<std::size_t>(c)];
        if (is_missing(obs.size) || is_missing(obs.next_month_return)) continue;
        MonthSlice& s = slices[obs.month];
        s.month = obs.month;
        s.ids.push_back(prepared.firm_names[static_cast<std::size_t>(obs.firm)]);
        append(s.scores, pred.r_hat(0, c));
        append(s.feps_scores, pred.c_hat(config_.feps_dimension, c));
        append(s.sizes, obs.size);
        append(s.realized, obs.next_month_return);
      }
    }
    return slices;
  }

  void run_portfolio() {
    const auto dir = stage_dir("portfolio");
    verify_upstream("portfolio", "preprocess");
    verify_upstream("portfolio", "macro");
    verify_upstream("portfolio", "train");
    const int h = config_.portfolio_horizon;

    CsvWriter t2, t3, t4, td4, cum;
    t2.row({"lambda", "decile", "mean_monthly_return"});
    t3.row({"lambda", "feps_quintile", "ret_quintile", "mean_monthly_return"});
    t4.row({"lambda", "mean_log", "std_log", "cum_log", "sharpe_annualized", "max_one_month_loss",
            "max_drawdown", "turnover_avg"});
    td4.row({"lambda", "c_bps", "mean_log", "sharpe_annualized", "turnover_avg"});
    cum.row({"date", "lambda", "cum_log"});

    for (double lambda : config_.lambdas) {
      const std::string label = lambda_label(lambda);
      auto slices = collect_month_slices(lambda, h);
      if (slices.empty()) throw StageError("portfolio", "no testable months found");

      // single-sorted decile means
      std::vector<double> decile_sum(10, 0.0);
      int n_months = 0;
      std::vector<WeightMap> long_legs, short_legs;
      std::vector<WeightMap> leg_returns;  // realized per-asset returns per month
      std::vector<double> ls_returns;
      std::vector<int> months;
      std::array<double, 25> cell_acc{};
      for (auto& [month, s] : slices) {
        SortedPortfolio deciles = decile_sort(s.scores, s.sizes, s.ids);
        for (int b = 0; b < 10; ++b)
          decile_sum[static_cast<std::size_t>(b)] += bucket_return(deciles, b, s.realized);
        ++n_months;

        LongShortMonth ls = long_short_month(s.scores, s.sizes, s.ids, s.realized);
        long_legs.push_back(ls.long_weights);
        short_legs.push_back(ls.short_weights);
        WeightMap rets;
        for (std::size_t i = 0; i < s.ids.size(); ++i) rets[s.ids[i]] = s.realized(static_cast<Eigen::Index>(i));
        leg_returns.push_back(std::move(rets));
        ls_returns.push_back(ls.spread);
        months.push_back(month);

        DoubleSorted ds = double_sort(s.feps_scores, s.scores, s.sizes, s.ids,
                                      config_.double_sort_independent);
        std::array<double, 25> cells{};
        for (std::size_t i = 0; i < ds.first_bucket.size(); ++i)
          cells[static_cast<std::size_t>(ds.cell(i))] +=
              ds.weight[i] * s.realized(static_cast<Eigen::Index>(i));
        for (int c = 0; c < 25; ++c) cell_acc[static_cast<std::size_t>(c)] += cells[static_cast<std::size_t>(c)];
      }

      for (int b = 0; b < 10; ++b)
        t2.row({label, std::to_string(b + 1),
                format_double(decile_sum[static_cast<std::size_t>(b)] / n_months)});
      t2.row({label, "H-L",
              format_double((decile_sum[9] - decile_sum[0]) / n_months)});

      // 5x5 means plus the high-minus-low margins on both axes
      auto cell_mean = [&](int f, int r) { return cell_acc[static_cast<std::size_t>(f * 5 + r)] / n_months; };
      for (int f = 0; f < 5; ++f) {
        for (int r = 0; r < 5; ++r)
          t3.row({label, std::to_string(f + 1), std::to_string(r + 1),
                  format_double(cell_mean(f, r))});
        t3.row({label, std::to_string(f + 1), "H-L", format_double(cell_mean(f, 4) - cell_mean(f, 0))});
      }
      for (int r = 0; r < 5; ++r)
        t3.row({label, "H-L", std::to_string(r + 1), format_double(cell_mean(4, r) - cell_mean(0, r))});

      // long-short series metrics
      double long_to = turnover(long_legs, leg_returns);
      double short_to = turnover(short_legs, leg_returns);
      double to_avg = config_.turnover_leg_average ? 0.5 * (long_to + short_to) : long_to + short_to;
      PerfMetrics metrics = perf_metrics(ls_returns);
      metrics.turnover_avg = to_avg;
      t4.row({label, format_double(metrics.mean_log), format_double(metrics.std_log),
              format_double(metrics.cum_log), format_double(metrics.sharpe_annualized),
              format_double(metrics.max_one_month_loss), format_double(metrics.max_drawdown),
              format_double(metrics.turnover_avg)});

      // per-month executed turnover: nothing charged at the initial formation
      std::vector<double> to_per_month(ls_returns.size(), 0.0);
      for (std::size_t t = 1; t < ls_returns.size(); ++t) {
        double lt = turnover_step(long_legs[t - 1], leg_returns[t - 1], long_legs[t]);
        double st = turnover_step(short_legs[t - 1], leg_returns[t - 1], short_legs[t]);
        to_per_month[t] = config_.turnover_leg_average ? 0.5 * (lt + st) : lt + st;
      }
      for (double bps : config_.costs_bps) {
        std::vector<double> net = apply_transaction_costs(ls_returns, to_per_month, bps / 1e4);
        PerfMetrics nm = perf_metrics(net);
        td4.row({label, format_double(bps), format_double(nm.mean_log),
                 format_double(nm.sharpe_annualized), format_double(to_avg)});
      }

      double acc_log = 0.0;
      for (std::size_t t = 0; t < ls_returns.size(); ++t) {
        acc_log += std::log1p(ls_returns[t]);
        cum.row({format_month(months[t]), label, format_double(acc_log)});
      }
    }

    Manifest m = manifest("portfolio");
    for (const auto& [name, writer] :
         std::initializer_list<std::pair<const char*, CsvWriter*>>{
             {"table2_single_sort.csv", &t2},
             {"table3_double_sort.csv", &t3},
             {"table4_portfolio.csv", &t4},
             {"tableD4_costs.csv", &td4},
             {"cumulative_returns.csv", &cum}}) {
      write_file_atomic(dir / name, writer->str());
      m.add_output(dir / name);
    }
    write_manifest(m, dir);
    save_config();
  }

  void run_diagnostics() {
    const auto dir = stage_dir("diagnostics");
    verify_upstream("diagnostics", "preprocess");
    verify_upstream("diagnostics", "macro");
    verify_upstream("diagnostics", "train");
    auto [prepared, meta] = load_prepared("diagnostics");
    auto windows = load_windows("diagnostics");
    const double diag_lambda = config_.diagnostics_lambda;
    require_lambda("diagnostics", diag_lambda);
    const int h = config_.portfolio_horizon;
    Manifest m = manifest("diagnostics");

    // ---- pooled OLS: raw vs model-inferred consensus, longest window ----
    {
      const std::size_t k = windows.size() - 1;
      LatentSeries latents = load_latents(k);
      WindowDataset data = build_window_dataset(prepared, meta, latents, windows[k], h);
      Ensemble ensemble = load_ensemble(k, h, diag_lambda);
      Prediction insample = ensemble_predict(ensemble, data.train.inputs);

      Vector y = data.train.returns.row(0).transpose();
      Matrix raw_X = data.train.consensus.transpose();
      Matrix approx_X = insample.c_hat.transpose();

      OlsResult raw = pooled_ols(y, raw_X);
      driscoll_kraay_se(raw, data.train.months, 11);
      OlsResult approx = pooled_ols(y, approx_X);
      driscoll_kraay_se(approx, data.train.months, 11);

      CsvWriter t5;
      t5.row({"block", "variable", "coef", "t_stat", "stars"});
      for (Eigen::Index j = 0; j < raw.coefficients.size(); ++j)
        t5.row({"raw", prepared.consensus_names[static_cast<std::size_t>(j)],
                format_double(raw.coefficients(j)), format_double(raw.t_stats(j)),
                significance_stars(raw.t_stats(j))});
      t5.row({"raw", "intercept", format_double(raw.intercept), format_double(raw.t_intercept),
              significance_stars(raw.t_intercept)});
      t5.row({"raw", "adj_r2_pct", format_double(100.0 * raw.adj_r2), "", ""});
      for (Eigen::Index j = 0; j < approx.coefficients.size(); ++j)
        t5.row({"approx", prepared.consensus_names[static_cast<std::size_t>(j)],
                format_double(approx.coefficients(j)), format_double(approx.t_stats(j)),
                significance_stars(approx.t_stats(j))});
      t5.row({"approx", "intercept", format_double(approx.intercept),
              format_double(approx.t_intercept), significance_stars(approx.t_intercept)});
      t5.row({"approx", "adj_r2_pct", format_double(100.0 * approx.adj_r2), "", ""});
      write_file_atomic(dir / "table5_ols.csv", t5.str());
      m.add_output(dir / "table5_ols.csv");
    }

    // ---- consensus factor-mimicking portfolios on the test months ----
    auto slices = collect_month_slices(diag_lambda, h);
    std::vector<int> months;
    for (const auto& [month, s] : slices) months.push_back(month);
    const auto T = static_cast<Eigen::Index>(slices.size());

    Matrix consensus_factors(T, 9);
    Vector market(T);
    {
      // per consensus dimension: value-weighted top-minus-bottom decile spread
      std::map<int, std::array<Vector, 9>> dim_scores;
      auto [prepared2, meta2] = load_prepared("diagnostics");
      for (std::size_t k = 0; k < windows.size(); ++k) {
        LatentSeries latents = load_latents(k);
        WindowDataset data = build_window_dataset(prepared2, meta2, latents, windows[k], h);
        Ensemble ensemble = load_ensemble(k, h, diag_lambda);
        Prediction pred = ensemble_predict(ensemble, data.test.inputs);
        std::map<int, std::vector<Eigen::Index>> by_month;
        for (Eigen::Index c = 0; c < data.test.n(); ++c) {
          const TestObservation& obs = data.test_meta[static_cast<std::size_t>(c)];
          if (is_missing(obs.size) || is_missing(obs.next_month_return)) continue;
          by_month[obs.month].push_back(c);
        }
        for (const auto& [month, cols] : by_month) {
          auto month_it = slices.find(month);
          if (month_it == slices.end()) continue;
          for (int dim = 0; dim < 9; ++dim) {
            Vector scores(static_cast<Eigen::Index>(cols.size()));
            for (std::size_t i = 0; i < cols.size(); ++i)
              scores(static_cast<Eigen::Index>(i)) = pred.c_hat(dim, cols[i]);
            dim_scores[month][static_cast<std::size_t>(dim)] = scores;
          }
        }
      }
      Eigen::Index t = 0;
      for (const auto& [month, s] : slices) {
        for (int dim = 0; dim < 9; ++dim) {
          MonthlyCrossSection cs{dim_scores.at(month)[static_cast<std::size_t>(dim)], s.sizes,
                                 s.ids, s.realized};
          consensus_factors(t, dim) = factor_mimicking({cs}).returns[0];
        }
        market(t) = (s.sizes.array() * s.realized.array()).sum() / s.sizes.sum();
        ++t;
      }
    }

    {
      CsvWriter fw;
      std::vector<std::string> header = {"date", "mkt"};
      for (const auto& name : prepared.consensus_names) header.push_back(name);
      fw.row(header);
      for (Eigen::Index t = 0; t < T; ++t) {
        std::vector<std::string> row = {format_month(months[static_cast<std::size_t>(t)]),
                                        format_double(market(t))};
        for (int dim = 0; dim < 9; ++dim) row.push_back(format_double(consensus_factors(t, dim)));
        fw.row(row);
      }
      write_file_atomic(dir / "factor_returns.csv", fw.str());
      m.add_output(dir / "factor_returns.csv");
    }

    // ---- GRS: factor models pricing the prediction-sorted deciles ----
    CsvWriter grs_csv;
    grs_csv.row({"panel", "model", "lambda", "status", "grs_f", "p_value", "mean_abs_alpha_m",
                 "mean_abs_alpha_a", "rms_alpha_m", "rms_alpha_a", "n_assets", "k_factors",
                 "t_months"});
    auto grs_row = [&](const std::string& panel, const std::string& model_name,
                       const std::string& lambda_lab, const Matrix& assets, const Matrix& factors) {
      const auto N = assets.cols();
      const auto K = factors.cols();
      if (assets.rows() <= N + K) {
        grs_csv.row({panel, model_name, lambda_lab, "skipped_short_sample", "", "", "", "", "", "",
                     std::to_string(N), std::to_string(K), std::to_string(assets.rows())});
        return;
      }
      try {
        TsAlphaResult ts = ts_alpha_regression(assets, factors);
        GrsResult g = grs_test(ts.alphas, ts.residuals, factors);
        grs_csv.row({panel, model_name, lambda_lab, "ok", format_double(g.f_stat),
                     format_double(g.p_value), format_double(g.mean_abs_alpha_monthly),
                     format_double(g.mean_abs_alpha_annualized), format_double(g.rms_alpha_monthly),
                     format_double(g.rms_alpha_annualized), std::to_string(g.n_assets),
                     std::to_string(g.k_factors), std::to_string(g.t_months)});
      } catch (const std::exception&) {
        grs_csv.row({panel, model_name, lambda_lab, "degenerate", "", "", "", "", "", "",
                     std::to_string(N), std::to_string(K), std::to_string(assets.rows())});
      }
    };

    for (double lambda : config_.lambdas) {
      auto lslices = collect_month_slices(lambda, h);
      Matrix deciles(static_cast<Eigen::Index>(lslices.size()), 10);
      Eigen::Index t = 0;
      for (const auto& [month, s] : lslices) {
        SortedPortfolio sorted = decile_sort(s.scores, s.sizes, s.ids);
        for (int b = 0; b < 10; ++b) deciles(t, b) = bucket_return(sorted, b, s.realized);
        ++t;
      }
      grs_row("prediction_deciles", "capm_mkt", lambda_label(lambda), deciles, market);
      grs_row("prediction_deciles", "consensus_factors", lambda_label(lambda), deciles,
              consensus_factors);
      if (!config_.paths.factors_csv.empty()) {
        auto [ext_factors, rows_kept] = load_aligned_factors(months);
        Matrix aligned_deciles(static_cast<Eigen::Index>(rows_kept.size()), 10);
        for (std::size_t i = 0; i < rows_kept.size(); ++i)
          aligned_deciles.row(static_cast<Eigen::Index>(i)) = deciles.row(rows_kept[i]);
        grs_row("prediction_deciles", "external_factors", lambda_label(lambda), aligned_deciles,
                ext_factors);
      }
    }
    if (!config_.paths.test_assets_csv.empty()) {
      auto [assets, asset_months] = load_month_matrix(config_.paths.test_assets_csv);
      std::vector<Eigen::Index> keep;
      Matrix factors(assets.rows(), 9);
      for (Eigen::Index i = 0; i < assets.rows(); ++i) {
        auto it = std::find(months.begin(), months.end(), asset_months[static_cast<std::size_t>(i)]);
        if (it == months.end()) continue;
        factors.row(static_cast<Eigen::Index>(keep.size())) =
            consensus_factors.row(it - months.begin());
        keep.push_back(i);
      }
      Matrix kept_assets(static_cast<Eigen::Index>(keep.size()), assets.cols());
      for (std::size_t i = 0; i < keep.size(); ++i)
        kept_assets.row(static_cast<Eigen::Index>(i)) = assets.row(keep[i]);
      factors.conservativeResize(static_cast<Eigen::Index>(keep.size()), 9);
      grs_row("external_assets", "consensus_factors", lambda_label(diag_lambda), kept_assets,
              factors);
    }
    write_file_atomic(dir / "grs_tables.csv", grs_csv.str());
    m.add_output(dir / "grs_tables.csv");
    write_manifest(m, dir);
    save_config();
  }

  void run_pipeline(bool with_synth) {
    if (with_synth) run_synth();
    run_preprocess();
    run_train_macro();
    run_train();
    run_evaluate();
    run_portfolio();
    run_diagnostics();
  }

  // ---- helpers ---------------------------------------------------------------

  std::tuple<std::filesystem::path, std::filesystem::path, std::filesystem::path> input_paths()
      const {
    namespace fs = std::filesystem;
    fs::path panel = config_.paths.panel_csv.empty() ? stage_dir("synth") / "panel.csv"
                                                     : fs::path(config_.paths.panel_csv);
    fs::path macro = config_.paths.macro_csv.empty() ? stage_dir("synth") / "macro.csv"
                                                     : fs::path(config_.paths.macro_csv);
    fs::path schema = config_.paths.schema_json.empty() ? stage_dir("synth") / "schema.json"
                                                        : fs::path(config_.paths.schema_json);
    return {panel, macro, schema};
  }

  std::vector<WindowSplit> load_windows(const std::string& stage) {
    auto [prepared, meta] = load_prepared(stage);
    int data_end = *std::max_element(prepared.month.begin(), prepared.month.end());
    try {
      return make_windows(config_.window.first_train_end, data_end, config_.window.train_start);
    } catch (const std::exception& e) {
      throw StageError(stage, e.what(), 2);
    }
  }

 private:
  static void append(Vector& v, double value) {
    v.conservativeResize(v.size() + 1);
    v(v.size() - 1) = value;
  }

  Manifest manifest(const std::string& stage) const {
    Manifest m;
    m.stage = stage;
    m.config_hash = config_hash_;
    m.seed = config_.seed;
    return m;
  }

  void save_config() const {
    write_file_atomic(run_dir_ / "config.json", config_json_.dump(2) + "\n");
  }

  void require_file(const std::string& stage, const std::filesystem::path& p,
                    const std::string& what) const {
    if (!std::filesystem::exists(p))
      throw StageError(stage, "missing " + what + ": " + p.string());
  }

  void require_lambda(const std::string& stage, double lambda) const {
    for (double l : config_.lambdas)
      if (l == lambda || (std::isinf(l) && std::isinf(lambda))) return;
    throw StageError(stage, "lambda " + lambda_label(lambda) + " is not in the configured grid", 2);
  }

  void verify_upstream(const std::string& stage, const std::string& upstream) {
    auto manifest_path = stage_dir(upstream) / "manifest.json";
    if (!std::filesystem::exists(manifest_path))
      throw StageError(stage, "missing upstream artifact: run `cbapm " + upstream +
                                  "` first (no " + manifest_path.string() + ")");
    auto issues = verify_manifest(manifest_path);
    if (!issues.empty()) {
      std::string detail;
      for (const auto& issue : issues)
        detail += "\n  " + issue.path +
                  (issue.actual.empty() ? " (missing)" : " (checksum mismatch)");
      throw StageError(stage, "upstream artifacts failed verification:" + detail);
    }
  }

  std::pair<Panel, std::vector<VariableMeta>> load_prepared(const std::string& stage) {
    auto dir = stage_dir("preprocess");
    require_file(stage, dir / "prepared_panel.csv", "prepared panel (run `cbapm preprocess`)");
    Schema schema = load_schema_json(dir / "prepared_schema.json");
    Panel panel = load_panel((dir / "prepared_panel.csv").string(), schema);
    return {std::move(panel), schema.characteristics};
  }

  LatentSeries load_latents(std::size_t window_index) {
    auto path = stage_dir("macro") / ("latents_w" + std::to_string(window_index) + ".csv");
    if (!std::filesystem::exists(path))
      throw StageError("train", "missing macro latents: run `cbapm train-macro` first (no " +
                                    path.string() + ")");
    CsvTable table = read_csv(path.string());
    LatentSeries out;
    out.first_month = parse_month(table.rows.at(0).at(0));
    out.values.resize(static_cast<Eigen::Index>(table.rows.size()),
                      static_cast<Eigen::Index>(table.header.size() - 1));
    for (std::size_t i = 0; i < table.rows.size(); ++i)
      for (std::size_t j = 1; j < table.header.size(); ++j)
        out.values(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(j - 1)) =
            parse_double_or_nan(table.rows[i][j], "in " + path.string());
    return out;
  }

  std::string checkpoint_name(std::size_t window, int h, double lambda, int member) const {
    return "model_w" + std::to_string(window) + "_h" + std::to_string(h) + "_l" +
           lambda_label(lambda) + "_m" + std::to_string(member) + ".ckpt";
  }

  Ensemble load_ensemble(std::size_t window, int h, double lambda) {
    Ensemble ensemble;
    for (int j = 0; j < config_.ensemble_size; ++j) {
      auto path = stage_dir("train") / checkpoint_name(window, h, lambda, j);
      if (!std::filesystem::exists(path))
        throw StageError("evaluate",
                         "missing model checkpoint: run `cbapm train` first (no " + path.string() + ")");
      ensemble.members.push_back(from_checkpoint(load_checkpoint(path)));
    }
    return ensemble;
  }

  // external monthly CSV: date column plus one column per series
  std::pair<Matrix, std::vector<int>> load_month_matrix(const std::string& path) {
    CsvTable table = read_csv(path);
    Matrix values(static_cast<Eigen::Index>(table.rows.size()),
                  static_cast<Eigen::Index>(table.header.size() - 1));
    std::vector<int> months;
    for (std::size_t i = 0; i < table.rows.size(); ++i) {
      months.push_back(parse_month(table.rows[i][0]));
      for (std::size_t j = 1; j < table.header.size(); ++j)
        values(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(j - 1)) =
            parse_double_or_nan(table.rows[i][j], "in " + path);
    }
    return {values, months};
  }

  std::pair<Matrix, std::vector<Eigen::Index>> load_aligned_factors(const std::vector<int>& months) {
    auto [values, factor_months] = load_month_matrix(config_.paths.factors_csv);
    std::vector<Eigen::Index> rows_kept;
    Matrix aligned(static_cast<Eigen::Index>(months.size()), values.cols());
    Eigen::Index out_row = 0;
    for (std::size_t i = 0; i < months.size(); ++i) {
      auto it = std::find(factor_months.begin(), factor_months.end(), months[i]);
      if (it == factor_months.end()) continue;
      aligned.row(out_row++) = values.row(it - factor_months.begin());
      rows_kept.push_back(static_cast<Eigen::Index>(i));
    }
    aligned.conservativeResize(out_row, values.cols());
    return {aligned, rows_kept};
  }

  void run_parallel(const std::function<void()>& worker) {
    const int n = std::max(1, config_.jobs);
    if (n == 1) {
      worker();
      return;
    }
    std::vector<std::thread> threads;
    std::exception_ptr first_error;
    std::mutex error_mutex;
    auto guarded = [&] {
      try {
        worker();
      } catch (...) {
        std::lock_guard<std::mutex> lock(error_mutex);
        if (!first_error) first_error = std::current_exception();
      }
    };
    for (int i = 0; i < n; ++i) threads.emplace_back(guarded);
    for (auto& t : threads) t.join();
    if (first_error) std::rethrow_exception(first_error);
  }

  ExperimentConfig config_;
  nlohmann::json config_json_;
  std::string config_hash_;
  std::filesystem::path run_dir_;
};

} // namespace cbapm
