#include <cstdlib>
#include <iostream>
#include <string>

#include <CLI11.hpp>

#include "cbapm/cbapm.hpp"

/*
 cbapm <subcommand> --config path [--jobs N] [--lambda ...] [--seed ...]

 Config-driven orchestration of the full pipeline. Flags mirror config
 fields and win over the file; CBAPM_OUT overrides the output root.
*/

namespace {

struct CliOptions {
  std::string config_path;
  std::vector<std::string> lambdas;
  int jobs = 0;            // 0 = keep config value
  std::uint64_t seed = 0;  // only applied when --seed given
  bool seed_given = false;
  std::string out_dir;
};

void add_common(CLI::App* cmd, CliOptions& opts) {
  cmd->add_option("--config", opts.config_path, "experiment config JSON")->required();
  cmd->add_option("--jobs", opts.jobs, "parallel training jobs");
  cmd->add_option("--lambda", opts.lambdas,
                  "override the lambda grid (numbers or 'inf', repeatable)");
  cmd->add_option("--seed", opts.seed, "override the experiment seed")
      ->each([&opts](const std::string&) { opts.seed_given = true; });
  cmd->add_option("--out", opts.out_dir, "override the output root directory");
}

cbapm::Experiment make_experiment(const CliOptions& opts) {
  cbapm::ExperimentConfig config = cbapm::load_experiment_config(opts.config_path);
  if (opts.jobs > 0) config.jobs = opts.jobs;
  if (opts.seed_given) config.seed = opts.seed;
  if (!opts.lambdas.empty()) {
    config.lambdas.clear();
    for (const auto& s : opts.lambdas)
      config.lambdas.push_back(s == "inf" ? cbapm::kLambdaInf : std::stod(s));
  }
  auto errors = cbapm::validate_experiment_config(config);
  if (!errors.empty()) {
    std::cerr << "invalid config:\n";
    for (const auto& e : errors) std::cerr << "  - " << e << "\n";
    std::exit(2);
  }
  std::string out_root = opts.out_dir;
  if (out_root.empty())
    if (const char* env = std::getenv("CBAPM_OUT")) out_root = env;
  return cbapm::Experiment(std::move(config), out_root);
}

} // namespace

int main(int argc, char** argv) {
  CLI::App app{"consensus-bottleneck asset pricing pipeline"};
  app.set_version_flag("--version", std::string(cbapm::kVersion));
  app.require_subcommand(1);

  CliOptions opts;
  struct Sub {
    const char* name;
    const char* help;
  };
  const Sub subs[] = {
      {"synth", "generate the synthetic panel, macro series and schema"},
      {"preprocess", "lag, screen and select the raw panel"},
      {"train-macro", "fit the per-window macro compressor"},
      {"train", "train the consensus-bottleneck models over all windows"},
      {"evaluate", "out-of-sample R2 tables and prediction dumps"},
      {"portfolio", "sorted portfolios, long-short metrics, transaction costs"},
      {"diagnostics", "pooled OLS, factor-mimicking portfolios and GRS tests"},
      {"pipeline", "run every stage in order (synth first when no panel path is set)"},
  };
  for (const Sub& s : subs) add_common(app.add_subcommand(s.name, s.help), opts);
  auto* verify = app.add_subcommand("verify", "check a stage manifest against its files");
  std::string manifest_path;
  verify->add_option("--manifest", manifest_path, "path to a stage manifest.json")->required();

  CLI11_PARSE(app, argc, argv);
  const std::string cmd = app.get_subcommands().front()->get_name();

  try {
    if (cmd == "verify") {
      auto issues = cbapm::verify_manifest(manifest_path);
      if (issues.empty()) {
        std::cout << "ok: all checksums match\n";
        return 0;
      }
      for (const auto& i : issues)
        std::cerr << "mismatch: " << i.path << (i.actual.empty() ? " (missing)" : "") << "\n";
      return 4;
    }

    cbapm::Experiment exp = make_experiment(opts);
    std::cout << "run directory: " << exp.run_dir().string() << "\n";
    if (cmd == "synth")
      exp.run_synth();
    else if (cmd == "preprocess")
      exp.run_preprocess();
    else if (cmd == "train-macro")
      exp.run_train_macro();
    else if (cmd == "train")
      exp.run_train();
    else if (cmd == "evaluate")
      exp.run_evaluate();
    else if (cmd == "portfolio")
      exp.run_portfolio();
    else if (cmd == "diagnostics")
      exp.run_diagnostics();
    else if (cmd == "pipeline")
      exp.run_pipeline(exp.config().paths.panel_csv.empty());
    std::cout << cmd << ": done\n";
    return 0;
  } catch (const cbapm::StageError& e) {
    std::cerr << e.what() << "\n";
    return e.exit_code;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
}
