// ilflow command-line driver: sequential workflow
// train-expert -> collect -> train-flow -> train-il -> eval / calibrate,
// plus the derivation verifier and the flow sampling probe.

#include <cstdlib>
#include <fstream>
#include <iostream>
#include <optional>
#include <string>

#include <CLI11.hpp>
#include <Eigen/Core>

#include "ilflow/pipeline/pipeline.hpp"

namespace {

struct CommonArgs {
  std::string config_path;
  std::optional<std::uint64_t> seed;
  std::optional<std::string> output_dir;
  std::string run_id;
  bool quiet = false;
};

void add_common(CLI::App* cmd, CommonArgs& args, bool config_required = true) {
  auto* opt = cmd->add_option("--config", args.config_path, "run configuration JSON");
  if (config_required) opt->required();
  cmd->add_option("--seed", [&args](const CLI::results_t& r) {
    args.seed = std::stoull(r[0]);
    return true;
  }, "override the config seed");
  cmd->add_option("--output-dir", [&args](const CLI::results_t& r) {
    args.output_dir = r[0];
    return true;
  }, "override the config output directory");
  cmd->add_option("--run-id", args.run_id, "run directory name (default: timestamp-seed)");
  cmd->add_flag("--quiet", args.quiet, "suppress progress output");
}

ilflow::RunConfig resolve_config(const CommonArgs& args) {
  ilflow::RunConfig config = ilflow::load_config(args.config_path);
  if (args.seed) config.seed = *args.seed;
  if (args.output_dir) config.output_dir = *args.output_dir;
  return config;
}

ilflow::RunPaths resolve_run(const ilflow::RunConfig& config, const CommonArgs& args,
                             bool create) {
  std::string run_id = args.run_id.empty() ? ilflow::default_run_id(config) : args.run_id;
  return ilflow::open_run(config, run_id, create);
}

}  // namespace

int main(int argc, char** argv) {
  if (const char* threads = std::getenv("ILFLOW_NUM_THREADS")) {
    Eigen::setNbThreads(std::atoi(threads));
  }

  CLI::App app{"ilflow: imitation from observation via noise-conditioned flow rewards"};
  app.require_subcommand(1);

  CommonArgs args;

  auto* cmd_expert = app.add_subcommand("train-expert", "train the ground-truth-reward expert");
  add_common(cmd_expert, args);

  auto* cmd_collect = app.add_subcommand("collect", "collect demonstration datasets");
  std::string collect_kind = "all";
  std::optional<int> collect_n;
  add_common(cmd_collect, args);
  cmd_collect->add_option("--kind", collect_kind, "expert | noisy_expert | random | all");
  cmd_collect->add_option("--n", [&collect_n](const CLI::results_t& r) {
    collect_n = std::stoi(r[0]);
    return true;
  }, "override trajectory count for the chosen kind");

  auto* cmd_flow = app.add_subcommand("train-flow", "fit the transition density model");
  add_common(cmd_flow, args);

  auto* cmd_il = app.add_subcommand("train-il", "imitation learning against the flow reward");
  add_common(cmd_il, args);

  auto* cmd_eval = app.add_subcommand("eval", "evaluate a trained agent");
  std::string eval_agent = "il";
  std::optional<int> eval_n;
  add_common(cmd_eval, args);
  cmd_eval->add_option("--agent", eval_agent, "expert | il");
  cmd_eval->add_option("--n", [&eval_n](const CLI::results_t& r) {
    eval_n = std::stoi(r[0]);
    return true;
  }, "number of evaluation rollouts");

  auto* cmd_calibrate = app.add_subcommand("calibrate", "reward calibration report");
  double h_eval = 0.0;
  add_common(cmd_calibrate, args);
  cmd_calibrate->add_option("--h-eval", h_eval, "noise level for evaluation (default 0)");

  auto* cmd_verify = app.add_subcommand("verify", "run the derivation oracles");
  std::uint64_t verify_seed = 0;
  std::string verify_report;
  bool verify_quiet = false;
  cmd_verify->add_option("--seed", verify_seed, "oracle seed");
  cmd_verify->add_option("--report", verify_report, "write the JSON report to this path");
  cmd_verify->add_flag("--quiet", verify_quiet, "suppress progress output");

  auto* cmd_sample = app.add_subcommand("sample-flow", "draw next-state samples from the flow");
  std::string sample_state;
  std::vector<double> sample_h;
  int sample_n = 1000;
  add_common(cmd_sample, args);
  cmd_sample->add_option("--state", sample_state, "conditioning state, comma-separated")
      ->required();
  cmd_sample->add_option("--h-values", sample_h, "noise levels to sample at")->expected(-1);
  cmd_sample->add_option("--n", sample_n, "samples per noise level");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    if (e.get_exit_code() == 0) return app.exit(e);  // --help
    app.exit(e);
    return 1;
  }

  try {
    if (cmd_verify->parsed()) {
      auto outcome = ilflow::run_verification(verify_seed, verify_quiet);
      if (!verify_report.empty()) {
        std::ofstream out(verify_report, std::ios::trunc);
        out << outcome.report_json << '\n';
      } else if (!verify_quiet) {
        std::cout << outcome.report_json << std::endl;
      }
      return outcome.passed ? 0 : 2;
    }

    ilflow::RunConfig config = resolve_config(args);
    if (cmd_expert->parsed()) {
      auto paths = resolve_run(config, args, true);
      ilflow::stage_train_expert(config, paths, args.quiet);
    } else if (cmd_collect->parsed()) {
      auto paths = resolve_run(config, args, true);
      ilflow::stage_collect(config, paths, collect_kind, collect_n, args.quiet);
    } else if (cmd_flow->parsed()) {
      auto paths = resolve_run(config, args, true);
      ilflow::stage_train_flow(config, paths, args.quiet);
    } else if (cmd_il->parsed()) {
      auto paths = resolve_run(config, args, true);
      ilflow::stage_train_il(config, paths, args.quiet);
    } else if (cmd_eval->parsed()) {
      auto paths = resolve_run(config, args, false);
      ilflow::stage_eval(config, paths, eval_agent, eval_n, args.quiet);
    } else if (cmd_calibrate->parsed()) {
      auto paths = resolve_run(config, args, false);
      ilflow::stage_calibrate(config, paths, h_eval, args.quiet);
    } else if (cmd_sample->parsed()) {
      auto paths = resolve_run(config, args, false);
      if (sample_h.empty()) {
        double hm = config.flow.h_max;
        sample_h = {0.0, hm / 4.0, hm / 2.0, hm};
      }
      ilflow::stage_sample_flow(config, paths, sample_state, sample_h, sample_n, args.quiet);
    }
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << std::endl;
    return 2;
  }
  return 0;
}
