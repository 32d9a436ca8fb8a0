#include "ilflow/pipeline/pipeline.hpp"

#include <algorithm>
#include <chrono>
#include <cstdint>
#include <ctime>
#include <fstream>
#include <iostream>
#include <memory>
#include <numeric>
#include <sstream>

#include <json.hpp>

#include "ilflow/analysis/analysis.hpp"

namespace ilflow {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

json read_manifest(const RunPaths& paths) {
  std::ifstream in(paths.manifest_path());
  if (!in) throw Error("manifest: cannot open '" + paths.manifest_path().string() + "'");
  return json::parse(in);
}

void write_manifest(const RunPaths& paths, const json& manifest) {
  std::ofstream out(paths.manifest_path(), std::ios::trunc);
  if (!out) throw Error("manifest: cannot write '" + paths.manifest_path().string() + "'");
  out << manifest.dump(2) << '\n';
}

std::string timestamp_utc() {
  auto now = std::chrono::system_clock::now();
  std::time_t t = std::chrono::system_clock::to_time_t(now);
  char buf[32];
  std::tm tm_utc{};
  gmtime_r(&t, &tm_utc);
  std::strftime(buf, sizeof(buf), "%Y%m%d-%H%M%S", &tm_utc);
  return buf;
}

struct StageTimer {
  std::chrono::steady_clock::time_point start = std::chrono::steady_clock::now();
  double seconds() const {
    return std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
  }
};

PolicyFn expert_policy_from_run(const RunConfig& config, const RunPaths& paths,
                                std::shared_ptr<Agent>& keep_alive) {
  fs::path ckpt = manifest_artifact(paths, "expert_checkpoint", "train-expert");
  fs::path sidecar = manifest_artifact(paths, "expert_sidecar", "train-expert");
  auto loaded = Agent::load(ckpt.string(), sidecar.string());
  keep_alive = std::make_shared<Agent>(std::move(loaded.agent));
  auto env = make_env(config.env, config.horizon);
  const EnvSpec spec = env->spec();
  Agent* agent = keep_alive.get();
  return [agent, spec](const Vector& state, double t_H) {
    RowVector obs = make_observation(state, t_H);
    Rng dummy(0);
    RowVector a = agent->act(obs, false, dummy).action;
    Vector out(spec.action_dim);
    for (int i = 0; i < spec.action_dim; ++i) {
      out[i] = spec.action_min[i] + (a[i] + 1.0) * 0.5 * (spec.action_max[i] - spec.action_min[i]);
    }
    return out;
  };
}

}  // namespace

RunLock::RunLock(const fs::path& run_root) : lock_path_(run_root / ".lock") {
  std::error_code ec;
  fs::create_directories(run_root, ec);
  FILE* f = std::fopen(lock_path_.c_str(), "wx");
  if (!f) {
    throw Error("run directory is locked by another stage ('" + lock_path_.string() +
                "' exists)");
  }
  std::fclose(f);
}

RunLock::~RunLock() {
  std::error_code ec;
  fs::remove(lock_path_, ec);
}

std::string default_run_id(const RunConfig& config) {
  return timestamp_utc() + "-seed" + std::to_string(config.seed);
}

RunPaths open_run(const RunConfig& config, const std::string& run_id, bool create) {
  RunPaths paths;
  paths.root = fs::path(config.output_dir) / run_id;
  paths.datasets = paths.root / "datasets";
  paths.checkpoints = paths.root / "checkpoints";
  paths.logs = paths.root / "logs";
  paths.reports = paths.root / "reports";
  if (create) {
    fs::create_directories(paths.datasets);
    fs::create_directories(paths.checkpoints);
    fs::create_directories(paths.logs);
    fs::create_directories(paths.reports);
    if (!fs::exists(paths.manifest_path())) {
      json manifest{{"format_version", 1},
                    {"run_id", run_id},
                    {"created", timestamp_utc()},
                    {"config", json::parse(config_to_json_text(config))},
                    {"artifacts", json::object()},
                    {"stages", json::array()}};
      write_manifest(paths, manifest);
    }
  } else if (!fs::exists(paths.manifest_path())) {
    throw Error("run '" + paths.root.string() + "' does not exist (no manifest)");
  }
  return paths;
}

std::string file_hash(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error("hash: cannot open '" + path.string() + "'");
  std::uint64_t h = 1469598103934665603ULL;
  char buf[8192];
  while (in.read(buf, sizeof(buf)) || in.gcount() > 0) {
    for (std::streamsize i = 0; i < in.gcount(); ++i) {
      h ^= static_cast<unsigned char>(buf[i]);
      h *= 1099511628211ULL;
    }
    if (!in) break;
  }
  std::ostringstream out;
  out << std::hex << h;
  return out.str();
}

void manifest_record_artifact(const RunPaths& paths, const std::string& role,
                              const fs::path& file) {
  json manifest = read_manifest(paths);
  manifest["artifacts"][role] = {
      {"path", fs::relative(file, paths.root).string()},
      {"hash", file_hash(file)}};
  write_manifest(paths, manifest);
}

fs::path manifest_artifact(const RunPaths& paths, const std::string& role,
                           const std::string& produced_by) {
  json manifest = read_manifest(paths);
  if (!manifest["artifacts"].contains(role)) {
    throw Error("missing artifact '" + role + "' in run manifest; run the '" + produced_by +
                "' stage first");
  }
  return paths.root / manifest["artifacts"][role]["path"].get<std::string>();
}

void manifest_record_stage(const RunPaths& paths, const std::string& stage,
                           double wall_time_s, std::uint64_t seed) {
  json manifest = read_manifest(paths);
  manifest["stages"].push_back({{"stage", stage},
                                {"wall_time_s", wall_time_s},
                                {"seed", seed},
                                {"completed", timestamp_utc()}});
  write_manifest(paths, manifest);
}

void stage_train_expert(const RunConfig& config, const RunPaths& paths, bool quiet) {
  RunLock lock(paths.root);
  StageTimer timer;
  auto env = make_env(config.env, config.horizon);
  if (!quiet) {
    std::cout << "[train-expert] env=" << config.env << " steps=" << config.expert_steps
              << " seed=" << config.seed << std::endl;
  }
  SacTrainConfig cfg = config.sac_train_config(config.expert_steps);
  auto result = train_expert(*env, cfg, config.seed);

  fs::path ckpt = paths.checkpoints / "expert.ckpt";
  fs::path sidecar = paths.checkpoints / "expert.json";
  result.agent.save(ckpt.string(), sidecar.string(), config.horizon, config.env, false,
                    cfg.noise);
  fs::path log_path = paths.logs / "expert_train.csv";
  write_train_log_csv(log_path.string(), result.log);
  manifest_record_artifact(paths, "expert_checkpoint", ckpt);
  manifest_record_artifact(paths, "expert_sidecar", sidecar);
  manifest_record_artifact(paths, "expert_train_log", log_path);
  manifest_record_stage(paths, "train-expert", timer.seconds(), config.seed);
  if (!quiet && !result.log.empty()) {
    std::cout << "[train-expert] final eval return " << result.log.back().eval_return_mean
              << " +- " << result.log.back().eval_return_std << std::endl;
  }
}

void stage_collect(const RunConfig& config, const RunPaths& paths, const std::string& kind,
                   std::optional<int> n_override, bool quiet) {
  RunLock lock(paths.root);
  StageTimer timer;
  auto env = make_env(config.env, config.horizon);
  std::shared_ptr<Agent> keep_alive;
  PolicyFn expert;  // loaded on demand; random collection needs no expert
  auto expert_policy = [&]() -> PolicyFn& {
    if (!expert) expert = expert_policy_from_run(config, paths, keep_alive);
    return expert;
  };

  auto save_kind = [&](const std::string& k) {
    Rng seed_rng(config.seed);
    if (k == "expert") {
      int n = n_override.value_or(config.dataset.n_traj);
      auto trajs = collect_expert(*env, expert_policy(), n, seed_rng.derive(1).seed());
      fs::path p = paths.datasets / "expert.csv";
      save_trajectories(p.string(), trajs, env->spec(), "expert", config.seed);
      manifest_record_artifact(paths, "dataset_expert", p);
      if (!quiet) std::cout << "[collect] expert: " << n << " trajectories" << std::endl;
    } else if (k == "noisy_expert") {
      int n = n_override.value_or(config.dataset.n_noisy);
      auto trajs =
          collect_noisy_expert(*env, expert_policy(), n, config.dataset.l_max,
                               seed_rng.derive(2).seed());
      fs::path p = paths.datasets / "noisy_expert.csv";
      save_trajectories(p.string(), trajs, env->spec(), "noisy_expert", config.seed,
                        config.dataset.l_max);
      manifest_record_artifact(paths, "dataset_noisy_expert", p);
      if (!quiet) std::cout << "[collect] noisy_expert: " << n << " trajectories" << std::endl;
    } else if (k == "random") {
      int n = n_override.value_or(config.dataset.n_random);
      auto trajs = collect_random(*env, n, seed_rng.derive(3).seed());
      fs::path p = paths.datasets / "random.csv";
      save_trajectories(p.string(), trajs, env->spec(), "random", config.seed);
      manifest_record_artifact(paths, "dataset_random", p);
      if (!quiet) std::cout << "[collect] random: " << n << " trajectories" << std::endl;
    } else {
      throw Error("collect: unknown kind '" + k + "'");
    }
  };

  if (kind == "all") {
    save_kind("expert");
    save_kind("noisy_expert");
    save_kind("random");
  } else {
    save_kind(kind);
  }
  manifest_record_stage(paths, "collect", timer.seconds(), config.seed);
}

void stage_train_flow(const RunConfig& config, const RunPaths& paths, bool quiet) {
  RunLock lock(paths.root);
  StageTimer timer;
  fs::path expert_csv = manifest_artifact(paths, "dataset_expert", "collect");
  EnvSpec spec;
  auto trajs = load_trajectories(expert_csv.string(), &spec);
  TransitionDataset transitions =
      to_transitions(trajs, spec, config.dataset.subset, config.seed);
  fs::path trans_path = paths.datasets / "transitions_expert.csv";
  save_transitions(trans_path.string(), transitions);
  manifest_record_artifact(paths, "flow_transitions", trans_path);
  if (!quiet) {
    std::cout << "[train-flow] " << transitions.size() << " transition pairs from "
              << (config.dataset.subset ? *config.dataset.subset
                                        : static_cast<int>(trajs.size()))
              << " trajectories, " << config.flow.epochs << " epochs" << std::endl;
  }

  auto result = train_flow(transitions, config.flow_config(spec.state_dim),
                           config.flow_train_options());
  fs::path ckpt = paths.checkpoints / "flow.ckpt";
  fs::path sidecar = paths.checkpoints / "flow.json";
  result.model.save(ckpt.string(), sidecar.string());
  fs::path loss_path = paths.logs / "flow_loss.csv";
  write_loss_log_csv(loss_path.string(), result.loss_log);
  manifest_record_artifact(paths, "flow_checkpoint", ckpt);
  manifest_record_artifact(paths, "flow_sidecar", sidecar);
  manifest_record_artifact(paths, "flow_loss_log", loss_path);
  manifest_record_stage(paths, "train-flow", timer.seconds(), config.seed);
  if (!quiet) {
    std::cout << "[train-flow] best val NLL " << result.best_val_nll << " at epoch "
              << result.best_epoch << std::endl;
  }
}

void stage_train_il(const RunConfig& config, const RunPaths& paths, bool quiet) {
  RunLock lock(paths.root);
  StageTimer timer;
  fs::path ckpt = manifest_artifact(paths, "flow_checkpoint", "train-flow");
  fs::path sidecar = manifest_artifact(paths, "flow_sidecar", "train-flow");
  ConditionalFlow flow = ConditionalFlow::load(ckpt.string(), sidecar.string());
  auto env = make_env(config.env, config.horizon);
  if (!quiet) {
    std::cout << "[train-il] env=" << config.env << " steps=" << config.il_steps
              << " seed=" << config.seed << std::endl;
  }
  SacTrainConfig cfg = config.sac_train_config(config.il_steps);
  auto result = train_imitation(*env, flow, cfg, config.seed);

  fs::path agent_ckpt = paths.checkpoints / "il_agent.ckpt";
  fs::path agent_sidecar = paths.checkpoints / "il_agent.json";
  result.agent.save(agent_ckpt.string(), agent_sidecar.string(), config.horizon, config.env,
                    true, flow.config().noise);
  fs::path log_path = paths.logs / "il_train.csv";
  write_train_log_csv(log_path.string(), result.log);
  manifest_record_artifact(paths, "il_checkpoint", agent_ckpt);
  manifest_record_artifact(paths, "il_sidecar", agent_sidecar);
  manifest_record_artifact(paths, "il_train_log", log_path);
  if (!result.warmup_trajectories.empty()) {
    fs::path warmup_path = paths.datasets / "random_warmup.csv";
    save_trajectories(warmup_path.string(), result.warmup_trajectories, env->spec(), "random",
                      config.seed);
    manifest_record_artifact(paths, "dataset_random_warmup", warmup_path);
  }
  manifest_record_stage(paths, "train-il", timer.seconds(), config.seed);
  if (!quiet && !result.log.empty()) {
    std::cout << "[train-il] final eval return " << result.log.back().eval_return_mean
              << " +- " << result.log.back().eval_return_std << std::endl;
  }
}

void stage_eval(const RunConfig& config, const RunPaths& paths, const std::string& which,
                std::optional<int> n_rollouts, bool quiet) {
  RunLock lock(paths.root);
  StageTimer timer;
  std::string role = which == "expert" ? "expert_checkpoint" : "il_checkpoint";
  std::string sidecar_role = which == "expert" ? "expert_sidecar" : "il_sidecar";
  std::string producer = which == "expert" ? "train-expert" : "train-il";
  if (which != "expert" && which != "il") throw Error("eval: --agent must be expert or il");
  fs::path ckpt = manifest_artifact(paths, role, producer);
  fs::path sidecar = manifest_artifact(paths, sidecar_role, producer);
  auto loaded = Agent::load(ckpt.string(), sidecar.string());
  auto env = make_env(config.env, config.horizon);
  int n = n_rollouts.value_or(config.eval_rollouts);
  EvalResult res = evaluate(*env, loaded.agent, n, Rng(config.seed).derive(77).seed());
  json report{{"agent", which},
              {"rollouts", n},
              {"return_mean", res.mean},
              {"return_std", res.stddev},
              {"returns", res.returns}};
  fs::path report_path = paths.reports / ("eval_" + which + ".json");
  {
    std::ofstream out(report_path, std::ios::trunc);
    out << report.dump(2) << '\n';
  }
  manifest_record_artifact(paths, "eval_" + which, report_path);
  manifest_record_stage(paths, "eval", timer.seconds(), config.seed);
  std::cout << "[eval] " << which << " return " << res.mean << " +- " << res.stddev << " ("
            << n << " rollouts)" << std::endl;
  (void)quiet;
}

void stage_calibrate(const RunConfig& config, const RunPaths& paths, double h_eval,
                     bool quiet) {
  RunLock lock(paths.root);
  StageTimer timer;
  ConditionalFlow flow =
      ConditionalFlow::load(manifest_artifact(paths, "flow_checkpoint", "train-flow").string(),
                            manifest_artifact(paths, "flow_sidecar", "train-flow").string());
  auto expert_trajs =
      load_trajectories(manifest_artifact(paths, "dataset_expert", "collect").string());
  auto noisy_trajs =
      load_trajectories(manifest_artifact(paths, "dataset_noisy_expert", "collect").string());
  auto random_trajs =
      load_trajectories(manifest_artifact(paths, "dataset_random", "collect").string());

  // Held-out experts: the complement of the flow's training subset.
  std::vector<Trajectory> held_out;
  if (config.dataset.subset && *config.dataset.subset < static_cast<int>(expert_trajs.size())) {
    std::vector<int> order(expert_trajs.size());
    std::iota(order.begin(), order.end(), 0);
    Rng rng(config.seed);
    std::shuffle(order.begin(), order.end(), rng.engine());
    for (std::size_t i = *config.dataset.subset; i < order.size(); ++i) {
      held_out.push_back(expert_trajs[order[i]]);
    }
  } else {
    held_out = expert_trajs;
  }

  CalibrationInputs inputs;
  inputs.expert = &held_out;
  inputs.noisy_expert = &noisy_trajs;
  inputs.random = &random_trajs;
  CalibrationReport report = calibrate(flow, inputs, h_eval);

  fs::path traj_csv = paths.reports / "calibration_trajectories.csv";
  fs::path step_csv = paths.reports / "calibration_steps.csv";
  fs::path summary = paths.reports / "calibration_summary.json";
  write_calibration_csvs(report, traj_csv.string(), step_csv.string(), summary.string());
  manifest_record_artifact(paths, "calibration_trajectories", traj_csv);
  manifest_record_artifact(paths, "calibration_steps", step_csv);
  manifest_record_artifact(paths, "calibration_summary", summary);
  manifest_record_stage(paths, "calibrate", timer.seconds(), config.seed);
  if (!quiet) {
    std::cout << "[calibrate] trajectory Spearman (noisy) " << report.spearman_trajectory_noisy
              << ", expert mean lp " << report.expert_mean_log_prob << ", random mean lp "
              << report.random_mean_log_prob << std::endl;
  }
}

void stage_sample_flow(const RunConfig& config, const RunPaths& paths,
                       const std::string& state_csv, const std::vector<double>& h_values,
                       int n_samples, bool quiet) {
  RunLock lock(paths.root);
  StageTimer timer;
  ConditionalFlow flow =
      ConditionalFlow::load(manifest_artifact(paths, "flow_checkpoint", "train-flow").string(),
                            manifest_artifact(paths, "flow_sidecar", "train-flow").string());
  int d = flow.config().state_dim;
  RowVector s(d);
  {
    std::stringstream ss(state_csv);
    std::string cell;
    for (int i = 0; i < d; ++i) {
      if (!std::getline(ss, cell, ',')) {
        throw Error("sample-flow: --state needs " + std::to_string(d) + " comma-separated values");
      }
      s[i] = std::stod(cell);
    }
  }
  Rng rng(Rng(config.seed).derive(99).seed());
  fs::path out_path = paths.reports / "flow_samples.csv";
  {
    std::ofstream out(out_path, std::ios::trunc);
    out << "h,sample_index";
    for (int j = 0; j < d; ++j) out << ",s_next_" << j;
    out << '\n';
    for (double h : h_values) {
      Matrix samples = flow.sample(s, h, n_samples, rng);
      for (Index i = 0; i < samples.rows(); ++i) {
        out << h << ',' << i;
        for (int j = 0; j < d; ++j) out << ',' << samples(i, j);
        out << '\n';
      }
    }
  }
  manifest_record_artifact(paths, "flow_samples", out_path);
  manifest_record_stage(paths, "sample-flow", timer.seconds(), config.seed);
  if (!quiet) {
    std::cout << "[sample-flow] wrote " << n_samples << " samples at " << h_values.size()
              << " noise levels" << std::endl;
  }
}

VerifyOutcome run_verification(std::uint64_t seed, bool quiet) {
  Rng rng(seed);
  json report;
  bool ok = true;

  // Entropy identity and KL decomposition over random tabular MDPs.
  double max_entropy_diff = 0.0;
  double max_decomp_diff = 0.0;
  double max_self_kl = 0.0;
  const int instances = 100;
  for (int i = 0; i < instances; ++i) {
    Rng mdp_rng = rng.derive(i);
    int ns = 2 + static_cast<int>(mdp_rng.below(3));   // 2..4
    int na = 1 + static_cast<int>(mdp_rng.below(3));   // 1..3
    int horizon = 1 + static_cast<int>(mdp_rng.below(5));  // 1..5
    DiscreteMDP mdp = DiscreteMDP::random(ns, na, horizon, mdp_rng);
    auto random_policy = [&](Rng& r) {
      PolicyTable p(ns, na);
      for (int s = 0; s < ns; ++s) {
        double total = 0.0;
        for (int a = 0; a < na; ++a) {
          p(s, a) = -std::log(r.uniform(1e-12, 1.0));
          total += p(s, a);
        }
        p.row(s) /= total;
      }
      return p;
    };
    PolicyTable policy = random_policy(mdp_rng);
    PolicyTable expert = random_policy(mdp_rng);

    auto ent = verify_entropy_decomposition(mdp, policy);
    max_entropy_diff = std::max(max_entropy_diff, ent.abs_diff);

    auto rkl = exact_rkl(mdp, policy, expert);
    max_decomp_diff =
        std::max(max_decomp_diff, std::abs(rkl.rkl - (rkl.cross_term - rkl.entropy_term)));
    auto self = exact_rkl(mdp, policy, policy);
    max_self_kl = std::max(max_self_kl, std::abs(self.rkl));
  }
  bool entropy_ok = max_entropy_diff < 1e-12;
  bool decomp_ok = max_decomp_diff < 1e-12 && max_self_kl < 1e-12;
  ok = ok && entropy_ok && decomp_ok;
  report["entropy_identity"] = {{"instances", instances},
                                {"max_abs_diff", max_entropy_diff},
                                {"tolerance", 1e-12},
                                {"passed", entropy_ok}};
  report["rkl_decomposition"] = {{"instances", instances},
                                 {"max_recombination_diff", max_decomp_diff},
                                 {"max_self_kl", max_self_kl},
                                 {"tolerance", 1e-12},
                                 {"passed", decomp_ok}};

  // Change-of-variables residual on the linear env.
  DoubleIntegrator1D env;
  auto cov = verify_change_of_variables(env, 0.0, 0.5, 100000, rng.derive(1234).seed());
  bool cov_ok = cov.residual < 3.0 * cov.mc_standard_error &&
                std::abs(cov.logdet_term - std::log(0.05)) < 1e-12;
  DoubleIntegrator1D env_unit(200, 1.0);
  auto cov_unit = verify_change_of_variables(env_unit, 0.0, 0.5, 1000, rng.derive(4321).seed());
  bool unit_ok = std::abs(cov_unit.state_entropy - cov_unit.action_entropy) == 0.0;
  ok = ok && cov_ok && unit_ok;
  report["change_of_variables"] = {{"state_entropy", cov.state_entropy},
                                   {"action_entropy", cov.action_entropy},
                                   {"logdet_term", cov.logdet_term},
                                   {"residual", cov.residual},
                                   {"mc_standard_error", cov.mc_standard_error},
                                   {"dt1_exactly_zero", unit_ok},
                                   {"passed", cov_ok && unit_ok}};

  VerifyOutcome outcome;
  outcome.passed = ok;
  outcome.report_json = report.dump(2);
  if (!quiet) {
    std::cout << "[verify] entropy identity: " << (entropy_ok ? "ok" : "FAIL")
              << " (max diff " << max_entropy_diff << ")\n"
              << "[verify] RKL decomposition: " << (decomp_ok ? "ok" : "FAIL")
              << " (max diff " << max_decomp_diff << ")\n"
              << "[verify] change of variables: " << ((cov_ok && unit_ok) ? "ok" : "FAIL")
              << " (residual " << cov.residual << ", 3*SE " << 3.0 * cov.mc_standard_error
              << ")" << std::endl;
  }
  return outcome;
}

}  // namespace ilflow
