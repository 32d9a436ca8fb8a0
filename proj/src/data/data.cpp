#include "ilflow/data/data.hpp"

#include <algorithm>
#include <fstream>
#include <numeric>
#include <sstream>

#include <json.hpp>

namespace ilflow {

using nlohmann::json;

namespace {
constexpr int kFormatVersion = 1;

json env_spec_to_json(const EnvSpec& spec) {
  return json{{"name", spec.name},
              {"state_dim", spec.state_dim},
              {"action_dim", spec.action_dim},
              {"action_min", std::vector<double>(spec.action_min.begin(), spec.action_min.end())},
              {"action_max", std::vector<double>(spec.action_max.begin(), spec.action_max.end())},
              {"horizon", spec.horizon},
              {"dt", spec.dt}};
}

EnvSpec env_spec_from_json(const json& j) {
  EnvSpec spec;
  spec.name = j.at("name").get<std::string>();
  spec.state_dim = j.at("state_dim").get<int>();
  spec.action_dim = j.at("action_dim").get<int>();
  auto lo = j.at("action_min").get<std::vector<double>>();
  auto hi = j.at("action_max").get<std::vector<double>>();
  spec.action_min = Eigen::Map<const Vector>(lo.data(), static_cast<Index>(lo.size()));
  spec.action_max = Eigen::Map<const Vector>(hi.data(), static_cast<Index>(hi.size()));
  spec.horizon = j.at("horizon").get<int>();
  spec.dt = j.at("dt").get<double>();
  return spec;
}

void write_csv_value(std::ostream& out, double v) {
  char buf[32];
  std::snprintf(buf, sizeof(buf), "%.17g", v);
  out << buf;
}
}  // namespace

Trajectory rollout(const Env& env, const PolicyFn& policy, Rng& rng, double action_noise_L) {
  const EnvSpec& spec = env.spec();
  Trajectory traj;
  traj.env_name = spec.name;
  traj.seed = rng.seed();
  traj.states.resize(spec.horizon + 1, spec.state_dim);
  traj.actions.resize(spec.horizon, spec.action_dim);
  traj.rewards.resize(spec.horizon);
  Episode ep(env, rng);
  traj.states.row(0) = ep.state().transpose();
  for (int t = 0; t < spec.horizon; ++t) {
    Vector a = policy(ep.state(), ep.time_to_horizon());
    if (action_noise_L > 0.0) {
      for (Index i = 0; i < a.size(); ++i) a[i] += rng.normal(0.0, action_noise_L);
    }
    auto step = ep.step(a);
    traj.actions.row(t) = step.applied_action.transpose();
    traj.rewards[t] = step.reward;
    traj.states.row(t + 1) = step.next_state.transpose();
  }
  return traj;
}

std::vector<Trajectory> collect_expert(const Env& env, const PolicyFn& expert_policy,
                                       int n_traj, std::uint64_t seed) {
  Rng master(seed);
  std::vector<Trajectory> out;
  out.reserve(n_traj);
  for (int i = 0; i < n_traj; ++i) {
    Rng rng = master.derive(i);
    out.push_back(rollout(env, expert_policy, rng));
  }
  return out;
}

std::vector<Trajectory> collect_noisy_expert(const Env& env, const PolicyFn& expert_policy,
                                             int n_traj, double L_max, std::uint64_t seed) {
  if (L_max <= 0.0) throw Error("collect_noisy_expert: L_max must be > 0");
  Rng master(seed);
  std::vector<Trajectory> out;
  out.reserve(n_traj);
  for (int i = 0; i < n_traj; ++i) {
    Rng rng = master.derive(i);
    double L = rng.uniform(0.0, L_max);
    Trajectory traj = rollout(env, expert_policy, rng, L);
    traj.noise_level = L;
    out.push_back(std::move(traj));
  }
  return out;
}

std::vector<Trajectory> collect_random(const Env& env, int n_traj, std::uint64_t seed) {
  Rng master(seed);
  const EnvSpec& spec = env.spec();
  std::vector<Trajectory> out;
  out.reserve(n_traj);
  for (int i = 0; i < n_traj; ++i) {
    Rng rng = master.derive(i);
    auto uniform_policy = [&spec, &rng](const Vector&, double) {
      Vector a(spec.action_dim);
      for (Index j = 0; j < a.size(); ++j) a[j] = rng.uniform(spec.action_min[j], spec.action_max[j]);
      return a;
    };
    out.push_back(rollout(env, uniform_policy, rng));
  }
  return out;
}

TransitionDataset to_transitions(const std::vector<Trajectory>& trajs, const EnvSpec& spec,
                                 std::optional<int> subset_size, std::uint64_t seed,
                                 const std::string& kind) {
  std::vector<int> order(trajs.size());
  std::iota(order.begin(), order.end(), 0);
  int take = static_cast<int>(trajs.size());
  if (subset_size) {
    if (*subset_size > take) {
      throw Error("to_transitions: subset_size " + std::to_string(*subset_size) +
                  " exceeds " + std::to_string(take) + " trajectories");
    }
    Rng rng(seed);
    std::shuffle(order.begin(), order.end(), rng.engine());
    take = *subset_size;
  }
  Index total = 0;
  for (int i = 0; i < take; ++i) total += trajs[order[i]].length();
  TransitionDataset ds;
  ds.spec = spec;
  ds.kind = kind;
  ds.seed = seed;
  ds.s.resize(total, spec.state_dim);
  ds.s_next.resize(total, spec.state_dim);
  ds.provenance.reserve(total);
  Index at = 0;
  for (int i = 0; i < take; ++i) {
    const Trajectory& traj = trajs[order[i]];
    for (int t = 0; t < traj.length(); ++t) {
      ds.s.row(at) = traj.states.row(t);
      ds.s_next.row(at) = traj.states.row(t + 1);
      ds.provenance.emplace_back(order[i], t);
      ++at;
    }
  }
  return ds;
}

void validate_trajectory(const Env& env, const Trajectory& traj, double tol) {
  Vector s = traj.states.row(0).transpose();
  for (int t = 0; t < traj.length(); ++t) {
    auto [next, reward] = env.step(s, traj.actions.row(t).transpose());
    double err = (next.transpose() - traj.states.row(t + 1)).norm();
    if (err > tol) {
      throw Error("trajectory replay mismatch at step " + std::to_string(t) +
                  " (error " + std::to_string(err) + ")");
    }
    s = next;
  }
}

void save_trajectories(const std::string& path, const std::vector<Trajectory>& trajs,
                       const EnvSpec& spec, const std::string& kind, std::uint64_t seed,
                       std::optional<double> l_max) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw Error("save_trajectories: cannot open '" + path + "'");
  json header{{"format_version", kFormatVersion},
              {"env", env_spec_to_json(spec)},
              {"kind", kind},
              {"seed", seed},
              {"count", trajs.size()}};
  if (l_max) header["l_max"] = *l_max;
  out << header.dump() << '\n';
  bool noisy = kind == "noisy_expert";
  for (std::size_t i = 0; i < trajs.size(); ++i) {
    const Trajectory& traj = trajs[i];
    for (int t = 0; t < traj.length(); ++t) {
      out << i << ',' << t;
      for (Index j = 0; j < traj.states.cols(); ++j) {
        out << ',';
        write_csv_value(out, traj.states(t, j));
      }
      for (Index j = 0; j < traj.actions.cols(); ++j) {
        out << ',';
        write_csv_value(out, traj.actions(t, j));
      }
      out << ',';
      write_csv_value(out, traj.rewards[t]);
      if (noisy) {
        out << ',';
        write_csv_value(out, traj.noise_level.value_or(0.0));
      }
      out << '\n';
    }
  }
  if (!out) throw Error("save_trajectories: write failed for '" + path + "'");
}

std::vector<Trajectory> load_trajectories(const std::string& path, EnvSpec* spec_out,
                                          std::string* kind_out) {
  std::ifstream in(path);
  if (!in) throw Error("load_trajectories: cannot open '" + path + "'");
  std::string line;
  if (!std::getline(in, line)) throw Error("load_trajectories: missing header");
  json header = json::parse(line);
  EnvSpec spec = env_spec_from_json(header.at("env"));
  std::string kind = header.at("kind").get<std::string>();
  bool noisy = kind == "noisy_expert";
  auto env = make_env(spec.name, spec.horizon);

  std::size_t count = header.at("count").get<std::size_t>();
  std::vector<Trajectory> trajs(count);
  for (auto& traj : trajs) {
    traj.env_name = spec.name;
    traj.states.resize(spec.horizon + 1, spec.state_dim);
    traj.actions.resize(spec.horizon, spec.action_dim);
    traj.rewards.resize(spec.horizon);
  }
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    std::stringstream ss(line);
    std::string cell;
    auto next_cell = [&]() {
      if (!std::getline(ss, cell, ',')) throw Error("load_trajectories: short row");
      return cell;
    };
    std::size_t traj_id = std::stoul(next_cell());
    int t = std::stoi(next_cell());
    if (traj_id >= count) throw Error("load_trajectories: bad trajectory id");
    Trajectory& traj = trajs[traj_id];
    for (int j = 0; j < spec.state_dim; ++j) traj.states(t, j) = std::stod(next_cell());
    for (int j = 0; j < spec.action_dim; ++j) traj.actions(t, j) = std::stod(next_cell());
    traj.rewards[t] = std::stod(next_cell());
    if (noisy) traj.noise_level = std::stod(next_cell());
  }
  // Rebuild each final state by replay (the dynamics are deterministic).
  for (auto& traj : trajs) {
    Vector s = traj.states.row(spec.horizon - 1).transpose();
    traj.states.row(spec.horizon) =
        env->step(s, traj.actions.row(spec.horizon - 1).transpose()).first.transpose();
  }
  if (spec_out) *spec_out = spec;
  if (kind_out) *kind_out = kind;
  return trajs;
}

void save_transitions(const std::string& path, const TransitionDataset& ds) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw Error("save_transitions: cannot open '" + path + "'");
  json header{{"format_version", kFormatVersion},
              {"env", env_spec_to_json(ds.spec)},
              {"kind", ds.kind},
              {"seed", ds.seed},
              {"count", ds.size()}};
  out << header.dump() << '\n';
  for (Index i = 0; i < ds.size(); ++i) {
    out << ds.provenance[i].first << ',' << ds.provenance[i].second;
    for (Index j = 0; j < ds.s.cols(); ++j) {
      out << ',';
      write_csv_value(out, ds.s(i, j));
    }
    for (Index j = 0; j < ds.s_next.cols(); ++j) {
      out << ',';
      write_csv_value(out, ds.s_next(i, j));
    }
    out << '\n';
  }
  if (!out) throw Error("save_transitions: write failed for '" + path + "'");
}

TransitionDataset load_transitions(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw Error("load_transitions: cannot open '" + path + "'");
  std::string line;
  if (!std::getline(in, line)) throw Error("load_transitions: missing header");
  json header = json::parse(line);
  TransitionDataset ds;
  ds.spec = env_spec_from_json(header.at("env"));
  ds.kind = header.at("kind").get<std::string>();
  ds.seed = header.at("seed").get<std::uint64_t>();
  Index count = header.at("count").get<Index>();
  ds.s.resize(count, ds.spec.state_dim);
  ds.s_next.resize(count, ds.spec.state_dim);
  ds.provenance.reserve(count);
  Index i = 0;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    if (i >= count) throw Error("load_transitions: more rows than header count");
    std::stringstream ss(line);
    std::string cell;
    auto next_cell = [&]() {
      if (!std::getline(ss, cell, ',')) throw Error("load_transitions: short row");
      return cell;
    };
    int traj_id = std::stoi(next_cell());
    int t = std::stoi(next_cell());
    ds.provenance.emplace_back(traj_id, t);
    for (int j = 0; j < ds.spec.state_dim; ++j) ds.s(i, j) = std::stod(next_cell());
    for (int j = 0; j < ds.spec.state_dim; ++j) ds.s_next(i, j) = std::stod(next_cell());
    ++i;
  }
  if (i != count) throw Error("load_transitions: row count mismatch");
  return ds;
}

}  // namespace ilflow
