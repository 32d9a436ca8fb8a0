#pragma once

#include <functional>
#include <optional>
#include <string>
#include <vector>

#include "ilflow/core/random.hpp"
#include "ilflow/envs/envs.hpp"

namespace ilflow {

// a = policy(state, time_to_horizon). Collection treats policies as
// plain callables so it does not depend on the learner.
using PolicyFn = std::function<Vector(const Vector& state, double time_to_horizon)>;

struct Trajectory {
  Matrix states;   // (T+1) x d
  Matrix actions;  // T x m, as applied (post-clamp)
  Vector rewards;  // T
  std::string env_name;
  std::uint64_t seed = 0;
  std::optional<double> noise_level;  // per-trajectory action-noise scale L

  int length() const { return static_cast<int>(actions.rows()); }
  double total_return() const { return rewards.sum(); }
};

// State-only transition pairs; actions are dropped by construction.
struct TransitionDataset {
  Matrix s;       // N x d
  Matrix s_next;  // N x d
  std::vector<std::pair<int, int>> provenance;  // (trajectory, step)
  EnvSpec spec;
  std::string kind;  // expert | noisy_expert | random | synthetic
  std::uint64_t seed = 0;

  Index size() const { return s.rows(); }
};

// One full-horizon rollout. Per-step action noise (stddev L) is added
// before clamping when L > 0.
Trajectory rollout(const Env& env, const PolicyFn& policy, Rng& rng,
                   double action_noise_L = 0.0);

// n_traj deterministic-policy rollouts with per-trajectory derived seeds.
std::vector<Trajectory> collect_expert(const Env& env, const PolicyFn& expert_policy,
                                       int n_traj, std::uint64_t seed);

// Per trajectory: L ~ U(0, L_max) once, then a = expert(s) + N(0, L^2 I),
// clamped to bounds.
std::vector<Trajectory> collect_noisy_expert(const Env& env, const PolicyFn& expert_policy,
                                             int n_traj, double L_max, std::uint64_t seed);

// Uniform i.i.d. actions within bounds.
std::vector<Trajectory> collect_random(const Env& env, int n_traj, std::uint64_t seed);

// Flattens (s_t, s_{t+1}) pairs. With subset_size set, a seeded shuffle
// selects that many trajectories first.
TransitionDataset to_transitions(const std::vector<Trajectory>& trajs, const EnvSpec& spec,
                                 std::optional<int> subset_size, std::uint64_t seed,
                                 const std::string& kind = "expert");

// Replays the stored actions through the env from states.row(0); throws if
// any state deviates by more than tol.
void validate_trajectory(const Env& env, const Trajectory& traj, double tol = 1e-10);

// ---- serialization ---------------------------------------------------------
// Header line: JSON {format_version, env (EnvSpec), kind, seed, count,
// l_max?}; then one CSV row per step: traj_id, t, s[0..d), a[0..m), r
// (+ trailing L for noisy_expert). Final states are rebuilt by replay.
void save_trajectories(const std::string& path, const std::vector<Trajectory>& trajs,
                       const EnvSpec& spec, const std::string& kind, std::uint64_t seed,
                       std::optional<double> l_max = std::nullopt);
std::vector<Trajectory> load_trajectories(const std::string& path, EnvSpec* spec_out = nullptr,
                                          std::string* kind_out = nullptr);

// Header line as above; rows: traj_id, t, s[0..d), s_next[0..d).
void save_transitions(const std::string& path, const TransitionDataset& ds);
TransitionDataset load_transitions(const std::string& path);

}  // namespace ilflow
