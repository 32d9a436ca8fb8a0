#pragma once

#include <functional>
#include <optional>
#include <string>
#include <vector>

#include "ilflow/core/nn.hpp"
#include "ilflow/core/optim.hpp"
#include "ilflow/core/random.hpp"
#include "ilflow/data/data.hpp"
#include "ilflow/envs/envs.hpp"
#include "ilflow/flow/flow.hpp"

namespace ilflow {

// Observation = [state, t_H] with t_H = (T - t) / T.
RowVector make_observation(const Vector& state, double time_to_horizon);

struct AgentConfig {
  std::vector<int> actor_hidden = {512, 512};
  std::vector<int> critic_hidden = {1024, 1024};
  double alpha = 0.1;  // fixed entropy coefficient (no automatic tuning)
  double tau = 5e-4;   // Polyak rate
  double actor_lr = 3e-4;
  double critic_lr = 3e-4;
  double log_std_min = -20.0;
  double log_std_max = 2.0;
};

// Tanh-squashed diagonal-Gaussian policy with twin critics and Polyak
// target critics. Actions live in (-1, 1)^act_dim; callers map them to env
// bounds (and the trailing dimension to the noise level when present).
class Agent {
 public:
  Agent() = default;
  Agent(int obs_dim, int act_dim, const AgentConfig& cfg, std::uint64_t seed);

  struct ActionGraph {
    Tensor action;    // B x act_dim, squashed
    Tensor log_prob;  // B x 1, includes the tanh Jacobian correction
  };
  // Reparameterized sample a = tanh(mean + std * eps) for fixed draws eps.
  ActionGraph sample_actions_graph(const Tensor& obs, const Matrix& eps);

  struct ActResult {
    RowVector action;
    double log_prob;  // 0 in deterministic mode
  };
  ActResult act(const RowVector& obs, bool stochastic, Rng& rng);

  Tensor critic_graph(Mlp& critic, const Tensor& obs, const Tensor& act);
  // Values-only twin-target evaluation used for Bellman targets.
  Vector target_min_q(const Matrix& obs, const Matrix& act);

  void polyak_update();

  std::vector<std::pair<std::string, Matrix*>> state();
  void save(const std::string& checkpoint_path, const std::string& sidecar_path,
            int horizon, const std::string& env_name, bool has_noise_action,
            const NoiseConfig& noise) const;
  struct Loaded;
  static Loaded load(const std::string& checkpoint_path, const std::string& sidecar_path);

  Mlp actor;               // obs -> [mean, log_std]
  Mlp q1, q2, tq1, tq2;    // (obs, act) -> value
  AgentConfig cfg;
  int obs_dim = 0;
  int act_dim = 0;
};

struct Agent::Loaded {
  Agent agent;
  int horizon = 0;
  std::string env_name;
  bool has_noise_action = false;
  NoiseConfig noise;
};

class ReplayBuffer {
 public:
  ReplayBuffer(std::size_t capacity, int obs_dim, int act_dim);

  void push(const RowVector& obs, const RowVector& act, double reward,
            const RowVector& next_obs, bool terminal);

  struct Batch {
    Matrix obs, act, next_obs;
    Vector reward;
    Vector not_done;
  };
  Batch sample(int batch_size, Rng& rng) const;

  std::size_t size() const { return size_; }
  std::size_t capacity() const { return capacity_; }

 private:
  void ensure_rows(std::size_t rows);

  Matrix obs_, act_, next_obs_;
  Vector reward_, not_done_;
  std::size_t capacity_ = 0, size_ = 0, head_ = 0;
};

struct SacDiagnostics {
  double critic_loss = 0.0;
  double actor_loss = 0.0;
  double entropy = 0.0;  // -mean log pi
  double q_mean = 0.0;
};

// Bellman regression targets, undiscounted:
// y = r + 1[not terminal] (min twin target Q(s', a') - alpha log pi(a'|s'))
// with a' freshly sampled. Terminal rows get y = r exactly.
Vector sac_targets(Agent& agent, const ReplayBuffer::Batch& batch, Rng& rng);

// One full SAC step on a batch: critic regression to sac_targets, actor
// ascent on min twin Q - alpha log pi, Polyak target update.
SacDiagnostics sac_update(Agent& agent, const ReplayBuffer::Batch& batch,
                          Optimizer& actor_opt, Optimizer& critic_opt, Rng& rng);

// Stationary imitation reward: log-density of the standardized transition at
// the agent-chosen noise level, floored at reward_floor.
double compute_reward(ConditionalFlow& flow, const Vector& s, const Vector& s_next,
                      double h, double reward_floor = -100.0);

// reward(s, a_env, s_next, h, env_reward) -> scalar used for learning.
using RewardFn =
    std::function<double(const Vector&, const Vector&, const Vector&, double, double)>;

struct SacTrainConfig {
  AgentConfig agent;
  long total_steps = 100000;
  int warmup_steps = 1000;
  int batch_size = 256;
  std::size_t replay_capacity = 1000000;
  int updates_per_step = 1;
  int eval_interval = 5000;
  int eval_rollouts = 10;
  bool has_noise_action = false;  // append the h action dimension
  NoiseConfig noise;
  double reward_floor = -100.0;
};

struct TrainLogRow {
  long step = 0;
  double eval_return_mean = 0.0;
  double eval_return_std = 0.0;
  double mean_imitation_reward = 0.0;
  double actor_loss = 0.0;
  double critic_loss = 0.0;
  double policy_entropy = 0.0;
  double mean_h = 0.0;
};

struct SacTrainResult {
  Agent agent;
  std::vector<TrainLogRow> log;
  // Full-horizon rollouts gathered during the uniform-action warmup phase
  // (the random dataset produced as a byproduct of training).
  std::vector<Trajectory> warmup_trajectories;
};

SacTrainResult train_sac(const Env& env, const RewardFn& reward, const SacTrainConfig& cfg,
                         std::uint64_t seed);

// Ground-truth-reward SAC (the expert).
SacTrainResult train_expert(const Env& env, const SacTrainConfig& cfg, std::uint64_t seed);

// Sequential imitation-from-observation recovery: SAC against the frozen
// flow reward with the noise-level action dimension; rewards are computed
// online at transition time with the agent's own h.
SacTrainResult train_imitation(const Env& env, ConditionalFlow& flow,
                               const SacTrainConfig& cfg, std::uint64_t seed);

struct EvalResult {
  double mean = 0.0;
  double stddev = 0.0;
  std::vector<double> returns;
};
// Deterministic-policy rollouts scored by the ground-truth reward.
EvalResult evaluate(const Env& env, Agent& agent, int n_rollouts, std::uint64_t seed);

// Deterministic PolicyFn view of a trained agent (env action units).
PolicyFn deterministic_policy(Agent& agent, const Env& env);

void write_train_log_csv(const std::string& path, const std::vector<TrainLogRow>& rows);

}  // namespace ilflow
