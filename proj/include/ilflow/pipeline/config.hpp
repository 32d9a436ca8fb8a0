#pragma once

#include <optional>
#include <string>
#include <vector>

#include "ilflow/flow/flow.hpp"
#include "ilflow/policy/policy.hpp"

namespace ilflow {

struct DatasetConfig {
  int n_traj = 150;
  std::optional<int> subset;  // train the flow on this many trajectories
  double l_max = 1.5;         // noisy-expert action-noise ceiling
  int n_noisy = 1000;
  int n_random = 100;
};

struct FlowSection {
  int epochs = 1000;
  double learning_rate = 5e-4;
  double weight_decay = 1e-4;
  int batch_size = 256;
  int bins = 8;
  int layers = 3;
  std::vector<int> hidden = {8, 8};
  std::vector<int> context_hidden = {8, 8};
  int context_dim = 8;
  double tail_bound = 6.0;
  double omega0 = 2.0 * 3.14159265358979323846;
  bool spectral_norm = true;
  double h_min = 0.0;
  double h_max = 4.5;
  std::string noise_family = "normal";
  double validation_fraction = 0.1;
};

struct SacSection {
  double alpha = 0.1;
  double tau = 5e-4;
  double actor_lr = 3e-4;
  double critic_lr = 3e-4;
  std::vector<int> actor_hidden = {512, 512};
  std::vector<int> critic_hidden = {1024, 1024};
  int batch_size = 256;
  int warmup_steps = 1000;
  int updates_per_step = 1;
  long replay_capacity = 1000000;
  double reward_floor = -100.0;
};

// Full run configuration; defaults reproduce the reference hyperparameter
// tables. Parsing is fail-closed: unknown keys are errors.
struct RunConfig {
  std::string env = "double_integrator_1d";
  std::uint64_t seed = 0;
  int horizon = 200;
  long expert_steps = 100000;
  long il_steps = 30000;
  int eval_interval = 5000;
  int eval_rollouts = 10;
  std::string output_dir = "runs";
  DatasetConfig dataset;
  FlowSection flow;
  SacSection sac;

  FlowConfig flow_config(int state_dim) const;
  FlowTrainOptions flow_train_options() const;
  SacTrainConfig sac_train_config(long total_steps) const;

  void validate() const;
};

RunConfig load_config(const std::string& path);
RunConfig config_from_json_text(const std::string& text);
std::string config_to_json_text(const RunConfig& config);
void save_config(const std::string& path, const RunConfig& config);

}  // namespace ilflow
