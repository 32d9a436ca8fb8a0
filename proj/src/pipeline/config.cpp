#include "ilflow/pipeline/config.hpp"

#include <fstream>
#include <set>

#include <json.hpp>

namespace ilflow {

using nlohmann::json;

namespace {

void reject_unknown(const json& j, const std::set<std::string>& allowed,
                    const std::string& section) {
  for (const auto& [key, value] : j.items()) {
    if (!allowed.count(key)) {
      throw Error("config: unknown key '" + (section.empty() ? key : section + "." + key) + "'");
    }
  }
}

template <typename T>
void read(const json& j, const char* key, T& out, const std::string& section) {
  if (!j.contains(key)) return;
  try {
    out = j.at(key).get<T>();
  } catch (const json::exception&) {
    throw Error("config: bad type for '" + (section.empty() ? std::string(key)
                                                            : section + "." + key) + "'");
  }
}

void require(bool ok, const std::string& key, const std::string& what) {
  if (!ok) throw Error("config: '" + key + "' " + what);
}

}  // namespace

FlowConfig RunConfig::flow_config(int state_dim) const {
  FlowConfig cfg;
  cfg.state_dim = state_dim;
  cfg.num_layers = flow.layers;
  cfg.bins = flow.bins;
  cfg.tail_bound = flow.tail_bound;
  cfg.hidden = flow.hidden;
  cfg.context_hidden = flow.context_hidden;
  cfg.context_dim = flow.context_dim;
  cfg.omega0 = flow.omega0;
  cfg.spectral_norm = flow.spectral_norm;
  cfg.noise.h_min = flow.h_min;
  cfg.noise.h_max = flow.h_max;
  cfg.noise.family = noise_family_from_string(flow.noise_family);
  return cfg;
}

FlowTrainOptions RunConfig::flow_train_options() const {
  FlowTrainOptions opts;
  opts.epochs = flow.epochs;
  opts.batch_size = flow.batch_size;
  opts.learning_rate = flow.learning_rate;
  opts.weight_decay = flow.weight_decay;
  opts.validation_fraction = flow.validation_fraction;
  opts.seed = seed;
  return opts;
}

SacTrainConfig RunConfig::sac_train_config(long total_steps) const {
  SacTrainConfig cfg;
  cfg.agent.alpha = sac.alpha;
  cfg.agent.tau = sac.tau;
  cfg.agent.actor_lr = sac.actor_lr;
  cfg.agent.critic_lr = sac.critic_lr;
  cfg.agent.actor_hidden = sac.actor_hidden;
  cfg.agent.critic_hidden = sac.critic_hidden;
  cfg.total_steps = total_steps;
  cfg.warmup_steps = sac.warmup_steps;
  cfg.batch_size = sac.batch_size;
  cfg.replay_capacity = static_cast<std::size_t>(sac.replay_capacity);
  cfg.updates_per_step = sac.updates_per_step;
  cfg.eval_interval = eval_interval;
  cfg.eval_rollouts = eval_rollouts;
  cfg.reward_floor = sac.reward_floor;
  cfg.noise.h_min = flow.h_min;
  cfg.noise.h_max = flow.h_max;
  cfg.noise.family = noise_family_from_string(flow.noise_family);
  return cfg;
}

void RunConfig::validate() const {
  make_env(env, horizon);  // throws on unknown name
  require(horizon >= 1, "horizon", "must be >= 1");
  require(expert_steps >= 1, "expert_steps", "must be >= 1");
  require(il_steps >= 1, "il_steps", "must be >= 1");
  require(eval_interval >= 1, "eval_interval", "must be >= 1");
  require(eval_rollouts >= 1, "eval_rollouts", "must be >= 1");
  require(dataset.n_traj >= 1, "dataset.n_traj", "must be >= 1");
  require(dataset.l_max > 0, "dataset.l_max", "must be > 0");
  require(dataset.n_noisy >= 0, "dataset.n_noisy", "must be >= 0");
  require(dataset.n_random >= 0, "dataset.n_random", "must be >= 0");
  if (dataset.subset) {
    require(*dataset.subset >= 1 && *dataset.subset <= dataset.n_traj, "dataset.subset",
            "must be in [1, n_traj]");
  }
  require(flow.epochs >= 1, "flow.epochs", "must be >= 1");
  require(flow.learning_rate > 0, "flow.lr", "must be > 0");
  require(flow.weight_decay >= 0, "flow.weight_decay", "must be >= 0");
  require(flow.batch_size >= 1, "flow.batch_size", "must be >= 1");
  require(flow.bins >= 2, "flow.bins", "must be >= 2");
  require(flow.layers >= 1, "flow.layers", "must be >= 1");
  require(flow.tail_bound > 0, "flow.tail_bound", "must be > 0");
  require(flow.context_dim >= 1, "flow.context_dim", "must be >= 1");
  require(flow.h_min >= 0 && flow.h_min < flow.h_max, "flow.h_min", "requires 0 <= h_min < h_max");
  require(flow.validation_fraction > 0 && flow.validation_fraction < 1,
          "flow.validation_fraction", "must be in (0, 1)");
  noise_family_from_string(flow.noise_family);
  require(sac.alpha > 0, "sac.alpha", "must be > 0");
  require(sac.tau > 0 && sac.tau <= 1, "sac.tau", "must be in (0, 1]");
  require(sac.actor_lr > 0, "sac.actor_lr", "must be > 0");
  require(sac.critic_lr > 0, "sac.critic_lr", "must be > 0");
  require(sac.batch_size >= 1, "sac.batch_size", "must be >= 1");
  require(sac.warmup_steps >= 0, "sac.warmup_steps", "must be >= 0");
  require(sac.updates_per_step >= 0, "sac.updates_per_step", "must be >= 0");
  require(sac.replay_capacity >= 1, "sac.replay_capacity", "must be >= 1");
}

RunConfig config_from_json_text(const std::string& text) {
  json j;
  try {
    j = json::parse(text);
  } catch (const json::exception& e) {
    throw Error(std::string("config: invalid JSON: ") + e.what());
  }
  if (!j.is_object()) throw Error("config: top level must be a JSON object");
  reject_unknown(j,
                 {"env", "seed", "horizon", "expert_steps", "il_steps", "eval_interval",
                  "eval_rollouts", "output_dir", "dataset", "flow", "sac"},
                 "");
  RunConfig cfg;
  read(j, "env", cfg.env, "");
  read(j, "seed", cfg.seed, "");
  read(j, "horizon", cfg.horizon, "");
  read(j, "expert_steps", cfg.expert_steps, "");
  read(j, "il_steps", cfg.il_steps, "");
  read(j, "eval_interval", cfg.eval_interval, "");
  read(j, "eval_rollouts", cfg.eval_rollouts, "");
  read(j, "output_dir", cfg.output_dir, "");
  if (j.contains("dataset")) {
    const json& d = j.at("dataset");
    reject_unknown(d, {"n_traj", "subset", "l_max", "n_noisy", "n_random"}, "dataset");
    read(d, "n_traj", cfg.dataset.n_traj, "dataset");
    if (d.contains("subset") && !d.at("subset").is_null()) {
      int subset = 0;
      read(d, "subset", subset, "dataset");
      cfg.dataset.subset = subset;
    }
    read(d, "l_max", cfg.dataset.l_max, "dataset");
    read(d, "n_noisy", cfg.dataset.n_noisy, "dataset");
    read(d, "n_random", cfg.dataset.n_random, "dataset");
  }
  if (j.contains("flow")) {
    const json& f = j.at("flow");
    reject_unknown(f,
                   {"epochs", "lr", "weight_decay", "batch_size", "bins", "layers", "hidden",
                    "context_hidden", "context_dim", "tail_bound", "omega0", "spectral_norm",
                    "h_min", "h_max", "noise_family", "validation_fraction"},
                   "flow");
    read(f, "epochs", cfg.flow.epochs, "flow");
    read(f, "lr", cfg.flow.learning_rate, "flow");
    read(f, "weight_decay", cfg.flow.weight_decay, "flow");
    read(f, "batch_size", cfg.flow.batch_size, "flow");
    read(f, "bins", cfg.flow.bins, "flow");
    read(f, "layers", cfg.flow.layers, "flow");
    read(f, "hidden", cfg.flow.hidden, "flow");
    read(f, "context_hidden", cfg.flow.context_hidden, "flow");
    read(f, "context_dim", cfg.flow.context_dim, "flow");
    read(f, "tail_bound", cfg.flow.tail_bound, "flow");
    read(f, "omega0", cfg.flow.omega0, "flow");
    read(f, "spectral_norm", cfg.flow.spectral_norm, "flow");
    read(f, "h_min", cfg.flow.h_min, "flow");
    read(f, "h_max", cfg.flow.h_max, "flow");
    read(f, "noise_family", cfg.flow.noise_family, "flow");
    read(f, "validation_fraction", cfg.flow.validation_fraction, "flow");
  }
  if (j.contains("sac")) {
    const json& s = j.at("sac");
    reject_unknown(s,
                   {"alpha", "tau", "actor_lr", "critic_lr", "actor_hidden", "critic_hidden",
                    "batch_size", "warmup_steps", "updates_per_step", "replay_capacity",
                    "reward_floor"},
                   "sac");
    read(s, "alpha", cfg.sac.alpha, "sac");
    read(s, "tau", cfg.sac.tau, "sac");
    read(s, "actor_lr", cfg.sac.actor_lr, "sac");
    read(s, "critic_lr", cfg.sac.critic_lr, "sac");
    read(s, "actor_hidden", cfg.sac.actor_hidden, "sac");
    read(s, "critic_hidden", cfg.sac.critic_hidden, "sac");
    read(s, "batch_size", cfg.sac.batch_size, "sac");
    read(s, "warmup_steps", cfg.sac.warmup_steps, "sac");
    read(s, "updates_per_step", cfg.sac.updates_per_step, "sac");
    read(s, "replay_capacity", cfg.sac.replay_capacity, "sac");
    read(s, "reward_floor", cfg.sac.reward_floor, "sac");
  }
  cfg.validate();
  return cfg;
}

RunConfig load_config(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw Error("config: cannot open '" + path + "'");
  std::string text((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  return config_from_json_text(text);
}

std::string config_to_json_text(const RunConfig& cfg) {
  json j{{"env", cfg.env},
         {"seed", cfg.seed},
         {"horizon", cfg.horizon},
         {"expert_steps", cfg.expert_steps},
         {"il_steps", cfg.il_steps},
         {"eval_interval", cfg.eval_interval},
         {"eval_rollouts", cfg.eval_rollouts},
         {"output_dir", cfg.output_dir},
         {"dataset",
          {{"n_traj", cfg.dataset.n_traj},
           {"subset", cfg.dataset.subset ? json(*cfg.dataset.subset) : json(nullptr)},
           {"l_max", cfg.dataset.l_max},
           {"n_noisy", cfg.dataset.n_noisy},
           {"n_random", cfg.dataset.n_random}}},
         {"flow",
          {{"epochs", cfg.flow.epochs},
           {"lr", cfg.flow.learning_rate},
           {"weight_decay", cfg.flow.weight_decay},
           {"batch_size", cfg.flow.batch_size},
           {"bins", cfg.flow.bins},
           {"layers", cfg.flow.layers},
           {"hidden", cfg.flow.hidden},
           {"context_hidden", cfg.flow.context_hidden},
           {"context_dim", cfg.flow.context_dim},
           {"tail_bound", cfg.flow.tail_bound},
           {"omega0", cfg.flow.omega0},
           {"spectral_norm", cfg.flow.spectral_norm},
           {"h_min", cfg.flow.h_min},
           {"h_max", cfg.flow.h_max},
           {"noise_family", cfg.flow.noise_family},
           {"validation_fraction", cfg.flow.validation_fraction}}},
         {"sac",
          {{"alpha", cfg.sac.alpha},
           {"tau", cfg.sac.tau},
           {"actor_lr", cfg.sac.actor_lr},
           {"critic_lr", cfg.sac.critic_lr},
           {"actor_hidden", cfg.sac.actor_hidden},
           {"critic_hidden", cfg.sac.critic_hidden},
           {"batch_size", cfg.sac.batch_size},
           {"warmup_steps", cfg.sac.warmup_steps},
           {"updates_per_step", cfg.sac.updates_per_step},
           {"replay_capacity", cfg.sac.replay_capacity},
           {"reward_floor", cfg.sac.reward_floor}}}};
  return j.dump(2);
}

void save_config(const std::string& path, const RunConfig& cfg) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw Error("config: cannot open '" + path + "' for writing");
  out << config_to_json_text(cfg) << '\n';
}

}  // namespace ilflow
