#include "ilflow/policy/policy.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>

#include <json.hpp>

#include "ilflow/core/checkpoint.hpp"

namespace ilflow {

using nlohmann::json;

namespace {
constexpr double kLogTwoPi = 1.8378770664093454836;
constexpr double kTanhEps = 1e-6;

Mlp make_critic(int obs_dim, int act_dim, const AgentConfig& cfg, std::uint64_t seed,
                const std::string& name) {
  MlpConfig mc;
  mc.hidden = cfg.critic_hidden;
  mc.activation = Activation::Relu;
  Rng rng(seed);
  return Mlp(obs_dim + act_dim, 1, mc, rng, name);
}

Vector env_action_from_policy(const RowVector& policy_action, const EnvSpec& spec) {
  Vector a(spec.action_dim);
  for (int i = 0; i < spec.action_dim; ++i) {
    a[i] = spec.action_min[i] +
           (policy_action[i] + 1.0) * 0.5 * (spec.action_max[i] - spec.action_min[i]);
  }
  return a;
}

double h_from_policy(const RowVector& policy_action, int env_action_dim,
                     const NoiseConfig& noise) {
  double raw = policy_action[env_action_dim];
  return noise.h_min + (raw + 1.0) * 0.5 * (noise.h_max - noise.h_min);
}
}  // namespace

RowVector make_observation(const Vector& state, double time_to_horizon) {
  RowVector obs(state.size() + 1);
  obs.head(state.size()) = state.transpose();
  obs[state.size()] = time_to_horizon;
  return obs;
}

Agent::Agent(int obs_dim_, int act_dim_, const AgentConfig& cfg_, std::uint64_t seed)
    : cfg(cfg_), obs_dim(obs_dim_), act_dim(act_dim_) {
  MlpConfig ac;
  ac.hidden = cfg.actor_hidden;
  ac.activation = Activation::Tanh;
  Rng actor_rng(Rng::splitmix64(seed ^ 0xac7ULL));
  actor = Mlp(obs_dim, 2 * act_dim, ac, actor_rng, "actor");
  // Target critics start as exact copies: same derived seed, same init.
  std::uint64_t s1 = Rng::splitmix64(seed ^ 0xc1ULL);
  std::uint64_t s2 = Rng::splitmix64(seed ^ 0xc2ULL);
  q1 = make_critic(obs_dim, act_dim, cfg, s1, "q1");
  q2 = make_critic(obs_dim, act_dim, cfg, s2, "q2");
  tq1 = make_critic(obs_dim, act_dim, cfg, s1, "tq1");
  tq2 = make_critic(obs_dim, act_dim, cfg, s2, "tq2");
}

Agent::ActionGraph Agent::sample_actions_graph(const Tensor& obs, const Matrix& eps) {
  Tensor out = actor.forward(obs, true);
  Tensor mean_t = slice_cols(out, 0, act_dim);
  Tensor log_std = clamp(slice_cols(out, act_dim, act_dim), cfg.log_std_min, cfg.log_std_max);
  Tensor pre = add(mean_t, mul(exp(log_std), Tensor::constant(eps)));
  Tensor action = tanh(pre);
  // Gaussian term: the quadratic reduces to the constant -eps^2/2 under
  // reparameterization; only -log_std carries gradient. The tanh change of
  // variables subtracts log(1 - a^2 + eps).
  Matrix gauss_const = (-0.5 * eps.array().square() - 0.5 * kLogTwoPi).matrix();
  Tensor log_prob = sub(rowsum(add(Tensor::constant(gauss_const), neg(log_std))),
                        rowsum(log(1.0 - square(action) + kTanhEps)));
  return {action, log_prob};
}

Agent::ActResult Agent::act(const RowVector& obs, bool stochastic, Rng& rng) {
  NoGradGuard guard;
  Matrix out = actor.forward_values(obs);
  ActResult res;
  res.action.resize(act_dim);
  res.log_prob = 0.0;
  for (int i = 0; i < act_dim; ++i) {
    double mean_i = out(0, i);
    if (!stochastic) {
      res.action[i] = std::tanh(mean_i);
      continue;
    }
    double log_std = std::clamp(out(0, act_dim + i), cfg.log_std_min, cfg.log_std_max);
    double eps = rng.normal();
    double pre = mean_i + std::exp(log_std) * eps;
    double a = std::tanh(pre);
    res.action[i] = a;
    res.log_prob += -0.5 * eps * eps - log_std - 0.5 * kLogTwoPi;
    res.log_prob -= std::log(1.0 - a * a + kTanhEps);
  }
  return res;
}

Tensor Agent::critic_graph(Mlp& critic, const Tensor& obs, const Tensor& act) {
  return critic.forward(concat_cols({obs, act}), true);
}

Vector Agent::target_min_q(const Matrix& obs, const Matrix& act) {
  Matrix in(obs.rows(), obs.cols() + act.cols());
  in.leftCols(obs.cols()) = obs;
  in.rightCols(act.cols()) = act;
  Vector a = tq1.forward_values(in).col(0);
  Vector b = tq2.forward_values(in).col(0);
  return a.cwiseMin(b);
}

void Agent::polyak_update() {
  auto blend = [tau = cfg.tau](Mlp& target, const Mlp& online) {
    auto tp = target.parameters();
    auto op = online.parameters();
    for (std::size_t i = 0; i < tp.size(); ++i) {
      tp[i].leaf_value() = (1.0 - tau) * tp[i].leaf_value() + tau * op[i].value();
    }
  };
  blend(tq1, q1);
  blend(tq2, q2);
}

std::vector<std::pair<std::string, Matrix*>> Agent::state() {
  std::vector<std::pair<std::string, Matrix*>> out;
  actor.collect_state(out);
  q1.collect_state(out);
  q2.collect_state(out);
  tq1.collect_state(out);
  tq2.collect_state(out);
  return out;
}

void Agent::save(const std::string& checkpoint_path, const std::string& sidecar_path,
                 int horizon, const std::string& env_name, bool has_noise_action,
                 const NoiseConfig& noise) const {
  auto* self = const_cast<Agent*>(this);
  save_checkpoint(checkpoint_path, self->state());
  json sidecar{{"obs_dim", obs_dim},
               {"act_dim", act_dim},
               {"horizon", horizon},
               {"env", env_name},
               {"alpha", cfg.alpha},
               {"tau", cfg.tau},
               {"actor_hidden", cfg.actor_hidden},
               {"critic_hidden", cfg.critic_hidden},
               {"has_noise_action", has_noise_action},
               {"h_min", noise.h_min},
               {"h_max", noise.h_max},
               {"noise_family", to_string(noise.family)}};
  std::ofstream out(sidecar_path, std::ios::trunc);
  if (!out) throw Error("agent save: cannot open '" + sidecar_path + "'");
  out << sidecar.dump(2) << '\n';
}

Agent::Loaded Agent::load(const std::string& checkpoint_path, const std::string& sidecar_path) {
  std::ifstream in(sidecar_path);
  if (!in) throw Error("agent load: cannot open '" + sidecar_path + "'");
  json sidecar = json::parse(in);
  AgentConfig cfg;
  cfg.alpha = sidecar.at("alpha").get<double>();
  cfg.tau = sidecar.at("tau").get<double>();
  cfg.actor_hidden = sidecar.at("actor_hidden").get<std::vector<int>>();
  cfg.critic_hidden = sidecar.at("critic_hidden").get<std::vector<int>>();
  Loaded out;
  out.agent = Agent(sidecar.at("obs_dim").get<int>(), sidecar.at("act_dim").get<int>(), cfg, 0);
  load_checkpoint_into(checkpoint_path, out.agent.state());
  out.horizon = sidecar.at("horizon").get<int>();
  out.env_name = sidecar.at("env").get<std::string>();
  out.has_noise_action = sidecar.at("has_noise_action").get<bool>();
  out.noise.h_min = sidecar.at("h_min").get<double>();
  out.noise.h_max = sidecar.at("h_max").get<double>();
  out.noise.family = noise_family_from_string(sidecar.at("noise_family").get<std::string>());
  return out;
}

ReplayBuffer::ReplayBuffer(std::size_t capacity, int obs_dim, int act_dim)
    : capacity_(capacity) {
  obs_.resize(0, obs_dim);
  act_.resize(0, act_dim);
  next_obs_.resize(0, obs_dim);
  reward_.resize(0);
  not_done_.resize(0);
}

void ReplayBuffer::ensure_rows(std::size_t rows) {
  if (static_cast<std::size_t>(obs_.rows()) >= rows) return;
  std::size_t grown = std::max<std::size_t>(1024, static_cast<std::size_t>(obs_.rows()) * 2);
  grown = std::min(std::max(grown, rows), capacity_);
  obs_.conservativeResize(grown, Eigen::NoChange);
  act_.conservativeResize(grown, Eigen::NoChange);
  next_obs_.conservativeResize(grown, Eigen::NoChange);
  reward_.conservativeResize(grown);
  not_done_.conservativeResize(grown);
}

void ReplayBuffer::push(const RowVector& obs, const RowVector& act, double reward,
                        const RowVector& next_obs, bool terminal) {
  if (!std::isfinite(reward)) throw Error("replay: non-finite reward");
  ensure_rows(std::min(capacity_, size_ + 1));
  obs_.row(head_) = obs;
  act_.row(head_) = act;
  next_obs_.row(head_) = next_obs;
  reward_[head_] = reward;
  not_done_[head_] = terminal ? 0.0 : 1.0;
  head_ = (head_ + 1) % capacity_;
  size_ = std::min(size_ + 1, capacity_);
}

ReplayBuffer::Batch ReplayBuffer::sample(int batch_size, Rng& rng) const {
  if (size_ == 0) throw Error("replay: sample from empty buffer");
  Batch b;
  b.obs.resize(batch_size, obs_.cols());
  b.act.resize(batch_size, act_.cols());
  b.next_obs.resize(batch_size, next_obs_.cols());
  b.reward.resize(batch_size);
  b.not_done.resize(batch_size);
  for (int i = 0; i < batch_size; ++i) {
    Index j = static_cast<Index>(rng.below(size_));
    b.obs.row(i) = obs_.row(j);
    b.act.row(i) = act_.row(j);
    b.next_obs.row(i) = next_obs_.row(j);
    b.reward[i] = reward_[j];
    b.not_done[i] = not_done_[j];
  }
  return b;
}

Vector sac_targets(Agent& agent, const ReplayBuffer::Batch& batch, Rng& rng) {
  NoGradGuard guard;
  Matrix eps_next(batch.obs.rows(), agent.act_dim);
  for (Index i = 0; i < eps_next.size(); ++i) eps_next.data()[i] = rng.normal();
  auto next_act = agent.sample_actions_graph(Tensor::constant(batch.next_obs), eps_next);
  Vector logp_next = next_act.log_prob.value().col(0);
  Vector min_q = agent.target_min_q(batch.next_obs, next_act.action.value());
  return batch.reward.array() +
         batch.not_done.array() * (min_q.array() - agent.cfg.alpha * logp_next.array());
}

SacDiagnostics sac_update(Agent& agent, const ReplayBuffer::Batch& batch,
                          Optimizer& actor_opt, Optimizer& critic_opt, Rng& rng) {
  const Index n = batch.obs.rows();
  const int A = agent.act_dim;
  Vector y = sac_targets(agent, batch, rng);

  Tensor obs_t = Tensor::constant(batch.obs);
  Tensor act_t = Tensor::constant(batch.act);
  Tensor y_t = Tensor::constant(Matrix(y));
  Tensor q1_pred = agent.critic_graph(agent.q1, obs_t, act_t);
  Tensor q2_pred = agent.critic_graph(agent.q2, obs_t, act_t);
  Tensor critic_loss = add(mean(square(sub(q1_pred, y_t))), mean(square(sub(q2_pred, y_t))));
  double critic_loss_v = critic_loss.scalar();
  if (!std::isfinite(critic_loss_v)) throw Error("sac_update: non-finite critic loss");
  critic_opt.zero_grad();
  backward(critic_loss);
  critic_opt.step();

  Matrix eps(n, A);
  for (Index i = 0; i < eps.size(); ++i) eps.data()[i] = rng.normal();
  auto cur = agent.sample_actions_graph(obs_t, eps);
  Tensor q_min = minimum(agent.critic_graph(agent.q1, obs_t, cur.action),
                         agent.critic_graph(agent.q2, obs_t, cur.action));
  Tensor actor_loss = mean(sub(mul(Tensor::constant(agent.cfg.alpha), cur.log_prob), q_min));
  double actor_loss_v = actor_loss.scalar();
  if (!std::isfinite(actor_loss_v)) throw Error("sac_update: non-finite actor loss");
  actor_opt.zero_grad();
  backward(actor_loss);
  actor_opt.step();

  agent.polyak_update();

  SacDiagnostics diag;
  diag.critic_loss = critic_loss_v;
  diag.actor_loss = actor_loss_v;
  diag.entropy = -cur.log_prob.value().mean();
  diag.q_mean = q_min.value().mean();
  return diag;
}

double compute_reward(ConditionalFlow& flow, const Vector& s, const Vector& s_next, double h,
                      double reward_floor) {
  double lp = flow.log_prob_standardized(RowVector(s_next.transpose()),
                                         RowVector(s.transpose()), h);
  if (!std::isfinite(lp) || lp < reward_floor) {
    ++counters().reward_floored;
    return reward_floor;
  }
  return lp;
}

EvalResult evaluate(const Env& env, Agent& agent, int n_rollouts, std::uint64_t seed) {
  Rng master(seed);
  EvalResult res;
  res.returns.reserve(n_rollouts);
  for (int i = 0; i < n_rollouts; ++i) {
    Rng rng = master.derive(i);
    Episode ep(env, rng);
    double ret = 0.0;
    while (!ep.done()) {
      RowVector obs = make_observation(ep.state(), ep.time_to_horizon());
      auto act = agent.act(obs, false, rng);
      Vector a_env = env_action_from_policy(act.action, env.spec());
      ret += ep.step(a_env).reward;
    }
    res.returns.push_back(ret);
  }
  double sum = 0.0;
  for (double r : res.returns) sum += r;
  res.mean = sum / n_rollouts;
  double ss = 0.0;
  for (double r : res.returns) ss += (r - res.mean) * (r - res.mean);
  res.stddev = n_rollouts > 1 ? std::sqrt(ss / (n_rollouts - 1)) : 0.0;
  return res;
}

PolicyFn deterministic_policy(Agent& agent, const Env& env) {
  const EnvSpec& spec = env.spec();
  return [&agent, spec](const Vector& state, double t_H) {
    RowVector obs = make_observation(state, t_H);
    Rng dummy(0);
    auto act = agent.act(obs, false, dummy);
    return env_action_from_policy(act.action, spec);
  };
}

SacTrainResult train_sac(const Env& env, const RewardFn& reward, const SacTrainConfig& cfg,
                         std::uint64_t seed) {
  const EnvSpec& spec = env.spec();
  const int obs_dim = spec.state_dim + 1;
  const int act_dim = spec.action_dim + (cfg.has_noise_action ? 1 : 0);

  Agent agent(obs_dim, act_dim, cfg.agent, Rng::splitmix64(seed ^ 0xa9e7ULL));
  Optimizer actor_opt({OptimizerKind::Adam, cfg.agent.actor_lr}, agent.actor.parameters());
  std::vector<Tensor> critic_params = agent.q1.parameters();
  for (const Tensor& t : agent.q2.parameters()) critic_params.push_back(t);
  Optimizer critic_opt({OptimizerKind::Adam, cfg.agent.critic_lr}, critic_params);
  ReplayBuffer replay(cfg.replay_capacity, obs_dim, act_dim);

  Rng env_rng(Rng::splitmix64(seed ^ 0xe4eULL));
  Rng act_rng(Rng::splitmix64(seed ^ 0xacULL));
  Rng update_rng(Rng::splitmix64(seed ^ 0x0bdULL));

  SacTrainResult result;
  std::optional<Episode> ep;
  Trajectory warmup_traj;
  int warmup_t = 0;

  double acc_reward = 0.0, acc_h = 0.0, acc_actor = 0.0, acc_critic = 0.0, acc_entropy = 0.0;
  long acc_steps = 0, acc_updates = 0;

  auto log_row = [&](long step) {
    EvalResult ev = evaluate(env, agent, cfg.eval_rollouts,
                             Rng::splitmix64(seed ^ (0xe7a1ULL + static_cast<std::uint64_t>(step))));
    TrainLogRow row;
    row.step = step;
    row.eval_return_mean = ev.mean;
    row.eval_return_std = ev.stddev;
    row.mean_imitation_reward = acc_steps > 0 ? acc_reward / acc_steps : 0.0;
    row.mean_h = acc_steps > 0 ? acc_h / acc_steps : 0.0;
    row.actor_loss = acc_updates > 0 ? acc_actor / acc_updates : 0.0;
    row.critic_loss = acc_updates > 0 ? acc_critic / acc_updates : 0.0;
    row.policy_entropy = acc_updates > 0 ? acc_entropy / acc_updates : 0.0;
    result.log.push_back(row);
    acc_reward = acc_h = acc_actor = acc_critic = acc_entropy = 0.0;
    acc_steps = acc_updates = 0;
  };

  for (long step = 0; step < cfg.total_steps; ++step) {
    if (!ep || ep->done()) {
      ep.emplace(env, env_rng);
      if (step < cfg.warmup_steps) {
        warmup_traj = Trajectory{};
        warmup_traj.env_name = spec.name;
        warmup_traj.seed = seed;
        warmup_traj.states.resize(spec.horizon + 1, spec.state_dim);
        warmup_traj.actions.resize(spec.horizon, spec.action_dim);
        warmup_traj.rewards.resize(spec.horizon);
        warmup_traj.states.row(0) = ep->state().transpose();
        warmup_t = 0;
      }
    }

    RowVector obs = make_observation(ep->state(), ep->time_to_horizon());
    RowVector policy_action(act_dim);
    if (step < cfg.warmup_steps) {
      for (int i = 0; i < act_dim; ++i) policy_action[i] = act_rng.uniform(-1.0, 1.0);
    } else {
      policy_action = agent.act(obs, true, act_rng).action;
    }
    Vector a_env = env_action_from_policy(policy_action, spec);
    double h = cfg.has_noise_action ? h_from_policy(policy_action, spec.action_dim, cfg.noise)
                                    : 0.0;
    Vector s = ep->state();
    auto env_step = ep->step(a_env);
    double r = reward(s, env_step.applied_action, env_step.next_state, h, env_step.reward);
    RowVector next_obs = make_observation(env_step.next_state, ep->time_to_horizon());
    replay.push(obs, policy_action, r, next_obs, env_step.done);

    if (step < cfg.warmup_steps && warmup_t < spec.horizon) {
      warmup_traj.actions.row(warmup_t) = env_step.applied_action.transpose();
      warmup_traj.rewards[warmup_t] = env_step.reward;
      warmup_traj.states.row(warmup_t + 1) = env_step.next_state.transpose();
      ++warmup_t;
      if (warmup_t == spec.horizon) result.warmup_trajectories.push_back(warmup_traj);
    }

    acc_reward += r;
    acc_h += h;
    ++acc_steps;

    if (step + 1 >= cfg.warmup_steps && replay.size() >= static_cast<std::size_t>(cfg.batch_size)) {
      for (int u = 0; u < cfg.updates_per_step; ++u) {
        auto diag = sac_update(agent, replay.sample(cfg.batch_size, update_rng), actor_opt,
                               critic_opt, update_rng);
        acc_actor += diag.actor_loss;
        acc_critic += diag.critic_loss;
        acc_entropy += diag.entropy;
        ++acc_updates;
      }
    }

    if ((step + 1) % cfg.eval_interval == 0 || step + 1 == cfg.total_steps) {
      log_row(step + 1);
    }
  }

  result.agent = std::move(agent);
  return result;
}

SacTrainResult train_expert(const Env& env, const SacTrainConfig& cfg_in, std::uint64_t seed) {
  SacTrainConfig cfg = cfg_in;
  cfg.has_noise_action = false;
  auto reward = [](const Vector&, const Vector&, const Vector&, double, double env_reward) {
    return env_reward;
  };
  return train_sac(env, reward, cfg, seed);
}

SacTrainResult train_imitation(const Env& env, ConditionalFlow& flow,
                               const SacTrainConfig& cfg_in, std::uint64_t seed) {
  SacTrainConfig cfg = cfg_in;
  cfg.has_noise_action = true;
  cfg.noise = flow.config().noise;
  double floor = cfg.reward_floor;
  auto reward = [&flow, floor](const Vector& s, const Vector&, const Vector& s_next, double h,
                               double) {
    return compute_reward(flow, s, s_next, h, floor);
  };
  return train_sac(env, reward, cfg, seed);
}

void write_train_log_csv(const std::string& path, const std::vector<TrainLogRow>& rows) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw Error("write_train_log_csv: cannot open '" + path + "'");
  out << "step,eval_return_mean,eval_return_std,mean_imitation_reward,actor_loss,"
         "critic_loss,policy_entropy,mean_h\n";
  for (const auto& r : rows) {
    out << r.step << ',' << r.eval_return_mean << ',' << r.eval_return_std << ','
        << r.mean_imitation_reward << ',' << r.actor_loss << ',' << r.critic_loss << ','
        << r.policy_entropy << ',' << r.mean_h << '\n';
  }
}

}  // namespace ilflow
