#pragma once

// Shared fixtures for the unit and acceptance suites: analytic controllers,
// reference returns, a closed-form oracle MDP, and desk-scale configs.

#include <algorithm>
#include <cmath>

#include "ilflow/data/data.hpp"
#include "ilflow/envs/envs.hpp"
#include "ilflow/policy/policy.hpp"

namespace ilflow::testing {

// Saturating linear feedback; near-optimal on both provided linear tasks.
inline PolicyFn feedback_controller(const Env& env) {
  const EnvSpec& spec = env.spec();
  return [spec](const Vector& s, double) {
    Vector a(spec.action_dim);
    for (int i = 0; i < spec.action_dim; ++i) {
      double pos = s[i];
      double vel = s[spec.action_dim + i];
      a[i] = std::clamp(-10.0 * pos - 5.5 * vel, -1.0, 1.0);
    }
    return a;
  };
}

// Finite-horizon discrete LQR return on the double integrator, simulated
// (with action clamping) from the same derived-seed starts evaluate() uses.
inline double lqr_reference_return(const DoubleIntegrator1D& env, std::uint64_t seed,
                                   int rollouts) {
  double dt = env.spec().dt;
  int horizon = env.spec().horizon;
  Eigen::Matrix2d a_mat;
  a_mat << 1, dt, 0, 1;
  Eigen::Vector2d b_vec(0, dt);
  Eigen::Matrix2d q_mat;
  q_mat << 1, 0, 0, 0.1;
  double r_cost = 0.01;
  std::vector<Eigen::RowVector2d> gains(horizon);
  Eigen::Matrix2d p_mat = Eigen::Matrix2d::Zero();
  for (int t = horizon - 1; t >= 0; --t) {
    double denom = r_cost + b_vec.transpose() * p_mat * b_vec;
    Eigen::RowVector2d k = (b_vec.transpose() * p_mat * a_mat) / denom;
    gains[t] = k;
    Eigen::Matrix2d closed = a_mat - b_vec * k;
    p_mat = q_mat + k.transpose() * r_cost * k + closed.transpose() * p_mat * closed;
  }
  Rng master(seed);
  double total = 0.0;
  for (int i = 0; i < rollouts; ++i) {
    Rng rng = master.derive(i);
    Episode ep(env, rng);
    int t = 0;
    double ret = 0.0;
    while (!ep.done()) {
      Eigen::Vector2d s(ep.state()[0], ep.state()[1]);
      Vector action(1);
      action[0] = std::clamp(-(gains[t] * s)(0), -1.0, 1.0);
      ret += ep.step(action).reward;
      ++t;
    }
    total += ret;
  }
  return total / rollouts;
}

inline double random_baseline_return(const Env& env, int n_traj, std::uint64_t seed) {
  auto trajs = collect_random(env, n_traj, seed);
  double mean = 0.0;
  for (const auto& t : trajs) mean += t.total_return() / trajs.size();
  return mean;
}

// (agent - random) / (reference - random); both toy tasks have negative
// returns, so raw percentages are meaningless.
inline double normalized_score(double agent_return, double reference_return,
                               double random_return) {
  return (agent_return - random_return) / (reference_return - random_return);
}

// 2-state, 1-step continuous-action MDP with terminal-only episodes:
// the entropy-regularized Q equals r(s, a) = -scale (a - 0.5 s)^2 exactly.
class TwoStateBandit final : public Env {
 public:
  explicit TwoStateBandit(double reward_scale = 1.0) : scale_(reward_scale) {
    spec_.name = "two_state_bandit";
    spec_.state_dim = 1;
    spec_.action_dim = 1;
    spec_.action_min = Vector::Constant(1, -1.0);
    spec_.action_max = Vector::Constant(1, 1.0);
    spec_.horizon = 1;
    spec_.dt = 1.0;
  }
  const EnvSpec& spec() const override { return spec_; }
  Vector reset(Rng& rng) const override {
    return Vector::Constant(1, rng.below(2) == 0 ? -1.0 : 1.0);
  }
  std::pair<Vector, double> step(const Vector& s, const Vector& a) const override {
    double target = 0.5 * s[0];
    return {s, -scale_ * (a[0] - target) * (a[0] - target)};
  }
  Vector invert_action(const Vector&, const Vector&) const override {
    throw Error("two_state_bandit: dynamics are not invertible");
  }
  double log_jacobian(const Vector&, const Vector&) const override {
    throw Error("two_state_bandit: no action Jacobian");
  }
  double reward(double s, double a) const {
    return -scale_ * (a - 0.5 * s) * (a - 0.5 * s);
  }

 private:
  EnvSpec spec_;
  double scale_;
};

// Runtime-bounded settings for the desk experiments (network sizes, batch
// and tau overridden relative to the reference tables; see the run configs).
inline SacTrainConfig desk_sac_config() {
  SacTrainConfig cfg;
  cfg.agent.actor_hidden = {32, 32};
  cfg.agent.critic_hidden = {64, 64};
  cfg.agent.tau = 5e-3;
  cfg.batch_size = 128;
  cfg.warmup_steps = 2000;  // 10 full episodes; 5 leaves coverage gaps
  cfg.eval_interval = 5000;
  cfg.eval_rollouts = 10;
  return cfg;
}

}  // namespace ilflow::testing
