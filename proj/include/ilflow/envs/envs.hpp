#pragma once

#include <memory>
#include <string>
#include <utility>

#include "ilflow/core/random.hpp"
#include "ilflow/core/tensor.hpp"

namespace ilflow {

struct EnvSpec {
  std::string name;
  int state_dim = 0;
  int action_dim = 0;
  Vector action_min;
  Vector action_max;
  int horizon = 200;
  double dt = 0.05;
};

// Deterministic, invertible-dynamics environment. step is a pure function
// of (state, action); episode bookkeeping lives in Episode.
class Env {
 public:
  virtual ~Env() = default;
  virtual const EnvSpec& spec() const = 0;
  virtual Vector reset(Rng& rng) const = 0;
  // Deterministic transition plus the task reward r(s, a). The action is
  // assumed in-bounds (Episode clamps).
  virtual std::pair<Vector, double> step(const Vector& s, const Vector& a) const = 0;
  // The unique action with step(s, a).first == s_next; throws (with the
  // residual norm) if the pair is not reachable in one step.
  virtual Vector invert_action(const Vector& s, const Vector& s_next) const = 0;
  // log |det d s_next / d a| restricted to the action-affected subspace.
  virtual double log_jacobian(const Vector& s, const Vector& a) const = 0;
};

// x' = x + v dt, v' = v + a dt; reward -(x^2 + 0.1 v^2 + 0.01 a^2).
class DoubleIntegrator1D final : public Env {
 public:
  explicit DoubleIntegrator1D(int horizon = 200, double dt = 0.05);
  const EnvSpec& spec() const override { return spec_; }
  Vector reset(Rng& rng) const override;
  std::pair<Vector, double> step(const Vector& s, const Vector& a) const override;
  Vector invert_action(const Vector& s, const Vector& s_next) const override;
  double log_jacobian(const Vector& s, const Vector& a) const override;

 private:
  EnvSpec spec_;
};

// Position/velocity point mass in the plane, goal at the origin;
// reward -|p|^2. Starts at rest, position uniform in a box.
class PointMass2D final : public Env {
 public:
  explicit PointMass2D(int horizon = 200, double dt = 0.05);
  const EnvSpec& spec() const override { return spec_; }
  Vector reset(Rng& rng) const override;
  std::pair<Vector, double> step(const Vector& s, const Vector& a) const override;
  Vector invert_action(const Vector& s, const Vector& s_next) const override;
  double log_jacobian(const Vector& s, const Vector& a) const override;

 private:
  EnvSpec spec_;
};

std::unique_ptr<Env> make_env(const std::string& name, int horizon = 200);

// Owns one rollout's state and step counter; clamps out-of-bound actions
// (with a diagnostic counter) and refuses to step past the horizon.
class Episode {
 public:
  Episode(const Env& env, Rng& rng) : env_(env), state_(env.reset(rng)) {}
  Episode(const Env& env, Vector initial_state)
      : env_(env), state_(std::move(initial_state)) {}

  struct Step {
    Vector next_state;
    double reward = 0.0;
    bool done = false;
    Vector applied_action;  // after clamping
  };
  Step step(const Vector& action);

  const Vector& state() const { return state_; }
  int t() const { return t_; }
  bool done() const { return t_ >= env_.spec().horizon; }
  // Remaining time normalized to [0, 1].
  double time_to_horizon() const {
    return static_cast<double>(env_.spec().horizon - t_) / env_.spec().horizon;
  }

 private:
  const Env& env_;
  Vector state_;
  int t_ = 0;
};

}  // namespace ilflow
