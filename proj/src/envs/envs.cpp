#include "ilflow/envs/envs.hpp"

#include <cmath>

namespace ilflow {

DoubleIntegrator1D::DoubleIntegrator1D(int horizon, double dt) {
  spec_.name = "double_integrator_1d";
  spec_.state_dim = 2;
  spec_.action_dim = 1;
  spec_.action_min = Vector::Constant(1, -1.0);
  spec_.action_max = Vector::Constant(1, 1.0);
  spec_.horizon = horizon;
  spec_.dt = dt;
}

Vector DoubleIntegrator1D::reset(Rng& rng) const {
  // Tight start box: return differences then reflect behavior, not start
  // luck (matters for reward-calibration comparisons).
  Vector s(2);
  s[0] = rng.uniform(0.9, 1.0);
  s[1] = rng.uniform(-0.05, 0.05);
  return s;
}

std::pair<Vector, double> DoubleIntegrator1D::step(const Vector& s, const Vector& a) const {
  Vector next(2);
  next[0] = s[0] + s[1] * spec_.dt;
  next[1] = s[1] + a[0] * spec_.dt;
  double reward = -(s[0] * s[0] + 0.1 * s[1] * s[1] + 0.01 * a[0] * a[0]);
  return {next, reward};
}

Vector DoubleIntegrator1D::invert_action(const Vector& s, const Vector& s_next) const {
  Vector a(1);
  a[0] = (s_next[1] - s[1]) / spec_.dt;
  double residual = std::abs(s_next[0] - (s[0] + s[1] * spec_.dt));
  if (residual > 1e-9) {
    throw Error("invert_action: pair not reachable in one step, residual " +
                std::to_string(residual));
  }
  return a;
}

double DoubleIntegrator1D::log_jacobian(const Vector&, const Vector&) const {
  return std::log(spec_.dt);
}

PointMass2D::PointMass2D(int horizon, double dt) {
  spec_.name = "point_mass_2d";
  spec_.state_dim = 4;
  spec_.action_dim = 2;
  spec_.action_min = Vector::Constant(2, -1.0);
  spec_.action_max = Vector::Constant(2, 1.0);
  spec_.horizon = horizon;
  spec_.dt = dt;
}

Vector PointMass2D::reset(Rng& rng) const {
  Vector s = Vector::Zero(4);
  s[0] = rng.uniform(0.9, 1.0);
  s[1] = rng.uniform(0.9, 1.0);
  return s;
}

std::pair<Vector, double> PointMass2D::step(const Vector& s, const Vector& a) const {
  Vector next(4);
  next[0] = s[0] + s[2] * spec_.dt;
  next[1] = s[1] + s[3] * spec_.dt;
  next[2] = s[2] + a[0] * spec_.dt;
  next[3] = s[3] + a[1] * spec_.dt;
  double reward = -(s[0] * s[0] + s[1] * s[1]);
  return {next, reward};
}

Vector PointMass2D::invert_action(const Vector& s, const Vector& s_next) const {
  Vector a(2);
  a[0] = (s_next[2] - s[2]) / spec_.dt;
  a[1] = (s_next[3] - s[3]) / spec_.dt;
  double residual = std::hypot(s_next[0] - (s[0] + s[2] * spec_.dt),
                               s_next[1] - (s[1] + s[3] * spec_.dt));
  if (residual > 1e-9) {
    throw Error("invert_action: pair not reachable in one step, residual " +
                std::to_string(residual));
  }
  return a;
}

double PointMass2D::log_jacobian(const Vector&, const Vector&) const {
  return 2.0 * std::log(spec_.dt);
}

std::unique_ptr<Env> make_env(const std::string& name, int horizon) {
  if (name == "double_integrator_1d") return std::make_unique<DoubleIntegrator1D>(horizon);
  if (name == "point_mass_2d") return std::make_unique<PointMass2D>(horizon);
  throw Error("unknown environment '" + name + "'");
}

Episode::Step Episode::step(const Vector& action) {
  if (done()) throw Error("Episode::step: episode already finished");
  const EnvSpec& spec = env_.spec();
  if (action.size() != spec.action_dim) throw Error("Episode::step: bad action dimension");
  Vector a = action.cwiseMax(spec.action_min).cwiseMin(spec.action_max);
  if ((a - action).norm() > 0.0) ++counters().action_clamped;
  auto [next, reward] = env_.step(state_, a);
  ++t_;
  Step out{next, reward, done(), a};
  state_ = next;
  return out;
}

}  // namespace ilflow
