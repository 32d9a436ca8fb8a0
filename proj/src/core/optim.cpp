#include "ilflow/core/optim.hpp"

#include <cmath>

namespace ilflow {

Optimizer::Optimizer(OptimizerConfig cfg, std::vector<Tensor> params)
    : cfg_(cfg), params_(std::move(params)) {
  if (cfg_.learning_rate <= 0) throw Error("optimizer: learning_rate must be > 0");
  m_.reserve(params_.size());
  v_.reserve(params_.size());
  for (const auto& p : params_) {
    m_.push_back(Matrix::Zero(p.rows(), p.cols()));
    v_.push_back(Matrix::Zero(p.rows(), p.cols()));
  }
}

void Optimizer::step() {
  // Validate every gradient before touching any parameter: a rejected step
  // must leave parameters and moments untouched.
  for (const auto& p : params_) {
    if (p.has_grad() && !p.grad().allFinite()) {
      throw Error("optimizer: non-finite gradient on parameter '" + p.name() + "'");
    }
  }
  ++step_count_;
  double bc1 = 1.0 - std::pow(cfg_.beta1, static_cast<double>(step_count_));
  double bc2 = 1.0 - std::pow(cfg_.beta2, static_cast<double>(step_count_));
  for (std::size_t i = 0; i < params_.size(); ++i) {
    if (!params_[i].has_grad()) continue;
    const Matrix& g = params_[i].grad();
    Matrix& value = params_[i].leaf_value();
    m_[i] = cfg_.beta1 * m_[i] + (1.0 - cfg_.beta1) * g;
    v_[i] = cfg_.beta2 * v_[i] + (1.0 - cfg_.beta2) * g.cwiseProduct(g);
    Matrix m_hat = m_[i] / bc1;
    Matrix v_hat = v_[i] / bc2;
    if (cfg_.kind == OptimizerKind::AdamW && cfg_.weight_decay > 0.0) {
      value -= cfg_.learning_rate * cfg_.weight_decay * value;
    }
    value.array() -= cfg_.learning_rate * m_hat.array() / (v_hat.array().sqrt() + cfg_.epsilon);
  }
}

void Optimizer::zero_grad() {
  for (auto& p : params_) p.zero_grad();
}

}  // namespace ilflow
