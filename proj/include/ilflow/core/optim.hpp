#pragma once

#include <vector>

#include "ilflow/core/tensor.hpp"

namespace ilflow {

enum class OptimizerKind { Adam, AdamW };

struct OptimizerConfig {
  OptimizerKind kind = OptimizerKind::Adam;
  double learning_rate = 3e-4;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double epsilon = 1e-8;
  double weight_decay = 0.0;  // decoupled, AdamW only
};

// Bias-corrected Adam / AdamW over a fixed parameter list. A non-finite
// gradient rejects the whole step and reports the offending parameter.
class Optimizer {
 public:
  Optimizer(OptimizerConfig cfg, std::vector<Tensor> params);

  void step();
  void zero_grad();
  long step_count() const { return step_count_; }
  const OptimizerConfig& config() const { return cfg_; }

 private:
  OptimizerConfig cfg_;
  std::vector<Tensor> params_;
  std::vector<Matrix> m_, v_;
  long step_count_ = 0;
};

}  // namespace ilflow
