#pragma once

#include <string>
#include <utility>
#include <vector>

#include "ilflow/core/random.hpp"
#include "ilflow/core/tensor.hpp"

namespace ilflow {

enum class Activation { Tanh, Relu, Sine };

// Power-iteration estimate of the largest singular value. u is the
// persistent left vector (resized and initialized if empty); each call runs
// `iters` update rounds.
double power_iteration_sigma(const Matrix& w, Vector& u, int iters);

// weight / sigma_hat with a fresh power-iteration state. A (near-)zero
// matrix is returned unchanged.
Matrix spectral_normalize(const Matrix& weight, int iters);

// Dense layer. With spectral normalization enabled the effective weight is
// W / sigma_hat; the power-iteration vector u advances one round per
// training-mode forward and is frozen at inference.
class Linear {
 public:
  Linear() = default;
  Linear(Index in, Index out, bool use_spectral_norm, Rng& rng, std::string name);

  Tensor forward(const Tensor& x, bool train);

  void init_uniform(double bound, Rng& rng);
  void zero_init();

  Tensor weight;  // in x out
  Tensor bias;    // 1 x out
  Matrix u;       // power-iteration state, in x 1 (empty when spectral norm is off)
  bool spectral = false;
  std::string name;

  std::vector<Tensor> parameters() const { return {weight, bias}; }
  void collect_state(std::vector<std::pair<std::string, Matrix*>>& out);
};

struct MlpConfig {
  std::vector<int> hidden;
  Activation activation = Activation::Tanh;
  double omega0 = 1.0;  // sine frequency, used when activation == Sine
  bool spectral_norm = false;
  bool zero_init_output = false;
};

class Mlp {
 public:
  Mlp() = default;
  Mlp(Index in, Index out, const MlpConfig& cfg, Rng& rng, const std::string& name);

  Tensor forward(const Tensor& x, bool train);
  // Plain-value forward for callers that hold raw matrices.
  Matrix forward_values(const Matrix& x) ;

  std::vector<Tensor> parameters() const;
  void collect_state(std::vector<std::pair<std::string, Matrix*>>& out);

  Index input_dim() const { return in_; }
  Index output_dim() const { return out_; }

 private:
  Tensor activate(const Tensor& x) const;

  std::vector<Linear> layers_;
  MlpConfig cfg_;
  Index in_ = 0, out_ = 0;
};

}  // namespace ilflow
