#pragma once

#include <array>
#include <optional>
#include <string>
#include <vector>

#include "ilflow/core/nn.hpp"
#include "ilflow/core/random.hpp"
#include "ilflow/core/tensor.hpp"
#include "ilflow/flow/spline.hpp"

namespace ilflow {

enum class NoiseFamily { Normal, Cauchy };

std::string to_string(NoiseFamily f);
NoiseFamily noise_family_from_string(const std::string& s);

// Zero-mean unit-scale noise family scaled by the level h.
struct NoiseConfig {
  double h_min = 0.0;
  double h_max = 4.5;
  NoiseFamily family = NoiseFamily::Normal;

  void validate() const;
  double sample_unit(Rng& rng) const;
  double sample_level(Rng& rng) const { return rng.uniform(h_min, h_max); }
};

struct FlowConfig {
  int state_dim = 1;
  int num_layers = 3;
  int bins = 8;
  double tail_bound = 6.0;
  std::vector<int> hidden = {8, 8};          // coupling conditioner hidden sizes
  std::vector<int> context_hidden = {8, 8};  // context embedding hidden sizes
  int context_dim = 8;
  double omega0 = 2.0 * 3.14159265358979323846;
  bool spectral_norm = true;
  NoiseConfig noise;
};

// One coupling layer: dimensions with (dim + layer) even are transformed by
// per-dimension rational-quadratic splines whose parameters come from a
// conditioner reading the passthrough dimensions plus the context embedding.
// For 1-D states a layer with an empty transformed set transforms everything
// instead (the conditioner then reads the context alone).
class CouplingLayer {
 public:
  CouplingLayer() = default;
  CouplingLayer(int state_dim, int layer_index, const FlowConfig& cfg, Rng& rng,
                const std::string& name);

  struct GraphResult {
    Tensor y;        // B x d
    Tensor log_det;  // B x 1
  };
  // Data-to-latent direction with gradients.
  GraphResult forward_graph(const Tensor& x, const Tensor& context, bool train,
                            double tail);
  // Latent-to-data direction, values only (sampling path).
  Matrix inverse_values(const Matrix& y, const Matrix& context, double tail);

  std::vector<Tensor> parameters() const { return conditioner_.parameters(); }
  void collect_state(std::vector<std::pair<std::string, Matrix*>>& out) {
    conditioner_.collect_state(out);
  }
  const std::vector<int>& transformed_dims() const { return transformed_; }

 private:
  Matrix conditioner_inputs(const Matrix& x, const Matrix& context) const;

  std::vector<int> transformed_;
  std::vector<int> passthrough_;
  Mlp conditioner_;
  int bins_ = 8;
};

// Noise-conditioned conditional density estimator over state transitions:
// a stack of spline coupling layers above a diagonal Gaussian whose mean and
// log-scale are produced from the (state, noise level) context embedding.
// States are standardized internally; h is interpreted in standardized
// units. Once trained the model is immutable and usable concurrently.
class ConditionalFlow {
 public:
  ConditionalFlow() = default;
  ConditionalFlow(const FlowConfig& cfg, std::uint64_t seed);

  // Standardization statistics (per state dimension).
  void set_standardization(const RowVector& mean, const RowVector& std);
  const RowVector& standardization_mean() const { return norm_mean_; }
  const RowVector& standardization_std() const { return norm_std_; }

  // Log-density of raw next states given raw states, one row per example.
  // h outside [h_min, h_max] is clamped with a diagnostic counter.
  Vector log_prob(const Matrix& s_next, const Matrix& s, const Vector& h);
  double log_prob(const RowVector& s_next, const RowVector& s, double h);
  // Density of the standardized next state (the reward convention): equals
  // log_prob plus the log standardization volume.
  Vector log_prob_standardized(const Matrix& s_next, const Matrix& s, const Vector& h);
  double log_prob_standardized(const RowVector& s_next, const RowVector& s, double h);

  // Differentiable negative-log-likelihood path used by training; inputs are
  // already standardized and noised.
  Tensor log_prob_graph_standardized(const Matrix& s_next_std, const Matrix& s_std,
                                     const Vector& h, bool train);

  // n i.i.d. draws from p(. | s, h), raw units.
  Matrix sample(const RowVector& s, double h, int n, Rng& rng);

  // The composed coupling bijection in standardized coordinates (the
  // latent side is the base distribution's domain). Values only.
  struct TransformResult {
    Matrix z;
    Vector log_det;  // log |d z / d x| per row
  };
  TransformResult to_latent_standardized(const Matrix& x_std, const Matrix& s_std,
                                         const Vector& h);
  Matrix from_latent_standardized(const Matrix& z, const Matrix& s_std, const Vector& h);
  // Log-density of the conditional diagonal-Gaussian base at latent points.
  Vector base_log_prob_standardized(const Matrix& z, const Matrix& s_std, const Vector& h);

  std::vector<Tensor> parameters() const;
  std::vector<std::pair<std::string, Matrix*>> state();
  void save(const std::string& checkpoint_path, const std::string& sidecar_path);
  static ConditionalFlow load(const std::string& checkpoint_path,
                              const std::string& sidecar_path);

  const FlowConfig& config() const { return cfg_; }

 private:
  Tensor context_graph(const Matrix& s_std, const Vector& h, bool train);

  FlowConfig cfg_;
  RowVector norm_mean_, norm_std_;
  Mlp context_net_;
  Linear base_head_;  // context_dim -> 2 * state_dim (mean, log-scale)
  std::vector<CouplingLayer> layers_;
};

struct FlowTrainOptions {
  int epochs = 1000;
  int batch_size = 256;
  double learning_rate = 5e-4;
  double weight_decay = 1e-4;
  double validation_fraction = 0.1;
  std::uint64_t seed = 0;
};

struct FlowTrainResult {
  ConditionalFlow model;
  // One row per epoch: {epoch, train_nll, val_nll}.
  std::vector<std::array<double, 3>> loss_log;
  int best_epoch = 0;
  double best_val_nll = 0.0;
};

struct TransitionDataset;  // data module

// Fits the noise-conditioned flow: per example per epoch draws a fresh
// level h ~ U[h_min, h_max] and noise pair, maximizes log p(s'~ | s~, h) by
// AdamW, and returns the parameters with the best validation NLL (validation
// uses noise draws fixed at split time so epochs are comparable).
FlowTrainResult train_flow(const TransitionDataset& dataset, const FlowConfig& cfg,
                           const FlowTrainOptions& opts);

void write_loss_log_csv(const std::string& path,
                        const std::vector<std::array<double, 3>>& rows);

}  // namespace ilflow
