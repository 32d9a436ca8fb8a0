#include "ilflow/core/nn.hpp"

#include <cmath>
#include <limits>

namespace ilflow {

namespace {
constexpr double kSigmaFloor = std::numeric_limits<double>::epsilon();

void seed_power_vector(Vector& u, Index n) {
  // Deterministic, almost surely not orthogonal to the top singular vector.
  Rng rng(0x51e0a11ULL + static_cast<std::uint64_t>(n));
  u.resize(n);
  for (Index i = 0; i < n; ++i) u[i] = rng.normal();
  u.normalize();
}
}  // namespace

double power_iteration_sigma(const Matrix& w, Vector& u, int iters) {
  if (w.rows() == 0 || w.cols() == 0) throw Error("power_iteration: empty matrix");
  if (iters < 1) throw Error("power_iteration: iters must be >= 1");
  if (u.size() != w.rows()) seed_power_vector(u, w.rows());
  Vector v(w.cols());
  for (int i = 0; i < iters; ++i) {
    v = w.transpose() * u;
    double nv = v.norm();
    if (nv <= kSigmaFloor) return kSigmaFloor;
    v /= nv;
    u = w * v;
    double nu = u.norm();
    if (nu <= kSigmaFloor) return kSigmaFloor;
    u /= nu;
  }
  return u.dot(w * v);
}

Matrix spectral_normalize(const Matrix& weight, int iters) {
  Vector u;
  double sigma = power_iteration_sigma(weight, u, iters);
  if (sigma <= kSigmaFloor) return weight;
  return weight / sigma;
}

Linear::Linear(Index in, Index out, bool use_spectral_norm, Rng& rng, std::string name_)
    : spectral(use_spectral_norm), name(std::move(name_)) {
  Matrix w(in, out);
  double bound = 1.0 / std::sqrt(static_cast<double>(in));
  for (Index i = 0; i < w.size(); ++i) w.data()[i] = rng.uniform(-bound, bound);
  weight = Tensor::parameter(std::move(w), name + ".weight");
  bias = Tensor::parameter(Matrix::Zero(1, out), name + ".bias");
  if (spectral) {
    Vector u0;
    seed_power_vector(u0, in);
    u = u0;
  }
}

void Linear::init_uniform(double bound, Rng& rng) {
  Matrix& w = weight.leaf_value();
  for (Index i = 0; i < w.size(); ++i) w.data()[i] = rng.uniform(-bound, bound);
}

void Linear::zero_init() {
  weight.leaf_value().setZero();
  bias.leaf_value().setZero();
}

Tensor Linear::forward(const Tensor& x, bool train) {
  Tensor w = weight;
  if (spectral) {
    const Matrix& wv = weight.value();
    Vector v = wv.transpose() * u.col(0);
    double nv = v.norm();
    if (nv > kSigmaFloor) {
      v /= nv;
      if (train) {
        Vector u_new = wv * v;
        double nu = u_new.norm();
        if (nu > kSigmaFloor) u = u_new / nu;
      }
      // sigma as a graph node so the division backpropagates into W;
      // u and v are treated as constants, the usual estimator.
      Tensor sigma = matmul(matmul(Tensor::constant(Matrix(u.transpose())), weight),
                            Tensor::constant(Matrix(v)));
      if (sigma.scalar() > kSigmaFloor) w = div(weight, sigma);
    }
  }
  return affine(x, w, bias);
}

void Linear::collect_state(std::vector<std::pair<std::string, Matrix*>>& out) {
  out.emplace_back(name + ".weight", &weight.leaf_value());
  out.emplace_back(name + ".bias", &bias.leaf_value());
  if (spectral) out.emplace_back(name + ".u", &u);
}

Mlp::Mlp(Index in, Index out, const MlpConfig& cfg, Rng& rng, const std::string& name)
    : cfg_(cfg), in_(in), out_(out) {
  std::vector<Index> dims;
  dims.push_back(in);
  for (int h : cfg.hidden) dims.push_back(h);
  dims.push_back(out);
  for (std::size_t i = 0; i + 1 < dims.size(); ++i) {
    bool is_output = (i + 2 == dims.size());
    bool sn = cfg.spectral_norm && !is_output;
    layers_.emplace_back(dims[i], dims[i + 1], sn, rng,
                         name + ".l" + std::to_string(i));
    if (cfg.activation == Activation::Sine && !is_output) {
      // Sinusoidal nets need the wider first-layer scheme: first layer
      // uniform in +-1/fan_in, later layers +-sqrt(6/fan_in)/omega0.
      double fan_in = static_cast<double>(dims[i]);
      double bound = (i == 0) ? 1.0 / fan_in : std::sqrt(6.0 / fan_in) / cfg.omega0;
      layers_.back().init_uniform(bound, rng);
    }
  }
  if (cfg.zero_init_output) layers_.back().zero_init();
}

Tensor Mlp::activate(const Tensor& x) const {
  switch (cfg_.activation) {
    case Activation::Tanh: return tanh(x);
    case Activation::Relu: return relu(x);
    case Activation::Sine: return sine(x, cfg_.omega0);
  }
  throw Error("unknown activation");
}

Tensor Mlp::forward(const Tensor& x, bool train) {
  Tensor h = x;
  for (std::size_t i = 0; i < layers_.size(); ++i) {
    h = layers_[i].forward(h, train);
    if (i + 1 < layers_.size()) h = activate(h);
  }
  return h;
}

Matrix Mlp::forward_values(const Matrix& x) {
  NoGradGuard guard;
  return forward(Tensor::constant(x), false).value();
}

std::vector<Tensor> Mlp::parameters() const {
  std::vector<Tensor> out;
  for (const auto& l : layers_) {
    out.push_back(l.weight);
    out.push_back(l.bias);
  }
  return out;
}

void Mlp::collect_state(std::vector<std::pair<std::string, Matrix*>>& out) {
  for (auto& l : layers_) l.collect_state(out);
}

}  // namespace ilflow
