#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <Eigen/SVD>
#include <cmath>

#include "ilflow/core/nn.hpp"
#include "test_util.hpp"

using namespace ilflow;

TEST_CASE("spectral normalization of diag(3, 1)") {
  Matrix w = Matrix::Zero(2, 2);
  w(0, 0) = 3.0;
  w(1, 1) = 1.0;
  Vector u;
  double sigma = power_iteration_sigma(w, u, 20);
  CHECK(std::abs(sigma - 3.0) / 3.0 < 1e-6);
  Matrix normalized = spectral_normalize(w, 20);
  CHECK(normalized(0, 0) == doctest::Approx(1.0).epsilon(1e-6));
  CHECK(normalized(1, 1) == doctest::Approx(1.0 / 3.0).epsilon(1e-6));
}

TEST_CASE("identity matrix is returned unchanged (sigma = 1)") {
  Matrix w = Matrix::Identity(3, 3);
  Vector u;
  double sigma = power_iteration_sigma(w, u, 5);
  CHECK(sigma == doctest::Approx(1.0).epsilon(1e-12));
  Matrix normalized = spectral_normalize(w, 5);
  CHECK((normalized - w).cwiseAbs().maxCoeff() < 1e-12);
}

TEST_CASE("power iteration matches an SVD oracle on random matrices") {
  Rng rng(11);
  for (int trial = 0; trial < 10; ++trial) {
    Matrix w(5, 5);
    for (Index i = 0; i < w.size(); ++i) w.data()[i] = rng.normal();
    Vector u;
    double sigma = power_iteration_sigma(w, u, 50);
    double svd_sigma = Eigen::JacobiSVD<Matrix>(w).singularValues()(0);
    CHECK(std::abs(sigma - svd_sigma) / svd_sigma < 1e-4);
  }
}

TEST_CASE("zero matrix is returned unchanged") {
  Matrix w = Matrix::Zero(3, 4);
  Matrix normalized = spectral_normalize(w, 10);
  CHECK(normalized.cwiseAbs().maxCoeff() == 0.0);
  Vector u;
  CHECK_THROWS_AS(power_iteration_sigma(w, u, 0), Error);
}

TEST_CASE("spectrally normalized linear layer divides by sigma") {
  Rng rng(5);
  Linear layer(4, 3, true, rng, "sn");
  Matrix x = Matrix::Random(2, 4);
  // Converge the persistent vector, then read off the effective weight.
  for (int i = 0; i < 50; ++i) layer.forward(Tensor::constant(x), true);
  Matrix w = layer.weight.value();
  double svd_sigma = Eigen::JacobiSVD<Matrix>(w).singularValues()(0);
  Matrix y = layer.forward(Tensor::constant(x), false).value();
  Matrix expected = x * (w / svd_sigma) + Matrix::Ones(2, 1) * layer.bias.value();
  CHECK((y - expected).cwiseAbs().maxCoeff() < 1e-6);
}

TEST_CASE("inference freezes the power-iteration state") {
  Rng rng(6);
  Linear layer(4, 4, true, rng, "sn");
  Matrix x = Matrix::Random(3, 4);
  layer.forward(Tensor::constant(x), true);
  Matrix u_before = layer.u;
  Matrix y1 = layer.forward(Tensor::constant(x), false).value();
  Matrix y2 = layer.forward(Tensor::constant(x), false).value();
  CHECK((layer.u - u_before).cwiseAbs().maxCoeff() == 0.0);
  CHECK((y1 - y2).cwiseAbs().maxCoeff() == 0.0);  // bit-identical
  layer.forward(Tensor::constant(x), true);
  CHECK((layer.u - u_before).cwiseAbs().maxCoeff() > 0.0);
}

TEST_CASE("gradients flow through spectral normalization") {
  Rng rng(7);
  Linear layer(3, 2, true, rng, "sn");
  Matrix x = Matrix::Random(4, 3);
  for (int i = 0; i < 30; ++i) layer.forward(Tensor::constant(x), true);

  Tensor loss = mean(square(layer.forward(Tensor::constant(x), false)));
  backward(loss);
  Matrix original = layer.weight.value();
  auto fn = [&](const Matrix& probe) {
    layer.weight.leaf_value() = probe;
    double out = mean(square(layer.forward(Tensor::constant(x), false))).scalar();
    layer.weight.leaf_value() = original;
    return out;
  };
  Matrix numeric = testing::finite_difference_grad(fn, original);
  // u, v are held fixed in the estimator, so gradients agree with finite
  // differences only up to the small sigma-direction term; the dominant
  // part must match.
  CHECK(testing::grad_error(layer.weight.grad(), numeric) < 1e-2);
}

TEST_CASE("sine-network initialization ranges") {
  Rng rng(8);
  MlpConfig cfg;
  cfg.hidden = {16, 16};
  cfg.activation = Activation::Sine;
  cfg.omega0 = 2.0 * 3.14159265358979323846;
  Mlp net(4, 2, cfg, rng, "sine");
  auto params = net.parameters();
  // layer 0 weight: uniform in +-1/fan_in
  CHECK(params[0].value().cwiseAbs().maxCoeff() <= 1.0 / 4.0 + 1e-12);
  // layer 1 weight: +- sqrt(6/fan_in)/omega0
  double bound1 = std::sqrt(6.0 / 16.0) / cfg.omega0;
  CHECK(params[2].value().cwiseAbs().maxCoeff() <= bound1 + 1e-12);
  CHECK(params[2].value().cwiseAbs().maxCoeff() > 0.2 * bound1);
}

TEST_CASE("mlp forward_values matches graph forward") {
  Rng rng(9);
  MlpConfig cfg;
  cfg.hidden = {8};
  cfg.activation = Activation::Relu;
  Mlp net(3, 2, cfg, rng, "mlp");
  Matrix x = Matrix::Random(5, 3);
  Matrix a = net.forward_values(x);
  Matrix b = net.forward(Tensor::constant(x), false).value();
  CHECK((a - b).cwiseAbs().maxCoeff() == 0.0);
}
