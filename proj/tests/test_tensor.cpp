#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>

#include "ilflow/core/nn.hpp"
#include "ilflow/core/tensor.hpp"
#include "test_util.hpp"

using namespace ilflow;

TEST_CASE("square gradient at x=3 is 6") {
  Tensor x = Tensor::parameter(Matrix::Constant(1, 1, 3.0), "x");
  Tensor loss = mul(x, x);
  backward(loss);
  CHECK(x.grad()(0, 0) == doctest::Approx(6.0).epsilon(1e-12));
}

TEST_CASE("sine activation value and gradient at 0 with omega0 = 2pi") {
  const double omega = 2.0 * 3.14159265358979323846;
  Tensor x = Tensor::parameter(Matrix::Zero(1, 1), "x");
  Tensor y = sine(x, omega);
  CHECK(y.value()(0, 0) == doctest::Approx(0.0));
  backward(y);
  CHECK(x.grad()(0, 0) == doctest::Approx(omega).epsilon(1e-12));
}

TEST_CASE("three-layer MLP gradients match central finite differences") {
  Rng rng(7);
  MlpConfig cfg;
  cfg.hidden = {5, 4};
  cfg.activation = Activation::Tanh;
  Mlp net(3, 2, cfg, rng, "mlp");
  Matrix input(4, 3);
  for (Index i = 0; i < input.size(); ++i) input.data()[i] = rng.uniform(-1.0, 1.0);

  Tensor loss = mean(square(net.forward(Tensor::constant(input), false)));
  backward(loss);

  auto params = net.parameters();
  for (auto& p : params) {
    Matrix original = p.value();
    auto fn = [&](const Matrix& probe) {
      p.leaf_value() = probe;
      double out = mean(square(net.forward(Tensor::constant(input), false))).scalar();
      p.leaf_value() = original;
      return out;
    };
    Matrix numeric = testing::finite_difference_grad(fn, original);
    CHECK(testing::grad_error(p.grad(), numeric) < 1e-5);
  }
}

TEST_CASE("repeated backward accumulates") {
  Tensor x = Tensor::parameter(Matrix::Constant(1, 1, 2.0), "x");
  Tensor loss = mul(x, x);
  backward(loss);
  backward(loss);
  CHECK(x.grad()(0, 0) == doctest::Approx(8.0));
  x.zero_grad();
  backward(loss);
  CHECK(x.grad()(0, 0) == doctest::Approx(4.0));
}

TEST_CASE("backward requires a scalar loss") {
  Tensor x = Tensor::parameter(Matrix::Ones(2, 2), "x");
  Tensor y = mul(x, x);
  CHECK_THROWS_AS(backward(y), Error);
}

TEST_CASE("broadcast gradients reduce to operand shapes") {
  Tensor a = Tensor::parameter(Matrix::Ones(3, 2), "a");
  Tensor row = Tensor::parameter(Matrix::Constant(1, 2, 2.0), "row");
  Tensor col = Tensor::parameter(Matrix::Constant(3, 1, -1.0), "col");
  Tensor s = Tensor::parameter(Matrix::Constant(1, 1, 0.5), "s");
  Tensor loss = sum(mul(add(mul(a, row), col), s));
  backward(loss);
  CHECK(row.grad().rows() == 1);
  CHECK(row.grad().cols() == 2);
  CHECK(row.grad()(0, 0) == doctest::Approx(1.5));  // sum over 3 rows of a*s
  CHECK(col.grad().rows() == 3);
  CHECK(col.grad()(1, 0) == doctest::Approx(1.0));  // sum over 2 cols of s
  CHECK(s.grad().size() == 1);
  CHECK(s.grad()(0, 0) == doctest::Approx(3.0 * 2.0 * 2.0 - 6.0));  // sum(a*row + col)
}

TEST_CASE("slice and concat route gradients to the right columns") {
  Tensor x = Tensor::parameter(Matrix::Ones(2, 4), "x");
  Tensor left = slice_cols(x, 0, 2);
  Tensor right = slice_cols(x, 2, 2);
  Tensor loss = sum(concat_cols({left * 2.0, right}));
  backward(loss);
  CHECK(x.grad()(0, 0) == doctest::Approx(2.0));
  CHECK(x.grad()(0, 3) == doctest::Approx(1.0));
  CHECK_THROWS_AS(slice_cols(x, 3, 2), Error);
}

TEST_CASE("minimum routes gradient to the smaller input, ties to the first") {
  Tensor a = Tensor::parameter(Matrix::Constant(1, 2, 1.0), "a");
  Matrix bv(1, 2);
  bv << 2.0, 1.0;  // second column ties
  Tensor b = Tensor::parameter(bv, "b");
  backward(sum(minimum(a, b)));
  CHECK(a.grad()(0, 0) == doctest::Approx(1.0));
  CHECK(a.grad()(0, 1) == doctest::Approx(1.0));
  CHECK(b.grad()(0, 0) == doctest::Approx(0.0));
  CHECK(b.grad()(0, 1) == doctest::Approx(0.0));
}

TEST_CASE("clamp has zero gradient outside the interval") {
  Matrix xv(1, 3);
  xv << -2.0, 0.5, 2.0;
  Tensor x = Tensor::parameter(xv, "x");
  backward(sum(clamp(x, -1.0, 1.0)));
  CHECK(x.grad()(0, 0) == doctest::Approx(0.0));
  CHECK(x.grad()(0, 1) == doctest::Approx(1.0));
  CHECK(x.grad()(0, 2) == doctest::Approx(0.0));
}

TEST_CASE("inference without tracked inputs records no graph") {
  Tensor a = Tensor::constant(Matrix::Ones(2, 2));
  Tensor b = tanh(a * 2.0);
  CHECK_FALSE(b.requires_grad());
}

TEST_CASE("identical seeds give bit-identical results") {
  auto run = [](std::uint64_t seed) {
    Rng rng(seed);
    Matrix m(3, 3);
    for (Index i = 0; i < m.size(); ++i) m.data()[i] = rng.normal();
    Tensor x = Tensor::parameter(m, "x");
    Tensor loss = mean(square(tanh(matmul(x, x))));
    backward(loss);
    return std::pair(loss.scalar(), Matrix(x.grad()));
  };
  auto [l1, g1] = run(123);
  auto [l2, g2] = run(123);
  CHECK(l1 == l2);
  CHECK((g1 - g2).cwiseAbs().maxCoeff() == 0.0);
}

TEST_CASE("random composite graphs match finite differences") {
  for (std::uint64_t seed = 0; seed < 8; ++seed) {
    CAPTURE(seed);
    CHECK(testing::random_graph_grad_error(1000 + seed) < 1e-5);
  }
}

TEST_CASE("division and rowsum gradients") {
  Rng rng(3);
  Matrix av(2, 3), bv(2, 1);
  for (Index i = 0; i < av.size(); ++i) av.data()[i] = rng.uniform(0.5, 2.0);
  for (Index i = 0; i < bv.size(); ++i) bv.data()[i] = rng.uniform(0.5, 2.0);
  Tensor a = Tensor::parameter(av, "a");
  Tensor b = Tensor::parameter(bv, "b");
  Tensor loss = mean(square(rowsum(div(a, b))));
  backward(loss);
  {
    auto fn = [&](const Matrix& probe) {
      Tensor aa = Tensor::constant(probe);
      Tensor bb = Tensor::constant(bv);
      return mean(square(rowsum(div(aa, bb)))).scalar();
    };
    CHECK(testing::grad_error(a.grad(), testing::finite_difference_grad(fn, av)) < 1e-6);
  }
  {
    auto fn = [&](const Matrix& probe) {
      Tensor aa = Tensor::constant(av);
      Tensor bb = Tensor::constant(probe);
      return mean(square(rowsum(div(aa, bb)))).scalar();
    };
    CHECK(testing::grad_error(b.grad(), testing::finite_difference_grad(fn, bv)) < 1e-6);
  }
}
