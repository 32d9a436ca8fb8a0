#pragma once

#include <utility>

#include "ilflow/core/tensor.hpp"

namespace ilflow {

enum class SplineDirection { Forward, Inverse };

// Monotone rational-quadratic spline on [-tail, tail] with identity linear
// tails, parameterized by K bin widths/heights and K-1 interior knot
// derivatives (boundary derivatives pinned to 1 so the tails join smoothly).
struct RqSpline {
  Vector widths;   // K, positive, sums to 2*tail
  Vector heights;  // K, positive, sums to 2*tail
  Vector derivs;   // K+1, positive, derivs[0] = derivs[K] = 1
  Vector knots_x;  // K+1 cumulative bin edges in [-tail, tail]
  Vector knots_y;  // K+1
  double tail = 6.0;

  // Maps raw conditioner outputs to valid parameters: softmax scaled to
  // 2*tail with a small bin floor, softplus-with-floor derivatives shifted
  // so that zero raw input yields the identity spline.
  static RqSpline from_raw(const RowVector& raw_widths, const RowVector& raw_heights,
                           const RowVector& raw_derivs, double tail);
  static RqSpline identity(int bins, double tail);

  // Returns (y, log |dy/dx|). Outside [-tail, tail] the map is the identity
  // with zero log-derivative.
  std::pair<double, double> forward(double x) const;
  // Returns (x, log |dx/dy|).
  std::pair<double, double> inverse(double y) const;

  int bins() const { return static_cast<int>(widths.size()); }
};

// Vector form of the spline op: applies the same spline elementwise and
// returns the transformed vector plus the summed log-derivative. Non-finite
// input is an error.
std::pair<Vector, double> rq_spline(const Vector& x, const RqSpline& params,
                                    SplineDirection direction);

// Batched differentiable forward transform for one output dimension.
// x is B x 1; raw parameter tensors are B x K, B x K, B x (K-1) slices of a
// conditioner output. Gradients flow into the raw parameters (and into x
// when x itself is tracked); bin selection is piecewise-constant and
// contributes no gradient.
struct SplineForwardGraph {
  Tensor y;        // B x 1
  Tensor log_det;  // B x 1
};
SplineForwardGraph rq_spline_forward_graph(const Tensor& x, const Tensor& raw_widths,
                                           const Tensor& raw_heights,
                                           const Tensor& raw_derivs, double tail);

// Parameterization constants shared by the raw and graph paths.
namespace spline_detail {
constexpr double kMinBinFraction = 1e-3;
constexpr double kDerivFloor = 1e-3;
constexpr double kDerivUnderflowClamp = 1e-8;
// softplus(shift) + floor == 1, so zero raw derivatives give slope 1.
double deriv_raw_shift();
}  // namespace spline_detail

}  // namespace ilflow
