#include "ilflow/flow/spline.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

namespace ilflow {

namespace spline_detail {
double deriv_raw_shift() {
  static const double shift = std::log(std::exp(1.0 - kDerivFloor) - 1.0);
  return shift;
}
}  // namespace spline_detail

namespace {

using spline_detail::kDerivFloor;
using spline_detail::kDerivUnderflowClamp;
using spline_detail::kMinBinFraction;

Vector softmax_row(const RowVector& raw) {
  Vector e = (raw.array() - raw.maxCoeff()).exp().transpose();
  return e / e.sum();
}

void build_knots(RqSpline& s) {
  int k = s.bins();
  s.knots_x.resize(k + 1);
  s.knots_y.resize(k + 1);
  s.knots_x[0] = -s.tail;
  s.knots_y[0] = -s.tail;
  for (int i = 0; i < k; ++i) {
    s.knots_x[i + 1] = s.knots_x[i] + s.widths[i];
    s.knots_y[i + 1] = s.knots_y[i] + s.heights[i];
  }
  // Kill accumulated rounding on the last edge so the tails join exactly.
  s.knots_x[k] = s.tail;
  s.knots_y[k] = s.tail;
}

int find_bin(const Vector& knots, double v) {
  // Largest i with knots[i] <= v, clamped to a valid bin index.
  int k = static_cast<int>(knots.size()) - 1;
  int lo = 0, hi = k - 1;
  while (lo < hi) {
    int mid = (lo + hi + 1) / 2;
    if (knots[mid] <= v) lo = mid;
    else hi = mid - 1;
  }
  return lo;
}

}  // namespace

RqSpline RqSpline::from_raw(const RowVector& raw_widths, const RowVector& raw_heights,
                            const RowVector& raw_derivs, double tail) {
  if (raw_widths.size() != raw_heights.size() || raw_derivs.size() != raw_widths.size() - 1) {
    throw Error("rq_spline: raw parameter sizes disagree");
  }
  int k = static_cast<int>(raw_widths.size());
  RqSpline s;
  s.tail = tail;
  double scale = 2.0 * tail;
  double floor_frac = kMinBinFraction;
  s.widths = scale * (floor_frac + (1.0 - floor_frac * k) * softmax_row(raw_widths).array());
  s.heights = scale * (floor_frac + (1.0 - floor_frac * k) * softmax_row(raw_heights).array());
  s.derivs.resize(k + 1);
  s.derivs[0] = 1.0;
  s.derivs[k] = 1.0;
  for (int i = 0; i < k - 1; ++i) {
    double raw = raw_derivs[i] + spline_detail::deriv_raw_shift();
    double sp = raw > 0 ? raw + std::log1p(std::exp(-raw)) : std::log1p(std::exp(raw));
    s.derivs[i + 1] = kDerivFloor + sp;
  }
  build_knots(s);
  return s;
}

RqSpline RqSpline::identity(int bins, double tail) {
  return from_raw(RowVector::Zero(bins), RowVector::Zero(bins), RowVector::Zero(bins - 1),
                  tail);
}

std::pair<double, double> RqSpline::forward(double x) const {
  if (!std::isfinite(x)) throw Error("rq_spline: non-finite input");
  if (x <= -tail || x >= tail) return {x, 0.0};
  int b = find_bin(knots_x, x);
  double w = widths[b], h = heights[b];
  double slope = h / w;
  double dk = derivs[b], dk1 = derivs[b + 1];
  double theta = (x - knots_x[b]) / w;
  double omt = 1.0 - theta;
  double den = slope + (dk1 + dk - 2.0 * slope) * theta * omt;
  double y = knots_y[b] + h * (slope * theta * theta + dk * theta * omt) / den;
  double deriv = slope * slope *
                 (dk1 * theta * theta + 2.0 * slope * theta * omt + dk * omt * omt) /
                 (den * den);
  if (deriv < kDerivUnderflowClamp) {
    deriv = kDerivUnderflowClamp;
    ++counters().spline_derivative_clamped;
  }
  return {y, std::log(deriv)};
}

std::pair<double, double> RqSpline::inverse(double y) const {
  if (!std::isfinite(y)) throw Error("rq_spline: non-finite input");
  if (y <= -tail || y >= tail) return {y, 0.0};
  int b = find_bin(knots_y, y);
  double w = widths[b], h = heights[b];
  double slope = h / w;
  double dk = derivs[b], dk1 = derivs[b + 1];
  double r = y - knots_y[b];
  double kk = dk1 + dk - 2.0 * slope;
  double a = h * (slope - dk) + r * kk;
  double bq = h * dk - r * kk;
  double c = -slope * r;
  double disc = bq * bq - 4.0 * a * c;
  disc = std::max(disc, 0.0);
  double theta = 2.0 * c / (-bq - std::sqrt(disc));
  theta = std::clamp(theta, 0.0, 1.0);
  double x = knots_x[b] + theta * w;
  double omt = 1.0 - theta;
  double den = slope + kk * theta * omt;
  double deriv = slope * slope *
                 (dk1 * theta * theta + 2.0 * slope * theta * omt + dk * omt * omt) /
                 (den * den);
  if (deriv < kDerivUnderflowClamp) {
    deriv = kDerivUnderflowClamp;
    ++counters().spline_derivative_clamped;
  }
  return {x, -std::log(deriv)};
}

std::pair<Vector, double> rq_spline(const Vector& x, const RqSpline& params,
                                    SplineDirection direction) {
  Vector y(x.size());
  double log_det = 0.0;
  for (Index i = 0; i < x.size(); ++i) {
    auto [v, ld] = direction == SplineDirection::Forward ? params.forward(x[i])
                                                         : params.inverse(x[i]);
    y[i] = v;
    log_det += ld;
  }
  return {y, log_det};
}

SplineForwardGraph rq_spline_forward_graph(const Tensor& x, const Tensor& raw_widths,
                                           const Tensor& raw_heights,
                                           const Tensor& raw_derivs, double tail) {
  const Index batch = x.rows();
  const Index k = raw_widths.cols();
  if (x.cols() != 1 || raw_heights.cols() != k || raw_derivs.cols() != k - 1 ||
      raw_widths.rows() != batch || raw_heights.rows() != batch ||
      raw_derivs.rows() != batch) {
    throw Error("rq_spline_forward_graph: shape mismatch");
  }
  if (!x.value().allFinite()) throw Error("rq_spline: non-finite input");

  const double scale = 2.0 * tail;
  const double floor_frac = kMinBinFraction;
  const double kd = static_cast<double>(k);

  auto normalize_bins = [&](const Tensor& raw) {
    // Row-stabilized softmax; the shift is a constant so gradients are the
    // plain softmax gradients.
    Matrix shift = raw.value().rowwise().maxCoeff();
    Tensor e = exp(sub(raw, Tensor::constant(shift)));
    Tensor p = div(e, rowsum(e));
    return (scale * floor_frac) + (scale * (1.0 - floor_frac * kd)) * p;
  };

  Tensor widths = normalize_bins(raw_widths);   // B x K
  Tensor heights = normalize_bins(raw_heights); // B x K

  Matrix tri = Matrix::Zero(k, k);  // inclusive cumulative sum over columns
  for (Index r = 0; r < k; ++r)
    for (Index c = r; c < k; ++c) tri(r, c) = 1.0;
  Tensor cum_w = matmul(widths, Tensor::constant(tri));
  Tensor cum_h = matmul(heights, Tensor::constant(tri));
  Tensor left_x = (cum_w - widths) - tail;   // B x K, left bin edges
  Tensor left_y = (cum_h - heights) - tail;

  Tensor d_interior =
      softplus(raw_derivs + spline_detail::deriv_raw_shift()) + kDerivFloor;  // B x (K-1)
  Tensor ones_col = Tensor::constant(Matrix::Ones(batch, 1));
  Tensor d_full = concat_cols({ones_col, d_interior, ones_col});  // B x (K+1)

  // Bin membership from current values; piecewise-constant in the params.
  Matrix edges = cum_w.value().array() - tail;  // right edges
  Matrix mask = Matrix::Zero(batch, k);
  Eigen::ArrayXd inside(batch);
  for (Index i = 0; i < batch; ++i) {
    double xi = x.value()(i, 0);
    inside[i] = (xi > -tail && xi < tail) ? 1.0 : 0.0;
    double xc = std::clamp(xi, -tail, tail);
    Index b = 0;
    while (b + 1 < k && xc >= edges(i, b)) ++b;
    mask(i, b) = 1.0;
  }
  Tensor m = Tensor::constant(mask);
  Tensor inside_t = Tensor::constant(Matrix(inside.matrix()));

  auto pick = [&](const Tensor& t) { return rowsum(mul(m, t)); };  // B x 1
  Tensor w_sel = pick(widths);
  Tensor h_sel = pick(heights);
  Tensor x0 = pick(left_x);
  Tensor y0 = pick(left_y);
  Tensor dk = pick(slice_cols(d_full, 0, k));
  Tensor dk1 = pick(slice_cols(d_full, 1, k));

  Tensor xc = clamp(x, -tail, tail);
  Tensor theta = div(sub(xc, x0), w_sel);
  Tensor omt = 1.0 - theta;
  Tensor slope = div(h_sel, w_sel);
  Tensor t_omt = mul(theta, omt);
  Tensor den = slope + mul(dk1 + dk - 2.0 * slope, t_omt);
  Tensor y_spline =
      y0 + div(mul(h_sel, mul(slope, square(theta)) + mul(dk, t_omt)), den);
  Tensor deriv = div(
      mul(square(slope),
          mul(dk1, square(theta)) + 2.0 * mul(slope, t_omt) + mul(dk, square(omt))),
      square(den));
  if ((deriv.value().array() < kDerivUnderflowClamp).any()) {
    counters().spline_derivative_clamped +=
        (deriv.value().array() < kDerivUnderflowClamp).count();
    deriv = clamp(deriv, kDerivUnderflowClamp, std::numeric_limits<double>::max());
  }

  SplineForwardGraph out;
  out.y = mul(inside_t, y_spline) + mul(1.0 - inside_t, x);
  out.log_det = mul(inside_t, log(deriv));
  return out;
}

}  // namespace ilflow
