#include "ilflow/flow/flow.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numeric>

#include <json.hpp>

#include "ilflow/core/checkpoint.hpp"
#include "ilflow/core/optim.hpp"
#include "ilflow/data/data.hpp"

namespace ilflow {

using nlohmann::json;

namespace {
constexpr double kLogTwoPi = 1.8378770664093454836;
constexpr double kLogScaleClamp = 10.0;
constexpr double kStdFloor = 1e-8;
}  // namespace

std::string to_string(NoiseFamily f) {
  return f == NoiseFamily::Normal ? "normal" : "cauchy";
}

NoiseFamily noise_family_from_string(const std::string& s) {
  if (s == "normal") return NoiseFamily::Normal;
  if (s == "cauchy") return NoiseFamily::Cauchy;
  throw Error("unknown noise family '" + s + "'");
}

void NoiseConfig::validate() const {
  if (!(h_min >= 0.0 && h_min < h_max)) {
    throw Error("NoiseConfig: requires 0 <= h_min < h_max");
  }
}

double NoiseConfig::sample_unit(Rng& rng) const {
  return family == NoiseFamily::Normal ? rng.normal() : rng.cauchy();
}

CouplingLayer::CouplingLayer(int state_dim, int layer_index, const FlowConfig& cfg, Rng& rng,
                             const std::string& name)
    : bins_(cfg.bins) {
  for (int i = 0; i < state_dim; ++i) {
    if ((i + layer_index) % 2 == 0) transformed_.push_back(i);
    else passthrough_.push_back(i);
  }
  if (transformed_.empty()) {
    transformed_ = passthrough_;
    passthrough_.clear();
  }
  Index in = static_cast<Index>(passthrough_.size()) + cfg.context_dim + 1;
  Index out = static_cast<Index>(transformed_.size()) * (3 * cfg.bins - 1);
  MlpConfig mlp_cfg;
  mlp_cfg.hidden = cfg.hidden;
  mlp_cfg.activation = Activation::Sine;
  mlp_cfg.omega0 = cfg.omega0;
  mlp_cfg.spectral_norm = cfg.spectral_norm;
  mlp_cfg.zero_init_output = true;  // start as the identity transform
  conditioner_ = Mlp(in, out, mlp_cfg, rng, name);
}

CouplingLayer::GraphResult CouplingLayer::forward_graph(const Tensor& x, const Tensor& context,
                                                        bool train, double tail) {
  std::vector<Tensor> cond_parts;
  for (int dim : passthrough_) cond_parts.push_back(slice_cols(x, dim, 1));
  cond_parts.push_back(context);
  Tensor cond_out = conditioner_.forward(concat_cols(cond_parts), train);

  const Index k = bins_;
  const Index block = 3 * k - 1;
  std::vector<Tensor> out_dims(static_cast<std::size_t>(x.cols()));
  Tensor log_det;
  for (std::size_t j = 0; j < transformed_.size(); ++j) {
    Index base = static_cast<Index>(j) * block;
    Tensor raw_w = slice_cols(cond_out, base, k);
    Tensor raw_h = slice_cols(cond_out, base + k, k);
    Tensor raw_d = slice_cols(cond_out, base + 2 * k, k - 1);
    Tensor xj = slice_cols(x, transformed_[j], 1);
    auto res = rq_spline_forward_graph(xj, raw_w, raw_h, raw_d, tail);
    out_dims[static_cast<std::size_t>(transformed_[j])] = res.y;
    log_det = j == 0 ? res.log_det : add(log_det, res.log_det);
  }
  for (int dim : passthrough_) {
    out_dims[static_cast<std::size_t>(dim)] = slice_cols(x, dim, 1);
  }
  return {concat_cols(out_dims), log_det};
}

Matrix CouplingLayer::inverse_values(const Matrix& y, const Matrix& context, double tail) {
  Matrix cond_in(y.rows(), static_cast<Index>(passthrough_.size()) + context.cols());
  Index at = 0;
  for (int dim : passthrough_) cond_in.col(at++) = y.col(dim);
  cond_in.rightCols(context.cols()) = context;
  Matrix cond_out = conditioner_.forward_values(cond_in);

  const Index k = bins_;
  const Index block = 3 * k - 1;
  Matrix x = y;
  for (std::size_t j = 0; j < transformed_.size(); ++j) {
    Index base = static_cast<Index>(j) * block;
    int dim = transformed_[j];
    for (Index i = 0; i < y.rows(); ++i) {
      RqSpline spline = RqSpline::from_raw(cond_out.row(i).segment(base, k),
                                           cond_out.row(i).segment(base + k, k),
                                           cond_out.row(i).segment(base + 2 * k, k - 1), tail);
      x(i, dim) = spline.inverse(y(i, dim)).first;
    }
  }
  return x;
}

ConditionalFlow::ConditionalFlow(const FlowConfig& cfg, std::uint64_t seed) : cfg_(cfg) {
  cfg_.noise.validate();
  if (cfg_.state_dim < 1) throw Error("ConditionalFlow: state_dim must be >= 1");
  Rng rng(Rng::splitmix64(seed ^ 0xf10fULL));
  MlpConfig ctx_cfg;
  ctx_cfg.hidden = cfg_.context_hidden;
  ctx_cfg.activation = Activation::Sine;
  ctx_cfg.omega0 = cfg_.omega0;
  ctx_cfg.spectral_norm = cfg_.spectral_norm;
  context_net_ = Mlp(cfg_.state_dim + 1, cfg_.context_dim, ctx_cfg, rng, "flow.context");
  base_head_ = Linear(cfg_.context_dim + 1, 2 * cfg_.state_dim, false, rng, "flow.base");
  base_head_.zero_init();  // standard-normal base at initialization
  layers_.reserve(cfg_.num_layers);
  for (int l = 0; l < cfg_.num_layers; ++l) {
    layers_.emplace_back(cfg_.state_dim, l, cfg_, rng, "flow.coupling" + std::to_string(l));
  }
  norm_mean_ = RowVector::Zero(cfg_.state_dim);
  norm_std_ = RowVector::Ones(cfg_.state_dim);
}

void ConditionalFlow::set_standardization(const RowVector& mean, const RowVector& std) {
  if (mean.size() != cfg_.state_dim || std.size() != cfg_.state_dim) {
    throw Error("set_standardization: dimension mismatch");
  }
  if ((std.array() <= 0.0).any()) throw Error("set_standardization: std must be positive");
  norm_mean_ = mean;
  norm_std_ = std;
}

Tensor ConditionalFlow::context_graph(const Matrix& s_std, const Vector& h, bool train) {
  // h enters normalized to [0, 1]; the raw channel is appended to the
  // embedding so downstream heads see the noise level unfolded.
  Matrix in(s_std.rows(), s_std.cols() + 1);
  in.leftCols(s_std.cols()) = s_std;
  for (Index i = 0; i < h.size(); ++i) {
    double hi = h[i];
    if (hi < cfg_.noise.h_min || hi > cfg_.noise.h_max) {
      ++counters().h_clamped;
      hi = std::clamp(hi, cfg_.noise.h_min, cfg_.noise.h_max);
    }
    in(i, s_std.cols()) = hi / cfg_.noise.h_max;
  }
  Tensor embedding = context_net_.forward(Tensor::constant(in), train);
  return concat_cols({embedding, Tensor::constant(Matrix(in.rightCols(1)))});
}

Tensor ConditionalFlow::log_prob_graph_standardized(const Matrix& s_next_std,
                                                    const Matrix& s_std, const Vector& h,
                                                    bool train) {
  if (s_next_std.rows() != s_std.rows() || h.size() != s_std.rows() ||
      s_next_std.cols() != cfg_.state_dim || s_std.cols() != cfg_.state_dim) {
    throw Error("log_prob: shape mismatch");
  }
  Tensor ctx = context_graph(s_std, h, train);
  Tensor z = Tensor::constant(s_next_std);
  Tensor log_det;
  for (auto& layer : layers_) {
    auto res = layer.forward_graph(z, ctx, train, cfg_.tail_bound);
    z = res.y;
    log_det = log_det.defined() ? add(log_det, res.log_det) : res.log_det;
  }
  Tensor base = base_head_.forward(ctx, train);
  Tensor mu = slice_cols(base, 0, cfg_.state_dim);
  Tensor log_scale = clamp(slice_cols(base, cfg_.state_dim, cfg_.state_dim),
                           -kLogScaleClamp, kLogScaleClamp);
  Tensor u = mul(sub(z, mu), exp(neg(log_scale)));
  Tensor base_lp = rowsum(-0.5 * square(u) - log_scale - 0.5 * kLogTwoPi);
  return add(base_lp, log_det);
}

Vector ConditionalFlow::log_prob_standardized(const Matrix& s_next, const Matrix& s,
                                              const Vector& h) {
  NoGradGuard guard;
  Matrix sn = (s_next.rowwise() - norm_mean_).array().rowwise() / norm_std_.array();
  Matrix ss = (s.rowwise() - norm_mean_).array().rowwise() / norm_std_.array();
  return log_prob_graph_standardized(sn, ss, h, false).value();
}

double ConditionalFlow::log_prob_standardized(const RowVector& s_next, const RowVector& s,
                                              double h) {
  return log_prob_standardized(Matrix(s_next), Matrix(s), Vector::Constant(1, h))[0];
}

Vector ConditionalFlow::log_prob(const Matrix& s_next, const Matrix& s, const Vector& h) {
  double log_volume = norm_std_.array().log().sum();
  return log_prob_standardized(s_next, s, h).array() - log_volume;
}

double ConditionalFlow::log_prob(const RowVector& s_next, const RowVector& s, double h) {
  return log_prob(Matrix(s_next), Matrix(s), Vector::Constant(1, h))[0];
}

ConditionalFlow::TransformResult ConditionalFlow::to_latent_standardized(
    const Matrix& x_std, const Matrix& s_std, const Vector& h) {
  NoGradGuard guard;
  Tensor ctx = context_graph(s_std, h, false);
  Tensor z = Tensor::constant(x_std);
  Tensor log_det;
  for (auto& layer : layers_) {
    auto res = layer.forward_graph(z, ctx, false, cfg_.tail_bound);
    z = res.y;
    log_det = log_det.defined() ? add(log_det, res.log_det) : res.log_det;
  }
  return {z.value(), Vector(log_det.value().col(0))};
}

Matrix ConditionalFlow::from_latent_standardized(const Matrix& z, const Matrix& s_std,
                                                 const Vector& h) {
  NoGradGuard guard;
  Matrix ctx = context_graph(s_std, h, false).value();
  Matrix x = z;
  for (auto it = layers_.rbegin(); it != layers_.rend(); ++it) {
    x = it->inverse_values(x, ctx, cfg_.tail_bound);
  }
  return x;
}

Vector ConditionalFlow::base_log_prob_standardized(const Matrix& z, const Matrix& s_std,
                                                   const Vector& h) {
  NoGradGuard guard;
  Tensor ctx = context_graph(s_std, h, false);
  Matrix base = base_head_.forward(ctx, false).value();
  Vector out(z.rows());
  for (Index i = 0; i < z.rows(); ++i) {
    double lp = 0.0;
    for (int j = 0; j < cfg_.state_dim; ++j) {
      double log_scale = std::clamp(base(i, cfg_.state_dim + j), -kLogScaleClamp, kLogScaleClamp);
      double u = (z(i, j) - base(i, j)) * std::exp(-log_scale);
      lp += -0.5 * u * u - log_scale - 0.5 * kLogTwoPi;
    }
    out[i] = lp;
  }
  return out;
}

Matrix ConditionalFlow::sample(const RowVector& s, double h, int n, Rng& rng) {
  NoGradGuard guard;
  Matrix s_std = ((s - norm_mean_).array() / norm_std_.array()).matrix().replicate(n, 1);
  Matrix ctx = context_graph(s_std, Vector::Constant(n, h), false).value();
  Matrix base = base_head_.forward(Tensor::constant(ctx), false).value();
  Matrix z(n, cfg_.state_dim);
  for (Index i = 0; i < n; ++i) {
    for (int j = 0; j < cfg_.state_dim; ++j) {
      double log_scale = std::clamp(base(i, cfg_.state_dim + j), -kLogScaleClamp, kLogScaleClamp);
      z(i, j) = base(i, j) + std::exp(log_scale) * rng.normal();
    }
  }
  for (auto it = layers_.rbegin(); it != layers_.rend(); ++it) {
    z = it->inverse_values(z, ctx, cfg_.tail_bound);
  }
  return ((z.array().rowwise() * norm_std_.array()).rowwise() + norm_mean_.array()).matrix();
}

std::vector<Tensor> ConditionalFlow::parameters() const {
  std::vector<Tensor> out = context_net_.parameters();
  for (const Tensor& t : base_head_.parameters()) out.push_back(t);
  for (const auto& layer : layers_) {
    for (const Tensor& t : layer.parameters()) out.push_back(t);
  }
  return out;
}

std::vector<std::pair<std::string, Matrix*>> ConditionalFlow::state() {
  std::vector<std::pair<std::string, Matrix*>> out;
  context_net_.collect_state(out);
  base_head_.collect_state(out);
  for (auto& layer : layers_) layer.collect_state(out);
  return out;
}

void ConditionalFlow::save(const std::string& checkpoint_path, const std::string& sidecar_path) {
  save_checkpoint(checkpoint_path, state());
  json sidecar{{"state_dim", cfg_.state_dim},
               {"layers", cfg_.num_layers},
               {"bins", cfg_.bins},
               {"tail_bound", cfg_.tail_bound},
               {"hidden", cfg_.hidden},
               {"context_hidden", cfg_.context_hidden},
               {"context_dim", cfg_.context_dim},
               {"omega0", cfg_.omega0},
               {"spectral_norm", cfg_.spectral_norm},
               {"h_min", cfg_.noise.h_min},
               {"h_max", cfg_.noise.h_max},
               {"noise_family", to_string(cfg_.noise.family)},
               {"standardization_mean",
                std::vector<double>(norm_mean_.begin(), norm_mean_.end())},
               {"standardization_std",
                std::vector<double>(norm_std_.begin(), norm_std_.end())}};
  std::ofstream out(sidecar_path, std::ios::trunc);
  if (!out) throw Error("flow save: cannot open '" + sidecar_path + "'");
  out << sidecar.dump(2) << '\n';
}

ConditionalFlow ConditionalFlow::load(const std::string& checkpoint_path,
                                      const std::string& sidecar_path) {
  std::ifstream in(sidecar_path);
  if (!in) throw Error("flow load: cannot open '" + sidecar_path + "'");
  json sidecar = json::parse(in);
  FlowConfig cfg;
  cfg.state_dim = sidecar.at("state_dim").get<int>();
  cfg.num_layers = sidecar.at("layers").get<int>();
  cfg.bins = sidecar.at("bins").get<int>();
  cfg.tail_bound = sidecar.at("tail_bound").get<double>();
  cfg.hidden = sidecar.at("hidden").get<std::vector<int>>();
  cfg.context_hidden = sidecar.at("context_hidden").get<std::vector<int>>();
  cfg.context_dim = sidecar.at("context_dim").get<int>();
  cfg.omega0 = sidecar.at("omega0").get<double>();
  cfg.spectral_norm = sidecar.at("spectral_norm").get<bool>();
  cfg.noise.h_min = sidecar.at("h_min").get<double>();
  cfg.noise.h_max = sidecar.at("h_max").get<double>();
  cfg.noise.family = noise_family_from_string(sidecar.at("noise_family").get<std::string>());
  ConditionalFlow model(cfg, 0);
  load_checkpoint_into(checkpoint_path, model.state());
  auto mean = sidecar.at("standardization_mean").get<std::vector<double>>();
  auto std = sidecar.at("standardization_std").get<std::vector<double>>();
  model.set_standardization(
      Eigen::Map<const RowVector>(mean.data(), static_cast<Index>(mean.size())),
      Eigen::Map<const RowVector>(std.data(), static_cast<Index>(std.size())));
  return model;
}

namespace {
struct NoisedBatch {
  Matrix s, s_next;
  Vector h;
};

NoisedBatch make_noised(const Matrix& s_std, const Matrix& s_next_std,
                        const std::vector<Index>& rows, const NoiseConfig& noise, Rng& rng) {
  NoisedBatch out;
  Index n = static_cast<Index>(rows.size());
  Index d = s_std.cols();
  out.s.resize(n, d);
  out.s_next.resize(n, d);
  out.h.resize(n);
  for (Index i = 0; i < n; ++i) {
    double h = noise.sample_level(rng);
    out.h[i] = h;
    for (Index j = 0; j < d; ++j) {
      out.s(i, j) = s_std(rows[static_cast<std::size_t>(i)], j) + h * noise.sample_unit(rng);
      out.s_next(i, j) =
          s_next_std(rows[static_cast<std::size_t>(i)], j) + h * noise.sample_unit(rng);
    }
  }
  return out;
}
}  // namespace

FlowTrainResult train_flow(const TransitionDataset& dataset, const FlowConfig& cfg_in,
                           const FlowTrainOptions& opts) {
  const Index n = dataset.size();
  if (n == 0) throw Error("train_flow: empty dataset");
  FlowConfig cfg = cfg_in;
  cfg.state_dim = static_cast<int>(dataset.s.cols());
  cfg.noise.validate();

  // Per-dimension statistics pooled over both sides of the pairs.
  Matrix pooled(2 * n, cfg.state_dim);
  pooled.topRows(n) = dataset.s;
  pooled.bottomRows(n) = dataset.s_next;
  RowVector data_mean = pooled.colwise().mean();
  RowVector data_var = (pooled.rowwise() - data_mean).array().square().colwise().mean();
  RowVector data_std = data_var.array().sqrt().max(kStdFloor);

  ConditionalFlow model(cfg, opts.seed);
  model.set_standardization(data_mean, data_std);

  Matrix s_std = (dataset.s.rowwise() - data_mean).array().rowwise() / data_std.array();
  Matrix s_next_std = (dataset.s_next.rowwise() - data_mean).array().rowwise() / data_std.array();

  Rng split_rng(Rng::splitmix64(opts.seed ^ 0x5b117ULL));
  std::vector<Index> order(static_cast<std::size_t>(n));
  std::iota(order.begin(), order.end(), Index{0});
  std::shuffle(order.begin(), order.end(), split_rng.engine());
  Index n_val = std::max<Index>(1, static_cast<Index>(std::llround(
                                       static_cast<double>(n) * opts.validation_fraction)));
  if (n_val >= n) n_val = n > 1 ? n - 1 : 0;
  std::vector<Index> train_rows(order.begin(), order.end() - n_val);
  std::vector<Index> val_rows(order.end() - n_val, order.end());

  // Validation noise is drawn once so per-epoch NLLs are comparable.
  Rng val_rng(Rng::splitmix64(opts.seed ^ 0x7a17ULL));
  NoisedBatch val = n_val > 0 ? make_noised(s_std, s_next_std, val_rows, cfg.noise, val_rng)
                              : NoisedBatch{};

  Optimizer optimizer(
      {OptimizerKind::AdamW, opts.learning_rate, 0.9, 0.999, 1e-8, opts.weight_decay},
      model.parameters());

  auto eval_val = [&]() {
    if (n_val == 0) return 0.0;
    NoGradGuard guard;
    return -model.log_prob_graph_standardized(val.s_next, val.s, val.h, false).value().mean();
  };

  FlowTrainResult result;
  Rng epoch_rng(Rng::splitmix64(opts.seed ^ 0xe90c4ULL));
  Rng noise_rng(Rng::splitmix64(opts.seed ^ 0x9015eULL));
  double best_val = std::numeric_limits<double>::infinity();
  std::vector<Matrix> best_state;
  auto state_ptrs = model.state();

  for (int epoch = 1; epoch <= opts.epochs; ++epoch) {
    std::shuffle(train_rows.begin(), train_rows.end(), epoch_rng.engine());
    double train_nll = 0.0;
    Index seen = 0;
    for (std::size_t at = 0; at < train_rows.size(); at += opts.batch_size) {
      std::size_t end = std::min(at + static_cast<std::size_t>(opts.batch_size),
                                 train_rows.size());
      std::vector<Index> rows(train_rows.begin() + at, train_rows.begin() + end);
      NoisedBatch batch = make_noised(s_std, s_next_std, rows, cfg.noise, noise_rng);
      Tensor lp = model.log_prob_graph_standardized(batch.s_next, batch.s, batch.h, true);
      Tensor loss = neg(mean(lp));
      double loss_v = loss.scalar();
      if (!std::isfinite(loss_v)) {
        throw Error("train_flow: non-finite loss at epoch " + std::to_string(epoch) +
                    ", batch " + std::to_string(at / opts.batch_size));
      }
      optimizer.zero_grad();
      backward(loss);
      optimizer.step();
      train_nll += loss_v * static_cast<double>(rows.size());
      seen += static_cast<Index>(rows.size());
    }
    train_nll /= std::max<Index>(1, seen);
    double val_nll = eval_val();
    result.loss_log.push_back({static_cast<double>(epoch), train_nll, val_nll});
    if (n_val == 0 || val_nll < best_val) {
      best_val = val_nll;
      result.best_epoch = epoch;
      best_state.clear();
      for (auto& [name, m] : state_ptrs) best_state.push_back(*m);
    }
  }
  if (!best_state.empty()) {
    for (std::size_t i = 0; i < state_ptrs.size(); ++i) *state_ptrs[i].second = best_state[i];
  }
  result.best_val_nll = best_val;
  result.model = std::move(model);
  return result;
}

void write_loss_log_csv(const std::string& path,
                        const std::vector<std::array<double, 3>>& rows) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw Error("write_loss_log_csv: cannot open '" + path + "'");
  out << "epoch,train_nll,val_nll\n";
  for (const auto& row : rows) {
    out << static_cast<long>(row[0]) << ',' << row[1] << ',' << row[2] << '\n';
  }
}

}  // namespace ilflow
