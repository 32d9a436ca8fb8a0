#include "ilflow/analysis/analysis.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <functional>
#include <limits>
#include <numeric>

#include <json.hpp>

namespace ilflow {

using nlohmann::json;

namespace {
constexpr double kPi = 3.14159265358979323846;
constexpr double kEuler = 2.71828182845904523536;
}  // namespace

void DiscreteMDP::validate() const {
  if (num_states < 1 || num_actions < 1 || horizon < 1) {
    throw Error("DiscreteMDP: empty state/action set or horizon");
  }
  if (static_cast<int>(transition.size()) != num_actions) {
    throw Error("DiscreteMDP: transition tensor has wrong action count");
  }
  for (const Matrix& m : transition) {
    if (m.rows() != num_states || m.cols() != num_states) {
      throw Error("DiscreteMDP: transition matrix shape mismatch");
    }
    for (Index s = 0; s < num_states; ++s) {
      if (std::abs(m.row(s).sum() - 1.0) > 1e-9) {
        throw Error("DiscreteMDP: transition row does not sum to 1");
      }
    }
  }
  if (initial.size() != num_states || std::abs(initial.sum() - 1.0) > 1e-9) {
    throw Error("DiscreteMDP: initial distribution does not sum to 1");
  }
}

DiscreteMDP DiscreteMDP::random(int num_states, int num_actions, int horizon, Rng& rng) {
  DiscreteMDP mdp;
  mdp.num_states = num_states;
  mdp.num_actions = num_actions;
  mdp.horizon = horizon;
  auto random_simplex = [&rng](Index n) {
    Vector v(n);
    for (Index i = 0; i < n; ++i) v[i] = -std::log(rng.uniform(1e-12, 1.0));
    return Vector(v / v.sum());
  };
  for (int a = 0; a < num_actions; ++a) {
    Matrix m(num_states, num_states);
    for (int s = 0; s < num_states; ++s) m.row(s) = random_simplex(num_states).transpose();
    mdp.transition.push_back(std::move(m));
  }
  mdp.initial = random_simplex(num_states);
  return mdp;
}

Matrix state_kernel(const DiscreteMDP& mdp, const PolicyTable& policy) {
  if (policy.rows() != mdp.num_states || policy.cols() != mdp.num_actions) {
    throw Error("state_kernel: policy table shape mismatch");
  }
  Matrix k = Matrix::Zero(mdp.num_states, mdp.num_states);
  for (int a = 0; a < mdp.num_actions; ++a) {
    k += policy.col(a).asDiagonal() * mdp.transition[a];
  }
  return k;
}

namespace {

// Calls fn(sequence, probability) for every positive-probability state
// sequence s_0..s_T under the kernel.
template <typename Fn>
void enumerate_sequences(const DiscreteMDP& mdp, const Matrix& kernel, const Fn& fn) {
  double sequences = std::pow(static_cast<double>(mdp.num_states), mdp.horizon + 1);
  if (sequences > 1e6) throw Error("enumeration: more than 1e6 state sequences");
  std::vector<int> seq(mdp.horizon + 1, 0);
  std::vector<double> prefix(mdp.horizon + 2, 1.0);

  std::function<void(int)> rec = [&](int t) {
    if (t == mdp.horizon + 1) {
      fn(seq, prefix[t]);
      return;
    }
    for (int s = 0; s < mdp.num_states; ++s) {
      double p = t == 0 ? mdp.initial[s] : kernel(seq[t - 1], s);
      if (p <= 0.0) continue;
      seq[t] = s;
      prefix[t + 1] = prefix[t] * p;
      rec(t + 1);
    }
  };
  rec(0);
}

}  // namespace

RklResult exact_rkl(const DiscreteMDP& mdp, const PolicyTable& policy,
                    const PolicyTable& expert) {
  mdp.validate();
  Matrix k_pi = state_kernel(mdp, policy);
  Matrix k_e = state_kernel(mdp, expert);
  RklResult res;
  enumerate_sequences(mdp, k_pi, [&](const std::vector<int>& seq, double p) {
    double log_pi = 0.0, log_e = 0.0;
    for (int t = 0; t < mdp.horizon; ++t) {
      double pe = k_e(seq[t], seq[t + 1]);
      if (pe <= 0.0) {
        res.infinite = true;
        return;
      }
      log_pi += std::log(k_pi(seq[t], seq[t + 1]));
      log_e += std::log(pe);
    }
    res.cross_term -= p * log_e;
    res.entropy_term -= p * log_pi;
    res.rkl += p * (log_pi - log_e);
  });
  if (res.infinite) {
    res.rkl = std::numeric_limits<double>::infinity();
    res.cross_term = std::numeric_limits<double>::infinity();
  }
  return res;
}

EntropyDecomposition verify_entropy_decomposition(const DiscreteMDP& mdp,
                                                  const PolicyTable& policy) {
  mdp.validate();
  Matrix kernel = state_kernel(mdp, policy);
  EntropyDecomposition res;

  // lhs: entropy of the full sequence distribution minus the initial-state
  // entropy, i.e. the transition part -E[sum log p(s'|s)].
  double h_seq = 0.0;
  enumerate_sequences(mdp, kernel, [&](const std::vector<int>&, double p) {
    h_seq -= p * std::log(p);
  });
  double h0 = 0.0;
  for (Index s = 0; s < mdp.num_states; ++s) {
    if (mdp.initial[s] > 0.0) h0 -= mdp.initial[s] * std::log(mdp.initial[s]);
  }
  res.lhs = h_seq - h0;

  // rhs: visitation-weighted per-state conditional entropies.
  Vector marginal = mdp.initial;
  for (int t = 0; t < mdp.horizon; ++t) {
    for (Index s = 0; s < mdp.num_states; ++s) {
      if (marginal[s] <= 0.0) continue;
      double h = 0.0;
      for (Index s2 = 0; s2 < mdp.num_states; ++s2) {
        double p = kernel(s, s2);
        if (p > 0.0) h -= p * std::log(p);
      }
      res.rhs += marginal[s] * h;
    }
    marginal = (marginal.transpose() * kernel).transpose();
  }
  res.abs_diff = std::abs(res.lhs - res.rhs);
  return res;
}

ChangeOfVariablesResult verify_change_of_variables(const Env& env, double policy_mean,
                                                   double policy_std, int n_samples,
                                                   std::uint64_t seed) {
  const EnvSpec& spec = env.spec();
  const int m = spec.action_dim;
  Rng rng(seed);
  Vector s0 = env.reset(rng);
  Vector mean_action = Vector::Constant(m, policy_mean);

  ChangeOfVariablesResult res;
  res.logdet_term = env.log_jacobian(s0, mean_action);
  res.action_entropy = 0.5 * m * std::log(2.0 * kPi * kEuler * policy_std * policy_std);
  // Linear dynamics push the Gaussian policy to a Gaussian over the
  // action-affected state coordinates; its entropy gains exactly the
  // log-Jacobian.
  res.state_entropy = res.action_entropy + res.logdet_term;

  // Monte-Carlo route: -E[log pi(a)] + log|ds'/da| over policy samples.
  double sum = 0.0, sum_sq = 0.0;
  for (int i = 0; i < n_samples; ++i) {
    double neg_log_pi = 0.0;
    for (int j = 0; j < m; ++j) {
      double eps = rng.normal();
      neg_log_pi += 0.5 * eps * eps + std::log(policy_std) + 0.5 * std::log(2.0 * kPi);
    }
    sum += neg_log_pi;
    sum_sq += neg_log_pi * neg_log_pi;
  }
  double mc_action_entropy = sum / n_samples;
  double var = std::max(0.0, sum_sq / n_samples - mc_action_entropy * mc_action_entropy);
  res.mc_standard_error = std::sqrt(var / n_samples);
  double mc_state_entropy = mc_action_entropy + res.logdet_term;
  res.residual = std::abs(res.state_entropy - mc_state_entropy);
  return res;
}

double spearman(const std::vector<double>& x, const std::vector<double>& y) {
  if (x.size() != y.size() || x.size() < 2) throw Error("spearman: need matched pairs");
  auto ranks = [](const std::vector<double>& v) {
    std::vector<std::size_t> order(v.size());
    std::iota(order.begin(), order.end(), 0);
    std::sort(order.begin(), order.end(),
              [&v](std::size_t a, std::size_t b) { return v[a] < v[b]; });
    std::vector<double> r(v.size());
    std::size_t i = 0;
    while (i < order.size()) {
      std::size_t j = i;
      while (j + 1 < order.size() && v[order[j + 1]] == v[order[i]]) ++j;
      double avg = 0.5 * static_cast<double>(i + j) + 1.0;
      for (std::size_t k = i; k <= j; ++k) r[order[k]] = avg;
      i = j + 1;
    }
    return r;
  };
  std::vector<double> rx = ranks(x), ry = ranks(y);
  double mx = std::accumulate(rx.begin(), rx.end(), 0.0) / rx.size();
  double my = std::accumulate(ry.begin(), ry.end(), 0.0) / ry.size();
  double cov = 0.0, vx = 0.0, vy = 0.0;
  for (std::size_t i = 0; i < rx.size(); ++i) {
    cov += (rx[i] - mx) * (ry[i] - my);
    vx += (rx[i] - mx) * (rx[i] - mx);
    vy += (ry[i] - my) * (ry[i] - my);
  }
  if (vx == 0.0 || vy == 0.0) return 0.0;
  return cov / std::sqrt(vx * vy);
}

namespace {
void add_dataset(ConditionalFlow& flow, const std::vector<Trajectory>& trajs,
                 const std::string& kind, double h_eval, CalibrationReport& report) {
  for (const Trajectory& traj : trajs) {
    int t_count = traj.length();
    Matrix s = traj.states.topRows(t_count);
    Matrix s_next = traj.states.bottomRows(t_count);
    Vector lp = flow.log_prob_standardized(s_next, s, Vector::Constant(t_count, h_eval));
    CalibrationTrajectoryRecord rec;
    rec.kind = kind;
    rec.noise_level = traj.noise_level;
    rec.ground_truth_return = traj.total_return();
    rec.log_prob_total = lp.sum();
    report.trajectories.push_back(rec);
    for (int t = 0; t < t_count; ++t) {
      report.steps.push_back({kind, traj.rewards[t], lp[t]});
    }
  }
}

double mean_log_prob(const CalibrationReport& report, const std::string& kind) {
  double sum = 0.0;
  long n = 0;
  for (const auto& rec : report.trajectories) {
    if (rec.kind == kind) {
      sum += rec.log_prob_total;
      ++n;
    }
  }
  return n > 0 ? sum / n : 0.0;
}
}  // namespace

CalibrationReport calibrate(ConditionalFlow& flow, const CalibrationInputs& datasets,
                            double h_eval) {
  CalibrationReport report;
  report.h_eval = h_eval;
  if (datasets.expert) add_dataset(flow, *datasets.expert, "expert", h_eval, report);
  if (datasets.noisy_expert) {
    add_dataset(flow, *datasets.noisy_expert, "noisy_expert", h_eval, report);
  }
  if (datasets.random) add_dataset(flow, *datasets.random, "random", h_eval, report);

  std::vector<double> noisy_ret, noisy_lp, step_ret, step_lp;
  for (const auto& rec : report.trajectories) {
    if (rec.kind == "noisy_expert") {
      noisy_ret.push_back(rec.ground_truth_return);
      noisy_lp.push_back(rec.log_prob_total);
    }
  }
  for (const auto& rec : report.steps) {
    if (rec.kind == "noisy_expert") {
      step_ret.push_back(rec.ground_truth_reward);
      step_lp.push_back(rec.log_prob);
    }
  }
  if (noisy_ret.size() >= 2) report.spearman_trajectory_noisy = spearman(noisy_ret, noisy_lp);
  if (step_ret.size() >= 2) report.spearman_step_noisy = spearman(step_ret, step_lp);
  report.expert_mean_log_prob = mean_log_prob(report, "expert");
  report.noisy_mean_log_prob = mean_log_prob(report, "noisy_expert");
  report.random_mean_log_prob = mean_log_prob(report, "random");

  double expert_min = std::numeric_limits<double>::infinity();
  std::vector<double> random_lp;
  for (const auto& rec : report.trajectories) {
    if (rec.kind == "expert") expert_min = std::min(expert_min, rec.log_prob_total);
    if (rec.kind == "random") random_lp.push_back(rec.log_prob_total);
  }
  if (!random_lp.empty() && std::isfinite(expert_min)) {
    long below = std::count_if(random_lp.begin(), random_lp.end(),
                               [expert_min](double v) { return v < expert_min; });
    report.expert_rank_vs_random = static_cast<double>(below) / random_lp.size();
  }
  return report;
}

void write_calibration_csvs(const CalibrationReport& report,
                            const std::string& trajectory_csv_path,
                            const std::string& step_csv_path,
                            const std::string& summary_json_path) {
  {
    std::ofstream out(trajectory_csv_path, std::ios::trunc);
    if (!out) throw Error("calibrate: cannot open '" + trajectory_csv_path + "'");
    out << "kind,noise_level,ground_truth_return,log_prob_total\n";
    for (const auto& rec : report.trajectories) {
      out << rec.kind << ',';
      if (rec.noise_level) out << *rec.noise_level;
      out << ',' << rec.ground_truth_return << ',' << rec.log_prob_total << '\n';
    }
  }
  {
    std::ofstream out(step_csv_path, std::ios::trunc);
    if (!out) throw Error("calibrate: cannot open '" + step_csv_path + "'");
    out << "kind,ground_truth_reward,log_prob\n";
    for (const auto& rec : report.steps) {
      out << rec.kind << ',' << rec.ground_truth_reward << ',' << rec.log_prob << '\n';
    }
  }
  json summary{{"h_eval", report.h_eval},
               {"spearman_trajectory_noisy", report.spearman_trajectory_noisy},
               {"spearman_step_noisy", report.spearman_step_noisy},
               {"expert_mean_log_prob", report.expert_mean_log_prob},
               {"noisy_mean_log_prob", report.noisy_mean_log_prob},
               {"random_mean_log_prob", report.random_mean_log_prob},
               {"expert_rank_vs_random", report.expert_rank_vs_random},
               {"trajectory_count", report.trajectories.size()},
               {"step_count", report.steps.size()}};
  std::ofstream out(summary_json_path, std::ios::trunc);
  if (!out) throw Error("calibrate: cannot open '" + summary_json_path + "'");
  out << summary.dump(2) << '\n';
}

}  // namespace ilflow
