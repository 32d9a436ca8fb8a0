#pragma once

#include <optional>
#include <string>
#include <vector>

#include "ilflow/core/random.hpp"
#include "ilflow/data/data.hpp"
#include "ilflow/envs/envs.hpp"
#include "ilflow/flow/flow.hpp"

namespace ilflow {

// Finite MDP used as an enumeration substrate for the trajectory-level
// identities. transition(s, a, s') rows sum to 1.
struct DiscreteMDP {
  int num_states = 0;
  int num_actions = 0;
  std::vector<Matrix> transition;  // [a](s, s')
  Vector initial;                  // p0
  int horizon = 1;

  void validate() const;
  static DiscreteMDP random(int num_states, int num_actions, int horizon, Rng& rng);
};

// Stationary tabular policy, rows = states, cols = actions, rows sum to 1.
using PolicyTable = Matrix;

// State-transition kernel with actions integrated out.
Matrix state_kernel(const DiscreteMDP& mdp, const PolicyTable& policy);

struct RklResult {
  double rkl = 0.0;           // enumerated D_KL(p_pi || p_E)
  double cross_term = 0.0;    // -E_pi[sum log p_E(s'|s)]
  double entropy_term = 0.0;  // -E_pi[sum log p_pi(s'|s)]
  bool infinite = false;      // expert lacks support somewhere the policy visits
};
// Full enumeration over state sequences; rkl must equal
// cross_term - entropy_term (checked by callers to 1e-12).
RklResult exact_rkl(const DiscreteMDP& mdp, const PolicyTable& policy,
                    const PolicyTable& expert);

struct EntropyDecomposition {
  double lhs = 0.0;  // sequence-level transition entropy (full enumeration)
  double rhs = 0.0;  // E[sum_t H(p_pi(.|s_t))] via visitation weights
  double abs_diff = 0.0;
};
EntropyDecomposition verify_entropy_decomposition(const DiscreteMDP& mdp,
                                                  const PolicyTable& policy);

struct ChangeOfVariablesResult {
  double state_entropy = 0.0;   // analytic entropy of the pushforward
  double action_entropy = 0.0;  // analytic Gaussian policy entropy
  double logdet_term = 0.0;     // env log-Jacobian
  double residual = 0.0;        // |analytic - Monte Carlo|
  double mc_standard_error = 0.0;
};
// Linear env + Gaussian policy: checks
// H(p_pi(.|s)) = H(pi(.|s)) + log|ds'/da| by comparing the analytic
// pushforward entropy against a Monte-Carlo estimate through the
// change-of-variables route.
ChangeOfVariablesResult verify_change_of_variables(const Env& env, double policy_mean,
                                                   double policy_std, int n_samples,
                                                   std::uint64_t seed);

// Spearman rank correlation (average ranks on ties).
double spearman(const std::vector<double>& x, const std::vector<double>& y);

struct CalibrationTrajectoryRecord {
  std::string kind;
  std::optional<double> noise_level;
  double ground_truth_return = 0.0;
  double log_prob_total = 0.0;
};

struct CalibrationStepRecord {
  std::string kind;
  double ground_truth_reward = 0.0;
  double log_prob = 0.0;
};

struct CalibrationReport {
  std::vector<CalibrationTrajectoryRecord> trajectories;
  std::vector<CalibrationStepRecord> steps;
  double spearman_trajectory_noisy = 0.0;  // over the noisy-expert set
  double spearman_step_noisy = 0.0;
  double expert_mean_log_prob = 0.0;   // trajectory-level means by kind
  double noisy_mean_log_prob = 0.0;
  double random_mean_log_prob = 0.0;
  // Fraction of random trajectories strictly below the lowest expert one.
  double expert_rank_vs_random = 0.0;
  double h_eval = 0.0;
};

struct CalibrationInputs {
  const std::vector<Trajectory>* expert = nullptr;
  const std::vector<Trajectory>* noisy_expert = nullptr;
  const std::vector<Trajectory>* random = nullptr;
};

CalibrationReport calibrate(ConditionalFlow& flow, const CalibrationInputs& datasets,
                            double h_eval);

void write_calibration_csvs(const CalibrationReport& report,
                            const std::string& trajectory_csv_path,
                            const std::string& step_csv_path,
                            const std::string& summary_json_path);

}  // namespace ilflow
