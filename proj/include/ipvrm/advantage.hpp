#ifndef IPVRM_ADVANTAGE_HPP_
#define IPVRM_ADVANTAGE_HPP_

// Advantage estimators over implicit prefix values: one-step TD, Monte Carlo,
// GAE, the minibatch and prompt-group normalizations, and the combined
// outcome + GAE token advantage.
//
// Time indices follow PrefixValueSeries: token t (1-based) moves the value
// from values[t - 1] to values[t].

#include <span>
#include <vector>

#include "ipvrm/autodiff.hpp"
#include "ipvrm/implicit_reward.hpp"
#include "ipvrm/policy.hpp"

namespace ipvrm::advantage {

inline constexpr double kEps = 1e-8;

// r_t + V(s_t) - V(s_{t-1}) with r_t = terminal_reward at t = T, else 0.
double td_advantage(const reward::PrefixValueSeries& series, int t, int terminal_reward);

// beta * (log pi_rm(c|s) - log pi_old(c|s)) for each candidate c, from one
// logits evaluation per model.
std::vector<double> candidate_td(const policy::PolicySnapshot& rm, const policy::PolicySnapshot& old,
                                 const env::EnvState& state, std::span<const int> candidates,
                                 double beta);

// r_o - V(s_{t-1}).
double mc_advantage(const reward::PrefixValueSeries& series, int t, int outcome);

// A_t = sum_{i >= t} (gamma * lambda)^{i - t} delta_i, by a backward pass.
std::vector<double> gae(std::span<const double> deltas, double gamma, double lambda);

struct MomentStats {
  double mean = 0.0;
  double std = 0.0;  // population
  double inv_scale() const { return 1.0 / (std + kEps); }
};

struct NormalizedValues {
  std::vector<double> values;
  MomentStats stats;
};

// (V - mu_V) / (sigma_V + eps) over every prefix value in the update.
NormalizedValues minibatch_normalize_values(std::span<const double> values);
// Graph form: the statistics enter through stop_gradient.
ad::Var minibatch_normalize_values(ad::Var values);

// (delta - mu_TD(x)) / (sigma_TD(x) + eps) with moments over every
// (rollout, timestep) pair of one prompt.
std::vector<std::vector<double>> prompt_group_normalize(const std::vector<std::vector<double>>& deltas,
                                                        MomentStats* stats = nullptr);

struct OutcomeStats {
  double mu = 0.0;
  double s = 0.0;
};

// Population mean and standard deviation (divide by n).
OutcomeStats group_outcome_stats(std::span<const int> outcomes);

// (r_o - mu) / s + gae_value; the outcome term is 0 when s = 0.
double combined_token_advantage(int outcome, const OutcomeStats& stats, double gae_value);

struct AdvantageOptions {
  double gamma = 1.0;
  double lambda = 1.0;
  bool value_norm = true;  // scale deltas by 1 / (sigma_V + eps)
  bool group_norm = true;  // then normalize per prompt group
  bool include_gae = true; // false gives outcome-only advantages
};

struct GroupAdvantages {
  OutcomeStats outcome;
  MomentStats td_stats;
  std::vector<std::vector<double>> td_raw;    // value increments, no terminal reward
  std::vector<std::vector<double>> td_hat;    // after both normalizations
  std::vector<std::vector<double>> gae;
  std::vector<std::vector<double>> combined;
};

struct AdvantageBatch {
  double gamma = 1.0;
  double lambda = 1.0;
  MomentStats value_stats;
  std::vector<GroupAdvantages> groups;
};

// series[g][k] and outcomes[g][k] describe rollout k of prompt group g. The
// terminal reward enters only through the group outcome term.
AdvantageBatch compute_advantages(const std::vector<std::vector<reward::PrefixValueSeries>>& series,
                                  const std::vector<std::vector<int>>& outcomes,
                                  const AdvantageOptions& opts);

}  // namespace ipvrm::advantage

#endif  // IPVRM_ADVANTAGE_HPP_
