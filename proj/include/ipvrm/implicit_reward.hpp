#ifndef IPVRM_IMPLICIT_REWARD_HPP_
#define IPVRM_IMPLICIT_REWARD_HPP_

// Implicit rewards and values: beta-scaled log-ratios between a trainable
// model and a frozen reference, their prefix sums, and the reward-model
// objectives built on them.
//
// Indexing: values[j] is the cumulative value after j tokens, j = 0..T, with
// values[0] = 0. The length-normalized value is vbar(t) = values[t] / t.

#include <span>
#include <string>
#include <vector>

#include "ipvrm/autodiff.hpp"
#include "ipvrm/env.hpp"
#include "ipvrm/policy.hpp"

namespace ipvrm::reward {

enum class Weighting { kUniform, kLate, kEarly };

std::string to_string(Weighting w);
Weighting weighting_from_string(const std::string& name);

enum class RmMethod { kIpvrm, kIpvrmLate, kIpvrmEarly, kImplicitPrm, kDpo };

std::string to_string(RmMethod m);
RmMethod rm_method_from_string(const std::string& name);
bool is_ipvrm(RmMethod m);
Weighting weighting_of(RmMethod m);

// beta * (log pi_rm(token|state) - log pi_ref(token|state)).
double token_log_ratio(const policy::PolicySnapshot& rm, const policy::PolicySnapshot& ref,
                       const env::EnvState& state, int token, double beta);

struct PrefixValueSeries {
  std::vector<double> values;  // size T + 1, values[0] = 0
  double beta = 1.0;

  int horizon() const { return static_cast<int>(values.size()) - 1; }
  // Defined for 1 <= t <= T.
  double vbar(int t) const;
  // values[t] - values[t - 1], the token reward at t.
  double token_reward(int t) const;
};

PrefixValueSeries prefix_values(const policy::PolicySnapshot& rm, const policy::PolicySnapshot& ref,
                                const env::Trajectory& tr, double beta);
std::vector<PrefixValueSeries> prefix_values(const policy::PolicySnapshot& rm,
                                             const policy::PolicySnapshot& ref,
                                             std::span<const env::Trajectory> trs, double beta);

// Differentiable cumulative values V(s_1..s_T) for a batch of equal-length
// trajectories, shape N x T. The rm parameters are the tape's parameters;
// the reference enters as constants.
ad::Var prefix_values_graph(ad::Tape& tape, const policy::Architecture& rm_arch,
                            const policy::PolicySnapshot& ref,
                            std::span<const env::Trajectory> trs, double beta);

// Normalized per-step weights for t = 1..T.
std::vector<double> step_weights(int horizon, Weighting w);

// --- losses ------------------------------------------------------------------
//
// `values` is an N x T node of cumulative values (as produced by
// prefix_values_graph or built from constants); each loss is the mean of the
// per-trajectory losses.

ad::Var ipvrm_loss(ad::Var values, std::span<const int> labels, double margin, Weighting w);

// BCE of sigmoid(V(s_T)) against the label.
ad::Var implicit_prm_loss(ad::Var values, std::span<const int> labels);

// -log sigmoid(V_w(s_T) - V_l(s_T)) for aligned winner and loser batches.
ad::Var dpo_loss(ad::Var win_values, ad::Var lose_values);

struct GroupContext {
  int n = 0;
  double mu = 0.0;        // mean outcome
  double s = 0.0;         // population standard deviation
  double baseline = 0.0;  // logit of mu clamped to [1/(2n), 1 - 1/(2n)]
};

GroupContext make_group_context(std::span<const int> outcomes);

struct OnlineFlags {
  bool adb = true;  // shift the boundary by the prompt baseline
  bool dlw = true;  // weight by outcome rarity within the group
};

// Per-step terms use sigmoid(vbar - m + V(x)) for positives and
// sigmoid(vbar + m + V(x)) for negatives, averaged uniformly over t and
// scaled by w = 1 - mu (correct) or mu (incorrect).
ad::Var online_ipvrm_loss(ad::Var values, std::span<const int> labels, double margin,
                          std::span<const GroupContext> groups, OnlineFlags flags);

// --- convenience wrappers over one trajectory or pair --------------------------

ad::Var ipvrm_loss(ad::Tape& tape, const policy::PolicySnapshot& ref, const env::Trajectory& tr,
                   double beta, double margin, Weighting w, const policy::Architecture& rm_arch);
ad::Var dpo_loss(ad::Tape& tape, const policy::Architecture& rm_arch,
                 const policy::PolicySnapshot& ref, const env::Trajectory& winner,
                 const env::Trajectory& loser, double beta);

}  // namespace ipvrm::reward

#endif  // IPVRM_IMPLICIT_REWARD_HPP_
