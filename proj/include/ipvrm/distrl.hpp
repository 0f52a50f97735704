#ifndef IPVRM_DISTRL_HPP_
#define IPVRM_DISTRL_HPP_

// Distribution-level policy optimization: candidate sets, the token-level
// and candidate-level clipped surrogates, rollout collection with the
// mixed-outcome filter, and one full training iteration with the online
// reward-model refresh.

#include <functional>
#include <span>
#include <string>
#include <vector>

#include "ipvrm/advantage.hpp"
#include "ipvrm/autodiff.hpp"
#include "ipvrm/env.hpp"
#include "ipvrm/implicit_reward.hpp"
#include "ipvrm/policy.hpp"
#include "ipvrm/rng.hpp"

namespace ipvrm::distrl {

struct CandidateSet {
  std::vector<int> tokens;
  std::vector<double> probs;  // behavior probabilities
  double p_min = 0.1;
  bool forced = false;  // the sampled token fell below p_min

  int size() const { return static_cast<int>(tokens.size()); }
  double mass() const;
};

// Tokens with probability >= p_min, plus the sampled token unconditionally.
CandidateSet build_candidate_set(std::span<const double> behavior_probs, int sampled, double p_min);

enum class RlMethod { kDistRL, kGrpo, kGrpoWithRm };

std::string to_string(RlMethod m);
RlMethod rl_method_from_string(const std::string& name);

struct PpoConfig {
  double eps_low = 0.20;
  double eps_high = 0.28;
  double alpha = 0.1;
  double p_min = 0.1;
  int ppo_epochs = 1;
  int minibatches = 1;
  double lr = 1e-3;
  double gamma = 1.0;
  double lambda = 1.0;
  int n = 4;
  int oversample = 2;
  int batch_size = 32;
  double temperature = 1.0;
  bool greedy = false;
  bool mixed_only = true;
  int max_rounds = 8;

  // Every violated invariant, empty when valid.
  std::vector<std::string> violations() const;
};

struct OnlineRmConfig {
  reward::RmMethod method = reward::RmMethod::kIpvrm;
  reward::OnlineFlags flags;  // adb = dlw = false is the naive update
  bool frozen = false;
  double lr = 1e-3;
  double beta = 10.0;
  double margin = 5.0;
};

struct TrainConfig {
  RlMethod method = RlMethod::kDistRL;
  PpoConfig ppo;
  OnlineRmConfig rm;
};

// --- rollouts ------------------------------------------------------------------

struct RolloutGroup {
  env::Prompt prompt;
  std::vector<env::Trajectory> rollouts;
  advantage::OutcomeStats stats;
  reward::GroupContext context;

  std::vector<int> outcomes() const;
};

struct RolloutBatch {
  std::vector<RolloutGroup> groups;
  int sampled_prompts = 0;
  int rounds = 0;

  std::vector<env::Trajectory> trajectories() const;
};

using PromptSampler = std::function<env::Prompt(Rng&)>;

// Samples oversample * batch_size prompts per round with n rollouts each and
// keeps the first batch_size groups with mixed outcomes (all groups when
// mixed_only is off). Throws CollectionError after max_rounds short rounds.
RolloutBatch collect_batch(const policy::PolicySnapshot& behavior, const PromptSampler& sampler,
                           const PpoConfig& config, Rng& rng, int workers = 1);

// --- surrogate losses ----------------------------------------------------------

// Per-token inputs to the surrogates; all entries are constants w.r.t. the
// student.
struct PolicyBatch {
  std::vector<env::EnvState> states;
  std::vector<int> tokens;
  std::vector<double> old_logprob;
  std::vector<double> token_weight;  // 1 / (T * number of trajectories)
  std::vector<double> advantage;     // for the token-level branch

  // Candidate entries, flattened over states.
  std::vector<int> cand_row;
  std::vector<int> cand_token;
  std::vector<double> cand_old_prob;
  std::vector<double> cand_old_logprob;
  std::vector<double> cand_adv;
  std::vector<CandidateSet> candidates;  // one per state
};

// Builds the per-token batch for a set of trajectories. `advantages` is
// per trajectory and per token. Candidate advantages are
// beta * (log pi_rm - log pi_old) * td_scale, detached.
PolicyBatch make_policy_batch(const policy::PolicySnapshot& behavior,
                              const policy::PolicySnapshot& rm,
                              std::span<const env::Trajectory> trajectories,
                              const std::vector<std::vector<double>>& advantages, double beta,
                              double td_scale, double p_min);

// Row-wise student log-probs at batch.states, computed once and shared by
// both branches.
ad::Var student_log_probs(ad::Tape& tape, const policy::Architecture& arch, const PolicyBatch& batch);

// -mean over trajectories of (1/T) sum_t min(rho A, clip(rho) A) over sampled tokens.
ad::Var tok_ppo_loss(ad::Var student_logp, const PolicyBatch& batch, const PpoConfig& config);
// Same outer average over candidates weighted by their behavior probability.
ad::Var dist_ppo_loss(ad::Var student_logp, const PolicyBatch& batch, const PpoConfig& config);
// tok + alpha * dist.
ad::Var distrl_loss(ad::Var student_logp, const PolicyBatch& batch, const PpoConfig& config);

// Convenience forms that build the student graph on the tape.
ad::Var tok_ppo_loss(ad::Tape& tape, const policy::Architecture& arch, const PolicyBatch& batch,
                     const PpoConfig& config);
ad::Var dist_ppo_loss(ad::Tape& tape, const policy::Architecture& arch, const PolicyBatch& batch,
                      const PpoConfig& config);
ad::Var distrl_loss(ad::Tape& tape, const policy::Architecture& arch, const PolicyBatch& batch,
                    const PpoConfig& config);
// Token-level surrogate on a batch whose advantages are outcome-only.
ad::Var grpo_baseline_loss(ad::Tape& tape, const policy::Architecture& arch,
                           const PolicyBatch& batch, const PpoConfig& config);

// --- training ------------------------------------------------------------------

struct TrainState {
  policy::Architecture arch;
  ad::ParamVector student;
  ad::ParamVector rm;
  int iteration = 0;
};

struct IterationMetrics {
  int iter = 0;
  double verifier_acc = 0.0;
  double rm_score = 0.0;
  double tok_loss = 0.0;
  double dist_loss = 0.0;
  double rm_loss = 0.0;
  double cand_avg_size = 0.0;
  double cand_mass = 0.0;
  double wall_ms = 0.0;
  bool aborted = false;
  std::string abort_reason;
};

std::string to_json_line(const IterationMetrics& m);

// One iteration: snapshot the behavior policy, collect, score with the RM
// against the behavior reference, compute advantages, take the policy steps,
// then refresh the RM on the same rollouts. `sft_ref` is the reference for
// the reported RM score. On a non-finite loss both models are restored and
// the metrics are flagged as aborted.
IterationMetrics train_iteration(TrainState& state, const policy::PolicySnapshot& sft_ref,
                                 const PromptSampler& sampler, const TrainConfig& config, Rng& rng,
                                 int workers = 1);

}  // namespace ipvrm::distrl

#endif  // IPVRM_DISTRL_HPP_
