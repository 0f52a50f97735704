#ifndef IPVRM_EVAL_HPP_
#define IPVRM_EVAL_HPP_

// Evaluation procedures over frozen snapshots: best-of-N reranking, step
// scoring and first-error localization, the per-step RM score, candidate-set
// statistics and TD fidelity.

#include <functional>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "ipvrm/env.hpp"
#include "ipvrm/policy.hpp"
#include "ipvrm/rng.hpp"

namespace ipvrm::eval {

// --- best-of-N -----------------------------------------------------------------

enum class BonScore { kVbar, kTotal };  // vbar(T) or V(s_T)

std::string to_string(BonScore s);
BonScore bon_score_from_string(const std::string& name);

// Returns one score per candidate.
using Scorer = std::function<std::vector<double>(std::span<const env::Trajectory>)>;

Scorer rm_scorer(const policy::PolicySnapshot& rm, const policy::PolicySnapshot& ref, double beta,
                 BonScore score);

struct BonCase {
  int prompt_index = 0;
  int picked = 0;
  int picked_outcome = 0;
  int num_correct = 0;
  double picked_score = 0.0;
};

struct BonResult {
  double accuracy = 0.0;
  std::vector<BonCase> cases;
};

// Samples N candidates per prompt, picks the highest score (ties to the
// lowest index) and reports the mean verifier outcome of the picks.
BonResult bon_rerank(const Scorer& scorer, const policy::PolicySnapshot& sampler,
                     std::span<const env::Prompt> prompts, int n, Rng& rng);
BonResult bon_rerank(const policy::PolicySnapshot& rm, const policy::PolicySnapshot& ref,
                     double beta, BonScore score, const policy::PolicySnapshot& sampler,
                     std::span<const env::Prompt> prompts, int n, Rng& rng);

// --- step localization -----------------------------------------------------------

enum class Protocol { kProcess, kPrefix };

std::string to_string(Protocol p);
Protocol protocol_from_string(const std::string& name);

struct StepScore {
  int first = 1;  // first token of the step (1-based)
  int last = 1;   // last token of the step
  double process = 0.5;
  double prefix = 0.5;
};

struct StepScoreSeries {
  std::vector<StepScore> steps;
  std::vector<double> scores(Protocol p) const;
};

// Steps are consecutive chunks of step_size tokens (the last may be short).
// process = sigmoid(beta * sum of log-ratios over the step),
// prefix = sigmoid(beta * sum of log-ratios up to the end of the step).
StepScoreSeries step_scores(std::span<const double> log_ratios, int step_size, double beta);
StepScoreSeries step_scores(const policy::PolicySnapshot& rm, const policy::PolicySnapshot& ref,
                            const env::Trajectory& tr, int step_size, double beta);

// First step (1-based) whose score is below the threshold.
std::optional<int> localize_first_error(std::span<const double> scores, double threshold);

struct F1Result {
  double acc_err = 0.0;
  double acc_ok = 0.0;
  double f1 = 0.0;
  int num_err = 0;
  int num_ok = 0;
};

// Throws ContractError when either subset is empty.
F1Result localization_f1(std::span<const std::optional<int>> predictions,
                         std::span<const std::optional<int>> labels);

struct LocalizationResult {
  F1Result f1;
  std::vector<std::optional<int>> predictions;
};

LocalizationResult evaluate_localization(const policy::PolicySnapshot& rm,
                                         const policy::PolicySnapshot& ref,
                                         std::span<const env::LocalizationCase> cases, double beta,
                                         Protocol protocol, double threshold = 0.5);

// --- RM score ------------------------------------------------------------------

// Mean over trajectories of (1/|y|)(log pi_rm(y) - log pi_ref(y)); no beta.
double rm_score_metric(const policy::PolicySnapshot& rm, const policy::PolicySnapshot& ref,
                       std::span<const env::Trajectory> trajectories);

// --- candidate sets ------------------------------------------------------------

struct CandidateStats {
  double avg_size = 0.0;
  double avg_mass = 0.0;
  int timesteps = 0;
};

// Threshold-only sets (no forced sampled token) at every timestep of the
// given rollouts.
CandidateStats candidate_stats(const policy::PolicySnapshot& behavior,
                               std::span<const env::Trajectory> rollouts, double p_min);
// Samples one rollout per prompt first.
CandidateStats candidate_stats(const policy::PolicySnapshot& behavior,
                               std::span<const env::Prompt> prompts, double p_min, Rng& rng);

// --- TD fidelity ---------------------------------------------------------------

struct FidelityStats {
  std::optional<double> pearson;  // TD vs label
  bool pearson_degenerate = false;
  std::optional<double> auc_abs;     // |V(s ⊕ y')| vs label
  std::optional<double> auc_signed;  // V(s ⊕ y') vs label
  int count = 0;
};

// Pearson is reported as 0 with the degeneracy flag when either input is
// constant; AUCs are none when labels are all equal.
FidelityStats fidelity_stats(std::span<const double> td, std::span<const double> value,
                             std::span<const int> labels);

struct TdFidelityOptions {
  int num_branches = 500;
  int rollouts_per_branch = 1;
  int top_k = 5;
  double beta = 10.0;
  // Exact success probabilities are computed when the continuation tree has
  // at most this many nodes.
  std::uint64_t exact_budget = 200'000;
};

struct TdFidelityRecord {
  int branch = 0;
  int t = 0;  // truncation point (tokens kept)
  int candidate = 0;
  double td = 0.0;
  double value = 0.0;
  int mc_success = 0;  // successful continuation rollouts
  int mc_total = 0;
  std::optional<double> exact_prob;
};

struct TdFidelityResult {
  FidelityStats mc;  // one data point per continuation rollout
  FidelityStats exact;  // labels: exact success probability >= 0.5
  std::optional<double> pearson_td_exact_prob;
  int exact_count = 0;
  std::vector<TdFidelityRecord> records;
};

// At random truncation points of behavior rollouts, scores the top-k
// behavior candidates with the RM (reference = behavior) and labels each by
// continuation rollouts and, when affordable, by the exact success
// probability under the behavior policy.
TdFidelityResult td_fidelity(const policy::PolicySnapshot& rm, const policy::PolicySnapshot& behavior,
                             const std::function<env::Prompt(Rng&)>& prompt_sampler,
                             const TdFidelityOptions& opts, Rng& rng);

}  // namespace ipvrm::eval

#endif  // IPVRM_EVAL_HPP_
