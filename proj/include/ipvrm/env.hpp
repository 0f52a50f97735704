#ifndef IPVRM_ENV_HPP_
#define IPVRM_ENV_HPP_

// Synthetic token-level MDPs with deterministic verifiers.
//
// ModSum: tokens are digits d_0..d_{V-1} with value i; the outcome is 1 iff the
// digit sum is congruent to the target residue modulo K.
// BitBudget: tokens are INC and SKIP; the outcome is 1 iff exactly c* INC
// tokens were emitted.
//
// Both have a fixed horizon L and no end-of-sequence token. The sufficient
// statistic (running residue or running count) together with the position
// determines every future outcome.

#include <cstdint>
#include <functional>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "ipvrm/autodiff.hpp"
#include "ipvrm/rng.hpp"

namespace ipvrm::env {

enum class EnvKind : int { kModSum = 0, kBitBudget = 1 };

inline constexpr int kInc = 0;
inline constexpr int kSkip = 1;

std::string to_string(EnvKind kind);
EnvKind env_kind_from_string(const std::string& name);

struct Prompt {
  EnvKind kind = EnvKind::kModSum;
  int target = 0;   // r* for ModSum, c* for BitBudget
  int horizon = 1;  // L
  int modulus = 7;  // K (ModSum only)
  int digits = 8;   // vocabulary size (ModSum only)

  friend bool operator==(const Prompt&, const Prompt&) = default;
};

// Throws ContractError when the prompt's invariants do not hold.
void validate(const Prompt& prompt);
int vocab_size(const Prompt& prompt);
// Number of values the sufficient statistic can take.
int statistic_range(const Prompt& prompt);

struct EnvState {
  Prompt prompt;
  int t = 0;
  int statistic = 0;
  std::vector<int> tokens;  // the prefix y_1..y_t
};

struct Trajectory {
  Prompt prompt;
  std::vector<int> tokens;
  std::vector<double> behavior_logprobs;
  int outcome = 0;
};

EnvState reset(const Prompt& prompt);
EnvState step(const EnvState& state, int token);
int next_statistic(const Prompt& prompt, int statistic, int token);
int verify(const Prompt& prompt, std::span<const int> tokens);
EnvState state_after(const Prompt& prompt, std::span<const int> prefix);

// --- exact oracles -------------------------------------------------------------

// A policy that only sees (prompt, position, statistic).
using MarkovPolicy = std::function<std::vector<double>(const Prompt&, int t, int statistic)>;
// A policy that sees the full prefix.
using PrefixPolicy = std::function<std::vector<double>(const EnvState&)>;
// Row r of the result is the next-token distribution at states[r].
using BatchPolicy = std::function<ad::Matrix(std::span<const EnvState>)>;

inline constexpr std::uint64_t kEnumerationBudget = 10'000'000;

// Backward DP over (position, statistic).
double exact_success_prob(const MarkovPolicy& policy, const EnvState& state);
// Exhaustive recursion over continuations of `state`.
double exact_success_prob(const PrefixPolicy& policy, const EnvState& state);

// Success probability of every prefix in the subtree rooted at a state,
// computed level by level with batched policy evaluation.
class SuccessTable {
 public:
  SuccessTable(const BatchPolicy& policy, const EnvState& root);

  // `suffix` are the tokens appended to the root prefix.
  double prob(std::span<const int> suffix) const;
  double root_prob() const { return levels_.front().front(); }
  int depth() const { return static_cast<int>(levels_.size()) - 1; }
  int vocab() const { return vocab_; }

 private:
  int vocab_ = 0;
  std::vector<std::vector<double>> levels_;
};

// 1 iff the target outcome is still reachable from (t, statistic).
int optimal_value(const Prompt& prompt, int t, int statistic);
int optimal_value(const EnvState& state);

// beta * log E_{y ~ ref}[exp(r(y) / beta)] over completions of `state`.
using RewardFn = std::function<double(const Trajectory&)>;
double exact_soft_value(const RewardFn& reward, const PrefixPolicy& ref, const EnvState& state,
                        double beta);

// Uniform over the tokens that keep the optimal value at 1.
Trajectory sample_teacher_trajectory(const Prompt& prompt, Rng& rng);

// --- localization --------------------------------------------------------------

struct LocalizationCase {
  Trajectory trajectory;
  int step_size = 2;
  std::optional<int> first_error_step;  // 1-based
};

struct LocalizationConfig {
  int horizon = 10;
  int target_min = 2;
  int target_max = 8;
  int step_size = 2;
  double p_err = 0.5;
  int max_retries = 64;
};

// 1-based position of the first token after which the optimal value drops
// from 1 to 0, or nullopt.
std::optional<int> first_error_position(const Prompt& prompt, std::span<const int> tokens);
int step_of_position(int position, int step_size);

// BitBudget only. The base policy is restricted to value-preserving tokens
// (renormalized) so that traces are error-free except for the splice.
LocalizationCase make_localization_case(const LocalizationConfig& config,
                                        const PrefixPolicy& base_policy, Rng& rng);

std::string to_json_line(const LocalizationCase& c);
LocalizationCase localization_case_from_json_line(const std::string& line);

}  // namespace ipvrm::env

#endif  // IPVRM_ENV_HPP_
