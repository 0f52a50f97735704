#ifndef IPVRM_POLICY_HPP_
#define IPVRM_POLICY_HPP_

// Tiny autoregressive softmax policy over environment tokens.
//
// Input per state: prompt features (target, horizon, env id), the position,
// a one-hot of the target and of the running statistic, and learned
// embeddings of the last `context` tokens (row 0 of the embedding table is
// padding). One tanh hidden layer maps the input to vocabulary logits.

#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "ipvrm/autodiff.hpp"
#include "ipvrm/env.hpp"
#include "ipvrm/rng.hpp"

namespace ipvrm::policy {

enum class Role : int { kSft = 0, kBehavior = 1, kReference = 2, kRewardModel = 3, kStudent = 4 };

std::string to_string(Role role);
Role role_from_string(const std::string& name);

struct Architecture {
  int context = 4;
  int embed = 8;
  int hidden = 32;
  int vocab = 8;
  int stat_range = 7;  // one-hot width for target and statistic

  int num_features() const { return 4 + 2 * stat_range; }
  int input_dim() const { return num_features() + context * embed; }

  friend bool operator==(const Architecture&, const Architecture&) = default;
};

// Smallest architecture (with the given layer sizes) that can encode prompts
// of this shape.
Architecture architecture_for(const env::Prompt& prompt, int context = 4, int embed = 8,
                              int hidden = 32);

// Throws ContractError if the prompt cannot be encoded by `arch`.
void check_compatible(const Architecture& arch, const env::Prompt& prompt);

ad::ParamVector zero_params(const Architecture& arch);
// Gaussian init with the given standard deviation; the output layer starts at
// zero so the initial policy is uniform.
ad::ParamVector init_params(const Architecture& arch, Rng& rng, double stddev = 0.3);

struct PolicySnapshot {
  Architecture arch;
  Role role = Role::kSft;
  ad::ParamVector params;
};

PolicySnapshot snapshot(const Architecture& arch, const ad::ParamVector& params, Role role);
ad::ParamVector restore(const PolicySnapshot& snap);

// Throws ContractError unless the two snapshots can be compared token by token.
void check_same_architecture(const PolicySnapshot& a, const PolicySnapshot& b);

// --- inference -----------------------------------------------------------------

// Row r holds the logits at states[r].
ad::Matrix logits(const Architecture& arch, const ad::ParamVector& params,
                  std::span<const env::EnvState> states);
std::vector<double> logits(const Architecture& arch, const ad::ParamVector& params,
                           const env::EnvState& state);
// Row-wise softmax(logits / temperature).
ad::Matrix probs(const Architecture& arch, const ad::ParamVector& params,
                 std::span<const env::EnvState> states, double temperature = 1.0);
ad::Matrix log_probs(const Architecture& arch, const ad::ParamVector& params,
                     std::span<const env::EnvState> states);

inline ad::Matrix probs(const PolicySnapshot& p, std::span<const env::EnvState> states) {
  return probs(p.arch, p.params, states);
}
inline ad::Matrix log_probs(const PolicySnapshot& p, std::span<const env::EnvState> states) {
  return log_probs(p.arch, p.params, states);
}

// Differentiable logits (states x vocab) with parameters bound to the tape.
ad::Var logits_graph(ad::Tape& tape, const Architecture& arch,
                     std::span<const env::EnvState> states);

// States s_0..s_{T-1} visited by a trajectory.
std::vector<env::EnvState> trajectory_states(const env::Trajectory& tr);
// Concatenated states of several trajectories (trajectory-major).
std::vector<env::EnvState> batch_states(std::span<const env::Trajectory> trs);

// Column of log pi(y_t | s_t) for every token of every trajectory, in
// trajectory-major order.
ad::Var sequence_log_prob(ad::Tape& tape, const Architecture& arch,
                          std::span<const env::Trajectory> trs);
std::vector<double> sequence_log_prob(const Architecture& arch, const ad::ParamVector& params,
                                      const env::Trajectory& tr);
// Per-token log-probs for a batch, in trajectory-major order.
std::vector<double> token_log_probs(const Architecture& arch, const ad::ParamVector& params,
                                    std::span<const env::Trajectory> trs);

// --- sampling ------------------------------------------------------------------

struct SampleOptions {
  double temperature = 1.0;
  bool greedy = false;  // argmax, ties to the lowest index; stored log-probs are 0
};

env::Trajectory sample_trajectory(const Architecture& arch, const ad::ParamVector& params,
                                  const env::Prompt& prompt, const SampleOptions& opts, Rng& rng);
// Samples one trajectory per prompt, advancing all of them in lockstep.
// Draws are taken in prompt order at every position.
std::vector<env::Trajectory> sample_trajectories(const Architecture& arch,
                                                 const ad::ParamVector& params,
                                                 std::span<const env::Prompt> prompts,
                                                 const SampleOptions& opts, Rng& rng);
// Same, with an independent generator per prompt (rngs.size() == prompts.size()).
std::vector<env::Trajectory> sample_trajectories(const Architecture& arch,
                                                 const ad::ParamVector& params,
                                                 std::span<const env::Prompt> prompts,
                                                 const SampleOptions& opts, std::span<Rng> rngs);

// Adapters for the exact oracles in env.
env::BatchPolicy as_batch_policy(const PolicySnapshot& p);
env::PrefixPolicy as_prefix_policy(const PolicySnapshot& p);

// --- supervised fine-tuning ----------------------------------------------------

// Mean per-token negative log-likelihood.
ad::Var nll_graph(ad::Tape& tape, const Architecture& arch, std::span<const env::Trajectory> batch);
double nll(const Architecture& arch, const ad::ParamVector& params,
           std::span<const env::Trajectory> batch);
// One SGD step on the mean NLL. Every trajectory must be correct.
ad::ParamVector sft_update(const Architecture& arch, const ad::ParamVector& params,
                           std::span<const env::Trajectory> batch, double lr);

// --- checkpoints ---------------------------------------------------------------

// Header: "IPVR", u32 version, then role and the architecture descriptor as
// u32; body: parameters as little-endian float32 in segment order.
std::string serialize(const PolicySnapshot& snap);
PolicySnapshot deserialize(const std::string& bytes);
void save_checkpoint(const PolicySnapshot& snap, const std::string& path);
PolicySnapshot load_checkpoint(const std::string& path);
// Rounds every parameter to float32 so in-memory and on-disk models agree.
void round_to_float(ad::ParamVector& params);

}  // namespace ipvrm::policy

#endif  // IPVRM_POLICY_HPP_
