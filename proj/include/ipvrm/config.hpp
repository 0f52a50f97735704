#ifndef IPVRM_CONFIG_HPP_
#define IPVRM_CONFIG_HPP_

// Experiment configuration. The file format is JSON with one object per
// section; individual fields are addressed by dotted keys such as
// "rm.method" or "rl.ppo.alpha".

#include <cstdint>
#include <string>
#include <vector>

#include "ipvrm/distrl.hpp"
#include "ipvrm/env.hpp"
#include "ipvrm/eval.hpp"
#include "ipvrm/implicit_reward.hpp"
#include "ipvrm/policy.hpp"

namespace ipvrm::config {

struct EnvConfig {
  env::EnvKind kind = env::EnvKind::kModSum;
  int modsum_modulus = 7;
  int modsum_digits = 8;
  int modsum_horizon = 6;
  int bitbudget_horizon = 10;
  int bitbudget_target_min = 2;
  int bitbudget_target_max = 8;
};

struct PolicyConfig {
  int context = 4;
  int embed = 8;
  int hidden = 32;
  double init_std = 0.3;
};

struct SftConfig {
  int num_traces = 2000;
  int steps = 3000;
  int batch_size = 32;
  double lr = 1.0;
};

struct RmDataConfig {
  int num_prompts = 2000;
  int rollouts_per_prompt = 5;
  double temperature = 1.0;
};

struct RmConfig {
  reward::RmMethod method = reward::RmMethod::kIpvrm;
  double beta_ipvrm = 10.0;
  double beta_baseline = 0.05;
  double margin = 5.0;
  int epochs = 30;
  int batch_size = 32;
  double lr = 0.03;

  double beta() const { return reward::is_ipvrm(method) ? beta_ipvrm : beta_baseline; }
};

struct OnlineConfig {
  bool adb = true;
  bool dlw = true;
  bool frozen = false;
  double lr = 1e-3;
};

struct RlConfig {
  distrl::RlMethod method = distrl::RlMethod::kDistRL;
  int iterations = 200;
  // Fresh rollouts of the final policy used for the summary RM score.
  int eval_rollouts = 512;
  distrl::PpoConfig ppo;
  OnlineConfig online;
};

struct EvalConfig {
  std::vector<int> bon_n = {4, 16, 64};
  int bon_prompts = 200;
  // "auto" picks vbar for IPVRM variants and total for the baselines.
  std::string bon_score = "auto";
  eval::Protocol protocol = eval::Protocol::kProcess;
  double threshold = 0.5;
  int localization_cases = 500;
  int step_size = 2;
  double p_err = 0.5;
  int td_branches = 500;
  int td_rollouts_per_branch = 1;
  int td_top_k = 5;
  int candidate_prompts = 500;
};

struct ExperimentConfig {
  std::uint64_t seed = 42;
  std::string out_dir = "runs/default";
  int workers = 1;
  EnvConfig env;
  PolicyConfig policy;
  SftConfig sft;
  RmDataConfig rm_data;
  RmConfig rm;
  RlConfig rl;
  EvalConfig eval;
  std::vector<std::string> report_runs;
};

ExperimentConfig defaults();

std::string to_json(const ExperimentConfig& cfg);
// Throws ConfigError on malformed input or unknown keys.
ExperimentConfig from_json(const std::string& text);
ExperimentConfig load(const std::string& path);
void save(const ExperimentConfig& cfg, const std::string& path);

// Sets one field from its textual value, e.g. set(cfg, "rl.ppo.alpha", "0.2").
void set(ExperimentConfig& cfg, const std::string& key, const std::string& value);
// Textual value of one field (JSON encoding).
std::string get(const ExperimentConfig& cfg, const std::string& key);

// Every violated invariant; empty when valid.
std::vector<std::string> violations(const ExperimentConfig& cfg);
// Throws ConfigError listing all violations.
void validate(const ExperimentConfig& cfg);

// --- derived objects ------------------------------------------------------------

// A representative prompt (target 0) for building architectures.
env::Prompt base_prompt(const EnvConfig& env);
distrl::PromptSampler prompt_sampler(const EnvConfig& env);
// All distinct prompts of the environment.
std::vector<env::Prompt> all_prompts(const EnvConfig& env);
policy::Architecture architecture(const ExperimentConfig& cfg);
distrl::TrainConfig train_config(const ExperimentConfig& cfg);
eval::BonScore bon_score(const ExperimentConfig& cfg);

}  // namespace ipvrm::config

#endif  // IPVRM_CONFIG_HPP_
