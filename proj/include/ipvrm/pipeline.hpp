#ifndef IPVRM_PIPELINE_HPP_
#define IPVRM_PIPELINE_HPP_

// Stage orchestration. Every stage reads its inputs from and writes its
// artifacts to the run directory (config.out_dir):
//
//   config.json                 the effective configuration
//   checkpoints/sft.ckpt        sft
//   sft_log.jsonl               sft
//   rm_data.jsonl               rm-data
//   checkpoints/rm.ckpt         train-rm
//   rm_loss.jsonl               train-rm
//   checkpoints/policy.ckpt     train-rl
//   checkpoints/rm_online.ckpt  train-rl
//   metrics.jsonl               train-rl
//   localization_cases.jsonl    eval-steps
//   reports/*.csv               eval-*, report
//   summary.json                one object per stage, merged across stages

#include <functional>
#include <optional>
#include <string>
#include <vector>

#include "ipvrm/config.hpp"
#include "ipvrm/distrl.hpp"
#include "ipvrm/env.hpp"
#include "ipvrm/policy.hpp"
#include "ipvrm/rng.hpp"

namespace ipvrm::pipeline {

enum class Stage { kSft, kRmData, kTrainRm, kTrainRl, kEvalBon, kEvalSteps, kEvalTd, kReport };

std::string to_string(Stage s);
// Throws ConfigError for an unknown name.
Stage stage_from_string(const std::string& name);

// Runs one stage. Throws StageDependencyError when an upstream artifact is
// missing and ConfigError when the configuration is invalid.
void run(Stage stage, const config::ExperimentConfig& cfg);

struct Paths {
  std::string root;
  std::string config() const { return root + "/config.json"; }
  std::string sft_ckpt() const { return root + "/checkpoints/sft.ckpt"; }
  std::string sft_log() const { return root + "/sft_log.jsonl"; }
  std::string rm_data() const { return root + "/rm_data.jsonl"; }
  std::string rm_ckpt() const { return root + "/checkpoints/rm.ckpt"; }
  std::string rm_loss() const { return root + "/rm_loss.jsonl"; }
  std::string policy_ckpt() const { return root + "/checkpoints/policy.ckpt"; }
  std::string rm_online_ckpt() const { return root + "/checkpoints/rm_online.ckpt"; }
  std::string metrics() const { return root + "/metrics.jsonl"; }
  std::string localization_cases() const { return root + "/localization_cases.jsonl"; }
  std::string reports() const { return root + "/reports"; }
  std::string summary() const { return root + "/summary.json"; }
};

// --- in-memory building blocks ---------------------------------------------------

struct SftLogEntry {
  int step = 0;
  double nll = 0.0;
};

// Supervised fine-tuning on teacher traces from a fresh initialization. The
// result is rounded to float32.
policy::PolicySnapshot train_sft(const config::ExperimentConfig& cfg,
                                 std::vector<SftLogEntry>* log = nullptr);

struct RmGroup {
  env::Prompt prompt;
  std::vector<env::Trajectory> rollouts;
  // Indices of the first correct and first incorrect rollout.
  int win = -1;
  int lose = -1;
};

struct RmData {
  int sampled_prompts = 0;
  std::vector<RmGroup> groups;  // mixed-outcome prompts only
};

// Rollouts per prompt from the SFT policy; prompts whose rollouts all agree
// are dropped.
RmData generate_rm_data(const config::ExperimentConfig& cfg, const policy::PolicySnapshot& sft);

std::string to_json_line(const RmGroup& g);
RmGroup rm_group_from_json_line(const std::string& line);

struct RmLogEntry {
  int epoch = 0;
  int step = 0;
  double loss = 0.0;
};

// Offline reward-model training initialized from the SFT policy, which also
// serves as the reference. The result is rounded to float32.
policy::PolicySnapshot train_rm(const config::ExperimentConfig& cfg,
                                const policy::PolicySnapshot& sft, const RmData& data,
                                std::vector<RmLogEntry>* log = nullptr);

// Mean over prompts of the exact success probability of `policy`.
double exact_accuracy(const policy::PolicySnapshot& policy, std::span<const env::Prompt> prompts);

// Method label used to group runs in reports, e.g. "distrl/ipvrm".
std::string method_label(const config::ExperimentConfig& cfg);

// --- reports ---------------------------------------------------------------------

struct MetricRow {
  std::string method;
  std::string metric;
  int count = 0;
  double mean = 0.0;
  double std = 0.0;  // population standard deviation over runs
};

// Aggregates summary.json of every run directory. Throws ContractError
// listing differing env/eval keys when the runs are not comparable.
std::vector<MetricRow> aggregate_runs(const std::vector<std::string>& run_dirs);

}  // namespace ipvrm::pipeline

#endif  // IPVRM_PIPELINE_HPP_
