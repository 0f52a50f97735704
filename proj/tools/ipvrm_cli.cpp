// Command-line front end. Links only the C API.

#include <cstdio>
#include <optional>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "ipvrm/ipvrm.h"

namespace {

struct Options {
  std::string config_path;
  std::optional<long long> seed;
  std::optional<std::string> out;
  std::optional<int> workers;
  std::optional<std::string> rm_method;
  std::optional<std::string> rl_method;
  std::optional<std::string> adb;
  std::optional<std::string> dlw;
  std::optional<std::string> frozen;
  std::optional<double> p_min;
  std::optional<double> alpha;
  std::optional<std::string> protocol;
  std::optional<int> n;
  std::optional<std::string> env;
  std::vector<std::string> runs;
  std::vector<std::string> sets;
};

int report(ipvrm_status s) {
  std::fprintf(stderr, "ipvrm: %s: %s\n", ipvrm_status_name(s), ipvrm_last_error());
  return static_cast<int>(s);
}

std::string quote(const std::string& s) {
  std::string out = "\"";
  for (char c : s) {
    if (c == '"' || c == '\\') out += '\\';
    out += c;
  }
  return out + "\"";
}

// Applies command-line overrides on top of the loaded config.
ipvrm_status apply(ipvrm_config* cfg, const Options& o) {
  std::vector<std::pair<std::string, std::string>> kv;
  if (o.seed) kv.emplace_back("seed", std::to_string(*o.seed));
  if (o.out) kv.emplace_back("out_dir", *o.out);
  if (o.workers) kv.emplace_back("workers", std::to_string(*o.workers));
  if (o.env) kv.emplace_back("env.name", *o.env);
  if (o.rm_method) kv.emplace_back("rm.method", *o.rm_method);
  if (o.rl_method) kv.emplace_back("rl.method", *o.rl_method);
  if (o.adb) kv.emplace_back("rl.online.adb", *o.adb);
  if (o.dlw) kv.emplace_back("rl.online.dlw", *o.dlw);
  if (o.frozen) kv.emplace_back("rl.online.frozen", *o.frozen);
  if (o.p_min) kv.emplace_back("rl.ppo.p_min", std::to_string(*o.p_min));
  if (o.alpha) kv.emplace_back("rl.ppo.alpha", std::to_string(*o.alpha));
  if (o.protocol) kv.emplace_back("eval.protocol", *o.protocol);
  if (o.n) kv.emplace_back("eval.bon_n", "[" + std::to_string(*o.n) + "]");
  if (!o.runs.empty()) {
    std::string arr = "[";
    for (std::size_t i = 0; i < o.runs.size(); ++i) arr += (i ? "," : "") + quote(o.runs[i]);
    kv.emplace_back("report.runs", arr + "]");
  }
  for (const auto& s : o.sets) {
    const auto eq = s.find('=');
    if (eq == std::string::npos) {
      std::fprintf(stderr, "ipvrm: --set expects KEY=VALUE, got '%s'\n", s.c_str());
      return IPVRM_ERR_CONFIG;
    }
    kv.emplace_back(s.substr(0, eq), s.substr(eq + 1));
  }
  for (const auto& [k, v] : kv) {
    if (ipvrm_status s = ipvrm_config_set(cfg, k.c_str(), v.c_str()); s != IPVRM_OK) return s;
  }
  return IPVRM_OK;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Implicit prefix-value reward models and distribution-level RL on synthetic MDPs"};
  app.require_subcommand(1);
  app.fallthrough();  // global flags may follow the subcommand
  app.set_version_flag("--version", std::string(ipvrm_version()));

  Options o;
  app.add_option("--config", o.config_path, "experiment config (JSON)")->check(CLI::ExistingFile);
  app.add_option("--seed", o.seed, "base seed");
  app.add_option("--out", o.out, "run directory");
  app.add_option("--workers", o.workers, "worker threads")->check(CLI::PositiveNumber);
  app.add_option("--env", o.env, "environment")->check(CLI::IsMember({"modsum", "bitbudget"}));
  app.add_option("--rm-method", o.rm_method, "reward-model objective")
      ->check(CLI::IsMember({"ipvrm", "ipvrm_late", "ipvrm_early", "implicit_prm", "dpo"}));
  app.add_option("--rl-method", o.rl_method, "policy objective")
      ->check(CLI::IsMember({"distrl", "grpo", "grpo_with_rm"}));
  app.add_option("--adb", o.adb, "adaptive difficulty boundary")->check(CLI::IsMember({"on", "off"}));
  app.add_option("--dlw", o.dlw, "dynamic loss weighting")->check(CLI::IsMember({"on", "off"}));
  app.add_option("--frozen", o.frozen, "freeze the RM during RL")->check(CLI::IsMember({"on", "off"}));
  app.add_option("--p-min", o.p_min, "candidate-set threshold")->check(CLI::Range(0.0, 1.0));
  app.add_option("--alpha", o.alpha, "weight of the distribution-level term");
  app.add_option("--protocol", o.protocol, "step-scoring protocol")->check(CLI::IsMember({"process", "prefix"}));
  app.add_option("--n", o.n, "best-of-N size")->check(CLI::PositiveNumber);
  app.add_option("--set", o.sets, "override any config field, KEY=VALUE (repeatable)");

  const std::vector<std::pair<const char*, const char*>> stages = {
      {"sft", "supervised fine-tuning on teacher traces"},
      {"rm-data", "sample labeled rollouts from the SFT policy"},
      {"train-rm", "train the implicit reward model"},
      {"train-rl", "policy optimization with the online reward model"},
      {"eval-bon", "best-of-N reranking"},
      {"eval-steps", "first-error localization (bitbudget)"},
      {"eval-td", "TD fidelity and candidate-set statistics"},
      {"report", "aggregate run directories"},
  };
  std::string stage;
  for (const auto& [name, help] : stages) {
    auto* sub = app.add_subcommand(name, help);
    sub->callback([&stage, n = std::string(name)] { stage = n; });
    if (std::string(name) == "report") sub->add_option("runs", o.runs, "run directories");
  }
  bool print_only = false;
  app.add_subcommand("config", "print the effective configuration")->callback([&] { print_only = true; });

  CLI11_PARSE(app, argc, argv);

  ipvrm_config* cfg = nullptr;
  ipvrm_status s = o.config_path.empty() ? ipvrm_config_default(&cfg) : ipvrm_config_load(o.config_path.c_str(), &cfg);
  if (s != IPVRM_OK) return report(s);
  if ((s = apply(cfg, o)) != IPVRM_OK) {
    ipvrm_config_free(cfg);
    return report(s);
  }
  if (print_only) {
    size_t needed = 0;
    ipvrm_config_to_json(cfg, nullptr, 0, &needed);
    std::string text(needed, '\0');
    ipvrm_config_to_json(cfg, text.data(), text.size(), &needed);
    std::fputs(text.c_str(), stdout);
    ipvrm_config_free(cfg);
    return 0;
  }
  s = ipvrm_run(stage.c_str(), cfg);
  if (s == IPVRM_OK) {
    char out[4096];
    ipvrm_config_get(cfg, "out_dir", out, sizeof(out), nullptr);
    std::fprintf(stderr, "ipvrm: %s done, artifacts in %s\n", stage.c_str(), out);
  }
  ipvrm_config_free(cfg);
  return s == IPVRM_OK ? 0 : report(s);
}
