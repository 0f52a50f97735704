#include "ipvrm/config.hpp"

#include <fstream>
#include <sstream>

#include "json.hpp"

#include "ipvrm/error.hpp"

namespace ipvrm::config {

using nlohmann::ordered_json;

ExperimentConfig defaults() { return ExperimentConfig{}; }

namespace {

ordered_json to_tree(const ExperimentConfig& c) {
  ordered_json j;
  j["seed"] = c.seed;
  j["out_dir"] = c.out_dir;
  j["workers"] = c.workers;
  j["env"] = {
      {"name", env::to_string(c.env.kind)},
      {"modsum",
       {{"modulus", c.env.modsum_modulus}, {"digits", c.env.modsum_digits}, {"horizon", c.env.modsum_horizon}}},
      {"bitbudget",
       {{"horizon", c.env.bitbudget_horizon},
        {"target_min", c.env.bitbudget_target_min},
        {"target_max", c.env.bitbudget_target_max}}},
  };
  j["policy"] = {{"context", c.policy.context},
                 {"embed", c.policy.embed},
                 {"hidden", c.policy.hidden},
                 {"init_std", c.policy.init_std}};
  j["sft"] = {{"num_traces", c.sft.num_traces},
              {"steps", c.sft.steps},
              {"batch_size", c.sft.batch_size},
              {"lr", c.sft.lr}};
  j["rm_data"] = {{"num_prompts", c.rm_data.num_prompts},
                  {"rollouts_per_prompt", c.rm_data.rollouts_per_prompt},
                  {"temperature", c.rm_data.temperature}};
  j["rm"] = {{"method", reward::to_string(c.rm.method)},
             {"beta_ipvrm", c.rm.beta_ipvrm},
             {"beta_baseline", c.rm.beta_baseline},
             {"margin", c.rm.margin},
             {"epochs", c.rm.epochs},
             {"batch_size", c.rm.batch_size},
             {"lr", c.rm.lr}};
  const auto& p = c.rl.ppo;
  j["rl"] = {
      {"method", distrl::to_string(c.rl.method)},
      {"iterations", c.rl.iterations},
      {"eval_rollouts", c.rl.eval_rollouts},
      {"ppo",
       {{"eps_low", p.eps_low},
        {"eps_high", p.eps_high},
        {"alpha", p.alpha},
        {"p_min", p.p_min},
        {"epochs", p.ppo_epochs},
        {"minibatches", p.minibatches},
        {"lr", p.lr},
        {"gamma", p.gamma},
        {"lambda", p.lambda},
        {"n", p.n},
        {"oversample", p.oversample},
        {"batch_size", p.batch_size},
        {"temperature", p.temperature},
        {"mixed_only", p.mixed_only},
        {"max_rounds", p.max_rounds}}},
      {"online",
       {{"adb", c.rl.online.adb},
        {"dlw", c.rl.online.dlw},
        {"frozen", c.rl.online.frozen},
        {"lr", c.rl.online.lr}}},
  };
  j["eval"] = {{"bon_n", c.eval.bon_n},
               {"bon_prompts", c.eval.bon_prompts},
               {"bon_score", c.eval.bon_score},
               {"protocol", eval::to_string(c.eval.protocol)},
               {"threshold", c.eval.threshold},
               {"localization_cases", c.eval.localization_cases},
               {"step_size", c.eval.step_size},
               {"p_err", c.eval.p_err},
               {"td_branches", c.eval.td_branches},
               {"td_rollouts_per_branch", c.eval.td_rollouts_per_branch},
               {"td_top_k", c.eval.td_top_k},
               {"candidate_prompts", c.eval.candidate_prompts}};
  j["report"] = {{"runs", c.report_runs}};
  return j;
}

ExperimentConfig from_tree(const ordered_json& j) {
  ExperimentConfig c;
  c.seed = j.at("seed").get<std::uint64_t>();
  c.out_dir = j.at("out_dir").get<std::string>();
  c.workers = j.at("workers").get<int>();
  const auto& e = j.at("env");
  c.env.kind = env::env_kind_from_string(e.at("name").get<std::string>());
  c.env.modsum_modulus = e.at("modsum").at("modulus").get<int>();
  c.env.modsum_digits = e.at("modsum").at("digits").get<int>();
  c.env.modsum_horizon = e.at("modsum").at("horizon").get<int>();
  c.env.bitbudget_horizon = e.at("bitbudget").at("horizon").get<int>();
  c.env.bitbudget_target_min = e.at("bitbudget").at("target_min").get<int>();
  c.env.bitbudget_target_max = e.at("bitbudget").at("target_max").get<int>();
  const auto& po = j.at("policy");
  c.policy.context = po.at("context").get<int>();
  c.policy.embed = po.at("embed").get<int>();
  c.policy.hidden = po.at("hidden").get<int>();
  c.policy.init_std = po.at("init_std").get<double>();
  const auto& s = j.at("sft");
  c.sft.num_traces = s.at("num_traces").get<int>();
  c.sft.steps = s.at("steps").get<int>();
  c.sft.batch_size = s.at("batch_size").get<int>();
  c.sft.lr = s.at("lr").get<double>();
  const auto& d = j.at("rm_data");
  c.rm_data.num_prompts = d.at("num_prompts").get<int>();
  c.rm_data.rollouts_per_prompt = d.at("rollouts_per_prompt").get<int>();
  c.rm_data.temperature = d.at("temperature").get<double>();
  const auto& r = j.at("rm");
  c.rm.method = reward::rm_method_from_string(r.at("method").get<std::string>());
  c.rm.beta_ipvrm = r.at("beta_ipvrm").get<double>();
  c.rm.beta_baseline = r.at("beta_baseline").get<double>();
  c.rm.margin = r.at("margin").get<double>();
  c.rm.epochs = r.at("epochs").get<int>();
  c.rm.batch_size = r.at("batch_size").get<int>();
  c.rm.lr = r.at("lr").get<double>();
  const auto& rl = j.at("rl");
  c.rl.method = distrl::rl_method_from_string(rl.at("method").get<std::string>());
  c.rl.iterations = rl.at("iterations").get<int>();
  c.rl.eval_rollouts = rl.at("eval_rollouts").get<int>();
  const auto& pp = rl.at("ppo");
  auto& p = c.rl.ppo;
  p.eps_low = pp.at("eps_low").get<double>();
  p.eps_high = pp.at("eps_high").get<double>();
  p.alpha = pp.at("alpha").get<double>();
  p.p_min = pp.at("p_min").get<double>();
  p.ppo_epochs = pp.at("epochs").get<int>();
  p.minibatches = pp.at("minibatches").get<int>();
  p.lr = pp.at("lr").get<double>();
  p.gamma = pp.at("gamma").get<double>();
  p.lambda = pp.at("lambda").get<double>();
  p.n = pp.at("n").get<int>();
  p.oversample = pp.at("oversample").get<int>();
  p.batch_size = pp.at("batch_size").get<int>();
  p.temperature = pp.at("temperature").get<double>();
  p.mixed_only = pp.at("mixed_only").get<bool>();
  p.max_rounds = pp.at("max_rounds").get<int>();
  const auto& on = rl.at("online");
  c.rl.online.adb = on.at("adb").get<bool>();
  c.rl.online.dlw = on.at("dlw").get<bool>();
  c.rl.online.frozen = on.at("frozen").get<bool>();
  c.rl.online.lr = on.at("lr").get<double>();
  const auto& ev = j.at("eval");
  c.eval.bon_n = ev.at("bon_n").get<std::vector<int>>();
  c.eval.bon_prompts = ev.at("bon_prompts").get<int>();
  c.eval.bon_score = ev.at("bon_score").get<std::string>();
  c.eval.protocol = eval::protocol_from_string(ev.at("protocol").get<std::string>());
  c.eval.threshold = ev.at("threshold").get<double>();
  c.eval.localization_cases = ev.at("localization_cases").get<int>();
  c.eval.step_size = ev.at("step_size").get<int>();
  c.eval.p_err = ev.at("p_err").get<double>();
  c.eval.td_branches = ev.at("td_branches").get<int>();
  c.eval.td_rollouts_per_branch = ev.at("td_rollouts_per_branch").get<int>();
  c.eval.td_top_k = ev.at("td_top_k").get<int>();
  c.eval.candidate_prompts = ev.at("candidate_prompts").get<int>();
  c.report_runs = j.at("report").at("runs").get<std::vector<std::string>>();
  return c;
}

// Overlays `patch` onto `base`, rejecting keys that `base` does not have.
void overlay(ordered_json& base, const ordered_json& patch, const std::string& path,
             std::vector<std::string>& unknown) {
  for (auto it = patch.begin(); it != patch.end(); ++it) {
    const std::string key = path.empty() ? it.key() : path + "." + it.key();
    if (!base.contains(it.key())) {
      unknown.push_back(key);
      continue;
    }
    auto& slot = base[it.key()];
    if (slot.is_object() && it.value().is_object()) {
      overlay(slot, it.value(), key, unknown);
    } else {
      slot = it.value();
    }
  }
}

ExperimentConfig parse_tree(const ordered_json& tree) {
  try {
    return from_tree(tree);
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("config has a field of the wrong type: ") + e.what());
  } catch (const ContractError& e) {
    throw ConfigError(e.what());
  }
}

std::vector<std::string> split_key(const std::string& key) {
  std::vector<std::string> parts;
  std::stringstream ss(key);
  std::string part;
  while (std::getline(ss, part, '.')) parts.push_back(part);
  return parts;
}

}  // namespace

std::string to_json(const ExperimentConfig& cfg) { return to_tree(cfg).dump(2) + "\n"; }

ExperimentConfig from_json(const std::string& text) {
  ordered_json patch;
  try {
    patch = ordered_json::parse(text);
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("config is not valid JSON: ") + e.what());
  }
  if (!patch.is_object()) throw ConfigError("config must be a JSON object");
  ordered_json tree = to_tree(defaults());
  std::vector<std::string> unknown;
  overlay(tree, patch, "", unknown);
  if (!unknown.empty()) {
    std::string msg = "unknown config keys:";
    for (const auto& k : unknown) msg += " " + k;
    throw ConfigError(msg);
  }
  return parse_tree(tree);
}

ExperimentConfig load(const std::string& path) {
  std::ifstream f(path);
  if (!f) throw IoError("cannot open config '" + path + "'");
  std::ostringstream ss;
  ss << f.rdbuf();
  return from_json(ss.str());
}

void save(const ExperimentConfig& cfg, const std::string& path) {
  std::ofstream f(path, std::ios::trunc);
  if (!f) throw IoError("cannot open '" + path + "' for writing");
  f << to_json(cfg);
  if (!f) throw IoError("failed writing '" + path + "'");
}

void set(ExperimentConfig& cfg, const std::string& key, const std::string& value) {
  ordered_json tree = to_tree(cfg);
  ordered_json* node = &tree;
  for (const auto& part : split_key(key)) {
    if (!node->is_object() || !node->contains(part)) throw ConfigError("unknown config key '" + key + "'");
    node = &(*node)[part];
  }
  if (node->is_object()) throw ConfigError("config key '" + key + "' names a section, not a field");
  ordered_json parsed;
  if (node->is_boolean() && (value == "on" || value == "off")) {
    parsed = value == "on";
  } else if (node->is_string()) {
    parsed = value;
  } else {
    try {
      parsed = ordered_json::parse(value);
    } catch (const nlohmann::json::exception&) {
      throw ConfigError("cannot parse value '" + value + "' for config key '" + key + "'");
    }
  }
  *node = parsed;
  cfg = parse_tree(tree);
}

std::string get(const ExperimentConfig& cfg, const std::string& key) {
  const ordered_json tree = to_tree(cfg);
  const ordered_json* node = &tree;
  for (const auto& part : split_key(key)) {
    if (!node->is_object() || !node->contains(part)) throw ConfigError("unknown config key '" + key + "'");
    node = &(*node)[part];
  }
  return node->dump();
}

std::vector<std::string> violations(const ExperimentConfig& c) {
  std::vector<std::string> v;
  auto need = [&v](bool ok, const char* msg) {
    if (!ok) v.emplace_back(msg);
  };
  need(c.workers >= 1, "workers must be >= 1");
  need(!c.out_dir.empty(), "out_dir must not be empty");
  need(c.env.modsum_modulus >= 2, "env.modsum.modulus must be >= 2");
  need(c.env.modsum_digits >= 1, "env.modsum.digits must be >= 1");
  need(c.env.modsum_horizon >= 1, "env.modsum.horizon must be >= 1");
  need(c.env.bitbudget_horizon >= 1, "env.bitbudget.horizon must be >= 1");
  need(c.env.bitbudget_target_min >= 0 && c.env.bitbudget_target_min <= c.env.bitbudget_target_max &&
           c.env.bitbudget_target_max <= c.env.bitbudget_horizon,
       "env.bitbudget targets must satisfy 0 <= target_min <= target_max <= horizon");
  need(c.policy.context >= 1, "policy.context must be >= 1");
  need(c.policy.embed >= 1 && c.policy.embed <= 64, "policy.embed must lie in [1, 64]");
  need(c.policy.hidden >= 1 && c.policy.hidden <= 64, "policy.hidden must lie in [1, 64]");
  need(c.policy.init_std >= 0.0, "policy.init_std must be >= 0");
  need(c.sft.num_traces >= 1, "sft.num_traces must be >= 1");
  need(c.sft.steps >= 0, "sft.steps must be >= 0");
  need(c.sft.batch_size >= 1, "sft.batch_size must be >= 1");
  need(c.sft.lr >= 0.0, "sft.lr must be >= 0");
  need(c.rm_data.num_prompts >= 1, "rm_data.num_prompts must be >= 1");
  need(c.rm_data.rollouts_per_prompt >= 2, "rm_data.rollouts_per_prompt must be >= 2");
  need(c.rm_data.temperature > 0.0, "rm_data.temperature must be > 0");
  need(c.rm.beta_ipvrm > 0.0, "rm.beta_ipvrm must be > 0");
  need(c.rm.beta_baseline > 0.0, "rm.beta_baseline must be > 0");
  need(c.rm.margin >= 0.0, "rm.margin must be >= 0");
  need(c.rm.epochs >= 0, "rm.epochs must be >= 0");
  need(c.rm.batch_size >= 1, "rm.batch_size must be >= 1");
  need(c.rm.lr >= 0.0, "rm.lr must be >= 0");
  need(c.rl.iterations >= 0, "rl.iterations must be >= 0");
  need(c.rl.eval_rollouts >= 1, "rl.eval_rollouts must be >= 1");
  need(c.rl.online.lr >= 0.0, "rl.online.lr must be >= 0");
  for (const auto& s : c.rl.ppo.violations()) v.push_back("rl." + s);
  need(!c.eval.bon_n.empty(), "eval.bon_n must list at least one N");
  for (int n : c.eval.bon_n) need(n >= 1, "eval.bon_n entries must be >= 1");
  need(c.eval.bon_prompts >= 1, "eval.bon_prompts must be >= 1");
  need(c.eval.bon_score == "auto" || c.eval.bon_score == "vbar" || c.eval.bon_score == "total",
       "eval.bon_score must be auto, vbar or total");
  need(c.eval.threshold > 0.0 && c.eval.threshold < 1.0, "eval.threshold must lie in (0, 1)");
  need(c.eval.localization_cases >= 2, "eval.localization_cases must be >= 2");
  need(c.eval.step_size >= 1, "eval.step_size must be >= 1");
  need(c.eval.p_err > 0.0 && c.eval.p_err < 1.0, "eval.p_err must lie in (0, 1)");
  need(c.eval.td_branches >= 1, "eval.td_branches must be >= 1");
  need(c.eval.td_rollouts_per_branch >= 1, "eval.td_rollouts_per_branch must be >= 1");
  need(c.eval.td_top_k >= 1, "eval.td_top_k must be >= 1");
  need(c.eval.candidate_prompts >= 1, "eval.candidate_prompts must be >= 1");
  return v;
}

void validate(const ExperimentConfig& cfg) {
  const auto v = violations(cfg);
  if (v.empty()) return;
  std::string msg = "invalid config:";
  for (const auto& s : v) msg += "\n  - " + s;
  throw ConfigError(msg);
}

env::Prompt base_prompt(const EnvConfig& e) {
  env::Prompt p;
  p.kind = e.kind;
  if (e.kind == env::EnvKind::kModSum) {
    p.modulus = e.modsum_modulus;
    p.digits = e.modsum_digits;
    p.horizon = e.modsum_horizon;
  } else {
    p.horizon = e.bitbudget_horizon;
    p.target = e.bitbudget_target_min;
  }
  return p;
}

distrl::PromptSampler prompt_sampler(const EnvConfig& e) {
  const env::Prompt base = base_prompt(e);
  if (e.kind == env::EnvKind::kModSum) {
    return [base](Rng& rng) {
      env::Prompt p = base;
      p.target = rng.uniform_int(0, p.modulus - 1);
      return p;
    };
  }
  const int lo = e.bitbudget_target_min, hi = e.bitbudget_target_max;
  return [base, lo, hi](Rng& rng) {
    env::Prompt p = base;
    p.target = rng.uniform_int(lo, hi);
    return p;
  };
}

std::vector<env::Prompt> all_prompts(const EnvConfig& e) {
  std::vector<env::Prompt> out;
  env::Prompt p = base_prompt(e);
  const int lo = e.kind == env::EnvKind::kModSum ? 0 : e.bitbudget_target_min;
  const int hi = e.kind == env::EnvKind::kModSum ? e.modsum_modulus - 1 : e.bitbudget_target_max;
  for (int t = lo; t <= hi; ++t) {
    p.target = t;
    out.push_back(p);
  }
  return out;
}

policy::Architecture architecture(const ExperimentConfig& cfg) {
  env::Prompt p = base_prompt(cfg.env);
  // BitBudget targets can reach the horizon; size the one-hot for all of them.
  if (p.kind == env::EnvKind::kBitBudget) p.target = p.horizon;
  return policy::architecture_for(p, cfg.policy.context, cfg.policy.embed, cfg.policy.hidden);
}

distrl::TrainConfig train_config(const ExperimentConfig& cfg) {
  distrl::TrainConfig t;
  t.method = cfg.rl.method;
  t.ppo = cfg.rl.ppo;
  t.rm.method = cfg.rm.method;
  t.rm.flags = {cfg.rl.online.adb, cfg.rl.online.dlw};
  t.rm.frozen = cfg.rl.online.frozen;
  t.rm.lr = cfg.rl.online.lr;
  t.rm.beta = cfg.rm.beta();
  t.rm.margin = cfg.rm.margin;
  return t;
}

eval::BonScore bon_score(const ExperimentConfig& cfg) {
  if (cfg.eval.bon_score == "auto") {
    return reward::is_ipvrm(cfg.rm.method) ? eval::BonScore::kVbar : eval::BonScore::kTotal;
  }
  return eval::bon_score_from_string(cfg.eval.bon_score);
}

}  // namespace ipvrm::config
