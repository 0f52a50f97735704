#include "ipvrm/pipeline.hpp"

#include <algorithm>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <map>
#include <set>
#include <sstream>

#include "json.hpp"

#include "ipvrm/error.hpp"
#include "ipvrm/eval.hpp"
#include "ipvrm/implicit_reward.hpp"
#include "ipvrm/parallel.hpp"
#include "ipvrm/stats.hpp"

namespace ipvrm::pipeline {

namespace fs = std::filesystem;
using nlohmann::ordered_json;

namespace {

constexpr std::pair<Stage, const char*> kStageNames[] = {
    {Stage::kSft, "sft"},           {Stage::kRmData, "rm-data"},     {Stage::kTrainRm, "train-rm"},
    {Stage::kTrainRl, "train-rl"},  {Stage::kEvalBon, "eval-bon"},   {Stage::kEvalSteps, "eval-steps"},
    {Stage::kEvalTd, "eval-td"},    {Stage::kReport, "report"},
};

std::string fmt(double v) {
  char buf[64];
  std::snprintf(buf, sizeof(buf), "%.10g", v);
  return buf;
}

std::string fmt(const std::optional<double>& v) { return v ? fmt(*v) : ""; }

ordered_json opt_json(const std::optional<double>& v) { return v ? ordered_json(*v) : ordered_json(nullptr); }

void ensure_dir(const std::string& dir) {
  std::error_code ec;
  fs::create_directories(dir, ec);
  if (ec) throw IoError("cannot create directory '" + dir + "': " + ec.message());
}

std::ofstream open_out(const std::string& path) {
  std::ofstream f(path, std::ios::binary | std::ios::trunc);
  if (!f) throw IoError("cannot open '" + path + "' for writing");
  return f;
}

std::vector<std::string> read_lines(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw IoError("cannot open '" + path + "'");
  std::vector<std::string> lines;
  std::string line;
  while (std::getline(f, line)) {
    if (!line.empty()) lines.push_back(line);
  }
  return lines;
}

ordered_json read_json(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw IoError("cannot open '" + path + "'");
  try {
    return ordered_json::parse(f);
  } catch (const nlohmann::json::exception& e) {
    throw IoError("malformed JSON in '" + path + "': " + e.what());
  }
}

void require(const std::string& path, const char* stage, const char* prior) {
  if (!fs::exists(path)) {
    throw StageDependencyError(std::string(stage) + " needs " + path + "; run the '" + prior +
                               "' stage first");
  }
}

void update_summary(const Paths& paths, const std::string& section, ordered_json body) {
  ordered_json root = fs::exists(paths.summary()) ? read_json(paths.summary()) : ordered_json::object();
  root[section] = std::move(body);
  open_out(paths.summary()) << root.dump(2) << "\n";
}

void write_config(const Paths& paths, const config::ExperimentConfig& cfg) {
  ensure_dir(paths.root);
  ensure_dir(paths.root + "/checkpoints");
  ensure_dir(paths.reports());
  config::save(cfg, paths.config());
}

ordered_json prompt_json(const env::Prompt& p) {
  return {{"env", env::to_string(p.kind)},
          {"target", p.target},
          {"horizon", p.horizon},
          {"modulus", p.modulus},
          {"digits", p.digits}};
}

env::Prompt prompt_from_json(const ordered_json& j) {
  env::Prompt p;
  p.kind = env::env_kind_from_string(j.at("env").get<std::string>());
  p.target = j.at("target").get<int>();
  p.horizon = j.at("horizon").get<int>();
  p.modulus = j.at("modulus").get<int>();
  p.digits = j.at("digits").get<int>();
  env::validate(p);
  return p;
}

std::vector<env::Prompt> sample_prompts(const config::EnvConfig& e, int count, Rng& rng) {
  const auto sampler = config::prompt_sampler(e);
  std::vector<env::Prompt> out;
  out.reserve(count);
  for (int i = 0; i < count; ++i) out.push_back(sampler(rng));
  return out;
}

void shuffle(std::vector<int>& xs, Rng& rng) {
  for (int i = static_cast<int>(xs.size()) - 1; i > 0; --i) {
    std::swap(xs[i], xs[rng.uniform_int(0, i)]);
  }
}

policy::PolicySnapshot load_role(const std::string& path, const policy::Architecture& arch) {
  policy::PolicySnapshot s = policy::load_checkpoint(path);
  if (!(s.arch == arch)) {
    throw ConfigError("checkpoint '" + path + "' does not match the configured architecture");
  }
  return s;
}

RmData load_rm_data(const std::string& path) {
  RmData d;
  for (const auto& line : read_lines(path)) d.groups.push_back(rm_group_from_json_line(line));
  d.sampled_prompts = static_cast<int>(d.groups.size());
  return d;
}

// --- stages -------------------------------------------------------------------

void stage_sft(const config::ExperimentConfig& cfg, const Paths& paths) {
  std::vector<SftLogEntry> log;
  const auto sft = train_sft(cfg, &log);
  policy::save_checkpoint(sft, paths.sft_ckpt());
  auto f = open_out(paths.sft_log());
  for (const auto& e : log) f << ordered_json{{"step", e.step}, {"nll", e.nll}}.dump() << "\n";
  const auto prompts = config::all_prompts(cfg.env);
  update_summary(paths, "sft",
                 {{"steps", cfg.sft.steps},
                  {"final_nll", log.empty() ? 0.0 : log.back().nll},
                  {"exact_acc", exact_accuracy(sft, prompts)}});
}

void stage_rm_data(const config::ExperimentConfig& cfg, const Paths& paths) {
  require(paths.sft_ckpt(), "rm-data", "sft");
  const auto sft = load_role(paths.sft_ckpt(), config::architecture(cfg));
  const RmData data = generate_rm_data(cfg, sft);
  auto f = open_out(paths.rm_data());
  for (const auto& g : data.groups) f << to_json_line(g) << "\n";
  update_summary(paths, "rm_data",
                 {{"sampled_prompts", data.sampled_prompts},
                  {"mixed_prompts", static_cast<int>(data.groups.size())},
                  {"rollouts_per_prompt", cfg.rm_data.rollouts_per_prompt}});
}

void stage_train_rm(const config::ExperimentConfig& cfg, const Paths& paths) {
  require(paths.sft_ckpt(), "train-rm", "sft");
  require(paths.rm_data(), "train-rm", "rm-data");
  const auto sft = load_role(paths.sft_ckpt(), config::architecture(cfg));
  const RmData data = load_rm_data(paths.rm_data());
  std::vector<RmLogEntry> log;
  const auto rm = train_rm(cfg, sft, data, &log);
  policy::save_checkpoint(rm, paths.rm_ckpt());
  auto f = open_out(paths.rm_loss());
  double last_epoch = 0.0;
  int last_count = 0;
  for (const auto& e : log) {
    f << ordered_json{{"epoch", e.epoch}, {"step", e.step}, {"loss", e.loss}}.dump() << "\n";
    if (e.epoch == log.back().epoch) {
      last_epoch += e.loss;
      ++last_count;
    }
  }
  update_summary(paths, "train_rm",
                 {{"method", reward::to_string(cfg.rm.method)},
                  {"beta", cfg.rm.beta()},
                  {"steps", static_cast<int>(log.size())},
                  {"final_epoch_loss", last_count ? last_epoch / last_count : 0.0}});
}

void stage_train_rl(const config::ExperimentConfig& cfg, const Paths& paths) {
  require(paths.sft_ckpt(), "train-rl", "sft");
  require(paths.rm_ckpt(), "train-rl", "train-rm");
  const auto arch = config::architecture(cfg);
  const auto sft = load_role(paths.sft_ckpt(), arch);
  const auto rm = load_role(paths.rm_ckpt(), arch);
  const auto tcfg = config::train_config(cfg);
  const auto sampler = config::prompt_sampler(cfg.env);

  distrl::TrainState state{arch, sft.params, rm.params, 0};
  Rng rng(derive_seed(cfg.seed, "train-rl"));
  auto f = open_out(paths.metrics());
  int aborted = 0;
  distrl::IterationMetrics last;
  for (int it = 0; it < cfg.rl.iterations; ++it) {
    last = distrl::train_iteration(state, sft, sampler, tcfg, rng, cfg.workers);
    aborted += last.aborted ? 1 : 0;
    f << distrl::to_json_line(last) << "\n";
    f.flush();
  }
  const auto student = policy::snapshot(arch, state.student, policy::Role::kStudent);
  const auto rm_online = policy::snapshot(arch, state.rm, policy::Role::kRewardModel);
  policy::save_checkpoint(student, paths.policy_ckpt());
  policy::save_checkpoint(rm_online, paths.rm_online_ckpt());

  Rng eval_rng(derive_seed(cfg.seed, "train-rl.eval"));
  const auto prompts = sample_prompts(cfg.env, cfg.rl.eval_rollouts, eval_rng);
  const auto rollouts = policy::sample_trajectories(arch, state.student, prompts, {}, eval_rng);
  const auto all = config::all_prompts(cfg.env);
  update_summary(paths, "train_rl",
                 {{"method", distrl::to_string(cfg.rl.method)},
                  {"iterations", cfg.rl.iterations},
                  {"aborted_iterations", aborted},
                  {"last_batch_verifier_acc", last.verifier_acc},
                  {"final_exact_acc", exact_accuracy(student, all)},
                  {"final_rm_score", eval::rm_score_metric(rm, sft, rollouts)},
                  {"final_rm_score_online", eval::rm_score_metric(rm_online, sft, rollouts)}});
}

void stage_eval_bon(const config::ExperimentConfig& cfg, const Paths& paths) {
  require(paths.sft_ckpt(), "eval-bon", "sft");
  require(paths.rm_ckpt(), "eval-bon", "train-rm");
  const auto arch = config::architecture(cfg);
  const auto sft = load_role(paths.sft_ckpt(), arch);
  const auto rm = load_role(paths.rm_ckpt(), arch);
  const auto score = config::bon_score(cfg);
  Rng prompt_rng(derive_seed(cfg.seed, "eval-bon.prompts"));
  const auto prompts = sample_prompts(cfg.env, cfg.eval.bon_prompts, prompt_rng);

  auto f = open_out(paths.reports() + "/bon.csv");
  f << "n,prompt_index,target,picked,picked_outcome,num_correct,picked_score\n";
  ordered_json summary = {{"score", eval::to_string(score)}};
  for (int n : cfg.eval.bon_n) {
    Rng rng(derive_seed(derive_seed(cfg.seed, "eval-bon"), static_cast<std::uint64_t>(n)));
    const auto res = eval::bon_rerank(rm, sft, cfg.rm.beta(), score, sft, prompts, n, rng);
    for (const auto& c : res.cases) {
      f << n << "," << c.prompt_index << "," << prompts[c.prompt_index].target << "," << c.picked
        << "," << c.picked_outcome << "," << c.num_correct << "," << fmt(c.picked_score) << "\n";
    }
    summary["acc_n" + std::to_string(n)] = res.accuracy;
  }
  update_summary(paths, "eval_bon", std::move(summary));
}

void stage_eval_steps(const config::ExperimentConfig& cfg, const Paths& paths) {
  if (cfg.env.kind != env::EnvKind::kBitBudget) {
    throw ConfigError("eval-steps needs env.name = bitbudget");
  }
  require(paths.sft_ckpt(), "eval-steps", "sft");
  require(paths.rm_ckpt(), "eval-steps", "train-rm");
  const auto arch = config::architecture(cfg);
  const auto sft = load_role(paths.sft_ckpt(), arch);
  const auto rm = load_role(paths.rm_ckpt(), arch);

  env::LocalizationConfig lc;
  lc.horizon = cfg.env.bitbudget_horizon;
  lc.target_min = cfg.env.bitbudget_target_min;
  lc.target_max = cfg.env.bitbudget_target_max;
  lc.step_size = cfg.eval.step_size;
  lc.p_err = cfg.eval.p_err;
  Rng rng(derive_seed(cfg.seed, "eval-steps"));
  const auto base = policy::as_prefix_policy(sft);
  std::vector<env::LocalizationCase> cases;
  for (int i = 0; i < cfg.eval.localization_cases; ++i) cases.push_back(env::make_localization_case(lc, base, rng));
  {
    auto f = open_out(paths.localization_cases());
    for (const auto& c : cases) f << env::to_json_line(c) << "\n";
  }

  const double beta = cfg.rm.beta();
  const auto process = eval::evaluate_localization(rm, sft, cases, beta, eval::Protocol::kProcess,
                                                   cfg.eval.threshold);
  const auto prefix = eval::evaluate_localization(rm, sft, cases, beta, eval::Protocol::kPrefix,
                                                  cfg.eval.threshold);
  auto f = open_out(paths.reports() + "/localization.csv");
  f << "case,target,label,pred_process,pred_prefix\n";
  auto cell = [](const std::optional<int>& v) { return v ? std::to_string(*v) : std::string(); };
  for (std::size_t i = 0; i < cases.size(); ++i) {
    f << i << "," << cases[i].trajectory.prompt.target << "," << cell(cases[i].first_error_step) << ","
      << cell(process.predictions[i]) << "," << cell(prefix.predictions[i]) << "\n";
  }
  const auto& chosen = cfg.eval.protocol == eval::Protocol::kProcess ? process.f1 : prefix.f1;
  update_summary(paths, "eval_steps",
                 {{"protocol", eval::to_string(cfg.eval.protocol)},
                  {"f1", chosen.f1},
                  {"acc_err", chosen.acc_err},
                  {"acc_ok", chosen.acc_ok},
                  {"f1_process", process.f1.f1},
                  {"f1_prefix", prefix.f1.f1},
                  {"num_err", chosen.num_err},
                  {"num_ok", chosen.num_ok}});
}

void stage_eval_td(const config::ExperimentConfig& cfg, const Paths& paths) {
  require(paths.sft_ckpt(), "eval-td", "sft");
  require(paths.rm_ckpt(), "eval-td", "train-rm");
  const auto arch = config::architecture(cfg);
  const auto sft = load_role(paths.sft_ckpt(), arch);
  const auto rm = load_role(paths.rm_ckpt(), arch);

  eval::TdFidelityOptions opts;
  opts.num_branches = cfg.eval.td_branches;
  opts.rollouts_per_branch = cfg.eval.td_rollouts_per_branch;
  opts.top_k = cfg.eval.td_top_k;
  opts.beta = cfg.rm.beta();
  Rng rng(derive_seed(cfg.seed, "eval-td"));
  const auto td = eval::td_fidelity(rm, sft, config::prompt_sampler(cfg.env), opts, rng);
  {
    auto f = open_out(paths.reports() + "/td_fidelity.csv");
    f << "branch,t,candidate,td,value,mc_success,mc_total,exact_prob\n";
    for (const auto& r : td.records) {
      f << r.branch << "," << r.t << "," << r.candidate << "," << fmt(r.td) << "," << fmt(r.value) << ","
        << r.mc_success << "," << r.mc_total << "," << fmt(r.exact_prob) << "\n";
    }
  }

  // Candidate-set sweep on fresh behavior rollouts, shared across thresholds.
  Rng cand_rng(derive_seed(cfg.seed, "eval-td.candidates"));
  const auto prompts = sample_prompts(cfg.env, cfg.eval.candidate_prompts, cand_rng);
  const auto rollouts = policy::sample_trajectories(arch, sft.params, prompts, {}, cand_rng);
  std::set<double> thresholds = {0.05, 0.10, 0.20, cfg.rl.ppo.p_min};
  ordered_json cand = ordered_json::array();
  auto f = open_out(paths.reports() + "/candidates.csv");
  f << "p_min,avg_size,avg_mass,timesteps\n";
  for (double p : thresholds) {
    const auto cs = eval::candidate_stats(sft, rollouts, p);
    f << fmt(p) << "," << fmt(cs.avg_size) << "," << fmt(cs.avg_mass) << "," << cs.timesteps << "\n";
    cand.push_back({{"p_min", p}, {"avg_size", cs.avg_size}, {"avg_mass", cs.avg_mass}});
  }
  update_summary(paths, "eval_td",
                 {{"mc_pearson", opt_json(td.mc.pearson)},
                  {"mc_auc_abs", opt_json(td.mc.auc_abs)},
                  {"mc_auc_signed", opt_json(td.mc.auc_signed)},
                  {"exact_pearson", opt_json(td.exact.pearson)},
                  {"exact_auc_abs", opt_json(td.exact.auc_abs)},
                  {"exact_auc_signed", opt_json(td.exact.auc_signed)},
                  {"pearson_td_exact_prob", opt_json(td.pearson_td_exact_prob)},
                  {"exact_count", td.exact_count},
                  {"candidates", cand}});
}

std::string sanitize(const std::string& s) {
  std::string out = s;
  for (char& c : out) {
    if (!std::isalnum(static_cast<unsigned char>(c)) && c != '-' && c != '_') c = '_';
  }
  return out;
}

void stage_report(const config::ExperimentConfig& cfg, const Paths& paths) {
  if (cfg.report_runs.empty()) throw ConfigError("report needs at least one entry in report.runs");
  ensure_dir(paths.reports());
  const auto rows = aggregate_runs(cfg.report_runs);
  {
    auto f = open_out(paths.reports() + "/report.csv");
    f << "method,metric,runs,mean,std\n";
    for (const auto& r : rows) {
      f << r.method << "," << r.metric << "," << r.count << "," << fmt(r.mean) << "," << fmt(r.std) << "\n";
    }
  }

  // Per-method curves averaged over runs, truncated to the shortest run.
  static const char* kCurveKeys[] = {"verifier_acc", "rm_score",      "tok_loss", "dist_loss",
                                     "rm_loss",      "cand_avg_size", "cand_mass"};
  std::map<std::string, std::vector<std::vector<ordered_json>>> curves;
  for (const auto& dir : cfg.report_runs) {
    const Paths rp{dir};
    if (!fs::exists(rp.metrics())) continue;
    std::vector<ordered_json> recs;
    for (const auto& line : read_lines(rp.metrics())) recs.push_back(ordered_json::parse(line));
    curves[method_label(config::load(rp.config()))].push_back(std::move(recs));
  }
  ordered_json written = ordered_json::array();
  for (const auto& [method, runs] : curves) {
    std::size_t len = runs.front().size();
    for (const auto& r : runs) len = std::min(len, r.size());
    const std::string path = paths.reports() + "/curve_" + sanitize(method) + ".csv";
    auto f = open_out(path);
    f << "iter";
    for (const char* k : kCurveKeys) f << "," << k;
    f << "\n";
    for (std::size_t i = 0; i < len; ++i) {
      f << i + 1;
      for (const char* k : kCurveKeys) {
        double s = 0.0;
        for (const auto& r : runs) s += r[i].value(k, 0.0);
        f << "," << fmt(s / static_cast<double>(runs.size()));
      }
      f << "\n";
    }
    written.push_back(path);
  }
  update_summary(paths, "report", {{"runs", cfg.report_runs.size()}, {"curves", written}});
}

}  // namespace

std::string to_string(Stage s) {
  for (const auto& [stage, name] : kStageNames) {
    if (stage == s) return name;
  }
  throw ContractError("unknown stage");
}

Stage stage_from_string(const std::string& name) {
  for (const auto& [stage, n] : kStageNames) {
    if (name == n) return stage;
  }
  throw ConfigError("unknown stage '" + name +
                    "' (expected sft, rm-data, train-rm, train-rl, eval-bon, eval-steps, eval-td or report)");
}

void run(Stage stage, const config::ExperimentConfig& cfg) {
  config::validate(cfg);
  const Paths paths{cfg.out_dir};
  if (stage != Stage::kReport) write_config(paths, cfg);
  switch (stage) {
    case Stage::kSft: return stage_sft(cfg, paths);
    case Stage::kRmData: return stage_rm_data(cfg, paths);
    case Stage::kTrainRm: return stage_train_rm(cfg, paths);
    case Stage::kTrainRl: return stage_train_rl(cfg, paths);
    case Stage::kEvalBon: return stage_eval_bon(cfg, paths);
    case Stage::kEvalSteps: return stage_eval_steps(cfg, paths);
    case Stage::kEvalTd: return stage_eval_td(cfg, paths);
    case Stage::kReport: return stage_report(cfg, paths);
  }
}

// --- building blocks -------------------------------------------------------------

policy::PolicySnapshot train_sft(const config::ExperimentConfig& cfg, std::vector<SftLogEntry>* log) {
  const auto arch = config::architecture(cfg);
  Rng init_rng(derive_seed(cfg.seed, "sft.init"));
  ad::ParamVector params = policy::init_params(arch, init_rng, cfg.policy.init_std);

  Rng data_rng(derive_seed(cfg.seed, "sft.data"));
  const auto prompts = sample_prompts(cfg.env, cfg.sft.num_traces, data_rng);
  std::vector<env::Trajectory> traces;
  traces.reserve(prompts.size());
  for (const auto& p : prompts) traces.push_back(env::sample_teacher_trajectory(p, data_rng));

  Rng batch_rng(derive_seed(cfg.seed, "sft.batches"));
  const int n = static_cast<int>(traces.size());
  std::vector<env::Trajectory> batch(std::min(cfg.sft.batch_size, n));
  for (int step = 1; step <= cfg.sft.steps; ++step) {
    for (auto& tr : batch) tr = traces[batch_rng.uniform_int(0, n - 1)];
    const auto res = ad::eval_with_grad(
        [&](ad::Tape& tape) { return policy::nll_graph(tape, arch, batch); }, params);
    params.axpy(-cfg.sft.lr, res.grad);
    if (log && (step % 10 == 0 || step == cfg.sft.steps)) log->push_back({step, res.loss});
  }
  policy::round_to_float(params);
  return policy::snapshot(arch, params, policy::Role::kSft);
}

RmData generate_rm_data(const config::ExperimentConfig& cfg, const policy::PolicySnapshot& sft) {
  Rng prompt_rng(derive_seed(cfg.seed, "rm-data.prompts"));
  const auto prompts = sample_prompts(cfg.env, cfg.rm_data.num_prompts, prompt_rng);
  const std::uint64_t base = derive_seed(cfg.seed, "rm-data.rollouts");
  const int k = cfg.rm_data.rollouts_per_prompt;
  policy::SampleOptions opts;
  opts.temperature = cfg.rm_data.temperature;

  std::vector<RmGroup> all(prompts.size());
  parallel_for(static_cast<int>(prompts.size()), cfg.workers, [&](int begin, int end) {
    for (int i = begin; i < end; ++i) {
      Rng rng(derive_seed(base, static_cast<std::uint64_t>(i)));
      const std::vector<env::Prompt> repeated(k, prompts[i]);
      all[i].prompt = prompts[i];
      all[i].rollouts = policy::sample_trajectories(sft.arch, sft.params, repeated, opts, rng);
    }
  });

  RmData data;
  data.sampled_prompts = static_cast<int>(prompts.size());
  for (auto& g : all) {
    for (int j = 0; j < k; ++j) {
      if (g.rollouts[j].outcome == 1 && g.win < 0) g.win = j;
      if (g.rollouts[j].outcome == 0 && g.lose < 0) g.lose = j;
    }
    if (g.win >= 0 && g.lose >= 0) data.groups.push_back(std::move(g));
  }
  return data;
}

std::string to_json_line(const RmGroup& g) {
  ordered_json j;
  j["prompt"] = prompt_json(g.prompt);
  ordered_json rs = ordered_json::array();
  for (const auto& tr : g.rollouts) rs.push_back({{"tokens", tr.tokens}, {"outcome", tr.outcome}});
  j["rollouts"] = std::move(rs);
  j["pair"] = {g.win, g.lose};
  return j.dump();
}

RmGroup rm_group_from_json_line(const std::string& line) {
  RmGroup g;
  try {
    const auto j = ordered_json::parse(line);
    g.prompt = prompt_from_json(j.at("prompt"));
    for (const auto& r : j.at("rollouts")) {
      env::Trajectory tr;
      tr.prompt = g.prompt;
      tr.tokens = r.at("tokens").get<std::vector<int>>();
      tr.outcome = env::verify(g.prompt, tr.tokens);
      if (tr.outcome != r.at("outcome").get<int>()) throw IoError("rm data outcome disagrees with the verifier");
      g.rollouts.push_back(std::move(tr));
    }
    g.win = j.at("pair").at(0).get<int>();
    g.lose = j.at("pair").at(1).get<int>();
  } catch (const nlohmann::json::exception& e) {
    throw IoError(std::string("malformed rm data line: ") + e.what());
  }
  const int n = static_cast<int>(g.rollouts.size());
  if (g.win < 0 || g.win >= n || g.lose < 0 || g.lose >= n || g.rollouts[g.win].outcome != 1 ||
      g.rollouts[g.lose].outcome != 0) {
    throw IoError("rm data pair does not index a correct and an incorrect rollout");
  }
  return g;
}

policy::PolicySnapshot train_rm(const config::ExperimentConfig& cfg, const policy::PolicySnapshot& sft,
                                const RmData& data, std::vector<RmLogEntry>* log) {
  const auto method = cfg.rm.method;
  const double beta = cfg.rm.beta();
  const bool pairwise = method == reward::RmMethod::kDpo;
  ad::ParamVector params = sft.params;

  std::vector<env::Trajectory> trs, win, lose;
  std::vector<int> labels;
  for (const auto& g : data.groups) {
    if (pairwise) {
      win.push_back(g.rollouts[g.win]);
      lose.push_back(g.rollouts[g.lose]);
      continue;
    }
    for (const auto& tr : g.rollouts) {
      trs.push_back(tr);
      labels.push_back(tr.outcome);
    }
  }
  const int n = static_cast<int>(pairwise ? win.size() : trs.size());
  if (n == 0) throw ContractError("train-rm: the rm data has no mixed-outcome prompts");

  Rng rng(derive_seed(cfg.seed, "train-rm"));
  std::vector<int> order(n);
  int step = 0;
  for (int epoch = 1; epoch <= cfg.rm.epochs; ++epoch) {
    for (int i = 0; i < n; ++i) order[i] = i;
    shuffle(order, rng);
    for (int begin = 0; begin < n; begin += cfg.rm.batch_size) {
      const int end = std::min(n, begin + cfg.rm.batch_size);
      std::vector<env::Trajectory> a, b;
      std::vector<int> y;
      for (int i = begin; i < end; ++i) {
        if (pairwise) {
          a.push_back(win[order[i]]);
          b.push_back(lose[order[i]]);
        } else {
          a.push_back(trs[order[i]]);
          y.push_back(labels[order[i]]);
        }
      }
      const auto res = ad::eval_with_grad(
          [&](ad::Tape& tape) {
            const ad::Var va = reward::prefix_values_graph(tape, sft.arch, sft, a, beta);
            if (pairwise) return reward::dpo_loss(va, reward::prefix_values_graph(tape, sft.arch, sft, b, beta));
            if (method == reward::RmMethod::kImplicitPrm) return reward::implicit_prm_loss(va, y);
            return reward::ipvrm_loss(va, y, cfg.rm.margin, reward::weighting_of(method));
          },
          params);
      params.axpy(-cfg.rm.lr, res.grad);
      if (log) log->push_back({epoch, ++step, res.loss});
    }
  }
  policy::round_to_float(params);
  return policy::snapshot(sft.arch, params, policy::Role::kRewardModel);
}

double exact_accuracy(const policy::PolicySnapshot& policy, std::span<const env::Prompt> prompts) {
  if (prompts.empty()) return 0.0;
  const auto batch = policy::as_batch_policy(policy);
  double total = 0.0;
  for (const auto& p : prompts) total += env::SuccessTable(batch, env::reset(p)).root_prob();
  return total / static_cast<double>(prompts.size());
}

std::string method_label(const config::ExperimentConfig& cfg) {
  std::string label = distrl::to_string(cfg.rl.method) + "/" + reward::to_string(cfg.rm.method);
  const auto& o = cfg.rl.online;
  if (o.frozen) return label + "+frozen";
  if (!o.adb && !o.dlw) return label + "+naive";
  if (!o.adb) return label + "+dlw";
  if (!o.dlw) return label + "+adb";
  return label;
}

namespace {

// Leaves of a JSON object keyed by dotted paths.
void flatten(const ordered_json& j, const std::string& prefix, std::map<std::string, ordered_json>& out) {
  if (j.is_object()) {
    for (auto it = j.begin(); it != j.end(); ++it) {
      flatten(it.value(), prefix.empty() ? it.key() : prefix + "." + it.key(), out);
    }
  } else {
    out[prefix] = j;
  }
}

}  // namespace

std::vector<MetricRow> aggregate_runs(const std::vector<std::string>& run_dirs) {
  if (run_dirs.empty()) throw ContractError("aggregate_runs: no runs");
  std::map<std::string, ordered_json> reference;
  std::set<std::string> differing;
  std::map<std::string, std::map<std::string, std::vector<double>>> values;
  for (std::size_t r = 0; r < run_dirs.size(); ++r) {
    const Paths p{run_dirs[r]};
    require(p.config(), "report", "sft");
    require(p.summary(), "report", "sft");
    const auto cfg = config::load(p.config());
    const auto tree = ordered_json::parse(config::to_json(cfg));
    std::map<std::string, ordered_json> settings;
    flatten(tree.at("env"), "env", settings);
    flatten(tree.at("eval"), "eval", settings);
    if (r == 0) {
      reference = settings;
    } else {
      for (const auto& [k, v] : settings) {
        if (reference.at(k) != v) differing.insert(k);
      }
    }
    std::map<std::string, ordered_json> metrics;
    flatten(read_json(p.summary()), "", metrics);
    auto& bucket = values[method_label(cfg)];
    for (const auto& [k, v] : metrics) {
      if (v.is_number()) bucket[k].push_back(v.get<double>());
    }
  }
  if (!differing.empty()) {
    std::string msg = "runs do not share eval settings; differing keys:";
    for (const auto& k : differing) msg += " " + k;
    throw ContractError(msg);
  }
  std::vector<MetricRow> rows;
  for (const auto& [method, metrics] : values) {
    for (const auto& [metric, xs] : metrics) {
      rows.push_back({method, metric, static_cast<int>(xs.size()), stats::mean(xs), stats::population_std(xs)});
    }
  }
  return rows;
}

}  // namespace ipvrm::pipeline
