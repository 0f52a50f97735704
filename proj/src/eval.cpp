#include "ipvrm/eval.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "ipvrm/autodiff.hpp"
#include "ipvrm/error.hpp"
#include "ipvrm/implicit_reward.hpp"
#include "ipvrm/stats.hpp"

namespace ipvrm::eval {

std::string to_string(BonScore s) { return s == BonScore::kVbar ? "vbar" : "total"; }

BonScore bon_score_from_string(const std::string& name) {
  if (name == "vbar") return BonScore::kVbar;
  if (name == "total") return BonScore::kTotal;
  throw ContractError("unknown best-of-N score '" + name + "' (expected vbar or total)");
}

Scorer rm_scorer(const policy::PolicySnapshot& rm, const policy::PolicySnapshot& ref, double beta,
                 BonScore score) {
  return [&rm, &ref, beta, score](std::span<const env::Trajectory> trs) {
    const auto series = reward::prefix_values(rm, ref, trs, beta);
    std::vector<double> out;
    out.reserve(series.size());
    for (const auto& s : series) out.push_back(score == BonScore::kVbar ? s.vbar(s.horizon()) : s.values.back());
    return out;
  };
}

BonResult bon_rerank(const Scorer& scorer, const policy::PolicySnapshot& sampler,
                     std::span<const env::Prompt> prompts, int n, Rng& rng) {
  if (n < 1) throw ContractError("bon_rerank: N must be >= 1");
  if (prompts.empty()) throw ContractError("bon_rerank: no prompts");
  BonResult res;
  double correct = 0.0;
  for (std::size_t i = 0; i < prompts.size(); ++i) {
    const std::vector<env::Prompt> rep(n, prompts[i]);
    const auto cands = policy::sample_trajectories(sampler.arch, sampler.params, rep, {}, rng);
    const auto scores = scorer(cands);
    if (static_cast<int>(scores.size()) != n) throw ContractError("bon_rerank: scorer returned the wrong count");
    int best = 0;
    for (int k = 1; k < n; ++k) {
      if (scores[k] > scores[best]) best = k;
    }
    BonCase c;
    c.prompt_index = static_cast<int>(i);
    c.picked = best;
    c.picked_outcome = cands[best].outcome;
    c.picked_score = scores[best];
    for (const auto& tr : cands) c.num_correct += tr.outcome;
    correct += c.picked_outcome;
    res.cases.push_back(c);
  }
  res.accuracy = correct / static_cast<double>(prompts.size());
  return res;
}

BonResult bon_rerank(const policy::PolicySnapshot& rm, const policy::PolicySnapshot& ref,
                     double beta, BonScore score, const policy::PolicySnapshot& sampler,
                     std::span<const env::Prompt> prompts, int n, Rng& rng) {
  return bon_rerank(rm_scorer(rm, ref, beta, score), sampler, prompts, n, rng);
}

// --- step localization -----------------------------------------------------------

std::string to_string(Protocol p) { return p == Protocol::kProcess ? "process" : "prefix"; }

Protocol protocol_from_string(const std::string& name) {
  if (name == "process") return Protocol::kProcess;
  if (name == "prefix") return Protocol::kPrefix;
  throw ContractError("unknown scoring protocol '" + name + "' (expected process or prefix)");
}

std::vector<double> StepScoreSeries::scores(Protocol p) const {
  std::vector<double> out;
  out.reserve(steps.size());
  for (const auto& s : steps) out.push_back(p == Protocol::kProcess ? s.process : s.prefix);
  return out;
}

StepScoreSeries step_scores(std::span<const double> log_ratios, int step_size, double beta) {
  if (step_size < 1) throw ContractError("step_scores: step size must be >= 1");
  StepScoreSeries out;
  const int horizon = static_cast<int>(log_ratios.size());
  double prefix = 0.0;
  for (int first = 1; first <= horizon; first += step_size) {
    const int last = std::min(first + step_size - 1, horizon);
    double step = 0.0;
    for (int t = first; t <= last; ++t) step += log_ratios[t - 1];
    prefix += step;
    out.steps.push_back({first, last, ad::sigmoid(beta * step), ad::sigmoid(beta * prefix)});
  }
  return out;
}

StepScoreSeries step_scores(const policy::PolicySnapshot& rm, const policy::PolicySnapshot& ref,
                            const env::Trajectory& tr, int step_size, double beta) {
  policy::check_same_architecture(rm, ref);
  const auto a = policy::sequence_log_prob(rm.arch, rm.params, tr);
  const auto b = policy::sequence_log_prob(ref.arch, ref.params, tr);
  std::vector<double> lr(a.size());
  for (std::size_t i = 0; i < a.size(); ++i) lr[i] = a[i] - b[i];
  return step_scores(lr, step_size, beta);
}

std::optional<int> localize_first_error(std::span<const double> scores, double threshold) {
  if (!(threshold > 0.0 && threshold < 1.0)) throw ContractError("localization threshold must lie in (0, 1)");
  for (std::size_t j = 0; j < scores.size(); ++j) {
    if (scores[j] < threshold) return static_cast<int>(j) + 1;
  }
  return std::nullopt;
}

F1Result localization_f1(std::span<const std::optional<int>> predictions,
                         std::span<const std::optional<int>> labels) {
  if (predictions.size() != labels.size()) throw ContractError("localization_f1: misaligned inputs");
  F1Result r;
  int hit_err = 0, hit_ok = 0;
  for (std::size_t i = 0; i < labels.size(); ++i) {
    if (labels[i]) {
      ++r.num_err;
      if (predictions[i] && *predictions[i] == *labels[i]) ++hit_err;
    } else {
      ++r.num_ok;
      if (!predictions[i]) ++hit_ok;
    }
  }
  if (r.num_err == 0 || r.num_ok == 0) {
    throw ContractError("localization_f1: needs both erroneous and error-free cases");
  }
  r.acc_err = static_cast<double>(hit_err) / r.num_err;
  r.acc_ok = static_cast<double>(hit_ok) / r.num_ok;
  r.f1 = (r.acc_err == 0.0 || r.acc_ok == 0.0) ? 0.0 : 2.0 * r.acc_err * r.acc_ok / (r.acc_err + r.acc_ok);
  return r;
}

LocalizationResult evaluate_localization(const policy::PolicySnapshot& rm,
                                         const policy::PolicySnapshot& ref,
                                         std::span<const env::LocalizationCase> cases, double beta,
                                         Protocol protocol, double threshold) {
  policy::check_same_architecture(rm, ref);
  std::vector<env::Trajectory> trs;
  trs.reserve(cases.size());
  for (const auto& c : cases) trs.push_back(c.trajectory);
  const auto a = policy::token_log_probs(rm.arch, rm.params, trs);
  const auto b = policy::token_log_probs(ref.arch, ref.params, trs);
  LocalizationResult res;
  std::vector<std::optional<int>> labels;
  std::size_t k = 0;
  for (const auto& c : cases) {
    const std::size_t len = c.trajectory.tokens.size();
    std::vector<double> lr(len);
    for (std::size_t t = 0; t < len; ++t, ++k) lr[t] = a[k] - b[k];
    const auto series = step_scores(lr, c.step_size, beta);
    res.predictions.push_back(localize_first_error(series.scores(protocol), threshold));
    labels.push_back(c.first_error_step);
  }
  res.f1 = localization_f1(res.predictions, labels);
  return res;
}

// --- RM score ------------------------------------------------------------------

double rm_score_metric(const policy::PolicySnapshot& rm, const policy::PolicySnapshot& ref,
                       std::span<const env::Trajectory> trajectories) {
  if (trajectories.empty()) throw ContractError("rm_score_metric: no trajectories");
  const auto series = reward::prefix_values(rm, ref, trajectories, 1.0);
  double acc = 0.0;
  for (std::size_t i = 0; i < series.size(); ++i) {
    acc += series[i].values.back() / static_cast<double>(trajectories[i].tokens.size());
  }
  return acc / static_cast<double>(trajectories.size());
}

// --- candidate sets ------------------------------------------------------------

CandidateStats candidate_stats(const policy::PolicySnapshot& behavior,
                               std::span<const env::Trajectory> rollouts, double p_min) {
  const auto states = policy::batch_states(rollouts);
  if (states.empty()) throw ContractError("candidate_stats: no timesteps");
  const ad::Matrix pr = policy::probs(behavior, states);
  CandidateStats out;
  for (int r = 0; r < pr.rows(); ++r) {
    for (int a = 0; a < pr.cols(); ++a) {
      if (pr(r, a) >= p_min) {
        out.avg_size += 1.0;
        out.avg_mass += pr(r, a);
      }
    }
  }
  out.timesteps = pr.rows();
  out.avg_size /= out.timesteps;
  out.avg_mass /= out.timesteps;
  return out;
}

CandidateStats candidate_stats(const policy::PolicySnapshot& behavior,
                               std::span<const env::Prompt> prompts, double p_min, Rng& rng) {
  const auto rollouts = policy::sample_trajectories(behavior.arch, behavior.params, prompts, {}, rng);
  return candidate_stats(behavior, rollouts, p_min);
}

// --- TD fidelity ---------------------------------------------------------------

FidelityStats fidelity_stats(std::span<const double> td, std::span<const double> value,
                             std::span<const int> labels) {
  if (td.size() != labels.size() || value.size() != labels.size()) {
    throw ContractError("fidelity_stats: misaligned inputs");
  }
  FidelityStats s;
  s.count = static_cast<int>(labels.size());
  std::vector<double> y(labels.begin(), labels.end());
  const auto p = stats::pearson(td, y);
  s.pearson = p.value_or(0.0);
  s.pearson_degenerate = !p.has_value();
  std::vector<double> abs_v(value.size());
  for (std::size_t i = 0; i < value.size(); ++i) abs_v[i] = std::abs(value[i]);
  s.auc_abs = stats::auc(abs_v, labels);
  s.auc_signed = stats::auc(value, labels);
  return s;
}

namespace {

int continue_rollout(const policy::PolicySnapshot& behavior, env::EnvState s, Rng& rng) {
  while (s.t < s.prompt.horizon) {
    const ad::Matrix pr = policy::probs(behavior, std::span<const env::EnvState>(&s, 1));
    s = env::step(s, rng.categorical(pr.row_span(0)));
  }
  return s.statistic == s.prompt.target ? 1 : 0;
}

}  // namespace

TdFidelityResult td_fidelity(const policy::PolicySnapshot& rm, const policy::PolicySnapshot& behavior,
                             const std::function<env::Prompt(Rng&)>& prompt_sampler,
                             const TdFidelityOptions& opts, Rng& rng) {
  policy::check_same_architecture(rm, behavior);
  if (opts.num_branches < 1 || opts.rollouts_per_branch < 1 || opts.top_k < 1) {
    throw ContractError("td_fidelity: counts must be >= 1");
  }
  TdFidelityResult res;
  std::vector<double> mc_td, mc_v, ex_td, ex_v, ex_p;
  std::vector<int> mc_y, ex_y;
  for (int b = 0; b < opts.num_branches; ++b) {
    const env::Prompt prompt = prompt_sampler(rng);
    const env::Trajectory tr = policy::sample_trajectory(behavior.arch, behavior.params, prompt, {}, rng);
    const int t = rng.uniform_int(0, prompt.horizon - 1);
    const env::EnvState s = env::state_after(prompt, std::span<const int>(tr.tokens).first(t));

    double v_prefix = 0.0;
    if (t > 0) {
      const auto series = reward::prefix_values(rm, behavior, tr, opts.beta);
      v_prefix = series.values[t];
    }
    const std::span<const env::EnvState> one(&s, 1);
    const ad::Matrix lp_rm = policy::log_probs(rm, one);
    const ad::Matrix lp_old = policy::log_probs(behavior, one);
    std::vector<int> order(lp_old.cols());
    std::iota(order.begin(), order.end(), 0);
    std::stable_sort(order.begin(), order.end(), [&](int a, int c) { return lp_old(0, a) > lp_old(0, c); });
    order.resize(std::min<std::size_t>(order.size(), static_cast<std::size_t>(opts.top_k)));

    std::optional<env::SuccessTable> table;
    std::uint64_t nodes = 0, width = 1;
    for (int d = 0; d <= prompt.horizon - t; ++d) {
      nodes += width;
      width *= static_cast<std::uint64_t>(lp_old.cols());
    }
    if (nodes <= opts.exact_budget) table.emplace(policy::as_batch_policy(behavior), s);

    for (int c : order) {
      TdFidelityRecord rec;
      rec.branch = b;
      rec.t = t;
      rec.candidate = c;
      rec.td = opts.beta * (lp_rm(0, c) - lp_old(0, c));
      rec.value = v_prefix + rec.td;
      const env::EnvState next = env::step(s, c);
      rec.mc_total = opts.rollouts_per_branch;
      for (int r = 0; r < opts.rollouts_per_branch; ++r) {
        const int y = continue_rollout(behavior, next, rng);
        rec.mc_success += y;
        mc_td.push_back(rec.td);
        mc_v.push_back(rec.value);
        mc_y.push_back(y);
      }
      if (table) {
        rec.exact_prob = table->prob(std::span<const int>(&c, 1));
        ex_td.push_back(rec.td);
        ex_v.push_back(rec.value);
        ex_p.push_back(*rec.exact_prob);
        ex_y.push_back(*rec.exact_prob >= 0.5 ? 1 : 0);
      }
      res.records.push_back(rec);
    }
  }
  res.mc = fidelity_stats(mc_td, mc_v, mc_y);
  res.exact_count = static_cast<int>(ex_y.size());
  if (!ex_y.empty()) {
    res.exact = fidelity_stats(ex_td, ex_v, ex_y);
    res.pearson_td_exact_prob = stats::pearson(ex_td, ex_p);
  }
  return res;
}

}  // namespace ipvrm::eval
