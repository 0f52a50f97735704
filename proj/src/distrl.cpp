#include "ipvrm/distrl.hpp"

#include <chrono>
#include <cmath>
#include <sstream>

#include "json.hpp"

#include "ipvrm/error.hpp"
#include "ipvrm/parallel.hpp"

namespace ipvrm::distrl {

double CandidateSet::mass() const {
  double m = 0.0;
  for (double p : probs) m += p;
  return m;
}

CandidateSet build_candidate_set(std::span<const double> behavior_probs, int sampled, double p_min) {
  if (!(p_min > 0.0 && p_min < 1.0)) throw ContractError("candidate set: P_min must lie in (0, 1)");
  if (sampled < 0 || sampled >= static_cast<int>(behavior_probs.size())) {
    throw ContractError("candidate set: sampled token outside vocabulary");
  }
  CandidateSet c;
  c.p_min = p_min;
  for (std::size_t a = 0; a < behavior_probs.size(); ++a) {
    if (behavior_probs[a] >= p_min || static_cast<int>(a) == sampled) {
      c.tokens.push_back(static_cast<int>(a));
      c.probs.push_back(behavior_probs[a]);
    }
  }
  c.forced = behavior_probs[sampled] < p_min;
  return c;
}

std::string to_string(RlMethod m) {
  switch (m) {
    case RlMethod::kDistRL: return "distrl";
    case RlMethod::kGrpo: return "grpo";
    case RlMethod::kGrpoWithRm: return "grpo_with_rm";
  }
  return "distrl";
}

RlMethod rl_method_from_string(const std::string& name) {
  if (name == "distrl") return RlMethod::kDistRL;
  if (name == "grpo") return RlMethod::kGrpo;
  if (name == "grpo_with_rm") return RlMethod::kGrpoWithRm;
  throw ContractError("unknown RL method '" + name + "'");
}

std::vector<std::string> PpoConfig::violations() const {
  std::vector<std::string> v;
  if (!(eps_low > 0.0 && eps_low < 1.0)) v.push_back("ppo.eps_low must lie in (0, 1)");
  if (!(eps_high > 0.0 && eps_high < 1.0)) v.push_back("ppo.eps_high must lie in (0, 1)");
  if (!(alpha >= 0.0)) v.push_back("ppo.alpha must be >= 0");
  if (!(p_min > 0.0 && p_min < 1.0)) v.push_back("ppo.p_min must lie in (0, 1)");
  if (ppo_epochs < 1) v.push_back("ppo.epochs must be >= 1");
  if (minibatches < 1) v.push_back("ppo.minibatches must be >= 1");
  if (!(lr >= 0.0)) v.push_back("ppo.lr must be >= 0");
  if (!(lambda >= 0.0 && lambda <= 1.0)) v.push_back("ppo.lambda must lie in [0, 1]");
  if (!(gamma >= 0.0 && gamma <= 1.0)) v.push_back("ppo.gamma must lie in [0, 1]");
  if (n < 1) v.push_back("ppo.n must be >= 1");
  if (oversample < 1) v.push_back("ppo.oversample must be >= 1");
  if (batch_size < 1) v.push_back("ppo.batch_size must be >= 1");
  if (!(temperature > 0.0)) v.push_back("ppo.temperature must be > 0");
  if (max_rounds < 1) v.push_back("ppo.max_rounds must be >= 1");
  return v;
}

std::vector<int> RolloutGroup::outcomes() const {
  std::vector<int> out;
  for (const auto& tr : rollouts) out.push_back(tr.outcome);
  return out;
}

std::vector<env::Trajectory> RolloutBatch::trajectories() const {
  std::vector<env::Trajectory> out;
  for (const auto& g : groups) out.insert(out.end(), g.rollouts.begin(), g.rollouts.end());
  return out;
}

RolloutBatch collect_batch(const policy::PolicySnapshot& behavior, const PromptSampler& sampler,
                           const PpoConfig& config, Rng& rng, int workers) {
  const auto bad = config.violations();
  if (!bad.empty()) throw ContractError("collect_batch: " + bad.front());
  RolloutBatch batch;
  const int per_round = config.oversample * config.batch_size;
  const policy::SampleOptions opts{config.temperature, config.greedy};
  for (int round = 0; round < config.max_rounds; ++round) {
    ++batch.rounds;
    std::vector<env::Prompt> prompts;
    prompts.reserve(per_round);
    for (int i = 0; i < per_round; ++i) prompts.push_back(sampler(rng));
    const std::uint64_t round_seed = rng.next();
    batch.sampled_prompts += per_round;

    std::vector<env::Prompt> flat;
    std::vector<Rng> rngs;
    flat.reserve(static_cast<std::size_t>(per_round) * config.n);
    rngs.reserve(flat.capacity());
    for (int i = 0; i < per_round; ++i) {
      for (int k = 0; k < config.n; ++k) {
        flat.push_back(prompts[i]);
        rngs.emplace_back(derive_seed(round_seed, static_cast<std::uint64_t>(i) * config.n + k));
      }
    }
    std::vector<env::Trajectory> rollouts(flat.size());
    parallel_for(per_round, workers, [&](int begin, int end) {
      const std::size_t lo = static_cast<std::size_t>(begin) * config.n;
      const std::size_t hi = static_cast<std::size_t>(end) * config.n;
      auto out = policy::sample_trajectories(
          behavior.arch, behavior.params, std::span<const env::Prompt>(flat).subspan(lo, hi - lo), opts,
          std::span<Rng>(rngs).subspan(lo, hi - lo));
      std::move(out.begin(), out.end(), rollouts.begin() + static_cast<std::ptrdiff_t>(lo));
    });

    for (int i = 0; i < per_round && static_cast<int>(batch.groups.size()) < config.batch_size; ++i) {
      RolloutGroup g;
      g.prompt = prompts[i];
      g.rollouts.assign(rollouts.begin() + static_cast<std::ptrdiff_t>(i) * config.n,
                        rollouts.begin() + static_cast<std::ptrdiff_t>(i + 1) * config.n);
      const auto outs = g.outcomes();
      g.stats = advantage::group_outcome_stats(outs);
      if (config.mixed_only && !(g.stats.mu > 0.0 && g.stats.mu < 1.0)) continue;
      g.context = reward::make_group_context(outs);
      batch.groups.push_back(std::move(g));
    }
    if (static_cast<int>(batch.groups.size()) == config.batch_size) return batch;
  }
  std::ostringstream os;
  os << "collect_batch: only " << batch.groups.size() << " of " << config.batch_size
     << " prompts had mixed outcomes after " << batch.rounds << " rounds (" << batch.sampled_prompts
     << " prompts sampled)";
  throw CollectionError(os.str());
}

// --- surrogate losses ----------------------------------------------------------

PolicyBatch make_policy_batch(const policy::PolicySnapshot& behavior,
                              const policy::PolicySnapshot& rm,
                              std::span<const env::Trajectory> trajectories,
                              const std::vector<std::vector<double>>& advantages, double beta,
                              double td_scale, double p_min) {
  policy::check_same_architecture(behavior, rm);
  if (advantages.size() != trajectories.size()) throw ContractError("make_policy_batch: advantage count mismatch");
  PolicyBatch b;
  b.states = policy::batch_states(trajectories);
  const ad::Matrix old_lp = policy::log_probs(behavior, b.states);
  const ad::Matrix rm_lp = policy::log_probs(rm, b.states);
  const double n = static_cast<double>(trajectories.size());
  int row = 0;
  for (std::size_t i = 0; i < trajectories.size(); ++i) {
    const auto& tr = trajectories[i];
    const double horizon = static_cast<double>(tr.tokens.size());
    if (advantages[i].size() != tr.tokens.size()) throw ContractError("make_policy_batch: advantage length mismatch");
    for (std::size_t t = 0; t < tr.tokens.size(); ++t, ++row) {
      const int tok = tr.tokens[t];
      b.tokens.push_back(tok);
      b.old_logprob.push_back(old_lp(row, tok));
      b.token_weight.push_back(1.0 / (horizon * n));
      b.advantage.push_back(advantages[i][t]);
      std::vector<double> pr(old_lp.cols());
      for (int a = 0; a < old_lp.cols(); ++a) pr[a] = std::exp(old_lp(row, a));
      CandidateSet c = build_candidate_set(pr, tok, p_min);
      for (std::size_t j = 0; j < c.tokens.size(); ++j) {
        const int y = c.tokens[j];
        b.cand_row.push_back(row);
        b.cand_token.push_back(y);
        b.cand_old_prob.push_back(c.probs[j]);
        b.cand_old_logprob.push_back(old_lp(row, y));
        b.cand_adv.push_back(beta * (rm_lp(row, y) - old_lp(row, y)) * td_scale);
      }
      b.candidates.push_back(std::move(c));
    }
  }
  return b;
}

ad::Var student_log_probs(ad::Tape& tape, const policy::Architecture& arch, const PolicyBatch& batch) {
  if (batch.states.empty()) throw ContractError("policy batch is empty");
  return ad::log_softmax_rows(policy::logits_graph(tape, arch, batch.states));
}

namespace {

ad::Var clipped_surrogate(ad::Var logp, const std::vector<double>& old_logp,
                          const std::vector<double>& adv, const std::vector<double>& weight,
                          const PpoConfig& config) {
  ad::Tape& tape = *logp.tape();
  const ad::Var ratio = ad::exp(logp - tape.constant(ad::Matrix::column(old_logp)));
  const ad::Var a = tape.constant(ad::Matrix::column(adv));
  const ad::Var unclipped = ratio * a;
  const ad::Var clipped = ad::clamp(ratio, 1.0 - config.eps_low, 1.0 + config.eps_high) * a;
  const ad::Var surr = ad::minimum(unclipped, clipped);
  return -ad::sum(surr * tape.constant(ad::Matrix::column(weight)));
}

}  // namespace

ad::Var tok_ppo_loss(ad::Var student_logp, const PolicyBatch& batch, const PpoConfig& config) {
  const ad::Var lp = ad::pick(student_logp, batch.tokens);
  return clipped_surrogate(lp, batch.old_logprob, batch.advantage, batch.token_weight, config);
}

ad::Var dist_ppo_loss(ad::Var student_logp, const PolicyBatch& batch, const PpoConfig& config) {
  const ad::Var rows = ad::gather_rows(student_logp, batch.cand_row);
  const ad::Var lp = ad::pick(rows, batch.cand_token);
  std::vector<double> weight(batch.cand_row.size());
  for (std::size_t e = 0; e < weight.size(); ++e) {
    weight[e] = batch.cand_old_prob[e] * batch.token_weight[batch.cand_row[e]];
  }
  return clipped_surrogate(lp, batch.cand_old_logprob, batch.cand_adv, weight, config);
}

ad::Var distrl_loss(ad::Var student_logp, const PolicyBatch& batch, const PpoConfig& config) {
  return tok_ppo_loss(student_logp, batch, config) +
         ad::scale(dist_ppo_loss(student_logp, batch, config), config.alpha);
}

ad::Var tok_ppo_loss(ad::Tape& tape, const policy::Architecture& arch, const PolicyBatch& batch,
                     const PpoConfig& config) {
  return tok_ppo_loss(student_log_probs(tape, arch, batch), batch, config);
}

ad::Var dist_ppo_loss(ad::Tape& tape, const policy::Architecture& arch, const PolicyBatch& batch,
                      const PpoConfig& config) {
  return dist_ppo_loss(student_log_probs(tape, arch, batch), batch, config);
}

ad::Var distrl_loss(ad::Tape& tape, const policy::Architecture& arch, const PolicyBatch& batch,
                    const PpoConfig& config) {
  return distrl_loss(student_log_probs(tape, arch, batch), batch, config);
}

ad::Var grpo_baseline_loss(ad::Tape& tape, const policy::Architecture& arch,
                           const PolicyBatch& batch, const PpoConfig& config) {
  return tok_ppo_loss(tape, arch, batch, config);
}

// --- training ------------------------------------------------------------------

std::string to_json_line(const IterationMetrics& m) {
  nlohmann::ordered_json j;
  j["iter"] = m.iter;
  j["verifier_acc"] = m.verifier_acc;
  j["rm_score"] = m.rm_score;
  j["tok_loss"] = m.tok_loss;
  j["dist_loss"] = m.dist_loss;
  j["rm_loss"] = m.rm_loss;
  j["cand_avg_size"] = m.cand_avg_size;
  j["cand_mass"] = m.cand_mass;
  j["wall_ms"] = m.wall_ms;
  if (m.aborted) {
    j["aborted"] = true;
    j["abort_reason"] = m.abort_reason;
  }
  return j.dump();
}

namespace {

// Contiguous split of [0, n) into k nearly equal parts.
std::vector<std::pair<int, int>> split(int n, int k) {
  k = std::max(1, std::min(k, n));
  std::vector<std::pair<int, int>> out;
  int begin = 0;
  for (int i = 0; i < k; ++i) {
    const int end = begin + n / k + (i < n % k ? 1 : 0);
    out.emplace_back(begin, end);
    begin = end;
  }
  return out;
}

ad::Var rm_update_loss(ad::Tape& tape, const policy::Architecture& arch,
                       const policy::PolicySnapshot& ref, const std::vector<RolloutGroup>& groups,
                       int begin, int end, const OnlineRmConfig& cfg) {
  std::vector<env::Trajectory> trs;
  std::vector<int> labels;
  std::vector<reward::GroupContext> ctx;
  for (int g = begin; g < end; ++g) {
    for (const auto& tr : groups[g].rollouts) {
      trs.push_back(tr);
      labels.push_back(tr.outcome);
      ctx.push_back(groups[g].context);
    }
  }
  if (cfg.method == reward::RmMethod::kDpo) {
    std::vector<env::Trajectory> win, lose;
    for (int g = begin; g < end; ++g) {
      const env::Trajectory* w = nullptr;
      const env::Trajectory* l = nullptr;
      for (const auto& tr : groups[g].rollouts) {
        if (tr.outcome == 1 && !w) w = &tr;
        if (tr.outcome == 0 && !l) l = &tr;
      }
      if (w && l) {
        win.push_back(*w);
        lose.push_back(*l);
      }
    }
    if (win.empty()) return tape.scalar(0.0);
    return reward::dpo_loss(reward::prefix_values_graph(tape, arch, ref, win, cfg.beta),
                            reward::prefix_values_graph(tape, arch, ref, lose, cfg.beta));
  }
  const ad::Var values = reward::prefix_values_graph(tape, arch, ref, trs, cfg.beta);
  if (cfg.method == reward::RmMethod::kImplicitPrm) return reward::implicit_prm_loss(values, labels);
  return reward::online_ipvrm_loss(values, labels, cfg.margin, ctx, cfg.flags);
}

}  // namespace

IterationMetrics train_iteration(TrainState& state, const policy::PolicySnapshot& sft_ref,
                                 const PromptSampler& sampler, const TrainConfig& config, Rng& rng,
                                 int workers) {
  const auto start = std::chrono::steady_clock::now();
  IterationMetrics m;
  m.iter = ++state.iteration;
  const PpoConfig& ppo = config.ppo;

  const policy::PolicySnapshot behavior = policy::snapshot(state.arch, state.student, policy::Role::kBehavior);
  const policy::PolicySnapshot rm = policy::snapshot(state.arch, state.rm, policy::Role::kRewardModel);

  const RolloutBatch batch = collect_batch(behavior, sampler, ppo, rng, workers);
  const auto all = batch.trajectories();

  // Score with the RM against the behavior reference.
  std::vector<std::vector<reward::PrefixValueSeries>> series;
  std::vector<std::vector<int>> outcomes;
  for (const auto& g : batch.groups) {
    series.push_back(reward::prefix_values(rm, behavior, g.rollouts, config.rm.beta));
    outcomes.push_back(g.outcomes());
  }
  advantage::AdvantageOptions aopts;
  aopts.gamma = ppo.gamma;
  aopts.lambda = ppo.lambda;
  aopts.include_gae = config.method != RlMethod::kGrpo;
  const advantage::AdvantageBatch adv = advantage::compute_advantages(series, outcomes, aopts);

  double acc = 0.0, score = 0.0;
  {
    const auto rm_sft = reward::prefix_values(rm, sft_ref, all, 1.0);
    for (std::size_t i = 0; i < all.size(); ++i) {
      acc += all[i].outcome;
      score += rm_sft[i].values.back() / static_cast<double>(all[i].tokens.size());
    }
    m.verifier_acc = acc / static_cast<double>(all.size());
    m.rm_score = score / static_cast<double>(all.size());
  }

  const auto parts = split(static_cast<int>(batch.groups.size()), ppo.minibatches);
  std::vector<PolicyBatch> minis;
  for (const auto& [begin, end] : parts) {
    std::vector<env::Trajectory> trs;
    std::vector<std::vector<double>> a;
    for (int g = begin; g < end; ++g) {
      trs.insert(trs.end(), batch.groups[g].rollouts.begin(), batch.groups[g].rollouts.end());
      a.insert(a.end(), adv.groups[g].combined.begin(), adv.groups[g].combined.end());
    }
    minis.push_back(make_policy_batch(behavior, rm, trs, a, config.rm.beta,
                                      adv.value_stats.inv_scale(), ppo.p_min));
  }
  double cand_size = 0.0, cand_mass = 0.0;
  std::size_t cand_count = 0;
  for (const auto& mb : minis) {
    for (const auto& c : mb.candidates) {
      cand_size += c.size();
      cand_mass += c.mass();
      ++cand_count;
    }
  }
  m.cand_avg_size = cand_size / static_cast<double>(cand_count);
  m.cand_mass = cand_mass / static_cast<double>(cand_count);

  const ad::ParamVector student_before = state.student;
  const ad::ParamVector rm_before = state.rm;
  try {
    int steps = 0;
    for (int epoch = 0; epoch < ppo.ppo_epochs; ++epoch) {
      for (const auto& mb : minis) {
        double tok = 0.0, dist = 0.0;
        const auto res = ad::eval_with_grad(
            [&](ad::Tape& tape) {
              const ad::Var lp = student_log_probs(tape, state.arch, mb);
              const ad::Var t = tok_ppo_loss(lp, mb, ppo);
              tok = t.item();
              if (config.method != RlMethod::kDistRL) return t;
              const ad::Var d = dist_ppo_loss(lp, mb, ppo);
              dist = d.item();
              return t + ad::scale(d, ppo.alpha);
            },
            state.student);
        if (!res.grad.all_finite()) throw NumericalError("non-finite policy gradient");
        state.student.axpy(-ppo.lr, res.grad);
        m.tok_loss += tok;
        m.dist_loss += dist;
        ++steps;
      }
    }
    m.tok_loss /= steps;
    m.dist_loss /= steps;

    if (!config.rm.frozen) {
      int rm_steps = 0;
      for (const auto& [begin, end] : parts) {
        const auto res = ad::eval_with_grad(
            [&](ad::Tape& tape) {
              return rm_update_loss(tape, state.arch, behavior, batch.groups, begin, end, config.rm);
            },
            state.rm);
        if (!res.grad.all_finite()) throw NumericalError("non-finite reward-model gradient");
        state.rm.axpy(-config.rm.lr, res.grad);
        m.rm_loss += res.loss;
        ++rm_steps;
      }
      m.rm_loss /= rm_steps;
    }
  } catch (const NumericalError& e) {
    state.student = student_before;
    state.rm = rm_before;
    m.aborted = true;
    m.abort_reason = e.what();
  }
  m.wall_ms = std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - start).count();
  return m;
}

}  // namespace ipvrm::distrl
