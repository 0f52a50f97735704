#include "ipvrm/implicit_reward.hpp"

#include <algorithm>
#include <cmath>

#include "ipvrm/error.hpp"
#include "ipvrm/stats.hpp"

namespace ipvrm::reward {

namespace {

ad::Matrix label_column(std::span<const int> labels, bool complement) {
  ad::Matrix m(static_cast<int>(labels.size()), 1);
  for (std::size_t i = 0; i < labels.size(); ++i) {
    if (labels[i] != 0 && labels[i] != 1) throw ContractError("outcome labels must be 0 or 1");
    m[i] = complement ? 1.0 - labels[i] : static_cast<double>(labels[i]);
  }
  return m;
}

void check_batch(ad::Var values, std::size_t labels) {
  if (values.rows() != static_cast<int>(labels)) {
    throw ContractError("reward loss: label count differs from the number of trajectories");
  }
  if (values.cols() < 1) throw ContractError("reward loss: trajectories must have T >= 1");
}

ad::Var vbar(ad::Var values) {
  const int horizon = values.cols();
  ad::Matrix inv(1, horizon);
  for (int t = 1; t <= horizon; ++t) inv[t - 1] = 1.0 / t;
  return values * values.tape()->constant(std::move(inv));
}

// Per-entry BCE with logits z_pos for positives and z_neg for negatives.
ad::Var per_step_bce(ad::Var z_pos, ad::Var z_neg, std::span<const int> labels) {
  ad::Tape& tape = *z_pos.tape();
  const ad::Var y = tape.constant(label_column(labels, false));
  const ad::Var not_y = tape.constant(label_column(labels, true));
  return -(ad::log_sigmoid(z_pos) * y + ad::log_sigmoid(-z_neg) * not_y);
}

}  // namespace

std::string to_string(Weighting w) {
  switch (w) {
    case Weighting::kUniform: return "uniform";
    case Weighting::kLate: return "late";
    case Weighting::kEarly: return "early";
  }
  return "uniform";
}

Weighting weighting_from_string(const std::string& name) {
  if (name == "uniform") return Weighting::kUniform;
  if (name == "late") return Weighting::kLate;
  if (name == "early") return Weighting::kEarly;
  throw ContractError("unknown weighting '" + name + "'");
}

std::string to_string(RmMethod m) {
  switch (m) {
    case RmMethod::kIpvrm: return "ipvrm";
    case RmMethod::kIpvrmLate: return "ipvrm_late";
    case RmMethod::kIpvrmEarly: return "ipvrm_early";
    case RmMethod::kImplicitPrm: return "implicit_prm";
    case RmMethod::kDpo: return "dpo";
  }
  return "ipvrm";
}

RmMethod rm_method_from_string(const std::string& name) {
  for (RmMethod m : {RmMethod::kIpvrm, RmMethod::kIpvrmLate, RmMethod::kIpvrmEarly,
                     RmMethod::kImplicitPrm, RmMethod::kDpo}) {
    if (to_string(m) == name) return m;
  }
  throw ContractError("unknown reward-model method '" + name + "'");
}

bool is_ipvrm(RmMethod m) {
  return m == RmMethod::kIpvrm || m == RmMethod::kIpvrmLate || m == RmMethod::kIpvrmEarly;
}

Weighting weighting_of(RmMethod m) {
  if (m == RmMethod::kIpvrmLate) return Weighting::kLate;
  if (m == RmMethod::kIpvrmEarly) return Weighting::kEarly;
  return Weighting::kUniform;
}

double token_log_ratio(const policy::PolicySnapshot& rm, const policy::PolicySnapshot& ref,
                       const env::EnvState& state, int token, double beta) {
  policy::check_same_architecture(rm, ref);
  const std::span<const env::EnvState> one(&state, 1);
  const ad::Matrix a = policy::log_probs(rm, one);
  const ad::Matrix b = policy::log_probs(ref, one);
  if (token < 0 || token >= a.cols()) throw ContractError("token_log_ratio: token outside vocabulary");
  return beta * (a(0, token) - b(0, token));
}

double PrefixValueSeries::vbar(int t) const {
  if (t < 1 || t > horizon()) throw ContractError("vbar is defined for 1 <= t <= T");
  return values[t] / t;
}

double PrefixValueSeries::token_reward(int t) const {
  if (t < 1 || t > horizon()) throw ContractError("token_reward is defined for 1 <= t <= T");
  return values[t] - values[t - 1];
}

std::vector<PrefixValueSeries> prefix_values(const policy::PolicySnapshot& rm,
                                             const policy::PolicySnapshot& ref,
                                             std::span<const env::Trajectory> trs, double beta) {
  policy::check_same_architecture(rm, ref);
  const auto a = policy::token_log_probs(rm.arch, rm.params, trs);
  const auto b = policy::token_log_probs(ref.arch, ref.params, trs);
  std::vector<PrefixValueSeries> out;
  out.reserve(trs.size());
  std::size_t k = 0;
  for (const auto& tr : trs) {
    PrefixValueSeries s;
    s.beta = beta;
    s.values.assign(tr.tokens.size() + 1, 0.0);
    for (std::size_t t = 0; t < tr.tokens.size(); ++t, ++k) {
      s.values[t + 1] = s.values[t] + beta * (a[k] - b[k]);
    }
    out.push_back(std::move(s));
  }
  return out;
}

PrefixValueSeries prefix_values(const policy::PolicySnapshot& rm, const policy::PolicySnapshot& ref,
                                const env::Trajectory& tr, double beta) {
  return prefix_values(rm, ref, std::span<const env::Trajectory>(&tr, 1), beta).front();
}

ad::Var prefix_values_graph(ad::Tape& tape, const policy::Architecture& rm_arch,
                            const policy::PolicySnapshot& ref,
                            std::span<const env::Trajectory> trs, double beta) {
  if (trs.empty()) throw ContractError("prefix_values_graph: empty batch");
  if (!(rm_arch == ref.arch)) throw ContractError("reward model and reference architectures differ");
  const std::size_t horizon = trs.front().tokens.size();
  for (const auto& tr : trs) {
    if (tr.tokens.size() != horizon) {
      throw ContractError("prefix_values_graph: trajectories in a batch must share the horizon");
    }
  }
  const auto ref_lp = policy::token_log_probs(ref.arch, ref.params, trs);
  const ad::Var rm_lp = policy::sequence_log_prob(tape, rm_arch, trs);
  const ad::Var ratio = ad::scale(rm_lp - tape.constant(ad::Matrix::column(ref_lp)), beta);
  return ad::cumsum_rows(
      ad::reshape(ratio, static_cast<int>(trs.size()), static_cast<int>(horizon)));
}

std::vector<double> step_weights(int horizon, Weighting w) {
  if (horizon < 1) throw ContractError("step_weights: T must be >= 1");
  std::vector<double> out(horizon);
  for (int t = 1; t <= horizon; ++t) {
    const double frac = static_cast<double>(t) / horizon;
    switch (w) {
      case Weighting::kUniform: out[t - 1] = 1.0; break;
      case Weighting::kLate: out[t - 1] = frac; break;
      case Weighting::kEarly: out[t - 1] = 1.0 - frac; break;
    }
  }
  double total = 0.0;
  for (double x : out) total += x;
  // Early weighting at T = 1 is all zeros; fall back to the single step.
  if (total <= 0.0) {
    std::fill(out.begin(), out.end(), 1.0);
    total = horizon;
  }
  for (double& x : out) x /= total;
  return out;
}

ad::Var ipvrm_loss(ad::Var values, std::span<const int> labels, double margin, Weighting w) {
  check_batch(values, labels.size());
  if (margin < 0.0) throw ContractError("ipvrm_loss: margin must be >= 0");
  ad::Tape& tape = *values.tape();
  const ad::Var v = vbar(values);
  const ad::Var per = per_step_bce(ad::shift(v, -margin), ad::shift(v, margin), labels);
  const ad::Var wrow = tape.constant(ad::Matrix::row(step_weights(values.cols(), w)));
  return ad::mean(ad::sum_rows(per * wrow));
}

ad::Var implicit_prm_loss(ad::Var values, std::span<const int> labels) {
  check_batch(values, labels.size());
  const ad::Var last = ad::pick(values, std::vector<int>(values.rows(), values.cols() - 1));
  return ad::mean(per_step_bce(last, last, labels));
}

ad::Var dpo_loss(ad::Var win_values, ad::Var lose_values) {
  if (win_values.rows() != lose_values.rows()) throw ContractError("dpo_loss: unpaired batch");
  const ad::Var w = ad::pick(win_values, std::vector<int>(win_values.rows(), win_values.cols() - 1));
  const ad::Var l = ad::pick(lose_values, std::vector<int>(lose_values.rows(), lose_values.cols() - 1));
  return ad::mean(-ad::log_sigmoid(w - l));
}

GroupContext make_group_context(std::span<const int> outcomes) {
  if (outcomes.empty()) throw ContractError("group context needs at least one rollout");
  std::vector<double> xs(outcomes.begin(), outcomes.end());
  GroupContext g;
  g.n = static_cast<int>(outcomes.size());
  g.mu = stats::mean(xs);
  g.s = stats::population_std(xs);
  const double lo = 1.0 / (2.0 * g.n);
  g.baseline = ad::logit(std::clamp(g.mu, lo, 1.0 - lo));
  return g;
}

ad::Var online_ipvrm_loss(ad::Var values, std::span<const int> labels, double margin,
                          std::span<const GroupContext> groups, OnlineFlags flags) {
  check_batch(values, labels.size());
  if (groups.size() != labels.size()) throw ContractError("online_ipvrm_loss: one group per trajectory");
  ad::Tape& tape = *values.tape();
  const int n = values.rows();
  ad::Matrix shift_col(n, 1), weight_col(n, 1);
  for (int i = 0; i < n; ++i) {
    shift_col[i] = flags.adb ? groups[i].baseline : 0.0;
    // Same clamp as the baseline, so a degenerate group still contributes 1/(2n).
    const double lo = 1.0 / (2.0 * groups[i].n);
    const double mu = std::clamp(groups[i].mu, lo, 1.0 - lo);
    weight_col[i] = !flags.dlw ? 1.0 : (labels[i] == 1 ? 1.0 - mu : mu);
  }
  const ad::Var v = vbar(values) + tape.constant(std::move(shift_col));
  const ad::Var per = per_step_bce(ad::shift(v, -margin), ad::shift(v, margin), labels);
  const ad::Var per_traj = ad::scale(ad::sum_rows(per), 1.0 / values.cols());
  return ad::mean(per_traj * tape.constant(std::move(weight_col)));
}

ad::Var ipvrm_loss(ad::Tape& tape, const policy::PolicySnapshot& ref, const env::Trajectory& tr,
                   double beta, double margin, Weighting w, const policy::Architecture& rm_arch) {
  const std::span<const env::Trajectory> one(&tr, 1);
  const int label = tr.outcome;
  return ipvrm_loss(prefix_values_graph(tape, rm_arch, ref, one, beta), std::span<const int>(&label, 1),
                    margin, w);
}

ad::Var dpo_loss(ad::Tape& tape, const policy::Architecture& rm_arch,
                 const policy::PolicySnapshot& ref, const env::Trajectory& winner,
                 const env::Trajectory& loser, double beta) {
  if (!(winner.prompt == loser.prompt)) throw ContractError("dpo_loss: pair must share the prompt");
  return dpo_loss(prefix_values_graph(tape, rm_arch, ref, std::span<const env::Trajectory>(&winner, 1), beta),
                  prefix_values_graph(tape, rm_arch, ref, std::span<const env::Trajectory>(&loser, 1), beta));
}

}  // namespace ipvrm::reward
