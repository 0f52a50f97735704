#include "ipvrm/advantage.hpp"

#include <cmath>

#include "ipvrm/error.hpp"
#include "ipvrm/stats.hpp"

namespace ipvrm::advantage {

namespace {

void check_t(const reward::PrefixValueSeries& series, int t) {
  if (t < 1 || t > series.horizon()) throw ContractError("advantage: t must satisfy 1 <= t <= T");
}

}  // namespace

double td_advantage(const reward::PrefixValueSeries& series, int t, int terminal_reward) {
  check_t(series, t);
  const double r = t == series.horizon() ? terminal_reward : 0.0;
  return r + series.values[t] - series.values[t - 1];
}

std::vector<double> candidate_td(const policy::PolicySnapshot& rm, const policy::PolicySnapshot& old,
                                 const env::EnvState& state, std::span<const int> candidates,
                                 double beta) {
  policy::check_same_architecture(rm, old);
  const std::span<const env::EnvState> one(&state, 1);
  const ad::Matrix a = policy::log_probs(rm, one);
  const ad::Matrix b = policy::log_probs(old, one);
  std::vector<double> out;
  out.reserve(candidates.size());
  for (int c : candidates) {
    if (c < 0 || c >= a.cols()) throw ContractError("candidate_td: token outside vocabulary");
    out.push_back(beta * (a(0, c) - b(0, c)));
  }
  return out;
}

double mc_advantage(const reward::PrefixValueSeries& series, int t, int outcome) {
  check_t(series, t);
  return outcome - series.values[t - 1];
}

std::vector<double> gae(std::span<const double> deltas, double gamma, double lambda) {
  if (lambda < 0.0 || lambda > 1.0) throw ContractError("gae: lambda must be in [0, 1]");
  std::vector<double> out(deltas.size());
  double acc = 0.0;
  for (std::size_t i = deltas.size(); i-- > 0;) {
    acc = deltas[i] + gamma * lambda * acc;
    out[i] = acc;
  }
  return out;
}

NormalizedValues minibatch_normalize_values(std::span<const double> values) {
  if (values.size() < 2) throw ContractError("minibatch normalization needs at least two states");
  NormalizedValues out;
  out.stats.mean = stats::mean(values);
  out.stats.std = stats::population_std(values);
  out.values.reserve(values.size());
  for (double v : values) out.values.push_back((v - out.stats.mean) * out.stats.inv_scale());
  return out;
}

ad::Var minibatch_normalize_values(ad::Var values) {
  if (values.value().size() < 2) throw ContractError("minibatch normalization needs at least two states");
  const ad::Var mu = ad::stop_gradient(ad::mean(values));
  const ad::Var centered = values - mu;
  const ad::Var var = ad::mean(centered * centered);
  const double sd = std::sqrt(var.item());
  const ad::Var inv = ad::stop_gradient(values.tape()->scalar(1.0 / (sd + kEps)));
  return centered * inv;
}

std::vector<std::vector<double>> prompt_group_normalize(const std::vector<std::vector<double>>& deltas,
                                                        MomentStats* out_stats) {
  std::vector<double> flat;
  for (const auto& d : deltas) flat.insert(flat.end(), d.begin(), d.end());
  MomentStats st;
  if (!flat.empty()) {
    st.mean = stats::mean(flat);
    st.std = stats::population_std(flat);
  }
  std::vector<std::vector<double>> out = deltas;
  for (auto& d : out) {
    for (double& x : d) x = (x - st.mean) * st.inv_scale();
  }
  if (out_stats) *out_stats = st;
  return out;
}

OutcomeStats group_outcome_stats(std::span<const int> outcomes) {
  if (outcomes.empty()) throw ContractError("group_outcome_stats: empty group");
  std::vector<double> xs(outcomes.begin(), outcomes.end());
  return {stats::mean(xs), stats::population_std(xs)};
}

double combined_token_advantage(int outcome, const OutcomeStats& st, double gae_value) {
  const double outcome_term = st.s > 0.0 ? (outcome - st.mu) / st.s : 0.0;
  return outcome_term + gae_value;
}

AdvantageBatch compute_advantages(const std::vector<std::vector<reward::PrefixValueSeries>>& series,
                                  const std::vector<std::vector<int>>& outcomes,
                                  const AdvantageOptions& opts) {
  if (series.size() != outcomes.size()) throw ContractError("compute_advantages: group count mismatch");
  AdvantageBatch batch;
  batch.gamma = opts.gamma;
  batch.lambda = opts.lambda;

  std::vector<double> all_values;
  for (const auto& group : series) {
    for (const auto& s : group) all_values.insert(all_values.end(), s.values.begin(), s.values.end());
  }
  double inv = 1.0;
  if (opts.value_norm && all_values.size() >= 2) {
    batch.value_stats = minibatch_normalize_values(all_values).stats;
    inv = batch.value_stats.inv_scale();
  }

  for (std::size_t g = 0; g < series.size(); ++g) {
    if (series[g].size() != outcomes[g].size()) throw ContractError("compute_advantages: rollout count mismatch");
    GroupAdvantages ga;
    ga.outcome = group_outcome_stats(outcomes[g]);
    for (const auto& s : series[g]) {
      std::vector<double> d(s.horizon());
      for (int t = 1; t <= s.horizon(); ++t) d[t - 1] = s.values[t] - s.values[t - 1];
      ga.td_raw.push_back(std::move(d));
    }
    std::vector<std::vector<double>> scaled = ga.td_raw;
    for (auto& d : scaled) {
      for (double& x : d) x *= inv;
    }
    ga.td_hat = opts.group_norm ? prompt_group_normalize(scaled, &ga.td_stats) : scaled;
    for (std::size_t k = 0; k < ga.td_hat.size(); ++k) {
      std::vector<double> a = gae(ga.td_hat[k], opts.gamma, opts.lambda);
      std::vector<double> c(a.size());
      for (std::size_t t = 0; t < a.size(); ++t) {
        c[t] = combined_token_advantage(outcomes[g][k], ga.outcome, opts.include_gae ? a[t] : 0.0);
      }
      ga.gae.push_back(std::move(a));
      ga.combined.push_back(std::move(c));
    }
    batch.groups.push_back(std::move(ga));
  }
  return batch;
}

}  // namespace ipvrm::advantage
