#include "ipvrm/eval.hpp"

#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>

#include "ipvrm/error.hpp"
#include "ipvrm/implicit_reward.hpp"
#include "test_util.hpp"

namespace ipvrm::eval {
namespace {

using testutil::bitbudget;
using testutil::modsum;

policy::PolicySnapshot random_snapshot(const policy::Architecture& arch, Rng& rng, policy::Role role,
                                       double scale = 0.5) {
  return policy::snapshot(arch, testutil::random_params(arch, rng, scale), role);
}

std::vector<env::Prompt> bitbudget_prompts(int n) {
  std::vector<env::Prompt> out;
  for (int i = 0; i < n; ++i) out.push_back(bitbudget(2 + i % 7));
  return out;
}

double exact_mean_accuracy(const policy::PolicySnapshot& snap, std::span<const env::Prompt> prompts,
                           int n = 1) {
  double sum = 0.0;
  for (const auto& p : prompts) {
    const double q = env::SuccessTable(policy::as_batch_policy(snap), env::reset(p)).root_prob();
    sum += 1.0 - std::pow(1.0 - q, n);
  }
  return sum / prompts.size();
}

Scorer oracle_scorer() {
  return [](std::span<const env::Trajectory> trs) {
    std::vector<double> s;
    for (const auto& tr : trs) s.push_back(tr.outcome);
    return s;
  };
}

TEST(BonRerank, SingleCandidateIsPlainSampling) {
  Rng rng(1);
  const auto arch = policy::architecture_for(bitbudget(10));
  const auto sampler = random_snapshot(arch, rng, policy::Role::kSft);
  const auto prompts = bitbudget_prompts(700);
  const auto r = bon_rerank(oracle_scorer(), sampler, prompts, 1, rng);
  double hits = 0.0;
  for (const auto& c : r.cases) {
    EXPECT_EQ(c.picked, 0);
    EXPECT_EQ(c.picked_outcome, c.num_correct);
    hits += c.picked_outcome;
  }
  EXPECT_DOUBLE_EQ(r.accuracy, hits / 700);
  const double p = exact_mean_accuracy(sampler, prompts);
  EXPECT_NEAR(r.accuracy, p, 4 * std::sqrt(p * (1 - p) / 700));
}

TEST(BonRerank, OracleScorerFindsAnyCorrect) {
  Rng rng(2);
  const auto arch = policy::architecture_for(bitbudget(10));
  const auto sampler = random_snapshot(arch, rng, policy::Role::kSft);
  const auto prompts = bitbudget_prompts(700);
  double prev = -1.0;
  for (int n : {1, 4, 16}) {
    const auto r = bon_rerank(oracle_scorer(), sampler, prompts, n, rng);
    for (const auto& c : r.cases) EXPECT_EQ(c.picked_outcome, c.num_correct > 0 ? 1 : 0);
    const double p = exact_mean_accuracy(sampler, prompts, n);
    EXPECT_NEAR(r.accuracy, p, 4 * std::sqrt(p * (1 - p) / 700) + 1e-12) << n;
    EXPECT_GE(r.accuracy, prev);
    prev = r.accuracy;
  }
}

TEST(BonRerank, RandomScorerMatchesSingleSample) {
  Rng rng(3);
  const auto arch = policy::architecture_for(bitbudget(10));
  const auto sampler = random_snapshot(arch, rng, policy::Role::kSft);
  const auto prompts = bitbudget_prompts(500);
  Rng noise(4);
  const Scorer random = [&](std::span<const env::Trajectory> trs) {
    std::vector<double> s(trs.size());
    for (auto& x : s) x = noise.uniform();
    return s;
  };
  const auto r = bon_rerank(random, sampler, prompts, 16, rng);
  const double p = exact_mean_accuracy(sampler, prompts);
  EXPECT_NEAR(r.accuracy, p, 4 * std::sqrt(p * (1 - p) / 500));
}

TEST(BonRerank, TiesGoToLowestIndex) {
  Rng rng(5);
  const auto arch = policy::architecture_for(bitbudget(10));
  const auto sampler = random_snapshot(arch, rng, policy::Role::kSft);
  const auto prompts = bitbudget_prompts(20);
  const Scorer flat = [](std::span<const env::Trajectory> trs) { return std::vector<double>(trs.size(), 1.0); };
  for (const auto& c : bon_rerank(flat, sampler, prompts, 8, rng).cases) EXPECT_EQ(c.picked, 0);
}

TEST(StepScores, IdentityModelsGiveHalf) {
  Rng rng(6);
  const auto p = modsum(3);
  const auto arch = policy::architecture_for(p);
  const auto snap = random_snapshot(arch, rng, policy::Role::kRewardModel);
  const auto tr = policy::sample_trajectory(arch, snap.params, p, {}, rng);
  for (const auto& s : step_scores(snap, snap, tr, 2, 10.0).steps) {
    EXPECT_EQ(s.process, 0.5);
    EXPECT_EQ(s.prefix, 0.5);
  }
}

TEST(StepScores, PartitionAndProtocols) {
  Rng rng(7);
  for (int trial = 0; trial < 200; ++trial) {
    const int T = rng.uniform_int(1, 12), step = rng.uniform_int(1, 5);
    const double beta = 0.1 + rng.uniform();
    std::vector<double> lr(T);
    for (auto& x : lr) x = rng.normal();
    const auto s = step_scores(lr, step, beta);
    int next = 1;
    double cum = 0.0;
    for (const auto& st : s.steps) {
      EXPECT_EQ(st.first, next);
      EXPECT_GE(st.last, st.first);
      EXPECT_LE(st.last - st.first + 1, step);
      double part = 0.0;
      for (int t = st.first; t <= st.last; ++t) part += lr[t - 1];
      cum += part;
      EXPECT_NEAR(st.process, 1.0 / (1.0 + std::exp(-beta * part)), 1e-12);
      EXPECT_NEAR(st.prefix, 1.0 / (1.0 + std::exp(-beta * cum)), 1e-12);
      EXPECT_GT(st.process, 0.0);
      EXPECT_LT(st.process, 1.0);
      next = st.last + 1;
    }
    EXPECT_EQ(next, T + 1);
    if (step >= T) {
      ASSERT_EQ(s.steps.size(), 1u);
      EXPECT_EQ(s.steps[0].process, s.steps[0].prefix);
    }
  }
  EXPECT_THROW(step_scores(std::vector<double>{0.1}, 0, 1.0), ContractError);
}

TEST(StepScores, FinalPrefixIsSequenceLogit) {
  Rng rng(8);
  const auto p = bitbudget(4);
  const auto arch = policy::architecture_for(p);
  const auto rm = random_snapshot(arch, rng, policy::Role::kRewardModel);
  const auto ref = random_snapshot(arch, rng, policy::Role::kReference);
  for (int i = 0; i < 20; ++i) {
    const auto tr = policy::sample_trajectory(arch, ref.params, p, {}, rng);
    const double beta = 0.05;
    const double v = reward::prefix_values(rm, ref, tr, beta).values.back();
    EXPECT_NEAR(step_scores(rm, ref, tr, 3, beta).steps.back().prefix, 1.0 / (1.0 + std::exp(-v)), 1e-12);
  }
}

TEST(Localize, Examples) {
  EXPECT_EQ(localize_first_error(std::vector<double>{0.9, 0.4, 0.8}, 0.5), 2);
  EXPECT_EQ(localize_first_error(std::vector<double>{0.9, 0.9}, 0.5), std::nullopt);
  EXPECT_EQ(localize_first_error(std::vector<double>{0.99, 0.999}, 1.0 - 1e-12), 1);
  EXPECT_THROW(localize_first_error(std::vector<double>{0.5}, 1.0), ContractError);
}

TEST(LocalizationF1, Examples) {
  using O = std::optional<int>;
  const std::vector<O> labels{O(2), O(1), O(), O()};
  EXPECT_EQ(localization_f1(labels, labels).f1, 1.0);
  const std::vector<O> half{O(2), O(3), O(), O()};
  const auto r = localization_f1(half, labels);
  EXPECT_EQ(r.acc_err, 0.5);
  EXPECT_EQ(r.acc_ok, 1.0);
  EXPECT_NEAR(r.f1, 2.0 / 3.0, 1e-15);
  EXPECT_EQ(r.num_err, 2);
  EXPECT_EQ(r.num_ok, 2);
  const std::vector<O> none(4);
  EXPECT_EQ(localization_f1(none, labels).f1, 0.0);
  const std::vector<O> only_err{O(1), O(2)};
  EXPECT_THROW(localization_f1(only_err, only_err), ContractError);
}

TEST(LocalizationF1, RangeAndPermutationInvariance) {
  Rng rng(9);
  for (int trial = 0; trial < 200; ++trial) {
    const int n = rng.uniform_int(2, 30);
    std::vector<std::optional<int>> pred(n), lab(n);
    for (int i = 0; i < n; ++i) {
      if (i == 0 || (i > 1 && rng.uniform() < 0.5)) lab[i] = rng.uniform_int(1, 3);
      if (rng.uniform() < 0.5) pred[i] = rng.uniform_int(1, 3);
    }
    const auto a = localization_f1(pred, lab);
    EXPECT_GE(a.f1, 0.0);
    EXPECT_LE(a.f1, 1.0);
    std::vector<int> perm(n);
    for (int i = 0; i < n; ++i) perm[i] = i;
    for (int i = n - 1; i > 0; --i) std::swap(perm[i], perm[rng.uniform_int(0, i)]);
    std::vector<std::optional<int>> p2(n), l2(n);
    for (int i = 0; i < n; ++i) p2[i] = pred[perm[i]], l2[i] = lab[perm[i]];
    EXPECT_EQ(localization_f1(p2, l2).f1, a.f1);
  }
}

TEST(EvaluateLocalization, IdentityModelFlagsNothing) {
  Rng rng(10);
  const auto arch = policy::architecture_for(bitbudget(10));
  const auto snap = random_snapshot(arch, rng, policy::Role::kRewardModel);
  env::LocalizationConfig lc;
  std::vector<env::LocalizationCase> cases;
  for (int i = 0; i < 100; ++i) cases.push_back(env::make_localization_case(lc, policy::as_prefix_policy(snap), rng));
  // Scores are exactly 0.5, never below the threshold.
  const auto r = evaluate_localization(snap, snap, cases, 10.0, Protocol::kProcess);
  for (const auto& p : r.predictions) EXPECT_EQ(p, std::nullopt);
  EXPECT_EQ(r.f1.acc_ok, 1.0);
  EXPECT_EQ(r.f1.acc_err, 0.0);
}

TEST(RmScore, Examples) {
  Rng rng(11);
  const auto p = modsum(2);
  const auto arch = policy::architecture_for(p);
  const auto a = random_snapshot(arch, rng, policy::Role::kRewardModel);
  std::vector<env::Trajectory> trs;
  for (int i = 0; i < 10; ++i) trs.push_back(policy::sample_trajectory(arch, a.params, p, {}, rng));
  EXPECT_EQ(rm_score_metric(a, a, trs), 0.0);

  // pi_ref(INC) = 0.1 and pi_rm(INC) = 0.1 e at every state.
  const auto bb = policy::architecture_for(bitbudget(8));
  auto rp = policy::zero_params(bb), fp = policy::zero_params(bb);
  fp.segment_values("output.b")[env::kSkip] = std::log(9.0);
  rp.segment_values("output.b")[env::kSkip] = std::log((1.0 - 0.1 * M_E) / (0.1 * M_E));
  env::Trajectory all_inc{bitbudget(8), std::vector<int>(10, env::kInc), {}, 0};
  const std::vector<env::Trajectory> one{all_inc};
  EXPECT_NEAR(rm_score_metric(policy::snapshot(bb, rp, policy::Role::kRewardModel),
                              policy::snapshot(bb, fp, policy::Role::kReference), one),
              1.0, 1e-12);
}

TEST(RmScore, EqualsMeanVbarOverBeta) {
  Rng rng(12);
  const auto p = modsum(5);
  const auto arch = policy::architecture_for(p);
  const auto rm = random_snapshot(arch, rng, policy::Role::kRewardModel);
  const auto ref = random_snapshot(arch, rng, policy::Role::kReference);
  std::vector<env::Trajectory> trs;
  for (int i = 0; i < 30; ++i) trs.push_back(policy::sample_trajectory(arch, ref.params, p, {}, rng));
  for (double beta : {0.05, 1.0, 10.0}) {
    double want = 0.0;
    for (const auto& tr : trs) {
      const auto s = reward::prefix_values(rm, ref, tr, beta);
      want += s.vbar(s.horizon()) / beta;
    }
    EXPECT_NEAR(rm_score_metric(rm, ref, trs), want / trs.size(), 1e-9);
  }
}

TEST(CandidateStats, UniformAndPointMass) {
  Rng rng(13);
  const auto p = modsum(1);
  const auto arch = policy::architecture_for(p);
  std::vector<env::Prompt> prompts(20, p);
  const auto uniform = policy::snapshot(arch, policy::zero_params(arch), policy::Role::kBehavior);
  auto s = candidate_stats(uniform, prompts, 0.1, rng);
  EXPECT_EQ(s.avg_size, 8.0);
  EXPECT_NEAR(s.avg_mass, 1.0, 1e-12);
  EXPECT_EQ(s.timesteps, 20 * 6);
  auto peaked = policy::zero_params(arch);
  peaked.segment_values("output.b")[3] = 60.0;
  s = candidate_stats(policy::snapshot(arch, peaked, policy::Role::kBehavior), prompts, 0.1, rng);
  EXPECT_EQ(s.avg_size, 1.0);
  EXPECT_NEAR(s.avg_mass, 1.0, 1e-12);
}

TEST(CandidateStats, MonotoneInThreshold) {
  Rng rng(14);
  const auto p = modsum(4);
  const auto arch = policy::architecture_for(p);
  for (int trial = 0; trial < 20; ++trial) {
    const auto beh = random_snapshot(arch, rng, policy::Role::kBehavior, 1.5);
    std::vector<env::Trajectory> trs;
    for (int i = 0; i < 50; ++i) trs.push_back(policy::sample_trajectory(arch, beh.params, p, {}, rng));
    CandidateStats prev{1e9, 1e9, 0};
    for (double pm : {0.01, 0.05, 0.1, 0.2, 0.4, 0.8}) {
      const auto s = candidate_stats(beh, trs, pm);
      EXPECT_LE(s.avg_size, prev.avg_size);
      EXPECT_LE(s.avg_mass, prev.avg_mass);
      prev = s;
    }
  }
}

// Pairwise-comparison AUC with half credit for ties.
double auc_oracle(const std::vector<double>& score, const std::vector<int>& label) {
  double wins = 0.0, pairs = 0.0;
  for (std::size_t i = 0; i < score.size(); ++i) {
    if (!label[i]) continue;
    for (std::size_t j = 0; j < score.size(); ++j) {
      if (label[j]) continue;
      pairs += 1.0;
      wins += score[i] > score[j] ? 1.0 : score[i] == score[j] ? 0.5 : 0.0;
    }
  }
  return wins / pairs;
}

TEST(FidelityStats, AgainstOracles) {
  Rng rng(15);
  for (int trial = 0; trial < 50; ++trial) {
    const int n = rng.uniform_int(5, 60);
    std::vector<double> td(n), v(n);
    std::vector<int> y(n);
    for (int i = 0; i < n; ++i) {
      y[i] = i < 2 ? i : rng.uniform() < 0.4;
      v[i] = std::round(4.0 * rng.normal()) / 2.0 + y[i];  // coarse, so ties occur
      td[i] = rng.normal() + y[i];
    }
    const auto s = fidelity_stats(td, v, y);
    std::vector<double> absv(n);
    for (int i = 0; i < n; ++i) absv[i] = std::abs(v[i]);
    ASSERT_TRUE(s.auc_signed && s.auc_abs && s.pearson);
    EXPECT_NEAR(*s.auc_signed, auc_oracle(v, y), 1e-12);
    EXPECT_NEAR(*s.auc_abs, auc_oracle(absv, y), 1e-12);
    double mt = 0, my = 0;
    for (int i = 0; i < n; ++i) mt += td[i] / n, my += static_cast<double>(y[i]) / n;
    double sty = 0, stt = 0, syy = 0;
    for (int i = 0; i < n; ++i) {
      sty += (td[i] - mt) * (y[i] - my);
      stt += (td[i] - mt) * (td[i] - mt);
      syy += (y[i] - my) * (y[i] - my);
    }
    EXPECT_NEAR(*s.pearson, sty / std::sqrt(stt * syy), 1e-9);
    EXPECT_EQ(s.count, n);
  }
}

TEST(FidelityStats, DegenerateInputs) {
  const std::vector<double> td(4, 0.3), v{1, 2, 3, 4};
  const std::vector<int> y{0, 1, 0, 1};
  const auto s = fidelity_stats(td, v, y);
  EXPECT_EQ(s.pearson, 0.0);
  EXPECT_TRUE(s.pearson_degenerate);
  const std::vector<int> same(4, 1);
  const auto u = fidelity_stats(v, v, same);
  EXPECT_FALSE(u.auc_signed.has_value());
  EXPECT_FALSE(u.auc_abs.has_value());
}

// A value equal to the logit of the exact success probability ranks perfectly.
TEST(FidelityStats, PerfectRankerAndNull) {
  Rng rng(16);
  std::vector<double> v, td;
  std::vector<int> y;
  for (int i = 0; i < 500; ++i) {
    const double q = 0.01 + 0.98 * rng.uniform();
    v.push_back(std::log(q / (1 - q)));
    td.push_back(v.back());
    y.push_back(q >= 0.5);
  }
  EXPECT_EQ(*fidelity_stats(td, v, y).auc_signed, 1.0);

  std::vector<double> noise(2000);
  std::vector<int> coin(2000);
  for (int i = 0; i < 2000; ++i) noise[i] = rng.normal(), coin[i] = rng.uniform() < 0.5;
  int n1 = 0;
  for (int c : coin) n1 += c;
  const int n0 = 2000 - n1;
  const double sd = std::sqrt((n0 + n1 + 1.0) / (12.0 * n0 * n1));
  EXPECT_NEAR(*fidelity_stats(noise, noise, coin).auc_signed, 0.5, 4 * sd);
}

TEST(TdFidelity, IdentityRmHasConstantTd) {
  Rng rng(17);
  const auto arch = policy::architecture_for(bitbudget(10));
  const auto beh = random_snapshot(arch, rng, policy::Role::kBehavior);
  TdFidelityOptions opts;
  opts.num_branches = 40;
  const auto r = td_fidelity(beh, beh, [](Rng& g) { return bitbudget(g.uniform_int(2, 8)); }, opts, rng);
  EXPECT_FALSE(r.records.empty());
  for (const auto& rec : r.records) {
    EXPECT_EQ(rec.td, 0.0);
    EXPECT_GE(rec.mc_success, 0);
    EXPECT_LE(rec.mc_success, rec.mc_total);
    ASSERT_TRUE(rec.exact_prob.has_value());  // BitBudget trees are small
  }
  EXPECT_TRUE(r.mc.pearson_degenerate);
  EXPECT_EQ(r.exact_count, static_cast<int>(r.records.size()));
}

TEST(Names, RoundTrip) {
  EXPECT_EQ(protocol_from_string(to_string(Protocol::kPrefix)), Protocol::kPrefix);
  EXPECT_EQ(bon_score_from_string(to_string(BonScore::kTotal)), BonScore::kTotal);
  EXPECT_THROW(protocol_from_string("nope"), ContractError);
}

}  // namespace
}  // namespace ipvrm::eval
