#include "ipvrm/env.hpp"

#include <gtest/gtest.h>

#include <cmath>
#include <map>

#include "ipvrm/error.hpp"
#include "test_util.hpp"

namespace ipvrm::env {
namespace {

using testutil::bitbudget;
using testutil::modsum;

TEST(Step, ModSumAddsDigitValue) {
  auto s = step(reset(modsum(0)), 3);
  EXPECT_EQ(s.statistic, 3);
  EXPECT_EQ(s.t, 1);
  s.statistic = 5;
  EXPECT_EQ(step(s, 4).statistic, 2);
}

TEST(Step, BitBudgetSkipKeepsCount) {
  auto s = state_after(bitbudget(3, 5), std::vector<int>{kInc, kInc});
  EXPECT_EQ(s.statistic, 2);
  const auto n = step(s, kSkip);
  EXPECT_EQ(n.statistic, 2);
  EXPECT_EQ(n.t, 3);
}

TEST(Step, PastHorizonOrBadTokenIsContractError) {
  auto s = state_after(bitbudget(1, 2), std::vector<int>{kInc, kSkip});
  EXPECT_THROW(step(s, kInc), ContractError);
  EXPECT_THROW(step(reset(modsum(0)), 8), ContractError);
  EXPECT_THROW(step(reset(modsum(0)), -1), ContractError);
}

TEST(Validate, RejectsOutOfRangeTargets) {
  EXPECT_THROW(validate(modsum(7)), ContractError);
  EXPECT_THROW(validate(bitbudget(11, 10)), ContractError);
  EXPECT_THROW(validate(bitbudget(0, 0)), ContractError);
  EXPECT_NO_THROW(validate(bitbudget(0, 10)));
}

TEST(Verify, Examples) {
  // 10 mod 7 = 3
  EXPECT_EQ(verify(modsum(3, 3), std::vector<int>{4, 4, 2}), 1);
  EXPECT_EQ(verify(modsum(4, 3), std::vector<int>{4, 4, 2}), 0);
  EXPECT_EQ(verify(bitbudget(2, 3), std::vector<int>{kInc, kInc, kSkip}), 1);
  EXPECT_EQ(verify(bitbudget(1, 3), std::vector<int>{kInc, kInc, kSkip}), 0);
}

TEST(Verify, WrongLengthIsContractError) {
  EXPECT_THROW(verify(bitbudget(1, 3), std::vector<int>{kInc}), ContractError);
}

MarkovPolicy uniform_markov(int vocab) {
  return [vocab](const Prompt&, int, int) { return std::vector<double>(vocab, 1.0 / vocab); };
}

TEST(ExactSuccessProb, HandExamples) {
  EXPECT_DOUBLE_EQ(exact_success_prob(uniform_markov(2), reset(modsum(1, 1, 2, 2))), 0.5);
  EXPECT_DOUBLE_EQ(exact_success_prob(uniform_markov(2), reset(bitbudget(1, 2))), 0.5);
}

// Brute force over all 8^4 sequences for the uniform policy.
TEST(ExactSuccessProb, UniformModSumMatchesEnumeration) {
  const auto p = modsum(3, 4);
  int hits = 0, total = 0;
  for (int a = 0; a < 8; ++a)
    for (int b = 0; b < 8; ++b)
      for (int c = 0; c < 8; ++c)
        for (int d = 0; d < 8; ++d, ++total) hits += (a + b + c + d) % 7 == 3;
  EXPECT_NEAR(exact_success_prob(uniform_markov(8), reset(p)), static_cast<double>(hits) / total, 1e-12);
}

TEST(ExactSuccessProb, UnnormalizedPolicyIsContractError) {
  const MarkovPolicy bad = [](const Prompt&, int, int) { return std::vector<double>{0.6, 0.6}; };
  EXPECT_THROW(exact_success_prob(bad, reset(bitbudget(1, 2))), ContractError);
}

TEST(ExactSuccessProb, MonteCarloWithinFourSigma) {
  Rng rng(21);
  const auto p = modsum(2, 5);
  std::vector<std::vector<double>> table(5 * 7);
  for (auto& d : table) {
    d.resize(8);
    double z = 0.0;
    for (auto& x : d) z += (x = rng.uniform() + 0.05);
    for (auto& x : d) x /= z;
  }
  const MarkovPolicy pol = [&](const Prompt&, int t, int s) { return table[t * 7 + s]; };
  const double exact = exact_success_prob(pol, reset(p));
  int hits = 0;
  const int n = 10000;
  for (int i = 0; i < n; ++i) {
    auto s = reset(p);
    while (s.t < p.horizon) s = step(s, rng.categorical(pol(p, s.t, s.statistic)));
    hits += verify(p, s.tokens);
  }
  const double sd = std::sqrt(exact * (1 - exact) / n);
  EXPECT_NEAR(static_cast<double>(hits) / n, exact, 4 * sd);
}

TEST(ExactSuccessProb, PointMassMatchesVerifier) {
  Rng rng(4);
  for (int trial = 0; trial < 200; ++trial) {
    const auto p = trial % 2 ? modsum(rng.uniform_int(0, 6), 5) : bitbudget(rng.uniform_int(0, 6), 6);
    const int v = vocab_size(p);
    std::vector<int> y(p.horizon);
    for (auto& t : y) t = rng.uniform_int(0, v - 1);
    const PrefixPolicy point = [&](const EnvState& s) {
      std::vector<double> d(v, 0.0);
      d[y[s.t]] = 1.0;
      return d;
    };
    EXPECT_EQ(exact_success_prob(point, reset(p)) == 1.0, verify(p, y) == 1);
  }
}

// Two prefixes reaching the same (t, statistic) have the same success
// probability under a Markov policy.
TEST(ExactSuccessProb, DependsOnlyOnSufficientStatistic) {
  Rng rng(9);
  const MarkovPolicy pol = [](const Prompt&, int t, int s) {
    std::vector<double> d(8);
    double z = 0.0;
    for (int a = 0; a < 8; ++a) z += (d[a] = 1.0 + std::sin(1.0 + a * (t + 1) + s));
    for (auto& x : d) x /= z;
    return d;
  };
  const auto p = modsum(4, 6);
  for (int trial = 0; trial < 100; ++trial) {
    std::vector<int> a = {rng.uniform_int(0, 7), rng.uniform_int(0, 7)};
    std::vector<int> b = {(a[0] + a[1]) % 7, 0};
    EXPECT_NEAR(exact_success_prob(pol, state_after(p, a)), exact_success_prob(pol, state_after(p, b)), 1e-15);
  }
}

TEST(SuccessTable, AgreesWithRecursionForPrefixPolicies) {
  Rng rng(13);
  const auto p = modsum(5, 4);
  const auto arch = policy::architecture_for(p);
  const auto snap = policy::snapshot(arch, testutil::random_params(arch, rng, 0.7), policy::Role::kSft);
  const SuccessTable table(policy::as_batch_policy(snap), reset(p));
  EXPECT_NEAR(table.root_prob(), exact_success_prob(policy::as_prefix_policy(snap), reset(p)), 1e-12);
  for (int trial = 0; trial < 20; ++trial) {
    std::vector<int> pre = {rng.uniform_int(0, 7), rng.uniform_int(0, 7)};
    EXPECT_NEAR(table.prob(pre), exact_success_prob(policy::as_prefix_policy(snap), state_after(p, pre)), 1e-12);
  }
  const std::vector<int> full = {1, 2, 3, 6};
  EXPECT_EQ(table.prob(full), static_cast<double>(verify(p, full)));
}

TEST(ExactSoftValue, ClosedForms) {
  const auto p = bitbudget(1, 1);
  const PrefixPolicy half = [](const EnvState&) { return std::vector<double>{0.5, 0.5}; };
  for (double beta : {0.1, 1.0, 10.0}) {
    const RewardFn constant = [](const Trajectory&) { return 2.5; };
    EXPECT_NEAR(exact_soft_value(constant, half, reset(p), beta), 2.5, 1e-12);
    const RewardFn zero = [](const Trajectory&) { return 0.0; };
    EXPECT_NEAR(exact_soft_value(zero, half, reset(p), beta), 0.0, 1e-12);
    const RewardFn two = [beta](const Trajectory& tr) { return tr.tokens[0] == kInc ? 0.0 : beta * std::log(3.0); };
    EXPECT_NEAR(exact_soft_value(two, half, reset(p), beta), beta * std::log(2.0), 1e-12);
  }
}

TEST(ExactSoftValue, LargeBetaApproachesMeanReward) {
  const auto p = modsum(0, 3);
  const PrefixPolicy uniform = [](const EnvState&) { return std::vector<double>(8, 0.125); };
  const RewardFn r = [](const Trajectory& tr) { return static_cast<double>(tr.tokens[0] + tr.tokens[2]) / 7.0; };
  // Mean of (a + c) / 7 with a, c uniform on 0..7.
  EXPECT_NEAR(exact_soft_value(r, uniform, reset(p), 1e3), 1.0, 1e-2);
}

TEST(ExactSoftValue, BudgetExceededIsBudgetError) {
  const auto p = modsum(0, 9, 7, 8);  // 8^9 completions
  const PrefixPolicy uniform = [](const EnvState&) { return std::vector<double>(8, 0.125); };
  const RewardFn r = [](const Trajectory&) { return 0.0; };
  EXPECT_THROW(exact_soft_value(r, uniform, reset(p), 1.0), BudgetError);
}

TEST(OptimalValue, BitBudgetReachability) {
  const auto p = bitbudget(2, 4);
  EXPECT_EQ(optimal_value(p, 0, 0), 1);
  EXPECT_EQ(optimal_value(p, 3, 0), 0);  // two INC needed in one slot
  EXPECT_EQ(optimal_value(p, 2, 3), 0);  // overshoot
  EXPECT_EQ(optimal_value(p, 4, 2), 1);
}

TEST(TeacherTrajectory, AlwaysCorrect) {
  Rng rng(17);
  for (int i = 0; i < 300; ++i) {
    const auto p = i % 2 ? modsum(rng.uniform_int(0, 6)) : bitbudget(rng.uniform_int(2, 8));
    const auto tr = sample_teacher_trajectory(p, rng);
    EXPECT_EQ(tr.outcome, 1);
    EXPECT_EQ(verify(p, tr.tokens), 1);
  }
}

TEST(Localization, OvershootAtFirstTokenIsStepOne) {
  const auto p = bitbudget(0, 10);
  std::vector<int> y(10, kSkip);
  y[0] = kInc;
  EXPECT_EQ(first_error_position(p, y), 1);
  EXPECT_EQ(step_of_position(1, 2), 1);
  EXPECT_EQ(step_of_position(4, 2), 2);
  EXPECT_EQ(step_of_position(5, 2), 3);
}

TEST(Localization, GeneratedCasesSatisfyLabelInvariant) {
  Rng rng(23);
  const PrefixPolicy uniform = [](const EnvState&) { return std::vector<double>{0.5, 0.5}; };
  LocalizationConfig cfg;
  int with_error = 0;
  for (int i = 0; i < 1000; ++i) {
    const auto c = make_localization_case(cfg, uniform, rng);
    const auto& tr = c.trajectory;
    const auto pos = first_error_position(tr.prompt, tr.tokens);
    if (!c.first_error_step) {
      EXPECT_FALSE(pos.has_value());
      EXPECT_EQ(tr.outcome, 1);
      continue;
    }
    ++with_error;
    ASSERT_TRUE(pos.has_value());
    const auto before = state_after(tr.prompt, std::span<const int>(tr.tokens).first(*pos - 1));
    const auto after = step(before, tr.tokens[*pos - 1]);
    EXPECT_EQ(optimal_value(before), 1);
    EXPECT_EQ(optimal_value(after), 0);
    EXPECT_EQ(*c.first_error_step, step_of_position(*pos, cfg.step_size));
    EXPECT_EQ(tr.outcome, 0);
  }
  EXPECT_GT(with_error, 400);
  EXPECT_LT(with_error, 600);
}

TEST(Localization, JsonRoundTrip) {
  Rng rng(29);
  const PrefixPolicy uniform = [](const EnvState&) { return std::vector<double>{0.5, 0.5}; };
  for (int i = 0; i < 50; ++i) {
    const auto c = make_localization_case({}, uniform, rng);
    const auto back = localization_case_from_json_line(to_json_line(c));
    EXPECT_EQ(back.trajectory.prompt, c.trajectory.prompt);
    EXPECT_EQ(back.trajectory.tokens, c.trajectory.tokens);
    EXPECT_EQ(back.first_error_step, c.first_error_step);
    EXPECT_EQ(back.step_size, c.step_size);
  }
  EXPECT_THROW(localization_case_from_json_line("{not json"), ContractError);
}

}  // namespace
}  // namespace ipvrm::env
