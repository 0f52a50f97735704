#include "ipvrm/implicit_reward.hpp"

#include <gtest/gtest.h>

#include <cmath>

#include "ipvrm/error.hpp"
#include "test_util.hpp"

namespace ipvrm::reward {
namespace {

using testutil::bitbudget;
using testutil::modsum;

// One dummy parameter so a tape can be built around constant inputs.
ad::ParamVector dummy() {
  ad::ParamVector p;
  p.add_segment("unused", 1, 1);
  return p;
}

// N x T cumulative values from per-step vbar rows.
ad::Matrix values_from_vbar(const std::vector<std::vector<double>>& vbars) {
  const int n = static_cast<int>(vbars.size()), T = static_cast<int>(vbars[0].size());
  ad::Matrix m(n, T);
  for (int i = 0; i < n; ++i)
    for (int t = 1; t <= T; ++t) m(i, t - 1) = vbars[i][t - 1] * t;
  return m;
}

double eval_const(const std::function<ad::Var(ad::Tape&)>& f) {
  ad::Tape tape(dummy());
  return f(tape).value()[0];
}

// Snapshot over BitBudget with output bias favoring SKIP by `skip_logit`.
policy::PolicySnapshot biased(double skip_logit) {
  const auto arch = policy::architecture_for(bitbudget(3));
  auto params = policy::zero_params(arch);
  params.segment_values("output.b")[env::kSkip] = skip_logit;
  return policy::snapshot(arch, params, policy::Role::kRewardModel);
}

TEST(TokenLogRatio, Examples) {
  const auto s = env::reset(bitbudget(3));
  const auto half = biased(0.0);
  const auto quarter = biased(std::log(3.0));  // pi(INC) = 1/4
  EXPECT_EQ(token_log_ratio(half, half, s, env::kInc, 10.0), 0.0);
  EXPECT_NEAR(token_log_ratio(half, quarter, s, env::kInc, 1.0), std::log(2.0), 1e-12);
  EXPECT_NEAR(token_log_ratio(half, quarter, s, env::kInc, 2.0),
              2.0 * token_log_ratio(half, quarter, s, env::kInc, 1.0), 1e-12);
}

TEST(PrefixValues, IdentityPairIsZero) {
  Rng rng(1);
  const auto p = modsum(4);
  const auto arch = policy::architecture_for(p);
  const auto snap = policy::snapshot(arch, testutil::random_params(arch, rng), policy::Role::kSft);
  const auto tr = policy::sample_trajectory(arch, snap.params, p, {}, rng);
  const auto series = prefix_values(snap, snap, tr, 10.0);
  ASSERT_EQ(series.horizon(), 6);
  for (double v : series.values) EXPECT_EQ(v, 0.0);
}

TEST(PrefixValues, ConstantRatioArithmetic) {
  // rm pi(INC) = 1/2, ref pi(INC) = 1/4 at every state: each INC adds ln 2.
  const auto half = biased(0.0), quarter = biased(std::log(3.0));
  env::Trajectory tr;
  tr.prompt = bitbudget(3);
  tr.tokens.assign(10, env::kSkip);
  tr.tokens[0] = tr.tokens[1] = tr.tokens[2] = env::kInc;
  const auto series = prefix_values(half, quarter, tr, 1.0);
  EXPECT_NEAR(series.values[3], 3 * std::log(2.0), 1e-12);
  EXPECT_NEAR(series.vbar(3), std::log(2.0), 1e-12);
  EXPECT_EQ(series.values[0], 0.0);
}

// Telescoping: consecutive differences are token log-ratios, on 1000 random triples.
TEST(PrefixValues, TelescopingProperty) {
  Rng rng(2);
  for (int trial = 0; trial < 1000; ++trial) {
    const auto p = trial % 2 ? modsum(rng.uniform_int(0, 6), 4) : bitbudget(rng.uniform_int(2, 6), 6);
    const auto arch = policy::architecture_for(p, 2, 3, 6);
    const auto rm = policy::snapshot(arch, testutil::random_params(arch, rng), policy::Role::kRewardModel);
    const auto ref = policy::snapshot(arch, testutil::random_params(arch, rng), policy::Role::kReference);
    const double beta = 0.1 + 9.9 * rng.uniform();
    const auto tr = policy::sample_trajectory(arch, ref.params, p, {}, rng);
    const auto series = prefix_values(rm, ref, tr, beta);
    auto s = env::reset(p);
    for (int t = 0; t < p.horizon; ++t) {
      const double want = token_log_ratio(rm, ref, s, tr.tokens[t], beta);
      ASSERT_NEAR(series.values[t + 1] - series.values[t], want, 1e-9);
      ASSERT_NEAR(series.token_reward(t + 1), want, 1e-9);
      s = env::step(s, tr.tokens[t]);
    }
  }
}

TEST(PrefixValues, GraphMatchesPlainEvaluation) {
  Rng rng(3);
  const auto p = modsum(2);
  const auto arch = policy::architecture_for(p);
  const auto rm = policy::snapshot(arch, testutil::random_params(arch, rng), policy::Role::kRewardModel);
  const auto ref = policy::snapshot(arch, testutil::random_params(arch, rng), policy::Role::kReference);
  std::vector<env::Trajectory> trs;
  for (int i = 0; i < 4; ++i) trs.push_back(policy::sample_trajectory(arch, ref.params, p, {}, rng));
  ad::Tape tape(rm.params);
  const auto m = prefix_values_graph(tape, arch, ref, trs, 10.0).value();
  for (int i = 0; i < 4; ++i) {
    const auto series = prefix_values(rm, ref, trs[i], 10.0);
    for (int t = 1; t <= 6; ++t) EXPECT_NEAR(m(i, t - 1), series.values[t], 1e-9);
  }
}

TEST(StepWeights, NormalizedShapes) {
  for (int T : {1, 2, 6, 10}) {
    for (Weighting w : {Weighting::kUniform, Weighting::kLate, Weighting::kEarly}) {
      const auto ws = step_weights(T, w);
      double z = 0.0;
      for (double x : ws) z += x;
      EXPECT_NEAR(z, 1.0, 1e-12);
    }
    const auto late = step_weights(T, Weighting::kLate);
    for (int t = 1; t < T; ++t) EXPECT_GT(late[t], late[t - 1]);
  }
  EXPECT_EQ(step_weights(1, Weighting::kLate), step_weights(1, Weighting::kEarly));
}

TEST(IpvrmLoss, BoundaryExamples) {
  const std::vector<int> pos{1}, neg{0};
  for (Weighting w : {Weighting::kUniform, Weighting::kLate, Weighting::kEarly}) {
    const double a = eval_const([&](ad::Tape& t) {
      return ipvrm_loss(t.constant(values_from_vbar({{5, 5, 5, 5}})), pos, 5.0, w);
    });
    const double b = eval_const([&](ad::Tape& t) {
      return ipvrm_loss(t.constant(values_from_vbar({{-5, -5, -5, -5}})), neg, 5.0, w);
    });
    EXPECT_NEAR(a, std::log(2.0), 1e-12);
    EXPECT_NEAR(b, std::log(2.0), 1e-12);
  }
}

TEST(IpvrmLoss, SingleStepWeightingsAgree) {
  const std::vector<int> pos{1};
  std::vector<double> out;
  for (Weighting w : {Weighting::kUniform, Weighting::kLate, Weighting::kEarly})
    out.push_back(eval_const([&](ad::Tape& t) { return ipvrm_loss(t.constant(values_from_vbar({{1.3}})), pos, 5.0, w); }));
  EXPECT_EQ(out[0], out[1]);
  EXPECT_EQ(out[0], out[2]);
}

TEST(IpvrmLoss, ZeroMarginSingleStepIsPlainBce) {
  Rng rng(4);
  for (int trial = 0; trial < 100; ++trial) {
    const double v = 8.0 * rng.normal();
    const int y = trial % 2;
    const std::vector<int> label{y};
    const double got = eval_const([&](ad::Tape& t) {
      return ipvrm_loss(t.constant(ad::Matrix(1, 1, v)), label, 0.0, Weighting::kUniform);
    });
    // -log sigmoid(v) and -log(1 - sigmoid(v)) in softplus form.
    const double want = y ? std::log1p(std::exp(-v)) : std::log1p(std::exp(v));
    EXPECT_NEAR(got, want, 1e-12 * std::max(1.0, std::abs(want))) << v;
  }
}

// Per-step positive loss is non-decreasing in t when vbar is non-increasing.
TEST(IpvrmLoss, LateDominatesEarlyOnMonotoneSeries) {
  Rng rng(5);
  for (int trial = 0; trial < 200; ++trial) {
    const int T = rng.uniform_int(1, 10);
    std::vector<double> vb(T);
    double v = 10.0 * rng.normal();
    for (auto& x : vb) x = (v -= std::abs(rng.normal()));
    const std::vector<int> pos{1};
    const auto m = values_from_vbar({vb});
    const double late = eval_const([&](ad::Tape& t) { return ipvrm_loss(t.constant(m), pos, 5.0, Weighting::kLate); });
    const double early = eval_const([&](ad::Tape& t) { return ipvrm_loss(t.constant(m), pos, 5.0, Weighting::kEarly); });
    EXPECT_GE(late, early - 1e-12);
  }
}

TEST(IpvrmLoss, NegativeMarginIsContractError) {
  const std::vector<int> pos{1};
  EXPECT_THROW(eval_const([&](ad::Tape& t) {
    return ipvrm_loss(t.constant(ad::Matrix(1, 2)), pos, -1.0, Weighting::kUniform);
  }), ContractError);
}

TEST(ImplicitPrmLoss, Examples) {
  const std::vector<int> pos{1};
  EXPECT_NEAR(eval_const([&](ad::Tape& t) { return implicit_prm_loss(t.constant(ad::Matrix(1, 3)), pos); }),
              std::log(2.0), 1e-15);
  EXPECT_LT(eval_const([&](ad::Tape& t) {
    return implicit_prm_loss(t.constant(ad::Matrix(1, 3, std::vector<double>{0, 0, 50.0})), pos);
  }), 1e-20);
}

TEST(DpoLoss, Examples) {
  const auto w0 = ad::Matrix(1, 2, std::vector<double>{0.0, std::log(3.0)});
  const auto l0 = ad::Matrix(1, 2);
  EXPECT_NEAR(eval_const([&](ad::Tape& t) { return dpo_loss(t.constant(l0), t.constant(l0)); }), std::log(2.0), 1e-15);
  const double l = eval_const([&](ad::Tape& t) { return dpo_loss(t.constant(w0), t.constant(l0)); });
  EXPECT_NEAR(l, std::log(4.0 / 3.0), 1e-12);
  const double swapped = eval_const([&](ad::Tape& t) { return dpo_loss(t.constant(l0), t.constant(w0)); });
  EXPECT_NEAR(swapped, -std::log(1.0 - std::exp(-l)), 1e-12);
}

TEST(DpoLoss, IdentityModelsGiveLn2) {
  Rng rng(6);
  const auto p = bitbudget(4);
  const auto arch = policy::architecture_for(p);
  const auto ref = policy::snapshot(arch, testutil::random_params(arch, rng), policy::Role::kReference);
  const auto a = env::sample_teacher_trajectory(p, rng);
  auto b = a;
  b.tokens.assign(10, env::kSkip);
  b.outcome = 0;
  ad::Tape tape(ref.params);
  EXPECT_NEAR(dpo_loss(tape, arch, ref, a, b, 0.05).value()[0], std::log(2.0), 1e-12);
  b.prompt = bitbudget(5);
  ad::Tape tape2(ref.params);
  EXPECT_THROW(dpo_loss(tape2, arch, ref, a, b, 0.05), ContractError);
}

TEST(GroupContext, StatisticsAndClamp) {
  const std::vector<int> mixed{1, 0, 1, 0};
  const auto g = make_group_context(mixed);
  EXPECT_EQ(g.mu, 0.5);
  EXPECT_EQ(g.s, 0.5);
  EXPECT_EQ(g.baseline, 0.0);
  const std::vector<int> all{1, 1, 1, 1};
  const auto h = make_group_context(all);
  EXPECT_EQ(h.s, 0.0);
  EXPECT_NEAR(h.baseline, std::log(7.0), 1e-12);
  EXPECT_THROW(make_group_context(std::vector<int>{}), ContractError);
}

TEST(OnlineIpvrmLoss, NeutralDifficultyHalvesOffline) {
  const std::vector<int> labels{1, 0};
  const std::vector<int> outcomes{1, 0};
  const std::vector<GroupContext> groups(2, make_group_context(outcomes));
  const auto m = values_from_vbar({{0.3, -2.0, 6.0}, {1.0, 4.0, -3.0}});
  const double online = eval_const([&](ad::Tape& t) { return online_ipvrm_loss(t.constant(m), labels, 5.0, groups, {}); });
  const double offline = eval_const([&](ad::Tape& t) { return ipvrm_loss(t.constant(m), labels, 5.0, Weighting::kUniform); });
  EXPECT_NEAR(online, 0.5 * offline, 1e-12);
}

TEST(OnlineIpvrmLoss, SaturatedGroupWeight) {
  const int n = 4;
  const std::vector<int> labels{1};
  const std::vector<GroupContext> groups{make_group_context(std::vector<int>(n, 1))};
  const auto m = values_from_vbar({{0.0, 0.0}});
  OnlineFlags dlw_only{false, true};
  const double got = eval_const([&](ad::Tape& t) { return online_ipvrm_loss(t.constant(m), labels, 5.0, groups, dlw_only); });
  const double plain = eval_const([&](ad::Tape& t) { return ipvrm_loss(t.constant(m), labels, 5.0, Weighting::kUniform); });
  EXPECT_NEAR(got, plain / (2.0 * n), 1e-12);
}

TEST(OnlineIpvrmLoss, FlagsOffEqualsUniformIpvrm) {
  Rng rng(7);
  for (int trial = 0; trial < 50; ++trial) {
    std::vector<std::vector<double>> vb(3, std::vector<double>(5));
    for (auto& row : vb)
      for (auto& x : row) x = 6.0 * rng.normal();
    const std::vector<int> labels{1, 0, 1};
    const std::vector<GroupContext> groups(3, make_group_context(std::vector<int>{1, 1, 0}));
    const auto m = values_from_vbar(vb);
    const double online = eval_const([&](ad::Tape& t) { return online_ipvrm_loss(t.constant(m), labels, 5.0, groups, {false, false}); });
    const double offline = eval_const([&](ad::Tape& t) { return ipvrm_loss(t.constant(m), labels, 5.0, Weighting::kUniform); });
    EXPECT_NEAR(online, offline, 1e-12 * std::max(1.0, offline));
  }
}

TEST(OnlineIpvrmLoss, PositiveLossDecreasesInBaseline) {
  const std::vector<int> labels{1};
  const auto m = values_from_vbar({{-1.0, 2.0, 0.5}});
  double prev = INFINITY;
  for (double b = -8.0; b <= 8.0; b += 0.25) {
    GroupContext g;
    g.n = 8;
    g.mu = 0.5;
    g.baseline = b;
    const std::vector<GroupContext> groups{g};
    const double l = eval_const([&](ad::Tape& t) { return online_ipvrm_loss(t.constant(m), labels, 5.0, groups, {true, false}); });
    EXPECT_LT(l, prev) << b;
    prev = l;
  }
}

// Every objective on real rm parameters against central differences.
TEST(Losses, GradientsMatchFiniteDifferences) {
  Rng rng(8);
  for (int trial = 0; trial < 100; ++trial) {
    const auto p = trial % 2 ? modsum(rng.uniform_int(0, 6), 3) : bitbudget(rng.uniform_int(1, 3), 4);
    const auto arch = policy::architecture_for(p, 2, 3, 5);
    const auto rm = testutil::random_params(arch, rng);
    const auto ref = policy::snapshot(arch, testutil::random_params(arch, rng), policy::Role::kReference);
    std::vector<env::Trajectory> trs;
    std::vector<int> labels;
    for (int i = 0; i < 4; ++i) {
      trs.push_back(policy::sample_trajectory(arch, ref.params, p, {}, rng));
      labels.push_back(i % 2);
    }
    const double beta = trial % 3 == 0 ? 0.05 : 2.0;
    const std::vector<GroupContext> groups(4, make_group_context(labels));
    const int kind = trial % 5;
    const ad::LossBuilder f = [&](ad::Tape& t) {
      const ad::Var v = prefix_values_graph(t, arch, ref, trs, beta);
      switch (kind) {
        case 0: return ipvrm_loss(v, labels, 0.5, Weighting::kUniform);
        case 1: return ipvrm_loss(v, labels, 0.5, Weighting::kLate);
        case 2: return implicit_prm_loss(v, labels);
        case 3: return online_ipvrm_loss(v, labels, 0.5, groups, {});
        default: {
          const std::span<const env::Trajectory> all(trs);
          return dpo_loss(prefix_values_graph(t, arch, ref, all.subspan(0, 2), beta),
                          prefix_values_graph(t, arch, ref, all.subspan(2, 2), beta));
        }
      }
    };
    EXPECT_LE(testutil::fd_max_rel_error(f, rm, 1e-4), 1e-4) << "trial " << trial;
  }
}

TEST(Names, RoundTrip) {
  for (RmMethod m : {RmMethod::kIpvrm, RmMethod::kIpvrmLate, RmMethod::kIpvrmEarly, RmMethod::kImplicitPrm, RmMethod::kDpo})
    EXPECT_EQ(rm_method_from_string(to_string(m)), m);
  EXPECT_TRUE(is_ipvrm(RmMethod::kIpvrmLate));
  EXPECT_FALSE(is_ipvrm(RmMethod::kDpo));
  EXPECT_EQ(weighting_of(RmMethod::kIpvrmEarly), Weighting::kEarly);
  EXPECT_THROW(rm_method_from_string("bogus"), ContractError);
}

}  // namespace
}  // namespace ipvrm::reward
