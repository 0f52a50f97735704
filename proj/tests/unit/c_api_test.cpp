#include "ipvrm/ipvrm.h"

#include <gtest/gtest.h>
#include <unistd.h>

#include <cmath>
#include <cstring>
#include <filesystem>
#include <string>
#include <vector>

namespace {

// The C API test links only the shared library, so it keeps its own scratch dir.
std::string scratch(const std::string& tag) {
  const auto p = std::filesystem::temp_directory_path() /
                 ("ipvrm_capi_" + tag + "_" + std::to_string(::getpid()));
  std::filesystem::remove_all(p);
  std::filesystem::create_directories(p);
  return p.string();
}

ipvrm_prompt modsum_prompt(int target) { return ipvrm_prompt{IPVRM_ENV_MODSUM, target, 6, 7, 8}; }

TEST(CApi, VersionAndStatusNames) {
  EXPECT_GT(std::strlen(ipvrm_version()), 0u);
  EXPECT_STREQ(ipvrm_status_name(IPVRM_OK), "ok");
  EXPECT_STRNE(ipvrm_status_name(IPVRM_ERR_CONFIG), ipvrm_status_name(IPVRM_ERR_IO));
}

TEST(CApi, ConfigGetSetAndBufferContract) {
  ipvrm_config* cfg = nullptr;
  ASSERT_EQ(ipvrm_config_default(&cfg), IPVRM_OK);
  size_t needed = 0;
  char buf[64];
  ASSERT_EQ(ipvrm_config_get(cfg, "rm.margin", buf, sizeof buf, &needed), IPVRM_OK);
  EXPECT_STREQ(buf, "5.0");
  EXPECT_EQ(needed, 4u);
  ASSERT_EQ(ipvrm_config_set(cfg, "rl.ppo.alpha", "0.25"), IPVRM_OK);
  ASSERT_EQ(ipvrm_config_get(cfg, "rl.ppo.alpha", buf, sizeof buf, &needed), IPVRM_OK);
  EXPECT_STREQ(buf, "0.25");
  ASSERT_EQ(ipvrm_config_set(cfg, "rm.method", "dpo"), IPVRM_OK);  // bare string

  // Size query with no buffer, then truncation.
  ASSERT_EQ(ipvrm_config_to_json(cfg, nullptr, 0, &needed), IPVRM_OK);
  std::vector<char> full(needed);
  ASSERT_EQ(ipvrm_config_to_json(cfg, full.data(), full.size(), &needed), IPVRM_OK);
  EXPECT_EQ(std::strlen(full.data()) + 1, needed);
  EXPECT_NE(std::string(full.data()).find("\"dpo\""), std::string::npos);
  char small[8];
  ASSERT_EQ(ipvrm_config_to_json(cfg, small, sizeof small, &needed), IPVRM_OK);
  EXPECT_EQ(std::strlen(small), 7u);
  EXPECT_EQ(std::string(small), std::string(full.data(), 7));
  ipvrm_config_free(cfg);
}

TEST(CApi, ErrorsSetStatusAndMessage) {
  ipvrm_config* cfg = nullptr;
  ASSERT_EQ(ipvrm_config_default(&cfg), IPVRM_OK);
  EXPECT_STREQ(ipvrm_last_error(), "");
  EXPECT_EQ(ipvrm_config_set(cfg, "rl.bogus", "1"), IPVRM_ERR_CONFIG);
  EXPECT_NE(std::string(ipvrm_last_error()).find("rl.bogus"), std::string::npos) << ipvrm_last_error();
  EXPECT_EQ(ipvrm_config_set(cfg, nullptr, "1"), IPVRM_ERR_INVALID_ARGUMENT);
  ASSERT_EQ(ipvrm_config_set(cfg, "rl.ppo.eps_low", "2.0"), IPVRM_OK);
  EXPECT_STREQ(ipvrm_last_error(), "");
  ASSERT_EQ(ipvrm_config_set(cfg, "workers", "0"), IPVRM_OK);
  EXPECT_EQ(ipvrm_config_validate(cfg), IPVRM_ERR_CONFIG);
  const std::string msg = ipvrm_last_error();
  EXPECT_NE(msg.find("eps_low"), std::string::npos) << msg;
  EXPECT_NE(msg.find("workers"), std::string::npos) << msg;
  EXPECT_EQ(ipvrm_run("bogus-stage", cfg), IPVRM_ERR_CONFIG);
  ipvrm_config_free(cfg);

  ipvrm_config* missing = nullptr;
  EXPECT_EQ(ipvrm_config_load("/nonexistent/cfg.json", &missing), IPVRM_ERR_IO);
  ipvrm_policy* pol = nullptr;
  EXPECT_EQ(ipvrm_policy_load("/nonexistent/p.ckpt", &pol), IPVRM_ERR_IO);
}

TEST(CApi, StageDependencyError) {
  const std::string dir = scratch("dep");
  ipvrm_config* cfg = nullptr;
  ASSERT_EQ(ipvrm_config_default(&cfg), IPVRM_OK);
  ASSERT_EQ(ipvrm_config_set(cfg, "out_dir", dir.c_str()), IPVRM_OK);
  EXPECT_EQ(ipvrm_run("train-rm", cfg), IPVRM_ERR_STAGE_DEPENDENCY);
  EXPECT_NE(std::string(ipvrm_last_error()).find("sft"), std::string::npos);
  ipvrm_config_free(cfg);
  std::filesystem::remove_all(dir);
}

TEST(CApi, Verify) {
  const auto p = modsum_prompt(3);
  const int ok[] = {1, 2, 0, 0, 0, 0};
  const int bad[] = {1, 1, 0, 0, 0, 0};
  int outcome = -1;
  ASSERT_EQ(ipvrm_verify(&p, ok, 6, &outcome), IPVRM_OK);
  EXPECT_EQ(outcome, 1);
  ASSERT_EQ(ipvrm_verify(&p, bad, 6, &outcome), IPVRM_OK);
  EXPECT_EQ(outcome, 0);
  EXPECT_EQ(ipvrm_verify(&p, ok, 5, &outcome), IPVRM_ERR_CONTRACT);
  const ipvrm_prompt weird{7, 0, 6, 7, 8};
  EXPECT_EQ(ipvrm_verify(&weird, ok, 6, &outcome), IPVRM_ERR_CONTRACT);
  EXPECT_EQ(ipvrm_verify(&p, ok, 6, nullptr), IPVRM_ERR_INVALID_ARGUMENT);
}

// Runs the sft stage through the C API and queries the checkpoint.
TEST(CApi, PolicyInference) {
  const std::string dir = scratch("sft");
  ipvrm_config* cfg = nullptr;
  ASSERT_EQ(ipvrm_config_default(&cfg), IPVRM_OK);
  ASSERT_EQ(ipvrm_config_set(cfg, "out_dir", dir.c_str()), IPVRM_OK);
  ASSERT_EQ(ipvrm_config_set(cfg, "sft.steps", "50"), IPVRM_OK);
  ASSERT_EQ(ipvrm_config_set(cfg, "sft.num_traces", "100"), IPVRM_OK);
  ASSERT_EQ(ipvrm_run("sft", cfg), IPVRM_OK) << ipvrm_last_error();
  ipvrm_config_free(cfg);

  ipvrm_policy* pol = nullptr;
  ASSERT_EQ(ipvrm_policy_load((dir + "/checkpoints/sft.ckpt").c_str(), &pol), IPVRM_OK);
  ipvrm_policy_info info{};
  ASSERT_EQ(ipvrm_policy_info_get(pol, &info), IPVRM_OK);
  EXPECT_EQ(info.role, 0);
  EXPECT_EQ(info.vocab, 8);
  EXPECT_GT(info.num_params, 0u);

  const auto p = modsum_prompt(4);
  const int prefix[] = {3, 5};
  std::vector<double> probs(info.vocab);
  ASSERT_EQ(ipvrm_policy_next_token_probs(pol, &p, prefix, 2, probs.data(), probs.size()), IPVRM_OK);
  double z = 0.0;
  for (double q : probs) {
    EXPECT_GT(q, 0.0);
    z += q;
  }
  EXPECT_NEAR(z, 1.0, 1e-12);
  EXPECT_EQ(ipvrm_policy_next_token_probs(pol, &p, prefix, 2, probs.data(), 3), IPVRM_ERR_CONTRACT);
  const int full[] = {0, 0, 0, 0, 0, 0};
  EXPECT_EQ(ipvrm_policy_next_token_probs(pol, &p, full, 6, probs.data(), probs.size()), IPVRM_ERR_CONTRACT);
  const ipvrm_prompt bb{IPVRM_ENV_BITBUDGET, 3, 10, 0, 0};
  EXPECT_EQ(ipvrm_policy_next_token_probs(pol, &bb, nullptr, 0, probs.data(), probs.size()), IPVRM_ERR_CONTRACT);

  // Save and reload gives identical probabilities.
  const std::string copy = dir + "/copy.ckpt";
  ASSERT_EQ(ipvrm_policy_save(pol, copy.c_str()), IPVRM_OK);
  ipvrm_policy* again = nullptr;
  ASSERT_EQ(ipvrm_policy_load(copy.c_str(), &again), IPVRM_OK);
  std::vector<double> probs2(info.vocab);
  ASSERT_EQ(ipvrm_policy_next_token_probs(again, &p, prefix, 2, probs2.data(), probs2.size()), IPVRM_OK);
  EXPECT_EQ(probs, probs2);
  ipvrm_policy_free(again);
  ipvrm_policy_free(pol);
  std::filesystem::remove_all(dir);
}

}  // namespace
