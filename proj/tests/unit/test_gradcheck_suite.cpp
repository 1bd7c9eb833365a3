#include <gtest/gtest.h>

#include <chrono>
#include <set>

#include "tanet/gradcheck_suite.hpp"

using namespace tanet;

TEST(GradcheckSuite, ScopesPartitionTheRegistry) {
  const auto all = gradcheck_cases();
  std::set<std::string> names;
  std::size_t total = 0;
  for (const auto& scope : gradcheck_scopes()) {
    const auto cases = gradcheck_cases(scope);
    EXPECT_FALSE(cases.empty()) << scope;
    total += cases.size();
    for (const auto& c : cases) {
      EXPECT_EQ(c.scope, scope);
      EXPECT_TRUE(names.insert(c.name).second) << c.name;
    }
  }
  EXPECT_EQ(total, all.size());
  EXPECT_EQ(gradcheck_cases("all").size(), all.size());
  EXPECT_THROW(gradcheck_cases("bogus"), std::invalid_argument);
}

TEST(GradcheckSuite, CoversRequiredOperators) {
  std::set<std::string> names;
  for (const auto& c : gradcheck_cases()) names.insert(c.name);
  for (const char* n : {"conv2d", "batch_norm_train", "linear", "avg_pool2", "global_avg_pool", "upsample_bilinear",
                        "softmax_cross_entropy", "smooth_l1", "bilinear_sample_input", "bilinear_sample_grid",
                        "affine_grid", "lbp_forward", "spatial_path", "handcrafted_path", "global_path",
                        "fusion_head", "crop_to_logits"})
    EXPECT_TRUE(names.count(n)) << n;
}

TEST(GradcheckSuite, EveryCheckPassesAtStep1em4WithinBudget) {
  const auto t0 = std::chrono::steady_clock::now();
  for (const auto& c : gradcheck_cases()) {
    const GradCheckResult r = c.run(1e-4);
    EXPECT_GT(r.checked, 0u) << c.name;
    EXPECT_LT(r.max_rel_error, kGradCheckTolerance) << c.name << " worst at " << r.worst;
  }
  const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  EXPECT_LT(secs, 300.0);
}

TEST(GradcheckSuite, CorruptedRuleIsCaught) {
  const auto c = corrupted_gradcheck_case();
  EXPECT_GT(c.run(1e-4).max_rel_error, 1e-2);
}
