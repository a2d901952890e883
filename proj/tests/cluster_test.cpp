#include <sstream>

#include <gtest/gtest.h>

#include "coldfork/cluster.hpp"
#include "coldfork/presets.hpp"
#include "coldfork/workload.hpp"

using namespace coldfork;

namespace {

ClusterConfig small_cluster(int gpus = 1) {
  ClusterConfig c;
  c.hw = presets::a6000();
  c.hw.gpu_count = gpus;
  c.programs = {presets::make_llama_program(presets::llama3_8b()), presets::make_llama_program(presets::llama3_8b(true))};
  return c;
}

InvocationRecord request(std::uint64_t id, const std::string& f, double t, std::optional<std::string> adapter = {}) {
  return {id, f, t, Workload{2048, 1, std::move(adapter)}};
}

const std::string kBase = "llama3-8b";
const std::string kLora = "llama3-8b-lora";

}  // namespace

TEST(Cluster, FunctionIdsMatchPresets) {
  const Cluster c(small_cluster());
  EXPECT_TRUE(c.functions().count(kBase));
  EXPECT_TRUE(c.functions().count(kLora));
  EXPECT_TRUE(c.function(kLora).dynamic);
  EXPECT_FALSE(c.function(kBase).dynamic);
  EXPECT_THROW((void)c.function("ghost"), ConfigError);
}

TEST(Cluster, KeepAliveDefaultsToLoadingTime) {
  const Cluster c(small_cluster());
  const auto& f = c.function(kBase);
  EXPECT_DOUBLE_EQ(f.keep_alive_s, static_cast<double>(f.tmpl.model_bytes) / c.config().hw.pcie_bandwidth_bytes_per_s);
}

TEST(Cluster, RepeatWithinKeepAliveIsWarm) {
  const Cluster c(small_cluster());
  const auto run = run_cluster({request(0, kBase, 0), request(1, kBase, 1.0)}, c, Policy::tidal);
  EXPECT_EQ(run.results[0].decision, "run-fork");
  EXPECT_EQ(run.results[1].decision, "run-warm");
  EXPECT_DOUBLE_EQ(run.results[1].breakdown.ttft_s, run.results[1].breakdown.compute_s);
}

TEST(Cluster, SpacedRequestsFork) {
  const Cluster c(small_cluster());
  const double gap = c.function(kBase).keep_alive_s + 10.0;
  const auto run = run_cluster({request(0, kBase, 0), request(1, kBase, gap)}, c, Policy::tidal);
  EXPECT_EQ(run.results[1].decision, "run-fork");
  EXPECT_DOUBLE_EQ(run.results[0].ttft_s, run.results[1].ttft_s);
}

TEST(Cluster, DynamicFunctionKeepsStaticCoreOnlyUnderDk) {
  const Cluster c(small_cluster());
  const std::vector<InvocationRecord> reqs{request(0, kLora, 0, "a"), request(1, kLora, 1.0, "b")};
  EXPECT_EQ(run_cluster(reqs, c, Policy::tidal).results[1].decision, "run-fork");
  const auto dk = run_cluster(reqs, c, Policy::tidal_dk);
  EXPECT_EQ(dk.results[1].decision, "run-static-core");
  EXPECT_GT(dk.results[1].breakdown.dynamic_init_s, 0.0);
  EXPECT_LT(dk.results[1].ttft_s, dk.results[0].ttft_s);
}

TEST(Cluster, RejectsWhenWaitExceedsTimeout) {
  auto cfg = small_cluster();
  cfg.pool.request_timeout_s = 1.0;
  cfg.pool.keep_alive_s = 1e-3;
  const Cluster c(cfg);
  std::vector<InvocationRecord> reqs;
  for (std::uint64_t i = 0; i < 10; ++i) reqs.push_back(request(i, kBase, 0.0));
  const auto run = run_cluster(reqs, c, Policy::tidal);
  EXPECT_GT(run.rejected, 0u);
  for (const auto& r : run.results) {
    if (r.rejected) {
      EXPECT_EQ(r.decision, "reject");
    } else {
      EXPECT_LE(r.queue_s, 1.0);
    }
  }
  EXPECT_EQ(run.served_ttfts().size(), reqs.size() - run.rejected);
}

TEST(Cluster, BaselinePaysCodeLoadsAndFullLoading) {
  const Cluster c(small_cluster());
  const auto base = run_cluster({request(0, kBase, 0)}, c, Policy::baseline).results[0];
  const auto tidal = run_cluster({request(0, kBase, 0)}, c, Policy::tidal).results[0];
  EXPECT_EQ(base.decision, "run-cold");
  EXPECT_NEAR(base.breakdown.code_load_s, 0.179, 1e-9);
  EXPECT_EQ(tidal.breakdown.code_load_s, 0.0);
  EXPECT_GE(base.ttft_s - tidal.ttft_s, 0.179);
}

TEST(Cluster, MemoryNeverExceedsCapacity) {
  auto cfg = small_cluster(2);
  cfg.programs.push_back(presets::make_llama_program(presets::llama2_13b()));
  cfg.budget_functions = {kBase, "llama2-13b"};
  const Cluster c(cfg);
  std::vector<MixEntry> mix{{kBase, "code", RateClass::high, 0},
                            {kLora, "conversation", RateClass::medium, 8},
                            {"llama2-13b", "longbench", RateClass::high, 0}};
  const auto records = synthesize(mix, default_tasks(), {}, 600, 3);
  for (auto p : {Policy::baseline, Policy::tidal, Policy::tidal_dk, Policy::tidal_dk_budgeted}) {
    const auto run = run_cluster(records, c, p);
    for (const auto& g : run.gpus) EXPECT_LE(g.peak_bytes, g.capacity) << to_string(p);
  }
}

TEST(Cluster, BudgetedTemplatesShareTheBudget) {
  auto cfg = small_cluster(4);
  cfg.programs.push_back(presets::make_llama_program(presets::llama2_13b()));
  cfg.budget_functions = {kBase, "llama2-13b", kLora};
  cfg.pool.template_budget_bytes = 6 * kGB;
  const Cluster c(cfg);
  EXPECT_EQ(c.budget_gpu(0), 0u);
  EXPECT_EQ(c.budget_gpu(1), 1u);
  EXPECT_EQ(c.budget_gpu(2), 0u);
  EXPECT_EQ(c.budget_template_bytes(0), 3 * kGB);
  EXPECT_EQ(c.budget_template_bytes(1), std::min<Bytes>(6 * kGB, c.function("llama2-13b").sized_bytes));
  const auto gpus = initial_gpus(c, Policy::tidal_dk_budgeted);
  EXPECT_EQ(gpus[0].templates.size(), 2u);
  EXPECT_EQ(gpus[1].templates.size(), 1u);
  EXPECT_TRUE(gpus[2].templates.empty());
  EXPECT_TRUE(initial_gpus(c, Policy::tidal_dk)[0].templates.empty());
}

TEST(Cluster, UnknownBudgetFunctionIsAnError) {
  auto cfg = small_cluster();
  cfg.budget_functions = {"ghost"};
  EXPECT_THROW((void)Cluster(cfg), ConfigError);
}

TEST(Cluster, SelectBudgetFunctionsByRequestCount) {
  const Cluster c(small_cluster());
  const std::vector<InvocationRecord> reqs{request(0, kLora, 0, "a"), request(1, kLora, 1, "a"), request(2, kBase, 2)};
  EXPECT_EQ(select_budget_functions(reqs, c, 1), (std::vector<std::string>{kLora}));
  EXPECT_EQ(select_budget_functions(reqs, c, 5).size(), 2u);
}

TEST(Cluster, RunsAreDeterministic) {
  const Cluster c(small_cluster(2));
  std::vector<MixEntry> mix{{kBase, "code", RateClass::high, 0}, {kLora, "conversation", RateClass::high, 4}};
  const auto records = synthesize(mix, default_tasks(), {}, 300, 9);
  std::ostringstream a, b;
  write_results(a, run_cluster(records, c, Policy::tidal_dk).results);
  write_results(b, run_cluster(records, Cluster(small_cluster(2)), Policy::tidal_dk).results);
  EXPECT_EQ(a.str(), b.str());
}

TEST(Policy, NamesRoundTrip) {
  for (auto p : {Policy::baseline, Policy::tidal, Policy::tidal_dk, Policy::tidal_dk_budgeted})
    EXPECT_EQ(parse_policy(to_string(p)), p);
  EXPECT_THROW((void)parse_policy("nope"), ConfigError);
}
