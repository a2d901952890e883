#include <random>
#include <sstream>
#include <thread>

#include <gtest/gtest.h>

#include "coldfork/fork.hpp"
#include "coldfork/presets.hpp"
#include "helpers.hpp"

using namespace coldfork;

namespace {

/// Five weights initialized w1..w5 and read as w1, w2, w5, w4, w3; w2 comes
/// from the request adapter.
FunctionProgram five_program() {
  FunctionProgram p;
  p.function_id = "five";
  for (int i = 1; i <= 5; ++i) {
    const auto w = fmt::format("w{}", i);
    p.init_ops.emplace_back(LoadCheckpoint{i == 2 ? kAdapterPlaceholder : "base", w, static_cast<Bytes>(i) * kGB});
    p.init_ops.emplace_back(ToGpu{w});
  }
  for (const char* w : {"w1", "w2", "w5", "w4", "w3"}) p.inference_ops.push_back({fmt::format("k_{}", w), {w}, {}, 0.2, 0});
  return p;
}

Workload adapter(const char* id) { return {256, 1, std::string(id)}; }

FunctionTemplate five_template(PrefetchSpec prefetch, std::size_t max_transfers = 300) {
  const auto p = five_program();
  std::vector<TracePair> tr;
  for (const char* id : {"A", "B"}) tr.push_back({trace_init(p, adapter(id)), trace_inference(p, adapter(id))});
  return generate_template(p.function_id, false, tr, cft::plain_hw(10e9), 0.5, {max_transfers, prefetch});
}

StartupPlan five_plan(const FunctionTemplate& tpl, const char* id = "C") {
  const auto p = five_program();
  return plan_startup(tpl, trace_init(p, adapter(id)), trace_inference(p, adapter(id)));
}

}  // namespace

TEST(PlanStartup, FullyResidentTemplateReusesEverything) {
  const auto p = cft::chain_program({kGB, kGB}, {{"w1"}, {"w2"}}, {1, 1});
  const auto tpl = cft::single_trace_template(p, {}, cft::plain_hw(1e9), PrefetchSpec::full());
  const auto plan = plan_startup(tpl, trace_init(p, {}), trace_inference(p, {}));
  EXPECT_EQ(plan.count_kind(0), 2u);
  EXPECT_TRUE(plan.sync_barriers.empty());
  EXPECT_TRUE(plan.replay_order.empty());
}

TEST(PlanStartup, MismatchReplaysAndAccessOrderedLoads) {
  const auto plan = five_plan(five_template(PrefetchSpec::fixed(0)));
  EXPECT_TRUE(std::holds_alternative<ReplayInit>(plan.actions.at("w2")));
  EXPECT_EQ(std::get<ReplayInit>(plan.actions.at("w2")).source, ReplayInit::Source::storage);
  const auto& w4 = std::get<AsyncLoad>(plan.actions.at("w4"));
  const auto& w3 = std::get<AsyncLoad>(plan.actions.at("w3"));
  EXPECT_LT(w4.order_index, w3.order_index);
  EXPECT_EQ(plan.replay_order, (std::vector<std::string>{"w2"}));
}

TEST(PlanStartup, ReaderOfAnAsyncGroupWaitsForIt) {
  const auto tpl = five_template(PrefetchSpec::fixed(0));
  const auto plan = five_plan(tpl);
  // Kernel 2 reads w5.
  const auto& w5 = std::get<AsyncLoad>(plan.actions.at("w5"));
  ASSERT_TRUE(plan.sync_barriers.count(2));
  EXPECT_TRUE(plan.sync_barriers.at(2).count(w5.group_index));
}

TEST(PlanStartup, ActionsFollowPrefixAndFlags) {
  const auto tpl = five_template(PrefetchSpec::fixed(1));  // snaps to w1
  const auto plan = five_plan(tpl);
  EXPECT_TRUE(std::holds_alternative<ReuseResident>(plan.actions.at("w1")));
  for (const char* w : {"w3", "w4", "w5"}) EXPECT_TRUE(std::holds_alternative<AsyncLoad>(plan.actions.at(w))) << w;
  EXPECT_TRUE(std::holds_alternative<ReplayInit>(plan.actions.at("w2")));
  EXPECT_TRUE(plan.newly_dynamic.empty());
}

TEST(PlanStartup, BarrierCoversEveryAsyncReadTransitively) {
  std::mt19937_64 rng(21);
  for (int trial = 0; trial < 200; ++trial) {
    const auto p = cft::random_forward_pass(rng, 8, 8);
    std::uniform_int_distribution<std::size_t> mt(1, 4);
    const auto tpl = cft::single_trace_template(p, {}, cft::plain_hw(1e9), PrefetchSpec::fixed(0), mt(rng));
    const auto trace = trace_inference(p, {});
    const auto plan = plan_startup(tpl, trace_init(p, {}), trace);
    std::set<std::size_t> waited;
    for (std::size_t k = 0; k < trace.kernel_sequence.size(); ++k) {
      if (auto it = plan.sync_barriers.find(k); it != plan.sync_barriers.end())
        waited.insert(it->second.begin(), it->second.end());
      for (const auto& w : trace.kernel_sequence[k].weight_reads)
        if (const auto* a = std::get_if<AsyncLoad>(&plan.actions.at(w))) EXPECT_TRUE(waited.count(a->group_index));
    }
    std::size_t entries = 0;
    for (const auto& [_, g] : plan.sync_barriers) entries += g.size();
    EXPECT_EQ(entries, tpl.transfer_groups.size());
  }
}

TEST(PlanStartup, StructuralChangeFallsBackToColdPlan) {
  const auto tpl = five_template(PrefetchSpec::sized());
  const auto other = cft::chain_program({kGB}, {{"w1"}}, {1});
  const auto plan = plan_startup(tpl, trace_init(other, {}), trace_inference(other, {}));
  EXPECT_TRUE(plan.invalidated);
  EXPECT_EQ(plan.count_kind(2), 1u);
}

TEST(PlanStartup, NewProvenanceIsReplayedWholesale) {
  auto p = five_program();
  const auto tpl = five_template(PrefetchSpec::full());
  std::get<LoadCheckpoint>(p.init_ops[6]).checkpoint_id = "other";  // w4
  const auto plan = plan_startup(tpl, trace_init(p, adapter("A")), trace_inference(p, adapter("A")));
  EXPECT_TRUE(std::holds_alternative<ReplayInit>(plan.actions.at("w4")));
  EXPECT_EQ(std::get<ReplayInit>(plan.actions.at("w4")).source, ReplayInit::Source::host);
  EXPECT_EQ(plan.newly_dynamic, (std::set<std::string>{"w4"}));
}

TEST(PlanDump, LineFormat) {
  std::ostringstream os;
  write_plan_dump(os, five_plan(five_template(PrefetchSpec::fixed(1))));
  const auto s = os.str();
  EXPECT_NE(s.find("ACTION w1 reuse -\n"), std::string::npos);
  EXPECT_NE(s.find("ACTION w2 replay-storage -\n"), std::string::npos);
  EXPECT_NE(s.find("ACTION w5 async-load 0\n"), std::string::npos);
  EXPECT_NE(s.find("BARRIER 2 "), std::string::npos);
}

TEST(CopyOnWrite, NoWritesNoCopies) {
  EXPECT_TRUE(five_plan(five_template(PrefetchSpec::full())).cow_copies.empty());
}

TEST(CopyOnWrite, WrittenResidentWeightIsCopied) {
  auto p = cft::chain_program({kGB, kGB}, {{"w1"}, {"w2"}}, {1, 1});
  p.inference_ops[1].writes = {"w1"};
  const auto tpl = cft::single_trace_template(p, {}, cft::plain_hw(1e9), PrefetchSpec::full());
  const auto plan = plan_startup(tpl, trace_init(p, {}), trace_inference(p, {}));
  EXPECT_EQ(plan.cow_copies, (std::set<std::string>{"w1"}));
}

TEST(CopyOnWrite, ReplayedAdapterIsPrivate) {
  auto p = five_program();
  p.inference_ops[2].writes = {"w2", "w5"};
  std::vector<TracePair> tr;
  for (const char* id : {"A", "B"}) tr.push_back({trace_init(p, adapter(id)), trace_inference(p, adapter(id))});
  const auto tpl = generate_template("five", false, tr, cft::plain_hw(1e9), 0.5, {300, PrefetchSpec::full()});
  const auto plan = plan_startup(tpl, trace_init(p, adapter("C")), trace_inference(p, adapter("C")));
  EXPECT_EQ(plan.cow_copies, (std::set<std::string>{"w5"}));
}

TEST(LoraReuse, AtLeastNinetyNinePercentOfBytes) {
  const auto p = presets::make_llama_program(presets::llama2_13b(true));
  std::vector<TracePair> tr;
  for (const char* id : {"A", "B"}) tr.push_back({trace_init(p, adapter(id)), trace_inference(p, adapter(id))});
  const auto tpl = generate_template(p.function_id, false, tr, presets::a6000(), 0.5, {300, PrefetchSpec::fixed(0)});
  const auto trace = trace_inference(p, adapter("C"));
  const auto plan = plan_startup(tpl, trace_init(p, adapter("C")), trace);
  Bytes reused = 0, total = 0;
  for (const auto& [w, a] : plan.actions) {
    total += trace.weight_bytes.at(w);
    if (!std::holds_alternative<ReplayInit>(a)) reused += trace.weight_bytes.at(w);
  }
  EXPECT_GE(static_cast<double>(reused) / static_cast<double>(total), 0.99);
}

TEST(ForkedState, TemplateUnchangedUnderConcurrentForks) {
  auto p = cft::chain_program({kGB, 2 * kGB, kGB, 3 * kGB}, {{"w1"}, {"w2"}, {"w3"}, {"w4"}}, {0.1, 0.1, 0.1, 0.1});
  p.inference_ops[1].writes = {"x", "w1"};
  p.inference_ops[3].writes = {"x", "w3", "w4"};
  const auto tpl = cft::single_trace_template(p, {}, cft::plain_hw(1e9), PrefetchSpec::fixed(3 * kGB));
  const auto trace = trace_inference(p, {});
  const auto plan = plan_startup(tpl, trace_init(p, {}), trace);
  ASSERT_EQ(plan.cow_copies, (std::set<std::string>{"w1", "w3", "w4"}));

  const TemplateImage image(tpl);
  const auto before = image.snapshot();
  const auto multiset_before = tpl.byte_multiset();
  std::atomic<Bytes> copied{0};
  std::vector<std::thread> workers;
  for (int t = 0; t < 8; ++t) {
    workers.emplace_back([&] {
      for (int i = 0; i < 125; ++i) {
        ForkedState f(image, plan, trace);
        f.run(trace);
        copied += f.copied_bytes();
      }
    });
  }
  for (auto& w : workers) w.join();
  EXPECT_EQ(image.snapshot(), before);
  EXPECT_EQ(tpl.byte_multiset(), multiset_before);
  EXPECT_EQ(copied.load(), 1000 * (kGB + kGB + 3 * kGB));
}

TEST(ForkedState, MissingCopyMutatesTheTemplate) {
  auto p = cft::chain_program({kGB, kGB}, {{"w1"}, {"w2"}}, {1, 1});
  p.inference_ops[1].writes = {"w1"};
  const auto tpl = cft::single_trace_template(p, {}, cft::plain_hw(1e9), PrefetchSpec::full());
  const auto trace = trace_inference(p, {});
  auto plan = plan_startup(tpl, trace_init(p, {}), trace);
  plan.cow_copies.clear();
  const TemplateImage image(tpl);
  const auto before = image.snapshot();
  ForkedState f(image, plan, trace);
  f.run(trace);
  EXPECT_NE(image.snapshot(), before);
}
