#include <fstream>
#include <random>
#include <sstream>

#include <gtest/gtest.h>

#include "coldfork/io.hpp"
#include "coldfork/presets.hpp"
#include "coldfork/template.hpp"
#include "helpers.hpp"

using namespace coldfork;

namespace {

Layout flatten(const TransferGroups& groups, const Layout& reference) {
  std::map<std::string, Bytes> size;
  for (const auto& e : reference) size[e.weight] = e.size_bytes;
  Layout out;
  for (const auto& g : groups)
    for (const auto& w : g) out.push_back({w, size.at(w)});
  return out;
}

Layout uniform_layout(std::size_t n, Bytes each) {
  Layout l;
  for (std::size_t i = 0; i < n; ++i) l.push_back({fmt::format("t{}", i), each});
  return l;
}

/// w1..w3 from "base", lora1 from the request adapter, read as w1, lora1, w2, w3.
FunctionProgram adapter_program() {
  auto p = cft::chain_program({kGB, 2 * kGB, kGB}, {{"w1"}, {"lora1"}, {"w2"}, {"w3"}}, {0.1, 0.1, 0.1, 0.1});
  p.init_ops.emplace_back(LoadCheckpoint{kAdapterPlaceholder, "lora1", 10 * kMB});
  p.init_ops.emplace_back(ToGpu{"lora1"});
  p.declared_static = false;
  return p;
}

std::vector<TracePair> adapter_traces(const FunctionProgram& p, std::initializer_list<const char*> ids) {
  std::vector<TracePair> out;
  for (const char* id : ids) {
    Workload w{64, 1, std::string(id)};
    out.push_back({trace_init(p, w), trace_inference(p, w)});
  }
  return out;
}

}  // namespace

TEST(DedupKernels, RepeatedIdsCollapse) {
  InferenceTraceRecord t;
  for (const char* id : {"A", "B", "A", "B", "A"}) t.kernel_sequence.push_back({id, {}, {}, {}, {}});
  EXPECT_EQ(dedup_kernels(t), (std::set<std::string>{"A", "B"}));
  t.kernel_sequence.resize(1);
  EXPECT_EQ(dedup_kernels(t), (std::set<std::string>{"A"}));
}

TEST(DedupKernels, IdenticalBlocksShareIds) {
  InferenceTraceRecord t;
  for (int block = 0; block < 32; ++block)
    for (int k = 0; k < 8; ++k) t.kernel_sequence.push_back({fmt::format("block.k{}", k), {}, {}, {}, {}});
  EXPECT_EQ(dedup_kernels(t).size(), 8u);
}

TEST(DedupKernels, IdempotentAndOrderInsensitive) {
  const auto t = trace_inference(presets::make_llama_program(presets::llama3_8b(true)), {});
  auto reversed = t;
  std::reverse(reversed.kernel_sequence.begin(), reversed.kernel_sequence.end());
  EXPECT_EQ(dedup_kernels(t), dedup_kernels(reversed));
  InferenceTraceRecord once;
  for (const auto& id : dedup_kernels(t)) once.kernel_sequence.push_back({id, {}, {}, {}, {}});
  EXPECT_EQ(dedup_kernels(once), dedup_kernels(t));
  EXPECT_EQ(dedup_kernels(t).size(), presets::kCommonKernels + presets::kFamilyKernels + presets::kLoraKernels);
}

TEST(BuildLayout, FollowsAccessOrder) {
  const auto p = cft::chain_program({kGB, kGB, kGB}, {{"w2"}, {"w1"}, {"w3"}}, {1, 1, 1});
  const auto dfgs = trace_init(p, {});
  const auto layout = build_layout(trace_inference(p, {}), dfgs, all_static(dfgs));
  ASSERT_EQ(layout.size(), 3u);
  EXPECT_EQ(layout[0].weight, "w2");
  EXPECT_EQ(layout[1].weight, "w1");
  EXPECT_EQ(layout[2].weight, "w3");
}

TEST(BuildLayout, SharedEmbeddingLeadsTheLayout) {
  const auto p = presets::make_llama_program(presets::llama2_13b());
  const auto dfgs = trace_init(p, {});
  const auto layout = build_layout(trace_inference(p, {}), dfgs, all_static(dfgs));
  EXPECT_EQ(layout.front().weight, "lm_head");
  std::set<std::string> names;
  for (const auto& e : layout) names.insert(e.weight);
  EXPECT_EQ(names.size(), layout.size());
}

TEST(BuildLayout, DynamicWeightsAreExcluded) {
  const auto p = adapter_program();
  const auto tr = adapter_traces(p, {"A", "B"});
  const auto cls = classify_weights(tr[0].init, tr[1].init);
  const auto layout = build_layout(tr[0].inference, tr[0].init, cls);
  std::vector<std::string> names;
  for (const auto& e : layout) names.push_back(e.weight);
  EXPECT_EQ(names, (std::vector<std::string>{"w1", "w2", "w3"}));
}

TEST(BuildLayout, PermutesExactlyTheStaticMultiset) {
  std::mt19937_64 rng(11);
  for (int i = 0; i < 100; ++i) {
    const auto p = cft::random_forward_pass(rng, 8, 8);
    const auto dfgs = trace_init(p, {});
    const auto layout = build_layout(trace_inference(p, {}), dfgs, all_static(dfgs));
    std::multiset<std::pair<std::string, Bytes>> a, b;
    for (const auto& e : layout) a.emplace(e.weight, e.size_bytes);
    for (const auto& [n, d] : dfgs) b.emplace(n, d.size_bytes);
    EXPECT_EQ(a, b);
  }
}

TEST(PrefetchBytes, LlamaExample) {
  EXPECT_EQ(compute_prefetch_bytes(24'300'000'000ULL, 0.3, 32e9), 14'700'000'000ULL);
}

TEST(PrefetchBytes, ClampsAtZero) {
  EXPECT_EQ(compute_prefetch_bytes(10 * kGB, 1.0, 32e9), 0u);
  EXPECT_EQ(compute_prefetch_bytes(0, 0.5, 32e9), 0u);
  EXPECT_THROW((void)compute_prefetch_bytes(1, -1.0, 1.0), std::invalid_argument);
  EXPECT_THROW((void)compute_prefetch_bytes(1, 1.0, 0.0), std::invalid_argument);
}

TEST(PrefetchBytes, MonotoneAndBounded) {
  std::mt19937_64 rng(5);
  std::uniform_int_distribution<Bytes> m(0, 100 * kGB);
  std::uniform_real_distribution<double> t(0, 5), b(1e9, 64e9);
  for (int i = 0; i < 2000; ++i) {
    const Bytes model = m(rng);
    const double ttft = t(rng), bw = b(rng);
    const auto v = compute_prefetch_bytes(model, ttft, bw);
    EXPECT_LE(v, model);
    EXPECT_LE(compute_prefetch_bytes(model, ttft * 1.5, bw), v);
    EXPECT_LE(compute_prefetch_bytes(model, ttft, bw * 1.5), v);
    EXPECT_GE(compute_prefetch_bytes(model + kGB, ttft, bw), v);
  }
}

TEST(SnapPrefix, WholeWeightsOnly) {
  const Layout l{{"a", 3}, {"b", 5}, {"c", 7}};
  EXPECT_EQ(snap_prefix(l, 0), (std::pair<std::size_t, Bytes>{0, 0}));
  EXPECT_EQ(snap_prefix(l, 1), (std::pair<std::size_t, Bytes>{1, 3}));
  EXPECT_EQ(snap_prefix(l, 8), (std::pair<std::size_t, Bytes>{2, 8}));
  EXPECT_EQ(snap_prefix(l, 100), (std::pair<std::size_t, Bytes>{3, 15}));
}

TEST(MergeGroups, TwelveHundredTensorsBecomeThreeHundred) {
  EXPECT_EQ(merge_transfer_groups(uniform_layout(1200, kMB), 300).size(), 300u);
}

TEST(MergeGroups, BelowThresholdStaysSingleton) {
  const auto g = merge_transfer_groups(uniform_layout(5, kMB), 300);
  ASSERT_EQ(g.size(), 5u);
  for (const auto& grp : g) EXPECT_EQ(grp.size(), 1u);
}

TEST(MergeGroups, EightEqualTensorsIntoFour) {
  const auto l = uniform_layout(8, kGiB);
  const auto g = merge_transfer_groups(l, 4);
  ASSERT_EQ(g.size(), 4u);
  for (const auto& grp : g) EXPECT_EQ(grp.size(), 2u);
  EXPECT_EQ(flatten(g, l), l);
}

TEST(MergeGroups, FlatteningReproducesTheSuffix) {
  std::mt19937_64 rng(9);
  std::uniform_int_distribution<std::size_t> n(1, 400), k(1, 64);
  std::uniform_int_distribution<Bytes> sz(1, 5 * kGB);
  for (int i = 0; i < 200; ++i) {
    Layout l;
    const auto count = n(rng);
    for (std::size_t j = 0; j < count; ++j) l.push_back({fmt::format("t{}", j), sz(rng)});
    const auto max = k(rng);
    const auto g = merge_transfer_groups(l, max);
    EXPECT_EQ(g.size(), std::min(count, max));
    for (const auto& grp : g) EXPECT_FALSE(grp.empty());
    EXPECT_EQ(flatten(g, l), l);
  }
  EXPECT_THROW((void)merge_transfer_groups(uniform_layout(3, 1), 0), std::invalid_argument);
}

TEST(GenerateTemplate, SingleStaticTraceIsAllStatic) {
  const auto p = cft::chain_program({kGB, kGB}, {{"w1"}, {"w2"}}, {1, 1});
  const auto t = cft::single_trace_template(p, {}, cft::plain_hw(1e9), PrefetchSpec::sized());
  for (const auto& [_, f] : t.flags) EXPECT_EQ(f, WeightFlag::static_weight);
  EXPECT_EQ(t.layout.size(), 2u);
  EXPECT_EQ(t.model_bytes, 2 * kGB);
  EXPECT_EQ(t.declared_static, true);
}

TEST(GenerateTemplate, AdapterTracesExcludeAdapters) {
  const auto p = adapter_program();
  const auto t = generate_template("f", false, adapter_traces(p, {"A", "B"}), cft::plain_hw(1e9), 0.4);
  EXPECT_EQ(t.dynamic_groups(), (std::set<std::string>{"lora1"}));
  for (const auto& e : t.layout) EXPECT_NE(e.weight, "lora1");
}

TEST(GenerateTemplate, ZeroPrefetchKeepsLayout) {
  const auto p = presets::make_llama_program(presets::llama2_13b());
  const auto t = cft::single_trace_template(p, {2048, 1, std::nullopt}, presets::a6000(), PrefetchSpec::fixed(0));
  EXPECT_EQ(t.prefetch_bytes, 0u);
  EXPECT_EQ(t.resident_count, 0u);
  EXPECT_EQ(t.layout.size(), t.loading_order.size());
  const auto sized = cft::single_trace_template(p, {2048, 1, std::nullopt}, presets::a6000(), PrefetchSpec::sized());
  EXPECT_EQ(sized.layout, t.layout);
  EXPECT_GE(sized.prefetch_bytes, sized.prefetch_target_bytes);
  EXPECT_GT(sized.prefetch_bytes, 0u);
}

TEST(UpdateTemplate, NoMismatchIsIdempotent) {
  const auto p = adapter_program();
  const auto t = generate_template("f", false, adapter_traces(p, {"A", "B"}), cft::plain_hw(1e9), 0.4);
  const auto u = update_template(t, trace_init(p, {64, 1, std::string("C")}));
  EXPECT_EQ(u.version, t.version);
  EXPECT_EQ(u.flags, t.flags);
  EXPECT_EQ(u.layout, t.layout);
}

TEST(UpdateTemplate, NewCheckpointMakesBaseWeightDynamic) {
  auto p = adapter_program();
  const auto t = generate_template("f", false, adapter_traces(p, {"A", "B"}), cft::plain_hw(1e9), 0.4);
  std::get<LoadCheckpoint>(p.init_ops[2]).checkpoint_id = "finetuned";  // w2
  const auto u = update_template(t, trace_init(p, {64, 1, std::string("A")}));
  EXPECT_EQ(u.version, t.version + 1);
  EXPECT_EQ(u.flags.at("w2"), WeightFlag::dynamic_weight);
  for (const auto& e : u.layout) EXPECT_NE(e.weight, "w2");
  EXPECT_EQ(update_template(u, trace_init(p, {64, 1, std::string("A")})).version, u.version);
}

TEST(UpdateTemplate, AlternatingAdaptersConvergeAfterFirstUpdate) {
  const auto p = adapter_program();
  const auto t = cft::single_trace_template(p, {64, 1, std::string("A")}, cft::plain_hw(1e9), PrefetchSpec::sized());
  EXPECT_TRUE(t.dynamic_groups().empty());
  auto u = update_template(t, trace_init(p, {64, 1, std::string("B")}));
  const auto converged = u.dynamic_groups();
  EXPECT_EQ(converged, (std::set<std::string>{"lora1"}));
  for (const char* id : {"A", "B", "C", "A", "D"}) {
    const auto next = update_template(u, trace_init(p, {64, 1, std::string(id)}));
    EXPECT_EQ(next.dynamic_groups(), converged);
    EXPECT_EQ(next.version, u.version);
    u = next;
  }
}

TEST(UpdateTemplate, StructuralChangeThrows) {
  const auto p = adapter_program();
  const auto t = generate_template("f", false, adapter_traces(p, {"A"}), cft::plain_hw(1e9), 0.4);
  EXPECT_THROW((void)update_template(t, trace_init(cft::chain_program({kGB}, {{"w1"}}, {1}), {})),
               StructuralMismatch);
}

TEST(TemplateJson, RoundTrip) {
  const auto p = presets::make_llama_program(presets::llama3_8b(true));
  const auto t = generate_template(p.function_id, p.declared_static, adapter_traces(p, {"A", "B"}), presets::a6000(),
                                   warm_compute_s(p, {2048, 1, std::nullopt}));
  const auto back = io::template_from_json(io::to_json(t));
  EXPECT_EQ(io::dump(io::to_json(back)), io::dump(io::to_json(t)));
  EXPECT_EQ(back.byte_multiset(), t.byte_multiset());
  EXPECT_EQ(back.transfer_groups, t.transfer_groups);
}

TEST(TemplateJson, TamperedLayoutIsRejected) {
  const auto p = adapter_program();
  auto j = io::to_json(generate_template("f", false, adapter_traces(p, {"A", "B"}), cft::plain_hw(1e9), 0.4));
  j["resident_count"] = 99;
  EXPECT_THROW((void)io::template_from_json(j), ConfigError);
  j = io::to_json(generate_template("f", false, adapter_traces(p, {"A", "B"}), cft::plain_hw(1e9), 0.4));
  j["surprise"] = 1;
  EXPECT_THROW((void)io::template_from_json(j), ConfigError);
}

TEST(TemplateJson, MatchesGoldenFile) {
  const auto p = adapter_program();
  // w1 resident, w2 and w3 merged into a single transfer, lora1 dynamic.
  const auto t = generate_template("golden", false, adapter_traces(p, {"A", "B"}), cft::plain_hw(2e9), 1.6,
                                   {1, PrefetchSpec::sized()});
  std::ifstream in(std::string(COLDFORK_TEST_DATA) + "/golden_template.json");
  ASSERT_TRUE(in) << "missing golden file";
  std::stringstream golden;
  golden << in.rdbuf();
  EXPECT_EQ(io::dump(io::to_json(t)), golden.str());
}
