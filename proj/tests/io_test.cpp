#include <gtest/gtest.h>

#include "coldfork/io.hpp"
#include "coldfork/presets.hpp"
#include "helpers.hpp"

using namespace coldfork;

TEST(ProgramJson, RoundTripsPreset) {
  const auto p = presets::make_llama_program(presets::llama2_13b(true));
  const auto back = io::program_from_json(io::to_json(p));
  EXPECT_EQ(io::to_json(back), io::to_json(p));
  EXPECT_EQ(model_bytes(back), model_bytes(p));
}

TEST(ProgramJson, RejectsUnknownKeysAndInvalidPrograms) {
  auto j = io::to_json(cft::chain_program({kGB}, {{"w1"}}, {1}));
  j["extra"] = 1;
  EXPECT_THROW((void)io::program_from_json(j), ConfigError);
  j.erase("extra");
  j["inference_ops"][0]["reads"] = {"w9"};
  EXPECT_THROW((void)io::program_from_json(j), ConfigError);
}

TEST(ProgramJson, PresetReferences) {
  EXPECT_EQ(io::load_program("preset:llama3-8b").function_id, "llama3-8b");
  EXPECT_THROW((void)io::load_program("preset:gpt-99"), ConfigError);
  EXPECT_THROW((void)io::load_program("/nonexistent/program.json"), ConfigError);
}

TEST(HardwareJson, RoundTripAndOverrides) {
  const auto hw = presets::a100_tp8_shard();
  EXPECT_EQ(io::to_json(io::hardware_from_json(io::to_json(hw))), io::to_json(hw));
  const auto o = io::hardware_from_json(io::json{{"preset", "a6000"}, {"gpu_count", 4}});
  EXPECT_EQ(o.gpu_count, 4);
  EXPECT_EQ(o.pcie_bandwidth_bytes_per_s, presets::a6000().pcie_bandwidth_bytes_per_s);
  EXPECT_THROW((void)io::hardware_from_json(io::json{{"pcie", 1}}), ConfigError);
  EXPECT_THROW((void)io::hardware_from_json(io::json{{"gpu_count", 0}}), ConfigError);
  EXPECT_THROW((void)io::hardware_from_json(io::json("tpu")), ConfigError);
}

TEST(TemplateJson, RoundTripsLoraTemplate) {
  const auto p = presets::make_llama_program(presets::llama3_8b(true));
  std::vector<TracePair> tr;
  for (const char* a : {"a", "b"}) {
    const Workload w{2048, 1, std::string(a)};
    tr.push_back({trace_init(p, w), trace_inference(p, w)});
  }
  const auto t = generate_template(p.function_id, false, tr, presets::a6000(), 0.3, {64, PrefetchSpec::sized()});
  EXPECT_EQ(io::to_json(io::template_from_json(io::to_json(t))), io::to_json(t));
}

TEST(Dump, TwoSpaceIndentWithNewline) {
  EXPECT_EQ(io::dump(io::json{{"a", 1}}), "{\n  \"a\": 1\n}\n");
}
