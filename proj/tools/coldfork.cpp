// coldfork: command-line front end for tracing, single-invocation what-if
// runs, prefetch sweeps and cluster replays.

#include <fstream>
#include <iostream>
#include <sstream>

#include <CLI11.hpp>

#include "coldfork/experiment.hpp"

namespace {

using namespace coldfork;

constexpr int kExitConfig = 2;
constexpr int kExitSimulation = 3;

struct Common {
  std::string config;
  std::optional<std::uint64_t> seed;
  std::string out;
  std::string prefetch;
  std::string policy;
};

void add_common(CLI::App* cmd, Common& c) {
  cmd->add_option("--config", c.config, "Experiment configuration (JSON)");
  cmd->add_option("--seed", c.seed, "Seed overriding the configuration");
  cmd->add_option("--out", c.out, "Output directory");
  cmd->add_option("--prefetch-bytes", c.prefetch, "Resident template size: <bytes>|full|auto");
  cmd->add_option("--policy", c.policy, "baseline|tidal|tidal-dk|tidal-dk-budgeted");
}

HardwareProfile hardware_arg(const std::string& s) {
  if (s.empty()) return presets::a6000();
  if (s.find('/') != std::string::npos || s.ends_with(".json")) return io::hardware_from_json(io::read_json_file(s), s);
  return io::hardware_preset(s);
}

/// Invoke/sweep options from either --config + --function or --program.
InvokeOptions invoke_options(const Common& c, const std::string& program, const std::string& function,
                             const std::string& hardware, std::int64_t input_len, std::int64_t batch,
                             const std::string& adapter, const std::string& mode, bool fresh) {
  InvokeOptions o;
  if (!c.config.empty()) {
    const auto cfg = load_experiment(c.config);
    const auto& f = function.empty() ? cfg.functions.front() : cfg.function(function);
    o.program = f.program;
    o.hw = cfg.hw;
    o.prefetch = f.prefetch;
    o.max_transfers = cfg.max_transfers;
    o.tracing_overhead = cfg.tracing_overhead;
  } else if (!program.empty()) {
    o.program = io::load_program(program);
    o.hw = hardware_arg(hardware);
  } else {
    throw ConfigError("give --config or --program");
  }
  if (!hardware.empty() && !c.config.empty()) o.hw = hardware_arg(hardware);
  if (input_len < 1 || batch < 1) throw ConfigError("--input-len and --batch must be >= 1");
  o.workload = Workload{input_len, batch, adapter.empty() ? std::nullopt : std::optional<std::string>(adapter)};
  if (!c.prefetch.empty()) o.prefetch = parse_prefetch(c.prefetch);
  o.mode = parse_invoke_mode(mode);
  if (!c.policy.empty()) {
    const auto p = parse_policy(c.policy);
    if (mode == "fork" && p == Policy::baseline) o.mode = InvokeMode::cold;
  }
  o.pooled = !fresh;
  return o;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"coldfork: GPU cold-start simulator for LLM functions"};
  app.require_subcommand(1);

  Common common;
  std::string program, function, hardware, adapter, mode = "fork";
  std::vector<std::string> adapters;
  std::int64_t input_len = 2048, batch = 1;
  std::vector<std::int64_t> input_lens;
  std::size_t points = 25;
  bool fresh = false;

  auto* trace = app.add_subcommand("trace", "Trace a program and write its template");
  add_common(trace, common);
  trace->add_option("--program", program, "Program document or preset:<name>")->required();
  trace->add_option("--adapter", adapters, "Adapter id for one tracing pass (repeatable)");
  trace->add_option("--input-len", input_len, "Tokens per sequence");
  trace->add_option("--batch", batch, "Sequences per request");
  trace->add_option("--hardware", hardware, "Hardware preset or document");

  auto* invoke = app.add_subcommand("invoke", "Simulate one invocation");
  add_common(invoke, common);
  invoke->add_option("--program", program, "Program document or preset:<name>");
  invoke->add_option("--function", function, "Function id in the configuration");
  invoke->add_option("--hardware", hardware, "Hardware preset or document");
  invoke->add_option("--input-len", input_len, "Tokens per sequence");
  invoke->add_option("--batch", batch, "Sequences per request");
  invoke->add_option("--adapter", adapter, "Request adapter id");
  invoke->add_option("--mode", mode, "fork|cold|warm|static-core");
  invoke->add_flag("--fresh-process", fresh, "Start without a pre-warmed process");

  auto* sweep = app.add_subcommand("sweep", "Sweep the resident template size");
  add_common(sweep, common);
  sweep->add_option("--program", program, "Program document or preset:<name>");
  sweep->add_option("--function", function, "Function id in the configuration");
  sweep->add_option("--hardware", hardware, "Hardware preset or document");
  sweep->add_option("--input-len", input_lens, "Tokens per sequence (repeatable)");
  sweep->add_option("--adapter", adapter, "Request adapter id");
  sweep->add_option("--points", points, "Sizes from 0 to the full model");

  auto* replay = app.add_subcommand("replay", "Replay a workload over the cluster");
  add_common(replay, common);

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return kExitConfig;
  }

  try {
    if (*trace) {
      TraceOptions o;
      o.program = program;
      o.adapters = adapters;
      if (input_len < 1 || batch < 1) throw ConfigError("--input-len and --batch must be >= 1");
      o.workload = Workload{input_len, batch, std::nullopt};
      o.hw = hardware_arg(hardware);
      if (!common.prefetch.empty()) o.prefetch = parse_prefetch(common.prefetch);
      o.out = common.out.empty() ? "out" : common.out;
      (void)cmd_trace(o, std::cout);
    } else if (*invoke) {
      const auto o = invoke_options(common, program, function, hardware, input_len, batch, adapter, mode, fresh);
      cmd_invoke(o, common.out.empty() ? "out" : common.out, std::cout);
    } else if (*sweep) {
      auto o = invoke_options(common, program, function, hardware, 2048, 1, adapter, "fork", false);
      if (input_lens.empty()) input_lens.push_back(2048);
      const auto rows = run_sweep(o, input_lens, points);
      std::ostringstream os;
      write_sweep(os, rows);
      const std::string out = common.out.empty() ? "out" : common.out;
      fs::create_directories(out);
      io::write_text_file((fs::path(out) / "sweep.csv").string(), os.str());
      std::cout << os.str();
    } else if (*replay) {
      if (common.config.empty()) throw ConfigError("replay needs --config");
      auto cfg = load_experiment(common.config);
      if (common.seed) cfg.seed = *common.seed;
      if (!common.policy.empty()) cfg.policies = {parse_policy(common.policy)};
      if (!common.prefetch.empty()) throw ConfigError("--prefetch-bytes does not apply to replay");
      cmd_replay(cfg, common.out.empty() ? cfg.out : common.out, std::cout);
    }
  } catch (const ConfigError& e) {
    std::cerr << "config error: " << e.what() << '\n';
    return kExitConfig;
  } catch (const Error& e) {
    std::cerr << "simulation error: " << e.what() << '\n';
    return kExitSimulation;
  } catch (const std::filesystem::filesystem_error& e) {
    std::cerr << "config error: " << e.what() << '\n';
    return kExitConfig;
  }
  return 0;
}
