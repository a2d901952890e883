#pragma once

// Experiment configuration and the trace / invoke / sweep / replay
// commands behind the command-line front end.

#include <filesystem>
#include <iostream>
#include <map>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include <fmt/format.h>

#include "coldfork/cluster.hpp"
#include "coldfork/engine.hpp"
#include "coldfork/fork.hpp"
#include "coldfork/io.hpp"
#include "coldfork/pool.hpp"
#include "coldfork/report.hpp"
#include "coldfork/template.hpp"
#include "coldfork/tracer.hpp"
#include "coldfork/workload.hpp"

namespace coldfork {

namespace fs = std::filesystem;

struct FunctionEntry {
  std::string id;
  std::string program_ref;
  FunctionProgram program;
  std::string task = "code";
  RateClass rate = RateClass::medium;
  std::size_t adapter_pool = 0;
  PrefetchSpec prefetch = PrefetchSpec::sized();
};

struct SynthesisSpec {
  double duration_s = 3600;
  RateClasses rates;
  std::map<std::string, TaskProfile> tasks = default_tasks();
};

struct ExperimentConfig {
  fs::path base_dir = ".";
  HardwareProfile hw = presets::a6000();
  std::uint64_t seed = 1;
  std::string out = "out";
  std::vector<FunctionEntry> functions;
  std::vector<Policy> policies{Policy::baseline, Policy::tidal};
  PoolConfig pool;
  std::vector<std::string> budget_functions;
  std::size_t budget_gpus = 2;
  std::set<std::string> host_cache;
  std::optional<std::string> trace_file;
  SynthesisSpec synthesis;
  double time_factor = 1.0;
  double count_factor = 1.0;
  std::int64_t reference_input_len = 2048;
  std::size_t max_transfers = 300;
  double tracing_overhead = 0.0;

  [[nodiscard]] const FunctionEntry& function(const std::string& id) const {
    for (const auto& f : functions)
      if (f.id == id) return f;
    throw ConfigError("no function '" + id + "' in the configuration");
  }
};

/// "auto" (alias "eq1"), "full", or a byte count.
[[nodiscard]] inline PrefetchSpec parse_prefetch(const std::string& s) {
  if (s == "auto" || s == "eq1") return PrefetchSpec::sized();
  if (s == "full") return PrefetchSpec::full();
  try {
    std::size_t pos = 0;
    const double v = std::stod(s, &pos);
    if (pos != s.size() || !(v >= 0)) throw std::invalid_argument(s);
    return PrefetchSpec::fixed(static_cast<Bytes>(std::llround(v)));
  } catch (const std::exception&) {
    throw ConfigError("bad prefetch '" + s + "' (expected a byte count, 'full' or 'auto')");
  }
}

[[nodiscard]] inline std::string to_string(const PrefetchSpec& p) {
  switch (p.kind) {
    case PrefetchSpec::Kind::sized: return "auto";
    case PrefetchSpec::Kind::full: return "full";
    case PrefetchSpec::Kind::bytes: return std::to_string(p.bytes);
  }
  return "?";
}

namespace detail {

inline std::string resolve(const fs::path& base, const std::string& ref) {
  if (ref.rfind("preset:", 0) == 0) return ref;
  fs::path p(ref);
  return (p.is_absolute() ? p : base / p).string();
}

inline PrefetchSpec prefetch_from_json(const io::json& j, const std::string& where) {
  if (j.is_number()) {
    const double v = j.get<double>();
    if (!(v >= 0)) throw ConfigError(where + ": prefetch_bytes must be >= 0");
    return PrefetchSpec::fixed(static_cast<Bytes>(std::llround(v)));
  }
  if (j.is_string()) return parse_prefetch(j.get<std::string>());
  throw ConfigError(where + ": prefetch_bytes must be a number, 'full' or 'auto'");
}

}  // namespace detail

[[nodiscard]] inline ExperimentConfig experiment_from_json(const io::json& j, const fs::path& base_dir,
                                                           const std::string& where = "config") {
  using io::detail::get;
  using io::detail::get_or;
  io::detail::require_object(j, where);
  io::detail::reject_unknown(j,
                             {"hardware", "gpus", "seed", "out", "functions", "policies", "pool", "budget_functions",
                              "budget_gpus", "host_cache", "workload", "reference_input_len", "max_transfers", "tracing_overhead"},
                             where);
  ExperimentConfig c;
  c.base_dir = base_dir;
  if (j.contains("hardware")) {
    const auto& h = j.at("hardware");
    if (h.is_string() && h.get<std::string>().find('/') != std::string::npos)
      c.hw = io::hardware_from_json(io::read_json_file(detail::resolve(base_dir, h.get<std::string>())));
    else
      c.hw = io::hardware_from_json(h, where + ".hardware");
  }
  if (j.contains("gpus")) c.hw.gpu_count = get<int>(j, "gpus", where);
  c.hw.validate();
  c.seed = get_or<std::uint64_t>(j, "seed", c.seed, where);
  c.out = get_or<std::string>(j, "out", c.out, where);
  c.reference_input_len = get_or<std::int64_t>(j, "reference_input_len", c.reference_input_len, where);
  if (c.reference_input_len < 1) throw ConfigError(where + ": reference_input_len must be >= 1");
  c.max_transfers = get_or<std::size_t>(j, "max_transfers", c.max_transfers, where);
  if (c.max_transfers == 0) throw ConfigError(where + ": max_transfers must be >= 1");
  c.tracing_overhead = get_or<double>(j, "tracing_overhead", c.tracing_overhead, where);

  if (!j.contains("functions") || !j.at("functions").is_array() || j.at("functions").empty())
    throw ConfigError(where + ": 'functions' must be a nonempty array");
  std::map<std::string, FunctionProgram> loaded;
  std::set<std::string> ids;
  for (std::size_t i = 0; i < j.at("functions").size(); ++i) {
    const auto& fj = j.at("functions")[i];
    const auto w = where + ".functions[" + std::to_string(i) + "]";
    io::detail::require_object(fj, w);
    io::detail::reject_unknown(fj, {"id", "program", "task", "rate", "adapter_pool", "prefetch_bytes"}, w);
    FunctionEntry f;
    f.program_ref = get<std::string>(fj, "program", w);
    const auto path = detail::resolve(base_dir, f.program_ref);
    if (!loaded.count(path)) loaded.emplace(path, io::load_program(path));
    f.program = loaded.at(path);
    f.id = get_or<std::string>(fj, "id", f.program.function_id, w);
    if (!ids.insert(f.id).second) throw ConfigError(w + ": duplicate function id '" + f.id + "'");
    f.program.function_id = f.id;
    f.task = get_or<std::string>(fj, "task", f.task, w);
    f.rate = parse_rate_class(get_or<std::string>(fj, "rate", "medium", w));
    f.adapter_pool = get_or<std::size_t>(fj, "adapter_pool", uses_adapter(f.program) ? 32 : 0, w);
    if (fj.contains("prefetch_bytes")) f.prefetch = detail::prefetch_from_json(fj.at("prefetch_bytes"), w);
    if (f.prefetch.kind == PrefetchSpec::Kind::bytes && f.prefetch.bytes > model_bytes(f.program))
      throw ConfigError(w + ": prefetch_bytes exceeds the model's bytes");
    c.functions.push_back(std::move(f));
  }

  if (j.contains("policies")) {
    c.policies.clear();
    for (const auto& p : get<std::vector<std::string>>(j, "policies", where)) c.policies.push_back(parse_policy(p));
    if (c.policies.empty()) throw ConfigError(where + ": 'policies' is empty");
  }
  if (j.contains("pool")) {
    const auto& pj = j.at("pool");
    const auto w = where + ".pool";
    io::detail::require_object(pj, w);
    io::detail::reject_unknown(pj, {"size", "keep_alive_s", "request_timeout_s", "template_budget_bytes"}, w);
    c.pool.pool_size = get_or<std::size_t>(pj, "size", c.pool.pool_size, w);
    if (pj.contains("keep_alive_s") && !pj.at("keep_alive_s").is_null())
      c.pool.keep_alive_s = get<double>(pj, "keep_alive_s", w);
    c.pool.request_timeout_s = get_or<double>(pj, "request_timeout_s", c.pool.request_timeout_s, w);
    if (pj.contains("template_budget_bytes"))
      c.pool.template_budget_bytes = static_cast<Bytes>(std::llround(get<double>(pj, "template_budget_bytes", w)));
    c.pool.validate();
  }
  c.budget_functions = get_or<std::vector<std::string>>(j, "budget_functions", {}, where);
  for (const auto& b : c.budget_functions) (void)c.function(b);
  c.budget_gpus = get_or<std::size_t>(j, "budget_gpus", c.budget_gpus, where);
  if (c.budget_gpus == 0) throw ConfigError(where + ": budget_gpus must be >= 1");
  for (const auto& h : get_or<std::vector<std::string>>(j, "host_cache", {}, where)) {
    (void)c.function(h);
    c.host_cache.insert(h);
  }

  if (j.contains("workload")) {
    const auto& wj = j.at("workload");
    const auto w = where + ".workload";
    io::detail::require_object(wj, w);
    io::detail::reject_unknown(wj, {"trace", "synthesize", "time_factor", "count_factor"}, w);
    c.time_factor = get_or<double>(wj, "time_factor", 1.0, w);
    c.count_factor = get_or<double>(wj, "count_factor", 1.0, w);
    if (!(c.time_factor > 0) || !(c.count_factor > 0)) throw ConfigError(w + ": scale factors must be > 0");
    if (wj.contains("trace") == wj.contains("synthesize"))
      throw ConfigError(w + ": give exactly one of 'trace' or 'synthesize'");
    if (wj.contains("trace")) {
      c.trace_file = detail::resolve(base_dir, get<std::string>(wj, "trace", w));
    } else {
      const auto& sj = wj.at("synthesize");
      const auto sw = w + ".synthesize";
      io::detail::require_object(sj, sw);
      io::detail::reject_unknown(sj, {"duration_s", "rates", "tasks"}, sw);
      c.synthesis.duration_s = get_or<double>(sj, "duration_s", c.synthesis.duration_s, sw);
      if (sj.contains("rates")) {
        const auto& rj = sj.at("rates");
        io::detail::reject_unknown(rj, {"low", "medium", "high"}, sw + ".rates");
        c.synthesis.rates.low = get_or<double>(rj, "low", c.synthesis.rates.low, sw);
        c.synthesis.rates.medium = get_or<double>(rj, "medium", c.synthesis.rates.medium, sw);
        c.synthesis.rates.high = get_or<double>(rj, "high", c.synthesis.rates.high, sw);
      }
      if (sj.contains("tasks")) {
        for (const auto& [name, tj] : sj.at("tasks").items()) {
          const auto tw = sw + ".tasks." + name;
          io::detail::reject_unknown(tj, {"mean_input_len", "input_len_dispersion", "batch"}, tw);
          TaskProfile t{name, get<double>(tj, "mean_input_len", tw), get_or<double>(tj, "input_len_dispersion", 0.5, tw),
                        get_or<std::int64_t>(tj, "batch", 1, tw)};
          if (t.mean_input_len < 1 || t.input_len_dispersion < 0 || t.batch < 1)
            throw ConfigError(tw + ": invalid task profile");
          c.synthesis.tasks[name] = t;
        }
      }
    }
  }
  for (const auto& f : c.functions)
    if (!c.trace_file && !c.synthesis.tasks.count(f.task))
      throw ConfigError(where + ": function '" + f.id + "' uses unknown task '" + f.task + "'");
  return c;
}

[[nodiscard]] inline ExperimentConfig load_experiment(const std::string& path) {
  const auto j = io::read_json_file(path);
  return experiment_from_json(j, fs::path(path).parent_path(), path);
}

/// Invocation stream of an experiment: the trace file or a seeded synthesis,
/// then time/count scaling.
[[nodiscard]] inline std::vector<InvocationRecord> experiment_workload(const ExperimentConfig& c) {
  std::vector<InvocationRecord> records;
  if (c.trace_file) {
    records = load_trace(*c.trace_file);
  } else {
    std::vector<MixEntry> mix;
    for (const auto& f : c.functions) mix.push_back({f.id, f.task, f.rate, f.adapter_pool});
    records = synthesize(mix, c.synthesis.tasks, c.synthesis.rates, c.synthesis.duration_s, c.seed);
  }
  return scale_and_accelerate(std::move(records), c.time_factor, c.count_factor);
}

[[nodiscard]] inline ClusterConfig cluster_config(const ExperimentConfig& c,
                                                  const std::vector<InvocationRecord>& records) {
  ClusterConfig cc;
  cc.hw = c.hw;
  cc.pool = c.pool;
  for (const auto& f : c.functions) cc.programs.push_back(f.program);
  cc.host_cache = c.host_cache;
  cc.budget_functions = c.budget_functions;
  cc.budget_gpus = c.budget_gpus;
  cc.reference_workload = Workload{c.reference_input_len, 1, std::nullopt};
  cc.max_transfers = c.max_transfers;
  cc.tracing_overhead = c.tracing_overhead;
  if (cc.budget_functions.empty() &&
      std::find(c.policies.begin(), c.policies.end(), Policy::tidal_dk_budgeted) != c.policies.end()) {
    const Cluster probe(cc);
    cc.budget_functions = select_budget_functions(records, probe, 4);
  }
  return cc;
}

// ---------------------------------------------------------------------------
// Commands

struct TraceOptions {
  std::string program;
  std::vector<std::string> adapters;
  Workload workload{2048, 1, std::nullopt};
  HardwareProfile hw = presets::a6000();
  PrefetchSpec prefetch = PrefetchSpec::sized();
  std::size_t max_transfers = 300;
  std::string out = "out";
};

/// Traces a program (once per adapter id; twice when one adapter is given
/// for a program that substitutes adapters) and writes the dump and template.
inline FunctionTemplate cmd_trace(const TraceOptions& o, std::ostream& log) {
  const auto program = io::load_program(o.program);
  std::vector<std::optional<std::string>> passes;
  for (const auto& a : o.adapters) passes.emplace_back(a);
  if (passes.empty()) passes.emplace_back(std::nullopt);
  if (passes.size() == 1 && passes.front() && uses_adapter(program)) passes.emplace_back(*passes.front() + ".probe");

  std::vector<TracePair> traces;
  for (const auto& a : passes) {
    Workload w = o.workload;
    w.adapter_id = a;
    traces.push_back({trace_init(program, w), trace_inference(program, w)});
  }
  const double warm = warm_compute_s(program, o.workload);
  const auto tpl =
      generate_template(program.function_id, program.declared_static, traces, o.hw, warm, {o.max_transfers, o.prefetch});

  fs::create_directories(o.out);
  std::ostringstream dump;
  write_trace_dump(dump, traces.front().init, traces.front().inference);
  io::write_text_file((fs::path(o.out) / "trace.txt").string(), dump.str());
  io::write_text_file((fs::path(o.out) / "template.json").string(), io::dump(io::to_json(tpl)));

  std::size_t dynamic = tpl.dynamic_groups().size();
  log << fmt::format("function {}: {} passes, {} weights ({} dynamic), {} kernels, {} resident bytes, {} groups\n",
                     tpl.function_id, passes.size(), tpl.loading_order.size(), dynamic, tpl.kernel_set.size(),
                     tpl.prefetch_bytes, tpl.transfer_groups.size());
  return tpl;
}

enum class InvokeMode { fork, cold, warm, static_core };

[[nodiscard]] inline InvokeMode parse_invoke_mode(const std::string& s) {
  if (s == "fork") return InvokeMode::fork;
  if (s == "cold") return InvokeMode::cold;
  if (s == "warm") return InvokeMode::warm;
  if (s == "static-core") return InvokeMode::static_core;
  throw ConfigError("unknown mode '" + s + "'");
}

struct InvokeOptions {
  FunctionProgram program;
  HardwareProfile hw = presets::a6000();
  Workload workload{2048, 1, std::nullopt};
  PrefetchSpec prefetch = PrefetchSpec::sized();
  InvokeMode mode = InvokeMode::fork;
  /// Pre-warmed process with the function's kernels; otherwise a fresh one.
  bool pooled = true;
  std::size_t max_transfers = 300;
  double tracing_overhead = 0.0;
};

struct InvokeResult {
  FunctionTemplate tmpl;
  StartupPlan plan;
  SimResult sim;
};

/// Template for a program: traced at the request's workload, with a second
/// adapter probe when the program substitutes adapters.
[[nodiscard]] inline FunctionTemplate template_for(const FunctionProgram& program, const Workload& workload,
                                                   const HardwareProfile& hw, const PrefetchSpec& prefetch,
                                                   std::size_t max_transfers) {
  std::vector<TracePair> traces;
  if (uses_adapter(program)) {
    for (const char* a : {"probe.a", "probe.b"}) {
      Workload w = workload;
      w.adapter_id = a;
      traces.push_back({trace_init(program, w), trace_inference(program, w)});
    }
  } else {
    traces.push_back({trace_init(program, workload), trace_inference(program, workload)});
  }
  return generate_template(program.function_id, program.declared_static, traces, hw, warm_compute_s(program, workload),
                           {max_transfers, prefetch});
}

[[nodiscard]] inline InvokeResult run_invoke(const InvokeOptions& o) {
  InvokeResult r;
  r.tmpl = template_for(o.program, o.workload, o.hw, o.prefetch, o.max_transfers);
  if (o.mode == InvokeMode::warm) {
    r.sim.breakdown = simulate_warm(o.program, o.workload, o.tracing_overhead);
    return r;
  }
  const auto trace = trace_inference(o.program, o.workload);
  const auto observed = trace_init(o.program, o.workload);
  ProcessState ps;
  switch (o.mode) {
    case InvokeMode::cold: r.plan = cold_plan(observed, trace); break;
    case InvokeMode::static_core: r.plan = static_core_plan(r.tmpl, observed, trace); break;
    default: r.plan = plan_startup(r.tmpl, observed, trace); break;
  }
  if (o.mode == InvokeMode::static_core) {
    ps.context_ready = true;
    ps.loaded_kernel_ids = r.tmpl.kernel_set;
  } else if (o.pooled) {
    ps = prewarm_process(o.mode == InvokeMode::cold ? std::set<std::string>{} : r.tmpl.kernel_set, o.hw).state;
  } else {
    ps.resident_bytes = o.hw.context_footprint_bytes;
  }
  SimOptions opt;
  opt.tracing_overhead = o.tracing_overhead;
  r.sim = simulate_invocation(r.plan, o.program, trace, o.workload, r.tmpl, o.hw, ps, opt);
  return r;
}

inline void cmd_invoke(const InvokeOptions& o, const std::string& out_dir, std::ostream& log) {
  const auto r = run_invoke(o);
  write_breakdown_table(log, r.sim.breakdown);
  log << fmt::format("bottleneck: {}\n", r.sim.bottleneck());
  fs::create_directories(out_dir);
  std::ostringstream tl, plan, bd;
  write_timeline(tl, r.sim.timeline);
  write_plan_dump(plan, r.plan);
  write_breakdown_table(bd, r.sim.breakdown);
  io::write_text_file((fs::path(out_dir) / "timeline.tsv").string(), tl.str());
  io::write_text_file((fs::path(out_dir) / "plan.txt").string(), plan.str());
  io::write_text_file((fs::path(out_dir) / "breakdown.txt").string(), bd.str());
}

struct SweepRow {
  std::int64_t input_len = 0;
  Bytes prefetch_target = 0;
  Bytes prefetch_bytes = 0;
  TTFTBreakdown breakdown;
  double barrier_wait_s = 0.0;
  std::string bottleneck;
};

/// TTFT over resident-prefix sizes 0..model in `points` even steps for
/// each input length.
[[nodiscard]] inline std::vector<SweepRow> run_sweep(InvokeOptions o, const std::vector<std::int64_t>& input_lens,
                                                     std::size_t points) {
  if (points < 2) throw ConfigError("sweep needs at least 2 points");
  std::vector<SweepRow> rows;
  const Bytes model = model_bytes(o.program);
  for (auto len : input_lens) {
    if (len < 1) throw ConfigError("input_len must be >= 1");
    o.workload.input_len = len;
    for (std::size_t i = 0; i < points; ++i) {
      const Bytes target = static_cast<Bytes>(
          std::llround(static_cast<long double>(model) * static_cast<long double>(i) / static_cast<long double>(points - 1)));
      o.prefetch = PrefetchSpec::fixed(target);
      const auto r = run_invoke(o);
      rows.push_back({len, target, r.tmpl.prefetch_bytes, r.sim.breakdown, r.sim.barrier_wait_s, r.sim.bottleneck()});
    }
  }
  return rows;
}

inline void write_sweep(std::ostream& os, const std::vector<SweepRow>& rows) {
  os << "input_len,prefetch_target_bytes,prefetch_bytes,ttft_s,exposed_load_s,barrier_wait_s,compute_s,dynamic_init_s,"
        "bottleneck\n";
  for (const auto& r : rows)
    os << fmt::format("{},{},{},{:.6f},{:.6f},{:.6f},{:.6f},{:.6f},{}\n", r.input_len, r.prefetch_target, r.prefetch_bytes,
                      r.breakdown.ttft_s, r.breakdown.exposed_load_s, r.barrier_wait_s, r.breakdown.compute_s,
                      r.breakdown.dynamic_init_s, r.bottleneck);
}

struct ReplayOutcome {
  std::vector<InvocationRecord> workload;
  std::vector<ClusterRun> runs;
};

[[nodiscard]] inline ReplayOutcome run_replay(const ExperimentConfig& c) {
  ReplayOutcome out;
  out.workload = experiment_workload(c);
  const Cluster cluster(cluster_config(c, out.workload));
  for (auto p : c.policies) out.runs.push_back(run_cluster(out.workload, cluster, p));
  return out;
}

inline void write_summary(std::ostream& os, const ReplayOutcome& o) {
  os << fmt::format("requests {}\n", o.workload.size());
  os << fmt::format("{:<20}{:>8}{:>8}{:>11}{:>11}{:>11}{:>11}{:>11}\n", "policy", "served", "reject", "mean_s", "p50_s",
                    "p95_s", "p99_s", "max_s");
  std::vector<LatencySummary> sums;
  for (const auto& r : o.runs) {
    sums.push_back(summarize(r.served_ttfts()));
    const auto& s = sums.back();
    os << fmt::format("{:<20}{:>8}{:>8}{:>11.4f}{:>11.4f}{:>11.4f}{:>11.4f}{:>11.4f}\n", to_string(r.policy), s.count,
                      r.rejected, s.mean, s.p50, s.p95, s.p99, s.max);
  }
  os << "band means (percentile ranges of served TTFT, seconds)\n";
  for (std::size_t i = 0; i < o.runs.size(); ++i) {
    os << fmt::format("{:<20}", to_string(o.runs[i].policy));
    for (const auto& b : sums[i].bands) os << fmt::format(" [{:g},{:g}) {:.4f}", b.lo, b.hi, b.mean);
    os << '\n';
  }
  for (std::size_t i = 1; i < o.runs.size(); ++i)
    os << fmt::format("p95 improvement of {} over {}: {:.1f}%\n", to_string(o.runs[i].policy),
                      to_string(o.runs[0].policy), improvement_pct(sums[0].p95, sums[i].p95));
}

inline void cmd_replay(const ExperimentConfig& c, const std::string& out_dir, std::ostream& log) {
  const auto o = run_replay(c);
  if (o.workload.empty()) std::cerr << "warning: empty workload, results are empty\n";
  fs::create_directories(out_dir);
  std::ostringstream wl;
  write_trace(wl, o.workload);
  io::write_text_file((fs::path(out_dir) / "workload.csv").string(), wl.str());
  for (const auto& r : o.runs) {
    std::ostringstream res, cd;
    write_results(res, r.results);
    write_cdf(cd, cdf(r.served_ttfts()));
    io::write_text_file((fs::path(out_dir) / fmt::format("results_{}.csv", to_string(r.policy))).string(), res.str());
    io::write_text_file((fs::path(out_dir) / fmt::format("cdf_{}.csv", to_string(r.policy))).string(), cd.str());
  }
  std::ostringstream sum;
  write_summary(sum, o);
  io::write_text_file((fs::path(out_dir) / "summary.txt").string(), sum.str());
  log << sum.str();
}

}  // namespace coldfork
