// coldfork_acceptance: runs acceptance criteria 1-11 and prints one
// PASS/FAIL line per criterion. Exit status is the number of failures.

#include <atomic>
#include <chrono>
#include <functional>
#include <iostream>
#include <numeric>
#include <random>
#include <sstream>
#include <thread>

#include <CLI11.hpp>

#include "coldfork/experiment.hpp"

namespace {

using namespace coldfork;

struct Outcome {
  bool pass = false;
  std::string detail;
};

const Workload kRef{2048, 1, std::nullopt};

HardwareProfile bare(double pcie) {
  HardwareProfile hw;
  hw.pcie_bandwidth_bytes_per_s = pcie;
  hw.context_create_s = 0;
  hw.context_footprint_bytes = 0;
  hw.per_copy_overhead_s = 0;
  hw.gpu_memory_bytes = 1000 * kGB;
  return hw;
}

ProcessState warm_state(const FunctionTemplate& t) {
  ProcessState ps;
  ps.context_ready = true;
  ps.loaded_kernel_ids = t.kernel_set;
  return ps;
}

FunctionTemplate traced(const FunctionProgram& p, const Workload& w, const HardwareProfile& hw, PrefetchSpec prefetch,
                        std::size_t max_transfers = 300) {
  std::vector<TracePair> tr{{trace_init(p, w), trace_inference(p, w)}};
  return generate_template(p.function_id, true, tr, hw, warm_compute_s(p, w), {max_transfers, prefetch});
}

SimResult fork_once(const FunctionProgram& p, const Workload& w, const FunctionTemplate& t, const HardwareProfile& hw,
                    const SimOptions& opt = {}, StartupPlan* plan_out = nullptr) {
  const auto trace = trace_inference(p, w);
  auto plan = plan_startup(t, trace_init(p, w), trace);
  auto r = simulate_invocation(plan, p, trace, w, t, hw, warm_state(t), opt);
  if (plan_out) *plan_out = std::move(plan);
  return r;
}

/// Program whose kernels read weights w1..wn in one forward pass. Sizes are
/// whole MiB and durations whole 1/1024 s, so with a power-of-two bandwidth
/// every sum is exact and independent of summation order.
FunctionProgram forward_pass(std::mt19937_64& rng) {
  std::uniform_int_distribution<std::size_t> count(1, 8);
  const std::size_t n = count(rng), m = count(rng);
  std::uniform_int_distribution<Bytes> mib(1, 4096);
  std::uniform_int_distribution<std::size_t> owner(0, m - 1);
  std::uniform_int_distribution<int> ticks(0, 1536);
  std::vector<std::size_t> owners(n);
  for (auto& o : owners) o = owner(rng);
  std::sort(owners.begin(), owners.end());
  owners.front() = 0;
  FunctionProgram p;
  p.function_id = "random";
  for (std::size_t i = 0; i < n; ++i) {
    const auto w = fmt::format("w{}", i + 1);
    p.init_ops.emplace_back(LoadCheckpoint{"base", w, mib(rng) * kMiB});
    p.init_ops.emplace_back(ToGpu{w});
  }
  for (std::size_t k = 0; k < m; ++k) {
    KernelCall c{fmt::format("k{}", k), {}, {"x"}, std::ldexp(ticks(rng), -10), 0};
    for (std::size_t i = 0; i < n; ++i)
      if (owners[i] == k) c.reads.push_back(fmt::format("w{}", i + 1));
    if (c.reads.empty()) c.reads = {"x"};
    p.inference_ops.push_back(std::move(c));
  }
  return p;
}

Outcome c1_sizing() {
  std::mt19937_64 rng(1);
  std::uniform_int_distribution<Bytes> m(0, 200 * kGB);
  std::uniform_real_distribution<double> t(0, 5), b(1e8, 64e9);
  std::size_t mismatches = 0;
  for (int i = 0; i < 1000; ++i) {
    const Bytes model = m(rng);
    const double ttft = i % 10 == 0 ? 0.0 : t(rng), bw = b(rng);
    const double direct = static_cast<double>(model) - ttft * bw;
    const Bytes expect = direct > 0 ? static_cast<Bytes>(std::ceil(direct)) : 0;
    mismatches += compute_prefetch_bytes(model, ttft, bw) != expect;
  }
  return {mismatches == 0, fmt::format("{} mismatches in 1000 inputs", mismatches)};
}

Outcome c2_oracle() {
  std::mt19937_64 rng(2);
  std::uniform_int_distribution<int> overhead(1, 64);
  std::size_t equal = 0;
  for (int i = 0; i < 200; ++i) {
    const auto p = forward_pass(rng);
    auto hw = bare(std::ldexp(1.0, 33));
    hw.per_copy_overhead_s = i % 2 ? std::ldexp(overhead(rng), -14) : 0.0;
    const auto t = traced(p, kRef, hw, PrefetchSpec::fixed(0));
    const double sim = fork_once(p, kRef, t, hw).breakdown.ttft_s;
    equal += sim == oracle_ttft(make_oracle_instance(p, kRef, t, hw)).min_ttft_s;
  }
  return {equal == 200, fmt::format("{}/200 exact matches", equal)};
}

Outcome c3_loading_order() {
  const auto p = presets::make_llama_program(presets::llama2_13b());
  const auto hw = presets::a6000();
  const auto t = traced(p, kRef, hw, PrefetchSpec::fixed(0));
  auto init = build_tensor_table(p).gpu_roots;
  auto reverse = init;
  std::reverse(reverse.begin(), reverse.end());
  const double tt = fork_once(p, kRef, t, hw).breakdown.ttft_s;
  const double ti = fork_once(p, kRef, with_loading_order(t, init), hw).breakdown.ttft_s;
  const double tr = fork_once(p, kRef, with_loading_order(t, reverse), hw).breakdown.ttft_s;
  const double gap = std::abs(ti - tr) / std::min(ti, tr);
  return {tt < ti && tt < tr && gap <= 0.05,
          fmt::format("traced {:.4f}s, init {:.4f}s ({:.2f}x), reverse {:.4f}s ({:.2f}x), init/reverse gap {:.2f}%", tt,
                      ti, ti / tt, tr, tr / tt, 100 * gap)};
}

Outcome c4_turning_point() {
  const auto p = presets::make_llama_program(presets::llama2_13b());
  const auto hw = presets::a6000();
  const auto full = traced(p, kRef, hw, PrefetchSpec::full());
  // Copies overlap the CPU part of initialization as well as compute.
  const double window = warm_compute_s(p, kRef) + p.cpu_init_s;
  const Bytes target = compute_prefetch_bytes(full.model_bytes, window, hw.pcie_bandwidth_bytes_per_s);
  const auto [target_n, _] = snap_prefix(full.layout, target);
  bool monotone = true;
  double previous = std::numeric_limits<double>::infinity();
  std::optional<std::size_t> onset, exact_onset;
  Bytes prefix = 0;
  double last = 0;
  for (std::size_t n = 0; n <= full.layout.size(); ++n) {
    if (n > 0) prefix += full.layout[n - 1].size_bytes;
    const auto r = fork_once(p, kRef, with_prefetch(full, prefix), hw);
    last = r.breakdown.ttft_s;
    monotone &= last <= previous + 1e-12;
    previous = last;
    const double floor = r.breakdown.compute_s + r.breakdown.dynamic_init_s;
    if (!onset && last <= floor * 1.01) onset = n;
    if (!exact_onset && r.barrier_wait_s == 0.0) exact_onset = n;
  }
  const bool plateau_ok = std::abs(last - window) <= 0.01 * window;
  const long long off = onset ? static_cast<long long>(*onset) - static_cast<long long>(target_n) : 1LL << 40;
  return {monotone && plateau_ok && onset && std::llabs(off) <= 1,
          fmt::format("monotone {}, plateau {:.4f}s vs compute + init {:.4f}s, within 1% from weight {} vs sized prefix "
                      "{} ({:.2f} GB), no barrier wait from weight {}",
                      monotone, last, window, onset ? static_cast<long long>(*onset) : -1LL, target_n,
                      static_cast<double>(target) / 1e9, exact_onset ? static_cast<long long>(*exact_onset) : -1LL)};
}

Outcome c5_ratio() {
  InvokeOptions o;
  o.program = presets::make_llama_program(presets::llama2_13b());
  o.prefetch = PrefetchSpec::fixed(0);
  o.mode = InvokeMode::cold;
  const auto cold = run_invoke(o).sim.breakdown;
  o.mode = InvokeMode::fork;
  const auto fork = run_invoke(o).sim.breakdown;
  const double ratio = cold.ttft_s / fork.ttft_s;
  return {ratio >= 1.5 && ratio <= 2.5,
          fmt::format("baseline {:.4f}s (code load {:.3f}s) / zero-prefetch fork {:.4f}s = {:.2f}x", cold.ttft_s,
                      cold.code_load_s, fork.ttft_s, ratio)};
}

Outcome c6_dynamic_reuse() {
  const auto p = presets::make_llama_program(presets::llama2_13b(true));
  const auto hw = presets::a6000();
  std::vector<TracePair> tr;
  for (const char* a : {"probe.a", "probe.b"}) {
    const Workload w{2048, 1, std::string(a)};
    tr.push_back({trace_init(p, w), trace_inference(p, w)});
  }
  const auto dyn_t = generate_template(p.function_id, false, tr, hw, warm_compute_s(p, kRef), {300, PrefetchSpec::fixed(0)});
  const Workload req{2048, 1, std::string("tenant")};
  const auto trace = trace_inference(p, req);
  const auto plan = plan_startup(dyn_t, trace_init(p, req), trace);
  Bytes reused = 0, total = 0, adapter = 0;
  for (const auto& [w, a] : plan.actions) {
    total += trace.weight_bytes.at(w);
    if (std::holds_alternative<ReplayInit>(a))
      adapter += trace.weight_bytes.at(w);
    else
      reused += trace.weight_bytes.at(w);
  }
  const double dyn = simulate_invocation(plan, p, trace, req, dyn_t, hw, warm_state(dyn_t)).breakdown.ttft_s;
  // Static twin: the same program with the request's adapter baked into the template.
  const std::vector<TracePair> same{{trace_init(p, req), trace_inference(p, req)}};
  const auto twin_t = generate_template(p.function_id, true, same, hw, warm_compute_s(p, req), {300, PrefetchSpec::fixed(0)});
  const double twin = fork_once(p, req, twin_t, hw).breakdown.ttft_s;
  const double bound = static_cast<double>(adapter) / hw.storage_bandwidth_bytes_per_s +
                       static_cast<double>(adapter) / hw.pcie_bandwidth_bytes_per_s;
  const double share = static_cast<double>(reused) / static_cast<double>(total);
  return {share >= 0.99 && dyn - twin <= 1.1 * bound,
          fmt::format("reused {:.2f}% of bytes, dynamic {:.4f}s - static twin {:.4f}s = {:.4f}s <= 1.1 x {:.4f}s",
                      100 * share, dyn, twin, dyn - twin, bound)};
}

Outcome c7_merging() {
  const auto hw = presets::a100_tp8_shard();
  const auto p = presets::make_uniform_stack("stack", 1200, 17'500'000'000ULL, 0.2);
  const auto unmerged = traced(p, kRef, hw, PrefetchSpec::fixed(0), 1200);
  const auto merged = with_max_transfers(unmerged, 300);
  const double bound = 900 * hw.per_copy_overhead_s;
  bool ok = merged.transfer_groups.size() == 300 && unmerged.transfer_groups.size() == 1200;
  double gap = 0;
  std::string worst;
  for (std::int64_t len = 512; len <= 16384; len *= 2) {
    const Workload w{len, 1, std::nullopt};
    const double tu = fork_once(p, w, unmerged, hw).breakdown.ttft_s;
    const double tm = fork_once(p, w, merged, hw).breakdown.ttft_s;
    gap = tu - tm;
    ok &= tm <= tu && gap <= bound + 1e-9;
    if (tm > tu) worst += fmt::format(" merged slower at {}", len);
  }
  ok &= std::abs(gap - 0.6) <= 0.15 * 0.6;
  return {ok, fmt::format("gap at 16384 tokens {:.1f} ms (bound {:.1f} ms){}", 1e3 * gap, 1e3 * bound, worst)};
}

Outcome c8_prewarm() {
  const auto hw = presets::a6000();
  std::set<std::string> ids;
  for (std::size_t i = 0; i < presets::kPolicyKernelCount; ++i) ids.insert(fmt::format("k{}", i));
  const auto none = prewarm_process({}, hw), policy = prewarm_process(ids, hw), eager = prewarm_eager(hw);
  const auto ms = [](double s) { return std::llround(s * 1e3); };
  const bool ok = ms(none.time_s) == 830 && none.memory_bytes == 270 * kMB && ms(policy.time_s) == 1070 &&
                  policy.memory_bytes == 350 * kMB && ms(eager.time_s) == 3050 &&
                  eager.memory_bytes - none.memory_bytes == 1120 * kMB;
  return {ok, fmt::format("({:.0f} ms, {} MB), ({:.0f} ms, {} MB), ({:.0f} ms, +{} MB); constants solved from these "
                          "endpoints, so this is a consistency check",
                          1e3 * none.time_s, none.memory_bytes / kMB, 1e3 * policy.time_s, policy.memory_bytes / kMB,
                          1e3 * eager.time_s, (eager.memory_bytes - none.memory_bytes) / kMB)};
}

Outcome c9_replay(const std::string& samples, ReplayOutcome& out) {
  auto cfg = load_experiment(samples + "/mixed_fleet.json");
  cfg.policies = {Policy::baseline, Policy::tidal, Policy::tidal_dk, Policy::tidal_dk_budgeted};
  out = run_replay(cfg);
  std::vector<double> p95;
  for (const auto& r : out.runs) {
    auto v = r.served_ttfts();
    std::sort(v.begin(), v.end());
    p95.push_back(v.empty() ? 0.0 : percentile(v, 95));
  }
  const double imp = improvement_pct(p95[0], p95[1]);
  const bool ok = p95[0] > p95[1] && p95[1] > p95[2] && p95[2] >= p95[3] && imp >= 50;
  return {ok, fmt::format("{} requests; p95 baseline {:.3f}s > zero-prefetch {:.3f}s > dk {:.4f}s >= budgeted {:.4f}s; "
                          "improvement {:.1f}%",
                          out.workload.size(), p95[0], p95[1], p95[2], p95[3], imp)};
}

Outcome c10_safety(const ReplayOutcome& replay) {
  std::mt19937_64 rng(10);
  int detected = 0, trials = 0;
  while (trials < 100) {
    const auto p = forward_pass(rng);
    const auto hw = bare(8e9);
    const auto t = traced(p, kRef, hw, PrefetchSpec::fixed(0), 1 + trials % 4);
    const auto trace = trace_inference(p, kRef);
    auto plan = plan_startup(t, trace_init(p, kRef), trace);
    std::vector<std::pair<std::size_t, std::size_t>> entries;
    for (const auto& [k, gs] : plan.sync_barriers)
      for (auto g : gs) entries.emplace_back(k, g);
    if (entries.empty()) continue;
    ++trials;
    const auto [k, g] = entries[std::uniform_int_distribution<std::size_t>(0, entries.size() - 1)(rng)];
    plan.sync_barriers[k].erase(g);
    CopyFault fault;
    fault.group_order.resize(t.transfer_groups.size());
    std::iota(fault.group_order.begin(), fault.group_order.end(), std::size_t{0});
    std::shuffle(fault.group_order.begin(), fault.group_order.end(), rng);
    std::erase(fault.group_order, g);
    fault.group_order.push_back(g);
    fault.extra_delay_s.assign(t.transfer_groups.size(), 0.0);
    fault.extra_delay_s[g] = 1e3;
    SimOptions opt;
    opt.fault = fault;
    detected += !check_residency(simulate_invocation(plan, p, trace, kRef, t, hw, warm_state(t), opt), trace).empty();
  }

  FunctionProgram p;
  p.function_id = "cow";
  for (int i = 1; i <= 4; ++i) {
    const auto w = fmt::format("w{}", i);
    p.init_ops.emplace_back(LoadCheckpoint{"base", w, static_cast<Bytes>(i) * kGB});
    p.init_ops.emplace_back(ToGpu{w});
  }
  p.inference_ops = {{"k0", {"w1"}, {"x"}, 0.1, 0},
                     {"k1", {"x", "w2"}, {"x", "w1"}, 0.1, 0},
                     {"k2", {"x", "w3"}, {"x"}, 0.1, 0},
                     {"k3", {"x", "w4"}, {"x", "w3", "w4"}, 0.1, 0}};
  const auto t = traced(p, kRef, bare(1e9), PrefetchSpec::fixed(3 * kGB));
  const auto trace = trace_inference(p, kRef);
  const auto plan = plan_startup(t, trace_init(p, kRef), trace);
  const TemplateImage image(t);
  const auto before = image.snapshot();
  const auto multiset = t.byte_multiset();
  std::atomic<int> runs{0};
  std::vector<std::thread> workers;
  for (int i = 0; i < 8; ++i)
    workers.emplace_back([&] {
      for (int j = 0; j < 125; ++j) {
        ForkedState f(image, plan, trace);
        f.run(trace);
        ++runs;
      }
    });
  for (auto& w : workers) w.join();
  const bool intact = image.snapshot() == before && t.byte_multiset() == multiset && !plan.cow_copies.empty();

  bool memory_ok = true;
  for (const auto& r : replay.runs)
    for (const auto& g : r.gpus) memory_ok &= g.peak_bytes <= g.capacity;

  return {detected == 100 && intact && runs == 1000 && memory_ok,
          fmt::format("barrier removal detected {}/100; template unchanged after {} concurrent forks with {} copy-on-write "
                      "weights: {}; peak memory within capacity on every GPU: {}",
                      detected, runs.load(), plan.cow_copies.size(), intact, memory_ok)};
}

Outcome c11_determinism(const std::string& samples) {
  const auto render = [&] {
    std::ostringstream os;
    TraceOptions to;
    to.program = "preset:llama3-8b-lora";
    to.adapters = {"a", "b"};
    to.out = (fs::temp_directory_path() / "coldfork_acceptance_trace").string();
    std::ostringstream log;
    os << io::dump(io::to_json(cmd_trace(to, log))) << log.str();
    InvokeOptions io_;
    io_.program = presets::make_llama_program(presets::llama2_13b());
    write_timeline(os, run_invoke(io_).sim.timeline);
    write_sweep(os, run_sweep(io_, {1024, 4096}, 9));
    auto cfg = load_experiment(samples + "/mixed_fleet.json");
    cfg.seed = 11;
    cfg.synthesis.duration_s = 600;
    const auto r = run_replay(cfg);
    write_trace(os, r.workload);
    for (const auto& run : r.runs) write_results(os, run.results);
    write_summary(os, r);
    return os.str();
  };
  const auto a = render(), b = render();
  fs::remove_all(fs::temp_directory_path() / "coldfork_acceptance_trace");
  return {a == b, fmt::format("trace, invoke, sweep and replay outputs identical across two runs ({} bytes)", a.size())};
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Acceptance criteria 1-11"};
  std::string samples = "samples";
  app.add_option("--samples", samples, "Directory holding mixed_fleet.json");
  CLI11_PARSE(app, argc, argv);

  ReplayOutcome replay;
  const std::vector<std::pair<const char*, std::function<Outcome()>>> criteria = {
      {"resident-size formula exact on 1000 inputs", c1_sizing},
      {"overlap recurrence equals exhaustive oracle", c2_oracle},
      {"traced loading order beats init and reverse", c3_loading_order},
      {"prefetch sweep monotone with turning point", c4_turning_point},
      {"baseline / zero-prefetch fork ratio in [1.5, 2.5]", c5_ratio},
      {"dynamic function reuse", c6_dynamic_reuse},
      {"transfer merging gap", c7_merging},
      {"pre-warm cost endpoints", c8_prewarm},
      {"cluster replay p95 ordering", [&] { return c9_replay(samples, replay); }},
      {"safety suite", [&] { return c10_safety(replay); }},
      {"determinism", [&] { return c11_determinism(samples); }},
  };
  int failures = 0;
  for (std::size_t i = 0; i < criteria.size(); ++i) {
    const auto start = std::chrono::steady_clock::now();
    Outcome o;
    try {
      o = criteria[i].second();
    } catch (const std::exception& e) {
      o = {false, std::string("exception: ") + e.what()};
    }
    const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
    failures += !o.pass;
    std::cout << fmt::format("criterion {:>2}: {} {} - {} [{:.2f}s]\n", i + 1, o.pass ? "PASS" : "FAIL",
                             criteria[i].first, o.detail, secs)
              << std::flush;
  }
  return failures;
}
