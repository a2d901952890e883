#pragma once

// Deterministic single-GPU simulation of one invocation: a copy queue
// (PCIe), an in-order compute queue, storage reads for replayed weights,
// lazy code-segment loads and copy-on-write duplications.

#include <algorithm>
#include <cmath>
#include <limits>
#include <map>
#include <numeric>
#include <optional>
#include <ostream>
#include <set>
#include <string>
#include <vector>

#include <fmt/format.h>

#include "coldfork/fork.hpp"
#include "coldfork/model.hpp"
#include "coldfork/template.hpp"
#include "coldfork/tracer.hpp"

namespace coldfork {

struct ProcessState {
  std::set<std::string> loaded_kernel_ids;
  bool all_kernels_loaded = false;
  bool context_ready = false;
  Bytes resident_bytes = 0;

  [[nodiscard]] bool kernel_loaded(const std::string& id) const {
    return all_kernels_loaded || loaded_kernel_ids.count(id) != 0;
  }
};

enum class EventKind { context, cpu_init, code_load, storage_read, h2g_copy, cow_copy, kernel };
enum class Resource { compute_queue, copy_queue, storage, host };

[[nodiscard]] inline const char* to_string(EventKind k) {
  switch (k) {
    case EventKind::context: return "context";
    case EventKind::cpu_init: return "cpu_init";
    case EventKind::code_load: return "code_load";
    case EventKind::storage_read: return "storage_read";
    case EventKind::h2g_copy: return "h2g_copy";
    case EventKind::cow_copy: return "cow_copy";
    case EventKind::kernel: return "kernel";
  }
  return "?";
}

[[nodiscard]] inline const char* to_string(Resource r) {
  switch (r) {
    case Resource::compute_queue: return "compute_queue";
    case Resource::copy_queue: return "copy_queue";
    case Resource::storage: return "storage";
    case Resource::host: return "host";
  }
  return "?";
}

struct TimelineEvent {
  double start_s = 0.0;
  double end_s = 0.0;
  EventKind kind = EventKind::kernel;
  Resource resource = Resource::compute_queue;
  std::string label;
  /// Kernel ordinal, transfer-group index, or -1.
  long long index = -1;
};

using Timeline = std::vector<TimelineEvent>;

/// Perturbs the copy queue; used by fault-injection tests only.
struct CopyFault {
  /// Permutation of transfer-group indices; empty keeps layout order.
  std::vector<std::size_t> group_order;
  /// Extra seconds added to each group's transfer (indexed by group).
  std::vector<double> extra_delay_s;
};

struct SimOptions {
  /// Multiplier on kernel durations for the runtime tracer (e.g. 0.012).
  double tracing_overhead = 0.0;
  bool enforce_barriers = true;
  std::optional<CopyFault> fault;
  /// When false the memory capacity check is skipped (what-if runs).
  bool check_memory = true;
  /// Timeline events and per-weight residency times; off for bulk replay.
  bool record_timeline = true;
};

struct SimResult {
  Timeline timeline;
  TTFTBreakdown breakdown;
  /// Compute-queue idle time spent waiting on transfer barriers.
  double barrier_wait_s = 0.0;
  /// Delay of the first kernel caused by copy-command submission.
  double submit_stall_s = 0.0;
  /// Sum of host->GPU copy durations.
  double copy_time_s = 0.0;
  Bytes gpu_bytes = 0;
  std::vector<double> kernel_start;
  std::vector<double> kernel_end;
  /// Canonical weight -> time its data is on the GPU.
  std::map<std::string, double> resident_at;
  std::vector<double> group_end;
  /// Canonical weight -> time its copy-on-write duplicate completed.
  std::map<std::string, double> cow_done;

  /// "loading" when transfer barriers stall the compute queue, else "inference".
  [[nodiscard]] std::string bottleneck() const {
    return barrier_wait_s + submit_stall_s > 0.01 * breakdown.ttft_s ? "loading" : "inference";
  }
};

namespace detail {

inline double copy_duration(Bytes bytes, const HardwareProfile& hw) {
  return hw.per_copy_overhead_s + static_cast<double>(bytes) / hw.pcie_bandwidth_bytes_per_s;
}

}  // namespace detail

/// An invocation reduced to indices: everything except kernel durations is
/// fixed by the plan, program, template, hardware and process state.
struct CompiledInvocation {
  struct Replay {
    std::string weight;
    Bytes bytes = 0;
    bool from_storage = false;
  };
  struct Kernel {
    const KernelCall* call = nullptr;
    std::vector<std::size_t> barriers;
    std::vector<std::pair<std::string, Bytes>> cow;
    bool code_load = false;
  };
  double t0 = 0.0;
  double cpu_init_s = 0.0;
  std::vector<Replay> replays;
  std::vector<Bytes> group_bytes;
  std::vector<Kernel> kernels;
  /// Canonical weight -> group index, or -1 for reused weights.
  std::vector<std::pair<std::string, long long>> resident_weights;
  Bytes gpu_bytes = 0;
  HardwareProfile hw;
};

/// Resolves plan actions, barriers, copy-on-write targets and cold kernels.
[[nodiscard]] inline CompiledInvocation compile_invocation(const StartupPlan& plan, const FunctionProgram& program,
                                                           const InferenceTraceRecord& trace,
                                                           const FunctionTemplate& tpl, const HardwareProfile& hw,
                                                           const ProcessState& process) {
  const auto& sizes = trace.weight_bytes;
  if (plan.actions.size() != sizes.size())
    throw Error("plan/program mismatch: plan covers " + std::to_string(plan.actions.size()) + " weights, program has " +
                std::to_string(sizes.size()));
  for (const auto& [w, _] : sizes)
    if (!plan.actions.count(w)) throw Error("plan/program mismatch: no action for weight '" + w + "'");
  if (trace.kernel_sequence.size() != program.inference_ops.size())
    throw Error("plan/program mismatch: trace and program disagree on kernels");

  CompiledInvocation c;
  c.hw = hw;
  c.t0 = process.context_ready ? 0.0 : hw.context_create_s;
  c.cpu_init_s = program.cpu_init_s;

  // Memory: process state, resident template prefix, loads, duplicates.
  c.gpu_bytes = process.resident_bytes;
  for (const auto& [w, a] : plan.actions) c.gpu_bytes += sizes.at(w);
  for (const auto& w : plan.cow_copies) c.gpu_bytes += sizes.at(w);

  for (const auto& w : plan.replay_order)
    c.replays.push_back({w, sizes.at(w), std::get<ReplayInit>(plan.actions.at(w)).source == ReplayInit::Source::storage});

  c.group_bytes.assign(tpl.transfer_groups.size(), 0);
  for (const auto& [w, a] : plan.actions) {
    if (const auto* al = std::get_if<AsyncLoad>(&a)) {
      c.group_bytes.at(al->group_index) += sizes.at(w);
      c.resident_weights.emplace_back(w, static_cast<long long>(al->group_index));
    } else if (std::holds_alternative<ReuseResident>(a)) {
      c.resident_weights.emplace_back(w, -1);
    }
  }

  std::set<std::string> loaded_now;
  std::set<std::string> cow_pending = plan.cow_copies;
  for (std::size_t k = 0; k < program.inference_ops.size(); ++k) {
    CompiledInvocation::Kernel ck;
    ck.call = &program.inference_ops[k];
    if (auto it = plan.sync_barriers.find(k); it != plan.sync_barriers.end())
      ck.barriers.assign(it->second.begin(), it->second.end());
    for (const auto& w : trace.kernel_sequence[k].weight_writes)
      if (cow_pending.erase(w)) ck.cow.emplace_back(w, sizes.at(w));
    ck.code_load = !process.kernel_loaded(ck.call->kernel_id) && loaded_now.insert(ck.call->kernel_id).second &&
                   hw.code_load_s_per_kernel > 0;
    c.kernels.push_back(std::move(ck));
  }
  return c;
}

/// Runs a compiled invocation for one workload.
///
/// Ordering rules: context creation (when the process has none) precedes
/// everything. The initialization phase runs pure-CPU work and replays
/// dynamic weights (storage read, then a host->GPU copy that jumps the copy
/// queue). Asynchronous transfer groups stream in layout order from the
/// start of initialization. Submitting N copy commands delays the first
/// kernel launch by N * per_copy_overhead_s. Kernels run in program order,
/// each waiting for its barrier groups; cold kernels pay a code load at
/// first call and copy-on-write duplicates precede the first writer.
[[nodiscard]] inline SimResult run_invocation(const CompiledInvocation& c, const Workload& workload,
                                              const SimOptions& options = {}) {
  const auto& hw = c.hw;
  SimResult res;
  const bool detailed = options.record_timeline;
  auto emit = [&](double s, double e, EventKind k, Resource r, const std::string& label, long long idx = -1) {
    if (detailed) res.timeline.push_back(TimelineEvent{s, e, k, r, label, idx});
  };

  res.gpu_bytes = c.gpu_bytes;
  if (options.check_memory && c.gpu_bytes > hw.gpu_memory_bytes)
    throw OutOfMemory(fmt::format("invocation needs {} bytes, GPU has {}", c.gpu_bytes, hw.gpu_memory_bytes));

  const double t0 = c.t0;
  if (t0 > 0) emit(0.0, t0, EventKind::context, Resource::compute_queue, "context");
  if (c.cpu_init_s > 0) emit(t0, t0 + c.cpu_init_s, EventKind::cpu_init, Resource::host, "cpu_init");

  // Replays become copyable once their bytes are in host memory.
  std::vector<double> available(c.replays.size(), t0);
  double storage_cursor = t0;
  for (std::size_t i = 0; i < c.replays.size(); ++i) {
    if (!c.replays[i].from_storage) continue;
    const double end = storage_cursor + static_cast<double>(c.replays[i].bytes) / hw.storage_bandwidth_bytes_per_s;
    emit(storage_cursor, end, EventKind::storage_read, Resource::storage, c.replays[i].weight);
    storage_cursor = available[i] = end;
  }

  const std::size_t n_groups = c.group_bytes.size();
  std::vector<std::size_t> group_queue;
  if (options.fault && !options.fault->group_order.empty()) {
    group_queue = options.fault->group_order;
  } else {
    group_queue.resize(n_groups);
    std::iota(group_queue.begin(), group_queue.end(), std::size_t{0});
  }
  std::erase_if(group_queue, [&](std::size_t g) { return c.group_bytes.at(g) == 0; });
  res.group_end.assign(n_groups, t0);

  double copy_cursor = t0;
  std::size_t next_replay = 0, next_group = 0;
  double init_end = t0 + c.cpu_init_s;
  while (next_replay < c.replays.size() || next_group < group_queue.size()) {
    const bool replay_ready = next_replay < c.replays.size() && available[next_replay] <= copy_cursor;
    if (replay_ready || next_group == group_queue.size()) {
      const auto& p = c.replays[next_replay];
      const double start = std::max(copy_cursor, available[next_replay]);
      ++next_replay;
      const double end = start + detail::copy_duration(p.bytes, hw);
      emit(start, end, EventKind::h2g_copy, Resource::copy_queue, p.weight);
      res.copy_time_s += end - start;
      if (detailed) res.resident_at[p.weight] = end;
      init_end = std::max(init_end, end);
      copy_cursor = end;
    } else {
      const std::size_t g = group_queue[next_group++];
      double dur = detail::copy_duration(c.group_bytes[g], hw);
      if (options.fault && g < options.fault->extra_delay_s.size()) dur += options.fault->extra_delay_s[g];
      const double end = copy_cursor + dur;
      if (detailed)
        emit(copy_cursor, end, EventKind::h2g_copy, Resource::copy_queue, fmt::format("group{}", g),
             static_cast<long long>(g));
      res.copy_time_s += end - copy_cursor;
      res.group_end[g] = end;
      copy_cursor = end;
    }
  }
  if (detailed)
    for (const auto& [w, g] : c.resident_weights)
      res.resident_at[w] = g < 0 ? 0.0 : res.group_end[static_cast<std::size_t>(g)];

  const double submit_floor = t0 + static_cast<double>(group_queue.size()) * hw.per_copy_overhead_s;
  const double launch_floor = std::max(init_end, submit_floor);
  res.submit_stall_s = launch_floor - init_end;

  double code_load_s = 0.0, compute_s = 0.0;
  double cursor = launch_floor;
  const std::size_t n_kernels = c.kernels.size();
  res.kernel_start.resize(n_kernels);
  res.kernel_end.resize(n_kernels);
  for (std::size_t k = 0; k < n_kernels; ++k) {
    const auto& ck = c.kernels[k];
    double ready = cursor;
    if (options.enforce_barriers)
      for (auto g : ck.barriers) ready = std::max(ready, res.group_end.at(g));
    res.barrier_wait_s += ready - cursor;
    cursor = ready;

    for (const auto& [w, bytes] : ck.cow) {
      const double dur = static_cast<double>(bytes) / hw.gpu_copy_bandwidth_bytes_per_s;
      emit(cursor, cursor + dur, EventKind::cow_copy, Resource::compute_queue, w, static_cast<long long>(k));
      cursor += dur;
      compute_s += dur;
      res.cow_done[w] = cursor;
    }
    if (ck.code_load) {
      emit(cursor, cursor + hw.code_load_s_per_kernel, EventKind::code_load, Resource::compute_queue,
           ck.call->kernel_id, static_cast<long long>(k));
      cursor += hw.code_load_s_per_kernel;
      code_load_s += hw.code_load_s_per_kernel;
    }
    const double dur = ck.call->duration(workload) * (1.0 + options.tracing_overhead);
    res.kernel_start[k] = cursor;
    emit(cursor, cursor + dur, EventKind::kernel, Resource::compute_queue, ck.call->kernel_id,
         static_cast<long long>(k));
    cursor += dur;
    res.kernel_end[k] = cursor;
    compute_s += dur;
  }

  auto& b = res.breakdown;
  b.context_s = t0;
  b.dynamic_init_s = init_end - t0;
  b.code_load_s = code_load_s;
  b.compute_s = compute_s;
  b.ttft_s = cursor;
  b.exposed_load_s = std::max(0.0, b.ttft_s - (b.context_s + b.dynamic_init_s + b.code_load_s + b.compute_s));

  std::stable_sort(res.timeline.begin(), res.timeline.end(),
                   [](const TimelineEvent& a, const TimelineEvent& b) { return a.start_s < b.start_s; });
  return res;
}

/// Simulates one invocation of `program` started from `plan`.
[[nodiscard]] inline SimResult simulate_invocation(const StartupPlan& plan, const FunctionProgram& program,
                                                   const InferenceTraceRecord& trace, const Workload& workload,
                                                   const FunctionTemplate& tpl, const HardwareProfile& hw,
                                                   const ProcessState& process, const SimOptions& options = {}) {
  return run_invocation(compile_invocation(plan, program, trace, tpl, hw, process), workload, options);
}

[[nodiscard]] inline SimResult simulate_invocation(const StartupPlan& plan, const FunctionProgram& program,
                                                   const Workload& workload, const FunctionTemplate& tpl,
                                                   const HardwareProfile& hw, const ProcessState& process,
                                                   const SimOptions& options = {}) {
  return simulate_invocation(plan, program, trace_inference(program, workload), workload, tpl, hw, process, options);
}

/// Fully warm execution: every weight resident, every kernel loaded.
[[nodiscard]] inline TTFTBreakdown simulate_warm(const FunctionProgram& program, const Workload& workload,
                                                 double tracing_overhead = 0.0) {
  require_valid(program);
  TTFTBreakdown b;
  for (const auto& k : program.inference_ops) b.compute_s += k.duration(workload) * (1.0 + tracing_overhead);
  b.ttft_s = b.compute_s;
  return b;
}

// ---------------------------------------------------------------------------
// Checkers

/// Every kernel starts only after all weights it reads are on the GPU.
/// Independent of the plan's barrier sets.
[[nodiscard]] inline std::vector<std::string> check_residency(const SimResult& res,
                                                              const InferenceTraceRecord& trace) {
  std::vector<std::string> out;
  for (std::size_t k = 0; k < trace.kernel_sequence.size(); ++k) {
    for (const auto& w : trace.kernel_sequence[k].weight_reads) {
      auto it = res.resident_at.find(w);
      const double ready = it == res.resident_at.end() ? std::numeric_limits<double>::infinity() : it->second;
      if (ready > res.kernel_start.at(k))
        out.push_back(fmt::format("kernel {} reads '{}' at {:.9f}s, resident at {:.9f}s", k, w, res.kernel_start[k], ready));
    }
  }
  return out;
}

/// Timeline invariants: no overlap on a resource, barrier ordering,
/// copy-on-write duplicates before the first writer.
[[nodiscard]] inline std::vector<std::string> check_timeline(const SimResult& res, const StartupPlan& plan,
                                                             const InferenceTraceRecord& trace) {
  std::vector<std::string> out;
  std::map<Resource, std::vector<std::pair<double, double>>> spans;
  for (const auto& e : res.timeline) spans[e.resource].emplace_back(e.start_s, e.end_s);
  for (auto& [r, v] : spans) {
    std::sort(v.begin(), v.end());
    for (std::size_t i = 1; i < v.size(); ++i)
      if (v[i].first < v[i - 1].second - 1e-12) out.push_back(std::string("overlap on ") + to_string(r));
  }
  for (const auto& [k, groups] : plan.sync_barriers)
    for (auto g : groups)
      if (res.kernel_start.at(k) < res.group_end.at(g)) out.push_back(fmt::format("kernel {} before group {}", k, g));
  for (const auto& w : plan.cow_copies) {
    for (std::size_t k = 0; k < trace.kernel_sequence.size(); ++k) {
      const auto& ws = trace.kernel_sequence[k].weight_writes;
      if (std::find(ws.begin(), ws.end(), w) == ws.end()) continue;
      auto it = res.cow_done.find(w);
      if (it == res.cow_done.end() || it->second > res.kernel_start[k])
        out.push_back(fmt::format("kernel {} writes '{}' before its copy", k, w));
      break;
    }
  }
  return out;
}

inline void write_timeline(std::ostream& os, const Timeline& timeline) {
  os << "start_s\tend_s\tresource\tkind\tlabel\n";
  for (const auto& e : timeline)
    os << fmt::format("{:.9f}\t{:.9f}\t{}\t{}\t{}\n", e.start_s, e.end_s, to_string(e.resource), to_string(e.kind),
                      e.label);
}

// ---------------------------------------------------------------------------
// Exhaustive loading-order oracle

/// Search space of the oracle: weights still to load and the kernel stream.
struct OracleInstance {
  std::vector<LayoutEntry> loads;
  std::vector<std::vector<std::string>> kernel_reads;
  std::vector<double> kernel_durations;
  double pcie_bandwidth = 1.0;
  double per_copy_overhead_s = 0.0;
};

struct OracleResult {
  double min_ttft_s = 0.0;
  std::vector<std::string> argmin_order;
  std::size_t orders_evaluated = 0;
};

inline constexpr std::size_t kOracleMaxLoads = 8;

/// TTFT of one loading order by direct recurrence: copies back to back,
/// kernel k starts at max(previous end, its reads' arrival, command floor).
[[nodiscard]] inline double evaluate_load_order(const OracleInstance& inst, const std::vector<std::size_t>& order) {
  std::map<std::string, double> arrival;
  double c = 0.0;
  for (auto i : order) {
    c = c + (inst.per_copy_overhead_s + static_cast<double>(inst.loads[i].size_bytes) / inst.pcie_bandwidth);
    arrival[inst.loads[i].weight] = c;
  }
  double end = static_cast<double>(order.size()) * inst.per_copy_overhead_s;
  for (std::size_t k = 0; k < inst.kernel_durations.size(); ++k) {
    double start = end;
    for (const auto& w : inst.kernel_reads[k]) {
      auto it = arrival.find(w);
      if (it != arrival.end()) start = std::max(start, it->second);
    }
    end = start + inst.kernel_durations[k];
  }
  return end;
}

[[nodiscard]] inline OracleResult oracle_ttft(const OracleInstance& inst) {
  if (inst.loads.size() > kOracleMaxLoads)
    throw std::invalid_argument(fmt::format("oracle limited to {} loads, got {}", kOracleMaxLoads, inst.loads.size()));
  std::vector<std::size_t> perm(inst.loads.size());
  std::iota(perm.begin(), perm.end(), std::size_t{0});
  OracleResult best{std::numeric_limits<double>::infinity(), {}, 0};
  do {
    const double t = evaluate_load_order(inst, perm);
    ++best.orders_evaluated;
    if (t < best.min_ttft_s) {
      best.min_ttft_s = t;
      best.argmin_order.clear();
      for (auto i : perm) best.argmin_order.push_back(inst.loads[i].weight);
    }
  } while (std::next_permutation(perm.begin(), perm.end()));
  return best;
}

/// Oracle instance for a warm process forking from `tpl` with no replays.
[[nodiscard]] inline OracleInstance make_oracle_instance(const FunctionProgram& program, const Workload& workload,
                                                         const FunctionTemplate& tpl, const HardwareProfile& hw) {
  const auto trace = trace_inference(program, workload);
  OracleInstance inst;
  std::set<std::string> loaded;
  for (std::size_t i = tpl.resident_count; i < tpl.layout.size(); ++i) {
    inst.loads.push_back(tpl.layout[i]);
    loaded.insert(tpl.layout[i].weight);
  }
  for (std::size_t k = 0; k < program.inference_ops.size(); ++k) {
    std::vector<std::string> reads;
    for (const auto& w : trace.kernel_sequence[k].weight_reads)
      if (loaded.count(w)) reads.push_back(w);
    inst.kernel_reads.push_back(std::move(reads));
    inst.kernel_durations.push_back(program.inference_ops[k].duration(workload));
  }
  inst.pcie_bandwidth = hw.pcie_bandwidth_bytes_per_s;
  inst.per_copy_overhead_s = hw.per_copy_overhead_s;
  return inst;
}

}  // namespace coldfork
