#pragma once

// Cluster replay: GPU placement, keep-alive, pre-warmed pools, template
// forks and early reject over an invocation stream.

#include <algorithm>
#include <cmath>
#include <map>
#include <memory>
#include <set>
#include <string>
#include <tuple>
#include <vector>

#include <fmt/format.h>

#include "coldfork/engine.hpp"
#include "coldfork/fork.hpp"
#include "coldfork/pool.hpp"
#include "coldfork/template.hpp"
#include "coldfork/tracer.hpp"
#include "coldfork/workload.hpp"

namespace coldfork {

enum class Policy { baseline, tidal, tidal_dk, tidal_dk_budgeted };

[[nodiscard]] inline const char* to_string(Policy p) {
  switch (p) {
    case Policy::baseline: return "baseline";
    case Policy::tidal: return "tidal";
    case Policy::tidal_dk: return "tidal-dk";
    case Policy::tidal_dk_budgeted: return "tidal-dk-budgeted";
  }
  return "?";
}

[[nodiscard]] inline Policy parse_policy(const std::string& s) {
  for (auto p : {Policy::baseline, Policy::tidal, Policy::tidal_dk, Policy::tidal_dk_budgeted})
    if (s == to_string(p)) return p;
  throw ConfigError("unknown policy '" + s + "'");
}

enum class StartPath { warm, static_core, fork, cold };

[[nodiscard]] inline const char* to_string(StartPath p) {
  switch (p) {
    case StartPath::warm: return "warm";
    case StartPath::static_core: return "static-core";
    case StartPath::fork: return "fork";
    case StartPath::cold: return "cold";
  }
  return "?";
}

[[nodiscard]] inline bool uses_adapter(const FunctionProgram& p) {
  for (const auto& op : p.init_ops)
    if (const auto* l = std::get_if<LoadCheckpoint>(&op); l && l->checkpoint_id == kAdapterPlaceholder) return true;
  return false;
}

struct ClusterConfig {
  HardwareProfile hw;
  PoolConfig pool;
  std::vector<FunctionProgram> programs;
  /// Functions whose weights sit in the host cache; empty means all.
  std::set<std::string> host_cache;
  /// Functions given an enlarged GPU-resident template under the budgeted
  /// policy. They are spread round-robin over the first `budget_gpus` GPUs,
  /// whose template budget they share evenly.
  std::vector<std::string> budget_functions;
  std::size_t budget_gpus = 2;
  /// Workload the templates are sized against.
  Workload reference_workload{2048, 1, std::nullopt};
  std::size_t max_transfers = 300;
  double tracing_overhead = 0.0;
};

struct RequestResult {
  std::uint64_t request_id = 0;
  std::string function_id;
  double arrival_s = 0.0;
  std::string decision;
  int gpu = -1;
  double start_s = 0.0;
  double queue_s = 0.0;
  /// Service-time stages; ttft_s below adds the queue wait.
  TTFTBreakdown breakdown;
  double ttft_s = 0.0;
  bool rejected = false;
};

/// Immutable per-function state derived from the configuration.
struct ClusterFunction {
  FunctionProgram program;
  FunctionTemplate tmpl;
  bool dynamic = false;
  double keep_alive_s = 0.0;
  /// bandwidth-sized resident bytes at the reference workload.
  Bytes sized_bytes = 0;
};

struct Decision {
  enum class Kind { run, queue, reject };
  Kind kind = Kind::reject;
  int gpu = -1;
  StartPath path = StartPath::cold;
  bool pooled_process = false;
  Bytes prefetch_bytes = 0;
  double start_s = 0.0;
  double predicted_wait_s = 0.0;
  TTFTBreakdown service;
  /// New GPU bytes the invocation brings (shared template bytes excluded).
  Bytes new_bytes = 0;

  [[nodiscard]] std::string label() const {
    if (kind == Kind::reject) return "reject";
    return std::string(kind == Kind::run ? "run-" : "queue-") + to_string(path);
  }
};

class Cluster {
 public:
  explicit Cluster(ClusterConfig cfg) : cfg_(std::move(cfg)) {
    cfg_.hw.validate();
    cfg_.pool.validate();
    if (cfg_.programs.empty()) throw ConfigError("cluster has no functions");
    for (auto& p : cfg_.programs) {
      require_valid(p);
      if (functions_.count(p.function_id)) throw ConfigError("duplicate function '" + p.function_id + "'");
      ClusterFunction f;
      f.dynamic = uses_adapter(p);
      std::vector<TracePair> traces;
      if (f.dynamic) {
        for (const char* a : {"probe.a", "probe.b"}) {
          Workload w = cfg_.reference_workload;
          w.adapter_id = a;
          traces.push_back({trace_init(p, w), trace_inference(p, w)});
        }
      } else {
        traces.push_back({trace_init(p, cfg_.reference_workload), trace_inference(p, cfg_.reference_workload)});
      }
      const double warm = warm_compute_s(p, cfg_.reference_workload);
      f.tmpl = generate_template(p.function_id, p.declared_static, traces, cfg_.hw, warm,
                                 {cfg_.max_transfers, PrefetchSpec::fixed(0)});
      f.sized_bytes = compute_prefetch_bytes(f.tmpl.model_bytes, warm, cfg_.hw.pcie_bandwidth_bytes_per_s);
      f.keep_alive_s = cfg_.pool.keep_alive_s.value_or(static_cast<double>(f.tmpl.model_bytes) /
                                                       cfg_.hw.pcie_bandwidth_bytes_per_s);
      f.program = p;
      templates_[p.function_id] = f.tmpl;
      functions_.emplace(p.function_id, std::move(f));
    }
    std::set<std::string> cache = cfg_.host_cache;
    if (cache.empty())
      for (const auto& [id, _] : functions_) cache.insert(id);
    policy_kernels_ = loading_policy(cache, templates_, &missing_templates_);
    tidal_prewarm_ = prewarm_process(policy_kernels_, cfg_.hw, cfg_.hw.gpu_memory_bytes);
    baseline_prewarm_ = prewarm_process({}, cfg_.hw, cfg_.hw.gpu_memory_bytes);
    for (const auto& f : cfg_.budget_functions)
      if (!functions_.count(f)) throw ConfigError("budget function '" + f + "' is not configured");
  }

  [[nodiscard]] const ClusterConfig& config() const { return cfg_; }
  [[nodiscard]] const std::map<std::string, ClusterFunction>& functions() const { return functions_; }
  [[nodiscard]] const ClusterFunction& function(const std::string& id) const {
    auto it = functions_.find(id);
    if (it == functions_.end()) throw ConfigError("request for unknown function '" + id + "'");
    return it->second;
  }
  [[nodiscard]] const std::set<std::string>& policy_kernels() const { return policy_kernels_; }
  [[nodiscard]] const PrewarmResult& prewarm(Policy p) const {
    return p == Policy::baseline ? baseline_prewarm_ : tidal_prewarm_;
  }
  [[nodiscard]] const std::vector<std::string>& missing_templates() const { return missing_templates_; }

  /// GPU holding the enlarged template of budget function `i`.
  [[nodiscard]] std::size_t budget_gpu(std::size_t i) const {
    const auto n = std::clamp<std::size_t>(cfg_.budget_gpus, 1, static_cast<std::size_t>(cfg_.hw.gpu_count));
    return i % n;
  }

  /// Template bytes a budgeted function keeps resident: its bandwidth-sized bytes,
  /// capped at an even share of its GPU's template budget.
  [[nodiscard]] Bytes budget_template_bytes(std::size_t i) const {
    std::size_t sharing = 0;
    for (std::size_t j = 0; j < cfg_.budget_functions.size(); ++j) sharing += budget_gpu(j) == budget_gpu(i);
    return std::min(cfg_.pool.template_budget_bytes / sharing, function(cfg_.budget_functions.at(i)).sized_bytes);
  }

  /// Service time of one start path. Memoized; the adapter id does not
  /// change sizes or plans, so it is not part of the key.
  [[nodiscard]] const SimResult& service(const std::string& fid, StartPath path, bool pooled, Bytes prefetch,
                                         Policy policy, const Workload& w) const {
    const auto key = std::make_tuple(fid, static_cast<int>(path), pooled, prefetch, policy == Policy::baseline,
                                     w.input_len, w.batch);
    auto it = memo_.find(key);
    if (it != memo_.end()) return it->second;

    const auto& f = function(fid);
    const double overhead = policy == Policy::baseline ? 0.0 : cfg_.tracing_overhead;
    SimResult res;
    if (path == StartPath::warm) {
      res.breakdown = simulate_warm(f.program, w, overhead);
    } else {
      const auto& [compiled, shared] = compiled_for(fid, path, pooled, prefetch, policy);
      SimOptions opt;
      opt.tracing_overhead = overhead;
      opt.record_timeline = false;
      res = run_invocation(compiled, w, opt);
      res.gpu_bytes = path == StartPath::static_core ? 0 : res.gpu_bytes - shared;
    }
    res.timeline.clear();
    return memo_.emplace(key, std::move(res)).first->second;
  }

 private:
  struct Prepared {
    FunctionTemplate tmpl;
    InferenceTraceRecord trace;
    StartupPlan plan;
    Bytes shared_bytes = 0;
  };
  using Compiled = std::pair<CompiledInvocation, Bytes>;

  const Compiled& compiled_for(const std::string& fid, StartPath path, bool pooled, Bytes prefetch,
                               Policy policy) const {
    const auto key = std::make_tuple(fid, static_cast<int>(path), pooled, prefetch, policy == Policy::baseline);
    auto it = compiled_.find(key);
    if (it != compiled_.end()) return it->second;
    const auto& f = function(fid);
    const auto& prep = prepared(fid, path, prefetch);
    ProcessState ps;
    if (path == StartPath::static_core) {
      ps.context_ready = true;
      ps.loaded_kernel_ids = f.tmpl.kernel_set;
    } else if (pooled) {
      ps = prewarm(policy).state;
    } else {
      ps.resident_bytes = cfg_.hw.context_footprint_bytes;
    }
    Compiled c{compile_invocation(prep.plan, f.program, prep.trace, prep.tmpl, cfg_.hw, ps), prep.shared_bytes};
    return compiled_.emplace(key, std::move(c)).first->second;
  }

  /// Template, trace and startup plan of a start path; independent of the
  /// request's token count.
  const Prepared& prepared(const std::string& fid, StartPath path, Bytes prefetch) const {
    const auto key = std::make_tuple(fid, static_cast<int>(path), prefetch);
    auto it = prepared_.find(key);
    if (it != prepared_.end()) return it->second;
    const auto& f = function(fid);
    Workload probe = cfg_.reference_workload;
    probe.adapter_id = f.dynamic ? std::optional<std::string>("request") : std::nullopt;
    Prepared p;
    p.tmpl = path == StartPath::fork && prefetch != f.tmpl.prefetch_target_bytes ? with_prefetch(f.tmpl, prefetch) : f.tmpl;
    p.trace = trace_inference(f.program, probe);
    if (path != StartPath::warm) {
      const auto observed = trace_init(f.program, probe);
      p.plan = path == StartPath::static_core ? static_core_plan(f.tmpl, observed, p.trace)
               : path == StartPath::cold      ? cold_plan(observed, p.trace)
                                              : plan_startup(p.tmpl, observed, p.trace);
      for (const auto& [wname, a] : p.plan.actions)
        if (std::holds_alternative<ReuseResident>(a)) p.shared_bytes += p.trace.weight_bytes.at(wname);
    }
    return prepared_.emplace(key, std::move(p)).first->second;
  }

  ClusterConfig cfg_;
  std::map<std::string, ClusterFunction> functions_;
  std::map<std::string, FunctionTemplate> templates_;
  std::set<std::string> policy_kernels_;
  std::vector<std::string> missing_templates_;
  PrewarmResult tidal_prewarm_;
  PrewarmResult baseline_prewarm_;
  mutable std::map<std::tuple<std::string, int, bool, Bytes, bool, std::int64_t, std::int64_t>, SimResult> memo_;
  mutable std::map<std::tuple<std::string, int, Bytes>, Prepared> prepared_;
  mutable std::map<std::tuple<std::string, int, bool, Bytes, bool>, Compiled> compiled_;
};

/// Initial per-GPU state for a policy: pool slots and pinned templates.
[[nodiscard]] inline std::vector<GpuState> initial_gpus(const Cluster& cluster, Policy policy) {
  const auto& cfg = cluster.config();
  std::vector<GpuState> gpus(static_cast<std::size_t>(cfg.hw.gpu_count));
  for (std::size_t g = 0; g < gpus.size(); ++g) {
    auto& s = gpus[g];
    s.gpu_id = static_cast<int>(g);
    s.capacity = cfg.hw.gpu_memory_bytes;
    s.pool_slot_bytes = cluster.prewarm(policy).memory_bytes;
    s.pool_ready.assign(cfg.pool.pool_size, 0.0);
  }
  if (policy == Policy::tidal_dk_budgeted) {
    for (std::size_t i = 0; i < cfg.budget_functions.size(); ++i) {
      gpus[cluster.budget_gpu(i)].add_template(cfg.budget_functions[i], cluster.budget_template_bytes(i),
                                                cfg.pool.template_budget_bytes, 0.0);
    }
  }
  for (auto& s : gpus) {
    if (s.accounted_bytes() > s.capacity) throw OutOfMemory(fmt::format("gpu {}: initial state exceeds memory", s.gpu_id));
    s.peak_bytes = s.accounted_bytes();
  }
  return gpus;
}

/// Placement decision for one request against the current GPU states.
/// Each GPU is a FIFO server, so start times are known at arrival.
[[nodiscard]] inline Decision dispatch(const InvocationRecord& req, const Cluster& cluster,
                                       const std::vector<GpuState>& gpus, Policy policy) {
  const auto& f = cluster.function(req.function_id);
  const bool keep_dynamic = policy == Policy::tidal_dk || policy == Policy::tidal_dk_budgeted;
  Decision best;
  double best_done = std::numeric_limits<double>::infinity();
  for (const auto& g : gpus) {
    Decision d;
    d.gpu = g.gpu_id;
    d.start_s = std::max(req.arrival_s, g.free_at_s);
    auto live = g.live.find(req.function_id);
    const bool alive = live != g.live.end() && live->second.deadline_s >= d.start_s;
    if (alive && !f.dynamic) {
      d.path = StartPath::warm;
    } else if (alive && keep_dynamic) {
      d.path = StartPath::static_core;
    } else {
      d.path = policy == Policy::baseline ? StartPath::cold : StartPath::fork;
      d.pooled_process = g.ready_slot(d.start_s) >= 0;
      d.prefetch_bytes = policy == Policy::tidal_dk_budgeted ? g.template_bytes(req.function_id) : 0;
    }
    const auto& res = cluster.service(req.function_id, d.path, d.pooled_process, d.prefetch_bytes, policy, req.workload);
    d.service = res.breakdown;
    d.new_bytes = res.gpu_bytes;
    d.predicted_wait_s = d.start_s - req.arrival_s;
    const double done = d.start_s + d.service.ttft_s;
    if (done < best_done) {
      best_done = done;
      best = d;
    }
  }
  best.kind = best.predicted_wait_s > cluster.config().pool.request_timeout_s ? Decision::Kind::reject
              : best.predicted_wait_s > 0                                    ? Decision::Kind::queue
                                                                             : Decision::Kind::run;
  return best;
}

/// Applies an accepted decision to its GPU at the decision's start time.
inline void apply_decision(const Decision& d, const InvocationRecord& req, const Cluster& cluster, GpuState& g,
                           Policy policy) {
  const auto& f = cluster.function(req.function_id);
  const double s = d.start_s, end = s + d.service.ttft_s;
  g.expire(s);
  if (d.pooled_process) {
    const int slot = g.ready_slot(s);
    g.pool_ready[static_cast<std::size_t>(slot)] = s + cluster.prewarm(policy).time_s;
  }
  if (auto t = g.templates.find(req.function_id); t != g.templates.end()) t->second.last_used_s = s;

  const bool keep = !f.dynamic || policy == Policy::tidal_dk || policy == Policy::tidal_dk_budgeted;
  if (d.path == StartPath::warm || d.path == StartPath::static_core) {
    auto& inst = g.live.at(req.function_id);
    inst.last_end_s = end;
    inst.deadline_s = end + f.keep_alive_s;
  } else {
    g.live.erase(req.function_id);
    g.make_room(d.new_bytes, req.function_id);
    if (keep) {
      g.live[req.function_id] = {end + f.keep_alive_s, end,
                                 d.new_bytes,
                                 f.dynamic ? Residency::static_core : Residency::full_warm};
    }
  }
  const Bytes in_use = g.accounted_bytes() + (keep ? 0 : d.new_bytes);
  if (in_use > g.capacity) throw OutOfMemory(fmt::format("gpu {}: accounting exceeds capacity at {:.6f}s", g.gpu_id, s));
  g.peak_bytes = std::max(g.peak_bytes, in_use);
  g.free_at_s = end;
}

struct ClusterRun {
  Policy policy = Policy::baseline;
  std::vector<RequestResult> results;
  std::vector<GpuState> gpus;
  std::size_t rejected = 0;

  [[nodiscard]] std::vector<double> served_ttfts() const {
    std::vector<double> v;
    for (const auto& r : results)
      if (!r.rejected) v.push_back(r.ttft_s);
    return v;
  }
};

/// Replays `records` (sorted by arrival, ties by request id) under `policy`.
[[nodiscard]] inline ClusterRun run_cluster(const std::vector<InvocationRecord>& records, const Cluster& cluster,
                                            Policy policy) {
  ClusterRun run;
  run.policy = policy;
  run.gpus = initial_gpus(cluster, policy);
  for (const auto& req : records) {
    const auto d = dispatch(req, cluster, run.gpus, policy);
    RequestResult r;
    r.request_id = req.request_id;
    r.function_id = req.function_id;
    r.arrival_s = req.arrival_s;
    r.decision = d.label();
    if (d.kind == Decision::Kind::reject) {
      r.rejected = true;
      ++run.rejected;
    } else {
      apply_decision(d, req, cluster, run.gpus[static_cast<std::size_t>(d.gpu)], policy);
      r.gpu = d.gpu;
      r.start_s = d.start_s;
      r.queue_s = d.start_s - req.arrival_s;
      r.breakdown = d.service;
      r.ttft_s = r.queue_s + d.service.ttft_s;
    }
    run.results.push_back(std::move(r));
  }
  return run;
}

inline void write_results(std::ostream& os, const std::vector<RequestResult>& results) {
  os << "request_id,function_id,arrival_s,decision,ttft_s,context_s,code_load_s,dynamic_init_s,exposed_load_s,"
        "compute_s,queue_s,gpu\n";
  for (const auto& r : results) {
    if (r.rejected) {
      os << fmt::format("{},{},{:.6f},{},,,,,,,,\n", r.request_id, r.function_id, r.arrival_s, r.decision);
      continue;
    }
    const auto& b = r.breakdown;
    os << fmt::format("{},{},{:.6f},{},{:.6f},{:.6f},{:.6f},{:.6f},{:.6f},{:.6f},{:.6f},{}\n", r.request_id,
                      r.function_id, r.arrival_s, r.decision, r.ttft_s, b.context_s, b.code_load_s, b.dynamic_init_s,
                      b.exposed_load_s, b.compute_s, r.queue_s, r.gpu);
  }
}

/// Budgeted-policy selection when the configuration names none: most
/// requested functions first, then larger bandwidth-sized resident bytes.
[[nodiscard]] inline std::vector<std::string> select_budget_functions(const std::vector<InvocationRecord>& records,
                                                                      const Cluster& cluster, std::size_t n) {
  std::map<std::string, std::size_t> count;
  for (const auto& r : records) ++count[r.function_id];
  std::vector<std::string> ids;
  for (const auto& [id, _] : cluster.functions()) ids.push_back(id);
  std::stable_sort(ids.begin(), ids.end(), [&](const std::string& a, const std::string& b) {
    if (count[a] != count[b]) return count[a] > count[b];
    return cluster.function(a).sized_bytes > cluster.function(b).sized_bytes;
  });
  ids.resize(std::min(n, ids.size()));
  return ids;
}

}  // namespace coldfork
