#pragma once

#include <algorithm>
#include <random>
#include <string>
#include <vector>

#include <fmt/format.h>

#include "coldfork/engine.hpp"
#include "coldfork/fork.hpp"
#include "coldfork/model.hpp"
#include "coldfork/template.hpp"
#include "coldfork/tracer.hpp"

namespace cft {

using namespace coldfork;

/// Weights w1..wn loaded from checkpoint "base"; kernel k reads reads[k]
/// (activation "x" when empty) and lasts durations[k] seconds. Every kernel
/// writes "x", so only kernel 0 needs a nonempty read list.
inline FunctionProgram chain_program(const std::vector<Bytes>& sizes, const std::vector<std::vector<std::string>>& reads,
                                     const std::vector<double>& durations) {
  FunctionProgram p;
  p.function_id = "chain";
  p.declared_static = true;
  for (std::size_t i = 0; i < sizes.size(); ++i) {
    const auto w = fmt::format("w{}", i + 1);
    p.init_ops.emplace_back(LoadCheckpoint{"base", w, sizes[i]});
    p.init_ops.emplace_back(ToGpu{w});
  }
  for (std::size_t k = 0; k < reads.size(); ++k) {
    KernelCall c;
    c.kernel_id = fmt::format("k{}", k);
    c.reads = reads[k].empty() ? std::vector<std::string>{"x"} : reads[k];
    c.writes = {"x"};
    c.duration_base_s = durations.at(k);
    p.inference_ops.push_back(std::move(c));
  }
  return p;
}

/// Zero-overhead profile: no context cost, no copy overhead, no code loads.
inline HardwareProfile plain_hw(double pcie_bytes_per_s) {
  HardwareProfile hw;
  hw.pcie_bandwidth_bytes_per_s = pcie_bytes_per_s;
  hw.context_create_s = 0;
  hw.context_footprint_bytes = 0;
  hw.per_copy_overhead_s = 0;
  hw.code_load_s_per_kernel = 0;
  hw.gpu_memory_bytes = 1000 * kGB;
  return hw;
}

inline ProcessState warm_process(const FunctionTemplate& tpl) {
  ProcessState ps;
  ps.context_ready = true;
  ps.loaded_kernel_ids = tpl.kernel_set;
  return ps;
}

inline FunctionTemplate single_trace_template(const FunctionProgram& p, const Workload& w, const HardwareProfile& hw,
                                              PrefetchSpec prefetch, std::size_t max_transfers = 300) {
  std::vector<TracePair> traces{{trace_init(p, w), trace_inference(p, w)}};
  return generate_template(p.function_id, p.declared_static, traces, hw, warm_compute_s(p, w),
                           {max_transfers, prefetch});
}

/// Fork of `p` from its own template under `tpl`'s settings.
inline SimResult fork_run(const FunctionProgram& p, const Workload& w, const FunctionTemplate& tpl,
                          const HardwareProfile& hw, const SimOptions& opt = {}, StartupPlan* plan_out = nullptr) {
  const auto trace = trace_inference(p, w);
  auto plan = plan_startup(tpl, trace_init(p, w), trace);
  auto res = simulate_invocation(plan, p, trace, w, tpl, hw, warm_process(tpl), opt);
  if (plan_out) *plan_out = std::move(plan);
  return res;
}

/// Random program whose kernels read the weights in one forward pass:
/// kernel k reads a contiguous, possibly empty, block of weights.
inline FunctionProgram random_forward_pass(std::mt19937_64& rng, std::size_t max_weights, std::size_t max_kernels) {
  std::uniform_int_distribution<std::size_t> nw(1, max_weights), nk(1, max_kernels);
  const std::size_t n = nw(rng), m = nk(rng);
  std::uniform_int_distribution<Bytes> size(1 * kMB, 4 * kGB);
  std::uniform_int_distribution<std::size_t> owner(0, m - 1);
  std::uniform_real_distribution<double> dur(0.0, 1.5);
  std::vector<Bytes> sizes(n);
  for (auto& s : sizes) s = size(rng);
  std::vector<std::size_t> owners(n);
  for (auto& o : owners) o = owner(rng);
  std::sort(owners.begin(), owners.end());
  owners.front() = 0;  // kernel 0 reads a weight, so "x" exists afterwards
  std::vector<std::vector<std::string>> reads(m);
  for (std::size_t i = 0; i < n; ++i) reads[owners[i]].push_back(fmt::format("w{}", i + 1));
  std::vector<double> durations(m);
  for (auto& d : durations) d = dur(rng);
  return chain_program(sizes, reads, durations);
}

}  // namespace cft
