#pragma once

// Pre-warmed process pool: proactive code-segment loading, the loading
// policy that picks which kernels to pre-load, and per-GPU accounting.

#include <algorithm>
#include <limits>
#include <map>
#include <set>
#include <string>
#include <vector>

#include <fmt/format.h>

#include "coldfork/engine.hpp"
#include "coldfork/model.hpp"
#include "coldfork/template.hpp"

namespace coldfork {

struct PrewarmResult {
  ProcessState state;
  double time_s = 0.0;
  Bytes memory_bytes = 0;
};

/// Creates a context and triggers the load of every kernel in `kernel_ids`.
[[nodiscard]] inline PrewarmResult prewarm_process(const std::set<std::string>& kernel_ids, const HardwareProfile& hw,
                                                   Bytes free_bytes = std::numeric_limits<Bytes>::max()) {
  PrewarmResult r;
  const auto n = kernel_ids.size();
  r.time_s = hw.context_create_s + static_cast<double>(n) * hw.prewarm_s_per_kernel;
  r.memory_bytes = hw.context_footprint_bytes + n * hw.code_segment_bytes_per_kernel;
  if (r.memory_bytes > free_bytes)
    throw OutOfMemory(fmt::format("pre-warm needs {} bytes, {} free", r.memory_bytes, free_bytes));
  r.state.context_ready = true;
  r.state.loaded_kernel_ids = kernel_ids;
  r.state.resident_bytes = r.memory_bytes;
  return r;
}

/// Eager module loading: the whole kernel library, regardless of use.
[[nodiscard]] inline PrewarmResult prewarm_eager(const HardwareProfile& hw,
                                                 Bytes free_bytes = std::numeric_limits<Bytes>::max()) {
  PrewarmResult r;
  r.time_s = hw.context_create_s + hw.eager_load_s;
  r.memory_bytes = hw.context_footprint_bytes + hw.eager_load_bytes;
  if (r.memory_bytes > free_bytes)
    throw OutOfMemory(fmt::format("eager pre-warm needs {} bytes, {} free", r.memory_bytes, free_bytes));
  r.state.context_ready = true;
  r.state.all_kernels_loaded = true;
  r.state.resident_bytes = r.memory_bytes;
  return r;
}

/// Union of the kernel sets of host-cached functions. Cached functions
/// without a template are appended to `missing` and contribute nothing.
[[nodiscard]] inline std::set<std::string> loading_policy(const std::set<std::string>& host_cache,
                                                          const std::map<std::string, FunctionTemplate>& templates,
                                                          std::vector<std::string>* missing = nullptr) {
  std::set<std::string> out;
  for (const auto& f : host_cache) {
    auto it = templates.find(f);
    if (it == templates.end()) {
      if (missing) missing->push_back(f);
      continue;
    }
    out.insert(it->second.kernel_set.begin(), it->second.kernel_set.end());
  }
  return out;
}

struct PoolConfig {
  std::size_t pool_size = 1;
  /// Keep-alive window; unset means each function's model loading time.
  std::optional<double> keep_alive_s;
  double request_timeout_s = 60.0;
  Bytes template_budget_bytes = 6 * kGB;

  void validate() const {
    if (keep_alive_s && !(*keep_alive_s > 0)) throw ConfigError("keep_alive_s must be > 0");
    if (!(request_timeout_s > 0)) throw ConfigError("request_timeout_s must be > 0");
  }
};

enum class Residency { full_warm, static_core };

struct LiveInstance {
  double deadline_s = 0.0;
  double last_end_s = 0.0;
  Bytes bytes = 0;
  Residency kind = Residency::full_warm;
};

struct TemplateSlot {
  Bytes bytes = 0;
  double last_used_s = 0.0;
};

struct GpuState {
  int gpu_id = 0;
  Bytes capacity = 0;
  std::map<std::string, TemplateSlot> templates;
  std::map<std::string, LiveInstance> live;
  /// Ready time of each pre-warmed process slot.
  std::vector<double> pool_ready;
  Bytes pool_slot_bytes = 0;
  /// The GPU serves invocations one at a time; next start no earlier than this.
  double free_at_s = 0.0;
  Bytes peak_bytes = 0;

  [[nodiscard]] Bytes accounted_bytes() const {
    Bytes b = pool_slot_bytes * pool_ready.size();
    for (const auto& [_, t] : templates) b += t.bytes;
    for (const auto& [_, l] : live) b += l.bytes;
    return b;
  }
  [[nodiscard]] Bytes free_bytes() const {
    const auto used = accounted_bytes();
    return used >= capacity ? 0 : capacity - used;
  }

  [[nodiscard]] Bytes template_bytes(const std::string& f) const {
    auto it = templates.find(f);
    return it == templates.end() ? 0 : it->second.bytes;
  }

  /// Index of a slot whose process is ready by `t`, or -1.
  [[nodiscard]] int ready_slot(double t) const {
    int best = -1;
    for (std::size_t i = 0; i < pool_ready.size(); ++i)
      if (pool_ready[i] <= t && (best < 0 || pool_ready[i] < pool_ready[static_cast<std::size_t>(best)]))
        best = static_cast<int>(i);
    return best;
  }

  void expire(double t) {
    std::erase_if(live, [&](const auto& kv) { return kv.second.deadline_s < t; });
  }

  /// Frees memory for `need` bytes: idle live instances first (least
  /// recently used), then templates. `keep` is never evicted.
  void make_room(Bytes need, const std::string& keep) {
    while (accounted_bytes() + need > capacity) {
      auto victim = live.end();
      for (auto it = live.begin(); it != live.end(); ++it)
        if (it->first != keep && (victim == live.end() || it->second.last_end_s < victim->second.last_end_s)) victim = it;
      if (victim != live.end()) {
        live.erase(victim);
        continue;
      }
      auto tv = templates.end();
      for (auto it = templates.begin(); it != templates.end(); ++it)
        if (it->first != keep && it->second.bytes > 0 &&
            (tv == templates.end() || it->second.last_used_s < tv->second.last_used_s))
          tv = it;
      if (tv == templates.end())
        throw OutOfMemory(fmt::format("gpu {}: {} bytes needed, {} free", gpu_id, need, free_bytes()));
      templates.erase(tv);
    }
  }

  /// Adds a template, evicting least recently used ones over `budget`.
  void add_template(const std::string& f, Bytes bytes, Bytes budget, double now) {
    templates[f] = {bytes, now};
    for (;;) {
      Bytes total = 0;
      for (const auto& [_, t] : templates) total += t.bytes;
      if (total <= budget) break;
      auto tv = templates.end();
      for (auto it = templates.begin(); it != templates.end(); ++it)
        if (it->first != f && (tv == templates.end() || it->second.last_used_s < tv->second.last_used_s)) tv = it;
      if (tv == templates.end()) throw ConfigError(fmt::format("template of '{}' exceeds the per-GPU budget", f));
      templates.erase(tv);
    }
  }
};

}  // namespace coldfork
