#pragma once

// Adaptive state forking: per-weight startup actions, kernel->transfer
// synchronization barriers and copy-on-write bookkeeping.

#include <atomic>
#include <map>
#include <memory>
#include <ostream>
#include <set>
#include <string>
#include <tuple>
#include <variant>
#include <vector>

#include "coldfork/model.hpp"
#include "coldfork/template.hpp"
#include "coldfork/tracer.hpp"

namespace coldfork {

struct ReuseResident {
  bool operator==(const ReuseResident&) const = default;
};
struct AsyncLoad {
  std::size_t group_index = 0;
  std::size_t order_index = 0;
  bool operator==(const AsyncLoad&) const = default;
};
struct ReplayInit {
  enum class Source { storage, host };
  Source source = Source::host;
  bool operator==(const ReplayInit&) const = default;
};

using StartupAction = std::variant<ReuseResident, AsyncLoad, ReplayInit>;

struct StartupPlan {
  /// Keyed by canonical (alias-resolved) weight.
  std::map<std::string, StartupAction> actions;
  /// Kernel ordinal -> transfer groups to wait for before it starts. Each
  /// group is waited by its first consumer only; the compute queue is in
  /// order, so later consumers are covered transitively.
  std::map<std::size_t, std::set<std::size_t>> sync_barriers;
  std::set<std::string> cow_copies;
  std::size_t skipped_init_ops = 0;
  /// Replayed weights in initialization order.
  std::vector<std::string> replay_order;
  /// Template weights whose provenance stopped matching in this invocation.
  std::set<std::string> newly_dynamic;
  /// Set when the weight-name set no longer matches the template.
  bool invalidated = false;

  [[nodiscard]] std::size_t count_kind(std::size_t variant_index) const {
    std::size_t n = 0;
    for (const auto& [_, a] : actions) n += a.index() == variant_index;
    return n;
  }
};

[[nodiscard]] inline const char* action_name(const StartupAction& a) {
  switch (a.index()) {
    case 0: return "reuse";
    case 1: return "async-load";
    default: return std::get<ReplayInit>(a).source == ReplayInit::Source::storage ? "replay-storage" : "replay-host";
  }
}

namespace detail {

struct CanonicalGroup {
  std::vector<std::string> names;
  const WeightDFG* any = nullptr;
};

inline std::map<std::string, CanonicalGroup> canonical_groups(const WeightDFGMap& dfgs) {
  std::map<std::string, CanonicalGroup> out;
  for (const auto& [name, dfg] : dfgs) {
    auto& g = out[dfg.alias_group];
    g.names.push_back(name);
    g.any = &dfg;
  }
  return out;
}

inline ReplayInit replay_for(const WeightDFG& dfg) {
  return ReplayInit{dfg.adapter_sourced ? ReplayInit::Source::storage : ReplayInit::Source::host};
}

/// Keeps replay_order aligned with the trace's loading order.
inline void order_replays(StartupPlan& plan, const InferenceTraceRecord& trace) {
  plan.replay_order.clear();
  for (const auto& w : trace.loading_order()) {
    auto it = plan.actions.find(w);
    if (it != plan.actions.end() && std::holds_alternative<ReplayInit>(it->second)) plan.replay_order.push_back(w);
  }
}

}  // namespace detail

/// Full cold start: every weight is re-initialized before inference.
[[nodiscard]] inline StartupPlan cold_plan(const WeightDFGMap& observed, const InferenceTraceRecord& trace) {
  StartupPlan plan;
  for (const auto& [canon, g] : detail::canonical_groups(observed)) plan.actions[canon] = detail::replay_for(*g.any);
  detail::order_replays(plan, trace);
  return plan;
}

/// Minimal barriers: the first kernel touching an async-loaded weight of a
/// transfer group waits for that group.
[[nodiscard]] inline std::map<std::size_t, std::set<std::size_t>> compute_barriers(
    const std::map<std::string, StartupAction>& actions, const InferenceTraceRecord& trace) {
  std::map<std::size_t, std::set<std::size_t>> out;
  std::set<std::size_t> waited;
  for (std::size_t k = 0; k < trace.kernel_sequence.size(); ++k) {
    const auto& kr = trace.kernel_sequence[k];
    auto touch = [&](const std::string& w) {
      auto it = actions.find(w);
      if (it == actions.end()) return;
      if (const auto* a = std::get_if<AsyncLoad>(&it->second)) {
        if (waited.insert(a->group_index).second) out[k].insert(a->group_index);
      }
    };
    for (const auto& w : kr.weight_reads) touch(w);
    for (const auto& w : kr.weight_writes) touch(w);
  }
  return out;
}

[[nodiscard]] inline StartupPlan apply_cow(StartupPlan plan, const InferenceTraceRecord& trace) {
  plan.cow_copies.clear();
  for (const auto& w : trace.written_weights) {
    auto it = plan.actions.find(w);
    if (it != plan.actions.end() && !std::holds_alternative<ReplayInit>(it->second)) plan.cow_copies.insert(w);
  }
  return plan;
}

[[nodiscard]] inline StartupPlan plan_startup(const FunctionTemplate& tpl, const WeightDFGMap& observed,
                                              const InferenceTraceRecord& trace) {
  if (key_set(observed) != key_set(tpl.weight_dfgs)) {
    auto plan = cold_plan(observed, trace);
    plan.invalidated = true;
    return plan;
  }

  std::map<std::string, std::size_t> layout_pos;
  for (std::size_t i = 0; i < tpl.layout.size(); ++i) layout_pos[tpl.layout[i].weight] = i;
  std::map<std::string, std::size_t> group_of;
  for (std::size_t g = 0; g < tpl.transfer_groups.size(); ++g)
    for (const auto& w : tpl.transfer_groups[g]) group_of[w] = g;
  const auto dynamic = tpl.dynamic_groups();

  StartupPlan plan;
  for (const auto& [canon, g] : detail::canonical_groups(observed)) {
    bool match = !dynamic.count(canon);
    for (const auto& n : g.names) match = match && observed.at(n).same_provenance(tpl.weight_dfgs.at(n));
    auto pos = layout_pos.find(canon);
    if (!match || pos == layout_pos.end()) {
      if (!dynamic.count(canon)) plan.newly_dynamic.insert(canon);
      plan.actions[canon] = detail::replay_for(*g.any);
      continue;
    }
    if (pos->second < tpl.resident_count) {
      plan.actions[canon] = ReuseResident{};
      plan.skipped_init_ops += g.any->provenance.size() + 1;  // chain + transfer to GPU
    } else {
      plan.actions[canon] = AsyncLoad{group_of.at(canon), 0};
      plan.skipped_init_ops += g.any->provenance.size();
    }
  }
  std::size_t order = 0;
  for (std::size_t i = tpl.resident_count; i < tpl.layout.size(); ++i) {
    auto& a = plan.actions.at(tpl.layout[i].weight);
    if (auto* al = std::get_if<AsyncLoad>(&a)) al->order_index = order++;
  }
  plan.sync_barriers = compute_barriers(plan.actions, trace);
  detail::order_replays(plan, trace);
  return apply_cow(std::move(plan), trace);
}

/// Keep-alive of a dynamic function: static core already resident in the
/// live instance, only dynamic weights are re-initialized.
[[nodiscard]] inline StartupPlan static_core_plan(const FunctionTemplate& tpl, const WeightDFGMap& observed,
                                                  const InferenceTraceRecord& trace) {
  auto plan = plan_startup(with_prefetch(tpl, tpl.model_bytes), observed, trace);
  plan.cow_copies.clear();  // the live instance owns its weights
  return plan;
}

inline void write_plan_dump(std::ostream& os, const StartupPlan& plan) {
  for (const auto& [w, a] : plan.actions) {
    os << "ACTION " << w << ' ' << action_name(a) << ' ';
    if (const auto* al = std::get_if<AsyncLoad>(&a))
      os << al->order_index;
    else
      os << '-';
    os << '\n';
  }
  for (const auto& [k, groups] : plan.sync_barriers) {
    os << "BARRIER " << k << ' ';
    bool first = true;
    for (auto g : groups) {
      os << (first ? "" : ",") << g;
      first = false;
    }
    os << '\n';
  }
}

// ---------------------------------------------------------------------------
// Copy-on-write state

/// One GPU weight buffer. `generation` counts writes; a template buffer
/// whose generation moves has been mutated by a tenant.
struct WeightBuffer {
  std::string weight;
  Bytes bytes = 0;
  std::atomic<std::uint64_t> generation{0};

  WeightBuffer(std::string w, Bytes b) : weight(std::move(w)), bytes(b) {}
};

/// GPU image of a template: the buffers forked invocations point into.
class TemplateImage {
 public:
  explicit TemplateImage(const FunctionTemplate& tpl) {
    for (const auto& e : tpl.layout) buffers_.emplace(e.weight, std::make_shared<WeightBuffer>(e.weight, e.size_bytes));
  }

  [[nodiscard]] std::shared_ptr<WeightBuffer> buffer(const std::string& w) const {
    auto it = buffers_.find(w);
    return it == buffers_.end() ? nullptr : it->second;
  }

  [[nodiscard]] std::multiset<std::tuple<std::string, Bytes, std::uint64_t>> snapshot() const {
    std::multiset<std::tuple<std::string, Bytes, std::uint64_t>> s;
    for (const auto& [w, b] : buffers_) s.emplace(w, b->bytes, b->generation.load());
    return s;
  }

 private:
  std::map<std::string, std::shared_ptr<WeightBuffer>> buffers_;
};

/// Weight bindings of one forked invocation.
class ForkedState {
 public:
  ForkedState(const TemplateImage& image, const StartupPlan& plan, const InferenceTraceRecord& trace)
      : plan_(plan) {
    for (const auto& [w, a] : plan.actions) {
      auto shared = image.buffer(w);
      if (!std::holds_alternative<ReplayInit>(a) && shared) {
        bindings_[w] = {shared, true};
      } else {
        bindings_[w] = {std::make_shared<WeightBuffer>(w, trace.weight_bytes.count(w) ? trace.weight_bytes.at(w) : 0),
                        false};
      }
    }
  }

  /// Applies a kernel's weight writes, duplicating shared buffers listed in
  /// the plan's copy-on-write set first.
  void execute(const KernelRecord& kernel) {
    for (const auto& w : kernel.weight_writes) {
      auto& b = bindings_.at(w);
      if (b.shared && plan_.cow_copies.count(w)) {
        b.buffer = std::make_shared<WeightBuffer>(w, b.buffer->bytes);
        b.shared = false;
        copied_bytes_ += b.buffer->bytes;
      }
      b.buffer->generation.fetch_add(1);
    }
  }

  void run(const InferenceTraceRecord& trace) {
    for (const auto& k : trace.kernel_sequence) execute(k);
  }

  [[nodiscard]] Bytes copied_bytes() const { return copied_bytes_; }

 private:
  struct Binding {
    std::shared_ptr<WeightBuffer> buffer;
    bool shared = false;
  };
  StartupPlan plan_;
  std::map<std::string, Binding> bindings_;
  Bytes copied_bytes_ = 0;
};

}  // namespace coldfork
