#pragma once

// Adaptive function templates: deduplicated kernel set, access-ordered
// weight layout, resident prefix sizing and merged transfer groups.

#include <cmath>
#include <map>
#include <set>
#include <stdexcept>
#include <string>
#include <vector>

#include "coldfork/model.hpp"
#include "coldfork/tracer.hpp"

namespace coldfork {

struct LayoutEntry {
  std::string weight;
  Bytes size_bytes = 0;
  bool operator==(const LayoutEntry&) const = default;
};

using Layout = std::vector<LayoutEntry>;
using TransferGroups = std::vector<std::vector<std::string>>;

/// How much of the layout stays resident on the GPU.
struct PrefetchSpec {
  enum class Kind { sized, bytes, full };
  Kind kind = Kind::sized;
  Bytes bytes = 0;

  static PrefetchSpec sized() { return {Kind::sized, 0}; }
  static PrefetchSpec fixed(Bytes b) { return {Kind::bytes, b}; }
  static PrefetchSpec full() { return {Kind::full, 0}; }
  bool operator==(const PrefetchSpec&) const = default;
};

struct TemplateOptions {
  std::size_t max_transfers = 300;
  PrefetchSpec prefetch = PrefetchSpec::sized();
};

struct FunctionTemplate {
  std::string function_id;
  std::uint64_t version = 1;
  std::optional<bool> declared_static;
  std::set<std::string> kernel_set;
  /// Traced loading order over canonical weights (dynamics included).
  std::vector<std::string> loading_order;
  Layout layout;
  Bytes model_bytes = 0;
  /// Requested resident size before snapping to whole weights.
  Bytes prefetch_target_bytes = 0;
  Bytes prefetch_bytes = 0;
  std::size_t resident_count = 0;
  TransferGroups transfer_groups;
  std::size_t max_transfers = 300;
  WeightDFGMap weight_dfgs;
  Classification flags;
  double warm_ttft_s = 0.0;

  [[nodiscard]] bool is_dynamic(const std::string& canonical) const {
    for (const auto& [name, dfg] : weight_dfgs)
      if (dfg.alias_group == canonical && flags.at(name) == WeightFlag::dynamic_weight) return true;
    return false;
  }

  [[nodiscard]] std::set<std::string> dynamic_groups() const {
    std::set<std::string> out;
    for (const auto& [name, dfg] : weight_dfgs)
      if (flags.at(name) == WeightFlag::dynamic_weight) out.insert(dfg.alias_group);
    return out;
  }

  /// Multiset of (canonical weight, bytes) the template holds.
  [[nodiscard]] std::multiset<std::pair<std::string, Bytes>> byte_multiset() const {
    std::multiset<std::pair<std::string, Bytes>> s;
    for (const auto& e : layout) s.emplace(e.weight, e.size_bytes);
    return s;
  }
};

// ---------------------------------------------------------------------------

[[nodiscard]] inline std::set<std::string> dedup_kernels(const InferenceTraceRecord& trace) {
  std::set<std::string> out;
  for (const auto& k : trace.kernel_sequence) out.insert(k.kernel_id);
  return out;
}

/// Static weights in traced loading order, one entry per alias group.
[[nodiscard]] inline Layout build_layout(const std::vector<std::string>& loading_order, const WeightDFGMap& dfgs,
                                         const Classification& cls) {
  if (key_set(dfgs) != [&] {
        std::set<std::string> s;
        for (const auto& [k, _] : cls) s.insert(k);
        return s;
      }())
    throw StructuralMismatch("classification does not cover the traced weights");

  std::map<std::string, std::pair<Bytes, bool>> groups;  // canonical -> (bytes, dynamic)
  for (const auto& [name, dfg] : dfgs) {
    auto& g = groups[dfg.alias_group];
    g.first = dfg.size_bytes;
    g.second = g.second || cls.at(name) == WeightFlag::dynamic_weight;
  }
  if (groups.size() != loading_order.size()) throw StructuralMismatch("trace and weight graphs disagree on weights");

  Layout layout;
  for (const auto& w : loading_order) {
    auto it = groups.find(w);
    if (it == groups.end()) throw StructuralMismatch("traced weight '" + w + "' has no data-flow graph");
    if (!it->second.second) layout.push_back({w, it->second.first});
  }
  return layout;
}

[[nodiscard]] inline Layout build_layout(const InferenceTraceRecord& trace, const WeightDFGMap& dfgs,
                                         const Classification& cls) {
  return build_layout(trace.loading_order(), dfgs, cls);
}

/// max(M_model - T_TTFT * B_PCIe, 0), rounded up to whole bytes.
[[nodiscard]] inline Bytes compute_prefetch_bytes(Bytes model_bytes, double warm_ttft_s, double pcie_bandwidth) {
  if (!(warm_ttft_s >= 0) || !(pcie_bandwidth > 0))
    throw std::invalid_argument("compute_prefetch_bytes: need warm_ttft_s >= 0 and bandwidth > 0");
  const double v = std::max(static_cast<double>(model_bytes) - warm_ttft_s * pcie_bandwidth, 0.0);
  return static_cast<Bytes>(std::ceil(v));
}

/// Smallest layout prefix whose bytes reach `target` (whole weights only).
[[nodiscard]] inline std::pair<std::size_t, Bytes> snap_prefix(const Layout& layout, Bytes target) {
  std::size_t n = 0;
  Bytes acc = 0;
  while (acc < target && n < layout.size()) acc += layout[n++].size_bytes;
  return {n, acc};
}

/// Contiguous balanced partition of the loaded suffix into at most
/// `max_transfers` copy units. Cut points sit at the prefix-sum quantiles.
[[nodiscard]] inline TransferGroups merge_transfer_groups(const Layout& suffix, std::size_t max_transfers) {
  if (max_transfers == 0) throw std::invalid_argument("max_transfers must be >= 1");
  TransferGroups out;
  const std::size_t n = suffix.size();
  if (n <= max_transfers) {
    for (const auto& e : suffix) out.push_back({e.weight});
    return out;
  }
  const std::size_t k = max_transfers;
  std::vector<unsigned __int128> prefix(n + 1, 0);
  for (std::size_t i = 0; i < n; ++i) prefix[i + 1] = prefix[i] + suffix[i].size_bytes;
  const unsigned __int128 total = prefix[n];

  auto dist = [&](std::size_t j, std::size_t i) {
    const unsigned __int128 a = prefix[j] * k, b = total * i;
    return a > b ? a - b : b - a;
  };

  std::vector<std::size_t> cuts{0};
  std::size_t j = 1;
  for (std::size_t i = 1; i < k; ++i) {
    const std::size_t lo = cuts.back() + 1, hi = n - (k - i);
    j = std::max(j, lo);
    j = std::min(j, hi);
    while (j < hi && dist(j + 1, i) < dist(j, i)) ++j;
    cuts.push_back(j);
  }
  cuts.push_back(n);
  for (std::size_t g = 0; g + 1 < cuts.size(); ++g) {
    std::vector<std::string> group;
    for (std::size_t i = cuts[g]; i < cuts[g + 1]; ++i) group.push_back(suffix[i].weight);
    out.push_back(std::move(group));
  }
  return out;
}

[[nodiscard]] inline Bytes prefetch_target(const PrefetchSpec& spec, Bytes model, double warm_ttft_s,
                                           double pcie_bandwidth) {
  switch (spec.kind) {
    case PrefetchSpec::Kind::sized: return compute_prefetch_bytes(model, warm_ttft_s, pcie_bandwidth);
    case PrefetchSpec::Kind::bytes: return spec.bytes;
    case PrefetchSpec::Kind::full: return model;
  }
  return 0;
}

namespace detail {

inline Bytes distinct_bytes(const WeightDFGMap& dfgs) {
  std::map<std::string, Bytes> g;
  for (const auto& [_, d] : dfgs) g[d.alias_group] = d.size_bytes;
  Bytes total = 0;
  for (const auto& [_, b] : g) total += b;
  return total;
}

/// Recomputes layout, resident prefix and groups from loading_order/flags.
inline void relayout(FunctionTemplate& t) {
  t.layout = build_layout(t.loading_order, t.weight_dfgs, t.flags);
  auto [count, bytes] = snap_prefix(t.layout, t.prefetch_target_bytes);
  t.resident_count = count;
  t.prefetch_bytes = bytes;
  Layout suffix(t.layout.begin() + static_cast<std::ptrdiff_t>(count), t.layout.end());
  t.transfer_groups = merge_transfer_groups(suffix, t.max_transfers);
}

}  // namespace detail

struct TracePair {
  WeightDFGMap init;
  InferenceTraceRecord inference;
};

[[nodiscard]] inline FunctionTemplate generate_template(const std::string& function_id,
                                                        std::optional<bool> declared_static,
                                                        const std::vector<TracePair>& traces,
                                                        const HardwareProfile& hw, double warm_ttft_s,
                                                        const TemplateOptions& options = {}) {
  if (traces.empty()) throw std::invalid_argument("generate_template needs at least one trace");
  const auto& ref = traces.front();
  Classification cls = all_static(ref.init);
  std::set<std::string> kernels;
  for (const auto& t : traces) {
    if (key_set(t.init) != key_set(ref.init)) throw StructuralMismatch("traces disagree on weight names");
    cls = merge_classification(cls, classify_weights(ref.init, t.init));
    auto k = dedup_kernels(t.inference);
    kernels.insert(k.begin(), k.end());
  }

  FunctionTemplate t;
  t.function_id = function_id;
  t.declared_static = declared_static;
  t.kernel_set = std::move(kernels);
  t.loading_order = ref.inference.loading_order();
  t.weight_dfgs = ref.init;
  t.flags = std::move(cls);
  t.warm_ttft_s = warm_ttft_s;
  t.max_transfers = options.max_transfers;
  t.model_bytes = detail::distinct_bytes(ref.init);
  t.prefetch_target_bytes = prefetch_target(options.prefetch, t.model_bytes, warm_ttft_s, hw.pcie_bandwidth_bytes_per_s);
  detail::relayout(t);
  return t;
}

/// Incremental exclusion: weights whose provenance no longer matches move
/// to dynamic. Never reverts a dynamic weight.
[[nodiscard]] inline FunctionTemplate update_template(const FunctionTemplate& tpl, const WeightDFGMap& observed) {
  auto merged = merge_classification(tpl.flags, classify_weights(tpl.weight_dfgs, observed));
  if (merged == tpl.flags) return tpl;
  FunctionTemplate next = tpl;
  next.flags = std::move(merged);
  next.version = tpl.version + 1;
  detail::relayout(next);
  return next;
}

/// Same template with a different weight loading order (ablation support).
[[nodiscard]] inline FunctionTemplate with_loading_order(const FunctionTemplate& tpl,
                                                         std::vector<std::string> order) {
  FunctionTemplate next = tpl;
  next.loading_order = std::move(order);
  detail::relayout(next);
  return next;
}

/// Same template with a different resident size request.
[[nodiscard]] inline FunctionTemplate with_prefetch(const FunctionTemplate& tpl, Bytes target) {
  FunctionTemplate next = tpl;
  next.prefetch_target_bytes = target;
  detail::relayout(next);
  return next;
}

[[nodiscard]] inline FunctionTemplate with_max_transfers(const FunctionTemplate& tpl, std::size_t max_transfers) {
  FunctionTemplate next = tpl;
  next.max_transfers = max_transfers;
  detail::relayout(next);
  return next;
}

}  // namespace coldfork
