#pragma once

// Weight-centric two-phase tracing over a FunctionProgram.
//
// Initialization is traced strictly: each GPU weight gets a canonical
// provenance chain (its data-flow graph). Inference is traced laxly: only
// the order in which weights are first read and the kernels that read them.

#include <algorithm>
#include <cstdio>
#include <map>
#include <ostream>
#include <set>
#include <string>
#include <vector>

#include "coldfork/model.hpp"

namespace coldfork {

struct ProvenanceStep {
  std::string op_kind;  // "load" for checkpoint loads
  std::optional<std::string> checkpoint_id;
  Bytes size_bytes = 0;
  std::size_t arity = 0;
  bool operator==(const ProvenanceStep&) const = default;
};

struct WeightDFG {
  std::string weight_name;
  /// Post-order flattening of the producing graph; the last step produces
  /// the weight itself.
  std::vector<ProvenanceStep> provenance;
  Bytes size_bytes = 0;
  std::string alias_group;
  /// True when some load in the chain was redirected to a request adapter.
  bool adapter_sourced = false;

  /// Structural equality of the canonical chains; names do not participate.
  [[nodiscard]] bool same_provenance(const WeightDFG& other) const { return provenance == other.provenance; }
};

using WeightDFGMap = std::map<std::string, WeightDFG>;

/// 64-bit FNV-1a over the canonical chain encoding.
[[nodiscard]] inline std::uint64_t provenance_hash(const std::vector<ProvenanceStep>& chain) {
  std::uint64_t h = 1469598103934665603ULL;
  auto mix = [&](std::string_view s) {
    for (unsigned char c : s) {
      h ^= c;
      h *= 1099511628211ULL;
    }
    h ^= 0xff;
    h *= 1099511628211ULL;
  };
  for (const auto& step : chain) {
    mix(step.op_kind);
    mix(step.checkpoint_id ? *step.checkpoint_id : std::string_view{"\x01"});
    mix(std::to_string(step.size_bytes));
    mix(std::to_string(step.arity));
  }
  return h;
}

/// Strict tracing of initialization. Every name bound to a GPU tensor
/// (including aliases) gets a DFG; aliases share alias_group and chain.
[[nodiscard]] inline WeightDFGMap trace_init(const FunctionProgram& program, const Workload& workload) {
  require_valid_init(program);

  struct Node {
    std::vector<ProvenanceStep> chain;
    Bytes size = 0;
    bool adapter = false;
  };
  std::unordered_map<std::string, Node> nodes;  // keyed by alias root
  std::unordered_map<std::string, std::string> root;
  std::vector<std::string> gpu_roots;
  std::unordered_set<std::string> gpu_set;
  std::unordered_map<std::string, std::vector<std::string>> names_of;

  for (const auto& op : program.init_ops) {
    std::visit(detail::overloaded{
                   [&](const LoadCheckpoint& o) {
                     Node n;
                     std::string ckpt = o.checkpoint_id;
                     if (ckpt == kAdapterPlaceholder && workload.adapter_id) {
                       ckpt = *workload.adapter_id;
                       n.adapter = true;
                     }
                     n.chain.push_back(ProvenanceStep{"load", ckpt, o.size_bytes, 0});
                     n.size = o.size_bytes;
                     nodes[o.tensor_name] = std::move(n);
                     root[o.tensor_name] = o.tensor_name;
                     names_of[o.tensor_name].push_back(o.tensor_name);
                   },
                   [&](const Transform& o) {
                     Node n;
                     for (const auto& in : o.input_names) {
                       const auto& src = nodes.at(root.at(in));
                       n.chain.insert(n.chain.end(), src.chain.begin(), src.chain.end());
                       n.adapter = n.adapter || src.adapter;
                     }
                     n.chain.push_back(ProvenanceStep{o.op_kind, std::nullopt, o.output_size_bytes, o.input_names.size()});
                     n.size = o.output_size_bytes;
                     nodes[o.output_name] = std::move(n);
                     root[o.output_name] = o.output_name;
                     names_of[o.output_name].push_back(o.output_name);
                   },
                   [&](const ToGpu& o) {
                     const auto& r = root.at(o.tensor_name);
                     if (gpu_set.insert(r).second) gpu_roots.push_back(r);
                   },
                   [&](const AliasShare& o) {
                     auto r = root.at(o.source_name);
                     root[o.alias_name] = r;
                     names_of[r].push_back(o.alias_name);
                   },
               },
               op);
  }

  WeightDFGMap out;
  for (const auto& r : gpu_roots) {
    const auto& node = nodes.at(r);
    for (const auto& name : names_of.at(r)) {
      out.emplace(name, WeightDFG{name, node.chain, node.size, r, node.adapter});
    }
  }
  return out;
}

struct KernelRecord {
  std::string kernel_id;
  std::vector<std::string> reads;
  std::vector<std::string> writes;
  /// Canonical (alias-resolved) weights among reads/writes, deduplicated.
  std::vector<std::string> weight_reads;
  std::vector<std::string> weight_writes;
};

struct InferenceTraceRecord {
  /// Canonical weights in order of first kernel read.
  std::vector<std::string> access_order;
  /// Canonical weights no kernel reads, in initialization order. They trail
  /// access_order whenever a loading order is derived.
  std::vector<std::string> never_read;
  std::vector<KernelRecord> kernel_sequence;
  std::set<std::string> written_weights;
  /// Bytes per canonical weight (sizes are observable without provenance).
  std::map<std::string, Bytes> weight_bytes;

  /// access_order followed by never_read.
  [[nodiscard]] std::vector<std::string> loading_order() const {
    auto v = access_order;
    v.insert(v.end(), never_read.begin(), never_read.end());
    return v;
  }
};

/// Lax tracing of inference: access order, kernel identities, write sets.
[[nodiscard]] inline InferenceTraceRecord trace_inference(const FunctionProgram& program, const Workload&) {
  require_valid(program);
  const auto table = build_tensor_table(program);

  InferenceTraceRecord rec;
  std::unordered_set<std::string> seen;
  for (const auto& call : program.inference_ops) {
    KernelRecord kr{call.kernel_id, call.reads, call.writes, {}, {}};
    for (const auto& r : call.reads) {
      if (!table.is_weight(r)) continue;
      const auto& c = table.canonical(r);
      if (std::find(kr.weight_reads.begin(), kr.weight_reads.end(), c) == kr.weight_reads.end())
        kr.weight_reads.push_back(c);
      if (seen.insert(c).second) rec.access_order.push_back(c);
    }
    for (const auto& w : call.writes) {
      if (!table.is_weight(w)) continue;
      const auto& c = table.canonical(w);
      if (std::find(kr.weight_writes.begin(), kr.weight_writes.end(), c) == kr.weight_writes.end())
        kr.weight_writes.push_back(c);
      rec.written_weights.insert(c);
    }
    rec.kernel_sequence.push_back(std::move(kr));
  }
  for (const auto& r : table.gpu_roots) {
    rec.weight_bytes[r] = table.size.at(r);
    if (!seen.count(r)) rec.never_read.push_back(r);
  }
  return rec;
}

// ---------------------------------------------------------------------------
// Classification

enum class WeightFlag { static_weight, dynamic_weight };

using Classification = std::map<std::string, WeightFlag>;

[[nodiscard]] inline std::set<std::string> key_set(const WeightDFGMap& m) {
  std::set<std::string> s;
  for (const auto& [k, _] : m) s.insert(k);
  return s;
}

/// A weight is dynamic iff its provenance differs between the two traces.
[[nodiscard]] inline Classification classify_weights(const WeightDFGMap& reference, const WeightDFGMap& observed) {
  if (key_set(reference) != key_set(observed))
    throw StructuralMismatch("weight-name sets differ between traces");
  Classification out;
  for (const auto& [name, ref] : reference) {
    out[name] = ref.same_provenance(observed.at(name)) ? WeightFlag::static_weight : WeightFlag::dynamic_weight;
  }
  return out;
}

/// Monotone merge: dynamic in either input stays dynamic.
[[nodiscard]] inline Classification merge_classification(const Classification& a, const Classification& b) {
  Classification out = a;
  for (const auto& [name, flag] : b) {
    auto [it, inserted] = out.emplace(name, flag);
    if (!inserted && flag == WeightFlag::dynamic_weight) it->second = WeightFlag::dynamic_weight;
  }
  return out;
}

[[nodiscard]] inline Classification all_static(const WeightDFGMap& m) {
  Classification out;
  for (const auto& [name, _] : m) out[name] = WeightFlag::static_weight;
  return out;
}

/// Fraction of distinct weight bytes flagged dynamic.
[[nodiscard]] inline double dynamic_byte_fraction(const WeightDFGMap& dfgs, const Classification& cls) {
  std::map<std::string, std::pair<Bytes, bool>> groups;
  for (const auto& [name, dfg] : dfgs) {
    auto& g = groups[dfg.alias_group];
    g.first = dfg.size_bytes;
    g.second = g.second || cls.at(name) == WeightFlag::dynamic_weight;
  }
  Bytes total = 0, dyn = 0;
  for (const auto& [_, g] : groups) {
    total += g.first;
    if (g.second) dyn += g.first;
  }
  return total == 0 ? 0.0 : static_cast<double>(dyn) / static_cast<double>(total);
}

// ---------------------------------------------------------------------------
// Trace dump

inline void write_trace_dump(std::ostream& os, const WeightDFGMap& dfgs, const InferenceTraceRecord& trace) {
  char hash[17];
  for (const auto& [name, dfg] : dfgs) {
    std::snprintf(hash, sizeof hash, "%016llx", static_cast<unsigned long long>(provenance_hash(dfg.provenance)));
    os << "INIT " << name << ' ' << hash << ' ' << dfg.size_bytes << '\n';
  }
  std::size_t ordinal = 0;
  for (const auto& w : trace.access_order) {
    const KernelRecord* first = nullptr;
    for (const auto& k : trace.kernel_sequence) {
      if (std::find(k.weight_reads.begin(), k.weight_reads.end(), w) != k.weight_reads.end()) {
        first = &k;
        break;
      }
    }
    os << "ACCESS " << ordinal++ << ' ' << w << ' ' << (first ? first->kernel_id : "-") << '\n';
  }
}

}  // namespace coldfork
