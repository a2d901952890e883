#pragma once

// JSON documents for function programs, hardware profiles and templates.
// Readers reject unknown keys and report the offending path.

#include <fstream>
#include <sstream>
#include <string>

#include <nlohmann/json.hpp>

#include "coldfork/model.hpp"
#include "coldfork/presets.hpp"
#include "coldfork/template.hpp"

namespace coldfork::io {

using json = nlohmann::json;

namespace detail {

inline void require_object(const json& j, const std::string& where) {
  if (!j.is_object()) throw ConfigError(where + ": expected an object");
}

inline void reject_unknown(const json& j, std::initializer_list<const char*> allowed, const std::string& where) {
  for (const auto& [k, _] : j.items()) {
    bool ok = false;
    for (const char* a : allowed) ok = ok || k == a;
    if (!ok) throw ConfigError(where + ": unknown key '" + k + "'");
  }
}

template <class T>
T get(const json& j, const char* key, const std::string& where) {
  if (!j.contains(key)) throw ConfigError(where + ": missing key '" + key + "'");
  try {
    return j.at(key).get<T>();
  } catch (const json::exception& e) {
    throw ConfigError(where + "." + key + ": " + e.what());
  }
}

template <class T>
T get_or(const json& j, const char* key, T fallback, const std::string& where) {
  return j.contains(key) ? get<T>(j, key, where) : fallback;
}

inline std::optional<bool> tri_state(const json& j, const char* key, const std::string& where) {
  if (!j.contains(key) || j.at(key).is_null()) return std::nullopt;
  return get<bool>(j, key, where);
}

inline json tri_state(const std::optional<bool>& v) { return v ? json(*v) : json(nullptr); }

}  // namespace detail

[[nodiscard]] inline json read_json_file(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open '" + path + "'");
  try {
    return json::parse(in);
  } catch (const json::parse_error& e) {
    throw ConfigError(path + ": " + e.what());
  }
}

inline void write_text_file(const std::string& path, const std::string& text) {
  const std::string tmp = path + ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary);
    if (!out) throw ConfigError("cannot write '" + path + "'");
    out << text;
  }
  if (std::rename(tmp.c_str(), path.c_str()) != 0) throw ConfigError("cannot write '" + path + "'");
}

// ---------------------------------------------------------------------------
// Programs

[[nodiscard]] inline json to_json(const FunctionProgram& p) {
  json ops = json::array();
  for (const auto& op : p.init_ops) {
    std::visit(coldfork::detail::overloaded{
                   [&](const LoadCheckpoint& o) {
                     ops.push_back({{"op", "LoadCheckpoint"},
                                    {"checkpoint_id", o.checkpoint_id},
                                    {"tensor_name", o.tensor_name},
                                    {"size_bytes", o.size_bytes}});
                   },
                   [&](const Transform& o) {
                     ops.push_back({{"op", "Transform"},
                                    {"op_kind", o.op_kind},
                                    {"input_names", o.input_names},
                                    {"output_name", o.output_name},
                                    {"output_size_bytes", o.output_size_bytes}});
                   },
                   [&](const ToGpu& o) { ops.push_back({{"op", "ToGpu"}, {"tensor_name", o.tensor_name}}); },
                   [&](const AliasShare& o) {
                     ops.push_back({{"op", "AliasShare"}, {"source_name", o.source_name}, {"alias_name", o.alias_name}});
                   },
               },
               op);
  }
  json kernels = json::array();
  for (const auto& k : p.inference_ops)
    kernels.push_back({{"kernel_id", k.kernel_id},
                       {"reads", k.reads},
                       {"writes", k.writes},
                       {"duration_base_s", k.duration_base_s},
                       {"duration_per_token_s", k.duration_per_token_s}});
  return {{"function_id", p.function_id},
          {"declared_static", detail::tri_state(p.declared_static)},
          {"cpu_init_s", p.cpu_init_s},
          {"init_ops", ops},
          {"inference_ops", kernels}};
}

/// Parses and validates a program document.
[[nodiscard]] inline FunctionProgram program_from_json(const json& j, const std::string& where = "program") {
  using detail::get;
  detail::require_object(j, where);
  detail::reject_unknown(j, {"function_id", "declared_static", "cpu_init_s", "init_ops", "inference_ops"}, where);
  FunctionProgram p;
  p.function_id = get<std::string>(j, "function_id", where);
  p.declared_static = detail::tri_state(j, "declared_static", where);
  p.cpu_init_s = detail::get_or<double>(j, "cpu_init_s", 0.0, where);
  const auto& ops = j.contains("init_ops") ? j.at("init_ops") : json::array();
  if (!ops.is_array()) throw ConfigError(where + ".init_ops: expected an array");
  for (std::size_t i = 0; i < ops.size(); ++i) {
    const auto w = where + ".init_ops[" + std::to_string(i) + "]";
    const auto& o = ops[i];
    detail::require_object(o, w);
    const auto kind = get<std::string>(o, "op", w);
    if (kind == "LoadCheckpoint") {
      detail::reject_unknown(o, {"op", "checkpoint_id", "tensor_name", "size_bytes"}, w);
      p.init_ops.emplace_back(LoadCheckpoint{get<std::string>(o, "checkpoint_id", w), get<std::string>(o, "tensor_name", w),
                                             get<Bytes>(o, "size_bytes", w)});
    } else if (kind == "Transform") {
      detail::reject_unknown(o, {"op", "op_kind", "input_names", "output_name", "output_size_bytes"}, w);
      p.init_ops.emplace_back(Transform{get<std::string>(o, "op_kind", w), get<std::vector<std::string>>(o, "input_names", w),
                                        get<std::string>(o, "output_name", w), get<Bytes>(o, "output_size_bytes", w)});
    } else if (kind == "ToGpu") {
      detail::reject_unknown(o, {"op", "tensor_name"}, w);
      p.init_ops.emplace_back(ToGpu{get<std::string>(o, "tensor_name", w)});
    } else if (kind == "AliasShare") {
      detail::reject_unknown(o, {"op", "source_name", "alias_name"}, w);
      p.init_ops.emplace_back(AliasShare{get<std::string>(o, "source_name", w), get<std::string>(o, "alias_name", w)});
    } else {
      throw ConfigError(w + ": unknown op '" + kind + "'");
    }
  }
  const auto& ks = j.contains("inference_ops") ? j.at("inference_ops") : json::array();
  if (!ks.is_array()) throw ConfigError(where + ".inference_ops: expected an array");
  for (std::size_t i = 0; i < ks.size(); ++i) {
    const auto w = where + ".inference_ops[" + std::to_string(i) + "]";
    const auto& o = ks[i];
    detail::require_object(o, w);
    detail::reject_unknown(o, {"kernel_id", "reads", "writes", "duration_base_s", "duration_per_token_s"}, w);
    KernelCall k;
    k.kernel_id = get<std::string>(o, "kernel_id", w);
    k.reads = get<std::vector<std::string>>(o, "reads", w);
    k.writes = detail::get_or<std::vector<std::string>>(o, "writes", {}, w);
    k.duration_base_s = detail::get_or<double>(o, "duration_base_s", 0.0, w);
    k.duration_per_token_s = detail::get_or<double>(o, "duration_per_token_s", 0.0, w);
    p.inference_ops.push_back(std::move(k));
  }
  auto v = validate_program(p);
  if (!v.empty()) throw ConfigError(where + ": " + v.front().to_string());
  return p;
}

/// Loads a program from a file, or generates one for "preset:<name>".
[[nodiscard]] inline FunctionProgram load_program(const std::string& ref) {
  if (ref.rfind("preset:", 0) == 0) {
    auto shape = presets::shape_by_name(ref.substr(7));
    if (!shape) throw ConfigError("unknown program preset '" + ref.substr(7) + "'");
    return presets::make_llama_program(*shape);
  }
  return program_from_json(read_json_file(ref), ref);
}

// ---------------------------------------------------------------------------
// Hardware

[[nodiscard]] inline json to_json(const HardwareProfile& h) {
  return {{"pcie_bandwidth_bytes_per_s", h.pcie_bandwidth_bytes_per_s},
          {"storage_bandwidth_bytes_per_s", h.storage_bandwidth_bytes_per_s},
          {"gpu_memory_bytes", h.gpu_memory_bytes},
          {"host_pool_bytes", h.host_pool_bytes},
          {"context_footprint_bytes", h.context_footprint_bytes},
          {"context_create_s", h.context_create_s},
          {"per_copy_overhead_s", h.per_copy_overhead_s},
          {"code_segment_bytes_per_kernel", h.code_segment_bytes_per_kernel},
          {"code_load_s_per_kernel", h.code_load_s_per_kernel},
          {"prewarm_s_per_kernel", h.prewarm_s_per_kernel},
          {"eager_load_s", h.eager_load_s},
          {"eager_load_bytes", h.eager_load_bytes},
          {"gpu_copy_bandwidth_bytes_per_s", h.gpu_copy_bandwidth_bytes_per_s},
          {"gpu_count", h.gpu_count}};
}

[[nodiscard]] inline HardwareProfile hardware_preset(const std::string& name) {
  if (name == "a6000") return presets::a6000();
  if (name == "a100-tp8-shard") return presets::a100_tp8_shard();
  if (name == "default") return HardwareProfile{};
  throw ConfigError("unknown hardware preset '" + name + "'");
}

/// A string names a preset; an object may name a base "preset" and override
/// individual fields.
[[nodiscard]] inline HardwareProfile hardware_from_json(const json& j, const std::string& where = "hardware") {
  if (j.is_string()) return hardware_preset(j.get<std::string>());
  detail::require_object(j, where);
  HardwareProfile h = j.contains("preset") ? hardware_preset(detail::get<std::string>(j, "preset", where)) : HardwareProfile{};
  json base = to_json(h);
  for (const auto& [k, v] : j.items()) {
    if (k == "preset") continue;
    if (!base.contains(k)) throw ConfigError(where + ": unknown key '" + k + "'");
    base[k] = v;
  }
  using detail::get;
  h.pcie_bandwidth_bytes_per_s = get<double>(base, "pcie_bandwidth_bytes_per_s", where);
  h.storage_bandwidth_bytes_per_s = get<double>(base, "storage_bandwidth_bytes_per_s", where);
  h.gpu_memory_bytes = get<Bytes>(base, "gpu_memory_bytes", where);
  h.host_pool_bytes = get<Bytes>(base, "host_pool_bytes", where);
  h.context_footprint_bytes = get<Bytes>(base, "context_footprint_bytes", where);
  h.context_create_s = get<double>(base, "context_create_s", where);
  h.per_copy_overhead_s = get<double>(base, "per_copy_overhead_s", where);
  h.code_segment_bytes_per_kernel = get<Bytes>(base, "code_segment_bytes_per_kernel", where);
  h.code_load_s_per_kernel = get<double>(base, "code_load_s_per_kernel", where);
  h.prewarm_s_per_kernel = get<double>(base, "prewarm_s_per_kernel", where);
  h.eager_load_s = get<double>(base, "eager_load_s", where);
  h.eager_load_bytes = get<Bytes>(base, "eager_load_bytes", where);
  h.gpu_copy_bandwidth_bytes_per_s = get<double>(base, "gpu_copy_bandwidth_bytes_per_s", where);
  h.gpu_count = get<int>(base, "gpu_count", where);
  auto v = h.violations();
  if (!v.empty()) throw ConfigError(where + ": " + v.front());
  return h;
}

// ---------------------------------------------------------------------------
// Templates

[[nodiscard]] inline json to_json(const FunctionTemplate& t) {
  json layout = json::array();
  for (const auto& e : t.layout) layout.push_back({{"weight", e.weight}, {"size_bytes", e.size_bytes}});
  json weights = json::object();
  for (const auto& [name, d] : t.weight_dfgs) {
    json chain = json::array();
    for (const auto& s : d.provenance)
      chain.push_back({{"op_kind", s.op_kind},
                       {"checkpoint_id", s.checkpoint_id ? json(*s.checkpoint_id) : json(nullptr)},
                       {"size_bytes", s.size_bytes},
                       {"arity", s.arity}});
    weights[name] = {{"provenance", chain},
                     {"size_bytes", d.size_bytes},
                     {"alias_group", d.alias_group},
                     {"adapter_sourced", d.adapter_sourced},
                     {"flag", t.flags.at(name) == WeightFlag::dynamic_weight ? "dynamic" : "static"}};
  }
  return {{"function_id", t.function_id},
          {"version", t.version},
          {"declared_static", detail::tri_state(t.declared_static)},
          {"kernel_set", t.kernel_set},
          {"loading_order", t.loading_order},
          {"layout", layout},
          {"model_bytes", t.model_bytes},
          {"prefetch_target_bytes", t.prefetch_target_bytes},
          {"prefetch_bytes", t.prefetch_bytes},
          {"resident_count", t.resident_count},
          {"transfer_groups", t.transfer_groups},
          {"max_transfers", t.max_transfers},
          {"warm_ttft_s", t.warm_ttft_s},
          {"weights", weights}};
}

/// Reads a template document. Derived fields (layout, groups, resident
/// prefix) are recomputed and must agree with the stored ones.
[[nodiscard]] inline FunctionTemplate template_from_json(const json& j, const std::string& where = "template") {
  using detail::get;
  detail::require_object(j, where);
  detail::reject_unknown(j,
                         {"function_id", "version", "declared_static", "kernel_set", "loading_order", "layout",
                          "model_bytes", "prefetch_target_bytes", "prefetch_bytes", "resident_count", "transfer_groups",
                          "max_transfers", "warm_ttft_s", "weights"},
                         where);
  FunctionTemplate t;
  t.function_id = get<std::string>(j, "function_id", where);
  t.version = get<std::uint64_t>(j, "version", where);
  t.declared_static = detail::tri_state(j, "declared_static", where);
  t.kernel_set = get<std::set<std::string>>(j, "kernel_set", where);
  t.loading_order = get<std::vector<std::string>>(j, "loading_order", where);
  t.model_bytes = get<Bytes>(j, "model_bytes", where);
  t.prefetch_target_bytes = get<Bytes>(j, "prefetch_target_bytes", where);
  t.max_transfers = get<std::size_t>(j, "max_transfers", where);
  t.warm_ttft_s = get<double>(j, "warm_ttft_s", where);
  const auto& ws = j.at("weights");
  detail::require_object(ws, where + ".weights");
  for (const auto& [name, wj] : ws.items()) {
    const auto w = where + ".weights." + name;
    detail::reject_unknown(wj, {"provenance", "size_bytes", "alias_group", "adapter_sourced", "flag"}, w);
    WeightDFG d;
    d.weight_name = name;
    d.size_bytes = get<Bytes>(wj, "size_bytes", w);
    d.alias_group = get<std::string>(wj, "alias_group", w);
    d.adapter_sourced = get<bool>(wj, "adapter_sourced", w);
    for (const auto& s : wj.at("provenance")) {
      detail::reject_unknown(s, {"op_kind", "checkpoint_id", "size_bytes", "arity"}, w);
      ProvenanceStep step;
      step.op_kind = get<std::string>(s, "op_kind", w);
      if (!s.at("checkpoint_id").is_null()) step.checkpoint_id = get<std::string>(s, "checkpoint_id", w);
      step.size_bytes = get<Bytes>(s, "size_bytes", w);
      step.arity = get<std::size_t>(s, "arity", w);
      d.provenance.push_back(std::move(step));
    }
    const auto flag = get<std::string>(wj, "flag", w);
    if (flag != "static" && flag != "dynamic") throw ConfigError(w + ".flag: expected static or dynamic");
    t.flags[name] = flag == "dynamic" ? WeightFlag::dynamic_weight : WeightFlag::static_weight;
    t.weight_dfgs.emplace(name, std::move(d));
  }
  try {
    coldfork::detail::relayout(t);
  } catch (const Error& e) {
    throw ConfigError(where + ": " + e.what());
  }
  if (t.prefetch_bytes != get<Bytes>(j, "prefetch_bytes", where) ||
      t.resident_count != get<std::size_t>(j, "resident_count", where) ||
      t.transfer_groups != get<TransferGroups>(j, "transfer_groups", where))
    throw ConfigError(where + ": stored layout does not match the weight graphs");
  return t;
}

[[nodiscard]] inline std::string dump(const json& j) { return j.dump(2) + "\n"; }

}  // namespace coldfork::io
