#pragma once

// Calibrated hardware profiles and generators for Llama-shaped function
// programs.

#include <cmath>
#include <string>
#include <vector>

#include <fmt/format.h>

#include "coldfork/model.hpp"

namespace coldfork::presets {

/// Kernels in the union of the four Llama-family functions (8B, 13B and
/// their LoRA variants). Proactive pre-warm costs are solved against it.
inline constexpr std::size_t kPolicyKernelCount = 160;

/// Single RTX A6000 in a PCIe 4.0 host.
[[nodiscard]] inline HardwareProfile a6000() {
  HardwareProfile hw;
  hw.pcie_bandwidth_bytes_per_s = 32e9;
  hw.storage_bandwidth_bytes_per_s = 2e9;
  hw.gpu_memory_bytes = 48 * kGB;
  hw.host_pool_bytes = 512 * kGB;
  hw.context_footprint_bytes = 270 * kMB;
  hw.context_create_s = 0.830;
  hw.per_copy_overhead_s = 5e-6;
  // 1070 ms / 350 MB pre-warm with the 160-kernel policy set.
  hw.prewarm_s_per_kernel = 0.240 / static_cast<double>(kPolicyKernelCount);
  hw.code_segment_bytes_per_kernel = 80 * kMB / kPolicyKernelCount;
  // 100 unique kernels per base Llama function -> 179 ms lazy penalty.
  hw.code_load_s_per_kernel = 1.79e-3;
  hw.eager_load_s = 3.050 - 0.830;
  hw.eager_load_bytes = 1120 * kMB;
  hw.gpu_copy_bandwidth_bytes_per_s = 600e9;
  hw.gpu_count = 1;
  return hw;
}

/// One GPU of an 8-way tensor-parallel A100 host: eight shards share the
/// host links and every copy command pays a submission cost.
[[nodiscard]] inline HardwareProfile a100_tp8_shard() {
  HardwareProfile hw = a6000();
  hw.gpu_memory_bytes = 80 * kGB;
  hw.pcie_bandwidth_bytes_per_s = 15e9;
  hw.per_copy_overhead_s = 0.600 / 900.0;
  return hw;
}

struct LlamaShape {
  std::string name;    // function/program id, e.g. "llama2-13b"
  std::string family;  // kernel and checkpoint family
  int layers = 40;
  double hidden = 5120;
  double intermediate = 13824;
  double vocab = 32000;
  double kv_ratio = 1.0;  // k/v projection width relative to hidden
  Bytes model_bytes = 24'300'000'000ULL;
  /// Warm compute at 2048 tokens, batch 1.
  double warm_compute_ref_s = 0.5393;
  double per_token_fraction = 0.9;
  double cpu_init_s = 0.05;
  bool tied_embeddings = true;
  /// Adapter bytes as a fraction of base model bytes; 0 disables LoRA.
  double adapter_fraction = 0.0;
  std::optional<bool> declared_static;
};

inline constexpr std::int64_t kReferenceTokens = 2048;
inline constexpr std::size_t kCommonKernels = 80;
inline constexpr std::size_t kFamilyKernels = 20;
inline constexpr std::size_t kLoraKernels = 20;

/// Llama2-13B: 24.3 GB of fp16 weights. Warm compute calibrated so that a
/// full-load cold start with lazy kernels is 2.74x warm inference at 2k.
[[nodiscard]] inline LlamaShape llama2_13b(bool lora = false) {
  LlamaShape s;
  s.name = lora ? "llama2-13b-lora" : "llama2-13b";
  s.family = "llama2-13b";
  if (lora) {
    s.adapter_fraction = 0.01;
    s.declared_static = false;
  } else {
    s.declared_static = true;
  }
  return s;
}

/// Llama3-8B: 15.7 GB with grouped-query attention and a 128k vocabulary.
[[nodiscard]] inline LlamaShape llama3_8b(bool lora = false) {
  LlamaShape s;
  s.name = lora ? "llama3-8b-lora" : "llama3-8b";
  s.family = "llama3-8b";
  s.layers = 32;
  s.hidden = 4096;
  s.intermediate = 14336;
  s.vocab = 128256;
  s.kv_ratio = 0.25;
  s.model_bytes = 15'700'000'000ULL;
  s.warm_compute_ref_s = 0.5393 * (15.7 / 24.3);
  if (lora) {
    s.adapter_fraction = 0.01;
    s.declared_static = false;
  } else {
    s.declared_static = true;
  }
  return s;
}

[[nodiscard]] inline std::vector<LlamaShape> llama_family_shapes() {
  return {llama3_8b(false), llama3_8b(true), llama2_13b(false), llama2_13b(true)};
}

[[nodiscard]] inline std::optional<LlamaShape> shape_by_name(const std::string& name) {
  for (auto& s : llama_family_shapes())
    if (s.name == name) return s;
  return std::nullopt;
}

namespace detail {

struct WeightSpec {
  std::string name;
  double rel = 0.0;  // relative parameter count
  bool permute = false;
  bool adapter = false;
  Bytes bytes = 0;
};

/// Scales relative sizes to integer bytes summing exactly to `total`.
inline void assign_bytes(std::vector<WeightSpec*>& ws, Bytes total) {
  double rel_sum = 0;
  for (auto* w : ws) rel_sum += w->rel;
  Bytes used = 0;
  WeightSpec* largest = ws.front();
  for (auto* w : ws) {
    w->bytes = std::max<Bytes>(1, static_cast<Bytes>(std::floor(static_cast<double>(total) * w->rel / rel_sum)));
    used += w->bytes;
    if (w->rel > largest->rel) largest = w;
  }
  largest->bytes += total - used;
}

}  // namespace detail

/// Builds the program of a Llama-shaped function. Initialization follows a
/// typical module constructor: decoder layers first, then the final norm and
/// the output head, whose tensor is shared with the token embedding. LoRA
/// adapters on the q and v projections load from the request's adapter.
[[nodiscard]] inline FunctionProgram make_llama_program(const LlamaShape& s) {
  using detail::WeightSpec;
  const double h = s.hidden, inter = s.intermediate;
  std::vector<WeightSpec> base;
  for (int l = 0; l < s.layers; ++l) {
    const auto p = fmt::format("layers.{}.", l);
    base.push_back({p + "attn_norm", h});
    base.push_back({p + "wq", h * h, true});
    base.push_back({p + "wk", h * h * s.kv_ratio, true});
    base.push_back({p + "wv", h * h * s.kv_ratio});
    base.push_back({p + "wo", h * h});
    base.push_back({p + "mlp_norm", h});
    base.push_back({p + "w_gate", h * inter});
    base.push_back({p + "w_up", h * inter});
    base.push_back({p + "w_down", h * inter});
  }
  base.push_back({"norm", h});
  base.push_back({"lm_head", s.vocab * h});
  if (!s.tied_embeddings) base.push_back({"embed", s.vocab * h});
  {
    std::vector<WeightSpec*> ptrs;
    for (auto& w : base) ptrs.push_back(&w);
    detail::assign_bytes(ptrs, s.model_bytes);
  }

  std::vector<WeightSpec> adapters;
  if (s.adapter_fraction > 0) {
    for (int l = 0; l < s.layers; ++l) {
      const auto p = fmt::format("layers.{}.", l);
      for (const char* t : {"lora_q_a", "lora_q_b", "lora_v_a", "lora_v_b"})
        adapters.push_back({p + t, 1.0, false, true});
    }
    std::vector<WeightSpec*> ptrs;
    for (auto& w : adapters) ptrs.push_back(&w);
    detail::assign_bytes(ptrs, static_cast<Bytes>(std::llround(static_cast<double>(s.model_bytes) * s.adapter_fraction)));
  }

  FunctionProgram prog;
  prog.function_id = s.name;
  prog.declared_static = s.declared_static;
  prog.cpu_init_s = s.cpu_init_s;
  std::map<std::string, Bytes> bytes_of;
  for (const auto& w : base) {
    bytes_of[w.name] = w.bytes;
    if (w.permute) {
      prog.init_ops.emplace_back(LoadCheckpoint{s.family, w.name + ".raw", w.bytes});
      prog.init_ops.emplace_back(Transform{"permute_rotary", {w.name + ".raw"}, w.name, w.bytes});
    } else {
      prog.init_ops.emplace_back(LoadCheckpoint{s.family, w.name, w.bytes});
    }
    prog.init_ops.emplace_back(ToGpu{w.name});
  }
  if (s.tied_embeddings) prog.init_ops.emplace_back(AliasShare{"lm_head", "embed"});
  for (const auto& a : adapters) {
    bytes_of[a.name] = a.bytes;
    prog.init_ops.emplace_back(LoadCheckpoint{kAdapterPlaceholder, a.name, a.bytes});
    prog.init_ops.emplace_back(ToGpu{a.name});
  }

  // Kernel stream. Weight-reading kernels share 85% of the warm compute in
  // proportion to bytes read; the remaining kernels split 15% evenly.
  struct Proto {
    std::string id;
    std::vector<std::string> reads;
    std::vector<std::string> writes;
    double weight_bytes = 0;
  };
  std::vector<Proto> calls;
  const std::string fam = s.family;
  auto common = [](const std::string& n) { return "common." + n; };
  auto family = [&](const std::string& n) { return fam + "." + n; };
  auto act = [](const std::string& n) { return std::vector<std::string>{n}; };

  calls.push_back({common("embedding"), {"embed"}, act("h"), static_cast<double>(bytes_of.at("lm_head"))});
  std::size_t common_ids = 7, family_ids = 8;  // named ids below
  for (std::size_t i = 0; common_ids < kCommonKernels; ++i, ++common_ids)
    calls.push_back({common(fmt::format("aux.{}", i)), act("h"), act("h"), 0});
  for (std::size_t i = 0; family_ids < kFamilyKernels; ++i, ++family_ids)
    calls.push_back({family(fmt::format("aux.{}", i)), act("h"), act("h"), 0});
  if (!adapters.empty())
    for (std::size_t i = 0; i < kLoraKernels - 4; ++i)
      calls.push_back({family(fmt::format("lora.aux.{}", i)), act("h"), act("h"), 0});

  auto gemm = [&](const std::string& id, const std::string& w) {
    calls.push_back({family(id), {"h", w}, act("h"), static_cast<double>(bytes_of.at(w))});
  };
  auto lora = [&](const std::string& id, const std::string& w) {
    calls.push_back({family(id), {"h", w}, act("h"), static_cast<double>(bytes_of.at(w))});
  };
  for (int l = 0; l < s.layers; ++l) {
    const auto p = fmt::format("layers.{}.", l);
    calls.push_back({common("rmsnorm"), {"h", p + "attn_norm"}, act("h"), static_cast<double>(bytes_of.at(p + "attn_norm"))});
    gemm("gemm_q", p + "wq");
    if (!adapters.empty()) {
      lora("lora_q_a", p + "lora_q_a");
      lora("lora_q_b", p + "lora_q_b");
    }
    gemm("gemm_k", p + "wk");
    gemm("gemm_v", p + "wv");
    if (!adapters.empty()) {
      lora("lora_v_a", p + "lora_v_a");
      lora("lora_v_b", p + "lora_v_b");
    }
    calls.push_back({common("rope"), act("h"), act("h"), 0});
    calls.push_back({common("flash_attn"), act("h"), act("h"), 0});
    gemm("gemm_o", p + "wo");
    calls.push_back({common("add"), act("h"), act("h"), 0});
    calls.push_back({common("rmsnorm"), {"h", p + "mlp_norm"}, act("h"), static_cast<double>(bytes_of.at(p + "mlp_norm"))});
    gemm("gemm_gate", p + "w_gate");
    gemm("gemm_up", p + "w_up");
    calls.push_back({common("silu_mul"), act("h"), act("h"), 0});
    gemm("gemm_down", p + "w_down");
    calls.push_back({common("add"), act("h"), act("h"), 0});
  }
  calls.push_back({common("rmsnorm"), {"h", "norm"}, act("h"), static_cast<double>(bytes_of.at("norm"))});
  calls.push_back({family("lm_head"), {"h", "lm_head"}, act("logits"), static_cast<double>(bytes_of.at("lm_head"))});
  calls.push_back({common("argmax"), act("logits"), act("token"), 0});

  double weighted_total = 0;
  std::size_t light = 0;
  for (const auto& c : calls) {
    weighted_total += c.weight_bytes;
    light += c.weight_bytes == 0;
  }
  const double heavy_share = 0.85 * s.warm_compute_ref_s, light_share = 0.15 * s.warm_compute_ref_s;
  for (const auto& c : calls) {
    const double d = c.weight_bytes > 0 ? heavy_share * c.weight_bytes / weighted_total
                                        : light_share / static_cast<double>(light);
    KernelCall k;
    k.kernel_id = c.id;
    k.reads = c.reads;
    k.writes = c.writes;
    k.duration_base_s = d * (1.0 - s.per_token_fraction);
    k.duration_per_token_s = d * s.per_token_fraction / static_cast<double>(kReferenceTokens);
    prog.inference_ops.push_back(std::move(k));
  }
  return prog;
}

/// Uniform stack of `tensors` equal weights, one matmul kernel per weight,
/// shaped after one shard of a tensor-parallel 70B model.
[[nodiscard]] inline FunctionProgram make_uniform_stack(const std::string& name, std::size_t tensors, Bytes total_bytes,
                                                        double compute_ref_s, double per_token_fraction = 0.95) {
  FunctionProgram prog;
  prog.function_id = name;
  prog.declared_static = true;
  const Bytes each = total_bytes / tensors;
  for (std::size_t i = 0; i < tensors; ++i) {
    const auto w = fmt::format("w{:04}", i);
    prog.init_ops.emplace_back(LoadCheckpoint{name, w, i + 1 == tensors ? total_bytes - each * (tensors - 1) : each});
    prog.init_ops.emplace_back(ToGpu{w});
  }
  const double d = compute_ref_s / static_cast<double>(tensors);
  for (std::size_t i = 0; i < tensors; ++i) {
    KernelCall k;
    k.kernel_id = fmt::format("{}.matmul.{}", name, i % 8);
    k.reads = {fmt::format("w{:04}", i)};
    k.writes = {"h"};
    k.duration_base_s = d * (1.0 - per_token_fraction);
    k.duration_per_token_s = d * per_token_fraction / static_cast<double>(kReferenceTokens);
    prog.inference_ops.push_back(std::move(k));
  }
  return prog;
}

}  // namespace coldfork::presets
