#pragma once

// Domain vocabulary shared by every layer: function programs, weights,
// kernels, hardware profiles and latency breakdowns.

#include <cstdint>
#include <map>
#include <optional>
#include <set>
#include <stdexcept>
#include <string>
#include <unordered_map>
#include <unordered_set>
#include <variant>
#include <vector>

namespace coldfork {

using Bytes = std::uint64_t;

inline constexpr Bytes kMB = 1'000'000ULL;
inline constexpr Bytes kGB = 1'000'000'000ULL;
inline constexpr Bytes kMiB = 1ULL << 20;
inline constexpr Bytes kGiB = 1ULL << 30;

/// Checkpoint id that a request's adapter id replaces at trace time.
inline constexpr const char* kAdapterPlaceholder = "$adapter";

// ---------------------------------------------------------------------------
// Errors

struct Error : std::runtime_error {
  using std::runtime_error::runtime_error;
};

/// Raised when an operation receives a program that fails validation.
struct InvalidProgram : Error {
  using Error::Error;
};

/// Weight-name sets differ between two traces of the same function. The
/// template can no longer be matched and has to be rebuilt.
struct StructuralMismatch : Error {
  using Error::Error;
};

struct OutOfMemory : Error {
  using Error::Error;
};

struct ConfigError : Error {
  using Error::Error;
};

// ---------------------------------------------------------------------------
// Hardware

struct HardwareProfile {
  double pcie_bandwidth_bytes_per_s = 32e9;
  double storage_bandwidth_bytes_per_s = 2e9;
  Bytes gpu_memory_bytes = 48 * kGB;
  Bytes host_pool_bytes = 512 * kGB;
  Bytes context_footprint_bytes = 500 * kMiB;
  double context_create_s = 0.830;
  double per_copy_overhead_s = 0.0;
  Bytes code_segment_bytes_per_kernel = 0;
  /// Lazy first-call penalty of a kernel whose code segment is not loaded.
  double code_load_s_per_kernel = 0.0;
  /// Cost per kernel of proactively triggering its load in a pre-warmed
  /// process (launch of a shrunken trigger kernel plus the load itself).
  double prewarm_s_per_kernel = 0.0;
  /// Whole-library eager module loading, the alternative to proactive loading.
  double eager_load_s = 0.0;
  Bytes eager_load_bytes = 0;
  /// Device-local copy rate used for copy-on-write duplication.
  double gpu_copy_bandwidth_bytes_per_s = 600e9;
  int gpu_count = 1;

  /// Returns a list of human-readable invariant violations (empty if valid).
  [[nodiscard]] std::vector<std::string> violations() const {
    std::vector<std::string> out;
    if (!(pcie_bandwidth_bytes_per_s > 0)) out.emplace_back("pcie_bandwidth_bytes_per_s must be > 0");
    if (!(storage_bandwidth_bytes_per_s > 0)) out.emplace_back("storage_bandwidth_bytes_per_s must be > 0");
    if (!(gpu_copy_bandwidth_bytes_per_s > 0)) out.emplace_back("gpu_copy_bandwidth_bytes_per_s must be > 0");
    if (gpu_memory_bytes == 0) out.emplace_back("gpu_memory_bytes must be > 0");
    if (host_pool_bytes == 0) out.emplace_back("host_pool_bytes must be > 0");
    if (context_footprint_bytes > gpu_memory_bytes) out.emplace_back("context_footprint_bytes exceeds gpu_memory_bytes");
    if (context_create_s < 0 || per_copy_overhead_s < 0 || code_load_s_per_kernel < 0 ||
        prewarm_s_per_kernel < 0 || eager_load_s < 0)
      out.emplace_back("times must be nonnegative");
    if (gpu_count < 1) out.emplace_back("gpu_count must be >= 1");
    return out;
  }

  void validate() const {
    auto v = violations();
    if (!v.empty()) throw ConfigError("invalid hardware profile: " + v.front());
  }
};

// ---------------------------------------------------------------------------
// Function programs

struct LoadCheckpoint {
  std::string checkpoint_id;
  std::string tensor_name;
  Bytes size_bytes = 0;
  bool operator==(const LoadCheckpoint&) const = default;
};

struct Transform {
  std::string op_kind;
  std::vector<std::string> input_names;
  std::string output_name;
  Bytes output_size_bytes = 0;
  bool operator==(const Transform&) const = default;
};

struct ToGpu {
  std::string tensor_name;
  bool operator==(const ToGpu&) const = default;
};

struct AliasShare {
  std::string source_name;
  std::string alias_name;
  bool operator==(const AliasShare&) const = default;
};

using InitOp = std::variant<LoadCheckpoint, Transform, ToGpu, AliasShare>;

struct Workload {
  std::int64_t input_len = 1;
  std::int64_t batch = 1;
  std::optional<std::string> adapter_id;

  [[nodiscard]] std::int64_t tokens() const { return input_len * batch; }
};

struct KernelCall {
  std::string kernel_id;
  std::vector<std::string> reads;
  std::vector<std::string> writes;
  double duration_base_s = 0.0;
  double duration_per_token_s = 0.0;

  [[nodiscard]] double duration(const Workload& w) const {
    return duration_base_s + duration_per_token_s * static_cast<double>(w.tokens());
  }
  bool operator==(const KernelCall&) const = default;
};

struct FunctionProgram {
  std::string function_id;
  std::vector<InitOp> init_ops;
  std::vector<KernelCall> inference_ops;
  /// Developer annotation; std::nullopt means "not annotated".
  std::optional<bool> declared_static;
  double cpu_init_s = 0.0;
};

// ---------------------------------------------------------------------------
// Latency breakdown

struct TTFTBreakdown {
  double context_s = 0.0;
  double code_load_s = 0.0;
  double dynamic_init_s = 0.0;
  double exposed_load_s = 0.0;
  double compute_s = 0.0;
  double ttft_s = 0.0;

  [[nodiscard]] double stage_sum() const {
    return context_s + code_load_s + dynamic_init_s + exposed_load_s + compute_s;
  }
};

// ---------------------------------------------------------------------------
// Validation

struct Violation {
  enum class Phase { init, inference, program };
  Phase phase = Phase::program;
  std::size_t op_index = 0;
  std::string rule;
  std::string detail;

  [[nodiscard]] std::string to_string() const {
    const char* p = phase == Phase::init ? "init op " : phase == Phase::inference ? "inference op " : "program";
    std::string s = rule + " at " + p;
    if (phase != Phase::program) s += std::to_string(op_index);
    if (!detail.empty()) s += " (" + detail + ")";
    return s;
  }
};

namespace detail {

template <class... Ts>
struct overloaded : Ts... {
  using Ts::operator()...;
};
template <class... Ts>
overloaded(Ts...) -> overloaded<Ts...>;

}  // namespace detail

/// Checks every FunctionProgram/InitOp/KernelCall invariant. Violations are
/// data: an empty result means the program is well formed.
[[nodiscard]] inline std::vector<Violation> validate_program(const FunctionProgram& program) {
  using P = Violation::Phase;
  std::vector<Violation> out;
  auto add = [&](P phase, std::size_t i, std::string rule, std::string detail) {
    out.push_back(Violation{phase, i, std::move(rule), std::move(detail)});
  };

  std::unordered_set<std::string> defined;
  std::unordered_map<std::string, std::string> root;  // name -> underlying tensor
  std::unordered_set<std::string> on_gpu;               // underlying tensors
  auto define = [&](std::size_t i, const std::string& name) {
    if (name.empty()) {
      add(P::init, i, "empty-name", "");
      return;
    }
    if (!defined.insert(name).second) add(P::init, i, "duplicate-definition", name);
    root.emplace(name, name);
  };

  for (std::size_t i = 0; i < program.init_ops.size(); ++i) {
    std::visit(detail::overloaded{
                   [&](const LoadCheckpoint& op) {
                     if (op.size_bytes == 0) add(P::init, i, "zero-size", op.tensor_name);
                     define(i, op.tensor_name);
                   },
                   [&](const Transform& op) {
                     for (const auto& in : op.input_names)
                       if (!defined.count(in)) add(P::init, i, "undefined-input", in);
                     if (op.output_size_bytes == 0) add(P::init, i, "zero-size", op.output_name);
                     define(i, op.output_name);
                   },
                   [&](const ToGpu& op) {
                     if (!defined.count(op.tensor_name)) {
                       add(P::init, i, "undefined-input", op.tensor_name);
                       return;
                     }
                     on_gpu.insert(root.at(op.tensor_name));
                   },
                   [&](const AliasShare& op) {
                     if (!defined.count(op.source_name)) {
                       add(P::init, i, "undefined-input", op.source_name);
                       return;
                     }
                     if (!defined.insert(op.alias_name).second) {
                       add(P::init, i, "duplicate-definition", op.alias_name);
                       return;
                     }
                     root[op.alias_name] = root.at(op.source_name);
                   },
               },
               program.init_ops[i]);
  }

  if (program.inference_ops.empty()) add(P::program, 0, "empty-inference", "");
  if (program.cpu_init_s < 0) add(P::program, 0, "negative-cpu-init", "");

  std::unordered_set<std::string> activations;
  for (std::size_t k = 0; k < program.inference_ops.size(); ++k) {
    const auto& call = program.inference_ops[k];
    if (call.reads.empty()) add(P::inference, k, "empty-reads", call.kernel_id);
    if (call.duration_base_s < 0 || call.duration_per_token_s < 0)
      add(P::inference, k, "negative-duration", call.kernel_id);
    for (const auto& r : call.reads) {
      if (activations.count(r)) continue;
      auto it = root.find(r);
      if (it == root.end()) {
        add(P::inference, k, "undefined-read", r);
      } else if (!on_gpu.count(it->second)) {
        add(P::inference, k, "read-not-on-gpu", r);
      }
    }
    for (const auto& w : call.writes)
      if (!root.count(w)) activations.insert(w);
  }
  return out;
}

inline void require_valid(const FunctionProgram& program) {
  auto v = validate_program(program);
  if (!v.empty())
    throw InvalidProgram("program '" + program.function_id + "' is invalid: " + v.front().to_string());
}

/// Init-phase invariants only; inference may be absent.
inline void require_valid_init(const FunctionProgram& program) {
  for (const auto& v : validate_program(program))
    if (v.phase == Violation::Phase::init)
      throw InvalidProgram("program '" + program.function_id + "' is invalid: " + v.to_string());
}

/// Resolved tensor bookkeeping of a program's initialization: which names
/// alias which underlying tensor, which tensors end on the GPU, and sizes.
struct TensorTable {
  std::unordered_map<std::string, std::string> root;  // name -> alias group root
  std::unordered_map<std::string, Bytes> size;         // root -> bytes
  std::vector<std::string> gpu_roots;                  // in first ToGpu order
  std::unordered_map<std::string, std::vector<std::string>> names_of;  // root -> all names

  [[nodiscard]] bool is_weight(const std::string& name) const {
    auto it = root.find(name);
    return it != root.end() && gpu_set.count(it->second) != 0;
  }
  [[nodiscard]] const std::string& canonical(const std::string& name) const { return root.at(name); }

  std::unordered_set<std::string> gpu_set;
};

[[nodiscard]] inline TensorTable build_tensor_table(const FunctionProgram& program) {
  TensorTable t;
  for (const auto& op : program.init_ops) {
    std::visit(detail::overloaded{
                   [&](const LoadCheckpoint& o) {
                     t.root[o.tensor_name] = o.tensor_name;
                     t.size[o.tensor_name] = o.size_bytes;
                     t.names_of[o.tensor_name].push_back(o.tensor_name);
                   },
                   [&](const Transform& o) {
                     t.root[o.output_name] = o.output_name;
                     t.size[o.output_name] = o.output_size_bytes;
                     t.names_of[o.output_name].push_back(o.output_name);
                   },
                   [&](const ToGpu& o) {
                     const auto& r = t.root.at(o.tensor_name);
                     if (t.gpu_set.insert(r).second) t.gpu_roots.push_back(r);
                   },
                   [&](const AliasShare& o) {
                     const auto r = t.root.at(o.source_name);
                     t.root[o.alias_name] = r;
                     t.names_of[r].push_back(o.alias_name);
                   },
               },
               op);
  }
  return t;
}

/// Bytes of distinct GPU-resident weight tensors; aliases are counted once.
[[nodiscard]] inline Bytes model_bytes(const FunctionProgram& program) {
  require_valid(program);
  auto table = build_tensor_table(program);
  Bytes total = 0;
  for (const auto& r : table.gpu_roots) total += table.size.at(r);
  return total;
}

[[nodiscard]] inline double warm_compute_s(const FunctionProgram& program, const Workload& w) {
  double s = 0.0;
  for (const auto& k : program.inference_ops) s += k.duration(w);
  return s;
}

}  // namespace coldfork
