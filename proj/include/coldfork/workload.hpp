#pragma once

// Invocation streams: CSV trace ingestion, Poisson synthesis over task
// profiles, and time/count scaling.

#include <algorithm>
#include <cmath>
#include <fstream>
#include <istream>
#include <map>
#include <ostream>
#include <random>
#include <sstream>
#include <string>
#include <vector>

#include <fmt/format.h>

#include "coldfork/model.hpp"

namespace coldfork {

struct InvocationRecord {
  std::uint64_t request_id = 0;
  std::string function_id;
  double arrival_s = 0.0;
  Workload workload;

  /// The request substitutes its own adapter checkpoint.
  [[nodiscard]] bool dynamic_bearing() const { return workload.adapter_id.has_value(); }
  bool operator==(const InvocationRecord& o) const {
    return request_id == o.request_id && function_id == o.function_id && arrival_s == o.arrival_s &&
           workload.input_len == o.workload.input_len && workload.batch == o.workload.batch &&
           workload.adapter_id == o.workload.adapter_id;
  }
};

struct TaskProfile {
  std::string name;
  double mean_input_len = 1.0;
  /// Coefficient-of-variation squared of the input length; 0 is constant.
  double input_len_dispersion = 0.5;
  std::int64_t batch = 1;
};

/// Mail, conversation, code and long-context tasks.
[[nodiscard]] inline std::map<std::string, TaskProfile> default_tasks() {
  return {{"mail", {"mail", 867, 0.5, 1}},
          {"conversation", {"conversation", 1154, 0.5, 1}},
          {"code", {"code", 2048, 0.5, 1}},
          {"longbench", {"longbench", 6101, 0.5, 1}}};
}

enum class RateClass { low, medium, high };

[[nodiscard]] inline RateClass parse_rate_class(const std::string& s) {
  if (s == "low") return RateClass::low;
  if (s == "medium") return RateClass::medium;
  if (s == "high") return RateClass::high;
  throw ConfigError("unknown rate class '" + s + "'");
}

[[nodiscard]] inline const char* to_string(RateClass r) {
  return r == RateClass::low ? "low" : r == RateClass::medium ? "medium" : "high";
}

/// Invocations per second for each class.
struct RateClasses {
  double low = 0.02;
  double medium = 0.1;
  double high = 0.4;

  [[nodiscard]] double of(RateClass c) const { return c == RateClass::low ? low : c == RateClass::medium ? medium : high; }
};

struct MixEntry {
  std::string function_id;
  std::string task;
  RateClass rate = RateClass::medium;
  /// Adapter ids drawn per request; 0 for static functions.
  std::size_t adapter_pool = 0;
};

namespace detail {

inline void sort_records(std::vector<InvocationRecord>& v) {
  std::stable_sort(v.begin(), v.end(), [](const InvocationRecord& a, const InvocationRecord& b) {
    return a.arrival_s != b.arrival_s ? a.arrival_s < b.arrival_s : a.request_id < b.request_id;
  });
}

inline std::vector<std::string> split_csv(const std::string& line) {
  std::vector<std::string> out;
  std::string cur;
  for (char c : line) {
    if (c == ',') {
      out.push_back(std::move(cur));
      cur.clear();
    } else if (c != '\r') {
      cur.push_back(c);
    }
  }
  out.push_back(std::move(cur));
  return out;
}

template <class T>
T parse_number(const std::string& s, const std::string& where, const char* field) {
  T v{};
  std::istringstream is(s);
  is >> v;
  if (s.empty() || !is || !is.eof()) throw ConfigError(fmt::format("{}: bad {} '{}'", where, field, s));
  return v;
}

}  // namespace detail

inline constexpr const char* kTraceHeader = "request_id,function_id,arrival_s,input_len,batch,adapter_id";

/// Parses a trace CSV. `source` prefixes diagnostics ("file:line: ...").
[[nodiscard]] inline std::vector<InvocationRecord> parse_trace(std::istream& in, const std::string& source = "trace") {
  std::vector<InvocationRecord> out;
  std::string line;
  std::size_t lineno = 0;
  bool header = false;
  while (std::getline(in, line)) {
    ++lineno;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty()) continue;
    const auto where = fmt::format("{}:{}", source, lineno);
    if (!header) {
      if (line != kTraceHeader) throw ConfigError(where + ": expected header '" + kTraceHeader + "'");
      header = true;
      continue;
    }
    auto f = detail::split_csv(line);
    if (f.size() != 6) throw ConfigError(fmt::format("{}: expected 6 fields, got {}", where, f.size()));
    InvocationRecord r;
    r.request_id = detail::parse_number<std::uint64_t>(f[0], where, "request_id");
    if (f[1].empty()) throw ConfigError(where + ": empty function_id");
    r.function_id = f[1];
    r.arrival_s = detail::parse_number<double>(f[2], where, "arrival_s");
    r.workload.input_len = detail::parse_number<std::int64_t>(f[3], where, "input_len");
    r.workload.batch = detail::parse_number<std::int64_t>(f[4], where, "batch");
    if (!std::isfinite(r.arrival_s) || r.arrival_s < 0) throw ConfigError(where + ": arrival_s must be >= 0");
    if (r.workload.input_len < 1) throw ConfigError(where + ": input_len must be >= 1");
    if (r.workload.batch < 1) throw ConfigError(where + ": batch must be >= 1");
    if (!f[5].empty()) r.workload.adapter_id = f[5];
    out.push_back(std::move(r));
  }
  detail::sort_records(out);
  return out;
}

[[nodiscard]] inline std::vector<InvocationRecord> load_trace(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open trace '" + path + "'");
  return parse_trace(in, path);
}

inline void write_trace(std::ostream& os, const std::vector<InvocationRecord>& records) {
  os << kTraceHeader << '\n';
  for (const auto& r : records)
    os << fmt::format("{},{},{:.6f},{},{},{}\n", r.request_id, r.function_id, r.arrival_s, r.workload.input_len,
                      r.workload.batch, r.workload.adapter_id.value_or(""));
}

/// Input length with the task's mean: gamma with shape 1/d and scale m*d,
/// rounded and truncated at 1.
[[nodiscard]] inline std::int64_t draw_input_len(const TaskProfile& task, std::mt19937_64& rng) {
  if (task.input_len_dispersion <= 0) return std::max<std::int64_t>(1, std::llround(task.mean_input_len));
  std::gamma_distribution<double> g(1.0 / task.input_len_dispersion, task.mean_input_len * task.input_len_dispersion);
  return std::max<std::int64_t>(1, std::llround(g(rng)));
}

/// Poisson arrivals per function over [0, duration_s). Request ids follow
/// arrival order.
[[nodiscard]] inline std::vector<InvocationRecord> synthesize(const std::vector<MixEntry>& mix,
                                                              const std::map<std::string, TaskProfile>& tasks,
                                                              const RateClasses& rates, double duration_s,
                                                              std::uint64_t seed) {
  if (!(rates.low > 0 && rates.medium > 0 && rates.high > 0)) throw ConfigError("rates must be > 0");
  if (!(duration_s >= 0)) throw ConfigError("duration_s must be >= 0");
  std::mt19937_64 rng(seed);
  std::vector<InvocationRecord> out;
  for (const auto& m : mix) {
    auto it = tasks.find(m.task);
    if (it == tasks.end()) throw ConfigError("unknown task '" + m.task + "' for function '" + m.function_id + "'");
    const auto& task = it->second;
    if (task.mean_input_len < 1) throw ConfigError("task '" + task.name + "' needs mean_input_len >= 1");
    std::exponential_distribution<double> gap(rates.of(m.rate));
    std::uniform_int_distribution<std::size_t> adapter(0, m.adapter_pool == 0 ? 0 : m.adapter_pool - 1);
    for (double t = gap(rng); t < duration_s; t += gap(rng)) {
      InvocationRecord r;
      r.function_id = m.function_id;
      r.arrival_s = t;
      r.workload.input_len = draw_input_len(task, rng);
      r.workload.batch = task.batch;
      if (m.adapter_pool > 0) r.workload.adapter_id = fmt::format("{}.adapter.{}", m.function_id, adapter(rng));
      out.push_back(std::move(r));
    }
  }
  detail::sort_records(out);
  for (std::size_t i = 0; i < out.size(); ++i) out[i].request_id = i;
  return out;
}

/// Divides arrivals by `time_factor`; `count_factor` c > 1 keeps about one
/// record in c, preserving order.
[[nodiscard]] inline std::vector<InvocationRecord> scale_and_accelerate(std::vector<InvocationRecord> records,
                                                                        double time_factor, double count_factor) {
  if (!(time_factor > 0) || !(count_factor > 0)) throw ConfigError("scale factors must be > 0");
  std::vector<InvocationRecord> out;
  for (std::size_t i = 0; i < records.size(); ++i) {
    const auto bucket = [&](double x) { return static_cast<long long>(std::floor(x / count_factor)); };
    const double di = static_cast<double>(i);
    if (i > 0 && bucket(di) == bucket(di - 1.0)) continue;
    auto r = std::move(records[i]);
    r.arrival_s /= time_factor;
    out.push_back(std::move(r));
  }
  return out;
}

}  // namespace coldfork
