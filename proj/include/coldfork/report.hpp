#pragma once

// Latency statistics and tabular exports.

#include <algorithm>
#include <cmath>
#include <ostream>
#include <stdexcept>
#include <string>
#include <vector>

#include <fmt/format.h>

#include "coldfork/model.hpp"

namespace coldfork {

/// Nearest-rank percentile of ascending `sorted`: the value at rank
/// ceil(p/100 * N), with rank 1 for p = 0.
[[nodiscard]] inline double percentile(const std::vector<double>& sorted, double p) {
  if (sorted.empty()) throw std::invalid_argument("percentile of an empty sample");
  if (!(p >= 0 && p <= 100)) throw std::invalid_argument("percentile outside [0, 100]");
  const auto n = sorted.size();
  auto rank = static_cast<std::size_t>(std::ceil(p / 100.0 * static_cast<double>(n)));
  rank = std::clamp<std::size_t>(rank, 1, n);
  return sorted[rank - 1];
}

struct CdfPoint {
  double value = 0.0;
  double fraction = 0.0;
};

[[nodiscard]] inline std::vector<CdfPoint> cdf(std::vector<double> samples) {
  std::sort(samples.begin(), samples.end());
  std::vector<CdfPoint> out;
  const double n = static_cast<double>(samples.size());
  for (std::size_t i = 0; i < samples.size(); ++i) out.push_back({samples[i], static_cast<double>(i + 1) / n});
  return out;
}

struct Band {
  double lo = 0.0;
  double hi = 0.0;
  double mean = 0.0;
  std::size_t count = 0;
};

struct LatencySummary {
  std::size_t count = 0;
  double mean = 0.0;
  double p50 = 0.0;
  double p95 = 0.0;
  double p99 = 0.0;
  double max = 0.0;
  /// Mean per percentile band: [0,50), [50,90), [90,95), [95,99), [99,100].
  std::vector<Band> bands;
};

[[nodiscard]] inline LatencySummary summarize(std::vector<double> samples) {
  LatencySummary s;
  s.count = samples.size();
  if (samples.empty()) return s;
  std::sort(samples.begin(), samples.end());
  double total = 0;
  for (double v : samples) total += v;
  s.mean = total / static_cast<double>(samples.size());
  s.p50 = percentile(samples, 50);
  s.p95 = percentile(samples, 95);
  s.p99 = percentile(samples, 99);
  s.max = samples.back();
  const double edges[] = {0, 50, 90, 95, 99, 100};
  const double n = static_cast<double>(samples.size());
  for (std::size_t b = 0; b + 1 < std::size(edges); ++b) {
    Band band{edges[b], edges[b + 1], 0.0, 0};
    double sum = 0;
    for (std::size_t i = 0; i < samples.size(); ++i) {
      const double q = 100.0 * static_cast<double>(i) / n;  // rank position in percent
      if (q >= band.lo && (q < band.hi || (b + 2 == std::size(edges) && q <= band.hi))) {
        sum += samples[i];
        ++band.count;
      }
    }
    band.mean = band.count ? sum / static_cast<double>(band.count) : 0.0;
    s.bands.push_back(band);
  }
  return s;
}

/// Relative reduction of `candidate` against `reference`, in percent.
[[nodiscard]] inline double improvement_pct(double reference, double candidate) {
  return reference > 0 ? 100.0 * (reference - candidate) / reference : 0.0;
}

inline void write_cdf(std::ostream& os, const std::vector<CdfPoint>& points) {
  os << "ttft_s,fraction\n";
  for (const auto& p : points) os << fmt::format("{:.6f},{:.6f}\n", p.value, p.fraction);
}

inline void write_breakdown_table(std::ostream& os, const TTFTBreakdown& b) {
  os << fmt::format("{:<16}{:>12}\n", "stage", "seconds");
  const std::pair<const char*, double> rows[] = {{"context", b.context_s},           {"code_load", b.code_load_s},
                                                 {"dynamic_init", b.dynamic_init_s}, {"exposed_load", b.exposed_load_s},
                                                 {"compute", b.compute_s},           {"ttft", b.ttft_s}};
  for (const auto& [name, v] : rows) os << fmt::format("{:<16}{:>12.6f}\n", name, v);
}

}  // namespace coldfork
