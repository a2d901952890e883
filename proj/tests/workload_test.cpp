#include <sstream>

#include <gtest/gtest.h>

#include "coldfork/workload.hpp"

using namespace coldfork;

namespace {

std::vector<InvocationRecord> parse(const std::string& body) {
  std::istringstream in(std::string(kTraceHeader) + "\n" + body);
  return parse_trace(in, "t.csv");
}

std::string error_of(const std::string& body) {
  try {
    (void)parse(body);
  } catch (const ConfigError& e) {
    return e.what();
  }
  return "";
}

}  // namespace

TEST(ParseTrace, ReadsRecordsAndSortsByArrival) {
  const auto r = parse("1,f,2.5,100,1,\n0,g,1.0,50,2,lora-3\n");
  ASSERT_EQ(r.size(), 2u);
  EXPECT_EQ(r[0].function_id, "g");
  EXPECT_EQ(r[0].workload.batch, 2);
  EXPECT_EQ(r[0].workload.adapter_id, std::optional<std::string>("lora-3"));
  EXPECT_TRUE(r[0].dynamic_bearing());
  EXPECT_FALSE(r[1].dynamic_bearing());
}

TEST(ParseTrace, TiesBreakByRequestId) {
  const auto r = parse("5,a,1.0,1,1,\n2,b,1.0,1,1,\n");
  EXPECT_EQ(r[0].request_id, 2u);
  EXPECT_EQ(r[1].request_id, 5u);
}

TEST(ParseTrace, ErrorsNameTheLine) {
  EXPECT_NE(error_of("0,f,1,1,1,\n1,f,-1,1,1,\n").find("t.csv:3"), std::string::npos);
  EXPECT_NE(error_of("0,f,1,0,1,\n").find("input_len"), std::string::npos);
  EXPECT_NE(error_of("0,f,1,1\n").find("6 fields"), std::string::npos);
  EXPECT_NE(error_of("0,f,abc,1,1,\n").find("arrival_s"), std::string::npos);
  EXPECT_NE(error_of("0,,1,1,1,\n").find("function_id"), std::string::npos);
  std::istringstream bad("id,f\n");
  EXPECT_THROW((void)parse_trace(bad), ConfigError);
}

TEST(ParseTrace, RoundTrip) {
  const auto r = parse("0,f,0.5,10,1,\n1,g,1.25,20,1,x\n");
  std::ostringstream os;
  write_trace(os, r);
  std::istringstream in(os.str());
  const auto back = parse_trace(in);
  ASSERT_EQ(back.size(), r.size());
  for (std::size_t i = 0; i < r.size(); ++i) {
    EXPECT_EQ(back[i].function_id, r[i].function_id);
    EXPECT_DOUBLE_EQ(back[i].arrival_s, r[i].arrival_s);
    EXPECT_EQ(back[i].workload.adapter_id, r[i].workload.adapter_id);
  }
}

TEST(InputLength, CodeTaskMean) {
  const auto tasks = default_tasks();
  std::mt19937_64 rng(1);
  double sum = 0;
  const int n = 20000;
  for (int i = 0; i < n; ++i) sum += static_cast<double>(draw_input_len(tasks.at("code"), rng));
  EXPECT_NEAR(sum / n, 2048, 0.02 * 2048);
}

TEST(InputLength, EveryTaskMeanWithinTwoPercent) {
  std::mt19937_64 rng(2);
  for (const auto& [name, task] : default_tasks()) {
    double sum = 0;
    const int n = 20000;
    for (int i = 0; i < n; ++i) {
      const auto x = draw_input_len(task, rng);
      ASSERT_GE(x, 1);
      sum += static_cast<double>(x);
    }
    EXPECT_NEAR(sum / n, task.mean_input_len, 0.02 * task.mean_input_len) << name;
  }
  TaskProfile fixed{"fixed", 300, 0.0, 1};
  EXPECT_EQ(draw_input_len(fixed, rng), 300);
}

TEST(Synthesize, SeedDeterminesTrace) {
  const std::vector<MixEntry> mix{{"f", "code", RateClass::high, 0}, {"g", "mail", RateClass::low, 3}};
  const auto a = synthesize(mix, default_tasks(), {}, 1000, 11);
  const auto b = synthesize(mix, default_tasks(), {}, 1000, 11);
  const auto c = synthesize(mix, default_tasks(), {}, 1000, 12);
  std::ostringstream sa, sb, sc;
  write_trace(sa, a);
  write_trace(sb, b);
  write_trace(sc, c);
  EXPECT_EQ(sa.str(), sb.str());
  EXPECT_NE(sa.str(), sc.str());
  for (std::size_t i = 0; i < a.size(); ++i) {
    EXPECT_EQ(a[i].request_id, i);
    if (i) EXPECT_LE(a[i - 1].arrival_s, a[i].arrival_s);
    EXPECT_EQ(a[i].dynamic_bearing(), a[i].function_id == "g");
  }
}

TEST(Synthesize, ArrivalRateMatchesClass) {
  RateClasses rates;
  const auto r = synthesize({{"f", "code", RateClass::medium, 0}}, default_tasks(), rates, 20000, 4);
  EXPECT_NEAR(static_cast<double>(r.size()) / 20000, rates.medium, 0.05 * rates.medium);
}

TEST(Synthesize, RejectsBadInput) {
  RateClasses zero;
  zero.low = 0;
  EXPECT_THROW((void)synthesize({}, default_tasks(), zero, 10, 1), ConfigError);
  EXPECT_THROW((void)synthesize({{"f", "nope", RateClass::low, 0}}, default_tasks(), {}, 10, 1), ConfigError);
  EXPECT_THROW((void)parse_rate_class("extreme"), ConfigError);
}

TEST(ScaleAndAccelerate, TimeFactorDividesArrivals) {
  const auto r = scale_and_accelerate(parse("0,f,28,1,1,\n1,f,56,1,1,\n"), 28, 1);
  ASSERT_EQ(r.size(), 2u);
  EXPECT_DOUBLE_EQ(r[0].arrival_s, 1.0);
  EXPECT_DOUBLE_EQ(r[1].arrival_s, 2.0);
}

TEST(ScaleAndAccelerate, CountFactorThinsInOrder) {
  std::string body;
  for (int i = 0; i < 100; ++i) body += std::to_string(i) + ",f," + std::to_string(i) + ",1,1,\n";
  const auto r = scale_and_accelerate(parse(body), 1, 2);
  EXPECT_EQ(r.size(), 50u);
  for (std::size_t i = 1; i < r.size(); ++i) EXPECT_LT(r[i - 1].request_id, r[i].request_id);
  EXPECT_THROW((void)scale_and_accelerate({}, 0, 1), ConfigError);
}
