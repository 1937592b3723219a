#include <gtest/gtest.h>

#include <cmath>
#include <sstream>

#include "merlin/report.hpp"

using namespace merlin;

TEST(Csv, QuotesOnlyWhenNeeded) {
  EXPECT_EQ(csv_escape("plain"), "plain");
  EXPECT_EQ(csv_escape("a,b"), "\"a,b\"");
  EXPECT_EQ(csv_escape("say \"hi\""), "\"say \"\"hi\"\"\"");
  EXPECT_EQ(csv_escape("two\nlines"), "\"two\nlines\"");
}

TEST(Csv, WriteThenParseRoundTrips) {
  std::vector<Row> rows(3);
  rows[0]["name"] = "a,b";
  rows[0]["value"] = 0.1;
  rows[1]["name"] = "quote \" inside";
  rows[1]["value"] = -1e-300;
  rows[1]["extra"] = true;
  rows[2]["name"] = "multi\r\nline";
  rows[2]["value"] = 3;
  std::ostringstream os;
  write_csv(os, rows);
  const auto parsed = parse_csv(os.str());
  ASSERT_EQ(parsed.size(), 4u);
  EXPECT_EQ(parsed[0], (std::vector<std::string>{"name", "value", "extra"}));
  EXPECT_EQ(parsed[1][0], "a,b");
  EXPECT_EQ(std::stod(parsed[1][1]), 0.1);
  EXPECT_EQ(parsed[1][2], "");
  EXPECT_EQ(parsed[2][0], "quote \" inside");
  EXPECT_EQ(std::stod(parsed[2][1]), -1e-300);
  EXPECT_EQ(parsed[2][2], "true");
  EXPECT_EQ(parsed[3][0], "multi\r\nline");
  EXPECT_EQ(parsed[3][1], "3");
}

TEST(Csv, RecordsEndWithCrlf) {
  std::vector<Row> rows(1);
  rows[0]["x"] = 1;
  std::ostringstream os;
  write_csv(os, rows);
  EXPECT_EQ(os.str(), "x\r\n1\r\n");
}

TEST(Csv, UnterminatedQuoteRejected) { EXPECT_THROW(parse_csv("\"abc"), ContractError); }

TEST(Csv, DoublesSurviveFormatting) {
  for (double v : {M_PI, 1.0 / 3.0, 6.02214076e23, -2.5e-17, 0.0})
    EXPECT_EQ(std::stod(format_double(v)), v);
  EXPECT_EQ(format_double(std::nan("")), "nan");
  EXPECT_EQ(format_double(-INFINITY), "-inf");
}

TEST(Stats, MeanStdMedian) {
  const std::vector<double> v{2, 4, 4, 4, 5, 5, 7, 9};
  EXPECT_DOUBLE_EQ(mean(v), 5.0);
  EXPECT_DOUBLE_EQ(stddev(v), std::sqrt(32.0 / 7.0));
  EXPECT_DOUBLE_EQ(median(v), 4.5);
  EXPECT_DOUBLE_EQ(median({3, 1, 2}), 2.0);
  EXPECT_EQ(stddev({1.0}), 0.0);
  EXPECT_TRUE(std::isnan(mean({})));
}

TEST(Stats, SummarizeByGroupsInFirstSeenOrder) {
  std::vector<Row> rows;
  for (int i = 0; i < 6; ++i) {
    Row r;
    r["method"] = i % 2 ? "merlin" : "finetune";
    r["acc"] = 0.5 + 0.1 * i;
    if (i < 4) r["loss"] = static_cast<double>(i);
    rows.push_back(r);
  }
  const auto s = summarize_by(rows, "method", {"acc", "loss"});
  ASSERT_EQ(s.size(), 2u);
  EXPECT_EQ(s.begin().key(), "finetune");
  EXPECT_NEAR(s["finetune"]["acc"]["mean"].get<double>(), 0.7, 1e-15);
  EXPECT_NEAR(s["merlin"]["acc"]["mean"].get<double>(), 0.8, 1e-15);
  EXPECT_NEAR(s["merlin"]["acc"]["std"].get<double>(), 0.2, 1e-15);
  EXPECT_EQ(s["merlin"]["loss"]["n"].get<int>(), 2);
}
