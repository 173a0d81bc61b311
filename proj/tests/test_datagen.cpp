#include <gtest/gtest.h>

#include <fstream>
#include <sstream>

#include "pscdet/csv.hpp"
#include "pscdet/datagen.hpp"
#include "testutil.hpp"

using namespace pscdet;

namespace {

GenSpec small_spec() {
  GenSpec s;
  s.n_total = 1000;
  s.detention_rate = 0.05;
  s.separability = 1.0;
  s.seed = 99;
  return s;
}

std::string file_bytes(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  std::stringstream ss;
  ss << f.rdbuf();
  return ss.str();
}

}  // namespace

TEST(Generate, DetainedCountIsExact) {
  auto records = generate_dataset(small_spec());
  ASSERT_EQ(records.size(), 1000u);
  std::size_t det = 0;
  for (const auto& r : records) det += r.detained ? 1 : 0;
  EXPECT_EQ(det, 50u);
}

TEST(Generate, RecordsSatisfySchemaInvariants) {
  auto records = generate_dataset(small_spec());
  for (const auto& r : records) {
    EXPECT_TRUE(validate_record(r).empty()) << r.id;
  }
}

TEST(Generate, SameSpecGivesIdenticalCsvBytes) {
  testutil::TempDir dir("datagen");
  auto a = generate_dataset(small_spec());
  auto b = generate_dataset(small_spec());
  write_csv(a, dir.file("a.csv"));
  write_csv(b, dir.file("b.csv"));
  EXPECT_EQ(file_bytes(dir.file("a.csv")), file_bytes(dir.file("b.csv")));
}

TEST(Generate, SplitFractionsAreHonored) {
  GenSpec s = small_spec();
  s.n_total = 2000;
  auto records = generate_dataset(s);
  std::size_t counts[4] = {0, 0, 0, 0};
  for (const auto& r : records) counts[static_cast<int>(r.split)]++;
  EXPECT_EQ(counts[0], 1400u);
  EXPECT_EQ(counts[1], 200u);
  EXPECT_EQ(counts[2], 200u);
  EXPECT_EQ(counts[3], 200u);
}

TEST(Generate, InvalidSpecNamesField) {
  GenSpec s = small_spec();
  s.detention_rate = 0.0;
  try {
    generate_dataset(s);
    FAIL() << "expected DataError";
  } catch (const DataError& e) {
    EXPECT_NE(std::string(e.what()).find("detention_rate"), std::string::npos);
  }
}

// With zero separability the class-conditional means must be statistically
// indistinguishable. Oracle: two-sample comparison of prob_def_36m with a
// three-standard-error budget over 10k samples.
TEST(Generate, ZeroSeparabilityLeavesClassesAligned) {
  GenSpec s;
  s.n_total = 10000;
  s.detention_rate = 0.3;
  s.separability = 0.0;
  s.seed = 1234;
  auto records = generate_dataset(s);
  double sum[2] = {0, 0}, sumsq[2] = {0, 0};
  std::size_t n[2] = {0, 0};
  for (const auto& r : records) {
    const int k = r.detained ? 1 : 0;
    sum[k] += r.prob_def_36m;
    sumsq[k] += r.prob_def_36m * r.prob_def_36m;
    n[k]++;
  }
  const double m0 = sum[0] / n[0], m1 = sum[1] / n[1];
  const double v0 = sumsq[0] / n[0] - m0 * m0;
  const double v1 = sumsq[1] / n[1] - m1 * m1;
  const double se = std::sqrt(v0 / n[0] + v1 / n[1]);
  EXPECT_LT(std::fabs(m1 - m0), 3.0 * se);
}

TEST(Generate, SeparabilityShiftsHistoryAttributesOnly) {
  GenSpec s = small_spec();
  s.n_total = 20000;
  s.separability = 2.0;
  auto records = generate_dataset(s);
  double det_prob = 0, reg_prob = 0, det_age = 0, reg_age = 0;
  std::size_t n_det = 0, n_reg = 0;
  for (const auto& r : records) {
    if (r.detained) {
      det_prob += r.prob_def_36m;
      det_age += r.ship_age;
      ++n_det;
    } else {
      reg_prob += r.prob_def_36m;
      reg_age += r.ship_age;
      ++n_reg;
    }
  }
  EXPECT_GT(det_prob / n_det - reg_prob / n_reg, 0.15);  // shifted attribute
  EXPECT_NEAR(det_age / n_det, reg_age / n_reg, 1.5);    // distractor
}

TEST(Downsample, HalfRateKeepsEqualCounts) {
  GenSpec s;
  s.n_total = 2000;
  s.detention_rate = 0.05;
  s.separability = 0.0;
  s.seed = 5;
  auto records = generate_dataset(s);  // 100 detained, 1900 regular
  auto out = downsample_regular(records, 0.50, 1);
  std::size_t det = 0, reg = 0;
  for (const auto& r : out) (r.detained ? det : reg)++;
  EXPECT_EQ(det, 100u);
  EXPECT_EQ(reg, 100u);
}

TEST(Downsample, PaperScheduleCounts) {
  GenSpec s;
  s.n_total = 6000;
  s.detention_rate = 100.0 / 6000.0;
  s.separability = 0.0;
  s.seed = 6;
  auto records = generate_dataset(s);  // 100 detained, 5900 regular
  {
    auto out = downsample_regular(records, 0.0558, 2);
    std::size_t reg = 0;
    for (const auto& r : out) reg += r.detained ? 0 : 1;
    EXPECT_EQ(reg, 1692u);  // round(100 * 0.9442 / 0.0558)
  }
  {
    auto out = downsample_regular(records, 0.0179, 2);
    std::size_t reg = 0;
    for (const auto& r : out) reg += r.detained ? 0 : 1;
    EXPECT_EQ(reg, 5487u);  // round(100 * 0.9821 / 0.0179)
  }
}

TEST(Downsample, InsufficientRegularsIsError) {
  GenSpec s;
  s.n_total = 300;
  s.detention_rate = 1.0 / 3.0;
  s.separability = 0.0;
  s.seed = 7;
  auto records = generate_dataset(s);  // 100 detained, 200 regular
  try {
    downsample_regular(records, 0.05, 1);
    FAIL() << "expected DataError";
  } catch (const DataError& e) {
    EXPECT_NE(std::string(e.what()).find("insufficient regular samples"),
              std::string::npos);
  }
}

TEST(Downsample, ExactFractionProperty) {
  GenSpec s;
  s.n_total = 3000;
  s.detention_rate = 0.04;
  s.separability = 0.5;
  s.seed = 8;
  auto records = generate_dataset(s);
  for (double rho : {0.0558, 0.1237, 0.2437, 0.3675, 0.5}) {
    auto out = downsample_regular(records, rho, 3);
    std::size_t det = 0, reg = 0;
    for (const auto& r : out) (r.detained ? det : reg)++;
    const std::size_t expected_reg = static_cast<std::size_t>(
        std::llround(static_cast<double>(det) * (1.0 - rho) / rho));
    EXPECT_EQ(det, 120u);
    EXPECT_EQ(reg, expected_reg);
  }
}

TEST(Downsample, DeterministicUnderSeed) {
  auto records = generate_dataset(small_spec());
  auto a = downsample_regular(records, 0.2, 42);
  auto b = downsample_regular(records, 0.2, 42);
  auto c = downsample_regular(records, 0.2, 43);
  EXPECT_EQ(a, b);
  EXPECT_NE(a, c);
}

TEST(Csv, HeaderOnlyLoadsEmpty) {
  testutil::TempDir dir("csv");
  {
    std::ofstream f(dir.file("empty.csv"), std::ios::binary);
    f << csv_header() << "\n";
  }
  EXPECT_TRUE(load_csv(dir.file("empty.csv")).empty());
}

TEST(Csv, RoundTripsGeneratedRecords) {
  testutil::TempDir dir("csv");
  auto records = generate_dataset(small_spec());
  write_csv(records, dir.file("r.csv"));
  auto loaded = load_csv(dir.file("r.csv"));
  EXPECT_EQ(records, loaded);
}

TEST(Csv, BadDetainedValueNamesLineAndColumn) {
  testutil::TempDir dir("csv");
  {
    std::ofstream f(dir.file("bad.csv"), std::ios::binary);
    f << csv_header() << "\n";
    f << "a1,0,0,0,0,0,0,0,0,0,0,0,0,0,0,0,train\n";
    f << "a2,0,0,0,0,0,0,0,0,0,0,0,0,0,0,2,train\n";
  }
  try {
    load_csv(dir.file("bad.csv"));
    FAIL() << "expected DataError";
  } catch (const DataError& e) {
    const std::string msg = e.what();
    EXPECT_NE(msg.find("line 3"), std::string::npos);
    EXPECT_NE(msg.find("detained"), std::string::npos);
  }
}

TEST(Csv, BadNumberNamesColumn) {
  testutil::TempDir dir("csv");
  {
    std::ofstream f(dir.file("bad.csv"), std::ios::binary);
    f << csv_header() << "\n";
    f << "a1,xyz,0,0,0,0,0,0,0,0,0,0,0,0,0,0,train\n";
  }
  try {
    load_csv(dir.file("bad.csv"));
    FAIL() << "expected DataError";
  } catch (const DataError& e) {
    EXPECT_NE(std::string(e.what()).find("ship_tonnage"), std::string::npos);
  }
}

TEST(Csv, WrongHeaderIsRejected) {
  testutil::TempDir dir("csv");
  {
    std::ofstream f(dir.file("bad.csv"), std::ios::binary);
    f << "id,foo\n";
  }
  EXPECT_THROW(load_csv(dir.file("bad.csv")), DataError);
}

TEST(GenSpecJson, ParsesAndValidates) {
  nlohmann::json j = {
      {"n_total", 500},
      {"detention_rate", 0.1},
      {"separability", 1.5},
      {"seed", 3},
      {"split_fractions",
       {{"train", 0.6}, {"val", 0.2}, {"test_global", 0.1}, {"test_regional", 0.1}}}};
  GenSpec s = gen_spec_from_json(j);
  EXPECT_EQ(s.n_total, 500u);
  EXPECT_DOUBLE_EQ(s.split_fractions.val, 0.2);

  j["detention_rate"] = 1.5;
  EXPECT_THROW(gen_spec_from_json(j), DataError);
}
