#include <gtest/gtest.h>

#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <set>

#include "lvfc/dataset.hpp"
#include "lvfc/synthetic.hpp"

using namespace lvfc;

namespace {

std::string temp_path(const std::string& name) {
  return (std::filesystem::temp_directory_path() / ("lvfc_" + name)).string();
}

void write_rows(std::ostream& os, const std::string& meter, Date d, int periods, double base = 0.1) {
  const auto [y, m, dd] = d.ymd();
  for (int h = 1; h <= periods; ++h) {
    char ts[40];
    std::snprintf(ts, sizeof(ts), "%04d-%02d-%02dT%02d:%02d:00", y, m, dd, (h - 1) / 2, (h - 1) % 2 * 30);
    os << meter << ',' << ts << ',' << base + 0.001 * h << '\n';
  }
}

LoadSeries random_series(const std::string& id, Date first, int days, std::uint64_t seed) {
  Rng rng(seed);
  LoadSeries s;
  s.node_id = id;
  std::array<double, kPeriodsPerDay> v{};
  for (int i = 0; i < days; ++i) {
    for (auto& x : v) x = std::round(uniform_open(rng) * 1000.0) / 1000.0;
    s.append_day(first + i, v);
  }
  return s;
}

std::vector<LoadSeries> households(int n, int days = 20) {
  std::vector<LoadSeries> out;
  for (int k = 0; k < n; ++k)
    out.push_back(random_series("H" + std::to_string(1000 + k), Date::from_ymd(2013, 3, 1), days, 100 + k));
  return out;
}

}  // namespace

TEST(Ingest, TwoMetersTwoCompleteDays) {
  const auto path = temp_path("ingest_two.csv");
  {
    std::ofstream os(path);
    os << "meter_id,timestamp,kwh\n";
    for (const char* m : {"A", "B"})
      for (int d = 0; d < 2; ++d) write_rows(os, m, Date::from_ymd(2013, 5, 1) + d, 48);
  }
  const auto r = ingest_csv(path);
  ASSERT_EQ(r.series.size(), 2u);
  for (const auto& s : r.series) EXPECT_EQ(s.energy.size(), 96u);
  EXPECT_TRUE(r.errors.empty());
  std::filesystem::remove(path);
}

TEST(Ingest, IncompleteDayDropped) {
  const auto path = temp_path("ingest_47.csv");
  {
    std::ofstream os(path);
    os << "meter_id,timestamp,kwh\n";
    write_rows(os, "A", Date::from_ymd(2013, 5, 1), 48);
    write_rows(os, "A", Date::from_ymd(2013, 5, 2), 47);
  }
  const auto r = ingest_csv(path);
  ASSERT_EQ(r.series.size(), 1u);
  EXPECT_EQ(r.series[0].num_days(), 1u);
  EXPECT_EQ(r.dropped_days, 1u);
  std::filesystem::remove(path);
}

TEST(Ingest, DuplicateAndBadRowsReported) {
  const auto path = temp_path("ingest_bad.csv");
  {
    std::ofstream os(path);
    os << "meter_id,timestamp,kwh\n";
    write_rows(os, "A", Date::from_ymd(2013, 5, 1), 48);
    os << "A,2013-05-01T00:00:00,0.5\n";
    os << "A,not-a-time,0.5\n";
    os << "A,2013-05-01T00:30:00,-1\n";
  }
  const auto r = ingest_csv(path);
  EXPECT_EQ(r.errors.size(), 3u);
  ASSERT_EQ(r.series.size(), 1u);
  EXPECT_DOUBLE_EQ(r.series[0].at(0, 1), 0.101);  // first reading kept
  std::filesystem::remove(path);
}

TEST(Ingest, EmptyFileIsFatal) {
  const auto path = temp_path("ingest_empty.csv");
  { std::ofstream os(path); }
  EXPECT_THROW(ingest_csv(path), DataError);
  {
    std::ofstream os(path);
    os << "meter_id,timestamp,kwh\n";
  }
  EXPECT_THROW(ingest_csv(path), DataError);
  std::filesystem::remove(path);
}

TEST(Ingest, ConfigurableSchemaAndTariff) {
  const auto path = temp_path("ingest_schema.csv");
  {
    std::ofstream os(path);
    os << "LCLid,stdorToU,DateTime,KWH/hh\n";
    const Date d = Date::from_ymd(2013, 6, 3);
    for (int h = 1; h <= 48; ++h) {
      char ts[40];
      std::snprintf(ts, sizeof(ts), "2013-06-03 %02d:%02d:00.0000000", (h - 1) / 2, (h - 1) % 2 * 30);
      os << "M1,Std," << ts << ",0.2\n";
      os << "M2,ToU," << ts << ",0.3\n";
    }
    (void)d;
  }
  CsvSchema schema;
  schema.meter_id = "LCLid";
  schema.timestamp = "DateTime";
  schema.energy = "KWH/hh";
  schema.tariff = "stdorToU";
  const auto r = ingest_csv(path, schema);
  EXPECT_TRUE(r.errors.empty());
  EXPECT_EQ(r.series.size(), 2u);
  EXPECT_EQ(r.variable_tariff_meters, std::set<std::string>{"M2"});
  std::filesystem::remove(path);
}

TEST(Ingest, TimestampMarkingEndOfInterval) {
  const auto ts = detail::parse_timestamp("2013-05-02T00:00:00", true);
  ASSERT_TRUE(ts);
  EXPECT_EQ(ts->date, Date::from_ymd(2013, 5, 1));
  EXPECT_EQ(ts->period, 48);
  const auto start = detail::parse_timestamp("2013-05-02T23:30:00", false);
  ASSERT_TRUE(start);
  EXPECT_EQ(start->period, 48);
}

TEST(Clean, IncompleteMetersRemovedByConstruction) {
  SyntheticOptions o;
  o.households = 100;
  o.incomplete = 10;
  o.seed = 21;
  const auto all = synthesize_households(o);
  const auto r = clean(all, 2013);
  EXPECT_EQ(r.retained.size(), 90u);
  EXPECT_EQ(r.removed.size(), 10u);
}

TEST(Clean, VariableTariffRemoved) {
  SyntheticOptions o;
  o.households = 3;
  o.seed = 2;
  const auto all = synthesize_households(o);
  CleanOptions co;
  co.variable_tariff_meters = {all[1].node_id};
  const auto r = clean(all, 2013, co);
  ASSERT_EQ(r.retained.size(), 2u);
  EXPECT_EQ(r.removed[0].second, "variable tariff");
}

TEST(Hierarchy, MinimumCaseSingleFeeder) {
  const auto hh = households(16);
  const auto h = synthesize_hierarchy(hh, 1);
  EXPECT_EQ(h.at_level(Level::feeder).size(), 1u);
  EXPECT_EQ(h.at_level(Level::secondary).size(), 1u);
  const auto& ps = h.series.at("ps1");
  const auto& ss = h.series.at(h.at_level(Level::secondary)[0]->id);
  EXPECT_EQ(ps.energy, ss.energy);
}

TEST(Hierarchy, TooFewHouseholdsNamesShortfall) {
  const auto hh = households(12);
  try {
    synthesize_hierarchy(hh, 1);
    FAIL() << "expected DataError";
  } catch (const DataError& e) {
    EXPECT_NE(std::string(e.what()).find("short by 4"), std::string::npos);
  }
}

TEST(Hierarchy, InvariantsAndAggregation) {
  const auto hh = households(742, 3);
  const auto h = synthesize_hierarchy(hh, 99);
  std::set<std::string> seen;
  for (const auto* f : h.at_level(Level::feeder)) {
    EXPECT_GE(f->children.size(), 16u);
    EXPECT_LE(f->children.size(), 45u);
    for (const auto& c : f->children) EXPECT_TRUE(seen.insert(c).second) << c << " assigned twice";
  }
  EXPECT_EQ(seen.size(), 742u);
  for (const auto* s : h.at_level(Level::secondary)) {
    EXPECT_GE(s->children.size(), 4u);
    EXPECT_LE(s->children.size(), 7u);
    EXPECT_EQ(s->parent, "ps1");
  }
  // Every aggregate equals the sum of its children within 1e-9.
  for (const auto& n : h.nodes) {
    if (n.level == Level::household) continue;
    const auto& parent = h.series.at(n.id);
    for (std::size_t i = 0; i < parent.energy.size(); ++i) {
      double sum = 0;
      for (const auto& c : n.children) sum += h.series.at(c).energy[i];
      ASSERT_NEAR(parent.energy[i], sum, 1e-9);
    }
  }
}

TEST(Hierarchy, DeterministicInSeed) {
  const auto hh = households(100, 2);
  const auto a = synthesize_hierarchy(hh, 5).manifest();
  const auto b = synthesize_hierarchy(hh, 5).manifest();
  const auto c = synthesize_hierarchy(hh, 6).manifest();
  EXPECT_EQ(a.dump(), b.dump());
  EXPECT_NE(a.dump(), c.dump());
  EXPECT_EQ(NetworkHierarchy::from_manifest(a).manifest().dump(), a.dump());
}

TEST(Peaks, UniqueMaxAndFlatDay) {
  LoadSeries s;
  s.node_id = "x";
  std::array<double, kPeriodsPerDay> v;
  v.fill(0.2);
  v[35] = 1.5;
  s.append_day(Date::from_ymd(2013, 1, 1), v);
  v.fill(0.3);
  s.append_day(Date::from_ymd(2013, 1, 2), v);
  const auto p = extract_daily_peaks(s);
  EXPECT_EQ(p.peak_period[0], 36);
  EXPECT_DOUBLE_EQ(p.peak[0], 1.5);
  EXPECT_EQ(p.peak_period[1], 1);
  EXPECT_NEAR(p.sd[1], 0.0, 1e-14);
}

TEST(Peaks, MatchesBruteForceScan) {
  const auto s = random_series("r", Date::from_ymd(2013, 2, 1), 200, 77);
  const auto p = extract_daily_peaks(s);
  for (std::size_t i = 0; i < s.num_days(); ++i) {
    double best = -1;
    int arg = 0;
    double sum = 0;
    for (int h = 1; h <= 48; ++h) {
      sum += s.at(i, h);
      if (s.at(i, h) > best) best = s.at(i, h), arg = h;
    }
    double ss = 0;
    for (int h = 1; h <= 48; ++h) ss += std::pow(s.at(i, h) - sum / 48, 2);
    EXPECT_EQ(p.peak[i], best);
    EXPECT_EQ(p.peak_period[i], arg);
    EXPECT_EQ(s.at(i, p.peak_period[i]), p.peak[i]);
    EXPECT_NEAR(p.sd[i], std::sqrt(ss / 47), 1e-12);
  }
}

namespace {

DailyPeakSeries sd_pattern(const std::vector<double>& sd) {
  DailyPeakSeries p;
  for (std::size_t i = 0; i < sd.size(); ++i) {
    p.days.push_back(Date::from_ymd(2013, 1, 1) + static_cast<int>(i));
    p.peak.push_back(1.0);
    p.peak_period.push_back(1);
    p.sd.push_back(sd[i]);
  }
  return p;
}

}  // namespace

TEST(EmptyHouse, LongRunEnablesFeature) {
  std::vector<double> sd(100, 0.3);
  for (int i = 20; i < 60; ++i) sd[i] = 0.001;
  const auto e = detect_empty_house(sd_pattern(sd));
  EXPECT_TRUE(e.enabled);
  EXPECT_EQ(e.total_days, 40);
  for (int i = 0; i < 100; ++i) EXPECT_EQ(e.indicator[i], i >= 20 && i < 60 ? 1 : 0);
}

TEST(EmptyHouse, ShortRunIgnored) {
  std::vector<double> sd(100, 0.3);
  for (int i = 20; i < 25; ++i) sd[i] = 0.001;
  const auto e = detect_empty_house(sd_pattern(sd));
  EXPECT_FALSE(e.enabled);
  EXPECT_EQ(std::count(e.indicator.begin(), e.indicator.end(), 1), 0);
}

TEST(EmptyHouse, TotalBelowMinimumDisables) {
  std::vector<double> sd(100, 0.3);
  for (int i = 20; i < 30; ++i) sd[i] = 0.001;
  const auto e = detect_empty_house(sd_pattern(sd));
  EXPECT_EQ(e.total_days, 10);
  EXPECT_FALSE(e.enabled);
  EXPECT_EQ(std::count(e.indicator.begin(), e.indicator.end(), 1), 0);
}

TEST(Features, LagAlignment) {
  const auto s = random_series("f", Date::from_ymd(2013, 1, 1), 30, 8);
  const auto p = extract_daily_peaks(s);
  const auto f = build_features(s, p);
  const auto lag1 = f.column("lag1"), lag7 = f.column("lag7");
  const auto pk1 = f.column("peak_lag1"), sd1 = f.column("sd_lag1");
  // Day 8 (index 7) sees days 7 and 1.
  const std::size_t r = f.find(Date::from_ymd(2013, 1, 8), 20);
  ASSERT_NE(r, FeatureFrame::npos);
  EXPECT_TRUE(f.available[r]);
  EXPECT_EQ(lag1[r], s.at(6, 20));
  EXPECT_EQ(lag7[r], s.at(0, 20));
  EXPECT_EQ(pk1[r], p.peak[6]);
  EXPECT_EQ(sd1[r], p.sd[6]);
  // Day 3 has no lag-7 day.
  const std::size_t r3 = f.find(Date::from_ymd(2013, 1, 3), 5);
  EXPECT_FALSE(f.available[r3]);
  EXPECT_TRUE(std::isnan(lag7[r3]));
  EXPECT_FALSE(std::isnan(lag1[r3]));
}

TEST(Features, RandomRowsMatchDirectIndexing) {
  const auto s = random_series("g", Date::from_ymd(2013, 4, 1), 60, 9);
  const auto p = extract_daily_peaks(s);
  const auto f = build_features(s, p);
  Rng rng(4);
  for (int k = 0; k < 20; ++k) {
    const auto i = 7 + uniform_index(rng, 53);
    const int h = 1 + static_cast<int>(uniform_index(rng, 48));
    const std::size_t r = i * 48 + static_cast<std::size_t>(h - 1);
    EXPECT_EQ(f.dates[r], s.days[i]);
    EXPECT_EQ(f.periods[r], h);
    EXPECT_EQ(f.column("y")[r], s.at(i, h));
    EXPECT_EQ(f.column("lag1")[r], s.at(i - 1, h));
    EXPECT_EQ(f.column("lag7")[r], s.at(i - 7, h));
    EXPECT_EQ(f.column("peak_lag7")[r], p.peak[i - 7]);
    EXPECT_EQ(f.column("doy")[r], s.days[i].day_of_year());
  }
}

TEST(Features, OneDayTypePerEncoding) {
  for (int i = 0; i < 14; ++i) {
    const Date d = Date::from_ymd(2013, 7, 1) + i;
    const int t3 = day_type3(d), t2 = day_type2(d);
    EXPECT_TRUE(t3 >= 0 && t3 <= 2);
    EXPECT_EQ(t2, t3 == 0 ? 0 : 1);
  }
  EXPECT_EQ(Date::from_ymd(2013, 7, 1).weekday(), 0);  // a Monday
}

TEST(Features, GapDaysMarkUnavailable) {
  auto s = random_series("h", Date::from_ymd(2013, 1, 1), 10, 3);
  LoadSeries gappy;
  gappy.node_id = "h";
  for (std::size_t i = 0; i < s.num_days(); ++i)
    if (i != 4) gappy.append_day(s.days[i], s.day_values(i));
  const auto f = build_features(gappy, extract_daily_peaks(gappy));
  for (std::size_t r = 0; r < f.rows(); ++r) {
    const int day = f.dates[r] - Date::from_ymd(2013, 1, 1);
    if (day == 5 || day == 11) EXPECT_FALSE(f.available[r]);
  }
}

TEST(Features, CausalityAuditClean) {
  SyntheticOptions o;
  o.households = 1;
  o.seed = 4;
  auto s = synthesize_households(o)[0].truncated_before(Date::from_ymd(2013, 3, 1));
  const auto p = extract_daily_peaks(s);
  EXPECT_EQ(audit_causality(s, build_features(s, p)), 0u);
  EXPECT_EQ(audit_causality(s, build_daily_features(p)), 0u);
}

TEST(Features, CausalityAuditCatchesLeak) {
  auto s = random_series("leak", Date::from_ymd(2013, 1, 1), 20, 1);
  const auto p = extract_daily_peaks(s);
  auto f = build_features(s, p);
  // Overwrite a lag with the target-day value.
  auto& lag1 = f.mutable_column("lag1");
  const auto y = f.column("y");
  lag1[10 * 48 + 3] = y[10 * 48 + 3];
  EXPECT_EQ(audit_causality(s, f), 1u);
}

TEST(Partition, BlockSizesFollowRemainderRule) {
  const auto p = partition(Date::from_ymd(2013, 1, 1), Date::from_ymd(2013, 12, 31));
  auto sizes = [&](int month) {
    std::vector<int> out;
    for (const auto& b : p.blocks)
      if (b.month == month) out.push_back(b.last - b.first + 1);
    return out;
  };
  EXPECT_EQ(sizes(4), (std::vector<int>{10, 10, 10}));
  EXPECT_EQ(sizes(1), (std::vector<int>{11, 10, 10}));
  EXPECT_EQ(sizes(2), (std::vector<int>{10, 9, 9}));
}

TEST(Partition, DisjointAndCovering) {
  const Date first = Date::from_ymd(2013, 1, 1), last = Date::from_ymd(2013, 12, 31);
  const auto p = partition(first, last);
  int train = 0, test = 0;
  for (Date d = first; d <= last; d = d + 1) {
    const Role r = p.role(d);
    ASSERT_NE(r, Role::outside);
    if (r == Role::test) {
      ++test;
      EXPECT_EQ(p.fold_of(d), -1);
    } else {
      ++train;
      const int k = p.fold_of(d);
      EXPECT_TRUE(k == 0 || k == 1);
    }
  }
  EXPECT_EQ(train + test, 365);
  for (std::size_t i = 1; i < p.blocks.size(); ++i) EXPECT_EQ(p.blocks[i].first, p.blocks[i - 1].last + 1);
  EXPECT_EQ(DataPartition::from_json(p.to_json()).to_json(), p.to_json());
}

TEST(SeriesIo, RoundTrip) {
  const auto s = random_series("io", Date::from_ymd(2013, 1, 1), 5, 2);
  std::stringstream ss;
  write_series_csv(ss, s);
  const auto back = read_series_csv(ss);
  EXPECT_EQ(back.days, s.days);
  EXPECT_EQ(back.energy, s.energy);
}
