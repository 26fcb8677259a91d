#pragma once

// Smart-meter ingestion, cleaning, hierarchy synthesis, peak extraction,
// feature construction and month-block partitioning.

#include <algorithm>
#include <array>
#include <cmath>
#include <fstream>
#include <map>
#include <numeric>
#include <optional>
#include <set>
#include <span>
#include <sstream>
#include <string>
#include <vector>

#include "json.hpp"
#include "lvfc/calendar.hpp"
#include "lvfc/common.hpp"
#include "lvfc/frame.hpp"

namespace lvfc {

// ---------------------------------------------------------------------------
// LoadSeries

//! Half-hourly energy for one node. Only complete 48-period days are stored,
//! in ascending date order; energy is row-major (day, period).
struct LoadSeries {
  std::string node_id;
  std::vector<Date> days;
  std::vector<double> energy;

  std::size_t num_days() const { return days.size(); }

  //! Energy of period h (1..48) on the i-th stored day.
  double at(std::size_t day_index, int period) const {
    return energy[day_index * kPeriodsPerDay + static_cast<std::size_t>(period - 1)];
  }

  std::span<const double> day_values(std::size_t day_index) const {
    return {energy.data() + day_index * kPeriodsPerDay, kPeriodsPerDay};
  }

  std::optional<std::size_t> index_of(Date d) const {
    auto it = std::lower_bound(days.begin(), days.end(), d);
    if (it == days.end() || *it != d) return std::nullopt;
    return static_cast<std::size_t>(it - days.begin());
  }

  void append_day(Date d, std::span<const double> values) {
    if (values.size() != kPeriodsPerDay) throw DataError("append_day: need 48 values");
    if (!days.empty() && d <= days.back()) throw DataError("append_day: days must ascend");
    days.push_back(d);
    energy.insert(energy.end(), values.begin(), values.end());
  }

  //! Copy restricted to days strictly before `cutoff`.
  LoadSeries truncated_before(Date cutoff) const {
    LoadSeries out;
    out.node_id = node_id;
    for (std::size_t i = 0; i < days.size() && days[i] < cutoff; ++i) out.append_day(days[i], day_values(i));
    return out;
  }
};

// ---------------------------------------------------------------------------
// ingestion

//! Maps the CSV header names onto the roles the reader needs.
struct CsvSchema {
  std::string meter_id = "meter_id";
  std::string timestamp = "timestamp";
  std::string energy = "kwh";
  std::string tariff;  // optional
  std::vector<std::string> variable_tariff_values = {"ToU"};
  //! "start": the timestamp opens its half-hour; "end": it closes it.
  std::string timestamp_marks = "start";
  bool drop_dst_days = true;
};

struct RowError {
  std::size_t line = 0;
  std::string message;
};

struct IngestResult {
  std::vector<LoadSeries> series;
  std::vector<RowError> errors;
  std::set<std::string> variable_tariff_meters;
  std::size_t dropped_days = 0;
};

namespace detail {

struct Timestamp {
  Date date;
  int period = 0;
};

inline std::optional<Timestamp> parse_timestamp(std::string_view s, bool marks_end) {
  s = trim(s);
  if (s.size() < 16 || (s[10] != 'T' && s[10] != ' ')) return std::nullopt;
  Date d;
  try {
    d = Date::parse(s.substr(0, 10));
  } catch (const std::invalid_argument&) {
    return std::nullopt;
  }
  long long hh = 0, mm = 0;
  if (s[13] != ':' || !parse_int(s.substr(11, 2), hh) || !parse_int(s.substr(14, 2), mm))
    return std::nullopt;
  std::string_view rest = s.substr(16);
  if (!rest.empty() && rest.front() == ':') {
    long long ss = 0;
    if (rest.size() < 3 || !parse_int(rest.substr(1, 2), ss) || ss != 0) return std::nullopt;
    rest.remove_prefix(3);
    if (!rest.empty() && rest.front() == '.') {
      rest.remove_prefix(1);
      while (!rest.empty() && rest.front() == '0') rest.remove_prefix(1);
    }
  }
  if (!rest.empty() && (rest == "Z" || rest == "+00:00")) rest = {};
  if (!rest.empty()) return std::nullopt;
  if (hh < 0 || hh > 23 || (mm != 0 && mm != 30)) return std::nullopt;
  int slot = static_cast<int>(hh * 2 + mm / 30);  // 0..47
  if (marks_end) {
    if (slot == 0) {
      d = d - 1;
      slot = kPeriodsPerDay;
    }
    return Timestamp{d, slot};
  }
  return Timestamp{d, slot + 1};
}

}  // namespace detail

//! Reads long-format smart-meter CSV. Bad rows are reported, not fatal; days
//! that do not have all 48 periods are dropped per meter.
inline IngestResult ingest_csv(const std::string& path, const CsvSchema& schema = {}) {
  std::ifstream in(path);
  if (!in) throw DataError("cannot open '" + path + "'");
  std::string line;
  if (!std::getline(in, line) || trim(line).empty()) throw DataError("'" + path + "' is empty");
  const auto header = split_csv_line(line);
  auto col = [&](const std::string& name, bool required) -> int {
    for (std::size_t i = 0; i < header.size(); ++i)
      if (trim(header[i]) == trim(name)) return static_cast<int>(i);
    if (required) throw DataError("'" + path + "' has no column '" + name + "'");
    return -1;
  };
  const int c_meter = col(schema.meter_id, true);
  const int c_time = col(schema.timestamp, true);
  const int c_energy = col(schema.energy, true);
  const int c_tariff = schema.tariff.empty() ? -1 : col(schema.tariff, true);
  const bool marks_end = schema.timestamp_marks == "end";

  IngestResult result;
  // meter -> day -> 48 slots (NaN = missing)
  std::map<std::string, std::map<int, std::array<double, kPeriodsPerDay>>> raw;
  std::size_t lineno = 1, data_rows = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (trim(line).empty()) continue;
    ++data_rows;
    const auto f = split_csv_line(line);
    const int need = std::max({c_meter, c_time, c_energy, c_tariff});
    if (static_cast<int>(f.size()) <= need) {
      result.errors.push_back({lineno, "too few fields"});
      continue;
    }
    const std::string meter(trim(f[static_cast<std::size_t>(c_meter)]));
    if (meter.empty()) {
      result.errors.push_back({lineno, "empty meter id"});
      continue;
    }
    auto ts = detail::parse_timestamp(f[static_cast<std::size_t>(c_time)], marks_end);
    if (!ts) {
      result.errors.push_back({lineno, "unparseable timestamp '" + f[static_cast<std::size_t>(c_time)] + "'"});
      continue;
    }
    double e = 0.0;
    if (!parse_double(f[static_cast<std::size_t>(c_energy)], e) || !std::isfinite(e) || e < 0.0) {
      result.errors.push_back({lineno, "invalid energy '" + f[static_cast<std::size_t>(c_energy)] + "'"});
      continue;
    }
    if (c_tariff >= 0) {
      const std::string t(trim(f[static_cast<std::size_t>(c_tariff)]));
      for (const auto& v : schema.variable_tariff_values)
        if (t == v) result.variable_tariff_meters.insert(meter);
    }
    auto& days = raw[meter];
    auto [it, inserted] = days.try_emplace(ts->date.days());
    if (inserted) it->second.fill(kNaN);
    double& slot = it->second[static_cast<std::size_t>(ts->period - 1)];
    if (!std::isnan(slot)) {
      result.errors.push_back({lineno, "duplicate reading for " + meter + " at " + ts->date.iso() +
                                           " period " + std::to_string(ts->period)});
      continue;
    }
    slot = e;
  }
  if (data_rows == 0) throw DataError("'" + path + "' has a header but no data rows");

  for (auto& [meter, days] : raw) {
    LoadSeries s;
    s.node_id = meter;
    for (auto& [day, values] : days) {
      const Date d = Date::from_days(day);
      const bool complete =
          std::none_of(values.begin(), values.end(), [](double v) { return std::isnan(v); });
      if (!complete || (schema.drop_dst_days && is_dst_transition(d))) {
        ++result.dropped_days;
        continue;
      }
      s.append_day(d, values);
    }
    result.series.push_back(std::move(s));
  }
  return result;
}

// ---------------------------------------------------------------------------
// cleaning

struct CleanOptions {
  bool drop_dst_days = true;
  std::set<std::string> variable_tariff_meters;
};

struct CleanResult {
  std::vector<LoadSeries> retained;
  std::vector<std::pair<std::string, std::string>> removed;  // (meter, reason)
};

//! Days of `year` a complete meter must cover.
inline std::vector<Date> expected_days(int year, bool drop_dst_days) {
  std::vector<Date> out;
  for (Date d = Date::from_ymd(year, 1, 1); d.year() == year; d = d + 1)
    if (!(drop_dst_days && is_dst_transition(d))) out.push_back(d);
  return out;
}

//! Keeps meters with a complete record over `year` (trimmed to that year) and
//! removes variable-tariff meters.
inline CleanResult clean(const std::vector<LoadSeries>& series, int year, const CleanOptions& opts = {}) {
  const auto want = expected_days(year, opts.drop_dst_days);
  CleanResult out;
  for (const auto& s : series) {
    if (opts.variable_tariff_meters.count(s.node_id)) {
      out.removed.emplace_back(s.node_id, "variable tariff");
      continue;
    }
    LoadSeries kept;
    kept.node_id = s.node_id;
    std::size_t missing = 0;
    for (Date d : want) {
      auto idx = s.index_of(d);
      if (!idx) {
        ++missing;
        continue;
      }
      kept.append_day(d, s.day_values(*idx));
    }
    if (missing > 0) {
      out.removed.emplace_back(s.node_id, "incomplete: " + std::to_string(missing) + " day(s) missing in " +
                                              std::to_string(year));
      continue;
    }
    out.retained.push_back(std::move(kept));
  }
  return out;
}

// ---------------------------------------------------------------------------
// hierarchy

enum class Level { primary, secondary, feeder, household };

inline std::string to_string(Level l) {
  switch (l) {
    case Level::primary: return "primary";
    case Level::secondary: return "secondary";
    case Level::feeder: return "feeder";
    case Level::household: return "household";
  }
  return "?";
}

inline Level level_from_string(std::string_view s) {
  if (s == "primary") return Level::primary;
  if (s == "secondary") return Level::secondary;
  if (s == "feeder") return Level::feeder;
  if (s == "household") return Level::household;
  throw std::invalid_argument("unknown level '" + std::string(s) + "'");
}

inline bool is_aggregated(Level l) { return l != Level::household; }

struct HierarchyLimits {
  int feeders_min = 4;
  int feeders_max = 7;
  int households_min = 16;
  int households_max = 45;
};

struct HierarchyNode {
  std::string id;
  Level level = Level::household;
  std::string parent;
  std::vector<std::string> children;
  std::vector<std::string> members;  // households below (itself for a household)
};

struct NetworkHierarchy {
  std::uint64_t seed = 0;
  HierarchyLimits limits;
  std::vector<HierarchyNode> nodes;  // primary, secondaries, feeders, households
  std::map<std::string, LoadSeries> series;

  const HierarchyNode& node(const std::string& id) const {
    for (const auto& n : nodes)
      if (n.id == id) return n;
    throw DataError("no node '" + id + "' in hierarchy");
  }

  std::vector<const HierarchyNode*> at_level(Level l) const {
    std::vector<const HierarchyNode*> out;
    for (const auto& n : nodes)
      if (n.level == l) out.push_back(&n);
    return out;
  }

  nlohmann::json manifest() const {
    nlohmann::json j;
    j["format"] = "lvfc-hierarchy";
    j["version"] = 1;
    j["seed"] = seed;
    j["limits"] = {{"feeders_per_secondary", {limits.feeders_min, limits.feeders_max}},
                   {"households_per_feeder", {limits.households_min, limits.households_max}}};
    auto& arr = j["nodes"] = nlohmann::json::array();
    for (const auto& n : nodes) {
      arr.push_back({{"id", n.id},
                     {"level", to_string(n.level)},
                     {"parent", n.parent},
                     {"children", n.children},
                     {"members", n.members}});
    }
    return j;
  }

  //! Rebuilds topology from a manifest; series must be attached separately.
  static NetworkHierarchy from_manifest(const nlohmann::json& j) {
    if (j.value("format", "") != "lvfc-hierarchy") throw DataError("not a hierarchy manifest");
    NetworkHierarchy h;
    h.seed = j.at("seed").get<std::uint64_t>();
    h.limits.feeders_min = j.at("limits").at("feeders_per_secondary")[0];
    h.limits.feeders_max = j.at("limits").at("feeders_per_secondary")[1];
    h.limits.households_min = j.at("limits").at("households_per_feeder")[0];
    h.limits.households_max = j.at("limits").at("households_per_feeder")[1];
    for (const auto& n : j.at("nodes")) {
      HierarchyNode node;
      node.id = n.at("id");
      node.level = level_from_string(n.at("level").get<std::string>());
      node.parent = n.at("parent");
      node.children = n.at("children").get<std::vector<std::string>>();
      node.members = n.at("members").get<std::vector<std::string>>();
      h.nodes.push_back(std::move(node));
    }
    return h;
  }
};

namespace detail {

//! Can `total` be written as a sum of parts each within [lo, hi]?
inline bool splittable(int total, int lo, int hi) {
  if (total == 0) return true;
  for (int k = 1; k * lo <= total; ++k)
    if (total <= k * hi) return true;
  return false;
}

//! Random composition of `total` into parts within [lo, hi].
inline std::vector<int> random_partition(int total, int lo, int hi, Rng& rng) {
  std::vector<int> parts;
  while (total > 0) {
    std::vector<int> options;
    for (int s = lo; s <= std::min(hi, total); ++s)
      if (splittable(total - s, lo, hi)) options.push_back(s);
    if (options.empty()) throw DataError("cannot partition " + std::to_string(total) + " items");
    const int s = options[uniform_index(rng, options.size())];
    parts.push_back(s);
    total -= s;
  }
  return parts;
}

inline LoadSeries sum_series(const std::string& id, const std::vector<const LoadSeries*>& members) {
  LoadSeries out;
  out.node_id = id;
  if (members.empty()) return out;
  // Only days every member has.
  for (std::size_t i = 0; i < members[0]->days.size(); ++i) {
    const Date d = members[0]->days[i];
    std::array<double, kPeriodsPerDay> acc{};
    bool ok = true;
    for (const auto* m : members) {
      auto idx = m->index_of(d);
      if (!idx) {
        ok = false;
        break;
      }
      auto v = m->day_values(*idx);
      for (int h = 0; h < kPeriodsPerDay; ++h) acc[static_cast<std::size_t>(h)] += v[static_cast<std::size_t>(h)];
    }
    if (ok) out.append_day(d, acc);
  }
  return out;
}

}  // namespace detail

//! Samples households without replacement into feeders, feeders into
//! secondaries, and sums the loads up the tree. Deterministic in `seed`.
inline NetworkHierarchy synthesize_hierarchy(const std::vector<LoadSeries>& households, std::uint64_t seed,
                                             const HierarchyLimits& limits = {}) {
  const int n = static_cast<int>(households.size());
  if (limits.households_min < 1 || limits.households_max < limits.households_min ||
      limits.feeders_min < 1 || limits.feeders_max < limits.feeders_min)
    throw DataError("invalid hierarchy limits");
  if (n < limits.households_min)
    throw DataError("need at least " + std::to_string(limits.households_min) +
                    " households to form a feeder, have " + std::to_string(n) + " (short by " +
                    std::to_string(limits.households_min - n) + ")");
  if (!detail::splittable(n, limits.households_min, limits.households_max))
    throw DataError(std::to_string(n) + " households cannot be split into feeders of " +
                    std::to_string(limits.households_min) + "-" + std::to_string(limits.households_max));
  {
    std::set<std::string> ids;
    for (const auto& h : households)
      if (!ids.insert(h.node_id).second) throw DataError("duplicate household id '" + h.node_id + "'");
  }

  Rng rng(seed);
  std::vector<std::size_t> order(households.size());
  std::iota(order.begin(), order.end(), 0);
  deterministic_shuffle(order.begin(), order.end(), rng);

  const auto feeder_sizes = detail::random_partition(n, limits.households_min, limits.households_max, rng);
  const int num_feeders = static_cast<int>(feeder_sizes.size());
  std::vector<int> ss_sizes;
  if (detail::splittable(num_feeders, limits.feeders_min, limits.feeders_max))
    ss_sizes = detail::random_partition(num_feeders, limits.feeders_min, limits.feeders_max, rng);
  else if (num_feeders < limits.feeders_min)
    ss_sizes = {num_feeders};  // too few feeders: a single secondary takes them all
  else
    throw DataError(std::to_string(num_feeders) + " feeders cannot be grouped into secondaries of " +
                    std::to_string(limits.feeders_min) + "-" + std::to_string(limits.feeders_max));

  NetworkHierarchy h;
  h.seed = seed;
  h.limits = limits;
  HierarchyNode primary{"ps1", Level::primary, "", {}, {}};
  std::vector<HierarchyNode> secondaries, feeders, leaves;
  std::size_t next_hh = 0;
  int next_feeder = 0;
  for (std::size_t s = 0; s < ss_sizes.size(); ++s) {
    HierarchyNode ss{"ss" + std::to_string(s + 1), Level::secondary, primary.id, {}, {}};
    for (int f = 0; f < ss_sizes[s]; ++f, ++next_feeder) {
      HierarchyNode fdr{ss.id + "_fdr" + std::to_string(f + 1), Level::feeder, ss.id, {}, {}};
      for (int k = 0; k < feeder_sizes[static_cast<std::size_t>(next_feeder)]; ++k, ++next_hh) {
        const auto& hh = households[order[next_hh]];
        fdr.children.push_back(hh.node_id);
        fdr.members.push_back(hh.node_id);
        leaves.push_back({hh.node_id, Level::household, fdr.id, {}, {hh.node_id}});
      }
      ss.children.push_back(fdr.id);
      ss.members.insert(ss.members.end(), fdr.members.begin(), fdr.members.end());
      feeders.push_back(std::move(fdr));
    }
    primary.children.push_back(ss.id);
    primary.members.insert(primary.members.end(), ss.members.begin(), ss.members.end());
    secondaries.push_back(std::move(ss));
  }
  h.nodes.push_back(std::move(primary));
  for (auto* group : {&secondaries, &feeders, &leaves})
    for (auto& node : *group) h.nodes.push_back(std::move(node));

  std::map<std::string, const LoadSeries*> by_id;
  for (const auto& s : households) by_id[s.node_id] = &s;
  for (const auto& node : h.nodes) {
    if (node.level == Level::household) {
      h.series[node.id] = *by_id.at(node.id);
      continue;
    }
    std::vector<const LoadSeries*> members;
    for (const auto& m : node.members) members.push_back(by_id.at(m));
    h.series[node.id] = detail::sum_series(node.id, members);
  }
  return h;
}

// ---------------------------------------------------------------------------
// daily peaks

struct DailyPeakSeries {
  std::string node_id;
  std::vector<Date> days;
  std::vector<double> peak;       // kWh
  std::vector<int> peak_period;   // 1..48
  std::vector<double> sd;         // sample std of the 48 values

  std::size_t size() const { return days.size(); }

  std::optional<std::size_t> index_of(Date d) const {
    auto it = std::lower_bound(days.begin(), days.end(), d);
    if (it == days.end() || *it != d) return std::nullopt;
    return static_cast<std::size_t>(it - days.begin());
  }
};

//! Per-day max, first-occurrence argmax and standard deviation.
inline DailyPeakSeries extract_daily_peaks(const LoadSeries& series) {
  DailyPeakSeries out;
  out.node_id = series.node_id;
  for (std::size_t i = 0; i < series.num_days(); ++i) {
    const auto v = series.day_values(i);
    const auto it = std::max_element(v.begin(), v.end());  // first maximum
    const double mean = std::accumulate(v.begin(), v.end(), 0.0) / kPeriodsPerDay;
    double ss = 0.0;
    for (double x : v) ss += (x - mean) * (x - mean);
    out.days.push_back(series.days[i]);
    out.peak.push_back(*it);
    out.peak_period.push_back(static_cast<int>(it - v.begin()) + 1);
    out.sd.push_back(std::sqrt(ss / (kPeriodsPerDay - 1)));
  }
  return out;
}

// ---------------------------------------------------------------------------
// empty-house feature

struct EmptyHouseOptions {
  double eps = 0.01;  // kWh
  int min_run = 7;
  int min_total = 30;
};

struct EmptyHouse {
  std::vector<int> indicator;  // aligned with DailyPeakSeries::days
  bool enabled = false;
  int total_days = 0;          // days inside qualifying runs
};

//! Marks days inside runs of at least `min_run` consecutive retained days
//! with daily std below eps. The feature is enabled only when such days add
//! up to at least `min_total`; otherwise the indicator is all zero.
inline EmptyHouse detect_empty_house(const DailyPeakSeries& peaks, const EmptyHouseOptions& opts = {}) {
  EmptyHouse out;
  const std::size_t n = peaks.size();
  out.indicator.assign(n, 0);
  std::size_t i = 0;
  while (i < n) {
    if (!(peaks.sd[i] < opts.eps)) {
      ++i;
      continue;
    }
    std::size_t j = i;
    while (j < n && peaks.sd[j] < opts.eps) ++j;
    if (static_cast<int>(j - i) >= opts.min_run) {
      for (std::size_t k = i; k < j; ++k) out.indicator[k] = 1;
      out.total_days += static_cast<int>(j - i);
    }
    i = j;
  }
  out.enabled = out.total_days >= opts.min_total;
  if (!out.enabled) std::fill(out.indicator.begin(), out.indicator.end(), 0);
  return out;
}

//! Causal form used for lag features: 1 on day i when the low-variability run
//! ending at day i (looking only backwards) already spans `min_run` days.
inline std::vector<int> trailing_empty_indicator(const DailyPeakSeries& peaks, const EmptyHouseOptions& opts,
                                                 bool enabled) {
  std::vector<int> out(peaks.size(), 0);
  if (!enabled) return out;
  int run = 0;
  for (std::size_t i = 0; i < peaks.size(); ++i) {
    run = peaks.sd[i] < opts.eps ? run + 1 : 0;
    out[i] = run >= opts.min_run ? 1 : 0;
  }
  return out;
}

// ---------------------------------------------------------------------------
// features

//! Half-hourly frame columns: y, lag1, lag7, peak_lag1, peak_lag7, sd_lag1,
//! period, doy, dow, daytype3, daytype2, empty_lag1.
//! A row is available when both day d-1 and day d-7 exist in the series.
inline FeatureFrame build_features(const LoadSeries& series, const DailyPeakSeries& peaks,
                                   const EmptyHouseOptions& empty_opts = {}, bool empty_enabled = false) {
  if (peaks.size() != series.num_days()) throw DataError("peaks do not match series " + series.node_id);
  const auto empty = trailing_empty_indicator(peaks, empty_opts, empty_enabled);

  FeatureFrame f;
  f.node_id = series.node_id;
  const std::size_t rows = series.num_days() * kPeriodsPerDay;
  f.dates.reserve(rows);
  for (std::size_t i = 0; i < series.num_days(); ++i)
    for (int h = 1; h <= kPeriodsPerDay; ++h) {
      f.dates.push_back(series.days[i]);
      f.periods.push_back(h);
    }
  f.available.assign(rows, 0);
  auto& y = f.add_column("y");
  auto& lag1 = f.add_column("lag1", kNaN);
  auto& lag7 = f.add_column("lag7", kNaN);
  auto& pk1 = f.add_column("peak_lag1", kNaN);
  auto& pk7 = f.add_column("peak_lag7", kNaN);
  auto& sd1 = f.add_column("sd_lag1", kNaN);
  auto& period = f.add_column("period");
  auto& doy = f.add_column("doy");
  auto& dow = f.add_column("dow");
  auto& dt3 = f.add_column("daytype3");
  auto& dt2 = f.add_column("daytype2");
  auto& emp = f.add_column("empty_lag1", kNaN);

  for (std::size_t i = 0; i < series.num_days(); ++i) {
    const Date d = series.days[i];
    const auto i1 = series.index_of(d - 1);
    const auto i7 = series.index_of(d - 7);
    for (int h = 1; h <= kPeriodsPerDay; ++h) {
      const std::size_t r = i * kPeriodsPerDay + static_cast<std::size_t>(h - 1);
      y[r] = series.at(i, h);
      period[r] = h;
      doy[r] = d.day_of_year();
      dow[r] = d.weekday();
      dt3[r] = day_type3(d);
      dt2[r] = day_type2(d);
      if (i1) {
        lag1[r] = series.at(*i1, h);
        pk1[r] = peaks.peak[*i1];
        sd1[r] = peaks.sd[*i1];
        emp[r] = empty[*i1];
      }
      if (i7) {
        lag7[r] = series.at(*i7, h);
        pk7[r] = peaks.peak[*i7];
      }
      f.available[r] = (i1 && i7) ? 1 : 0;
    }
  }
  return f;
}

//! Daily frame (period = 0): y (= daily peak), peak_period and sd are the
//! day's own targets; covariates as in build_features.
inline FeatureFrame build_daily_features(const DailyPeakSeries& peaks, const EmptyHouseOptions& empty_opts = {},
                                         bool empty_enabled = false) {
  const auto empty = trailing_empty_indicator(peaks, empty_opts, empty_enabled);
  FeatureFrame f;
  f.node_id = peaks.node_id;
  f.dates = peaks.days;
  f.periods.assign(peaks.size(), 0);
  f.available.assign(peaks.size(), 0);
  auto& y = f.add_column("y");
  auto& pp = f.add_column("peak_period");
  auto& sd = f.add_column("sd");
  auto& pk1 = f.add_column("peak_lag1", kNaN);
  auto& pk7 = f.add_column("peak_lag7", kNaN);
  auto& sd1 = f.add_column("sd_lag1", kNaN);
  auto& doy = f.add_column("doy");
  auto& dow = f.add_column("dow");
  auto& dt3 = f.add_column("daytype3");
  auto& dt2 = f.add_column("daytype2");
  auto& emp = f.add_column("empty_lag1", kNaN);
  for (std::size_t i = 0; i < peaks.size(); ++i) {
    const Date d = peaks.days[i];
    y[i] = peaks.peak[i];
    pp[i] = peaks.peak_period[i];
    sd[i] = peaks.sd[i];
    doy[i] = d.day_of_year();
    dow[i] = d.weekday();
    dt3[i] = day_type3(d);
    dt2[i] = day_type2(d);
    const auto i1 = peaks.index_of(d - 1);
    const auto i7 = peaks.index_of(d - 7);
    if (i1) {
      pk1[i] = peaks.peak[*i1];
      sd1[i] = peaks.sd[*i1];
      emp[i] = empty[*i1];
    }
    if (i7) pk7[i] = peaks.peak[*i7];
    f.available[i] = (i1 && i7) ? 1 : 0;
  }
  return f;
}

//! Columns that hold target-day quantities rather than day-ahead covariates.
inline bool is_target_column(const std::string& name) {
  return name == "y" || name == "peak_period" || name == "sd";
}

//! Recomputes every covariate of every available row from a copy of the
//! series that physically ends the day before the row's date, and counts the
//! cells that differ. Zero means no row can have seen its target day.
inline std::size_t audit_causality(const LoadSeries& series, const FeatureFrame& frame,
                                   const EmptyHouseOptions& empty_opts = {}, bool empty_enabled = false) {
  std::size_t violations = 0;
  std::optional<Date> current;
  FeatureFrame history_frame;
  bool daily = !frame.periods.empty() && frame.periods[0] == 0;
  for (std::size_t r = 0; r < frame.rows(); ++r) {
    if (!frame.available[r]) continue;
    const Date d = frame.dates[r];
    if (!current || *current != d) {
      // History strictly before d, plus a placeholder target day so the row
      // exists; its values are NaN so any use of them shows up as a mismatch.
      LoadSeries hist = series.truncated_before(d);
      std::array<double, kPeriodsPerDay> blank;
      blank.fill(kNaN);
      hist.append_day(d, blank);
      auto pk = extract_daily_peaks(hist);
      history_frame = daily ? build_daily_features(pk, empty_opts, empty_enabled)
                            : build_features(hist, pk, empty_opts, empty_enabled);
      current = d;
    }
    const std::size_t hr = history_frame.find(d, frame.periods[r]);
    if (hr == FeatureFrame::npos) {
      ++violations;
      continue;
    }
    for (const auto& name : frame.column_names()) {
      if (is_target_column(name) || !history_frame.has(name)) continue;
      const double a = frame.column(name)[r];
      const double b = history_frame.column(name)[hr];
      if (!(a == b || (std::isnan(a) && std::isnan(b)))) ++violations;
    }
  }
  return violations;
}

// ---------------------------------------------------------------------------
// partition

enum class Role { train, test, outside };

struct Block {
  int year = 0;
  int month = 0;
  int index = 0;  // 0, 1, 2 within the month
  Date first;
  Date last;      // inclusive
};

//! Month-block split: blocks 0 and 1 of every month train (and are the two
//! cross-validation folds), block 2 is the test set.
struct DataPartition {
  std::vector<Block> blocks;

  const Block* block_of(Date d) const {
    for (const auto& b : blocks)
      if (d >= b.first && d <= b.last) return &b;
    return nullptr;
  }

  Role role(Date d) const {
    const Block* b = block_of(d);
    if (!b) return Role::outside;
    return b->index == 2 ? Role::test : Role::train;
  }

  //! CV fold (0 or 1) of a training day; -1 otherwise.
  int fold_of(Date d) const {
    const Block* b = block_of(d);
    return (b && b->index < 2) ? b->index : -1;
  }

  nlohmann::json to_json() const {
    nlohmann::json arr = nlohmann::json::array();
    for (const auto& b : blocks)
      arr.push_back({{"year", b.year},
                     {"month", b.month},
                     {"block", b.index + 1},
                     {"role", b.index == 2 ? "test" : "train"},
                     {"first", b.first.iso()},
                     {"last", b.last.iso()}});
    return {{"format", "lvfc-partition"}, {"version", 1}, {"blocks", arr}};
  }

  static DataPartition from_json(const nlohmann::json& j) {
    DataPartition p;
    for (const auto& b : j.at("blocks"))
      p.blocks.push_back({b.at("year"), b.at("month"), b.at("block").get<int>() - 1,
                          Date::parse(b.at("first").get<std::string>()),
                          Date::parse(b.at("last").get<std::string>())});
    return p;
  }
};

//! Splits [first, last] month by month into three contiguous blocks whose
//! sizes differ by at most one day, extra days going to the earlier blocks.
inline DataPartition partition(Date first, Date last) {
  if (last < first) throw DataError("partition: empty date range");
  DataPartition p;
  Date month_start = first;
  while (month_start <= last) {
    const auto [y, m, d0] = month_start.ymd();
    Date month_end = Date::from_ymd(y, m, Date::days_in_month(y, m));
    if (month_end > last) month_end = last;
    const int n = month_end - month_start + 1;
    const int base = n / 3, rem = n % 3;
    Date cursor = month_start;
    for (int b = 0; b < 3; ++b) {
      const int size = base + (b < rem ? 1 : 0);
      if (size == 0) continue;
      p.blocks.push_back({y, m, b, cursor, cursor + (size - 1)});
      cursor = cursor + size;
    }
    month_start = month_end + 1;
  }
  return p;
}

// ---------------------------------------------------------------------------
// CSV output

//! Writes a feature frame with a header line of its column names, preceded
//! by node, date, period, available.
inline void write_frame_csv(std::ostream& os, const FeatureFrame& f) {
  os << "node,date,period,available";
  for (const auto& c : f.column_names()) os << ',' << c;
  os << '\n';
  std::vector<std::span<const double>> cols;
  for (const auto& c : f.column_names()) cols.push_back(f.column(c));
  for (std::size_t r = 0; r < f.rows(); ++r) {
    os << f.node_id << ',' << f.dates[r].iso() << ',' << f.periods[r] << ',' << int(f.available[r]);
    for (const auto& col : cols) os << ',' << format_double(col[r]);
    os << '\n';
  }
}

inline FeatureFrame read_frame_csv(std::istream& is) {
  std::string line;
  if (!std::getline(is, line)) throw DataError("empty feature frame file");
  const auto header = split_csv_line(line);
  if (header.size() < 4 || header[0] != "node" || header[1] != "date" || header[2] != "period" ||
      header[3] != "available")
    throw DataError("unexpected feature frame header");
  std::vector<std::vector<double>> cols(header.size() - 4);
  FeatureFrame f;
  while (std::getline(is, line)) {
    if (trim(line).empty()) continue;
    const auto fields = split_csv_line(line);
    if (fields.size() != header.size()) throw DataError("ragged feature frame row");
    f.node_id = fields[0];
    f.dates.push_back(Date::parse(fields[1]));
    long long p = 0, a = 0;
    if (!parse_int(fields[2], p) || !parse_int(fields[3], a)) throw DataError("bad feature frame row");
    f.periods.push_back(static_cast<int>(p));
    f.available.push_back(static_cast<std::uint8_t>(a));
    for (std::size_t c = 4; c < fields.size(); ++c) {
      double v = 0;
      if (!parse_double(fields[c], v)) throw DataError("bad number '" + fields[c] + "'");
      cols[c - 4].push_back(v);
    }
  }
  for (std::size_t c = 4; c < header.size(); ++c) f.add_column(header[c]) = std::move(cols[c - 4]);
  return f;
}

//! node,date,period,kwh
inline void write_series_csv(std::ostream& os, const LoadSeries& s) {
  os << "node,date,period,kwh\n";
  for (std::size_t i = 0; i < s.num_days(); ++i)
    for (int h = 1; h <= kPeriodsPerDay; ++h)
      os << s.node_id << ',' << s.days[i].iso() << ',' << h << ',' << format_double(s.at(i, h)) << '\n';
}

inline LoadSeries read_series_csv(std::istream& is) {
  std::string line;
  std::getline(is, line);
  LoadSeries s;
  std::array<double, kPeriodsPerDay> buf{};
  int filled = 0;
  Date cur;
  while (std::getline(is, line)) {
    if (trim(line).empty()) continue;
    const auto f = split_csv_line(line);
    if (f.size() != 4) throw DataError("bad series row");
    s.node_id = f[0];
    const Date d = Date::parse(f[1]);
    long long h = 0;
    double v = 0;
    if (!parse_int(f[2], h) || !parse_double(f[3], v) || h < 1 || h > kPeriodsPerDay)
      throw DataError("bad series row");
    if (filled == 0) cur = d;
    if (d != cur || h != filled + 1) throw DataError("series file must hold complete ordered days");
    buf[static_cast<std::size_t>(h - 1)] = v;
    if (++filled == kPeriodsPerDay) {
      s.append_day(cur, buf);
      filled = 0;
    }
  }
  if (filled != 0) throw DataError("series file ends mid-day");
  return s;
}

//! node,date,peak_kwh,peak_period,sd_kwh,empty
inline void write_peaks_csv(std::ostream& os, const DailyPeakSeries& p, const EmptyHouse& empty) {
  os << "node,date,peak_kwh,peak_period,sd_kwh,empty\n";
  for (std::size_t i = 0; i < p.size(); ++i)
    os << p.node_id << ',' << p.days[i].iso() << ',' << format_double(p.peak[i]) << ',' << p.peak_period[i]
       << ',' << format_double(p.sd[i]) << ',' << (i < empty.indicator.size() ? empty.indicator[i] : 0) << '\n';
}

}  // namespace lvfc
