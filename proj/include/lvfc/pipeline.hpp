#pragma once

// Config-driven experiment: build -> fit -> forecast -> fuse -> evaluate ->
// report. Every stage reads the artifacts of the previous ones from the
// output directory and writes its own; per-node work runs on a bounded
// worker pool and results are merged in a fixed order.

#include <algorithm>
#include <atomic>
#include <filesystem>
#include <fstream>
#include <functional>
#include <map>
#include <memory>
#include <optional>
#include <set>
#include <sstream>
#include <string>
#include <thread>
#include <vector>

#include "json.hpp"
#include "lvfc/common.hpp"
#include "lvfc/dataset.hpp"
#include "lvfc/forecasters.hpp"
#include "lvfc/fusion.hpp"
#include "lvfc/gamlss.hpp"
#include "lvfc/kde.hpp"
#include "lvfc/synthetic.hpp"
#include "lvfc/timing.hpp"
#include "lvfc/verification.hpp"

namespace lvfc {

namespace fs = std::filesystem;

// ---------------------------------------------------------------------------
// configuration

struct ExperimentConfig {
  fs::path base_dir;                 // relative paths resolve against this
  std::optional<fs::path> csv;       // smart-meter export
  CsvSchema schema;
  std::optional<SyntheticOptions> synthetic;
  int year = 2013;
  std::uint64_t hierarchy_seed = 0;
  HierarchyLimits limits;
  fs::path output_dir = "out";
  EmptyHouseOptions empty;
  RosterOptions roster;
  FitOptions fit;
  int bootstrap = 1000;
  std::uint64_t evaluation_seed = 0;
  int crps_levels = kCrpsLevels;
  std::vector<std::string> partitions = {"cv1", "cv2", "test"};
  std::vector<std::string> quantile_export_levels = {"primary", "secondary", "feeder"};
  std::string quantile_export_partition = "test";
  bool audit = true;
  int jobs = 1;

  fs::path resolve(const fs::path& p) const { return p.is_absolute() ? p : base_dir / p; }
  fs::path out() const { return resolve(output_dir); }

  static ExperimentConfig from_json(const nlohmann::json& j, const fs::path& base_dir = ".") {
    if (j.value("version", 0) != 1) throw DataError("config: 'version' must be 1");
    ExperimentConfig c;
    c.base_dir = base_dir;
    const auto& data = j.at("data");
    if (data.contains("csv")) c.csv = data.at("csv").get<std::string>();
    if (data.contains("schema")) {
      const auto& s = data.at("schema");
      c.schema.meter_id = s.value("meter_id", c.schema.meter_id);
      c.schema.timestamp = s.value("timestamp", c.schema.timestamp);
      c.schema.energy = s.value("energy", c.schema.energy);
      c.schema.tariff = s.value("tariff", c.schema.tariff);
      c.schema.timestamp_marks = s.value("timestamp_marks", c.schema.timestamp_marks);
      if (s.contains("variable_tariff_values"))
        c.schema.variable_tariff_values = s.at("variable_tariff_values").get<std::vector<std::string>>();
    }
    if (data.contains("synthetic")) {
      const auto& s = data.at("synthetic");
      SyntheticOptions o;
      o.households = s.value("households", o.households);
      if (!s.contains("seed")) throw DataError("config: data.synthetic.seed is required");
      o.seed = s.at("seed").get<std::uint64_t>();
      o.empty_fraction = s.value("empty_fraction", o.empty_fraction);
      o.incomplete = s.value("incomplete", o.incomplete);
      o.common_jitter = s.value("common_jitter", o.common_jitter);
      o.own_jitter = s.value("own_jitter", o.own_jitter);
      c.synthetic = o;
    }
    if (c.csv.has_value() == c.synthetic.has_value())
      throw DataError("config: give exactly one of data.csv and data.synthetic");
    c.year = j.value("year", c.year);
    if (c.synthetic) c.synthetic->year = c.year;
    const auto& h = j.at("hierarchy");
    if (!h.contains("seed")) throw DataError("config: hierarchy.seed is required");
    c.hierarchy_seed = h.at("seed").get<std::uint64_t>();
    if (h.contains("feeders_per_secondary")) {
      const auto v = h.at("feeders_per_secondary").get<std::vector<int>>();
      if (v.size() != 2) throw DataError("config: feeders_per_secondary needs [min, max]");
      c.limits.feeders_min = v[0];
      c.limits.feeders_max = v[1];
    }
    if (h.contains("households_per_feeder")) {
      const auto v = h.at("households_per_feeder").get<std::vector<int>>();
      if (v.size() != 2) throw DataError("config: households_per_feeder needs [min, max]");
      c.limits.households_min = v[0];
      c.limits.households_max = v[1];
    }
    c.output_dir = j.value("output_dir", std::string("out"));
    if (j.contains("empty_house")) {
      const auto& e = j.at("empty_house");
      c.empty.eps = e.value("eps", c.empty.eps);
      c.empty.min_run = e.value("min_run", c.empty.min_run);
      c.empty.min_total = e.value("min_total", c.empty.min_total);
    }
    if (j.contains("fit")) {
      const auto& f = j.at("fit");
      c.fit.max_outer = f.value("max_outer", c.fit.max_outer);
      c.fit.min_rows_per_coef = f.value("min_rows_per_coef", c.fit.min_rows_per_coef);
      c.fit.tolerance = f.value("tolerance", c.fit.tolerance);
    }
    if (j.contains("roster")) {
      const auto& r = j.at("roster");
      c.roster.period_k = r.value("period_k", c.roster.period_k);
      c.roster.doy_k = r.value("doy_k", c.roster.doy_k);
      c.roster.annual_k = r.value("annual_k", c.roster.annual_k);
    }
    const auto& ev = j.at("evaluation");
    if (!ev.contains("seed")) throw DataError("config: evaluation.seed is required");
    c.evaluation_seed = ev.at("seed").get<std::uint64_t>();
    c.bootstrap = ev.value("bootstrap", c.bootstrap);
    c.crps_levels = ev.value("crps_levels", c.crps_levels);
    if (ev.contains("quantile_export")) {
      const auto& q = ev.at("quantile_export");
      c.quantile_export_levels = q.value("levels", c.quantile_export_levels);
      c.quantile_export_partition = q.value("partition", c.quantile_export_partition);
    }
    c.audit = j.value("audit", c.audit);
    c.jobs = j.value("jobs", c.jobs);
    c.validate();
    return c;
  }

  static ExperimentConfig load(const fs::path& path) {
    std::ifstream in(path);
    if (!in) throw DataError("cannot open config '" + path.string() + "'");
    nlohmann::json j;
    try {
      j = nlohmann::json::parse(in);
    } catch (const nlohmann::json::exception& e) {
      throw DataError("config '" + path.string() + "' is not valid JSON: " + e.what());
    }
    return from_json(j, path.parent_path().empty() ? fs::path(".") : path.parent_path());
  }

  void validate() const {
    if (csv && !fs::exists(resolve(*csv))) throw DataError("config: data file '" + resolve(*csv).string() + "' not found");
    if (bootstrap < 1) throw DataError("config: evaluation.bootstrap must be positive");
    if (crps_levels < 9) throw DataError("config: evaluation.crps_levels too small");
    if (jobs < 1) throw DataError("config: jobs must be positive");
  }
};

// ---------------------------------------------------------------------------
// artifact layout

struct ArtifactPaths {
  fs::path root;

  fs::path manifest() const { return root / "manifest.json"; }
  fs::path partition() const { return root / "partition.json"; }
  fs::path build_report() const { return root / "build.json"; }
  fs::path series(const std::string& node) const { return root / "series" / (node + ".csv"); }
  fs::path features(const std::string& node) const { return root / "features" / (node + ".csv"); }
  fs::path daily(const std::string& node) const { return root / "features" / (node + "_daily.csv"); }
  fs::path peaks(const std::string& node) const { return root / "peaks" / (node + ".csv"); }
  fs::path meta(const std::string& node) const { return root / "features" / (node + ".json"); }
  fs::path model(const std::string& part, const std::string& node, const std::string& method) const {
    return root / "models" / part / node / (method + ".json");
  }
  fs::path forecast(const std::string& part, const std::string& node, const std::string& method) const {
    return root / "forecasts" / part / node / (method + ".csv");
  }
  fs::path quantiles(const std::string& node, const std::string& method) const {
    return root / "quantiles" / (node + "_" + method + ".csv");
  }
  fs::path fit_log() const { return root / "fit_log.csv"; }
  fs::path scores(const std::string& part, const std::string& node) const {
    return root / "scores" / part / (node + ".csv");
  }
  fs::path summary() const { return root / "summary.json"; }
  fs::path pit() const { return root / "pit.csv"; }
  fs::path bootstrap() const { return root / "bootstrap.csv"; }
  fs::path report() const { return root / "report.md"; }
  fs::path table() const { return root / "table1.csv"; }
};

// ---------------------------------------------------------------------------
// small I/O helpers

namespace detail {

inline void write_text(const fs::path& p, const std::string& text) {
  fs::create_directories(p.parent_path());
  std::ofstream os(p, std::ios::binary);
  if (!os) throw DataError("cannot write '" + p.string() + "'");
  os << text;
}

inline std::string read_text(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  if (!in) throw DataError("missing artifact '" + p.string() + "' (run the upstream stage first)");
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

inline nlohmann::json read_json(const fs::path& p) { return nlohmann::json::parse(read_text(p)); }

inline void write_json(const fs::path& p, const nlohmann::json& j) { write_text(p, j.dump(1) + "\n"); }

inline FeatureFrame read_frame(const fs::path& p) {
  std::istringstream is(read_text(p));
  return read_frame_csv(is);
}

//! Daily peaks recovered from a daily feature frame.
inline DailyPeakSeries peaks_from_daily(const FeatureFrame& daily) {
  DailyPeakSeries p;
  p.node_id = daily.node_id;
  p.days = daily.dates;
  const auto y = daily.column("y"), pp = daily.column("peak_period"), sd = daily.column("sd");
  for (std::size_t i = 0; i < daily.rows(); ++i) {
    p.peak.push_back(y[i]);
    p.peak_period.push_back(static_cast<int>(pp[i]));
    p.sd.push_back(sd[i]);
  }
  return p;
}

inline std::vector<std::string> read_csv_fields(const std::string& line) { return split_csv_line(line); }

inline double to_double(const std::string& s) {
  double v = 0;
  if (!parse_double(s, v)) throw DataError("bad number '" + s + "'");
  return v;
}

inline int to_int(const std::string& s) {
  long long v = 0;
  if (!parse_int(s, v)) throw DataError("bad integer '" + s + "'");
  return static_cast<int>(v);
}

}  // namespace detail

inline DensityForecast read_forecast_csv(const fs::path& p) {
  std::istringstream is(detail::read_text(p));
  std::string line;
  std::getline(is, line);
  DensityForecast f;
  while (std::getline(is, line)) {
    if (trim(line).empty()) continue;
    const auto x = split_csv_line(line);
    if (x.size() != 9) throw DataError("bad forecast row in '" + p.string() + "'");
    f.node = x[0];
    f.days.push_back(Date::parse(x[1]));
    f.periods.push_back(detail::to_int(x[2]));
    f.method = x[3];
    f.family = family_from_string(x[4]);
    ParamVector pv;
    for (std::size_t k = 0; k < 4; ++k) {
      double v = 0;
      parse_double(x[5 + k], v);
      pv[k] = std::isnan(v) ? 0.0 : v;
    }
    f.params.push_back(pv);
  }
  return f;
}

inline void write_fused_csv(std::ostream& os, const FusedForecast& f) {
  os << "node,date,period,method,weight,base_family,b1,b2,b3,b4,peak_family,p1,p2,p3,p4\n";
  for (std::size_t i = 0; i < f.size(); ++i) {
    const auto& c = f.cells[i];
    os << f.node << ',' << f.days[i].iso() << ',' << f.periods[i] << ',' << f.method << ','
       << format_double(c.weight) << ',' << to_string(c.base.family);
    for (std::size_t k = 0; k < 4; ++k) os << ',' << format_double(c.base.params[k]);
    os << ',' << to_string(c.peak.family);
    for (std::size_t k = 0; k < 4; ++k) os << ',' << format_double(c.peak.params[k]);
    os << '\n';
  }
}

inline FusedForecast read_fused_csv(const fs::path& p) {
  std::istringstream is(detail::read_text(p));
  std::string line;
  std::getline(is, line);
  FusedForecast f;
  while (std::getline(is, line)) {
    if (trim(line).empty()) continue;
    const auto x = split_csv_line(line);
    if (x.size() != 15) throw DataError("bad fused row in '" + p.string() + "'");
    f.node = x[0];
    f.days.push_back(Date::parse(x[1]));
    f.periods.push_back(detail::to_int(x[2]));
    f.method = x[3];
    FusedCell c;
    c.weight = detail::to_double(x[4]);
    c.base.family = family_from_string(x[5]);
    for (std::size_t k = 0; k < 4; ++k) c.base.params[k] = detail::to_double(x[6 + k]);
    c.peak.family = family_from_string(x[10]);
    for (std::size_t k = 0; k < 4; ++k) c.peak.params[k] = detail::to_double(x[11 + k]);
    f.cells.push_back(c);
  }
  return f;
}

inline std::vector<TimingPmf> read_timing_csv(const fs::path& p) {
  std::istringstream is(detail::read_text(p));
  std::string line;
  std::getline(is, line);
  std::vector<TimingPmf> out;
  while (std::getline(is, line)) {
    if (trim(line).empty()) continue;
    const auto x = split_csv_line(line);
    if (x.size() != 4) throw DataError("bad timing row in '" + p.string() + "'");
    const Date d = Date::parse(x[1]);
    const int h = detail::to_int(x[2]);
    if (out.empty() || out.back().day != d) {
      out.emplace_back();
      out.back().day = d;
    }
    out.back().prob[static_cast<std::size_t>(h - 1)] = detail::to_double(x[3]);
  }
  return out;
}

// ---------------------------------------------------------------------------
// worker pool

//! Runs fn(i) for i in [0, n) on up to `jobs` threads. Exceptions are
//! captured per task and returned as messages (empty on success).
inline std::vector<std::string> parallel_for(std::size_t n, int jobs, const std::function<void(std::size_t)>& fn) {
  std::vector<std::string> errors(n);
  std::atomic<std::size_t> next{0};
  auto worker = [&] {
    for (;;) {
      const std::size_t i = next.fetch_add(1);
      if (i >= n) return;
      try {
        fn(i);
      } catch (const std::exception& e) {
        errors[i] = e.what();
        if (errors[i].empty()) errors[i] = "unknown error";
      }
    }
  };
  const int t = std::max(1, std::min<int>(jobs, static_cast<int>(n)));
  if (t == 1) {
    worker();
  } else {
    std::vector<std::thread> pool;
    for (int k = 0; k < t; ++k) pool.emplace_back(worker);
    for (auto& th : pool) th.join();
  }
  return errors;
}

// ---------------------------------------------------------------------------
// stage results

struct StageResult {
  std::string stage;
  std::size_t ok = 0;
  std::vector<std::string> failures;

  //! 0 all good, 2 some units failed, 1 nothing succeeded.
  int exit_code() const {
    if (failures.empty()) return 0;
    return ok == 0 ? 1 : 2;
  }

  nlohmann::json to_json() const {
    return {{"stage", stage}, {"ok", ok}, {"failed", failures.size()}, {"failures", failures}};
  }
};

// ---------------------------------------------------------------------------
// roster

inline const std::vector<std::string>& halfhourly_methods(bool aggregated) {
  static const std::vector<std::string> agg{"simple", "full", "fusion"};
  static const std::vector<std::string> hh{"kde1", "kde2", "simple", "full", "fusion"};
  return aggregated ? agg : hh;
}

inline const std::vector<std::string>& peak_methods(bool aggregated) {
  static const std::vector<std::string> agg{"peak_simple", "peak_full"};
  static const std::vector<std::string> hh{"peak_kde1", "peak_kde2", "peak_simple", "peak_full"};
  return aggregated ? agg : hh;
}

inline const std::vector<std::string>& timing_methods() {
  static const std::vector<std::string> t{"climatology", "hazard"};
  return t;
}

//! Methods that produce a fitted artifact.
inline std::vector<std::string> fitted_methods(bool aggregated) {
  std::vector<std::string> m;
  if (!aggregated) m = {"kde1", "kde2", "peak_kde1", "peak_kde2"};
  for (const auto& s : {"simple", "full", "peak_simple", "peak_full", "hazard"}) m.push_back(s);
  return m;
}

inline std::string reference_method(bool aggregated) { return aggregated ? "simple" : "kde1"; }
inline std::string peak_reference_method(bool aggregated) { return aggregated ? "peak_simple" : "peak_kde1"; }

struct PartitionDays {
  std::vector<Date> fit;
  std::vector<Date> target;
};

inline PartitionDays partition_days(const DataPartition& part, std::span<const Date> days, const std::string& name) {
  PartitionDays out;
  for (Date d : days) {
    const Role r = part.role(d);
    const int fold = part.fold_of(d);
    if (name == "test") {
      if (r == Role::train) out.fit.push_back(d);
      if (r == Role::test) out.target.push_back(d);
    } else if (name == "cv1" || name == "cv2") {
      const int held = name == "cv1" ? 0 : 1;
      if (r != Role::train) continue;
      (fold == held ? out.target : out.fit).push_back(d);
    } else {
      throw DataError("unknown partition '" + name + "'");
    }
  }
  return out;
}

inline std::vector<std::size_t> rows_on_days(const FeatureFrame& f, std::span<const Date> days) {
  std::vector<Date> sorted(days.begin(), days.end());
  std::sort(sorted.begin(), sorted.end());
  return f.rows_where([&](Date d) { return std::binary_search(sorted.begin(), sorted.end(), d); });
}

//! Node ids in manifest order together with their level.
inline std::vector<std::pair<std::string, Level>> manifest_nodes(const nlohmann::json& manifest) {
  std::vector<std::pair<std::string, Level>> out;
  for (const auto& n : manifest.at("nodes"))
    out.emplace_back(n.at("id").get<std::string>(), level_from_string(n.at("level").get<std::string>()));
  return out;
}

struct NodeSelection {
  std::optional<Level> level;
  std::optional<std::string> method;
};

// ---------------------------------------------------------------------------
// build

inline StageResult cmd_build(const ExperimentConfig& cfg) {
  StageResult res;
  res.stage = "build";
  const ArtifactPaths P{cfg.out()};
  std::vector<LoadSeries> raw;
  std::size_t row_errors = 0, dropped_days = 0;
  CleanOptions clean_opts;
  clean_opts.drop_dst_days = cfg.schema.drop_dst_days;
  if (cfg.csv) {
    auto ing = ingest_csv(cfg.resolve(*cfg.csv).string(), cfg.schema);
    raw = std::move(ing.series);
    row_errors = ing.errors.size();
    dropped_days = ing.dropped_days;
    clean_opts.variable_tariff_meters = ing.variable_tariff_meters;
    for (const auto& e : ing.errors) log(LogLevel::debug, "line " + std::to_string(e.line) + ": " + e.message);
  } else {
    raw = synthesize_households(*cfg.synthetic);
  }
  const auto cleaned = clean(raw, cfg.year, clean_opts);
  log(LogLevel::info, "retained " + std::to_string(cleaned.retained.size()) + " of " + std::to_string(raw.size()) +
                          " meters");
  const auto hierarchy = synthesize_hierarchy(cleaned.retained, cfg.hierarchy_seed, cfg.limits);
  const auto manifest = hierarchy.manifest();
  detail::write_json(P.manifest(), manifest);

  const auto& any = hierarchy.series.begin()->second;
  const auto part = partition(any.days.front(), any.days.back());
  detail::write_json(P.partition(), part.to_json());

  const auto nodes = manifest_nodes(manifest);
  std::vector<nlohmann::json> metas(nodes.size());
  const auto errors = parallel_for(nodes.size(), cfg.jobs, [&](std::size_t i) {
    const auto& id = nodes[i].first;
    const auto& s = hierarchy.series.at(id);
    const auto peaks = extract_daily_peaks(s);
    const bool household = nodes[i].second == Level::household;
    const auto empty = household ? detect_empty_house(peaks, cfg.empty) : EmptyHouse{std::vector<int>(peaks.size(), 0)};
    const auto frame = build_features(s, peaks, cfg.empty, empty.enabled);
    const auto daily = build_daily_features(peaks, cfg.empty, empty.enabled);
    std::ostringstream a, b, c, d;
    write_series_csv(a, s);
    write_frame_csv(b, frame);
    write_frame_csv(c, daily);
    write_peaks_csv(d, peaks, empty);
    detail::write_text(P.series(id), a.str());
    detail::write_text(P.features(id), b.str());
    detail::write_text(P.daily(id), c.str());
    detail::write_text(P.peaks(id), d.str());
    nlohmann::json meta{{"node", id},
                        {"level", to_string(nodes[i].second)},
                        {"days", s.num_days()},
                        {"empty_enabled", empty.enabled},
                        {"empty_days", empty.total_days}};
    if (cfg.audit) {
      meta["causality_violations"] = audit_causality(s, frame, cfg.empty, empty.enabled) +
                                     audit_causality(s, daily, cfg.empty, empty.enabled);
    }
    detail::write_json(P.meta(id), meta);
    metas[i] = meta;
  });
  std::size_t violations = 0;
  for (std::size_t i = 0; i < nodes.size(); ++i) {
    if (errors[i].empty()) {
      ++res.ok;
      violations += metas[i].value("causality_violations", 0);
    } else {
      res.failures.push_back(nodes[i].first + ": " + errors[i]);
    }
  }
  nlohmann::json removed = nlohmann::json::array();
  for (const auto& [id, why] : cleaned.removed) removed.push_back({{"meter", id}, {"reason", why}});
  detail::write_json(P.build_report(), {{"meters_in", raw.size()},
                                        {"meters_retained", cleaned.retained.size()},
                                        {"removed", removed},
                                        {"row_errors", row_errors},
                                        {"dropped_days", dropped_days},
                                        {"nodes", nodes.size()},
                                        {"audited", cfg.audit},
                                        {"causality_violations", violations}});
  return res;
}

// ---------------------------------------------------------------------------
// fit

namespace detail {

struct NodeData {
  std::string id;
  Level level = Level::household;
  FeatureFrame frame;
  FeatureFrame daily;
  bool empty_enabled = false;

  bool aggregated() const { return is_aggregated(level); }
};

inline NodeData load_node(const ArtifactPaths& P, const std::string& id, Level level) {
  NodeData n;
  n.id = id;
  n.level = level;
  n.frame = read_frame(P.features(id));
  n.daily = read_frame(P.daily(id));
  n.empty_enabled = read_json(P.meta(id)).value("empty_enabled", false);
  return n;
}

inline std::string fit_log_line(const std::string& part, const std::string& node, const std::string& method,
                                const std::string& status, const std::string& detail_text) {
  std::string d = detail_text;
  std::replace(d.begin(), d.end(), ',', ';');
  std::replace(d.begin(), d.end(), '\n', ' ');
  return part + "," + node + "," + method + "," + status + "," + d + "\n";
}

}  // namespace detail

//! Fits one method of one node on one partition; returns a fit-log line.
inline std::string fit_node_method(const ExperimentConfig& cfg, const ArtifactPaths& P, const detail::NodeData& n,
                                   const DataPartition& part, const std::string& pname, const std::string& method) {
  const auto days = partition_days(part, n.daily.dates, pname);
  const bool agg = n.aggregated();
  const auto path = P.model(pname, n.id, method);
  auto gamlss = [&](const ModelSpec& primary, const std::optional<ModelSpec>& fallback, const FeatureFrame& f) {
    const auto rows = rows_on_days(f, days.fit);
    FittedModel m = fallback ? fit_with_fallback(primary, *fallback, f, rows, cfg.fit) : fit(primary, f, rows, cfg.fit);
    detail::write_json(path, m.to_json());
    std::string status = m.fallback_reason.empty() ? (m.convergence.converged ? "converged" : "not_converged")
                                                    : "fallback";
    return detail::fit_log_line(pname, n.id, method, status,
                                m.fallback_reason.empty() ? m.spec.name + " iterations=" +
                                                                std::to_string(m.convergence.iterations)
                                                          : m.spec.name + " (" + m.fallback_reason + ")");
  };
  auto kde = [&](const FeatureFrame& f, KdeConditioning c) {
    const auto rows = rows_on_days(f, days.fit);
    const auto m = fit_kde(f, rows, c);
    detail::write_json(path, m.to_json());
    return detail::fit_log_line(pname, n.id, method, "fitted",
                                to_string(c) + " fallback_cells=" + std::to_string(m.fallback_cells));
  };
  const auto& R = cfg.roster;
  if (method == "simple")
    return gamlss(agg ? spec_benchmark_simple_aggregated(R) : spec_benchmark_simple_household(R), std::nullopt, n.frame);
  if (method == "full")
    return gamlss(agg ? spec_halfhourly_aggregated(R) : spec_halfhourly_household(R),
                  agg ? spec_benchmark_simple_aggregated(R) : spec_benchmark_simple_household(R), n.frame);
  if (method == "peak_simple") return gamlss(spec_benchmark_peak_simple(agg), std::nullopt, n.daily);
  if (method == "peak_full")
    return gamlss(agg ? spec_peak_intensity_aggregated(R) : spec_peak_intensity_household(n.empty_enabled, R),
                  spec_benchmark_peak_simple(agg), n.daily);
  if (method == "kde1") return kde(n.frame, KdeConditioning::by_period);
  if (method == "kde2") return kde(n.frame, KdeConditioning::by_period_and_daytype3);
  if (method == "peak_kde1") return kde(n.daily, KdeConditioning::none);
  if (method == "peak_kde2") return kde(n.daily, KdeConditioning::by_daytype2);
  if (method == "hazard") {
    const auto peaks = detail::peaks_from_daily(n.daily);
    std::vector<std::size_t> idx;
    for (Date d : days.fit)
      if (auto i = peaks.index_of(d)) idx.push_back(*i);
    HazardOptions ho;
    ho.fit = cfg.fit;
    try {
      const auto m = fit_hazard(peaks, idx, agg, ho);
      detail::write_json(path, m.to_json());
      return detail::fit_log_line(pname, n.id, method, m.model.convergence.converged ? "converged" : "not_converged",
                                  m.model.spec.name);
    } catch (const std::exception& e) {
      // Timing falls back to climatology at forecast time.
      detail::write_json(path, {{"format", "lvfc-hazard-failed"}, {"reason", e.what()}});
      return detail::fit_log_line(pname, n.id, method, "fallback", std::string("climatology (") + e.what() + ")");
    }
  }
  throw DataError("unknown method '" + method + "'");
}

inline bool selected(const NodeSelection& sel, Level level, const std::string& method) {
  if (sel.level && *sel.level != level) return false;
  if (sel.method && *sel.method != method) return false;
  return true;
}

inline StageResult cmd_fit(const ExperimentConfig& cfg, const NodeSelection& sel = {}) {
  StageResult res;
  res.stage = "fit";
  const ArtifactPaths P{cfg.out()};
  const auto nodes = manifest_nodes(detail::read_json(P.manifest()));
  const auto part = DataPartition::from_json(detail::read_json(P.partition()));
  std::vector<std::size_t> todo;
  for (std::size_t i = 0; i < nodes.size(); ++i)
    if (!sel.level || *sel.level == nodes[i].second) todo.push_back(i);
  std::vector<std::string> logs(todo.size());
  std::vector<std::size_t> ok(todo.size(), 0);
  std::vector<std::vector<std::string>> fails(todo.size());
  const auto errors = parallel_for(todo.size(), cfg.jobs, [&](std::size_t t) {
    const auto& [id, level] = nodes[todo[t]];
    const auto n = detail::load_node(P, id, level);
    for (const auto& pname : cfg.partitions)
      for (const auto& method : fitted_methods(n.aggregated())) {
        if (!selected(sel, level, method)) continue;
        try {
          logs[t] += fit_node_method(cfg, P, n, part, pname, method);
          ++ok[t];
        } catch (const std::exception& e) {
          logs[t] += detail::fit_log_line(pname, id, method, "failed", e.what());
          fails[t].push_back(pname + "/" + id + "/" + method + ": " + e.what());
        }
      }
  });
  std::string log_text = "partition,node,method,status,detail\n";
  for (std::size_t t = 0; t < todo.size(); ++t) {
    log_text += logs[t];
    res.ok += ok[t];
    for (auto& f : fails[t]) res.failures.push_back(f);
    if (!errors[t].empty()) res.failures.push_back(nodes[todo[t]].first + ": " + errors[t]);
  }
  detail::write_text(P.fit_log(), log_text);
  return res;
}

// ---------------------------------------------------------------------------
// forecast

inline void write_kde_forecast_csv(std::ostream& os, const KdeForecast& f) {
  os << "node,date,period,method,cell\n";
  for (std::size_t i = 0; i < f.size(); ++i)
    os << f.node << ',' << f.days[i].iso() << ',' << f.periods[i] << ',' << f.method << ',' << f.cells[i] << '\n';
}

inline KdeForecast read_kde_forecast_csv(const fs::path& p, std::shared_ptr<const KdeModel> model) {
  std::istringstream is(detail::read_text(p));
  std::string line;
  std::getline(is, line);
  KdeForecast f;
  f.model = std::move(model);
  while (std::getline(is, line)) {
    if (trim(line).empty()) continue;
    const auto x = split_csv_line(line);
    if (x.size() != 5) throw DataError("bad KDE forecast row in '" + p.string() + "'");
    f.node = x[0];
    f.days.push_back(Date::parse(x[1]));
    f.periods.push_back(detail::to_int(x[2]));
    f.method = x[3];
    f.cells.push_back(static_cast<std::size_t>(detail::to_int(x[4])));
  }
  return f;
}

inline void forecast_node_method(const ExperimentConfig& cfg, const ArtifactPaths& P, const detail::NodeData& n,
                                 const DataPartition& part, const std::string& pname, const std::string& method) {
  const auto days = partition_days(part, n.daily.dates, pname);
  const auto mpath = P.model(pname, n.id, method);
  const auto out = P.forecast(pname, n.id, method);
  std::ostringstream os;
  if (method == "simple" || method == "full" || method == "peak_simple" || method == "peak_full") {
    const auto m = FittedModel::from_json(detail::read_json(mpath));
    const bool daily = method.rfind("peak_", 0) == 0;
    const auto f = forecast_day_ahead(m, daily ? n.daily : n.frame, days.target, method);
    write_forecast_csv(os, f);
    const bool export_q = !daily && pname == cfg.quantile_export_partition &&
                          std::find(cfg.quantile_export_levels.begin(), cfg.quantile_export_levels.end(),
                                    to_string(n.level)) != cfg.quantile_export_levels.end();
    if (export_q) {
      std::ostringstream q;
      write_quantile_csv(q, f);
      detail::write_text(P.quantiles(n.id, method), q.str());
    }
  } else if (method.find("kde") != std::string::npos) {
    auto m = std::make_shared<const KdeModel>(KdeModel::from_json(detail::read_json(mpath)));
    const bool daily = method.rfind("peak_", 0) == 0;
    write_kde_forecast_csv(os, forecast_kde(m, daily ? n.daily : n.frame, days.target, method));
  } else if (method == "hazard" || method == "climatology") {
    const auto peaks = detail::peaks_from_daily(n.daily);
    std::vector<TimingPmf> pmfs;
    // Same target days as the peak-intensity forecasts.
    std::vector<Date> targets;
    for (auto r : rows_on_days(n.daily, days.target)) targets.push_back(n.daily.dates[r]);
    std::optional<HazardModel> hz;
    if (method == "hazard") {
      const auto j = detail::read_json(mpath);
      if (j.value("format", "") == "lvfc-hazard") hz = HazardModel::from_json(j);
    }
    std::vector<std::size_t> train;
    for (Date d : days.fit)
      if (auto i = peaks.index_of(d)) train.push_back(*i);
    for (Date d : targets) pmfs.push_back(hz ? hz->pmf(d) : climatology_pmf(peaks, train, d));
    write_timing_csv(os, n.id, pmfs);
  } else {
    throw DataError("unknown method '" + method + "'");
  }
  detail::write_text(out, os.str());
}

inline std::vector<std::string> forecast_methods(bool aggregated) {
  std::vector<std::string> m;
  for (const auto& s : halfhourly_methods(aggregated))
    if (s != "fusion") m.push_back(s);
  for (const auto& s : peak_methods(aggregated)) m.push_back(s);
  for (const auto& s : timing_methods()) m.push_back(s);
  return m;
}

inline StageResult cmd_forecast(const ExperimentConfig& cfg, const NodeSelection& sel = {}) {
  StageResult res;
  res.stage = "forecast";
  const ArtifactPaths P{cfg.out()};
  const auto nodes = manifest_nodes(detail::read_json(P.manifest()));
  const auto part = DataPartition::from_json(detail::read_json(P.partition()));
  std::vector<std::size_t> todo;
  for (std::size_t i = 0; i < nodes.size(); ++i)
    if (!sel.level || *sel.level == nodes[i].second) todo.push_back(i);
  std::vector<std::size_t> ok(todo.size(), 0);
  std::vector<std::vector<std::string>> fails(todo.size());
  const auto errors = parallel_for(todo.size(), cfg.jobs, [&](std::size_t t) {
    const auto& [id, level] = nodes[todo[t]];
    const auto n = detail::load_node(P, id, level);
    for (const auto& pname : cfg.partitions)
      for (const auto& method : forecast_methods(n.aggregated())) {
        if (!selected(sel, level, method)) continue;
        try {
          forecast_node_method(cfg, P, n, part, pname, method);
          ++ok[t];
        } catch (const std::exception& e) {
          fails[t].push_back(pname + "/" + id + "/" + method + ": " + e.what());
        }
      }
  });
  for (std::size_t t = 0; t < todo.size(); ++t) {
    res.ok += ok[t];
    for (auto& f : fails[t]) res.failures.push_back(f);
    if (!errors[t].empty()) res.failures.push_back(nodes[todo[t]].first + ": " + errors[t]);
  }
  return res;
}

// ---------------------------------------------------------------------------
// fuse

inline StageResult cmd_fuse(const ExperimentConfig& cfg, const NodeSelection& sel = {}) {
  StageResult res;
  res.stage = "fuse";
  const ArtifactPaths P{cfg.out()};
  const auto nodes = manifest_nodes(detail::read_json(P.manifest()));
  std::vector<std::size_t> todo;
  for (std::size_t i = 0; i < nodes.size(); ++i)
    if (!sel.level || *sel.level == nodes[i].second) todo.push_back(i);
  std::vector<std::size_t> ok(todo.size(), 0);
  std::vector<std::vector<std::string>> fails(todo.size());
  parallel_for(todo.size(), cfg.jobs, [&](std::size_t t) {
    const auto& [id, level] = nodes[todo[t]];
    for (const auto& pname : cfg.partitions) {
      try {
        auto base = read_forecast_csv(P.forecast(pname, id, "full"));
        const auto peak = read_forecast_csv(P.forecast(pname, id, "peak_full"));
        const auto pmfs = read_timing_csv(P.forecast(pname, id, "hazard"));
        // Fuse only days with a peak forecast and a timing pmf.
        std::set<Date> usable;
        for (const auto& p : pmfs)
          if (peak.find(p.day, 0)) usable.insert(p.day);
        DensityForecast b = base;
        b.days.clear(), b.periods.clear(), b.params.clear(), b.observed.clear();
        for (std::size_t i = 0; i < base.size(); ++i)
          if (usable.count(base.days[i])) {
            b.days.push_back(base.days[i]);
            b.periods.push_back(base.periods[i]);
            b.params.push_back(base.params[i]);
          }
        auto fused = fuse(b, peak, pmfs);
        std::ostringstream os;
        write_fused_csv(os, fused);
        detail::write_text(P.forecast(pname, id, "fusion"), os.str());
        const bool export_q = pname == cfg.quantile_export_partition &&
                              std::find(cfg.quantile_export_levels.begin(), cfg.quantile_export_levels.end(),
                                        to_string(level)) != cfg.quantile_export_levels.end();
        if (export_q) {
          std::ostringstream q;
          write_quantile_csv(q, fused);
          detail::write_text(P.quantiles(id, "fusion"), q.str());
        }
        ++ok[t];
      } catch (const std::exception& e) {
        fails[t].push_back(pname + "/" + id + "/fusion: " + e.what());
      }
    }
  });
  for (std::size_t t = 0; t < todo.size(); ++t) {
    res.ok += ok[t];
    for (auto& f : fails[t]) res.failures.push_back(f);
  }
  return res;
}

// ---------------------------------------------------------------------------
// evaluate

namespace detail {

//! Scores of one method on one node and partition, keyed by timestep.
struct MethodScores {
  std::string method;
  std::vector<Date> days;
  std::vector<int> periods;
  std::vector<double> scores;
  std::vector<double> pit;
};

struct NodeEvaluation {
  std::string node;
  Level level = Level::household;
  DailyPeakSeries peaks;
  // partition -> kind ("halfhourly", "peak", "timing") -> method -> scores
  std::map<std::string, std::map<std::string, std::map<std::string, MethodScores>>> parts;
};

inline std::map<std::pair<Date, int>, double> observations(const FeatureFrame& f) {
  std::map<std::pair<Date, int>, double> out;
  const auto y = f.column("y");
  for (std::size_t r = 0; r < f.rows(); ++r) out[{f.dates[r], f.periods[r]}] = y[r];
  return out;
}

template <typename Forecast>
void attach_observed(Forecast& f, const std::map<std::pair<Date, int>, double>& obs) {
  f.observed.resize(f.days.size());
  for (std::size_t i = 0; i < f.days.size(); ++i) f.observed[i] = obs.at({f.days[i], f.periods[i]});
}

}  // namespace detail

inline detail::NodeEvaluation evaluate_node(const ExperimentConfig& cfg, const ArtifactPaths& P, const std::string& id,
                                            Level level) {
  detail::NodeEvaluation ev;
  ev.node = id;
  ev.level = level;
  const bool agg = is_aggregated(level);
  const auto frame = detail::read_frame(P.features(id));
  const auto daily = detail::read_frame(P.daily(id));
  const auto obs = detail::observations(frame);
  const auto dobs = detail::observations(daily);
  ev.peaks = detail::peaks_from_daily(daily);
  const auto& peaks = ev.peaks;
  QuantileTables tables(cfg.crps_levels);

  for (const auto& pname : cfg.partitions) {
    auto& slot = ev.parts[pname];
    auto store = [&](const std::string& kind, const std::string& method, std::vector<Date> days, std::vector<int> periods,
                     std::vector<double> scores, std::vector<double> pit) {
      slot[kind][method] = {method, std::move(days), std::move(periods), std::move(scores), std::move(pit)};
    };
    auto parametric = [&](const std::string& kind, const std::string& method) {
      auto f = read_forecast_csv(P.forecast(pname, id, method));
      detail::attach_observed(f, kind == "peak" ? dobs : obs);
      std::vector<double> pit(f.size());
      for (std::size_t i = 0; i < f.size(); ++i) pit[i] = f.at(i).cdf(f.observed[i]);
      store(kind, method, f.days, f.periods, crps_scores(f, tables), std::move(pit));
    };
    auto kde = [&](const std::string& kind, const std::string& method) {
      auto m = std::make_shared<const KdeModel>(KdeModel::from_json(detail::read_json(P.model(pname, id, method))));
      auto f = read_kde_forecast_csv(P.forecast(pname, id, method), m);
      detail::attach_observed(f, kind == "peak" ? dobs : obs);
      std::vector<double> pit(f.size());
      for (std::size_t i = 0; i < f.size(); ++i) pit[i] = f.cell(i).cdf(f.observed[i]);
      store(kind, method, f.days, f.periods, crps_scores(f, tables), std::move(pit));
    };
    for (const auto& method : halfhourly_methods(agg)) {
      if (method == "fusion") {
        auto f = read_fused_csv(P.forecast(pname, id, method));
        detail::attach_observed(f, obs);
        std::vector<double> pit(f.size());
        for (std::size_t i = 0; i < f.size(); ++i) pit[i] = f.cells[i].cdf(f.observed[i]);
        store("halfhourly", method, f.days, f.periods, crps_scores(f, tables), std::move(pit));
      } else if (method.find("kde") != std::string::npos) {
        kde("halfhourly", method);
      } else {
        parametric("halfhourly", method);
      }
    }
    for (const auto& method : peak_methods(agg)) {
      if (method.find("kde") != std::string::npos)
        kde("peak", method);
      else
        parametric("peak", method);
    }
    for (const auto& method : timing_methods()) {
      const auto pmfs = read_timing_csv(P.forecast(pname, id, method));
      std::vector<Date> days;
      std::vector<double> s;
      for (const auto& p : pmfs) {
        const auto i = peaks.index_of(p.day);
        if (!i) continue;
        days.push_back(p.day);
        s.push_back(rps(p, peaks.peak_period[*i]));
      }
      std::vector<int> periods(days.size(), 0);
      store("timing", method, days, periods, s, {});
    }
  }
  return ev;
}

namespace detail {

//! Keeps only timesteps scored by every method of the group (they normally
//! coincide) and returns the common key order.
inline void align_methods(std::map<std::string, MethodScores>& group) {
  std::map<std::pair<Date, int>, int> count;
  for (const auto& [m, s] : group)
    for (std::size_t i = 0; i < s.days.size(); ++i) ++count[{s.days[i], s.periods[i]}];
  const int need = static_cast<int>(group.size());
  for (auto& [m, s] : group) {
    MethodScores t;
    t.method = s.method;
    std::vector<std::size_t> order(s.days.size());
    for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
    std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
      return std::make_pair(s.days[a], s.periods[a]) < std::make_pair(s.days[b], s.periods[b]);
    });
    for (auto i : order) {
      if (count[{s.days[i], s.periods[i]}] != need) continue;
      t.days.push_back(s.days[i]);
      t.periods.push_back(s.periods[i]);
      t.scores.push_back(s.scores[i]);
      if (!s.pit.empty()) t.pit.push_back(s.pit[i]);
    }
    s = std::move(t);
  }
}

inline std::string fmt(double x) { return format_double(x); }

}  // namespace detail

inline StageResult cmd_evaluate(const ExperimentConfig& cfg) {
  StageResult res;
  res.stage = "evaluate";
  const ArtifactPaths P{cfg.out()};
  const auto nodes = manifest_nodes(detail::read_json(P.manifest()));
  std::vector<detail::NodeEvaluation> evals(nodes.size());
  const auto errors = parallel_for(nodes.size(), cfg.jobs, [&](std::size_t i) {
    evals[i] = evaluate_node(cfg, P, nodes[i].first, nodes[i].second);
    for (auto& [pname, kinds] : evals[i].parts)
      for (auto& [kind, group] : kinds) detail::align_methods(group);
    // Per-timestep score files.
    for (const auto& [pname, kinds] : evals[i].parts) {
      std::ostringstream os;
      os << "node,partition,kind,method,date,period,score,peak\n";
      const auto& peaks = evals[i].peaks;
      for (const auto& [kind, group] : kinds)
        for (const auto& [method, s] : group)
          for (std::size_t k = 0; k < s.scores.size(); ++k) {
            const auto pi = peaks.index_of(s.days[k]);
            const bool is_peak = kind == "halfhourly" && pi && peaks.peak_period[*pi] == s.periods[k];
            os << nodes[i].first << ',' << pname << ',' << kind << ',' << method << ',' << s.days[k].iso() << ','
               << s.periods[k] << ',' << detail::fmt(s.scores[k]) << ',' << (is_peak ? 1 : 0) << '\n';
          }
      detail::write_text(P.scores(pname, nodes[i].first), os.str());
    }
  });
  for (std::size_t i = 0; i < nodes.size(); ++i) {
    if (errors[i].empty())
      ++res.ok;
    else
      res.failures.push_back(nodes[i].first + ": " + errors[i]);
  }

  // Partition groups reported: "cv" pools the folds.
  std::vector<std::pair<std::string, std::vector<std::string>>> groups;
  {
    std::vector<std::string> cv;
    for (const auto& p : cfg.partitions)
      if (p.rfind("cv", 0) == 0) cv.push_back(p);
    if (!cv.empty()) groups.push_back({"cv", cv});
    if (std::find(cfg.partitions.begin(), cfg.partitions.end(), "test") != cfg.partitions.end())
      groups.push_back({"test", {"test"}});
  }

  nlohmann::json summary;
  summary["format"] = "lvfc-summary";
  summary["version"] = 1;
  summary["crps_levels"] = cfg.crps_levels;
  summary["bootstrap"] = cfg.bootstrap;
  summary["evaluation_seed"] = cfg.evaluation_seed;
  nlohmann::json jnodes = nlohmann::json::array();
  nlohmann::json jlevels = nlohmann::json::object();
  std::ostringstream pit_csv, boot_csv;
  pit_csv << "level,partition,kind,method,bin,count\n";
  boot_csv << "level,partition,kind,subset,method,reference,resample,skill\n";

  const std::vector<std::string> kinds{"halfhourly", "peak", "timing"};
  for (Level level : {Level::primary, Level::secondary, Level::feeder, Level::household}) {
    const bool agg = is_aggregated(level);
    const std::string lname = to_string(level);
    std::vector<std::size_t> members;
    for (std::size_t i = 0; i < nodes.size(); ++i)
      if (nodes[i].second == level && errors[i].empty()) members.push_back(i);
    if (members.empty()) continue;
    auto& jl = jlevels[lname];
    jl["nodes"] = members.size();
    for (const auto& [gname, parts] : groups) {
      for (const auto& kind : kinds) {
        const auto& methods = kind == "halfhourly" ? halfhourly_methods(agg)
                              : kind == "peak"     ? peak_methods(agg)
                                                   : timing_methods();
        const std::string ref = kind == "halfhourly" ? reference_method(agg)
                                : kind == "peak"     ? peak_reference_method(agg)
                                                     : "climatology";
        const std::vector<std::string> subsets = kind == "halfhourly" ? std::vector<std::string>{"all", "peaks"}
                                                                      : std::vector<std::string>{"all"};
        for (const auto& subset : subsets) {
          std::map<std::string, std::vector<double>> pooled, pooled_pit;
          for (auto i : members) {
            const auto& ev = evals[i];
            std::map<std::string, std::vector<double>> node_scores;
            for (const auto& pn : parts) {
              const auto pit_it = ev.parts.find(pn);
              if (pit_it == ev.parts.end()) continue;
              const auto kit = pit_it->second.find(kind);
              if (kit == pit_it->second.end()) continue;
              for (const auto& [method, s] : kit->second) {
                std::vector<std::size_t> keep;
                if (subset == "peaks") {
                  keep = peak_subset(s.days, s.periods, ev.peaks);
                } else {
                  keep.resize(s.scores.size());
                  for (std::size_t k = 0; k < keep.size(); ++k) keep[k] = k;
                }
                auto& dst = node_scores[method];
                for (auto k : keep) dst.push_back(s.scores[k]);
                if (subset == "all" && !s.pit.empty()) {
                  auto& pp = pooled_pit[method];
                  for (auto k : keep) pp.push_back(s.pit[k]);
                }
              }
            }
            for (const auto& method : methods) {
              const auto it = node_scores.find(method);
              if (it == node_scores.end() || it->second.empty()) continue;
              jnodes.push_back({{"node", ev.node},
                                {"level", lname},
                                {"partition", gname},
                                {"kind", kind},
                                {"subset", subset},
                                {"method", method},
                                {"n", it->second.size()},
                                {"mean", it->second.empty() ? 0.0 : mean_of(it->second)}});
              auto& dst = pooled[method];
              dst.insert(dst.end(), it->second.begin(), it->second.end());
            }
          }
          if (pooled.empty() || !pooled.count(ref) || pooled.at(ref).empty()) continue;
          auto& js = jl[gname][kind][subset];
          // Bootstrap of pooled scores, the same resamples for every method.
          std::vector<std::string> present;
          std::vector<std::span<const double>> series;
          for (const auto& m : methods)
            if (pooled.count(m) && pooled.at(m).size() == pooled.at(ref).size()) {
              present.push_back(m);
              series.emplace_back(pooled.at(m));
            }
          const std::uint64_t seed =
              cfg.evaluation_seed ^ stable_hash(lname + "|" + gname + "|" + kind + "|" + subset);
          const auto means = bootstrap_means(series, cfg.bootstrap, seed);
          const auto ref_pos =
              static_cast<std::size_t>(std::find(present.begin(), present.end(), ref) - present.begin());
          const auto full_pos =
              static_cast<std::size_t>(std::find(present.begin(), present.end(), "full") - present.begin());
          for (std::size_t m = 0; m < present.size(); ++m) {
            const auto& v = pooled.at(present[m]);
            nlohmann::json e{{"n", v.size()}, {"mean", mean_of(v)}};
            const double mref = mean_of(pooled.at(ref));
            e["skill"] = mref > 0 ? skill(mean_of(v), mref) : 0.0;
            auto skills_vs = [&](std::size_t r) {
              std::vector<double> sk(static_cast<std::size_t>(cfg.bootstrap));
              for (std::size_t b = 0; b < sk.size(); ++b)
                sk[b] = means[r][b] > 0 ? 1.0 - means[m][b] / means[r][b] : 0.0;
              return sk;
            };
            const auto sk = skills_vs(ref_pos);
            e["skill_q025"] = sample_quantile(sk, 0.025);
            e["skill_q500"] = sample_quantile(sk, 0.5);
            e["skill_q975"] = sample_quantile(sk, 0.975);
            for (std::size_t b = 0; b < sk.size(); ++b)
              boot_csv << lname << ',' << gname << ',' << kind << ',' << subset << ',' << present[m] << ',' << ref
                       << ',' << b << ',' << detail::fmt(sk[b]) << '\n';
            if (present[m] == "fusion" && full_pos < present.size()) {
              const auto fk = skills_vs(full_pos);
              const double mfull = mean_of(pooled.at("full"));
              e["skill_vs_full"] = mfull > 0 ? skill(mean_of(v), mfull) : 0.0;
              e["skill_vs_full_q025"] = sample_quantile(fk, 0.025);
              e["skill_vs_full_q500"] = sample_quantile(fk, 0.5);
              e["skill_vs_full_q975"] = sample_quantile(fk, 0.975);
              for (std::size_t b = 0; b < fk.size(); ++b)
                boot_csv << lname << ',' << gname << ',' << kind << ',' << subset << ",fusion,full," << b << ','
                         << detail::fmt(fk[b]) << '\n';
            }
            const auto pit_it = pooled_pit.find(present[m]);
            if (pit_it != pooled_pit.end() && !pit_it->second.empty()) {
              const auto h = pit_histogram(pit_it->second);
              const auto chi = chi_square_uniformity(h);
              e["pit_chi2"] = chi.statistic;
              e["pit_p"] = chi.p_value;
              for (std::size_t b = 0; b < h.counts.size(); ++b)
                pit_csv << lname << ',' << gname << ',' << kind << ',' << present[m] << ',' << b << ','
                        << h.counts[b] << '\n';
            }
            js[present[m]] = e;
          }
          js["reference"] = ref;
        }
      }
    }
  }
  summary["levels"] = jlevels;
  summary["nodes"] = jnodes;
  detail::write_json(P.summary(), summary);
  detail::write_text(P.pit(), pit_csv.str());
  detail::write_text(P.bootstrap(), boot_csv.str());
  return res;
}

// ---------------------------------------------------------------------------
// report

namespace detail {

inline std::string cell(const nlohmann::json& j, const char* key, int digits = 4) {
  if (!j.is_object() || !j.contains(key)) return "-";
  char buf[64];
  std::snprintf(buf, sizeof(buf), "%.*f", digits, j.at(key).get<double>());
  return buf;
}

inline const nlohmann::json& path_or_null(const nlohmann::json& j, std::initializer_list<std::string> keys) {
  static const nlohmann::json null_json;
  const nlohmann::json* cur = &j;
  for (const auto& k : keys) {
    if (!cur->is_object() || !cur->contains(k)) return null_json;
    cur = &cur->at(k);
  }
  return *cur;
}

}  // namespace detail

//! Mean CRPS per level, subset and method for the cross-validation and test
//! partitions, with test skill against the level's reference and its
//! bootstrap interval.
inline StageResult cmd_report(const ExperimentConfig& cfg) {
  StageResult res;
  res.stage = "report";
  const ArtifactPaths P{cfg.out()};
  const auto summary = detail::read_json(P.summary());
  const auto& levels = summary.at("levels");
  std::ostringstream md, csv;
  md << "# Forecast evaluation\n\n";
  md << "Mean CRPS (kWh) by level and method. Skill is relative to the level's reference method on the "
        "test partition, with a 95% bootstrap interval.\n\n";
  csv << "level,kind,subset,method,cv_mean,test_mean,test_skill,skill_q025,skill_q975\n";
  for (const auto& lname : {"primary", "secondary", "feeder", "household"}) {
    if (!levels.contains(lname)) continue;
    const auto& L = levels.at(lname);
    md << "## " << lname << " (" << L.value("nodes", 0) << " nodes)\n\n";
    md << "| kind | subset | method | CV | test | test skill | 95% interval |\n";
    md << "|---|---|---|---|---|---|---|\n";
    for (const auto& kind : {"halfhourly", "peak", "timing"})
      for (const auto& subset : {"all", "peaks"}) {
        const auto& T = detail::path_or_null(L, {"test", kind, subset});
        const auto& C = detail::path_or_null(L, {"cv", kind, subset});
        if (T.is_null() && C.is_null()) continue;
        const auto& src = T.is_null() ? C : T;
        for (auto it = src.begin(); it != src.end(); ++it) {
          if (!it.value().is_object()) continue;
          const auto& m = it.key();
          const auto& t = detail::path_or_null(T, {m});
          const auto& c = detail::path_or_null(C, {m});
          md << "| " << kind << " | " << subset << " | " << m << " | " << detail::cell(c, "mean") << " | "
             << detail::cell(t, "mean") << " | " << detail::cell(t, "skill", 3) << " | ["
             << detail::cell(t, "skill_q025", 3) << ", " << detail::cell(t, "skill_q975", 3) << "] |\n";
          csv << lname << ',' << kind << ',' << subset << ',' << m << ',' << detail::cell(c, "mean", 6) << ','
              << detail::cell(t, "mean", 6) << ',' << detail::cell(t, "skill", 6) << ','
              << detail::cell(t, "skill_q025", 6) << ',' << detail::cell(t, "skill_q975", 6) << '\n';
        }
      }
    md << '\n';
  }
  detail::write_text(P.report(), md.str());
  detail::write_text(P.table(), csv.str());
  res.ok = 1;
  return res;
}

//! All stages in order; stops at the first stage that produced nothing.
inline std::vector<StageResult> run_all(const ExperimentConfig& cfg) {
  std::vector<StageResult> out;
  for (auto stage : std::initializer_list<StageResult (*)(const ExperimentConfig&)>{
           &cmd_build, [](const ExperimentConfig& c) { return cmd_fit(c); },
           [](const ExperimentConfig& c) { return cmd_forecast(c); }, [](const ExperimentConfig& c) { return cmd_fuse(c); },
           &cmd_evaluate, &cmd_report}) {
    out.push_back(stage(cfg));
    if (out.back().exit_code() == 1) break;
  }
  return out;
}

}  // namespace lvfc
