#pragma once

// Model roster: half-hourly and daily peak-intensity specs for aggregated
// and household nodes plus their benchmarks, and day-ahead forecasts.

#include <algorithm>
#include <memory>
#include <optional>
#include <ostream>
#include <span>
#include <string>
#include <vector>

#include "lvfc/calendar.hpp"
#include "lvfc/distributions.hpp"
#include "lvfc/frame.hpp"
#include "lvfc/gamlss.hpp"
#include "lvfc/kde.hpp"

namespace lvfc {

//! Floor applied to household responses before fitting a positive family.
inline constexpr double kPositiveFloor = 1e-3;

//! Basis sizes used by the roster.
struct RosterOptions {
  int period_k = 10;
  int doy_k = 10;
  int annual_k = 6;  // very smooth annual term in half-hourly models
};

//! Gaussian. mu: lag1, lag7, peak_lag1, per-period slopes on lag1 and
//! peak_lag1, a period-of-day curve per day-type-3, an annual cycle.
//! sigma: period-of-day curve.
inline ModelSpec spec_halfhourly_aggregated(const RosterOptions& o = {}) {
  auto s = ModelSpec::intercept_only(Family::gaussian, "full");
  auto& mu = s.params[0].terms;
  mu.push_back(linear_term("lag1"));
  mu.push_back(linear_term("lag7"));
  mu.push_back(linear_term("peak_lag1"));
  mu.push_back(factor_by_linear_term("lag1", "period", kPeriodsPerDay, 1));
  mu.push_back(factor_by_linear_term("peak_lag1", "period", kPeriodsPerDay, 1));
  mu.push_back(pvc_term("period", "daytype3", 3, o.period_k));
  mu.push_back(pbc_term("doy", 1.0, 365.0, o.annual_k));
  s.params[1].terms.push_back(pb_term("period", o.period_k));
  return s;
}

//! Generalised Beta Prime. mu: lag1, lag7, day-of-week effects, period and
//! annual curves; sigma: period curve; nu, tau constant.
inline ModelSpec spec_halfhourly_household(const RosterOptions& o = {}) {
  auto s = ModelSpec::intercept_only(Family::gbp, "full");
  s.response_floor = kPositiveFloor;
  auto& mu = s.params[0].terms;
  mu.push_back(linear_term("lag1"));
  mu.push_back(linear_term("lag7"));
  mu.push_back(effects_term("dow", 7));
  mu.push_back(pb_term("period", o.period_k));
  mu.push_back(pbc_term("doy", 1.0, 365.0, o.annual_k));
  s.params[1].terms.push_back(pb_term("period", o.period_k));
  return s;
}

//! Daily peak, Gaussian. mu: peak lags, yesterday's std, annual cycle,
//! weekday/weekend; sigma: weekday/weekend and yesterday's std.
inline ModelSpec spec_peak_intensity_aggregated(const RosterOptions& o = {}) {
  auto s = ModelSpec::intercept_only(Family::gaussian, "peak_full");
  auto& mu = s.params[0].terms;
  mu.push_back(linear_term("peak_lag1"));
  mu.push_back(linear_term("peak_lag7"));
  mu.push_back(linear_term("sd_lag1"));
  mu.push_back(pbc_term("doy", 1.0, 365.0, o.doy_k));
  mu.push_back(effects_term("daytype2", 2));
  auto& sg = s.params[1].terms;
  sg.push_back(effects_term("daytype2", 2));
  sg.push_back(linear_term("sd_lag1"));
  return s;
}

//! Daily peak, Generalised Beta Prime. The empty-house lag enters mu, sigma
//! and nu only when the feature is enabled for the household.
inline ModelSpec spec_peak_intensity_household(bool empty_enabled, const RosterOptions& o = {}) {
  auto s = ModelSpec::intercept_only(Family::gbp, "peak_full");
  s.response_floor = kPositiveFloor;
  auto& mu = s.params[0].terms;
  mu.push_back(linear_term("peak_lag1"));
  mu.push_back(linear_term("peak_lag7"));
  mu.push_back(pb_term("doy", o.doy_k));
  mu.push_back(effects_term("daytype2", 2));
  if (empty_enabled) {
    mu.push_back(linear_term("empty_lag1"));
    s.params[1].terms.push_back(linear_term("empty_lag1"));
    s.params[2].terms.push_back(linear_term("empty_lag1"));
  }
  return s;
}

//! Gaussian. mu: lag1, lag7, period curve; sigma: period curve.
inline ModelSpec spec_benchmark_simple_aggregated(const RosterOptions& o = {}) {
  auto s = ModelSpec::intercept_only(Family::gaussian, "simple");
  auto& mu = s.params[0].terms;
  mu.push_back(linear_term("lag1"));
  mu.push_back(linear_term("lag7"));
  mu.push_back(pb_term("period", o.period_k));
  s.params[1].terms.push_back(pb_term("period", o.period_k));
  return s;
}

//! Generalised Beta Prime with mu and sigma smooth in period only.
inline ModelSpec spec_benchmark_simple_household(const RosterOptions& o = {}) {
  auto s = ModelSpec::intercept_only(Family::gbp, "simple");
  s.response_floor = kPositiveFloor;
  s.params[0].terms.push_back(pb_term("period", o.period_k));
  s.params[1].terms.push_back(pb_term("period", o.period_k));
  return s;
}

//! Daily peak on its own lags; other parameters constant.
inline ModelSpec spec_benchmark_peak_simple(bool aggregated) {
  auto s = ModelSpec::intercept_only(aggregated ? Family::gaussian : Family::gbp, "peak_simple");
  if (!aggregated) s.response_floor = kPositiveFloor;
  s.params[0].terms.push_back(linear_term("peak_lag1"));
  s.params[0].terms.push_back(linear_term("peak_lag7"));
  return s;
}

// ---------------------------------------------------------------------------
// forecasts

//! Parametric day-ahead forecasts for one node: one entry per target
//! timestep (period 0 for daily targets).
struct DensityForecast {
  std::string node;
  std::string method;
  Family family = Family::gaussian;
  std::vector<Date> days;
  std::vector<int> periods;
  std::vector<ParamVector> params;
  std::vector<double> observed;      // realised target, NaN if unknown
  std::vector<std::string> skipped;  // "date period: reason"

  std::size_t size() const { return days.size(); }
  Distribution at(std::size_t i) const { return {family, params[i]}; }

  std::optional<std::size_t> find(Date d, int period) const {
    auto it = std::lower_bound(days.begin(), days.end(), d);
    for (; it != days.end() && *it == d; ++it) {
      const auto i = static_cast<std::size_t>(it - days.begin());
      if (periods[i] == period) return i;
    }
    return std::nullopt;
  }
};

namespace detail {

inline std::vector<std::size_t> target_rows(const FeatureFrame& frame, std::span<const Date> target_days,
                                            std::vector<std::string>* skipped) {
  std::vector<Date> sorted(target_days.begin(), target_days.end());
  std::sort(sorted.begin(), sorted.end());
  std::vector<std::size_t> rows;
  for (std::size_t r = 0; r < frame.rows(); ++r) {
    if (!std::binary_search(sorted.begin(), sorted.end(), frame.dates[r])) continue;
    if (frame.available[r])
      rows.push_back(r);
    else if (skipped)
      skipped->push_back(frame.dates[r].iso() + " " + std::to_string(frame.periods[r]) + ": lag data unavailable");
  }
  return rows;
}

}  // namespace detail

//! Issues forecasts for every timestep of the target days. Rows whose lag
//! covariates are unavailable are skipped and reported.
inline DensityForecast forecast_day_ahead(const FittedModel& model, const FeatureFrame& frame,
                                          std::span<const Date> target_days, std::string method = "") {
  DensityForecast f;
  f.node = frame.node_id;
  f.method = method.empty() ? model.spec.name : std::move(method);
  f.family = model.spec.family;
  const auto rows = detail::target_rows(frame, target_days, &f.skipped);
  f.params = model.predict(frame, rows);
  const bool has_y = frame.has(model.spec.response);
  for (auto r : rows) {
    f.days.push_back(frame.dates[r]);
    f.periods.push_back(frame.periods[r]);
    f.observed.push_back(has_y ? frame.column(model.spec.response)[r] : kNaN);
  }
  for (std::size_t i = 0; i < f.size(); ++i)
    if (!valid_params(f.family, f.params[i]))
      throw FitError("model '" + model.spec.name + "' produced invalid parameters for " + f.days[i].iso());
  return f;
}

//! Kernel density forecasts: one conditioning cell per target timestep.
struct KdeForecast {
  std::string node;
  std::string method;
  std::shared_ptr<const KdeModel> model;
  std::vector<Date> days;
  std::vector<int> periods;
  std::vector<std::size_t> cells;
  std::vector<double> observed;

  std::size_t size() const { return days.size(); }
  const KdeCell& cell(std::size_t i) const { return model->cell(cells[i]); }
};

inline KdeForecast forecast_kde(std::shared_ptr<const KdeModel> model, const FeatureFrame& frame,
                                std::span<const Date> target_days, std::string method,
                                const std::string& response = "y") {
  KdeForecast f;
  f.node = frame.node_id;
  f.method = std::move(method);
  f.model = std::move(model);
  // Same target rows as the parametric forecasts so scores align.
  const auto rows = detail::target_rows(frame, target_days, nullptr);
  for (auto r : rows) {
    f.days.push_back(frame.dates[r]);
    f.periods.push_back(frame.periods[r]);
    f.cells.push_back(f.model->cell_of(frame, r));
    f.observed.push_back(frame.column(response)[r]);
  }
  return f;
}

// ---------------------------------------------------------------------------
// export

//! Percent levels 1..99 used by quantile tables.
inline std::vector<double> percent_levels() {
  std::vector<double> p;
  for (int k = 1; k <= 99; ++k) p.push_back(k / 100.0);
  return p;
}

inline void write_quantile_header(std::ostream& os) {
  os << "node,date,period,method";
  for (int k = 1; k <= 99; ++k) os << ",q" << (k < 10 ? "0" : "") << k;
  os << '\n';
}

//! One quantile-table row; `q` has the 99 percent quantiles.
inline void write_quantile_row(std::ostream& os, const std::string& node, Date d, int period, const std::string& method,
                               std::span<const double> q) {
  os << node << ',' << d.iso() << ',' << period << ',' << method;
  for (double v : q) os << ',' << format_double(v);
  os << '\n';
}

inline void write_forecast_csv(std::ostream& os, const DensityForecast& f, bool header = true) {
  if (header) os << "node,date,period,method,family,theta1,theta2,theta3,theta4\n";
  const std::size_t np = parameter_count(f.family);
  for (std::size_t i = 0; i < f.size(); ++i) {
    os << f.node << ',' << f.days[i].iso() << ',' << f.periods[i] << ',' << f.method << ',' << to_string(f.family);
    for (std::size_t k = 0; k < 4; ++k) os << ',' << (k < np ? format_double(f.params[i][k]) : "NA");
    os << '\n';
  }
}

inline void write_quantile_csv(std::ostream& os, const DensityForecast& f, bool header = true) {
  if (header) write_quantile_header(os);
  const auto levels = percent_levels();
  std::vector<double> q(levels.size());
  for (std::size_t i = 0; i < f.size(); ++i) {
    const auto d = f.at(i);
    for (std::size_t k = 0; k < levels.size(); ++k) q[k] = d.quantile(levels[k]);
    write_quantile_row(os, f.node, f.days[i], f.periods[i], f.method, q);
  }
}

}  // namespace lvfc
