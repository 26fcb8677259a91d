#pragma once

// Daily peak timing as a discrete time-to-event problem: person-period
// expansion, a logistic hazard GAM, and conversion of hazards to a pmf.

#include <array>
#include <cmath>
#include <ostream>
#include <span>
#include <string>
#include <vector>

#include "lvfc/calendar.hpp"
#include "lvfc/common.hpp"
#include "lvfc/dataset.hpp"
#include "lvfc/gamlss.hpp"

namespace lvfc {

struct HazardRecord {
  Date day;
  int period = 1;  // 1..48
  int event = 0;
  int doy = 1;
  int daytype2 = 0;
};

//! One record per period up to and including the day's peak period; only
//! the last carries the event.
inline std::vector<HazardRecord> expand_to_person_period(const DailyPeakSeries& peaks,
                                                         std::span<const std::size_t> day_indices) {
  std::vector<HazardRecord> out;
  for (auto i : day_indices) {
    const Date d = peaks.days[i];
    const int hp = peaks.peak_period[i];
    if (hp < 1 || hp > kPeriodsPerDay) throw DataError("peak period out of range on " + d.iso());
    for (int h = 1; h <= hp; ++h) out.push_back({d, h, h == hp ? 1 : 0, d.day_of_year(), day_type2(d)});
  }
  return out;
}

inline std::vector<HazardRecord> expand_to_person_period(const DailyPeakSeries& peaks) {
  std::vector<std::size_t> idx(peaks.size());
  for (std::size_t i = 0; i < idx.size(); ++i) idx[i] = i;
  return expand_to_person_period(peaks, idx);
}

//! Frame with columns y (event), period, doy, daytype2.
inline FeatureFrame hazard_frame(std::span<const HazardRecord> records, const std::string& node = "") {
  FeatureFrame f;
  f.node_id = node;
  for (const auto& r : records) {
    f.dates.push_back(r.day);
    f.periods.push_back(r.period);
  }
  f.available.assign(records.size(), 1);
  auto& y = f.add_column("y");
  auto& period = f.add_column("period");
  auto& doy = f.add_column("doy");
  auto& dt2 = f.add_column("daytype2");
  for (std::size_t i = 0; i < records.size(); ++i) {
    y[i] = records[i].event;
    period[i] = records[i].period;
    doy[i] = records[i].doy;
    dt2[i] = records[i].daytype2;
  }
  return f;
}

//! 48 rows for one day, one per period.
inline FeatureFrame hazard_query_frame(Date d) {
  std::vector<HazardRecord> rec;
  for (int h = 1; h <= kPeriodsPerDay; ++h) rec.push_back({d, h, 0, d.day_of_year(), day_type2(d)});
  return hazard_frame(rec);
}

//! Aggregated nodes: tensor(period, day-of-year cyclic) + day-type-2 effect.
//! Households: pb(period) + pbc(day-of-year).
inline ModelSpec hazard_spec(bool aggregated) {
  auto s = ModelSpec::intercept_only(Family::bernoulli, aggregated ? "hazard_aggregated" : "hazard_household");
  auto& terms = s.params[0].terms;
  if (aggregated) {
    auto t = tensor_term("period", "doy", 8, 8);
    t.cyclic2 = true;
    t.cyclic_lo2 = 1.0;
    t.period2 = 365.0;
    terms.push_back(t);
    terms.push_back(dummies_term("daytype2", 2));
  } else {
    terms.push_back(pb_term("period", 10));
    terms.push_back(pbc_term("doy", 1.0, 365.0, 10));
  }
  return s;
}

// ---------------------------------------------------------------------------
// hazard <-> pmf

//! S(h) = prod_{s <= h} (1 - lambda(s)).
inline std::vector<double> survival(std::span<const double> hazards) {
  std::vector<double> S(hazards.size());
  double s = 1.0;
  for (std::size_t h = 0; h < hazards.size(); ++h) {
    s *= 1.0 - hazards[h];
    S[h] = s;
  }
  return S;
}

//! f(h) = lambda(h) S(h - 1), with the residual S(N) added to the last bin.
inline std::vector<double> hazard_to_pmf(std::span<const double> hazards) {
  if (hazards.empty()) throw std::invalid_argument("hazard_to_pmf: empty hazard vector");
  std::vector<double> f(hazards.size());
  double s = 1.0;
  for (std::size_t h = 0; h < hazards.size(); ++h) {
    const double l = hazards[h];
    if (!(l >= 0.0 && l <= 1.0)) throw std::domain_error("hazard outside [0, 1]");
    f[h] = l * s;
    s *= 1.0 - l;
  }
  f.back() += s;
  return f;
}

//! lambda(h) = f(h) / S(h - 1) for h < N; NaN where the survival is zero.
inline std::vector<double> pmf_to_hazard(std::span<const double> pmf) {
  std::vector<double> out(pmf.size());
  double s = 1.0;
  for (std::size_t h = 0; h < pmf.size(); ++h) {
    out[h] = s > 0 ? pmf[h] / s : kNaN;
    s -= pmf[h];
  }
  return out;
}

struct TimingPmf {
  Date day;
  std::array<double, kPeriodsPerDay> prob{};

  double weight(int period) const { return prob[static_cast<std::size_t>(period - 1)]; }

  //! Cumulative probability up to and including `period`.
  double cdf(int period) const {
    double acc = 0.0;
    for (int h = 1; h <= period; ++h) acc += prob[static_cast<std::size_t>(h - 1)];
    return acc;
  }

  double total() const {
    double acc = 0.0;
    for (double p : prob) acc += p;
    return acc;
  }
};

inline TimingPmf make_timing_pmf(Date d, std::span<const double> pmf) {
  if (pmf.size() != kPeriodsPerDay) throw std::invalid_argument("timing pmf must have 48 entries");
  TimingPmf t;
  t.day = d;
  std::copy(pmf.begin(), pmf.end(), t.prob.begin());
  return t;
}

// ---------------------------------------------------------------------------
// fitted hazard model

class HazardModel {
 public:
  FittedModel model;
  bool aggregated = true;

  std::vector<double> hazards(Date d) const {
    const auto f = hazard_query_frame(d);
    const auto pars = model.predict(f);
    std::vector<double> out(kPeriodsPerDay);
    for (std::size_t h = 0; h < out.size(); ++h) out[h] = pars[h][0];
    return out;
  }

  TimingPmf pmf(Date d) const {
    const auto h = hazards(d);
    return make_timing_pmf(d, hazard_to_pmf(h));
  }

  nlohmann::json to_json() const {
    return {{"format", "lvfc-hazard"}, {"version", 1}, {"aggregated", aggregated}, {"model", model.to_json()}};
  }

  static HazardModel from_json(const nlohmann::json& j) {
    if (j.value("format", "") != "lvfc-hazard") throw DataError("not a hazard model document");
    HazardModel m;
    m.aggregated = j.at("aggregated");
    m.model = FittedModel::from_json(j.at("model"));
    return m;
  }
};

struct HazardOptions {
  int min_days = 60;
  FitOptions fit;
};

//! Fits the hazard GAM on the given training days.
inline HazardModel fit_hazard(const DailyPeakSeries& peaks, std::span<const std::size_t> day_indices,
                              bool aggregated, const HazardOptions& opts = {}) {
  if (static_cast<int>(day_indices.size()) < opts.min_days)
    throw FitError("hazard model for '" + peaks.node_id + "' needs at least " + std::to_string(opts.min_days) +
                   " days, got " + std::to_string(day_indices.size()));
  const auto records = expand_to_person_period(peaks, day_indices);
  const auto frame = hazard_frame(records, peaks.node_id);
  HazardModel m;
  m.aggregated = aggregated;
  m.model = fit(hazard_spec(aggregated), frame, opts.fit);
  if (!m.model.convergence.converged)
    log(LogLevel::warn, "hazard model for '" + peaks.node_id + "' did not converge");
  return m;
}

// ---------------------------------------------------------------------------
// climatology benchmark

struct ClimatologyOptions {
  int window = 45;        // days either side, circular in day-of-year
  double smoothing = 0.5; // added to every bin
};

inline int circular_doy_distance(int a, int b) {
  const int d = std::abs(a - b) % 365;
  return std::min(d, 365 - d);
}

//! Relative frequency of training peak periods within a circular
//! day-of-year window around the query day, restricted to the query's
//! day-type-2 and smoothed by adding `smoothing` to each bin.
inline TimingPmf climatology_pmf(const DailyPeakSeries& peaks, std::span<const std::size_t> training_days, Date query,
                                 const ClimatologyOptions& opts = {}) {
  if (training_days.empty()) throw DataError("climatology needs training days");
  std::array<double, kPeriodsPerDay> counts{};
  std::size_t used = 0;
  const int qd = query.day_of_year();
  const int qt = day_type2(query);
  for (auto i : training_days) {
    const Date d = peaks.days[i];
    if (day_type2(d) != qt || circular_doy_distance(d.day_of_year(), qd) > opts.window) continue;
    counts[static_cast<std::size_t>(peaks.peak_period[i] - 1)] += 1.0;
    ++used;
  }
  if (used == 0) {
    log(LogLevel::info, "climatology window empty for " + query.iso() + "; using all training days");
    for (auto i : training_days) counts[static_cast<std::size_t>(peaks.peak_period[i] - 1)] += 1.0;
    used = training_days.size();
  }
  TimingPmf t;
  t.day = query;
  const double denom = static_cast<double>(used) + opts.smoothing * kPeriodsPerDay;
  for (std::size_t h = 0; h < counts.size(); ++h) t.prob[h] = (counts[h] + opts.smoothing) / denom;
  return t;
}

inline void write_timing_csv(std::ostream& os, const std::string& node, std::span<const TimingPmf> pmfs) {
  os << "node,date,h,probability\n";
  for (const auto& p : pmfs)
    for (int h = 1; h <= kPeriodsPerDay; ++h)
      os << node << ',' << p.day.iso() << ',' << h << ',' << format_double(p.weight(h)) << '\n';
}

}  // namespace lvfc
