#pragma once

// Forecast fusion: per half-hour linear pool of the half-hourly predictive
// CDF and the daily peak-intensity CDF, weighted by the probability that the
// daily peak falls in that half-hour.

#include <algorithm>
#include <cmath>
#include <map>
#include <optional>
#include <ostream>
#include <span>
#include <string>
#include <vector>

#include <boost/math/tools/roots.hpp>

#include "lvfc/distributions.hpp"
#include "lvfc/forecasters.hpp"
#include "lvfc/timing.hpp"

namespace lvfc {

//! F(y) = (1 - w) F_base(y) + w F_peak(y).
struct FusedCell {
  Distribution base;
  Distribution peak;
  double weight = 0.0;

  double cdf(double y) const {
    if (weight == 0.0) return base.cdf(y);
    if (weight == 1.0) return peak.cdf(y);
    return (1.0 - weight) * base.cdf(y) + weight * peak.cdf(y);
  }

  double pdf(double y) const { return (1.0 - weight) * base.pdf(y) + weight * peak.pdf(y); }

  double sample(Rng& rng) const {
    return uniform_open(rng) < weight ? lvfc::sample(peak.family, peak.params, rng)
                                      : lvfc::sample(base.family, base.params, rng);
  }
};

inline double fused_cdf(const FusedCell& c, double y) { return c.cdf(y); }

//! Root of F(y) = p with |F(y) - p| < 1e-8, bracketed by the extreme
//! component quantiles and widened geometrically when needed.
inline double fused_quantile(const FusedCell& c, double p) {
  if (!(p > 0.0 && p < 1.0)) throw std::domain_error("quantile needs p in (0, 1)");
  if (c.weight == 0.0) return c.base.quantile(p);
  if (c.weight == 1.0) return c.peak.quantile(p);
  double lo = std::min(c.base.quantile(1e-6), c.peak.quantile(1e-6));
  double hi = std::max(c.base.quantile(1.0 - 1e-6), c.peak.quantile(1.0 - 1e-6));
  const bool positive = c.base.family != Family::gaussian && c.peak.family != Family::gaussian;
  double span = std::max(hi - lo, 1e-12);
  for (int it = 0; c.cdf(lo) > p; ++it) {
    if (it > 200) throw std::runtime_error("fused_quantile: lower bracket failed");
    lo = positive ? lo * 0.5 : lo - span;
    span *= 2.0;
  }
  span = std::max(hi - lo, 1e-12);
  for (int it = 0; c.cdf(hi) < p; ++it) {
    if (it > 200) throw std::runtime_error("fused_quantile: upper bracket failed");
    hi += span;
    span *= 2.0;
  }
  auto g = [&](double y) { return c.cdf(y) - p; };
  const double glo = g(lo), ghi = g(hi);
  if (glo == 0.0) return lo;
  if (ghi == 0.0) return hi;
  std::uintmax_t iters = 300;
  auto tol = [&](double a, double b) { return std::abs(b - a) <= 1e-15 * std::max(std::abs(a), 1e-300); };
  const auto r = boost::math::tools::toms748_solve(g, lo, hi, glo, ghi, tol, iters);
  const double a = r.first, b = r.second;
  const double x = std::abs(g(a)) <= std::abs(g(b)) ? a : b;
  if (!(std::abs(g(x)) < 1e-8)) {
    // Plain bisection fallback on the final interval.
    double l = lo, h = hi;
    for (int i = 0; i < 400; ++i) {
      const double m = 0.5 * (l + h);
      const double gm = g(m);
      if (std::abs(gm) < 1e-10) return m;
      (gm < 0 ? l : h) = m;
    }
    return 0.5 * (l + h);
  }
  return x;
}

//! Fused forecasts for one node over whole days.
struct FusedForecast {
  std::string node;
  std::string method = "fusion";
  std::vector<Date> days;
  std::vector<int> periods;
  std::vector<FusedCell> cells;
  std::vector<double> observed;

  std::size_t size() const { return cells.size(); }

  std::optional<std::size_t> find(Date d, int period) const {
    auto it = std::lower_bound(days.begin(), days.end(), d);
    for (; it != days.end() && *it == d; ++it) {
      const auto i = static_cast<std::size_t>(it - days.begin());
      if (periods[i] == period) return i;
    }
    return std::nullopt;
  }

  const FusedCell& cell(Date d, int period) const {
    const auto i = find(d, period);
    if (!i) throw std::out_of_range("no fused cell for " + d.iso() + " period " + std::to_string(period));
    return cells[*i];
  }

  double cdf(Date d, int period, double y) const { return cell(d, period).cdf(y); }
  double quantile(Date d, int period, double p) const { return fused_quantile(cell(d, period), p); }
};

//! Pools each half-hourly entry with the day's peak forecast using the
//! timing pmf of that day. Every base day needs all 48 periods, a peak
//! entry and a pmf; otherwise the missing cells are listed in the error.
inline FusedForecast fuse(const DensityForecast& base, const DensityForecast& peak, std::span<const TimingPmf> weights) {
  std::map<Date, const TimingPmf*> w;
  for (const auto& t : weights) w[t.day] = &t;
  std::map<Date, std::vector<std::size_t>> by_day;
  for (std::size_t i = 0; i < base.size(); ++i) by_day[base.days[i]].push_back(i);

  std::vector<std::string> missing;
  for (const auto& [d, idx] : by_day) {
    std::vector<bool> seen(kPeriodsPerDay + 1, false);
    for (auto i : idx)
      if (base.periods[i] >= 1 && base.periods[i] <= kPeriodsPerDay) seen[static_cast<std::size_t>(base.periods[i])] = true;
    for (int h = 1; h <= kPeriodsPerDay; ++h)
      if (!seen[static_cast<std::size_t>(h)]) missing.push_back(d.iso() + " " + std::to_string(h) + " (half-hourly)");
    if (!peak.find(d, 0)) missing.push_back(d.iso() + " (peak intensity)");
    if (!w.count(d)) missing.push_back(d.iso() + " (timing pmf)");
  }
  if (!missing.empty()) {
    std::string msg = "fusion inputs for '" + base.node + "' do not cover " + std::to_string(missing.size()) + " cells:";
    for (std::size_t i = 0; i < missing.size() && i < 20; ++i) msg += " [" + missing[i] + "]";
    if (missing.size() > 20) msg += " ...";
    throw DataError(msg);
  }

  FusedForecast out;
  out.node = base.node;
  for (const auto& [d, idx] : by_day) {
    const Distribution pk = peak.at(*peak.find(d, 0));
    const TimingPmf& t = *w.at(d);
    for (auto i : idx) {
      out.days.push_back(d);
      out.periods.push_back(base.periods[i]);
      out.cells.push_back({base.at(i), pk, t.weight(base.periods[i])});
      out.observed.push_back(base.observed.empty() ? kNaN : base.observed[i]);
    }
  }
  return out;
}

inline void write_quantile_csv(std::ostream& os, const FusedForecast& f, bool header = true) {
  if (header) write_quantile_header(os);
  const auto levels = percent_levels();
  std::vector<double> q(levels.size());
  for (std::size_t i = 0; i < f.size(); ++i) {
    for (std::size_t k = 0; k < levels.size(); ++k) q[k] = fused_quantile(f.cells[i], levels[k]);
    write_quantile_row(os, f.node, f.days[i], f.periods[i], f.method, q);
  }
}

}  // namespace lvfc
