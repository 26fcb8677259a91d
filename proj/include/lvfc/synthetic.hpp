#pragma once

// Synthetic smart-meter households for desk-scale runs: two daily peaks,
// an evening peak whose timing moves with the season and from day to day,
// weekend behaviour, persistent daily level changes and occasional empty
// spells.

#include <algorithm>
#include <cmath>
#include <ostream>
#include <string>
#include <vector>

#include "lvfc/calendar.hpp"
#include "lvfc/common.hpp"
#include "lvfc/dataset.hpp"

namespace lvfc {

struct SyntheticOptions {
  int households = 50;
  int year = 2013;
  std::uint64_t seed = 1;
  double empty_fraction = 0.1;  // share of households with a ~40 day empty spell
  int incomplete = 0;           // households missing one random day
  bool drop_dst_days = true;
  double common_jitter = 1.5;   // sd (periods) of the evening-peak shift shared by all households
  double own_jitter = 1.0;      // sd (periods) of each household's own shift
};

namespace detail {

inline double bump(double h, double centre, double width) {
  const double z = (h - centre) / width;
  return std::exp(-0.5 * z * z);
}

}  // namespace detail

inline std::vector<LoadSeries> synthesize_households(const SyntheticOptions& o) {
  if (o.households < 1) throw std::invalid_argument("synthesize_households: need at least one household");
  Rng common(o.seed ^ 0x9e3779b97f4a7c15ULL);
  std::vector<Date> days;
  for (Date d = Date::from_ymd(o.year, 1, 1); d.year() == o.year; d = d + 1)
    if (!(o.drop_dst_days && is_dst_transition(d))) days.push_back(d);

  // Shared day-to-day shift of the evening peak and a shared level factor.
  std::vector<double> shift(days.size()), shared_level(days.size());
  double lvl = 0.0;
  for (std::size_t i = 0; i < days.size(); ++i) {
    shift[i] = o.common_jitter * standard_normal(common);
    lvl = 0.6 * lvl + 0.08 * standard_normal(common);
    shared_level[i] = lvl;
  }

  std::vector<LoadSeries> out;
  for (int k = 0; k < o.households; ++k) {
    Rng rng(o.seed * 1000003ULL + static_cast<std::uint64_t>(k) + 17);
    const double base = 0.06 + 0.12 * uniform_open(rng);
    const double morning_amp = 0.1 + 0.3 * uniform_open(rng);
    const double morning_at = 14.0 + 2.0 * uniform_open(rng);
    const double evening_amp = 0.5 + 0.9 * uniform_open(rng);
    const double evening_at = 36.0 + 3.0 * uniform_open(rng);
    const double evening_width = 1.2 + 1.0 * uniform_open(rng);
    const double midday = 0.05 + 0.15 * uniform_open(rng);
    const double noise_sd = 0.15 + 0.15 * uniform_open(rng);
    const double season_amp = 0.15 + 0.25 * uniform_open(rng);
    const double spike_rate = 0.03 + 0.05 * uniform_open(rng);
    const double spike_size = 0.2 + 0.4 * uniform_open(rng);

    int empty_start = -1;
    if (uniform_open(rng) < o.empty_fraction) empty_start = 30 + static_cast<int>(uniform_index(rng, days.size() - 110));
    const int empty_len = 38 + static_cast<int>(uniform_index(rng, 6));
    int missing_day = -1;
    if (k < o.incomplete) missing_day = static_cast<int>(uniform_index(rng, days.size()));

    LoadSeries s;
    char id[32];
    std::snprintf(id, sizeof(id), "MAC%06d", k + 1);
    s.node_id = id;
    double own = 0.0;
    std::array<double, kPeriodsPerDay> v{};
    for (std::size_t i = 0; i < days.size(); ++i) {
      const Date d = days[i];
      const double phase = 2.0 * M_PI * (d.day_of_year() - 15) / 365.0;
      const double season = 1.0 + season_amp * std::cos(phase);
      own = 0.7 * own + 0.12 * standard_normal(rng);
      const double level = std::exp(own + shared_level[i]);
      const bool weekend = day_type2(d) == 1;
      // Winter evenings peak earlier.
      const double e_centre = evening_at - 1.5 * std::cos(phase) + shift[i] + o.own_jitter * standard_normal(rng);
      const double m_centre = morning_at + (weekend ? 3.0 : 0.0);
      const double m_amp = morning_amp * (weekend ? 0.7 : 1.0);
      const double e_amp = evening_amp * season * std::exp(0.25 * standard_normal(rng));
      const bool empty = empty_start >= 0 && static_cast<int>(i) >= empty_start &&
                         static_cast<int>(i) < empty_start + empty_len;
      for (int h = 1; h <= kPeriodsPerDay; ++h) {
        double x;
        if (empty) {
          x = 0.02 + 0.002 * std::abs(standard_normal(rng));
        } else {
          const double mean = base * season + m_amp * detail::bump(h, m_centre, 2.0) +
                              e_amp * detail::bump(h, e_centre, evening_width) +
                              (weekend ? midday * detail::bump(h, 26.0, 5.0) : 0.0);
          // Log-logistic noise plus occasional appliance spikes.
          const double u = uniform_open(rng);
          const double noise = noise_sd * std::sqrt(3.0) / M_PI * std::log(u / (1.0 - u));
          x = level * mean * std::exp(noise);
          if (uniform_open(rng) < spike_rate) x -= spike_size * std::log(uniform_open(rng));
        }
        v[static_cast<std::size_t>(h - 1)] = std::max(0.001, std::round(x * 1000.0) / 1000.0);
      }
      if (static_cast<int>(i) == missing_day) continue;
      s.append_day(d, v);
    }
    out.push_back(std::move(s));
  }
  return out;
}

//! Long-format CSV readable by ingest_csv with the default schema.
inline void write_long_csv(std::ostream& os, const std::vector<LoadSeries>& series) {
  os << "meter_id,timestamp,kwh\n";
  char ts[32];
  for (const auto& s : series)
    for (std::size_t i = 0; i < s.num_days(); ++i) {
      const auto [y, m, d] = s.days[i].ymd();
      for (int h = 1; h <= kPeriodsPerDay; ++h) {
        std::snprintf(ts, sizeof(ts), "%04d-%02d-%02dT%02d:%02d:00", y, m, d, (h - 1) / 2, (h - 1) % 2 * 30);
        os << s.node_id << ',' << ts << ',' << format_double(s.at(i, h)) << '\n';
      }
    }
}

}  // namespace lvfc
