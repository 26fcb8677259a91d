#pragma once

// Kernel density benchmarks with zero-truncated Gaussian kernels.

#include <algorithm>
#include <cmath>
#include <span>
#include <string>
#include <vector>

#include "json.hpp"
#include "lvfc/common.hpp"
#include "lvfc/distributions.hpp"
#include "lvfc/frame.hpp"

namespace lvfc {

enum class KdeConditioning { none, by_period, by_period_and_daytype3, by_daytype2 };

inline std::string to_string(KdeConditioning c) {
  switch (c) {
    case KdeConditioning::none: return "none";
    case KdeConditioning::by_period: return "by_period";
    case KdeConditioning::by_period_and_daytype3: return "by_period_and_daytype3";
    case KdeConditioning::by_daytype2: return "by_daytype2";
  }
  return "?";
}

inline KdeConditioning kde_conditioning_from_string(const std::string& s) {
  for (auto c : {KdeConditioning::none, KdeConditioning::by_period, KdeConditioning::by_period_and_daytype3,
                 KdeConditioning::by_daytype2})
    if (to_string(c) == s) return c;
  throw std::invalid_argument("unknown KDE conditioning '" + s + "'");
}

inline std::size_t kde_cell_count(KdeConditioning c) {
  switch (c) {
    case KdeConditioning::none: return 1;
    case KdeConditioning::by_period: return kPeriodsPerDay;
    case KdeConditioning::by_period_and_daytype3: return 3 * kPeriodsPerDay;
    case KdeConditioning::by_daytype2: return 2;
  }
  return 0;
}

//! Cell index from period (1..48), day-type-3 (0..2) and day-type-2 (0..1).
inline std::size_t kde_cell_of(KdeConditioning c, int period, int daytype3, int daytype2) {
  switch (c) {
    case KdeConditioning::none: return 0;
    case KdeConditioning::by_period: return static_cast<std::size_t>(period - 1);
    case KdeConditioning::by_period_and_daytype3:
      return static_cast<std::size_t>(daytype3 * kPeriodsPerDay + period - 1);
    case KdeConditioning::by_daytype2: return static_cast<std::size_t>(daytype2);
  }
  return 0;
}

//! Silverman's rule 0.9 min(sd, IQR/1.34) n^(-1/5), floored.
inline double silverman_bandwidth(std::span<const double> samples, double floor = 1e-3) {
  const std::size_t n = samples.size();
  if (n < 2) return floor;
  std::vector<double> s(samples.begin(), samples.end());
  std::sort(s.begin(), s.end());
  double mean = 0.0;
  for (double v : s) mean += v;
  mean /= static_cast<double>(n);
  double ss = 0.0;
  for (double v : s) ss += (v - mean) * (v - mean);
  const double sd = std::sqrt(ss / static_cast<double>(n - 1));
  auto q = [&](double p) {
    const double pos = p * static_cast<double>(n - 1);
    const auto lo = static_cast<std::size_t>(std::floor(pos));
    const auto hi = std::min(lo + 1, n - 1);
    return s[lo] + (pos - static_cast<double>(lo)) * (s[hi] - s[lo]);
  };
  const double iqr = q(0.75) - q(0.25);
  double spread = sd;
  if (iqr > 0) spread = std::min(sd, iqr / 1.34);
  const double h = 0.9 * spread * std::pow(static_cast<double>(n), -0.2);
  return std::max(h, floor);
}

//! One kernel mixture: samples, bandwidth and per-kernel truncation masses.
struct KdeCell {
  std::vector<double> samples;  // sorted
  double bandwidth = 1e-3;
  bool pooled = false;          // filled from the pooled samples
  std::vector<double> mass;     // 1 - Phi(-y_i / h)
  std::vector<double> lower;    // Phi(-y_i / h)
  std::vector<double> tail;     // tail[i] = -sum_{j >= i} lower_j / mass_j

  void finalise() {
    std::sort(samples.begin(), samples.end());
    mass.resize(samples.size());
    lower.resize(samples.size());
    tail.assign(samples.size() + 1, 0.0);
    for (std::size_t i = 0; i < samples.size(); ++i) {
      mass[i] = norm_cdf(samples[i] / bandwidth);
      lower[i] = norm_cdf(-samples[i] / bandwidth);
    }
    for (std::size_t i = samples.size(); i-- > 0;) tail[i] = tail[i + 1] - lower[i] / mass[i];
  }

  //! CDF and density in one pass. Kernels further than 8.5 bandwidths away
  //! contribute exactly 1 (below) or -lower/mass (above).
  void cdf_pdf(double y, double& F, double& f) const {
    F = 0.0;
    f = 0.0;
    if (!(y > 0.0)) return;
    const double w = 8.5 * bandwidth;
    const auto a = static_cast<std::size_t>(std::lower_bound(samples.begin(), samples.end(), y - w) - samples.begin());
    const auto b = static_cast<std::size_t>(std::upper_bound(samples.begin(), samples.end(), y + w) - samples.begin());
    double acc = static_cast<double>(a) + tail[b], dens = 0.0;
    for (std::size_t i = a; i < b; ++i) {
      const double z = (y - samples[i]) / bandwidth;
      acc += (norm_cdf(z) - lower[i]) / mass[i];
      dens += norm_pdf(z) / mass[i];
    }
    const double n = static_cast<double>(samples.size());
    F = std::clamp(acc / n, 0.0, 1.0);
    f = dens / (n * bandwidth);
  }

  double cdf(double y) const {
    if (!(y > 0.0)) return 0.0;
    if (std::isinf(y)) return 1.0;
    double acc = 0.0;
    for (std::size_t i = 0; i < samples.size(); ++i) {
      acc += (norm_cdf((y - samples[i]) / bandwidth) - lower[i]) / mass[i];
    }
    return std::clamp(acc / static_cast<double>(samples.size()), 0.0, 1.0);
  }

  double pdf(double y) const {
    if (y < 0.0) return 0.0;
    double acc = 0.0;
    for (std::size_t i = 0; i < samples.size(); ++i)
      acc += norm_pdf((y - samples[i]) / bandwidth) / mass[i];
    return acc / (static_cast<double>(samples.size()) * bandwidth);
  }

  double upper_bound() const { return samples.back() + 12.0 * bandwidth; }

  //! Quantile by bisection to |F - p| < 1e-12 or interval width 1e-14.
  double quantile(double p) const {
    if (!(p > 0.0 && p < 1.0)) throw std::domain_error("quantile needs p in (0, 1)");
    double lo = 0.0, hi = upper_bound();
    while (cdf(hi) < p) hi *= 2.0;
    for (int it = 0; it < 200 && hi - lo > 1e-14 * std::max(1.0, hi); ++it) {
      const double mid = 0.5 * (lo + hi);
      const double f = cdf(mid);
      if (std::abs(f - p) < 1e-12) return mid;
      (f < p ? lo : hi) = mid;
    }
    return 0.5 * (lo + hi);
  }

  //! Quantiles at increasing levels: cubic Hermite inversion of the CDF on
  //! a dense grid, polished by safeguarded Newton steps where needed.
  std::vector<double> quantiles(std::span<const double> levels) const {
    constexpr int kGrid = 1024;
    const double top = upper_bound();
    std::vector<double> gy(kGrid + 1), gf(kGrid + 1), gd(kGrid + 1);
    for (int g = 0; g <= kGrid; ++g) {
      gy[g] = top * g / kGrid;
      cdf_pdf(gy[g], gf[g], gd[g]);
    }
    gd[0] = pdf(0.0);
    std::vector<double> out(levels.size());
    std::size_t g = 0;
    for (std::size_t k = 0; k < levels.size(); ++k) {
      const double p = levels[k];
      if (k > 0 && p < levels[k - 1]) g = 0;
      while (g + 1 < gy.size() && gf[g + 1] < p) ++g;
      if (g + 1 >= gy.size()) {
        out[k] = quantile(p);
        continue;
      }
      double lo = gy[g], hi = gy[g + 1];
      const double flo = gf[g], fhi = gf[g + 1], dx = hi - lo;
      // Hermite cubic on [lo, hi] with slopes from the density.
      const double m0 = gd[g] * dx, m1 = gd[g + 1] * dx;
      auto H = [&](double t) {
        const double t2 = t * t, t3 = t2 * t;
        return (2 * t3 - 3 * t2 + 1) * flo + (t3 - 2 * t2 + t) * m0 + (-2 * t3 + 3 * t2) * fhi + (t3 - t2) * m1;
      };
      double t = fhi > flo ? (p - flo) / (fhi - flo) : 0.5;
      double tl = 0.0, th = 1.0;
      for (int it = 0; it < 40; ++it) {
        const double h = H(t) - p;
        (h < 0 ? tl : th) = t;
        const double t2 = t * t;
        const double dh = (6 * t2 - 6 * t) * flo + (3 * t2 - 4 * t + 1) * m0 + (-6 * t2 + 6 * t) * fhi + (3 * t2 - 2 * t) * m1;
        double next = dh > 0 ? t - h / dh : 0.5 * (tl + th);
        if (!(next > tl && next < th)) next = 0.5 * (tl + th);
        if (std::abs(next - t) < 1e-13) {
          t = next;
          break;
        }
        t = next;
      }
      double x = lo + t * dx;
      for (int it = 0; it < 30; ++it) {
        double f, d;
        cdf_pdf(x, f, d);
        if (std::abs(f - p) < 1e-9) break;
        (f < p ? lo : hi) = x;
        double next = d > 0 ? x - (f - p) / d : 0.5 * (lo + hi);
        if (!(next > lo && next < hi)) next = 0.5 * (lo + hi);
        x = next;
        if (hi - lo < 1e-14 * std::max(1.0, hi)) break;
      }
      out[k] = x;
    }
    return out;
  }

  double sample(Rng& rng) const {
    const double yi = samples[uniform_index(rng, samples.size())];
    // Truncated normal draw by inversion.
    const double a = norm_cdf(-yi / bandwidth);
    const double u = a + uniform_open(rng) * (1.0 - a);
    return std::max(0.0, yi + bandwidth * norm_quantile(std::min(u, 1.0 - 1e-16)));
  }
};

class KdeModel {
 public:
  KdeConditioning conditioning = KdeConditioning::none;
  std::vector<KdeCell> cells;
  std::size_t fallback_cells = 0;

  std::size_t cell_count() const { return cells.size(); }

  const KdeCell& cell(std::size_t c) const {
    if (c >= cells.size()) throw std::out_of_range("KDE cell " + std::to_string(c) + " does not exist");
    return cells[c];
  }

  double cdf(std::size_t c, double y) const { return cell(c).cdf(y); }
  double pdf(std::size_t c, double y) const { return cell(c).pdf(y); }
  double quantile(std::size_t c, double p) const { return cell(c).quantile(p); }

  std::size_t cell_of(const FeatureFrame& f, std::size_t row) const {
    const int period = f.periods[row] > 0 ? f.periods[row] : 1;
    const int dt3 = static_cast<int>(f.column("daytype3")[row]);
    const int dt2 = static_cast<int>(f.column("daytype2")[row]);
    return kde_cell_of(conditioning, period, dt3, dt2);
  }

  nlohmann::json to_json() const {
    nlohmann::json j{{"format", "lvfc-kde"}, {"version", 1}, {"conditioning", lvfc::to_string(conditioning)}};
    auto& cs = j["cells"] = nlohmann::json::array();
    for (const auto& c : cells) cs.push_back({{"bandwidth", c.bandwidth}, {"pooled", c.pooled}, {"samples", c.samples}});
    return j;
  }

  static KdeModel from_json(const nlohmann::json& j) {
    if (j.value("format", "") != "lvfc-kde") throw DataError("not a KDE document");
    KdeModel m;
    m.conditioning = kde_conditioning_from_string(j.at("conditioning"));
    for (const auto& cj : j.at("cells")) {
      KdeCell c;
      c.bandwidth = cj.at("bandwidth");
      c.pooled = cj.at("pooled");
      c.samples = cj.at("samples").get<std::vector<double>>();
      if (c.pooled) ++m.fallback_cells;
      c.finalise();
      m.cells.push_back(std::move(c));
    }
    return m;
  }
};

//! Builds a KDE from samples grouped by cell; empty cells take the pooled
//! samples of all cells.
inline KdeModel fit_kde(const std::vector<std::vector<double>>& cell_samples, KdeConditioning conditioning,
                        double bandwidth_floor = 1e-3) {
  if (cell_samples.size() != kde_cell_count(conditioning))
    throw std::invalid_argument("fit_kde: expected " + std::to_string(kde_cell_count(conditioning)) + " cells");
  std::vector<double> pool;
  for (const auto& c : cell_samples)
    for (double v : c) {
      if (!std::isfinite(v) || v < 0) throw DataError("KDE samples must be finite and non-negative");
      pool.push_back(v);
    }
  if (pool.empty()) throw DataError("KDE training data is empty");
  KdeModel m;
  m.conditioning = conditioning;
  for (std::size_t c = 0; c < cell_samples.size(); ++c) {
    KdeCell cell;
    if (cell_samples[c].empty()) {
      cell.samples = pool;
      cell.pooled = true;
      ++m.fallback_cells;
      log(LogLevel::debug, "KDE cell " + std::to_string(c) + " empty; using pooled samples");
    } else {
      cell.samples = cell_samples[c];
    }
    cell.bandwidth = silverman_bandwidth(cell.samples, bandwidth_floor);
    cell.finalise();
    m.cells.push_back(std::move(cell));
  }
  return m;
}

//! KDE of the frame's response over the given rows.
inline KdeModel fit_kde(const FeatureFrame& frame, std::span<const std::size_t> rows, KdeConditioning conditioning,
                        const std::string& response = "y") {
  std::vector<std::vector<double>> cells(kde_cell_count(conditioning));
  const auto y = frame.column(response);
  KdeModel probe;
  probe.conditioning = conditioning;
  for (auto r : rows) cells[probe.cell_of(frame, r)].push_back(std::max(0.0, y[r]));
  return fit_kde(cells, conditioning);
}

}  // namespace lvfc
