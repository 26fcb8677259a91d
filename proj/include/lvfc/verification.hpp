#pragma once

// Scoring rules and calibration diagnostics for probabilistic forecasts.

#include <algorithm>
#include <array>
#include <cmath>
#include <map>
#include <memory>
#include <set>
#include <span>
#include <stdexcept>
#include <string>
#include <tuple>
#include <vector>

#include <boost/math/distributions/chi_squared.hpp>
#include <boost/math/special_functions/beta.hpp>

#include "json.hpp"
#include "lvfc/common.hpp"
#include "lvfc/dataset.hpp"
#include "lvfc/distributions.hpp"
#include "lvfc/fusion.hpp"
#include "lvfc/kde.hpp"
#include "lvfc/timing.hpp"

namespace lvfc {

inline constexpr int kCrpsLevels = 999;

//! Closed-form CRPS of N(mu, sigma^2).
inline double crps_gaussian(double mu, double sigma, double y) {
  if (!(sigma > 0) || !std::isfinite(mu) || !std::isfinite(y)) throw std::domain_error("crps_gaussian: invalid input");
  const double z = (y - mu) / sigma;
  return sigma * (z * (2.0 * norm_cdf(z) - 1.0) + 2.0 * norm_pdf(z) - 1.0 / std::sqrt(M_PI));
}

//! Midpoints tau_k = (k - 1/2) / K, k = 1..K, so that the mean over the
//! levels is the midpoint rule for the integral over (0, 1).
inline std::vector<double> crps_levels(int K = kCrpsLevels) {
  std::vector<double> t(static_cast<std::size_t>(K));
  for (int k = 1; k <= K; ++k) t[static_cast<std::size_t>(k - 1)] = (k - 0.5) / K;
  return t;
}

inline double pinball(double tau, double q, double y) {
  const double u = y - q;
  return u >= 0 ? tau * u : (tau - 1.0) * u;
}

//! (2 / K) sum_k pinball_tau_k(q_k, y).
inline double crps_from_quantiles(std::span<const double> q, std::span<const double> levels, double y) {
  if (q.size() != levels.size() || q.empty()) throw std::invalid_argument("crps_from_quantiles: size mismatch");
  double acc = 0.0;
  for (std::size_t k = 0; k < q.size(); ++k) acc += pinball(levels[k], q[k], y);
  const double s = 2.0 * acc / static_cast<double>(q.size());
  if (!std::isfinite(s)) throw std::domain_error("crps: non-finite score");
  return s;
}

//! Quantile-decomposition CRPS for any quantile function.
template <typename QuantileFn>
double crps_quantile_decomposition(QuantileFn&& quantile, double y, int K = kCrpsLevels) {
  const auto levels = crps_levels(K);
  std::vector<double> q(levels.size());
  for (std::size_t k = 0; k < levels.size(); ++k) q[k] = quantile(levels[k]);
  return crps_from_quantiles(q, levels, y);
}

//! CRPS of a parametric forecast: closed form for Gaussian, quantile
//! decomposition otherwise.
inline double crps(const Distribution& d, double y, int K = kCrpsLevels) {
  if (d.family == Family::gaussian) return crps_gaussian(d.params[0], d.params[1], y);
  return crps_quantile_decomposition([&](double p) { return d.quantile(p); }, y, K);
}

//! CRPS of a fused forecast through the exact quantile route.
inline double crps(const FusedCell& c, double y, int K = kCrpsLevels) {
  if (c.weight == 0.0) return crps(c.base, y, K);
  if (c.weight == 1.0) return crps(c.peak, y, K);
  return crps_quantile_decomposition([&](double p) { return fused_quantile(c, p); }, y, K);
}

inline double crps(const KdeCell& c, double y, int K = kCrpsLevels) {
  return crps_quantile_decomposition([&](double p) { return c.quantile(p); }, y, K);
}

// ---------------------------------------------------------------------------
// batched quantile tables

//! Quantile tables on the CRPS level grid, extended by tail anchors so that
//! mixtures can be inverted. Caches per-shape and per-cell tables; one
//! instance per thread.
class QuantileTables {
 public:
  explicit QuantileTables(int K = kCrpsLevels) : K_(K) {
    const std::array<double, 5> anchors{1e-7, 1e-6, 1e-5, 1e-4, 5e-4};
    for (double a : anchors) ext_.push_back(a);
    main_offset_ = ext_.size();
    for (double t : crps_levels(K)) ext_.push_back(t);
    for (auto it = anchors.rbegin(); it != anchors.rend(); ++it) ext_.push_back(1.0 - *it);
    z_.resize(ext_.size());
    for (std::size_t k = 0; k < ext_.size(); ++k) z_[k] = norm_quantile(ext_[k]);
  }

  int K() const { return K_; }
  std::span<const double> levels() const { return std::span<const double>(ext_).subspan(main_offset_, K_); }
  std::span<const double> extended_levels() const { return ext_; }
  std::span<const double> main(std::span<const double> table) const { return table.subspan(main_offset_, K_); }

  //! Extended-grid quantiles of a parametric distribution.
  void parametric(const Distribution& d, std::vector<double>& out) {
    out.resize(ext_.size());
    switch (d.family) {
      case Family::gaussian:
        for (std::size_t k = 0; k < ext_.size(); ++k) out[k] = d.params[0] + d.params[1] * z_[k];
        return;
      case Family::gbp: {
        const auto& lo = gbp_log_odds(d.params[2], d.params[3]);
        const double inv_s = 1.0 / d.params[1];
        for (std::size_t k = 0; k < ext_.size(); ++k) out[k] = d.params[0] * std::exp(lo[k] * inv_s);
        return;
      }
      default:
        throw std::invalid_argument("quantile tables: unsupported family");
    }
  }

  //! Extended-grid quantiles of one KDE cell. The model is pinned while the
  //! cache holds it, so a freed model's address can never alias a new one.
  const std::vector<double>& kde(const std::shared_ptr<const KdeModel>& m, std::size_t cell) {
    const auto key = std::make_pair(m.get(), cell);
    auto it = kde_cache_.find(key);
    if (it == kde_cache_.end()) {
      kde_models_.insert(m);
      it = kde_cache_.emplace(key, m->cell(cell).quantiles(ext_)).first;
    }
    return it->second;
  }

  //! Extended-grid quantiles of (1 - w) A + w B from the component tables:
  //! both CDFs are linearly interpolated on the union of their knots and
  //! the pooled CDF is inverted at every level.
  void mixture(std::span<const double> qa, std::span<const double> qb, double w, std::vector<double>& out) {
    out.resize(ext_.size());
    if (w == 0.0) {
      std::copy(qa.begin(), qa.end(), out.begin());
      return;
    }
    if (w == 1.0) {
      std::copy(qb.begin(), qb.end(), out.begin());
      return;
    }
    knots_.clear();
    knots_.reserve(qa.size() + qb.size());
    std::merge(qa.begin(), qa.end(), qb.begin(), qb.end(), std::back_inserter(knots_));
    fk_.resize(knots_.size());
    std::size_t ia = 0, ib = 0;
    for (std::size_t j = 0; j < knots_.size(); ++j) {
      const double y = knots_[j];
      fk_[j] = (1.0 - w) * interp_cdf(qa, y, ia) + w * interp_cdf(qb, y, ib);
      if (j > 0) fk_[j] = std::max(fk_[j], fk_[j - 1]);
    }
    std::size_t j = 0;
    for (std::size_t k = 0; k < ext_.size(); ++k) {
      const double p = ext_[k];
      while (j + 1 < knots_.size() && fk_[j + 1] < p) ++j;
      if (p <= fk_.front()) {
        out[k] = knots_.front();
      } else if (j + 1 >= knots_.size()) {
        out[k] = knots_.back();
      } else {
        const double f0 = fk_[j], f1 = fk_[j + 1];
        out[k] = f1 > f0 ? knots_[j] + (p - f0) / (f1 - f0) * (knots_[j + 1] - knots_[j]) : knots_[j + 1];
      }
    }
  }

 private:
  // Piecewise-linear CDF through (q_k, ext_k), 0 / 1 beyond the anchors.
  // `cursor` walks forward across increasing queries.
  double interp_cdf(std::span<const double> q, double y, std::size_t& cursor) const {
    if (y < q.front()) return 0.0;
    if (y >= q.back()) return y == q.back() ? ext_.back() : 1.0;
    while (cursor + 1 < q.size() && q[cursor + 1] <= y) ++cursor;
    const double y0 = q[cursor], y1 = q[cursor + 1];
    if (!(y1 > y0)) return ext_[cursor + 1];
    return ext_[cursor] + (y - y0) / (y1 - y0) * (ext_[cursor + 1] - ext_[cursor]);
  }

  const std::vector<double>& gbp_log_odds(double nu, double tau) {
    const auto key = std::make_pair(nu, tau);
    auto it = gbp_cache_.find(key);
    if (it != gbp_cache_.end()) return it->second;
    if (gbp_cache_.size() > 4096) gbp_cache_.clear();
    std::vector<double> lo(ext_.size());
    for (std::size_t k = 0; k < ext_.size(); ++k) {
      const double p = ext_[k];
      if (p <= 0.5) {
        const double r = boost::math::ibeta_inv(nu, tau, p);
        lo[k] = std::log(r) - std::log1p(-r);
      } else {
        const double s = boost::math::ibeta_inv(tau, nu, 1.0 - p);
        lo[k] = std::log1p(-s) - std::log(s);
      }
    }
    return gbp_cache_.emplace(key, std::move(lo)).first->second;
  }

  int K_;
  std::size_t main_offset_ = 0;
  std::vector<double> ext_, z_;
  std::map<std::pair<double, double>, std::vector<double>> gbp_cache_;
  std::map<std::pair<const KdeModel*, std::size_t>, std::vector<double>> kde_cache_;
  std::set<std::shared_ptr<const KdeModel>> kde_models_;
  std::vector<double> knots_, fk_;
};

//! Per-timestep CRPS of a forecast set against its observations.
inline std::vector<double> crps_scores(const DensityForecast& f, QuantileTables& tables) {
  std::vector<double> out(f.size());
  std::vector<double> q;
  for (std::size_t i = 0; i < f.size(); ++i) {
    const auto d = f.at(i);
    if (d.family == Family::gaussian) {
      out[i] = crps_gaussian(d.params[0], d.params[1], f.observed[i]);
    } else {
      tables.parametric(d, q);
      out[i] = crps_from_quantiles(tables.main(q), tables.levels(), f.observed[i]);
    }
  }
  return out;
}

inline std::vector<double> crps_scores(const KdeForecast& f, QuantileTables& tables) {
  std::vector<double> out(f.size());
  for (std::size_t i = 0; i < f.size(); ++i)
    out[i] = crps_from_quantiles(tables.main(tables.kde(f.model, f.cells[i])), tables.levels(), f.observed[i]);
  return out;
}

//! Fused CRPS via the tabulated mixture inversion; Gaussian-Gaussian cells
//! with w in {0, 1} reduce to the closed form.
inline std::vector<double> crps_scores(const FusedForecast& f, QuantileTables& tables) {
  std::vector<double> out(f.size());
  std::vector<double> qa, qb, qm;
  for (std::size_t i = 0; i < f.size(); ++i) {
    const auto& c = f.cells[i];
    const double y = f.observed[i];
    if (c.weight == 0.0 && c.base.family == Family::gaussian) {
      out[i] = crps_gaussian(c.base.params[0], c.base.params[1], y);
    } else if (c.weight == 1.0 && c.peak.family == Family::gaussian) {
      out[i] = crps_gaussian(c.peak.params[0], c.peak.params[1], y);
    } else {
      tables.parametric(c.base, qa);
      tables.parametric(c.peak, qb);
      tables.mixture(qa, qb, c.weight, qm);
      out[i] = crps_from_quantiles(tables.main(qm), tables.levels(), y);
    }
  }
  return out;
}

// ---------------------------------------------------------------------------
// RPS, PIT, skill

//! sum_h (F(h) - 1{h >= h_obs})^2 over the categories.
inline double rps(std::span<const double> pmf, int h_obs) {
  if (h_obs < 1 || h_obs > static_cast<int>(pmf.size())) throw std::out_of_range("rps: observed category");
  double F = 0.0, acc = 0.0;
  for (std::size_t h = 0; h < pmf.size(); ++h) {
    F += pmf[h];
    const double o = static_cast<int>(h) + 1 >= h_obs ? 1.0 : 0.0;
    acc += (F - o) * (F - o);
  }
  return acc;
}

inline double rps(const TimingPmf& pmf, int h_obs) { return rps(pmf.prob, h_obs); }

inline constexpr int kPitBins = 20;

struct PitHistogram {
  std::array<std::size_t, kPitBins> counts{};
  std::size_t total() const {
    std::size_t n = 0;
    for (auto c : counts) n += c;
    return n;
  }
  void add(double u) {
    const int b = std::clamp(static_cast<int>(std::floor(u * kPitBins)), 0, kPitBins - 1);
    ++counts[static_cast<std::size_t>(b)];
  }
  void merge(const PitHistogram& o) {
    for (std::size_t b = 0; b < counts.size(); ++b) counts[b] += o.counts[b];
  }
};

template <typename CdfFn>
PitHistogram pit_histogram(std::span<const double> observed, CdfFn&& cdf_at, std::vector<double>* values = nullptr) {
  PitHistogram h;
  for (std::size_t i = 0; i < observed.size(); ++i) {
    const double u = std::clamp(cdf_at(i, observed[i]), 0.0, 1.0);
    if (values) values->push_back(u);
    h.add(u);
  }
  return h;
}

inline PitHistogram pit_histogram(std::span<const double> u) {
  PitHistogram h;
  for (double v : u) h.add(std::clamp(v, 0.0, 1.0));
  return h;
}

struct ChiSquareResult {
  double statistic = 0.0;
  double p_value = 1.0;
  int dof = kPitBins - 1;
};

//! Pearson test of equal bin probabilities.
inline ChiSquareResult chi_square_uniformity(const PitHistogram& h) {
  const double n = static_cast<double>(h.total());
  if (n == 0) throw std::invalid_argument("chi_square_uniformity: empty histogram");
  const double e = n / kPitBins;
  ChiSquareResult r;
  for (auto c : h.counts) r.statistic += (static_cast<double>(c) - e) * (static_cast<double>(c) - e) / e;
  boost::math::chi_squared dist(r.dof);
  r.p_value = boost::math::cdf(boost::math::complement(dist, r.statistic));
  return r;
}

inline double skill(double mean_score, double mean_ref) {
  if (!(mean_ref > 0)) throw std::domain_error("skill: reference score must be positive");
  return 1.0 - mean_score / mean_ref;
}

inline double mean_of(std::span<const double> v) {
  if (v.empty()) return kNaN;
  double acc = 0.0;
  for (double x : v) acc += x;
  return acc / static_cast<double>(v.size());
}

//! Skill of resampled means; both series use the same resample indices.
inline std::vector<double> bootstrap_skill(std::span<const double> scores, std::span<const double> ref,
                                           int n_resamples = 1000, std::uint64_t seed = 1) {
  if (scores.size() != ref.size() || scores.empty())
    throw std::invalid_argument("bootstrap_skill: score vectors must be aligned and non-empty");
  Rng rng(seed);
  const std::size_t n = scores.size();
  std::vector<double> out(static_cast<std::size_t>(n_resamples));
  for (auto& s : out) {
    double a = 0.0, b = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
      const auto j = uniform_index(rng, n);
      a += scores[j];
      b += ref[j];
    }
    s = a == b ? 0.0 : skill(a / n, b / n);
  }
  return out;
}

//! Resampled means of several aligned score series sharing the same
//! resample indices: out[s][b] is the mean of series s in resample b.
inline std::vector<std::vector<double>> bootstrap_means(const std::vector<std::span<const double>>& series,
                                                        int n_resamples, std::uint64_t seed) {
  if (series.empty() || series.front().empty()) throw std::invalid_argument("bootstrap_means: empty input");
  const std::size_t n = series.front().size();
  for (const auto& s : series)
    if (s.size() != n) throw std::invalid_argument("bootstrap_means: score vectors must be aligned");
  Rng rng(seed);
  std::vector<std::vector<double>> out(series.size(), std::vector<double>(static_cast<std::size_t>(n_resamples)));
  std::vector<double> acc(series.size());
  for (std::size_t b = 0; b < static_cast<std::size_t>(n_resamples); ++b) {
    std::fill(acc.begin(), acc.end(), 0.0);
    for (std::size_t i = 0; i < n; ++i) {
      const auto j = uniform_index(rng, n);
      for (std::size_t s = 0; s < series.size(); ++s) acc[s] += series[s][j];
    }
    for (std::size_t s = 0; s < series.size(); ++s) out[s][b] = acc[s] / static_cast<double>(n);
  }
  return out;
}

//! Empirical quantile by linear interpolation of the sorted sample.
inline double sample_quantile(std::vector<double> v, double p) {
  if (v.empty()) return kNaN;
  std::sort(v.begin(), v.end());
  const double pos = p * static_cast<double>(v.size() - 1);
  const auto lo = static_cast<std::size_t>(std::floor(pos));
  const auto hi = std::min(lo + 1, v.size() - 1);
  return v[lo] + (pos - static_cast<double>(lo)) * (v[hi] - v[lo]);
}

//! Positions of the timesteps at each day's recorded peak period.
inline std::vector<std::size_t> peak_subset(std::span<const Date> days, std::span<const int> periods,
                                            const DailyPeakSeries& peaks) {
  std::vector<std::size_t> out;
  for (std::size_t i = 0; i < days.size(); ++i) {
    const auto j = peaks.index_of(days[i]);
    if (j && peaks.peak_period[*j] == periods[i]) out.push_back(i);
  }
  return out;
}

inline std::vector<double> select(std::span<const double> v, std::span<const std::size_t> idx) {
  std::vector<double> out;
  out.reserve(idx.size());
  for (auto i : idx) out.push_back(v[i]);
  return out;
}

// ---------------------------------------------------------------------------
// reports

struct ScoreEntry {
  std::string node;
  std::string level;
  std::string method;
  std::string subset;     // "all" or "peaks"
  std::string partition;  // "cv" or "test"
  std::vector<Date> days;
  std::vector<int> periods;
  std::vector<double> scores;

  double mean() const { return mean_of(scores); }
};

struct ScoreReport {
  std::vector<ScoreEntry> entries;

  const ScoreEntry* find(const std::string& node, const std::string& method, const std::string& subset,
                         const std::string& partition) const {
    for (const auto& e : entries)
      if (e.node == node && e.method == method && e.subset == subset && e.partition == partition) return &e;
    return nullptr;
  }
};

}  // namespace lvfc
