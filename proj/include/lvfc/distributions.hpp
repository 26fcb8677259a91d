#pragma once

// Parametric response families with density, CDF, quantile, log-likelihood,
// link functions and the link-scale score / expected information the
// GAMLSS fitter needs.
//
// Generalised Beta Prime (four parameters, all positive):
//   f(y) = s y^(s n - 1) / ( m^(s n) B(n, t) (1 + (y/m)^s)^(n + t) ),  y > 0
// with m location, s scale, n and t shapes. If R ~ Beta(n, t) then
// Y = m (R / (1 - R))^(1/s).

#include <array>
#include <cmath>
#include <map>
#include <memory>
#include <mutex>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include <boost/math/special_functions/beta.hpp>
#include <boost/math/special_functions/digamma.hpp>
#include <boost/math/special_functions/erf.hpp>
#include <boost/math/special_functions/trigamma.hpp>

#include "lvfc/common.hpp"

namespace lvfc {

enum class Family { gaussian, gbp, bernoulli };

enum class Link { identity, log, logit };

inline std::string to_string(Family f) {
  switch (f) {
    case Family::gaussian: return "NO";
    case Family::gbp: return "GB2";
    case Family::bernoulli: return "BI";
  }
  return "?";
}

inline Family family_from_string(const std::string& s) {
  if (s == "NO" || s == "gaussian") return Family::gaussian;
  if (s == "GB2" || s == "gbp") return Family::gbp;
  if (s == "BI" || s == "bernoulli") return Family::bernoulli;
  throw std::invalid_argument("unknown family '" + s + "'");
}

inline std::string to_string(Link l) {
  switch (l) {
    case Link::identity: return "identity";
    case Link::log: return "log";
    case Link::logit: return "logit";
  }
  return "?";
}

inline Link link_from_string(const std::string& s) {
  if (s == "identity") return Link::identity;
  if (s == "log") return Link::log;
  if (s == "logit") return Link::logit;
  throw std::invalid_argument("unknown link '" + s + "'");
}

//! Natural-scale parameters (location, scale, shape, shape); unused trailing
//! entries are ignored.
struct ParamVector {
  std::array<double, 4> v{0.0, 0.0, 0.0, 0.0};

  double& operator[](std::size_t i) { return v[i]; }
  double operator[](std::size_t i) const { return v[i]; }
  bool operator==(const ParamVector&) const = default;
};

inline std::size_t parameter_count(Family f) {
  switch (f) {
    case Family::gaussian: return 2;
    case Family::gbp: return 4;
    case Family::bernoulli: return 1;
  }
  return 0;
}

inline Link default_link(Family f, std::size_t k) {
  switch (f) {
    case Family::gaussian: return k == 0 ? Link::identity : Link::log;
    case Family::gbp: return Link::log;
    case Family::bernoulli: return Link::logit;
  }
  return Link::identity;
}

// ---------------------------------------------------------------------------
// links

inline double apply_link(Link l, double x) {
  switch (l) {
    case Link::identity:
      return x;
    case Link::log:
      if (!(x > 0.0)) throw std::domain_error("log link needs a positive value");
      return std::log(x);
    case Link::logit:
      if (!(x > 0.0 && x < 1.0)) throw std::domain_error("logit link needs a value in (0, 1)");
      return std::log(x) - std::log1p(-x);
  }
  return x;
}

inline double invert_link(Link l, double eta) {
  switch (l) {
    case Link::identity:
      return eta;
    case Link::log:
      return std::exp(eta);
    case Link::logit:
      return eta >= 0 ? 1.0 / (1.0 + std::exp(-eta)) : std::exp(eta) / (1.0 + std::exp(eta));
  }
  return eta;
}

//! d(theta)/d(eta).
inline double link_derivative(Link l, double eta) {
  switch (l) {
    case Link::identity: return 1.0;
    case Link::log: return std::exp(eta);
    case Link::logit: {
      const double p = invert_link(Link::logit, eta);
      return p * (1.0 - p);
    }
  }
  return 1.0;
}

// ---------------------------------------------------------------------------
// standard normal helpers

inline double norm_pdf(double z) { return 0.3989422804014327 * std::exp(-0.5 * z * z); }
inline double norm_cdf(double z) { return 0.5 * std::erfc(-z / std::sqrt(2.0)); }
inline double norm_quantile(double p) {
  if (!(p > 0.0 && p < 1.0)) throw std::domain_error("normal quantile needs p in (0, 1)");
  return -std::sqrt(2.0) * boost::math::erfc_inv(2.0 * p);
}

// ---------------------------------------------------------------------------
// validation

inline bool valid_params(Family f, const ParamVector& p) {
  switch (f) {
    case Family::gaussian:
      return std::isfinite(p[0]) && std::isfinite(p[1]) && p[1] > 0.0;
    case Family::gbp:
      for (std::size_t i = 0; i < 4; ++i)
        if (!(std::isfinite(p[i]) && p[i] > 0.0)) return false;
      return true;
    case Family::bernoulli:
      return p[0] >= 0.0 && p[0] <= 1.0;
  }
  return false;
}

inline void require_valid(Family f, const ParamVector& p) {
  if (!valid_params(f, p))
    throw std::domain_error("invalid " + to_string(f) + " parameters (" + format_double(p[0]) + ", " +
                            format_double(p[1]) + ", " + format_double(p[2]) + ", " + format_double(p[3]) + ")");
}

namespace detail {

//! log(1 + exp(x)) without overflow.
inline double log1pexp(double x) { return x > 0 ? x + std::log1p(std::exp(-x)) : std::log1p(std::exp(x)); }

inline double gbp_log_beta(double nu, double tau) {
  return std::lgamma(nu) + std::lgamma(tau) - std::lgamma(nu + tau);
}

}  // namespace detail

// ---------------------------------------------------------------------------
// density, cdf, quantile

inline double loglik(Family f, const ParamVector& p, double y) {
  require_valid(f, p);
  switch (f) {
    case Family::gaussian: {
      const double z = (y - p[0]) / p[1];
      return -0.5 * std::log(2.0 * M_PI) - std::log(p[1]) - 0.5 * z * z;
    }
    case Family::gbp: {
      if (!(y > 0.0)) return -kInf;
      const double mu = p[0], sigma = p[1], nu = p[2], tau = p[3];
      const double logz = sigma * (std::log(y) - std::log(mu));
      return std::log(sigma) + (sigma * nu - 1.0) * std::log(y) - sigma * nu * std::log(mu) -
             detail::gbp_log_beta(nu, tau) - (nu + tau) * detail::log1pexp(logz);
    }
    case Family::bernoulli: {
      if (y == 1.0) return std::log(p[0]);
      if (y == 0.0) return std::log1p(-p[0]);
      return -kInf;
    }
  }
  return -kInf;
}

inline double pdf(Family f, const ParamVector& p, double y) {
  const double ll = loglik(f, p, y);
  return std::isinf(ll) ? 0.0 : std::exp(ll);
}

inline double cdf(Family f, const ParamVector& p, double y) {
  require_valid(f, p);
  switch (f) {
    case Family::gaussian:
      return norm_cdf((y - p[0]) / p[1]);
    case Family::gbp: {
      if (!(y > 0.0)) return 0.0;
      if (std::isinf(y)) return 1.0;
      const double logz = p[1] * (std::log(y) - std::log(p[0]));
      // r = z / (1 + z); evaluate whichever tail is accurate.
      if (logz <= 0.0) {
        const double r = 1.0 / (1.0 + std::exp(-logz));
        return boost::math::ibeta(p[2], p[3], r);
      }
      const double s = 1.0 / (1.0 + std::exp(logz));
      if (s <= 0.0) return 1.0;
      return boost::math::ibetac(p[3], p[2], s);
    }
    case Family::bernoulli:
      return y < 0.0 ? 0.0 : (y < 1.0 ? 1.0 - p[0] : 1.0);
  }
  return kNaN;
}

inline double quantile(Family f, const ParamVector& p, double prob) {
  require_valid(f, p);
  if (!(prob > 0.0 && prob < 1.0)) throw std::domain_error("quantile needs p in (0, 1)");
  switch (f) {
    case Family::gaussian:
      return p[0] + p[1] * norm_quantile(prob);
    case Family::gbp: {
      // Invert through the Beta(nu, tau) variable, working in the tail where
      // r or 1 - r keeps full precision.
      double log_odds;
      if (prob <= 0.5) {
        const double r = boost::math::ibeta_inv(p[2], p[3], prob);
        log_odds = std::log(r) - std::log1p(-r);
      } else {
        const double s = boost::math::ibeta_inv(p[3], p[2], 1.0 - prob);
        log_odds = std::log1p(-s) - std::log(s);
      }
      return p[0] * std::exp(log_odds / p[1]);
    }
    case Family::bernoulli:
      return prob <= 1.0 - p[0] ? 0.0 : 1.0;
  }
  return kNaN;
}

//! Draw one variate.
inline double sample(Family f, const ParamVector& p, Rng& rng) {
  require_valid(f, p);
  switch (f) {
    case Family::gaussian:
      return p[0] + p[1] * standard_normal(rng);
    case Family::gbp: {
      std::gamma_distribution<double> ga(p[2], 1.0), gb(p[3], 1.0);
      const double a = ga(rng), b = gb(rng);
      return p[0] * std::exp((std::log(a) - std::log(b)) / p[1]);
    }
    case Family::bernoulli:
      return uniform_open(rng) < p[0] ? 1.0 : 0.0;
  }
  return kNaN;
}

//! Mean of the distribution (infinite for GBP when s * t <= 1).
inline double mean(Family f, const ParamVector& p) {
  switch (f) {
    case Family::gaussian: return p[0];
    case Family::gbp: {
      const double s = p[1], nu = p[2], tau = p[3];
      if (s * tau <= 1.0) return kInf;
      return p[0] * std::exp(std::lgamma(nu + 1.0 / s) + std::lgamma(tau - 1.0 / s) - std::lgamma(nu) -
                             std::lgamma(tau));
    }
    case Family::bernoulli: return p[0];
  }
  return kNaN;
}

// ---------------------------------------------------------------------------
// working quantities for penalised IRLS

//! Score d l / d eta_k and expected information E[-d2 l / d eta_k^2] for
//! parameter k under the family's default links.
struct WorkingPair {
  double score;
  double weight;
};

namespace detail {

struct GbpShapeTerms {
  double psi_nu, psi_tau, psi_sum;     // digamma
  double tri_nu, tri_tau, tri_sum;     // trigamma
  double sigma_info;                   // 1 + n t/(n+t+1) [psi'(n+1) + psi'(t+1) + (psi(n+1) - psi(t+1))^2]
};

inline GbpShapeTerms gbp_shape_terms(double nu, double tau) {
  using boost::math::digamma;
  using boost::math::trigamma;
  GbpShapeTerms t{};
  t.psi_nu = digamma(nu);
  t.psi_tau = digamma(tau);
  t.psi_sum = digamma(nu + tau);
  t.tri_nu = trigamma(nu);
  t.tri_tau = trigamma(tau);
  t.tri_sum = trigamma(nu + tau);
  const double d = digamma(nu + 1.0) - digamma(tau + 1.0);
  t.sigma_info = 1.0 + nu * tau / (nu + tau + 1.0) * (trigamma(nu + 1.0) + trigamma(tau + 1.0) + d * d);
  return t;
}

}  // namespace detail

//! Caches the digamma/trigamma terms across rows with equal shapes.
class WorkingCalculator {
 public:
  explicit WorkingCalculator(Family f) : family_(f) {}

  WorkingPair operator()(std::size_t k, const ParamVector& p, double y) {
    switch (family_) {
      case Family::gaussian: {
        const double mu = p[0], sigma = p[1];
        if (k == 0) return {(y - mu) / (sigma * sigma), 1.0 / (sigma * sigma)};
        const double z = (y - mu) / sigma;
        return {z * z - 1.0, 2.0};
      }
      case Family::bernoulli: {
        const double pr = p[0];
        return {y - pr, pr * (1.0 - pr)};
      }
      case Family::gbp: {
        const double mu = p[0], sigma = p[1], nu = p[2], tau = p[3];
        const double logz = sigma * (std::log(y) - std::log(mu));
        const double r = 1.0 / (1.0 + std::exp(-logz));
        const auto& t = shape_terms(nu, tau);
        switch (k) {
          case 0:
            return {sigma * ((nu + tau) * r - nu), sigma * sigma * nu * tau / (nu + tau + 1.0)};
          case 1:
            return {1.0 + logz * (nu - (nu + tau) * r), t.sigma_info};
          case 2: {
            const double log_r = -detail::log1pexp(-logz);
            return {nu * (log_r + t.psi_sum - t.psi_nu), nu * nu * (t.tri_nu - t.tri_sum)};
          }
          default: {
            const double log_1mr = -detail::log1pexp(logz);
            return {tau * (log_1mr + t.psi_sum - t.psi_tau), tau * tau * (t.tri_tau - t.tri_sum)};
          }
        }
      }
    }
    return {0.0, 0.0};
  }

 private:
  // A few recent (nu, tau) pairs: numerical derivatives revisit the same
  // perturbed shapes row after row.
  const detail::GbpShapeTerms& shape_terms(double nu, double tau) {
    for (auto& e : cache_)
      if (e.nu == nu && e.tau == tau) return e.terms;
    auto& e = cache_[next_];
    next_ = (next_ + 1) % cache_.size();
    e.nu = nu;
    e.tau = tau;
    e.terms = detail::gbp_shape_terms(nu, tau);
    return e.terms;
  }

  struct CacheEntry {
    double nu = kNaN, tau = kNaN;
    detail::GbpShapeTerms terms{};
  };

  Family family_;
  std::array<CacheEntry, 12> cache_{};
  std::size_t next_ = 0;
};

//! A single predictive distribution: family plus natural-scale parameters.
struct Distribution {
  Family family = Family::gaussian;
  ParamVector params;

  double cdf(double y) const { return lvfc::cdf(family, params, y); }
  double pdf(double y) const { return lvfc::pdf(family, params, y); }
  double quantile(double p) const { return lvfc::quantile(family, params, p); }
  bool operator==(const Distribution&) const = default;
};

}  // namespace lvfc
