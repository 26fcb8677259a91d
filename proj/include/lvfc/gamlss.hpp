#pragma once

// GAMLSS fitting by the RS scheme: an outer cycle over the distribution
// parameters, each updated by penalised IRLS with the others held fixed.

#include <algorithm>
#include <cmath>
#include <span>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "json.hpp"
#include "lvfc/common.hpp"
#include "lvfc/distributions.hpp"
#include "lvfc/frame.hpp"
#include "lvfc/smoothers.hpp"

namespace lvfc {

//! Additive predictor of one distribution parameter.
struct ParameterFormula {
  bool intercept = true;
  std::vector<TermSpec> terms;
  Link link = Link::identity;
};

struct ModelSpec {
  std::string name;
  Family family = Family::gaussian;
  std::string response = "y";
  double response_floor = 0.0;  // responses below are raised to it (0 = off)
  std::vector<ParameterFormula> params;

  //! Spec with intercept-only predictors and default links.
  static ModelSpec intercept_only(Family f, std::string name = "intercept") {
    ModelSpec s;
    s.name = std::move(name);
    s.family = f;
    for (std::size_t k = 0; k < parameter_count(f); ++k) s.params.push_back({true, {}, default_link(f, k)});
    return s;
  }

  std::vector<std::string> covariates() const {
    std::vector<std::string> out;
    for (const auto& p : params)
      for (const auto& t : p.terms)
        for (const auto& c : t.covariates())
          if (std::find(out.begin(), out.end(), c) == out.end()) out.push_back(c);
    return out;
  }

  void validate(const FeatureFrame& frame) const {
    if (params.size() != parameter_count(family))
      throw std::invalid_argument("model '" + name + "' needs " + std::to_string(parameter_count(family)) +
                                  " parameter formulas");
    for (std::size_t k = 0; k < params.size(); ++k)
      if (!params[k].intercept)
        throw std::invalid_argument("model '" + name + "' parameter " + std::to_string(k) + " lacks an intercept");
    if (!frame.has(response)) throw DataError("frame '" + frame.node_id + "' has no response '" + response + "'");
    for (const auto& c : covariates())
      if (!frame.has(c)) throw DataError("frame '" + frame.node_id + "' has no covariate '" + c + "'");
  }
};

inline nlohmann::json to_json(const ModelSpec& s) {
  nlohmann::json j{{"name", s.name},
                   {"family", to_string(s.family)},
                   {"response", s.response},
                   {"response_floor", s.response_floor}};
  auto& ps = j["params"] = nlohmann::json::array();
  for (const auto& p : s.params) {
    nlohmann::json pj{{"intercept", p.intercept}, {"link", to_string(p.link)}};
    auto& ts = pj["terms"] = nlohmann::json::array();
    for (const auto& t : p.terms) ts.push_back(to_json(t));
    ps.push_back(pj);
  }
  return j;
}

inline ModelSpec model_spec_from_json(const nlohmann::json& j) {
  ModelSpec s;
  s.name = j.at("name");
  s.family = family_from_string(j.at("family"));
  s.response = j.value("response", "y");
  s.response_floor = j.value("response_floor", 0.0);
  for (const auto& pj : j.at("params")) {
    ParameterFormula p;
    p.intercept = pj.value("intercept", true);
    p.link = link_from_string(pj.at("link"));
    for (const auto& t : pj.at("terms")) p.terms.push_back(term_from_json(t));
    s.params.push_back(std::move(p));
  }
  return s;
}

struct FitOptions {
  int max_outer = 200;
  int max_inner = 8;
  double tolerance = 1e-6;          // relative deviance change
  double min_rows_per_coef = 10.0;
  int max_step_halvings = 12;
  double ridge = 1e-9;
  double shape_ridge = 0.0;           // fixed ridge on GBP nu/tau coefficients
  double shape_ridge_refit = 20.0;    // used when shapes run off or the fit stalls
  double shape_limit = 5.3;           // |log nu|, |log tau| beyond this count as running off
  int rs_sweeps = 12;    // backfitting sweeps before the joint Newton phase
  int max_newton = 100;
  double max_abs_log_param = 10.0;  // log-link parameters beyond e^10 or below e^-10 mark a degenerate fit
};

struct ConvergenceRecord {
  int iterations = 0;
  bool converged = false;
  double deviance = kNaN;
  std::vector<double> trace;  // global deviance after each backfitting cycle
  std::vector<double> newton_trace;  // penalised deviance after each accepted Newton step
  double shape_ridge = 0.0;   // ridge on GBP shape coefficients actually used
};

//! Fitted predictor of one parameter.
struct ParameterFit {
  std::vector<TermBasis> bases;
  VectorXd beta;                 // intercept first, then term blocks in order
  std::vector<double> lambdas;
  std::vector<double> term_edf;
  double edf = 0.0;
  MatrixXd covariance;           // (X'WX + S)^-1 at the final iterate
};

struct TrainingSummary {
  std::size_t rows = 0;
  double y_min = kNaN, y_max = kNaN, y_mean = kNaN;
};

class FittedModel {
 public:
  ModelSpec spec;
  std::vector<ParameterFit> params;
  ConvergenceRecord convergence;
  TrainingSummary training;
  std::string fallback_reason;  // non-empty when this fit replaced a failed primary

  std::size_t coefficient_count() const {
    std::size_t n = 0;
    for (const auto& p : params) n += static_cast<std::size_t>(p.beta.size());
    return n;
  }

  //! Linear predictor of parameter k on the given rows.
  VectorXd linear_predictor(std::size_t k, const FeatureFrame& frame, std::span<const std::size_t> rows,
                            std::size_t* clamped = nullptr) const {
    const auto& pf = params[k];
    VectorXd eta = VectorXd::Constant(static_cast<Eigen::Index>(rows.size()), pf.beta(0));
    Eigen::Index off = 1;
    for (const auto& b : pf.bases) {
      const MatrixXd X = term_design(b, frame, rows, clamped);
      eta += X * pf.beta.segment(off, b.ncols);
      off += b.ncols;
    }
    return eta;
  }

  //! Natural-scale parameters per row. Covariates of open smooths are
  //! clamped to the training range; clamping is logged.
  std::vector<ParamVector> predict(const FeatureFrame& frame, std::span<const std::size_t> rows) const {
    for (const auto& c : spec.covariates())
      if (!frame.has(c)) throw DataError("prediction frame lacks covariate '" + c + "'");
    std::vector<ParamVector> out(rows.size());
    std::size_t clamped = 0;
    for (std::size_t k = 0; k < params.size(); ++k) {
      const VectorXd eta = linear_predictor(k, frame, rows, &clamped);
      for (std::size_t i = 0; i < rows.size(); ++i)
        out[i][k] = invert_link(spec.params[k].link, eta(static_cast<Eigen::Index>(i)));
    }
    if (clamped > 0)
      log(LogLevel::debug, "model '" + spec.name + "' on '" + frame.node_id + "': clamped " +
                               std::to_string(clamped) + " covariate values to the training range");
    return out;
  }

  std::vector<ParamVector> predict(const FeatureFrame& frame) const {
    std::vector<std::size_t> rows(frame.rows());
    for (std::size_t i = 0; i < rows.size(); ++i) rows[i] = i;
    return predict(frame, rows);
  }

  nlohmann::json to_json() const {
    nlohmann::json j{{"format", "lvfc-gamlss"}, {"version", 1}, {"spec", lvfc::to_json(spec)}};
    auto& ps = j["params"] = nlohmann::json::array();
    for (const auto& p : params) {
      nlohmann::json pj;
      pj["beta"] = std::vector<double>(p.beta.data(), p.beta.data() + p.beta.size());
      pj["lambdas"] = p.lambdas;
      pj["term_edf"] = p.term_edf;
      pj["edf"] = p.edf;
      auto& bs = pj["bases"] = nlohmann::json::array();
      for (const auto& b : p.bases) bs.push_back(lvfc::to_json(b));
      ps.push_back(pj);
    }
    j["convergence"] = {{"iterations", convergence.iterations},
                        {"converged", convergence.converged},
                        {"deviance", convergence.deviance},
                        {"trace", convergence.trace},
                        {"newton_trace", convergence.newton_trace},
                        {"shape_ridge", convergence.shape_ridge}};
    j["training"] = {{"rows", training.rows}, {"y_min", training.y_min}, {"y_max", training.y_max},
                     {"y_mean", training.y_mean}};
    if (!fallback_reason.empty()) j["fallback_reason"] = fallback_reason;
    return j;
  }

  static FittedModel from_json(const nlohmann::json& j) {
    if (j.value("format", "") != "lvfc-gamlss") throw DataError("not a model document");
    if (j.value("version", 0) != 1) throw DataError("unsupported model document version");
    FittedModel m;
    m.spec = model_spec_from_json(j.at("spec"));
    for (const auto& pj : j.at("params")) {
      ParameterFit p;
      const auto beta = pj.at("beta").get<std::vector<double>>();
      p.beta = Eigen::Map<const VectorXd>(beta.data(), static_cast<Eigen::Index>(beta.size()));
      p.lambdas = pj.at("lambdas").get<std::vector<double>>();
      p.term_edf = pj.at("term_edf").get<std::vector<double>>();
      p.edf = pj.at("edf");
      for (const auto& b : pj.at("bases")) p.bases.push_back(term_basis_from_json(b));
      m.params.push_back(std::move(p));
    }
    const auto& c = j.at("convergence");
    m.convergence.iterations = c.at("iterations");
    m.convergence.converged = c.at("converged");
    m.convergence.deviance = c.at("deviance").is_null() ? kNaN : c.at("deviance").get<double>();
    m.convergence.trace = c.at("trace").get<std::vector<double>>();
    m.convergence.newton_trace = c.value("newton_trace", std::vector<double>{});
    m.convergence.shape_ridge = c.value("shape_ridge", 0.0);
    const auto& t = j.at("training");
    m.training.rows = t.at("rows");
    m.training.y_min = t.at("y_min");
    m.training.y_max = t.at("y_max");
    m.training.y_mean = t.at("y_mean");
    m.fallback_reason = j.value("fallback_reason", "");
    return m;
  }
};

namespace detail {

inline double global_deviance(Family f, const std::vector<Link>& links, const std::vector<VectorXd>& eta,
                              const VectorXd& y) {
  double dev = 0.0;
  ParamVector p;
  for (Eigen::Index i = 0; i < y.size(); ++i) {
    for (std::size_t k = 0; k < eta.size(); ++k) p[k] = invert_link(links[k], eta[k](i));
    if (!valid_params(f, p)) return kInf;
    dev -= 2.0 * loglik(f, p, y(i));
  }
  return std::isfinite(dev) ? dev : kInf;
}

//! Scores and observed information (minus the Hessian of the log-likelihood)
//! of one observation with respect to the linear predictors. The cross
//! terms come from central differences of the analytic scores.
inline void row_derivatives(WorkingCalculator& work, const std::vector<Link>& links, const double* eta, double y,
                            std::size_t K, double* score, double* info) {
  ParamVector p;
  auto scores_at = [&](const double* e, double* out) {
    for (std::size_t j = 0; j < K; ++j) p[j] = invert_link(links[j], e[j]);
    for (std::size_t j = 0; j < K; ++j) out[j] = work(j, p, y).score;
  };
  scores_at(eta, score);
  double e[4], up[4], dn[4];
  for (std::size_t k = 0; k < K; ++k) {
    for (std::size_t j = 0; j < K; ++j) e[j] = eta[j];
    const double h = 1e-5 * std::max(1.0, std::abs(eta[k]));
    e[k] = eta[k] + h;
    scores_at(e, up);
    e[k] = eta[k] - h;
    scores_at(e, dn);
    for (std::size_t j = 0; j < K; ++j) info[j * K + k] = -(up[j] - dn[j]) / (2.0 * h);
  }
  for (std::size_t j = 0; j < K; ++j)
    for (std::size_t k = j + 1; k < K; ++k) info[j * K + k] = info[k * K + j] = 0.5 * (info[j * K + k] + info[k * K + j]);
}

inline ParamVector initial_parameters(Family f, const VectorXd& y) {
  ParamVector p;
  const double n = static_cast<double>(y.size());
  switch (f) {
    case Family::gaussian: {
      const double m = y.mean();
      const double var = (y.array() - m).square().sum() / n;
      p[0] = m;
      p[1] = std::sqrt(std::max(var, 1e-12));
      break;
    }
    case Family::gbp: {
      const VectorXd ly = y.array().log();
      const double m = ly.mean();
      const double sd = std::sqrt(std::max((ly.array() - m).square().sum() / n, 1e-12));
      // Logistic log-scale when nu = tau = 1: sd(log y) = pi / (sqrt(3) sigma).
      p[0] = std::exp(m);
      p[1] = std::clamp(M_PI / std::sqrt(3.0) / sd, 1e-3, 1e3);
      p[2] = 1.0;
      p[3] = 1.0;
      break;
    }
    case Family::bernoulli:
      p[0] = std::clamp(y.mean(), 1e-4, 1.0 - 1e-4);
      break;
  }
  return p;
}

}  // namespace detail

//! Fits the spec to the given (available) rows of the frame.
namespace detail {

struct ShapesRunOff {};

inline FittedModel fit_once(const ModelSpec& spec, const FeatureFrame& frame, std::span<const std::size_t> rows,
                            const FitOptions& opts, bool bail_on_run_off) {
  spec.validate(frame);
  const std::size_t K = spec.params.size();
  const auto n = static_cast<Eigen::Index>(rows.size());
  if (n == 0) throw FitError("model '" + spec.name + "': no training rows");

  // Response and covariate checks.
  VectorXd y(n);
  {
    const auto col = frame.column(spec.response);
    for (Eigen::Index i = 0; i < n; ++i) {
      double v = col[rows[static_cast<std::size_t>(i)]];
      if (!std::isfinite(v)) throw DataError("model '" + spec.name + "': non-finite response");
      if (spec.response_floor > 0) v = std::max(v, spec.response_floor);
      if (spec.family == Family::gbp && !(v > 0))
        throw DataError("model '" + spec.name + "': non-positive response for a positive family");
      y(i) = v;
    }
    for (const auto& c : spec.covariates()) {
      const auto cc = frame.column(c);
      for (auto r : rows)
        if (!std::isfinite(cc[r]))
          throw DataError("model '" + spec.name + "': covariate '" + c + "' missing on a training row");
    }
  }

  FittedModel model;
  model.spec = spec;
  model.training.rows = static_cast<std::size_t>(n);
  model.training.y_min = y.minCoeff();
  model.training.y_max = y.maxCoeff();
  model.training.y_mean = y.mean();

  // Designs and penalties.
  std::vector<MatrixXd> X(K);
  std::vector<std::vector<PenaltyComponent>> penalties(K);
  std::vector<Link> links(K);
  std::size_t total_coef = 0;
  model.params.resize(K);
  for (std::size_t k = 0; k < K; ++k) {
    links[k] = spec.params[k].link;
    auto& pf = model.params[k];
    Eigen::Index cols = 1;
    for (const auto& t : spec.params[k].terms) {
      pf.bases.push_back(prepare_term(t, frame, rows));
      cols += pf.bases.back().ncols;
    }
    X[k].resize(n, cols);
    X[k].col(0).setOnes();
    Eigen::Index off = 1;
    for (std::size_t g = 0; g < pf.bases.size(); ++g) {
      const auto& b = pf.bases[g];
      X[k].middleCols(off, b.ncols) = term_design(b, frame, rows);
      for (auto& S : term_penalties(b)) {
        PenaltyComponent c;
        c.offset = off;
        c.S = std::move(S);
        c.group = static_cast<int>(g);
        c.fixed_lambda = b.spec.fixed_lambda;
        c.target_edf = b.spec.target_edf;
        c.group_offset = off;
        c.group_cols = b.ncols;
        penalties[k].push_back(std::move(c));
      }
      off += b.ncols;
    }
    total_coef += static_cast<std::size_t>(cols);
    // Keeps nu and tau away from the flat ridges towards limiting families.
    if (spec.family == Family::gbp && k >= 2 && opts.shape_ridge > 0) {
      PenaltyComponent c;
      c.offset = 0;
      c.S = MatrixXd::Identity(cols, cols);
      c.group = -1;
      c.fixed_lambda = opts.shape_ridge;
      c.group_offset = 0;
      c.group_cols = cols;
      penalties[k].push_back(std::move(c));
    }
  }
  if (static_cast<double>(n) < opts.min_rows_per_coef * static_cast<double>(total_coef))
    throw FitError("model '" + spec.name + "': " + std::to_string(n) + " rows for " + std::to_string(total_coef) +
                   " coefficients (need " + format_double(opts.min_rows_per_coef) + "x)");

  // Initial predictors: intercepts from the marginal response.
  const ParamVector p0 = detail::initial_parameters(spec.family, y);
  std::vector<VectorXd> eta(K);
  std::vector<VectorXd> beta(K);
  for (std::size_t k = 0; k < K; ++k) {
    const double e0 = apply_link(links[k], p0[k]);
    eta[k] = VectorXd::Constant(n, e0);
    beta[k] = VectorXd::Zero(X[k].cols());
    beta[k](0) = e0;
  }
  std::vector<std::vector<double>> rho(K);
  std::vector<SmoothingSolution> last(K);

  double dev = detail::global_deviance(spec.family, links, eta, y);
  if (!std::isfinite(dev)) throw FitError("model '" + spec.name + "': initial deviance is not finite");
  WorkingCalculator work(spec.family);
  VectorXd u(n), w(n);
  ParamVector p;

  auto& conv = model.convergence;
  auto check_run_off = [&] {
    if (bail_on_run_off && spec.family == Family::gbp)
      for (std::size_t k = 2; k < K; ++k)
        if (std::abs(eta[k].mean()) > opts.shape_limit) throw ShapesRunOff{};
  };
  const int rs_cap = std::min(opts.max_outer, opts.rs_sweeps);
  for (int outer = 0; outer < rs_cap; ++outer) {
    const double dev_start = dev;
    for (std::size_t k = 0; k < K; ++k) {
      for (int inner = 0; inner < opts.max_inner; ++inner) {
        const double dev_inner = dev;
        for (Eigen::Index i = 0; i < n; ++i) {
          for (std::size_t j = 0; j < K; ++j) p[j] = invert_link(links[j], eta[j](i));
          const auto wp = work(k, p, y(i));
          u(i) = wp.score;
          w(i) = wp.weight;
        }
        if (!u.allFinite() || !w.allFinite() || !(w.maxCoeff() > 0))
          throw FitError("model '" + spec.name + "': singular working weights for parameter " + std::to_string(k));
        w = w.cwiseMax(1e-10 * w.maxCoeff());
        const VectorXd z = eta[k].array() + u.array() / w.array();

        SmoothingProblem prob;
        const MatrixXd WX = X[k].array().colwise() * w.array();
        prob.A = X[k].transpose() * WX;
        prob.b = WX.transpose() * z;
        prob.c = (z.array().square() * w.array()).sum();
        prob.n = static_cast<double>(n);
        prob.penalties = penalties[k];
        prob.ridge = opts.ridge;
        SmoothingSolution sol = select_smoothing(prob, &rho[k]);

        // Step-halving on the global deviance.
        const VectorXd beta_old = beta[k], eta_old = eta[k];
        VectorXd beta_new = sol.beta;
        VectorXd eta_new = X[k] * beta_new;
        double dev_new = kInf;
        for (int h = 0; h <= opts.max_step_halvings; ++h) {
          eta[k] = eta_new;
          dev_new = detail::global_deviance(spec.family, links, eta, y);
          if (dev_new <= dev + 1e-10 * (std::abs(dev) + 1.0)) break;
          beta_new = 0.5 * (beta_new + beta_old);
          eta_new = 0.5 * (eta_new + eta_old);
        }
        if (!(dev_new <= dev + 1e-10 * (std::abs(dev) + 1.0))) {
          eta[k] = eta_old;
          break;
        }
        beta[k] = beta_new;
        dev = std::min(dev, dev_new);
        last[k] = std::move(sol);
        if (std::abs(dev_inner - dev) < opts.tolerance * (std::abs(dev) + 1.0)) break;
      }
    }
    conv.trace.push_back(dev);
    conv.iterations = outer + 1;
    check_run_off();
    if (std::abs(dev_start - dev) < opts.tolerance * (std::abs(dev) + 1.0)) {
      break;
    }
  }

  // Joint penalised Newton on all parameters at the selected smoothing
  // parameters; backfitting alone crawls when the parameters are correlated.
  std::vector<Eigen::Index> start(K + 1, 0);
  for (std::size_t k = 0; k < K; ++k) start[k + 1] = start[k] + X[k].cols();
  const Eigen::Index P = start[K];
  std::vector<std::vector<double>> lam(K);
  MatrixXd Spen = MatrixXd::Zero(P, P);
  for (std::size_t k = 0; k < K; ++k) {
    lam[k] = last[k].lambdas;
    if (lam[k].size() != penalties[k].size()) {
      lam[k].clear();
      for (const auto& c : penalties[k]) lam[k].push_back(c.fixed_lambda.value_or(0.0));
    }
    for (std::size_t j = 0; j < penalties[k].size(); ++j) {
      const auto& c = penalties[k][j];
      Spen.block(start[k] + c.offset, start[k] + c.offset, c.S.rows(), c.S.cols()) += lam[k][j] * c.S;
    }
  }
  VectorXd theta(P);
  for (std::size_t k = 0; k < K; ++k) theta.segment(start[k], X[k].cols()) = beta[k];
  auto set_eta = [&](const VectorXd& th) {
    for (std::size_t k = 0; k < K; ++k) eta[k] = X[k] * th.segment(start[k], X[k].cols());
  };
  auto objective = [&](const VectorXd& th) {
    set_eta(th);
    return detail::global_deviance(spec.family, links, eta, y) + th.dot(Spen * th);
  };
  std::vector<VectorXd> U(K, VectorXd(n));
  std::vector<VectorXd> I(K * K, VectorXd(n));
  auto curvature = [&](const VectorXd& th, VectorXd& g, MatrixXd& H) {
    set_eta(th);
    double e[4], sc[4], info[16];
    for (Eigen::Index i = 0; i < n; ++i) {
      for (std::size_t k = 0; k < K; ++k) e[k] = eta[k](i);
      detail::row_derivatives(work, links, e, y(i), K, sc, info);
      for (std::size_t k = 0; k < K; ++k) {
        U[k](i) = sc[k];
        for (std::size_t j = 0; j < K; ++j) I[k * K + j](i) = info[k * K + j];
      }
    }
    g = -(Spen * th);
    H = Spen;
    for (std::size_t k = 0; k < K; ++k) {
      g.segment(start[k], X[k].cols()) += X[k].transpose() * U[k];
      for (std::size_t j = k; j < K; ++j) {
        const MatrixXd WX = X[j].array().colwise() * I[k * K + j].array();
        const MatrixXd B = X[k].transpose() * WX;
        H.block(start[k], start[j], B.rows(), B.cols()) += B;
        if (j != k) H.block(start[j], start[k], B.cols(), B.rows()) += B.transpose();
      }
    }
    return g.allFinite() && H.allFinite();
  };

  double obj = objective(theta);
  bool newton_converged = false;
  VectorXd g;
  MatrixXd H;
  // Levenberg-Marquardt damping, adapted from the ratio of achieved to
  // predicted reduction of the penalised deviance.
  double damp = 0.0;
  bool fresh = true;
  for (int it = 0; it < opts.max_newton && std::isfinite(obj); ++it) {
    if (fresh && !curvature(theta, g, H)) break;
    fresh = false;
    const double md = std::max(H.diagonal().cwiseAbs().mean(), 1e-300);
    VectorXd step;
    for (;;) {
      MatrixXd Hd = H;
      Hd.diagonal().array() += damp * H.diagonal().array().abs() + opts.ridge * md;
      Eigen::LLT<MatrixXd> llt(Hd);
      if (llt.info() == Eigen::Success) {
        step = llt.solve(g);
        break;
      }
      damp = damp == 0.0 ? 1e-6 : damp * 10.0;
      if (damp > 1e8) break;
    }
    if (step.size() == 0 || !step.allFinite()) break;
    // Predicted fall of the penalised deviance under the quadratic model.
    const double predicted = 2.0 * g.dot(step) - step.dot(H * step);
    // Damping shrinks the step by at most a factor 1 + damp.
    if (g.dot(step) * (1.0 + damp) < opts.tolerance * (std::abs(obj) + 1.0)) {
      newton_converged = true;
      break;
    }
    const VectorXd cand = theta + step;
    const double o = objective(cand);
    const double ratio = predicted > 0 ? (obj - o) / predicted : -1.0;
    if (std::isfinite(o) && o <= obj + 1e-12 * (std::abs(obj) + 1.0)) {
      const double change = obj - o;
      theta = cand;
      obj = o;
      fresh = true;
      if (ratio > 0.75) damp = damp < 1e-6 ? 0.0 : damp / 4.0;
      if (ratio < 0.25) damp = damp == 0.0 ? 1e-4 : damp * 4.0;
      if (change < 0.1 * opts.tolerance * (std::abs(obj) + 1.0) && damp < 1e-3) newton_converged = true;
    } else {
      damp = damp == 0.0 ? 1e-4 : damp * 4.0;
      if (damp > 1e8) break;
    }
    if (fresh) {
      set_eta(theta);
      dev = detail::global_deviance(spec.family, links, eta, y);
      conv.newton_trace.push_back(obj);
      check_run_off();
    }
    ++conv.iterations;
    if (newton_converged) break;
  }
  set_eta(theta);
  for (std::size_t k = 0; k < K; ++k) beta[k] = theta.segment(start[k], X[k].cols());
  dev = detail::global_deviance(spec.family, links, eta, y);
  check_run_off();
  conv.converged = newton_converged;
  conv.shape_ridge = spec.family == Family::gbp ? opts.shape_ridge : 0.0;
  conv.deviance = dev;

  // Joint covariance: inverse penalised observed information.
  MatrixXd joint_cov;
  if (curvature(theta, g, H)) {
    const double md = std::max(H.diagonal().cwiseAbs().mean(), 1e-300);
    H.diagonal().array() += opts.ridge * md;
    Eigen::LLT<MatrixXd> llt(H);
    if (llt.info() == Eigen::Success) joint_cov = llt.solve(MatrixXd::Identity(P, P));
  }

  for (std::size_t k = 0; k < K; ++k) {
    auto& pf = model.params[k];
    pf.beta = beta[k];
    // Final smoothing summaries at the accepted coefficients.
    for (Eigen::Index i = 0; i < n; ++i) {
      for (std::size_t j = 0; j < K; ++j) p[j] = invert_link(links[j], eta[j](i));
      w(i) = work(k, p, y(i)).weight;
    }
    SmoothingProblem prob;
    const MatrixXd WX = X[k].array().colwise() * w.array();
    prob.A = X[k].transpose() * WX;
    prob.b = VectorXd::Zero(X[k].cols());
    prob.n = static_cast<double>(n);
    prob.penalties = penalties[k];
    prob.ridge = opts.ridge;
    std::vector<double> lambdas = last[k].lambdas;
    if (lambdas.size() != prob.penalties.size()) {
      lambdas.clear();
      for (const auto& c : prob.penalties) lambdas.push_back(c.fixed_lambda.value_or(0.0));
    }
    const auto s = solve_penalised(prob, lambdas, true);
    pf.lambdas = lambdas;
    pf.edf = s.edf;
    pf.covariance = s.covariance;
    if (joint_cov.rows() == P) pf.covariance = joint_cov.block(start[k], start[k], X[k].cols(), X[k].cols());
    Eigen::Index off = 1;
    for (const auto& b : pf.bases) {
      pf.term_edf.push_back(s.influence_diag.segment(off, b.ncols).sum());
      off += b.ncols;
    }
  }
  return model;
}

}  // namespace detail

//! Penalised maximum likelihood by backfitting (GCV smoothing selection)
//! followed by a joint Newton phase. A GBP fit whose shape parameters run
//! off towards a limiting family, or that stalls, is refitted with a ridge
//! on the shape coefficients.
inline FittedModel fit(const ModelSpec& spec, const FeatureFrame& frame, std::span<const std::size_t> rows,
                       const FitOptions& opts = {}) {
  const bool can_refit = spec.family == Family::gbp && opts.shape_ridge < opts.shape_ridge_refit;
  if (can_refit) {
    try {
      auto m = detail::fit_once(spec, frame, rows, opts, true);
      if (m.convergence.converged) return m;
    } catch (const detail::ShapesRunOff&) {
    }
    FitOptions o = opts;
    o.shape_ridge = opts.shape_ridge_refit;
    auto m = detail::fit_once(spec, frame, rows, o, false);
    log(LogLevel::debug, "'" + frame.node_id + "': " + spec.name + " refitted with shape ridge");
    return m;
  }
  return detail::fit_once(spec, frame, rows, opts, false);
}

inline FittedModel fit(const ModelSpec& spec, const FeatureFrame& frame, const FitOptions& opts = {}) {
  const auto rows = frame.available_rows();
  return fit(spec, frame, rows, opts);
}

//! Fits `primary`; if it fails, does not converge or yields invalid
//! parameters on a training row, fits `fallback` and records why.
inline FittedModel fit_with_fallback(const ModelSpec& primary, const ModelSpec& fallback, const FeatureFrame& frame,
                                     std::span<const std::size_t> rows, const FitOptions& opts = {}) {
  std::string reason;
  try {
    FittedModel m = fit(primary, frame, rows, opts);
    if (!m.convergence.converged) {
      reason = "no convergence after " + std::to_string(m.convergence.iterations) + " iterations";
    } else {
      const auto pars = m.predict(frame, rows);
      for (const auto& pv : pars) {
        if (!valid_params(primary.family, pv)) {
          reason = "invalid fitted parameters on a training row";
          break;
        }
        for (std::size_t k = 0; k < parameter_count(primary.family) && reason.empty(); ++k)
          if (primary.params[k].link == Link::log && std::abs(std::log(pv[k])) > opts.max_abs_log_param)
            reason = "degenerate fit: parameter " + std::to_string(k) + " = " + std::to_string(pv[k]);
        if (!reason.empty()) break;
      }
    }
    if (reason.empty()) return m;
  } catch (const std::exception& e) {
    reason = e.what();
  }
  log(LogLevel::info, "'" + frame.node_id + "': " + primary.name + " replaced by " + fallback.name + " (" +
                          reason + ")");
  try {
    FittedModel m = fit(fallback, frame, rows, opts);
    m.fallback_reason = reason;
    return m;
  } catch (const std::exception& e) {
    throw FitError("'" + frame.node_id + "': primary failed (" + reason + ") and fallback failed (" + e.what() +
                   ")");
  }
}

}  // namespace lvfc
