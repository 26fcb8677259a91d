#pragma once

// Penalised regression splines: cubic B-spline bases (open and cyclic),
// difference penalties, sum-to-zero constraints, varying-coefficient and
// tensor-product terms, and GCV smoothing-parameter selection on the
// cross-product form of a weighted least-squares problem.

#include <algorithm>
#include <cmath>
#include <optional>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "json.hpp"
#include "lvfc/common.hpp"
#include "lvfc/frame.hpp"

namespace lvfc {

using Eigen::MatrixXd;
using Eigen::VectorXd;

// ---------------------------------------------------------------------------
// basis functions

namespace detail {

// Uniform cubic B-spline pieces at local coordinate t in [0, 1).
inline void cubic_pieces(double t, double out[4]) {
  const double t2 = t * t, t3 = t2 * t;
  out[0] = (1.0 - t) * (1.0 - t) * (1.0 - t) / 6.0;
  out[1] = (3.0 * t3 - 6.0 * t2 + 4.0) / 6.0;
  out[2] = (-3.0 * t3 + 3.0 * t2 + 3.0 * t + 1.0) / 6.0;
  out[3] = t3 / 6.0;
}

// d/dt of the pieces above.
inline void cubic_piece_slopes(double t, double out[4]) {
  const double t2 = t * t;
  out[0] = -(1.0 - t) * (1.0 - t) / 2.0;
  out[1] = (9.0 * t2 - 12.0 * t) / 6.0;
  out[2] = (-9.0 * t2 + 6.0 * t + 3.0) / 6.0;
  out[3] = t2 / 2.0;
}

inline void check_dim(int k, int min_k) {
  if (k < min_k)
    throw std::invalid_argument("basis dimension " + std::to_string(k) + " below minimum " + std::to_string(min_k));
}

}  // namespace detail

//! Cubic B-spline basis with K functions on equally spaced knots over
//! [lo, hi]. x outside the range is clamped.
inline MatrixXd bspline_basis(std::span<const double> x, double lo, double hi, int K, bool derivative = false) {
  detail::check_dim(K, 4);
  if (!(hi > lo)) throw std::invalid_argument("bspline_basis: empty range");
  const int nseg = K - 3;
  const double dx = (hi - lo) / nseg;
  MatrixXd B = MatrixXd::Zero(static_cast<Eigen::Index>(x.size()), K);
  for (std::size_t i = 0; i < x.size(); ++i) {
    const double u = (std::clamp(x[i], lo, hi) - lo) / dx;
    int s = std::min(static_cast<int>(std::floor(u)), nseg - 1);
    const double t = u - s;
    double v[4];
    if (derivative) {
      detail::cubic_piece_slopes(t, v);
      for (double& e : v) e /= dx;
    } else {
      detail::cubic_pieces(t, v);
    }
    for (int j = 0; j < 4; ++j) B(static_cast<Eigen::Index>(i), s + j) = v[j];
  }
  return B;
}

//! Periodic cubic B-spline basis with K functions over one period starting
//! at lo; x is wrapped into [lo, lo + period).
inline MatrixXd cyclic_bspline_basis(std::span<const double> x, double lo, double period, int K,
                                     bool derivative = false) {
  detail::check_dim(K, 4);
  if (!(period > 0)) throw std::invalid_argument("cyclic_bspline_basis: period must be positive");
  const double dx = period / K;
  MatrixXd B = MatrixXd::Zero(static_cast<Eigen::Index>(x.size()), K);
  for (std::size_t i = 0; i < x.size(); ++i) {
    double u = std::fmod((x[i] - lo) / dx, static_cast<double>(K));
    if (u < 0) u += K;
    int s = static_cast<int>(std::floor(u));
    if (s >= K) s = 0, u = 0;
    const double t = u - s;
    double v[4];
    if (derivative) {
      detail::cubic_piece_slopes(t, v);
      for (double& e : v) e /= dx;
    } else {
      detail::cubic_pieces(t, v);
    }
    for (int j = 0; j < 4; ++j) B(static_cast<Eigen::Index>(i), (s + j) % K) += v[j];
  }
  return B;
}

//! Order-d difference matrix, (K - d) x K.
inline MatrixXd difference_matrix(int K, int order) {
  MatrixXd D = MatrixXd::Identity(K, K);
  for (int o = 0; o < order; ++o) {
    MatrixXd next(D.rows() - 1, K);
    for (Eigen::Index r = 0; r + 1 < D.rows(); ++r) next.row(r) = D.row(r + 1) - D.row(r);
    D = next;
  }
  return D;
}

//! D'D for order-d differences.
inline MatrixXd difference_penalty(int K, int order = 2) {
  const MatrixXd D = difference_matrix(K, order);
  return D.transpose() * D;
}

//! Wrapped (circulant) order-d differences, K x K.
inline MatrixXd cyclic_difference_penalty(int K, int order = 2) {
  MatrixXd D = MatrixXd::Identity(K, K);
  for (int o = 0; o < order; ++o) {
    MatrixXd next(K, K);
    for (int r = 0; r < K; ++r) next.row(r) = D.row((r + 1) % K) - D.row(r);
    D = next;
  }
  return D.transpose() * D;
}

//! Orthonormal basis Z (K x K-1) of the null space of c', so that a block
//! B Z satisfies the sum-to-zero constraint c' beta = 0 with c = colsum(B).
inline MatrixXd sum_to_zero_basis(const VectorXd& c) {
  const Eigen::Index K = c.size();
  VectorXd v = c;
  const double norm = c.norm();
  if (norm == 0.0) return MatrixXd::Identity(K, K).rightCols(K - 1);
  v(0) += (c(0) >= 0 ? norm : -norm);
  const MatrixXd H = MatrixXd::Identity(K, K) - 2.0 * v * v.transpose() / v.squaredNorm();
  return H.rightCols(K - 1);
}

//! Each row of B scaled by the multiplier.
inline MatrixXd varying_coefficient(const MatrixXd& B, std::span<const double> multiplier) {
  if (static_cast<Eigen::Index>(multiplier.size()) != B.rows())
    throw std::invalid_argument("varying_coefficient: multiplier length mismatch");
  MatrixXd out = B;
  for (Eigen::Index i = 0; i < B.rows(); ++i) out.row(i) *= multiplier[static_cast<std::size_t>(i)];
  return out;
}

//! One copy of B per factor level, zero outside rows of that level.
inline MatrixXd factor_by(const MatrixXd& B, std::span<const int> codes, int levels) {
  MatrixXd out = MatrixXd::Zero(B.rows(), B.cols() * levels);
  for (Eigen::Index i = 0; i < B.rows(); ++i) {
    const int l = codes[static_cast<std::size_t>(i)];
    if (l < 0 || l >= levels) throw std::invalid_argument("factor_by: level out of range");
    out.block(i, l * B.cols(), 1, B.cols()) = B.row(i);
  }
  return out;
}

//! Row-wise Kronecker product; column (i, j) -> i * B2.cols() + j.
inline MatrixXd tensor_product(const MatrixXd& B1, const MatrixXd& B2) {
  if (B1.rows() != B2.rows()) throw std::invalid_argument("tensor_product: row mismatch");
  MatrixXd out(B1.rows(), B1.cols() * B2.cols());
  for (Eigen::Index i = 0; i < B1.rows(); ++i)
    for (Eigen::Index a = 0; a < B1.cols(); ++a)
      out.block(i, a * B2.cols(), 1, B2.cols()) = B1(i, a) * B2.row(i);
  return out;
}

inline MatrixXd kron(const MatrixXd& A, const MatrixXd& B) {
  MatrixXd out(A.rows() * B.rows(), A.cols() * B.cols());
  for (Eigen::Index i = 0; i < A.rows(); ++i)
    for (Eigen::Index j = 0; j < A.cols(); ++j) out.block(i * B.rows(), j * B.cols(), B.rows(), B.cols()) = A(i, j) * B;
  return out;
}

//! Marginal penalties S1 (x) I and I (x) S2 for a tensor-product block.
inline std::pair<MatrixXd, MatrixXd> tensor_penalties(const MatrixXd& S1, const MatrixXd& S2) {
  return {kron(S1, MatrixXd::Identity(S2.rows(), S2.cols())), kron(MatrixXd::Identity(S1.rows(), S1.cols()), S2)};
}

// ---------------------------------------------------------------------------
// model terms

enum class TermKind {
  linear,            // x
  effects,           // factor, effect (sum-to-zero) coding, L-1 columns
  dummies,           // factor, treatment coding against level 0, L-1 columns
  factor_by_linear,  // x * 1{factor = j}, j = 1..L-1
  pb,                // penalised B-spline
  pbc,               // cyclic penalised B-spline
  pvc,               // penalised B-spline varying by a factor, one curve per level
  vc,                // penalised B-spline scaled by a numeric multiplier
  tensor,            // tensor product of two marginal bases
};

inline std::string to_string(TermKind k) {
  switch (k) {
    case TermKind::linear: return "linear";
    case TermKind::effects: return "effects";
    case TermKind::dummies: return "dummies";
    case TermKind::factor_by_linear: return "factor_by_linear";
    case TermKind::pb: return "pb";
    case TermKind::pbc: return "pbc";
    case TermKind::pvc: return "pvc";
    case TermKind::vc: return "vc";
    case TermKind::tensor: return "tensor";
  }
  return "?";
}

inline TermKind term_kind_from_string(const std::string& s) {
  for (auto k : {TermKind::linear, TermKind::effects, TermKind::dummies, TermKind::factor_by_linear, TermKind::pb,
                 TermKind::pbc, TermKind::pvc, TermKind::vc, TermKind::tensor})
    if (to_string(k) == s) return k;
  throw std::invalid_argument("unknown term kind '" + s + "'");
}

//! Declarative description of one additive term.
struct TermSpec {
  TermKind kind = TermKind::linear;
  std::string x;           // main covariate
  std::string by;          // factor (pvc, factor_by_linear) or multiplier (vc)
  std::string x2;          // second tensor covariate
  int levels = 0;          // factor levels (codes level_base .. level_base+levels-1)
  int level_base = 0;
  int basis_dim = 10;
  int basis_dim2 = 8;
  int penalty_order = 2;
  bool cyclic = false;     // tensor: first margin cyclic
  bool cyclic2 = false;    // tensor: second margin cyclic
  double cyclic_lo = 0.0;  // pbc / cyclic margins
  double period = 0.0;
  double cyclic_lo2 = 0.0;
  double period2 = 0.0;
  std::optional<double> fixed_lambda;
  std::optional<double> target_edf;

  bool penalised() const {
    return kind == TermKind::pb || kind == TermKind::pbc || kind == TermKind::pvc || kind == TermKind::vc ||
           kind == TermKind::tensor;
  }

  std::vector<std::string> covariates() const {
    std::vector<std::string> out{x};
    if (!by.empty()) out.push_back(by);
    if (!x2.empty()) out.push_back(x2);
    return out;
  }

  std::string label() const {
    std::string s = to_string(kind) + "(" + x;
    if (!x2.empty()) s += "," + x2;
    if (!by.empty()) s += ",by=" + by;
    return s + ")";
  }
};

inline TermSpec linear_term(std::string x) {
  TermSpec t;
  t.x = std::move(x);
  return t;
}

inline TermSpec effects_term(std::string factor, int levels, int base = 0) {
  TermSpec t;
  t.kind = TermKind::effects;
  t.x = std::move(factor);
  t.levels = levels;
  t.level_base = base;
  return t;
}

inline TermSpec dummies_term(std::string factor, int levels, int base = 0) {
  TermSpec t;
  t.kind = TermKind::dummies;
  t.x = std::move(factor);
  t.levels = levels;
  t.level_base = base;
  return t;
}

inline TermSpec factor_by_linear_term(std::string x, std::string factor, int levels, int base = 0) {
  TermSpec t;
  t.kind = TermKind::factor_by_linear;
  t.x = std::move(x);
  t.by = std::move(factor);
  t.levels = levels;
  t.level_base = base;
  return t;
}

inline TermSpec pb_term(std::string x, int K = 10) {
  TermSpec t;
  t.kind = TermKind::pb;
  t.x = std::move(x);
  t.basis_dim = K;
  return t;
}

inline TermSpec pbc_term(std::string x, double lo, double period, int K = 10) {
  TermSpec t;
  t.kind = TermKind::pbc;
  t.x = std::move(x);
  t.basis_dim = K;
  t.cyclic_lo = lo;
  t.period = period;
  return t;
}

inline TermSpec pvc_term(std::string x, std::string factor, int levels, int K = 10, int base = 0) {
  TermSpec t;
  t.kind = TermKind::pvc;
  t.x = std::move(x);
  t.by = std::move(factor);
  t.levels = levels;
  t.level_base = base;
  t.basis_dim = K;
  return t;
}

inline TermSpec vc_term(std::string x, std::string multiplier, int K = 10) {
  TermSpec t;
  t.kind = TermKind::vc;
  t.x = std::move(x);
  t.by = std::move(multiplier);
  t.basis_dim = K;
  return t;
}

inline TermSpec tensor_term(std::string x1, std::string x2, int K1 = 8, int K2 = 8) {
  TermSpec t;
  t.kind = TermKind::tensor;
  t.x = std::move(x1);
  t.x2 = std::move(x2);
  t.basis_dim = K1;
  t.basis_dim2 = K2;
  return t;
}

inline nlohmann::json to_json(const TermSpec& t) {
  nlohmann::json j{{"kind", to_string(t.kind)}, {"x", t.x}};
  if (!t.by.empty()) j["by"] = t.by;
  if (!t.x2.empty()) j["x2"] = t.x2;
  if (t.levels) j["levels"] = t.levels, j["level_base"] = t.level_base;
  if (t.penalised()) {
    j["basis_dim"] = t.basis_dim;
    j["penalty_order"] = t.penalty_order;
  }
  if (t.kind == TermKind::tensor) {
    j["basis_dim2"] = t.basis_dim2;
    j["cyclic"] = t.cyclic;
    j["cyclic2"] = t.cyclic2;
    j["cyclic_lo2"] = t.cyclic_lo2;
    j["period2"] = t.period2;
  }
  if (t.kind == TermKind::pbc || t.kind == TermKind::tensor) {
    j["cyclic_lo"] = t.cyclic_lo;
    j["period"] = t.period;
  }
  if (t.fixed_lambda) j["fixed_lambda"] = *t.fixed_lambda;
  if (t.target_edf) j["target_edf"] = *t.target_edf;
  return j;
}

inline TermSpec term_from_json(const nlohmann::json& j) {
  TermSpec t;
  t.kind = term_kind_from_string(j.at("kind"));
  t.x = j.at("x");
  t.by = j.value("by", "");
  t.x2 = j.value("x2", "");
  t.levels = j.value("levels", 0);
  t.level_base = j.value("level_base", 0);
  t.basis_dim = j.value("basis_dim", 10);
  t.basis_dim2 = j.value("basis_dim2", 8);
  t.penalty_order = j.value("penalty_order", 2);
  t.cyclic = j.value("cyclic", false);
  t.cyclic2 = j.value("cyclic2", false);
  t.cyclic_lo = j.value("cyclic_lo", 0.0);
  t.period = j.value("period", 0.0);
  t.cyclic_lo2 = j.value("cyclic_lo2", 0.0);
  t.period2 = j.value("period2", 0.0);
  if (j.contains("fixed_lambda")) t.fixed_lambda = j.at("fixed_lambda").get<double>();
  if (j.contains("target_edf")) t.target_edf = j.at("target_edf").get<double>();
  return t;
}

//! A term bound to its training data: covariate ranges and identifiability
//! constraints are frozen here so prediction rebuilds the same columns.
struct TermBasis {
  TermSpec spec;
  double lo = 0.0, hi = 1.0;    // range of x (non-cyclic margins)
  double lo2 = 0.0, hi2 = 1.0;  // range of x2
  std::vector<MatrixXd> constraints;  // per smooth block: K x (K-1)
  int ncols = 0;
};

namespace detail {

inline int factor_code(const TermSpec& t, double v) {
  const int code = static_cast<int>(std::lround(v)) - t.level_base;
  if (code < 0 || code >= t.levels)
    throw DataError("factor '" + (t.kind == TermKind::effects || t.kind == TermKind::dummies ? t.x : t.by) +
                    "' value " + format_double(v) + " outside its " + std::to_string(t.levels) + " levels");
  return code;
}

inline std::vector<double> gather(std::span<const double> col, std::span<const std::size_t> rows) {
  std::vector<double> out(rows.size());
  for (std::size_t i = 0; i < rows.size(); ++i) out[i] = col[rows[i]];
  return out;
}

// Raw (unconstrained) marginal basis of a smooth on x.
inline MatrixXd raw_margin(const std::vector<double>& x, bool cyclic, double cyc_lo, double period, double lo,
                           double hi, int K) {
  return cyclic ? cyclic_bspline_basis(x, cyc_lo, period, K) : bspline_basis(x, lo, hi, K);
}

inline MatrixXd raw_smooth(const TermBasis& b, const std::vector<double>& x, const std::vector<double>& x2) {
  const auto& t = b.spec;
  switch (t.kind) {
    case TermKind::pb:
    case TermKind::pvc:
    case TermKind::vc:
      return bspline_basis(x, b.lo, b.hi, t.basis_dim);
    case TermKind::pbc:
      return cyclic_bspline_basis(x, t.cyclic_lo, t.period, t.basis_dim);
    case TermKind::tensor:
      return tensor_product(raw_margin(x, t.cyclic, t.cyclic_lo, t.period, b.lo, b.hi, t.basis_dim),
                            raw_margin(x2, t.cyclic2, t.cyclic_lo2, t.period2, b.lo2, b.hi2, t.basis_dim2));
    default:
      throw std::logic_error("raw_smooth on unpenalised term");
  }
}

inline MatrixXd smooth_penalty(const TermSpec& t, int which) {
  if (t.kind == TermKind::tensor) {
    const MatrixXd S1 = t.cyclic ? cyclic_difference_penalty(t.basis_dim, t.penalty_order)
                                 : difference_penalty(t.basis_dim, t.penalty_order);
    const MatrixXd S2 = t.cyclic2 ? cyclic_difference_penalty(t.basis_dim2, t.penalty_order)
                                  : difference_penalty(t.basis_dim2, t.penalty_order);
    auto [P1, P2] = tensor_penalties(S1, S2);
    return which == 0 ? P1 : P2;
  }
  if (t.kind == TermKind::pbc) return cyclic_difference_penalty(t.basis_dim, t.penalty_order);
  return difference_penalty(t.basis_dim, t.penalty_order);
}

}  // namespace detail

//! Binds a term to training rows: records ranges and sum-to-zero constraints.
inline TermBasis prepare_term(const TermSpec& spec, const FeatureFrame& frame, std::span<const std::size_t> rows) {
  TermBasis b;
  b.spec = spec;
  const auto& t = spec;
  if (t.penalised() && t.basis_dim < t.penalty_order + 2)
    throw std::invalid_argument(t.label() + ": basis dimension must be at least penalty order + 2");
  if ((t.kind == TermKind::pbc || (t.kind == TermKind::tensor && t.cyclic)) && !(t.period > 0))
    throw std::invalid_argument(t.label() + ": cyclic term needs a positive period");
  if (t.kind == TermKind::tensor && t.cyclic2 && !(t.period2 > 0))
    throw std::invalid_argument(t.label() + ": cyclic margin needs a positive period");
  auto range = [&](const std::string& name, double& lo, double& hi) {
    const auto col = frame.column(name);
    lo = kInf;
    hi = -kInf;
    for (auto r : rows) {
      lo = std::min(lo, col[r]);
      hi = std::max(hi, col[r]);
    }
    if (!(hi > lo)) hi = lo + 1.0;
  };
  switch (t.kind) {
    case TermKind::linear:
      b.ncols = 1;
      return b;
    case TermKind::effects:
    case TermKind::dummies:
    case TermKind::factor_by_linear:
      if (t.levels < 2) throw std::invalid_argument(t.label() + ": need at least two levels");
      b.ncols = t.levels - 1;
      return b;
    default:
      break;
  }
  range(t.x, b.lo, b.hi);
  if (t.kind == TermKind::tensor) range(t.x2, b.lo2, b.hi2);
  const auto x = detail::gather(frame.column(t.x), rows);
  const auto x2 = t.kind == TermKind::tensor ? detail::gather(frame.column(t.x2), rows) : std::vector<double>{};
  const MatrixXd raw = detail::raw_smooth(b, x, x2);
  if (t.kind == TermKind::vc) {
    b.ncols = static_cast<int>(raw.cols());  // scaled by a covariate: not confounded with the intercept
    return b;
  }
  if (t.kind == TermKind::pvc) {
    if (t.levels < 1) throw std::invalid_argument(t.label() + ": need factor levels");
    const auto by = frame.column(t.by);
    for (int l = 0; l < t.levels; ++l) {
      VectorXd c = VectorXd::Zero(raw.cols());
      for (std::size_t i = 0; i < rows.size(); ++i)
        if (detail::factor_code(t, by[rows[i]]) == l) c += raw.row(static_cast<Eigen::Index>(i)).transpose();
      b.constraints.push_back(sum_to_zero_basis(c));
    }
    b.ncols = t.levels * static_cast<int>(raw.cols() - 1) + (t.levels - 1);
    return b;
  }
  b.constraints.push_back(sum_to_zero_basis(raw.colwise().sum().transpose()));
  b.ncols = static_cast<int>(raw.cols() - 1);
  return b;
}

//! Design columns of a bound term on arbitrary rows. Covariates of open
//! (non-cyclic) smooths are clamped to the training range; the number of
//! clamped values is added to *clamped.
inline MatrixXd term_design(const TermBasis& b, const FeatureFrame& frame, std::span<const std::size_t> rows,
                            std::size_t* clamped = nullptr) {
  const auto& t = b.spec;
  const auto n = static_cast<Eigen::Index>(rows.size());
  MatrixXd X = MatrixXd::Zero(n, b.ncols);
  auto xs = detail::gather(frame.column(t.x), rows);
  switch (t.kind) {
    case TermKind::linear:
      for (Eigen::Index i = 0; i < n; ++i) X(i, 0) = xs[static_cast<std::size_t>(i)];
      return X;
    case TermKind::effects:
      for (Eigen::Index i = 0; i < n; ++i) {
        const int c = detail::factor_code(t, xs[static_cast<std::size_t>(i)]);
        if (c == t.levels - 1)
          X.row(i).setConstant(-1.0);
        else
          X(i, c) = 1.0;
      }
      return X;
    case TermKind::dummies:
      for (Eigen::Index i = 0; i < n; ++i) {
        const int c = detail::factor_code(t, xs[static_cast<std::size_t>(i)]);
        if (c > 0) X(i, c - 1) = 1.0;
      }
      return X;
    case TermKind::factor_by_linear: {
      const auto by = detail::gather(frame.column(t.by), rows);
      for (Eigen::Index i = 0; i < n; ++i) {
        const int c = detail::factor_code(t, by[static_cast<std::size_t>(i)]);
        if (c > 0) X(i, c - 1) = xs[static_cast<std::size_t>(i)];
      }
      return X;
    }
    default:
      break;
  }
  auto clamp_into = [&](std::vector<double>& v, double lo, double hi) {
    for (double& e : v)
      if (e < lo || e > hi) {
        e = std::clamp(e, lo, hi);
        if (clamped) ++*clamped;
      }
  };
  std::vector<double> x2;
  if (t.kind != TermKind::pbc && !(t.kind == TermKind::tensor && t.cyclic)) clamp_into(xs, b.lo, b.hi);
  if (t.kind == TermKind::tensor) {
    x2 = detail::gather(frame.column(t.x2), rows);
    if (!t.cyclic2) clamp_into(x2, b.lo2, b.hi2);
  }
  const MatrixXd raw = detail::raw_smooth(b, xs, x2);
  if (t.kind == TermKind::vc) return varying_coefficient(raw, detail::gather(frame.column(t.by), rows));
  if (t.kind == TermKind::pvc) {
    const auto by = detail::gather(frame.column(t.by), rows);
    const Eigen::Index k = raw.cols() - 1;
    for (Eigen::Index i = 0; i < n; ++i) {
      const int c = detail::factor_code(t, by[static_cast<std::size_t>(i)]);
      X.block(i, c * k, 1, k) = raw.row(i) * b.constraints[static_cast<std::size_t>(c)];
      if (c > 0) X(i, t.levels * k + c - 1) = 1.0;
    }
    return X;
  }
  return raw * b.constraints.front();
}

//! Penalty matrices (ncols x ncols) of a bound term, one per smoothing
//! parameter. Empty for unpenalised terms.
inline std::vector<MatrixXd> term_penalties(const TermBasis& b) {
  const auto& t = b.spec;
  std::vector<MatrixXd> out;
  if (!t.penalised()) return out;
  if (t.kind == TermKind::vc) {
    out.push_back(detail::smooth_penalty(t, 0));
    return out;
  }
  if (t.kind == TermKind::pvc) {
    const MatrixXd S = detail::smooth_penalty(t, 0);
    const int k = t.basis_dim - 1;
    for (int l = 0; l < t.levels; ++l) {
      const auto& Z = b.constraints[static_cast<std::size_t>(l)];
      MatrixXd P = MatrixXd::Zero(b.ncols, b.ncols);
      P.block(l * k, l * k, k, k) = Z.transpose() * S * Z;
      out.push_back(std::move(P));
    }
    return out;
  }
  const auto& Z = b.constraints.front();
  const int count = t.kind == TermKind::tensor ? 2 : 1;
  for (int w = 0; w < count; ++w) out.push_back(Z.transpose() * detail::smooth_penalty(t, w) * Z);
  return out;
}

inline nlohmann::json to_json(const TermBasis& b) {
  nlohmann::json j{{"spec", to_json(b.spec)}, {"lo", b.lo}, {"hi", b.hi}, {"ncols", b.ncols}};
  if (b.spec.kind == TermKind::tensor) j["lo2"] = b.lo2, j["hi2"] = b.hi2;
  auto& cons = j["constraints"] = nlohmann::json::array();
  for (const auto& Z : b.constraints) {
    std::vector<double> flat(Z.data(), Z.data() + Z.size());
    cons.push_back({{"rows", Z.rows()}, {"cols", Z.cols()}, {"data", flat}});
  }
  return j;
}

inline TermBasis term_basis_from_json(const nlohmann::json& j) {
  TermBasis b;
  b.spec = term_from_json(j.at("spec"));
  b.lo = j.at("lo");
  b.hi = j.at("hi");
  b.lo2 = j.value("lo2", 0.0);
  b.hi2 = j.value("hi2", 1.0);
  b.ncols = j.at("ncols");
  for (const auto& c : j.at("constraints")) {
    const auto data = c.at("data").get<std::vector<double>>();
    b.constraints.push_back(
        Eigen::Map<const MatrixXd>(data.data(), c.at("rows").get<Eigen::Index>(), c.at("cols").get<Eigen::Index>()));
  }
  return b;
}

// ---------------------------------------------------------------------------
// penalised weighted least squares with smoothing-parameter selection

//! One smoothing parameter acting on a principal block of the design.
struct PenaltyComponent {
  Eigen::Index offset = 0;
  MatrixXd S;              // square, acts on columns [offset, offset + S.rows())
  int group = 0;           // term index; terms with fixed/target settings share one rho
  std::optional<double> fixed_lambda;
  std::optional<double> target_edf;
  Eigen::Index group_offset = 0;  // term column block, for term EDF
  Eigen::Index group_cols = 0;
};

//! Weighted LS problem in cross-product form: A = X'WX, b = X'Wz, c = z'Wz.
struct SmoothingProblem {
  MatrixXd A;
  VectorXd b;
  double c = 0.0;
  double n = 0.0;
  std::vector<PenaltyComponent> penalties;
  double ridge = 1e-9;  // relative to mean diag(A)
};

struct SmoothingSolution {
  VectorXd beta;
  VectorXd influence_diag;  // diag of (A + P)^-1 A
  double edf = 0.0;
  double rss = 0.0;
  double gcv = 0.0;
  std::vector<double> lambdas;
  MatrixXd covariance;      // (A + P)^-1, filled on request
};

namespace detail {

inline double penalty_scale(const SmoothingProblem& p, const PenaltyComponent& c) {
  const auto k = c.S.rows();
  const double ta = p.A.block(c.offset, c.offset, k, k).trace();
  const double ts = c.S.trace();
  return (ta > 0 && ts > 0) ? ta / ts : 1.0;
}

}  // namespace detail

//! Solves for given smoothing parameters.
inline SmoothingSolution solve_penalised(const SmoothingProblem& p, const std::vector<double>& lambdas,
                                         bool want_covariance = false) {
  const Eigen::Index m = p.A.rows();
  MatrixXd H = p.A;
  for (std::size_t j = 0; j < p.penalties.size(); ++j) {
    const auto& c = p.penalties[j];
    H.block(c.offset, c.offset, c.S.rows(), c.S.cols()) += lambdas[j] * c.S;
  }
  const double mean_diag = m > 0 ? std::max(p.A.diagonal().mean(), 1e-300) : 1.0;
  H.diagonal().array() += p.ridge * mean_diag;
  SmoothingSolution s;
  s.lambdas = lambdas;
  Eigen::LLT<MatrixXd> llt(H);
  if (llt.info() != Eigen::Success) {
    H.diagonal().array() += 1e-6 * mean_diag;
    llt.compute(H);
    if (llt.info() != Eigen::Success) throw FitError("penalised normal equations are not positive definite");
  }
  s.beta = llt.solve(p.b);
  const MatrixXd F = llt.solve(p.A);
  s.influence_diag = F.diagonal();
  s.edf = F.trace();
  s.rss = std::max(0.0, p.c - 2.0 * s.beta.dot(p.b) + s.beta.dot(p.A * s.beta));
  const double denom = p.n - s.edf;
  s.gcv = denom > 0 ? p.n * s.rss / (denom * denom) : kInf;
  if (want_covariance) s.covariance = llt.solve(MatrixXd::Identity(m, m));
  return s;
}

//! Chooses smoothing parameters: fixed values are kept, target-EDF groups are
//! matched by bisection, the rest minimise GCV by a coordinate search over
//! log(lambda). `warm` holds previous log-scale values (may be empty).
inline SmoothingSolution select_smoothing(const SmoothingProblem& p, std::vector<double>* warm_rho = nullptr) {
  const std::size_t J = p.penalties.size();
  if (J == 0) return solve_penalised(p, {});
  std::vector<double> scale(J), rho(J, 0.0);
  for (std::size_t j = 0; j < J; ++j) scale[j] = detail::penalty_scale(p, p.penalties[j]);
  const bool warm = warm_rho && warm_rho->size() == J;
  if (warm) rho = *warm_rho;

  auto lambdas_of = [&](const std::vector<double>& r) {
    std::vector<double> l(J);
    for (std::size_t j = 0; j < J; ++j)
      l[j] = p.penalties[j].fixed_lambda ? *p.penalties[j].fixed_lambda : scale[j] * std::exp(r[j]);
    return l;
  };

  // Target-EDF groups: one shared rho, bisection on the term EDF.
  std::vector<int> groups_done;
  for (std::size_t j = 0; j < J; ++j) {
    const auto& c = p.penalties[j];
    if (!c.target_edf || c.fixed_lambda) continue;
    if (std::find(groups_done.begin(), groups_done.end(), c.group) != groups_done.end()) continue;
    groups_done.push_back(c.group);
    auto term_edf = [&](double r) {
      auto trial = rho;
      for (std::size_t k = 0; k < J; ++k)
        if (p.penalties[k].group == c.group) trial[k] = r;
      const auto s = solve_penalised(p, lambdas_of(trial));
      return s.influence_diag.segment(c.group_offset, c.group_cols).sum();
    };
    double lo = -20.0, hi = 25.0;
    for (int it = 0; it < 60; ++it) {
      const double mid = 0.5 * (lo + hi);
      if (term_edf(mid) > *c.target_edf)
        lo = mid;
      else
        hi = mid;
    }
    for (std::size_t k = 0; k < J; ++k)
      if (p.penalties[k].group == c.group) rho[k] = 0.5 * (lo + hi);
  }

  std::vector<std::size_t> free;
  for (std::size_t j = 0; j < J; ++j)
    if (!p.penalties[j].fixed_lambda && !p.penalties[j].target_edf) free.push_back(j);

  auto gcv_at = [&](std::size_t j, double r) {
    auto trial = rho;
    trial[j] = r;
    return solve_penalised(p, lambdas_of(trial)).gcv;
  };

  const double lo_bound = -14.0, hi_bound = 18.0;
  const int sweeps = warm ? 2 : 3;
  for (int sweep = 0; sweep < sweeps && !free.empty(); ++sweep) {
    double moved = 0.0;
    for (auto j : free) {
      // Coarse grid then golden-section refinement.
      const double span = (warm || sweep > 0) ? 4.0 : (hi_bound - lo_bound) / 2.0;
      const double centre = (warm || sweep > 0) ? rho[j] : 0.5 * (lo_bound + hi_bound);
      const double g_lo = std::max(lo_bound, centre - span), g_hi = std::min(hi_bound, centre + span);
      const int steps = (warm || sweep > 0) ? 8 : 16;
      double best_r = rho[j], best = gcv_at(j, rho[j]);
      for (int s = 0; s <= steps; ++s) {
        const double r = g_lo + (g_hi - g_lo) * s / steps;
        const double g = gcv_at(j, r);
        if (g < best) best = g, best_r = r;
      }
      const double h = (g_hi - g_lo) / steps;
      double a = std::max(lo_bound, best_r - h), b = std::min(hi_bound, best_r + h);
      const double phi = 0.6180339887498949;
      double x1 = b - phi * (b - a), x2 = a + phi * (b - a);
      double f1 = gcv_at(j, x1), f2 = gcv_at(j, x2);
      for (int it = 0; it < 18; ++it) {
        if (f1 < f2) {
          b = x2, x2 = x1, f2 = f1;
          x1 = b - phi * (b - a);
          f1 = gcv_at(j, x1);
        } else {
          a = x1, x1 = x2, f1 = f2;
          x2 = a + phi * (b - a);
          f2 = gcv_at(j, x2);
        }
      }
      const double cand = f1 < f2 ? x1 : x2;
      if (std::min(f1, f2) < best) best_r = cand;
      moved = std::max(moved, std::abs(best_r - rho[j]));
      rho[j] = best_r;
    }
    if (moved < 0.05) break;
  }
  if (warm_rho) *warm_rho = rho;
  return solve_penalised(p, lambdas_of(rho));
}

//! Convenience: penalised LS fit of y on X with given penalties and lambdas
//! (or GCV-selected when lambdas is empty). Unit weights unless given.
inline SmoothingSolution penalised_fit(const MatrixXd& X, const VectorXd& y, const std::vector<MatrixXd>& penalties,
                                       std::vector<double> lambdas = {}, const VectorXd& w = VectorXd()) {
  SmoothingProblem p;
  const VectorXd wt = w.size() ? w : VectorXd::Ones(X.rows());
  const MatrixXd WX = X.array().colwise() * wt.array();
  p.A = X.transpose() * WX;
  p.b = WX.transpose() * y;
  p.c = (y.array().square() * wt.array()).sum();
  p.n = static_cast<double>(X.rows());
  for (std::size_t j = 0; j < penalties.size(); ++j) {
    PenaltyComponent c;
    c.S = penalties[j];
    c.offset = 0;
    c.group = static_cast<int>(j);
    c.group_cols = X.cols();
    if (!lambdas.empty()) c.fixed_lambda = lambdas[j];
    p.penalties.push_back(c);
  }
  return lambdas.empty() ? select_smoothing(p) : solve_penalised(p, lambdas);
}

}  // namespace lvfc
