#include <gtest/gtest.h>

#include <cmath>

#include <Eigen/Eigenvalues>

#include "lvfc/smoothers.hpp"
#include "test_util.hpp"

using namespace lvfc;
using lvfc::testing::all_rows;
using lvfc::testing::make_frame;

namespace {

std::vector<double> grid(double lo, double hi, int n) {
  std::vector<double> x(n);
  for (int i = 0; i < n; ++i) x[i] = lo + (hi - lo) * i / (n - 1);
  return x;
}

VectorXd to_vec(const std::vector<double>& v) { return Eigen::Map<const VectorXd>(v.data(), v.size()); }

double rms(const VectorXd& a) { return std::sqrt(a.squaredNorm() / a.size()); }

}  // namespace

TEST(Basis, LinearTermIsTheCovariate) {
  const auto f = make_frame({{"x", {0.5, -1.0, 2.0, 3.5}}});
  const auto rows = all_rows(f);
  const auto b = prepare_term(linear_term("x"), f, rows);
  const MatrixXd X = term_design(b, f, rows);
  ASSERT_EQ(X.cols(), 1);
  for (int i = 0; i < 4; ++i) EXPECT_EQ(X(i, 0), f.column("x")[i]);
  EXPECT_TRUE(term_penalties(b).empty());
}

TEST(Basis, PartitionOfUnity) {
  const auto x = grid(-2, 5, 101);
  const MatrixXd B = bspline_basis(x, -2, 5, 10);
  for (Eigen::Index i = 0; i < B.rows(); ++i) EXPECT_NEAR(B.row(i).sum(), 1.0, 1e-12);
  const MatrixXd C = cyclic_bspline_basis(x, -2, 7, 9);
  for (Eigen::Index i = 0; i < C.rows(); ++i) EXPECT_NEAR(C.row(i).sum(), 1.0, 1e-12);
}

TEST(Basis, CyclicClosure) {
  // Day of year: value and slope agree across the year boundary.
  const std::vector<double> ends{1.0, 1.0 + 366.0 - 1e-9};
  const MatrixXd B = cyclic_bspline_basis(ends, 1.0, 366.0, 10);
  const MatrixXd D = cyclic_bspline_basis(ends, 1.0, 366.0, 10, true);
  for (int j = 0; j < 10; ++j) {
    EXPECT_NEAR(B(0, j), B(1, j), 1e-8);
    EXPECT_NEAR(D(0, j), D(1, j), 1e-8);
  }
}

TEST(Basis, CubicReproducedWhenUnpenalised) {
  const auto x = grid(0, 3, 200);
  VectorXd y(x.size());
  for (std::size_t i = 0; i < x.size(); ++i) y(i) = 1 - 2 * x[i] + 0.5 * x[i] * x[i] - 0.3 * x[i] * x[i] * x[i];
  const MatrixXd B = bspline_basis(x, 0, 3, 10);
  const auto s = penalised_fit(B, y, {difference_penalty(10)}, {0.0});
  EXPECT_LT((B * s.beta - y).cwiseAbs().maxCoeff(), 1e-6);
}

TEST(Basis, VaryingCoefficientMultiplier) {
  const auto x = grid(0, 1, 30);
  const MatrixXd B = bspline_basis(x, 0, 1, 8);
  std::vector<double> ones(30, 1.0), zeros(30, 0.0);
  EXPECT_EQ(varying_coefficient(B, ones), B);
  EXPECT_EQ(varying_coefficient(B, zeros), MatrixXd::Zero(30, 8));
  // Same through the term interface.
  const auto f = make_frame({{"x", x}, {"m", ones}});
  const auto rows = all_rows(f);
  const auto b = prepare_term(vc_term("x", "m", 8), f, rows);
  EXPECT_TRUE(term_design(b, f, rows).isApprox(B));
}

TEST(Basis, FactorByMatchesPerLevelFits) {
  // Three day types with different curves; a pvc block plus an intercept
  // fitted jointly equals three separate fits.
  Rng rng(3);
  const int n = 600;
  std::vector<double> h(n), dt(n), y(n);
  for (int i = 0; i < n; ++i) {
    h[i] = 1 + (i % 48);
    dt[i] = (i / 48) % 3;  // every level sees the full range of h
    y[i] = std::sin(h[i] / 8.0 + dt[i]) * (1 + dt[i]) + 0.1 * standard_normal(rng);
  }
  const auto f = make_frame({{"h", h}, {"dt", dt}, {"y", y}});
  const auto rows = all_rows(f);
  const auto b = prepare_term(pvc_term("h", "dt", 3, 10), f, rows);
  MatrixXd X(n, b.ncols + 1);
  X.col(0).setOnes();
  X.rightCols(b.ncols) = term_design(b, f, rows);
  auto pens = term_penalties(b);
  ASSERT_EQ(pens.size(), 3u);
  std::vector<MatrixXd> full;
  for (const auto& P : pens) {
    MatrixXd Q = MatrixXd::Zero(X.cols(), X.cols());
    Q.bottomRightCorner(P.rows(), P.cols()) = P;
    full.push_back(Q);
  }
  const double lam = 2.0;
  const auto joint = penalised_fit(X, to_vec(y), full, {lam, lam, lam});
  const VectorXd fitted = X * joint.beta;
  for (int l = 0; l < 3; ++l) {
    std::vector<std::size_t> sub;
    for (int i = 0; i < n; ++i)
      if (dt[i] == l) sub.push_back(static_cast<std::size_t>(i));
    const auto bl = prepare_term(pb_term("h", 10), f, sub);
    MatrixXd Xl(sub.size(), bl.ncols + 1);
    Xl.col(0).setOnes();
    Xl.rightCols(bl.ncols) = term_design(bl, f, sub);
    MatrixXd Pl = MatrixXd::Zero(Xl.cols(), Xl.cols());
    Pl.bottomRightCorner(bl.ncols, bl.ncols) = term_penalties(bl)[0];
    VectorXd yl(sub.size());
    for (std::size_t k = 0; k < sub.size(); ++k) yl(k) = y[sub[k]];
    const auto sep = penalised_fit(Xl, yl, {Pl}, {lam});
    const VectorXd fl = Xl * sep.beta;
    for (std::size_t k = 0; k < sub.size(); ++k) EXPECT_NEAR(fitted(sub[k]), fl(k), 1e-6);
  }
}

TEST(Basis, TensorDimensionAndPenalties) {
  const auto x = grid(0, 1, 20);
  const MatrixXd B1 = bspline_basis(x, 0, 1, 4), B2 = bspline_basis(x, 0, 1, 4);
  EXPECT_EQ(tensor_product(B1, B2).cols(), 16);
  const auto [P1, P2] = tensor_penalties(difference_penalty(4), difference_penalty(4));
  EXPECT_EQ(P1.rows(), 16);
  EXPECT_EQ(P2.rows(), 16);
}

TEST(Basis, TensorRecoversSeparableSurface) {
  std::vector<double> x1, x2, y;
  for (int i = 0; i < 40; ++i)
    for (int j = 0; j < 40; ++j) {
      x1.push_back(i / 39.0);
      x2.push_back(j / 39.0);
      y.push_back(std::sin(3 * x1.back()) * std::exp(-x2.back()));
    }
  const auto f = make_frame({{"a", x1}, {"b", x2}, {"y", y}});
  const auto rows = all_rows(f);
  const auto b = prepare_term(tensor_term("a", "b", 8, 8), f, rows);
  MatrixXd X(rows.size(), b.ncols + 1);
  X.col(0).setOnes();
  X.rightCols(b.ncols) = term_design(b, f, rows);
  std::vector<MatrixXd> pens;
  for (const auto& P : term_penalties(b)) {
    MatrixXd Q = MatrixXd::Zero(X.cols(), X.cols());
    Q.bottomRightCorner(P.rows(), P.cols()) = P;
    pens.push_back(Q);
  }
  ASSERT_EQ(pens.size(), 2u);
  const VectorXd Y = to_vec(y);
  const auto s = penalised_fit(X, Y, pens, {1e-8, 1e-8});
  EXPECT_LT(rms(X * s.beta - Y), 0.05 * rms(Y));
}

TEST(Penalty, SymmetricPsdOnRandomSizes) {
  Rng rng(5);
  for (int k = 0; k < 20; ++k) {
    const int K = 4 + static_cast<int>(uniform_index(rng, 12));
    const int order = 1 + static_cast<int>(uniform_index(rng, 2));
    for (const MatrixXd& S : {difference_penalty(K, order), cyclic_difference_penalty(K, order)}) {
      EXPECT_TRUE(S.isApprox(S.transpose()));
      Eigen::SelfAdjointEigenSolver<MatrixXd> es(S);
      EXPECT_GT(es.eigenvalues().minCoeff(), -1e-10);
    }
    const int K2 = 4 + static_cast<int>(uniform_index(rng, 5));
    const auto [P1, P2] = tensor_penalties(difference_penalty(K), cyclic_difference_penalty(K2));
    for (const MatrixXd& P : {P1, P2}) {
      Eigen::SelfAdjointEigenSolver<MatrixXd> es(P);
      EXPECT_GT(es.eigenvalues().minCoeff(), -1e-10);
    }
  }
}

TEST(Penalty, LargeLambdaGivesStraightLine) {
  Rng rng(6);
  const auto x = grid(0, 2, 150);
  VectorXd y(x.size());
  for (std::size_t i = 0; i < x.size(); ++i) y(i) = std::sin(3 * x[i]) + 0.1 * standard_normal(rng);
  const MatrixXd B = bspline_basis(x, 0, 2, 12);
  const auto s = penalised_fit(B, y, {difference_penalty(12)}, {1e12});
  // Least-squares line oracle.
  MatrixXd L(x.size(), 2);
  for (std::size_t i = 0; i < x.size(); ++i) L(i, 0) = 1, L(i, 1) = x[i];
  const VectorXd line = L * L.colPivHouseholderQr().solve(y);
  EXPECT_LT((B * s.beta - line).cwiseAbs().maxCoeff(), 1e-3);
}

TEST(Penalty, EdfNonincreasingInLambda) {
  const auto x = grid(0, 1, 100);
  VectorXd y(x.size());
  for (std::size_t i = 0; i < x.size(); ++i) y(i) = std::cos(5 * x[i]);
  const MatrixXd B = bspline_basis(x, 0, 1, 15);
  double prev = kInf;
  for (double lam = 1e-6; lam < 1e9; lam *= 10) {
    const double edf = penalised_fit(B, y, {difference_penalty(15)}, {lam}).edf;
    EXPECT_LE(edf, prev + 1e-9);
    prev = edf;
  }
  EXPECT_NEAR(prev, 2.0, 0.05);
}

TEST(Penalty, GcvChoiceBeatsExtremes) {
  Rng rng(7);
  const auto x = grid(0, 1, 300);
  VectorXd y(x.size());
  for (std::size_t i = 0; i < x.size(); ++i) y(i) = std::sin(6 * x[i]) + 0.3 * standard_normal(rng);
  const MatrixXd B = bspline_basis(x, 0, 1, 20);
  const auto chosen = penalised_fit(B, y, {difference_penalty(20)});
  for (double lam : {1e-8, 1e8}) EXPECT_LE(chosen.gcv, penalised_fit(B, y, {difference_penalty(20)}, {lam}).gcv);
}

TEST(Penalty, TargetEdfMatched) {
  const auto x = grid(0, 1, 200);
  std::vector<double> y(x.size());
  for (std::size_t i = 0; i < x.size(); ++i) y[i] = std::sin(9 * x[i]);
  const auto f = make_frame({{"x", x}, {"y", y}});
  const auto rows = all_rows(f);
  auto spec = pb_term("x", 12);
  spec.target_edf = 5.0;
  const auto b = prepare_term(spec, f, rows);
  SmoothingProblem p;
  const MatrixXd X = term_design(b, f, rows);
  const VectorXd Y = to_vec(y);
  p.A = X.transpose() * X;
  p.b = X.transpose() * Y;
  p.c = Y.squaredNorm();
  p.n = static_cast<double>(X.rows());
  PenaltyComponent c;
  c.S = term_penalties(b)[0];
  c.target_edf = 5.0;
  c.group_cols = X.cols();
  p.penalties.push_back(c);
  const auto s = select_smoothing(p);
  EXPECT_NEAR(s.influence_diag.sum(), 5.0, 1e-3);
}

TEST(Terms, CyclicPredictionsPeriodic) {
  Rng rng(8);
  std::vector<double> d, y;
  for (int i = 1; i <= 365; ++i) d.push_back(i), y.push_back(std::cos(2 * M_PI * i / 365.0));
  const auto f = make_frame({{"doy", d}, {"y", y}});
  const auto rows = all_rows(f);
  const auto b = prepare_term(pbc_term("doy", 1.0, 365.0, 10), f, rows);
  std::vector<double> q, q2;
  for (int k = 0; k < 50; ++k) {
    const double v = 1 + 364 * uniform_open(rng);
    q.push_back(v);
    q2.push_back(v + 365.0);
  }
  const auto fq = make_frame({{"doy", q}}), fq2 = make_frame({{"doy", q2}});
  const MatrixXd A = term_design(b, fq, all_rows(fq)), C = term_design(b, fq2, all_rows(fq2));
  EXPECT_LT((A - C).cwiseAbs().maxCoeff(), 1e-8);
}

TEST(Terms, SumToZeroOnTrainingRows) {
  const auto x = grid(0, 10, 77);
  const auto f = make_frame({{"x", x}});
  const auto rows = all_rows(f);
  const auto b = prepare_term(pb_term("x", 10), f, rows);
  const MatrixXd X = term_design(b, f, rows);
  EXPECT_EQ(X.cols(), 9);
  EXPECT_LT(X.colwise().sum().cwiseAbs().maxCoeff(), 1e-10);
}

TEST(Terms, JsonRoundTripKeepsDesign) {
  std::vector<double> a, c, fac;
  Rng rng(9);
  for (int i = 0; i < 120; ++i) a.push_back(uniform_open(rng) * 48), c.push_back(1 + 365 * uniform_open(rng)), fac.push_back(i % 3);
  const auto f = make_frame({{"a", a}, {"c", c}, {"fac", fac}});
  const auto rows = all_rows(f);
  auto tensor = tensor_term("a", "c", 6, 5);
  tensor.cyclic2 = true;
  tensor.cyclic_lo2 = 1;
  tensor.period2 = 366;
  for (const auto& spec : {pb_term("a"), pbc_term("c", 1, 366), pvc_term("a", "fac", 3, 8), tensor, effects_term("fac", 3),
                           dummies_term("fac", 3), factor_by_linear_term("a", "fac", 3)}) {
    const auto b = prepare_term(spec, f, rows);
    const auto back = term_basis_from_json(to_json(b));
    EXPECT_TRUE(term_design(back, f, rows).isApprox(term_design(b, f, rows))) << spec.label();
  }
}

TEST(Terms, DimensionTooSmallRejected) {
  const auto f = make_frame({{"x", grid(0, 1, 10)}});
  auto spec = pb_term("x", 3);
  EXPECT_THROW(prepare_term(spec, f, all_rows(f)), std::invalid_argument);
}
