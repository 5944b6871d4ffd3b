#pragma once

// Classical reference estimators: ridge logistic propensity, ridge linear
// outcome regression, IPW, AIPW and the X-learner.

#include <Eigen/Dense>

#include "moca/dataset.hpp"
#include "moca/errors.hpp"

namespace moca {

inline constexpr Scalar kDefaultClip = 0.01;

struct PropensityModel {
  Vector coef;
  Scalar intercept = 0;
  Scalar clip = kDefaultClip;
  int iterations = 0;

  Vector predict_unclipped(const Matrix& x) const;
  /// Probabilities clipped to [clip, 1 - clip].
  Vector predict(const Matrix& x) const;
};

/// Ridge-penalized maximum likelihood by Newton-Raphson (IRLS) on
/// sum-of-log-likelihood minus lambda/2 |coef|^2; the intercept is not
/// penalized. Stops at gradient norm < 1e-6 or 500 iterations.
PropensityModel fit_logistic(const Matrix& x, const Vector& t, Scalar lambda, Scalar clip = kDefaultClip);

struct OutcomeRegression {
  Vector coef;
  Scalar intercept = 0;
  Scalar lambda = 0;

  Vector predict(const Matrix& x) const;
};

/// Closed-form ridge on centered data, intercept unpenalized. NumericError
/// when lambda = 0 and the system is singular.
OutcomeRegression fit_ols(const Matrix& x, const Vector& y, Scalar lambda);

namespace detail {
template <typename E>
void check_propensity(const Eigen::MatrixBase<E>& e) {
  if (!((e.array() > 0).all() && (e.array() < 1).all())) {
    throw DomainError("propensity outside (0, 1); clip before weighting");
  }
}
}  // namespace detail

/// n^-1 sum [T Y / e - (1 - T) Y / (1 - e)].
template <typename TD, typename YD, typename ED>
typename TD::Scalar ipw_ate(const Eigen::MatrixBase<TD>& t, const Eigen::MatrixBase<YD>& y,
                            const Eigen::MatrixBase<ED>& e) {
  if (t.size() != y.size() || t.size() != e.size()) throw DimensionError("ipw: length mismatch");
  if (t.size() == 0) throw UsageError("ipw: empty sample");
  detail::check_propensity(e);
  const auto ta = t.array();
  const auto ya = y.array();
  const auto ea = e.array();
  return (ta * ya / ea - (1 - ta) * ya / (1 - ea)).mean();
}

/// n^-1 sum [mu1 - mu0 + T (Y - mu1) / e - (1 - T)(Y - mu0) / (1 - e)].
template <typename TD, typename YD, typename ED, typename M0, typename M1>
typename TD::Scalar aipw_ate(const Eigen::MatrixBase<TD>& t, const Eigen::MatrixBase<YD>& y,
                             const Eigen::MatrixBase<ED>& e, const Eigen::MatrixBase<M0>& mu0,
                             const Eigen::MatrixBase<M1>& mu1) {
  if (t.size() != y.size() || t.size() != e.size() || t.size() != mu0.size() || t.size() != mu1.size()) {
    throw DimensionError("aipw: length mismatch");
  }
  if (t.size() == 0) throw UsageError("aipw: empty sample");
  detail::check_propensity(e);
  const auto ta = t.array();
  const auto ya = y.array();
  const auto ea = e.array();
  const auto m0 = mu0.array();
  const auto m1 = mu1.array();
  return (m1 - m0 + ta * (ya - m1) / ea - (1 - ta) * (ya - m0) / (1 - ea)).mean();
}

/// Per-unit AIPW scores; their mean is aipw_ate. Used for the optional
/// influence-function standard error.
Vector aipw_scores(const Vector& t, const Vector& y, const Vector& e, const Vector& mu0, const Vector& mu1);

struct XLearner {
  OutcomeRegression mu0, mu1;    // stage 1
  OutcomeRegression tau0, tau1;  // stage 2
  PropensityModel propensity;    // combination weight g

  /// tau(x) = g(x) tau0(x) + (1 - g(x)) tau1(x).
  Vector cate(const Matrix& x) const;
};

/// DataError when an arm is empty.
XLearner fit_x_learner(const Dataset& data, Scalar lambda, Scalar clip = kDefaultClip);

/// Indices of units with t == arm.
std::vector<Index> arm_rows(const Vector& t, int arm);

}  // namespace moca
