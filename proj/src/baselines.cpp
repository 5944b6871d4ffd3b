#include "moca/baselines.hpp"

#include <cmath>

#include "moca/simgen.hpp"

namespace moca {
namespace {

Matrix rows_of(const Matrix& x, const std::vector<Index>& idx) {
  Matrix out(static_cast<Index>(idx.size()), x.cols());
  for (std::size_t i = 0; i < idx.size(); ++i) out.row(static_cast<Index>(i)) = x.row(idx[i]);
  return out;
}

Vector rows_of(const Vector& v, const std::vector<Index>& idx) {
  Vector out(static_cast<Index>(idx.size()));
  for (std::size_t i = 0; i < idx.size(); ++i) out(static_cast<Index>(i)) = v(idx[i]);
  return out;
}

Scalar log1pexp(Scalar z) { return z > 0 ? z + std::log1p(std::exp(-z)) : std::log1p(std::exp(z)); }

}  // namespace

std::vector<Index> arm_rows(const Vector& t, int arm) {
  std::vector<Index> out;
  for (Index i = 0; i < t.size(); ++i) {
    if ((t(i) > 0.5) == (arm == 1)) out.push_back(i);
  }
  return out;
}

Vector PropensityModel::predict_unclipped(const Matrix& x) const {
  if (x.cols() != coef.size()) throw DimensionError("propensity: feature count mismatch");
  Vector eta = (x * coef).array() + intercept;
  return eta.unaryExpr([](Scalar v) { return expit(v); });
}

Vector PropensityModel::predict(const Matrix& x) const {
  return predict_unclipped(x).cwiseMax(clip).cwiseMin(1.0 - clip);
}

PropensityModel fit_logistic(const Matrix& x, const Vector& t, Scalar lambda, Scalar clip) {
  if (x.rows() != t.size()) throw DimensionError("fit_logistic: row count mismatch");
  if (!is_binary(t)) throw DataError("fit_logistic: treatment must be binary (0/1)");
  if (lambda < 0) throw ConfigError("fit_logistic: lambda must be non-negative");
  if (!(clip >= 0 && clip < 0.5)) throw ConfigError("fit_logistic: clip must lie in [0, 0.5)");
  const Index n = x.rows();
  const Index p = x.cols();

  // Design with a leading intercept column; beta(0) is the intercept.
  Matrix z(n, p + 1);
  z.col(0).setOnes();
  z.rightCols(p) = x;
  Vector beta = Vector::Zero(p + 1);
  const Scalar tbar = t.mean();
  if (tbar > 0 && tbar < 1) beta(0) = std::log(tbar / (1 - tbar));
  Vector penalty = Vector::Constant(p + 1, lambda);
  penalty(0) = 0;

  auto objective = [&](const Vector& b) {
    const Vector eta = z * b;
    Scalar nll = 0;
    for (Index i = 0; i < n; ++i) nll += log1pexp(eta(i)) - t(i) * eta(i);
    return nll + 0.5 * (penalty.array() * b.array().square()).sum();
  };

  PropensityModel model;
  model.clip = clip;
  Scalar current = objective(beta);
  int iter = 0;
  for (; iter < 500; ++iter) {
    const Vector eta = z * beta;
    const Vector mu = eta.unaryExpr([](Scalar v) { return expit(v); });
    const Vector grad = z.transpose() * (mu - t) + penalty.cwiseProduct(beta);
    if (grad.norm() < 1e-6) break;
    const Vector w = mu.cwiseProduct((1.0 - mu.array()).matrix()).cwiseMax(1e-12);
    Matrix hess = z.transpose() * w.asDiagonal() * z;
    hess.diagonal() += penalty;
    Eigen::LDLT<Matrix> ldlt(hess);
    Vector step;
    if (ldlt.info() == Eigen::Success && ldlt.isPositive()) step = ldlt.solve(grad);
    if (step.size() == 0 || !step.allFinite()) {
      hess.diagonal().array() += 1e-8 * (1.0 + hess.diagonal().cwiseAbs().maxCoeff());
      step = hess.ldlt().solve(grad);
    }
    // Backtracking keeps the objective monotone when the fit separates.
    Scalar scale = 1.0;
    Vector next = beta - step;
    Scalar value = objective(next);
    while (!(value <= current) && scale > 1e-10) {
      scale *= 0.5;
      next = beta - scale * step;
      value = objective(next);
    }
    if (!(value <= current)) break;
    beta = next;
    current = value;
  }
  model.iterations = iter;
  model.intercept = beta(0);
  model.coef = beta.tail(p);
  if (!beta.allFinite()) throw NumericError("fit_logistic: non-finite coefficients");
  return model;
}

Vector OutcomeRegression::predict(const Matrix& x) const {
  if (x.cols() != coef.size()) throw DimensionError("outcome regression: feature count mismatch");
  return (x * coef).array() + intercept;
}

OutcomeRegression fit_ols(const Matrix& x, const Vector& y, Scalar lambda) {
  if (x.rows() != y.size()) throw DimensionError("fit_ols: row count mismatch");
  if (x.rows() == 0) throw DataError("fit_ols: no rows");
  if (lambda < 0) throw ConfigError("fit_ols: lambda must be non-negative");
  const Eigen::RowVectorXd xm = x.colwise().mean();
  const Scalar ym = y.mean();
  const Matrix xc = x.rowwise() - xm;
  const Vector yc = y.array() - ym;
  Matrix gram = xc.transpose() * xc;
  gram.diagonal().array() += lambda;

  OutcomeRegression r;
  r.lambda = lambda;
  if (x.cols() == 0) {
    r.coef = Vector(0);
  } else if (lambda > 0) {
    r.coef = gram.llt().solve(xc.transpose() * yc);
  } else {
    Eigen::ColPivHouseholderQR<Matrix> qr(xc);
    if (qr.rank() < x.cols()) {
      throw NumericError("fit_ols: singular design with lambda = 0; use a positive ridge penalty");
    }
    r.coef = qr.solve(yc);
  }
  if (!r.coef.allFinite()) throw NumericError("fit_ols: non-finite coefficients");
  r.intercept = ym - xm.dot(r.coef);
  return r;
}

Vector aipw_scores(const Vector& t, const Vector& y, const Vector& e, const Vector& mu0, const Vector& mu1) {
  detail::check_propensity(e);
  return (mu1 - mu0).array() + t.array() * (y - mu1).array() / e.array() -
         (1 - t.array()) * (y - mu0).array() / (1 - e.array());
}

Vector XLearner::cate(const Matrix& x) const {
  const Vector g = propensity.predict(x);
  const Vector t0 = tau0.predict(x);
  const Vector t1 = tau1.predict(x);
  return g.cwiseProduct(t0) + (1.0 - g.array()).matrix().cwiseProduct(t1);
}

XLearner fit_x_learner(const Dataset& data, Scalar lambda, Scalar clip) {
  data.validate();
  const auto treated = arm_rows(data.t, 1);
  const auto control = arm_rows(data.t, 0);
  if (treated.empty() || control.empty()) throw DataError("x-learner: both arms must be non-empty");
  const Matrix x1 = rows_of(data.x, treated);
  const Matrix x0 = rows_of(data.x, control);
  const Vector y1 = rows_of(data.y, treated);
  const Vector y0 = rows_of(data.y, control);

  XLearner m;
  m.mu0 = fit_ols(x0, y0, lambda);
  m.mu1 = fit_ols(x1, y1, lambda);
  const Vector d1 = y1 - m.mu0.predict(x1);
  const Vector d0 = m.mu1.predict(x0) - y0;
  m.tau1 = fit_ols(x1, d1, lambda);
  m.tau0 = fit_ols(x0, d0, lambda);
  m.propensity = fit_logistic(data.x, data.t, lambda, clip);
  return m;
}

}  // namespace moca
