#pragma once

#include <Eigen/Dense>

#include <cmath>

#include "vshgp/error.hpp"
#include "vshgp/linalg.hpp"
#include "vshgp/predictive.hpp"

namespace vshgp {

/// Mean squared error over the (population) variance of y_true.
inline double smse(const VectorXd &y_true, const VectorXd &mu_pred) {
  require_dims("smse: prediction length", y_true.size(), mu_pred.size());
  if (y_true.size() < 2) {
    throw ConfigError("smse: need at least two points");
  }
  const double var = (y_true.array() - y_true.mean()).square().mean();
  if (!(var > 0.0)) {
    throw ConfigError("smse: targets have zero variance");
  }
  return (y_true - mu_pred).squaredNorm() / static_cast<double>(y_true.size()) / var;
}

/// Mean over test points of the negative log density in excess of the
/// trivial Gaussian N(train_mean, train_var).
inline double msll(const VectorXd &y_true, const VectorXd &log_pred_density,
                   double train_mean, double train_var) {
  require_dims("msll: density length", y_true.size(), log_pred_density.size());
  if (!(train_var > 0.0)) {
    throw ConfigError("msll: train_var must be > 0");
  }
  if (y_true.size() == 0) {
    throw ConfigError("msll: no test points");
  }
  if (!log_pred_density.allFinite()) {
    throw NumericalError("msll: non-finite log predictive density");
  }
  double acc = 0.0;
  for (Index i = 0; i < y_true.size(); ++i) {
    acc += -log_pred_density(i) + gaussian_log_density(y_true(i), train_mean, train_var);
  }
  return acc / static_cast<double>(y_true.size());
}

inline double pearson(const VectorXd &a, const VectorXd &b) {
  require_dims("pearson: lengths", a.size(), b.size());
  const VectorXd da = a.array() - a.mean(), db = b.array() - b.mean();
  const double den = std::sqrt(da.squaredNorm() * db.squaredNorm());
  if (!(den > 0.0)) {
    throw ConfigError("pearson: a constant input has no correlation");
  }
  return da.dot(db) / den;
}

} // namespace vshgp
