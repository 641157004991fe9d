#pragma once

#include <Eigen/Dense>

#include <cmath>
#include <string>

#include "vshgp/error.hpp"
#include "vshgp/kernel.hpp"

namespace vshgp {

/// Parameters shared between f and g priors: the two kernels and the prior
/// mean of the log-noise process g.
struct HyperParams {
  KernelParams kf;
  KernelParams kg;
  double mu0 = 0.0;
};

/// Inducing inputs for f (Xm, m x d) and for g (Xu, u x d).
struct InducingSet {
  MatrixXd Xm;
  MatrixXd Xu;
};

/// Non-owning view of everything the collapsed bound depends on. Lets the
/// distributed model evaluate experts without copying shards.
struct ModelView {
  const MatrixXd &X;
  const VectorXd &y;
  const HyperParams &hyper;
  const InducingSet &inducing;
  const VectorXd &lambda_log; // log diag(Lambda_nn)

  Index n() const { return X.rows(); }
  Index d() const { return X.cols(); }
  Index m() const { return inducing.Xm.rows(); }
  Index u() const { return inducing.Xu.rows(); }
};

inline void validate(const ModelView &v) {
  require_dims("model: targets vs inputs", v.X.rows(), v.y.size());
  require_dims("model: lambda vs inputs", v.X.rows(), v.lambda_log.size());
  require_dims("model: kf dimension", v.d(), v.hyper.kf.dim());
  require_dims("model: kg dimension", v.d(), v.hyper.kg.dim());
  require_dims("model: Xm columns", v.d(), v.inducing.Xm.cols());
  require_dims("model: Xu columns", v.d(), v.inducing.Xu.cols());
  if (v.n() == 0) {
    throw ConfigError("model: no training points");
  }
  if (v.m() < 1 || v.u() < 1) {
    throw ConfigError("model: need at least one inducing point for f and for g");
  }
  if (v.m() > v.n() || v.u() > v.n()) {
    throw ConfigError("model: inducing sizes must not exceed the training size (m=" +
                      std::to_string(v.m()) + ", u=" + std::to_string(v.u()) +
                      ", n=" + std::to_string(v.n()) + ")");
  }
  if (!v.lambda_log.allFinite()) {
    throw NumericalError("model: non-finite variational parameters");
  }
}

/// Deterministic variational sparse heteroscedastic GP.
struct VshgpModel {
  MatrixXd train_inputs;
  VectorXd train_targets;
  HyperParams hyper;
  InducingSet inducing;
  VectorXd lambda_log;

  ModelView view() const {
    return {train_inputs, train_targets, hyper, inducing, lambda_log};
  }
};

/// Lambda_nn = 0.5 I places the prior mean mu0 on mu_u.
inline VectorXd default_lambda_log(Index n) {
  return VectorXd::Constant(n, std::log(0.5));
}

} // namespace vshgp
