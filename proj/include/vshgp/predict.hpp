#pragma once

// Prediction from an archived model on raw (de-normalized) inputs.

#include <Eigen/Dense>

#include <string>
#include <vector>

#include "vshgp/archive.hpp"
#include "vshgp/core.hpp"
#include "vshgp/dvshgp.hpp"
#include "vshgp/predictive.hpp"
#include "vshgp/svshgp.hpp"
#include "vshgp/worker_pool.hpp"

namespace vshgp {

/// Latent moments on the normalized scale, predictive moments on the raw
/// target scale. ok is false where distributed aggregation failed.
struct ModelPrediction {
  LatentPrediction latent;
  VectorXd mean;
  VectorXd var;
  std::vector<bool> ok;
  std::vector<std::string> errors;

  Index size() const { return mean.size(); }
};

inline ModelPrediction predict_archive(const ModelArchive &a, const MatrixXd &X_raw,
                                       WorkerPool *pool = nullptr) {
  require_dims("predict: input columns", a.input_dim(), X_raw.cols());
  const MatrixXd Xs = a.norm.inputs(X_raw);
  const Index ns = Xs.rows();
  ModelPrediction out;
  out.ok.assign(static_cast<std::size_t>(ns), true);
  out.errors.assign(static_cast<std::size_t>(ns), "");
  switch (a.kind) {
  case ModelKind::Vshgp:
    out.latent = predict_latent(a.vshgp, Xs);
    break;
  case ModelKind::Svshgp:
    out.latent = predict_latent(a.svshgp, Xs);
    break;
  case ModelKind::Dvshgp: {
    const auto agg = predict_dvshgp(a.dvshgp, Xs, pool);
    out.latent = {agg.mu_f, agg.var_f, agg.mu_g, agg.var_g};
    out.ok = agg.ok;
    out.errors = agg.errors;
    break;
  }
  }
  VectorXd mean(ns), var(ns);
  for (Index i = 0; i < ns; ++i) {
    if (!out.ok[static_cast<std::size_t>(i)]) {
      mean(i) = var(i) = std::numeric_limits<double>::quiet_NaN();
      continue;
    }
    try {
      const auto m = predict_y(out.latent.at(i));
      mean(i) = m.mean;
      var(i) = m.var;
    } catch (const Error &e) {
      out.ok[static_cast<std::size_t>(i)] = false;
      out.errors[static_cast<std::size_t>(i)] = e.what();
      mean(i) = var(i) = std::numeric_limits<double>::quiet_NaN();
    }
  }
  out.mean = a.norm.mean_back(mean);
  out.var = a.norm.var_back(var);
  return out;
}

/// Quadrature log predictive densities of raw-scale targets. The density of
/// the raw target includes the Jacobian of the target normalization.
inline VectorXd log_densities(const ModelArchive &a, const ModelPrediction &p,
                              const VectorXd &y_raw, int nodes = kDefaultQuadratureNodes,
                              bool gaussian = false) {
  require_dims("log_densities: targets", p.size(), y_raw.size());
  const VectorXd yn = a.norm.targets(y_raw);
  const double log_jac = std::log(a.norm.y_std);
  VectorXd out(yn.size());
  for (Index i = 0; i < yn.size(); ++i) {
    if (!p.ok[static_cast<std::size_t>(i)]) {
      out(i) = std::numeric_limits<double>::quiet_NaN();
      continue;
    }
    const auto lp = p.latent.at(i);
    out(i) = (gaussian ? log_predictive_density_gaussian(lp, yn(i))
                       : log_predictive_density(lp, yn(i), nodes)) -
             log_jac;
  }
  return out;
}

} // namespace vshgp
