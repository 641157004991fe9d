#pragma once

// Distributed VSHGP: M local experts on disjoint shards, sharing the kernel
// hyperparameters and mu0, each with its own Lambda and inducing inputs.
// Predictions are combined with robust-BCM weights.

#include <Eigen/Dense>

#include <chrono>
#include <cmath>
#include <limits>
#include <sstream>
#include <string>
#include <vector>

#include "vshgp/core.hpp"
#include "vshgp/error.hpp"
#include "vshgp/kmeans.hpp"
#include "vshgp/model.hpp"
#include "vshgp/optim.hpp"
#include "vshgp/predictive.hpp"
#include "vshgp/training.hpp"
#include "vshgp/worker_pool.hpp"

namespace vshgp {

struct ExpertModel {
  std::vector<Index> indices; // rows of the full training set
  MatrixXd X;
  VectorXd y;
  InducingSet inducing;
  VectorXd lambda_log;
};

struct DvshgpModel {
  HyperParams shared;
  std::vector<ExpertModel> experts;

  Index size() const { return static_cast<Index>(experts.size()); }

  ModelView view(std::size_t i) const {
    const auto &e = experts[i];
    return {e.X, e.y, shared, e.inducing, e.lambda_log};
  }
};

namespace detail {

template <class Fn>
auto for_each_expert(const DvshgpModel &model, WorkerPool *pool, Fn fn) {
  using R = decltype(fn(std::size_t{0}));
  std::vector<R> out(model.experts.size());
  auto body = [&](std::size_t i) {
    try {
      out[i] = fn(i);
    } catch (const Error &e) {
      throw NumericalError("expert " + std::to_string(i) + ": " + e.what());
    }
  };
  if (pool) {
    pool->parallel_for(model.experts.size(), body);
  } else {
    for (std::size_t i = 0; i < model.experts.size(); ++i) body(i);
  }
  return out;
}

} // namespace detail

struct DecomposedElbo {
  double total = 0.0;
  std::vector<ElboBreakdown> experts;
};

/// Sum of the experts' collapsed bounds, reduced in expert order.
inline DecomposedElbo decomposed_elbo(const DvshgpModel &model, WorkerPool *pool = nullptr) {
  DecomposedElbo out;
  out.experts = detail::for_each_expert(model, pool,
                                        [&](std::size_t i) { return elbo(model.view(i)); });
  for (const auto &e : out.experts) out.total += e.total;
  return out;
}

struct DvshgpGradient {
  VectorXd kf;
  VectorXd kg;
  double mu0 = 0.0;
  std::vector<ElboGradient> local; // lambda_log, Xm, Xu per expert
};

namespace detail {

inline DvshgpGradient reduce_gradients(std::vector<ElboGradient> local,
                                       const HyperParams &shared) {
  DvshgpGradient g;
  g.kf = VectorXd::Zero(shared.kf.num_params());
  g.kg = VectorXd::Zero(shared.kg.num_params());
  for (const auto &e : local) {
    g.kf += e.kf;
    g.kg += e.kg;
    g.mu0 += e.mu0;
  }
  g.local = std::move(local);
  return g;
}

} // namespace detail

inline DvshgpGradient decomposed_grads(const DvshgpModel &model, WorkerPool *pool = nullptr) {
  auto local = detail::for_each_expert(model, pool,
                                       [&](std::size_t i) { return elbo_grads(model.view(i)); });
  return detail::reduce_gradients(std::move(local), model.shared);
}

// Flat layout: [lambda_1 .. lambda_M, kf, kg, mu0, Xm_1, Xu_1 .. Xm_M, Xu_M],
// each block present only when selected. With one expert this is exactly the
// single-model layout, so both produce identical optimizer paths.

namespace detail {

template <class Push>
void walk_dvshgp(const ParamBlocks &b, std::size_t experts, Push push) {
  if (b.lambda) {
    for (std::size_t i = 0; i < experts; ++i) push("lambda", i);
  }
  if (b.kf) push("kf", 0);
  if (b.kg) push("kg", 0);
  if (b.mu0) push("mu0", 0);
  for (std::size_t i = 0; i < experts; ++i) {
    if (b.Xm) push("Xm", i);
    if (b.Xu) push("Xu", i);
  }
}

inline VectorXd concat(const std::vector<VectorXd> &parts) {
  Index total = 0;
  for (const auto &p : parts) total += p.size();
  VectorXd x(total);
  Index pos = 0;
  for (const auto &p : parts) {
    x.segment(pos, p.size()) = p;
    pos += p.size();
  }
  return x;
}

inline VectorXd flat_of(const MatrixXd &A) { return A.reshaped(); }

} // namespace detail

inline VectorXd pack_dvshgp(const DvshgpModel &model, const ParamBlocks &b) {
  std::vector<VectorXd> parts;
  detail::walk_dvshgp(b, model.experts.size(), [&](const std::string &block, std::size_t i) {
    const auto &e = model.experts[i];
    if (block == "lambda") parts.push_back(e.lambda_log);
    else if (block == "kf") parts.push_back(model.shared.kf.flat());
    else if (block == "kg") parts.push_back(model.shared.kg.flat());
    else if (block == "mu0") parts.push_back(VectorXd::Constant(1, model.shared.mu0));
    else if (block == "Xm") parts.push_back(detail::flat_of(e.inducing.Xm));
    else parts.push_back(detail::flat_of(e.inducing.Xu));
  });
  return detail::concat(parts);
}

inline void unpack_dvshgp(const VectorXd &x, const ParamBlocks &b, DvshgpModel &model) {
  Index pos = 0;
  auto take = [&](Index count) {
    if (pos + count > x.size()) {
      throw DimensionError("unpack_dvshgp: flat vector too short", pos + count, x.size());
    }
    const VectorXd seg = x.segment(pos, count);
    pos += count;
    return seg;
  };
  detail::walk_dvshgp(b, model.experts.size(), [&](const std::string &block, std::size_t i) {
    auto &e = model.experts[i];
    if (block == "lambda") {
      e.lambda_log = take(e.lambda_log.size());
    } else if (block == "kf") {
      model.shared.kf.set_flat(take(model.shared.kf.num_params()));
    } else if (block == "kg") {
      model.shared.kg.set_flat(take(model.shared.kg.num_params()));
    } else if (block == "mu0") {
      model.shared.mu0 = take(1)(0);
    } else if (block == "Xm") {
      auto &Z = e.inducing.Xm;
      Z = take(Z.size()).reshaped(Z.rows(), Z.cols());
    } else {
      auto &Z = e.inducing.Xu;
      Z = take(Z.size()).reshaped(Z.rows(), Z.cols());
    }
  });
  require_dims("unpack_dvshgp: flat vector length", pos, x.size());
}

inline VectorXd pack_dvshgp_gradient(const DvshgpGradient &g, const ParamBlocks &b) {
  std::vector<VectorXd> parts;
  detail::walk_dvshgp(b, g.local.size(), [&](const std::string &block, std::size_t i) {
    const auto &e = g.local[i];
    if (block == "lambda") parts.push_back(e.lambda_log);
    else if (block == "kf") parts.push_back(g.kf);
    else if (block == "kg") parts.push_back(g.kg);
    else if (block == "mu0") parts.push_back(VectorXd::Constant(1, g.mu0));
    else if (block == "Xm") parts.push_back(detail::flat_of(e.Xm));
    else parts.push_back(detail::flat_of(e.Xu));
  });
  return detail::concat(parts);
}

/// Alternating schedule over all experts: CGD on every Lambda_i, then CGD
/// on every block. Expert evaluations run on the pool; the shared-gradient
/// reduction is in expert order, so results do not depend on worker count.
inline TrainResult train_dvshgp(DvshgpModel &model, const TrainConfig &cfg,
                                WorkerPool *pool = nullptr) {
  using clock = std::chrono::steady_clock;
  const auto start = clock::now();
  TrainResult out;
  auto run_stage = [&](const ParamBlocks &blocks, int budget, const std::string &name) {
    const auto t0 = clock::now();
    ObjectiveFn fn = [&](const VectorXd &x, VectorXd &grad) {
      DvshgpModel trial = model;
      unpack_dvshgp(x, blocks, trial);
      struct Eval {
        double value = 0.0;
        ElboGradient grad;
      };
      const auto evals = detail::for_each_expert(trial, pool, [&](std::size_t i) {
        const auto v = trial.view(i);
        const auto ws = build_workspace(v);
        return Eval{elbo(ws, v.y).total, elbo_grads(v, ws)};
      });
      double total = 0.0;
      std::vector<ElboGradient> local;
      local.reserve(evals.size());
      for (const auto &e : evals) {
        total += e.value;
        local.push_back(e.grad);
      }
      grad = pack_dvshgp_gradient(detail::reduce_gradients(std::move(local), trial.shared),
                                  blocks);
      return total;
    };
    CgdResult r;
    try {
      r = cgd_maximize(fn, pack_dvshgp(model, blocks), budget, cfg.c1, cfg.c2);
    } catch (const Error &e) {
      throw NumericalError("train_dvshgp: " + name + " failed: " + e.what());
    }
    unpack_dvshgp(r.x, blocks, model);
    detail::append_trace(out.trace, r, name,
                         std::chrono::duration<double>(t0 - start).count());
    out.final_elbo = r.value;
  };
  run_stage(ParamBlocks::variational_only(), cfg.stage1_line_searches, "stage1");
  run_stage(ParamBlocks::all(), cfg.stage2_line_searches, "stage2");
  out.seconds = std::chrono::duration<double>(clock::now() - start).count();
  return out;
}

/// One expert's latent moments at a test point.
struct ExpertMoments {
  double mean = 0.0;
  double var = 1.0;
};

struct Aggregate {
  double mean = 0.0;
  double var = 0.0;
  VectorXd weights;
};

namespace detail {

inline Aggregate rbcm(const std::vector<ExpertMoments> &experts, double prior_mean,
                      double prior_var, const char *which) {
  if (!(prior_var > 0.0)) {
    throw NumericalError(std::string("aggregate_") + which + ": prior variance must be > 0");
  }
  Aggregate a;
  a.weights.resize(static_cast<Index>(experts.size()));
  double prec = 0.0, weighted = 0.0, wsum = 0.0;
  for (std::size_t i = 0; i < experts.size(); ++i) {
    const auto &e = experts[i];
    if (!(e.var > 0.0)) {
      throw NumericalError(std::string("aggregate_") + which + ": expert " + std::to_string(i) +
                           " has non-positive variance");
    }
    const double w = 0.5 * (std::log(prior_var) - std::log(e.var));
    a.weights(static_cast<Index>(i)) = w;
    wsum += w;
    prec += w / e.var;
    weighted += w * e.mean / e.var;
  }
  prec += (1.0 - wsum) / prior_var;
  weighted += (1.0 - wsum) * prior_mean / prior_var;
  if (!(prec > 0.0)) {
    std::ostringstream msg;
    msg << "aggregate_" << which << ": non-positive aggregated precision " << prec
        << " (sum of weights " << wsum << ", weights " << a.weights.transpose() << ")";
    throw NumericalError(msg.str());
  }
  a.var = 1.0 / prec;
  a.mean = a.var * weighted;
  return a;
}

} // namespace detail

/// Robust-BCM combination of latent f predictions; the prior mean of f is 0.
inline Aggregate aggregate_f(const std::vector<ExpertMoments> &experts, double prior_var) {
  return detail::rbcm(experts, 0.0, prior_var, "f");
}

/// As aggregate_f, with the prior-mean correction for g.
inline Aggregate aggregate_g(const std::vector<ExpertMoments> &experts, double mu0,
                             double prior_var) {
  return detail::rbcm(experts, mu0, prior_var, "g");
}

struct AggregatedPrediction {
  VectorXd mu_f, var_f, mu_g, var_g;
  VectorXd mean, var;     // predictive y moments
  MatrixXd weights_f;     // n* x M
  MatrixXd weights_g;
  std::vector<bool> ok;
  std::vector<std::string> errors;

  Index size() const { return mean.size(); }
  LatentPoint latent(Index i) const { return {mu_f(i), var_f(i), mu_g(i), var_g(i)}; }
};

inline AggregatedPrediction predict_dvshgp(const DvshgpModel &model, const MatrixXd &Xstar,
                                           WorkerPool *pool = nullptr) {
  const auto preds = detail::for_each_expert(model, pool, [&](std::size_t i) {
    return predict_latent(build_workspace(model.view(i)), Xstar);
  });
  const Index ns = Xstar.rows();
  const auto M = static_cast<Index>(model.experts.size());
  const double nan = std::numeric_limits<double>::quiet_NaN();
  AggregatedPrediction out;
  for (VectorXd *v : {&out.mu_f, &out.var_f, &out.mu_g, &out.var_g, &out.mean, &out.var}) {
    *v = VectorXd::Constant(ns, nan);
  }
  out.weights_f = MatrixXd::Constant(ns, M, nan);
  out.weights_g = MatrixXd::Constant(ns, M, nan);
  out.ok.assign(static_cast<std::size_t>(ns), false);
  out.errors.assign(static_cast<std::size_t>(ns), "");
  const double kff = model.shared.kf.signal_variance();
  const double kgg = model.shared.kg.signal_variance();
  std::vector<ExpertMoments> ef(preds.size()), eg(preds.size());
  for (Index j = 0; j < ns; ++j) {
    for (std::size_t i = 0; i < preds.size(); ++i) {
      ef[i] = {preds[i].mu_f(j), preds[i].var_f(j)};
      eg[i] = {preds[i].mu_g(j), preds[i].var_g(j)};
    }
    try {
      const auto af = aggregate_f(ef, kff);
      const auto ag = aggregate_g(eg, model.shared.mu0, kgg);
      out.weights_f.row(j) = af.weights.transpose();
      out.weights_g.row(j) = ag.weights.transpose();
      const auto mom = predict_y({af.mean, af.var, ag.mean, ag.var});
      out.mu_f(j) = af.mean;
      out.var_f(j) = af.var;
      out.mu_g(j) = ag.mean;
      out.var_g(j) = ag.var;
      out.mean(j) = mom.mean;
      out.var(j) = mom.var;
      out.ok[static_cast<std::size_t>(j)] = true;
    } catch (const Error &e) {
      out.errors[static_cast<std::size_t>(j)] = e.what();
    }
  }
  return out;
}

} // namespace vshgp
