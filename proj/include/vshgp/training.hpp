#pragma once

#include <Eigen/Dense>

#include <chrono>
#include <string>
#include <vector>

#include "vshgp/core.hpp"
#include "vshgp/optim.hpp"

namespace vshgp {

/// Which parameter blocks an optimizer may move.
struct ParamBlocks {
  bool lambda = true;
  bool kf = true;
  bool kg = true;
  bool mu0 = true;
  bool Xm = true;
  bool Xu = true;

  static ParamBlocks all() { return {}; }
  static ParamBlocks variational_only() { return {true, false, false, false, false, false}; }
  static ParamBlocks hyper_only() { return {false, true, true, true, true, true}; }
};

/// Size of the flat vector for the selected blocks. Matrices are packed
/// column-major.
inline Index packed_size(const ModelView &v, const ParamBlocks &b) {
  Index n = 0;
  if (b.lambda) n += v.n();
  if (b.kf) n += v.hyper.kf.num_params();
  if (b.kg) n += v.hyper.kg.num_params();
  if (b.mu0) n += 1;
  if (b.Xm) n += v.inducing.Xm.size();
  if (b.Xu) n += v.inducing.Xu.size();
  return n;
}

namespace detail {

inline VectorXd pack_blocks(const VectorXd &lambda, const VectorXd &kf,
                            const VectorXd &kg, double mu0, const MatrixXd &Xm,
                            const MatrixXd &Xu, const ParamBlocks &b) {
  std::vector<double> out;
  auto push = [&](const auto &x) {
    for (Index i = 0; i < x.size(); ++i) out.push_back(x.reshaped()(i));
  };
  if (b.lambda) push(lambda);
  if (b.kf) push(kf);
  if (b.kg) push(kg);
  if (b.mu0) out.push_back(mu0);
  if (b.Xm) push(Xm);
  if (b.Xu) push(Xu);
  return Eigen::Map<VectorXd>(out.data(), static_cast<Index>(out.size()));
}

} // namespace detail

inline VectorXd pack_params(const HyperParams &h, const InducingSet &ind,
                            const VectorXd &lambda_log, const ParamBlocks &b) {
  return detail::pack_blocks(lambda_log, h.kf.flat(), h.kg.flat(), h.mu0, ind.Xm,
                             ind.Xu, b);
}

inline void unpack_params(const VectorXd &x, const ParamBlocks &b, HyperParams &h,
                          InducingSet &ind, VectorXd &lambda_log) {
  Index pos = 0;
  auto take = [&](Index count) {
    if (pos + count > x.size()) {
      throw DimensionError("unpack_params: flat vector too short", pos + count, x.size());
    }
    const VectorXd seg = x.segment(pos, count);
    pos += count;
    return seg;
  };
  if (b.lambda) lambda_log = take(lambda_log.size());
  if (b.kf) h.kf.set_flat(take(h.kf.num_params()));
  if (b.kg) h.kg.set_flat(take(h.kg.num_params()));
  if (b.mu0) h.mu0 = take(1)(0);
  if (b.Xm) ind.Xm = take(ind.Xm.size()).reshaped(ind.Xm.rows(), ind.Xm.cols());
  if (b.Xu) ind.Xu = take(ind.Xu.size()).reshaped(ind.Xu.rows(), ind.Xu.cols());
  require_dims("unpack_params: flat vector length", pos, x.size());
}

inline VectorXd pack_gradient(const ElboGradient &g, const ParamBlocks &b) {
  return detail::pack_blocks(g.lambda_log, g.kf, g.kg, g.mu0, g.Xm, g.Xu, b);
}

inline VectorXd pack_params(const VshgpModel &m, const ParamBlocks &b) {
  return pack_params(m.hyper, m.inducing, m.lambda_log, b);
}

inline void unpack_params(const VectorXd &x, const ParamBlocks &b, VshgpModel &m) {
  unpack_params(x, b, m.hyper, m.inducing, m.lambda_log);
}

/// One row of a training trace.
struct TraceRow {
  int iteration = 0;
  double elbo = 0.0;
  double seconds = 0.0;
  std::string stage;
};

struct TrainConfig {
  int stage1_line_searches = 30; // variational parameters only
  int stage2_line_searches = 70; // all blocks jointly
  double c1 = 1e-4;
  double c2 = 0.1;
};

struct TrainResult {
  std::vector<TraceRow> trace;
  double final_elbo = 0.0;
  double seconds = 0.0;
};

namespace detail {

inline void append_trace(std::vector<TraceRow> &trace, const CgdResult &r,
                         const std::string &stage, double t0_seconds) {
  const int base = trace.empty() ? 0 : trace.back().iteration + 1;
  for (std::size_t k = 0; k < r.trace.size(); ++k) {
    TraceRow row;
    row.iteration = base + static_cast<int>(k);
    row.elbo = r.trace[k];
    row.seconds = t0_seconds + r.trace_seconds[k];
    row.stage = stage;
    trace.push_back(row);
  }
}

} // namespace detail

/// Alternating schedule: CGD on Lambda alone, then CGD on every block.
inline TrainResult train_vshgp(VshgpModel &model, const TrainConfig &cfg) {
  using clock = std::chrono::steady_clock;
  const auto start = clock::now();
  TrainResult out;
  auto run_stage = [&](const ParamBlocks &blocks, int budget, const std::string &name) {
    const auto t0 = clock::now();
    ObjectiveFn fn = [&](const VectorXd &x, VectorXd &grad) {
      VshgpModel trial = model;
      unpack_params(x, blocks, trial);
      const auto ws = build_workspace(trial.view());
      grad = pack_gradient(elbo_grads(trial.view(), ws), blocks);
      return elbo(ws, trial.train_targets).total;
    };
    CgdResult r;
    try {
      r = cgd_maximize(fn, pack_params(model, blocks), budget, cfg.c1, cfg.c2);
    } catch (const Error &e) {
      throw NumericalError("train_vshgp: " + name + " failed: " + e.what());
    }
    unpack_params(r.x, blocks, model);
    const double before = std::chrono::duration<double>(t0 - start).count();
    detail::append_trace(out.trace, r, name, before);
    out.final_elbo = r.value;
  };
  run_stage(ParamBlocks::variational_only(), cfg.stage1_line_searches, "stage1");
  run_stage(ParamBlocks::all(), cfg.stage2_line_searches, "stage2");
  out.seconds = std::chrono::duration<double>(clock::now() - start).count();
  return out;
}

} // namespace vshgp
