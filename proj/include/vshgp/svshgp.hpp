#pragma once

// Stochastic VSHGP: the uncollapsed factorized bound with explicit Gaussians
// q(f_m) and q(g_u), its mini-batch estimator, natural-gradient steps and the
// NGD + Adam training loop.

#include <Eigen/Dense>

#include <algorithm>
#include <chrono>
#include <cmath>
#include <limits>
#include <numeric>
#include <random>
#include <sstream>
#include <string>
#include <vector>

#include "vshgp/core.hpp"
#include "vshgp/error.hpp"
#include "vshgp/kernel.hpp"
#include "vshgp/linalg.hpp"
#include "vshgp/model.hpp"
#include "vshgp/optim.hpp"
#include "vshgp/training.hpp"

namespace vshgp {

/// q(f_m) = N(mu_m, L_m L_m^T), q(g_u) = N(mu_u, L_u L_u^T).
struct ExplicitVariational {
  VectorXd mu_m;
  MatrixXd L_m;
  VectorXd mu_u;
  MatrixXd L_u;

  MatrixXd Sigma_m() const { return L_m * L_m.transpose(); }
  MatrixXd Sigma_u() const { return L_u * L_u.transpose(); }
};

/// Exponential-family coordinates of one Gaussian.
struct NaturalParams {
  VectorXd theta1; // Sigma^{-1} mu
  MatrixXd Theta2; // -0.5 Sigma^{-1}
  VectorXd psi1;   // mu
  MatrixXd Psi2;   // mu mu^T + Sigma
};

inline NaturalParams to_natural(const VectorXd &mu, const MatrixXd &L) {
  NaturalParams p;
  const MatrixXd prec = chol_inverse(L);
  p.theta1 = prec * mu;
  p.Theta2 = -0.5 * prec;
  p.psi1 = mu;
  p.Psi2 = mu * mu.transpose() + L * L.transpose();
  return p;
}

/// Euclidean gradients of the factorized bound with respect to q.
struct QGradient {
  VectorXd mu_m;
  MatrixXd Sigma_m;
  VectorXd mu_u;
  MatrixXd Sigma_u;
};

struct SvshgpModel {
  MatrixXd train_inputs;
  VectorXd train_targets;
  HyperParams hyper;
  InducingSet inducing;
  ExplicitVariational q;

  Index n() const { return train_inputs.rows(); }
};

/// q set equal to the priors: both KL terms start at zero.
inline ExplicitVariational prior_variational(const HyperParams &h, const InducingSet &ind) {
  ExplicitVariational q;
  q.mu_m = VectorXd::Zero(ind.Xm.rows());
  q.L_m = chol_jitter(kernel_matrix(ind.Xm, ind.Xm, h.kf)).L;
  q.mu_u = VectorXd::Constant(ind.Xu.rows(), h.mu0);
  q.L_u = chol_jitter(kernel_matrix(ind.Xu, ind.Xu, h.kg)).L;
  return q;
}

inline SvshgpModel make_svshgp(const VshgpModel &base) {
  SvshgpModel s;
  s.train_inputs = base.train_inputs;
  s.train_targets = base.train_targets;
  s.hyper = base.hyper;
  s.inducing = base.inducing;
  s.q = prior_variational(base.hyper, base.inducing);
  return s;
}

/// Collapsed-model view of an SVSHGP state (Lambda at its prior value).
inline VshgpModel to_vshgp(const SvshgpModel &s) {
  VshgpModel m;
  m.train_inputs = s.train_inputs;
  m.train_targets = s.train_targets;
  m.hyper = s.hyper;
  m.inducing = s.inducing;
  m.lambda_log = default_lambda_log(s.n());
  return m;
}

using Batch = std::vector<Index>;

inline Batch full_batch(Index n) {
  Batch b(static_cast<std::size_t>(n));
  std::iota(b.begin(), b.end(), Index{0});
  return b;
}

namespace detail {

inline void validate_svshgp(const SvshgpModel &s, const Batch &batch) {
  const auto &X = s.train_inputs;
  require_dims("svshgp: targets vs inputs", X.rows(), s.train_targets.size());
  require_dims("svshgp: kf dimension", X.cols(), s.hyper.kf.dim());
  require_dims("svshgp: kg dimension", X.cols(), s.hyper.kg.dim());
  require_dims("svshgp: Xm columns", X.cols(), s.inducing.Xm.cols());
  require_dims("svshgp: Xu columns", X.cols(), s.inducing.Xu.cols());
  require_dims("svshgp: mu_m", s.inducing.Xm.rows(), s.q.mu_m.size());
  require_dims("svshgp: L_m", s.inducing.Xm.rows(), s.q.L_m.rows());
  require_dims("svshgp: mu_u", s.inducing.Xu.rows(), s.q.mu_u.size());
  require_dims("svshgp: L_u", s.inducing.Xu.rows(), s.q.L_u.rows());
  if (batch.empty()) {
    throw ConfigError("svshgp: empty batch");
  }
  for (Index i : batch) {
    if (i < 0 || i >= X.rows()) {
      throw ConfigError("svshgp: batch index " + std::to_string(i) + " out of range");
    }
  }
}

/// Conditional moments of a latent process at batch rows given
/// q(z) = N(mu, Lq Lq^T) on its inducing values and prior mean m0.
struct Conditional {
  MatrixXd K;     // B x z
  MatrixXd L;     // chol K_zz
  MatrixXd Kinv;  // K_zz^{-1}
  MatrixXd Omega; // B x z, K K_zz^{-1}
  VectorXd alpha; // K_zz^{-1} (mu - m0)
  VectorXd mean;
  VectorXd var;
};

inline Conditional conditional(const MatrixXd &XB, const MatrixXd &Z,
                               const KernelParams &kp, const VectorXd &mu,
                               const MatrixXd &Lq, double m0) {
  Conditional c;
  c.K = kernel_matrix(XB, Z, kp);
  c.L = chol_jitter(kernel_matrix(Z, Z, kp)).L;
  c.Kinv = chol_inverse(c.L);
  const MatrixXd A = lower_solve(c.L, c.K.transpose());
  c.Omega = lower_transpose_solve(c.L, A).transpose();
  c.alpha = chol_solve(c.L, (mu.array() - m0).matrix());
  c.mean = (c.K * c.alpha).array() + m0;
  c.var = (kernel_diag(XB, kp) - column_sq_norms(A) +
           column_sq_norms(Lq.transpose() * c.Omega.transpose()));
  return c;
}

/// Euclidean gradient of E_q[data] - KL with respect to (mu, Sigma), given
/// upstream derivatives p = dF/dmean and s = dF/dvar at the batch rows.
inline void q_block_gradient(const Conditional &c, const VectorXd &p, const VectorXd &s,
                             const MatrixXd &Lq, VectorXd &g_mu, MatrixXd &g_Sigma) {
  g_mu = c.Omega.transpose() * p - c.alpha;
  g_Sigma = c.Omega.transpose() * s.asDiagonal() * c.Omega -
            0.5 * (c.Kinv - chol_inverse(Lq));
  symmetrize(g_Sigma);
}

/// Kernel adjoint of the same objective (data term plus -KL).
inline KernelAdjoint kernel_block_adjoint(const Conditional &c, const VectorXd &p,
                                          const VectorXd &s, const MatrixXd &Lq) {
  const MatrixXd Sigma = Lq * Lq.transpose();
  const MatrixXd SigKinv = Sigma * c.Kinv;
  const MatrixXd SOmega = s.asDiagonal() * c.Omega;
  const MatrixXd M = c.Omega.transpose() * SOmega;
  const VectorXd eta = c.Omega.transpose() * p;
  KernelAdjoint adj;
  adj.cross = p * c.alpha.transpose() - 2.0 * SOmega + 2.0 * SOmega * SigKinv;
  const MatrixXd KiSKi = c.Kinv * SigKinv;
  adj.inducing = -eta * c.alpha.transpose() + M - (SigKinv.transpose() * M + M * SigKinv) -
                 0.5 * (c.Kinv - KiSKi - c.alpha * c.alpha.transpose());
  symmetrize(adj.inducing);
  adj.diag = s;
  return adj;
}

} // namespace detail

/// Value and optional gradients of the mini-batch bound.
struct FactorizedEval {
  double value = 0.0;
  QGradient q;
  ElboGradient hyper; // lambda_log left empty
};

/// Evaluates F~ = (n/|B|) sum_{i in B} E[log p(y_i | f_i, g_i)] - KL_f - KL_g.
/// Only batch rows of the cross-covariances are formed.
inline FactorizedEval evaluate_factorized(const SvshgpModel &s, const Batch &batch,
                                          bool want_q_grads, bool want_hyper_grads) {
  detail::validate_svshgp(s, batch);
  const Index B = static_cast<Index>(batch.size());
  const double c = static_cast<double>(s.n()) / static_cast<double>(B);
  MatrixXd XB(B, s.train_inputs.cols());
  VectorXd yB(B);
  for (Index k = 0; k < B; ++k) {
    XB.row(k) = s.train_inputs.row(batch[static_cast<std::size_t>(k)]);
    yB(k) = s.train_targets(batch[static_cast<std::size_t>(k)]);
  }
  const double mu0 = s.hyper.mu0;
  const auto cf = detail::conditional(XB, s.inducing.Xm, s.hyper.kf, s.q.mu_m, s.q.L_m, 0.0);
  const auto cg = detail::conditional(XB, s.inducing.Xu, s.hyper.kg, s.q.mu_u, s.q.L_u, mu0);

  const VectorXd logR = cg.mean - 0.5 * cg.var;
  const VectorXd rinv = (-logR).array().exp().matrix();
  if (!rinv.allFinite()) {
    throw NumericalError("factorized bound: noise variances over/underflowed");
  }
  const VectorXd r = yB - cf.mean;
  const VectorXd e2 = r.cwiseAbs2() + cf.var; // E[(y - f)^2]
  const double data = -0.5 * (B * kLog2Pi + logR.sum() + e2.cwiseProduct(rinv).sum()) -
                      0.25 * cg.var.sum();
  FactorizedEval out;
  out.value = c * data -
              gaussian_kl(s.q.mu_m, s.q.L_m, VectorXd::Zero(s.q.mu_m.size()), cf.L) -
              gaussian_kl(s.q.mu_u, s.q.L_u, VectorXd::Constant(s.q.mu_u.size(), mu0), cg.L);
  if (!std::isfinite(out.value)) {
    throw NumericalError("factorized bound is not finite");
  }
  if (!want_q_grads && !want_hyper_grads) {
    return out;
  }

  // Upstream derivatives per batch row, scaled by n/|B|.
  const VectorXd pf = c * r.cwiseProduct(rinv);
  const VectorXd sf = -0.5 * c * rinv;
  const VectorXd lab = e2.cwiseProduct(rinv).array() - 1.0;
  const VectorXd pg = 0.5 * c * lab;
  const VectorXd sg = -0.25 * c * (lab.array() + 1.0).matrix();

  if (want_q_grads) {
    detail::q_block_gradient(cf, pf, sf, s.q.L_m, out.q.mu_m, out.q.Sigma_m);
    detail::q_block_gradient(cg, pg, sg, s.q.L_u, out.q.mu_u, out.q.Sigma_u);
  }
  if (want_hyper_grads) {
    const auto gf = contract_adjoint(XB, s.inducing.Xm, s.hyper.kf,
                                     detail::kernel_block_adjoint(cf, pf, sf, s.q.L_m));
    const auto gg = contract_adjoint(XB, s.inducing.Xu, s.hyper.kg,
                                     detail::kernel_block_adjoint(cg, pg, sg, s.q.L_u));
    out.hyper.kf = gf.params;
    out.hyper.Xm = gf.inputs;
    out.hyper.kg = gg.params;
    out.hyper.Xu = gg.inputs;
    out.hyper.mu0 = pg.sum() - (cg.Omega.transpose() * pg).sum() + cg.alpha.sum();
    out.hyper.lambda_log.resize(0);
  }
  return out;
}

inline double elbo_factorized(const SvshgpModel &s, const Batch &batch) {
  return evaluate_factorized(s, batch, false, false).value;
}

inline double elbo_factorized(const SvshgpModel &s) {
  return elbo_factorized(s, full_batch(s.n()));
}

inline QGradient euclidean_grads_q(const SvshgpModel &s, const Batch &batch) {
  return evaluate_factorized(s, batch, true, false).q;
}

/// q for one latent process in coordinates relative to the prior factor
/// L L^T = K_zz: mu = L w + m0, L_q = L L_w.
struct WhitenedGaussian {
  VectorXd w;
  MatrixXd L_w;
};

/// Mini-batch bound evaluated with q held in whitened coordinates. The
/// hyperparameter gradient is then the total derivative with q carried along
/// with the prior, and the q gradients are with respect to (w, S = L_w L_w^T).
struct WhitenedEval {
  double value = 0.0;
  WhitenedGaussian f;
  WhitenedGaussian g;
  QGradient q; // mu_* -> dF/dw, Sigma_* -> dF/dS
  ElboGradient hyper;
};

namespace detail {

struct WhitenedConditional {
  MatrixXd L; // chol K_zz
  MatrixXd A; // z x B, L^{-1} K_zB
  WhitenedGaussian q;
  VectorXd mean;
  VectorXd var;
};

inline WhitenedConditional whitened_conditional(const MatrixXd &XB, const MatrixXd &Z,
                                                const KernelParams &kp, const VectorXd &mu,
                                                const MatrixXd &Lq, double m0) {
  WhitenedConditional c;
  c.L = chol_jitter(kernel_matrix(Z, Z, kp)).L;
  c.A = lower_solve(c.L, kernel_matrix(XB, Z, kp).transpose());
  c.q.w = lower_solve(c.L, (mu.array() - m0).matrix());
  c.q.L_w = lower_solve(c.L, Lq);
  c.mean = (c.A.transpose() * c.q.w).array() + m0;
  c.var = kernel_diag(XB, kp) - column_sq_norms(c.A) + column_sq_norms(c.q.L_w.transpose() * c.A);
  return c;
}

/// KL(N(w, L_w L_w^T) || N(0, I)).
inline double whitened_kl(const WhitenedGaussian &q) {
  return 0.5 * (q.L_w.squaredNorm() + q.w.squaredNorm() - static_cast<double>(q.w.size())) -
         q.L_w.diagonal().array().log().sum();
}

inline void whitened_block_gradient(const WhitenedConditional &c, const VectorXd &p,
                                    const VectorXd &s, VectorXd &g_w, MatrixXd &g_S) {
  g_w = c.A * p - c.q.w;
  g_S = c.A * s.asDiagonal() * c.A.transpose() + 0.5 * chol_inverse(c.q.L_w);
  g_S.diagonal().array() -= 0.5;
  symmetrize(g_S);
}

inline KernelAdjoint whitened_block_adjoint(const WhitenedConditional &c, const VectorXd &p,
                                            const VectorXd &s) {
  const MatrixXd S = c.q.L_w * c.q.L_w.transpose();
  const MatrixXd As = c.A * s.asDiagonal();
  const MatrixXd G = c.q.w * p.transpose() - 2.0 * As + 2.0 * S * As;
  KernelAdjoint adj = whitened_pullback(c.L, c.A, G);
  adj.diag = s;
  return adj;
}

} // namespace detail

inline WhitenedEval evaluate_whitened(const SvshgpModel &s, const Batch &batch, bool want_q_grads) {
  detail::validate_svshgp(s, batch);
  const Index B = static_cast<Index>(batch.size());
  const double c = static_cast<double>(s.n()) / static_cast<double>(B);
  MatrixXd XB(B, s.train_inputs.cols());
  VectorXd yB(B);
  for (Index k = 0; k < B; ++k) {
    XB.row(k) = s.train_inputs.row(batch[static_cast<std::size_t>(k)]);
    yB(k) = s.train_targets(batch[static_cast<std::size_t>(k)]);
  }
  const double mu0 = s.hyper.mu0;
  const auto cf =
      detail::whitened_conditional(XB, s.inducing.Xm, s.hyper.kf, s.q.mu_m, s.q.L_m, 0.0);
  const auto cg =
      detail::whitened_conditional(XB, s.inducing.Xu, s.hyper.kg, s.q.mu_u, s.q.L_u, mu0);

  const VectorXd logR = cg.mean - 0.5 * cg.var;
  const VectorXd rinv = (-logR).array().exp().matrix();
  if (!rinv.allFinite()) {
    throw NumericalError("factorized bound: noise variances over/underflowed");
  }
  const VectorXd r = yB - cf.mean;
  const VectorXd e2 = r.cwiseAbs2() + cf.var;
  const double data = -0.5 * (B * kLog2Pi + logR.sum() + e2.cwiseProduct(rinv).sum()) -
                      0.25 * cg.var.sum();
  WhitenedEval out;
  out.value = c * data - detail::whitened_kl(cf.q) - detail::whitened_kl(cg.q);
  if (!std::isfinite(out.value)) {
    throw NumericalError("factorized bound is not finite");
  }
  out.f = cf.q;
  out.g = cg.q;

  const VectorXd pf = c * r.cwiseProduct(rinv);
  const VectorXd sf = -0.5 * c * rinv;
  const VectorXd lab = e2.cwiseProduct(rinv).array() - 1.0;
  const VectorXd pg = 0.5 * c * lab;
  const VectorXd sg = -0.25 * c * (lab.array() + 1.0).matrix();

  if (want_q_grads) {
    detail::whitened_block_gradient(cf, pf, sf, out.q.mu_m, out.q.Sigma_m);
    detail::whitened_block_gradient(cg, pg, sg, out.q.mu_u, out.q.Sigma_u);
  }
  const auto gf = contract_adjoint(XB, s.inducing.Xm, s.hyper.kf,
                                   detail::whitened_block_adjoint(cf, pf, sf));
  const auto gg = contract_adjoint(XB, s.inducing.Xu, s.hyper.kg,
                                   detail::whitened_block_adjoint(cg, pg, sg));
  out.hyper.kf = gf.params;
  out.hyper.Xm = gf.inputs;
  out.hyper.kg = gg.params;
  out.hyper.Xu = gg.inputs;
  out.hyper.mu0 = pg.sum();
  return out;
}

/// Rebuilds the explicit q from whitened coordinates under the current
/// hyperparameters and inducing inputs.
inline void set_whitened(SvshgpModel &s, const WhitenedGaussian &f, const WhitenedGaussian &g) {
  const MatrixXd Lf = chol_jitter(kernel_matrix(s.inducing.Xm, s.inducing.Xm, s.hyper.kf)).L;
  const MatrixXd Lg = chol_jitter(kernel_matrix(s.inducing.Xu, s.inducing.Xu, s.hyper.kg)).L;
  s.q.mu_m = Lf * f.w;
  s.q.L_m = (Lf * f.L_w).triangularView<Eigen::Lower>();
  s.q.mu_u = (Lg * g.w).array() + s.hyper.mu0;
  s.q.L_u = (Lg * g.L_w).triangularView<Eigen::Lower>();
}

namespace detail {

/// Natural step for one Gaussian block in ascent form. Returns false when the
/// updated precision is not positive definite.
inline bool natural_block_step(const VectorXd &mu, const MatrixXd &L, const VectorXd &g_mu,
                               const MatrixXd &g_Sigma, double gamma, VectorXd &mu_out,
                               MatrixXd &L_out) {
  const auto nat = to_natural(mu, L);
  // dF/dpsi1 = dF/dmu - 2 dF/dSigma mu,  dF/dPsi2 = dF/dSigma.
  const VectorXd d_psi1 = g_mu - 2.0 * g_Sigma * mu;
  const VectorXd theta1 = nat.theta1 + gamma * d_psi1;
  MatrixXd prec = -2.0 * (nat.Theta2 + gamma * g_Sigma);
  symmetrize(prec);
  Eigen::LLT<MatrixXd> lp(prec);
  if (lp.info() != Eigen::Success || !prec.allFinite()) {
    return false;
  }
  const MatrixXd Lp = lp.matrixL();
  if ((Lp.diagonal().array() <= 0.0).any()) {
    return false;
  }
  MatrixXd Sigma = chol_inverse(Lp);
  symmetrize(Sigma);
  Eigen::LLT<MatrixXd> ls(Sigma);
  if (ls.info() != Eigen::Success) {
    return false;
  }
  L_out = ls.matrixL();
  mu_out = chol_solve(Lp, theta1);
  return mu_out.allFinite() && L_out.allFinite();
}

inline void guarded_block_step(const VectorXd &mu, const MatrixXd &L, const VectorXd &g_mu,
                               const MatrixXd &g_Sigma, double gamma, VectorXd &mu_out,
                               MatrixXd &L_out, const char *block) {
  if ((g_mu.array() == 0.0).all() && (g_Sigma.array() == 0.0).all()) {
    mu_out = mu;
    L_out = L;
    return;
  }
  double g = gamma;
  for (int halving = 0; halving <= 10; ++halving) {
    if (natural_block_step(mu, L, g_mu, g_Sigma, g, mu_out, L_out)) {
      return;
    }
    g *= 0.5;
  }
  throw NumericalError(std::string("natural_step: ") + block +
                       " covariance stayed indefinite after 10 step halvings");
}

} // namespace detail

/// One natural-gradient step of size gamma on each Gaussian block. A block
/// whose update is not positive definite retries with gamma halved.
inline ExplicitVariational natural_step(const ExplicitVariational &q, const QGradient &grads,
                                        double gamma) {
  if (!(gamma > 0.0 && gamma <= 1.0)) {
    throw ConfigError("natural_step: gamma must lie in (0, 1]");
  }
  require_dims("natural_step: mu_m gradient", q.mu_m.size(), grads.mu_m.size());
  require_dims("natural_step: mu_u gradient", q.mu_u.size(), grads.mu_u.size());
  ExplicitVariational out;
  detail::guarded_block_step(q.mu_m, q.L_m, grads.mu_m, grads.Sigma_m, gamma, out.mu_m,
                             out.L_m, "f-block");
  detail::guarded_block_step(q.mu_u, q.L_u, grads.mu_u, grads.Sigma_u, gamma, out.mu_u,
                             out.L_u, "g-block");
  return out;
}

// Flat packing of q for the Adam-only baseline: mu, then the lower triangle
// of each Cholesky factor column by column with log-diagonals.

inline Index variational_size(const ExplicitVariational &q) {
  const Index m = q.mu_m.size(), u = q.mu_u.size();
  return m + m * (m + 1) / 2 + u + u * (u + 1) / 2;
}

namespace detail {

inline void pack_gaussian(const VectorXd &mu, const MatrixXd &L, std::vector<double> &out) {
  for (Index i = 0; i < mu.size(); ++i) out.push_back(mu(i));
  for (Index j = 0; j < L.cols(); ++j) {
    out.push_back(std::log(L(j, j)));
    for (Index i = j + 1; i < L.rows(); ++i) out.push_back(L(i, j));
  }
}

inline void pack_gaussian_grad(const VectorXd &g_mu, const MatrixXd &g_Sigma,
                               const MatrixXd &L, std::vector<double> &out) {
  for (Index i = 0; i < g_mu.size(); ++i) out.push_back(g_mu(i));
  const MatrixXd gL = 2.0 * g_Sigma * L;
  for (Index j = 0; j < L.cols(); ++j) {
    out.push_back(gL(j, j) * L(j, j));
    for (Index i = j + 1; i < L.rows(); ++i) out.push_back(gL(i, j));
  }
}

inline Index unpack_gaussian(const VectorXd &x, Index pos, VectorXd &mu, MatrixXd &L) {
  for (Index i = 0; i < mu.size(); ++i) mu(i) = x(pos++);
  L.setZero();
  for (Index j = 0; j < L.cols(); ++j) {
    L(j, j) = std::exp(x(pos++));
    for (Index i = j + 1; i < L.rows(); ++i) L(i, j) = x(pos++);
  }
  return pos;
}

inline VectorXd to_vector(const std::vector<double> &v) {
  return Eigen::Map<const VectorXd>(v.data(), static_cast<Index>(v.size()));
}

} // namespace detail

inline VectorXd pack_variational(const ExplicitVariational &q) {
  std::vector<double> out;
  detail::pack_gaussian(q.mu_m, q.L_m, out);
  detail::pack_gaussian(q.mu_u, q.L_u, out);
  return detail::to_vector(out);
}

inline VectorXd pack_variational_grad(const ExplicitVariational &q, const QGradient &g) {
  std::vector<double> out;
  detail::pack_gaussian_grad(g.mu_m, g.Sigma_m, q.L_m, out);
  detail::pack_gaussian_grad(g.mu_u, g.Sigma_u, q.L_u, out);
  return detail::to_vector(out);
}

inline void unpack_variational(const VectorXd &x, ExplicitVariational &q) {
  require_dims("unpack_variational: flat size", variational_size(q), x.size());
  Index pos = detail::unpack_gaussian(x, 0, q.mu_m, q.L_m);
  detail::unpack_gaussian(x, pos, q.mu_u, q.L_u);
}

/// Hyperparameter blocks (kernels, mu0, inducing inputs) as one flat vector.
inline VectorXd pack_hyper(const SvshgpModel &s) {
  return pack_params(s.hyper, s.inducing, VectorXd(), ParamBlocks::hyper_only());
}

inline void unpack_hyper(const VectorXd &x, SvshgpModel &s) {
  VectorXd none;
  unpack_params(x, ParamBlocks::hyper_only(), s.hyper, s.inducing, none);
}

enum class SvshgpMode { NgdAdam, AdamOnly };

struct SvshgpConfig {
  Index batch_size = 50;
  int iterations = 1000;
  double adam_step = 0.01;
  GammaSchedule schedule;
  std::uint64_t seed = 1;
  SvshgpMode mode = SvshgpMode::NgdAdam;
  int full_elbo_every = 0;     // 0 disables the full-batch trace column
  int guard_window = 50;       // divergence guard window (iterations)
  double guard_factor = 10.0;  // allowed running-mean drop in IQRs

  void validate() const {
    if (batch_size < 1) throw ConfigError("svshgp: batch_size must be >= 1");
    if (iterations < 0) throw ConfigError("svshgp: iterations must be >= 0");
    if (!(adam_step > 0.0)) throw ConfigError("svshgp: adam_step must be > 0");
    if (full_elbo_every < 0) throw ConfigError("svshgp: full_elbo_every must be >= 0");
    if (guard_window < 4) throw ConfigError("svshgp: guard_window must be >= 4");
  }
};

struct SvshgpTraceRow {
  int iteration = 0;
  double elbo = 0.0;      // stochastic estimate on the iteration's batch
  double full_elbo = std::numeric_limits<double>::quiet_NaN();
  double seconds = 0.0;
};

struct SvshgpResult {
  std::vector<SvshgpTraceRow> trace;
  double seconds = 0.0;
};

/// Draws batches by walking a shuffled permutation; a new permutation starts
/// when fewer than batch_size indices remain.
class EpochSampler {
public:
  EpochSampler(Index n, Index batch_size, std::uint64_t seed)
      : n_(n), batch_(std::min(batch_size, n)), rng_(seed), perm_(full_batch(n)),
        pos_(static_cast<std::size_t>(n)) {}

  Batch next() {
    if (pos_ + static_cast<std::size_t>(batch_) > perm_.size()) {
      std::shuffle(perm_.begin(), perm_.end(), rng_);
      pos_ = 0;
    }
    Batch b(perm_.begin() + static_cast<std::ptrdiff_t>(pos_),
            perm_.begin() + static_cast<std::ptrdiff_t>(pos_ + static_cast<std::size_t>(batch_)));
    pos_ += static_cast<std::size_t>(batch_);
    return b;
  }

private:
  Index n_;
  Index batch_;
  std::mt19937_64 rng_;
  Batch perm_;
  std::size_t pos_;
};

namespace detail {

inline double quantile(std::vector<double> v, double p) {
  std::sort(v.begin(), v.end());
  const double pos = p * static_cast<double>(v.size() - 1);
  const auto lo = static_cast<std::size_t>(std::floor(pos));
  const auto hi = std::min(lo + 1, v.size() - 1);
  return v[lo] + (pos - static_cast<double>(lo)) * (v[hi] - v[lo]);
}

/// Aborts when the running mean of the stochastic bound falls more than
/// factor * IQR below its best value so far.
class DivergenceGuard {
public:
  DivergenceGuard(int window, double factor) : window_(window), factor_(factor) {}

  void push(int iteration, double value) {
    values_.push_back(value);
    if (static_cast<int>(values_.size()) > window_) {
      values_.erase(values_.begin());
    }
    if (static_cast<int>(values_.size()) < window_) {
      return;
    }
    const double mean =
        std::accumulate(values_.begin(), values_.end(), 0.0) / static_cast<double>(window_);
    const double iqr = quantile(values_, 0.75) - quantile(values_, 0.25);
    const double scale = std::max(iqr, 1e-6 * std::abs(mean) + 1e-12);
    best_ = std::max(best_, mean);
    if (best_ - mean > factor_ * scale) {
      std::ostringstream msg;
      msg << "svshgp diverged at iteration " << iteration << ": running mean " << mean
          << " fell below best " << best_ << " by more than " << factor_
          << " x IQR (" << iqr << ")";
      throw NumericalError(msg.str());
    }
  }

private:
  int window_;
  double factor_;
  double best_ = -std::numeric_limits<double>::infinity();
  std::vector<double> values_;
};

/// One Adam step on the hyperparameters with q carried along with the prior.
inline void adam_on_hyper(SvshgpModel &s, AdamState &st, const WhitenedEval &ev,
                          double step) {
  VectorXd x = pack_hyper(s);
  adam_step(st, x, pack_gradient(ev.hyper, ParamBlocks::hyper_only()), step);
  unpack_hyper(x, s);
  set_whitened(s, ev.f, ev.g);
}

} // namespace detail

/// Stochastic training. NgdAdam: a natural step on q with the gamma schedule,
/// then an Adam step on the hyperparameters. AdamOnly: one Adam step on q
/// (whitened mean and Cholesky factors) and hyperparameters jointly. Both
/// hyperparameter steps hold q fixed in whitened coordinates, so q moves with
/// the prior instead of being left behind by it.
inline SvshgpResult train_svshgp(SvshgpModel &s, const SvshgpConfig &cfg) {
  cfg.validate();
  using clock = std::chrono::steady_clock;
  const auto start = clock::now();
  SvshgpResult out;
  if (cfg.iterations == 0) {
    return out;
  }
  EpochSampler sampler(s.n(), cfg.batch_size, cfg.seed);
  detail::DivergenceGuard guard(cfg.guard_window, cfg.guard_factor);
  AdamState hyper_state, joint_state;

  for (int t = 0; t < cfg.iterations; ++t) {
    const Batch batch = sampler.next();
    SvshgpTraceRow row;
    row.iteration = t;
    if (cfg.mode == SvshgpMode::NgdAdam) {
      const auto gq = euclidean_grads_q(s, batch);
      s.q = natural_step(s.q, gq, gamma_schedule(static_cast<double>(t), cfg.schedule));
      const auto ev = evaluate_whitened(s, batch, false);
      row.elbo = ev.value;
      detail::adam_on_hyper(s, hyper_state, ev, cfg.adam_step);
    } else {
      const auto ev = evaluate_whitened(s, batch, true);
      row.elbo = ev.value;
      std::vector<double> packed, grad;
      detail::pack_gaussian(ev.f.w, ev.f.L_w, packed);
      detail::pack_gaussian(ev.g.w, ev.g.L_w, packed);
      detail::pack_gaussian_grad(ev.q.mu_m, ev.q.Sigma_m, ev.f.L_w, grad);
      detail::pack_gaussian_grad(ev.q.mu_u, ev.q.Sigma_u, ev.g.L_w, grad);
      const VectorXd qx = detail::to_vector(packed);
      const VectorXd hx = pack_hyper(s);
      VectorXd x(qx.size() + hx.size());
      x << qx, hx;
      VectorXd g(x.size());
      g << detail::to_vector(grad), pack_gradient(ev.hyper, ParamBlocks::hyper_only());
      adam_step(joint_state, x, g, cfg.adam_step);
      WhitenedGaussian f = ev.f, gg = ev.g;
      const Index pos = detail::unpack_gaussian(x, 0, f.w, f.L_w);
      detail::unpack_gaussian(x, pos, gg.w, gg.L_w);
      unpack_hyper(x.tail(hx.size()), s);
      set_whitened(s, f, gg);
    }
    if (cfg.full_elbo_every > 0 &&
        (t % cfg.full_elbo_every == 0 || t + 1 == cfg.iterations)) {
      row.full_elbo = elbo_factorized(s);
    }
    row.seconds = std::chrono::duration<double>(clock::now() - start).count();
    out.trace.push_back(row);
    guard.push(t, row.elbo);
  }
  out.seconds = std::chrono::duration<double>(clock::now() - start).count();
  return out;
}

/// Latent predictions from the explicit variational distributions.
inline LatentPrediction predict_latent(const SvshgpModel &s, const MatrixXd &Xstar) {
  require_dims("predict_latent: test input columns", s.hyper.kf.dim(), Xstar.cols());
  const auto cf = detail::conditional(Xstar, s.inducing.Xm, s.hyper.kf, s.q.mu_m, s.q.L_m, 0.0);
  const auto cg =
      detail::conditional(Xstar, s.inducing.Xu, s.hyper.kg, s.q.mu_u, s.q.L_u, s.hyper.mu0);
  LatentPrediction out;
  out.mu_f = cf.mean;
  out.var_f = detail::floor_variance(cf.var, s.hyper.kf.signal_variance());
  out.mu_g = cg.mean;
  out.var_g = detail::floor_variance(cg.var, s.hyper.kg.signal_variance());
  return out;
}

} // namespace vshgp
