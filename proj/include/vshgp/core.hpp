#pragma once

// Deterministic variational sparse heteroscedastic GP: the collapsed bound
// F_V, its analytic gradients, the optimal q(f_m) and latent prediction.
//
// Every product with Sigma_y^{-1} = (Q^f_nn + R_g)^{-1} goes through the
// Woodbury identity on the m x m matrix D = I + U R_g^{-1} U^T, where
// U = L_m^{-1} K^f_mn. Likewise K_Lambda = K^g_uu + K^g_un Lambda K^g_nu is
// handled as L_u C L_u^T with C = I + V Lambda V^T, V = L_u^{-1} K^g_un.
// Nothing of size n x n is ever formed.

#include <Eigen/Dense>

#include <cmath>

#include "vshgp/error.hpp"
#include "vshgp/kernel.hpp"
#include "vshgp/linalg.hpp"
#include "vshgp/model.hpp"
#include "vshgp/predictive.hpp"

namespace vshgp {

/// Cached quantities of the collapsed bound for one model state.
struct ElboWorkspace {
  Index n = 0, m = 0, u = 0;
  double mu0 = 0.0;
  HyperParams hyper;
  InducingSet inducing;

  // f: K^f_mm = L_m L_m^T (+ jitter_f I)
  MatrixXd Kf_nm;
  MatrixXd Lm;
  double jitter_f = 0.0;
  MatrixXd U;        // m x n, L_m^{-1} K^f_mn
  MatrixXd Omega_f;  // n x m, K^f_nm (K^f_mm)^{-1}
  VectorXd Q_f_diag;
  VectorXd Kf_diag;
  MatrixXd Ld;       // chol of D = I + U R_g^{-1} U^T
  MatrixXd Z;        // m x n, L_d^{-1} U
  MatrixXd K_R;      // K^f_mn R_g^{-1} K^f_nm + K^f_mm = L_m D L_m^T
  VectorXd alpha_f;  // K_R^{-1} K^f_mn R_g^{-1} y

  // g: K^g_uu = L_u L_u^T (+ jitter_g I)
  MatrixXd Kg_nu;
  MatrixXd Lu;
  double jitter_g = 0.0;
  MatrixXd V;        // u x n, L_u^{-1} K^g_un
  MatrixXd Omega_g;  // n x u
  VectorXd Q_g_diag;
  VectorXd Kg_diag;
  VectorXd Lambda_diag;
  MatrixXd Lc;       // chol of C = I + V Lambda V^T
  MatrixXd W;        // u x n, L_c^{-1} V
  VectorXd Va;       // V (Lambda - 0.5 I) 1
  VectorXd mu_u;
  MatrixXd Sigma_u;
  MatrixXd K_Lambda; // K^g_uu + K^g_un Lambda K^g_nu
  VectorXd gamma_u;  // (K^g_uu)^{-1} (mu_u - mu0 1)

  VectorXd mu_g;
  VectorXd Sigma_g_diag;
  VectorXd R_g_diag;
  VectorXd A_nn_diag; // diag of (K^g_nu K_Lambda^{-1} K^g_un)^{.2}

  VectorXd beta_n;    // Sigma_y^{-1} y
  VectorXd Sigma_y_inv_diag;
  double logdet_Sigma_y = 0.0;
  VectorXd Lambda_a_diag;
  VectorXd Lambda_b_diag;
  VectorXd Lambda_ab_diag;
};

/// F_V and its four terms. The trace and KL entries hold their signed
/// contributions, so total = log_term + trace_g + trace_f + kl.
struct ElboBreakdown {
  double total = 0.0;
  double log_term = 0.0;
  double trace_g = 0.0; // -0.25 Tr[Sigma_g]
  double trace_f = 0.0; // -0.5 Tr[R_g^{-1}(K^f_nn - Q^f_nn)]
  double kl = 0.0;      // -KL(q(g_u) || p(g_u))
};

/// dF_V with respect to every parameter block (log-domain kernel params).
struct ElboGradient {
  VectorXd lambda_log;
  VectorXd kf;
  VectorXd kg;
  double mu0 = 0.0;
  MatrixXd Xm;
  MatrixXd Xu;
};

namespace detail {

/// Builds the f-side factors that do not depend on g.
inline void build_f_prior(ElboWorkspace &ws, const ModelView &v) {
  const auto &kf = v.hyper.kf;
  ws.Kf_nm = kernel_matrix(v.X, v.inducing.Xm, kf);
  const auto fac = chol_jitter(kernel_matrix(v.inducing.Xm, v.inducing.Xm, kf));
  ws.Lm = fac.L;
  ws.jitter_f = fac.jitter;
  ws.U = lower_solve(ws.Lm, ws.Kf_nm.transpose());
  ws.Q_f_diag = column_sq_norms(ws.U);
  ws.Omega_f = lower_transpose_solve(ws.Lm, ws.U).transpose();
  ws.Kf_diag = kernel_diag(v.X, kf);
}

inline void build_g_prior(ElboWorkspace &ws, const ModelView &v) {
  const auto &kg = v.hyper.kg;
  ws.Kg_nu = kernel_matrix(v.X, v.inducing.Xu, kg);
  const auto fac = chol_jitter(kernel_matrix(v.inducing.Xu, v.inducing.Xu, kg));
  ws.Lu = fac.L;
  ws.jitter_g = fac.jitter;
  ws.V = lower_solve(ws.Lu, ws.Kg_nu.transpose());
  ws.Q_g_diag = column_sq_norms(ws.V);
  ws.Omega_g = lower_transpose_solve(ws.Lu, ws.V).transpose();
  ws.Kg_diag = kernel_diag(v.X, kg);
}

/// Given mu_g and Sigma_g_diag, fills R_g and the Woodbury pieces of
/// Sigma_y = Q^f_nn + R_g.
inline void build_noise_terms(ElboWorkspace &ws, const VectorXd &y) {
  ws.R_g_diag = (ws.mu_g - 0.5 * ws.Sigma_g_diag).array().exp().matrix();
  if (!ws.R_g_diag.allFinite() || (ws.R_g_diag.array() <= 0.0).any()) {
    throw NumericalError("collapsed bound: noise variances R_g over/underflowed");
  }
  const VectorXd rinv = ws.R_g_diag.cwiseInverse();
  MatrixXd D = ws.U * rinv.asDiagonal() * ws.U.transpose();
  D.diagonal().array() += 1.0;
  ws.Ld = chol_jitter(std::move(D)).L;
  ws.Z = lower_solve(ws.Ld, ws.U);
  const VectorXd ry = rinv.cwiseProduct(y);
  const VectorXd Zry = ws.Z * ry;
  ws.beta_n = ry - rinv.cwiseProduct(ws.Z.transpose() * Zry);
  ws.Sigma_y_inv_diag =
      rinv - rinv.cwiseAbs2().cwiseProduct(column_sq_norms(ws.Z));
  ws.logdet_Sigma_y =
      chol_logdet(ws.Ld) + (ws.mu_g - 0.5 * ws.Sigma_g_diag).sum();
  ws.alpha_f = lower_transpose_solve(ws.Lm, lower_transpose_solve(ws.Ld, Zry));
  ws.K_R = ws.Lm * (ws.Ld * ws.Ld.transpose()) * ws.Lm.transpose();
  symmetrize(ws.K_R);

  ws.Lambda_a_diag = (ws.beta_n.cwiseAbs2() - ws.Sigma_y_inv_diag)
                         .cwiseProduct(ws.R_g_diag);
  ws.Lambda_b_diag = (ws.Kf_diag - ws.Q_f_diag).cwiseProduct(rinv);
  ws.Lambda_ab_diag = ws.Lambda_a_diag + ws.Lambda_b_diag;
}

} // namespace detail

/// Evaluates every cached quantity of the collapsed bound at the model state.
///
/// q(g_u) follows the Lambda reparameterization:
///   mu_u = K^g_un (Lambda - 0.5 I) 1 + mu0 1,
///   Sigma_u^{-1} = (K^g_uu)^{-1} + Omega_g^T Lambda Omega_g.
inline ElboWorkspace build_workspace(const ModelView &v) {
  validate(v);
  ElboWorkspace ws;
  ws.n = v.n();
  ws.m = v.m();
  ws.u = v.u();
  ws.mu0 = v.hyper.mu0;
  ws.hyper = v.hyper;
  ws.inducing = v.inducing;

  detail::build_f_prior(ws, v);
  detail::build_g_prior(ws, v);

  ws.Lambda_diag = v.lambda_log.array().exp().matrix();
  MatrixXd C = ws.V * ws.Lambda_diag.asDiagonal() * ws.V.transpose();
  C.diagonal().array() += 1.0;
  ws.Lc = chol_jitter(std::move(C)).L;
  ws.W = lower_solve(ws.Lc, ws.V);

  const VectorXd a = ws.Lambda_diag.array() - 0.5;
  ws.Va = ws.V * a;
  ws.mu_u = (ws.Lu * ws.Va).array() + ws.mu0;
  ws.gamma_u = lower_transpose_solve(ws.Lu, ws.Va);
  ws.mu_g = (ws.V.transpose() * ws.Va).array() + ws.mu0;

  const MatrixXd LuLcT = lower_solve(ws.Lc, ws.Lu.transpose()).transpose();
  ws.Sigma_u = LuLcT * LuLcT.transpose();
  symmetrize(ws.Sigma_u);
  ws.K_Lambda = ws.Lu * (ws.Lc * ws.Lc.transpose()) * ws.Lu.transpose();
  symmetrize(ws.K_Lambda);

  const VectorXd proj = column_sq_norms(ws.W);
  ws.Sigma_g_diag = ws.Kg_diag - ws.Q_g_diag + proj;
  ws.A_nn_diag = proj.cwiseAbs2();

  detail::build_noise_terms(ws, v.y);
  return ws;
}

inline ElboBreakdown elbo(const ElboWorkspace &ws, const VectorXd &y) {
  ElboBreakdown out;
  const double n = static_cast<double>(ws.n);
  out.log_term = -0.5 * y.dot(ws.beta_n) - 0.5 * ws.logdet_Sigma_y - 0.5 * n * kLog2Pi;
  out.trace_g = -0.25 * ws.Sigma_g_diag.sum();
  out.trace_f = -0.5 * ws.Lambda_b_diag.sum();
  // KL(N(mu_u, Sigma_u) || N(mu0 1, K_uu)) with Sigma_u = L_u C^{-1} L_u^T.
  const MatrixXd Lcinv = lower_inverse(ws.Lc);
  const double kl = 0.5 * (Lcinv.squaredNorm() + ws.Va.squaredNorm() -
                           static_cast<double>(ws.u) + chol_logdet(ws.Lc));
  out.kl = -kl;
  out.total = out.log_term + out.trace_g + out.trace_f + out.kl;
  return out;
}

inline ElboBreakdown elbo(const ModelView &v) {
  return elbo(build_workspace(v), v.y);
}

inline ElboBreakdown elbo(const VshgpModel &model) { return elbo(model.view()); }

/// Gaussian KL(N(mu1, S1) || N(mu2, L2 L2^T)) with S1 = L1 L1^T.
inline double gaussian_kl(const VectorXd &mu1, const MatrixXd &L1,
                          const VectorXd &mu2, const MatrixXd &L2) {
  const MatrixXd M = lower_solve(L2, L1);
  const VectorXd r = lower_solve(L2, mu2 - mu1);
  return 0.5 * (M.squaredNorm() + r.squaredNorm() - static_cast<double>(mu1.size()) +
                chol_logdet(L2) - chol_logdet(L1));
}

/// The collapsed bound with q(g_u) = N(mu_u, Sigma_u) supplied directly
/// instead of through Lambda. lambda_log in the view is ignored.
inline ElboBreakdown elbo_given_qg(const ModelView &v, const VectorXd &mu_u,
                                   const MatrixXd &Sigma_u) {
  validate(v);
  require_dims("elbo_given_qg: mu_u", v.u(), mu_u.size());
  require_dims("elbo_given_qg: Sigma_u", v.u(), Sigma_u.rows());
  ElboWorkspace ws;
  ws.n = v.n();
  ws.m = v.m();
  ws.u = v.u();
  ws.mu0 = v.hyper.mu0;
  detail::build_f_prior(ws, v);
  detail::build_g_prior(ws, v);
  const MatrixXd Ls = chol_jitter(Sigma_u).L;
  const VectorXd dev = mu_u.array() - ws.mu0;
  ws.mu_g = (ws.V.transpose() * lower_solve(ws.Lu, dev)).array() + ws.mu0;
  const MatrixXd P = Ls.transpose() * lower_transpose_solve(ws.Lu, ws.V);
  ws.Sigma_g_diag = ws.Kg_diag - ws.Q_g_diag + column_sq_norms(P);
  detail::build_noise_terms(ws, v.y);

  ElboBreakdown out;
  const double n = static_cast<double>(ws.n);
  out.log_term = -0.5 * v.y.dot(ws.beta_n) - 0.5 * ws.logdet_Sigma_y - 0.5 * n * kLog2Pi;
  out.trace_g = -0.25 * ws.Sigma_g_diag.sum();
  out.trace_f = -0.5 * ws.Lambda_b_diag.sum();
  out.kl = -gaussian_kl(mu_u, Ls, VectorXd::Constant(ws.u, ws.mu0), ws.Lu);
  out.total = out.log_term + out.trace_g + out.trace_f + out.kl;
  return out;
}

/// Products with A_nn =(K^g_nu K_Lambda^{-1} K^g_un)^{.2} = (W^T W)^{.2}
/// without forming the n x n matrix: (A x)_i = w_i^T (W diag(x) W^T) w_i.
inline VectorXd apply_A_nn(const ElboWorkspace &ws, const VectorXd &x) {
  const MatrixXd M = ws.W * x.asDiagonal() * ws.W.transpose();
  return (ws.W.cwiseProduct(M * ws.W)).colwise().sum().transpose();
}

/// Adjoint of F_V with respect to K^f_nm, K^f_mm and diag K^f_nn.
///
/// cross = (beta beta^T - Sigma_y^{-1} + R_g^{-1}) Omega_f = 2 (A^f_mn)^T,
/// inducing = A^f_mm = -A^f_mn Omega_f, diag = -0.5 R_g^{-1}.
inline KernelAdjoint f_adjoint(const ElboWorkspace &ws) {
  KernelAdjoint adj;
  const VectorXd rinv = ws.R_g_diag.cwiseInverse();
  // (R^{-1} - Sigma_y^{-1}) Omega_f = R^{-1} U^T (I - D^{-1}) L_m^{-1}
  MatrixXd ImDinv = -chol_inverse(ws.Ld);
  ImDinv.diagonal().array() += 1.0;
  const MatrixXd Lminv = lower_inverse(ws.Lm);
  adj.cross = ws.beta_n * (ws.Omega_f.transpose() * ws.beta_n).transpose() +
              rinv.asDiagonal() * (ws.U.transpose() * (ImDinv * Lminv));
  adj.inducing = -0.5 * adj.cross.transpose() * ws.Omega_f;
  symmetrize(adj.inducing);
  adj.diag = -0.5 * rinv;
  return adj;
}

namespace detail {

/// Pulls G = dF/dV back to K_xz and K_zz for V = L^{-1} K_zx with
/// L L^T = K_zz: dV = L^{-1} dK_zx - Phi(L^{-1} dK_zz L^{-T}) V, where Phi keeps
/// the lower triangle and halves the diagonal. The diag entry is left empty.
inline KernelAdjoint whitened_pullback(const MatrixXd &L, const MatrixXd &V, const MatrixXd &G) {
  const MatrixXd X = G * V.transpose();
  MatrixXd P = X.triangularView<Eigen::StrictlyLower>();
  P.diagonal() = 0.5 * X.diagonal();
  P = 0.5 * (P + P.transpose()).eval();
  KernelAdjoint adj;
  adj.cross = lower_transpose_solve(L, G).transpose();
  adj.inducing = -lower_transpose_solve(L, lower_transpose_solve(L, P).transpose());
  symmetrize(adj.inducing);
  return adj;
}

} // namespace detail

/// Adjoint of F_V with respect to K^g_nu, K^g_uu and diag K^g_nn, taking
/// dF/dmu_g = Lambda^ab / 2 and dF/dSigma_g = -(Lambda^ab + 1) / 4 upstream.
///
/// The bound sees K^g only through V = L_u^{-1} K^g_un and diag K^g_nn, so the
/// adjoint G_V = dF/dV involves only C = I + V Lambda V^T and is pulled back
/// through the Cholesky factor with triangular solves. No inverse of K^g_uu is
/// formed, which keeps the result accurate when K^g_uu is nearly singular.
inline KernelAdjoint g_adjoint(const ElboWorkspace &ws) {
  const VectorXd p = 0.5 * ws.Lambda_ab_diag;
  const VectorXd s = -0.25 * (ws.Lambda_ab_diag.array() + 1.0).matrix();
  const VectorXd a = ws.Lambda_diag.array() - 0.5;
  const MatrixXd &V = ws.V;
  auto c_solve = [&](const MatrixXd &B) {
    return lower_transpose_solve(ws.Lc, lower_solve(ws.Lc, B));
  };

  const MatrixXd CiV = lower_transpose_solve(ws.Lc, ws.W); // C^{-1} V
  const MatrixXd CiVL = CiV * ws.Lambda_diag.asDiagonal();
  const MatrixXd VS = V * s.asDiagonal();
  const MatrixXd T = VS * V.transpose();

  // mu_g = V^T V a + mu0; Sigma_g = diag K - colsq(V) + colsq(L_c^{-1} V);
  // -KL = -(Tr C^{-1} + |V a|^2 + log|C| - u) / 2.
  const MatrixXd G = ws.Va * p.transpose() + (V * p) * a.transpose() - 2.0 * VS +
                     2.0 * c_solve(VS) - 2.0 * c_solve(T * CiVL) + c_solve(CiVL) -
                     ws.Va * a.transpose() - CiVL;

  KernelAdjoint adj = detail::whitened_pullback(ws.Lu, V, G);
  adj.diag = s;
  return adj;
}

/// dF_V / d lambda_n with lambda_n = log diag(Lambda_nn):
///   Lambda [ 1/2 (Q^g + 1/2 A) Lambda^ab 1 + 1/4 A 1 - 1/2 A Lambda 1
///            - mu_g + mu0 1 ].
inline VectorXd lambda_gradient(const ElboWorkspace &ws) {
  const VectorXd Qg_lab = ws.V.transpose() * (ws.V * ws.Lambda_ab_diag);
  const VectorXd A_term = apply_A_nn(
      ws, (0.25 * ws.Lambda_ab_diag.array() + 0.25 - 0.5 * ws.Lambda_diag.array()).matrix());
  const VectorXd inner =
      0.5 * Qg_lab + A_term - (ws.mu_g.array() - ws.mu0).matrix();
  return ws.Lambda_diag.cwiseProduct(inner);
}

inline ElboGradient elbo_grads(const ModelView &v, const ElboWorkspace &ws) {
  ElboGradient g;
  g.lambda_log = lambda_gradient(ws);
  g.mu0 = 0.5 * ws.Lambda_ab_diag.sum();
  const auto fgrad = contract_adjoint(v.X, v.inducing.Xm, v.hyper.kf, f_adjoint(ws));
  g.kf = fgrad.params;
  g.Xm = fgrad.inputs;
  const auto ggrad = contract_adjoint(v.X, v.inducing.Xu, v.hyper.kg, g_adjoint(ws));
  g.kg = ggrad.params;
  g.Xu = ggrad.inputs;
  return g;
}

inline ElboGradient elbo_grads(const ModelView &v) {
  return elbo_grads(v, build_workspace(v));
}

inline ElboGradient elbo_grads(const VshgpModel &model) {
  return elbo_grads(model.view());
}

/// Optimal q*(f_m) = N(mu, Sigma):
///   mu = K_mm K_R^{-1} K_mn R_g^{-1} y,   Sigma = K_mm K_R^{-1} K_mm.
struct GaussianPosterior {
  VectorXd mean;
  MatrixXd cov;
};

inline GaussianPosterior posterior_fm(const ElboWorkspace &ws) {
  GaussianPosterior q;
  q.mean = ws.Lm * (ws.Lm.transpose() * ws.alpha_f);
  const MatrixXd LmLdT = lower_solve(ws.Ld, ws.Lm.transpose()).transpose();
  q.cov = LmLdT * LmLdT.transpose();
  symmetrize(q.cov);
  return q;
}

inline GaussianPosterior posterior_fm(const VshgpModel &model) {
  return posterior_fm(build_workspace(model.view()));
}

namespace detail {

inline VectorXd floor_variance(VectorXd var, double prior) {
  const double floor = 1e-15 * prior;
  for (Index i = 0; i < var.size(); ++i) {
    if (!(var(i) > floor)) {
      var(i) = floor;
    }
  }
  return var;
}

} // namespace detail

/// Latent predictions q(f*) and q(g*) at the rows of Xstar.
inline LatentPrediction predict_latent(const ElboWorkspace &ws,
                                       const MatrixXd &Xstar) {
  const auto &kf = ws.hyper.kf;
  const auto &kg = ws.hyper.kg;
  require_dims("predict_latent: test input columns", kf.dim(), Xstar.cols());
  LatentPrediction out;

  const MatrixXd Kms = kernel_matrix(ws.inducing.Xm, Xstar, kf);
  const MatrixXd Ams = lower_solve(ws.Lm, Kms);
  const MatrixXd Bms = lower_solve(ws.Ld, Ams);
  const double kss_f = kf.signal_variance();
  out.mu_f = Kms.transpose() * ws.alpha_f;
  out.var_f = detail::floor_variance(
      (kss_f - column_sq_norms(Ams).array() + column_sq_norms(Bms).array()).matrix(),
      kss_f);

  const MatrixXd Kus = kernel_matrix(ws.inducing.Xu, Xstar, kg);
  const MatrixXd Aus = lower_solve(ws.Lu, Kus);
  const MatrixXd Bus = lower_solve(ws.Lc, Aus);
  const double kss_g = kg.signal_variance();
  out.mu_g = (Kus.transpose() * ws.gamma_u).array() + ws.mu0;
  out.var_g = detail::floor_variance(
      (kss_g - column_sq_norms(Aus).array() + column_sq_norms(Bus).array()).matrix(),
      kss_g);
  return out;
}

inline LatentPrediction predict_latent(const VshgpModel &model,
                                       const MatrixXd &Xstar) {
  return predict_latent(build_workspace(model.view()), Xstar);
}

} // namespace vshgp
