#pragma once

#include <Eigen/Dense>

#include <cmath>
#include <sstream>

#include "vshgp/error.hpp"

namespace vshgp {

using Eigen::Index;
using Eigen::MatrixXd;
using Eigen::VectorXd;

inline constexpr double kLog2Pi = 1.8378770664093454835606594728112;

/// Number of escalation levels tried after the unjittered attempt.
inline constexpr int kJitterLevels = 9;

struct CholeskyFactor {
  MatrixXd L;          // lower triangular, L * L^T = K + jitter * I
  double jitter = 0.0; // diagonal shift actually applied
  int level = -1;      // -1: no jitter, otherwise the escalation index k
};

inline void symmetrize(MatrixXd &K) {
  K = 0.5 * (K + K.transpose()).eval();
}

/// Cholesky factorization with escalating diagonal jitter.
///
/// The input is symmetrized first. The plain factorization is tried, then
/// jitter 1e-10 * tr(K)/p * 10^k for k = 0..8; the first success wins.
inline CholeskyFactor chol_jitter(MatrixXd K) {
  const Index p = K.rows();
  require_dims("chol_jitter: matrix must be square", p, K.cols());
  CholeskyFactor out;
  if (p == 0) {
    out.L.resize(0, 0);
    return out;
  }
  symmetrize(K);
  if (!K.allFinite()) {
    throw NumericalError("chol_jitter: matrix has non-finite entries");
  }
  const double base = 1e-10 * std::abs(K.trace()) / static_cast<double>(p);

  Eigen::LLT<MatrixXd> llt(K);
  if (llt.info() == Eigen::Success) {
    out.L = llt.matrixL();
    return out;
  }
  double jitter = base;
  for (int k = 0; k < kJitterLevels; ++k, jitter *= 10.0) {
    MatrixXd shifted = K;
    shifted.diagonal().array() += jitter;
    llt.compute(shifted);
    if (llt.info() == Eigen::Success) {
      out.L = llt.matrixL();
      out.jitter = jitter;
      out.level = k;
      return out;
    }
  }
  std::ostringstream msg;
  msg << "chol_jitter: factorization failed at maximum jitter " << jitter / 10.0
      << " (size " << p << ", trace " << K.trace() << ", min diagonal "
      << K.diagonal().minCoeff() << ")";
  throw NumericalError(msg.str());
}

/// Solves L X = B for lower-triangular L.
template <typename Derived>
MatrixXd lower_solve(const MatrixXd &L, const Eigen::MatrixBase<Derived> &B) {
  return L.triangularView<Eigen::Lower>().solve(B);
}

/// Solves L^T X = B for lower-triangular L.
template <typename Derived>
MatrixXd lower_transpose_solve(const MatrixXd &L,
                               const Eigen::MatrixBase<Derived> &B) {
  return L.transpose().triangularView<Eigen::Upper>().solve(B);
}

/// (L L^T)^{-1} B.
template <typename Derived>
MatrixXd chol_solve(const MatrixXd &L, const Eigen::MatrixBase<Derived> &B) {
  return lower_transpose_solve(L, lower_solve(L, B));
}

inline MatrixXd lower_inverse(const MatrixXd &L) {
  return lower_solve(L, MatrixXd::Identity(L.rows(), L.cols()));
}

/// (L L^T)^{-1}, symmetrized.
inline MatrixXd chol_inverse(const MatrixXd &L) {
  const MatrixXd Linv = lower_inverse(L);
  MatrixXd out = Linv.transpose() * Linv;
  symmetrize(out);
  return out;
}

inline double chol_logdet(const MatrixXd &L) {
  return 2.0 * L.diagonal().array().log().sum();
}

/// Column-wise sum of squares; diag(A^T A).
inline VectorXd column_sq_norms(const MatrixXd &A) {
  return A.colwise().squaredNorm().transpose();
}

} // namespace vshgp
