#pragma once

#include <Eigen/Dense>

#include <cmath>
#include <vector>

#include "vshgp/error.hpp"
#include "vshgp/linalg.hpp"

namespace vshgp {

/// Squared-exponential ARD kernel parameters, stored in the log domain.
///
/// Parameter order wherever a flat vector is used:
///   [log signal_variance, log l_1, ..., log l_d].
struct KernelParams {
  double log_signal_variance = 0.0;
  VectorXd log_lengthscales;

  static KernelParams from_natural(double signal_variance,
                                   const VectorXd &lengthscales) {
    if (!(signal_variance > 0.0) || !(lengthscales.array() > 0.0).all()) {
      throw ConfigError("KernelParams: signal variance and lengthscales must be positive");
    }
    KernelParams p;
    p.log_signal_variance = std::log(signal_variance);
    p.log_lengthscales = lengthscales.array().log().matrix();
    return p;
  }

  static KernelParams isotropic(Index dim, double signal_variance,
                                double lengthscale) {
    return from_natural(signal_variance, VectorXd::Constant(dim, lengthscale));
  }

  Index dim() const { return log_lengthscales.size(); }
  Index num_params() const { return 1 + dim(); }
  double signal_variance() const { return std::exp(log_signal_variance); }
  VectorXd lengthscales() const {
    return log_lengthscales.array().exp().matrix();
  }

  VectorXd flat() const {
    VectorXd v(num_params());
    v(0) = log_signal_variance;
    v.tail(dim()) = log_lengthscales;
    return v;
  }

  void set_flat(const Eigen::Ref<const VectorXd> &v) {
    require_dims("KernelParams::set_flat", num_params(), v.size());
    log_signal_variance = v(0);
    log_lengthscales = v.tail(dim());
  }
};

inline double kernel_eval(const Eigen::Ref<const VectorXd> &x,
                          const Eigen::Ref<const VectorXd> &x2,
                          const KernelParams &params) {
  require_dims("kernel_eval: x vs lengthscales", params.dim(), x.size());
  require_dims("kernel_eval: x2 vs lengthscales", params.dim(), x2.size());
  double dist = 0.0;
  for (Index k = 0; k < x.size(); ++k) {
    const double t = (x(k) - x2(k)) / std::exp(params.log_lengthscales(k));
    dist += t * t;
  }
  return params.signal_variance() * std::exp(-0.5 * dist);
}

namespace detail {

inline void check_columns(const MatrixXd &A, const MatrixXd &B,
                          const KernelParams &params) {
  require_dims("kernel: columns of A vs lengthscales", params.dim(), A.cols());
  require_dims("kernel: columns of B vs lengthscales", params.dim(), B.cols());
}

/// Scaled squared difference ((a_i - b_j) / l_k)^2 for one dimension.
inline MatrixXd scaled_sq_diff(const MatrixXd &A, const MatrixXd &B, Index k,
                               double lengthscale) {
  const Index p = A.rows(), q = B.rows();
  MatrixXd out(p, q);
  for (Index j = 0; j < q; ++j) {
    const double b = B(j, k);
    for (Index i = 0; i < p; ++i) {
      const double t = (A(i, k) - b) / lengthscale;
      out(i, j) = t * t;
    }
  }
  return out;
}

} // namespace detail

/// K(i, j) = k(row_i(A), row_j(B)). Distances accumulated one dimension at a
/// time, so kernel_matrix(A, B) is the exact transpose of kernel_matrix(B, A).
inline MatrixXd kernel_matrix(const MatrixXd &A, const MatrixXd &B,
                              const KernelParams &params) {
  detail::check_columns(A, B, params);
  const Index p = A.rows(), q = B.rows();
  MatrixXd dist = MatrixXd::Zero(p, q);
  for (Index k = 0; k < params.dim(); ++k) {
    const double l = std::exp(params.log_lengthscales(k));
    for (Index j = 0; j < q; ++j) {
      const double b = B(j, k);
      for (Index i = 0; i < p; ++i) {
        const double t = (A(i, k) - b) / l;
        dist(i, j) += t * t;
      }
    }
  }
  return params.signal_variance() * (-0.5 * dist.array()).exp().matrix();
}

/// Diagonal of k(X, X); constant sigma_s^2 for a stationary kernel.
inline VectorXd kernel_diag(const MatrixXd &X, const KernelParams &params) {
  return VectorXd::Constant(X.rows(), params.signal_variance());
}

/// dK/d(log sigma_s^2) followed by dK/d(log l_k), k = 1..d.
inline std::vector<MatrixXd> kernel_param_grads(const MatrixXd &A,
                                                const MatrixXd &B,
                                                const KernelParams &params) {
  const MatrixXd K = kernel_matrix(A, B, params);
  std::vector<MatrixXd> out;
  out.reserve(static_cast<std::size_t>(params.num_params()));
  out.push_back(K);
  for (Index k = 0; k < params.dim(); ++k) {
    const double l = std::exp(params.log_lengthscales(k));
    // d/dlog l of exp(-0.5 (a-b)^2 / l^2) = (a-b)^2 / l^2 * k
    out.push_back(K.cwiseProduct(detail::scaled_sq_diff(A, B, k, l)));
  }
  return out;
}

enum class Side { Left, Right };

/// Packed derivatives of K(A, B) with respect to the coordinates of one side.
///
/// per_dim[k](i, j) is dK(i, j)/dA(i, k) for Side::Left, or dK(i, j)/dB(j, k)
/// for Side::Right. Every other entry of the full dK/dx derivative is zero, so
/// a gradient G : dK/dA(i, k) reduces to the row sum of G .* per_dim[k].
struct InputGradients {
  Side side = Side::Left;
  std::vector<MatrixXd> per_dim;
};

inline InputGradients kernel_input_grads(const MatrixXd &A, const MatrixXd &B,
                                         const KernelParams &params,
                                         Side which) {
  const MatrixXd K = kernel_matrix(A, B, params);
  InputGradients out;
  out.side = which;
  out.per_dim.reserve(static_cast<std::size_t>(params.dim()));
  const double sign = which == Side::Left ? -1.0 : 1.0;
  for (Index k = 0; k < params.dim(); ++k) {
    const double l2 = std::exp(2.0 * params.log_lengthscales(k));
    MatrixXd D(A.rows(), B.rows());
    for (Index j = 0; j < B.rows(); ++j) {
      for (Index i = 0; i < A.rows(); ++i) {
        D(i, j) = sign * (A(i, k) - B(j, k)) / l2 * K(i, j);
      }
    }
    out.per_dim.push_back(std::move(D));
  }
  return out;
}

/// Upstream derivatives of a scalar objective with respect to the kernel
/// matrices of one latent function: the cross block K(X, Z), the inducing
/// block K(Z, Z) and the training diagonal diag K(X, X).
struct KernelAdjoint {
  MatrixXd cross;    // n x p, dF/dK(X, Z)
  MatrixXd inducing; // p x p, dF/dK(Z, Z), treated entrywise
  VectorXd diag;     // n,     dF/d diag K(X, X)
};

struct KernelBlockGradient {
  VectorXd params;  // log-domain kernel parameters
  MatrixXd inputs;  // p x d, with respect to Z
};

/// Chains a KernelAdjoint through the kernel to the kernel parameters and to
/// the inducing coordinates Z. Inducing gradients are accumulated one input
/// dimension at a time over all inducing points.
inline KernelBlockGradient contract_adjoint(const MatrixXd &X,
                                            const MatrixXd &Z,
                                            const KernelParams &params,
                                            const KernelAdjoint &adj) {
  require_dims("contract_adjoint: cross rows", X.rows(), adj.cross.rows());
  require_dims("contract_adjoint: cross cols", Z.rows(), adj.cross.cols());
  require_dims("contract_adjoint: inducing size", Z.rows(), adj.inducing.rows());
  KernelBlockGradient out;
  out.params = VectorXd::Zero(params.num_params());

  const auto cross_grads = kernel_param_grads(X, Z, params);
  const auto inducing_grads = kernel_param_grads(Z, Z, params);
  for (Index t = 0; t < params.num_params(); ++t) {
    const auto ts = static_cast<std::size_t>(t);
    out.params(t) = adj.cross.cwiseProduct(cross_grads[ts]).sum() +
                    adj.inducing.cwiseProduct(inducing_grads[ts]).sum();
  }
  // diag K(X, X) = sigma_s^2 depends only on the signal variance.
  if (adj.diag.size() > 0) {
    out.params(0) += adj.diag.sum() * params.signal_variance();
  }

  out.inputs = MatrixXd::Zero(Z.rows(), Z.cols());
  const auto cross_in = kernel_input_grads(X, Z, params, Side::Right);
  const auto zz_left = kernel_input_grads(Z, Z, params, Side::Left);
  const auto zz_right = kernel_input_grads(Z, Z, params, Side::Right);
  for (Index k = 0; k < params.dim(); ++k) {
    const auto ks = static_cast<std::size_t>(k);
    out.inputs.col(k) =
        adj.cross.cwiseProduct(cross_in.per_dim[ks]).colwise().sum().transpose() +
        adj.inducing.cwiseProduct(zz_left.per_dim[ks]).rowwise().sum() +
        adj.inducing.cwiseProduct(zz_right.per_dim[ks]).colwise().sum().transpose();
  }
  return out;
}

} // namespace vshgp
