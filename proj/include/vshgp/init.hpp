#pragma once

// Default initialization of model parameters from (normalized) data.

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <cstdint>

#include "vshgp/dvshgp.hpp"
#include "vshgp/error.hpp"
#include "vshgp/kmeans.hpp"
#include "vshgp/model.hpp"
#include "vshgp/seeds.hpp"

namespace vshgp {

struct InitOptions {
  double lengthscale = 1.0;
  double signal_variance_f = 1.0;
  double signal_variance_g = 1.0;
};

/// Kernels at the given lengthscale, mu0 = log(var(y) / 2).
inline HyperParams init_hyper(Index d, const VectorXd &y, const InitOptions &opt = {}) {
  if (y.size() < 2) {
    throw ConfigError("init: need at least two targets");
  }
  const double var = (y.array() - y.mean()).square().sum() / static_cast<double>(y.size() - 1);
  if (!(var > 0.0)) {
    throw ConfigError("init: targets have zero variance");
  }
  HyperParams h;
  h.kf = KernelParams::isotropic(d, opt.signal_variance_f, opt.lengthscale);
  h.kg = KernelParams::isotropic(d, opt.signal_variance_g, opt.lengthscale);
  h.mu0 = std::log(0.5 * var);
  return h;
}

inline VshgpModel init_vshgp(const MatrixXd &X, const VectorXd &y, Index m, Index u,
                             std::uint64_t seed, const InitOptions &opt = {}) {
  require_dims("init: targets vs inputs", X.rows(), y.size());
  VshgpModel model;
  model.train_inputs = X;
  model.train_targets = y;
  model.hyper = init_hyper(X.cols(), y, opt);
  model.inducing.Xm = kmeans_centroids(X, m, derive_seed(seed, 11));
  model.inducing.Xu = kmeans_centroids(X, u, derive_seed(seed, 12));
  model.lambda_log = default_lambda_log(X.rows());
  return model;
}

/// Expert sizes; zero entries take the defaults n0 = n / M and
/// m0 = u0 = min(n0 / 2, 300).
struct DvshgpSizes {
  Index M = 1;
  Index m0 = 0;
  Index u0 = 0;

  DvshgpSizes resolved(Index n) const {
    if (M < 1 || M > n) {
      throw ConfigError("dvshgp: expert count must lie in [1, n]");
    }
    DvshgpSizes r = *this;
    const Index n0 = n / M;
    const Index def = std::max<Index>(1, std::min<Index>(n0 / 2, 300));
    if (r.m0 <= 0) r.m0 = def;
    if (r.u0 <= 0) r.u0 = def;
    return r;
  }
};

struct DvshgpInit {
  DvshgpModel model;
  Partition partition;
  DvshgpSizes sizes;
};

/// Partitions by k-means (repairing clusters smaller than max(m0, u0)) and
/// initializes each expert's inducing inputs at centroids of its shard.
inline DvshgpInit init_dvshgp(const MatrixXd &X, const VectorXd &y, const DvshgpSizes &sizes,
                              std::uint64_t seed, const InitOptions &opt = {}) {
  require_dims("init: targets vs inputs", X.rows(), y.size());
  DvshgpInit out;
  out.sizes = sizes.resolved(X.rows());
  const Index need = std::max(out.sizes.m0, out.sizes.u0);
  out.partition = kmeans_partition(X, out.sizes.M, derive_seed(seed, kStreamPartition), need);
  out.model.shared = init_hyper(X.cols(), y, opt);
  const auto members = out.partition.members();
  for (std::size_t i = 0; i < members.size(); ++i) {
    ExpertModel e;
    e.indices = members[i];
    const auto ni = static_cast<Index>(e.indices.size());
    e.X.resize(ni, X.cols());
    e.y.resize(ni);
    for (Index r = 0; r < ni; ++r) {
      e.X.row(r) = X.row(e.indices[static_cast<std::size_t>(r)]);
      e.y(r) = y(e.indices[static_cast<std::size_t>(r)]);
    }
    const std::uint64_t s = derive_seed(seed, kStreamInducing + 100 * (i + 1));
    e.inducing.Xm = kmeans_centroids(e.X, std::min(out.sizes.m0, ni), s);
    e.inducing.Xu = kmeans_centroids(e.X, std::min(out.sizes.u0, ni), s + 1);
    e.lambda_log = default_lambda_log(ni);
    out.model.experts.push_back(std::move(e));
  }
  return out;
}

} // namespace vshgp
