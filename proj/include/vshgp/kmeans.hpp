#pragma once

#include <Eigen/Dense>

#include <cstdint>
#include <limits>
#include <random>
#include <string>
#include <vector>

#include "vshgp/error.hpp"
#include "vshgp/linalg.hpp"

namespace vshgp {

/// Disjoint assignment of training rows to clusters (0-based indices).
struct Partition {
  std::vector<Index> assignments;
  MatrixXd centroids;  // effective_M x d
  Index requested_M = 0;
  int lloyd_iterations = 0;

  Index size() const { return centroids.rows(); }

  std::vector<std::vector<Index>> members() const {
    std::vector<std::vector<Index>> out(static_cast<std::size_t>(size()));
    for (std::size_t i = 0; i < assignments.size(); ++i) {
      out[static_cast<std::size_t>(assignments[i])].push_back(static_cast<Index>(i));
    }
    return out;
  }
};

namespace detail {

inline Index nearest_row(const MatrixXd &C, const Eigen::Ref<const VectorXd> &x,
                         Index skip = -1) {
  Index best = -1;
  double best_d = std::numeric_limits<double>::infinity();
  for (Index k = 0; k < C.rows(); ++k) {
    if (k == skip) continue;
    const double d = (C.row(k).transpose() - x).squaredNorm();
    if (d < best_d) {
      best_d = d;
      best = k;
    }
  }
  return best;
}

inline MatrixXd kmeanspp_seed(const MatrixXd &X, Index M, std::mt19937_64 &rng) {
  const Index n = X.rows();
  MatrixXd C(M, X.cols());
  C.row(0) = X.row(std::uniform_int_distribution<Index>(0, n - 1)(rng));
  VectorXd d2 = (X.rowwise() - C.row(0)).rowwise().squaredNorm();
  for (Index k = 1; k < M; ++k) {
    const double total = d2.sum();
    Index pick = 0;
    if (total > 0.0) {
      double r = std::uniform_real_distribution<>(0.0, total)(rng);
      for (pick = 0; pick < n - 1; ++pick) {
        r -= d2(pick);
        if (r < 0.0) break;
      }
    } else {
      pick = std::uniform_int_distribution<Index>(0, n - 1)(rng);
    }
    C.row(k) = X.row(pick);
    d2 = d2.cwiseMin((X.rowwise() - C.row(k)).rowwise().squaredNorm());
  }
  return C;
}

inline MatrixXd recompute_centroids(const MatrixXd &X, const std::vector<Index> &assign,
                                    const MatrixXd &previous) {
  MatrixXd C = MatrixXd::Zero(previous.rows(), X.cols());
  VectorXd count = VectorXd::Zero(previous.rows());
  for (Index i = 0; i < X.rows(); ++i) {
    C.row(assign[static_cast<std::size_t>(i)]) += X.row(i);
    count(assign[static_cast<std::size_t>(i)]) += 1.0;
  }
  for (Index k = 0; k < C.rows(); ++k) {
    if (count(k) > 0) {
      C.row(k) /= count(k);
    } else {
      C.row(k) = previous.row(k); // empty cluster keeps its centre
    }
  }
  return C;
}

} // namespace detail

/// k-means++ seeding followed by Lloyd iterations (at most 100). Clusters
/// with fewer than min_size points are merged into the cluster of the
/// nearest other centroid, smallest first, until all clusters are large
/// enough. min_size = 0 disables the repair and keeps empty clusters.
inline Partition kmeans_partition(const MatrixXd &X, Index M, std::uint64_t seed,
                                  Index min_size = 1) {
  const Index n = X.rows();
  if (M < 1) {
    throw ConfigError("kmeans: M must be >= 1");
  }
  if (M > n) {
    throw ConfigError("kmeans: M = " + std::to_string(M) + " exceeds n = " + std::to_string(n));
  }
  if (min_size > n) {
    throw ConfigError("kmeans: minimum cluster size " + std::to_string(min_size) +
                      " exceeds n = " + std::to_string(n));
  }
  std::mt19937_64 rng(seed);
  Partition p;
  p.requested_M = M;
  p.centroids = detail::kmeanspp_seed(X, M, rng);
  p.assignments.assign(static_cast<std::size_t>(n), -1);

  for (int it = 0; it < 100; ++it) {
    bool changed = false;
    for (Index i = 0; i < n; ++i) {
      const Index k = detail::nearest_row(p.centroids, X.row(i).transpose());
      if (p.assignments[static_cast<std::size_t>(i)] != k) {
        p.assignments[static_cast<std::size_t>(i)] = k;
        changed = true;
      }
    }
    p.lloyd_iterations = it + 1;
    if (!changed) break;
    p.centroids = detail::recompute_centroids(X, p.assignments, p.centroids);
  }

  // Drop empty clusters, then merge undersized ones.
  while (min_size > 0) {
    std::vector<Index> count(static_cast<std::size_t>(p.centroids.rows()), 0);
    for (Index a : p.assignments) ++count[static_cast<std::size_t>(a)];
    Index smallest = -1;
    for (Index k = 0; k < p.centroids.rows(); ++k) {
      const Index c = count[static_cast<std::size_t>(k)];
      if ((c == 0 || c < min_size) &&
          (smallest < 0 || c < count[static_cast<std::size_t>(smallest)])) {
        smallest = k;
      }
    }
    if (smallest < 0 || p.centroids.rows() == 1) break;
    const Index target =
        detail::nearest_row(p.centroids, p.centroids.row(smallest).transpose(), smallest);
    for (Index &a : p.assignments) {
      if (a == smallest) a = target;
      if (a > smallest) --a;
    }
    const Index rows = p.centroids.rows();
    MatrixXd C(rows - 1, X.cols());
    for (Index k = 0, r = 0; k < rows; ++k) {
      if (k != smallest) C.row(r++) = p.centroids.row(k);
    }
    p.centroids = detail::recompute_centroids(X, p.assignments, C);
  }
  return p;
}

/// k centres for inducing-point initialization (no repair).
inline MatrixXd kmeans_centroids(const MatrixXd &X, Index k, std::uint64_t seed) {
  return kmeans_partition(X, k, seed, 0).centroids;
}

} // namespace vshgp
