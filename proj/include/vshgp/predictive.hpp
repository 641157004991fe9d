#pragma once

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <limits>
#include <map>
#include <mutex>
#include <numbers>

#include "vshgp/error.hpp"
#include "vshgp/linalg.hpp"

namespace vshgp {

/// Latent posterior moments at one test input.
struct LatentPoint {
  double mu_f = 0.0;
  double var_f = 1.0;
  double mu_g = 0.0;
  double var_g = 1.0;
};

/// Latent posterior moments for a batch of test inputs (one entry per row).
struct LatentPrediction {
  VectorXd mu_f;
  VectorXd var_f;
  VectorXd mu_g;
  VectorXd var_g;

  Index size() const { return mu_f.size(); }
  LatentPoint at(Index i) const { return {mu_f(i), var_f(i), mu_g(i), var_g(i)}; }
};

struct PredictiveMoments {
  double mean = 0.0;
  double var = 0.0;
};

/// Exponent beyond which exp(mu_g + var_g / 2) is treated as divergent.
inline constexpr double kNoiseExponentLimit = 700.0;

inline double noise_variance(double mu_g, double var_g) {
  const double e = mu_g + 0.5 * var_g;
  if (!(e <= kNoiseExponentLimit)) {
    throw NumericalError("divergent noise model: mu_g + var_g/2 = " +
                         std::to_string(e) + " exceeds " +
                         std::to_string(kNoiseExponentLimit));
  }
  return std::exp(e);
}

/// Mean and variance of the non-Gaussian predictive q(y*).
inline PredictiveMoments predict_y(const LatentPoint &p) {
  return {p.mu_f, p.var_f + noise_variance(p.mu_g, p.var_g)};
}

/// Gauss-Hermite rule for the weight exp(-x^2); nodes ascending.
struct GaussHermiteRule {
  VectorXd nodes;
  VectorXd weights;
};

/// Computes the n-point rule by Newton iteration on the orthonormal Hermite
/// recurrence, seeded with the classical asymptotic root estimates.
inline GaussHermiteRule compute_gauss_hermite(int n) {
  if (n < 1) {
    throw ConfigError("Gauss-Hermite: node count must be >= 1");
  }
  constexpr double pim4 = 0.7511255444649425; // pi^(-1/4)
  GaussHermiteRule rule;
  rule.nodes.resize(n);
  rule.weights.resize(n);
  const int half = (n + 1) / 2;
  double z = 0.0;
  for (int i = 0; i < half; ++i) {
    if (i == 0) {
      z = std::sqrt(2.0 * n + 1.0) - 1.85575 * std::pow(2.0 * n + 1.0, -0.16667);
    } else if (i == 1) {
      z -= 1.14 * std::pow(static_cast<double>(n), 0.426) / z;
    } else if (i == 2) {
      z = 1.86 * z - 0.86 * rule.nodes(0);
    } else if (i == 3) {
      z = 1.91 * z - 0.91 * rule.nodes(1);
    } else {
      z = 2.0 * z - rule.nodes(i - 2);
    }
    double pp = 0.0;
    bool converged = false;
    for (int iter = 0; iter < 100; ++iter) {
      double p1 = pim4, p2 = 0.0;
      for (int j = 0; j < n; ++j) {
        const double p3 = p2;
        p2 = p1;
        p1 = z * std::sqrt(2.0 / (j + 1)) * p2 - std::sqrt(static_cast<double>(j) / (j + 1)) * p3;
      }
      pp = std::sqrt(2.0 * n) * p2;
      const double z1 = z;
      z = z1 - p1 / pp;
      if (std::abs(z - z1) <= 1e-15 * std::max(1.0, std::abs(z))) {
        converged = true;
        break;
      }
    }
    if (!converged) {
      throw NumericalError("Gauss-Hermite: Newton iteration did not converge");
    }
    // Stored temporarily in descending order; flipped below.
    rule.nodes(i) = z;
    rule.nodes(n - 1 - i) = -z;
    rule.weights(i) = 2.0 / (pp * pp);
    rule.weights(n - 1 - i) = rule.weights(i);
  }
  rule.nodes.reverseInPlace();
  rule.weights.reverseInPlace();
  return rule;
}

/// Cached rules; computing a 64-node rule costs O(n^2) per call otherwise.
inline const GaussHermiteRule &gauss_hermite(int n) {
  static std::mutex mutex;
  static std::map<int, GaussHermiteRule> cache;
  std::lock_guard<std::mutex> lock(mutex);
  auto it = cache.find(n);
  if (it == cache.end()) {
    it = cache.emplace(n, compute_gauss_hermite(n)).first;
  }
  return it->second;
}

inline constexpr int kDefaultQuadratureNodes = 20;

inline double gaussian_log_density(double y, double mean, double var) {
  const double r = y - mean;
  return -0.5 * (kLog2Pi + std::log(var) + r * r / var);
}

/// log of  int N(y | mu_f, e^g + var_f) N(g | mu_g, var_g) dg, by
/// Gauss-Hermite quadrature evaluated in log-sum-exp form.
inline double log_predictive_density(const LatentPoint &p, double y,
                                     int nodes = kDefaultQuadratureNodes) {
  const auto &rule = gauss_hermite(nodes);
  const double scale = std::sqrt(2.0 * std::max(p.var_g, 0.0));
  VectorXd terms(nodes);
  for (int k = 0; k < nodes; ++k) {
    const double g = p.mu_g + scale * rule.nodes(k);
    if (g > kNoiseExponentLimit) {
      throw NumericalError("divergent noise model in predictive density: g = " +
                           std::to_string(g));
    }
    terms(k) = std::log(rule.weights(k)) +
               gaussian_log_density(y, p.mu_f, std::exp(g) + p.var_f);
  }
  const double top = terms.maxCoeff();
  const double lse = top + std::log((terms.array() - top).exp().sum());
  return lse - 0.5 * std::log(std::numbers::pi);
}

/// Log density of the Gaussian with the moments of predict_y.
inline double log_predictive_density_gaussian(const LatentPoint &p, double y) {
  const auto mom = predict_y(p);
  return gaussian_log_density(y, mom.mean, mom.var);
}

} // namespace vshgp
