#pragma once

#include <Eigen/Dense>

#include <algorithm>
#include <chrono>
#include <cmath>
#include <exception>
#include <functional>
#include <limits>
#include <string>
#include <vector>

#include "vshgp/error.hpp"
#include "vshgp/linalg.hpp"

namespace vshgp {

struct GammaSchedule {
  double gamma_initial = 1e-4;
  double gamma_final = 0.1;
  double ramp_iterations = 5.0;
};

struct OptimizerConfig {
  int max_line_searches = 100;
  double c1 = 1e-4; // sufficient increase
  double c2 = 0.1;  // curvature
  double adam_step = 0.01;
  GammaSchedule schedule;

  void validate() const {
    if (max_line_searches < 0) {
      throw ConfigError("optimizer: max_line_searches must be >= 0");
    }
    if (!(0.0 < c1 && c1 < c2 && c2 < 1.0)) {
      throw ConfigError("optimizer: Wolfe constants need 0 < c1 < c2 < 1");
    }
    if (!(adam_step > 0.0)) {
      throw ConfigError("optimizer: adam_step must be > 0");
    }
    if (!(schedule.gamma_initial > 0.0) || !(schedule.gamma_final > 0.0) ||
        schedule.gamma_final > 1.0 || schedule.ramp_iterations < 0.0) {
      throw ConfigError("optimizer: gamma schedule needs 0 < gamma <= 1 and ramp >= 0");
    }
  }
};

/// Log-linear ramp from gamma_initial at t = 0 to gamma_final at
/// t = ramp_iterations, constant afterwards.
inline double gamma_schedule(double t, const GammaSchedule &s = {}) {
  if (t < 0.0) {
    throw ConfigError("gamma_schedule: iteration must be >= 0");
  }
  if (s.ramp_iterations <= 0.0 || t >= s.ramp_iterations) {
    return s.gamma_final;
  }
  if (t == 0.0) {
    return s.gamma_initial;
  }
  const double frac = t / s.ramp_iterations;
  const double lg0 = std::log(s.gamma_initial), lg1 = std::log(s.gamma_final);
  return std::exp(lg0 + (lg1 - lg0) * frac);
}

/// Objective value and gradient at a point; may throw on numerical failure.
using ObjectiveFn = std::function<double(const VectorXd &x, VectorXd &grad)>;

struct CgdResult {
  VectorXd x;
  double value = -std::numeric_limits<double>::infinity();
  std::vector<double> trace; // objective after every accepted step, x0 first
  std::vector<double> trace_seconds; // wall time of each trace entry
  int line_searches = 0;
  int evaluations = 0;
  bool line_search_failed = false;
};

/// Maximizes an objective by Polak-Ribiere conjugate gradients with a
/// Wolfe-condition line search of cubic extrapolation and interpolation.
///
/// The budget counts line searches. A failed line search restarts once
/// along the gradient; a second consecutive failure stops the run. Points at
/// which the callback throws or returns non-finite values are bisected back
/// towards the last good step.
inline CgdResult cgd_maximize(const ObjectiveFn &objective, const VectorXd &x0,
                              int budget, double c1 = 1e-4, double c2 = 0.1) {
  constexpr double INT = 0.1;  // stay this far inside the current bracket
  constexpr double EXT = 10.0; // at most this many times the current step
  constexpr int MAX = 20;      // evaluations per line search
  constexpr double RATIO = 10; // maximum slope ratio
  const double RHO = c1, SIG = c2;

  CgdResult res;
  res.x = x0;
  const auto start = std::chrono::steady_clock::now();
  auto record = [&](double value) {
    res.trace.push_back(value);
    res.trace_seconds.push_back(
        std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count());
  };
  // Internally minimize f = -F.
  auto eval = [&](const VectorXd &x, VectorXd &df) {
    ++res.evaluations;
    VectorXd g(x.size());
    const double F = objective(x, g);
    if (!std::isfinite(F) || !g.allFinite()) {
      throw NumericalError("cgd: non-finite objective or gradient");
    }
    df = -g;
    return -F;
  };

  VectorXd df0;
  double f0;
  try {
    f0 = eval(res.x, df0);
  } catch (const std::exception &e) {
    throw NumericalError(std::string("cgd: objective is not finite at the starting point: ") +
                         e.what());
  }
  res.value = -f0;
  record(res.value);
  if (budget <= 0) {
    return res;
  }

  VectorXd X = res.x;
  VectorXd s = -df0;
  double d0 = -s.squaredNorm();
  double x3 = 1.0 / (1.0 - d0);
  bool ls_failed = false;
  int i = 0;

  while (i < budget) {
    ++i;
    ++res.line_searches;
    VectorXd X0 = X, dF0 = df0;
    double F0 = f0;
    int M = MAX;

    double x1 = 0, f1 = 0, d1 = 0, x2 = 0, f2 = 0, d2 = 0, f3 = 0, d3 = 0;
    double x4 = 0, f4 = 0, d4 = 0;
    VectorXd df3 = df0;
    while (true) {
      x2 = 0;
      f2 = f0;
      d2 = d0;
      f3 = f0;
      df3 = df0;
      bool success = false;
      while (!success && M > 0) {
        try {
          --M;
          f3 = eval(X + x3 * s, df3);
          success = true;
        } catch (const Error &) {
          x3 = 0.5 * (x2 + x3);
        }
      }
      if (f3 < F0) {
        X0 = X + x3 * s;
        F0 = f3;
        dF0 = df3;
      }
      d3 = df3.dot(s);
      if (d3 > SIG * d0 || f3 > f0 + x3 * RHO * d0 || M == 0) {
        break;
      }
      x1 = x2; f1 = f2; d1 = d2;
      x2 = x3; f2 = f3; d2 = d3;
      const double A = 6 * (f1 - f2) + 3 * (d2 + d1) * (x2 - x1);
      const double B = 3 * (f2 - f1) - (2 * d1 + d2) * (x2 - x1);
      const double disc = B * B - A * d1 * (x2 - x1);
      x3 = disc >= 0 ? x1 - d1 * (x2 - x1) * (x2 - x1) / (B + std::sqrt(disc))
                     : std::numeric_limits<double>::quiet_NaN();
      if (!std::isfinite(x3) || x3 < 0) {
        x3 = x2 * EXT;
      } else if (x3 > x2 * EXT) {
        x3 = x2 * EXT;
      } else if (x3 < x2 + INT * (x2 - x1)) {
        x3 = x2 + INT * (x2 - x1);
      }
    }

    while ((std::abs(d3) > -SIG * d0 || f3 > f0 + x3 * RHO * d0) && M > 0) {
      if (d3 > 0 || f3 > f0 + x3 * RHO * d0) {
        x4 = x3; f4 = f3; d4 = d3;
      } else {
        x2 = x3; f2 = f3; d2 = d3;
      }
      if (f4 > f0) {
        x3 = x2 - (0.5 * d2 * (x4 - x2) * (x4 - x2)) / (f4 - f2 - d2 * (x4 - x2));
      } else {
        const double A = 6 * (f2 - f4) / (x4 - x2) + 3 * (d4 + d2);
        const double B = 3 * (f4 - f2) - (2 * d2 + d4) * (x4 - x2);
        x3 = x2 + (std::sqrt(B * B - A * d2 * (x4 - x2) * (x4 - x2)) - B) / A;
      }
      if (!std::isfinite(x3)) {
        x3 = 0.5 * (x2 + x4);
      }
      x3 = std::max(std::min(x3, x4 - INT * (x4 - x2)), x2 + INT * (x4 - x2));
      try {
        f3 = eval(X + x3 * s, df3);
        d3 = df3.dot(s);
      } catch (const Error &) {
        // Treat as an overshoot: shrinks the bracket from the right.
        f3 = std::numeric_limits<double>::infinity();
        d3 = std::numeric_limits<double>::infinity();
      }
      if (f3 < F0) {
        X0 = X + x3 * s;
        F0 = f3;
        dF0 = df3;
      }
      --M;
    }

    if (std::abs(d3) < -SIG * d0 && f3 < f0 + x3 * RHO * d0) {
      X += x3 * s;
      f0 = f3;
      record(-f0);
      const double pr = (df3.squaredNorm() - df0.dot(df3)) / df0.squaredNorm();
      s = pr * s - df3;
      df0 = df3;
      const double d_old = d0;
      d0 = df0.dot(s);
      if (d0 > 0) {
        s = -df0;
        d0 = -s.squaredNorm();
      }
      x3 *= std::min(RATIO, d_old / (d0 - std::numeric_limits<double>::min()));
      ls_failed = false;
    } else {
      if (F0 < f0) {
        record(-F0);
      }
      X = X0;
      f0 = F0;
      df0 = dF0;
      if (ls_failed || i >= budget) {
        res.line_search_failed = ls_failed;
        break;
      }
      s = -df0;
      d0 = -s.squaredNorm();
      x3 = 1.0 / (1.0 - d0);
      ls_failed = true;
    }
    if (d0 == 0.0) {
      break; // stationary point
    }
  }
  res.x = X;
  res.value = -f0;
  return res;
}

/// Adam moment state for one flat parameter vector.
struct AdamState {
  VectorXd m;
  VectorXd v;
  long t = 0;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;

  explicit AdamState(Index size = 0)
      : m(VectorXd::Zero(size)), v(VectorXd::Zero(size)) {}
};

/// One bias-corrected Adam step in ascent form: x += step * m_hat / (sqrt(v_hat) + eps).
inline void adam_step(AdamState &state, VectorXd &x, const VectorXd &grad,
                      double step) {
  require_dims("adam_step: gradient size", x.size(), grad.size());
  if (state.m.size() != x.size()) {
    state = AdamState(x.size());
  }
  if (!grad.allFinite()) {
    throw NumericalError("adam_step: non-finite gradient");
  }
  ++state.t;
  state.m = state.beta1 * state.m + (1.0 - state.beta1) * grad;
  state.v = state.beta2 * state.v + (1.0 - state.beta2) * grad.cwiseAbs2();
  const double bc1 = 1.0 - std::pow(state.beta1, static_cast<double>(state.t));
  const double bc2 = 1.0 - std::pow(state.beta2, static_cast<double>(state.t));
  const auto m_hat = state.m.array() / bc1;
  const auto v_hat = state.v.array() / bc2;
  x.array() += step * m_hat / (v_hat.sqrt() + state.eps);
}

} // namespace vshgp
