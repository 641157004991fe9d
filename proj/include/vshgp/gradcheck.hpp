#pragma once

// Central finite-difference checks of every analytic gradient block, on
// small random model states. Used by the CLI and the acceptance suite.

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <functional>
#include <random>
#include <string>
#include <vector>

#include "vshgp/core.hpp"
#include "vshgp/svshgp.hpp"
#include "vshgp/training.hpp"

namespace vshgp {

struct GradCheckOptions {
  unsigned seeds = 20;
  unsigned first_seed = 0;
  double step = 1e-5;
  double tolerance = 1e-4;
  double scale = 1e-3;    // absolute floor of the relative error denominator
  std::string flip_block; // "suite/block": negate that analytic block (fixture)
};

struct GradCheckRow {
  std::string suite;
  std::string block;
  unsigned seeds = 0;
  double worst = 0.0;
  unsigned worst_seed = 0;
  bool pass = true;
};

namespace gradcheck_detail {

inline MatrixXd uniform(std::mt19937_64 &rng, Index r, Index c, double lo, double hi) {
  std::uniform_real_distribution<double> d(lo, hi);
  MatrixXd A(r, c);
  for (Index j = 0; j < c; ++j) {
    for (Index i = 0; i < r; ++i) A(i, j) = d(rng);
  }
  return A;
}

inline VshgpModel random_vshgp(std::uint64_t seed, Index n, Index m, Index u, Index d) {
  std::mt19937_64 rng(seed);
  VshgpModel s;
  s.train_inputs = uniform(rng, n, d, -2.0, 2.0);
  s.train_targets = uniform(rng, n, 1, -1.5, 1.5).col(0);
  s.hyper.kf.log_signal_variance = std::log(uniform(rng, 1, 1, 0.6, 1.5)(0));
  s.hyper.kf.log_lengthscales = uniform(rng, d, 1, std::log(0.8), std::log(1.8)).col(0);
  s.hyper.kg.log_signal_variance = std::log(uniform(rng, 1, 1, 0.3, 1.0)(0));
  s.hyper.kg.log_lengthscales = uniform(rng, d, 1, std::log(0.8), std::log(1.8)).col(0);
  s.hyper.mu0 = uniform(rng, 1, 1, -2.0, -0.5)(0);
  s.inducing.Xm = uniform(rng, m, d, -2.2, 2.2);
  s.inducing.Xu = uniform(rng, u, d, -2.2, 2.2);
  s.lambda_log = uniform(rng, n, 1, std::log(0.2), std::log(2.0)).col(0);
  return s;
}

inline MatrixXd random_lower(std::mt19937_64 &rng, Index k, double scale) {
  MatrixXd L = uniform(rng, k, k, -0.3 * scale, 0.3 * scale).triangularView<Eigen::Lower>();
  for (Index i = 0; i < k; ++i) L(i, i) = uniform(rng, 1, 1, 0.4 * scale, scale)(0);
  return L;
}

inline SvshgpModel random_svshgp(std::uint64_t seed, Index n, Index m, Index u, Index d) {
  auto s = make_svshgp(random_vshgp(seed, n, m, u, d));
  std::mt19937_64 rng(seed + 1000);
  s.q.mu_m = uniform(rng, m, 1, -1.0, 1.0).col(0);
  s.q.L_m = random_lower(rng, m, 0.7);
  s.q.mu_u = uniform(rng, u, 1, -1.0, 1.0).col(0).array() + s.hyper.mu0;
  s.q.L_u = random_lower(rng, u, 0.5);
  return s;
}

inline VectorXd central(const std::function<double(const VectorXd &)> &f, VectorXd x,
                        double h) {
  VectorXd g(x.size());
  for (Index i = 0; i < x.size(); ++i) {
    const double x0 = x(i);
    x(i) = x0 + h;
    const double fp = f(x);
    x(i) = x0 - h;
    const double fm = f(x);
    x(i) = x0;
    g(i) = (fp - fm) / (2.0 * h);
  }
  return g;
}

/// Derivative with respect to a symmetric matrix, in the convention of
/// dF/dSigma (entrywise, symmetric): off-diagonal pairs move together and
/// the result is halved.
inline MatrixXd central_sym(const std::function<double(const MatrixXd &)> &f, const MatrixXd &S,
                            double h) {
  MatrixXd G(S.rows(), S.cols());
  for (Index j = 0; j < S.cols(); ++j) {
    for (Index i = j; i < S.rows(); ++i) {
      MatrixXd Sp = S, Sm = S;
      Sp(i, j) += h;
      Sm(i, j) -= h;
      if (i != j) {
        Sp(j, i) += h;
        Sm(j, i) -= h;
      }
      const double d = (f(Sp) - f(Sm)) / (2.0 * h);
      G(i, j) = G(j, i) = i == j ? d : 0.5 * d;
    }
  }
  return G;
}

inline double mixed_error(const VectorXd &a, const VectorXd &b, double scale) {
  double worst = 0.0;
  for (Index i = 0; i < a.size(); ++i) {
    const double den = std::max({std::abs(a(i)), std::abs(b(i)), scale});
    worst = std::max(worst, std::abs(a(i) - b(i)) / den);
  }
  return worst;
}

inline MatrixXd chol(const MatrixXd &S) {
  Eigen::LLT<MatrixXd> llt(S);
  if (llt.info() != Eigen::Success) {
    throw NumericalError("gradcheck: perturbed covariance lost definiteness");
  }
  return llt.matrixL();
}

class Recorder {
public:
  Recorder(const GradCheckOptions &opt, std::vector<GradCheckRow> &rows)
      : opt_(opt), rows_(rows) {}

  void add(const std::string &suite, const std::string &block, unsigned seed,
           VectorXd analytic, const VectorXd &numeric) {
    if (opt_.flip_block == suite + "/" + block) {
      analytic = -analytic;
    }
    const double err = mixed_error(analytic, numeric, opt_.scale);
    auto it = std::find_if(rows_.begin(), rows_.end(), [&](const GradCheckRow &r) {
      return r.suite == suite && r.block == block;
    });
    if (it == rows_.end()) {
      rows_.push_back({suite, block, 0, 0.0, seed, true});
      it = rows_.end() - 1;
    }
    ++it->seeds;
    if (!(err <= it->worst)) {
      it->worst = err;
      it->worst_seed = seed;
    }
    it->pass = it->pass && err <= opt_.tolerance;
  }

private:
  const GradCheckOptions &opt_;
  std::vector<GradCheckRow> &rows_;
};

inline void check_vshgp(std::uint64_t seed, Recorder &rec, double h) {
  const auto s = static_cast<unsigned>(seed);
  const auto model = random_vshgp(seed, 10, 4, 4, 1 + seed % 3);
  const auto an = elbo_grads(model);
  auto block = [&](const char *name, ParamBlocks b) {
    const VectorXd fd = central(
        [&](const VectorXd &x) {
          VshgpModel w = model;
          unpack_params(x, b, w);
          return elbo(w).total;
        },
        pack_params(model, b), h);
    rec.add("vshgp", name, s, pack_gradient(an, b), fd);
  };
  const ParamBlocks none{false, false, false, false, false, false};
  ParamBlocks b = none;
  b.lambda = true;
  block("lambda", b);
  b = none;
  b.kf = true;
  block("theta_f", b);
  b = none;
  b.kg = true;
  block("theta_g", b);
  b = none;
  b.mu0 = true;
  block("mu0", b);
  b = none;
  b.Xm = true;
  block("Xm", b);
  b = none;
  b.Xu = true;
  block("Xu", b);
}

inline void check_svshgp(std::uint64_t seed, Recorder &rec, double h) {
  const auto sd = static_cast<unsigned>(seed);
  const auto s = random_svshgp(seed, 10, 3, 4, 2);
  const Batch batch = seed % 2 ? full_batch(10) : Batch{0, 2, 3, 7, 8};
  const auto ev = evaluate_factorized(s, batch, true, true);
  auto with = [&](const std::function<void(SvshgpModel &)> &edit) {
    SvshgpModel t = s;
    edit(t);
    return elbo_factorized(t, batch);
  };
  rec.add("svshgp", "mu_m", sd, ev.q.mu_m,
          central([&](const VectorXd &x) { return with([&](SvshgpModel &t) { t.q.mu_m = x; }); },
                  s.q.mu_m, h));
  rec.add("svshgp", "mu_u", sd, ev.q.mu_u,
          central([&](const VectorXd &x) { return with([&](SvshgpModel &t) { t.q.mu_u = x; }); },
                  s.q.mu_u, h));
  rec.add("svshgp", "Sigma_m", sd, ev.q.Sigma_m.reshaped(),
          central_sym(
              [&](const MatrixXd &S) { return with([&](SvshgpModel &t) { t.q.L_m = chol(S); }); },
              s.q.Sigma_m(), h)
              .reshaped());
  rec.add("svshgp", "Sigma_u", sd, ev.q.Sigma_u.reshaped(),
          central_sym(
              [&](const MatrixXd &S) { return with([&](SvshgpModel &t) { t.q.L_u = chol(S); }); },
              s.q.Sigma_u(), h)
              .reshaped());
  rec.add("svshgp", "theta_f", sd, ev.hyper.kf,
          central([&](const VectorXd &x) {
            return with([&](SvshgpModel &t) { t.hyper.kf.set_flat(x); });
          }, s.hyper.kf.flat(), h));
  rec.add("svshgp", "theta_g", sd, ev.hyper.kg,
          central([&](const VectorXd &x) {
            return with([&](SvshgpModel &t) { t.hyper.kg.set_flat(x); });
          }, s.hyper.kg.flat(), h));
  rec.add("svshgp", "mu0", sd, VectorXd::Constant(1, ev.hyper.mu0),
          central([&](const VectorXd &x) {
            return with([&](SvshgpModel &t) { t.hyper.mu0 = x(0); });
          }, VectorXd::Constant(1, s.hyper.mu0), h));
  const Index m = s.inducing.Xm.rows(), u = s.inducing.Xu.rows();
  rec.add("svshgp", "Xm", sd, ev.hyper.Xm.reshaped(),
          central([&](const VectorXd &x) {
            return with([&](SvshgpModel &t) { t.inducing.Xm = x.reshaped(m, x.size() / m); });
          }, s.inducing.Xm.reshaped(), h));
  rec.add("svshgp", "Xu", sd, ev.hyper.Xu.reshaped(),
          central([&](const VectorXd &x) {
            return with([&](SvshgpModel &t) { t.inducing.Xu = x.reshaped(u, x.size() / u); });
          }, s.inducing.Xu.reshaped(), h));
}

} // namespace gradcheck_detail

/// One row per gradient block, each checked on opt.seeds random states.
inline std::vector<GradCheckRow> check_gradients(const GradCheckOptions &opt = {}) {
  std::vector<GradCheckRow> rows;
  gradcheck_detail::Recorder rec(opt, rows);
  for (unsigned k = 0; k < opt.seeds; ++k) {
    gradcheck_detail::check_vshgp(opt.first_seed + k, rec, opt.step);
  }
  for (unsigned k = 0; k < opt.seeds; ++k) {
    gradcheck_detail::check_svshgp(opt.first_seed + k, rec, opt.step);
  }
  return rows;
}

} // namespace vshgp
