// Acceptance suite: one PASS/FAIL line per criterion.
//
//   acceptance                 run every criterion
//   acceptance --criterion N   run criterion N only (exit status 1 on FAIL)

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdarg>
#include <cstdio>
#include <cstdlib>
#include <cstring>
#include <functional>
#include <utility>
#include <numeric>
#include <optional>
#include <random>
#include <string>
#include <thread>
#include <vector>

#include "oracle/dense_oracle.hpp"
#include "test_support.hpp"
#include "vshgp/vshgp.hpp"

using namespace vshgp;
using testing_support::central_diff;
using testing_support::grad_err;
using testing_support::random_model;
using testing_support::rel_err;

namespace {

using clock_type = std::chrono::steady_clock;

double seconds_since(clock_type::time_point t0) {
  return std::chrono::duration<double>(clock_type::now() - t0).count();
}

struct Outcome {
  bool pass = false;
  std::string detail;
};

std::string fmt(const char *f, ...) __attribute__((format(printf, 1, 2)));
std::string fmt(const char *f, ...) {
  char buf[512];
  va_list ap;
  va_start(ap, f);
  std::vsnprintf(buf, sizeof buf, f, ap);
  va_end(ap);
  return buf;
}

// ---------------------------------------------------------------------------
// 1. Structured bound against the dense oracle.

Outcome bound_matches_oracle() {
  const auto t0 = clock_type::now();
  std::mt19937_64 rng(2024);
  double worst = 0.0;
  for (unsigned k = 0; k < 50; ++k) {
    const auto n = std::uniform_int_distribution<Index>(5, 20)(rng);
    const auto m = std::uniform_int_distribution<Index>(1, 5)(rng);
    const auto u = std::uniform_int_distribution<Index>(1, 5)(rng);
    const auto d = std::uniform_int_distribution<Index>(1, 3)(rng);
    const auto model = random_model(1000 + k, n, m, u, d);
    const double got = elbo(model).total;
    const double want = oracle::collapsed_bound(testing_support::to_problem(model)).total;
    worst = std::max(worst, rel_err(got, want, 1e-300));
  }
  const double secs = seconds_since(t0);
  return {worst <= 1e-8 && secs < 10.0,
          fmt("50 instances, worst rel. error %.2e, %.2f s", worst, secs)};
}

// ---------------------------------------------------------------------------
// 2. Every analytic gradient block against central differences.

MatrixXd random_lower(std::mt19937_64 &rng, Index k, double scale) {
  MatrixXd L = testing_support::uniform_matrix(rng, k, k, -0.3, 0.3) * scale;
  L = L.triangularView<Eigen::Lower>();
  for (Index i = 0; i < k; ++i) {
    L(i, i) = scale * std::uniform_real_distribution<>(0.4, 1.0)(rng);
  }
  return L;
}

SvshgpModel random_svshgp(unsigned seed, Index n, Index m, Index u, Index d) {
  auto s = make_svshgp(random_model(seed, n, m, u, d));
  std::mt19937_64 rng(seed + 1000);
  s.q.mu_m = testing_support::uniform_vector(rng, m, -1.0, 1.0);
  s.q.L_m = random_lower(rng, m, 0.7);
  s.q.mu_u = testing_support::uniform_vector(rng, u, -1.0, 1.0).array() + s.hyper.mu0;
  s.q.L_u = random_lower(rng, u, 0.5);
  return s;
}

MatrixXd sym_fd(const std::function<double(const MatrixXd &)> &f, const MatrixXd &S, double h) {
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
      const double v = (f(Sp) - f(Sm)) / (2 * h);
      G(i, j) = G(j, i) = i == j ? v : 0.5 * v;
    }
  }
  return G;
}

MatrixXd chol_of(const MatrixXd &S) { return Eigen::LLT<MatrixXd>(S).matrixL(); }

Outcome gradients_match_fd() {
  const auto t0 = clock_type::now();
  const double h = 1e-5, tol = 1e-4, scale = 1e-3;
  std::vector<std::pair<std::string, double>> worst;
  auto note = [&](const std::string &name, double e) {
    auto it = std::find_if(worst.begin(), worst.end(), [&](auto &w) { return w.first == name; });
    if (it == worst.end()) {
      worst.emplace_back(name, e);
    } else {
      it->second = std::max(it->second, e);
    }
  };
  const ParamBlocks none{false, false, false, false, false, false};
  for (unsigned seed = 0; seed < 20; ++seed) {
    const auto model = random_model(seed, 10, 4, 4, 1 + seed % 3);
    const auto an = elbo_grads(model);
    const std::pair<const char *, bool ParamBlocks::*> blocks[] = {
        {"lambda", &ParamBlocks::lambda}, {"theta_f", &ParamBlocks::kf},
        {"theta_g", &ParamBlocks::kg},    {"mu0", &ParamBlocks::mu0},
        {"X_m", &ParamBlocks::Xm},        {"X_u", &ParamBlocks::Xu}};
    for (const auto &[name, member] : blocks) {
      ParamBlocks b = none;
      b.*member = true;
      const VectorXd fd = central_diff(
          [&](const VectorXd &x) {
            VshgpModel w = model;
            unpack_params(x, b, w);
            return elbo(w).total;
          },
          pack_params(model, b), h);
      note(std::string("F_V/") + name, grad_err(pack_gradient(an, b), fd, scale));
    }
  }
  for (unsigned seed = 0; seed < 20; ++seed) {
    const auto s = random_svshgp(seed, 10, 3, 4, 2);
    const Batch b = seed % 2 ? full_batch(10) : Batch{0, 2, 3, 7, 8};
    const auto ev = evaluate_factorized(s, b, true, true);
    auto with = [&](const std::function<void(SvshgpModel &)> &edit) {
      auto t = s;
      edit(t);
      return elbo_factorized(t, b);
    };
    auto vec_fd = [&](const VectorXd &x0, const std::function<void(SvshgpModel &, const VectorXd &)> &set) {
      return central_diff([&](const VectorXd &x) { return with([&](SvshgpModel &t) { set(t, x); }); },
                          x0, h);
    };
    note("F~/mu_m", grad_err(ev.q.mu_m, vec_fd(s.q.mu_m, [](auto &t, auto &x) { t.q.mu_m = x; }), scale));
    note("F~/mu_u", grad_err(ev.q.mu_u, vec_fd(s.q.mu_u, [](auto &t, auto &x) { t.q.mu_u = x; }), scale));
    note("F~/Sigma_m",
         grad_err(ev.q.Sigma_m.reshaped(),
                  sym_fd([&](const MatrixXd &S) { return with([&](SvshgpModel &t) { t.q.L_m = chol_of(S); }); },
                         s.q.Sigma_m(), h).reshaped(), scale));
    note("F~/Sigma_u",
         grad_err(ev.q.Sigma_u.reshaped(),
                  sym_fd([&](const MatrixXd &S) { return with([&](SvshgpModel &t) { t.q.L_u = chol_of(S); }); },
                         s.q.Sigma_u(), h).reshaped(), scale));
    const VectorXd an = pack_gradient(ev.hyper, ParamBlocks::hyper_only());
    const VectorXd fd = vec_fd(pack_hyper(s), [](auto &t, auto &x) { unpack_hyper(x, t); });
    // Split the packed hyper vector into its named blocks.
    const Index nf = s.hyper.kf.num_params(), ng = s.hyper.kg.num_params();
    const Index nm = s.inducing.Xm.size(), nu = s.inducing.Xu.size();
    note("F~/theta_f", grad_err(an.segment(0, nf), fd.segment(0, nf), scale));
    note("F~/theta_g", grad_err(an.segment(nf, ng), fd.segment(nf, ng), scale));
    note("F~/mu0", grad_err(an.segment(nf + ng, 1), fd.segment(nf + ng, 1), scale));
    note("F~/X_m", grad_err(an.segment(nf + ng + 1, nm), fd.segment(nf + ng + 1, nm), scale));
    note("F~/X_u", grad_err(an.segment(nf + ng + 1 + nm, nu), fd.segment(nf + ng + 1 + nm, nu), scale));
  }
  const double secs = seconds_since(t0);
  bool pass = secs < 60.0;
  std::string failing;
  double overall = 0.0;
  for (const auto &[name, e] : worst) {
    overall = std::max(overall, e);
    if (!(e <= tol)) {
      pass = false;
      failing += " " + name;
    }
  }
  return {pass, fmt("%zu blocks x 20 seeds, worst rel. error %.2e, %.2f s%s%s", worst.size(),
                    overall, secs, failing.empty() ? "" : ", failing:", failing.c_str())};
}

// ---------------------------------------------------------------------------
// 3. Reconstructed Lambda diagonal is non-negative.

Outcome lambda_reconstruction_nonnegative() {
  double lowest = std::numeric_limits<double>::infinity();
  for (unsigned k = 0; k < 100; ++k) {
    auto model = random_model(5000 + k, 8 + k % 13, 1 + k % 5, 1 + (k / 5) % 5, 1 + k % 3);
    // Spread Lambda over several orders of magnitude.
    std::mt19937_64 rng(k);
    model.lambda_log = testing_support::uniform_vector(rng, model.lambda_log.size(), -6.0, 4.0);
    const auto ws = build_workspace(model.view());
    const VectorXd lam = 0.5 * (ws.Lambda_ab_diag.array() + 1.0);
    lowest = std::min(lowest, lam.minCoeff());
  }
  return {lowest >= -1e-12, fmt("100 states, smallest reconstructed entry %.3e", lowest)};
}

// ---------------------------------------------------------------------------
// 4. One unit natural step on the f-block lands on the optimal q(f_m).

Outcome natural_step_fixed_point() {
  double worst = 0.0;
  for (unsigned seed = 0; seed < 20; ++seed) {
    const auto s = random_svshgp(300 + seed, 14, 4, 3, 2);
    auto g = euclidean_grads_q(s, full_batch(s.n()));
    g.mu_u.setZero();
    g.Sigma_u.setZero();
    const auto q1 = natural_step(s.q, g, 1.0);
    const auto p = testing_support::to_problem(to_vshgp(s));
    const auto dense = oracle::collapsed_bound_given(p, s.q.mu_u, s.q.Sigma_u());
    VectorXd mean;
    MatrixXd cov;
    oracle::optimal_qfm(p, dense, mean, cov);
    worst = std::max({worst, testing_support::max_rel_err(q1.mu_m, mean, 1e-12),
                      testing_support::max_rel_err(q1.Sigma_m(), cov, 1e-12)});
  }
  return {worst <= 1e-8, fmt("20 states, worst rel. error %.2e", worst)};
}

// ---------------------------------------------------------------------------
// 5. Exhaustive batch enumeration is unbiased.

Outcome minibatch_unbiased() {
  const auto s = random_svshgp(77, 8, 3, 3, 2);
  const double full = elbo_factorized(s);
  double worst = 0.0;
  {
    double sum = 0.0;
    for (Index i = 0; i < 8; ++i) sum += elbo_factorized(s, Batch{i});
    worst = std::max(worst, std::abs(sum / 8.0 - full));
  }
  {
    double sum = 0.0;
    int count = 0;
    for (Index i = 0; i < 8; ++i) {
      for (Index j = i + 1; j < 8; ++j) {
        sum += elbo_factorized(s, Batch{i, j});
        ++count;
      }
    }
    worst = std::max(worst, std::abs(sum / count - full));
  }
  return {worst <= 1e-10, fmt("|mean F~ - F| = %.2e over all 8 singletons and 28 pairs", worst)};
}

// ---------------------------------------------------------------------------
// 6 and 8. Toy reproduction with the distributed model.

struct ToyRun {
  Dataset train;
  Normalization norm;
  DvshgpModel model;
  TrainResult result;
  double seconds = 0.0;
};

const ToyRun &toy_run() {
  static const ToyRun run = [] {
    ToyRun r;
    r.train = gen_toy1d(500, 7);
    r.norm = r.train.norm;
    const auto t0 = clock_type::now();
    auto init = init_dvshgp(r.train.X_normalized(), r.train.y_normalized(), {5, 10, 10}, 7);
    r.model = std::move(init.model);
    TrainConfig cfg;
    cfg.stage1_line_searches = 30;
    cfg.stage2_line_searches = 70;
    WorkerPool pool(1);
    r.result = train_dvshgp(r.model, cfg, &pool);
    r.seconds = seconds_since(t0);
    return r;
  }();
  return run;
}

Outcome toy_reproduction() {
  const auto &run = toy_run();
  const auto grid = toy1d_grid(201);
  WorkerPool pool(1);
  const MatrixXd Xs = run.norm.inputs(grid.X);
  const auto agg = predict_dvshgp(run.model, Xs, &pool);
  ModelArchive a;
  a.kind = ModelKind::Dvshgp;
  a.norm = run.norm;
  a.dvshgp = run.model;
  const auto p = predict_archive(a, grid.X, &pool);
  const bool all_ok = std::all_of(p.ok.begin(), p.ok.end(), [](bool b) { return b; });

  // (a) mean against the noise-free latent function
  const double e_smse = smse(grid.f_true, p.mean);
  // (b) predicted noise standard deviation on the original target scale
  VectorXd sd(grid.n());
  for (Index i = 0; i < grid.n(); ++i) {
    sd(i) = run.norm.y_std * std::sqrt(std::exp(agg.mu_g(i) + 0.5 * agg.var_g(i)));
  }
  const double corr = pearson(sd, grid.noise_std);
  // (c) noisy targets on the grid; heteroscedastic vs constant variance
  std::mt19937_64 rng(derive_seed(7, kStreamData) ^ 0x5eed);
  std::normal_distribution<double> z;
  VectorXd y(grid.n());
  for (Index i = 0; i < grid.n(); ++i) y(i) = grid.f_true(i) + grid.noise_std(i) * z(rng);
  const double tm = run.norm.y_mean, tv = run.norm.y_std * run.norm.y_std;
  const double model_msll = msll(y, log_densities(a, p, y), tm, tv);
  const double vbar = p.var.mean();
  VectorXd flat(grid.n());
  for (Index i = 0; i < grid.n(); ++i) flat(i) = gaussian_log_density(y(i), p.mean(i), vbar);
  const double flat_msll = msll(y, flat, tm, tv);
  const bool pass = all_ok && e_smse <= 0.05 && corr >= 0.9 && model_msll < flat_msll &&
                    run.seconds < 120.0;
  return {pass, fmt("smse %.4f, noise corr %.3f, msll %.3f vs constant-variance %.3f, "
                    "train %.1f s",
                    e_smse, corr, model_msll, flat_msll, run.seconds)};
}

Outcome cgd_trace_monotone() {
  const auto &trace = toy_run().result.trace;
  std::size_t drops = 0;
  double worst = 0.0;
  for (std::size_t k = 1; k < trace.size(); ++k) {
    if (trace[k].elbo < trace[k - 1].elbo) {
      ++drops;
      worst = std::max(worst, trace[k - 1].elbo - trace[k].elbo);
    }
  }
  return {drops == 0 && trace.size() > 1,
          fmt("%zu accepted steps, %zu decreases (largest %.2e)", trace.size(), drops, worst)};
}

// ---------------------------------------------------------------------------
// 7. Stochastic training against the deterministic bound.

int iterations_to_progress(const SvshgpResult &r, double f0, double fraction) {
  const double final = r.trace.back().full_elbo;
  for (const auto &row : r.trace) {
    if (std::isnan(row.full_elbo)) continue;
    if ((row.full_elbo - f0) >= fraction * (final - f0)) return row.iteration;
  }
  return r.trace.back().iteration;
}

Outcome svshgp_convergence() {
  const auto ds = gen_toy1d(500, 11);
  const MatrixXd X = ds.X_normalized();
  const VectorXd y = ds.y_normalized();
  const auto base = init_vshgp(X, y, 20, 20, 11);

  auto det = base;
  TrainConfig tc;
  train_vshgp(det, tc);
  const double fv = elbo(det).total;

  SvshgpConfig cfg;
  cfg.batch_size = 50;
  cfg.iterations = 1000;
  cfg.full_elbo_every = 10;
  cfg.seed = derive_seed(11, kStreamBatches);
  auto ngd = make_svshgp(base);
  const double f0 = elbo_factorized(ngd);
  const auto r_ngd = train_svshgp(ngd, cfg);
  auto adam = make_svshgp(base);
  cfg.mode = SvshgpMode::AdamOnly;
  const auto r_adam = train_svshgp(adam, cfg);

  const double f_ngd = elbo_factorized(ngd);
  const double gap = std::abs(f_ngd - fv) / std::abs(fv);
  const int it_ngd = iterations_to_progress(r_ngd, f0, 0.99);
  const int it_adam = iterations_to_progress(r_adam, f0, 0.99);
  return {gap <= 0.02 && it_ngd < it_adam,
          fmt("F %.2f vs F_V %.2f (gap %.2f%%); 99%% of final reached at iteration %d "
              "(NGD+Adam) vs %d (Adam only)",
              f_ngd, fv, 100 * gap, it_ngd, it_adam)};
}

// ---------------------------------------------------------------------------
// 9. Cost scaling.

// Times f(a) and f(b) alternately so both medians see the same machine load.
template <typename F>
std::pair<double, double> paired_median_seconds(int reps, F &&a, F &&b) {
  std::vector<double> ta, tb;
  for (int k = 0; k < reps; ++k) {
    auto t0 = clock_type::now();
    a();
    ta.push_back(seconds_since(t0));
    t0 = clock_type::now();
    b();
    tb.push_back(seconds_since(t0));
  }
  std::sort(ta.begin(), ta.end());
  std::sort(tb.begin(), tb.end());
  return {ta[ta.size() / 2], tb[tb.size() / 2]};
}

Outcome cost_scaling() {
  auto bound_model = [](Index n) {
    const auto ds = gen_toy1d(n, 3);
    return init_vshgp(ds.X_normalized(), ds.y_normalized(), 50, 50, 3);
  };
  const auto m1 = bound_model(4000), m2 = bound_model(8000);
  volatile double sink = 0.0;
  std::function<void()> e1 = [&] { sink = sink + elbo(m1).total; };
  std::function<void()> e2 = [&] { sink = sink + elbo(m2).total; };
  const auto [t1, t2] = paired_median_seconds(9, e1, e2);
  const double ratio = t2 / t1;

  auto stochastic_model = [](Index n) {
    const auto ds = gen_toy1d(n, 5);
    return make_svshgp(init_vshgp(ds.X_normalized(), ds.y_normalized(), 20, 20, 5));
  };
  const auto q1 = stochastic_model(4000), q2 = stochastic_model(8000);
  SvshgpConfig cfg;
  cfg.iterations = 200;
  cfg.batch_size = 50;
  std::function<void()> r1 = [&] { auto t = q1; train_svshgp(t, cfg); };
  std::function<void()> r2 = [&] { auto t = q2; train_svshgp(t, cfg); };
  const auto [i1, i2] = paired_median_seconds(9, r1, r2);
  const double s1 = i1 / cfg.iterations, s2 = i2 / cfg.iterations;
  const double change = std::abs(s2 - s1) / s1;
  return {ratio >= 1.6 && ratio <= 2.6 && change < 0.2,
          fmt("bound time ratio %.2f (n 4000 -> 8000); stochastic iteration %.3g -> %.3g s "
              "(change %.1f%%)",
              ratio, s1, s2, 100 * change)};
}

// ---------------------------------------------------------------------------
// 10. Parallel speedup with identical results.

Outcome parallel_speedup() {
  const auto ds = gen_toy1d(20000, 13);
  const auto init = init_dvshgp(ds.X_normalized(), ds.y_normalized(), {32, 100, 100}, 13);
  TrainConfig cfg;
  cfg.stage1_line_searches = 3;
  cfg.stage2_line_searches = 3;
  auto run = [&](std::size_t workers, VectorXd &params) {
    auto model = init.model;
    WorkerPool pool(workers);
    const auto t0 = clock_type::now();
    train_dvshgp(model, cfg, &pool);
    const double t = seconds_since(t0);
    params = pack_dvshgp(model, ParamBlocks::all());
    return t;
  };
  VectorXd p1, p4;
  const double t1 = run(1, p1);
  const double t4 = run(4, p4);
  const bool identical = p1.size() == p4.size() && (p1.array() == p4.array()).all();
  const double ratio = t4 / t1;
  return {ratio <= 0.6 && identical,
          fmt("4 workers %.2f s vs 1 worker %.2f s (ratio %.2f, %u hardware threads); "
              "final parameters %s",
              t4, t1, ratio, std::thread::hardware_concurrency(),
              identical ? "bit-identical" : "DIFFER")};
}

// ---------------------------------------------------------------------------
// 11. Metric definitions.

Outcome metric_definitions() {
  std::mt19937_64 rng(99);
  const VectorXd y = testing_support::uniform_vector(rng, 37, -3.0, 5.0);
  const double mean = y.mean();
  const double smse_const = smse(y, VectorXd::Constant(y.size(), mean));
  const double tm = 0.7, tv = 2.3;
  VectorXd lp(y.size());
  for (Index i = 0; i < y.size(); ++i) lp(i) = gaussian_log_density(y(i), tm, tv);
  const double msll_trivial = msll(y, lp, tm, tv);
  return {std::abs(smse_const - 1.0) <= 1e-12 && std::abs(msll_trivial) <= 1e-12,
          fmt("constant-mean smse - 1 = %.1e, train-moment msll = %.1e", smse_const - 1.0,
              msll_trivial)};
}

struct Criterion {
  int id;
  const char *name;
  Outcome (*run)();
};

const Criterion kCriteria[] = {
    {1, "bound matches dense oracle", bound_matches_oracle},
    {2, "gradient blocks match finite differences", gradients_match_fd},
    {3, "reconstructed Lambda is non-negative", lambda_reconstruction_nonnegative},
    {4, "unit natural step gives optimal q(f_m)", natural_step_fixed_point},
    {5, "mini-batch bound is unbiased", minibatch_unbiased},
    {6, "toy reproduction", toy_reproduction},
    {7, "stochastic training convergence", svshgp_convergence},
    {8, "accepted CGD trace is monotone", cgd_trace_monotone},
    {9, "cost scaling", cost_scaling},
    {10, "parallel speedup", parallel_speedup},
    {11, "metric definitions", metric_definitions},
};

} // namespace

int main(int argc, char **argv) {
  std::optional<int> only;
  for (int i = 1; i < argc; ++i) {
    if (std::strcmp(argv[i], "--criterion") == 0 && i + 1 < argc) {
      only = std::atoi(argv[++i]);
    } else {
      std::fprintf(stderr, "usage: %s [--criterion N]\n", argv[0]);
      return 2;
    }
  }
  int failed = 0, ran = 0;
  for (const auto &c : kCriteria) {
    if (only && *only != c.id) continue;
    ++ran;
    Outcome o;
    try {
      o = c.run();
    } catch (const std::exception &e) {
      o = {false, std::string("threw: ") + e.what()};
    }
    std::printf("%s criterion %2d: %s (%s)\n", o.pass ? "PASS" : "FAIL", c.id, c.name,
                o.detail.c_str());
    std::fflush(stdout);
    failed += o.pass ? 0 : 1;
  }
  if (ran == 0) {
    std::fprintf(stderr, "no such criterion\n");
    return 2;
  }
  return failed == 0 ? 0 : 1;
}
