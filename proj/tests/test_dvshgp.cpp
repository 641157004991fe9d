#include <gtest/gtest.h>

#include <atomic>
#include <cmath>
#include <random>
#include <set>

#include "test_support.hpp"
#include "vshgp/dvshgp.hpp"
#include "vshgp/init.hpp"
#include "vshgp/kmeans.hpp"
#include "vshgp/worker_pool.hpp"

using namespace vshgp;
using testing_support::central_diff;
using testing_support::grad_err;
using testing_support::uniform_matrix;

namespace {

// Splits a random model's data into the given shards, each with its own
// inducing inputs and Lambda drawn by random_model.
DvshgpModel random_dvshgp(unsigned seed, const std::vector<Index> &shard_sizes, Index m0,
                          Index u0, Index d) {
  DvshgpModel model;
  for (std::size_t i = 0; i < shard_sizes.size(); ++i) {
    const auto base = testing_support::random_model(seed * 31 + static_cast<unsigned>(i),
                                                    shard_sizes[i], m0, u0, d);
    if (i == 0) model.shared = base.hyper;
    ExpertModel e;
    e.X = base.train_inputs;
    e.y = base.train_targets;
    e.inducing = base.inducing;
    e.lambda_log = base.lambda_log;
    model.experts.push_back(e);
  }
  return model;
}

double scalar_rbcm(const std::vector<std::pair<double, double>> &e, double prior_mean,
                   double prior_var, double &var_out) {
  double prec = 0, num = 0, wsum = 0;
  for (const auto &[mu, v] : e) {
    const double w = 0.5 * (std::log(prior_var) - std::log(v));
    wsum += w;
    prec += w / v;
    num += w * mu / v;
  }
  prec += (1 - wsum) / prior_var;
  num += (1 - wsum) * prior_mean / prior_var;
  var_out = 1 / prec;
  return num / prec;
}

} // namespace

TEST(Kmeans, SingleClusterIsTheMean) {
  std::mt19937_64 rng(1);
  const MatrixXd X = uniform_matrix(rng, 30, 2, -1, 1);
  const auto p = kmeans_partition(X, 1, 7);
  ASSERT_EQ(p.size(), 1);
  EXPECT_LE((p.centroids.row(0) - X.colwise().mean()).cwiseAbs().maxCoeff(), 1e-14);
  for (Index a : p.assignments) EXPECT_EQ(a, 0);
}

TEST(Kmeans, SeparatedBlobsRecovered) {
  std::mt19937_64 rng(2);
  MatrixXd X(20, 2);
  X.topRows(10) = uniform_matrix(rng, 10, 2, -0.5, 0.5);
  X.bottomRows(10) = uniform_matrix(rng, 10, 2, 9.5, 10.5);
  for (std::uint64_t seed = 0; seed < 10; ++seed) {
    const auto p = kmeans_partition(X, 2, seed);
    for (Index i = 1; i < 10; ++i) EXPECT_EQ(p.assignments[i], p.assignments[0]);
    for (Index i = 11; i < 20; ++i) EXPECT_EQ(p.assignments[i], p.assignments[10]);
    EXPECT_NE(p.assignments[0], p.assignments[10]);
  }
}

TEST(Kmeans, LloydFixpoint) {
  std::mt19937_64 rng(3);
  const MatrixXd X = uniform_matrix(rng, 200, 2, -5, 5);
  const auto p = kmeans_partition(X, 6, 11);
  ASSERT_LT(p.lloyd_iterations, 100);
  for (Index i = 0; i < X.rows(); ++i) {
    const Index own = p.assignments[static_cast<std::size_t>(i)];
    const double d_own = (X.row(i) - p.centroids.row(own)).squaredNorm();
    for (Index k = 0; k < p.size(); ++k) {
      if (k != own) EXPECT_LE(d_own, (X.row(i) - p.centroids.row(k)).squaredNorm());
    }
  }
}

TEST(Kmeans, UndersizedClustersAreMerged) {
  std::mt19937_64 rng(4);
  MatrixXd X(43, 1);
  X.topRows(40) = uniform_matrix(rng, 40, 1, 0, 1);
  X.bottomRows(3) = uniform_matrix(rng, 3, 1, 50, 51);
  const auto p = kmeans_partition(X, 4, 5, 8);
  EXPECT_LT(p.size(), 4);
  EXPECT_EQ(p.requested_M, 4);
  for (const auto &members : p.members()) EXPECT_GE(members.size(), 8u);
  std::set<Index> all;
  for (const auto &members : p.members()) all.insert(members.begin(), members.end());
  EXPECT_EQ(all.size(), 43u);
}

TEST(Kmeans, RejectsTooManyClusters) {
  EXPECT_THROW(kmeans_partition(MatrixXd::Zero(3, 1), 4, 1), ConfigError);
  EXPECT_THROW(kmeans_partition(MatrixXd::Zero(3, 1), 0, 1), ConfigError);
}

TEST(WorkerPool, RunsEveryIndexOnce) {
  WorkerPool pool(4);
  std::vector<std::atomic<int>> hits(1000);
  pool.parallel_for(1000, [&](std::size_t i) { hits[i]++; });
  for (auto &h : hits) EXPECT_EQ(h.load(), 1);
  pool.parallel_for(0, [](std::size_t) { FAIL(); });
}

TEST(WorkerPool, RethrowsLowestFailingIndex) {
  WorkerPool pool(3);
  try {
    pool.parallel_for(50, [](std::size_t i) {
      if (i % 7 == 3) throw NumericalError("item " + std::to_string(i));
    });
    FAIL() << "expected an exception";
  } catch (const NumericalError &e) {
    EXPECT_STREQ(e.what(), "item 3");
  }
}

TEST(DecomposedElbo, SingleExpertEqualsCore) {
  const auto base = testing_support::random_model(1, 15, 3, 3, 2);
  DvshgpModel model;
  model.shared = base.hyper;
  model.experts.push_back({{}, base.train_inputs, base.train_targets, base.inducing,
                           base.lambda_log});
  EXPECT_EQ(decomposed_elbo(model).total, elbo(base).total);
  const auto g = decomposed_grads(model);
  const auto gc = elbo_grads(base);
  EXPECT_EQ(g.kf, gc.kf);
  EXPECT_EQ(g.mu0, gc.mu0);
  EXPECT_EQ(g.local[0].lambda_log, gc.lambda_log);
}

TEST(DecomposedElbo, SumOfExpertsAndPoolInvariant) {
  const auto model = random_dvshgp(2, {8, 10, 9}, 3, 2, 2);
  double expect = 0.0;
  for (std::size_t i = 0; i < 3; ++i) expect += elbo(model.view(i)).total;
  WorkerPool pool(3);
  EXPECT_EQ(decomposed_elbo(model).total, expect);
  EXPECT_EQ(decomposed_elbo(model, &pool).total, expect);
}

TEST(DecomposedGrads, DuplicatedExpertDoublesSharedGradient) {
  auto model = random_dvshgp(3, {9}, 3, 3, 1);
  const auto one = decomposed_grads(model);
  model.experts.push_back(model.experts[0]);
  const auto two = decomposed_grads(model);
  EXPECT_LE((two.kf - 2.0 * one.kf).cwiseAbs().maxCoeff(), 1e-12 * one.kf.norm());
  EXPECT_NEAR(two.mu0, 2.0 * one.mu0, 1e-12 * std::abs(one.mu0));
}

TEST(DecomposedGrads, MatchFiniteDifferences) {
  for (unsigned seed = 0; seed < 10; ++seed) {
    const auto model = random_dvshgp(seed, {8, 8}, 3, 3, 2);
    const auto b = ParamBlocks::all();
    const VectorXd an = pack_dvshgp_gradient(decomposed_grads(model), b);
    const VectorXd fd = central_diff(
        [&](const VectorXd &x) {
          auto t = model;
          unpack_dvshgp(x, b, t);
          return decomposed_elbo(t).total;
        },
        pack_dvshgp(model, b), 1e-5);
    EXPECT_LE(grad_err(an, fd, 1e-3), 1e-4) << "seed " << seed;
  }
}

TEST(DvshgpPacking, RoundTripAndErrors) {
  const auto model = random_dvshgp(5, {6, 7}, 2, 3, 2);
  for (const auto &b : {ParamBlocks::all(), ParamBlocks::variational_only()}) {
    const VectorXd x = pack_dvshgp(model, b);
    auto copy = model;
    copy.experts[1].lambda_log.setZero();
    unpack_dvshgp(x, b, copy);
    EXPECT_EQ(copy.experts[1].lambda_log, model.experts[1].lambda_log);
    EXPECT_THROW(unpack_dvshgp(x.head(x.size() - 1), b, copy), DimensionError);
  }
}

TEST(Aggregate, ExpertAtPriorVarianceReturnsPrior) {
  const auto f = aggregate_f({{0.7, 2.0}}, 2.0);
  EXPECT_EQ(f.weights(0), 0.0);
  EXPECT_DOUBLE_EQ(f.mean, 0.0);
  EXPECT_DOUBLE_EQ(f.var, 2.0);
  const auto g = aggregate_g({{0.7, 1.5}}, -1.2, 1.5);
  EXPECT_DOUBLE_EQ(g.mean, -1.2);
  EXPECT_DOUBLE_EQ(g.var, 1.5);
}

TEST(Aggregate, ThreeExpertsMatchScalarTranscription) {
  double v = 0;
  const double mu = scalar_rbcm({{1.0, 0.5}, {2.0, 1.0}, {0.0, 2.0}}, 0.0, 2.0, v);
  const auto a = aggregate_f({{1.0, 0.5}, {2.0, 1.0}, {0.0, 2.0}}, 2.0);
  EXPECT_NEAR(a.mean, mu, 1e-14);
  EXPECT_NEAR(a.var, v, 1e-14);
  EXPECT_NEAR(a.weights(0), 0.5 * std::log(4.0), 1e-15);
}

TEST(Aggregate, GWithPriorMeanMatchesScalar) {
  double v = 0;
  const double mu = scalar_rbcm({{-1.0, 0.3}, {-2.5, 0.6}}, -1.7, 0.9, v);
  const auto a = aggregate_g({{-1.0, 0.3}, {-2.5, 0.6}}, -1.7, 0.9);
  EXPECT_LE(testing_support::rel_err(a.mean, mu), 1e-12);
  EXPECT_LE(testing_support::rel_err(a.var, v), 1e-12);
  const auto f = aggregate_f({{-1.0, 0.3}, {-2.5, 0.6}}, 0.9);
  const auto g0 = aggregate_g({{-1.0, 0.3}, {-2.5, 0.6}}, 0.0, 0.9);
  EXPECT_EQ(f.mean, g0.mean);
  EXPECT_EQ(f.var, g0.var);
}

TEST(Aggregate, IdenticalExpertsWithUnitWeightSumKeepTheirMean) {
  // Three identical experts whose weights sum to one: the prior term drops
  // out and the aggregate is a weighted mean of equal values.
  const double v = std::exp(-2.0 / 3.0);
  const auto a = aggregate_f({{0.8, v}, {0.8, v}, {0.8, v}}, 1.0);
  EXPECT_NEAR(a.weights.sum(), 1.0, 1e-15);
  EXPECT_NEAR(a.mean, 0.8, 1e-14);
  EXPECT_NEAR(a.var, v, 1e-14);
}

TEST(Aggregate, IdenticalExpertsShrinkTowardsPriorMean) {
  const auto a = aggregate_f({{0.8, 0.3}, {0.8, 0.3}, {0.8, 0.3}}, 1.0);
  const double w = 0.5 * std::log(1.0 / 0.3);
  const double prec = 3 * w / 0.3 + (1 - 3 * w);
  EXPECT_NEAR(a.mean, (3 * w / 0.3) * 0.8 / prec, 1e-14);
}

TEST(Aggregate, VarianceBelowPriorWithPositiveWeights) {
  std::mt19937_64 rng(6);
  std::uniform_real_distribution<> u(0.05, 0.99);
  for (int t = 0; t < 50; ++t) {
    std::vector<ExpertMoments> e;
    for (int i = 0; i < 4; ++i) e.push_back({u(rng), u(rng)});
    const auto a = aggregate_f(e, 1.0);
    EXPECT_GE(a.weights.minCoeff(), 0.0);
    EXPECT_LE(a.var, 1.0);
  }
}

TEST(Aggregate, PrecisionNeverFallsBelowPrior) {
  // Every expert adds w (1/v - 1/k) >= 0 to the prior precision, also when
  // v exceeds the prior variance and its weight is negative.
  std::mt19937_64 rng(13);
  std::uniform_real_distribution<> u(0.01, 20.0);
  for (int t = 0; t < 200; ++t) {
    std::vector<ExpertMoments> e;
    for (int i = 0; i < 12; ++i) e.push_back({0.0, u(rng)});
    const auto a = aggregate_f(e, 1.0);
    EXPECT_LE(a.var, 1.0 + 1e-12);
  }
}

TEST(Aggregate, InvalidExpertVarianceIsAnError) {
  EXPECT_THROW(aggregate_f({{0.0, 0.0}}, 1.0), NumericalError);
  EXPECT_THROW(aggregate_g({{0.0, 0.5}}, 0.0, -1.0), NumericalError);
}

TEST(PredictDvshgp, FarPointsRevertToPrior) {
  const auto model = random_dvshgp(7, {10, 10}, 3, 3, 1);
  MatrixXd Xs(1, 1);
  Xs << 1e3;
  const auto p = predict_dvshgp(model, Xs);
  ASSERT_TRUE(p.ok[0]);
  EXPECT_NEAR(p.mu_f(0), 0.0, 1e-12);
  EXPECT_NEAR(p.var_f(0), model.shared.kf.signal_variance(), 1e-12);
  EXPECT_NEAR(p.mu_g(0), model.shared.mu0, 1e-12);
  EXPECT_NEAR(p.var_g(0), model.shared.kg.signal_variance(), 1e-12);
  EXPECT_NEAR(p.weights_f.cwiseAbs().maxCoeff(), 0.0, 1e-12);
}

TEST(PredictDvshgp, SingleExpertIsAggregatedNotPassedThrough) {
  const auto model = random_dvshgp(8, {14}, 4, 4, 1);
  MatrixXd Xs(3, 1);
  Xs << -1.0, 0.0, 0.7;
  const auto agg = predict_dvshgp(model, Xs);
  const auto raw = predict_latent(build_workspace(model.view(0)), Xs);
  for (Index j = 0; j < 3; ++j) {
    const auto a = aggregate_f({{raw.mu_f(j), raw.var_f(j)}}, model.shared.kf.signal_variance());
    EXPECT_DOUBLE_EQ(agg.mu_f(j), a.mean);
    EXPECT_DOUBLE_EQ(agg.var_f(j), a.var);
  }
}

TEST(TrainDvshgp, ZeroBudgetsLeaveModelUnchanged) {
  auto model = random_dvshgp(9, {10, 12}, 3, 3, 1);
  const VectorXd before = pack_dvshgp(model, ParamBlocks::all());
  TrainConfig cfg;
  cfg.stage1_line_searches = cfg.stage2_line_searches = 0;
  train_dvshgp(model, cfg);
  EXPECT_EQ(pack_dvshgp(model, ParamBlocks::all()), before);
}

TEST(TrainDvshgp, SingleExpertMatchesVshgpStepForStep) {
  const auto base = testing_support::random_model(10, 25, 4, 4, 1);
  DvshgpModel model;
  model.shared = base.hyper;
  model.experts.push_back({{}, base.train_inputs, base.train_targets, base.inducing,
                           base.lambda_log});
  auto single = base;
  TrainConfig cfg;
  cfg.stage1_line_searches = 5;
  cfg.stage2_line_searches = 10;
  const auto rd = train_dvshgp(model, cfg);
  const auto rs = train_vshgp(single, cfg);
  ASSERT_EQ(rd.trace.size(), rs.trace.size());
  for (std::size_t k = 0; k < rd.trace.size(); ++k) {
    EXPECT_EQ(rd.trace[k].elbo, rs.trace[k].elbo);
  }
  EXPECT_EQ(model.experts[0].lambda_log, single.lambda_log);
}

TEST(TrainDvshgp, WorkerCountDoesNotChangeResult) {
  auto a = random_dvshgp(11, {12, 10, 11, 9}, 3, 3, 1);
  auto b = a;
  TrainConfig cfg;
  cfg.stage1_line_searches = 4;
  cfg.stage2_line_searches = 6;
  WorkerPool pool(4);
  const auto ra = train_dvshgp(a, cfg);
  const auto rb = train_dvshgp(b, cfg, &pool);
  EXPECT_EQ(pack_dvshgp(a, ParamBlocks::all()), pack_dvshgp(b, ParamBlocks::all()));
  ASSERT_EQ(ra.trace.size(), rb.trace.size());
  for (std::size_t k = 1; k < ra.trace.size(); ++k) {
    EXPECT_EQ(ra.trace[k].elbo, rb.trace[k].elbo);
    EXPECT_GE(ra.trace[k].elbo, ra.trace[k - 1].elbo);
  }
}

TEST(InitDvshgp, SharesAndSizes) {
  std::mt19937_64 rng(12);
  const MatrixXd X = uniform_matrix(rng, 120, 2, -3, 3);
  const VectorXd y = testing_support::uniform_vector(rng, 120, -1, 1);
  const auto init = init_dvshgp(X, y, {4, 0, 0}, 3);
  EXPECT_EQ(init.sizes.m0, 15);
  std::set<Index> seen;
  for (const auto &e : init.model.experts) {
    EXPECT_EQ(e.inducing.Xm.rows(), 15);
    EXPECT_GE(e.X.rows(), 15);
    seen.insert(e.indices.begin(), e.indices.end());
    for (std::size_t r = 0; r < e.indices.size(); ++r) {
      EXPECT_EQ(e.X.row(static_cast<Index>(r)), X.row(e.indices[r]));
    }
  }
  EXPECT_EQ(seen.size(), 120u);
}
