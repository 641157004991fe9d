#include <gtest/gtest.h>

#include <Eigen/Eigenvalues>

#include <cmath>
#include <random>

#include "test_support.hpp"
#include "vshgp/kernel.hpp"
#include "vshgp/linalg.hpp"

using namespace vshgp;
using testing_support::central_diff;
using testing_support::uniform_matrix;
using testing_support::uniform_vector;

namespace {

KernelParams random_params(std::mt19937_64 &rng, Index d) {
  KernelParams p;
  p.log_signal_variance = std::uniform_real_distribution<>(-1.0, 1.0)(rng);
  p.log_lengthscales = uniform_vector(rng, d, -0.5, 0.7);
  return p;
}

} // namespace

TEST(KernelEval, ZeroDistanceGivesSignalVariance) {
  const auto p = KernelParams::isotropic(1, 2.0, 1.0);
  EXPECT_DOUBLE_EQ(kernel_eval(VectorXd::Zero(1), VectorXd::Zero(1), p), 2.0);
}

TEST(KernelEval, UnitDistance) {
  const auto p = KernelParams::isotropic(1, 1.0, 1.0);
  EXPECT_NEAR(kernel_eval(VectorXd::Zero(1), VectorXd::Ones(1), p), std::exp(-0.5), 1e-15);
}

TEST(KernelEval, MatchesDirectTranscription) {
  std::mt19937_64 rng(11);
  for (int trial = 0; trial < 20; ++trial) {
    const auto p = random_params(rng, 3);
    const VectorXd a = uniform_vector(rng, 3, -3, 3), b = uniform_vector(rng, 3, -3, 3);
    const double expect = oracle::se(a, b, p.signal_variance(), p.lengthscales());
    EXPECT_LE(testing_support::rel_err(kernel_eval(a, b, p), expect), 1e-12);
  }
}

TEST(KernelEval, SymmetricAndBounded) {
  std::mt19937_64 rng(12);
  for (int trial = 0; trial < 50; ++trial) {
    const auto p = random_params(rng, 2);
    const VectorXd a = uniform_vector(rng, 2, -3, 3), b = uniform_vector(rng, 2, -3, 3);
    const double k = kernel_eval(a, b, p);
    EXPECT_EQ(k, kernel_eval(b, a, p));
    EXPECT_GT(k, 0.0);
    EXPECT_LT(k, p.signal_variance());
  }
}

TEST(KernelEval, DimensionMismatchThrows) {
  const auto p = KernelParams::isotropic(2, 1.0, 1.0);
  EXPECT_THROW(kernel_eval(VectorXd::Zero(3), VectorXd::Zero(2), p), DimensionError);
  try {
    kernel_eval(VectorXd::Zero(3), VectorXd::Zero(2), p);
  } catch (const DimensionError &e) {
    EXPECT_EQ(e.expected(), 2);
    EXPECT_EQ(e.actual(), 3);
  }
}

TEST(KernelMatrix, SinglePoint) {
  const auto p = KernelParams::isotropic(2, 1.7, 0.5);
  const MatrixXd A = MatrixXd::Constant(1, 2, 0.3);
  const MatrixXd K = kernel_matrix(A, A, p);
  ASSERT_EQ(K.rows(), 1);
  EXPECT_DOUBLE_EQ(K(0, 0), 1.7);
}

TEST(KernelMatrix, SymmetricPsd) {
  std::mt19937_64 rng(13);
  const auto p = random_params(rng, 3);
  const MatrixXd A = uniform_matrix(rng, 4, 3, -1, 1);
  const MatrixXd K = kernel_matrix(A, A, p);
  EXPECT_EQ((K - K.transpose()).cwiseAbs().maxCoeff(), 0.0);
  Eigen::SelfAdjointEigenSolver<MatrixXd> eig(K);
  EXPECT_GE(eig.eigenvalues().minCoeff(), -1e-10 * p.signal_variance());
}

TEST(KernelMatrix, CrossIsTransposeOfReverse) {
  std::mt19937_64 rng(14);
  const auto p = random_params(rng, 2);
  const MatrixXd A = uniform_matrix(rng, 2, 2, -1, 1), B = uniform_matrix(rng, 3, 2, -1, 1);
  EXPECT_EQ((kernel_matrix(A, B, p) - kernel_matrix(B, A, p).transpose()).cwiseAbs().maxCoeff(), 0.0);
}

TEST(KernelMatrix, JitteredGramFactorizes) {
  std::mt19937_64 rng(15);
  for (int trial = 0; trial < 20; ++trial) {
    const auto p = random_params(rng, 2);
    const MatrixXd A = uniform_matrix(rng, 30, 2, -3, 3);
    MatrixXd K = kernel_matrix(A, A, p);
    K.diagonal().array() += 1e-8 * p.signal_variance();
    Eigen::LLT<MatrixXd> llt(K);
    EXPECT_EQ(llt.info(), Eigen::Success);
  }
}

TEST(KernelMatrix, ColumnMismatchThrows) {
  const auto p = KernelParams::isotropic(2, 1.0, 1.0);
  EXPECT_THROW(kernel_matrix(MatrixXd::Zero(3, 2), MatrixXd::Zero(3, 1), p), DimensionError);
}

TEST(KernelParamGrads, SignalVarianceDerivativeIsK) {
  std::mt19937_64 rng(16);
  const auto p = random_params(rng, 2);
  const MatrixXd A = uniform_matrix(rng, 3, 2, -1, 1), B = uniform_matrix(rng, 4, 2, -1, 1);
  const auto grads = kernel_param_grads(A, B, p);
  EXPECT_EQ((grads[0] - kernel_matrix(A, B, p)).cwiseAbs().maxCoeff(), 0.0);
}

TEST(KernelParamGrads, CoincidentPointHasNoLengthscaleSensitivity) {
  const auto p = KernelParams::isotropic(3, 1.3, 0.7);
  const MatrixXd A = MatrixXd::Constant(1, 3, 0.2);
  const auto grads = kernel_param_grads(A, A, p);
  for (std::size_t k = 1; k < grads.size(); ++k) {
    EXPECT_EQ(grads[k](0, 0), 0.0);
  }
}

TEST(KernelParamGrads, MatchFiniteDifferences) {
  std::mt19937_64 rng(17);
  for (Index d : {1, 2, 5}) {
    for (int trial = 0; trial < 34; ++trial) {
      const auto p = random_params(rng, d);
      const MatrixXd A = uniform_matrix(rng, 3, d, -1, 1), B = uniform_matrix(rng, 4, d, -1, 1);
      const auto grads = kernel_param_grads(A, B, p);
      for (Index i = 0; i < A.rows(); ++i) {
        for (Index j = 0; j < B.rows(); ++j) {
          auto f = [&](const VectorXd &theta) {
            KernelParams q = p;
            q.set_flat(theta);
            return kernel_matrix(A, B, q)(i, j);
          };
          const VectorXd fd = central_diff(f, p.flat(), 1e-6);
          VectorXd an(p.num_params());
          for (Index t = 0; t < p.num_params(); ++t) {
            an(t) = grads[static_cast<std::size_t>(t)](i, j);
          }
          EXPECT_LE(testing_support::grad_err(an, fd, 1e-4 * p.signal_variance()), 1e-6);
        }
      }
    }
  }
}

TEST(KernelInputGrads, MatchFiniteDifferencesBothSides) {
  std::mt19937_64 rng(18);
  for (Index d : {1, 2, 5}) {
    for (int trial = 0; trial < 34; ++trial) {
      const auto p = random_params(rng, d);
      const MatrixXd A = uniform_matrix(rng, 4, d, -1, 1), B = uniform_matrix(rng, 3, d, -1, 1);
      for (Side side : {Side::Left, Side::Right}) {
        const auto g = kernel_input_grads(A, B, p, side);
        const MatrixXd &P = side == Side::Left ? A : B;
        for (Index r = 0; r < P.rows(); ++r) {
          for (Index k = 0; k < d; ++k) {
            const double h = 1e-6;
            MatrixXd Pp = P, Pm = P;
            Pp(r, k) += h;
            Pm(r, k) -= h;
            const MatrixXd fd = side == Side::Left
                                    ? (kernel_matrix(Pp, B, p) - kernel_matrix(Pm, B, p)) / (2 * h)
                                    : (kernel_matrix(A, Pp, p) - kernel_matrix(A, Pm, p)) / (2 * h);
            MatrixXd an = MatrixXd::Zero(A.rows(), B.rows());
            const auto &D = g.per_dim[static_cast<std::size_t>(k)];
            if (side == Side::Left) {
              an.row(r) = D.row(r);
            } else {
              an.col(r) = D.col(r);
            }
            const VectorXd a = an.reshaped(), n = fd.reshaped();
            EXPECT_LE(testing_support::grad_err(a, n, 1e-4 * p.signal_variance()), 1e-6);
          }
        }
      }
    }
  }
}

TEST(KernelInputGrads, SharedPointIsStationary) {
  const auto p = KernelParams::isotropic(2, 1.0, 1.0);
  const MatrixXd A = MatrixXd::Constant(1, 2, 0.4);
  const auto g = kernel_input_grads(A, A, p, Side::Left);
  for (const auto &D : g.per_dim) {
    EXPECT_EQ(D(0, 0), 0.0);
  }
}

TEST(KernelInputGrads, FarPointIsNumericallyZero) {
  const auto p = KernelParams::isotropic(1, 1.0, 1.0);
  MatrixXd A(1, 1), B(1, 1);
  A << 45.0;
  B << 0.0;
  const auto g = kernel_input_grads(A, B, p, Side::Left);
  EXPECT_LT(std::abs(g.per_dim[0](0, 0)), 1e-300 * p.signal_variance());
}

TEST(CholJitter, IdentityNeedsNoJitter) {
  const auto f = chol_jitter(MatrixXd::Identity(3, 3));
  EXPECT_EQ(f.jitter, 0.0);
  EXPECT_EQ(f.level, -1);
  EXPECT_EQ((f.L - MatrixXd::Identity(3, 3)).cwiseAbs().maxCoeff(), 0.0);
}

TEST(CholJitter, NearDuplicatePointsEscalate) {
  const auto p = KernelParams::isotropic(1, 1.0, 1.0);
  MatrixXd A(5, 1);
  A << 0.0, 1e-9, 2e-9, 3e-9, 4e-9;
  const MatrixXd K = kernel_matrix(A, A, p);
  const auto f = chol_jitter(K);
  EXPECT_GT(f.jitter, 0.0);
  EXPECT_LE((f.L * f.L.transpose() - K).norm(), 1e-6 * K.norm());
}

TEST(CholJitter, IndefiniteMatrixFails) {
  MatrixXd K = MatrixXd::Identity(3, 3);
  K(2, 2) = -1.0;
  EXPECT_THROW(chol_jitter(K), NumericalError);
}
