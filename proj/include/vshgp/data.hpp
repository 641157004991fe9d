#pragma once

#include <Eigen/Dense>

#include <algorithm>
#include <cerrno>
#include <cmath>
#include <cstdint>
#include <cstdlib>
#include <fstream>
#include <iomanip>
#include <numeric>
#include <random>
#include <sstream>
#include <string>
#include <vector>

#include "vshgp/error.hpp"
#include "vshgp/linalg.hpp"

namespace vshgp {

/// Per-column affine maps to zero mean and unit standard deviation
/// (population moments). Constant columns keep std = 1 and are flagged.
struct Normalization {
  VectorXd x_mean;
  VectorXd x_std;
  std::vector<bool> x_constant;
  double y_mean = 0.0;
  double y_std = 1.0;

  static Normalization identity(Index d) {
    Normalization z;
    z.x_mean = VectorXd::Zero(d);
    z.x_std = VectorXd::Ones(d);
    z.x_constant.assign(static_cast<std::size_t>(d), false);
    return z;
  }

  MatrixXd inputs(const MatrixXd &X) const {
    require_dims("normalization: input columns", x_mean.size(), X.cols());
    return ((X.rowwise() - x_mean.transpose()).array().rowwise() / x_std.transpose().array())
        .matrix();
  }
  VectorXd targets(const VectorXd &y) const { return (y.array() - y_mean) / y_std; }
  VectorXd mean_back(const VectorXd &mu) const { return mu.array() * y_std + y_mean; }
  VectorXd var_back(const VectorXd &var) const { return var * (y_std * y_std); }
};

inline Normalization compute_normalization(const MatrixXd &X, const VectorXd &y) {
  if (X.rows() == 0) {
    throw ConfigError("normalization: empty dataset");
  }
  Normalization z;
  const double n = static_cast<double>(X.rows());
  z.x_mean = X.colwise().mean().transpose();
  z.x_std.resize(X.cols());
  z.x_constant.assign(static_cast<std::size_t>(X.cols()), false);
  for (Index j = 0; j < X.cols(); ++j) {
    const double s = std::sqrt((X.col(j).array() - z.x_mean(j)).square().sum() / n);
    const bool constant = !(s > 1e-300);
    z.x_constant[static_cast<std::size_t>(j)] = constant;
    z.x_std(j) = constant ? 1.0 : s;
  }
  z.y_mean = y.mean();
  const double sy = std::sqrt((y.array() - z.y_mean).square().sum() / n);
  z.y_std = sy > 1e-300 ? sy : 1.0;
  return z;
}

struct Dataset {
  MatrixXd X;
  VectorXd y;
  Normalization norm;
  std::string provenance;
  // Ground truth for synthetic data; empty otherwise.
  VectorXd f_true;
  VectorXd noise_std;

  Index n() const { return X.rows(); }
  Index d() const { return X.cols(); }
  MatrixXd X_normalized() const { return norm.inputs(X); }
  VectorXd y_normalized() const { return norm.targets(y); }
};

inline void set_normalization(Dataset &ds) { ds.norm = compute_normalization(ds.X, ds.y); }

namespace detail {

inline std::vector<std::string> split_fields(const std::string &line, char delim) {
  std::vector<std::string> out;
  std::string cur;
  for (char c : line) {
    if (c == delim) {
      out.push_back(cur);
      cur.clear();
    } else if (c != '\r') {
      cur.push_back(c);
    }
  }
  out.push_back(cur);
  return out;
}

inline bool parse_double(const std::string &s, double &out) {
  const auto b = s.find_first_not_of(" \t");
  if (b == std::string::npos) return false;
  const auto e = s.find_last_not_of(" \t");
  const std::string t = s.substr(b, e - b + 1);
  char *end = nullptr;
  errno = 0;
  out = std::strtod(t.c_str(), &end);
  return end == t.c_str() + t.size() && errno != ERANGE && std::isfinite(out);
}

} // namespace detail

/// Column names and numeric body of a delimited file with a header row.
struct Table {
  std::vector<std::string> header;
  MatrixXd values;
};

/// Reads a table; rows in errors are 1-based file lines (header = line 1).
inline Table read_table(const std::string &path, char delim = ',') {
  std::ifstream in(path);
  if (!in) {
    throw ConfigError("cannot open " + path);
  }
  Table t;
  std::string line;
  long lineno = 0;
  if (!std::getline(in, line)) {
    throw ParseError(path + ": missing header", 1);
  }
  ++lineno;
  t.header = detail::split_fields(line, delim);
  std::vector<double> flat;
  long rows = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    const auto fields = detail::split_fields(line, delim);
    if (fields.size() != t.header.size()) {
      throw ParseError(path + ": expected " + std::to_string(t.header.size()) + " fields, got " +
                           std::to_string(fields.size()),
                       lineno);
    }
    for (std::size_t c = 0; c < fields.size(); ++c) {
      double v = 0.0;
      if (!detail::parse_double(fields[c], v)) {
        throw ParseError(path + ": non-numeric value '" + fields[c] + "'", lineno,
                         static_cast<long>(c + 1));
      }
      flat.push_back(v);
    }
    ++rows;
  }
  const auto cols = static_cast<Index>(t.header.size());
  t.values = Eigen::Map<Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>>(
      flat.data(), rows, cols);
  return t;
}

inline void write_table(const std::string &path, const std::vector<std::string> &header,
                        const MatrixXd &values, char delim = ',') {
  require_dims("write_table: header width", static_cast<long>(header.size()), values.cols());
  std::ofstream out(path);
  if (!out) {
    throw ConfigError("cannot write " + path);
  }
  for (std::size_t c = 0; c < header.size(); ++c) {
    out << (c ? std::string(1, delim) : "") << header[c];
  }
  out << '\n' << std::setprecision(17);
  for (Index r = 0; r < values.rows(); ++r) {
    for (Index c = 0; c < values.cols(); ++c) {
      out << (c ? std::string(1, delim) : "") << values(r, c);
    }
    out << '\n';
  }
  if (!out) {
    throw ConfigError("write failed for " + path);
  }
}

/// Loads a CSV with a header row; target_column < 0 selects the last column.
inline Dataset load_csv(const std::string &path, long target_column = -1) {
  const Table t = read_table(path);
  const Index cols = t.values.cols();
  if (t.values.rows() == 0) {
    throw ConfigError(path + ": no data rows");
  }
  if (cols < 2) {
    throw ConfigError(path + ": need at least one input column and a target");
  }
  const Index tc = target_column < 0 ? cols - 1 : static_cast<Index>(target_column);
  if (tc >= cols) {
    throw ConfigError(path + ": target column " + std::to_string(tc) + " out of range");
  }
  Dataset ds;
  ds.y = t.values.col(tc);
  ds.X.resize(t.values.rows(), cols - 1);
  for (Index c = 0, k = 0; c < cols; ++c) {
    if (c != tc) ds.X.col(k++) = t.values.col(c);
  }
  ds.provenance = "csv:" + path;
  set_normalization(ds);
  return ds;
}

inline void save_csv(const std::string &path, const Dataset &ds) {
  std::vector<std::string> header;
  for (Index j = 0; j < ds.d(); ++j) header.push_back("x" + std::to_string(j + 1));
  header.push_back("y");
  MatrixXd v(ds.n(), ds.d() + 1);
  v << ds.X, ds.y;
  write_table(path, header, v);
}

/// sin(x)/x with sinc(0) = 1; the normalized variant uses pi x.
inline double sinc(double x, bool normalized = false) {
  const double z = normalized ? x * 3.14159265358979323846 : x;
  return std::abs(z) < 1e-8 ? 1.0 - z * z / 6.0 : std::sin(z) / z;
}

/// Noise standard deviation profile of the 1-D toy problem.
inline double toy_noise_std(double x) {
  return 0.05 + 0.2 * (1.0 + std::sin(2.0 * x)) / (1.0 + std::exp(-0.2 * x));
}

/// x ~ U[-10, 10], y = sinc(x) + N(0, toy_noise_std(x)^2).
inline Dataset gen_toy1d(Index n, std::uint64_t seed, bool normalized_sinc = false) {
  if (n < 1) {
    throw ConfigError("gen_toy1d: n must be >= 1");
  }
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> ux(-10.0, 10.0);
  std::normal_distribution<double> eps(0.0, 1.0);
  Dataset ds;
  ds.X.resize(n, 1);
  ds.y.resize(n);
  ds.f_true.resize(n);
  ds.noise_std.resize(n);
  for (Index i = 0; i < n; ++i) {
    const double x = ux(rng);
    ds.X(i, 0) = x;
    ds.f_true(i) = sinc(x, normalized_sinc);
    ds.noise_std(i) = toy_noise_std(x);
    ds.y(i) = ds.f_true(i) + ds.noise_std(i) * eps(rng);
  }
  ds.provenance = "toy1d:n=" + std::to_string(n) + ":seed=" + std::to_string(seed);
  set_normalization(ds);
  return ds;
}

/// x ~ U[-10, 10]^2, f = sinc(0.1 x1 x2), noise std toy_noise_std(0.1 x1 x2).
inline Dataset gen_sinc2d(Index n, std::uint64_t seed, bool normalized_sinc = false) {
  if (n < 1) {
    throw ConfigError("gen_sinc2d: n must be >= 1");
  }
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> ux(-10.0, 10.0);
  std::normal_distribution<double> eps(0.0, 1.0);
  Dataset ds;
  ds.X.resize(n, 2);
  ds.y.resize(n);
  ds.f_true.resize(n);
  ds.noise_std.resize(n);
  for (Index i = 0; i < n; ++i) {
    ds.X(i, 0) = ux(rng);
    ds.X(i, 1) = ux(rng);
    const double z = 0.1 * ds.X(i, 0) * ds.X(i, 1);
    ds.f_true(i) = sinc(z, normalized_sinc);
    ds.noise_std(i) = toy_noise_std(z);
    ds.y(i) = ds.f_true(i) + ds.noise_std(i) * eps(rng);
  }
  ds.provenance = "sinc2d:n=" + std::to_string(n) + ":seed=" + std::to_string(seed);
  set_normalization(ds);
  return ds;
}

/// Evenly spaced points on [lo, hi], inclusive.
inline VectorXd linspace(double lo, double hi, Index count) {
  if (count < 2) {
    throw ConfigError("grid: need at least two points per axis");
  }
  return VectorXd::LinSpaced(count, lo, hi);
}

/// Noise-free toy 1-D grid with f and noise std filled in; y = f.
inline Dataset toy1d_grid(Index count = 201, bool normalized_sinc = false) {
  Dataset ds;
  ds.X = linspace(-10.0, 10.0, count);
  ds.f_true.resize(count);
  ds.noise_std.resize(count);
  for (Index i = 0; i < count; ++i) {
    ds.f_true(i) = sinc(ds.X(i, 0), normalized_sinc);
    ds.noise_std(i) = toy_noise_std(ds.X(i, 0));
  }
  ds.y = ds.f_true;
  ds.provenance = "toy1d-grid:" + std::to_string(count);
  ds.norm = Normalization::identity(1);
  return ds;
}

/// Tensor grid over [-10, 10]^2 with side points per axis (x1 varies slowest).
inline Dataset sinc2d_grid(Index side = 70, bool normalized_sinc = false) {
  const VectorXd axis = linspace(-10.0, 10.0, side);
  Dataset ds;
  ds.X.resize(side * side, 2);
  ds.f_true.resize(side * side);
  ds.noise_std.resize(side * side);
  for (Index a = 0; a < side; ++a) {
    for (Index b = 0; b < side; ++b) {
      const Index r = a * side + b;
      ds.X(r, 0) = axis(a);
      ds.X(r, 1) = axis(b);
      const double z = 0.1 * axis(a) * axis(b);
      ds.f_true(r) = sinc(z, normalized_sinc);
      ds.noise_std(r) = toy_noise_std(z);
    }
  }
  ds.y = ds.f_true;
  ds.provenance = "sinc2d-grid:" + std::to_string(side);
  ds.norm = Normalization::identity(2);
  return ds;
}

inline Dataset subset(const Dataset &ds, const std::vector<Index> &rows) {
  Dataset out;
  const auto k = static_cast<Index>(rows.size());
  out.X.resize(k, ds.d());
  out.y.resize(k);
  const bool truth = ds.f_true.size() == ds.n();
  if (truth) {
    out.f_true.resize(k);
    out.noise_std.resize(k);
  }
  for (Index r = 0; r < k; ++r) {
    const Index i = rows[static_cast<std::size_t>(r)];
    out.X.row(r) = ds.X.row(i);
    out.y(r) = ds.y(i);
    if (truth) {
      out.f_true(r) = ds.f_true(i);
      out.noise_std(r) = ds.noise_std(i);
    }
  }
  out.provenance = ds.provenance;
  out.norm = ds.norm;
  return out;
}

struct SplitResult {
  Dataset train;
  Dataset test;
};

/// Seeded uniform split without replacement. The training part gets fresh
/// normalization statistics; the test part carries the same ones.
inline SplitResult split(const Dataset &ds, Index test_count, std::uint64_t seed) {
  if (test_count < 0 || test_count >= ds.n()) {
    throw ConfigError("split: test_count must lie in [0, n)");
  }
  std::vector<Index> perm(static_cast<std::size_t>(ds.n()));
  std::iota(perm.begin(), perm.end(), Index{0});
  std::mt19937_64 rng(seed);
  std::shuffle(perm.begin(), perm.end(), rng);
  const auto cut = perm.begin() + static_cast<std::ptrdiff_t>(test_count);
  std::vector<Index> test(perm.begin(), cut), train(cut, perm.end());
  std::sort(test.begin(), test.end());
  std::sort(train.begin(), train.end());
  SplitResult out{subset(ds, train), subset(ds, test)};
  set_normalization(out.train);
  out.test.norm = out.train.norm;
  return out;
}

inline SplitResult split_fraction(const Dataset &ds, double test_fraction, std::uint64_t seed) {
  if (!(test_fraction >= 0.0 && test_fraction < 1.0)) {
    throw ConfigError("split: test_fraction must lie in [0, 1)");
  }
  return split(ds, static_cast<Index>(std::floor(test_fraction * static_cast<double>(ds.n()))),
               seed);
}

} // namespace vshgp
