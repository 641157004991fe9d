#pragma once

// Versioned JSON model archive holding any of the three model kinds plus the
// normalization statistics of the data it was trained on.

#include <Eigen/Dense>

#include <fstream>
#include <string>
#include <vector>

#include "json.hpp"

#include "vshgp/data.hpp"
#include "vshgp/dvshgp.hpp"
#include "vshgp/error.hpp"
#include "vshgp/model.hpp"
#include "vshgp/svshgp.hpp"

namespace vshgp {

inline constexpr const char *kArchiveFormat = "vshgp-archive";
inline constexpr int kArchiveVersion = 1;

enum class ModelKind { Vshgp, Svshgp, Dvshgp };

inline std::string to_string(ModelKind k) {
  switch (k) {
  case ModelKind::Vshgp: return "vshgp";
  case ModelKind::Svshgp: return "svshgp";
  case ModelKind::Dvshgp: return "dvshgp";
  }
  return "?";
}

inline ModelKind parse_model_kind(const std::string &s) {
  if (s == "vshgp") return ModelKind::Vshgp;
  if (s == "svshgp") return ModelKind::Svshgp;
  if (s == "dvshgp") return ModelKind::Dvshgp;
  throw ConfigError("unknown model kind '" + s + "' (expected vshgp, svshgp or dvshgp)");
}

struct DvshgpManifest {
  Index requested_M = 0;
  Index effective_M = 0;
  Index n0 = 0;
  Index m0 = 0;
  Index u0 = 0;
};

/// One trained model; only the member matching kind is meaningful.
struct ModelArchive {
  ModelKind kind = ModelKind::Vshgp;
  Normalization norm;
  VshgpModel vshgp;
  SvshgpModel svshgp;
  DvshgpModel dvshgp;
  DvshgpManifest manifest;

  Index input_dim() const {
    switch (kind) {
    case ModelKind::Vshgp: return vshgp.train_inputs.cols();
    case ModelKind::Svshgp: return svshgp.train_inputs.cols();
    case ModelKind::Dvshgp: return dvshgp.shared.kf.dim();
    }
    return 0;
  }
};

namespace archive_detail {

using nlohmann::json;

inline json vec(const VectorXd &v) { return std::vector<double>(v.data(), v.data() + v.size()); }

inline json mat(const MatrixXd &A) {
  json rows = json::array();
  for (Index i = 0; i < A.rows(); ++i) {
    rows.push_back(vec(A.row(i).transpose()));
  }
  return json{{"rows", A.rows()}, {"cols", A.cols()}, {"data", rows}};
}

inline const json &field(const json &j, const char *key) {
  if (!j.is_object() || !j.contains(key)) {
    throw ParseError(std::string("archive: missing field '") + key + "'", 0);
  }
  return j.at(key);
}

inline VectorXd to_vec(const json &j) {
  const auto v = j.get<std::vector<double>>();
  return Eigen::Map<const VectorXd>(v.data(), static_cast<Index>(v.size()));
}

inline MatrixXd to_mat(const json &j) {
  const auto rows = field(j, "rows").get<Index>();
  const auto cols = field(j, "cols").get<Index>();
  const auto &data = field(j, "data");
  if (static_cast<Index>(data.size()) != rows) {
    throw ParseError("archive: matrix row count mismatch", 0);
  }
  MatrixXd A(rows, cols);
  for (Index i = 0; i < rows; ++i) {
    const VectorXd r = to_vec(data[static_cast<std::size_t>(i)]);
    if (r.size() != cols) {
      throw ParseError("archive: matrix column count mismatch", 0);
    }
    A.row(i) = r.transpose();
  }
  return A;
}

inline json kernel(const KernelParams &k) {
  return {{"log_signal_variance", k.log_signal_variance},
          {"log_lengthscales", vec(k.log_lengthscales)}};
}

inline KernelParams to_kernel(const json &j) {
  KernelParams k;
  k.log_signal_variance = field(j, "log_signal_variance").get<double>();
  k.log_lengthscales = to_vec(field(j, "log_lengthscales"));
  return k;
}

inline json hyper(const HyperParams &h) {
  return {{"kf", kernel(h.kf)}, {"kg", kernel(h.kg)}, {"mu0", h.mu0}};
}

inline HyperParams to_hyper(const json &j) {
  HyperParams h;
  h.kf = to_kernel(field(j, "kf"));
  h.kg = to_kernel(field(j, "kg"));
  h.mu0 = field(j, "mu0").get<double>();
  return h;
}

inline json normalization(const Normalization &z) {
  return {{"x_mean", vec(z.x_mean)},
          {"x_std", vec(z.x_std)},
          {"x_constant", z.x_constant},
          {"y_mean", z.y_mean},
          {"y_std", z.y_std}};
}

inline Normalization to_normalization(const json &j) {
  Normalization z;
  z.x_mean = to_vec(field(j, "x_mean"));
  z.x_std = to_vec(field(j, "x_std"));
  z.x_constant = field(j, "x_constant").get<std::vector<bool>>();
  z.y_mean = field(j, "y_mean").get<double>();
  z.y_std = field(j, "y_std").get<double>();
  return z;
}

} // namespace archive_detail

inline nlohmann::json archive_to_json(const ModelArchive &a) {
  using namespace archive_detail;
  json j;
  j["format"] = kArchiveFormat;
  j["version"] = kArchiveVersion;
  j["kind"] = to_string(a.kind);
  j["normalization"] = normalization(a.norm);
  switch (a.kind) {
  case ModelKind::Vshgp: {
    const auto &m = a.vshgp;
    j["hyper"] = hyper(m.hyper);
    j["X"] = mat(m.train_inputs);
    j["y"] = vec(m.train_targets);
    j["Xm"] = mat(m.inducing.Xm);
    j["Xu"] = mat(m.inducing.Xu);
    j["lambda_log"] = vec(m.lambda_log);
    break;
  }
  case ModelKind::Svshgp: {
    const auto &m = a.svshgp;
    j["hyper"] = hyper(m.hyper);
    j["X"] = mat(m.train_inputs);
    j["y"] = vec(m.train_targets);
    j["Xm"] = mat(m.inducing.Xm);
    j["Xu"] = mat(m.inducing.Xu);
    j["q"] = {{"mu_m", vec(m.q.mu_m)},
              {"L_m", mat(m.q.L_m)},
              {"mu_u", vec(m.q.mu_u)},
              {"L_u", mat(m.q.L_u)}};
    break;
  }
  case ModelKind::Dvshgp: {
    const auto &m = a.dvshgp;
    j["hyper"] = hyper(m.shared);
    j["manifest"] = {{"requested_M", a.manifest.requested_M},
                     {"effective_M", a.manifest.effective_M},
                     {"n0", a.manifest.n0},
                     {"m0", a.manifest.m0},
                     {"u0", a.manifest.u0}};
    json experts = json::array();
    for (const auto &e : m.experts) {
      experts.push_back({{"indices", e.indices},
                         {"X", mat(e.X)},
                         {"y", vec(e.y)},
                         {"Xm", mat(e.inducing.Xm)},
                         {"Xu", mat(e.inducing.Xu)},
                         {"lambda_log", vec(e.lambda_log)}});
    }
    j["experts"] = experts;
    break;
  }
  }
  return j;
}

inline ModelArchive archive_from_json(const nlohmann::json &j) {
  using namespace archive_detail;
  try {
    if (field(j, "format").get<std::string>() != kArchiveFormat) {
      throw ParseError("archive: unrecognized format tag", 0);
    }
    const int version = field(j, "version").get<int>();
    if (version != kArchiveVersion) {
      throw ParseError("archive: unsupported version " + std::to_string(version), 0);
    }
    ModelArchive a;
    a.kind = parse_model_kind(field(j, "kind").get<std::string>());
    a.norm = to_normalization(field(j, "normalization"));
    switch (a.kind) {
    case ModelKind::Vshgp: {
      auto &m = a.vshgp;
      m.hyper = to_hyper(field(j, "hyper"));
      m.train_inputs = to_mat(field(j, "X"));
      m.train_targets = to_vec(field(j, "y"));
      m.inducing.Xm = to_mat(field(j, "Xm"));
      m.inducing.Xu = to_mat(field(j, "Xu"));
      m.lambda_log = to_vec(field(j, "lambda_log"));
      validate(m.view());
      break;
    }
    case ModelKind::Svshgp: {
      auto &m = a.svshgp;
      m.hyper = to_hyper(field(j, "hyper"));
      m.train_inputs = to_mat(field(j, "X"));
      m.train_targets = to_vec(field(j, "y"));
      m.inducing.Xm = to_mat(field(j, "Xm"));
      m.inducing.Xu = to_mat(field(j, "Xu"));
      const auto &q = field(j, "q");
      m.q.mu_m = to_vec(field(q, "mu_m"));
      m.q.L_m = to_mat(field(q, "L_m"));
      m.q.mu_u = to_vec(field(q, "mu_u"));
      m.q.L_u = to_mat(field(q, "L_u"));
      detail::validate_svshgp(m, full_batch(m.n()));
      break;
    }
    case ModelKind::Dvshgp: {
      auto &m = a.dvshgp;
      m.shared = to_hyper(field(j, "hyper"));
      const auto &mf = field(j, "manifest");
      a.manifest.requested_M = field(mf, "requested_M").get<Index>();
      a.manifest.effective_M = field(mf, "effective_M").get<Index>();
      a.manifest.n0 = field(mf, "n0").get<Index>();
      a.manifest.m0 = field(mf, "m0").get<Index>();
      a.manifest.u0 = field(mf, "u0").get<Index>();
      for (const auto &ej : field(j, "experts")) {
        ExpertModel e;
        e.indices = field(ej, "indices").get<std::vector<Index>>();
        e.X = to_mat(field(ej, "X"));
        e.y = to_vec(field(ej, "y"));
        e.inducing.Xm = to_mat(field(ej, "Xm"));
        e.inducing.Xu = to_mat(field(ej, "Xu"));
        e.lambda_log = to_vec(field(ej, "lambda_log"));
        m.experts.push_back(std::move(e));
      }
      if (m.experts.empty()) {
        throw ParseError("archive: distributed model without experts", 0);
      }
      for (std::size_t i = 0; i < m.experts.size(); ++i) {
        validate(m.view(i));
      }
      break;
    }
    }
    require_dims("archive: normalization width", a.input_dim(), a.norm.x_mean.size());
    return a;
  } catch (const nlohmann::json::exception &e) {
    throw ParseError(std::string("archive: malformed JSON content: ") + e.what(), 0);
  }
}

inline void save_archive(const std::string &path, const ModelArchive &a) {
  std::ofstream out(path);
  if (!out) {
    throw ConfigError("cannot write " + path);
  }
  out << archive_to_json(a).dump(1) << '\n';
  if (!out) {
    throw ConfigError("write failed for " + path);
  }
}

inline ModelArchive load_archive(const std::string &path) {
  std::ifstream in(path);
  if (!in) {
    throw ConfigError("cannot open " + path);
  }
  nlohmann::json j;
  try {
    in >> j;
  } catch (const nlohmann::json::exception &e) {
    throw ParseError(path + ": not valid JSON: " + e.what(), 0);
  }
  return archive_from_json(j);
}

} // namespace vshgp
