// vshgp command-line front end: train, predict, eval, check-grads, bench.

#include <CLI11.hpp>

#include <chrono>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <optional>
#include <set>
#include <sstream>
#include <string>
#include <thread>
#include <vector>

#include "vshgp/vshgp.hpp"

namespace fs = std::filesystem;
using namespace vshgp;

namespace {

enum ExitCode { kOk = 0, kUnexpected = 1, kUsage = 2, kNumerical = 3 };

std::string fmt(double v) {
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

std::string trim(const std::string &s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string::npos) return "";
  const auto e = s.find_last_not_of(" \t\r");
  return s.substr(b, e - b + 1);
}

std::vector<std::string> split_list(const std::string &s, char sep) {
  std::vector<std::string> out;
  std::stringstream ss(s);
  std::string item;
  while (std::getline(ss, item, sep)) {
    item = trim(item);
    if (!item.empty()) out.push_back(item);
  }
  return out;
}

double parse_real(const std::string &s, const std::string &what) {
  double v = 0.0;
  if (!detail::parse_double(s, v)) throw ConfigError(what + " must be a number, got '" + s + "'");
  return v;
}

long parse_count(const std::string &s, const std::string &what) {
  const double v = parse_real(s, what);
  if (v < 1 || v != std::floor(v)) {
    throw ConfigError(what + " must be a positive integer, got '" + s + "'");
  }
  return static_cast<long>(v);
}

const std::set<std::string> kKnownKeys = {
    "model",          "data",           "target_column",   "seed",
    "workers",        "out",            "m",               "u",
    "experts",        "m0",             "u0",              "batch",
    "iterations",     "adam_step",      "gamma_initial",   "gamma_final",
    "gamma_ramp",     "full_elbo_every", "stage1",         "stage2",
    "lengthscale",    "normalized_sinc", "quadrature_nodes", "density",
    "per_point",      "grid",           "archive",         "bench_models",
    "bench_sizes",    "test_fraction",  "grad_seeds",      "grad_tolerance",
    "flip_block",     "wolfe_c1",       "wolfe_c2"};

/// Key-value run configuration: a file of `key = value` lines (# comments)
/// with command-line overrides applied on top.
class RunConfig {
public:
  static RunConfig from_file(const std::string &path) {
    RunConfig c;
    std::ifstream in(path);
    if (!in) throw ConfigError("cannot open config file " + path);
    std::string line;
    long lineno = 0;
    while (std::getline(in, line)) {
      ++lineno;
      const auto hash = line.find('#');
      if (hash != std::string::npos) line.erase(hash);
      line = trim(line);
      if (line.empty()) continue;
      const auto eq = line.find('=');
      if (eq == std::string::npos) {
        throw ParseError(path + ": expected key = value", lineno);
      }
      c.set(trim(line.substr(0, eq)), trim(line.substr(eq + 1)));
    }
    return c;
  }

  void set(const std::string &key, const std::string &value) {
    if (!kKnownKeys.count(key)) throw ConfigError("config: unknown key '" + key + "'");
    values_[key] = value;
  }

  bool has(const std::string &key) const { return values_.count(key) > 0; }

  std::string str(const std::string &key, const std::string &def) const {
    const auto it = values_.find(key);
    return it == values_.end() ? def : it->second;
  }

  std::string required(const std::string &key) const {
    if (!has(key)) throw ConfigError("config: missing required field '" + key + "'");
    return values_.at(key);
  }

  long integer(const std::string &key, long def) const {
    if (!has(key)) return def;
    const auto &s = values_.at(key);
    std::size_t pos = 0;
    long v = 0;
    try {
      v = std::stol(s, &pos);
    } catch (const std::exception &) {
      pos = 0;
    }
    if (pos != s.size() || s.empty()) {
      throw ConfigError("config: field '" + key + "' must be an integer, got '" + s + "'");
    }
    return v;
  }

  long positive(const std::string &key, long def) const {
    const long v = integer(key, def);
    if (v < 1) throw ConfigError("config: field '" + key + "' must be positive");
    return v;
  }

  long non_negative(const std::string &key, long def) const {
    const long v = integer(key, def);
    if (v < 0) throw ConfigError("config: field '" + key + "' must be >= 0");
    return v;
  }

  double real(const std::string &key, double def) const {
    if (!has(key)) return def;
    return parse_real(values_.at(key), "config: field '" + key + "'");
  }

  bool flag(const std::string &key, bool def) const {
    if (!has(key)) return def;
    const auto &s = values_.at(key);
    if (s == "1" || s == "true" || s == "yes") return true;
    if (s == "0" || s == "false" || s == "no") return false;
    throw ConfigError("config: field '" + key + "' must be true or false");
  }

private:
  std::map<std::string, std::string> values_;
};

/// Flags shared by every subcommand; each one overrides the config file.
struct CommonFlags {
  std::string config, model, data, out, archive, grid, flip;
  std::string seed, workers, m, u, experts, batch;
  std::vector<std::pair<std::string, std::string *>> bindings;

  void attach(CLI::App *app, bool with_archive) {
    app->add_option("--config", config, "key = value run configuration file");
    auto bind = [&](const char *flag, const char *key, std::string &target, const char *help) {
      app->add_option(flag, target, help);
      bindings.emplace_back(key, &target);
    };
    bind("--model", "model", model, "model kind: vshgp, svshgp or dvshgp");
    bind("--data", "data", data, "CSV path or generator spec (toy1d:N, sinc2d:N)");
    bind("--seed", "seed", seed, "top-level seed");
    bind("--workers", "workers", workers, "worker threads (default: VSHGP_WORKERS or all cores)");
    bind("--out", "out", out, "output directory or file");
    bind("--m", "m", m, "inducing points for f");
    bind("--u", "u", u, "inducing points for g");
    bind("--experts", "experts", experts, "number of experts (dvshgp)");
    bind("--batch", "batch", batch, "mini-batch size (svshgp)");
    if (with_archive) {
      bind("--archive", "archive", archive, "trained model archive");
      bind("--grid", "grid", grid, "lo:hi:count tensor grid of inputs");
    }
  }

  RunConfig resolve() const {
    RunConfig c = config.empty() ? RunConfig{} : RunConfig::from_file(config);
    for (const auto &[key, value] : bindings) {
      if (!value->empty()) c.set(key, *value);
    }
    return c;
  }
};

std::uint64_t seed_of(const RunConfig &c) {
  const long s = c.integer("seed", 1);
  if (s < 0) throw ConfigError("config: field 'seed' must be >= 0");
  return static_cast<std::uint64_t>(s);
}

std::size_t worker_count(const RunConfig &c) {
  long w = 0;
  if (c.has("workers")) {
    w = c.positive("workers", 1);
  } else if (const char *env = std::getenv("VSHGP_WORKERS"); env && *env) {
    w = parse_count(env, "VSHGP_WORKERS");
  } else {
    w = std::max(1u, std::thread::hardware_concurrency());
  }
  return static_cast<std::size_t>(w);
}

/// "toy1d:N", "sinc2d:N" or a CSV path.
Dataset load_data(const RunConfig &c, std::uint64_t seed) {
  const std::string spec = c.required("data");
  const bool normalized = c.flag("normalized_sinc", false);
  const auto colon = spec.find(':');
  const std::string head = spec.substr(0, colon);
  if (colon != std::string::npos && (head == "toy1d" || head == "sinc2d")) {
    const long count = parse_count(spec.substr(colon + 1), "generator size");
    const auto s = derive_seed(seed, kStreamData);
    return head == "toy1d" ? gen_toy1d(count, s, normalized) : gen_sinc2d(count, s, normalized);
  }
  return load_csv(spec, c.integer("target_column", -1));
}

ModelKind kind_of(const RunConfig &c) { return parse_model_kind(c.required("model")); }

void write_kv(const std::string &path, const std::vector<std::pair<std::string, std::string>> &kv) {
  std::ofstream out(path);
  if (!out) throw ConfigError("cannot write " + path);
  for (const auto &[k, v] : kv) out << k << " = " << v << '\n';
}

struct TrainOutcome {
  ModelArchive archive;
  double final_elbo = 0.0;
  double seconds = 0.0;
  std::vector<std::string> trace_header;
  std::vector<std::vector<double>> trace;
  std::vector<std::pair<std::string, std::string>> sizes;
};

TrainConfig cgd_config(const RunConfig &c) {
  TrainConfig t;
  t.stage1_line_searches = static_cast<int>(c.non_negative("stage1", t.stage1_line_searches));
  t.stage2_line_searches = static_cast<int>(c.non_negative("stage2", t.stage2_line_searches));
  t.c1 = c.real("wolfe_c1", t.c1);
  t.c2 = c.real("wolfe_c2", t.c2);
  if (!(0.0 < t.c1 && t.c1 < t.c2 && t.c2 < 1.0)) {
    throw ConfigError("config: Wolfe constants need 0 < wolfe_c1 < wolfe_c2 < 1");
  }
  return t;
}

void cgd_trace(const TrainResult &r, TrainOutcome &o) {
  o.trace_header = {"iteration", "elbo", "seconds", "stage"};
  for (const auto &row : r.trace) {
    o.trace.push_back({static_cast<double>(row.iteration), row.elbo, row.seconds,
                       row.stage == "stage1" ? 1.0 : 2.0});
  }
}

TrainOutcome train_model(const RunConfig &c, const Dataset &ds, WorkerPool &pool) {
  const auto seed = seed_of(c);
  InitOptions init;
  init.lengthscale = c.real("lengthscale", init.lengthscale);
  const MatrixXd X = ds.X_normalized();
  const VectorXd y = ds.y_normalized();
  TrainOutcome o;
  o.archive.kind = kind_of(c);
  o.archive.norm = ds.norm;
  try {
    switch (o.archive.kind) {
    case ModelKind::Vshgp: {
      const Index m = c.positive("m", 20), u = c.positive("u", 20);
      o.archive.vshgp = init_vshgp(X, y, m, u, seed, init);
      const auto r = train_vshgp(o.archive.vshgp, cgd_config(c));
      o.final_elbo = r.final_elbo;
      o.seconds = r.seconds;
      cgd_trace(r, o);
      o.sizes = {{"m", std::to_string(m)}, {"u", std::to_string(u)}};
      break;
    }
    case ModelKind::Svshgp: {
      const Index m = c.positive("m", 20), u = c.positive("u", 20);
      o.archive.svshgp = make_svshgp(init_vshgp(X, y, m, u, seed, init));
      SvshgpConfig cfg;
      cfg.batch_size = c.positive("batch", cfg.batch_size);
      cfg.iterations = static_cast<int>(c.non_negative("iterations", cfg.iterations));
      cfg.adam_step = c.real("adam_step", cfg.adam_step);
      cfg.schedule.gamma_initial = c.real("gamma_initial", cfg.schedule.gamma_initial);
      cfg.schedule.gamma_final = c.real("gamma_final", cfg.schedule.gamma_final);
      cfg.schedule.ramp_iterations = c.real("gamma_ramp", cfg.schedule.ramp_iterations);
      cfg.full_elbo_every = static_cast<int>(c.non_negative("full_elbo_every", 0));
      cfg.seed = derive_seed(seed, kStreamBatches);
      const auto r = train_svshgp(o.archive.svshgp, cfg);
      o.final_elbo = elbo_factorized(o.archive.svshgp);
      o.seconds = r.seconds;
      o.trace_header = {"iteration", "elbo", "full_elbo", "seconds"};
      for (const auto &row : r.trace) {
        o.trace.push_back({static_cast<double>(row.iteration), row.elbo, row.full_elbo,
                           row.seconds});
      }
      o.sizes = {{"m", std::to_string(m)},
                 {"u", std::to_string(u)},
                 {"batch", std::to_string(std::min<Index>(cfg.batch_size, ds.n()))},
                 {"iterations", std::to_string(cfg.iterations)}};
      break;
    }
    case ModelKind::Dvshgp: {
      DvshgpSizes sizes;
      sizes.M = c.positive("experts", 1);
      sizes.m0 = c.non_negative("m0", c.non_negative("m", 0));
      sizes.u0 = c.non_negative("u0", c.non_negative("u", 0));
      auto init_out = init_dvshgp(X, y, sizes, seed, init);
      const auto &s = init_out.sizes;
      o.archive.dvshgp = std::move(init_out.model);
      o.archive.manifest = {sizes.M, init_out.partition.size(), ds.n() / sizes.M, s.m0, s.u0};
      const auto r = train_dvshgp(o.archive.dvshgp, cgd_config(c), &pool);
      o.final_elbo = r.final_elbo;
      o.seconds = r.seconds;
      cgd_trace(r, o);
      o.sizes = {{"experts_requested", std::to_string(sizes.M)},
                 {"experts_effective", std::to_string(o.archive.manifest.effective_M)},
                 {"n0", std::to_string(o.archive.manifest.n0)},
                 {"m0", std::to_string(s.m0)},
                 {"u0", std::to_string(s.u0)}};
      break;
    }
    }
  } catch (const NumericalError &e) {
    throw NumericalError(std::string("train ") + to_string(o.archive.kind) + ": " + e.what());
  }
  return o;
}

int cmd_train(const RunConfig &c) {
  const auto seed = seed_of(c);
  const auto ds = load_data(c, seed);
  WorkerPool pool(worker_count(c));
  const auto o = train_model(c, ds, pool);
  const fs::path dir = c.str("out", "run");
  fs::create_directories(dir);
  save_archive((dir / "model.json").string(), o.archive);
  write_table((dir / "trace.csv").string(), o.trace_header, [&] {
    MatrixXd T(static_cast<Index>(o.trace.size()), static_cast<Index>(o.trace_header.size()));
    for (std::size_t i = 0; i < o.trace.size(); ++i) {
      for (std::size_t j = 0; j < o.trace_header.size(); ++j) {
        T(static_cast<Index>(i), static_cast<Index>(j)) = o.trace[i][j];
      }
    }
    return T;
  }());
  std::vector<std::pair<std::string, std::string>> summary = {
      {"model", to_string(o.archive.kind)},
      {"data", ds.provenance},
      {"seed", std::to_string(seed)},
      {"n", std::to_string(ds.n())},
      {"d", std::to_string(ds.d())},
      {"final_elbo", fmt(o.final_elbo)},
      {"trace_rows", std::to_string(o.trace.size())},
      {"seconds", fmt(o.seconds)}};
  summary.insert(summary.end(), o.sizes.begin(), o.sizes.end());
  write_kv((dir / "summary.txt").string(), summary);
  std::cout << "trained " << to_string(o.archive.kind) << " on " << ds.n()
            << " points: final elbo " << fmt(o.final_elbo) << " in " << o.seconds << " s\n";
  return kOk;
}

/// Tensor grid with the same lo:hi:count axis in every input dimension.
MatrixXd grid_inputs(const std::string &spec, Index d) {
  const auto parts = split_list(spec, ':');
  if (parts.size() != 3) throw ConfigError("config: field 'grid' must be lo:hi:count");
  const VectorXd axis = linspace(parse_real(parts[0], "grid lower bound"),
                                 parse_real(parts[1], "grid upper bound"),
                                 parse_count(parts[2], "grid count"));
  const Index k = axis.size();
  Index total = 1;
  for (Index j = 0; j < d; ++j) total *= k;
  MatrixXd X(total, d);
  for (Index i = 0; i < total; ++i) {
    Index r = i;
    for (Index j = d - 1; j >= 0; --j) {
      X(i, j) = axis(r % k);
      r /= k;
    }
  }
  return X;
}

/// Prediction inputs: a grid, or a CSV whose columns are the inputs
/// (an extra trailing target column is ignored).
MatrixXd prediction_inputs(const RunConfig &c, Index d) {
  if (c.has("grid")) return grid_inputs(c.str("grid", ""), d);
  const auto t = read_table(c.required("data"));
  if (t.values.cols() == d + 1) return t.values.leftCols(d);
  require_dims("predict: input columns", d, t.values.cols());
  return t.values;
}

int cmd_predict(const RunConfig &c) {
  const auto a = load_archive(c.required("archive"));
  const Index d = a.input_dim();
  const MatrixXd X = prediction_inputs(c, d);
  WorkerPool pool(worker_count(c));
  const auto p = predict_archive(a, X, &pool);
  const double ys = a.norm.y_std, ym = a.norm.y_mean;
  std::vector<std::string> header;
  for (Index j = 0; j < d; ++j) header.push_back("x" + std::to_string(j + 1));
  for (const char *h : {"mu", "var", "mu_f", "var_f", "mu_g", "var_g"}) header.push_back(h);
  MatrixXd T(X.rows(), d + 6);
  T.leftCols(d) = X;
  T.col(d) = p.mean;
  T.col(d + 1) = p.var;
  T.col(d + 2) = (p.latent.mu_f * ys).array() + ym;
  T.col(d + 3) = p.latent.var_f * (ys * ys);
  T.col(d + 4) = p.latent.mu_g.array() + 2.0 * std::log(ys);
  T.col(d + 5) = p.latent.var_g;
  const std::string out = c.str("out", "predictions.csv");
  write_table(out, header, T);
  const auto failed = std::count(p.ok.begin(), p.ok.end(), false);
  std::cout << "wrote " << X.rows() << " predictions to " << out;
  if (failed > 0) std::cout << " (" << failed << " points failed aggregation)";
  std::cout << '\n';
  return kOk;
}

int cmd_eval(const RunConfig &c) {
  const auto a = load_archive(c.required("archive"));
  const auto ds = load_csv(c.required("data"), c.integer("target_column", -1));
  WorkerPool pool(worker_count(c));
  const auto p = predict_archive(a, ds.X, &pool);
  const std::string density = c.str("density", "quadrature");
  if (density != "quadrature" && density != "gaussian") {
    throw ConfigError("config: field 'density' must be quadrature or gaussian");
  }
  const int nodes = static_cast<int>(c.positive("quadrature_nodes", kDefaultQuadratureNodes));
  const VectorXd lp = log_densities(a, p, ds.y, nodes, density == "gaussian");
  std::vector<Index> good;
  for (Index i = 0; i < ds.n(); ++i) {
    if (p.ok[static_cast<std::size_t>(i)]) good.push_back(i);
  }
  if (good.size() < 2) throw NumericalError("eval: fewer than two points could be predicted");
  VectorXd y(static_cast<Index>(good.size())), mu(y.size()), lg(y.size());
  for (Index k = 0; k < y.size(); ++k) {
    const Index i = good[static_cast<std::size_t>(k)];
    y(k) = ds.y(i);
    mu(k) = p.mean(i);
    lg(k) = lp(i);
  }
  const double train_var = a.norm.y_std * a.norm.y_std;
  const std::string out = c.str("out", "report.txt");
  write_kv(out, {{"model", to_string(a.kind)},
                 {"n", std::to_string(ds.n())},
                 {"evaluated", std::to_string(y.size())},
                 {"smse", fmt(smse(y, mu))},
                 {"msll", fmt(msll(y, lg, a.norm.y_mean, train_var))},
                 {"mean_log_density", fmt(lg.mean())},
                 {"density", density}});
  if (c.has("per_point")) {
    MatrixXd T(ds.n(), 4);
    T.col(0) = ds.y;
    T.col(1) = p.mean;
    T.col(2) = p.var;
    T.col(3) = lp;
    write_table(c.str("per_point", ""), {"y", "mu", "var", "log_density"}, T);
  }
  std::cout << "smse " << fmt(smse(y, mu)) << "  msll "
            << fmt(msll(y, lg, a.norm.y_mean, train_var)) << '\n';
  return kOk;
}

int cmd_check_grads(const RunConfig &c) {
  GradCheckOptions opt;
  opt.seeds = static_cast<unsigned>(c.positive("grad_seeds", opt.seeds));
  opt.first_seed = static_cast<unsigned>(c.non_negative("seed", 0));
  opt.tolerance = c.real("grad_tolerance", opt.tolerance);
  opt.flip_block = c.str("flip_block", "");
  const auto rows = check_gradients(opt);
  if (!opt.flip_block.empty()) {
    const bool known = std::any_of(rows.begin(), rows.end(), [&](const GradCheckRow &r) {
      return r.suite + "/" + r.block == opt.flip_block;
    });
    if (!known) throw ConfigError("config: flip_block '" + opt.flip_block + "' names no block");
  }
  std::ostringstream report;
  bool all = true;
  for (const auto &r : rows) {
    char line[160];
    std::snprintf(line, sizeof line, "%-4s %-8s %-8s seeds=%u worst=%.3e (seed %u)\n",
                  r.pass ? "PASS" : "FAIL", r.suite.c_str(), r.block.c_str(), r.seeds, r.worst,
                  r.worst_seed);
    report << line;
    all = all && r.pass;
  }
  report << (all ? "all gradient blocks agree" : "GRADIENT MISMATCH") << " (tolerance "
         << opt.tolerance << ")\n";
  std::cout << report.str();
  if (c.has("out")) {
    std::ofstream(c.str("out", "")) << report.str();
  }
  if (!all) {
    std::cerr << "check-grads: analytic and finite-difference gradients disagree\n";
    return kNumerical;
  }
  return kOk;
}

int cmd_bench(const RunConfig &base) {
  const auto models = split_list(base.str("bench_models", "vshgp,svshgp,dvshgp"), ',');
  const auto sizes = split_list(base.str("bench_sizes", "500,1000"), ',');
  if (models.empty() || sizes.empty()) {
    throw ConfigError("config: bench_models and bench_sizes must be non-empty");
  }
  const std::string gen = base.str("data", "toy1d");
  if (gen != "toy1d" && gen != "sinc2d") {
    throw ConfigError("config: bench 'data' must be a generator name (toy1d or sinc2d)");
  }
  const double test_fraction = base.real("test_fraction", 0.2);
  const auto seed = seed_of(base);
  WorkerPool pool(worker_count(base));
  std::ofstream out(base.str("out", "bench.csv"));
  if (!out) throw ConfigError("cannot write " + base.str("out", "bench.csv"));
  out << "model,n,train_seconds,elbo,smse,msll\n";
  std::cout << "model    n       seconds     smse      msll\n";
  for (const auto &model : models) {
    parse_model_kind(model);
    for (const auto &size : sizes) {
      RunConfig c = base;
      c.set("model", model);
      c.set("data", gen + ":" + size);
      const auto ds = load_data(c, seed);
      const auto parts = split_fraction(ds, test_fraction, derive_seed(seed, kStreamSplit));
      const auto o = train_model(c, parts.train, pool);
      double e_smse = NAN, e_msll = NAN;
      if (parts.test.n() >= 2) {
        const auto p = predict_archive(o.archive, parts.test.X, &pool);
        const VectorXd lp = log_densities(o.archive, p, parts.test.y);
        e_smse = smse(parts.test.y, p.mean);
        e_msll = msll(parts.test.y, lp, o.archive.norm.y_mean,
                      o.archive.norm.y_std * o.archive.norm.y_std);
      }
      out << model << ',' << ds.n() << ',' << fmt(o.seconds) << ',' << fmt(o.final_elbo) << ','
          << fmt(e_smse) << ',' << fmt(e_msll) << '\n';
      char line[160];
      std::snprintf(line, sizeof line, "%-8s %-7ld %-11.4f %-9.4f %-9.4f\n", model.c_str(),
                    static_cast<long>(ds.n()), o.seconds, e_smse, e_msll);
      std::cout << line;
    }
  }
  return kOk;
}

} // namespace

int main(int argc, char **argv) {
  CLI::App app{"Heteroscedastic sparse GP regression: VSHGP, SVSHGP and DVSHGP"};
  app.require_subcommand(1);
  struct Sub {
    CLI::App *app;
    CommonFlags flags;
    int (*run)(const RunConfig &);
  };
  std::vector<Sub> subs;
  subs.reserve(5);
  auto add = [&](const char *name, const char *help, bool archive, int (*run)(const RunConfig &)) {
    subs.push_back({app.add_subcommand(name, help), {}, run});
    subs.back().flags.attach(subs.back().app, archive);
  };
  add("train", "train a model and write model.json, trace.csv and summary.txt", false, cmd_train);
  add("predict", "predict at CSV inputs or a grid", true, cmd_predict);
  add("eval", "SMSE and MSLL of an archived model on a test CSV", true, cmd_eval);
  add("check-grads", "finite-difference check of every gradient block", false, cmd_check_grads);
  add("bench", "train and score every (model, size) combination", false, cmd_bench);
  CLI::App *check = subs[3].app;
  std::string grad_seeds;
  check->add_option("--flip", subs[3].flags.flip, "negate one analytic block (suite/block)");
  check->add_option("--seeds", grad_seeds, "random model states per block");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError &e) {
    const int rc = app.exit(e);
    return rc == 0 ? kOk : kUsage;
  }
  try {
    for (auto &s : subs) {
      if (!s.app->parsed()) continue;
      RunConfig c = s.flags.resolve();
      if (!s.flags.flip.empty()) c.set("flip_block", s.flags.flip);
      if (!grad_seeds.empty()) c.set("grad_seeds", grad_seeds);
      return s.run(c);
    }
  } catch (const ConfigError &e) {
    std::cerr << "error: " << e.what() << '\n';
    return kUsage;
  } catch (const ParseError &e) {
    std::cerr << "error: " << e.what() << '\n';
    return kUsage;
  } catch (const DimensionError &e) {
    std::cerr << "error: " << e.what() << '\n';
    return kUsage;
  } catch (const NumericalError &e) {
    std::cerr << "numerical failure: " << e.what() << '\n';
    return kNumerical;
  } catch (const std::exception &e) {
    std::cerr << "unexpected error: " << e.what() << '\n';
    return kUnexpected;
  }
  return kUnexpected;
}
