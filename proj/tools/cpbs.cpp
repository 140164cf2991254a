// cpbs: fit, diagnose, simulate and Monte Carlo driver for the clustered
// Poisson-Birnbaum-Saunders regression model.

#include <algorithm>
#include <cstdio>
#include <fstream>
#include <iostream>
#include <memory>
#include <numeric>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <json.hpp>

#include "cpbs/cpbs.hpp"

namespace {

using cpbs::Error;
using cpbs::ErrorCode;
using nlohmann::json;
using nlohmann::ordered_json;

enum Exit : int { ok = 0, not_converged = 2, usage = 3, io = 4, data = 5, estimation = 6, stale = 7 };

int exit_code(ErrorCode code) {
  switch (code) {
    case ErrorCode::config: return usage;
    case ErrorCode::io: return io;
    case ErrorCode::missing_column:
    case ErrorCode::non_integer_response:
    case ErrorCode::nan_cell:
    case ErrorCode::rank_deficient: return data;
    case ErrorCode::stale_fit: return stale;
    case ErrorCode::domain:
    case ErrorCode::dimension:
    case ErrorCode::non_convergence:
    case ErrorCode::too_many_failures: return estimation;
  }
  return estimation;
}

std::string num(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

std::string csv_field(const std::string& s) {
  if (s.find_first_of(",\"\n\r") == std::string::npos) return s;
  std::string out = "\"";
  for (char c : s) {
    if (c == '"') out += '"';
    out += c;
  }
  return out + '"';
}

// Writes to `path`, or stdout when path is empty or "-".
class Sink {
 public:
  explicit Sink(const std::string& path) {
    if (path.empty() || path == "-") return;
    file_ = std::make_unique<std::ofstream>(path, std::ios::binary);
    if (!*file_) throw Error(ErrorCode::io, "cannot open " + path + " for writing");
    path_ = path;
  }
  std::ostream& stream() { return file_ ? *file_ : std::cout; }
  bool to_file() const { return file_ != nullptr; }
  void close() {
    stream().flush();
    if (file_ && !*file_) throw Error(ErrorCode::io, "failed writing " + path_);
  }

 private:
  std::unique_ptr<std::ofstream> file_;
  std::string path_;
};

std::vector<std::string> split_list(const std::string& s) {
  std::vector<std::string> out;
  if (s.empty()) return out;
  std::stringstream ss(s);
  std::string item;
  while (std::getline(ss, item, ',')) {
    item = cpbs::detail::trim(item);
    if (item.empty()) throw Error(ErrorCode::config, "empty entry in list '" + s + "'");
    out.push_back(item);
  }
  return out;
}

// ---------------------------------------------------------------- fit

struct FitArgs {
  std::string data, response, cluster, covariates, method = "em", out;
  bool no_intercept = false;
  int boot = 500;
  std::uint64_t seed = 1;
  double epsilon = 1e-8;
  int max_iter = 500;
  int boot_max_iter = 20000;
  unsigned threads = 0;
};

void print_table(std::ostream& os, const cpbs::FitReport& r) {
  char line[160];
  std::snprintf(line, sizeof line, "%-16s %10s %10s %9s %9s %10s\n", "parameter", "estimate", "se", "z", "p", "relativity");
  os << line;
  auto opt = [](const std::optional<double>& v, const char* f) {
    char b[32];
    if (!v) return std::string("--");
    std::snprintf(b, sizeof b, f, *v);
    return std::string(b);
  };
  for (const auto& c : r.coefficients) {
    std::snprintf(line, sizeof line, "%-16s %10.3f %10s %9s %9s %10s\n", c.name.c_str(), c.estimate, opt(c.se, "%.3f").c_str(),
                  opt(c.z, "%.3f").c_str(), opt(c.p, "%.3f").c_str(), opt(c.relativity, "%.3f").c_str());
    os << line;
  }
  std::snprintf(line, sizeof line, "%-16s %10.3f %10s %9s %9s %10s\n", "phi", r.phi, opt(r.phi_se, "%.3f").c_str(), "--", "--", "--");
  os << line;
  std::snprintf(line, sizeof line, "loglik %.4f  n %ld  q %zu  %s after %d iterations%s\n", r.loglik, static_cast<long>(r.n),
                r.clusters.size(), r.converged ? "converged" : "NOT converged", r.iterations,
                r.at_boundary ? " (phi at lower bound: effectively Poisson)" : "");
  os << line;
}

int run_fit(const FitArgs& a) {
  cpbs::ModelSpec spec;
  spec.response = a.response;
  spec.cluster = a.cluster;
  spec.covariates = split_list(a.covariates);
  spec.intercept = !a.no_intercept;
  if (spec.covariates.empty() && !spec.intercept) throw Error(ErrorCode::config, "model has no columns");
  if (a.boot != 0 && a.boot < 2) throw Error(ErrorCode::config, "--boot must be 0 or at least 2");

  const cpbs::LoadedData loaded = cpbs::load_csv(a.data, spec);
  cpbs::EmConfig config;
  config.epsilon = a.epsilon;
  config.max_iter = a.max_iter;
  config.validate();

  cpbs::FitResult fit;
  if (a.method == "em") {
    fit = cpbs::em_fit(loaded.data, spec.link, config);
  } else {
    cpbs::DirectOptions opts;
    opts.max_iter = std::max(a.max_iter, opts.max_iter);
    fit = cpbs::direct_ml_fit(loaded.data, spec.link, cpbs::poisson_initial_params(loaded.data), opts);
  }
  if (fit.converged && a.boot > 0) {
    // refits start at the estimate but can crawl when a replicate lands near
    // phi = 0; dropping those would understate the SEs
    cpbs::EmConfig boot_config = config;
    boot_config.max_iter = std::max(a.boot_max_iter, a.max_iter);
    fit = cpbs::attach_bootstrap(loaded.data, spec.link, fit, a.boot, a.seed, a.threads, boot_config);
  } else if (!fit.converged && a.boot > 0) {
    fit.message += "; bootstrap skipped";
  }

  cpbs::FitReport report = cpbs::make_fit_report(loaded, spec, fit, a.seed, config);
  if (a.boot == 0) report.B = 0;
  Sink sink(a.out);
  sink.stream() << cpbs::to_json(report).dump(2) << '\n';
  sink.close();
  if (sink.to_file()) print_table(std::cout, report);
  if (!fit.converged) {
    std::cerr << "cpbs fit: " << fit.message << '\n';
    return not_converged;
  }
  return ok;
}

// ---------------------------------------------------------------- diagnose

struct DiagnoseArgs {
  std::string data, fit, prefix;
  int m = 100;
  std::uint64_t seed = 1;
  int max_iter = 20000;
  unsigned threads = 0;
};

cpbs::FitReport read_report(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw Error(ErrorCode::io, "cannot open fit report " + path);
  json j;
  try {
    j = json::parse(in);
  } catch (const json::exception& e) {
    throw Error(ErrorCode::config, "fit report " + path + " is not valid JSON: " + e.what());
  }
  return cpbs::fit_report_from_json(j);
}

int run_diagnose(const DiagnoseArgs& a) {
  const cpbs::FitReport report = read_report(a.fit);
  const cpbs::LoadedData loaded = cpbs::load_csv(a.data, report.spec);
  if (cpbs::data_hash(loaded.data) != report.data_hash)
    throw Error(ErrorCode::stale_fit, "data in " + a.data + " does not match the data the fit was computed on");

  const auto& d = loaded.data;
  cpbs::FitResult fitted;
  fitted.params = report.params();
  fitted.params.validate();
  fitted.converged = report.converged;
  const auto link = report.spec.link;

  // position of each stacked row inside its cluster
  std::vector<std::size_t> cluster_of(static_cast<std::size_t>(d.n()));
  std::vector<Eigen::Index> index_in(static_cast<std::size_t>(d.n()));
  for (std::size_t k = 0; k < d.q(); ++k)
    for (Eigen::Index j = 0; j < d.cluster_size(k); ++j) {
      const auto i = static_cast<std::size_t>(d.cluster_offset(k) + j);
      cluster_of[i] = k;
      index_in[i] = j + 1;
    }
  auto id_cols = [&](Eigen::Index i) {
    const auto u = static_cast<std::size_t>(i);
    return csv_field(d.cluster_id(cluster_of[u])) + ',' + std::to_string(index_in[u]) + ',' +
           std::to_string(loaded.source_row[u]);
  };

  const cpbs::ResidualSet res = cpbs::pearson_residuals(d, fitted.params, link);
  {
    Sink s(a.prefix + "_residuals.csv");
    auto& os = s.stream();
    os << "cluster,index,row,y,lambda_hat,sigma2_hat,r\n";
    for (Eigen::Index i = 0; i < d.n(); ++i)
      os << id_cols(i) << ',' << d.counts()[static_cast<std::size_t>(i)] << ',' << num(res.lambda_hat(i)) << ','
         << num(res.sigma2_hat(i)) << ',' << num(res.r(i)) << '\n';
    s.close();
  }

  cpbs::EnvelopeOptions opts;
  opts.threads = a.threads;
  opts.em.epsilon = report.epsilon;
  opts.em.max_iter = std::max(a.max_iter, report.max_iter);
  const cpbs::EnvelopeBands bands = cpbs::simulated_envelopes(d, fitted, link, a.m, a.seed, opts);
  {
    Sink s(a.prefix + "_envelope.csv");
    auto& os = s.stream();
    os << "rank,cluster,index,row,r_sorted,lo,hi,inside\n";
    for (Eigen::Index i = 0; i < d.n(); ++i)
      os << i + 1 << ',' << id_cols(bands.order[static_cast<std::size_t>(i)]) << ',' << num(bands.sorted_r(i)) << ','
         << num(bands.lo(i)) << ',' << num(bands.hi(i)) << ',' << int(bands.inside[static_cast<std::size_t>(i)]) << '\n';
    os << "# coverage=" << num(bands.coverage) << " m=" << bands.m << " used=" << bands.used << " dropped=" << bands.dropped
       << '\n';
    s.close();
  }

  const cpbs::InfluenceSet inf =
      cpbs::gcd_one_step(d, fitted.params, cpbs::conditional_moments(d, fitted.params, link).delta, link);
  std::vector<Eigen::Index> order(static_cast<std::size_t>(d.n()));
  std::iota(order.begin(), order.end(), Eigen::Index{0});
  std::stable_sort(order.begin(), order.end(), [&](Eigen::Index x, Eigen::Index y) { return inf.gcd1(x) > inf.gcd1(y); });
  {
    Sink s(a.prefix + "_gcd.csv");
    auto& os = s.stream();
    os << "rank,cluster,index,row,y,gcd1\n";
    for (std::size_t r = 0; r < order.size(); ++r)
      os << r + 1 << ',' << id_cols(order[r]) << ',' << d.counts()[static_cast<std::size_t>(order[r])] << ','
         << num(inf.gcd1(order[r])) << '\n';
    s.close();
  }

  std::printf("envelope coverage %.4f (%d of %d simulations used)\n", bands.coverage, bands.used, bands.m);
  std::printf("largest GCD1: cluster %s, index %ld (row %zu), %.6g\n", d.cluster_id(cluster_of[static_cast<std::size_t>(order[0])]).c_str(),
              static_cast<long>(index_in[static_cast<std::size_t>(order[0])]), loaded.source_row[static_cast<std::size_t>(order[0])],
              inf.gcd1(order[0]));
  return ok;
}

// ---------------------------------------------------------------- simulate / mc

struct StudySettings {
  cpbs::McConfig config;
  std::vector<int> q{2, 5, 7};
  std::vector<int> n_k{100, 200, 300};
  std::uint64_t replicate = 0;
};

template <class T>
T get_key(const json& j, const std::string& key) {
  try {
    return j.get<T>();
  } catch (const json::exception&) {
    throw Error(ErrorCode::config, "config key '" + key + "' has the wrong type");
  }
}

std::vector<int> int_or_list(const json& j, const std::string& key) {
  if (j.is_array()) {
    auto v = get_key<std::vector<int>>(j, key);
    if (v.empty()) throw Error(ErrorCode::config, "config key '" + key + "' must not be empty");
    return v;
  }
  return {get_key<int>(j, key)};
}

void apply_config_file(const std::string& path, StudySettings& s) {
  std::ifstream in(path);
  if (!in) throw Error(ErrorCode::io, "cannot open config " + path);
  json j;
  try {
    j = json::parse(in);
  } catch (const json::exception& e) {
    throw Error(ErrorCode::config, "config " + path + " is not valid JSON: " + e.what());
  }
  if (!j.is_object()) throw Error(ErrorCode::config, "config must be a JSON object");
  for (const auto& [key, v] : j.items()) {
    if (key == "q") s.q = int_or_list(v, key);
    else if (key == "n_k") s.n_k = int_or_list(v, key);
    else if (key == "beta") {
      const auto b = get_key<std::vector<double>>(v, key);
      s.config.theta_true.beta = Eigen::Map<const cpbs::VectorXd>(b.data(), static_cast<Eigen::Index>(b.size()));
    } else if (key == "phi") s.config.theta_true.phi = get_key<double>(v, key);
    else if (key == "reps") s.config.reps = get_key<int>(v, key);
    else if (key == "seed") s.config.seed = get_key<std::uint64_t>(v, key);
    else if (key == "replicate") s.replicate = get_key<std::uint64_t>(v, key);
    else if (key == "epsilon") s.config.em.epsilon = get_key<double>(v, key);
    else if (key == "max_iter") s.config.em.max_iter = get_key<int>(v, key);
    else if (key == "covariates") {
      if (!v.is_object()) throw Error(ErrorCode::config, "config key 'covariates' must be an object");
      for (const auto& [ck, cv] : v.items()) {
        const std::string full = "covariates." + ck;
        if (ck == "x1_mean") s.config.covariates.x1_mean = get_key<double>(cv, full);
        else if (ck == "x1_sd") s.config.covariates.x1_sd = get_key<double>(cv, full);
        else if (ck == "x2_prob") s.config.covariates.x2_prob = get_key<double>(cv, full);
        else throw Error(ErrorCode::config, "unknown config key '" + full + "'");
      }
    } else {
      throw Error(ErrorCode::config, "unknown config key '" + key + "'");
    }
  }
}

struct StudyFlags {
  std::string config_path, beta;
  std::vector<int> q, n_k;
  std::optional<double> phi, x1_mean, x1_sd, x2_prob, epsilon;
  std::optional<int> reps, max_iter;
  std::optional<std::uint64_t> seed, replicate;
  unsigned threads = 0;
};

StudySettings resolve(const StudyFlags& f) {
  StudySettings s;
  if (!f.config_path.empty()) apply_config_file(f.config_path, s);
  if (!f.q.empty()) s.q = f.q;
  if (!f.n_k.empty()) s.n_k = f.n_k;
  if (!f.beta.empty()) {
    std::vector<double> b;
    for (const auto& item : split_list(f.beta)) {
      const auto v = cpbs::detail::parse_real(item);
      if (!v) throw Error(ErrorCode::config, "--beta entry '" + item + "' is not a number");
      b.push_back(*v);
    }
    s.config.theta_true.beta = Eigen::Map<const cpbs::VectorXd>(b.data(), static_cast<Eigen::Index>(b.size()));
  }
  if (f.phi) s.config.theta_true.phi = *f.phi;
  if (f.x1_mean) s.config.covariates.x1_mean = *f.x1_mean;
  if (f.x1_sd) s.config.covariates.x1_sd = *f.x1_sd;
  if (f.x2_prob) s.config.covariates.x2_prob = *f.x2_prob;
  if (f.epsilon) s.config.em.epsilon = *f.epsilon;
  if (f.reps) s.config.reps = *f.reps;
  if (f.max_iter) s.config.em.max_iter = *f.max_iter;
  if (f.seed) s.config.seed = *f.seed;
  if (f.replicate) s.replicate = *f.replicate;
  s.config.threads = f.threads;
  try {
    s.config.em.validate();
  } catch (const Error& e) {
    throw Error(ErrorCode::config, e.what());
  }
  return s;
}

void validate_cell(cpbs::McConfig c) {
  try {
    c.validate();
  } catch (const Error& e) {
    throw Error(ErrorCode::config, e.what());
  }
}

int run_simulate(const StudyFlags& f, const std::string& out) {
  StudySettings s = resolve(f);
  if (s.q.size() != 1 || s.n_k.size() != 1) {
    if (f.q.empty() && f.n_k.empty() && f.config_path.empty()) {
      s.q = {7};
      s.n_k = {300};
    } else if (s.q.size() != 1) {
      throw Error(ErrorCode::config, "simulate needs a single value for 'q'");
    } else {
      throw Error(ErrorCode::config, "simulate needs a single value for 'n_k'");
    }
  }
  s.config.q = s.q[0];
  s.config.n_k = s.n_k[0];
  validate_cell(s.config);
  const cpbs::ClusteredDataset d = cpbs::mc_simulate(s.config, s.replicate);

  Sink sink(out);
  auto& os = sink.stream();
  os << "cluster,y,x1,x2\n";
  const auto counts = d.counts();
  for (std::size_t k = 0; k < d.q(); ++k)
    for (Eigen::Index j = 0; j < d.cluster_size(k); ++j) {
      const Eigen::Index i = d.cluster_offset(k) + j;
      os << d.cluster_id(k) << ',' << counts[static_cast<std::size_t>(i)] << ',' << num(d.X()(i, 1)) << ','
         << num(d.X()(i, 2)) << '\n';
    }
  sink.close();
  return ok;
}

int run_mc(const StudyFlags& f, bool full_scale, const std::string& out, const std::string& replicates_path) {
  StudySettings s = resolve(f);
  if (full_scale && !f.reps) s.config.reps = 5000;

  ordered_json doc;
  const auto& cfg = s.config;
  doc["design"] = {{"beta", std::vector<double>(cfg.theta_true.beta.data(), cfg.theta_true.beta.data() + cfg.theta_true.beta.size())},
                   {"phi", cfg.theta_true.phi},
                   {"covariates", {{"x1_mean", cfg.covariates.x1_mean}, {"x1_sd", cfg.covariates.x1_sd}, {"x2_prob", cfg.covariates.x2_prob}}},
                   {"reps", cfg.reps},
                   {"seed", cfg.seed},
                   {"epsilon", cfg.em.epsilon},
                   {"max_iter", cfg.em.max_iter}};
  for (int q : s.q)
    for (int nk : s.n_k) {
      cpbs::McConfig c = cfg;
      c.q = q;
      c.n_k = nk;
      validate_cell(c);
    }

  std::unique_ptr<Sink> reps_sink;
  if (!replicates_path.empty()) reps_sink = std::make_unique<Sink>(replicates_path);
  auto cells = ordered_json::array();
  bool header = true;
  for (int q : s.q)
    for (int nk : s.n_k) {
      cpbs::McConfig c = cfg;
      c.q = q;
      c.n_k = nk;
      const cpbs::McReport rep = cpbs::run_mc_study(c);
      std::fprintf(stderr, "q=%d n_k=%d: %d replicates, %d failed, %d hit max_iter\n", q, nk, rep.reps, rep.failures,
                   rep.non_converged);
      cells.push_back(cpbs::to_json(rep));
      if (reps_sink) {
        cpbs::write_replicates_csv(reps_sink->stream(), rep, header);
        header = false;
      }
    }
  if (reps_sink) reps_sink->close();
  doc["cells"] = std::move(cells);
  Sink sink(out);
  sink.stream() << doc.dump(2) << '\n';
  sink.close();
  return ok;
}

void add_study_flags(CLI::App* cmd, StudyFlags& f, bool grid) {
  cmd->add_option("--config", f.config_path, "JSON config file (see schema/mc_config.schema.json)")->check(CLI::ExistingFile);
  if (grid) {
    cmd->add_option("--q", f.q, "numbers of clusters (grid)")->delimiter(',');
    cmd->add_option("--n-k", f.n_k, "cluster sizes (grid)")->delimiter(',');
  } else {
    cmd->add_option("--q", f.q, "number of clusters")->expected(1);
    cmd->add_option("--n-k", f.n_k, "rows per cluster")->expected(1);
  }
  cmd->add_option("--beta", f.beta, "true coefficients b0,b1,b2");
  cmd->add_option("--phi", f.phi, "true dispersion");
  cmd->add_option("--x1-mean", f.x1_mean);
  cmd->add_option("--x1-sd", f.x1_sd);
  cmd->add_option("--x2-prob", f.x2_prob);
  cmd->add_option("--seed", f.seed);
  cmd->add_option("--threads", f.threads, "worker threads (default $CPBS_THREADS or all cores)");
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Clustered Poisson-Birnbaum-Saunders regression"};
  app.require_subcommand(1);
  app.set_version_flag("--version", "cpbs 1.0.0");

  FitArgs fa;
  auto* fit = app.add_subcommand("fit", "fit the model to a CSV file and emit a JSON report");
  fit->add_option("--data", fa.data, "input CSV")->required();
  fit->add_option("--response", fa.response, "count column")->required();
  fit->add_option("--cluster", fa.cluster, "cluster column (omit: one row per cluster)");
  fit->add_option("--covariates", fa.covariates, "comma-separated covariate columns (pre-encoded 0/1 for categories)");
  fit->add_flag("--no-intercept", fa.no_intercept);
  fit->add_option("--method", fa.method, "em or direct")->check(CLI::IsMember({"em", "direct"}))->capture_default_str();
  fit->add_option("--boot", fa.boot, "bootstrap replicates (0 disables)")->capture_default_str();
  fit->add_option("--seed", fa.seed)->capture_default_str();
  fit->add_option("--epsilon", fa.epsilon)->capture_default_str();
  fit->add_option("--max-iter", fa.max_iter)->capture_default_str();
  fit->add_option("--boot-max-iter", fa.boot_max_iter, "EM iteration budget of each bootstrap refit")->capture_default_str();
  fit->add_option("--out", fa.out, "report path (default stdout)");
  fit->add_option("--threads", fa.threads, "worker threads (default $CPBS_THREADS or all cores)");

  DiagnoseArgs da;
  auto* diagnose = app.add_subcommand("diagnose", "residuals, simulated envelopes and influence for a saved fit");
  diagnose->add_option("--data", da.data, "the CSV the fit was computed on")->required();
  diagnose->add_option("--fit", da.fit, "fit report JSON")->required();
  diagnose->add_option("--envelope-m", da.m, "envelope simulations")->capture_default_str();
  diagnose->add_option("--seed", da.seed)->capture_default_str();
  diagnose->add_option("--out-prefix", da.prefix, "writes PREFIX_residuals.csv, PREFIX_envelope.csv, PREFIX_gcd.csv")->required();
  diagnose->add_option("--max-iter", da.max_iter, "EM iteration budget of each envelope refit")->capture_default_str();
  diagnose->add_option("--threads", da.threads);

  StudyFlags sf;
  std::string sim_out;
  auto* simulate = app.add_subcommand("simulate", "write one synthetic dataset from the simulation design");
  add_study_flags(simulate, sf, false);
  simulate->add_option("--replicate", sf.replicate, "replicate index");
  simulate->add_option("--out", sim_out, "CSV path (default stdout)");

  StudyFlags mf;
  bool full_scale = false;
  std::string mc_out, mc_reps;
  auto* mc = app.add_subcommand("mc", "Monte Carlo study of the EM estimator over a (q, n_k) grid");
  add_study_flags(mc, mf, true);
  mc->add_option("--reps", mf.reps, "replications per cell (default 500)");
  mc->add_option("--epsilon", mf.epsilon);
  mc->add_option("--max-iter", mf.max_iter);
  mc->add_flag("--full-scale", full_scale, "5000 replications per cell");
  mc->add_option("--out", mc_out, "JSON report path (default stdout)");
  mc->add_option("--replicates", mc_reps, "per-replicate estimates CSV");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int rc = app.exit(e);
    return rc == 0 ? ok : usage;
  }

  try {
    if (*fit) return run_fit(fa);
    if (*diagnose) return run_diagnose(da);
    if (*simulate) return run_simulate(sf, sim_out);
    if (*mc) return run_mc(mf, full_scale, mc_out, mc_reps);
  } catch (const Error& e) {
    std::cerr << "cpbs: " << e.what() << '\n';
    return exit_code(e.code());
  } catch (const std::exception& e) {
    std::cerr << "cpbs: " << e.what() << '\n';
    return estimation;
  }
  return usage;
}
