#pragma once

// CSV ingestion, model specification and the JSON fit report.

#include <cerrno>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <cstdlib>
#include <fstream>
#include <map>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "cpbs/estimation.hpp"

namespace cpbs {

using ordered_json = nlohmann::ordered_json;

/// Which columns form the regression. Categorical covariates must already be
/// 0/1-encoded columns. An empty `cluster` makes every row its own cluster
/// (the univariate Poisson-Birnbaum-Saunders case).
struct ModelSpec {
  std::string response;
  std::string cluster;
  std::vector<std::string> covariates;
  bool intercept = true;
  LinkFunction link = LinkFunction::log;

  std::vector<std::string> coefficient_names() const {
    std::vector<std::string> names;
    if (intercept) names.emplace_back("(Intercept)");
    names.insert(names.end(), covariates.begin(), covariates.end());
    return names;
  }
};

struct LoadedData {
  ClusteredDataset data;
  std::vector<std::string> coefficient_names;
  std::vector<std::size_t> source_row;  // 1-based CSV data row of each stacked observation
};

namespace detail {

inline std::string trim(std::string s) {
  const auto first = s.find_first_not_of(" \t\r\n");
  if (first == std::string::npos) return {};
  const auto last = s.find_last_not_of(" \t\r\n");
  return s.substr(first, last - first + 1);
}

/// Splits one CSV record; double quotes group commas, "" escapes a quote.
inline std::vector<std::string> split_csv_line(const std::string& line) {
  std::vector<std::string> out;
  std::string field;
  bool quoted = false;
  for (std::size_t i = 0; i < line.size(); ++i) {
    const char ch = line[i];
    if (quoted) {
      if (ch == '"' && i + 1 < line.size() && line[i + 1] == '"') {
        field += '"';
        ++i;
      } else if (ch == '"') {
        quoted = false;
      } else {
        field += ch;
      }
    } else if (ch == '"') {
      quoted = true;
    } else if (ch == ',') {
      out.push_back(trim(field));
      field.clear();
    } else {
      field += ch;
    }
  }
  out.push_back(trim(field));
  return out;
}

inline std::optional<double> parse_real(const std::string& s) {
  if (s.empty()) return std::nullopt;
  const char* begin = s.c_str();
  char* end = nullptr;
  errno = 0;
  const double v = std::strtod(begin, &end);
  if (end == begin || *end != '\0' || errno == ERANGE || !std::isfinite(v)) return std::nullopt;
  return v;
}

inline std::optional<std::int64_t> parse_count(const std::string& s) {
  if (s.empty()) return std::nullopt;
  const char* begin = s.c_str();
  char* end = nullptr;
  errno = 0;
  const long long v = std::strtoll(begin, &end, 10);
  if (end != begin && *end == '\0' && errno == 0) return v < 0 ? std::nullopt : std::optional<std::int64_t>(v);
  // accept integral reals such as "3.0"
  const auto r = parse_real(s);
  if (r && *r >= 0.0 && std::floor(*r) == *r && *r < 9.0e15) return static_cast<std::int64_t>(*r);
  return std::nullopt;
}

inline bool is_missing_token(const std::string& s) {
  return s.empty() || s == "NA" || s == "NaN" || s == "nan" || s == "NAN" || s == "null";
}

}  // namespace detail

/// Reads a comma-delimited UTF-8 file with a header row and groups rows by
/// the cluster column (clusters in order of first appearance, rows in file
/// order). Error codes: io, missing_column, non_integer_response, nan_cell,
/// rank_deficient.
inline LoadedData load_csv(const std::string& path, const ModelSpec& spec) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error(ErrorCode::io, "cannot open '" + path + "'");

  std::string line;
  if (!std::getline(in, line)) throw Error(ErrorCode::io, "'" + path + "' is empty");
  if (line.size() >= 3 && static_cast<unsigned char>(line[0]) == 0xEF && static_cast<unsigned char>(line[1]) == 0xBB &&
      static_cast<unsigned char>(line[2]) == 0xBF)
    line.erase(0, 3);
  const std::vector<std::string> header = detail::split_csv_line(line);
  std::map<std::string, std::size_t> column;
  for (std::size_t i = 0; i < header.size(); ++i) column.emplace(header[i], i);

  auto locate = [&](const std::string& name) {
    const auto it = column.find(name);
    if (it == column.end()) throw Error(ErrorCode::missing_column, "column '" + name + "' not found in '" + path + "'");
    return it->second;
  };
  const std::size_t response_col = locate(spec.response);
  const std::optional<std::size_t> cluster_col =
      spec.cluster.empty() ? std::nullopt : std::optional<std::size_t>(locate(spec.cluster));
  std::vector<std::size_t> covariate_cols;
  for (const auto& c : spec.covariates) covariate_cols.push_back(locate(c));
  const Eigen::Index p = static_cast<Eigen::Index>(covariate_cols.size()) + (spec.intercept ? 1 : 0);
  if (p == 0) throw Error(ErrorCode::config, "model has no covariates and no intercept");

  struct Pending {
    std::string id;
    std::vector<std::int64_t> y;
    std::vector<std::vector<double>> rows;
    std::vector<std::size_t> source;
  };
  std::vector<Pending> groups;
  std::map<std::string, std::size_t> group_index;

  std::size_t row_no = 0;
  while (std::getline(in, line)) {
    if (detail::trim(line).empty()) continue;
    ++row_no;
    const std::vector<std::string> fields = detail::split_csv_line(line);
    if (fields.size() != header.size())
      throw Error(ErrorCode::io, "row " + std::to_string(row_no) + " has " + std::to_string(fields.size()) +
                                     " fields, header has " + std::to_string(header.size()));
    const std::string& ytok = fields[response_col];
    if (detail::is_missing_token(ytok))
      throw Error(ErrorCode::nan_cell, "missing response in row " + std::to_string(row_no));
    const auto y = detail::parse_count(ytok);
    if (!y)
      throw Error(ErrorCode::non_integer_response,
                  "response '" + ytok + "' in row " + std::to_string(row_no) + " is not a non-negative integer");

    std::vector<double> xrow;
    xrow.reserve(static_cast<std::size_t>(p));
    if (spec.intercept) xrow.push_back(1.0);
    for (std::size_t j = 0; j < covariate_cols.size(); ++j) {
      const std::string& tok = fields[covariate_cols[j]];
      const auto v = detail::is_missing_token(tok) ? std::nullopt : detail::parse_real(tok);
      if (!v)
        throw Error(ErrorCode::nan_cell, "column '" + spec.covariates[j] + "' row " + std::to_string(row_no) +
                                             " is not a finite number ('" + tok + "')");
      xrow.push_back(*v);
    }

    const std::string id = cluster_col ? fields[*cluster_col] : std::to_string(row_no);
    if (cluster_col && detail::is_missing_token(id))
      throw Error(ErrorCode::nan_cell, "missing cluster label in row " + std::to_string(row_no));
    auto [it, inserted] = group_index.emplace(id, groups.size());
    if (inserted) groups.push_back(Pending{id, {}, {}, {}});
    Pending& g = groups[it->second];
    g.y.push_back(*y);
    g.rows.push_back(std::move(xrow));
    g.source.push_back(row_no);
  }
  if (groups.empty()) throw Error(ErrorCode::io, "'" + path + "' has no data rows");

  std::vector<ClusteredDataset::Cluster> clusters;
  LoadedData out;
  for (auto& g : groups) {
    MatrixXd X(static_cast<Eigen::Index>(g.rows.size()), p);
    for (std::size_t i = 0; i < g.rows.size(); ++i)
      for (Eigen::Index l = 0; l < p; ++l) X(static_cast<Eigen::Index>(i), l) = g.rows[i][static_cast<std::size_t>(l)];
    out.source_row.insert(out.source_row.end(), g.source.begin(), g.source.end());
    clusters.push_back(ClusteredDataset::Cluster{g.id, std::move(g.y), std::move(X)});
  }
  out.data = ClusteredDataset(std::move(clusters), true);
  out.coefficient_names = spec.coefficient_names();
  return out;
}

/// FNV-1a over the cluster labels, counts and covariate bits, in canonical
/// order, so row order in the file does not change the hash.
inline std::string data_hash(const ClusteredDataset& data) {
  const ClusteredDataset canon = data.canonical().first;
  std::uint64_t h = 1469598103934665603ULL;
  auto mix = [&](const void* bytes, std::size_t len) {
    const auto* b = static_cast<const unsigned char*>(bytes);
    for (std::size_t i = 0; i < len; ++i) {
      h ^= b[i];
      h *= 1099511628211ULL;
    }
  };
  const auto n = static_cast<std::int64_t>(canon.n()), p = static_cast<std::int64_t>(canon.p());
  mix(&n, sizeof n);
  mix(&p, sizeof p);
  for (std::size_t k = 0; k < canon.q(); ++k) {
    const auto c = canon.cluster(k);
    mix(c.id.data(), c.id.size());
    mix("\0", 1);
    for (Eigen::Index j = 0; j < c.size(); ++j) {
      const std::int64_t y = c.y[static_cast<std::size_t>(j)];
      mix(&y, sizeof y);
      for (Eigen::Index l = 0; l < c.X.cols(); ++l) {
        const double v = c.X(j, l);
        mix(&v, sizeof v);
      }
    }
  }
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(h));
  return buf;
}

inline double relativity(double estimate) { return std::exp(estimate); }
inline double z_value(double estimate, double se) { return estimate / se; }
/// Two-sided tail probability of a standard normal.
inline double normal_p_value(double z) { return std::erfc(std::abs(z) / std::sqrt(2.0)); }

struct CoefficientRow {
  std::string name;
  double estimate = 0.0;
  std::optional<double> se, z, p, relativity;
};

/// Everything `fit` emits and `diagnose` reads back.
struct FitReport {
  ModelSpec spec;
  std::vector<CoefficientRow> coefficients;
  double phi = 0.0;
  std::optional<double> phi_se;
  double loglik = 0.0;
  Eigen::Index n = 0;
  std::vector<std::pair<std::string, Eigen::Index>> clusters;
  FitMethod method = FitMethod::em;
  bool converged = false;
  bool at_boundary = false;
  int iterations = 0;
  std::string message;
  int B = 0;
  int bootstrap_dropped = 0;
  std::uint64_t seed = 0;
  double epsilon = 0.0;
  int max_iter = 0;
  std::string data_hash;

  ModelParams params() const {
    ModelParams p;
    p.beta.resize(static_cast<Eigen::Index>(coefficients.size()));
    for (std::size_t i = 0; i < coefficients.size(); ++i) p.beta(static_cast<Eigen::Index>(i)) = coefficients[i].estimate;
    p.phi = phi;
    return p;
  }
};

inline FitReport make_fit_report(const LoadedData& loaded, const ModelSpec& spec, const FitResult& fit,
                                 std::uint64_t seed, const EmConfig& config) {
  FitReport r;
  r.spec = spec;
  const auto names = spec.coefficient_names();
  for (std::size_t i = 0; i < names.size(); ++i) {
    CoefficientRow row;
    row.name = names[i];
    row.estimate = fit.params.beta(static_cast<Eigen::Index>(i));
    if (fit.se) {
      row.se = (*fit.se)(static_cast<Eigen::Index>(i));
      if (*row.se > 0.0) {
        row.z = z_value(row.estimate, *row.se);
        row.p = normal_p_value(*row.z);
      }
    }
    if (!(spec.intercept && i == 0)) row.relativity = relativity(row.estimate);
    r.coefficients.push_back(std::move(row));
  }
  r.phi = fit.params.phi;
  if (fit.se) r.phi_se = (*fit.se)(fit.se->size() - 1);
  r.loglik = fit.loglik;
  r.n = loaded.data.n();
  for (std::size_t k = 0; k < loaded.data.q(); ++k)
    r.clusters.emplace_back(loaded.data.cluster_id(k), loaded.data.cluster_size(k));
  r.method = fit.method;
  r.converged = fit.converged;
  r.at_boundary = fit.at_boundary;
  r.iterations = fit.iterations;
  r.message = fit.message;
  r.B = fit.B;
  r.bootstrap_dropped = fit.bootstrap_dropped;
  r.seed = seed;
  r.epsilon = config.epsilon;
  r.max_iter = config.max_iter;
  r.data_hash = data_hash(loaded.data);
  return r;
}

namespace detail {
inline ordered_json opt(const std::optional<double>& v) { return v ? ordered_json(*v) : ordered_json(nullptr); }
}  // namespace detail

inline ordered_json to_json(const FitReport& r) {
  ordered_json j;
  j["model"] = {{"response", r.spec.response},
                {"cluster", r.spec.cluster.empty() ? ordered_json(nullptr) : ordered_json(r.spec.cluster)},
                {"covariates", r.spec.covariates},
                {"intercept", r.spec.intercept},
                {"link", to_string(r.spec.link)}};
  auto coefs = ordered_json::array();
  for (const auto& c : r.coefficients)
    coefs.push_back({{"name", c.name},
                     {"estimate", c.estimate},
                     {"se", detail::opt(c.se)},
                     {"z", detail::opt(c.z)},
                     {"p", detail::opt(c.p)},
                     {"relativity", detail::opt(c.relativity)}});
  j["coefficients"] = std::move(coefs);
  j["phi"] = {{"estimate", r.phi}, {"se", detail::opt(r.phi_se)}};
  j["loglik"] = r.loglik;
  j["n"] = r.n;
  j["q"] = r.clusters.size();
  auto clusters = ordered_json::array();
  for (const auto& [id, nk] : r.clusters) clusters.push_back({{"id", id}, {"n_k", nk}});
  j["clusters"] = std::move(clusters);
  j["convergence"] = {{"method", to_string(r.method)},
                      {"converged", r.converged},
                      {"iterations", r.iterations},
                      {"effectively_poisson", r.at_boundary},
                      {"message", r.message},
                      {"epsilon", r.epsilon},
                      {"max_iter", r.max_iter}};
  j["bootstrap"] = {{"B", r.B}, {"dropped", r.bootstrap_dropped}, {"seed", r.seed}};
  j["data_hash"] = r.data_hash;
  return j;
}

inline FitReport fit_report_from_json(const nlohmann::json& j) {
  try {
    FitReport r;
    const auto& m = j.at("model");
    r.spec.response = m.at("response").get<std::string>();
    r.spec.cluster = m.at("cluster").is_null() ? std::string{} : m.at("cluster").get<std::string>();
    r.spec.covariates = m.at("covariates").get<std::vector<std::string>>();
    r.spec.intercept = m.at("intercept").get<bool>();
    if (m.at("link").get<std::string>() != "log") throw Error(ErrorCode::config, "unsupported link in fit report");
    for (const auto& c : j.at("coefficients")) {
      CoefficientRow row;
      row.name = c.at("name").get<std::string>();
      row.estimate = c.at("estimate").get<double>();
      if (!c.at("se").is_null()) row.se = c.at("se").get<double>();
      r.coefficients.push_back(std::move(row));
    }
    r.phi = j.at("phi").at("estimate").get<double>();
    r.loglik = j.at("loglik").get<double>();
    r.n = j.at("n").get<Eigen::Index>();
    const auto& conv = j.at("convergence");
    r.method = conv.at("method").get<std::string>() == "direct" ? FitMethod::direct : FitMethod::em;
    r.converged = conv.at("converged").get<bool>();
    r.iterations = conv.at("iterations").get<int>();
    r.epsilon = conv.at("epsilon").get<double>();
    r.max_iter = conv.at("max_iter").get<int>();
    r.data_hash = j.at("data_hash").get<std::string>();
    if (r.coefficients.size() != r.spec.coefficient_names().size())
      throw Error(ErrorCode::config, "fit report coefficients do not match its model");
    return r;
  } catch (const nlohmann::json::exception& e) {
    throw Error(ErrorCode::config, std::string("malformed fit report: ") + e.what());
  }
}

}  // namespace cpbs
