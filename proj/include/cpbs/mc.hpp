#pragma once

// Monte Carlo study of the EM estimator under the two-covariate design:
// log mu = b0 + b1 x1 + b2 x2, x1 ~ N(3.7, 0.2), x2 ~ Bernoulli(0.45),
// covariates drawn once and held fixed across replications.

#include <cmath>
#include <cstdint>
#include <cstdio>
#include <ostream>
#include <random>
#include <string>
#include <vector>

#include <json.hpp>

#include "cpbs/estimation.hpp"

namespace cpbs {

struct CovariateSpec {
  double x1_mean = 3.7;
  double x1_sd = 0.2;
  double x2_prob = 0.45;
};

struct McConfig {
  int q = 7;
  int n_k = 300;
  ModelParams theta_true{(VectorXd(3) << 3.0, -1.25, 0.75).finished(), 0.45};
  int reps = 500;
  CovariateSpec covariates{};
  std::uint64_t seed = 1;
  unsigned threads = 0;
  EmConfig em{};

  void validate() const {
    if (q < 1) throw Error(ErrorCode::config, "q must be at least 1");
    if (n_k < 1) throw Error(ErrorCode::config, "n_k must be at least 1");
    if (reps < 1) throw Error(ErrorCode::config, "reps must be at least 1");
    if (theta_true.beta.size() != 3) throw Error(ErrorCode::config, "beta must have 3 entries (intercept, x1, x2)");
    theta_true.validate();
    if (!(covariates.x1_sd >= 0.0)) throw Error(ErrorCode::config, "x1 sd must be non-negative");
    if (!(covariates.x2_prob >= 0.0 && covariates.x2_prob <= 1.0))
      throw Error(ErrorCode::config, "x2 probability must lie in [0, 1]");
  }
};

struct McParameterSummary {
  std::string name;
  double truth = 0.0;
  double mean = 0.0;
  double bias = 0.0;
  double rmse = 0.0;
};

struct McReport {
  int q = 0;
  int n_k = 0;
  int reps = 0;
  int failures = 0;       // replicates whose fit threw; excluded
  int non_converged = 0;  // hit max_iter; estimates kept
  std::vector<McParameterSummary> parameters;
  std::vector<int> replicate;  // index of each kept replicate
  MatrixXd estimates;          // kept replicates x (beta..., phi)
};

/// Fixed design of the study: q clusters of n_k rows [1, x1, x2].
/// No rank check, so degenerate tiny designs can still be simulated.
inline ClusteredDataset mc_design(int q, int n_k, const CovariateSpec& cov, std::uint64_t seed) {
  Rng rng = make_stream(seed, 0, 0xC0);
  std::normal_distribution<double> x1(cov.x1_mean, cov.x1_sd);
  std::bernoulli_distribution x2(cov.x2_prob);
  std::vector<ClusteredDataset::Cluster> clusters;
  for (int k = 0; k < q; ++k) {
    ClusteredDataset::Cluster c{"cluster" + std::to_string(k + 1), std::vector<std::int64_t>(static_cast<std::size_t>(n_k), 0),
                                MatrixXd(n_k, 3)};
    for (int j = 0; j < n_k; ++j) {
      c.X(j, 0) = 1.0;
      c.X(j, 1) = cov.x1_sd > 0.0 ? x1(rng) : cov.x1_mean;
      c.X(j, 2) = x2(rng) ? 1.0 : 0.0;
    }
    clusters.push_back(std::move(c));
  }
  return ClusteredDataset(std::move(clusters), false);
}

/// One synthetic dataset from the study design (replicate `index`).
inline ClusteredDataset mc_simulate(const McConfig& config, std::uint64_t index) {
  const ClusteredDataset design = mc_design(config.q, config.n_k, config.covariates, config.seed);
  Rng rng = make_stream(config.seed, index + 1, 0x5E);
  return simulate_responses(design, config.theta_true, rng);
}

inline McReport run_mc_study(const McConfig& config) {
  config.validate();
  const ClusteredDataset design = mc_design(config.q, config.n_k, config.covariates, config.seed);
  if (!ClusteredDataset::full_column_rank(design.X()))
    throw Error(ErrorCode::rank_deficient, "simulated design is rank deficient; increase q or n_k");

  const Eigen::Index dim = 4;
  MatrixXd all(config.reps, dim);
  std::vector<char> status(static_cast<std::size_t>(config.reps), 0);  // 0 failed, 1 ok, 2 not converged
  parallel_for(static_cast<std::size_t>(config.reps), config.threads, [&](std::size_t r) {
    try {
      Rng rng = make_stream(config.seed, r + 1, 0x5E);
      const ClusteredDataset sim = simulate_responses(design, config.theta_true, rng);
      const FitResult fit = em_fit(sim, LinkFunction::log, config.em);
      if (!fit.params.beta.allFinite() || !std::isfinite(fit.params.phi)) return;
      all.row(static_cast<Eigen::Index>(r)).head(3) = fit.params.beta.transpose();
      all(static_cast<Eigen::Index>(r), 3) = fit.params.phi;
      status[r] = fit.converged ? 1 : 2;
    } catch (const Error&) {
    }
  });

  McReport rep;
  rep.q = config.q;
  rep.n_k = config.n_k;
  rep.reps = config.reps;
  for (int r = 0; r < config.reps; ++r) {
    const char s = status[static_cast<std::size_t>(r)];
    if (s == 0) {
      ++rep.failures;
      continue;
    }
    if (s == 2) ++rep.non_converged;
    rep.replicate.push_back(r);
  }
  if (rep.failures * 20 > config.reps)
    throw Error(ErrorCode::too_many_failures,
                std::to_string(rep.failures) + " of " + std::to_string(config.reps) + " Monte Carlo replicates failed");

  rep.estimates.resize(static_cast<Eigen::Index>(rep.replicate.size()), dim);
  for (std::size_t i = 0; i < rep.replicate.size(); ++i)
    rep.estimates.row(static_cast<Eigen::Index>(i)) = all.row(rep.replicate[i]);

  const std::vector<std::string> names{"beta0", "beta1", "beta2", "phi"};
  const double used = static_cast<double>(rep.replicate.size());
  for (Eigen::Index j = 0; j < dim; ++j) {
    McParameterSummary s;
    s.name = names[static_cast<std::size_t>(j)];
    s.truth = j < 3 ? config.theta_true.beta(j) : config.theta_true.phi;
    s.mean = rep.estimates.col(j).sum() / used;
    s.bias = s.mean - s.truth;
    s.rmse = std::sqrt((rep.estimates.col(j).array() - s.truth).square().sum() / used);
    rep.parameters.push_back(s);
  }
  return rep;
}

inline nlohmann::ordered_json to_json(const McReport& rep) {
  nlohmann::ordered_json cell;
  cell["q"] = rep.q;
  cell["n_k"] = rep.n_k;
  cell["reps"] = rep.reps;
  cell["used"] = static_cast<int>(rep.replicate.size());
  cell["failures"] = rep.failures;
  cell["non_converged"] = rep.non_converged;
  auto params = nlohmann::ordered_json::array();
  for (const auto& s : rep.parameters)
    params.push_back({{"name", s.name}, {"truth", s.truth}, {"mean", s.mean}, {"bias", s.bias}, {"rmse", s.rmse}});
  cell["parameters"] = std::move(params);
  return cell;
}

/// Per-replicate estimates as CSV rows: q,n_k,replicate,beta0,beta1,beta2,phi.
inline void write_replicates_csv(std::ostream& os, const McReport& rep, bool header) {
  if (header) os << "q,n_k,replicate,beta0,beta1,beta2,phi\n";
  char buf[64];
  for (std::size_t i = 0; i < rep.replicate.size(); ++i) {
    os << rep.q << ',' << rep.n_k << ',' << rep.replicate[i];
    for (Eigen::Index j = 0; j < rep.estimates.cols(); ++j) {
      std::snprintf(buf, sizeof buf, ",%.17g", rep.estimates(static_cast<Eigen::Index>(i), j));
      os << buf;
    }
    os << '\n';
  }
}

}  // namespace cpbs
