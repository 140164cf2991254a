#pragma once

// CPBS model core: Birnbaum-Saunders mixing density, exact joint cluster pmf,
// log-likelihood and marginal moment structure.

#include <array>
#include <cmath>
#include <cstdint>
#include <numbers>
#include <span>

#include "cpbs/bessel_gig.hpp"
#include "cpbs/dataset.hpp"

namespace cpbs {

/// Fits never go below this dispersion; at the floor the model is
/// effectively Poisson.
inline constexpr double kPhiFloor = 1e-6;

/// mu_kj = g^{-1}(x_kj' beta) for every stacked observation.
inline VectorXd compute_mu(const ClusteredDataset& data, const ModelParams& params,
                           LinkFunction link = LinkFunction::log) {
  if (params.beta.size() != data.p())
    throw Error(ErrorCode::dimension, "beta has length " + std::to_string(params.beta.size()) + ", design has " +
                                          std::to_string(data.p()) + " columns");
  const VectorXd eta = data.X() * params.beta;
  if (!eta.allFinite()) throw Error(ErrorCode::domain, "non-finite linear predictor");
  VectorXd mu(eta.size());
  for (Eigen::Index i = 0; i < eta.size(); ++i) mu(i) = link_inverse(link, eta(i));
  if (!(mu.array() > 0.0).all() || !mu.allFinite())
    throw Error(ErrorCode::domain, "linear predictor maps outside (0, inf)");
  return mu;
}

/// Log density of BS(phi) with unit scale.
inline double bs_log_density(double t, double phi) {
  if (!(t > 0.0) || !(phi > 0.0)) throw Error(ErrorCode::domain, "bs_log_density requires t > 0 and phi > 0");
  const double log_t = std::log(t);
  // t^{-1/2} + t^{-3/2} = t^{-3/2} (1 + t)
  return -1.5 * log_t + std::log1p(t) - std::log(2.0 * std::sqrt(2.0 * std::numbers::pi) * phi) -
         (t + 1.0 / t - 2.0) / (2.0 * phi * phi);
}

/// Per-cluster totals y_k. and mu_k.
struct ClusterSummaries {
  std::vector<std::int64_t> y_dot;
  std::vector<double> mu_dot;
};

inline ClusterSummaries cluster_summaries(const ClusteredDataset& data, const VectorXd& mu) {
  ClusterSummaries s;
  s.y_dot.resize(data.q());
  s.mu_dot.resize(data.q());
  for (std::size_t k = 0; k < data.q(); ++k) {
    const auto c = data.cluster(k);
    std::int64_t yd = 0;
    for (auto v : c.y) yd += v;
    s.y_dot[k] = yd;
    s.mu_dot[k] = mu.segment(c.offset, c.size()).sum();
  }
  return s;
}

namespace detail {

inline double log_sum_exp(double a, double b) {
  const double m = std::max(a, b);
  return m + std::log1p(std::exp(-std::abs(a - b)));
}

/// The mixing integral of a cluster depends on the data only through
/// (y_k., mu_k.). This holds the shared pieces of the GIG kernels:
///   omega = sqrt(c)/phi^2 with c = 1 + 2 phi^2 mu_k.,
/// and evaluates
///   L(s) = ln{ K_{y+1/2+s}(omega)/c^{(y+1/2+s)/2} + K_{y-1/2+s}(omega)/c^{(y-1/2+s)/2} } + omega
/// for s in {-1, 0, 1} from a single Bessel recurrence.
class MixingKernel {
 public:
  MixingKernel(std::int64_t y_dot, double mu_dot, double phi) : y_dot_(y_dot), mu_dot_(mu_dot), phi_(phi) {
    if (!(phi > 0.0) || !std::isfinite(phi)) throw Error(ErrorCode::domain, "phi must be positive");
    if (!(mu_dot > 0.0) || !std::isfinite(mu_dot)) throw Error(ErrorCode::domain, "cluster mean total must be positive");
    const double phi2 = phi * phi;
    const double two_phi2_mu = 2.0 * phi2 * mu_dot;
    log_c_ = std::log1p(two_phi2_mu);
    const double sqrt_c = std::sqrt(1.0 + two_phi2_mu);
    omega_ = sqrt_c / phi2;
    // 1/phi^2 - omega without cancellation
    exponent_gap_ = -2.0 * mu_dot / (sqrt_c + 1.0);
    // orders y-3/2 .. y+3/2, i.e. m = y-2 .. y+1
    detail::log_bessel_k_half_scaled_window(static_cast<long>(y_dot) - 2, omega_, log_k_);
  }

  double log_bracket(int s) const {
    const double y = static_cast<double>(y_dot_);
    const double upper = log_k_[static_cast<std::size_t>(2 + s)] - 0.5 * (y + 0.5 + s) * log_c_;
    const double lower = log_k_[static_cast<std::size_t>(1 + s)] - 0.5 * (y - 0.5 + s) * log_c_;
    return log_sum_exp(upper, lower);
  }

  /// ln of e^{1/phi^2}/(sqrt(2 pi) phi) * {bracket}, i.e. the log pmf minus
  /// the sum of (y ln mu - ln y!).
  double log_mixing_integral() const {
    return exponent_gap_ - std::log(std::sqrt(2.0 * std::numbers::pi) * phi_) + log_bracket(0);
  }

  /// E(T^s | y) for s in {-1, 0, 1}.
  double conditional_moment(int s) const { return s == 0 ? 1.0 : std::exp(log_bracket(s) - log_bracket(0)); }

 private:
  std::int64_t y_dot_;
  double mu_dot_;
  double phi_;
  double log_c_ = 0.0;
  double omega_ = 0.0;
  double exponent_gap_ = 0.0;
  std::array<double, 4> log_k_{};
};

inline double poisson_kernel_sum(std::span<const std::int64_t> y, std::span<const double> mu) {
  double acc = 0.0;
  for (std::size_t j = 0; j < y.size(); ++j) {
    const double yj = static_cast<double>(y[j]);
    if (y[j] > 0) acc += yj * std::log(mu[j]);
    acc -= std::lgamma(yj + 1.0);
  }
  return acc;
}

inline void check_cluster_args(std::span<const std::int64_t> y, std::span<const double> mu, double phi) {
  if (y.size() != mu.size()) throw Error(ErrorCode::dimension, "counts and means differ in length");
  if (y.empty()) throw Error(ErrorCode::dimension, "empty cluster");
  if (!(phi > 0.0) || !std::isfinite(phi)) throw Error(ErrorCode::domain, "phi must be positive");
  for (std::size_t j = 0; j < y.size(); ++j) {
    if (y[j] < 0) throw Error(ErrorCode::domain, "negative count");
    if (!(mu[j] > 0.0) || !std::isfinite(mu[j])) throw Error(ErrorCode::domain, "means must be positive");
  }
}

}  // namespace detail

/// Log of the exact joint pmf of one cluster's counts.
inline double cluster_log_pmf(std::span<const std::int64_t> y, std::span<const double> mu, double phi) {
  detail::check_cluster_args(y, mu, phi);
  std::int64_t y_dot = 0;
  double mu_dot = 0.0;
  for (std::size_t j = 0; j < y.size(); ++j) {
    y_dot += y[j];
    mu_dot += mu[j];
  }
  return detail::MixingKernel(y_dot, mu_dot, phi).log_mixing_integral() + detail::poisson_kernel_sum(y, mu);
}

/// Full log-likelihood, constants included.
inline double log_likelihood(const ClusteredDataset& data, const ModelParams& params,
                             LinkFunction link = LinkFunction::log) {
  params.validate();
  const VectorXd mu = compute_mu(data, params, link);
  double ll = 0.0;
  for (std::size_t k = 0; k < data.q(); ++k) {
    const auto c = data.cluster(k);
    ll += cluster_log_pmf(c.y, std::span<const double>(mu.data() + c.offset, static_cast<std::size_t>(c.size())),
                          params.phi);
  }
  return ll;
}

struct MarginalMoments {
  double mean = 0.0;
  double variance = 0.0;
  double covariance = 0.0;  // between two members of the same cluster
};

/// Mean and variance of Y_i, covariance of (Y_i, Y_j) in one cluster.
inline MarginalMoments model_moments(double mu_i, double mu_j, double phi) {
  if (!(mu_i > 0.0) || !(mu_j > 0.0) || !(phi >= 0.0))
    throw Error(ErrorCode::domain, "model_moments requires positive means and phi >= 0");
  const double phi2 = phi * phi;
  const double var_t = phi2 * (1.0 + 1.25 * phi2);
  MarginalMoments m;
  m.mean = mu_i * (1.0 + 0.5 * phi2);
  m.variance = m.mean + mu_i * mu_i * var_t;
  m.covariance = mu_i * mu_j * var_t;
  return m;
}

}  // namespace cpbs
