#pragma once

// Maximum-likelihood fitting of the CPBS regression: EM with a closed-form
// dispersion update, direct quasi-Newton maximization, and parametric
// bootstrap standard errors.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <numbers>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "cpbs/glm.hpp"
#include "cpbs/model.hpp"
#include "cpbs/parallel.hpp"
#include "cpbs/sampling.hpp"

namespace cpbs {

/// Posterior moments delta_k = E(T_k | y_k), gamma_k = E(1/T_k | y_k).
struct ConditionalMoments {
  std::vector<double> delta;
  std::vector<double> gamma;
};

enum class FitMethod { em, direct };

inline const char* to_string(FitMethod m) { return m == FitMethod::em ? "em" : "direct"; }

struct FitResult {
  ModelParams params;
  double loglik = -std::numeric_limits<double>::infinity();
  std::vector<double> loglik_trace;
  int iterations = 0;
  bool converged = false;
  FitMethod method = FitMethod::em;
  bool at_boundary = false;  // phi at the floor: effectively Poisson
  std::string message;
  std::optional<VectorXd> se;  // bootstrap SEs for (beta, phi)
  int B = 0;
  int bootstrap_dropped = 0;
};

enum class EmInit { poisson_glm, user_supplied };

struct EmConfig {
  double epsilon = 1e-8;
  int max_iter = 500;
  EmInit init = EmInit::poisson_glm;
  std::optional<ModelParams> start;  // required for user_supplied
  IrlsOptions inner{};

  void validate() const {
    if (!(epsilon > 0.0)) throw Error(ErrorCode::config, "epsilon must be positive");
    if (max_iter < 1) throw Error(ErrorCode::config, "max_iter must be at least 1");
    if (init == EmInit::user_supplied && !start) throw Error(ErrorCode::config, "user-supplied init needs a start value");
  }
};

/// E(T^s | y) for one cluster, any integer s.
inline double conditional_moment(std::span<const std::int64_t> y, std::span<const double> mu, double phi, long s) {
  detail::check_cluster_args(y, mu, phi);
  if (s == 0) return 1.0;
  std::int64_t y_dot = 0;
  double mu_dot = 0.0;
  for (std::size_t j = 0; j < y.size(); ++j) {
    y_dot += y[j];
    mu_dot += mu[j];
  }
  if (s == 1 || s == -1) return detail::MixingKernel(y_dot, mu_dot, phi).conditional_moment(static_cast<int>(s));

  const double phi2 = phi * phi;
  const double log_c = std::log1p(2.0 * phi2 * mu_dot);
  const double omega = std::sqrt(1.0 + 2.0 * phi2 * mu_dot) / phi2;
  auto log_bracket = [&](long shift) {
    std::array<double, 2> lk{};
    detail::log_bessel_k_half_scaled_window(static_cast<long>(y_dot) - 1 + shift, omega, lk);
    const double yd = static_cast<double>(y_dot);
    return detail::log_sum_exp(lk[1] - 0.5 * (yd + 0.5 + shift) * log_c, lk[0] - 0.5 * (yd - 0.5 + shift) * log_c);
  };
  return std::exp(log_bracket(s) - log_bracket(0));
}

namespace detail {

inline std::span<const double> cluster_mu(const VectorXd& mu, const ClusteredDataset& data, std::size_t k) {
  return {mu.data() + data.cluster_offset(k), static_cast<std::size_t>(data.cluster_size(k))};
}

struct EStep {
  ConditionalMoments moments;
  double loglik = 0.0;
};

/// Conditional moments at (mu, phi) plus the observed log-likelihood, which
/// shares the same Bessel evaluations.
inline EStep e_step(const ClusteredDataset& data, const VectorXd& mu, double phi, double log_factorial_sum) {
  EStep out;
  out.moments.delta.resize(data.q());
  out.moments.gamma.resize(data.q());
  double ll = -log_factorial_sum;
  const auto counts = data.counts();
  for (Eigen::Index i = 0; i < data.n(); ++i)
    if (counts[static_cast<std::size_t>(i)] > 0) ll += data.y()(i) * std::log(mu(i));
  for (std::size_t k = 0; k < data.q(); ++k) {
    const auto c = data.cluster(k);
    std::int64_t y_dot = 0;
    for (auto v : c.y) y_dot += v;
    const MixingKernel kernel(y_dot, mu.segment(c.offset, c.size()).sum(), phi);
    ll += kernel.log_mixing_integral();
    out.moments.delta[k] = kernel.conditional_moment(1);
    out.moments.gamma[k] = kernel.conditional_moment(-1);
  }
  out.loglik = ll;
  return out;
}

inline double log_factorial_sum(const ClusteredDataset& data) {
  double s = 0.0;
  for (auto v : data.counts()) s += std::lgamma(static_cast<double>(v) + 1.0);
  return s;
}

inline VectorXd expand_per_observation(const ClusteredDataset& data, const std::vector<double>& per_cluster) {
  VectorXd out(data.n());
  for (std::size_t k = 0; k < data.q(); ++k)
    out.segment(data.cluster_offset(k), data.cluster_size(k)).setConstant(per_cluster[k]);
  return out;
}

inline void check_moments(const ClusteredDataset& data, const ConditionalMoments& m) {
  if (m.delta.size() != data.q() || m.gamma.size() != data.q())
    throw Error(ErrorCode::dimension, "conditional moments must have one entry per cluster");
}

}  // namespace detail

/// delta_k and gamma_k for every cluster at the given parameters.
inline ConditionalMoments conditional_moments(const ClusteredDataset& data, const ModelParams& params,
                                              LinkFunction link = LinkFunction::log) {
  params.validate();
  const VectorXd mu = compute_mu(data, params, link);
  return detail::e_step(data, mu, params.phi, 0.0).moments;
}

/// Expected complete-data log-likelihood Q(theta; theta_r) given the
/// posterior moments computed at theta_r. Carries the same constants as
/// log_likelihood except the theta-free posterior terms
/// E[y_k. ln T_k + ln(T_k^{-1/2} + T_k^{-3/2}) | y], which are omitted.
inline double q_function(const ClusteredDataset& data, const ModelParams& params, const ConditionalMoments& moments,
                         LinkFunction link = LinkFunction::log) {
  params.validate();
  detail::check_moments(data, moments);
  const VectorXd mu = compute_mu(data, params, link);
  const double phi2 = params.phi * params.phi;
  const double per_cluster_const = 1.0 / phi2 - std::log(2.0 * std::sqrt(2.0 * std::numbers::pi) * params.phi);
  double q = static_cast<double>(data.q()) * per_cluster_const - detail::log_factorial_sum(data);
  const auto counts = data.counts();
  for (Eigen::Index i = 0; i < data.n(); ++i)
    if (counts[static_cast<std::size_t>(i)] > 0) q += data.y()(i) * std::log(mu(i));
  for (std::size_t k = 0; k < data.q(); ++k) {
    const double mu_dot = mu.segment(data.cluster_offset(k), data.cluster_size(k)).sum();
    q -= (mu_dot + 0.5 / phi2) * moments.delta[k] + 0.5 * moments.gamma[k] / phi2;
  }
  return q;
}

/// dQ/dbeta_l = sum_kj (y_kj - delta_k mu_kj) x_kjl  (log link).
inline VectorXd q_score_beta(const ClusteredDataset& data, const ModelParams& params,
                             const ConditionalMoments& moments, LinkFunction link = LinkFunction::log) {
  detail::check_moments(data, moments);
  const VectorXd mu = compute_mu(data, params, link);
  const VectorXd delta = detail::expand_per_observation(data, moments.delta);
  return data.X().transpose() * (data.y() - delta.cwiseProduct(mu));
}

/// dQ/dphi = sum_k [ (delta_k + gamma_k - 2)/phi^3 - 1/phi ].
inline double q_score_phi(const ConditionalMoments& moments, double phi) {
  double acc = 0.0;
  for (std::size_t k = 0; k < moments.delta.size(); ++k)
    acc += (moments.delta[k] + moments.gamma[k] - 2.0) / (phi * phi * phi) - 1.0 / phi;
  return acc;
}

/// beta-update of the M-step: Poisson regression with cluster-shared offset
/// ln delta_k, solved to the inner score tolerance.
inline VectorXd m_step_beta(const ClusteredDataset& data, const std::vector<double>& delta,
                            const std::optional<VectorXd>& beta_init = std::nullopt, IrlsOptions options = {}) {
  if (delta.size() != data.q()) throw Error(ErrorCode::dimension, "delta must have one entry per cluster");
  VectorXd offset(data.n());
  for (std::size_t k = 0; k < data.q(); ++k) {
    if (!(delta[k] > 0.0)) throw Error(ErrorCode::domain, "delta must be positive");
    offset.segment(data.cluster_offset(k), data.cluster_size(k)).setConstant(std::log(delta[k]));
  }
  return fit_poisson(data.X(), data.y(), offset, beta_init, options).beta;
}

/// phi-update of the M-step: sqrt(sum_k (delta_k + gamma_k)/q - 2), floored.
inline double m_step_phi(const ConditionalMoments& moments) {
  if (moments.delta.empty() || moments.delta.size() != moments.gamma.size())
    throw Error(ErrorCode::dimension, "m_step_phi needs matching, non-empty delta and gamma");
  double s = 0.0;
  for (std::size_t k = 0; k < moments.delta.size(); ++k) s += moments.delta[k] + moments.gamma[k];
  const double arg = s / static_cast<double>(moments.delta.size()) - 2.0;
  // delta*gamma >= 1 makes arg >= 0 up to rounding
  if (!(arg > kPhiFloor * kPhiFloor)) return kPhiFloor;
  return std::max(std::sqrt(arg), kPhiFloor);
}

/// Starting values: pooled Poisson regression for beta; phi from matching the
/// pooled excess variance to the CPBS variance function, clamped to
/// [0.05, 5]. When the design has a constant column its coefficient is
/// shifted by -ln(1 + phi^2/2), since E(T) = 1 + phi^2/2.
inline ModelParams poisson_initial_params(const ClusteredDataset& data) {
  const PoissonFit pois = fit_poisson(data.X(), data.y(), VectorXd::Zero(data.n()));
  const VectorXd& m = pois.fitted;
  const double excess = ((data.y() - m).array().square() - m.array()).sum();
  const double kappa = excess / m.squaredNorm();
  // kappa = v (1 + 5v/4) / (1 + v/2)^2 with v = phi^2, increasing in v
  auto kappa_of = [](double phi) {
    const double v = phi * phi;
    return v * (1.0 + 1.25 * v) / ((1.0 + 0.5 * v) * (1.0 + 0.5 * v));
  };
  double lo = 0.05, hi = 5.0, phi0;
  if (!(kappa > kappa_of(lo))) {
    phi0 = lo;
  } else if (kappa >= kappa_of(hi)) {
    phi0 = hi;
  } else {
    for (int i = 0; i < 100; ++i) {
      const double mid = 0.5 * (lo + hi);
      (kappa_of(mid) < kappa ? lo : hi) = mid;
    }
    phi0 = 0.5 * (lo + hi);
  }
  ModelParams init{pois.beta, phi0};
  for (Eigen::Index l = 0; l < data.p(); ++l) {
    const double c = data.X()(0, l);
    if (c != 0.0 && (data.X().col(l).array() == c).all()) {
      init.beta(l) -= std::log1p(0.5 * phi0 * phi0) / c;
      break;
    }
  }
  return init;
}

namespace detail {

/// The Poisson limit phi -> 0 and the sign of the profile score in phi^2 there:
///   d ell / d phi^2 |_0 = 1/2 sum_k [ (y_k - mu_k) + (y_k - mu_k)^2 - y_k ].
/// A non-positive value means the boundary is a local maximum, which plain
/// EM only approaches sublinearly.
struct PoissonBoundary {
  ModelParams params;
  double loglik = 0.0;
  double phi2_score = 0.0;
};

inline PoissonBoundary poisson_boundary(const ClusteredDataset& data, LinkFunction link) {
  PoissonBoundary b;
  const PoissonFit pois = fit_poisson(data.X(), data.y(), VectorXd::Zero(data.n()));
  b.params = ModelParams{pois.beta, kPhiFloor};
  b.loglik = log_likelihood(data, b.params, link);
  const VectorXd mu = compute_mu(data, b.params, link);
  const ClusterSummaries s = cluster_summaries(data, mu);
  double score = 0.0;
  for (std::size_t k = 0; k < data.q(); ++k) {
    const double r = static_cast<double>(s.y_dot[k]) - s.mu_dot[k];
    score += r + r * r - static_cast<double>(s.y_dot[k]);
  }
  b.phi2_score = 0.5 * score;
  return b;
}

}  // namespace detail

/// EM fit. Each iteration: E-step (delta_k, gamma_k at theta_r), beta from
/// the offset Poisson regression, phi in closed form. Stops when
/// max{|Q(theta_{r+1}; theta_r) - Q(theta_r; theta_r)|, |theta_{r+1} - theta_r|_inf} < epsilon
/// (absolute), or at max_iter with converged = false. With phi at its floor the
/// Q difference is replaced by the observed log-likelihood difference. The observed
/// log-likelihood of every iterate, starting at theta_0, is kept in
/// loglik_trace.
///
/// When the iterates head towards phi = 0 and the Poisson boundary is a local
/// maximum with at least the current log-likelihood, the fit jumps there;
/// this never lowers the likelihood.
inline FitResult em_fit(const ClusteredDataset& input, LinkFunction link = LinkFunction::log, EmConfig config = {}) {
  config.validate();
  const ClusteredDataset data = input.canonical().first;

  FitResult fit;
  fit.method = FitMethod::em;
  ModelParams theta = config.init == EmInit::user_supplied ? *config.start : poisson_initial_params(data);
  theta.validate();
  if (theta.beta.size() != data.p()) throw Error(ErrorCode::dimension, "initial beta has wrong length");
  theta.phi = std::max(theta.phi, kPhiFloor);

  const double lfs = detail::log_factorial_sum(data);
  VectorXd mu = compute_mu(data, theta, link);
  detail::EStep current = detail::e_step(data, mu, theta.phi, lfs);
  fit.loglik_trace.push_back(current.loglik);

  std::optional<detail::PoissonBoundary> boundary;
  for (int r = 1; r <= config.max_iter; ++r) {
    ModelParams next;
    next.beta = m_step_beta(data, current.moments.delta, theta.beta, config.inner);
    next.phi = m_step_phi(current.moments);

    const double q_gain = q_function(data, next, current.moments, link) - q_function(data, theta, current.moments, link);
    const double step = std::max((next.beta - theta.beta).lpNorm<Eigen::Infinity>(), std::abs(next.phi - theta.phi));
    const bool heading_down = next.phi < theta.phi;

    // At the floor Q carries 1/phi^2 ~ 1e12 terms and its differences are
    // rounding noise; the observed log-likelihood change stands in for it.
    const bool at_floor = std::max(theta.phi, next.phi) < 10.0 * kPhiFloor;
    const double previous_loglik = current.loglik;

    theta = std::move(next);
    mu = compute_mu(data, theta, link);
    current = detail::e_step(data, mu, theta.phi, lfs);
    fit.iterations = r;

    const double gain = at_floor ? current.loglik - previous_loglik : q_gain;
    if (std::max(std::abs(gain), step) < config.epsilon) {
      fit.loglik_trace.push_back(current.loglik);
      fit.converged = true;
      break;
    }

    if (heading_down && theta.phi > kPhiFloor) {
      if (!boundary) boundary = detail::poisson_boundary(data, link);
      if (boundary->phi2_score <= 0.0 && boundary->loglik >= current.loglik) {
        theta = boundary->params;
        mu = compute_mu(data, theta, link);
        current = detail::e_step(data, mu, theta.phi, lfs);
      }
    }
    fit.loglik_trace.push_back(current.loglik);
  }

  fit.params = theta;
  fit.loglik = current.loglik;
  fit.at_boundary = theta.phi <= kPhiFloor * (1.0 + 1e-9);
  if (!fit.converged) fit.message = "EM reached max_iter without meeting the convergence criterion";
  else if (fit.at_boundary) fit.message = "phi at the lower bound: effectively Poisson";
  return fit;
}

struct DirectOptions {
  int max_iter = 1000;
  double grad_tol = 1e-6;  // multiplied by max(1, |loglik|/100)
};

/// Direct maximization of the log-likelihood over (beta, ln phi) by BFGS
/// with a backtracking line search. Gradients are central differences with
/// step 1e-6 (1 + |coordinate|). Failures are reported through
/// converged = false and message; seeding from em_fit is the usual remedy.
inline FitResult direct_ml_fit(const ClusteredDataset& input, LinkFunction link, const ModelParams& init,
                               DirectOptions options = {}) {
  init.validate();
  const ClusteredDataset data = input.canonical().first;
  if (init.beta.size() != data.p()) throw Error(ErrorCode::dimension, "initial beta has wrong length");
  const Eigen::Index p = data.p();
  const Eigen::Index dim = p + 1;

  auto unpack = [&](const VectorXd& x) {
    return ModelParams{x.head(p), std::max(std::exp(x(p)), kPhiFloor)};
  };
  auto objective = [&](const VectorXd& x) {
    if (!x.allFinite()) return std::numeric_limits<double>::infinity();
    try {
      const double ll = log_likelihood(data, unpack(x), link);
      return std::isfinite(ll) ? -ll : std::numeric_limits<double>::infinity();
    } catch (const Error&) {
      return std::numeric_limits<double>::infinity();
    }
  };
  auto gradient = [&](const VectorXd& x) {
    VectorXd g(dim);
    for (Eigen::Index i = 0; i < dim; ++i) {
      const double h = 1e-6 * (1.0 + std::abs(x(i)));
      VectorXd xp = x, xm = x;
      xp(i) += h;
      xm(i) -= h;
      g(i) = (objective(xp) - objective(xm)) / (xp(i) - xm(i));
    }
    return g;
  };

  FitResult fit;
  fit.method = FitMethod::direct;
  VectorXd x(dim);
  x.head(p) = init.beta;
  x(p) = std::log(std::max(init.phi, kPhiFloor));
  double f = objective(x);
  if (!std::isfinite(f)) {
    fit.params = init;
    fit.message = "non-finite objective at the starting point";
    return fit;
  }
  VectorXd g = gradient(x);
  fit.loglik_trace.push_back(-f);
  MatrixXd H = MatrixXd::Identity(dim, dim);
  bool scaled = false;

  auto gtol = [&](double fval) { return options.grad_tol * std::max(1.0, 1e-2 * std::abs(fval)); };

  for (int it = 1; it <= options.max_iter; ++it) {
    fit.iterations = it;
    if (!g.allFinite()) {
      fit.message = "non-finite gradient";
      break;
    }
    if (g.lpNorm<Eigen::Infinity>() <= gtol(f)) {
      fit.converged = true;
      break;
    }
    VectorXd dir = -H * g;
    if (dir.dot(g) >= 0.0) {
      H.setIdentity();
      dir = -g;
    }
    if (!scaled) {
      const double len = dir.lpNorm<Eigen::Infinity>();
      if (len > 1.0) dir /= len;
    }

    double t = 1.0, f_new = std::numeric_limits<double>::infinity();
    VectorXd x_new;
    const double slope = g.dot(dir);
    bool accepted = false;
    for (int h = 0; h < 60; ++h, t *= 0.5) {
      x_new = x + t * dir;
      f_new = objective(x_new);
      if (std::isfinite(f_new) && f_new <= f + 1e-4 * t * slope) {
        accepted = true;
        break;
      }
    }
    if (!accepted) {
      // At the optimum finite-difference noise can stall the search.
      if (g.lpNorm<Eigen::Infinity>() <= 100.0 * gtol(f)) {
        fit.converged = true;
        fit.message = "line search stalled at the noise floor of the gradient";
      } else {
        fit.message = "line search failed";
      }
      break;
    }
    const VectorXd g_new = gradient(x_new);
    const VectorXd s = x_new - x;
    const VectorXd yv = g_new - g;
    const double sy = s.dot(yv);
    if (sy > 1e-12 * s.norm() * yv.norm()) {
      if (!scaled) {
        H *= sy / yv.squaredNorm();
        scaled = true;
      }
      const double rho = 1.0 / sy;
      const MatrixXd I = MatrixXd::Identity(dim, dim);
      H = (I - rho * s * yv.transpose()) * H * (I - rho * yv * s.transpose()) + rho * s * s.transpose();
    }
    x = x_new;
    f = f_new;
    g = g_new;
    fit.loglik_trace.push_back(-f);
  }
  if (!fit.converged && fit.message.empty()) fit.message = "BFGS reached max_iter";
  fit.params = unpack(x);
  fit.loglik = -f;
  fit.at_boundary = fit.params.phi <= kPhiFloor * (1.0 + 1e-9);
  return fit;
}

struct BootstrapResult {
  VectorXd se;          // (beta..., phi)
  MatrixXd estimates;   // used replicates x (p + 1), in replicate order
  int used = 0;
  int dropped = 0;
};

/// Parametric bootstrap: B datasets drawn from the fitted model with the
/// original design and cluster sizes, each refitted by EM (started at the
/// fitted values). Replicate b draws from its own stream (seed, b), so the
/// result does not depend on the thread count. Non-converged or failed
/// replicates are dropped; more than 10% dropped is an error.
inline BootstrapResult bootstrap_se(const ClusteredDataset& input, LinkFunction link, const FitResult& fitted, int B,
                                    std::uint64_t seed, unsigned threads = 0, EmConfig config = {}) {
  if (B < 2) throw Error(ErrorCode::config, "bootstrap needs B >= 2");
  fitted.params.validate();
  const ClusteredDataset data = input.canonical().first;
  const Eigen::Index dim = data.p() + 1;
  config.init = EmInit::user_supplied;
  config.start = fitted.params;

  MatrixXd all(B, dim);
  std::vector<char> ok(static_cast<std::size_t>(B), 0);
  parallel_for(static_cast<std::size_t>(B), threads, [&](std::size_t b) {
    try {
      Rng rng = make_stream(seed, b, 0xB0);
      const ClusteredDataset sim = simulate_responses(data, fitted.params, rng, link);
      const FitResult rep = em_fit(sim, link, config);
      if (!rep.converged) return;
      all.row(static_cast<Eigen::Index>(b)).head(data.p()) = rep.params.beta.transpose();
      all(static_cast<Eigen::Index>(b), data.p()) = rep.params.phi;
      ok[b] = 1;
    } catch (const Error&) {
    }
  });

  BootstrapResult out;
  for (char v : ok) out.used += v;
  out.dropped = B - out.used;
  if (out.dropped * 10 > B)
    throw Error(ErrorCode::too_many_failures,
                std::to_string(out.dropped) + " of " + std::to_string(B) + " bootstrap replicates failed");
  out.estimates.resize(out.used, dim);
  for (int b = 0, r = 0; b < B; ++b)
    if (ok[static_cast<std::size_t>(b)]) out.estimates.row(r++) = all.row(b);
  const Eigen::RowVectorXd mean = out.estimates.colwise().mean();
  const MatrixXd centered = out.estimates.rowwise() - mean;
  out.se = (centered.array().square().colwise().sum() / static_cast<double>(out.used - 1)).sqrt().transpose();
  return out;
}

/// em_fit followed by bootstrap SEs stored in the result.
inline FitResult attach_bootstrap(const ClusteredDataset& data, LinkFunction link, FitResult fit, int B,
                                  std::uint64_t seed, unsigned threads = 0, EmConfig config = {}) {
  const BootstrapResult boot = bootstrap_se(data, link, fit, B, seed, threads, config);
  fit.se = boot.se;
  fit.B = B;
  fit.bootstrap_dropped = boot.dropped;
  return fit;
}

}  // namespace cpbs
