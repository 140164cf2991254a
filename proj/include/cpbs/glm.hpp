#pragma once

// Poisson log-linear regression with a fixed per-observation offset,
// fitted by Newton/IRLS with step halving.

#include <cmath>
#include <optional>
#include <string>

#include <Eigen/Dense>

#include "cpbs/error.hpp"

namespace cpbs {

using Eigen::MatrixXd;
using Eigen::VectorXd;

/// Thrown when IRLS runs out of iterations; keeps the last iterate.
class IrlsNonConvergence : public Error {
 public:
  IrlsNonConvergence(VectorXd last, double score_norm)
      : Error(ErrorCode::non_convergence, "IRLS did not reach the score tolerance (|score|_inf = " +
                                              std::to_string(score_norm) + ")"),
        last_(std::move(last)) {}
  const VectorXd& last_iterate() const { return last_; }

 private:
  VectorXd last_;
};

struct IrlsOptions {
  double score_tol = 1e-10;
  int max_iter = 100;
};

struct PoissonFit {
  VectorXd beta;
  VectorXd fitted;  // exp(X beta + offset)
  int iterations = 0;
  double score_norm = 0.0;
};

namespace detail {

inline double poisson_kernel_loglik(const VectorXd& y, const VectorXd& eta, const VectorXd& m) {
  return y.dot(eta) - m.sum();
}

/// Starting point: weighted least squares of log(y + 0.1) - offset.
inline VectorXd poisson_start(const MatrixXd& X, const VectorXd& y, const VectorXd& offset) {
  const VectorXd m0 = (y.array() + 0.1).matrix();
  const VectorXd z = m0.array().log().matrix() - offset;
  const MatrixXd XtW = X.transpose() * m0.asDiagonal();
  Eigen::LDLT<MatrixXd> ldlt(XtW * X);
  if (ldlt.info() != Eigen::Success) throw Error(ErrorCode::rank_deficient, "singular starting normal equations");
  return ldlt.solve(XtW * z);
}

}  // namespace detail

/// Maximizes sum_i [y_i (x_i'b + o_i) - exp(x_i'b + o_i)], stopping when the
/// score X'(y - m) has max-norm below options.score_tol (or when Newton steps
/// reach machine precision).
inline PoissonFit fit_poisson(const MatrixXd& X, const VectorXd& y, const VectorXd& offset,
                              std::optional<VectorXd> start = std::nullopt, IrlsOptions options = {}) {
  if (X.rows() != y.size() || offset.size() != y.size())
    throw Error(ErrorCode::dimension, "fit_poisson: X, y and offset sizes disagree");

  VectorXd beta = start ? *start : detail::poisson_start(X, y, offset);
  if (beta.size() != X.cols()) throw Error(ErrorCode::dimension, "fit_poisson: start has wrong length");

  VectorXd eta = X * beta + offset;
  VectorXd m = eta.array().exp().matrix();
  double ll = detail::poisson_kernel_loglik(y, eta, m);
  if (!std::isfinite(ll)) {
    beta = detail::poisson_start(X, y, offset);
    eta = X * beta + offset;
    m = eta.array().exp().matrix();
    ll = detail::poisson_kernel_loglik(y, eta, m);
  }

  PoissonFit out;
  for (int it = 0; it <= options.max_iter; ++it) {
    const VectorXd score = X.transpose() * (y - m);
    out.score_norm = score.lpNorm<Eigen::Infinity>();
    out.iterations = it;
    if (out.score_norm <= options.score_tol) break;
    if (it == options.max_iter) throw IrlsNonConvergence(beta, out.score_norm);

    const MatrixXd info = X.transpose() * m.asDiagonal() * X;
    Eigen::LLT<MatrixXd> llt(info);
    if (llt.info() != Eigen::Success) throw Error(ErrorCode::rank_deficient, "singular weighted normal equations");
    const VectorXd step = llt.solve(score);
    if (!step.allFinite()) throw Error(ErrorCode::rank_deficient, "singular weighted normal equations");

    // Step halving keeps the Poisson log-likelihood non-decreasing.
    double t = 1.0;
    VectorXd trial_beta, trial_eta, trial_m;
    double trial_ll = -INFINITY;
    for (int h = 0; h < 50; ++h, t *= 0.5) {
      trial_beta = beta + t * step;
      trial_eta = X * trial_beta + offset;
      trial_m = trial_eta.array().exp().matrix();
      trial_ll = detail::poisson_kernel_loglik(y, trial_eta, trial_m);
      if (std::isfinite(trial_ll) && trial_ll >= ll - 1e-12 * (1.0 + std::abs(ll))) break;
    }
    const bool stalled = (t * step).lpNorm<Eigen::Infinity>() <= 4e-16 * (1.0 + beta.lpNorm<Eigen::Infinity>());
    beta = std::move(trial_beta);
    eta = std::move(trial_eta);
    m = std::move(trial_m);
    ll = trial_ll;
    if (stalled) {
      out.score_norm = (X.transpose() * (y - m)).lpNorm<Eigen::Infinity>();
      break;
    }
  }
  out.beta = std::move(beta);
  out.fitted = std::move(m);
  return out;
}

}  // namespace cpbs
