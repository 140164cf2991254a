#pragma once

// Residual and influence diagnostics: Pearson residuals, simulated
// envelopes, one-step generalized Cook's distance.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <numeric>
#include <vector>

#include "cpbs/estimation.hpp"

namespace cpbs {

struct ResidualSet {
  VectorXd r;
  VectorXd lambda_hat;  // fitted marginal mean
  VectorXd sigma2_hat;  // fitted marginal variance
};

/// r_kj = (y_kj - lambda_kj)/sqrt(sigma2_kj) with the CPBS marginal moments.
inline ResidualSet pearson_residuals(const ClusteredDataset& data, const ModelParams& params,
                                     LinkFunction link = LinkFunction::log) {
  params.validate();
  const VectorXd mu = compute_mu(data, params, link);
  const double phi2 = params.phi * params.phi;
  ResidualSet out;
  out.lambda_hat = mu * (1.0 + 0.5 * phi2);
  out.sigma2_hat = out.lambda_hat.array() + mu.array().square() * phi2 * (1.0 + 1.25 * phi2);
  out.r = (data.y() - out.lambda_hat).array() / out.sigma2_hat.array().sqrt();
  return out;
}

inline ResidualSet pearson_residuals(const ClusteredDataset& data, const FitResult& fitted,
                                     LinkFunction link = LinkFunction::log) {
  return pearson_residuals(data, fitted.params, link);
}

/// Percentile with linear interpolation between order statistics
/// (h = (n - 1) prob). `sorted` must be non-decreasing.
inline double interpolated_percentile(std::span<const double> sorted, double prob) {
  if (sorted.empty()) throw Error(ErrorCode::dimension, "percentile of an empty sample");
  const double h = (static_cast<double>(sorted.size()) - 1.0) * prob;
  const auto lo = static_cast<std::size_t>(std::floor(h));
  const std::size_t hi = std::min(lo + 1, sorted.size() - 1);
  return sorted[lo] + (h - static_cast<double>(lo)) * (sorted[hi] - sorted[lo]);
}

struct EnvelopeBands {
  VectorXd sorted_r;                   // observed residuals, non-decreasing
  std::vector<Eigen::Index> order;     // row of the observation at each rank
  VectorXd lo;                         // 2.5% band per rank
  VectorXd hi;                         // 97.5% band per rank
  std::vector<char> inside;
  int m = 0;                           // requested simulations
  int used = 0;
  int dropped = 0;
  double coverage = 0.0;               // fraction of sorted_r within [lo, hi]
};

struct EnvelopeOptions {
  double lower = 0.025;
  double upper = 0.975;
  unsigned threads = 0;
  EmConfig em{};
};

/// Simulated envelope: m datasets drawn from the fitted model (same design,
/// same clusters), one EM refit each, residuals recomputed from the refit and
/// sorted; per-rank percentiles across simulations give the bands.
inline EnvelopeBands simulated_envelopes(const ClusteredDataset& data, const FitResult& fitted, LinkFunction link,
                                         int m, std::uint64_t seed, EnvelopeOptions options = {}) {
  if (m < 20) throw Error(ErrorCode::config, "simulated envelopes need m >= 20");
  const Eigen::Index n = data.n();
  EnvelopeBands bands;
  bands.m = m;

  const ResidualSet observed = pearson_residuals(data, fitted.params, link);
  bands.order.resize(static_cast<std::size_t>(n));
  std::iota(bands.order.begin(), bands.order.end(), Eigen::Index{0});
  std::stable_sort(bands.order.begin(), bands.order.end(),
                   [&](Eigen::Index a, Eigen::Index b) { return observed.r(a) < observed.r(b); });
  bands.sorted_r.resize(n);
  for (Eigen::Index i = 0; i < n; ++i) bands.sorted_r(i) = observed.r(bands.order[static_cast<std::size_t>(i)]);

  EmConfig cfg = options.em;
  cfg.init = EmInit::user_supplied;
  cfg.start = fitted.params;

  MatrixXd sims(n, m);  // column l: sorted residuals of simulation l
  std::vector<char> ok(static_cast<std::size_t>(m), 0);
  parallel_for(static_cast<std::size_t>(m), options.threads, [&](std::size_t l) {
    try {
      Rng rng = make_stream(seed, l, 0xE7);
      const ClusteredDataset sim = simulate_responses(data, fitted.params, rng, link);
      const FitResult refit = em_fit(sim, link, cfg);
      if (!refit.converged) return;
      VectorXd r = pearson_residuals(sim, refit.params, link).r;
      std::sort(r.data(), r.data() + r.size());
      sims.col(static_cast<Eigen::Index>(l)) = r;
      ok[l] = 1;
    } catch (const Error&) {
    }
  });
  for (char v : ok) bands.used += v;
  bands.dropped = m - bands.used;
  if (bands.dropped * 10 > m)
    throw Error(ErrorCode::too_many_failures,
                std::to_string(bands.dropped) + " of " + std::to_string(m) + " envelope simulations failed");

  bands.lo.resize(n);
  bands.hi.resize(n);
  bands.inside.resize(static_cast<std::size_t>(n));
  std::vector<double> row;
  row.reserve(static_cast<std::size_t>(bands.used));
  std::size_t inside = 0;
  for (Eigen::Index i = 0; i < n; ++i) {
    row.clear();
    for (int l = 0; l < m; ++l)
      if (ok[static_cast<std::size_t>(l)]) row.push_back(sims(i, l));
    std::sort(row.begin(), row.end());
    bands.lo(i) = interpolated_percentile(row, options.lower);
    bands.hi(i) = interpolated_percentile(row, options.upper);
    const bool in = bands.sorted_r(i) >= bands.lo(i) && bands.sorted_r(i) <= bands.hi(i);
    bands.inside[static_cast<std::size_t>(i)] = in ? 1 : 0;
    inside += in ? 1 : 0;
  }
  bands.coverage = static_cast<double>(inside) / static_cast<double>(n);
  return bands;
}

struct InfluenceSet {
  VectorXd gcd1;  // one-step generalized Cook's distance per observation
  VectorXd a;     // y_kj - delta_k mu_kj
  VectorXd G;     // delta_k mu_kj
};

/// GCD1_kj = a_kj^2 x_kj' (X' G X)^{-1} x_kj with a_kj = y_kj - delta_k mu_kj
/// and G = diag(delta_k mu_kj).
inline InfluenceSet gcd_one_step(const ClusteredDataset& data, const ModelParams& params,
                                 const std::vector<double>& delta, LinkFunction link = LinkFunction::log) {
  if (delta.size() != data.q()) throw Error(ErrorCode::dimension, "delta must have one entry per cluster");
  const VectorXd mu = compute_mu(data, params, link);
  InfluenceSet out;
  out.G = detail::expand_per_observation(data, delta).cwiseProduct(mu);
  out.a = data.y() - out.G;
  const MatrixXd weighted = out.G.cwiseSqrt().asDiagonal() * data.X();
  if (!ClusteredDataset::full_column_rank(weighted)) throw Error(ErrorCode::rank_deficient, "X'GX is singular");
  const MatrixXd info = weighted.transpose() * weighted;
  Eigen::LLT<MatrixXd> llt(info);
  if (llt.info() != Eigen::Success) throw Error(ErrorCode::rank_deficient, "X'GX is singular");
  // x' (X'GX)^{-1} x = |L^{-1} x|^2
  const MatrixXd half = llt.matrixL().solve(data.X().transpose());
  out.gcd1 = out.a.array().square() * half.colwise().squaredNorm().transpose().array();
  return out;
}

/// Same, with delta_k evaluated at the fitted parameters.
inline InfluenceSet gcd_one_step(const ClusteredDataset& data, const FitResult& fitted,
                                 LinkFunction link = LinkFunction::log) {
  return gcd_one_step(data, fitted.params, conditional_moments(data, fitted.params, link).delta, link);
}

}  // namespace cpbs
