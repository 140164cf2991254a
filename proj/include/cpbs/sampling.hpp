#pragma once

// Random generation from the BS mixing law and the CPBS model.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <random>
#include <span>
#include <vector>

#include "cpbs/model.hpp"

namespace cpbs {

using Rng = std::mt19937_64;

/// Independent stream for replicate `index` of a run seeded with `seed`.
/// `tag` separates unrelated uses of the same (seed, index).
inline Rng make_stream(std::uint64_t seed, std::uint64_t index, std::uint32_t tag = 0) {
  std::seed_seq seq{static_cast<std::uint32_t>(seed), static_cast<std::uint32_t>(seed >> 32),
                    static_cast<std::uint32_t>(index), static_cast<std::uint32_t>(index >> 32), tag};
  return Rng(seq);
}

/// T ~ BS(phi): T = [phi Z/2 + sqrt((phi Z/2)^2 + 1)]^2 with Z standard normal.
template <class Urbg>
double sample_bs(double phi, Urbg& rng) {
  if (!(phi > 0.0)) throw Error(ErrorCode::domain, "sample_bs requires phi > 0");
  std::normal_distribution<double> normal(0.0, 1.0);
  const double h = 0.5 * phi * normal(rng);
  const double root = h + std::sqrt(h * h + 1.0);
  return root * root;
}

template <class Urbg>
std::int64_t sample_poisson(double rate, Urbg& rng) {
  if (rate <= 0.0) return 0;
  std::poisson_distribution<std::int64_t> pois(rate);
  return pois(rng);
}

/// One cluster: a shared T ~ BS(phi), then Y_j | T ~ Poisson(mu_j T).
template <class Urbg>
std::vector<std::int64_t> sample_cluster(std::span<const double> mu, double phi, Urbg& rng) {
  const double t = sample_bs(phi, rng);
  std::vector<std::int64_t> y(mu.size());
  for (std::size_t j = 0; j < mu.size(); ++j) y[j] = sample_poisson(mu[j] * t, rng);
  return y;
}

/// Fresh responses for the design and cluster layout of `data` under `params`.
template <class Urbg>
ClusteredDataset simulate_responses(const ClusteredDataset& data, const ModelParams& params, Urbg& rng,
                                    LinkFunction link = LinkFunction::log) {
  const VectorXd mu = compute_mu(data, params, link);
  std::vector<std::int64_t> y(static_cast<std::size_t>(data.n()));
  for (std::size_t k = 0; k < data.q(); ++k) {
    const Eigen::Index off = data.cluster_offset(k), nk = data.cluster_size(k);
    const auto yk = sample_cluster(std::span<const double>(mu.data() + off, static_cast<std::size_t>(nk)), params.phi, rng);
    std::copy(yk.begin(), yk.end(), y.begin() + off);
  }
  return data.with_counts(y);
}

}  // namespace cpbs
