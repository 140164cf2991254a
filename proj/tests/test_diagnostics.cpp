#include <algorithm>
#include <cmath>
#include <numeric>
#include <vector>

#include <gtest/gtest.h>

#include "cpbs/diagnostics.hpp"
#include "cpbs/mc.hpp"
#include "oracle/deletion.hpp"

using cpbs::ClusteredDataset;
using cpbs::FitResult;
using cpbs::LinkFunction;
using cpbs::ModelParams;
using cpbs::VectorXd;
using Eigen::MatrixXd;

namespace {

const ModelParams kTruth{(VectorXd(3) << 3.0, -1.25, 0.75).finished(), 0.45};

ClusteredDataset study_data(int q, int n_k, std::uint64_t seed, const ModelParams& truth = kTruth) {
  const auto design = cpbs::mc_design(q, n_k, {}, seed);
  auto rng = cpbs::make_stream(seed, 1, 0x7E);
  return cpbs::simulate_responses(design, truth, rng);
}

FitResult at(const ModelParams& p) {
  FitResult f;
  f.params = p;
  f.converged = true;
  return f;
}

}  // namespace

TEST(PearsonResiduals, ZeroWhenCountEqualsFittedMean) {
  // intercept-only with mu chosen so that lambda = 3 exactly
  const double phi = 0.5;
  const double mu = 3.0 / (1.0 + 0.5 * phi * phi);
  const ClusteredDataset data({{"a", {3, 1}, MatrixXd::Ones(2, 1)}});
  const auto r = cpbs::pearson_residuals(data, ModelParams{(VectorXd(1) << std::log(mu)).finished(), phi});
  EXPECT_NEAR(r.lambda_hat(0), 3.0, 1e-14);
  EXPECT_NEAR(r.r(0), 0.0, 1e-14);
}

TEST(PearsonResiduals, FloorGivesPoissonResidual) {
  const auto data = study_data(2, 30, 3);
  const ModelParams p{kTruth.beta, cpbs::kPhiFloor};
  const auto r = cpbs::pearson_residuals(data, p);
  const VectorXd mu = cpbs::compute_mu(data, p);
  const VectorXd classic = (data.y() - mu).array() / mu.array().sqrt();
  EXPECT_LE((r.r - classic).cwiseAbs().maxCoeff(), 1e-9);
}

TEST(PearsonResiduals, VarianceIdentity) {
  const auto data = study_data(3, 20, 4);
  const auto r = cpbs::pearson_residuals(data, kTruth);
  const VectorXd mu = cpbs::compute_mu(data, kTruth);
  const double phi2 = kTruth.phi * kTruth.phi;
  for (Eigen::Index i = 0; i < data.n(); ++i) {
    const double excess = mu(i) * mu(i) * phi2 * (1.0 + 1.25 * phi2);
    EXPECT_NEAR(r.sigma2_hat(i) - r.lambda_hat(i), excess, 1e-13 * r.sigma2_hat(i));
  }
}

TEST(PearsonResiduals, ZeroMeanUnitVarianceInLargeSamples) {
  const auto data = study_data(7, 300, 8);
  const auto fit = cpbs::em_fit(data);
  auto rng = cpbs::make_stream(8, 2);
  const auto sim = cpbs::simulate_responses(data, fit.params, rng);
  const VectorXd r = cpbs::pearson_residuals(sim, fit.params).r;
  const double mean = r.mean();
  const double var = (r.array() - mean).square().sum() / static_cast<double>(r.size() - 1);
  EXPECT_GT(mean, -0.05);
  EXPECT_LT(mean, 0.05);
  EXPECT_GT(var, 0.8);
  EXPECT_LT(var, 1.2);
}

TEST(Percentile, LinearInterpolation) {
  const std::vector<double> x{1.0, 2.0, 4.0, 8.0};
  EXPECT_EQ(cpbs::interpolated_percentile(x, 0.0), 1.0);
  EXPECT_EQ(cpbs::interpolated_percentile(x, 1.0), 8.0);
  EXPECT_DOUBLE_EQ(cpbs::interpolated_percentile(x, 0.5), 3.0);
  EXPECT_THROW(cpbs::interpolated_percentile(std::vector<double>{}, 0.5), cpbs::Error);
}

TEST(Envelopes, ShapeAndOrdering) {
  const auto data = study_data(3, 40, 11);
  const auto fit = cpbs::em_fit(data);
  const auto bands = cpbs::simulated_envelopes(data, fit, LinkFunction::log, 40, 5);
  ASSERT_EQ(bands.sorted_r.size(), data.n());
  ASSERT_EQ(bands.lo.size(), data.n());
  for (Eigen::Index i = 0; i < data.n(); ++i) {
    EXPECT_LE(bands.lo(i), bands.hi(i));
    if (i > 0) EXPECT_LE(bands.sorted_r(i - 1), bands.sorted_r(i));
  }
  EXPECT_GE(bands.coverage, 0.0);
  EXPECT_LE(bands.coverage, 1.0);
  EXPECT_EQ(bands.used + bands.dropped, 40);
  const double counted = std::count(bands.inside.begin(), bands.inside.end(), 1) / static_cast<double>(data.n());
  EXPECT_EQ(bands.coverage, counted);
}

TEST(Envelopes, DeterministicAcrossThreads) {
  const auto data = study_data(3, 30, 12);
  const auto fit = cpbs::em_fit(data);
  cpbs::EnvelopeOptions one, many;
  one.threads = 1;
  many.threads = 3;
  const auto a = cpbs::simulated_envelopes(data, fit, LinkFunction::log, 25, 99, one);
  const auto b = cpbs::simulated_envelopes(data, fit, LinkFunction::log, 25, 99, many);
  EXPECT_TRUE(a.lo == b.lo);
  EXPECT_TRUE(a.hi == b.hi);
  EXPECT_EQ(a.coverage, b.coverage);
}

TEST(Envelopes, RequireTwentySimulations) {
  const auto data = study_data(2, 20, 1);
  EXPECT_THROW(cpbs::simulated_envelopes(data, at(kTruth), LinkFunction::log, 19, 1), cpbs::Error);
}

TEST(Envelopes, SelfConsistentCoverage) {
  const auto design = cpbs::mc_design(4, 50, {}, 14);
  int good = 0;
  for (int trial = 0; trial < 3; ++trial) {
    auto rng = cpbs::make_stream(14, static_cast<std::uint64_t>(trial), 0x11);
    const auto data = cpbs::simulate_responses(design, kTruth, rng);
    const auto fit = cpbs::em_fit(data);
    const auto bands = cpbs::simulated_envelopes(data, fit, LinkFunction::log, 100, 40 + static_cast<std::uint64_t>(trial));
    good += bands.coverage >= 0.9 ? 1 : 0;
  }
  EXPECT_GE(good, 2);
}

TEST(Envelopes, WidenWithDispersion) {
  const auto design = cpbs::mc_design(4, 50, {}, 15);
  std::vector<double> widths;
  for (double phi : {0.1, 0.3, 0.6}) {
    const ModelParams p{kTruth.beta, phi};
    auto rng = cpbs::make_stream(15, 0, 0x22);
    const auto data = cpbs::simulate_responses(design, p, rng);
    // EM contracts slowly near phi = 0.1, so give refits a larger budget
    cpbs::EnvelopeOptions opts;
    opts.em.max_iter = 20000;
    const auto bands = cpbs::simulated_envelopes(data, at(p), LinkFunction::log, 60, 3, opts);
    // mean band width over all ranks; the extreme upper ranks alone are
    // dominated by the discreteness of small counts
    widths.push_back((bands.hi - bands.lo).mean());
  }
  EXPECT_LT(widths[0], widths[1]);
  EXPECT_LT(widths[1], widths[2]);
}

TEST(Gcd, NonNegativeAndZeroAtPerfectFit) {
  const auto data = study_data(3, 25, 16);
  const auto fit = cpbs::em_fit(data);
  const auto inf = cpbs::gcd_one_step(data, fit);
  EXPECT_TRUE((inf.gcd1.array() >= 0.0).all());
  EXPECT_LE((inf.a - (data.y() - inf.G)).cwiseAbs().maxCoeff(), 0.0);

  // y equal to delta * mu for an observation makes its distance vanish
  const ClusteredDataset one({{"a", {2, 2}, MatrixXd::Ones(2, 1)}});
  const ModelParams p{(VectorXd(1) << std::log(2.0)).finished(), 0.3};
  const auto res = cpbs::gcd_one_step(one, p, {1.0});
  EXPECT_NEAR(res.gcd1(0), 0.0, 1e-28);
  EXPECT_NEAR(res.gcd1(1), 0.0, 1e-28);
}

TEST(Gcd, InvariantToObservationOrder) {
  const auto data = study_data(2, 15, 17);
  const auto fit = cpbs::em_fit(data);
  const auto base = cpbs::gcd_one_step(data, fit.params, cpbs::conditional_moments(data, fit.params).delta);
  // reverse rows within each cluster
  std::vector<ClusteredDataset::Cluster> cl;
  for (std::size_t k = 0; k < data.q(); ++k) {
    const auto c = data.cluster(k);
    ClusteredDataset::Cluster out{c.id, {c.y.rbegin(), c.y.rend()}, c.X.colwise().reverse()};
    cl.push_back(std::move(out));
  }
  const ClusteredDataset rev(std::move(cl));
  const auto flipped = cpbs::gcd_one_step(rev, fit.params, cpbs::conditional_moments(rev, fit.params).delta);
  for (std::size_t k = 0; k < data.q(); ++k) {
    const Eigen::Index off = data.cluster_offset(k), nk = data.cluster_size(k);
    for (Eigen::Index j = 0; j < nk; ++j)
      EXPECT_NEAR(base.gcd1(off + j), flipped.gcd1(off + nk - 1 - j), 1e-12 * (1.0 + base.gcd1(off + j)));
  }
}

TEST(Gcd, SingularInformationIsARankError) {
  MatrixXd X(2, 2);
  X << 1, 1, 1, 1;
  const ClusteredDataset data({{"a", {1, 2}, X}}, false);
  try {
    cpbs::gcd_one_step(data, ModelParams{VectorXd::Zero(2), 0.3}, {1.0});
    FAIL();
  } catch (const cpbs::Error& e) {
    EXPECT_EQ(e.code(), cpbs::ErrorCode::rank_deficient);
  }
}

TEST(Gcd, TracksExactDeletion) {
  const auto data = study_data(2, 20, 18);
  const auto fit = cpbs::em_fit(data);
  ASSERT_TRUE(fit.converged);
  const auto inf = cpbs::gcd_one_step(data, fit);
  const auto exact = oracle::exact_deletion_distance(data, fit);
  const std::vector<double> approx(inf.gcd1.data(), inf.gcd1.data() + inf.gcd1.size());
  EXPECT_GT(oracle::spearman(approx, exact), 0.9);
}
