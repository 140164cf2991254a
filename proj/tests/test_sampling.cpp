#include <algorithm>
#include <cmath>
#include <vector>

#include <gtest/gtest.h>

#include "cpbs/mc.hpp"
#include "cpbs/sampling.hpp"
#include "oracle/quadrature.hpp"

using cpbs::ModelParams;
using cpbs::VectorXd;

namespace {

struct Summary {
  double mean = 0.0, var = 0.0, se_mean = 0.0, se_var = 0.0;
};

Summary summarize(const std::vector<double>& x) {
  const double n = static_cast<double>(x.size());
  Summary s;
  for (double v : x) s.mean += v;
  s.mean /= n;
  double m2 = 0.0, m4 = 0.0;
  for (double v : x) {
    const double d = (v - s.mean) * (v - s.mean);
    m2 += d;
    m4 += d * d;
  }
  s.var = m2 / (n - 1.0);
  s.se_mean = std::sqrt(s.var / n);
  s.se_var = std::sqrt((m4 / n - (m2 / n) * (m2 / n)) / n);
  return s;
}

}  // namespace

TEST(SampleBs, MomentsMatchFormula) {
  auto rng = cpbs::make_stream(1, 0);
  std::vector<double> t(1000000);
  for (auto& v : t) v = cpbs::sample_bs(0.45, rng);
  const Summary s = summarize(t);
  EXPECT_NEAR(s.mean, 1.10125, 4.0 * s.se_mean);
  EXPECT_NEAR(s.var, 0.2025 * 1.253125, 4.0 * s.se_var);
}

TEST(SampleBs, KolmogorovSmirnovAgainstQuadratureCdf) {
  const double phi = 0.45;
  auto rng = cpbs::make_stream(2, 0);
  std::vector<double> t(100000);
  for (auto& v : t) v = cpbs::sample_bs(phi, rng);
  std::sort(t.begin(), t.end());
  const double n = static_cast<double>(t.size());
  double cdf = oracle::bs_mass(1e-6, t.front(), phi);
  double d = 0.0;
  for (std::size_t i = 0; i < t.size(); ++i) {
    if (i > 0) cdf += oracle::bs_mass(t[i - 1], t[i], phi);
    d = std::max({d, std::abs(cdf - static_cast<double>(i) / n), std::abs(static_cast<double>(i + 1) / n - cdf)});
  }
  EXPECT_LT(d, 1.628 / std::sqrt(n));
}

TEST(SampleBs, RejectsNonPositivePhi) {
  auto rng = cpbs::make_stream(1, 1);
  EXPECT_THROW(cpbs::sample_bs(0.0, rng), cpbs::Error);
}

TEST(SampleCluster, FloorGivesPoissonCounts) {
  auto rng = cpbs::make_stream(3, 0);
  const std::vector<double> mu{1.5};
  const int n = 100000;
  std::vector<int> bins(8, 0);
  for (int i = 0; i < n; ++i) {
    const auto y = cpbs::sample_cluster(std::span<const double>(mu), cpbs::kPhiFloor, rng);
    ++bins[static_cast<std::size_t>(std::min<std::int64_t>(y[0], 7))];
  }
  double chi2 = 0.0, tail = 1.0;
  for (int k = 0; k < 8; ++k) {
    double p;
    if (k < 7) {
      p = std::exp(k * std::log(1.5) - 1.5 - std::lgamma(k + 1.0));
      tail -= p;
    } else {
      p = tail;
    }
    const double e = p * n;
    chi2 += (bins[static_cast<std::size_t>(k)] - e) * (bins[static_cast<std::size_t>(k)] - e) / e;
  }
  EXPECT_LT(chi2, 18.475);  // chi-square(7) upper 1% point
}

TEST(SampleCluster, WithinClusterCovariance) {
  auto rng = cpbs::make_stream(4, 0);
  const std::vector<double> mu{1.0, 2.0};
  const double phi = 0.6;
  const int n = 1000000;
  std::vector<double> a(n), b(n);
  for (int i = 0; i < n; ++i) {
    const auto y = cpbs::sample_cluster(std::span<const double>(mu), phi, rng);
    a[static_cast<std::size_t>(i)] = static_cast<double>(y[0]);
    b[static_cast<std::size_t>(i)] = static_cast<double>(y[1]);
  }
  const Summary sa = summarize(a), sb = summarize(b);
  std::vector<double> prod(n);
  for (int i = 0; i < n; ++i)
    prod[static_cast<std::size_t>(i)] = (a[static_cast<std::size_t>(i)] - sa.mean) * (b[static_cast<std::size_t>(i)] - sb.mean);
  const Summary sp = summarize(prod);
  const auto m = cpbs::model_moments(1.0, 2.0, phi);
  EXPECT_NEAR(sp.mean, m.covariance, 4.0 * sp.se_mean);
  EXPECT_NEAR(sa.mean, m.mean, 4.0 * sa.se_mean);
  EXPECT_NEAR(sa.var, m.variance, 4.0 * sa.se_var);
}

TEST(SampleCluster, MarginalMomentsAtKnownValues) {
  auto rng = cpbs::make_stream(5, 0);
  const std::vector<double> mu{2.0};
  std::vector<double> y(2000000);
  for (auto& v : y) v = static_cast<double>(cpbs::sample_cluster(std::span<const double>(mu), 0.45, rng)[0]);
  const Summary s = summarize(y);
  EXPECT_NEAR(s.mean, 2.2025, 4.0 * s.se_mean);
  EXPECT_NEAR(s.var, 3.2175, 4.0 * s.se_var + 1e-4);
}

TEST(SampleCluster, EmpiricalPmfMatchesExact) {
  auto rng = cpbs::make_stream(6, 0);
  const std::vector<double> mu{0.4, 0.7};
  const double phi = 0.6;
  const int n = 200000;
  std::vector<int> cells(16, 0);
  for (int i = 0; i < n; ++i) {
    const auto y = cpbs::sample_cluster(std::span<const double>(mu), phi, rng);
    if (y[0] < 4 && y[1] < 4) ++cells[static_cast<std::size_t>(y[0] * 4 + y[1])];
  }
  for (std::int64_t a = 0; a < 4; ++a)
    for (std::int64_t b = 0; b < 4; ++b) {
      const std::vector<std::int64_t> y{a, b};
      const double p = std::exp(cpbs::cluster_log_pmf(y, mu, phi));
      const double emp = cells[static_cast<std::size_t>(a * 4 + b)] / static_cast<double>(n);
      EXPECT_NEAR(emp, p, 4.0 * std::sqrt(p * (1.0 - p) / n) + 1e-12) << a << "," << b;
    }
}

TEST(SimulateResponses, KeepsDesignAndClusters) {
  const auto design = cpbs::mc_design(3, 10, {}, 4);
  auto rng = cpbs::make_stream(4, 1);
  const auto sim = cpbs::simulate_responses(design, ModelParams{(VectorXd(3) << 3.0, -1.25, 0.75).finished(), 0.45}, rng);
  EXPECT_EQ(sim.q(), 3u);
  EXPECT_TRUE(sim.X() == design.X());
  EXPECT_EQ(sim.cluster_sizes(), design.cluster_sizes());
}

TEST(McStudy, DesignFixedAcrossReplicates) {
  cpbs::McConfig cfg;
  cfg.q = 2;
  cfg.n_k = 15;
  cfg.seed = 9;
  const auto a = cpbs::mc_simulate(cfg, 0);
  const auto b = cpbs::mc_simulate(cfg, 7);
  EXPECT_TRUE(a.X() == b.X());
  EXPECT_FALSE(a.y() == b.y());
  EXPECT_TRUE(cpbs::mc_design(2, 15, {}, 9).X() == a.X());
}

TEST(McStudy, SingleReplicateRmseIsAbsoluteError) {
  cpbs::McConfig cfg;
  cfg.q = 4;
  cfg.n_k = 50;
  cfg.reps = 1;
  cfg.seed = 3;
  const auto rep = cpbs::run_mc_study(cfg);
  ASSERT_EQ(rep.estimates.rows(), 1);
  for (std::size_t j = 0; j < 4; ++j) {
    const auto& s = rep.parameters[j];
    EXPECT_EQ(s.rmse, std::abs(rep.estimates(0, static_cast<Eigen::Index>(j)) - s.truth));
    EXPECT_EQ(s.bias, s.mean - s.truth);
  }
}

TEST(McStudy, DeterministicGivenSeed) {
  cpbs::McConfig cfg;
  cfg.q = 3;
  cfg.n_k = 40;
  cfg.reps = 6;
  cfg.seed = 21;
  cfg.threads = 1;
  const auto a = cpbs::run_mc_study(cfg);
  cfg.threads = 3;
  const auto b = cpbs::run_mc_study(cfg);
  EXPECT_TRUE(a.estimates == b.estimates);
  EXPECT_EQ(cpbs::to_json(a).dump(), cpbs::to_json(b).dump());
}

TEST(McStudy, ConfigValidation) {
  cpbs::McConfig cfg;
  cfg.q = 0;
  EXPECT_THROW(cpbs::run_mc_study(cfg), cpbs::Error);
  cfg = {};
  cfg.covariates.x2_prob = 1.5;
  EXPECT_THROW(cpbs::run_mc_study(cfg), cpbs::Error);
  cfg = {};
  cfg.theta_true.beta = VectorXd::Zero(2);
  EXPECT_THROW(cpbs::run_mc_study(cfg), cpbs::Error);
}

TEST(McStudy, RmseShrinksWithClusters) {
  // reduced replication; one non-monotone pair tolerated across the three
  // beta coordinates and two steps
  std::vector<cpbs::McReport> reps;
  for (int q : {2, 5, 7}) {
    cpbs::McConfig cfg;
    cfg.q = q;
    cfg.n_k = 100;
    cfg.reps = 60;
    cfg.seed = 5;
    reps.push_back(cpbs::run_mc_study(cfg));
  }
  int violations = 0;
  for (std::size_t j = 0; j < 3; ++j)
    for (std::size_t i = 1; i < reps.size(); ++i)
      violations += reps[i].parameters[j].rmse > reps[i - 1].parameters[j].rmse ? 1 : 0;
  EXPECT_LE(violations, 1);
}
