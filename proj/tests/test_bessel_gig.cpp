#include <cmath>
#include <numbers>
#include <vector>

#include <gtest/gtest.h>

#include "cpbs/bessel_gig.hpp"
#include "oracle/quadrature.hpp"

using cpbs::GigParams;
using cpbs::HalfIntOrder;

namespace {

HalfIntOrder order_of(double lambda) { return HalfIntOrder{static_cast<long>(std::floor(lambda))}; }

// K_lambda(x) = (1/2) int z^{lambda-1} exp(-x (z + 1/z)/2) dz
double log_k_quadrature(double lambda, double x) { return oracle::log_gig_integral(x, x, lambda) - std::numbers::ln2; }

}  // namespace

TEST(BesselK, HalfOrderClosedForm) {
  const double expected = std::sqrt(std::numbers::pi / 2.0) * std::exp(-1.0);
  EXPECT_NEAR(std::exp(cpbs::log_bessel_k_half(order_of(0.5), 1.0)), 0.4610685, 1e-7);
  EXPECT_NEAR(cpbs::log_bessel_k_half(order_of(0.5), 1.0), std::log(expected), 1e-15);
  EXPECT_NEAR(cpbs::log_bessel_k_half(order_of(0.5), 1.0), log_k_quadrature(0.5, 1.0), 1e-12);
}

TEST(BesselK, ThreeHalvesAtOne) {
  EXPECT_NEAR(std::exp(cpbs::log_bessel_k_half(order_of(1.5), 1.0)), 0.9221371, 1e-7);
  EXPECT_NEAR(cpbs::log_bessel_k_half(order_of(1.5), 1.0), log_k_quadrature(1.5, 1.0), 1e-12);
}

TEST(BesselK, NegativeOrderSymmetry) {
  EXPECT_EQ(cpbs::log_bessel_k_half(order_of(-0.5), 3.0), cpbs::log_bessel_k_half(order_of(0.5), 3.0));
  for (long m = 0; m < 12; ++m)
    EXPECT_EQ(cpbs::log_bessel_k_half(HalfIntOrder{-m - 1}, 0.7), cpbs::log_bessel_k_half(HalfIntOrder{m}, 0.7));
}

TEST(BesselK, RejectsNonPositiveArgument) {
  EXPECT_THROW(cpbs::log_bessel_k_half(order_of(0.5), 0.0), cpbs::Error);
  EXPECT_THROW(cpbs::log_bessel_k_half(order_of(0.5), -1.0), cpbs::Error);
  EXPECT_THROW(cpbs::log_bessel_k_half(order_of(0.5), NAN), cpbs::Error);
  try {
    cpbs::log_bessel_k_half(order_of(2.5), -2.0);
  } catch (const cpbs::Error& e) {
    EXPECT_EQ(e.code(), cpbs::ErrorCode::domain);
  }
}

TEST(BesselK, MatchesQuadratureOnGrid) {
  const std::vector<double> xs{1e-3, 1e-2, 0.1, 0.5, 1.0, 3.0, 10.0, 50.0, 200.0, 1e3};
  const std::vector<double> lambdas{-7.5, -0.5, 0.5, 2.5, 9.5};
  for (double x : xs)
    for (double lambda : lambdas) {
      const double lib = cpbs::log_bessel_k_half(order_of(lambda), x);
      const double ref = log_k_quadrature(lambda, x);
      // relative error of K itself
      EXPECT_LE(std::abs(std::expm1(lib - ref)), 1e-10) << "lambda=" << lambda << " x=" << x;
    }
}

TEST(BesselK, FiniteForLargeOrders) {
  for (double x : {1e-3, 0.1, 1.0, 100.0, 1e3})
    for (long m : {0L, 10L, 500L, 4999L}) {
      EXPECT_TRUE(std::isfinite(cpbs::log_bessel_k_half(HalfIntOrder{m}, x))) << m << " " << x;
      EXPECT_TRUE(std::isfinite(cpbs::log_bessel_k_half_scaled(HalfIntOrder{m}, x)));
    }
}

TEST(BesselK, RecurrenceConsistency) {
  for (double x : {0.3, 1.0, 4.0, 25.0})
    for (long m = 1; m < 30; ++m) {
      const double lambda = HalfIntOrder{m}.value();
      const double km = std::exp(cpbs::log_bessel_k_half(HalfIntOrder{m - 1}, x));
      const double k = std::exp(cpbs::log_bessel_k_half(HalfIntOrder{m}, x));
      const double kp = std::exp(cpbs::log_bessel_k_half(HalfIntOrder{m + 1}, x));
      if (!std::isnormal(km) || !std::isnormal(kp)) continue;
      EXPECT_LE(std::abs(kp - km - 2.0 * lambda / x * k) / kp, 1e-12) << "m=" << m << " x=" << x;
    }
}

TEST(BesselK, WindowMatchesSingleEvaluations) {
  std::vector<double> w(6);
  cpbs::detail::log_bessel_k_half_scaled_window(-3, 2.5, w);
  for (long j = 0; j < 6; ++j) EXPECT_EQ(w[static_cast<std::size_t>(j)], cpbs::log_bessel_k_half_scaled(HalfIntOrder{-3 + j}, 2.5));
}

TEST(Gig, NormalizerAtUnitParameters) {
  const GigParams p{1.0, 1.0, order_of(0.5)};
  EXPECT_NEAR(std::exp(cpbs::log_gig_normalizer(p)), 0.9221371, 1e-7);
  EXPECT_NEAR(cpbs::log_gig_normalizer(p), oracle::log_gig_integral(1.0, 1.0, 0.5), 1e-12);
}

TEST(Gig, EqualParametersReduceToBessel) {
  for (double a : {0.2, 1.0, 7.0})
    for (long m : {-3L, 0L, 4L}) {
      const GigParams p{a, a, HalfIntOrder{m}};
      EXPECT_NEAR(cpbs::log_gig_normalizer(p), std::numbers::ln2 + cpbs::log_bessel_k_half(p.alpha, a), 1e-14);
    }
}

TEST(Gig, OrderReflection) {
  const double a = 2.0, b = 0.5;
  for (long m : {0L, 1L, 3L}) {
    const HalfIntOrder alpha{m};
    const HalfIntOrder neg{-m - 1};
    ASSERT_DOUBLE_EQ(neg.value(), -alpha.value());
    const double diff = cpbs::log_gig_normalizer({a, b, neg}) - cpbs::log_gig_normalizer({a, b, alpha});
    EXPECT_NEAR(diff, -alpha.value() * std::log(b / a), 1e-13);
  }
}

TEST(Gig, NormalizerMatchesQuadrature) {
  for (double a : {0.05, 1.0, 12.0})
    for (double b : {0.3, 2.0, 40.0})
      for (double alpha : {-3.5, -0.5, 1.5, 6.5})
        EXPECT_LE(std::abs(std::expm1(cpbs::log_gig_normalizer({a, b, order_of(alpha)}) -
                                      oracle::log_gig_integral(a, b, alpha))),
                  1e-10)
            << a << " " << b << " " << alpha;
}

TEST(Gig, ZerothMomentIsOne) {
  EXPECT_EQ(cpbs::log_gig_moment({3.0, 0.2, HalfIntOrder{5}}, 0), 0.0);
  EXPECT_EQ(cpbs::log_gig_moment({0.1, 9.0, HalfIntOrder{-4}}, 0), 0.0);
}

TEST(Gig, FirstMomentAtUnitParameters) {
  const GigParams p{1.0, 1.0, order_of(0.5)};
  EXPECT_NEAR(std::exp(cpbs::log_gig_moment(p, 1)), 2.0, 1e-14);
  const double ref = oracle::log_gig_integral(1.0, 1.0, 1.5) - oracle::log_gig_integral(1.0, 1.0, 0.5);
  EXPECT_NEAR(cpbs::log_gig_moment(p, 1), ref, 1e-12);
}

// With a = b the law of Z is that of 1/Z exactly when alpha = 0; with
// half-integer alpha the same reflection pairs alpha = 1/2 with alpha = -1/2:
// E[Z | alpha] = E[1/Z | -alpha].
TEST(Gig, ReflectionOfMomentsWhenParametersEqual) {
  for (double a : {0.4, 1.0, 5.0}) {
    const double up = cpbs::log_gig_moment({a, a, order_of(0.5)}, 1);
    const double down = cpbs::log_gig_moment({a, a, order_of(-0.5)}, -1);
    EXPECT_NEAR(up, down, 1e-14);
  }
}

TEST(Gig, CauchySchwarzOnMoments) {
  for (double a : {0.01, 0.5, 3.0, 80.0})
    for (double b : {0.02, 1.0, 30.0})
      for (long m = -6; m <= 6; ++m) {
        const GigParams p{a, b, HalfIntOrder{m}};
        const double sum = cpbs::log_gig_moment(p, 1) + cpbs::log_gig_moment(p, -1);
        EXPECT_TRUE(std::isfinite(sum));
        EXPECT_GE(sum, -1e-13);
      }
}

TEST(Gig, RejectsInvalidParameters) {
  EXPECT_THROW(cpbs::log_gig_normalizer({0.0, 1.0, HalfIntOrder{0}}), cpbs::Error);
  EXPECT_THROW(cpbs::log_gig_normalizer({1.0, -1.0, HalfIntOrder{0}}), cpbs::Error);
  EXPECT_THROW(cpbs::log_gig_moment({1.0, 0.0, HalfIntOrder{0}}, 0), cpbs::Error);
}
