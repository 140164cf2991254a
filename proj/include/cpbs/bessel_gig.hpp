#pragma once

// Log-space modified Bessel functions of the third kind at half-integer
// orders, and the generalized inverse Gaussian (GIG) normalizer built on them.

#include <algorithm>
#include <cmath>
#include <numbers>
#include <span>
#include <string>

#include "cpbs/error.hpp"

namespace cpbs {

/// Order lambda = m + 1/2 of a Bessel function, stored by its integer part m.
struct HalfIntOrder {
  long m = 0;

  constexpr double value() const { return static_cast<double>(m) + 0.5; }

  /// K_{-lambda} = K_lambda: the non-negative order with the same K.
  constexpr HalfIntOrder magnitude() const { return m >= 0 ? *this : HalfIntOrder{-m - 1}; }

  constexpr HalfIntOrder shifted(long s) const { return HalfIntOrder{m + s}; }

  /// Order y - 1/2 style helper: the half-integer nearest below/above an integer.
  static constexpr HalfIntOrder plus_half(long n) { return HalfIntOrder{n}; }
  static constexpr HalfIntOrder minus_half(long n) { return HalfIntOrder{n - 1}; }

  friend constexpr bool operator==(HalfIntOrder, HalfIntOrder) = default;
};

/// GIG(a, b, alpha) with density proportional to z^{alpha-1} exp{-(a z + b/z)/2}.
/// Only half-integer alpha is supported, which covers every order the
/// CPBS likelihood and its conditional moments produce.
struct GigParams {
  double a = 1.0;
  double b = 1.0;
  HalfIntOrder alpha{};

  void validate() const {
    if (!(a > 0.0) || !(b > 0.0) || !std::isfinite(a) || !std::isfinite(b))
      throw Error(ErrorCode::domain, "GIG parameters require a > 0 and b > 0");
  }
};

namespace detail {

inline void require_positive_argument(double x) {
  if (!(x > 0.0) || !std::isfinite(x))
    throw Error(ErrorCode::domain, "Bessel K argument must be positive and finite, got " + std::to_string(x));
}

/// Writes ln(e^x K_{m+1/2}(x)) for m = m_lo, ..., m_lo + out.size() - 1.
/// Forward recurrence on the ratio r_i = K_{i+3/2}/K_{i+1/2}, which stays
/// >= 1, so the log-magnitude never overflows regardless of order.
inline void log_bessel_k_half_scaled_window(long m_lo, double x, std::span<double> out) {
  require_positive_argument(x);
  if (out.empty()) return;

  long top = 0;
  for (std::size_t j = 0; j < out.size(); ++j)
    top = std::max(top, HalfIntOrder{m_lo + static_cast<long>(j)}.magnitude().m);

  auto emit = [&](long m, double value) {
    for (std::size_t j = 0; j < out.size(); ++j)
      if (HalfIntOrder{m_lo + static_cast<long>(j)}.magnitude().m == m) out[j] = value;
  };

  double log_k = 0.5 * std::log(std::numbers::pi / (2.0 * x));
  emit(0, log_k);
  double ratio = 1.0;  // K_{1/2}/K_{-1/2}
  for (long i = 0; i < top; ++i) {
    ratio = 1.0 / ratio + (2.0 * static_cast<double>(i) + 1.0) / x;
    log_k += std::log(ratio);
    emit(i + 1, log_k);
  }
}

}  // namespace detail

/// ln(e^x K_lambda(x)). Preferred inside the likelihood, where e^{-x}
/// cancels analytically against other exponentials.
inline double log_bessel_k_half_scaled(HalfIntOrder order, double x) {
  double out = 0.0;
  detail::log_bessel_k_half_scaled_window(order.m, x, std::span<double>(&out, 1));
  return out;
}

/// ln K_lambda(x) for half-integer lambda and x > 0.
inline double log_bessel_k_half(HalfIntOrder order, double x) {
  return log_bessel_k_half_scaled(order, x) - x;
}

/// ln of the integral of z^{alpha-1} exp{-(a z + b/z)/2} over (0, inf),
/// i.e. ln[ 2 (b/a)^{alpha/2} K_alpha(sqrt(ab)) ].
inline double log_gig_normalizer(const GigParams& p) {
  p.validate();
  const double x = std::sqrt(p.a * p.b);
  return std::numbers::ln2 + 0.5 * p.alpha.value() * (std::log(p.b) - std::log(p.a)) +
         log_bessel_k_half(p.alpha, x);
}

/// ln E[Z^s] for Z ~ GIG(a, b, alpha).
inline double log_gig_moment(const GigParams& p, long s) {
  if (s == 0) {
    p.validate();
    return 0.0;
  }
  GigParams shifted = p;
  shifted.alpha = p.alpha.shifted(s);
  return log_gig_normalizer(shifted) - log_gig_normalizer(p);
}

}  // namespace cpbs
