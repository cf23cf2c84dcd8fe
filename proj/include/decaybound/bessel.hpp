/**
 * @file bessel.hpp
 * @brief Modified Bessel function of the second kind, order zero.
 */
#pragma once

#include <cmath>
#include <numbers>

#include "decaybound/error.hpp"

namespace decaybound {

/**
 * K₀(x) for x > 0.
 *
 * x <= 2: ascending series K₀ = -(ln(x/2)+γ)·I₀(x) + Σ (x²/4)^k/(k!)²·H_k.
 * x > 2: Steed's continued fraction (Temme's CF2), which keeps full relative
 * precision in the exponential tail where the series cancels.
 */
inline double bessel_k0(double x) {
  if (!(x > 0.0)) throw Error(ErrorCode::DomainError, "K0 requires x > 0");
  constexpr double eps = 1e-16;
  if (x <= 2.0) {
    const double y = 0.25 * x * x;
    double term = 1.0;  // (x²/4)^k / (k!)²
    double i0 = 1.0;
    double harmonic = 0.0;
    double tail = 0.0;
    for (int k = 1; k < 60; ++k) {
      term *= y / (static_cast<double>(k) * static_cast<double>(k));
      harmonic += 1.0 / static_cast<double>(k);
      i0 += term;
      tail += term * harmonic;
      if (term * harmonic < eps * std::abs(tail)) break;
    }
    return -(std::log(0.5 * x) + std::numbers::egamma) * i0 + tail;
  }

  double b = 2.0 * (1.0 + x);
  double d = 1.0 / b;
  double h = d;
  double delh = d;
  double q1 = 0.0;
  double q2 = 1.0;
  const double a1 = 0.25;
  double q = a1;
  double c = a1;
  double a = -a1;
  double s = 1.0 + q * delh;
  for (int i = 1; i < 10000; ++i) {
    a -= 2.0 * i;
    c = -a * c / (i + 1.0);
    const double qnew = (q1 - b * q2) / a;
    q1 = q2;
    q2 = qnew;
    q += c * qnew;
    b += 2.0;
    d = 1.0 / (b + a * d);
    delh = (b * d - 1.0) * delh;
    h += delh;
    const double dels = q * delh;
    s += dels;
    if (std::abs(dels / s) < eps) break;
  }
  return std::sqrt(std::numbers::pi / (2.0 * x)) * std::exp(-x) / s;
}

}  // namespace decaybound
