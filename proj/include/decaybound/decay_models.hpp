/**
 * @file decay_models.hpp
 * @brief Exponential, power-law and log-linear distance-decay mean functions.
 *
 * Units are fixed across the library: distance in km, time in years,
 * outcomes in their native units (percent for prevalence measures).
 */
#pragma once

#include <array>
#include <cmath>
#include <numbers>
#include <optional>
#include <string>
#include <string_view>

#include "decaybound/error.hpp"

namespace decaybound {

enum class DecayModelKind { Exponential, PowerLaw, LogLinear };

inline constexpr std::array<DecayModelKind, 3> kAllDecayModels{
    DecayModelKind::Exponential, DecayModelKind::PowerLaw, DecayModelKind::LogLinear};

constexpr std::string_view to_string(DecayModelKind k) {
  switch (k) {
    case DecayModelKind::Exponential: return "Exponential";
    case DecayModelKind::PowerLaw: return "PowerLaw";
    case DecayModelKind::LogLinear: return "LogLinear";
  }
  return "Unknown";
}

inline std::optional<DecayModelKind> parse_decay_model(std::string_view s) {
  for (auto k : kAllDecayModels) {
    if (s == to_string(k)) return k;
  }
  if (s == "exponential" || s == "exp") return DecayModelKind::Exponential;
  if (s == "power" || s == "powerlaw" || s == "power-law") return DecayModelKind::PowerLaw;
  if (s == "loglinear" || s == "log-linear" || s == "log") return DecayModelKind::LogLinear;
  return std::nullopt;
}

/// Smallest distance at which the log-based families are evaluated; nearer
/// observations are clamped to it before fitting.
inline constexpr double kDistanceFloorKm = 0.1;

inline constexpr bool uses_log_distance(DecayModelKind k) { return k != DecayModelKind::Exponential; }

/**
 * Source intensity `q` and rate. The rate is κ (per km) for Exponential,
 * α (dimensionless) for PowerLaw and β (outcome units per log-km) for
 * LogLinear. The sign is unrestricted: a negative κ is a diagnostic result.
 */
struct DecayParams {
  DecayModelKind kind{DecayModelKind::Exponential};
  double q{};
  double rate{};
};

/// Retained fraction of source intensity that defines a boundary.
class ThresholdSpec {
 public:
  // 0.9 means "90% retained", which the literature also calls the 10% threshold.
  static constexpr double kDefaultEpsilon = 0.9;

  ThresholdSpec() = default;
  explicit ThresholdSpec(double epsilon) : epsilon_(epsilon) {
    if (!(epsilon > 0.0 && epsilon < 1.0))
      throw Error(ErrorCode::InvalidArgument, "epsilon must lie in (0, 1), got " + std::to_string(epsilon));
  }
  double epsilon() const { return epsilon_; }

 private:
  double epsilon_ = kDefaultEpsilon;
};

namespace detail {

inline void check_distance(DecayModelKind kind, double d) {
  if (!(d >= 0.0)) throw Error(ErrorCode::DomainError, "distance must be >= 0");
  if (uses_log_distance(kind) && d < kDistanceFloorKm)
    throw Error(ErrorCode::DomainError,
                std::string(to_string(kind)) + " requires d >= " + std::to_string(kDistanceFloorKm) + " km");
}

}  // namespace detail

inline double predict(const DecayParams& p, double d) {
  detail::check_distance(p.kind, d);
  switch (p.kind) {
    case DecayModelKind::Exponential: return p.q * std::exp(-p.rate * d);
    case DecayModelKind::PowerLaw: return p.q * std::pow(d, -p.rate);
    case DecayModelKind::LogLinear: return p.q - p.rate * std::log(d);
  }
  return 0.0;
}

/// Partial derivatives of predict() with respect to (q, rate).
inline std::array<double, 2> jacobian(const DecayParams& p, double d) {
  detail::check_distance(p.kind, d);
  switch (p.kind) {
    case DecayModelKind::Exponential: {
      const double e = std::exp(-p.rate * d);
      return {e, -p.q * d * e};
    }
    case DecayModelKind::PowerLaw: {
      const double e = std::pow(d, -p.rate);
      return {e, -p.q * std::log(d) * e};
    }
    case DecayModelKind::LogLinear: return {1.0, -std::log(d)};
  }
  return {0.0, 0.0};
}

/**
 * |dτ/dd|. For the exponential family this is κ·τ(d); the power-law and
 * log-linear values are the analytic derivatives of their mean functions.
 */
inline double spatial_gradient_magnitude(const DecayParams& p, double d) {
  detail::check_distance(p.kind, d);
  switch (p.kind) {
    case DecayModelKind::Exponential: return std::abs(p.rate * predict(p, d));
    case DecayModelKind::PowerLaw: return std::abs(p.rate * p.q * std::pow(d, -p.rate - 1.0));
    case DecayModelKind::LogLinear: return std::abs(p.rate / d);
  }
  return 0.0;
}

/// Distance at which an exponential profile halves: ln 2 / κ_eff.
/// Units pass through (per-mile in, miles out).
inline double half_distance(double kappa_eff) {
  if (!(kappa_eff > 0.0))
    throw Error(ErrorCode::NonPositiveRate, "half distance needs kappa_eff > 0");
  return std::numbers::ln2 / kappa_eff;
}

}  // namespace decaybound
