/**
 * @file synthetic.hpp
 * @brief Generator for a synthetic cross-section of units around point sources.
 *
 * Sources are scattered in a lon/lat box; each unit is placed at a
 * log-uniform distance and uniform bearing from a randomly chosen source.
 * The outcome is drawn from the configured decay law evaluated at the
 * nearest-source distance, plus Gaussian noise.
 */
#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <numbers>
#include <random>
#include <string>
#include <vector>

#include "decaybound/decay_models.hpp"
#include "decaybound/error.hpp"
#include "decaybound/estimation.hpp"
#include "decaybound/geo.hpp"

namespace decaybound {

struct SyntheticUnitsConfig {
  std::size_t n_units = 5000;
  std::size_t n_sources = 60;
  DecayParams truth{DecayModelKind::LogLinear, 12.04, 0.16};
  double noise_sd = 2.0;
  double d_min_km = 0.5;
  double d_max_km = 500.0;
  double lat_min = 25.0, lat_max = 49.0;
  double lon_min = -124.0, lon_max = -67.0;
  std::string outcome = "ACCESS2";

  void validate() const {
    if (n_units < 3 || n_sources < 1) throw Error(ErrorCode::InvalidConfig, "need >= 3 units and >= 1 source");
    if (!(d_min_km > 0.0 && d_max_km > d_min_km))
      throw Error(ErrorCode::InvalidConfig, "need 0 < d_min_km < d_max_km");
    if (!(noise_sd >= 0.0)) throw Error(ErrorCode::InvalidConfig, "noise_sd must be >= 0");
    if (!(lat_min < lat_max && lon_min < lon_max)) throw Error(ErrorCode::InvalidConfig, "empty lat/lon box");
  }
};

struct SyntheticUnits {
  Sample sample;  // distance_km is the nearest-source distance
  SourceSet sources;
};

/// Point at great-circle distance d (km) and bearing θ (radians) from p.
inline GeoPoint destination_point(const GeoPoint& p, double d_km, double bearing) {
  const double phi1 = deg_to_rad(p.latitude);
  const double lam1 = deg_to_rad(p.longitude);
  const double delta = d_km / kEarthRadiusKm;
  const double sin_phi2 = std::sin(phi1) * std::cos(delta) + std::cos(phi1) * std::sin(delta) * std::cos(bearing);
  const double phi2 = std::asin(std::clamp(sin_phi2, -1.0, 1.0));
  const double lam2 = lam1 + std::atan2(std::sin(bearing) * std::sin(delta) * std::cos(phi1),
                                        std::cos(delta) - std::sin(phi1) * sin_phi2);
  constexpr double to_deg = 180.0 / std::numbers::pi;
  return make_geo_point(phi2 * to_deg, lam2 * to_deg);
}

inline SyntheticUnits generate_synthetic_units(const SyntheticUnitsConfig& cfg, std::uint64_t seed) {
  cfg.validate();
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> u01(0.0, 1.0);
  std::normal_distribution<double> std_normal(0.0, 1.0);

  std::vector<Source> srcs;
  srcs.reserve(cfg.n_sources);
  for (std::size_t s = 0; s < cfg.n_sources; ++s) {
    const double lat = cfg.lat_min + (cfg.lat_max - cfg.lat_min) * u01(rng);
    const double lon = cfg.lon_min + (cfg.lon_max - cfg.lon_min) * u01(rng);
    srcs.push_back({"s" + std::to_string(s), make_geo_point(lat, lon)});
  }
  SyntheticUnits out{{}, SourceSet(srcs)};
  const LatitudeIndex index(out.sources);

  const double log_lo = std::log(cfg.d_min_km);
  const double log_hi = std::log(cfg.d_max_km);
  std::uniform_int_distribution<std::size_t> pick(0, cfg.n_sources - 1);
  out.sample.rows.reserve(cfg.n_units);
  for (std::size_t i = 0; i < cfg.n_units; ++i) {
    const auto& anchor = srcs[pick(rng)];
    const double d = std::exp(log_lo + (log_hi - log_lo) * u01(rng));
    const double bearing = 2.0 * std::numbers::pi * u01(rng);

    Observation o;
    o.unit_id = "z" + std::to_string(10000 + i);
    o.location = destination_point(anchor.location, d, bearing);
    o.distance_km = index.nearest(o.location).distance_km;
    const double dm = uses_log_distance(cfg.truth.kind) ? std::max(o.distance_km, kDistanceFloorKm) : o.distance_km;
    o.outcome = predict(cfg.truth, dm) + cfg.noise_sd * std_normal(rng);

    // Demographic covariates, independent of the outcome.
    o.covariates["median_age"] = std::clamp(40.0 + 9.0 * std_normal(rng), 18.0, 80.0);
    o.covariates["pct_bachelors"] = std::clamp(25.0 + 10.0 * std_normal(rng), 0.0, 100.0);
    o.covariates["pct_female"] = std::clamp(50.5 + 2.5 * std_normal(rng), 30.0, 70.0);
    o.covariates["income"] = std::round(std::exp(std::log(62000.0) + 0.35 * std_normal(rng)));
    out.sample.rows.push_back(std::move(o));
  }
  return out;
}

}  // namespace decaybound
