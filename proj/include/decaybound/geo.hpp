/**
 * @file geo.hpp
 * @brief Spherical great-circle distances and nearest-source assignment.
 *
 * All distances are in kilometres on a sphere of radius 6371 km.
 */
#pragma once

#include <algorithm>
#include <cmath>
#include <numbers>
#include <span>
#include <string>
#include <unordered_set>
#include <utility>
#include <vector>

#include "decaybound/error.hpp"

namespace decaybound {

inline constexpr double kEarthRadiusKm = 6371.0;

/// WGS-84 latitude/longitude in degrees. Use make_geo_point() to validate.
struct GeoPoint {
  double latitude{};
  double longitude{};

  friend bool operator==(const GeoPoint&, const GeoPoint&) = default;
};

/// Wraps a longitude into [-180, 180).
inline double normalize_longitude(double lon_deg) {
  double x = std::fmod(lon_deg + 180.0, 360.0);
  if (x < 0.0) x += 360.0;
  return x - 180.0;
}

/// Validates latitude and normalizes longitude. Throws DomainError on bad input.
inline GeoPoint make_geo_point(double lat_deg, double lon_deg) {
  if (!std::isfinite(lat_deg) || !std::isfinite(lon_deg))
    throw Error(ErrorCode::DomainError, "non-finite coordinate");
  if (lat_deg < -90.0 || lat_deg > 90.0)
    throw Error(ErrorCode::DomainError, "latitude out of [-90, 90]: " + std::to_string(lat_deg));
  return GeoPoint{lat_deg, normalize_longitude(lon_deg)};
}

inline constexpr double deg_to_rad(double deg) { return deg * std::numbers::pi / 180.0; }

/// Great-circle distance by the haversine formula. Symmetric in its arguments.
inline double haversine_distance(const GeoPoint& a, const GeoPoint& b) {
  const double phi1 = deg_to_rad(a.latitude);
  const double phi2 = deg_to_rad(b.latitude);
  const double sdphi = std::sin((phi2 - phi1) / 2.0);
  const double sdlam = std::sin(deg_to_rad(b.longitude - a.longitude) / 2.0);
  // sdphi^2 and sdlam^2 are even in the argument, and the cosine product
  // commutes, so swapping a and b gives the same bits.
  double h = sdphi * sdphi + std::cos(phi1) * std::cos(phi2) * sdlam * sdlam;
  h = std::clamp(h, 0.0, 1.0);
  return 2.0 * kEarthRadiusKm * std::asin(std::sqrt(h));
}

struct Source {
  std::string id;
  GeoPoint location;
};

/// Non-empty collection of uniquely identified treatment sources.
class SourceSet {
 public:
  SourceSet() = default;

  explicit SourceSet(std::vector<Source> sources) : sources_(std::move(sources)) {
    std::unordered_set<std::string> seen;
    for (const auto& s : sources_) {
      if (!seen.insert(s.id).second)
        throw Error(ErrorCode::DuplicateSourceId, "duplicate source id '" + s.id + "'", {s.id});
    }
  }

  std::span<const Source> sources() const { return sources_; }
  std::size_t size() const { return sources_.size(); }
  bool empty() const { return sources_.empty(); }

 private:
  std::vector<Source> sources_;
};

struct NearestSource {
  std::string source_id;
  double distance_km{};
};

struct UnitLocation {
  std::string unit_id;
  GeoPoint location;
};

struct DistanceRecord {
  std::string unit_id;
  double distance_km{};
  std::string nearest_source_id;

  friend bool operator==(const DistanceRecord&, const DistanceRecord&) = default;
};

namespace detail {

// Strictly better under (distance, id) ordering.
inline bool better_candidate(double d, const std::string& id, double best_d, const std::string* best_id) {
  if (best_id == nullptr) return true;
  if (d < best_d) return true;
  return d == best_d && id < *best_id;
}

}  // namespace detail

/// Exhaustive nearest source. Ties go to the lexicographically smallest id.
inline NearestSource nearest_source(const GeoPoint& unit, const SourceSet& sources) {
  if (sources.empty()) throw Error(ErrorCode::EmptySourceSet, "no sources to search");
  const std::string* best_id = nullptr;
  double best_d = 0.0;
  for (const auto& s : sources.sources()) {
    const double d = haversine_distance(unit, s.location);
    if (detail::better_candidate(d, s.id, best_d, best_id)) {
      best_d = d;
      best_id = &s.id;
    }
  }
  return {*best_id, best_d};
}

/**
 * Latitude-sorted index over a SourceSet.
 *
 * A great-circle distance is never shorter than R·|Δφ|, so the search walks
 * outward from the query latitude and stops once that bound exceeds the best
 * distance found. Candidates are scored with the same haversine call and
 * tie-break as nearest_source(), so results are identical to brute force.
 */
class LatitudeIndex {
 public:
  explicit LatitudeIndex(const SourceSet& sources) : sources_(&sources) {
    if (sources.empty()) throw Error(ErrorCode::EmptySourceSet, "no sources to index");
    order_.resize(sources.size());
    for (std::size_t i = 0; i < order_.size(); ++i) order_[i] = i;
    auto src = sources.sources();
    std::sort(order_.begin(), order_.end(), [&](std::size_t a, std::size_t b) {
      return src[a].location.latitude < src[b].location.latitude;
    });
    lat_rad_.reserve(order_.size());
    for (auto i : order_) lat_rad_.push_back(deg_to_rad(src[i].location.latitude));
  }

  NearestSource nearest(const GeoPoint& unit) const {
    auto src = sources_->sources();
    const double phi = deg_to_rad(unit.latitude);
    const auto start = static_cast<std::ptrdiff_t>(
        std::lower_bound(lat_rad_.begin(), lat_rad_.end(), phi) - lat_rad_.begin());
    const auto n = static_cast<std::ptrdiff_t>(lat_rad_.size());

    const std::string* best_id = nullptr;
    double best_d = 0.0;
    auto bound_exceeds_best = [&](std::ptrdiff_t k) {
      if (best_id == nullptr) return false;
      const double lb = kEarthRadiusKm * std::abs(lat_rad_[static_cast<std::size_t>(k)] - phi);
      return lb > best_d * (1.0 + 1e-12) + 1e-9;
    };
    auto visit = [&](std::ptrdiff_t k) {
      const auto& s = src[order_[static_cast<std::size_t>(k)]];
      const double d = haversine_distance(unit, s.location);
      if (detail::better_candidate(d, s.id, best_d, best_id)) {
        best_d = d;
        best_id = &s.id;
      }
    };

    std::ptrdiff_t up = start;
    std::ptrdiff_t down = start - 1;
    bool up_open = up < n;
    bool down_open = down >= 0;
    while (up_open || down_open) {
      if (up_open) {
        if (bound_exceeds_best(up)) {
          up_open = false;
        } else {
          visit(up);
          up_open = ++up < n;
        }
      }
      if (down_open) {
        if (bound_exceeds_best(down)) {
          down_open = false;
        } else {
          visit(down);
          down_open = --down >= 0;
        }
      }
    }
    return {*best_id, best_d};
  }

 private:
  const SourceSet* sources_;
  std::vector<std::size_t> order_;
  std::vector<double> lat_rad_;
};

enum class DistanceMethod { Indexed, BruteForce };

/// One record per unit, in input order.
inline std::vector<DistanceRecord> build_distance_table(std::span<const UnitLocation> units,
                                                        const SourceSet& sources,
                                                        DistanceMethod method = DistanceMethod::Indexed) {
  std::unordered_set<std::string> seen;
  for (const auto& u : units) {
    if (!seen.insert(u.unit_id).second)
      throw Error(ErrorCode::DuplicateUnitId, "duplicate unit id '" + u.unit_id + "'", {u.unit_id});
  }
  if (sources.empty()) throw Error(ErrorCode::EmptySourceSet, "no sources to search");

  std::vector<DistanceRecord> out;
  out.reserve(units.size());
  if (method == DistanceMethod::BruteForce) {
    for (const auto& u : units) {
      auto ns = nearest_source(u.location, sources);
      out.push_back({u.unit_id, ns.distance_km, std::move(ns.source_id)});
    }
    return out;
  }
  const LatitudeIndex index(sources);
  for (const auto& u : units) {
    auto ns = index.nearest(u.location);
    out.push_back({u.unit_id, ns.distance_km, std::move(ns.source_id)});
  }
  return out;
}

/**
 * Calls fn(i, j, distance_km) once for every unordered pair i < j whose
 * great-circle distance is at most cutoff_km. Pairs are visited in a fixed
 * order determined only by the input.
 */
template <typename Fn>
void for_each_pair_within(std::span<const GeoPoint> points, double cutoff_km, Fn&& fn) {
  const std::size_t n = points.size();
  std::vector<std::size_t> order(n);
  for (std::size_t i = 0; i < n; ++i) order[i] = i;
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
    return points[a].latitude < points[b].latitude;
  });
  const double max_dphi = cutoff_km / kEarthRadiusKm * (1.0 + 1e-12) + 1e-15;
  for (std::size_t a = 0; a < n; ++a) {
    const std::size_t i = order[a];
    const double phi_i = deg_to_rad(points[i].latitude);
    for (std::size_t b = a + 1; b < n; ++b) {
      const std::size_t j = order[b];
      if (deg_to_rad(points[j].latitude) - phi_i > max_dphi) break;
      const double d = haversine_distance(points[i], points[j]);
      if (d <= cutoff_km) fn(std::min(i, j), std::max(i, j), d);
    }
  }
}

}  // namespace decaybound
