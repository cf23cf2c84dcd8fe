/**
 * @file panel_did.hpp
 * @brief Difference-in-differences baseline: synthetic panels, two-way fixed
 *        effects, event studies, distance bands and interaction designs.
 *
 * All estimators require a balanced panel and cluster standard errors by
 * unit. Staggered-adoption bias of TWFE is not corrected.
 */
#pragma once

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <map>
#include <optional>
#include <random>
#include <span>
#include <string>
#include <unordered_map>
#include <vector>

#include "decaybound/error.hpp"
#include "decaybound/linear_model.hpp"

namespace decaybound {

struct PanelObservation {
  std::string unit_id;
  int year{};
  double outcome{};
  bool treated_post{};
  double distance_km{};
  std::map<std::string, bool> modifiers;
};

using Panel = std::vector<PanelObservation>;

struct DidResult {
  double beta{};
  double se{};
  std::size_t n{};
  double r2_within{};
  std::size_t n_units{};
  std::size_t n_treated_units{};
};

struct EventCoefficient {
  double beta{};
  double se{};
};

struct EventStudyResult {
  std::map<int, EventCoefficient> coefficients;  // includes the reference at (0, 0)
  int reference_period = -1;
  std::size_t n{};
};

// ---------------------------------------------------------------------------
// Synthetic data

/**
 * Data-generating process for the synthetic hospital-opening panel.
 *
 * Treated unit i opening in year Y has effect at event time k = year − Y
 *   path(k) · m(d_i) + post · (transit_interaction·high_transit_i + roads_interaction·good_roads_i)
 * with path(k ≤ −2) = 0, path(−1) = anticipation, path(0) = onset,
 * path(k ≥ 1) = peak · fade^(k−1), and m(d) = exp(−κ d) / E[exp(−κ D)] so the
 * path is the average effect over the treated distance distribution.
 */
struct DgpConfig {
  std::size_t n_units = 1000;
  int first_year = 2015;
  int n_years = 10;
  double treated_share = 0.05;
  std::vector<int> opening_years{2018, 2019};

  double baseline = 10.74;
  double unit_effect_sd = 3.0;
  double year_effect_sd = 0.5;
  double noise_sd = 0.8;

  double anticipation = 0.0;
  double onset = -2.87;
  double peak = -2.87;
  double fade = 1.0;

  double kappa_dgp = 0.0;           // per km
  double max_distance_km = 200.0;   // distances ~ U[0, max]
  bool normalize_distance = true;   // divide by E[exp(-κD)]

  double transit_share = 0.5;
  double roads_share = 0.5;
  double transit_interaction = 0.0;
  double roads_interaction = 0.0;

  void validate() const {
    if (n_units < 2 || n_years < 2) throw Error(ErrorCode::InvalidConfig, "need at least 2 units and 2 years");
    if (!(treated_share > 0.0 && treated_share < 1.0))
      throw Error(ErrorCode::InvalidConfig, "treated_share must lie in (0, 1)");
    if (opening_years.empty()) throw Error(ErrorCode::InvalidConfig, "no opening years given");
    for (int y : opening_years)
      if (y <= first_year || y >= first_year + n_years)
        throw Error(ErrorCode::InvalidConfig, "opening year " + std::to_string(y) + " outside the interior of the panel");
    if (unit_effect_sd < 0 || year_effect_sd < 0 || noise_sd < 0)
      throw Error(ErrorCode::InvalidConfig, "standard deviations must be >= 0");
    if (!(max_distance_km > 0.0) || kappa_dgp < 0.0)
      throw Error(ErrorCode::InvalidConfig, "need max_distance_km > 0 and kappa_dgp >= 0");
    for (double s : {transit_share, roads_share})
      if (s < 0.0 || s > 1.0) throw Error(ErrorCode::InvalidConfig, "modifier shares must lie in [0, 1]");
  }

  double path(int k) const {
    if (k <= -2) return 0.0;
    if (k == -1) return anticipation;
    if (k == 0) return onset;
    return peak * std::pow(fade, k - 1);
  }

  /// E[exp(-κD)] for D ~ U[0, max_distance_km].
  double distance_normalizer() const {
    if (!normalize_distance || kappa_dgp == 0.0) return 1.0;
    const double a = kappa_dgp * max_distance_km;
    return (1.0 - std::exp(-a)) / a;
  }
};

struct SyntheticPanel {
  Panel observations;
  DgpConfig config;
  std::uint64_t seed{};
  std::map<std::string, int> opening_year;  // treated units only
};

inline SyntheticPanel generate_synthetic_panel(const DgpConfig& cfg, std::uint64_t seed) {
  cfg.validate();
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> normal(0.0, 1.0);
  std::uniform_real_distribution<double> unif(0.0, 1.0);

  const std::size_t n = cfg.n_units;
  const auto n_treated = std::max<std::size_t>(
      1, std::min(n - 1, static_cast<std::size_t>(std::llround(cfg.treated_share * static_cast<double>(n)))));

  std::vector<double> unit_fe(n), distance(n);
  std::vector<bool> transit(n), roads(n);
  for (std::size_t i = 0; i < n; ++i) {
    unit_fe[i] = cfg.unit_effect_sd * normal(rng);
    distance[i] = cfg.max_distance_km * unif(rng);
    transit[i] = unif(rng) < cfg.transit_share;
    roads[i] = unif(rng) < cfg.roads_share;
  }
  std::vector<double> year_fe(static_cast<std::size_t>(cfg.n_years));
  for (auto& y : year_fe) y = cfg.year_effect_sd * normal(rng);

  std::vector<std::size_t> order(n);
  for (std::size_t i = 0; i < n; ++i) order[i] = i;
  std::shuffle(order.begin(), order.end(), rng);
  std::vector<std::optional<int>> opening(n);
  for (std::size_t k = 0; k < n_treated; ++k)
    opening[order[k]] = cfg.opening_years[k % cfg.opening_years.size()];

  const double norm = cfg.distance_normalizer();
  const int width = static_cast<int>(std::to_string(n - 1).size());

  SyntheticPanel out;
  out.config = cfg;
  out.seed = seed;
  out.observations.reserve(n * static_cast<std::size_t>(cfg.n_years));
  for (std::size_t i = 0; i < n; ++i) {
    std::string id = std::to_string(i);
    id = "U" + std::string(static_cast<std::size_t>(width) - id.size(), '0') + id;
    if (opening[i]) out.opening_year[id] = *opening[i];
    const double m = std::exp(-cfg.kappa_dgp * distance[i]) / norm;
    for (int t = 0; t < cfg.n_years; ++t) {
      const int year = cfg.first_year + t;
      PanelObservation o;
      o.unit_id = id;
      o.year = year;
      o.distance_km = distance[i];
      o.modifiers = {{"high_transit", transit[i]}, {"good_roads", roads[i]}};
      double effect = 0.0;
      if (opening[i]) {
        const int k = year - *opening[i];
        o.treated_post = k >= 0;
        effect = cfg.path(k) * m;
        if (o.treated_post)
          effect += cfg.transit_interaction * (transit[i] ? 1.0 : 0.0) + cfg.roads_interaction * (roads[i] ? 1.0 : 0.0);
      }
      o.outcome = cfg.baseline + unit_fe[i] + year_fe[static_cast<std::size_t>(t)] + effect +
                  cfg.noise_sd * normal(rng);
      out.observations.push_back(std::move(o));
    }
  }
  return out;
}

// ---------------------------------------------------------------------------
// Estimation machinery

namespace detail {

/// Dense (unit, year) indexing of a balanced panel.
struct PanelLayout {
  std::vector<std::string> units;
  std::vector<int> years;
  std::vector<std::size_t> unit_of;  // per observation
  std::vector<std::size_t> year_of;

  std::size_t n_units() const { return units.size(); }
  std::size_t n_years() const { return years.size(); }
};

inline PanelLayout layout_of(std::span<const PanelObservation> panel) {
  if (panel.empty()) throw Error(ErrorCode::UnbalancedPanel, "panel is empty");
  PanelLayout l;
  std::unordered_map<std::string, std::size_t> unit_idx;
  std::map<int, std::size_t> year_idx;
  for (const auto& o : panel) {
    if (unit_idx.emplace(o.unit_id, l.units.size()).second) l.units.push_back(o.unit_id);
    year_idx.emplace(o.year, 0);
  }
  for (auto& [y, k] : year_idx) {
    k = l.years.size();
    l.years.push_back(y);
  }
  std::vector<char> seen(l.units.size() * l.years.size(), 0);
  l.unit_of.reserve(panel.size());
  l.year_of.reserve(panel.size());
  for (const auto& o : panel) {
    const auto u = unit_idx.at(o.unit_id);
    const auto t = year_idx.at(o.year);
    auto& cell = seen[u * l.years.size() + t];
    if (cell)
      throw Error(ErrorCode::UnbalancedPanel,
                  "duplicate observation for unit '" + o.unit_id + "' year " + std::to_string(o.year));
    cell = 1;
    l.unit_of.push_back(u);
    l.year_of.push_back(t);
  }
  if (panel.size() != l.units.size() * l.years.size())
    throw Error(ErrorCode::UnbalancedPanel, "panel is not balanced: " + std::to_string(panel.size()) +
                                                " observations for " + std::to_string(l.units.size()) + " units x " +
                                                std::to_string(l.years.size()) + " years");
  return l;
}

/// v_it − v̄_i − v̄_t + v̄ (exact two-way absorption for balanced panels).
inline Eigen::VectorXd two_way_demean(const PanelLayout& l, const Eigen::VectorXd& v) {
  std::vector<double> um(l.n_units(), 0.0), ym(l.n_years(), 0.0);
  double grand = 0.0;
  for (Eigen::Index i = 0; i < v.size(); ++i) {
    const auto k = static_cast<std::size_t>(i);
    um[l.unit_of[k]] += v(i);
    ym[l.year_of[k]] += v(i);
    grand += v(i);
  }
  for (auto& x : um) x /= static_cast<double>(l.n_years());
  for (auto& x : ym) x /= static_cast<double>(l.n_units());
  grand /= static_cast<double>(v.size());
  Eigen::VectorXd out(v.size());
  for (Eigen::Index i = 0; i < v.size(); ++i) {
    const auto k = static_cast<std::size_t>(i);
    out(i) = v(i) - um[l.unit_of[k]] - ym[l.year_of[k]] + grand;
  }
  return out;
}

struct TwfeFit {
  Eigen::VectorXd coef;
  Eigen::MatrixXd cov;
  double r2_within{};
};

/// Within-transformed OLS with unit-clustered covariance.
inline TwfeFit twfe_regression(const PanelLayout& l, const Eigen::VectorXd& y, const Eigen::MatrixXd& x) {
  const Eigen::VectorXd yd = two_way_demean(l, y);
  Eigen::MatrixXd xd(x.rows(), x.cols());
  for (Eigen::Index c = 0; c < x.cols(); ++c) {
    xd.col(c) = two_way_demean(l, x.col(c));
    if (xd.col(c).squaredNorm() <= 1e-12 * std::max(1.0, x.col(c).squaredNorm()))
      throw Error(ErrorCode::NoVariationInTreatment,
                  "regressor " + std::to_string(c) + " is absorbed by the fixed effects");
  }
  const auto o = ols(xd, yd);
  TwfeFit f;
  f.coef = o.coef;
  f.cov = cluster_covariance(xd, o.residuals, o.xtx_inv, l.unit_of, l.n_units());
  const double tss = yd.squaredNorm();
  f.r2_within = tss > 0.0 ? 1.0 - o.ssr / tss : 1.0;
  return f;
}

inline Eigen::VectorXd outcomes(std::span<const PanelObservation> panel) {
  Eigen::VectorXd y(static_cast<Eigen::Index>(panel.size()));
  for (std::size_t i = 0; i < panel.size(); ++i) y(static_cast<Eigen::Index>(i)) = panel[i].outcome;
  return y;
}

/// First treated year per unit; empty for never-treated units.
inline std::vector<std::optional<int>> treatment_onset(const PanelLayout& l, std::span<const PanelObservation> panel) {
  std::vector<std::optional<int>> onset(l.n_units());
  for (std::size_t i = 0; i < panel.size(); ++i) {
    if (!panel[i].treated_post) continue;
    auto& o = onset[l.unit_of[i]];
    if (!o || panel[i].year < *o) o = panel[i].year;
  }
  return onset;
}

inline void require_treatment_variation(const PanelLayout& l, std::span<const PanelObservation> panel) {
  const auto onset = treatment_onset(l, panel);
  const auto treated = static_cast<std::size_t>(std::count_if(onset.begin(), onset.end(), [](auto& o) { return o.has_value(); }));
  if (treated == 0) throw Error(ErrorCode::NoVariationInTreatment, "no treated observations");
  if (treated == l.n_units()) throw Error(ErrorCode::NoVariationInTreatment, "no never-treated control units");
}

}  // namespace detail

inline DidResult fit_twfe(std::span<const PanelObservation> panel) {
  const auto l = detail::layout_of(panel);
  detail::require_treatment_variation(l, panel);
  Eigen::MatrixXd x(static_cast<Eigen::Index>(panel.size()), 1);
  for (std::size_t i = 0; i < panel.size(); ++i) x(static_cast<Eigen::Index>(i), 0) = panel[i].treated_post ? 1.0 : 0.0;
  const auto f = detail::twfe_regression(l, detail::outcomes(panel), x);
  const auto onset = detail::treatment_onset(l, panel);

  DidResult r;
  r.beta = f.coef(0);
  r.se = std::sqrt(std::max(0.0, f.cov(0, 0)));
  r.n = panel.size();
  r.r2_within = f.r2_within;
  r.n_units = l.n_units();
  r.n_treated_units = static_cast<std::size_t>(std::count_if(onset.begin(), onset.end(), [](auto& o) { return o.has_value(); }));
  return r;
}

struct EventWindow {
  int min_k = -4;
  int max_k = 6;
  int reference = -1;
};

/**
 * Event-time dummies for k in [min_k, max_k] with the reference omitted;
 * event times beyond the window are binned into the endpoint dummies.
 * Event times with no treated observations are left out of the result.
 */
inline EventStudyResult event_study(std::span<const PanelObservation> panel, const EventWindow& window = {}) {
  if (!(window.min_k < window.reference && window.reference < window.max_k))
    throw Error(ErrorCode::InsufficientPrePeriods, "window must contain pre-periods before the reference period");
  const auto l = detail::layout_of(panel);
  detail::require_treatment_variation(l, panel);
  const auto onset = detail::treatment_onset(l, panel);

  std::vector<std::optional<int>> event_time(panel.size());
  bool any_reference = false;
  std::map<int, std::size_t> count;
  for (std::size_t i = 0; i < panel.size(); ++i) {
    const auto& on = onset[l.unit_of[i]];
    if (!on) continue;
    const int k = std::clamp(panel[i].year - *on, window.min_k, window.max_k);
    event_time[i] = k;
    if (k == window.reference) any_reference = true;
    ++count[k];
  }
  if (!any_reference)
    throw Error(ErrorCode::InsufficientPrePeriods, "no treated unit is observed in the reference period");

  std::vector<int> ks;
  for (const auto& [k, c] : count)
    if (k != window.reference && c > 0) ks.push_back(k);

  const auto n = static_cast<Eigen::Index>(panel.size());
  Eigen::MatrixXd x = Eigen::MatrixXd::Zero(n, static_cast<Eigen::Index>(ks.size()));
  for (std::size_t i = 0; i < panel.size(); ++i) {
    if (!event_time[i] || *event_time[i] == window.reference) continue;
    const auto pos = std::lower_bound(ks.begin(), ks.end(), *event_time[i]) - ks.begin();
    x(static_cast<Eigen::Index>(i), pos) = 1.0;
  }
  const auto f = detail::twfe_regression(l, detail::outcomes(panel), x);

  EventStudyResult r;
  r.reference_period = window.reference;
  r.n = panel.size();
  r.coefficients[window.reference] = {0.0, 0.0};
  for (std::size_t c = 0; c < ks.size(); ++c) {
    const auto cc = static_cast<Eigen::Index>(c);
    r.coefficients[ks[c]] = {f.coef(cc), std::sqrt(std::max(0.0, f.cov(cc, cc)))};
  }
  return r;
}

struct DistanceBand {
  double lo_km{};
  double hi_km{};
};

struct BandEffect {
  DistanceBand band;
  std::optional<DidResult> result;
  std::string error;  // set when result is empty
};

/// TWFE on treated units with lo <= distance < hi plus every never-treated unit.
inline std::vector<BandEffect> distance_band_effects(std::span<const PanelObservation> panel,
                                                     std::span<const DistanceBand> bands) {
  for (std::size_t b = 0; b < bands.size(); ++b) {
    if (!(bands[b].lo_km < bands[b].hi_km)) throw Error(ErrorCode::InvalidArgument, "band with lo >= hi");
    if (b > 0 && bands[b].lo_km < bands[b - 1].hi_km)
      throw Error(ErrorCode::InvalidArgument, "bands must be disjoint and ordered");
  }
  const auto l = detail::layout_of(panel);
  const auto onset = detail::treatment_onset(l, panel);

  std::vector<BandEffect> out;
  for (const auto& band : bands) {
    Panel sub;
    bool has_treated = false;
    for (std::size_t i = 0; i < panel.size(); ++i) {
      const auto u = l.unit_of[i];
      if (onset[u]) {
        if (panel[i].distance_km < band.lo_km || panel[i].distance_km >= band.hi_km) continue;
        has_treated = true;
      }
      sub.push_back(panel[i]);
    }
    BandEffect be{band, std::nullopt, {}};
    if (!has_treated) {
      be.error = std::string(to_string(ErrorCode::EmptyBand)) + ": no treated units in band";
    } else {
      try {
        be.result = fit_twfe(sub);
      } catch (const Error& e) {
        be.error = e.what();
      }
    }
    out.push_back(std::move(be));
  }
  return out;
}

struct InteractionResult {
  double beta_post{};
  double beta_interaction{};
  double se_post{};
  double se_interaction{};
  std::size_t n{};
};

/// TWFE with treated_post and treated_post × modifier.
inline InteractionResult interaction_did(std::span<const PanelObservation> panel, const std::string& modifier) {
  const auto l = detail::layout_of(panel);
  detail::require_treatment_variation(l, panel);
  const auto n = static_cast<Eigen::Index>(panel.size());
  Eigen::MatrixXd x(n, 2);
  bool seen_on = false, seen_off = false;
  for (std::size_t i = 0; i < panel.size(); ++i) {
    auto it = panel[i].modifiers.find(modifier);
    if (it == panel[i].modifiers.end())
      throw Error(ErrorCode::ModifierMissing, "unit '" + panel[i].unit_id + "' lacks modifier '" + modifier + "'",
                  {panel[i].unit_id});
    const double post = panel[i].treated_post ? 1.0 : 0.0;
    x(static_cast<Eigen::Index>(i), 0) = post;
    x(static_cast<Eigen::Index>(i), 1) = post * (it->second ? 1.0 : 0.0);
    if (panel[i].treated_post) (it->second ? seen_on : seen_off) = true;
  }
  if (!(seen_on && seen_off))
    throw Error(ErrorCode::NoModifierVariation, "modifier '" + modifier + "' is constant among treated observations");
  const auto f = detail::twfe_regression(l, detail::outcomes(panel), x);
  return {f.coef(0), f.coef(1), std::sqrt(std::max(0.0, f.cov(0, 0))), std::sqrt(std::max(0.0, f.cov(1, 1))),
          panel.size()};
}

}  // namespace decaybound
