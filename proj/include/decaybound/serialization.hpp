/**
 * @file serialization.hpp
 * @brief JSON conversions for configuration and result types (nlohmann::json).
 */
#pragma once

#include <json.hpp>

#include <optional>
#include <string_view>
#include <string>

#include "decaybound/estimation.hpp"
#include "decaybound/functionals.hpp"
#include "decaybound/panel_did.hpp"
#include "decaybound/pde_lab.hpp"

namespace decaybound {

inline void to_json(nlohmann::json& j, const DgpConfig& c) {
  j = nlohmann::json{{"n_units", c.n_units},
                     {"first_year", c.first_year},
                     {"n_years", c.n_years},
                     {"treated_share", c.treated_share},
                     {"opening_years", c.opening_years},
                     {"baseline", c.baseline},
                     {"unit_effect_sd", c.unit_effect_sd},
                     {"year_effect_sd", c.year_effect_sd},
                     {"noise_sd", c.noise_sd},
                     {"anticipation", c.anticipation},
                     {"onset", c.onset},
                     {"peak", c.peak},
                     {"fade", c.fade},
                     {"kappa_dgp", c.kappa_dgp},
                     {"max_distance_km", c.max_distance_km},
                     {"normalize_distance", c.normalize_distance},
                     {"transit_share", c.transit_share},
                     {"roads_share", c.roads_share},
                     {"transit_interaction", c.transit_interaction},
                     {"roads_interaction", c.roads_interaction}};
}

/// Missing keys keep their defaults; unknown keys are rejected.
inline void from_json(const nlohmann::json& j, DgpConfig& c) {
  if (!j.is_object()) throw Error(ErrorCode::InvalidConfig, "DGP config must be a JSON object");
  nlohmann::json defaults = DgpConfig{};
  for (const auto& [key, value] : j.items())
    if (!defaults.contains(key)) throw Error(ErrorCode::InvalidConfig, "unknown DGP key '" + key + "'", {key});
  auto get = [&](const char* key, auto& field) {
    if (!j.contains(key)) return;
    try {
      j.at(key).get_to(field);
    } catch (const nlohmann::json::exception& e) {
      throw Error(ErrorCode::InvalidConfig, std::string("bad value for DGP key '") + key + "': " + e.what(), {key});
    }
  };
  get("n_units", c.n_units);
  get("first_year", c.first_year);
  get("n_years", c.n_years);
  get("treated_share", c.treated_share);
  get("opening_years", c.opening_years);
  get("baseline", c.baseline);
  get("unit_effect_sd", c.unit_effect_sd);
  get("year_effect_sd", c.year_effect_sd);
  get("noise_sd", c.noise_sd);
  get("anticipation", c.anticipation);
  get("onset", c.onset);
  get("peak", c.peak);
  get("fade", c.fade);
  get("kappa_dgp", c.kappa_dgp);
  get("max_distance_km", c.max_distance_km);
  get("normalize_distance", c.normalize_distance);
  get("transit_share", c.transit_share);
  get("roads_share", c.roads_share);
  get("transit_interaction", c.transit_interaction);
  get("roads_interaction", c.roads_interaction);
}

// ---------------------------------------------------------------------------
// Result types (write-only). Residual vectors are left out; the pipeline
// writes them to residuals.csv.

namespace detail {

inline nlohmann::json cov_json(const Eigen::Matrix2d& m) {
  return nlohmann::json::array({{m(0, 0), m(0, 1)}, {m(1, 0), m(1, 1)}});
}

template <typename T>
nlohmann::json optional_json(const std::optional<T>& v) {
  return v ? nlohmann::json(*v) : nlohmann::json(nullptr);
}

}  // namespace detail

inline void to_json(nlohmann::json& j, const DecayParams& p) {
  j = {{"model", std::string(to_string(p.kind))}, {"q", p.q}, {"rate", p.rate}};
}

inline void to_json(nlohmann::json& j, const HacConfig& h) {
  j = {{"cutoff_km", h.cutoff_km}, {"kernel", std::string(to_string(h.kernel))}};
}

inline void to_json(nlohmann::json& j, const FitResult& f) {
  j = {{"model", std::string(to_string(f.params.kind))},
       {"q", f.params.q},
       {"rate", f.params.rate},
       {"se_q", f.se[0]},
       {"se_rate", f.se[1]},
       {"cov", detail::cov_json(f.cov)},
       {"robust_se_q", f.robust_se[0]},
       {"robust_se_rate", f.robust_se[1]},
       {"se_type", f.hac ? "conley_hac" : "hc0"},
       {"r2", f.r2},
       {"rmse", f.rmse},
       {"ssr", f.ssr},
       {"loglik", f.loglik},
       {"aic", f.aic},
       {"bic", f.bic},
       {"n", f.n},
       {"converged", f.converged},
       {"iterations", f.iterations}};
}

inline void to_json(nlohmann::json& j, const LogOlsResult& r) {
  j = {{"intercept", r.intercept},   {"slope", r.slope},         {"kappa_eff", r.kappa_eff},
       {"robust_se", r.robust_se},   {"hac_se", r.hac_se},       {"robust_cov", detail::cov_json(r.robust_cov)},
       {"hac_cov", detail::cov_json(r.hac_cov)}, {"r2", r.r2}, {"n", r.n}};
}

inline void to_json(nlohmann::json& j, const ModelComparison& c) {
  j = nlohmann::json::object();
  j["best"] = std::string(to_string(c.best));
  auto& rows = j["rows"] = nlohmann::json::array();
  for (const auto& [k, f] : c.fits) {
    nlohmann::json r = f;
    r["delta_aic"] = c.delta_aic.at(k);
    r["best"] = k == c.best;
    r["in_tie_set"] = std::find(c.tie_set.begin(), c.tie_set.end(), k) != c.tie_set.end();
    rows.push_back(std::move(r));
  }
  auto& ties = j["tie_set"] = nlohmann::json::array();
  for (auto k : c.tie_set) ties.push_back(std::string(to_string(k)));
  auto& fails = j["failures"] = nlohmann::json::object();
  for (const auto& [k, msg] : c.failures) fails[std::string(to_string(k))] = msg;
}

inline void to_json(nlohmann::json& j, const BoundaryEstimate& b) {
  j = {{"d_star_km", b.d_star_km}, {"epsilon", b.epsilon}, {"ci_lo_km", b.ci_lo_km},
       {"ci_hi_km", b.ci_hi_km},   {"se_km", b.se_km}};
}

inline void to_json(nlohmann::json& j, const DiffusionSummary& d) {
  j = {{"nu_km2_per_year", d.nu},
       {"xi_star", d.xi_star},
       {"sensitivity_d_star_nu", d.sensitivity_d_nu},
       {"elasticity", d.elasticity},
       {"d_star_km", d.d_star_km},
       {"epsilon", d.epsilon}};
}

inline void to_json(nlohmann::json& j, const DiagnosticVerdict& v) {
  j = {{"kappa", v.kappa},
       {"se", v.se},
       {"r2", v.r2},
       {"z", v.z},
       {"d_star_km", detail::optional_json(v.d_star_km)},
       {"verdict", std::string(to_string(v.verdict))}};
}

inline void to_json(nlohmann::json& j, const StratifiedResult& s) {
  j = {{"rule", s.rule},
       {"high_label", s.high_label},
       {"low_label", s.low_label},
       {"ratio", detail::optional_json(s.ratio)}};
  auto& g = j["groups"] = nlohmann::json::object();
  for (const auto& [label, f] : s.group_fits) g[label] = f;
}

inline void to_json(nlohmann::json& j, const DidResult& r) {
  j = {{"beta", r.beta},           {"se", r.se},           {"n", r.n},
       {"r2_within", r.r2_within}, {"n_units", r.n_units}, {"n_treated_units", r.n_treated_units}};
}

inline void to_json(nlohmann::json& j, const EventStudyResult& e) {
  j = {{"reference_period", e.reference_period}, {"n", e.n}};
  auto& c = j["coefficients"] = nlohmann::json::array();
  for (const auto& [k, v] : e.coefficients) c.push_back({{"k", k}, {"beta", v.beta}, {"se", v.se}});
}

inline void to_json(nlohmann::json& j, const BandEffect& b) {
  j = {{"lo_km", b.band.lo_km}, {"hi_km", b.band.hi_km}};
  j["result"] = b.result ? nlohmann::json(*b.result) : nlohmann::json(nullptr);
  if (!b.error.empty()) j["error"] = b.error;
}

inline void to_json(nlohmann::json& j, const InteractionResult& r) {
  j = {{"beta_post", r.beta_post},
       {"beta_interaction", r.beta_interaction},
       {"se_post", r.se_post},
       {"se_interaction", r.se_interaction},
       {"n", r.n}};
}

inline void to_json(nlohmann::json& j, const KappaEffEstimate& k) {
  j = {{"kappa_eff", k.kappa_eff},   {"intercept", k.intercept},       {"r2", k.r2},
       {"n_points", k.n_points},     {"window_lo_km", k.window_lo_km}, {"window_hi_km", k.window_hi_km}};
}

inline void to_json(nlohmann::json& j, const LogLinearTrend& t) {
  j = {{"slope", t.slope}, {"intercept", t.intercept}, {"r2", t.r2}, {"n", t.n}};
}

}  // namespace decaybound
