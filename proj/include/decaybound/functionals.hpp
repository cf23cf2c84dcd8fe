/**
 * @file functionals.hpp
 * @brief Boundary functionals, diagnostics and heterogeneity analyses built on
 *        a fitted exponential decay.
 *
 * The implied diffusion coefficient uses ν = 1/(2κ²), which assumes a unit
 * time normalisation: ν carries km²/year only because one year is taken as
 * the reference horizon.
 */
#pragma once

#include <Eigen/Dense>

#include <cmath>
#include <functional>
#include <limits>
#include <future>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "decaybound/decay_models.hpp"
#include "decaybound/error.hpp"
#include "decaybound/estimation.hpp"
#include "decaybound/linear_model.hpp"

namespace decaybound {

inline constexpr double kZ95 = 1.96;

struct BoundaryEstimate {
  double d_star_km{};
  double epsilon{};
  double ci_lo_km{};
  double ci_hi_km{};
  double se_km{};
};

struct DiffusionSummary {
  double nu{};                // km²/year
  double xi_star{};           // km/√year
  double sensitivity_d_nu{};  // ∂d*/∂ν, km per (km²/year)
  double elasticity{};        // (ν/d*)·∂d*/∂ν
  double d_star_km{};
  double epsilon{};
};

/// d* ∝ ν^{1/2} under ν = 1/(2κ²), so the elasticity is a constant.
inline constexpr double kBoundaryElasticity = 0.5;

namespace detail {

inline void require_exponential(const FitResult& fit) {
  if (fit.params.kind != DecayModelKind::Exponential)
    throw Error(ErrorCode::InvalidArgument, "boundary functionals are defined for exponential fits only");
}

inline void require_positive_kappa(double kappa) {
  if (!(kappa > 0.0))
    throw Error(ErrorCode::BoundaryUndefined,
                "kappa = " + std::to_string(kappa) + " <= 0: no decay from the source, boundary undefined");
}

}  // namespace detail

/// d* = -ln(ε)/κ with a delta-method 95% interval.
inline BoundaryEstimate spatial_boundary(double kappa, double kappa_se, const ThresholdSpec& eps) {
  detail::require_positive_kappa(kappa);
  const double le = std::log(eps.epsilon());
  BoundaryEstimate b;
  b.epsilon = eps.epsilon();
  b.d_star_km = -le / kappa;
  b.se_km = delta_method_se(b.d_star_km, le / (kappa * kappa), kappa_se);
  b.ci_lo_km = b.d_star_km - kZ95 * b.se_km;
  b.ci_hi_km = b.d_star_km + kZ95 * b.se_km;
  return b;
}

inline BoundaryEstimate spatial_boundary(const FitResult& fit, const ThresholdSpec& eps = {}) {
  detail::require_exponential(fit);
  return spatial_boundary(fit.params.rate, fit.se[1], eps);
}

inline DiffusionSummary implied_diffusion(double kappa, const ThresholdSpec& eps = {}) {
  detail::require_positive_kappa(kappa);
  DiffusionSummary s;
  s.epsilon = eps.epsilon();
  s.nu = 1.0 / (2.0 * kappa * kappa);
  s.xi_star = 2.0 * std::sqrt(s.nu * std::log(1.0 / eps.epsilon()));
  s.d_star_km = -std::log(eps.epsilon()) / kappa;
  s.sensitivity_d_nu = s.d_star_km / (2.0 * s.nu);
  s.elasticity = kBoundaryElasticity;
  return s;
}

inline DiffusionSummary implied_diffusion(const FitResult& fit, const ThresholdSpec& eps = {}) {
  detail::require_exponential(fit);
  return implied_diffusion(fit.params.rate, eps);
}

/// Self-similar boundary d*(t) = ξ*·√t.
inline double boundary_evolution(const DiffusionSummary& ds, double t_years) {
  if (!(t_years > 0.0)) throw Error(ErrorCode::NonPositiveTime, "time must be > 0");
  return ds.xi_star * std::sqrt(t_years);
}

/// v(t) = ξ*/(2√t), the time derivative of boundary_evolution().
inline double boundary_velocity(const DiffusionSummary& ds, double t_years) {
  if (!(t_years > 0.0)) throw Error(ErrorCode::NonPositiveTime, "time must be > 0");
  return ds.xi_star / (2.0 * std::sqrt(t_years));
}

class ExposureSpec {
 public:
  explicit ExposureSpec(double horizon_years) : horizon_(horizon_years) {
    if (!(horizon_years > 0.0)) throw Error(ErrorCode::InvalidArgument, "exposure horizon must be > 0");
  }
  double horizon_years() const { return horizon_; }

 private:
  double horizon_;
};

/// Φ(d) = T·Q·exp(-κd): steady-state intensity held over the horizon.
inline double cumulative_exposure(const DecayParams& p, const ExposureSpec& spec, double d) {
  if (p.kind != DecayModelKind::Exponential)
    throw Error(ErrorCode::InvalidArgument, "cumulative exposure is defined for exponential decay");
  return spec.horizon_years() * predict(p, d);
}

inline double cumulative_exposure(const FitResult& fit, const ExposureSpec& spec, double d) {
  return cumulative_exposure(fit.params, spec, d);
}

// ---------------------------------------------------------------------------
// Sign-reversal diagnostic

enum class Verdict { Applies, WeakApplies, Marginal, Rejected };

constexpr std::string_view to_string(Verdict v) {
  switch (v) {
    case Verdict::Applies: return "Applies";
    case Verdict::WeakApplies: return "WeakApplies";
    case Verdict::Marginal: return "Marginal";
    case Verdict::Rejected: return "Rejected";
  }
  return "Unknown";
}

struct VerdictConfig {
  double z_critical = kZ95;
  double weak_r2 = 0.01;
  double domain_span_km = 4500.0;  // continental US width
  double epsilon = ThresholdSpec::kDefaultEpsilon;
};

struct DiagnosticVerdict {
  double kappa{};
  double se{};
  double r2{};
  double z{};
  std::optional<double> d_star_km;
  Verdict verdict{Verdict::Rejected};
};

/**
 * Rejected when κ ≤ 0 or |κ|/se < z; Marginal when significant but the
 * boundary lies outside the study domain; WeakApplies when r² is below the
 * weak-fit cut; Applies otherwise.
 */
inline DiagnosticVerdict sign_reversal_test(double kappa, double se, double r2, const VerdictConfig& cfg = {}) {
  DiagnosticVerdict v{kappa, se, r2, 0.0, std::nullopt, Verdict::Rejected};
  v.z = se > 0.0 ? std::abs(kappa) / se : (kappa != 0.0 ? std::numeric_limits<double>::infinity() : 0.0);
  if (kappa <= 0.0 || v.z < cfg.z_critical) return v;
  v.d_star_km = -std::log(cfg.epsilon) / kappa;
  if (*v.d_star_km > cfg.domain_span_km) {
    v.verdict = Verdict::Marginal;
  } else if (r2 < cfg.weak_r2) {
    v.verdict = Verdict::WeakApplies;
  } else {
    v.verdict = Verdict::Applies;
  }
  return v;
}

inline DiagnosticVerdict sign_reversal_test(const FitResult& fit, const VerdictConfig& cfg = {}) {
  detail::require_exponential(fit);
  return sign_reversal_test(fit.params.rate, fit.se[1], fit.r2, cfg);
}

// ---------------------------------------------------------------------------
// Heterogeneity

/// Splits units on one covariate: value >= high_min is "high", value < low_max is "low".
struct SplitRule {
  std::string name;
  std::string covariate;
  double high_min{};
  double low_max{};
  std::string high_label = "high";
  std::string low_label = "low";
};

inline SplitRule elderly_split() { return {"age", "median_age", 60.0, 40.0, "elderly", "young"}; }
inline SplitRule education_split() { return {"education", "pct_bachelors", 30.0, 20.0, "high_education", "low_education"}; }
inline SplitRule female_split() { return {"gender", "pct_female", 52.0, 48.0, "high_female", "low_female"}; }

inline std::optional<SplitRule> builtin_split(std::string_view name) {
  if (name == "age" || name == "elderly") return elderly_split();
  if (name == "education") return education_split();
  if (name == "gender" || name == "female") return female_split();
  return std::nullopt;
}

struct StratifyOptions {
  std::size_t min_stratum = 30;
  DecayModelKind kind = DecayModelKind::Exponential;
  FitOptions fit{};
};

struct StratifiedResult {
  std::string rule;
  std::map<std::string, FitResult> group_fits;
  std::string high_label;
  std::string low_label;
  /// κ_high/κ_low; empty when the two estimates differ in sign or κ_low = 0.
  std::optional<double> ratio;
};

inline StratifiedResult stratified_fit(const Sample& sample, const SplitRule& rule, const StratifyOptions& opt = {}) {
  if (!(rule.high_min >= rule.low_max))
    throw Error(ErrorCode::InvalidArgument, "split rule strata overlap");
  Sample high, low;
  for (const auto& r : sample.rows) {
    auto it = r.covariates.find(rule.covariate);
    if (it == r.covariates.end() || !std::isfinite(it->second)) continue;
    if (it->second >= rule.high_min) {
      high.rows.push_back(r);
    } else if (it->second < rule.low_max) {
      low.rows.push_back(r);
    }
  }
  for (const auto* s : {&high, &low}) {
    if (s->size() < opt.min_stratum)
      throw Error(ErrorCode::StratumTooSmall,
                  "stratum of rule '" + rule.name + "' has " + std::to_string(s->size()) + " units, need " +
                      std::to_string(opt.min_stratum));
  }

  auto fut_high = std::async(std::launch::async, [&] { return fit_nls(high, opt.kind, std::nullopt, opt.fit); });
  FitResult fit_low = fit_nls(low, opt.kind, std::nullopt, opt.fit);
  FitResult fit_high = fut_high.get();

  StratifiedResult out;
  out.rule = rule.name;
  out.high_label = rule.high_label;
  out.low_label = rule.low_label;
  const double kh = fit_high.params.rate;
  const double kl = fit_low.params.rate;
  if (kl != 0.0 && ((kh > 0.0 && kl > 0.0) || (kh < 0.0 && kl < 0.0))) out.ratio = kh / kl;
  out.group_fits.emplace(rule.high_label, std::move(fit_high));
  out.group_fits.emplace(rule.low_label, std::move(fit_low));
  return out;
}

// ---------------------------------------------------------------------------
// Decomposition of ln κ_eff into mobility and health components

struct KappaGroup {
  double kappa_eff{};
  std::map<std::string, double> covariates;
};

struct CovariateBlock {
  std::string name;
  std::vector<std::string> covariates;
};

/// Blocks enter the sequential decomposition in the listed order.
struct DecompositionSpec {
  std::vector<CovariateBlock> blocks{{"mobility", {"road_density", "transit"}}, {"health", {"poverty", "age_share"}}};
};

struct BlockShare {
  std::string block;
  double share{};
};

struct KappaDecomposition {
  double intercept{};
  /// Empty optional marks a covariate dropped as collinear with earlier columns.
  std::map<std::string, std::optional<double>> coefficients;
  std::vector<std::string> dropped;
  std::vector<BlockShare> block_shares;
  double residual_share{};
  double r2{};
  std::size_t n_groups{};
};

inline KappaDecomposition decompose_kappa(std::span<const KappaGroup> groups, const DecompositionSpec& spec = {}) {
  std::size_t n_cov = 0;
  for (const auto& b : spec.blocks) n_cov += b.covariates.size();
  if (groups.size() < n_cov + 2)
    throw Error(ErrorCode::InsufficientGroups,
                "need at least " + std::to_string(n_cov + 2) + " groups, got " + std::to_string(groups.size()));

  const auto n = static_cast<Eigen::Index>(groups.size());
  Eigen::VectorXd y(n);
  for (Eigen::Index i = 0; i < n; ++i) {
    const double k = groups[static_cast<std::size_t>(i)].kappa_eff;
    if (!(k > 0.0))
      throw Error(ErrorCode::NonPositiveKappa, "kappa_eff must be > 0 in every group (group " + std::to_string(i) + ")");
    y(i) = std::log(k);
  }

  // Greedy column selection in block order: a column whose residual after
  // projection on the kept columns is negligible is dropped.
  Eigen::MatrixXd kept = Eigen::MatrixXd::Ones(n, 1);
  std::vector<std::string> kept_names;
  std::vector<Eigen::Index> block_end;  // number of kept columns after each block
  KappaDecomposition out;
  out.n_groups = groups.size();
  for (const auto& block : spec.blocks) {
    for (const auto& name : block.covariates) {
      Eigen::VectorXd col(n);
      for (Eigen::Index i = 0; i < n; ++i) {
        const auto& cov = groups[static_cast<std::size_t>(i)].covariates;
        auto it = cov.find(name);
        if (it == cov.end())
          throw Error(ErrorCode::InvalidArgument, "group " + std::to_string(i) + " lacks covariate '" + name + "'", {name});
        col(i) = it->second;
      }
      const Eigen::VectorXd proj = kept * kept.colPivHouseholderQr().solve(col);
      const double resid = (col - proj).norm();
      if (resid <= 1e-10 * std::max(1.0, col.norm())) {
        out.dropped.push_back(name);
        out.coefficients[name] = std::nullopt;
        continue;
      }
      kept.conservativeResize(Eigen::NoChange, kept.cols() + 1);
      kept.col(kept.cols() - 1) = col;
      kept_names.push_back(name);
    }
    block_end.push_back(kept.cols());
  }

  const auto full = ols(kept, y);
  out.intercept = full.coef(0);
  for (std::size_t c = 0; c < kept_names.size(); ++c)
    out.coefficients[kept_names[c]] = full.coef(static_cast<Eigen::Index>(c + 1));
  out.r2 = full.r2;

  const double sst = full.sst;
  double prev_ssr = sst;
  for (std::size_t b = 0; b < spec.blocks.size(); ++b) {
    const double ssr = ols(kept.leftCols(block_end[b]), y).ssr;
    out.block_shares.push_back({spec.blocks[b].name, sst > 0.0 ? (prev_ssr - ssr) / sst : 0.0});
    prev_ssr = ssr;
  }
  out.residual_share = sst > 0.0 ? prev_ssr / sst : 0.0;
  return out;
}

}  // namespace decaybound
