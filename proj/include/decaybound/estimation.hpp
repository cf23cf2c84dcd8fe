/**
 * @file estimation.hpp
 * @brief Decay-model fitting, Conley spatial HAC inference and model selection.
 */
#pragma once

#include <Eigen/Dense>

#include <algorithm>
#include <array>
#include <cmath>
#include <limits>
#include <map>
#include <numbers>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "decaybound/decay_models.hpp"
#include "decaybound/error.hpp"
#include "decaybound/geo.hpp"
#include "decaybound/linear_model.hpp"

namespace decaybound {

struct Observation {
  std::string unit_id;
  double distance_km{};
  double outcome{};
  GeoPoint location;
  std::map<std::string, double> covariates;
};

struct Sample {
  std::vector<Observation> rows;

  std::size_t size() const { return rows.size(); }
  bool empty() const { return rows.empty(); }
};

enum class HacKernel { Bartlett, Uniform };

struct HacConfig {
  double cutoff_km = 50.0;
  HacKernel kernel = HacKernel::Bartlett;
};

constexpr std::string_view to_string(HacKernel k) { return k == HacKernel::Bartlett ? "Bartlett" : "Uniform"; }

struct HacResult {
  std::array<double, 2> se{};
  Eigen::Matrix2d cov = Eigen::Matrix2d::Zero();
  /// Self-pairs only (HC0), reported alongside for comparison.
  std::array<double, 2> robust_se{};
  Eigen::Matrix2d robust_cov = Eigen::Matrix2d::Zero();
};

struct FitResult {
  DecayParams params;
  std::array<double, 2> se{};  // HAC when locations were used, otherwise HC0
  Eigen::Matrix2d cov = Eigen::Matrix2d::Zero();
  std::array<double, 2> robust_se{};
  double r2{};
  double rmse{};
  double ssr{};
  double loglik{};
  double aic{};
  double bic{};
  std::size_t n{};
  std::vector<double> residuals;
  bool converged{};
  int iterations{};
  bool hac{};  // true when se/cov are spatial HAC
};

/// Free parameters counted in AIC/BIC: two mean parameters plus σ².
inline constexpr int kInformationParams = 3;

struct InformationCriteria {
  double aic{};
  double bic{};
};

inline InformationCriteria information_criteria(double loglik, double n) {
  const double k = kInformationParams;
  return {-2.0 * loglik + 2.0 * k, -2.0 * loglik + k * std::log(n)};
}

inline InformationCriteria information_criteria(const FitResult& fit) {
  return information_criteria(fit.loglik, static_cast<double>(fit.n));
}

/// Gaussian log-likelihood with the variance concentrated out (σ̂² = SSR/n).
inline double concentrated_loglik(double ssr, std::size_t n) {
  const double nn = static_cast<double>(n);
  const double s2 = ssr / nn;
  if (s2 <= 0.0) return std::numeric_limits<double>::infinity();
  return -0.5 * nn * (std::log(2.0 * std::numbers::pi * s2) + 1.0);
}

/// Standard error of g(θ̂) from the standard error of θ̂.
inline double delta_method_se(double /*g_value*/, double g_prime, double param_se) {
  if (param_se < 0.0) throw Error(ErrorCode::InvalidArgument, "standard error must be >= 0");
  return std::abs(g_prime) * param_se;
}

struct LmOptions {
  int max_iterations = 200;
  double ssr_rel_tol = 1e-10;
  double gradient_tol = 1e-8;
};

struct FitOptions {
  /// Spatial HAC configuration; std::nullopt falls back to HC0 standard errors.
  std::optional<HacConfig> hac = HacConfig{};
  LmOptions lm{};
  /// Start values tried in addition to the data-driven initialisation.
  std::vector<double> multi_start_rates{1e-4, 1e-3, 1e-2, 1e-1};
};

namespace detail {

inline double model_distance(DecayModelKind kind, double d) {
  return uses_log_distance(kind) ? std::max(d, kDistanceFloorKm) : d;
}

inline void validate_sample(const Sample& sample) {
  if (sample.size() < 3)
    throw Error(ErrorCode::TooFewObservations,
                "need at least 3 observations for a two-parameter fit, got " + std::to_string(sample.size()));
  for (const auto& r : sample.rows) {
    if (!(std::isfinite(r.distance_km) && r.distance_km >= 0.0))
      throw Error(ErrorCode::DomainError, "distance must be finite and >= 0 for unit '" + r.unit_id + "'");
    if (!std::isfinite(r.outcome))
      throw Error(ErrorCode::DomainError, "outcome must be finite for unit '" + r.unit_id + "'");
  }
}

struct Design {
  std::vector<double> d;
  std::vector<double> y;
};

inline Design make_design(const Sample& sample, DecayModelKind kind) {
  Design out;
  out.d.reserve(sample.size());
  out.y.reserve(sample.size());
  for (const auto& r : sample.rows) {
    out.d.push_back(model_distance(kind, r.distance_km));
    out.y.push_back(r.outcome);
  }
  return out;
}

inline double ssr_at(const DecayParams& p, const Design& x) {
  double s = 0.0;
  for (std::size_t i = 0; i < x.d.size(); ++i) {
    const double r = x.y[i] - predict(p, x.d[i]);
    s += r * r;
  }
  return s;
}

struct LmOutcome {
  DecayParams params;
  double ssr{};
  bool converged{};
  int iterations{};
  std::vector<double> ssr_trace;  // initial SSR, then every accepted step
};

/// Levenberg-Marquardt with Marquardt diagonal scaling on a two-parameter model.
inline LmOutcome levenberg_marquardt(DecayParams p, const Design& x, const LmOptions& opt) {
  const std::size_t n = x.d.size();
  double ssr = ssr_at(p, x);
  if (!std::isfinite(ssr)) return {p, ssr, false, 0, {}};
  double lambda = 1e-3;
  LmOutcome out{p, ssr, false, 0, {ssr}};

  for (int it = 1; it <= opt.max_iterations; ++it) {
    out.iterations = it;
    Eigen::Matrix2d a = Eigen::Matrix2d::Zero();
    Eigen::Vector2d g = Eigen::Vector2d::Zero();
    for (std::size_t i = 0; i < n; ++i) {
      const auto j = jacobian(p, x.d[i]);
      const double r = x.y[i] - predict(p, x.d[i]);
      a(0, 0) += j[0] * j[0];
      a(0, 1) += j[0] * j[1];
      a(1, 1) += j[1] * j[1];
      g(0) += j[0] * r;
      g(1) += j[1] * r;
    }
    a(1, 0) = a(0, 1);
    if (g.norm() < opt.gradient_tol || ssr == 0.0) {
      out.converged = true;
      break;
    }

    bool accepted = false;
    while (!accepted) {
      Eigen::Matrix2d damped = a;
      for (int k = 0; k < 2; ++k) damped(k, k) += lambda * std::max(a(k, k), 1e-300);
      const Eigen::Vector2d step = damped.ldlt().solve(g);
      DecayParams trial{p.kind, p.q + step(0), p.rate + step(1)};
      const double trial_ssr = step.allFinite() ? ssr_at(trial, x) : std::numeric_limits<double>::infinity();
      if (std::isfinite(trial_ssr) && trial_ssr < ssr) {
        const double rel = (ssr - trial_ssr) / ssr;
        p = trial;
        ssr = trial_ssr;
        out.ssr_trace.push_back(ssr);
        lambda = std::max(lambda * 0.1, 1e-15);
        accepted = true;
        if (rel < opt.ssr_rel_tol) out.converged = true;
      } else {
        lambda *= 10.0;
        if (lambda > 1e16) {
          // No descent direction left at working precision.
          out.params = p;
          out.ssr = ssr;
          out.converged = true;
          return out;
        }
      }
    }
    if (out.converged) break;
  }
  out.params = p;
  out.ssr = ssr;
  return out;
}

}  // namespace detail

/**
 * Conley spatial HAC covariance for the decay model at `params`.
 *
 * The meat sums w(d_ij)·J_i'e_i e_j J_j over all pairs within the cutoff
 * (self-pairs have weight one); the result is projected onto the PSD cone.
 */
inline HacResult conley_hac_se(const Sample& sample, const DecayParams& params, const HacConfig& config) {
  if (sample.empty()) throw Error(ErrorCode::MissingResiduals, "no observations to form residuals");
  if (!(config.cutoff_km > 0.0)) throw Error(ErrorCode::InvalidArgument, "HAC cutoff must be > 0");

  const std::size_t n = sample.size();
  std::vector<Eigen::Vector2d> scores(n);
  std::vector<GeoPoint> pts(n);
  Eigen::Matrix2d jtj = Eigen::Matrix2d::Zero();
  for (std::size_t i = 0; i < n; ++i) {
    const auto& r = sample.rows[i];
    const double d = detail::model_distance(params.kind, r.distance_km);
    const auto j = jacobian(params, d);
    const double e = r.outcome - predict(params, d);
    if (!std::isfinite(e)) throw Error(ErrorCode::MissingResiduals, "non-finite residual for '" + r.unit_id + "'");
    const Eigen::Vector2d jv(j[0], j[1]);
    jtj += jv * jv.transpose();
    scores[i] = jv * e;
    pts[i] = r.location;
  }
  Eigen::FullPivLU<Eigen::Matrix2d> lu(jtj);
  if (!lu.isInvertible()) throw Error(ErrorCode::SingularJacobian, "J'J is singular at the estimate");
  const Eigen::Matrix2d bread = lu.inverse();

  Eigen::Matrix2d self = Eigen::Matrix2d::Zero();
  for (const auto& s : scores) self += s * s.transpose();
  Eigen::Matrix2d cross = Eigen::Matrix2d::Zero();
  for_each_pair_within(std::span<const GeoPoint>(pts), config.cutoff_km,
                       [&](std::size_t i, std::size_t j, double dij) {
                         const double w = config.kernel == HacKernel::Bartlett
                                              ? std::max(0.0, 1.0 - dij / config.cutoff_km)
                                              : 1.0;
                         if (w == 0.0) return;
                         cross += w * (scores[i] * scores[j].transpose() + scores[j] * scores[i].transpose());
                       });

  HacResult out;
  out.robust_cov = sandwich(bread, self);
  out.cov = sandwich(bread, self + cross);
  for (int k = 0; k < 2; ++k) {
    out.se[static_cast<std::size_t>(k)] = std::sqrt(std::max(0.0, out.cov(k, k)));
    out.robust_se[static_cast<std::size_t>(k)] = std::sqrt(std::max(0.0, out.robust_cov(k, k)));
  }
  return out;
}

/**
 * Least-squares fit of a decay family. Exponential and PowerLaw go through
 * Levenberg-Marquardt from a data-driven start plus a small multi-start;
 * LogLinear is linear in its parameters and is solved by OLS on (1, ln d).
 */
inline FitResult fit_nls(const Sample& sample, DecayModelKind kind, std::optional<DecayParams> init = std::nullopt,
                         const FitOptions& options = {}) {
  detail::validate_sample(sample);
  const auto x = detail::make_design(sample, kind);
  const std::size_t n = x.d.size();

  const auto [dmin, dmax] = std::minmax_element(x.d.begin(), x.d.end());
  if (*dmin == *dmax)
    throw Error(ErrorCode::SingularJacobian, "all distances are equal; decay rate is not identified");

  FitResult fit;
  fit.n = n;
  fit.params.kind = kind;

  if (kind == DecayModelKind::LogLinear) {
    Eigen::MatrixXd design(static_cast<Eigen::Index>(n), 2);
    Eigen::VectorXd y(static_cast<Eigen::Index>(n));
    for (std::size_t i = 0; i < n; ++i) {
      const auto k = static_cast<Eigen::Index>(i);
      design(k, 0) = 1.0;
      design(k, 1) = -std::log(x.d[i]);
      y(k) = x.y[i];
    }
    const auto o = ols(design, y);
    fit.params.q = o.coef(0);
    fit.params.rate = o.coef(1);
    fit.converged = true;
    fit.iterations = 1;
  } else {
    // Data-driven start: mean outcome among the nearest decile of units.
    std::vector<std::size_t> idx(n);
    for (std::size_t i = 0; i < n; ++i) idx[i] = i;
    const std::size_t decile = std::max<std::size_t>(1, n / 10);
    std::nth_element(idx.begin(), idx.begin() + static_cast<std::ptrdiff_t>(decile - 1), idx.end(),
                     [&](std::size_t a, std::size_t b) { return x.d[a] < x.d[b] || (x.d[a] == x.d[b] && a < b); });
    double q0 = 0.0;
    for (std::size_t i = 0; i < decile; ++i) q0 += x.y[idx[i]];
    q0 /= static_cast<double>(decile);
    double mean_d = 0.0;
    for (double d : x.d) mean_d += d;
    mean_d /= static_cast<double>(n);

    std::vector<DecayParams> starts;
    if (init) {
      if (init->kind != kind) throw Error(ErrorCode::InvalidArgument, "initial params are for a different model");
      starts.push_back(*init);
    }
    const double rate0 = kind == DecayModelKind::Exponential ? (mean_d > 0.0 ? 1.0 / mean_d : 1e-2) : 0.05;
    starts.push_back({kind, q0, rate0});
    for (double r : options.multi_start_rates) starts.push_back({kind, q0, r});

    std::optional<detail::LmOutcome> best;
    for (const auto& s : starts) {
      auto o = detail::levenberg_marquardt(s, x, options.lm);
      if (!std::isfinite(o.ssr)) continue;
      if (!best || o.ssr < best->ssr || (o.ssr == best->ssr && o.converged && !best->converged)) best = o;
    }
    if (!best) throw Error(ErrorCode::NonConvergence, "no start produced a finite sum of squares");
    fit.params = best->params;
    fit.converged = best->converged;
    fit.iterations = best->iterations;
  }

  fit.residuals.resize(n);
  double ssr = 0.0;
  double mean_y = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    fit.residuals[i] = x.y[i] - predict(fit.params, x.d[i]);
    ssr += fit.residuals[i] * fit.residuals[i];
    mean_y += x.y[i];
  }
  mean_y /= static_cast<double>(n);
  double sst = 0.0;
  for (double y : x.y) sst += (y - mean_y) * (y - mean_y);
  fit.ssr = ssr;
  fit.r2 = sst > 0.0 ? 1.0 - ssr / sst : (ssr == 0.0 ? 1.0 : 0.0);
  fit.rmse = std::sqrt(ssr / static_cast<double>(n));
  fit.loglik = concentrated_loglik(ssr, n);
  const auto ic = information_criteria(fit);
  fit.aic = ic.aic;
  fit.bic = ic.bic;

  // Spatial HAC over the units' own locations; HC0 is the zero-cutoff limit.
  const HacConfig cfg = options.hac.value_or(HacConfig{1e-9, HacKernel::Bartlett});
  const auto h = conley_hac_se(sample, fit.params, cfg);
  fit.robust_se = h.robust_se;
  if (options.hac) {
    fit.se = h.se;
    fit.cov = h.cov;
    fit.hac = true;
  } else {
    fit.se = h.robust_se;
    fit.cov = h.robust_cov;
  }
  return fit;
}

/// OLS of ln(outcome) on (1, distance).
struct LogOlsResult {
  double intercept{};
  double slope{};
  double kappa_eff{};  // -slope
  std::array<double, 2> robust_se{};
  std::array<double, 2> hac_se{};
  Eigen::Matrix2d robust_cov = Eigen::Matrix2d::Zero();
  Eigen::Matrix2d hac_cov = Eigen::Matrix2d::Zero();
  double r2{};
  std::size_t n{};
  std::vector<double> residuals;
};

inline LogOlsResult fit_ols_log(const Sample& sample, const HacConfig& hac = {}) {
  if (sample.size() < 3) throw Error(ErrorCode::TooFewObservations, "need at least 3 observations");
  std::vector<std::string> bad;
  for (const auto& r : sample.rows)
    if (!(r.outcome > 0.0)) bad.push_back(r.unit_id);
  if (!bad.empty())
    throw Error(ErrorCode::NonPositiveOutcome,
                std::to_string(bad.size()) + " unit(s) with outcome <= 0; log undefined", bad);

  const auto n = static_cast<Eigen::Index>(sample.size());
  Eigen::MatrixXd design(n, 2);
  Eigen::VectorXd y(n);
  std::vector<GeoPoint> pts;
  pts.reserve(sample.size());
  for (Eigen::Index i = 0; i < n; ++i) {
    const auto& r = sample.rows[static_cast<std::size_t>(i)];
    design(i, 0) = 1.0;
    design(i, 1) = r.distance_km;
    y(i) = std::log(r.outcome);
    pts.push_back(r.location);
  }
  const auto o = ols(design, y);

  LogOlsResult out;
  out.intercept = o.coef(0);
  out.slope = o.coef(1);
  out.kappa_eff = -out.slope;
  out.r2 = o.r2;
  out.n = sample.size();
  out.residuals.assign(o.residuals.data(), o.residuals.data() + n);
  out.robust_cov = robust_covariance(design, o.residuals, o.xtx_inv);

  Eigen::MatrixXd meat = Eigen::MatrixXd::Zero(2, 2);
  for (Eigen::Index i = 0; i < n; ++i) {
    const Eigen::Vector2d s = design.row(i).transpose() * o.residuals(i);
    meat += s * s.transpose();
  }
  for_each_pair_within(std::span<const GeoPoint>(pts), hac.cutoff_km, [&](std::size_t i, std::size_t j, double dij) {
    const double w = hac.kernel == HacKernel::Bartlett ? std::max(0.0, 1.0 - dij / hac.cutoff_km) : 1.0;
    const auto ii = static_cast<Eigen::Index>(i);
    const auto jj = static_cast<Eigen::Index>(j);
    const Eigen::Vector2d si = design.row(ii).transpose() * o.residuals(ii);
    const Eigen::Vector2d sj = design.row(jj).transpose() * o.residuals(jj);
    meat += w * (si * sj.transpose() + sj * si.transpose());
  });
  out.hac_cov = sandwich(o.xtx_inv, meat);
  for (int k = 0; k < 2; ++k) {
    out.robust_se[static_cast<std::size_t>(k)] = std::sqrt(std::max(0.0, out.robust_cov(k, k)));
    out.hac_se[static_cast<std::size_t>(k)] = std::sqrt(std::max(0.0, out.hac_cov(k, k)));
  }
  return out;
}

struct ModelComparison {
  std::map<DecayModelKind, FitResult> fits;
  std::map<DecayModelKind, std::string> failures;
  DecayModelKind best{DecayModelKind::Exponential};
  std::map<DecayModelKind, double> delta_aic;
  /// Kinds within 2 AIC points of the best (the best included).
  std::vector<DecayModelKind> tie_set;
};

inline constexpr double kAicTieThreshold = 2.0;

/// Fits every requested kind on the same clamped sample and ranks them by AIC.
inline ModelComparison compare_models(const Sample& sample, std::span<const DecayModelKind> kinds,
                                      const FitOptions& options = {}) {
  std::vector<DecayModelKind> unique(kinds.begin(), kinds.end());
  std::sort(unique.begin(), unique.end());
  unique.erase(std::unique(unique.begin(), unique.end()), unique.end());
  if (unique.size() < 2) throw Error(ErrorCode::InvalidArgument, "model comparison needs at least two distinct kinds");

  Sample clamped = sample;
  for (auto& r : clamped.rows) r.distance_km = std::max(r.distance_km, kDistanceFloorKm);

  ModelComparison out;
  for (auto k : unique) {
    try {
      out.fits.emplace(k, fit_nls(clamped, k, std::nullopt, options));
    } catch (const Error& e) {
      out.failures.emplace(k, e.what());
    }
  }
  if (out.fits.empty()) throw Error(ErrorCode::NonConvergence, "every requested model failed to fit");

  double best_aic = std::numeric_limits<double>::infinity();
  for (const auto& [k, f] : out.fits) {
    if (f.aic < best_aic) {
      best_aic = f.aic;
      out.best = k;
    }
  }
  for (const auto& [k, f] : out.fits) {
    const double delta = f.aic - best_aic;
    out.delta_aic[k] = delta;
    if (delta < kAicTieThreshold) out.tie_set.push_back(k);
  }
  return out;
}

}  // namespace decaybound
