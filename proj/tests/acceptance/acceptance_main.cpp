// Acceptance suite: one PASS/FAIL line per criterion, exit status 1 if any fail.
//
//   acceptance [--only N]

#include <json.hpp>

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <cstring>
#include <fstream>
#include <functional>
#include <map>
#include <random>
#include <sstream>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "../test_support.hpp"
#include "decaybound/bessel.hpp"
#include "decaybound/estimation.hpp"
#include "decaybound/functionals.hpp"
#include "decaybound/geo.hpp"
#include "decaybound/panel_did.hpp"
#include "decaybound/pde_lab.hpp"
#include "decaybound/serialization.hpp"

using namespace decaybound;
using test_support::DistanceLaw;
using test_support::simulate_sample;

namespace {

struct Outcome {
  bool pass = true;
  std::ostringstream detail;

  // Records a named check; the criterion passes only if every check does.
  void check(bool ok, const std::string& what) {
    if (!detail.str().empty()) detail << "; ";
    detail << what << (ok ? "" : " [miss]");
    pass = pass && ok;
  }
};

std::string fmt(double v, int prec = 4) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.*g", prec, v);
  return buf;
}

bool near(double v, double target, double tol) { return std::abs(v - target) <= tol; }

// ---------------------------------------------------------------------------

constexpr double kKappa = 0.002837;
constexpr double kKappaSe = 0.000155;
constexpr double kQ = 10.74;

void functional_identities(Outcome& o) {
  const ThresholdSpec eps(0.9);
  const auto b = spatial_boundary(kKappa, kKappaSe, eps);
  const auto ds = implied_diffusion(kKappa, eps);
  const DecayParams p{DecayModelKind::Exponential, kQ, kKappa};
  o.check(near(b.d_star_km, 37.1, 0.1), "d*=" + fmt(b.d_star_km));
  o.check(near(b.ci_lo_km, 33.2, 0.2) && near(b.ci_hi_km, 41.1, 0.2),
          "CI=[" + fmt(b.ci_lo_km) + "," + fmt(b.ci_hi_km) + "]");
  o.check(std::abs(ds.nu / 62130.0 - 1.0) <= 0.005, "nu=" + fmt(ds.nu, 6));
  o.check(near(ds.xi_star, 161.8, 0.5), "xi*=" + fmt(ds.xi_star));
  const double v1 = boundary_velocity(ds, 1), v4 = boundary_velocity(ds, 4), v9 = boundary_velocity(ds, 9);
  o.check(near(v1, 80.9, 0.2) && near(v4, 40.5, 0.2) && near(v9, 27.0, 0.2),
          "v(1,4,9)=" + fmt(v1) + "," + fmt(v4) + "," + fmt(v9));
  const double grad = spatial_gradient_magnitude(p, 10.0);
  o.check(near(grad, 0.0296, 0.0005), "|grad|(10)=" + fmt(grad));
  const double phi = cumulative_exposure(p, ExposureSpec(10.0), 10.0);
  o.check(near(phi, 104.4, 0.1), "Phi=" + fmt(phi));
  o.check(near(ds.sensitivity_d_nu, 0.000299, 2e-6), "dd*/dnu=" + fmt(ds.sensitivity_d_nu));
  o.check(ds.elasticity == 0.5, "elasticity=" + fmt(ds.elasticity));
}

void information_criteria_arithmetic(Outcome& o) {
  const auto ic = information_criteria(-53398.0, 32520.0);
  o.check(ic.aic == 106802.0, "AIC=" + fmt(ic.aic, 9));
  o.check(near(ic.bic, 106819.0, 2.0), "BIC=" + fmt(ic.bic, 9) + " (target 106819+-2, k=3)");
}

void estimator_recovery(Outcome& o) {
  const int seeds = 200;
  std::vector<double> kappas;
  int covered = 0;
  for (int s = 0; s < seeds; ++s) {
    const auto sample = simulate_sample(
        {{DecayModelKind::Exponential, kQ, kKappa}, 5.4, 5000, 0.5, 500.0, DistanceLaw::LogUniform},
        30000 + static_cast<std::uint64_t>(s));
    const auto f = fit_nls(sample, DecayModelKind::Exponential);
    kappas.push_back(f.params.rate);
    if (std::abs(f.params.rate - kKappa) <= kZ95 * f.se[1]) ++covered;
  }
  std::nth_element(kappas.begin(), kappas.begin() + seeds / 2, kappas.end());
  const double hi = kappas[seeds / 2];
  const double lo = *std::max_element(kappas.begin(), kappas.begin() + seeds / 2);
  const double median = 0.5 * (lo + hi);
  o.check(std::abs(median / kKappa - 1.0) <= 0.05, "median kappa=" + fmt(median) + " (" +
                                                      fmt(100 * (median / kKappa - 1.0), 3) + "%)");
  o.check(covered >= static_cast<int>(0.9 * seeds), "HAC 95% coverage=" + std::to_string(covered) + "/200");
}

void model_selection(Outcome& o) {
  const int seeds = 50;
  FitOptions opt;
  opt.hac = std::nullopt;  // AIC does not depend on the covariance
  int log_ok = 0, log_dir = 0, tie = 0, exp_ok = 0, exp_dir = 0;
  double log_min_gap = INFINITY, log_mean_gap = 0.0, exp_min_gap = INFINITY;
  for (int s = 0; s < seeds; ++s) {
    const auto seed = 40000 + static_cast<std::uint64_t>(s);
    const auto ls = simulate_sample(
        {{DecayModelKind::LogLinear, 12.04, 0.16}, 5.4, 32520, 0.1, 500.0, DistanceLaw::LogUniform}, seed);
    const auto lc = compare_models(ls, kAllDecayModels, opt);
    const bool log_best = std::find(lc.tie_set.begin(), lc.tie_set.end(), DecayModelKind::LogLinear) != lc.tie_set.end();
    const double gap = lc.delta_aic.at(DecayModelKind::Exponential);
    log_dir += log_best && gap > 0.0;
    log_ok += log_best && gap > 100.0;
    log_min_gap = std::min(log_min_gap, gap);
    log_mean_gap += gap / seeds;
    tie += std::abs(lc.fits.at(DecayModelKind::PowerLaw).aic - lc.fits.at(DecayModelKind::LogLinear).aic) <
           kAicTieThreshold;

    const auto es = simulate_sample(
        {{DecayModelKind::Exponential, kQ, kKappa}, 5.4, 32520, 0.1, 500.0, DistanceLaw::LogUniform}, seed);
    const auto ec = compare_models(es, kAllDecayModels, opt);
    double runner_up = INFINITY;
    for (const auto& [k, d] : ec.delta_aic)
      if (k != DecayModelKind::Exponential) runner_up = std::min(runner_up, d);
    exp_dir += ec.best == DecayModelKind::Exponential;
    exp_ok += ec.best == DecayModelKind::Exponential && runner_up > 100.0;
    exp_min_gap = std::min(exp_min_gap, ec.best == DecayModelKind::Exponential ? runner_up : 0.0);
  }
  const int need = static_cast<int>(std::ceil(0.95 * seeds));
  o.check(log_ok >= need, "log-linear DGP: LogLinear best/tied with dAIC(Exp)>100 in " + std::to_string(log_ok) +
                              "/50 (direction " + std::to_string(log_dir) + "/50, mean dAIC " + fmt(log_mean_gap, 3) +
                              ", min " + fmt(log_min_gap, 3) + ")");
  o.check(tie >= need, "PowerLaw-LogLinear |dAIC|<2 in " + std::to_string(tie) + "/50");
  o.check(exp_ok >= need, "exponential DGP: Exponential best with margin>100 in " + std::to_string(exp_ok) +
                              "/50 (direction " + std::to_string(exp_dir) + "/50, min margin " + fmt(exp_min_gap, 4) +
                              ")");
}

struct Line {
  FieldGrid steady;
  PdeParams params;
  double source_x;
  double dt;
};

Line steady_line(double d, double kappa, std::size_t n, double h) {
  const double x0 = h * static_cast<double>(n / 2);
  PdeParams p{d, kappa, {{{x0, 0.0}, 1.0}}};
  auto g = FieldGrid::line(n, h);
  const double dt = 0.95 * max_stable_dt(g, p);
  return {solve_steady_state(g, p, dt, BoundaryCondition::ZeroFlux), p, x0, dt};
}

void pde_closure(Outcome& o) {
  const auto a = steady_line(100.0, 1.0, 2001, 0.5);
  const auto ka = recover_kappa_eff(a.steady, {a.source_x, 0.0});
  o.check(std::abs(ka.kappa_eff / 0.1 - 1.0) <= 0.05, "kappa_eff=" + fmt(ka.kappa_eff, 5));
  const auto b = steady_line(200.0, 1.0, 2001, 0.5);
  const auto kb = recover_kappa_eff(b.steady, {b.source_x, 0.0});
  const double ratio = ka.kappa_eff / kb.kappa_eff;
  o.check(std::abs(ratio / std::sqrt(2.0) - 1.0) <= 0.05, "ratio(D,2D)=" + fmt(ratio, 5));
  const auto c = closure_decay(a.steady, a.params, {a.dt, 5.0});
  o.check(std::abs(c.mass_trend.slope / -1.0 - 1.0) <= 0.02, "closure slope=" + fmt(c.mass_trend.slope, 6));
}

void green_2d(Outcome& o) {
  const double d = 25.0, kappa = 0.25;
  auto g = FieldGrid::plane(301, 301, 1.0);
  const PdeParams p{d, kappa, {{{150.0, 150.0}, 1.0}}};
  const auto run = solve_transient(g, p, {0.95 * max_stable_dt(g, p), 60.0});
  const auto& f = run.final_state();
  const auto k = recover_kappa_eff(f, {150.0, 150.0});
  double max_rel = 0.0;
  for (std::size_t iy = 0; iy < 301; ++iy)
    for (std::size_t ix = 0; ix < 301; ++ix) {
      const double r = std::hypot(f.coord(ix) - 150.0, f.coord(iy) - 150.0);
      if (r < k.window_lo_km || r > k.window_hi_km) continue;
      max_rel = std::max(max_rel, std::abs(f.values[f.index(ix, iy)] / steady_state_green(p, r, 2) - 1.0));
    }
  o.check(max_rel < 0.05, "max rel error over window [" + fmt(k.window_lo_km) + "," + fmt(k.window_hi_km) +
                              "] km=" + fmt(max_rel, 3));
  const double k0 = bessel_k0(1.0);
  o.check(std::abs(k0 - 0.4210244382) <= 1e-8, "K0(1)=" + fmt(k0, 12));
}

double lsdv_beta(const Panel& p) {
  std::map<std::string, int> unit;
  std::map<int, int> year;
  for (const auto& r : p) {
    unit.emplace(r.unit_id, 0);
    year.emplace(r.year, 0);
  }
  int k = 0;
  for (auto& [u, i] : unit) i = k++;
  k = 0;
  for (auto& [y, i] : year) i = k++;
  const auto n = static_cast<Eigen::Index>(p.size());
  const auto nu = static_cast<Eigen::Index>(unit.size());
  const auto ny = static_cast<Eigen::Index>(year.size());
  Eigen::MatrixXd x = Eigen::MatrixXd::Zero(n, nu + ny);
  Eigen::VectorXd y(n);
  for (Eigen::Index i = 0; i < n; ++i) {
    const auto& r = p[static_cast<std::size_t>(i)];
    x(i, 0) = r.treated_post ? 1.0 : 0.0;
    x(i, 1 + unit.at(r.unit_id)) = 1.0;
    if (const int t = year.at(r.year); t > 0) x(i, nu + t) = 1.0;
    y(i) = r.outcome;
  }
  return x.colPivHouseholderQr().solve(y)(0);
}

void did_suite(Outcome& o) {
  DgpConfig clean;
  clean.noise_sd = 0.0;
  clean.onset = clean.peak = -2.87;
  const double exact = fit_twfe(generate_synthetic_panel(clean, 3).observations).beta;
  o.check(near(exact, -2.87, 1e-8), "noiseless beta=" + fmt(exact, 10));

  std::ifstream in(std::string(DECAYBOUND_SOURCE_DIR) + "/data/did_default.json");
  const auto j = nlohmann::json::parse(in);
  const auto panel = generate_synthetic_panel(j.at("dgp").get<DgpConfig>(), j.at("seed").get<std::uint64_t>());
  const auto tw = fit_twfe(panel.observations);
  const auto es = event_study(panel.observations);
  o.check(near(tw.beta, -2.87, 0.3), "frozen beta=" + fmt(tw.beta) + " (se " + fmt(tw.se, 3) + ")");
  const double k0 = es.coefficients.at(0).beta, k1 = es.coefficients.at(1).beta;
  o.check(near(k0, -2.51, 0.35) && near(k1, -3.04, 0.35), "k0=" + fmt(k0) + ", k1=" + fmt(k1));

  double worst = 0.0;
  for (std::uint64_t seed = 1; seed <= 10; ++seed)
    for (auto [n, t] : {std::pair<std::size_t, int>{20, 5}, {25, 6}, {8, 3}}) {
      DgpConfig c;
      c.n_units = n;
      c.n_years = t;
      c.treated_share = 0.3;
      c.opening_years = t >= 5 ? std::vector<int>{2016, 2018} : std::vector<int>{2016};
      c.onset = -1.0;
      c.peak = -2.0;
      c.fade = 0.8;
      c.noise_sd = 1.0;
      const auto p = generate_synthetic_panel(c, seed).observations;
      worst = std::max(worst, std::abs(fit_twfe(p).beta - lsdv_beta(p)));
    }
  o.check(worst <= 1e-9, "max |within-LSDV|=" + fmt(worst, 3));

  int rejections = 0;
  for (int s = 0; s < 200; ++s) {
    DgpConfig c = clean;
    c.onset = c.peak = 0.0;
    c.noise_sd = 1.55;
    const auto f = fit_twfe(generate_synthetic_panel(c, 7000 + static_cast<std::uint64_t>(s)).observations);
    rejections += std::abs(f.beta) / f.se >= 1.96;
  }
  o.check(rejections <= 14, "placebo rejections=" + std::to_string(rejections) + "/200");
}

void prediction_one(Outcome& o) {
  Sample s;
  for (int i = 0; i <= 100; ++i) {
    Observation r;
    r.unit_id = "p" + std::to_string(i);
    r.distance_km = 0.5 * i;
    r.outcome = std::exp(2.341 - 0.084 * r.distance_km);
    r.location = make_geo_point(35.0 + 0.01 * i, -100.0);
    s.rows.push_back(r);
  }
  const auto f = fit_ols_log(s);
  o.check(std::abs(f.slope + 0.084) <= 1e-10 && std::abs(f.intercept - 2.341) <= 1e-10,
          "slope=" + fmt(f.slope, 12) + ", intercept=" + fmt(f.intercept, 12));
  const double h = half_distance(0.084);
  o.check(near(h, 8.25, 0.05), "half distance=" + fmt(h));
}

void diagnostic_verdicts(Outcome& o) {
  const auto a = sign_reversal_test(kKappa, kKappaSe, 0.0129);
  const auto r = sign_reversal_test(0.0, 0.0001, 0.0);
  const auto w = sign_reversal_test(0.000346, 0.0001, 0.008);
  o.check(a.verdict == Verdict::Applies, "ACCESS2 -> " + std::string(to_string(a.verdict)));
  o.check(r.verdict == Verdict::Rejected, "kappa~0 -> " + std::string(to_string(r.verdict)));
  o.check(w.verdict == Verdict::WeakApplies,
          "kappa=0.000346 -> " + std::string(to_string(w.verdict)) + " (d*=" + fmt(w.d_star_km.value_or(0)) + ")");
  bool stable = true;
  for (int i = 0; i < 100; ++i)
    stable = stable && sign_reversal_test(kKappa, kKappaSe, 0.0129).verdict == a.verdict &&
             sign_reversal_test(0.000346, 0.0001, 0.008).verdict == w.verdict;
  o.check(stable, "repeatable");
}

void geodesy(Outcome& o) {
  std::mt19937_64 rng(2718);
  std::uniform_real_distribution<double> lat(-90.0, 90.0), lon(-180.0, 180.0);
  auto pt = [&] { return make_geo_point(lat(rng), lon(rng)); };
  int bad_sym = 0, bad_id = 0, bad_tri = 0;
  for (int i = 0; i < 10000; ++i) {
    const auto a = pt(), b = pt(), c = pt();
    const double ab = haversine_distance(a, b);
    bad_sym += std::abs(ab - haversine_distance(b, a)) > 1e-9;
    bad_id += haversine_distance(a, a) != 0.0;
    bad_tri += haversine_distance(a, c) > ab + haversine_distance(b, c) + 1e-9;
  }
  o.check(bad_sym + bad_id + bad_tri == 0, "symmetry/identity/triangle violations=" + std::to_string(bad_sym) + "/" +
                                               std::to_string(bad_id) + "/" + std::to_string(bad_tri));
  int mismatches = 0;
  std::uniform_real_distribution<double> us_lat(25.0, 49.0), us_lon(-124.0, -67.0);
  for (int inst = 0; inst < 5; ++inst) {
    std::vector<Source> src;
    for (int k = 0; k < 50; ++k) src.push_back({"s" + std::to_string(k), make_geo_point(us_lat(rng), us_lon(rng))});
    const SourceSet sources(src);
    std::vector<UnitLocation> units;
    for (int k = 0; k < 1000; ++k) units.push_back({"u" + std::to_string(k), make_geo_point(us_lat(rng), us_lon(rng))});
    const auto fast = build_distance_table(units, sources, DistanceMethod::Indexed);
    const auto slow = build_distance_table(units, sources, DistanceMethod::BruteForce);
    for (std::size_t k = 0; k < fast.size(); ++k)
      mismatches += fast[k].nearest_source_id != slow[k].nearest_source_id || fast[k].distance_km != slow[k].distance_km;
  }
  o.check(mismatches == 0, "indexed vs brute force mismatches=" + std::to_string(mismatches) + " (5 x 1000x50)");
}

struct Criterion {
  int id;
  const char* name;
  double time_limit_s;  // 0: none
  std::function<void(Outcome&)> run;
};

}  // namespace

int main(int argc, char** argv) {
  int only = 0;
  if (argc == 3 && std::strcmp(argv[1], "--only") == 0) only = std::atoi(argv[2]);

  const std::vector<Criterion> criteria{
      {1, "functional identities", 1.0, functional_identities},
      {2, "AIC/BIC arithmetic", 0.0, information_criteria_arithmetic},
      {3, "estimator recovery (200-seed Monte Carlo)", 60.0, estimator_recovery},
      {4, "model-selection direction (50 seeds per arm)", 0.0, model_selection},
      {5, "PDE closure 1D", 120.0, pde_closure},
      {6, "2D Green's function match", 0.0, green_2d},
      {7, "DiD suite", 0.0, did_suite},
      {8, "prediction-1 reconstruction", 0.0, prediction_one},
      {9, "diagnostic verdicts", 0.0, diagnostic_verdicts},
      {10, "geodesy", 0.0, geodesy},
  };

  int failed = 0;
  for (const auto& c : criteria) {
    if (only && c.id != only) continue;
    Outcome o;
    const auto t0 = std::chrono::steady_clock::now();
    try {
      c.run(o);
    } catch (const std::exception& e) {
      o.check(false, std::string("threw: ") + e.what());
    }
    const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    if (c.time_limit_s > 0) o.check(secs < c.time_limit_s, "runtime " + fmt(secs, 3) + "s < " + fmt(c.time_limit_s) + "s");
    failed += !o.pass;
    std::printf("%s criterion %d: %s (%.2fs) | %s\n", o.pass ? "PASS" : "FAIL", c.id, c.name, secs,
                o.detail.str().c_str());
    std::fflush(stdout);
  }
  return failed ? 1 : 0;
}
