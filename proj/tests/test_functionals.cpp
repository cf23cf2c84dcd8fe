#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <random>

#include "decaybound/functionals.hpp"
#include "test_support.hpp"

using namespace decaybound;
using decaybound::test_support::simulate_sample;

namespace {

constexpr double kKappa = 0.002837;
constexpr double kKappaSe = 0.000155;

FitResult exponential_fit(double q, double kappa, double se, double r2 = 0.0129) {
  FitResult f;
  f.params = {DecayModelKind::Exponential, q, kappa};
  f.se = {0.01, se};
  f.r2 = r2;
  return f;
}

}  // namespace

TEST(SpatialBoundary, Access2BoundaryAndInterval) {
  const auto b = spatial_boundary(exponential_fit(10.74, kKappa, kKappaSe));
  EXPECT_NEAR(b.d_star_km, 37.14, 0.1);
  EXPECT_NEAR(b.ci_lo_km, 33.2, 0.2);
  EXPECT_NEAR(b.ci_hi_km, 41.1, 0.2);
  EXPECT_DOUBLE_EQ(b.epsilon, 0.9);
  // Oracle: finite-difference derivative of -ln(0.9)/κ.
  const double h = 1e-9;
  const double gp = (-std::log(0.9) / (kKappa + h) + std::log(0.9) / (kKappa - h)) / (2 * h);
  EXPECT_NEAR(b.se_km, std::abs(gp) * kKappaSe, 1e-6);
}

TEST(SpatialBoundary, WeakDecayBoundary) {
  EXPECT_NEAR(spatial_boundary(0.000346, 0.0001, ThresholdSpec{}).d_star_km, 304.5, 1.0);
}

TEST(SpatialBoundary, ShrinksToZeroAsThresholdApproachesOne) {
  double prev = 1e300;
  for (double eps : {0.5, 0.9, 0.99, 0.999999}) {
    const double d = spatial_boundary(kKappa, kKappaSe, ThresholdSpec(eps)).d_star_km;
    EXPECT_LT(d, prev);
    prev = d;
  }
  EXPECT_LT(prev, 1e-3);
}

TEST(SpatialBoundary, Errors) {
  EXPECT_EQ([] {
    try {
      spatial_boundary(exponential_fit(1, -0.001, 0.0001));
    } catch (const Error& e) {
      return e.code();
    }
    return ErrorCode::IoError;
  }(), ErrorCode::BoundaryUndefined);
  EXPECT_THROW(spatial_boundary(0.0, 0.1, ThresholdSpec{}), Error);
  FitResult pl;
  pl.params = {DecayModelKind::PowerLaw, 1, 0.3};
  EXPECT_THROW(spatial_boundary(pl), Error);
}

TEST(SpatialBoundary, RoundTripThroughPredict) {
  for (double kappa : {1e-4, kKappa, 0.05, 1.3}) {
    for (double eps : {0.1, 0.5, 0.9, 0.99}) {
      const DecayParams p{DecayModelKind::Exponential, 10.74, kappa};
      const double d = spatial_boundary(kappa, 0.0, ThresholdSpec(eps)).d_star_km;
      EXPECT_NEAR(predict(p, d) / (eps * p.q), 1.0, 1e-12);
    }
  }
}

TEST(SpatialBoundary, LooserThresholdWidensBoundary) {
  std::mt19937_64 rng(3);
  std::uniform_real_distribution<double> k(1e-5, 1.0), e(0.01, 0.99);
  for (int i = 0; i < 1000; ++i) {
    const double kappa = k(rng);
    double e1 = e(rng), e2 = e(rng);
    if (e1 == e2) continue;
    if (e1 < e2) std::swap(e1, e2);
    ASSERT_LT(spatial_boundary(kappa, 0, ThresholdSpec(e1)).d_star_km,
              spatial_boundary(kappa, 0, ThresholdSpec(e2)).d_star_km);
  }
}

TEST(ImpliedDiffusion, Access2Values) {
  const auto ds = implied_diffusion(kKappa);
  EXPECT_NEAR(ds.nu / 62130.0, 1.0, 0.005);
  EXPECT_NEAR(ds.nu, 1.0 / (2 * kKappa * kKappa), 1e-9);
  EXPECT_NEAR(ds.xi_star, 161.8, 0.05);
  EXPECT_NEAR(ds.sensitivity_d_nu, 2.99e-4, 0.005e-4);
  EXPECT_NEAR(ds.d_star_km, 37.14, 0.01);
}

TEST(ImpliedDiffusion, ElasticityIdentity) {
  for (double kappa : {1e-4, kKappa, 0.3}) {
    const auto ds = implied_diffusion(kappa);
    EXPECT_NEAR(ds.nu / ds.d_star_km * ds.sensitivity_d_nu, 0.5, 1e-12);
    EXPECT_EQ(ds.elasticity, 0.5);
    // d* written as a function of ν; central difference as the oracle.
    auto dstar_of_nu = [](double nu) { return std::sqrt(2 * nu) * -std::log(0.9); };
    const double h = ds.nu * 1e-6;
    EXPECT_NEAR((dstar_of_nu(ds.nu + h) - dstar_of_nu(ds.nu - h)) / (2 * h) / ds.sensitivity_d_nu, 1.0, 1e-7);
  }
  EXPECT_THROW(implied_diffusion(0.0), Error);
}

TEST(BoundaryEvolution, ScalingValues) {
  const auto ds = implied_diffusion(kKappa);
  EXPECT_NEAR(boundary_evolution(ds, 1.0), 161.8, 0.05);
  EXPECT_NEAR(boundary_evolution(ds, 4.0), 2 * ds.xi_star, 1e-12);
  EXPECT_NEAR(boundary_evolution(ds, 4.0), 323.6, 0.1);
  EXPECT_NEAR(boundary_evolution(ds, 0.25), 80.9, 0.05);
  EXPECT_NEAR(boundary_evolution(ds, 0.25), ds.xi_star / 2, 1e-12);
  EXPECT_THROW(boundary_evolution(ds, 0.0), Error);
}

TEST(BoundaryVelocity, DeceleratingValues) {
  const auto ds = implied_diffusion(kKappa);
  EXPECT_NEAR(boundary_velocity(ds, 1.0), 80.9, 0.05);
  EXPECT_NEAR(boundary_velocity(ds, 4.0), 40.5, 0.05);
  EXPECT_NEAR(boundary_velocity(ds, 9.0), 27.0, 0.05);
  EXPECT_THROW(boundary_velocity(ds, -1.0), Error);
}

TEST(BoundaryVelocity, IsTimeDerivativeOfBoundary) {
  const auto ds = implied_diffusion(kKappa);
  for (double t : {0.01, 0.5, 1.0, 7.0, 100.0}) {
    EXPECT_NEAR(boundary_velocity(ds, t) * 2 * t, boundary_evolution(ds, t), 1e-10 * boundary_evolution(ds, t));
    const double h = t * 1e-6;
    const double fd = (boundary_evolution(ds, t + h) - boundary_evolution(ds, t - h)) / (2 * h);
    EXPECT_NEAR(fd / boundary_velocity(ds, t), 1.0, 1e-8);
  }
}

TEST(CumulativeExposure, Values) {
  const auto f = exponential_fit(10.74, kKappa, kKappaSe);
  const ExposureSpec t10(10.0);
  EXPECT_NEAR(cumulative_exposure(f, t10, 10.0), 104.4, 0.1);
  EXPECT_DOUBLE_EQ(cumulative_exposure(f, t10, 0.0), 107.4);
  for (double d : {0.0, 3.0, 50.0, 900.0})
    EXPECT_NEAR(cumulative_exposure(f, t10, d) / predict(f.params, d), 10.0, 1e-12);
  EXPECT_THROW(ExposureSpec(0.0), Error);
}

TEST(SignReversal, ReportedCases) {
  EXPECT_EQ(sign_reversal_test(kKappa, kKappaSe, 0.0129).verdict, Verdict::Applies);
  EXPECT_EQ(sign_reversal_test(0.0, 0.0001, 0.000).verdict, Verdict::Rejected);
  EXPECT_EQ(sign_reversal_test(1e-9, 0.0001, 0.000).verdict, Verdict::Rejected);
  const auto obesity = sign_reversal_test(0.000346, 0.0001, 0.008);
  EXPECT_EQ(obesity.verdict, Verdict::WeakApplies);
  EXPECT_NEAR(*obesity.d_star_km, 304.5, 1.0);
}

TEST(SignReversal, NegativeAndOutOfDomain) {
  EXPECT_EQ(sign_reversal_test(-0.002, 0.0001, 0.05).verdict, Verdict::Rejected);
  // d*(0.9) = 9773 km: significant but wider than the continent.
  const auto v = sign_reversal_test(-std::log(0.9) / 9773.0, 1e-6, 0.008);
  EXPECT_EQ(v.verdict, Verdict::Marginal);
  VerdictConfig wide;
  wide.domain_span_km = 20000;
  EXPECT_EQ(sign_reversal_test(-std::log(0.9) / 9773.0, 1e-6, 0.008, wide).verdict, Verdict::WeakApplies);
}

TEST(SignReversal, PureFunctionOfInputs) {
  const auto a = sign_reversal_test(kKappa, kKappaSe, 0.0129);
  const auto b = sign_reversal_test(kKappa, kKappaSe, 0.0129);
  EXPECT_EQ(a.verdict, b.verdict);
  EXPECT_EQ(a.z, b.z);
  EXPECT_EQ(sign_reversal_test(exponential_fit(10.74, kKappa, kKappaSe)).verdict, Verdict::Applies);
}

namespace {

Sample two_strata(double kappa_high, double kappa_low, std::size_t n_each, std::uint64_t seed) {
  auto high = simulate_sample({{DecayModelKind::Exponential, 10.0, kappa_high}, 1.0, n_each, 0.0, 500.0}, seed);
  auto low = simulate_sample({{DecayModelKind::Exponential, 10.0, kappa_low}, 1.0, n_each, 0.0, 500.0},
                             seed + 7919);
  Sample s;
  for (auto& r : high.rows) {
    r.unit_id = "h" + r.unit_id;
    r.covariates["median_age"] = 64.0;
    s.rows.push_back(r);
  }
  for (auto& r : low.rows) {
    r.unit_id = "l" + r.unit_id;
    r.covariates["median_age"] = 33.0;
    s.rows.push_back(r);
  }
  // Middle-aged units belong to neither stratum.
  s.rows.push_back({"mid", 10.0, 9.0, {}, {{"median_age", 50.0}}});
  return s;
}

}  // namespace

TEST(StratifiedFit, RecoversRatioOfTwo) {
  std::vector<double> ratios;
  StratifyOptions opt;
  opt.fit.hac = std::nullopt;
  for (int seed = 0; seed < 200; ++seed) {
    const auto r = stratified_fit(two_strata(0.006, 0.003, 400, 10000 + seed), elderly_split(), opt);
    ASSERT_TRUE(r.ratio.has_value());
    ratios.push_back(*r.ratio);
  }
  std::nth_element(ratios.begin(), ratios.begin() + 100, ratios.end());
  EXPECT_GE(ratios[100], 1.8);
  EXPECT_LE(ratios[100], 2.2);
}

TEST(StratifiedFit, IdenticalStrataGiveRatioOne) {
  auto s = two_strata(0.004, 0.004, 300, 5);
  // Same rows in both strata.
  Sample twin;
  for (const auto& r : s.rows) {
    if (r.covariates.at("median_age") != 64.0) continue;
    twin.rows.push_back(r);
    auto copy = r;
    copy.unit_id += "_y";
    copy.covariates["median_age"] = 30.0;
    twin.rows.push_back(copy);
  }
  const auto r = stratified_fit(twin, elderly_split());
  ASSERT_TRUE(r.ratio.has_value());
  EXPECT_NEAR(*r.ratio, 1.0, 1e-12);
  EXPECT_EQ(r.group_fits.size(), 2u);
}

TEST(StratifiedFit, OppositeSignsLeaveRatioUndefined) {
  const auto r = stratified_fit(two_strata(0.004, -0.003, 300, 9), elderly_split());
  EXPECT_FALSE(r.ratio.has_value());
  EXPECT_GT(r.group_fits.at("elderly").params.rate, 0.0);
  EXPECT_LT(r.group_fits.at("young").params.rate, 0.0);
}

TEST(StratifiedFit, ElderlyDirection) {
  // Stronger decay among older tracts: direction only.
  const auto r = stratified_fit(two_strata(0.01, 0.002, 500, 17), elderly_split());
  ASSERT_TRUE(r.ratio.has_value());
  EXPECT_GT(*r.ratio, 2.0);
}

TEST(StratifiedFit, SmallStratumRejected) {
  const auto s = two_strata(0.004, 0.003, 20, 1);
  try {
    stratified_fit(s, elderly_split());
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), ErrorCode::StratumTooSmall);
  }
  StratifyOptions opt;
  opt.min_stratum = 10;
  EXPECT_NO_THROW(stratified_fit(s, elderly_split(), opt));
}

TEST(StratifiedFit, BuiltinRules) {
  EXPECT_EQ(builtin_split("education")->high_min, 30.0);
  EXPECT_EQ(builtin_split("education")->low_max, 20.0);
  EXPECT_EQ(builtin_split("gender")->covariate, "pct_female");
  EXPECT_EQ(builtin_split("age")->low_max, 40.0);
  EXPECT_FALSE(builtin_split("income").has_value());
}

namespace {

std::vector<KappaGroup> decomposition_groups(std::size_t n, std::uint64_t seed, double road_coef, double pov_coef,
                                             double noise_sd = 0.0) {
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> z(0, 1), e(0, noise_sd > 0 ? noise_sd : 1.0);
  std::vector<KappaGroup> g;
  for (std::size_t i = 0; i < n; ++i) {
    const double road = z(rng), pov = z(rng), transit = z(rng), age = z(rng);
    const double lk = -4.0 + road_coef * road + pov_coef * pov + (noise_sd > 0 ? e(rng) : 0.0);
    g.push_back({std::exp(lk), {{"road_density", road}, {"transit", transit}, {"poverty", pov}, {"age_share", age}}});
  }
  return g;
}

}  // namespace

TEST(DecomposeKappa, NoiselessCoefficientsRecovered) {
  const double gamma = 0.8, delta = 1.2;
  const auto g = decomposition_groups(60, 4, -delta / 2, gamma / 2);
  const auto d = decompose_kappa(g);
  EXPECT_NEAR(*d.coefficients.at("road_density"), -delta / 2, 1e-10);
  EXPECT_NEAR(*d.coefficients.at("poverty"), gamma / 2, 1e-10);
  EXPECT_NEAR(*d.coefficients.at("transit"), 0.0, 1e-10);
  EXPECT_NEAR(d.intercept, -4.0, 1e-10);
  EXPECT_NEAR(d.r2, 1.0, 1e-12);
  EXPECT_NEAR(d.residual_share, 0.0, 1e-12);
}

TEST(DecomposeKappa, MobilityDominantShare) {
  const auto g = decomposition_groups(4000, 8, -std::sqrt(0.6), std::sqrt(0.4));
  const auto d = decompose_kappa(g);
  ASSERT_EQ(d.block_shares.size(), 2u);
  EXPECT_EQ(d.block_shares[0].block, "mobility");
  EXPECT_NEAR(d.block_shares[0].share, 0.6, 0.05);
  EXPECT_NEAR(d.block_shares[0].share + d.block_shares[1].share + d.residual_share, 1.0, 1e-12);
}

TEST(DecomposeKappa, ConstantCovariateDropped) {
  auto g = decomposition_groups(50, 2, -0.5, 0.3, 0.1);
  for (auto& x : g) x.covariates["transit"] = 0.4;
  const auto d = decompose_kappa(g);
  EXPECT_EQ(d.dropped, std::vector<std::string>{"transit"});
  EXPECT_FALSE(d.coefficients.at("transit").has_value());
  EXPECT_TRUE(d.coefficients.at("road_density").has_value());
}

TEST(DecomposeKappa, Errors) {
  auto g = decomposition_groups(50, 2, -0.5, 0.3);
  g[3].kappa_eff = 0.0;
  EXPECT_THROW(decompose_kappa(g), Error);
  const auto few = decomposition_groups(5, 2, -0.5, 0.3);
  try {
    decompose_kappa(few);
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), ErrorCode::InsufficientGroups);
  }
}
