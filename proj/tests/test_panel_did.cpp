#include <gtest/gtest.h>

#include <Eigen/Dense>

#include <cmath>
#include <fstream>
#include <map>

#include "decaybound/panel_did.hpp"
#include "decaybound/serialization.hpp"

using namespace decaybound;

namespace {

DgpConfig noiseless(double effect) {
  DgpConfig c;
  c.noise_sd = 0.0;
  c.onset = effect;
  c.peak = effect;
  c.fade = 1.0;
  c.kappa_dgp = 0.0;
  return c;
}

DgpConfig small(std::size_t n_units, int n_years, std::vector<int> openings) {
  DgpConfig c;
  c.n_units = n_units;
  c.n_years = n_years;
  c.treated_share = 0.3;
  c.opening_years = std::move(openings);
  c.peak = -2.0;
  c.onset = -1.0;
  c.fade = 0.8;
  c.noise_sd = 1.0;
  return c;
}

// Least-squares dummy variables: y on [D, unit dummies, year dummies minus one].
double lsdv_beta(const Panel& p) {
  std::map<std::string, int> unit;
  std::map<int, int> year;
  for (const auto& o : p) {
    unit.emplace(o.unit_id, 0);
    year.emplace(o.year, 0);
  }
  int k = 0;
  for (auto& [u, i] : unit) i = k++;
  k = 0;
  for (auto& [y, i] : year) i = k++;
  const auto n = static_cast<Eigen::Index>(p.size());
  const auto nu = static_cast<Eigen::Index>(unit.size());
  const auto ny = static_cast<Eigen::Index>(year.size());
  Eigen::MatrixXd x = Eigen::MatrixXd::Zero(n, 1 + nu + ny - 1);
  Eigen::VectorXd y(n);
  for (Eigen::Index i = 0; i < n; ++i) {
    const auto& o = p[static_cast<std::size_t>(i)];
    x(i, 0) = o.treated_post ? 1.0 : 0.0;
    x(i, 1 + unit.at(o.unit_id)) = 1.0;
    const int t = year.at(o.year);
    if (t > 0) x(i, nu + t) = 1.0;
    y(i) = o.outcome;
  }
  return x.colPivHouseholderQr().solve(y)(0);
}

ErrorCode code_of(auto&& fn) {
  try {
    fn();
  } catch (const Error& e) {
    return e.code();
  }
  return ErrorCode::IoError;
}

}  // namespace

TEST(SyntheticPanel, ShapeMatchesConfig) {
  const auto s = generate_synthetic_panel(DgpConfig{}, 1);
  EXPECT_EQ(s.observations.size(), 10000u);
  EXPECT_EQ(s.opening_year.size(), 50u);
  std::map<int, int> per_year;
  for (const auto& [u, y] : s.opening_year) ++per_year[y];
  EXPECT_EQ(per_year.at(2018), 25);
  EXPECT_EQ(per_year.at(2019), 25);
  EXPECT_EQ(s.observations.front().unit_id, "U000");
  EXPECT_EQ(s.observations.front().year, 2015);
  EXPECT_EQ(s.observations.back().year, 2024);
}

TEST(SyntheticPanel, SameSeedSamePanel) {
  const auto a = generate_synthetic_panel(DgpConfig{}, 42).observations;
  const auto b = generate_synthetic_panel(DgpConfig{}, 42).observations;
  const auto c = generate_synthetic_panel(DgpConfig{}, 43).observations;
  ASSERT_EQ(a.size(), b.size());
  for (std::size_t i = 0; i < a.size(); ++i) {
    ASSERT_EQ(a[i].unit_id, b[i].unit_id);
    ASSERT_EQ(a[i].year, b[i].year);
    ASSERT_EQ(a[i].outcome, b[i].outcome);
    ASSERT_EQ(a[i].treated_post, b[i].treated_post);
    ASSERT_EQ(a[i].distance_km, b[i].distance_km);
    ASSERT_EQ(a[i].modifiers, b[i].modifiers);
  }
  bool differs = false;
  for (std::size_t i = 0; i < a.size() && !differs; ++i) differs = a[i].outcome != c[i].outcome;
  EXPECT_TRUE(differs);
}

TEST(SyntheticPanel, RejectsBadConfig) {
  DgpConfig c;
  c.opening_years = {2015};
  EXPECT_EQ(code_of([&] { generate_synthetic_panel(c, 1); }), ErrorCode::InvalidConfig);
  c = DgpConfig{};
  c.treated_share = 0.0;
  EXPECT_EQ(code_of([&] { generate_synthetic_panel(c, 1); }), ErrorCode::InvalidConfig);
  c = DgpConfig{};
  c.noise_sd = -1;
  EXPECT_THROW(generate_synthetic_panel(c, 1), Error);
}

TEST(SyntheticPanel, ConfigJsonRoundTrip) {
  DgpConfig c;
  c.fade = 0.77;
  c.opening_years = {2017, 2020};
  const nlohmann::json j = c;
  const auto back = j.get<DgpConfig>();
  EXPECT_EQ(nlohmann::json(back), j);
  EXPECT_THROW((nlohmann::json{{"fad", 1.0}}.get<DgpConfig>()), Error);
  EXPECT_THROW((nlohmann::json{{"fade", "slow"}}.get<DgpConfig>()), Error);
}

TEST(Twfe, NoiselessHomogeneousEffectExact) {
  const auto p = generate_synthetic_panel(noiseless(-2.87), 3).observations;
  const auto r = fit_twfe(p);
  EXPECT_NEAR(r.beta, -2.87, 1e-8);
  EXPECT_NEAR(r.se, 0.0, 1e-8);
  EXPECT_EQ(r.n, 10000u);
  EXPECT_EQ(r.n_treated_units, 50u);
}

TEST(Twfe, WithinEqualsDummyVariableRegression) {
  for (std::uint64_t seed = 1; seed <= 10; ++seed) {
    for (auto [n, t] : {std::pair<std::size_t, int>{20, 5}, {25, 6}, {8, 3}}) {
      std::vector<int> open{2016};
      if (t >= 5) open.push_back(2018);
      const auto p = generate_synthetic_panel(small(n, t, open), seed).observations;
      EXPECT_NEAR(fit_twfe(p).beta, lsdv_beta(p), 1e-9) << n << "x" << t;
    }
  }
}

TEST(Twfe, ClusterStandardErrorNonnegative) {
  for (std::uint64_t seed = 1; seed <= 5; ++seed) EXPECT_GE(fit_twfe(generate_synthetic_panel({}, seed).observations).se, 0.0);
}

TEST(Twfe, PlaceboRejectionRate) {
  int rejections = 0;
  const int reps = 200;
  for (int seed = 0; seed < reps; ++seed) {
    DgpConfig c = noiseless(0.0);
    c.noise_sd = 1.55;
    const auto f = fit_twfe(generate_synthetic_panel(c, 7000 + seed).observations);
    if (std::abs(f.beta) / f.se >= 1.96) ++rejections;
  }
  EXPECT_LE(rejections, static_cast<int>(0.07 * reps)) << rejections;
}

TEST(Twfe, Errors) {
  auto p = generate_synthetic_panel(small(10, 4, {2016}), 1).observations;
  auto unbalanced = p;
  unbalanced.pop_back();
  EXPECT_EQ(code_of([&] { fit_twfe(unbalanced); }), ErrorCode::UnbalancedPanel);
  auto dup = p;
  dup.back() = dup.front();
  EXPECT_EQ(code_of([&] { fit_twfe(dup); }), ErrorCode::UnbalancedPanel);
  auto none = p;
  for (auto& o : none) o.treated_post = false;
  EXPECT_EQ(code_of([&] { fit_twfe(none); }), ErrorCode::NoVariationInTreatment);
  auto all = p;
  for (auto& o : all) o.treated_post = o.year >= 2016;
  EXPECT_EQ(code_of([&] { fit_twfe(all); }), ErrorCode::NoVariationInTreatment);
}

TEST(EventStudy, NoiselessPathRecoveredExactly) {
  DgpConfig c = noiseless(0.0);
  c.onset = -2.51;
  c.peak = -3.04;
  c.fade = 0.9;
  const auto es = event_study(generate_synthetic_panel(c, 5).observations);
  EXPECT_EQ(es.coefficients.at(-1).beta, 0.0);
  for (int k = -4; k <= 6; ++k) {
    ASSERT_TRUE(es.coefficients.count(k)) << k;
    EXPECT_NEAR(es.coefficients.at(k).beta, c.path(k), 1e-9) << k;
  }
  EXPECT_NEAR(es.coefficients.at(0).beta, -2.51, 1e-9);
  EXPECT_NEAR(es.coefficients.at(1).beta, -3.04, 1e-9);
}

TEST(EventStudy, EndpointBinsPoolDistantPeriods) {
  DgpConfig c = noiseless(-1.0);
  const auto es = event_study(generate_synthetic_panel(c, 5).observations, {-2, 2, -1});
  // Bin at -2 pools k <= -2 (all zero effect); bin at +2 pools k >= 2.
  EXPECT_NEAR(es.coefficients.at(-2).beta, 0.0, 1e-9);
  EXPECT_NEAR(es.coefficients.at(2).beta, -1.0, 1e-9);
  EXPECT_EQ(es.coefficients.size(), 5u);
}

TEST(EventStudy, InvariantToUnitAndYearConstants) {
  auto p = generate_synthetic_panel({}, 11).observations;
  const auto a = event_study(p);
  for (auto& o : p) o.outcome += 100.0 + 0.25 * (o.year - 2015) + (o.unit_id.back() - '0');
  const auto b = event_study(p);
  for (const auto& [k, coef] : a.coefficients) {
    EXPECT_NEAR(coef.beta, b.coefficients.at(k).beta, 1e-9) << k;
    EXPECT_NEAR(coef.se, b.coefficients.at(k).se, 1e-9) << k;
  }
}

TEST(EventStudy, PrePeriodsCenteredOnZeroWithoutAnticipation) {
  int outside = 0, total = 0;
  for (std::uint64_t seed = 1; seed <= 50; ++seed) {
    const auto es = event_study(generate_synthetic_panel({}, seed).observations);
    for (int k : {-4, -3, -2}) {
      ++total;
      const auto& c = es.coefficients.at(k);
      if (std::abs(c.beta) > 2 * c.se) ++outside;
    }
  }
  EXPECT_LE(outside, static_cast<int>(0.1 * total)) << outside << "/" << total;
}

TEST(EventStudy, Errors) {
  const auto p = generate_synthetic_panel(small(10, 5, {2016}), 1).observations;
  EXPECT_EQ(code_of([&] { event_study(p, {-1, 3, -1}); }), ErrorCode::InsufficientPrePeriods);
  // Treated from the first year on: the reference period is never observed.
  auto q = generate_synthetic_panel(small(10, 5, {2016}), 2);
  for (auto& o : q.observations)
    if (q.opening_year.count(o.unit_id)) o.treated_post = true;
  EXPECT_EQ(code_of([&] { event_study(q.observations); }), ErrorCode::InsufficientPrePeriods);
}

TEST(DistanceBands, ExponentialEffectDeclinesWithDistance) {
  DgpConfig c = noiseless(-3.0);
  c.kappa_dgp = 0.02;
  c.treated_share = 0.2;
  const auto p = generate_synthetic_panel(c, 8).observations;
  const std::vector<DistanceBand> bands{{0, 25}, {25, 50}, {50, 75}, {75, 100}, {100, 200}};
  const auto r = distance_band_effects(p, bands);
  ASSERT_EQ(r.size(), bands.size());
  for (std::size_t b = 1; b < r.size(); ++b) {
    ASSERT_TRUE(r[b].result && r[b - 1].result);
    EXPECT_LT(std::abs(r[b].result->beta), std::abs(r[b - 1].result->beta));
  }
}

TEST(DistanceBands, CoveringBandEqualsTwfe) {
  const auto p = generate_synthetic_panel({}, 4).observations;
  const std::vector<DistanceBand> all{{0, 1e9}};
  const auto r = distance_band_effects(p, all);
  const auto t = fit_twfe(p);
  ASSERT_TRUE(r[0].result);
  EXPECT_DOUBLE_EQ(r[0].result->beta, t.beta);
  EXPECT_DOUBLE_EQ(r[0].result->se, t.se);
}

TEST(DistanceBands, EmptyBandReportedOthersProceed) {
  const auto p = generate_synthetic_panel({}, 4).observations;
  const std::vector<DistanceBand> bands{{0, 100}, {500, 600}, {600, 1e9}};
  const auto r = distance_band_effects(p, bands);
  EXPECT_TRUE(r[0].result.has_value());
  EXPECT_FALSE(r[1].result.has_value());
  EXPECT_NE(r[1].error.find("EmptyBand"), std::string::npos);
  EXPECT_FALSE(r[2].result.has_value());
  const std::vector<DistanceBand> overlapping{{0, 50}, {40, 90}};
  EXPECT_THROW(distance_band_effects(p, overlapping), Error);
}

TEST(InteractionDid, RecoversBaseAndInteraction) {
  int covered_base = 0, covered_int = 0;
  const int reps = 40;
  for (int seed = 0; seed < reps; ++seed) {
    DgpConfig c;
    c.onset = c.peak = 5.87;
    c.fade = 1.0;
    c.kappa_dgp = 0.0;
    c.transit_interaction = -2.98;
    c.treated_share = 0.1;
    const auto r = interaction_did(generate_synthetic_panel(c, 300 + seed).observations, "high_transit");
    if (std::abs(r.beta_post - 5.87) <= 2 * r.se_post) ++covered_base;
    if (std::abs(r.beta_interaction + 2.98) <= 2 * r.se_interaction) ++covered_int;
  }
  EXPECT_GE(covered_base, static_cast<int>(0.85 * reps));
  EXPECT_GE(covered_int, static_cast<int>(0.85 * reps));
}

TEST(InteractionDid, NoiselessExact) {
  DgpConfig c = noiseless(5.87);
  c.transit_interaction = -2.98;
  const auto r = interaction_did(generate_synthetic_panel(c, 1).observations, "high_transit");
  EXPECT_NEAR(r.beta_post, 5.87, 1e-9);
  EXPECT_NEAR(r.beta_interaction, -2.98, 1e-9);
}

TEST(InteractionDid, PlaceboInteraction) {
  int inside = 0;
  const int reps = 40;
  for (int seed = 0; seed < reps; ++seed) {
    const auto r = interaction_did(generate_synthetic_panel({}, 900 + seed).observations, "good_roads");
    if (std::abs(r.beta_interaction) <= 2 * r.se_interaction) ++inside;
  }
  EXPECT_GE(inside, static_cast<int>(0.85 * reps));
}

TEST(InteractionDid, Errors) {
  auto p = generate_synthetic_panel({}, 1).observations;
  EXPECT_EQ(code_of([&] { interaction_did(p, "paved"); }), ErrorCode::ModifierMissing);
  DgpConfig c;
  c.transit_share = 1.0;
  const auto q = generate_synthetic_panel(c, 1).observations;
  EXPECT_EQ(code_of([&] { interaction_did(q, "high_transit"); }), ErrorCode::NoModifierVariation);
}

TEST(FrozenPanel, CommittedDefaultMatchesTargets) {
  std::ifstream in(std::string(DECAYBOUND_SOURCE_DIR) + "/data/did_default.json");
  ASSERT_TRUE(in.good());
  const auto j = nlohmann::json::parse(in);
  const auto cfg = j.at("dgp").get<DgpConfig>();
  const auto p = generate_synthetic_panel(cfg, j.at("seed").get<std::uint64_t>()).observations;
  EXPECT_NEAR(fit_twfe(p).beta, -2.87, 0.3);
  const auto es = event_study(p);
  EXPECT_NEAR(es.coefficients.at(0).beta, -2.51, 0.35);
  EXPECT_NEAR(es.coefficients.at(1).beta, -3.04, 0.35);
}
