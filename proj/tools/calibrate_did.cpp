// Calibrates the default synthetic-panel DGP and picks its frozen seed.
//
//   calibrate_did [--max-seed N] [--out data/did_default.json]
//
// Steps: (1) fade so that noiseless TWFE equals the target average effect;
// (2) noise so that the mean k=0 event-study SE matches its target;
// (3) the first seed whose panel meets the TWFE and event-study tolerances.
// Band estimates of the chosen seed, and the best band fit seen in the scan,
// are printed for reference only.

#include <CLI11.hpp>
#include <json.hpp>

#include <array>
#include <cmath>
#include <fstream>
#include <iostream>

#include "decaybound/panel_did.hpp"
#include "decaybound/serialization.hpp"

using namespace decaybound;

namespace {

constexpr double kTwfeTarget = -2.87;
constexpr double kOnsetTarget = -2.51;
constexpr double kPeakTarget = -3.04;
constexpr double kEventSeTarget = 0.31;
constexpr double kTwfeTol = 0.3;
constexpr double kEventTol = 0.35;
constexpr std::array<DistanceBand, 5> kBands{{{0, 25}, {25, 50}, {50, 75}, {75, 100}, {100, 200}}};
constexpr std::array<double, 5> kBandTargets{-0.92, -1.67, -0.57, -3.30, -2.80};

double noiseless_twfe(DgpConfig c) {
  c.noise_sd = 0.0;
  c.kappa_dgp = 0.0;
  return fit_twfe(generate_synthetic_panel(c, 1).observations).beta;
}

double band_error(const Panel& p) {
  const auto bands = distance_band_effects(p, kBands);
  double worst = 0.0;
  for (std::size_t b = 0; b < bands.size(); ++b) {
    if (!bands[b].result) return std::numeric_limits<double>::infinity();
    worst = std::max(worst, std::abs(bands[b].result->beta - kBandTargets[b]));
  }
  return worst;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Calibrate the default synthetic DiD panel"};
  std::uint64_t max_seed = 5000;
  std::string out = "data/did_default.json";
  app.add_option("--max-seed", max_seed, "Largest seed scanned");
  app.add_option("--out", out, "Output JSON");
  CLI11_PARSE(app, argc, argv);

  DgpConfig cfg;
  cfg.onset = kOnsetTarget;
  cfg.peak = kPeakTarget;
  cfg.anticipation = 0.0;
  cfg.kappa_dgp = 0.002837;

  // (1) Noiseless TWFE is monotone in the fade rate: bisect.
  double lo = 0.5, hi = 1.0;
  for (int it = 0; it < 60; ++it) {
    cfg.fade = 0.5 * (lo + hi);
    (noiseless_twfe(cfg) < kTwfeTarget ? hi : lo) = cfg.fade;
  }
  cfg.fade = std::round(0.5 * (lo + hi) * 1e4) / 1e4;
  std::cout << "fade " << cfg.fade << " -> noiseless TWFE " << noiseless_twfe(cfg) << "\n";

  // (2) Event-study SE scales linearly in the noise level.
  auto mean_se = [&](double sd) {
    DgpConfig c = cfg;
    c.noise_sd = sd;
    double s = 0.0;
    for (std::uint64_t seed = 1; seed <= 20; ++seed)
      s += event_study(generate_synthetic_panel(c, 100000 + seed).observations).coefficients.at(0).se;
    return s / 20.0;
  };
  cfg.noise_sd = std::round(kEventSeTarget / mean_se(1.0) * 100.0) / 100.0;
  std::cout << "noise_sd " << cfg.noise_sd << " -> mean SE(k=0) " << mean_se(cfg.noise_sd) << "\n";

  // (3) Seed scan.
  std::optional<std::uint64_t> chosen;
  std::uint64_t best_band_seed = 0;
  double best_band = std::numeric_limits<double>::infinity();
  for (std::uint64_t seed = 1; seed <= max_seed; ++seed) {
    const auto panel = generate_synthetic_panel(cfg, seed).observations;
    const double be = band_error(panel);
    if (be < best_band) {
      best_band = be;
      best_band_seed = seed;
    }
    if (chosen) continue;
    const auto twfe = fit_twfe(panel);
    const auto es = event_study(panel);
    if (std::abs(twfe.beta - kTwfeTarget) <= kTwfeTol && std::abs(es.coefficients.at(0).beta - kOnsetTarget) <= kEventTol &&
        std::abs(es.coefficients.at(1).beta - kPeakTarget) <= kEventTol)
      chosen = seed;
  }
  if (!chosen) {
    std::cerr << "no seed in [1, " << max_seed << "] meets the tolerances\n";
    return 1;
  }

  const auto panel = generate_synthetic_panel(cfg, *chosen).observations;
  const auto twfe = fit_twfe(panel);
  const auto es = event_study(panel);
  std::cout << "seed " << *chosen << ": TWFE " << twfe.beta << " (" << twfe.se << "), k0 "
            << es.coefficients.at(0).beta << ", k1 " << es.coefficients.at(1).beta << "\n";
  std::cout << "bands at this seed:";
  for (const auto& b : distance_band_effects(panel, kBands))
    std::cout << " " << (b.result ? std::to_string(b.result->beta) : b.error);
  std::cout << "\nbest worst-band error in scan: " << best_band << " at seed " << best_band_seed << "\n";

  nlohmann::json j{{"seed", *chosen}, {"dgp", cfg}};
  std::ofstream(out) << j.dump(2) << "\n";
  std::cout << "wrote " << out << "\n";
  return 0;
}
