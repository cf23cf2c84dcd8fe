/**
 * @file pipeline.hpp
 * @brief Run configuration and the batch pipeline behind the CLI.
 *
 * Stages run in a fixed order (see kStageOrder); a config selects a subset.
 * Every stage adds one key to results.json. When a stage throws, the
 * failure is recorded with the stage name and everything completed so far
 * is still written.
 */
#pragma once

#include <json.hpp>

#include <algorithm>
#include <array>
#include <chrono>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <ctime>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iostream>
#include <map>
#include <optional>
#include <sstream>
#include <string>
#include <string_view>
#include <vector>

#include <unistd.h>

#include "decaybound/decay_models.hpp"
#include "decaybound/error.hpp"
#include "decaybound/estimation.hpp"
#include "decaybound/functionals.hpp"
#include "decaybound/io.hpp"
#include "decaybound/panel_did.hpp"
#include "decaybound/pde_lab.hpp"
#include "decaybound/serialization.hpp"

namespace decaybound {

inline constexpr std::string_view kToolVersion = "0.1.0";

inline constexpr std::array<std::string_view, 10> kStageOrder{
    "distances", "fit", "compare", "boundary", "functionals", "diagnose", "heterogeneity", "decay_curve", "pde", "did"};

struct PdeScenario {
  int dim = 1;
  std::size_t cells = 2001;  // per axis
  double spacing_km = 0.5;
  double diffusion_d = 100.0;
  double decay_kappa = 1.0;
  double strength = 1.0;
  double dt_fraction = 0.9;  // of the stability bound
  double closure_years = 2.0;
  BoundaryCondition boundary = BoundaryCondition::ZeroFlux;
};

struct DidScenario {
  std::string dgp_file;  // JSON holding a DGP object, or {"dgp": {...}}
  DgpConfig dgp;
  std::vector<DistanceBand> bands{{0, 25}, {25, 50}, {50, 75}, {75, 100}, {100, 200}};
  std::vector<std::string> modifiers{"high_transit", "good_roads"};
  EventWindow window{};
};

struct RunConfig {
  std::string units_csv;
  std::string sources_csv;
  std::string panel_csv;
  std::string outcome = "ACCESS2";
  std::vector<DecayModelKind> models{kAllDecayModels.begin(), kAllDecayModels.end()};
  std::vector<std::string> stages{"distances", "fit", "compare", "boundary", "functionals", "diagnose",
                                  "heterogeneity", "decay_curve"};
  double epsilon = ThresholdSpec::kDefaultEpsilon;
  bool hac_enabled = true;
  HacConfig hac{};
  std::vector<SplitRule> heterogeneity{elderly_split(), education_split(), female_split()};
  std::size_t min_stratum = 30;
  std::vector<double> functional_times_years{1.0, 4.0, 9.0};
  double gradient_distance_km = 10.0;
  double exposure_horizon_years = 10.0;
  double domain_span_km = VerdictConfig{}.domain_span_km;
  std::size_t curve_bins = 25;
  PdeScenario pde{};
  DidScenario did{};
  std::string output_dir = "decaybound_out";
  std::uint64_t seed = 1;
  bool strict_ingest = false;

  /// Relative paths resolve against this directory (not serialized).
  std::filesystem::path base_dir;

  bool has_stage(std::string_view s) const { return std::find(stages.begin(), stages.end(), s) != stages.end(); }

  bool needs_units() const {
    for (auto s : {"distances", "fit", "compare", "boundary", "functionals", "diagnose", "heterogeneity",
                   "decay_curve"})
      if (has_stage(s)) return true;
    return false;
  }

  std::filesystem::path resolve(const std::string& p) const {
    if (p.empty()) return {};
    std::filesystem::path path(p);
    return path.is_relative() && !base_dir.empty() ? base_dir / path : path;
  }

  FitOptions fit_options() const {
    FitOptions o;
    o.hac = hac_enabled ? std::optional<HacConfig>(hac) : std::nullopt;
    return o;
  }

  void validate() const {
    auto bad = [](const std::string& m) { throw Error(ErrorCode::InvalidConfig, m); };
    if (!(epsilon > 0.0 && epsilon < 1.0)) bad("epsilon must lie in (0, 1)");
    if (models.empty()) bad("no models selected");
    for (const auto& s : stages)
      if (std::find(kStageOrder.begin(), kStageOrder.end(), s) == kStageOrder.end()) bad("unknown stage '" + s + "'");
    if (stages.empty()) bad("no stages selected");
    if (has_stage("compare")) {
      auto m = models;
      std::sort(m.begin(), m.end());
      if (std::unique(m.begin(), m.end()) - m.begin() < 2) bad("stage 'compare' needs at least two models");
    }
    if (needs_units() && units_csv.empty()) bad("units_csv is required by the selected stages");
    if (needs_units() && outcome.empty()) bad("outcome column name is empty");
    if (hac_enabled && !(hac.cutoff_km > 0.0)) bad("hac cutoff_km must be > 0");
    if (curve_bins < 2) bad("curve_bins must be >= 2");
    if (min_stratum < 3) bad("min_stratum must be >= 3");
    for (double t : functional_times_years)
      if (!(t > 0.0)) bad("functional times must be > 0");
    if (!(gradient_distance_km >= 0.0)) bad("gradient_distance_km must be >= 0");
    if (!(exposure_horizon_years > 0.0)) bad("exposure_horizon_years must be > 0");
    if (!(domain_span_km > 0.0)) bad("domain_span_km must be > 0");
    for (const auto& r : heterogeneity)
      if (r.covariate.empty() || !(r.high_min >= r.low_max)) bad("heterogeneity rule '" + r.name + "' is malformed");
    if (has_stage("pde")) {
      if (pde.dim != 1 && pde.dim != 2) bad("pde.dim must be 1 or 2");
      if (pde.cells < 7) bad("pde.cells must be >= 7");
      if (!(pde.spacing_km > 0.0) || !(pde.diffusion_d > 0.0) || !(pde.decay_kappa > 0.0))
        bad("pde spacing, diffusion and decay must be > 0");
      if (!(pde.dt_fraction > 0.0)) bad("pde.dt_fraction must be > 0");
      if (!(pde.closure_years > 0.0)) bad("pde.closure_years must be > 0");
    }
    if (has_stage("did")) did.dgp.validate();
    if (output_dir.empty()) bad("output_dir is empty");
  }
};

// ---------------------------------------------------------------------------
// JSON

namespace detail {

inline void check_keys(const nlohmann::json& j, std::initializer_list<std::string_view> allowed,
                       const std::string& where) {
  if (!j.is_object()) throw Error(ErrorCode::InvalidConfig, where + " must be a JSON object");
  for (const auto& [key, value] : j.items())
    if (std::find(allowed.begin(), allowed.end(), key) == allowed.end())
      throw Error(ErrorCode::InvalidConfig, "unknown key '" + key + "' in " + where, {key});
}

template <typename T>
void read_key(const nlohmann::json& j, const char* key, T& field, const std::string& where) {
  if (!j.contains(key)) return;
  try {
    j.at(key).get_to(field);
  } catch (const nlohmann::json::exception& e) {
    throw Error(ErrorCode::InvalidConfig, "bad value for '" + std::string(key) + "' in " + where + ": " + e.what(),
                {key});
  }
}

inline HacKernel parse_kernel(const std::string& s) {
  if (s == "Bartlett" || s == "bartlett") return HacKernel::Bartlett;
  if (s == "Uniform" || s == "uniform") return HacKernel::Uniform;
  throw Error(ErrorCode::InvalidConfig, "unknown HAC kernel '" + s + "'", {s});
}

inline BoundaryCondition parse_boundary(const std::string& s) {
  if (s == "zero_flux" || s == "ZeroFlux") return BoundaryCondition::ZeroFlux;
  if (s == "absorbing" || s == "Absorbing") return BoundaryCondition::Absorbing;
  throw Error(ErrorCode::InvalidConfig, "unknown boundary condition '" + s + "'", {s});
}

inline std::string boundary_name(BoundaryCondition b) {
  return b == BoundaryCondition::ZeroFlux ? "zero_flux" : "absorbing";
}

inline DecayModelKind parse_model_or_throw(const std::string& s) {
  if (auto k = parse_decay_model(s)) return *k;
  throw Error(ErrorCode::InvalidConfig, "unknown model '" + s + "'", {s});
}

inline SplitRule parse_rule(const nlohmann::json& j) {
  if (j.is_string()) {
    if (auto r = builtin_split(j.get<std::string>())) return *r;
    throw Error(ErrorCode::InvalidConfig, "unknown heterogeneity rule '" + j.get<std::string>() + "'");
  }
  check_keys(j, {"name", "covariate", "high_min", "low_max", "high_label", "low_label"}, "heterogeneity rule");
  SplitRule r;
  read_key(j, "name", r.name, "heterogeneity rule");
  read_key(j, "covariate", r.covariate, "heterogeneity rule");
  read_key(j, "high_min", r.high_min, "heterogeneity rule");
  read_key(j, "low_max", r.low_max, "heterogeneity rule");
  read_key(j, "high_label", r.high_label, "heterogeneity rule");
  read_key(j, "low_label", r.low_label, "heterogeneity rule");
  if (r.name.empty()) r.name = r.covariate;
  return r;
}

}  // namespace detail

inline void to_json(nlohmann::json& j, const SplitRule& r) {
  j = {{"name", r.name},         {"covariate", r.covariate},   {"high_min", r.high_min},
       {"low_max", r.low_max},   {"high_label", r.high_label}, {"low_label", r.low_label}};
}

inline void to_json(nlohmann::json& j, const RunConfig& c) {
  std::vector<std::string> models;
  for (auto k : c.models) models.emplace_back(to_string(k));
  nlohmann::json bands = nlohmann::json::array();
  for (const auto& b : c.did.bands) bands.push_back({b.lo_km, b.hi_km});
  j = {{"units_csv", c.units_csv},
       {"sources_csv", c.sources_csv},
       {"panel_csv", c.panel_csv},
       {"outcome", c.outcome},
       {"models", models},
       {"stages", c.stages},
       {"epsilon", c.epsilon},
       {"hac", {{"enabled", c.hac_enabled}, {"cutoff_km", c.hac.cutoff_km}, {"kernel", to_string(c.hac.kernel)}}},
       {"heterogeneity", c.heterogeneity},
       {"min_stratum", c.min_stratum},
       {"functional_times_years", c.functional_times_years},
       {"gradient_distance_km", c.gradient_distance_km},
       {"exposure_horizon_years", c.exposure_horizon_years},
       {"domain_span_km", c.domain_span_km},
       {"curve_bins", c.curve_bins},
       {"pde",
        {{"dim", c.pde.dim},
         {"cells", c.pde.cells},
         {"spacing_km", c.pde.spacing_km},
         {"diffusion_d", c.pde.diffusion_d},
         {"decay_kappa", c.pde.decay_kappa},
         {"strength", c.pde.strength},
         {"dt_fraction", c.pde.dt_fraction},
         {"closure_years", c.pde.closure_years},
         {"boundary", detail::boundary_name(c.pde.boundary)}}},
       {"did",
        {{"dgp_file", c.did.dgp_file},
         {"dgp", c.did.dgp},
         {"bands", bands},
         {"modifiers", c.did.modifiers},
         {"event_window", {c.did.window.min_k, c.did.window.max_k}}}},
       {"output_dir", c.output_dir},
       {"seed", c.seed},
       {"strict_ingest", c.strict_ingest}};
}

/// Overlays the keys present in `j` onto `c`; unknown keys are rejected.
inline void apply_config_json(const nlohmann::json& j, RunConfig& c) {
  using detail::read_key;
  const std::string top = "run config";
  detail::check_keys(j,
                     {"units_csv", "sources_csv", "panel_csv", "outcome", "models", "stages", "epsilon", "hac",
                      "heterogeneity", "min_stratum", "functional_times_years", "gradient_distance_km",
                      "exposure_horizon_years", "domain_span_km", "curve_bins", "pde", "did", "output_dir", "seed",
                      "strict_ingest"},
                     top);
  read_key(j, "units_csv", c.units_csv, top);
  read_key(j, "sources_csv", c.sources_csv, top);
  read_key(j, "panel_csv", c.panel_csv, top);
  read_key(j, "outcome", c.outcome, top);
  if (j.contains("models")) {
    std::vector<std::string> names;
    read_key(j, "models", names, top);
    c.models.clear();
    for (const auto& n : names) c.models.push_back(detail::parse_model_or_throw(n));
  }
  read_key(j, "stages", c.stages, top);
  read_key(j, "epsilon", c.epsilon, top);
  if (j.contains("hac")) {
    const auto& h = j.at("hac");
    detail::check_keys(h, {"enabled", "cutoff_km", "kernel"}, "hac");
    read_key(h, "enabled", c.hac_enabled, "hac");
    read_key(h, "cutoff_km", c.hac.cutoff_km, "hac");
    if (h.contains("kernel")) {
      std::string k;
      read_key(h, "kernel", k, "hac");
      c.hac.kernel = detail::parse_kernel(k);
    }
  }
  if (j.contains("heterogeneity")) {
    const auto& h = j.at("heterogeneity");
    if (!h.is_array()) throw Error(ErrorCode::InvalidConfig, "heterogeneity must be an array");
    c.heterogeneity.clear();
    for (const auto& r : h) c.heterogeneity.push_back(detail::parse_rule(r));
  }
  read_key(j, "min_stratum", c.min_stratum, top);
  read_key(j, "functional_times_years", c.functional_times_years, top);
  read_key(j, "gradient_distance_km", c.gradient_distance_km, top);
  read_key(j, "exposure_horizon_years", c.exposure_horizon_years, top);
  read_key(j, "domain_span_km", c.domain_span_km, top);
  read_key(j, "curve_bins", c.curve_bins, top);
  if (j.contains("pde")) {
    const auto& p = j.at("pde");
    detail::check_keys(p,
                       {"dim", "cells", "spacing_km", "diffusion_d", "decay_kappa", "strength", "dt_fraction",
                        "closure_years", "boundary"},
                       "pde");
    read_key(p, "dim", c.pde.dim, "pde");
    read_key(p, "cells", c.pde.cells, "pde");
    read_key(p, "spacing_km", c.pde.spacing_km, "pde");
    read_key(p, "diffusion_d", c.pde.diffusion_d, "pde");
    read_key(p, "decay_kappa", c.pde.decay_kappa, "pde");
    read_key(p, "strength", c.pde.strength, "pde");
    read_key(p, "dt_fraction", c.pde.dt_fraction, "pde");
    read_key(p, "closure_years", c.pde.closure_years, "pde");
    if (p.contains("boundary")) {
      std::string b;
      read_key(p, "boundary", b, "pde");
      c.pde.boundary = detail::parse_boundary(b);
    }
  }
  if (j.contains("did")) {
    const auto& d = j.at("did");
    detail::check_keys(d, {"dgp_file", "dgp", "bands", "modifiers", "event_window"}, "did");
    read_key(d, "dgp_file", c.did.dgp_file, "did");
    if (d.contains("dgp")) from_json(d.at("dgp"), c.did.dgp);
    if (d.contains("bands")) {
      std::vector<std::array<double, 2>> bands;
      read_key(d, "bands", bands, "did");
      c.did.bands.clear();
      for (const auto& b : bands) c.did.bands.push_back({b[0], b[1]});
    }
    read_key(d, "modifiers", c.did.modifiers, "did");
    if (d.contains("event_window")) {
      std::array<int, 2> w{};
      read_key(d, "event_window", w, "did");
      c.did.window.min_k = w[0];
      c.did.window.max_k = w[1];
    }
  }
  read_key(j, "output_dir", c.output_dir, top);
  read_key(j, "seed", c.seed, top);
  read_key(j, "strict_ingest", c.strict_ingest, top);
}

/// Reads a config file; relative paths inside it resolve against its directory.
inline RunConfig load_run_config(const std::filesystem::path& path, RunConfig base = {}) {
  std::ifstream in(path);
  if (!in) throw Error(ErrorCode::InvalidConfig, "cannot open config '" + path.string() + "'", {path.string()});
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(in);
  } catch (const nlohmann::json::exception& e) {
    throw Error(ErrorCode::InvalidConfig, "config '" + path.string() + "' is not valid JSON: " + e.what());
  }
  apply_config_json(j, base);
  base.base_dir = path.has_parent_path() ? path.parent_path() : std::filesystem::path(".");
  return base;
}

/// DGP file: either a bare DGP object or {"seed": ..., "dgp": {...}}.
struct DgpFile {
  DgpConfig dgp;
  std::optional<std::uint64_t> seed;
};

inline DgpFile load_dgp_file(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw Error(ErrorCode::InvalidConfig, "cannot open DGP file '" + path.string() + "'", {path.string()});
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(in);
  } catch (const nlohmann::json::exception& e) {
    throw Error(ErrorCode::InvalidConfig, "DGP file '" + path.string() + "' is not valid JSON: " + e.what());
  }
  DgpFile out;
  if (j.contains("dgp")) {
    detail::check_keys(j, {"dgp", "seed", "calibration"}, "DGP file");
    from_json(j.at("dgp"), out.dgp);
    if (j.contains("seed")) out.seed = j.at("seed").get<std::uint64_t>();
  } else {
    from_json(j, out.dgp);
  }
  return out;
}

// ---------------------------------------------------------------------------
// Hashing and small file helpers

inline std::uint64_t fnv1a64(std::string_view bytes) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char ch : bytes) {
    h ^= ch;
    h *= 0x100000001b3ULL;
  }
  return h;
}

inline std::string hex64(std::uint64_t v) {
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(v));
  return buf;
}

inline std::string config_hash(const RunConfig& c) { return hex64(fnv1a64(nlohmann::json(c).dump())); }

inline std::string read_file(const std::filesystem::path& p) {
  std::ifstream in(p, std::ios::binary);
  if (!in) throw Error(ErrorCode::IoError, "cannot open '" + p.string() + "'", {p.string()});
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

inline void write_file(const std::filesystem::path& p, const std::string& content) {
  std::ofstream out(p, std::ios::binary | std::ios::trunc);
  if (!out) throw Error(ErrorCode::IoError, "cannot write '" + p.string() + "'", {p.string()});
  out << content;
  if (!out) throw Error(ErrorCode::IoError, "write failed for '" + p.string() + "'", {p.string()});
}

inline std::string utc_timestamp() {
  const std::time_t now = std::chrono::system_clock::to_time_t(std::chrono::system_clock::now());
  std::tm tm{};
  gmtime_r(&now, &tm);
  char buf[32];
  std::strftime(buf, sizeof buf, "%Y-%m-%dT%H:%M:%SZ", &tm);
  return buf;
}

/// Exclusive lock on an output directory, released on destruction.
class OutputLock {
 public:
  explicit OutputLock(const std::filesystem::path& dir) : path_(dir / ".decaybound.lock") {
    std::error_code ec;
    std::filesystem::create_directories(dir, ec);
    if (ec) throw Error(ErrorCode::IoError, "cannot create output directory '" + dir.string() + "'", {dir.string()});
    std::FILE* f = std::fopen(path_.c_str(), "wx");
    if (!f)
      throw Error(ErrorCode::IoError,
                  "output directory '" + dir.string() + "' is locked by another run (remove " + path_.string() +
                      " if stale)",
                  {path_.string()});
    std::fprintf(f, "%ld\n", static_cast<long>(::getpid()));
    std::fclose(f);
  }
  ~OutputLock() {
    std::error_code ec;
    std::filesystem::remove(path_, ec);
  }
  OutputLock(const OutputLock&) = delete;
  OutputLock& operator=(const OutputLock&) = delete;

 private:
  std::filesystem::path path_;
};

// ---------------------------------------------------------------------------
// Stages

/**
 * Lazily loaded inputs and cached fits shared by the stages. The CLI
 * subcommands drive single stages through this class as well.
 */
class PipelineState {
 public:
  explicit PipelineState(RunConfig cfg) : cfg_(std::move(cfg)) {}

  const RunConfig& config() const { return cfg_; }

  const Sample& sample() {
    if (!units_) load_units();
    return units_->sample;
  }

  const IngestReport& ingest_report() {
    if (!units_) load_units();
    return units_->report;
  }

  std::vector<std::filesystem::path> input_files() const {
    std::vector<std::filesystem::path> out;
    for (const auto* p : {&cfg_.units_csv, &cfg_.sources_csv, &cfg_.panel_csv, &cfg_.did.dgp_file})
      if (!p->empty()) out.push_back(cfg_.resolve(*p));
    return out;
  }

  /// Fit of one family on the sample; log families see distances clamped to the floor.
  const FitResult& fit_for(DecayModelKind kind) {
    if (auto it = fits_.find(kind); it != fits_.end()) return it->second;
    Sample s = sample();
    if (uses_log_distance(kind))
      for (auto& r : s.rows) r.distance_km = std::max(r.distance_km, kDistanceFloorKm);
    return fits_.emplace(kind, fit_nls(s, kind, std::nullopt, cfg_.fit_options())).first->second;
  }

  nlohmann::json ingest_json() {
    const auto& rep = ingest_report();
    nlohmann::json dropped = nlohmann::json::array();
    for (const auto& d : rep.dropped) dropped.push_back({{"line", d.line}, {"unit_id", d.unit_id}, {"reason", d.reason}});
    return {{"rows_read", rep.rows_read},
            {"rows_kept", rep.rows_kept},
            {"missing_outcome", rep.missing_outcome},
            {"dropped", dropped},
            {"outcome", cfg_.outcome},
            {"distance_source", sources_loaded_ ? "nearest_source" : "distance_km_column"}};
  }

  nlohmann::json run_distances(std::string* csv = nullptr) {
    const auto& s = sample();
    std::vector<double> d;
    d.reserve(s.size());
    for (const auto& r : s.rows) d.push_back(r.distance_km);
    std::sort(d.begin(), d.end());
    const std::size_t n = d.size();
    const double median = n % 2 ? d[n / 2] : 0.5 * (d[n / 2 - 1] + d[n / 2]);
    double mean = 0.0;
    for (double v : d) mean += v;
    mean /= static_cast<double>(n);
    if (csv) {
      std::ostringstream os;
      write_distance_table_csv(os, distance_table_);
      *csv = os.str();
    }
    return {{"n", n},
            {"n_sources", n_sources_},
            {"min_km", d.front()},
            {"median_km", median},
            {"mean_km", mean},
            {"max_km", d.back()}};
  }

  nlohmann::json run_fits(std::string* residuals_csv = nullptr) {
    nlohmann::json out = nlohmann::json::array();
    std::vector<DecayModelKind> kinds;
    for (auto k : cfg_.models)
      if (std::find(kinds.begin(), kinds.end(), k) == kinds.end()) kinds.push_back(k);
    for (auto k : kinds) out.push_back(fit_for(k));
    if (residuals_csv) {
      std::ostringstream os;
      os << "unit_id,distance_km,outcome";
      for (auto k : kinds) os << ",residual_" << to_string(k);
      os << '\n';
      const auto& s = sample();
      for (std::size_t i = 0; i < s.size(); ++i) {
        os << csv_field(s.rows[i].unit_id) << ',' << format_number(s.rows[i].distance_km) << ','
           << format_number(s.rows[i].outcome);
        for (auto k : kinds) os << ',' << format_number(fits_.at(k).residuals[i]);
        os << '\n';
      }
      *residuals_csv = os.str();
    }
    return out;
  }

  nlohmann::json run_compare(std::string* comparison_csv = nullptr) {
    const auto cmp = compare_models(sample(), cfg_.models, cfg_.fit_options());
    if (comparison_csv) {
      std::vector<std::pair<double, DecayModelKind>> order;
      for (const auto& [k, f] : cmp.fits) order.emplace_back(f.aic, k);
      std::sort(order.begin(), order.end());
      std::ostringstream os;
      os << "rank,model,q,se_q,rate,se_rate,r2,rmse,loglik,aic,bic,delta_aic,in_tie_set,best\n";
      int rank = 1;
      for (const auto& [aic, k] : order) {
        const auto& f = cmp.fits.at(k);
        const bool tie = std::find(cmp.tie_set.begin(), cmp.tie_set.end(), k) != cmp.tie_set.end();
        os << rank++ << ',' << to_string(k) << ',' << format_number(f.params.q) << ',' << format_number(f.se[0])
           << ',' << format_number(f.params.rate) << ',' << format_number(f.se[1]) << ',' << format_number(f.r2)
           << ',' << format_number(f.rmse) << ',' << format_number(f.loglik) << ',' << format_number(f.aic) << ','
           << format_number(f.bic) << ',' << format_number(cmp.delta_aic.at(k)) << ',' << (tie ? 1 : 0) << ','
           << (k == cmp.best ? 1 : 0) << '\n';
      }
      *comparison_csv = os.str();
    }
    return cmp;
  }

  nlohmann::json run_boundary() {
    return spatial_boundary(fit_for(DecayModelKind::Exponential), ThresholdSpec(cfg_.epsilon));
  }

  nlohmann::json run_functionals() {
    const auto& fit = fit_for(DecayModelKind::Exponential);
    const ThresholdSpec eps(cfg_.epsilon);
    const auto ds = implied_diffusion(fit, eps);
    nlohmann::json j = ds;
    nlohmann::json dyn = nlohmann::json::array();
    for (double t : cfg_.functional_times_years)
      dyn.push_back({{"t_years", t},
                     {"d_star_km", boundary_evolution(ds, t)},
                     {"velocity_km_per_year", boundary_velocity(ds, t)}});
    j["dynamics"] = dyn;
    const double d = cfg_.gradient_distance_km;
    j["gradient"] = {{"distance_km", d}, {"magnitude", spatial_gradient_magnitude(fit.params, d)}};
    j["exposure"] = {{"distance_km", d},
                     {"horizon_years", cfg_.exposure_horizon_years},
                     {"phi", cumulative_exposure(fit, ExposureSpec(cfg_.exposure_horizon_years), d)}};
    return j;
  }

  nlohmann::json run_diagnose() {
    VerdictConfig vc;
    vc.epsilon = cfg_.epsilon;
    vc.domain_span_km = cfg_.domain_span_km;
    return sign_reversal_test(fit_for(DecayModelKind::Exponential), vc);
  }

  nlohmann::json run_heterogeneity() {
    StratifyOptions opt;
    opt.min_stratum = cfg_.min_stratum;
    opt.fit = cfg_.fit_options();
    nlohmann::json out = nlohmann::json::array();
    for (const auto& rule : cfg_.heterogeneity) out.push_back(stratified_fit(sample(), rule, opt));
    return out;
  }

  /// Equal-count distance bins with mean outcome, 95% CI and each model's fitted value at the bin mean.
  nlohmann::json run_decay_curve(std::string* csv = nullptr) {
    const auto& s = sample();
    std::vector<std::size_t> idx(s.size());
    for (std::size_t i = 0; i < idx.size(); ++i) idx[i] = i;
    std::stable_sort(idx.begin(), idx.end(),
                     [&](std::size_t a, std::size_t b) { return s.rows[a].distance_km < s.rows[b].distance_km; });
    std::vector<DecayModelKind> kinds;
    for (auto k : cfg_.models)
      if (std::find(kinds.begin(), kinds.end(), k) == kinds.end()) kinds.push_back(k);
    for (auto k : kinds) fit_for(k);

    const std::size_t bins = std::min(cfg_.curve_bins, s.size());
    std::ostringstream os;
    os << "bin,d_lo_km,d_hi_km,d_mean_km,n,mean_outcome,se,ci_lo,ci_hi";
    for (auto k : kinds) os << ",fitted_" << to_string(k);
    os << '\n';
    for (std::size_t b = 0; b < bins; ++b) {
      const std::size_t lo = b * s.size() / bins;
      const std::size_t hi = (b + 1) * s.size() / bins;
      double sd = 0.0, sy = 0.0, syy = 0.0;
      for (std::size_t i = lo; i < hi; ++i) {
        const auto& r = s.rows[idx[i]];
        sd += r.distance_km;
        sy += r.outcome;
      }
      const double n = static_cast<double>(hi - lo);
      const double dm = sd / n, ym = sy / n;
      for (std::size_t i = lo; i < hi; ++i) syy += std::pow(s.rows[idx[i]].outcome - ym, 2);
      const double se = n > 1 ? std::sqrt(syy / (n - 1.0) / n) : 0.0;
      os << b << ',' << format_number(s.rows[idx[lo]].distance_km) << ','
         << format_number(s.rows[idx[hi - 1]].distance_km) << ',' << format_number(dm) << ',' << (hi - lo) << ','
         << format_number(ym) << ',' << format_number(se) << ',' << format_number(ym - kZ95 * se) << ','
         << format_number(ym + kZ95 * se);
      for (auto k : kinds) {
        const double d = uses_log_distance(k) ? std::max(dm, kDistanceFloorKm) : dm;
        os << ',' << format_number(predict(fits_.at(k).params, d));
      }
      os << '\n';
    }
    if (csv) *csv = os.str();
    std::vector<std::string> names;
    for (auto k : kinds) names.emplace_back(to_string(k));
    return {{"bins", bins}, {"models", names}, {"file", "decay_curve.csv"}};
  }

  /// Steady state of one central point source, κ_eff recovery, Green's-function check and closure.
  nlohmann::json run_pde(std::string* field_csv = nullptr) {
    const auto& sc = cfg_.pde;
    FieldGrid grid = sc.dim == 1 ? FieldGrid::line(sc.cells, sc.spacing_km)
                                 : FieldGrid::plane(sc.cells, sc.cells, sc.spacing_km);
    const double centre = grid.coord((sc.cells - 1) / 2);
    PdeParams p;
    p.diffusion_d = sc.diffusion_d;
    p.decay_kappa = sc.decay_kappa;
    p.sources.push_back(PointSource{{centre, sc.dim == 2 ? centre : 0.0}, sc.strength});
    const double dt = sc.dt_fraction * max_stable_dt(grid, p);
    const auto steady = solve_steady_state(grid, p, dt, sc.boundary);
    const std::array<double, 2> pos{centre, sc.dim == 2 ? centre : 0.0};
    const auto keff = recover_kappa_eff(steady, pos);

    double max_rel = 0.0;
    const auto ny = sc.dim == 2 ? sc.cells : std::size_t{1};
    for (std::size_t iy = 0; iy < ny; ++iy) {
      for (std::size_t ix = 0; ix < sc.cells; ++ix) {
        const double r = std::hypot(steady.coord(ix) - pos[0], sc.dim == 2 ? steady.coord(iy) - pos[1] : 0.0);
        if (r < keff.window_lo_km || r > keff.window_hi_km) continue;
        const double g = steady_state_green(p, r, sc.dim);
        max_rel = std::max(max_rel, std::abs(steady.values[steady.index(ix, iy)] - g) / g);
      }
    }
    const auto closure = closure_decay(steady, p, {dt, sc.closure_years, sc.boundary, 0});

    if (field_csv) {
      std::ostringstream os;
      os << (sc.dim == 1 ? "x_km,u\n" : "x_km,y_km,u\n");
      for (std::size_t iy = 0; iy < ny; ++iy)
        for (std::size_t ix = 0; ix < sc.cells; ++ix) {
          os << format_number(steady.coord(ix)) << ',';
          if (sc.dim == 2) os << format_number(steady.coord(iy)) << ',';
          os << format_number(steady.values[steady.index(ix, iy)]) << '\n';
        }
      *field_csv = os.str();
    }
    return {{"dim", sc.dim},
            {"cells_per_axis", sc.cells},
            {"spacing_km", sc.spacing_km},
            {"diffusion_d", sc.diffusion_d},
            {"decay_kappa", sc.decay_kappa},
            {"boundary", detail::boundary_name(sc.boundary)},
            {"dt_years", dt},
            {"steady_state_time_years", steady.time_years},
            {"kappa_eff_theory", std::sqrt(sc.decay_kappa / sc.diffusion_d)},
            {"kappa_eff", keff},
            {"half_distance_km", half_distance(keff.kappa_eff)},
            {"green_max_rel_error", max_rel},
            {"closure", {{"years", sc.closure_years}, {"mass_trend", closure.mass_trend}, {"expected_slope", -sc.decay_kappa}}}};
  }

  nlohmann::json run_did() {
    Panel panel;
    nlohmann::json source;
    if (!cfg_.panel_csv.empty()) {
      panel = ingest_panel(cfg_.resolve(cfg_.panel_csv).string());
      source = {{"panel_csv", cfg_.panel_csv}};
    } else {
      DgpConfig dgp = cfg_.did.dgp;
      if (!cfg_.did.dgp_file.empty()) dgp = load_dgp_file(cfg_.resolve(cfg_.did.dgp_file)).dgp;
      panel = generate_synthetic_panel(dgp, cfg_.seed).observations;
      source = {{"dgp", dgp}, {"seed", cfg_.seed}};
    }
    nlohmann::json j;
    j["source"] = source;
    j["twfe"] = fit_twfe(panel);
    j["event_study"] = event_study(panel, cfg_.did.window);
    j["distance_bands"] = distance_band_effects(panel, cfg_.did.bands);
    auto& inter = j["interactions"] = nlohmann::json::object();
    for (const auto& m : cfg_.did.modifiers) inter[m] = interaction_did(panel, m);
    return j;
  }

 private:
  void load_units() {
    UnitsData u = ingest_units(cfg_.resolve(cfg_.units_csv).string(), cfg_.outcome, {cfg_.strict_ingest});
    if (!cfg_.sources_csv.empty()) {
      const auto sources = ingest_sources(cfg_.resolve(cfg_.sources_csv).string());
      std::vector<UnitLocation> locs;
      locs.reserve(u.sample.size());
      for (const auto& r : u.sample.rows) locs.push_back({r.unit_id, r.location});
      distance_table_ = build_distance_table(locs, sources);
      for (std::size_t i = 0; i < u.sample.size(); ++i) u.sample.rows[i].distance_km = distance_table_[i].distance_km;
      n_sources_ = sources.size();
      sources_loaded_ = true;
    } else if (!u.has_distance) {
      throw Error(ErrorCode::InvalidConfig, "units CSV has no distance_km column and no sources_csv was given");
    } else {
      for (const auto& r : u.sample.rows) distance_table_.push_back({r.unit_id, r.distance_km, ""});
    }
    if (u.sample.empty()) throw Error(ErrorCode::EmptyFile, "no usable unit rows after ingestion");
    units_ = std::move(u);
  }

  RunConfig cfg_;
  std::optional<UnitsData> units_;
  std::vector<DistanceRecord> distance_table_;
  std::size_t n_sources_ = 0;
  bool sources_loaded_ = false;
  std::map<DecayModelKind, FitResult> fits_;
};

// ---------------------------------------------------------------------------
// Driver

struct StageFailure {
  std::string stage;
  ErrorCode code{};
  std::string message;
};

struct PipelineReport {
  std::filesystem::path output_dir;
  std::vector<std::string> completed;
  std::optional<StageFailure> failure;
  nlohmann::json results;

  bool ok() const { return !failure.has_value(); }
};

/// 0 success, 2 configuration, 3 data, 4 estimation.
inline int exit_code_for(ErrorCode c) {
  switch (category_of(c)) {
    case ErrorCategory::Config: return 2;
    case ErrorCategory::Data: return 3;
    case ErrorCategory::Estimation: return 4;
  }
  return 3;
}

inline int exit_code_for(const PipelineReport& r) { return r.ok() ? 0 : exit_code_for(r.failure->code); }

/// Progress sink; level 1 is stage progress, level 2 detail.
using PipelineLog = std::function<void(int level, const std::string& message)>;

/**
 * Runs the enabled stages in canonical order and writes results.json,
 * manifest.json and the per-stage CSVs into the output directory. Invalid
 * configuration and a held lock throw; stage errors are returned in the
 * report after the partial bundle is written.
 */
inline PipelineReport run_pipeline(const RunConfig& cfg, const PipelineLog& log = {}) {
  cfg.validate();
  auto say = [&](int level, const std::string& m) {
    if (log) log(level, m);
  };
  PipelineReport rep;
  rep.output_dir = cfg.resolve(cfg.output_dir);
  OutputLock lock(rep.output_dir);
  PipelineState st(cfg);

  const std::string hash = config_hash(cfg);
  auto& res = rep.results;
  res["tool_version"] = kToolVersion;
  res["config_hash"] = hash;
  res["seed"] = cfg.seed;
  std::vector<std::string> outputs{"results.json", "manifest.json"};
  auto emit = [&](const std::string& name, const std::string& content) {
    write_file(rep.output_dir / name, content);
    outputs.push_back(name);
  };

  std::string stage = "ingest";
  try {
    if (cfg.needs_units()) {
      say(1, "stage ingest");
      st.sample();
      res["ingest"] = st.ingest_json();
      say(2, "kept " + std::to_string(st.ingest_report().rows_kept) + " of " +
                 std::to_string(st.ingest_report().rows_read) + " rows");
    }
    for (auto name : kStageOrder) {
      stage = std::string(name);
      if (!cfg.has_stage(stage)) continue;
      say(1, "stage " + stage);
      std::string csv;
      if (stage == "distances") {
        res["distances"] = st.run_distances(&csv);
        emit("distances.csv", csv);
      } else if (stage == "fit") {
        res["fits"] = st.run_fits(&csv);
        emit("residuals.csv", csv);
      } else if (stage == "compare") {
        res["comparison"] = st.run_compare(&csv);
        emit("comparison.csv", csv);
      } else if (stage == "boundary") {
        res["boundary"] = st.run_boundary();
      } else if (stage == "functionals") {
        res["functionals"] = st.run_functionals();
      } else if (stage == "diagnose") {
        res["diagnostic"] = st.run_diagnose();
      } else if (stage == "heterogeneity") {
        res["heterogeneity"] = st.run_heterogeneity();
      } else if (stage == "decay_curve") {
        res["decay_curve"] = st.run_decay_curve(&csv);
        emit("decay_curve.csv", csv);
      } else if (stage == "pde") {
        res["pde"] = st.run_pde(&csv);
        emit("pde_field.csv", csv);
      } else if (stage == "did") {
        res["did"] = st.run_did();
      }
      rep.completed.push_back(stage);
    }
  } catch (const Error& e) {
    rep.failure = StageFailure{stage, e.code(), e.what()};
  } catch (const std::exception& e) {
    rep.failure = StageFailure{stage, ErrorCode::IoError, e.what()};
  }
  if (rep.failure) say(1, "stage " + rep.failure->stage + " failed: " + rep.failure->message);

  res["stages_completed"] = rep.completed;
  res["status"] = rep.ok() ? "ok" : "failed";
  res["failure"] = rep.failure ? nlohmann::json{{"stage", rep.failure->stage},
                                                {"code", to_string(rep.failure->code)},
                                                {"message", rep.failure->message}}
                               : nlohmann::json(nullptr);
  write_file(rep.output_dir / "results.json", res.dump(2) + "\n");

  nlohmann::json inputs = nlohmann::json::array();
  for (const auto& p : st.input_files()) {
    nlohmann::json entry{{"path", p.string()}};
    std::error_code ec;
    if (std::filesystem::is_regular_file(p, ec)) {
      const auto bytes = read_file(p);
      entry["fnv1a64"] = hex64(fnv1a64(bytes));
      entry["bytes"] = bytes.size();
    } else {
      entry["fnv1a64"] = nullptr;
    }
    inputs.push_back(std::move(entry));
  }
  const nlohmann::json manifest{{"tool", "decaybound"},
                                {"tool_version", kToolVersion},
                                {"timestamp", utc_timestamp()},
                                {"seed", cfg.seed},
                                {"config_hash", hash},
                                {"config", cfg},
                                {"inputs", inputs},
                                {"outputs", outputs},
                                {"stages_completed", rep.completed},
                                {"status", res["status"]}};
  write_file(rep.output_dir / "manifest.json", manifest.dump(2) + "\n");
  return rep;
}

}  // namespace decaybound
