// decaybound command-line front end.
//
// Every subcommand builds a RunConfig from defaults, then an optional
// --config file, then its flags, and runs the matching pipeline stage.
// Structured output goes to stdout as JSON (CSV where noted); progress and
// errors go to stderr. DECAYBOUND_VERBOSITY=0|1|2 controls stderr chatter.
//
// Exit codes: 0 success, 2 configuration error, 3 data error,
// 4 estimation failure.

#include <CLI11.hpp>
#include <json.hpp>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include "decaybound/functionals.hpp"
#include "decaybound/io.hpp"
#include "decaybound/pipeline.hpp"
#include "decaybound/serialization.hpp"
#include "decaybound/synthetic.hpp"

namespace fs = std::filesystem;
using namespace decaybound;
using nlohmann::json;

namespace {

int verbosity() {
  const char* v = std::getenv("DECAYBOUND_VERBOSITY");
  if (!v || !*v) return 1;
  try {
    return std::stoi(v);
  } catch (...) {
    return 1;
  }
}

void log_line(int level, const std::string& msg) {
  if (level <= verbosity()) std::cerr << "decaybound: " << msg << '\n';
}

/// Flag values; unset optionals leave the config untouched.
struct Overrides {
  std::optional<std::string> config;
  std::optional<std::string> units, sources, panel, outcome, output_dir, kernel, dgp_file;
  std::vector<std::string> models, stages, rules;
  std::optional<double> epsilon, hac_cutoff;
  std::optional<std::uint64_t> seed;
  std::optional<std::size_t> min_stratum, curve_bins;
  bool no_hac = false;
  bool strict = false;
};

std::string absolute_path(const std::string& p) { return fs::absolute(p).lexically_normal().string(); }

RunConfig build_config(const Overrides& o) {
  RunConfig c = o.config ? load_run_config(*o.config) : RunConfig{};
  if (o.units) c.units_csv = absolute_path(*o.units);
  if (o.sources) c.sources_csv = absolute_path(*o.sources);
  if (o.panel) c.panel_csv = absolute_path(*o.panel);
  if (o.dgp_file) c.did.dgp_file = absolute_path(*o.dgp_file);
  if (o.output_dir) c.output_dir = absolute_path(*o.output_dir);
  if (o.outcome) c.outcome = *o.outcome;
  if (!o.models.empty()) {
    c.models.clear();
    for (const auto& m : o.models) c.models.push_back(detail::parse_model_or_throw(m));
  }
  if (!o.stages.empty()) c.stages = o.stages;
  if (!o.rules.empty()) {
    c.heterogeneity.clear();
    for (const auto& r : o.rules) c.heterogeneity.push_back(detail::parse_rule(json(r)));
  }
  if (o.epsilon) c.epsilon = *o.epsilon;
  if (o.hac_cutoff) c.hac.cutoff_km = *o.hac_cutoff;
  if (o.kernel) c.hac.kernel = detail::parse_kernel(*o.kernel);
  if (o.no_hac) c.hac_enabled = false;
  if (o.seed) c.seed = *o.seed;
  if (o.min_stratum) c.min_stratum = *o.min_stratum;
  if (o.curve_bins) c.curve_bins = *o.curve_bins;
  if (o.strict) c.strict_ingest = true;
  return c;
}

void add_config(CLI::App* sub, Overrides& o) {
  sub->add_option("--config", o.config, "JSON run config (flags override its values)");
}

void add_data(CLI::App* sub, Overrides& o) {
  sub->add_option("--units", o.units, "units CSV (unit_id, latitude, longitude, outcome, covariates)");
  sub->add_option("--sources", o.sources, "sources CSV (source_id, latitude, longitude)");
  sub->add_option("--outcome", o.outcome, "outcome column name");
  sub->add_flag("--strict", o.strict, "fail on the first unparseable row instead of dropping it");
}

void add_model(CLI::App* sub, Overrides& o) {
  sub->add_option("--models", o.models, "decay families: Exponential, PowerLaw, LogLinear")->delimiter(',');
  sub->add_option("--hac-cutoff", o.hac_cutoff, "Conley HAC cutoff in km");
  sub->add_option("--kernel", o.kernel, "HAC kernel: Bartlett or Uniform");
  sub->add_flag("--no-hac", o.no_hac, "heteroskedasticity-robust (HC0) errors instead of HAC");
}

void add_epsilon(CLI::App* sub, Overrides& o) {
  sub->add_option("--epsilon", o.epsilon, "retained fraction defining the boundary, in (0, 1)");
}

void print_json(const json& j) { std::cout << j.dump(2) << '\n'; }

void write_or_print(const std::optional<std::string>& out, const std::string& text) {
  if (out) {
    write_file(*out, text);
  } else {
    std::cout << text;
  }
}

/// Parameters given directly on the command line instead of estimated.
struct DirectKappa {
  std::optional<double> kappa, se, q, r2;
};

void add_direct(CLI::App* sub, DirectKappa& d, bool with_q, bool with_r2) {
  sub->add_option("--kappa", d.kappa, "decay rate per km (skips estimation)");
  sub->add_option("--se", d.se, "standard error of kappa");
  if (with_q) sub->add_option("--q", d.q, "source intensity Q");
  if (with_r2) sub->add_option("--r2", d.r2, "fit r-squared");
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"decaybound: spatial treatment-effect decay, boundaries and diffusion diagnostics"};
  app.require_subcommand(1);
  app.set_version_flag("--version", std::string(kToolVersion));

  Overrides o;
  DirectKappa direct;
  std::optional<std::string> out_file;
  std::string format = "csv";
  std::vector<double> times;
  std::optional<double> at_distance, horizon, domain_span;

  auto* distances = app.add_subcommand("distances", "nearest-source distance table (CSV)");
  add_config(distances, o);
  add_data(distances, o);
  distances->add_option("--out", out_file, "write CSV here instead of stdout");

  auto* fit = app.add_subcommand("fit", "fit decay families (JSON)");
  add_config(fit, o);
  add_data(fit, o);
  add_model(fit, o);

  auto* compare = app.add_subcommand("compare", "AIC/BIC model comparison");
  add_config(compare, o);
  add_data(compare, o);
  add_model(compare, o);
  compare->add_option("--format", format, "csv or json")->check(CLI::IsMember({"csv", "json"}));

  auto* boundary = app.add_subcommand("boundary", "boundary distance d* with delta-method CI (JSON)");
  add_config(boundary, o);
  add_data(boundary, o);
  add_model(boundary, o);
  add_epsilon(boundary, o);
  add_direct(boundary, direct, false, false);

  auto* functionals = app.add_subcommand("functionals", "implied diffusion, boundary dynamics, gradient, exposure");
  add_config(functionals, o);
  add_data(functionals, o);
  add_model(functionals, o);
  add_epsilon(functionals, o);
  add_direct(functionals, direct, true, false);
  functionals->add_option("--times", times, "years for d*(t) and v(t)")->delimiter(',');
  functionals->add_option("--distance", at_distance, "distance (km) for gradient and exposure");
  functionals->add_option("--horizon", horizon, "exposure horizon in years");

  auto* diagnose = app.add_subcommand("diagnose", "sign-reversal diagnostic verdict (JSON)");
  add_config(diagnose, o);
  add_data(diagnose, o);
  add_model(diagnose, o);
  add_epsilon(diagnose, o);
  add_direct(diagnose, direct, false, true);
  diagnose->add_option("--domain-span", domain_span, "study-domain span in km");

  auto* hetero = app.add_subcommand("heterogeneity", "stratified exponential fits (JSON)");
  add_config(hetero, o);
  add_data(hetero, o);
  add_model(hetero, o);
  hetero->add_option("--rule", o.rules, "builtin split rule: age, education, gender")->delimiter(',');
  hetero->add_option("--min-stratum", o.min_stratum, "minimum units per stratum");

  auto* pde = app.add_subcommand("simulate-pde", "steady-state diffusion-decay field around one source (JSON)");
  add_config(pde, o);
  std::optional<int> pde_dim;
  std::optional<std::size_t> pde_cells;
  std::optional<double> pde_h, pde_d, pde_k, pde_strength, pde_closure;
  std::optional<std::string> pde_bc;
  pde->add_option("--dim", pde_dim, "1 or 2");
  pde->add_option("--cells", pde_cells, "cells per axis");
  pde->add_option("--spacing", pde_h, "cell size in km");
  pde->add_option("--diffusion", pde_d, "D in km^2/year");
  pde->add_option("--decay", pde_k, "kappa in 1/year");
  pde->add_option("--strength", pde_strength, "source strength");
  pde->add_option("--closure-years", pde_closure, "years simulated after the source switches off");
  pde->add_option("--boundary", pde_bc, "zero_flux or absorbing");
  pde->add_option("--out", out_file, "write the steady field as CSV (x[,y],u)");

  auto* did = app.add_subcommand("did", "TWFE, event study, distance bands and interactions (JSON)");
  add_config(did, o);
  did->add_option("--panel", o.panel, "panel CSV; omit to simulate");
  did->add_option("--dgp-file", o.dgp_file, "DGP JSON; its seed is used unless --seed is given");
  did->add_option("--seed", o.seed, "panel seed");

  SyntheticUnitsConfig synth_cfg;
  std::string synth_dir = ".";
  std::uint64_t synth_seed = 1;
  auto* synth = app.add_subcommand("synth", "write a synthetic units/sources dataset");
  synth->add_option("--out-dir", synth_dir, "directory for units.csv and sources.csv");
  synth->add_option("--seed", synth_seed, "generator seed");
  synth->add_option("--n-units", synth_cfg.n_units, "number of units");
  synth->add_option("--n-sources", synth_cfg.n_sources, "number of sources");
  synth->add_option("--noise", synth_cfg.noise_sd, "outcome noise sd");

  auto* run = app.add_subcommand("run", "full pipeline into an output directory");
  add_config(run, o);
  add_data(run, o);
  add_model(run, o);
  add_epsilon(run, o);
  run->add_option("--panel", o.panel, "panel CSV for the did stage");
  run->add_option("--stages", o.stages, "stages to run (comma separated)")->delimiter(',');
  run->add_option("--output-dir", o.output_dir, "output directory");
  run->add_option("--seed", o.seed, "run seed");
  run->add_option("--curve-bins", o.curve_bins, "bins in decay_curve.csv");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int rc = app.exit(e);
    return rc == 0 ? 0 : 2;
  }

  try {
    if (synth->parsed()) {
      const auto data = generate_synthetic_units(synth_cfg, synth_seed);
      fs::create_directories(synth_dir);
      std::ostringstream units, sources;
      Sample s = data.sample;
      write_units_csv(units, s, synth_cfg.outcome);
      write_sources_csv(sources, data.sources);
      write_file(fs::path(synth_dir) / "units.csv", units.str());
      write_file(fs::path(synth_dir) / "sources.csv", sources.str());
      print_json({{"units", data.sample.size()},
                  {"sources", data.sources.size()},
                  {"seed", synth_seed},
                  {"truth", synth_cfg.truth},
                  {"noise_sd", synth_cfg.noise_sd},
                  {"out_dir", synth_dir}});
      return 0;
    }

    RunConfig cfg = build_config(o);
    if (!(cfg.epsilon > 0.0 && cfg.epsilon < 1.0)) throw Error(ErrorCode::InvalidConfig, "epsilon must lie in (0, 1)");

    if (run->parsed()) {
      const auto rep = run_pipeline(cfg, log_line);
      print_json({{"status", rep.ok() ? "ok" : "failed"},
                  {"output_dir", rep.output_dir.string()},
                  {"stages_completed", rep.completed},
                  {"failure", rep.results["failure"]}});
      if (!rep.ok()) std::cerr << "decaybound: stage '" << rep.failure->stage << "' failed: " << rep.failure->message << '\n';
      return exit_code_for(rep);
    }

    if (pde->parsed()) {
      if (pde_dim) cfg.pde.dim = *pde_dim;
      if (pde_cells) cfg.pde.cells = *pde_cells;
      if (pde_h) cfg.pde.spacing_km = *pde_h;
      if (pde_d) cfg.pde.diffusion_d = *pde_d;
      if (pde_k) cfg.pde.decay_kappa = *pde_k;
      if (pde_strength) cfg.pde.strength = *pde_strength;
      if (pde_closure) cfg.pde.closure_years = *pde_closure;
      if (pde_bc) cfg.pde.boundary = detail::parse_boundary(*pde_bc);
      cfg.stages = {"pde"};
      cfg.validate();
      std::string csv;
      PipelineState st(cfg);
      const json j = st.run_pde(out_file ? &csv : nullptr);
      if (out_file) write_file(*out_file, csv);
      print_json(j);
      return 0;
    }

    if (did->parsed()) {
      if (!cfg.did.dgp_file.empty() && !o.seed && cfg.panel_csv.empty()) {
        const auto f = load_dgp_file(cfg.did.dgp_file);
        if (f.seed) cfg.seed = *f.seed;
      }
      cfg.stages = {"did"};
      cfg.validate();
      PipelineState st(cfg);
      print_json(st.run_did());
      return 0;
    }

    // Direct-parameter paths that need no data.
    const ThresholdSpec eps(cfg.epsilon);
    if (direct.kappa && (boundary->parsed() || functionals->parsed() || diagnose->parsed())) {
      const double k = *direct.kappa;
      if (boundary->parsed()) {
        print_json(spatial_boundary(k, direct.se.value_or(0.0), eps));
      } else if (functionals->parsed()) {
        const auto ds = implied_diffusion(k, eps);
        json j = ds;
        json dyn = json::array();
        for (double t : times.empty() ? cfg.functional_times_years : times)
          dyn.push_back({{"t_years", t},
                         {"d_star_km", boundary_evolution(ds, t)},
                         {"velocity_km_per_year", boundary_velocity(ds, t)}});
        j["dynamics"] = dyn;
        if (direct.se) j["boundary"] = spatial_boundary(k, *direct.se, eps);
        if (direct.q) {
          const DecayParams p{DecayModelKind::Exponential, *direct.q, k};
          const double d = at_distance.value_or(cfg.gradient_distance_km);
          const double h = horizon.value_or(cfg.exposure_horizon_years);
          j["gradient"] = {{"distance_km", d}, {"magnitude", spatial_gradient_magnitude(p, d)}};
          j["exposure"] = {{"distance_km", d}, {"horizon_years", h}, {"phi", cumulative_exposure(p, ExposureSpec(h), d)}};
        }
        print_json(j);
      } else {
        if (!direct.se || !direct.r2)
          throw Error(ErrorCode::InvalidConfig, "diagnose with --kappa also needs --se and --r2");
        VerdictConfig vc;
        vc.epsilon = cfg.epsilon;
        vc.domain_span_km = domain_span.value_or(cfg.domain_span_km);
        print_json(sign_reversal_test(k, *direct.se, *direct.r2, vc));
      }
      return 0;
    }

    if (!times.empty()) cfg.functional_times_years = times;
    if (at_distance) cfg.gradient_distance_km = *at_distance;
    if (horizon) cfg.exposure_horizon_years = *horizon;
    if (domain_span) cfg.domain_span_km = *domain_span;
    if (distances->parsed()) cfg.stages = {"distances"};
    if (fit->parsed()) cfg.stages = {"fit"};
    if (compare->parsed()) cfg.stages = {"compare"};
    if (boundary->parsed()) cfg.stages = {"boundary"};
    if (functionals->parsed()) cfg.stages = {"functionals"};
    if (diagnose->parsed()) cfg.stages = {"diagnose"};
    if (hetero->parsed()) cfg.stages = {"heterogeneity"};
    cfg.validate();

    PipelineState st(cfg);
    st.sample();
    const auto& rep = st.ingest_report();
    if (!rep.dropped.empty())
      log_line(1, "dropped " + std::to_string(rep.dropped.size()) + " of " + std::to_string(rep.rows_read) + " rows");
    std::string csv;
    if (distances->parsed()) {
      st.run_distances(&csv);
      write_or_print(out_file, csv);
    } else if (fit->parsed()) {
      print_json(st.run_fits());
    } else if (compare->parsed()) {
      const json j = st.run_compare(&csv);
      if (format == "json") {
        print_json(j);
      } else {
        std::cout << csv;
      }
    } else if (boundary->parsed()) {
      print_json(st.run_boundary());
    } else if (functionals->parsed()) {
      print_json(st.run_functionals());
    } else if (diagnose->parsed()) {
      print_json(st.run_diagnose());
    } else if (hetero->parsed()) {
      print_json(st.run_heterogeneity());
    }
    return 0;
  } catch (const Error& e) {
    std::cerr << "decaybound: " << e.what() << '\n';
    return exit_code_for(e.code());
  } catch (const std::exception& e) {
    std::cerr << "decaybound: " << e.what() << '\n';
    return 3;
  }
}
