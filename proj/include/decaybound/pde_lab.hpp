/**
 * @file pde_lab.hpp
 * @brief Explicit finite-difference simulator for ∂u/∂t = D∇²u − κu + S in
 *        one and two dimensions, with analytic steady-state references.
 */
#pragma once

#include <Eigen/Dense>

#include <algorithm>
#include <array>
#include <cmath>
#include <limits>
#include <numbers>
#include <string>
#include <vector>

#include "decaybound/bessel.hpp"
#include "decaybound/error.hpp"
#include "decaybound/linear_model.hpp"

namespace decaybound {

/// Point source of strength T₀, switched on for t in [active_from, active_to).
struct PointSource {
  std::array<double, 2> position{};  // km; y ignored in 1D
  double strength = 1.0;
  double active_from = -std::numeric_limits<double>::infinity();
  double active_to = std::numeric_limits<double>::infinity();

  bool active_at(double t) const { return t >= active_from && t < active_to; }
};

struct PdeParams {
  double diffusion_d = 1.0;  // D, km²/year
  double decay_kappa = 0.0;  // κ, 1/year
  std::vector<PointSource> sources;

  void validate() const {
    if (!(diffusion_d >= 0.0) || !std::isfinite(diffusion_d))
      throw Error(ErrorCode::InvalidArgument, "diffusion coefficient must be finite and >= 0");
    if (!(decay_kappa >= 0.0) || !std::isfinite(decay_kappa))
      throw Error(ErrorCode::InvalidArgument, "decay rate must be finite and >= 0");
    for (const auto& s : sources)
      if (!(s.strength >= 0.0)) throw Error(ErrorCode::InvalidArgument, "source strength must be >= 0");
  }
};

/// Cell-centred field on a uniform grid. Cell (ix, iy) sits at (ix·h, iy·h).
struct FieldGrid {
  int dim = 1;
  double spacing_km = 1.0;
  std::array<std::size_t, 2> extent{1, 1};
  std::vector<double> values;
  double time_years = 0.0;

  static FieldGrid line(std::size_t n, double h) {
    if (n < 3 || !(h > 0.0)) throw Error(ErrorCode::InvalidArgument, "1D grid needs n >= 3 and h > 0");
    return FieldGrid{1, h, {n, 1}, std::vector<double>(n, 0.0), 0.0};
  }

  static FieldGrid plane(std::size_t nx, std::size_t ny, double h) {
    if (nx < 3 || ny < 3 || !(h > 0.0)) throw Error(ErrorCode::InvalidArgument, "2D grid needs n >= 3 and h > 0");
    return FieldGrid{2, h, {nx, ny}, std::vector<double>(nx * ny, 0.0), 0.0};
  }

  std::size_t size() const { return values.size(); }
  std::size_t index(std::size_t ix, std::size_t iy = 0) const { return iy * extent[0] + ix; }
  double coord(std::size_t i) const { return static_cast<double>(i) * spacing_km; }
  double cell_volume() const { return dim == 1 ? spacing_km : spacing_km * spacing_km; }

  double total_mass() const {
    double m = 0.0;
    for (double v : values) m += v;
    return m * cell_volume();
  }

  double max_value() const { return *std::max_element(values.begin(), values.end()); }
};

enum class BoundaryCondition { ZeroFlux, Absorbing };

struct SimulationConfig {
  double dt_years = 1e-3;
  double t_end_years = 1.0;
  BoundaryCondition boundary = BoundaryCondition::ZeroFlux;
  /// Keep a snapshot every this many steps (0: final state only).
  std::size_t record_every = 0;
};

struct SimulationResult {
  std::vector<FieldGrid> snapshots;  // always ends with the final state
  std::vector<double> times;         // time of every step boundary, starting at t0
  std::vector<double> masses;        // Σu·h^dim at those times
  std::size_t steps = 0;

  const FieldGrid& final_state() const { return snapshots.back(); }
};

/**
 * Largest dt for which the explicit update keeps every stencil weight
 * nonnegative: dt·(2·dim·D/h² + κ) ≤ 1. With κ = 0 this is h²/(2·dim·D).
 */
inline double max_stable_dt(const FieldGrid& grid, const PdeParams& p) {
  const double rate = 2.0 * grid.dim * p.diffusion_d / (grid.spacing_km * grid.spacing_km) + p.decay_kappa;
  return rate > 0.0 ? 1.0 / rate : std::numeric_limits<double>::infinity();
}

namespace detail {

inline std::size_t source_cell(const FieldGrid& g, const PointSource& s) {
  std::array<std::size_t, 2> ij{0, 0};
  for (int a = 0; a < g.dim; ++a) {
    const double k = std::floor(s.position[static_cast<std::size_t>(a)] / g.spacing_km + 0.5);
    if (k < 0.0 || k >= static_cast<double>(g.extent[static_cast<std::size_t>(a)]))
      throw Error(ErrorCode::InvalidArgument, "source lies outside the grid");
    ij[static_cast<std::size_t>(a)] = static_cast<std::size_t>(k);
  }
  return g.index(ij[0], ij[1]);
}

class ExplicitStepper {
 public:
  ExplicitStepper(const FieldGrid& grid, const PdeParams& p, BoundaryCondition bc)
      : p_(p), bc_(bc), scratch_(grid.size(), 0.0), source_(grid.size(), 0.0) {
    for (const auto& s : p.sources) cells_.push_back(source_cell(grid, s));
  }

  void step(FieldGrid& g, double dt) {
    // Source density at the start of the step.
    std::fill(source_.begin(), source_.end(), 0.0);
    const double vol = g.cell_volume();
    for (std::size_t k = 0; k < p_.sources.size(); ++k)
      if (p_.sources[k].active_at(g.time_years)) source_[cells_[k]] += p_.sources[k].strength / vol;

    const double r = p_.diffusion_d / (g.spacing_km * g.spacing_km);
    const auto nx = g.extent[0];
    const auto ny = g.extent[1];
    const auto& u = g.values;
    for (std::size_t iy = 0; iy < ny; ++iy) {
      for (std::size_t ix = 0; ix < nx; ++ix) {
        const std::size_t c = g.index(ix, iy);
        const double uc = u[c];
        // Zero flux mirrors the edge cell into its ghost neighbour.
        double lap = (ix > 0 ? u[c - 1] : uc) + (ix + 1 < nx ? u[c + 1] : uc) - 2.0 * uc;
        if (g.dim == 2) lap += (iy > 0 ? u[c - nx] : uc) + (iy + 1 < ny ? u[c + nx] : uc) - 2.0 * uc;
        scratch_[c] = uc + dt * (r * lap - p_.decay_kappa * uc + source_[c]);
      }
    }
    g.values.swap(scratch_);
    if (bc_ == BoundaryCondition::Absorbing) pin_edges(g);
    g.time_years += dt;
  }

  static void pin_edges(FieldGrid& g) {
    const auto nx = g.extent[0];
    const auto ny = g.extent[1];
    if (g.dim == 1) {
      g.values.front() = 0.0;
      g.values.back() = 0.0;
      return;
    }
    for (std::size_t ix = 0; ix < nx; ++ix) {
      g.values[g.index(ix, 0)] = 0.0;
      g.values[g.index(ix, ny - 1)] = 0.0;
    }
    for (std::size_t iy = 0; iy < ny; ++iy) {
      g.values[g.index(0, iy)] = 0.0;
      g.values[g.index(nx - 1, iy)] = 0.0;
    }
  }

 private:
  const PdeParams& p_;
  BoundaryCondition bc_;
  std::vector<double> scratch_;
  std::vector<double> source_;
  std::vector<std::size_t> cells_;
};

inline void check_grid(const FieldGrid& g) {
  if (g.dim != 1 && g.dim != 2) throw Error(ErrorCode::InvalidArgument, "only 1D and 2D grids are supported");
  if (!(g.spacing_km > 0.0)) throw Error(ErrorCode::InvalidArgument, "grid spacing must be > 0");
  if (g.values.size() != g.extent[0] * g.extent[1])
    throw Error(ErrorCode::InvalidArgument, "grid values do not match its extent");
  for (double v : g.values)
    if (!std::isfinite(v)) throw Error(ErrorCode::InvalidArgument, "grid contains non-finite values");
}

inline void check_stability(const FieldGrid& g, const PdeParams& p, double dt) {
  const double limit = max_stable_dt(g, p);
  if (!(dt > 0.0)) throw Error(ErrorCode::InvalidArgument, "dt must be > 0");
  if (dt > limit * (1.0 + 1e-12))
    throw Error(ErrorCode::UnstableTimestep,
                "dt = " + std::to_string(dt) + " exceeds the stable limit " + std::to_string(limit));
}

}  // namespace detail

/// Forward-Euler integration from grid.time_years over cfg.t_end_years.
inline SimulationResult solve_transient(const FieldGrid& grid, const PdeParams& p, const SimulationConfig& cfg) {
  detail::check_grid(grid);
  p.validate();
  detail::check_stability(grid, p, cfg.dt_years);
  if (!(cfg.t_end_years >= 0.0)) throw Error(ErrorCode::InvalidArgument, "t_end must be >= 0");

  const auto n_steps = static_cast<std::size_t>(std::ceil(cfg.t_end_years / cfg.dt_years - 1e-9));
  const double dt = n_steps > 0 ? cfg.t_end_years / static_cast<double>(n_steps) : cfg.dt_years;

  SimulationResult out;
  FieldGrid g = grid;
  if (cfg.boundary == BoundaryCondition::Absorbing) detail::ExplicitStepper::pin_edges(g);
  detail::ExplicitStepper stepper(g, p, cfg.boundary);
  out.times.push_back(g.time_years);
  out.masses.push_back(g.total_mass());
  for (std::size_t s = 1; s <= n_steps; ++s) {
    stepper.step(g, dt);
    out.times.push_back(g.time_years);
    out.masses.push_back(g.total_mass());
    if (cfg.record_every > 0 && s % cfg.record_every == 0 && s != n_steps) out.snapshots.push_back(g);
  }
  out.steps = n_steps;
  out.snapshots.push_back(std::move(g));
  return out;
}

/**
 * Steps until the largest per-step change, scaled by dt and the field
 * maximum, drops below rel_tol, or max_time elapses.
 */
inline FieldGrid solve_steady_state(const FieldGrid& grid, const PdeParams& p, double dt, BoundaryCondition bc,
                                    double rel_tol = 1e-12, double max_time_years = 1e4) {
  detail::check_grid(grid);
  p.validate();
  detail::check_stability(grid, p, dt);
  FieldGrid g = grid;
  if (bc == BoundaryCondition::Absorbing) detail::ExplicitStepper::pin_edges(g);
  detail::ExplicitStepper stepper(g, p, bc);
  std::vector<double> prev;
  const double t0 = g.time_years;
  while (g.time_years - t0 < max_time_years) {
    prev = g.values;
    stepper.step(g, dt);
    double change = 0.0;
    double scale = 0.0;
    for (std::size_t i = 0; i < g.size(); ++i) {
      change = std::max(change, std::abs(g.values[i] - prev[i]));
      scale = std::max(scale, std::abs(g.values[i]));
    }
    if (change / dt <= rel_tol * std::max(scale, std::numeric_limits<double>::min())) break;
  }
  return g;
}

/**
 * Steady-state field of a single point source of strength T₀ at distance r.
 * 1D: T₀/(2√(Dκ))·exp(−κ_eff r); 2D: T₀/(2πD)·K₀(κ_eff r), κ_eff = √(κ/D).
 */
inline double steady_state_green(double diffusion_d, double decay_kappa, double strength, double r, int dim) {
  if (!(diffusion_d > 0.0) || !(decay_kappa > 0.0))
    throw Error(ErrorCode::DomainError, "steady state needs D > 0 and kappa > 0");
  const double keff = std::sqrt(decay_kappa / diffusion_d);
  if (dim == 1) {
    if (r < 0.0) throw Error(ErrorCode::DomainError, "distance must be >= 0");
    return strength / (2.0 * std::sqrt(diffusion_d * decay_kappa)) * std::exp(-keff * r);
  }
  if (dim == 2) {
    if (!(r > 0.0)) throw Error(ErrorCode::DomainError, "2D Green's function is singular at r <= 0");
    return strength / (2.0 * std::numbers::pi * diffusion_d) * bessel_k0(keff * r);
  }
  throw Error(ErrorCode::InvalidArgument, "dimension must be 1 or 2");
}

inline double steady_state_green(const PdeParams& p, double r, int dim) {
  const double strength = p.sources.empty() ? 1.0 : p.sources.front().strength;
  return steady_state_green(p.diffusion_d, p.decay_kappa, strength, r, dim);
}

struct LogLinearTrend {
  double slope{};
  double intercept{};
  double r2{};
  std::size_t n{};
};

struct ClosureResult {
  SimulationResult run;
  LogLinearTrend mass_trend;  // ln(total mass) against t
};

/// Switches every source off and tracks the decay of total mass.
inline ClosureResult closure_decay(const FieldGrid& steady, PdeParams p, const SimulationConfig& cfg) {
  p.sources.clear();
  ClosureResult out{solve_transient(steady, p, cfg), {}};
  const auto& t = out.run.times;
  const auto& m = out.run.masses;
  std::vector<double> tt, lm;
  for (std::size_t i = 0; i < t.size(); ++i) {
    if (m[i] > 0.0) {
      tt.push_back(t[i]);
      lm.push_back(std::log(m[i]));
    }
  }
  if (tt.size() < 3) throw Error(ErrorCode::WindowTooSmall, "fewer than 3 positive-mass samples after closure");
  const auto n = static_cast<Eigen::Index>(tt.size());
  Eigen::MatrixXd x(n, 2);
  Eigen::VectorXd y(n);
  for (Eigen::Index i = 0; i < n; ++i) {
    x(i, 0) = 1.0;
    x(i, 1) = tt[static_cast<std::size_t>(i)];
    y(i) = lm[static_cast<std::size_t>(i)];
  }
  const auto o = ols(x, y);
  out.mass_trend = {o.coef(1), o.coef(0), o.r2, tt.size()};
  return out;
}

struct KappaEffEstimate {
  double kappa_eff{};
  double intercept{};
  double r2{};
  std::size_t n_points{};
  double window_lo_km{};
  double window_hi_km{};
};

/**
 * Regresses ln u on distance from the source over [3h, 0.75·edge], where
 * edge is the distance from the source to the nearest domain boundary, and
 * returns the negated slope. In 2D the regressand is ln u + ½ ln r, which
 * removes the r^{-1/2} prefactor of the Bessel tail.
 */
inline KappaEffEstimate recover_kappa_eff(const FieldGrid& field, std::array<double, 2> source_position) {
  detail::check_grid(field);
  const double h = field.spacing_km;
  double edge = std::numeric_limits<double>::infinity();
  for (int a = 0; a < field.dim; ++a) {
    const auto ax = static_cast<std::size_t>(a);
    const double hi = field.coord(field.extent[ax] - 1);
    edge = std::min({edge, source_position[ax], hi - source_position[ax]});
  }
  KappaEffEstimate est;
  est.window_lo_km = 3.0 * h;
  est.window_hi_km = 0.75 * edge;

  std::vector<double> rs, ys;
  const auto ny = field.dim == 2 ? field.extent[1] : std::size_t{1};
  for (std::size_t iy = 0; iy < ny; ++iy) {
    for (std::size_t ix = 0; ix < field.extent[0]; ++ix) {
      const double dx = field.coord(ix) - source_position[0];
      const double dy = field.dim == 2 ? field.coord(iy) - source_position[1] : 0.0;
      const double r = std::hypot(dx, dy);
      const double u = field.values[field.index(ix, iy)];
      if (r < est.window_lo_km || r > est.window_hi_km || !(u > 0.0)) continue;
      rs.push_back(r);
      ys.push_back(std::log(u) + (field.dim == 2 ? 0.5 * std::log(r) : 0.0));
    }
  }
  if (rs.size() < 3 || !(est.window_hi_km > est.window_lo_km))
    throw Error(ErrorCode::WindowTooSmall, "fit window holds " + std::to_string(rs.size()) + " usable cells");

  const auto n = static_cast<Eigen::Index>(rs.size());
  Eigen::MatrixXd x(n, 2);
  Eigen::VectorXd y(n);
  for (Eigen::Index i = 0; i < n; ++i) {
    x(i, 0) = 1.0;
    x(i, 1) = rs[static_cast<std::size_t>(i)];
    y(i) = ys[static_cast<std::size_t>(i)];
  }
  const auto o = ols(x, y);
  est.kappa_eff = -o.coef(1);
  est.intercept = o.coef(0);
  est.r2 = o.r2;
  est.n_points = rs.size();
  return est;
}

}  // namespace decaybound
