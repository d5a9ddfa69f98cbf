//! Trajectory-level checks: cumulative entropy and energy estimates, the
//! per-run scheme estimates, trajectory comparison, convergence-order fits and
//! the time-equicontinuity surrogate.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::diagnostics::Trajectory;
use crate::functionals::{entropy_bounds, pressure_dissipation, FunctionalError, Model, PairState};
use crate::fvref::{barenblatt_density, fv_run, FvConfig, FvError};
use crate::jko::{particle_pressure_dissipation, run_scheme_single, JkoError, JkoParams};
use crate::testfn::TestFunction;
use crate::transport1d::{
    quantiles_from_density, regrid, wasserstein2, Grid, GridDensity, TransportError, MASS_TOL,
};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum HarnessError {
    #[error("trajectories have no overlapping snapshot times")]
    NoOverlap,
    #[error("cannot fit a convergence order: {0}")]
    DegenerateFit(String),
    #[error("trajectory is empty")]
    EmptyTrajectory,
    #[error(transparent)]
    Functional(#[from] FunctionalError),
    #[error(transparent)]
    Transport(#[from] TransportError),
    #[error(transparent)]
    Jko(#[from] JkoError),
    #[error(transparent)]
    Fv(#[from] FvError),
}

pub type Result<T> = std::result::Result<T, HarnessError>;

/// Step lengths `t_n - t_{n-1}`; the first snapshot gets 0.
fn steps(traj: &Trajectory) -> Vec<f64> {
    let t = traj.times();
    (0..t.len())
        .map(|n| if n == 0 { 0.0 } else { t[n] - t[n - 1] })
        .collect()
}

fn model_of(traj: &Trajectory) -> Result<Model> {
    traj.snapshots
        .first()
        .map(|s| s.state.model)
        .ok_or(HarnessError::EmptyTrajectory)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EstimateEntry {
    pub time: f64,
    /// `H(t) + Σ τ D_H`.
    pub entropy_lhs: f64,
    /// `H(0)`.
    pub entropy_rhs: f64,
    /// `E(t) + ½ Σ τ D_E`.
    pub energy_lhs: f64,
    /// `E(0)`.
    pub energy_rhs: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EstimateReport {
    pub entries: Vec<EstimateEntry>,
    pub slack: f64,
}

impl EstimateReport {
    pub fn worst_entropy_excess(&self) -> f64 {
        self.entries
            .iter()
            .map(|e| e.entropy_lhs - e.entropy_rhs)
            .fold(f64::NEG_INFINITY, f64::max)
    }

    pub fn worst_energy_excess(&self) -> f64 {
        self.entries
            .iter()
            .map(|e| e.energy_lhs - e.energy_rhs)
            .fold(f64::NEG_INFINITY, f64::max)
    }

    /// Entropy estimate at every snapshot.
    pub fn entropy_holds(&self) -> bool {
        self.worst_entropy_excess() <= self.slack
    }

    /// Energy estimate at every snapshot.
    pub fn energy_holds(&self) -> bool {
        self.worst_energy_excess() <= self.slack
    }
}

/// Cumulative entropy and energy estimates
///
/// ```text
/// H(t) + Σ τ [‖∂ₓf‖² + R‖∂ₓ(f+g)‖²] ≤ H(0)
/// E(t) + ½ Σ τ [∫f((1+R)∂ₓf + R∂ₓg)² + R R_μ ∫g(∂ₓf + ∂ₓg)²] ≤ E(0)
/// ```
///
/// from the recorded rates, each step weighted by its right endpoint as in
/// the piecewise-constant interpolation. `slack` is the total allowance.
pub fn check_theorem_estimates(traj: &Trajectory, slack: f64) -> Result<EstimateReport> {
    let first = traj.records.first().ok_or(HarnessError::EmptyTrajectory)?;
    let mut cum_h = 0.0;
    let mut cum_e = 0.0;
    let mut entries = Vec::with_capacity(traj.len());
    for (r, dt) in traj.records.iter().zip(steps(traj)) {
        cum_h += dt * r.entropy_dissipation_rate;
        cum_e += dt * r.energy_dissipation_rate;
        entries.push(EstimateEntry {
            time: r.time,
            entropy_lhs: r.entropy_pair + cum_h,
            entropy_rhs: first.entropy_pair,
            energy_lhs: r.energy + 0.5 * cum_e,
            energy_rhs: first.energy,
        });
    }
    Ok(EstimateReport { entries, slack })
}

/// Measured sides of the scheme estimates.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SchemeEstimates {
    /// `max |mass - 1|` over snapshots and components.
    pub mass_drift: f64,
    /// `Σ w_f W₂²(fⁿ, fⁿ⁻¹) + w_g W₂²(gⁿ, gⁿ⁻¹)` and its bound `2 E(0) τ`.
    pub w2_sum: f64,
    pub w2_bound: f64,
    /// Largest energy increase between consecutive snapshots.
    pub max_energy_increase: f64,
    /// `max M(t)/(1+t)` for `M = ∫(f+g)x²`.
    pub moment_constant: f64,
    /// `max_t M(t) - [2M(0) + 4tE(0)(1/w_f + 1/w_g)]`.
    pub moment_excess: f64,
    /// `Σ τ D_H / λ`, which bounds `∫ ‖∂ₓf‖² + ‖∂ₓg‖²` for the smallest
    /// eigenvalue `λ` of the energy form, and `(H(0) - H(T)) / λ`.
    pub gradient_sum: f64,
    pub gradient_bound: f64,
    /// `Σ τ ∫ f|∂ₓ p_f|²` and its bound `2 w_f E(0)`.
    pub pressure_sum_f: f64,
    pub pressure_bound_f: f64,
    /// `Σ τ ∫ g|∂ₓ p_g|²` and its bound `2 w_g E(0)`.
    pub pressure_sum_g: f64,
    pub pressure_bound_g: f64,
}

impl SchemeEstimates {
    pub fn w2_holds(&self) -> bool {
        self.w2_sum <= self.w2_bound
    }

    pub fn moment_holds(&self) -> bool {
        self.moment_excess <= 0.0 && self.moment_constant.is_finite()
    }

    pub fn gradient_holds(&self, slack: f64) -> bool {
        self.gradient_sum <= self.gradient_bound + slack
    }

    pub fn pressure_holds(&self) -> bool {
        self.pressure_sum_f <= self.pressure_bound_f && self.pressure_sum_g <= self.pressure_bound_g
    }

    /// Smallest constant the measured increment, moment, gradient and pressure
    /// sides fit under.
    pub fn measured_c1(&self, tau: f64) -> f64 {
        let w2 = if tau > 0.0 { self.w2_sum / tau } else { 0.0 };
        [
            w2,
            self.moment_constant,
            self.gradient_sum,
            self.pressure_sum_f,
            self.pressure_sum_g,
        ]
        .into_iter()
        .fold(0.0, f64::max)
    }
}

/// Smallest eigenvalue of `[[a, c], [c, b]]`.
fn form_floor(m: &Model) -> f64 {
    let mid = 0.5 * (m.a + m.b);
    let rad = (0.25 * (m.a - m.b).powi(2) + m.c * m.c).sqrt();
    mid - rad
}

pub fn check_scheme_estimates(traj: &Trajectory) -> Result<SchemeEstimates> {
    let m = model_of(traj)?;
    let rec = &traj.records;
    let first = &rec[0];
    let e0 = first.energy;
    let m0 = first.second_moment_f + first.second_moment_g;
    let dts = steps(traj);
    let lambda = form_floor(&m);

    let mut out = SchemeEstimates {
        mass_drift: 0.0,
        w2_sum: 0.0,
        w2_bound: 2.0 * e0 * traj.tau,
        max_energy_increase: f64::NEG_INFINITY,
        moment_constant: 0.0,
        moment_excess: f64::NEG_INFINITY,
        gradient_sum: 0.0,
        gradient_bound: 0.0,
        pressure_sum_f: 0.0,
        pressure_bound_f: 2.0 * m.w_f * e0,
        pressure_sum_g: 0.0,
        pressure_bound_g: 2.0 * m.w_g * e0,
    };
    for (n, r) in rec.iter().enumerate() {
        for mass in [r.mass_f, r.mass_g] {
            // A component that is identically zero carries no mass to drift.
            if mass != 0.0 {
                out.mass_drift = out.mass_drift.max((mass - 1.0).abs());
            }
        }
        out.w2_sum += m.w_f * r.w2_increment_f.powi(2) + m.w_g * r.w2_increment_g.powi(2);
        if n > 0 {
            out.max_energy_increase = out.max_energy_increase.max(r.energy - rec[n - 1].energy);
        }
        let moment = r.second_moment_f + r.second_moment_g;
        out.moment_constant = out.moment_constant.max(moment / (1.0 + r.time));
        let bound = 2.0 * m0 + 4.0 * r.time * e0 * (1.0 / m.w_f + 1.0 / m.w_g);
        out.moment_excess = out.moment_excess.max(moment - bound);
        out.gradient_sum += dts[n] * r.entropy_dissipation_rate / lambda;
        if n > 0 {
            let (pf, pg) = match traj.particles.get(n) {
                Some(p) => particle_pressure_dissipation(p)?,
                None => pressure_dissipation(&traj.snapshots[n].state)?,
            };
            out.pressure_sum_f += dts[n] * pf;
            out.pressure_sum_g += dts[n] * pg;
        }
    }
    let last = rec.last().expect("nonempty");
    out.gradient_bound = (first.entropy_pair - last.entropy_pair) / lambda;
    if rec.len() == 1 {
        out.max_energy_increase = 0.0;
    }
    Ok(out)
}

/// Worst margins of the two entropy bounds over all snapshots and components;
/// both are `≥ 0` when the bounds hold.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EntropyBoundsCheck {
    pub c_ell: f64,
    pub upper_margin: f64,
    pub lower_margin: f64,
}

impl EntropyBoundsCheck {
    pub fn holds(&self) -> bool {
        self.upper_margin >= 0.0 && self.lower_margin >= 0.0
    }
}

pub fn check_entropy_bounds<'a>(
    states: impl IntoIterator<Item = &'a GridDensity>,
) -> EntropyBoundsCheck {
    let mut out = EntropyBoundsCheck {
        c_ell: crate::functionals::c_ell(),
        upper_margin: f64::INFINITY,
        lower_margin: f64::INFINITY,
    };
    for h in states {
        let b = entropy_bounds(h);
        out.upper_margin = out
            .upper_margin
            .min(b.c_ell + b.weighted_mass + b.l2_squared - b.abs_entropy);
        out.lower_margin = out.lower_margin.min(b.entropy + b.c_ell + b.weighted_mass);
    }
    out
}

pub fn check_trajectory_entropy_bounds(traj: &Trajectory) -> EntropyBoundsCheck {
    check_entropy_bounds(traj.snapshots.iter().flat_map(|s| [&s.state.f, &s.state.g]))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ComparisonEntry {
    pub time_a: f64,
    pub time_b: f64,
    pub l1_f: f64,
    pub l1_g: f64,
    pub l2_f: f64,
    pub l2_g: f64,
    pub w2_f: f64,
    pub w2_g: f64,
}

impl ComparisonEntry {
    pub const COLUMNS: [&'static str; 8] = [
        "time_a", "time_b", "l1_f", "l1_g", "l2_f", "l2_g", "w2_f", "w2_g",
    ];

    pub fn row(&self) -> [f64; 8] {
        [
            self.time_a,
            self.time_b,
            self.l1_f,
            self.l1_g,
            self.l2_f,
            self.l2_g,
            self.w2_f,
            self.w2_g,
        ]
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComparisonReport {
    pub entries: Vec<ComparisonEntry>,
    /// `(∫ ‖f_a - f_b‖₂² + ‖g_a - g_b‖₂² dt)^{1/2}` over the matched times,
    /// piecewise constant in time with right endpoints.
    pub summary_l2: f64,
    pub max_time_offset: f64,
}

fn w2_if_unit(u: &GridDensity, v: &GridDensity) -> Result<f64> {
    if (u.mass() - 1.0).abs() > MASS_TOL || (v.mass() - 1.0).abs() > MASS_TOL {
        return Ok(0.0);
    }
    Ok(wasserstein2(u, v)?)
}

/// Distances between the snapshots of `a` and the nearest-in-time snapshots of
/// `b`, on the finer of the two grids.
pub fn compare_trajectories(a: &Trajectory, b: &Trajectory) -> Result<ComparisonReport> {
    let (ta, tb) = (a.times(), b.times());
    let (Some(&a0), Some(&a1), Some(&b0), Some(&b1)) =
        (ta.first(), ta.last(), tb.first(), tb.last())
    else {
        return Err(HarnessError::NoOverlap);
    };
    let tol = 1e-9 * (1.0 + a1.abs().max(b1.abs()));
    let (lo, hi) = (a0.max(b0) - tol, a1.min(b1) + tol);
    let ga = *a.snapshots[0].state.f.grid();
    let gb = *b.snapshots[0].state.f.grid();
    let grid = if ga.dx() <= gb.dx() { ga } else { gb };
    let mut entries = Vec::new();
    for (i, &t) in ta.iter().enumerate() {
        if t < lo || t > hi {
            continue;
        }
        let j = (0..tb.len())
            .min_by(|&x, &y| (tb[x] - t).abs().total_cmp(&(tb[y] - t).abs()))
            .expect("nonempty");
        let (sa, sb) = (&a.snapshots[i].state, &b.snapshots[j].state);
        let fa = regrid(&sa.f, &grid)?;
        let ga_ = regrid(&sa.g, &grid)?;
        let fb = regrid(&sb.f, &grid)?;
        let gb_ = regrid(&sb.g, &grid)?;
        entries.push(ComparisonEntry {
            time_a: t,
            time_b: tb[j],
            l1_f: fa.l1_distance(&fb)?,
            l1_g: ga_.l1_distance(&gb_)?,
            l2_f: fa.l2_distance(&fb)?,
            l2_g: ga_.l2_distance(&gb_)?,
            w2_f: w2_if_unit(&fa, &fb)?,
            w2_g: w2_if_unit(&ga_, &gb_)?,
        });
    }
    if entries.is_empty() {
        return Err(HarnessError::NoOverlap);
    }
    let mut integral = 0.0;
    for k in 1..entries.len() {
        let e = &entries[k];
        integral += (e.time_a - entries[k - 1].time_a) * (e.l2_f * e.l2_f + e.l2_g * e.l2_g);
    }
    let max_time_offset = entries
        .iter()
        .map(|e| (e.time_a - e.time_b).abs())
        .fold(0.0, f64::max);
    Ok(ComparisonReport {
        entries,
        summary_l2: integral.sqrt(),
        max_time_offset,
    })
}

/// Least-squares slope of `ln error` against `ln resolution`.
pub fn estimate_convergence_order(points: &[(f64, f64)]) -> Result<f64> {
    if points.len() < 3 {
        return Err(HarnessError::DegenerateFit(format!(
            "need at least 3 points, got {}",
            points.len()
        )));
    }
    if points
        .iter()
        .any(|(h, e)| !(*h > 0.0 && *e > 0.0 && h.is_finite() && e.is_finite()))
    {
        return Err(HarnessError::DegenerateFit(
            "resolutions and errors must be positive".into(),
        ));
    }
    let n = points.len() as f64;
    let xs: Vec<f64> = points.iter().map(|p| p.0.ln()).collect();
    let ys: Vec<f64> = points.iter().map(|p| p.1.ln()).collect();
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let sxx: f64 = xs.iter().map(|x| (x - mx) * (x - mx)).sum();
    if sxx <= 1e-300 {
        return Err(HarnessError::DegenerateFit(
            "all resolutions are equal".into(),
        ));
    }
    let sxy: f64 = xs.iter().zip(&ys).map(|(x, y)| (x - mx) * (y - my)).sum();
    Ok(sxy / sxx)
}

/// `max |∫(h(t) - h(s)) ξ| / (‖ξ‖_{W²,∞} √(|t-s| + τ))` over snapshot pairs,
/// dictionary entries and both components.
pub fn equicontinuity_surrogate(traj: &Trajectory, dictionary: &[TestFunction]) -> f64 {
    if traj.len() < 2 {
        return 0.0;
    }
    let grid = *traj.snapshots[0].state.f.grid();
    let dx = grid.dx();
    let times = traj.times();
    let mut best: f64 = 0.0;
    for xi in dictionary {
        let (v, _) = xi.sample(&grid);
        let norm = xi.w2inf_norm();
        let pair: Vec<(f64, f64)> = traj
            .snapshots
            .iter()
            .map(|s| {
                let f: f64 = s.state.f.values().iter().zip(&v).map(|(a, b)| a * b).sum();
                let g: f64 = s.state.g.values().iter().zip(&v).map(|(a, b)| a * b).sum();
                (dx * f, dx * g)
            })
            .collect();
        for i in 0..pair.len() {
            for j in i + 1..pair.len() {
                let scale = norm * ((times[j] - times[i]).abs() + traj.tau).sqrt();
                let d = (pair[j].0 - pair[i].0)
                    .abs()
                    .max((pair[j].1 - pair[i].1).abs());
                best = best.max(d / scale);
            }
        }
    }
    best
}

/// L¹ errors of the particle and finite-volume solvers against the
/// single-species Barenblatt profile.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BarenblattErrors {
    pub jko: f64,
    pub fv: f64,
}

/// Runs both solvers with `g ≡ 0` from the Barenblatt profile at `t0` for a
/// duration `t` on `[-8, 8]` and compares against the exact profile at `t0 + t`.
pub fn barenblatt_regression(
    model: Model,
    cells: usize,
    n: usize,
    tau: f64,
    t0: f64,
    t: f64,
) -> Result<BarenblattErrors> {
    let grid = Grid::from_bounds(-8.0, 8.0, cells)?;
    let k = model.a / (2.0 * model.w_f);
    let u0 = barenblatt_density(&grid, t0, k)?;
    let exact = barenblatt_density(&grid, t0 + t, k)?;

    let p = JkoParams::new(tau, model, n)?;
    let jt = run_scheme_single(&quantiles_from_density(&u0, n)?, &p, &grid, t)?;
    let jko = jt
        .snapshots
        .last()
        .ok_or(HarnessError::EmptyTrajectory)?
        .state
        .f
        .l1_distance(&exact)?;

    let s0 = PairState::new(u0, GridDensity::zeros(grid), model);
    let ft = fv_run(&s0, &FvConfig::new(grid, model, t)?, &[])?;
    let fv = ft
        .snapshots
        .last()
        .ok_or(HarnessError::EmptyTrajectory)?
        .state
        .f
        .l1_distance(&exact)?;
    Ok(BarenblattErrors { jko, fv })
}
