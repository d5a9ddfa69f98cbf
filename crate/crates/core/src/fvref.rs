//! Explicit finite-volume solver for the system in flux form
//!
//! ```text
//! w_f ∂ₜf = ∂ₓ[f ∂ₓ(a f + c g)],   w_g ∂ₜg = ∂ₓ[g ∂ₓ(c f + b g)]
//! ```
//!
//! with no-flux ends. Used as the reference the particle scheme is compared to.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::diagnostics::{record_from_grid, warn_on_boundary_leak, Snapshot, Trajectory};
use crate::functionals::{derivative, pressure_profiles, FunctionalError, Model, PairState};
use crate::testfn::TestFunction;
use crate::transport1d::{Grid, GridDensity, TransportError};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum FvError {
    #[error("invalid solver configuration: {0}")]
    InvalidConfig(String),
    #[error("time step {dt:e} exceeds the stability bound {max_dt:e}")]
    CflViolation { dt: f64, max_dt: f64 },
    #[error("snapshot times must be nonnegative and increasing")]
    BadSnapshotTimes,
    #[error(transparent)]
    Functional(#[from] FunctionalError),
    #[error(transparent)]
    Transport(#[from] TransportError),
}

pub type Result<T> = std::result::Result<T, FvError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Mobility {
    /// Density taken from the cell the flux leaves.
    Upwind,
    /// Arithmetic mean of the two neighbours.
    Centered,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FvConfig {
    pub grid: Grid,
    pub model: Model,
    pub cfl_safety: f64,
    pub t_final: f64,
    pub mobility: Mobility,
}

impl FvConfig {
    pub fn new(grid: Grid, model: Model, t_final: f64) -> Result<Self> {
        let c = Self {
            grid,
            model,
            cfl_safety: 0.45,
            t_final,
            mobility: Mobility::Upwind,
        };
        c.validate()?;
        Ok(c)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.cfl_safety > 0.0 && self.cfl_safety <= 1.0) {
            return Err(FvError::InvalidConfig(format!(
                "cfl_safety must lie in (0, 1], got {}",
                self.cfl_safety
            )));
        }
        if !(self.t_final >= 0.0 && self.t_final.is_finite()) {
            return Err(FvError::InvalidConfig(format!(
                "t_final must be >= 0, got {}",
                self.t_final
            )));
        }
        self.model.phys.validate()?;
        Ok(())
    }
}

/// Largest step allowed by the CFL bound `dx² / (2 max(p_f/w_f, p_g/w_g))`
/// before the safety factor.
pub fn stability_bound(s: &PairState<GridDensity>) -> Result<f64> {
    let (pf, pg) = pressure_profiles(s)?;
    let m = &s.model;
    let dmax = pf
        .iter()
        .zip(&pg)
        .map(|(p, q)| (p / m.w_f).max(q / m.w_g))
        .fold(0.0, f64::max);
    let dx = s.f.grid().dx();
    Ok(if dmax > 0.0 {
        dx * dx / (2.0 * dmax)
    } else {
        f64::INFINITY
    })
}

/// `dt` for the next step of `c` from state `s`.
pub fn stable_dt(s: &PairState<GridDensity>, c: &FvConfig) -> Result<f64> {
    Ok(c.cfl_safety * stability_bound(s)?)
}

fn advance(h: &[f64], p: &[f64], weight: f64, dt: f64, dx: f64, mobility: Mobility) -> Vec<f64> {
    let n = h.len();
    let mut flux = vec![0.0; n + 1];
    for i in 0..n - 1 {
        let dp = p[i + 1] - p[i];
        let mob = match mobility {
            Mobility::Upwind => {
                if dp > 0.0 {
                    h[i + 1]
                } else {
                    h[i]
                }
            }
            Mobility::Centered => 0.5 * (h[i] + h[i + 1]),
        };
        flux[i + 1] = mob * dp / dx / weight;
    }
    let r = dt / dx;
    (0..n).map(|i| h[i] + r * (flux[i + 1] - flux[i])).collect()
}

/// Clips negative values and rescales the rest to the previous mass. Returns
/// whether anything was clipped.
fn clip(values: &mut [f64], mass: f64, dx: f64) -> bool {
    if values.iter().all(|v| *v >= 0.0) {
        return false;
    }
    values.iter_mut().for_each(|v| *v = v.max(0.0));
    let m = dx * values.iter().sum::<f64>();
    if m > 0.0 {
        values.iter_mut().for_each(|v| *v *= mass / m);
    }
    true
}

/// One explicit step; also reports whether a negative value had to be clipped.
pub fn fv_step_flagged(
    s: &PairState<GridDensity>,
    dt: f64,
    c: &FvConfig,
) -> Result<(PairState<GridDensity>, bool)> {
    let max_dt = stable_dt(s, c)?;
    if !(dt > 0.0) || dt > max_dt * (1.0 + 1e-12) {
        return Err(FvError::CflViolation { dt, max_dt });
    }
    let dx = s.f.grid().dx();
    let (pf, pg) = pressure_profiles(s)?;
    let m = &s.model;
    let mut f = advance(s.f.values(), &pf, m.w_f, dt, dx, c.mobility);
    let mut g = advance(s.g.values(), &pg, m.w_g, dt, dx, c.mobility);
    let clipped_f = clip(&mut f, s.f.mass(), dx);
    let clipped_g = clip(&mut g, s.g.mass(), dx);
    let clipped = clipped_f || clipped_g;
    if clipped {
        log::warn!("negative density clipped after a step of {dt:e}");
    }
    let grid = *s.f.grid();
    Ok((
        PairState::new(
            GridDensity::new(grid, f)?,
            GridDensity::new(grid, g)?,
            s.model,
        ),
        clipped,
    ))
}

/// One explicit conservative step of size `dt`.
pub fn fv_step(
    s: &PairState<GridDensity>,
    dt: f64,
    c: &FvConfig,
) -> Result<PairState<GridDensity>> {
    fv_step_flagged(s, dt, c).map(|(s, _)| s)
}

/// Integrates to `c.t_final`, recording the state at each of `snapshot_times`
/// (clamped to `t_final`; time 0 is always recorded).
pub fn fv_run(
    initial: &PairState<GridDensity>,
    c: &FvConfig,
    snapshot_times: &[f64],
) -> Result<Trajectory> {
    c.validate()?;
    if snapshot_times.iter().any(|t| !(*t >= 0.0))
        || snapshot_times.windows(2).any(|w| w[1] <= w[0])
    {
        return Err(FvError::BadSnapshotTimes);
    }
    let mut targets: Vec<f64> = snapshot_times
        .iter()
        .copied()
        .filter(|t| *t > 0.0 && *t < c.t_final)
        .collect();
    if c.t_final > 0.0 {
        targets.push(c.t_final);
    }

    let mut traj = Trajectory::new(0.0);
    let mut cur = initial.clone();
    warn_on_boundary_leak(&cur, 0.0);
    traj.push(
        Snapshot {
            time: 0.0,
            state: cur.clone(),
        },
        record_from_grid(0.0, &cur, None)?,
    );
    let mut t = 0.0;
    let mut last = cur.clone();
    for target in targets {
        while t < target {
            let dt = stable_dt(&cur, c)?.min(target - t);
            traj.tau = traj.tau.max(dt);
            cur = fv_step(&cur, dt, c)?;
            t = if target - t - dt <= 1e-14 * target {
                target
            } else {
                t + dt
            };
        }
        warn_on_boundary_leak(&cur, t);
        let record = record_from_grid(t, &cur, Some(&last))?;
        traj.push(
            Snapshot {
                time: t,
                state: cur.clone(),
            },
            record,
        );
        last = cur.clone();
    }
    Ok(traj)
}

fn weak_terms(s: &PairState<GridDensity>, xi: &TestFunction) -> Result<[f64; 4]> {
    let grid = s.f.grid();
    let dx = grid.dx();
    let (xv, xd) = xi.sample(grid);
    let (pf, pg) = pressure_profiles(s)?;
    let (dpf, dpg) = (derivative(&pf, dx), derivative(&pg, dx));
    let m = &s.model;
    let mut out = [0.0; 4];
    for i in 0..grid.n_cells() {
        let (f, g) = (s.f.values()[i], s.g.values()[i]);
        out[0] += xv[i] * f;
        out[1] += xv[i] * g;
        out[2] += f * dpf[i] * xd[i] / m.w_f;
        out[3] += g * dpg[i] * xd[i] / m.w_g;
    }
    Ok(out.map(|v| v * dx))
}

/// Residuals of the weak form between snapshot times `s ≤ t`:
///
/// ```text
/// |∫ξ f(t) - ∫ξ f(s) + ∫ₛᵗ ∫ f ∂ₓ(af + cg) ∂ₓξ / w_f|
/// ```
///
/// and the `g` analogue, the time integral by the trapezoidal rule over the
/// snapshots in `[s, t]`. Times are matched to the nearest snapshot.
pub fn weak_form_residual(
    traj: &Trajectory,
    xi: &TestFunction,
    t: f64,
    s: f64,
) -> Result<(f64, f64)> {
    if traj.is_empty() {
        return Ok((0.0, 0.0));
    }
    let times = traj.times();
    let nearest = |x: f64| {
        (0..times.len())
            .min_by(|&a, &b| (times[a] - x).abs().total_cmp(&(times[b] - x).abs()))
            .unwrap_or(0)
    };
    let (mut i, mut j) = (nearest(s), nearest(t));
    if i > j {
        std::mem::swap(&mut i, &mut j);
    }
    if i == j {
        return Ok((0.0, 0.0));
    }
    let terms: Vec<[f64; 4]> = (i..=j)
        .map(|k| weak_terms(&traj.snapshots[k].state, xi))
        .collect::<Result<_>>()?;
    let mut flux = [0.0, 0.0];
    for k in 0..j - i {
        let h = times[i + k + 1] - times[i + k];
        flux[0] += 0.5 * h * (terms[k][2] + terms[k + 1][2]);
        flux[1] += 0.5 * h * (terms[k][3] + terms[k + 1][3]);
    }
    let (a, b) = (terms[0], terms[j - i]);
    Ok(((b[0] - a[0] + flux[0]).abs(), (b[1] - a[1] + flux[1]).abs()))
}

/// Mass-one Barenblatt profile of `∂ₜf = k ∂ₓ²(f²)`:
/// `(kt)^{-1/3} (C - x² / (12 (kt)^{2/3}))₊` with `C = (3 / (4√12))^{2/3}`.
pub fn barenblatt(x: f64, t: f64, k: f64) -> f64 {
    let c = (3.0 / (4.0 * 12f64.sqrt())).powf(2.0 / 3.0);
    let s = k * t;
    (s.powf(-1.0 / 3.0) * (c - x * x / (12.0 * s.powf(2.0 / 3.0)))).max(0.0)
}

/// Cell averages of [`barenblatt`] on `grid`, normalized to unit mass.
pub fn barenblatt_density(grid: &Grid, t: f64, k: f64) -> Result<GridDensity> {
    // Exact cell averages via the antiderivative of the profile.
    let c = (3.0 / (4.0 * 12f64.sqrt())).powf(2.0 / 3.0);
    let s = k * t;
    let scale = s.powf(1.0 / 3.0);
    let edge = (12.0 * c).sqrt() * scale;
    let prim = |x: f64| {
        let y = x.clamp(-edge, edge);
        (c * y - y * y * y / (36.0 * scale * scale)) / scale
    };
    let values = (0..grid.n_cells())
        .map(|i| (prim(grid.edge(i + 1)) - prim(grid.edge(i))) / grid.dx())
        .collect();
    Ok(GridDensity::new(*grid, values)?.normalized()?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::functionals::{energy, entropy_pair, PhysParams};

    fn gaussian(grid: &Grid, mean: f64, sigma: f64) -> GridDensity {
        GridDensity::from_fn(*grid, |x| {
            (-(x - mean) * (x - mean) / (2.0 * sigma * sigma)).exp()
        })
        .unwrap()
        .normalized()
        .unwrap()
    }

    fn config(grid: Grid, t_final: f64) -> FvConfig {
        FvConfig::new(grid, Model::default(), t_final).unwrap()
    }

    #[test]
    fn config_validation() {
        let g = Grid::from_bounds(-1.0, 1.0, 10).unwrap();
        let mut c = config(g, 1.0);
        c.cfl_safety = 1.5;
        assert!(c.validate().is_err());
        assert!(FvConfig::new(g, Model::default(), -1.0).is_err());
    }

    #[test]
    fn flat_state_is_stationary() {
        let g = Grid::from_bounds(0.0, 1.0, 50).unwrap();
        let u = GridDensity::new(g, vec![1.0; 50]).unwrap();
        let s = PairState::new(u.clone(), u.clone(), Model::default());
        let c = config(g, 1.0);
        let dt = stable_dt(&s, &c).unwrap();
        let next = fv_step(&s, dt, &c).unwrap();
        assert_eq!(next.f.values(), u.values());
        assert_eq!(next.g.values(), u.values());
    }

    #[test]
    fn cfl_violation_is_rejected() {
        let g = Grid::from_bounds(-4.0, 4.0, 200).unwrap();
        let s = PairState::new(
            gaussian(&g, 0.0, 0.5),
            gaussian(&g, 0.0, 0.5),
            Model::default(),
        );
        let c = config(g, 1.0);
        let dt = stable_dt(&s, &c).unwrap();
        assert!(matches!(
            fv_step(&s, 3.0 * dt, &c),
            Err(FvError::CflViolation { .. })
        ));
    }

    #[test]
    fn zero_g_stays_zero_and_masses_hold() {
        let g = Grid::from_bounds(-4.0, 4.0, 200).unwrap();
        let s = PairState::new(
            gaussian(&g, 0.3, 0.5),
            GridDensity::zeros(g),
            Model::default(),
        );
        let c = config(g, 1.0);
        let mut cur = s;
        for _ in 0..200 {
            let dt = stable_dt(&cur, &c).unwrap();
            let (next, clipped) = fv_step_flagged(&cur, dt, &c).unwrap();
            assert!(!clipped);
            cur = next;
        }
        assert!(cur.g.values().iter().all(|v| *v == 0.0));
        assert!((cur.f.mass() - 1.0).abs() < 1e-13);
    }

    #[test]
    fn even_data_stays_even() {
        let g = Grid::from_bounds(-4.0, 4.0, 160).unwrap();
        let s = PairState::new(
            gaussian(&g, 0.0, 0.4),
            gaussian(&g, 0.0, 0.7),
            Model::default(),
        );
        let c = config(g, 0.05);
        let traj = fv_run(&s, &c, &[]).unwrap();
        let last = &traj.snapshots.last().unwrap().state;
        for h in [&last.f, &last.g] {
            let v = h.values();
            let n = v.len();
            for i in 0..n / 2 {
                assert!((v[i] - v[n - 1 - i]).abs() < 1e-10);
            }
        }
    }

    #[test]
    fn run_records_requested_times_and_dissipates() {
        let g = Grid::from_bounds(-6.0, 6.0, 240).unwrap();
        let s = PairState::new(
            gaussian(&g, -0.5, 0.5),
            gaussian(&g, 0.5, 0.5),
            Model::standard(PhysParams::new(2.0, 0.5).unwrap()),
        );
        let c = FvConfig::new(g, s.model, 0.2).unwrap();
        let traj = fv_run(&s, &c, &[0.05, 0.1, 0.15]).unwrap();
        assert_eq!(traj.times(), vec![0.0, 0.05, 0.1, 0.15, 0.2]);
        let e: Vec<f64> = traj
            .snapshots
            .iter()
            .map(|s| energy(&s.state).unwrap())
            .collect();
        let h: Vec<f64> = traj
            .snapshots
            .iter()
            .map(|s| entropy_pair(&s.state).unwrap())
            .collect();
        let dx2 = g.dx() * g.dx();
        for w in e.windows(2).chain(h.windows(2)) {
            assert!(w[1] <= w[0] + dx2);
        }
        for r in &traj.records {
            assert!((r.mass_f - 1.0).abs() < 1e-13 && (r.mass_g - 1.0).abs() < 1e-13);
        }
    }

    #[test]
    fn zero_horizon_keeps_initial() {
        let g = Grid::from_bounds(-4.0, 4.0, 100).unwrap();
        let s = PairState::new(
            gaussian(&g, 0.0, 0.5),
            gaussian(&g, 0.0, 0.5),
            Model::default(),
        );
        let traj = fv_run(&s, &config(g, 0.0), &[]).unwrap();
        assert_eq!(traj.len(), 1);
        assert_eq!(traj.snapshots[0].state, s);
    }

    #[test]
    fn barenblatt_has_unit_mass() {
        let g = Grid::from_bounds(-4.0, 4.0, 4000).unwrap();
        for t in [0.1, 0.35, 2.0] {
            let raw: f64 = g.centers().map(|x| barenblatt(x, t, 1.0)).sum::<f64>() * g.dx();
            assert!((raw - 1.0).abs() < 1e-5, "t={t} mass={raw}");
        }
        let u = barenblatt_density(&g, 0.1, 1.0).unwrap();
        let x = 0.1234;
        let i = g.cell_of(x).unwrap();
        assert!((u.values()[i] - barenblatt(g.center(i), 0.1, 1.0)).abs() < 1e-4);
    }

    #[test]
    fn weak_form_of_a_window_is_mass_drift() {
        let g = Grid::from_bounds(-4.0, 4.0, 160).unwrap();
        let s = PairState::new(
            gaussian(&g, -0.3, 0.5),
            gaussian(&g, 0.3, 0.5),
            Model::default(),
        );
        let traj = fv_run(&s, &config(g, 0.1), &[0.02, 0.04, 0.06, 0.08]).unwrap();
        let xi = TestFunction::window(0.0, 3.0, 3.9);
        let (rf, rg) = weak_form_residual(&traj, &xi, 0.1, 0.0).unwrap();
        assert!(rf < 1e-10 && rg < 1e-10, "{rf} {rg}");
        assert_eq!(
            weak_form_residual(&traj, &xi, 0.04, 0.04).unwrap(),
            (0.0, 0.0)
        );
    }
}
