//! Per-snapshot scalar diagnostics and trajectories.

use serde::{Deserialize, Serialize};

use crate::functionals::{
    energy, energy_dissipation_rate, entropy_dissipation_rate, entropy_pair, FunctionalError,
    PairState,
};
use crate::jko::MinimizeReport;
use crate::transport1d::{wasserstein2, GridDensity, QuantileState, MASS_TOL};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiagnosticsRecord {
    pub time: f64,
    pub mass_f: f64,
    pub mass_g: f64,
    pub energy: f64,
    pub entropy_pair: f64,
    pub second_moment_f: f64,
    pub second_moment_g: f64,
    pub w2_increment_f: f64,
    pub w2_increment_g: f64,
    pub energy_dissipation_rate: f64,
    pub entropy_dissipation_rate: f64,
    pub solver_report: Option<MinimizeReport>,
}

impl DiagnosticsRecord {
    /// Column names of [`Self::row`], in order.
    pub const COLUMNS: [&'static str; 16] = [
        "time",
        "mass_f",
        "mass_g",
        "energy",
        "entropy_pair",
        "second_moment_f",
        "second_moment_g",
        "w2_increment_f",
        "w2_increment_g",
        "energy_dissipation_rate",
        "entropy_dissipation_rate",
        "solver_iterations",
        "solver_grad_norm",
        "solver_objective",
        "solver_stages",
        "solver_converged",
    ];

    pub fn row(&self) -> [f64; 16] {
        let (it, gn, obj, st, conv) = match &self.solver_report {
            Some(r) => (
                r.iterations as f64,
                r.grad_norm,
                r.objective,
                r.stages as f64,
                if r.converged { 1.0 } else { 0.0 },
            ),
            None => (0.0, 0.0, 0.0, 0.0, 0.0),
        };
        [
            self.time,
            self.mass_f,
            self.mass_g,
            self.energy,
            self.entropy_pair,
            self.second_moment_f,
            self.second_moment_g,
            self.w2_increment_f,
            self.w2_increment_g,
            self.energy_dissipation_rate,
            self.entropy_dissipation_rate,
            it,
            gn,
            obj,
            st,
            conv,
        ]
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Snapshot {
    pub time: f64,
    pub state: PairState<GridDensity>,
}

/// Snapshots with one record each. JKO runs also keep their particle states.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Trajectory {
    /// Time-step scale: the JKO step, or the largest explicit step of an FV run.
    pub tau: f64,
    pub snapshots: Vec<Snapshot>,
    pub records: Vec<DiagnosticsRecord>,
    pub particles: Vec<PairState<QuantileState>>,
}

impl Trajectory {
    pub fn new(tau: f64) -> Self {
        Self {
            tau,
            snapshots: Vec::new(),
            records: Vec::new(),
            particles: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.snapshots.len()
    }

    pub fn is_empty(&self) -> bool {
        self.snapshots.is_empty()
    }

    pub fn times(&self) -> Vec<f64> {
        self.snapshots.iter().map(|s| s.time).collect()
    }

    pub fn push(&mut self, snapshot: Snapshot, record: DiagnosticsRecord) {
        self.snapshots.push(snapshot);
        self.records.push(record);
    }
}

fn w2_or_zero(u: &GridDensity, v: &GridDensity) -> f64 {
    if (u.mass() - 1.0).abs() > MASS_TOL || (v.mass() - 1.0).abs() > MASS_TOL {
        return 0.0;
    }
    wasserstein2(u, v).unwrap_or(0.0)
}

/// Record for an Eulerian state; W₂ increments are measured against `prev`
/// (zero for a component without unit mass).
pub fn record_from_grid(
    time: f64,
    state: &PairState<GridDensity>,
    prev: Option<&PairState<GridDensity>>,
) -> Result<DiagnosticsRecord, FunctionalError> {
    let (w2f, w2g) = match prev {
        Some(p) => (w2_or_zero(&state.f, &p.f), w2_or_zero(&state.g, &p.g)),
        None => (0.0, 0.0),
    };
    Ok(DiagnosticsRecord {
        time,
        mass_f: state.f.mass(),
        mass_g: state.g.mass(),
        energy: energy(state)?,
        entropy_pair: entropy_pair(state)?,
        second_moment_f: state.f.second_moment(),
        second_moment_g: state.g.second_moment(),
        w2_increment_f: w2f,
        w2_increment_g: w2g,
        energy_dissipation_rate: energy_dissipation_rate(state)?,
        entropy_dissipation_rate: entropy_dissipation_rate(state)?,
        solver_report: None,
    })
}

/// Mass held by the two outermost cells at each end of the grid.
pub fn boundary_mass(u: &GridDensity) -> f64 {
    let v = u.values();
    let n = v.len();
    let k = 2.min(n / 2);
    u.grid().dx() * (v[..k].iter().sum::<f64>() + v[n - k..].iter().sum::<f64>())
}

/// Threshold for [`warn_on_boundary_leak`].
pub const BOUNDARY_LEAK_TOL: f64 = 1e-10;

/// Logs a warning when either component carries mass next to the domain ends.
pub fn warn_on_boundary_leak(state: &PairState<GridDensity>, time: f64) -> bool {
    let leak = boundary_mass(&state.f).max(boundary_mass(&state.g));
    if leak > BOUNDARY_LEAK_TOL {
        log::warn!("boundary leak at t={time}: {leak:e} of mass next to the domain ends");
        return true;
    }
    false
}
