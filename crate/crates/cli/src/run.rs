//! Run orchestration for each mode and evaluation of the certificates.

use muskat_core::diagnostics::Trajectory;
use muskat_core::functionals::{
    c_ell, rescale_to_unit_mass, FunctionalError, Model, PairState, Scaling,
};
use muskat_core::fvref::{fv_run, FvConfig, FvError};
use muskat_core::harness::{
    check_entropy_bounds, check_scheme_estimates, check_theorem_estimates, compare_trajectories,
    equicontinuity_surrogate, estimate_convergence_order, ComparisonReport, HarnessError,
};
use muskat_core::jko::{
    dissipation_certificates, euler_lagrange_residual, flow_interchange_check, run_scheme,
    to_quantiles, JkoError, JkoParams,
};
use muskat_core::testfn::dictionary;
use muskat_core::transport1d::{Grid, GridDensity, TransportError};
use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::Serialize;
use thiserror::Error;

use crate::config::{Mode, RunConfig};
use crate::presets::{make_initial, PresetError};

#[derive(Debug, Error)]
pub enum RunError {
    #[error(transparent)]
    Preset(#[from] PresetError),
    #[error(transparent)]
    Transport(#[from] TransportError),
    #[error(transparent)]
    Functional(#[from] FunctionalError),
    #[error(transparent)]
    Jko(#[from] JkoError),
    #[error(transparent)]
    Fv(#[from] FvError),
    #[error(transparent)]
    Harness(#[from] HarnessError),
    #[error("worker pool: {0}")]
    Pool(String),
}

pub type Result<T> = std::result::Result<T, RunError>;

/// Heat-flow times of the flow-interchange certificate.
pub const FLOW_TIMES: [f64; 3] = [1e-5, 1e-4, 1e-3];
/// Slack of the dissipation certificates.
pub const DISSIPATION_SLACK: f64 = 1e-4;
/// Mass drift allowed for particle runs; their masses are exact by construction.
pub const JKO_MASS_TOL: f64 = 1e-12;
pub const FV_MASS_TOL: f64 = 1e-10;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Certificate {
    pub name: String,
    pub value: f64,
    pub bound: f64,
    pub pass: bool,
}

impl Certificate {
    fn le(name: &str, value: f64, bound: f64) -> Self {
        Self {
            name: name.to_string(),
            value,
            bound,
            pass: value <= bound,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Constants {
    pub c1: f64,
    pub c2: Option<f64>,
    pub c_ell: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct ComparisonSummary {
    pub summary_l2: f64,
    pub max_time_offset: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SweepRow {
    pub tau: f64,
    pub summary_l2: f64,
    pub max_time_offset: f64,
    pub c2: f64,
    pub all_pass: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SweepSummary {
    pub rows: Vec<SweepRow>,
    pub distances_decrease: bool,
    /// Empirical order of the distance in `τ`; recorded, not a checked value.
    pub convergence_order: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Artifact {
    pub name: &'static str,
    pub version: &'static str,
}

pub const ARTIFACT: Artifact = Artifact {
    name: env!("CARGO_PKG_NAME"),
    version: env!("CARGO_PKG_VERSION"),
};

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Report {
    pub artifact: Artifact,
    pub mode: Mode,
    pub config: RunConfig,
    pub scaling: Option<Scaling>,
    pub constants: Constants,
    pub certificates: Vec<Certificate>,
    pub comparison: Option<ComparisonSummary>,
    pub sweep: Option<SweepSummary>,
    pub all_pass: bool,
}

/// One particle run inside a sweep.
#[derive(Debug, Clone)]
pub struct SweepRun {
    pub tau: f64,
    pub trajectory: Trajectory,
    pub comparison: ComparisonReport,
    pub certificates: Vec<Certificate>,
}

#[derive(Debug, Clone)]
pub struct RunOutput {
    /// Particle run for every mode except `fv`.
    pub trajectory: Trajectory,
    /// Finite-volume run in `fv`, `compare` and `sweep` modes.
    pub reference: Option<Trajectory>,
    pub comparison: Option<ComparisonReport>,
    pub sweep: Vec<SweepRun>,
    pub report: Report,
}

pub struct Prepared {
    pub grid: Grid,
    pub state: PairState<GridDensity>,
    pub scaling: Option<Scaling>,
}

pub fn prepare(cfg: &RunConfig) -> Result<Prepared> {
    let grid = Grid::from_bounds(cfg.grid.x_min, cfg.grid.x_max, cfg.grid.cells)?;
    let f = make_initial(&cfg.f, &grid)?;
    let g = make_initial(&cfg.g, &grid)?;
    let (state, scaling) = match cfg.masses {
        Some((mf, mg)) => {
            let (s, sc) = rescale_to_unit_mass(&f.scaled(mf)?, &g.scaled(mg)?, cfg.phys)?;
            (s, Some(sc))
        }
        None => (PairState::new(f, g, Model::standard(cfg.phys)), None),
    };
    Ok(Prepared {
        grid,
        state,
        scaling,
    })
}

fn jko_params(cfg: &RunConfig, tau: f64, model: Model) -> Result<JkoParams> {
    Ok(JkoParams::new(tau, model, cfg.n)?)
}

fn fv_reference(cfg: &RunConfig, prep: &Prepared, spacing: f64) -> Result<Trajectory> {
    let mut c = FvConfig::new(prep.grid, prep.state.model, cfg.t_final)?;
    c.mobility = cfg.fv_mobility;
    c.cfl_safety = cfg.fv_cfl;
    let mut times = Vec::new();
    let mut k = 1;
    while (k as f64) * spacing < cfg.t_final {
        times.push(k as f64 * spacing);
        k += 1;
    }
    Ok(fv_run(&prep.state, &c, &times)?)
}

fn initial_entropy(traj: &Trajectory) -> f64 {
    traj.records.first().map_or(0.0, |r| r.entropy_pair)
}

/// Trajectory-level certificates. `particle` selects the particle-run slacks
/// (summed solver slack, capped at `1e-4 (1 + |H(0)|)`); grid runs get `dx`-sized
/// slack.
pub fn trajectory_certificates(
    traj: &Trajectory,
    p: Option<&JkoParams>,
    initial: &PairState<GridDensity>,
) -> Result<(Vec<Certificate>, f64)> {
    let est = check_scheme_estimates(traj)?;
    let h0 = initial_entropy(traj);
    let dx = initial.f.grid().dx();
    let e0 = traj.records.first().map_or(0.0, |r| r.energy);
    let (slack, step_slack, mass_tol) = match p {
        Some(p) => {
            let per_step: Vec<f64> = traj
                .records
                .iter()
                .filter_map(|r| r.solver_report.as_ref())
                .map(|r| p.slack(r.objective))
                .collect();
            let total: f64 = per_step.iter().sum();
            let step = per_step.iter().copied().fold(0.0, f64::max);
            (total.min(1e-4 * (1.0 + h0.abs())), step, JKO_MASS_TOL)
        }
        None => (dx * (1.0 + h0.abs()), dx * (1.0 + e0.abs()), FV_MASS_TOL),
    };
    let thm = check_theorem_estimates(traj, slack)?;
    let bounds = entropy_bounds_certificate(traj, initial);
    let mut out = vec![Certificate::le(
        "mass_conservation",
        est.mass_drift,
        mass_tol,
    )];
    if p.is_some() {
        out.push(Certificate::le("w2_increments", est.w2_sum, est.w2_bound));
    }
    out.extend([
        Certificate::le("energy_monotone", est.max_energy_increase, step_slack),
        Certificate::le("second_moment_growth", est.moment_excess, 0.0),
        Certificate::le(
            "gradient_integral",
            est.gradient_sum,
            est.gradient_bound + slack,
        ),
        Certificate::le(
            "pressure_dissipation_f",
            est.pressure_sum_f,
            est.pressure_bound_f,
        ),
        Certificate::le(
            "pressure_dissipation_g",
            est.pressure_sum_g,
            est.pressure_bound_g,
        ),
        Certificate::le("entropy_estimate", thm.worst_entropy_excess(), slack),
        Certificate::le("energy_estimate", thm.worst_energy_excess(), slack),
        bounds,
    ]);
    Ok((out, est.measured_c1(traj.tau)))
}

fn entropy_bounds_certificate(traj: &Trajectory, initial: &PairState<GridDensity>) -> Certificate {
    let states = traj
        .snapshots
        .iter()
        .flat_map(|s| [&s.state.f, &s.state.g])
        .chain([&initial.f, &initial.g]);
    let b = check_entropy_bounds(states);
    // Negative margin means a violation; report its size.
    let worst = b.upper_margin.min(b.lower_margin);
    Certificate {
        name: "entropy_bounds".into(),
        value: -worst,
        bound: 0.0,
        pass: b.holds(),
    }
}

/// Per-step certificates on `cfg.certify_steps` steps sampled with `cfg.seed`.
pub fn step_certificates(
    traj: &Trajectory,
    p: &JkoParams,
    grid: &Grid,
    cfg: &RunConfig,
) -> Result<Vec<Certificate>> {
    let steps = traj.particles.len().saturating_sub(1);
    if steps == 0 {
        return Ok(Vec::new());
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut chosen = sample(&mut rng, steps, cfg.certify_steps.min(steps)).into_vec();
    chosen.sort_unstable();
    let dict = dictionary();
    let mut funcs = sample(
        &mut rng,
        dict.len(),
        cfg.certify_test_functions.min(dict.len()),
    )
    .into_vec();
    funcs.sort_unstable();

    let mut el = f64::NEG_INFINITY;
    let mut el_pass = true;
    let mut diss = f64::NEG_INFINITY;
    let mut fi = f64::NEG_INFINITY;
    let mut fi_pass = true;
    let mut heat = f64::NEG_INFINITY;
    let mut heat_pass = true;
    for &k in &chosen {
        let (prev, cur) = (&traj.particles[k], &traj.particles[k + 1]);
        for &j in &funcs {
            let r = euler_lagrange_residual(cur, prev, p, grid, &dict[j])?;
            el = el.max((r.residual_f - r.bound_f).max(r.residual_g - r.bound_g) - r.slack);
            el_pass &= r.holds();
        }
        let d = dissipation_certificates(cur, prev, p, grid)?;
        diss = diss.max((d.lhs_f - d.rhs_f).max(d.lhs_g - d.rhs_g));
        let f = flow_interchange_check(cur, prev, p, grid, &FLOW_TIMES)?;
        for e in &f.entries {
            fi = fi.max(e.objective_base - e.slack - e.objective_smoothed);
            fi_pass &= e.holds();
        }
        heat = heat.max(f.entropy_step_lhs - f.entropy_step_rhs - f.slack);
        heat_pass &= f.entropy_step_holds(f.slack);
    }
    let flag = |name: &str, value: f64, pass: bool| Certificate {
        name: name.into(),
        value,
        bound: 0.0,
        pass,
    };
    Ok(vec![
        flag("euler_lagrange", el, el_pass),
        Certificate::le("dissipation", diss, DISSIPATION_SLACK),
        flag("flow_interchange", fi, fi_pass),
        flag("heat_flow_entropy_step", heat, heat_pass),
    ])
}

fn equicontinuity_certificate(c2: f64) -> Certificate {
    Certificate {
        name: "equicontinuity".into(),
        value: c2,
        bound: f64::INFINITY,
        pass: c2.is_finite(),
    }
}

fn report(
    cfg: &RunConfig,
    prep: &Prepared,
    certificates: Vec<Certificate>,
    c1: f64,
    c2: Option<f64>,
) -> Report {
    let all_pass = certificates.iter().all(|c| c.pass);
    Report {
        artifact: ARTIFACT,
        mode: cfg.mode,
        config: cfg.clone(),
        scaling: prep.scaling,
        constants: Constants {
            c1,
            c2,
            c_ell: c_ell(),
        },
        certificates,
        comparison: None,
        sweep: None,
        all_pass,
    }
}

/// Executes `cfg`; `jobs` bounds the worker pool of sweep mode.
pub fn execute(cfg: &RunConfig, jobs: usize) -> Result<RunOutput> {
    let prep = prepare(cfg)?;
    let model = prep.state.model;
    log::info!(
        "mode {:?}: grid {} cells, N = {}",
        cfg.mode,
        cfg.grid.cells,
        cfg.n
    );
    match cfg.mode {
        Mode::Fv => {
            let traj = fv_reference(cfg, &prep, cfg.tau)?;
            let (certs, c1) = trajectory_certificates(&traj, None, &prep.state)?;
            let rep = report(cfg, &prep, certs, c1, None);
            Ok(RunOutput {
                trajectory: Trajectory::new(cfg.tau),
                reference: Some(traj),
                comparison: None,
                sweep: Vec::new(),
                report: rep,
            })
        }
        Mode::Jko | Mode::Certify | Mode::Compare => {
            let p = jko_params(cfg, cfg.tau, model)?;
            let q0 = to_quantiles(&prep.state, cfg.n)?;
            let traj = run_scheme(&q0, &p, &prep.grid, cfg.t_final)?;
            let (mut certs, c1) = trajectory_certificates(&traj, Some(&p), &prep.state)?;
            let mut c2 = None;
            if cfg.mode == Mode::Certify {
                certs.extend(step_certificates(&traj, &p, &prep.grid, cfg)?);
                let v = equicontinuity_surrogate(&traj, &dictionary());
                certs.push(equicontinuity_certificate(v));
                c2 = Some(v);
            }
            let (reference, comparison) = if cfg.mode == Mode::Compare {
                let fv = fv_reference(cfg, &prep, cfg.tau)?;
                let cmp = compare_trajectories(&traj, &fv)?;
                (Some(fv), Some(cmp))
            } else {
                (None, None)
            };
            let mut rep = report(cfg, &prep, certs, c1, c2);
            rep.comparison = comparison.as_ref().map(|c| ComparisonSummary {
                summary_l2: c.summary_l2,
                max_time_offset: c.max_time_offset,
            });
            Ok(RunOutput {
                trajectory: traj,
                reference,
                comparison,
                sweep: Vec::new(),
                report: rep,
            })
        }
        Mode::Sweep => execute_sweep(cfg, &prep, jobs),
    }
}

fn execute_sweep(cfg: &RunConfig, prep: &Prepared, jobs: usize) -> Result<RunOutput> {
    let finest = cfg.sweep_taus.iter().copied().fold(f64::INFINITY, f64::min);
    let fv = fv_reference(cfg, prep, finest)?;
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(jobs.max(1))
        .build()
        .map_err(|e| RunError::Pool(e.to_string()))?;
    let dict = dictionary();
    let runs: Vec<Result<SweepRun>> = pool.install(|| {
        cfg.sweep_taus
            .par_iter()
            .map(|&tau| {
                let p = jko_params(cfg, tau, prep.state.model)?;
                let q0 = to_quantiles(&prep.state, cfg.n)?;
                let traj = run_scheme(&q0, &p, &prep.grid, cfg.t_final)?;
                let (mut certificates, _) = trajectory_certificates(&traj, Some(&p), &prep.state)?;
                certificates.push(equicontinuity_certificate(equicontinuity_surrogate(
                    &traj, &dict,
                )));
                let comparison = compare_trajectories(&traj, &fv)?;
                log::info!("sweep tau {tau}: distance {:.6e}", comparison.summary_l2);
                Ok(SweepRun {
                    tau,
                    trajectory: traj,
                    comparison,
                    certificates,
                })
            })
            .collect()
    });
    let runs: Vec<SweepRun> = runs.into_iter().collect::<Result<_>>()?;

    let rows: Vec<SweepRow> = runs
        .iter()
        .map(|r| SweepRow {
            tau: r.tau,
            summary_l2: r.comparison.summary_l2,
            max_time_offset: r.comparison.max_time_offset,
            c2: r.certificates.last().map_or(f64::NAN, |c| c.value),
            all_pass: r.certificates.iter().all(|c| c.pass),
        })
        .collect();
    let mut by_tau: Vec<&SweepRow> = rows.iter().collect();
    by_tau.sort_by(|a, b| b.tau.total_cmp(&a.tau));
    let distances_decrease = by_tau.windows(2).all(|w| w[1].summary_l2 < w[0].summary_l2);
    let points: Vec<(f64, f64)> = rows.iter().map(|r| (r.tau, r.summary_l2)).collect();
    let convergence_order = estimate_convergence_order(&points).ok();

    let mut certificates: Vec<Certificate> = runs
        .iter()
        .flat_map(|r| {
            r.certificates.iter().map(move |c| Certificate {
                name: format!("tau={}:{}", r.tau, c.name),
                ..c.clone()
            })
        })
        .collect();
    let (fv_certs, _) = trajectory_certificates(&fv, None, &prep.state)?;
    certificates.extend(fv_certs.into_iter().map(|c| Certificate {
        name: format!("reference:{}", c.name),
        ..c
    }));
    let c2 = rows.iter().map(|r| r.c2).fold(0.0, f64::max);
    let c1 = runs
        .iter()
        .map(|r| check_scheme_estimates(&r.trajectory).map(|e| e.measured_c1(r.tau)))
        .collect::<std::result::Result<Vec<_>, _>>()?
        .into_iter()
        .fold(0.0, f64::max);
    let mut rep = report(cfg, prep, certificates, c1, Some(c2));
    rep.sweep = Some(SweepSummary {
        rows,
        distances_decrease,
        convergence_order,
    });
    Ok(RunOutput {
        trajectory: Trajectory::new(cfg.tau),
        reference: Some(fv),
        comparison: None,
        sweep: runs,
        report: rep,
    })
}
