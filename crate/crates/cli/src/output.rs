//! CSV and JSON emission. Every float is written with 17 significant digits so
//! reruns can be compared byte for byte.

use std::fmt::Write as _;
use std::fs;
use std::io;
use std::path::Path;

use muskat_core::diagnostics::{DiagnosticsRecord, Trajectory};
use muskat_core::harness::{ComparisonEntry, ComparisonReport};

use crate::run::{Report, RunOutput, SweepRow};

fn num(out: &mut String, v: f64) {
    write!(out, "{v:.16e}").expect("write to string");
}

fn row(out: &mut String, values: &[f64]) {
    for (i, v) in values.iter().enumerate() {
        if i > 0 {
            out.push(',');
        }
        num(out, *v);
    }
    out.push('\n');
}

/// `time,x,f,g`, one line per snapshot and cell. Densities are physical: the
/// unit-mass profiles multiplied back by their masses.
pub fn snapshots_csv(traj: &Trajectory) -> String {
    let mut out = String::from("time,x,f,g\n");
    for s in &traj.snapshots {
        let m = &s.state.model;
        let grid = s.state.f.grid();
        for (i, (f, g)) in s
            .state
            .f
            .values()
            .iter()
            .zip(s.state.g.values())
            .enumerate()
        {
            row(
                &mut out,
                &[s.time, grid.center(i), m.mass_f * f, m.mass_g * g],
            );
        }
    }
    out
}

pub fn diagnostics_csv(traj: &Trajectory) -> String {
    let mut out = DiagnosticsRecord::COLUMNS.join(",");
    out.push('\n');
    for r in &traj.records {
        row(&mut out, &r.row());
    }
    out
}

pub fn comparison_csv(c: &ComparisonReport) -> String {
    let mut out = ComparisonEntry::COLUMNS.join(",");
    out.push('\n');
    for e in &c.entries {
        row(&mut out, &e.row());
    }
    out
}

pub fn sweep_csv(rows: &[SweepRow]) -> String {
    let mut out = String::from("tau,summary_l2,max_time_offset,c2,all_pass\n");
    for r in rows {
        row(
            &mut out,
            &[
                r.tau,
                r.summary_l2,
                r.max_time_offset,
                r.c2,
                if r.all_pass { 1.0 } else { 0.0 },
            ],
        );
    }
    out
}

pub fn report_json(r: &Report) -> String {
    let mut s = serde_json::to_string_pretty(r).expect("report serializes");
    s.push('\n');
    s
}

fn write_run(dir: &Path, traj: &Trajectory, prefix: &str) -> io::Result<()> {
    fs::write(
        dir.join(format!("{prefix}snapshots.csv")),
        snapshots_csv(traj),
    )?;
    fs::write(
        dir.join(format!("{prefix}diagnostics.csv")),
        diagnostics_csv(traj),
    )
}

/// Writes all files of `out` into `dir`, creating it if needed.
///
/// Particle runs go to `snapshots.csv`/`diagnostics.csv`, the finite-volume run
/// to `fv_snapshots.csv`/`fv_diagnostics.csv`; sweeps write one `tau_<k>/`
/// directory per step size and a merged `sweep.csv`.
pub fn emit_outputs(out: &RunOutput, dir: &Path) -> io::Result<()> {
    fs::create_dir_all(dir)?;
    if !out.trajectory.is_empty() {
        write_run(dir, &out.trajectory, "")?;
    }
    if let Some(fv) = &out.reference {
        write_run(dir, fv, "fv_")?;
    }
    if let Some(c) = &out.comparison {
        fs::write(dir.join("comparison.csv"), comparison_csv(c))?;
    }
    for (k, run) in out.sweep.iter().enumerate() {
        let sub = dir.join(format!("tau_{k}"));
        fs::create_dir_all(&sub)?;
        write_run(&sub, &run.trajectory, "")?;
        fs::write(sub.join("comparison.csv"), comparison_csv(&run.comparison))?;
    }
    if let Some(s) = &out.report.sweep {
        fs::write(dir.join("sweep.csv"), sweep_csv(&s.rows))?;
    }
    fs::write(dir.join("report.json"), report_json(&out.report))
}
