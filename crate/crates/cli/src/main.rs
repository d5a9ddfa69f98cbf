use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Parser, Subcommand};
use muskat_cli::config::{parse_config_with_overrides, parse_override};
use muskat_cli::{emit_outputs, execute};

const OUT_ENV: &str = "MUSKAT_JKO_OUT";
const DEFAULT_OUT: &str = "muskat-out";

#[derive(Debug, Parser)]
#[command(
    name = "muskat-jko",
    version,
    about = "Particle JKO scheme for the thin-film Muskat system"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
    /// Configuration file (flat `key = value` or JSON).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Output directory; defaults to $MUSKAT_JKO_OUT, then ./muskat-out.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// `key=value` applied on top of the configuration; repeatable.
    #[arg(long = "override", global = true, value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    /// Worker threads for sweep mode.
    #[arg(long, global = true, default_value_t = 1)]
    jobs: usize,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Particle scheme run with trajectory certificates.
    RunJko,
    /// Finite-volume reference run.
    RunFv,
    /// Particle run compared against the finite-volume run.
    Compare,
    /// Particle runs over `sweep.tau` against one finite-volume run.
    Sweep,
    /// Particle run with every certificate, including the per-step ones.
    Certify,
}

impl Command {
    fn mode_key(&self) -> &'static str {
        match self {
            Self::RunJko => "jko",
            Self::RunFv => "fv",
            Self::Compare => "compare",
            Self::Sweep => "sweep",
            Self::Certify => "certify",
        }
    }
}

fn run(cli: Cli) -> Result<bool> {
    let text = match &cli.config {
        Some(p) => {
            std::fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?
        }
        None => String::new(),
    };
    let mut overrides = cli
        .overrides
        .iter()
        .map(|s| parse_override(s))
        .collect::<Result<Vec<_>, _>>()?;
    overrides.push(("mode".into(), cli.command.mode_key().into()));
    let cfg = parse_config_with_overrides(&text, &overrides)
        .map_err(|e| anyhow::anyhow!("invalid configuration:\n{e}"))?;
    let dir = cli
        .out
        .or_else(|| cfg.out.clone())
        .or_else(|| std::env::var_os(OUT_ENV).map(PathBuf::from))
        .unwrap_or_else(|| PathBuf::from(DEFAULT_OUT));
    let out = execute(&cfg, cli.jobs)?;
    emit_outputs(&out, &dir).with_context(|| format!("writing to {}", dir.display()))?;
    for c in out.report.certificates.iter().filter(|c| !c.pass) {
        log::warn!(
            "certificate {} failed: {:e} > {:e}",
            c.name,
            c.value,
            c.bound
        );
    }
    println!(
        "{}: {} certificates, {} failed; outputs in {}",
        if out.report.all_pass { "PASS" } else { "FAIL" },
        out.report.certificates.len(),
        out.report.certificates.iter().filter(|c| !c.pass).count(),
        dir.display()
    );
    Ok(out.report.all_pass)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    match run(Cli::parse()) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}
