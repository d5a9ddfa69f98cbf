//! Initial-data presets sampled onto a grid.

use std::fmt;

use muskat_core::transport1d::{Grid, GridDensity, TransportError};
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Preset {
    Gaussian {
        mean: f64,
        sigma: f64,
    },
    /// Constant density on `[a, b]`.
    Uniform {
        a: f64,
        b: f64,
    },
    /// Smooth bump `exp(1 - 1/(1 - r²))`, `r = (x - center)/width`.
    Bump {
        center: f64,
        width: f64,
    },
    /// Two bumps carrying half the mass each.
    TwoBump {
        center1: f64,
        width1: f64,
        center2: f64,
        width2: f64,
    },
}

impl fmt::Display for Preset {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match *self {
            Self::Gaussian { mean, sigma } => write!(f, "gaussian({mean}, {sigma})"),
            Self::Uniform { a, b } => write!(f, "uniform({a}, {b})"),
            Self::Bump { center, width } => write!(f, "bump({center}, {width})"),
            Self::TwoBump {
                center1,
                width1,
                center2,
                width2,
            } => write!(f, "two_bump({center1}, {width1}, {center2}, {width2})"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum PresetParseError {
    #[error("expected `name(arg, ...)`, got `{0}`")]
    Syntax(String),
    #[error("unknown preset `{0}` (gaussian, uniform, bump, two_bump)")]
    UnknownName(String),
    #[error("{name} takes {expected} arguments, got {got}")]
    Arity {
        name: String,
        expected: usize,
        got: usize,
    },
    #[error("argument `{0}` is not a finite number")]
    BadNumber(String),
}

pub fn parse_preset(s: &str) -> Result<Preset, PresetParseError> {
    let s = s.trim();
    let syntax = || PresetParseError::Syntax(s.to_string());
    let (name, rest) = s.split_once('(').ok_or_else(syntax)?;
    let args = rest.strip_suffix(')').ok_or_else(syntax)?;
    let name = name.trim();
    let args: Vec<f64> = if args.trim().is_empty() {
        Vec::new()
    } else {
        args.split(',')
            .map(|a| {
                let a = a.trim();
                match a.parse::<f64>() {
                    Ok(x) if x.is_finite() => Ok(x),
                    _ => Err(PresetParseError::BadNumber(a.to_string())),
                }
            })
            .collect::<Result<_, _>>()?
    };
    let expected = match name {
        "gaussian" | "uniform" | "bump" => 2,
        "two_bump" => 4,
        _ => return Err(PresetParseError::UnknownName(name.to_string())),
    };
    if args.len() != expected {
        return Err(PresetParseError::Arity {
            name: name.to_string(),
            expected,
            got: args.len(),
        });
    }
    Ok(match name {
        "gaussian" => Preset::Gaussian {
            mean: args[0],
            sigma: args[1],
        },
        "uniform" => Preset::Uniform {
            a: args[0],
            b: args[1],
        },
        "bump" => Preset::Bump {
            center: args[0],
            width: args[1],
        },
        _ => Preset::TwoBump {
            center1: args[0],
            width1: args[1],
            center2: args[2],
            width2: args[3],
        },
    })
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum PresetError {
    #[error("preset {preset} does not fit the grid: {reason}")]
    PresetOutOfDomain { preset: String, reason: String },
    #[error(transparent)]
    Transport(#[from] TransportError),
}

/// Gaussians are cut at this many standard deviations; the neglected mass is
/// below 1e-15.
const GAUSSIAN_REACH: f64 = 8.0;

fn bump(x: f64, center: f64, width: f64) -> f64 {
    let r = (x - center) / width;
    if r.abs() >= 1.0 {
        0.0
    } else {
        (1.0 - 1.0 / (1.0 - r * r)).exp()
    }
}

/// Cell average of `phi` by 4-panel Simpson.
fn cell_average(grid: &Grid, i: usize, phi: impl Fn(f64) -> f64) -> f64 {
    let (a, h) = (grid.edge(i), grid.dx() / 4.0);
    let v: Vec<f64> = (0..5).map(|k| phi(a + k as f64 * h)).collect();
    (v[0] + 4.0 * v[1] + 2.0 * v[2] + 4.0 * v[3] + v[4]) / 12.0
}

/// Unit-mass density on `grid` for `preset`, renormalized after sampling.
pub fn make_initial(preset: &Preset, grid: &Grid) -> Result<GridDensity, PresetError> {
    let out = |reason: String| PresetError::PresetOutOfDomain {
        preset: preset.to_string(),
        reason,
    };
    let dx = grid.dx();
    let within = |lo: f64, hi: f64| lo >= grid.x_min() && hi <= grid.x_max();
    let check_bump = |center: f64, width: f64| -> Result<(), PresetError> {
        if !(width > 0.0) {
            return Err(out(format!("width must be > 0, got {width}")));
        }
        if width < 2.0 * dx {
            return Err(out(format!(
                "width {width} is below two cells ({})",
                2.0 * dx
            )));
        }
        if !within(center - width, center + width) {
            return Err(out("support leaves the grid".into()));
        }
        Ok(())
    };
    let values: Vec<f64> = match *preset {
        Preset::Gaussian { mean, sigma } => {
            if !(sigma > 0.0) {
                return Err(out(format!("sigma must be > 0, got {sigma}")));
            }
            if sigma < dx {
                return Err(out(format!("sigma {sigma} is below one cell ({dx})")));
            }
            if !within(mean - GAUSSIAN_REACH * sigma, mean + GAUSSIAN_REACH * sigma) {
                return Err(out(format!(
                    "mean ± {GAUSSIAN_REACH} sigma leaves the grid"
                )));
            }
            let phi = |x: f64| (-(x - mean) * (x - mean) / (2.0 * sigma * sigma)).exp();
            (0..grid.n_cells())
                .map(|i| cell_average(grid, i, phi))
                .collect()
        }
        Preset::Uniform { a, b } => {
            if !(a < b) {
                return Err(out(format!("need a < b, got [{a}, {b}]")));
            }
            if !within(a, b) {
                return Err(out("interval leaves the grid".into()));
            }
            (0..grid.n_cells())
                .map(|i| {
                    let lo = grid.edge(i).max(a);
                    let hi = grid.edge(i + 1).min(b);
                    (hi - lo).max(0.0) / dx
                })
                .collect()
        }
        Preset::Bump { center, width } => {
            check_bump(center, width)?;
            (0..grid.n_cells())
                .map(|i| cell_average(grid, i, |x| bump(x, center, width)))
                .collect()
        }
        Preset::TwoBump {
            center1,
            width1,
            center2,
            width2,
        } => {
            check_bump(center1, width1)?;
            check_bump(center2, width2)?;
            // Each bump integrates to its width times the same constant.
            (0..grid.n_cells())
                .map(|i| {
                    cell_average(grid, i, |x| {
                        bump(x, center1, width1) / width1 + bump(x, center2, width2) / width2
                    })
                })
                .collect()
        }
    };
    if !values.iter().any(|v| *v > 0.0) {
        return Err(out("no cell receives mass".into()));
    }
    Ok(GridDensity::new(*grid, values)?.normalized()?)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn grid() -> Grid {
        Grid::from_bounds(-8.0, 8.0, 1024).unwrap()
    }

    #[test]
    fn parse_round_trips_through_display() {
        for s in [
            "gaussian(-0.5, 0.5)",
            "uniform(0, 1)",
            "bump(1, 0.25)",
            "two_bump(-1, 0.5, 1, 0.75)",
        ] {
            let p = parse_preset(s).unwrap();
            assert_eq!(p.to_string(), s);
            assert_eq!(parse_preset(&p.to_string()).unwrap(), p);
        }
    }

    #[test]
    fn parse_rejects_malformed() {
        assert!(matches!(
            parse_preset("gaussian"),
            Err(PresetParseError::Syntax(_))
        ));
        assert!(matches!(
            parse_preset("spiral(1, 2)"),
            Err(PresetParseError::UnknownName(_))
        ));
        assert!(matches!(
            parse_preset("bump(1)"),
            Err(PresetParseError::Arity { .. })
        ));
        assert!(matches!(
            parse_preset("uniform(0, inf)"),
            Err(PresetParseError::BadNumber(_))
        ));
    }

    #[test]
    fn uniform_is_one_on_the_unit_interval() {
        let u = make_initial(&Preset::Uniform { a: 0.0, b: 1.0 }, &grid()).unwrap();
        assert!((u.mass() - 1.0).abs() < 1e-14);
        let g = grid();
        for (i, v) in u.values().iter().enumerate() {
            let x = g.center(i);
            let expect = if x > 0.0 && x < 1.0 { 1.0 } else { 0.0 };
            assert!((v - expect).abs() < 1e-12, "x={x} v={v}");
        }
    }

    #[test]
    fn gaussian_has_unit_mass() {
        let u = make_initial(
            &Preset::Gaussian {
                mean: 0.0,
                sigma: 1.0,
            },
            &grid(),
        )
        .unwrap();
        assert!((u.mass() - 1.0).abs() < 1e-10);
        assert!(u.first_moment().abs() < 1e-12);
        assert!((u.second_moment() - 1.0).abs() < 1e-4);
    }

    #[test]
    fn degenerate_presets_are_out_of_domain() {
        let g = grid();
        for p in [
            Preset::Bump {
                center: 0.0,
                width: 0.0,
            },
            Preset::Gaussian {
                mean: 0.0,
                sigma: -1.0,
            },
            Preset::Gaussian {
                mean: 7.0,
                sigma: 1.0,
            },
            Preset::Uniform { a: 1.0, b: 1.0 },
            Preset::Uniform { a: -9.0, b: 0.0 },
            Preset::TwoBump {
                center1: 0.0,
                width1: 0.5,
                center2: 7.9,
                width2: 0.5,
            },
        ] {
            assert!(
                matches!(
                    make_initial(&p, &g),
                    Err(PresetError::PresetOutOfDomain { .. })
                ),
                "{p}"
            );
        }
    }

    #[test]
    fn two_bump_splits_mass_evenly() {
        let g = grid();
        let p = Preset::TwoBump {
            center1: -2.0,
            width1: 0.5,
            center2: 2.0,
            width2: 1.0,
        };
        let u = make_initial(&p, &g).unwrap();
        let left: f64 = u.values()[..512].iter().sum::<f64>() * g.dx();
        assert!((left - 0.5).abs() < 1e-6, "{left}");
    }
}
