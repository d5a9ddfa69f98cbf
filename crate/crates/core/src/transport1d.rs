//! Exact one-dimensional optimal transport between piecewise-constant densities.
//!
//! Two representations are used throughout the crate:
//!
//! * [`GridDensity`]: Eulerian, a nonnegative piecewise-constant density on a
//!   uniform grid.
//! * [`QuantileState`]: Lagrangian, `N` strictly increasing positions where
//!   `X_i` is the quantile at level `s_i = (i - 1/2) / N`.
//!
//! In one dimension the monotone rearrangement is the optimal transport map,
//! so every distance here is computed from inverse CDFs, in closed form.

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Tolerance on `|mass - 1|` for operations that need probability densities.
pub const MASS_TOL: f64 = 1e-10;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TransportError {
    #[error("invalid grid: {0}")]
    InvalidGrid(String),
    #[error("invalid density: {0}")]
    InvalidDensity(String),
    #[error("invalid quantile state: {0}")]
    InvalidQuantiles(String),
    #[error("mass {mass} differs from 1 by more than {tol:e}")]
    MassNotUnit { mass: f64, tol: f64 },
    #[error("quantile levels could not be resolved to strictly increasing finite positions")]
    DegenerateDensity,
    #[error("support [{lo}, {hi}] leaves the grid [{x_min}, {x_max}]")]
    DomainOverflow {
        lo: f64,
        hi: f64,
        x_min: f64,
        x_max: f64,
    },
    #[error("size mismatch: {left} vs {right}")]
    SizeMismatch { left: usize, right: usize },
    #[error("map is not nondecreasing")]
    NonMonotoneMap,
    #[error("negative smoothing time {0}")]
    NegativeTime(f64),
    #[error("densities live on different grids")]
    GridMismatch,
}

pub type Result<T> = std::result::Result<T, TransportError>;

/// Uniform grid of `n_cells` cells of width `dx` starting at `x_min`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Grid {
    x_min: f64,
    dx: f64,
    n_cells: usize,
}

impl Grid {
    pub fn new(x_min: f64, dx: f64, n_cells: usize) -> Result<Self> {
        if !x_min.is_finite() || !dx.is_finite() || dx <= 0.0 {
            return Err(TransportError::InvalidGrid(format!(
                "need finite x_min and dx > 0, got x_min={x_min}, dx={dx}"
            )));
        }
        if n_cells < 2 {
            return Err(TransportError::InvalidGrid(format!(
                "need at least 2 cells, got {n_cells}"
            )));
        }
        if !(x_min + dx * n_cells as f64).is_finite() {
            return Err(TransportError::InvalidGrid("domain is not finite".into()));
        }
        Ok(Self { x_min, dx, n_cells })
    }

    pub fn from_bounds(x_min: f64, x_max: f64, n_cells: usize) -> Result<Self> {
        if !(x_max > x_min) {
            return Err(TransportError::InvalidGrid(format!(
                "x_max={x_max} must exceed x_min={x_min}"
            )));
        }
        if n_cells == 0 {
            return Err(TransportError::InvalidGrid(
                "need at least 2 cells, got 0".into(),
            ));
        }
        Self::new(x_min, (x_max - x_min) / n_cells as f64, n_cells)
    }

    pub fn x_min(&self) -> f64 {
        self.x_min
    }

    pub fn x_max(&self) -> f64 {
        self.x_min + self.dx * self.n_cells as f64
    }

    pub fn dx(&self) -> f64 {
        self.dx
    }

    pub fn n_cells(&self) -> usize {
        self.n_cells
    }

    /// Left edge of cell `i` (so `edge(n_cells) == x_max`).
    pub fn edge(&self, i: usize) -> f64 {
        self.x_min + self.dx * i as f64
    }

    pub fn center(&self, i: usize) -> f64 {
        self.x_min + self.dx * (i as f64 + 0.5)
    }

    pub fn centers(&self) -> impl Iterator<Item = f64> + '_ {
        (0..self.n_cells).map(|i| self.center(i))
    }

    /// Same domain with `factor` times as many cells.
    pub fn refined(&self, factor: usize) -> Self {
        Self {
            x_min: self.x_min,
            dx: self.dx / factor as f64,
            n_cells: self.n_cells * factor,
        }
    }

    /// Index of the cell containing `x`; points on an interior edge belong to the right cell.
    pub fn cell_of(&self, x: f64) -> Option<usize> {
        if !(x >= self.x_min && x <= self.x_max()) {
            return None;
        }
        let i = ((x - self.x_min) / self.dx).floor() as usize;
        Some(i.min(self.n_cells - 1))
    }

    fn contains_interval(&self, lo: f64, hi: f64) -> Result<()> {
        let slack = 1e-12 * self.dx;
        if lo < self.x_min - slack || hi > self.x_max() + slack {
            return Err(TransportError::DomainOverflow {
                lo,
                hi,
                x_min: self.x_min,
                x_max: self.x_max(),
            });
        }
        Ok(())
    }
}

/// Nonnegative piecewise-constant density on a [`Grid`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridDensity {
    grid: Grid,
    values: Vec<f64>,
}

impl GridDensity {
    pub fn new(grid: Grid, values: Vec<f64>) -> Result<Self> {
        if values.len() != grid.n_cells() {
            return Err(TransportError::SizeMismatch {
                left: values.len(),
                right: grid.n_cells(),
            });
        }
        if let Some((i, v)) = values
            .iter()
            .enumerate()
            .find(|(_, v)| !v.is_finite() || **v < 0.0)
        {
            return Err(TransportError::InvalidDensity(format!(
                "cell {i} holds {v}; values must be finite and nonnegative"
            )));
        }
        Ok(Self { grid, values })
    }

    pub fn zeros(grid: Grid) -> Self {
        Self {
            values: vec![0.0; grid.n_cells()],
            grid,
        }
    }

    /// Samples `f` at cell centers.
    pub fn from_fn(grid: Grid, f: impl Fn(f64) -> f64) -> Result<Self> {
        let values = grid.centers().map(f).collect();
        Self::new(grid, values)
    }

    pub fn grid(&self) -> &Grid {
        &self.grid
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn into_values(self) -> Vec<f64> {
        self.values
    }

    pub fn mass(&self) -> f64 {
        self.grid.dx * self.values.iter().sum::<f64>()
    }

    /// Midpoint-rule integral of `phi * density`.
    pub fn integrate(&self, phi: impl Fn(f64) -> f64) -> f64 {
        self.grid.dx
            * self
                .values
                .iter()
                .enumerate()
                .map(|(i, v)| v * phi(self.grid.center(i)))
                .sum::<f64>()
    }

    pub fn first_moment(&self) -> f64 {
        self.integrate(|x| x)
    }

    pub fn second_moment(&self) -> f64 {
        self.integrate(|x| x * x)
    }

    pub fn scaled(&self, factor: f64) -> Result<Self> {
        Self::new(self.grid, self.values.iter().map(|v| v * factor).collect())
    }

    /// Rescales to unit mass.
    pub fn normalized(&self) -> Result<Self> {
        let m = self.mass();
        if !(m > 0.0) || !m.is_finite() {
            return Err(TransportError::InvalidDensity(format!(
                "cannot normalize a density of mass {m}"
            )));
        }
        self.scaled(1.0 / m)
    }

    pub fn l1_distance(&self, other: &Self) -> Result<f64> {
        self.check_same_grid(other)?;
        Ok(self.grid.dx
            * self
                .values
                .iter()
                .zip(&other.values)
                .map(|(a, b)| (a - b).abs())
                .sum::<f64>())
    }

    pub fn l2_distance(&self, other: &Self) -> Result<f64> {
        self.check_same_grid(other)?;
        Ok((self.grid.dx
            * self
                .values
                .iter()
                .zip(&other.values)
                .map(|(a, b)| (a - b) * (a - b))
                .sum::<f64>())
        .sqrt())
    }

    pub fn check_same_grid(&self, other: &Self) -> Result<()> {
        if self.grid != other.grid {
            return Err(TransportError::GridMismatch);
        }
        Ok(())
    }

    /// `(min, max)` of the closed support, or `None` for the zero density.
    pub fn support(&self) -> Option<(f64, f64)> {
        let first = self.values.iter().position(|v| *v > 0.0)?;
        let last = self.values.iter().rposition(|v| *v > 0.0)?;
        Some((self.grid.edge(first), self.grid.edge(last + 1)))
    }

    fn check_unit_mass(&self) -> Result<f64> {
        let mass = self.mass();
        if (mass - 1.0).abs() > MASS_TOL {
            return Err(TransportError::MassNotUnit {
                mass,
                tol: MASS_TOL,
            });
        }
        Ok(mass)
    }
}

/// Continuous nondecreasing piecewise-linear function through `(knots[k], values[k])`,
/// constant outside the knot range.
#[derive(Debug, Clone, PartialEq)]
pub struct PiecewiseLinearCdf {
    knots: Vec<f64>,
    values: Vec<f64>,
}

impl PiecewiseLinearCdf {
    pub fn knots(&self) -> &[f64] {
        &self.knots
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn total(&self) -> f64 {
        *self.values.last().unwrap_or(&0.0)
    }

    pub fn eval(&self, x: f64) -> f64 {
        let k = self.knots.partition_point(|&t| t <= x);
        if k == 0 {
            return self.values[0];
        }
        if k == self.knots.len() {
            return self.total();
        }
        let (x0, x1) = (self.knots[k - 1], self.knots[k]);
        let (f0, f1) = (self.values[k - 1], self.values[k]);
        f0 + (f1 - f0) * (x - x0) / (x1 - x0)
    }

    /// Generalized inverse at level `s`. When `s` is attained on a whole
    /// interval (a zero-density plateau) the midpoint of that interval is returned.
    pub fn quantile(&self, s: f64) -> f64 {
        let n = self.knots.len();
        // lower = inf { x : F(x) >= s }
        let j = self.values.partition_point(|&f| f < s);
        let lower = if j == 0 {
            self.knots[0]
        } else if j == n {
            self.knots[n - 1]
        } else {
            let (f0, f1) = (self.values[j - 1], self.values[j]);
            let (x0, x1) = (self.knots[j - 1], self.knots[j]);
            x0 + (s - f0) / (f1 - f0) * (x1 - x0)
        };
        // upper = sup { x : F(x) <= s }
        let k = self.values.partition_point(|&f| f <= s);
        let upper = if k == 0 {
            self.knots[0]
        } else if k == n {
            self.knots[n - 1]
        } else {
            let (f0, f1) = (self.values[k - 1], self.values[k]);
            let (x0, x1) = (self.knots[k - 1], self.knots[k]);
            x0 + (s - f0) / (f1 - f0) * (x1 - x0)
        };
        0.5 * (lower + upper)
    }
}

/// CDF of `u`, with `F(x_min) = 0` and `F(x_max) = mass(u)`.
pub fn cdf(u: &GridDensity) -> PiecewiseLinearCdf {
    let g = u.grid();
    let mut knots = Vec::with_capacity(g.n_cells() + 1);
    let mut values = Vec::with_capacity(g.n_cells() + 1);
    let mut acc = 0.0;
    knots.push(g.x_min());
    values.push(0.0);
    for (i, v) in u.values().iter().enumerate() {
        acc += v * g.dx();
        knots.push(g.edge(i + 1));
        values.push(acc);
    }
    PiecewiseLinearCdf { knots, values }
}

/// `N` strictly increasing particle positions `X_1 < ... < X_N`; `X_i` is the
/// quantile at level `(i - 1/2)/N` of a unit-mass density.
///
/// The reconstructed density is piecewise constant: on each gap `[X_i, X_{i+1}]`
/// it carries mass `1/N`, and two end half-cells `[X_1 - Δ_1/2, X_1]` and
/// `[X_N, X_N + Δ_{N-1}/2]` carry `1/(2N)` each at the density of the adjacent gap.
/// Its CDF interpolates `(X_i, s_i)` exactly.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QuantileState {
    positions: Vec<f64>,
}

impl QuantileState {
    pub fn new(positions: Vec<f64>) -> Result<Self> {
        if positions.len() < 2 {
            return Err(TransportError::InvalidQuantiles(format!(
                "need at least 2 positions, got {}",
                positions.len()
            )));
        }
        if positions.iter().any(|x| !x.is_finite()) {
            return Err(TransportError::InvalidQuantiles(
                "positions must be finite".into(),
            ));
        }
        if let Some(i) = positions.windows(2).position(|w| !(w[1] > w[0])) {
            return Err(TransportError::InvalidQuantiles(format!(
                "positions must be strictly increasing (index {})",
                i + 1
            )));
        }
        let q = Self { positions };
        let (lo, hi) = q.support();
        if !lo.is_finite() || !hi.is_finite() {
            return Err(TransportError::InvalidQuantiles(
                "support is not finite".into(),
            ));
        }
        Ok(q)
    }

    /// Equally spaced quantiles of the uniform density on `[a, b]`.
    pub fn uniform(a: f64, b: f64, n: usize) -> Result<Self> {
        let positions = (0..n)
            .map(|i| a + (b - a) * (i as f64 + 0.5) / n as f64)
            .collect();
        Self::new(positions)
    }

    pub fn len(&self) -> usize {
        self.positions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.positions.is_empty()
    }

    pub fn positions(&self) -> &[f64] {
        &self.positions
    }

    pub fn into_positions(self) -> Vec<f64> {
        self.positions
    }

    pub fn level(&self, i: usize) -> f64 {
        (i as f64 + 0.5) / self.len() as f64
    }

    pub fn gaps(&self) -> Vec<f64> {
        self.positions.windows(2).map(|w| w[1] - w[0]).collect()
    }

    /// Support `[X_1 - Δ_1/2, X_N + Δ_{N-1}/2]` of the reconstruction.
    pub fn support(&self) -> (f64, f64) {
        let x = &self.positions;
        let n = x.len();
        (1.5 * x[0] - 0.5 * x[1], 1.5 * x[n - 1] - 0.5 * x[n - 2])
    }

    /// The `N + 2` cell edges of the reconstruction.
    pub fn cell_edges(&self) -> Vec<f64> {
        let (lo, hi) = self.support();
        let mut e = Vec::with_capacity(self.len() + 2);
        e.push(lo);
        e.extend_from_slice(&self.positions);
        e.push(hi);
        e
    }

    /// Mass of reconstruction cell `c` in `0..=N`.
    pub fn cell_mass(&self, c: usize) -> f64 {
        let n = self.len();
        if c == 0 || c == n {
            0.5 / n as f64
        } else {
            1.0 / n as f64
        }
    }

    /// Density of each of the `N + 1` reconstruction cells.
    pub fn cell_densities(&self) -> Vec<f64> {
        let e = self.cell_edges();
        e.windows(2)
            .enumerate()
            .map(|(c, w)| self.cell_mass(c) / (w[1] - w[0]))
            .collect()
    }

    /// CDF of the reconstruction; its knots are [`Self::cell_edges`].
    pub fn cdf(&self) -> PiecewiseLinearCdf {
        let n = self.len() as f64;
        let knots = self.cell_edges();
        let mut values = Vec::with_capacity(knots.len());
        values.push(0.0);
        for i in 0..self.len() {
            values.push((i as f64 + 0.5) / n);
        }
        values.push(1.0);
        PiecewiseLinearCdf { knots, values }
    }

    /// Second moment of the particle measure, `(1/N) Σ X_i²`.
    pub fn second_moment(&self) -> f64 {
        self.positions.iter().map(|x| x * x).sum::<f64>() / self.len() as f64
    }

    pub fn mean(&self) -> f64 {
        self.positions.iter().sum::<f64>() / self.len() as f64
    }

    pub fn translated(&self, a: f64) -> Result<Self> {
        Self::new(self.positions.iter().map(|x| x + a).collect())
    }

    /// `∫ f²` of the reconstruction: `(1/N²)[Σ 1/Δ_i + 1/(2Δ_1) + 1/(2Δ_{N-1})]`.
    pub fn l2_squared(&self) -> f64 {
        let n = self.len() as f64;
        let gaps = self.gaps();
        let last = gaps.len() - 1;
        let s: f64 = gaps.iter().map(|d| 1.0 / d).sum();
        (s + 0.5 / gaps[0] + 0.5 / gaps[last]) / (n * n)
    }

    /// Lagrangian `∫ f²`: `(1/N²) Σ 1/Δ_i` over the `N - 1` gaps. It differs from
    /// [`Self::l2_squared`] only by the end half-cells.
    pub fn gap_energy(&self) -> f64 {
        let n = self.len() as f64;
        self.gaps().iter().map(|d| 1.0 / d).sum::<f64>() / (n * n)
    }

    /// `∫ f ln f` of the reconstruction, exact for the piecewise-constant density.
    pub fn entropy(&self) -> f64 {
        self.cell_densities()
            .iter()
            .enumerate()
            .map(|(c, rho)| self.cell_mass(c) * rho.ln())
            .sum()
    }

    /// Density of the reconstruction at `x`; at a cell edge the left cell wins.
    pub fn density_at(&self, x: f64) -> f64 {
        let e = self.cell_edges();
        if x <= e[0] || x > e[e.len() - 1] {
            return 0.0;
        }
        let c = e.partition_point(|&t| t < x) - 1;
        self.cell_mass(c) / (e[c + 1] - e[c])
    }
}

/// Positions solving `F(X_i) = (i - 1/2)/N` for the piecewise-linear CDF of `u`.
pub fn quantiles_from_density(u: &GridDensity, n: usize) -> Result<QuantileState> {
    if n < 2 {
        return Err(TransportError::InvalidQuantiles(format!(
            "need at least 2 particles, got {n}"
        )));
    }
    let mass = u.check_unit_mass()?;
    let mut f = cdf(u);
    for v in &mut f.values {
        *v /= mass;
    }
    let mut positions = Vec::with_capacity(n);
    for i in 0..n {
        let s = (i as f64 + 0.5) / n as f64;
        let mut x = f.quantile(s);
        if let Some(&prev) = positions.last() {
            if x <= prev {
                x = f64::next_up(prev);
            }
        }
        if !x.is_finite() {
            return Err(TransportError::DegenerateDensity);
        }
        positions.push(x);
    }
    QuantileState::new(positions).map_err(|_| TransportError::DegenerateDensity)
}

/// Conservative projection of the piecewise-constant reconstruction of `q` onto `grid`.
pub fn density_from_quantiles(q: &QuantileState, grid: &Grid) -> Result<GridDensity> {
    let (lo, hi) = q.support();
    grid.contains_interval(lo, hi)?;
    let f = q.cdf();
    project_cdf(grid, |x| f.eval(x))
}

/// Conservative projection of a smooth reconstruction of `q` onto `grid`.
///
/// The CDF through `(X_i, s_i)` is interpolated by a monotone cubic Hermite
/// spline, so the density is continuous and piecewise quadratic. Used where
/// finite differences of the reconstruction are needed.
pub fn smooth_density_from_quantiles(q: &QuantileState, grid: &Grid) -> Result<GridDensity> {
    let (lo, hi) = q.support();
    grid.contains_interval(lo, hi)?;
    let x = q.positions();
    let n = x.len();
    let levels: Vec<f64> = (0..n).map(|i| q.level(i)).collect();
    let spline = MonotoneCubic::new(x.to_vec(), levels);
    let end = 0.5 / n as f64;
    // Exponential tails carry the end mass at the density of the outermost gap,
    // so each decays over half that gap.
    let left = 2.0 / (x[1] - x[0]);
    let right = 2.0 / (x[n - 1] - x[n - 2]);
    let (x0, x1) = (x[0], x[n - 1]);
    let cdf = |t: f64| {
        if t <= x0 {
            end * (left * (t - x0)).exp()
        } else if t >= x1 {
            1.0 - end * (-right * (t - x1)).exp()
        } else {
            spline.eval(t)
        }
    };
    project_cdf_closed(grid, cdf)
}

/// As `project_cdf`, but mass beyond the grid goes to the boundary cells.
fn project_cdf_closed(grid: &Grid, cdf: impl Fn(f64) -> f64) -> Result<GridDensity> {
    let m = grid.n_cells();
    let mut prev = 0.0;
    let mut values = Vec::with_capacity(m);
    for i in 0..m {
        let next = if i + 1 == m {
            1.0
        } else {
            cdf(grid.edge(i + 1))
        };
        values.push(((next - prev) / grid.dx()).max(0.0));
        prev = next;
    }
    GridDensity::new(*grid, values)
}

/// Conservative projection of `u` onto another grid covering its support.
pub fn regrid(u: &GridDensity, grid: &Grid) -> Result<GridDensity> {
    if u.grid() == grid {
        return Ok(u.clone());
    }
    if let Some((lo, hi)) = u.support() {
        grid.contains_interval(lo, hi)?;
    }
    let f = cdf(u);
    project_cdf(grid, |x| f.eval(x))
}

fn project_cdf(grid: &Grid, cdf: impl Fn(f64) -> f64) -> Result<GridDensity> {
    let mut prev = cdf(grid.x_min());
    let mut values = Vec::with_capacity(grid.n_cells());
    for i in 0..grid.n_cells() {
        let next = cdf(grid.edge(i + 1));
        values.push(((next - prev) / grid.dx()).max(0.0));
        prev = next;
    }
    GridDensity::new(*grid, values)
}

/// Monotone piecewise-cubic Hermite interpolant (Fritsch–Butland slopes).
struct MonotoneCubic {
    x: Vec<f64>,
    y: Vec<f64>,
    m: Vec<f64>,
}

impl MonotoneCubic {
    fn new(x: Vec<f64>, y: Vec<f64>) -> Self {
        let n = x.len();
        let h: Vec<f64> = x.windows(2).map(|w| w[1] - w[0]).collect();
        let d: Vec<f64> = (0..n - 1).map(|k| (y[k + 1] - y[k]) / h[k]).collect();
        let mut m = vec![0.0; n];
        for k in 1..n - 1 {
            if d[k - 1] > 0.0 && d[k] > 0.0 {
                let w1 = 2.0 * h[k] + h[k - 1];
                let w2 = h[k] + 2.0 * h[k - 1];
                m[k] = (w1 + w2) / (w1 / d[k - 1] + w2 / d[k]);
            }
        }
        m[0] = Self::edge_slope(h[0], h.get(1).copied(), d[0], d.get(1).copied());
        m[n - 1] = Self::edge_slope(
            h[n - 2],
            n.checked_sub(3).map(|k| h[k]),
            d[n - 2],
            n.checked_sub(3).map(|k| d[k]),
        );
        Self { x, y, m }
    }

    fn edge_slope(h0: f64, h1: Option<f64>, d0: f64, d1: Option<f64>) -> f64 {
        let (Some(h1), Some(d1)) = (h1, d1) else {
            return d0;
        };
        let m = ((2.0 * h0 + h1) * d0 - h0 * d1) / (h0 + h1);
        if m.signum() != d0.signum() {
            0.0
        } else if d0.signum() != d1.signum() && m.abs() > 3.0 * d0.abs() {
            3.0 * d0
        } else {
            m.max(0.0)
        }
    }

    fn eval(&self, t: f64) -> f64 {
        let n = self.x.len();
        if t <= self.x[0] {
            return self.y[0];
        }
        if t >= self.x[n - 1] {
            return self.y[n - 1];
        }
        let k = self.x.partition_point(|&v| v <= t) - 1;
        let h = self.x[k + 1] - self.x[k];
        let s = (t - self.x[k]) / h;
        let s2 = s * s;
        let s3 = s2 * s;
        let h00 = 2.0 * s3 - 3.0 * s2 + 1.0;
        let h10 = s3 - 2.0 * s2 + s;
        let h01 = -2.0 * s3 + 3.0 * s2;
        let h11 = s3 - s2;
        h00 * self.y[k] + h10 * h * self.m[k] + h01 * self.y[k + 1] + h11 * h * self.m[k + 1]
    }
}

/// Affine piece of an inverse CDF: on levels `[s0, s1]`, `x` runs from `x0` to `x1`.
#[derive(Debug, Clone, Copy)]
struct InversePiece {
    s0: f64,
    s1: f64,
    x0: f64,
    x1: f64,
}

impl InversePiece {
    fn at(&self, s: f64) -> f64 {
        if self.s1 == self.s0 {
            return self.x0;
        }
        self.x0 + (s - self.s0) / (self.s1 - self.s0) * (self.x1 - self.x0)
    }
}

fn inverse_pieces(u: &GridDensity) -> Result<Vec<InversePiece>> {
    let mass = u.check_unit_mass()?;
    let g = u.grid();
    let mut pieces = Vec::new();
    let mut acc = 0.0;
    let mut s_prev = 0.0;
    let last_positive = u.values().iter().rposition(|v| *v > 0.0);
    for (i, v) in u.values().iter().enumerate() {
        if *v <= 0.0 {
            continue;
        }
        acc += v * g.dx();
        let s1 = if Some(i) == last_positive {
            1.0
        } else {
            acc / mass
        };
        pieces.push(InversePiece {
            s0: s_prev,
            s1,
            x0: g.edge(i),
            x1: g.edge(i + 1),
        });
        s_prev = s1;
    }
    Ok(pieces)
}

/// Walks the merged level breakpoints of two inverse CDFs, calling
/// `visit(s_lo, s_hi, piece_u, piece_v)` on each common sub-interval.
fn merge_pieces(
    a: &[InversePiece],
    b: &[InversePiece],
    mut visit: impl FnMut(f64, f64, &InversePiece, &InversePiece),
) {
    let (mut i, mut j) = (0, 0);
    let mut s_lo = 0.0;
    while i < a.len() && j < b.len() {
        let s_hi = a[i].s1.min(b[j].s1);
        if s_hi > s_lo {
            visit(s_lo, s_hi, &a[i], &b[j]);
            s_lo = s_hi;
        }
        if a[i].s1 <= s_hi {
            i += 1;
        }
        if b[j].s1 <= s_hi {
            j += 1;
        }
    }
}

/// `∫_0^1 (α(s))² ds` for `α` affine on `[s_lo, s_hi]` with end values `a0`, `a1`.
fn affine_square_integral(h: f64, a0: f64, a1: f64) -> f64 {
    h * (a0 * a0 + a0 * a1 + a1 * a1) / 3.0
}

/// Exact `W₂(u, v)` for unit-mass grid densities (possibly on different grids).
pub fn wasserstein2(u: &GridDensity, v: &GridDensity) -> Result<f64> {
    let pu = inverse_pieces(u)?;
    let pv = inverse_pieces(v)?;
    let mut total = 0.0;
    merge_pieces(&pu, &pv, |s_lo, s_hi, a, b| {
        let a0 = a.at(s_lo) - b.at(s_lo);
        let a1 = a.at(s_hi) - b.at(s_hi);
        total += affine_square_integral(s_hi - s_lo, a0, a1);
    });
    Ok(total.max(0.0).sqrt())
}

/// `W₂` between the two equal-mass particle measures.
pub fn wasserstein2_quantiles(x: &QuantileState, y: &QuantileState) -> Result<f64> {
    Ok(wasserstein2_squared_quantiles(x, y)?.sqrt())
}

pub fn wasserstein2_squared_quantiles(x: &QuantileState, y: &QuantileState) -> Result<f64> {
    if x.len() != y.len() {
        return Err(TransportError::SizeMismatch {
            left: x.len(),
            right: y.len(),
        });
    }
    let s: f64 = x
        .positions()
        .iter()
        .zip(y.positions())
        .map(|(a, b)| (a - b) * (a - b))
        .sum();
    Ok(s / x.len() as f64)
}

/// One affine piece `[x0, x1] -> [t0, t1]` of a monotone map.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MapSegment {
    pub x0: f64,
    pub x1: f64,
    pub t0: f64,
    pub t1: f64,
}

impl MapSegment {
    fn at(&self, x: f64) -> f64 {
        if self.x1 == self.x0 {
            return self.t0;
        }
        self.t0 + (x - self.x0) / (self.x1 - self.x0) * (self.t1 - self.t0)
    }
}

/// Nondecreasing piecewise-linear map, possibly with upward jumps between segments.
/// Outside its domain it extends as a constant.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MonotoneMap {
    segments: Vec<MapSegment>,
}

impl MonotoneMap {
    pub fn from_segments(segments: Vec<MapSegment>) -> Result<Self> {
        if segments.is_empty() {
            return Err(TransportError::NonMonotoneMap);
        }
        for s in &segments {
            if !(s.x1 >= s.x0) || !(s.t1 >= s.t0) || !s.t0.is_finite() || !s.t1.is_finite() {
                return Err(TransportError::NonMonotoneMap);
            }
        }
        for w in segments.windows(2) {
            if w[1].x0 < w[0].x1 || w[1].t0 < w[0].t1 {
                return Err(TransportError::NonMonotoneMap);
            }
        }
        Ok(Self { segments })
    }

    /// Continuous interpolant through `(xs[k], ts[k])`.
    pub fn from_points(xs: &[f64], ts: &[f64]) -> Result<Self> {
        if xs.len() != ts.len() {
            return Err(TransportError::SizeMismatch {
                left: xs.len(),
                right: ts.len(),
            });
        }
        if xs.len() < 2 || xs.windows(2).any(|w| !(w[1] > w[0])) {
            return Err(TransportError::NonMonotoneMap);
        }
        let segments = xs
            .windows(2)
            .zip(ts.windows(2))
            .map(|(x, t)| MapSegment {
                x0: x[0],
                x1: x[1],
                t0: t[0],
                t1: t[1],
            })
            .collect();
        Self::from_segments(segments)
    }

    pub fn segments(&self) -> &[MapSegment] {
        &self.segments
    }

    fn segment_for(&self, x: f64) -> &MapSegment {
        let k = self.segments.partition_point(|s| s.x1 < x);
        &self.segments[k.min(self.segments.len() - 1)]
    }

    pub fn eval(&self, x: f64) -> f64 {
        let first = &self.segments[0];
        let last = &self.segments[self.segments.len() - 1];
        if x <= first.x0 {
            return first.t0;
        }
        if x >= last.x1 {
            return last.t1;
        }
        self.segment_for(x).at(x)
    }

    /// `∫ |x - T(x)|² u(x) dx`, exact for piecewise-constant `u`.
    pub fn transport_cost(&self, u: &GridDensity) -> f64 {
        self.for_each_piece(u, |a, b, rho, seg| {
            let a0 = a - seg.at(a);
            let a1 = b - seg.at(b);
            rho * affine_square_integral(b - a, a0, a1)
        })
        .iter()
        .sum()
    }

    /// Splits the positive-density part of `u` at cell edges and map breakpoints.
    fn for_each_piece<R>(
        &self,
        u: &GridDensity,
        mut f: impl FnMut(f64, f64, f64, &MapSegment) -> R,
    ) -> Vec<R> {
        let g = u.grid();
        let first = self.segments[0];
        let last = self.segments[self.segments.len() - 1];
        let left_const = MapSegment {
            x0: f64::NEG_INFINITY,
            x1: first.x0,
            t0: first.t0,
            t1: first.t0,
        };
        let right_const = MapSegment {
            x0: last.x1,
            x1: f64::INFINITY,
            t0: last.t1,
            t1: last.t1,
        };
        let mut out = Vec::new();
        for (i, &rho) in u.values().iter().enumerate() {
            if rho <= 0.0 {
                continue;
            }
            let (c0, c1) = (g.edge(i), g.edge(i + 1));
            let mut cuts = vec![c0];
            let k0 = self.segments.partition_point(|s| s.x1 <= c0);
            for s in &self.segments[k0..] {
                if s.x0 >= c1 {
                    break;
                }
                if s.x0 > c0 {
                    cuts.push(s.x0);
                }
                if s.x1 > c0 && s.x1 < c1 {
                    cuts.push(s.x1);
                }
            }
            cuts.push(c1);
            cuts.dedup();
            for w in cuts.windows(2) {
                let (a, b) = (w[0], w[1]);
                if b <= a {
                    continue;
                }
                let mid = 0.5 * (a + b);
                let seg = if mid < first.x0 {
                    &left_const
                } else if mid > last.x1 {
                    &right_const
                } else {
                    self.segment_for(mid)
                };
                out.push(f(a, b, rho, seg));
            }
        }
        out
    }
}

/// Monotone rearrangement `T = V⁻¹ ∘ U` pushing `u` onto `v`.
pub fn monotone_map(u: &GridDensity, v: &GridDensity) -> Result<MonotoneMap> {
    let pu = inverse_pieces(u)?;
    let pv = inverse_pieces(v)?;
    let mut segments = Vec::with_capacity(pu.len() + pv.len());
    merge_pieces(&pu, &pv, |s_lo, s_hi, a, b| {
        segments.push(MapSegment {
            x0: a.at(s_lo),
            x1: a.at(s_hi),
            t0: b.at(s_lo),
            t1: b.at(s_hi),
        });
    });
    // Round-off can make consecutive pieces overlap by an ulp.
    for k in 1..segments.len() {
        let prev = segments[k - 1];
        let s = &mut segments[k];
        if s.x0 < prev.x1 {
            s.x0 = prev.x1;
        }
        if s.x1 < s.x0 {
            s.x1 = s.x0;
        }
        if s.t0 < prev.t1 {
            s.t0 = prev.t1;
        }
        if s.t1 < s.t0 {
            s.t1 = s.t0;
        }
    }
    MonotoneMap::from_segments(segments)
}

/// `T # u` deposited conservatively on the grid of `u`.
pub fn pushforward(u: &GridDensity, map: &MonotoneMap) -> Result<GridDensity> {
    let g = *u.grid();
    for w in map.segments.windows(2) {
        if w[1].t0 < w[0].t1 {
            return Err(TransportError::NonMonotoneMap);
        }
    }
    let pieces = map.for_each_piece(u, |a, b, rho, seg| (seg.at(a), seg.at(b), rho * (b - a)));
    let mut out = vec![0.0; g.n_cells()];
    for (y0, y1, m) in pieces {
        if y1 < y0 {
            return Err(TransportError::NonMonotoneMap);
        }
        g.contains_interval(y0, y1)?;
        deposit(&g, &mut out, y0.max(g.x_min()), y1.min(g.x_max()), m);
    }
    GridDensity::new(g, out)
}

/// Spreads mass `m` uniformly over `[y0, y1]` (a point mass if `y0 == y1`).
fn deposit(g: &Grid, out: &mut [f64], y0: f64, y1: f64, m: f64) {
    let dx = g.dx();
    let last = g.n_cells() - 1;
    if y1 - y0 <= 1e-14 * dx {
        let i = g.cell_of(0.5 * (y0 + y1)).unwrap_or(last);
        out[i] += m / dx;
        return;
    }
    let i0 = g.cell_of(y0).unwrap_or(0);
    let i1 = g.cell_of(y1).unwrap_or(last);
    let rate = m / (y1 - y0);
    for (i, o) in out.iter_mut().enumerate().take(i1 + 1).skip(i0) {
        let lo = g.edge(i).max(y0);
        let hi = g.edge(i + 1).min(y1);
        if hi > lo {
            *o += rate * (hi - lo) / dx;
        }
    }
}

/// Discrete heat semigroup: convolution with a sampled Gaussian of variance `2t`,
/// truncated at 8 standard deviations and renormalized, with mirror reflection
/// at the domain ends so that mass is preserved.
pub fn heat_smooth(u: &GridDensity, t: f64) -> Result<GridDensity> {
    if t < 0.0 || t.is_nan() {
        return Err(TransportError::NegativeTime(t));
    }
    if t == 0.0 {
        return Ok(u.clone());
    }
    let g = u.grid();
    let n = g.n_cells() as i64;
    let sigma = (2.0 * t).sqrt();
    let half = ((8.0 * sigma / g.dx()).ceil() as i64).max(1);
    let mut kernel: Vec<f64> = (-half..=half)
        .map(|k| {
            let z = k as f64 * g.dx() / sigma;
            (-0.5 * z * z).exp()
        })
        .collect();
    let total: f64 = kernel.iter().sum();
    for w in &mut kernel {
        *w /= total;
    }
    let reflect = |mut j: i64| -> usize {
        let period = 2 * n;
        j = j.rem_euclid(period);
        if j >= n {
            j = period - 1 - j;
        }
        j as usize
    };
    let src = u.values();
    let mut out = vec![0.0; src.len()];
    for (i, o) in out.iter_mut().enumerate() {
        let mut acc = 0.0;
        for (kk, w) in kernel.iter().enumerate() {
            let j = i as i64 + kk as i64 - half;
            acc += w * src[reflect(j)];
        }
        *o = acc;
    }
    GridDensity::new(*g, out)
}

pub fn mass(u: &GridDensity) -> f64 {
    u.mass()
}

pub fn second_moment(u: &GridDensity) -> f64 {
    u.second_moment()
}
