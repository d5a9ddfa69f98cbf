//! Energy, entropy and dissipation functionals of the thin-film Muskat system.
//!
//! The system is written as a weighted Wasserstein gradient flow of a quadratic
//! energy
//!
//! ```text
//! E(f, g) = ½ ∫ [a f² + b g² + 2c f g]
//! w_f ∂ₜf = ∂ₓ[f ∂ₓ(a f + c g)],   w_g ∂ₜg = ∂ₓ[g ∂ₓ(c f + b g)]
//! ```
//!
//! For unit masses `a = 1+R`, `b = c = R`, `w_f = 1`, `w_g = R/R_μ`, which gives
//! `E = ½∫[f² + R(f+g)²]` and `∂ₜg = R_μ ∂ₓ[g ∂ₓ(f+g)]`. Other masses are folded
//! into the coefficients by [`rescale_to_unit_mass`].

use std::sync::OnceLock;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::transport1d::{GridDensity, PiecewiseLinearCdf, QuantileState, TransportError};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum FunctionalError {
    #[error("invalid physical parameters: {0}")]
    InvalidParams(String),
    #[error("state is not admissible: {0}")]
    NonAdmissible(String),
    #[error("component {0} has zero mass")]
    ZeroMass(&'static str),
    #[error(transparent)]
    Transport(#[from] TransportError),
}

pub type Result<T> = std::result::Result<T, FunctionalError>;

/// Cells with density below this contribute nothing to entropies.
pub const ENTROPY_FLOOR: f64 = 1e-300;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PhysParams {
    pub r: f64,
    pub r_mu: f64,
}

impl PhysParams {
    pub fn new(r: f64, r_mu: f64) -> Result<Self> {
        let p = Self { r, r_mu };
        p.validate()?;
        Ok(p)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.r > 0.0 && self.r.is_finite()) {
            return Err(FunctionalError::InvalidParams(format!(
                "R must be > 0, got {}",
                self.r
            )));
        }
        if !(self.r_mu > 0.0 && self.r_mu.is_finite()) {
            return Err(FunctionalError::InvalidParams(format!(
                "R_mu must be > 0, got {}",
                self.r_mu
            )));
        }
        Ok(())
    }
}

impl Default for PhysParams {
    fn default() -> Self {
        Self { r: 1.0, r_mu: 1.0 }
    }
}

/// Coefficients of the quadratic energy and of the transport weights.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Model {
    pub phys: PhysParams,
    pub a: f64,
    pub b: f64,
    pub c: f64,
    pub w_f: f64,
    pub w_g: f64,
    /// Masses of the physical (unscaled) components.
    pub mass_f: f64,
    pub mass_g: f64,
}

impl Model {
    pub fn standard(phys: PhysParams) -> Self {
        Self::with_masses(phys, 1.0, 1.0).expect("unit masses are valid")
    }

    /// Model for the unit-mass profiles `F = f/m_f`, `G = g/m_g`.
    pub fn with_masses(phys: PhysParams, mass_f: f64, mass_g: f64) -> Result<Self> {
        phys.validate()?;
        if !(mass_f > 0.0 && mass_f.is_finite()) {
            return Err(FunctionalError::ZeroMass("f"));
        }
        if !(mass_g > 0.0 && mass_g.is_finite()) {
            return Err(FunctionalError::ZeroMass("g"));
        }
        let (r, r_mu) = (phys.r, phys.r_mu);
        let eta2 = mass_f / mass_g;
        Ok(Self {
            phys,
            a: eta2 * (1.0 + r),
            b: r / eta2,
            c: r,
            w_f: 1.0 / mass_g,
            w_g: r / (r_mu * mass_f),
            mass_f,
            mass_g,
        })
    }

    pub fn eta_squared(&self) -> f64 {
        self.mass_f / self.mass_g
    }

    /// Pressures `(a f + c g, c f + b g)` driving each component.
    pub fn pressures(&self, f: f64, g: f64) -> (f64, f64) {
        (self.a * f + self.c * g, self.c * f + self.b * g)
    }
}

impl Default for Model {
    fn default() -> Self {
        Self::standard(PhysParams::default())
    }
}

/// A density representation on which the energy and entropy can be evaluated.
pub trait DensityRepr: Clone {
    fn l2_squared(&self) -> f64;
    /// The `∫ u²` entering the energy; defaults to [`Self::l2_squared`].
    fn energy_l2(&self) -> f64 {
        self.l2_squared()
    }
    /// `∫ u v` for two states of the same representation.
    fn overlap(&self, other: &Self) -> Result<f64>;
    fn entropy(&self) -> f64;
    fn second_moment(&self) -> f64;
}

impl DensityRepr for GridDensity {
    fn l2_squared(&self) -> f64 {
        self.grid().dx() * self.values().iter().map(|v| v * v).sum::<f64>()
    }

    fn overlap(&self, other: &Self) -> Result<f64> {
        self.check_same_grid(other)?;
        Ok(self.grid().dx()
            * self
                .values()
                .iter()
                .zip(other.values())
                .map(|(u, v)| u * v)
                .sum::<f64>())
    }

    fn entropy(&self) -> f64 {
        entropy_single(self)
    }

    fn second_moment(&self) -> f64 {
        GridDensity::second_moment(self)
    }
}

impl DensityRepr for QuantileState {
    fn l2_squared(&self) -> f64 {
        QuantileState::l2_squared(self)
    }

    fn energy_l2(&self) -> f64 {
        self.gap_energy()
    }

    fn overlap(&self, other: &Self) -> Result<f64> {
        Ok(cross_term(self, other))
    }

    fn entropy(&self) -> f64 {
        QuantileState::entropy(self)
    }

    fn second_moment(&self) -> f64 {
        QuantileState::second_moment(self)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairState<D> {
    pub f: D,
    pub g: D,
    pub model: Model,
}

impl<D: DensityRepr> PairState<D> {
    pub fn new(f: D, g: D, model: Model) -> Self {
        Self { f, g, model }
    }

    pub fn phys(&self) -> PhysParams {
        self.model.phys
    }
}

impl PairState<GridDensity> {
    /// Unit mass for both components, within `tol`.
    pub fn check_admissible(&self, tol: f64) -> Result<()> {
        self.f.check_same_grid(&self.g)?;
        for (name, h) in [("f", &self.f), ("g", &self.g)] {
            let m = h.mass();
            if (m - 1.0).abs() > tol {
                return Err(FunctionalError::NonAdmissible(format!(
                    "mass of {name} is {m}, expected 1"
                )));
            }
        }
        Ok(())
    }
}

pub fn energy<D: DensityRepr>(s: &PairState<D>) -> Result<f64> {
    let m = &s.model;
    let e =
        0.5 * (m.a * s.f.energy_l2() + m.b * s.g.energy_l2() + 2.0 * m.c * s.f.overlap(&s.g)?);
    if !e.is_finite() {
        return Err(FunctionalError::NonAdmissible(format!("energy is {e}")));
    }
    Ok(e)
}

/// Weighted entropy `w_f H(f) + w_g H(g)`; `H(f) + (R/R_μ) H(g)` for unit masses.
pub fn entropy_pair<D: DensityRepr>(s: &PairState<D>) -> Result<f64> {
    let h = s.model.w_f * s.f.entropy() + s.model.w_g * s.g.entropy();
    if !h.is_finite() {
        return Err(FunctionalError::NonAdmissible(format!("entropy is {h}")));
    }
    Ok(h)
}

fn r_ln_r(r: f64) -> f64 {
    if r < ENTROPY_FLOOR {
        0.0
    } else {
        r * r.ln()
    }
}

/// `∫ h ln h`.
pub fn entropy_single(h: &GridDensity) -> f64 {
    h.grid().dx() * h.values().iter().map(|&v| r_ln_r(v)).sum::<f64>()
}

/// `∫ h |ln h|`.
pub fn abs_entropy(h: &GridDensity) -> f64 {
    h.grid().dx() * h.values().iter().map(|&v| r_ln_r(v).abs()).sum::<f64>()
}

/// `∫ e^{-(1+x²)} (1+x²) dx`, the constant in the entropy bounds below.
pub fn c_ell() -> f64 {
    static VALUE: OnceLock<f64> = OnceLock::new();
    *VALUE.get_or_init(|| {
        let w = |x: f64| {
            let q = 1.0 + x * x;
            (-q).exp() * q
        };
        adaptive_simpson(&w, -12.0, 12.0, 1e-15, 50)
    })
}

fn adaptive_simpson(f: &dyn Fn(f64) -> f64, a: f64, b: f64, tol: f64, depth: u32) -> f64 {
    fn simpson(fa: f64, fm: f64, fb: f64, h: f64) -> f64 {
        h / 6.0 * (fa + 4.0 * fm + fb)
    }
    #[allow(clippy::too_many_arguments)]
    fn rec(
        f: &dyn Fn(f64) -> f64,
        a: f64,
        b: f64,
        fa: f64,
        fm: f64,
        fb: f64,
        whole: f64,
        tol: f64,
        depth: u32,
    ) -> f64 {
        let m = 0.5 * (a + b);
        let (lm, rm) = (0.5 * (a + m), 0.5 * (m + b));
        let (flm, frm) = (f(lm), f(rm));
        let left = simpson(fa, flm, fm, m - a);
        let right = simpson(fm, frm, fb, b - m);
        let delta = left + right - whole;
        if depth == 0 || delta.abs() <= 15.0 * tol {
            return left + right + delta / 15.0;
        }
        rec(f, a, m, fa, flm, fm, left, 0.5 * tol, depth - 1)
            + rec(f, m, b, fm, frm, fb, right, 0.5 * tol, depth - 1)
    }
    let (fa, fb, fm) = (f(a), f(b), f(0.5 * (a + b)));
    let whole = simpson(fa, fm, fb, b - a);
    rec(f, a, b, fa, fm, fb, whole, tol, depth)
}

/// Both sides of the two entropy bounds
/// `∫h|ln h| ≤ C_ℓ + ∫h(1+x²) + ‖h‖₂²` and `H(h) ≥ −C_ℓ − ∫h(1+x²)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EntropyBounds {
    pub entropy: f64,
    pub abs_entropy: f64,
    pub weighted_mass: f64,
    pub l2_squared: f64,
    pub c_ell: f64,
}

impl EntropyBounds {
    pub fn upper_holds(&self) -> bool {
        self.abs_entropy <= self.c_ell + self.weighted_mass + self.l2_squared
    }

    pub fn lower_holds(&self) -> bool {
        self.entropy >= -self.c_ell - self.weighted_mass
    }
}

pub fn entropy_bounds(h: &GridDensity) -> EntropyBounds {
    EntropyBounds {
        entropy: entropy_single(h),
        abs_entropy: abs_entropy(h),
        weighted_mass: h.integrate(|x| 1.0 + x * x),
        l2_squared: h.l2_squared(),
        c_ell: c_ell(),
    }
}

/// Values and left-limit slopes of a piecewise-linear CDF at sorted query points.
fn sweep_cdf(cdf: &PiecewiseLinearCdf, queries: &[f64]) -> (Vec<f64>, Vec<f64>) {
    let (kn, vals) = (cdf.knots(), cdf.values());
    let nk = kn.len();
    let mut k = 0;
    let mut value = Vec::with_capacity(queries.len());
    let mut slope = Vec::with_capacity(queries.len());
    for &x in queries {
        while k < nk && kn[k] < x {
            k += 1;
        }
        if k == 0 {
            value.push(vals[0]);
            slope.push(0.0);
        } else if k == nk {
            value.push(vals[nk - 1]);
            slope.push(0.0);
        } else {
            let s = (vals[k] - vals[k - 1]) / (kn[k] - kn[k - 1]);
            value.push(vals[k - 1] + s * (x - kn[k - 1]));
            slope.push(s);
        }
    }
    (value, slope)
}

/// `∫ f g` of the two reconstructions, by one merge sweep.
pub fn cross_term(fq: &QuantileState, gq: &QuantileState) -> f64 {
    cross_term_with_gradient(fq, gq, false).0
}

/// `∫ f g` and, if requested, its gradient with respect to the positions of `fq`.
///
/// At a breakpoint of `g` the left-cell density is used.
pub(crate) fn cross_term_with_gradient(
    fq: &QuantileState,
    gq: &QuantileState,
    want_gradient: bool,
) -> (f64, Vec<f64>) {
    let edges = fq.cell_edges();
    let (g_cdf_at, g_at) = sweep_cdf(&gq.cdf(), &edges);
    let n_cells = edges.len() - 1;
    let mut total = 0.0;
    let mut d_edge = if want_gradient {
        vec![0.0; edges.len()]
    } else {
        Vec::new()
    };
    for c in 0..n_cells {
        let width = edges[c + 1] - edges[c];
        let rho = fq.cell_mass(c) / width;
        let dg = g_cdf_at[c + 1] - g_cdf_at[c];
        total += rho * dg;
        if want_gradient {
            let avg = dg / width;
            d_edge[c + 1] += rho * (g_at[c + 1] - avg);
            d_edge[c] += rho * (avg - g_at[c]);
        }
    }
    if !want_gradient {
        return (total, Vec::new());
    }
    (total, edge_gradient_to_positions(&d_edge))
}

/// Chain rule from the `N + 2` reconstruction edges to the `N` positions.
pub(crate) fn edge_gradient_to_positions(d_edge: &[f64]) -> Vec<f64> {
    let n = d_edge.len() - 2;
    let mut grad = d_edge[1..=n].to_vec();
    grad[0] += 1.5 * d_edge[0];
    grad[1] -= 0.5 * d_edge[0];
    grad[n - 1] += 1.5 * d_edge[n + 1];
    grad[n - 2] -= 0.5 * d_edge[n + 1];
    grad
}

/// Finite-difference derivative of a nonnegative profile.
///
/// Centered where both neighbours are positive, one-sided at the edge of the
/// positive set, zero outside it.
pub fn derivative(h: &[f64], dx: f64) -> Vec<f64> {
    let n = h.len();
    (0..n)
        .map(|i| {
            if h[i] <= 0.0 {
                return 0.0;
            }
            let left = i > 0 && h[i - 1] > 0.0;
            let right = i + 1 < n && h[i + 1] > 0.0;
            match (left, right) {
                (true, true) => (h[i + 1] - h[i - 1]) / (2.0 * dx),
                (false, true) => (h[i + 1] - h[i]) / dx,
                (true, false) => (h[i] - h[i - 1]) / dx,
                (false, false) => 0.0,
            }
        })
        .collect()
}

/// Pressure profiles `(a f + c g, c f + b g)` of a grid pair.
pub fn pressure_profiles(s: &PairState<GridDensity>) -> Result<(Vec<f64>, Vec<f64>)> {
    s.f.check_same_grid(&s.g)?;
    Ok(s.f
        .values()
        .iter()
        .zip(s.g.values())
        .map(|(&f, &g)| s.model.pressures(f, g))
        .unzip())
}

/// `(∫ f|∂ₓ(af+cg)|², ∫ g|∂ₓ(cf+bg)|²)` by centered differences.
pub fn pressure_dissipation(s: &PairState<GridDensity>) -> Result<(f64, f64)> {
    let dx = s.f.grid().dx();
    let (pf, pg) = pressure_profiles(s)?;
    let (dpf, dpg) = (derivative(&pf, dx), derivative(&pg, dx));
    let mut out = (0.0, 0.0);
    for i in 0..pf.len() {
        out.0 += s.f.values()[i] * dpf[i] * dpf[i];
        out.1 += s.g.values()[i] * dpg[i] * dpg[i];
    }
    Ok((dx * out.0, dx * out.1))
}

/// Energy dissipation `∫ f|∂ₓ(af+cg)|²/w_f + g|∂ₓ(cf+bg)|²/w_g`, i.e.
/// `∫ f((1+R)f' + Rg')² + R R_μ g(f' + g')²` for unit masses.
pub fn energy_dissipation_rate(s: &PairState<GridDensity>) -> Result<f64> {
    let (df, dg) = pressure_dissipation(s)?;
    Ok(df / s.model.w_f + dg / s.model.w_g)
}

/// Entropy dissipation `∫ a f'² + 2c f'g' + b g'²`, i.e. `∫ |f'|² + R|f' + g'|²`
/// for unit masses.
pub fn entropy_dissipation_rate(s: &PairState<GridDensity>) -> Result<f64> {
    s.f.check_same_grid(&s.g)?;
    let dx = s.f.grid().dx();
    let df = derivative(s.f.values(), dx);
    let dg = derivative(s.g.values(), dx);
    let m = &s.model;
    let sum: f64 = df
        .iter()
        .zip(&dg)
        .map(|(p, q)| m.a * p * p + 2.0 * m.c * p * q + m.b * q * q)
        .sum();
    Ok(dx * sum.max(0.0))
}

/// Masses of the physical components and the ratio `η² = m_f / m_g`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Scaling {
    pub mass_f: f64,
    pub mass_g: f64,
    pub eta_squared: f64,
}

/// Normalizes both components to unit mass and folds the masses into the model.
pub fn rescale_to_unit_mass(
    f_raw: &GridDensity,
    g_raw: &GridDensity,
    phys: PhysParams,
) -> Result<(PairState<GridDensity>, Scaling)> {
    f_raw.check_same_grid(g_raw)?;
    let (mf, mg) = (f_raw.mass(), g_raw.mass());
    if !(mf > 0.0) {
        return Err(FunctionalError::ZeroMass("f"));
    }
    if !(mg > 0.0) {
        return Err(FunctionalError::ZeroMass("g"));
    }
    let model = Model::with_masses(phys, mf, mg)?;
    let state = PairState::new(f_raw.scaled(1.0 / mf)?, g_raw.scaled(1.0 / mg)?, model);
    Ok((
        state,
        Scaling {
            mass_f: mf,
            mass_g: mg,
            eta_squared: mf / mg,
        },
    ))
}

/// Undoes [`rescale_to_unit_mass`].
pub fn unscale(s: &PairState<GridDensity>) -> Result<(GridDensity, GridDensity)> {
    Ok((s.f.scaled(s.model.mass_f)?, s.g.scaled(s.model.mass_g)?))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::transport1d::Grid;

    fn grid() -> Grid {
        Grid::from_bounds(-4.0, 4.0, 800).unwrap()
    }

    fn uniform(g: &Grid, a: f64, b: f64) -> GridDensity {
        GridDensity::from_fn(*g, |x| if x > a && x < b { 1.0 / (b - a) } else { 0.0 }).unwrap()
    }

    fn pair(f: GridDensity, g: GridDensity, r: f64, r_mu: f64) -> PairState<GridDensity> {
        PairState::new(f, g, Model::standard(PhysParams::new(r, r_mu).unwrap()))
    }

    #[test]
    fn params_validation() {
        assert!(PhysParams::new(-1.0, 1.0).is_err());
        assert!(PhysParams::new(1.0, 0.0).is_err());
        assert!(PhysParams::new(1.0, f64::NAN).is_err());
        let e = PhysParams::new(-1.0, 1.0).unwrap_err().to_string();
        assert!(e.contains("must be > 0"), "{e}");
    }

    #[test]
    fn standard_model_coefficients() {
        let m = Model::standard(PhysParams::new(2.0, 3.0).unwrap());
        assert_eq!((m.a, m.b, m.c, m.w_f), (3.0, 2.0, 2.0, 1.0));
        assert!((m.w_g - 2.0 / 3.0).abs() < 1e-15);
        assert_eq!(m.eta_squared(), 1.0);
    }

    #[test]
    fn energy_closed_forms() {
        let g = grid();
        let u = uniform(&g, 0.0, 1.0);
        let s = pair(u.clone(), u.clone(), 1.0, 1.0);
        assert!((energy(&s).unwrap() - 2.5).abs() < 1e-12);
        let s = pair(u, uniform(&g, 2.0, 3.0), 2.0, 1.0);
        assert!((energy(&s).unwrap() - 2.5).abs() < 1e-12);
    }

    #[test]
    fn lagrangian_energy_closed_forms() {
        // The gap sum of N uniform particles is 1 - 1/N; the overlap is exact.
        let u = QuantileState::uniform(0.0, 1.0, 32).unwrap();
        let l = 1.0 - 1.0 / 32.0;
        let m = Model::standard(PhysParams::new(1.0, 1.0).unwrap());
        let s = PairState::new(u.clone(), u.clone(), m);
        assert!((energy(&s).unwrap() - 0.5 * (3.0 * l + 2.0)).abs() < 1e-12);
        assert!((energy(&s).unwrap() - 2.5).abs() < 2.0 / 32.0);
        let v = QuantileState::uniform(2.0, 3.0, 32).unwrap();
        let m = Model::standard(PhysParams::new(2.0, 1.0).unwrap());
        assert!((energy(&PairState::new(u, v, m)).unwrap() - 2.5 * l).abs() < 1e-12);
    }

    #[test]
    fn entropy_closed_forms() {
        let g = grid();
        let u = uniform(&g, 0.0, 1.0);
        let s = pair(u.clone(), u.clone(), 1.5, 0.5);
        assert!(entropy_pair(&s).unwrap().abs() < 1e-12);
        let l = 2.0;
        let w = uniform(&g, 0.0, l);
        let s = pair(w.clone(), w.clone(), 1.5, 0.5);
        let expect = (1.0 + 1.5 / 0.5) * -(l.ln());
        assert!((entropy_pair(&s).unwrap() - expect).abs() < 1e-12);
        assert!((entropy_single(&w) + l.ln()).abs() < 1e-12);
        assert!((abs_entropy(&w) - l.ln()).abs() < 1e-12);
        assert!(abs_entropy(&u).abs() < 1e-12);
    }

    #[test]
    fn gaussian_entropy() {
        let g = Grid::from_bounds(-8.0, 8.0, 4096).unwrap();
        let sigma: f64 = 0.7;
        let h = GridDensity::from_fn(g, |x| {
            (-x * x / (2.0 * sigma * sigma)).exp() / (sigma * (2.0 * std::f64::consts::PI).sqrt())
        })
        .unwrap();
        let expect = -0.5 * (2.0 * std::f64::consts::PI * std::f64::consts::E * sigma * sigma).ln();
        assert!((entropy_single(&h) - expect).abs() < 1e-6);
    }

    #[test]
    fn c_ell_matches_closed_form() {
        let closed = 1.5 * std::f64::consts::PI.sqrt() / std::f64::consts::E;
        assert!((c_ell() - closed).abs() < 1e-12, "{} vs {closed}", c_ell());
    }

    #[test]
    fn entropy_bounds_on_peaked_gaussian() {
        let g = Grid::from_bounds(-2.0, 2.0, 4000).unwrap();
        let sigma: f64 = 0.01;
        let h = GridDensity::from_fn(g, |x| (-x * x / (2.0 * sigma * sigma)).exp())
            .unwrap()
            .normalized()
            .unwrap();
        let b = entropy_bounds(&h);
        assert!(b.lower_holds() && b.upper_holds(), "{b:?}");
        assert!(b.entropy > 2.0);
    }

    #[test]
    fn cross_term_closed_forms() {
        let u = QuantileState::uniform(0.0, 1.0, 16).unwrap();
        assert!((cross_term(&u, &u) - 1.0).abs() < 1e-12);
        let v = QuantileState::uniform(2.0, 3.0, 16).unwrap();
        assert_eq!(cross_term(&u, &v), 0.0);
        let w = QuantileState::uniform(0.5, 1.5, 16).unwrap();
        assert!((cross_term(&u, &w) - 0.5).abs() < 1e-12);
        assert!((cross_term(&w, &u) - 0.5).abs() < 1e-12);
    }

    #[test]
    fn cross_term_gradient_matches_differences() {
        let x = QuantileState::new(vec![-0.3, 0.1, 0.25, 0.7, 1.1, 1.2]).unwrap();
        let y = QuantileState::new(vec![0.05, 0.4, 0.45, 0.9, 1.6]).unwrap();
        let (_, grad) = cross_term_with_gradient(&x, &y, true);
        let h = 1e-7;
        for i in 0..x.len() {
            let mut p = x.positions().to_vec();
            let mut m = p.clone();
            p[i] += h;
            m[i] -= h;
            let fd = (cross_term(&QuantileState::new(p).unwrap(), &y)
                - cross_term(&QuantileState::new(m).unwrap(), &y))
                / (2.0 * h);
            assert!((fd - grad[i]).abs() < 1e-6, "i={i} fd={fd} an={}", grad[i]);
        }
    }

    #[test]
    fn derivative_stencils() {
        let d = derivative(&[0.0, 1.0, 2.0, 4.0, 0.0], 0.5);
        assert_eq!(d, vec![0.0, 2.0, 3.0, 4.0, 0.0]);
        assert_eq!(derivative(&[0.0, 3.0, 0.0], 1.0), vec![0.0, 0.0, 0.0]);
    }

    #[test]
    fn dissipation_of_flat_profiles() {
        let g = grid();
        let u = uniform(&g, -2.0, 2.0);
        let s = pair(u.clone(), u, 1.0, 1.0);
        assert!(energy_dissipation_rate(&s).unwrap() < 1e-12);
        assert!(entropy_dissipation_rate(&s).unwrap() < 1e-12);
    }

    #[test]
    fn dissipation_reductions() {
        let g = grid();
        let f = GridDensity::from_fn(g, |x| (-x * x).exp()).unwrap();
        let zero = GridDensity::zeros(g);
        let r = 1.7;
        let s = pair(f.clone(), zero, r, 0.3);
        let df = derivative(f.values(), g.dx());
        let direct: f64 = g.dx()
            * f.values()
                .iter()
                .zip(&df)
                .map(|(v, d)| v * d * d)
                .sum::<f64>();
        let got = energy_dissipation_rate(&s).unwrap();
        assert!((got - (1.0 + r) * (1.0 + r) * direct).abs() < 1e-12 * got);

        let s = pair(f.clone(), f.clone(), r, 0.3);
        let grad2: f64 = g.dx() * df.iter().map(|d| d * d).sum::<f64>();
        let got = entropy_dissipation_rate(&s).unwrap();
        assert!((got - (1.0 + 4.0 * r) * grad2).abs() < 1e-10 * got);
    }

    #[test]
    fn rescaling() {
        let g = grid();
        let u = uniform(&g, 0.0, 1.0);
        let phys = PhysParams::new(1.0, 2.0).unwrap();
        let (s, sc) = rescale_to_unit_mass(&u, &u, phys).unwrap();
        assert_eq!(sc.eta_squared, 1.0);
        assert_eq!(s.model, Model::standard(phys));
        assert_eq!(s.f, u);

        let (s, sc) =
            rescale_to_unit_mass(&u.scaled(2.0).unwrap(), &u.scaled(0.5).unwrap(), phys).unwrap();
        assert!((sc.eta_squared - 4.0).abs() < 1e-12);
        assert!((s.f.mass() - 1.0).abs() < 1e-12 && (s.g.mass() - 1.0).abs() < 1e-12);
        let (f, gg) = unscale(&s).unwrap();
        assert!((f.mass() - 2.0).abs() < 1e-12 && (gg.mass() - 0.5).abs() < 1e-12);

        assert!(matches!(
            rescale_to_unit_mass(&GridDensity::zeros(g), &u, phys),
            Err(FunctionalError::ZeroMass("f"))
        ));
    }

    #[test]
    fn rescaled_energy_matches_physical_energy() {
        // E_phys(f, g) = m_f m_g · E_model(F, G) for the rescaled coefficients
        let g = grid();
        let f = uniform(&g, -1.0, 1.0).scaled(2.0).unwrap();
        let h = uniform(&g, 0.0, 3.0).scaled(0.5).unwrap();
        let phys = PhysParams::new(1.3, 0.7).unwrap();
        let direct = energy(&pair(f.clone(), h.clone(), 1.3, 0.7)).unwrap();
        let (s, sc) = rescale_to_unit_mass(&f, &h, phys).unwrap();
        let scaled = energy(&s).unwrap();
        assert!((direct - sc.mass_f * sc.mass_g * scaled).abs() < 1e-10);
    }
}
