//! One minimizing-movement step in quantile coordinates, the step driver, and
//! the optimality certificates of a computed step.
//!
//! A step minimizes
//!
//! ```text
//! (w_f/2τ) W₂²(f, f_prev) + (w_g/2τ) W₂²(g, g_prev) + E(f, g)
//! ```
//!
//! over particle positions. With `N` equal-mass particles the transport terms
//! are `(w/2τN) Σ (X_i - X_i^prev)²` and the energy is an explicit function of the
//! gaps, so the objective is smooth on the open cone of increasing positions.

use std::collections::VecDeque;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::diagnostics::{DiagnosticsRecord, Snapshot, Trajectory};
use crate::functionals::{
    cross_term_with_gradient, derivative, energy, entropy_dissipation_rate, entropy_pair,
    pressure_profiles, FunctionalError, Model, PairState,
};
use crate::testfn::TestFunction;
use crate::transport1d::{
    smooth_density_from_quantiles, wasserstein2, wasserstein2_squared_quantiles, Grid, GridDensity,
    QuantileState, TransportError,
};

pub const DEFAULT_MAX_ITER: usize = 500;
pub const DEFAULT_BARRIER_SHRINK: f64 = 0.1;
/// Barrier weights below this end the continuation; a final stage runs without barrier.
pub const BARRIER_FLOOR: f64 = 1e-12;
/// Tolerance of the descent certificate `objective(returned) ≤ objective(prev) + DESCENT_TOL`.
pub const DESCENT_TOL: f64 = 1e-12;

const MEMORY: usize = 10;
const ARMIJO: f64 = 1e-4;
const TO_BOUNDARY: f64 = 0.995;
const MAX_BACKTRACK: usize = 60;
/// Relative size of rounding error in an objective value.
const VALUE_NOISE: f64 = 1e-14;
/// Consecutive steepest-descent steps without decrease that end a stage.
const MAX_STALLS: usize = 3;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum JkoError {
    #[error("invalid scheme parameters: {0}")]
    InvalidParams(String),
    #[error("size mismatch: {left} vs {right}")]
    SizeMismatch { left: usize, right: usize },
    #[error("positions are not strictly increasing")]
    NonMonotone,
    #[error("step {step} did not converge (gradient norm {grad_norm:e})")]
    NoConvergence { step: usize, grad_norm: f64 },
    #[error(transparent)]
    Functional(#[from] FunctionalError),
    #[error(transparent)]
    Transport(#[from] TransportError),
}

pub type Result<T> = std::result::Result<T, JkoError>;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct JkoParams {
    pub tau: f64,
    pub model: Model,
    pub n: usize,
    /// Euclidean norm of the objective gradient at which a step counts as converged.
    pub grad_tol: f64,
    /// Iteration cap per barrier stage.
    pub max_iter: usize,
    /// First barrier weight; `None` means `max(1e-6, τ E(prev) / N)`.
    pub barrier_mu0: Option<f64>,
    pub barrier_shrink: f64,
}

impl JkoParams {
    pub fn new(tau: f64, model: Model, n: usize) -> Result<Self> {
        let p = Self {
            tau,
            model,
            n,
            grad_tol: 1e-9 * n as f64,
            max_iter: DEFAULT_MAX_ITER,
            barrier_mu0: None,
            barrier_shrink: DEFAULT_BARRIER_SHRINK,
        };
        p.validate()?;
        Ok(p)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(JkoError::InvalidParams(m));
        if !(self.tau > 0.0 && self.tau.is_finite()) {
            return bad(format!("tau must be > 0, got {}", self.tau));
        }
        if self.n < 4 {
            return bad(format!("need at least 4 particles, got {}", self.n));
        }
        if !(self.grad_tol > 0.0) {
            return bad(format!("grad_tol must be > 0, got {}", self.grad_tol));
        }
        if self.max_iter == 0 {
            return bad("max_iter must be positive".into());
        }
        if !(self.barrier_shrink > 0.0 && self.barrier_shrink < 1.0) {
            return bad(format!(
                "barrier_shrink must lie in (0, 1), got {}",
                self.barrier_shrink
            ));
        }
        if let Some(mu) = self.barrier_mu0 {
            if !(mu > 0.0 && mu.is_finite()) {
                return bad(format!("barrier_mu0 must be > 0, got {mu}"));
            }
        }
        self.model.phys.validate()?;
        Ok(())
    }

    /// Allowance for first-order optimality error in the inequality certificates.
    pub fn slack(&self, objective: f64) -> f64 {
        10.0 * self.grad_tol * (1.0 + objective.abs())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MinimizeReport {
    pub iterations: usize,
    pub grad_norm: f64,
    pub objective: f64,
    pub stages: usize,
    pub converged: bool,
    /// No accepted iteration raised the stage objective beyond rounding error.
    pub descent: bool,
    /// The continuation result failed the descent certificate and the step was
    /// recomputed from the previous state without barrier.
    pub fallback: bool,
}

struct Species<'a> {
    prev: &'a [f64],
    weight: f64,
    self_coef: f64,
}

struct Problem<'a> {
    species: Vec<Species<'a>>,
    cross: f64,
    tau: f64,
    n: usize,
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

/// Solves a symmetric tridiagonal system in place.
fn thomas(diag: &mut [f64], off: &[f64], rhs: &mut [f64]) {
    let n = diag.len();
    for i in 1..n {
        let m = off[i - 1] / diag[i - 1];
        diag[i] -= m * off[i - 1];
        rhs[i] -= m * rhs[i - 1];
    }
    rhs[n - 1] /= diag[n - 1];
    for i in (0..n - 1).rev() {
        rhs[i] = (rhs[i] - off[i] * rhs[i + 1]) / diag[i];
    }
}

/// Relative distance below which an f-edge and a g-edge count as coincident.
const TIE_TOL: f64 = 1e-10;

/// Coincident f-edge `key.0` and g-edge `key.1` at a convex kink of the
/// objective. `r` is the gradient of their separation; its first `split`
/// entries belong to the f-edge.
struct Tie {
    key: (usize, usize),
    r: Vec<(usize, f64)>,
    split: usize,
    jump: f64,
    theta_f: f64,
    theta_g: f64,
    /// Least-norm side weight: 0 selects the gradient with the f-edge on the
    /// left, 1 with the f-edge on the right.
    weight: f64,
}

impl Tie {
    fn holds(&self) -> bool {
        self.weight > 0.0 && self.weight < 1.0
    }
}

/// Sparse derivative of reconstruction edge `a` with respect to the positions.
fn edge_derivative(a: usize, n: usize, offset: usize, sign: f64) -> Vec<(usize, f64)> {
    if a == 0 {
        vec![(offset, 1.5 * sign), (offset + 1, -0.5 * sign)]
    } else if a == n + 1 {
        vec![(offset + n - 1, 1.5 * sign), (offset + n - 2, -0.5 * sign)]
    } else {
        vec![(offset + a - 1, sign)]
    }
}

/// Keeps `d` tangent to the ties that hold and stops it from crossing a tie
/// whose least-norm weight selects the side the iterate is on.
fn constrain(d: &mut [f64], ties: &[Tie]) {
    let mut set: Vec<&Tie> = ties.iter().filter(|t| t.holds()).collect();
    loop {
        project(d, &set);
        let before = set.len();
        for t in ties.iter().filter(|t| !t.holds()) {
            if set.iter().any(|u| u.key == t.key) {
                continue;
            }
            let dr: f64 = t.r.iter().map(|&(i, r)| d[i] * r).sum();
            if (t.weight == 1.0 && dr < 0.0) || (t.weight == 0.0 && dr > 0.0) {
                set.push(t);
            }
        }
        if set.len() == before {
            break;
        }
    }
}

/// Removes from `d` its components along the separation gradients of `ties`.
fn project(d: &mut [f64], ties: &[&Tie]) {
    let mut basis: Vec<Vec<f64>> = Vec::with_capacity(ties.len());
    for t in ties {
        let mut q = vec![0.0; d.len()];
        for &(i, r) in &t.r {
            q[i] += r;
        }
        for b in &basis {
            let c = dot(b, &q);
            for (qi, bi) in q.iter_mut().zip(b) {
                *qi -= c * bi;
            }
        }
        let nq = norm(&q);
        if nq > 1e-12 {
            q.iter_mut().for_each(|x| *x /= nq);
            let c = dot(&q, d);
            for (di, qi) in d.iter_mut().zip(&q) {
                *di -= c * qi;
            }
            basis.push(q);
        }
    }
}

impl Problem<'_> {
    fn dim(&self) -> usize {
        self.species.len() * self.n
    }

    fn feasible(&self, z: &[f64]) -> bool {
        z.chunks(self.n)
            .all(|x| x.iter().all(|v| v.is_finite()) && x.windows(2).all(|w| w[1] > w[0]))
    }

    fn eval(&self, z: &[f64], mu: f64) -> Option<(f64, Vec<f64>)> {
        if !self.feasible(z) {
            return None;
        }
        let n = self.n;
        let nf = n as f64;
        let mut value = 0.0;
        let mut grad = vec![0.0; self.dim()];
        for (s, sp) in self.species.iter().enumerate() {
            let x = &z[s * n..(s + 1) * n];
            let gx = &mut grad[s * n..(s + 1) * n];
            let t = sp.weight / (nf * self.tau);
            for i in 0..n {
                let d = x[i] - sp.prev[i];
                value += 0.5 * t * d * d;
                gx[i] += t * d;
            }
            let k = 0.5 * sp.self_coef / (nf * nf);
            for j in 0..n - 1 {
                let gap = x[j + 1] - x[j];
                value += k / gap;
                let mut d_gap = -k / (gap * gap);
                if mu > 0.0 {
                    value -= mu * gap.ln();
                    d_gap -= mu / gap;
                }
                gx[j] -= d_gap;
                gx[j + 1] += d_gap;
            }
        }
        if self.species.len() == 2 && self.cross != 0.0 {
            let qx = QuantileState::new(z[..n].to_vec()).ok()?;
            let qy = QuantileState::new(z[n..].to_vec()).ok()?;
            let (c, gx) = cross_term_with_gradient(&qx, &qy, true);
            let (_, gy) = cross_term_with_gradient(&qy, &qx, true);
            value += self.cross * c;
            for i in 0..n {
                grad[i] += self.cross * gx[i];
                grad[n + i] += self.cross * gy[i];
            }
        }
        Some((value, grad))
    }

    /// Applies the inverse of the per-species tridiagonal Hessian of the
    /// transport, self-energy and barrier terms.
    fn precondition(&self, z: &[f64], mu: f64, v: &[f64]) -> Vec<f64> {
        let n = self.n;
        let nf = n as f64;
        let mut out = v.to_vec();
        for (s, sp) in self.species.iter().enumerate() {
            let x = &z[s * n..(s + 1) * n];
            let mut diag = vec![sp.weight / (nf * self.tau); n];
            let mut off = vec![0.0; n - 1];
            let k = sp.self_coef / (nf * nf);
            for j in 0..n - 1 {
                let gap = x[j + 1] - x[j];
                let h = k / (gap * gap * gap) + mu / (gap * gap);
                diag[j] += h;
                diag[j + 1] += h;
                off[j] = -h;
            }
            thomas(&mut diag, &off, &mut out[s * n..(s + 1) * n]);
        }
        out
    }

    fn max_step(&self, z: &[f64], d: &[f64]) -> f64 {
        let mut alpha = f64::INFINITY;
        for (x, dx) in z.chunks(self.n).zip(d.chunks(self.n)) {
            for j in 0..self.n - 1 {
                let shrink = dx[j + 1] - dx[j];
                if shrink < 0.0 {
                    alpha = alpha.min(-(x[j + 1] - x[j]) / shrink);
                }
            }
        }
        (TO_BOUNDARY * alpha).min(1.0)
    }

    /// Edge coincidences at which the cross term has a convex kink.
    fn ties(&self, z: &[f64]) -> Vec<Tie> {
        let n = self.n;
        if self.species.len() != 2 || self.cross == 0.0 {
            return Vec::new();
        }
        let (Ok(qx), Ok(qy)) = (
            QuantileState::new(z[..n].to_vec()),
            QuantileState::new(z[n..].to_vec()),
        ) else {
            return Vec::new();
        };
        let (ef, eg) = (qx.cell_edges(), qy.cell_edges());
        let (rf, rg) = (qx.cell_densities(), qy.cell_densities());
        let sides = |r: &[f64], a: usize| {
            let left = if a == 0 { 0.0 } else { r[a - 1] };
            let right = if a == n + 1 { 0.0 } else { r[a] };
            (left, right)
        };
        let mut out = Vec::new();
        let mut b0 = 0;
        for (a, &x) in ef.iter().enumerate() {
            let tol = TIE_TOL * (1.0 + x.abs());
            while b0 < eg.len() && eg[b0] < x - tol {
                b0 += 1;
            }
            let mut b = b0;
            while b < eg.len() && eg[b] <= x + tol {
                let (fl, fr) = sides(&rf, a);
                let (gl, gr) = sides(&rg, b);
                let jump = self.cross * (fl - fr) * (gr - gl);
                if jump > 0.0 {
                    let mut r = edge_derivative(a, n, 0, 1.0);
                    let split = r.len();
                    r.extend(edge_derivative(b, n, n, -1.0));
                    let t = x - eg[b];
                    out.push(Tie {
                        key: (a, b),
                        r,
                        split,
                        jump,
                        theta_f: if t > 0.0 { 1.0 } else { 0.0 },
                        theta_g: if t >= 0.0 { 1.0 } else { 0.0 },
                        weight: 0.0,
                    });
                }
                b += 1;
            }
        }
        out
    }

    /// One-sided derivative of the objective at `z` along `v`; edges within the
    /// tie tolerance count as coincident.
    fn one_sided_derivative(&self, z: &[f64], v: &[f64]) -> Option<f64> {
        let (_, g) = self.eval(z, 0.0)?;
        let mut d = dot(&g, v);
        for t in self.ties(z) {
            let rv: f64 = t.r.iter().map(|&(i, r)| v[i] * r).sum();
            let th = if rv > 0.0 {
                1.0
            } else if rv < 0.0 {
                0.0
            } else {
                continue;
            };
            for (k, &(i, r)) in t.r.iter().enumerate() {
                let cur = if k < t.split { t.theta_f } else { t.theta_g };
                d += (th - cur) * t.jump * r * v[i];
            }
        }
        Some(d)
    }

    /// Splits the gradient at `z` into the search gradient and the
    /// stationarity measure. The measure is the norm of the least-norm element
    /// of the subdifferential spanned by the one-sided gradients at all ties. The
    /// search gradient takes that element only along ties that hold. Returns
    /// the ties with their least-norm weights.
    fn tie_gradient(&self, z: &[f64], g: &mut [f64]) -> (f64, Vec<Tie>) {
        let (v, ties) = self.least_norm(z, g);
        (norm(&v), ties)
    }

    /// Least-norm element of the subdifferential at `z` given the one-sided
    /// gradient `g`; `g` becomes the search gradient.
    fn least_norm(&self, z: &[f64], g: &mut [f64]) -> (Vec<f64>, Vec<Tie>) {
        let ties = self.ties(z);
        if ties.is_empty() {
            return (g.to_vec(), ties);
        }
        let mut v = g.to_vec();
        for t in &ties {
            for (k, &(i, r)) in t.r.iter().enumerate() {
                let theta = if k < t.split { t.theta_f } else { t.theta_g };
                v[i] -= t.jump * theta * r;
            }
        }
        let rr: Vec<f64> = ties
            .iter()
            .map(|t| t.r.iter().map(|&(_, r)| r * r).sum())
            .collect();
        let mut theta = vec![0.0; ties.len()];
        for _ in 0..200 {
            let mut change: f64 = 0.0;
            for (k, t) in ties.iter().enumerate() {
                let vr: f64 = t.r.iter().map(|&(i, r)| v[i] * r).sum();
                let next = (theta[k] - vr / (t.jump * rr[k])).clamp(0.0, 1.0);
                let step = next - theta[k];
                if step != 0.0 {
                    for &(i, r) in &t.r {
                        v[i] += step * t.jump * r;
                    }
                    theta[k] = next;
                    change = change.max(step.abs());
                }
            }
            if change < 1e-14 {
                break;
            }
        }
        let mut ties = ties;
        for (t, th) in ties.iter_mut().zip(theta) {
            t.weight = th;
            if t.holds() {
                for (k, &(i, r)) in t.r.iter().enumerate() {
                    let cur = if k < t.split { t.theta_f } else { t.theta_g };
                    g[i] += (th - cur) * t.jump * r;
                }
            }
        }
        (v, ties)
    }

    /// Preconditioned L-BFGS on one barrier stage. Directions are kept tangent to
    /// active ties, and the gradient there is the least-norm subgradient.
    /// Returns `(value, stationarity norm)`.
    fn solve_stage(
        &self,
        z: &mut Vec<f64>,
        mu: f64,
        tol: f64,
        max_iter: usize,
        report: &mut MinimizeReport,
    ) -> (f64, f64) {
        let (mut f, mut g) = self
            .eval(z, mu)
            .expect("stage starts from a feasible point");
        let (mut stat, mut active) = self.tie_gradient(z, &mut g);
        let mut memory: VecDeque<(Vec<f64>, Vec<f64>, f64)> = VecDeque::with_capacity(MEMORY);
        let mut stalls = 0;
        for _ in 0..max_iter {
            if stat <= tol {
                break;
            }
            let mut d = self.direction(z, mu, &g, &memory);
            constrain(&mut d, &active);
            let mut gd = dot(&g, &d);
            if !(gd < 0.0) {
                memory.clear();
                d = self.precondition(z, mu, &g).iter().map(|v| -v).collect();
                constrain(&mut d, &active);
                gd = dot(&g, &d);
            }
            if !(gd < 0.0) {
                d = g.iter().map(|v| -v).collect();
                constrain(&mut d, &active);
                gd = dot(&g, &d);
                if !(gd < 0.0) {
                    break;
                }
            }
            let noise = VALUE_NOISE * (1.0 + f.abs());
            let Some((trial, ft, mut gt)) = self.line_search(z, &d, f, gd, mu, noise) else {
                break;
            };
            if ft > f + noise {
                report.descent = false;
            }
            let (next_stat, next_active) = self.tie_gradient(&trial, &mut gt);
            // A step without decrease means the curvature pairs describe a kink
            // rather than the objective; restart from the preconditioned gradient.
            let stalled = !(ft < f);
            if stalled {
                stalls = if memory.is_empty() { stalls + 1 } else { 0 };
                memory.clear();
            } else {
                stalls = 0;
            }
            if next_active
                .iter()
                .filter(|t| t.holds())
                .map(|t| t.key)
                .ne(active.iter().filter(|t| t.holds()).map(|t| t.key))
            {
                memory.clear();
            }
            let s: Vec<f64> = trial.iter().zip(z.iter()).map(|(a, b)| a - b).collect();
            let y: Vec<f64> = gt.iter().zip(&g).map(|(a, b)| a - b).collect();
            let sy = dot(&s, &y);
            if !stalled && sy > 1e-12 * norm(&s) * norm(&y) && sy > 0.0 {
                if memory.len() == MEMORY {
                    memory.pop_front();
                }
                memory.push_back((s, y, 1.0 / sy));
            }
            *z = trial;
            f = ft;
            g = gt;
            active = next_active;
            stat = next_stat;
            report.iterations += 1;
            if stalls >= MAX_STALLS {
                break;
            }
        }
        (f, stat)
    }

    /// Backtracking from the largest feasible step. Armijo with a strict decrease,
    /// or an approximate Wolfe step once the value change is below `noise`. When
    /// the slope flips sign between a rejected step and a shorter one that is still
    /// too steep, bisect on the slope; this lands on kinks along `d`.
    fn line_search(
        &self,
        z: &[f64],
        d: &[f64],
        f: f64,
        gd: f64,
        mu: f64,
        noise: f64,
    ) -> Option<(Vec<f64>, f64, Vec<f64>)> {
        let at = |alpha: f64| -> (Vec<f64>, Option<(f64, Vec<f64>)>) {
            let trial: Vec<f64> = z.iter().zip(d).map(|(a, b)| a + alpha * b).collect();
            let e = self.eval(&trial, mu);
            (trial, e)
        };
        let wolfe = |ft: f64, gtd: f64| {
            ft <= f + noise && gtd >= 0.9 * gd && gtd <= (2.0 * ARMIJO - 1.0) * gd
        };
        let mut alpha = self.max_step(z, d);
        let mut rejected: Option<f64> = None;
        for _ in 0..MAX_BACKTRACK {
            let (trial, e) = at(alpha);
            if let Some((ft, gt)) = e {
                let gtd = dot(&gt, d);
                if (ft < f && ft <= f + ARMIJO * alpha * gd) || wolfe(ft, gtd) {
                    return Some((trial, ft, gt));
                }
                if let (Some(hi), true) = (rejected, ft <= f + noise && gtd < 0.0) {
                    return Some(self.bisect_slope(
                        z,
                        d,
                        f,
                        gd,
                        mu,
                        noise,
                        (alpha, trial, ft, gt),
                        hi,
                    ));
                }
            }
            rejected = Some(alpha);
            alpha *= 0.5;
        }
        None
    }

    #[allow(clippy::too_many_arguments)]
    fn bisect_slope(
        &self,
        z: &[f64],
        d: &[f64],
        f: f64,
        gd: f64,
        mu: f64,
        noise: f64,
        lo: (f64, Vec<f64>, f64, Vec<f64>),
        mut hi: f64,
    ) -> (Vec<f64>, f64, Vec<f64>) {
        let (mut a_lo, mut best, mut f_lo, mut g_lo) = lo;
        for _ in 0..MAX_BACKTRACK {
            let mid = 0.5 * (a_lo + hi);
            if !(mid > a_lo && mid < hi) {
                break;
            }
            let trial: Vec<f64> = z.iter().zip(d).map(|(a, b)| a + mid * b).collect();
            match self.eval(&trial, mu) {
                Some((ft, gt)) => {
                    let gtd = dot(&gt, d);
                    if ft <= f + noise && gtd >= 0.9 * gd && gtd <= (2.0 * ARMIJO - 1.0) * gd {
                        return (trial, ft, gt);
                    }
                    if ft <= f + noise && gtd < 0.0 {
                        (a_lo, best, f_lo, g_lo) = (mid, trial, ft, gt);
                    } else {
                        hi = mid;
                    }
                }
                None => hi = mid,
            }
        }
        (best, f_lo, g_lo)
    }

    fn direction(
        &self,
        z: &[f64],
        mu: f64,
        g: &[f64],
        memory: &VecDeque<(Vec<f64>, Vec<f64>, f64)>,
    ) -> Vec<f64> {
        let mut q = g.to_vec();
        let mut alphas = Vec::with_capacity(memory.len());
        for (s, y, rho) in memory.iter().rev() {
            let a = rho * dot(s, &q);
            for (qi, yi) in q.iter_mut().zip(y) {
                *qi -= a * yi;
            }
            alphas.push(a);
        }
        let mut r = self.precondition(z, mu, &q);
        for ((s, y, rho), a) in memory.iter().zip(alphas.iter().rev()) {
            let b = rho * dot(y, &r);
            for (ri, si) in r.iter_mut().zip(s) {
                *ri += (a - b) * si;
            }
        }
        r.iter().map(|v| -v).collect()
    }

    fn minimize(&self, start: &[f64], p: &JkoParams) -> (Vec<f64>, MinimizeReport) {
        let (obj_prev, _) = self.eval(start, 0.0).expect("previous state is feasible");
        let mut report = MinimizeReport {
            iterations: 0,
            grad_norm: f64::INFINITY,
            objective: obj_prev,
            stages: 0,
            converged: false,
            descent: true,
            fallback: false,
        };
        let mut z = start.to_vec();
        let mut mu = p
            .barrier_mu0
            .unwrap_or_else(|| (p.tau * obj_prev / p.n as f64).max(1e-6));
        loop {
            let tol = if mu > 0.0 {
                p.grad_tol.max(1e2 * mu)
            } else {
                p.grad_tol
            };
            let (f, gn) = self.solve_stage(&mut z, mu, tol, p.max_iter, &mut report);
            report.stages += 1;
            if mu == 0.0 {
                report.objective = f;
                report.grad_norm = gn;
                break;
            }
            mu *= p.barrier_shrink;
            if mu < BARRIER_FLOOR {
                mu = 0.0;
            }
        }
        if report.objective > obj_prev + DESCENT_TOL {
            log::warn!(
                "continuation ended above the previous objective ({} > {}); restarting without barrier",
                report.objective,
                obj_prev
            );
            z = start.to_vec();
            report.fallback = true;
            let (f, gn) = self.solve_stage(&mut z, 0.0, p.grad_tol, p.max_iter, &mut report);
            report.stages += 1;
            report.objective = f;
            report.grad_norm = gn;
        }
        report.converged =
            report.grad_norm <= p.grad_tol && report.objective <= obj_prev + DESCENT_TOL;
        (z, report)
    }
}

/// Gradient of the particle entropy `Σ_c m_c ln(m_c / w_c)` with respect to the positions.
fn entropy_gradient(q: &QuantileState) -> Vec<f64> {
    let n = q.len();
    let rho = q.cell_densities();
    let mut g = vec![0.0; n];
    for k in 0..n + 2 {
        let right = if k <= n { rho[k] } else { 0.0 };
        let left = if k > 0 { rho[k - 1] } else { 0.0 };
        for (i, r) in edge_derivative(k, n, 0, 1.0) {
            g[i] += (right - left) * r;
        }
    }
    g
}

fn energy_problem<'a>(xs: &[&'a [f64]], m: &Model) -> Problem<'a> {
    Problem {
        species: xs
            .iter()
            .zip([m.a, m.b])
            .map(|(x, self_coef)| Species {
                prev: x,
                weight: 0.0,
                self_coef,
            })
            .collect(),
        cross: if xs.len() == 2 { m.c } else { 0.0 },
        tau: 1.0,
        n: xs[0].len(),
    }
}

fn positions_of<'a>(qs: &[&'a QuantileState]) -> (Vec<&'a [f64]>, Vec<f64>) {
    let xs: Vec<&[f64]> = qs.iter().map(|q| q.positions()).collect();
    (xs.clone(), xs.concat())
}

fn entropy_dissipation_of(qs: &[&QuantileState], m: &Model) -> Result<f64> {
    let (xs, z) = positions_of(qs);
    let nf = xs[0].len() as f64;
    let v: Vec<f64> = qs
        .iter()
        .flat_map(|q| entropy_gradient(q))
        .map(|g| -nf * g)
        .collect();
    energy_problem(&xs, m)
        .one_sided_derivative(&z, &v)
        .map(|d| -d)
        .ok_or(JkoError::NonMonotone)
}

fn pressure_dissipation_of(qs: &[&QuantileState], m: &Model) -> Result<Vec<f64>> {
    let (xs, z) = positions_of(qs);
    let n = xs[0].len();
    let prob = energy_problem(&xs, m);
    let (_, mut g) = prob.eval(&z, 0.0).ok_or(JkoError::NonMonotone)?;
    let (slope, _) = prob.least_norm(&z, &mut g);
    Ok(slope.chunks(n).map(|xi| n as f64 * dot(xi, xi)).collect())
}

fn energy_dissipation_of(qs: &[&QuantileState], m: &Model) -> Result<f64> {
    Ok(pressure_dissipation_of(qs, m)?
        .iter()
        .zip([m.w_f, m.w_g])
        .map(|(d, w)| d / w)
        .sum())
}

/// Weighted particle entropy `w_f H(f) + w_g H(g)` of the reconstructions.
pub fn particle_entropy(s: &PairState<QuantileState>) -> f64 {
    s.model.w_f * s.f.entropy() + s.model.w_g * s.g.entropy()
}

/// Rate at which the energy decays along the particle heat flow `-N ∇H`,
/// one-sided at edge coincidences. Particle counterpart of
/// `∫ |∂ₓf|² + R |∂ₓ(f+g)|²`.
pub fn particle_entropy_dissipation(s: &PairState<QuantileState>) -> Result<f64> {
    check_sizes(&[&s.g], s.f.len())?;
    entropy_dissipation_of(&[&s.f, &s.g], &s.model)
}

/// `(N|ξ_f|², N|ξ_g|²)` for the least-norm energy subgradient `ξ`. Particle
/// counterpart of `(∫ f|∂ₓ p_f|², ∫ g|∂ₓ p_g|²)`, the pressure at particle `i`
/// having gradient `N ξ_i`.
pub fn particle_pressure_dissipation(s: &PairState<QuantileState>) -> Result<(f64, f64)> {
    check_sizes(&[&s.g], s.f.len())?;
    let d = pressure_dissipation_of(&[&s.f, &s.g], &s.model)?;
    Ok((d[0], d[1]))
}

/// `Σ_s N|ξ_s|²/w_s`, the particle counterpart of
/// `∫ f|∂ₓ p_f|²/w_f + g|∂ₓ p_g|²/w_g`.
pub fn particle_energy_dissipation(s: &PairState<QuantileState>) -> Result<f64> {
    check_sizes(&[&s.g], s.f.len())?;
    energy_dissipation_of(&[&s.f, &s.g], &s.model)
}

/// Particle heat flow of one species run for time `t` by explicit Euler.
pub fn particle_heat_flow(q: &QuantileState, t: f64) -> Result<QuantileState> {
    let nf = q.len() as f64;
    let mut x = q.clone();
    let mut elapsed = 0.0;
    while elapsed < t {
        let w_min = x
            .cell_edges()
            .windows(2)
            .map(|w| w[1] - w[0])
            .fold(f64::INFINITY, f64::min);
        let dt = (0.1 * w_min * w_min).min(t - elapsed);
        let g = entropy_gradient(&x);
        let next = x
            .positions()
            .iter()
            .zip(&g)
            .map(|(p, d)| p - dt * nf * d)
            .collect();
        x = QuantileState::new(next).map_err(|_| JkoError::NonMonotone)?;
        elapsed += dt;
    }
    Ok(x)
}

fn pair_problem<'a>(px: &'a [f64], py: &'a [f64], p: &JkoParams) -> Problem<'a> {
    let m = &p.model;
    Problem {
        species: vec![
            Species {
                prev: px,
                weight: m.w_f,
                self_coef: m.a,
            },
            Species {
                prev: py,
                weight: m.w_g,
                self_coef: m.b,
            },
        ],
        cross: m.c,
        tau: p.tau,
        n: p.n,
    }
}

fn single_problem<'a>(px: &'a [f64], p: &JkoParams) -> Problem<'a> {
    Problem {
        species: vec![Species {
            prev: px,
            weight: p.model.w_f,
            self_coef: p.model.a,
        }],
        cross: 0.0,
        tau: p.tau,
        n: p.n,
    }
}

fn check_sizes(states: &[&QuantileState], n: usize) -> Result<()> {
    for s in states {
        if s.len() != n {
            return Err(JkoError::SizeMismatch {
                left: s.len(),
                right: n,
            });
        }
    }
    Ok(())
}

fn stacked(x: &QuantileState, y: &QuantileState) -> Vec<f64> {
    let mut z = x.positions().to_vec();
    z.extend_from_slice(y.positions());
    z
}

/// `(w_f/2τ) W₂²(x, prev_x) + (w_g/2τ) W₂²(y, prev_y) + E(x, y)`.
pub fn objective(
    x: &QuantileState,
    y: &QuantileState,
    prev_x: &QuantileState,
    prev_y: &QuantileState,
    p: &JkoParams,
) -> Result<f64> {
    check_sizes(&[x, y, prev_x, prev_y], p.n)?;
    let prob = pair_problem(prev_x.positions(), prev_y.positions(), p);
    prob.eval(&stacked(x, y), 0.0)
        .map(|(v, _)| v)
        .ok_or(JkoError::NonMonotone)
}

/// Exact gradient of [`objective`] with respect to both position arrays.
pub fn objective_gradient(
    x: &QuantileState,
    y: &QuantileState,
    prev_x: &QuantileState,
    prev_y: &QuantileState,
    p: &JkoParams,
) -> Result<(Vec<f64>, Vec<f64>)> {
    check_sizes(&[x, y, prev_x, prev_y], p.n)?;
    let prob = pair_problem(prev_x.positions(), prev_y.positions(), p);
    let (_, mut g) = prob
        .eval(&stacked(x, y), 0.0)
        .ok_or(JkoError::NonMonotone)?;
    let gy = g.split_off(p.n);
    Ok((g, gy))
}

/// One step: approximately minimizes the objective seeded at `prev`.
///
/// A non-converged result is returned with `converged = false`.
pub fn minimize_step(
    prev: &PairState<QuantileState>,
    p: &JkoParams,
) -> Result<(PairState<QuantileState>, MinimizeReport)> {
    p.validate()?;
    check_sizes(&[&prev.f, &prev.g], p.n)?;
    let prob = pair_problem(prev.f.positions(), prev.g.positions(), p);
    let (mut z, report) = prob.minimize(&stacked(&prev.f, &prev.g), p);
    let y = z.split_off(p.n);
    let f = QuantileState::new(z).map_err(|_| JkoError::NonMonotone)?;
    let g = QuantileState::new(y).map_err(|_| JkoError::NonMonotone)?;
    Ok((PairState::new(f, g, prev.model), report))
}

/// One step of the single-species problem `(w_f/2τ) W₂²(x, prev) + ½ a ∫ f²`,
/// i.e. the system with `g ≡ 0`.
pub fn minimize_step_single(
    prev: &QuantileState,
    p: &JkoParams,
) -> Result<(QuantileState, MinimizeReport)> {
    p.validate()?;
    check_sizes(&[prev], p.n)?;
    let prob = single_problem(prev.positions(), p);
    let (z, report) = prob.minimize(prev.positions(), p);
    Ok((
        QuantileState::new(z).map_err(|_| JkoError::NonMonotone)?,
        report,
    ))
}

/// Quantile states of a unit-mass grid pair.
pub fn to_quantiles(s: &PairState<GridDensity>, n: usize) -> Result<PairState<QuantileState>> {
    Ok(PairState::new(
        crate::transport1d::quantiles_from_density(&s.f, n)?,
        crate::transport1d::quantiles_from_density(&s.g, n)?,
        s.model,
    ))
}

/// Smooth grid reconstruction of both components.
pub fn reconstruct(s: &PairState<QuantileState>, grid: &Grid) -> Result<PairState<GridDensity>> {
    Ok(PairState::new(
        smooth_density_from_quantiles(&s.f, grid)?,
        smooth_density_from_quantiles(&s.g, grid)?,
        s.model,
    ))
}

fn particle_record(
    time: f64,
    cur: &PairState<QuantileState>,
    prev: Option<&PairState<QuantileState>>,
    grid_state: &PairState<GridDensity>,
    report: Option<MinimizeReport>,
) -> Result<DiagnosticsRecord> {
    let (w2f, w2g) = match prev {
        Some(pr) => (
            wasserstein2_squared_quantiles(&cur.f, &pr.f)?.sqrt(),
            wasserstein2_squared_quantiles(&cur.g, &pr.g)?.sqrt(),
        ),
        None => (0.0, 0.0),
    };
    Ok(DiagnosticsRecord {
        time,
        mass_f: grid_state.f.mass(),
        mass_g: grid_state.g.mass(),
        energy: energy(cur)?,
        entropy_pair: particle_entropy(cur),
        second_moment_f: cur.f.second_moment(),
        second_moment_g: cur.g.second_moment(),
        w2_increment_f: w2f,
        w2_increment_g: w2g,
        energy_dissipation_rate: particle_energy_dissipation(cur)?,
        entropy_dissipation_rate: particle_entropy_dissipation(cur)?,
        solver_report: report,
    })
}

fn step_count(tau: f64, t_final: f64) -> usize {
    if t_final <= 0.0 {
        0
    } else {
        (t_final / tau - 1e-9).ceil() as usize
    }
}

/// Runs `⌈T_final/τ⌉` steps from `initial`, recording diagnostics on `grid`.
pub fn run_scheme(
    initial: &PairState<QuantileState>,
    p: &JkoParams,
    grid: &Grid,
    t_final: f64,
) -> Result<Trajectory> {
    p.validate()?;
    check_sizes(&[&initial.f, &initial.g], p.n)?;
    let mut traj = Trajectory::new(p.tau);
    let state0 = reconstruct(initial, grid)?;
    crate::diagnostics::warn_on_boundary_leak(&state0, 0.0);
    traj.push(
        Snapshot {
            time: 0.0,
            state: state0.clone(),
        },
        particle_record(0.0, initial, None, &state0, None)?,
    );
    traj.particles.push(initial.clone());
    let mut cur = initial.clone();
    for step in 1..=step_count(p.tau, t_final) {
        let (next, report) = minimize_step(&cur, p)?;
        if !report.converged {
            return Err(JkoError::NoConvergence {
                step,
                grad_norm: report.grad_norm,
            });
        }
        let time = step as f64 * p.tau;
        let state = reconstruct(&next, grid)?;
        crate::diagnostics::warn_on_boundary_leak(&state, time);
        let record = particle_record(time, &next, Some(&cur), &state, Some(report))?;
        traj.push(Snapshot { time, state }, record);
        traj.particles.push(next.clone());
        cur = next;
    }
    Ok(traj)
}

/// Single-species run (`g ≡ 0`); snapshots carry a zero `g`.
pub fn run_scheme_single(
    initial: &QuantileState,
    p: &JkoParams,
    grid: &Grid,
    t_final: f64,
) -> Result<Trajectory> {
    p.validate()?;
    check_sizes(&[initial], p.n)?;
    let zero = GridDensity::zeros(*grid);
    let snapshot = |time: f64, q: &QuantileState| -> Result<Snapshot> {
        Ok(Snapshot {
            time,
            state: PairState::new(
                smooth_density_from_quantiles(q, grid)?,
                zero.clone(),
                p.model,
            ),
        })
    };
    let record = |time: f64,
                  q: &QuantileState,
                  prev: Option<&QuantileState>,
                  s: &Snapshot,
                  report: Option<MinimizeReport>|
     -> Result<DiagnosticsRecord> {
        let w2 = match prev {
            Some(pr) => wasserstein2_squared_quantiles(q, pr)?.sqrt(),
            None => 0.0,
        };
        Ok(DiagnosticsRecord {
            time,
            mass_f: s.state.f.mass(),
            mass_g: 0.0,
            energy: 0.5 * p.model.a * q.gap_energy(),
            entropy_pair: p.model.w_f * q.entropy(),
            second_moment_f: q.second_moment(),
            second_moment_g: 0.0,
            w2_increment_f: w2,
            w2_increment_g: 0.0,
            energy_dissipation_rate: energy_dissipation_of(&[q], &p.model)?,
            entropy_dissipation_rate: entropy_dissipation_of(&[q], &p.model)?,
            solver_report: report,
        })
    };
    let mut traj = Trajectory::new(p.tau);
    let s0 = snapshot(0.0, initial)?;
    let r0 = record(0.0, initial, None, &s0, None)?;
    traj.push(s0, r0);
    let mut cur = initial.clone();
    for step in 1..=step_count(p.tau, t_final) {
        let (next, report) = minimize_step_single(&cur, p)?;
        if !report.converged {
            return Err(JkoError::NoConvergence {
                step,
                grad_norm: report.grad_norm,
            });
        }
        let time = step as f64 * p.tau;
        let s = snapshot(time, &next)?;
        let r = record(time, &next, Some(&cur), &s, Some(report))?;
        traj.push(s, r);
        cur = next;
    }
    Ok(traj)
}

/// Both sides of the weak Euler–Lagrange inequalities of one step.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ElResidual {
    pub residual_f: f64,
    pub bound_f: f64,
    pub residual_g: f64,
    pub bound_g: f64,
    pub slack: f64,
}

impl ElResidual {
    pub fn holds(&self) -> bool {
        self.residual_f <= self.bound_f + self.slack && self.residual_g <= self.bound_g + self.slack
    }

    /// Excess over the bound in units of the slack; `> 10` flags a state that is
    /// unlikely to be a minimizer.
    pub fn excess_ratio(&self) -> f64 {
        let ex = (self.residual_f - self.bound_f).max(self.residual_g - self.bound_g);
        ex.max(0.0) / self.slack
    }
}

/// Weak-form residuals of the step `prev -> cur` tested against `xi`:
///
/// ```text
/// |(1/τ)∫ξ(f - f_prev) + (1/w_f)∫ f ∂ₓ(af + cg) ∂ₓξ| ≤ ‖∂ₓ²ξ‖∞ W₂²(f, f_prev) / 2τ
/// ```
///
/// and the same for `g`. Integrals use the smooth grid reconstruction.
pub fn euler_lagrange_residual(
    cur: &PairState<QuantileState>,
    prev: &PairState<QuantileState>,
    p: &JkoParams,
    grid: &Grid,
    xi: &TestFunction,
) -> Result<ElResidual> {
    let c = reconstruct(cur, grid)?;
    let pr = reconstruct(prev, grid)?;
    let (pf, pg) = pressure_profiles(&c)?;
    let dx = grid.dx();
    let (dpf, dpg) = (derivative(&pf, dx), derivative(&pg, dx));
    let (xv, xd) = xi.sample(grid);
    let (_, _, xi2) = xi.sup_norms();
    let m = &p.model;
    let mut time_f = 0.0;
    let mut time_g = 0.0;
    let mut flux_f = 0.0;
    let mut flux_g = 0.0;
    for i in 0..grid.n_cells() {
        time_f += xv[i] * (c.f.values()[i] - pr.f.values()[i]);
        time_g += xv[i] * (c.g.values()[i] - pr.g.values()[i]);
        flux_f += c.f.values()[i] * dpf[i] * xd[i];
        flux_g += c.g.values()[i] * dpg[i] * xd[i];
    }
    let w2f = wasserstein2_squared_quantiles(&cur.f, &prev.f)?;
    let w2g = wasserstein2_squared_quantiles(&cur.g, &prev.g)?;
    let obj = objective(&cur.f, &cur.g, &prev.f, &prev.g, p)?;
    Ok(ElResidual {
        residual_f: (dx * (time_f / p.tau + flux_f / m.w_f)).abs(),
        bound_f: xi2 * w2f / (2.0 * p.tau),
        residual_g: (dx * (time_g / p.tau + flux_g / m.w_g)).abs(),
        bound_g: xi2 * w2g / (2.0 * p.tau),
        slack: p.slack(obj),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FlowInterchangeEntry {
    pub t: f64,
    pub objective_smoothed: f64,
    pub objective_base: f64,
    pub slack: f64,
}

impl FlowInterchangeEntry {
    pub fn holds(&self) -> bool {
        self.objective_smoothed >= self.objective_base - self.slack
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FlowInterchangeReport {
    pub entries: Vec<FlowInterchangeEntry>,
    /// `τ` times the particle entropy dissipation at the minimizer.
    pub entropy_step_lhs: f64,
    /// Weighted particle entropy drop across the step.
    pub entropy_step_rhs: f64,
    /// The same two sides measured by finite differences on the smooth grid
    /// reconstruction. Reported only.
    pub grid_entropy_step_lhs: f64,
    pub grid_entropy_step_rhs: f64,
    pub slack: f64,
}

impl FlowInterchangeReport {
    pub fn entropy_step_holds(&self, slack: f64) -> bool {
        self.entropy_step_lhs <= self.entropy_step_rhs + slack
    }

    pub fn all_hold(&self) -> bool {
        self.entries.iter().all(FlowInterchangeEntry::holds) && self.entropy_step_holds(self.slack)
    }
}

/// The step objective evaluated on grid densities.
pub fn grid_objective(
    cur: &PairState<GridDensity>,
    prev: &PairState<GridDensity>,
    p: &JkoParams,
) -> Result<f64> {
    let m = &p.model;
    let wf = wasserstein2(&cur.f, &prev.f)?;
    let wg = wasserstein2(&cur.g, &prev.g)?;
    Ok((m.w_f * wf * wf + m.w_g * wg * wg) / (2.0 * p.tau) + energy(cur)?)
}

/// Tests the minimizer against its heat-flow perturbations and evaluates the
/// entropy-dissipation inequality of the step.
///
/// The heat flow acts on the particles (`ẋ = -N ∇H`), so the perturbed state
/// stays in the class the step minimizes over.
pub fn flow_interchange_check(
    cur: &PairState<QuantileState>,
    prev: &PairState<QuantileState>,
    p: &JkoParams,
    grid: &Grid,
    times: &[f64],
) -> Result<FlowInterchangeReport> {
    let base = objective(&cur.f, &cur.g, &prev.f, &prev.g, p)?;
    let slack = p.slack(base);
    let mut entries = Vec::with_capacity(times.len());
    for &t in times {
        let f = particle_heat_flow(&cur.f, t)?;
        let g = particle_heat_flow(&cur.g, t)?;
        entries.push(FlowInterchangeEntry {
            t,
            objective_smoothed: objective(&f, &g, &prev.f, &prev.g, p)?,
            objective_base: base,
            slack,
        });
    }
    let c = reconstruct(cur, grid)?;
    let pr = reconstruct(prev, grid)?;
    Ok(FlowInterchangeReport {
        entries,
        entropy_step_lhs: p.tau * particle_entropy_dissipation(cur)?,
        entropy_step_rhs: particle_entropy(prev) - particle_entropy(cur),
        grid_entropy_step_lhs: p.tau * entropy_dissipation_rate(&c)?,
        grid_entropy_step_rhs: entropy_pair(&pr)? - entropy_pair(&c)?,
        slack,
    })
}

/// Both sides of `τ‖√f ∂ₓ(af+cg)‖₂ / w_f ≤ W₂(f, f_prev)` and its `g` analogue.
///
/// The pressure gradient at particle `i` is `N ξ_i`, where `ξ` is the energy
/// part of the least-norm objective subgradient at the minimizer.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DissipationCertificate {
    pub lhs_f: f64,
    pub rhs_f: f64,
    pub lhs_g: f64,
    pub rhs_g: f64,
    /// Left-hand sides by finite differences on the smooth grid reconstruction.
    /// Reported only.
    pub grid_lhs_f: f64,
    pub grid_lhs_g: f64,
}

impl DissipationCertificate {
    pub fn holds(&self, slack: f64) -> bool {
        self.lhs_f <= self.rhs_f + slack && self.lhs_g <= self.rhs_g + slack
    }
}

pub fn dissipation_certificates(
    cur: &PairState<QuantileState>,
    prev: &PairState<QuantileState>,
    p: &JkoParams,
    grid: &Grid,
) -> Result<DissipationCertificate> {
    check_sizes(&[&cur.f, &cur.g, &prev.f, &prev.g], p.n)?;
    let m = &p.model;
    let n = p.n;
    let nf = n as f64;
    let prob = pair_problem(prev.f.positions(), prev.g.positions(), p);
    let z = stacked(&cur.f, &cur.g);
    let (_, mut grad) = prob.eval(&z, 0.0).ok_or(JkoError::NonMonotone)?;
    let (v, _) = prob.least_norm(&z, &mut grad);
    let prev_z = stacked(&prev.f, &prev.g);
    let lhs = |s: usize, w: f64| -> f64 {
        let sq: f64 = (s * n..(s + 1) * n)
            .map(|i| {
                let xi = v[i] - w * (z[i] - prev_z[i]) / (nf * p.tau);
                xi * xi
            })
            .sum();
        p.tau * (nf * sq).sqrt() / w
    };

    let c = reconstruct(cur, grid)?;
    let (pf, pg) = pressure_profiles(&c)?;
    let dx = grid.dx();
    let (dpf, dpg) = (derivative(&pf, dx), derivative(&pg, dx));
    let weighted = |h: &GridDensity, d: &[f64]| -> f64 {
        (dx * h
            .values()
            .iter()
            .zip(d)
            .map(|(v, q)| v * q * q)
            .sum::<f64>())
        .sqrt()
    };
    Ok(DissipationCertificate {
        lhs_f: lhs(0, m.w_f),
        rhs_f: wasserstein2_squared_quantiles(&cur.f, &prev.f)?.sqrt(),
        lhs_g: lhs(1, m.w_g),
        rhs_g: wasserstein2_squared_quantiles(&cur.g, &prev.g)?.sqrt(),
        grid_lhs_f: p.tau * weighted(&c.f, &dpf) / m.w_f,
        grid_lhs_g: p.tau * weighted(&c.g, &dpg) / m.w_g,
    })
}
