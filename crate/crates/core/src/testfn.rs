//! Smooth compactly supported test functions with analytic derivatives.

use serde::{Deserialize, Serialize};

use crate::transport1d::Grid;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum TestFunction {
    /// `(c0 + c1 x + c2 x²) χ(|x - center|)` with a C² cutoff `χ` equal to 1 on
    /// `[0, inner]` and 0 beyond `outer`.
    CutoffPolynomial {
        coeffs: [f64; 3],
        center: f64,
        inner: f64,
        outer: f64,
    },
    /// `exp(1 - 1/(1 - r²))` for `r = (x - center)/width`, `|r| < 1`; peak value 1.
    Bump { center: f64, width: f64 },
}

fn cutoff(r: f64, inner: f64, outer: f64) -> (f64, f64, f64) {
    if r <= inner {
        return (1.0, 0.0, 0.0);
    }
    if r >= outer {
        return (0.0, 0.0, 0.0);
    }
    let l = outer - inner;
    let s = (r - inner) / l;
    let v = 1.0 - s * s * s * (10.0 - 15.0 * s + 6.0 * s * s);
    let d1 = -30.0 * s * s * (1.0 - s) * (1.0 - s) / l;
    let d2 = -60.0 * s * (1.0 - s) * (1.0 - 2.0 * s) / (l * l);
    (v, d1, d2)
}

impl TestFunction {
    pub fn window(center: f64, inner: f64, outer: f64) -> Self {
        Self::CutoffPolynomial {
            coeffs: [1.0, 0.0, 0.0],
            center,
            inner,
            outer,
        }
    }

    /// `(ξ, ξ', ξ'')` at `x`.
    pub fn eval_all(&self, x: f64) -> (f64, f64, f64) {
        match *self {
            Self::CutoffPolynomial {
                coeffs: [c0, c1, c2],
                center,
                inner,
                outer,
            } => {
                let y = x - center;
                let sign = if y < 0.0 { -1.0 } else { 1.0 };
                let (chi, chi_r, chi_rr) = cutoff(y.abs(), inner, outer);
                let (chi_x, chi_xx) = (chi_r * sign, chi_rr);
                let p = c0 + c1 * x + c2 * x * x;
                let dp = c1 + 2.0 * c2 * x;
                let ddp = 2.0 * c2;
                (
                    p * chi,
                    dp * chi + p * chi_x,
                    ddp * chi + 2.0 * dp * chi_x + p * chi_xx,
                )
            }
            Self::Bump { center, width } => {
                let r = (x - center) / width;
                let u = 1.0 - r * r;
                if u <= 0.0 {
                    return (0.0, 0.0, 0.0);
                }
                let phi = (1.0 - 1.0 / u).exp();
                if phi == 0.0 {
                    return (0.0, 0.0, 0.0);
                }
                let u2 = u * u;
                let d1 = phi * (-2.0 * r / u2);
                let d2 = phi * (4.0 * r * r / (u2 * u2) - 2.0 / u2 - 8.0 * r * r / (u2 * u));
                (phi, d1 / width, d2 / (width * width))
            }
        }
    }

    pub fn eval(&self, x: f64) -> f64 {
        self.eval_all(x).0
    }

    pub fn d1(&self, x: f64) -> f64 {
        self.eval_all(x).1
    }

    pub fn d2(&self, x: f64) -> f64 {
        self.eval_all(x).2
    }

    /// Closed interval outside of which the function vanishes.
    pub fn support(&self) -> (f64, f64) {
        match *self {
            Self::CutoffPolynomial { center, outer, .. } => (center - outer, center + outer),
            Self::Bump { center, width } => (center - width, center + width),
        }
    }

    /// Sampled sups `(‖ξ‖∞, ‖ξ'‖∞, ‖ξ''‖∞)`.
    pub fn sup_norms(&self) -> (f64, f64, f64) {
        let (lo, hi) = self.support();
        let n = 200_000;
        let mut s = (0.0f64, 0.0f64, 0.0f64);
        for k in 0..=n {
            let x = lo + (hi - lo) * k as f64 / n as f64;
            let (v, d1, d2) = self.eval_all(x);
            s = (s.0.max(v.abs()), s.1.max(d1.abs()), s.2.max(d2.abs()));
        }
        s
    }

    /// `‖ξ‖_{W²,∞} = ‖ξ‖∞ + ‖ξ'‖∞ + ‖ξ''‖∞`.
    pub fn w2inf_norm(&self) -> f64 {
        let (a, b, c) = self.sup_norms();
        a + b + c
    }

    /// Samples `ξ`, `ξ'` at the cell centers of `grid`.
    pub fn sample(&self, grid: &Grid) -> (Vec<f64>, Vec<f64>) {
        grid.centers()
            .map(|x| {
                let (v, d1, _) = self.eval_all(x);
                (v, d1)
            })
            .unzip()
    }
}

/// The fixed 12-function dictionary: four cut-off polynomials `1, x, x², (x-1)²`
/// and bumps at four centers with two widths each.
pub fn dictionary() -> Vec<TestFunction> {
    let poly = |coeffs| TestFunction::CutoffPolynomial {
        coeffs,
        center: 0.0,
        inner: 6.0,
        outer: 7.5,
    };
    let mut d = vec![
        poly([1.0, 0.0, 0.0]),
        poly([0.0, 1.0, 0.0]),
        poly([0.0, 0.0, 1.0]),
        poly([1.0, -2.0, 1.0]),
    ];
    for center in [-1.5, -0.5, 0.5, 1.5] {
        for width in [0.75, 1.5] {
            d.push(TestFunction::Bump { center, width });
        }
    }
    d
}
