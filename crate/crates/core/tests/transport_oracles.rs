use muskat_core::transport1d::{
    quantiles_from_density, wasserstein2, wasserstein2_quantiles, Grid, GridDensity, QuantileState,
};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn grid() -> Grid {
    Grid::from_bounds(-8.0, 8.0, 2048).unwrap()
}

fn uniform(g: &Grid, a: f64, b: f64) -> GridDensity {
    let v = (0..g.n_cells())
        .map(|i| (g.edge(i + 1).min(b) - g.edge(i).max(a)).max(0.0) / (g.dx() * (b - a)))
        .collect();
    GridDensity::new(*g, v).unwrap()
}

/// Cell averages of a normal density by a 64-point midpoint rule, normalized.
fn gaussian(g: &Grid, mean: f64, sigma: f64) -> GridDensity {
    let sub = 64;
    let v = (0..g.n_cells())
        .map(|i| {
            (0..sub)
                .map(|k| {
                    let x = g.edge(i) + (k as f64 + 0.5) * g.dx() / sub as f64;
                    (-(x - mean) * (x - mean) / (2.0 * sigma * sigma)).exp()
                })
                .sum::<f64>()
                / sub as f64
        })
        .collect();
    GridDensity::new(*g, v).unwrap().normalized().unwrap()
}

fn rel(a: f64, b: f64) -> f64 {
    (a - b).abs() / b.abs().max(f64::MIN_POSITIVE)
}

#[test]
fn identity_has_zero_distance() {
    let u = gaussian(&grid(), 0.3, 0.7);
    assert_eq!(wasserstein2(&u, &u).unwrap(), 0.0);
}

#[test]
fn translation_costs_the_shift() {
    let g = grid();
    // Whole-cell shifts keep the discretized profiles exact translates.
    for cells in [1usize, 64, 200] {
        let a = cells as f64 * g.dx();
        let u = uniform(&g, -1.0, 1.0);
        let v = uniform(&g, -1.0 + a, 1.0 + a);
        assert!(rel(wasserstein2(&u, &v).unwrap(), a) < 1e-6, "a={a}");
        assert!(rel(wasserstein2(&v, &u).unwrap(), a) < 1e-6);
    }
}

#[test]
fn uniform_dilation() {
    let g = grid();
    let u = uniform(&g, 0.0, 1.0);
    let v = uniform(&g, 0.0, 2.0);
    assert!(rel(wasserstein2(&u, &v).unwrap(), (1.0f64 / 3.0).sqrt()) < 1e-6);
}

#[test]
fn gaussian_closed_form() {
    let g = grid();
    for (m1, s1, m2, s2) in [
        (-1.0, 0.6, 1.5, 0.9),
        (0.5, 1.0, -0.5, 0.8),
        (0.0, 1.0, 2.0, 1.0),
    ] {
        let w = wasserstein2(&gaussian(&g, m1, s1), &gaussian(&g, m2, s2)).unwrap();
        let exact = ((m1 - m2) * (m1 - m2) + (s1 - s2) * (s1 - s2)).sqrt();
        assert!(rel(w, exact) < 1e-6, "{w} vs {exact}");
    }
}

/// Cell averages shrink a Gaussian's quantile function by about `dx²/(12σ)`,
/// so a pure dilation carries an `O(dx²)` representation error.
#[test]
fn gaussian_dilation_error_is_second_order() {
    let err = |cells: usize| {
        let g = Grid::from_bounds(-8.0, 8.0, cells).unwrap();
        let w = wasserstein2(&gaussian(&g, 0.0, 1.0), &gaussian(&g, 0.0, 0.5)).unwrap();
        (w - 0.5).abs()
    };
    let (coarse, fine) = (err(1024), err(2048));
    assert!(fine < 2e-5, "{fine}");
    let ratio = coarse / fine;
    assert!((3.5..4.5).contains(&ratio), "ratio {ratio}");
}

fn permutations(n: usize) -> Vec<Vec<usize>> {
    if n == 0 {
        return vec![vec![]];
    }
    let mut out = Vec::new();
    for p in permutations(n - 1) {
        for k in 0..n {
            let mut q = p.clone();
            q.insert(k, n - 1);
            out.push(q);
        }
    }
    out
}

fn brute_force_w2_squared(x: &[f64], y: &[f64]) -> f64 {
    permutations(x.len())
        .iter()
        .map(|p| {
            x.iter()
                .zip(p)
                .map(|(a, &j)| (a - y[j]) * (a - y[j]))
                .sum::<f64>()
        })
        .fold(f64::INFINITY, f64::min)
        / x.len() as f64
}

fn sorted_sample(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    let mut v: Vec<f64> = (0..n).map(|_| rng.gen_range(-3.0..3.0)).collect();
    v.sort_by(f64::total_cmp);
    v
}

#[test]
fn particle_distance_matches_brute_force() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    for trial in 0..100 {
        let n = 2 + trial % 5;
        let x = sorted_sample(&mut rng, n);
        let y = sorted_sample(&mut rng, n);
        let w = wasserstein2_quantiles(
            &QuantileState::new(x.clone()).unwrap(),
            &QuantileState::new(y.clone()).unwrap(),
        )
        .unwrap();
        let brute = brute_force_w2_squared(&x, &y);
        assert!(
            (w * w - brute).abs() <= 1e-12 * (1.0 + brute),
            "trial {trial}"
        );
    }
}

#[test]
fn quantiles_of_uniform_are_equispaced() {
    let g = grid();
    let q = quantiles_from_density(&uniform(&g, 0.0, 1.0), 8).unwrap();
    for (i, x) in q.positions().iter().enumerate() {
        assert!((x - (i as f64 + 0.5) / 8.0).abs() < 1e-12);
    }
}

fn positions(n: usize) -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(0.01f64..0.5, n).prop_flat_map(|gaps| {
        (-2.0f64..2.0).prop_map(move |start| {
            gaps.iter()
                .scan(start, |x, d| {
                    *x += d;
                    Some(*x)
                })
                .collect()
        })
    })
}

proptest! {
    #[test]
    fn particle_distance_is_a_metric(x in positions(6), y in positions(6), z in positions(6)) {
        let (qx, qy, qz) = (
            QuantileState::new(x).unwrap(),
            QuantileState::new(y).unwrap(),
            QuantileState::new(z).unwrap(),
        );
        let dxy = wasserstein2_quantiles(&qx, &qy).unwrap();
        let dyx = wasserstein2_quantiles(&qy, &qx).unwrap();
        prop_assert_eq!(dxy, dyx);
        prop_assert_eq!(wasserstein2_quantiles(&qx, &qx).unwrap(), 0.0);
        let dxz = wasserstein2_quantiles(&qx, &qz).unwrap();
        let dzy = wasserstein2_quantiles(&qz, &qy).unwrap();
        prop_assert!(dxy <= dxz + dzy + 1e-12);
    }

    #[test]
    fn particle_translation(x in positions(8), a in -3.0f64..3.0) {
        let q = QuantileState::new(x).unwrap();
        let t = q.translated(a).unwrap();
        let d = wasserstein2_quantiles(&q, &t).unwrap();
        prop_assert!((d - a.abs()).abs() < 1e-12);
    }

    #[test]
    fn grid_distance_is_symmetric(m1 in -2.0f64..2.0, s1 in 0.3f64..1.0, m2 in -2.0f64..2.0, s2 in 0.3f64..1.0) {
        let g = Grid::from_bounds(-8.0, 8.0, 256).unwrap();
        let (u, v) = (gaussian(&g, m1, s1), gaussian(&g, m2, s2));
        let a = wasserstein2(&u, &v).unwrap();
        let b = wasserstein2(&v, &u).unwrap();
        prop_assert!((a - b).abs() < 1e-12);
        prop_assert!(a >= 0.0);
    }

    #[test]
    fn reconstructed_density_has_unit_mass(x in positions(12)) {
        let q = QuantileState::new(x).unwrap();
        let g = Grid::from_bounds(-10.0, 10.0, 400).unwrap();
        let u = muskat_core::transport1d::smooth_density_from_quantiles(&q, &g).unwrap();
        prop_assert!((u.mass() - 1.0).abs() < 1e-12);
        prop_assert!(u.values().iter().all(|v| *v >= 0.0));
    }
}
