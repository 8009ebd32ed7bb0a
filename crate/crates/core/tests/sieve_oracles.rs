mod common;

use common::{density_mass, random_point, random_sieve, rng};
use lmp_core::sieve::{hermite_values, rearrange, HermiteBasis, QuantileSieve, Standardizer, TauGrid};
use proptest::prelude::*;
use rand::Rng;

#[test]
fn hermite_matches_explicit_polynomials() {
    let explicit = |x: f64| [1.0, x, x * x - 1.0, x.powi(3) - 3.0 * x, x.powi(4) - 6.0 * x * x + 3.0];
    let mut h = [0.0; 5];
    for j in -50..=50 {
        let x = j as f64 / 10.0;
        hermite_values(x, 4, &mut h);
        for (a, b) in h.iter().zip(explicit(x)) {
            assert!((a - b).abs() <= 1e-12 * b.abs().max(1.0), "x={x}: {a} vs {b}");
        }
    }
}

#[test]
fn basis_spec_cases() {
    let b = HermiteBasis::new(3, 0, Standardizer::identity(), Standardizer::identity());
    assert_eq!(b.eval(1.0, 0.0)[2], 0.0);
    assert_eq!(b.eval(2.0, 0.0)[3], 2.0);
    assert_eq!(b.eval(0.7, 0.0)[0], 1.0);
}

#[test]
fn density_integrates_to_one_on_random_sieves() {
    let mut r = rng(1);
    for _ in 0..100 {
        let s = random_sieve(&mut r);
        let (lag, age) = random_point(&s, &mut r);
        let mass = density_mass(&s, lag, age);
        assert!((mass - 1.0).abs() < 1e-6, "mass {mass}");
    }
}

#[test]
fn sampler_matches_cdf_in_kolmogorov_distance() {
    let mut r = rng(2);
    for _ in 0..3 {
        let s = random_sieve(&mut r);
        let (lag, age) = random_point(&s, &mut r);
        let mut draws: Vec<f64> = (0..100_000)
            .map(|_| {
                let u: f64 = r.random_range(1e-12..1.0);
                s.sample(lag, age, u).unwrap()
            })
            .collect();
        draws.sort_by(f64::total_cmp);
        let n = draws.len() as f64;
        let d = draws
            .iter()
            .enumerate()
            .map(|(i, &x)| {
                let f = s.implied_cdf(x, lag, age);
                (f - i as f64 / n).abs().max((f - (i + 1) as f64 / n).abs())
            })
            .fold(0.0, f64::max);
        assert!(d < 0.01, "KS distance {d}");
    }
}

#[test]
fn derivative_matches_central_differences() {
    let mut r = rng(3);
    let h = 1e-4;
    let mut checked = 0;
    while checked < 100 {
        let s = random_sieve(&mut r);
        let (lag, age) = random_point(&s, &mut r);
        // Skip points where the knot ordering changes inside the stencil.
        let order = |x: f64| {
            let raw = s.raw_knot_values(x, age);
            let mut idx: Vec<usize> = (0..raw.len()).collect();
            idx.sort_by(|&a, &b| raw[a].total_cmp(&raw[b]));
            idx
        };
        if order(lag - h) != order(lag + h) {
            continue;
        }
        let tau = r.random_range(0.01..0.99);
        let analytic = s.quantile_lag_derivative(tau, lag, age).unwrap();
        let fd = (s.eval_quantile(tau, lag + h, age).unwrap() - s.eval_quantile(tau, lag - h, age).unwrap()) / (2.0 * h);
        assert!((analytic - fd).abs() < 1e-5, "analytic {analytic} fd {fd}");
        checked += 1;
    }
}

#[test]
fn exact_mean_matches_quadrature() {
    let mut r = rng(4);
    for _ in 0..20 {
        let s = random_sieve(&mut r);
        let (lag, age) = random_point(&s, &mut r);
        // E[X] = ∫_0^1 Q(τ) dτ, integrated in τ with a fine midpoint rule
        // away from the log singularities and closed form near them.
        let n = 200_000;
        let (a, b) = (1e-6, 1.0 - 1e-6);
        let step = (b - a) / n as f64;
        let mut m = 0.0;
        for j in 0..n {
            m += s.eval_quantile(a + (j as f64 + 0.5) * step, lag, age).unwrap() * step;
        }
        let exact = s.conditional_mean(lag, age);
        assert!((m - exact).abs() < 1e-3, "quadrature {m} exact {exact}");
    }
}

#[test]
fn rearrange_spec_cases() {
    assert_eq!(rearrange(&[1.0, 3.0, 2.0]), vec![1.0, 2.0, 3.0]);
    assert_eq!(rearrange(&[-1.0, 0.0, 4.0]), vec![-1.0, 0.0, 4.0]);
}

#[test]
fn lag_range_makes_sieve_flat_outside() {
    let grid = TauGrid::default();
    let basis = HermiteBasis::new(3, 0, Standardizer::identity(), Standardizer::identity()).with_lag_range(-1.0, 1.0);
    let coeffs: Vec<f64> = grid.knots().iter().flat_map(|&t| [t, 1.0, 0.2, 0.1]).collect();
    let s = QuantileSieve::new(basis, grid, coeffs, 1.0, 1.0).unwrap();
    assert_eq!(s.eval_quantile(0.5, 3.0, 0.0).unwrap(), s.eval_quantile(0.5, 1.0, 0.0).unwrap());
    assert_eq!(s.quantile_lag_derivative(0.5, 3.0, 0.0).unwrap(), 0.0);
    let json = serde_json::to_string(&s).unwrap();
    let back: QuantileSieve = serde_json::from_str(&json).unwrap();
    assert_eq!(back, s);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn quantile_is_monotone_in_tau(seed in any::<u64>(), t1 in 0.001f64..0.999, t2 in 0.001f64..0.999) {
        let mut r = rng(seed);
        let s = random_sieve(&mut r);
        let (lag, age) = random_point(&s, &mut r);
        let (lo, hi) = if t1 < t2 { (t1, t2) } else { (t2, t1) };
        prop_assert!(s.eval_quantile(lo, lag, age).unwrap() <= s.eval_quantile(hi, lag, age).unwrap());
    }

    #[test]
    fn cdf_inverts_quantile(seed in any::<u64>(), frac in 0.0f64..1.0) {
        let mut r = rng(seed);
        let s = random_sieve(&mut r);
        let (lag, age) = random_point(&s, &mut r);
        let g = s.grid();
        let tau = g.first() + frac * (g.last() - g.first());
        let q = s.eval_quantile(tau, lag, age).unwrap();
        prop_assert!((s.implied_cdf(q, lag, age) - tau).abs() < 1e-9);
    }

    #[test]
    fn rearrange_is_sorted_permutation(mut v in proptest::collection::vec(-1e6f64..1e6, 0..40)) {
        let out = rearrange(&v);
        prop_assert!(out.windows(2).all(|w| w[0] <= w[1]));
        prop_assert_eq!(rearrange(&out), out.clone());
        v.sort_by(f64::total_cmp);
        prop_assert_eq!(out, v);
    }

    #[test]
    fn json_round_trip(seed in any::<u64>()) {
        let mut r = rng(seed);
        let s = random_sieve(&mut r);
        let back: QuantileSieve = serde_json::from_str(&serde_json::to_string(&s).unwrap()).unwrap();
        prop_assert_eq!(back, s);
    }
}
