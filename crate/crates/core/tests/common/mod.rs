#![allow(dead_code)]

use lmp_core::qreg::QregProblem;
use lmp_core::sieve::{HermiteBasis, QuantileSieve, Standardizer, TauGrid};
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Random sieve with increasing intercepts and small higher-order terms, so
/// crossings are rare but possible.
pub fn random_sieve(r: &mut ChaCha8Rng) -> QuantileSieve {
    let degree_lag = r.random_range(0..=3);
    let degree_age = r.random_range(0..=2);
    let lag = Standardizer::new(r.random_range(-1.0..1.0), r.random_range(0.3..2.0)).unwrap();
    let age = Standardizer::new(r.random_range(30.0..50.0), r.random_range(5.0..15.0)).unwrap();
    let basis = HermiteBasis::new(degree_lag, degree_age, lag, age);
    let n_knots = r.random_range(5..=19);
    let grid = TauGrid::equispaced(n_knots).unwrap();
    let k = basis.dim();
    let mut level = r.random_range(-2.0..0.0);
    let mut coeffs = Vec::with_capacity(n_knots * k);
    for _ in 0..n_knots {
        level += r.random_range(0.05..0.6);
        coeffs.push(level);
        for _ in 1..k {
            coeffs.push(r.random_range(-0.05..0.05));
        }
    }
    QuantileSieve::new(basis, grid, coeffs, r.random_range(0.5..6.0), r.random_range(0.5..6.0)).unwrap()
}

/// Conditioning point near the centre of the sieve's standardizers.
pub fn random_point(s: &QuantileSieve, r: &mut ChaCha8Rng) -> (f64, f64) {
    let b = s.basis();
    (
        b.lag.mean + b.lag.sd * r.random_range(-2.0..2.0),
        b.age.mean + b.age.sd * r.random_range(-2.0..2.0),
    )
}

/// Five-point Gauss-Legendre rule on `[a, b]`.
pub fn gauss_legendre<F: Fn(f64) -> f64>(f: F, a: f64, b: f64) -> f64 {
    const X: [f64; 5] = [0.0, -0.538_469_310_105_683_1, 0.538_469_310_105_683_1, -0.906_179_845_938_664, 0.906_179_845_938_664];
    const W: [f64; 5] = [0.568_888_888_888_888_9, 0.478_628_670_499_366_5, 0.478_628_670_499_366_5, 0.236_926_885_056_189_1, 0.236_926_885_056_189_1];
    let (m, h) = (0.5 * (a + b), 0.5 * (b - a));
    X.iter().zip(W).map(|(x, w)| w * f(m + h * x)).sum::<f64>() * h
}

/// Total mass of `implied_density`: quadrature between knots plus
/// closed-form exponential tail masses anchored at the density just outside
/// the extreme knots.
pub fn density_mass(s: &QuantileSieve, lag: f64, age: f64) -> f64 {
    let q = s.knot_values(lag, age);
    let (lo, hi) = s.tail_lambdas();
    let f = |v: f64| s.implied_density(v, lag, age);
    let mut total = 0.0;
    for w in q.windows(2) {
        if w[1] > w[0] {
            let mid = 0.5 * (w[0] + w[1]);
            total += gauss_legendre(f, w[0], mid) + gauss_legendre(f, mid, w[1]);
        }
    }
    let d = 1e-9;
    total += f(q[0] - d) * (lo * d).exp() / lo;
    total += f(q[q.len() - 1] + d) * (hi * d).exp() / hi;
    total
}

/// Exact minimum by enumerating every basic solution: the optimum of a
/// quantile regression interpolates `K` observations.
pub fn vertex_minimum(p: &QregProblem) -> f64 {
    let k = p.n_cols;
    let n = p.response.len();
    let row = |i: usize| &p.design[i * k..(i + 1) * k];
    let mut best = f64::INFINITY;
    match k {
        1 => {
            for i in 0..n {
                if row(i)[0] != 0.0 {
                    best = best.min(p.objective(&[p.response[i] / row(i)[0]]));
                }
            }
        }
        2 => {
            for i in 0..n {
                for j in i + 1..n {
                    let (a, b) = (row(i), row(j));
                    let det = a[0] * b[1] - a[1] * b[0];
                    if det.abs() < 1e-12 {
                        continue;
                    }
                    let t0 = (p.response[i] * b[1] - a[1] * p.response[j]) / det;
                    let t1 = (a[0] * p.response[j] - b[0] * p.response[i]) / det;
                    best = best.min(p.objective(&[t0, t1]));
                }
            }
        }
        _ => unreachable!(),
    }
    best
}

pub fn random_problem(r: &mut impl Rng, weighted: bool) -> QregProblem {
    let n = r.random_range(3..=20);
    let k = r.random_range(1..=2);
    let mut design = Vec::with_capacity(n * k);
    let mut response = Vec::with_capacity(n);
    for _ in 0..n {
        let x: f64 = r.sample(StandardNormal);
        design.push(1.0);
        if k == 2 {
            design.push(x);
        }
        let e: f64 = r.sample(StandardNormal);
        response.push(0.5 + 1.5 * x + e);
    }
    let tau = r.random_range(0.05..0.95);
    let p = QregProblem::new(design, k, response, tau);
    if weighted {
        let w = (0..n).map(|_| r.random_range(0.1..3.0)).collect();
        p.with_weights(w)
    } else {
        p
    }
}
