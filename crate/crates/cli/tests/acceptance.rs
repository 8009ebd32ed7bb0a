//! Acceptance run: one PASS/FAIL line per criterion.
//!
//! `cargo test --test acceptance` runs all ten; `-- 3 7` runs a subset.

#[path = "../../core/tests/common/mod.rs"]
mod common;

use std::collections::BTreeMap;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::sync::OnceLock;
use std::time::{Duration, Instant};

use lmp_core::diagnostics::{
    conditional_skewness, growth_moments, lag_pairs, marginal_density, normalization_deviation_mc,
    persistence_surface, SurfaceTarget,
};
use lmp_core::model::{Component, ModelParams};
use lmp_core::msem::{estep_sample, run_msem, MsemConfig, MsemState};
use lmp_core::panel_io::PanelDataset;
use lmp_core::qreg::solve_qreg;
use lmp_core::sieve::{HermiteBasis, QuantileSieve, Standardizer, TauGrid};
use lmp_core::simulator::{
    distribution_knots, simulate, simulate_canonical, simulate_like, skew_reversal_params, DgpKind, DgpSpec,
    TransitoryDist,
};
use lmp_core::stats::{self, Moments};
use rand::Rng;
use rand_distr::StandardNormal;

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: String) -> Outcome {
    Outcome { pass, detail }
}

/// States at which fitted kernels are evaluated: lagged `U` from a large
/// panel simulated with the fitted model and the ages of the data.
fn simulated_u_lags(fit: &ModelParams, data: &PanelDataset, seed: u64) -> Vec<f64> {
    let sim = simulate_like(fit, data, 10_000, seed).unwrap();
    lag_pairs(&sim.truth.u, sim.truth.n_periods).0
}

struct CanonicalFit {
    data: PanelDataset,
    params: ModelParams,
    elapsed: Duration,
}

/// Criteria 1 and 10 share this fit.
fn canonical_fit() -> &'static CanonicalFit {
    static FIT: OnceLock<CanonicalFit> = OnceLock::new();
    FIT.get_or_init(|| {
        let spec = DgpSpec { n_households: 1000, n_periods: 6, sigma_eta: 0.15, transitory_scale: 0.10, seed: 101, ..Default::default() };
        let sim = simulate_canonical(&spec).unwrap();
        let config = MsemConfig { n_outer: 50, n_draws: 1, mh_steps_per_estep: 20, seed: 102, ..Default::default() };
        let start = Instant::now();
        let (params, _) = run_msem(&sim.data, &config, None).unwrap();
        CanonicalFit { data: sim.data, params, elapsed: start.elapsed() }
    })
}

fn c1_canonical_persistence() -> Outcome {
    let fit = canonical_fit();
    let lags = simulated_u_lags(&fit.params, &fit.data, 103);
    let taus: Vec<f64> = (2..=10).map(|j| j as f64 / 12.0).collect();
    let s = persistence_surface(&fit.params.sieve_u, &lags, &taus, &taus, &[fit.data.age_mean], SurfaceTarget::U).unwrap();
    let cells: Vec<f64> = s.values.iter().flatten().copied().collect();
    let (lo, hi) = cells.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &v| (a.min(v), b.max(v)));
    let mean = s.mean();
    let minutes = fit.elapsed.as_secs_f64() / 60.0;
    outcome(
        (0.85..=1.15).contains(&mean) && lo >= 0.6 && hi <= 1.4 && minutes <= 15.0,
        format!("mean {mean:.3}, cells in [{lo:.3}, {hi:.3}], fit {minutes:.1} min"),
    )
}

fn c2_skewness_sign_pattern() -> Outcome {
    let spec = DgpSpec { kind: DgpKind::NonlinearSieve, n_households: 1000, seed: 201, ..Default::default() };
    let sim = simulate(&spec, None).unwrap();
    let (fit, _) = run_msem(&sim.data, &MsemConfig { seed: 202, ..Default::default() }, None).unwrap();
    let sorted = stats::sorted_copy(&simulated_u_lags(&fit, &sim.data, 203));
    let cond = [stats::quantile_sorted(&sorted, 0.1), stats::quantile_sorted(&sorted, 0.9)];
    let tau = 11.0 / 12.0;
    let sk = conditional_skewness(&fit.sieve_u, &cond, tau, sim.data.age_mean).unwrap();
    let truth = conditional_skewness(&skew_reversal_params(&spec).unwrap().sieve_u, &cond, tau, sim.data.age_mean).unwrap();
    outcome(
        sk[0] > 0.05 && sk[1] < -0.05,
        format!("p10 {:+.3} (true {:+.3}), p90 {:+.3} (true {:+.3})", sk[0], truth[0], sk[1], truth[1]),
    )
}

fn fitted_v_excess_kurtosis(dist: TransitoryDist, seed: u64) -> f64 {
    let spec = DgpSpec {
        n_households: 2000,
        sigma_eta: 0.10,
        transitory_scale: 0.30,
        transitory_dist: dist,
        seed,
        ..Default::default()
    };
    let sim = simulate_canonical(&spec).unwrap();
    let (fit, _) = run_msem(&sim.data, &MsemConfig { seed: seed + 1, ..Default::default() }, None).unwrap();
    let m = marginal_density(&fit, Component::V, sim.data.age_mean, None, 100_000, spec.n_periods, seed + 2).unwrap();
    m.moments.excess_kurtosis()
}

fn c3_transitory_tails() -> Outcome {
    let laplace = fitted_v_excess_kurtosis(TransitoryDist::Laplace, 301);
    let gaussian = fitted_v_excess_kurtosis(TransitoryDist::Gaussian, 311);
    outcome(
        laplace > 1.0 && gaussian.abs() < 0.3,
        format!("V excess kurtosis: Laplace {laplace:.3}, Gaussian {gaussian:.3}"),
    )
}

fn c4_growth_moments() -> Outcome {
    let spec = DgpSpec { n_households: 10_000, n_periods: 10, transitory_dist: TransitoryDist::Laplace, seed: 401, ..Default::default() };
    let sim = simulate_canonical(&spec).unwrap();
    let recs = growth_moments(&sim.data, &(2..=8).collect::<Vec<_>>()).unwrap();
    let increasing = recs.windows(2).all(|w| w[1].variance > w[0].variance);
    let kurt2 = recs[0].kurtosis;

    let mut r = common::rng(402);
    let (n, t) = (10_000, 10);
    let y: Vec<f64> = (0..n * t).map(|_| r.sample::<f64, _>(StandardNormal)).collect();
    let null = PanelDataset::from_parts(
        (0..n as i64).collect(),
        (0..n).flat_map(|_| 0..t as i64).collect(),
        y,
        (0..n).flat_map(|_| (0..t).map(|s| 30.0 + s as f64)).collect(),
        vec![0; n * t],
        Vec::new(),
        t,
    )
    .unwrap();
    let arch = growth_moments(&null, &(2..=8).collect::<Vec<_>>()).unwrap();
    let mut arch_ok = true;
    let mut arch_detail = Vec::new();
    for g in arch.iter().filter(|g| g.arch_slope.is_some()) {
        let (b, se) = (g.arch_slope.unwrap(), g.arch_se.unwrap());
        arch_ok &= b.abs() <= 2.0 * se;
        arch_detail.push(format!("h{} {:+.4}/{:.4}", g.horizon, b, se));
    }
    let variances: Vec<String> = recs.iter().map(|g| format!("{:.3}", g.variance)).collect();
    outcome(
        increasing && kurt2 > 3.0 && arch_ok && !arch_detail.is_empty(),
        format!(
            "variance h2..8 [{}], kurtosis h2 {kurt2:.2}, null ARCH slope/se {}",
            variances.join(" "),
            arch_detail.join(", ")
        ),
    )
}

fn c5_solver_oracle() -> Outcome {
    let mut r = common::rng(501);
    let start = Instant::now();
    let mut worst: f64 = 0.0;
    for case in 0..200 {
        let p = common::random_problem(&mut r, case % 4 == 3);
        let theta = solve_qreg(&p, 1e-10).unwrap();
        worst = worst.max((p.objective(&theta) - common::vertex_minimum(&p)).abs());
    }
    let secs = start.elapsed().as_secs_f64();
    outcome(worst <= 1e-6 && secs < 10.0, format!("max objective gap {worst:.2e} over 200 instances in {secs:.2}s"))
}

fn kolmogorov_distance(s: &QuantileSieve, lag: f64, age: f64, r: &mut impl Rng) -> f64 {
    let mut draws: Vec<f64> = (0..100_000).map(|_| s.sample(lag, age, r.random_range(1e-12..1.0)).unwrap()).collect();
    draws.sort_by(f64::total_cmp);
    let n = draws.len() as f64;
    draws
        .iter()
        .enumerate()
        .map(|(i, &x)| {
            let f = s.implied_cdf(x, lag, age);
            (f - i as f64 / n).abs().max((f - (i + 1) as f64 / n).abs())
        })
        .fold(0.0, f64::max)
}

fn c6_density() -> Outcome {
    let mut r = common::rng(601);
    let mut worst_mass: f64 = 0.0;
    for _ in 0..100 {
        let s = common::random_sieve(&mut r);
        let (lag, age) = common::random_point(&s, &mut r);
        worst_mass = worst_mass.max((common::density_mass(&s, lag, age) - 1.0).abs());
    }
    let mut worst_ks: f64 = 0.0;
    for _ in 0..10 {
        let s = common::random_sieve(&mut r);
        let (lag, age) = common::random_point(&s, &mut r);
        worst_ks = worst_ks.max(kolmogorov_distance(&s, lag, age, &mut r));
    }
    outcome(
        worst_mass <= 1e-6 && worst_ks < 0.01,
        format!("max |mass - 1| {worst_mass:.2e} on 100 sieves, max KS {worst_ks:.4} on 10 sieves x 1e5 draws"),
    )
}

/// One household, one period, `y = 0`, an uninformative instrument and a
/// flat `V_1`: the target is the 99-knot N(0, 1) approximation in `U_1`.
fn c7_mcmc_known_target() -> Outcome {
    let grid = TauGrid::equispaced(99).unwrap();
    let basis = HermiteBasis::new(0, 0, Standardizer::identity(), Standardizer::identity());
    let (zk, lo, hi) = distribution_knots(TransitoryDist::Gaussian, 1.0, &grid);
    let u1 = QuantileSieve::unconditional(basis.clone(), grid.clone(), &zk, lo, hi).unwrap();
    let flat = QuantileSieve::unconditional(basis, grid, &stats::linspace(-100.0, 100.0, 99), 0.01, 0.01).unwrap();
    let params = ModelParams { sieve_u: flat.clone(), sieve_v: flat.clone(), sieve_u1: u1, sieve_v1: flat, beta0: 0.0, beta1: 0.0 };
    let data = PanelDataset::from_parts(vec![1], vec![1], vec![0.0], vec![40.0], vec![0], Vec::new(), 1).unwrap();
    let config = MsemConfig { mh_steps_per_estep: 1, mh_proposal_sd: Some(2.4), seed: 701, ..Default::default() };
    let mut state = MsemState::new(params, &data, &config);
    for _ in 0..1000 {
        estep_sample(&mut state, &data, &config);
    }
    let xs: Vec<f64> = (0..100_000)
        .map(|_| {
            estep_sample(&mut state, &data, &config);
            state.draws.u[0]
        })
        .collect();
    let m = Moments::of(&xs);
    outcome(
        m.mean.abs() <= 0.02 && (0.95..=1.05).contains(&m.variance),
        format!("mean {:+.4}, variance {:.4} over 1e5 sweeps", m.mean, m.variance),
    )
}

fn c8_derivatives() -> Outcome {
    let mut r = common::rng(801);
    let h = 1e-4;
    let (mut checked, mut skipped) = (0, 0);
    let mut worst: f64 = 0.0;
    while checked < 100 {
        let s = common::random_sieve(&mut r);
        let (lag, age) = common::random_point(&s, &mut r);
        let order = |x: f64| {
            let raw = s.raw_knot_values(x, age);
            let mut idx: Vec<usize> = (0..raw.len()).collect();
            idx.sort_by(|&a, &b| raw[a].total_cmp(&raw[b]));
            idx
        };
        // The rearranged quantile has a kink where two knots cross.
        if order(lag - h) != order(lag + h) {
            skipped += 1;
            continue;
        }
        let tau = r.random_range(0.01..0.99);
        let analytic = s.quantile_lag_derivative(tau, lag, age).unwrap();
        let fd = (s.eval_quantile(tau, lag + h, age).unwrap() - s.eval_quantile(tau, lag - h, age).unwrap()) / (2.0 * h);
        worst = worst.max((analytic - fd).abs());
        checked += 1;
    }
    outcome(worst <= 1e-5, format!("max |analytic - fd| {worst:.2e} on 100 sieves ({skipped} crossing points skipped)"))
}

fn tree(root: &Path) -> BTreeMap<String, Vec<u8>> {
    fn walk(root: &Path, dir: &Path, out: &mut BTreeMap<String, Vec<u8>>) {
        for entry in std::fs::read_dir(dir).unwrap() {
            let path = entry.unwrap().path();
            if path.is_dir() {
                walk(root, &path, out);
            } else {
                out.insert(path.strip_prefix(root).unwrap().display().to_string(), std::fs::read(&path).unwrap());
            }
        }
    }
    let mut out = BTreeMap::new();
    walk(root, root, &mut out);
    out
}

/// Manifest with its wall-clock fields removed.
fn manifest_without_times(bytes: &[u8]) -> serde_json::Value {
    let mut v: serde_json::Value = serde_json::from_slice(bytes).unwrap();
    let obj = v.as_object_mut().unwrap();
    obj.remove("started_at_unix");
    obj.remove("wall_time_seconds");
    v
}

fn c9_determinism() -> Outcome {
    let dir = tempfile::tempdir().unwrap();
    let config = dir.path().join("replicate.toml");
    std::fs::write(
        &config,
        "seed = 901\n[paths]\nout_dir = \"unused\"\n[simulate]\nn_households = 300\n[msem]\nn_outer = 6\nmh_steps_per_estep = 10\n\
         [diagnostics]\nn_sim_households = 1000\nn_density_draws = 5000\n",
    )
    .unwrap();
    let mut trees = Vec::new();
    // Both runs use the same output path, since it is part of the config echo.
    let out = dir.path().join("run");
    for threads in ["1", "2"] {
        let res = std::process::Command::new(env!("CARGO_BIN_EXE_lmp"))
            .args(["replicate", "--config", config.to_str().unwrap(), "--out", out.to_str().unwrap(), "--threads", threads])
            .output()
            .unwrap();
        if !res.status.success() {
            return outcome(false, format!("replicate failed: {}", String::from_utf8_lossy(&res.stderr)));
        }
        trees.push(tree(&out));
        std::fs::rename(&out, dir.path().join(format!("threads{threads}"))).unwrap();
    }
    let (a, b) = (&trees[0], &trees[1]);
    let mut differing: Vec<&str> = Vec::new();
    for (name, bytes) in a {
        let same = match b.get(name) {
            None => false,
            Some(other) if name == "manifest.json" => manifest_without_times(bytes) == manifest_without_times(other),
            Some(other) => other == bytes,
        };
        if !same {
            differing.push(name);
        }
    }
    let extra = b.keys().filter(|k| !a.contains_key(*k)).count();
    outcome(
        differing.is_empty() && extra == 0,
        format!("{} files compared across 1 and 2 threads, {} differ {differing:?}, {extra} extra", a.len(), differing.len()),
    )
}

fn c10_normalization() -> Outcome {
    let fit = canonical_fit();
    let dev = normalization_deviation_mc(&fit.params, &fit.data, 50_000, 1001).unwrap();
    outcome(dev.v < 0.05, format!("V deviation {:.4}; U deviation {:.4} (reported only)", dev.v, dev.u))
}

fn main() {
    let criteria: [(u32, &str, fn() -> Outcome); 10] = [
        (1, "canonical persistence", c1_canonical_persistence),
        (2, "conditional skewness sign pattern", c2_skewness_sign_pattern),
        (3, "transitory tails", c3_transitory_tails),
        (4, "growth moments and ARCH null", c4_growth_moments),
        (5, "quantile regression oracle", c5_solver_oracle),
        (6, "density and sampler", c6_density),
        (7, "MCMC known target", c7_mcmc_known_target),
        (8, "persistence derivatives", c8_derivatives),
        (9, "replicate determinism", c9_determinism),
        (10, "normalization", c10_normalization),
    ];
    let selected: Vec<u32> = std::env::args().skip(1).filter_map(|a| a.parse().ok()).collect();
    let mut failed = 0;
    let mut ran = 0;
    for (n, name, run) in criteria {
        if !selected.is_empty() && !selected.contains(&n) {
            continue;
        }
        ran += 1;
        let start = Instant::now();
        let result = catch_unwind(AssertUnwindSafe(run)).unwrap_or_else(|e| {
            let msg = e
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_default();
            outcome(false, format!("panicked: {msg}"))
        });
        if !result.pass {
            failed += 1;
        }
        println!(
            "criterion {n:>2} {name}: {} ({}; {:.1}s)",
            if result.pass { "PASS" } else { "FAIL" },
            result.detail,
            start.elapsed().as_secs_f64()
        );
    }
    println!("acceptance: {} of {ran} criteria passed", ran - failed);
    if failed > 0 {
        std::process::exit(1);
    }
}
