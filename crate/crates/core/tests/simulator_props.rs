use lmp_core::model::ModelParams;
use lmp_core::msem::{run_msem, MsemConfig};
use lmp_core::panel_io::{parse_panel_reader, residualize, write_panel_csv, PanelSchema};
use lmp_core::sieve::{HermiteBasis, QuantileSieve, Standardizer, TauGrid};
use lmp_core::simulator::{
    simulate, simulate_canonical, simulate_from_model, simulate_like, AgeProfile, DgpKind, DgpSpec, TransitoryDist,
};
use lmp_core::stats;

fn correlation(a: &[f64], b: &[f64]) -> f64 {
    let (ma, mb) = (stats::mean(a), stats::mean(b));
    let cov: f64 = a.iter().zip(b).map(|(x, y)| (x - ma) * (y - mb)).sum::<f64>() / a.len() as f64;
    cov / (stats::variance(a) * stats::variance(b)).sqrt()
}

fn column(x: &[f64], n_periods: usize, t: usize) -> Vec<f64> {
    x.chunks_exact(n_periods).map(|row| row[t]).collect()
}

#[test]
fn earnings_variance_is_permanent_plus_transitory() {
    let spec = DgpSpec { n_households: 10_000, seed: 1, ..Default::default() };
    let sim = simulate_canonical(&spec).unwrap();
    for t in 0..spec.n_periods {
        let y = column(&sim.data.y, spec.n_periods, t);
        let u = column(&sim.truth.u, spec.n_periods, t);
        let v = column(&sim.truth.v, spec.n_periods, t);
        let expected = (t + 1) as f64 * 0.15f64.powi(2) + 0.10f64.powi(2);
        let got = stats::variance(&y);
        assert!((got / expected - 1.0).abs() < 0.06, "t={t}: {got} vs {expected}");
        let parts = stats::variance(&u) + stats::variance(&v);
        assert!((got / parts - 1.0).abs() < 0.05, "t={t}: {got} vs {parts}");
    }
}

#[test]
fn instrument_is_uninformative_when_slope_is_zero() {
    let spec = DgpSpec { n_households: 10_000, instrument_beta: [0.3, 0.0], seed: 2, ..Default::default() };
    let sim = simulate_canonical(&spec).unwrap();
    let omega: Vec<f64> = sim.data.instrument.iter().map(|&w| f64::from(w)).collect();
    assert!(correlation(&omega, &sim.truth.u).abs() < 0.03);

    let informative = DgpSpec { instrument_beta: [0.0, 3.0], ..spec };
    let sim = simulate_canonical(&informative).unwrap();
    let omega: Vec<f64> = sim.data.instrument.iter().map(|&w| f64::from(w)).collect();
    assert!(correlation(&omega, &sim.truth.u) > 0.1);
}

#[test]
fn identity_transition_freezes_the_persistent_component() {
    let spec = DgpSpec { kind: DgpKind::NonlinearSieve, n_households: 200, seed: 3, ..Default::default() };
    let base = lmp_core::simulator::skew_reversal_params(&spec).unwrap();
    let grid = TauGrid::default();
    let basis = HermiteBasis::new(1, 0, Standardizer::identity(), Standardizer::new(40.0, 10.0).unwrap());
    let coeffs: Vec<f64> = grid.knots().iter().flat_map(|_| [0.0, 1.0]).collect();
    let frozen = QuantileSieve::new(basis, grid, coeffs, 1e12, 1e12).unwrap();
    let params = ModelParams { sieve_u: frozen, ..base };
    let sim = simulate_from_model(&params, 200, 8, &AgeProfile::default(), 4).unwrap();
    for row in sim.truth.u.chunks_exact(8) {
        for u in row {
            assert!((u - row[0]).abs() < 1e-9, "{u} drifted from {}", row[0]);
        }
    }
}

#[test]
fn streams_are_separate_per_component() {
    let gaussian = DgpSpec { n_households: 300, seed: 5, ..Default::default() };
    let laplace = DgpSpec { transitory_dist: TransitoryDist::Laplace, transitory_scale: 0.4, ..gaussian.clone() };
    let a = simulate_canonical(&gaussian).unwrap();
    let b = simulate_canonical(&laplace).unwrap();
    assert_eq!(a.truth.u, b.truth.u);
    assert_eq!(a.data.instrument, b.data.instrument);
    assert_ne!(a.truth.v, b.truth.v);

    // Household i's history does not depend on how many households follow it.
    let short = simulate_canonical(&DgpSpec { n_households: 100, ..gaussian }).unwrap();
    assert_eq!(&a.data.y[..short.data.y.len()], &short.data.y[..]);
}

#[test]
fn simulated_panels_pass_ingestion() {
    for kind in [DgpKind::Canonical, DgpKind::NonlinearSieve] {
        let spec = DgpSpec { kind, n_households: 150, seed: 6, ..Default::default() };
        let sim = simulate(&spec, None).unwrap();
        let mut buf = Vec::new();
        write_panel_csv(&sim.data.to_raw(), &mut buf).unwrap();
        let raw = parse_panel_reader(buf.as_slice(), &PanelSchema::default()).unwrap();
        assert_eq!(raw.n_households(), 150);
        assert_eq!(raw.dropped_households, 0);
        let data = residualize(&raw).unwrap();
        assert_eq!(data.n_periods, spec.n_periods);
        assert!(data.y.iter().all(|v| v.is_finite()));
    }
}

#[test]
fn fitted_model_reproduces_earnings_quantiles() {
    let spec = DgpSpec { n_households: 1000, seed: 7, ..Default::default() };
    let sim = simulate_canonical(&spec).unwrap();
    let config = MsemConfig { n_outer: 10, seed: 8, ..Default::default() };
    let (fit, _) = run_msem(&sim.data, &config, None).unwrap();
    let again = simulate_like(&fit, &sim.data, 5000, 9).unwrap();
    let t = spec.n_periods;
    for period in [0, t / 2, t - 1] {
        let data = stats::sorted_copy(&column(&sim.data.y, t, period));
        let model = stats::sorted_copy(&column(&again.data.y, t, period));
        for p in [0.1, 0.25, 0.5, 0.75, 0.9] {
            let (a, b) = (stats::quantile_sorted(&data, p), stats::quantile_sorted(&model, p));
            assert!((a - b).abs() < 0.1, "period {period} p={p}: data {a} model {b}");
        }
    }
}
