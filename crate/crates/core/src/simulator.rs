//! Synthetic panels from known data-generating processes.
//!
//! Three kinds are supported: the canonical random-walk-plus-noise model, a
//! built-in nonlinear sieve process whose innovations are right-skewed at low
//! levels of `U` and left-skewed at high levels, and any fitted
//! [`ModelParams`]. Each household draws `U`, `V`, and the instrument from
//! three separate random streams keyed by `(seed, household)`.

use std::io::Write;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::{ModelError, ModelParams};
use crate::panel_io::{PanelDataset, PanelError, MIN_PERIODS};
use crate::qreg::logistic;
use crate::rng::{self, domain};
use crate::sieve::{HermiteBasis, QuantileSieve, SieveError, Standardizer, TauGrid};
use crate::stats::{normal_cdf, normal_quantile};

#[derive(Debug, Error)]
pub enum SimError {
    #[error("invalid DGP: {0}")]
    Spec(String),
    #[error("fitted DGP requires model parameters")]
    MissingParams,
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Sieve(#[from] SieveError),
    #[error(transparent)]
    Panel(#[from] PanelError),
    #[error("writing truth file: {0}")]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DgpKind {
    Canonical,
    NonlinearSieve,
    Fitted,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TransitoryDist {
    Gaussian,
    Laplace,
}

/// Household `i` is `start + (i mod cohort_spread)` years old in its first
/// period and ages by `increment` per period.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AgeProfile {
    pub start: f64,
    pub increment: f64,
    pub cohort_spread: usize,
}

impl Default for AgeProfile {
    fn default() -> Self {
        Self {
            start: 25.0,
            increment: 1.0,
            cohort_spread: 30,
        }
    }
}

impl AgeProfile {
    /// Every household is `age` in every period.
    pub fn fixed(age: f64) -> Self {
        Self {
            start: age,
            increment: 0.0,
            cohort_spread: 1,
        }
    }

    pub fn age(&self, household: usize, period: usize) -> f64 {
        let spread = self.cohort_spread.max(1);
        self.start + (household % spread) as f64 + period as f64 * self.increment
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DgpSpec {
    pub kind: DgpKind,
    /// Innovation sd of the persistent component.
    pub sigma_eta: f64,
    pub transitory_dist: TransitoryDist,
    /// Standard deviation of the transitory component (both distributions).
    pub transitory_scale: f64,
    /// `(β0, β1)` of the logistic instrument channel.
    pub instrument_beta: [f64; 2],
    pub n_households: usize,
    pub n_periods: usize,
    pub age_profile: AgeProfile,
    pub seed: u64,
    /// Strength of the level-dependent skew in the nonlinear sieve process.
    pub skew_strength: f64,
}

impl Default for DgpSpec {
    fn default() -> Self {
        Self {
            kind: DgpKind::Canonical,
            sigma_eta: 0.15,
            transitory_dist: TransitoryDist::Gaussian,
            transitory_scale: 0.10,
            instrument_beta: [0.0, 1.0],
            n_households: 1000,
            n_periods: 6,
            age_profile: AgeProfile::default(),
            seed: 0,
            skew_strength: 0.2,
        }
    }
}

impl DgpSpec {
    pub fn validate(&self) -> Result<(), SimError> {
        let bad = |m: &str| Err(SimError::Spec(m.to_string()));
        if self.n_periods < MIN_PERIODS {
            return bad("n_periods must be >= 5");
        }
        if self.n_households < 1 {
            return bad("n_households must be >= 1");
        }
        if !(self.sigma_eta.is_finite() && self.sigma_eta >= 0.0) {
            return bad("sigma_eta must be >= 0");
        }
        if !(self.transitory_scale.is_finite() && self.transitory_scale > 0.0) {
            return bad("transitory_scale must be > 0");
        }
        if self.instrument_beta.iter().any(|b| !b.is_finite()) {
            return bad("instrument_beta must be finite");
        }
        if !self.age_profile.start.is_finite() || !self.age_profile.increment.is_finite() {
            return bad("age_profile must be finite");
        }
        if !(self.skew_strength.is_finite() && self.skew_strength >= 0.0) {
            return bad("skew_strength must be >= 0");
        }
        Ok(())
    }
}

/// True latent components, `N x T` row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct LatentTruth {
    pub n_periods: usize,
    pub u: Vec<f64>,
    pub v: Vec<f64>,
}

impl LatentTruth {
    pub fn write_csv<W: Write>(&self, data: &PanelDataset, writer: W) -> Result<(), SimError> {
        let mut w = csv::Writer::from_writer(writer);
        w.write_record(["household", "year", "U", "V"]).map_err(csv_io)?;
        for (idx, (u, v)) in self.u.iter().zip(&self.v).enumerate() {
            let i = idx / self.n_periods;
            w.write_record([
                data.household_ids[i].to_string(),
                data.years[idx].to_string(),
                u.to_string(),
                v.to_string(),
            ])
            .map_err(csv_io)?;
        }
        w.flush()?;
        Ok(())
    }
}

fn csv_io(e: csv::Error) -> SimError {
    SimError::Io(std::io::Error::other(e))
}

#[derive(Debug, Clone, PartialEq)]
pub struct SimulatedPanel {
    pub data: PanelDataset,
    pub truth: LatentTruth,
}

/// Draw from the transitory distribution with the given sd.
fn transitory_draw(dist: TransitoryDist, scale: f64, rng: &mut ChaCha8Rng) -> f64 {
    match dist {
        TransitoryDist::Gaussian => {
            let z: f64 = rng.sample(StandardNormal);
            scale * z
        }
        TransitoryDist::Laplace => {
            let b = scale / std::f64::consts::SQRT_2;
            let p: f64 = rng.random::<f64>() - 0.5;
            -b * p.signum() * (1.0 - 2.0 * p.abs()).max(f64::MIN_POSITIVE).ln()
        }
    }
}

fn assemble(n: usize, t_len: usize, ages: &AgeProfile, rows: PathRows) -> Result<SimulatedPanel, SimError> {
    let age = (0..n).flat_map(|i| (0..t_len).map(move |t| ages.age(i, t))).collect();
    assemble_with_ages(n, t_len, age, rows)
}

fn assemble_with_ages(n: usize, t_len: usize, age: Vec<f64>, rows: PathRows) -> Result<SimulatedPanel, SimError> {
    let mut u = Vec::with_capacity(n * t_len);
    let mut v = Vec::with_capacity(n * t_len);
    let mut omega = Vec::with_capacity(n * t_len);
    for (ru, rv, rw) in rows {
        u.extend(ru);
        v.extend(rv);
        omega.extend(rw);
    }
    let y = u.iter().zip(&v).map(|(a, b)| a + b).collect();
    let ids = (1..=n as i64).collect();
    let years = (0..n).flat_map(|_| 1..=t_len as i64).collect();
    let data = PanelDataset::from_parts(ids, years, y, age, omega, Vec::new(), t_len)?;
    Ok(SimulatedPanel {
        data,
        truth: LatentTruth { n_periods: t_len, u, v },
    })
}

/// Random-walk `U` plus i.i.d. `V`, with a logistic instrument in `U`.
pub fn simulate_canonical(spec: &DgpSpec) -> Result<SimulatedPanel, SimError> {
    spec.validate()?;
    let (n, t_len) = (spec.n_households, spec.n_periods);
    let [b0, b1] = spec.instrument_beta;
    let rows = (0..n)
        .into_par_iter()
        .map(|i| {
            let mut ru = rng::stream(spec.seed, domain::SIM_U, i as u64);
            let mut rv = rng::stream(spec.seed, domain::SIM_V, i as u64);
            let mut rw = rng::stream(spec.seed, domain::SIM_OMEGA, i as u64);
            let mut u = Vec::with_capacity(t_len);
            let mut level = 0.0;
            for _ in 0..t_len {
                let z: f64 = ru.sample(StandardNormal);
                level += spec.sigma_eta * z;
                u.push(level);
            }
            let v = (0..t_len)
                .map(|_| transitory_draw(spec.transitory_dist, spec.transitory_scale, &mut rv))
                .collect();
            let w = u
                .iter()
                .map(|&ut| u8::from(rw.random::<f64>() < logistic(b0 + b1 * ut)))
                .collect();
            (u, v, w)
        })
        .collect();
    assemble(n, t_len, &spec.age_profile, rows)
}

/// Inverse-CDF simulation from fitted (or constructed) parameters.
pub fn simulate_from_model(
    params: &ModelParams,
    n_households: usize,
    n_periods: usize,
    ages: &AgeProfile,
    seed: u64,
) -> Result<SimulatedPanel, SimError> {
    let age_of = |i: usize, t: usize| ages.age(i, t);
    let rows = simulate_paths(params, n_households, n_periods, &age_of, seed)?;
    assemble(n_households, n_periods, ages, rows)
}

/// Simulate `n_households` histories whose ages are copied, cycling, from the
/// households of `data`.
pub fn simulate_like(
    params: &ModelParams,
    data: &PanelDataset,
    n_households: usize,
    seed: u64,
) -> Result<SimulatedPanel, SimError> {
    let t_len = data.n_periods;
    let age_of = |i: usize, t: usize| data.age[(i % data.n_households) * t_len + t];
    let rows = simulate_paths(params, n_households, t_len, &age_of, seed)?;
    let mut age = Vec::with_capacity(n_households * t_len);
    for i in 0..n_households {
        age.extend((0..t_len).map(|t| age_of(i, t)));
    }
    assemble_with_ages(n_households, t_len, age, rows)
}

type PathRows = Vec<(Vec<f64>, Vec<f64>, Vec<u8>)>;

fn simulate_paths<A>(params: &ModelParams, n_households: usize, n_periods: usize, age_of: &A, seed: u64) -> Result<PathRows, SimError>
where
    A: Fn(usize, usize) -> f64 + Sync,
{
    params.validate()?;
    if n_households == 0 || n_periods == 0 {
        return Err(SimError::Spec("need at least one household and one period".into()));
    }
    let rows = (0..n_households)
        .into_par_iter()
        .map(|i| {
            let mut ru = rng::stream(seed, domain::SIM_U, i as u64);
            let mut rv = rng::stream(seed, domain::SIM_V, i as u64);
            let mut rw = rng::stream(seed, domain::SIM_OMEGA, i as u64);
            let mut u = Vec::with_capacity(n_periods);
            let mut v = Vec::with_capacity(n_periods);
            for t in 0..n_periods {
                let age = age_of(i, t);
                let (eta, eps) = (open_uniform(&mut ru), open_uniform(&mut rv));
                let (su, sv, lu, lv) = if t == 0 {
                    (&params.sieve_u1, &params.sieve_v1, 0.0, 0.0)
                } else {
                    (&params.sieve_u, &params.sieve_v, u[t - 1], v[t - 1])
                };
                u.push(su.sample(lu, age, eta).expect("uniform in (0,1)"));
                v.push(sv.sample(lv, age, eps).expect("uniform in (0,1)"));
            }
            let w = u
                .iter()
                .map(|&ut| u8::from(rw.random::<f64>() < logistic(params.beta0 + params.beta1 * ut)))
                .collect();
            (u, v, w)
        })
        .collect();
    Ok(rows)
}

/// Uniform draw on the open interval (0, 1).
fn open_uniform(rng: &mut ChaCha8Rng) -> f64 {
    loop {
        let u: f64 = rng.random();
        if u > 0.0 {
            return u;
        }
    }
}

/// Knot values and tail rates representing a centered distribution with the
/// given sd on `grid`. Gaussian tails use the mean exceedance beyond the
/// extreme knot; Laplace tails are exact.
pub fn distribution_knots(dist: TransitoryDist, sd: f64, grid: &TauGrid) -> (Vec<f64>, f64, f64) {
    match dist {
        TransitoryDist::Gaussian => {
            let knots = grid.knots().iter().map(|&t| sd * normal_quantile(t)).collect();
            let z = normal_quantile(grid.first());
            let pdf = (-0.5 * z * z).exp() / (2.0 * std::f64::consts::PI).sqrt();
            let exceed = pdf / normal_cdf(z) + z;
            let lam = 1.0 / (sd * exceed);
            (knots, lam, lam)
        }
        TransitoryDist::Laplace => {
            let b = sd / std::f64::consts::SQRT_2;
            let knots = grid
                .knots()
                .iter()
                .map(|&t| if t < 0.5 { b * (2.0 * t).ln() } else { -b * (2.0 * (1.0 - t)).ln() })
                .collect();
            (knots, 1.0 / b, 1.0 / b)
        }
    }
}

/// Scale of `U` used to standardize the lag in the nonlinear process.
pub fn nonlinear_state_scale(spec: &DgpSpec) -> f64 {
    2.5 * spec.sigma_eta.max(1e-8)
}

/// Parameters of the built-in nonlinear process:
/// `Q_U(τ | u) = u + σ z_τ - κ σ (u / s)(z_τ² - 1)`, with `z_τ` the standard
/// normal quantile, `σ = sigma_eta`, `κ = skew_strength`, `s` the state scale.
/// The quantile-based skewness of the innovation is `-κ (u / s) z_τ` at level
/// `τ`: positive below the centre and negative above it. `U_1 ~ N(0, (2σ)²)`;
/// `V` is i.i.d. from the transitory distribution.
pub fn skew_reversal_params(spec: &DgpSpec) -> Result<ModelParams, SimError> {
    spec.validate()?;
    let grid = TauGrid::default();
    let sigma = spec.sigma_eta.max(1e-8);
    let s = nonlinear_state_scale(spec);
    let kappa = spec.skew_strength;
    let flat = Standardizer::identity();
    let age = Standardizer::new(spec.age_profile.start, 10.0)?;

    let mut coeffs = Vec::with_capacity(grid.len() * 2);
    for &t in grid.knots() {
        let z = normal_quantile(t);
        coeffs.push(sigma * z);
        coeffs.push(s - kappa * sigma * (z * z - 1.0));
    }
    let (_, lam_u, _) = distribution_knots(TransitoryDist::Gaussian, sigma, &grid);
    let sieve_u = QuantileSieve::new(
        HermiteBasis::new(1, 0, Standardizer::new(0.0, s)?, age),
        grid.clone(),
        coeffs,
        lam_u,
        lam_u,
    )?;
    let basis0 = HermiteBasis::new(0, 0, flat, age);
    let (k1, l1, h1) = distribution_knots(TransitoryDist::Gaussian, 2.0 * sigma, &grid);
    let sieve_u1 = QuantileSieve::unconditional(basis0.clone(), grid.clone(), &k1, l1, h1)?;
    let (kv, lv, hv) = distribution_knots(spec.transitory_dist, spec.transitory_scale, &grid);
    let sieve_v = QuantileSieve::unconditional(basis0.clone(), grid.clone(), &kv, lv, hv)?;
    let sieve_v1 = sieve_v.clone();
    Ok(ModelParams {
        sieve_u,
        sieve_v,
        sieve_u1,
        sieve_v1,
        beta0: spec.instrument_beta[0],
        beta1: spec.instrument_beta[1],
    })
}

/// Simulate according to `spec.kind`; `fitted` is required for the fitted kind.
pub fn simulate(spec: &DgpSpec, fitted: Option<&ModelParams>) -> Result<SimulatedPanel, SimError> {
    spec.validate()?;
    match spec.kind {
        DgpKind::Canonical => simulate_canonical(spec),
        DgpKind::NonlinearSieve => {
            let params = skew_reversal_params(spec)?;
            simulate_from_model(&params, spec.n_households, spec.n_periods, &spec.age_profile, spec.seed)
        }
        DgpKind::Fitted => {
            let params = fitted.ok_or(SimError::MissingParams)?;
            simulate_from_model(params, spec.n_households, spec.n_periods, &spec.age_profile, spec.seed)
        }
    }
}
