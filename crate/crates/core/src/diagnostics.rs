//! Empirical objects computed from data, simulated draws, and fitted models:
//! persistence surfaces, conditional skewness and kurtosis, marginal
//! densities, growth moments, and normalization deviations.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::{Component, ModelParams};
use crate::msem::{refit_tails, support_range};
use crate::panel_io::PanelDataset;
use crate::qreg::{solve_qreg, QregError, QregProblem};
use crate::sieve::{HermiteBasis, QuantileSieve, SieveError, Standardizer, TauGrid};
use crate::simulator::{simulate_like, AgeProfile, SimError, SimulatedPanel};
use crate::stats::{self, Moments};

/// Minimum number of draws accepted by [`marginal_density`].
pub const MIN_DENSITY_DRAWS: usize = 1000;

#[derive(Debug, Error)]
pub enum DiagError {
    #[error("no conditioning draws")]
    EmptyDraws,
    #[error(transparent)]
    Sieve(#[from] SieveError),
    #[error("skewness level {0} must be a grid knot in (0.5, 1)")]
    SkewnessTau(f64),
    #[error("degenerate conditional distribution at state {0}")]
    Degenerate(f64),
    #[error("horizon {horizon} needs more than {n_periods} periods")]
    Horizon { horizon: usize, n_periods: usize },
    #[error("need at least {MIN_DENSITY_DRAWS} draws, got {0}")]
    TooFewDraws(usize),
    #[error("auxiliary sieve at tau {tau}: {source}")]
    Auxiliary { tau: f64, source: QregError },
    #[error(transparent)]
    Sim(#[from] SimError),
    #[error("invalid diagnostics option: {0}")]
    Config(String),
    #[error("serializing report: {0}")]
    Serialize(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum SurfaceTarget {
    #[serde(rename = "y_data")]
    YData,
    #[serde(rename = "y_sim")]
    YSim,
    U,
    V,
}

impl SurfaceTarget {
    pub fn name(self) -> &'static str {
        match self {
            Self::YData => "y_data",
            Self::YSim => "y_sim",
            Self::U => "U",
            Self::V => "V",
        }
    }
}

/// `values[a][b]` is the average derivative at `(tau_init[a], tau_shock[b])`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PersistenceSurface {
    pub target: SurfaceTarget,
    pub tau_init_grid: Vec<f64>,
    pub tau_shock_grid: Vec<f64>,
    pub values: Vec<Vec<f64>>,
}

impl PersistenceSurface {
    pub fn mean(&self) -> f64 {
        let all: Vec<f64> = self.values.iter().flatten().copied().collect();
        stats::mean(&all)
    }
}

fn check_taus(taus: &[f64]) -> Result<(), DiagError> {
    match taus.iter().find(|t| !(**t > 0.0 && **t < 1.0)) {
        Some(&t) => Err(SieveError::TauOutOfRange(t).into()),
        None => Ok(()),
    }
}

/// Derivative of `Q(τ_shock | u, age)` in `u`, at `u` equal to the empirical
/// `τ_init` quantiles of `state_draws`, averaged over `ages` (a single age
/// fixes it).
pub fn persistence_surface(
    sieve: &QuantileSieve,
    state_draws: &[f64],
    tau_init_grid: &[f64],
    tau_shock_grid: &[f64],
    ages: &[f64],
    target: SurfaceTarget,
) -> Result<PersistenceSurface, DiagError> {
    if state_draws.is_empty() {
        return Err(DiagError::EmptyDraws);
    }
    if ages.is_empty() {
        return Err(DiagError::Config("persistence surface needs at least one age".into()));
    }
    check_taus(tau_init_grid)?;
    check_taus(tau_shock_grid)?;
    let sorted = stats::sorted_copy(state_draws);
    let values = tau_init_grid
        .par_iter()
        .map(|&ti| {
            let u = stats::quantile_sorted(&sorted, ti);
            tau_shock_grid
                .iter()
                .map(|&ts| {
                    let mut acc = 0.0;
                    for &age in ages {
                        acc += sieve.quantile_lag_derivative(ts, u, age)?;
                    }
                    Ok(acc / ages.len() as f64)
                })
                .collect::<Result<Vec<f64>, SieveError>>()
        })
        .collect::<Result<Vec<_>, _>>()?;
    Ok(PersistenceSurface {
        target,
        tau_init_grid: tau_init_grid.to_vec(),
        tau_shock_grid: tau_shock_grid.to_vec(),
        values,
    })
}

/// Quantile sieve of `y_t` given `(y_{t-1}, age_t)`, fitted knot by knot.
pub fn fit_auxiliary_sieve(
    data: &PanelDataset,
    degree_lag: usize,
    degree_age: usize,
    grid: &TauGrid,
    tol: f64,
) -> Result<QuantileSieve, DiagError> {
    let (lags, _) = lag_pairs(&data.y, data.n_periods);
    let lag_std = Standardizer::new(stats::mean(&lags), positive(stats::sd(&lags)))?;
    let age_std = Standardizer::new(data.age_mean, positive(data.age_sd))?;
    let (lo, hi) = support_range(&lags);
    let basis = HermiteBasis::new(degree_lag, degree_age, lag_std, age_std).with_lag_range(lo, hi);
    let k = basis.dim();
    let mut design = Vec::with_capacity(lags.len() * k);
    let mut response = Vec::with_capacity(lags.len());
    let mut phi = vec![0.0; k];
    for i in 0..data.n_households {
        let (y, age) = (data.y_row(i), data.age_row(i));
        for t in 1..data.n_periods {
            basis.eval_into(y[t - 1], age[t], &mut phi);
            design.extend_from_slice(&phi);
            response.push(y[t]);
        }
    }
    let solved = grid
        .knots()
        .par_iter()
        .map(|&tau| {
            let problem = QregProblem::new(design.clone(), k, response.clone(), tau);
            solve_qreg(&problem, tol).map_err(|source| DiagError::Auxiliary { tau, source })
        })
        .collect::<Result<Vec<_>, _>>()?;
    let coeffs = solved.into_iter().flatten().collect();
    let lam = 1.0 / positive(stats::sd(&response));
    let mut sieve = QuantileSieve::new(basis, grid.clone(), coeffs, lam, lam)?;
    let (lo, hi) = refit_tails(&sieve, &design, &response);
    sieve.set_tail_lambdas(lo, hi)?;
    Ok(sieve)
}

fn positive(x: f64) -> f64 {
    if x.is_finite() && x > 0.0 {
        x
    } else {
        1.0
    }
}

/// Lagged values `x_{t-1}` and current values `x_t` pooled over households
/// and `t = 2..T`.
pub fn lag_pairs(x: &[f64], n_periods: usize) -> (Vec<f64>, Vec<f64>) {
    let mut lags = Vec::new();
    let mut leads = Vec::new();
    for row in x.chunks_exact(n_periods) {
        for t in 1..n_periods {
            lags.push(row[t - 1]);
            leads.push(row[t]);
        }
    }
    (lags, leads)
}

/// Quantile skewness `[Q(τ) + Q(1-τ) - 2 Q(1/2)] / [Q(τ) - Q(1-τ)]` at each
/// conditioning value.
pub fn conditional_skewness(sieve: &QuantileSieve, cond_values: &[f64], tau: f64, age: f64) -> Result<Vec<f64>, DiagError> {
    let grid = sieve.grid();
    if !(tau > 0.5 && tau < 1.0) || grid.knot_index(tau).is_none() || grid.knot_index(1.0 - tau).is_none() {
        return Err(DiagError::SkewnessTau(tau));
    }
    cond_values
        .iter()
        .map(|&u| {
            let q = sieve.knot_values(u, age);
            let hi = sieve.quantile_from_knots(&q, tau);
            let lo = sieve.quantile_from_knots(&q, 1.0 - tau);
            let mid = sieve.quantile_from_knots(&q, 0.5);
            let den = hi - lo;
            if den <= 0.0 || !den.is_finite() {
                return Err(DiagError::Degenerate(u));
            }
            Ok((hi + lo - 2.0 * mid) / den)
        })
        .collect()
}

/// Quantile kurtosis `[Q(11/12) - Q(1/12)] / [Q(3/4) - Q(1/4)]`; about 2.1
/// for a Gaussian.
pub fn conditional_kurtosis(sieve: &QuantileSieve, cond_values: &[f64], age: f64) -> Result<Vec<f64>, DiagError> {
    cond_values
        .iter()
        .map(|&u| {
            let q = sieve.knot_values(u, age);
            let at = |t: f64| sieve.quantile_from_knots(&q, t);
            let den = at(0.75) - at(0.25);
            if den <= 0.0 || !den.is_finite() {
                return Err(DiagError::Degenerate(u));
            }
            Ok((at(11.0 / 12.0) - at(1.0 / 12.0)) / den)
        })
        .collect()
}

/// A statistic evaluated at percentiles of the conditioning distribution.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConditionalCurve {
    pub component: Component,
    pub percentiles: Vec<f64>,
    pub cond_values: Vec<f64>,
    pub values: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MarginalDensity {
    pub component: Component,
    pub age: f64,
    pub grid: Vec<f64>,
    pub density: Vec<f64>,
    pub moments: Moments,
}

/// Kernel density of a component's marginal distribution, from `n_sim`
/// simulated draws at a fixed age pooled over periods. With no `grid`, 512
/// points spanning mean ± 5 sd are used.
pub fn marginal_density(
    params: &ModelParams,
    component: Component,
    age: f64,
    grid: Option<&[f64]>,
    n_sim: usize,
    n_periods: usize,
    seed: u64,
) -> Result<MarginalDensity, DiagError> {
    if n_sim < MIN_DENSITY_DRAWS {
        return Err(DiagError::TooFewDraws(n_sim));
    }
    let n_periods = n_periods.max(1);
    let n_households = n_sim.div_ceil(n_periods);
    let sim = crate::simulator::simulate_from_model(params, n_households, n_periods, &AgeProfile::fixed(age), seed)?;
    let mut draws = match component {
        Component::U => sim.truth.u,
        Component::V => sim.truth.v,
    };
    draws.truncate(n_sim);
    let grid = match grid {
        Some(g) => g.to_vec(),
        None => stats::default_grid(&draws, 512),
    };
    let density = stats::gaussian_kde(&draws, &grid, stats::silverman_bandwidth(&draws));
    Ok(MarginalDensity {
        component,
        age,
        grid,
        density,
        moments: Moments::of(&draws),
    })
}

/// Pooled moments of `h`-period growth plus an ARCH statistic.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GrowthRecord {
    pub horizon: usize,
    pub n: usize,
    pub variance: f64,
    pub skewness: f64,
    pub kurtosis: f64,
    /// Slope of `(y_{t+h} - y_t)²` on `(y_{t-1} - y_{t-1-h})²`; the two
    /// windows do not overlap. `None` when the panel is shorter than `2h + 2`.
    pub arch_slope: Option<f64>,
    /// Household-clustered standard error of `arch_slope`.
    pub arch_se: Option<f64>,
    pub grid: Vec<f64>,
    pub density: Vec<f64>,
}

pub fn growth_moments(data: &PanelDataset, horizons: &[usize]) -> Result<Vec<GrowthRecord>, DiagError> {
    let t_len = data.n_periods;
    if let Some(&h) = horizons.iter().find(|&&h| h == 0 || h >= t_len) {
        return Err(DiagError::Horizon { horizon: h, n_periods: t_len });
    }
    horizons
        .par_iter()
        .map(|&h| {
            let mut growth = Vec::new();
            let (mut x, mut y, mut cluster) = (Vec::new(), Vec::new(), Vec::new());
            for i in 0..data.n_households {
                let row = data.y_row(i);
                for t in 0..t_len - h {
                    growth.push(row[t + h] - row[t]);
                }
                for t in (h + 1)..t_len.saturating_sub(h) {
                    let lagged = row[t - 1] - row[t - 1 - h];
                    let current = row[t + h] - row[t];
                    x.push(lagged * lagged);
                    y.push(current * current);
                    cluster.push(i);
                }
            }
            let m = Moments::of(&growth);
            let (arch_slope, arch_se) = if x.len() >= 3 {
                let (b, se) = stats::ols_slope_clustered(&x, &y, &cluster);
                (Some(b), Some(se))
            } else {
                (None, None)
            };
            let grid = stats::default_grid(&growth, 512);
            let density = stats::gaussian_kde(&growth, &grid, stats::silverman_bandwidth(&growth));
            Ok(GrowthRecord {
                horizon: h,
                n: growth.len(),
                variance: m.variance,
                skewness: m.skewness,
                kurtosis: m.kurtosis,
                arch_slope,
                arch_se,
                grid,
                density,
            })
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NormalizationDeviation {
    #[serde(rename = "U")]
    pub u: f64,
    #[serde(rename = "V")]
    pub v: f64,
}

/// Mean over simulated states of `|E[U' | U] - U|` and `|E[V' | V]|`, using
/// the exact mean of each conditional distribution.
pub fn normalization_deviation(params: &ModelParams, sim: &SimulatedPanel) -> NormalizationDeviation {
    let t_len = sim.truth.n_periods;
    let dev = |x: &[f64], sieve: &QuantileSieve, drift: bool| {
        let mut terms = Vec::new();
        for (row, ages) in x.chunks_exact(t_len).zip(sim.data.age.chunks_exact(t_len)) {
            for t in 1..t_len {
                let m = sieve.conditional_mean(row[t - 1], ages[t]);
                terms.push((m - if drift { row[t - 1] } else { 0.0 }).abs());
            }
        }
        stats::mean(&terms)
    };
    NormalizationDeviation {
        u: dev(&sim.truth.u, &params.sieve_u, true),
        v: dev(&sim.truth.v, &params.sieve_v, false),
    }
}

/// Monte Carlo normalization deviation from `n_sim` transitions simulated
/// with the ages of `data`.
pub fn normalization_deviation_mc(params: &ModelParams, data: &PanelDataset, n_sim: usize, seed: u64) -> Result<NormalizationDeviation, DiagError> {
    let per = data.n_periods.saturating_sub(1).max(1);
    let sim = simulate_like(params, data, n_sim.div_ceil(per).max(1), seed)?;
    Ok(normalization_deviation(params, &sim))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DiagnosticsConfig {
    /// Households simulated from the fitted model for state distributions.
    pub n_sim_households: usize,
    /// Draws for each marginal density.
    pub n_density_draws: usize,
    pub skewness_tau: f64,
    pub conditioning_percentiles: Vec<f64>,
    pub horizons: Vec<usize>,
    /// Average persistence derivatives over the sample's age deciles instead
    /// of fixing the mean age.
    pub average_over_ages: bool,
    pub tol_qreg: f64,
}

impl Default for DiagnosticsConfig {
    fn default() -> Self {
        Self {
            n_sim_households: 10_000,
            n_density_draws: 100_000,
            skewness_tau: 11.0 / 12.0,
            conditioning_percentiles: (1..=9).map(|j| j as f64 / 10.0).collect(),
            horizons: (2..=8).collect(),
            average_over_ages: false,
            tol_qreg: 1e-8,
        }
    }
}

impl DiagnosticsConfig {
    pub fn validate(&self) -> Result<(), DiagError> {
        let bad = |m: &str| Err(DiagError::Config(m.to_string()));
        if self.n_sim_households == 0 {
            return bad("n_sim_households must be >= 1");
        }
        if self.n_density_draws < MIN_DENSITY_DRAWS {
            return bad("n_density_draws must be >= 1000");
        }
        if !(self.skewness_tau > 0.5 && self.skewness_tau < 1.0) {
            return bad("skewness_tau must lie in (0.5, 1)");
        }
        if self.conditioning_percentiles.is_empty() || self.conditioning_percentiles.iter().any(|p| !(*p > 0.0 && *p < 1.0)) {
            return bad("conditioning_percentiles must be non-empty and inside (0, 1)");
        }
        if self.horizons.iter().any(|&h| h == 0) {
            return bad("horizons must be >= 1");
        }
        if !(self.tol_qreg.is_finite() && self.tol_qreg > 0.0) {
            return bad("tol_qreg must be > 0");
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiagnosticsReport {
    pub surfaces: Vec<PersistenceSurface>,
    pub skewness_tau: f64,
    pub skewness_curves: Vec<ConditionalCurve>,
    pub kurtosis_curves: Vec<ConditionalCurve>,
    pub marginal_densities: Vec<MarginalDensity>,
    pub growth_moments: Vec<GrowthRecord>,
    /// Requested horizons that the panel is too short for.
    pub skipped_horizons: Vec<usize>,
    pub normalization_deviation: NormalizationDeviation,
}

/// Ages at which persistence derivatives are evaluated.
fn surface_ages(data: &PanelDataset, average: bool) -> Vec<f64> {
    if !average {
        return vec![data.age_mean];
    }
    let sorted = stats::sorted_copy(&data.age);
    (1..=9).map(|j| stats::quantile_sorted(&sorted, j as f64 / 10.0)).collect()
}

/// Every diagnostic for `data` and the model fitted to it.
pub fn run_diagnostics(data: &PanelDataset, params: &ModelParams, config: &DiagnosticsConfig, seed: u64) -> Result<DiagnosticsReport, DiagError> {
    config.validate()?;
    params.validate().map_err(|e| DiagError::Config(e.to_string()))?;
    if data.n_periods < 2 {
        return Err(DiagError::Horizon { horizon: 1, n_periods: data.n_periods });
    }
    let sim = simulate_like(params, data, config.n_sim_households, crate::rng::derive_seed(seed, 1))?;
    let grid = params.grid().clone();
    let taus = grid.knots().to_vec();
    let ages = surface_ages(data, config.average_over_ages);
    let age = data.age_mean;
    let (u_lags, _) = lag_pairs(&sim.truth.u, sim.truth.n_periods);
    let (v_lags, _) = lag_pairs(&sim.truth.v, sim.truth.n_periods);

    let (dl, da) = (params.sieve_u.basis().degree_lag, params.sieve_u.basis().degree_age);
    let aux_data = fit_auxiliary_sieve(data, dl, da, &grid, config.tol_qreg)?;
    let aux_sim = fit_auxiliary_sieve(&sim.data, dl, da, &grid, config.tol_qreg)?;
    let (y_lags, _) = lag_pairs(&data.y, data.n_periods);
    let (ysim_lags, _) = lag_pairs(&sim.data.y, sim.data.n_periods);
    let surfaces = vec![
        persistence_surface(&aux_data, &y_lags, &taus, &taus, &ages, SurfaceTarget::YData)?,
        persistence_surface(&aux_sim, &ysim_lags, &taus, &taus, &ages, SurfaceTarget::YSim)?,
        persistence_surface(&params.sieve_u, &u_lags, &taus, &taus, &ages, SurfaceTarget::U)?,
        persistence_surface(&params.sieve_v, &v_lags, &taus, &taus, &ages, SurfaceTarget::V)?,
    ];

    let mut skewness_curves = Vec::new();
    let mut kurtosis_curves = Vec::new();
    for (component, lags, sieve) in [(Component::U, &u_lags, &params.sieve_u), (Component::V, &v_lags, &params.sieve_v)] {
        let sorted = stats::sorted_copy(lags);
        let cond: Vec<f64> = config
            .conditioning_percentiles
            .iter()
            .map(|&p| stats::quantile_sorted(&sorted, p))
            .collect();
        let curve = |values| ConditionalCurve {
            component,
            percentiles: config.conditioning_percentiles.clone(),
            cond_values: cond.clone(),
            values,
        };
        skewness_curves.push(curve(conditional_skewness(sieve, &cond, config.skewness_tau, age)?));
        kurtosis_curves.push(curve(conditional_kurtosis(sieve, &cond, age)?));
    }

    let marginal_densities = [Component::U, Component::V]
        .iter()
        .enumerate()
        .map(|(j, &c)| {
            marginal_density(
                params,
                c,
                age,
                None,
                config.n_density_draws,
                data.n_periods,
                crate::rng::derive_seed(seed, 2 + j as u64),
            )
        })
        .collect::<Result<Vec<_>, _>>()?;

    let (usable, skipped): (Vec<usize>, Vec<usize>) = config.horizons.iter().partition(|&&h| h < data.n_periods);
    let growth = growth_moments(data, &usable)?;
    let normalization = normalization_deviation(params, &sim);

    Ok(DiagnosticsReport {
        surfaces,
        skewness_tau: config.skewness_tau,
        skewness_curves,
        kurtosis_curves,
        marginal_densities,
        growth_moments: growth,
        skipped_horizons: skipped,
        normalization_deviation: normalization,
    })
}

fn csv_bytes(header: &[&str], rows: impl Iterator<Item = Vec<f64>>) -> Vec<u8> {
    let mut out = header.join(",");
    out.push('\n');
    for row in rows {
        let cells: Vec<String> = row.iter().map(|v| v.to_string()).collect();
        out.push_str(&cells.join(","));
        out.push('\n');
    }
    out.into_bytes()
}

/// `report.json` and one CSV per surface, curve, and density, as
/// `(file name, contents)` pairs in a fixed order.
pub fn report_files(report: &DiagnosticsReport) -> Result<Vec<(String, Vec<u8>)>, DiagError> {
    let mut files = Vec::new();
    let json = serde_json::to_vec_pretty(report).map_err(|e| DiagError::Serialize(e.to_string()))?;
    files.push(("report.json".to_string(), json));
    for s in &report.surfaces {
        let rows = s.tau_init_grid.iter().enumerate().flat_map(|(a, &ti)| {
            s.tau_shock_grid
                .iter()
                .enumerate()
                .map(move |(b, &ts)| vec![ti, ts, s.values[a][b]])
        });
        files.push((format!("surface_{}.csv", s.target.name()), csv_bytes(&["tau_init", "tau_shock", "value"], rows)));
    }
    for (prefix, curves) in [("skewness", &report.skewness_curves), ("kurtosis", &report.kurtosis_curves)] {
        for c in curves {
            let rows = (0..c.values.len()).map(|j| vec![c.percentiles[j], c.cond_values[j], c.values[j]]);
            files.push((
                format!("{prefix}_{}.csv", c.component.name()),
                csv_bytes(&["percentile", "cond_value", "value"], rows),
            ));
        }
    }
    for m in &report.marginal_densities {
        let rows = m.grid.iter().zip(&m.density).map(|(&x, &d)| vec![x, d]);
        files.push((format!("marginal_{}.csv", m.component.name()), csv_bytes(&["value", "density"], rows)));
    }
    for g in &report.growth_moments {
        let rows = g.grid.iter().zip(&g.density).map(|(&x, &d)| vec![x, d]);
        files.push((format!("growth_density_h{}.csv", g.horizon), csv_bytes(&["value", "density"], rows)));
    }
    let mut gm = String::from("horizon,n,variance,skewness,kurtosis,arch_slope,arch_se\n");
    for g in &report.growth_moments {
        let opt = |x: Option<f64>| x.map(|v| v.to_string()).unwrap_or_default();
        gm.push_str(&format!(
            "{},{},{},{},{},{},{}\n",
            g.horizon,
            g.n,
            g.variance,
            g.skewness,
            g.kurtosis,
            opt(g.arch_slope),
            opt(g.arch_se)
        ));
    }
    files.push(("growth_moments.csv".to_string(), gm.into_bytes()));
    Ok(files)
}
