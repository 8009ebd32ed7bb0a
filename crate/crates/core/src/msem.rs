//! Modified stochastic EM.
//!
//! Each outer iteration runs a random-walk Metropolis-Hastings E-step that
//! updates `M` chains of latent `U` paths per household, then an M-step that
//! refits every sieve knot by quantile regression on the imputed data, refits
//! tail rates and the logistic instrument channel, and recenters the `V`
//! kernel. The point estimate is the coefficient-wise average of the last
//! iterates.

use rand::Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::{complete_data_loglik, rate_from_exceedances, site_loglik, InitStrategy, ModelError, ModelParams, SieveLayout};
use crate::panel_io::PanelDataset;
use crate::qreg::{fit_logistic, solve_qreg, LogitProblem, QregError, QregProblem};
use crate::rng;
use crate::sieve::{dot, HermiteBasis, QuantileSieve};
use crate::stats;

#[derive(Debug, Error)]
pub enum MsemError {
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("M-step {equation} at tau={tau}: {source}")]
    Solver {
        equation: &'static str,
        tau: f64,
        #[source]
        source: QregError,
    },
    #[error("M-step logistic fit: {0}")]
    Logistic(#[source] QregError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error("non-finite {what} at outer iteration {iteration}; last parameters: {dump}")]
    NonFinite {
        what: &'static str,
        iteration: usize,
        dump: String,
    },
    #[error("panel needs at least 2 periods for estimation, got {0}")]
    TooFewPeriods(usize),
    #[error("observer: {0}")]
    Observer(String),
}

/// Controls for one estimation run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MsemConfig {
    /// Outer iterations `S`.
    pub n_outer: usize,
    /// Latent draws per household `M`.
    pub n_draws: usize,
    pub mh_steps_per_estep: usize,
    /// Random-walk proposal sd; `None` means `0.25 * sd(y)`.
    pub mh_proposal_sd: Option<f64>,
    /// Leading fraction of iterates never used in the final average.
    pub burn_in_fraction: f64,
    /// Number of trailing iterates averaged; `None` means `ceil(S / 2)`.
    pub averaging_window: Option<usize>,
    pub seed: u64,
    pub tol_qreg: f64,
    pub layout: SieveLayout,
    /// Starting point when no initial parameters are supplied.
    pub init: InitStrategy,
}

impl Default for MsemConfig {
    fn default() -> Self {
        Self {
            n_outer: 50,
            n_draws: 1,
            mh_steps_per_estep: 20,
            mh_proposal_sd: None,
            burn_in_fraction: 0.5,
            averaging_window: None,
            seed: 0,
            tol_qreg: 1e-8,
            layout: SieveLayout::default(),
            init: InitStrategy::default(),
        }
    }
}

impl MsemConfig {
    pub fn validate(&self) -> Result<(), MsemError> {
        let bad = |m: &str| Err(MsemError::Config(m.to_string()));
        if self.n_outer < 1 {
            return bad("n_outer must be >= 1");
        }
        if self.n_draws < 1 {
            return bad("n_draws must be >= 1");
        }
        if let Some(sd) = self.mh_proposal_sd {
            if !(sd.is_finite() && sd > 0.0) {
                return bad("mh_proposal_sd must be > 0");
            }
        }
        if !(0.0..1.0).contains(&self.burn_in_fraction) {
            return bad("burn_in_fraction must be in [0, 1)");
        }
        if self.averaging_window == Some(0) {
            return bad("averaging_window must be >= 1");
        }
        if !(self.tol_qreg.is_finite() && self.tol_qreg > 0.0) {
            return bad("tol_qreg must be > 0");
        }
        if self.layout.n_knots < 2 {
            return bad("layout.n_knots must be >= 2");
        }
        Ok(())
    }

    pub fn proposal_sd(&self, data: &PanelDataset) -> f64 {
        self.mh_proposal_sd.unwrap_or_else(|| {
            let s = stats::sd(&data.y);
            if s.is_finite() && s > 0.0 {
                0.25 * s
            } else {
                0.25
            }
        })
    }

    /// First iterate index (inclusive) used in the final average.
    pub fn averaging_start(&self) -> usize {
        let s = self.n_outer;
        let window = self.averaging_window.unwrap_or(s.div_ceil(2)).min(s);
        let burn = (self.burn_in_fraction * s as f64).floor() as usize;
        (s - window).max(burn).min(s - 1)
    }
}

/// Latent `U` draws, laid out as `[household][chain][period]`.
#[derive(Debug, Clone, PartialEq)]
pub struct LatentDraws {
    pub n_households: usize,
    pub n_periods: usize,
    pub n_draws: usize,
    pub u: Vec<f64>,
}

impl LatentDraws {
    /// Every chain starts at `U = y / 2`.
    pub fn from_half_y(data: &PanelDataset, n_draws: usize) -> Self {
        let t = data.n_periods;
        let mut u = Vec::with_capacity(data.n_households * n_draws * t);
        for i in 0..data.n_households {
            for _ in 0..n_draws {
                u.extend(data.y_row(i).iter().map(|v| 0.5 * v));
            }
        }
        Self {
            n_households: data.n_households,
            n_periods: t,
            n_draws,
            u,
        }
    }

    pub fn path(&self, i: usize, m: usize) -> &[f64] {
        let t = self.n_periods;
        let start = (i * self.n_draws + m) * t;
        &self.u[start..start + t]
    }
}

#[derive(Debug, Clone)]
pub struct MsemState {
    pub params: ModelParams,
    pub draws: LatentDraws,
    pub loglik_trace: Vec<f64>,
    pub surrogate_loss_trace: Vec<f64>,
    pub acceptance_trace: Vec<f64>,
    /// Parameter iterate after each outer iteration.
    pub iterates: Vec<ModelParams>,
    pub seed: u64,
    /// Number of E-steps run so far; selects the random stream of the next one.
    pub estep_counter: u64,
}

impl MsemState {
    pub fn new(params: ModelParams, data: &PanelDataset, config: &MsemConfig) -> Self {
        Self {
            params,
            draws: LatentDraws::from_half_y(data, config.n_draws),
            loglik_trace: Vec::new(),
            surrogate_loss_trace: Vec::new(),
            acceptance_trace: Vec::new(),
            iterates: Vec::new(),
            seed: config.seed,
            estep_counter: 0,
        }
    }

    /// Mean complete-data log-likelihood of the current draws under the
    /// current parameters.
    pub fn mean_loglik(&self, data: &PanelDataset) -> f64 {
        let m = self.draws.n_draws;
        let total: f64 = (0..data.n_households)
            .into_par_iter()
            .map(|i| {
                (0..m)
                    .map(|c| {
                        complete_data_loglik(
                            &self.params,
                            self.draws.path(i, c),
                            data.y_row(i),
                            data.age_row(i),
                            data.instrument_row(i),
                        )
                    })
                    .sum::<f64>()
            })
            .collect::<Vec<_>>()
            .into_iter()
            .sum();
        total / (data.n_households * m) as f64
    }
}

/// Metropolis acceptance probability for a symmetric proposal.
#[inline]
pub fn mh_accept_prob(delta_loglik: f64) -> f64 {
    if delta_loglik >= 0.0 {
        1.0
    } else {
        delta_loglik.exp()
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct EStepStats {
    pub proposed: u64,
    pub accepted: u64,
    /// Sum of `|u_new - u_old|` over accepted moves.
    pub total_move: f64,
}

impl EStepStats {
    pub fn acceptance_rate(&self) -> f64 {
        if self.proposed == 0 {
            0.0
        } else {
            self.accepted as f64 / self.proposed as f64
        }
    }
}

/// Single-site random-walk MH sweeps over every household and chain.
pub fn estep_sample(state: &mut MsemState, data: &PanelDataset, config: &MsemConfig) -> EStepStats {
    let sweeps = config.mh_steps_per_estep;
    estep_sample_sweeps(state, data, config, sweeps)
}

fn estep_sample_sweeps(state: &mut MsemState, data: &PanelDataset, config: &MsemConfig, sweeps: usize) -> EStepStats {
    let t_len = data.n_periods;
    let m = state.draws.n_draws;
    let sd = config.proposal_sd(data);
    let domain = rng::domain::ESTEP + state.estep_counter;
    let seed = state.seed;
    let params = &state.params;
    let per_household: Vec<EStepStats> = state
        .draws
        .u
        .par_chunks_mut(m * t_len)
        .enumerate()
        .map(|(i, chains)| {
            let y = data.y_row(i);
            let age = data.age_row(i);
            let omega = data.instrument_row(i);
            let mut stats = EStepStats::default();
            for (c, u) in chains.chunks_mut(t_len).enumerate() {
                let mut rng = rng::stream(seed, domain, (i * m + c) as u64);
                for _ in 0..sweeps {
                    for t in 0..t_len {
                        let step: f64 = rng.sample(StandardNormal);
                        let accept_u: f64 = rng.random();
                        let old = u[t];
                        let before = site_loglik(params, u, y, age, omega, t);
                        u[t] = old + sd * step;
                        let after = site_loglik(params, u, y, age, omega, t);
                        stats.proposed += 1;
                        if accept_u < mh_accept_prob(after - before) {
                            stats.accepted += 1;
                            stats.total_move += (u[t] - old).abs();
                        } else {
                            u[t] = old;
                        }
                    }
                }
            }
            stats
        })
        .collect();
    state.estep_counter += 1;
    per_household.into_iter().fold(EStepStats::default(), |acc, s| EStepStats {
        proposed: acc.proposed + s.proposed,
        accepted: acc.accepted + s.accepted,
        total_move: acc.total_move + s.total_move,
    })
}

/// Which of the four sieve equations a regression belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Equation {
    U,
    V,
    U1,
    V1,
}

impl Equation {
    const ALL: [Equation; 4] = [Equation::U, Equation::V, Equation::U1, Equation::V1];

    fn name(self) -> &'static str {
        match self {
            Equation::U => "sieve_U",
            Equation::V => "sieve_V",
            Equation::U1 => "sieve_U1",
            Equation::V1 => "sieve_V1",
        }
    }

    fn sieve(self, p: &ModelParams) -> &QuantileSieve {
        match self {
            Equation::U => &p.sieve_u,
            Equation::V => &p.sieve_v,
            Equation::U1 => &p.sieve_u1,
            Equation::V1 => &p.sieve_v1,
        }
    }
}

/// Pooled regression data for one equation.
struct EquationData {
    design: Vec<f64>,
    response: Vec<f64>,
    k: usize,
    basis: HermiteBasis,
}

fn build_equation(eq: Equation, template: &QuantileSieve, draws: &LatentDraws, data: &PanelDataset) -> EquationData {
    let t_len = data.n_periods;
    let basis = match eq {
        Equation::U | Equation::V => {
            let mut lags = Vec::with_capacity(data.n_households * draws.n_draws * (t_len - 1));
            for i in 0..data.n_households {
                let y = data.y_row(i);
                for m in 0..draws.n_draws {
                    let u = draws.path(i, m);
                    for t in 0..t_len - 1 {
                        lags.push(if eq == Equation::U { u[t] } else { y[t] - u[t] });
                    }
                }
            }
            let (lo, hi) = support_range(&lags);
            template.basis().clone().with_lag_range(lo, hi)
        }
        Equation::U1 | Equation::V1 => template.basis().clone(),
    };
    let basis = &basis;
    let k = basis.dim();
    let mut design = Vec::new();
    let mut response = Vec::new();
    let mut phi = vec![0.0; k];
    for i in 0..data.n_households {
        let y = data.y_row(i);
        let age = data.age_row(i);
        for m in 0..draws.n_draws {
            let u = draws.path(i, m);
            let state = |t: usize| match eq {
                Equation::U | Equation::U1 => u[t],
                Equation::V | Equation::V1 => y[t] - u[t],
            };
            match eq {
                Equation::U | Equation::V => {
                    for t in 1..t_len {
                        basis.eval_into(state(t - 1), age[t], &mut phi);
                        design.extend_from_slice(&phi);
                        response.push(state(t));
                    }
                }
                Equation::U1 | Equation::V1 => {
                    basis.eval_into(0.0, age[0], &mut phi);
                    design.extend_from_slice(&phi);
                    response.push(state(0));
                }
            }
        }
    }
    EquationData {
        design,
        response,
        k,
        basis: basis.clone(),
    }
}

/// Tail share of lag states left outside the range a transition sieve is
/// evaluated on; beyond it the sieve is flat in the lag.
pub const LAG_RANGE_TAIL: f64 = 0.005;

/// Central `1 - 2 LAG_RANGE_TAIL` range of a sample. Uses order statistics
/// (inverse empirical CDF) so that replicating every draw leaves it unchanged.
pub fn support_range(xs: &[f64]) -> (f64, f64) {
    let sorted = stats::sorted_copy(xs);
    let n = sorted.len();
    let pick = |p: f64| sorted[((p * n as f64).ceil() as usize).clamp(1, n) - 1];
    (pick(LAG_RANGE_TAIL), pick(1.0 - LAG_RANGE_TAIL))
}

/// Result of one M-step.
#[derive(Debug, Clone)]
pub struct MStepOutput {
    pub params: ModelParams,
    /// Sum over equations and knots of the mean check loss at the new fit.
    pub surrogate_loss: f64,
}

/// Refit every sieve knot, tail rates, the instrument channel, and recenter
/// the `V` kernel. Bases and grid are taken from `template`.
pub fn mstep_update(
    draws: &LatentDraws,
    data: &PanelDataset,
    config: &MsemConfig,
    template: &ModelParams,
) -> Result<MStepOutput, MsemError> {
    if data.n_periods < 2 {
        return Err(MsemError::TooFewPeriods(data.n_periods));
    }
    let grid = template.grid().clone();
    let eq_data: Vec<EquationData> = Equation::ALL
        .par_iter()
        .map(|&eq| build_equation(eq, eq.sieve(template), draws, data))
        .collect();

    let jobs: Vec<(usize, usize)> = (0..4).flat_map(|e| (0..grid.len()).map(move |l| (e, l))).collect();
    let solved: Vec<Result<(Vec<f64>, f64), MsemError>> = jobs
        .par_iter()
        .map(|&(e, l)| {
            let ed = &eq_data[e];
            let tau = grid.knots()[l];
            let problem = QregProblem::new(ed.design.clone(), ed.k, ed.response.clone(), tau);
            let theta = solve_qreg(&problem, config.tol_qreg).map_err(|source| MsemError::Solver {
                equation: Equation::ALL[e].name(),
                tau,
                source,
            })?;
            let loss = problem.objective(&theta) / ed.response.len() as f64;
            Ok((theta, loss))
        })
        .collect();

    let mut coeffs: Vec<Vec<f64>> = vec![Vec::new(); 4];
    let mut surrogate = 0.0;
    for (&(e, _), res) in jobs.iter().zip(solved) {
        let (theta, loss) = res?;
        coeffs[e].extend(theta);
        surrogate += loss;
    }

    let mut sieves: Vec<QuantileSieve> = Vec::with_capacity(4);
    for (e, eq) in Equation::ALL.iter().enumerate() {
        let old = eq.sieve(template);
        let mut sieve = QuantileSieve::new(
            eq_data[e].basis.clone(),
            grid.clone(),
            std::mem::take(&mut coeffs[e]),
            old.tail_lambdas().0,
            old.tail_lambdas().1,
        )
        .map_err(ModelError::from)?;
        let (lo, hi) = refit_tails(&sieve, &eq_data[e].design, &eq_data[e].response);
        sieve.set_tail_lambdas(lo, hi).map_err(ModelError::from)?;
        sieves.push(sieve);
    }
    let mut sieves = sieves.into_iter();
    let (sieve_u, mut sieve_v, sieve_u1, sieve_v1) = (
        sieves.next().unwrap(),
        sieves.next().unwrap(),
        sieves.next().unwrap(),
        sieves.next().unwrap(),
    );
    recenter(&mut sieve_v);

    let covariate = draws.u.clone();
    let mut outcome = Vec::with_capacity(covariate.len());
    for i in 0..data.n_households {
        for _ in 0..draws.n_draws {
            outcome.extend_from_slice(data.instrument_row(i));
        }
    }
    let logit = fit_logistic(&LogitProblem { covariate, outcome }, 1e-10).map_err(MsemError::Logistic)?;

    Ok(MStepOutput {
        params: ModelParams {
            sieve_u,
            sieve_v,
            sieve_u1,
            sieve_v1,
            beta0: logit.beta0,
            beta1: logit.beta1,
        },
        surrogate_loss: surrogate,
    })
}

/// Mean-exceedance rates beyond the fitted extreme knots.
pub(crate) fn refit_tails(sieve: &QuantileSieve, design: &[f64], response: &[f64]) -> (f64, f64) {
    let k = sieve.basis().dim();
    let mut below = Vec::new();
    let mut above = Vec::new();
    for (row, &y) in design.chunks_exact(k).zip(response) {
        let mut q = sieve.raw_knot_values_from_basis(row);
        q.sort_by(f64::total_cmp);
        let (lo, hi) = (q[0], q[q.len() - 1]);
        if y < lo {
            below.push(lo - y);
        } else if y > hi {
            above.push(y - hi);
        }
    }
    let (old_lo, old_hi) = sieve.tail_lambdas();
    (rate_from_exceedances(&below, old_lo), rate_from_exceedances(&above, old_hi))
}

/// Point at which the `V` kernel's normalization is imposed: the means of
/// its lag and age standardizers.
pub fn mean_conditioning_point(sieve: &QuantileSieve) -> (f64, f64) {
    (sieve.basis().lag.mean, sieve.basis().age.mean)
}

/// Grid-average of the knot values at the mean conditioning point.
pub fn knot_average_at_mean(sieve: &QuantileSieve) -> f64 {
    let (lag, age) = mean_conditioning_point(sieve);
    let phi = sieve.basis().eval(lag, age);
    let k = sieve.basis().dim();
    let sum: f64 = sieve.coeffs().chunks_exact(k).map(|row| dot(row, &phi)).sum();
    sum / sieve.grid().len() as f64
}

fn recenter(sieve: &mut QuantileSieve) {
    let c = knot_average_at_mean(sieve);
    sieve.shift(-c);
}

/// Checkpoint contents: everything in [`MsemState`] except the latent draws.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub iteration: usize,
    pub seed: u64,
    pub estep_counter: u64,
    pub params: ModelParams,
    pub loglik_trace: Vec<f64>,
    pub surrogate_loss_trace: Vec<f64>,
    pub acceptance_trace: Vec<f64>,
    pub iterates: Vec<ModelParams>,
}

impl Checkpoint {
    pub fn from_state(state: &MsemState) -> Self {
        Self {
            iteration: state.iterates.len(),
            seed: state.seed,
            estep_counter: state.estep_counter,
            params: state.params.clone(),
            loglik_trace: state.loglik_trace.clone(),
            surrogate_loss_trace: state.surrogate_loss_trace.clone(),
            acceptance_trace: state.acceptance_trace.clone(),
            iterates: state.iterates.clone(),
        }
    }
}

/// Sweep multiplier for the first E-step after resuming from a checkpoint,
/// whose chains restart at `U = y / 2`.
pub const RESUME_REBURN_FACTOR: usize = 5;

pub fn run_msem(
    data: &PanelDataset,
    config: &MsemConfig,
    init: Option<ModelParams>,
) -> Result<(ModelParams, MsemState), MsemError> {
    run_msem_with(data, config, init, None, |_| Ok(()))
}

/// Full estimation loop. `observer` is called after every outer iteration
/// (e.g. to write checkpoints); `resume` continues a previous run.
pub fn run_msem_with<F>(
    data: &PanelDataset,
    config: &MsemConfig,
    init: Option<ModelParams>,
    resume: Option<Checkpoint>,
    mut observer: F,
) -> Result<(ModelParams, MsemState), MsemError>
where
    F: FnMut(&MsemState) -> Result<(), MsemError>,
{
    config.validate()?;
    if data.n_periods < 2 {
        return Err(MsemError::TooFewPeriods(data.n_periods));
    }
    let resumed = resume.is_some();
    let mut state = match resume {
        Some(cp) => {
            cp.params.validate()?;
            let mut st = MsemState::new(cp.params, data, config);
            st.seed = cp.seed;
            st.estep_counter = cp.estep_counter;
            st.loglik_trace = cp.loglik_trace;
            st.surrogate_loss_trace = cp.surrogate_loss_trace;
            st.acceptance_trace = cp.acceptance_trace;
            st.iterates = cp.iterates;
            st
        }
        None => {
            let params = match init {
                Some(p) => p,
                None => ModelParams::starting_point(data, &config.layout, config.init)?,
            };
            params.validate()?;
            MsemState::new(params, data, config)
        }
    };

    let start = state.iterates.len();
    for s in start..config.n_outer {
        let sweeps = if resumed && s == start {
            config.mh_steps_per_estep * RESUME_REBURN_FACTOR
        } else {
            config.mh_steps_per_estep
        };
        let stats = estep_sample_sweeps(&mut state, data, config, sweeps);
        let loglik = state.mean_loglik(data);
        let out = mstep_update(&state.draws, data, config, &state.params)?;
        let dump = || serde_json::to_string(&state.params).unwrap_or_default();
        if !loglik.is_finite() {
            return Err(MsemError::NonFinite { what: "log-likelihood", iteration: s, dump: dump() });
        }
        if !out.surrogate_loss.is_finite() || out.params.validate().is_err() {
            return Err(MsemError::NonFinite { what: "M-step output", iteration: s, dump: dump() });
        }
        state.params = out.params;
        state.loglik_trace.push(loglik);
        state.surrogate_loss_trace.push(out.surrogate_loss);
        state.acceptance_trace.push(stats.acceptance_rate());
        state.iterates.push(state.params.clone());
        observer(&state)?;
    }

    let from = config.averaging_start().min(state.iterates.len().saturating_sub(1));
    let averaged = ModelParams::average(&state.iterates[from..])?;
    Ok((averaged, state))
}

/// OLS slope of a series against its index, with its classical standard error.
pub fn trend_slope(series: &[f64]) -> (f64, f64) {
    let n = series.len() as f64;
    let xs: Vec<f64> = (0..series.len()).map(|i| i as f64).collect();
    let mx = stats::mean(&xs);
    let my = stats::mean(series);
    let sxx: f64 = xs.iter().map(|x| (x - mx).powi(2)).sum();
    let slope = xs.iter().zip(series).map(|(x, y)| (x - mx) * (y - my)).sum::<f64>() / sxx;
    let sse: f64 = xs
        .iter()
        .zip(series)
        .map(|(x, y)| (y - my - slope * (x - mx)).powi(2))
        .sum();
    let se = (sse / (n - 2.0).max(1.0) / sxx).sqrt();
    (slope, se)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn acceptance_probability_hand_cases() {
        assert_eq!(mh_accept_prob(0.0), 1.0);
        assert_eq!(mh_accept_prob(2.5), 1.0);
        assert!((mh_accept_prob(-1.0) - (-1.0f64).exp()).abs() < 1e-15);
        assert!((mh_accept_prob(-0.5f64.ln().abs()) - 0.5).abs() < 1e-15);
    }

    #[test]
    fn averaging_start_defaults() {
        let mut c = MsemConfig { n_outer: 50, ..Default::default() };
        assert_eq!(c.averaging_start(), 25);
        c.n_outer = 1;
        assert_eq!(c.averaging_start(), 0);
        c.n_outer = 7;
        c.burn_in_fraction = 0.0;
        assert_eq!(c.averaging_start(), 3);
        c.averaging_window = Some(100);
        assert_eq!(c.averaging_start(), 0);
    }

    #[test]
    fn config_validation() {
        assert!(MsemConfig::default().validate().is_ok());
        for c in [
            MsemConfig { n_outer: 0, ..Default::default() },
            MsemConfig { n_draws: 0, ..Default::default() },
            MsemConfig { mh_proposal_sd: Some(0.0), ..Default::default() },
            MsemConfig { burn_in_fraction: 1.0, ..Default::default() },
        ] {
            assert!(c.validate().is_err());
        }
    }

    #[test]
    fn trend_of_line() {
        let (s, se) = trend_slope(&[1.0, 3.0, 5.0, 7.0]);
        assert!((s - 2.0).abs() < 1e-12 && se < 1e-12);
    }
}
