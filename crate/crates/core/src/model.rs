//! Model parameters: the four Markov-kernel sieves plus the logistic
//! instrument channel, and the complete-data log-likelihood they imply.
//!
//! The model decomposes residual log-earnings as `y_t = U_t + V_t` with
//! first-order Markov kernels for `U` and `V`, initial-condition laws for
//! `U_1` and `V_1`, and a binary instrument with
//! `P(ω_t = 1 | U_t) = 1 / (1 + exp(-β0 - β1 U_t))`.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::panel_io::PanelDataset;
use crate::qreg::softplus;
use crate::sieve::{HermiteBasis, QuantileSieve, SieveError, Standardizer, TauGrid, MIN_BIN_WIDTH};
use crate::simulator::{distribution_knots, TransitoryDist};
use crate::stats;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ModelError {
    #[error(transparent)]
    Sieve(#[from] SieveError),
    #[error("sieves do not share one tau grid")]
    GridMismatch,
    #[error("cannot average an empty list of iterates")]
    NoIterates,
    #[error("iterates have different sieve layouts")]
    LayoutMismatch,
    #[error("non-finite parameter in {0}")]
    NonFinite(&'static str),
}

/// Which latent component a quantity refers to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Component {
    U,
    V,
}

impl Component {
    pub fn name(self) -> &'static str {
        match self {
            Self::U => "U",
            Self::V => "V",
        }
    }
}

/// How the estimator's first parameter vector is chosen.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InitStrategy {
    /// Linear-Gaussian AR(1)-plus-noise fit to the autocovariances.
    #[default]
    LinearMoments,
    /// Unconditional quantiles of `y / 2` and `y - median(y)`.
    Unconditional,
}

/// Autocovariance fit of `y_t = U_t + V_t` with `U_t = ρ U_{t-1} + η_t` and
/// white-noise `V_t`: `ρ` is the pooled ratio of second- to first-order
/// autocovariances, `Var U_t = Cov(y_{t+1}, y_t) / ρ`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LinearMoments {
    pub rho: f64,
    pub mean: f64,
    pub mean_first: f64,
    pub var_u: f64,
    pub var_u1: f64,
    pub innovation_var: f64,
    pub var_v: f64,
    pub var_v1: f64,
}

impl LinearMoments {
    pub fn estimate(data: &PanelDataset) -> Option<Self> {
        let (n, t_len) = (data.n_households, data.n_periods);
        if n < 2 || t_len < 3 {
            return None;
        }
        let col = |t: usize| -> Vec<f64> { (0..n).map(|i| data.y[i * t_len + t]).collect() };
        let cols: Vec<Vec<f64>> = (0..t_len).map(col).collect();
        let cov = |a: &[f64], b: &[f64]| {
            let (ma, mb) = (stats::mean(a), stats::mean(b));
            a.iter().zip(b).map(|(x, y)| (x - ma) * (y - mb)).sum::<f64>() / (n as f64 - 1.0)
        };
        let var_y: Vec<f64> = cols.iter().map(|c| cov(c, c)).collect();
        let g1: Vec<f64> = (1..t_len).map(|t| cov(&cols[t], &cols[t - 1])).collect();
        let (mut num, mut den) = (0.0, 0.0);
        for t in 1..t_len - 1 {
            num += cov(&cols[t + 1], &cols[t - 1]);
            den += g1[t - 1];
        }
        let floor = 1e-3 * positive_or_one(stats::mean(&var_y));
        let rho = if den > 0.0 { (num / den).clamp(0.0, 1.0) } else { 0.0 };
        // Var U at periods 0..T-2 from the first-order autocovariances.
        let var_u_t: Vec<f64> = if rho > 0.05 {
            g1.iter().map(|g| (g / rho).max(floor)).collect()
        } else {
            var_y[..t_len - 1].iter().map(|v| (0.5 * v).max(floor)).collect()
        };
        let var_u = stats::mean(&var_u_t);
        let innov: Vec<f64> = (1..var_u_t.len()).map(|t| var_u_t[t] - rho * rho * var_u_t[t - 1]).collect();
        let innovation_var = if innov.is_empty() { var_u } else { stats::mean(&innov) }.max(floor);
        let var_v = (stats::mean(&var_y[..t_len - 1]) - var_u).max(floor);
        let var_v1 = (var_y[0] - var_u_t[0]).max(floor);
        Some(Self {
            rho,
            mean: stats::mean(&data.y),
            mean_first: stats::mean(&cols[0]),
            var_u,
            var_u1: var_u_t[0],
            innovation_var,
            var_v,
            var_v1,
        })
    }
}

/// Sizes of the sieve representation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SieveLayout {
    pub n_knots: usize,
    /// Hermite degree in the lagged state for both transition kernels.
    pub degree_lag: usize,
    /// Hermite degree in age for both transition kernels.
    pub degree_age: usize,
    /// Hermite degree in age for the initial-condition laws.
    pub degree_init_age: usize,
}

impl Default for SieveLayout {
    fn default() -> Self {
        Self {
            n_knots: 11,
            degree_lag: 3,
            degree_age: 2,
            degree_init_age: 2,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelParams {
    /// `U_t | U_{t-1}, age_t`.
    #[serde(rename = "sieve_U")]
    pub sieve_u: QuantileSieve,
    /// `V_t | V_{t-1}, age_t`.
    #[serde(rename = "sieve_V")]
    pub sieve_v: QuantileSieve,
    /// `U_1 | age_1`.
    #[serde(rename = "sieve_U1")]
    pub sieve_u1: QuantileSieve,
    /// `V_1 | age_1`.
    #[serde(rename = "sieve_V1")]
    pub sieve_v1: QuantileSieve,
    pub beta0: f64,
    pub beta1: f64,
}

impl ModelParams {
    pub fn validate(&self) -> Result<(), ModelError> {
        let g = self.sieve_u.grid();
        if self.sieve_v.grid() != g || self.sieve_u1.grid() != g || self.sieve_v1.grid() != g {
            return Err(ModelError::GridMismatch);
        }
        for (name, s) in self.sieves() {
            if s.coeffs().iter().any(|c| !c.is_finite()) {
                return Err(ModelError::NonFinite(name));
            }
        }
        if !(self.beta0.is_finite() && self.beta1.is_finite()) {
            return Err(ModelError::NonFinite("instrument coefficients"));
        }
        Ok(())
    }

    pub fn sieves(&self) -> [(&'static str, &QuantileSieve); 4] {
        [
            ("sieve_U", &self.sieve_u),
            ("sieve_V", &self.sieve_v),
            ("sieve_U1", &self.sieve_u1),
            ("sieve_V1", &self.sieve_v1),
        ]
    }

    pub fn grid(&self) -> &TauGrid {
        self.sieve_u.grid()
    }

    pub fn transition(&self, c: Component) -> &QuantileSieve {
        match c {
            Component::U => &self.sieve_u,
            Component::V => &self.sieve_v,
        }
    }

    pub fn initial(&self, c: Component) -> &QuantileSieve {
        match c {
            Component::U => &self.sieve_u1,
            Component::V => &self.sieve_v1,
        }
    }

    /// `log P(ω | u)` under the logistic channel.
    #[inline]
    pub fn instrument_logprob(&self, u: f64, omega: u8) -> f64 {
        let eta = self.beta0 + self.beta1 * u;
        if omega == 1 {
            -softplus(-eta)
        } else {
            -softplus(eta)
        }
    }

    /// Default starting point: every sieve is unconditional, with knots at the
    /// empirical quantiles of `y / 2` (U equations) or `y - median(y)`
    /// (V equations); `β0 = 0`, `β1 = 1`.
    pub fn initial_guess(data: &PanelDataset, layout: &SieveLayout) -> Result<Self, ModelError> {
        let grid = TauGrid::equispaced(layout.n_knots)?;
        let half: Vec<f64> = data.y.iter().map(|v| 0.5 * v).collect();
        let sorted_y = stats::sorted_copy(&data.y);
        let median = stats::quantile_sorted(&sorted_y, 0.5);
        let centered: Vec<f64> = data.y.iter().map(|v| v - median).collect();
        let sd_y = positive_or_one(stats::sd(&data.y));
        let age = Standardizer::new(data.age_mean, data.age_sd)?;
        let lag_u = Standardizer::new(stats::mean(&half), 0.5 * sd_y)?;
        let lag_v = Standardizer::new(0.0, 0.5 * sd_y)?;
        let unconditional = |sample: &[f64], basis: HermiteBasis| -> Result<QuantileSieve, ModelError> {
            let sorted = stats::sorted_copy(sample);
            let knots: Vec<f64> = grid.knots().iter().map(|&t| stats::quantile_sorted(&sorted, t)).collect();
            let (lo, hi) = exceedance_lambdas(&sorted, knots[0], knots[knots.len() - 1]);
            Ok(QuantileSieve::unconditional(basis, grid.clone(), &knots, lo, hi)?)
        };
        let trans = |lag| HermiteBasis::new(layout.degree_lag, layout.degree_age, lag, age);
        let init = |lag| HermiteBasis::new(0, layout.degree_init_age, lag, age);
        Ok(Self {
            sieve_u: unconditional(&half, trans(lag_u))?,
            sieve_v: unconditional(&centered, trans(lag_v))?,
            sieve_u1: unconditional(&half, init(lag_u))?,
            sieve_v1: unconditional(&centered, init(lag_v))?,
            beta0: 0.0,
            beta1: 1.0,
        })
    }

    /// Starting point from a linear-Gaussian fit: `U` is an AR(1) around the
    /// sample mean and `V` is i.i.d. noise, with persistence and variances
    /// matched to the panel's autocovariances (see [`LinearMoments`]). Falls
    /// back to [`ModelParams::initial_guess`] when fewer than 3 periods or 2
    /// households are available.
    pub fn linear_start(data: &PanelDataset, layout: &SieveLayout) -> Result<Self, ModelError> {
        let Some(lm) = LinearMoments::estimate(data) else {
            return Self::initial_guess(data, layout);
        };
        let grid = TauGrid::equispaced(layout.n_knots)?;
        let age = Standardizer::new(data.age_mean, data.age_sd)?;
        // The lag standardizer is centred at the sample mean, so the AR(1)
        // intercept `(1 - ρ) mean` plus `ρ mean` leaves `mean` as the constant.
        let sd_u = lm.var_u.sqrt();
        let lag_u = Standardizer::new(lm.mean, sd_u)?;
        let lag_v = Standardizer::new(0.0, lm.var_v.sqrt())?;
        let z: Vec<f64> = grid.knots().iter().map(|&t| stats::normal_quantile(t)).collect();
        let gaussian = |basis: HermiteBasis, centre: f64, sd: f64, slope: f64| -> Result<QuantileSieve, ModelError> {
            let k = basis.dim();
            let mut coeffs = vec![0.0; grid.len() * k];
            for (l, zl) in z.iter().enumerate() {
                coeffs[l * k] = centre + sd * zl;
                if basis.degree_lag >= 1 {
                    coeffs[l * k + 1] = slope;
                }
            }
            let (_, lam, _) = distribution_knots(TransitoryDist::Gaussian, sd, &grid);
            Ok(QuantileSieve::new(basis, grid.clone(), coeffs, lam, lam)?)
        };
        let trans = |lag| HermiteBasis::new(layout.degree_lag, layout.degree_age, lag, age);
        let init = |lag| HermiteBasis::new(0, layout.degree_init_age, lag, age);
        Ok(Self {
            sieve_u: gaussian(trans(lag_u), lm.mean, lm.innovation_var.sqrt(), lm.rho * sd_u)?,
            sieve_v: gaussian(trans(lag_v), 0.0, lm.var_v.sqrt(), 0.0)?,
            sieve_u1: gaussian(init(lag_u), lm.mean_first, lm.var_u1.sqrt(), 0.0)?,
            sieve_v1: gaussian(init(lag_v), 0.0, lm.var_v1.sqrt(), 0.0)?,
            beta0: 0.0,
            beta1: 1.0,
        })
    }

    pub fn starting_point(data: &PanelDataset, layout: &SieveLayout, strategy: InitStrategy) -> Result<Self, ModelError> {
        match strategy {
            InitStrategy::LinearMoments => Self::linear_start(data, layout),
            InitStrategy::Unconditional => Self::initial_guess(data, layout),
        }
    }

    /// Coefficient-wise average of several iterates with identical layout.
    pub fn average(iterates: &[ModelParams]) -> Result<Self, ModelError> {
        let first = iterates.first().ok_or(ModelError::NoIterates)?;
        let n = iterates.len() as f64;
        let avg_sieve = |pick: fn(&ModelParams) -> &QuantileSieve| -> Result<QuantileSieve, ModelError> {
            let base = pick(first);
            let mut coeffs = vec![0.0; base.coeffs().len()];
            let (mut lo, mut hi) = (0.0, 0.0);
            let mut range: Option<(f64, f64)> = None;
            for it in iterates {
                let s = pick(it);
                if !s.basis().same_layout(base.basis()) || s.grid() != base.grid() {
                    return Err(ModelError::LayoutMismatch);
                }
                for (c, v) in coeffs.iter_mut().zip(s.coeffs()) {
                    *c += v;
                }
                if let Some((a, b)) = s.basis().lag_range {
                    range = Some(range.map_or((a, b), |(x, y)| (x.min(a), y.max(b))));
                }
                let (l, h) = s.tail_lambdas();
                lo += l;
                hi += h;
            }
            coeffs.iter_mut().for_each(|c| *c /= n);
            let mut basis = base.basis().clone();
            basis.lag_range = range;
            Ok(QuantileSieve::new(basis, base.grid().clone(), coeffs, lo / n, hi / n)?)
        };
        Ok(Self {
            sieve_u: avg_sieve(|p| &p.sieve_u)?,
            sieve_v: avg_sieve(|p| &p.sieve_v)?,
            sieve_u1: avg_sieve(|p| &p.sieve_u1)?,
            sieve_v1: avg_sieve(|p| &p.sieve_v1)?,
            beta0: iterates.iter().map(|p| p.beta0).sum::<f64>() / n,
            beta1: iterates.iter().map(|p| p.beta1).sum::<f64>() / n,
        })
    }
}

fn positive_or_one(x: f64) -> f64 {
    if x.is_finite() && x > 0.0 {
        x
    } else {
        1.0
    }
}

/// Exponential tail rates from mean exceedances beyond the extreme knots
/// (sorted sample). Falls back to `1 / sd` when a side has no exceedances.
pub(crate) fn exceedance_lambdas(sorted: &[f64], q_low: f64, q_high: f64) -> (f64, f64) {
    let fallback = 1.0 / positive_or_one(stats::sd(sorted));
    let below: Vec<f64> = sorted.iter().filter(|&&v| v < q_low).map(|v| q_low - v).collect();
    let above: Vec<f64> = sorted.iter().filter(|&&v| v > q_high).map(|v| v - q_high).collect();
    (rate_from_exceedances(&below, fallback), rate_from_exceedances(&above, fallback))
}

pub(crate) fn rate_from_exceedances(exceedances: &[f64], fallback: f64) -> f64 {
    if exceedances.is_empty() {
        return fallback;
    }
    let m = stats::mean(exceedances);
    if m > 1e-12 && m.is_finite() {
        (1.0 / m).min(1e8)
    } else {
        fallback
    }
}

/// Log of the implied density given rearranged knots, computed without
/// underflow in the tails and capped on degenerate bins.
pub fn log_density_from_knots(sieve: &QuantileSieve, q: &[f64], value: f64) -> f64 {
    let taus = sieve.grid().knots();
    let last = q.len() - 1;
    let (lam_lo, lam_hi) = sieve.tail_lambdas();
    if value < q[0] {
        (lam_lo * taus[0]).ln() + lam_lo * (value - q[0])
    } else if value >= q[last] {
        (lam_hi * (1.0 - taus[last])).ln() - lam_hi * (value - q[last])
    } else {
        let j = q.partition_point(|&x| x <= value) - 1;
        let width = (q[j + 1] - q[j]).max(MIN_BIN_WIDTH);
        ((taus[j + 1] - taus[j]) / width).ln()
    }
}

pub fn log_density(sieve: &QuantileSieve, value: f64, lag_state: f64, age: f64) -> f64 {
    log_density_from_knots(sieve, &sieve.knot_values(lag_state, age), value)
}

/// Log-likelihood of one household's complete data `(u, y, age, ω)`.
pub fn complete_data_loglik(params: &ModelParams, u_path: &[f64], y_path: &[f64], age_path: &[f64], omega_path: &[u8]) -> f64 {
    let t_len = u_path.len();
    debug_assert!(y_path.len() == t_len && age_path.len() == t_len && omega_path.len() == t_len);
    let mut total = 0.0;
    for t in 0..t_len {
        let v = y_path[t] - u_path[t];
        if t == 0 {
            total += log_density(&params.sieve_u1, u_path[0], 0.0, age_path[0]);
            total += log_density(&params.sieve_v1, v, 0.0, age_path[0]);
        } else {
            let v_prev = y_path[t - 1] - u_path[t - 1];
            total += log_density(&params.sieve_u, u_path[t], u_path[t - 1], age_path[t]);
            total += log_density(&params.sieve_v, v, v_prev, age_path[t]);
        }
        total += params.instrument_logprob(u_path[t], omega_path[t]);
    }
    total
}

/// Terms of the complete-data log-likelihood that involve `u_path[t]`.
pub fn site_loglik(params: &ModelParams, u_path: &[f64], y_path: &[f64], age_path: &[f64], omega_path: &[u8], t: usize) -> f64 {
    let v = |s: usize| y_path[s] - u_path[s];
    let mut total = params.instrument_logprob(u_path[t], omega_path[t]);
    if t == 0 {
        total += log_density(&params.sieve_u1, u_path[0], 0.0, age_path[0]);
        total += log_density(&params.sieve_v1, v(0), 0.0, age_path[0]);
    } else {
        total += log_density(&params.sieve_u, u_path[t], u_path[t - 1], age_path[t]);
        total += log_density(&params.sieve_v, v(t), v(t - 1), age_path[t]);
    }
    if t + 1 < u_path.len() {
        total += log_density(&params.sieve_u, u_path[t + 1], u_path[t], age_path[t + 1]);
        total += log_density(&params.sieve_v, v(t + 1), v(t), age_path[t + 1]);
    }
    total
}
