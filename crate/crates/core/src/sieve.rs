//! Conditional quantile functions represented as Hermite-basis sieves.
//!
//! A [`QuantileSieve`] stores, for each knot `τ_ℓ` of an equi-spaced grid, a
//! coefficient vector over a tensor-product Hermite basis in the lagged state
//! and age. Between knots the quantile function is linear in `τ`; below the
//! first and above the last knot it has exponential tails, so the implied
//! distribution is proper and has a closed-form density and CDF.

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Bins narrower than this are treated as degenerate when computing densities.
pub const MIN_BIN_WIDTH: f64 = 1e-10;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SieveError {
    #[error("quantile level {0} outside (0, 1)")]
    TauOutOfRange(f64),
    #[error("tau grid must have at least two knots")]
    GridTooSmall,
    #[error("coefficient matrix has {got} entries, expected {rows} x {cols}")]
    CoeffShape { got: usize, rows: usize, cols: usize },
    #[error("tail parameters must be finite and positive (low {low}, high {high})")]
    BadTail { low: f64, high: f64 },
    #[error("standardizer scale must be finite and positive, got {0}")]
    BadScale(f64),
}

/// Equi-spaced quantile knots `τ_ℓ = ℓ / (L + 1)`, `ℓ = 1..=L`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TauGrid {
    knots: Vec<f64>,
}

impl TauGrid {
    pub fn equispaced(n_knots: usize) -> Result<Self, SieveError> {
        if n_knots < 2 {
            return Err(SieveError::GridTooSmall);
        }
        let denom = (n_knots + 1) as f64;
        Ok(Self {
            knots: (1..=n_knots).map(|l| l as f64 / denom).collect(),
        })
    }

    pub fn knots(&self) -> &[f64] {
        &self.knots
    }

    pub fn len(&self) -> usize {
        self.knots.len()
    }

    pub fn is_empty(&self) -> bool {
        self.knots.is_empty()
    }

    pub fn first(&self) -> f64 {
        self.knots[0]
    }

    pub fn last(&self) -> f64 {
        self.knots[self.knots.len() - 1]
    }

    /// Index of the knot equal to `tau` (to 1e-12), if any.
    pub fn knot_index(&self, tau: f64) -> Option<usize> {
        self.knots.iter().position(|&k| (k - tau).abs() < 1e-12)
    }
}

impl Default for TauGrid {
    fn default() -> Self {
        Self::equispaced(11).expect("11 knots")
    }
}

/// Affine map `x -> (x - mean) / sd` applied before evaluating Hermite polynomials.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Standardizer {
    pub mean: f64,
    pub sd: f64,
}

impl Standardizer {
    pub fn new(mean: f64, sd: f64) -> Result<Self, SieveError> {
        if !(sd.is_finite() && sd > 0.0) {
            return Err(SieveError::BadScale(sd));
        }
        Ok(Self { mean, sd })
    }

    pub fn identity() -> Self {
        Self { mean: 0.0, sd: 1.0 }
    }

    #[inline]
    pub fn apply(&self, x: f64) -> f64 {
        (x - self.mean) / self.sd
    }
}

/// Probabilists' Hermite polynomials `He_0..=He_degree` at `x`, written into `out`.
pub fn hermite_values(x: f64, degree: usize, out: &mut [f64]) {
    out[0] = 1.0;
    if degree >= 1 {
        out[1] = x;
    }
    for n in 2..=degree {
        out[n] = x * out[n - 1] - (n - 1) as f64 * out[n - 2];
    }
}

/// Tensor-product Hermite basis in (lagged state, age).
///
/// Entry `b * (degree_lag + 1) + a` is `He_a(std(lag)) * He_b(std(age))`, so the
/// lag index runs fastest. Initial-condition sieves use `degree_lag = 0`, which
/// makes the lag argument irrelevant.
///
/// With a `lag_range`, lag states are clamped into it before evaluation, so
/// the sieve is flat in the lag outside the support it was fitted on instead
/// of following the polynomial off to infinity.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HermiteBasis {
    pub degree_lag: usize,
    pub degree_age: usize,
    pub lag: Standardizer,
    pub age: Standardizer,
    #[serde(default)]
    pub lag_range: Option<(f64, f64)>,
}

impl HermiteBasis {
    pub fn new(degree_lag: usize, degree_age: usize, lag: Standardizer, age: Standardizer) -> Self {
        Self {
            degree_lag,
            degree_age,
            lag,
            age,
            lag_range: None,
        }
    }

    pub fn with_lag_range(mut self, lo: f64, hi: f64) -> Self {
        self.lag_range = (lo.is_finite() && hi.is_finite() && lo <= hi).then_some((lo, hi));
        self
    }

    /// Same degrees and standardizers; the lag ranges may differ.
    pub fn same_layout(&self, other: &Self) -> bool {
        self.degree_lag == other.degree_lag && self.degree_age == other.degree_age && self.lag == other.lag && self.age == other.age
    }

    #[inline]
    fn clamp_lag(&self, x: f64) -> f64 {
        match self.lag_range {
            Some((lo, hi)) => x.clamp(lo, hi),
            None => x,
        }
    }

    /// Number of basis functions.
    pub fn dim(&self) -> usize {
        (self.degree_lag + 1) * (self.degree_age + 1)
    }

    pub fn eval(&self, lag_state: f64, age: f64) -> Vec<f64> {
        let mut out = vec![0.0; self.dim()];
        self.eval_into(lag_state, age, &mut out);
        out
    }

    pub fn eval_into(&self, lag_state: f64, age: f64, out: &mut [f64]) {
        let mut hl = [0.0; 16];
        let mut ha = [0.0; 16];
        let (hl, ha) = if self.degree_lag < 16 && self.degree_age < 16 {
            (&mut hl[..=self.degree_lag], &mut ha[..=self.degree_age])
        } else {
            // Unusually large degrees: fall back to heap buffers.
            return self.eval_into_heap(lag_state, age, out);
        };
        hermite_values(self.lag.apply(self.clamp_lag(lag_state)), self.degree_lag, hl);
        hermite_values(self.age.apply(age), self.degree_age, ha);
        let na = self.degree_lag + 1;
        for (b, &hb) in ha.iter().enumerate() {
            for (a, &h) in hl.iter().enumerate() {
                out[b * na + a] = h * hb;
            }
        }
    }

    fn eval_into_heap(&self, lag_state: f64, age: f64, out: &mut [f64]) {
        let mut hl = vec![0.0; self.degree_lag + 1];
        let mut ha = vec![0.0; self.degree_age + 1];
        hermite_values(self.lag.apply(self.clamp_lag(lag_state)), self.degree_lag, &mut hl);
        hermite_values(self.age.apply(age), self.degree_age, &mut ha);
        let na = self.degree_lag + 1;
        for (b, &hb) in ha.iter().enumerate() {
            for (a, &h) in hl.iter().enumerate() {
                out[b * na + a] = h * hb;
            }
        }
    }

    /// Derivative of every basis function with respect to the (unstandardized)
    /// lag state, using `He_n' = n He_{n-1}`. Zero outside the lag range.
    pub fn eval_lag_derivative(&self, lag_state: f64, age: f64) -> Vec<f64> {
        if self.clamp_lag(lag_state) != lag_state {
            return vec![0.0; self.dim()];
        }
        let mut hl = vec![0.0; self.degree_lag + 1];
        let mut ha = vec![0.0; self.degree_age + 1];
        hermite_values(self.lag.apply(lag_state), self.degree_lag, &mut hl);
        hermite_values(self.age.apply(age), self.degree_age, &mut ha);
        let na = self.degree_lag + 1;
        let mut out = vec![0.0; self.dim()];
        for (b, &hb) in ha.iter().enumerate() {
            for a in 1..na {
                out[b * na + a] = a as f64 * hl[a - 1] * hb / self.lag.sd;
            }
        }
        out
    }
}

/// Sort knot values into non-decreasing order (monotone rearrangement).
pub fn rearrange(knot_values: &[f64]) -> Vec<f64> {
    let mut v = knot_values.to_vec();
    v.sort_by(f64::total_cmp);
    v
}

/// One conditional quantile function `Q(τ | lag, age)`.
#[derive(Debug, Clone, PartialEq)]
pub struct QuantileSieve {
    basis: HermiteBasis,
    grid: TauGrid,
    /// Row-major `L x K`: row ℓ holds the coefficients at knot `τ_ℓ`.
    coeffs: Vec<f64>,
    tail_lambda_low: f64,
    tail_lambda_high: f64,
}

impl QuantileSieve {
    pub fn new(
        basis: HermiteBasis,
        grid: TauGrid,
        coeffs: Vec<f64>,
        tail_lambda_low: f64,
        tail_lambda_high: f64,
    ) -> Result<Self, SieveError> {
        let (rows, cols) = (grid.len(), basis.dim());
        if coeffs.len() != rows * cols {
            return Err(SieveError::CoeffShape {
                got: coeffs.len(),
                rows,
                cols,
            });
        }
        check_tails(tail_lambda_low, tail_lambda_high)?;
        Ok(Self {
            basis,
            grid,
            coeffs,
            tail_lambda_low,
            tail_lambda_high,
        })
    }

    /// Sieve whose knot values do not depend on the conditioning point.
    pub fn unconditional(
        basis: HermiteBasis,
        grid: TauGrid,
        knot_values: &[f64],
        tail_lambda_low: f64,
        tail_lambda_high: f64,
    ) -> Result<Self, SieveError> {
        let k = basis.dim();
        let mut coeffs = vec![0.0; grid.len() * k];
        for (l, &q) in knot_values.iter().enumerate().take(grid.len()) {
            coeffs[l * k] = q;
        }
        Self::new(basis, grid, coeffs, tail_lambda_low, tail_lambda_high)
    }

    pub fn basis(&self) -> &HermiteBasis {
        &self.basis
    }

    pub fn grid(&self) -> &TauGrid {
        &self.grid
    }

    pub fn coeffs(&self) -> &[f64] {
        &self.coeffs
    }

    pub fn coeffs_mut(&mut self) -> &mut [f64] {
        &mut self.coeffs
    }

    pub fn knot_coeffs(&self, l: usize) -> &[f64] {
        let k = self.basis.dim();
        &self.coeffs[l * k..(l + 1) * k]
    }

    pub fn tail_lambdas(&self) -> (f64, f64) {
        (self.tail_lambda_low, self.tail_lambda_high)
    }

    pub fn set_tail_lambdas(&mut self, low: f64, high: f64) -> Result<(), SieveError> {
        check_tails(low, high)?;
        self.tail_lambda_low = low;
        self.tail_lambda_high = high;
        Ok(())
    }

    /// Raw (possibly crossing) knot values at a conditioning point.
    pub fn raw_knot_values(&self, lag_state: f64, age: f64) -> Vec<f64> {
        let phi = self.basis.eval(lag_state, age);
        self.raw_knot_values_from_basis(&phi)
    }

    pub fn raw_knot_values_from_basis(&self, phi: &[f64]) -> Vec<f64> {
        let k = self.basis.dim();
        self.coeffs
            .chunks_exact(k)
            .map(|row| dot(row, phi))
            .collect()
    }

    /// Knot values after monotone rearrangement.
    pub fn knot_values(&self, lag_state: f64, age: f64) -> Vec<f64> {
        let mut v = self.raw_knot_values(lag_state, age);
        v.sort_by(f64::total_cmp);
        v
    }

    pub fn eval_quantile(&self, tau: f64, lag_state: f64, age: f64) -> Result<f64, SieveError> {
        check_tau(tau)?;
        Ok(self.quantile_from_knots(&self.knot_values(lag_state, age), tau))
    }

    /// Inverse-CDF draw: the quantile at level `u`.
    pub fn sample(&self, lag_state: f64, age: f64, u: f64) -> Result<f64, SieveError> {
        self.eval_quantile(u, lag_state, age)
    }

    /// Quantile at `tau` given already rearranged knot values.
    pub fn quantile_from_knots(&self, q: &[f64], tau: f64) -> f64 {
        let taus = self.grid.knots();
        let last = taus.len() - 1;
        if tau < taus[0] {
            q[0] + (tau / taus[0]).ln() / self.tail_lambda_low
        } else if tau > taus[last] {
            q[last] + ((1.0 - taus[last]) / (1.0 - tau)).ln() / self.tail_lambda_high
        } else {
            let j = segment_index(taus, tau);
            let w = (tau - taus[j]) / (taus[j + 1] - taus[j]);
            if w == 0.0 {
                q[j]
            } else if w == 1.0 {
                q[j + 1]
            } else {
                q[j] + w * (q[j + 1] - q[j])
            }
        }
    }

    pub fn implied_density(&self, value: f64, lag_state: f64, age: f64) -> f64 {
        self.density_from_knots(&self.knot_values(lag_state, age), value)
    }

    pub fn implied_cdf(&self, value: f64, lag_state: f64, age: f64) -> f64 {
        self.cdf_from_knots(&self.knot_values(lag_state, age), value)
    }

    /// Density of the implied distribution given rearranged knot values.
    pub fn density_from_knots(&self, q: &[f64], value: f64) -> f64 {
        let taus = self.grid.knots();
        let last = q.len() - 1;
        if value < q[0] {
            let lam = self.tail_lambda_low;
            lam * taus[0] * (lam * (value - q[0])).exp()
        } else if value >= q[last] {
            let lam = self.tail_lambda_high;
            lam * (1.0 - taus[last]) * (-lam * (value - q[last])).exp()
        } else {
            // q[j] <= value < q[j + 1]
            let j = q.partition_point(|&x| x <= value) - 1;
            let width = (q[j + 1] - q[j]).max(MIN_BIN_WIDTH);
            (taus[j + 1] - taus[j]) / width
        }
    }

    pub fn cdf_from_knots(&self, q: &[f64], value: f64) -> f64 {
        let taus = self.grid.knots();
        let last = q.len() - 1;
        if value < q[0] {
            taus[0] * (self.tail_lambda_low * (value - q[0])).exp()
        } else if value >= q[last] {
            1.0 - (1.0 - taus[last]) * (-self.tail_lambda_high * (value - q[last])).exp()
        } else {
            let j = q.partition_point(|&x| x <= value) - 1;
            let width = q[j + 1] - q[j];
            taus[j] + (taus[j + 1] - taus[j]) * (value - q[j]) / width
        }
    }

    /// Mean of the implied distribution (exact for linear segments plus tails).
    pub fn mean_from_knots(&self, q: &[f64]) -> f64 {
        let taus = self.grid.knots();
        let last = q.len() - 1;
        let lower = taus[0] * (q[0] - 1.0 / self.tail_lambda_low);
        let upper = (1.0 - taus[last]) * (q[last] + 1.0 / self.tail_lambda_high);
        let middle: f64 = (0..last)
            .map(|j| 0.5 * (q[j] + q[j + 1]) * (taus[j + 1] - taus[j]))
            .sum();
        lower + middle + upper
    }

    pub fn conditional_mean(&self, lag_state: f64, age: f64) -> f64 {
        self.mean_from_knots(&self.knot_values(lag_state, age))
    }

    /// `∂Q(τ | lag, age) / ∂lag`, following the rearranged ordering of knots.
    pub fn quantile_lag_derivative(&self, tau: f64, lag_state: f64, age: f64) -> Result<f64, SieveError> {
        check_tau(tau)?;
        let phi = self.basis.eval(lag_state, age);
        let dphi = self.basis.eval_lag_derivative(lag_state, age);
        let k = self.basis.dim();
        let mut pairs: Vec<(f64, f64)> = self
            .coeffs
            .chunks_exact(k)
            .map(|row| (dot(row, &phi), dot(row, &dphi)))
            .collect();
        pairs.sort_by(|a, b| a.0.total_cmp(&b.0));
        let taus = self.grid.knots();
        let last = taus.len() - 1;
        Ok(if tau <= taus[0] {
            pairs[0].1
        } else if tau >= taus[last] {
            pairs[last].1
        } else {
            let j = segment_index(taus, tau);
            let w = (tau - taus[j]) / (taus[j + 1] - taus[j]);
            pairs[j].1 + w * (pairs[j + 1].1 - pairs[j].1)
        })
    }

    /// Mirror image `Q(τ | x) -> -Q(1 - τ | x)`; requires a grid symmetric about 1/2.
    pub fn reflected(&self) -> Self {
        let k = self.basis.dim();
        let coeffs = self
            .coeffs
            .chunks_exact(k)
            .rev()
            .flat_map(|row| row.iter().map(|c| -c))
            .collect();
        Self {
            basis: self.basis.clone(),
            grid: self.grid.clone(),
            coeffs,
            tail_lambda_low: self.tail_lambda_high,
            tail_lambda_high: self.tail_lambda_low,
        }
    }

    /// Add `delta` to every knot value at every conditioning point.
    pub fn shift(&mut self, delta: f64) {
        let k = self.basis.dim();
        for row in self.coeffs.chunks_exact_mut(k) {
            row[0] += delta;
        }
    }
}

fn check_tau(tau: f64) -> Result<(), SieveError> {
    if tau > 0.0 && tau < 1.0 {
        Ok(())
    } else {
        Err(SieveError::TauOutOfRange(tau))
    }
}

fn check_tails(low: f64, high: f64) -> Result<(), SieveError> {
    if low.is_finite() && high.is_finite() && low > 0.0 && high > 0.0 {
        Ok(())
    } else {
        Err(SieveError::BadTail { low, high })
    }
}

/// Largest `j < len - 1` with `taus[j] <= tau`.
fn segment_index(taus: &[f64], tau: f64) -> usize {
    let j = taus.partition_point(|&t| t <= tau);
    j.saturating_sub(1).min(taus.len() - 2)
}

#[inline]
pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

#[derive(Serialize, Deserialize)]
struct Degrees {
    lag: usize,
    age: usize,
}

#[derive(Serialize, Deserialize)]
struct Standardizers {
    lag: Standardizer,
    age: Standardizer,
}

#[derive(Serialize, Deserialize)]
struct TailLambdas {
    low: f64,
    high: f64,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct SieveWire {
    grid: Vec<f64>,
    degrees: Degrees,
    standardizers: Standardizers,
    coeffs: Vec<f64>,
    tail_lambdas: TailLambdas,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    lag_range: Option<(f64, f64)>,
}

impl Serialize for QuantileSieve {
    fn serialize<S: serde::Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        SieveWire {
            grid: self.grid.knots.clone(),
            degrees: Degrees {
                lag: self.basis.degree_lag,
                age: self.basis.degree_age,
            },
            standardizers: Standardizers {
                lag: self.basis.lag,
                age: self.basis.age,
            },
            coeffs: self.coeffs.clone(),
            tail_lambdas: TailLambdas {
                low: self.tail_lambda_low,
                high: self.tail_lambda_high,
            },
            lag_range: self.basis.lag_range,
        }
        .serialize(s)
    }
}

impl<'de> Deserialize<'de> for QuantileSieve {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        use serde::de::Error;
        let w = SieveWire::deserialize(d)?;
        if w.grid.len() < 2 || w.grid.windows(2).any(|p| p[0] >= p[1]) {
            return Err(D::Error::custom("grid must be strictly increasing with >= 2 knots"));
        }
        let lag = Standardizer::new(w.standardizers.lag.mean, w.standardizers.lag.sd).map_err(D::Error::custom)?;
        let age = Standardizer::new(w.standardizers.age.mean, w.standardizers.age.sd).map_err(D::Error::custom)?;
        let mut basis = HermiteBasis::new(w.degrees.lag, w.degrees.age, lag, age);
        if let Some((lo, hi)) = w.lag_range {
            if !(lo.is_finite() && hi.is_finite() && lo <= hi) {
                return Err(D::Error::custom("lag_range must be finite and ordered"));
            }
            basis = basis.with_lag_range(lo, hi);
        }
        QuantileSieve::new(
            basis,
            TauGrid { knots: w.grid },
            w.coeffs,
            w.tail_lambdas.low,
            w.tail_lambdas.high,
        )
        .map_err(D::Error::custom)
    }
}
