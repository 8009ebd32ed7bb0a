//! Convex solvers for the M-step: weighted check-loss minimization at one
//! quantile level, and two-parameter logistic maximum likelihood.
//!
//! Quantile regression is solved as a bounded linear program with a
//! Mehrotra predictor-corrector primal-dual interior-point method on the dual
//! problem, followed by a vertex polish that moves the answer to an exact
//! basic solution whenever that lowers the objective.

use nalgebra::{DMatrix, DVector};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum QregError {
    #[error("quantile level {0} outside (0, 1)")]
    TauOutOfRange(f64),
    #[error("problem has {n} observations but {k} regressors")]
    TooFewObservations { n: usize, k: usize },
    #[error("dimension mismatch: {0}")]
    Shape(&'static str),
    #[error("non-finite or negative entry in {0}")]
    NonFinite(&'static str),
    #[error("design matrix is rank deficient")]
    RankDeficient,
    #[error("solver did not converge within {0} iterations")]
    NoConvergence(usize),
    #[error("outcome must contain both classes")]
    ClassAbsent,
    #[error("covariate is constant")]
    ConstantCovariate,
    #[error("outcome is perfectly separated by the covariate")]
    PerfectSeparation,
}

/// `ρ_τ(u) = u (τ - 1{u <= 0})`.
#[inline]
pub fn check_loss(u: f64, tau: f64) -> f64 {
    if u <= 0.0 {
        u * (tau - 1.0)
    } else {
        u * tau
    }
}

/// Weighted quantile regression problem in row-major layout.
#[derive(Debug, Clone)]
pub struct QregProblem {
    /// `n x k`, row-major.
    pub design: Vec<f64>,
    pub n_cols: usize,
    pub response: Vec<f64>,
    pub tau: f64,
    /// Optional nonnegative weights; `None` means unit weights.
    pub weights: Option<Vec<f64>>,
}

impl QregProblem {
    pub fn new(design: Vec<f64>, n_cols: usize, response: Vec<f64>, tau: f64) -> Self {
        Self {
            design,
            n_cols,
            response,
            tau,
            weights: None,
        }
    }

    pub fn with_weights(mut self, weights: Vec<f64>) -> Self {
        self.weights = Some(weights);
        self
    }

    pub fn n_rows(&self) -> usize {
        self.response.len()
    }

    fn row(&self, i: usize) -> &[f64] {
        &self.design[i * self.n_cols..(i + 1) * self.n_cols]
    }

    fn weight(&self, i: usize) -> f64 {
        self.weights.as_ref().map_or(1.0, |w| w[i])
    }

    /// `Σ w_i ρ_τ(y_i - x_i'θ)`.
    pub fn objective(&self, theta: &[f64]) -> f64 {
        (0..self.n_rows())
            .map(|i| {
                let fit: f64 = self.row(i).iter().zip(theta).map(|(x, b)| x * b).sum();
                self.weight(i) * check_loss(self.response[i] - fit, self.tau)
            })
            .sum()
    }

    fn validate(&self) -> Result<(), QregError> {
        let (n, k) = (self.n_rows(), self.n_cols);
        if !(self.tau > 0.0 && self.tau < 1.0) {
            return Err(QregError::TauOutOfRange(self.tau));
        }
        if k == 0 || self.design.len() != n * k {
            return Err(QregError::Shape("design is not n x k"));
        }
        if let Some(w) = &self.weights {
            if w.len() != n {
                return Err(QregError::Shape("weights length differs from response"));
            }
            if w.iter().any(|v| !v.is_finite() || *v < 0.0) {
                return Err(QregError::NonFinite("weights"));
            }
        }
        if n < k {
            return Err(QregError::TooFewObservations { n, k });
        }
        if self.design.iter().any(|v| !v.is_finite()) {
            return Err(QregError::NonFinite("design"));
        }
        if self.response.iter().any(|v| !v.is_finite()) {
            return Err(QregError::NonFinite("response"));
        }
        Ok(())
    }
}

const MAX_IP_ITER: usize = 200;
const STEP_SCALE: f64 = 0.99995;

/// Minimize `Σ w_i ρ_τ(y_i - x_i'θ)` to relative objective accuracy `tol`.
pub fn solve_qreg(problem: &QregProblem, tol: f64) -> Result<Vec<f64>, QregError> {
    problem.validate()?;
    let k = problem.n_cols;
    // Zero-weight rows do not enter the objective.
    let active: Vec<usize> = (0..problem.n_rows()).filter(|&i| problem.weight(i) > 0.0).collect();
    let n = active.len();
    if n < k {
        return Err(QregError::TooFewObservations { n, k });
    }
    let x = DMatrix::from_fn(n, k, |r, c| problem.row(active[r])[c]);
    let y = DVector::from_iterator(n, active.iter().map(|&i| problem.response[i]));
    let w = DVector::from_iterator(n, active.iter().map(|&i| problem.weight(i)));

    let theta = interior_point(&x, &y, &w, problem.tau, tol)?;
    let polished = polish_vertex(&x, &y, &theta);
    let obj = |t: &DVector<f64>| weighted_objective(&x, &y, &w, problem.tau, t);
    let best = match polished {
        Some(p) if obj(&p) <= obj(&theta) => p,
        _ => theta,
    };
    Ok(best.iter().copied().collect())
}

fn weighted_objective(x: &DMatrix<f64>, y: &DVector<f64>, w: &DVector<f64>, tau: f64, theta: &DVector<f64>) -> f64 {
    let r = y - x * theta;
    r.iter().zip(w.iter()).map(|(&e, &wi)| wi * check_loss(e, tau)).sum()
}

/// Primal-dual path following on
/// `max y'a  s.t.  X'a = (1 - τ) X'w,  0 <= a <= w`,
/// whose equality multipliers are the regression coefficients.
fn interior_point(
    x: &DMatrix<f64>,
    y: &DVector<f64>,
    w: &DVector<f64>,
    tau: f64,
    tol: f64,
) -> Result<DVector<f64>, QregError> {
    let n = x.nrows();
    let xt = x.transpose();

    // Least-squares start for the coefficients; also our rank check.
    let gram = &xt * x;
    let chol = gram.clone().cholesky().ok_or(QregError::RankDeficient)?;
    if rank_deficient(&gram) {
        return Err(QregError::RankDeficient);
    }
    let mut beta = chol.solve(&(&xt * y));

    // Primal: a = (1 - τ) w is exactly feasible; s = w - a.
    let mut a: DVector<f64> = w * (1.0 - tau);
    let mut s: DVector<f64> = w * tau;
    // Dual slacks: r - z = y - Xβ, both strictly positive.
    let resid = y - x * &beta;
    let scale = resid.iter().map(|e| e.abs()).sum::<f64>() / n as f64;
    let shift = scale.max(1e-3 * (1.0 + y.amax())).max(1e-8);
    let mut z = DVector::from_iterator(n, resid.iter().map(|&e| (-e).max(0.0) + shift));
    let mut r = DVector::from_iterator(n, resid.iter().map(|&e| e.max(0.0) + shift));
    let b = &xt * (w * (1.0 - tau));

    for iter in 0..MAX_IP_ITER {
        // Residuals of the linear constraints.
        let rp = &b - &xt * &a;
        // Dual residual in the form r - z - (y - Xβ) = 0.
        let rd = y - x * &beta - (&r - &z);
        let gap = a.dot(&z) + s.dot(&r);
        let primal_obj = weighted_objective(x, y, w, tau, &beta);
        let feasible = rp.amax() <= 1e-9 * (1.0 + b.amax()) && rd.amax() <= 1e-9 * (1.0 + y.amax());
        if feasible && gap <= tol * (1.0 + primal_obj.abs()) * 0.1 {
            return Ok(beta);
        }

        let d_inv = DVector::from_iterator(n, (0..n).map(|i| 1.0 / (z[i] / a[i] + r[i] / s[i])));
        let mut scaled = x.clone();
        for (i, mut row) in scaled.row_iter_mut().enumerate() {
            row *= d_inv[i];
        }
        let normal = &xt * &scaled;
        let normal_chol = match normal.clone().cholesky() {
            Some(c) => c,
            None => {
                let ridge = 1e-12 * normal.diagonal().amax().max(1e-300);
                let mut reg = normal;
                for j in 0..reg.ncols() {
                    reg[(j, j)] += ridge;
                }
                reg.cholesky().ok_or(QregError::NoConvergence(iter))?
            }
        };

        // Direction for given complementarity targets (per-coordinate).
        let direction = |comp_az: &DVector<f64>, comp_sr: &DVector<f64>| {
            // Newton equations:
            //   X' da = rp,  X dβ - ... handled through da = D^{-1}(rhs - X dβ')
            //   a dz + z da = comp_az,  s dr + r ds = comp_sr,  ds = -da
            //   dr - dz + X dβ = rd
            // Eliminating dz, dr: X dβ + D da = rd - comp_sr/s + comp_az/a
            let rhs1 = DVector::from_iterator(
                n,
                (0..n).map(|i| rd[i] - comp_sr[i] / s[i] + comp_az[i] / a[i]),
            );
            let tmp = DVector::from_iterator(n, (0..n).map(|i| d_inv[i] * rhs1[i]));
            // X' da = rp with da = D^{-1}(rhs1 - X dβ)
            let dbeta = normal_chol.solve(&(&xt * &tmp - &rp));
            let xdb = x * &dbeta;
            let da = DVector::from_iterator(n, (0..n).map(|i| d_inv[i] * (rhs1[i] - xdb[i])));
            let ds = -&da;
            let dz = DVector::from_iterator(n, (0..n).map(|i| (comp_az[i] - z[i] * da[i]) / a[i]));
            let dr = DVector::from_iterator(n, (0..n).map(|i| (comp_sr[i] - r[i] * ds[i]) / s[i]));
            (da, ds, dbeta, dz, dr)
        };

        // Affine predictor.
        let comp_az0 = DVector::from_iterator(n, (0..n).map(|i| -a[i] * z[i]));
        let comp_sr0 = DVector::from_iterator(n, (0..n).map(|i| -s[i] * r[i]));
        let (da, ds, _, dz, dr) = direction(&comp_az0, &comp_sr0);
        let ap = step_length(&a, &da).min(step_length(&s, &ds));
        let ad = step_length(&z, &dz).min(step_length(&r, &dr));
        let mu = gap / (2 * n) as f64;
        let gap_aff: f64 = (0..n)
            .map(|i| (a[i] + ap * da[i]) * (z[i] + ad * dz[i]) + (s[i] + ap * ds[i]) * (r[i] + ad * dr[i]))
            .sum();
        let sigma = (gap_aff / gap).clamp(0.0, 1.0).powi(3);

        // Corrector.
        let comp_az = DVector::from_iterator(n, (0..n).map(|i| sigma * mu - a[i] * z[i] - da[i] * dz[i]));
        let comp_sr = DVector::from_iterator(n, (0..n).map(|i| sigma * mu - s[i] * r[i] - ds[i] * dr[i]));
        let (da, ds, dbeta, dz, dr) = direction(&comp_az, &comp_sr);
        let ap = (STEP_SCALE * step_length(&a, &da).min(step_length(&s, &ds))).min(1.0);
        let ad = (STEP_SCALE * step_length(&z, &dz).min(step_length(&r, &dr))).min(1.0);

        a.axpy(ap, &da, 1.0);
        s.axpy(ap, &ds, 1.0);
        beta.axpy(ad, &dbeta, 1.0);
        z.axpy(ad, &dz, 1.0);
        r.axpy(ad, &dr, 1.0);

        if !(beta.iter().all(|v| v.is_finite())) {
            return Err(QregError::NoConvergence(iter));
        }
    }
    Err(QregError::NoConvergence(MAX_IP_ITER))
}

fn rank_deficient(gram: &DMatrix<f64>) -> bool {
    let eig = gram.clone().symmetric_eigen();
    let max = eig.eigenvalues.amax();
    let min = eig.eigenvalues.iter().cloned().fold(f64::INFINITY, f64::min);
    !(max > 0.0) || min <= max * 1e-13
}

/// Largest step in `[0, inf)` keeping `v + α dv >= 0`, capped at a large value.
fn step_length(v: &DVector<f64>, dv: &DVector<f64>) -> f64 {
    v.iter()
        .zip(dv.iter())
        .filter(|(_, &d)| d < 0.0)
        .map(|(&x, &d)| -x / d)
        .fold(1e30, f64::min)
}

/// Interpolate the `k` observations with the smallest absolute residuals.
/// At an optimum of the LP, some basic solution attains the minimum; this
/// recovers it exactly when the interior-point iterate is close to it.
fn polish_vertex(x: &DMatrix<f64>, y: &DVector<f64>, theta: &DVector<f64>) -> Option<DVector<f64>> {
    let k = x.ncols();
    let resid = y - x * theta;
    let mut order: Vec<usize> = (0..y.len()).collect();
    order.sort_by(|&i, &j| resid[i].abs().total_cmp(&resid[j].abs()).then(i.cmp(&j)));
    // Greedily collect k linearly independent rows.
    let mut chosen: Vec<usize> = Vec::with_capacity(k);
    let mut basis_rows: Vec<DVector<f64>> = Vec::with_capacity(k);
    for &i in &order {
        if chosen.len() == k {
            break;
        }
        let mut v = x.row(i).transpose();
        let norm0 = v.norm();
        if norm0 == 0.0 {
            continue;
        }
        for q in &basis_rows {
            let p = q.dot(&v);
            v.axpy(-p, q, 1.0);
        }
        let nv = v.norm();
        if nv > 1e-9 * norm0 {
            basis_rows.push(v / nv);
            chosen.push(i);
        }
    }
    if chosen.len() < k {
        return None;
    }
    let xh = DMatrix::from_fn(k, k, |r, c| x[(chosen[r], c)]);
    let yh = DVector::from_iterator(k, chosen.iter().map(|&i| y[i]));
    let sol = xh.lu().solve(&yh)?;
    sol.iter().all(|v| v.is_finite()).then_some(sol)
}

/// Binary-outcome logistic problem `P(ω = 1 | u) = 1 / (1 + exp(-β0 - β1 u))`.
#[derive(Debug, Clone)]
pub struct LogitProblem {
    pub covariate: Vec<f64>,
    pub outcome: Vec<u8>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LogitFit {
    pub beta0: f64,
    pub beta1: f64,
    /// Mean log-likelihood after each accepted Newton step (first entry: start).
    pub loglik_trace: Vec<f64>,
    pub iterations: usize,
}

const MAX_NEWTON_ITER: usize = 100;

/// Numerically stable `log(1 + exp(x))`.
#[inline]
pub fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

#[inline]
pub fn logistic(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn logit_loglik(p: &LogitProblem, b0: f64, b1: f64) -> f64 {
    let n = p.covariate.len() as f64;
    p.covariate
        .iter()
        .zip(&p.outcome)
        .map(|(&u, &w)| {
            let eta = b0 + b1 * u;
            if w == 1 {
                -softplus(-eta)
            } else {
                -softplus(eta)
            }
        })
        .sum::<f64>()
        / n
}

/// Damped Newton for the two-parameter logistic MLE. Convergence is declared
/// when the gradient of the mean log-likelihood has norm below `tol`, or when
/// the Newton step predicts a gain below `tol / 1000`.
pub fn fit_logistic(problem: &LogitProblem, tol: f64) -> Result<LogitFit, QregError> {
    let n = problem.covariate.len();
    if n != problem.outcome.len() {
        return Err(QregError::Shape("covariate and outcome lengths differ"));
    }
    if problem.covariate.iter().any(|v| !v.is_finite()) {
        return Err(QregError::NonFinite("covariate"));
    }
    if problem.outcome.iter().any(|&w| w > 1) {
        return Err(QregError::Shape("outcome must be 0/1"));
    }
    let ones = problem.outcome.iter().filter(|&&w| w == 1).count();
    if n < 2 || ones == 0 || ones == n {
        return Err(QregError::ClassAbsent);
    }
    let (lo, hi) = problem
        .covariate
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &v| (a.min(v), b.max(v)));
    if lo == hi {
        return Err(QregError::ConstantCovariate);
    }
    let range = |cls: u8| {
        problem
            .covariate
            .iter()
            .zip(&problem.outcome)
            .filter(|(_, &w)| w == cls)
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), (&v, _)| (a.min(v), b.max(v)))
    };
    let (min0, max0) = range(0);
    let (min1, max1) = range(1);
    if max0 < min1 || max1 < min0 {
        return Err(QregError::PerfectSeparation);
    }

    let nf = n as f64;
    let pbar = ones as f64 / nf;
    let mut b0 = (pbar / (1.0 - pbar)).ln();
    let mut b1 = 0.0;
    let mut ll = logit_loglik(problem, b0, b1);
    let mut trace = vec![ll];

    for iter in 0..MAX_NEWTON_ITER {
        let (mut g0, mut g1, mut h00, mut h01, mut h11) = (0.0, 0.0, 0.0, 0.0, 0.0);
        for (&u, &w) in problem.covariate.iter().zip(&problem.outcome) {
            let p = logistic(b0 + b1 * u);
            let e = w as f64 - p;
            g0 += e;
            g1 += e * u;
            let v = p * (1.0 - p);
            h00 += v;
            h01 += v * u;
            h11 += v * u * u;
        }
        let (g0, g1) = (g0 / nf, g1 / nf);
        let (h00, h01, h11) = (h00 / nf, h01 / nf, h11 / nf);
        if g0.hypot(g1) < tol {
            return Ok(LogitFit {
                beta0: b0,
                beta1: b1,
                loglik_trace: trace,
                iterations: iter,
            });
        }
        let det = h00 * h11 - h01 * h01;
        if !(det > 0.0) {
            return Err(QregError::NoConvergence(iter));
        }
        let d0 = (h11 * g0 - h01 * g1) / det;
        let d1 = (h00 * g1 - h01 * g0) / det;
        // Predicted gain of the full Newton step; below the rounding floor of
        // the gradient sum there is nothing left to gain.
        if 0.5 * (g0 * d0 + g1 * d1) < 1e-3 * tol {
            return Ok(LogitFit {
                beta0: b0,
                beta1: b1,
                loglik_trace: trace,
                iterations: iter,
            });
        }
        let mut step = 1.0;
        let mut accepted = false;
        for _ in 0..60 {
            let (c0, c1) = (b0 + step * d0, b1 + step * d1);
            let cand = logit_loglik(problem, c0, c1);
            if cand >= ll {
                b0 = c0;
                b1 = c1;
                ll = cand;
                accepted = true;
                break;
            }
            step *= 0.5;
        }
        if !accepted {
            // No ascent available in floating point: accept if nearly stationary.
            if g0.hypot(g1) < tol.sqrt() {
                return Ok(LogitFit {
                    beta0: b0,
                    beta1: b1,
                    loglik_trace: trace,
                    iterations: iter,
                });
            }
            return Err(QregError::NoConvergence(iter));
        }
        trace.push(ll);
    }
    Err(QregError::NoConvergence(MAX_NEWTON_ITER))
}
