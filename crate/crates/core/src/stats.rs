//! Small descriptive-statistics helpers shared by the simulator and diagnostics.

use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal};

pub fn mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len() as f64
}

/// Sample variance (denominator `n - 1`).
pub fn variance(xs: &[f64]) -> f64 {
    let m = mean(xs);
    xs.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (xs.len() as f64 - 1.0)
}

pub fn sd(xs: &[f64]) -> f64 {
    variance(xs).sqrt()
}

/// Central-moment summary. `kurtosis` is the raw (non-excess) ratio `m4 / m2²`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Moments {
    pub n: usize,
    pub mean: f64,
    pub variance: f64,
    pub skewness: f64,
    pub kurtosis: f64,
}

impl Moments {
    pub fn of(xs: &[f64]) -> Self {
        let n = xs.len() as f64;
        let m = mean(xs);
        let (mut m2, mut m3, mut m4) = (0.0, 0.0, 0.0);
        for &x in xs {
            let d = x - m;
            let d2 = d * d;
            m2 += d2;
            m3 += d2 * d;
            m4 += d2 * d2;
        }
        let (m2, m3, m4) = (m2 / n, m3 / n, m4 / n);
        Self {
            n: xs.len(),
            mean: m,
            variance: m2 * n / (n - 1.0),
            skewness: m3 / m2.powf(1.5),
            kurtosis: m4 / (m2 * m2),
        }
    }

    pub fn excess_kurtosis(&self) -> f64 {
        self.kurtosis - 3.0
    }
}

/// Empirical quantile of already sorted data, linear interpolation between
/// order statistics (type 7).
pub fn quantile_sorted(sorted: &[f64], p: f64) -> f64 {
    let n = sorted.len();
    if n == 1 {
        return sorted[0];
    }
    let h = (n - 1) as f64 * p.clamp(0.0, 1.0);
    let lo = h.floor() as usize;
    let hi = (lo + 1).min(n - 1);
    sorted[lo] + (h - lo as f64) * (sorted[hi] - sorted[lo])
}

pub fn sorted_copy(xs: &[f64]) -> Vec<f64> {
    let mut v = xs.to_vec();
    v.sort_by(f64::total_cmp);
    v
}

/// Standard normal quantile.
pub fn normal_quantile(p: f64) -> f64 {
    Normal::standard().inverse_cdf(p)
}

pub fn normal_cdf(x: f64) -> f64 {
    Normal::standard().cdf(x)
}

/// Silverman's rule-of-thumb bandwidth.
pub fn silverman_bandwidth(xs: &[f64]) -> f64 {
    let s = sd(xs);
    let sorted = sorted_copy(xs);
    let iqr = quantile_sorted(&sorted, 0.75) - quantile_sorted(&sorted, 0.25);
    let spread = if iqr > 0.0 { s.min(iqr / 1.34) } else { s };
    let spread = if spread > 0.0 { spread } else { 1.0 };
    0.9 * spread * (xs.len() as f64).powf(-0.2)
}

/// `n` equally spaced points spanning `mean ± 5 sd` of `xs`.
pub fn default_grid(xs: &[f64], n: usize) -> Vec<f64> {
    let m = mean(xs);
    let s = sd(xs);
    let s = if s > 0.0 { s } else { 1.0 };
    linspace(m - 5.0 * s, m + 5.0 * s, n)
}

pub fn linspace(a: f64, b: f64, n: usize) -> Vec<f64> {
    if n == 1 {
        return vec![a];
    }
    (0..n).map(|i| a + (b - a) * i as f64 / (n - 1) as f64).collect()
}

/// Gaussian kernel density estimate at each grid point.
pub fn gaussian_kde(xs: &[f64], grid: &[f64], bandwidth: f64) -> Vec<f64> {
    let norm = 1.0 / (xs.len() as f64 * bandwidth * (2.0 * std::f64::consts::PI).sqrt());
    let sorted = sorted_copy(xs);
    let cutoff = 9.0 * bandwidth;
    grid.iter()
        .map(|&g| {
            let lo = sorted.partition_point(|&x| x < g - cutoff);
            let hi = sorted.partition_point(|&x| x <= g + cutoff);
            sorted[lo..hi]
                .iter()
                .map(|&x| {
                    let z = (g - x) / bandwidth;
                    (-0.5 * z * z).exp()
                })
                .sum::<f64>()
                * norm
        })
        .collect()
}

/// Trapezoid rule for samples on a grid.
pub fn trapezoid(grid: &[f64], values: &[f64]) -> f64 {
    grid.windows(2)
        .zip(values.windows(2))
        .map(|(g, v)| 0.5 * (g[1] - g[0]) * (v[0] + v[1]))
        .sum()
}

/// OLS slope of `y` on `x` with an intercept, plus a cluster-robust standard
/// error (clusters given by `cluster`, one label per observation).
pub fn ols_slope_clustered(x: &[f64], y: &[f64], cluster: &[usize]) -> (f64, f64) {
    let n = x.len() as f64;
    let mx = mean(x);
    let my = mean(y);
    let sxx: f64 = x.iter().map(|v| (v - mx).powi(2)).sum();
    let sxy: f64 = x.iter().zip(y).map(|(a, b)| (a - mx) * (b - my)).sum();
    let slope = sxy / sxx;
    let intercept = my - slope * mx;
    let mut scores: std::collections::BTreeMap<usize, f64> = Default::default();
    for ((&xi, &yi), &c) in x.iter().zip(y).zip(cluster) {
        let e = yi - intercept - slope * xi;
        *scores.entry(c).or_default() += (xi - mx) * e;
    }
    let g = scores.len() as f64;
    let meat: f64 = scores.values().map(|s| s * s).sum();
    let correction = if g > 1.0 { g / (g - 1.0) * (n - 1.0) / (n - 2.0) } else { 1.0 };
    (slope, (correction * meat).sqrt() / sxx)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn moments_of_small_sample() {
        let m = Moments::of(&[1.0, 2.0, 3.0, 4.0]);
        assert_eq!(m.mean, 2.5);
        assert!((m.variance - 5.0 / 3.0).abs() < 1e-15);
        assert!(m.skewness.abs() < 1e-15);
        // m2 = 1.25, m4 = (2*5.0625 + 2*0.0625)/4 = 2.5625
        assert!((m.kurtosis - 2.5625 / 1.5625).abs() < 1e-14);
    }

    #[test]
    fn quantiles_type7() {
        let s = [1.0, 2.0, 3.0, 4.0, 5.0];
        assert_eq!(quantile_sorted(&s, 0.5), 3.0);
        assert_eq!(quantile_sorted(&s, 0.125), 1.5);
    }

    #[test]
    fn kde_integrates_to_one() {
        let xs: Vec<f64> = (0..500).map(|i| ((i * 7919) % 1000) as f64 / 1000.0).collect();
        let grid = default_grid(&xs, 512);
        let h = silverman_bandwidth(&xs);
        let d = gaussian_kde(&xs, &grid, h);
        assert!((trapezoid(&grid, &d) - 1.0).abs() < 1e-3);
        assert!(d.iter().all(|v| *v >= 0.0));
    }
}
