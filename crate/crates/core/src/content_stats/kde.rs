//! Two-dimensional Gaussian KDE with a diagonal Scott bandwidth.

use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use super::StatsError;

/// Default lower bound on each bandwidth entry, in normalized box units.
pub const MIN_BANDWIDTH: f64 = 1e-3;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Kde2 {
    points: Vec<[f64; 2]>,
    bandwidth: [f64; 2],
}

/// Per-dimension sample standard deviation (n - 1 denominator). `None` for
/// a single point.
pub fn sample_std(points: &[[f64; 2]]) -> Option<[f64; 2]> {
    let n = points.len();
    if n < 2 {
        return None;
    }
    let mut out = [0.0; 2];
    for (d, slot) in out.iter_mut().enumerate() {
        let mean = points.iter().map(|p| p[d]).sum::<f64>() / n as f64;
        let ss = points.iter().map(|p| (p[d] - mean).powi(2)).sum::<f64>();
        *slot = (ss / (n - 1) as f64).sqrt();
    }
    Some(out)
}

/// Scott's factor for two dimensions: `n^(-1/6)`.
pub fn scott_factor(n: usize) -> f64 {
    (n as f64).powf(-1.0 / 6.0)
}

impl Kde2 {
    /// Fits a KDE with `h_j = max(n^(-1/6) * std_j, min_bandwidth)`.
    pub fn fit(points: &[[f64; 2]], min_bandwidth: f64) -> Result<Self, StatsError> {
        if points.is_empty() {
            return Err(StatsError::EmptyKde);
        }
        let factor = scott_factor(points.len());
        let std = sample_std(points).unwrap_or([0.0, 0.0]);
        let bandwidth = [
            (factor * std[0]).max(min_bandwidth),
            (factor * std[1]).max(min_bandwidth),
        ];
        Ok(Kde2 {
            points: points.to_vec(),
            bandwidth,
        })
    }

    pub fn with_bandwidth(points: &[[f64; 2]], bandwidth: [f64; 2]) -> Result<Self, StatsError> {
        if points.is_empty() {
            return Err(StatsError::EmptyKde);
        }
        if !(bandwidth[0] > 0.0 && bandwidth[1] > 0.0) {
            return Err(StatsError::InvalidBandwidth(bandwidth));
        }
        Ok(Kde2 {
            points: points.to_vec(),
            bandwidth,
        })
    }

    pub fn bandwidth(&self) -> [f64; 2] {
        self.bandwidth
    }

    pub fn points(&self) -> &[[f64; 2]] {
        &self.points
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    fn log_norm(&self) -> f64 {
        -(2.0 * PI * self.bandwidth[0] * self.bandwidth[1]).ln() - (self.points.len() as f64).ln()
    }

    fn exponent(&self, p: [f64; 2], x: &[f64; 2]) -> f64 {
        let u = (p[0] - x[0]) / self.bandwidth[0];
        let v = (p[1] - x[1]) / self.bandwidth[1];
        -0.5 * (u * u + v * v)
    }

    /// Log density, computed with a log-sum-exp over kernels so points far
    /// from every sample still get a finite value.
    pub fn log_pdf(&self, p: [f64; 2]) -> f64 {
        let max = self
            .points
            .iter()
            .map(|x| self.exponent(p, x))
            .fold(f64::NEG_INFINITY, f64::max);
        let sum: f64 = self.points.iter().map(|x| (self.exponent(p, x) - max).exp()).sum();
        max + sum.ln() + self.log_norm()
    }

    pub fn pdf(&self, p: [f64; 2]) -> f64 {
        let norm = 1.0 / (2.0 * PI * self.bandwidth[0] * self.bandwidth[1] * self.points.len() as f64);
        norm * self.points.iter().map(|x| self.exponent(p, x).exp()).sum::<f64>()
    }

    /// Midpoint-rule integral of the pdf over `[lo, hi]^2` with `n x n` cells.
    ///
    /// The kernel is a product of one-dimensional Gaussians, so the grid sum
    /// for each sample factors into two sums over `n` nodes.
    pub fn grid_mass(&self, lo: f64, hi: f64, n: usize) -> f64 {
        let step = (hi - lo) / n as f64;
        let nodes: Vec<f64> = (0..n).map(|i| lo + (i as f64 + 0.5) * step).collect();
        let axis = |center: f64, h: f64| -> f64 {
            nodes
                .iter()
                .map(|t| {
                    let u = (t - center) / h;
                    (-0.5 * u * u).exp()
                })
                .sum::<f64>()
        };
        let norm = 1.0 / (2.0 * PI * self.bandwidth[0] * self.bandwidth[1] * self.points.len() as f64);
        let total: f64 = self
            .points
            .iter()
            .map(|x| axis(x[0], self.bandwidth[0]) * axis(x[1], self.bandwidth[1]))
            .sum();
        norm * total * step * step
    }

    /// Mean of the fitted density, which equals the sample mean.
    pub fn mean(&self) -> [f64; 2] {
        let n = self.points.len() as f64;
        let mut m = [0.0; 2];
        for p in &self.points {
            m[0] += p[0];
            m[1] += p[1];
        }
        [m[0] / n, m[1] / n]
    }

    /// `E[x * y]` under the fitted density. Kernels are axis-aligned, so this
    /// is the sample mean of the products.
    pub fn mean_product(&self) -> f64 {
        self.points.iter().map(|p| p[0] * p[1]).sum::<f64>() / self.points.len() as f64
    }
}
