//! Gaussian kernel density estimates on a shared grid.

use serde::{Deserialize, Serialize};

pub const KDE_GRID: usize = 512;
pub const KDE_EPSILON: f64 = 1e-12;
/// Smallest bandwidth used when a sample has (near) zero spread.
const MIN_BANDWIDTH: f64 = 1e-3;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Kde {
    pub bandwidth: f64,
    pub grid: Vec<f64>,
    pub density: Vec<f64>,
}

impl Kde {
    /// Trapezoid integral of the density over the grid.
    pub fn integral(&self) -> f64 {
        self.grid.windows(2).zip(self.density.windows(2)).map(|(x, y)| 0.5 * (x[1] - x[0]) * (y[0] + y[1])).sum()
    }
}

/// Scott's rule `sigma * n^(-1/5)` with a floor for degenerate samples.
pub fn scott_bandwidth(sample: &[f64]) -> f64 {
    let n = sample.len() as f64;
    if sample.len() < 2 {
        return MIN_BANDWIDTH;
    }
    let mean = sample.iter().sum::<f64>() / n;
    let var = sample.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / (n - 1.0);
    (var.sqrt() * n.powf(-0.2)).max(MIN_BANDWIDTH)
}

/// Evaluates the Gaussian KDE of `sample` with bandwidth `h` on `grid`.
pub fn gaussian_kde(sample: &[f64], h: f64, grid: &[f64]) -> Kde {
    let norm = 1.0 / (sample.len() as f64 * h * (2.0 * std::f64::consts::PI).sqrt());
    let density = grid
        .iter()
        .map(|&x| norm * sample.iter().map(|&s| (-0.5 * ((x - s) / h).powi(2)).exp()).sum::<f64>())
        .collect();
    Kde { bandwidth: h, grid: grid.to_vec(), density }
}

/// Both KDEs on one grid spanning both samples plus three of the wider bandwidth.
pub(crate) fn shared_pair(a: &[f64], b: &[f64]) -> (Kde, Kde) {
    let (ha, hb) = (scott_bandwidth(a), scott_bandwidth(b));
    let pad = 3.0 * ha.max(hb);
    let lo = a.iter().chain(b).copied().fold(f64::INFINITY, f64::min) - pad;
    let hi = a.iter().chain(b).copied().fold(f64::NEG_INFINITY, f64::max) + pad;
    let step = (hi - lo) / (KDE_GRID - 1) as f64;
    let grid: Vec<f64> = (0..KDE_GRID).map(|i| lo + step * i as f64).collect();
    (gaussian_kde(a, ha, &grid), gaussian_kde(b, hb, &grid))
}

/// `KL(p||q) + KL(q||p)` between two densities discretized on the same
/// uniform grid, each renormalized to a probability vector and floored at
/// [`KDE_EPSILON`] inside the logarithm.
pub fn symmetrized_kl(p: &[f64], q: &[f64]) -> f64 {
    assert_eq!(p.len(), q.len(), "densities must share a grid");
    let sp: f64 = p.iter().sum();
    let sq: f64 = q.iter().sum();
    if sp <= 0.0 || sq <= 0.0 {
        return 0.0;
    }
    p.iter()
        .zip(q)
        .map(|(&a, &b)| {
            let (a, b) = (a / sp, b / sq);
            (a - b) * (a.max(KDE_EPSILON).ln() - b.max(KDE_EPSILON).ln())
        })
        .sum()
}
