//! Small statistical helpers shared by the metrics and experiment reports.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

/// Two-sided 95% normal quantile.
pub const Z_95: f64 = 1.959_963_984_540_054;

/// Wilson score interval for a binomial proportion. Unlike the plain Wald
/// interval it keeps a non-zero width at 0 and 1 and always contains the
/// point estimate.
pub fn wilson_interval(successes: f64, n: usize, z: f64) -> (f64, f64) {
    if n == 0 {
        return (0.0, 1.0);
    }
    let n = n as f64;
    let p = (successes / n).clamp(0.0, 1.0);
    let z2 = z * z;
    let denom = 1.0 + z2 / n;
    let center = (p + z2 / (2.0 * n)) / denom;
    let half = z / denom * (p * (1.0 - p) / n + z2 / (4.0 * n * n)).sqrt();
    ((center - half).max(0.0).min(p), (center + half).min(1.0).max(p))
}

/// Standard error of a Bernoulli mean with success probability `p` over `n` draws.
pub fn bernoulli_se(p: f64, n: usize) -> f64 {
    (p * (1.0 - p) / n as f64).sqrt()
}

pub fn mean(values: &[f64]) -> f64 {
    if values.is_empty() {
        return f64::NAN;
    }
    values.iter().sum::<f64>() / values.len() as f64
}

/// Ordinary least-squares slope of `ys` against `xs`.
pub fn least_squares_slope(xs: &[f64], ys: &[f64]) -> f64 {
    assert_eq!(xs.len(), ys.len());
    let mx = mean(xs);
    let my = mean(ys);
    let mut sxy = 0.0;
    let mut sxx = 0.0;
    for (x, y) in xs.iter().zip(ys) {
        sxy += (x - mx) * (y - my);
        sxx += (x - mx) * (x - mx);
    }
    if sxx == 0.0 {
        0.0
    } else {
        sxy / sxx
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SlopeTest {
    pub slope: f64,
    /// Two-sided permutation p-value, `(1 + #{|perm| >= |obs|}) / (1 + permutations)`.
    pub p_value: f64,
    pub permutations: usize,
}

/// Tests for a linear trend of `values` over their index by permuting which
/// value sits at which index. Under "no trend" the values are exchangeable.
pub fn permutation_slope_test(values: &[f64], permutations: usize, seed: u64) -> SlopeTest {
    let xs: Vec<f64> = (0..values.len()).map(|i| i as f64).collect();
    let observed = least_squares_slope(&xs, values);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut shuffled = values.to_vec();
    // tolerance so that exact ties from floating-point noise count as extreme
    let threshold = observed.abs() - 1e-12;
    let mut extreme = 0usize;
    for _ in 0..permutations {
        shuffled.shuffle(&mut rng);
        if least_squares_slope(&xs, &shuffled).abs() >= threshold {
            extreme += 1;
        }
    }
    SlopeTest {
        slope: observed,
        p_value: (1 + extreme) as f64 / (1 + permutations) as f64,
        permutations,
    }
}
