use rand::seq::index::sample;
use rand::seq::SliceRandom;
use sesa_core::Seed;

use crate::{check_pair, FeatureSet, MetricError, Result};

/// `(xᵀy / d + 1)³`.
pub fn poly_kernel(x: &[f64], y: &[f64]) -> f64 {
    let dot: f64 = x.iter().zip(y).map(|(a, b)| a * b).sum();
    (dot / x.len() as f64 + 1.0).powi(3)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct KidConfig {
    /// `None` uses each whole set once.
    pub subset_size: Option<usize>,
    pub subsets: usize,
    pub seed: u64,
}

impl Default for KidConfig {
    fn default() -> Self {
        KidConfig { subset_size: None, subsets: 1, seed: 0 }
    }
}

fn ordered_sum(mut v: Vec<f64>) -> f64 {
    // Summing in value order makes the cross term independent of argument order.
    v.sort_by(f64::total_cmp);
    v.iter().sum()
}

/// Unbiased MMD² between row sets `x` and `y` under [`poly_kernel`].
pub fn mmd2_unbiased(x: &[&[f64]], y: &[&[f64]]) -> f64 {
    let within = |s: &[&[f64]]| {
        let n = s.len() as f64;
        let mut vals = Vec::with_capacity(s.len() * s.len());
        for (i, a) in s.iter().enumerate() {
            for (j, b) in s.iter().enumerate() {
                if i != j {
                    vals.push(poly_kernel(a, b));
                }
            }
        }
        ordered_sum(vals) / (n * (n - 1.0))
    };
    let mut cross = Vec::with_capacity(x.len() * y.len());
    for a in x {
        for b in y {
            cross.push(poly_kernel(a, b));
        }
    }
    let cross = ordered_sum(cross) / (x.len() * y.len()) as f64;
    within(x) + within(y) - 2.0 * cross
}

fn fingerprint(f: &FeatureSet) -> u64 {
    f.vectors.data().iter().fold(0xcbf2_9ce4_8422_2325u64, |h, v| (h ^ v.to_bits()).wrapping_mul(0x100_0000_01b3))
}

fn rows(f: &FeatureSet) -> Vec<&[f64]> {
    (0..f.len()).map(|i| f.row(i)).collect()
}

/// Kernel distance, averaged over subsets. Subset indices for a set are drawn
/// from a stream keyed by its contents, so `kid(a, b) == kid(b, a)`.
pub fn kid(a: &FeatureSet, b: &FeatureSet, cfg: &KidConfig) -> Result<f64> {
    check_pair(a, b, 2)?;
    let (ra, rb) = (rows(a), rows(b));
    let Some(m) = cfg.subset_size else {
        return Ok(mmd2_unbiased(&ra, &rb));
    };
    if m < 2 || cfg.subsets == 0 {
        return Err(MetricError::TooFewSamples { got: m.min(cfg.subsets), need: 2 });
    }
    let m = m.min(a.len()).min(b.len());
    let mut rng_a = Seed(cfg.seed ^ fingerprint(a)).rng();
    let mut rng_b = Seed(cfg.seed ^ fingerprint(b)).rng();
    let mut vals = Vec::with_capacity(cfg.subsets);
    for _ in 0..cfg.subsets {
        let sa: Vec<&[f64]> = sample(&mut rng_a, ra.len(), m).iter().map(|i| ra[i]).collect();
        let sb: Vec<&[f64]> = sample(&mut rng_b, rb.len(), m).iter().map(|i| rb[i]).collect();
        vals.push(mmd2_unbiased(&sa, &sb));
    }
    Ok(ordered_sum(vals) / cfg.subsets as f64)
}

/// Standard deviation of the whole-set KID under random relabelling of the
/// pooled samples: the spread expected when both sets share a distribution.
pub fn kid_null_std(a: &FeatureSet, b: &FeatureSet, permutations: usize, seed: u64) -> Result<f64> {
    check_pair(a, b, 2)?;
    if permutations < 2 {
        return Err(MetricError::TooFewSamples { got: permutations, need: 2 });
    }
    let mut pooled: Vec<&[f64]> = rows(a);
    pooled.extend(rows(b));
    let mut rng = Seed(seed).rng();
    let vals: Vec<f64> = (0..permutations)
        .map(|_| {
            pooled.shuffle(&mut rng);
            let (x, y) = pooled.split_at(a.len());
            mmd2_unbiased(x, y)
        })
        .collect();
    let mean = vals.iter().sum::<f64>() / vals.len() as f64;
    let var = vals.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (vals.len() - 1) as f64;
    Ok(var.sqrt())
}
