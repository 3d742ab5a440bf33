//! Hierarchical structural fusion: self-attention maps from every encoder
//! resolution are max-pooled to the coarsest one, summed, and used to mix
//! the control features spatially before they reach the zero convolutions.

use std::collections::BTreeMap;

use crate::control::ControlOutput;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct FusionConfig {
    pub enabled: bool,
    /// Row-renormalize the summed map before mixing.
    pub normalize: bool,
    /// Refine every level with its own pooled map instead of only the middle feature.
    pub per_level: bool,
    /// Mix with `psi'` instead of `psi'ᵀ` (output indexed by key).
    pub transpose: bool,
}

impl Default for FusionConfig {
    fn default() -> Self {
        FusionConfig { enabled: true, normalize: true, per_level: false, transpose: false }
    }
}

impl FusionConfig {
    pub fn disabled() -> Self {
        FusionConfig { enabled: false, ..Default::default() }
    }
}

/// `psi_r` keyed by resolution; the target is the smallest resolution.
#[derive(Debug, Clone)]
pub struct AttentionPyramid {
    maps: BTreeMap<usize, Tensor>,
}

const ROW_TOL: f64 = 1e-6;

impl AttentionPyramid {
    pub fn new(maps: BTreeMap<usize, Tensor>) -> Result<AttentionPyramid> {
        if maps.is_empty() {
            return Err(Error::EmptyPyramid);
        }
        let res: Vec<usize> = maps.keys().copied().collect();
        for w in res.windows(2) {
            if w[1] != 2 * w[0] {
                return Err(Error::ResolutionMismatch(format!("resolutions {res:?} are not a halving chain")));
            }
        }
        for (&r, m) in &maps {
            if m.shape() != [r * r, r * r] {
                return Err(Error::ResolutionMismatch(format!("map at r={r} has shape {:?}", m.shape())));
            }
            for (i, row) in m.data().chunks(r * r).enumerate() {
                let s: f64 = row.iter().sum();
                if (s - 1.0).abs() > ROW_TOL || row.iter().any(|v| *v < 0.0) {
                    return Err(Error::InvalidRange(format!("map at r={r}, row {i} is not a distribution (sum {s})")));
                }
            }
        }
        Ok(AttentionPyramid { maps })
    }

    pub fn from_maps(maps: impl IntoIterator<Item = (usize, Tensor)>) -> Result<AttentionPyramid> {
        let mut m = BTreeMap::new();
        for (r, t) in maps {
            if m.insert(r, t).is_some() {
                return Err(Error::ResolutionMismatch(format!("duplicate resolution {r}")));
            }
        }
        AttentionPyramid::new(m)
    }

    pub fn target_resolution(&self) -> usize {
        *self.maps.keys().next().expect("pyramid is never empty")
    }

    pub fn resolutions(&self) -> impl Iterator<Item = usize> + '_ {
        self.maps.keys().rev().copied()
    }

    pub fn map(&self, r: usize) -> Option<&Tensor> {
        self.maps.get(&r)
    }

    pub fn maps(&self) -> &BTreeMap<usize, Tensor> {
        &self.maps
    }
}

/// Views `psi [r²×r²]` as `[r×r×r×r]` and max-pools every axis by `r/target`.
pub fn pool_map(psi: &Tensor, target: usize) -> Result<Tensor> {
    let n = psi.shape().first().copied().unwrap_or(0);
    let r = (n as f64).sqrt().round() as usize;
    if psi.rank() != 2 || r * r != n || psi.shape()[1] != n {
        return Err(Error::ResolutionMismatch(format!("{:?} is not a square spatial map", psi.shape())));
    }
    if target == 0 || r < target || r % target != 0 || !(r / target).is_power_of_two() {
        return Err(Error::ResolutionMismatch(format!("cannot pool r={r} to {target}")));
    }
    if r == target {
        return Ok(psi.clone());
    }
    let w = r / target;
    let pooled = psi.reshape(&[r, r, r, r])?.max_pool_blocks(&[w, w, w, w])?;
    Ok(pooled.reshape(&[target * target, target * target])?)
}

/// `psi' = sum_r pool_map(psi_r, target)` over the pyramid.
pub fn aggregate(pyramid: &AttentionPyramid) -> Result<Tensor> {
    aggregate_to(pyramid, pyramid.target_resolution())
}

/// Sums every map at resolution `>= target`, pooled to `target`.
pub fn aggregate_to(pyramid: &AttentionPyramid, target: usize) -> Result<Tensor> {
    let mut acc: Option<Tensor> = None;
    for (&r, m) in pyramid.maps.range(target..) {
        let p = pool_map(m, target).map_err(|e| match e {
            Error::ResolutionMismatch(d) => Error::ResolutionMismatch(format!("r={r}: {d}")),
            e => e,
        })?;
        acc = Some(match acc {
            None => p,
            Some(a) => a.add(&p)?,
        });
    }
    acc.ok_or_else(|| Error::ResolutionMismatch(format!("no map at resolution >= {target}")))
}

/// `f'_c`: each output location is a `psi'`-weighted combination of the
/// input locations, `F [C×t²] · psi'ᵀ` (or `F · psi'` when transposed).
pub fn refine(f_c: &Tensor, psi_prime: &Tensor, transpose: bool) -> Result<Tensor> {
    let shape = f_c.shape().to_vec();
    if shape.len() != 3 {
        return Err(Error::ShapeMismatch(format!("feature must be [C×t×t], got {shape:?}")));
    }
    let n = shape[1] * shape[2];
    if psi_prime.shape() != [n, n] {
        return Err(Error::ShapeMismatch(format!("map {:?} for feature {shape:?}", psi_prime.shape())));
    }
    let flat = f_c.reshape(&[shape[0], n])?;
    let mix = if transpose { psi_prime.clone() } else { psi_prime.transpose()? };
    Ok(flat.matmul(&mix)?.reshape(&shape)?)
}

/// The map the middle feature is mixed with, after optional renormalization.
pub fn fused_map(pyramid: &AttentionPyramid, cfg: &FusionConfig) -> Result<Tensor> {
    fused_map_at(pyramid, pyramid.target_resolution(), cfg)
}

fn fused_map_at(pyramid: &AttentionPyramid, target: usize, cfg: &FusionConfig) -> Result<Tensor> {
    let psi = aggregate_to(pyramid, target)?;
    Ok(if cfg.normalize { psi.normalize_rows()? } else { psi })
}

/// Refines the control features ahead of the zero convolutions. Only the
/// middle feature is mixed unless `per_level` is set, in which case each
/// skip at resolution `r` uses the pooled sum of every map with `r' >= r`.
pub fn fuse_and_inject(out: &ControlOutput, cfg: &FusionConfig) -> Result<ControlOutput> {
    if !cfg.enabled {
        return Ok(out.clone());
    }
    let pyramid = AttentionPyramid::new(out.self_maps.clone())?;
    let mut fused = out.clone();
    let target = pyramid.target_resolution();
    if out.middle.shape().get(1) != Some(&target) {
        return Err(Error::ResolutionMismatch(format!("middle feature {:?} vs target {target}", out.middle.shape())));
    }
    fused.middle = refine(&out.middle, &fused_map(&pyramid, cfg)?, cfg.transpose)?;
    if cfg.per_level {
        for skip in fused.skips.iter_mut() {
            let r = skip.shape()[1];
            *skip = refine(skip, &fused_map_at(&pyramid, r, cfg)?, cfg.transpose)?;
        }
    }
    Ok(fused)
}
