//! Trainable control branch: condition encoder, a copy of the backbone's
//! encoder and middle block, and the zero convolutions that feed its
//! features back into the frozen decoder.

use std::collections::BTreeMap;

use crate::backbone::{self, Denoiser, DenoiserConfig, Injection, TextEmbedding, BACKBONE_PREFIX};
use crate::enhance::BiasSpec;
use crate::error::{Error, Result};
use crate::nn::{self, ParamStore};
use crate::tensor::{Seed, Tensor};

pub const CONTROL_PREFIX: &str = "control";

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ConditionKind {
    HandMeshRender,
    SyntheticSilhouette,
}

/// Condition image `c_i`, values clamped to `[0, 1]`.
#[derive(Debug, Clone)]
pub struct ConditionImage {
    pub pixels: Tensor,
    pub kind: ConditionKind,
}

impl ConditionImage {
    pub fn new(pixels: Tensor, kind: ConditionKind) -> Result<ConditionImage> {
        if pixels.rank() != 3 {
            return Err(Error::ShapeMismatch(format!("condition image must be [C×H×W], got {:?}", pixels.shape())));
        }
        let clamped: Vec<f64> = pixels.data().iter().map(|v| if v.is_nan() { 0.0 } else { v.clamp(0.0, 1.0) }).collect();
        Ok(ConditionImage { pixels: Tensor::from_vec(pixels.shape(), clamped)?, kind })
    }
}

/// Control-branch features and the attention maps recorded while producing them.
#[derive(Debug, Clone)]
pub struct ControlOutput {
    /// `f_c` at every decoder skip resolution, highest first.
    pub skips: Vec<Tensor>,
    /// Middle-block `f_c`.
    pub middle: Tensor,
    /// Head-averaged `psi_r` keyed by resolution `r`, each `[r²×r²]`.
    pub self_maps: BTreeMap<usize, Tensor>,
    /// Head-averaged cross-attention maps keyed by layer name.
    pub cross_maps: Vec<(String, Tensor)>,
    pub fingerprint: u64,
}

impl ControlOutput {
    /// Skips followed by the middle feature.
    pub fn levels(&self) -> Vec<Tensor> {
        let mut v = self.skips.clone();
        v.push(self.middle.clone());
        v
    }
}

#[derive(Debug, Clone)]
pub struct ControlNet {
    pub config: DenoiserConfig,
    pub image_extent: usize,
    pub condition_channels: usize,
    pub hint_width: usize,
    pub params: ParamStore,
}

/// Locks the backbone: every parameter becomes a non-trainable leaf.
pub fn freeze_backbone(denoiser: &mut Denoiser) {
    denoiser.params.set_trainable(false);
}

fn zero_conv_names(cfg: &DenoiserConfig) -> Vec<String> {
    let mut names: Vec<String> = (0..cfg.levels() - 1).map(|i| format!("{CONTROL_PREFIX}.zero.skip{i}")).collect();
    names.push(format!("{CONTROL_PREFIX}.zero.mid"));
    names
}

impl ControlNet {
    /// Builds the branch from a backbone: the encoder, middle block and time
    /// MLP are exact copies; the condition encoder ends in a zero conv and
    /// every output projection is a zero 1×1 conv.
    pub fn from_backbone(
        denoiser: &Denoiser,
        image_extent: usize,
        condition_channels: usize,
        seed: Seed,
    ) -> Result<ControlNet> {
        let cfg = denoiser.config.clone();
        let factor = image_extent / cfg.latent_extent;
        if image_extent % cfg.latent_extent != 0 || !factor.is_power_of_two() {
            return Err(Error::ConfigMismatch(format!(
                "image extent {image_extent} is not a power-of-two multiple of latent extent {}",
                cfg.latent_extent
            )));
        }
        let mut params = ParamStore::new();
        let src = format!("{BACKBONE_PREFIX}.");
        let copied = ["time.", "conv_in.", "enc", "mid."];
        for (name, t) in denoiser.params.iter() {
            let rest = &name[src.len()..];
            if name.starts_with(&src) && copied.iter().any(|c| rest.starts_with(c)) {
                params.insert(format!("{CONTROL_PREFIX}.{rest}"), t.detach());
            }
        }
        let hint_width = 8;
        let mut rng = seed.rng();
        let downs = factor.trailing_zeros() as usize;
        let mut c_in = condition_channels;
        for j in 0..downs.max(3) {
            let k = if j < downs { 4 } else { 3 };
            nn::add_conv(&mut params, &format!("{CONTROL_PREFIX}.hint.conv{j}"), c_in, hint_width, k, &mut rng);
            c_in = hint_width;
        }
        nn::add_zero_conv(&mut params, &format!("{CONTROL_PREFIX}.hint.zero"), hint_width, cfg.latent_channels, 3);
        let widths: Vec<usize> = cfg.channels.clone();
        for (i, name) in zero_conv_names(&cfg).iter().enumerate() {
            let c = if i < cfg.levels() - 1 { widths[i] } else { *widths.last().unwrap() };
            nn::add_zero_conv(&mut params, name, c, c, 1);
        }
        params.set_trainable(true);
        Ok(ControlNet { config: cfg, image_extent, condition_channels, hint_width, params })
    }

    /// `c_f = E_n(c_i)`: strided convs with SiLU, then a zero-initialized conv.
    pub fn encode_condition(&self, image: &ConditionImage) -> Result<Tensor> {
        let want = [self.condition_channels, self.image_extent, self.image_extent];
        if image.pixels.shape() != want {
            return Err(Error::ShapeMismatch(format!("condition {:?}, expected {want:?}", image.pixels.shape())));
        }
        let downs = (self.image_extent / self.config.latent_extent).trailing_zeros() as usize;
        let mut h = image.pixels.clone();
        for j in 0..downs.max(3) {
            let (stride, pad) = if j < downs { (2, 1) } else { (1, 1) };
            h = nn::conv(&self.params, &format!("{CONTROL_PREFIX}.hint.conv{j}"), &h, stride, pad)?.silu();
        }
        nn::conv(&self.params, &format!("{CONTROL_PREFIX}.hint.zero"), &h, 1, 1)
    }

    /// Runs the trainable copy on `z_t + c_f`, recording attention maps and
    /// applying `bias` inside its cross-attention layers.
    pub fn control_forward(
        &self,
        z_t: &Tensor,
        t: usize,
        text: &TextEmbedding,
        c_f: &Tensor,
        bias: Option<&BiasSpec>,
    ) -> Result<ControlOutput> {
        let latent = self.config.latent_shape();
        if z_t.shape() != latent || c_f.shape() != latent {
            return Err(Error::ShapeMismatch(format!(
                "z_t {:?} and c_f {:?} must both be {latent:?}",
                z_t.shape(),
                c_f.shape()
            )));
        }
        let x = z_t.add(c_f)?;
        let enc = backbone::run_encoder(&self.params, CONTROL_PREFIX, &self.config, &x, t, text, bias)?;
        Ok(ControlOutput {
            skips: enc.skips,
            middle: enc.middle,
            self_maps: enc.self_maps,
            cross_maps: enc.cross_maps,
            fingerprint: self.config.fingerprint(),
        })
    }

    /// Applies the zero convolutions to (possibly refined) control features.
    pub fn zero_project(&self, out: &ControlOutput) -> Result<Injection> {
        if out.fingerprint != self.config.fingerprint() {
            return Err(Error::ConfigMismatch("control output from a different config".into()));
        }
        let names = zero_conv_names(&self.config);
        let levels = out.levels();
        if levels.len() != names.len() {
            return Err(Error::LevelMismatch(format!("{} feature levels for {} zero convs", levels.len(), names.len())));
        }
        let mut projected = Vec::with_capacity(levels.len());
        for (f, name) in levels.iter().zip(&names) {
            projected.push(nn::conv(&self.params, name, f, 1, 0)?);
        }
        let middle = projected.pop().expect("at least the middle level");
        Ok(Injection { skips: projected, middle, fingerprint: out.fingerprint })
    }

    pub fn zero_conv_names(&self) -> Vec<String> {
        zero_conv_names(&self.config)
    }
}

/// `f' = Z(f'_c) + f` per level, with `zero_convs` the per-level 1×1 kernels
/// and biases.
pub fn inject(zero_convs: &[(Tensor, Tensor)], refined: &[Tensor], features: &[Tensor]) -> Result<Vec<Tensor>> {
    if refined.len() != features.len() || refined.len() != zero_convs.len() {
        return Err(Error::LevelMismatch(format!(
            "{} refined levels, {} backbone levels, {} zero convs",
            refined.len(),
            features.len(),
            zero_convs.len()
        )));
    }
    refined
        .iter()
        .zip(features)
        .zip(zero_convs)
        .enumerate()
        .map(|(i, ((fc, f), (w, b)))| {
            let z = fc.conv2d(w, Some(b), 1, 0)?;
            if z.shape() != f.shape() {
                return Err(Error::LevelMismatch(format!("level {i}: {:?} vs {:?}", z.shape(), f.shape())));
            }
            Ok(z.add(f)?)
        })
        .collect()
}
