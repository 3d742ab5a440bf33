use serde::{Deserialize, Serialize};
use sesa_core::control::ConditionImage;
use sesa_core::fusion::FusionConfig;
use sesa_core::image::{from_latent, luminance};
use sesa_core::pipeline::SesaModel;
use sesa_core::{Seed, Tensor};

use crate::config::RunConfig;
use crate::error::Result;
use crate::synth::SKIN_THRESHOLD;

/// Written next to every sampled image.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Sidecar {
    pub seed: u64,
    pub alpha: f64,
    pub rule: String,
    pub fusion: bool,
    pub fusion_normalize: bool,
    pub fusion_per_level: bool,
    pub fusion_transpose: bool,
    pub steps: usize,
    pub clip: f64,
    pub prompt: String,
    pub condition: Option<String>,
    pub checkpoint_epoch: usize,
}

impl Sidecar {
    pub fn new(cfg: &RunConfig, model: &SesaModel, seed: u64, prompt: &str, condition: Option<String>, epoch: usize) -> Sidecar {
        let f: FusionConfig = model.fusion;
        Sidecar {
            seed,
            alpha: model.enhance.alpha,
            rule: model.enhance.rule.to_string(),
            fusion: f.enabled,
            fusion_normalize: f.normalize,
            fusion_per_level: f.per_level,
            fusion_transpose: f.transpose,
            steps: cfg.schedule.sample_steps,
            clip: cfg.schedule.clip,
            prompt: prompt.to_string(),
            condition,
            checkpoint_epoch: epoch,
        }
    }
}

/// Samples a latent and decodes it to a `[3×E×E]` image in `[0, 1]`.
pub fn sample_image(cfg: &RunConfig, model: &SesaModel, prompt: &str, condition: Option<&ConditionImage>, seed: u64) -> Result<Tensor> {
    let sched = cfg.noise_schedule()?;
    let text = model.encode_text(prompt)?;
    let z = model.sample(&sched, &text, condition, cfg.schedule.sample_steps, cfg.clip(), Seed(seed))?;
    Ok(from_latent(&z, cfg.latent_factor())?)
}

/// `[1×H×W]` mask of pixels brighter than the skin threshold.
pub fn threshold_silhouette(img: &Tensor, threshold: f64) -> Result<Tensor> {
    let (h, w) = (img.shape()[1], img.shape()[2]);
    let data = luminance(img)?.into_iter().map(|l| if l > threshold { 1.0 } else { 0.0 }).collect();
    Ok(Tensor::from_vec(&[1, h, w], data)?)
}

/// Mean absolute difference between the thresholded image and a silhouette.
pub fn silhouette_mad(img: &Tensor, silhouette: &Tensor) -> Result<f64> {
    let mask = threshold_silhouette(img, SKIN_THRESHOLD)?;
    let target = threshold_silhouette(silhouette, 0.5)?;
    Ok(mask.sub(&target)?.data().iter().map(|d| d.abs()).sum::<f64>() / mask.numel() as f64)
}
