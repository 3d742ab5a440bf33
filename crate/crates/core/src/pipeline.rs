//! The full noise predictor: frozen backbone + control branch with fusion
//! and hand-token biased cross-attention.

use crate::backbone::{sample_with, Denoiser, DenoiserConfig, NoiseSchedule, TextEmbedding};
use crate::control::{freeze_backbone, ConditionImage, ControlNet, ControlOutput};
use crate::enhance::{tag_hand_tokens, BiasSpec, IndexRule, DEFAULT_ALPHA};
use crate::error::Result;
use crate::fusion::{fuse_and_inject, FusionConfig};
use crate::tensor::{Seed, Tensor};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EnhanceConfig {
    pub alpha: f64,
    pub rule: IndexRule,
}

impl Default for EnhanceConfig {
    fn default() -> Self {
        EnhanceConfig { alpha: DEFAULT_ALPHA, rule: IndexRule::Union }
    }
}

#[derive(Debug, Clone)]
pub struct SesaModel {
    pub denoiser: Denoiser,
    pub control: ControlNet,
    pub fusion: FusionConfig,
    pub enhance: EnhanceConfig,
}

impl SesaModel {
    /// Fresh backbone from `seed`, frozen, with a control branch copied from it.
    pub fn new(config: DenoiserConfig, image_extent: usize, condition_channels: usize, seed: Seed) -> Result<SesaModel> {
        let mut denoiser = Denoiser::new(config, seed.derive(0))?;
        freeze_backbone(&mut denoiser);
        let control = ControlNet::from_backbone(&denoiser, image_extent, condition_channels, seed.derive(1))?;
        Ok(SesaModel { denoiser, control, fusion: FusionConfig::default(), enhance: EnhanceConfig::default() })
    }

    pub fn encode_text(&self, prompt: &str) -> Result<TextEmbedding> {
        self.denoiser.encode_text(prompt)
    }

    /// Bias over the prompt's hand tokens, `None` when it would be a no-op.
    pub fn bias_for(&self, text: &TextEmbedding) -> Result<Option<BiasSpec>> {
        if self.enhance.alpha == 0.0 {
            return Ok(None);
        }
        let tagged = tag_hand_tokens(&text.token_strings.join(" "), self.enhance.rule)?;
        let spec = BiasSpec::new(self.enhance.alpha, tagged.index_list)?;
        Ok((!spec.is_noop()).then_some(spec))
    }

    /// Control features before fusion, given an encoded condition `c_f`.
    pub fn control_output(&self, z_t: &Tensor, t: usize, text: &TextEmbedding, c_f: &Tensor) -> Result<ControlOutput> {
        let bias = self.bias_for(text)?;
        self.control.control_forward(z_t, t, text, c_f, bias.as_ref())
    }

    /// `eps_hat(z_t, t, c_t, c_f)` for a single latent.
    pub fn predict_eps_with(&self, z_t: &Tensor, t: usize, text: &TextEmbedding, c_f: &Tensor) -> Result<Tensor> {
        let out = self.control_output(z_t, t, text, c_f)?;
        let fused = fuse_and_inject(&out, &self.fusion)?;
        let injection = self.control.zero_project(&fused)?;
        self.denoiser.denoise(z_t, t, text, Some(&injection))
    }

    pub fn predict_eps(&self, z_t: &Tensor, t: usize, text: &TextEmbedding, condition: &ConditionImage) -> Result<Tensor> {
        let c_f = self.control.encode_condition(condition)?;
        self.predict_eps_with(z_t, t, text, &c_f)
    }

    /// Ancestral sampling over `steps` respaced timesteps. Without a
    /// condition only the frozen backbone is used.
    pub fn sample(
        &self,
        sched: &NoiseSchedule,
        text: &TextEmbedding,
        condition: Option<&ConditionImage>,
        steps: usize,
        clip: Option<f64>,
        seed: Seed,
    ) -> Result<Tensor> {
        let c_f = condition.map(|c| self.control.encode_condition(c)).transpose()?.map(|c| c.detach());
        let shape = self.denoiser.config.latent_shape();
        let mut rng = seed.rng();
        sample_with(sched, &shape, steps, clip, &mut rng, |z, t| {
            let eps = match &c_f {
                Some(c_f) => self.predict_eps_with(z, t, text, c_f)?,
                None => self.denoiser.denoise(z, t, text, None)?,
            };
            Ok(eps.detach())
        })
    }
}
