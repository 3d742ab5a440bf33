//! The frozen denoiser: a small UNet with residual blocks, pre-norm
//! transformer blocks (self- and cross-attention) and a sinusoidal time
//! embedding, plus the noise schedule, training objective and sampler.
//!
//! Scale mapping used by the default configuration:
//!
//! | role                  | full-size model   | this model     |
//! |-----------------------|-------------------|----------------|
//! | image extent          | 512               | 64             |
//! | latent extent         | 64                | 16             |
//! | attention resolutions | 64, 32, 16, 8     | 16, 8, 4       |
//! | fusion target         | 8                 | 4              |

mod schedule;
pub mod text;

use std::collections::BTreeMap;

use rand::Rng;

pub use schedule::{draw_noise, eps_from_z0, q_sample, sample_with, training_loss, NoiseSchedule, NoisedItem};
pub use text::TextEmbedding;

use crate::enhance::BiasSpec;
use crate::error::{Error, Result};
use crate::nn::{self, ParamStore};
use crate::tensor::{Seed, Tensor};

pub const BACKBONE_PREFIX: &str = "backbone";

#[derive(Debug, Clone, PartialEq)]
pub struct DenoiserConfig {
    pub latent_extent: usize,
    pub latent_channels: usize,
    /// Channel width per level; the last level is the middle block.
    pub channels: Vec<usize>,
    /// Spatial extent per level, a halving chain starting at `latent_extent`.
    pub attention_resolutions: Vec<usize>,
    pub heads: usize,
    pub text_width: usize,
    pub time_width: usize,
    pub max_tokens: usize,
}

impl Default for DenoiserConfig {
    fn default() -> Self {
        DenoiserConfig {
            latent_extent: 16,
            latent_channels: 3,
            channels: vec![8, 16, 16],
            attention_resolutions: vec![16, 8, 4],
            heads: 2,
            text_width: 16,
            time_width: 16,
            max_tokens: 16,
        }
    }
}

impl DenoiserConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::ConfigMismatch(m));
        let res = &self.attention_resolutions;
        if res.is_empty() || res[0] != self.latent_extent {
            return bad(format!("attention resolutions {res:?} must start at latent extent {}", self.latent_extent));
        }
        if res.windows(2).any(|w| w[0] != 2 * w[1]) || *res.last().unwrap() == 0 {
            return bad(format!("attention resolutions {res:?} must halve level by level"));
        }
        if self.channels.len() != res.len() {
            return bad(format!("{} channel widths for {} levels", self.channels.len(), res.len()));
        }
        if self.heads == 0 || self.channels.iter().any(|&c| c == 0 || c % self.heads != 0) {
            return bad(format!("channels {:?} must be positive multiples of {} heads", self.channels, self.heads));
        }
        if self.latent_channels == 0 || self.text_width == 0 || self.max_tokens == 0 {
            return bad("latent channels, text width and token limit must be positive".into());
        }
        if self.time_width < 2 || self.time_width % 2 != 0 {
            return bad(format!("time width {} must be even", self.time_width));
        }
        Ok(())
    }

    pub fn levels(&self) -> usize {
        self.attention_resolutions.len()
    }

    /// Target resolution for attention fusion (the smallest level).
    pub fn target_resolution(&self) -> usize {
        *self.attention_resolutions.last().expect("validated")
    }

    pub fn latent_shape(&self) -> [usize; 3] {
        [self.latent_channels, self.latent_extent, self.latent_extent]
    }

    /// Stable identity used to reject control outputs from another architecture.
    pub fn fingerprint(&self) -> u64 {
        let s = format!("{self:?}");
        s.bytes().fold(0xcbf2_9ce4_8422_2325u64, |h, b| (h ^ b as u64).wrapping_mul(0x100_0000_01b3))
    }
}

/// Everything the encoder half produced for one sample.
#[derive(Debug, Clone)]
pub struct EncoderOut {
    /// One skip feature per non-middle level, highest resolution first.
    pub skips: Vec<Tensor>,
    pub middle: Tensor,
    /// Head-averaged self-attention map per resolution.
    pub self_maps: BTreeMap<usize, Tensor>,
    /// Head-averaged cross-attention map per layer name.
    pub cross_maps: Vec<(String, Tensor)>,
}

/// Residuals added to the decoder's skip inputs and middle feature.
#[derive(Debug, Clone)]
pub struct Injection {
    pub skips: Vec<Tensor>,
    pub middle: Tensor,
    pub fingerprint: u64,
}

pub(crate) fn add_time_mlp(store: &mut ParamStore, prefix: &str, width: usize, rng: &mut impl Rng) {
    nn::add_linear(store, &format!("{prefix}.time.l1"), width, 2 * width, true, rng);
    nn::add_linear(store, &format!("{prefix}.time.l2"), 2 * width, width, true, rng);
}

pub fn timestep_features(t: usize, width: usize) -> Tensor {
    let half = width / 2;
    let mut v = Vec::with_capacity(width);
    for k in 0..half {
        let freq = (-(10_000f64.ln()) * k as f64 / half as f64).exp();
        v.push((t as f64 * freq).sin());
    }
    for k in 0..half {
        let freq = (-(10_000f64.ln()) * k as f64 / half as f64).exp();
        v.push((t as f64 * freq).cos());
    }
    Tensor::from_vec(&[1, width], v).expect("width > 0")
}

pub(crate) fn time_embedding(store: &ParamStore, prefix: &str, t: usize, width: usize) -> Result<Tensor> {
    let h = nn::linear(store, &format!("{prefix}.time.l1"), &timestep_features(t, width))?;
    nn::linear(store, &format!("{prefix}.time.l2"), &h.silu())
}

/// Adds the encoder-half parameters (time MLP, input conv, levels, middle)
/// under `prefix`. The control branch copies exactly this set.
pub(crate) fn add_encoder_params(store: &mut ParamStore, prefix: &str, cfg: &DenoiserConfig, rng: &mut impl Rng) {
    add_time_mlp(store, prefix, cfg.time_width, rng);
    let ch = &cfg.channels;
    nn::add_conv(store, &format!("{prefix}.conv_in"), cfg.latent_channels, ch[0], 3, rng);
    for i in 0..cfg.levels() - 1 {
        nn::add_res_block(store, &format!("{prefix}.enc{i}.res"), ch[i], ch[i], cfg.time_width, rng);
        nn::add_transformer(store, &format!("{prefix}.enc{i}.attn"), ch[i], cfg.text_width, rng);
        nn::add_conv(store, &format!("{prefix}.enc{i}.down"), ch[i], ch[i + 1], 2, rng);
    }
    let last = ch[cfg.levels() - 1];
    nn::add_res_block(store, &format!("{prefix}.mid.res1"), last, last, cfg.time_width, rng);
    nn::add_transformer(store, &format!("{prefix}.mid.attn"), last, cfg.text_width, rng);
    nn::add_res_block(store, &format!("{prefix}.mid.res2"), last, last, cfg.time_width, rng);
}

/// Encoder and middle block on a single `[C×E×E]` input.
pub(crate) fn run_encoder(
    store: &ParamStore,
    prefix: &str,
    cfg: &DenoiserConfig,
    x: &Tensor,
    t: usize,
    text: &TextEmbedding,
    bias: Option<&BiasSpec>,
) -> Result<EncoderOut> {
    let temb = time_embedding(store, prefix, t, cfg.time_width)?;
    let mut h = nn::conv(store, &format!("{prefix}.conv_in"), x, 1, 1)?;
    let mut skips = Vec::new();
    let mut self_maps = BTreeMap::new();
    let mut cross_maps = Vec::new();
    for i in 0..cfg.levels() - 1 {
        h = nn::res_block(store, &format!("{prefix}.enc{i}.res"), &h, &temb)?;
        let name = format!("{prefix}.enc{i}.attn");
        let out = nn::transformer(store, &name, &h, &text.embeddings, cfg.heads, bias)?;
        h = out.features;
        self_maps.insert(cfg.attention_resolutions[i], out.self_attn);
        cross_maps.push((name, out.cross_attn));
        skips.push(h.clone());
        h = nn::conv(store, &format!("{prefix}.enc{i}.down"), &h, 2, 0)?;
    }
    h = nn::res_block(store, &format!("{prefix}.mid.res1"), &h, &temb)?;
    let name = format!("{prefix}.mid.attn");
    let out = nn::transformer(store, &name, &h, &text.embeddings, cfg.heads, bias)?;
    self_maps.insert(cfg.target_resolution(), out.self_attn);
    cross_maps.push((name, out.cross_attn));
    let middle = nn::res_block(store, &format!("{prefix}.mid.res2"), &out.features, &temb)?;
    Ok(EncoderOut { skips, middle, self_maps, cross_maps })
}

/// The frozen text-conditioned noise predictor.
#[derive(Debug, Clone)]
pub struct Denoiser {
    pub config: DenoiserConfig,
    pub params: ParamStore,
}

impl Denoiser {
    pub fn new(config: DenoiserConfig, seed: Seed) -> Result<Denoiser> {
        config.validate()?;
        let mut rng = seed.rng();
        let mut params = ParamStore::new();
        let p = BACKBONE_PREFIX;
        let vocab = text::vocabulary().len();
        params.insert(format!("{p}.text.embed"), Tensor::randn(&[vocab, config.text_width], &mut rng));
        add_encoder_params(&mut params, p, &config, &mut rng);
        let ch = &config.channels;
        for i in (0..config.levels() - 1).rev() {
            nn::add_res_block(&mut params, &format!("{p}.dec{i}.res"), ch[i + 1] + ch[i], ch[i], config.time_width, &mut rng);
            if i > 0 {
                nn::add_transformer(&mut params, &format!("{p}.dec{i}.attn"), ch[i], config.text_width, &mut rng);
            }
        }
        nn::add_conv(&mut params, &format!("{p}.conv_out"), ch[0], config.latent_channels, 3, &mut rng);
        params.set_trainable(false);
        Ok(Denoiser { config, params })
    }

    pub fn encode_text(&self, prompt: &str) -> Result<TextEmbedding> {
        let table = self.params.get(&format!("{BACKBONE_PREFIX}.text.embed"))?;
        text::embed(table, prompt, self.config.max_tokens)
    }

    pub fn encoder(&self, x: &Tensor, t: usize, text: &TextEmbedding) -> Result<EncoderOut> {
        run_encoder(&self.params, BACKBONE_PREFIX, &self.config, x, t, text, None)
    }

    /// Predicts the noise in `z_t`, either `[C×E×E]` or a batch `[N×C×E×E]`
    /// sharing `t` and the prompt. With an injection, each decoder skip input
    /// and the middle feature become `residual + feature`.
    pub fn denoise(&self, z_t: &Tensor, t: usize, text: &TextEmbedding, control: Option<&Injection>) -> Result<Tensor> {
        let latent = self.config.latent_shape();
        if z_t.rank() == 4 && z_t.shape()[1..] == latent {
            let n = z_t.shape()[0];
            let mut outs = Vec::with_capacity(n);
            for i in 0..n {
                let zi = z_t.narrow(0, i, 1)?.reshape(&latent)?;
                outs.push(self.denoise(&zi, t, text, control)?.reshape(&[1, latent[0], latent[1], latent[2]])?);
            }
            return Ok(Tensor::concat(&outs, 0)?);
        }
        if z_t.shape() != latent {
            return Err(Error::ShapeMismatch(format!("latent {:?}, expected {latent:?}", z_t.shape())));
        }
        if let Some(inj) = control {
            if inj.fingerprint != self.config.fingerprint() {
                return Err(Error::ConfigMismatch("control branch was built for a different denoiser config".into()));
            }
            if inj.skips.len() != self.config.levels() - 1 {
                return Err(Error::LevelMismatch(format!("{} skip residuals for {} levels", inj.skips.len(), self.config.levels() - 1)));
            }
        }
        let p = BACKBONE_PREFIX;
        let enc = self.encoder(z_t, t, text)?;
        let temb = time_embedding(&self.params, p, t, self.config.time_width)?;
        let mut h = match control {
            Some(inj) => enc.middle.add(&inj.middle)?,
            None => enc.middle,
        };
        for i in (0..self.config.levels() - 1).rev() {
            let skip = match control {
                Some(inj) => enc.skips[i].add(&inj.skips[i])?,
                None => enc.skips[i].clone(),
            };
            h = Tensor::concat(&[h.upsample_nearest2d(2)?, skip], 0)?;
            h = nn::res_block(&self.params, &format!("{p}.dec{i}.res"), &h, &temb)?;
            if i > 0 {
                h = nn::transformer(&self.params, &format!("{p}.dec{i}.attn"), &h, &text.embeddings, self.config.heads, None)?.features;
            }
        }
        nn::conv(&self.params, &format!("{p}.conv_out"), &h.silu(), 1, 1)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> Denoiser {
        let cfg = DenoiserConfig { latent_extent: 8, channels: vec![4, 8], attention_resolutions: vec![8, 4], ..Default::default() };
        Denoiser::new(cfg, Seed(1)).unwrap()
    }

    #[test]
    fn config_validation() {
        assert!(DenoiserConfig::default().validate().is_ok());
        let bad = DenoiserConfig { attention_resolutions: vec![16, 4], channels: vec![8, 8], ..Default::default() };
        assert!(bad.validate().is_err());
        let bad = DenoiserConfig { channels: vec![8, 16], ..Default::default() };
        assert!(bad.validate().is_err());
        let bad = DenoiserConfig { heads: 3, ..Default::default() };
        assert!(bad.validate().is_err());
    }

    #[test]
    fn output_shape_matches_latent() {
        let d = Denoiser::new(DenoiserConfig::default(), Seed(3)).unwrap();
        let text = d.encode_text("a hand holding a cup").unwrap();
        let z = Tensor::randn(&d.config.latent_shape(), &mut Seed(4).rng());
        let eps = d.denoise(&z, 10, &text, None).unwrap();
        assert_eq!(eps.shape(), &[3, 16, 16]);
        assert!(eps.all_finite());
        assert!(matches!(d.denoise(&Tensor::zeros(&[3, 8, 8]), 1, &text, None), Err(Error::ShapeMismatch(_))));
    }

    #[test]
    fn batched_denoise_matches_per_sample() {
        let d = small();
        let text = d.encode_text("hands").unwrap();
        let mut rng = Seed(5).rng();
        let a = Tensor::randn(&[3, 8, 8], &mut rng);
        let b = Tensor::randn(&[3, 8, 8], &mut rng);
        let batch = Tensor::concat(&[a.reshape(&[1, 3, 8, 8]).unwrap(), b.reshape(&[1, 3, 8, 8]).unwrap()], 0).unwrap();
        let out = d.denoise(&batch, 7, &text, None).unwrap();
        assert_eq!(out.shape(), &[2, 3, 8, 8]);
        let ea = d.denoise(&a, 7, &text, None).unwrap();
        let eb = d.denoise(&b, 7, &text, None).unwrap();
        assert_eq!(&out.data()[..192], ea.data());
        assert_eq!(&out.data()[192..], eb.data());
    }

    #[test]
    fn encoder_records_one_map_per_resolution() {
        let d = Denoiser::new(DenoiserConfig::default(), Seed(3)).unwrap();
        let text = d.encode_text("a hand").unwrap();
        let enc = d.encoder(&Tensor::zeros(&[3, 16, 16]), 5, &text).unwrap();
        assert_eq!(enc.self_maps.keys().copied().collect::<Vec<_>>(), vec![4, 8, 16]);
        for (r, m) in &enc.self_maps {
            assert_eq!(m.shape(), &[r * r, r * r]);
        }
        assert_eq!(enc.skips.len(), 2);
        assert_eq!(enc.middle.shape(), &[16, 4, 4]);
    }

    #[test]
    fn backbone_is_frozen_at_construction() {
        let d = small();
        assert!(d.params.iter().all(|(_, t)| !t.requires_grad()));
        assert!(d.params.names().all(|n| n.starts_with("backbone.")));
        assert!(d.params.contains("backbone.enc0.res.conv1.w"));
    }
}
