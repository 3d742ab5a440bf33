use std::path::Path;

use rand::seq::SliceRandom;
use sesa_core::backbone::{draw_noise, training_loss, TextEmbedding};
use sesa_core::control::{ConditionImage, ConditionKind};
use sesa_core::image::{read_pnm, to_latent};
use sesa_core::pipeline::SesaModel;
use sesa_core::{Seed, TensorError};
use sesa_core::Tensor;

use crate::config::RunConfig;
use crate::error::{HarnessError, Result};
use crate::optim::AdamW;
use crate::synth::read_manifest;

/// Seed streams; epoch `e` shuffles and draws noise from `EPOCH_STREAM + e`.
const MODEL_STREAM: u64 = 0;
const PROBE_STREAM: u64 = 1;
const EPOCH_STREAM: u64 = 1000;

#[derive(Debug, Clone)]
pub struct TrainItem {
    pub latent: Tensor,
    pub condition: ConditionImage,
    pub prompt: String,
}

pub fn load_dataset(dir: &Path, cfg: &RunConfig) -> Result<Vec<TrainItem>> {
    let records = read_manifest(dir)?;
    let e = cfg.image_extent;
    records
        .iter()
        .map(|r| {
            let target = read_pnm(&dir.join(&r.target))?;
            let cond = read_pnm(&dir.join(&r.condition))?;
            if target.shape() != [3, e, e] || cond.shape() != [cfg.condition_channels, e, e] {
                return Err(HarnessError::Data(format!(
                    "sample {}: target {:?} / condition {:?} do not match extent {e} with {} condition channel(s)",
                    r.id,
                    target.shape(),
                    cond.shape(),
                    cfg.condition_channels
                )));
            }
            Ok(TrainItem {
                latent: to_latent(&target, cfg.latent_factor())?,
                condition: ConditionImage::new(cond, ConditionKind::SyntheticSilhouette)?,
                prompt: r.prompt.clone(),
            })
        })
        .collect()
}

pub fn build_model(cfg: &RunConfig) -> Result<SesaModel> {
    let seed = Seed(cfg.train.seed).derive(MODEL_STREAM);
    let mut model = SesaModel::new(cfg.model.clone(), cfg.image_extent, cfg.condition_channels, seed)?;
    model.fusion = cfg.fusion;
    model.enhance = cfg.enhance;
    Ok(model)
}

#[derive(Debug, Clone)]
pub struct TrainState {
    pub model: SesaModel,
    pub optim: AdamW,
    /// Completed epochs.
    pub epoch: usize,
}

impl TrainState {
    pub fn fresh(cfg: &RunConfig) -> Result<TrainState> {
        Ok(TrainState { model: build_model(cfg)?, optim: AdamW::new(cfg.train.lr, cfg.train.weight_decay), epoch: 0 })
    }
}

fn encode_all(model: &SesaModel, data: &[TrainItem]) -> Result<Vec<TextEmbedding>> {
    Ok(data.iter().map(|d| model.encode_text(&d.prompt)).collect::<sesa_core::Result<_>>()?)
}

/// Mean noise-prediction error over the first `probe_size` items with noise
/// drawn from a fixed stream, so values are comparable across epochs.
pub fn probe_loss(cfg: &RunConfig, model: &SesaModel, data: &[TrainItem]) -> Result<f64> {
    let sched = cfg.noise_schedule()?;
    let k = cfg.train.probe_size.min(data.len());
    if k == 0 {
        return Err(HarnessError::Data("empty dataset".into()));
    }
    let mut rng = Seed(cfg.train.seed).derive(PROBE_STREAM).rng();
    let mut total = 0.0;
    for item in &data[..k] {
        let noised = draw_noise(&item.latent, &sched, &mut rng)?;
        let text = model.encode_text(&item.prompt)?;
        let eps = model.predict_eps(&noised.z_t, noised.t, &text, &item.condition)?;
        total += noised.eps.sub(&eps)?.square().mean().item();
    }
    Ok(total / k as f64)
}

/// Runs `epochs` more epochs; returns the mean training loss of each.
pub fn train_epochs(cfg: &RunConfig, state: &mut TrainState, data: &[TrainItem], epochs: usize) -> Result<Vec<f64>> {
    if data.is_empty() {
        return Err(HarnessError::Data("empty dataset".into()));
    }
    let sched = cfg.noise_schedule()?;
    let texts = encode_all(&state.model, data)?;
    let mut losses = Vec::with_capacity(epochs);
    for _ in 0..epochs {
        let epoch = state.epoch + 1;
        let mut rng = Seed(cfg.train.seed).derive(EPOCH_STREAM + epoch as u64).rng();
        let mut order: Vec<usize> = (0..data.len()).collect();
        order.shuffle(&mut rng);
        let mut sum = 0.0;
        let mut steps = 0;
        for (step, chunk) in order.chunks(cfg.train.batch).enumerate() {
            let latents: Vec<Tensor> = chunk.iter().map(|&i| data[i].latent.clone()).collect();
            let model = &state.model;
            let loss = training_loss(&latents, &sched, &mut rng, |k, noised| {
                let i = chunk[k];
                let c_f = model.control.encode_condition(&data[i].condition)?;
                model.predict_eps_with(&noised.z_t, noised.t, &texts[i], &c_f)
            })
            .map_err(|e| match e {
                sesa_core::Error::Tensor(TensorError::NonFiniteInput { .. }) => HarnessError::NanLoss { epoch, step },
                e => e.into(),
            })?;
            let value = loss.item();
            if !value.is_finite() {
                return Err(HarnessError::NanLoss { epoch, step });
            }
            loss.backward()?;
            state.optim.step(&mut state.model.control.params);
            sum += value;
            steps += 1;
        }
        state.epoch = epoch;
        let mean = sum / steps as f64;
        log::info!("epoch {epoch}: loss {mean:.6}");
        losses.push(mean);
    }
    Ok(losses)
}
