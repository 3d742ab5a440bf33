//! Writes the control branch's attention maps as grey images.

use std::path::Path;

use serde::{Deserialize, Serialize};
use sesa_core::backbone::q_sample;
use sesa_core::control::ConditionImage;
use sesa_core::fusion::{fused_map, AttentionPyramid};
use sesa_core::image::write_pnm;
use sesa_core::pipeline::SesaModel;
use sesa_core::{Seed, Tensor};

use crate::config::RunConfig;
use crate::error::{io_err, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttnEntry {
    pub file: String,
    /// `self`, `fused` or `cross`.
    pub kind: String,
    pub resolution: usize,
    pub layer: Option<String>,
    pub token: Option<String>,
    pub shape: Vec<usize>,
    pub min: f64,
    pub max: f64,
}

fn write_map(dir: &Path, file: &str, map: &Tensor) -> Result<(f64, f64)> {
    let (h, w) = (map.shape()[0], map.shape()[1]);
    let min = map.data().iter().copied().fold(f64::INFINITY, f64::min);
    let max = map.data().iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let span = if max > min { max - min } else { 1.0 };
    let data = map.data().iter().map(|v| (v - min) / span).collect();
    write_pnm(&dir.join(file), &Tensor::from_vec(&[1, h, w], data)?)?;
    Ok((min, max))
}

/// Runs the control branch once at step `t` on `latent` noised with a draw
/// from `seed`, and writes every self-attention map, the fused map and one
/// spatial map per (cross-attention layer, prompt token).
pub fn dump_attention(
    cfg: &RunConfig,
    model: &SesaModel,
    latent: &Tensor,
    prompt: &str,
    condition: &ConditionImage,
    t: usize,
    seed: u64,
    out_dir: &Path,
) -> Result<Vec<AttnEntry>> {
    std::fs::create_dir_all(out_dir).map_err(io_err(out_dir))?;
    let sched = cfg.noise_schedule()?;
    let eps = Tensor::randn(latent.shape(), &mut Seed(seed).rng());
    let z_t = q_sample(latent, t, &eps, &sched)?;
    let text = model.encode_text(prompt)?;
    let c_f = model.control.encode_condition(condition)?;
    let out = model.control_output(&z_t, t, &text, &c_f)?;
    let mut index = Vec::new();
    let mut push = |file: String, kind: &str, resolution: usize, layer: Option<String>, token: Option<String>, map: &Tensor| -> Result<()> {
        let (min, max) = write_map(out_dir, &file, map)?;
        index.push(AttnEntry { file, kind: kind.into(), resolution, layer, token, shape: map.shape().to_vec(), min, max });
        Ok(())
    };
    for (&r, map) in &out.self_maps {
        push(format!("self_r{r}.pgm"), "self", r, None, None, map)?;
    }
    let pyramid = AttentionPyramid::new(out.self_maps.clone())?;
    let fused = fused_map(&pyramid, &model.fusion)?;
    push("fused.pgm".into(), "fused", pyramid.target_resolution(), None, None, &fused)?;
    for (layer, map) in &out.cross_maps {
        let q = map.shape()[0];
        let r = (q as f64).sqrt().round() as usize;
        for (j, tok) in text.token_strings.iter().enumerate() {
            let column: Vec<f64> = (0..q).map(|i| map.data()[i * map.shape()[1] + j]).collect();
            let spatial = Tensor::from_vec(&[r, r], column)?;
            let file = format!("cross_{}_t{j:02}.pgm", layer.replace('.', "_"));
            push(file, "cross", r, Some(layer.clone()), Some(tok.clone()), &spatial)?;
        }
    }
    let path = out_dir.join("index.json");
    std::fs::write(&path, serde_json::to_string_pretty(&index).expect("index serializes")).map_err(io_err(&path))?;
    Ok(index)
}
