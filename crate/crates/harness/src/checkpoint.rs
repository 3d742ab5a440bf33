//! Checkpoints: every model tensor, the optimizer moments and a snapshot of
//! the run configuration, in one named-tensor container.
//!
//! Names: `backbone.*` and `control.*` parameters, `optim.m.<param>` and
//! `optim.v.<param>` moments, `optim.t` (step count), `meta.epoch`, and
//! `meta.config` holding the canonical config text one byte per value.

use std::path::Path;

use sesa_core::nn::ParamStore;
use sesa_core::tensor::{read_container, write_container, NamedTensors};
use sesa_core::Tensor;

use crate::config::RunConfig;
use crate::error::{io_err, HarnessError, Result};
use crate::optim::AdamW;
use crate::train::{build_model, TrainState};

const CONFIG: &str = "meta.config";
const EPOCH: &str = "meta.epoch";
const STEP: &str = "optim.t";

fn text_tensor(s: &str) -> Tensor {
    let bytes: Vec<f64> = s.bytes().map(f64::from).collect();
    Tensor::from_vec(&[bytes.len()], bytes).expect("config text is never empty")
}

fn tensor_text(t: &Tensor) -> Result<String> {
    let bytes = t
        .data()
        .iter()
        .map(|&v| (v.fract() == 0.0 && (0.0..=255.0).contains(&v)).then_some(v as u8))
        .collect::<Option<Vec<u8>>>()
        .ok_or_else(|| HarnessError::Data(format!("{CONFIG} holds non-byte values")))?;
    String::from_utf8(bytes).map_err(|_| HarnessError::Data(format!("{CONFIG} is not UTF-8")))
}

pub fn to_tensors(cfg: &RunConfig, state: &TrainState) -> NamedTensors {
    let mut out: NamedTensors = vec![
        (CONFIG.into(), text_tensor(&cfg.to_text())),
        (EPOCH.into(), Tensor::from_vec(&[1], vec![state.epoch as f64]).expect("one element")),
        (STEP.into(), Tensor::from_vec(&[1], vec![state.optim.t as f64]).expect("one element")),
    ];
    for store in [&state.model.denoiser.params, &state.model.control.params] {
        out.extend(store.iter().map(|(n, t)| (n.clone(), t.detach())));
    }
    for (prefix, moments) in [("optim.m.", &state.optim.m), ("optim.v.", &state.optim.v)] {
        for (name, v) in moments {
            out.push((format!("{prefix}{name}"), Tensor::from_vec(&[v.len()], v.clone()).expect("non-empty")));
        }
    }
    out
}

pub fn save(path: &Path, cfg: &RunConfig, state: &TrainState) -> Result<()> {
    let mut buf = Vec::new();
    write_container(&mut buf, &to_tensors(cfg, state)).map_err(io_err(path))?;
    std::fs::write(path, buf).map_err(io_err(path))
}

fn take(tensors: &mut NamedTensors, name: &str) -> Option<Tensor> {
    let i = tensors.iter().position(|(n, _)| n == name)?;
    Some(tensors.remove(i).1)
}

fn counter(tensors: &mut NamedTensors, name: &str) -> Result<u64> {
    let t = take(tensors, name).ok_or_else(|| HarnessError::Data(format!("checkpoint lacks {name}")))?;
    match t.data() {
        [v] if *v >= 0.0 && v.fract() == 0.0 => Ok(*v as u64),
        _ => Err(HarnessError::Data(format!("{name} is not a non-negative integer"))),
    }
}

/// Replaces every tensor of `store` from `tensors`, in name order; the first
/// absent or differently shaped tensor is reported.
fn restore_store(store: &mut ParamStore, tensors: &mut NamedTensors, trainable: bool) -> Result<()> {
    for (name, slot) in store.iter_mut() {
        let t = take(tensors, name).ok_or_else(|| HarnessError::ConfigMismatch(format!("tensor {name} is missing from the checkpoint")))?;
        if t.shape() != slot.shape() {
            return Err(HarnessError::ConfigMismatch(format!(
                "tensor {name}: checkpoint has {:?}, config expects {:?}",
                t.shape(),
                slot.shape()
            )));
        }
        *slot = t.with_requires_grad(trainable);
    }
    Ok(())
}

/// Rebuilds the training state described by `cfg` from `tensors`.
pub fn from_tensors(cfg: &RunConfig, mut tensors: NamedTensors) -> Result<TrainState> {
    take(&mut tensors, CONFIG);
    let epoch = counter(&mut tensors, EPOCH)? as usize;
    let t = counter(&mut tensors, STEP)?;
    let mut model = build_model(cfg)?;
    restore_store(&mut model.denoiser.params, &mut tensors, false)?;
    restore_store(&mut model.control.params, &mut tensors, true)?;
    let mut optim = AdamW::new(cfg.train.lr, cfg.train.weight_decay);
    optim.t = t;
    for (name, v) in tensors {
        let (moments, param) = if let Some(p) = name.strip_prefix("optim.m.") {
            (&mut optim.m, p)
        } else if let Some(p) = name.strip_prefix("optim.v.") {
            (&mut optim.v, p)
        } else {
            return Err(HarnessError::ConfigMismatch(format!("tensor {name} is not part of the configured model")));
        };
        let want = model.control.params.get(param).map(Tensor::numel).ok();
        if want != Some(v.numel()) {
            return Err(HarnessError::ConfigMismatch(format!("tensor {name} does not match a trainable parameter")));
        }
        moments.insert(param.to_string(), v.to_vec());
    }
    Ok(TrainState { model, optim, epoch })
}

pub fn read(path: &Path) -> Result<NamedTensors> {
    let bytes = std::fs::read(path).map_err(io_err(path))?;
    Ok(read_container(&bytes)?)
}

/// The configuration snapshot stored in a checkpoint.
pub fn snapshot(tensors: &NamedTensors) -> Result<RunConfig> {
    let t = tensors
        .iter()
        .find(|(n, _)| n == CONFIG)
        .map(|(_, t)| t)
        .ok_or_else(|| HarnessError::Data(format!("checkpoint lacks {CONFIG}")))?;
    RunConfig::parse(&tensor_text(t)?)
}

/// Loads with the checkpoint's own configuration.
pub fn load(path: &Path) -> Result<(RunConfig, TrainState)> {
    let tensors = read(path)?;
    let cfg = snapshot(&tensors)?;
    let state = from_tensors(&cfg, tensors)?;
    Ok((cfg, state))
}

/// Loads into the architecture described by `cfg`.
pub fn load_as(path: &Path, cfg: &RunConfig) -> Result<TrainState> {
    from_tensors(cfg, read(path)?)
}
