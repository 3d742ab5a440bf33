use std::path::Path;

use sesa_core::backbone::DenoiserConfig;
use sesa_core::image::{read_pnm, resize_bilinear};
use sesa_core::nn::ParamStore;
use sesa_core::tensor::ContainerError;
use sesa_core::{Seed, Tensor};
use sesa_harness::checkpoint::{self, to_tensors};
use sesa_harness::config::RunConfig;
use sesa_harness::crop::preprocess_crop;
use sesa_harness::eval::evaluate;
use sesa_harness::optim::AdamW;
use sesa_harness::sample::sample_image;
use sesa_harness::synth::{bounding_box, gen_synthetic, read_manifest, MANIFEST};
use sesa_harness::train::{build_model, load_dataset, train_epochs, TrainState};
use sesa_harness::HarnessError;

fn small_cfg() -> RunConfig {
    let mut cfg = RunConfig::default();
    cfg.model = DenoiserConfig { latent_extent: 8, channels: vec![4, 8], attention_resolutions: vec![8, 4], ..Default::default() };
    cfg.image_extent = 32;
    cfg.train.lr = 1e-3;
    cfg.train.probe_size = 4;
    cfg.schedule.sample_steps = 5;
    cfg.validate().unwrap();
    cfg
}

fn files(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut v: Vec<_> = std::fs::read_dir(dir)
        .unwrap()
        .map(|e| e.unwrap().path())
        .map(|p| (p.file_name().unwrap().to_string_lossy().into_owned(), std::fs::read(&p).unwrap()))
        .collect();
    v.sort();
    v
}

#[test]
fn gen_data_is_deterministic_and_empty_when_asked() {
    let dir = tempfile::tempdir().unwrap();
    let empty = dir.path().join("empty");
    assert!(gen_synthetic(0, Seed(1), 32, &empty).unwrap().is_empty());
    assert_eq!(std::fs::read(empty.join(MANIFEST)).unwrap(), b"");

    let (a, b, c) = (dir.path().join("a"), dir.path().join("b"), dir.path().join("c"));
    gen_synthetic(6, Seed(1), 32, &a).unwrap();
    gen_synthetic(6, Seed(1), 32, &b).unwrap();
    gen_synthetic(6, Seed(2), 32, &c).unwrap();
    assert_eq!(files(&a), files(&b));
    assert_ne!(files(&a), files(&c));
    assert_eq!(files(&a).len(), 3 * 6 + 1);
}

#[test]
fn silhouettes_respect_their_geometry() {
    let dir = tempfile::tempdir().unwrap();
    let records = gen_synthetic(12, Seed(4), 64, dir.path()).unwrap();
    assert_eq!(read_manifest(dir.path()).unwrap(), records);
    for r in &records {
        let mask = read_pnm(&dir.path().join(&r.mask)).unwrap();
        let count = mask.data().iter().filter(|v| **v > 0.5).count();
        let (lo, hi) = r.params.hand.pixel_bounds();
        assert!(lo <= count && count <= hi, "sample {}: {count} outside [{lo}, {hi}]", r.id);
        assert_eq!(bounding_box(&mask), Some(r.hand_box));
        assert_eq!(read_pnm(&dir.path().join(&r.condition)).unwrap().data(), mask.data());
        assert!((3..=5).contains(&r.params.hand.fingers));
        let palm = [r.params.hand.cx as usize, r.params.hand.cy as usize];
        assert_eq!(mask.data()[palm[1] * 64 + palm[0]], 1.0);
    }
}

fn dataset(cfg: &RunConfig, n: usize) -> (tempfile::TempDir, Vec<sesa_harness::train::TrainItem>) {
    let dir = tempfile::tempdir().unwrap();
    gen_synthetic(n, Seed(9), cfg.image_extent, dir.path()).unwrap();
    let items = load_dataset(dir.path(), cfg).unwrap();
    (dir, items)
}

fn same_state(a: &TrainState, b: &TrainState) -> bool {
    a.model.control.params.bit_eq(&b.model.control.params)
        && a.model.denoiser.params.bit_eq(&b.model.denoiser.params)
        && a.optim == b.optim
        && a.epoch == b.epoch
}

#[test]
fn zero_epochs_leave_the_initial_model() {
    let cfg = small_cfg();
    let (_d, items) = dataset(&cfg, 4);
    let mut st = TrainState::fresh(&cfg).unwrap();
    assert!(train_epochs(&cfg, &mut st, &items, 0).unwrap().is_empty());
    assert!(st.model.control.params.bit_eq(&build_model(&cfg).unwrap().control.params));
    assert_eq!(st.optim.t, 0);
}

#[test]
fn training_is_deterministic_and_resumes_exactly() {
    let cfg = small_cfg();
    let (_d, items) = dataset(&cfg, 6);
    let mut a = TrainState::fresh(&cfg).unwrap();
    let mut b = TrainState::fresh(&cfg).unwrap();
    let la = train_epochs(&cfg, &mut a, &items, 1).unwrap();
    let lb = train_epochs(&cfg, &mut b, &items, 1).unwrap();
    assert_eq!(la, lb);
    assert!(same_state(&a, &b));
    assert!(!a.model.control.params.bit_eq(&build_model(&cfg).unwrap().control.params));

    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("one.sesa");
    checkpoint::save(&path, &cfg, &a).unwrap();
    let (cfg2, mut resumed) = checkpoint::load(&path).unwrap();
    assert_eq!(cfg2, cfg);
    train_epochs(&cfg2, &mut resumed, &items, 1).unwrap();
    train_epochs(&cfg, &mut a, &items, 1).unwrap();
    assert!(same_state(&resumed, &a));
}

#[test]
fn nan_in_the_data_is_a_nan_loss() {
    let cfg = small_cfg();
    let (_d, mut items) = dataset(&cfg, 2);
    let mut bad = items[0].latent.to_vec();
    bad[3] = f64::NAN;
    items[0].latent = Tensor::from_vec(items[0].latent.shape(), bad).unwrap();
    items[1].latent = items[0].latent.clone();
    let mut st = TrainState::fresh(&cfg).unwrap();
    let err = train_epochs(&cfg, &mut st, &items, 1).unwrap_err();
    assert!(matches!(err, HarnessError::NanLoss { epoch: 1, step: 0 }), "{err}");
    assert_eq!(err.exit_code(), 4);
}

/// Adam with decoupled decay on one scalar, written out longhand.
struct ScalarAdam {
    m: f64,
    v: f64,
}

impl ScalarAdam {
    fn step(&mut self, theta: f64, g: f64, t: i32, lr: f64, wd: f64) -> f64 {
        let (b1, b2, eps) = (0.9f64, 0.999f64, 1e-8);
        self.m = b1 * self.m + (1.0 - b1) * g;
        self.v = b2 * self.v + (1.0 - b2) * g * g;
        let m_hat = self.m / (1.0 - b1.powi(t));
        let v_hat = self.v / (1.0 - b2.powi(t));
        let decayed = theta - lr * wd * theta;
        decayed - lr * m_hat / (v_hat.sqrt() + eps)
    }
}

#[test]
fn optimizer_matches_scalar_reference() {
    let (lr, wd) = (0.05, 0.1);
    let (a, b) = ([1.0, 3.0, 0.5], [2.0, -1.0, 0.25]);
    let mut store = ParamStore::new();
    store.insert("p", Tensor::from_vec(&[3], vec![0.3, -0.7, 1.9]).unwrap().param());
    let mut opt = AdamW::new(lr, wd);
    let mut reference = [0.3, -0.7, 1.9];
    let mut states: Vec<ScalarAdam> = (0..3).map(|_| ScalarAdam { m: 0.0, v: 0.0 }).collect();
    for t in 1..=200 {
        // loss = sum a_i (theta_i - b_i)^2
        let p = store.get("p").unwrap().clone();
        let loss = p.sub(&Tensor::from_vec(&[3], b.to_vec()).unwrap()).unwrap().square().mul(&Tensor::from_vec(&[3], a.to_vec()).unwrap()).unwrap().sum();
        loss.backward().unwrap();
        opt.step(&mut store);
        for i in 0..3 {
            let g = 2.0 * a[i] * (reference[i] - b[i]);
            reference[i] = states[i].step(reference[i], g, t, lr, wd);
        }
        for (got, want) in store.get("p").unwrap().data().iter().zip(&reference) {
            assert!((got - want).abs() <= 1e-12, "step {t}: {got} vs {want}");
        }
    }
}

#[test]
fn checkpoint_round_trip_and_corruption() {
    let cfg = small_cfg();
    let (_d, items) = dataset(&cfg, 2);
    let mut st = TrainState::fresh(&cfg).unwrap();
    train_epochs(&cfg, &mut st, &items, 1).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.sesa");
    checkpoint::save(&path, &cfg, &st).unwrap();
    let (_, back) = checkpoint::load(&path).unwrap();
    let (x, y) = (to_tensors(&cfg, &st), to_tensors(&cfg, &back));
    assert_eq!(x.len(), y.len());
    for ((na, ta), (nb, tb)) in x.iter().zip(&y) {
        assert_eq!(na, nb);
        assert!(ta.bit_eq(tb), "{na}");
    }

    let bytes = std::fs::read(&path).unwrap();
    let cut = dir.path().join("cut.sesa");
    std::fs::write(&cut, &bytes[..bytes.len() / 2]).unwrap();
    match checkpoint::load(&cut) {
        Err(HarnessError::Container(ContainerError::Corrupt { offset, .. })) => assert!(offset <= bytes.len() / 2),
        other => panic!("{other:?}"),
    }
    let mut magic = bytes.clone();
    magic[..4].copy_from_slice(b"NOPE");
    std::fs::write(&cut, &magic).unwrap();
    assert!(matches!(checkpoint::load(&cut), Err(HarnessError::Container(ContainerError::BadMagic(_)))));
    let mut version = bytes;
    version[4..8].copy_from_slice(&7u32.to_le_bytes());
    std::fs::write(&cut, &version).unwrap();
    assert!(matches!(checkpoint::load(&cut), Err(HarnessError::Container(ContainerError::VersionMismatch { found: 7, .. }))));
}

#[test]
fn cross_config_load_names_the_first_bad_tensor() {
    let cfg = small_cfg();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.sesa");
    checkpoint::save(&path, &cfg, &TrainState::fresh(&cfg).unwrap()).unwrap();
    let mut other = cfg.clone();
    other.model.channels = vec![4, 16];
    let saved = build_model(&cfg).unwrap();
    let wanted = build_model(&other).unwrap();
    let first = wanted
        .denoiser
        .params
        .iter()
        .find(|(n, t)| saved.denoiser.params.get(n).map(|s| s.shape() != t.shape()).unwrap_or(true))
        .map(|(n, _)| n.clone())
        .unwrap();
    match checkpoint::load_as(&path, &other) {
        Err(HarnessError::ConfigMismatch(msg)) => assert!(msg.contains(&format!("tensor {first}:")), "{msg} / {first}"),
        Err(e) => panic!("{e}"),
        Ok(_) => panic!("loaded into a different architecture"),
    }
}

#[test]
fn sampling_is_deterministic_and_init_reduces_to_backbone() {
    let cfg = small_cfg();
    let (_d, items) = dataset(&cfg, 1);
    let mut m = build_model(&cfg).unwrap();
    let cond = &items[0].condition;
    let a = sample_image(&cfg, &m, &items[0].prompt, Some(cond), 3).unwrap();
    let b = sample_image(&cfg, &m, &items[0].prompt, Some(cond), 3).unwrap();
    assert!(a.bit_eq(&b));
    assert!(!a.bit_eq(&sample_image(&cfg, &m, &items[0].prompt, Some(cond), 4).unwrap()));
    m.fusion.enabled = false;
    m.enhance.alpha = 0.0;
    let frozen = sample_image(&cfg, &m, &items[0].prompt, None, 3).unwrap();
    assert!(sample_image(&cfg, &m, &items[0].prompt, Some(cond), 3).unwrap().bit_eq(&frozen));
    assert!(a.bit_eq(&frozen));
}

#[test]
fn identical_sets_and_report_schema() {
    let cfg = small_cfg();
    let dir = tempfile::tempdir().unwrap();
    gen_synthetic(8, Seed(2), 32, dir.path()).unwrap();
    let imgs = sesa_harness::eval::read_image_dir(dir.path(), "target_").unwrap();
    let mut c = cfg.clone();
    c.eval.metrics = vec!["fid".into()];
    let r = evaluate(&c, &imgs, &imgs, None).unwrap();
    assert!(r.fid.unwrap().value <= 1e-6);
    assert_eq!(r.entries().iter().map(|(k, _)| *k).collect::<Vec<_>>(), ["fid"]);
    let crops = sesa_harness::eval::read_crops(&{
        let p = dir.path().join("crops.json");
        let table: std::collections::BTreeMap<String, Vec<_>> =
            read_manifest(dir.path()).unwrap().iter().map(|r| (r.target.clone(), vec![r.hand_box])).collect();
        std::fs::write(&p, serde_json::to_string(&table).unwrap()).unwrap();
        p
    })
    .unwrap();
    c.eval.metrics = vec!["kid".into(), "fid_h".into()];
    let r = evaluate(&c, &imgs, &imgs, Some(&crops)).unwrap();
    assert_eq!(r.entries().iter().map(|(k, _)| *k).collect::<Vec<_>>(), ["kid", "fid_h"]);
    assert!(r.fid_h.unwrap().value <= 1e-6);
    assert!(matches!(evaluate(&c, &imgs, &imgs, None), Err(HarnessError::Usage(_))));
}

fn ramp(c: usize, h: usize, w: usize, offset: f64) -> Tensor {
    Tensor::from_vec(&[c, h, w], (0..c * h * w).map(|i| offset + i as f64 / (c * h * w) as f64).collect()).unwrap()
}

#[test]
fn full_mask_crop_is_a_plain_resize() {
    let img = ramp(3, 20, 20, 0.0);
    let cond = ramp(1, 20, 20, 0.5);
    let mask = Tensor::full(&[1, 20, 20], 1.0);
    let (a, c, b) = preprocess_crop(&img, &cond, &mask, 0.0, 8).unwrap();
    assert_eq!((b.x, b.y, b.w, b.h), (0, 0, 20, 20));
    assert!(a.bit_eq(&resize_bilinear(&img, 8, 8).unwrap()));
    assert!(c.bit_eq(&resize_bilinear(&cond, 8, 8).unwrap()));
    assert!(matches!(preprocess_crop(&img, &cond, &Tensor::zeros(&[1, 20, 20]), 0.1, 8), Err(HarnessError::EmptyMask)));
}

#[test]
fn square_mask_crop_is_centred_on_it() {
    // 6x6 block with its centroid at (17, 11) in a 40x40 image
    let mask = Tensor::from_vec(&[1, 40, 40], (0..1600).map(|i| ((14..20).contains(&(i % 40)) && (8..14).contains(&(i / 40))) as u8 as f64).collect()).unwrap();
    let img = ramp(3, 40, 40, 0.0);
    let (_, crop_mask, b) = preprocess_crop(&img, &mask, &mask, 0.5, 12).unwrap();
    let centre = |start: usize, len: usize| start as f64 + len as f64 / 2.0;
    assert_eq!((centre(b.x, b.w), centre(b.y, b.h)), (17.0, 11.0));
    // the mask's centroid in the resized crop sits at the middle
    let (mut sx, mut sy, mut total) = (0.0, 0.0, 0.0);
    for (i, v) in crop_mask.data().iter().enumerate() {
        sx += v * ((i % 12) as f64 + 0.5);
        sy += v * ((i / 12) as f64 + 0.5);
        total += v;
    }
    assert!((sx / total - 6.0).abs() < 1e-9 && (sy / total - 6.0).abs() < 1e-9, "{} {}", sx / total, sy / total);
}

#[test]
fn image_and_condition_share_the_transform() {
    // pixel k holds the value k in both inputs, so equal outputs mean the
    // same source pixels were mixed with the same weights
    let index = |c: usize| Tensor::from_vec(&[c, 24, 24], (0..c * 576).map(|i| (i % 576) as f64).collect()).unwrap();
    let mask = Tensor::from_vec(&[1, 24, 24], (0..576).map(|i| ((5..9).contains(&(i % 24)) && (3..10).contains(&(i / 24))) as u8 as f64).collect()).unwrap();
    let (img, cond, b) = preprocess_crop(&index(3), &index(1), &mask, 0.25, 16).unwrap();
    assert_eq!(b.w, b.h);
    for ch in 0..3 {
        assert_eq!(&img.data()[ch * cond.numel()..(ch + 1) * cond.numel()], cond.data());
    }
    // with no resampling the crop is an exact index window
    let (_, cond, b) = preprocess_crop(&index(3), &index(1), &mask, 0.25, b.w).unwrap();
    for (i, v) in cond.data().iter().enumerate() {
        let (y, x) = (b.y + i / b.w, b.x + i % b.w);
        assert_eq!(*v, (y * 24 + x) as f64);
    }
}
