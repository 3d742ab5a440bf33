//! Procedural paired data: a blob-with-fingers silhouette as the condition,
//! the same hand composited in skin tones over a striped, noisy background
//! as the target, and a templated prompt with a hand verb.

use std::f64::consts::PI;
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};
use sesa_core::image::{write_pnm, BoxXywh};
use sesa_core::{Seed, Tensor};

use crate::error::{io_err, HarnessError, Result};

pub const MANIFEST: &str = "manifest.jsonl";
pub const MIN_FINGERS: usize = 3;
pub const MAX_FINGERS: usize = 5;
/// Hand pixels have luminance above this; background pixels stay below it.
pub const SKIN_THRESHOLD: f64 = 0.52;

const VERBS: &[&str] = &["waving", "pointing", "reaching", "raising", "stretching", "showing", "spreading", "lifting"];
const PHRASES: &[&str] = &["with fingers spread", "with an open palm", "towards the camera", "in a small gesture"];
const TEXTURES: &[&str] = &["textured", "dark", "plain"];
const PLACES: &[&str] = &["wall", "room", "street", "park", "background", "kitchen"];

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HandParams {
    pub cx: f64,
    pub cy: f64,
    pub palm_radius: f64,
    pub finger_len: f64,
    pub finger_half_width: f64,
    pub fingers: usize,
    /// Direction the fingers fan around, radians.
    pub rotation: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneParams {
    pub hand: HandParams,
    pub skin: [f64; 3],
    pub bg_a: [f64; 3],
    pub bg_b: [f64; 3],
    pub stripe_freq: f64,
    pub stripe_angle: f64,
    pub noise_seed: u64,
}

/// One manifest row.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleRecord {
    pub id: usize,
    pub target: String,
    pub condition: String,
    pub mask: String,
    pub prompt: String,
    pub params: SceneParams,
    /// Palm center then fingertips, padded to `1 + MAX_FINGERS` points.
    pub keypoints: Vec<[f64; 2]>,
    pub visible: Vec<bool>,
    pub hand_box: BoxXywh,
}

/// A decoded sample ready for training or evaluation.
#[derive(Debug, Clone)]
pub struct SyntheticSample {
    pub target: Tensor,
    pub condition: Tensor,
    pub mask: Tensor,
    pub prompt: String,
    pub keypoints: Tensor,
    pub visible: Vec<bool>,
}

fn pick<'a>(rng: &mut impl Rng, words: &[&'a str]) -> &'a str {
    words[rng.random_range(0..words.len())]
}

pub fn draw_params(extent: usize, rng: &mut impl Rng) -> SceneParams {
    let e = extent as f64;
    let r = rng.random_range(0.08..0.125) * e;
    let hand = HandParams {
        cx: rng.random_range(0.25..0.75) * e,
        cy: rng.random_range(0.25..0.75) * e,
        palm_radius: r,
        finger_len: rng.random_range(1.1..1.5) * r,
        finger_half_width: (0.22 * r).max(1.0),
        fingers: rng.random_range(MIN_FINGERS..=MAX_FINGERS),
        rotation: rng.random_range(0.0..2.0 * PI),
    };
    let skin = [rng.random_range(0.8..0.95), rng.random_range(0.55..0.75), rng.random_range(0.45..0.6)];
    let mut dark = || [rng.random_range(0.05..0.4), rng.random_range(0.05..0.4), rng.random_range(0.05..0.4)];
    let (bg_a, bg_b) = (dark(), dark());
    SceneParams {
        hand,
        skin,
        bg_a,
        bg_b,
        stripe_freq: rng.random_range(2.0..6.0),
        stripe_angle: rng.random_range(0.0..PI),
        noise_seed: rng.random(),
    }
}

pub fn draw_prompt(rng: &mut impl Rng) -> String {
    format!(
        "a hand {} {} in front of a {} {}",
        pick(rng, VERBS),
        pick(rng, PHRASES),
        pick(rng, TEXTURES),
        pick(rng, PLACES)
    )
}

impl HandParams {
    /// Finger segments `(start, end)`; each finger is the set of points
    /// within `finger_half_width` of its segment.
    pub fn finger_segments(&self) -> Vec<([f64; 2], [f64; 2])> {
        let spread = 100f64.to_radians();
        let n = self.fingers;
        (0..n)
            .map(|j| {
                let a = self.rotation + (j as f64 - (n - 1) as f64 / 2.0) * spread / (n - 1) as f64;
                let (s, c) = a.sin_cos();
                let r0 = 0.5 * self.palm_radius;
                let r1 = self.palm_radius + self.finger_len - self.finger_half_width;
                ([self.cx + r0 * c, self.cy + r0 * s], [self.cx + r1 * c, self.cy + r1 * s])
            })
            .collect()
    }

    pub fn contains(&self, x: f64, y: f64) -> bool {
        let (dx, dy) = (x - self.cx, y - self.cy);
        if dx * dx + dy * dy <= self.palm_radius * self.palm_radius {
            return true;
        }
        self.finger_segments().iter().any(|&(a, b)| segment_distance([x, y], a, b) <= self.finger_half_width)
    }

    /// Foreground pixel count bounds: the palm disk alone from below, the
    /// disk plus one bounding box per finger from above.
    pub fn pixel_bounds(&self) -> (usize, usize) {
        let r = self.palm_radius;
        let lo = (PI * (r - 1.0).max(0.0).powi(2)).floor() as usize;
        let seg = self.finger_len + 0.5 * r - self.finger_half_width;
        let hw = self.finger_half_width;
        let finger_box = ((seg + 2.0 * hw + 2.0) * (2.0 * hw + 2.0)).ceil() as usize;
        let hi = (PI * (r + 1.0).powi(2)).ceil() as usize + self.fingers * finger_box;
        (lo, hi)
    }

    pub fn keypoints(&self) -> (Vec<[f64; 2]>, Vec<bool>) {
        let mut pts = vec![[self.cx, self.cy]];
        let mut vis = vec![true];
        for (_, tip) in self.finger_segments() {
            pts.push(tip);
            vis.push(true);
        }
        while pts.len() < 1 + MAX_FINGERS {
            pts.push([0.0, 0.0]);
            vis.push(false);
        }
        (pts, vis)
    }
}

fn segment_distance(p: [f64; 2], a: [f64; 2], b: [f64; 2]) -> f64 {
    let (vx, vy) = (b[0] - a[0], b[1] - a[1]);
    let (wx, wy) = (p[0] - a[0], p[1] - a[1]);
    let len2 = vx * vx + vy * vy;
    let t = if len2 == 0.0 { 0.0 } else { ((wx * vx + wy * vy) / len2).clamp(0.0, 1.0) };
    let (dx, dy) = (wx - t * vx, wy - t * vy);
    (dx * dx + dy * dy).sqrt()
}

/// `[1×E×E]` silhouette sampled at pixel centers.
pub fn render_silhouette(hand: &HandParams, extent: usize) -> Tensor {
    let mut data = vec![0.0; extent * extent];
    for y in 0..extent {
        for x in 0..extent {
            if hand.contains(x as f64 + 0.5, y as f64 + 0.5) {
                data[y * extent + x] = 1.0;
            }
        }
    }
    Tensor::from_vec(&[1, extent, extent], data).expect("shape matches")
}

/// `[3×E×E]` target: striped noisy background with the hand in skin tones.
pub fn render_target(scene: &SceneParams, silhouette: &Tensor) -> Tensor {
    let e = silhouette.shape()[1];
    let plane = e * e;
    let mut rng = Seed(scene.noise_seed).rng();
    let (s, c) = scene.stripe_angle.sin_cos();
    let mut data = vec![0.0; 3 * plane];
    for y in 0..e {
        for x in 0..e {
            let i = y * e + x;
            let phase = 2.0 * PI * scene.stripe_freq * (x as f64 * c + y as f64 * s) / e as f64;
            let w = 0.5 * (phase.sin() + 1.0);
            let hand = silhouette.data()[i] > 0.5;
            for ch in 0..3 {
                let jitter: f64 = rng.random_range(-0.03..0.03);
                let base = if hand { scene.skin[ch] } else { scene.bg_a[ch] * (1.0 - w) + scene.bg_b[ch] * w };
                data[ch * plane + i] = (base + jitter).clamp(0.0, 1.0);
            }
        }
    }
    Tensor::from_vec(&[3, e, e], data).expect("shape matches")
}

pub fn bounding_box(mask: &Tensor) -> Option<BoxXywh> {
    let (h, w) = (mask.shape()[1], mask.shape()[2]);
    let (mut x0, mut y0, mut x1, mut y1) = (usize::MAX, usize::MAX, 0, 0);
    for y in 0..h {
        for x in 0..w {
            if mask.data()[y * w + x] > 0.5 {
                x0 = x0.min(x);
                y0 = y0.min(y);
                x1 = x1.max(x);
                y1 = y1.max(y);
            }
        }
    }
    (x0 != usize::MAX).then(|| BoxXywh { x: x0, y: y0, w: x1 - x0 + 1, h: y1 - y0 + 1 })
}

/// Sample `index` of the dataset drawn from `seed`.
pub fn generate_sample(seed: Seed, index: usize, extent: usize) -> (SampleRecord, SyntheticSample) {
    let mut rng = seed.derive(index as u64).rng();
    let params = draw_params(extent, &mut rng);
    let prompt = draw_prompt(&mut rng);
    let silhouette = render_silhouette(&params.hand, extent);
    let target = render_target(&params, &silhouette);
    let (kp, visible) = params.hand.keypoints();
    let record = SampleRecord {
        id: index,
        target: format!("target_{index:04}.ppm"),
        condition: format!("cond_{index:04}.pgm"),
        mask: format!("mask_{index:04}.pgm"),
        prompt: prompt.clone(),
        params,
        keypoints: kp.clone(),
        visible: visible.clone(),
        hand_box: bounding_box(&silhouette).expect("palm is always in frame"),
    };
    let keypoints = Tensor::from_vec(&[kp.len(), 2], kp.iter().flatten().copied().collect()).expect("shape matches");
    let sample = SyntheticSample { target, condition: silhouette.clone(), mask: silhouette, prompt, keypoints, visible };
    (record, sample)
}

/// Writes `count` samples plus `manifest.jsonl` into `out_dir`. Samples are
/// rendered in parallel; the manifest is in index order.
pub fn gen_synthetic(count: usize, seed: Seed, extent: usize, out_dir: &Path) -> Result<Vec<SampleRecord>> {
    std::fs::create_dir_all(out_dir).map_err(io_err(out_dir))?;
    let workers = std::thread::available_parallelism().map_or(1, |n| n.get()).min(count.max(1));
    let chunks: Vec<Result<Vec<SampleRecord>>> = std::thread::scope(|s| {
        let handles: Vec<_> = (0..workers)
            .map(|w| {
                s.spawn(move || {
                    (w..count)
                        .step_by(workers)
                        .map(|i| {
                            let (rec, sample) = generate_sample(seed, i, extent);
                            write_pnm(&out_dir.join(&rec.target), &sample.target)?;
                            write_pnm(&out_dir.join(&rec.condition), &sample.condition)?;
                            write_pnm(&out_dir.join(&rec.mask), &sample.mask)?;
                            Ok(rec)
                        })
                        .collect::<Result<Vec<_>>>()
                })
            })
            .collect();
        handles.into_iter().map(|h| h.join().expect("generator thread")).collect()
    });
    let mut records = Vec::with_capacity(count);
    for c in chunks {
        records.extend(c?);
    }
    records.sort_by_key(|r| r.id);
    let mut text = String::new();
    for r in &records {
        text.push_str(&serde_json::to_string(r).expect("record serializes"));
        text.push('\n');
    }
    let path = out_dir.join(MANIFEST);
    std::fs::write(&path, text).map_err(io_err(&path))?;
    Ok(records)
}

pub fn read_manifest(dir: &Path) -> Result<Vec<SampleRecord>> {
    let path = dir.join(MANIFEST);
    let text = std::fs::read_to_string(&path).map_err(io_err(&path))?;
    parse_manifest(&text).map_err(|e| match e {
        HarnessError::Data(m) => HarnessError::Data(format!("{}:{m}", path.display())),
        e => e,
    })
}

/// One JSON record per non-blank line; errors are prefixed with the line number.
pub fn parse_manifest(text: &str) -> Result<Vec<SampleRecord>> {
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| serde_json::from_str(l).map_err(|e| HarnessError::Data(format!("{}: {e}", i + 1))))
        .collect()
}
