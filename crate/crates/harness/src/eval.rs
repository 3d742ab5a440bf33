use std::collections::BTreeMap;
use std::path::Path;

use sesa_core::image::{read_pnm, BoxXywh};
use sesa_core::Tensor;
use sesa_metrics::{crop_features, embed_images, fid, kid, CropSpec, FeatureSet, KidConfig, MetricReport, MetricValue, PixelStatsEmbedder};

use crate::config::RunConfig;
use crate::error::{io_err, HarnessError, Result};
use crate::sample::threshold_silhouette;

/// Hand boxes keyed by image file name.
pub type CropTable = BTreeMap<String, Vec<BoxXywh>>;

/// `.ppm`/`.pgm` files in `dir` whose names start with `prefix`, sorted by name.
pub fn read_image_dir(dir: &Path, prefix: &str) -> Result<Vec<(String, Tensor)>> {
    let mut names: Vec<String> = std::fs::read_dir(dir)
        .map_err(io_err(dir))?
        .filter_map(|e| e.ok())
        .map(|e| e.file_name().to_string_lossy().into_owned())
        .filter(|n| n.starts_with(prefix) && (n.ends_with(".ppm") || n.ends_with(".pgm")))
        .collect();
    names.sort();
    if names.is_empty() {
        return Err(HarnessError::Data(format!("no {prefix}*.ppm/.pgm images in {}", dir.display())));
    }
    names.into_iter().map(|n| Ok((n.clone(), read_pnm(&dir.join(&n))?))).collect()
}

pub fn read_crops(path: &Path) -> Result<CropTable> {
    let text = std::fs::read_to_string(path).map_err(io_err(path))?;
    parse_crops(&text).map_err(|e| match e {
        HarnessError::Data(m) => HarnessError::Data(format!("{}: {m}", path.display())),
        e => e,
    })
}

pub fn parse_crops(text: &str) -> Result<CropTable> {
    serde_json::from_str(text).map_err(|e| HarnessError::Data(e.to_string()))
}

fn spec_for(images: &[(String, Tensor)], table: &CropTable) -> CropSpec {
    CropSpec { boxes: images.iter().map(|(n, _)| table.get(n).cloned().unwrap_or_default()).collect() }
}

fn prepare(images: &[(String, Tensor)], binarize: f64) -> Result<Vec<Tensor>> {
    images
        .iter()
        .map(|(_, im)| if binarize >= 0.0 { threshold_silhouette(im, binarize) } else { Ok(im.clone()) })
        .collect()
}

/// Computes the configured metrics between two image sets.
pub fn evaluate(
    cfg: &RunConfig,
    generated: &[(String, Tensor)],
    reference: &[(String, Tensor)],
    crops: Option<&CropTable>,
) -> Result<MetricReport> {
    let e = &cfg.eval;
    let embedder = PixelStatsEmbedder { extent: e.embed_extent, grid: e.embed_grid };
    let kid_cfg = KidConfig { subset_size: (e.kid_subset_size > 0).then_some(e.kid_subset_size), subsets: e.kid_subsets, seed: cfg.train.seed };
    let gen = prepare(generated, e.binarize)?;
    let refs = prepare(reference, e.binarize)?;
    let wants = |k: &str| e.metrics.iter().any(|m| m == k);
    let mut report = MetricReport::default();
    let value = |v: f64, a: &FeatureSet| Some(MetricValue { value: v, count: a.len() });
    if wants("fid") || wants("kid") {
        let a = embed_images(&gen, &embedder, "generated")?;
        let b = embed_images(&refs, &embedder, "reference")?;
        if wants("fid") {
            report.fid = value(fid(&a, &b)?, &a);
        }
        if wants("kid") {
            report.kid = value(kid(&a, &b, &kid_cfg)?, &a);
        }
    }
    if wants("fid_h") || wants("kid_h") {
        let table = crops.ok_or_else(|| HarnessError::Usage("fid_h/kid_h need a crop table".into()))?;
        let a = crop_features(&gen, &spec_for(generated, table), &embedder, "generated hands")?;
        let b = crop_features(&refs, &spec_for(reference, table), &embedder, "reference hands")?;
        if wants("fid_h") {
            report.fid_h = value(fid(&a, &b)?, &a);
        }
        if wants("kid_h") {
            report.kid_h = value(kid(&a, &b, &kid_cfg)?, &a);
        }
    }
    report.validate()?;
    Ok(report)
}
