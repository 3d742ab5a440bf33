//! Generation metrics over feature vectors: FID, KID, their hand-crop
//! variants, detector confidence and keypoint error.

mod crops;
mod frechet;
mod kernel;

use serde::{Deserialize, Serialize};
use sesa_core::Tensor;

pub use crops::{crop_features, embed_images, CropSpec, Embedder, PixelStatsEmbedder};
pub use frechet::{fid, sqrt_product, sqrtm_psd, trace_sqrt_product};
pub use kernel::{kid, kid_null_std, mmd2_unbiased, poly_kernel, KidConfig};

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum MetricError {
    #[error("feature dimension mismatch: {a} vs {b}")]
    DimMismatch { a: usize, b: usize },
    #[error("need at least {need} samples, got {got}")]
    TooFewSamples { got: usize, need: usize },
    #[error("numerical instability: {0}")]
    NumericalInstability(String),
    #[error("box {boxed:?} outside image {image} ({width}x{height})")]
    BoxOutOfBounds { image: usize, boxed: sesa_core::image::BoxXywh, width: usize, height: usize },
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("every keypoint is masked")]
    AllMasked,
    #[error(transparent)]
    Core(#[from] sesa_core::Error),
}

pub type Result<T> = std::result::Result<T, MetricError>;

/// `[n×d]` feature vectors plus where they came from.
#[derive(Debug, Clone)]
pub struct FeatureSet {
    pub vectors: Tensor,
    pub label: String,
}

impl FeatureSet {
    pub fn new(vectors: Tensor, label: impl Into<String>) -> Result<FeatureSet> {
        if vectors.rank() != 2 {
            return Err(MetricError::ShapeMismatch(format!("features must be [n×d], got {:?}", vectors.shape())));
        }
        if !vectors.all_finite() {
            return Err(MetricError::NumericalInstability("non-finite feature value".into()));
        }
        Ok(FeatureSet { vectors, label: label.into() })
    }

    pub fn from_rows(rows: &[Vec<f64>], label: impl Into<String>) -> Result<FeatureSet> {
        let d = rows.first().map_or(0, Vec::len);
        if rows.is_empty() || d == 0 {
            return Err(MetricError::TooFewSamples { got: rows.len(), need: 1 });
        }
        if let Some(r) = rows.iter().find(|r| r.len() != d) {
            return Err(MetricError::DimMismatch { a: d, b: r.len() });
        }
        let t = Tensor::from_vec(&[rows.len(), d], rows.concat()).map_err(sesa_core::Error::from)?;
        FeatureSet::new(t, label)
    }

    /// Reads externally computed features: a container holding one `[n×d]`
    /// tensor named `features`.
    pub fn from_container(path: &std::path::Path) -> Result<FeatureSet> {
        let bytes = std::fs::read(path).map_err(|e| sesa_core::Error::Image(format!("{}: {e}", path.display())))?;
        let named = sesa_core::tensor::read_container(&bytes)
            .map_err(|e| MetricError::ShapeMismatch(format!("{}: {e}", path.display())))?;
        let (_, t) = named
            .into_iter()
            .find(|(n, _)| n == "features")
            .ok_or_else(|| MetricError::ShapeMismatch(format!("{}: no tensor named \"features\"", path.display())))?;
        FeatureSet::new(t, path.display().to_string())
    }

    pub fn len(&self) -> usize {
        self.vectors.shape()[0]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn dim(&self) -> usize {
        self.vectors.shape()[1]
    }

    pub fn row(&self, i: usize) -> &[f64] {
        let d = self.dim();
        &self.vectors.data()[i * d..(i + 1) * d]
    }
}

pub(crate) fn check_pair(a: &FeatureSet, b: &FeatureSet, need: usize) -> Result<()> {
    if a.dim() != b.dim() {
        return Err(MetricError::DimMismatch { a: a.dim(), b: b.dim() });
    }
    for s in [a, b] {
        if s.len() < need {
            return Err(MetricError::TooFewSamples { got: s.len(), need });
        }
    }
    Ok(())
}

/// Per-image maximum detection confidence (0 with no detection), averaged.
pub fn hand_confidence(detections: &[Vec<f64>]) -> f64 {
    if detections.is_empty() {
        return 0.0;
    }
    let total: f64 = detections.iter().map(|d| d.iter().copied().fold(0.0, f64::max)).sum();
    total / detections.len() as f64
}

/// Mean squared Euclidean distance over visible `(sample, joint)` pairs of
/// `[n×J×D]` keypoints. `visible` is `[n×J]` row-major.
pub fn keypoint_mse(pred: &Tensor, gt: &Tensor, visible: Option<&[bool]>) -> Result<f64> {
    if pred.shape() != gt.shape() || pred.rank() != 3 || !matches!(pred.shape()[2], 2 | 3) {
        return Err(MetricError::ShapeMismatch(format!("pred {:?} vs gt {:?}, need [n×J×(2|3)]", pred.shape(), gt.shape())));
    }
    let d = pred.shape()[2];
    let joints = pred.numel() / d;
    if visible.is_some_and(|v| v.len() != joints) {
        return Err(MetricError::ShapeMismatch(format!("mask has {} entries for {joints} joints", visible.unwrap().len())));
    }
    let (mut sum, mut count) = (0.0, 0usize);
    for j in 0..joints {
        if visible.is_some_and(|v| !v[j]) {
            continue;
        }
        let (p, g) = (&pred.data()[j * d..(j + 1) * d], &gt.data()[j * d..(j + 1) * d]);
        sum += p.iter().zip(g).map(|(a, b)| (a - b) * (a - b)).sum::<f64>();
        count += 1;
    }
    if count == 0 {
        return Err(MetricError::AllMasked);
    }
    Ok(sum / count as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetricValue {
    pub value: f64,
    pub count: usize,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub fid: Option<MetricValue>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub kid: Option<MetricValue>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub fid_h: Option<MetricValue>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub kid_h: Option<MetricValue>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub hand_conf: Option<MetricValue>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub mse_2d: Option<MetricValue>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub mse_3d: Option<MetricValue>,
}

impl MetricReport {
    pub fn entries(&self) -> Vec<(&'static str, MetricValue)> {
        [
            ("fid", self.fid),
            ("kid", self.kid),
            ("fid_h", self.fid_h),
            ("kid_h", self.kid_h),
            ("hand_conf", self.hand_conf),
            ("mse_2d", self.mse_2d),
            ("mse_3d", self.mse_3d),
        ]
        .into_iter()
        .filter_map(|(k, v)| v.map(|v| (k, v)))
        .collect()
    }

    pub fn validate(&self) -> Result<()> {
        for (k, v) in self.entries() {
            if !v.value.is_finite() || v.count == 0 {
                return Err(MetricError::NumericalInstability(format!("{k} = {} over {} samples", v.value, v.count)));
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use sesa_core::Seed;

    #[test]
    fn hand_confidence_examples() {
        assert!((hand_confidence(&[vec![0.9], vec![1.0]]) - 0.95).abs() < 1e-15);
        assert_eq!(hand_confidence(&[vec![], vec![]]), 0.0);
        assert_eq!(hand_confidence(&[]), 0.0);
        assert!((hand_confidence(&[vec![0.8, 0.6], vec![1.0]]) - 0.9).abs() < 1e-15);
    }

    #[test]
    fn keypoint_mse_examples() {
        let mut rng = Seed(1).rng();
        let gt = Tensor::randn(&[4, 5, 2], &mut rng);
        assert_eq!(keypoint_mse(&gt, &gt, None).unwrap(), 0.0);
        let shifted: Vec<f64> = gt.data().iter().enumerate().map(|(i, v)| if i % 2 == 0 { v + 1.0 } else { *v }).collect();
        let shifted = Tensor::from_vec(&[4, 5, 2], shifted).unwrap();
        assert!((keypoint_mse(&shifted, &gt, None).unwrap() - 1.0).abs() < 1e-12);
        assert_eq!(keypoint_mse(&shifted, &gt, Some(&[false; 20])), Err(MetricError::AllMasked));
        assert!(keypoint_mse(&gt, &Tensor::zeros(&[4, 5, 3]), None).is_err());
        assert!(keypoint_mse(&Tensor::zeros(&[4, 5, 4]), &Tensor::zeros(&[4, 5, 4]), None).is_err());
    }

    #[test]
    fn keypoint_mse_matches_nested_loops() {
        let mut rng = Seed(2).rng();
        let p = Tensor::randn(&[3, 7, 3], &mut rng);
        let g = Tensor::randn(&[3, 7, 3], &mut rng);
        let mask: Vec<bool> = (0..21).map(|i| i % 3 != 1).collect();
        let (mut s, mut c) = (0.0, 0.0);
        for n in 0..3 {
            for j in 0..7 {
                if !mask[n * 7 + j] {
                    continue;
                }
                let mut e = 0.0;
                for k in 0..3 {
                    let i = (n * 7 + j) * 3 + k;
                    e += (p.data()[i] - g.data()[i]).powi(2);
                }
                s += e;
                c += 1.0;
            }
        }
        assert!((keypoint_mse(&p, &g, Some(&mask)).unwrap() - s / c).abs() < 1e-12);
    }

    #[test]
    fn report_schema() {
        let r = MetricReport { fid: Some(MetricValue { value: 1.5, count: 4 }), ..Default::default() };
        let json = serde_json::to_string(&r).unwrap();
        assert!(json.contains("\"fid\"") && !json.contains("kid"));
        assert!(r.validate().is_ok());
        let bad = MetricReport { kid: Some(MetricValue { value: f64::NAN, count: 4 }), ..Default::default() };
        assert!(bad.validate().is_err());
    }

    #[test]
    fn feature_set_validation() {
        assert!(FeatureSet::from_rows(&[vec![1.0, 2.0], vec![3.0]], "x").is_err());
        assert!(FeatureSet::from_rows(&[], "x").is_err());
        assert!(FeatureSet::new(Tensor::zeros(&[3]), "x").is_err());
        let f = FeatureSet::from_rows(&[vec![1.0, 2.0], vec![3.0, 4.0]], "x").unwrap();
        assert_eq!((f.len(), f.dim()), (2, 2));
        assert_eq!(f.row(1), &[3.0, 4.0]);
    }
}
