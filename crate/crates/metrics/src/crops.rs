use serde::{Deserialize, Serialize};
use sesa_core::image::{crop, luminance, resize_bilinear, BoxXywh};
use sesa_core::Tensor;

use crate::{FeatureSet, MetricError, Result};

/// Maps a `[C×E×E]` image to a fixed-length feature vector.
pub trait Embedder {
    fn input_extent(&self) -> usize;
    fn dim(&self) -> usize;
    fn embed(&self, img: &Tensor) -> Result<Vec<f64>>;
}

/// Three channel means (grey images repeat their one channel) followed by
/// the luminance average-pooled to a `grid×grid` thumbnail.
#[derive(Debug, Clone, Copy)]
pub struct PixelStatsEmbedder {
    pub extent: usize,
    pub grid: usize,
}

impl Default for PixelStatsEmbedder {
    fn default() -> Self {
        PixelStatsEmbedder { extent: 16, grid: 4 }
    }
}

impl Embedder for PixelStatsEmbedder {
    fn input_extent(&self) -> usize {
        self.extent
    }

    fn dim(&self) -> usize {
        3 + self.grid * self.grid
    }

    fn embed(&self, img: &Tensor) -> Result<Vec<f64>> {
        let e = self.extent;
        let c = img.shape()[0];
        if img.shape() != [c, e, e] || !matches!(c, 1 | 3) {
            return Err(MetricError::ShapeMismatch(format!("embedder wants [1|3×{e}×{e}], got {:?}", img.shape())));
        }
        let plane = e * e;
        let means: Vec<f64> = (0..c).map(|ch| img.data()[ch * plane..(ch + 1) * plane].iter().sum::<f64>() / plane as f64).collect();
        let mut out: Vec<f64> = (0..3).map(|ch| means[ch.min(c - 1)]).collect();
        let lum = luminance(img)?;
        let cell = e / self.grid;
        for gy in 0..self.grid {
            for gx in 0..self.grid {
                let mut s = 0.0;
                for y in gy * cell..(gy + 1) * cell {
                    for x in gx * cell..(gx + 1) * cell {
                        s += lum[y * e + x];
                    }
                }
                out.push(s / (cell * cell) as f64);
            }
        }
        Ok(out)
    }
}

/// Hand boxes per image, in pixels.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct CropSpec {
    pub boxes: Vec<Vec<BoxXywh>>,
}

impl CropSpec {
    /// One box covering each whole image.
    pub fn full(images: &[Tensor]) -> CropSpec {
        let boxes = images.iter().map(|im| vec![BoxXywh { x: 0, y: 0, w: im.shape()[2], h: im.shape()[1] }]).collect();
        CropSpec { boxes }
    }
}

fn embed_one(img: &Tensor, embedder: &dyn Embedder) -> Result<Vec<f64>> {
    let e = embedder.input_extent();
    let v = embedder.embed(&resize_bilinear(img, e, e)?)?;
    if v.len() != embedder.dim() {
        return Err(MetricError::DimMismatch { a: embedder.dim(), b: v.len() });
    }
    Ok(v)
}

/// Embeds every image, resized to the embedder's extent.
pub fn embed_images(images: &[Tensor], embedder: &dyn Embedder, label: &str) -> Result<FeatureSet> {
    let rows = images.iter().map(|im| embed_one(im, embedder)).collect::<Result<Vec<_>>>()?;
    FeatureSet::from_rows(&rows, label)
}

/// Crops every box, resizes it bilinearly and embeds it; one row per box.
pub fn crop_features(images: &[Tensor], crops: &CropSpec, embedder: &dyn Embedder, label: &str) -> Result<FeatureSet> {
    if crops.boxes.len() != images.len() {
        return Err(MetricError::ShapeMismatch(format!("{} crop lists for {} images", crops.boxes.len(), images.len())));
    }
    let mut rows = Vec::new();
    for (i, (img, boxes)) in images.iter().zip(&crops.boxes).enumerate() {
        let (h, w) = (img.shape()[1], img.shape()[2]);
        for &b in boxes {
            if b.w == 0 || b.h == 0 || b.x + b.w > w || b.y + b.h > h {
                return Err(MetricError::BoxOutOfBounds { image: i, boxed: b, width: w, height: h });
            }
            rows.push(embed_one(&crop(img, b)?, embedder)?);
        }
    }
    FeatureSet::from_rows(&rows, label)
}

#[cfg(test)]
mod tests {
    use sesa_core::Seed;

    use super::*;
    use crate::fid;

    fn images(n: usize, seed: u64) -> Vec<Tensor> {
        let mut rng = Seed(seed).rng();
        (0..n).map(|_| Tensor::uniform(&[3, 20, 20], 0.0, 1.0, &mut rng)).collect()
    }

    #[test]
    fn full_crop_equals_whole_image_features() {
        let (a, b) = (images(6, 1), images(6, 2));
        let emb = PixelStatsEmbedder::default();
        let whole = fid(&embed_images(&a, &emb, "a").unwrap(), &embed_images(&b, &emb, "b").unwrap()).unwrap();
        let cropped = fid(
            &crop_features(&a, &CropSpec::full(&a), &emb, "a").unwrap(),
            &crop_features(&b, &CropSpec::full(&b), &emb, "b").unwrap(),
        )
        .unwrap();
        assert_eq!(whole, cropped);
    }

    #[test]
    fn single_pixel_crop_embeds_as_constant() {
        let a = images(1, 3);
        let spec = CropSpec { boxes: vec![vec![BoxXywh { x: 5, y: 7, w: 1, h: 1 }]] };
        let f = crop_features(&a, &spec, &PixelStatsEmbedder::default(), "px").unwrap();
        let lum = luminance(&a[0]).unwrap()[7 * 20 + 5];
        assert!(f.row(0)[3..].iter().all(|v| (v - lum).abs() < 1e-12));
    }

    #[test]
    fn half_black_half_white_has_mean_half() {
        let data: Vec<f64> = (0..3 * 8 * 8).map(|i| if (i % 8) < 4 { 0.0 } else { 1.0 }).collect();
        let img = Tensor::from_vec(&[3, 8, 8], data).unwrap();
        let spec = CropSpec { boxes: vec![vec![BoxXywh { x: 2, y: 0, w: 4, h: 4 }]] };
        let f = crop_features(&[img], &spec, &PixelStatsEmbedder::default(), "half").unwrap();
        for ch in 0..3 {
            assert!((f.row(0)[ch] - 0.5).abs() < 1e-12);
        }
    }

    #[test]
    fn out_of_bounds_box_is_rejected() {
        let a = images(1, 4);
        let spec = CropSpec { boxes: vec![vec![BoxXywh { x: 15, y: 0, w: 6, h: 3 }]] };
        assert!(matches!(crop_features(&a, &spec, &PixelStatsEmbedder::default(), "x"), Err(MetricError::BoxOutOfBounds { image: 0, .. })));
    }
}
