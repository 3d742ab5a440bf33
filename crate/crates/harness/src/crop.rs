use sesa_core::image::{crop, resize_bilinear, BoxXywh};
use sesa_core::Tensor;

use crate::error::{HarnessError, Result};
use crate::synth::bounding_box;

/// Square box around the mask's bounding box, grown by `margin` times its
/// longer side on each edge, shrunk to fit the image and shifted inside it.
pub fn crop_box(mask: &Tensor, margin: f64) -> Result<BoxXywh> {
    let b = bounding_box(mask).ok_or(HarnessError::EmptyMask)?;
    let (h, w) = (mask.shape()[1], mask.shape()[2]);
    let side = (b.w.max(b.h) as f64 * (1.0 + 2.0 * margin)).round() as usize;
    let side = side.clamp(1, h.min(w));
    let place = |start: usize, len: usize, extent: usize| {
        let center2 = 2 * start + len;
        let lo = center2.saturating_sub(side) / 2;
        lo.min(extent - side)
    };
    Ok(BoxXywh { x: place(b.x, b.w, w), y: place(b.y, b.h, h), w: side, h: side })
}

/// Crops `image` and `condition` with the same square around the hand mask
/// and resizes both to `extent`.
pub fn preprocess_crop(image: &Tensor, condition: &Tensor, mask: &Tensor, margin: f64, extent: usize) -> Result<(Tensor, Tensor, BoxXywh)> {
    let hw = |t: &Tensor| (t.shape().get(1).copied(), t.shape().get(2).copied());
    if hw(image) != hw(mask) || hw(condition) != hw(mask) || mask.rank() != 3 {
        return Err(HarnessError::Data(format!(
            "image {:?}, condition {:?} and mask {:?} must share height and width",
            image.shape(),
            condition.shape(),
            mask.shape()
        )));
    }
    let b = crop_box(mask, margin)?;
    let img = resize_bilinear(&crop(image, b)?, extent, extent)?;
    let cond = resize_bilinear(&crop(condition, b)?, extent, extent)?;
    Ok((img, cond, b))
}
