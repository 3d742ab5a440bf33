//! Binary PGM/PPM codecs, the fixed pixel<->latent map, crops and bilinear
//! resizing. Images are `[C×H×W]` tensors with values in `[0, 1]`.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

fn img_err(msg: impl Into<String>) -> Error {
    Error::Image(msg.into())
}

struct Cursor<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl Cursor<'_> {
    fn skip_space_and_comments(&mut self) {
        while self.pos < self.buf.len() {
            match self.buf[self.pos] {
                b'#' => {
                    while self.pos < self.buf.len() && self.buf[self.pos] != b'\n' {
                        self.pos += 1;
                    }
                }
                c if c.is_ascii_whitespace() => self.pos += 1,
                _ => break,
            }
        }
    }

    fn number(&mut self, what: &str) -> Result<usize> {
        self.skip_space_and_comments();
        let start = self.pos;
        while self.pos < self.buf.len() && self.buf[self.pos].is_ascii_digit() {
            self.pos += 1;
        }
        if start == self.pos || self.pos - start > 9 {
            return Err(img_err(format!("bad {what} at byte {start}")));
        }
        Ok(std::str::from_utf8(&self.buf[start..self.pos]).unwrap().parse().unwrap())
    }
}

/// Decodes 8-bit binary PGM (`P5`, one channel) or PPM (`P6`, three channels).
pub fn decode_pnm(bytes: &[u8]) -> Result<Tensor> {
    let channels = match bytes.get(..2) {
        Some(b"P5") => 1,
        Some(b"P6") => 3,
        _ => return Err(img_err("not a binary PGM/PPM (expected P5 or P6)")),
    };
    let mut cur = Cursor { buf: bytes, pos: 2 };
    let width = cur.number("width")?;
    let height = cur.number("height")?;
    let maxval = cur.number("maxval")?;
    if width == 0 || height == 0 {
        return Err(img_err(format!("empty image {width}x{height}")));
    }
    if maxval == 0 || maxval > 255 {
        return Err(img_err(format!("maxval {maxval} unsupported (8-bit only)")));
    }
    match bytes.get(cur.pos) {
        Some(c) if c.is_ascii_whitespace() => cur.pos += 1,
        _ => return Err(img_err("missing whitespace after header")),
    }
    let n = width
        .checked_mul(height)
        .and_then(|p| p.checked_mul(channels))
        .ok_or_else(|| img_err("image dimensions overflow"))?;
    let body = &bytes[cur.pos..];
    if body.len() < n {
        return Err(img_err(format!("pixel data truncated: {} of {n} bytes", body.len())));
    }
    let scale = maxval as f64;
    let mut data = vec![0.0; n];
    for (i, &b) in body[..n].iter().enumerate() {
        let (pix, c) = (i / channels, i % channels);
        data[c * width * height + pix] = (b as f64 / scale).min(1.0);
    }
    Ok(Tensor::from_vec(&[channels, height, width], data)?)
}

/// Encodes a 1- or 3-channel image, clamping to `[0, 1]` and rounding to 8 bits.
pub fn encode_pnm(img: &Tensor) -> Result<Vec<u8>> {
    let (c, h, w) = match *img.shape() {
        [c @ (1 | 3), h, w] => (c, h, w),
        _ => return Err(img_err(format!("cannot encode shape {:?} as PGM/PPM", img.shape()))),
    };
    let mut out = format!("{}\n{w} {h}\n255\n", if c == 1 { "P5" } else { "P6" }).into_bytes();
    out.reserve(c * h * w);
    for pix in 0..h * w {
        for ch in 0..c {
            let v = img.data()[ch * h * w + pix];
            let v = if v.is_nan() { 0.0 } else { v.clamp(0.0, 1.0) };
            out.push((v * 255.0).round() as u8);
        }
    }
    Ok(out)
}

pub fn read_pnm(path: &std::path::Path) -> Result<Tensor> {
    let bytes = std::fs::read(path).map_err(|e| img_err(format!("{}: {e}", path.display())))?;
    decode_pnm(&bytes).map_err(|e| img_err(format!("{}: {e}", path.display())))
}

pub fn write_pnm(path: &std::path::Path, img: &Tensor) -> Result<()> {
    std::fs::write(path, encode_pnm(img)?).map_err(|e| img_err(format!("{}: {e}", path.display())))
}

/// Pixel image to latent: average-pool `2x - 1` by `factor`.
pub fn to_latent(img: &Tensor, factor: usize) -> Result<Tensor> {
    Ok(img.scale(2.0).add_scalar(-1.0).avg_pool2d(factor)?)
}

/// Latent to pixels: nearest upsample by `factor`, then back to `[0, 1]`.
pub fn from_latent(latent: &Tensor, factor: usize) -> Result<Tensor> {
    let up = latent.upsample_nearest2d(factor)?;
    let data = up.data().iter().map(|v| ((v + 1.0) / 2.0).clamp(0.0, 1.0)).collect();
    Ok(Tensor::from_vec(up.shape(), data)?)
}

/// Luminance of a 1- or 3-channel image as `[H×W]` values.
pub fn luminance(img: &Tensor) -> Result<Vec<f64>> {
    let (c, h, w) = dims(img)?;
    let n = h * w;
    let d = img.data();
    Ok(match c {
        1 => d.to_vec(),
        3 => (0..n).map(|i| 0.299 * d[i] + 0.587 * d[n + i] + 0.114 * d[2 * n + i]).collect(),
        _ => (0..n).map(|i| (0..c).map(|ch| d[ch * n + i]).sum::<f64>() / c as f64).collect(),
    })
}

fn dims(img: &Tensor) -> Result<(usize, usize, usize)> {
    match *img.shape() {
        [c, h, w] => Ok((c, h, w)),
        _ => Err(img_err(format!("expected [C×H×W], got {:?}", img.shape()))),
    }
}

/// Pixel box `(x, y, w, h)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct BoxXywh {
    pub x: usize,
    pub y: usize,
    pub w: usize,
    pub h: usize,
}

pub fn crop(img: &Tensor, b: BoxXywh) -> Result<Tensor> {
    let (c, h, w) = dims(img)?;
    if b.w == 0 || b.h == 0 || b.x + b.w > w || b.y + b.h > h {
        return Err(img_err(format!("box {b:?} outside {w}x{h} image")));
    }
    let mut data = Vec::with_capacity(c * b.w * b.h);
    for ch in 0..c {
        for y in b.y..b.y + b.h {
            let row = ch * h * w + y * w;
            data.extend_from_slice(&img.data()[row + b.x..row + b.x + b.w]);
        }
    }
    Ok(Tensor::from_vec(&[c, b.h, b.w], data)?)
}

/// Bilinear resize with half-pixel centers and edge clamping.
pub fn resize_bilinear(img: &Tensor, out_h: usize, out_w: usize) -> Result<Tensor> {
    let (c, h, w) = dims(img)?;
    if out_h == 0 || out_w == 0 {
        return Err(img_err("resize to an empty image"));
    }
    let src = |o: usize, n_out: usize, n_in: usize| {
        let p = ((o as f64 + 0.5) * n_in as f64 / n_out as f64 - 0.5).clamp(0.0, (n_in - 1) as f64);
        let i0 = p.floor() as usize;
        (i0, (i0 + 1).min(n_in - 1), p - i0 as f64)
    };
    let d = img.data();
    let mut out = vec![0.0; c * out_h * out_w];
    for oy in 0..out_h {
        let (y0, y1, fy) = src(oy, out_h, h);
        for ox in 0..out_w {
            let (x0, x1, fx) = src(ox, out_w, w);
            for ch in 0..c {
                let at = |y: usize, x: usize| d[ch * h * w + y * w + x];
                let top = at(y0, x0) * (1.0 - fx) + at(y0, x1) * fx;
                let bot = at(y1, x0) * (1.0 - fx) + at(y1, x1) * fx;
                out[ch * out_h * out_w + oy * out_w + ox] = top * (1.0 - fy) + bot * fy;
            }
        }
    }
    Ok(Tensor::from_vec(&[c, out_h, out_w], out)?)
}
