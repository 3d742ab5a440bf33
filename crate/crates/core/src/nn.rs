//! Named parameter storage and the layer building blocks shared by the
//! frozen backbone and its trainable copy.

use std::collections::BTreeMap;

use rand::Rng;

use crate::enhance::{biased_cross_attention, BiasSpec, CrossAttentionWeights};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Parameters keyed by stable dotted names, e.g. `backbone.enc0.res.conv1.w`.
#[derive(Debug, Clone, Default)]
pub struct ParamStore {
    map: BTreeMap<String, Tensor>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn get(&self, name: &str) -> Result<&Tensor> {
        self.map.get(name).ok_or_else(|| Error::MissingParam(name.to_string()))
    }

    pub fn insert(&mut self, name: impl Into<String>, t: Tensor) {
        self.map.insert(name.into(), t);
    }

    pub fn contains(&self, name: &str) -> bool {
        self.map.contains_key(name)
    }

    pub fn len(&self) -> usize {
        self.map.len()
    }

    pub fn is_empty(&self) -> bool {
        self.map.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor)> {
        self.map.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&String, &mut Tensor)> {
        self.map.iter_mut()
    }

    pub fn names(&self) -> impl Iterator<Item = &String> {
        self.map.keys()
    }

    /// Replaces every tensor by a fresh leaf with the given trainability.
    /// Drops any recorded graph and accumulated gradient.
    pub fn set_trainable(&mut self, trainable: bool) {
        for t in self.map.values_mut() {
            *t = t.with_requires_grad(trainable);
        }
    }

    pub fn zero_grad(&self) {
        self.map.values().for_each(Tensor::zero_grad);
    }

    /// Bitwise equality of names, shapes and values.
    pub fn bit_eq(&self, other: &ParamStore) -> bool {
        self.map.len() == other.map.len()
            && self.map.iter().zip(&other.map).all(|((n1, t1), (n2, t2))| n1 == n2 && t1.bit_eq(t2))
    }

    /// Order-fixed FNV-1a digest over names and raw value bits.
    pub fn digest(&self) -> u64 {
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        let mut eat = |bytes: &[u8]| {
            for b in bytes {
                h ^= *b as u64;
                h = h.wrapping_mul(0x100_0000_01b3);
            }
        };
        for (name, t) in &self.map {
            eat(name.as_bytes());
            for v in t.data() {
                eat(&v.to_bits().to_le_bytes());
            }
        }
        h
    }
}

/// Uniform(-1/sqrt(fan_in), 1/sqrt(fan_in)) initialization.
pub fn init_uniform(shape: &[usize], fan_in: usize, rng: &mut impl Rng) -> Tensor {
    let bound = 1.0 / (fan_in as f64).sqrt();
    Tensor::uniform(shape, -bound, bound, rng)
}

pub fn add_conv(store: &mut ParamStore, name: &str, c_in: usize, c_out: usize, k: usize, rng: &mut impl Rng) {
    store.insert(format!("{name}.w"), init_uniform(&[c_out, c_in, k, k], c_in * k * k, rng));
    store.insert(format!("{name}.b"), Tensor::zeros(&[c_out]));
}

pub fn add_zero_conv(store: &mut ParamStore, name: &str, c_in: usize, c_out: usize, k: usize) {
    store.insert(format!("{name}.w"), Tensor::zeros(&[c_out, c_in, k, k]));
    store.insert(format!("{name}.b"), Tensor::zeros(&[c_out]));
}

pub fn add_linear(store: &mut ParamStore, name: &str, d_in: usize, d_out: usize, bias: bool, rng: &mut impl Rng) {
    store.insert(format!("{name}.w"), init_uniform(&[d_in, d_out], d_in, rng));
    if bias {
        store.insert(format!("{name}.b"), Tensor::zeros(&[d_out]));
    }
}

pub fn conv(store: &ParamStore, name: &str, x: &Tensor, stride: usize, padding: usize) -> Result<Tensor> {
    let w = store.get(&format!("{name}.w"))?;
    let b = store.get(&format!("{name}.b"))?;
    Ok(x.conv2d(w, Some(b), stride, padding)?)
}

/// `x[m×d_in] · W + b`.
pub fn linear(store: &ParamStore, name: &str, x: &Tensor) -> Result<Tensor> {
    let y = x.matmul(store.get(&format!("{name}.w"))?)?;
    match store.get(&format!("{name}.b")) {
        Ok(b) => Ok(y.add_row(b)?),
        Err(_) => Ok(y),
    }
}

pub fn add_res_block(store: &mut ParamStore, name: &str, c_in: usize, c_out: usize, time_width: usize, rng: &mut impl Rng) {
    add_conv(store, &format!("{name}.conv1"), c_in, c_out, 3, rng);
    add_linear(store, &format!("{name}.temb"), time_width, c_out, true, rng);
    add_conv(store, &format!("{name}.conv2"), c_out, c_out, 3, rng);
    if c_in != c_out {
        add_conv(store, &format!("{name}.skip"), c_in, c_out, 1, rng);
    }
}

/// `skip(x) + conv2(silu(conv1(silu(x)) + temb))`.
pub fn res_block(store: &ParamStore, name: &str, x: &Tensor, temb: &Tensor) -> Result<Tensor> {
    let h = conv(store, &format!("{name}.conv1"), &x.silu(), 1, 1)?;
    let t = linear(store, &format!("{name}.temb"), &temb.silu())?;
    let c = t.numel();
    let h = h.add_channel(&t.reshape(&[c])?)?;
    let h = conv(store, &format!("{name}.conv2"), &h.silu(), 1, 1)?;
    let skip_name = format!("{name}.skip");
    let skip = if store.contains(&format!("{skip_name}.w")) { conv(store, &skip_name, x, 1, 0)? } else { x.clone() };
    Ok(skip.add(&h)?)
}

pub fn add_transformer(store: &mut ParamStore, name: &str, channels: usize, text_width: usize, rng: &mut impl Rng) {
    for p in ["q", "k", "v"] {
        add_linear(store, &format!("{name}.self.{p}"), channels, channels, false, rng);
    }
    add_linear(store, &format!("{name}.self.o"), channels, channels, true, rng);
    add_linear(store, &format!("{name}.cross.q"), channels, channels, false, rng);
    add_linear(store, &format!("{name}.cross.k"), text_width, channels, false, rng);
    add_linear(store, &format!("{name}.cross.v"), text_width, channels, false, rng);
    add_linear(store, &format!("{name}.cross.o"), channels, channels, true, rng);
    add_linear(store, &format!("{name}.ff.l1"), channels, 2 * channels, true, rng);
    add_linear(store, &format!("{name}.ff.l2"), 2 * channels, channels, true, rng);
}

/// Output of one transformer block with the attention maps it produced.
#[derive(Debug, Clone)]
pub struct TransformerOut {
    pub features: Tensor,
    /// Head-averaged spatial self-attention, `[N×N]` with `N = H·W`.
    pub self_attn: Tensor,
    /// Head-averaged cross-attention over text tokens, `[N×L]`.
    pub cross_attn: Tensor,
}

fn split_heads(x: &Tensor, heads: usize) -> Result<Vec<Tensor>> {
    let d = x.shape()[1];
    if d % heads != 0 {
        return Err(Error::ConfigMismatch(format!("{d} channels not divisible by {heads} heads")));
    }
    let dh = d / heads;
    (0..heads).map(|h| Ok(x.narrow(1, h * dh, dh)?)).collect()
}

fn mean_of(maps: &[Tensor]) -> Result<Tensor> {
    let mut acc = maps[0].clone();
    for m in &maps[1..] {
        acc = acc.add(m)?;
    }
    Ok(acc.scale(1.0 / maps.len() as f64))
}

/// Multi-head scaled dot-product self-attention over the rows of `x[N×C]`.
/// Returns the projected output and the head-averaged map.
pub fn self_attention(store: &ParamStore, name: &str, x: &Tensor, heads: usize) -> Result<(Tensor, Tensor)> {
    let q = split_heads(&linear(store, &format!("{name}.q"), x)?, heads)?;
    let k = split_heads(&linear(store, &format!("{name}.k"), x)?, heads)?;
    let v = split_heads(&linear(store, &format!("{name}.v"), x)?, heads)?;
    let scale = 1.0 / (q[0].shape()[1] as f64).sqrt();
    let mut outs = Vec::with_capacity(heads);
    let mut maps = Vec::with_capacity(heads);
    for h in 0..heads {
        let logits = q[h].matmul(&k[h].transpose()?)?.scale(scale);
        let a = logits.softmax_rows(None)?;
        outs.push(a.matmul(&v[h])?);
        maps.push(a);
    }
    let o = linear(store, &format!("{name}.o"), &Tensor::concat(&outs, 1)?)?;
    Ok((o, mean_of(&maps)?))
}

/// Pre-norm transformer block (self-attention, cross-attention, feed-forward)
/// on a `[C×H×W]` feature map. `bias` only applies inside cross-attention.
pub fn transformer(
    store: &ParamStore,
    name: &str,
    x: &Tensor,
    text: &Tensor,
    heads: usize,
    bias: Option<&BiasSpec>,
) -> Result<TransformerOut> {
    let [c, h, w] = *x.shape() else {
        return Err(Error::ShapeMismatch(format!("transformer input {:?}", x.shape())));
    };
    let tokens = x.reshape(&[c, h * w])?.transpose()?;

    let normed = tokens.layer_norm_rows(1e-5)?;
    let (sa, self_attn) = self_attention(store, &format!("{name}.self"), &normed, heads)?;
    let tokens = tokens.add(&sa)?;

    let normed = tokens.layer_norm_rows(1e-5)?;
    let weights = CrossAttentionWeights {
        query: store.get(&format!("{name}.cross.q.w"))?.clone(),
        key: store.get(&format!("{name}.cross.k.w"))?.clone(),
        value: store.get(&format!("{name}.cross.v.w"))?.clone(),
        heads,
    };
    let cross = biased_cross_attention(&normed, text, &weights, bias)?;
    let ca = linear(store, &format!("{name}.cross.o"), &cross.output)?;
    let tokens = tokens.add(&ca)?;

    let normed = tokens.layer_norm_rows(1e-5)?;
    let ff = linear(store, &format!("{name}.ff.l2"), &linear(store, &format!("{name}.ff.l1"), &normed)?.silu())?;
    let tokens = tokens.add(&ff)?;

    Ok(TransformerOut {
        features: tokens.transpose()?.reshape(&[c, h, w])?,
        self_attn,
        cross_attn: cross.attention,
    })
}
