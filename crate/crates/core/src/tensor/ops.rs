use super::kernels::{self, col2im, im2col, matmul_nt_raw, matmul_raw, matmul_tn_raw, ConvGeom};
use super::{shape_err, Result, Tensor, TensorError};

fn unary(x: &Tensor, f: impl Fn(f64) -> f64, df: impl Fn(f64, f64) -> f64 + Send + Sync + 'static) -> Tensor {
    let out: Vec<f64> = x.data().iter().map(|&v| f(v)).collect();
    let xs = x.clone();
    let ys = out.clone();
    Tensor::from_op(x.shape().to_vec(), out, &[x], move |g, _| {
        let dx = g
            .iter()
            .zip(xs.data())
            .zip(&ys)
            .map(|((g, &x), &y)| g * df(x, y))
            .collect();
        vec![Some(dx)]
    })
}

fn sigmoid(v: f64) -> f64 {
    1.0 / (1.0 + (-v).exp())
}

#[derive(Clone, Copy)]
enum BinOp {
    Add,
    Sub,
    Mul,
}

impl Tensor {
    fn binary(&self, other: &Tensor, op: BinOp, name: &'static str) -> Result<Tensor> {
        let (a, b) = (self, other);
        // Only scalar tensors broadcast.
        let a_scalar = a.numel() == 1 && b.numel() != 1;
        let b_scalar = b.numel() == 1 && a.numel() != 1;
        if !a_scalar && !b_scalar && a.shape() != b.shape() {
            return Err(shape_err(name, format!("{:?} vs {:?}", a.shape(), b.shape())));
        }
        let shape = if a_scalar { b.shape().to_vec() } else { a.shape().to_vec() };
        let n = shape.iter().product::<usize>();
        let at = |i: usize| if a_scalar { a.data()[0] } else { a.data()[i] };
        let bt = |i: usize| if b_scalar { b.data()[0] } else { b.data()[i] };
        let out: Vec<f64> = (0..n)
            .map(|i| match op {
                BinOp::Add => at(i) + bt(i),
                BinOp::Sub => at(i) - bt(i),
                BinOp::Mul => at(i) * bt(i),
            })
            .collect();
        let (ac, bc) = (a.clone(), b.clone());
        Ok(Tensor::from_op(shape, out, &[a, b], move |g, mask| {
            let reduce = |v: Vec<f64>, scalar: bool| if scalar { vec![v.iter().sum()] } else { v };
            let da = mask[0].then(|| {
                let v: Vec<f64> = match op {
                    BinOp::Add | BinOp::Sub => g.to_vec(),
                    BinOp::Mul => g
                        .iter()
                        .enumerate()
                        .map(|(i, g)| g * if b_scalar { bc.data()[0] } else { bc.data()[i] })
                        .collect(),
                };
                reduce(v, a_scalar)
            });
            let db = mask[1].then(|| {
                let v: Vec<f64> = match op {
                    BinOp::Add => g.to_vec(),
                    BinOp::Sub => g.iter().map(|g| -g).collect(),
                    BinOp::Mul => g
                        .iter()
                        .enumerate()
                        .map(|(i, g)| g * if a_scalar { ac.data()[0] } else { ac.data()[i] })
                        .collect(),
                };
                reduce(v, b_scalar)
            });
            vec![da, db]
        }))
    }

    pub fn add(&self, other: &Tensor) -> Result<Tensor> {
        self.binary(other, BinOp::Add, "add")
    }

    pub fn sub(&self, other: &Tensor) -> Result<Tensor> {
        self.binary(other, BinOp::Sub, "sub")
    }

    pub fn mul(&self, other: &Tensor) -> Result<Tensor> {
        self.binary(other, BinOp::Mul, "mul")
    }

    pub fn scale(&self, factor: f64) -> Tensor {
        unary(self, |v| v * factor, move |_, _| factor)
    }

    pub fn add_scalar(&self, c: f64) -> Tensor {
        unary(self, |v| v + c, |_, _| 1.0)
    }

    pub fn square(&self) -> Tensor {
        unary(self, |v| v * v, |x, _| 2.0 * x)
    }

    pub fn exp(&self) -> Tensor {
        unary(self, f64::exp, |_, y| y)
    }

    pub fn tanh(&self) -> Tensor {
        unary(self, f64::tanh, |_, y| 1.0 - y * y)
    }

    pub fn relu(&self) -> Tensor {
        unary(self, |v| v.max(0.0), |x, _| if x > 0.0 { 1.0 } else { 0.0 })
    }

    pub fn silu(&self) -> Tensor {
        unary(
            self,
            |v| v * sigmoid(v),
            |x, _| {
                let s = sigmoid(x);
                s * (1.0 + x * (1.0 - s))
            },
        )
    }

    pub fn sum(&self) -> Tensor {
        let n = self.numel();
        let total = self.data().iter().sum();
        Tensor::from_op(vec![1], vec![total], &[self], move |g, _| vec![Some(vec![g[0]; n])])
    }

    pub fn mean(&self) -> Tensor {
        let n = self.numel();
        self.sum().scale(1.0 / n as f64)
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Tensor> {
        if shape.iter().product::<usize>() != self.numel() || shape.iter().any(|&d| d == 0) {
            return Err(shape_err("reshape", format!("{:?} -> {:?}", self.shape(), shape)));
        }
        Ok(Tensor::from_op(shape.to_vec(), self.to_vec(), &[self], |g, _| vec![Some(g.to_vec())]))
    }

    fn dims2(&self, op: &'static str) -> Result<(usize, usize)> {
        match *self.shape() {
            [m, n] => Ok((m, n)),
            _ => Err(shape_err(op, format!("expected rank 2, got {:?}", self.shape()))),
        }
    }

    pub fn transpose(&self) -> Result<Tensor> {
        let (m, n) = self.dims2("transpose")?;
        let t = |d: &[f64], rows: usize, cols: usize| {
            let mut out = vec![0.0; rows * cols];
            for i in 0..rows {
                for j in 0..cols {
                    out[j * rows + i] = d[i * cols + j];
                }
            }
            out
        };
        let out = t(self.data(), m, n);
        Ok(Tensor::from_op(vec![n, m], out, &[self], move |g, _| vec![Some(t(g, n, m))]))
    }

    pub fn matmul(&self, other: &Tensor) -> Result<Tensor> {
        let (m, k) = self.dims2("matmul")?;
        let (k2, n) = other.dims2("matmul")?;
        if k != k2 {
            return Err(shape_err("matmul", format!("[{m}x{k}] · [{k2}x{n}]")));
        }
        let out = matmul_raw(self.data(), other.data(), m, k, n);
        let (a, b) = (self.clone(), other.clone());
        Ok(Tensor::from_op(vec![m, n], out, &[self, other], move |g, mask| {
            let da = mask[0].then(|| matmul_nt_raw(g, b.data(), m, n, k));
            let db = mask[1].then(|| matmul_tn_raw(a.data(), g, k, m, n));
            vec![da, db]
        }))
    }

    /// Row-wise softmax of `logits + bias`.
    pub fn softmax_rows(&self, bias: Option<&Tensor>) -> Result<Tensor> {
        let (q, k) = self.dims2("softmax_rows")?;
        if !self.all_finite() {
            return Err(TensorError::NonFiniteInput { op: "softmax_rows" });
        }
        if let Some(b) = bias {
            if b.shape() != self.shape() {
                return Err(shape_err("softmax_rows", format!("bias {:?} vs logits {:?}", b.shape(), self.shape())));
            }
            if !b.all_finite() {
                return Err(TensorError::NonFiniteInput { op: "softmax_rows" });
            }
        }
        let mut out = vec![0.0; q * k];
        for i in 0..q {
            let row = &mut out[i * k..(i + 1) * k];
            // Shift each bias row by its minimum: exact under softmax, and a
            // row-constant bias then adds exactly zero.
            let brow = bias.map(|b| &b.data()[i * k..(i + 1) * k]);
            let bmin = brow.map_or(0.0, |b| b.iter().copied().fold(f64::INFINITY, f64::min));
            for (j, r) in row.iter_mut().enumerate() {
                *r = self.data()[i * k + j] + brow.map_or(0.0, |b| b[j] - bmin);
            }
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let mut total = 0.0;
            for r in row.iter_mut() {
                *r = (*r - max).exp();
                total += *r;
            }
            for r in row.iter_mut() {
                *r /= total;
            }
        }
        let y = out.clone();
        let grad = move |g: &[f64], _: &[bool]| {
            let mut dx = vec![0.0; q * k];
            for i in 0..q {
                let yr = &y[i * k..(i + 1) * k];
                let gr = &g[i * k..(i + 1) * k];
                let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                for j in 0..k {
                    dx[i * k + j] = yr[j] * (gr[j] - dot);
                }
            }
            dx
        };
        Ok(match bias {
            Some(b) => Tensor::from_op(vec![q, k], out, &[self, b], move |g, m| {
                let dx = grad(g, m);
                vec![m[0].then(|| dx.clone()), m[1].then_some(dx)]
            }),
            None => Tensor::from_op(vec![q, k], out, &[self], move |g, m| vec![Some(grad(g, m))]),
        })
    }

    /// Normalizes every row to zero mean and unit variance.
    pub fn layer_norm_rows(&self, eps: f64) -> Result<Tensor> {
        let (m, n) = self.dims2("layer_norm_rows")?;
        let mut out = vec![0.0; m * n];
        let mut inv_std = vec![0.0; m];
        for i in 0..m {
            let row = &self.data()[i * n..(i + 1) * n];
            let mu = row.iter().sum::<f64>() / n as f64;
            let var = row.iter().map(|v| (v - mu) * (v - mu)).sum::<f64>() / n as f64;
            let s = 1.0 / (var + eps).sqrt();
            inv_std[i] = s;
            for j in 0..n {
                out[i * n + j] = (row[j] - mu) * s;
            }
        }
        let y = out.clone();
        Ok(Tensor::from_op(vec![m, n], out, &[self], move |g, _| {
            let mut dx = vec![0.0; m * n];
            for i in 0..m {
                let gr = &g[i * n..(i + 1) * n];
                let yr = &y[i * n..(i + 1) * n];
                let gm = gr.iter().sum::<f64>() / n as f64;
                let gym = gr.iter().zip(yr).map(|(a, b)| a * b).sum::<f64>() / n as f64;
                for j in 0..n {
                    dx[i * n + j] = inv_std[i] * (gr[j] - gm - yr[j] * gym);
                }
            }
            vec![Some(dx)]
        }))
    }

    fn dims3(&self, op: &'static str) -> Result<(usize, usize, usize)> {
        match *self.shape() {
            [c, h, w] => Ok((c, h, w)),
            _ => Err(shape_err(op, format!("expected [C×H×W], got {:?}", self.shape()))),
        }
    }

    /// 2-D cross-correlation of `[C_in×H×W]` with `[C_out×C_in×kh×kw]`.
    pub fn conv2d(&self, kernel: &Tensor, bias: Option<&Tensor>, stride: usize, padding: usize) -> Result<Tensor> {
        let (c_in, h, w) = self.dims3("conv2d")?;
        let [c_out, kc, kh, kw] = *kernel.shape() else {
            return Err(shape_err("conv2d", format!("kernel must be rank 4, got {:?}", kernel.shape())));
        };
        if kc != c_in {
            return Err(shape_err("conv2d", format!("kernel expects {kc} input channels, input has {c_in}")));
        }
        if stride == 0 {
            return Err(TensorError::InvalidArgument { op: "conv2d", detail: "stride 0".into() });
        }
        let (ph, pw) = (h + 2 * padding, w + 2 * padding);
        if kh > ph || kw > pw || (ph - kh) % stride != 0 || (pw - kw) % stride != 0 {
            return Err(shape_err(
                "conv2d",
                format!("kernel {kh}x{kw} stride {stride} does not tile padded input {ph}x{pw}"),
            ));
        }
        if let Some(b) = bias {
            if b.shape() != [c_out] {
                return Err(shape_err("conv2d", format!("bias {:?}, expected [{c_out}]", b.shape())));
            }
        }
        let g = ConvGeom { c_in, h, w, kh, kw, stride, pad: padding, ho: (ph - kh) / stride + 1, wo: (pw - kw) / stride + 1 };
        let cols = im2col(self.data(), &g);
        let (kr, nc) = (g.col_rows(), g.col_cols());
        let mut out = matmul_raw(kernel.data(), &cols, c_out, kr, nc);
        if let Some(b) = bias {
            for (o, chunk) in out.chunks_mut(nc).enumerate() {
                chunk.iter_mut().for_each(|v| *v += b.data()[o]);
            }
        }
        let k = kernel.clone();
        let backward = move |gr: &[f64], mask: &[bool]| {
            let dx = mask[0].then(|| col2im(&matmul_tn_raw(k.data(), gr, kr, c_out, nc), &g));
            let dk = mask[1].then(|| matmul_nt_raw(gr, &cols, c_out, nc, kr));
            let mut v = vec![dx, dk];
            if mask.len() > 2 {
                v.push(mask[2].then(|| gr.chunks(nc).map(|c| c.iter().sum()).collect()));
            }
            v
        };
        let shape = vec![c_out, g.ho, g.wo];
        Ok(match bias {
            Some(b) => Tensor::from_op(shape, out, &[self, kernel, b], backward),
            None => Tensor::from_op(shape, out, &[self, kernel], backward),
        })
    }

    /// Max pooling over the trailing two axes of `[C×H×W]` (or `[H×W]`).
    /// Gradient goes to the first maximal element in row-major order.
    pub fn maxpool2d(&self, window: usize, stride: usize) -> Result<Tensor> {
        let (c, h, w, squeeze) = match *self.shape() {
            [h, w] => (1, h, w, true),
            [c, h, w] => (c, h, w, false),
            _ => return Err(shape_err("maxpool2d", format!("expected rank 2 or 3, got {:?}", self.shape()))),
        };
        if window == 0 || stride == 0 || window > h || window > w || (h - window) % stride != 0 || (w - window) % stride != 0 {
            return Err(shape_err("maxpool2d", format!("window {window} stride {stride} does not tile {h}x{w}")));
        }
        let (ho, wo) = ((h - window) / stride + 1, (w - window) / stride + 1);
        let mut out = vec![0.0; c * ho * wo];
        let mut arg = vec![0usize; c * ho * wo];
        let x = self.data();
        for ch in 0..c {
            for oy in 0..ho {
                for ox in 0..wo {
                    let mut best = f64::NEG_INFINITY;
                    let mut best_i = usize::MAX;
                    for dy in 0..window {
                        for dx in 0..window {
                            let i = (ch * h + oy * stride + dy) * w + ox * stride + dx;
                            if best_i == usize::MAX || x[i] > best {
                                best = x[i];
                                best_i = i;
                            }
                        }
                    }
                    let o = (ch * ho + oy) * wo + ox;
                    out[o] = best;
                    arg[o] = best_i;
                }
            }
        }
        let n = self.numel();
        let shape = if squeeze { vec![ho, wo] } else { vec![c, ho, wo] };
        Ok(Tensor::from_op(shape, out, &[self], move |g, _| {
            let mut dx = vec![0.0; n];
            for (o, &i) in arg.iter().enumerate() {
                dx[i] += g[o];
            }
            vec![Some(dx)]
        }))
    }

    /// Non-overlapping max pooling with an independent window per axis.
    /// Every window must divide its axis. Ties route to the first element in
    /// row-major order.
    pub fn max_pool_blocks(&self, windows: &[usize]) -> Result<Tensor> {
        if windows.len() != self.rank() {
            return Err(shape_err("max_pool_blocks", format!("{} windows for rank {}", windows.len(), self.rank())));
        }
        let mut out_shape = Vec::with_capacity(self.rank());
        for (&d, &wdw) in self.shape().iter().zip(windows) {
            if wdw == 0 || d % wdw != 0 {
                return Err(shape_err("max_pool_blocks", format!("window {wdw} does not divide extent {d}")));
            }
            out_shape.push(d / wdw);
        }
        let in_strides = kernels::strides(self.shape());
        let out_strides = kernels::strides(&out_shape);
        let n_out: usize = out_shape.iter().product();
        let mut out = vec![f64::NEG_INFINITY; n_out];
        let mut arg = vec![usize::MAX; n_out];
        for (i, &v) in self.data().iter().enumerate() {
            let mut o = 0;
            let mut rem = i;
            for ax in 0..self.rank() {
                let idx = rem / in_strides[ax];
                rem %= in_strides[ax];
                o += (idx / windows[ax]) * out_strides[ax];
            }
            if arg[o] == usize::MAX || v > out[o] {
                out[o] = v;
                arg[o] = i;
            }
        }
        let n = self.numel();
        Ok(Tensor::from_op(out_shape, out, &[self], move |g, _| {
            let mut dx = vec![0.0; n];
            for (o, &i) in arg.iter().enumerate() {
                dx[i] += g[o];
            }
            vec![Some(dx)]
        }))
    }

    /// Non-overlapping `factor×factor` average pooling of `[C×H×W]`.
    pub fn avg_pool2d(&self, factor: usize) -> Result<Tensor> {
        let (c, h, w) = self.dims3("avg_pool2d")?;
        if factor == 0 || h % factor != 0 || w % factor != 0 {
            return Err(shape_err("avg_pool2d", format!("factor {factor} does not divide {h}x{w}")));
        }
        let (ho, wo) = (h / factor, w / factor);
        let inv = 1.0 / (factor * factor) as f64;
        let mut out = vec![0.0; c * ho * wo];
        for ch in 0..c {
            for y in 0..h {
                for x in 0..w {
                    out[(ch * ho + y / factor) * wo + x / factor] += self.data()[(ch * h + y) * w + x] * inv;
                }
            }
        }
        Ok(Tensor::from_op(vec![c, ho, wo], out, &[self], move |g, _| {
            let mut dx = vec![0.0; c * h * w];
            for ch in 0..c {
                for y in 0..h {
                    for x in 0..w {
                        dx[(ch * h + y) * w + x] = g[(ch * ho + y / factor) * wo + x / factor] * inv;
                    }
                }
            }
            vec![Some(dx)]
        }))
    }

    /// Nearest-neighbour upsampling of `[C×H×W]` by an integer factor.
    pub fn upsample_nearest2d(&self, factor: usize) -> Result<Tensor> {
        let (c, h, w) = self.dims3("upsample_nearest2d")?;
        if factor == 0 {
            return Err(TensorError::InvalidArgument { op: "upsample_nearest2d", detail: "factor 0".into() });
        }
        let (ho, wo) = (h * factor, w * factor);
        let mut out = vec![0.0; c * ho * wo];
        for ch in 0..c {
            for y in 0..ho {
                for x in 0..wo {
                    out[(ch * ho + y) * wo + x] = self.data()[(ch * h + y / factor) * w + x / factor];
                }
            }
        }
        Ok(Tensor::from_op(vec![c, ho, wo], out, &[self], move |g, _| {
            let mut dx = vec![0.0; c * h * w];
            for ch in 0..c {
                for y in 0..ho {
                    for x in 0..wo {
                        dx[(ch * h + y / factor) * w + x / factor] += g[(ch * ho + y) * wo + x];
                    }
                }
            }
            vec![Some(dx)]
        }))
    }

    /// Concatenates along `axis`; all other extents must agree.
    pub fn concat(parts: &[Tensor], axis: usize) -> Result<Tensor> {
        let first = parts.first().ok_or_else(|| shape_err("concat", "no inputs"))?;
        let rank = first.rank();
        if axis >= rank {
            return Err(shape_err("concat", format!("axis {axis} for rank {rank}")));
        }
        for p in parts {
            let ok = p.rank() == rank
                && p.shape().iter().zip(first.shape()).enumerate().all(|(i, (a, b))| i == axis || a == b);
            if !ok {
                return Err(shape_err("concat", format!("{:?} vs {:?} on axis {axis}", p.shape(), first.shape())));
            }
        }
        let outer: usize = first.shape()[..axis].iter().product();
        let inner: usize = first.shape()[axis + 1..].iter().product();
        let widths: Vec<usize> = parts.iter().map(|p| p.shape()[axis] * inner).collect();
        let total_w: usize = widths.iter().sum();
        let mut out = Vec::with_capacity(outer * total_w);
        for o in 0..outer {
            for (p, &wd) in parts.iter().zip(&widths) {
                out.extend_from_slice(&p.data()[o * wd..(o + 1) * wd]);
            }
        }
        let mut shape = first.shape().to_vec();
        shape[axis] = widths.iter().sum::<usize>() / inner;
        let refs: Vec<&Tensor> = parts.iter().collect();
        Ok(Tensor::from_op(shape, out, &refs, move |g, mask| {
            let mut grads: Vec<Vec<f64>> = widths.iter().map(|&wd| Vec::with_capacity(outer * wd)).collect();
            for o in 0..outer {
                let mut off = o * total_w;
                for (gr, &wd) in grads.iter_mut().zip(&widths) {
                    gr.extend_from_slice(&g[off..off + wd]);
                    off += wd;
                }
            }
            grads.into_iter().zip(mask).map(|(gr, &m)| m.then_some(gr)).collect()
        }))
    }

    /// Slice `len` entries starting at `start` along `axis`.
    pub fn narrow(&self, axis: usize, start: usize, len: usize) -> Result<Tensor> {
        if axis >= self.rank() || len == 0 || start + len > self.shape()[axis] {
            return Err(shape_err("narrow", format!("axis {axis} [{start}, {}) of {:?}", start + len, self.shape())));
        }
        let outer: usize = self.shape()[..axis].iter().product();
        let inner: usize = self.shape()[axis + 1..].iter().product();
        let full = self.shape()[axis] * inner;
        let mut out = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            out.extend_from_slice(&self.data()[o * full + start * inner..o * full + (start + len) * inner]);
        }
        let mut shape = self.shape().to_vec();
        shape[axis] = len;
        let n = self.numel();
        Ok(Tensor::from_op(shape, out, &[self], move |g, _| {
            let mut dx = vec![0.0; n];
            for o in 0..outer {
                dx[o * full + start * inner..o * full + (start + len) * inner]
                    .copy_from_slice(&g[o * len * inner..(o + 1) * len * inner]);
            }
            vec![Some(dx)]
        }))
    }

    /// Adds `bias[c]` to every element of channel `c` of a `[C, ...]` tensor.
    pub fn add_channel(&self, bias: &Tensor) -> Result<Tensor> {
        let c = self.shape()[0];
        if bias.shape() != [c] {
            return Err(shape_err("add_channel", format!("bias {:?} for {:?}", bias.shape(), self.shape())));
        }
        let inner = self.numel() / c;
        let out: Vec<f64> = self.data().iter().enumerate().map(|(i, v)| v + bias.data()[i / inner]).collect();
        Ok(Tensor::from_op(self.shape().to_vec(), out, &[self, bias], move |g, mask| {
            vec![
                mask[0].then(|| g.to_vec()),
                mask[1].then(|| g.chunks(inner).map(|ch| ch.iter().sum()).collect()),
            ]
        }))
    }

    /// Adds `bias[j]` to column `j` of every row of an `[m×n]` tensor.
    pub fn add_row(&self, bias: &Tensor) -> Result<Tensor> {
        let (_, n) = self.dims2("add_row")?;
        if bias.shape() != [n] {
            return Err(shape_err("add_row", format!("bias {:?} for {:?}", bias.shape(), self.shape())));
        }
        let out: Vec<f64> = self.data().iter().enumerate().map(|(i, v)| v + bias.data()[i % n]).collect();
        Ok(Tensor::from_op(self.shape().to_vec(), out, &[self, bias], move |g, mask| {
            let db = mask[1].then(|| {
                let mut db = vec![0.0; n];
                for row in g.chunks(n) {
                    db.iter_mut().zip(row).for_each(|(a, b)| *a += b);
                }
                db
            });
            vec![mask[0].then(|| g.to_vec()), db]
        }))
    }

    /// Divides each row of `[m×n]` by its sum. Every row sum must be positive.
    pub fn normalize_rows(&self) -> Result<Tensor> {
        let (_, n) = self.dims2("normalize_rows")?;
        let sums: Vec<f64> = self.data().chunks(n).map(|r| r.iter().sum()).collect();
        if let Some((i, s)) = sums.iter().enumerate().find(|(_, s)| !(**s > 0.0 && s.is_finite())) {
            return Err(TensorError::InvalidArgument { op: "normalize_rows", detail: format!("row {i} sums to {s}") });
        }
        let out: Vec<f64> = self.data().iter().enumerate().map(|(i, v)| v / sums[i / n]).collect();
        let ys = out.clone();
        Ok(Tensor::from_op(self.shape().to_vec(), out, &[self], move |g, _| {
            let mut dx = vec![0.0; g.len()];
            for (r, s) in sums.iter().enumerate() {
                let row = r * n..(r + 1) * n;
                let dot: f64 = g[row.clone()].iter().zip(&ys[row.clone()]).map(|(a, b)| a * b).sum();
                for j in row {
                    dx[j] = (g[j] - dot) / s;
                }
            }
            vec![Some(dx)]
        }))
    }
}
