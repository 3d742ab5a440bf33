//! Dense 64-bit tensors with tape-free reverse-mode autodiff.
//!
//! Every op that has at least one input with `requires_grad` records a
//! backward closure together with its parents. `backward` walks that graph in
//! reverse topological order and accumulates gradients into the leaves.
//! Tensors are immutable once created; only the leaf gradient buffer mutates.

mod container;
mod kernels;
mod ops;

use std::collections::HashMap;
use std::fmt;
use std::sync::{Arc, Mutex};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal, Uniform};

pub use container::{read_container, write_container, ContainerError, NamedTensors, MAGIC, VERSION};
pub use kernels::{matmul_raw, matmul_nt_raw, matmul_tn_raw};

#[derive(Debug, thiserror::Error, Clone, PartialEq)]
pub enum TensorError {
    #[error("shape mismatch in {op}: {detail}")]
    ShapeMismatch { op: &'static str, detail: String },
    #[error("non-finite input to {op}")]
    NonFiniteInput { op: &'static str },
    #[error("backward requires a scalar loss, got shape {0:?}")]
    NotScalar(Vec<usize>),
    #[error("invalid argument to {op}: {detail}")]
    InvalidArgument { op: &'static str, detail: String },
}

pub type Result<T> = std::result::Result<T, TensorError>;

pub(crate) fn shape_err(op: &'static str, detail: impl Into<String>) -> TensorError {
    TensorError::ShapeMismatch { op, detail: detail.into() }
}

/// Deterministic seed. Identical seed plus identical op sequence gives
/// bit-identical outputs.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default)]
pub struct Seed(pub u64);

impl Seed {
    pub fn rng(self) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(self.0)
    }

    /// Derive an independent stream, e.g. one per epoch or per sample.
    pub fn derive(self, stream: u64) -> Seed {
        // splitmix64 finalizer over the pair
        let mut z = self.0 ^ stream.wrapping_mul(0x9E37_79B9_7F4A_7C15);
        z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
        Seed(z ^ (z >> 31))
    }
}

type BackwardFn = Box<dyn Fn(&[f64], &[bool]) -> Vec<Option<Vec<f64>>> + Send + Sync>;

struct GradFn {
    parents: Vec<Tensor>,
    backward: BackwardFn,
}

struct Node {
    shape: Vec<usize>,
    data: Vec<f64>,
    requires_grad: bool,
    grad: Mutex<Option<Vec<f64>>>,
    grad_fn: Option<GradFn>,
}

/// Reference-counted handle; cloning is cheap and shares the node.
#[derive(Clone)]
pub struct Tensor(Arc<Node>);

impl fmt::Debug for Tensor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let preview: Vec<f64> = self.0.data.iter().take(8).copied().collect();
        f.debug_struct("Tensor")
            .field("shape", &self.0.shape)
            .field("requires_grad", &self.0.requires_grad)
            .field("data", &preview)
            .finish()
    }
}

impl Tensor {
    pub fn from_vec(shape: &[usize], data: Vec<f64>) -> Result<Tensor> {
        if shape.iter().any(|&d| d == 0) {
            return Err(shape_err("from_vec", format!("zero extent in {shape:?}")));
        }
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(shape_err(
                "from_vec",
                format!("shape {shape:?} needs {n} values, got {}", data.len()),
            ));
        }
        Ok(Tensor::raw(shape.to_vec(), data, false))
    }

    pub(crate) fn raw(shape: Vec<usize>, data: Vec<f64>, requires_grad: bool) -> Tensor {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        Tensor(Arc::new(Node {
            shape,
            data,
            requires_grad,
            grad: Mutex::new(None),
            grad_fn: None,
        }))
    }

    /// Builds the result of an op. A backward closure is only kept when some
    /// parent participates in differentiation.
    pub(crate) fn from_op(
        shape: Vec<usize>,
        data: Vec<f64>,
        parents: &[&Tensor],
        backward: impl Fn(&[f64], &[bool]) -> Vec<Option<Vec<f64>>> + Send + Sync + 'static,
    ) -> Tensor {
        let tracked = parents.iter().any(|p| p.requires_grad());
        if !tracked {
            return Tensor::raw(shape, data, false);
        }
        Tensor(Arc::new(Node {
            shape,
            data,
            requires_grad: true,
            grad: Mutex::new(None),
            grad_fn: Some(GradFn {
                parents: parents.iter().map(|&p| p.clone()).collect(),
                backward: Box::new(backward),
            }),
        }))
    }

    pub fn zeros(shape: &[usize]) -> Tensor {
        Tensor::full(shape, 0.0)
    }

    pub fn ones(shape: &[usize]) -> Tensor {
        Tensor::full(shape, 1.0)
    }

    pub fn full(shape: &[usize], value: f64) -> Tensor {
        let n = shape.iter().product();
        Tensor::raw(shape.to_vec(), vec![value; n], false)
    }

    pub fn scalar(value: f64) -> Tensor {
        Tensor::raw(vec![1], vec![value], false)
    }

    pub fn eye(n: usize) -> Tensor {
        let mut data = vec![0.0; n * n];
        for i in 0..n {
            data[i * n + i] = 1.0;
        }
        Tensor::raw(vec![n, n], data, false)
    }

    pub fn randn(shape: &[usize], rng: &mut impl rand::Rng) -> Tensor {
        let n = shape.iter().product();
        let data = (0..n).map(|_| StandardNormal.sample(rng)).collect();
        Tensor::raw(shape.to_vec(), data, false)
    }

    pub fn uniform(shape: &[usize], low: f64, high: f64, rng: &mut impl rand::Rng) -> Tensor {
        let n = shape.iter().product();
        let dist = Uniform::new(low, high).expect("low < high");
        let data = (0..n).map(|_| dist.sample(rng)).collect();
        Tensor::raw(shape.to_vec(), data, false)
    }

    /// Trainable leaf holding a copy of this tensor's values.
    pub fn param(&self) -> Tensor {
        Tensor::raw(self.0.shape.clone(), self.0.data.clone(), true)
    }

    /// Non-trainable leaf holding a copy of this tensor's values.
    pub fn detach(&self) -> Tensor {
        Tensor::raw(self.0.shape.clone(), self.0.data.clone(), false)
    }

    pub fn with_requires_grad(&self, requires_grad: bool) -> Tensor {
        if requires_grad {
            self.param()
        } else {
            self.detach()
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.0.shape
    }

    pub fn rank(&self) -> usize {
        self.0.shape.len()
    }

    pub fn numel(&self) -> usize {
        self.0.data.len()
    }

    pub fn data(&self) -> &[f64] {
        &self.0.data
    }

    pub fn to_vec(&self) -> Vec<f64> {
        self.0.data.clone()
    }

    pub fn item(&self) -> f64 {
        self.0.data[0]
    }

    pub fn requires_grad(&self) -> bool {
        self.0.requires_grad
    }

    pub fn is_leaf(&self) -> bool {
        self.0.grad_fn.is_none()
    }

    /// Accumulated gradient of a leaf, if any backward pass reached it.
    pub fn grad(&self) -> Option<Vec<f64>> {
        self.0.grad.lock().expect("grad lock").clone()
    }

    pub fn grad_or_zeros(&self) -> Vec<f64> {
        self.grad().unwrap_or_else(|| vec![0.0; self.numel()])
    }

    pub fn zero_grad(&self) {
        *self.0.grad.lock().expect("grad lock") = None;
    }

    pub fn same_storage(&self, other: &Tensor) -> bool {
        Arc::ptr_eq(&self.0, &other.0)
    }

    /// Bitwise equality of shape and values.
    pub fn bit_eq(&self, other: &Tensor) -> bool {
        self.shape() == other.shape()
            && self
                .data()
                .iter()
                .zip(other.data())
                .all(|(a, b)| a.to_bits() == b.to_bits())
    }

    pub fn max_abs_diff(&self, other: &Tensor) -> f64 {
        self.data()
            .iter()
            .zip(other.data())
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }

    pub fn all_finite(&self) -> bool {
        self.data().iter().all(|v| v.is_finite())
    }

    /// Reverse pass from a scalar loss. Leaves with `requires_grad` that are
    /// unreachable keep whatever gradient they had (none means zero).
    pub fn backward(&self) -> Result<()> {
        if self.numel() != 1 {
            return Err(TensorError::NotScalar(self.shape().to_vec()));
        }
        if !self.requires_grad() {
            return Ok(());
        }
        let order = self.topo_order();
        let mut grads: HashMap<*const Node, Vec<f64>> = HashMap::new();
        grads.insert(Arc::as_ptr(&self.0), vec![1.0]);
        for node in order.iter().rev() {
            let key = Arc::as_ptr(&node.0);
            let Some(g) = grads.remove(&key) else { continue };
            match &node.0.grad_fn {
                None => {
                    let mut slot = node.0.grad.lock().expect("grad lock");
                    match slot.as_mut() {
                        Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, b)| *a += b),
                        None => *slot = Some(g),
                    }
                }
                Some(gf) => {
                    let mask: Vec<bool> = gf.parents.iter().map(|p| p.requires_grad()).collect();
                    let parent_grads = (gf.backward)(&g, &mask);
                    for ((parent, pg), needed) in gf.parents.iter().zip(parent_grads).zip(mask) {
                        let (Some(pg), true) = (pg, needed) else { continue };
                        debug_assert_eq!(pg.len(), parent.numel());
                        grads
                            .entry(Arc::as_ptr(&parent.0))
                            .and_modify(|acc| acc.iter_mut().zip(&pg).for_each(|(a, b)| *a += b))
                            .or_insert(pg);
                    }
                }
            }
        }
        Ok(())
    }

    // Post-order DFS over nodes that participate in differentiation.
    fn topo_order(&self) -> Vec<Tensor> {
        let mut order = Vec::new();
        let mut visited: HashMap<*const Node, ()> = HashMap::new();
        let mut stack: Vec<(Tensor, usize)> = vec![(self.clone(), 0)];
        visited.insert(Arc::as_ptr(&self.0), ());
        while let Some((node, child)) = stack.pop() {
            let parents = node.0.grad_fn.as_ref().map(|g| g.parents.as_slice()).unwrap_or(&[]);
            if child < parents.len() {
                let next = parents[child].clone();
                stack.push((node, child + 1));
                if next.requires_grad() && visited.insert(Arc::as_ptr(&next.0), ()).is_none() {
                    stack.push((next, 0));
                }
            } else {
                order.push(node);
            }
        }
        order
    }
}

#[cfg(test)]
mod tests;
