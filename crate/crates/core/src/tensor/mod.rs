//! Dense f64 tensors and reverse-mode differentiation.
//!
//! Everything is 64-bit and accumulated in a fixed (row-major,
//! left-to-right) order, so identical inputs produce bit-identical
//! outputs across runs.

mod graph;
mod optim;

pub use graph::{Graph, Var};
pub use optim::{Optimizer, OptimizerKind};

use crate::error::{Error, Result};
use rand::Rng;

/// Dense n-dimensional array of f64 in row-major order, with an optional
/// gradient buffer of the same length.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
    #[serde(default)]
    pub requires_grad: bool,
    #[serde(default)]
    grad: Option<Vec<f64>>,
}

impl Tensor {
    pub fn zeros(shape: &[usize]) -> Self {
        let n: usize = shape.iter().product();
        Tensor { shape: shape.to_vec(), data: vec![0.0; n], requires_grad: false, grad: None }
    }

    pub fn full(shape: &[usize], value: f64) -> Self {
        let n: usize = shape.iter().product();
        Tensor { shape: shape.to_vec(), data: vec![value; n], requires_grad: false, grad: None }
    }

    pub fn scalar(value: f64) -> Self {
        Tensor { shape: vec![1], data: vec![value], requires_grad: false, grad: None }
    }

    pub fn from_vec(shape: &[usize], data: Vec<f64>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(Error::invalid(
                "from_vec",
                format!("shape {shape:?} implies {n} elements, got {}", data.len()),
            ));
        }
        Ok(Tensor { shape: shape.to_vec(), data, requires_grad: false, grad: None })
    }

    /// Uniform fill in `[lo, hi)` drawn in row-major order.
    pub fn uniform(shape: &[usize], lo: f64, hi: f64, rng: &mut impl Rng) -> Self {
        let n: usize = shape.iter().product();
        let data = (0..n).map(|_| rng.random_range(lo..hi)).collect();
        Tensor { shape: shape.to_vec(), data, requires_grad: false, grad: None }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn is_scalar(&self) -> bool {
        self.data.len() == 1
    }

    pub fn item(&self) -> f64 {
        debug_assert!(self.is_scalar());
        self.data[0]
    }

    pub fn grad(&self) -> Option<&[f64]> {
        self.grad.as_deref()
    }

    pub fn zero_grad(&mut self) {
        self.grad = None;
    }

    /// Add `delta` into the gradient buffer, allocating it on first use.
    pub fn accumulate_grad(&mut self, delta: &[f64]) -> Result<()> {
        if delta.len() != self.data.len() {
            return Err(Error::ShapeMismatch {
                op: "accumulate_grad",
                lhs: self.shape.clone(),
                rhs: vec![delta.len()],
            });
        }
        let grad = self.grad.get_or_insert_with(|| vec![0.0; self.data.len()]);
        for (g, d) in grad.iter_mut().zip(delta) {
            *g += d;
        }
        Ok(())
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

/// A named trainable tensor. Names are stable paths like `"router.weight"`
/// and must be unique within a task head; aggregation and optimizer state
/// are keyed by them.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct Parameter {
    pub name: String,
    pub value: Tensor,
}

impl Parameter {
    pub fn new(name: impl Into<String>, mut value: Tensor) -> Self {
        value.requires_grad = true;
        Parameter { name: name.into(), value }
    }
}

/// Per-pixel argmax over the channel axis (`shape[0]`), ties broken to the
/// lowest index. Returns one class index per pixel.
pub fn argmax_channel(t: &Tensor) -> Vec<usize> {
    let k = t.shape()[0];
    let pixels = t.numel() / k;
    let mut out = vec![0usize; pixels];
    for (p, slot) in out.iter_mut().enumerate() {
        let mut best = 0usize;
        let mut best_v = t.data()[p];
        for c in 1..k {
            let v = t.data()[c * pixels + p];
            if v > best_v {
                best_v = v;
                best = c;
            }
        }
        *slot = best;
    }
    out
}
