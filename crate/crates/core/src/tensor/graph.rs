//! Tape-based reverse-mode differentiation.
//!
//! A [`Graph`] records operations eagerly: building an op runs its forward
//! pass and appends a node, so the tape is already in topological order and
//! `backward` is a single reverse sweep. Gradients accumulate with `+=` in
//! node-index order, which fixes the floating-point accumulation order.
//!
//! The graph also counts forward FLOPs as ops execute. Convention: only the
//! multiply–add contractions of `conv1x1` and `matmul` are counted, at 2
//! FLOPs per multiply–add; bias adds, activations, softmax and bookkeeping
//! ops count zero. The analytic formulas in the accounting module use the
//! same convention so the two can be compared exactly.

use super::{Parameter, Tensor};
use crate::error::{Error, Result};
use std::collections::BTreeMap;

/// Handle to a node in a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

#[derive(Debug)]
enum Op {
    Leaf,
    Add(usize, usize),
    Mul(usize, usize),
    Scale(usize, f64),
    Matmul { a: usize, b: usize, m: usize, k: usize, n: usize },
    Conv1x1 { x: usize, w: usize, b: usize, k_out: usize, c_in: usize, pixels: usize },
    Relu(usize),
    SoftmaxChannel(usize),
    CrossEntropy { probs: usize, targets: Vec<u8>, mask: Vec<bool>, masked: usize },
    Mse { a: usize, b: usize },
    Sum(usize),
    Mean(usize),
    Reshape(usize),
    GatherCols { x: usize, idx: Vec<u32> },
    PlaceCols { x: usize, idx: Vec<u32> },
    ScaleCols { x: usize, v: usize },
    RowSlice { x: usize, row: usize },
}

struct Node {
    shape: Vec<usize>,
    data: Vec<f64>,
    needs_grad: bool,
    op: Op,
    param: Option<String>,
    param_grad: Option<Vec<f64>>,
}

/// Recorded computation over tensors; one forward/backward pass per graph.
#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
    flops: u64,
}

/// Probabilities are clamped to `[CE_CLAMP, 1]` before the log inside
/// cross-entropy, so a perfectly wrong prediction yields a large finite
/// loss rather than infinity.
pub const CE_CLAMP: f64 = 1e-12;

fn channels_pixels(shape: &[usize]) -> (usize, usize) {
    let c = shape.first().copied().unwrap_or(1);
    let pixels: usize = shape.iter().skip(1).product();
    (c, pixels.max(1))
}

// Column layout for gather/place: 1-D tensors are a single channel row of
// N pixels, multi-dim tensors are [C, pixels...].
fn cols_layout(shape: &[usize]) -> (usize, usize) {
    if shape.len() <= 1 {
        (1, shape.first().copied().unwrap_or(1))
    } else {
        channels_pixels(shape)
    }
}

impl Graph {
    pub fn new() -> Self {
        Graph::default()
    }

    /// Forward FLOPs executed so far (multiply–add contractions only).
    pub fn flops(&self) -> u64 {
        self.flops
    }

    fn push(&mut self, shape: Vec<usize>, data: Vec<f64>, needs_grad: bool, op: Op) -> Var {
        self.nodes.push(Node { shape, data, needs_grad, op, param: None, param_grad: None });
        Var(self.nodes.len() - 1)
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].shape
    }

    pub fn data(&self, v: Var) -> &[f64] {
        &self.nodes[v.0].data
    }

    pub fn numel(&self, v: Var) -> usize {
        self.nodes[v.0].data.len()
    }

    /// Copy a node's value out as a plain tensor.
    pub fn value(&self, v: Var) -> Tensor {
        Tensor::from_vec(&self.nodes[v.0].shape, self.nodes[v.0].data.clone())
            .expect("node shape/data consistent")
    }

    /// Untracked input.
    pub fn constant(&mut self, t: &Tensor) -> Var {
        self.push(t.shape().to_vec(), t.data().to_vec(), false, Op::Leaf)
    }

    pub fn constant_from(&mut self, shape: &[usize], data: Vec<f64>) -> Result<Var> {
        let t = Tensor::from_vec(shape, data)?;
        Ok(self.constant(&t))
    }

    pub fn scalar(&mut self, v: f64) -> Var {
        let t = Tensor::scalar(v);
        self.constant(&t)
    }

    /// Tracked leaf bound to a named parameter. After `backward`, the
    /// parameter's gradient is available from [`Graph::param_grads`].
    pub fn param(&mut self, p: &Parameter) -> Result<Var> {
        if self.nodes.iter().any(|n| n.param.as_deref() == Some(p.name.as_str())) {
            return Err(Error::DuplicateParameter(p.name.clone()));
        }
        let v = self.push(p.value.shape().to_vec(), p.value.data().to_vec(), true, Op::Leaf);
        self.nodes[v.0].param = Some(p.name.clone());
        Ok(v)
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.nodes[a.0].shape != self.nodes[b.0].shape {
            return Err(Error::ShapeMismatch {
                op,
                lhs: self.nodes[a.0].shape.clone(),
                rhs: self.nodes[b.0].shape.clone(),
            });
        }
        Ok(())
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let data: Vec<f64> = self.nodes[a.0]
            .data
            .iter()
            .zip(&self.nodes[b.0].data)
            .map(|(x, y)| x + y)
            .collect();
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(self.nodes[a.0].shape.clone(), data, needs, Op::Add(a.0, b.0)))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        let data: Vec<f64> = self.nodes[a.0]
            .data
            .iter()
            .zip(&self.nodes[b.0].data)
            .map(|(x, y)| x * y)
            .collect();
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(self.nodes[a.0].shape.clone(), data, needs, Op::Mul(a.0, b.0)))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let data: Vec<f64> = self.nodes[a.0].data.iter().map(|x| c * x).collect();
        let needs = self.needs(a);
        self.push(self.nodes[a.0].shape.clone(), data, needs, Op::Scale(a.0, c))
    }

    /// `[m,k] x [k,n] -> [m,n]`, 2mkn FLOPs.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (&self.nodes[a.0].shape, &self.nodes[b.0].shape);
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(Error::ShapeMismatch { op: "matmul", lhs: sa.clone(), rhs: sb.clone() });
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut data = vec![0.0; m * n];
        for i in 0..m {
            for kk in 0..k {
                let aik = self.nodes[a.0].data[i * k + kk];
                for j in 0..n {
                    data[i * n + j] += aik * self.nodes[b.0].data[kk * n + j];
                }
            }
        }
        self.flops += 2 * (m * k * n) as u64;
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(vec![m, n], data, needs, Op::Matmul { a: a.0, b: b.0, m, k, n }))
    }

    /// 1x1 convolution over the channel axis: input `[C, ...]`, weight
    /// `[K, C]`, bias `[K]` -> output `[K, ...]`. Counts 2*K*C*pixels FLOPs
    /// (the multiply–adds; the bias add is not counted).
    pub fn conv1x1(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let sx = self.nodes[x.0].shape.clone();
        let sw = self.nodes[w.0].shape.clone();
        let sb = self.nodes[b.0].shape.clone();
        let (c_in, pixels) = channels_pixels(&sx);
        if sw.len() != 2 || sw[1] != c_in {
            return Err(Error::ShapeMismatch { op: "conv1x1", lhs: sx, rhs: sw });
        }
        let k_out = sw[0];
        if sb != [k_out] {
            return Err(Error::ShapeMismatch { op: "conv1x1(bias)", lhs: sw, rhs: sb });
        }
        let mut data = vec![0.0; k_out * pixels];
        for k in 0..k_out {
            let bias = self.nodes[b.0].data[k];
            for p in 0..pixels {
                let mut acc = 0.0;
                for c in 0..c_in {
                    acc += self.nodes[w.0].data[k * c_in + c] * self.nodes[x.0].data[c * pixels + p];
                }
                data[k * pixels + p] = acc + bias;
            }
        }
        self.flops += 2 * (k_out * c_in * pixels) as u64;
        let mut shape = vec![k_out];
        shape.extend_from_slice(&sx[1..]);
        let needs = self.needs(x) || self.needs(w) || self.needs(b);
        Ok(self.push(shape, data, needs, Op::Conv1x1 { x: x.0, w: w.0, b: b.0, k_out, c_in, pixels }))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let data: Vec<f64> = self.nodes[a.0].data.iter().map(|x| x.max(0.0)).collect();
        let needs = self.needs(a);
        self.push(self.nodes[a.0].shape.clone(), data, needs, Op::Relu(a.0))
    }

    /// Softmax over the channel axis (`shape[0]`), independently per pixel.
    pub fn softmax_channel(&mut self, a: Var) -> Var {
        let shape = self.nodes[a.0].shape.clone();
        let (c, pixels) = channels_pixels(&shape);
        let src = &self.nodes[a.0].data;
        let mut data = vec![0.0; src.len()];
        for p in 0..pixels {
            let mut m = f64::NEG_INFINITY;
            for ch in 0..c {
                m = m.max(src[ch * pixels + p]);
            }
            let mut sum = 0.0;
            for ch in 0..c {
                let e = (src[ch * pixels + p] - m).exp();
                data[ch * pixels + p] = e;
                sum += e;
            }
            for ch in 0..c {
                data[ch * pixels + p] /= sum;
            }
        }
        let needs = self.needs(a);
        self.push(shape, data, needs, Op::SoftmaxChannel(a.0))
    }

    /// Mean cross-entropy of channel probabilities against per-pixel class
    /// targets, restricted to `mask`ed-in pixels. Empty mask yields exactly
    /// zero. Probabilities are clamped to `[CE_CLAMP, 1]` before the log.
    pub fn cross_entropy_masked(&mut self, probs: Var, targets: &[u8], mask: &[bool]) -> Result<Var> {
        let shape = self.nodes[probs.0].shape.clone();
        let (c, pixels) = channels_pixels(&shape);
        if targets.len() != pixels || mask.len() != pixels {
            return Err(Error::ShapeMismatch {
                op: "cross_entropy",
                lhs: shape,
                rhs: vec![targets.len(), mask.len()],
            });
        }
        if let Some(bad) = targets.iter().find(|&&t| (t as usize) >= c) {
            return Err(Error::invalid(
                "cross_entropy",
                format!("target class {bad} out of range for {c} channels"),
            ));
        }
        let masked = mask.iter().filter(|&&m| m).count();
        let mut total = 0.0;
        if masked > 0 {
            for p in 0..pixels {
                if mask[p] {
                    let pr = self.nodes[probs.0].data[(targets[p] as usize) * pixels + p];
                    total += -pr.clamp(CE_CLAMP, 1.0).ln();
                }
            }
            total /= masked as f64;
        }
        let needs = self.needs(probs);
        Ok(self.push(
            vec![1],
            vec![total],
            needs,
            Op::CrossEntropy { probs: probs.0, targets: targets.to_vec(), mask: mask.to_vec(), masked },
        ))
    }

    /// Convenience: cross-entropy over all pixels.
    pub fn cross_entropy(&mut self, probs: Var, targets: &[u8]) -> Result<Var> {
        let (_, pixels) = channels_pixels(&self.nodes[probs.0].shape);
        let mask = vec![true; pixels];
        self.cross_entropy_masked(probs, targets, &mask)
    }

    /// Mean squared error between two same-shape tensors.
    pub fn mse(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mse", a, b)?;
        let n = self.nodes[a.0].data.len();
        let mut total = 0.0;
        for i in 0..n {
            let d = self.nodes[a.0].data[i] - self.nodes[b.0].data[i];
            total += d * d;
        }
        total /= n as f64;
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(vec![1], vec![total], needs, Op::Mse { a: a.0, b: b.0 }))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let total: f64 = self.nodes[a.0].data.iter().sum();
        let needs = self.needs(a);
        self.push(vec![1], vec![total], needs, Op::Sum(a.0))
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let n = self.nodes[a.0].data.len();
        let total: f64 = self.nodes[a.0].data.iter().sum();
        let needs = self.needs(a);
        self.push(vec![1], vec![total / n as f64], needs, Op::Mean(a.0))
    }

    /// Same data, new shape; element count must match.
    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let n: usize = shape.iter().product();
        if n != self.nodes[x.0].data.len() {
            return Err(Error::ShapeMismatch {
                op: "reshape",
                lhs: self.nodes[x.0].shape.clone(),
                rhs: shape.to_vec(),
            });
        }
        let data = self.nodes[x.0].data.clone();
        let needs = self.needs(x);
        Ok(self.push(shape.to_vec(), data, needs, Op::Reshape(x.0)))
    }

    /// Gather pixel columns: `[C, ...] -> [C, idx.len()]` (1-D inputs are
    /// treated as a single channel row).
    pub fn gather_cols(&mut self, x: Var, idx: &[u32]) -> Result<Var> {
        let shape = self.nodes[x.0].shape.clone();
        let (c, pixels) = cols_layout(&shape);
        if let Some(bad) = idx.iter().find(|&&i| i as usize >= pixels) {
            return Err(Error::invalid("gather_cols", format!("index {bad} >= {pixels} pixels")));
        }
        let p_out = idx.len();
        let mut data = vec![0.0; c * p_out];
        for ch in 0..c {
            for (j, &i) in idx.iter().enumerate() {
                data[ch * p_out + j] = self.nodes[x.0].data[ch * pixels + i as usize];
            }
        }
        let out_shape = if shape.len() <= 1 { vec![p_out] } else { vec![c, p_out] };
        let needs = self.needs(x);
        Ok(self.push(out_shape, data, needs, Op::GatherCols { x: x.0, idx: idx.to_vec() }))
    }

    /// Scatter pixel columns of `[C, P]` into a zero tensor of `n_cols`
    /// pixels: inverse of [`Graph::gather_cols`]. Indices must be unique.
    pub fn place_cols(&mut self, x: Var, idx: &[u32], n_cols: usize) -> Result<Var> {
        let shape = self.nodes[x.0].shape.clone();
        let (c, p_in) = cols_layout(&shape);
        if idx.len() != p_in {
            return Err(Error::invalid(
                "place_cols",
                format!("{} indices for {p_in} columns", idx.len()),
            ));
        }
        if let Some(bad) = idx.iter().find(|&&i| i as usize >= n_cols) {
            return Err(Error::invalid("place_cols", format!("index {bad} >= {n_cols} pixels")));
        }
        let mut data = vec![0.0; c * n_cols];
        for ch in 0..c {
            for (j, &i) in idx.iter().enumerate() {
                data[ch * n_cols + i as usize] = self.nodes[x.0].data[ch * p_in + j];
            }
        }
        let out_shape = if shape.len() <= 1 { vec![n_cols] } else { vec![c, n_cols] };
        let needs = self.needs(x);
        Ok(self.push(out_shape, data, needs, Op::PlaceCols { x: x.0, idx: idx.to_vec() }))
    }

    /// Multiply every channel of column `p` by `v[p]`: `[C, P] * [P]`.
    pub fn scale_cols(&mut self, x: Var, v: Var) -> Result<Var> {
        let shape = self.nodes[x.0].shape.clone();
        let (c, pixels) = channels_pixels(&shape);
        if self.nodes[v.0].data.len() != pixels {
            return Err(Error::ShapeMismatch {
                op: "scale_cols",
                lhs: shape,
                rhs: self.nodes[v.0].shape.clone(),
            });
        }
        let mut data = vec![0.0; c * pixels];
        for ch in 0..c {
            for p in 0..pixels {
                data[ch * pixels + p] = self.nodes[x.0].data[ch * pixels + p] * self.nodes[v.0].data[p];
            }
        }
        let needs = self.needs(x) || self.needs(v);
        Ok(self.push(shape, data, needs, Op::ScaleCols { x: x.0, v: v.0 }))
    }

    /// Extract channel `row` of `[C, ...]` as a flat `[pixels]` vector.
    pub fn row_slice(&mut self, x: Var, row: usize) -> Result<Var> {
        let shape = self.nodes[x.0].shape.clone();
        let (c, pixels) = channels_pixels(&shape);
        if row >= c {
            return Err(Error::invalid("row_slice", format!("row {row} >= {c} channels")));
        }
        let data = self.nodes[x.0].data[row * pixels..(row + 1) * pixels].to_vec();
        let needs = self.needs(x);
        Ok(self.push(vec![pixels], data, needs, Op::RowSlice { x: x.0, row }))
    }

    /// Reverse sweep from a scalar loss. Gradients of bound parameters are
    /// collected afterwards with [`Graph::param_grads`]; running two
    /// backward passes without clearing accumulates, matching the usual
    /// tape semantics.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.nodes[loss.0].data.len() != 1 {
            return Err(Error::invalid(
                "backward",
                format!("loss must be scalar, got shape {:?}", self.nodes[loss.0].shape),
            ));
        }
        let mut grads: Vec<Vec<f64>> = self.nodes.iter().map(|n| vec![0.0; n.data.len()]).collect();
        grads[loss.0][0] = 1.0;

        for i in (0..=loss.0).rev() {
            if !self.nodes[i].needs_grad {
                continue;
            }
            let go = std::mem::take(&mut grads[i]);
            match &self.nodes[i].op {
                Op::Leaf => {
                    grads[i] = go;
                    continue;
                }
                Op::Add(a, b) => {
                    let (a, b) = (*a, *b);
                    if self.nodes[a].needs_grad {
                        for (g, d) in grads[a].iter_mut().zip(&go) {
                            *g += d;
                        }
                    }
                    if self.nodes[b].needs_grad {
                        for (g, d) in grads[b].iter_mut().zip(&go) {
                            *g += d;
                        }
                    }
                }
                Op::Mul(a, b) => {
                    let (a, b) = (*a, *b);
                    if self.nodes[a].needs_grad {
                        for j in 0..go.len() {
                            grads[a][j] += go[j] * self.nodes[b].data[j];
                        }
                    }
                    if self.nodes[b].needs_grad {
                        for j in 0..go.len() {
                            grads[b][j] += go[j] * self.nodes[a].data[j];
                        }
                    }
                }
                Op::Scale(a, c) => {
                    let (a, c) = (*a, *c);
                    if self.nodes[a].needs_grad {
                        for j in 0..go.len() {
                            grads[a][j] += go[j] * c;
                        }
                    }
                }
                Op::Matmul { a, b, m, k, n } => {
                    let (a, b, m, k, n) = (*a, *b, *m, *k, *n);
                    if self.nodes[a].needs_grad {
                        for i2 in 0..m {
                            for kk in 0..k {
                                let mut acc = 0.0;
                                for j in 0..n {
                                    acc += go[i2 * n + j] * self.nodes[b].data[kk * n + j];
                                }
                                grads[a][i2 * k + kk] += acc;
                            }
                        }
                    }
                    if self.nodes[b].needs_grad {
                        for kk in 0..k {
                            for j in 0..n {
                                let mut acc = 0.0;
                                for i2 in 0..m {
                                    acc += self.nodes[a].data[i2 * k + kk] * go[i2 * n + j];
                                }
                                grads[b][kk * n + j] += acc;
                            }
                        }
                    }
                }
                Op::Conv1x1 { x, w, b, k_out, c_in, pixels } => {
                    let (x, w, b, k_out, c_in, pixels) = (*x, *w, *b, *k_out, *c_in, *pixels);
                    if self.nodes[x].needs_grad {
                        for c in 0..c_in {
                            for p in 0..pixels {
                                let mut acc = 0.0;
                                for k in 0..k_out {
                                    acc += self.nodes[w].data[k * c_in + c] * go[k * pixels + p];
                                }
                                grads[x][c * pixels + p] += acc;
                            }
                        }
                    }
                    if self.nodes[w].needs_grad {
                        for k in 0..k_out {
                            for c in 0..c_in {
                                let mut acc = 0.0;
                                for p in 0..pixels {
                                    acc += go[k * pixels + p] * self.nodes[x].data[c * pixels + p];
                                }
                                grads[w][k * c_in + c] += acc;
                            }
                        }
                    }
                    if self.nodes[b].needs_grad {
                        for k in 0..k_out {
                            let mut acc = 0.0;
                            for p in 0..pixels {
                                acc += go[k * pixels + p];
                            }
                            grads[b][k] += acc;
                        }
                    }
                }
                Op::Relu(a) => {
                    let a = *a;
                    if self.nodes[a].needs_grad {
                        for j in 0..go.len() {
                            if self.nodes[a].data[j] > 0.0 {
                                grads[a][j] += go[j];
                            }
                        }
                    }
                }
                Op::SoftmaxChannel(a) => {
                    let a = *a;
                    if self.nodes[a].needs_grad {
                        let (c, pixels) = channels_pixels(&self.nodes[i].shape);
                        for p in 0..pixels {
                            let mut dot = 0.0;
                            for ch in 0..c {
                                dot += go[ch * pixels + p] * self.nodes[i].data[ch * pixels + p];
                            }
                            for ch in 0..c {
                                let y = self.nodes[i].data[ch * pixels + p];
                                grads[a][ch * pixels + p] += y * (go[ch * pixels + p] - dot);
                            }
                        }
                    }
                }
                Op::CrossEntropy { probs, targets, mask, masked } => {
                    let (probs, masked) = (*probs, *masked);
                    if self.nodes[probs].needs_grad && masked > 0 {
                        let (_, pixels) = channels_pixels(&self.nodes[probs].shape);
                        let scale = go[0] / masked as f64;
                        for p in 0..pixels {
                            if mask[p] {
                                let t = targets[p] as usize;
                                let pr = self.nodes[probs].data[t * pixels + p];
                                if pr > CE_CLAMP {
                                    grads[probs][t * pixels + p] += -scale / pr;
                                }
                            }
                        }
                    }
                }
                Op::Mse { a, b } => {
                    let (a, b) = (*a, *b);
                    let n = self.nodes[a].data.len() as f64;
                    let scale = 2.0 * go[0] / n;
                    if self.nodes[a].needs_grad {
                        for j in 0..self.nodes[a].data.len() {
                            grads[a][j] += scale * (self.nodes[a].data[j] - self.nodes[b].data[j]);
                        }
                    }
                    if self.nodes[b].needs_grad {
                        for j in 0..self.nodes[a].data.len() {
                            grads[b][j] -= scale * (self.nodes[a].data[j] - self.nodes[b].data[j]);
                        }
                    }
                }
                Op::Sum(a) => {
                    let a = *a;
                    if self.nodes[a].needs_grad {
                        for g in grads[a].iter_mut() {
                            *g += go[0];
                        }
                    }
                }
                Op::Mean(a) => {
                    let a = *a;
                    if self.nodes[a].needs_grad {
                        let d = go[0] / self.nodes[a].data.len() as f64;
                        for g in grads[a].iter_mut() {
                            *g += d;
                        }
                    }
                }
                Op::Reshape(a) => {
                    let a = *a;
                    if self.nodes[a].needs_grad {
                        for (g, d) in grads[a].iter_mut().zip(&go) {
                            *g += d;
                        }
                    }
                }
                Op::GatherCols { x, idx } => {
                    let x = *x;
                    if self.nodes[x].needs_grad {
                        let (c, pixels) = cols_layout(&self.nodes[x].shape);
                        let p_out = idx.len();
                        for ch in 0..c {
                            for (j, &src) in idx.iter().enumerate() {
                                grads[x][ch * pixels + src as usize] += go[ch * p_out + j];
                            }
                        }
                    }
                }
                Op::PlaceCols { x, idx } => {
                    let x = *x;
                    if self.nodes[x].needs_grad {
                        let (c, p_in) = cols_layout(&self.nodes[x].shape);
                        let (_, n_cols) = cols_layout(&self.nodes[i].shape);
                        for ch in 0..c {
                            for (j, &dst) in idx.iter().enumerate() {
                                grads[x][ch * p_in + j] += go[ch * n_cols + dst as usize];
                            }
                        }
                    }
                }
                Op::ScaleCols { x, v } => {
                    let (x, v) = (*x, *v);
                    let (c, pixels) = channels_pixels(&self.nodes[x].shape);
                    if self.nodes[x].needs_grad {
                        for ch in 0..c {
                            for p in 0..pixels {
                                grads[x][ch * pixels + p] += go[ch * pixels + p] * self.nodes[v].data[p];
                            }
                        }
                    }
                    if self.nodes[v].needs_grad {
                        for p in 0..pixels {
                            let mut acc = 0.0;
                            for ch in 0..c {
                                acc += go[ch * pixels + p] * self.nodes[x].data[ch * pixels + p];
                            }
                            grads[v][p] += acc;
                        }
                    }
                }
                Op::RowSlice { x, row } => {
                    let (x, row) = (*x, *row);
                    if self.nodes[x].needs_grad {
                        let (_, pixels) = channels_pixels(&self.nodes[x].shape);
                        for p in 0..pixels {
                            grads[x][row * pixels + p] += go[p];
                        }
                    }
                }
            }
            grads[i] = go;
        }

        // Stash parameter gradients on their leaf nodes (accumulating, so a
        // second backward on the same graph adds to them).
        for (i, node) in self.nodes.iter_mut().enumerate() {
            if node.param.is_some() {
                let g = std::mem::take(&mut grads[i]);
                node.accumulate_param_grad(g);
            }
        }
        Ok(())
    }

    /// Gradients of all parameters bound in this graph, keyed by name.
    /// Parameters untouched by the loss report all-zero gradients.
    pub fn param_grads(&self) -> BTreeMap<String, Vec<f64>> {
        let mut out = BTreeMap::new();
        for node in &self.nodes {
            if let Some(name) = &node.param {
                out.insert(name.clone(), node.param_grad.clone().unwrap_or_else(|| vec![0.0; node.data.len()]));
            }
        }
        out
    }
}

impl Node {
    fn accumulate_param_grad(&mut self, g: Vec<f64>) {
        match &mut self.param_grad {
            Some(acc) => {
                for (a, b) in acc.iter_mut().zip(&g) {
                    *a += b;
                }
            }
            None => self.param_grad = Some(g),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;
    use rand::Rng;

    #[test]
    fn conv1x1_all_ones() {
        let mut g = Graph::new();
        let x = g.constant(&Tensor::full(&[2, 2, 2], 1.0));
        let w = g.constant(&Tensor::from_vec(&[1, 2], vec![1.0, 1.0]).unwrap());
        let b = g.constant(&Tensor::zeros(&[1]));
        let y = g.conv1x1(x, w, b).unwrap();
        assert_eq!(g.shape(y), &[1, 2, 2]);
        assert!(g.data(y).iter().all(|&v| v == 2.0));
        assert_eq!(g.flops(), 2 * 1 * 2 * 4);
    }

    #[test]
    fn conv1x1_rejects_channel_mismatch() {
        let mut g = Graph::new();
        let x = g.constant(&Tensor::zeros(&[3, 2, 2]));
        let w = g.constant(&Tensor::zeros(&[1, 2]));
        let b = g.constant(&Tensor::zeros(&[1]));
        let err = g.conv1x1(x, w, b).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("[3, 2, 2]") && msg.contains("[1, 2]"), "{msg}");
    }

    #[test]
    fn softmax_symmetry() {
        let mut g = Graph::new();
        let x = g.constant(&Tensor::zeros(&[3, 1, 1]));
        let p = g.softmax_channel(x);
        for &v in g.data(p) {
            assert!((v - 1.0 / 3.0).abs() < 1e-15);
        }
    }

    #[test]
    fn cross_entropy_perfect_prediction() {
        let mut g = Graph::new();
        let p = g.constant(&Tensor::from_vec(&[2, 1], vec![1.0, 0.0]).unwrap());
        let loss = g.cross_entropy(p, &[0]).unwrap();
        assert!(g.data(loss)[0].abs() < 1e-12);
    }

    #[test]
    fn cross_entropy_empty_mask_is_zero() {
        let mut g = Graph::new();
        let p = g.constant(&Tensor::from_vec(&[2, 2], vec![0.5, 0.5, 0.5, 0.5]).unwrap());
        let loss = g.cross_entropy_masked(p, &[0, 1], &[false, false]).unwrap();
        assert_eq!(g.data(loss)[0], 0.0);
    }

    #[test]
    fn backward_of_sum_is_ones() {
        let p = Parameter::new("p", Tensor::from_vec(&[2, 3], vec![0.5; 6]).unwrap());
        let mut g = Graph::new();
        let v = g.param(&p).unwrap();
        let loss = g.sum(v);
        g.backward(loss).unwrap();
        assert_eq!(g.param_grads()["p"], vec![1.0; 6]);
    }

    #[test]
    fn backward_of_scalar_mse() {
        let p = Parameter::new("p", Tensor::scalar(3.0));
        let mut g = Graph::new();
        let v = g.param(&p).unwrap();
        let zero = g.scalar(0.0);
        let loss = g.mse(v, zero).unwrap();
        g.backward(loss).unwrap();
        assert_eq!(g.param_grads()["p"], vec![6.0]);
    }

    #[test]
    fn backward_rejects_non_scalar_loss() {
        let p = Parameter::new("p", Tensor::zeros(&[2]));
        let mut g = Graph::new();
        let v = g.param(&p).unwrap();
        assert!(g.backward(v).is_err());
    }

    #[test]
    fn double_backward_accumulates() {
        let p = Parameter::new("p", Tensor::scalar(2.0));
        let mut g = Graph::new();
        let v = g.param(&p).unwrap();
        let loss = g.sum(v);
        g.backward(loss).unwrap();
        g.backward(loss).unwrap();
        assert_eq!(g.param_grads()["p"], vec![2.0]);
    }

    #[test]
    fn scaled_loss_scales_grads_exactly() {
        let p = Parameter::new("p", Tensor::from_vec(&[3], vec![0.3, -0.7, 1.1]).unwrap());
        let grads_for = |factor: f64| {
            let mut g = Graph::new();
            let v = g.param(&p).unwrap();
            let sq = g.mul(v, v).unwrap();
            let base = g.sum(sq);
            let loss = g.scale(base, factor);
            g.backward(loss).unwrap();
            g.param_grads()["p"].clone()
        };
        let g1 = grads_for(1.0);
        let g4 = grads_for(4.0);
        for (a, b) in g1.iter().zip(&g4) {
            assert_eq!(4.0 * a, *b);
        }
    }

    #[test]
    fn duplicate_param_binding_rejected() {
        let p = Parameter::new("p", Tensor::scalar(1.0));
        let mut g = Graph::new();
        g.param(&p).unwrap();
        assert!(matches!(g.param(&p), Err(Error::DuplicateParameter(_))));
    }

    #[test]
    fn gather_place_roundtrip_and_grads() {
        let p = Parameter::new("x", Tensor::from_vec(&[2, 4], (0..8).map(f64::from).collect()).unwrap());
        let mut g = Graph::new();
        let x = g.param(&p).unwrap();
        let picked = g.gather_cols(x, &[3, 1]).unwrap();
        assert_eq!(g.data(picked), &[3.0, 1.0, 7.0, 5.0]);
        let back = g.place_cols(picked, &[3, 1], 4).unwrap();
        assert_eq!(g.data(back), &[0.0, 1.0, 0.0, 3.0, 0.0, 5.0, 0.0, 7.0]);
        let loss = g.sum(back);
        g.backward(loss).unwrap();
        assert_eq!(g.param_grads()["x"], vec![0.0, 1.0, 0.0, 1.0, 0.0, 1.0, 0.0, 1.0]);
    }

    #[test]
    fn matmul_matches_hand_case() {
        let mut g = Graph::new();
        let a = g.constant(&Tensor::from_vec(&[2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap());
        let b = g.constant(&Tensor::from_vec(&[2, 2], vec![5.0, 6.0, 7.0, 8.0]).unwrap());
        let c = g.matmul(a, b).unwrap();
        assert_eq!(g.data(c), &[19.0, 22.0, 43.0, 50.0]);
    }

    // Central finite differences on a composite that exercises conv1x1,
    // relu, softmax and cross-entropy together. The full per-parameter
    // sweep over the task head lives in the gradcheck module.
    #[test]
    fn finite_difference_smoke() {
        let mut rng = crate::rng::derive_rng(11, "fd-smoke", 0);
        let x = Tensor::uniform(&[3, 2, 2], -1.0, 1.0, &mut rng);
        let w_data = Tensor::uniform(&[2, 3], -1.0, 1.0, &mut rng);
        let b_data = Tensor::uniform(&[2], -0.5, 0.5, &mut rng);
        let targets: Vec<u8> = (0..4).map(|_| rng.random_range(0..2u8)).collect();

        let eval = |w_vals: &[f64], b_vals: &[f64]| -> f64 {
            let mut g = Graph::new();
            let xv = g.constant(&x);
            let w = Parameter::new("w", Tensor::from_vec(&[2, 3], w_vals.to_vec()).unwrap());
            let b = Parameter::new("b", Tensor::from_vec(&[2], b_vals.to_vec()).unwrap());
            let wv = g.param(&w).unwrap();
            let bv = g.param(&b).unwrap();
            let h = g.conv1x1(xv, wv, bv).unwrap();
            let r = g.relu(h);
            let probs = g.softmax_channel(r);
            let loss = g.cross_entropy(probs, &targets).unwrap();
            g.data(loss)[0]
        };

        let mut g = Graph::new();
        let xv = g.constant(&x);
        let w = Parameter::new("w", w_data.clone());
        let b = Parameter::new("b", b_data.clone());
        let wv = g.param(&w).unwrap();
        let bv = g.param(&b).unwrap();
        let h = g.conv1x1(xv, wv, bv).unwrap();
        let r = g.relu(h);
        let probs = g.softmax_channel(r);
        let loss = g.cross_entropy(probs, &targets).unwrap();
        g.backward(loss).unwrap();
        let grads = g.param_grads();

        let step = 1e-5;
        for (idx, auto) in grads["w"].iter().enumerate() {
            let mut plus = w_data.data().to_vec();
            let mut minus = plus.clone();
            plus[idx] += step;
            minus[idx] -= step;
            let fd = (eval(&plus, b_data.data()) - eval(&minus, b_data.data())) / (2.0 * step);
            let rel = (auto - fd).abs() / auto.abs().max(fd.abs()).max(1e-6);
            assert!(rel < 1e-4, "w[{idx}]: auto {auto} fd {fd}");
        }
        for (idx, auto) in grads["b"].iter().enumerate() {
            let mut plus = b_data.data().to_vec();
            let mut minus = plus.clone();
            plus[idx] += step;
            minus[idx] -= step;
            let fd = (eval(w_data.data(), &plus) - eval(w_data.data(), &minus)) / (2.0 * step);
            let rel = (auto - fd).abs() / auto.abs().max(fd.abs()).max(1e-6);
            assert!(rel < 1e-4, "b[{idx}]: auto {auto} fd {fd}");
        }
    }
}
