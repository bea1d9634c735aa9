//! Linear-tape reverse-mode differentiation.
//!
//! Every forward op appends a node holding its output value and whatever it
//! needs for the backward pass. `Graph::backward` walks the tape in reverse
//! and never mutates it, so it can be replayed any number of times with
//! bit-identical results.
//!
//! The graph also carries a multiply-accumulate counter: matmuls and
//! convolutions add the number of scalar multiplies they perform. The cost
//! model is checked against it.

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::params::{ParamId, ParamStore};
use crate::tensor::{kernels, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Debug)]
enum Op {
    Input,
    Param,
    MatMul(Var, Var),
    MatMulNt(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    MulRow(Var, Var),
    Scale(Var, f32),
    Softmax(Var),
    NormalizeRows { x: Var, inv_std: Vec<f32> },
    Gelu(Var),
    Relu(Var),
    Sigmoid(Var),
    Transpose(Var),
    Reshape(Var),
    SliceRows { x: Var, start: usize },
    ConcatRows(Vec<Var>),
    SliceCols { x: Var, start: usize },
    ConcatCols(Vec<Var>),
    SelectRows { x: Var, idx: Vec<usize> },
    SegmentSum { x: Var, target: Vec<usize> },
    Im2Col3x3 { x: Var, h: usize, w: usize },
    DepthwiseConv3x3 { x: Var, k: Var, h: usize, w: usize },
    Sum(Var),
    WeightedSum { x: Var, w: Vec<f32> },
    FocalLoss { pred: Var, gt: Vec<f32>, alpha: f32, beta: f32, eps: f32 },
    GiouLoss { pred: Var, gt: [f32; 4] },
    L1Loss { pred: Var, target: Vec<f32> },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

/// A forward tape. Parameters are pulled in lazily from a [`ParamStore`].
#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
    params: BTreeMap<ParamId, Var>,
    macs: u64,
}

/// Offsets of the 3×3 taps in row-major order, tap `t = (dy+1)*3 + (dx+1)`.
const TAPS: [(isize, isize); 9] =
    [(-1, -1), (-1, 0), (-1, 1), (0, -1), (0, 0), (0, 1), (1, -1), (1, 0), (1, 1)];

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Multiply-accumulates performed by ops recorded so far (plus any
    /// added through [`Graph::count_macs`]).
    pub fn macs(&self) -> u64 {
        self.macs
    }

    /// Smallest `|x|` over the inputs of every ReLU on the tape, or `None`
    /// if there is no ReLU. Finite-difference checks use it to avoid kinks.
    pub fn min_relu_input(&self) -> Option<f32> {
        self.nodes
            .iter()
            .filter_map(|n| match n.op {
                Op::Relu(x) => Some(self.value(x).data().iter().fold(f32::INFINITY, |m, v| m.min(v.abs()))),
                _ => None,
            })
            .reduce(f32::min)
    }

    /// Account for multiplies done outside the tape (e.g. index selection).
    pub fn count_macs(&mut self, n: u64) {
        self.macs += n;
    }

    fn push(&mut self, value: Tensor, op: Op, inputs: &[Var]) -> Var {
        let needs_grad = inputs.iter().any(|v| self.nodes[v.0].needs_grad);
        self.nodes.push(Node { value, op, needs_grad });
        Var(self.nodes.len() - 1)
    }

    /// A constant or a differentiable leaf, depending on `t.requires_grad()`.
    pub fn input(&mut self, t: Tensor) -> Var {
        let needs_grad = t.requires_grad();
        self.nodes.push(Node { value: t, op: Op::Input, needs_grad });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, t: Tensor) -> Var {
        self.input(t.with_requires_grad(false))
    }

    /// The tape variable for a stored parameter; created once per graph.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        if let Some(&v) = self.params.get(&id) {
            return v;
        }
        let e = store.entry(id);
        self.nodes.push(Node { value: e.value.clone(), op: Op::Param, needs_grad: e.trainable });
        let v = Var(self.nodes.len() - 1);
        self.params.insert(id, v);
        v
    }

    fn dims2(&self, v: Var, op: &'static str) -> Result<(usize, usize)> {
        let s = self.value(v).shape();
        if s.len() != 2 {
            return Err(Error::shape(op, format!("expected rank-2 operand, got {s:?}")));
        }
        Ok((s[0], s[1]))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.dims2(a, "matmul")?;
        let (k2, n) = self.dims2(b, "matmul")?;
        if k != k2 {
            return Err(Error::shape("matmul", format!("[{m}×{k}] @ [{k2}×{n}]")));
        }
        let mut out = vec![0.0; m * n];
        kernels::matmul(self.value(a).data(), self.value(b).data(), &mut out, m, k, n);
        self.macs += (m * k * n) as u64;
        Ok(self.push(Tensor::new([m, n], out)?, Op::MatMul(a, b), &[a, b]))
    }

    /// `a @ bᵀ` without materialising the transpose.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.dims2(a, "matmul_nt")?;
        let (n, k2) = self.dims2(b, "matmul_nt")?;
        if k != k2 {
            return Err(Error::shape("matmul_nt", format!("[{m}×{k}] @ [{n}×{k2}]ᵀ")));
        }
        let mut out = vec![0.0; m * n];
        kernels::matmul_nt(self.value(a).data(), self.value(b).data(), &mut out, m, k, n);
        self.macs += (m * k * n) as u64;
        Ok(self.push(Tensor::new([m, n], out)?, Op::MatMulNt(a, b), &[a, b]))
    }

    fn same_shape(&self, a: Var, b: Var, op: &'static str) -> Result<()> {
        let (sa, sb) = (self.value(a).shape(), self.value(b).shape());
        if sa != sb {
            return Err(Error::shape(op, format!("{sa:?} vs {sb:?}")));
        }
        Ok(())
    }

    fn zip_map(&mut self, a: Var, b: Var, f: impl Fn(f32, f32) -> f32) -> Tensor {
        let (ta, tb) = (self.value(a), self.value(b));
        let data = ta.data().iter().zip(tb.data()).map(|(&x, &y)| f(x, y)).collect();
        Tensor::new(ta.shape().to_vec(), data).expect("same shape")
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "add")?;
        let t = self.zip_map(a, b, |x, y| x + y);
        Ok(self.push(t, Op::Add(a, b), &[a, b]))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "sub")?;
        let t = self.zip_map(a, b, |x, y| x - y);
        Ok(self.push(t, Op::Sub(a, b), &[a, b]))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "mul")?;
        let t = self.zip_map(a, b, |x, y| x * y);
        Ok(self.push(t, Op::Mul(a, b), &[a, b]))
    }

    fn row_operand(&self, x: Var, r: Var, op: &'static str) -> Result<usize> {
        let c = self.value(x).cols();
        if self.value(r).numel() != c {
            return Err(Error::shape(
                op,
                format!("row vector of {} values vs last dim {c}", self.value(r).numel()),
            ));
        }
        Ok(c)
    }

    /// Broadcast-add a `[C]` vector to every row of `x`.
    pub fn add_row(&mut self, x: Var, r: Var) -> Result<Var> {
        let c = self.row_operand(x, r, "add_row")?;
        let mut t = self.value(x).clone().with_requires_grad(false);
        let rv = self.value(r).data().to_vec();
        for row in t.data_mut().chunks_mut(c) {
            row.iter_mut().zip(&rv).for_each(|(v, b)| *v += b);
        }
        Ok(self.push(t, Op::AddRow(x, r), &[x, r]))
    }

    /// Broadcast-multiply every row of `x` by a `[C]` vector.
    pub fn mul_row(&mut self, x: Var, r: Var) -> Result<Var> {
        let c = self.row_operand(x, r, "mul_row")?;
        let mut t = self.value(x).clone().with_requires_grad(false);
        let rv = self.value(r).data().to_vec();
        for row in t.data_mut().chunks_mut(c) {
            row.iter_mut().zip(&rv).for_each(|(v, s)| *v *= s);
        }
        Ok(self.push(t, Op::MulRow(x, r), &[x, r]))
    }

    fn map(&self, x: Var, f: impl Fn(f32) -> f32) -> Tensor {
        let t = self.value(x);
        Tensor::new(t.shape().to_vec(), t.data().iter().map(|&v| f(v)).collect()).expect("same shape")
    }

    pub fn scale(&mut self, x: Var, s: f32) -> Var {
        let t = self.map(x, |v| v * s);
        self.push(t, Op::Scale(x, s), &[x])
    }

    /// Softmax over the last dimension.
    pub fn softmax(&mut self, x: Var) -> Var {
        let mut t = self.value(x).clone().with_requires_grad(false);
        let c = t.cols();
        t.data_mut().chunks_mut(c).for_each(kernels::softmax_in_place);
        self.push(t, Op::Softmax(x), &[x])
    }

    /// Zero-mean, unit-variance rows (layer norm without the affine part).
    pub fn normalize_rows(&mut self, x: Var, eps: f32) -> Var {
        let mut t = self.value(x).clone().with_requires_grad(false);
        let c = t.cols();
        let inv_std = t.data_mut().chunks_mut(c).map(|r| kernels::normalize_row(r, eps)).collect();
        self.push(t, Op::NormalizeRows { x, inv_std }, &[x])
    }

    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f32) -> Result<Var> {
        let n = self.normalize_rows(x, eps);
        let s = self.mul_row(n, gamma)?;
        self.add_row(s, beta)
    }

    pub fn gelu(&mut self, x: Var) -> Var {
        let t = self.map(x, kernels::gelu);
        self.push(t, Op::Gelu(x), &[x])
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let t = self.map(x, |v| v.max(0.0));
        self.push(t, Op::Relu(x), &[x])
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let t = self.map(x, kernels::sigmoid);
        self.push(t, Op::Sigmoid(x), &[x])
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let (m, n) = self.dims2(x, "transpose")?;
        let src = self.value(x).data();
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                out[j * m + i] = src[i * n + j];
            }
        }
        Ok(self.push(Tensor::new([n, m], out)?, Op::Transpose(x), &[x]))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let t = self.value(x).reshape(shape.to_vec())?;
        Ok(self.push(t, Op::Reshape(x), &[x]))
    }

    pub fn slice_rows(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let (m, n) = self.dims2(x, "slice_rows")?;
        if len == 0 || start + len > m {
            return Err(Error::shape("slice_rows", format!("rows {start}..{} of {m}", start + len)));
        }
        let data = self.value(x).data()[start * n..(start + len) * n].to_vec();
        Ok(self.push(Tensor::new([len, n], data)?, Op::SliceRows { x, start }, &[x]))
    }

    pub fn concat_rows(&mut self, xs: &[Var]) -> Result<Var> {
        let n = self.dims2(xs[0], "concat_rows")?.1;
        let mut data = Vec::new();
        let mut rows = 0;
        for &x in xs {
            let (m, c) = self.dims2(x, "concat_rows")?;
            if c != n {
                return Err(Error::shape("concat_rows", format!("width {c} vs {n}")));
            }
            rows += m;
            data.extend_from_slice(self.value(x).data());
        }
        Ok(self.push(Tensor::new([rows, n], data)?, Op::ConcatRows(xs.to_vec()), xs))
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let (m, n) = self.dims2(x, "slice_cols")?;
        if len == 0 || start + len > n {
            return Err(Error::shape("slice_cols", format!("cols {start}..{} of {n}", start + len)));
        }
        let src = self.value(x).data();
        let mut data = Vec::with_capacity(m * len);
        for i in 0..m {
            data.extend_from_slice(&src[i * n + start..i * n + start + len]);
        }
        Ok(self.push(Tensor::new([m, len], data)?, Op::SliceCols { x, start }, &[x]))
    }

    pub fn concat_cols(&mut self, xs: &[Var]) -> Result<Var> {
        let m = self.dims2(xs[0], "concat_cols")?.0;
        let mut widths = Vec::with_capacity(xs.len());
        for &x in xs {
            let (r, c) = self.dims2(x, "concat_cols")?;
            if r != m {
                return Err(Error::shape("concat_cols", format!("height {r} vs {m}")));
            }
            widths.push(c);
        }
        let total: usize = widths.iter().sum();
        let mut data = Vec::with_capacity(m * total);
        for i in 0..m {
            for (&x, &c) in xs.iter().zip(&widths) {
                data.extend_from_slice(&self.value(x).data()[i * c..(i + 1) * c]);
            }
        }
        Ok(self.push(Tensor::new([m, total], data)?, Op::ConcatCols(xs.to_vec()), xs))
    }

    pub fn select_rows(&mut self, x: Var, idx: &[usize]) -> Result<Var> {
        let t = self.value(x).select_rows(idx)?;
        Ok(self.push(t, Op::SelectRows { x, idx: idx.to_vec() }, &[x]))
    }

    /// `out[target[i]] += x[i]` for every row `i`; `out` has `n_out` rows.
    pub fn segment_sum(&mut self, x: Var, target: &[usize], n_out: usize) -> Result<Var> {
        let (m, c) = self.dims2(x, "segment_sum")?;
        if target.len() != m || target.iter().any(|&t| t >= n_out) {
            return Err(Error::shape("segment_sum", format!("{m} rows, map of {}", target.len())));
        }
        let src = self.value(x).data();
        let mut out = vec![0.0f32; n_out * c];
        for (i, &t) in target.iter().enumerate() {
            for (o, v) in out[t * c..(t + 1) * c].iter_mut().zip(&src[i * c..(i + 1) * c]) {
                *o += v;
            }
        }
        let t = Tensor::new([n_out, c], out)?;
        Ok(self.push(t, Op::SegmentSum { x, target: target.to_vec() }, &[x]))
    }

    fn grid_check(&self, x: Var, h: usize, w: usize, op: &'static str) -> Result<(usize, usize)> {
        let (m, c) = self.dims2(x, op)?;
        if m != h * w {
            return Err(Error::shape(op, format!("{m} tokens cannot form a {h}×{w} grid")));
        }
        Ok((m, c))
    }

    /// Unfold 3×3 neighbourhoods (zero padded) of a row-major `h×w` token
    /// grid `[h·w × C]` into `[h·w × 9C]`, tap-major.
    pub fn im2col3x3(&mut self, x: Var, h: usize, w: usize) -> Result<Var> {
        let (m, c) = self.grid_check(x, h, w, "im2col3x3")?;
        let src = self.value(x).data();
        let mut out = vec![0.0f32; m * 9 * c];
        for i in 0..h {
            for j in 0..w {
                let p = i * w + j;
                for (t, &(dy, dx)) in TAPS.iter().enumerate() {
                    let (y, xx) = (i as isize + dy, j as isize + dx);
                    if y < 0 || xx < 0 || y >= h as isize || xx >= w as isize {
                        continue;
                    }
                    let q = y as usize * w + xx as usize;
                    out[p * 9 * c + t * c..p * 9 * c + (t + 1) * c]
                        .copy_from_slice(&src[q * c..(q + 1) * c]);
                }
            }
        }
        Ok(self.push(Tensor::new([m, 9 * c], out)?, Op::Im2Col3x3 { x, h, w }, &[x]))
    }

    /// Per-channel 3×3 convolution with zero padding; `k` is `[9 × C]`.
    pub fn depthwise_conv3x3(&mut self, x: Var, k: Var, h: usize, w: usize) -> Result<Var> {
        let (m, c) = self.grid_check(x, h, w, "depthwise_conv3x3")?;
        if self.value(k).shape() != [9, c] {
            return Err(Error::shape(
                "depthwise_conv3x3",
                format!("kernel {:?} vs [9, {c}]", self.value(k).shape()),
            ));
        }
        // Padded copy so that every tap is an actual multiply.
        let (ph, pw) = (h + 2, w + 2);
        let mut padded = vec![0.0f32; ph * pw * c];
        let src = self.value(x).data();
        for i in 0..h {
            for j in 0..w {
                let q = (i + 1) * pw + j + 1;
                padded[q * c..(q + 1) * c].copy_from_slice(&src[(i * w + j) * c..(i * w + j + 1) * c]);
            }
        }
        let kd = self.value(k).data();
        let mut out = vec![0.0f32; m * c];
        for i in 0..h {
            for j in 0..w {
                let o = &mut out[(i * w + j) * c..(i * w + j + 1) * c];
                for (t, &(dy, dx)) in TAPS.iter().enumerate() {
                    let q = ((i as isize + 1 + dy) as usize) * pw + (j as isize + 1 + dx) as usize;
                    let xin = &padded[q * c..(q + 1) * c];
                    let kt = &kd[t * c..(t + 1) * c];
                    for ch in 0..c {
                        o[ch] += kt[ch] * xin[ch];
                    }
                }
            }
        }
        self.macs += (m * 9 * c) as u64;
        Ok(self.push(Tensor::new([m, c], out)?, Op::DepthwiseConv3x3 { x, k, h, w }, &[x, k]))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s: f64 = self.value(x).data().iter().map(|&v| v as f64).sum();
        self.push(Tensor::scalar(s as f32), Op::Sum(x), &[x])
    }

    /// `Σ w_i x_i` with fixed weights.
    pub fn weighted_sum(&mut self, x: Var, w: &[f32]) -> Result<Var> {
        if w.len() != self.value(x).numel() {
            return Err(Error::shape("weighted_sum", "weight count differs from numel"));
        }
        let s: f64 = self.value(x).data().iter().zip(w).map(|(&a, &b)| a as f64 * b as f64).sum();
        Ok(self.push(Tensor::scalar(s as f32), Op::WeightedSum { x, w: w.to_vec() }, &[x]))
    }

    /// Penalty-reduced focal loss over a probability map against a Gaussian
    /// target map, normalised by the number of positive (== 1) cells.
    pub fn focal_loss(&mut self, pred: Var, gt: &[f32], alpha: f32, beta: f32, eps: f32) -> Result<Var> {
        if gt.len() != self.value(pred).numel() {
            return Err(Error::shape("focal_loss", "prediction and target sizes differ"));
        }
        let loss = crate::losses::focal_value(self.value(pred).data(), gt, alpha, beta, eps)?;
        let op = Op::FocalLoss { pred, gt: gt.to_vec(), alpha, beta, eps };
        Ok(self.push(Tensor::scalar(loss as f32), op, &[pred]))
    }

    /// `1 − GIoU` between a predicted `(cx, cy, w, h)` and a fixed target.
    pub fn giou_loss(&mut self, pred: Var, gt: [f32; 4]) -> Result<Var> {
        let p = self.value(pred).data();
        if p.len() != 4 {
            return Err(Error::shape("giou_loss", "box must have 4 values"));
        }
        let (loss, _) = crate::losses::giou_loss_and_grad([p[0], p[1], p[2], p[3]], gt);
        Ok(self.push(Tensor::scalar(loss as f32), Op::GiouLoss { pred, gt }, &[pred]))
    }

    /// Mean absolute error against a fixed target.
    pub fn l1_loss(&mut self, pred: Var, target: &[f32]) -> Result<Var> {
        let p = self.value(pred).data();
        if p.len() != target.len() {
            return Err(Error::shape("l1_loss", "prediction and target sizes differ"));
        }
        let s: f64 = p.iter().zip(target).map(|(&a, &b)| (a as f64 - b as f64).abs()).sum();
        let v = (s / p.len() as f64) as f32;
        Ok(self.push(Tensor::scalar(v), Op::L1Loss { pred, target: target.to_vec() }, &[pred]))
    }

    /// Reverse accumulation from a scalar output.
    pub fn backward(&self, out: Var) -> Result<Gradients> {
        if self.value(out).numel() != 1 {
            return Err(Error::shape("backward", "output must be a scalar"));
        }
        let mut grads: Vec<Option<Vec<f32>>> = vec![None; out.0 + 1];
        grads[out.0] = Some(vec![1.0]);
        for idx in (0..=out.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            if node.needs_grad {
                self.backprop_node(node, &g, &mut grads);
            }
            grads[idx] = Some(g);
        }
        Ok(Gradients { grads })
    }

    fn backprop_node(&self, node: &Node, g: &[f32], grads: &mut [Option<Vec<f32>>]) {
        let needs = |v: Var| self.nodes[v.0].needs_grad;
        let mut acc = |v: Var, f: &mut dyn FnMut(&mut [f32])| {
            if !self.nodes[v.0].needs_grad {
                return;
            }
            let slot = grads[v.0].get_or_insert_with(|| vec![0.0; self.nodes[v.0].value.numel()]);
            f(slot);
        };
        let y = &node.value;
        match &node.op {
            Op::Input | Op::Param => {}
            Op::MatMul(a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                let (m, k, n) = (ta.shape()[0], ta.shape()[1], tb.shape()[1]);
                if needs(*a) {
                    let mut d = vec![0.0; m * k];
                    kernels::matmul_nt(g, tb.data(), &mut d, m, n, k);
                    acc(*a, &mut |s| add_into(s, &d));
                }
                if needs(*b) {
                    let mut d = vec![0.0; k * n];
                    kernels::matmul_tn(ta.data(), g, &mut d, m, k, n);
                    acc(*b, &mut |s| add_into(s, &d));
                }
            }
            Op::MatMulNt(a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                let (m, k, n) = (ta.shape()[0], ta.shape()[1], tb.shape()[0]);
                if needs(*a) {
                    let mut d = vec![0.0; m * k];
                    kernels::matmul(g, tb.data(), &mut d, m, n, k);
                    acc(*a, &mut |s| add_into(s, &d));
                }
                if needs(*b) {
                    let mut d = vec![0.0; n * k];
                    kernels::matmul_tn(g, ta.data(), &mut d, m, n, k);
                    acc(*b, &mut |s| add_into(s, &d));
                }
            }
            Op::Add(a, b) => {
                acc(*a, &mut |s| add_into(s, g));
                acc(*b, &mut |s| add_into(s, g));
            }
            Op::Sub(a, b) => {
                acc(*a, &mut |s| add_into(s, g));
                acc(*b, &mut |s| s.iter_mut().zip(g).for_each(|(d, v)| *d -= v));
            }
            Op::Mul(a, b) => {
                let (ta, tb) = (self.value(*a).data(), self.value(*b).data());
                acc(*a, &mut |s| s.iter_mut().zip(g).zip(tb).for_each(|((d, v), o)| *d += v * o));
                acc(*b, &mut |s| s.iter_mut().zip(g).zip(ta).for_each(|((d, v), o)| *d += v * o));
            }
            Op::AddRow(x, r) => {
                let c = y.cols();
                acc(*x, &mut |s| add_into(s, g));
                acc(*r, &mut |s| {
                    for row in g.chunks(c) {
                        add_into(s, row);
                    }
                });
            }
            Op::MulRow(x, r) => {
                let c = y.cols();
                let (tx, tr) = (self.value(*x).data(), self.value(*r).data());
                acc(*x, &mut |s| {
                    for (srow, grow) in s.chunks_mut(c).zip(g.chunks(c)) {
                        for ((d, v), f) in srow.iter_mut().zip(grow).zip(tr) {
                            *d += v * f;
                        }
                    }
                });
                acc(*r, &mut |s| {
                    for (grow, xrow) in g.chunks(c).zip(tx.chunks(c)) {
                        for ((d, v), xv) in s.iter_mut().zip(grow).zip(xrow) {
                            *d += v * xv;
                        }
                    }
                });
            }
            Op::Scale(x, f) => acc(*x, &mut |s| s.iter_mut().zip(g).for_each(|(d, v)| *d += v * f)),
            Op::Softmax(x) => {
                let c = y.cols();
                acc(*x, &mut |s| {
                    for ((srow, grow), yrow) in s.chunks_mut(c).zip(g.chunks(c)).zip(y.data().chunks(c)) {
                        let dot: f32 = grow.iter().zip(yrow).map(|(a, b)| a * b).sum();
                        for ((d, gv), yv) in srow.iter_mut().zip(grow).zip(yrow) {
                            *d += yv * (gv - dot);
                        }
                    }
                });
            }
            Op::NormalizeRows { x, inv_std } => {
                let c = y.cols();
                let n = c as f32;
                acc(*x, &mut |s| {
                    let rows = s.chunks_mut(c).zip(g.chunks(c)).zip(y.data().chunks(c));
                    for (((srow, grow), yrow), &inv) in rows.zip(inv_std) {
                        let sg: f32 = grow.iter().sum();
                        let sgy: f32 = grow.iter().zip(yrow).map(|(a, b)| a * b).sum();
                        for ((d, gv), yv) in srow.iter_mut().zip(grow).zip(yrow) {
                            *d += inv / n * (n * gv - sg - yv * sgy);
                        }
                    }
                });
            }
            Op::Gelu(x) => {
                let tx = self.value(*x).data();
                acc(*x, &mut |s| {
                    s.iter_mut().zip(g).zip(tx).for_each(|((d, v), xv)| *d += v * kernels::gelu_grad(*xv))
                });
            }
            Op::Relu(x) => {
                let tx = self.value(*x).data();
                acc(*x, &mut |s| {
                    s.iter_mut().zip(g).zip(tx).for_each(|((d, v), xv)| {
                        if *xv > 0.0 {
                            *d += v
                        }
                    })
                });
            }
            Op::Sigmoid(x) => acc(*x, &mut |s| {
                s.iter_mut().zip(g).zip(y.data()).for_each(|((d, v), yv)| *d += v * yv * (1.0 - yv))
            }),
            Op::Transpose(x) => {
                let (n, m) = (y.shape()[0], y.shape()[1]);
                acc(*x, &mut |s| {
                    for i in 0..m {
                        for j in 0..n {
                            s[i * n + j] += g[j * m + i];
                        }
                    }
                });
            }
            Op::Reshape(x) => acc(*x, &mut |s| add_into(s, g)),
            Op::SliceRows { x, start } => {
                let c = y.cols();
                acc(*x, &mut |s| add_into(&mut s[start * c..start * c + g.len()], g));
            }
            Op::ConcatRows(xs) => {
                let mut off = 0;
                for &x in xs {
                    let len = self.value(x).numel();
                    acc(x, &mut |s| add_into(s, &g[off..off + len]));
                    off += len;
                }
            }
            Op::SliceCols { x, start } => {
                let (m, len) = (y.shape()[0], y.shape()[1]);
                let n = self.value(*x).cols();
                acc(*x, &mut |s| {
                    for i in 0..m {
                        add_into(&mut s[i * n + start..i * n + start + len], &g[i * len..(i + 1) * len]);
                    }
                });
            }
            Op::ConcatCols(xs) => {
                let (m, total) = (y.shape()[0], y.shape()[1]);
                let mut off = 0;
                for &x in xs {
                    let c = self.value(x).cols();
                    acc(x, &mut |s| {
                        for i in 0..m {
                            add_into(&mut s[i * c..(i + 1) * c], &g[i * total + off..i * total + off + c]);
                        }
                    });
                    off += c;
                }
            }
            Op::SelectRows { x, idx } => {
                let c = y.cols();
                acc(*x, &mut |s| {
                    for (k, &i) in idx.iter().enumerate() {
                        add_into(&mut s[i * c..(i + 1) * c], &g[k * c..(k + 1) * c]);
                    }
                });
            }
            Op::SegmentSum { x, target } => {
                let c = y.cols();
                acc(*x, &mut |s| {
                    for (i, &t) in target.iter().enumerate() {
                        add_into(&mut s[i * c..(i + 1) * c], &g[t * c..(t + 1) * c]);
                    }
                });
            }
            Op::Im2Col3x3 { x, h, w } => {
                let c = self.value(*x).cols();
                let (h, w) = (*h, *w);
                acc(*x, &mut |s| {
                    for i in 0..h {
                        for j in 0..w {
                            let p = i * w + j;
                            for (t, &(dy, dx)) in TAPS.iter().enumerate() {
                                let (yy, xx) = (i as isize + dy, j as isize + dx);
                                if yy < 0 || xx < 0 || yy >= h as isize || xx >= w as isize {
                                    continue;
                                }
                                let q = yy as usize * w + xx as usize;
                                let base = p * 9 * c + t * c;
                                add_into(&mut s[q * c..(q + 1) * c], &g[base..base + c]);
                            }
                        }
                    }
                });
            }
            Op::DepthwiseConv3x3 { x, k, h, w } => {
                let c = y.cols();
                let (h, w) = (*h, *w);
                let (tx, tk) = (self.value(*x).data(), self.value(*k).data());
                let each_tap = |f: &mut dyn FnMut(usize, usize, usize)| {
                    for i in 0..h {
                        for j in 0..w {
                            for (t, &(dy, dx)) in TAPS.iter().enumerate() {
                                let (yy, xx) = (i as isize + dy, j as isize + dx);
                                if yy < 0 || xx < 0 || yy >= h as isize || xx >= w as isize {
                                    continue;
                                }
                                f(i * w + j, t, yy as usize * w + xx as usize);
                            }
                        }
                    }
                };
                acc(*x, &mut |s| {
                    each_tap(&mut |p, t, q| {
                        for ch in 0..c {
                            s[q * c + ch] += g[p * c + ch] * tk[t * c + ch];
                        }
                    })
                });
                acc(*k, &mut |s| {
                    each_tap(&mut |p, t, q| {
                        for ch in 0..c {
                            s[t * c + ch] += g[p * c + ch] * tx[q * c + ch];
                        }
                    })
                });
            }
            Op::Sum(x) => acc(*x, &mut |s| s.iter_mut().for_each(|d| *d += g[0])),
            Op::WeightedSum { x, w } => {
                acc(*x, &mut |s| s.iter_mut().zip(w).for_each(|(d, wv)| *d += g[0] * wv))
            }
            Op::FocalLoss { pred, gt, alpha, beta, eps } => {
                let p = self.value(*pred).data();
                let d = crate::losses::focal_grad(p, gt, *alpha, *beta, *eps);
                acc(*pred, &mut |s| s.iter_mut().zip(&d).for_each(|(a, v)| *a += g[0] * *v as f32));
            }
            Op::GiouLoss { pred, gt } => {
                let p = self.value(*pred).data();
                let (_, d) = crate::losses::giou_loss_and_grad([p[0], p[1], p[2], p[3]], *gt);
                acc(*pred, &mut |s| s.iter_mut().zip(&d).for_each(|(a, v)| *a += g[0] * *v as f32));
            }
            Op::L1Loss { pred, target } => {
                let p = self.value(*pred).data();
                let n = p.len() as f32;
                acc(*pred, &mut |s| {
                    for ((a, &pv), &tv) in s.iter_mut().zip(p).zip(target) {
                        let sign = if pv > tv { 1.0 } else if pv < tv { -1.0 } else { 0.0 };
                        *a += g[0] * sign / n;
                    }
                });
            }
        }
    }
}

fn add_into(dst: &mut [f32], src: &[f32]) {
    dst.iter_mut().zip(src).for_each(|(d, s)| *d += s);
}

/// Gradients from one reverse pass, indexed by tape variable.
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    grads: Vec<Option<Vec<f32>>>,
}

impl Gradients {
    pub fn get(&self, graph: &Graph, v: Var) -> Option<Tensor> {
        let g = self.grads.get(v.0)?.as_ref()?;
        Some(Tensor::new(graph.value(v).shape().to_vec(), g.clone()).expect("grad shape"))
    }

    /// Gradient for every trainable parameter touched by the graph.
    pub fn params(&self, graph: &Graph) -> Vec<(ParamId, Tensor)> {
        graph
            .params
            .iter()
            .filter(|(_, v)| graph.nodes[v.0].needs_grad)
            .filter_map(|(&id, &v)| self.get(graph, v).map(|t| (id, t)))
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn matmul_counts_macs() {
        let mut g = Graph::new();
        let a = g.constant(Tensor::zeros([3, 4]));
        let b = g.constant(Tensor::zeros([4, 5]));
        g.matmul(a, b).unwrap();
        assert_eq!(g.macs(), 60);
        g.matmul_nt(a, a).unwrap();
        assert_eq!(g.macs(), 60 + 36);
    }

    #[test]
    fn sum_of_matmul_grad_is_ones_times_bt() {
        let mut g = Graph::new();
        let a = g.input(Tensor::from_rows(&[vec![1.0, 2.0], vec![3.0, 4.0]]).unwrap().with_requires_grad(true));
        let b = g.constant(Tensor::from_rows(&[vec![0.5, -1.0], vec![2.0, 0.25]]).unwrap());
        let c = g.matmul(a, b).unwrap();
        let s = g.sum(c);
        let ga = g.backward(s).unwrap().get(&g, a).unwrap();
        // ones[2×2] @ bᵀ: each row is the row sums of b.
        assert_eq!(ga.data(), &[-0.5, 2.25, -0.5, 2.25]);
    }

    #[test]
    fn backward_is_replayable() {
        let mut g = Graph::new();
        let x = g.input(Tensor::from_rows(&[vec![0.3, -0.7, 1.1]]).unwrap().with_requires_grad(true));
        let s = g.softmax(x);
        let n = g.normalize_rows(s, 1e-5);
        let y = g.weighted_sum(n, &[1.0, 2.0, -3.0]).unwrap();
        assert_eq!(g.backward(y).unwrap(), g.backward(y).unwrap());
    }

    #[test]
    fn segment_sum_rejects_bad_map() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::zeros([3, 2]));
        assert!(g.segment_sum(x, &[0, 1], 2).is_err());
        assert!(g.segment_sum(x, &[0, 1, 2], 2).is_err());
    }

    #[test]
    fn depthwise_counts_padded_taps() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::zeros([6, 3]));
        let k = g.constant(Tensor::zeros([9, 3]));
        g.depthwise_conv3x3(x, k, 2, 3).unwrap();
        assert_eq!(g.macs(), 6 * 9 * 3);
        assert!(g.depthwise_conv3x3(x, k, 3, 3).is_err());
    }
}
