//! Dense row-major `f32` tensors, the forward kernels shared with the
//! autodiff graph, and the `TOKT0001` binary dump format.

use std::io::{Read, Write};
use std::path::Path;

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Dense tensor of rank 1 to 3. `product(shape) == data.len()` always holds.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f32>,
    requires_grad: bool,
}

impl Tensor {
    pub fn new(shape: impl Into<Vec<usize>>, data: Vec<f32>) -> Result<Self> {
        let shape = shape.into();
        if shape.is_empty() || shape.len() > 3 {
            return Err(Error::shape("tensor", format!("rank {} not in 1..=3", shape.len())));
        }
        if shape.iter().any(|&d| d == 0) {
            return Err(Error::shape("tensor", format!("zero dimension in {shape:?}")));
        }
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(Error::shape(
                "tensor",
                format!("shape {shape:?} holds {numel} values, got {}", data.len()),
            ));
        }
        Ok(Tensor { shape, data, requires_grad: false })
    }

    pub fn zeros(shape: impl Into<Vec<usize>>) -> Self {
        let shape = shape.into();
        let n = shape.iter().product();
        Tensor::new(shape, vec![0.0; n]).expect("valid zero shape")
    }

    pub fn filled(shape: impl Into<Vec<usize>>, value: f32) -> Self {
        let mut t = Tensor::zeros(shape);
        t.data.iter_mut().for_each(|v| *v = value);
        t
    }

    pub fn scalar(value: f32) -> Self {
        Tensor { shape: vec![1], data: vec![value], requires_grad: false }
    }

    pub fn from_rows(rows: &[Vec<f32>]) -> Result<Self> {
        let n = rows.len();
        let c = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != c) {
            return Err(Error::shape("from_rows", "ragged rows"));
        }
        Tensor::new([n, c], rows.concat())
    }

    pub fn eye(n: usize) -> Self {
        let mut t = Tensor::zeros([n, n]);
        for i in 0..n {
            t.data[i * n + i] = 1.0;
        }
        t
    }

    /// Gaussian initialisation with the given standard deviation.
    pub fn randn<R: Rng + ?Sized>(shape: impl Into<Vec<usize>>, std: f32, rng: &mut R) -> Self {
        let mut t = Tensor::zeros(shape);
        for v in &mut t.data {
            let z: f32 = rng.sample(StandardNormal);
            *v = z * std;
        }
        t
    }

    pub fn with_requires_grad(mut self, flag: bool) -> Self {
        self.requires_grad = flag;
        self
    }

    pub fn requires_grad(&self) -> bool {
        self.requires_grad
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    /// Number of rows when viewed as a matrix `[rows × last_dim]`.
    pub fn rows(&self) -> usize {
        self.data.len() / self.cols()
    }

    /// Size of the last dimension.
    pub fn cols(&self) -> usize {
        *self.shape.last().expect("rank >= 1")
    }

    pub fn row(&self, i: usize) -> &[f32] {
        let c = self.cols();
        &self.data[i * c..(i + 1) * c]
    }

    pub fn at(&self, i: usize, j: usize) -> f32 {
        self.data[i * self.cols() + j]
    }

    pub fn reshape(&self, shape: impl Into<Vec<usize>>) -> Result<Self> {
        Tensor::new(shape, self.data.clone())
    }

    /// Rows selected by index, in the given order.
    pub fn select_rows(&self, idx: &[usize]) -> Result<Self> {
        let c = self.cols();
        let mut out = Vec::with_capacity(idx.len() * c);
        for &i in idx {
            if i >= self.rows() {
                return Err(Error::shape("select_rows", format!("row {i} out of {}", self.rows())));
            }
            out.extend_from_slice(self.row(i));
        }
        Tensor::new([idx.len(), c], out)
    }

    /// Column-wise sum over rows, accumulated in f64.
    pub fn sum_rows(&self) -> Vec<f64> {
        let c = self.cols();
        let mut acc = vec![0.0f64; c];
        for r in self.data.chunks(c) {
            for (a, &v) in acc.iter_mut().zip(r) {
                *a += v as f64;
            }
        }
        acc
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn max_abs_diff(&self, other: &Tensor) -> f32 {
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f32::max)
    }

    fn as_matrix(&self, op: &'static str) -> Result<(usize, usize)> {
        if self.shape.len() != 2 {
            return Err(Error::shape(op, format!("expected rank-2, got {:?}", self.shape)));
        }
        Ok((self.shape[0], self.shape[1]))
    }
}

/// Matrix product `[m×k] @ [k×n]`.
pub fn matmul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (m, k) = a.as_matrix("matmul")?;
    let (k2, n) = b.as_matrix("matmul")?;
    if k != k2 {
        return Err(Error::shape(
            "matmul",
            format!("lhs {:?} and rhs {:?}: inner dims {k} != {k2}", a.shape, b.shape),
        ));
    }
    let mut out = vec![0.0; m * n];
    kernels::matmul(&a.data, &b.data, &mut out, m, k, n);
    Tensor::new([m, n], out)
}

/// Softmax along `axis`, stabilised by max subtraction.
pub fn softmax(x: &Tensor, axis: usize) -> Result<Tensor> {
    let rank = x.shape.len();
    if axis >= rank {
        return Err(Error::arg("axis", format!("{axis} out of range for rank {rank}")));
    }
    let len = x.shape[axis];
    let inner: usize = x.shape[axis + 1..].iter().product();
    let outer: usize = x.shape[..axis].iter().product();
    let mut out = x.data.clone();
    let mut buf = vec![0.0f32; len];
    for o in 0..outer {
        for i in 0..inner {
            let base = o * len * inner + i;
            for (t, b) in buf.iter_mut().enumerate() {
                *b = x.data[base + t * inner];
            }
            kernels::softmax_in_place(&mut buf);
            for (t, b) in buf.iter().enumerate() {
                out[base + t * inner] = *b;
            }
        }
    }
    Tensor::new(x.shape.clone(), out)
}

/// Layer normalisation over the last dimension.
pub fn layer_norm(x: &Tensor, gamma: &[f32], beta: &[f32], eps: f32) -> Result<Tensor> {
    let c = x.cols();
    if gamma.len() != c || beta.len() != c {
        return Err(Error::shape(
            "layer_norm",
            format!("gamma/beta lengths {}/{} vs last dim {c}", gamma.len(), beta.len()),
        ));
    }
    let mut out = x.data.clone();
    for row in out.chunks_mut(c) {
        kernels::normalize_row(row, eps);
        for ((v, g), b) in row.iter_mut().zip(gamma).zip(beta) {
            *v = *v * g + b;
        }
    }
    Tensor::new(x.shape.clone(), out)
}

pub(crate) mod kernels {
    /// `out[m×n] = a[m×k] @ b[k×n]`, accumulated in f32 in i-k-j order.
    pub fn matmul(a: &[f32], b: &[f32], out: &mut [f32], m: usize, k: usize, n: usize) {
        out.iter_mut().for_each(|v| *v = 0.0);
        for i in 0..m {
            let orow = &mut out[i * n..(i + 1) * n];
            for p in 0..k {
                let av = a[i * k + p];
                if av == 0.0 {
                    continue;
                }
                let brow = &b[p * n..(p + 1) * n];
                for (o, &bv) in orow.iter_mut().zip(brow) {
                    *o += av * bv;
                }
            }
        }
    }

    /// `out[m×n] = a[m×k] @ b[n×k]ᵀ`.
    pub fn matmul_nt(a: &[f32], b: &[f32], out: &mut [f32], m: usize, k: usize, n: usize) {
        for i in 0..m {
            let arow = &a[i * k..(i + 1) * k];
            for j in 0..n {
                let brow = &b[j * k..(j + 1) * k];
                out[i * n + j] = arow.iter().zip(brow).map(|(x, y)| x * y).sum();
            }
        }
    }

    /// `out[k×n] = a[m×k]ᵀ @ b[m×n]`.
    pub fn matmul_tn(a: &[f32], b: &[f32], out: &mut [f32], m: usize, k: usize, n: usize) {
        out.iter_mut().for_each(|v| *v = 0.0);
        for i in 0..m {
            let brow = &b[i * n..(i + 1) * n];
            for p in 0..k {
                let av = a[i * k + p];
                if av == 0.0 {
                    continue;
                }
                let orow = &mut out[p * n..(p + 1) * n];
                for (o, &bv) in orow.iter_mut().zip(brow) {
                    *o += av * bv;
                }
            }
        }
    }

    pub fn softmax_in_place(row: &mut [f32]) {
        let max = row.iter().copied().fold(f32::NEG_INFINITY, f32::max);
        let mut sum = 0.0f64;
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            sum += *v as f64;
        }
        let inv = (1.0 / sum) as f32;
        row.iter_mut().for_each(|v| *v *= inv);
    }

    /// Normalise a row to zero mean and unit variance in place; returns `1/σ`.
    pub fn normalize_row(row: &mut [f32], eps: f32) -> f32 {
        let n = row.len() as f64;
        let mean = row.iter().map(|&v| v as f64).sum::<f64>() / n;
        let var = row.iter().map(|&v| (v as f64 - mean).powi(2)).sum::<f64>() / n;
        let inv_std = 1.0 / (var + eps as f64).sqrt();
        for v in row.iter_mut() {
            *v = ((*v as f64 - mean) * inv_std) as f32;
        }
        inv_std as f32
    }

    pub fn gelu(x: f32) -> f32 {
        const K: f32 = 0.797_884_6; // sqrt(2/pi)
        0.5 * x * (1.0 + (K * (x + 0.044715 * x * x * x)).tanh())
    }

    pub fn gelu_grad(x: f32) -> f32 {
        const K: f32 = 0.797_884_6;
        let u = K * (x + 0.044715 * x * x * x);
        let t = u.tanh();
        let du = K * (1.0 + 3.0 * 0.044715 * x * x);
        0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du
    }

    pub fn sigmoid(x: f32) -> f32 {
        if x >= 0.0 {
            1.0 / (1.0 + (-x).exp())
        } else {
            let e = x.exp();
            e / (1.0 + e)
        }
    }
}

// ---------------------------------------------------------------------------
// Binary dump: "TOKT0001" | u32 LE header length | JSON header | f32 LE payload

pub const DUMP_MAGIC: &[u8; 8] = b"TOKT0001";

#[derive(Serialize, Deserialize)]
struct DumpHeader {
    shape: Vec<usize>,
    dtype: String,
}

pub fn write_dump<W: Write>(t: &Tensor, mut w: W) -> Result<()> {
    let header = serde_json::to_vec(&DumpHeader { shape: t.shape.clone(), dtype: "f32".into() })?;
    w.write_all(DUMP_MAGIC)?;
    w.write_all(&(header.len() as u32).to_le_bytes())?;
    w.write_all(&header)?;
    let mut payload = Vec::with_capacity(t.data.len() * 4);
    for v in &t.data {
        payload.extend_from_slice(&v.to_le_bytes());
    }
    w.write_all(&payload)?;
    Ok(())
}

pub fn read_dump<R: Read>(mut r: R) -> Result<Tensor> {
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic)?;
    if &magic != DUMP_MAGIC {
        return Err(Error::Format(format!("bad magic {magic:?}")));
    }
    let mut len = [0u8; 4];
    r.read_exact(&mut len)?;
    let mut header = vec![0u8; u32::from_le_bytes(len) as usize];
    r.read_exact(&mut header)?;
    let header: DumpHeader = serde_json::from_slice(&header)?;
    if header.dtype != "f32" {
        return Err(Error::Format(format!("unsupported dtype {}", header.dtype)));
    }
    let numel: usize = header.shape.iter().product();
    let mut payload = vec![0u8; numel * 4];
    r.read_exact(&mut payload)?;
    let mut trailing = [0u8; 1];
    if r.read(&mut trailing)? != 0 {
        return Err(Error::Format("trailing bytes after payload".into()));
    }
    let data = payload
        .chunks_exact(4)
        .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
        .collect();
    Tensor::new(header.shape, data).map_err(|e| Error::Format(e.to_string()))
}

pub fn save(t: &Tensor, path: &Path) -> Result<()> {
    let f = std::io::BufWriter::new(std::fs::File::create(path)?);
    write_dump(t, f)
}

pub fn load(path: &Path) -> Result<Tensor> {
    read_dump(std::io::BufReader::new(std::fs::File::open(path)?))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn identity_matmul() {
        let i = Tensor::eye(2);
        assert_eq!(matmul(&i, &i).unwrap(), i);
    }

    #[test]
    fn hand_matmul() {
        let a = Tensor::from_rows(&[vec![1.0, 2.0], vec![3.0, 4.0]]).unwrap();
        let b = Tensor::from_rows(&[vec![0.0], vec![1.0]]).unwrap();
        assert_eq!(matmul(&a, &b).unwrap().data(), &[2.0, 4.0]);
    }

    #[test]
    fn matmul_shape_error_reports_shapes() {
        let a = Tensor::zeros([2, 3]);
        let b = Tensor::zeros([2, 3]);
        let msg = matmul(&a, &b).unwrap_err().to_string();
        assert!(msg.contains("[2, 3]") && msg.contains("3 != 2"), "{msg}");
    }

    #[test]
    fn softmax_cases() {
        let s = softmax(&Tensor::new([3], vec![0.0; 3]).unwrap(), 0).unwrap();
        for v in s.data() {
            assert!((v - 1.0 / 3.0).abs() < 1e-7);
        }
        let s = softmax(&Tensor::new([2], vec![1000.0, 1000.0]).unwrap(), 0).unwrap();
        assert_eq!(s.data(), &[0.5, 0.5]);
        let s = softmax(&Tensor::new([2], vec![0.0, 3f32.ln()]).unwrap(), 0).unwrap();
        assert!((s.data()[0] - 0.25).abs() < 1e-6 && (s.data()[1] - 0.75).abs() < 1e-6);
    }

    #[test]
    fn softmax_inner_axis() {
        let x = Tensor::new([2, 2], vec![0.0, 0.0, 3f32.ln(), 0.0]).unwrap();
        let s = softmax(&x, 0).unwrap();
        assert!((s.at(0, 0) - 0.25).abs() < 1e-6);
        assert!((s.at(1, 0) - 0.75).abs() < 1e-6);
        assert!((s.at(0, 1) - 0.5).abs() < 1e-6);
        assert!(softmax(&x, 2).is_err());
    }

    #[test]
    fn layer_norm_cases() {
        let x = Tensor::new([1, 4], vec![2.5; 4]).unwrap();
        let y = layer_norm(&x, &[1.0; 4], &[0.0; 4], 1e-5).unwrap();
        assert!(y.data().iter().all(|v| *v == 0.0));
        let x = Tensor::new([1, 2], vec![1.0, 3.0]).unwrap();
        let y = layer_norm(&x, &[1.0; 2], &[0.0; 2], 1e-5).unwrap();
        assert!((y.data()[0] + 1.0).abs() < 1e-5 && (y.data()[1] - 1.0).abs() < 1e-5);
        assert!(layer_norm(&x, &[1.0; 3], &[0.0; 2], 1e-5).is_err());
    }

    #[test]
    fn rejects_bad_shapes() {
        assert!(Tensor::new([2, 2], vec![0.0; 3]).is_err());
        assert!(Tensor::new([0, 2], vec![]).is_err());
        assert!(Tensor::new([1, 1, 1, 1], vec![0.0]).is_err());
    }

    #[test]
    fn dump_rejects_bad_magic() {
        let mut buf = Vec::new();
        write_dump(&Tensor::eye(2), &mut buf).unwrap();
        buf[0] = b'X';
        assert!(matches!(read_dump(&buf[..]), Err(Error::Format(_))));
    }
}
