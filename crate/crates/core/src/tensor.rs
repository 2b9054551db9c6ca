//! Dense row-major tensors and the raw kernels shared by the tape and the
//! tape-free inference path.

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TensorError {
    #[error("{op}: incompatible shapes {lhs:?} and {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("{op}: expected rank {expected}, got shape {shape:?}")]
    Rank {
        op: &'static str,
        expected: usize,
        shape: Vec<usize>,
    },
    #[error("{op}: index {index} out of range for extent {extent}")]
    Index {
        op: &'static str,
        index: usize,
        extent: usize,
    },
    #[error("data length {len} does not match shape {shape:?}")]
    DataLength { len: usize, shape: Vec<usize> },
    #[error("backward requires a scalar output, got shape {0:?}")]
    NonScalar(Vec<usize>),
}

/// Floating-point mode. `F32` rounds every op output through `f32`; storage
/// stays `f64` so the two modes share one code path.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub enum Precision {
    F32,
    #[default]
    F64,
}

impl Precision {
    #[inline]
    pub fn round(self, v: f64) -> f64 {
        match self {
            Precision::F64 => v,
            Precision::F32 => v as f32 as f64,
        }
    }

    pub fn round_slice(self, data: &mut [f64]) {
        if self == Precision::F32 {
            for v in data.iter_mut() {
                *v = *v as f32 as f64;
            }
        }
    }

    pub fn from_bits(bits: u32) -> Option<Self> {
        match bits {
            32 => Some(Precision::F32),
            64 => Some(Precision::F64),
            _ => None,
        }
    }

    pub fn bits(self) -> u32 {
        match self {
            Precision::F32 => 32,
            Precision::F64 => 64,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self, TensorError> {
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(TensorError::DataLength {
                len: data.len(),
                shape,
            });
        }
        Ok(Tensor { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let numel = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: vec![0.0; numel],
        }
    }

    pub fn full(shape: &[usize], value: f64) -> Self {
        let numel = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: vec![value; numel],
        }
    }

    pub fn scalar(value: f64) -> Self {
        Tensor {
            shape: vec![],
            data: vec![value],
        }
    }

    pub fn from_vec(data: Vec<f64>) -> Self {
        Tensor {
            shape: vec![data.len()],
            data,
        }
    }

    pub fn matrix(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self, TensorError> {
        Tensor::new(vec![rows, cols], data)
    }

    pub fn eye(n: usize) -> Self {
        let mut t = Tensor::zeros(&[n, n]);
        for i in 0..n {
            t.data[i * n + i] = 1.0;
        }
        t
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

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// `(rows, cols)` of a rank-2 tensor; rank-1 tensors are a single row.
    pub fn dims2(&self, op: &'static str) -> Result<(usize, usize), TensorError> {
        match self.shape.as_slice() {
            [r, c] => Ok((*r, *c)),
            [c] => Ok((1, *c)),
            _ => Err(TensorError::Rank {
                op,
                expected: 2,
                shape: self.shape.clone(),
            }),
        }
    }

    pub fn item(&self) -> f64 {
        self.data[0]
    }

    pub fn row(&self, i: usize) -> &[f64] {
        let cols = *self.shape.last().unwrap_or(&1);
        &self.data[i * cols..(i + 1) * cols]
    }

    pub fn matmul(&self, other: &Tensor) -> Result<Tensor, TensorError> {
        let (m, k) = self.dims2("matmul")?;
        let (k2, n) = other.dims2("matmul")?;
        if k != k2 {
            return Err(TensorError::ShapeMismatch {
                op: "matmul",
                lhs: self.shape.clone(),
                rhs: other.shape.clone(),
            });
        }
        let mut out = vec![0.0; m * n];
        matmul_into(&self.data, &other.data, m, k, n, &mut out);
        Ok(Tensor {
            shape: vec![m, n],
            data: out,
        })
    }
}

/// `out[m,n] += a[m,k] · b[k,n]`
pub fn matmul_into(a: &[f64], b: &[f64], m: usize, k: usize, n: usize, out: &mut [f64]) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(out.len(), m * n);
    for i in 0..m {
        let orow = &mut out[i * n..(i + 1) * n];
        let arow = &a[i * k..(i + 1) * k];
        for (p, &av) in arow.iter().enumerate() {
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

/// `out[m,n] += a[m,k] · b[n,k]ᵀ`
pub fn matmul_bt_into(a: &[f64], b: &[f64], m: usize, k: usize, n: usize, out: &mut [f64]) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), n * k);
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        for j in 0..n {
            let brow = &b[j * k..(j + 1) * k];
            out[i * n + j] += dot(arow, brow);
        }
    }
}

/// `out[k,n] += a[m,k]ᵀ · b[m,n]`
pub fn matmul_at_into(a: &[f64], b: &[f64], m: usize, k: usize, n: usize, out: &mut [f64]) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), m * n);
    debug_assert_eq!(out.len(), k * n);
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        let brow = &b[i * n..(i + 1) * n];
        for (p, &av) in arow.iter().enumerate() {
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

#[inline]
pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    let mut acc = [0.0f64; 4];
    let chunks = a.len() / 4;
    for c in 0..chunks {
        let i = c * 4;
        acc[0] += a[i] * b[i];
        acc[1] += a[i + 1] * b[i + 1];
        acc[2] += a[i + 2] * b[i + 2];
        acc[3] += a[i + 3] * b[i + 3];
    }
    let mut s = (acc[0] + acc[1]) + (acc[2] + acc[3]);
    for i in chunks * 4..a.len() {
        s += a[i] * b[i];
    }
    s
}

/// Numerically stable in-place softmax of one row. A row of all `-inf`
/// cannot occur because callers always leave at least one unmasked entry.
pub fn softmax_in_place(row: &mut [f64]) {
    let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    let inv = 1.0 / sum;
    for v in row.iter_mut() {
        *v *= inv;
    }
}

pub fn log_softmax_in_place(row: &mut [f64]) {
    let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
    for v in row.iter_mut() {
        *v -= lse;
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)

#[inline]
pub fn gelu(x: f64) -> f64 {
    let u = GELU_C * (x + 0.044715 * x * x * x);
    0.5 * x * (1.0 + u.tanh())
}

#[inline]
pub fn gelu_grad(x: f64) -> f64 {
    let u = GELU_C * (x + 0.044715 * x * x * x);
    let t = u.tanh();
    let du = GELU_C * (1.0 + 3.0 * 0.044715 * x * x);
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du
}

pub const LAYER_NORM_EPS: f64 = 1e-5;

/// Row-wise layer norm; returns `(normalized, inverse std)` per row so the
/// tape can reuse them in the backward pass.
pub fn layer_norm_rows(
    x: &[f64],
    rows: usize,
    cols: usize,
    gain: &[f64],
    bias: &[f64],
    out: &mut [f64],
    xhat: &mut [f64],
    inv_std: &mut [f64],
) {
    for r in 0..rows {
        let xr = &x[r * cols..(r + 1) * cols];
        let mean = xr.iter().sum::<f64>() / cols as f64;
        let var = xr.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / cols as f64;
        let is = 1.0 / (var + LAYER_NORM_EPS).sqrt();
        inv_std[r] = is;
        for c in 0..cols {
            let h = (xr[c] - mean) * is;
            xhat[r * cols + c] = h;
            out[r * cols + c] = h * gain[c] + bias[c];
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn identity_matmul_returns_operand() {
        let a = Tensor::matrix(3, 3, (0..9).map(|v| v as f64 * 0.5 - 1.0).collect()).unwrap();
        assert_eq!(Tensor::eye(3).matmul(&a).unwrap(), a);
    }

    #[test]
    fn uniform_logits_give_uniform_softmax() {
        let mut row = [0.0; 3];
        softmax_in_place(&mut row);
        for v in row {
            assert!((v - 1.0 / 3.0).abs() < 1e-15);
        }
    }

    #[test]
    fn mismatched_matmul_names_op_and_shapes() {
        let a = Tensor::zeros(&[2, 3]);
        let b = Tensor::zeros(&[2, 3]);
        let err = a.matmul(&b).unwrap_err();
        assert_eq!(
            err,
            TensorError::ShapeMismatch {
                op: "matmul",
                lhs: vec![2, 3],
                rhs: vec![2, 3]
            }
        );
        assert!(err.to_string().contains("matmul"));
    }

    #[test]
    fn transposed_kernels_agree_with_plain_matmul() {
        let a: Vec<f64> = (0..6).map(|v| v as f64 + 1.0).collect(); // 2x3
        let b: Vec<f64> = (0..12).map(|v| (v as f64) * 0.25 - 1.0).collect(); // 3x4
        let mut c = vec![0.0; 8];
        matmul_into(&a, &b, 2, 3, 4, &mut c);
        // b transposed: 4x3
        let mut bt = vec![0.0; 12];
        for i in 0..3 {
            for j in 0..4 {
                bt[j * 3 + i] = b[i * 4 + j];
            }
        }
        let mut c2 = vec![0.0; 8];
        matmul_bt_into(&a, &bt, 2, 3, 4, &mut c2);
        assert_eq!(c, c2);
        // aᵀ·c has shape 3x4
        let mut at = vec![0.0; 12];
        matmul_at_into(&a, &c, 2, 3, 4, &mut at);
        let mut a_t = vec![0.0; 6];
        for i in 0..2 {
            for j in 0..3 {
                a_t[j * 2 + i] = a[i * 3 + j];
            }
        }
        let mut at2 = vec![0.0; 12];
        matmul_into(&a_t, &c, 3, 2, 4, &mut at2);
        assert_eq!(at, at2);
    }

    #[test]
    fn f32_mode_rounds() {
        let v = 0.1f64;
        assert_eq!(Precision::F32.round(v), 0.1f32 as f64);
        assert_eq!(Precision::F64.round(v), v);
    }
}
