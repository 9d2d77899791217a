//! Dense row-major `f64` tensors and the handful of kernels the model zoo
//! needs: matrix products, valid-padding convolution, softmax and
//! cross-entropy.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Lower clamp applied to probabilities before taking a logarithm.
pub const LOG_CLAMP: f64 = 1e-9;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    /// Builds a tensor, rejecting zero extents, length mismatches and
    /// non-finite values.
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        if shape.is_empty() || shape.contains(&0) {
            return Err(Error::dim(format!("invalid shape {shape:?}")));
        }
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            return Err(Error::dim(format!(
                "shape {shape:?} needs {expected} values, got {}",
                data.len()
            )));
        }
        if let Some(bad) = data.iter().find(|v| !v.is_finite()) {
            return Err(Error::Domain(format!("non-finite value {bad}")));
        }
        Ok(Self { shape, data })
    }

    /// Unchecked constructor for kernels whose output shape is known correct.
    pub(crate) fn from_parts(shape: Vec<usize>, data: Vec<f64>) -> Self {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        Self { shape, data }
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let n = shape.iter().product();
        Self::from_parts(shape.to_vec(), vec![0.0; n])
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let cols = rows.first().map(Vec::len).unwrap_or(0);
        if rows.iter().any(|r| r.len() != cols) {
            return Err(Error::dim("ragged rows"));
        }
        Self::new(vec![rows.len(), cols], rows.concat())
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub(crate) fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    /// Extent of the leading (batch) axis.
    pub fn rows(&self) -> usize {
        self.shape[0]
    }

    /// Number of values per leading-axis item.
    pub fn row_len(&self) -> usize {
        self.shape[1..].iter().product()
    }

    pub fn row(&self, i: usize) -> &[f64] {
        let w = self.row_len();
        &self.data[i * w..(i + 1) * w]
    }

    pub fn reshape(self, shape: Vec<usize>) -> Result<Self> {
        if shape.iter().product::<usize>() != self.data.len() || shape.contains(&0) {
            return Err(Error::dim(format!(
                "cannot reshape {:?} into {shape:?}",
                self.shape
            )));
        }
        Ok(Self {
            shape,
            data: self.data,
        })
    }

    /// Gathers leading-axis items in the given order.
    pub fn select_rows(&self, indices: &[usize]) -> Result<Self> {
        if indices.is_empty() {
            return Err(Error::dim("cannot select zero rows"));
        }
        let w = self.row_len();
        let mut data = Vec::with_capacity(indices.len() * w);
        for &i in indices {
            if i >= self.rows() {
                return Err(Error::dim(format!(
                    "row {i} out of range for {} rows",
                    self.rows()
                )));
            }
            data.extend_from_slice(self.row(i));
        }
        let mut shape = self.shape.clone();
        shape[0] = indices.len();
        Ok(Self::from_parts(shape, data))
    }

    /// Stacks equally shaped items along a new leading axis.
    pub fn stack_rows(item_shape: &[usize], rows: &[&[f64]]) -> Result<Self> {
        let w: usize = item_shape.iter().product();
        if rows.iter().any(|r| r.len() != w) {
            return Err(Error::dim(format!(
                "row length differs from item shape {item_shape:?}"
            )));
        }
        let mut shape = vec![rows.len()];
        shape.extend_from_slice(item_shape);
        Self::new(shape, rows.concat())
    }

    pub(crate) fn map(&self, f: impl Fn(f64) -> f64) -> Self {
        Self::from_parts(
            self.shape.clone(),
            self.data.iter().map(|&v| f(v)).collect(),
        )
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

/// Index of the largest entry; ties go to the lowest index.
pub fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate().skip(1) {
        if v > values[best] {
            best = i;
        }
    }
    best
}

fn require_rank2(t: &Tensor, what: &str) -> Result<(usize, usize)> {
    if t.rank() != 2 {
        return Err(Error::dim(format!(
            "{what} must be rank 2, got {:?}",
            t.shape()
        )));
    }
    Ok((t.shape[0], t.shape[1]))
}

pub fn matmul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (m, k) = require_rank2(a, "left operand")?;
    let (k2, n) = require_rank2(b, "right operand")?;
    if k != k2 {
        return Err(Error::dim(format!(
            "matmul of {:?} and {:?}",
            a.shape(),
            b.shape()
        )));
    }
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let a_row = &a.data[i * k..(i + 1) * k];
        let o_row = &mut out[i * n..(i + 1) * n];
        for (p, &av) in a_row.iter().enumerate() {
            if av == 0.0 {
                continue;
            }
            let b_row = &b.data[p * n..(p + 1) * n];
            for (o, &bv) in o_row.iter_mut().zip(b_row) {
                *o += av * bv;
            }
        }
    }
    Ok(Tensor::from_parts(vec![m, n], out))
}

/// `aᵀ · b` without materialising the transpose.
pub(crate) fn matmul_tn(a: &Tensor, b: &Tensor) -> Tensor {
    let (m, k) = (a.shape[0], a.shape[1]);
    let n = b.shape[1];
    debug_assert_eq!(b.shape[0], m);
    let mut out = vec![0.0; k * n];
    for r in 0..m {
        let a_row = &a.data[r * k..(r + 1) * k];
        let b_row = &b.data[r * n..(r + 1) * n];
        for (p, &av) in a_row.iter().enumerate() {
            if av == 0.0 {
                continue;
            }
            let o_row = &mut out[p * n..(p + 1) * n];
            for (o, &bv) in o_row.iter_mut().zip(b_row) {
                *o += av * bv;
            }
        }
    }
    Tensor::from_parts(vec![k, n], out)
}

/// `a · bᵀ` without materialising the transpose.
pub(crate) fn matmul_nt(a: &Tensor, b: &Tensor) -> Tensor {
    let (m, k) = (a.shape[0], a.shape[1]);
    let n = b.shape[0];
    debug_assert_eq!(b.shape[1], k);
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let a_row = &a.data[i * k..(i + 1) * k];
        for j in 0..n {
            let b_row = &b.data[j * k..(j + 1) * k];
            out[i * n + j] = a_row.iter().zip(b_row).map(|(x, y)| x * y).sum();
        }
    }
    Tensor::from_parts(vec![m, n], out)
}

pub(crate) fn conv_out_extent(input: usize, kernel: usize, stride: usize) -> usize {
    (input - kernel) / stride + 1
}

/// Valid-padding 2-D convolution (cross-correlation) of one `[C,H,W]` image
/// with `[K,C,kh,kw]` kernels.
pub fn conv2d_forward(input: &Tensor, kernels: &Tensor, stride: usize) -> Result<Tensor> {
    if input.rank() != 3 || kernels.rank() != 4 {
        return Err(Error::dim(format!(
            "conv2d expects [C,H,W] input and [K,C,kh,kw] kernels, got {:?} and {:?}",
            input.shape(),
            kernels.shape()
        )));
    }
    if stride == 0 {
        return Err(Error::dim("conv2d stride must be positive"));
    }
    let (c, h, w) = (input.shape[0], input.shape[1], input.shape[2]);
    let (k, kc, kh, kw) = (
        kernels.shape[0],
        kernels.shape[1],
        kernels.shape[2],
        kernels.shape[3],
    );
    if kc != c {
        return Err(Error::dim(format!(
            "kernel channels {kc} differ from input channels {c}"
        )));
    }
    if kh > h || kw > w {
        return Err(Error::dim(format!(
            "kernel {kh}x{kw} larger than input {h}x{w}"
        )));
    }
    let oh = conv_out_extent(h, kh, stride);
    let ow = conv_out_extent(w, kw, stride);
    let mut out = vec![0.0; k * oh * ow];
    conv_accumulate(
        &input.data,
        (c, h, w),
        &kernels.data,
        (k, kh, kw),
        stride,
        &mut out,
    );
    Ok(Tensor::from_parts(vec![k, oh, ow], out))
}

/// Adds the valid convolution of `input` into `out` (`[K,oh,ow]`).
pub(crate) fn conv_accumulate(
    input: &[f64],
    (c, h, w): (usize, usize, usize),
    kernels: &[f64],
    (k, kh, kw): (usize, usize, usize),
    stride: usize,
    out: &mut [f64],
) {
    let oh = conv_out_extent(h, kh, stride);
    let ow = conv_out_extent(w, kw, stride);
    for ko in 0..k {
        let o_plane = &mut out[ko * oh * ow..(ko + 1) * oh * ow];
        for ci in 0..c {
            let plane = &input[ci * h * w..(ci + 1) * h * w];
            for u in 0..kh {
                for v in 0..kw {
                    let kval = kernels[((ko * c + ci) * kh + u) * kw + v];
                    if kval == 0.0 {
                        continue;
                    }
                    for i in 0..oh {
                        let src = &plane[(i * stride + u) * w..];
                        let dst = &mut o_plane[i * ow..(i + 1) * ow];
                        for (j, d) in dst.iter_mut().enumerate() {
                            *d += kval * src[j * stride + v];
                        }
                    }
                }
            }
        }
    }
}

/// Numerically stable softmax of a rank-1 tensor.
pub fn softmax(logits: &Tensor) -> Result<Tensor> {
    if logits.rank() != 1 {
        return Err(Error::dim(format!(
            "softmax expects rank 1, got {:?}",
            logits.shape()
        )));
    }
    Ok(Tensor::from_parts(
        logits.shape.clone(),
        softmax_slice(&logits.data)?,
    ))
}

pub(crate) fn softmax_slice(logits: &[f64]) -> Result<Vec<f64>> {
    if logits.is_empty() {
        return Err(Error::Domain("softmax of an empty vector".into()));
    }
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|&z| (z - max).exp()).collect();
    let total: f64 = exps.iter().sum();
    Ok(exps.into_iter().map(|e| e / total).collect())
}

/// Row-wise softmax of a `[N,K]` logit matrix.
pub fn softmax_rows(logits: &Tensor) -> Result<Tensor> {
    let (n, k) = require_rank2(logits, "logits")?;
    let mut out = Vec::with_capacity(n * k);
    for i in 0..n {
        out.extend(softmax_slice(logits.row(i))?);
    }
    Ok(Tensor::from_parts(vec![n, k], out))
}

/// `-Σ target·ln(clamp(prediction, ε, 1))`; targets may be soft.
pub fn cross_entropy(prediction: &[f64], target: &[f64]) -> Result<f64> {
    if prediction.len() != target.len() {
        return Err(Error::dim(format!(
            "cross-entropy of length {} prediction against length {} target",
            prediction.len(),
            target.len()
        )));
    }
    Ok(-prediction
        .iter()
        .zip(target)
        .filter(|(_, &t)| t != 0.0)
        .map(|(&p, &t)| t * p.clamp(LOG_CLAMP, 1.0).ln())
        .sum::<f64>())
}
