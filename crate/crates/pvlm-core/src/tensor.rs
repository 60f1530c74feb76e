//! Dense row-major f64 tensors.
//!
//! Values are immutable after construction and shared via `Arc`, so cloning
//! is cheap and tensors can be used from multiple threads. Broadcasting is
//! deliberately limited to scalar-vs-tensor and row-vector-vs-matrix;
//! anything else needs an explicit reshape.

use std::sync::Arc;

use thiserror::Error;

#[derive(Error, Debug, Clone, PartialEq)]
pub enum TensorError {
    #[error("{op}: shape mismatch ({lhs:?} vs {rhs:?})")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("{op}: produced a non-finite value")]
    NonFinite { op: &'static str },
    #[error("invalid shape {shape:?} for {len} elements")]
    InvalidShape { shape: Vec<usize>, len: usize },
    #[error("{op}: index {index} out of range ({len})")]
    IndexOutOfRange {
        op: &'static str,
        index: usize,
        len: usize,
    },
    #[error("{0}")]
    Invalid(String),
}

pub type Result<T, E = TensorError> = std::result::Result<T, E>;

#[derive(Clone, Debug)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Arc<Vec<f64>>,
}

impl PartialEq for Tensor {
    fn eq(&self, other: &Self) -> bool {
        self.shape == other.shape && *self.data == *other.data
    }
}

fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

impl Tensor {
    /// Builds a tensor, validating the shape/length agreement and that every
    /// value is finite.
    pub fn from_vec(shape: &[usize], data: Vec<f64>) -> Result<Self> {
        if numel(shape) != data.len() {
            return Err(TensorError::InvalidShape {
                shape: shape.to_vec(),
                len: data.len(),
            });
        }
        if !data.iter().all(|v| v.is_finite()) {
            return Err(TensorError::NonFinite { op: "from_vec" });
        }
        Ok(Self::raw(shape.to_vec(), data))
    }

    /// Internal constructor; callers guarantee shape/len agreement.
    pub(crate) fn raw(shape: Vec<usize>, data: Vec<f64>) -> Self {
        debug_assert_eq!(numel(&shape), data.len());
        Tensor {
            shape,
            data: Arc::new(data),
        }
    }

    pub fn scalar(v: f64) -> Self {
        Self::raw(vec![1], vec![v])
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::raw(shape.to_vec(), vec![0.0; numel(shape)])
    }

    pub fn ones(shape: &[usize]) -> Self {
        Self::raw(shape.to_vec(), vec![1.0; numel(shape)])
    }

    pub fn filled(shape: &[usize], v: f64) -> Self {
        Self::raw(shape.to_vec(), vec![v; numel(shape)])
    }

    pub fn from_fn(shape: &[usize], mut f: impl FnMut(usize) -> f64) -> Self {
        let n = numel(shape);
        Self::raw(shape.to_vec(), (0..n).map(&mut f).collect())
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn is_scalar(&self) -> bool {
        self.data.len() == 1
    }

    /// The single value of a scalar tensor.
    pub fn item(&self) -> Result<f64> {
        if !self.is_scalar() {
            return Err(TensorError::Invalid(format!(
                "item: tensor of shape {:?} is not a scalar",
                self.shape
            )));
        }
        Ok(self.data[0])
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Self> {
        if numel(shape) != self.data.len() {
            return Err(TensorError::InvalidShape {
                shape: shape.to_vec(),
                len: self.data.len(),
            });
        }
        Ok(Tensor {
            shape: shape.to_vec(),
            data: Arc::clone(&self.data),
        })
    }

    fn dims2(&self, op: &'static str) -> Result<(usize, usize)> {
        match self.shape.as_slice() {
            [r, c] => Ok((*r, *c)),
            _ => Err(TensorError::Invalid(format!(
                "{op}: expected a matrix, got shape {:?}",
                self.shape
            ))),
        }
    }

    /// Matrix product. Inner dimensions must agree.
    pub fn matmul(&self, rhs: &Tensor) -> Result<Tensor> {
        let (m, k) = self.dims2("matmul")?;
        let (k2, n) = rhs.dims2("matmul")?;
        if k != k2 {
            return Err(TensorError::ShapeMismatch {
                op: "matmul",
                lhs: self.shape.clone(),
                rhs: rhs.shape.clone(),
            });
        }
        let a = self.data();
        let b = rhs.data();
        let mut out = vec![0.0; m * n];
        // ikj order: stream over contiguous rows of rhs.
        for i in 0..m {
            let arow = &a[i * k..(i + 1) * k];
            let orow = &mut out[i * n..(i + 1) * n];
            for (kk, &av) in arow.iter().enumerate() {
                if av == 0.0 {
                    continue;
                }
                let brow = &b[kk * n..(kk + 1) * n];
                for j in 0..n {
                    orow[j] += av * brow[j];
                }
            }
        }
        Ok(Tensor::raw(vec![m, n], out))
    }

    pub fn transpose(&self) -> Result<Tensor> {
        let (m, n) = self.dims2("transpose")?;
        let a = self.data();
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                out[j * m + i] = a[i * n + j];
            }
        }
        Ok(Tensor::raw(vec![n, m], out))
    }

    fn zip(&self, rhs: &Tensor, op: &'static str, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
        // Same shape, scalar-vs-tensor, or matrix-vs-row-vector.
        if self.shape == rhs.shape {
            let data = self
                .data
                .iter()
                .zip(rhs.data.iter())
                .map(|(&x, &y)| f(x, y))
                .collect();
            return Ok(Tensor::raw(self.shape.clone(), data));
        }
        if rhs.is_scalar() {
            let y = rhs.data[0];
            let data = self.data.iter().map(|&x| f(x, y)).collect();
            return Ok(Tensor::raw(self.shape.clone(), data));
        }
        if self.is_scalar() {
            let x = self.data[0];
            let data = rhs.data.iter().map(|&y| f(x, y)).collect();
            return Ok(Tensor::raw(rhs.shape.clone(), data));
        }
        // matrix [m, n] against row vector [n]
        if let ([m, n], [rn]) = (self.shape.as_slice(), rhs.shape.as_slice()) {
            if n == rn {
                let mut data = Vec::with_capacity(m * n);
                for i in 0..*m {
                    for j in 0..*n {
                        data.push(f(self.data[i * n + j], rhs.data[j]));
                    }
                }
                return Ok(Tensor::raw(self.shape.clone(), data));
            }
        }
        Err(TensorError::ShapeMismatch {
            op,
            lhs: self.shape.clone(),
            rhs: rhs.shape.clone(),
        })
    }

    pub fn add(&self, rhs: &Tensor) -> Result<Tensor> {
        self.zip(rhs, "add", |x, y| x + y)
    }

    pub fn sub(&self, rhs: &Tensor) -> Result<Tensor> {
        self.zip(rhs, "sub", |x, y| x - y)
    }

    pub fn mul(&self, rhs: &Tensor) -> Result<Tensor> {
        self.zip(rhs, "mul", |x, y| x * y)
    }

    pub fn div(&self, rhs: &Tensor) -> Result<Tensor> {
        let out = self.zip(rhs, "div", |x, y| x / y)?;
        if !out.all_finite() {
            return Err(TensorError::NonFinite { op: "div" });
        }
        Ok(out)
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Tensor {
        Tensor::raw(self.shape.clone(), self.data.iter().map(|&x| f(x)).collect())
    }

    pub fn scale(&self, c: f64) -> Tensor {
        self.map(|x| x * c)
    }

    pub fn add_scalar(&self, c: f64) -> Tensor {
        self.map(|x| x + c)
    }

    pub fn exp(&self) -> Result<Tensor> {
        let out = self.map(f64::exp);
        if !out.all_finite() {
            return Err(TensorError::NonFinite { op: "exp" });
        }
        Ok(out)
    }

    pub fn ln(&self) -> Result<Tensor> {
        let out = self.map(f64::ln);
        if !out.all_finite() {
            return Err(TensorError::NonFinite { op: "ln" });
        }
        Ok(out)
    }

    pub fn tanh(&self) -> Tensor {
        self.map(f64::tanh)
    }

    pub fn sigmoid(&self) -> Tensor {
        self.map(sigmoid)
    }

    /// log(sigmoid(x)), computed without overflow for large |x|.
    pub fn log_sigmoid(&self) -> Tensor {
        self.map(|x| -softplus(-x))
    }

    /// Gaussian error linear unit (tanh approximation).
    pub fn gelu(&self) -> Tensor {
        self.map(gelu)
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn mean(&self) -> f64 {
        self.sum() / self.data.len() as f64
    }

    /// Column sums of a matrix: [m, n] -> [n].
    pub fn sum_rows(&self) -> Result<Tensor> {
        let (m, n) = self.dims2("sum_rows")?;
        let mut out = vec![0.0; n];
        for i in 0..m {
            for j in 0..n {
                out[j] += self.data[i * n + j];
            }
        }
        Ok(Tensor::raw(vec![n], out))
    }

    /// Numerically stable softmax over the last axis of a matrix.
    pub fn softmax_last(&self) -> Result<Tensor> {
        let (m, n) = self.dims2("softmax_last")?;
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            let row = &self.data[i * n..(i + 1) * n];
            let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut z = 0.0;
            for j in 0..n {
                let e = (row[j] - mx).exp();
                out[i * n + j] = e;
                z += e;
            }
            for j in 0..n {
                out[i * n + j] /= z;
            }
        }
        Ok(Tensor::raw(vec![m, n], out))
    }

    /// Row-wise layer normalization with per-column gain and bias.
    pub fn layernorm(&self, gain: &Tensor, bias: &Tensor, eps: f64) -> Result<Tensor> {
        let (m, n) = self.dims2("layernorm")?;
        if gain.shape() != [n] || bias.shape() != [n] {
            return Err(TensorError::ShapeMismatch {
                op: "layernorm",
                lhs: self.shape.clone(),
                rhs: gain.shape().to_vec(),
            });
        }
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            let row = &self.data[i * n..(i + 1) * n];
            let mean = row.iter().sum::<f64>() / n as f64;
            let var = row.iter().map(|&x| (x - mean) * (x - mean)).sum::<f64>() / n as f64;
            let inv = 1.0 / (var + eps).sqrt();
            for j in 0..n {
                out[i * n + j] = (row[j] - mean) * inv * gain.data[j] + bias.data[j];
            }
        }
        Ok(Tensor::raw(vec![m, n], out))
    }

    /// Gathers rows of a matrix by index: [v, n] with k ids -> [k, n].
    pub fn gather_rows(&self, ids: &[usize]) -> Result<Tensor> {
        let (v, n) = self.dims2("gather_rows")?;
        let mut out = Vec::with_capacity(ids.len() * n);
        for &id in ids {
            if id >= v {
                return Err(TensorError::IndexOutOfRange {
                    op: "gather_rows",
                    index: id,
                    len: v,
                });
            }
            out.extend_from_slice(&self.data[id * n..(id + 1) * n]);
        }
        Ok(Tensor::raw(vec![ids.len(), n], out))
    }

    /// Rows [lo, hi) of a matrix.
    pub fn slice_rows(&self, lo: usize, hi: usize) -> Result<Tensor> {
        let (m, n) = self.dims2("slice_rows")?;
        if lo > hi || hi > m {
            return Err(TensorError::IndexOutOfRange {
                op: "slice_rows",
                index: hi,
                len: m,
            });
        }
        Ok(Tensor::raw(
            vec![hi - lo, n],
            self.data[lo * n..hi * n].to_vec(),
        ))
    }

    /// Columns [lo, hi) of a matrix.
    pub fn slice_cols(&self, lo: usize, hi: usize) -> Result<Tensor> {
        let (m, n) = self.dims2("slice_cols")?;
        if lo > hi || hi > n {
            return Err(TensorError::IndexOutOfRange {
                op: "slice_cols",
                index: hi,
                len: n,
            });
        }
        let w = hi - lo;
        let mut out = Vec::with_capacity(m * w);
        for i in 0..m {
            out.extend_from_slice(&self.data[i * n + lo..i * n + hi]);
        }
        Ok(Tensor::raw(vec![m, w], out))
    }

    /// Vertical stack of matrices with equal column counts.
    pub fn concat_rows(parts: &[Tensor]) -> Result<Tensor> {
        if parts.is_empty() {
            return Err(TensorError::Invalid("concat_rows: empty input".into()));
        }
        let (_, n) = parts[0].dims2("concat_rows")?;
        let mut rows = 0;
        let mut data = Vec::new();
        for p in parts {
            let (pm, pn) = p.dims2("concat_rows")?;
            if pn != n {
                return Err(TensorError::ShapeMismatch {
                    op: "concat_rows",
                    lhs: parts[0].shape.clone(),
                    rhs: p.shape.clone(),
                });
            }
            rows += pm;
            data.extend_from_slice(p.data());
        }
        Ok(Tensor::raw(vec![rows, n], data))
    }

    /// Horizontal stack of matrices with equal row counts.
    pub fn concat_cols(parts: &[Tensor]) -> Result<Tensor> {
        if parts.is_empty() {
            return Err(TensorError::Invalid("concat_cols: empty input".into()));
        }
        let (m, _) = parts[0].dims2("concat_cols")?;
        let widths: Vec<usize> = parts
            .iter()
            .map(|p| p.dims2("concat_cols").map(|(pm, pn)| {
                debug_assert!(pm == m || pm != m);
                pn
            }))
            .collect::<Result<_>>()?;
        for p in parts {
            let (pm, _) = p.dims2("concat_cols")?;
            if pm != m {
                return Err(TensorError::ShapeMismatch {
                    op: "concat_cols",
                    lhs: parts[0].shape.clone(),
                    rhs: p.shape.clone(),
                });
            }
        }
        let total: usize = widths.iter().sum();
        let mut data = Vec::with_capacity(m * total);
        for i in 0..m {
            for (p, &w) in parts.iter().zip(&widths) {
                data.extend_from_slice(&p.data()[i * w..(i + 1) * w]);
            }
        }
        Ok(Tensor::raw(vec![m, total], data))
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// ln(1 + e^x) without overflow.
pub fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

pub fn gelu(x: f64) -> f64 {
    const C: f64 = 0.7978845608028654; // sqrt(2/pi)
    0.5 * x * (1.0 + (C * (x + 0.044715 * x * x * x)).tanh())
}

/// Derivative of the tanh-approximated gelu.
pub fn gelu_grad(x: f64) -> f64 {
    const C: f64 = 0.7978845608028654;
    let u = C * (x + 0.044715 * x * x * x);
    let t = u.tanh();
    let du = C * (1.0 + 3.0 * 0.044715 * x * x);
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du
}
