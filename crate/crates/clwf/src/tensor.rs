//! Dense row-major f64 tensors.
//!
//! Values are immutable once constructed; every public operation validates
//! shapes and guarantees finite entries in its output. Broadcasting is
//! deliberately limited to scalar-times-tensor and the row-wise bias of
//! `affine` — anything fancier has to be spelled out at the call site.

use rand::Rng;
use rand_distr::StandardNormal;

use crate::{Error, Result};

/// Dense tensor: a shape plus a flat row-major buffer of f64 scalars.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

impl Tensor {
    /// Build a tensor, validating that the buffer length matches the shape
    /// and that every entry is finite.
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        if numel(&shape) != data.len() {
            return Err(Error::Shape(format!(
                "tensor: shape {:?} implies {} entries, got {}",
                shape,
                numel(&shape),
                data.len()
            )));
        }
        let t = Tensor { shape, data };
        t.check_finite("new")?;
        Ok(t)
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Tensor {
            shape: shape.to_vec(),
            data: vec![0.0; numel(shape)],
        }
    }

    pub fn full(shape: &[usize], value: f64) -> Self {
        Tensor {
            shape: shape.to_vec(),
            data: vec![value; numel(shape)],
        }
    }

    pub fn scalar(value: f64) -> Self {
        Tensor {
            shape: vec![1],
            data: vec![value],
        }
    }

    /// i.i.d. N(0, std²) entries from the given stream.
    pub fn randn<R: Rng + ?Sized>(shape: &[usize], std: f64, rng: &mut R) -> Self {
        let data = (0..numel(shape))
            .map(|_| std * rng.sample::<f64, _>(StandardNormal))
            .collect();
        Tensor {
            shape: shape.to_vec(),
            data,
        }
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

    /// Scalar value of a single-entry tensor.
    pub fn item(&self) -> Result<f64> {
        if !self.is_scalar() {
            return Err(Error::Shape(format!(
                "item: expected scalar, got shape {:?}",
                self.shape
            )));
        }
        Ok(self.data[0])
    }

    /// Rows of a 2-D tensor.
    pub fn rows(&self) -> Result<usize> {
        self.dim2().map(|(r, _)| r)
    }

    /// Columns of a 2-D tensor.
    pub fn cols(&self) -> Result<usize> {
        self.dim2().map(|(_, c)| c)
    }

    fn dim2(&self) -> Result<(usize, usize)> {
        match self.shape.as_slice() {
            [r, c] => Ok((*r, *c)),
            other => Err(Error::Shape(format!("expected 2-D tensor, got {other:?}"))),
        }
    }

    pub fn at2(&self, i: usize, j: usize) -> f64 {
        let cols = self.shape[1];
        self.data[i * cols + j]
    }

    /// Same data, new shape (entry count must match).
    pub fn reshape(&self, shape: &[usize]) -> Result<Tensor> {
        if numel(shape) != self.data.len() {
            return Err(Error::Shape(format!(
                "reshape: {:?} -> {:?} changes entry count",
                self.shape, shape
            )));
        }
        Ok(Tensor {
            shape: shape.to_vec(),
            data: self.data.clone(),
        })
    }

    /// View as a single row matrix [1, n].
    pub fn as_row(&self) -> Tensor {
        Tensor {
            shape: vec![1, self.data.len()],
            data: self.data.clone(),
        }
    }

    /// Flatten to 1-D.
    pub fn flatten(&self) -> Tensor {
        Tensor {
            shape: vec![self.data.len()],
            data: self.data.clone(),
        }
    }

    pub(crate) fn check_finite(&self, op: &str) -> Result<()> {
        if self.data.iter().all(|v| v.is_finite()) {
            Ok(())
        } else {
            Err(Error::Domain(format!("{op}: produced non-finite entries")))
        }
    }

    fn same_shape(&self, other: &Tensor, op: &str) -> Result<()> {
        if self.shape == other.shape {
            Ok(())
        } else {
            Err(Error::Shape(format!(
                "{op}: shapes {:?} and {:?} differ",
                self.shape, other.shape
            )))
        }
    }

    fn zip_map(&self, other: &Tensor, op: &str, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
        self.same_shape(other, op)?;
        let data = self
            .data
            .iter()
            .zip(other.data.iter())
            .map(|(a, b)| f(*a, *b))
            .collect();
        let out = Tensor {
            shape: self.shape.clone(),
            data,
        };
        out.check_finite(op)?;
        Ok(out)
    }

    fn map(&self, op: &str, f: impl Fn(f64) -> f64) -> Result<Tensor> {
        let data = self.data.iter().map(|v| f(*v)).collect();
        let out = Tensor {
            shape: self.shape.clone(),
            data,
        };
        out.check_finite(op)?;
        Ok(out)
    }

    pub fn add(&self, other: &Tensor) -> Result<Tensor> {
        self.zip_map(other, "add", |a, b| a + b)
    }

    pub fn sub(&self, other: &Tensor) -> Result<Tensor> {
        self.zip_map(other, "sub", |a, b| a - b)
    }

    /// Elementwise product.
    pub fn mul(&self, other: &Tensor) -> Result<Tensor> {
        self.zip_map(other, "mul", |a, b| a * b)
    }

    pub fn div(&self, other: &Tensor) -> Result<Tensor> {
        self.zip_map(other, "div", |a, b| a / b)
    }

    /// Scalar multiple (the broadcast-scale operation).
    pub fn scale(&self, factor: f64) -> Result<Tensor> {
        self.map("scale", |v| factor * v)
    }

    /// self + factor * other.
    pub fn add_scaled(&self, other: &Tensor, factor: f64) -> Result<Tensor> {
        self.zip_map(other, "add_scaled", |a, b| a + factor * b)
    }

    pub fn tanh(&self) -> Result<Tensor> {
        self.map("tanh", f64::tanh)
    }

    pub fn relu(&self) -> Result<Tensor> {
        self.map("relu", |v| if v > 0.0 { v } else { 0.0 })
    }

    pub fn exp(&self) -> Result<Tensor> {
        self.map("exp", f64::exp)
    }

    pub fn log(&self) -> Result<Tensor> {
        if self.data.iter().any(|v| *v <= 0.0) {
            return Err(Error::Domain(
                "log: input has non-positive entries".to_string(),
            ));
        }
        self.map("log", f64::ln)
    }

    pub fn square(&self) -> Result<Tensor> {
        self.map("square", |v| v * v)
    }

    /// Sum of all entries, as a scalar tensor.
    pub fn sum(&self) -> Result<Tensor> {
        let s: f64 = self.data.iter().sum();
        let out = Tensor::scalar(s);
        out.check_finite("sum")?;
        Ok(out)
    }

    /// Mean of all entries, as a scalar tensor.
    pub fn mean(&self) -> Result<Tensor> {
        if self.data.is_empty() {
            return Err(Error::Domain("mean: empty tensor".to_string()));
        }
        let s: f64 = self.data.iter().sum();
        let out = Tensor::scalar(s / self.data.len() as f64);
        out.check_finite("mean")?;
        Ok(out)
    }

    /// Sum of squared entries (plain f64 helper, not an op).
    pub fn norm_sq(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum()
    }

    /// Matrix product of two 2-D tensors.
    pub fn matmul(&self, other: &Tensor) -> Result<Tensor> {
        let (m, k) = self.dim2().map_err(prefix_matmul)?;
        let (k2, n) = other.dim2().map_err(prefix_matmul)?;
        if k != k2 {
            return Err(Error::Shape(format!(
                "matmul: inner dims differ, {:?} x {:?}",
                self.shape, other.shape
            )));
        }
        let mut data = vec![0.0; m * n];
        // i-k-j order keeps the inner loop contiguous in both operands.
        for i in 0..m {
            for p in 0..k {
                let a = self.data[i * k + p];
                if a == 0.0 {
                    continue;
                }
                let row = &other.data[p * n..(p + 1) * n];
                let out = &mut data[i * n..(i + 1) * n];
                for j in 0..n {
                    out[j] += a * row[j];
                }
            }
        }
        let out = Tensor {
            shape: vec![m, n],
            data,
        };
        out.check_finite("matmul")?;
        Ok(out)
    }

    /// x·W + b with the bias added to every row. x: [m,k], w: [k,n], b: [n].
    pub fn affine(&self, w: &Tensor, b: &Tensor) -> Result<Tensor> {
        let mut out = self.matmul(w).map_err(|e| match e {
            Error::Shape(msg) => Error::Shape(msg.replace("matmul", "affine")),
            other => other,
        })?;
        let n = out.shape[1];
        if b.shape.as_slice() != [n] {
            return Err(Error::Shape(format!(
                "affine: bias shape {:?} does not match output columns {}",
                b.shape, n
            )));
        }
        for row in out.data.chunks_mut(n) {
            for (v, bias) in row.iter_mut().zip(b.data.iter()) {
                *v += bias;
            }
        }
        out.check_finite("affine")?;
        Ok(out)
    }

    /// Transpose of a 2-D tensor.
    pub fn transpose(&self) -> Result<Tensor> {
        let (m, n) = self.dim2()?;
        let mut data = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                data[j * m + i] = self.data[i * n + j];
            }
        }
        Ok(Tensor {
            shape: vec![n, m],
            data,
        })
    }

    /// Concatenate tensors along `axis`. 1-D tensors concatenate along axis 0;
    /// 2-D tensors support axis 0 (stack rows) and axis 1 (widen rows).
    pub fn concat(axis: usize, parts: &[&Tensor]) -> Result<Tensor> {
        if parts.is_empty() {
            return Err(Error::Domain("concat: no inputs".to_string()));
        }
        let rank = parts[0].shape.len();
        if parts.iter().any(|p| p.shape.len() != rank) {
            return Err(Error::Shape("concat: mixed ranks".to_string()));
        }
        if axis >= rank {
            return Err(Error::Shape(format!(
                "concat: axis {axis} out of range for rank {rank}"
            )));
        }
        match rank {
            1 => {
                let mut data = Vec::new();
                for p in parts {
                    data.extend_from_slice(&p.data);
                }
                Ok(Tensor {
                    shape: vec![data.len()],
                    data,
                })
            }
            2 if axis == 0 => {
                let cols = parts[0].shape[1];
                if parts.iter().any(|p| p.shape[1] != cols) {
                    return Err(Error::Shape(format!(
                        "concat axis 0: column counts differ: {:?}",
                        parts.iter().map(|p| p.shape.clone()).collect::<Vec<_>>()
                    )));
                }
                let rows: usize = parts.iter().map(|p| p.shape[0]).sum();
                let mut data = Vec::with_capacity(rows * cols);
                for p in parts {
                    data.extend_from_slice(&p.data);
                }
                Ok(Tensor {
                    shape: vec![rows, cols],
                    data,
                })
            }
            2 => {
                let rows = parts[0].shape[0];
                if parts.iter().any(|p| p.shape[0] != rows) {
                    return Err(Error::Shape(format!(
                        "concat axis 1: row counts differ: {:?}",
                        parts.iter().map(|p| p.shape.clone()).collect::<Vec<_>>()
                    )));
                }
                let cols: usize = parts.iter().map(|p| p.shape[1]).sum();
                let mut data = Vec::with_capacity(rows * cols);
                for i in 0..rows {
                    for p in parts {
                        let w = p.shape[1];
                        data.extend_from_slice(&p.data[i * w..(i + 1) * w]);
                    }
                }
                Ok(Tensor {
                    shape: vec![rows, cols],
                    data,
                })
            }
            _ => Err(Error::Shape(format!(
                "concat: rank {rank} not supported"
            ))),
        }
    }

    /// Contiguous slice of `len` indices starting at `start` along `axis`.
    pub fn slice(&self, axis: usize, start: usize, len: usize) -> Result<Tensor> {
        let rank = self.shape.len();
        if axis >= rank || rank > 2 {
            return Err(Error::Shape(format!(
                "slice: axis {axis} invalid for shape {:?}",
                self.shape
            )));
        }
        if start + len > self.shape[axis] {
            return Err(Error::Shape(format!(
                "slice: range {start}..{} exceeds axis {axis} of shape {:?}",
                start + len,
                self.shape
            )));
        }
        match (rank, axis) {
            (1, 0) => Ok(Tensor {
                shape: vec![len],
                data: self.data[start..start + len].to_vec(),
            }),
            (2, 0) => {
                let cols = self.shape[1];
                Ok(Tensor {
                    shape: vec![len, cols],
                    data: self.data[start * cols..(start + len) * cols].to_vec(),
                })
            }
            (2, 1) => {
                let (rows, cols) = (self.shape[0], self.shape[1]);
                let mut data = Vec::with_capacity(rows * len);
                for i in 0..rows {
                    data.extend_from_slice(&self.data[i * cols + start..i * cols + start + len]);
                }
                Ok(Tensor {
                    shape: vec![rows, len],
                    data,
                })
            }
            _ => unreachable!(),
        }
    }

    /// Mutable view of the buffer. Callers are responsible for keeping
    /// entries finite.
    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub(crate) fn add_assign(&mut self, other: &Tensor) {
        debug_assert_eq!(self.shape, other.shape);
        for (a, b) in self.data.iter_mut().zip(other.data.iter()) {
            *a += b;
        }
    }
}

fn prefix_matmul(e: Error) -> Error {
    match e {
        Error::Shape(msg) => Error::Shape(format!("matmul: {msg}")),
        other => other,
    }
}
