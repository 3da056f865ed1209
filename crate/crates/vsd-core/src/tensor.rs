//! Dense row-major tensors of `f64` with trailing-dimension broadcasting.
//!
//! The numeric core is deliberately small: shapes are `Vec<usize>`, storage is
//! a flat `Vec<f64>`, and every public operation either validates its inputs
//! and returns `Result`, or is total. 64-bit floats are the only element type;
//! all tolerances elsewhere in the crate are chosen for that precision.
//!
//! Broadcasting follows the usual trailing-alignment rule: shapes are aligned
//! at their last dimension and each aligned pair must be equal or contain a 1.
//! [`Tensor::sum_to_shape`] is the adjoint of broadcasting and is what reverse
//! mode uses to reduce gradients of broadcast operands.

use crate::error::Error;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn from_vec(shape: Vec<usize>, data: Vec<f64>) -> Result<Self, Error> {
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(Error::BadShape {
                shape,
                len: data.len(),
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

    pub fn ones(shape: &[usize]) -> Self {
        Self::full(shape, 1.0)
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

    /// Identity matrix of size `n`.
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

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn is_scalar(&self) -> bool {
        self.data.len() == 1
    }

    /// Value of a one-element tensor.
    pub fn item(&self) -> f64 {
        assert!(self.is_scalar(), "item() on tensor of shape {:?}", self.shape);
        self.data[0]
    }

    /// Number of rows of a 1-D or 2-D tensor (a vector counts as one column per row).
    pub fn rows(&self) -> usize {
        match self.shape.len() {
            0 => 1,
            _ => self.shape[0],
        }
    }

    /// Number of columns of a 2-D tensor, or the length of a vector.
    pub fn cols(&self) -> usize {
        match self.shape.len() {
            0 => 1,
            1 => self.shape[0],
            _ => self.shape[1..].iter().product(),
        }
    }

    pub fn at2(&self, r: usize, c: usize) -> f64 {
        debug_assert_eq!(self.shape.len(), 2);
        self.data[r * self.shape[1] + c]
    }

    pub fn set2(&mut self, r: usize, c: usize, v: f64) {
        debug_assert_eq!(self.shape.len(), 2);
        self.data[r * self.shape[1] + c] = v;
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Self, Error> {
        let numel: usize = shape.iter().product();
        if numel != self.data.len() {
            return Err(Error::BadShape {
                shape: shape.to_vec(),
                len: self.data.len(),
            });
        }
        Ok(Tensor {
            shape: shape.to_vec(),
            data: self.data.clone(),
        })
    }

    /// Validation hook: surfaces NaN/Inf as an error with the offending index.
    pub fn assert_finite(&self, ctx: &'static str) -> Result<&Self, Error> {
        for (i, v) in self.data.iter().enumerate() {
            if !v.is_finite() {
                return Err(Error::NonFinite {
                    ctx,
                    what: format!("value {v} at flat index {i} (shape {:?})", self.shape),
                });
            }
        }
        Ok(self)
    }

    pub fn map(&self, mut f: impl FnMut(f64) -> f64) -> Self {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&x| f(x)).collect(),
        }
    }

    pub fn neg(&self) -> Self {
        self.map(|x| -x)
    }

    pub fn relu(&self) -> Self {
        self.map(|x| x.max(0.0))
    }

    pub fn exp(&self) -> Self {
        self.map(f64::exp)
    }

    pub fn sqrt(&self) -> Result<Self, Error> {
        for &v in &self.data {
            if v < 0.0 {
                return Err(Error::Domain {
                    op: "sqrt",
                    what: format!("negative input {v}"),
                });
            }
        }
        Ok(self.map(f64::sqrt))
    }

    pub fn ln(&self) -> Result<Self, Error> {
        for &v in &self.data {
            if v <= 0.0 {
                return Err(Error::Domain {
                    op: "ln",
                    what: format!("non-positive input {v}"),
                });
            }
        }
        Ok(self.map(f64::ln))
    }

    pub fn scale(&self, s: f64) -> Self {
        self.map(|x| x * s)
    }

    pub fn add_scalar(&self, s: f64) -> Self {
        self.map(|x| x + s)
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn mean(&self) -> f64 {
        self.sum() / self.data.len() as f64
    }

    /// Row sums of a 2-D tensor, shape `[rows]`.
    pub fn sum_rows(&self) -> Self {
        assert_eq!(self.shape.len(), 2, "sum_rows wants a matrix");
        let (n, m) = (self.shape[0], self.shape[1]);
        let mut out = vec![0.0; n];
        for i in 0..n {
            out[i] = self.data[i * m..(i + 1) * m].iter().sum();
        }
        Tensor {
            shape: vec![n],
            data: out,
        }
    }

    /// Column sums of a 2-D tensor, shape `[cols]`.
    pub fn sum_cols(&self) -> Self {
        assert_eq!(self.shape.len(), 2, "sum_cols wants a matrix");
        let (n, m) = (self.shape[0], self.shape[1]);
        let mut out = vec![0.0; m];
        for i in 0..n {
            for j in 0..m {
                out[j] += self.data[i * m + j];
            }
        }
        Tensor {
            shape: vec![m],
            data: out,
        }
    }

    pub fn add(&self, rhs: &Tensor) -> Result<Self, Error> {
        self.broadcast_zip(rhs, "add", |a, b| a + b)
    }

    pub fn sub(&self, rhs: &Tensor) -> Result<Self, Error> {
        self.broadcast_zip(rhs, "sub", |a, b| a - b)
    }

    pub fn mul(&self, rhs: &Tensor) -> Result<Self, Error> {
        self.broadcast_zip(rhs, "mul", |a, b| a * b)
    }

    pub fn div(&self, rhs: &Tensor) -> Result<Self, Error> {
        for &v in &rhs.data {
            if v == 0.0 {
                return Err(Error::Domain {
                    op: "div",
                    what: "division by zero".into(),
                });
            }
        }
        self.broadcast_zip(rhs, "div", |a, b| a / b)
    }

    /// Broadcast output shape of `a` and `b` under trailing alignment.
    pub fn broadcast_shape(a: &[usize], b: &[usize]) -> Result<Vec<usize>, Error> {
        let nd = a.len().max(b.len());
        let mut out = vec![0usize; nd];
        for i in 0..nd {
            let da = if i < nd - a.len() { 1 } else { a[i - (nd - a.len())] };
            let db = if i < nd - b.len() { 1 } else { b[i - (nd - b.len())] };
            if da == db || da == 1 || db == 1 {
                out[i] = da.max(db);
            } else {
                return Err(Error::ShapeMismatch {
                    op: "broadcast",
                    lhs: a.to_vec(),
                    rhs: b.to_vec(),
                });
            }
        }
        Ok(out)
    }

    fn broadcast_zip(
        &self,
        rhs: &Tensor,
        op: &'static str,
        f: impl Fn(f64, f64) -> f64,
    ) -> Result<Self, Error> {
        // Fast path: identical shapes.
        if self.shape == rhs.shape {
            let data = self
                .data
                .iter()
                .zip(&rhs.data)
                .map(|(&a, &b)| f(a, b))
                .collect();
            return Ok(Tensor {
                shape: self.shape.clone(),
                data,
            });
        }
        // Fast path: scalar on either side.
        if rhs.data.len() == 1 {
            let b = rhs.data[0];
            return Ok(self.map(|a| f(a, b)));
        }
        if self.data.len() == 1 {
            let a = self.data[0];
            return Ok(rhs.map(|b| f(a, b)));
        }
        let out_shape = Self::broadcast_shape(&self.shape, &rhs.shape).map_err(|_| {
            Error::ShapeMismatch {
                op,
                lhs: self.shape.clone(),
                rhs: rhs.shape.clone(),
            }
        })?;
        let numel: usize = out_shape.iter().product();
        let sa = broadcast_strides(&self.shape, &out_shape);
        let sb = broadcast_strides(&rhs.shape, &out_shape);
        let mut data = Vec::with_capacity(numel);
        let mut idx = vec![0usize; out_shape.len()];
        let (mut oa, mut ob) = (0usize, 0usize);
        for _ in 0..numel {
            data.push(f(self.data[oa], rhs.data[ob]));
            // Odometer increment over the output index space.
            for d in (0..out_shape.len()).rev() {
                idx[d] += 1;
                oa += sa[d];
                ob += sb[d];
                if idx[d] < out_shape[d] {
                    break;
                }
                idx[d] = 0;
                oa -= sa[d] * out_shape[d];
                ob -= sb[d] * out_shape[d];
            }
        }
        Ok(Tensor {
            shape: out_shape,
            data,
        })
    }

    /// Sum-reduce to `target` shape: the adjoint of broadcasting this tensor
    /// up from `target`. Requires that `target` broadcasts to `self.shape()`.
    pub fn sum_to_shape(&self, target: &[usize]) -> Self {
        if self.shape == target {
            return self.clone();
        }
        let numel: usize = target.iter().product();
        let st = broadcast_strides(target, &self.shape);
        let mut data = vec![0.0; numel];
        let mut idx = vec![0usize; self.shape.len()];
        let mut ot = 0usize;
        for &v in &self.data {
            data[ot] += v;
            for d in (0..self.shape.len()).rev() {
                idx[d] += 1;
                ot += st[d];
                if idx[d] < self.shape[d] {
                    break;
                }
                idx[d] = 0;
                ot -= st[d] * self.shape[d];
            }
        }
        Tensor {
            shape: target.to_vec(),
            data,
        }
    }

    /// Matrix product of 2-D tensors (`[n,k] x [k,m] -> [n,m]`).
    pub fn matmul(&self, rhs: &Tensor) -> Result<Self, Error> {
        if self.shape.len() != 2 || rhs.shape.len() != 2 || self.shape[1] != rhs.shape[0] {
            return Err(Error::ShapeMismatch {
                op: "matmul",
                lhs: self.shape.clone(),
                rhs: rhs.shape.clone(),
            });
        }
        let (n, k, m) = (self.shape[0], self.shape[1], rhs.shape[1]);
        let mut data = vec![0.0; n * m];
        matmul_rows(&self.data, &rhs.data, &mut data, n, k, m);
        Ok(Tensor {
            shape: vec![n, m],
            data,
        })
    }

    /// Transpose of a 2-D tensor (vectors are treated as `[1,n]`).
    pub fn transpose(&self) -> Self {
        let (n, m) = match self.shape.len() {
            1 => (1, self.shape[0]),
            2 => (self.shape[0], self.shape[1]),
            _ => panic!("transpose wants a 1-D or 2-D tensor, got {:?}", self.shape),
        };
        let mut data = vec![0.0; n * m];
        for i in 0..n {
            for j in 0..m {
                data[j * n + i] = self.data[i * m + j];
            }
        }
        Tensor {
            shape: vec![m, n],
            data,
        }
    }

    /// Extract column `j` of a matrix as a vector.
    pub fn col(&self, j: usize) -> Self {
        assert_eq!(self.shape.len(), 2);
        let (n, m) = (self.shape[0], self.shape[1]);
        let data = (0..n).map(|i| self.data[i * m + j]).collect();
        Tensor {
            shape: vec![n],
            data,
        }
    }

    /// Extract row `i` of a matrix as a vector.
    pub fn row(&self, i: usize) -> Self {
        assert_eq!(self.shape.len(), 2);
        let m = self.shape[1];
        Tensor {
            shape: vec![m],
            data: self.data[i * m..(i + 1) * m].to_vec(),
        }
    }

    /// Gather rows along the first dimension (minibatch selection); works for
    /// any rank ≥ 1 and may repeat or drop rows.
    pub fn index_rows(&self, idx: &[usize]) -> Self {
        assert!(!self.shape.is_empty(), "index_rows needs a leading dimension");
        let n = self.shape[0];
        let stride: usize = self.shape[1..].iter().product();
        let mut data = Vec::with_capacity(idx.len() * stride);
        for &i in idx {
            assert!(i < n, "row {i} out of range {n}");
            data.extend_from_slice(&self.data[i * stride..(i + 1) * stride]);
        }
        let mut shape = self.shape.clone();
        shape[0] = idx.len();
        Tensor { shape, data }
    }

    /// Frobenius norm.
    pub fn frob_norm(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    /// Largest absolute entry.
    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0f64, |acc, v| acc.max(v.abs()))
    }
}

/// Broadcasting zip with raw IEEE semantics; shapes must be compatible
/// (validated by whoever built the forward node). Used by reverse mode.
pub(crate) fn zip_broadcast(a: &Tensor, b: &Tensor, f: impl Fn(f64, f64) -> f64) -> Tensor {
    a.broadcast_zip(b, "zip", f)
        .expect("zip_broadcast on incompatible shapes")
}

/// Strides for reading a tensor of shape `shape` as if it had `out` shape
/// (stride 0 on broadcast dimensions). `shape` is right-aligned inside `out`.
fn broadcast_strides(shape: &[usize], out: &[usize]) -> Vec<usize> {
    let nd = out.len();
    let offset = nd - shape.len();
    // Row-major strides of the source tensor.
    let mut src = vec![0usize; shape.len()];
    let mut acc = 1;
    for d in (0..shape.len()).rev() {
        src[d] = acc;
        acc *= shape[d];
    }
    let mut strides = vec![0usize; nd];
    for d in 0..nd {
        if d >= offset && shape[d - offset] != 1 {
            strides[d] = src[d - offset];
        }
    }
    strides
}

/// `out[n,m] = a[n,k] * b[k,m]`, row-major, ikj loop order. Rows are
/// independent, so the parallel build fans them out without changing any
/// result bit (each output row is reduced in the same order either way).
pub(crate) fn matmul_rows(a: &[f64], b: &[f64], out: &mut [f64], n: usize, k: usize, m: usize) {
    let row = |i: usize, out_row: &mut [f64]| {
        for kk in 0..k {
            let aik = a[i * k + kk];
            if aik == 0.0 {
                continue;
            }
            let brow = &b[kk * m..(kk + 1) * m];
            for (o, &bv) in out_row.iter_mut().zip(brow) {
                *o += aik * bv;
            }
        }
    };
    #[cfg(feature = "parallel")]
    {
        use rayon::prelude::*;
        if n >= 64 && k * m >= 4096 {
            out.par_chunks_mut(m)
                .enumerate()
                .for_each(|(i, out_row)| row(i, out_row));
            return;
        }
    }
    for (i, out_row) in out.chunks_mut(m).enumerate() {
        row(i, out_row);
    }
}
