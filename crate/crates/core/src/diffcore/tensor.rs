use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Dense row-major array of `f64`.
///
/// Graph primitives operate on rank-2 views; a rank-1 tensor of length `n`
/// is viewed as a `1 x n` row.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Tensor {
    shape: Vec<usize>,
    values: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, values: Vec<f64>) -> Result<Self> {
        if shape.is_empty() || shape.contains(&0) {
            return Err(Error::InvalidArgument(format!(
                "tensor shape must be non-empty with positive extents, got {shape:?}"
            )));
        }
        let expected: usize = shape.iter().product();
        if expected != values.len() {
            return Err(Error::shape("tensor", &shape, &[values.len()]));
        }
        Ok(Tensor { shape, values })
    }

    pub fn matrix(rows: usize, cols: usize, values: Vec<f64>) -> Result<Self> {
        Self::new(vec![rows, cols], values)
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let n = rows.len();
        let m = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != m) {
            return Err(Error::InvalidArgument("ragged rows".into()));
        }
        Self::matrix(n, m, rows.concat())
    }

    pub fn scalar(value: f64) -> Self {
        Tensor {
            shape: vec![1, 1],
            values: vec![value],
        }
    }

    /// Panics if any extent is zero.
    pub fn filled(rows: usize, cols: usize, value: f64) -> Self {
        assert!(rows > 0 && cols > 0, "zero-sized tensor");
        Tensor {
            shape: vec![rows, cols],
            values: vec![value; rows * cols],
        }
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self::filled(rows, cols, 0.0)
    }

    pub fn zeros_like(other: &Tensor) -> Self {
        Tensor {
            shape: other.shape.clone(),
            values: vec![0.0; other.values.len()],
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut t = Self::zeros(n, n);
        for i in 0..n {
            t.values[i * n + i] = 1.0;
        }
        t
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn into_values(self) -> Vec<f64> {
        self.values
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    /// `(rows, cols)` of the rank-2 view.
    pub fn dims(&self) -> Result<(usize, usize)> {
        match self.shape.as_slice() {
            [n] => Ok((1, *n)),
            [r, c] => Ok((*r, *c)),
            other => Err(Error::InvalidArgument(format!(
                "expected a rank-1 or rank-2 tensor, got shape {other:?}"
            ))),
        }
    }

    pub fn rows(&self) -> usize {
        self.dims().map_or(0, |d| d.0)
    }

    pub fn cols(&self) -> usize {
        self.dims().map_or(0, |d| d.1)
    }

    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.values[r * self.cols() + c]
    }

    pub fn set(&mut self, r: usize, c: usize, v: f64) {
        let cols = self.cols();
        self.values[r * cols + c] = v;
    }

    pub fn row(&self, r: usize) -> &[f64] {
        let c = self.cols();
        &self.values[r * c..(r + 1) * c]
    }

    /// Single value of a `1 x 1` tensor.
    pub fn item(&self) -> Option<f64> {
        (self.values.len() == 1).then(|| self.values[0])
    }

    pub fn is_finite(&self) -> bool {
        self.values.iter().all(|v| v.is_finite())
    }

    pub fn transpose(&self) -> Tensor {
        let (r, c) = self.dims().expect("rank-2 tensor");
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = self.values[i * c + j];
            }
        }
        Tensor {
            shape: vec![c, r],
            values: out,
        }
    }

    /// Elementwise image under `f`.
    pub fn map_values(&self, f: impl Fn(f64) -> f64) -> Tensor {
        self.map(f)
    }

    pub(crate) fn map(&self, f: impl Fn(f64) -> f64) -> Tensor {
        Tensor {
            shape: self.shape.clone(),
            values: self.values.iter().map(|&v| f(v)).collect(),
        }
    }

    pub(crate) fn zip(&self, other: &Tensor, f: impl Fn(f64, f64) -> f64) -> Tensor {
        debug_assert_eq!(self.values.len(), other.values.len());
        Tensor {
            shape: self.shape.clone(),
            values: self
                .values
                .iter()
                .zip(&other.values)
                .map(|(&a, &b)| f(a, b))
                .collect(),
        }
    }

    pub(crate) fn add_assign(&mut self, other: &Tensor) {
        debug_assert_eq!(self.values.len(), other.values.len());
        for (a, b) in self.values.iter_mut().zip(&other.values) {
            *a += b;
        }
    }

    pub(crate) fn matmul_raw(a: &Tensor, b: &Tensor) -> Tensor {
        let (m, k) = a.dims().expect("rank-2");
        let (_, n) = b.dims().expect("rank-2");
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            let out_row = &mut out[i * n..(i + 1) * n];
            for p in 0..k {
                let av = a.values[i * k + p];
                if av == 0.0 {
                    continue;
                }
                let b_row = &b.values[p * n..(p + 1) * n];
                for (o, &bv) in out_row.iter_mut().zip(b_row) {
                    *o += av * bv;
                }
            }
        }
        Tensor {
            shape: vec![m, n],
            values: out,
        }
    }

    /// Sums a broadcast gradient back down to `(rows, cols)`.
    pub(crate) fn reduce_to(&self, rows: usize, cols: usize) -> Tensor {
        let (r, c) = self.dims().expect("rank-2");
        if (r, c) == (rows, cols) {
            return self.clone();
        }
        let mut out = vec![0.0; rows * cols];
        for i in 0..r {
            for j in 0..c {
                let oi = if rows == 1 { 0 } else { i };
                let oj = if cols == 1 { 0 } else { j };
                out[oi * cols + oj] += self.values[i * c + j];
            }
        }
        Tensor {
            shape: vec![rows, cols],
            values: out,
        }
    }

    pub(crate) fn reshape_like(mut self, shape: &[usize]) -> Tensor {
        debug_assert_eq!(shape.iter().product::<usize>(), self.values.len());
        self.shape = shape.to_vec();
        self
    }
}
