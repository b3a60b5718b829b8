use serde::{Deserialize, Serialize};

use super::AdError;

/// Dense row-major real matrix. Scalars are 1×1, vectors are N×1 or 1×N.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawTensor")]
pub struct Tensor {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

#[derive(Deserialize)]
struct RawTensor {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl TryFrom<RawTensor> for Tensor {
    type Error = AdError;

    fn try_from(raw: RawTensor) -> Result<Self, AdError> {
        Tensor::new(raw.rows, raw.cols, raw.data)
    }
}

impl Tensor {
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self, AdError> {
        if rows == 0 || cols == 0 {
            return Err(AdError::InvalidDims { rows, cols });
        }
        if data.len() != rows * cols {
            return Err(AdError::DataLength {
                rows,
                cols,
                len: data.len(),
            });
        }
        Ok(Self { rows, cols, data })
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self::filled(rows, cols, 0.0)
    }

    pub fn filled(rows: usize, cols: usize, value: f64) -> Self {
        assert!(rows > 0 && cols > 0, "tensor dimensions must be positive");
        Self {
            rows,
            cols,
            data: vec![value; rows * cols],
        }
    }

    pub fn scalar(value: f64) -> Self {
        Self {
            rows: 1,
            cols: 1,
            data: vec![value],
        }
    }

    /// Column vector (n×1). Panics on an empty slice.
    pub fn column(data: Vec<f64>) -> Self {
        assert!(!data.is_empty(), "empty column vector");
        Self {
            rows: data.len(),
            cols: 1,
            data,
        }
    }

    /// Row vector (1×n). Panics on an empty slice.
    pub fn row(data: Vec<f64>) -> Self {
        assert!(!data.is_empty(), "empty row vector");
        Self {
            rows: 1,
            cols: data.len(),
            data,
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut t = Self::zeros(n, n);
        for i in 0..n {
            t.data[i * n + i] = 1.0;
        }
        t
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn is_scalar(&self) -> bool {
        self.rows == 1 && self.cols == 1
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

    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    pub fn set(&mut self, r: usize, c: usize, value: f64) {
        self.data[r * self.cols + c] = value;
    }

    /// First element; the value of a scalar tensor.
    pub fn item(&self) -> f64 {
        self.data[0]
    }

    pub fn row_slice(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn column_values(&self, c: usize) -> Vec<f64> {
        (0..self.rows).map(|r| self.get(r, c)).collect()
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Self {
        Self {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|&x| f(x)).collect(),
        }
    }

    pub fn scale(&self, s: f64) -> Self {
        self.map(|x| x * s)
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    pub fn transpose(&self) -> Self {
        let mut out = Vec::with_capacity(self.data.len());
        for c in 0..self.cols {
            for r in 0..self.rows {
                out.push(self.get(r, c));
            }
        }
        Self {
            rows: self.cols,
            cols: self.rows,
            data: out,
        }
    }

    pub fn matmul(&self, other: &Self) -> Result<Self, AdError> {
        if self.cols != other.rows {
            return Err(AdError::Shape {
                op: "matmul",
                lhs: self.shape(),
                rhs: other.shape(),
            });
        }
        let (n, k, m) = (self.rows, self.cols, other.cols);
        let mut out = vec![0.0; n * m];
        for i in 0..n {
            let out_row = &mut out[i * m..(i + 1) * m];
            for p in 0..k {
                let a = self.data[i * k + p];
                if a == 0.0 {
                    continue;
                }
                let b_row = &other.data[p * m..(p + 1) * m];
                for (o, &b) in out_row.iter_mut().zip(b_row) {
                    *o += a * b;
                }
            }
        }
        Ok(Self {
            rows: n,
            cols: m,
            data: out,
        })
    }

    /// In-place `self += other` for equal shapes.
    pub fn add_assign(&mut self, other: &Self) {
        debug_assert_eq!(self.shape(), other.shape());
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }

    pub fn trace(&self) -> f64 {
        (0..self.rows.min(self.cols)).map(|i| self.get(i, i)).sum()
    }

    /// Sum over broadcast axes so the result has shape `(rows, cols)`.
    pub(crate) fn reduce_to(&self, rows: usize, cols: usize) -> Self {
        if self.shape() == (rows, cols) {
            return self.clone();
        }
        let mut out = Self::zeros(rows, cols);
        for r in 0..self.rows {
            let rr = if rows == 1 { 0 } else { r };
            for c in 0..self.cols {
                let cc = if cols == 1 { 0 } else { c };
                out.data[rr * cols + cc] += self.data[r * self.cols + c];
            }
        }
        out
    }
}

fn broadcast_shape(
    op: &'static str,
    a: (usize, usize),
    b: (usize, usize),
) -> Result<(usize, usize), AdError> {
    let dim = |x: usize, y: usize| {
        if x == y {
            Some(x)
        } else if x == 1 {
            Some(y)
        } else if y == 1 {
            Some(x)
        } else {
            None
        }
    };
    match (dim(a.0, b.0), dim(a.1, b.1)) {
        (Some(r), Some(c)) => Ok((r, c)),
        _ => Err(AdError::Shape { op, lhs: a, rhs: b }),
    }
}

/// Elementwise binary map with numpy-style broadcasting of unit axes.
pub(crate) fn zip_broadcast(
    op: &'static str,
    a: &Tensor,
    b: &Tensor,
    f: impl Fn(f64, f64) -> f64,
) -> Result<Tensor, AdError> {
    let (rows, cols) = broadcast_shape(op, a.shape(), b.shape())?;
    if a.shape() == b.shape() {
        let data = a.data.iter().zip(&b.data).map(|(&x, &y)| f(x, y)).collect();
        return Ok(Tensor { rows, cols, data });
    }
    if b.is_scalar() {
        let y = b.data[0];
        let data = a.data.iter().map(|&x| f(x, y)).collect();
        return Ok(Tensor { rows, cols, data });
    }
    let mut data = Vec::with_capacity(rows * cols);
    for r in 0..rows {
        let ra = if a.rows == 1 { 0 } else { r };
        let rb = if b.rows == 1 { 0 } else { r };
        for c in 0..cols {
            let ca = if a.cols == 1 { 0 } else { c };
            let cb = if b.cols == 1 { 0 } else { c };
            data.push(f(a.data[ra * a.cols + ca], b.data[rb * b.cols + cb]));
        }
    }
    Ok(Tensor { rows, cols, data })
}

/// Value of `t` at broadcast position `(r, c)`.
#[inline]
pub(crate) fn at(t: &Tensor, r: usize, c: usize) -> f64 {
    let rr = if t.rows == 1 { 0 } else { r };
    let cc = if t.cols == 1 { 0 } else { c };
    t.data[rr * t.cols + cc]
}
