//! Dense row-major `f64` arrays and the forward kernels shared by the tape
//! and the untraced inference path. Both paths call these functions, so a
//! traced forward and an untraced forward produce bitwise-identical values.

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct Array {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Array {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        if shape.is_empty() || shape.contains(&0) {
            return Err(Error::Shape(format!("invalid shape {shape:?}")));
        }
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            return Err(Error::Shape(format!(
                "shape {shape:?} needs {expected} values, got {}",
                data.len()
            )));
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let n = shape.iter().product();
        Self {
            shape,
            data: vec![0.0; n],
        }
    }

    pub fn full(shape: Vec<usize>, value: f64) -> Self {
        let n = shape.iter().product();
        Self {
            shape,
            data: vec![value; n],
        }
    }

    pub fn scalar(value: f64) -> Self {
        Self {
            shape: vec![1],
            data: vec![value],
        }
    }

    /// Builds an `rows.len() × cols` matrix from equally sized rows.
    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != cols) {
            return Err(Error::Shape("ragged rows".into()));
        }
        Self::new(vec![rows.len(), cols], rows.concat())
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

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn is_scalar(&self) -> bool {
        self.data.len() == 1
    }

    /// Leading dimension.
    pub fn rows(&self) -> usize {
        self.shape[0]
    }

    /// Product of the trailing dimensions.
    pub fn cols(&self) -> usize {
        self.shape[1..].iter().product()
    }

    pub fn row(&self, i: usize) -> &[f64] {
        let c = self.cols();
        &self.data[i * c..(i + 1) * c]
    }

    pub fn item(&self) -> f64 {
        self.data[0]
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    fn require_matrix(&self, what: &str) -> Result<(usize, usize)> {
        match self.shape.as_slice() {
            [r, c] => Ok((*r, *c)),
            s => Err(Error::Shape(format!(
                "{what} expects a matrix, got shape {s:?}"
            ))),
        }
    }
}

/// `m×k` by `k×n` product with arbitrary element strides on both operands.
#[allow(clippy::too_many_arguments)]
fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    rsa: isize,
    csa: isize,
    b: &[f64],
    rsb: isize,
    csb: isize,
) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    // SAFETY: the strides describe views that stay inside `a` and `b`, and
    // `out` is a dense m×n row-major buffer.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            0.0,
            out.as_mut_ptr(),
            n as isize,
            1,
        );
    }
    out
}

pub fn matmul(a: &Array, b: &Array) -> Result<Array> {
    let (m, k) = a.require_matrix("matmul")?;
    let (k2, n) = b.require_matrix("matmul")?;
    if k != k2 {
        return Err(Error::Shape(format!(
            "matmul inner dimensions differ: {:?} x {:?}",
            a.shape, b.shape
        )));
    }
    let out = gemm(m, k, n, &a.data, k as isize, 1, &b.data, n as isize, 1);
    Array::new(vec![m, n], out)
}

/// `a · bᵀ` without materialising the transpose.
pub(crate) fn matmul_transpose_b(a: &Array, b: &Array) -> Array {
    let (m, k) = (a.rows(), a.cols());
    let n = b.rows();
    Array {
        shape: vec![m, n],
        data: gemm(m, k, n, &a.data, k as isize, 1, &b.data, 1, k as isize),
    }
}

/// `aᵀ · b` without materialising the transpose.
pub(crate) fn matmul_transpose_a(a: &Array, b: &Array) -> Array {
    let (m, k) = (a.rows(), a.cols());
    let n = b.cols();
    Array {
        shape: vec![k, n],
        data: gemm(k, m, n, &a.data, 1, k as isize, &b.data, n as isize, 1),
    }
}

/// Elementwise sum. `b` either matches `a` or matches one row of `a`, in
/// which case it is broadcast over the leading (batch) dimension.
pub fn add(a: &Array, b: &Array) -> Result<Array> {
    if a.shape == b.shape {
        let data = a.data.iter().zip(&b.data).map(|(x, y)| x + y).collect();
        return Ok(Array {
            shape: a.shape.clone(),
            data,
        });
    }
    if a.shape.len() >= 2 && b.shape == a.shape[1..] {
        let c = b.len();
        let mut data = a.data.clone();
        for row in data.chunks_mut(c) {
            for (x, y) in row.iter_mut().zip(&b.data) {
                *x += y;
            }
        }
        return Ok(Array {
            shape: a.shape.clone(),
            data,
        });
    }
    Err(Error::Shape(format!(
        "add cannot broadcast {:?} with {:?}",
        a.shape, b.shape
    )))
}

pub fn mul(a: &Array, b: &Array) -> Result<Array> {
    if a.shape != b.shape {
        return Err(Error::Shape(format!(
            "mul needs equal shapes, got {:?} and {:?}",
            a.shape, b.shape
        )));
    }
    let data = a.data.iter().zip(&b.data).map(|(x, y)| x * y).collect();
    Ok(Array {
        shape: a.shape.clone(),
        data,
    })
}

pub fn relu(a: &Array) -> Array {
    Array {
        shape: a.shape.clone(),
        data: a
            .data
            .iter()
            .map(|&x| if x > 0.0 { x } else { 0.0 })
            .collect(),
    }
}

/// Rowwise log-softmax with max subtraction.
pub fn log_softmax(a: &Array) -> Result<Array> {
    let (n, c) = a.require_matrix("log_softmax")?;
    if c < 2 {
        return Err(Error::Shape(format!(
            "log_softmax needs >= 2 classes, got {c}"
        )));
    }
    if !a.all_finite() {
        return Err(Error::Numeric("non-finite input to log_softmax".into()));
    }
    let mut out = vec![0.0; n * c];
    for (row, o) in a.data.chunks(c).zip(out.chunks_mut(c)) {
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let lse = row.iter().map(|&x| (x - max).exp()).sum::<f64>().ln();
        for (o, &x) in o.iter_mut().zip(row) {
            *o = x - max - lse;
        }
    }
    Ok(Array {
        shape: vec![n, c],
        data: out,
    })
}

/// Picks entry `a[i, index[i]]` from every row, giving a length-`n` vector.
pub fn gather_rows(a: &Array, index: &[usize]) -> Result<Array> {
    let (n, c) = a.require_matrix("gather_rows")?;
    if index.len() != n {
        return Err(Error::Shape(format!(
            "gather_rows: {} indices for {n} rows",
            index.len()
        )));
    }
    let mut out = Vec::with_capacity(n);
    for (i, &j) in index.iter().enumerate() {
        if j >= c {
            return Err(Error::Contract(format!(
                "index {j} out of range for {c} columns"
            )));
        }
        out.push(a.data[i * c + j]);
    }
    Array::new(vec![n], out)
}

pub fn sum(a: &Array) -> Array {
    Array::scalar(a.data.iter().sum())
}

pub fn mean(a: &Array) -> Array {
    Array::scalar(a.data.iter().sum::<f64>() / a.len() as f64)
}
