//! Dense row-major matrices and the probability kernels built on them.

use alloc::vec;
use alloc::vec::Vec;

use crate::error::{Error, Result};

/// Floor applied to probabilities before taking logarithms.
pub const PROB_EPS: f64 = 1e-12;

/// Row-stochastic tolerance used by [`ProbBatch`] validation.
pub const ROW_SUM_TOL: f64 = 1e-9;

#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Matrix {
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::invalid(alloc::format!(
                "matrix data length {} does not match {rows}x{cols}",
                data.len()
            )));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("matrix construction"));
        }
        Ok(Matrix { rows, cols, data })
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Matrix {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn from_rows(rows: &[&[f64]]) -> Result<Self> {
        let cols = rows.first().map_or(0, |r| r.len());
        let mut data = Vec::with_capacity(rows.len() * cols);
        for r in rows {
            if r.len() != cols {
                return Err(Error::invalid("ragged rows"));
            }
            data.extend_from_slice(r);
        }
        Matrix::new(rows.len(), cols, data)
    }

    #[inline]
    pub fn rows(&self) -> usize {
        self.rows
    }

    #[inline]
    pub fn cols(&self) -> usize {
        self.cols
    }

    #[inline]
    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.data
    }

    #[inline]
    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    #[inline]
    pub fn row_mut(&mut self, r: usize) -> &mut [f64] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }

    #[inline]
    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    #[inline]
    pub fn set(&mut self, r: usize, c: usize, v: f64) {
        self.data[r * self.cols + c] = v;
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn select_rows(&self, idx: &[usize]) -> Matrix {
        let mut data = Vec::with_capacity(idx.len() * self.cols);
        for &i in idx {
            data.extend_from_slice(self.row(i));
        }
        Matrix {
            rows: idx.len(),
            cols: self.cols,
            data,
        }
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Matrix {
        Matrix {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn scale(&self, s: f64) -> Matrix {
        self.map(|v| v * s)
    }

    pub fn transpose(&self) -> Matrix {
        let mut out = Matrix::zeros(self.cols, self.rows);
        for r in 0..self.rows {
            for c in 0..self.cols {
                out.data[c * self.rows + r] = self.data[r * self.cols + c];
            }
        }
        out
    }

    pub(crate) fn ensure_shape(&self, context: &'static str, rows: usize, cols: usize) -> Result<()> {
        if self.rows != rows || self.cols != cols {
            return Err(Error::ShapeMismatch {
                context,
                expected_rows: rows,
                expected_cols: cols,
                rows: self.rows,
                cols: self.cols,
            });
        }
        Ok(())
    }

    /// `self · rhs`
    pub fn matmul(&self, rhs: &Matrix) -> Result<Matrix> {
        if self.cols != rhs.rows {
            return Err(Error::ShapeMismatch {
                context: "matmul",
                expected_rows: self.cols,
                expected_cols: rhs.cols,
                rows: rhs.rows,
                cols: rhs.cols,
            });
        }
        let mut out = Matrix::zeros(self.rows, rhs.cols);
        for i in 0..self.rows {
            let out_row = &mut out.data[i * rhs.cols..(i + 1) * rhs.cols];
            for (k, &a) in self.row(i).iter().enumerate() {
                if a == 0.0 {
                    continue;
                }
                for (o, &b) in out_row.iter_mut().zip(rhs.row(k)) {
                    *o += a * b;
                }
            }
        }
        Ok(out)
    }

    /// `selfᵀ · rhs`
    pub fn t_matmul(&self, rhs: &Matrix) -> Result<Matrix> {
        if self.rows != rhs.rows {
            return Err(Error::ShapeMismatch {
                context: "t_matmul",
                expected_rows: self.rows,
                expected_cols: rhs.cols,
                rows: rhs.rows,
                cols: rhs.cols,
            });
        }
        let mut out = Matrix::zeros(self.cols, rhs.cols);
        for n in 0..self.rows {
            let b_row = rhs.row(n);
            for (i, &a) in self.row(n).iter().enumerate() {
                if a == 0.0 {
                    continue;
                }
                let out_row = &mut out.data[i * rhs.cols..(i + 1) * rhs.cols];
                for (o, &b) in out_row.iter_mut().zip(b_row) {
                    *o += a * b;
                }
            }
        }
        Ok(out)
    }

    /// `self · rhsᵀ`
    pub fn matmul_t(&self, rhs: &Matrix) -> Result<Matrix> {
        if self.cols != rhs.cols {
            return Err(Error::ShapeMismatch {
                context: "matmul_t",
                expected_rows: rhs.rows,
                expected_cols: self.cols,
                rows: rhs.rows,
                cols: rhs.cols,
            });
        }
        let mut out = Matrix::zeros(self.rows, rhs.rows);
        for i in 0..self.rows {
            let a = self.row(i);
            for j in 0..rhs.rows {
                out.data[i * rhs.rows + j] = a.iter().zip(rhs.row(j)).map(|(x, y)| x * y).sum();
            }
        }
        Ok(out)
    }
}

/// Per-sample class scores (pre-softmax).
#[derive(Debug, Clone, PartialEq)]
pub struct LogitBatch(Matrix);

impl LogitBatch {
    pub fn new(inner: Matrix) -> Result<Self> {
        if !inner.is_finite() {
            return Err(Error::NonFinite("logits"));
        }
        Ok(LogitBatch(inner))
    }

    pub fn matrix(&self) -> &Matrix {
        &self.0
    }

    pub fn into_matrix(self) -> Matrix {
        self.0
    }

    pub fn rows(&self) -> usize {
        self.0.rows
    }

    pub fn classes(&self) -> usize {
        self.0.cols
    }

    /// Index of the largest score in each row, ties going to the lowest class.
    pub fn argmax_rows(&self) -> Vec<usize> {
        (0..self.0.rows).map(|r| argmax(self.0.row(r))).collect()
    }
}

pub(crate) fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (c, &v) in row.iter().enumerate().skip(1) {
        if v > row[best] {
            best = c;
        }
    }
    best
}

/// Row-stochastic probabilities, every entry floored at [`PROB_EPS`].
#[derive(Debug, Clone, PartialEq)]
pub struct ProbBatch(Matrix);

impl ProbBatch {
    /// Validates `inner` as row-stochastic and floors entries at [`PROB_EPS`].
    pub fn new(mut inner: Matrix) -> Result<Self> {
        for r in 0..inner.rows {
            let row = inner.row_mut(r);
            let mut sum = 0.0;
            for v in row.iter_mut() {
                if !v.is_finite() || *v < 0.0 || *v > 1.0 + ROW_SUM_TOL {
                    return Err(Error::invalid("probability entry outside [0, 1]"));
                }
                sum += *v;
                *v = v.clamp(PROB_EPS, 1.0);
            }
            if (sum - 1.0).abs() > ROW_SUM_TOL {
                return Err(Error::invalid(alloc::format!(
                    "probability row {r} sums to {sum}"
                )));
            }
        }
        Ok(ProbBatch(inner))
    }

    pub fn matrix(&self) -> &Matrix {
        &self.0
    }

    pub fn rows(&self) -> usize {
        self.0.rows
    }

    pub fn classes(&self) -> usize {
        self.0.cols
    }

    pub fn row(&self, r: usize) -> &[f64] {
        self.0.row(r)
    }
}

/// Softmax of each row of `z / temperature`, with max-subtraction.
pub fn softmax_rows(z: &LogitBatch, temperature: f64) -> Result<ProbBatch> {
    if !(temperature > 0.0 && temperature.is_finite()) {
        return Err(Error::invalid("temperature must be positive"));
    }
    let m = &z.0;
    if !m.is_finite() {
        return Err(Error::NonFinite("softmax input"));
    }
    let mut out = Matrix::zeros(m.rows, m.cols);
    for r in 0..m.rows {
        softmax_into(m.row(r), temperature, out.row_mut(r));
        for v in out.row_mut(r) {
            *v = v.max(PROB_EPS);
        }
    }
    Ok(ProbBatch(out))
}

/// Unclamped softmax of `row / temperature` written into `out`.
pub(crate) fn softmax_into(row: &[f64], temperature: f64, out: &mut [f64]) {
    let max = row.iter().fold(f64::NEG_INFINITY, |a, &b| a.max(b));
    let mut sum = 0.0;
    for (o, &v) in out.iter_mut().zip(row) {
        *o = libm::exp((v - max) / temperature);
        sum += *o;
    }
    for o in out.iter_mut() {
        *o /= sum;
    }
}

/// `log softmax(row / temperature)`, exact (no flooring).
pub(crate) fn log_softmax_into(row: &[f64], temperature: f64, out: &mut [f64]) {
    let max = row.iter().fold(f64::NEG_INFINITY, |a, &b| a.max(b));
    let mut sum = 0.0;
    for &v in row {
        sum += libm::exp((v - max) / temperature);
    }
    let lse = libm::log(sum);
    for (o, &v) in out.iter_mut().zip(row) {
        *o = (v - max) / temperature - lse;
    }
}

/// KL divergence `Σ_c p ln(p/q)` for one pair of rows, both floored at [`PROB_EPS`].
#[inline]
pub fn kl_row(p: &[f64], q: &[f64]) -> f64 {
    p.iter()
        .zip(q)
        .map(|(&pc, &qc)| {
            if pc <= 0.0 {
                0.0
            } else {
                let pc = pc.max(PROB_EPS);
                pc * libm::log(pc / qc.max(PROB_EPS))
            }
        })
        .sum()
}

/// Row-wise KL(p ‖ q) in nats and its mean over rows.
pub fn kl_rows(p: &ProbBatch, q: &ProbBatch) -> Result<(Vec<f64>, f64)> {
    q.0.ensure_shape("kl_rows", p.rows(), p.classes())?;
    let per_row: Vec<f64> = (0..p.rows()).map(|r| kl_row(p.row(r), q.row(r))).collect();
    let mean = if per_row.is_empty() {
        0.0
    } else {
        per_row.iter().sum::<f64>() / per_row.len() as f64
    };
    Ok((per_row, mean))
}

/// Mean over rows of `-ln p[j, labels[j]]`.
pub fn cross_entropy(p: &ProbBatch, labels: &[usize]) -> Result<f64> {
    if labels.len() != p.rows() {
        return Err(Error::ShapeMismatch {
            context: "cross_entropy labels",
            expected_rows: p.rows(),
            expected_cols: 1,
            rows: labels.len(),
            cols: 1,
        });
    }
    if labels.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let mut total = 0.0;
    for (r, &y) in labels.iter().enumerate() {
        if y >= p.classes() {
            return Err(Error::LabelOutOfRange {
                label: y,
                classes: p.classes(),
            });
        }
        total -= libm::log(p.row(r)[y].max(PROB_EPS));
    }
    Ok(total / labels.len() as f64)
}

/// Element-wise `params - eta * grads`.
pub fn sgd_step(params: &Matrix, grads: &Matrix, eta: f64) -> Result<Matrix> {
    grads.ensure_shape("sgd_step", params.rows, params.cols)?;
    let data = params
        .data
        .iter()
        .zip(&grads.data)
        .map(|(p, g)| p - eta * g)
        .collect();
    Ok(Matrix {
        rows: params.rows,
        cols: params.cols,
        data,
    })
}
