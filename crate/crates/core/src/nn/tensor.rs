//! Dense row-major matrix with the handful of kernels the recurrent cells need.

use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Mat {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

impl Mat {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Mat { rows, cols, data: vec![0.0; rows * cols] }
    }

    #[inline]
    pub fn at(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    #[inline]
    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    /// `out[r] += sum_c self[r, c] * x[c]` for rows `r0..r1`, written to
    /// `out[r - r0]`.
    #[inline]
    pub fn matvec_rows_acc(&self, r0: usize, r1: usize, x: &[f64], out: &mut [f64]) {
        debug_assert_eq!(x.len(), self.cols);
        for (o, r) in out.iter_mut().zip(r0..r1) {
            *o += dot(self.row(r), x);
        }
    }

    /// `out[c] += sum_r self[r0 + r, c] * g[r]` (transposed product over a row block).
    #[inline]
    pub fn matvec_t_rows_acc(&self, r0: usize, g: &[f64], out: &mut [f64]) {
        debug_assert_eq!(out.len(), self.cols);
        for (k, &gk) in g.iter().enumerate() {
            if gk == 0.0 {
                continue;
            }
            let row = self.row(r0 + k);
            for (o, &w) in out.iter_mut().zip(row) {
                *o += gk * w;
            }
        }
    }

    /// `self[r0 + r, c] += g[r] * x[c]`.
    #[inline]
    pub fn outer_rows_acc(&mut self, r0: usize, g: &[f64], x: &[f64]) {
        let cols = self.cols;
        for (k, &gk) in g.iter().enumerate() {
            if gk == 0.0 {
                continue;
            }
            let row = &mut self.data[(r0 + k) * cols..(r0 + k + 1) * cols];
            for (w, &xi) in row.iter_mut().zip(x) {
                *w += gk * xi;
            }
        }
    }
}

#[inline]
pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

#[inline]
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Numerically stable softmax.
pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|&z| (z - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / sum).collect()
}
