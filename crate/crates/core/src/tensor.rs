//! Dense row-major 2-D arrays of `f64`.
//!
//! Every batch of samples, noise draws and network activations flows through
//! [`Tensor2`]: one row per sample, one column per feature.

use serde::{Deserialize, Serialize};

use crate::error::{ensure, Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Tensor2 {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Tensor2 {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn filled(rows: usize, cols: usize, value: f64) -> Self {
        Self {
            rows,
            cols,
            data: vec![value; rows * cols],
        }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        ensure!(
            data.len() == rows * cols,
            Dimension,
            "{} values cannot fill a {rows}x{cols} tensor",
            data.len()
        );
        ensure!(
            data.iter().all(|v| v.is_finite()),
            Domain,
            "tensor values must be finite"
        );
        Ok(Self { rows, cols, data })
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        ensure!(
            rows.iter().all(|r| r.len() == cols),
            Dimension,
            "ragged rows"
        );
        Self::from_vec(rows.len(), cols, rows.concat())
    }

    /// A single-row tensor.
    pub fn row_vector(values: &[f64]) -> Self {
        Self {
            rows: 1,
            cols: values.len(),
            data: values.to_vec(),
        }
    }

    #[inline]
    pub fn rows(&self) -> usize {
        self.rows
    }

    #[inline]
    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    #[inline]
    pub fn data(&self) -> &[f64] {
        &self.data
    }

    #[inline]
    pub fn data_mut(&mut self) -> &mut [f64] {
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

    pub fn iter_rows(&self) -> impl Iterator<Item = &[f64]> {
        // chunks_exact(0) panics, and a zero-column tensor has no meaningful rows to yield
        self.data.chunks_exact(self.cols.max(1)).take(self.rows)
    }

    /// Copies the listed rows, in order, into a new tensor.
    pub fn select_rows(&self, indices: &[usize]) -> Self {
        let mut data = Vec::with_capacity(indices.len() * self.cols);
        for &i in indices {
            data.extend_from_slice(self.row(i));
        }
        Self {
            rows: indices.len(),
            cols: self.cols,
            data,
        }
    }

    pub fn vstack(parts: &[&Tensor2]) -> Result<Self> {
        let cols = parts.first().map_or(0, |t| t.cols);
        ensure!(
            parts.iter().all(|t| t.cols == cols),
            Dimension,
            "vstack column mismatch"
        );
        let rows = parts.iter().map(|t| t.rows).sum();
        let mut data = Vec::with_capacity(rows * cols);
        for p in parts {
            data.extend_from_slice(&p.data);
        }
        Ok(Self { rows, cols, data })
    }

    pub fn push_row(&mut self, row: &[f64]) -> Result<()> {
        if self.rows == 0 && self.cols == 0 {
            self.cols = row.len();
        }
        ensure!(
            row.len() == self.cols,
            Dimension,
            "row of length {} pushed onto {} columns",
            row.len(),
            self.cols
        );
        self.data.extend_from_slice(row);
        self.rows += 1;
        Ok(())
    }

    pub fn check_same_shape(&self, other: &Tensor2, what: &str) -> Result<()> {
        if self.shape() != other.shape() {
            return Err(Error::Dimension(format!(
                "{what}: {:?} vs {:?}",
                self.shape(),
                other.shape()
            )));
        }
        Ok(())
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Self {
        Self {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn scale(&self, k: f64) -> Self {
        self.map(|v| v * k)
    }

    /// `self + k * other`, elementwise.
    pub fn add_scaled(&self, other: &Tensor2, k: f64) -> Result<Self> {
        self.check_same_shape(other, "add_scaled")?;
        let data = self
            .data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| a + k * b)
            .collect();
        Ok(Self {
            rows: self.rows,
            cols: self.cols,
            data,
        })
    }

    pub fn sub(&self, other: &Tensor2) -> Result<Self> {
        self.add_scaled(other, -1.0)
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn max_abs_diff(&self, other: &Tensor2) -> f64 {
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }

    /// Per-column mean over rows.
    pub fn column_means(&self) -> Vec<f64> {
        let mut means = vec![0.0; self.cols];
        for row in self.iter_rows() {
            for (m, v) in means.iter_mut().zip(row) {
                *m += v;
            }
        }
        let n = self.rows.max(1) as f64;
        means.iter_mut().for_each(|m| *m /= n);
        means
    }
}

/// Dot product with eight independent partial sums so the loop vectorizes.
/// The summation order is fixed, so results are reproducible bit for bit.
#[inline]
pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    let n = a.len().min(b.len());
    let (a, b) = (&a[..n], &b[..n]);
    let mut acc = [0.0f64; 8];
    let mut ca = a.chunks_exact(8);
    let mut cb = b.chunks_exact(8);
    for (x, y) in (&mut ca).zip(&mut cb) {
        for k in 0..8 {
            acc[k] += x[k] * y[k];
        }
    }
    let mut tail = 0.0;
    for (x, y) in ca.remainder().iter().zip(cb.remainder()) {
        tail += x * y;
    }
    ((acc[0] + acc[4]) + (acc[1] + acc[5])) + ((acc[2] + acc[6]) + (acc[3] + acc[7])) + tail
}

/// Four dot products against the same `w`, each summed exactly as [`dot`]
/// would, so blocking rows never changes a result.
#[inline]
pub fn dot4(xs: [&[f64]; 4], w: &[f64]) -> [f64; 4] {
    let n = w.len();
    let xs = xs.map(|x| &x[..n]);
    let mut acc = [[0.0f64; 8]; 4];
    let full = n - n % 8;
    let mut c = 0;
    while c < full {
        let wc = &w[c..c + 8];
        for (a, x) in acc.iter_mut().zip(&xs) {
            let xc = &x[c..c + 8];
            for k in 0..8 {
                a[k] += xc[k] * wc[k];
            }
        }
        c += 8;
    }
    let mut out = [0.0; 4];
    for ((o, a), x) in out.iter_mut().zip(&acc).zip(&xs) {
        let mut tail = 0.0;
        for k in full..n {
            tail += x[k] * w[k];
        }
        *o = ((a[0] + a[4]) + (a[1] + a[5])) + ((a[2] + a[6]) + (a[3] + a[7])) + tail;
    }
    out
}

#[inline]
pub fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

#[inline]
pub fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rejects_wrong_length_and_non_finite() {
        assert!(matches!(
            Tensor2::from_vec(2, 2, vec![1.0; 3]),
            Err(Error::Dimension(_))
        ));
        assert!(matches!(
            Tensor2::from_vec(1, 2, vec![1.0, f64::NAN]),
            Err(Error::Domain(_))
        ));
    }

    #[test]
    fn row_access_and_selection() {
        let t = Tensor2::from_rows(&[vec![1.0, 2.0], vec![3.0, 4.0], vec![5.0, 6.0]]).unwrap();
        assert_eq!(t.row(1), &[3.0, 4.0]);
        let s = t.select_rows(&[2, 0]);
        assert_eq!(s.data(), &[5.0, 6.0, 1.0, 2.0]);
        assert_eq!(t.column_means(), vec![3.0, 4.0]);
    }

    #[test]
    fn push_row_sets_width_on_empty() {
        let mut t = Tensor2::zeros(0, 0);
        t.push_row(&[1.0, 2.0, 3.0]).unwrap();
        t.push_row(&[4.0, 5.0, 6.0]).unwrap();
        assert_eq!(t.shape(), (2, 3));
        assert!(t.push_row(&[1.0]).is_err());
    }

    #[test]
    fn dot4_matches_dot_exactly() {
        let v: Vec<Vec<f64>> = (0..4)
            .map(|r| (0..37).map(|k| ((r * 37 + k) as f64 * 0.713).sin()).collect())
            .collect();
        let w: Vec<f64> = (0..37).map(|k| (k as f64 * 1.3).cos()).collect();
        let got = dot4([&v[0], &v[1], &v[2], &v[3]], &w);
        for r in 0..4 {
            assert_eq!(got[r], dot(&v[r], &w));
        }
    }
}
