//! Symmetric banded storage and an in-place Cholesky factorization.
//!
//! Only the lower band is stored: row `i` keeps columns `i - bw ..= i`
//! contiguously, which keeps the inner products of the factorization on
//! contiguous memory.

use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SolverError {
    #[error("matrix is not positive definite (pivot {pivot:e} at row {row})")]
    NotPositiveDefinite { row: usize, pivot: f64 },
    #[error("right-hand side has length {got}, expected {expected}")]
    SizeMismatch { got: usize, expected: usize },
}

#[derive(Debug, Clone, PartialEq)]
pub struct BandMatrix {
    n: usize,
    bw: usize,
    data: Vec<f64>,
}

impl BandMatrix {
    pub fn zeros(n: usize, bw: usize) -> Self {
        BandMatrix { n, bw, data: vec![0.0; n * (bw + 1)] }
    }

    pub fn dim(&self) -> usize {
        self.n
    }

    pub fn bandwidth(&self) -> usize {
        self.bw
    }

    #[inline]
    fn idx(&self, i: usize, j: usize) -> usize {
        debug_assert!(j <= i && i - j <= self.bw);
        i * (self.bw + 1) + (j + self.bw - i)
    }

    /// Symmetric entry; zero outside the band.
    pub fn get(&self, i: usize, j: usize) -> f64 {
        let (i, j) = if i >= j { (i, j) } else { (j, i) };
        if i - j > self.bw {
            0.0
        } else {
            self.data[self.idx(i, j)]
        }
    }

    /// Add `v` to the symmetric entry `(i, j)`. Panics outside the band.
    #[inline]
    pub fn add(&mut self, i: usize, j: usize, v: f64) {
        let (i, j) = if i >= j { (i, j) } else { (j, i) };
        assert!(i - j <= self.bw, "entry ({i}, {j}) outside bandwidth {}", self.bw);
        let k = self.idx(i, j);
        self.data[k] += v;
    }

    /// Replace row and column `i` by the identity row.
    pub fn constrain(&mut self, i: usize) {
        let w = self.bw + 1;
        for j in i.saturating_sub(self.bw)..i {
            let k = self.idx(i, j);
            self.data[k] = 0.0;
        }
        for r in i + 1..(i + w).min(self.n) {
            let k = self.idx(r, i);
            self.data[k] = 0.0;
        }
        let k = self.idx(i, i);
        self.data[k] = 1.0;
    }

    /// `y = A x`.
    pub fn mul_vec(&self, x: &[f64]) -> Vec<f64> {
        let mut y = vec![0.0; self.n];
        for i in 0..self.n {
            let lo = i.saturating_sub(self.bw);
            let row = &self.data[i * (self.bw + 1)..(i + 1) * (self.bw + 1)];
            for j in lo..i {
                let a = row[j + self.bw - i];
                y[i] += a * x[j];
                y[j] += a * x[i];
            }
            y[i] += row[self.bw] * x[i];
        }
        y
    }

    pub fn factor(mut self) -> Result<BandCholesky, SolverError> {
        let w = self.bw + 1;
        let bw = self.bw;
        for i in 0..self.n {
            let lo = i.saturating_sub(bw);
            for j in lo..=i {
                let (head, tail) = self.data.split_at_mut(i * w);
                let row_i = &tail[..w];
                let len = j - lo;
                let a_i = &row_i[lo + bw - i..lo + bw - i + len];
                let s = if j == i {
                    row_i[bw] - dot(a_i, a_i)
                } else {
                    let row_j = &head[j * w..(j + 1) * w];
                    let a_j = &row_j[lo + bw - j..bw];
                    row_i[j + bw - i] - dot(a_i, a_j)
                };
                if j == i {
                    let diag = tail[bw];
                    if !(s > 1e-14 * diag.abs()) || !s.is_finite() {
                        return Err(SolverError::NotPositiveDefinite { row: i, pivot: s });
                    }
                    tail[bw] = s.sqrt();
                } else {
                    let ljj = head[j * w + bw];
                    tail[j + bw - i] = s / ljj;
                }
            }
        }
        Ok(BandCholesky { n: self.n, bw, l: self.data })
    }
}

#[inline]
fn dot(a: &[f64], b: &[f64]) -> f64 {
    let n = a.len().min(b.len());
    let (a, b) = (&a[..n], &b[..n]);
    let mut acc = [0.0f64; 8];
    let ca = a.chunks_exact(8);
    let cb = b.chunks_exact(8);
    let (ra, rb) = (ca.remainder(), cb.remainder());
    for (x, y) in ca.zip(cb) {
        for k in 0..8 {
            acc[k] += x[k] * y[k];
        }
    }
    let mut s = ((acc[0] + acc[4]) + (acc[1] + acc[5])) + ((acc[2] + acc[6]) + (acc[3] + acc[7]));
    for (x, y) in ra.iter().zip(rb) {
        s += x * y;
    }
    s
}

/// Lower-triangular band factor `L` with `A = L Lᵀ`.
#[derive(Debug, Clone)]
pub struct BandCholesky {
    n: usize,
    bw: usize,
    l: Vec<f64>,
}

impl BandCholesky {
    pub fn solve_in_place(&self, b: &mut [f64]) -> Result<(), SolverError> {
        if b.len() != self.n {
            return Err(SolverError::SizeMismatch { got: b.len(), expected: self.n });
        }
        let w = self.bw + 1;
        let bw = self.bw;
        for i in 0..self.n {
            let lo = i.saturating_sub(bw);
            let row = &self.l[i * w..(i + 1) * w];
            let s = dot(&row[lo + bw - i..bw], &b[lo..i]);
            b[i] = (b[i] - s) / row[bw];
        }
        for i in (0..self.n).rev() {
            let lo = i.saturating_sub(bw);
            let row = &self.l[i * w..(i + 1) * w];
            b[i] /= row[bw];
            let xi = b[i];
            for (k, l) in (lo..i).zip(&row[lo + bw - i..bw]) {
                b[k] -= l * xi;
            }
        }
        Ok(())
    }
}
