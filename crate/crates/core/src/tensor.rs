//! Minimal dense matrix type used by the model and samplers.
//!
//! Everything is `f64` and row-major. The handful of product routines here
//! report their multiply-add counts to the [`crate::flops`] tally so the
//! empirical operation counters stay in lockstep with the code that does the
//! work.

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::flops::tally;

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

    /// Entries drawn i.i.d. from N(0, std^2).
    pub fn randn(rows: usize, cols: usize, std: f64, rng: &mut impl Rng) -> Self {
        let dist = Normal::new(0.0, std).expect("valid std");
        let data = (0..rows * cols).map(|_| dist.sample(rng)).collect();
        Mat { rows, cols, data }
    }

    #[inline]
    pub fn at(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.cols + j]
    }

    #[inline]
    pub fn at_mut(&mut self, i: usize, j: usize) -> &mut f64 {
        &mut self.data[i * self.cols + j]
    }

    #[inline]
    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    #[inline]
    pub fn row_mut(&mut self, i: usize) -> &mut [f64] {
        &mut self.data[i * self.cols..(i + 1) * self.cols]
    }

    /// Appends `n` rows drawn from N(0, std^2).
    pub fn grow_rows(&mut self, n: usize, std: f64, rng: &mut impl Rng) {
        let dist = Normal::new(0.0, std).expect("valid std");
        self.data.extend((0..n * self.cols).map(|_| dist.sample(rng)));
        self.rows += n;
    }

    /// Appends `n` columns drawn from N(0, std^2), preserving existing entries.
    pub fn grow_cols(&mut self, n: usize, std: f64, rng: &mut impl Rng) {
        let dist = Normal::new(0.0, std).expect("valid std");
        let new_cols = self.cols + n;
        let mut data = vec![0.0; self.rows * new_cols];
        for i in 0..self.rows {
            data[i * new_cols..i * new_cols + self.cols]
                .copy_from_slice(self.row(i));
            for j in self.cols..new_cols {
                data[i * new_cols + j] = dist.sample(rng);
            }
        }
        self.cols = new_cols;
        self.data = data;
    }

    pub fn fill(&mut self, v: f64) {
        self.data.iter_mut().for_each(|x| *x = v);
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }
}

/// out = a (m×k) · b (k×n). Tallies m·n·k multiply-adds.
pub fn matmul(a: &Mat, b: &Mat) -> Mat {
    assert_eq!(a.cols, b.rows);
    let mut out = Mat::zeros(a.rows, b.cols);
    for i in 0..a.rows {
        let ar = a.row(i);
        let or = out.row_mut(i);
        for (l, &av) in ar.iter().enumerate() {
            let br = b.row(l);
            for (o, &bv) in or.iter_mut().zip(br.iter()) {
                *o += av * bv;
            }
        }
    }
    tally((a.rows * b.cols * a.cols) as u64);
    out
}

/// out = a (m×k) · bᵀ where b is (n×k). Tallies m·n·k multiply-adds.
pub fn matmul_bt(a: &Mat, b: &Mat) -> Mat {
    assert_eq!(a.cols, b.cols);
    let mut out = Mat::zeros(a.rows, b.rows);
    for i in 0..a.rows {
        let ar = a.row(i);
        for j in 0..b.rows {
            *out.at_mut(i, j) = dot_raw(ar, b.row(j));
        }
    }
    tally((a.rows * b.rows * a.cols) as u64);
    out
}

/// out = aᵀ (k×m)ᵀ · b (k×n) = (m×n). Tallies m·n·k multiply-adds.
pub fn matmul_at(a: &Mat, b: &Mat) -> Mat {
    assert_eq!(a.rows, b.rows);
    let mut out = Mat::zeros(a.cols, b.cols);
    for l in 0..a.rows {
        let ar = a.row(l);
        let br = b.row(l);
        for (i, &av) in ar.iter().enumerate() {
            let or = out.row_mut(i);
            for (o, &bv) in or.iter_mut().zip(br.iter()) {
                *o += av * bv;
            }
        }
    }
    tally((a.cols * b.cols * a.rows) as u64);
    out
}

#[inline]
fn dot_raw(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Dot product with tally.
pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    tally(a.len() as u64);
    dot_raw(a, b)
}

/// y += c * x, with tally.
pub fn axpy(c: f64, x: &[f64], y: &mut [f64]) {
    assert_eq!(x.len(), y.len());
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += c * xi;
    }
    tally(x.len() as u64);
}

pub fn l2_norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}
