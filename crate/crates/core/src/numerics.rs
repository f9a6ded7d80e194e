//! Dense row-major matrices and numerically stable softmax statistics.
//!
//! All arithmetic is `f64`. Random matrices come from ChaCha8 (`rand_chacha`)
//! seeded with `seed_from_u64`, and each entry is built from the raw 64-bit
//! output as `(x >> 11) * 2^-53`, so the stream is fixed across platforms and
//! does not depend on `rand`'s float conversion.

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Matrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m.data[i * n + i] = 1.0;
        }
        m
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::Dimension(format!(
                "{} values for a {rows}x{cols} matrix",
                data.len()
            )));
        }
        Ok(Self { rows, cols, data })
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        let mut data = Vec::with_capacity(rows.len() * cols);
        for r in rows {
            if r.len() != cols {
                return Err(Error::Dimension("ragged rows".into()));
            }
            data.extend_from_slice(r);
        }
        Ok(Self {
            rows: rows.len(),
            cols,
            data,
        })
    }

    pub fn row_vector(values: &[f64]) -> Self {
        Self {
            rows: 1,
            cols: values.len(),
            data: values.to_vec(),
        }
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

    pub fn set(&mut self, r: usize, c: usize, v: f64) {
        self.data[r * self.cols + c] = v;
    }

    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn row_mut(&mut self, r: usize) -> &mut [f64] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn transpose(&self) -> Self {
        let mut t = Self::zeros(self.cols, self.rows);
        for r in 0..self.rows {
            for c in 0..self.cols {
                t.data[c * self.rows + r] = self.data[r * self.cols + c];
            }
        }
        t
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Bytes held by the entry buffer.
    pub fn byte_len(&self) -> usize {
        self.data.len() * std::mem::size_of::<f64>()
    }
}

/// Matrix product. Each output entry accumulates `a[i][k] * b[k][j]` in
/// increasing `k` starting from zero, so a row's result does not depend on
/// how many other rows are in `a`.
pub fn matmul(a: &Matrix, b: &Matrix) -> Result<Matrix> {
    if a.cols != b.rows {
        return Err(Error::Dimension(format!(
            "matmul {}x{} by {}x{}",
            a.rows, a.cols, b.rows, b.cols
        )));
    }
    // k outermost: each row of `b` is streamed once for the whole batch.
    // Every output still sums over k in ascending order.
    let mut out = Matrix::zeros(a.rows, b.cols);
    for k in 0..a.cols {
        let b_row = &b.data[k * b.cols..(k + 1) * b.cols];
        for i in 0..a.rows {
            let aik = a.data[i * a.cols + k];
            let out_row = &mut out.data[i * b.cols..(i + 1) * b.cols];
            for (o, &bkj) in out_row.iter_mut().zip(b_row) {
                *o += aik * bkj;
            }
        }
    }
    Ok(out)
}

/// `a * b` for a single row vector `a`.
pub fn vecmat(a: &[f64], b: &Matrix) -> Result<Vec<f64>> {
    if a.len() != b.rows {
        return Err(Error::Dimension(format!(
            "vecmat {} by {}x{}",
            a.len(),
            b.rows,
            b.cols
        )));
    }
    let mut out = vec![0.0; b.cols];
    for (k, &ak) in a.iter().enumerate() {
        for (o, &bkj) in out.iter_mut().zip(b.row(k)) {
            *o += ak * bkj;
        }
    }
    Ok(out)
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).fold(0.0, |acc, (x, y)| acc + x * y)
}

#[derive(Debug, Clone, PartialEq)]
pub struct SoftmaxStats {
    pub weights: Vec<f64>,
    /// `sum(exp(s_i - m))`
    pub gamma: f64,
    /// Max logit.
    pub m: f64,
}

pub fn stable_softmax_stats(scores: &[f64]) -> Result<SoftmaxStats> {
    if scores.is_empty() {
        return Err(Error::EmptyPartition);
    }
    if let Some(bad) = scores.iter().find(|s| !s.is_finite()) {
        return Err(Error::InvalidArgument(format!("non-finite score {bad}")));
    }
    let m = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut weights: Vec<f64> = scores.iter().map(|s| (s - m).exp()).collect();
    let gamma: f64 = weights.iter().sum();
    for w in &mut weights {
        *w /= gamma;
    }
    Ok(SoftmaxStats { weights, gamma, m })
}

/// Deterministic `rows x cols` matrix with entries uniform in `[-scale, scale)`.
pub fn seeded_matrix(seed: u64, rows: usize, cols: usize, scale: f64) -> Matrix {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let data = (0..rows * cols)
        .map(|_| scale * (2.0 * unit_f64(rng.next_u64()) - 1.0))
        .collect();
    Matrix { rows, cols, data }
}

/// Maps 64 random bits to `[0, 1)` using the top 53 bits.
pub fn unit_f64(bits: u64) -> f64 {
    (bits >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn naive_matmul(a: &Matrix, b: &Matrix) -> Matrix {
        let mut out = Matrix::zeros(a.rows(), b.cols());
        for i in 0..a.rows() {
            for j in 0..b.cols() {
                let mut acc = 0.0;
                for k in 0..a.cols() {
                    acc += a.get(i, k) * b.get(k, j);
                }
                out.set(i, j, acc);
            }
        }
        out
    }

    #[test]
    fn identity_product() {
        let m = seeded_matrix(3, 2, 5, 1.0);
        assert_eq!(matmul(&Matrix::identity(2), &m).unwrap(), m);
    }

    #[test]
    fn hand_product() {
        let a = Matrix::from_rows(&[vec![1.0, 2.0], vec![3.0, 4.0]]).unwrap();
        let b = Matrix::from_rows(&[vec![5.0], vec![6.0]]).unwrap();
        let c = matmul(&a, &b).unwrap();
        assert_eq!(c.shape(), (2, 1));
        assert_eq!(c.data(), &[17.0, 39.0]);
    }

    #[test]
    fn random_product_matches_triple_loop_bitwise() {
        let a = seeded_matrix(11, 8, 8, 2.0);
        let b = seeded_matrix(12, 8, 8, 2.0);
        let fast = matmul(&a, &b).unwrap();
        let slow = naive_matmul(&a, &b);
        for (x, y) in fast.data().iter().zip(slow.data()) {
            assert_eq!(x.to_bits(), y.to_bits());
        }
    }

    #[test]
    fn shape_mismatch_is_an_error() {
        let a = Matrix::zeros(2, 3);
        assert!(matches!(matmul(&a, &a), Err(Error::Dimension(_))));
        assert!(vecmat(&[1.0], &a).is_err());
    }

    #[test]
    fn vecmat_matches_matmul() {
        let a = seeded_matrix(1, 1, 6, 1.0);
        let b = seeded_matrix(2, 6, 4, 1.0);
        assert_eq!(vecmat(a.row(0), &b).unwrap(), matmul(&a, &b).unwrap().into_data());
    }

    #[test]
    fn softmax_symmetric_pair() {
        let s = stable_softmax_stats(&[0.0, 0.0]).unwrap();
        assert_eq!(s.weights, vec![0.5, 0.5]);
        assert_eq!(s.gamma, 2.0);
        assert_eq!(s.m, 0.0);
    }

    #[test]
    fn softmax_large_scores_do_not_overflow() {
        let s = stable_softmax_stats(&[1000.0, 999.0]).unwrap();
        // 1 / (1 + e^-1) and e^-1 / (1 + e^-1), from the two-point logistic form.
        let hi = 1.0 / (1.0 + (-1.0f64).exp());
        assert!((s.weights[0] - hi).abs() < 1e-15);
        assert!((s.weights[1] - (1.0 - hi)).abs() < 1e-15);
        assert!((s.weights[0] - 0.731).abs() < 1e-3);
        assert_eq!(s.m, 1000.0);
    }

    #[test]
    fn softmax_single() {
        let s = stable_softmax_stats(&[-3.5]).unwrap();
        assert_eq!(s.weights, vec![1.0]);
        assert_eq!(s.gamma, 1.0);
        assert_eq!(s.m, -3.5);
    }

    #[test]
    fn softmax_empty_is_error() {
        assert!(matches!(stable_softmax_stats(&[]), Err(Error::EmptyPartition)));
    }

    #[test]
    fn seeded_determinism() {
        assert_eq!(seeded_matrix(5, 3, 3, 1.0), seeded_matrix(5, 3, 3, 1.0));
        assert_ne!(seeded_matrix(5, 3, 3, 1.0), seeded_matrix(6, 3, 3, 1.0));
        assert!(seeded_matrix(0, 2, 2, 0.0).data().iter().all(|&v| v == 0.0));
    }

    proptest! {
        #[test]
        fn softmax_shift_invariance(
            scores in prop::collection::vec(-20.0f64..20.0, 1..32),
            c in -50.0f64..50.0,
        ) {
            let base = stable_softmax_stats(&scores).unwrap();
            let shifted: Vec<f64> = scores.iter().map(|s| s + c).collect();
            let moved = stable_softmax_stats(&shifted).unwrap();
            for (a, b) in base.weights.iter().zip(&moved.weights) {
                prop_assert!((a - b).abs() < 1e-12);
            }
            // gamma is relative to m, so it is shift-free as well
            prop_assert!((base.gamma - moved.gamma).abs() <= 1e-12 * base.gamma);
            prop_assert!((moved.m - base.m - c).abs() < 1e-9);
        }

        #[test]
        fn softmax_matches_direct_normalization(
            scores in prop::collection::vec(-20.0f64..20.0, 1..32),
        ) {
            let stats = stable_softmax_stats(&scores).unwrap();
            let z: f64 = scores.iter().map(|s| s.exp()).sum();
            let sum: f64 = stats.weights.iter().sum();
            prop_assert!((sum - 1.0).abs() < 1e-12);
            prop_assert!(stats.gamma > 0.0);
            for (w, s) in stats.weights.iter().zip(&scores) {
                prop_assert!((w - s.exp() / z).abs() < 1e-12);
            }
        }
    }
}
