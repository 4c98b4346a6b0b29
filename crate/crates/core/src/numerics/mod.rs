//! Dense row-major matrices and the small set of numeric kernels everything
//! else is built from.
//!
//! Determinism contract: every kernel accumulates strictly left-to-right over
//! its inner dimension, so repeated runs of the same build produce bitwise
//! identical results. Matrices hold only finite values; constructors and
//! value-producing kernels reject NaN/Inf.

pub mod rng;

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use rng::SplitMix64;

/// Row-major `rows x cols` matrix of sequence data (rows index positions).
#[derive(Debug, Clone, PartialEq)]
pub struct SeqMatrix<T> {
    rows: usize,
    cols: usize,
    data: Vec<T>,
}

impl<T: Scalar> SeqMatrix<T> {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        SeqMatrix {
            rows,
            cols,
            data: vec![T::zero(); rows * cols],
        }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<T>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::shape(
                "from_vec",
                format!("{rows}x{cols}"),
                format!("{} values", data.len()),
            ));
        }
        let m = SeqMatrix { rows, cols, data };
        m.check_finite("from_vec")?;
        Ok(m)
    }

    pub fn from_rows(rows: &[Vec<T>]) -> Result<Self> {
        let cols = rows.first().map_or(0, |r| r.len());
        if rows.iter().any(|r| r.len() != cols) {
            return Err(Error::Contract("from_rows: ragged row lengths".into()));
        }
        Self::from_vec(rows.len(), cols, rows.concat())
    }

    /// Fill with standard normal draws times `std`, consuming `rows*cols`
    /// Gaussians from `rng` in row-major order.
    pub fn gaussian(rows: usize, cols: usize, std: f64, rng: &mut SplitMix64) -> Self {
        let data = (0..rows * cols)
            .map(|_| rng.next_normal::<T>() * T::cast(std))
            .collect();
        SeqMatrix { rows, cols, data }
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
    pub fn get(&self, r: usize, c: usize) -> T {
        self.data[r * self.cols + c]
    }

    #[inline]
    pub fn set(&mut self, r: usize, c: usize, v: T) {
        self.data[r * self.cols + c] = v;
    }

    #[inline]
    pub fn row(&self, r: usize) -> &[T] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    #[inline]
    pub fn row_mut(&mut self, r: usize) -> &mut [T] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn transpose(&self) -> SeqMatrix<T> {
        let mut out = SeqMatrix::zeros(self.cols, self.rows);
        for r in 0..self.rows {
            for c in 0..self.cols {
                out.set(c, r, self.get(r, c));
            }
        }
        out
    }

    /// `self += other * scale`, elementwise.
    pub fn add_scaled(&mut self, other: &SeqMatrix<T>, scale: T) -> Result<()> {
        if self.shape() != other.shape() {
            return Err(Error::shape(
                "add_scaled",
                format!("{}x{}", self.rows, self.cols),
                format!("{}x{}", other.rows, other.cols),
            ));
        }
        for (a, b) in self.data.iter_mut().zip(other.data.iter()) {
            *a += *b * scale;
        }
        Ok(())
    }

    pub fn check_finite(&self, op: &'static str) -> Result<()> {
        for (i, v) in self.data.iter().enumerate() {
            if !v.is_finite() {
                return Err(Error::NonFinite(format!(
                    "{op}: element ({}, {})",
                    i / self.cols.max(1),
                    i % self.cols.max(1)
                )));
            }
        }
        Ok(())
    }
}

/// `a * b`, or `a * b^T` when `transpose_b` is set.
///
/// Accumulation over the inner dimension is left-to-right; cells are computed
/// independently, so the result is bitwise deterministic.
pub fn matmul<T: Scalar>(a: &SeqMatrix<T>, b: &SeqMatrix<T>, transpose_b: bool) -> Result<SeqMatrix<T>> {
    let (b_rows, b_cols) = if transpose_b {
        (b.cols, b.rows)
    } else {
        (b.rows, b.cols)
    };
    if a.cols != b_rows {
        return Err(Error::shape(
            "matmul",
            format!("{}x{}", a.rows, a.cols),
            format!("{}x{}{}", b.rows, b.cols, if transpose_b { " (transposed)" } else { "" }),
        ));
    }
    let mut out = SeqMatrix::zeros(a.rows, b_cols);
    if transpose_b {
        // Row-times-row dot products; both operands stream contiguously.
        for i in 0..a.rows {
            let ar = a.row(i);
            let or = out.row_mut(i);
            for j in 0..b_cols {
                let br = b.row(j);
                let mut acc = T::zero();
                for p in 0..ar.len() {
                    acc += ar[p] * br[p];
                }
                or[j] = acc;
            }
        }
    } else {
        // i-p-j order: streams b by rows; per-cell adds still run p ascending.
        for i in 0..a.rows {
            let ar = a.row(i);
            let or = &mut out.data[i * b_cols..(i + 1) * b_cols];
            for (p, &apv) in ar.iter().enumerate() {
                let br = b.row(p);
                for j in 0..b_cols {
                    or[j] += apv * br[j];
                }
            }
        }
    }
    out.check_finite("matmul")?;
    Ok(out)
}

/// `a^T * b` without materializing the transpose; used by the backward passes
/// for weight gradients. Per-cell adds run over rows of `a`/`b` ascending.
pub fn matmul_transpose_a<T: Scalar>(a: &SeqMatrix<T>, b: &SeqMatrix<T>) -> Result<SeqMatrix<T>> {
    if a.rows != b.rows {
        return Err(Error::shape(
            "matmul_transpose_a",
            format!("{}x{}", a.rows, a.cols),
            format!("{}x{}", b.rows, b.cols),
        ));
    }
    let mut out = SeqMatrix::zeros(a.cols, b.cols);
    for n in 0..a.rows {
        let ar = a.row(n);
        let br = b.row(n);
        for (i, &av) in ar.iter().enumerate() {
            let or = &mut out.data[i * b.cols..(i + 1) * b.cols];
            for j in 0..br.len() {
                or[j] += av * br[j];
            }
        }
    }
    out.check_finite("matmul_transpose_a")?;
    Ok(out)
}

/// Per-cell allow/deny mask for [`softmax_rows`]. `true` means allowed.
#[derive(Debug, Clone)]
pub struct Mask {
    rows: usize,
    cols: usize,
    allow: Vec<bool>,
}

impl Mask {
    pub fn new(rows: usize, cols: usize, allow: Vec<bool>) -> Result<Self> {
        if allow.len() != rows * cols {
            return Err(Error::shape(
                "Mask::new",
                format!("{rows}x{cols}"),
                format!("{} flags", allow.len()),
            ));
        }
        Ok(Mask { rows, cols, allow })
    }

    /// Lower-triangular (including the diagonal) square mask.
    pub fn causal(n: usize) -> Self {
        let mut allow = vec![false; n * n];
        for i in 0..n {
            for j in 0..=i {
                allow[i * n + j] = true;
            }
        }
        Mask { rows: n, cols: n, allow }
    }

    #[inline]
    pub fn allowed(&self, r: usize, c: usize) -> bool {
        self.allow[r * self.cols + c]
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }
}

/// Numerically stable masked row softmax.
///
/// Per row: subtract the max over allowed cells, exponentiate, normalize.
/// Denied cells are exactly zero in the output. A row with no allowed cells
/// is a contract error.
pub fn softmax_rows<T: Scalar>(logits: &SeqMatrix<T>, mask: Option<&Mask>) -> Result<SeqMatrix<T>> {
    if let Some(m) = mask {
        if m.shape() != logits.shape() {
            return Err(Error::shape(
                "softmax_rows",
                format!("{}x{}", logits.rows, logits.cols),
                format!("mask {}x{}", m.rows, m.cols),
            ));
        }
    }
    logits.check_finite("softmax_rows input")?;
    let mut out = SeqMatrix::zeros(logits.rows, logits.cols);
    for r in 0..logits.rows {
        let row = logits.row(r);
        let allowed = |c: usize| mask.map_or(true, |m| m.allowed(r, c));
        let mut max: Option<T> = None;
        for (c, &v) in row.iter().enumerate() {
            if allowed(c) {
                max = Some(match max {
                    Some(m) if m >= v => m,
                    _ => v,
                });
            }
        }
        let max = max.ok_or_else(|| Error::Contract(format!("softmax_rows: row {r} is fully masked")))?;
        let mut z = T::zero();
        for (c, &v) in row.iter().enumerate() {
            if allowed(c) {
                z += (v - max).exp();
            }
        }
        let or = out.row_mut(r);
        for (c, &v) in row.iter().enumerate() {
            if allowed(c) {
                or[c] = (v - max).exp() / z;
            }
        }
    }
    Ok(out)
}

/// Central-difference gradient of a scalar function of a matrix.
///
/// Shared oracle for the analytic backward passes: each coordinate is
/// perturbed by `eps` in both directions and the function re-evaluated.
pub fn finite_diff_grad<T: Scalar>(
    f: &mut dyn FnMut(&SeqMatrix<T>) -> Result<T>,
    x: &SeqMatrix<T>,
    eps: T,
) -> Result<SeqMatrix<T>> {
    if eps <= T::zero() {
        return Err(Error::Config("finite_diff_grad: eps must be positive".into()));
    }
    let mut grad = SeqMatrix::zeros(x.rows, x.cols);
    let mut probe = x.clone();
    for i in 0..x.data.len() {
        let orig = probe.data[i];
        probe.data[i] = orig + eps;
        let up = f(&probe)?;
        probe.data[i] = orig - eps;
        let down = f(&probe)?;
        probe.data[i] = orig;
        if !up.is_finite() || !down.is_finite() {
            return Err(Error::NonFinite(format!("finite_diff_grad: coordinate {i}")));
        }
        grad.data[i] = (up - down) / (T::cast(2.0) * eps);
    }
    Ok(grad)
}

#[cfg(test)]
mod tests {
    use super::*;
    use num_traits::Float;

    fn naive_matmul(a: &SeqMatrix<f64>, b: &SeqMatrix<f64>) -> SeqMatrix<f64> {
        let mut out = SeqMatrix::zeros(a.rows(), b.cols());
        for i in 0..a.rows() {
            for j in 0..b.cols() {
                let mut acc = 0.0;
                for p in 0..a.cols() {
                    acc += a.get(i, p) * b.get(p, j);
                }
                out.set(i, j, acc);
            }
        }
        out
    }

    fn random_matrix(rows: usize, cols: usize, seed: u64) -> SeqMatrix<f64> {
        let mut rng = SplitMix64::new(seed);
        SeqMatrix::gaussian(rows, cols, 1.0, &mut rng)
    }

    #[test]
    fn matmul_identity() {
        let a = random_matrix(4, 4, 1);
        let mut eye = SeqMatrix::zeros(4, 4);
        for i in 0..4 {
            eye.set(i, i, 1.0);
        }
        let prod = matmul(&a, &eye, false).unwrap();
        assert_eq!(prod, a);
    }

    #[test]
    fn matmul_hand_case() {
        let a = SeqMatrix::from_vec(2, 2, vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let b = SeqMatrix::from_vec(2, 2, vec![5.0, 6.0, 7.0, 8.0]).unwrap();
        let c = matmul(&a, &b, false).unwrap();
        assert_eq!(c.data(), &[19.0, 22.0, 43.0, 50.0]);
    }

    #[test]
    fn matmul_matches_triple_loop_oracle() {
        let a = random_matrix(5, 4, 2);
        let b = random_matrix(4, 3, 3);
        let fast = matmul(&a, &b, false).unwrap();
        let slow = naive_matmul(&a, &b);
        for i in 0..5 {
            for j in 0..3 {
                assert!((fast.get(i, j) - slow.get(i, j)).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn matmul_transpose_b_matches_oracle() {
        let a = random_matrix(5, 4, 4);
        let b = random_matrix(3, 4, 5);
        let fast = matmul(&a, &b, true).unwrap();
        let slow = naive_matmul(&a, &b.transpose());
        for i in 0..5 {
            for j in 0..3 {
                assert!((fast.get(i, j) - slow.get(i, j)).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn matmul_transpose_a_matches_oracle() {
        let a = random_matrix(6, 4, 6);
        let b = random_matrix(6, 3, 7);
        let fast = matmul_transpose_a(&a, &b).unwrap();
        let slow = naive_matmul(&a.transpose(), &b);
        for i in 0..4 {
            for j in 0..3 {
                assert!((fast.get(i, j) - slow.get(i, j)).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn matmul_shape_error_names_both_shapes() {
        let a = SeqMatrix::<f64>::zeros(2, 3);
        let b = SeqMatrix::<f64>::zeros(4, 5);
        let err = matmul(&a, &b, false).unwrap_err().to_string();
        assert!(err.contains("2x3"), "{err}");
        assert!(err.contains("4x5"), "{err}");
    }

    #[test]
    fn from_vec_rejects_non_finite() {
        let err = SeqMatrix::from_vec(1, 2, vec![1.0, f64::NAN]).unwrap_err();
        assert!(matches!(err, Error::NonFinite(_)));
    }

    #[test]
    fn softmax_uniform_on_equal_logits() {
        let m = SeqMatrix::from_vec(1, 2, vec![0.0, 0.0]).unwrap();
        let s = softmax_rows(&m, None).unwrap();
        assert_eq!(s.data(), &[0.5, 0.5]);
    }

    #[test]
    fn softmax_stable_for_large_logits() {
        let m = SeqMatrix::from_vec(1, 2, vec![1000.0, 1000.1]).unwrap();
        let s = softmax_rows(&m, None).unwrap();
        assert!(s.data().iter().all(|v| v.is_finite()));
        let z: f64 = s.data().iter().sum();
        assert!((z - 1.0).abs() < 1e-12);
        assert!(s.get(0, 1) > s.get(0, 0));
    }

    #[test]
    fn softmax_masked_matches_direct_eval() {
        let m = SeqMatrix::from_vec(1, 3, vec![1.0, 2.0, 3.0]).unwrap();
        let mask = Mask::new(1, 3, vec![true, false, true]).unwrap();
        let s = softmax_rows(&m, Some(&mask)).unwrap();
        let z = (1.0f64 - 3.0).exp() + 1.0;
        assert!((s.get(0, 0) - (1.0f64 - 3.0).exp() / z).abs() < 1e-15);
        assert_eq!(s.get(0, 1), 0.0);
        assert!((s.get(0, 2) - 1.0 / z).abs() < 1e-15);
    }

    #[test]
    fn softmax_fully_masked_row_is_contract_error() {
        let m = SeqMatrix::from_vec(1, 2, vec![1.0, 2.0]).unwrap();
        let mask = Mask::new(1, 2, vec![false, false]).unwrap();
        assert!(matches!(
            softmax_rows(&m, Some(&mask)),
            Err(Error::Contract(_))
        ));
    }

    #[test]
    fn softmax_rows_sum_to_one_within_width_tolerance() {
        fn run<T: Scalar>() {
            let mut rng = SplitMix64::new(11);
            let m = SeqMatrix::<T>::gaussian(17, 23, 3.0, &mut rng);
            let s = softmax_rows(&m, None).unwrap();
            for r in 0..s.rows() {
                let z: T = s.row(r).iter().copied().sum();
                assert!((z - T::one()).abs() <= T::ROW_SUM_TOL);
            }
        }
        run::<f64>();
        run::<f32>();
    }

    #[test]
    fn finite_diff_of_sum_of_squares() {
        let x = SeqMatrix::from_vec(1, 2, vec![1.0, 2.0]).unwrap();
        let mut f = |m: &SeqMatrix<f64>| Ok(m.data().iter().map(|v| v * v).sum());
        let g = finite_diff_grad(&mut f, &x, 1e-5).unwrap();
        assert!((g.get(0, 0) - 2.0).abs() < 1e-8);
        assert!((g.get(0, 1) - 4.0).abs() < 1e-8);
    }

    #[test]
    fn finite_diff_of_constant_is_zero() {
        let x = SeqMatrix::from_vec(2, 2, vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let mut f = |_: &SeqMatrix<f64>| Ok(42.0);
        let g = finite_diff_grad(&mut f, &x, 1e-5).unwrap();
        assert!(g.data().iter().all(|&v| v == 0.0));
    }
}
