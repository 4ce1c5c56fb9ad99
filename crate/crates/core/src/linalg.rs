//! Dense row-major matrices in double precision, plus the norms and the
//! Newton–Schulz orthogonalization shared by the optimizers and checks.

use rand::Rng;
use rand_distr::{Distribution, StandardNormal, Uniform};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Mat {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Mat {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Mat {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn filled(rows: usize, cols: usize, value: f64) -> Self {
        Mat {
            rows,
            cols,
            data: vec![value; rows * cols],
        }
    }

    /// Builds a matrix from row-major values. Rejects empty shapes, a length
    /// mismatch, and non-finite entries.
    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if rows == 0 || cols == 0 {
            return Err(Error::InvalidInput(format!(
                "matrix shape must be positive, got {rows}x{cols}"
            )));
        }
        if data.len() != rows * cols {
            return Err(Error::shape(
                "Mat::from_vec",
                format!("{} values for a {rows}x{cols} matrix", data.len()),
            ));
        }
        if let Some(bad) = data.iter().find(|v| !v.is_finite()) {
            return Err(Error::InvalidInput(format!("non-finite entry {bad}")));
        }
        Ok(Mat { rows, cols, data })
    }

    /// Panics on ragged rows; intended for literals in tests and examples.
    pub fn from_rows(rows: &[&[f64]]) -> Self {
        let cols = rows.first().map_or(0, |r| r.len());
        let mut data = Vec::with_capacity(rows.len() * cols);
        for r in rows {
            assert_eq!(r.len(), cols, "ragged rows");
            data.extend_from_slice(r);
        }
        Mat {
            rows: rows.len(),
            cols,
            data,
        }
    }

    pub fn row_vector(values: &[f64]) -> Self {
        Mat {
            rows: 1,
            cols: values.len(),
            data: values.to_vec(),
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Mat::zeros(n, n);
        for i in 0..n {
            m.data[i * n + i] = 1.0;
        }
        m
    }

    pub fn diag(values: &[f64]) -> Self {
        let n = values.len();
        let mut m = Mat::zeros(n, n);
        for (i, v) in values.iter().enumerate() {
            m.data[i * n + i] = *v;
        }
        m
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

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    #[inline]
    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    #[inline]
    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.data
    }

    #[inline]
    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    #[inline]
    pub fn set(&mut self, r: usize, c: usize, v: f64) {
        self.data[r * self.cols + c] = v;
    }

    #[inline]
    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    #[inline]
    pub fn row_mut(&mut self, r: usize) -> &mut [f64] {
        let c = self.cols;
        &mut self.data[r * c..(r + 1) * c]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn transpose(&self) -> Mat {
        let mut out = Mat::zeros(self.cols, self.rows);
        for r in 0..self.rows {
            for c in 0..self.cols {
                out.data[c * self.rows + r] = self.data[r * self.cols + c];
            }
        }
        out
    }

    /// `self · other`. Panics on inner-dimension mismatch.
    pub fn matmul(&self, other: &Mat) -> Mat {
        assert_eq!(
            self.cols, other.rows,
            "matmul {}x{} by {}x{}",
            self.rows, self.cols, other.rows, other.cols
        );
        let (m, k, n) = (self.rows, self.cols, other.cols);
        gemm(m, k, n, &self.data, (k as isize, 1), &other.data, (n as isize, 1))
    }

    /// `self · otherᵀ` without materializing the transpose.
    pub fn matmul_t(&self, other: &Mat) -> Mat {
        assert_eq!(self.cols, other.cols, "matmul_t inner dimension");
        let (m, k, n) = (self.rows, self.cols, other.rows);
        gemm(m, k, n, &self.data, (k as isize, 1), &other.data, (1, k as isize))
    }

    /// `selfᵀ · other` without materializing the transpose.
    pub fn t_matmul(&self, other: &Mat) -> Mat {
        assert_eq!(self.rows, other.rows, "t_matmul inner dimension");
        let (m, k, n) = (self.cols, self.rows, other.cols);
        gemm(m, k, n, &self.data, (1, m as isize), &other.data, (n as isize, 1))
    }

    pub fn add(&self, other: &Mat) -> Mat {
        self.zip_map(other, |a, b| a + b)
    }

    pub fn sub(&self, other: &Mat) -> Mat {
        self.zip_map(other, |a, b| a - b)
    }

    pub fn hadamard(&self, other: &Mat) -> Mat {
        self.zip_map(other, |a, b| a * b)
    }

    pub fn scale(&self, s: f64) -> Mat {
        self.map(|v| v * s)
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Mat {
        Mat {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn zip_map(&self, other: &Mat, f: impl Fn(f64, f64) -> f64) -> Mat {
        assert_eq!(self.shape(), other.shape(), "elementwise shape mismatch");
        Mat {
            rows: self.rows,
            cols: self.cols,
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| f(a, b))
                .collect(),
        }
    }

    /// `self += alpha · other`.
    pub fn axpy(&mut self, alpha: f64, other: &Mat) {
        assert_eq!(self.shape(), other.shape(), "axpy shape mismatch");
        for (a, &b) in self.data.iter_mut().zip(&other.data) {
            *a += alpha * b;
        }
    }

    pub fn scale_in_place(&mut self, s: f64) {
        for v in &mut self.data {
            *v *= s;
        }
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    pub fn max_abs_diff(&self, other: &Mat) -> f64 {
        assert_eq!(self.shape(), other.shape());
        self.data
            .iter()
            .zip(&other.data)
            .fold(0.0, |m, (a, b)| m.max((a - b).abs()))
    }

    pub fn randn<R: Rng + ?Sized>(rows: usize, cols: usize, rng: &mut R) -> Mat {
        let data = (0..rows * cols)
            .map(|_| StandardNormal.sample(rng))
            .collect();
        Mat { rows, cols, data }
    }

    pub fn uniform<R: Rng + ?Sized>(rows: usize, cols: usize, bound: f64, rng: &mut R) -> Mat {
        if bound == 0.0 {
            return Mat::zeros(rows, cols);
        }
        let dist = Uniform::new_inclusive(-bound, bound).expect("finite bound");
        let data = (0..rows * cols).map(|_| dist.sample(rng)).collect();
        Mat { rows, cols, data }
    }

    /// Random orthogonal n×n matrix via modified Gram–Schmidt on a Gaussian draw.
    pub fn random_orthogonal<R: Rng + ?Sized>(n: usize, rng: &mut R) -> Mat {
        loop {
            let mut q = Mat::randn(n, n, rng);
            let mut ok = true;
            for i in 0..n {
                for j in 0..i {
                    let proj = dot(q.row(i), q.row(j));
                    let (head, tail) = q.data.split_at_mut(i * n);
                    let rj = &head[j * n..(j + 1) * n];
                    for (a, b) in tail[..n].iter_mut().zip(rj) {
                        *a -= proj * b;
                    }
                }
                let norm = dot(q.row(i), q.row(i)).sqrt();
                if norm < 1e-8 {
                    ok = false;
                    break;
                }
                for v in q.row_mut(i) {
                    *v /= norm;
                }
            }
            if ok {
                return q;
            }
        }
    }
}

/// Row-major `m×n` product of strided `m×k` and `k×n` operands.
fn gemm(m: usize, k: usize, n: usize, a: &[f64], sa: (isize, isize), b: &[f64], sb: (isize, isize)) -> Mat {
    let mut out = Mat::zeros(m, n);
    if m == 0 || n == 0 || k == 0 {
        return out;
    }
    // SAFETY: strides describe `a` as m×k and `b` as k×n inside their
    // slices, and `out` is a fresh contiguous m×n buffer.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            sa.0,
            sa.1,
            b.as_ptr(),
            sb.0,
            sb.1,
            0.0,
            out.data.as_mut_ptr(),
            n as isize,
            1,
        );
    }
    out
}

/// Eight independent accumulators so the loop vectorizes; deterministic for a
/// given length.
#[inline]
pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
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
    let mut tail = 0.0;
    for (x, y) in ra.iter().zip(rb) {
        tail += x * y;
    }
    ((acc[0] + acc[4]) + (acc[1] + acc[5])) + ((acc[2] + acc[6]) + (acc[3] + acc[7])) + tail
}

/// Frobenius inner product ⟨a, b⟩_F.
pub fn frobenius_inner(a: &Mat, b: &Mat) -> f64 {
    assert_eq!(a.shape(), b.shape(), "frobenius_inner shape mismatch");
    dot(a.as_slice(), b.as_slice())
}

pub fn frobenius_norm(m: &Mat) -> f64 {
    dot(m.as_slice(), m.as_slice()).sqrt()
}

/// ‖M‖_F / √(rows·cols).
pub fn matrix_rms(m: &Mat) -> f64 {
    frobenius_norm(m) / ((m.rows() * m.cols()) as f64).sqrt()
}

/// ‖x‖₂ / √d.
pub fn vector_rms(x: &[f64]) -> f64 {
    if x.is_empty() {
        return 0.0;
    }
    (dot(x, x) / x.len() as f64).sqrt()
}

pub fn l2_norm(x: &[f64]) -> f64 {
    dot(x, x).sqrt()
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SpectralEstimate {
    pub value: f64,
    pub converged: bool,
    pub iterations: usize,
}

/// Largest singular value by power iteration on MᵀM.
pub fn spectral_norm(m: &Mat, iters: usize, tol: f64) -> SpectralEstimate {
    let n = m.cols();
    if frobenius_norm(m) == 0.0 {
        return SpectralEstimate {
            value: 0.0,
            converged: true,
            iterations: 0,
        };
    }
    // Deterministic, non-symmetric start so it is not orthogonal to the
    // leading right singular vector of structured test matrices.
    let mut v: Vec<f64> = (0..n).map(|j| 1.0 + 0.37 * ((j * 7 + 3) % 11) as f64).collect();
    let norm = l2_norm(&v);
    v.iter_mut().for_each(|x| *x /= norm);

    let mut sigma = 0.0;
    for it in 1..=iters.max(1) {
        let mv = mat_vec(m, &v);
        let mut w = mat_t_vec(m, &mv);
        let wn = l2_norm(&w);
        if wn == 0.0 {
            return SpectralEstimate {
                value: 0.0,
                converged: true,
                iterations: it,
            };
        }
        w.iter_mut().for_each(|x| *x /= wn);
        let next = l2_norm(&mat_vec(m, &w));
        let delta = (next - sigma).abs();
        sigma = next;
        v = w;
        if it > 1 && delta <= tol * sigma.max(f64::MIN_POSITIVE) {
            return SpectralEstimate {
                value: sigma,
                converged: true,
                iterations: it,
            };
        }
    }
    SpectralEstimate {
        value: sigma,
        converged: false,
        iterations: iters.max(1),
    }
}

pub fn mat_vec(m: &Mat, v: &[f64]) -> Vec<f64> {
    (0..m.rows()).map(|r| dot(m.row(r), v)).collect()
}

pub fn mat_t_vec(m: &Mat, v: &[f64]) -> Vec<f64> {
    let mut out = vec![0.0; m.cols()];
    for (r, &s) in v.iter().enumerate() {
        for (o, &a) in out.iter_mut().zip(m.row(r)) {
            *o += s * a;
        }
    }
    out
}

/// Polynomial coefficients (a, b, c) of the odd iteration
/// `X ← aX + b(XXᵀ)X + c(XXᵀ)²X`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct NsCoefficients {
    pub a: f64,
    pub b: f64,
    pub c: f64,
}

impl NsCoefficients {
    /// The quintic used by Muon. Converges into a band around 1 rather than to 1.
    pub const QUINTIC: NsCoefficients = NsCoefficients {
        a: 3.4445,
        b: -4.7750,
        c: 2.0315,
    };

    /// Classic cubic iteration; slower start, but converges to the exact polar factor.
    pub const CUBIC: NsCoefficients = NsCoefficients {
        a: 1.5,
        b: -0.5,
        c: 0.0,
    };
}

impl Default for NsCoefficients {
    fn default() -> Self {
        NsCoefficients::QUINTIC
    }
}

pub const NS_DEFAULT_STEPS: usize = 5;
pub const NS_EPS: f64 = 1e-7;

/// Approximate semi-orthogonal factor of `g` with the default quintic coefficients.
pub fn newton_schulz_orthogonalize(g: &Mat, steps: usize) -> Mat {
    newton_schulz_with(g, steps, NsCoefficients::QUINTIC)
}

pub fn newton_schulz_with(g: &Mat, steps: usize, coeffs: NsCoefficients) -> Mat {
    let norm = frobenius_norm(g);
    if norm == 0.0 {
        return Mat::zeros(g.rows(), g.cols());
    }
    let tall = g.rows() > g.cols();
    let mut x = if tall { g.transpose() } else { g.clone() };
    x.scale_in_place(1.0 / (norm + NS_EPS));
    for _ in 0..steps {
        let gram = x.matmul_t(&x);
        let gram_sq = gram.matmul(&gram);
        let mut poly = gram.scale(coeffs.b);
        poly.axpy(coeffs.c, &gram_sq);
        let mut next = poly.matmul(&x);
        next.axpy(coeffs.a, &x);
        x = next;
    }
    if tall {
        x.transpose()
    } else {
        x
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use nalgebra::DMatrix;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn singular_values(m: &Mat) -> Vec<f64> {
        let dm = DMatrix::from_row_slice(m.rows(), m.cols(), m.as_slice());
        let mut s: Vec<f64> = dm.singular_values().iter().copied().collect();
        s.sort_by(|a, b| b.partial_cmp(a).unwrap());
        s
    }

    #[test]
    fn frobenius_examples() {
        assert_relative_eq!(frobenius_norm(&Mat::identity(2)), 2f64.sqrt());
        assert_eq!(frobenius_norm(&Mat::zeros(3, 3)), 0.0);
        assert_eq!(frobenius_norm(&Mat::from_rows(&[&[3.0, 4.0], &[0.0, 0.0]])), 5.0);
    }

    #[test]
    fn rms_examples() {
        assert_eq!(matrix_rms(&Mat::filled(2, 2, 1.0)), 1.0);
        assert_eq!(matrix_rms(&Mat::identity(4)), 0.5);
        assert_eq!(matrix_rms(&Mat::from_rows(&[&[3.0, 4.0], &[0.0, 0.0]])), 2.5);
        assert_eq!(vector_rms(&[1.0; 4]), 1.0);
        assert_eq!(vector_rms(&[0.0; 5]), 0.0);
        assert_relative_eq!(vector_rms(&[3.0, 4.0]), 2.5 * 2f64.sqrt(), epsilon = 1e-12);
    }

    #[test]
    fn spectral_examples() {
        let s = spectral_norm(&Mat::diag(&[3.0, 1.0]), 200, 1e-12);
        assert!(s.converged);
        assert_relative_eq!(s.value, 3.0, epsilon = 1e-9);
        assert_relative_eq!(spectral_norm(&Mat::identity(5), 50, 1e-12).value, 1.0, epsilon = 1e-12);

        // u vᵀ with ‖u‖ = 2, ‖v‖ = 3
        let u = Mat::from_vec(3, 1, vec![2.0, 0.0, 0.0]).unwrap();
        let v = Mat::from_vec(1, 2, vec![0.0, 3.0]).unwrap();
        let rank1 = u.matmul(&v);
        assert_relative_eq!(spectral_norm(&rank1, 50, 1e-12).value, 6.0, epsilon = 1e-9);
    }

    #[test]
    fn spectral_reports_non_convergence() {
        let m = Mat::diag(&[1.0, 0.999_999]);
        let s = spectral_norm(&m, 1, 1e-15);
        assert!(!s.converged);
        assert!(s.value > 0.0);
    }

    #[test]
    fn from_vec_rejects_bad_input() {
        assert!(Mat::from_vec(2, 2, vec![1.0; 3]).is_err());
        assert!(Mat::from_vec(0, 2, vec![]).is_err());
        assert!(Mat::from_vec(1, 2, vec![1.0, f64::NAN]).is_err());
    }

    #[test]
    fn ns_zero_in_zero_out() {
        let z = newton_schulz_orthogonalize(&Mat::zeros(4, 4), 5);
        assert_eq!(z, Mat::zeros(4, 4));
    }

    #[test]
    fn ns_rotation_keeps_direction() {
        let (s, c) = (30f64.to_radians().sin(), 30f64.to_radians().cos());
        let q = Mat::from_rows(&[&[c, -s], &[s, c]]);
        let out = newton_schulz_orthogonalize(&q, 5);
        // All singular values are equal, so the output is a scalar multiple of Q.
        let scale = out.get(0, 0) / q.get(0, 0);
        assert!(out.max_abs_diff(&q.scale(scale)) < 1e-12);
        assert!((0.7..=1.3).contains(&scale), "quintic band, got {scale}");
        // The cubic coefficients converge to the polar factor itself.
        let cubic = newton_schulz_with(&q, 5, NsCoefficients::CUBIC);
        assert!(cubic.max_abs_diff(&q) < 1e-2);
    }

    #[test]
    fn ns_diag_contracts_toward_one() {
        let out = newton_schulz_orthogonalize(&Mat::diag(&[2.0, 0.5]), 5);
        assert!(out.get(0, 1).abs() < 1e-12 && out.get(1, 0).abs() < 1e-12);
        for s in singular_values(&out) {
            assert!((0.7..=1.3).contains(&s), "singular value {s}");
        }
    }

    #[test]
    fn ns_handles_tall_matrices() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let g = Mat::randn(12, 5, &mut rng);
        let out = newton_schulz_orthogonalize(&g, 5);
        assert_eq!(out.shape(), (12, 5));
        for s in singular_values(&out) {
            assert!((0.3..=1.7).contains(&s));
        }
    }

    #[test]
    fn matmul_variants_agree() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let a = Mat::randn(4, 3, &mut rng);
        let b = Mat::randn(5, 3, &mut rng);
        let c = Mat::randn(4, 6, &mut rng);
        assert!(a.matmul_t(&b).max_abs_diff(&a.matmul(&b.transpose())) < 1e-14);
        assert!(a.t_matmul(&c).max_abs_diff(&a.transpose().matmul(&c)) < 1e-14);
    }

    #[test]
    fn random_orthogonal_is_orthogonal() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let q = Mat::random_orthogonal(16, &mut rng);
        assert!(q.matmul_t(&q).max_abs_diff(&Mat::identity(16)) < 1e-12);
    }

    fn conditioned(n: usize, m: usize, cond: f64, seed: u64) -> Mat {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let k = n.min(m);
        let u = Mat::random_orthogonal(n, &mut rng);
        let v = Mat::random_orthogonal(m, &mut rng);
        let mut s = Mat::zeros(n, m);
        for i in 0..k {
            let t = if k == 1 { 0.0 } else { i as f64 / (k - 1) as f64 };
            s.set(i, i, cond.powf(-t));
        }
        u.matmul(&s).matmul(&v)
    }

    proptest! {
        #[test]
        fn frobenius_is_absolutely_homogeneous(seed in 0u64..1000, c in -50.0f64..50.0) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let m = Mat::randn(3, 4, &mut rng);
            let lhs = frobenius_norm(&m.scale(c));
            prop_assert!((lhs - c.abs() * frobenius_norm(&m)).abs() <= 1e-12 * (1.0 + lhs));
        }

        #[test]
        fn spectral_frobenius_sandwich(seed in 0u64..1000, r in 1usize..9, c in 1usize..9) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let m = Mat::randn(r, c, &mut rng);
            let s = spectral_norm(&m, 5000, 1e-14).value;
            let f = frobenius_norm(&m);
            prop_assert!(s <= f + 1e-9);
            prop_assert!(f <= (r.min(c) as f64).sqrt() * s + 1e-9);
        }

        #[test]
        fn ns_singular_values_stay_in_band(seed in 0u64..500, n in 2usize..24, m in 2usize..24, cond in 1.0f64..100.0) {
            let g = conditioned(n, m, cond, seed);
            let out = newton_schulz_orthogonalize(&g, NS_DEFAULT_STEPS);
            for s in singular_values(&out) {
                prop_assert!((0.3..=1.7).contains(&s), "singular value {} (cond {})", s, cond);
            }
        }
    }
}
