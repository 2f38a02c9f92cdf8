//! Dense complex helpers on top of `nalgebra`.
//!
//! The hot path of the SBL family is the Hermitian block solve in
//! [`block_posterior`]; it works on flat column-major buffers because it runs
//! once per cluster per iteration.

use nalgebra::{DMatrix, DVector};
use num_complex::Complex64;

use crate::error::{FimError, Result};

pub type CMatrix = DMatrix<Complex64>;
pub type CVector = DVector<Complex64>;

const ZERO: Complex64 = Complex64 { re: 0.0, im: 0.0 };

/// `sum |v_i|^2`.
pub fn norm_sqr(v: &[Complex64]) -> f64 {
    v.iter().map(|c| c.norm_sqr()).sum()
}

/// `a^H b`.
#[inline]
pub fn dot_h(a: &[Complex64], b: &[Complex64]) -> Complex64 {
    let mut re = 0.0;
    let mut im = 0.0;
    for (x, y) in a.iter().zip(b) {
        re += x.re * y.re + x.im * y.im;
        im += x.re * y.im - x.im * y.re;
    }
    Complex64::new(re, im)
}

/// `y += s * x`.
#[inline]
pub fn axpy(s: Complex64, x: &[Complex64], y: &mut [Complex64]) {
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += s * xi;
    }
}

/// Column `j` of a column-major matrix as a slice.
#[inline]
pub fn col(m: &CMatrix, j: usize) -> &[Complex64] {
    let r = m.nrows();
    &m.as_slice()[j * r..(j + 1) * r]
}

/// `Phi * v`.
pub fn mat_vec(m: &CMatrix, v: &[Complex64]) -> Vec<Complex64> {
    let mut out = vec![ZERO; m.nrows()];
    for (j, &vj) in v.iter().enumerate() {
        if vj != ZERO {
            axpy(vj, col(m, j), &mut out);
        }
    }
    out
}

/// `Phi^H v`.
pub fn mat_h_vec(m: &CMatrix, v: &[Complex64]) -> Vec<Complex64> {
    (0..m.ncols()).map(|j| dot_h(col(m, j), v)).collect()
}

/// Gram block `Phi_S^H Phi_S` for the column subset `cols` (column-major, `k x k`).
pub fn gram_block(m: &CMatrix, cols: &[usize]) -> Vec<Complex64> {
    let k = cols.len();
    let mut g = vec![ZERO; k * k];
    for (b, &cb) in cols.iter().enumerate() {
        for (a, &ca) in cols.iter().enumerate().skip(b) {
            let v = dot_h(col(m, ca), col(m, cb));
            g[a + b * k] = v;
            g[b + a * k] = v.conj();
        }
    }
    g
}

/// In-place lower Cholesky of a Hermitian matrix stored column-major.
/// The strict upper triangle is left untouched.
fn cholesky_in_place(a: &mut [Complex64], n: usize) -> bool {
    for j in 0..n {
        for k in 0..j {
            let c = a[j + k * n].conj();
            if c == ZERO {
                continue;
            }
            let (done, rest) = a.split_at_mut(j * n);
            let src = &done[k * n + j..k * n + n];
            for (dst, s) in rest[j..n].iter_mut().zip(src) {
                *dst -= s * c;
            }
        }
        let d = a[j + j * n].re;
        if !(d > 0.0) || !d.is_finite() {
            return false;
        }
        let d = d.sqrt();
        a[j + j * n] = Complex64::new(d, 0.0);
        let inv = 1.0 / d;
        for v in &mut a[j * n + j + 1..(j + 1) * n] {
            *v *= inv;
        }
    }
    true
}

/// Solves `L x = b` in place (lower-triangular, column-major).
fn forward_subst(l: &[Complex64], n: usize, x: &mut [Complex64]) {
    for j in 0..n {
        let xj = x[j] / l[j + j * n].re;
        x[j] = xj;
        for i in (j + 1)..n {
            x[i] -= l[i + j * n] * xj;
        }
    }
}

/// Solves `L^H x = b` in place.
fn backward_subst_h(l: &[Complex64], n: usize, x: &mut [Complex64]) {
    for j in (0..n).rev() {
        let mut s = x[j];
        for i in (j + 1)..n {
            s -= l[i + j * n].conj() * x[i];
        }
        x[j] = s / l[j + j * n].re;
    }
}

/// Gaussian posterior of one block of coefficients.
#[derive(Debug, Clone)]
pub struct BlockPosterior {
    pub mean: Vec<Complex64>,
    /// Diagonal of the block covariance.
    pub cov_diag: Vec<f64>,
    /// `Tr(Gram * Sigma)` for the block.
    pub trace_gram_cov: f64,
    /// Diagonal loading that had to be added for the factorization (usually 0).
    pub jitter: f64,
}

/// Posterior of a coefficient block under precision `noise_prec * Gram + diag(rho)`:
///
/// ```text
/// Sigma = (noise_prec * Gram + diag(rho))^-1
/// mu    = noise_prec * Sigma * rhs
/// ```
///
/// with `rhs = Phi_block^H r`.
pub fn block_posterior(gram: &[Complex64], rho: &[f64], noise_prec: f64, rhs: &[Complex64]) -> Result<BlockPosterior> {
    let n = rho.len();
    debug_assert_eq!(gram.len(), n * n);
    debug_assert_eq!(rhs.len(), n);
    if n == 0 {
        return Ok(BlockPosterior { mean: vec![], cov_diag: vec![], trace_gram_cov: 0.0, jitter: 0.0 });
    }
    let build = |jitter: f64| {
        let mut a: Vec<Complex64> = gram.iter().map(|g| g * noise_prec).collect();
        for i in 0..n {
            a[i + i * n] = Complex64::new(a[i + i * n].re + rho[i] + jitter, 0.0);
        }
        a
    };
    let mut jitter = 0.0;
    let mut a = build(0.0);
    if !cholesky_in_place(&mut a, n) {
        let scale = (0..n).map(|i| noise_prec * gram[i + i * n].re + rho[i]).fold(0.0, f64::max).max(f64::MIN_POSITIVE);
        let mut ok = false;
        for p in [-14, -12, -10, -8, -6] {
            jitter = scale * 10f64.powi(p);
            a = build(jitter);
            if cholesky_in_place(&mut a, n) {
                ok = true;
                break;
            }
        }
        if !ok {
            return Err(FimError::Conditioning(format!("block of size {n} is not positive definite after diagonal loading")));
        }
    }
    let mut mean: Vec<Complex64> = rhs.iter().map(|v| v * noise_prec).collect();
    forward_subst(&a, n, &mut mean);
    backward_subst_h(&a, n, &mut mean);

    // diag(A^-1) = squared column norms of L^-1
    let mut cov_diag = vec![0.0; n];
    let mut e = vec![ZERO; n];
    for i in 0..n {
        e.fill(ZERO);
        e[i] = Complex64::new(1.0, 0.0);
        let mut acc = 0.0;
        for j in i..n {
            let xj = e[j] / a[j + j * n].re;
            e[j] = xj;
            acc += xj.norm_sqr();
            if xj != ZERO {
                for (er, l) in e[j + 1..n].iter_mut().zip(&a[j * n + j + 1..(j + 1) * n]) {
                    *er -= l * xj;
                }
            }
        }
        cov_diag[i] = acc;
    }
    // noise_prec * Gram = A - diag(rho) - jitter I  =>  Tr(Gram Sigma) = (n - sum (rho_i + jitter) Sigma_ii) / noise_prec
    let loaded: f64 = rho.iter().zip(&cov_diag).map(|(r, s)| (r + jitter) * s).sum();
    let trace_gram_cov = ((n as f64 - loaded) / noise_prec).max(0.0);
    Ok(BlockPosterior { mean, cov_diag, trace_gram_cov, jitter })
}

/// Least squares on a column subset by Householder QR, falling back to
/// diagonally loaded normal equations when the subset is rank deficient.
/// Returns the coefficients and whether loading was needed.
pub fn least_squares_subset(m: &CMatrix, cols: &[usize], y: &[Complex64]) -> Result<(Vec<Complex64>, bool)> {
    let k = cols.len();
    if k == 0 {
        return Ok((vec![], false));
    }
    if y.len() != m.nrows() {
        return Err(FimError::DimensionMismatch { what: "observation length", expected: m.nrows(), got: y.len() });
    }
    if k <= m.nrows() {
        let sub = CMatrix::from_fn(m.nrows(), k, |r, c| m[(r, cols[c])]);
        let qr = sub.qr();
        let r = qr.r();
        let diag_max = (0..k).map(|i| r[(i, i)].norm()).fold(0.0, f64::max);
        if diag_max > 0.0 && (0..k).all(|i| r[(i, i)].norm() > 1e-10 * diag_max) {
            let qty = qr.q().adjoint() * CVector::from_column_slice(y);
            if let Some(x) = r.solve_upper_triangular(&qty) {
                return Ok((x.iter().copied().collect(), false));
            }
        }
    }
    let gram = gram_block(m, cols);
    let rhs: Vec<Complex64> = cols.iter().map(|&c| dot_h(col(m, c), y)).collect();
    let scale = (0..k).map(|i| gram[i + i * k].re).fold(0.0, f64::max).max(f64::MIN_POSITIVE);
    for p in [-10, -8, -6, -4] {
        let mut a = gram.clone();
        for i in 0..k {
            a[i + i * k].re += scale * 10f64.powi(p);
        }
        if cholesky_in_place(&mut a, k) {
            let mut x = rhs.clone();
            forward_subst(&a, k, &mut x);
            backward_subst_h(&a, k, &mut x);
            return Ok((x, true));
        }
    }
    Err(FimError::Conditioning("least-squares subset is numerically singular".into()))
}

/// Largest singular value squared of `m`, by power iteration on `m^H m`.
pub fn spectral_norm_sqr(m: &CMatrix, iterations: usize) -> f64 {
    let g = m.ncols();
    if g == 0 || m.nrows() == 0 {
        return 0.0;
    }
    let mut v = vec![Complex64::new(1.0 / (g as f64).sqrt(), 0.0); g];
    let mut lambda = 0.0;
    for _ in 0..iterations.max(1) {
        let w = mat_h_vec(m, &mat_vec(m, &v));
        let nw = norm_sqr(&w).sqrt();
        if nw == 0.0 {
            return 0.0;
        }
        let prev = lambda;
        lambda = nw;
        v = w.into_iter().map(|c| c / nw).collect();
        if (lambda - prev).abs() <= 1e-12 * lambda {
            break;
        }
    }
    lambda
}
