//! Small dense complex linear-algebra helpers shared by the propagators.

use nalgebra::{Complex, DMatrix, Schur};

pub type C64 = Complex<f64>;
pub type CMat = DMatrix<C64>;

pub const ZERO: C64 = C64 { re: 0.0, im: 0.0 };
pub const ONE: C64 = C64 { re: 1.0, im: 0.0 };
pub const I: C64 = C64 { re: 0.0, im: 1.0 };

pub fn c(re: f64, im: f64) -> C64 {
    C64::new(re, im)
}

/// Largest entry modulus.
pub fn max_abs(m: &CMat) -> f64 {
    m.iter().fold(0.0, |acc, z| acc.max(z.norm()))
}

/// Frobenius norm.
pub fn fro(m: &CMat) -> f64 {
    m.iter().map(|z| z.norm_sqr()).sum::<f64>().sqrt()
}

/// Row-major vectorization: entry `(i, j)` goes to `i * ncols + j`.
pub fn vec_row_major(m: &CMat) -> nalgebra::DVector<C64> {
    let (r, c) = m.shape();
    nalgebra::DVector::from_fn(r * c, |k, _| m[(k / c, k % c)])
}

pub fn unvec_row_major(v: &[C64], rows: usize, cols: usize) -> CMat {
    CMat::from_fn(rows, cols, |i, j| v[i * cols + j])
}

/// Eigenvalues of a general complex matrix via the complex Schur form.
pub fn eigenvalues(m: &CMat) -> Option<Vec<C64>> {
    let schur = Schur::try_new(m.clone(), f64::EPSILON, 10_000)?;
    let (_, t) = schur.unpack();
    Some((0..t.nrows()).map(|i| t[(i, i)]).collect())
}

/// Eigenvalue with the largest real part.
pub fn rightmost_eigenvalue(m: &CMat) -> Option<C64> {
    eigenvalues(m)?
        .into_iter()
        .max_by(|a, b| a.re.partial_cmp(&b.re).unwrap_or(std::cmp::Ordering::Equal))
}

/// Matrix exponential. Scaling and squaring with a [13/13] Padé approximant.
pub fn expm(m: &CMat) -> CMat {
    m.exp()
}
