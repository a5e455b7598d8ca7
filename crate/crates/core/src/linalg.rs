//! Small complex-matrix helpers shared by the precoding, rate, and optimizer
//! modules. Everything operates on `DMatrix<Complex64>`.

use nalgebra::{Cholesky, DMatrix, Dyn};
use num_complex::Complex64;

use crate::error::{Result, SimError};

pub type CMat = DMatrix<Complex64>;

/// Symmetrizes rounding noise: returns `(m + m^H) / 2`.
///
/// Covariance-type matrices are Hermitian in exact arithmetic; the averaged
/// form keeps Cholesky happy when accumulated products drift by a few ulps.
pub fn hermitian_part(m: &CMat) -> CMat {
    let mh = m.adjoint();
    (m + mh).scale(0.5)
}

/// Cholesky factorization of a Hermitian positive-definite matrix, with a
/// descriptive error instead of a bare `None`.
pub fn cholesky(m: &CMat, what: &str) -> Result<Cholesky<Complex64, Dyn>> {
    Cholesky::new(hermitian_part(m)).ok_or_else(|| {
        SimError::RankDeficient(format!(
            "{what} ({}x{}) is not positive definite",
            m.nrows(),
            m.ncols()
        ))
    })
}

/// Natural log of the determinant of a Hermitian positive-definite matrix,
/// computed from the Cholesky factor (2 * sum of log diagonal entries).
pub fn logdet_hermitian(m: &CMat, what: &str) -> Result<f64> {
    let chol = cholesky(m, what)?;
    let l = chol.l();
    let mut acc = 0.0_f64;
    for i in 0..l.nrows() {
        let d = l[(i, i)].re;
        if !(d > 0.0) || !d.is_finite() {
            return Err(SimError::RankDeficient(format!(
                "{what}: non-positive Cholesky pivot {d} at index {i}"
            )));
        }
        acc += d.ln();
    }
    Ok(2.0 * acc)
}

/// True when every entry is finite.
pub fn all_finite(m: &CMat) -> bool {
    m.iter().all(|z| z.re.is_finite() && z.im.is_finite())
}

/// In-place `y += alpha * x` for equally shaped matrices.
pub fn accumulate_scaled(y: &mut CMat, alpha: Complex64, x: &CMat) {
    debug_assert_eq!(y.shape(), x.shape());
    y.zip_apply(x, |yv, xv| *yv += alpha * xv);
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn c(re: f64, im: f64) -> Complex64 {
        Complex64::new(re, im)
    }

    #[test]
    fn logdet_matches_closed_form_on_diagonal_matrix() {
        let m = CMat::from_diagonal(&nalgebra::DVector::from_vec(vec![
            c(2.0, 0.0),
            c(0.5, 0.0),
            c(4.0, 0.0),
        ]));
        let ld = logdet_hermitian(&m, "diag").unwrap();
        assert_relative_eq!(ld, (2.0f64 * 0.5 * 4.0).ln(), max_relative = 1e-14);
    }

    #[test]
    fn logdet_rejects_singular_matrix() {
        let m = CMat::zeros(2, 2);
        assert!(logdet_hermitian(&m, "zeros").is_err());
    }

    #[test]
    fn hermitian_part_fixes_rounding_asymmetry() {
        let mut m = CMat::identity(2, 2);
        m[(0, 1)] = c(1.0, 2.0);
        m[(1, 0)] = c(1.0, -2.0 + 1e-18);
        let h = hermitian_part(&m);
        assert_eq!(h[(0, 1)], h[(1, 0)].conj());
    }

    #[test]
    fn accumulate_scaled_matches_explicit_sum() {
        let x = CMat::from_fn(3, 2, |i, j| c(i as f64, j as f64 + 0.5));
        let mut y = CMat::from_fn(3, 2, |i, j| c(j as f64 - 1.0, i as f64));
        let expect = &y + x.scale(2.5);
        accumulate_scaled(&mut y, c(2.5, 0.0), &x);
        assert_relative_eq!((y - expect).norm(), 0.0, epsilon = 1e-15);
    }
}
