//! Small dense linear-algebra helpers over nalgebra.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};

pub type Mat = DMatrix<f64>;
pub type Vector = DVector<f64>;

pub fn mat_from_rows(rows: &[Vec<f64>]) -> Result<Mat> {
    let r = rows.len();
    let c = rows.first().map_or(0, |v| v.len());
    if rows.iter().any(|v| v.len() != c) {
        return Err(Error::Shape("ragged matrix rows".into()));
    }
    Ok(Mat::from_fn(r, c, |i, j| rows[i][j]))
}

pub fn mat_to_rows(m: &Mat) -> Vec<Vec<f64>> {
    (0..m.nrows()).map(|i| m.row(i).iter().copied().collect()).collect()
}

pub fn max_abs_diff(a: &Mat, b: &Mat) -> f64 {
    (a - b).amax()
}

pub fn is_symmetric(m: &Mat, tol: f64) -> bool {
    m.is_square() && (m - m.transpose()).amax() <= tol * (1.0 + m.amax())
}

pub fn min_eigenvalue(sym: &Mat) -> f64 {
    let s = (sym + sym.transpose()) * 0.5;
    s.symmetric_eigenvalues().min()
}

/// Checks `m` is symmetric positive semi-definite (or definite when `strict`).
pub fn check_psd(m: &Mat, name: &str, strict: bool) -> Result<()> {
    if !m.is_square() {
        return Err(Error::Validation(format!("{name} is not square")));
    }
    if !is_symmetric(m, 1e-10) {
        return Err(Error::Validation(format!("{name} is not symmetric")));
    }
    if m.nrows() == 0 {
        return Ok(());
    }
    let lo = min_eigenvalue(m);
    let tol = 1e-10 * (1.0 + m.amax());
    if strict && lo <= 0.0 {
        return Err(Error::Validation(format!(
            "{name} must be positive definite (min eigenvalue {lo:e})"
        )));
    }
    if lo < -tol {
        return Err(Error::Validation(format!(
            "{name} must be positive semi-definite (min eigenvalue {lo:e})"
        )));
    }
    Ok(())
}

/// Solves `a x = b` for symmetric positive-definite `a`, falling back to LU.
pub fn solve_spd(a: &Mat, b: &Mat) -> Option<Mat> {
    if let Some(ch) = a.clone().cholesky() {
        return Some(ch.solve(b));
    }
    a.clone().lu().solve(b)
}

pub fn spectral_radius(a: &Mat) -> f64 {
    if a.nrows() == 0 {
        return 0.0;
    }
    a.complex_eigenvalues().iter().map(|z| z.norm()).fold(0.0, f64::max)
}

/// Lower Cholesky factor with a tiny diagonal jitter retry for PSD inputs.
pub fn psd_sqrt(m: &Mat) -> Mat {
    if let Some(ch) = m.clone().cholesky() {
        return ch.l();
    }
    // semi-definite: use the symmetric eigen square root
    let e = m.clone().symmetric_eigen();
    let d = e.eigenvalues.map(|v| v.max(0.0).sqrt());
    &e.eigenvectors * Mat::from_diagonal(&d)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn psd_checks() {
        let good = Mat::from_row_slice(2, 2, &[2.0, 1.0, 1.0, 2.0]);
        assert!(check_psd(&good, "g", true).is_ok());
        let bad = Mat::from_row_slice(2, 2, &[1.0, 2.0, 2.0, 1.0]);
        assert!(check_psd(&bad, "b", false).is_err());
        let zero = Mat::zeros(2, 2);
        assert!(check_psd(&zero, "z", false).is_ok());
        assert!(check_psd(&zero, "z", true).is_err());
    }

    #[test]
    fn sqrt_of_singular() {
        let m = Mat::from_row_slice(2, 2, &[1.0, 1.0, 1.0, 1.0]);
        let l = psd_sqrt(&m);
        assert!(max_abs_diff(&(&l * l.transpose()), &m) < 1e-12);
    }

    #[test]
    fn rotation_radius() {
        let t: f64 = 0.3;
        let a = Mat::from_row_slice(2, 2, &[t.cos(), -t.sin(), t.sin(), t.cos()]) * 0.95;
        assert!((spectral_radius(&a) - 0.95).abs() < 1e-12);
    }
}
