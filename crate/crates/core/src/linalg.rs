//! Small dense linear-algebra helpers shared by the solvers.

use crate::error::{MomError, Result};
use nalgebra::{Cholesky, DMatrix, DVector, Dyn};
use std::cell::Cell;

/// Relative pivot below which a Cholesky factor is treated as singular.
pub const PIVOT_TOL: f64 = 1e-12;

/// Relative ridge added once when a factorization fails.
pub const RIDGE: f64 = 1e-10;

fn checked_cholesky(m: &DMatrix<f64>) -> Option<Cholesky<f64, Dyn>> {
    let scale = m.diagonal().iter().fold(0.0_f64, |acc, v| acc.max(v.abs()));
    if !(scale > 0.0) || !scale.is_finite() {
        return None;
    }
    let chol = Cholesky::new(m.clone())?;
    let l = chol.l_dirty();
    let min_pivot = (0..m.nrows()).map(|i| l[(i, i)] * l[(i, i)]).fold(f64::INFINITY, f64::min);
    (min_pivot >= PIVOT_TOL * scale).then_some(chol)
}

thread_local! {
    static FACTORIZATIONS: Cell<usize> = const { Cell::new(0) };
}

/// Number of [`spd_factor`] calls made on this thread so far.
pub fn factorization_count() -> usize {
    FACTORIZATIONS.with(Cell::get)
}

/// Factor a symmetric positive-definite matrix, adding `RIDGE * trace / r` to
/// the diagonal and retrying once if the first attempt fails.
pub fn spd_factor(m: &DMatrix<f64>) -> Result<Cholesky<f64, Dyn>> {
    FACTORIZATIONS.with(|c| c.set(c.get() + 1));
    if let Some(chol) = checked_cholesky(m) {
        return Ok(chol);
    }
    let r = m.nrows().max(1) as f64;
    let mut ridge = RIDGE * m.trace().abs() / r;
    if !(ridge > 0.0) {
        ridge = RIDGE;
    }
    let mut damped = m.clone();
    for i in 0..m.nrows() {
        damped[(i, i)] += ridge;
    }
    checked_cholesky(&damped).ok_or_else(|| {
        MomError::Conditioning(format!(
            "{}x{} normal matrix is singular or indefinite after ridge {ridge:e}",
            m.nrows(),
            m.ncols()
        ))
    })
}

pub fn spd_solve(m: &DMatrix<f64>, rhs: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    Ok(spd_factor(m)?.solve(rhs))
}

pub fn spd_solve_vec(m: &DMatrix<f64>, rhs: &DVector<f64>) -> Result<DVector<f64>> {
    Ok(spd_factor(m)?.solve(rhs))
}

/// Relative asymmetry `max |m_ij - m_ji| / max |m_ij|`.
pub fn asymmetry(m: &DMatrix<f64>) -> f64 {
    let scale = m.amax();
    if scale == 0.0 {
        return 0.0;
    }
    (m - m.transpose()).amax() / scale
}

/// Euclidean projection of `v` onto the probability simplex (sort-based).
pub fn project_simplex(v: &DVector<f64>) -> DVector<f64> {
    let mut u: Vec<f64> = v.iter().copied().collect();
    u.sort_by(|a, b| b.partial_cmp(a).unwrap_or(std::cmp::Ordering::Equal));
    let mut cumsum = 0.0;
    let mut theta = 0.0;
    for (i, &ui) in u.iter().enumerate() {
        cumsum += ui;
        let t = (cumsum - 1.0) / (i + 1) as f64;
        if ui - t > 0.0 {
            theta = t;
        }
    }
    v.map(|x| (x - theta).max(0.0))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn simplex_projection_known_values() {
        let p = project_simplex(&DVector::from_vec(vec![2.0, 0.0]));
        assert_eq!(p.as_slice(), &[1.0, 0.0]);
        let p = project_simplex(&DVector::from_vec(vec![0.5, 0.5]));
        assert_eq!(p.as_slice(), &[0.5, 0.5]);
        let p = project_simplex(&DVector::from_vec(vec![0.3, 0.3, 0.0]));
        assert!((p.sum() - 1.0).abs() < 1e-15);
        assert!((p[0] - (0.3 + 0.4 / 3.0)).abs() < 1e-15);
        let p = project_simplex(&DVector::from_vec(vec![0.9, 0.9, 0.0]));
        assert!((p[0] - 0.5).abs() < 1e-15 && p[2] == 0.0);
    }

    #[test]
    fn ridge_rescues_rank_deficient_psd() {
        let m = DMatrix::from_row_slice(2, 2, &[1.0, 1.0, 1.0, 1.0]);
        let x = spd_solve_vec(&m, &DVector::from_vec(vec![2.0, 2.0])).unwrap();
        assert!(((&m * &x)[0] - 2.0).abs() < 1e-6);
    }

    #[test]
    fn indefinite_matrix_is_rejected() {
        let m = DMatrix::from_row_slice(2, 2, &[1.0, 0.0, 0.0, -1.0]);
        assert!(matches!(
            spd_factor(&m),
            Err(MomError::Conditioning(_))
        ));
    }
}
