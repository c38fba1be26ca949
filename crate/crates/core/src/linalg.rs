//! Small dense linear-algebra helpers shared by the fitting and training code.
//!
//! Every normal-equation solve in the crate goes through [`solve_spd`], which
//! factors with Cholesky and logs a warning when the (diagonal-ratio) condition
//! estimate exceeds [`CONDITION_WARN`].

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};

use crate::error::{Error, Result};

/// Condition numbers above this are logged.
pub const CONDITION_WARN: f64 = 1e8;

/// Cheap lower bound on the 2-norm condition number of an SPD matrix from
/// its Cholesky factor: `(max L_ii / min L_ii)^2`.
pub fn cholesky_condition_estimate(chol: &Cholesky<f64, Dyn>) -> f64 {
    let l = chol.l_dirty();
    let n = l.nrows();
    if n == 0 {
        return 1.0;
    }
    let (mut lo, mut hi) = (f64::INFINITY, 0.0f64);
    for i in 0..n {
        let d = l[(i, i)].abs();
        lo = lo.min(d);
        hi = hi.max(d);
    }
    if lo == 0.0 {
        f64::INFINITY
    } else {
        (hi / lo).powi(2)
    }
}

/// Cholesky-factors an SPD matrix, failing with [`Error::RankDeficient`] when
/// the factorisation breaks down or the condition estimate is not finite.
pub fn factor_spd(a: DMatrix<f64>, context: &'static str) -> Result<Cholesky<f64, Dyn>> {
    let chol = a.cholesky().ok_or(Error::RankDeficient {
        context,
        condition: f64::INFINITY,
    })?;
    let condition = cholesky_condition_estimate(&chol);
    if !condition.is_finite() || condition > 1e15 {
        return Err(Error::RankDeficient { context, condition });
    }
    if condition > CONDITION_WARN {
        log::warn!("{context}: condition estimate {condition:e}");
    }
    Ok(chol)
}

/// Solves `a x = b` for SPD `a`.
pub fn solve_spd(a: DMatrix<f64>, b: &DVector<f64>, context: &'static str) -> Result<DVector<f64>> {
    Ok(factor_spd(a, context)?.solve(b))
}

/// Solves a symmetric block-tridiagonal system whose diagonal blocks are
/// `diag[f]` and whose off-diagonal blocks are all `-coupling * I`.
///
/// `rhs[f]` may carry several columns; the result has the same layout. Uses
/// block Cholesky elimination (block Thomas algorithm), so the full matrix
/// must be SPD.
pub fn solve_block_tridiagonal(
    diag: &[DMatrix<f64>],
    coupling: f64,
    rhs: &[DMatrix<f64>],
    context: &'static str,
) -> Result<Vec<DMatrix<f64>>> {
    let n = diag.first().map_or(0, |d| d.nrows());
    solve_block_tridiagonal_diag(diag, &DVector::from_element(n, coupling), rhs, context)
}

/// As [`solve_block_tridiagonal`], with off-diagonal blocks `-diag(coupling)`.
pub fn solve_block_tridiagonal_diag(
    diag: &[DMatrix<f64>],
    coupling: &DVector<f64>,
    rhs: &[DMatrix<f64>],
    context: &'static str,
) -> Result<Vec<DMatrix<f64>>> {
    let frames = diag.len();
    if rhs.len() != frames {
        return Err(Error::DimensionMismatch {
            context,
            expected: frames,
            actual: rhs.len(),
        });
    }
    if frames == 0 {
        return Ok(Vec::new());
    }
    let c = DMatrix::from_diagonal(coupling);
    let mut factors: Vec<Cholesky<f64, Dyn>> = Vec::with_capacity(frames);
    let mut y: Vec<DMatrix<f64>> = Vec::with_capacity(frames);
    for f in 0..frames {
        let (schur, r) = if f == 0 {
            (diag[0].clone(), rhs[0].clone())
        } else {
            let prev = &factors[f - 1];
            // S_f = D_f - C S_{f-1}^{-1} C;  y_f = r_f + C S_{f-1}^{-1} y_{f-1}.
            let schur = &diag[f] - &c * prev.solve(&c);
            let carry = &c * prev.solve(&y[f - 1]);
            (schur, &rhs[f] + carry)
        };
        factors.push(factor_spd(schur, context)?);
        y.push(r);
    }
    let mut x: Vec<DMatrix<f64>> = vec![DMatrix::zeros(0, 0); frames];
    x[frames - 1] = factors[frames - 1].solve(&y[frames - 1]);
    for f in (0..frames - 1).rev() {
        let r = &y[f] + &c * &x[f + 1];
        x[f] = factors[f].solve(&r);
    }
    Ok(x)
}

/// Largest absolute entry of `QᵀQ - I`.
pub fn orthonormality_defect(q: &DMatrix<f64>) -> f64 {
    let gram = q.transpose() * q;
    let n = gram.nrows();
    let mut worst = 0.0f64;
    for i in 0..n {
        for j in 0..n {
            let target = if i == j { 1.0 } else { 0.0 };
            worst = worst.max((gram[(i, j)] - target).abs());
        }
    }
    worst
}

/// Ratio of extreme singular values; infinite when the smallest is zero.
pub fn condition_number(a: &DMatrix<f64>) -> f64 {
    let sv = a.singular_values();
    let hi = sv.iter().cloned().fold(0.0f64, f64::max);
    let lo = sv.iter().cloned().fold(f64::INFINITY, f64::min);
    if lo <= 0.0 {
        f64::INFINITY
    } else {
        hi / lo
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn dense_block_tridiagonal(diag: &[DMatrix<f64>], coupling: f64) -> DMatrix<f64> {
        let m = diag[0].nrows();
        let n = diag.len() * m;
        let mut a = DMatrix::zeros(n, n);
        for (f, d) in diag.iter().enumerate() {
            a.view_mut((f * m, f * m), (m, m)).copy_from(d);
            if f + 1 < diag.len() {
                for i in 0..m {
                    a[(f * m + i, (f + 1) * m + i)] = -coupling;
                    a[((f + 1) * m + i, f * m + i)] = -coupling;
                }
            }
        }
        a
    }

    #[test]
    fn block_tridiagonal_matches_dense_solve() {
        let m = 3;
        let diag: Vec<DMatrix<f64>> = (0..5)
            .map(|f| {
                let b = DMatrix::from_fn(m, m, |i, j| ((i * 7 + j * 3 + f) % 5) as f64 * 0.1);
                &b * b.transpose() + DMatrix::identity(m, m) * 3.0
            })
            .collect();
        let rhs: Vec<DMatrix<f64>> = (0..5)
            .map(|f| DMatrix::from_fn(m, 2, |i, j| (i + 2 * j + f) as f64 - 2.0))
            .collect();
        let x = solve_block_tridiagonal(&diag, 0.7, &rhs, "test").unwrap();

        let a = dense_block_tridiagonal(&diag, 0.7);
        let mut b = DMatrix::zeros(15, 2);
        for (f, r) in rhs.iter().enumerate() {
            b.view_mut((f * m, 0), (m, 2)).copy_from(r);
        }
        let dense = a.lu().solve(&b).unwrap();
        for (f, xf) in x.iter().enumerate() {
            let want = dense.view((f * m, 0), (m, 2));
            assert!((xf - want).abs().max() < 1e-12);
        }
    }

    #[test]
    fn singular_spd_is_rank_deficient() {
        let a = DMatrix::from_row_slice(2, 2, &[1.0, 1.0, 1.0, 1.0]);
        let err = solve_spd(a, &DVector::from_vec(vec![1.0, 1.0]), "test").unwrap_err();
        assert!(matches!(err, Error::RankDeficient { .. }));
    }
}
