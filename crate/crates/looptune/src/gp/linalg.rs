//! Cholesky machinery for jittered covariance matrices.
//!
//! Conditioning keeps a lower-triangular factor of `K + (noise + jitter) I`.
//! The factor can be extended in place when rows are appended, which costs
//! O(n^2 m) instead of refactoring from scratch. The factorization and the
//! multi-column solve are blocked so the heavy lifting runs through matrix
//! products instead of strided scalar loops; nalgebra stores column-major,
//! and the scalar loops here all walk down columns.

use nalgebra::DMatrix;

use crate::{Error, Result};

/// Relative jitter ladder: multiples of the signal variance tried in order
/// until the factorization succeeds.
const JITTER_START_REL: f64 = 1e-10;
const JITTER_MAX_REL: f64 = 1e-4;

/// Panel width for the blocked factorization and solves.
const NB: usize = 64;

/// In-place lower Cholesky of a symmetric matrix, reading only the lower
/// triangle. Returns false when a pivot is not positive. Right-looking and
/// blocked: the trailing matrix is updated with rank-NB products.
fn cholesky_in_place(a: &mut DMatrix<f64>) -> bool {
    let n = a.nrows();
    let mut k = 0;
    while k < n {
        let b = NB.min(n - k);
        // Factor the diagonal block with scalar column sweeps.
        for j in k..k + b {
            let mut d = a[(j, j)];
            for t in k..j {
                d -= a[(j, t)] * a[(j, t)];
            }
            if !(d > 0.0) || !d.is_finite() {
                return false;
            }
            let d = d.sqrt();
            a[(j, j)] = d;
            for i in (j + 1)..(k + b) {
                let mut s = a[(i, j)];
                for t in k..j {
                    s -= a[(i, t)] * a[(j, t)];
                }
                a[(i, j)] = s / d;
            }
        }
        let of = k + b;
        let m = n - of;
        if m > 0 {
            // Panel solve: X = A[of.., k..k+b] L_kk^{-T}, column sweep.
            for j in k..k + b {
                for t in k..j {
                    let f = a[(j, t)];
                    if f != 0.0 {
                        for i in of..n {
                            let v = a[(i, t)] * f;
                            a[(i, j)] -= v;
                        }
                    }
                }
                let d = a[(j, j)];
                for i in of..n {
                    a[(i, j)] /= d;
                }
            }
            // Trailing update T -= X X^T, lower trapezoid only, via gemm on
            // column blocks. The panel is copied once to avoid aliasing.
            let xs = a.view((of, k), (m, b)).into_owned();
            let mut j = 0;
            while j < m {
                let bj = NB.min(m - j);
                let mut target = a.view_mut((of + j, of + j), (m - j, bj));
                target.gemm(-1.0, &xs.rows(j, m - j), &xs.rows(j, bj).transpose(), 1.0);
                j += bj;
            }
        }
        k += b;
    }
    // Zero the strict upper triangle so the factor can be used directly.
    for j in 1..n {
        for i in 0..j {
            a[(i, j)] = 0.0;
        }
    }
    true
}

/// Lower-triangular factor of `K + (noise + jitter) I` together with the
/// jitter that made it succeed.
#[derive(Debug)]
pub(crate) struct JitteredChol {
    pub l: DMatrix<f64>,
    /// Absolute jitter added to the diagonal (on top of the noise variance).
    pub jitter: f64,
}

/// Factor `gram + noise I`, escalating jitter from `1e-10 * signal_variance`
/// by factors of ten up to `1e-4 * signal_variance`.
pub(crate) fn factor(
    gram: &DMatrix<f64>,
    noise_var: f64,
    signal_variance: f64,
) -> Result<JitteredChol> {
    let mut rel = JITTER_START_REL;
    loop {
        let jitter = rel * signal_variance;
        let mut a = gram.clone();
        for i in 0..a.nrows() {
            a[(i, i)] += noise_var + jitter;
        }
        if cholesky_in_place(&mut a) {
            return Ok(JitteredChol { l: a, jitter });
        }
        if rel >= JITTER_MAX_REL {
            return Err(Error::numerical(format!(
                "covariance factorization failed for a {n} x {n} matrix even \
                 with jitter {jitter:.3e} (noise variance {noise_var:.3e})",
                n = gram.nrows(),
            )));
        }
        rel *= 10.0;
    }
}

/// Solve `L x = b` for one column, forward substitution over columns of `L`.
pub(crate) fn solve_lower(l: &DMatrix<f64>, b: &mut [f64]) {
    let n = l.nrows();
    debug_assert_eq!(b.len(), n);
    let ls = l.as_slice();
    for k in 0..n {
        let col = &ls[k * n..(k + 1) * n];
        let xk = b[k] / col[k];
        b[k] = xk;
        if xk != 0.0 {
            for i in (k + 1)..n {
                b[i] -= col[i] * xk;
            }
        }
    }
}

/// Solve `L^T x = b` for one column, backward substitution; each step is a
/// contiguous dot product with one column of `L`.
pub(crate) fn solve_lower_transpose(l: &DMatrix<f64>, b: &mut [f64]) {
    let n = l.nrows();
    debug_assert_eq!(b.len(), n);
    let ls = l.as_slice();
    for i in (0..n).rev() {
        let col = &ls[i * n..(i + 1) * n];
        let mut s = b[i];
        for k in (i + 1)..n {
            s -= col[k] * b[k];
        }
        b[i] = s / col[i];
    }
}

/// Solve `L X = B` in place for a dense block of right-hand sides. Blocked:
/// `L` is read once per panel instead of once per column.
pub(crate) fn solve_lower_multi(l: &DMatrix<f64>, x: &mut DMatrix<f64>) {
    let n = l.nrows();
    let cols = x.ncols();
    debug_assert_eq!(x.nrows(), n);
    let mut k = 0;
    while k < n {
        let b = NB.min(n - k);
        for j in 0..cols {
            for t in k..k + b {
                let xt = x[(t, j)] / l[(t, t)];
                x[(t, j)] = xt;
                if xt != 0.0 {
                    for p in (t + 1)..(k + b) {
                        x[(p, j)] -= l[(p, t)] * xt;
                    }
                }
            }
        }
        let of = k + b;
        let m = n - of;
        if m > 0 {
            let xtop = x.view((k, 0), (b, cols)).into_owned();
            let mut xbot = x.view_mut((of, 0), (m, cols));
            xbot.gemm(-1.0, &l.view((of, k), (m, b)), &xtop, 1.0);
        }
        k += b;
    }
}

/// Extend a factor of `K + sigma^2 I` after appending `m` rows.
///
/// `cross` is the n x m covariance between old and new points, `block` the
/// m x m covariance among the new points. The same diagonal lift (noise plus
/// the factor's original jitter) is applied to the new block. Returns the log
/// determinant of `S + sigma_eff^2 I` where `S` is the posterior covariance
/// of the new batch, which the caller folds into its information-gain sum.
pub(crate) fn append(
    chol: &mut JitteredChol,
    cross: &DMatrix<f64>,
    block: &DMatrix<f64>,
    noise_var: f64,
) -> Result<f64> {
    let n = chol.l.nrows();
    let m = block.nrows();
    debug_assert_eq!(cross.nrows(), n);
    debug_assert_eq!(cross.ncols(), m);

    let mut x = cross.clone();
    solve_lower_multi(&chol.l, &mut x);

    // Schur complement S = B - X^T X plus the diagonal lift.
    let mut s = block.clone();
    s.gemm_tr(-1.0, &x, &x, 1.0);
    for a in 0..m {
        s[(a, a)] += noise_var + chol.jitter;
    }
    if !cholesky_in_place(&mut s) {
        return Err(Error::numerical(format!(
            "appending {m} rows to a {n}-row factor lost positive definiteness"
        )));
    }
    let logdet_lifted = 2.0 * (0..m).map(|i| s[(i, i)].ln()).sum::<f64>();

    let mut grown = DMatrix::zeros(n + m, n + m);
    grown.view_mut((0, 0), (n, n)).copy_from(&chol.l);
    grown.view_mut((n, 0), (m, n)).copy_from(&x.transpose());
    grown.view_mut((n, n), (m, m)).copy_from(&s);
    chol.l = grown;
    Ok(logdet_lifted)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    fn spd(n: usize, seed: u64) -> DMatrix<f64> {
        // A = B B^T + n I with deterministic pseudo-entries.
        let mut b = DMatrix::zeros(n, n);
        let mut s = seed;
        for i in 0..n {
            for j in 0..n {
                s = crate::seeding::splitmix64(s);
                b[(i, j)] = (s >> 11) as f64 / (1u64 << 53) as f64 - 0.5;
            }
        }
        &b * b.transpose() + DMatrix::identity(n, n) * n as f64 * 0.1
    }

    #[test]
    fn factor_reproduces_the_matrix() {
        let a = spd(12, 3);
        let chol = factor(&a, 0.25, 1.0).unwrap();
        let rebuilt = &chol.l * chol.l.transpose();
        let mut lifted = a.clone();
        for i in 0..12 {
            lifted[(i, i)] += 0.25 + chol.jitter;
        }
        assert_abs_diff_eq!((rebuilt - lifted).norm(), 0.0, epsilon = 1e-10);
    }

    #[test]
    fn blocked_factor_spans_several_panels() {
        // 150 rows forces the blocked path through multiple panels and a
        // partial final block.
        let n = 150;
        let a = spd(n, 41);
        let chol = factor(&a, 0.3, 1.0).unwrap();
        let rebuilt = &chol.l * chol.l.transpose();
        let mut lifted = a.clone();
        for i in 0..n {
            lifted[(i, i)] += 0.3 + chol.jitter;
        }
        let scale = lifted.norm();
        assert!((rebuilt - lifted).norm() <= 1e-12 * scale);
    }

    #[test]
    fn rank_deficient_matrices_factor_with_jitter() {
        // Outer product of one vector: rank one, only factorable thanks to
        // the diagonal lift.
        let v = DMatrix::from_row_slice(4, 1, &[1.0, 2.0, 3.0, 4.0]);
        let a = &v * v.transpose();
        let chol = factor(&a, 0.0, 1.0).unwrap();
        assert!(chol.jitter >= 1e-10 && chol.jitter <= 1e-4);
        let rebuilt = &chol.l * chol.l.transpose();
        assert!((rebuilt - a).norm() <= 1e-3);
    }

    #[test]
    fn indefinite_matrices_are_rejected_after_escalation() {
        let a = DMatrix::from_row_slice(2, 2, &[1.0, 0.0, 0.0, -1.0]);
        let err = factor(&a, 0.0, 1.0).unwrap_err();
        assert!(matches!(err, crate::Error::NumericalFailure(_)));
    }

    #[test]
    fn triangular_solves_invert_the_factor() {
        let a = spd(9, 7);
        let chol = factor(&a, 0.1, 1.0).unwrap();
        let b: Vec<f64> = (0..9).map(|i| (i as f64 - 4.0) * 0.3).collect();
        let mut x = b.clone();
        solve_lower(&chol.l, &mut x);
        solve_lower_transpose(&chol.l, &mut x);
        // (L L^T) x should give back b.
        let xv = DMatrix::from_column_slice(9, 1, &x);
        let back = &chol.l * (chol.l.transpose() * xv);
        for i in 0..9 {
            assert_abs_diff_eq!(back[(i, 0)], b[i], epsilon = 1e-9);
        }
    }

    #[test]
    fn multi_column_solve_matches_single_column_solve() {
        let n = 140;
        let a = spd(n, 29);
        let chol = factor(&a, 0.2, 1.0).unwrap();
        let mut rhs = DMatrix::zeros(n, 7);
        let mut s = 5u64;
        for j in 0..7 {
            for i in 0..n {
                s = crate::seeding::splitmix64(s);
                rhs[(i, j)] = (s >> 11) as f64 / (1u64 << 53) as f64 - 0.5;
            }
        }
        let mut blocked = rhs.clone();
        solve_lower_multi(&chol.l, &mut blocked);
        for j in 0..7 {
            let mut col: Vec<f64> = (0..n).map(|i| rhs[(i, j)]).collect();
            solve_lower(&chol.l, &mut col);
            for i in 0..n {
                assert_abs_diff_eq!(blocked[(i, j)], col[i], epsilon = 1e-11);
            }
        }
    }

    #[test]
    fn append_matches_refactoring_from_scratch() {
        let full = spd(10, 11);
        let noise = 0.05;
        let head = full.view((0, 0), (6, 6)).into_owned();
        let cross = full.view((0, 6), (6, 4)).into_owned();
        let block = full.view((6, 6), (4, 4)).into_owned();

        let mut inc = factor(&head, noise, 1.0).unwrap();
        append(&mut inc, &cross, &block, noise).unwrap();
        let direct = factor(&full, noise, 1.0).unwrap();
        assert_abs_diff_eq!((&inc.l - &direct.l).norm(), 0.0, epsilon = 1e-9);
    }

    #[test]
    fn append_logdet_increment_chains() {
        // Appending (3 rows, then 1) accumulates the same log determinant as
        // factoring everything at once.
        let full = spd(8, 23);
        let noise = 0.2;
        let head = full.view((0, 0), (4, 4)).into_owned();

        let mut inc = factor(&head, noise, 1.0).unwrap();
        let base_logdet: f64 = 2.0 * (0..4).map(|i| inc.l[(i, i)].ln()).sum::<f64>();
        let mut total = base_logdet;
        total += append(
            &mut inc,
            &full.view((0, 4), (4, 3)).into_owned(),
            &full.view((4, 4), (3, 3)).into_owned(),
            noise,
        )
        .unwrap();
        total += append(
            &mut inc,
            &full.view((0, 7), (7, 1)).into_owned(),
            &full.view((7, 7), (1, 1)).into_owned(),
            noise,
        )
        .unwrap();

        let direct = factor(&full, noise, 1.0).unwrap();
        let direct_logdet: f64 = 2.0 * (0..8).map(|i| direct.l[(i, i)].ln()).sum::<f64>();
        assert_abs_diff_eq!(total, direct_logdet, epsilon = 1e-9);
    }
}
