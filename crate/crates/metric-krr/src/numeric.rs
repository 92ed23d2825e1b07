//! Deterministic reductions and small dense helpers.
//!
//! Every double sum in the crate goes through [`double_sum`]: row partials
//! are computed independently (possibly on several threads) and then combined
//! by a fixed pairwise tree, so the result does not depend on the number of
//! workers.

use faer::{Mat, Side};
use rayon::prelude::*;

use crate::error::{Error, Result};

const LEAF: usize = 16;

/// Pairwise (cascade) summation with a fixed tree shape.
pub fn pairwise_sum(v: &[f64]) -> f64 {
    if v.len() <= LEAF {
        return v.iter().sum();
    }
    let mid = v.len() / 2;
    pairwise_sum(&v[..mid]) + pairwise_sum(&v[mid..])
}

pub fn sum_by<F: Fn(usize) -> f64>(n: usize, f: F) -> f64 {
    let v: Vec<f64> = (0..n).map(f).collect();
    pairwise_sum(&v)
}

/// `Σ_i Σ_j term(i, j)` with rows in parallel and a fixed reduction order.
pub fn double_sum<F>(n: usize, term: F) -> f64
where
    F: Fn(usize, usize) -> f64 + Sync,
{
    let rows: Vec<f64> = (0..n)
        .into_par_iter()
        .map(|i| sum_by(n, |j| term(i, j)))
        .collect();
    pairwise_sum(&rows)
}

/// Accumulates a `k`-vector per row and reduces the rows pairwise, entry by
/// entry. Used for tensor-valued double sums.
pub fn vector_row_sum<F>(n: usize, k: usize, row: F) -> Vec<f64>
where
    F: Fn(usize) -> Vec<f64> + Sync + Send,
{
    let rows: Vec<Vec<f64>> = (0..n).into_par_iter().map(&row).collect();
    (0..k)
        .map(|e| {
            let col: Vec<f64> = rows.iter().map(|r| r[e]).collect();
            pairwise_sum(&col)
        })
        .collect()
}

pub fn frobenius(a: &Mat<f64>) -> f64 {
    let mut s = 0.0;
    for j in 0..a.ncols() {
        for i in 0..a.nrows() {
            s += a[(i, j)] * a[(i, j)];
        }
    }
    s.sqrt()
}

/// Frobenius pairing `Σ a_ij b_ij`.
pub fn pairing(a: &Mat<f64>, b: &Mat<f64>) -> f64 {
    let mut s = 0.0;
    for j in 0..a.ncols() {
        for i in 0..a.nrows() {
            s += a[(i, j)] * b[(i, j)];
        }
    }
    s
}

pub fn symmetrize(a: &Mat<f64>) -> Mat<f64> {
    let n = a.nrows();
    Mat::from_fn(n, n, |i, j| 0.5 * (a[(i, j)] + a[(j, i)]))
}

/// Eigen-decomposition of a symmetric matrix, eigenvalues ascending.
pub fn sym_eigen(a: &Mat<f64>) -> Result<(Vec<f64>, Mat<f64>)> {
    let n = a.nrows();
    if n == 0 {
        return Ok((Vec::new(), Mat::zeros(0, 0)));
    }
    let evd = symmetrize(a)
        .self_adjoint_eigen(Side::Lower)
        .map_err(|e| Error::Numeric(format!("symmetric eigensolver failed: {e:?}")))?;
    let s = evd.S().column_vector();
    let vals = (0..n).map(|i| s[i]).collect();
    Ok((vals, evd.U().to_owned()))
}

/// `V diag(f(λ)) Vᵀ` for a symmetric matrix.
pub fn sym_apply<F: Fn(f64) -> f64>(a: &Mat<f64>, f: F) -> Result<Mat<f64>> {
    let (vals, v) = sym_eigen(a)?;
    let n = vals.len();
    let fv: Vec<f64> = vals.iter().map(|&x| f(x)).collect();
    Ok(Mat::from_fn(n, n, |i, j| {
        (0..n).map(|k| v[(i, k)] * fv[k] * v[(j, k)]).sum()
    }))
}

pub fn to_rows(a: &Mat<f64>) -> Vec<Vec<f64>> {
    (0..a.nrows())
        .map(|i| (0..a.ncols()).map(|j| a[(i, j)]).collect())
        .collect()
}

pub fn from_rows(rows: &[Vec<f64>]) -> Result<Mat<f64>> {
    let n = rows.len();
    let m = rows.first().map_or(0, |r| r.len());
    if rows.iter().any(|r| r.len() != m) {
        return Err(Error::Invalid("ragged matrix rows".into()));
    }
    Ok(Mat::from_fn(n, m, |i, j| rows[i][j]))
}

/// Orthonormal basis (as columns) of the orthogonal complement of the column
/// span of `w` in `R^d`.
pub fn orthogonal_complement(w: &Mat<f64>, d: usize) -> Result<Mat<f64>> {
    let k = w.ncols();
    let proj = Mat::from_fn(d, d, |i, j| {
        let id = if i == j { 1.0 } else { 0.0 };
        id - (0..k).map(|c| w[(i, c)] * w[(j, c)]).sum::<f64>()
    });
    let (vals, v) = sym_eigen(&proj)?;
    let cols: Vec<usize> = (0..d).filter(|&c| vals[c] > 0.5).collect();
    Ok(Mat::from_fn(d, cols.len(), |i, c| v[(i, cols[c])]))
}

/// Greedy grouping of points whose coordinates agree within `tol` in the
/// max norm. Returns a group id per point, ids in order of first appearance.
pub fn group_points(points: &[Vec<f64>], tol: f64) -> Vec<usize> {
    let mut reps: Vec<usize> = Vec::new();
    let mut ids = Vec::with_capacity(points.len());
    for (i, p) in points.iter().enumerate() {
        let hit = reps.iter().position(|&r| {
            points[r]
                .iter()
                .zip(p)
                .all(|(a, b)| (a - b).abs() <= tol)
        });
        match hit {
            Some(g) => ids.push(g),
            None => {
                reps.push(i);
                ids.push(reps.len() - 1);
            }
        }
    }
    ids
}

/// Switches the calling thread and every thread of the current rayon pool to
/// flush subnormal floating-point results (and operands) to zero.
///
/// Gram matrices of widely spread atoms hold entries spanning hundreds of
/// orders of magnitude, and their Cholesky factors fill in with subnormals
/// that slow the factorization by up to a factor of ten. Flushing changes
/// results only below `2.2e-308`. Call once before heavy work; the setting
/// persists on those threads.
pub fn flush_subnormals_to_zero() {
    set_flush_mode();
    rayon::broadcast(|_| set_flush_mode());
}

#[cfg(all(target_arch = "x86_64", target_feature = "sse"))]
fn set_flush_mode() {
    const FTZ: u32 = 1 << 15;
    const DAZ: u32 = 1 << 6;
    let mut csr: u32 = 0;
    // SAFETY: reads and writes the SSE control register of this thread only.
    unsafe {
        std::arch::asm!("stmxcsr [{}]", in(reg) &mut csr as *mut u32, options(nostack, preserves_flags));
        csr |= FTZ | DAZ;
        std::arch::asm!("ldmxcsr [{}]", in(reg) &csr as *const u32, options(nostack, preserves_flags, readonly));
    }
}

#[cfg(target_arch = "aarch64")]
fn set_flush_mode() {
    const FZ: u64 = 1 << 24;
    // SAFETY: reads and writes the floating-point control register of this thread only.
    unsafe {
        let fpcr: u64;
        std::arch::asm!("mrs {}, fpcr", out(reg) fpcr, options(nomem, nostack, preserves_flags));
        std::arch::asm!("msr fpcr, {}", in(reg) fpcr | FZ, options(nomem, nostack, preserves_flags));
    }
}

#[cfg(not(any(all(target_arch = "x86_64", target_feature = "sse"), target_arch = "aarch64")))]
fn set_flush_mode() {}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn pairwise_matches_naive_on_integers() {
        let v: Vec<f64> = (1..=1000).map(|i| i as f64).collect();
        assert_eq!(pairwise_sum(&v), 500500.0);
    }

    #[test]
    fn double_sum_is_order_fixed() {
        let a = double_sum(37, |i, j| ((i * 31 + j * 7) as f64).sin());
        let b = double_sum(37, |i, j| ((i * 31 + j * 7) as f64).sin());
        assert_eq!(a.to_bits(), b.to_bits());
    }

    #[test]
    fn grouping_respects_tolerance() {
        let pts = vec![vec![0.0], vec![1.0], vec![1e-12], vec![1.0 + 1e-12]];
        assert_eq!(group_points(&pts, 1e-9), vec![0, 1, 0, 1]);
    }

    #[test]
    fn complement_is_orthonormal() {
        let w = Mat::from_fn(3, 1, |i, _| [1.0, 1.0, 0.0][i] / 2f64.sqrt());
        let c = orthogonal_complement(&w, 3).unwrap();
        assert_eq!(c.ncols(), 2);
        for a in 0..2 {
            let dot: f64 = (0..3).map(|i| c[(i, a)] * w[(i, 0)]).sum();
            assert!(dot.abs() < 1e-12);
            let nrm: f64 = (0..3).map(|i| c[(i, a)] * c[(i, a)]).sum();
            assert!((nrm - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn sym_apply_square_root() {
        let a = Mat::from_fn(2, 2, |i, j| [[4.0, 1.0], [1.0, 3.0]][i][j]);
        let r = sym_apply(&a, f64::sqrt).unwrap();
        let back = &r * &r;
        for i in 0..2 {
            for j in 0..2 {
                assert!((back[(i, j)] - a[(i, j)]).abs() < 1e-12);
            }
        }
    }
}
