//! Exact kernel ridge regression on an atomic measure for a fixed metric.
//!
//! The fitted values solve `(λI + M P) f = M P y` with `P = diag(p)`. We never
//! factor that nonsymmetric matrix: it is similar to the SPD matrix
//! `A = λI + P^½ M P^½`, and with `A h = P^½ y` the representer coefficients
//! are `α = P^½ h`, the fitted values `f = M α`, and the objective
//! `𝒥 = (λ/2)|L⁻¹ P^½ y|²` where `A = L Lᵀ`. Singular Gram matrices (Σ = 0,
//! coincident atoms) need no special treatment.

use faer::linalg::solvers::Solve;
use faer::{Mat, Side};
use rayon::prelude::*;
use serde::Serialize;

use crate::error::{invalid, Error, Result};
use crate::kernel::RadialKernel;
use crate::metric::Metric;
use crate::numeric::{pairwise_sum, sym_eigen};
use crate::sample::SampleSet;

#[derive(Clone, Debug, Serialize)]
pub struct SolveResult {
    #[serde(rename = "j")]
    pub j_value: f64,
    pub fitted: Vec<f64>,
    pub residuals: Vec<f64>,
    pub h_norm_sq: f64,
    pub lambda: f64,
    /// Representer coefficients `α = p ⊙ r / λ`; `F_Σ = Σ αᵢ 𝒦(|· − aᵢ|²_Σ)`.
    #[serde(skip)]
    pub coefficients: Vec<f64>,
    #[serde(skip)]
    pub metric: Metric,
}

pub(crate) fn check_lambda(lambda: f64) -> Result<()> {
    if !(lambda > 0.0 && lambda.is_finite()) {
        return invalid(format!("lambda must be positive, got {lambda}"));
    }
    Ok(())
}

fn check_dims(s: &SampleSet, sigma: &Metric) -> Result<()> {
    if sigma.dim() != s.dim {
        return invalid(format!(
            "metric is {}x{} but samples have dimension {}",
            sigma.dim(),
            sigma.dim(),
            s.dim
        ));
    }
    Ok(())
}

/// `D_ij = (aᵢ − aⱼ)ᵀ Σ (aᵢ − aⱼ)`.
pub fn squared_distance_matrix(s: &SampleSet, sigma: &Metric) -> Result<Mat<f64>> {
    check_dims(s, sigma)?;
    let m = s.len();
    let xs = s.xs();
    let mut d = Mat::<f64>::zeros(m, m);
    d.par_col_iter_mut().enumerate().for_each(|(j, col)| {
        let col = col.try_as_col_major_mut().unwrap().as_slice_mut();
        for (i, v) in col.iter_mut().enumerate() {
            *v = if i == j { 0.0 } else { sigma.dist_sq(&xs[i], &xs[j]) };
        }
    });
    Ok(d)
}

/// `M_ij = 𝒦(D_ij)`.
pub fn gram(kernel: &RadialKernel, dist: &Mat<f64>) -> Mat<f64> {
    scaled_gram(kernel, dist, 1.0)
}

/// `M_ij = 𝒦(t·D_ij)`, sharing one distance matrix across a scalar sweep.
pub fn scaled_gram(kernel: &RadialKernel, dist: &Mat<f64>, t: f64) -> Mat<f64> {
    let m = dist.nrows();
    let mut g = Mat::<f64>::zeros(m, m);
    g.par_col_iter_mut().enumerate().for_each(|(j, col)| {
        let col = col.try_as_col_major_mut().unwrap().as_slice_mut();
        for (i, v) in col.iter_mut().enumerate() {
            *v = kernel.eval_unchecked(t * dist[(i, j)]);
        }
    });
    g
}

fn factor(a: &Mat<f64>) -> Result<faer::linalg::solvers::Llt<f64>> {
    a.llt(Side::Lower)
        .map_err(|e| Error::Numeric(format!("Cholesky factorization failed: {e:?}")))
}

/// `A = λI + P^½ M P^½`, lower triangle only.
fn system_lower(kernel: &RadialKernel, dist: &Mat<f64>, t: f64, sqrt_p: &[f64], lambda: f64) -> Mat<f64> {
    let m = dist.nrows();
    let mut a = Mat::<f64>::zeros(m, m);
    a.par_col_iter_mut().enumerate().for_each(|(j, col)| {
        let col = col.try_as_col_major_mut().unwrap().as_slice_mut();
        col[j] = lambda + sqrt_p[j] * sqrt_p[j] * kernel.eval_unchecked(0.0);
        for i in j + 1..m {
            col[i] = sqrt_p[i] * sqrt_p[j] * kernel.eval_unchecked(t * dist[(i, j)]);
        }
    });
    a
}

/// `(λ/2)|L⁻¹ P^½ y|²`, factoring `a` (lower triangle of `A`) in place so
/// that only one `m × m` buffer is ever live.
fn objective_from_system(s: &SampleSet, mut a: Mat<f64>, sqrt_p: &[f64], lambda: f64) -> Result<f64> {
    use faer::dyn_stack::{MemBuffer, MemStack};
    use faer::linalg::cholesky::llt::factor::{cholesky_in_place, cholesky_in_place_scratch};
    let m = s.len();
    let par = faer::get_global_parallelism();
    let mut mem = MemBuffer::new(cholesky_in_place_scratch::<f64>(m, par, Default::default()));
    cholesky_in_place(a.as_mut(), Default::default(), par, MemStack::new(&mut mem), Default::default())
        .map_err(|e| Error::Numeric(format!("Cholesky factorization failed: {e:?}")))?;
    let mut z = Mat::from_fn(m, 1, |i, _| sqrt_p[i] * s.atoms[i].y);
    faer::linalg::triangular_solve::solve_lower_triangular_in_place(a.as_ref(), z.as_mut(), par);
    let sq: Vec<f64> = (0..m).map(|i| z[(i, 0)] * z[(i, 0)]).collect();
    Ok(0.5 * lambda * pairwise_sum(&sq))
}

/// `𝒥(t·Σ₀; λ)` from the distance matrix of `Σ₀`, without forming fitted
/// values. This is the fast path used by sweeps.
pub fn objective_scaled(s: &SampleSet, dist: &Mat<f64>, t: f64, kernel: &RadialKernel, lambda: f64) -> Result<f64> {
    check_lambda(lambda)?;
    let sqrt_p: Vec<f64> = s.atoms.iter().map(|a| a.p.sqrt()).collect();
    let a = system_lower(kernel, dist, t, &sqrt_p, lambda);
    objective_from_system(s, a, &sqrt_p, lambda)
}

/// `𝒥(Σ; λ)` only. Builds the system directly from the atoms, so the
/// working set is a single `m × m` matrix.
pub fn objective(s: &SampleSet, sigma: &Metric, kernel: &RadialKernel, lambda: f64) -> Result<f64> {
    check_lambda(lambda)?;
    check_dims(s, sigma)?;
    let m = s.len();
    let xs = s.xs();
    let sqrt_p: Vec<f64> = s.atoms.iter().map(|a| a.p.sqrt()).collect();
    let mut a = Mat::<f64>::zeros(m, m);
    a.par_col_iter_mut().enumerate().for_each(|(j, col)| {
        let col = col.try_as_col_major_mut().unwrap().as_slice_mut();
        col[j] = lambda + sqrt_p[j] * sqrt_p[j] * kernel.eval_unchecked(0.0);
        for i in j + 1..m {
            col[i] = sqrt_p[i] * sqrt_p[j] * kernel.eval_unchecked(sigma.dist_sq(&xs[i], &xs[j]));
        }
    });
    objective_from_system(s, a, &sqrt_p, lambda)
}

/// Outcome of [`objective_cg`].
#[derive(Clone, Copy, Debug, Serialize)]
pub struct IterativeObjective {
    pub j: f64,
    pub iterations: usize,
    /// `|A h − P^½ y| / |P^½ y|` at exit.
    pub relative_residual: f64,
}

/// `𝒥(Σ; λ)` by conjugate gradients on `A h = P^½ y`, for sample sizes where a
/// dense factorization is too slow. `A` has spectrum in `[λ, λ + 𝒦(0)]`, so
/// the iteration count is bounded independently of `m`.
pub fn objective_cg(
    s: &SampleSet,
    sigma: &Metric,
    kernel: &RadialKernel,
    lambda: f64,
    rel_tol: f64,
    max_iters: usize,
) -> Result<IterativeObjective> {
    check_lambda(lambda)?;
    check_dims(s, sigma)?;
    if !(rel_tol > 0.0) {
        return invalid(format!("rel_tol must be positive, got {rel_tol}"));
    }
    let m = s.len();
    let xs = s.xs();
    let sqrt_p: Vec<f64> = s.atoms.iter().map(|a| a.p.sqrt()).collect();
    let mut a = Mat::<f64>::zeros(m, m);
    a.par_col_iter_mut().enumerate().for_each(|(j, col)| {
        let col = col.try_as_col_major_mut().unwrap().as_slice_mut();
        for (i, v) in col.iter_mut().enumerate() {
            let k = if i == j { kernel.eval_unchecked(0.0) } else { kernel.eval_unchecked(sigma.dist_sq(&xs[i], &xs[j])) };
            *v = sqrt_p[i] * sqrt_p[j] * k + if i == j { lambda } else { 0.0 };
        }
    });
    let dot = |u: &Mat<f64>, v: &Mat<f64>| -> f64 {
        let terms: Vec<f64> = (0..m).map(|i| u[(i, 0)] * v[(i, 0)]).collect();
        pairwise_sum(&terms)
    };
    let b = Mat::from_fn(m, 1, |i, _| sqrt_p[i] * s.atoms[i].y);
    let b_norm = dot(&b, &b).sqrt();
    let mut h = Mat::<f64>::zeros(m, 1);
    if b_norm == 0.0 {
        return Ok(IterativeObjective { j: 0.0, iterations: 0, relative_residual: 0.0 });
    }
    let mut r = b.clone();
    let mut d = r.clone();
    let mut rr = dot(&r, &r);
    let mut iterations = 0;
    while rr.sqrt() > rel_tol * b_norm {
        if iterations == max_iters {
            return Err(Error::Numeric(format!(
                "conjugate gradients did not reach {rel_tol:e} in {max_iters} iterations (residual {:e})",
                rr.sqrt() / b_norm
            )));
        }
        let ad = &a * &d;
        let step = rr / dot(&d, &ad);
        h += step * &d;
        r -= step * &ad;
        let rr_next = dot(&r, &r);
        d = &r + (rr_next / rr) * &d;
        rr = rr_next;
        iterations += 1;
    }
    let j = 0.5 * lambda * dot(&b, &h);
    if !j.is_finite() {
        return Err(Error::Numeric("conjugate gradients produced a non-finite objective".into()));
    }
    Ok(IterativeObjective { j, iterations, relative_residual: rr.sqrt() / b_norm })
}

pub fn solve(s: &SampleSet, sigma: &Metric, kernel: &RadialKernel, lambda: f64) -> Result<SolveResult> {
    check_lambda(lambda)?;
    let d = squared_distance_matrix(s, sigma)?;
    let m_gram = gram(kernel, &d);
    solve_with_gram(s, sigma, &m_gram, lambda)
}

/// Solve with a precomputed Gram matrix (full, symmetric).
pub fn solve_with_gram(s: &SampleSet, sigma: &Metric, m_gram: &Mat<f64>, lambda: f64) -> Result<SolveResult> {
    check_lambda(lambda)?;
    let m = s.len();
    let p = s.ps();
    let y = s.ys();
    let sqrt_p: Vec<f64> = p.iter().map(|v| v.sqrt()).collect();
    let a = Mat::from_fn(m, m, |i, j| {
        let id = if i == j { lambda } else { 0.0 };
        id + sqrt_p[i] * m_gram[(i, j)] * sqrt_p[j]
    });
    let llt = factor(&a)?;
    let b = Mat::from_fn(m, 1, |i, _| sqrt_p[i] * y[i]);
    let h = llt.solve(&b);
    let alpha: Vec<f64> = (0..m).map(|i| sqrt_p[i] * h[(i, 0)]).collect();
    let alpha_col = Mat::from_fn(m, 1, |i, _| alpha[i]);
    let f_col = m_gram * &alpha_col;
    let fitted: Vec<f64> = (0..m).map(|i| f_col[(i, 0)]).collect();
    Ok(assemble(s, sigma, fitted, alpha, lambda))
}

fn assemble(s: &SampleSet, sigma: &Metric, fitted: Vec<f64>, coefficients: Vec<f64>, lambda: f64) -> SolveResult {
    let p = s.ps();
    let y = s.ys();
    let m = s.len();
    let residuals: Vec<f64> = (0..m).map(|i| y[i] - fitted[i]).collect();
    let pyy: Vec<f64> = (0..m).map(|i| p[i] * y[i] * y[i]).collect();
    let pyf: Vec<f64> = (0..m).map(|i| p[i] * y[i] * fitted[i]).collect();
    let pfr: Vec<f64> = (0..m).map(|i| p[i] * fitted[i] * residuals[i]).collect();
    SolveResult {
        j_value: 0.5 * pairwise_sum(&pyy) - 0.5 * pairwise_sum(&pyf),
        h_norm_sq: (pairwise_sum(&pfr) / lambda).max(0.0),
        fitted,
        residuals,
        lambda,
        coefficients,
        metric: sigma.clone(),
    }
}

/// Independent route: minimize `½Σpᵢ(yᵢ − (Mc)ᵢ)² + (λ/2)cᵀMc` in the
/// eigenbasis of `M` and evaluate the loss directly.
pub fn solve_oracle(s: &SampleSet, sigma: &Metric, kernel: &RadialKernel, lambda: f64) -> Result<SolveResult> {
    check_lambda(lambda)?;
    let m = s.len();
    if m > 200 {
        return invalid("solve_oracle is limited to at most 200 atoms");
    }
    let p = s.ps();
    let y = s.ys();
    let d = squared_distance_matrix(s, sigma)?;
    let mg = gram(kernel, &d);
    let (evals, v) = sym_eigen(&mg)?;
    let root: Vec<f64> = evals.iter().map(|&l| l.max(0.0).sqrt()).collect();
    // f = V Λ^½ w; the loss is ½(y − Bw)ᵀP(y − Bw) + (λ/2)|w|² with B = VΛ^½.
    let bmat = Mat::from_fn(m, m, |i, k| v[(i, k)] * root[k]);
    let normal = Mat::from_fn(m, m, |k, l| {
        let id = if k == l { lambda } else { 0.0 };
        id + (0..m).map(|i| bmat[(i, k)] * p[i] * bmat[(i, l)]).sum::<f64>()
    });
    let rhs: Vec<f64> = (0..m)
        .map(|k| (0..m).map(|i| bmat[(i, k)] * p[i] * y[i]).sum())
        .collect();
    let (nvals, nvecs) = sym_eigen(&normal)?;
    let w: Vec<f64> = (0..m)
        .map(|k| {
            (0..m)
                .map(|e| {
                    let proj: f64 = (0..m).map(|l| nvecs[(l, e)] * rhs[l]).sum();
                    nvecs[(k, e)] * proj / nvals[e]
                })
                .sum()
        })
        .collect();
    let fitted: Vec<f64> = (0..m).map(|i| (0..m).map(|k| bmat[(i, k)] * w[k]).sum()).collect();
    let residuals: Vec<f64> = (0..m).map(|i| y[i] - fitted[i]).collect();
    let loss: Vec<f64> = (0..m).map(|i| p[i] * residuals[i] * residuals[i]).collect();
    let ww: Vec<f64> = w.iter().map(|v| v * v).collect();
    let h_norm_sq = pairwise_sum(&ww);
    let coefficients: Vec<f64> = (0..m).map(|i| p[i] * residuals[i] / lambda).collect();
    Ok(SolveResult {
        j_value: 0.5 * pairwise_sum(&loss) + 0.5 * lambda * h_norm_sq,
        fitted,
        residuals,
        h_norm_sq,
        lambda,
        coefficients,
        metric: sigma.clone(),
    })
}

/// `F_Σ(x) = (1/λ) Σ pᵢ rᵢ 𝒦(|x − aᵢ|²_Σ)`.
pub fn predict(s: &SampleSet, sigma: &Metric, kernel: &RadialKernel, result: &SolveResult, x: &[f64]) -> Result<f64> {
    check_dims(s, sigma)?;
    if x.len() != s.dim {
        return invalid(format!("point has {} coordinates, expected {}", x.len(), s.dim));
    }
    if result.residuals.len() != s.len() {
        return invalid("solve result does not match the sample set");
    }
    let terms: Vec<f64> = s
        .atoms
        .iter()
        .zip(&result.residuals)
        .map(|(a, r)| a.p * r * kernel.eval_unchecked(sigma.dist_sq(x, &a.x)))
        .collect();
    Ok(pairwise_sum(&terms) / result.lambda)
}

/// `F_Σ` at every atom of `targets` (which may differ from the fitted set).
pub fn predict_many(s: &SampleSet, sigma: &Metric, kernel: &RadialKernel, result: &SolveResult, targets: &[Vec<f64>]) -> Result<Vec<f64>> {
    targets
        .par_iter()
        .map(|x| predict(s, sigma, kernel, result, x))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sample::Atom;

    fn gaussian() -> RadialKernel {
        RadialKernel::gaussian(1.0).unwrap()
    }

    fn pair(y: (f64, f64)) -> SampleSet {
        SampleSet::new(1, vec![Atom::new(vec![0.0], y.0, 0.5), Atom::new(vec![1.0], y.1, 0.5)]).unwrap()
    }

    #[test]
    fn single_atom_closed_form() {
        let s = SampleSet::new(1, vec![Atom::new(vec![0.3], 1.0, 1.0)]).unwrap();
        let r = solve(&s, &Metric::identity(1), &gaussian(), 0.1).unwrap();
        assert!((r.fitted[0] - 1.0 / 1.1).abs() < 1e-15);
        assert!((r.j_value - 0.1 / 2.2).abs() < 1e-15);
    }

    #[test]
    fn antisymmetric_pair_closed_form() {
        let r = solve(&pair((1.0, -1.0)), &Metric::identity(1), &gaussian(), 0.1).unwrap();
        let want = 0.1 / (1.2 - (-1.0f64).exp());
        assert!((r.j_value - want).abs() < 1e-14);
        assert!((want - 0.1201747).abs() < 1e-6);
    }

    #[test]
    fn zero_metric_is_constant_fit() {
        let s = SampleSet::new(
            2,
            vec![
                Atom::new(vec![0.0, 1.0], 2.0, 0.2),
                Atom::new(vec![1.0, 0.0], -1.0, 0.3),
                Atom::new(vec![3.0, 3.0], 0.5, 0.5),
            ],
        )
        .unwrap();
        let lambda = 0.3;
        let ey = 0.2 * 2.0 - 0.3 + 0.25;
        let ey2 = 0.2 * 4.0 + 0.3 + 0.5 * 0.25;
        let r = solve(&s, &Metric::zeros(2), &gaussian(), lambda).unwrap();
        for f in &r.fitted {
            assert!((f - ey / (1.0 + lambda)).abs() < 1e-14);
        }
        assert!((r.j_value - (0.5 * ey2 - ey * ey / (2.0 * (1.0 + lambda)))).abs() < 1e-14);
        let far = predict(&s, &Metric::zeros(2), &gaussian(), &r, &[100.0, -7.0]).unwrap();
        assert!((far - ey / (1.0 + lambda)).abs() < 1e-14);
    }

    #[test]
    fn distance_examples() {
        let s = pair((1.0, 1.0));
        let d = squared_distance_matrix(&s, &Metric::scalar(1, 4.0).unwrap()).unwrap();
        assert_eq!((d[(0, 0)], d[(0, 1)], d[(1, 0)], d[(1, 1)]), (0.0, 4.0, 4.0, 0.0));
        let z = squared_distance_matrix(&s, &Metric::zeros(1)).unwrap();
        assert_eq!(z[(0, 1)], 0.0);
        assert!(squared_distance_matrix(&s, &Metric::identity(2)).is_err());
    }

    #[test]
    fn gram_examples() {
        let d = Mat::from_fn(2, 2, |i, j| if i == j { 0.0 } else { 1.0 });
        let g = gram(&gaussian(), &d);
        assert_eq!(g[(0, 0)], 1.0);
        assert!((g[(0, 1)] - (-1.0f64).exp()).abs() < 1e-16);
        let ones = gram(&RadialKernel::inverse_power(2.0).unwrap(), &Mat::zeros(3, 3));
        assert!((0..3).all(|i| (0..3).all(|j| ones[(i, j)] == 1.0)));
    }

    #[test]
    fn predict_reproduces_fitted_and_decays() {
        let s = pair((0.7, -0.2));
        let k = gaussian();
        let r = solve(&s, &Metric::identity(1), &k, 0.05).unwrap();
        for (a, f) in s.atoms.iter().zip(&r.fitted) {
            assert!((predict(&s, &Metric::identity(1), &k, &r, &a.x).unwrap() - f).abs() < 1e-9);
        }
        assert!(predict(&s, &Metric::identity(1), &k, &r, &[1e6]).unwrap().abs() <= 1e-12);
    }

    #[test]
    fn fast_objective_matches_solve() {
        let s = pair((1.0, 0.3));
        let k = gaussian();
        let d = squared_distance_matrix(&s, &Metric::identity(1)).unwrap();
        let j = objective_scaled(&s, &d, 2.5, &k, 0.1).unwrap();
        let r = solve(&s, &Metric::scalar(1, 2.5).unwrap(), &k, 0.1).unwrap();
        assert!((j - r.j_value).abs() < 1e-15);
    }

    #[test]
    fn conjugate_gradient_matches_dense() {
        let atoms = (0..40)
            .map(|i| {
                let x = (i as f64 * 0.37).sin() * 3.0;
                Atom::new(vec![x, 0.5 * x * x], (2.0 * x).cos(), 1.0 / 40.0)
            })
            .collect();
        let s = SampleSet::with_masses(2, atoms).unwrap();
        let sigma = Metric::from_rows(&[vec![1.0, 0.2], vec![0.2, 0.5]]).unwrap();
        let dense = objective(&s, &sigma, &gaussian(), 0.05).unwrap();
        let cg = objective_cg(&s, &sigma, &gaussian(), 0.05, 1e-14, 500).unwrap();
        assert!((dense - cg.j).abs() <= 1e-13, "{dense} vs {}", cg.j);
        assert!(cg.relative_residual <= 1e-14);
        let err = objective_cg(&s, &sigma, &gaussian(), 0.05, 1e-14, 2).unwrap_err();
        assert!(err.is_numeric());
    }

    #[test]
    fn oracle_matches_on_single_atom() {
        let s = SampleSet::new(1, vec![Atom::new(vec![0.0], 1.0, 1.0)]).unwrap();
        let o = solve_oracle(&s, &Metric::identity(1), &gaussian(), 0.1).unwrap();
        assert!((o.j_value - 0.1 / 2.2).abs() < 1e-15);
    }

    #[test]
    fn rejects_bad_lambda() {
        assert!(solve(&pair((1.0, 1.0)), &Metric::identity(1), &gaussian(), 0.0).is_err());
        assert!(solve(&pair((1.0, 1.0)), &Metric::identity(1), &gaussian(), -1.0).is_err());
    }
}
