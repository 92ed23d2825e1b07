//! First variation of `𝒥` in the metric.
//!
//! With residuals `r = y − f`, the derivative is the symmetric tensor
//!
//! ```text
//! D_Σ𝒥 = −(1/2λ) Σᵢⱼ pᵢpⱼ rᵢrⱼ 𝒦′(D_ij) (aᵢ − aⱼ)(aᵢ − aⱼ)ᵀ
//! ```
//!
//! paired with a direction `E` by the Frobenius product. At a semi-definite
//! `Σ` with null space `W`, the `W`-block splits into three pieces according
//! to `Y = Y₀ + Y₁`, where `Y₀` is the conditional mean of `Y` given the
//! projection of `X` onto `W⊥`.

use faer::linalg::solvers::Solve;
use faer::{Mat, Side};
use serde::Serialize;

use crate::error::{invalid, Error, Result};
use crate::kernel::RadialKernel;
use crate::metric::{is_psd, Metric};
use crate::numeric::{frobenius, group_points, orthogonal_complement, to_rows, vector_row_sum};
use crate::sample::SampleSet;
use crate::solver::{self, check_lambda, SolveResult};

#[derive(Clone, Debug)]
pub struct GradientTensor {
    pub tensor: Mat<f64>,
    pub at_metric: Metric,
}

/// Symmetric basis directions: `E_aa` and `E_ab + E_ba` for `a < b`.
pub fn symmetric_basis(d: usize) -> Vec<(usize, usize, Mat<f64>)> {
    let mut out = Vec::with_capacity(d * (d + 1) / 2);
    for a in 0..d {
        for b in a..d {
            let e = Mat::from_fn(d, d, |i, j| {
                if (i == a && j == b) || (i == b && j == a) {
                    1.0
                } else {
                    0.0
                }
            });
            out.push((a, b, e));
        }
    }
    out
}

/// Recovers a symmetric tensor `T` from its pairings with [`symmetric_basis`]:
/// `T_aa = ⟨T, E_aa⟩`, `T_ab = ½⟨T, E_ab + E_ba⟩`.
fn tensor_from_pairings(d: usize, pairings: &[(usize, usize, f64)]) -> Mat<f64> {
    let mut t = Mat::zeros(d, d);
    for &(a, b, v) in pairings {
        if a == b {
            t[(a, a)] = v;
        } else {
            t[(a, b)] = 0.5 * v;
            t[(b, a)] = 0.5 * v;
        }
    }
    t
}

fn check_derivative(s: &SampleSet, sigma: &Metric, kernel: &RadialKernel) -> Result<()> {
    if !kernel.deriv_singular_at_zero() {
        return Ok(());
    }
    for i in 0..s.len() {
        for j in 0..i {
            if sigma.dist_sq(&s.atoms[i].x, &s.atoms[j].x) == 0.0 {
                return Err(Error::Singular(format!(
                    "atoms {j} and {i} are at zero Σ-distance and the kernel derivative is unbounded at 0"
                )));
            }
        }
    }
    Ok(())
}

/// `Σᵢⱼ w(i, j) (Bᵀ(aᵢ − aⱼ))(Bᵀ(aᵢ − aⱼ))ᵀ` for a `d × k` basis `B`.
fn weighted_outer_sum<F>(s: &SampleSet, basis: &Mat<f64>, weight: F) -> Mat<f64>
where
    F: Fn(usize, usize) -> f64 + Sync + Send,
{
    let k = basis.ncols();
    let d = s.dim;
    let proj: Vec<Vec<f64>> = s
        .atoms
        .iter()
        .map(|a| (0..k).map(|c| (0..d).map(|i| basis[(i, c)] * a.x[i]).sum()).collect())
        .collect();
    let m = s.len();
    let flat = vector_row_sum(m, k * k, |i| {
        let mut acc = vec![0.0; k * k];
        let mut delta = vec![0.0; k];
        for j in 0..m {
            if j == i {
                continue;
            }
            let w = weight(i, j);
            if w == 0.0 {
                continue;
            }
            for c in 0..k {
                delta[c] = proj[i][c] - proj[j][c];
            }
            for a in 0..k {
                for b in a..k {
                    acc[a * k + b] += w * delta[a] * delta[b];
                }
            }
        }
        acc
    });
    Mat::from_fn(k, k, |a, b| if a <= b { flat[a * k + b] } else { flat[b * k + a] })
}

fn identity(d: usize) -> Mat<f64> {
    Mat::identity(d, d)
}

fn kernel_deriv_matrix(s: &SampleSet, sigma: &Metric, kernel: &RadialKernel) -> Vec<Vec<f64>> {
    let m = s.len();
    (0..m)
        .map(|i| {
            (0..m)
                .map(|j| {
                    if i == j {
                        0.0
                    } else {
                        kernel.deriv_unchecked(sigma.dist_sq(&s.atoms[i].x, &s.atoms[j].x))
                    }
                })
                .collect()
        })
        .collect()
}

fn check_result(s: &SampleSet, result: &SolveResult) -> Result<()> {
    if result.residuals.len() != s.len() {
        return invalid("solve result does not match the sample set");
    }
    Ok(())
}

/// `D_Σ𝒥` from a solve at `Σ`.
pub fn grad_sigma(s: &SampleSet, sigma: &Metric, kernel: &RadialKernel, lambda: f64, result: &SolveResult) -> Result<GradientTensor> {
    check_lambda(lambda)?;
    check_result(s, result)?;
    check_derivative(s, sigma, kernel)?;
    let kd = kernel_deriv_matrix(s, sigma, kernel);
    let pr: Vec<f64> = s.atoms.iter().zip(&result.residuals).map(|(a, r)| a.p * r).collect();
    let raw = weighted_outer_sum(s, &identity(s.dim), |i, j| pr[i] * pr[j] * kd[i][j]);
    let scale = -0.5 / lambda;
    Ok(GradientTensor {
        tensor: Mat::from_fn(s.dim, s.dim, |a, b| scale * raw[(a, b)]),
        at_metric: sigma.clone(),
    })
}

/// Finite-difference gradient along the symmetric basis. Probes that leave
/// the PSD cone fall back to one-sided differences.
pub fn fd_grad_oracle(s: &SampleSet, sigma: &Metric, kernel: &RadialKernel, lambda: f64, h: f64) -> Result<GradientTensor> {
    check_lambda(lambda)?;
    if !(h > 0.0) {
        return invalid("finite-difference step must be positive");
    }
    let d = s.dim;
    let j0 = solver::objective(s, sigma, kernel, lambda)?;
    let mut pairings = Vec::new();
    for (a, b, e) in symmetric_basis(d) {
        let plus = sigma.perturbed(&e, h);
        let minus = sigma.perturbed(&e, -h);
        let up = if is_psd(&plus)? { Some(solver::objective(s, &Metric::new(plus)?, kernel, lambda)?) } else { None };
        let down = if is_psd(&minus)? { Some(solver::objective(s, &Metric::new(minus)?, kernel, lambda)?) } else { None };
        let slope = match (up, down) {
            (Some(u), Some(w)) => (u - w) / (2.0 * h),
            (Some(u), None) => (u - j0) / h,
            (None, Some(w)) => (j0 - w) / h,
            (None, None) => {
                return Err(Error::Domain(format!(
                    "both probes along direction ({a},{b}) leave the PSD cone"
                )))
            }
        };
        pairings.push((a, b, slope));
    }
    Ok(GradientTensor {
        tensor: tensor_from_pairings(d, &pairings),
        at_metric: sigma.clone(),
    })
}

/// Per-atom derivative tensors `D_Σ F_Σ(a_k)`.
///
/// For each symmetric direction `E` the directional derivative `g` solves
/// `(λI + MP) g = N P r` with `N_ki = 𝒦′(D_ki)⟨(a_k − aᵢ)(a_k − aᵢ)ᵀ, E⟩`,
/// which reuses the SPD system of the solver.
pub fn minimizer_sensitivity(s: &SampleSet, sigma: &Metric, kernel: &RadialKernel, lambda: f64, result: &SolveResult) -> Result<Vec<Mat<f64>>> {
    check_lambda(lambda)?;
    check_result(s, result)?;
    check_derivative(s, sigma, kernel)?;
    let m = s.len();
    let d = s.dim;
    let dist = solver::squared_distance_matrix(s, sigma)?;
    let mg = solver::gram(kernel, &dist);
    let kd = kernel_deriv_matrix(s, sigma, kernel);
    let sqrt_p: Vec<f64> = s.atoms.iter().map(|a| a.p.sqrt()).collect();
    let a_sys = Mat::from_fn(m, m, |i, j| {
        let id = if i == j { lambda } else { 0.0 };
        id + sqrt_p[i] * mg[(i, j)] * sqrt_p[j]
    });
    let llt = a_sys
        .llt(Side::Lower)
        .map_err(|e| Error::Numeric(format!("Cholesky factorization failed: {e:?}")))?;
    let basis = symmetric_basis(d);
    let nd = basis.len();
    let pr: Vec<f64> = s.atoms.iter().zip(&result.residuals).map(|(a, r)| a.p * r).collect();
    let rhs = Mat::from_fn(m, nd, |k, e| {
        let (a, b, _) = basis[e];
        let xk = &s.atoms[k].x;
        (0..m)
            .map(|i| {
                if i == k {
                    return 0.0;
                }
                let xi = &s.atoms[i].x;
                let pair = if a == b {
                    (xk[a] - xi[a]).powi(2)
                } else {
                    2.0 * (xk[a] - xi[a]) * (xk[b] - xi[b])
                };
                pr[i] * kd[k][i] * pair
            })
            .sum::<f64>()
    });
    let scaled = Mat::from_fn(m, nd, |i, e| sqrt_p[i] * rhs[(i, e)]);
    let u = llt.solve(&scaled);
    let su = Mat::from_fn(m, nd, |i, e| sqrt_p[i] * u[(i, e)]);
    let msu = &mg * &su;
    let g = Mat::from_fn(m, nd, |i, e| (rhs[(i, e)] - msu[(i, e)]) / lambda);
    Ok((0..m)
        .map(|k| {
            let pairings: Vec<(usize, usize, f64)> = basis
                .iter()
                .enumerate()
                .map(|(e, (a, b, _))| (*a, *b, g[(k, e)]))
                .collect();
            tensor_from_pairings(d, &pairings)
        })
        .collect())
}

#[derive(Clone, Debug)]
pub struct BoundaryDecomposition {
    /// Orthonormal basis of the null subspace `W` (columns).
    pub w_basis: Mat<f64>,
    /// Orthonormal basis of `W′ = W⊥` (columns).
    pub wp_basis: Mat<f64>,
    pub gradient: Mat<f64>,
    pub sym2_w: Mat<f64>,
    pub sym2_wp: Mat<f64>,
    /// `W × W′` block.
    pub mixed: Mat<f64>,
    pub term_g1: Mat<f64>,
    pub term_g2: Mat<f64>,
    pub term_cross: Mat<f64>,
    /// Group id of every atom (atoms sharing their projection onto `W′`).
    pub groups: Vec<usize>,
}

#[derive(Serialize)]
pub struct BlocksJson {
    pub sym2_w: Vec<Vec<f64>>,
    pub sym2_wp: Vec<Vec<f64>>,
    pub mixed: Vec<Vec<f64>>,
    pub g1: Vec<Vec<f64>>,
    pub g2: Vec<Vec<f64>>,
    pub cross: Vec<Vec<f64>>,
}

impl BoundaryDecomposition {
    /// `B [[sym2_w, mixed], [mixedᵀ, sym2_wp]] Bᵀ` with `B = [W | W′]`.
    pub fn reassemble(&self) -> Mat<f64> {
        let k = self.w_basis.ncols();
        let d = self.w_basis.nrows();
        let b = Mat::from_fn(d, d, |i, c| if c < k { self.w_basis[(i, c)] } else { self.wp_basis[(i, c - k)] });
        let blocks = Mat::from_fn(d, d, |r, c| match (r < k, c < k) {
            (true, true) => self.sym2_w[(r, c)],
            (true, false) => self.mixed[(r, c - k)],
            (false, true) => self.mixed[(c, r - k)],
            (false, false) => self.sym2_wp[(r - k, c - k)],
        });
        &(&b * &blocks) * b.transpose()
    }

    /// Largest entry of `sym2_w − (g1 + g2 + cross)`.
    pub fn split_error(&self) -> f64 {
        let k = self.sym2_w.nrows();
        let mut worst: f64 = 0.0;
        for i in 0..k {
            for j in 0..k {
                let sum = self.term_g1[(i, j)] + self.term_g2[(i, j)] + self.term_cross[(i, j)];
                worst = worst.max((self.sym2_w[(i, j)] - sum).abs());
            }
        }
        worst
    }

    pub fn reassembly_error(&self) -> f64 {
        let r = self.reassemble();
        let diff = Mat::from_fn(r.nrows(), r.ncols(), |i, j| r[(i, j)] - self.gradient[(i, j)]);
        frobenius(&diff)
    }

    pub fn blocks_json(&self) -> BlocksJson {
        BlocksJson {
            sym2_w: to_rows(&self.sym2_w),
            sym2_wp: to_rows(&self.sym2_wp),
            mixed: to_rows(&self.mixed),
            g1: to_rows(&self.term_g1),
            g2: to_rows(&self.term_g2),
            cross: to_rows(&self.term_cross),
        }
    }
}

/// Groups atoms by their orthogonal projection onto `W⊥`.
pub(crate) fn quotient_groups(s: &SampleSet, w_basis: &Mat<f64>) -> Vec<usize> {
    let k = w_basis.ncols();
    let d = s.dim;
    let proj: Vec<Vec<f64>> = s
        .atoms
        .iter()
        .map(|a| {
            let coeff: Vec<f64> = (0..k).map(|c| (0..d).map(|i| w_basis[(i, c)] * a.x[i]).sum()).collect();
            (0..d)
                .map(|i| a.x[i] - (0..k).map(|c| w_basis[(i, c)] * coeff[c]).sum::<f64>())
                .collect()
        })
        .collect();
    let scale = proj.iter().flatten().fold(0.0f64, |a, &b| a.max(b.abs()));
    group_points(&proj, 1e-9 * (1.0 + scale))
}

pub(crate) fn check_orthonormal(w: &Mat<f64>, d: usize) -> Result<()> {
    if w.nrows() != d {
        return invalid(format!("basis has {} rows, expected {d}", w.nrows()));
    }
    let k = w.ncols();
    for a in 0..k {
        for b in 0..k {
            let dot: f64 = (0..d).map(|i| w[(i, a)] * w[(i, b)]).sum();
            let want = if a == b { 1.0 } else { 0.0 };
            if (dot - want).abs() > 1e-8 {
                return invalid("basis columns are not orthonormal");
            }
        }
    }
    Ok(())
}

/// Splits the gradient at a semi-definite `Σ` whose null space contains the
/// span of `w_basis`.
pub fn boundary_decomposition(s: &SampleSet, sigma: &Metric, w_basis: &Mat<f64>, kernel: &RadialKernel, lambda: f64) -> Result<BoundaryDecomposition> {
    check_lambda(lambda)?;
    let d = s.dim;
    check_orthonormal(w_basis, d)?;
    if kernel.sup_abs_deriv().is_none() {
        return invalid("boundary decomposition needs a kernel with bounded derivative");
    }
    let k = w_basis.ncols();
    let sig = sigma.matrix();
    let scale = frobenius(sig).max(1.0);
    let sw = sig * w_basis;
    if frobenius(&sw) > 1e-8 * scale {
        return invalid("w_basis is not in the null space of sigma");
    }
    let wp = orthogonal_complement(w_basis, d)?;
    let result = solver::solve(s, sigma, kernel, lambda)?;
    let gradient = grad_sigma(s, sigma, kernel, lambda, &result)?.tensor;

    let groups = quotient_groups(s, w_basis);
    let n_groups = groups.iter().max().map_or(0, |g| g + 1);
    let mut mass = vec![0.0; n_groups];
    let mut my = vec![0.0; n_groups];
    for (a, &g) in s.atoms.iter().zip(&groups) {
        mass[g] += a.p;
        my[g] += a.p * a.y;
    }
    let m = s.len();
    let y0: Vec<f64> = (0..m).map(|i| my[groups[i]] / mass[groups[i]]).collect();
    let y1: Vec<f64> = (0..m).map(|i| s.atoms[i].y - y0[i]).collect();
    let r0: Vec<f64> = (0..m).map(|i| y0[i] - result.fitted[i]).collect();
    let p = s.ps();
    // Atoms of one group are at distance exactly zero; rounding in the
    // distances would otherwise perturb a kernel derivative that may be only
    // Hölder continuous at the origin.
    let mut kd = kernel_deriv_matrix(s, sigma, kernel);
    let kd0 = kernel.deriv_unchecked(0.0);
    for i in 0..m {
        for j in 0..m {
            if i != j && groups[i] == groups[j] {
                kd[i][j] = kd0;
            }
        }
    }
    let c = -0.5 / lambda;
    let scaled = |t: Mat<f64>| Mat::from_fn(k, k, |a, b| c * t[(a, b)]);
    let term_g1 = scaled(weighted_outer_sum(s, w_basis, |i, j| p[i] * p[j] * r0[i] * r0[j] * kd[i][j]));
    let term_g2 = scaled(weighted_outer_sum(s, w_basis, |i, j| p[i] * p[j] * y1[i] * y1[j] * kd[i][j]));
    let term_cross = scaled(weighted_outer_sum(s, w_basis, |i, j| {
        p[i] * p[j] * (r0[i] * y1[j] + y1[i] * r0[j]) * kd[i][j]
    }));

    let gw = &gradient * w_basis;
    let gwp = &gradient * &wp;
    let sym2_w = w_basis.transpose() * &gw;
    let sym2_wp = wp.transpose() * &gwp;
    let mixed = w_basis.transpose() * &gwp;
    Ok(BoundaryDecomposition {
        w_basis: w_basis.clone(),
        wp_basis: wp,
        gradient,
        sym2_w,
        sym2_wp,
        mixed,
        term_g1,
        term_g2,
        term_cross,
        groups,
    })
}
