//! Cluster diagnostics: Hilbert–Schmidt norms, interaction energies between
//! labeled clusters, decoupled per-cluster solves and the dimensional
//! reduction estimate.
//!
//! Everything is an exact double sum over atoms. Functions in the RKHS are
//! represented by coefficients on `{𝒦(|· − aⱼ|²_Σ)}`, so `ℋ`-norms are Gram
//! quadratic forms.

use std::collections::BTreeMap;

use faer::Mat;
use rayon::prelude::*;
use serde::Serialize;

use crate::error::{invalid, Error, Result};
use crate::kernel::RadialKernel;
use crate::metric::Metric;
use crate::numeric::{double_sum, group_points, pairwise_sum};
use crate::sample::{second_moments, Atom, SampleSet};
use crate::solver::{self, check_lambda, SolveResult};
use crate::variation::check_orthonormal;

/// `Σᵢⱼ pᵢpⱼ𝒦(D_ij)²`, the squared Hilbert–Schmidt norm of the integral operator.
pub fn hs_norm_sq(s: &SampleSet, sigma: &Metric, kernel: &RadialKernel) -> Result<f64> {
    let dist = solver::squared_distance_matrix(s, sigma)?;
    let p = s.ps();
    Ok(double_sum(s.len(), |i, j| p[i] * p[j] * kernel.eval_unchecked(dist[(i, j)]).powi(2)))
}

/// `Σᵢⱼ pᵢpⱼyᵢyⱼ𝒦(D_ij) = ‖E[Y K(X, ·)]‖²_ℋ`.
pub fn y_norm_sq(s: &SampleSet, sigma: &Metric, kernel: &RadialKernel) -> Result<f64> {
    let dist = solver::squared_distance_matrix(s, sigma)?;
    let py: Vec<f64> = s.atoms.iter().map(|a| a.p * a.y).collect();
    Ok(double_sum(s.len(), |i, j| py[i] * py[j] * kernel.eval_unchecked(dist[(i, j)])))
}

#[derive(Clone, Copy, Debug, Serialize)]
pub struct InteractionSums {
    /// `Σ_{label i ≠ label j} pᵢpⱼ𝒦(D_ij)²`; feeds the non-interaction bounds.
    pub cross_squared: f64,
    /// `Σ_{label i ≠ label j} pᵢpⱼ𝒦(D_ij)`; compared with density bounds.
    pub cross_first_power: f64,
    /// `Σ_{label i = label j} pᵢpⱼ𝒦(D_ij)²`.
    pub within_squared: f64,
}

pub fn interaction_sums(s: &SampleSet, sigma: &Metric, kernel: &RadialKernel) -> Result<InteractionSums> {
    let labels = s.labels()?;
    let dist = solver::squared_distance_matrix(s, sigma)?;
    let p = s.ps();
    let m = s.len();
    let k = |i: usize, j: usize| kernel.eval_unchecked(dist[(i, j)]);
    Ok(InteractionSums {
        cross_squared: double_sum(m, |i, j| if labels[i] != labels[j] { p[i] * p[j] * k(i, j).powi(2) } else { 0.0 }),
        cross_first_power: double_sum(m, |i, j| if labels[i] != labels[j] { p[i] * p[j] * k(i, j) } else { 0.0 }),
        within_squared: double_sum(m, |i, j| if labels[i] == labels[j] { p[i] * p[j] * k(i, j).powi(2) } else { 0.0 }),
    })
}

/// Interaction energy `Σ_{i≠j} E[χᵢχⱼ′|K|²]` between clusters.
pub fn cluster_interaction(s: &SampleSet, sigma: &Metric, kernel: &RadialKernel) -> Result<f64> {
    Ok(interaction_sums(s, sigma, kernel)?.cross_squared)
}

#[derive(Clone, Debug)]
pub struct ClusterSolve {
    pub label: usize,
    /// Indices into the full sample set.
    pub atoms: Vec<usize>,
    pub result: SolveResult,
}

#[derive(Clone, Debug)]
pub struct DecoupledSolve {
    pub j_list: Vec<f64>,
    /// `f̃ = Σᵢ fᵢ` at every atom.
    pub f_tilde: Vec<f64>,
    /// Stacked representer coefficients of `f̃`, indexed like the atoms.
    pub coefficients: Vec<f64>,
    pub per_cluster: Vec<ClusterSolve>,
}

fn label_members(labels: &[usize]) -> BTreeMap<usize, Vec<usize>> {
    let mut out: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for (i, &l) in labels.iter().enumerate() {
        out.entry(l).or_default().push(i);
    }
    out
}

fn subset(s: &SampleSet, idx: &[usize], mass_scale: f64) -> Result<SampleSet> {
    let atoms: Vec<Atom> = idx
        .iter()
        .map(|&i| {
            let a = &s.atoms[i];
            Atom { p: a.p * mass_scale, ..a.clone() }
        })
        .collect();
    SampleSet::with_masses(s.dim, atoms)
}

/// Solves each cluster's problem with its atoms' global masses, or with
/// masses renormalized within the cluster when `renormalize` is set (for
/// comparison only; the bounds use global masses).
pub fn decoupled_solve(s: &SampleSet, sigma: &Metric, kernel: &RadialKernel, lambda: f64, renormalize: bool) -> Result<DecoupledSolve> {
    check_lambda(lambda)?;
    let labels = s.labels()?;
    let members: Vec<(usize, Vec<usize>)> = label_members(&labels).into_iter().collect();
    let solved: Vec<Result<ClusterSolve>> = members
        .par_iter()
        .map(|(label, idx)| {
            let mass: f64 = idx.iter().map(|&i| s.atoms[i].p).sum();
            let sub = subset(s, idx, if renormalize { 1.0 / mass } else { 1.0 })?;
            let result = solver::solve(&sub, sigma, kernel, lambda)?;
            Ok(ClusterSolve { label: *label, atoms: idx.clone(), result })
        })
        .collect();
    let per_cluster = solved.into_iter().collect::<Result<Vec<_>>>()?;
    let mut coefficients = vec![0.0; s.len()];
    for c in &per_cluster {
        for (&i, &v) in c.atoms.iter().zip(&c.result.coefficients) {
            coefficients[i] = v;
        }
    }
    let dist = solver::squared_distance_matrix(s, sigma)?;
    let mg = solver::gram(kernel, &dist);
    Ok(DecoupledSolve {
        j_list: per_cluster.iter().map(|c| c.result.j_value).collect(),
        f_tilde: apply(&mg, &coefficients),
        coefficients,
        per_cluster,
    })
}

fn apply(mg: &Mat<f64>, v: &[f64]) -> Vec<f64> {
    let col = Mat::from_fn(v.len(), 1, |i, _| v[i]);
    let out = mg * &col;
    (0..v.len()).map(|i| out[(i, 0)]).collect()
}

fn quad_form(mg: &Mat<f64>, v: &[f64]) -> f64 {
    let mv = apply(mg, v);
    let t: Vec<f64> = v.iter().zip(&mv).map(|(a, b)| a * b).collect();
    pairwise_sum(&t).max(0.0)
}

#[derive(Clone, Debug, Serialize)]
pub struct ClusterSummary {
    pub label: usize,
    pub n_atoms: usize,
    pub mass: f64,
    pub j: f64,
}

#[derive(Clone, Debug, Serialize)]
pub struct ClusterReport {
    pub j_full: f64,
    pub j_decoupled: Vec<f64>,
    pub j_decoupled_sum: f64,
    /// `j_full − Σ Jᵢ`.
    pub gap: f64,
    pub interaction: f64,
    pub interaction_first_power: f64,
    /// `λ‖f − f̃‖²_ℋ + Σ pₖ (f − f̃)(aₖ)²`.
    pub deviation_sq: f64,
    /// `E|Y|²·I/λ²` with `I` the squared interaction.
    pub upper_bound: f64,
    /// `−2E|Y|²·I/λ²`.
    pub lower_bound: f64,
    /// `(3/2λ)E|Y|²·√I`, a bound on `|gap|` that also covers the cross terms
    /// `(fᵢ, fⱼ)_ℋ`, which are first order in the kernel between clusters.
    pub gap_abs_bound: f64,
    pub deviation_bound: f64,
    /// `E|Z|²` for the residual `Z` of `f̃` in the full equation.
    pub z_norm_sq: f64,
    pub z_bound: f64,
    /// `λ‖f − f̃‖²_ℋ + E|Z − (f − f̃)|²`, at most `E|Z|²`.
    pub z_fit_lhs: f64,
    pub e_y2: f64,
    pub per_cluster: Vec<ClusterSummary>,
}

impl ClusterReport {
    pub fn gap_within_bounds(&self, tol: f64) -> bool {
        self.lower_bound - tol <= self.gap && self.gap <= self.upper_bound + tol
    }

    pub fn gap_within_abs_bound(&self, tol: f64) -> bool {
        self.gap.abs() <= self.gap_abs_bound + tol
    }
}

/// Compares the full minimizer with the sum of decoupled cluster minimizers.
pub fn noninteraction_report(s: &SampleSet, sigma: &Metric, kernel: &RadialKernel, lambda: f64) -> Result<ClusterReport> {
    check_lambda(lambda)?;
    let labels = s.labels()?;
    let dist = solver::squared_distance_matrix(s, sigma)?;
    let mg = solver::gram(kernel, &dist);
    let full = solver::solve_with_gram(s, sigma, &mg, lambda)?;
    let dec = decoupled_solve(s, sigma, kernel, lambda, false)?;
    let sums = interaction_sums(s, sigma, kernel)?;
    let e_y2 = second_moments(s).e_y2;
    let m = s.len();
    let p = s.ps();

    let delta: Vec<f64> = (0..m).map(|i| full.coefficients[i] - dec.coefficients[i]).collect();
    let diff = apply(&mg, &delta);
    let h_gap = quad_form(&mg, &delta);
    let l2_gap = pairwise_sum(&(0..m).map(|i| p[i] * diff[i] * diff[i]).collect::<Vec<_>>());

    // Per-atom residual of the cluster owning it, against that cluster's own fit.
    let mut own_residual = vec![0.0; m];
    for c in &dec.per_cluster {
        for (&i, &r) in c.atoms.iter().zip(&c.result.residuals) {
            own_residual[i] = r;
        }
    }
    let z: Vec<f64> = (0..m)
        .into_par_iter()
        .map(|k| {
            let terms: Vec<f64> = (0..m)
                .map(|l| {
                    if labels[l] == labels[k] {
                        0.0
                    } else {
                        p[l] * own_residual[l] * mg[(k, l)]
                    }
                })
                .collect();
            -pairwise_sum(&terms) / lambda
        })
        .collect();
    let z_norm_sq = pairwise_sum(&(0..m).map(|k| p[k] * z[k] * z[k]).collect::<Vec<_>>());
    let z_fit = pairwise_sum(&(0..m).map(|k| p[k] * (z[k] - diff[k]).powi(2)).collect::<Vec<_>>());

    let inter = sums.cross_squared;
    let scale = e_y2 * inter / (lambda * lambda);
    let j_sum = pairwise_sum(&dec.j_list);
    let per_cluster = dec
        .per_cluster
        .iter()
        .map(|c| ClusterSummary {
            label: c.label,
            n_atoms: c.atoms.len(),
            mass: c.atoms.iter().map(|&i| p[i]).sum(),
            j: c.result.j_value,
        })
        .collect();
    Ok(ClusterReport {
        j_full: full.j_value,
        j_decoupled_sum: j_sum,
        gap: full.j_value - j_sum,
        j_decoupled: dec.j_list,
        interaction: inter,
        interaction_first_power: sums.cross_first_power,
        deviation_sq: lambda * h_gap + l2_gap,
        upper_bound: scale,
        lower_bound: -2.0 * scale,
        gap_abs_bound: 1.5 * e_y2 * inter.sqrt() / lambda,
        deviation_bound: 4.0 * scale,
        z_norm_sq,
        z_bound: scale,
        z_fit_lhs: lambda * h_gap + z_fit,
        e_y2,
        per_cluster,
    })
}

/// Upper bound `p₀ det(Σ_{V/W})^{-½} Σ w_k (π/t_k)^{d/2}` on `E[𝒦(|X − X′|²_Σ)]`
/// when the `W′`-marginal of `X` has density at most `p₀`; `d` is `dim W′`.
/// Pass `kernel.squared()` for the bound on `E[𝒦²]`.
pub fn density_interaction_bound(p0: f64, sigma_quotient_det: f64, kernel: &RadialKernel, d_wp: usize) -> Result<f64> {
    if !(p0 > 0.0 && p0.is_finite()) {
        return invalid("density bound must be positive");
    }
    if !(sigma_quotient_det > 0.0) {
        return invalid("quotient determinant must be positive");
    }
    let (t, w) = kernel
        .gaussian_sum()
        .ok_or_else(|| Error::Unsupported("density bound needs a Gaussian-sum representation".into()))?;
    let terms: Vec<f64> = t
        .iter()
        .zip(w)
        .map(|(tk, wk)| wk * (std::f64::consts::PI / tk).powf(d_wp as f64 / 2.0))
        .collect();
    Ok(p0 / sigma_quotient_det.sqrt() * pairwise_sum(&terms))
}

#[derive(Clone, Debug, Serialize)]
pub struct DimensionalReduction {
    pub four_term: f64,
    pub f1_bound: f64,
    /// `E|Y¹|²` with `Y¹ = Y − E[Y | X̃]`.
    pub e_y1_sq: f64,
    /// `λ‖f¹‖²_ℋ + E|f¹|²` for the minimizer with target `Y¹`.
    pub f1_measured: f64,
    /// `X̃` at every atom.
    pub reduced_points: Vec<Vec<f64>>,
}

/// Replaces, within each label `i`, the `Wᵢ`-component of `X` by its mean
/// conditional on the `Wᵢ⊥`-component, and measures the resulting change of
/// the kernel through the four-term difference. `subspaces` maps every
/// label to an orthonormal basis of `Wᵢ` (columns).
pub fn dimensional_reduction_error(
    s: &SampleSet,
    subspaces: &BTreeMap<usize, Mat<f64>>,
    sigma: &Metric,
    kernel: &RadialKernel,
    lambda: f64,
) -> Result<DimensionalReduction> {
    check_lambda(lambda)?;
    let labels = s.labels()?;
    let d = s.dim;
    for (label, w) in subspaces {
        check_orthonormal(w, d).map_err(|e| Error::Invalid(format!("subspace for label {label}: {e}")))?;
    }
    let m = s.len();
    let mut coeffs: Vec<Vec<f64>> = Vec::with_capacity(m);
    let mut keys: Vec<Vec<f64>> = Vec::with_capacity(m);
    for (a, l) in s.atoms.iter().zip(&labels) {
        let w = subspaces
            .get(l)
            .ok_or_else(|| Error::Invalid(format!("no subspace given for label {l}")))?;
        let c: Vec<f64> = (0..w.ncols()).map(|k| (0..d).map(|r| w[(r, k)] * a.x[r]).sum()).collect();
        let mut key: Vec<f64> = (0..d)
            .map(|r| a.x[r] - (0..w.ncols()).map(|k| w[(r, k)] * c[k]).sum::<f64>())
            .collect();
        key.push(*l as f64);
        coeffs.push(c);
        keys.push(key);
    }
    let scale = keys.iter().flatten().fold(0.0f64, |x, &y| x.max(y.abs()));
    let groups = group_points(&keys, 1e-9 * (1.0 + scale));
    let n_groups = groups.iter().max().map_or(0, |g| g + 1);
    let mut mass = vec![0.0; n_groups];
    let mut my = vec![0.0; n_groups];
    let mut mc: Vec<Vec<f64>> = vec![Vec::new(); n_groups];
    for i in 0..m {
        let g = groups[i];
        let p = s.atoms[i].p;
        mass[g] += p;
        my[g] += p * s.atoms[i].y;
        if mc[g].is_empty() {
            mc[g] = vec![0.0; coeffs[i].len()];
        }
        for (acc, v) in mc[g].iter_mut().zip(&coeffs[i]) {
            *acc += p * v;
        }
    }
    let reduced_points: Vec<Vec<f64>> = (0..m)
        .map(|i| {
            let g = groups[i];
            let w = &subspaces[&labels[i]];
            (0..d)
                .map(|r| {
                    let shift: f64 = (0..w.ncols()).map(|k| w[(r, k)] * (mc[g][k] / mass[g] - coeffs[i][k])).sum();
                    s.atoms[i].x[r] + shift
                })
                .collect()
        })
        .collect();
    let y1: Vec<f64> = (0..m).map(|i| s.atoms[i].y - my[groups[i]] / mass[groups[i]]).collect();
    let p = s.ps();
    let e_y1_sq = pairwise_sum(&(0..m).map(|i| p[i] * y1[i] * y1[i]).collect::<Vec<_>>());

    let xs = s.xs();
    let k = |a: &[f64], b: &[f64]| kernel.eval_unchecked(sigma.dist_sq(a, b));
    let four_term = double_sum(m, |i, j| {
        let (x, xp) = (&xs[i], &xs[j]);
        let (xt, xtp) = (&reduced_points[i], &reduced_points[j]);
        let v = k(x, xp) - k(xt, xp) - k(x, xtp) + k(xt, xtp);
        p[i] * p[j] * v * v
    });
    let f1 = solver::solve(&s.with_values(&y1)?, sigma, kernel, lambda)?;
    let f1_sq = pairwise_sum(&(0..m).map(|i| p[i] * f1.fitted[i] * f1.fitted[i]).collect::<Vec<_>>());
    Ok(DimensionalReduction {
        four_term,
        f1_bound: e_y1_sq * four_term.sqrt() / lambda,
        e_y1_sq,
        f1_measured: lambda * f1.h_norm_sq + f1_sq,
        reduced_points,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn two_clusters(sep: f64) -> SampleSet {
        SampleSet::new(
            1,
            vec![
                Atom::labeled(vec![0.0], 1.0, 0.25, 0),
                Atom::labeled(vec![0.3], 0.5, 0.25, 0),
                Atom::labeled(vec![sep], -1.0, 0.25, 1),
                Atom::labeled(vec![sep + 0.2], 0.2, 0.25, 1),
            ],
        )
        .unwrap()
    }

    #[test]
    fn hs_and_y_norm_examples() {
        let k = RadialKernel::gaussian(1.0).unwrap();
        let s = SampleSet::new(1, vec![Atom::new(vec![0.0], 1.0, 0.5), Atom::new(vec![1.0], -1.0, 0.5)]).unwrap();
        let q = (-1.0f64).exp();
        let sig = Metric::identity(1);
        assert!((hs_norm_sq(&s, &sig, &k).unwrap() - 0.5 * (1.0 + q * q)).abs() < 1e-15);
        assert!((y_norm_sq(&s, &sig, &k).unwrap() - 0.5 * (1.0 - q)).abs() < 1e-15);
    }

    #[test]
    fn interaction_of_two_singletons() {
        let k = RadialKernel::gaussian(1.0).unwrap();
        let s = SampleSet::new(1, vec![Atom::labeled(vec![0.0], 1.0, 0.5, 0), Atom::labeled(vec![10.0], -1.0, 0.5, 1)]).unwrap();
        let got = cluster_interaction(&s, &Metric::identity(1), &k).unwrap();
        let want = 2.0 * 0.25 * (-200.0f64).exp();
        assert!((got - want).abs() <= 1e-12 * want);
    }

    #[test]
    fn partition_identity() {
        let k = RadialKernel::gaussian(1.0).unwrap();
        let s = two_clusters(1.0);
        let sig = Metric::identity(1);
        let sums = interaction_sums(&s, &sig, &k).unwrap();
        let hs = hs_norm_sq(&s, &sig, &k).unwrap();
        assert!((sums.cross_squared + sums.within_squared - hs).abs() < 1e-12);
    }

    #[test]
    fn single_label_report_has_no_gaps() {
        let k = RadialKernel::gaussian(1.0).unwrap();
        let mut s = two_clusters(1.0);
        for a in &mut s.atoms {
            a.label = Some(3);
        }
        let r = noninteraction_report(&s, &Metric::identity(1), &k, 0.1).unwrap();
        assert!(r.gap.abs() < 1e-12);
        assert!(r.deviation_sq.abs() < 1e-12);
        assert_eq!(r.interaction, 0.0);
    }

    #[test]
    fn far_singletons_decouple() {
        let k = RadialKernel::gaussian(1.0).unwrap();
        let s = SampleSet::new(1, vec![Atom::labeled(vec![0.0], 1.0, 0.3, 0), Atom::labeled(vec![100.0], -2.0, 0.7, 1)]).unwrap();
        let r = noninteraction_report(&s, &Metric::identity(1), &k, 0.1).unwrap();
        let want = 0.5 * 0.1 * 0.3 / 0.4 + 0.5 * 0.1 * 0.7 / 0.8 * 4.0;
        assert!((r.j_decoupled_sum - want).abs() < 1e-12);
        assert!((r.j_full - want).abs() < 1e-12);
    }

    #[test]
    fn bounds_hold_at_moderate_separation() {
        let k = RadialKernel::gaussian(1.0).unwrap();
        let r = noninteraction_report(&two_clusters(2.0), &Metric::identity(1), &k, 0.1).unwrap();
        assert!(r.gap_within_bounds(1e-10));
        assert!(r.gap_within_abs_bound(1e-12));
        assert!(r.deviation_sq <= r.deviation_bound + 1e-10);
        assert!(r.z_norm_sq <= r.z_bound + 1e-12);
        assert!(r.z_fit_lhs <= r.z_norm_sq + 1e-12);
    }

    #[test]
    fn density_bound_example() {
        let k = RadialKernel::gaussian(1.0).unwrap();
        let b = density_interaction_bound(1.0, 100.0, &k, 1).unwrap();
        assert!((b - 0.1 * std::f64::consts::PI.sqrt()).abs() < 1e-15);
        assert!(density_interaction_bound(1.0, 100.0, &RadialKernel::inverse_power(1.0).unwrap(), 1).is_err());
    }

    #[test]
    fn reduction_is_exact_on_conditional_means() {
        let k = RadialKernel::gaussian(1.0).unwrap();
        let s = SampleSet::new(
            2,
            vec![
                Atom::labeled(vec![0.5, 0.0], 1.0, 0.5, 0),
                Atom::labeled(vec![-0.2, 1.0], -1.0, 0.5, 0),
            ],
        )
        .unwrap();
        let mut sub = BTreeMap::new();
        sub.insert(0, Mat::from_fn(2, 1, |i, _| if i == 0 { 1.0 } else { 0.0 }));
        let r = dimensional_reduction_error(&s, &sub, &Metric::identity(2), &k, 0.1).unwrap();
        assert_eq!(r.four_term, 0.0);
        assert_eq!(r.e_y1_sq, 0.0);
        let missing = BTreeMap::new();
        assert!(dimensional_reduction_error(&s, &missing, &Metric::identity(2), &k, 0.1).is_err());
    }

    #[test]
    fn missing_labels_are_rejected() {
        let k = RadialKernel::gaussian(1.0).unwrap();
        let s = SampleSet::new(1, vec![Atom::new(vec![0.0], 1.0, 1.0)]).unwrap();
        assert!(cluster_interaction(&s, &Metric::identity(1), &k).is_err());
    }
}
