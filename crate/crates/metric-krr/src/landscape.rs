//! Exploring `𝒥` over the cone of semi-definite metrics: scalar sweeps,
//! projected descent, scale-detector certificates and the closed-form values
//! at infinity.

use faer::Mat;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::Serialize;

use crate::error::{invalid, Error, Result};
use crate::kernel::RadialKernel;
use crate::metric::Metric;
use crate::numeric::{frobenius, group_points, pairwise_sum, sym_apply, sym_eigen, symmetrize};
use crate::sample::{second_moments, Atom, SampleSet};
use crate::solver::{self, check_lambda};
use crate::variation::{check_orthonormal, grad_sigma, quotient_groups};

/// Above this many atoms a single factorization already saturates the
/// machine, so independent evaluations run one after another.
const PARALLEL_ATOM_LIMIT: usize = 1000;
const PLATEAU_TOL: f64 = 1e-12;
const CERT_TOL: f64 = 1e-12;

fn evaluate_all<T, F>(m: usize, items: &[T], f: F) -> Result<Vec<f64>>
where
    T: Sync,
    F: Fn(&T) -> Result<f64> + Sync + Send,
{
    if m <= PARALLEL_ATOM_LIMIT {
        items.par_iter().map(&f).collect()
    } else {
        items.iter().map(&f).collect()
    }
}

/// `n` log-spaced points from `lo` to `hi` inclusive.
pub fn log_grid(lo: f64, hi: f64, n: usize) -> Vec<f64> {
    if n == 1 {
        return vec![lo];
    }
    let (a, b) = (lo.ln(), hi.ln());
    (0..n)
        .map(|k| {
            if k == n - 1 {
                hi
            } else {
                (a + (b - a) * k as f64 / (n - 1) as f64).exp()
            }
        })
        .collect()
}

#[derive(Clone, Debug)]
pub struct SweepTable {
    pub base: Metric,
    pub ts: Vec<f64>,
    pub values: Vec<f64>,
    pub minima_indices: Vec<usize>,
    /// `𝒥(0)`, the value at the boundary point of the ray.
    pub j_at_zero: f64,
}

#[derive(Clone, Copy, Debug, Serialize)]
pub struct SweepMinimum {
    pub t: f64,
    pub j: f64,
}

impl SweepTable {
    pub fn metric_at(&self, i: usize) -> Result<Metric> {
        self.base.scaled(self.ts[i])
    }

    pub fn minima(&self) -> Vec<SweepMinimum> {
        self.minima_indices
            .iter()
            .map(|&i| SweepMinimum { t: self.ts[i], j: self.values[i] })
            .collect()
    }
}

/// Strict interior local minima. Runs of values equal within `1e-12`
/// collapse to one candidate, reported at the middle of the run.
pub fn local_minima(values: &[f64]) -> Vec<usize> {
    let n = values.len();
    let mut out = Vec::new();
    let mut start = 0;
    while start < n {
        let mut end = start;
        while end + 1 < n && (values[end + 1] - values[end]).abs() <= PLATEAU_TOL {
            end += 1;
        }
        if start > 0 && end + 1 < n && values[start - 1] > values[start] && values[end + 1] > values[end] {
            out.push((start + end) / 2);
        }
        start = end + 1;
    }
    out
}

/// `𝒥(t·Q)` on a log grid of `n_points` values of `t`.
pub fn sweep_1d(s: &SampleSet, kernel: &RadialKernel, lambda: f64, base: &Metric, t_min: f64, t_max: f64, n_points: usize) -> Result<SweepTable> {
    check_lambda(lambda)?;
    if !(t_min > 0.0 && t_max > t_min && t_max.is_finite()) {
        return invalid("sweep range needs 0 < t_min < t_max");
    }
    if n_points < 3 {
        return invalid("sweep needs at least 3 points");
    }
    let dist = solver::squared_distance_matrix(s, base)?;
    let ts = log_grid(t_min, t_max, n_points);
    let values = evaluate_all(s.len(), &ts, |&t| solver::objective_scaled(s, &dist, t, kernel, lambda))?;
    let j_at_zero = solver::objective_scaled(s, &dist, 0.0, kernel, lambda)?;
    Ok(SweepTable {
        base: base.clone(),
        minima_indices: local_minima(&values),
        ts,
        values,
        j_at_zero,
    })
}

/// Golden-section search for a minimum of `t ↦ 𝒥(t·Q)` over `ln t` in
/// `[t_lo, t_hi]`, stopping when the bracket is narrower than `tol_ln`.
/// Returns the best point evaluated.
pub fn refine_minimum_1d(s: &SampleSet, kernel: &RadialKernel, lambda: f64, base: &Metric, t_lo: f64, t_hi: f64, tol_ln: f64) -> Result<SweepMinimum> {
    check_lambda(lambda)?;
    if !(t_lo > 0.0 && t_hi > t_lo) {
        return invalid("refinement bracket needs 0 < t_lo < t_hi");
    }
    let dist = solver::squared_distance_matrix(s, base)?;
    let eval = |u: f64| solver::objective_scaled(s, &dist, u.exp(), kernel, lambda);
    let g = (5f64.sqrt() - 1.0) / 2.0;
    let (mut a, mut b) = (t_lo.ln(), t_hi.ln());
    let mut c = b - g * (b - a);
    let mut d = a + g * (b - a);
    let mut fc = eval(c)?;
    let mut fd = eval(d)?;
    let mut best = if fc <= fd { (c, fc) } else { (d, fd) };
    while b - a > tol_ln {
        if fc <= fd {
            b = d;
            d = c;
            fd = fc;
            c = b - g * (b - a);
            fc = eval(c)?;
            if fc < best.1 {
                best = (c, fc);
            }
        } else {
            a = c;
            c = d;
            fc = fd;
            d = a + g * (b - a);
            fd = eval(d)?;
            if fd < best.1 {
                best = (d, fd);
            }
        }
    }
    Ok(SweepMinimum { t: best.0.exp(), j: best.1 })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum StopReason {
    GradientTolerance,
    BoundaryStationary,
    NoDecrease,
    MaxIterations,
}

#[derive(Clone, Debug, Serialize)]
pub struct DescentStep {
    pub metric: Metric,
    pub j: f64,
    pub grad_norm: f64,
}

#[derive(Clone, Debug, Serialize)]
pub struct Trajectory {
    pub steps: Vec<DescentStep>,
    pub stop: StopReason,
}

impl Trajectory {
    pub fn last(&self) -> &DescentStep {
        self.steps.last().expect("trajectory is never empty")
    }
}

/// First-order optimality at a boundary point with null space `W`: the
/// blocks touching `W′` vanish and the `W`-block is PSD.
fn boundary_stationary(sigma: &Metric, grad: &Mat<f64>, tol: f64) -> Result<bool> {
    let w = sigma.null_space(1e-10)?;
    let k = w.ncols();
    if k == 0 {
        return Ok(false);
    }
    let d = sigma.dim();
    let wp = crate::numeric::orthogonal_complement(&w, d)?;
    let gw = grad * &w;
    let tangential = frobenius(&(wp.transpose() * grad * &wp)).max(frobenius(&(wp.transpose() * &gw)));
    let (vals, _) = sym_eigen(&(w.transpose() * &gw))?;
    Ok(tangential <= tol && vals[0] >= -tol)
}

/// Projected gradient descent `Σ ← Π(Σ − η G)` with eigenvalue clipping and
/// backtracking on `𝒥`. The step is halved until `𝒥` decreases and doubled
/// after each accepted step.
pub fn descend(s: &SampleSet, kernel: &RadialKernel, lambda: f64, sigma0: &Metric, max_iters: usize, grad_tol: f64) -> Result<Trajectory> {
    check_lambda(lambda)?;
    let mut sigma = sigma0.clone();
    let mut result = solver::solve(s, &sigma, kernel, lambda)?;
    let mut grad = grad_sigma(s, &sigma, kernel, lambda, &result)?.tensor;
    // Steps record the line-search objective so that accepted values are
    // compared and reported by the same evaluation.
    let mut j_now = solver::objective(s, &sigma, kernel, lambda)?;
    let mut steps = vec![DescentStep { metric: sigma.clone(), j: j_now, grad_norm: frobenius(&grad) }];
    let mut eta = 0.5 * frobenius(sigma.matrix()).max(1.0) / frobenius(&grad).max(f64::MIN_POSITIVE);
    for _ in 0..max_iters {
        let gnorm = frobenius(&grad);
        if gnorm <= grad_tol {
            return Ok(Trajectory { steps, stop: StopReason::GradientTolerance });
        }
        if boundary_stationary(&sigma, &grad, grad_tol)? {
            return Ok(Trajectory { steps, stop: StopReason::BoundaryStationary });
        }
        let mut accepted = None;
        for _ in 0..60 {
            let trial = Metric::project(&sigma.perturbed(&grad, -eta))?;
            let j_trial = solver::objective(s, &trial, kernel, lambda)?;
            if j_trial < j_now {
                accepted = Some((trial, j_trial));
                break;
            }
            eta *= 0.5;
        }
        let Some((next, j_next)) = accepted else {
            return Ok(Trajectory { steps, stop: StopReason::NoDecrease });
        };
        sigma = next;
        j_now = j_next;
        result = solver::solve(s, &sigma, kernel, lambda)?;
        grad = grad_sigma(s, &sigma, kernel, lambda, &result)?.tensor;
        steps.push(DescentStep { metric: sigma.clone(), j: j_now, grad_norm: frobenius(&grad) });
        eta *= 2.0;
    }
    Ok(Trajectory { steps, stop: StopReason::MaxIterations })
}

#[derive(Clone, Debug, Serialize)]
pub struct Witness {
    pub metric: Metric,
    pub j: f64,
}

#[derive(Clone, Debug, Serialize)]
pub struct DetectorVerdict {
    pub is_detector: bool,
    pub epsilon: f64,
    pub lambda_ratio: f64,
    pub j_center: f64,
    pub boundary_min: f64,
    pub interior_min: f64,
    pub e_y2: f64,
    /// True when the neighbourhood boundary was checked exhaustively
    /// (dimension one); sampled checks are necessary conditions only.
    pub exact_boundary: bool,
    pub n_boundary: usize,
    pub n_interior: usize,
    pub witnesses: Vec<Witness>,
    pub interior_witness: Option<Witness>,
}

fn verdict(
    j_center: f64,
    e_y2: f64,
    epsilon: f64,
    lambda_ratio: f64,
    exact_boundary: bool,
    boundary: Vec<Witness>,
    interior: Vec<Witness>,
) -> DetectorVerdict {
    let boundary_min = boundary.iter().map(|w| w.j).fold(f64::INFINITY, f64::min);
    let interior_best = interior.iter().min_by(|a, b| a.j.total_cmp(&b.j)).cloned();
    let interior_min = interior_best.as_ref().map_or(f64::INFINITY, |w| w.j);
    let is_detector = boundary_min >= j_center + epsilon * e_y2 - CERT_TOL && interior_min >= j_center - CERT_TOL;
    DetectorVerdict {
        is_detector,
        epsilon,
        lambda_ratio,
        j_center,
        boundary_min,
        interior_min,
        e_y2,
        exact_boundary,
        n_boundary: boundary.len(),
        n_interior: interior.len(),
        witnesses: boundary,
        interior_witness: interior_best,
    }
}

fn random_symmetric(rng: &mut ChaCha20Rng, d: usize) -> Result<Mat<f64>> {
    loop {
        let g = Mat::from_fn(d, d, |_, _| rng.sample::<f64, _>(StandardNormal));
        let sym = symmetrize(&g);
        let (vals, _) = sym_eigen(&sym)?;
        let radius = vals.iter().fold(0.0f64, |a, &b| a.max(b.abs()));
        if radius > 1e-8 {
            return Ok(Mat::from_fn(d, d, |i, j| sym[(i, j)] / radius));
        }
    }
}

/// Random PSD matrix with largest eigenvalue exactly one.
fn random_psd_unit(rng: &mut ChaCha20Rng, d: usize) -> Result<Mat<f64>> {
    loop {
        let g = Mat::from_fn(d, d, |_, _| rng.sample::<f64, _>(StandardNormal));
        let psd = symmetrize(&(&g * g.transpose()));
        let (vals, _) = sym_eigen(&psd)?;
        let top = vals.last().copied().unwrap_or(0.0);
        if top > 1e-8 {
            return Ok(Mat::from_fn(d, d, |i, j| psd[(i, j)] / top));
        }
    }
}

fn substream(seed: u64, k: u64) -> ChaCha20Rng {
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    rng.set_stream(k);
    rng
}

/// `R exp(τS) R` with `R = Σ^½`: its generalized eigenvalues relative to
/// `Σ` are `exp(τ·eig(S))`.
fn congruent_exp(root: &Mat<f64>, dir: &Mat<f64>, tau: f64) -> Result<Mat<f64>> {
    let e = sym_apply(dir, |x| (tau * x).exp())?;
    Ok(symmetrize(&(root * &e * root)))
}

/// Checks the strict gap property on the neighbourhood
/// `{Σ′ : Λ⁻¹Σ ≤ Σ′ ≤ ΛΣ}` of a positive definite `Σ`.
///
/// In dimension one the boundary is the two points `Σ/Λ`, `ΛΣ` and the
/// interior is scanned on a log grid of `n_samples` points. In higher
/// dimension the boundary and interior are sampled along random symmetric
/// directions, and the scalar boundary points are always included.
#[allow(clippy::too_many_arguments)]
pub fn certify_detector(
    s: &SampleSet,
    kernel: &RadialKernel,
    lambda: f64,
    sigma: &Metric,
    epsilon: f64,
    lambda_ratio: f64,
    n_samples: usize,
    seed: u64,
) -> Result<DetectorVerdict> {
    check_lambda(lambda)?;
    if !(lambda_ratio > 1.0 && lambda_ratio.is_finite()) {
        return invalid("neighbourhood ratio must exceed 1");
    }
    if !(epsilon >= 0.0) {
        return invalid("epsilon must be nonnegative");
    }
    if !sigma.is_positive_definite()? {
        return invalid("detector certification needs a positive definite metric");
    }
    let e_y2 = second_moments(s).e_y2;
    let dist = solver::squared_distance_matrix(s, sigma)?;
    let scalar = |t: f64| solver::objective_scaled(s, &dist, t, kernel, lambda);
    let j_center = scalar(1.0)?;
    let log_ratio = lambda_ratio.ln();

    let mut boundary = Vec::new();
    for t in [1.0 / lambda_ratio, lambda_ratio] {
        boundary.push(Witness { metric: sigma.scaled(t)?, j: scalar(t)? });
    }
    let scalar_ts: Vec<f64> = (0..n_samples)
        .map(|k| (log_ratio * (-1.0 + 2.0 * (k + 1) as f64 / (n_samples + 1) as f64)).exp())
        .collect();
    let scalar_js = evaluate_all(s.len(), &scalar_ts, |&t| scalar(t))?;
    let mut interior = Vec::new();
    for (t, j) in scalar_ts.iter().zip(scalar_js) {
        interior.push(Witness { metric: sigma.scaled(*t)?, j });
    }
    let d = sigma.dim();
    if d == 1 {
        return Ok(verdict(j_center, e_y2, epsilon, lambda_ratio, true, boundary, interior));
    }

    let root = sym_apply(sigma.matrix(), |x| x.max(0.0).sqrt())?;
    let mut probes = Vec::with_capacity(2 * n_samples);
    for k in 0..n_samples {
        let mut rng = substream(seed, k as u64);
        let dir = random_symmetric(&mut rng, d)?;
        let tau_in = log_ratio * rng.random_range(0.0..1.0f64);
        probes.push((true, Metric::new(congruent_exp(&root, &dir, log_ratio)?)?));
        probes.push((false, Metric::new(congruent_exp(&root, &dir, tau_in)?)?));
    }
    let js = evaluate_all(s.len(), &probes, |(_, m)| solver::objective(s, m, kernel, lambda))?;
    for ((on_boundary, metric), j) in probes.into_iter().zip(js) {
        let w = Witness { metric, j };
        if on_boundary {
            boundary.push(w);
        } else {
            interior.push(w);
        }
    }
    Ok(verdict(j_center, e_y2, epsilon, lambda_ratio, false, boundary, interior))
}

/// Checks the strict gap property on the boundary neighbourhood of a
/// semi-definite `Σ` with null space `W`: forms whose restriction to `W` is
/// at most `a·I` and whose restriction to `W′` lies within the ratio band of
/// `Σ|W′`. Boundary samples either saturate the cap on `W` or the band on
/// `W′`. The check is sampled and the cap `a` has no default.
#[allow(clippy::too_many_arguments)]
pub fn certify_boundary_detector(
    s: &SampleSet,
    kernel: &RadialKernel,
    lambda: f64,
    sigma: &Metric,
    a: f64,
    epsilon: f64,
    lambda_ratio: f64,
    n_samples: usize,
    seed: u64,
) -> Result<DetectorVerdict> {
    check_lambda(lambda)?;
    if !(lambda_ratio > 1.0 && lambda_ratio.is_finite()) {
        return invalid("neighbourhood ratio must exceed 1");
    }
    if !(a > 0.0 && a.is_finite()) {
        return invalid("cap on the null subspace must be positive");
    }
    if !(epsilon >= 0.0) {
        return invalid("epsilon must be nonnegative");
    }
    let d = sigma.dim();
    let w = sigma.null_space(1e-10)?;
    let k = w.ncols();
    if k == 0 {
        return invalid("metric is positive definite; use the interior certificate");
    }
    let wp = crate::numeric::orthogonal_complement(&w, d)?;
    let kp = wp.ncols();
    let restricted = wp.transpose() * sigma.matrix() * &wp;
    let root = sym_apply(&restricted, |x| x.max(0.0).sqrt())?;
    let e_y2 = second_moments(s).e_y2;
    let j_center = solver::objective(s, sigma, kernel, lambda)?;
    let log_ratio = lambda_ratio.ln();
    let assemble = |w_block: &Mat<f64>, wp_block: &Mat<f64>| -> Result<Metric> {
        let full = &w * w_block * w.transpose() + &wp * wp_block * wp.transpose();
        Metric::new(symmetrize(&full))
    };

    let mut probes = Vec::with_capacity(3 * n_samples);
    for i in 0..n_samples {
        let mut rng = substream(seed, i as u64);
        let cap_dir = random_psd_unit(&mut rng, k)?;
        let band_dir = if kp > 0 { random_symmetric(&mut rng, kp)? } else { Mat::zeros(0, 0) };
        let u = rng.random_range(0.0..1.0f64);
        let tau = log_ratio * rng.random_range(0.0..1.0f64);
        let band_in = if kp > 0 { congruent_exp(&root, &band_dir, tau)? } else { Mat::zeros(0, 0) };
        let band_edge = if kp > 0 { congruent_exp(&root, &band_dir, log_ratio)? } else { Mat::zeros(0, 0) };
        let cap_full = Mat::from_fn(k, k, |r, c| a * cap_dir[(r, c)]);
        let cap_in = Mat::from_fn(k, k, |r, c| u * a * cap_dir[(r, c)]);
        probes.push((true, assemble(&cap_full, &band_in)?));
        if kp > 0 {
            probes.push((true, assemble(&cap_in, &band_edge)?));
        }
        probes.push((false, assemble(&cap_in, &band_in)?));
    }
    let js = evaluate_all(s.len(), &probes, |(_, m)| solver::objective(s, m, kernel, lambda))?;
    let mut boundary = Vec::new();
    let mut interior = Vec::new();
    for ((on_boundary, metric), j) in probes.into_iter().zip(js) {
        let w = Witness { metric, j };
        if on_boundary {
            boundary.push(w);
        } else {
            interior.push(w);
        }
    }
    Ok(verdict(j_center, e_y2, epsilon, lambda_ratio, false, boundary, interior))
}

/// Merges atoms that coincide within a relative tolerance. Returns the group
/// id of every atom and, per group, `(mass, mean y, within-group ½Σp(y−ȳ)²)`.
fn merge_coincident(s: &SampleSet) -> (Vec<usize>, Vec<(f64, f64, f64)>) {
    let xs = s.xs();
    let scale = xs.iter().flatten().fold(0.0f64, |a, &b| a.max(b.abs()));
    let groups = group_points(&xs, 1e-12 * (1.0 + scale));
    (groups.clone(), group_stats(s, &groups))
}

fn group_stats(s: &SampleSet, groups: &[usize]) -> Vec<(f64, f64, f64)> {
    let n = groups.iter().max().map_or(0, |g| g + 1);
    let mut mass = vec![0.0; n];
    let mut my = vec![0.0; n];
    for (a, &g) in s.atoms.iter().zip(groups) {
        mass[g] += a.p;
        my[g] += a.p * a.y;
    }
    let mean: Vec<f64> = (0..n).map(|g| my[g] / mass[g]).collect();
    let mut var = vec![0.0; n];
    for (a, &g) in s.atoms.iter().zip(groups) {
        var[g] += 0.5 * a.p * (a.y - mean[g]).powi(2);
    }
    (0..n).map(|g| (mass[g], mean[g], var[g])).collect()
}

/// `lim 𝒥(Σ)` as every pairwise distance diverges:
/// `Σ ½λpᵢ/(λ+pᵢ)·yᵢ²` over distinct atoms, after merging coincident atoms
/// into their total mass with the within-atom variance added.
pub fn limit_at_infinity_full(s: &SampleSet, lambda: f64) -> Result<f64> {
    check_lambda(lambda)?;
    let (_, stats) = merge_coincident(s);
    let terms: Vec<f64> = stats
        .iter()
        .map(|&(p, y, var)| 0.5 * lambda * p / (lambda + p) * y * y + var)
        .collect();
    Ok(pairwise_sum(&terms))
}

#[derive(Clone, Copy, Debug, Serialize)]
pub struct PotentialApprox {
    pub approx_j: f64,
    pub potential: f64,
    pub off_diag_max: f64,
}

/// Second-order expansion of `𝒥` for large `Σ`: the value at infinity plus
/// the pairwise potential `−(λ/2)Σ_{i≠j} cᵢcⱼ𝒦(D_ij)` with
/// `cᵢ = pᵢyᵢ/(λ+pᵢ)`. The error is of order `off_diag_max²`.
pub fn pairwise_potential_approx(s: &SampleSet, sigma: &Metric, kernel: &RadialKernel, lambda: f64) -> Result<PotentialApprox> {
    check_lambda(lambda)?;
    let dist = solver::squared_distance_matrix(s, sigma)?;
    let c: Vec<f64> = s.atoms.iter().map(|a| a.p * a.y / (lambda + a.p)).collect();
    let m = s.len();
    let mut off_diag_max: f64 = 0.0;
    for i in 0..m {
        for j in 0..i {
            off_diag_max = off_diag_max.max(kernel.eval_unchecked(dist[(i, j)]));
        }
    }
    let sum = crate::numeric::double_sum(m, |i, j| {
        if i == j {
            0.0
        } else {
            c[i] * c[j] * kernel.eval_unchecked(dist[(i, j)])
        }
    });
    let potential = -0.5 * lambda * sum;
    Ok(PotentialApprox {
        approx_j: limit_at_infinity_full(s, lambda)? + potential,
        potential,
        off_diag_max,
    })
}

#[derive(Clone, Debug, Serialize)]
pub struct GroupLimit {
    pub group: usize,
    pub atoms: Vec<usize>,
    pub j: f64,
}

#[derive(Clone, Debug, Serialize)]
pub struct PartialLimit {
    pub j_limit: f64,
    pub per_group: Vec<GroupLimit>,
    /// Per-atom values of the reduced minimizers.
    pub fitted: Vec<f64>,
}

/// Value of `𝒥` as the metric on `W′ = W⊥` diverges while its restriction
/// to `W` tends to `sigma_w`. Atoms are grouped by their projection onto
/// `W′`; each group solves the reduced problem on `W` with coordinates
/// `Wᵀx`, metric `sigma_w` and its global masses.
pub fn limit_at_partial_infinity(s: &SampleSet, w_basis: &Mat<f64>, sigma_w: &Metric, lambda: f64, kernel: &RadialKernel) -> Result<PartialLimit> {
    check_lambda(lambda)?;
    let d = s.dim;
    check_orthonormal(w_basis, d)?;
    let k = w_basis.ncols();
    if sigma_w.dim() != k {
        return invalid(format!("metric on W is {}-dimensional but W has dimension {k}", sigma_w.dim()));
    }
    let groups = quotient_groups(s, w_basis);
    let n_groups = groups.iter().max().map_or(0, |g| g + 1);
    let members: Vec<Vec<usize>> = (0..n_groups)
        .map(|g| (0..s.len()).filter(|&i| groups[i] == g).collect())
        .collect();
    let solved: Vec<Result<(f64, Vec<f64>)>> = members
        .par_iter()
        .map(|idx| {
            let atoms: Vec<Atom> = idx
                .iter()
                .map(|&i| {
                    let a = &s.atoms[i];
                    let x = (0..k).map(|c| (0..d).map(|r| w_basis[(r, c)] * a.x[r]).sum()).collect();
                    Atom { x, y: a.y, p: a.p, label: a.label }
                })
                .collect();
            let reduced = SampleSet::with_masses(k, atoms)?;
            let r = solver::solve(&reduced, sigma_w, kernel, lambda)?;
            Ok((r.j_value, r.fitted))
        })
        .collect();
    let mut fitted = vec![0.0; s.len()];
    let mut per_group = Vec::with_capacity(n_groups);
    for (g, (idx, res)) in members.into_iter().zip(solved).enumerate() {
        let (j, f) = res?;
        for (&i, v) in idx.iter().zip(f) {
            fitted[i] = v;
        }
        per_group.push(GroupLimit { group: g, atoms: idx, j });
    }
    let js: Vec<f64> = per_group.iter().map(|g| g.j).collect();
    Ok(PartialLimit { j_limit: pairwise_sum(&js), per_group, fitted })
}

#[derive(Clone, Copy, Debug, Serialize)]
pub struct AprioriBounds {
    pub sigma_lower: f64,
    pub sigma_upper: f64,
}

/// `C_𝒦 = Σ w_k w_l (π/(t_k + t_l))^½` for a Gaussian-sum profile.
pub fn kernel_constant(kernel: &RadialKernel) -> Result<f64> {
    let (t, w) = kernel
        .gaussian_sum()
        .ok_or_else(|| Error::Unsupported("kernel constant needs a Gaussian-sum representation".into()))?;
    let mut terms = Vec::with_capacity(t.len() * t.len());
    for k in 0..t.len() {
        for l in 0..t.len() {
            terms.push(w[k] * w[l] * (std::f64::consts::PI / (t[k] + t[l])).sqrt());
        }
    }
    Ok(pairwise_sum(&terms))
}

/// Eigenvalue range that any interior scale detector must lie in:
/// `ελ/(2β sup|𝒦′|)` from below with `β = (E|X|⁴)^½`, and
/// `(C_𝒦 p₀)²(λε)⁻⁴` from above, where `p₀` bounds the density of every
/// one-dimensional marginal of `X`.
pub fn detector_apriori_bounds(e_x4: f64, kernel_sup_deriv: f64, lambda: f64, epsilon: f64, p0: f64, c_k: f64) -> Result<AprioriBounds> {
    for (name, v) in [("E|X|^4", e_x4), ("sup|K'|", kernel_sup_deriv), ("lambda", lambda), ("epsilon", epsilon), ("p0", p0), ("C_K", c_k)] {
        if !(v > 0.0 && v.is_finite()) {
            return invalid(format!("{name} must be positive and finite"));
        }
    }
    Ok(AprioriBounds {
        sigma_lower: epsilon * lambda / (2.0 * e_x4.sqrt() * kernel_sup_deriv),
        sigma_upper: (c_k * p0).powi(2) * (lambda * epsilon).powi(-4),
    })
}

#[derive(Clone, Debug, Serialize)]
pub struct StratumBound {
    pub null_dim: usize,
    pub lower_bound: f64,
}

#[derive(Clone, Debug, Serialize)]
pub struct EssentialDependence {
    pub j_interior: f64,
    pub strata: Vec<StratumBound>,
    pub min_lower_bound: f64,
    pub required_gap: f64,
    pub holds: bool,
    /// Always false: only the nominated null subspaces (and `W = V`) are
    /// checked, not every boundary stratum.
    pub exhaustive: bool,
}

/// Certifies `inf_interior 𝒥 ≤ inf_boundary 𝒥 − 2εE|Y|²` using
/// `𝒥 ≥ ½E[Var(Y | X_{W′})]` on the stratum with null space `W`, for each
/// nominated orthonormal basis of `W` and for `W = V`.
pub fn essential_dependence(s: &SampleSet, j_interior: f64, nominated: &[Mat<f64>], epsilon: f64) -> Result<EssentialDependence> {
    let d = s.dim;
    let mut strata = Vec::with_capacity(nominated.len() + 1);
    let everything = Mat::<f64>::identity(d, d);
    for w in std::iter::once(&everything).chain(nominated) {
        check_orthonormal(w, d)?;
        let groups = quotient_groups(s, w);
        let var: Vec<f64> = group_stats(s, &groups).iter().map(|g| g.2).collect();
        strata.push(StratumBound { null_dim: w.ncols(), lower_bound: pairwise_sum(&var) });
    }
    let min_lower_bound = strata.iter().map(|b| b.lower_bound).fold(f64::INFINITY, f64::min);
    let required_gap = 2.0 * epsilon * second_moments(s).e_y2;
    Ok(EssentialDependence {
        j_interior,
        holds: j_interior <= min_lower_bound - required_gap,
        strata,
        min_lower_bound,
        required_gap,
        exhaustive: false,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn pair(y2: f64) -> SampleSet {
        SampleSet::new(1, vec![Atom::new(vec![0.0], 1.0, 0.5), Atom::new(vec![1.0], y2, 0.5)]).unwrap()
    }

    #[test]
    fn plateaus_collapse() {
        assert_eq!(local_minima(&[3.0, 1.0, 1.0, 1.0, 2.0]), vec![2]);
        assert_eq!(local_minima(&[3.0, 1.0, 1.0, 1.0]), Vec::<usize>::new());
        assert_eq!(local_minima(&[1.0, 2.0, 3.0]), Vec::<usize>::new());
        assert_eq!(local_minima(&[2.0, 1.0, 2.0, 0.5, 3.0]), vec![1, 3]);
    }

    #[test]
    fn single_atom_sweep_is_flat() {
        let s = SampleSet::new(1, vec![Atom::new(vec![0.3], 2.0, 1.0)]).unwrap();
        let k = RadialKernel::gaussian(1.0).unwrap();
        let t = sweep_1d(&s, &k, 0.1, &Metric::identity(1), 1e-2, 1e4, 20).unwrap();
        let want = 0.1 / (2.0 * 1.1) * 4.0;
        assert!(t.values.iter().all(|v| (v - want).abs() < 1e-14));
        assert!(t.minima_indices.is_empty());
    }

    #[test]
    fn repulsive_pair_sweep_decreases() {
        let k = RadialKernel::gaussian(1.0).unwrap();
        let t = sweep_1d(&pair(-1.0), &k, 0.1, &Metric::identity(1), 1e-2, 30.0, 50).unwrap();
        assert!(t.values.windows(2).all(|w| w[1] < w[0]));
        assert!((t.j_at_zero - 0.5).abs() < 1e-14);
        let q = (-30.0f64).exp();
        assert!((t.values[49] - 0.1 / (1.2 - q)).abs() < 1e-14);
        assert!(t.minima_indices.is_empty());
    }

    #[test]
    fn golden_section_finds_quadratic_minimum() {
        let k = RadialKernel::gaussian(1.0).unwrap();
        let s = pair(-1.0);
        let m = refine_minimum_1d(&s, &k, 0.1, &Metric::identity(1), 1.0, 10.0, 1e-8).unwrap();
        assert!((m.t - 10.0).abs() < 1e-6);
    }

    #[test]
    fn limit_values() {
        assert!((limit_at_infinity_full(&pair(-1.0), 0.1).unwrap() - 0.1 / 1.2).abs() < 1e-15);
        let merged = SampleSet::new(1, vec![Atom::new(vec![0.0], 1.0, 0.5), Atom::new(vec![0.0], -1.0, 0.5)]).unwrap();
        let want = 0.5;
        assert!((limit_at_infinity_full(&merged, 0.1).unwrap() - want).abs() < 1e-15);
    }

    #[test]
    fn potential_matches_two_atom_expansion() {
        let k = RadialKernel::gaussian(1.0).unwrap();
        let q: f64 = 0.01;
        let sig = Metric::scalar(1, -q.ln()).unwrap();
        let approx = pairwise_potential_approx(&pair(-1.0), &sig, &k, 0.1).unwrap();
        assert!((approx.approx_j - (0.1 / 1.2 + 0.5 / 0.72 * 0.1 * q)).abs() < 1e-12);
        let exact = solver::objective(&pair(-1.0), &sig, &k, 0.1).unwrap();
        assert!((exact - 0.1 / 1.19).abs() < 1e-12);
        assert!((approx.approx_j - exact).abs() <= approx.off_diag_max.powi(2));
        let attractive = pairwise_potential_approx(&pair(1.0), &sig, &k, 0.1).unwrap();
        assert!(attractive.potential < 0.0);
    }

    #[test]
    fn zero_dimensional_partial_limit_is_full_limit() {
        let s = SampleSet::new(
            2,
            vec![
                Atom::new(vec![0.0, 0.0], 1.0, 0.2),
                Atom::new(vec![1.0, 0.0], -0.5, 0.3),
                Atom::new(vec![1.0, 0.0], 0.5, 0.1),
                Atom::new(vec![0.0, 3.0], 2.0, 0.4),
            ],
        )
        .unwrap();
        let k = RadialKernel::gaussian(1.0).unwrap();
        let w = Mat::<f64>::zeros(2, 0);
        let lim = limit_at_partial_infinity(&s, &w, &Metric::zeros(0), 0.1, &k).unwrap();
        let full = limit_at_infinity_full(&s, 0.1).unwrap();
        assert!((lim.j_limit - full).abs() < 1e-14);
        assert_eq!(lim.per_group.len(), 3);
    }

    #[test]
    fn apriori_examples() {
        let k = RadialKernel::gaussian(1.0).unwrap();
        let c = kernel_constant(&k).unwrap();
        assert!((c - (std::f64::consts::PI / 2.0).sqrt()).abs() < 1e-15);
        let b = detector_apriori_bounds(1.0, 1.0, 0.1, 0.05, 1.0, c).unwrap();
        assert!((b.sigma_lower - 0.0025).abs() < 1e-15);
        assert!(kernel_constant(&RadialKernel::inverse_power(1.0).unwrap()).is_err());
    }

    #[test]
    fn single_atom_is_never_a_detector() {
        let s = SampleSet::new(2, vec![Atom::new(vec![0.3, 0.1], 2.0, 1.0)]).unwrap();
        let k = RadialKernel::gaussian(1.0).unwrap();
        let v = certify_detector(&s, &k, 0.1, &Metric::identity(2), 0.01, 5.0, 8, 1).unwrap();
        assert!(!v.is_detector);
        assert!((v.boundary_min - v.j_center).abs() < 1e-14);
        assert!(certify_detector(&s, &k, 0.1, &Metric::identity(2), 0.01, 1.0, 8, 1).is_err());
    }

    #[test]
    fn single_atom_descent_stops_immediately() {
        let s = SampleSet::new(1, vec![Atom::new(vec![0.3], 2.0, 1.0)]).unwrap();
        let k = RadialKernel::gaussian(1.0).unwrap();
        let t = descend(&s, &k, 0.1, &Metric::identity(1), 10, 1e-12).unwrap();
        assert_eq!(t.steps.len(), 1);
        assert_eq!(t.stop, StopReason::GradientTolerance);
    }

    #[test]
    fn attractive_pair_descends_from_large_scale() {
        let k = RadialKernel::gaussian(1.0).unwrap();
        let t = descend(&pair(1.0), &k, 0.1, &Metric::scalar(1, 5.0).unwrap(), 5, 1e-14).unwrap();
        assert!(t.steps.len() >= 2);
        assert!(t.steps[1].j < t.steps[0].j);
        assert!(t.steps.windows(2).all(|w| w[1].j <= w[0].j));
    }

    #[test]
    fn essential_dependence_on_constant_target_fails() {
        let s = SampleSet::new(1, vec![Atom::new(vec![0.0], 1.0, 0.5), Atom::new(vec![1.0], 1.0, 0.5)]).unwrap();
        let e = essential_dependence(&s, 0.01, &[], 0.01).unwrap();
        assert_eq!(e.min_lower_bound, 0.0);
        assert!(!e.holds);
        assert!(!e.exhaustive);
    }
}
