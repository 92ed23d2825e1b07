#![allow(dead_code)]

use faer::Mat;
use metric_krr::numeric::sym_eigen;
use metric_krr::sample::{Atom, SampleSet};
use metric_krr::{Metric, RadialKernel};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use rand_distr::StandardNormal;

pub fn rng(seed: u64) -> ChaCha20Rng {
    ChaCha20Rng::seed_from_u64(seed)
}

pub fn normal(rng: &mut ChaCha20Rng) -> f64 {
    rng.sample(StandardNormal)
}

pub fn log_uniform(rng: &mut ChaCha20Rng, lo: f64, hi: f64) -> f64 {
    (lo.ln() + rng.random::<f64>() * (hi.ln() - lo.ln())).exp()
}

pub fn random_masses(rng: &mut ChaCha20Rng, m: usize) -> Vec<f64> {
    let raw: Vec<f64> = (0..m).map(|_| 0.1 + rng.random::<f64>()).collect();
    let total: f64 = raw.iter().sum();
    raw.into_iter().map(|v| v / total).collect()
}

/// Gaussian atoms with normal values and random masses.
pub fn random_set(rng: &mut ChaCha20Rng, d: usize, m: usize, spread: f64) -> SampleSet {
    let ps = random_masses(rng, m);
    let atoms = ps
        .into_iter()
        .map(|p| {
            let x = (0..d).map(|_| spread * normal(rng)).collect();
            Atom::new(x, normal(rng), p)
        })
        .collect();
    SampleSet::with_masses(d, atoms).unwrap()
}

/// `AᵀA/d + floor·I` for a standard normal `A`.
pub fn random_metric(rng: &mut ChaCha20Rng, d: usize, floor: f64) -> Metric {
    let a = Mat::from_fn(d, d, |_, _| normal(rng));
    let s = Mat::from_fn(d, d, |i, j| {
        let v: f64 = (0..d).map(|k| a[(k, i)] * a[(k, j)]).sum::<f64>() / d as f64;
        v + if i == j { floor } else { 0.0 }
    });
    Metric::new(s).unwrap()
}

/// `UᵀU` for a random `rank × d` matrix `U`.
pub fn random_low_rank_metric(rng: &mut ChaCha20Rng, d: usize, rank: usize) -> Metric {
    let u = Mat::from_fn(rank, d, |_, _| normal(rng));
    Metric::new(u.transpose() * &u).unwrap()
}

pub fn random_orthogonal(rng: &mut ChaCha20Rng, d: usize) -> Mat<f64> {
    let a = Mat::from_fn(d, d, |_, _| normal(rng));
    let sym = Mat::from_fn(d, d, |i, j| a[(i, j)] + a[(j, i)]);
    sym_eigen(&sym).unwrap().1
}

/// One of: Gaussian, Sobolev with `γ ∈ {0.5, 1.5, 3}`, inverse power.
pub fn kernel_by_index(rng: &mut ChaCha20Rng, idx: usize) -> RadialKernel {
    match idx % 5 {
        0 => RadialKernel::gaussian(log_uniform(rng, 0.3, 3.0)).unwrap(),
        1 => RadialKernel::sobolev(0.5, 256).unwrap(),
        2 => RadialKernel::sobolev(1.5, 256).unwrap(),
        3 => RadialKernel::sobolev(3.0, 256).unwrap(),
        _ => RadialKernel::inverse_power(log_uniform(rng, 0.5, 3.0)).unwrap(),
    }
}

pub fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / b.abs().max(f64::MIN_POSITIVE)
}

pub fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

pub fn frob(a: &Mat<f64>) -> f64 {
    let mut s = 0.0;
    for j in 0..a.ncols() {
        for i in 0..a.nrows() {
            s += a[(i, j)] * a[(i, j)];
        }
    }
    s.sqrt()
}

pub fn max_eigenvalue(a: &Mat<f64>) -> f64 {
    if a.nrows() == 0 {
        return 0.0;
    }
    *sym_eigen(a).unwrap().0.last().unwrap()
}

pub fn min_eigenvalue(a: &Mat<f64>) -> f64 {
    if a.nrows() == 0 {
        return 0.0;
    }
    sym_eigen(a).unwrap().0[0]
}

/// Half the mass-weighted conditional variance of `y` given the class of
/// atoms at zero `sigma`-distance from one another.
pub fn half_conditional_variance(s: &SampleSet, sigma: &Metric) -> f64 {
    let xs = s.xs();
    let m = s.len();
    let mut class = vec![usize::MAX; m];
    let mut n = 0;
    for i in 0..m {
        if class[i] != usize::MAX {
            continue;
        }
        class[i] = n;
        for j in i + 1..m {
            if class[j] == usize::MAX && sigma.dist_sq(&xs[i], &xs[j]) <= 1e-13 {
                class[j] = n;
            }
        }
        n += 1;
    }
    let mut mass = vec![0.0; n];
    let mut first = vec![0.0; n];
    let mut second = vec![0.0; n];
    for (a, &c) in s.atoms.iter().zip(&class) {
        mass[c] += a.p;
        first[c] += a.p * a.y;
        second[c] += a.p * a.y * a.y;
    }
    0.5 * (0..n).map(|c| second[c] - first[c] * first[c] / mass[c]).sum::<f64>()
}
