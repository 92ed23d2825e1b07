//! Completely monotone radial profiles `𝒦(r)`, evaluated at squared distances.
//!
//! Every profile except the inverse power is a nonnegative mixture of
//! Gaussians, `𝒦(r) = Σ w_k exp(−t_k r)` with `Σ w_k = 1`. The Sobolev family
//!
//! ```text
//! K_γ(r) = Γ(γ)⁻¹ ∫ y^{γ−1} e^{−y} e^{−r/(4y)} dy
//! ```
//!
//! is discretized once at construction by a trapezoidal rule in the variable
//! `u`, where `y = exp(c·sinh u)`. The double-exponential decay of the
//! transformed integrand at both ends makes the rule converge quickly even
//! though `e^{−r/(4y)}` is far from polynomial near `y = 0`.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};

pub const DEFAULT_SOBOLEV_NODES: usize = 256;
const SINH_SCALE: f64 = 2.0;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum KernelKind {
    Gaussian { beta: f64 },
    Sobolev { gamma: f64, quad_nodes: usize },
    InversePower { alpha: f64 },
    Mixture { nodes: Vec<f64>, weights: Vec<f64> },
}

/// A validated radial profile. The Gaussian-sum representation is cached for
/// every kind that has one.
#[derive(Clone, Debug)]
pub struct RadialKernel {
    kind: KernelKind,
    nodes: Vec<f64>,
    weights: Vec<f64>,
}

impl RadialKernel {
    pub fn gaussian(beta: f64) -> Result<Self> {
        if !(beta > 0.0 && beta.is_finite()) {
            return invalid(format!("gaussian beta must be positive, got {beta}"));
        }
        Ok(Self {
            kind: KernelKind::Gaussian { beta },
            nodes: vec![beta],
            weights: vec![1.0],
        })
    }

    pub fn sobolev(gamma: f64, quad_nodes: usize) -> Result<Self> {
        if !(gamma > 0.0 && gamma.is_finite()) {
            return invalid(format!("sobolev gamma must be positive, got {gamma}"));
        }
        if quad_nodes < 2 {
            return invalid("sobolev quadrature needs at least 2 nodes");
        }
        let (nodes, weights) = sobolev_rule(gamma, quad_nodes);
        Ok(Self {
            kind: KernelKind::Sobolev { gamma, quad_nodes },
            nodes,
            weights,
        })
    }

    pub fn inverse_power(alpha: f64) -> Result<Self> {
        if !(alpha > 0.0 && alpha.is_finite()) {
            return invalid(format!("inverse power alpha must be positive, got {alpha}"));
        }
        Ok(Self {
            kind: KernelKind::InversePower { alpha },
            nodes: Vec::new(),
            weights: Vec::new(),
        })
    }

    /// Explicit mixture; weights are rescaled to sum to one.
    pub fn mixture(nodes: Vec<f64>, weights: Vec<f64>) -> Result<Self> {
        if nodes.is_empty() || nodes.len() != weights.len() {
            return invalid("mixture needs equally many (nonzero) nodes and weights");
        }
        if nodes.iter().any(|&t| !(t > 0.0 && t.is_finite())) {
            return invalid("mixture nodes must be positive");
        }
        if weights.iter().any(|&w| !(w > 0.0 && w.is_finite())) {
            return invalid("mixture weights must be positive");
        }
        let total: f64 = weights.iter().sum();
        let weights: Vec<f64> = weights.iter().map(|w| w / total).collect();
        Ok(Self {
            kind: KernelKind::Mixture {
                nodes: nodes.clone(),
                weights: weights.clone(),
            },
            nodes,
            weights,
        })
    }

    pub fn from_kind(kind: &KernelKind) -> Result<Self> {
        match kind {
            KernelKind::Gaussian { beta } => Self::gaussian(*beta),
            KernelKind::Sobolev { gamma, quad_nodes } => Self::sobolev(*gamma, *quad_nodes),
            KernelKind::InversePower { alpha } => Self::inverse_power(*alpha),
            KernelKind::Mixture { nodes, weights } => Self::mixture(nodes.clone(), weights.clone()),
        }
    }

    pub fn kind(&self) -> &KernelKind {
        &self.kind
    }

    /// `𝒦(r)`.
    pub fn eval(&self, r: f64) -> Result<f64> {
        if !(r >= 0.0) {
            return Err(Error::Domain(format!("kernel argument must be >= 0, got {r}")));
        }
        Ok(self.eval_unchecked(r))
    }

    /// `𝒦′(r)`.
    pub fn deriv(&self, r: f64) -> Result<f64> {
        if !(r >= 0.0) {
            return Err(Error::Domain(format!("kernel argument must be >= 0, got {r}")));
        }
        if r == 0.0 && self.deriv_singular_at_zero() {
            return Err(Error::Singular(
                "sobolev derivative with gamma <= 1 is unbounded at r = 0".into(),
            ));
        }
        Ok(self.deriv_unchecked(r))
    }

    /// Evaluation without the domain check; callers guarantee `r >= 0`.
    #[inline]
    pub fn eval_unchecked(&self, r: f64) -> f64 {
        match &self.kind {
            KernelKind::Gaussian { beta } => (-beta * r).exp(),
            KernelKind::InversePower { alpha } => (1.0 + r).powf(-alpha),
            _ => self
                .nodes
                .iter()
                .zip(&self.weights)
                .map(|(t, w)| w * (-t * r).exp())
                .sum(),
        }
    }

    #[inline]
    pub fn deriv_unchecked(&self, r: f64) -> f64 {
        match &self.kind {
            KernelKind::Gaussian { beta } => -beta * (-beta * r).exp(),
            KernelKind::InversePower { alpha } => -alpha * (1.0 + r).powf(-alpha - 1.0),
            _ => -self
                .nodes
                .iter()
                .zip(&self.weights)
                .map(|(t, w)| w * t * (-t * r).exp())
                .sum::<f64>(),
        }
    }

    pub fn deriv_singular_at_zero(&self) -> bool {
        matches!(self.kind, KernelKind::Sobolev { gamma, .. } if gamma <= 1.0)
    }

    /// `sup |𝒦′| = |𝒦′(0)|`, or `None` when the derivative is unbounded.
    pub fn sup_abs_deriv(&self) -> Option<f64> {
        match &self.kind {
            KernelKind::Gaussian { beta } => Some(*beta),
            KernelKind::InversePower { alpha } => Some(*alpha),
            KernelKind::Sobolev { gamma, .. } if *gamma <= 1.0 => None,
            KernelKind::Sobolev { gamma, .. } => Some(1.0 / (4.0 * (gamma - 1.0))),
            KernelKind::Mixture { .. } => Some(self.nodes.iter().zip(&self.weights).map(|(t, w)| t * w).sum()),
        }
    }

    /// Discrete Gaussian-sum representation.
    pub fn mixture_of(&self) -> Result<RadialKernel> {
        match self.kind {
            KernelKind::InversePower { .. } => Err(Error::Unsupported(
                "inverse power kernels have no discrete Gaussian-sum representation".into(),
            )),
            _ => RadialKernel::mixture(self.nodes.clone(), self.weights.clone()),
        }
    }

    /// Nodes and weights of the Gaussian-sum representation, if any.
    pub fn gaussian_sum(&self) -> Option<(&[f64], &[f64])> {
        if self.nodes.is_empty() {
            None
        } else {
            Some((&self.nodes, &self.weights))
        }
    }

    /// Profile of `𝒦²`, whose mixture pairs nodes `t_k + t_l` with weights `w_k w_l`.
    pub fn squared(&self) -> Result<RadialKernel> {
        let (t, w) = self.gaussian_sum().ok_or_else(|| {
            Error::Unsupported("squared profile needs a Gaussian-sum representation".into())
        })?;
        let mut nodes = Vec::with_capacity(t.len() * t.len());
        let mut weights = Vec::with_capacity(t.len() * t.len());
        for k in 0..t.len() {
            for l in 0..t.len() {
                nodes.push(t[k] + t[l]);
                weights.push(w[k] * w[l]);
            }
        }
        RadialKernel::mixture(nodes, weights)
    }
}

impl fmt::Display for RadialKernel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match &self.kind {
            KernelKind::Gaussian { beta } => write!(f, "gaussian:beta={beta}"),
            KernelKind::Sobolev { gamma, quad_nodes } => {
                write!(f, "sobolev:gamma={gamma},nodes={quad_nodes}")
            }
            KernelKind::InversePower { alpha } => write!(f, "invpow:alpha={alpha}"),
            KernelKind::Mixture { nodes, weights } => {
                let parts: Vec<String> = nodes
                    .iter()
                    .zip(weights)
                    .map(|(t, w)| format!("{t}:{w}"))
                    .collect();
                write!(f, "mixture:{}", parts.join(","))
            }
        }
    }
}

impl FromStr for RadialKernel {
    type Err = Error;

    /// Parses `gaussian:beta=<f>`, `sobolev:gamma=<f>[,nodes=<n>]`,
    /// `invpow:alpha=<f>` or `mixture:<t1>:<w1>,<t2>:<w2>,...`.
    fn from_str(s: &str) -> Result<Self> {
        let (head, rest) = s
            .split_once(':')
            .ok_or_else(|| Error::Invalid(format!("kernel spec `{s}` has no parameters")))?;
        let num = |v: &str| -> Result<f64> {
            v.trim()
                .parse::<f64>()
                .map_err(|_| Error::Invalid(format!("bad number `{v}` in kernel spec `{s}`")))
        };
        let params = || -> Result<Vec<(String, String)>> {
            rest.split(',')
                .map(|kv| {
                    kv.split_once('=')
                        .map(|(k, v)| (k.trim().to_string(), v.trim().to_string()))
                        .ok_or_else(|| Error::Invalid(format!("expected key=value, got `{kv}`")))
                })
                .collect()
        };
        match head.trim() {
            "gaussian" => {
                let mut beta = None;
                for (k, v) in params()? {
                    match k.as_str() {
                        "beta" => beta = Some(num(&v)?),
                        _ => return invalid(format!("unknown gaussian parameter `{k}`")),
                    }
                }
                RadialKernel::gaussian(beta.ok_or_else(|| Error::Invalid("gaussian needs beta".into()))?)
            }
            "sobolev" => {
                let mut gamma = None;
                let mut nodes = DEFAULT_SOBOLEV_NODES;
                for (k, v) in params()? {
                    match k.as_str() {
                        "gamma" => gamma = Some(num(&v)?),
                        "nodes" => {
                            nodes = v
                                .parse()
                                .map_err(|_| Error::Invalid(format!("bad node count `{v}`")))?
                        }
                        _ => return invalid(format!("unknown sobolev parameter `{k}`")),
                    }
                }
                RadialKernel::sobolev(gamma.ok_or_else(|| Error::Invalid("sobolev needs gamma".into()))?, nodes)
            }
            "invpow" => {
                let mut alpha = None;
                for (k, v) in params()? {
                    match k.as_str() {
                        "alpha" => alpha = Some(num(&v)?),
                        _ => return invalid(format!("unknown invpow parameter `{k}`")),
                    }
                }
                RadialKernel::inverse_power(alpha.ok_or_else(|| Error::Invalid("invpow needs alpha".into()))?)
            }
            "mixture" => {
                let mut nodes = Vec::new();
                let mut weights = Vec::new();
                for pair in rest.split(',') {
                    let (t, w) = pair
                        .split_once(':')
                        .ok_or_else(|| Error::Invalid(format!("expected t:w, got `{pair}`")))?;
                    nodes.push(num(t)?);
                    weights.push(num(w)?);
                }
                RadialKernel::mixture(nodes, weights)
            }
            other => invalid(format!("unknown kernel kind `{other}`")),
        }
    }
}

/// Gaussian-sum nodes `t = 1/(4y)` and normalized weights for `K_γ`.
fn sobolev_rule(gamma: f64, n: usize) -> (Vec<f64>, Vec<f64>) {
    // The lower window must also resolve the derivative, whose integrand
    // behaves like y^{γ−2} near zero.
    let low_exponent = if gamma > 1.0 { gamma - 1.0 } else { gamma };
    let s_lo = (-40.0 / low_exponent).max(-600.0);
    let s_hi = (60.0 + 4.0 * gamma).ln();
    let u_lo = (s_lo / SINH_SCALE).asinh();
    let u_hi = (s_hi / SINH_SCALE).asinh();
    let h = (u_hi - u_lo) / (n - 1) as f64;

    let mut nodes = Vec::with_capacity(n);
    let mut weights = Vec::with_capacity(n);
    for k in 0..n {
        let u = u_lo + h * k as f64;
        let s = SINH_SCALE * u.sinh();
        let end = if k == 0 || k == n - 1 { 0.5 } else { 1.0 };
        let w = end * h * (gamma * s - s.exp()).exp() * SINH_SCALE * u.cosh();
        if w > 0.0 {
            nodes.push(0.25 * (-s).exp());
            weights.push(w);
        }
    }
    let total: f64 = weights.iter().sum();
    for w in &mut weights {
        *w /= total;
    }
    (nodes, weights)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rel(a: f64, b: f64) -> f64 {
        (a - b).abs() / b.abs()
    }

    #[test]
    fn gaussian_values() {
        let k = RadialKernel::gaussian(1.0).unwrap();
        assert_eq!(k.eval(0.0).unwrap(), 1.0);
        assert!((k.deriv(1.0).unwrap() + (-1.0f64).exp()).abs() < 1e-15);
        let k2 = RadialKernel::gaussian(2.0).unwrap();
        assert!((k2.eval(1.0).unwrap() - (-2.0f64).exp()).abs() < 1e-15);
    }

    #[test]
    fn sobolev_half_is_exp_sqrt() {
        let k = RadialKernel::sobolev(0.5, DEFAULT_SOBOLEV_NODES).unwrap();
        assert!(rel(k.eval(4.0).unwrap(), (-2.0f64).exp()) < 1e-10);
        let k64 = RadialKernel::sobolev(0.5, 64).unwrap();
        assert!((k64.mixture_of().unwrap().eval(1.0).unwrap() - (-1.0f64).exp()).abs() < 1e-8);
    }

    #[test]
    fn sobolev_recurrence_example() {
        let k = RadialKernel::sobolev(1.5, DEFAULT_SOBOLEV_NODES).unwrap();
        assert!(rel(k.deriv(4.0).unwrap(), -0.5 * (-2.0f64).exp()) < 1e-9);
    }

    #[test]
    fn sobolev_weights_normalized() {
        let k = RadialKernel::sobolev(2.0, 64).unwrap();
        let (_, w) = k.gaussian_sum().unwrap();
        assert!((w.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        assert!((k.eval(0.0).unwrap() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn single_node_mixture_slope() {
        let k = RadialKernel::mixture(vec![1.0], vec![1.0]).unwrap();
        assert_eq!(k.deriv(0.0).unwrap(), -1.0);
    }

    #[test]
    fn mixture_weights_renormalized() {
        let k = RadialKernel::mixture(vec![1.0, 2.0], vec![2.0, 2.0]).unwrap();
        assert!((k.eval(0.0).unwrap() - 1.0).abs() < 1e-15);
    }

    #[test]
    fn gaussian_mixture_is_dirac() {
        let m = RadialKernel::gaussian(3.0).unwrap().mixture_of().unwrap();
        assert_eq!(m.gaussian_sum().unwrap(), (&[3.0][..], &[1.0][..]));
    }

    #[test]
    fn errors() {
        let k = RadialKernel::gaussian(1.0).unwrap();
        assert!(matches!(k.eval(-1.0), Err(Error::Domain(_))));
        let s = RadialKernel::sobolev(0.5, 64).unwrap();
        assert!(matches!(s.deriv(0.0), Err(Error::Singular(_))));
        let p = RadialKernel::inverse_power(1.0).unwrap();
        assert!(matches!(p.mixture_of(), Err(Error::Unsupported(_))));
    }

    #[test]
    fn parse_round_trip() {
        for spec in [
            "gaussian:beta=1.5",
            "sobolev:gamma=0.5,nodes=128",
            "invpow:alpha=2",
            "mixture:1:0.25,3:0.75",
        ] {
            let k: RadialKernel = spec.parse().unwrap();
            let again: RadialKernel = k.to_string().parse().unwrap();
            assert_eq!(k.kind(), again.kind());
        }
        assert!("gaussian".parse::<RadialKernel>().is_err());
        assert!("cauchy:beta=1".parse::<RadialKernel>().is_err());
        assert!("gaussian:beta=-1".parse::<RadialKernel>().is_err());
    }

    #[test]
    fn squared_profile() {
        let k = RadialKernel::gaussian(1.0).unwrap();
        let k2 = k.squared().unwrap();
        assert!((k2.eval(0.7).unwrap() - k.eval(0.7).unwrap().powi(2)).abs() < 1e-15);
    }
}
