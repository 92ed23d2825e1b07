//! Kernel ridge regression with a learnable positive semi-definite metric.
//!
//! For an atomic law of `(X, Y)`, a completely monotone radial profile `𝒦`
//! and a metric `Σ`, the crate evaluates the minimum regression loss
//! `𝒥(Σ; λ)`, its first variation in `Σ`, and tools for exploring the
//! landscape of local minima over the cone of semi-definite forms.

pub mod clusters;
pub mod error;
pub mod kernel;
pub mod landscape;
pub mod metric;
pub mod numeric;
pub mod sample;
pub mod solver;
pub mod variation;

pub use error::{Error, Result};
pub use kernel::{KernelKind, RadialKernel};
pub use metric::Metric;
pub use sample::{Atom, GeneratorConfig, GeneratorKind, SampleSet};
pub use solver::SolveResult;
