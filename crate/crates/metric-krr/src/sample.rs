//! Finite atomic laws of `(X, Y)` and seeded synthetic generators.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::numeric::pairwise_sum;

/// Identifier of the generator behind every seeded draw.
pub const RNG_ALGORITHM: &str = "chacha20";

const LOAD_MASS_TOL: f64 = 1e-6;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Atom {
    pub x: Vec<f64>,
    pub y: f64,
    pub p: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub label: Option<usize>,
}

impl Atom {
    pub fn new(x: Vec<f64>, y: f64, p: f64) -> Self {
        Self { x, y, p, label: None }
    }

    pub fn labeled(x: Vec<f64>, y: f64, p: f64, label: usize) -> Self {
        Self { x, y, p, label: Some(label) }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SampleSet {
    pub dim: usize,
    pub atoms: Vec<Atom>,
}

#[derive(Deserialize)]
struct SampleFile {
    dim: usize,
    #[serde(default)]
    renormalize: bool,
    atoms: Vec<Atom>,
}

impl SampleSet {
    /// A probability law: masses must sum to one.
    pub fn new(dim: usize, atoms: Vec<Atom>) -> Result<Self> {
        let s = Self::with_masses(dim, atoms)?;
        let total = s.total_mass();
        if (total - 1.0).abs() > LOAD_MASS_TOL {
            return invalid(format!("probabilities sum to {total}, expected 1"));
        }
        Ok(s)
    }

    /// A finite positive measure with arbitrary total mass, as used by the
    /// per-cluster and per-group reduced problems.
    pub fn with_masses(dim: usize, atoms: Vec<Atom>) -> Result<Self> {
        if atoms.is_empty() {
            return invalid("sample set has no atoms");
        }
        for (i, a) in atoms.iter().enumerate() {
            if a.x.len() != dim {
                return invalid(format!("atom {i} has {} coordinates, expected {dim}", a.x.len()));
            }
            if a.x.iter().any(|v| !v.is_finite()) || !a.y.is_finite() || !a.p.is_finite() {
                return invalid(format!("atom {i} has non-finite entries"));
            }
            if a.p <= 0.0 {
                return invalid(format!("atom {i} has nonpositive probability {}", a.p));
            }
        }
        Ok(Self { dim, atoms })
    }

    pub fn len(&self) -> usize {
        self.atoms.len()
    }

    pub fn is_empty(&self) -> bool {
        self.atoms.is_empty()
    }

    pub fn ys(&self) -> Vec<f64> {
        self.atoms.iter().map(|a| a.y).collect()
    }

    pub fn ps(&self) -> Vec<f64> {
        self.atoms.iter().map(|a| a.p).collect()
    }

    pub fn xs(&self) -> Vec<Vec<f64>> {
        self.atoms.iter().map(|a| a.x.clone()).collect()
    }

    pub fn labels(&self) -> Result<Vec<usize>> {
        self.atoms
            .iter()
            .enumerate()
            .map(|(i, a)| a.label.ok_or_else(|| Error::Invalid(format!("atom {i} has no label"))))
            .collect()
    }

    pub fn total_mass(&self) -> f64 {
        compensated_sum(self.atoms.iter().map(|a| a.p))
    }

    /// Copy with `y` replaced.
    pub fn with_values(&self, ys: &[f64]) -> Result<Self> {
        if ys.len() != self.len() {
            return invalid("value vector length does not match atoms");
        }
        let atoms = self
            .atoms
            .iter()
            .zip(ys)
            .map(|(a, &y)| Atom { y, ..a.clone() })
            .collect();
        Self::with_masses(self.dim, atoms)
    }

    pub fn renormalize(&self) -> Result<Self> {
        let total = self.total_mass();
        if !(total > 0.0) {
            return invalid("cannot renormalize: total mass is zero");
        }
        let atoms = self
            .atoms
            .iter()
            .map(|a| Atom { p: a.p / total, ..a.clone() })
            .collect();
        Ok(Self { dim: self.dim, atoms })
    }

    pub fn load(path: &Path) -> Result<Self> {
        let is_csv = path
            .extension()
            .is_some_and(|e| e.eq_ignore_ascii_case("csv"));
        if is_csv {
            Self::from_csv(&fs::read_to_string(path)?)
        } else {
            Self::from_json(&fs::read_to_string(path)?)
        }
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let f: SampleFile = serde_json::from_str(text)?;
        let s = Self::with_masses(f.dim, f.atoms)?;
        if f.renormalize {
            s.renormalize()
        } else {
            Self::new(s.dim, s.atoms)
        }
    }

    /// CSV with header `x1,...,xd,y,p[,label]`.
    pub fn from_csv(text: &str) -> Result<Self> {
        let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(text.as_bytes());
        let header: Vec<String> = rdr.headers()?.iter().map(str::to_string).collect();
        let has_label = header.last().is_some_and(|h| h == "label");
        let dim = header.len() - if has_label { 3 } else { 2 };
        let expected: Vec<String> = (1..=dim)
            .map(|i| format!("x{i}"))
            .chain(["y".to_string(), "p".to_string()])
            .chain(has_label.then(|| "label".to_string()))
            .collect();
        if header != expected {
            return invalid(format!("CSV header must be {}", expected.join(",")));
        }
        let mut atoms = Vec::new();
        for rec in rdr.records() {
            let rec = rec?;
            let num = |k: usize| -> Result<f64> {
                rec[k]
                    .parse::<f64>()
                    .map_err(|_| Error::Invalid(format!("bad number `{}`", &rec[k])))
            };
            let x = (0..dim).map(num).collect::<Result<Vec<_>>>()?;
            let label = if has_label {
                Some(rec[dim + 2].parse::<usize>().map_err(|_| {
                    Error::Invalid(format!("bad label `{}`", &rec[dim + 2]))
                })?)
            } else {
                None
            };
            atoms.push(Atom { x, y: num(dim)?, p: num(dim + 1)?, label });
        }
        Self::new(dim, atoms)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let is_csv = path
            .extension()
            .is_some_and(|e| e.eq_ignore_ascii_case("csv"));
        if is_csv {
            let mut w = csv::Writer::from_path(path)?;
            let labeled = self.atoms.iter().all(|a| a.label.is_some());
            let mut header: Vec<String> = (1..=self.dim).map(|i| format!("x{i}")).collect();
            header.extend(["y".into(), "p".into()]);
            if labeled {
                header.push("label".into());
            }
            w.write_record(&header)?;
            for a in &self.atoms {
                let mut row: Vec<String> = a.x.iter().map(|v| format!("{v:e}")).collect();
                row.push(format!("{:e}", a.y));
                row.push(format!("{:e}", a.p));
                if labeled {
                    row.push(a.label.unwrap_or_default().to_string());
                }
                w.write_record(&row)?;
            }
            w.flush()?;
            Ok(())
        } else {
            fs::write(path, self.to_json()?)?;
            Ok(())
        }
    }
}

fn compensated_sum<I: Iterator<Item = f64>>(it: I) -> f64 {
    let mut sum = 0.0f64;
    let mut comp = 0.0f64;
    for v in it {
        let t = sum + v;
        if sum.abs() >= v.abs() {
            comp += (sum - t) + v;
        } else {
            comp += (v - t) + sum;
        }
        sum = t;
    }
    sum + comp
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Moments {
    pub e_y2: f64,
    pub e_x4: f64,
    pub mean_y: f64,
}

pub fn second_moments(s: &SampleSet) -> Moments {
    let y2: Vec<f64> = s.atoms.iter().map(|a| a.p * a.y * a.y).collect();
    let x4: Vec<f64> = s
        .atoms
        .iter()
        .map(|a| {
            let n2: f64 = a.x.iter().map(|v| v * v).sum();
            a.p * n2 * n2
        })
        .collect();
    let my: Vec<f64> = s.atoms.iter().map(|a| a.p * a.y).collect();
    Moments {
        e_y2: pairwise_sum(&y2),
        e_x4: pairwise_sum(&x4),
        mean_y: pairwise_sum(&my),
    }
}

/// Subtracts the mass-weighted mean of `y`, per label when labels are present.
pub fn center_values(s: &SampleSet) -> SampleSet {
    let mut mass: BTreeMap<Option<usize>, (f64, f64)> = BTreeMap::new();
    for a in &s.atoms {
        let e = mass.entry(a.label).or_insert((0.0, 0.0));
        e.0 += a.p;
        e.1 += a.p * a.y;
    }
    let atoms = s
        .atoms
        .iter()
        .map(|a| {
            let (pm, pym) = mass[&a.label];
            Atom { y: a.y - pym / pm, ..a.clone() }
        })
        .collect();
    SampleSet { dim: s.dim, atoms }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GeneratorKind {
    /// One N(0,1) background component (label 0) plus narrow components.
    TwoScale,
    /// Components N(cᵢ, sᵢ²) with separated scales.
    MultiScale,
    /// A multi-scale primary coordinate plus independent N(0,1) noise
    /// coordinates that carry no information about `Y`.
    VariableSelection,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GeneratorConfig {
    pub kind: GeneratorKind,
    pub centers: Vec<f64>,
    pub scales: Vec<f64>,
    /// Component probabilities; `two_scale` takes one extra leading entry for
    /// the background component.
    pub probs: Vec<f64>,
    pub n_samples: usize,
    pub seed: u64,
    #[serde(default)]
    pub noise_dims: usize,
}

impl GeneratorConfig {
    pub fn validate(&self) -> Result<()> {
        let m = self.centers.len();
        if m == 0 || self.scales.len() != m {
            return invalid("centers and scales must be nonempty and of equal length");
        }
        let want = if self.kind == GeneratorKind::TwoScale { m + 1 } else { m };
        if self.probs.len() != want {
            return invalid(format!("expected {want} probabilities, got {}", self.probs.len()));
        }
        if self.scales.iter().any(|&s| !(s > 0.0 && s.is_finite())) {
            return invalid("scales must be positive");
        }
        if self.probs.iter().any(|&p| !(p > 0.0)) {
            return invalid("probabilities must be positive");
        }
        let total: f64 = self.probs.iter().sum();
        if (total - 1.0).abs() > 1e-9 {
            return invalid(format!("probabilities sum to {total}, expected 1"));
        }
        if self.n_samples == 0 {
            return invalid("n_samples must be positive");
        }
        if self.kind == GeneratorKind::VariableSelection && self.noise_dims == 0 {
            return invalid("variable_selection needs noise_dims >= 1");
        }
        Ok(())
    }
}

fn stream(seed: u64, id: u64) -> ChaCha20Rng {
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    rng.set_stream(id);
    rng
}

fn categorical(u: f64, probs: &[f64]) -> usize {
    let mut acc = 0.0;
    for (k, p) in probs.iter().enumerate() {
        acc += p;
        if u < acc {
            return k;
        }
    }
    probs.len() - 1
}

fn bump_sum(x: f64, centers: &[f64], scales: &[f64]) -> f64 {
    centers
        .iter()
        .zip(scales)
        .map(|(c, s)| {
            let z = (x - c) / s;
            z.sin() * (-z * z).exp()
        })
        .sum()
}

/// Draws `n_samples` i.i.d. atoms of mass `1/n_samples` with their hidden
/// component labels.
pub fn empirical_from_generator(cfg: &GeneratorConfig) -> Result<SampleSet> {
    cfg.validate()?;
    let n = cfg.n_samples;
    let mut labels_rng = stream(cfg.seed, 0);
    let mut x_rng = stream(cfg.seed, 1);
    let mut noise_rng = stream(cfg.seed, 2);
    let p = 1.0 / n as f64;
    let mut atoms = Vec::with_capacity(n);
    for _ in 0..n {
        let label = categorical(labels_rng.random::<f64>(), &cfg.probs);
        let z: f64 = x_rng.sample(StandardNormal);
        let atom = match cfg.kind {
            GeneratorKind::MultiScale => {
                let x = cfg.centers[label] + cfg.scales[label] * z;
                Atom::labeled(vec![x], bump_sum(x, &cfg.centers, &cfg.scales), p, label)
            }
            GeneratorKind::TwoScale => {
                let x = if label == 0 {
                    z
                } else {
                    cfg.centers[label - 1] + cfg.scales[label - 1] * z
                };
                let y = x.sin() + bump_sum(x, &cfg.centers, &cfg.scales);
                Atom::labeled(vec![x], y, p, label)
            }
            GeneratorKind::VariableSelection => {
                let x0 = cfg.centers[label] + cfg.scales[label] * z;
                let mut x = Vec::with_capacity(1 + cfg.noise_dims);
                x.push(x0);
                for _ in 0..cfg.noise_dims {
                    x.push(noise_rng.sample(StandardNormal));
                }
                Atom::labeled(x, bump_sum(x0, &cfg.centers, &cfg.scales), p, label)
            }
        };
        atoms.push(atom);
    }
    let dim = if cfg.kind == GeneratorKind::VariableSelection { 1 + cfg.noise_dims } else { 1 };
    SampleSet::with_masses(dim, atoms)
}
