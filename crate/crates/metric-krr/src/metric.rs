//! Positive semi-definite forms `Σ` defining `|x|²_Σ = xᵀΣx`.

use faer::Mat;
use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::error::{invalid, Result};
use crate::numeric::{from_rows, sym_apply, sym_eigen, to_rows};

const SYM_TOL: f64 = 1e-12;
const PSD_TOL: f64 = 1e-10;

#[derive(Clone, Debug)]
pub struct Metric {
    sigma: Mat<f64>,
}

impl Metric {
    /// Validates symmetry and semi-definiteness (up to round-off, relative to
    /// the size of the entries) and stores the exactly symmetrized form.
    pub fn new(sigma: Mat<f64>) -> Result<Self> {
        let d = sigma.nrows();
        if sigma.ncols() != d {
            return invalid("metric must be square");
        }
        let mut scale: f64 = 1.0;
        for j in 0..d {
            for i in 0..d {
                let v = sigma[(i, j)];
                if !v.is_finite() {
                    return invalid("metric has non-finite entries");
                }
                scale = scale.max(v.abs());
            }
        }
        for j in 0..d {
            for i in 0..j {
                if (sigma[(i, j)] - sigma[(j, i)]).abs() > SYM_TOL * scale {
                    return invalid("metric is not symmetric");
                }
            }
        }
        let sym = Mat::from_fn(d, d, |i, j| 0.5 * (sigma[(i, j)] + sigma[(j, i)]));
        let (vals, _) = sym_eigen(&sym)?;
        if vals.first().is_some_and(|&l| l < -PSD_TOL * scale) {
            return invalid(format!(
                "metric is not positive semi-definite (min eigenvalue {:e})",
                vals[0]
            ));
        }
        Ok(Self { sigma: sym })
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        Self::new(from_rows(rows)?)
    }

    pub fn scalar(d: usize, t: f64) -> Result<Self> {
        Self::new(Mat::from_fn(d, d, |i, j| if i == j { t } else { 0.0 }))
    }

    pub fn identity(d: usize) -> Self {
        Self {
            sigma: Mat::identity(d, d),
        }
    }

    pub fn zeros(d: usize) -> Self {
        Self {
            sigma: Mat::zeros(d, d),
        }
    }

    /// Nearest PSD form in Frobenius norm (eigenvalues clipped at zero).
    pub fn project(a: &Mat<f64>) -> Result<Self> {
        let p = sym_apply(a, |l| l.max(0.0))?;
        Ok(Self {
            sigma: Mat::from_fn(p.nrows(), p.nrows(), |i, j| 0.5 * (p[(i, j)] + p[(j, i)])),
        })
    }

    pub fn dim(&self) -> usize {
        self.sigma.nrows()
    }

    pub fn matrix(&self) -> &Mat<f64> {
        &self.sigma
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.sigma[(i, j)]
    }

    pub fn scaled(&self, t: f64) -> Result<Self> {
        if !(t >= 0.0) {
            return invalid("metric scale must be nonnegative");
        }
        Ok(Self {
            sigma: Mat::from_fn(self.dim(), self.dim(), |i, j| t * self.sigma[(i, j)]),
        })
    }

    /// `Σ + h·E` without validation; callers check PSD where it matters.
    pub fn perturbed(&self, dir: &Mat<f64>, h: f64) -> Mat<f64> {
        Mat::from_fn(self.dim(), self.dim(), |i, j| self.sigma[(i, j)] + h * dir[(i, j)])
    }

    /// `(a − b)ᵀ Σ (a − b)`.
    pub fn dist_sq(&self, a: &[f64], b: &[f64]) -> f64 {
        let d = self.dim();
        let mut s = 0.0;
        for j in 0..d {
            let dj = a[j] - b[j];
            if dj == 0.0 {
                continue;
            }
            let mut row = 0.0;
            for i in 0..d {
                row += self.sigma[(i, j)] * (a[i] - b[i]);
            }
            s += row * dj;
        }
        s.max(0.0)
    }

    pub fn eigenvalues(&self) -> Result<Vec<f64>> {
        Ok(sym_eigen(&self.sigma)?.0)
    }

    /// Orthonormal basis of the numerical null space (relative tolerance).
    pub fn null_space(&self, rel_tol: f64) -> Result<Mat<f64>> {
        let (vals, v) = sym_eigen(&self.sigma)?;
        let top = vals.iter().fold(0.0f64, |a, &b| a.max(b.abs()));
        let cols: Vec<usize> = (0..vals.len())
            .filter(|&k| vals[k] <= rel_tol * top.max(f64::MIN_POSITIVE))
            .collect();
        Ok(Mat::from_fn(self.dim(), cols.len(), |i, c| v[(i, cols[c])]))
    }

    pub fn is_positive_definite(&self) -> Result<bool> {
        let vals = self.eigenvalues()?;
        let top = vals.iter().fold(0.0f64, |a, &b| a.max(b.abs()));
        Ok(vals.first().is_some_and(|&l| l > 1e-12 * top))
    }

    pub fn to_rows(&self) -> Vec<Vec<f64>> {
        to_rows(&self.sigma)
    }
}

/// True when `a` is PSD up to `1e-12` relative round-off.
pub fn is_psd(a: &Mat<f64>) -> Result<bool> {
    let (vals, _) = sym_eigen(a)?;
    let top = vals.iter().fold(0.0f64, |x, &y| x.max(y.abs()));
    Ok(vals.first().is_none_or(|&l| l >= -1e-12 * top.max(1.0)))
}

impl Serialize for Metric {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        self.to_rows().serialize(s)
    }
}

impl<'de> Deserialize<'de> for Metric {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let rows = Vec::<Vec<f64>>::deserialize(d)?;
        Metric::from_rows(&rows).map_err(serde::de::Error::custom)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rejects_indefinite_and_asymmetric() {
        assert!(Metric::from_rows(&[vec![1.0, 0.0], vec![0.0, -1.0]]).is_err());
        assert!(Metric::from_rows(&[vec![1.0, 0.5], vec![0.0, 1.0]]).is_err());
        assert!(Metric::from_rows(&[vec![1.0, 1.0], vec![1.0, 1.0]]).is_ok());
    }

    #[test]
    fn dist_sq_matches_quadratic_form() {
        let m = Metric::from_rows(&[vec![2.0, 1.0], vec![1.0, 3.0]]).unwrap();
        let d = m.dist_sq(&[1.0, 2.0], &[0.0, 0.0]);
        assert!((d - (2.0 + 4.0 + 12.0)).abs() < 1e-14);
    }

    #[test]
    fn projection_clips_negative_part() {
        let a = Mat::from_fn(2, 2, |i, j| [[1.0, 0.0], [0.0, -2.0]][i][j]);
        let p = Metric::project(&a).unwrap();
        assert!((p.get(0, 0) - 1.0).abs() < 1e-14 && p.get(1, 1).abs() < 1e-14);
    }

    #[test]
    fn null_space_of_rank_one() {
        let m = Metric::from_rows(&[vec![1.0, 0.0], vec![0.0, 0.0]]).unwrap();
        let w = m.null_space(1e-10).unwrap();
        assert_eq!(w.ncols(), 1);
        assert!(w[(0, 0)].abs() < 1e-12 && (w[(1, 0)].abs() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn serde_round_trip() {
        let m = Metric::from_rows(&[vec![2.0, 1.0], vec![1.0, 3.0]]).unwrap();
        let s = serde_json::to_string(&m).unwrap();
        let back: Metric = serde_json::from_str(&s).unwrap();
        assert_eq!(back.to_rows(), m.to_rows());
    }
}
