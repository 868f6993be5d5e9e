//! Growth model structure, parameters and implied moments.
//!
//! The unconditional linear growth curve model for subject `i` is
//! `y_i = Λ b_i + e_i`, `b_i = β + u_i`, with `u_i ~ N(0, Ψ)` and
//! `e_i ~ N(0, σ²_e I)`. Marginally `y_i ~ N(Λβ, ΛΨΛ' + σ²_e I)`.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{GcmError, Result};
use crate::linalg;

#[derive(Debug, Clone, PartialEq)]
pub struct GrowthModelSpec {
    loadings: DMatrix<f64>,
}

impl GrowthModelSpec {
    pub fn new(loadings: DMatrix<f64>) -> Result<Self> {
        let (t, q) = loadings.shape();
        if t < 2 {
            return Err(GcmError::InvalidParameter(format!("need at least 2 occasions, got {t}")));
        }
        if q < 1 {
            return Err(GcmError::InvalidParameter("need at least 1 random effect".into()));
        }
        if q > t {
            return Err(GcmError::InvalidParameter(format!("loadings {t}x{q} cannot have full column rank")));
        }
        let gram = loadings.transpose() * &loadings;
        // Full column rank <=> Λ'Λ positive definite.
        linalg::cholesky(&gram, "loading Gram matrix (loadings are rank deficient)")?;
        let rank = loadings.clone().svd(false, false).rank(1e-10);
        if rank < q {
            return Err(GcmError::InvalidParameter("loadings are rank deficient".into()));
        }
        Ok(Self { loadings })
    }

    /// Linear growth: row `t` is `[1, t]` for `t = 0..T-1`.
    pub fn linear(n_occasions: usize) -> Result<Self> {
        Self::new(DMatrix::from_fn(n_occasions, 2, |t, k| if k == 0 { 1.0 } else { t as f64 }))
    }

    pub fn n_occasions(&self) -> usize {
        self.loadings.nrows()
    }

    pub fn n_effects(&self) -> usize {
        self.loadings.ncols()
    }

    pub fn loadings(&self) -> &DMatrix<f64> {
        &self.loadings
    }

    /// Rows of Λ for the given occasions.
    pub fn loadings_for(&self, occasions: &[usize]) -> DMatrix<f64> {
        linalg::select_rows(&self.loadings, occasions)
    }

    pub fn n_params(&self) -> usize {
        let q = self.n_effects();
        q + q * (q + 1) / 2 + 1
    }

    /// Names in the flattened order used by [`ParameterSet::to_flat`].
    pub fn parameter_names(&self) -> Vec<String> {
        let q = self.n_effects();
        let label = |k: usize| -> String {
            if q == 2 {
                ["L", "S"][k].to_string()
            } else {
                k.to_string()
            }
        };
        let mut names: Vec<String> = (0..q).map(|k| format!("beta_{}", label(k))).collect();
        for i in 0..q {
            for j in 0..=i {
                if q == 2 {
                    names.push(format!("psi_{}{}", label(j), label(i)));
                } else {
                    names.push(format!("psi_{}_{}", i, j));
                }
            }
        }
        names.push("sigma2_e".into());
        names
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParameterSet {
    pub beta: Vec<f64>,
    /// Row-major q×q random-effect covariance.
    pub psi: Vec<Vec<f64>>,
    pub sigma2_e: f64,
}

impl ParameterSet {
    pub fn new(beta: DVector<f64>, psi: DMatrix<f64>, sigma2_e: f64) -> Self {
        Self {
            beta: beta.iter().copied().collect(),
            psi: (0..psi.nrows()).map(|i| psi.row(i).iter().copied().collect()).collect(),
            sigma2_e,
        }
    }

    /// Population values used throughout the simulation design:
    /// β = (6, 2), Ψ = I, σ²_e = 1.
    pub fn population() -> Self {
        Self::new(DVector::from_vec(vec![6.0, 2.0]), DMatrix::identity(2, 2), 1.0)
    }

    pub fn beta_vec(&self) -> DVector<f64> {
        DVector::from_vec(self.beta.clone())
    }

    pub fn psi_mat(&self) -> DMatrix<f64> {
        let q = self.psi.len();
        DMatrix::from_fn(q, q, |i, j| self.psi[i][j])
    }

    /// Checks symmetry, positive definiteness of Ψ and σ²_e > 0.
    pub fn validate(&self) -> Result<()> {
        let q = self.beta.len();
        if self.psi.len() != q || self.psi.iter().any(|r| r.len() != q) {
            return Err(GcmError::Dimension(format!("psi must be {q}x{q}")));
        }
        if !(self.sigma2_e > 0.0) || !self.sigma2_e.is_finite() {
            return Err(GcmError::InvalidParameter(format!("sigma2_e must be positive, got {}", self.sigma2_e)));
        }
        let psi = self.psi_mat();
        let scale = psi.amax().max(1.0);
        for i in 0..q {
            for j in 0..i {
                if (psi[(i, j)] - psi[(j, i)]).abs() > 1e-10 * scale {
                    return Err(GcmError::InvalidParameter("psi is not symmetric".into()));
                }
            }
        }
        linalg::cholesky(&psi, "psi")?;
        Ok(())
    }

    /// β, then the lower triangle of Ψ row by row, then σ²_e.
    pub fn to_flat(&self) -> Vec<f64> {
        let mut out = self.beta.clone();
        out.extend(linalg::lower_tri(&self.psi_mat()));
        out.push(self.sigma2_e);
        out
    }

    pub fn from_flat(q: usize, flat: &[f64]) -> Result<Self> {
        let expect = q + q * (q + 1) / 2 + 1;
        if flat.len() != expect {
            return Err(GcmError::Dimension(format!("expected {expect} parameters, got {}", flat.len())));
        }
        let beta = DVector::from_column_slice(&flat[..q]);
        let psi = linalg::from_lower_tri(q, &flat[q..expect - 1]);
        Ok(Self::new(beta, psi, flat[expect - 1]))
    }
}

fn check_dims(spec: &GrowthModelSpec, params: &ParameterSet) -> Result<()> {
    let q = spec.n_effects();
    if params.beta.len() != q {
        return Err(GcmError::Dimension(format!("beta has length {}, loadings have {q} columns", params.beta.len())));
    }
    if params.psi.len() != q || params.psi.iter().any(|r| r.len() != q) {
        return Err(GcmError::Dimension(format!("psi must be {q}x{q}")));
    }
    Ok(())
}

/// μ(θ) = Λβ.
pub fn implied_mean(spec: &GrowthModelSpec, params: &ParameterSet) -> Result<DVector<f64>> {
    check_dims(spec, params)?;
    Ok(spec.loadings() * params.beta_vec())
}

/// Σ(θ) = ΛΨΛ' + σ²_e I.
pub fn implied_covariance(spec: &GrowthModelSpec, params: &ParameterSet) -> Result<DMatrix<f64>> {
    check_dims(spec, params)?;
    params.validate()?;
    Ok(covariance_unchecked(spec.loadings(), &params.psi_mat(), params.sigma2_e))
}

pub(crate) fn covariance_unchecked(lambda: &DMatrix<f64>, psi: &DMatrix<f64>, sigma2_e: f64) -> DMatrix<f64> {
    let mut sigma = lambda * psi * lambda.transpose();
    for t in 0..sigma.nrows() {
        sigma[(t, t)] += sigma2_e;
    }
    linalg::symmetrize(&mut sigma);
    sigma
}

#[cfg(test)]
mod tests {
    use super::*;

    fn params(beta: &[f64], psi: DMatrix<f64>, s2: f64) -> ParameterSet {
        ParameterSet::new(DVector::from_column_slice(beta), psi, s2)
    }

    #[test]
    fn implied_mean_population() {
        let spec = GrowthModelSpec::linear(4).unwrap();
        let mu = implied_mean(&spec, &ParameterSet::population()).unwrap();
        assert_eq!(mu.as_slice(), &[6.0, 8.0, 10.0, 12.0]);
        let zero = implied_mean(&spec, &params(&[0.0, 0.0], DMatrix::identity(2, 2), 1.0)).unwrap();
        assert!(zero.iter().all(|&v| v == 0.0));
        let two = GrowthModelSpec::linear(2).unwrap();
        let mu = implied_mean(&two, &params(&[1.0, 1.0], DMatrix::identity(2, 2), 1.0)).unwrap();
        assert_eq!(mu.as_slice(), &[1.0, 2.0]);
    }

    #[test]
    fn implied_mean_dimension_mismatch() {
        let spec = GrowthModelSpec::linear(4).unwrap();
        let bad = params(&[1.0, 2.0, 3.0], DMatrix::identity(3, 3), 1.0);
        assert!(matches!(implied_mean(&spec, &bad), Err(GcmError::Dimension(_))));
    }

    #[test]
    fn implied_covariance_entries() {
        let spec = GrowthModelSpec::linear(4).unwrap();
        let sigma = implied_covariance(&spec, &params(&[6.0, 2.0], DMatrix::identity(2, 2), 1.0)).unwrap();
        assert_eq!(sigma[(0, 0)], 2.0);
        assert_eq!(sigma[(3, 3)], 11.0);
        assert_eq!(sigma[(0, 3)], 1.0);
        assert_eq!(sigma[(1, 2)], 3.0);
        assert!(linalg::cholesky(&sigma, "sigma").is_ok());
    }

    #[test]
    fn implied_covariance_rejects_degenerate() {
        let spec = GrowthModelSpec::linear(4).unwrap();
        let p = params(&[6.0, 2.0], DMatrix::zeros(2, 2), 0.0);
        assert!(implied_covariance(&spec, &p).is_err());
        let p = params(&[6.0, 2.0], DMatrix::zeros(2, 2), 1.0);
        assert!(matches!(implied_covariance(&spec, &p), Err(GcmError::NotPositiveDefinite(_))));
    }

    #[test]
    fn spec_rejects_bad_loadings() {
        assert!(GrowthModelSpec::linear(1).is_err());
        let collinear = DMatrix::from_row_slice(3, 2, &[1.0, 2.0, 1.0, 2.0, 1.0, 2.0]);
        assert!(GrowthModelSpec::new(collinear).is_err());
    }

    #[test]
    fn flat_roundtrip_and_names() {
        let spec = GrowthModelSpec::linear(4).unwrap();
        let p = ParameterSet::population();
        let flat = p.to_flat();
        assert_eq!(flat, vec![6.0, 2.0, 1.0, 0.0, 1.0, 1.0]);
        assert_eq!(ParameterSet::from_flat(2, &flat).unwrap(), p);
        assert_eq!(
            spec.parameter_names(),
            vec!["beta_L", "beta_S", "psi_LL", "psi_LS", "psi_SS", "sigma2_e"]
        );
    }
}
