//! Full-information maximum likelihood for incomplete growth data.
//!
//! Each subject contributes the normal density of its observed subvector
//! under the implied moments restricted to the observed occasions. Subjects
//! are grouped by missingness pattern so each pattern's covariance block is
//! factored once per evaluation.

use std::collections::BTreeMap;

use nalgebra::DVector;
use serde::{Deserialize, Serialize};

use crate::data::LongitudinalDataset;
use crate::error::{GcmError, Result};
use crate::gaussian::{self, Parameterization, SufficientStats};
use crate::linalg;
use crate::model::{GrowthModelSpec, ParameterSet};
use crate::optim::{self, BfgsOptions};
use crate::random::{rng_from_seed, std_normal};
use crate::result::{FitResult, Method, ParamUncertainty, Uncertainty};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FimlOptions {
    pub tol: f64,
    pub max_iter: usize,
    /// Extra jittered starts tried when the first run fails to converge.
    pub restarts: usize,
}

impl Default for FimlOptions {
    fn default() -> Self {
        Self { tol: 1e-6, max_iter: 500, restarts: 3 }
    }
}

impl FimlOptions {
    pub fn validate(&self) -> Result<()> {
        if !(self.tol > 0.0) {
            return Err(GcmError::InvalidParameter("tol must be positive".into()));
        }
        Ok(())
    }
}

/// Observed-data log-likelihood summed over subjects.
pub fn fiml_loglik(spec: &GrowthModelSpec, params: &ParameterSet, data: &LongitudinalDataset) -> Result<f64> {
    check(spec, data)?;
    params.validate()?;
    let stats = SufficientStats::from_dataset(data);
    let mu = crate::model::implied_mean(spec, params)?;
    let sigma = crate::model::implied_covariance(spec, params)?;
    Ok(gaussian::loglik_moments(&stats, &mu, &sigma)?.loglik)
}

fn check(spec: &GrowthModelSpec, data: &LongitudinalDataset) -> Result<()> {
    if data.n_occasions() != spec.n_occasions() {
        return Err(GcmError::Dimension(format!(
            "data have {} occasions, model has {}",
            data.n_occasions(),
            spec.n_occasions()
        )));
    }
    if data.n_subjects() == 0 {
        return Err(GcmError::EmptyInput("no subjects".into()));
    }
    Ok(())
}

/// Result of minimising a per-subject-scaled negative log-likelihood.
pub(crate) struct MlSolution {
    pub x: DVector<f64>,
    pub loglik: f64,
    pub grad_norm: f64,
    pub iterations: usize,
    pub converged: bool,
    pub starts: usize,
}

/// Maximises ℓ over the unconstrained parameterization, retrying from
/// jittered starts when BFGS stalls.
pub(crate) fn maximize(
    spec: &GrowthModelSpec,
    stats: &SufficientStats,
    start: &ParameterSet,
    tol: f64,
    max_iter: usize,
    restarts: usize,
) -> Result<MlSolution> {
    let par = Parameterization::new(spec.n_effects());
    let scale = 1.0 / stats.n_subjects().max(1.0);
    let objective = |x: &DVector<f64>| match par.loglik_grad(spec, stats, x) {
        Ok((ll, g)) => (-ll * scale, -g * scale),
        Err(_) => (f64::INFINITY, DVector::from_element(x.len(), f64::NAN)),
    };
    // The tolerance is on the gradient of ℓ/N.
    let opts = BfgsOptions { tol, max_iter };
    let x0 = par.pack(start)?;
    let mut best = optim::minimize(&objective, x0.clone(), &opts);
    let mut starts = 1;
    let mut rng = rng_from_seed(0x6a09_e667_f3bc_c908);
    while !best.converged && starts <= restarts {
        let jittered = x0.map(|v| v + 0.15 * std_normal(&mut rng) * v.abs().max(1.0));
        let out = optim::minimize(&objective, jittered, &opts);
        starts += 1;
        if (out.converged && !best.converged) || (out.converged == best.converged && out.value < best.value) {
            best = out;
        }
    }
    Ok(MlSolution {
        loglik: -best.value / scale,
        x: best.x,
        grad_norm: best.grad_norm,
        iterations: best.iterations,
        converged: best.converged,
        starts,
    })
}

/// Standard errors from the inverse observed information in natural
/// coordinates, with `information_scale` multiplying the Hessian of −ℓ.
pub(crate) fn standard_errors(
    spec: &GrowthModelSpec,
    stats: &SufficientStats,
    estimates: &ParameterSet,
    information_scale: f64,
) -> Vec<ParamUncertainty> {
    let names = spec.parameter_names();
    let flat = DVector::from_vec(estimates.to_flat());
    let grad = |x: &DVector<f64>| match gaussian::loglik_grad_natural(spec, stats, x) {
        Ok((_, g)) => g,
        Err(_) => DVector::from_element(x.len(), f64::NAN),
    };
    let hess = optim::numeric_hessian(grad, &flat, 1e-5);
    let info = -hess * information_scale;
    let cov = if info.iter().all(|v| v.is_finite()) { info.try_inverse() } else { None };
    names
        .into_iter()
        .enumerate()
        .map(|(k, name)| {
            let uncertainty = match &cov {
                Some(c) if c[(k, k)] > 0.0 => Uncertainty::StdError(c[(k, k)].sqrt()),
                _ => Uncertainty::Unavailable,
            };
            ParamUncertainty { name, estimate: flat[k], uncertainty }
        })
        .collect()
}

/// Relative threshold below which an eigenvalue of Ψ̂ counts as a boundary estimate.
pub(crate) const BOUNDARY_EIGEN: f64 = 1e-6;

pub(crate) fn boundary_diagnostics(estimates: &ParameterSet, diag: &mut BTreeMap<String, f64>) {
    let psi = estimates.psi_mat();
    let min_eig = linalg::min_eigenvalue(&psi);
    let scale = psi.trace().abs().max(1e-12);
    diag.insert("psi_min_eigenvalue".into(), min_eig);
    diag.insert("boundary".into(), if min_eig < BOUNDARY_EIGEN * scale { 1.0 } else { 0.0 });
}

pub fn fiml_fit(spec: &GrowthModelSpec, data: &LongitudinalDataset, options: &FimlOptions) -> Result<FitResult> {
    options.validate()?;
    check(spec, data)?;
    let stats = SufficientStats::from_dataset(data);
    let start = gaussian::start_from_data(spec, data)?;
    let sol = maximize(spec, &stats, &start, options.tol, options.max_iter, options.restarts)?;
    let par = Parameterization::new(spec.n_effects());
    let estimates = par.unpack(&sol.x);
    if !sol.converged {
        log::warn!("FIML did not converge (gradient norm {:.3e})", sol.grad_norm);
    }
    let uncertainty = standard_errors(spec, &stats, &estimates, 1.0);
    let mut diagnostics = BTreeMap::new();
    diagnostics.insert("loglik".into(), sol.loglik);
    diagnostics.insert("grad_norm".into(), sol.grad_norm);
    diagnostics.insert("iterations".into(), sol.iterations as f64);
    diagnostics.insert("starts".into(), sol.starts as f64);
    diagnostics.insert("n_subjects".into(), data.n_subjects() as f64);
    boundary_diagnostics(&estimates, &mut diagnostics);
    Ok(FitResult {
        method: Method::Fiml,
        parameter_names: spec.parameter_names(),
        estimates,
        uncertainty,
        converged: sol.converged,
        diagnostics,
        posterior: None,
        weights: None,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::DMatrix;

    #[test]
    fn single_observation_at_mean() {
        // One subject, one observed occasion at the implied mean with variance 2.
        let spec = GrowthModelSpec::linear(4).unwrap();
        let p = ParameterSet::population();
        let values = DMatrix::from_row_slice(1, 4, &[6.0, 0.0, 0.0, 0.0]);
        let data = LongitudinalDataset::new(values, vec![true, false, false, false], vec!["a".into()]).unwrap();
        let ll = fiml_loglik(&spec, &p, &data).unwrap();
        assert!((ll - (-0.5 * (4.0 * std::f64::consts::PI).ln())).abs() < 1e-12);
    }

    #[test]
    fn dimension_mismatch_rejected() {
        let spec = GrowthModelSpec::linear(3).unwrap();
        let data = LongitudinalDataset::complete(DMatrix::zeros(2, 4)).unwrap();
        assert!(fiml_loglik(&spec, &ParameterSet::population(), &data).is_err());
        assert!(FimlOptions { tol: 0.0, ..Default::default() }.validate().is_err());
    }
}
