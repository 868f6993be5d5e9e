//! Two-stage robust estimation.
//!
//! Stage 1 computes Huber-type M-estimates of the saturated mean and
//! covariance from incomplete data with an expectation-robust (ER)
//! iteration. Stage 2 fits the growth model to those moments by minimising
//! the normal-theory discrepancy function.
//!
//! Case weights follow the usual M-estimation convention: the mean update
//! uses `w1 = min(1, ρ/d)` and the covariance update uses `w2 = w1²/κ`,
//! where `d` is the Mahalanobis distance of the observed subvector, `ρ²` the
//! chi-square quantile at `1 − huber_prob` for the observed dimension, and
//! `κ` makes the covariance consistent at the normal model.

use std::collections::BTreeMap;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use statrs::distribution::{ChiSquared, ContinuousCDF};

use crate::data::LongitudinalDataset;
use crate::error::{GcmError, Result};
use crate::fiml;
use crate::gaussian::{self, Parameterization, SufficientStats};
use crate::linalg;
use crate::model::{covariance_unchecked, GrowthModelSpec, ParameterSet};
use crate::result::{FitResult, Method};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TsreOptions {
    /// Tail probability for the Huber tuning quantile; 0 disables downweighting.
    pub huber_prob: f64,
    pub tol: f64,
    pub max_iter: usize,
    /// Gradient tolerance for stage 2.
    pub fit_tol: f64,
    pub fit_max_iter: usize,
}

impl Default for TsreOptions {
    fn default() -> Self {
        Self { huber_prob: 0.10, tol: 1e-6, max_iter: 2000, fit_tol: 1e-6, fit_max_iter: 500 }
    }
}

impl TsreOptions {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..1.0).contains(&self.huber_prob) {
            return Err(GcmError::InvalidParameter(format!("huber_prob {} not in [0,1)", self.huber_prob)));
        }
        if !(self.tol > 0.0) || !(self.fit_tol > 0.0) {
            return Err(GcmError::InvalidParameter("tolerances must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RobustSaturated {
    pub mu_hat: DVector<f64>,
    pub sigma_hat: DMatrix<f64>,
    /// Per-subject mean weights `w1` in (0, 1].
    pub weights: Vec<f64>,
    pub iterations: usize,
    pub converged: bool,
    pub n_subjects: usize,
}

/// Tuning radius ρ and consistency factor κ for observed dimension `p`.
struct HuberTuning {
    rho2: f64,
    kappa: f64,
}

fn huber_tuning(p: usize, huber_prob: f64) -> Result<HuberTuning> {
    if huber_prob == 0.0 {
        return Ok(HuberTuning { rho2: f64::INFINITY, kappa: 1.0 });
    }
    let chi_p = ChiSquared::new(p as f64).map_err(|e| GcmError::InvalidParameter(e.to_string()))?;
    let chi_p2 = ChiSquared::new(p as f64 + 2.0).map_err(|e| GcmError::InvalidParameter(e.to_string()))?;
    let rho2 = chi_p.inverse_cdf(1.0 - huber_prob);
    // κ = E[w1(D)² D²] / p for D² ~ χ²_p.
    let kappa = (p as f64 * chi_p2.cdf(rho2) + rho2 * (1.0 - chi_p.cdf(rho2))) / p as f64;
    Ok(HuberTuning { rho2, kappa })
}

/// `min(1, ρ/d)` given squared distance and squared radius.
pub fn huber_weight(d2: f64, rho2: f64) -> f64 {
    if d2 <= rho2 {
        1.0
    } else {
        (rho2 / d2).sqrt()
    }
}

pub fn stage1_robust(data: &LongitudinalDataset, options: &TsreOptions) -> Result<RobustSaturated> {
    options.validate()?;
    let (n, t) = (data.n_subjects(), data.n_occasions());
    if n <= t {
        return Err(GcmError::Degenerate(format!("need more subjects ({n}) than occasions ({t})")));
    }
    let patterns = data.patterns();
    let tunings: Vec<HuberTuning> =
        (1..=t).map(|p| huber_tuning(p, options.huber_prob)).collect::<Result<_>>()?;

    // Start from available-case means and variances.
    let mut mu = DVector::zeros(t);
    let mut sigma = DMatrix::zeros(t, t);
    for k in 0..t {
        let vals: Vec<f64> = (0..n).filter_map(|i| data.get(i, k)).collect();
        if vals.len() < 2 {
            return Err(GcmError::Degenerate(format!("occasion {} has fewer than 2 observations", k + 1)));
        }
        let m = vals.iter().sum::<f64>() / vals.len() as f64;
        let v = vals.iter().map(|x| (x - m).powi(2)).sum::<f64>() / vals.len() as f64;
        if !(v > 0.0) {
            return Err(GcmError::Degenerate(format!("occasion {} has zero variance", k + 1)));
        }
        mu[k] = m;
        sigma[(k, k)] = v;
    }

    let mut weights = vec![1.0; n];
    let mut w2 = vec![1.0; n];
    let mut yhat = DMatrix::zeros(n, t);
    let mut iterations = 0;
    let mut converged = false;
    while iterations < options.max_iter {
        iterations += 1;
        // E-step plus weights, pattern by pattern.
        let mut cond_cov_sum = DMatrix::zeros(t, t);
        let mut cond_covs: Vec<(Vec<usize>, DMatrix<f64>)> = Vec::with_capacity(patterns.len());
        for pat in &patterns {
            let obs = &pat.occasions;
            let mis: Vec<usize> = (0..t).filter(|k| !obs.contains(k)).collect();
            let s_oo = linalg::select_sym(&sigma, obs);
            let chol = linalg::cholesky(&s_oo, "robust covariance (observed block)")?;
            let s_mo = DMatrix::from_fn(mis.len(), obs.len(), |a, b| sigma[(mis[a], obs[b])]);
            let reg = &s_mo * chol.inverse();
            let s_mm = linalg::select_sym(&sigma, &mis);
            let c_mm = &s_mm - &reg * s_mo.transpose();
            let tune = &tunings[obs.len() - 1];
            for &i in &pat.subjects {
                let r = DVector::from_iterator(obs.len(), obs.iter().map(|&k| data.raw_values()[(i, k)] - mu[k]));
                let d2 = r.dot(&chol.solve(&r));
                let w = huber_weight(d2, tune.rho2);
                weights[i] = w;
                w2[i] = w * w / tune.kappa;
                for &k in obs {
                    yhat[(i, k)] = data.raw_values()[(i, k)];
                }
                if !mis.is_empty() {
                    let pred = &reg * &r;
                    for (a, &k) in mis.iter().enumerate() {
                        yhat[(i, k)] = mu[k] + pred[a];
                    }
                }
            }
            if !mis.is_empty() {
                let wsum: f64 = pat.subjects.iter().map(|&i| w2[i]).sum();
                for (a, &ka) in mis.iter().enumerate() {
                    for (b, &kb) in mis.iter().enumerate() {
                        cond_cov_sum[(ka, kb)] += wsum * c_mm[(a, b)];
                    }
                }
                cond_covs.push((mis, c_mm));
            }
        }
        let wsum: f64 = weights.iter().sum();
        let mut mu_new = DVector::zeros(t);
        for i in 0..n {
            mu_new += yhat.row(i).transpose() * weights[i];
        }
        mu_new /= wsum;
        let mut sigma_new = cond_cov_sum;
        for i in 0..n {
            let d = yhat.row(i).transpose() - &mu_new;
            sigma_new += (&d * d.transpose()) * w2[i];
        }
        sigma_new /= n as f64;
        linalg::symmetrize(&mut sigma_new);
        let change = (&mu_new - &mu).amax().max((&sigma_new - &sigma).amax());
        mu = mu_new;
        sigma = sigma_new;
        if !mu.iter().chain(sigma.iter()).all(|v| v.is_finite()) {
            return Err(GcmError::Degenerate("robust moments diverged".into()));
        }
        if change < options.tol {
            converged = true;
            break;
        }
    }
    linalg::cholesky(&sigma, "robust covariance")?;
    Ok(RobustSaturated { mu_hat: mu, sigma_hat: sigma, weights, iterations, converged, n_subjects: n })
}

/// `F = tr(Σ̂Σ⁻¹) − log|Σ̂Σ⁻¹| − T + (μ̂−μ)'Σ⁻¹(μ̂−μ)`.
pub fn ml_discrepancy(rob: &RobustSaturated, spec: &GrowthModelSpec, params: &ParameterSet) -> Result<f64> {
    let mu = crate::model::implied_mean(spec, params)?;
    let sigma = crate::model::implied_covariance(spec, params)?;
    discrepancy(&rob.mu_hat, &rob.sigma_hat, &mu, &sigma)
}

pub(crate) fn discrepancy(
    mu_hat: &DVector<f64>,
    sigma_hat: &DMatrix<f64>,
    mu: &DVector<f64>,
    sigma: &DMatrix<f64>,
) -> Result<f64> {
    let t = mu.len();
    if mu_hat.len() != t || sigma_hat.shape() != (t, t) || sigma.shape() != (t, t) {
        return Err(GcmError::Dimension("moment dimensions disagree".into()));
    }
    let chol = linalg::cholesky(sigma, "implied covariance")?;
    let chol_hat = linalg::cholesky(sigma_hat, "robust covariance")?;
    let d = mu_hat - mu;
    let tr = chol.solve(sigma_hat).trace();
    let logdet = linalg::log_det(&chol_hat) - linalg::log_det(&chol);
    Ok(tr - logdet - t as f64 + d.dot(&chol.solve(&d)))
}

pub fn stage2_fit(rob: &RobustSaturated, spec: &GrowthModelSpec, options: &TsreOptions) -> Result<FitResult> {
    options.validate()?;
    let t = spec.n_occasions();
    if rob.mu_hat.len() != t {
        return Err(GcmError::Dimension(format!("robust moments have {} occasions, model has {t}", rob.mu_hat.len())));
    }
    // F = −2ℓ₁ + const, with ℓ₁ the log-likelihood of one complete case
    // whose first two moments are (μ̂, Σ̂).
    let stats = SufficientStats::from_moments(&rob.mu_hat, &rob.sigma_hat);
    let start = {
        let lambda = spec.loadings();
        let gram = lambda.transpose() * lambda;
        let beta = linalg::cholesky(&gram, "loadings")?.solve(&(lambda.transpose() * &rob.mu_hat));
        let fitted = lambda * beta;
        let resid = (0..t).map(|k| rob.sigma_hat[(k, k)] + (rob.mu_hat[k] - fitted[k]).powi(2)).sum::<f64>() / t as f64;
        gaussian::start_values(spec, &rob.mu_hat, resid)?
    };
    let sol = fiml::maximize(spec, &stats, &start, options.fit_tol, options.fit_max_iter, 3)?;
    let estimates = Parameterization::new(spec.n_effects()).unpack(&sol.x);
    let uncertainty = fiml::standard_errors(spec, &stats, &estimates, rob.n_subjects as f64);
    let mu = spec.loadings() * estimates.beta_vec();
    let sigma = covariance_unchecked(spec.loadings(), &estimates.psi_mat(), estimates.sigma2_e);
    let f = discrepancy(&rob.mu_hat, &rob.sigma_hat, &mu, &sigma)?;
    let mut diagnostics = BTreeMap::new();
    diagnostics.insert("discrepancy".into(), f);
    diagnostics.insert("grad_norm".into(), sol.grad_norm);
    diagnostics.insert("iterations".into(), sol.iterations as f64);
    diagnostics.insert("stage1_iterations".into(), rob.iterations as f64);
    diagnostics.insert("stage1_converged".into(), if rob.converged { 1.0 } else { 0.0 });
    diagnostics.insert("n_subjects".into(), rob.n_subjects as f64);
    let downweighted = rob.weights.iter().filter(|&&w| w < 1.0).count();
    diagnostics.insert("downweighted_fraction".into(), downweighted as f64 / rob.weights.len().max(1) as f64);
    fiml::boundary_diagnostics(&estimates, &mut diagnostics);
    let converged = sol.converged && rob.converged;
    if !converged {
        log::warn!("TSRE did not converge (stage 1: {}, stage 2 gradient {:.3e})", rob.converged, sol.grad_norm);
    }
    Ok(FitResult {
        method: Method::Tsre,
        parameter_names: spec.parameter_names(),
        estimates,
        uncertainty,
        converged,
        diagnostics,
        posterior: None,
        weights: Some(rob.weights.clone()),
    })
}

/// Stage 1 followed by stage 2.
pub fn tsre_fit(spec: &GrowthModelSpec, data: &LongitudinalDataset, options: &TsreOptions) -> Result<FitResult> {
    if data.n_occasions() != spec.n_occasions() {
        return Err(GcmError::Dimension("data and model occasions differ".into()));
    }
    let rob = stage1_robust(data, options)?;
    stage2_fit(&rob, spec, options)
}
