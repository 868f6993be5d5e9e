//! Normal-theory log-likelihood of the growth model from pattern-grouped
//! sufficient statistics, and its gradient.
//!
//! The unconstrained coordinates are `[β, vech(L), log σ²_e]` where `Ψ = LL'`
//! and the diagonal of `L` is stored on the log scale. The gradient is
//! analytic: with `dℓ = g_μ'dμ + tr(G dΣ)`,
//!
//! * `∂ℓ/∂β = Λ'g_μ`
//! * `∂ℓ/∂L = 2 Λ'GΛ L` (lower triangle; diagonal entries times `L_jj`)
//! * `∂ℓ/∂log σ² = σ² tr(G)`

use nalgebra::{DMatrix, DVector};

use crate::data::LongitudinalDataset;
use crate::error::{GcmError, Result};
use crate::linalg;
use crate::model::{covariance_unchecked, GrowthModelSpec, ParameterSet};

const LN_2PI: f64 = 1.837_877_066_409_345_5;

/// Sums over the subjects of one missingness pattern.
#[derive(Debug, Clone, PartialEq)]
pub struct PatternStats {
    pub occasions: Vec<usize>,
    pub n: f64,
    pub sum: DVector<f64>,
    /// Σ y y' over the pattern's subjects (observed coordinates only).
    pub cross: DMatrix<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SufficientStats {
    pub n_occasions: usize,
    pub patterns: Vec<PatternStats>,
}

impl SufficientStats {
    pub fn from_dataset(data: &LongitudinalDataset) -> Self {
        let patterns = data
            .patterns()
            .into_iter()
            .map(|p| {
                let k = p.occasions.len();
                let mut sum = DVector::zeros(k);
                let mut cross = DMatrix::zeros(k, k);
                for &i in &p.subjects {
                    let y = DVector::from_iterator(k, p.occasions.iter().map(|&t| data.raw_values()[(i, t)]));
                    cross += &y * y.transpose();
                    sum += y;
                }
                PatternStats { occasions: p.occasions, n: p.subjects.len() as f64, sum, cross }
            })
            .collect();
        Self { n_occasions: data.n_occasions(), patterns }
    }

    /// A single complete "subject" whose moments are (μ̂, Σ̂).
    pub fn from_moments(mu: &DVector<f64>, sigma: &DMatrix<f64>) -> Self {
        let t = mu.len();
        Self {
            n_occasions: t,
            patterns: vec![PatternStats {
                occasions: (0..t).collect(),
                n: 1.0,
                sum: mu.clone(),
                cross: sigma + mu * mu.transpose(),
            }],
        }
    }

    pub fn n_subjects(&self) -> f64 {
        self.patterns.iter().map(|p| p.n).sum()
    }
}

/// Log-likelihood with `g_μ` (length T) and `G` (T×T) such that
/// `dℓ = g_μ'dμ + tr(G dΣ)`.
pub struct MomentGradient {
    pub loglik: f64,
    pub g_mu: DVector<f64>,
    pub g_sigma: DMatrix<f64>,
}

pub fn loglik_moments(stats: &SufficientStats, mu: &DVector<f64>, sigma: &DMatrix<f64>) -> Result<MomentGradient> {
    let t = stats.n_occasions;
    let mut loglik = 0.0;
    let mut g_mu = DVector::zeros(t);
    let mut g_sigma = DMatrix::zeros(t, t);
    for p in &stats.patterns {
        let k = p.occasions.len();
        let s_o = linalg::select_sym(sigma, &p.occasions);
        let m_o = linalg::select_vec(mu, &p.occasions);
        let chol = linalg::cholesky(&s_o, "observed-data covariance")?;
        let inv = chol.inverse();
        let scatter =
            &p.cross - &p.sum * m_o.transpose() - &m_o * p.sum.transpose() + (&m_o * m_o.transpose()) * p.n;
        let inv_s = &inv * &scatter;
        loglik += -0.5 * p.n * (k as f64 * LN_2PI + linalg::log_det(&chol)) - 0.5 * inv_s.trace();
        let gm = &inv * (&p.sum - &m_o * p.n);
        let gs = (&inv_s * &inv - &inv * p.n) * 0.5;
        for (a, &ta) in p.occasions.iter().enumerate() {
            g_mu[ta] += gm[a];
            for (b, &tb) in p.occasions.iter().enumerate() {
                g_sigma[(ta, tb)] += gs[(a, b)];
            }
        }
    }
    Ok(MomentGradient { loglik, g_mu, g_sigma })
}

/// Maps between [`ParameterSet`] and unconstrained coordinates.
#[derive(Debug, Clone)]
pub struct Parameterization {
    pub q: usize,
}

impl Parameterization {
    pub fn new(q: usize) -> Self {
        Self { q }
    }

    pub fn len(&self) -> usize {
        self.q + self.q * (self.q + 1) / 2 + 1
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn pack(&self, params: &ParameterSet) -> Result<DVector<f64>> {
        let q = self.q;
        let l = linalg::cholesky(&params.psi_mat(), "psi")?.l();
        let mut x = DVector::zeros(self.len());
        x.rows_mut(0, q).copy_from(&params.beta_vec());
        let mut k = q;
        for i in 0..q {
            for j in 0..=i {
                x[k] = if i == j { l[(i, i)].ln() } else { l[(i, j)] };
                k += 1;
            }
        }
        x[k] = params.sigma2_e.ln();
        Ok(x)
    }

    fn chol_factor(&self, x: &DVector<f64>) -> DMatrix<f64> {
        let q = self.q;
        let mut l = DMatrix::zeros(q, q);
        let mut k = q;
        for i in 0..q {
            for j in 0..=i {
                l[(i, j)] = if i == j { x[k].exp() } else { x[k] };
                k += 1;
            }
        }
        l
    }

    pub fn unpack(&self, x: &DVector<f64>) -> ParameterSet {
        let l = self.chol_factor(x);
        let psi = &l * l.transpose();
        ParameterSet::new(x.rows(0, self.q).into_owned(), psi, x[self.len() - 1].exp())
    }

    /// ℓ and ∂ℓ/∂x at unconstrained `x`.
    pub fn loglik_grad(
        &self,
        spec: &GrowthModelSpec,
        stats: &SufficientStats,
        x: &DVector<f64>,
    ) -> Result<(f64, DVector<f64>)> {
        let q = self.q;
        let lambda = spec.loadings();
        let l = self.chol_factor(x);
        let psi = &l * l.transpose();
        let s2 = x[self.len() - 1].exp();
        let beta = x.rows(0, q).into_owned();
        let mu = lambda * &beta;
        let sigma = covariance_unchecked(lambda, &psi, s2);
        let mg = loglik_moments(stats, &mu, &sigma)?;
        let mut grad = DVector::zeros(self.len());
        grad.rows_mut(0, q).copy_from(&(lambda.transpose() * &mg.g_mu));
        let h = lambda.transpose() * &mg.g_sigma * lambda;
        let dl = (&h * &l) * 2.0;
        let mut k = q;
        for i in 0..q {
            for j in 0..=i {
                grad[k] = if i == j { dl[(i, i)] * l[(i, i)] } else { dl[(i, j)] };
                k += 1;
            }
        }
        grad[k] = mg.g_sigma.trace() * s2;
        Ok((mg.loglik, grad))
    }
}

/// ℓ and its gradient in natural coordinates `[β, vech(Ψ), σ²_e]`
/// (the flattened order of [`ParameterSet::to_flat`]).
pub fn loglik_grad_natural(
    spec: &GrowthModelSpec,
    stats: &SufficientStats,
    flat: &DVector<f64>,
) -> Result<(f64, DVector<f64>)> {
    let q = spec.n_effects();
    let params = ParameterSet::from_flat(q, flat.as_slice())?;
    let lambda = spec.loadings();
    let mu = lambda * params.beta_vec();
    let sigma = covariance_unchecked(lambda, &params.psi_mat(), params.sigma2_e);
    let mg = loglik_moments(stats, &mu, &sigma)?;
    let mut grad = DVector::zeros(flat.len());
    grad.rows_mut(0, q).copy_from(&(lambda.transpose() * &mg.g_mu));
    let h = lambda.transpose() * &mg.g_sigma * lambda;
    let mut k = q;
    for i in 0..q {
        for j in 0..=i {
            grad[k] = if i == j { h[(i, i)] } else { 2.0 * h[(i, j)] };
            k += 1;
        }
    }
    grad[k] = mg.g_sigma.trace();
    Ok((mg.loglik, grad))
}

/// Occasion means regressed on the loadings; Ψ = I; σ²_e the pooled
/// residual variance around the fitted means.
pub fn start_values(spec: &GrowthModelSpec, mu_hat: &DVector<f64>, resid_var: f64) -> Result<ParameterSet> {
    let lambda = spec.loadings();
    let gram = lambda.transpose() * lambda;
    let beta = linalg::cholesky(&gram, "loadings")?.solve(&(lambda.transpose() * mu_hat));
    let s2 = if resid_var.is_finite() && resid_var > 1e-8 { resid_var } else { 1.0 };
    Ok(ParameterSet::new(beta, DMatrix::identity(spec.n_effects(), spec.n_effects()), s2))
}

/// Start values from observed occasion means.
pub fn start_from_data(spec: &GrowthModelSpec, data: &LongitudinalDataset) -> Result<ParameterSet> {
    let t = data.n_occasions();
    if t != spec.n_occasions() {
        return Err(GcmError::Dimension(format!("data have {t} occasions, model has {}", spec.n_occasions())));
    }
    let means = DVector::from_fn(t, |k, _| {
        let vals: Vec<f64> = (0..data.n_subjects()).filter_map(|i| data.get(i, k)).collect();
        if vals.is_empty() {
            f64::NAN
        } else {
            vals.iter().sum::<f64>() / vals.len() as f64
        }
    });
    // Occasions nobody observed: interpolate through the fitted line later.
    let observed: Vec<usize> = (0..t).filter(|&k| means[k].is_finite()).collect();
    let lam_o = spec.loadings_for(&observed);
    let m_o = linalg::select_vec(&means, &observed);
    let gram = lam_o.transpose() * &lam_o;
    let beta = linalg::cholesky(&gram, "loadings of observed occasions")?.solve(&(lam_o.transpose() * m_o));
    let fitted = spec.loadings() * &beta;
    let mut ss = 0.0;
    let mut cnt = 0usize;
    for i in 0..data.n_subjects() {
        for k in 0..t {
            if let Some(v) = data.get(i, k) {
                ss += (v - fitted[k]).powi(2);
                cnt += 1;
            }
        }
    }
    start_values(spec, &fitted, ss / cnt.max(1) as f64)
}
