//! Logistic selection model for nonignorable dropout.
//!
//! `logit Pr(R_it = 1) = α₀ + α₁ y_{i,t−1} + α₂ y_it` for `t ≥ 1` (0-based),
//! where `R_it = 1` marks a missing cell. Under [`SelectionScope::AtRisk`] a
//! cell contributes only when occasion `t−1` was observed; with monotone
//! dropout this is the dropout hazard. [`SelectionScope::AllOccasions`] uses
//! every `t ≥ 1`, with masked lags entering through their current
//! imputations.

use std::sync::OnceLock;

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::al::median_draw_with_latent;
use super::sampler::{chol_in_place, GibbsSampler};
use super::{AugmentedState, SelectionParams};
use crate::data::LongitudinalDataset;
use crate::error::{GcmError, Result};
use crate::model::GrowthModelSpec;
use crate::random::std_normal;

/// Inverse logit of the linear predictor.
pub fn selection_logit(alpha: &SelectionParams, y_prev: f64, y_curr: f64) -> f64 {
    expit(alpha.linear_predictor(y_prev, y_curr))
}

#[inline]
fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

/// `log Pr(R = r)` for linear predictor `eta`.
#[inline]
fn log_bernoulli(missing: bool, eta: f64) -> f64 {
    if missing {
        eta - softplus(eta)
    } else {
        -softplus(eta)
    }
}

/// Which missingness indicators enter the selection likelihood.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SelectionScope {
    #[default]
    AtRisk,
    AllOccasions,
}

impl SelectionScope {
    #[inline]
    pub(crate) fn includes(&self, data: &LongitudinalDataset, i: usize, k: usize) -> bool {
        k >= 1 && (*self == SelectionScope::AllOccasions || data.is_observed(i, k - 1))
    }
}

/// Bernoulli log-likelihood of the missingness indicators at risk.
pub fn alpha_loglik(
    alpha: &SelectionParams,
    state: &AugmentedState,
    data: &LongitudinalDataset,
    scope: SelectionScope,
) -> f64 {
    let mut ll = 0.0;
    for i in 0..data.n_subjects() {
        for k in (1..data.n_occasions()).filter(|&k| scope.includes(data, i, k)) {
            let eta = alpha.linear_predictor(state.y[(i, k - 1)], state.y[(i, k)]);
            ll += log_bernoulli(!data.is_observed(i, k), eta);
        }
    }
    ll
}

/// Selection terms of the log target that involve `y_{ik}`.
fn cell_selection_terms(
    alpha: &SelectionParams,
    data: &LongitudinalDataset,
    scope: SelectionScope,
    y: &[f64],
    i: usize,
    k: usize,
) -> f64 {
    // `y` holds subject i's row; y[k] is the candidate value.
    let t = y.len();
    let mut s = 0.0;
    if scope.includes(data, i, k) {
        s += log_bernoulli(!data.is_observed(i, k), alpha.linear_predictor(y[k - 1], y[k]));
    }
    if k + 1 < t && scope.includes(data, i, k + 1) {
        s += log_bernoulli(!data.is_observed(i, k + 1), alpha.linear_predictor(y[k], y[k + 1]));
    }
    s
}

/// Random-walk Metropolis on every masked cell in a selection term against the AL density times
/// the selection terms. Returns `(accepted, proposed)`.
pub(crate) fn mh_missing_cells<R: Rng + ?Sized>(
    sampler: &GibbsSampler<'_>,
    state: &mut AugmentedState,
    alpha: &SelectionParams,
    rng: &mut R,
) -> (u64, u64) {
    let data = sampler.data();
    let scope = sampler.scope();
    let t = sampler.n_occasions();
    let step = sampler.tuning.y_step * 8f64.sqrt() * state.sigma;
    let inv_scale = 1.0 / (2.0 * state.sigma);
    let mut row = vec![0.0; t];
    let mut accepted = 0;
    for &(i, k) in sampler.selection_cells() {
        for (kk, v) in row.iter_mut().enumerate() {
            *v = state.y[(i, kk)];
        }
        let mu = sampler.cell_mean(state, i, k);
        let current = row[k];
        let lp_cur = -(current - mu).abs() * inv_scale + cell_selection_terms(alpha, data, scope, &row, i, k);
        let prop = current + step * std_normal(rng);
        row[k] = prop;
        let lp_prop = -(prop - mu).abs() * inv_scale + cell_selection_terms(alpha, data, scope, &row, i, k);
        let log_u = rng.random::<f64>().ln();
        if log_u < lp_prop - lp_cur {
            state.y[(i, k)] = prop;
            accepted += 1;
        }
    }
    (accepted, sampler.selection_cells().len() as u64)
}

fn log_prior(alpha: &SelectionParams, mean: f64, var: f64) -> f64 {
    alpha.to_array().iter().map(|a| -(a - mean).powi(2) / (2.0 * var)).sum()
}

fn propose_alpha<R: Rng + ?Sized>(sampler: &GibbsSampler<'_>, alpha: &SelectionParams, rng: &mut R) -> SelectionParams {
    let l = &sampler.tuning.alpha_chol;
    let z = [std_normal(rng), std_normal(rng), std_normal(rng)];
    let cur = alpha.to_array();
    let mut prop = [0.0; 3];
    for r in 0..3 {
        let dev: f64 = (0..=r).map(|c| l[r][c] * z[c]).sum();
        prop[r] = cur[r] + sampler.tuning.alpha_scale * dev;
    }
    SelectionParams::from_array(prop)
}

/// Joint random-walk Metropolis step for α. Returns whether it moved.
pub(crate) fn mh_alpha<R: Rng + ?Sized>(
    sampler: &GibbsSampler<'_>,
    state: &mut AugmentedState,
    rng: &mut R,
) -> Result<bool> {
    let alpha = state.alpha.ok_or_else(|| GcmError::InvalidParameter("selection mode needs alpha".into()))?;
    let priors = sampler.priors();
    let data = sampler.data();
    let prop = propose_alpha(sampler, &alpha, rng);
    let scope = sampler.scope();
    let lp_cur = alpha_loglik(&alpha, state, data, scope) + log_prior(&alpha, priors.alpha_mean, priors.alpha_var);
    let lp_prop = alpha_loglik(&prop, state, data, scope) + log_prior(&prop, priors.alpha_mean, priors.alpha_var);
    let log_u = rng.random::<f64>().ln();
    if log_u < lp_prop - lp_cur {
        state.alpha = Some(prop);
        Ok(true)
    } else {
        Ok(false)
    }
}

/// Base α proposal: `(2.38²/3)·(X'WX + I/v)⁻¹` at the current α, where X has
/// rows `(1, y_{t−1}, y_t)` and W the logistic variances.
pub(crate) fn alpha_proposal_chol(
    alpha: &SelectionParams,
    state: &AugmentedState,
    data: &LongitudinalDataset,
    scope: SelectionScope,
    prior_var: f64,
) -> Option<[[f64; 3]; 3]> {
    let mut info = [0.0; 9];
    for i in 0..data.n_subjects() {
        for k in (1..data.n_occasions()).filter(|&k| scope.includes(data, i, k)) {
            let x = [1.0, state.y[(i, k - 1)], state.y[(i, k)]];
            let p = selection_logit(alpha, x[1], x[2]);
            let wt = p * (1.0 - p);
            for r in 0..3 {
                for c in 0..3 {
                    info[r * 3 + c] += wt * x[r] * x[c];
                }
            }
        }
    }
    for r in 0..3 {
        info[r * 3 + r] += 1.0 / prior_var;
    }
    // Cholesky of the inverse via the inverse of the information.
    let m = nalgebra::Matrix3::from_row_slice(&info);
    let cov = m.try_inverse()? * (2.38 * 2.38 / 3.0);
    let mut c = [0.0; 9];
    for r in 0..3 {
        for s in 0..3 {
            c[r * 3 + s] = 0.5 * (cov[(r, s)] + cov[(s, r)]);
        }
    }
    if !chol_in_place(&mut c, 3) {
        return None;
    }
    Some([[c[0], 0.0, 0.0], [c[3], c[4], 0.0], [c[6], c[7], c[8]]])
}

/// Gauss–Legendre nodes and weights on (0, 1).
fn legendre_unit() -> &'static [(f64, f64)] {
    static NODES: OnceLock<Vec<(f64, f64)>> = OnceLock::new();
    NODES.get_or_init(|| {
        const M: usize = 20;
        let mut out = Vec::with_capacity(M);
        for j in 0..M {
            let mut x = (std::f64::consts::PI * (j as f64 + 0.75) / (M as f64 + 0.5)).cos();
            let mut dp = 0.0;
            for _ in 0..100 {
                let (mut p0, mut p1) = (1.0, x);
                for k in 2..=M {
                    let p2 = ((2 * k - 1) as f64 * x * p1 - (k - 1) as f64 * p0) / k as f64;
                    p0 = p1;
                    p1 = p2;
                }
                dp = M as f64 * (x * p1 - p0) / (x * x - 1.0);
                let dx = p1 / dp;
                x -= dx;
                if dx.abs() < 1e-15 {
                    break;
                }
            }
            out.push((0.5 * (1.0 - x), 1.0 / ((1.0 - x * x) * dp * dp)));
        }
        out
    })
}

/// `∫ expit(a + b·y) AL(y; μ, σ, ½) dy`. With `y = μ ± 2σx`, `x ~ Exp(1)`,
/// each half is an expectation over `x = −ln(1 − v)`, `v ~ U(0, 1)`.
/// The v-interval is split around the logistic transition at `x = |c/d|`.
pub fn missing_prob_marginal(a: f64, b: f64, mu: f64, sigma: f64) -> f64 {
    let c = a + b * mu;
    let d = 2.0 * sigma * b;
    let g = |v: f64| {
        let x = -(-v).ln_1p();
        expit(c + d * x) + expit(c - d * x)
    };
    let mut cuts = vec![0.0, 1.0];
    if d != 0.0 {
        let x0 = (c / d).abs();
        let w = 4.0 / d.abs();
        for x in [x0 - w, x0, x0 + w] {
            if x > 0.0 {
                cuts.push(-(-x).exp_m1());
            }
        }
    }
    cuts.sort_by(|p, q| p.total_cmp(q));
    cuts.dedup();
    let mut s = 0.0;
    for seg in cuts.windows(2) {
        let (lo, len) = (seg[0], seg[1] - seg[0]);
        if len <= 0.0 {
            continue;
        }
        for &(v, wt) in legendre_unit() {
            s += len * wt * g(lo + len * v);
        }
    }
    0.5 * s
}

#[inline]
fn expit(eta: f64) -> f64 {
    if eta >= 0.0 {
        1.0 / (1.0 + (-eta).exp())
    } else {
        let e = eta.exp();
        e / (1.0 + e)
    }
}

/// Selection log-likelihood with the masked at-risk cells integrated over
/// their AL conditional given (β, u, σ). Only defined for the at-risk scope,
/// where every such cell has an observed lag.
pub(crate) fn alpha_loglik_collapsed(sampler: &GibbsSampler<'_>, alpha: &SelectionParams, state: &AugmentedState) -> f64 {
    let data = sampler.data();
    let mut ll = 0.0;
    for i in 0..data.n_subjects() {
        for k in (1..data.n_occasions()).filter(|&k| data.is_observed(i, k - 1)) {
            if data.is_observed(i, k) {
                ll += log_bernoulli(false, alpha.linear_predictor(state.y[(i, k - 1)], state.y[(i, k)]));
            } else {
                let a = alpha.alpha0 + alpha.alpha1 * state.y[(i, k - 1)];
                let p = missing_prob_marginal(a, alpha.alpha2, sampler.cell_mean(state, i, k), state.sigma);
                ll += p.max(f64::MIN_POSITIVE).ln();
            }
        }
    }
    ll
}

/// Upper bound on rejection attempts per cell before falling back to a
/// Metropolis move.
const MAX_REJECTION_TRIES: usize = 100_000;

/// Exact draw of each masked selection cell from `AL(μ, σ) × Pr(R | y)`, by
/// proposing from the AL and accepting with the Bernoulli factor, followed
/// by a fresh `w` for the cell.
pub(crate) fn draw_selection_cells<R: Rng + ?Sized>(
    sampler: &GibbsSampler<'_>,
    state: &mut AugmentedState,
    alpha: &SelectionParams,
    rng: &mut R,
) {
    let data = sampler.data();
    let scope = sampler.scope();
    let t = sampler.n_occasions();
    let mut row = vec![0.0; t];
    for &(i, k) in sampler.selection_cells() {
        for (kk, v) in row.iter_mut().enumerate() {
            *v = state.y[(i, kk)];
        }
        let mu = sampler.cell_mean(state, i, k);
        let mut done = false;
        for _ in 0..MAX_REJECTION_TRIES {
            let (y, w) = median_draw_with_latent(mu, state.sigma, rng);
            row[k] = y;
            if rng.random::<f64>().ln() < cell_selection_terms(alpha, data, scope, &row, i, k) {
                state.y[(i, k)] = y;
                state.w[(i, k)] = w;
                done = true;
                break;
            }
        }
        if !done {
            log::warn!("rejection sampler exhausted for cell ({i}, {k}); keeping a Metropolis move");
        }
    }
}

/// Metropolis step for α on the collapsed likelihood, then the masked
/// selection cells redrawn exactly given the new α.
pub(crate) fn mh_alpha_collapsed<R: Rng + ?Sized>(
    sampler: &GibbsSampler<'_>,
    state: &mut AugmentedState,
    rng: &mut R,
) -> Result<bool> {
    let alpha = state.alpha.ok_or_else(|| GcmError::InvalidParameter("selection mode needs alpha".into()))?;
    let priors = sampler.priors();
    let prop = propose_alpha(sampler, &alpha, rng);
    let lp_cur = alpha_loglik_collapsed(sampler, &alpha, state) + log_prior(&alpha, priors.alpha_mean, priors.alpha_var);
    let lp_prop = alpha_loglik_collapsed(sampler, &prop, state) + log_prior(&prop, priors.alpha_mean, priors.alpha_var);
    let accepted = rng.random::<f64>().ln() < lp_prop - lp_cur;
    let a = if accepted { prop } else { alpha };
    state.alpha = Some(a);
    draw_selection_cells(sampler, state, &a, rng);
    Ok(accepted)
}

/// Standalone MNAR imputation sweep; returns the acceptance rate.
pub fn mh_update_missing_mnar<R: Rng + ?Sized>(
    state: &mut AugmentedState,
    data: &LongitudinalDataset,
    spec: &GrowthModelSpec,
    mh_step: f64,
    rng: &mut R,
) -> Result<f64> {
    let alpha = state.alpha.ok_or_else(|| GcmError::InvalidParameter("selection mode needs alpha".into()))?;
    let priors = super::RmbPriors::default_for(spec.n_effects());
    let sampler = GibbsSampler::new(spec, data, &priors, true, mh_step)?;
    let (acc, prop) = mh_missing_cells(&sampler, state, &alpha, rng);
    Ok(if prop == 0 { f64::NAN } else { acc as f64 / prop as f64 })
}

/// Standalone α update with the proposal built at the current α.
pub fn mh_update_alpha<R: Rng + ?Sized>(
    state: &mut AugmentedState,
    data: &LongitudinalDataset,
    spec: &GrowthModelSpec,
    priors: &super::RmbPriors,
    rng: &mut R,
) -> Result<SelectionParams> {
    let alpha = state.alpha.ok_or_else(|| GcmError::InvalidParameter("selection mode needs alpha".into()))?;
    let mut sampler = GibbsSampler::new(spec, data, priors, true, super::DEFAULT_MH_STEP)?;
    if let Some(l) = alpha_proposal_chol(&alpha, state, data, sampler.scope(), priors.alpha_var) {
        sampler.tuning.alpha_chol = l;
    }
    mh_alpha(&sampler, state, rng)?;
    Ok(state.alpha.expect("alpha present"))
}
