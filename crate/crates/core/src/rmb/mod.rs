//! Median-based Bayesian growth curve estimation.
//!
//! The within-subject errors follow an asymmetric Laplace distribution at
//! τ = 1/2, so the fixed effects describe the median trajectory. Sampling
//! uses the exponential–normal mixture representation of the AL, which makes
//! every block except the selection model conditionally conjugate.

pub mod al;
pub mod sampler;
pub mod selection;

use std::fmt;
use std::str::FromStr;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::data::LongitudinalDataset;
use crate::error::{GcmError, Result};
use crate::gaussian;
use crate::geweke::{self, GEWEKE_CRITICAL};
use crate::model::{GrowthModelSpec, ParameterSet};
use crate::random::rng_from_seed;
use crate::result::{FitResult, Method, ParamSummary, ParamUncertainty, Uncertainty};

pub use al::{al_cdf, al_density, al_mixture_draw, al_params};
pub use sampler::{beta_conditional_direct, gibbs_step, impute_missing_ignorable, Blocks, GibbsSampler, Tuning};
pub use selection::{alpha_loglik, mh_update_alpha, mh_update_missing_mnar, selection_logit, SelectionScope};

pub type PosteriorSummary = Vec<ParamSummary>;

pub const DEFAULT_MH_STEP: f64 = 0.5;

/// Iterations between proposal adaptations during burn-in.
const ADAPT_EVERY: usize = 50;

#[derive(Debug, Clone, PartialEq)]
pub struct RmbPriors {
    /// Each β component ~ N(beta_mean, beta_var).
    pub beta_mean: f64,
    pub beta_var: f64,
    /// Ψ ~ IW(psi_scale, psi_df).
    pub psi_scale: DMatrix<f64>,
    pub psi_df: f64,
    /// σ ~ IG(sigma_shape, sigma_scale).
    pub sigma_shape: f64,
    pub sigma_scale: f64,
    /// Each α component ~ N(alpha_mean, alpha_var).
    pub alpha_mean: f64,
    pub alpha_var: f64,
}

impl RmbPriors {
    pub fn default_for(q: usize) -> Self {
        Self {
            beta_mean: 0.0,
            beta_var: 1e3,
            psi_scale: DMatrix::identity(q, q),
            psi_df: q as f64 + 1.0,
            sigma_shape: 0.001,
            sigma_scale: 0.001,
            alpha_mean: 0.0,
            alpha_var: 100.0,
        }
    }

    pub fn validate(&self, q: usize) -> Result<()> {
        if self.psi_scale.shape() != (q, q) {
            return Err(GcmError::Dimension(format!("psi prior scale must be {q}x{q}")));
        }
        crate::linalg::cholesky(&self.psi_scale, "psi prior scale")?;
        let positive = [self.beta_var, self.sigma_shape, self.sigma_scale, self.alpha_var];
        if positive.iter().any(|v| !(*v > 0.0 && v.is_finite())) || !self.beta_mean.is_finite() {
            return Err(GcmError::InvalidParameter("prior variances and IG hyperparameters must be positive".into()));
        }
        if self.psi_df <= q as f64 - 1.0 {
            return Err(GcmError::InvalidParameter(format!("psi prior df {} too small", self.psi_df)));
        }
        Ok(())
    }
}

/// Chain-length presets.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Profile {
    Test,
    Paper,
}

impl Profile {
    pub fn n_iter(&self) -> usize {
        match self {
            Profile::Test => 6_000,
            Profile::Paper => 60_000,
        }
    }
}

impl fmt::Display for Profile {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Profile::Test => "test",
            Profile::Paper => "paper",
        })
    }
}

impl FromStr for Profile {
    type Err = GcmError;
    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "test" => Ok(Profile::Test),
            "paper" => Ok(Profile::Paper),
            other => Err(GcmError::InvalidParameter(format!("unknown profile {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ChainConfig {
    pub n_iter: usize,
    pub burnin: usize,
    pub seed: u64,
    /// Initial random-walk scale; adapted during burn-in.
    pub mh_step: f64,
    #[serde(default)]
    pub selection_scope: SelectionScope,
}

impl ChainConfig {
    /// `n_iter` iterations with the first half discarded.
    pub fn new(n_iter: usize, seed: u64) -> Self {
        Self { n_iter, burnin: n_iter / 2, seed, mh_step: DEFAULT_MH_STEP, selection_scope: SelectionScope::AtRisk }
    }

    pub fn for_profile(profile: Profile, seed: u64) -> Self {
        Self::new(profile.n_iter(), seed)
    }

    pub fn validate(&self) -> Result<()> {
        if self.burnin >= self.n_iter {
            return Err(GcmError::InvalidParameter(format!("burn-in {} must be below n_iter {}", self.burnin, self.n_iter)));
        }
        if self.n_iter - self.burnin < geweke::MIN_CHAIN_LEN {
            return Err(GcmError::InvalidParameter(format!(
                "need at least {} retained draws",
                geweke::MIN_CHAIN_LEN
            )));
        }
        if !(self.mh_step > 0.0 && self.mh_step.is_finite()) {
            return Err(GcmError::InvalidParameter("mh_step must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct SelectionParams {
    pub alpha0: f64,
    pub alpha1: f64,
    pub alpha2: f64,
}

impl SelectionParams {
    #[inline]
    pub fn linear_predictor(&self, y_prev: f64, y_curr: f64) -> f64 {
        self.alpha0 + self.alpha1 * y_prev + self.alpha2 * y_curr
    }

    pub fn to_array(&self) -> [f64; 3] {
        [self.alpha0, self.alpha1, self.alpha2]
    }

    pub fn from_array(a: [f64; 3]) -> Self {
        Self { alpha0: a[0], alpha1: a[1], alpha2: a[2] }
    }
}

/// Sampler state. `y` holds observed values with masked cells filled by the
/// current imputations.
#[derive(Debug, Clone, PartialEq)]
pub struct AugmentedState {
    pub beta: DVector<f64>,
    /// N×q random effects.
    pub u: DMatrix<f64>,
    pub psi: DMatrix<f64>,
    pub sigma: f64,
    /// N×T latent exponential variables.
    pub w: DMatrix<f64>,
    pub y: DMatrix<f64>,
    pub alpha: Option<SelectionParams>,
}

impl AugmentedState {
    /// Starting values: β and Ψ from the moment-based starts, σ matched to the
    /// pooled residual variance, u = 0, masked cells at their implied means.
    pub fn initial(spec: &GrowthModelSpec, data: &LongitudinalDataset, selection: bool) -> Result<Self> {
        let (n, t) = (data.n_subjects(), data.n_occasions());
        let start = gaussian::start_from_data(spec, data)?;
        let beta = start.beta_vec();
        let sigma = (start.sigma2_e / 8.0).sqrt().max(1e-6);
        let mean = spec.loadings() * &beta;
        let y = DMatrix::from_fn(n, t, |i, k| data.get(i, k).unwrap_or(mean[k]));
        let alpha = selection.then(|| {
            let at_risk: Vec<(usize, usize)> =
                (0..n).flat_map(|i| (1..t).map(move |k| (i, k))).filter(|&(i, k)| data.is_observed(i, k - 1)).collect();
            let cells = at_risk.len();
            let miss = at_risk.iter().filter(|&&(i, k)| !data.is_observed(i, k)).count();
            let p = ((miss as f64 + 0.5) / (cells as f64 + 1.0)).clamp(1e-3, 1.0 - 1e-3);
            SelectionParams { alpha0: (p / (1.0 - p)).ln(), alpha1: 0.0, alpha2: 0.0 }
        });
        Ok(Self {
            beta,
            u: DMatrix::zeros(n, spec.n_effects()),
            psi: start.psi_mat(),
            sigma,
            w: DMatrix::from_element(n, t, sigma),
            y,
            alpha,
        })
    }

    /// Current imputations in row-major order over masked cells.
    pub fn imputed(&self, data: &LongitudinalDataset) -> Vec<f64> {
        let (n, t) = (data.n_subjects(), data.n_occasions());
        (0..n).flat_map(|i| (0..t).map(move |k| (i, k))).filter(|&(i, k)| !data.is_observed(i, k)).map(|(i, k)| self.y[(i, k)]).collect()
    }

    pub fn validate(&self, data: &LongitudinalDataset) -> Result<()> {
        if self.w.iter().any(|&w| !(w > 0.0)) {
            return Err(GcmError::InvalidParameter("latent W must be positive".into()));
        }
        if !(self.sigma > 0.0) {
            return Err(GcmError::InvalidParameter("sigma must be positive".into()));
        }
        crate::linalg::cholesky(&self.psi, "psi")?;
        for i in 0..data.n_subjects() {
            for k in 0..data.n_occasions() {
                if let Some(v) = data.get(i, k) {
                    if self.y[(i, k)] != v {
                        return Err(GcmError::InvalidParameter(format!("observed cell ({i}, {k}) was overwritten")));
                    }
                }
            }
        }
        Ok(())
    }
}

/// Retained draws, one row per post-burn-in iteration.
#[derive(Debug, Clone, PartialEq)]
pub struct DrawTable {
    pub names: Vec<String>,
    pub rows: Vec<Vec<f64>>,
}

impl DrawTable {
    pub fn column(&self, j: usize) -> Vec<f64> {
        self.rows.iter().map(|r| r[j]).collect()
    }

    pub fn write_csv<W: std::io::Write>(&self, writer: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        w.write_record(&self.names)?;
        for row in &self.rows {
            w.write_record(row.iter().map(|v| v.to_string()))?;
        }
        w.flush()?;
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct RmbRun {
    pub fit: FitResult,
    pub draws: DrawTable,
}

/// Names of the monitored transforms: β, log diag Ψ, log σ.
pub fn monitored_names(spec: &GrowthModelSpec) -> Vec<String> {
    let q = spec.n_effects();
    let names = spec.parameter_names();
    let mut out: Vec<String> = names[..q].to_vec();
    let mut idx = q;
    for i in 0..q {
        for j in 0..=i {
            if i == j {
                out.push(format!("log_{}", names[idx]));
            }
            idx += 1;
        }
    }
    out.push("log_sigma".into());
    out
}

fn record(state: &AugmentedState, q: usize, selection: bool) -> Vec<f64> {
    let mut row: Vec<f64> = state.beta.iter().copied().collect();
    row.extend(crate::linalg::lower_tri(&state.psi));
    row.push(8.0 * state.sigma * state.sigma);
    for k in 0..q {
        row.push(state.psi[(k, k)].ln());
    }
    row.push(state.sigma.ln());
    if selection {
        row.extend(state.alpha.unwrap_or_default().to_array());
    }
    row
}

fn quantile_sorted(sorted: &[f64], p: f64) -> f64 {
    let h = (sorted.len() - 1) as f64 * p;
    let lo = h.floor() as usize;
    let hi = h.ceil() as usize;
    sorted[lo] + (h - lo as f64) * (sorted[hi] - sorted[lo])
}

pub fn summarize(name: &str, draws: &[f64]) -> ParamSummary {
    let n = draws.len() as f64;
    let mean = draws.iter().sum::<f64>() / n;
    let sd = (draws.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0).max(1.0)).sqrt();
    let mut sorted = draws.to_vec();
    sorted.sort_by(f64::total_cmp);
    ParamSummary {
        name: name.to_string(),
        median: quantile_sorted(&sorted, 0.5),
        mean,
        sd,
        q025: quantile_sorted(&sorted, 0.025),
        q975: quantile_sorted(&sorted, 0.975),
        geweke_z: geweke::geweke_z(draws, geweke::FIRST_FRAC, geweke::LAST_FRAC).ok(),
    }
}

/// Minimum burn-in α draws before the proposal switches to their covariance.
const ALPHA_HISTORY_MIN: usize = 200;

fn adapt(
    sampler: &mut GibbsSampler<'_>,
    state: &AugmentedState,
    data: &LongitudinalDataset,
    priors: &RmbPriors,
    alpha_hist: &[[f64; 3]],
) {
    let scope = sampler.scope();
    let tuning = &mut sampler.tuning;
    let scale = |acc: f64, s: &mut f64| {
        if acc.is_nan() {
            return;
        }
        if acc < 0.2 {
            *s *= 0.75;
        } else if acc > 0.5 {
            *s *= 1.3;
        }
    };
    let y_acc = tuning.y_acceptance();
    scale(y_acc, &mut tuning.y_step);
    let a_acc = tuning.alpha_acceptance();
    scale(a_acc, &mut tuning.alpha_scale);
    tuning.reset_counts();
    let Some(alpha) = state.alpha else { return };
    // The later half of the history, so early transients drop out.
    let recent = &alpha_hist[alpha_hist.len() / 2..];
    if recent.len() >= ALPHA_HISTORY_MIN {
        if let Some(l) = empirical_proposal_chol(recent) {
            tuning.alpha_chol = l;
            return;
        }
    }
    if let Some(l) = selection::alpha_proposal_chol(&alpha, state, data, scope, priors.alpha_var) {
        tuning.alpha_chol = l;
    }
}

/// Cholesky factor of `(2.38²/3)·Cov(draws)` with a small ridge.
fn empirical_proposal_chol(draws: &[[f64; 3]]) -> Option<[[f64; 3]; 3]> {
    let n = draws.len() as f64;
    let mut mean = [0.0; 3];
    for d in draws {
        for r in 0..3 {
            mean[r] += d[r] / n;
        }
    }
    let mut c = [0.0; 9];
    for d in draws {
        for r in 0..3 {
            for s in 0..3 {
                c[r * 3 + s] += (d[r] - mean[r]) * (d[s] - mean[s]) / (n - 1.0);
            }
        }
    }
    for (k, v) in c.iter_mut().enumerate() {
        *v *= 2.38 * 2.38 / 3.0;
        if k % 4 == 0 {
            *v += 1e-8;
        }
    }
    if !sampler::chol_in_place(&mut c, 3) {
        return None;
    }
    Some([[c[0], 0.0, 0.0], [c[3], c[4], 0.0], [c[6], c[7], c[8]]])
}

/// Runs one chain and keeps the post-burn-in draws.
pub fn rmb_run(
    spec: &GrowthModelSpec,
    data: &LongitudinalDataset,
    priors: &RmbPriors,
    config: &ChainConfig,
    selection: bool,
) -> Result<RmbRun> {
    config.validate()?;
    let q = spec.n_effects();
    priors.validate(q)?;
    if data.n_subjects() == 0 {
        return Err(GcmError::EmptyInput("no subjects".into()));
    }
    let mut rng = rng_from_seed(config.seed);
    let mut state = AugmentedState::initial(spec, data, selection)?;
    let mut sampler = GibbsSampler::new(spec, data, priors, selection, config.mh_step)?;
    sampler.set_scope(config.selection_scope);
    if let Some(alpha) = state.alpha {
        if let Some(l) = selection::alpha_proposal_chol(&alpha, &state, data, sampler.scope(), priors.alpha_var) {
            sampler.tuning.alpha_chol = l;
        }
    }
    let mut names = spec.parameter_names();
    names.extend(monitored_names(spec).into_iter().skip(q));
    if selection {
        names.extend(["alpha0", "alpha1", "alpha2"].map(String::from));
    }
    let mut rows = Vec::with_capacity(config.n_iter - config.burnin);
    let mut alpha_hist = Vec::new();
    for it in 0..config.n_iter {
        sampler.step(&mut state, &mut rng)?;
        if it < config.burnin {
            if let Some(a) = state.alpha {
                alpha_hist.push(a.to_array());
            }
            if (it + 1) % ADAPT_EVERY == 0 {
                adapt(&mut sampler, &state, data, priors, &alpha_hist);
            }
            if it + 1 == config.burnin {
                sampler.tuning.reset_counts();
            }
        } else {
            rows.push(record(&state, q, selection));
        }
    }
    let draws = DrawTable { names, rows };
    let fit = build_fit(spec, &draws, &sampler, selection, config)?;
    Ok(RmbRun { fit, draws })
}

pub fn rmb_fit(
    spec: &GrowthModelSpec,
    data: &LongitudinalDataset,
    priors: &RmbPriors,
    config: &ChainConfig,
    selection: bool,
) -> Result<FitResult> {
    Ok(rmb_run(spec, data, priors, config, selection)?.fit)
}

fn build_fit(
    spec: &GrowthModelSpec,
    draws: &DrawTable,
    sampler: &GibbsSampler<'_>,
    selection: bool,
    config: &ChainConfig,
) -> Result<FitResult> {
    let q = spec.n_effects();
    let n_par = spec.n_params();
    let summaries: Vec<ParamSummary> =
        draws.names.iter().enumerate().map(|(j, name)| summarize(name, &draws.column(j))).collect();
    let flat: Vec<f64> = summaries[..n_par].iter().map(|s| s.median).collect();
    let estimates = ParameterSet::from_flat(q, &flat).or_else(|_| -> Result<ParameterSet> {
        // Elementwise medians of Ψ need not be PD; keep them unvalidated.
        let psi = crate::linalg::from_lower_tri(q, &flat[q..n_par - 1]);
        Ok(ParameterSet::new(DVector::from_column_slice(&flat[..q]), psi, flat[n_par - 1]))
    })?;
    let uncertainty = summaries[..n_par]
        .iter()
        .map(|s| ParamUncertainty {
            name: s.name.clone(),
            estimate: s.median,
            uncertainty: Uncertainty::Interval { lower: s.q025, upper: s.q975 },
        })
        .collect();
    let mut diagnostics = std::collections::BTreeMap::new();
    let mut converged = true;
    // Monitored transforms: the β columns and the log columns after the
    // reported parameters.
    let monitored: Vec<usize> = (0..q).chain(n_par..n_par + q + 1).collect();
    for &j in &monitored {
        let z = summaries[j].geweke_z;
        diagnostics.insert(format!("geweke_{}", summaries[j].name), z.unwrap_or(f64::NAN));
        if !matches!(z, Some(z) if z.abs() < GEWEKE_CRITICAL) {
            converged = false;
        }
    }
    let sigma_draws: Vec<f64> = draws.column(n_par + q).iter().map(|v| v.exp()).collect();
    diagnostics.insert("sigma_al".into(), summarize("sigma", &sigma_draws).median);
    diagnostics.insert("n_iter".into(), config.n_iter as f64);
    diagnostics.insert("burnin".into(), config.burnin as f64);
    if selection {
        diagnostics.insert("y_acceptance".into(), sampler.tuning.y_acceptance());
        diagnostics.insert("alpha_acceptance".into(), sampler.tuning.alpha_acceptance());
        for (k, s) in summaries[n_par + q + 1..].iter().enumerate() {
            diagnostics.insert(format!("alpha{k}"), s.median);
        }
    }
    if !converged {
        log::warn!("RMB chain failed the Geweke check");
    }
    Ok(FitResult {
        method: if selection { Method::RmbSelection } else { Method::Rmb },
        parameter_names: spec.parameter_names(),
        estimates,
        uncertainty,
        converged,
        diagnostics,
        posterior: Some(summaries),
        weights: None,
    })
}
