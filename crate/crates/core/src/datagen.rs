//! Simulated growth data: complete trajectories under four error families,
//! then MAR or MNAR deletion.

use std::fmt;
use std::str::FromStr;

use nalgebra::DMatrix;
use rand::Rng;
use rand_distr::{Distribution, StudentT};
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal as StatNormal};

use crate::data::LongitudinalDataset;
use crate::error::{GcmError, Result};
use crate::linalg;
use crate::model::{GrowthModelSpec, ParameterSet};
use crate::random::std_normal;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ErrorKind {
    Normal,
    #[serde(rename = "t5")]
    StudentT5,
    #[serde(rename = "outliers")]
    NormalWithOutliers,
    LogNormal,
}

impl ErrorKind {
    pub const ALL: [ErrorKind; 4] =
        [ErrorKind::Normal, ErrorKind::StudentT5, ErrorKind::NormalWithOutliers, ErrorKind::LogNormal];

    pub fn as_str(&self) -> &'static str {
        match self {
            ErrorKind::Normal => "normal",
            ErrorKind::StudentT5 => "t5",
            ErrorKind::NormalWithOutliers => "outliers",
            ErrorKind::LogNormal => "lognormal",
        }
    }
}

impl fmt::Display for ErrorKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for ErrorKind {
    type Err = GcmError;
    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "normal" => Ok(ErrorKind::Normal),
            "t5" | "t" | "student-t" => Ok(ErrorKind::StudentT5),
            "outliers" | "normal-outliers" => Ok(ErrorKind::NormalWithOutliers),
            "lognormal" | "ln" => Ok(ErrorKind::LogNormal),
            other => Err(GcmError::InvalidParameter(format!("unknown error distribution {other:?}"))),
        }
    }
}

/// Within-subject error family.
///
/// With `moment_matched` (the default) the t and lognormal draws are rescaled
/// to variance σ²_e and the lognormal is centred at its mean. Without it, t
/// draws are `σ·t₅` and lognormal draws are `σ·(exp(Z) − 1)` (median-centred).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ErrorDistribution {
    pub kind: ErrorKind,
    pub outlier_rate: f64,
    pub outlier_shift: f64,
    pub moment_matched: bool,
}

impl ErrorDistribution {
    pub fn new(kind: ErrorKind) -> Self {
        let outlier_rate = if kind == ErrorKind::NormalWithOutliers { 0.05 } else { 0.0 };
        Self { kind, outlier_rate, outlier_shift: 5.0, moment_matched: true }
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..1.0).contains(&self.outlier_rate) {
            return Err(GcmError::InvalidParameter(format!("outlier rate {} not in [0,1)", self.outlier_rate)));
        }
        if !self.outlier_shift.is_finite() {
            return Err(GcmError::InvalidParameter("outlier shift must be finite".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "UPPERCASE")]
pub enum Mechanism {
    None,
    Mar,
    Mnar,
}

impl Mechanism {
    pub fn as_str(&self) -> &'static str {
        match self {
            Mechanism::None => "none",
            Mechanism::Mar => "MAR",
            Mechanism::Mnar => "MNAR",
        }
    }
}

impl fmt::Display for Mechanism {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Mechanism {
    type Err = GcmError;
    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_uppercase().as_str() {
            "NONE" => Ok(Mechanism::None),
            "MAR" => Ok(Mechanism::Mar),
            "MNAR" => Ok(Mechanism::Mnar),
            other => Err(GcmError::InvalidParameter(format!("unknown missingness mechanism {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MissingSpec {
    pub mechanism: Mechanism,
    pub rate: f64,
    /// Auxiliary-variable slope on the latent slope (MNAR only).
    pub r: f64,
}

impl MissingSpec {
    pub fn new(mechanism: Mechanism, rate: f64) -> Self {
        Self { mechanism, rate, r: 0.8 }
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..1.0).contains(&self.rate) {
            return Err(GcmError::InvalidParameter(format!("missingness rate {} not in [0,1)", self.rate)));
        }
        if !self.r.is_finite() {
            return Err(GcmError::InvalidParameter("r must be finite".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SimulatedDataset {
    pub data: LongitudinalDataset,
    /// Subject-specific effects b_i = β + u_i, N×q.
    pub true_effects: DMatrix<f64>,
    /// Values before any deletion, N×T.
    pub complete_values: DMatrix<f64>,
}

/// Rows are `β + u_i` with `u_i ~ N(0, Ψ)`.
pub fn gen_random_effects<R: Rng + ?Sized>(params: &ParameterSet, n: usize, rng: &mut R) -> Result<DMatrix<f64>> {
    params.validate()?;
    let q = params.beta.len();
    let l = linalg::cholesky(&params.psi_mat(), "psi")?.l();
    let mut out = DMatrix::zeros(n, q);
    let mut z = vec![0.0; q];
    for i in 0..n {
        for zk in z.iter_mut() {
            *zk = std_normal(rng);
        }
        for j in 0..q {
            let dev: f64 = (0..=j).map(|k| l[(j, k)] * z[k]).sum();
            out[(i, j)] = params.beta[j] + dev;
        }
    }
    Ok(out)
}

/// N×T within-subject errors.
pub fn gen_errors<R: Rng + ?Sized>(
    dist: &ErrorDistribution,
    n: usize,
    t: usize,
    sigma2_e: f64,
    rng: &mut R,
) -> Result<DMatrix<f64>> {
    dist.validate()?;
    if !(sigma2_e > 0.0) || !sigma2_e.is_finite() {
        return Err(GcmError::InvalidParameter(format!("sigma2_e must be positive, got {sigma2_e}")));
    }
    let sd = sigma2_e.sqrt();
    let t5 = StudentT::new(5.0).expect("valid degrees of freedom");
    let e = std::f64::consts::E;
    let ln_mean = 0.5f64.exp();
    let ln_sd = ((e - 1.0) * e).sqrt();
    let mut out = DMatrix::zeros(n, t);
    for i in 0..n {
        for k in 0..t {
            out[(i, k)] = match dist.kind {
                ErrorKind::Normal => sd * std_normal(rng),
                ErrorKind::StudentT5 => {
                    let x: f64 = t5.sample(rng);
                    if dist.moment_matched {
                        x * (sigma2_e * 3.0 / 5.0).sqrt()
                    } else {
                        x * sd
                    }
                }
                ErrorKind::NormalWithOutliers => {
                    let outlier = rng.random::<f64>() < dist.outlier_rate;
                    let base = sd * std_normal(rng);
                    if outlier {
                        base + dist.outlier_shift
                    } else {
                        base
                    }
                }
                ErrorKind::LogNormal => {
                    let x = std_normal(rng).exp();
                    if dist.moment_matched {
                        sd * (x - ln_mean) / ln_sd
                    } else {
                        sd * (x - 1.0)
                    }
                }
            };
        }
    }
    Ok(out)
}

/// Complete data `y_i = Λ b_i + e_i`, every cell observed.
pub fn gen_complete<R: Rng + ?Sized>(
    spec: &GrowthModelSpec,
    params: &ParameterSet,
    dist: &ErrorDistribution,
    n: usize,
    rng: &mut R,
) -> Result<SimulatedDataset> {
    if params.beta.len() != spec.n_effects() {
        return Err(GcmError::Dimension("beta length must match loadings".into()));
    }
    let effects = gen_random_effects(params, n, rng)?;
    let errors = gen_errors(dist, n, spec.n_occasions(), params.sigma2_e, rng)?;
    let values = &effects * spec.loadings().transpose() + errors;
    let data = LongitudinalDataset::complete(values.clone())?;
    Ok(SimulatedDataset { data, true_effects: effects, complete_values: values })
}

/// Target fraction of subjects missing at 0-based occasion `t`:
/// `2t·mr/(T−1)`, which averages to `mr` over all T occasions.
fn cumulative_target(t: usize, n_occasions: usize, mr: f64) -> f64 {
    2.0 * t as f64 * mr / (n_occasions as f64 - 1.0)
}

fn check_rate(mr: f64, n_occasions: usize) -> Result<()> {
    if !(0.0..1.0).contains(&mr) {
        return Err(GcmError::InvalidParameter(format!("missingness rate {mr} not in [0,1)")));
    }
    let last = cumulative_target(n_occasions - 1, n_occasions, mr);
    if last >= 1.0 {
        return Err(GcmError::InvalidParameter(format!(
            "missingness rate {mr} pushes the last cutoff percentile to {:.3} <= 0",
            1.0 - last
        )));
    }
    Ok(())
}

/// Sequential MAR dropout.
///
/// At occasion `t` (0-based, `t < T−1`) subjects still observed whose `y_t`
/// exceeds the cutoff `c_t` lose occasions `t+1..T`. `c_t` is the empirical
/// upper quantile of the still-observed `y_t`, placed so that the cumulative
/// share of dropped subjects reaches `2(t+1)·mr/(T−1)` of the sample.
pub fn impose_mar(sim: &SimulatedDataset, mr: f64) -> Result<SimulatedDataset> {
    let (n, t_len) = sim.complete_values.shape();
    check_rate(mr, t_len)?;
    let mut mask = sim.data.mask().to_vec();
    if mr == 0.0 || n == 0 {
        return Ok(sim.clone());
    }
    let mut dropped = vec![false; n];
    let mut n_dropped = 0usize;
    for t in 0..t_len - 1 {
        let target = (n as f64 * cumulative_target(t + 1, t_len, mr)).round() as usize;
        let k = target.saturating_sub(n_dropped);
        if k == 0 {
            continue;
        }
        let mut still: Vec<usize> = (0..n).filter(|&i| !dropped[i]).collect();
        if k > still.len() {
            return Err(GcmError::InvalidParameter(format!("cannot drop {k} of {} subjects", still.len())));
        }
        // Largest y_t first; index breaks ties deterministically.
        still.sort_by(|&a, &b| {
            sim.complete_values[(b, t)].total_cmp(&sim.complete_values[(a, t)]).then(a.cmp(&b))
        });
        for &i in &still[..k] {
            dropped[i] = true;
            for s in t + 1..t_len {
                mask[i * t_len + s] = false;
            }
        }
        n_dropped += k;
    }
    let data = sim.data.remasked(mask)?;
    Ok(SimulatedDataset { data, ..sim.clone() })
}

/// MNAR deletion through an unobserved auxiliary variable.
///
/// `Aux_i = r·(b_iS − β_S) + ε_i`, `ε_i ~ N(0,1)`. Occasion `t ≥ 1` (0-based)
/// is missing when `Aux_i` exceeds the lower `1 − 2t·mr/(T−1)` quantile of its
/// marginal `N(0, r²Ψ_SS + 1)`. The auxiliary values are stored on the dataset
/// but estimators never read them.
pub fn impose_mnar<R: Rng + ?Sized>(
    sim: &SimulatedDataset,
    params: &ParameterSet,
    r: f64,
    mr: f64,
    rng: &mut R,
) -> Result<SimulatedDataset> {
    let (n, t_len) = sim.complete_values.shape();
    check_rate(mr, t_len)?;
    if !r.is_finite() {
        return Err(GcmError::InvalidParameter("r must be finite".into()));
    }
    let q = sim.true_effects.ncols();
    if q < 2 || params.beta.len() != q {
        return Err(GcmError::Dimension("MNAR deletion needs a slope effect".into()));
    }
    let slope_var = params.psi[1][1];
    let aux: Vec<f64> =
        (0..n).map(|i| r * (sim.true_effects[(i, 1)] - params.beta[1]) + std_normal(rng)).collect();
    let marginal = StatNormal::new(0.0, (r * r * slope_var + 1.0).sqrt())
        .map_err(|e| GcmError::InvalidParameter(e.to_string()))?;
    let mut mask = sim.data.mask().to_vec();
    if mr > 0.0 {
        for t in 1..t_len {
            let level = 1.0 - cumulative_target(t, t_len, mr);
            let cut = marginal.inverse_cdf(level);
            for (i, &a) in aux.iter().enumerate() {
                if a > cut {
                    mask[i * t_len + t] = false;
                }
            }
        }
    }
    let data = sim.data.remasked(mask)?.with_aux(aux)?;
    Ok(SimulatedDataset { data, ..sim.clone() })
}

/// Applies whichever mechanism `spec` names.
pub fn impose_missing<R: Rng + ?Sized>(
    sim: &SimulatedDataset,
    params: &ParameterSet,
    spec: &MissingSpec,
    rng: &mut R,
) -> Result<SimulatedDataset> {
    spec.validate()?;
    match spec.mechanism {
        Mechanism::None => Ok(sim.clone()),
        Mechanism::Mar => impose_mar(sim, spec.rate),
        Mechanism::Mnar => impose_mnar(sim, params, spec.r, spec.rate, rng),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::random::rng_from_seed;
    use nalgebra::DVector;

    fn spec() -> GrowthModelSpec {
        GrowthModelSpec::linear(4).unwrap()
    }

    #[test]
    fn noiseless_limit_is_mean_trajectory() {
        let tiny = ParameterSet::new(DVector::from_vec(vec![6.0, 2.0]), DMatrix::identity(2, 2) * 1e-12, 1e-12);
        let mut rng = rng_from_seed(7);
        let sim = gen_complete(&spec(), &tiny, &ErrorDistribution::new(ErrorKind::Normal), 1, &mut rng).unwrap();
        for (t, want) in [6.0, 8.0, 10.0, 12.0].iter().enumerate() {
            assert!((sim.complete_values[(0, t)] - want).abs() < 1e-4);
        }
        let effects = gen_random_effects(&tiny, 50, &mut rng).unwrap();
        for i in 0..50 {
            assert!((effects[(i, 0)] - 6.0).abs() < 1e-4 && (effects[(i, 1)] - 2.0).abs() < 1e-4);
        }
    }

    #[test]
    fn mar_cutoff_levels() {
        // Upper 0.80, 0.60, 0.40 quantiles for mr = 0.3, T = 4.
        let levels: Vec<f64> = (1..4).map(|t| 1.0 - cumulative_target(t, 4, 0.3)).collect();
        for (got, want) in levels.iter().zip([0.8, 0.6, 0.4]) {
            assert!((got - want).abs() < 1e-12);
        }
    }

    #[test]
    fn zero_rate_leaves_mask() {
        let mut rng = rng_from_seed(8);
        let p = ParameterSet::population();
        let sim = gen_complete(&spec(), &p, &ErrorDistribution::new(ErrorKind::Normal), 100, &mut rng).unwrap();
        assert_eq!(impose_mar(&sim, 0.0).unwrap().data.n_missing(), 0);
        assert_eq!(impose_mnar(&sim, &p, 0.8, 0.0, &mut rng).unwrap().data.n_missing(), 0);
    }

    #[test]
    fn mar_is_monotone_and_first_occasion_kept() {
        let mut rng = rng_from_seed(9);
        let p = ParameterSet::population();
        let sim = gen_complete(&spec(), &p, &ErrorDistribution::new(ErrorKind::LogNormal), 300, &mut rng).unwrap();
        let mar = impose_mar(&sim, 0.3).unwrap();
        for i in 0..300 {
            assert!(mar.data.is_observed(i, 0));
            for t in 1..4 {
                if !mar.data.is_observed(i, t) {
                    assert!((t..4).all(|s| !mar.data.is_observed(i, s)));
                }
            }
        }
        // Cumulative dropout 20% / 40% / 60%.
        let rates = mar.data.missing_rates();
        assert!((rates[1] - 0.2).abs() < 1e-9 && (rates[2] - 0.4).abs() < 1e-9 && (rates[3] - 0.6).abs() < 1e-9);
    }

    #[test]
    fn excessive_rate_rejected() {
        let mut rng = rng_from_seed(10);
        let p = ParameterSet::population();
        let sim = gen_complete(&spec(), &p, &ErrorDistribution::new(ErrorKind::Normal), 20, &mut rng).unwrap();
        assert!(impose_mar(&sim, 0.5).is_err());
        assert!(impose_mnar(&sim, &p, 0.8, 0.6, &mut rng).is_err());
    }

    #[test]
    fn masked_cells_agree_with_complete_values() {
        let mut rng = rng_from_seed(11);
        let p = ParameterSet::population();
        let sim = gen_complete(&spec(), &p, &ErrorDistribution::new(ErrorKind::StudentT5), 200, &mut rng).unwrap();
        let mnar = impose_mnar(&sim, &p, 0.8, 0.15, &mut rng).unwrap();
        for i in 0..200 {
            assert!(mnar.data.is_observed(i, 0));
            for t in 0..4 {
                if let Some(v) = mnar.data.get(i, t) {
                    assert_eq!(v, sim.complete_values[(i, t)]);
                }
            }
        }
        assert!(mnar.data.aux().is_some());
    }

    #[test]
    fn generation_is_reproducible() {
        let p = ParameterSet::population();
        let d = ErrorDistribution::new(ErrorKind::NormalWithOutliers);
        let a = gen_complete(&spec(), &p, &d, 50, &mut rng_from_seed(12)).unwrap();
        let b = gen_complete(&spec(), &p, &d, 50, &mut rng_from_seed(12)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn invalid_error_params() {
        let mut rng = rng_from_seed(13);
        let d = ErrorDistribution::new(ErrorKind::Normal);
        assert!(gen_errors(&d, 2, 2, 0.0, &mut rng).is_err());
        let bad = ErrorDistribution { outlier_rate: 1.0, ..ErrorDistribution::new(ErrorKind::NormalWithOutliers) };
        assert!(gen_errors(&bad, 2, 2, 1.0, &mut rng).is_err());
    }
}
