use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::GcmError;
use crate::model::ParameterSet;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Method {
    Fiml,
    Tsre,
    Rmb,
    RmbSelection,
}

impl Method {
    pub fn as_str(&self) -> &'static str {
        match self {
            Method::Fiml => "fiml",
            Method::Tsre => "tsre",
            Method::Rmb => "rmb",
            Method::RmbSelection => "rmb-selection",
        }
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Method {
    type Err = GcmError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim().to_ascii_lowercase().as_str() {
            "fiml" => Ok(Method::Fiml),
            "tsre" => Ok(Method::Tsre),
            "rmb" => Ok(Method::Rmb),
            "rmb-selection" => Ok(Method::RmbSelection),
            other => Err(GcmError::InvalidParameter(format!("unknown method {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Uncertainty {
    StdError(f64),
    /// 95% equal-tailed credible interval.
    Interval { lower: f64, upper: f64 },
    Unavailable,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamUncertainty {
    pub name: String,
    pub estimate: f64,
    pub uncertainty: Uncertainty,
}

/// Posterior summary for one monitored or reported quantity.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamSummary {
    pub name: String,
    pub median: f64,
    pub mean: f64,
    pub sd: f64,
    pub q025: f64,
    pub q975: f64,
    /// `None` when the diagnostic could not be computed (e.g. constant chain).
    pub geweke_z: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitResult {
    pub method: Method,
    pub parameter_names: Vec<String>,
    pub estimates: ParameterSet,
    pub uncertainty: Vec<ParamUncertainty>,
    /// A `false` here still comes with estimates; they are only flagged.
    pub converged: bool,
    pub diagnostics: BTreeMap<String, f64>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub posterior: Option<Vec<ParamSummary>>,
    /// TSRE per-subject case weights.
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub weights: Option<Vec<f64>>,
}

impl FitResult {
    pub fn flat_estimates(&self) -> Vec<f64> {
        self.estimates.to_flat()
    }
}
