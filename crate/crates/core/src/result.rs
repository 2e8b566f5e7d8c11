//! Serializable test results shared by the three families.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Family {
    Pca,
    Fobi,
    Sir,
}

/// How the p-value was obtained.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Mode {
    #[serde(rename = "asymptotic")]
    Asymptotic,
    #[serde(rename = "boot_I")]
    BootI,
    #[serde(rename = "boot_II")]
    BootII,
    #[serde(rename = "boot")]
    Boot,
}

/// Reference law the p-value was read from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "law", rename_all = "snake_case")]
pub enum ReferenceLaw {
    /// `scaled_statistic ~ chi2_df`.
    ChiSquared { df: usize, scaled_statistic: f64 },
    /// `scaled_statistic ~ a chi2_{df_a} + b chi2_1`.
    Mixture {
        a: f64,
        df_a: usize,
        b: f64,
        scaled_statistic: f64,
    },
    /// Bootstrap null distribution of the raw statistic.
    Bootstrap { exceedances: usize, variance: f64 },
    /// No variation left to test; the p-value is 1 by definition.
    Degenerate,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TestResult {
    pub family: Family,
    pub k: usize,
    /// Raw statistic (`T_k`, or `L_k` for the log-ratio PCA test).
    pub statistic: f64,
    pub p_value: f64,
    pub mode: Mode,
    pub df_or_mixture: ReferenceLaw,
    /// Scatter pair or scatter functional used.
    pub scatter: String,
    pub n: usize,
    pub p: usize,
    #[serde(rename = "H", default, skip_serializing_if = "Option::is_none")]
    pub h: Option<usize>,
    #[serde(rename = "M", default, skip_serializing_if = "Option::is_none")]
    pub m: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub d_hat: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sigma1_hat: Option<f64>,
    pub warnings: Vec<String>,
    /// Fixed conventions and modelling assumptions behind the result.
    #[serde(default)]
    pub notes: Vec<String>,
}

impl TestResult {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("test results always serialize")
    }

    pub fn from_json(s: &str) -> Result<TestResult> {
        serde_json::from_str(s).map_err(|e| Error::InvalidInput(format!("bad result JSON: {e}")))
    }
}

pub(crate) const NOTE_DIVISOR: &str = "covariance-type matrices use the 1/n divisor";
