//! JSON report of one test run. Reals are written with 17 significant
//! digits, which round-trips every finite `f64` exactly.

use cspcr::TestReport;
use serde::{Deserialize, Deserializer, Serialize, Serializer};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PerLabel {
    #[serde(rename = "W", with = "reals")]
    pub w: Vec<f64>,
    #[serde(rename = "D", with = "reals")]
    pub d: Vec<f64>,
    #[serde(rename = "W_tilde", default, skip_serializing_if = "Option::is_none", with = "optional_reals")]
    pub w_tilde: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none", with = "optional_reals")]
    pub gamma: Option<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Spectral {
    #[serde(with = "reals")]
    pub lambdas: Vec<f64>,
    #[serde(with = "real")]
    pub clipped_mass: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportDiagnostics {
    #[serde(with = "real")]
    pub weight_mean: f64,
    #[serde(with = "real")]
    pub weight_max: f64,
    #[serde(with = "real")]
    pub ess: f64,
    pub clamp_count: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportFile {
    pub method: String,
    pub n: usize,
    #[serde(rename = "K")]
    pub k: usize,
    #[serde(rename = "L")]
    pub l: usize,
    #[serde(with = "real")]
    pub alpha: f64,
    pub seed: u64,
    #[serde(rename = "statistic_U", with = "real")]
    pub statistic: f64,
    #[serde(with = "real")]
    pub threshold: f64,
    #[serde(with = "real")]
    pub p_value: f64,
    pub reject: bool,
    pub per_label: PerLabel,
    pub spectral: Spectral,
    pub diagnostics: ReportDiagnostics,
}

impl From<&TestReport> for ReportFile {
    fn from(r: &TestReport) -> Self {
        ReportFile {
            method: r.method.as_str().to_string(),
            n: r.n,
            k: r.k,
            l: r.l,
            alpha: r.alpha,
            seed: r.seed,
            statistic: r.statistic,
            threshold: r.threshold,
            p_value: r.p_value,
            reject: r.reject,
            per_label: PerLabel {
                w: r.per_label.w.clone(),
                d: r.per_label.d.clone(),
                w_tilde: r.per_label.w_tilde.clone(),
                gamma: r.per_label.gamma_hat.clone(),
            },
            spectral: Spectral { lambdas: r.spectral.lambdas.clone(), clipped_mass: r.spectral.clipped_mass },
            diagnostics: ReportDiagnostics {
                weight_mean: r.diagnostics.weight_mean,
                weight_max: r.diagnostics.weight_max,
                ess: r.diagnostics.ess,
                clamp_count: r.diagnostics.clamp_count,
            },
        }
    }
}

impl ReportFile {
    pub fn to_json(&self) -> String {
        let mut text = serde_json::to_string_pretty(self).expect("report serializes");
        text.push('\n');
        text
    }
}

/// Non-finite values are written as `null` and read back as NaN.
pub mod real {
    use super::*;

    pub fn serialize<S: Serializer>(value: &f64, s: S) -> Result<S::Ok, S::Error> {
        if value.is_finite() {
            let raw = serde_json::value::RawValue::from_string(format!("{value:.16e}")).expect("formatted real is valid JSON");
            raw.serialize(s)
        } else {
            s.serialize_none()
        }
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<f64, D::Error> {
        Ok(Option::<f64>::deserialize(d)?.unwrap_or(f64::NAN))
    }
}

pub mod reals {
    use super::*;

    #[derive(Serialize, Deserialize)]
    struct Real(#[serde(with = "real")] f64);

    pub fn serialize<S: Serializer>(values: &[f64], s: S) -> Result<S::Ok, S::Error> {
        s.collect_seq(values.iter().map(|&v| Real(v)))
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Vec<f64>, D::Error> {
        Ok(Vec::<Real>::deserialize(d)?.into_iter().map(|r| r.0).collect())
    }
}

pub mod optional_reals {
    use super::*;

    #[derive(Serialize, Deserialize)]
    struct Reals(#[serde(with = "reals")] Vec<f64>);

    pub fn serialize<S: Serializer>(values: &Option<Vec<f64>>, s: S) -> Result<S::Ok, S::Error> {
        match values {
            Some(v) => s.serialize_some(&Reals(v.clone())),
            None => s.serialize_none(),
        }
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Option<Vec<f64>>, D::Error> {
        Ok(Option::<Reals>::deserialize(d)?.map(|r| r.0))
    }
}
