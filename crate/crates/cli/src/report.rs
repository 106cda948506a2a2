//! JSON explanation reports.
//!
//! Reports are written as pretty-printed JSON with a trailing newline.
//! Floats are printed in shortest round-trip form and parsed with correct
//! rounding (`float_roundtrip`), so reading a report and writing it again
//! reproduces the same bytes.

use std::path::Path;

use cemmaf_core::pn::{AttributeChange, IterateIndex, PnOutcome, PnTerms};
use cemmaf_core::pp::{PpOutcome, PpTerms};
use cemmaf_core::metrics::pp_correlation;
use serde::{Deserialize, Serialize};

use crate::config::RunConfig;
use crate::error::{CliError, CliResult};

pub const REPORT_FORMAT: &str = "cemmaf-report";
pub const REPORT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Status {
    Found,
    NotFound,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RoundSummary {
    pub c: f64,
    pub found: bool,
    /// Objective at the last iterate of the round.
    pub final_objective: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PnFound {
    pub predicted: usize,
    pub predicted_name: String,
    pub scores: Vec<f64>,
    /// Margin of the solver's image before 8-bit quantization.
    pub margin: f64,
    pub z: Vec<f64>,
    pub latent_distance: f64,
    pub terms: PnTerms,
    pub objective: f64,
    pub c: f64,
    pub iterate: IterateIndex,
    pub attributes: Vec<AttributeChange>,
    /// Human-readable additions such as `+top_mass`.
    pub explanation: Vec<String>,
    pub violations: Vec<String>,
    pub image: String,
    /// Class of the dumped (quantized) image after reloading it.
    pub dump_predicted: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PnSection {
    pub status: Status,
    pub z_x0: Vec<f64>,
    pub c_schedule: Vec<f64>,
    pub rounds: Vec<RoundSummary>,
    pub result: Option<PnFound>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PpFound {
    pub selected: Vec<usize>,
    pub predicted: usize,
    pub predicted_name: String,
    pub scores: Vec<f64>,
    pub margin: f64,
    pub score_trace: Vec<f64>,
    pub ranking: Vec<usize>,
    pub relaxed_mask: Vec<f64>,
    /// No relaxed iterate reached the margin; ranking used the last iterate.
    pub fallback: bool,
    pub terms: Option<PpTerms>,
    pub objective: Option<f64>,
    pub c: Option<f64>,
    pub iterate: Option<IterateIndex>,
    pub image: String,
    pub mask: String,
    pub dump_predicted: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PpSection {
    pub status: Status,
    pub n_superpixels: usize,
    pub labels: String,
    pub c_schedule: Vec<f64>,
    pub rounds: Vec<RoundSummary>,
    pub result: Option<PpFound>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricValues {
    pub n_selected: usize,
    pub pp_accuracy: f64,
    pub pp_corr: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Timings {
    pub solve_seconds: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExplanationReport {
    pub format: String,
    pub version: u32,
    pub image_id: String,
    pub input: String,
    pub t0: usize,
    pub t0_name: String,
    pub class_names: Vec<String>,
    pub bundle_hash: String,
    pub config: RunConfig,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub pn: Option<PnSection>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub pp: Option<PpSection>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub metrics: Option<MetricValues>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub timings: Option<Timings>,
}

impl ExplanationReport {
    pub fn to_json(&self) -> CliResult<String> {
        let mut text = serde_json::to_string_pretty(self)
            .map_err(|e| CliError::Usage(format!("report serialization failed: {e}")))?;
        text.push('\n');
        Ok(text)
    }

    pub fn from_json(text: &str) -> Result<Self, serde_json::Error> {
        serde_json::from_str(text)
    }

    pub fn read(path: &Path) -> CliResult<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
        let report = Self::from_json(&text).map_err(|e| CliError::json(path, e))?;
        if report.format != REPORT_FORMAT || report.version != REPORT_VERSION {
            return Err(CliError::Usage(format!(
                "{}: not a {REPORT_FORMAT} v{REPORT_VERSION} file",
                path.display()
            )));
        }
        Ok(report)
    }

    pub fn write(&self, path: &Path) -> CliResult<()> {
        std::fs::write(path, self.to_json()?).map_err(|e| CliError::io(path, e))
    }
}

pub fn pn_rounds(outcome: &PnOutcome) -> Vec<RoundSummary> {
    outcome
        .log()
        .rounds
        .iter()
        .map(|r| RoundSummary {
            c: r.c,
            found: r.found,
            final_objective: r.objective.last().copied(),
        })
        .collect()
}

pub fn pp_rounds(outcome: &PpOutcome) -> Vec<RoundSummary> {
    let rounds = match outcome {
        PpOutcome::Found(r) => &r.rounds,
        PpOutcome::NotFound { rounds, .. } => rounds,
    };
    rounds
        .iter()
        .map(|r| RoundSummary {
            c: r.c,
            found: r.found,
            final_objective: r.objective.last().copied(),
        })
        .collect()
}

pub fn pp_metrics(found: Option<&PpFound>, t0: usize) -> Option<MetricValues> {
    found.map(|r| MetricValues {
        n_selected: r.selected.len(),
        pp_accuracy: if r.predicted == t0 { 100.0 } else { 0.0 },
        pp_corr: pp_correlation(&r.score_trace),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn sample(score: f64, with_pp: bool) -> ExplanationReport {
        ExplanationReport {
            format: REPORT_FORMAT.into(),
            version: REPORT_VERSION,
            image_id: "img_00".into(),
            input: "images/img_00.pgm".into(),
            t0: 1,
            t0_name: "b".into(),
            class_names: vec!["a".into(), "b".into()],
            bundle_hash: "00ff".into(),
            config: RunConfig::default(),
            pn: Some(PnSection {
                status: Status::NotFound,
                z_x0: vec![0.1, -2.5e-7],
                c_schedule: vec![1.0, 10.0],
                rounds: vec![RoundSummary {
                    c: 1.0,
                    found: false,
                    final_objective: Some(score),
                }],
                result: None,
            }),
            pp: with_pp.then(|| PpSection {
                status: Status::Found,
                n_superpixels: 4,
                labels: "img_00.labels.pgm".into(),
                c_schedule: vec![1.0],
                rounds: vec![],
                result: Some(PpFound {
                    selected: vec![2],
                    predicted: 1,
                    predicted_name: "b".into(),
                    scores: vec![score, 1.0 / 3.0],
                    margin: 0.5,
                    score_trace: vec![score],
                    ranking: vec![2, 0, 1, 3],
                    relaxed_mask: vec![0.0, 0.0, 1.0, 0.0],
                    fallback: false,
                    terms: None,
                    objective: None,
                    c: None,
                    iterate: None,
                    image: "img_00.pp.pgm".into(),
                    mask: "img_00.pp.mask.pgm".into(),
                    dump_predicted: 1,
                }),
            }),
            metrics: None,
            timings: None,
        }
    }

    #[test]
    fn round_trip_is_byte_identical() {
        // The last two values are mis-rounded by a non-exact float parser.
        for score in [0.1 + 0.2, -1.4363551766038039, 27.004758248417254] {
            let first = sample(score, true).to_json().unwrap();
            let again = ExplanationReport::from_json(&first).unwrap().to_json().unwrap();
            assert_eq!(first, again);
        }
    }

    #[test]
    fn unknown_fields_rejected() {
        let mut v: serde_json::Value = serde_json::from_str(&sample(1.0, false).to_json().unwrap()).unwrap();
        v["extra"] = serde_json::json!(1);
        assert!(ExplanationReport::from_json(&v.to_string()).is_err());
    }

    proptest! {
        #[test]
        fn round_trip_any_score(score in -1e300f64..1e300, with_pp: bool) {
            let report = sample(score, with_pp);
            let text = report.to_json().unwrap();
            let back = ExplanationReport::from_json(&text).unwrap();
            prop_assert_eq!(&back, &report);
            prop_assert_eq!(back.to_json().unwrap(), text);
        }
    }
}
