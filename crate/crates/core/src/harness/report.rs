//! Run reports: a JSON summary plus a per-step CSV.
//!
//! Floats are written with Rust's shortest round-trip formatting, so parsing a
//! report back reproduces every value bit for bit.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::config::RunConfig;
use crate::error::{LabError, Result};
use crate::synth_world::AttributeAccuracy;

pub const SCHEMA_VERSION: &str = "uedpo-run-v1";
/// Crate name and version followed by the report schema it writes.
pub const CODE_VERSION: &str = concat!(
    env!("CARGO_PKG_NAME"),
    "/",
    env!("CARGO_PKG_VERSION"),
    "+uedpo-run-v1"
);

pub const REPORT_FILE: &str = "report.json";
pub const STEPS_FILE: &str = "steps.csv";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StepRecord {
    pub step: usize,
    pub epoch: usize,
    pub lr: f64,
    /// Batch means of the pair loss and of the weighted margin.
    pub loss: f64,
    pub margin: f64,
    /// Token means of the factors over the batch.
    pub mean_lam_w: f64,
    pub mean_lam_l: f64,
    /// Tokens picked by the masks (reported for every method).
    pub selected_w: usize,
    pub selected_l: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalRecord {
    pub hallucination_rate: f64,
    pub regular_accuracy: f64,
    pub underrep_accuracy: f64,
    pub counts: AttributeAccuracy,
}

impl EvalRecord {
    pub fn from_accuracy(acc: AttributeAccuracy) -> Self {
        Self {
            hallucination_rate: acc.hallucination_rate(),
            regular_accuracy: acc.regular(),
            underrep_accuracy: acc.underrep(),
            counts: acc,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EpochRecord {
    pub epoch: usize,
    pub mean_loss: f64,
    pub eval: EvalRecord,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ReferenceRecord {
    pub pretrain_steps: usize,
    pub eval: EvalRecord,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunSummary {
    pub steps: usize,
    pub num_pairs: usize,
    pub final_loss: f64,
    pub hallucination_rate: f64,
    pub regular_accuracy: f64,
    pub underrep_accuracy: f64,
    /// Improvements over the reference policy (positive is better).
    pub hallucination_drop: f64,
    pub underrep_gain: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunReport {
    pub schema_version: String,
    pub code_version: String,
    pub config: RunConfig,
    pub reference: ReferenceRecord,
    pub epochs: Vec<EpochRecord>,
    pub summary: RunSummary,
    /// Kept out of the JSON file; written to the step CSV instead.
    #[serde(skip)]
    pub steps: Vec<StepRecord>,
}

const STEP_HEADER: &str = "step,epoch,lr,loss,margin,mean_lam_w,mean_lam_l,selected_w,selected_l";

impl RunReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    pub fn steps_csv(&self) -> String {
        let mut out = String::with_capacity(64 * (self.steps.len() + 1));
        out.push_str(STEP_HEADER);
        out.push('\n');
        for s in &self.steps {
            // `{:?}` keeps a trailing `.0` so every float column parses as a float
            writeln!(
                out,
                "{},{},{:?},{:?},{:?},{:?},{:?},{},{}",
                s.step,
                s.epoch,
                s.lr,
                s.loss,
                s.margin,
                s.mean_lam_w,
                s.mean_lam_l,
                s.selected_w,
                s.selected_l
            )
            .expect("writing to a string");
        }
        out
    }
}

fn parse_steps(text: &str, path: &Path) -> Result<Vec<StepRecord>> {
    let bad = |line: usize, detail: String| LabError::Format {
        what: format!("{} line {line}", path.display()),
        detail,
    };
    let mut lines = text.lines();
    if lines.next() != Some(STEP_HEADER) {
        return Err(bad(1, "unexpected header".into()));
    }
    lines
        .enumerate()
        .map(|(i, line)| {
            let f: Vec<&str> = line.split(',').collect();
            if f.len() != 9 {
                return Err(bad(i + 2, format!("{} fields, expected 9", f.len())));
            }
            let int = |s: &str| s.parse::<usize>().map_err(|e| bad(i + 2, e.to_string()));
            let float = |s: &str| s.parse::<f64>().map_err(|e| bad(i + 2, e.to_string()));
            Ok(StepRecord {
                step: int(f[0])?,
                epoch: int(f[1])?,
                lr: float(f[2])?,
                loss: float(f[3])?,
                margin: float(f[4])?,
                mean_lam_w: float(f[5])?,
                mean_lam_l: float(f[6])?,
                selected_w: int(f[7])?,
                selected_l: int(f[8])?,
            })
        })
        .collect()
}

fn write_file(path: PathBuf, contents: &str) -> Result<()> {
    std::fs::write(&path, contents).map_err(|e| LabError::io(path, e))
}

/// Writes `report.json` and `steps.csv` into `dir`, creating it if needed.
pub fn emit_report(report: &RunReport, dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| LabError::io(dir, e))?;
    write_file(dir.join(REPORT_FILE), &report.to_json())?;
    write_file(dir.join(STEPS_FILE), &report.steps_csv())
}

/// Reads a report written by [`emit_report`].
pub fn read_report(dir: &Path) -> Result<RunReport> {
    let json_path = dir.join(REPORT_FILE);
    let text = std::fs::read_to_string(&json_path).map_err(|e| LabError::io(&json_path, e))?;
    let mut report: RunReport = serde_json::from_str(&text).map_err(|e| LabError::Format {
        what: json_path.display().to_string(),
        detail: e.to_string(),
    })?;
    if report.schema_version != SCHEMA_VERSION {
        return Err(LabError::Format {
            what: json_path.display().to_string(),
            detail: format!(
                "schema {} is not the supported {SCHEMA_VERSION}",
                report.schema_version
            ),
        });
    }
    let csv_path = dir.join(STEPS_FILE);
    let csv = std::fs::read_to_string(&csv_path).map_err(|e| LabError::io(&csv_path, e))?;
    report.steps = parse_steps(&csv, &csv_path)?;
    if report.steps.len() != report.summary.steps {
        return Err(LabError::Format {
            what: csv_path.display().to_string(),
            detail: format!(
                "{} step rows but the summary records {} steps",
                report.steps.len(),
                report.summary.steps
            ),
        });
    }
    Ok(report)
}
