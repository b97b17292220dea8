use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::loss::OverlapCounts;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SubjectMetrics {
    pub subject_id: String,
    pub dsc: f64,
    pub iou: f64,
    /// Missing when the ground truth is empty.
    pub vol_error_pct: Option<f64>,
}

impl SubjectMetrics {
    pub fn from_masks(subject_id: &str, pred: &[bool], gt: &[bool]) -> Result<Self> {
        let c = OverlapCounts::new(pred, gt)?;
        Ok(SubjectMetrics {
            subject_id: subject_id.to_string(),
            dsc: c.dsc(),
            iou: c.iou(),
            vol_error_pct: c.vol_error_pct(),
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MeanMetrics {
    pub dsc: f64,
    pub iou: f64,
    pub vol_error_pct: Option<f64>,
}

/// Per-subject and mean overlap metrics of one configuration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub configuration: String,
    pub subjects: Vec<SubjectMetrics>,
    pub mean: MeanMetrics,
}

impl EvalReport {
    pub fn new(configuration: &str, subjects: Vec<SubjectMetrics>) -> Result<Self> {
        if subjects.is_empty() {
            return Err(Error::Config("report has no subjects".into()));
        }
        let n = subjects.len() as f64;
        let vols: Vec<f64> = subjects.iter().filter_map(|s| s.vol_error_pct).collect();
        let mean = MeanMetrics {
            dsc: subjects.iter().map(|s| s.dsc).sum::<f64>() / n,
            iou: subjects.iter().map(|s| s.iou).sum::<f64>() / n,
            vol_error_pct: (!vols.is_empty()).then(|| vols.iter().sum::<f64>() / vols.len() as f64),
        };
        Ok(EvalReport {
            configuration: configuration.to_string(),
            subjects,
            mean,
        })
    }
}

pub fn write_report(report: &EvalReport, path: &Path) -> Result<()> {
    fs::write(path, serde_json::to_string_pretty(report)? + "\n")?;
    Ok(())
}

pub fn read_report(path: &Path) -> Result<EvalReport> {
    Ok(serde_json::from_str(&fs::read_to_string(path)?)?)
}
