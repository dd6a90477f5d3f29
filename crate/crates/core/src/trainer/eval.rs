//! Dataset evaluation with per-frame and aggregate reports.

use std::path::Path;

use serde::{Deserialize, Serialize};

use super::model::DepthModel;
use crate::data::{write_atomic, SampleTriplet};
use crate::error::{Error, Result};
use crate::maps::DepthMap;
use crate::metrics::{evaluate_frame, MetricOptions, MetricReport};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FrameMetrics {
    pub frame: String,
    #[serde(flatten)]
    pub report: MetricReport,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub mean: MetricReport,
    pub frames: Vec<FrameMetrics>,
}

impl EvalReport {
    pub fn to_csv(&self) -> String {
        let mut s = String::from(MetricReport::CSV_HEADER);
        s.push('\n');
        for f in &self.frames {
            s.push_str(&f.report.csv_row(&f.frame));
            s.push('\n');
        }
        s.push_str(&self.mean.csv_row("mean"));
        s.push('\n');
        s
    }

    pub fn write_json(&self, path: &Path) -> Result<()> {
        write_atomic(path, serde_json::to_string_pretty(self)?.as_bytes())
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        write_atomic(path, self.to_csv().as_bytes())
    }
}

/// Metrics of named `(prediction, ground truth)` pairs.
pub fn evaluate_maps(pairs: &[(String, DepthMap, DepthMap)], opts: &MetricOptions) -> Result<EvalReport> {
    let frames = pairs
        .iter()
        .map(|(name, pred, gt)| {
            Ok(FrameMetrics { frame: name.clone(), report: evaluate_frame(pred, gt, opts)? })
        })
        .collect::<Result<Vec<_>>>()?;
    let reports: Vec<MetricReport> = frames.iter().map(|f| f.report).collect();
    Ok(EvalReport { mean: MetricReport::mean(&reports)?, frames })
}

/// Predict every frame carrying ground truth and score it.
pub fn evaluate(model: &DepthModel, data: &[SampleTriplet], opts: &MetricOptions) -> Result<EvalReport> {
    let mut pairs = Vec::new();
    for t in data {
        let Some(gt) = &t.gt_depth else { continue };
        pairs.push((t.name.clone(), model.predict(&t.target)?, gt.clone()));
    }
    if pairs.is_empty() {
        return Err(Error::Config("no frame in the dataset has ground-truth depth".into()));
    }
    evaluate_maps(&pairs, opts)
}
