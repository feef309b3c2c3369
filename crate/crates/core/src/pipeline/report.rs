use std::collections::HashMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{
    load_series, open, read_json, Context, CALIBRATION_FILE, CONCEPTS_FILE, DETECTION_FILE, PLOT_ANNOTATIONS_FILE,
    PLOT_DATA_FILE, SCORES_FILE,
};
use crate::calibration::CalibratedThreshold;
use crate::changepoint::{ChangePointResult, DetectionReport, ScoreSeries};
use crate::error::{Error, Result};
use crate::filtering::{read_concept_table, ConceptRecord, Domain};
use crate::scoring::{read_prompt_scores, ImitationRecord};
use crate::stats::{invariance_check, isotonic_fit, ValidationCheck};

/// Largest mean score difference between comparable concepts that still
/// counts as distribution-invariant.
const INVARIANCE_TOLERANCE: f64 = 0.01;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConceptReport {
    pub record: ConceptRecord,
    pub imitation: ImitationRecord,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ThresholdReport {
    pub domain: Domain,
    pub calibration: CalibratedThreshold,
    /// Manifest order.
    pub concepts: Vec<ConceptReport>,
    pub series: ScoreSeries,
    pub change_points: ChangePointResult,
    pub threshold_frequency: Option<f64>,
    /// Non-decreasing fit of the series scores, in series order.
    pub isotonic_fit: Vec<f64>,
    pub validation: Vec<ValidationCheck>,
}

fn validation_checks(records: &[ImitationRecord], cp: &ChangePointResult, delta: f64) -> Result<Vec<ValidationCheck>> {
    let mut checks = Vec::new();
    if records.len() >= 2 {
        let inv = invariance_check(records, delta)?;
        checks.push(ValidationCheck {
            name: "invariance".into(),
            value: inv.value,
            pass_threshold: INVARIANCE_TOLERANCE,
            passed: inv.value.abs() < INVARIANCE_TOLERANCE,
            notes: if inv.empty {
                format!("no concept pair within {delta} of each other in frequency")
            } else {
                format!("{} pairs within frequency delta {delta}", inv.pairs)
            },
        });
    }
    let (value, passed, notes) = match cp.segment_means.as_slice() {
        [before, after, ..] => (
            after - before,
            after > before,
            "mean score after the first change minus mean before".to_owned(),
        ),
        _ => (0.0, false, "no change point detected".to_owned()),
    };
    checks.push(ValidationCheck {
        name: "segment_order".into(),
        value,
        pass_threshold: 0.0,
        passed,
        notes,
    });
    Ok(checks)
}

/// Builds the report from the files written by the earlier stages.
pub fn build_report(ctx: &Context) -> Result<ThresholdReport> {
    let out = |name| ctx.out(name);
    let calibration: CalibratedThreshold = read_json(&out(CALIBRATION_FILE))?;
    let records = read_concept_table(open(&out(CONCEPTS_FILE))?)?;
    let scores = read_prompt_scores(open(&out(SCORES_FILE))?)?;
    let detection: DetectionReport = read_json(&out(DETECTION_FILE))?;
    let series = load_series(ctx)?;

    let change_points = ChangePointResult::from_changes(&series, detection.change_indices.clone(), detection.penalty)?;
    if change_points.threshold_frequency != detection.threshold_frequency {
        return Err(Error::format("detection.json does not match the current score series"));
    }

    let mut by_id: HashMap<&str, &ImitationRecord> = HashMap::new();
    for s in &scores {
        by_id.insert(&s.concept_id, s);
    }
    let concepts = records
        .into_iter()
        .map(|record| {
            let imitation = by_id
                .get(record.concept_id.as_str())
                .map(|r| (*r).clone())
                .ok_or_else(|| Error::format(format!("no scores for concept `{}`", record.concept_id)))?;
            Ok(ConceptReport { record, imitation })
        })
        .collect::<Result<Vec<_>>>()?;

    Ok(ThresholdReport {
        domain: ctx.manifest.domain,
        calibration,
        isotonic_fit: isotonic_fit(&series)?,
        validation: validation_checks(&scores, &change_points, ctx.config.invariance_delta)?,
        threshold_frequency: change_points.threshold_frequency,
        concepts,
        series,
        change_points,
    })
}

/// Writes `plot_data.csv` (one row per concept in series order) and
/// `plot_annotations.csv` (one row per change point) into `dir`.
pub fn emit_plot_data(report: &ThresholdReport, dir: impl AsRef<Path>) -> Result<(PathBuf, PathBuf)> {
    let dir = dir.as_ref();
    let data_path = dir.join(PLOT_DATA_FILE);
    let ann_path = dir.join(PLOT_ANNOTATIONS_FILE);
    let variance: HashMap<&str, f64> = report
        .concepts
        .iter()
        .map(|c| (c.imitation.concept_id.as_str(), c.imitation.variance))
        .collect();

    let file = std::fs::File::create(&data_path).map_err(|e| Error::io(&data_path, e))?;
    let mut w = csv::Writer::from_writer(file);
    w.write_record([
        "index",
        "concept_id",
        "frequency",
        "mean_score",
        "variance",
        "isotonic_fit",
    ])?;
    for (i, p) in report.series.points().iter().enumerate() {
        let var = variance.get(p.concept_id.as_str()).copied().unwrap_or(0.0);
        let fit = report
            .isotonic_fit
            .get(i)
            .copied()
            .ok_or_else(|| Error::format("isotonic fit is shorter than the series"))?;
        w.write_record([
            i.to_string(),
            p.concept_id.clone(),
            p.frequency.to_string(),
            p.score.to_string(),
            var.to_string(),
            fit.to_string(),
        ])?;
    }
    w.flush().map_err(|e| Error::io(&data_path, e))?;

    let file = std::fs::File::create(&ann_path).map_err(|e| Error::io(&ann_path, e))?;
    let mut w = csv::Writer::from_writer(file);
    w.write_record(["change_index", "frequency", "mean_before", "mean_after"])?;
    let cp = &report.change_points;
    for (j, &idx) in cp.change_indices.iter().enumerate() {
        w.write_record([
            idx.to_string(),
            report.series.points()[idx].frequency.to_string(),
            cp.segment_means[j].to_string(),
            cp.segment_means[j + 1].to_string(),
        ])?;
    }
    w.flush().map_err(|e| Error::io(&ann_path, e))?;
    Ok((data_path, ann_path))
}
