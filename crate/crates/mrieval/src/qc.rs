//! Segmentation-reliability gating.
//!
//! Every MRI carries one QC score in [0, 1] for each of 8 configured
//! regions, emitted by the external segmenter next to its label maps. An
//! MRI fails when any score falls strictly below the threshold. The
//! threshold is calibrated on the real reference set: the largest grid value
//! at which no more than the target fraction of real MRIs fail. A model
//! whose pass rate drops below the minimum is "too unreliable" and gets no
//! anatomical plausibility assessment.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::util::quantile_sorted;

/// Region names the segmenter scores by default. Configuration, not
/// contract: any 8 names can be supplied instead.
pub const DEFAULT_QC_REGIONS: [&str; 8] = [
    "white_matter",
    "gray_matter",
    "csf",
    "cerebellum",
    "brainstem",
    "thalamus",
    "putamen_pallidum",
    "hippocampus_amygdala",
];

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct QCRecord {
    pub subject_id: String,
    pub scores: BTreeMap<String, f64>,
}

impl QCRecord {
    pub fn validate(&self, region_names: &[String]) -> Result<()> {
        for name in region_names {
            let score = self.scores.get(name).ok_or_else(|| Error::MissingQcRegion {
                subject: self.subject_id.clone(),
                region: name.clone(),
            })?;
            if !(0.0..=1.0).contains(score) {
                return Err(Error::QcScoreOutOfRange {
                    subject: self.subject_id.clone(),
                    region: name.clone(),
                    score: *score,
                });
            }
        }
        if self.scores.len() != region_names.len() {
            let extra = self
                .scores
                .keys()
                .find(|k| !region_names.contains(k))
                .cloned()
                .unwrap_or_default();
            return Err(Error::UnexpectedQcRegion {
                subject: self.subject_id.clone(),
                region: extra,
            });
        }
        Ok(())
    }

    fn min_score(&self) -> f64 {
        self.scores.values().copied().fold(f64::INFINITY, f64::min)
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GateConfig {
    pub threshold: f64,
    pub target_real_fail_fraction: f64,
    pub min_model_pass_rate: f64,
    pub region_names: Vec<String>,
}

impl Default for GateConfig {
    fn default() -> Self {
        GateConfig {
            threshold: 0.65,
            target_real_fail_fraction: 0.05,
            min_model_pass_rate: 0.95,
            region_names: DEFAULT_QC_REGIONS.iter().map(|s| s.to_string()).collect(),
        }
    }
}

impl GateConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.threshold > 0.0 && self.threshold < 1.0) {
            return Err(Error::BadFraction {
                what: "threshold",
                value: self.threshold,
            });
        }
        if !(self.target_real_fail_fraction > 0.0 && self.target_real_fail_fraction < 1.0) {
            return Err(Error::BadFraction {
                what: "target_real_fail_fraction",
                value: self.target_real_fail_fraction,
            });
        }
        if !(self.min_model_pass_rate > 0.0 && self.min_model_pass_rate <= 1.0) {
            return Err(Error::BadFraction {
                what: "min_model_pass_rate",
                value: self.min_model_pass_rate,
            });
        }
        Ok(())
    }
}

/// Gate one MRI: fails iff any score is strictly below the threshold. A
/// score exactly at the threshold passes.
pub fn gate_mri(r: &QCRecord, cfg: &GateConfig) -> Result<(bool, Vec<String>)> {
    r.validate(&cfg.region_names)?;
    let failing: Vec<String> = cfg
        .region_names
        .iter()
        .filter(|name| r.scores[*name] < cfg.threshold)
        .cloned()
        .collect();
    Ok((failing.is_empty(), failing))
}

/// Largest grid threshold `k * grid_step < 1` at which the fraction of real
/// records failing stays within `target_fail`.
pub fn calibrate_threshold(real: &[QCRecord], target_fail: f64, grid_step: f64) -> Result<f64> {
    if real.is_empty() {
        return Err(Error::EmptyRecords);
    }
    if !(target_fail > 0.0 && target_fail < 1.0) {
        return Err(Error::BadFraction {
            what: "target_fail",
            value: target_fail,
        });
    }
    if !(grid_step > 0.0 && grid_step < 1.0) {
        return Err(Error::BadFraction {
            what: "grid_step",
            value: grid_step,
        });
    }
    let mins: Vec<f64> = real.iter().map(QCRecord::min_score).collect();
    let n = real.len() as f64;
    let last = ((1.0 / grid_step).ceil() as usize).saturating_sub(1).max(1);
    for k in (1..=last).rev() {
        let t = k as f64 * grid_step;
        if t >= 1.0 {
            continue;
        }
        let failed = mins.iter().filter(|&&m| m < t).count();
        if failed as f64 / n <= target_fail {
            return Ok(t);
        }
    }
    let smallest = grid_step;
    let failed = mins.iter().filter(|&&m| m < smallest).count();
    Err(Error::CalibrationImpossible {
        failed,
        total: real.len(),
        smallest,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Verdict {
    Assessable,
    TooUnreliable,
}

impl std::fmt::Display for Verdict {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Verdict::Assessable => write!(f, "assessable"),
            Verdict::TooUnreliable => write!(f, "too-unreliable"),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ModelGateResult {
    pub total: usize,
    pub failed_mris: usize,
    /// Total failing region entries summed over MRIs.
    pub failed_roi_events: usize,
    pub pass_rate: f64,
    pub verdict: Verdict,
    pub per_region_fail_counts: BTreeMap<String, usize>,
}

/// Gate a whole record set and aggregate the accounting.
pub fn gate_model(records: &[QCRecord], cfg: &GateConfig) -> Result<ModelGateResult> {
    if records.is_empty() {
        return Err(Error::EmptyRecords);
    }
    cfg.validate()?;
    let mut failed_mris = 0usize;
    let mut failed_roi_events = 0usize;
    let mut per_region: BTreeMap<String, usize> = cfg
        .region_names
        .iter()
        .map(|r| (r.clone(), 0usize))
        .collect();
    for record in records {
        let (pass, failing) = gate_mri(record, cfg)?;
        if !pass {
            failed_mris += 1;
            failed_roi_events += failing.len();
            for region in failing {
                *per_region.get_mut(&region).expect("region from config") += 1;
            }
        }
    }
    let total = records.len();
    let pass_rate = (total - failed_mris) as f64 / total as f64;
    let verdict = if pass_rate >= cfg.min_model_pass_rate {
        Verdict::Assessable
    } else {
        Verdict::TooUnreliable
    };
    Ok(ModelGateResult {
        total,
        failed_mris,
        failed_roi_events,
        pass_rate,
        verdict,
        per_region_fail_counts: per_region,
    })
}

/// Order statistics of one region's scores across a record set.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RegionQcSummary {
    pub min: f64,
    pub q1: f64,
    pub median: f64,
    pub q3: f64,
    pub max: f64,
    pub fraction_below_threshold: f64,
}

/// Per-region five-number summaries with linear-interpolation quantiles.
pub fn qc_distribution(
    records: &[QCRecord],
    region_names: &[String],
    threshold: f64,
) -> Result<BTreeMap<String, RegionQcSummary>> {
    if records.is_empty() {
        return Err(Error::EmptyRecords);
    }
    let mut out = BTreeMap::new();
    for name in region_names {
        let mut values = Vec::with_capacity(records.len());
        for r in records {
            r.validate(region_names)?;
            values.push(r.scores[name]);
        }
        values.sort_by(f64::total_cmp);
        let below = values.iter().filter(|&&v| v < threshold).count();
        out.insert(
            name.clone(),
            RegionQcSummary {
                min: values[0],
                q1: quantile_sorted(&values, 0.25),
                median: quantile_sorted(&values, 0.5),
                q3: quantile_sorted(&values, 0.75),
                max: values[values.len() - 1],
                fraction_below_threshold: below as f64 / values.len() as f64,
            },
        );
    }
    Ok(out)
}

// ---------------------------------------------------------------------------
// QC CSV: subject_id,<region1>,...,<region8> one row per MRI
// ---------------------------------------------------------------------------

pub fn qc_records_to_csv(records: &[QCRecord], region_names: &[String]) -> Vec<u8> {
    let mut out = String::from("subject_id");
    for r in region_names {
        out.push(',');
        out.push_str(r);
    }
    out.push('\n');
    for rec in records {
        out.push_str(&rec.subject_id);
        for r in region_names {
            out.push_str(&format!(",{}", rec.scores.get(r).copied().unwrap_or(f64::NAN)));
        }
        out.push('\n');
    }
    out.into_bytes()
}

/// Parse a QC CSV; region names come from the header.
pub fn qc_records_from_csv(bytes: &[u8], path: &str) -> Result<(Vec<String>, Vec<QCRecord>)> {
    let bad = |reason: String| Error::BadFile {
        path: path.to_string(),
        reason,
    };
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .from_reader(bytes);
    let headers = reader.headers().map_err(|e| bad(e.to_string()))?.clone();
    let cols: Vec<String> = headers.iter().map(str::to_string).collect();
    if cols.len() < 2 || cols[0] != "subject_id" {
        return Err(bad("header must be subject_id,<region>,...".into()));
    }
    let regions: Vec<String> = cols[1..].to_vec();
    let mut records = Vec::new();
    for record in reader.records() {
        let record = record.map_err(|e| bad(e.to_string()))?;
        if record.len() != cols.len() {
            return Err(bad(format!(
                "row has {} fields, header has {}",
                record.len(),
                cols.len()
            )));
        }
        let mut scores = BTreeMap::new();
        for (i, region) in regions.iter().enumerate() {
            let raw = &record[i + 1];
            let score: f64 = raw
                .trim()
                .parse()
                .map_err(|_| bad(format!("bad score {raw:?}")))?;
            scores.insert(region.clone(), score);
        }
        records.push(QCRecord {
            subject_id: record[0].to_string(),
            scores,
        });
    }
    if records.is_empty() {
        return Err(bad("no rows".into()));
    }
    Ok((regions, records))
}
