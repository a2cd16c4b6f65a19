//! Anatomical plausibility: regional volumes from label maps, residualized
//! against total intracranial volume, compared region by region with
//! Cohen's d.
//!
//! The ICV regression is fit on the real reference set only (configurable),
//! then applied to both sets, so low-quality synthetic anatomy cannot
//! distort the brain-size model. The sign convention is synthetic minus
//! real.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::util::{mean, pairwise_sum, sample_variance};
use crate::volume::LabelMap;

/// Per-subject regional volumes in mm^3.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RegionVolumes {
    pub subject_id: String,
    pub volumes_mm3: BTreeMap<String, f64>,
    pub icv_mm3: f64,
}

/// A nonzero code found in the data but absent from the region table.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct UnknownCode {
    pub code: u32,
    pub voxels: u64,
}

/// Count voxels per merged ROI. Unknown nonzero codes still count into the
/// ICV but are returned as warnings. Codes flagged `noicv` in the table are
/// excluded from the ICV.
pub fn region_volumes(
    m: &LabelMap,
    subject_id: &str,
) -> Result<(RegionVolumes, Vec<UnknownCode>)> {
    if m.table.is_empty() {
        return Err(Error::MissingRegionTable);
    }
    let mut code_counts: BTreeMap<u32, u64> = BTreeMap::new();
    for &code in &m.data {
        if code != 0 {
            *code_counts.entry(code).or_insert(0) += 1;
        }
    }
    if code_counts.is_empty() {
        return Err(Error::EmptyLabelMap);
    }
    let voxel = m.voxel_volume_mm3();
    let mut volumes: BTreeMap<String, f64> = m
        .table
        .merge_keys()
        .into_iter()
        .map(|k| (k, 0.0))
        .collect();
    let mut icv_voxels: u64 = 0;
    let mut unknown = Vec::new();
    for (&code, &count) in &code_counts {
        match m.table.lookup(code) {
            Some(entry) => {
                *volumes.get_mut(&entry.merge_key).expect("key from table") +=
                    count as f64 * voxel;
                if entry.in_icv {
                    icv_voxels += count;
                }
            }
            None => {
                icv_voxels += count;
                unknown.push(UnknownCode {
                    code,
                    voxels: count,
                });
            }
        }
    }
    Ok((
        RegionVolumes {
            subject_id: subject_id.to_string(),
            volumes_mm3: volumes,
            icv_mm3: icv_voxels as f64 * voxel,
        },
        unknown,
    ))
}

/// Per-region ordinary least squares of volume on ICV.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct IcvFit {
    /// merge_key -> (intercept, slope)
    pub coefficients: BTreeMap<String, (f64, f64)>,
    pub fitted_on: String,
    pub n: usize,
}

pub fn fit_icv(reference: &[RegionVolumes], fitted_on: &str) -> Result<IcvFit> {
    if reference.len() < 3 {
        return Err(Error::TooFewSubjects {
            n: reference.len(),
            min: 3,
        });
    }
    let icv: Vec<f64> = reference.iter().map(|r| r.icv_mm3).collect();
    let icv_mean = mean(&icv);
    let sxx = pairwise_sum(
        &icv.iter()
            .map(|&x| (x - icv_mean) * (x - icv_mean))
            .collect::<Vec<_>>(),
    );
    if sxx == 0.0 {
        return Err(Error::DegenerateIcv);
    }
    let keys: Vec<&String> = reference[0].volumes_mm3.keys().collect();
    let mut coefficients = BTreeMap::new();
    for key in keys {
        let vols: Vec<f64> = reference
            .iter()
            .map(|r| {
                r.volumes_mm3
                    .get(key)
                    .copied()
                    .ok_or_else(|| Error::RegionMissingFromFit(key.clone()))
            })
            .collect::<Result<_>>()?;
        let vol_mean = mean(&vols);
        let sxy = pairwise_sum(
            &icv.iter()
                .zip(&vols)
                .map(|(&x, &v)| (x - icv_mean) * (v - vol_mean))
                .collect::<Vec<_>>(),
        );
        let slope = sxy / sxx;
        let intercept = vol_mean - slope * icv_mean;
        coefficients.insert(key.clone(), (intercept, slope));
    }
    Ok(IcvFit {
        coefficients,
        fitted_on: fitted_on.to_string(),
        n: reference.len(),
    })
}

/// Regional volumes with the ICV trend removed.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ResidualizedVolumes {
    pub subject_id: String,
    pub residuals: BTreeMap<String, f64>,
    pub fit_tag: String,
}

pub fn residualize(v: &RegionVolumes, fit: &IcvFit) -> Result<ResidualizedVolumes> {
    let mut residuals = BTreeMap::new();
    for (key, &vol) in &v.volumes_mm3 {
        let &(intercept, slope) = fit
            .coefficients
            .get(key)
            .ok_or_else(|| Error::RegionMissingFromFit(key.clone()))?;
        residuals.insert(key.clone(), vol - (intercept + slope * v.icv_mm3));
    }
    Ok(ResidualizedVolumes {
        subject_id: v.subject_id.clone(),
        residuals,
        fit_tag: fit.fitted_on.clone(),
    })
}

/// Cohen's d with the pooled standard deviation; the first sample minus the
/// second. Zero pooled SD returns 0 for equal means and errors otherwise.
pub fn cohens_d(x: &[f64], y: &[f64]) -> Result<f64> {
    if x.len() < 2 {
        return Err(Error::TooFewValues { n: x.len() });
    }
    if y.len() < 2 {
        return Err(Error::TooFewValues { n: y.len() });
    }
    let (nx, ny) = (x.len() as f64, y.len() as f64);
    let (mx, my) = (mean(x), mean(y));
    let (vx, vy) = (sample_variance(x), sample_variance(y));
    let pooled = (((nx - 1.0) * vx + (ny - 1.0) * vy) / (nx + ny - 2.0)).sqrt();
    if pooled == 0.0 {
        if mx == my {
            return Ok(0.0);
        }
        return Err(Error::InfiniteEffect);
    }
    Ok((mx - my) / pooled)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EffectSizeRow {
    pub d: f64,
    pub n_real: usize,
    pub n_synth: usize,
    pub flagged: bool,
}

/// Per-region Cohen's d (synthetic minus real) over residualized volumes.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EffectSizeTable {
    pub rows: BTreeMap<String, EffectSizeRow>,
    pub flag_threshold: f64,
    pub fit_tag: String,
}

impl EffectSizeTable {
    pub fn flagged_regions(&self) -> Vec<&String> {
        self.rows
            .iter()
            .filter(|(_, row)| row.flagged)
            .map(|(k, _)| k)
            .collect()
    }
}

pub const DEFAULT_FLAG_THRESHOLD: f64 = 0.8;

pub fn plausibility_table(
    real: &[ResidualizedVolumes],
    synth: &[ResidualizedVolumes],
    flag_threshold: f64,
) -> Result<EffectSizeTable> {
    if real.is_empty() || synth.is_empty() {
        return Err(Error::EmptyRecords);
    }
    let keys: Vec<String> = real[0]
        .residuals
        .keys()
        .filter(|k| synth[0].residuals.contains_key(*k))
        .cloned()
        .collect();
    if keys.is_empty() {
        return Err(Error::NoSharedRegions);
    }
    let collect = |set: &[ResidualizedVolumes], key: &str| -> Result<Vec<f64>> {
        set.iter()
            .map(|s| {
                s.residuals
                    .get(key)
                    .copied()
                    .ok_or_else(|| Error::RegionMissingFromFit(key.to_string()))
            })
            .collect()
    };
    let mut rows = BTreeMap::new();
    for key in &keys {
        let synth_vals = collect(synth, key)?;
        let real_vals = collect(real, key)?;
        let d = cohens_d(&synth_vals, &real_vals)?;
        rows.insert(
            key.clone(),
            EffectSizeRow {
                d,
                n_real: real_vals.len(),
                n_synth: synth_vals.len(),
                flagged: d.abs() > flag_threshold,
            },
        );
    }
    Ok(EffectSizeTable {
        rows,
        flag_threshold,
        fit_tag: real[0].fit_tag.clone(),
    })
}

/// How often each model achieves the smallest |d| per region. `strict`
/// counts only sole winners; `with_ties` credits every tied model.
#[derive(Debug, Clone, Serialize)]
pub struct RankSummary {
    pub strict: BTreeMap<String, usize>,
    pub with_ties: BTreeMap<String, usize>,
    pub regions: usize,
}

pub fn best_region_counts(tables: &[(String, &EffectSizeTable)]) -> Result<RankSummary> {
    if tables.is_empty() {
        return Err(Error::EmptyRecords);
    }
    let keys: Vec<&String> = tables[0]
        .1
        .rows
        .keys()
        .filter(|k| tables.iter().all(|(_, t)| t.rows.contains_key(*k)))
        .collect();
    if keys.is_empty() {
        return Err(Error::NoSharedRegions);
    }
    let mut strict: BTreeMap<String, usize> =
        tables.iter().map(|(name, _)| (name.clone(), 0)).collect();
    let mut with_ties = strict.clone();
    for key in &keys {
        let best = tables
            .iter()
            .map(|(_, t)| t.rows[*key].d.abs())
            .fold(f64::INFINITY, f64::min);
        let winners: Vec<&String> = tables
            .iter()
            .filter(|(_, t)| t.rows[*key].d.abs() == best)
            .map(|(name, _)| name)
            .collect();
        for w in &winners {
            *with_ties.get_mut(*w).expect("initialized above") += 1;
        }
        if winners.len() == 1 {
            *strict.get_mut(winners[0]).expect("initialized above") += 1;
        }
    }
    Ok(RankSummary {
        strict,
        with_ties,
        regions: keys.len(),
    })
}

// ---------------------------------------------------------------------------
// RegionVolumes CSV: subject_id,icv_mm3,<merge_key>... one row per MRI
// ---------------------------------------------------------------------------

pub fn region_volumes_to_csv(subjects: &[RegionVolumes]) -> Result<Vec<u8>> {
    if subjects.is_empty() {
        return Err(Error::EmptyRecords);
    }
    let keys: Vec<&String> = subjects[0].volumes_mm3.keys().collect();
    let mut out = String::from("subject_id,icv_mm3");
    for k in &keys {
        out.push(',');
        out.push_str(k);
    }
    out.push('\n');
    for s in subjects {
        out.push_str(&s.subject_id);
        out.push_str(&format!(",{}", s.icv_mm3));
        for k in &keys {
            let v = s
                .volumes_mm3
                .get(*k)
                .ok_or_else(|| Error::RegionMissingFromFit((*k).clone()))?;
            out.push_str(&format!(",{v}"));
        }
        out.push('\n');
    }
    Ok(out.into_bytes())
}

pub fn region_volumes_from_csv(bytes: &[u8], path: &str) -> Result<Vec<RegionVolumes>> {
    let bad = |reason: String| Error::BadFile {
        path: path.to_string(),
        reason,
    };
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .from_reader(bytes);
    let headers = reader.headers().map_err(|e| bad(e.to_string()))?.clone();
    let cols: Vec<String> = headers.iter().map(str::to_string).collect();
    if cols.len() < 3 || cols[0] != "subject_id" || cols[1] != "icv_mm3" {
        return Err(bad(
            "header must start with subject_id,icv_mm3 and name at least one region".into(),
        ));
    }
    let mut out = Vec::new();
    for record in reader.records() {
        let record = record.map_err(|e| bad(e.to_string()))?;
        if record.len() != cols.len() {
            return Err(bad(format!(
                "row has {} fields, header has {}",
                record.len(),
                cols.len()
            )));
        }
        let parse = |s: &str| -> Result<f64> {
            s.trim()
                .parse::<f64>()
                .map_err(|_| bad(format!("bad float {s:?}")))
        };
        let mut volumes = BTreeMap::new();
        for (i, key) in cols.iter().enumerate().skip(2) {
            volumes.insert(key.clone(), parse(&record[i])?);
        }
        out.push(RegionVolumes {
            subject_id: record[0].to_string(),
            icv_mm3: parse(&record[1])?,
            volumes_mm3: volumes,
        });
    }
    if out.is_empty() {
        return Err(bad("no rows".into()));
    }
    Ok(out)
}
