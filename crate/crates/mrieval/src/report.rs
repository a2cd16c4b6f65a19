//! Protocol orchestration and report emission.
//!
//! `run_protocol` executes the stages in order: geometry validation (the
//! real set must be pristine, synthetic files are skipped with a warning),
//! classic metrics, QC threshold calibration, model gating, and, only for
//! assessable models, anatomical plausibility. The report type couples the
//! effect-size table to the assessable verdict, so a too-unreliable model
//! can never carry plausibility numbers.
//!
//! JSON is the canonical lossless form; the same report re-emits
//! byte-identically. CSV and markdown are renderings of the JSON content.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::anatomy::{
    fit_icv, plausibility_table, region_volumes, region_volumes_from_csv, residualize,
    EffectSizeTable, RegionVolumes,
};
use crate::config::EvalConfig;
use crate::embed::{fit_gaussian, toy_embedder, EmbeddingSet};
use crate::error::{Error, Result};
use crate::frechet::frechet_distance;
use crate::mmd::{image_space_mmd, mmd2_unbiased};
use crate::nifti::{parse_nifti, Parsed};
use crate::qc::{
    calibrate_threshold, gate_model, gate_mri, qc_distribution, qc_records_from_csv, GateConfig,
    ModelGateResult, QCRecord, RegionQcSummary, Verdict,
};
use crate::regions::RegionTable;
use crate::ssim::pairwise_ms_ssim;
use crate::volume::{validate_geometry, ExpectedGeometry, LabelMap, Volume};

pub const TOOLKIT_VERSION: &str = env!("CARGO_PKG_VERSION");

// ---------------------------------------------------------------------------
// report types
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct SkippedFile {
    pub file: String,
    pub reason: String,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Provenance {
    pub config_sha256: String,
    pub toolkit_version: String,
    pub seeds: BTreeMap<String, u64>,
    pub real_files: Vec<String>,
    pub synth_files: Vec<String>,
    pub skipped_synth_files: Vec<SkippedFile>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GateSection {
    pub threshold: f64,
    /// Whether the threshold was calibrated on the real records (as opposed
    /// to fixed in the config).
    pub calibrated: bool,
    pub target_real_fail_fraction: f64,
    pub min_model_pass_rate: f64,
    pub real_fail_fraction: f64,
    pub result: ModelGateResult,
    pub synth_qc_distribution: BTreeMap<String, RegionQcSummary>,
}

/// Effect sizes exist exactly when the verdict is assessable.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "verdict", rename_all = "kebab-case")]
pub enum Assessment {
    Assessable { effect_sizes: EffectSizeTable },
    TooUnreliable {},
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EvaluationReport {
    pub model_name: String,
    pub classic: BTreeMap<String, f64>,
    pub gate: GateSection,
    pub assessment: Assessment,
    pub warnings: Vec<String>,
    pub provenance: Provenance,
}

impl EvaluationReport {
    /// The only way to build a report; rejects any pairing of verdict and
    /// effect sizes the protocol forbids.
    pub fn assemble(
        model_name: String,
        classic: BTreeMap<String, f64>,
        gate: GateSection,
        effect_sizes: Option<EffectSizeTable>,
        warnings: Vec<String>,
        provenance: Provenance,
    ) -> Result<Self> {
        let assessment = match (gate.result.verdict, effect_sizes) {
            (Verdict::Assessable, Some(table)) => Assessment::Assessable {
                effect_sizes: table,
            },
            (Verdict::TooUnreliable, None) => Assessment::TooUnreliable {},
            (Verdict::Assessable, None) => {
                return Err(Error::Report(
                    "assessable model is missing its effect-size table".into(),
                ))
            }
            (Verdict::TooUnreliable, Some(_)) => {
                return Err(Error::Report(
                    "a too-unreliable model cannot carry an effect-size table".into(),
                ))
            }
        };
        Ok(EvaluationReport {
            model_name,
            classic,
            gate,
            assessment,
            warnings,
            provenance,
        })
    }

    pub fn effect_sizes(&self) -> Option<&EffectSizeTable> {
        match &self.assessment {
            Assessment::Assessable { effect_sizes } => Some(effect_sizes),
            Assessment::TooUnreliable {} => None,
        }
    }

    pub fn verdict(&self) -> Verdict {
        self.gate.result.verdict
    }
}

// ---------------------------------------------------------------------------
// protocol stages
// ---------------------------------------------------------------------------

fn file_stem(path: &Path) -> String {
    let name = path.file_name().unwrap_or_default().to_string_lossy();
    name.trim_end_matches(".gz")
        .trim_end_matches(".nii")
        .to_string()
}

/// All `.nii` / `.nii.gz` files in a directory, sorted by name.
pub fn list_nifti_files(dir: &Path) -> Result<Vec<PathBuf>> {
    let entries =
        std::fs::read_dir(dir).map_err(|e| Error::io(dir.display().to_string(), e))?;
    let mut files = Vec::new();
    for entry in entries {
        let entry = entry.map_err(|e| Error::io(dir.display().to_string(), e))?;
        let path = entry.path();
        let name = path.file_name().unwrap_or_default().to_string_lossy().to_string();
        if name.ends_with(".nii") || name.ends_with(".nii.gz") {
            files.push(path);
        }
    }
    files.sort();
    if files.is_empty() {
        return Err(Error::EmptyDirectory(dir.display().to_string()));
    }
    Ok(files)
}

pub struct LoadedSet {
    pub names: Vec<String>,
    pub volumes: Vec<Volume>,
    pub skipped: Vec<SkippedFile>,
}

fn issues_summary(report: &crate::volume::GeometryReport) -> String {
    report
        .issues
        .iter()
        .map(|i| format!("{} expected {} observed {}", i.field, i.expected, i.observed))
        .collect::<Vec<_>>()
        .join("; ")
}

/// Load a directory of volumes. `strict` aborts on the first nonconforming
/// file (the real reference set must be pristine); otherwise files are
/// skipped and recorded.
pub fn load_volume_set(dir: &Path, expected: &ExpectedGeometry, strict: bool) -> Result<LoadedSet> {
    let files = list_nifti_files(dir)?;
    let mut set = LoadedSet {
        names: Vec::new(),
        volumes: Vec::new(),
        skipped: Vec::new(),
    };
    for path in files {
        let display = path.display().to_string();
        let name = path.file_name().unwrap_or_default().to_string_lossy().to_string();
        let outcome: Result<Volume> = (|| {
            let bytes = std::fs::read(&path).map_err(|e| Error::io(display.clone(), e))?;
            match parse_nifti(&bytes)? {
                Parsed::Volume(v) => Ok(v),
                Parsed::Labels(_) => Err(Error::BadFile {
                    path: display.clone(),
                    reason: "integer-typed stream; expected an intensity volume".into(),
                }),
            }
        })();
        let volume = match outcome {
            Ok(v) => v,
            Err(e) if strict => return Err(e),
            Err(e) => {
                set.skipped.push(SkippedFile {
                    file: name,
                    reason: e.to_string(),
                });
                continue;
            }
        };
        let geometry = validate_geometry(&volume, expected);
        if !geometry.conforms {
            let issues = issues_summary(&geometry);
            if strict {
                return Err(Error::NonconformingReal {
                    path: display,
                    issues,
                });
            }
            set.skipped.push(SkippedFile {
                file: name,
                reason: format!("nonconforming geometry: {issues}"),
            });
            continue;
        }
        set.names.push(file_stem(&path));
        set.volumes.push(volume);
    }
    Ok(set)
}

fn effective_pairs(requested: u64, set_len: usize) -> u64 {
    let n = set_len as u64;
    requested.min(n * (n - 1) / 2).max(1)
}

/// Classic metrics stage: pairwise MS-SSIM (within-set diversity proxy),
/// Fréchet distance and feature-space MMD per embedding tag, and raw-voxel
/// MMD.
pub fn classic_metrics(
    cfg: &EvalConfig,
    real: &LoadedSet,
    synth: &LoadedSet,
) -> Result<(BTreeMap<String, f64>, BTreeMap<String, u64>)> {
    let mut classic = BTreeMap::new();
    let mut seeds = BTreeMap::new();
    seeds.insert("pair_sampling".to_string(), cfg.seed);

    let spec = cfg.msssim.spec();
    let synth_pairs = effective_pairs(cfg.msssim.num_pairs, synth.volumes.len());
    let (mean, sd) = pairwise_ms_ssim(&synth.volumes, synth_pairs, cfg.seed, &spec)?;
    let real_mean = match cfg.msssim.real_reference {
        Some(anchor) => anchor,
        None => {
            let real_pairs = effective_pairs(cfg.msssim.num_pairs, real.volumes.len());
            pairwise_ms_ssim(&real.volumes, real_pairs, cfg.seed, &spec)?.0
        }
    };
    classic.insert("ms_ssim_mean".into(), mean);
    classic.insert("ms_ssim_stddev".into(), sd);
    classic.insert("ms_ssim_real_mean".into(), real_mean);
    classic.insert("ms_ssim_gap_to_real".into(), (mean - real_mean).abs());

    let feature_kernel = cfg.mmd.feature_kernel()?;
    for entry in &cfg.embeddings {
        let real_set = EmbeddingSet::load(&entry.real, &entry.tag)?;
        let synth_set = EmbeddingSet::load(&entry.synth, &entry.tag)?;
        let fid = frechet_distance(&fit_gaussian(&real_set)?, &fit_gaussian(&synth_set)?)?;
        let mmd = mmd2_unbiased(&real_set, &synth_set, &feature_kernel)?;
        classic.insert(format!("fid@{}", entry.tag), fid);
        classic.insert(format!("mmd@{}", entry.tag), mmd);
    }

    if cfg.toy_embedder.enabled {
        seeds.insert("toy_embedder".to_string(), cfg.toy_embedder.seed);
        let embed_all = |set: &LoadedSet| -> Result<EmbeddingSet> {
            let rows: Vec<Vec<f64>> = set
                .volumes
                .par_iter()
                .map(|v| toy_embedder(v, cfg.toy_embedder.dim, cfg.toy_embedder.seed))
                .collect();
            EmbeddingSet::from_rows(rows, "toy")
        };
        let real_set = embed_all(real)?;
        let synth_set = embed_all(synth)?;
        let fid = frechet_distance(&fit_gaussian(&real_set)?, &fit_gaussian(&synth_set)?)?;
        let mmd = mmd2_unbiased(&real_set, &synth_set, &feature_kernel)?;
        classic.insert("fid@toy".into(), fid);
        classic.insert("mmd@toy".into(), mmd);
    }

    if cfg.mmd.image_space {
        let value = image_space_mmd(&real.volumes, &synth.volumes, &cfg.mmd.image_kernel()?)?;
        classic.insert("image_mmd".into(), value);
    }
    Ok((classic, seeds))
}

fn load_qc(path: &Path, expected_regions: &[String]) -> Result<Vec<QCRecord>> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    let (regions, records) = qc_records_from_csv(&bytes, &path.display().to_string())?;
    let mut a = regions.clone();
    let mut b = expected_regions.to_vec();
    a.sort();
    b.sort();
    if a != b {
        return Err(Error::BadFile {
            path: path.display().to_string(),
            reason: format!(
                "QC regions {regions:?} do not match the configured region names"
            ),
        });
    }
    Ok(records)
}

/// Gating stage: calibrate (or adopt) the threshold on real records, then
/// gate the synthetic model.
pub fn gate_stage(cfg: &EvalConfig) -> Result<GateSection> {
    let qc_real = cfg
        .paths
        .qc_real
        .as_deref()
        .ok_or_else(|| Error::Config("paths.qc_real is required for gating".into()))?;
    let qc_synth = cfg
        .paths
        .qc_synth
        .as_deref()
        .ok_or_else(|| Error::Config("paths.qc_synth is required for gating".into()))?;
    let real_records = load_qc(qc_real, &cfg.gate.region_names)?;
    let synth_records = load_qc(qc_synth, &cfg.gate.region_names)?;

    let (threshold, calibrated) = match cfg.gate.threshold {
        Some(t) => (t, false),
        None => (
            calibrate_threshold(
                &real_records,
                cfg.gate.target_real_fail_fraction,
                cfg.gate.grid_step,
            )?,
            true,
        ),
    };
    let gate_cfg = GateConfig {
        threshold,
        target_real_fail_fraction: cfg.gate.target_real_fail_fraction,
        min_model_pass_rate: cfg.gate.effective_min_pass_rate(),
        region_names: cfg.gate.region_names.clone(),
    };
    let mut real_failed = 0usize;
    for record in &real_records {
        if !gate_mri(record, &gate_cfg)?.0 {
            real_failed += 1;
        }
    }
    let result = gate_model(&synth_records, &gate_cfg)?;
    let synth_qc_distribution =
        qc_distribution(&synth_records, &cfg.gate.region_names, threshold)?;
    Ok(GateSection {
        threshold,
        calibrated,
        target_real_fail_fraction: cfg.gate.target_real_fail_fraction,
        min_model_pass_rate: cfg.gate.effective_min_pass_rate(),
        real_fail_fraction: real_failed as f64 / real_records.len() as f64,
        result,
        synth_qc_distribution,
    })
}

fn load_region_table(cfg: &EvalConfig) -> Result<RegionTable> {
    match cfg.paths.region_table.as_deref() {
        None => Ok(RegionTable::default_table()),
        Some(path) => {
            let text = std::fs::read_to_string(path)
                .map_err(|e| Error::io(path.display().to_string(), e))?;
            RegionTable::parse(&text)
        }
    }
}

fn load_labels_dir(
    dir: &Path,
    table: &RegionTable,
    warnings: &mut Vec<String>,
) -> Result<Vec<RegionVolumes>> {
    let files = list_nifti_files(dir)?;
    let mut out = Vec::with_capacity(files.len());
    for path in files {
        let display = path.display().to_string();
        let bytes = std::fs::read(&path).map_err(|e| Error::io(display.clone(), e))?;
        let mut labels: LabelMap = match parse_nifti(&bytes)? {
            Parsed::Labels(m) => m,
            Parsed::Volume(_) => {
                return Err(Error::BadFile {
                    path: display,
                    reason: "real-typed stream; expected an integer label map".into(),
                })
            }
        };
        let unknown = labels.attach_table(table.clone());
        if !unknown.is_empty() {
            warnings.push(format!(
                "{display}: unknown label codes {unknown:?} counted into ICV only"
            ));
        }
        let (rv, _) = region_volumes(&labels, &file_stem(&path))?;
        out.push(rv);
    }
    Ok(out)
}

fn load_region_volume_set(
    csv_path: Option<&Path>,
    labels_dir: Option<&Path>,
    which: &str,
    table: &RegionTable,
    warnings: &mut Vec<String>,
) -> Result<Vec<RegionVolumes>> {
    if let Some(path) = csv_path {
        let bytes =
            std::fs::read(path).map_err(|e| Error::io(path.display().to_string(), e))?;
        return region_volumes_from_csv(&bytes, &path.display().to_string());
    }
    if let Some(dir) = labels_dir {
        return load_labels_dir(dir, table, warnings);
    }
    Err(Error::Config(format!(
        "anatomy requires paths.region_volumes_{which} or paths.labels_{which}_dir"
    )))
}

/// Anatomical plausibility stage. Only ever invoked for assessable models.
pub fn anatomy_stage(cfg: &EvalConfig, warnings: &mut Vec<String>) -> Result<EffectSizeTable> {
    let table = load_region_table(cfg)?;
    let real = load_region_volume_set(
        cfg.paths.region_volumes_real.as_deref(),
        cfg.paths.labels_real_dir.as_deref(),
        "real",
        &table,
        warnings,
    )?;
    let synth = load_region_volume_set(
        cfg.paths.region_volumes_synth.as_deref(),
        cfg.paths.labels_synth_dir.as_deref(),
        "synth",
        &table,
        warnings,
    )?;
    let fit = if cfg.anatomy.fit_on == "pooled" {
        let mut pooled = real.clone();
        pooled.extend(synth.iter().cloned());
        fit_icv(&pooled, "pooled")?
    } else {
        fit_icv(&real, "real")?
    };
    let real_res: Vec<_> = real
        .iter()
        .map(|s| residualize(s, &fit))
        .collect::<Result<_>>()?;
    let synth_res: Vec<_> = synth
        .iter()
        .map(|s| residualize(s, &fit))
        .collect::<Result<_>>()?;
    plausibility_table(&real_res, &synth_res, cfg.anatomy.flag_threshold)
}

/// Run the full evaluation protocol.
pub fn run_protocol(cfg: &EvalConfig, config_sha256: &str) -> Result<EvaluationReport> {
    let real_dir = cfg
        .paths
        .real_dir
        .as_deref()
        .ok_or_else(|| Error::Config("paths.real_dir is required".into()))?;
    let synth_dir = cfg
        .paths
        .synth_dir
        .as_deref()
        .ok_or_else(|| Error::Config("paths.synth_dir is required".into()))?;
    let expected = cfg.geometry.expected();

    let real = load_volume_set(real_dir, &expected, true)?;
    let synth = load_volume_set(synth_dir, &expected, false)?;
    if real.volumes.len() < 2 {
        return Err(Error::TooFewSubjects {
            n: real.volumes.len(),
            min: 2,
        });
    }
    if synth.volumes.len() < 2 {
        return Err(Error::TooFewSubjects {
            n: synth.volumes.len(),
            min: 2,
        });
    }

    let mut warnings: Vec<String> = synth
        .skipped
        .iter()
        .map(|s| format!("skipped synthetic file {}: {}", s.file, s.reason))
        .collect();

    let (classic, seeds) = classic_metrics(cfg, &real, &synth)?;
    let gate = gate_stage(cfg)?;
    let effect_sizes = match gate.result.verdict {
        Verdict::Assessable => Some(anatomy_stage(cfg, &mut warnings)?),
        Verdict::TooUnreliable => None,
    };

    let provenance = Provenance {
        config_sha256: config_sha256.to_string(),
        toolkit_version: TOOLKIT_VERSION.to_string(),
        seeds,
        real_files: real.names.clone(),
        synth_files: synth.names.clone(),
        skipped_synth_files: synth.skipped.clone(),
    };
    EvaluationReport::assemble(
        cfg.model_name.clone(),
        classic,
        gate,
        effect_sizes,
        warnings,
        provenance,
    )
}

// ---------------------------------------------------------------------------
// emission
// ---------------------------------------------------------------------------

pub fn fmt_metric(x: f64) -> String {
    format!("{x:.3}")
}

pub fn fmt_d(x: f64) -> String {
    format!("{x:.2}")
}

/// Fractions render as percentages with two decimals: 0.9525 -> "95.25%".
pub fn fmt_pct(fraction: f64) -> String {
    format!("{:.2}%", fraction * 100.0)
}

/// Canonical lossless form; stable key order, byte-reproducible.
pub fn emit_json(report: &EvaluationReport) -> Vec<u8> {
    let mut bytes = serde_json::to_vec_pretty(report).expect("report serializes");
    bytes.push(b'\n');
    bytes
}

pub fn parse_json(bytes: &[u8]) -> Result<EvaluationReport> {
    serde_json::from_slice(bytes).map_err(|e| Error::BadFile {
        path: "<report json>".into(),
        reason: e.to_string(),
    })
}

/// One CSV file per table: (file name, bytes).
pub fn emit_csv(report: &EvaluationReport) -> Vec<(String, Vec<u8>)> {
    let mut files = Vec::new();

    let mut classic = String::from("metric,value\n");
    for (k, v) in &report.classic {
        classic.push_str(&format!("{k},{}\n", fmt_metric(*v)));
    }
    files.push(("classic.csv".to_string(), classic.into_bytes()));

    let g = &report.gate;
    let mut gate = String::from("key,value\n");
    gate.push_str(&format!("threshold,{}\n", g.threshold));
    gate.push_str(&format!("calibrated,{}\n", g.calibrated));
    gate.push_str(&format!(
        "target_real_fail_fraction,{}\n",
        g.target_real_fail_fraction
    ));
    gate.push_str(&format!("min_model_pass_rate,{}\n", g.min_model_pass_rate));
    gate.push_str(&format!("real_fail_fraction,{}\n", fmt_pct(g.real_fail_fraction)));
    gate.push_str(&format!("total,{}\n", g.result.total));
    gate.push_str(&format!("failed_mris,{}\n", g.result.failed_mris));
    gate.push_str(&format!("failed_roi_events,{}\n", g.result.failed_roi_events));
    gate.push_str(&format!("pass_rate,{}\n", fmt_pct(g.result.pass_rate)));
    gate.push_str(&format!("verdict,{}\n", g.result.verdict));
    for (region, count) in &g.result.per_region_fail_counts {
        gate.push_str(&format!("failed_roi.{region},{count}\n"));
    }
    files.push(("gate.csv".to_string(), gate.into_bytes()));

    let mut dist = String::from("region,min,q1,median,q3,max,fraction_below_threshold\n");
    for (region, s) in &g.synth_qc_distribution {
        dist.push_str(&format!(
            "{region},{},{},{},{},{},{}\n",
            fmt_metric(s.min),
            fmt_metric(s.q1),
            fmt_metric(s.median),
            fmt_metric(s.q3),
            fmt_metric(s.max),
            fmt_pct(s.fraction_below_threshold)
        ));
    }
    files.push(("qc_distribution.csv".to_string(), dist.into_bytes()));

    if let Some(table) = report.effect_sizes() {
        let mut es = String::from("region,d,n_real,n_synth,flagged\n");
        for (region, row) in &table.rows {
            es.push_str(&format!(
                "{region},{},{},{},{}\n",
                fmt_d(row.d),
                row.n_real,
                row.n_synth,
                row.flagged
            ));
        }
        files.push(("effect_sizes.csv".to_string(), es.into_bytes()));
    }
    files
}

/// Columns where a smaller value means better; these get the bold marker in
/// multi-model tables. MS-SSIM is anchored instead: the gap to the real
/// reference is what should be small.
fn lower_is_better(metric: &str) -> bool {
    !matches!(
        metric,
        "ms_ssim_mean" | "ms_ssim_stddev" | "ms_ssim_real_mean"
    )
}

/// Render one or more reports side by side. With at least two models the
/// best (lowest) value per metric column and the best |d| per region are
/// bold.
pub fn emit_markdown(reports: &[EvaluationReport]) -> Vec<u8> {
    let bold = reports.len() >= 2;
    let mut out = String::from("# Generative MRI evaluation\n");

    // classic metrics
    let mut metric_names: Vec<String> = Vec::new();
    for r in reports {
        for k in r.classic.keys() {
            if !metric_names.contains(k) {
                metric_names.push(k.clone());
            }
        }
    }
    metric_names.sort();
    if !metric_names.is_empty() {
        out.push_str("\n## Classic metrics\n\n");
        out.push_str(&format!("| Model | {} |\n", metric_names.join(" | ")));
        out.push_str(&format!("|---{}|\n", "|---".repeat(metric_names.len())));
        let best: BTreeMap<&String, f64> = metric_names
            .iter()
            .map(|name| {
                let min = reports
                    .iter()
                    .filter_map(|r| r.classic.get(name))
                    .fold(f64::INFINITY, |a, &b| a.min(b));
                (name, min)
            })
            .collect();
        for r in reports {
            let mut row = format!("| {} |", r.model_name);
            for name in &metric_names {
                match r.classic.get(name) {
                    None => row.push_str(" - |"),
                    Some(&v) => {
                        let text = fmt_metric(v);
                        if bold && lower_is_better(name) && v == best[name] {
                            row.push_str(&format!(" **{text}** |"));
                        } else {
                            row.push_str(&format!(" {text} |"));
                        }
                    }
                }
            }
            out.push_str(&row);
            out.push('\n');
        }
    }

    // gate accounting
    out.push_str("\n## Segmentation-reliability gate\n\n");
    out.push_str("| Model | Total | Failed ROI | Failed MRIs | Passing rate | Verdict |\n");
    out.push_str("|---|---|---|---|---|---|\n");
    for r in reports {
        let g = &r.gate.result;
        out.push_str(&format!(
            "| {} | {} | {} | {} | {} | {} |\n",
            r.model_name,
            g.total,
            g.failed_roi_events,
            g.failed_mris,
            fmt_pct(g.pass_rate),
            g.verdict
        ));
    }
    for r in reports {
        out.push_str(&format!(
            "\nThreshold for {}: {} ({}; real fail fraction {}).\n",
            r.model_name,
            r.gate.threshold,
            if r.gate.calibrated {
                "calibrated"
            } else {
                "fixed by config"
            },
            fmt_pct(r.gate.real_fail_fraction),
        ));
    }

    // QC score distributions
    for r in reports {
        out.push_str(&format!("\n## QC score distribution: {}\n\n", r.model_name));
        out.push_str("| Region | min | q1 | median | q3 | max | below threshold |\n");
        out.push_str("|---|---|---|---|---|---|---|\n");
        for (region, s) in &r.gate.synth_qc_distribution {
            out.push_str(&format!(
                "| {region} | {} | {} | {} | {} | {} | {} |\n",
                fmt_metric(s.min),
                fmt_metric(s.q1),
                fmt_metric(s.median),
                fmt_metric(s.q3),
                fmt_metric(s.max),
                fmt_pct(s.fraction_below_threshold)
            ));
        }
    }

    // effect sizes for assessable models
    let with_tables: Vec<&EvaluationReport> =
        reports.iter().filter(|r| r.effect_sizes().is_some()).collect();
    if !with_tables.is_empty() {
        out.push_str("\n## Anatomical plausibility (Cohen's d, synthetic minus real)\n\n");
        let mut regions: Vec<String> = Vec::new();
        for r in &with_tables {
            for key in r.effect_sizes().expect("filtered").rows.keys() {
                if !regions.contains(key) {
                    regions.push(key.clone());
                }
            }
        }
        regions.sort();
        out.push_str(&format!(
            "| Region | {} |\n",
            with_tables
                .iter()
                .map(|r| r.model_name.as_str())
                .collect::<Vec<_>>()
                .join(" | ")
        ));
        out.push_str(&format!("|---{}|\n", "|---".repeat(with_tables.len())));
        let bold_regions = with_tables.len() >= 2;
        for region in &regions {
            let mut row = format!("| {region} |");
            let best = with_tables
                .iter()
                .filter_map(|r| r.effect_sizes().expect("filtered").rows.get(region))
                .map(|e| e.d.abs())
                .fold(f64::INFINITY, f64::min);
            for r in &with_tables {
                match r.effect_sizes().expect("filtered").rows.get(region) {
                    None => row.push_str(" - |"),
                    Some(e) => {
                        let mut text = fmt_d(e.d);
                        if e.flagged {
                            text.push('*');
                        }
                        if bold_regions && e.d.abs() == best {
                            row.push_str(&format!(" **{text}** |"));
                        } else {
                            row.push_str(&format!(" {text} |"));
                        }
                    }
                }
            }
            out.push_str(&row);
            out.push('\n');
        }
        let thr = with_tables[0].effect_sizes().expect("filtered").flag_threshold;
        out.push_str(&format!("\n`*` marks |d| > {thr}.\n"));

        if with_tables.len() >= 2 {
            let named: Vec<(String, &crate::anatomy::EffectSizeTable)> = with_tables
                .iter()
                .map(|r| (r.model_name.clone(), r.effect_sizes().expect("filtered")))
                .collect();
            if let Ok(ranking) = crate::anatomy::best_region_counts(&named) {
                out.push_str(&format!(
                    "\nBest |d| per region over {} shared regions: {}.\n",
                    ranking.regions,
                    ranking
                        .strict
                        .iter()
                        .map(|(name, count)| {
                            let ties = ranking.with_ties[name];
                            if ties == *count {
                                format!("{name} {count}")
                            } else {
                                format!("{name} {count} ({ties} with ties)")
                            }
                        })
                        .collect::<Vec<_>>()
                        .join(", ")
                ));
            }
        }
    }

    // unreliable models are listed with gate statistics only
    for r in reports {
        if matches!(r.assessment, Assessment::TooUnreliable {}) {
            out.push_str(&format!(
                "\nModel {} is too unreliable for anatomical assessment; gate statistics only.\n",
                r.model_name
            ));
        }
    }
    out.into_bytes()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::qc::Verdict;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn gate_section(total: usize, failed: usize) -> GateSection {
        let pass_rate = (total - failed) as f64 / total as f64;
        let verdict = if pass_rate >= 0.95 {
            Verdict::Assessable
        } else {
            Verdict::TooUnreliable
        };
        GateSection {
            threshold: 0.65,
            calibrated: true,
            target_real_fail_fraction: 0.05,
            min_model_pass_rate: 0.95,
            real_fail_fraction: 0.0475,
            result: ModelGateResult {
                total,
                failed_mris: failed,
                failed_roi_events: failed,
                pass_rate,
                verdict,
                per_region_fail_counts: BTreeMap::from([("gray_matter".into(), failed)]),
            },
            synth_qc_distribution: BTreeMap::new(),
        }
    }

    fn effect_table(d: f64) -> EffectSizeTable {
        EffectSizeTable {
            rows: BTreeMap::from([(
                "blob".to_string(),
                crate::anatomy::EffectSizeRow {
                    d,
                    n_real: 10,
                    n_synth: 10,
                    flagged: d.abs() > 0.8,
                },
            )]),
            flag_threshold: 0.8,
            fit_tag: "real".into(),
        }
    }

    fn provenance() -> Provenance {
        Provenance {
            config_sha256: "00".into(),
            toolkit_version: TOOLKIT_VERSION.into(),
            seeds: BTreeMap::from([("pair_sampling".into(), 42u64)]),
            real_files: vec!["r0".into()],
            synth_files: vec!["s0".into()],
            skipped_synth_files: vec![],
        }
    }

    fn report(name: &str, failed: usize, table: Option<EffectSizeTable>) -> EvaluationReport {
        EvaluationReport::assemble(
            name.into(),
            BTreeMap::from([("fid@toy".to_string(), 0.125), ("image_mmd".to_string(), 8.0)]),
            gate_section(400, failed),
            table,
            vec![],
            provenance(),
        )
        .unwrap()
    }

    #[test]
    fn assemble_rejects_invalid_pairings() {
        let err = EvaluationReport::assemble(
            "m".into(),
            BTreeMap::new(),
            gate_section(400, 67), // too unreliable
            Some(effect_table(0.1)),
            vec![],
            provenance(),
        );
        assert!(err.is_err());
        let err = EvaluationReport::assemble(
            "m".into(),
            BTreeMap::new(),
            gate_section(400, 0), // assessable
            None,
            vec![],
            provenance(),
        );
        assert!(err.is_err());
    }

    #[test]
    fn verdict_and_effect_sizes_never_disagree_in_json() {
        let mut rng = ChaCha8Rng::seed_from_u64(77);
        for _ in 0..100 {
            let failed = rng.random_range(0..400);
            let assessable = (400 - failed) as f64 / 400.0 >= 0.95;
            let table = assessable.then(|| effect_table(rng.random_range(-2.0..2.0)));
            let report = report("fuzz", failed, table);
            let json: serde_json::Value =
                serde_json::from_slice(&emit_json(&report)).unwrap();
            let verdict = json["assessment"]["verdict"].as_str().unwrap();
            let has_table = json["assessment"]["effect_sizes"].is_object();
            assert_eq!(verdict == "assessable", has_table);
            assert_eq!(
                json["gate"]["result"]["verdict"].as_str().unwrap() == "assessable",
                has_table
            );
        }
    }

    #[test]
    fn json_roundtrip_is_byte_identical() {
        let r = report("model-a", 11, Some(effect_table(0.42)));
        let first = emit_json(&r);
        let parsed = parse_json(&first).unwrap();
        let second = emit_json(&parsed);
        assert_eq!(first, second);
    }

    #[test]
    fn pass_rates_render_with_two_decimals() {
        assert_eq!(fmt_pct(0.9525), "95.25%");
        assert_eq!(fmt_pct(381.0 / 400.0), "95.25%");
        assert_eq!(fmt_pct(0.0075), "0.75%");
        assert_eq!(fmt_pct(1.0), "100.00%");
    }

    #[test]
    fn markdown_bolds_best_metric_across_models() {
        let mut a = report("alpha", 0, Some(effect_table(0.3)));
        let mut b = report("beta", 0, Some(effect_table(-0.1)));
        a.classic.insert("fid@toy".into(), 0.5);
        b.classic.insert("fid@toy".into(), 0.25);
        let md = String::from_utf8(emit_markdown(&[a, b])).unwrap();
        assert!(md.contains("**0.250**"), "{md}");
        assert!(!md.contains("**0.500**"));
        // beta also wins the only region, and the ranking line says so
        assert!(md.contains("**-0.10**"));
        assert!(
            md.contains("Best |d| per region over 1 shared regions: alpha 0, beta 1."),
            "{md}"
        );
    }

    #[test]
    fn markdown_reports_pass_rate_and_unreliable_models() {
        let bad = report("wobbly", 67, None);
        let md = String::from_utf8(emit_markdown(&[bad])).unwrap();
        assert!(md.contains("83.25%"));
        assert!(md.contains("too-unreliable"));
        assert!(md.contains("gate statistics only"));
        assert!(!md.contains("Anatomical plausibility"));
    }

    #[test]
    fn markdown_marks_flagged_regions() {
        let r = report("m", 0, Some(effect_table(1.5)));
        let md = String::from_utf8(emit_markdown(&[r])).unwrap();
        assert!(md.contains("1.50*"));
    }

    #[test]
    fn csv_has_one_file_per_table() {
        let r = report("m", 0, Some(effect_table(0.9)));
        let files = emit_csv(&r);
        let names: Vec<&str> = files.iter().map(|(n, _)| n.as_str()).collect();
        assert_eq!(
            names,
            vec!["classic.csv", "gate.csv", "qc_distribution.csv", "effect_sizes.csv"]
        );
        let gate = String::from_utf8(files[1].1.clone()).unwrap();
        assert!(gate.contains("pass_rate,100.00%"));
        let es = String::from_utf8(files[3].1.clone()).unwrap();
        assert!(es.contains("blob,0.90,10,10,true"));
    }

    #[test]
    fn csv_omits_effect_sizes_for_unreliable_models() {
        let r = report("m", 67, None);
        let files = emit_csv(&r);
        assert!(files.iter().all(|(n, _)| n != "effect_sizes.csv"));
    }
}
