//! Command-line front end for the evaluation toolkit.
//!
//! Exit codes: 0 success, 2 input or validation error, 3 gate verdict
//! too-unreliable (so pipelines can branch on it), 4 internal error.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context};
use clap::{Parser, Subcommand, ValueEnum};

use mrieval::config::EvalConfig;
use mrieval::nifti::{parse_nifti, write_nifti, write_nifti_labels, Parsed};
use mrieval::phantom::generate_family;
use mrieval::qc::{qc_records_to_csv, QCRecord, Verdict};
use mrieval::report::{
    anatomy_stage, classic_metrics, emit_csv, emit_json, emit_markdown, gate_stage,
    list_nifti_files, load_volume_set, parse_json, run_protocol, EvaluationReport,
};
use mrieval::volume::{validate_geometry, validate_label_geometry};

const EXIT_INPUT: u8 = 2;
const EXIT_UNRELIABLE: u8 = 3;
const EXIT_INTERNAL: u8 = 4;

#[derive(Debug, Clone, Copy, PartialEq, ValueEnum)]
enum Format {
    Json,
    Csv,
    Markdown,
}

#[derive(Parser)]
#[command(
    name = "mrieval",
    version,
    about = "Evaluate sets of generated 3D brain MRIs against a real reference set"
)]
struct Cli {
    /// TOML config file; paths inside resolve relative to its directory
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Directory of real reference volumes (overrides the config)
    #[arg(long, global = true)]
    real: Option<PathBuf>,
    /// Directory of synthetic volumes (overrides the config)
    #[arg(long, global = true)]
    synth: Option<PathBuf>,
    /// Output directory
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[arg(long, global = true, value_enum, default_value = "json")]
    format: Format,
    /// Master seed (overrides the config)
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker threads; affects speed only, never results
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Check that volumes conform to the expected geometry
    Validate,
    /// Classic distribution metrics only (MS-SSIM, FID, MMD)
    Metrics,
    /// Calibrate the QC threshold on the real record set
    CalibrateQc,
    /// Gate the synthetic model on its QC records
    Gate,
    /// Anatomical plausibility table (runs the gate first)
    Anatomy,
    /// Full protocol: validation, metrics, gating, plausibility
    Evaluate,
    /// Generate a phantom family with analytic ground truth
    Phantom,
    /// Re-render one or more JSON reports
    Report {
        /// Report JSON file(s); repeat for side-by-side comparison
        #[arg(long = "input", required = true)]
        inputs: Vec<PathBuf>,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    if let Some(threads) = cli.threads {
        if threads > 0 {
            // ignore failure: the global pool may already exist
            let _ = rayon::ThreadPoolBuilder::new()
                .num_threads(threads)
                .build_global();
        }
    }
    match run(&cli) {
        Ok(code) => ExitCode::from(code),
        Err(err) => {
            eprintln!("error: {err:#}");
            let code = match err.downcast_ref::<mrieval::Error>() {
                Some(e) if !e.is_input_error() => EXIT_INTERNAL,
                _ => EXIT_INPUT,
            };
            ExitCode::from(code)
        }
    }
}

fn run(cli: &Cli) -> anyhow::Result<u8> {
    match &cli.command {
        Command::Validate => cmd_validate(cli),
        Command::Metrics => cmd_metrics(cli),
        Command::CalibrateQc => cmd_calibrate(cli),
        Command::Gate => cmd_gate(cli),
        Command::Anatomy => cmd_anatomy(cli),
        Command::Evaluate => cmd_evaluate(cli),
        Command::Phantom => cmd_phantom(cli),
        Command::Report { inputs } => cmd_report(cli, inputs),
    }
}

fn load_config(cli: &Cli) -> anyhow::Result<(EvalConfig, String)> {
    let path = cli
        .config
        .as_deref()
        .context("--config is required for this subcommand")?;
    let (mut cfg, sha) = EvalConfig::load(path)?;
    let dir = path.parent().unwrap_or(Path::new("."));
    cfg.resolve_paths(dir);
    if let Some(real) = &cli.real {
        cfg.paths.real_dir = Some(real.clone());
    }
    if let Some(synth) = &cli.synth {
        cfg.paths.synth_dir = Some(synth.clone());
    }
    if let Some(out) = &cli.out {
        cfg.paths.out_dir = Some(out.clone());
    }
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    Ok((cfg, sha))
}

fn out_dir(cfg: &EvalConfig) -> anyhow::Result<PathBuf> {
    let dir = cfg
        .paths
        .out_dir
        .clone()
        .context("--out (or paths.out_dir) is required")?;
    std::fs::create_dir_all(&dir).with_context(|| format!("creating {}", dir.display()))?;
    Ok(dir)
}

fn write_file(path: &Path, bytes: &[u8]) -> anyhow::Result<()> {
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent)?;
    }
    std::fs::write(path, bytes).with_context(|| format!("writing {}", path.display()))?;
    println!("wrote {}", path.display());
    Ok(())
}

/// Write (or print) a partial result. Partials always render as JSON; the
/// --format flag shapes only `evaluate` and `report` output.
fn emit_value(cfg: &EvalConfig, name: &str, value: &serde_json::Value) -> anyhow::Result<()> {
    let mut bytes = serde_json::to_vec_pretty(value)?;
    bytes.push(b'\n');
    match &cfg.paths.out_dir {
        Some(_) => {
            let dir = out_dir(cfg)?;
            write_file(&dir.join(format!("{name}.json")), &bytes)?;
        }
        None => print!("{}", String::from_utf8_lossy(&bytes)),
    }
    Ok(())
}

fn cmd_validate(cli: &Cli) -> anyhow::Result<u8> {
    let (cfg, _) = load_config(cli)?;
    let expected = cfg.geometry.expected();
    let mut dirs = Vec::new();
    if let Some(d) = &cfg.paths.real_dir {
        dirs.push(("real", d.clone()));
    }
    if let Some(d) = &cfg.paths.synth_dir {
        dirs.push(("synth", d.clone()));
    }
    if dirs.is_empty() {
        bail!("no real_dir or synth_dir configured");
    }
    let mut nonconforming = 0usize;
    let mut total = 0usize;
    for (kind, dir) in dirs {
        for path in list_nifti_files(&dir)? {
            total += 1;
            let bytes = std::fs::read(&path)?;
            let line = match parse_nifti(&bytes) {
                Err(e) => {
                    nonconforming += 1;
                    format!("parse error: {e}")
                }
                Ok(Parsed::Volume(v)) => {
                    let report = validate_geometry(&v, &expected);
                    if report.conforms {
                        "ok".to_string()
                    } else {
                        nonconforming += 1;
                        report
                            .issues
                            .iter()
                            .map(|i| {
                                format!(
                                    "{} expected {} observed {}",
                                    i.field, i.expected, i.observed
                                )
                            })
                            .collect::<Vec<_>>()
                            .join("; ")
                    }
                }
                Ok(Parsed::Labels(m)) => {
                    let report = validate_label_geometry(&m, &expected);
                    if report.conforms {
                        "ok (label map)".to_string()
                    } else {
                        nonconforming += 1;
                        "nonconforming label map".to_string()
                    }
                }
            };
            println!("[{kind}] {}: {line}", path.display());
        }
    }
    println!("{} of {total} files conform", total - nonconforming);
    Ok(if nonconforming == 0 { 0 } else { EXIT_INPUT })
}

fn cmd_metrics(cli: &Cli) -> anyhow::Result<u8> {
    let (cfg, _) = load_config(cli)?;
    let expected = cfg.geometry.expected();
    let real_dir = cfg.paths.real_dir.as_deref().context("real_dir required")?;
    let synth_dir = cfg.paths.synth_dir.as_deref().context("synth_dir required")?;
    let real = load_volume_set(real_dir, &expected, true)?;
    let synth = load_volume_set(synth_dir, &expected, false)?;
    let (classic, seeds) = classic_metrics(&cfg, &real, &synth)?;
    let value = serde_json::json!({
        "model_name": cfg.model_name,
        "classic": classic,
        "seeds": seeds,
        "skipped_synth_files": synth.skipped,
    });
    emit_value(&cfg, "metrics", &value)?;
    Ok(0)
}

fn cmd_calibrate(cli: &Cli) -> anyhow::Result<u8> {
    let (cfg, _) = load_config(cli)?;
    let qc_real = cfg
        .paths
        .qc_real
        .as_deref()
        .context("paths.qc_real required")?;
    let bytes = std::fs::read(qc_real)?;
    let (_, records) =
        mrieval::qc::qc_records_from_csv(&bytes, &qc_real.display().to_string())?;
    let threshold = mrieval::qc::calibrate_threshold(
        &records,
        cfg.gate.target_real_fail_fraction,
        cfg.gate.grid_step,
    )?;
    let gate_cfg = mrieval::qc::GateConfig {
        threshold,
        target_real_fail_fraction: cfg.gate.target_real_fail_fraction,
        min_model_pass_rate: cfg.gate.effective_min_pass_rate(),
        region_names: cfg.gate.region_names.clone(),
    };
    let mut failed = 0usize;
    for r in &records {
        if !mrieval::qc::gate_mri(r, &gate_cfg)?.0 {
            failed += 1;
        }
    }
    let value = serde_json::json!({
        "threshold": threshold,
        "target_real_fail_fraction": cfg.gate.target_real_fail_fraction,
        "grid_step": cfg.gate.grid_step,
        "real_records": records.len(),
        "real_failed": failed,
        "realized_fail_fraction": failed as f64 / records.len() as f64,
    });
    emit_value(&cfg, "calibration", &value)?;
    Ok(0)
}

fn cmd_gate(cli: &Cli) -> anyhow::Result<u8> {
    let (cfg, _) = load_config(cli)?;
    let gate = gate_stage(&cfg)?;
    let verdict = gate.result.verdict;
    let value = serde_json::to_value(&gate)?;
    emit_value(&cfg, "gate", &value)?;
    Ok(match verdict {
        Verdict::Assessable => 0,
        Verdict::TooUnreliable => EXIT_UNRELIABLE,
    })
}

fn cmd_anatomy(cli: &Cli) -> anyhow::Result<u8> {
    let (cfg, _) = load_config(cli)?;
    let gate = gate_stage(&cfg)?;
    if gate.result.verdict == Verdict::TooUnreliable {
        eprintln!(
            "gate verdict: too-unreliable (pass rate {}); no plausibility table",
            mrieval::report::fmt_pct(gate.result.pass_rate)
        );
        return Ok(EXIT_UNRELIABLE);
    }
    let mut warnings = Vec::new();
    let table = anatomy_stage(&cfg, &mut warnings)?;
    for w in &warnings {
        eprintln!("warning: {w}");
    }
    let value = serde_json::to_value(&table)?;
    emit_value(&cfg, "effect_sizes", &value)?;
    Ok(0)
}

fn cmd_evaluate(cli: &Cli) -> anyhow::Result<u8> {
    let (cfg, sha) = load_config(cli)?;
    let report = run_protocol(&cfg, &sha)?;
    let dir = out_dir(&cfg)?;
    write_file(&dir.join("report.json"), &emit_json(&report))?;
    match cli.format {
        Format::Json => {}
        Format::Csv => {
            for (name, bytes) in emit_csv(&report) {
                write_file(&dir.join(name), &bytes)?;
            }
        }
        Format::Markdown => {
            write_file(
                &dir.join("report.md"),
                &emit_markdown(std::slice::from_ref(&report)),
            )?;
        }
    }
    for w in &report.warnings {
        eprintln!("warning: {w}");
    }
    let verdict = report.verdict();
    println!(
        "model {}: verdict {verdict}, pass rate {}",
        report.model_name,
        mrieval::report::fmt_pct(report.gate.result.pass_rate)
    );
    Ok(match verdict {
        Verdict::Assessable => 0,
        Verdict::TooUnreliable => EXIT_UNRELIABLE,
    })
}

fn cmd_phantom(cli: &Cli) -> anyhow::Result<u8> {
    let (cfg, _) = load_config(cli)?;
    let dir = out_dir(&cfg)?;
    let phantom = &cfg.phantom;
    let family = generate_family(&phantom.spec(), phantom.count, phantom.jitter)?;

    let volumes_dir = dir.join("volumes");
    let labels_dir = dir.join("labels");
    let mut truth = String::from("subject_id,merge_key,analytic_mm3\n");
    for subject in &family {
        write_file(
            &volumes_dir.join(format!("{}.nii.gz", subject.id)),
            &write_nifti(&subject.volume, true)?,
        )?;
        write_file(
            &labels_dir.join(format!("{}.nii.gz", subject.id)),
            &write_nifti_labels(&subject.labels, true)?,
        )?;
        for (key, mm3) in &subject.ground_truth {
            truth.push_str(&format!("{},{key},{mm3}\n", subject.id));
        }
    }
    write_file(&dir.join("ground_truth.csv"), truth.as_bytes())?;
    write_file(
        &dir.join("regions.tsv"),
        phantom.spec().region_table().to_text().as_bytes(),
    )?;
    if phantom.emit_qc {
        let records: Vec<QCRecord> = family
            .iter()
            .map(|s| QCRecord {
                subject_id: s.id.clone(),
                scores: cfg
                    .gate
                    .region_names
                    .iter()
                    .map(|r| (r.clone(), 1.0))
                    .collect(),
            })
            .collect();
        write_file(
            &dir.join("qc.csv"),
            &qc_records_to_csv(&records, &cfg.gate.region_names),
        )?;
    }
    println!("generated {} phantom subjects", family.len());
    Ok(0)
}

fn cmd_report(cli: &Cli, inputs: &[PathBuf]) -> anyhow::Result<u8> {
    let mut reports: Vec<EvaluationReport> = Vec::new();
    for path in inputs {
        let bytes =
            std::fs::read(path).with_context(|| format!("reading {}", path.display()))?;
        reports.push(parse_json(&bytes)?);
    }
    let stdout_or = |name: &str, bytes: Vec<u8>| -> anyhow::Result<()> {
        match &cli.out {
            Some(dir) => {
                std::fs::create_dir_all(dir)?;
                write_file(&dir.join(name), &bytes)
            }
            None => {
                print!("{}", String::from_utf8_lossy(&bytes));
                Ok(())
            }
        }
    };
    match cli.format {
        Format::Markdown => stdout_or("report.md", emit_markdown(&reports))?,
        Format::Json => {
            // canonical re-emission; multiple inputs become a JSON array
            if reports.len() == 1 {
                stdout_or("report.json", emit_json(&reports[0]))?;
            } else {
                let mut bytes = serde_json::to_vec_pretty(&reports)?;
                bytes.push(b'\n');
                stdout_or("reports.json", bytes)?;
            }
        }
        Format::Csv => {
            let dir = cli
                .out
                .as_deref()
                .context("--out is required for csv output")?;
            std::fs::create_dir_all(dir)?;
            for (i, report) in reports.iter().enumerate() {
                let prefix = if reports.len() == 1 {
                    String::new()
                } else {
                    format!("{}_", sanitize(&report.model_name, i))
                };
                for (name, bytes) in emit_csv(report) {
                    write_file(&dir.join(format!("{prefix}{name}")), &bytes)?;
                }
            }
        }
    }
    Ok(0)
}

fn sanitize(name: &str, fallback: usize) -> String {
    let cleaned: String = name
        .chars()
        .map(|c| if c.is_ascii_alphanumeric() { c } else { '_' })
        .collect();
    if cleaned.is_empty() {
        format!("model{fallback}")
    } else {
        cleaned
    }
}
