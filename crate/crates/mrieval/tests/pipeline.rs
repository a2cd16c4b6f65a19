//! End-to-end protocol runs over phantom families written to disk.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use mrieval::anatomy::{fit_icv, plausibility_table, region_volumes, residualize};
use mrieval::config::EvalConfig;
use mrieval::nifti::{write_nifti, write_nifti_labels};
use mrieval::phantom::{generate_family, PhantomRegion, PhantomSpec};
use mrieval::qc::Verdict;
use mrieval::report::{emit_json, run_protocol};

fn base_spec(seed: u64) -> PhantomSpec {
    PhantomSpec {
        shape: [20, 20, 20],
        spacing: [1.0, 1.0, 1.0],
        regions: vec![
            PhantomRegion {
                merge_key: "core".into(),
                code: 1,
                center_mm: [7.0, 7.0, 10.0],
                semi_axes_mm: [4.5, 4.0, 4.0],
                mean_intensity: 0.5,
            },
            PhantomRegion {
                merge_key: "shell".into(),
                code: 2,
                center_mm: [15.5, 15.5, 10.0],
                semi_axes_mm: [3.0, 3.0, 4.0],
                mean_intensity: -0.2,
            },
        ],
        noise_sigma: 0.02,
        seed,
    }
}

/// Write a family to `<dir>/volumes`, `<dir>/labels`, plus QC and region
/// files, mimicking the segmenter-output layout the protocol ingests.
fn write_family(dir: &Path, spec: &PhantomSpec, count: usize, failing_qc: usize) {
    let family = generate_family(spec, count, 0.08).unwrap();
    let volumes = dir.join("volumes");
    let labels = dir.join("labels");
    fs::create_dir_all(&volumes).unwrap();
    fs::create_dir_all(&labels).unwrap();
    let mut qc = String::from(
        "subject_id,white_matter,gray_matter,csf,cerebellum,brainstem,thalamus,putamen_pallidum,hippocampus_amygdala\n",
    );
    for (i, subject) in family.iter().enumerate() {
        fs::write(
            volumes.join(format!("{}.nii.gz", subject.id)),
            write_nifti(&subject.volume, true).unwrap(),
        )
        .unwrap();
        fs::write(
            labels.join(format!("{}.nii.gz", subject.id)),
            write_nifti_labels(&subject.labels, true).unwrap(),
        )
        .unwrap();
        let gray = if i < failing_qc { 0.4 } else { 0.97 };
        qc.push_str(&format!(
            "{},0.98,{gray},0.95,0.96,0.99,0.97,0.98,0.96\n",
            subject.id
        ));
    }
    fs::write(dir.join("qc.csv"), qc).unwrap();
    fs::write(
        dir.join("regions.tsv"),
        spec.region_table().to_text(),
    )
    .unwrap();
}

fn config_for(root: &Path, real: &str, synth: &str) -> EvalConfig {
    let toml = format!(
        r#"
model_name = "phantom-model"
seed = 9

[paths]
real_dir = "{real}/volumes"
synth_dir = "{synth}/volumes"
labels_real_dir = "{real}/labels"
labels_synth_dir = "{synth}/labels"
qc_real = "{real}/qc.csv"
qc_synth = "{synth}/qc.csv"
region_table = "{real}/regions.tsv"

[geometry]
shape = [20, 20, 20]
spacing = [1.0, 1.0, 1.0]
tol = 0.5

[msssim]
scales = 2
weights = [0.5, 0.5]
window = 5
num_pairs = 8

[toy_embedder]
enabled = true
dim = 16
"#
    );
    let mut cfg = EvalConfig::from_toml(&toml).unwrap();
    cfg.resolve_paths(root);
    cfg
}

#[test]
fn self_comparison_is_the_fixed_point() {
    let tmp = tempfile::tempdir().unwrap();
    write_family(&tmp.path().join("a"), &base_spec(100), 6, 0);
    let cfg = config_for(tmp.path(), "a", "a");
    let report = run_protocol(&cfg, "deadbeef").unwrap();

    assert!(report.classic["fid@toy"] < 1e-6);
    assert!(report.classic["ms_ssim_gap_to_real"] < 1e-12);
    assert_eq!(report.verdict(), Verdict::Assessable);
    let table = report.effect_sizes().expect("assessable model");
    for (region, row) in &table.rows {
        assert_eq!(row.d, 0.0, "region {region}");
        assert!(!row.flagged);
    }
}

#[test]
fn protocol_output_is_byte_deterministic() {
    let tmp = tempfile::tempdir().unwrap();
    write_family(&tmp.path().join("real"), &base_spec(100), 6, 0);
    write_family(&tmp.path().join("synth"), &base_spec(500), 6, 0);
    let cfg = config_for(tmp.path(), "real", "synth");
    let a = emit_json(&run_protocol(&cfg, "cafe").unwrap());
    let b = emit_json(&run_protocol(&cfg, "cafe").unwrap());
    assert_eq!(a, b);
}

#[test]
fn unreliable_model_gets_gate_stats_only() {
    let tmp = tempfile::tempdir().unwrap();
    write_family(&tmp.path().join("real"), &base_spec(100), 6, 0);
    // 2 of 6 failing QC: pass rate 66.67% < 95%
    write_family(&tmp.path().join("synth"), &base_spec(500), 6, 2);
    let cfg = config_for(tmp.path(), "real", "synth");
    let report = run_protocol(&cfg, "cafe").unwrap();
    assert_eq!(report.verdict(), Verdict::TooUnreliable);
    assert!(report.effect_sizes().is_none());
    let json: serde_json::Value = serde_json::from_slice(&emit_json(&report)).unwrap();
    assert_eq!(json["assessment"]["verdict"], "too-unreliable");
    assert!(json["assessment"].get("effect_sizes").is_none());
}

#[test]
fn nonconforming_synthetic_files_are_skipped_and_counted() {
    let tmp = tempfile::tempdir().unwrap();
    write_family(&tmp.path().join("real"), &base_spec(100), 6, 0);
    write_family(&tmp.path().join("synth"), &base_spec(500), 6, 0);
    // corrupt one synthetic volume: wrong shape
    let odd = mrieval::Volume::filled(0.0, [8, 8, 8], [1.0; 3]).unwrap();
    fs::write(
        tmp.path().join("synth/volumes/zzz_odd.nii"),
        write_nifti(&odd, false).unwrap(),
    )
    .unwrap();
    let cfg = config_for(tmp.path(), "real", "synth");
    let report = run_protocol(&cfg, "cafe").unwrap();
    assert_eq!(report.provenance.skipped_synth_files.len(), 1);
    assert_eq!(report.provenance.skipped_synth_files[0].file, "zzz_odd.nii");
    assert_eq!(report.provenance.synth_files.len(), 6);
    assert!(report
        .warnings
        .iter()
        .any(|w| w.contains("zzz_odd.nii")));
}

#[test]
fn empty_volume_directory_is_an_input_error() {
    let tmp = tempfile::tempdir().unwrap();
    write_family(&tmp.path().join("real"), &base_spec(100), 6, 0);
    fs::create_dir_all(tmp.path().join("hollow/volumes")).unwrap();
    let cfg = config_for(tmp.path(), "real", "hollow");
    assert!(matches!(
        run_protocol(&cfg, "cafe"),
        Err(mrieval::Error::EmptyDirectory(_))
    ));
}

#[test]
fn nonconforming_real_file_aborts() {
    let tmp = tempfile::tempdir().unwrap();
    write_family(&tmp.path().join("real"), &base_spec(100), 6, 0);
    write_family(&tmp.path().join("synth"), &base_spec(500), 6, 0);
    let odd = mrieval::Volume::filled(0.0, [8, 8, 8], [1.0; 3]).unwrap();
    fs::write(
        tmp.path().join("real/volumes/bad.nii"),
        write_nifti(&odd, false).unwrap(),
    )
    .unwrap();
    let cfg = config_for(tmp.path(), "real", "synth");
    match run_protocol(&cfg, "cafe") {
        Err(mrieval::Error::NonconformingReal { path, .. }) => {
            assert!(path.contains("bad.nii"))
        }
        other => panic!("expected abort on nonconforming real file, got {other:?}"),
    }
}

/// Three regions with a bulk ellipsoid dominating the ICV, so scaling one
/// small region barely disturbs the brain-size model.
fn bulk_spec(seed: u64) -> PhantomSpec {
    PhantomSpec {
        shape: [28, 28, 28],
        spacing: [1.0, 1.0, 1.0],
        regions: vec![
            PhantomRegion {
                merge_key: "bulk".into(),
                code: 1,
                center_mm: [9.0, 9.0, 9.0],
                semi_axes_mm: [6.5, 6.5, 6.5],
                mean_intensity: 0.4,
            },
            PhantomRegion {
                merge_key: "target".into(),
                code: 2,
                center_mm: [21.0, 21.0, 9.0],
                semi_axes_mm: [2.8, 2.8, 2.8],
                mean_intensity: 0.7,
            },
            PhantomRegion {
                merge_key: "bystander".into(),
                code: 3,
                center_mm: [21.0, 9.0, 21.0],
                semi_axes_mm: [2.8, 2.8, 2.8],
                mean_intensity: -0.3,
            },
        ],
        noise_sigma: 0.02,
        seed,
    }
}

#[test]
fn scaled_region_shows_up_in_effect_sizes() {
    let real_family = generate_family(&bulk_spec(1), 24, 0.06).unwrap();
    let mut scaled_spec = bulk_spec(9001);
    for axis in 0..3 {
        scaled_spec.regions[1].semi_axes_mm[axis] *= 1.15;
    }
    let synth_family = generate_family(&scaled_spec, 24, 0.06).unwrap();

    let volumes = |family: &[mrieval::phantom::PhantomSubject]| -> Vec<_> {
        family
            .iter()
            .map(|s| region_volumes(&s.labels, &s.id).unwrap().0)
            .collect()
    };
    let real_rv = volumes(&real_family);
    let synth_rv = volumes(&synth_family);
    let fit = fit_icv(&real_rv, "real").unwrap();
    let real_res: Vec<_> = real_rv.iter().map(|s| residualize(s, &fit).unwrap()).collect();
    let synth_res: Vec<_> = synth_rv
        .iter()
        .map(|s| residualize(s, &fit).unwrap())
        .collect();
    let table = plausibility_table(&real_res, &synth_res, 0.8).unwrap();
    let d_target = table.rows["target"].d.abs();
    let d_bystander = table.rows["bystander"].d.abs();
    assert!(d_target > 2.0, "scaled region should move: |d| = {d_target}");
    assert!(
        d_target > 3.0 * d_bystander,
        "target {d_target} vs bystander {d_bystander}"
    );
}

#[test]
fn toy_embeddings_separate_phantom_families() {
    // Fréchet distance between a family and its own held-out half stays
    // below the distance to a structurally different family.
    use mrieval::embed::{fit_gaussian, toy_embedder, EmbeddingSet};
    use mrieval::frechet::frechet_distance;

    let family_a = generate_family(&base_spec(300), 16, 0.06).unwrap();
    let mut other = base_spec(888);
    other.regions[0].semi_axes_mm = [3.0, 3.0, 3.0];
    other.regions[0].mean_intensity = -0.6;
    let family_b = generate_family(&other, 8, 0.06).unwrap();

    let embed = |subjects: &[mrieval::phantom::PhantomSubject]| -> EmbeddingSet {
        let rows = subjects
            .iter()
            .map(|s| toy_embedder(&s.volume, 24, 11))
            .collect();
        EmbeddingSet::from_rows(rows, "toy").unwrap()
    };
    let a_head = embed(&family_a[..8]);
    let a_tail = embed(&family_a[8..]);
    let b = embed(&family_b);

    let within = frechet_distance(
        &fit_gaussian(&a_head).unwrap(),
        &fit_gaussian(&a_tail).unwrap(),
    )
    .unwrap();
    let between =
        frechet_distance(&fit_gaussian(&a_head).unwrap(), &fit_gaussian(&b).unwrap()).unwrap();
    assert!(
        within < between,
        "within-family {within} should be below between-family {between}"
    );
}

#[test]
fn region_volume_csv_feeds_the_same_table() {
    // the CSV path and the label-map path agree
    let family = generate_family(&base_spec(5), 8, 0.05).unwrap();
    let rv: Vec<_> = family
        .iter()
        .map(|s| region_volumes(&s.labels, &s.id).unwrap().0)
        .collect();
    let csv = mrieval::anatomy::region_volumes_to_csv(&rv).unwrap();
    let back = mrieval::anatomy::region_volumes_from_csv(&csv, "x").unwrap();
    let fit_a = fit_icv(&rv, "real").unwrap();
    let fit_b = fit_icv(&back, "real").unwrap();
    let coeffs = |fit: &mrieval::anatomy::IcvFit| -> BTreeMap<String, (f64, f64)> {
        fit.coefficients.clone()
    };
    assert_eq!(coeffs(&fit_a), coeffs(&fit_b));
}
