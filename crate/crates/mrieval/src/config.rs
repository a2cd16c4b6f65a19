//! Single-file TOML configuration: all paths, seeds, thresholds and the
//! region table reference live in one place so a run is reproducible from
//! the config alone.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::mmd::{Bandwidth, KernelSpec};
use crate::phantom::PhantomSpec;
use crate::qc::DEFAULT_QC_REGIONS;
use crate::ssim::MsSsimSpec;
use crate::volume::ExpectedGeometry;

#[derive(Debug, Clone, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields)]
pub struct PathsConfig {
    pub real_dir: Option<PathBuf>,
    pub synth_dir: Option<PathBuf>,
    /// Region table file; the bundled default table is used when absent.
    pub region_table: Option<PathBuf>,
    pub qc_real: Option<PathBuf>,
    pub qc_synth: Option<PathBuf>,
    pub labels_real_dir: Option<PathBuf>,
    pub labels_synth_dir: Option<PathBuf>,
    /// Pre-extracted regional volumes; alternative to the label dirs.
    pub region_volumes_real: Option<PathBuf>,
    pub region_volumes_synth: Option<PathBuf>,
    pub out_dir: Option<PathBuf>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GeometryConfig {
    pub shape: [usize; 3],
    pub spacing: [f64; 3],
    pub tol: f64,
}

impl Default for GeometryConfig {
    fn default() -> Self {
        let e = ExpectedGeometry::default();
        GeometryConfig {
            shape: e.shape,
            spacing: e.spacing,
            tol: e.tol,
        }
    }
}

impl GeometryConfig {
    pub fn expected(&self) -> ExpectedGeometry {
        ExpectedGeometry {
            shape: self.shape,
            spacing: self.spacing,
            tol: self.tol,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MsSsimConfig {
    pub scales: usize,
    pub weights: Vec<f64>,
    pub window: usize,
    pub sigma: f64,
    pub k1: f64,
    pub k2: f64,
    pub dynamic_range: f64,
    /// Sampled unordered pairs per set; clamped to the number available.
    pub num_pairs: u64,
    /// Anchor MS-SSIM measured on the real set; computed when absent.
    pub real_reference: Option<f64>,
}

impl Default for MsSsimConfig {
    fn default() -> Self {
        let s = MsSsimSpec::default();
        MsSsimConfig {
            scales: s.scales,
            weights: s.weights,
            window: s.window,
            sigma: s.sigma,
            k1: s.k1,
            k2: s.k2,
            dynamic_range: s.dynamic_range,
            num_pairs: 1000,
            real_reference: None,
        }
    }
}

impl MsSsimConfig {
    pub fn spec(&self) -> MsSsimSpec {
        MsSsimSpec {
            scales: self.scales,
            weights: self.weights.clone(),
            window: self.window,
            sigma: self.sigma,
            k1: self.k1,
            k2: self.k2,
            dynamic_range: self.dynamic_range,
        }
    }
}

/// Bandwidth as written in TOML: a number or "median-heuristic".
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(untagged)]
pub enum BandwidthConfig {
    Value(f64),
    Named(String),
}

impl BandwidthConfig {
    fn resolve(&self) -> Result<Bandwidth> {
        match self {
            BandwidthConfig::Value(v) => Ok(Bandwidth::Fixed(*v)),
            BandwidthConfig::Named(s) if s == "median-heuristic" => {
                Ok(Bandwidth::MedianHeuristic)
            }
            BandwidthConfig::Named(s) => Err(Error::Config(format!(
                "unknown bandwidth {s:?}; use a number or \"median-heuristic\""
            ))),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MmdConfig {
    /// Kernel for feature-space MMD: gaussian | linear | polynomial.
    pub kernel: String,
    pub bandwidth: BandwidthConfig,
    pub degree: f64,
    pub coef: f64,
    /// Compute MMD over raw flattened voxels as well.
    pub image_space: bool,
    /// Kernel for the image-space path; raw-voxel statistics are usually
    /// left unnormalized, hence linear.
    pub image_kernel: String,
}

impl Default for MmdConfig {
    fn default() -> Self {
        MmdConfig {
            kernel: "gaussian".into(),
            bandwidth: BandwidthConfig::Named("median-heuristic".into()),
            degree: 3.0,
            coef: 1.0,
            image_space: true,
            image_kernel: "linear".into(),
        }
    }
}

impl MmdConfig {
    fn kernel_by_name(&self, name: &str) -> Result<KernelSpec> {
        match name {
            "gaussian" => Ok(KernelSpec::Gaussian {
                bandwidth: self.bandwidth.resolve()?,
            }),
            "linear" => Ok(KernelSpec::Linear),
            "polynomial" => Ok(KernelSpec::Polynomial {
                degree: self.degree,
                coef: self.coef,
            }),
            other => Err(Error::Config(format!("unknown kernel {other:?}"))),
        }
    }

    pub fn feature_kernel(&self) -> Result<KernelSpec> {
        self.kernel_by_name(&self.kernel)
    }

    pub fn image_kernel(&self) -> Result<KernelSpec> {
        self.kernel_by_name(&self.image_kernel)
    }
}

/// One encoder's embedding files for both sets.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EmbeddingEntry {
    pub tag: String,
    pub real: PathBuf,
    pub synth: PathBuf,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ToyEmbedderConfig {
    pub enabled: bool,
    pub dim: usize,
    pub seed: u64,
}

impl Default for ToyEmbedderConfig {
    fn default() -> Self {
        ToyEmbedderConfig {
            enabled: false,
            dim: 32,
            seed: 7,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GateConfigToml {
    /// Fixed threshold; when absent it is calibrated on the real records.
    pub threshold: Option<f64>,
    pub target_real_fail_fraction: f64,
    /// Defaults to 1 - target_real_fail_fraction when absent.
    pub min_model_pass_rate: Option<f64>,
    pub grid_step: f64,
    pub region_names: Vec<String>,
}

impl Default for GateConfigToml {
    fn default() -> Self {
        GateConfigToml {
            threshold: None,
            target_real_fail_fraction: 0.05,
            min_model_pass_rate: None,
            grid_step: 0.01,
            region_names: DEFAULT_QC_REGIONS.iter().map(|s| s.to_string()).collect(),
        }
    }
}

impl GateConfigToml {
    pub fn effective_min_pass_rate(&self) -> f64 {
        self.min_model_pass_rate
            .unwrap_or(1.0 - self.target_real_fail_fraction)
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AnatomyConfig {
    pub flag_threshold: f64,
    /// Which set the ICV regression is fit on: "real" or "pooled".
    pub fit_on: String,
}

impl Default for AnatomyConfig {
    fn default() -> Self {
        AnatomyConfig {
            flag_threshold: crate::anatomy::DEFAULT_FLAG_THRESHOLD,
            fit_on: "real".into(),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PhantomConfig {
    pub shape: [usize; 3],
    pub spacing: [f64; 3],
    pub regions: Vec<crate::phantom::PhantomRegion>,
    pub noise_sigma: f64,
    pub seed: u64,
    pub count: usize,
    pub jitter: f64,
    /// Also write a QC CSV with perfect scores, making the family usable as
    /// an end-to-end protocol input.
    pub emit_qc: bool,
}

impl Default for PhantomConfig {
    fn default() -> Self {
        PhantomConfig {
            shape: [32, 32, 32],
            spacing: [1.0, 1.0, 1.0],
            regions: vec![crate::phantom::PhantomRegion {
                merge_key: "blob".into(),
                code: 1,
                center_mm: [16.0, 16.0, 16.0],
                semi_axes_mm: [8.0, 6.0, 4.0],
                mean_intensity: 0.5,
            }],
            noise_sigma: 0.05,
            seed: 11,
            count: 12,
            jitter: 0.08,
            emit_qc: true,
        }
    }
}

impl PhantomConfig {
    pub fn spec(&self) -> PhantomSpec {
        PhantomSpec {
            shape: self.shape,
            spacing: self.spacing,
            regions: self.regions.clone(),
            noise_sigma: self.noise_sigma,
            seed: self.seed,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    pub model_name: String,
    pub seed: u64,
    pub paths: PathsConfig,
    pub geometry: GeometryConfig,
    pub msssim: MsSsimConfig,
    pub mmd: MmdConfig,
    pub embeddings: Vec<EmbeddingEntry>,
    pub toy_embedder: ToyEmbedderConfig,
    pub gate: GateConfigToml,
    pub anatomy: AnatomyConfig,
    pub phantom: PhantomConfig,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            model_name: "model".into(),
            seed: 42,
            paths: PathsConfig::default(),
            geometry: GeometryConfig::default(),
            msssim: MsSsimConfig::default(),
            mmd: MmdConfig::default(),
            embeddings: Vec::new(),
            toy_embedder: ToyEmbedderConfig::default(),
            gate: GateConfigToml::default(),
            anatomy: AnatomyConfig::default(),
            phantom: PhantomConfig::default(),
        }
    }
}

impl EvalConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: EvalConfig =
            toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        if cfg.anatomy.fit_on != "real" && cfg.anatomy.fit_on != "pooled" {
            return Err(Error::Config(format!(
                "anatomy.fit_on must be \"real\" or \"pooled\", found {:?}",
                cfg.anatomy.fit_on
            )));
        }
        Ok(cfg)
    }

    /// Load a config file; also returns the SHA-256 of the raw bytes for the
    /// report provenance.
    pub fn load(path: &Path) -> Result<(Self, String)> {
        let bytes =
            std::fs::read(path).map_err(|e| Error::io(path.display().to_string(), e))?;
        let text = String::from_utf8(bytes.clone())
            .map_err(|_| Error::Config(format!("{}: not UTF-8", path.display())))?;
        let cfg = Self::from_toml(&text)?;
        let mut hasher = Sha256::new();
        hasher.update(&bytes);
        let digest = hasher.finalize();
        let hex: String = digest.iter().map(|b| format!("{b:02x}")).collect();
        Ok((cfg, hex))
    }

    /// Paths in the config are resolved relative to the config file's parent.
    pub fn resolve_paths(&mut self, config_dir: &Path) {
        let fix = |p: &mut Option<PathBuf>| {
            if let Some(path) = p {
                if path.is_relative() {
                    *path = config_dir.join(&path);
                }
            }
        };
        fix(&mut self.paths.real_dir);
        fix(&mut self.paths.synth_dir);
        fix(&mut self.paths.region_table);
        fix(&mut self.paths.qc_real);
        fix(&mut self.paths.qc_synth);
        fix(&mut self.paths.labels_real_dir);
        fix(&mut self.paths.labels_synth_dir);
        fix(&mut self.paths.region_volumes_real);
        fix(&mut self.paths.region_volumes_synth);
        fix(&mut self.paths.out_dir);
        for entry in &mut self.embeddings {
            if entry.real.is_relative() {
                entry.real = config_dir.join(&entry.real);
            }
            if entry.synth.is_relative() {
                entry.synth = config_dir.join(&entry.synth);
            }
        }
    }
}
