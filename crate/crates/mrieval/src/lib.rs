//! Evaluation toolkit for sets of generated 3D brain MRIs.
//!
//! Given a directory of real reference MRIs and a directory of synthetic
//! MRIs (plus segmentation outputs produced by an external segmenter), the
//! library computes:
//!
//! * classic distribution metrics — pairwise MS-SSIM, Fréchet distance over
//!   embedding sets, and unbiased kernel MMD in feature or image space;
//! * a segmentation-reliability gate — a QC threshold calibrated so that a
//!   chosen fraction of the real set fails, applied per MRI and per model;
//! * anatomical plausibility — regional volumes from label maps,
//!   residualized against total intracranial volume and compared region by
//!   region with Cohen's d.
//!
//! Models whose segmentations are too unreliable are never assigned
//! plausibility scores; the report type makes that state unrepresentable.
//!
//! Everything is deterministic: seeds are explicit, reductions are
//! order-fixed, and re-running a protocol byte-reproduces the JSON report.

pub mod anatomy;
pub mod config;
pub mod embed;
pub mod error;
pub mod frechet;
pub mod mmd;
pub mod nifti;
pub mod phantom;
pub mod qc;
pub mod regions;
pub mod report;
pub mod ssim;
pub mod util;
pub mod volume;

pub use error::{Error, Result};
pub use volume::{LabelMap, Volume};
