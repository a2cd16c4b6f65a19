//! Deterministic ellipsoid phantoms with analytically known region volumes.
//!
//! Phantoms give every metric path a ground truth that ships with the
//! repository: ellipsoid volumes are (4/3) pi abc, so voxel counting,
//! residualization and effect sizes can all be checked without real data.
//! Ellipsoids must be disjoint (checked via bounding boxes) to keep the
//! analytic volumes exact.

use std::collections::BTreeMap;

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::regions::{RegionEntry, RegionGroup, RegionTable};
use crate::ssim::{filter_separable, gaussian_window};
use crate::volume::{LabelMap, Volume};

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PhantomRegion {
    pub merge_key: String,
    pub code: u32,
    pub center_mm: [f64; 3],
    pub semi_axes_mm: [f64; 3],
    /// Mean intensity inside the ellipsoid, in [-1, 1].
    pub mean_intensity: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PhantomSpec {
    pub shape: [usize; 3],
    pub spacing: [f64; 3],
    pub regions: Vec<PhantomRegion>,
    pub noise_sigma: f64,
    pub seed: u64,
}

impl PhantomSpec {
    pub fn validate(&self) -> Result<()> {
        if self.regions.is_empty() {
            return Err(Error::BadPhantomSpec("no regions".into()));
        }
        if !self.noise_sigma.is_finite() || self.noise_sigma < 0.0 {
            return Err(Error::BadPhantomSpec(format!(
                "noise_sigma {} must be finite and >= 0",
                self.noise_sigma
            )));
        }
        let mut codes = std::collections::BTreeSet::new();
        for r in &self.regions {
            if r.code == 0 {
                return Err(Error::BadPhantomSpec(format!(
                    "region {:?}: code 0 is reserved for background",
                    r.merge_key
                )));
            }
            if !codes.insert(r.code) {
                return Err(Error::BadPhantomSpec(format!("duplicate code {}", r.code)));
            }
            if !(-1.0..=1.0).contains(&r.mean_intensity) {
                return Err(Error::BadPhantomSpec(format!(
                    "region {:?}: mean intensity {} outside [-1, 1]",
                    r.merge_key, r.mean_intensity
                )));
            }
            for axis in 0..3 {
                if r.semi_axes_mm[axis] <= 0.0 {
                    return Err(Error::BadPhantomSpec(format!(
                        "region {:?}: semi-axis {} must be positive",
                        r.merge_key, axis
                    )));
                }
                let extent = self.shape[axis] as f64 * self.spacing[axis];
                if r.center_mm[axis] - r.semi_axes_mm[axis] < 0.0
                    || r.center_mm[axis] + r.semi_axes_mm[axis] > extent
                {
                    return Err(Error::RegionOutOfBounds {
                        key: r.merge_key.clone(),
                        axis,
                    });
                }
            }
        }
        // disjointness via axis-aligned bounding boxes: conservative but keeps
        // the analytic ground truth exact
        for i in 0..self.regions.len() {
            for j in i + 1..self.regions.len() {
                let (a, b) = (&self.regions[i], &self.regions[j]);
                let overlap = (0..3).all(|axis| {
                    let (alo, ahi) = (
                        a.center_mm[axis] - a.semi_axes_mm[axis],
                        a.center_mm[axis] + a.semi_axes_mm[axis],
                    );
                    let (blo, bhi) = (
                        b.center_mm[axis] - b.semi_axes_mm[axis],
                        b.center_mm[axis] + b.semi_axes_mm[axis],
                    );
                    alo < bhi && blo < ahi
                });
                if overlap {
                    return Err(Error::OverlappingRegions {
                        a: a.merge_key.clone(),
                        b: b.merge_key.clone(),
                    });
                }
            }
        }
        Ok(())
    }

    pub fn region_table(&self) -> RegionTable {
        let entries = self
            .regions
            .iter()
            .map(|r| RegionEntry {
                code: r.code,
                name: r.merge_key.clone(),
                group: RegionGroup::Subcortical,
                merge_key: r.merge_key.clone(),
                in_icv: true,
            })
            .collect();
        RegionTable::from_entries(entries).expect("validated spec yields a valid table")
    }
}

/// Voxel centers sit at (i + 0.5) * spacing; a voxel takes the code of the
/// first listed ellipsoid containing its center.
pub fn generate_phantom(
    spec: &PhantomSpec,
) -> Result<(Volume, LabelMap, BTreeMap<String, f64>)> {
    spec.validate()?;
    let [nx, ny, nz] = spec.shape;
    let n = nx * ny * nz;
    let mut codes = vec![0u32; n];
    let mut intensities = vec![-1.0f32; n];

    for z in 0..nz {
        for y in 0..ny {
            for x in 0..nx {
                let p = [
                    (x as f64 + 0.5) * spec.spacing[0],
                    (y as f64 + 0.5) * spec.spacing[1],
                    (z as f64 + 0.5) * spec.spacing[2],
                ];
                let idx = x + nx * (y + ny * z);
                for r in &spec.regions {
                    let d: f64 = (0..3)
                        .map(|a| ((p[a] - r.center_mm[a]) / r.semi_axes_mm[a]).powi(2))
                        .sum();
                    if d <= 1.0 {
                        codes[idx] = r.code;
                        intensities[idx] = r.mean_intensity as f32;
                        break;
                    }
                }
            }
        }
    }

    if spec.noise_sigma > 0.0 {
        let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
        let normal = Normal::new(0.0, spec.noise_sigma)
            .map_err(|e| Error::BadPhantomSpec(e.to_string()))?;
        for v in &mut intensities {
            *v += normal.sample(&mut rng) as f32;
        }
    }

    let mut volume = Volume::new(intensities, spec.shape, spec.spacing)?;
    volume.description = format!("phantom seed={}", spec.seed);
    let mut labels = LabelMap::new(codes, spec.shape, spec.spacing)?;
    labels.description = volume.description.clone();
    labels.attach_table(spec.region_table());

    let mut truth = BTreeMap::new();
    for r in &spec.regions {
        let v = 4.0 / 3.0
            * std::f64::consts::PI
            * r.semi_axes_mm[0]
            * r.semi_axes_mm[1]
            * r.semi_axes_mm[2];
        *truth.entry(r.merge_key.clone()).or_insert(0.0) += v;
    }
    Ok((volume, labels, truth))
}

/// A generated family member: one subject's volume, labels and per-region
/// analytic truth.
#[derive(Debug, Clone)]
pub struct PhantomSubject {
    pub id: String,
    pub volume: Volume,
    pub labels: LabelMap,
    pub ground_truth: BTreeMap<String, f64>,
}

/// Generate `count` subjects from one base spec. Each subject jitters all
/// semi-axes by a common factor (a brain-size proxy) plus a smaller
/// per-region factor, both drawn from the subject's derived seed.
pub fn generate_family(spec: &PhantomSpec, count: usize, jitter: f64) -> Result<Vec<PhantomSubject>> {
    if !(0.0..1.0).contains(&jitter) {
        return Err(Error::BadPhantomSpec(format!(
            "jitter {jitter} must lie in [0, 1)"
        )));
    }
    let mut out = Vec::with_capacity(count);
    for i in 0..count {
        let mut subject_spec = spec.clone();
        subject_spec.seed = spec.seed.wrapping_add(i as u64);
        if jitter > 0.0 {
            let mut rng = ChaCha8Rng::seed_from_u64(subject_spec.seed ^ 0x9e37_79b9);
            let common = 1.0 + jitter * rng.random_range(-1.0..1.0);
            for region in &mut subject_spec.regions {
                let local = 1.0 + 0.3 * jitter * rng.random_range(-1.0..1.0);
                for axis in 0..3 {
                    region.semi_axes_mm[axis] *= common * local;
                }
            }
        }
        let (volume, labels, ground_truth) = generate_phantom(&subject_spec)?;
        out.push(PhantomSubject {
            id: format!("phantom{i:04}"),
            volume,
            labels,
            ground_truth,
        });
    }
    Ok(out)
}

/// Corruption families for metric-sensitivity tests.
pub enum PerturbKind<'a> {
    /// Gaussian smoothing with sigma = magnitude (voxels).
    Blur,
    /// Seeded speckle added only where the mask codes background.
    BackgroundArtifact { mask: &'a LabelMap },
    /// Radial dilation about a center by factor (1 + magnitude),
    /// nearest-neighbor resampled.
    RegionalScale { center_mm: [f64; 3] },
}

pub fn perturb_volume(
    v: &Volume,
    kind: &PerturbKind,
    magnitude: f64,
    seed: u64,
) -> Result<Volume> {
    if magnitude < 0.0 || !magnitude.is_finite() {
        return Err(Error::BadPhantomSpec(format!(
            "perturbation magnitude {magnitude} must be finite and >= 0"
        )));
    }
    if magnitude == 0.0 {
        return Ok(v.clone());
    }
    let mut out = v.clone();
    match kind {
        PerturbKind::Blur => {
            let radius = (3.0 * magnitude).ceil() as usize;
            let window = gaussian_window(2 * radius + 1, magnitude);
            let src: Vec<f64> = v.data.iter().map(|&x| x as f64).collect();
            let blurred = filter_separable(&src, v.shape, &window);
            out.data = blurred.into_iter().map(|x| x as f32).collect();
        }
        PerturbKind::BackgroundArtifact { mask } => {
            if mask.shape != v.shape {
                return Err(Error::ShapeMismatch {
                    a: v.shape,
                    b: mask.shape,
                });
            }
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let normal = Normal::new(0.0, magnitude)
                .map_err(|e| Error::BadPhantomSpec(e.to_string()))?;
            for (i, value) in out.data.iter_mut().enumerate() {
                // draw for every voxel so the noise field is mask independent
                let s = normal.sample(&mut rng) as f32;
                if mask.data[i] == 0 {
                    *value += s;
                }
            }
        }
        PerturbKind::RegionalScale { center_mm } => {
            out.data = remap_scale(&v.data, v.shape, v.spacing, *center_mm, magnitude);
        }
    }
    Ok(out)
}

/// Label-map counterpart of the regional-scale perturbation.
pub fn scale_label_region(
    m: &LabelMap,
    center_mm: [f64; 3],
    magnitude: f64,
) -> Result<LabelMap> {
    if magnitude < 0.0 || !magnitude.is_finite() {
        return Err(Error::BadPhantomSpec(format!(
            "perturbation magnitude {magnitude} must be finite and >= 0"
        )));
    }
    let mut out = m.clone();
    if magnitude > 0.0 {
        out.data = remap_scale(&m.data, m.shape, m.spacing, center_mm, magnitude);
    }
    Ok(out)
}

fn remap_scale<T: Copy>(
    data: &[T],
    shape: [usize; 3],
    spacing: [f64; 3],
    center_mm: [f64; 3],
    magnitude: f64,
) -> Vec<T> {
    let [nx, ny, nz] = shape;
    let factor = 1.0 + magnitude;
    let mut out = Vec::with_capacity(data.len());
    for z in 0..nz {
        for y in 0..ny {
            for x in 0..nx {
                let p = [
                    (x as f64 + 0.5) * spacing[0],
                    (y as f64 + 0.5) * spacing[1],
                    (z as f64 + 0.5) * spacing[2],
                ];
                let mut src = [0usize; 3];
                for a in 0..3 {
                    let q = center_mm[a] + (p[a] - center_mm[a]) / factor;
                    let i = (q / spacing[a] - 0.5).round();
                    src[a] = i.clamp(0.0, (shape[a] - 1) as f64) as usize;
                }
                out.push(data[src[0] + nx * (src[1] + ny * src[2])]);
            }
        }
    }
    out
}
