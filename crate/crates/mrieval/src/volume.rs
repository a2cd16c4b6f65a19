//! 3D scalar volumes and integer label maps.
//!
//! Voxel data is stored x-fastest (`index = x + nx*(y + ny*z)`), matching the
//! on-disk order of the NIfTI payload. All operations are pure: they take
//! references and return new values.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::regions::RegionTable;

/// Row-major 4x4 voxel-to-world transform.
pub type Affine = [[f64; 4]; 4];

pub fn affine_from_spacing(spacing: [f64; 3]) -> Affine {
    [
        [spacing[0], 0.0, 0.0, 0.0],
        [0.0, spacing[1], 0.0, 0.0],
        [0.0, 0.0, spacing[2], 0.0],
        [0.0, 0.0, 0.0, 1.0],
    ]
}

/// A 3D grid of f32 intensities plus geometry metadata.
#[derive(Debug, Clone, PartialEq)]
pub struct Volume {
    pub data: Vec<f32>,
    pub shape: [usize; 3],
    pub spacing: [f64; 3],
    pub affine: Affine,
    pub description: String,
}

/// A 3D grid of non-negative region codes plus the table naming them.
/// Code 0 is background.
#[derive(Debug, Clone, PartialEq)]
pub struct LabelMap {
    pub data: Vec<u32>,
    pub shape: [usize; 3],
    pub spacing: [f64; 3],
    pub affine: Affine,
    pub description: String,
    pub table: RegionTable,
}

fn check_grid(len: usize, shape: [usize; 3], spacing: [f64; 3]) -> Result<()> {
    for (axis, &n) in shape.iter().enumerate() {
        if n == 0 {
            return Err(Error::BadDimension {
                axis,
                value: 0,
                offset: 0,
            });
        }
    }
    if len != shape[0] * shape[1] * shape[2] {
        return Err(Error::ShapeMismatch {
            a: [len, 0, 0],
            b: shape,
        });
    }
    for (axis, &s) in spacing.iter().enumerate() {
        if !(s.is_finite() && s > 0.0) {
            return Err(Error::BadSpacing {
                axis,
                value: s as f32,
                offset: 0,
            });
        }
    }
    Ok(())
}

impl Volume {
    /// Background fill used when padding normalized volumes.
    pub const DEFAULT_FILL: f32 = -1.0;

    pub fn new(data: Vec<f32>, shape: [usize; 3], spacing: [f64; 3]) -> Result<Self> {
        check_grid(data.len(), shape, spacing)?;
        Ok(Volume {
            data,
            shape,
            spacing,
            affine: affine_from_spacing(spacing),
            description: String::new(),
        })
    }

    pub fn filled(value: f32, shape: [usize; 3], spacing: [f64; 3]) -> Result<Self> {
        Volume::new(vec![value; shape[0] * shape[1] * shape[2]], shape, spacing)
    }

    #[inline]
    pub fn index(&self, x: usize, y: usize, z: usize) -> usize {
        x + self.shape[0] * (y + self.shape[1] * z)
    }

    #[inline]
    pub fn at(&self, x: usize, y: usize, z: usize) -> f32 {
        self.data[self.index(x, y, z)]
    }

    pub fn voxel_volume_mm3(&self) -> f64 {
        self.spacing[0] * self.spacing[1] * self.spacing[2]
    }

    /// Affine rescale of all intensities onto [-1, 1]; value `min` maps to -1
    /// and `max` to +1 exactly. Errors on constant input.
    pub fn normalize_intensity(&self) -> Result<Volume> {
        let mut lo = f32::INFINITY;
        let mut hi = f32::NEG_INFINITY;
        for &v in &self.data {
            if !v.is_finite() {
                return Err(Error::NonFinite {
                    context: "volume intensities".into(),
                });
            }
            lo = lo.min(v);
            hi = hi.max(v);
        }
        if lo == hi {
            return Err(Error::ConstantVolume);
        }
        let range = (hi - lo) as f64;
        let data = self
            .data
            .iter()
            .map(|&v| (2.0 * ((v - lo) as f64) / range - 1.0) as f32)
            .collect();
        Ok(Volume {
            data,
            shape: self.shape,
            spacing: self.spacing,
            affine: self.affine,
            description: self.description.clone(),
        })
    }

    /// Center the volume inside `target`, filling new voxels with `fill`.
    /// An odd margin puts the extra voxel on the high-index side. The affine
    /// translation shifts so original voxels keep their world coordinates.
    pub fn pad_to_shape(&self, target: [usize; 3], fill: f32) -> Result<Volume> {
        let (data, affine) = pad_grid(
            &self.data,
            self.shape,
            &self.affine,
            target,
            fill,
        )?;
        Ok(Volume {
            data,
            shape: target,
            spacing: self.spacing,
            affine,
            description: self.description.clone(),
        })
    }

    pub fn intensity_range(&self) -> (f32, f32) {
        let mut lo = f32::INFINITY;
        let mut hi = f32::NEG_INFINITY;
        for &v in &self.data {
            lo = lo.min(v);
            hi = hi.max(v);
        }
        (lo, hi)
    }
}

impl LabelMap {
    pub fn new(data: Vec<u32>, shape: [usize; 3], spacing: [f64; 3]) -> Result<Self> {
        check_grid(data.len(), shape, spacing)?;
        Ok(LabelMap {
            data,
            shape,
            spacing,
            affine: affine_from_spacing(spacing),
            description: String::new(),
            table: RegionTable::empty(),
        })
    }

    #[inline]
    pub fn index(&self, x: usize, y: usize, z: usize) -> usize {
        x + self.shape[0] * (y + self.shape[1] * z)
    }

    #[inline]
    pub fn at(&self, x: usize, y: usize, z: usize) -> u32 {
        self.data[self.index(x, y, z)]
    }

    pub fn voxel_volume_mm3(&self) -> f64 {
        self.spacing[0] * self.spacing[1] * self.spacing[2]
    }

    /// Attach a region table; returns the sorted list of nonzero codes present
    /// in the data but absent from the table.
    pub fn attach_table(&mut self, table: RegionTable) -> Vec<u32> {
        let mut unknown: Vec<u32> = self
            .data
            .iter()
            .copied()
            .filter(|&c| c != 0 && table.lookup(c).is_none())
            .collect();
        unknown.sort_unstable();
        unknown.dedup();
        self.table = table;
        unknown
    }

    pub fn pad_to_shape(&self, target: [usize; 3], fill: u32) -> Result<LabelMap> {
        let (data, affine) = pad_grid(
            &self.data,
            self.shape,
            &self.affine,
            target,
            fill,
        )?;
        Ok(LabelMap {
            data,
            shape: target,
            spacing: self.spacing,
            affine,
            description: self.description.clone(),
            table: self.table.clone(),
        })
    }
}

fn pad_grid<T: Copy>(
    data: &[T],
    shape: [usize; 3],
    affine: &Affine,
    target: [usize; 3],
    fill: T,
) -> Result<(Vec<T>, Affine)> {
    let mut low = [0usize; 3];
    for axis in 0..3 {
        if target[axis] < shape[axis] {
            return Err(Error::PadTargetTooSmall {
                axis,
                current: shape,
                target,
            });
        }
        // extra voxel of an odd margin goes to the high-index side
        low[axis] = (target[axis] - shape[axis]) / 2;
    }
    let mut out = vec![fill; target[0] * target[1] * target[2]];
    for z in 0..shape[2] {
        for y in 0..shape[1] {
            let src = shape[0] * (y + shape[1] * z);
            let dst = low[0] + target[0] * ((y + low[1]) + target[1] * (z + low[2]));
            out[dst..dst + shape[0]].copy_from_slice(&data[src..src + shape[0]]);
        }
    }
    // original voxel i sits at output index i+low, so translate by -A*low
    let mut new_affine = *affine;
    for r in 0..3 {
        let shift: f64 = (0..3).map(|c| affine[r][c] * low[c] as f64).sum();
        new_affine[r][3] -= shift;
    }
    Ok((out, new_affine))
}

// ---------------------------------------------------------------------------
// geometry validation
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct GeometryIssue {
    pub field: String,
    pub expected: String,
    pub observed: String,
}

/// Report-valued result of a geometry check; `conforms` iff `issues` is empty.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GeometryReport {
    pub conforms: bool,
    pub issues: Vec<GeometryIssue>,
}

impl GeometryReport {
    fn from_issues(issues: Vec<GeometryIssue>) -> Self {
        GeometryReport {
            conforms: issues.is_empty(),
            issues,
        }
    }
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct ExpectedGeometry {
    pub shape: [usize; 3],
    pub spacing: [f64; 3],
    pub tol: f64,
}

impl Default for ExpectedGeometry {
    fn default() -> Self {
        ExpectedGeometry {
            shape: [144, 192, 144],
            spacing: [1.0, 1.0, 1.0],
            tol: 0.01,
        }
    }
}

fn geometry_issues(
    shape: [usize; 3],
    spacing: [f64; 3],
    expected: &ExpectedGeometry,
) -> Vec<GeometryIssue> {
    let mut issues = Vec::new();
    for (axis, (&observed, &wanted)) in shape.iter().zip(&expected.shape).enumerate() {
        if observed != wanted {
            issues.push(GeometryIssue {
                field: format!("shape[{axis}]"),
                expected: wanted.to_string(),
                observed: observed.to_string(),
            });
        }
    }
    for (axis, (&observed, &wanted)) in spacing.iter().zip(&expected.spacing).enumerate() {
        if (observed - wanted).abs() > expected.tol {
            issues.push(GeometryIssue {
                field: format!("spacing[{axis}]"),
                expected: wanted.to_string(),
                observed: observed.to_string(),
            });
        }
    }
    issues
}

/// Check shape, spacing (within `tol` mm), and, for volumes, that intensities
/// stay inside [-1-tol, 1+tol].
pub fn validate_geometry(v: &Volume, expected: &ExpectedGeometry) -> GeometryReport {
    let mut issues = geometry_issues(v.shape, v.spacing, expected);
    let (lo, hi) = v.intensity_range();
    if (lo as f64) < -1.0 - expected.tol || (hi as f64) > 1.0 + expected.tol {
        issues.push(GeometryIssue {
            field: "intensity_range".into(),
            expected: format!("[-1-{0}, 1+{0}]", expected.tol),
            observed: format!("[{lo}, {hi}]"),
        });
    }
    GeometryReport::from_issues(issues)
}

pub fn validate_label_geometry(m: &LabelMap, expected: &ExpectedGeometry) -> GeometryReport {
    GeometryReport::from_issues(geometry_issues(m.shape, m.spacing, expected))
}
