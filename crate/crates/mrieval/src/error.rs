//! Crate-wide error type.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    // ---- NIfTI parsing / writing ----
    #[error("bad magic at offset {offset}")]
    BadMagic { offset: usize },
    #[error("unsupported datatype code {code} at offset {offset}")]
    UnsupportedDatatype { code: i16, offset: usize },
    #[error("dim[0] must be 3, found {dim0} at offset {offset}")]
    BadDimCount { dim0: i16, offset: usize },
    #[error("header truncated: stream has {len} bytes, need at least 348")]
    HeaderTooShort { len: usize },
    #[error("truncated payload at offset {offset}: need {needed} more bytes")]
    TruncatedPayload { offset: usize, needed: usize },
    #[error("invalid dimension {value} for axis {axis} at offset {offset}")]
    BadDimension { axis: usize, value: i16, offset: usize },
    #[error("invalid voxel spacing {value} for axis {axis} at offset {offset}")]
    BadSpacing { axis: usize, value: f32, offset: usize },
    #[error("negative value {value} at voxel {index} cannot be a label code")]
    NegativeLabel { value: i64, index: usize },
    #[error("integer stream with scl_slope={slope}, scl_inter={inter} cannot be a label map")]
    ScaledLabels { slope: f32, inter: f32 },
    #[error("label code {code} exceeds the int16 range of the output datatype")]
    LabelOverflow { code: u32 },
    #[error("cannot write a zero-sized volume")]
    EmptyVolume,
    #[error("gzip stream is corrupt: {0}")]
    Gzip(String),

    // ---- volume operations ----
    #[error("volume is constant; intensity normalization is undefined")]
    ConstantVolume,
    #[error("target shape {target:?} is smaller than input {current:?} on axis {axis}")]
    PadTargetTooSmall {
        axis: usize,
        current: [usize; 3],
        target: [usize; 3],
    },
    #[error("shape mismatch: {a:?} vs {b:?}")]
    ShapeMismatch { a: [usize; 3], b: [usize; 3] },

    // ---- region table ----
    #[error("region table line {line}: {reason}")]
    BadRegionTable { line: usize, reason: String },
    #[error("label map has no region table attached")]
    MissingRegionTable,
    #[error("label map contains no nonzero voxels")]
    EmptyLabelMap,

    // ---- metrics ----
    #[error("embedding set needs at least 2 rows, found {n}")]
    TooFewRows { n: usize },
    #[error("embedding dimension mismatch: {a} vs {b}")]
    DimMismatch { a: usize, b: usize },
    #[error("non-finite value in {context}")]
    NonFinite { context: String },
    #[error("median-heuristic bandwidth is degenerate: all pooled points are identical")]
    DegenerateBandwidth,
    #[error("kernel bandwidth must be positive, found {0}")]
    BadBandwidth(f64),
    #[error("volume of shape {shape:?} is too small for a {scales}-scale pyramid")]
    PyramidTooSmall { shape: [usize; 3], scales: usize },
    #[error("negative {term} term {value} at scale {scale}")]
    NegativeSsimTerm {
        term: &'static str,
        value: f64,
        scale: usize,
    },
    #[error("requested {requested} pairs but only {available} distinct pairs exist")]
    TooManyPairs { requested: u64, available: u64 },
    #[error("ms-ssim weights: {0}")]
    BadMsSsimSpec(String),

    // ---- anatomy ----
    #[error("need at least {min} subjects, found {n}")]
    TooFewSubjects { n: usize, min: usize },
    #[error("ICV variance is zero across the reference set; regression is degenerate")]
    DegenerateIcv,
    #[error("region {0:?} missing from the regression fit")]
    RegionMissingFromFit(String),
    #[error("sample needs at least 2 values, found {n}")]
    TooFewValues { n: usize },
    #[error("pooled standard deviation is zero with unequal means: infinite effect size")]
    InfiniteEffect,
    #[error("no shared region keys between the two sets")]
    NoSharedRegions,

    // ---- QC gating ----
    #[error("QC record {subject:?}: missing region {region:?}")]
    MissingQcRegion { subject: String, region: String },
    #[error("QC record {subject:?}: score {score} for {region:?} outside [0, 1]")]
    QcScoreOutOfRange {
        subject: String,
        region: String,
        score: f64,
    },
    #[error("QC record {subject:?}: unexpected region {region:?}")]
    UnexpectedQcRegion { subject: String, region: String },
    #[error(
        "no grid threshold satisfies the target: {failed} of {total} records fail even at {smallest}"
    )]
    CalibrationImpossible {
        failed: usize,
        total: usize,
        smallest: f64,
    },
    #[error("empty record set")]
    EmptyRecords,
    #[error("{what} must lie in (0, 1), found {value}")]
    BadFraction { what: &'static str, value: f64 },

    // ---- phantoms ----
    #[error("phantom region {a:?} and {b:?} have overlapping bounds; ground truth requires disjoint ellipsoids")]
    OverlappingRegions { a: String, b: String },
    #[error("phantom region {key:?} extends outside the volume on axis {axis}")]
    RegionOutOfBounds { key: String, axis: usize },
    #[error("phantom spec: {0}")]
    BadPhantomSpec(String),

    // ---- files / report / config ----
    #[error("config: {0}")]
    Config(String),
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: {reason}")]
    BadFile { path: String, reason: String },
    #[error("{0} directory contains no NIfTI volumes")]
    EmptyDirectory(String),
    #[error("real volume {path} does not conform to the expected geometry: {issues}")]
    NonconformingReal { path: String, issues: String },
    #[error("report: {0}")]
    Report(String),
}

impl Error {
    /// True for errors caused by user input (files, config, CLI values) as
    /// opposed to internal failures. Drives the CLI exit-code mapping.
    pub fn is_input_error(&self) -> bool {
        !matches!(self, Error::Report(_))
    }

    pub(crate) fn io(path: impl Into<String>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
