//! NIfTI-1 reading and writing.
//!
//! Supports the single-file layout (348-byte little-endian header, magic
//! `n+1\0` or `ni1\0`, payload at `vox_offset`), optionally gzip-compressed.
//! Real-valued datatypes parse to [`Volume`], integer datatypes to
//! [`LabelMap`]. The affine is taken from the sform when `sform_code > 0`,
//! else from the qform quaternion, else from a pixdim-scaled identity.

use std::io::Read;

use crate::error::{Error, Result};
use crate::volume::{Affine, LabelMap, Volume};

const HEADER_LEN: usize = 348;
const MAGIC_OFFSET: usize = 344;
const DATATYPE_OFFSET: usize = 70;
const DIM_OFFSET: usize = 40;
const PIXDIM_OFFSET: usize = 76;

const DT_UINT8: i16 = 2;
const DT_INT16: i16 = 4;
const DT_INT32: i16 = 8;
const DT_FLOAT32: i16 = 16;
const DT_FLOAT64: i16 = 64;
const DT_UINT16: i16 = 512;

/// Either kind of parsed NIfTI stream.
#[derive(Debug, Clone)]
pub enum Parsed {
    Volume(Volume),
    Labels(LabelMap),
}

impl Parsed {
    pub fn shape(&self) -> [usize; 3] {
        match self {
            Parsed::Volume(v) => v.shape,
            Parsed::Labels(m) => m.shape,
        }
    }

    pub fn spacing(&self) -> [f64; 3] {
        match self {
            Parsed::Volume(v) => v.spacing,
            Parsed::Labels(m) => m.spacing,
        }
    }

    pub fn into_volume(self) -> Option<Volume> {
        match self {
            Parsed::Volume(v) => Some(v),
            Parsed::Labels(_) => None,
        }
    }

    pub fn into_labels(self) -> Option<LabelMap> {
        match self {
            Parsed::Labels(m) => Some(m),
            Parsed::Volume(_) => None,
        }
    }
}

fn read_i16(b: &[u8], off: usize) -> i16 {
    i16::from_le_bytes([b[off], b[off + 1]])
}

fn read_f32(b: &[u8], off: usize) -> f32 {
    f32::from_le_bytes([b[off], b[off + 1], b[off + 2], b[off + 3]])
}

fn is_gzip(bytes: &[u8]) -> bool {
    bytes.len() >= 2 && bytes[0] == 0x1f && bytes[1] == 0x8b
}

fn gunzip(bytes: &[u8]) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    flate2::read::GzDecoder::new(bytes)
        .read_to_end(&mut out)
        .map_err(|e| Error::Gzip(e.to_string()))?;
    Ok(out)
}

/// Parse a `.nii` / `.nii.gz` byte stream.
pub fn parse_nifti(bytes: &[u8]) -> Result<Parsed> {
    let decompressed;
    let raw: &[u8] = if is_gzip(bytes) {
        decompressed = gunzip(bytes)?;
        &decompressed
    } else {
        bytes
    };

    if raw.len() < HEADER_LEN {
        return Err(Error::HeaderTooShort { len: raw.len() });
    }
    let magic = &raw[MAGIC_OFFSET..MAGIC_OFFSET + 4];
    if magic != b"n+1\0" && magic != b"ni1\0" {
        return Err(Error::BadMagic {
            offset: MAGIC_OFFSET,
        });
    }

    let dim0 = read_i16(raw, DIM_OFFSET);
    if dim0 != 3 {
        return Err(Error::BadDimCount {
            dim0,
            offset: DIM_OFFSET,
        });
    }
    let mut shape = [0usize; 3];
    for (axis, extent) in shape.iter_mut().enumerate() {
        let d = read_i16(raw, DIM_OFFSET + 2 * (axis + 1));
        if d < 1 {
            return Err(Error::BadDimension {
                axis,
                value: d,
                offset: DIM_OFFSET + 2 * (axis + 1),
            });
        }
        *extent = d as usize;
    }
    let mut spacing = [0f64; 3];
    for (axis, step) in spacing.iter_mut().enumerate() {
        let p = read_f32(raw, PIXDIM_OFFSET + 4 * (axis + 1));
        if !p.is_finite() || p <= 0.0 {
            return Err(Error::BadSpacing {
                axis,
                value: p,
                offset: PIXDIM_OFFSET + 4 * (axis + 1),
            });
        }
        *step = p as f64;
    }

    let datatype = read_i16(raw, DATATYPE_OFFSET);
    let voxel_bytes: usize = match datatype {
        DT_UINT8 => 1,
        DT_INT16 | DT_UINT16 => 2,
        DT_INT32 | DT_FLOAT32 => 4,
        DT_FLOAT64 => 8,
        code => {
            return Err(Error::UnsupportedDatatype {
                code,
                offset: DATATYPE_OFFSET,
            })
        }
    };

    let scl_slope = read_f32(raw, 112);
    let scl_inter = read_f32(raw, 116);
    let affine = affine_from_header(raw, spacing);
    let description = {
        let field = &raw[148..228];
        let end = field.iter().position(|&b| b == 0).unwrap_or(field.len());
        String::from_utf8_lossy(&field[..end]).into_owned()
    };

    let nvox = shape[0] * shape[1] * shape[2];
    let vox_offset = read_f32(raw, 108);
    let payload_start = if vox_offset.is_finite() && vox_offset as usize >= HEADER_LEN {
        vox_offset as usize
    } else {
        HEADER_LEN
    };
    let payload_len = nvox * voxel_bytes;
    if raw.len() < payload_start + payload_len {
        return Err(Error::TruncatedPayload {
            offset: raw.len(),
            needed: payload_start + payload_len - raw.len(),
        });
    }
    let payload = &raw[payload_start..payload_start + payload_len];

    match datatype {
        DT_FLOAT32 | DT_FLOAT64 => {
            let apply_scl = scl_slope != 0.0 && (scl_slope != 1.0 || scl_inter != 0.0);
            let mut data = Vec::with_capacity(nvox);
            for i in 0..nvox {
                let v = match datatype {
                    DT_FLOAT32 => read_f32(payload, 4 * i) as f64,
                    _ => f64::from_le_bytes(payload[8 * i..8 * i + 8].try_into().unwrap()),
                };
                let v = if apply_scl {
                    scl_slope as f64 * v + scl_inter as f64
                } else {
                    v
                };
                data.push(v as f32);
            }
            let mut vol = Volume::new(data, shape, spacing)?;
            vol.affine = affine;
            vol.description = description;
            Ok(Parsed::Volume(vol))
        }
        _ => {
            if scl_slope != 0.0 && (scl_slope != 1.0 || scl_inter != 0.0) {
                return Err(Error::ScaledLabels {
                    slope: scl_slope,
                    inter: scl_inter,
                });
            }
            let mut data = Vec::with_capacity(nvox);
            for i in 0..nvox {
                let v: i64 = match datatype {
                    DT_UINT8 => payload[i] as i64,
                    DT_INT16 => read_i16(payload, 2 * i) as i64,
                    DT_UINT16 => u16::from_le_bytes([payload[2 * i], payload[2 * i + 1]]) as i64,
                    _ => i32::from_le_bytes(payload[4 * i..4 * i + 4].try_into().unwrap()) as i64,
                };
                if v < 0 {
                    return Err(Error::NegativeLabel { value: v, index: i });
                }
                data.push(v as u32);
            }
            let mut map = LabelMap::new(data, shape, spacing)?;
            map.affine = affine;
            map.description = description;
            Ok(Parsed::Labels(map))
        }
    }
}

fn affine_from_header(raw: &[u8], spacing: [f64; 3]) -> Affine {
    let sform_code = read_i16(raw, 254);
    if sform_code > 0 {
        let mut a = crate::volume::affine_from_spacing(spacing);
        for (r, base) in [(0usize, 280usize), (1, 296), (2, 312)] {
            for (c, cell) in a[r].iter_mut().enumerate() {
                *cell = read_f32(raw, base + 4 * c) as f64;
            }
        }
        a[3] = [0.0, 0.0, 0.0, 1.0];
        return a;
    }
    let qform_code = read_i16(raw, 252);
    if qform_code > 0 {
        return qform_affine(raw, spacing);
    }
    crate::volume::affine_from_spacing(spacing)
}

fn qform_affine(raw: &[u8], spacing: [f64; 3]) -> Affine {
    let b = read_f32(raw, 256) as f64;
    let c = read_f32(raw, 260) as f64;
    let d = read_f32(raw, 264) as f64;
    let a = (1.0 - b * b - c * c - d * d).max(0.0).sqrt();
    let qfac = if read_f32(raw, PIXDIM_OFFSET) < 0.0 {
        -1.0
    } else {
        1.0
    };
    let r = [
        [
            a * a + b * b - c * c - d * d,
            2.0 * (b * c - a * d),
            2.0 * (b * d + a * c),
        ],
        [
            2.0 * (b * c + a * d),
            a * a + c * c - b * b - d * d,
            2.0 * (c * d - a * b),
        ],
        [
            2.0 * (b * d - a * c),
            2.0 * (c * d + a * b),
            a * a + d * d - b * b - c * c,
        ],
    ];
    let offset = [
        read_f32(raw, 268) as f64,
        read_f32(raw, 272) as f64,
        read_f32(raw, 276) as f64,
    ];
    let mut out = [[0.0; 4]; 4];
    for row in 0..3 {
        out[row][0] = r[row][0] * spacing[0];
        out[row][1] = r[row][1] * spacing[1];
        out[row][2] = r[row][2] * spacing[2] * qfac;
        out[row][3] = offset[row];
    }
    out[3] = [0.0, 0.0, 0.0, 1.0];
    out
}

// ---------------------------------------------------------------------------
// writing
// ---------------------------------------------------------------------------

struct HeaderSpec<'a> {
    shape: [usize; 3],
    spacing: [f64; 3],
    affine: &'a Affine,
    description: &'a str,
    datatype: i16,
    bitpix: i16,
}

fn build_header(spec: &HeaderSpec) -> Vec<u8> {
    let mut h = vec![0u8; HEADER_LEN];
    let put_i32 = |h: &mut [u8], off: usize, v: i32| h[off..off + 4].copy_from_slice(&v.to_le_bytes());
    let put_i16 = |h: &mut [u8], off: usize, v: i16| h[off..off + 2].copy_from_slice(&v.to_le_bytes());
    let put_f32 = |h: &mut [u8], off: usize, v: f32| h[off..off + 4].copy_from_slice(&v.to_le_bytes());

    put_i32(&mut h, 0, HEADER_LEN as i32);
    h[39] = 0; // dim_info
    let dims: [i16; 8] = [
        3,
        spec.shape[0] as i16,
        spec.shape[1] as i16,
        spec.shape[2] as i16,
        1,
        1,
        1,
        1,
    ];
    for (i, &d) in dims.iter().enumerate() {
        put_i16(&mut h, DIM_OFFSET + 2 * i, d);
    }
    put_i16(&mut h, DATATYPE_OFFSET, spec.datatype);
    put_i16(&mut h, 72, spec.bitpix);
    let pixdims: [f32; 8] = [
        1.0,
        spec.spacing[0] as f32,
        spec.spacing[1] as f32,
        spec.spacing[2] as f32,
        0.0,
        0.0,
        0.0,
        0.0,
    ];
    for (i, &p) in pixdims.iter().enumerate() {
        put_f32(&mut h, PIXDIM_OFFSET + 4 * i, p);
    }
    put_f32(&mut h, 108, 352.0); // vox_offset
    put_f32(&mut h, 112, 0.0); // scl_slope: no scaling
    put_f32(&mut h, 116, 0.0); // scl_inter
    h[123] = 2; // xyzt_units: millimetres

    let desc = spec.description.as_bytes();
    let n = desc.len().min(79);
    h[148..148 + n].copy_from_slice(&desc[..n]);

    put_i16(&mut h, 252, 0); // qform_code
    put_i16(&mut h, 254, 1); // sform_code
    for (r, base) in [(0usize, 280usize), (1, 296), (2, 312)] {
        for c in 0..4 {
            put_f32(&mut h, base + 4 * c, spec.affine[r][c] as f32);
        }
    }
    h[MAGIC_OFFSET..MAGIC_OFFSET + 4].copy_from_slice(b"n+1\0");
    h
}

fn finish(mut header: Vec<u8>, payload: Vec<u8>, compress: bool) -> Result<Vec<u8>> {
    header.extend_from_slice(&[0u8; 4]); // no extensions; pads to vox_offset 352
    header.extend_from_slice(&payload);
    if !compress {
        return Ok(header);
    }
    use std::io::Write;
    // fixed mtime keeps the compressed bytes reproducible
    let mut enc = flate2::GzBuilder::new()
        .mtime(0)
        .write(Vec::new(), flate2::Compression::default());
    enc.write_all(&header)
        .and_then(|_| enc.finish())
        .map_err(|e| Error::Gzip(e.to_string()))
}

/// Serialize a volume as float32 NIfTI-1.
pub fn write_nifti(v: &Volume, compress: bool) -> Result<Vec<u8>> {
    if v.data.is_empty() {
        return Err(Error::EmptyVolume);
    }
    let header = build_header(&HeaderSpec {
        shape: v.shape,
        spacing: v.spacing,
        affine: &v.affine,
        description: &v.description,
        datatype: DT_FLOAT32,
        bitpix: 32,
    });
    let mut payload = Vec::with_capacity(v.data.len() * 4);
    for &x in &v.data {
        payload.extend_from_slice(&x.to_le_bytes());
    }
    finish(header, payload, compress)
}

/// Serialize a label map as int16 NIfTI-1. Errors if a code exceeds i16::MAX.
pub fn write_nifti_labels(m: &LabelMap, compress: bool) -> Result<Vec<u8>> {
    if m.data.is_empty() {
        return Err(Error::EmptyVolume);
    }
    let header = build_header(&HeaderSpec {
        shape: m.shape,
        spacing: m.spacing,
        affine: &m.affine,
        description: &m.description,
        datatype: DT_INT16,
        bitpix: 16,
    });
    let mut payload = Vec::with_capacity(m.data.len() * 2);
    for &code in &m.data {
        if code > i16::MAX as u32 {
            return Err(Error::LabelOverflow { code });
        }
        payload.extend_from_slice(&(code as i16).to_le_bytes());
    }
    finish(header, payload, compress)
}
