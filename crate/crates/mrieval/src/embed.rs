//! Embedding sets: N x D feature matrices standing in for MRI sets.
//!
//! Embeddings are produced by external encoders and ingested from files,
//! either CSV (`id,f0,f1,...`) or the binary `VEMB` layout (magic "VEMB",
//! u32 version, u32 N, u32 D, then N*D little-endian f32). A deterministic
//! toy embedder over raw volumes exists for tests and demos.

use rand::RngCore;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::util::pairwise_sum;
use crate::volume::Volume;

#[derive(Debug, Clone)]
pub struct EmbeddingSet {
    data: Vec<f64>,
    n: usize,
    d: usize,
    pub source_tag: String,
}

impl EmbeddingSet {
    /// Build from rows. Requires N >= 2, a constant dimension, and finite
    /// entries.
    pub fn from_rows(rows: Vec<Vec<f64>>, source_tag: impl Into<String>) -> Result<Self> {
        if rows.len() < 2 {
            return Err(Error::TooFewRows { n: rows.len() });
        }
        let d = rows[0].len();
        if d == 0 {
            return Err(Error::DimMismatch { a: 0, b: 0 });
        }
        let mut data = Vec::with_capacity(rows.len() * d);
        for row in &rows {
            if row.len() != d {
                return Err(Error::DimMismatch {
                    a: d,
                    b: row.len(),
                });
            }
            for &x in row {
                if !x.is_finite() {
                    return Err(Error::NonFinite {
                        context: "embedding vectors".into(),
                    });
                }
                data.push(x);
            }
        }
        Ok(EmbeddingSet {
            data,
            n: rows.len(),
            d,
            source_tag: source_tag.into(),
        })
    }

    pub fn len(&self) -> usize {
        self.n
    }

    pub fn is_empty(&self) -> bool {
        self.n == 0
    }

    pub fn dim(&self) -> usize {
        self.d
    }

    #[inline]
    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.d..(i + 1) * self.d]
    }

    pub fn rows(&self) -> impl Iterator<Item = &[f64]> {
        (0..self.n).map(move |i| self.row(i))
    }

    // ---- file formats ----

    pub fn to_csv_bytes(&self) -> Vec<u8> {
        let mut out = String::from("id");
        for j in 0..self.d {
            out.push_str(&format!(",f{j}"));
        }
        out.push('\n');
        for i in 0..self.n {
            out.push_str(&i.to_string());
            for &x in self.row(i) {
                out.push_str(&format!(",{x}"));
            }
            out.push('\n');
        }
        out.into_bytes()
    }

    pub fn from_csv_bytes(bytes: &[u8], source_tag: &str) -> Result<Self> {
        let mut reader = csv::ReaderBuilder::new()
            .has_headers(true)
            .from_reader(bytes);
        let bad = |reason: String| Error::BadFile {
            path: format!("<{source_tag} csv>"),
            reason,
        };
        let mut rows = Vec::new();
        for record in reader.records() {
            let record = record.map_err(|e| bad(e.to_string()))?;
            let mut row = Vec::with_capacity(record.len().saturating_sub(1));
            for field in record.iter().skip(1) {
                let x: f64 = field
                    .trim()
                    .parse()
                    .map_err(|_| bad(format!("bad float {field:?}")))?;
                row.push(x);
            }
            rows.push(row);
        }
        EmbeddingSet::from_rows(rows, source_tag)
    }

    pub fn to_vemb_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(16 + self.data.len() * 4);
        out.extend_from_slice(b"VEMB");
        out.extend_from_slice(&1u32.to_le_bytes());
        out.extend_from_slice(&(self.n as u32).to_le_bytes());
        out.extend_from_slice(&(self.d as u32).to_le_bytes());
        for &x in &self.data {
            out.extend_from_slice(&(x as f32).to_le_bytes());
        }
        out
    }

    pub fn from_vemb_bytes(bytes: &[u8], source_tag: &str) -> Result<Self> {
        let bad = |reason: &str| Error::BadFile {
            path: format!("<{source_tag} vemb>"),
            reason: reason.into(),
        };
        if bytes.len() < 16 || &bytes[0..4] != b"VEMB" {
            return Err(bad("missing VEMB magic"));
        }
        let u32_at = |off: usize| u32::from_le_bytes(bytes[off..off + 4].try_into().unwrap());
        let version = u32_at(4);
        if version != 1 {
            return Err(bad(&format!("unsupported version {version}")));
        }
        let n = u32_at(8) as usize;
        let d = u32_at(12) as usize;
        let need = 16usize.saturating_add(n.saturating_mul(d).saturating_mul(4));
        if bytes.len() < need {
            return Err(bad("truncated payload"));
        }
        let mut rows = Vec::with_capacity(n);
        for i in 0..n {
            let mut row = Vec::with_capacity(d);
            for j in 0..d {
                let off = 16 + 4 * (i * d + j);
                row.push(f32::from_le_bytes(bytes[off..off + 4].try_into().unwrap()) as f64);
            }
            rows.push(row);
        }
        EmbeddingSet::from_rows(rows, source_tag)
    }

    /// Load from a file, picking the format by sniffing the VEMB magic.
    pub fn load(path: &std::path::Path, source_tag: &str) -> Result<Self> {
        let bytes =
            std::fs::read(path).map_err(|e| Error::io(path.display().to_string(), e))?;
        if bytes.len() >= 4 && &bytes[0..4] == b"VEMB" {
            EmbeddingSet::from_vemb_bytes(&bytes, source_tag)
        } else {
            EmbeddingSet::from_csv_bytes(&bytes, source_tag)
        }
    }
}

/// Mean vector and unbiased sample covariance of an embedding set.
#[derive(Debug, Clone)]
pub struct GaussianSummary {
    pub mean: Vec<f64>,
    /// D x D row-major, symmetrized as (C + C^T)/2.
    pub cov: Vec<f64>,
    pub dim: usize,
}

pub fn fit_gaussian(e: &EmbeddingSet) -> Result<GaussianSummary> {
    let (n, d) = (e.len(), e.dim());
    if n < 2 {
        return Err(Error::TooFewRows { n });
    }
    let mut mean = vec![0.0; d];
    for (j, slot) in mean.iter_mut().enumerate() {
        let col: Vec<f64> = (0..n).map(|i| e.row(i)[j]).collect();
        *slot = pairwise_sum(&col) / n as f64;
    }
    let mut cov = vec![0.0; d * d];
    for j in 0..d {
        for k in j..d {
            let prods: Vec<f64> = (0..n)
                .map(|i| (e.row(i)[j] - mean[j]) * (e.row(i)[k] - mean[k]))
                .collect();
            let c = pairwise_sum(&prods) / (n - 1) as f64;
            cov[j * d + k] = c;
            cov[k * d + j] = c;
        }
    }
    Ok(GaussianSummary { mean, cov, dim: d })
}

/// Deterministic stand-in for a pretrained encoder: 4x4x4 mean-pool the
/// volume, then project with a seeded +-1/sqrt(dim) sign matrix. The same
/// (volume, dim, seed) always yields the same vector.
pub fn toy_embedder(v: &Volume, dim: usize, seed: u64) -> Vec<f64> {
    assert!(dim >= 1, "embedding dimension must be at least 1");
    let pooled = mean_pool4(v);
    let scale = 1.0 / (dim as f64).sqrt();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = vec![0.0; dim];
    let mut bits = 0u64;
    let mut left = 0u32;
    for slot in out.iter_mut() {
        let mut acc = 0.0;
        for &p in &pooled {
            if left == 0 {
                bits = rng.next_u64();
                left = 64;
            }
            let sign = if bits & 1 == 1 { scale } else { -scale };
            bits >>= 1;
            left -= 1;
            acc += sign * p;
        }
        *slot = acc;
    }
    out
}

fn mean_pool4(v: &Volume) -> Vec<f64> {
    const B: usize = 4;
    let [nx, ny, nz] = v.shape;
    let (bx, by, bz) = (nx.div_ceil(B), ny.div_ceil(B), nz.div_ceil(B));
    let mut out = Vec::with_capacity(bx * by * bz);
    for kz in 0..bz {
        for ky in 0..by {
            for kx in 0..bx {
                let mut acc = 0.0;
                let mut count = 0u32;
                for z in kz * B..((kz + 1) * B).min(nz) {
                    for y in ky * B..((ky + 1) * B).min(ny) {
                        for x in kx * B..((kx + 1) * B).min(nx) {
                            acc += v.at(x, y, z) as f64;
                            count += 1;
                        }
                    }
                }
                out.push(acc / count as f64);
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn fit_gaussian_hand_case() {
        let e = EmbeddingSet::from_rows(vec![vec![0.0, 0.0], vec![2.0, 0.0]], "t").unwrap();
        let g = fit_gaussian(&e).unwrap();
        assert_eq!(g.mean, vec![1.0, 0.0]);
        assert_eq!(g.cov, vec![2.0, 0.0, 0.0, 0.0]);
    }

    #[test]
    fn identical_rows_give_zero_covariance() {
        let e = EmbeddingSet::from_rows(vec![vec![3.0, -1.0]; 5], "t").unwrap();
        let g = fit_gaussian(&e).unwrap();
        assert!(g.cov.iter().all(|&c| c == 0.0));
    }

    #[test]
    fn single_row_is_rejected() {
        assert!(matches!(
            EmbeddingSet::from_rows(vec![vec![1.0]], "t"),
            Err(Error::TooFewRows { n: 1 })
        ));
    }

    #[test]
    fn ragged_rows_are_rejected() {
        let rows = vec![vec![1.0, 2.0], vec![3.0]];
        assert!(matches!(
            EmbeddingSet::from_rows(rows, "t"),
            Err(Error::DimMismatch { a: 2, b: 1 })
        ));
    }

    #[test]
    fn csv_roundtrip() {
        let e = EmbeddingSet::from_rows(
            vec![vec![1.5, -2.25, 0.125], vec![0.0, 3.5, -1.0]],
            "enc",
        )
        .unwrap();
        let back = EmbeddingSet::from_csv_bytes(&e.to_csv_bytes(), "enc").unwrap();
        assert_eq!(back.len(), 2);
        assert_eq!(back.row(0), e.row(0));
        assert_eq!(back.row(1), e.row(1));
    }

    #[test]
    fn vemb_roundtrip() {
        let e = EmbeddingSet::from_rows(vec![vec![1.0, 2.0], vec![-0.5, 4.0]], "enc").unwrap();
        let back = EmbeddingSet::from_vemb_bytes(&e.to_vemb_bytes(), "enc").unwrap();
        assert_eq!(back.row(1), e.row(1));
    }

    #[test]
    fn vemb_bad_magic_rejected() {
        assert!(EmbeddingSet::from_vemb_bytes(b"NOPE\x01\x00\x00\x00", "t").is_err());
    }

    #[test]
    fn toy_embedder_is_deterministic() {
        let v = Volume::new((0..64).map(|i| i as f32).collect(), [4, 4, 4], [1.0; 3]).unwrap();
        let a = toy_embedder(&v, 8, 42);
        let b = toy_embedder(&v, 8, 42);
        assert_eq!(a, b);
        let c = toy_embedder(&v, 8, 43);
        assert_ne!(a, c);
    }

    #[test]
    fn toy_embedder_maps_zero_to_zero() {
        let v = Volume::filled(0.0, [8, 8, 8], [1.0; 3]).unwrap();
        assert!(toy_embedder(&v, 16, 7).iter().all(|&x| x == 0.0));
    }
}
