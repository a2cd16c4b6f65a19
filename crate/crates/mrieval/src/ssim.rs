//! Multi-scale structural similarity for 3D volumes.
//!
//! Local means, variances and covariance come from a separable Gaussian
//! window with symmetric (mirrored) boundary handling. Each scale
//! contributes its mean contrast-structure term; the coarsest scale
//! contributes the mean of the full per-voxel SSIM (luminance times
//! contrast-structure). Scales are combined as a weight-powered product,
//! with 2x2x2 mean pooling between scales.
//!
//! With one scale this reduces to plain SSIM, which is what the brute-force
//! oracles in the tests check against.

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::util::{pairwise_sum, sample_stddev};
use crate::volume::Volume;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MsSsimSpec {
    pub scales: usize,
    pub weights: Vec<f64>,
    pub window: usize,
    pub sigma: f64,
    pub k1: f64,
    pub k2: f64,
    /// Intensity span of the data; 2.0 for volumes normalized to [-1, 1].
    pub dynamic_range: f64,
}

impl Default for MsSsimSpec {
    fn default() -> Self {
        MsSsimSpec {
            scales: 5,
            weights: vec![0.0448, 0.2856, 0.3001, 0.2363, 0.1333],
            window: 11,
            sigma: 1.5,
            k1: 0.01,
            k2: 0.03,
            dynamic_range: 2.0,
        }
    }
}

impl MsSsimSpec {
    /// Plain single-scale SSIM with the same window parameters.
    pub fn single_scale() -> Self {
        MsSsimSpec {
            scales: 1,
            weights: vec![1.0],
            ..Default::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::BadMsSsimSpec(msg));
        if self.scales < 1 {
            return bad("scales must be >= 1".into());
        }
        if self.weights.len() != self.scales {
            return bad(format!(
                "{} weights for {} scales",
                self.weights.len(),
                self.scales
            ));
        }
        if self.weights.iter().any(|&w| !w.is_finite() || w <= 0.0) {
            return bad("weights must be positive".into());
        }
        // the canonical five-scale weights are published rounded and sum to
        // 1.0001, so the check cannot be tighter than 1e-3
        let sum: f64 = self.weights.iter().sum();
        if (sum - 1.0).abs() > 1e-3 {
            return bad(format!("weights sum to {sum}, expected 1"));
        }
        if self.window < 3 || self.window.is_multiple_of(2) {
            return bad(format!("window must be odd and >= 3, found {}", self.window));
        }
        let positive =
            |x: f64| x.is_finite() && x > 0.0;
        if !positive(self.sigma)
            || !positive(self.k1)
            || !positive(self.k2)
            || !positive(self.dynamic_range)
        {
            return bad("sigma, k1, k2 and dynamic_range must be positive".into());
        }
        Ok(())
    }
}

/// Normalized 1D Gaussian window of odd length.
pub fn gaussian_window(window: usize, sigma: f64) -> Vec<f64> {
    let c = (window / 2) as f64;
    let mut w: Vec<f64> = (0..window)
        .map(|i| (-((i as f64 - c).powi(2)) / (2.0 * sigma * sigma)).exp())
        .collect();
    let total: f64 = w.iter().sum();
    for x in &mut w {
        *x /= total;
    }
    w
}

/// Symmetric boundary index: ...cba|abc...xyz|zyx... Folds repeatedly, so it
/// stays valid even when the window overhangs a whole axis.
#[inline]
pub fn mirror_index(mut i: isize, n: usize) -> usize {
    let n = n as isize;
    loop {
        if i < 0 {
            i = -i - 1;
        } else if i >= n {
            i = 2 * n - 1 - i;
        } else {
            return i as usize;
        }
    }
}

/// Separable convolution with a 1D window applied along all three axes.
pub fn filter_separable(src: &[f64], shape: [usize; 3], window: &[f64]) -> Vec<f64> {
    let mut cur = src.to_vec();
    for axis in 0..3 {
        cur = filter_axis(&cur, shape, axis, window);
    }
    cur
}

fn filter_axis(src: &[f64], shape: [usize; 3], axis: usize, window: &[f64]) -> Vec<f64> {
    let [nx, ny, nz] = shape;
    let n = shape[axis];
    let c = (window.len() / 2) as isize;
    let mut out = vec![0.0; src.len()];
    let mut line = vec![0.0; n];

    let (outer1, outer2, stride) = match axis {
        0 => (ny, nz, 1usize),
        1 => (nx, nz, nx),
        _ => (nx, ny, nx * ny),
    };
    for o2 in 0..outer2 {
        for o1 in 0..outer1 {
            let base = match axis {
                0 => nx * (o1 + ny * o2),
                1 => o1 + nx * ny * o2,
                _ => o1 + nx * o2,
            };
            for (i, slot) in line.iter_mut().enumerate() {
                *slot = src[base + i * stride];
            }
            for i in 0..n {
                let mut acc = 0.0;
                for (t, &w) in window.iter().enumerate() {
                    acc += w * line[mirror_index(i as isize + t as isize - c, n)];
                }
                out[base + i * stride] = acc;
            }
        }
    }
    out
}

/// 2x2x2 mean pooling with stride 2; trailing odd slices are dropped.
fn downsample2(src: &[f64], shape: [usize; 3]) -> (Vec<f64>, [usize; 3]) {
    let [nx, ny, nz] = shape;
    let (ox, oy, oz) = (nx / 2, ny / 2, nz / 2);
    let mut out = Vec::with_capacity(ox * oy * oz);
    for z in 0..oz {
        for y in 0..oy {
            for x in 0..ox {
                let mut acc = 0.0;
                for dz in 0..2 {
                    for dy in 0..2 {
                        for dx in 0..2 {
                            acc += src[(2 * x + dx) + nx * ((2 * y + dy) + ny * (2 * z + dz))];
                        }
                    }
                }
                out.push(acc / 8.0);
            }
        }
    }
    (out, [ox, oy, oz])
}

struct ScaleTerms {
    cs_mean: f64,
    ssim_mean: f64,
}

fn scale_terms(a: &[f64], b: &[f64], shape: [usize; 3], spec: &MsSsimSpec) -> ScaleTerms {
    let win = gaussian_window(spec.window, spec.sigma);
    let mu_a = filter_separable(a, shape, &win);
    let mu_b = filter_separable(b, shape, &win);
    let sq = |xs: &[f64], ys: &[f64]| -> Vec<f64> {
        xs.iter().zip(ys).map(|(x, y)| x * y).collect()
    };
    let maa = filter_separable(&sq(a, a), shape, &win);
    let mbb = filter_separable(&sq(b, b), shape, &win);
    let mab = filter_separable(&sq(a, b), shape, &win);

    let c1 = (spec.k1 * spec.dynamic_range).powi(2);
    let c2 = (spec.k2 * spec.dynamic_range).powi(2);

    let n = a.len();
    let mut cs_map = Vec::with_capacity(n);
    let mut ssim_map = Vec::with_capacity(n);
    for i in 0..n {
        let (ma, mb) = (mu_a[i], mu_b[i]);
        let va = maa[i] - ma * ma;
        let vb = mbb[i] - mb * mb;
        let cab = mab[i] - ma * mb;
        let cs = (2.0 * cab + c2) / (va + vb + c2);
        let lum = (2.0 * ma * mb + c1) / (ma * ma + mb * mb + c1);
        cs_map.push(cs);
        ssim_map.push(lum * cs);
    }
    ScaleTerms {
        cs_mean: pairwise_sum(&cs_map) / n as f64,
        ssim_mean: pairwise_sum(&ssim_map) / n as f64,
    }
}

/// Multi-scale SSIM between two volumes of identical shape.
pub fn ms_ssim(a: &Volume, b: &Volume, spec: &MsSsimSpec) -> Result<f64> {
    spec.validate()?;
    if a.shape != b.shape {
        return Err(Error::ShapeMismatch {
            a: a.shape,
            b: b.shape,
        });
    }
    let min_extent = 1usize << (spec.scales - 1);
    if a.shape.iter().any(|&n| n < min_extent) {
        return Err(Error::PyramidTooSmall {
            shape: a.shape,
            scales: spec.scales,
        });
    }

    let mut cur_a: Vec<f64> = a.data.iter().map(|&x| x as f64).collect();
    let mut cur_b: Vec<f64> = b.data.iter().map(|&x| x as f64).collect();
    let mut shape = a.shape;
    let mut score = 1.0;
    for scale in 1..=spec.scales {
        let terms = scale_terms(&cur_a, &cur_b, shape, spec);
        let weight = spec.weights[scale - 1];
        if scale < spec.scales {
            if terms.cs_mean < 0.0 {
                return Err(Error::NegativeSsimTerm {
                    term: "contrast-structure",
                    value: terms.cs_mean,
                    scale,
                });
            }
            score *= terms.cs_mean.powf(weight);
            let (da, s) = downsample2(&cur_a, shape);
            let (db, _) = downsample2(&cur_b, shape);
            cur_a = da;
            cur_b = db;
            shape = s;
        } else {
            if terms.ssim_mean < 0.0 {
                return Err(Error::NegativeSsimTerm {
                    term: "ssim",
                    value: terms.ssim_mean,
                    scale,
                });
            }
            score *= terms.ssim_mean.powf(weight);
        }
    }
    Ok(score)
}

/// Mean and sample standard deviation of MS-SSIM over `num_pairs` distinct
/// unordered pairs drawn uniformly without replacement (seeded).
///
/// A mean above the one measured on the real set suggests the generator
/// lacks diversity; reports compare via |mean - real reference|.
pub fn pairwise_ms_ssim(
    set: &[Volume],
    num_pairs: u64,
    seed: u64,
    spec: &MsSsimSpec,
) -> Result<(f64, f64)> {
    if set.len() < 2 {
        return Err(Error::TooFewRows { n: set.len() });
    }
    let n = set.len() as u64;
    let total = n * (n - 1) / 2;
    if num_pairs < 1 || num_pairs > total {
        return Err(Error::TooManyPairs {
            requested: num_pairs,
            available: total,
        });
    }
    let mut pairs = Vec::with_capacity(total as usize);
    for i in 0..set.len() {
        for j in i + 1..set.len() {
            pairs.push((i, j));
        }
    }
    // partial Fisher-Yates: the first num_pairs slots are a uniform draw
    // without replacement
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let take = num_pairs as usize;
    for k in 0..take.min(pairs.len() - 1) {
        let swap_with = rng.random_range(k..pairs.len());
        pairs.swap(k, swap_with);
    }
    pairs.truncate(take);

    let scores: Vec<f64> = pairs
        .par_iter()
        .map(|&(i, j)| ms_ssim(&set[i], &set[j], spec))
        .collect::<Result<Vec<f64>>>()?;
    let mean = pairwise_sum(&scores) / scores.len() as f64;
    Ok((mean, sample_stddev(&scores)))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn noisy_phantom(shape: [usize; 3], noise: f64, seed: u64) -> Volume {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let [nx, ny, nz] = shape;
        let mut data = Vec::with_capacity(nx * ny * nz);
        for z in 0..nz {
            for y in 0..ny {
                for x in 0..nx {
                    let cx = x as f64 - nx as f64 / 2.0;
                    let cy = y as f64 - ny as f64 / 2.0;
                    let cz = z as f64 - nz as f64 / 2.0;
                    let r = (cx * cx + cy * cy + cz * cz).sqrt();
                    let base = if r < nx as f64 / 3.0 { 0.5 } else { -1.0 };
                    let n: f64 = rng.random_range(-1.0..1.0) * noise;
                    data.push((base + n) as f32);
                }
            }
        }
        Volume::new(data, shape, [1.0; 3]).unwrap()
    }

    /// Brute-force single-scale SSIM: explicit window loops, no separable
    /// filtering, naive accumulation.
    fn ssim_direct_oracle(a: &Volume, b: &Volume, spec: &MsSsimSpec) -> f64 {
        let w1 = gaussian_window(spec.window, spec.sigma);
        let [nx, ny, nz] = a.shape;
        let c = (spec.window / 2) as isize;
        let c1 = (spec.k1 * spec.dynamic_range).powi(2);
        let c2 = (spec.k2 * spec.dynamic_range).powi(2);
        let mut total = 0.0;
        for z in 0..nz as isize {
            for y in 0..ny as isize {
                for x in 0..nx as isize {
                    let (mut ma, mut mb, mut maa, mut mbb, mut mab) = (0.0, 0.0, 0.0, 0.0, 0.0);
                    for (kz, &wz) in w1.iter().enumerate() {
                        let zz = mirror_index(z + kz as isize - c, nz);
                        for (ky, &wy) in w1.iter().enumerate() {
                            let yy = mirror_index(y + ky as isize - c, ny);
                            for (kx, &wx) in w1.iter().enumerate() {
                                let xx = mirror_index(x + kx as isize - c, nx);
                                let w = wx * wy * wz;
                                let av = a.at(xx, yy, zz) as f64;
                                let bv = b.at(xx, yy, zz) as f64;
                                ma += w * av;
                                mb += w * bv;
                                maa += w * av * av;
                                mbb += w * bv * bv;
                                mab += w * av * bv;
                            }
                        }
                    }
                    let va = maa - ma * ma;
                    let vb = mbb - mb * mb;
                    let cab = mab - ma * mb;
                    let lum = (2.0 * ma * mb + c1) / (ma * ma + mb * mb + c1);
                    let cs = (2.0 * cab + c2) / (va + vb + c2);
                    total += lum * cs;
                }
            }
        }
        total / (nx * ny * nz) as f64
    }

    #[test]
    fn self_similarity_is_exactly_one() {
        let v = noisy_phantom([32, 32, 32], 0.1, 4);
        let spec = MsSsimSpec::default();
        assert_eq!(ms_ssim(&v, &v.clone(), &spec).unwrap(), 1.0);
    }

    #[test]
    fn single_scale_matches_direct_loop_oracle() {
        let spec = MsSsimSpec::single_scale();
        let a = noisy_phantom([16, 16, 16], 0.05, 1);
        let b = noisy_phantom([16, 16, 16], 0.05, 2);
        let fast = ms_ssim(&a, &b, &spec).unwrap();
        let slow = ssim_direct_oracle(&a, &b, &spec);
        assert!((fast - slow).abs() < 1e-6, "{fast} vs {slow}");
    }

    #[test]
    fn separable_filter_matches_direct_convolution() {
        let shape = [16, 16, 16];
        let v = noisy_phantom(shape, 0.3, 9);
        let src: Vec<f64> = v.data.iter().map(|&x| x as f64).collect();
        let w1 = gaussian_window(7, 1.2);
        let fast = filter_separable(&src, shape, &w1);
        let c = 3isize;
        for probe in [[0usize, 0, 0], [5, 8, 3], [15, 15, 15], [1, 14, 7]] {
            let [x, y, z] = probe;
            let mut acc = 0.0;
            for (kz, &wz) in w1.iter().enumerate() {
                let zz = mirror_index(z as isize + kz as isize - c, 16);
                for (ky, &wy) in w1.iter().enumerate() {
                    let yy = mirror_index(y as isize + ky as isize - c, 16);
                    for (kx, &wx) in w1.iter().enumerate() {
                        let xx = mirror_index(x as isize + kx as isize - c, 16);
                        acc += wx * wy * wz * src[xx + 16 * (yy + 16 * zz)];
                    }
                }
            }
            let got = fast[x + 16 * (y + 16 * z)];
            assert!((acc - got).abs() < 1e-6, "at {probe:?}: {acc} vs {got}");
        }
    }

    #[test]
    fn symmetric_in_arguments() {
        let a = noisy_phantom([16, 16, 16], 0.1, 5);
        let b = noisy_phantom([16, 16, 16], 0.1, 6);
        let spec = MsSsimSpec::single_scale();
        let ab = ms_ssim(&a, &b, &spec).unwrap();
        let ba = ms_ssim(&b, &a, &spec).unwrap();
        assert!((ab - ba).abs() < 1e-9);
    }

    #[test]
    fn differing_volumes_score_below_one() {
        let a = noisy_phantom([16, 16, 16], 0.0, 7);
        let mut b = a.clone();
        b.data[100] += 0.5;
        let spec = MsSsimSpec::single_scale();
        assert!(ms_ssim(&a, &b, &spec).unwrap() < 1.0);
    }

    #[test]
    fn noise_monotonically_lowers_the_score() {
        let base = noisy_phantom([24, 24, 24], 0.0, 8);
        let spec = MsSsimSpec::single_scale();
        let mut prev = 1.1;
        for (i, noise) in [0.05, 0.15, 0.4].iter().enumerate() {
            let mut noisy = base.clone();
            let mut rng = ChaCha8Rng::seed_from_u64(100 + i as u64);
            for v in &mut noisy.data {
                *v += (rng.random_range(-1.0..1.0) * noise) as f32;
            }
            let s = ms_ssim(&base, &noisy, &spec).unwrap();
            assert!(s < prev, "noise {noise}: {s} !< {prev}");
            prev = s;
        }
    }

    #[test]
    fn shape_mismatch_rejected() {
        let a = Volume::filled(0.0, [8, 8, 8], [1.0; 3]).unwrap();
        let b = Volume::filled(0.0, [8, 8, 9], [1.0; 3]).unwrap();
        assert!(matches!(
            ms_ssim(&a, &b, &MsSsimSpec::default()),
            Err(Error::ShapeMismatch { .. })
        ));
    }

    #[test]
    fn pyramid_needs_enough_extent() {
        let a = Volume::filled(0.0, [8, 8, 8], [1.0; 3]).unwrap();
        assert!(matches!(
            ms_ssim(&a, &a.clone(), &MsSsimSpec::default()),
            Err(Error::PyramidTooSmall { .. })
        ));
    }

    #[test]
    fn anticorrelated_volumes_raise_instead_of_abs() {
        // negated data makes every local covariance negative, so the
        // contrast-structure mean at the finer scale drops below zero
        let a = noisy_phantom([16, 16, 16], 0.5, 21);
        let mut b = a.clone();
        for v in &mut b.data {
            *v = -*v;
        }
        let spec = MsSsimSpec {
            scales: 2,
            weights: vec![0.5, 0.5],
            ..Default::default()
        };
        match ms_ssim(&a, &b, &spec) {
            Err(Error::NegativeSsimTerm { term, scale, .. }) => {
                assert_eq!(term, "contrast-structure");
                assert_eq!(scale, 1);
            }
            other => panic!("expected negative-term error, got {other:?}"),
        }
    }

    #[test]
    fn weights_must_match_scales() {
        let spec = MsSsimSpec {
            scales: 3,
            ..Default::default()
        };
        assert!(matches!(
            spec.validate(),
            Err(Error::BadMsSsimSpec(_))
        ));
    }

    #[test]
    fn pairwise_on_identical_volumes() {
        let v = noisy_phantom([16, 16, 16], 0.2, 31);
        let set = vec![v.clone(), v.clone(), v.clone()];
        let (mean, sd) =
            pairwise_ms_ssim(&set, 3, 17, &MsSsimSpec::single_scale()).unwrap();
        assert_eq!(mean, 1.0);
        assert_eq!(sd, 0.0);
    }

    #[test]
    fn pairwise_is_seed_deterministic() {
        let set: Vec<Volume> = (0..6)
            .map(|i| noisy_phantom([16, 16, 16], 0.2, 40 + i))
            .collect();
        let spec = MsSsimSpec::single_scale();
        let a = pairwise_ms_ssim(&set, 7, 123, &spec).unwrap();
        let b = pairwise_ms_ssim(&set, 7, 123, &spec).unwrap();
        assert_eq!(a, b);
        let c = pairwise_ms_ssim(&set, 7, 124, &spec).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn pairwise_rejects_oversized_requests() {
        let set: Vec<Volume> = (0..3)
            .map(|i| noisy_phantom([8, 8, 8], 0.2, i))
            .collect();
        assert!(matches!(
            pairwise_ms_ssim(&set, 4, 0, &MsSsimSpec::single_scale()),
            Err(Error::TooManyPairs {
                requested: 4,
                available: 3
            })
        ));
    }

    #[test]
    fn pairwise_score_independent_of_thread_count() {
        let set: Vec<Volume> = (0..5)
            .map(|i| noisy_phantom([16, 16, 16], 0.15, 60 + i))
            .collect();
        let spec = MsSsimSpec::single_scale();
        let run = |threads: usize| {
            let pool = rayon::ThreadPoolBuilder::new()
                .num_threads(threads)
                .build()
                .unwrap();
            pool.install(|| pairwise_ms_ssim(&set, 8, 5, &spec).unwrap())
        };
        assert_eq!(run(1), run(4));
    }
}
