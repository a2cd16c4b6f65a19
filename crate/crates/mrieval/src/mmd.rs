//! Unbiased maximum mean discrepancy (the two-sample U-statistic):
//!
//! `MMD^2 = 1/(m(m-1)) sum_{i!=j} k(x_i,x_j) + 1/(n(n-1)) sum_{i!=j} k(y_i,y_j)
//!          - 2/(mn) sum_{i,j} k(x_i,y_j)`
//!
//! The estimate may come out slightly negative; that is expected of the
//! U-statistic. Row sums run in parallel but are reduced in index order with
//! pairwise summation, so the value never depends on thread count.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::embed::EmbeddingSet;
use crate::error::{Error, Result};
use crate::util::{median, pairwise_sum};
use crate::volume::Volume;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Bandwidth {
    /// Explicit Gaussian bandwidth sigma in `exp(-|x-y|^2 / (2 sigma^2))`.
    Fixed(f64),
    /// Median of the nonzero pairwise distances over the pooled set.
    MedianHeuristic,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum KernelSpec {
    Gaussian { bandwidth: Bandwidth },
    Linear,
    Polynomial { degree: f64, coef: f64 },
}

impl KernelSpec {
    pub fn validate(&self) -> Result<()> {
        match *self {
            KernelSpec::Gaussian {
                bandwidth: Bandwidth::Fixed(b),
            } if !(b > 0.0 && b.is_finite()) => Err(Error::BadBandwidth(b)),
            KernelSpec::Polynomial { degree, .. } if degree < 1.0 => Err(Error::Config(
                format!("polynomial kernel degree must be >= 1, found {degree}"),
            )),
            _ => Ok(()),
        }
    }
}

/// A kernel with any median-heuristic bandwidth already resolved.
#[derive(Debug, Clone, Copy)]
enum ResolvedKernel {
    Gaussian { inv_two_sigma_sq: f64 },
    Linear,
    Polynomial { degree: f64, coef: f64 },
}

impl ResolvedKernel {
    #[inline]
    fn eval(&self, a: &[f64], b: &[f64]) -> f64 {
        match *self {
            ResolvedKernel::Gaussian { inv_two_sigma_sq } => {
                let mut d2 = 0.0;
                for (x, y) in a.iter().zip(b) {
                    let diff = x - y;
                    d2 += diff * diff;
                }
                (-d2 * inv_two_sigma_sq).exp()
            }
            ResolvedKernel::Linear => a.iter().zip(b).map(|(x, y)| x * y).sum(),
            ResolvedKernel::Polynomial { degree, coef } => {
                let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
                let base = dot + coef;
                if degree.fract() == 0.0 {
                    base.powi(degree as i32)
                } else {
                    base.powf(degree)
                }
            }
        }
    }
}

fn resolve(kernel: &KernelSpec, x: &EmbeddingSet, y: &EmbeddingSet) -> Result<ResolvedKernel> {
    kernel.validate()?;
    Ok(match *kernel {
        KernelSpec::Linear => ResolvedKernel::Linear,
        KernelSpec::Polynomial { degree, coef } => ResolvedKernel::Polynomial { degree, coef },
        KernelSpec::Gaussian { bandwidth } => {
            let sigma = match bandwidth {
                Bandwidth::Fixed(b) => b,
                Bandwidth::MedianHeuristic => median_heuristic(x, y)?,
            };
            ResolvedKernel::Gaussian {
                inv_two_sigma_sq: 1.0 / (2.0 * sigma * sigma),
            }
        }
    })
}

/// Median of the nonzero pairwise Euclidean distances over the pooled rows.
fn median_heuristic(x: &EmbeddingSet, y: &EmbeddingSet) -> Result<f64> {
    let pooled: Vec<&[f64]> = x.rows().chain(y.rows()).collect();
    let mut dists = Vec::new();
    for i in 0..pooled.len() {
        for j in i + 1..pooled.len() {
            let d2: f64 = pooled[i]
                .iter()
                .zip(pooled[j])
                .map(|(a, b)| (a - b) * (a - b))
                .sum();
            if d2 > 0.0 {
                dists.push(d2.sqrt());
            }
        }
    }
    if dists.is_empty() {
        return Err(Error::DegenerateBandwidth);
    }
    Ok(median(&dists))
}

/// The unbiased two-sample MMD^2 estimate.
pub fn mmd2_unbiased(x: &EmbeddingSet, y: &EmbeddingSet, kernel: &KernelSpec) -> Result<f64> {
    let (m, n) = (x.len(), y.len());
    if m < 2 {
        return Err(Error::TooFewRows { n: m });
    }
    if n < 2 {
        return Err(Error::TooFewRows { n });
    }
    if x.dim() != y.dim() {
        return Err(Error::DimMismatch {
            a: x.dim(),
            b: y.dim(),
        });
    }
    let k = resolve(kernel, x, y)?;

    // within-set sums over unordered pairs, doubled for the i != j formula
    let within = |set: &EmbeddingSet| -> f64 {
        let rows: Vec<f64> = (0..set.len())
            .into_par_iter()
            .map(|i| {
                let ri = set.row(i);
                let mut acc = 0.0;
                for j in i + 1..set.len() {
                    acc += k.eval(ri, set.row(j));
                }
                acc
            })
            .collect();
        2.0 * pairwise_sum(&rows)
    };
    let cross: Vec<f64> = (0..m)
        .into_par_iter()
        .map(|i| {
            let ri = x.row(i);
            let mut acc = 0.0;
            for j in 0..n {
                acc += k.eval(ri, y.row(j));
            }
            acc
        })
        .collect();

    let term_x = within(x) / (m * (m - 1)) as f64;
    let term_y = within(y) / (n * (n - 1)) as f64;
    let term_xy = 2.0 * pairwise_sum(&cross) / (m * n) as f64;
    Ok(term_x + term_y - term_xy)
}

/// MMD over raw voxels: every volume is flattened to one vector. All volumes
/// must share one shape. The usual kernel for this path is linear.
pub fn image_space_mmd(xs: &[Volume], ys: &[Volume], kernel: &KernelSpec) -> Result<f64> {
    let all = xs.iter().chain(ys);
    let mut shape = None;
    for v in all {
        match shape {
            None => shape = Some(v.shape),
            Some(s) if s != v.shape => {
                return Err(Error::ShapeMismatch { a: s, b: v.shape })
            }
            _ => {}
        }
    }
    let flatten = |vs: &[Volume], tag: &str| -> Result<EmbeddingSet> {
        let rows: Vec<Vec<f64>> = vs
            .iter()
            .map(|v| v.data.iter().map(|&x| x as f64).collect())
            .collect();
        EmbeddingSet::from_rows(rows, tag)
    };
    mmd2_unbiased(&flatten(xs, "image-x")?, &flatten(ys, "image-y")?, kernel)
}
