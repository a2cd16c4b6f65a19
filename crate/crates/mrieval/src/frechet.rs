//! Fréchet distance between Gaussian summaries:
//! `|mu_a - mu_b|^2 + Tr(Sa + Sb - 2 (Sa^1/2 Sb Sa^1/2)^1/2)`.
//!
//! The matrix square roots come from symmetric eigendecompositions. Negative
//! eigenvalues, which appear when a covariance is rank deficient (small N),
//! are clipped to zero before taking roots; the result is clamped to >= 0.

use nalgebra::{DMatrix, SymmetricEigen};

use crate::embed::GaussianSummary;
use crate::error::{Error, Result};

fn sqrt_psd(m: DMatrix<f64>) -> DMatrix<f64> {
    let eig = SymmetricEigen::new(m);
    let roots = eig.eigenvalues.map(|l| l.max(0.0).sqrt());
    &eig.eigenvectors * DMatrix::from_diagonal(&roots) * eig.eigenvectors.transpose()
}

fn trace_sqrt_psd(m: DMatrix<f64>) -> f64 {
    let eig = SymmetricEigen::new(m);
    eig.eigenvalues.iter().map(|&l| l.max(0.0).sqrt()).sum()
}

pub fn frechet_distance(a: &GaussianSummary, b: &GaussianSummary) -> Result<f64> {
    if a.dim != b.dim {
        return Err(Error::DimMismatch { a: a.dim, b: b.dim });
    }
    let finite = |g: &GaussianSummary| {
        g.mean.iter().all(|x| x.is_finite()) && g.cov.iter().all(|x| x.is_finite())
    };
    if !finite(a) || !finite(b) {
        return Err(Error::NonFinite {
            context: "gaussian summary".into(),
        });
    }
    let d = a.dim;
    let mean_sq: f64 = (0..d).map(|i| (a.mean[i] - b.mean[i]).powi(2)).sum();
    let sa = DMatrix::from_row_slice(d, d, &a.cov);
    let sb = DMatrix::from_row_slice(d, d, &b.cov);
    let tr_a = sa.trace();
    let tr_b = sb.trace();

    let root_a = sqrt_psd(sa);
    let mut inner = &root_a * &sb * &root_a;
    // symmetrize before the eigensolve; the product drifts off symmetric by rounding
    inner = (&inner + inner.transpose()) * 0.5;
    let tr_sqrt = trace_sqrt_psd(inner);

    Ok((mean_sq + tr_a + tr_b - 2.0 * tr_sqrt).max(0.0))
}
