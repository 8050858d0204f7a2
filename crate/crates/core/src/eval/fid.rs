//! Fréchet distance between Gaussian fits of image features.

use nalgebra::{DMatrix, DVector, SymmetricEigen};

use crate::error::{Error, Result};
use crate::image::Image;
use crate::model::FeaturePyramid;

/// Added to both covariance diagonals before the square root.
pub const COV_RIDGE: f64 = 1e-6;

/// Deterministic map from an image to a fixed-length feature vector.
pub trait FeatureExtractor {
    /// Provenance tag, e.g. `fixed-random:16-16-32:0`.
    fn id(&self) -> String;
    fn dim(&self) -> usize;
    fn extract(&self, img: &Image) -> Result<Vec<f64>>;
}

impl FeatureExtractor for FeaturePyramid {
    fn id(&self) -> String {
        FeaturePyramid::id(self).to_owned()
    }

    fn dim(&self) -> usize {
        self.feature_dim()
    }

    fn extract(&self, img: &Image) -> Result<Vec<f64>> {
        self.embed(img)
    }
}

/// The default extractor: a seeded random pyramid with 64 output features.
pub fn default_extractor(channels: usize, seed: u64) -> FeaturePyramid {
    FeaturePyramid::random(channels, &[16, 16, 32], seed)
}

/// Mean and unbiased covariance of the rows.
pub fn gaussian_fit(features: &[Vec<f64>]) -> Result<(DVector<f64>, DMatrix<f64>)> {
    let n = features.len();
    if n == 0 {
        return Err(Error::Metric("FID of an empty set".into()));
    }
    let d = features[0].len();
    if features.iter().any(|f| f.len() != d) {
        return Err(Error::Metric("feature vectors of differing length".into()));
    }
    if features.iter().flatten().any(|v| !v.is_finite()) {
        return Err(Error::Metric("non-finite feature".into()));
    }
    let x = DMatrix::from_fn(n, d, |i, j| features[i][j]);
    let mu = DVector::from_fn(d, |j, _| x.column(j).mean());
    let centered = DMatrix::from_fn(n, d, |i, j| x[(i, j)] - mu[j]);
    let cov = centered.transpose() * &centered / (n.max(2) - 1) as f64;
    Ok((mu, cov))
}

fn sym_sqrt(m: &DMatrix<f64>) -> DMatrix<f64> {
    let sym = (m + m.transpose()) * 0.5;
    let eig = SymmetricEigen::new(sym);
    let roots = eig.eigenvalues.map(|l| l.max(0.0).sqrt());
    &eig.eigenvectors * DMatrix::from_diagonal(&roots) * eig.eigenvectors.transpose()
}

/// `||mu_a - mu_b||^2 + Tr(S_a + S_b - 2 (S_a S_b)^{1/2})` with both
/// covariances ridged. The trace of the square root comes from the
/// symmetric matrix `S_a^{1/2} S_b S_a^{1/2}`, which shares its spectrum
/// with `S_a S_b`; negative eigenvalues are clamped to zero.
pub fn frechet_distance(mu_a: &DVector<f64>, cov_a: &DMatrix<f64>, mu_b: &DVector<f64>, cov_b: &DMatrix<f64>) -> Result<f64> {
    let d = mu_a.len();
    if mu_b.len() != d || cov_a.shape() != (d, d) || cov_b.shape() != (d, d) {
        return Err(Error::Metric("Gaussian dimensions disagree".into()));
    }
    let ridge = DMatrix::identity(d, d) * COV_RIDGE;
    let a = cov_a + &ridge;
    let b = cov_b + &ridge;
    let ra = sym_sqrt(&a);
    let inner = &ra * &b * &ra;
    let sym = (&inner + inner.transpose()) * 0.5;
    let tr_sqrt: f64 = SymmetricEigen::new(sym).eigenvalues.iter().map(|l| l.max(0.0).sqrt()).sum();
    let diff = mu_a - mu_b;
    let value = diff.dot(&diff) + a.trace() + b.trace() - 2.0 * tr_sqrt;
    Ok(value.max(0.0))
}

pub fn fid_from_features(a: &[Vec<f64>], b: &[Vec<f64>]) -> Result<f64> {
    let (mu_a, cov_a) = gaussian_fit(a)?;
    let (mu_b, cov_b) = gaussian_fit(b)?;
    frechet_distance(&mu_a, &cov_a, &mu_b, &cov_b)
}

pub fn fid(a: &[Image], b: &[Image], extractor: &dyn FeatureExtractor) -> Result<f64> {
    let fa = a.iter().map(|i| extractor.extract(i)).collect::<Result<Vec<_>>>()?;
    let fb = b.iter().map(|i| extractor.extract(i)).collect::<Result<Vec<_>>>()?;
    fid_from_features(&fa, &fb)
}
