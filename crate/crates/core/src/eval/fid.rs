//! Gaussian feature statistics and the Fréchet distance between them.

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::image::ImageTensor;

/// Maps an image to a fixed-length feature vector.
pub trait FeatureExtractor {
    fn dim(&self) -> usize;
    fn extract(&self, img: &ImageTensor) -> Result<Vec<f64>>;
}

#[derive(Debug, Clone, PartialEq)]
pub struct FeatureStats {
    pub mean: DVector<f64>,
    pub covariance: DMatrix<f64>,
    pub sample_count: usize,
}

impl FeatureStats {
    /// Mean and unbiased covariance, accumulated in input order.
    pub fn from_features(features: &[Vec<f64>]) -> Result<Self> {
        let n = features.len();
        if n < 2 {
            return Err(Error::validation("images", format!("need at least 2 samples, got {n}")));
        }
        let d = features[0].len();
        if d == 0 || features.iter().any(|f| f.len() != d) {
            return Err(Error::ShapeMismatch("feature vectors differ in length".into()));
        }
        let mut mean = DVector::zeros(d);
        for f in features {
            mean += DVector::from_column_slice(f);
        }
        mean /= n as f64;
        let mut cov = DMatrix::zeros(d, d);
        for f in features {
            let c = DVector::from_column_slice(f) - &mean;
            cov.ger(1.0, &c, &c, 1.0);
        }
        cov /= (n - 1) as f64;
        let cov = (&cov + cov.transpose()) * 0.5;
        Ok(Self {
            mean,
            covariance: cov,
            sample_count: n,
        })
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }
}

pub fn feature_stats(images: &[ImageTensor], extractor: &dyn FeatureExtractor) -> Result<FeatureStats> {
    if images.len() < 2 {
        return Err(Error::validation(
            "images",
            format!("need at least 2 images, got {}", images.len()),
        ));
    }
    let features = images
        .iter()
        .map(|img| extractor.extract(img))
        .collect::<Result<Vec<_>>>()?;
    FeatureStats::from_features(&features)
}

/// Principal square root of a symmetric positive-semidefinite matrix.
/// Eigenvalues down to `-1e-6·max(1, λ_max)` are treated as zero.
pub fn psd_sqrt(m: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    if m.iter().any(|v| !v.is_finite()) {
        return Err(Error::MatrixSqrt("non-finite entries".into()));
    }
    let sym = (m + m.transpose()) * 0.5;
    let eig = SymmetricEigen::new(sym);
    let scale = eig.eigenvalues.iter().fold(1.0f64, |a, &b| a.max(b.abs()));
    let tol = 1e-6 * scale;
    let mut roots = eig.eigenvalues.clone();
    for v in roots.iter_mut() {
        if *v < -tol {
            return Err(Error::MatrixSqrt(format!(
                "eigenvalue {v} is not positive semidefinite"
            )));
        }
        *v = v.max(0.0).sqrt();
    }
    let q = &eig.eigenvectors;
    Ok(q * DMatrix::from_diagonal(&roots) * q.transpose())
}

/// `‖μa − μb‖² + Tr(Σa + Σb − 2(Σa Σb)^{1/2})`.
///
/// The trace of `(Σa Σb)^{1/2}` is taken as the trace of the symmetric
/// `(Σa^{1/2} Σb Σa^{1/2})^{1/2}`, which shares its eigenvalues.
pub fn frechet_distance(a: &FeatureStats, b: &FeatureStats) -> Result<f64> {
    if a.dim() != b.dim() || a.covariance.shape() != b.covariance.shape() {
        return Err(Error::ShapeMismatch(format!(
            "feature dimensions {} and {}",
            a.dim(),
            b.dim()
        )));
    }
    if a.mean == b.mean && a.covariance == b.covariance {
        return Ok(0.0);
    }
    let diff = (&a.mean - &b.mean).norm_squared();
    let root_a = psd_sqrt(&a.covariance)?;
    let inner = &root_a * &b.covariance * &root_a;
    let tr_cross = psd_sqrt(&inner)?.trace();
    let d = diff + a.covariance.trace() + b.covariance.trace() - 2.0 * tr_cross;
    Ok(d.max(0.0))
}

/// Fixed random projection of an 8×8 thumbnail; deterministic for a given seed.
#[derive(Debug, Clone)]
pub struct ToyExtractor {
    projection: DMatrix<f64>,
}

pub const TOY_THUMBNAIL: usize = 8;

impl ToyExtractor {
    pub fn new(dim: usize, seed: u64) -> Self {
        let inputs = 3 * TOY_THUMBNAIL * TOY_THUMBNAIL;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let scale = 1.0 / (inputs as f64).sqrt();
        let projection = DMatrix::from_fn(dim, inputs, |_, _| {
            let v: f64 = StandardNormal.sample(&mut rng);
            v * scale
        });
        Self { projection }
    }
}

impl Default for ToyExtractor {
    fn default() -> Self {
        Self::new(16, 0)
    }
}

impl FeatureExtractor for ToyExtractor {
    fn dim(&self) -> usize {
        self.projection.nrows()
    }

    fn extract(&self, img: &ImageTensor) -> Result<Vec<f64>> {
        if img.channels() != 3 {
            return Err(Error::ShapeMismatch(format!(
                "expected RGB, got {} channels",
                img.channels()
            )));
        }
        let thumb = img.denormalized().resize(TOY_THUMBNAIL, TOY_THUMBNAIL)?;
        let v = DVector::from_iterator(thumb.data().len(), thumb.data().iter().map(|&x| x as f64));
        Ok((&self.projection * v).iter().copied().collect())
    }
}
