//! Spectral normalization by power iteration.
//!
//! [`spectral_normalize`] works on dense `f64` matrices and is the standalone
//! form of the operation. [`normalize_weight`] is the same iteration on
//! tensors, used inside discriminator forward passes with a persisted `u`.

use candle_core::Tensor;
use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};

const NORM_EPS: f64 = 1e-12;

/// Left singular vector estimate carried between calls.
#[derive(Debug, Clone, PartialEq)]
pub struct PowerIteration {
    u: DVector<f64>,
}

impl PowerIteration {
    pub fn random<R: Rng + ?Sized>(rows: usize, rng: &mut R) -> Self {
        let u = DVector::from_iterator(rows, (0..rows).map(|_| rng.sample::<f64, _>(StandardNormal)));
        let norm = u.norm().max(NORM_EPS);
        Self { u: u / norm }
    }

    pub fn from_vector(u: Vec<f64>) -> Result<Self> {
        let u = DVector::from_vec(u);
        let norm = u.norm();
        if !norm.is_finite() || norm < NORM_EPS {
            return Err(Error::validation(
                "u",
                "power-iteration vector must be finite and non-zero",
            ));
        }
        Ok(Self { u: u / norm })
    }

    pub fn vector(&self) -> &[f64] {
        self.u.as_slice()
    }
}

#[derive(Debug, Clone)]
pub struct SpectralEstimate {
    pub normalized: DMatrix<f64>,
    /// Estimated largest singular value; 0 when the matrix is degenerate.
    pub sigma: f64,
    /// True when no direction could be found (zero matrix); `normalized` is then the input.
    pub degenerate: bool,
}

/// Divides `w` by a power-iteration estimate of its largest singular value,
/// running `iters` iterations from (and updating) `state`.
pub fn spectral_normalize(w: &DMatrix<f64>, iters: usize, state: &mut PowerIteration) -> Result<SpectralEstimate> {
    if iters == 0 {
        return Err(Error::validation("iters", "at least one power iteration is required"));
    }
    if state.u.len() != w.nrows() {
        return Err(Error::ShapeMismatch(format!(
            "power-iteration vector has {} entries for a matrix with {} rows",
            state.u.len(),
            w.nrows()
        )));
    }
    if w.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("weight matrix".into()));
    }
    let degenerate = || SpectralEstimate {
        normalized: w.clone(),
        sigma: 0.0,
        degenerate: true,
    };
    let mut u = state.u.clone();
    let mut v = DVector::zeros(w.ncols());
    for _ in 0..iters {
        v = w.tr_mul(&u);
        let nv = v.norm();
        if nv < NORM_EPS {
            return Ok(degenerate());
        }
        v /= nv;
        u = w * &v;
        let nu = u.norm();
        if nu < NORM_EPS {
            return Ok(degenerate());
        }
        u /= nu;
    }
    let sigma = u.dot(&(w * &v));
    state.u = u;
    Ok(SpectralEstimate {
        normalized: w / sigma,
        sigma,
        degenerate: false,
    })
}

/// `w / sigma`, for callers that already know the exact largest singular value.
pub fn normalize_by(w: &DMatrix<f64>, sigma: f64) -> Result<DMatrix<f64>> {
    if !(sigma.is_finite() && sigma > 0.0) {
        return Err(Error::validation("sigma", format!("must be positive, got {sigma}")));
    }
    Ok(w / sigma)
}

fn l2_normalize(t: &Tensor) -> Result<Tensor> {
    let norm = t.sqr()?.sum_all()?.sqrt()?;
    Ok(t.broadcast_div(&(norm + NORM_EPS)?)?)
}

/// Spectrally normalizes a convolution weight (`Cout × …`) viewed as `Cout × rest`.
///
/// Gradients flow through the weight in the final `uᵀ W v` estimate, not
/// through the iteration vectors. Returns the normalized weight and the
/// updated `u` (unchanged when `iters == 0`).
pub fn normalize_weight(weight: &Tensor, u: &Tensor, iters: usize) -> Result<(Tensor, Tensor)> {
    let rows = weight.dim(0)?;
    let mat = weight.reshape((rows, ()))?;
    let frozen = mat.detach();
    let mut u = u.detach().reshape((rows, 1))?;
    let mut v = l2_normalize(&frozen.t()?.matmul(&u)?)?;
    for _ in 0..iters {
        u = l2_normalize(&frozen.matmul(&v)?)?;
        v = l2_normalize(&frozen.t()?.matmul(&u)?)?;
    }
    let sigma = u.t()?.matmul(&mat.matmul(&v)?)?.reshape(())?;
    let normalized = weight.broadcast_div(&sigma)?;
    Ok((normalized, u.reshape(rows)?))
}
