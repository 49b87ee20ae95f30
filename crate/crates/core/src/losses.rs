//! Least-squares adversarial, cycle-consistency and identity losses.
//!
//! Each loss comes in two forms: a scalar form on slices and images, and a
//! tensor form ([`graph`]) used during training so gradients come from autodiff.
//! Expectations are realized as means over the batch and the patch map.

use std::fmt;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::ImageTensor;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub lambda_cycle: f64,
    pub lambda_identity: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            lambda_cycle: 10.0,
            lambda_identity: 5.0,
        }
    }
}

impl LossWeights {
    pub fn new(lambda_cycle: f64, lambda_identity: f64) -> Result<Self> {
        let w = Self {
            lambda_cycle,
            lambda_identity,
        };
        w.validate()?;
        Ok(w)
    }

    pub fn validate(&self) -> Result<()> {
        for (field, v) in [
            ("lambda_cycle", self.lambda_cycle),
            ("lambda_identity", self.lambda_identity),
        ] {
            if !v.is_finite() || v < 0.0 {
                return Err(Error::validation(
                    field,
                    format!("must be finite and non-negative, got {v}"),
                ));
            }
        }
        Ok(())
    }
}

/// The two image domains. `Melanoma` is the source, `Flower` the target.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DomainTag {
    #[serde(rename = "melanoma_X")]
    Melanoma,
    #[serde(rename = "flower_Y")]
    Flower,
}

impl fmt::Display for DomainTag {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Melanoma => "melanoma_X",
            Self::Flower => "flower_Y",
        })
    }
}

fn check_finite(name: &str, values: &[f64]) -> Result<()> {
    if values.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite(name.into()));
    }
    Ok(())
}

fn mean_sq_offset(values: &[f64], target: f64) -> f64 {
    values.iter().map(|v| (v - target).powi(2)).sum::<f64>() / values.len() as f64
}

/// `mean((D(real) − 1)²) + mean(D(fake)²)`.
pub fn lsgan_discriminator_loss(d_real: &[f64], d_fake: &[f64]) -> Result<f64> {
    check_finite("d_real", d_real)?;
    check_finite("d_fake", d_fake)?;
    if d_real.is_empty() || d_fake.is_empty() {
        return Err(Error::validation("patch_map", "empty patch map"));
    }
    Ok(mean_sq_offset(d_real, 1.0) + mean_sq_offset(d_fake, 0.0))
}

/// `mean((D(fake) − 1)²)`.
pub fn lsgan_generator_loss(d_fake: &[f64]) -> Result<f64> {
    check_finite("d_fake", d_fake)?;
    if d_fake.is_empty() {
        return Err(Error::validation("patch_map", "empty patch map"));
    }
    Ok(mean_sq_offset(d_fake, 1.0))
}

/// Mean absolute difference of two equally long slices.
pub fn mean_abs_diff(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() || a.is_empty() {
        return Err(Error::ShapeMismatch(format!(
            "L1 over {} and {} elements",
            a.len(),
            b.len()
        )));
    }
    check_finite("lhs", a)?;
    check_finite("rhs", b)?;
    Ok(a.iter().zip(b).map(|(x, y)| (x - y).abs()).sum::<f64>() / a.len() as f64)
}

fn image_l1(a: &ImageTensor, b: &ImageTensor) -> Result<f64> {
    if a.shape() != b.shape() {
        return Err(Error::ShapeMismatch(format!("{:?} vs {:?}", a.shape(), b.shape())));
    }
    let a: Vec<f64> = a.data().iter().map(|&v| v as f64).collect();
    let b: Vec<f64> = b.data().iter().map(|&v| v as f64).collect();
    mean_abs_diff(&a, &b)
}

/// Mean L1 distance between an image and its round trip through both generators.
pub fn cycle_consistency_loss(x: &ImageTensor, x_reconstructed: &ImageTensor) -> Result<f64> {
    image_l1(x, x_reconstructed)
}

/// Mean L1 distance between a target-domain image and the generator's output on it.
pub fn identity_loss(y: &ImageTensor, g_of_y: &ImageTensor) -> Result<f64> {
    image_l1(y, g_of_y)
}

/// Individual terms of the generator objective.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct GeneratorTerms {
    pub adv_g: f64,
    pub adv_f: f64,
    pub cycle_xyx: f64,
    pub cycle_yxy: f64,
    pub identity_g: f64,
    pub identity_f: f64,
}

pub fn total_generator_objective(t: &GeneratorTerms, w: &LossWeights) -> Result<f64> {
    w.validate()?;
    check_finite(
        "generator terms",
        &[t.adv_g, t.adv_f, t.cycle_xyx, t.cycle_yxy, t.identity_g, t.identity_f],
    )?;
    Ok(t.adv_g
        + t.adv_f
        + w.lambda_cycle * (t.cycle_xyx + t.cycle_yxy)
        + w.lambda_identity * (t.identity_g + t.identity_f))
}

/// Tensor forms of the losses; each returns a scalar tensor.
pub mod graph {
    use candle_core::Tensor;

    use super::LossWeights;
    use crate::error::Result;

    pub fn lsgan_discriminator(d_real: &Tensor, d_fake: &Tensor) -> Result<Tensor> {
        let real = (d_real - 1.0)?.sqr()?.mean_all()?;
        let fake = d_fake.sqr()?.mean_all()?;
        Ok((real + fake)?)
    }

    pub fn lsgan_generator(d_fake: &Tensor) -> Result<Tensor> {
        Ok((d_fake - 1.0)?.sqr()?.mean_all()?)
    }

    pub fn l1(a: &Tensor, b: &Tensor) -> Result<Tensor> {
        Ok((a - b)?.abs()?.mean_all()?)
    }

    pub struct GeneratorLosses {
        pub adv_g: Tensor,
        pub adv_f: Tensor,
        pub cycle_xyx: Tensor,
        pub cycle_yxy: Tensor,
        pub identity_g: Tensor,
        pub identity_f: Tensor,
    }

    impl GeneratorLosses {
        pub fn total(&self, w: &LossWeights) -> Result<Tensor> {
            let adv = (&self.adv_g + &self.adv_f)?;
            let cyc = ((&self.cycle_xyx + &self.cycle_yxy)? * w.lambda_cycle)?;
            let ide = ((&self.identity_g + &self.identity_f)? * w.lambda_identity)?;
            Ok(((adv + cyc)? + ide)?)
        }
    }
}

/// One line of the loss log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LossRecord {
    pub iteration: usize,
    pub epoch: usize,
    pub loss: String,
    pub value: f64,
}

/// Line-delimited JSON loss log.
pub struct LossLog {
    out: std::io::BufWriter<std::fs::File>,
}

impl LossLog {
    pub fn create(path: &Path) -> Result<Self> {
        Ok(Self {
            out: std::io::BufWriter::new(std::fs::File::create(path)?),
        })
    }

    pub fn append(path: &Path) -> Result<Self> {
        let file = std::fs::OpenOptions::new().create(true).append(true).open(path)?;
        Ok(Self {
            out: std::io::BufWriter::new(file),
        })
    }

    pub fn write(&mut self, record: &LossRecord) -> Result<()> {
        serde_json::to_writer(&mut self.out, record)?;
        self.out.write_all(b"\n")?;
        Ok(())
    }

    pub fn flush(&mut self) -> Result<()> {
        self.out.flush()?;
        Ok(())
    }
}

pub fn read_loss_log(path: &Path) -> Result<Vec<LossRecord>> {
    let text = std::fs::read_to_string(path)?;
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| serde_json::from_str(l).map_err(Error::from))
        .collect()
}
