//! Unpaired melanoma-to-flower style transfer with cycle-consistent GANs.
//!
//! The crate covers the whole pipeline:
//!
//! - [`nets`]: layer tables and execution for three generator variants
//!   (transposed-conv baseline, sub-pixel upsampling, sub-pixel plus
//!   self-attention) and the 70×70 patch discriminators;
//! - [`losses`]: least-squares adversarial, cycle-consistency and identity losses;
//! - [`data`]: dataset manifests, lesion-coverage split and unpaired sampling;
//! - [`training`]: the training loop, learning-rate schedule and checkpoints;
//! - [`eval`]: SSIM, Fréchet distance and questionnaire aggregation;
//! - [`serve`]: inference with model choice and resolution selection.

pub mod data;
pub mod error;
pub mod eval;
pub mod image;
pub mod losses;
pub mod nets;
pub mod serve;
pub mod synthetic;
pub mod training;

pub use error::{Error, Result};
pub use image::{ImageTensor, ValueRange};
pub use nets::{DiscriminatorKind, GeneratorVariant, LayerSpec, Mode, Network, NetworkSpec};
